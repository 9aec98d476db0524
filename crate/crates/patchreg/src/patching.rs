//! Non-overlapping patch grids: partition a volume (or field) into n³
//! patches, stitch patch grids back together, and cyclically shift content
//! for the shifted-window attention pass.
//!
//! Patches are ordered lexicographically with x fastest: patch `p` sits at
//! grid coordinate `(ix, iy, iz)` where `p = iz·n² + iy·n + ix`. All
//! buffers use the crate-wide `[channels, w, h, d]` layout with `i` fastest.
//! These are the plain-buffer twins of the tape ops in [`crate::autodiff`];
//! data that needs no gradient (inputs, masks, evaluation fields) moves
//! through here.

use crate::error::{Error, Result};

// ───────────────────────────── patch grid ─────────────────────────────

/// An n×n×n partition of a `[channels, w, h, d]` buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub n: usize,
    pub dims: [usize; 3],
    pub channels: usize,
}

impl PatchGrid {
    /// Build a grid, rejecting extents that `n` does not divide evenly.
    pub fn new(dims: [usize; 3], channels: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("patch grid: n must be at least 1".into()));
        }
        if dims.iter().any(|&e| e % n != 0) {
            return Err(Error::Config(format!(
                "patch grid: dims {dims:?} not divisible by n = {n}"
            )));
        }
        Ok(PatchGrid { n, dims, channels })
    }

    /// Patches along all axes: n³.
    pub fn count(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        [self.dims[0] / self.n, self.dims[1] / self.n, self.dims[2] / self.n]
    }

    /// Elements per patch across channels.
    pub fn patch_len(&self) -> usize {
        let [pw, ph, pd] = self.patch_dims();
        self.channels * pw * ph * pd
    }

    /// Grid coordinate of patch `p`: `p = iz·n² + iy·n + ix`.
    pub fn coords(&self, p: usize) -> [usize; 3] {
        debug_assert!(p < self.count());
        [p % self.n, (p / self.n) % self.n, p / (self.n * self.n)]
    }

    /// Voxel origin of patch `p` in the full volume.
    pub fn origin(&self, p: usize) -> [usize; 3] {
        let [ix, iy, iz] = self.coords(p);
        let [pw, ph, pd] = self.patch_dims();
        [ix * pw, iy * ph, iz * pd]
    }

    /// Split `data` into n³ patch buffers, channels carried through.
    pub fn partition<T: Copy>(&self, data: &[T]) -> Vec<Vec<T>> {
        let [w, h, d] = self.dims;
        assert_eq!(data.len(), self.channels * w * h * d, "partition: buffer length");
        let [pw, ph, pd] = self.patch_dims();
        (0..self.count())
            .map(|p| {
                let [ox, oy, oz] = self.origin(p);
                let mut out = Vec::with_capacity(self.patch_len());
                for c in 0..self.channels {
                    for k in 0..pd {
                        for j in 0..ph {
                            let row = ((c * d + oz + k) * h + oy + j) * w + ox;
                            out.extend_from_slice(&data[row..row + pw]);
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// Reassemble n³ patches into a full buffer; the exact inverse of
    /// [`Self::partition`].
    pub fn stitch<T: Copy + Default>(&self, patches: &[Vec<T>]) -> Result<Vec<T>> {
        if patches.len() != self.count() {
            return Err(Error::Config(format!(
                "stitch: got {} patches, expected n³ = {}",
                patches.len(),
                self.count()
            )));
        }
        let plen = self.patch_len();
        if let Some(bad) = patches.iter().position(|p| p.len() != plen) {
            return Err(Error::Config(format!(
                "stitch: patch {bad} has {} elements, expected {plen}",
                patches[bad].len()
            )));
        }
        let [w, h, d] = self.dims;
        let [pw, ph, pd] = self.patch_dims();
        let mut out = vec![T::default(); self.channels * w * h * d];
        for (p, patch) in patches.iter().enumerate() {
            let [ox, oy, oz] = self.origin(p);
            let mut src = 0;
            for c in 0..self.channels {
                for k in 0..pd {
                    for j in 0..ph {
                        let row = ((c * d + oz + k) * h + oy + j) * w + ox;
                        out[row..row + pw].copy_from_slice(&patch[src..src + pw]);
                        src += pw;
                    }
                }
            }
        }
        Ok(out)
    }
}

// ───────────────────────────── cyclic shift ─────────────────────────────

/// Cyclically shift a `[channels, w, h, d]` buffer:
/// `out(i,j,k) = in((i+ow) mod w, (j+oh) mod h, (k+od) mod d)`.
pub fn cyclic_shift<T: Copy>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    offsets: [isize; 3],
) -> Vec<T> {
    let [w, h, d] = dims;
    assert_eq!(data.len(), channels * w * h * d, "cyclic_shift: buffer length");
    let wrap = |p: usize, o: isize, dim: usize| (p as isize + o).rem_euclid(dim as isize) as usize;
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        for k in 0..d {
            let sk = wrap(k, offsets[2], d);
            for j in 0..h {
                let sj = wrap(j, offsets[1], h);
                for i in 0..w {
                    let si = wrap(i, offsets[0], w);
                    out.push(data[((c * d + sk) * h + sj) * w + si]);
                }
            }
        }
    }
    out
}

/// Inverse of [`cyclic_shift`] with the same offsets.
pub fn cyclic_unshift<T: Copy>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    offsets: [isize; 3],
) -> Vec<T> {
    cyclic_shift(data, channels, dims, [-offsets[0], -offsets[1], -offsets[2]])
}

// ───────────────────────────── window layout ─────────────────────────────

/// How one attention window (a patch-sized block of the deformation field)
/// splits into m³ non-overlapping regions, each a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub m: usize,
    pub patch_dims: [usize; 3],
}

impl WindowLayout {
    pub fn new(patch_dims: [usize; 3], m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("window layout: m must be at least 1".into()));
        }
        if patch_dims.iter().any(|&e| e % m != 0) {
            return Err(Error::Config(format!(
                "window layout: patch dims {patch_dims:?} not divisible by m = {m}"
            )));
        }
        Ok(WindowLayout { m, patch_dims })
    }

    /// Voxel extent of one region (token) per axis.
    pub fn region_dims(&self) -> [usize; 3] {
        [self.patch_dims[0] / self.m, self.patch_dims[1] / self.m, self.patch_dims[2] / self.m]
    }

    /// Tokens per window: m³.
    pub fn tokens(&self) -> usize {
        self.m * self.m * self.m
    }

    /// Elements per token for a `channels`-channel field.
    pub fn token_dim(&self, channels: usize) -> usize {
        let [sx, sy, sz] = self.region_dims();
        channels * sx * sy * sz
    }
}
