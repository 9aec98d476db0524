//! Spatial / geometric tape ops: trilinear warping, nearest-neighbor
//! upsampling, forward finite differences, patch extraction and assembly,
//! cyclic shifts, and the region-token (de)flattening used by the attention
//! stitcher.
//!
//! Volumes are `[c, w, h, d]` with `w` contiguous; displacement fields are
//! `[3, w, h, d]` in voxel units (channel 0 displaces along w, 1 along h,
//! 2 along d).

use super::{seq_sum, vol4, Element, Op, Tape, Val};

// ── trilinear warp ──────────────────────────────────────────────────────────

/// Per-axis interpolation setup: clamped base index, fractional offset, and
/// whether the coordinate was strictly interior (gradient passes through the
/// clamp only there).
#[inline]
fn axis_lerp<T: Element>(pos: T, n: usize) -> (usize, T, bool) {
    let nm1 = T::from_f64((n - 1) as f64);
    let interior = pos > T::zero() && pos < nm1;
    let c = if pos < T::zero() {
        T::zero()
    } else if pos > nm1 {
        nm1
    } else {
        pos
    };
    let mut i0 = c.to_f64().floor() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    (i0, c - T::from_f64(i0 as f64), interior)
}

/// Pull-style warp: `out(c,p) = vol(c, p + field(p))`, trilinear, coordinates
/// clamped to the volume. Exact (bit-level) at integer sample positions.
pub(crate) fn warp_forward<T: Element>(vol: &[T], field: &[T], vol_shape: &[usize]) -> Vec<T> {
    let (c, w, h, d) = vol4(vol_shape);
    let vox = w * h * d;
    let mut out = vec![T::zero(); vol.len()];
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let p = (k * h + j) * w + i;
                let px = T::from_f64(i as f64) + field[p];
                let py = T::from_f64(j as f64) + field[vox + p];
                let pz = T::from_f64(k as f64) + field[2 * vox + p];
                let (x0, fx, _) = axis_lerp(px, w);
                let (y0, fy, _) = axis_lerp(py, h);
                let (z0, fz, _) = axis_lerp(pz, d);
                let (gx0, gx1) = (T::one() - fx, fx);
                let (gy0, gy1) = (T::one() - fy, fy);
                let (gz0, gz1) = (T::one() - fz, fz);
                let base = (z0 * h + y0) * w + x0;
                for ch in 0..c {
                    let v = &vol[ch * vox..];
                    let (b0, b1) = (base, base + h * w);
                    let s000 = v[b0];
                    let s100 = v[b0 + 1];
                    let s010 = v[b0 + w];
                    let s110 = v[b0 + w + 1];
                    let s001 = v[b1];
                    let s101 = v[b1 + 1];
                    let s011 = v[b1 + w];
                    let s111 = v[b1 + w + 1];
                    let c00 = gx0 * s000 + gx1 * s100;
                    let c10 = gx0 * s010 + gx1 * s110;
                    let c01 = gx0 * s001 + gx1 * s101;
                    let c11 = gx0 * s011 + gx1 * s111;
                    let c0 = gy0 * c00 + gy1 * c10;
                    let c1 = gy0 * c01 + gy1 * c11;
                    out[ch * vox + p] = gz0 * c0 + gz1 * c1;
                }
            }
        }
    }
    out
}

/// Scatter adjoint of the warp with respect to the sampled volume.
pub(crate) fn warp_backward_vol<T: Element>(field: &[T], vol_shape: &[usize], g: &[T], gvol: &mut [T]) {
    let (c, w, h, d) = vol4(vol_shape);
    let vox = w * h * d;
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let p = (k * h + j) * w + i;
                let px = T::from_f64(i as f64) + field[p];
                let py = T::from_f64(j as f64) + field[vox + p];
                let pz = T::from_f64(k as f64) + field[2 * vox + p];
                let (x0, fx, _) = axis_lerp(px, w);
                let (y0, fy, _) = axis_lerp(py, h);
                let (z0, fz, _) = axis_lerp(pz, d);
                let (gx0, gx1) = (T::one() - fx, fx);
                let (gy0, gy1) = (T::one() - fy, fy);
                let (gz0, gz1) = (T::one() - fz, fz);
                let base = (z0 * h + y0) * w + x0;
                for ch in 0..c {
                    let gp = g[ch * vox + p];
                    let gv = &mut gvol[ch * vox..(ch + 1) * vox];
                    let (b0, b1) = (base, base + h * w);
                    gv[b0] = (gx0 * gy0 * gz0).mul_add(gp, gv[b0]);
                    gv[b0 + 1] = (gx1 * gy0 * gz0).mul_add(gp, gv[b0 + 1]);
                    gv[b0 + w] = (gx0 * gy1 * gz0).mul_add(gp, gv[b0 + w]);
                    gv[b0 + w + 1] = (gx1 * gy1 * gz0).mul_add(gp, gv[b0 + w + 1]);
                    gv[b1] = (gx0 * gy0 * gz1).mul_add(gp, gv[b1]);
                    gv[b1 + 1] = (gx1 * gy0 * gz1).mul_add(gp, gv[b1 + 1]);
                    gv[b1 + w] = (gx0 * gy1 * gz1).mul_add(gp, gv[b1 + w]);
                    gv[b1 + w + 1] = (gx1 * gy1 * gz1).mul_add(gp, gv[b1 + w + 1]);
                }
            }
        }
    }
}

/// Adjoint of the warp with respect to the displacement field. The gradient
/// of a clamped coordinate is zero outside the open interval (0, dim-1).
pub(crate) fn warp_backward_field<T: Element>(
    vol: &[T],
    field: &[T],
    vol_shape: &[usize],
    g: &[T],
    gfield: &mut [T],
) {
    let (c, w, h, d) = vol4(vol_shape);
    let vox = w * h * d;
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let p = (k * h + j) * w + i;
                let px = T::from_f64(i as f64) + field[p];
                let py = T::from_f64(j as f64) + field[vox + p];
                let pz = T::from_f64(k as f64) + field[2 * vox + p];
                let (x0, fx, bx) = axis_lerp(px, w);
                let (y0, fy, by) = axis_lerp(py, h);
                let (z0, fz, bz) = axis_lerp(pz, d);
                let (gx0, gx1) = (T::one() - fx, fx);
                let (gy0, gy1) = (T::one() - fy, fy);
                let (gz0, gz1) = (T::one() - fz, fz);
                let base = (z0 * h + y0) * w + x0;
                let (mut ax, mut ay, mut az) = (T::zero(), T::zero(), T::zero());
                for ch in 0..c {
                    let v = &vol[ch * vox..];
                    let (b0, b1) = (base, base + h * w);
                    let s000 = v[b0];
                    let s100 = v[b0 + 1];
                    let s010 = v[b0 + w];
                    let s110 = v[b0 + w + 1];
                    let s001 = v[b1];
                    let s101 = v[b1 + 1];
                    let s011 = v[b1 + w];
                    let s111 = v[b1 + w + 1];
                    let gp = g[ch * vox + p];
                    let dpx = gy0 * gz0 * (s100 - s000)
                        + gy1 * gz0 * (s110 - s010)
                        + gy0 * gz1 * (s101 - s001)
                        + gy1 * gz1 * (s111 - s011);
                    let dpy = gx0 * gz0 * (s010 - s000)
                        + gx1 * gz0 * (s110 - s100)
                        + gx0 * gz1 * (s011 - s001)
                        + gx1 * gz1 * (s111 - s101);
                    let dpz = gx0 * gy0 * (s001 - s000)
                        + gx1 * gy0 * (s101 - s100)
                        + gx0 * gy1 * (s011 - s010)
                        + gx1 * gy1 * (s111 - s110);
                    ax = dpx.mul_add(gp, ax);
                    ay = dpy.mul_add(gp, ay);
                    az = dpz.mul_add(gp, az);
                }
                if bx {
                    gfield[p] = gfield[p] + ax;
                }
                if by {
                    gfield[vox + p] = gfield[vox + p] + ay;
                }
                if bz {
                    gfield[2 * vox + p] = gfield[2 * vox + p] + az;
                }
            }
        }
    }
}

// ── upsample / finite differences ───────────────────────────────────────────

pub(crate) fn upsample2_forward<T: Element>(x: &[T], x_shape: &[usize]) -> Vec<T> {
    let (c, w, h, d) = vol4(x_shape);
    let (w2, h2, d2) = (2 * w, 2 * h, 2 * d);
    let mut out = vec![T::zero(); c * w2 * h2 * d2];
    for ch in 0..c {
        for z in 0..d2 {
            for y in 0..h2 {
                let xrow = &x[((ch * d + z / 2) * h + y / 2) * w..((ch * d + z / 2) * h + y / 2 + 1) * w];
                let orow = &mut out[((ch * d2 + z) * h2 + y) * w2..((ch * d2 + z) * h2 + y + 1) * w2];
                for (i, o) in orow.iter_mut().enumerate() {
                    *o = xrow[i / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Element>(g: &[T], x_shape: &[usize], gx: &mut [T]) {
    let (c, w, h, d) = vol4(x_shape);
    let (w2, h2, d2) = (2 * w, 2 * h, 2 * d);
    for ch in 0..c {
        for z in 0..d2 {
            for y in 0..h2 {
                let grow = &g[((ch * d2 + z) * h2 + y) * w2..((ch * d2 + z) * h2 + y + 1) * w2];
                let gxrow = &mut gx[((ch * d + z / 2) * h + y / 2) * w..((ch * d + z / 2) * h + y / 2 + 1) * w];
                for i in 0..w {
                    gxrow[i] = gxrow[i] + grow[2 * i] + grow[2 * i + 1];
                }
            }
        }
    }
}

/// Forward difference along `axis` (0 = w, 1 = h, 2 = d); the last slice
/// along that axis is zero, so output shape equals input shape.
pub(crate) fn axis_diff_forward<T: Element>(x: &[T], x_shape: &[usize], axis: usize) -> Vec<T> {
    let (c, w, h, d) = vol4(x_shape);
    let mut out = vec![T::zero(); x.len()];
    let stride = match axis {
        0 => 1,
        1 => w,
        2 => w * h,
        _ => panic!("axis_diff: axis must be 0, 1, or 2"),
    };
    let extent = [w, h, d][axis];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for i in 0..w {
                    let pos = [i, y, z][axis];
                    if pos + 1 >= extent {
                        continue;
                    }
                    let idx = ((ch * d + z) * h + y) * w + i;
                    out[idx] = x[idx + stride] - x[idx];
                }
            }
        }
    }
    out
}

pub(crate) fn axis_diff_backward<T: Element>(g: &[T], x_shape: &[usize], axis: usize, gx: &mut [T]) {
    let (c, w, h, d) = vol4(x_shape);
    let stride = match axis {
        0 => 1,
        1 => w,
        2 => w * h,
        _ => unreachable!(),
    };
    let extent = [w, h, d][axis];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for i in 0..w {
                    let pos = [i, y, z][axis];
                    if pos + 1 >= extent {
                        continue;
                    }
                    let idx = ((ch * d + z) * h + y) * w + i;
                    let gv = g[idx];
                    gx[idx + stride] = gx[idx + stride] + gv;
                    gx[idx] = gx[idx] - gv;
                }
            }
        }
    }
}

// ── patch extraction / assembly ─────────────────────────────────────────────

pub(crate) fn extract_patch_forward<T: Element>(
    x: &[T],
    x_shape: &[usize],
    origin: [usize; 3],
    size: [usize; 3],
) -> Vec<T> {
    let (c, w, h, d) = vol4(x_shape);
    let [pw, ph, pd] = size;
    let mut out = vec![T::zero(); c * pw * ph * pd];
    for ch in 0..c {
        for z in 0..pd {
            for y in 0..ph {
                let src = ((ch * d + origin[2] + z) * h + origin[1] + y) * w + origin[0];
                let dst = ((ch * pd + z) * ph + y) * pw;
                out[dst..dst + pw].copy_from_slice(&x[src..src + pw]);
            }
        }
    }
    out
}

pub(crate) fn extract_patch_backward<T: Element>(
    g: &[T],
    x_shape: &[usize],
    origin: [usize; 3],
    size: [usize; 3],
    gx: &mut [T],
) {
    let (c, w, h, d) = vol4(x_shape);
    let [pw, ph, pd] = size;
    for ch in 0..c {
        for z in 0..pd {
            for y in 0..ph {
                let dst = ((ch * d + origin[2] + z) * h + origin[1] + y) * w + origin[0];
                let src = ((ch * pd + z) * ph + y) * pw;
                for i in 0..pw {
                    gx[dst + i] = gx[dst + i] + g[src + i];
                }
            }
        }
    }
}

/// Block origin of patch `p_idx` in an n-per-axis grid; index order is
/// x fastest: p = (iz·n + iy)·n + ix.
fn patch_origin(p_idx: usize, n: usize, psize: &[usize; 3]) -> [usize; 3] {
    let ix = p_idx % n;
    let iy = (p_idx / n) % n;
    let iz = p_idx / (n * n);
    [ix * psize[0], iy * psize[1], iz * psize[2]]
}

pub(crate) fn assemble_backward<T: Element>(
    g: &[T],
    full_shape: &[usize],
    patch_shape: &[usize],
    n: usize,
    p_idx: usize,
    gp: &mut [T],
) {
    let (c, w, h, d) = vol4(full_shape);
    let (pc, pw, ph, pd) = vol4(patch_shape);
    debug_assert_eq!(c, pc);
    let origin = patch_origin(p_idx, n, &[pw, ph, pd]);
    for ch in 0..c {
        for z in 0..pd {
            for y in 0..ph {
                let src = ((ch * d + origin[2] + z) * h + origin[1] + y) * w + origin[0];
                let dst = ((ch * pd + z) * ph + y) * pw;
                for i in 0..pw {
                    gp[dst + i] = gp[dst + i] + g[src + i];
                }
            }
        }
    }
}

// ── cyclic shift ────────────────────────────────────────────────────────────

/// `out(i,j,k) = in((i+ow) mod w, (j+oh) mod h, (k+od) mod d)`.
pub(crate) fn cyclic_shift_forward<T: Element>(x: &[T], shape: &[usize], offs: [i64; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    cyclic_shift_acc(x, shape, offs, &mut out);
    out
}

/// Accumulating variant used both by the forward op (into zeros) and as the
/// adjoint (same gather with negated offsets).
pub(crate) fn cyclic_shift_acc<T: Element>(x: &[T], shape: &[usize], offs: [i64; 3], out: &mut [T]) {
    let (c, w, h, d) = vol4(shape);
    let shift = |p: usize, o: i64, n: usize| -> usize { (p as i64 + o).rem_euclid(n as i64) as usize };
    for ch in 0..c {
        for z in 0..d {
            let sz = shift(z, offs[2], d);
            for y in 0..h {
                let sy = shift(y, offs[1], h);
                let src = &x[((ch * d + sz) * h + sy) * w..((ch * d + sz) * h + sy + 1) * w];
                let dst = &mut out[((ch * d + z) * h + y) * w..((ch * d + z) * h + y + 1) * w];
                for i in 0..w {
                    let si = shift(i, offs[0], w);
                    dst[i] = dst[i] + src[si];
                }
            }
        }
    }
}

// ── region tokens ───────────────────────────────────────────────────────────

/// Flatten `[c, w, h, d]` into `m³` region tokens, x-fastest region order
/// t = (rz·m + ry)·m + rx; within a token, element order is
/// e = ((c·sz + lz)·sy + ly)·sx + lx with region sides s = dim/m.
pub(crate) fn tokenize_forward<T: Element>(x: &[T], x_shape: &[usize], m: usize) -> Vec<T> {
    let (c, w, h, d) = vol4(x_shape);
    let (sx, sy, sz) = (w / m, h / m, d / m);
    let e_dim = c * sx * sy * sz;
    let mut out = vec![T::zero(); m * m * m * e_dim];
    for rz in 0..m {
        for ry in 0..m {
            for rx in 0..m {
                let t = (rz * m + ry) * m + rx;
                let tok = &mut out[t * e_dim..(t + 1) * e_dim];
                for ch in 0..c {
                    for lz in 0..sz {
                        for ly in 0..sy {
                            let src = ((ch * d + rz * sz + lz) * h + ry * sy + ly) * w + rx * sx;
                            let dst = ((ch * sz + lz) * sy + ly) * sx;
                            tok[dst..dst + sx].copy_from_slice(&x[src..src + sx]);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn tokenize_backward<T: Element>(g: &[T], x_shape: &[usize], m: usize, gx: &mut [T]) {
    let (c, w, h, d) = vol4(x_shape);
    let (sx, sy, sz) = (w / m, h / m, d / m);
    let e_dim = c * sx * sy * sz;
    for rz in 0..m {
        for ry in 0..m {
            for rx in 0..m {
                let t = (rz * m + ry) * m + rx;
                let tok = &g[t * e_dim..(t + 1) * e_dim];
                for ch in 0..c {
                    for lz in 0..sz {
                        for ly in 0..sy {
                            let dst = ((ch * d + rz * sz + lz) * h + ry * sy + ly) * w + rx * sx;
                            let src = ((ch * sz + lz) * sy + ly) * sx;
                            for i in 0..sx {
                                gx[dst + i] = gx[dst + i] + tok[src + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn detokenize_forward<T: Element>(tokens: &[T], c: usize, dims: [usize; 3], m: usize) -> Vec<T> {
    let [w, h, d] = dims;
    let (sx, sy, sz) = (w / m, h / m, d / m);
    let e_dim = c * sx * sy * sz;
    let mut out = vec![T::zero(); c * w * h * d];
    for rz in 0..m {
        for ry in 0..m {
            for rx in 0..m {
                let t = (rz * m + ry) * m + rx;
                let tok = &tokens[t * e_dim..(t + 1) * e_dim];
                for ch in 0..c {
                    for lz in 0..sz {
                        for ly in 0..sy {
                            let dst = ((ch * d + rz * sz + lz) * h + ry * sy + ly) * w + rx * sx;
                            let src = ((ch * sz + lz) * sy + ly) * sx;
                            out[dst..dst + sx].copy_from_slice(&tok[src..src + sx]);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn detokenize_backward<T: Element>(g: &[T], c: usize, dims: [usize; 3], m: usize, gtok: &mut [T]) {
    let [w, h, d] = dims;
    let (sx, sy, sz) = (w / m, h / m, d / m);
    let e_dim = c * sx * sy * sz;
    for rz in 0..m {
        for ry in 0..m {
            for rx in 0..m {
                let t = (rz * m + ry) * m + rx;
                let tok = &mut gtok[t * e_dim..(t + 1) * e_dim];
                for ch in 0..c {
                    for lz in 0..sz {
                        for ly in 0..sy {
                            let src = ((ch * d + rz * sz + lz) * h + ry * sy + ly) * w + rx * sx;
                            let dst = ((ch * sz + lz) * sy + ly) * sx;
                            for i in 0..sx {
                                tok[dst + i] = tok[dst + i] + g[src + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── tape ops ────────────────────────────────────────────────────────────────

impl<T: Element> Tape<T> {
    /// Per-channel mean over all voxels: `[c,w,h,d] -> [c]`.
    pub fn spatial_mean(&mut self, x: Val) -> Val {
        let (c, w, h, d) = vol4(self.shape(x));
        let vox = w * h * d;
        let inv = T::one() / T::from_f64(vox as f64);
        let data: Vec<T> = (0..c)
            .map(|ch| seq_sum(&self.data(x)[ch * vox..(ch + 1) * vox]) * inv)
            .collect();
        let ng = self.needs_grad(x);
        self.push(Op::SpatialMean(x), vec![c], data, ng)
    }

    /// Nearest-neighbor 2x upsampling along all three spatial axes.
    pub fn upsample2(&mut self, x: Val) -> Val {
        let (c, w, h, d) = vol4(self.shape(x));
        let data = upsample2_forward(self.data(x), self.shape(x));
        let ng = self.needs_grad(x);
        self.push(Op::Upsample2(x), vec![c, 2 * w, 2 * h, 2 * d], data, ng)
    }

    /// Forward finite difference along a spatial axis, zero at the far border.
    pub fn axis_diff(&mut self, x: Val, axis: usize) -> Val {
        assert!(axis < 3, "axis_diff: axis must be 0, 1, or 2");
        let shape = self.shape(x).to_vec();
        let data = axis_diff_forward(self.data(x), &shape, axis);
        let ng = self.needs_grad(x);
        self.push(Op::AxisDiff { x, axis }, shape, data, ng)
    }

    /// Trilinear pull-back of `vol` through the displacement `field`
    /// (`[3,w,h,d]`, voxel units). Sample coordinates clamp to the volume.
    pub fn warp_trilinear(&mut self, vol: Val, field: Val) -> Val {
        let vshape = self.shape(vol).to_vec();
        let (_, w, h, d) = vol4(&vshape);
        assert!(w >= 2 && h >= 2 && d >= 2, "warp: spatial dims must be >= 2");
        assert_eq!(
            self.shape(field),
            &[3, w, h, d],
            "warp: field must be [3,{w},{h},{d}]"
        );
        let data = warp_forward(self.data(vol), self.data(field), &vshape);
        let ng = self.needs_grad(vol) || self.needs_grad(field);
        self.push(Op::WarpTrilinear { vol, field }, vshape, data, ng)
    }

    /// Stack volumes along the channel axis; spatial dims must agree.
    pub fn concat_channels(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat_channels: empty input");
        let (_, w, h, d) = vol4(self.shape(parts[0]));
        let mut c_total = 0usize;
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (pc, pw, ph, pd) = vol4(self.shape(p));
            assert!(
                (pw, ph, pd) == (w, h, d),
                "concat_channels: spatial dims differ"
            );
            c_total += pc;
            data.extend_from_slice(self.data(p));
            ng |= self.needs_grad(p);
        }
        self.push(Op::ConcatChannels(parts.to_vec()), vec![c_total, w, h, d], data, ng)
    }

    /// Copy the sub-box at `origin` of extent `size` (both `[x,y,z]`).
    pub fn extract_patch(&mut self, x: Val, origin: [usize; 3], size: [usize; 3]) -> Val {
        let (c, w, h, d) = vol4(self.shape(x));
        assert!(
            origin[0] + size[0] <= w && origin[1] + size[1] <= h && origin[2] + size[2] <= d,
            "extract_patch: box out of bounds"
        );
        let data = extract_patch_forward(self.data(x), self.shape(x), origin, size);
        let ng = self.needs_grad(x);
        self.push(
            Op::ExtractPatch { x, origin, size },
            vec![c, size[0], size[1], size[2]],
            data,
            ng,
        )
    }

    /// Reassemble n³ equally shaped patches (x-fastest order) into one volume.
    pub fn assemble_patches(&mut self, patches: &[Val], n: usize) -> Val {
        assert_eq!(patches.len(), n * n * n, "assemble_patches: need n^3 patches");
        let pshape = self.shape(patches[0]).to_vec();
        let (c, pw, ph, pd) = vol4(&pshape);
        let full = vec![c, n * pw, n * ph, n * pd];
        let mut data = vec![T::zero(); c * full[1] * full[2] * full[3]];
        let mut ng = false;
        for (p_idx, &p) in patches.iter().enumerate() {
            assert_eq!(self.shape(p), &pshape[..], "assemble_patches: patch shapes differ");
            ng |= self.needs_grad(p);
            let origin = patch_origin(p_idx, n, &[pw, ph, pd]);
            let src_all = self.data(p);
            for ch in 0..c {
                for z in 0..pd {
                    for y in 0..ph {
                        let dst = ((ch * full[3] + origin[2] + z) * full[2] + origin[1] + y) * full[1] + origin[0];
                        let src = ((ch * pd + z) * ph + y) * pw;
                        data[dst..dst + pw].copy_from_slice(&src_all[src..src + pw]);
                    }
                }
            }
        }
        self.push(Op::AssemblePatches { patches: patches.to_vec(), n }, full, data, ng)
    }

    /// Modular translation: `out(p) = x((p + offs) mod dims)` per axis.
    pub fn cyclic_shift(&mut self, x: Val, offsets: [i64; 3]) -> Val {
        let shape = self.shape(x).to_vec();
        let data = cyclic_shift_forward(self.data(x), &shape, offsets);
        let ng = self.needs_grad(x);
        self.push(Op::CyclicShift { x, offsets }, shape, data, ng)
    }

    /// Split a volume into m³ region tokens: `[c,w,h,d] -> [m³, c·(w/m)(h/m)(d/m)]`.
    pub fn tokenize(&mut self, x: Val, m: usize) -> Val {
        let (c, w, h, d) = vol4(self.shape(x));
        assert!(
            m >= 1 && w % m == 0 && h % m == 0 && d % m == 0,
            "tokenize: dims {w}x{h}x{d} not divisible by m={m}"
        );
        let e_dim = c * (w / m) * (h / m) * (d / m);
        let data = tokenize_forward(self.data(x), self.shape(x), m);
        let ng = self.needs_grad(x);
        self.push(Op::Tokenize { x, m }, vec![m * m * m, e_dim], data, ng)
    }

    /// Exact inverse of `tokenize` for the stated channel count and dims.
    pub fn detokenize(&mut self, tokens: Val, channels: usize, dims: [usize; 3], m: usize) -> Val {
        let [w, h, d] = dims;
        let e_dim = channels * (w / m) * (h / m) * (d / m);
        assert_eq!(
            self.shape(tokens),
            &[m * m * m, e_dim],
            "detokenize: token shape does not match geometry"
        );
        let data = detokenize_forward(self.data(tokens), channels, dims, m);
        let ng = self.needs_grad(tokens);
        self.push(
            Op::Detokenize { tokens, channels, dims, m },
            vec![channels, w, h, d],
            data,
            ng,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn warp_zero_field_is_identity_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let vol = rand_vec(&mut rng, 2 * 4 * 3 * 5);
        let mut t = Tape::<f64>::new();
        let v = t.leaf(vol.clone(), vec![2, 4, 3, 5], false);
        let f = t.leaf(vec![0.0; 3 * 60], vec![3, 4, 3, 5], false);
        let o = t.warp_trilinear(v, f);
        assert_eq!(t.data(o), &vol[..]);
    }

    #[test]
    fn warp_unit_shift_samples_neighbor_with_border_clamp() {
        let vol: Vec<f64> = (0..5).map(|i| (i * i) as f64).collect();
        let mut field = vec![0.0; 15];
        for v in field[..5].iter_mut() {
            *v = 1.0;
        }
        let mut t = Tape::<f64>::new();
        let v = t.leaf(vol.clone(), vec![1, 5, 1, 1], false);
        // h = d = 1 is below the sampler's minimum; embed in a 5x2x2 volume instead
        drop(t);
        let mut t = Tape::<f64>::new();
        let mut vol3 = vec![0.0; 5 * 2 * 2];
        for z in 0..2 {
            for y in 0..2 {
                for i in 0..5 {
                    vol3[(z * 2 + y) * 5 + i] = vol[i];
                }
            }
        }
        let mut field3 = vec![0.0; 3 * 20];
        for u in field3[..20].iter_mut() {
            *u = 1.0;
        }
        let v3 = t.leaf(vol3.clone(), vec![1, 5, 2, 2], false);
        let f3 = t.leaf(field3, vec![3, 5, 2, 2], false);
        let o = t.warp_trilinear(v3, f3);
        let out = t.data(o);
        for z in 0..2 {
            for y in 0..2 {
                for i in 0..5 {
                    let expect = vol[(i + 1).min(4)];
                    assert_eq!(out[(z * 2 + y) * 5 + i], expect);
                }
            }
        }
        let _ = v;
    }

    #[test]
    fn warp_fractional_offset_matches_hand_lerp() {
        let mut t = Tape::<f64>::new();
        let mut vol = vec![0.0; 8];
        vol[0] = 2.0; // (0,0,0)
        vol[1] = 6.0; // (1,0,0)
        let mut field = vec![0.0; 24];
        field[0] = 0.25; // x-displacement at voxel (0,0,0)
        let v = t.leaf(vol, vec![1, 2, 2, 2], false);
        let f = t.leaf(field, vec![3, 2, 2, 2], false);
        let o = t.warp_trilinear(v, f);
        assert!((t.data(o)[0] - (0.75 * 2.0 + 0.25 * 6.0)).abs() < 1e-15);
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let vshape = vec![2usize, 3, 3, 3];
        let fshape = vec![3usize, 3, 3, 3];
        let vol = rand_vec(&mut rng, 54);
        let field: Vec<f64> = (0..81).map(|_| rng.gen_range(-0.7..0.7)).collect();

        let run = |vol: &[f64], field: &[f64]| -> f64 {
            let mut t = Tape::<f64>::new();
            let v = t.leaf(vol.to_vec(), vshape.clone(), true);
            let f = t.leaf(field.to_vec(), fshape.clone(), true);
            let o = t.warp_trilinear(v, f);
            let s = t.square(o);
            let m = t.mean(s);
            t.data(m)[0]
        };

        let mut t = Tape::<f64>::new();
        let v = t.leaf(vol.clone(), vshape.clone(), true);
        let f = t.leaf(field.clone(), fshape.clone(), true);
        let o = t.warp_trilinear(v, f);
        let s = t.square(o);
        let m = t.mean(s);
        t.backward(m);

        let eps = 1e-6;
        for (idx, base) in [(7usize, true), (30, true), (5, false), (44, false), (78, false)] {
            let analytic = if base { t.grad(v)[idx] } else { t.grad(f)[idx] };
            let (mut a, mut b) = (vol.clone(), field.clone());
            if base {
                a[idx] += eps;
            } else {
                b[idx] += eps;
            }
            let up = run(&a, &b);
            let (mut a, mut b) = (vol.clone(), field.clone());
            if base {
                a[idx] -= eps;
            } else {
                b[idx] -= eps;
            }
            let dn = run(&a, &b);
            let numeric = (up - dn) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "idx {idx} vol={base}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn upsample_replicates_and_backward_counts_eight() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![3.0, -1.0], vec![1, 2, 1, 1], true);
        // shape [1,2,1,1] upsamples to [1,4,2,2]
        let u = t.upsample2(x);
        assert_eq!(t.shape(u), &[1, 4, 2, 2]);
        let out = t.data(u).to_vec();
        for z in 0..2 {
            for y in 0..2 {
                assert_eq!(&out[(z * 2 + y) * 4..(z * 2 + y) * 4 + 4], &[3.0, 3.0, -1.0, -1.0]);
            }
        }
        let s = t.sum(u);
        t.backward(s);
        assert_eq!(t.grad(x), &[8.0, 8.0]);
    }

    #[test]
    fn axis_diff_of_ramp_and_its_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![0.0, 1.0, 4.0, 9.0], vec![1, 4, 1, 1], true);
        let dx = t.axis_diff(x, 0);
        assert_eq!(t.data(dx), &[1.0, 3.0, 5.0, 0.0]);
        let s = t.sum(dx);
        t.backward(s);
        // d/dx of (x3 - x0) = [-1, 0, 0, 1]
        assert_eq!(t.grad(x), &[-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn axis_diff_axes_use_correct_strides() {
        // 2x2x2 single channel, value = i + 10j + 100k
        let mut vals = vec![0.0; 8];
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    vals[(k * 2 + j) * 2 + i] = i as f64 + 10.0 * j as f64 + 100.0 * k as f64;
                }
            }
        }
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vals, vec![1, 2, 2, 2], false);
        for (axis, expect) in [(0usize, 1.0), (1, 10.0), (2, 100.0)] {
            let dx = t.axis_diff(x, axis);
            assert_eq!(t.data(dx)[0], expect, "axis {axis}");
        }
    }

    #[test]
    fn extract_assemble_roundtrip_is_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let vol = rand_vec(&mut rng, 2 * 4 * 4 * 4);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vol.clone(), vec![2, 4, 4, 4], false);
        let mut patches = Vec::new();
        for iz in 0..2 {
            for iy in 0..2 {
                for ix in 0..2 {
                    patches.push(t.extract_patch(x, [ix * 2, iy * 2, iz * 2], [2, 2, 2]));
                }
            }
        }
        let back = t.assemble_patches(&patches, 2);
        assert_eq!(t.data(back), &vol[..]);
    }

    #[test]
    fn assemble_constant_patches_forms_block_volume() {
        let mut t = Tape::<f64>::new();
        let patches: Vec<_> = (0..8)
            .map(|p| t.leaf(vec![p as f64; 8], vec![1, 2, 2, 2], false))
            .collect();
        let full = t.assemble_patches(&patches, 2);
        let data = t.data(full);
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let expect = (k / 2 * 4 + j / 2 * 2 + i / 2) as f64;
                    assert_eq!(data[(k * 4 + j) * 4 + i], expect, "at ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn extract_patch_gradient_scatters_into_box() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf((0..8).map(|v| v as f64).collect(), vec![1, 2, 2, 2], true);
        let p = t.extract_patch(x, [1, 0, 0], [1, 2, 2]);
        let s = t.sum(p);
        t.backward(s);
        assert_eq!(t.grad(x), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn cyclic_shift_wraps_and_inverts() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![10.0, 11.0, 12.0, 13.0], vec![1, 4, 1, 1], true);
        let sh = t.cyclic_shift(x, [1, 0, 0]);
        assert_eq!(t.data(sh), &[11.0, 12.0, 13.0, 10.0]);
        let back = t.cyclic_shift(sh, [-1, 0, 0]);
        assert_eq!(t.data(back), &[10.0, 11.0, 12.0, 13.0]);
        // shift by the full extent is the identity
        let full = t.cyclic_shift(x, [4, 0, 0]);
        assert_eq!(t.data(full), t.data(x));
        // gradient of sum flows back once per voxel
        let s = t.sum(sh);
        t.backward(s);
        assert_eq!(t.grad(x), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn tokenize_roundtrip_and_m1_flatten() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let vol = rand_vec(&mut rng, 3 * 4 * 4 * 4);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vol.clone(), vec![3, 4, 4, 4], false);
        let tok = t.tokenize(x, 2);
        assert_eq!(t.shape(tok), &[8, 3 * 8]);
        let back = t.detokenize(tok, 3, [4, 4, 4], 2);
        assert_eq!(t.data(back), &vol[..]);

        let tok1 = t.tokenize(x, 1);
        assert_eq!(t.shape(tok1), &[1, 3 * 64]);
        assert_eq!(t.data(tok1), &vol[..]); // m = 1 flattens in volume order
    }

    #[test]
    fn tokenize_shape_example_and_region_order() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![0.0; 3 * 8 * 8 * 8], vec![3, 8, 8, 8], false);
        let tok = t.tokenize(x, 4);
        assert_eq!(t.shape(tok), &[64, 24]);

        // one voxel per region: token index equals region linear index
        let vals: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let y = t.leaf(vals.clone(), vec![1, 2, 2, 2], false);
        let ty = t.tokenize(y, 2);
        assert_eq!(t.data(ty), &vals[..]);
    }

    #[test]
    fn tokenize_gradient_is_permutation() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf((0..16).map(|v| v as f64).collect(), vec![2, 2, 2, 2], true);
        let tok = t.tokenize(x, 2);
        let d = t.detokenize(tok, 2, [2, 2, 2], 2);
        let s = t.sum(d);
        t.backward(s);
        assert_eq!(t.grad(x), &vec![1.0; 16][..]);
    }

    #[test]
    fn spatial_mean_values_and_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 3.0, 0.0, -2.0, 5.0, 5.0, 5.0, 5.0], vec![2, 2, 2, 1], true);
        let m = t.spatial_mean(x);
        assert_eq!(t.data(m), &[0.5, 5.0]);
        let s = t.sum(m);
        t.backward(s);
        assert_eq!(t.grad(x), &vec![0.25; 8][..]);
    }

    #[test]
    fn concat_channels_values_and_gradient_split() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(vec![1.0, 2.0], vec![1, 2, 1, 1], true);
        let b = t.leaf(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2, 1, 1], true);
        let cat = t.concat_channels(&[a, b]);
        assert_eq!(t.shape(cat), &[3, 2, 1, 1]);
        assert_eq!(t.data(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t.leaf(vec![1.0, 10.0, 100.0, 1000.0, 2.0, 20.0], vec![3, 2, 1, 1], false);
        let prod = t.mul(cat, w);
        let s = t.sum(prod);
        t.backward(s);
        assert_eq!(t.grad(a), &[1.0, 10.0]);
        assert_eq!(t.grad(b), &[100.0, 1000.0, 2.0, 20.0]);
    }
}
