//! Seeded synthetic phantoms with exact ground truth.
//!
//! The generator builds an atlas as a large "outer" ellipsoid (label 1,
//! intensity 0.3) containing a few smaller ellipsoids (labels 2.., distinct
//! intensities in [0.5, 0.9]), optionally dusted with clipped Gaussian noise.
//! Moving images are made by warping the atlas with a smooth random
//! deformation field drawn on a coarse control grid, so every moving/fixed
//! pair ships with its true displacement field and true label map. All
//! generation is a pure function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{DeformationField, LabelVolume, ScalarVolume};
use crate::warp::{warp_labels_nn, warp_trilinear};

// ───────────────────────────── spec ─────────────────────────────

/// Parameters of the synthetic dataset. `field_amplitude` is in voxels and
/// must not exceed `control_spacing / 2`, which keeps the drawn deformations
/// comfortably invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub n_inner_structures: usize,
    pub noise_sigma: f64,
    pub field_amplitude: f64,
    pub control_spacing: usize,
    /// How many deformed copies to generate for training.
    pub train_movings: usize,
    /// How many further copies to hold out for evaluation.
    pub test_movings: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 17,
            dims: [32, 32, 32],
            n_inner_structures: 3,
            noise_sigma: 0.02,
            field_amplitude: 3.0,
            control_spacing: 8,
            train_movings: 8,
            test_movings: 4,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("phantom spec: {msg}")));
        if self.dims.iter().any(|&e| e < 16) {
            return fail(format!("dims {:?} too small, need at least 16 per axis", self.dims));
        }
        if !(2..=4).contains(&self.n_inner_structures) {
            return fail(format!(
                "n_inner_structures {} outside [2, 4]",
                self.n_inner_structures
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.field_amplitude.is_finite() && self.field_amplitude >= 0.0) {
            return fail(format!("field_amplitude {} must be finite and >= 0", self.field_amplitude));
        }
        if self.control_spacing == 0 || self.dims.iter().any(|&e| e % self.control_spacing != 0) {
            return fail(format!(
                "control_spacing {} must divide dims {:?}",
                self.control_spacing, self.dims
            ));
        }
        if self.field_amplitude > self.control_spacing as f64 / 2.0 {
            return fail(format!(
                "field_amplitude {} exceeds control_spacing/2 = {}",
                self.field_amplitude,
                self.control_spacing as f64 / 2.0
            ));
        }
        if self.train_movings == 0 || self.test_movings == 0 {
            return fail(format!(
                "train_movings {} and test_movings {} must both be positive",
                self.train_movings, self.test_movings
            ));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer: derive an independent stream seed from `(seed, tag)`.
fn subseed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ───────────────────────────── atlas ─────────────────────────────

/// Intensity ladder for the inner structures: evenly spaced across
/// [0.5, 0.9] so every label has a distinct mean intensity.
fn inner_intensity(t: usize, n: usize) -> f32 {
    (0.5 + 0.4 * t as f64 / (n - 1) as f64) as f32
}

/// Generate the atlas image and its label map, deterministically from
/// `spec.seed`. Labels: 0 background, 1 outer ellipsoid, 2.. inner
/// structures; each label covers at least 1% of the outer ellipsoid.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(ScalarVolume, LabelVolume)> {
    spec.validate()?;
    let [w, h, d] = spec.dims;
    let vox = w * h * d;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let center = [(w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, (d - 1) as f64 / 2.0];
    let outer: [f64; 3] = [
        rng.gen_range(0.35..0.45) * w as f64,
        rng.gen_range(0.35..0.45) * h as f64,
        rng.gen_range(0.35..0.45) * d as f64,
    ];

    let mut labels = vec![0u16; vox];
    let mut intens = vec![0.0f32; vox];
    let mut outer_count = 0usize;
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let q = [
                    (i as f64 - center[0]) / outer[0],
                    (j as f64 - center[1]) / outer[1],
                    (k as f64 - center[2]) / outer[2],
                ];
                if q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0 {
                    let p = (k * h + j) * w + i;
                    labels[p] = 1;
                    intens[p] = 0.3;
                    outer_count += 1;
                }
            }
        }
    }
    let min_voxels = (outer_count as f64 * 0.01).ceil() as usize;

    let n = spec.n_inner_structures;
    for t in 0..n {
        let label = (t + 2) as u16;
        let value = inner_intensity(t, n);
        let mut placed = false;
        'retry: for _ in 0..64 {
            let semi: [f64; 3] = [
                rng.gen_range(0.10..0.18) * w as f64,
                rng.gen_range(0.10..0.18) * h as f64,
                rng.gen_range(0.10..0.18) * d as f64,
            ];
            // Center drawn uniformly in the outer ellipsoid shrunk by the
            // candidate's own semi-axes, so the candidate tends to fit.
            let mut c = [0.0f64; 3];
            let mut ok = false;
            for _ in 0..64 {
                let u: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0 {
                    for a in 0..3 {
                        c[a] = center[a] + u[a] * (outer[a] - semi[a]);
                    }
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue;
            }
            // Rasterize over the candidate's bounding box; the candidate is
            // accepted only if every covered voxel is currently plain outer
            // (exact non-overlap and containment at voxel resolution).
            let mut hits = Vec::new();
            let (kx0, kx1) = clamp_range(c[0], semi[0], w);
            let (ky0, ky1) = clamp_range(c[1], semi[1], h);
            let (kz0, kz1) = clamp_range(c[2], semi[2], d);
            for k in kz0..=kz1 {
                for j in ky0..=ky1 {
                    for i in kx0..=kx1 {
                        let q = [
                            (i as f64 - c[0]) / semi[0],
                            (j as f64 - c[1]) / semi[1],
                            (k as f64 - c[2]) / semi[2],
                        ];
                        if q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0 {
                            let p = (k * h + j) * w + i;
                            if labels[p] != 1 {
                                continue 'retry;
                            }
                            hits.push(p);
                        }
                    }
                }
            }
            if hits.len() < min_voxels {
                continue;
            }
            for &p in &hits {
                labels[p] = label;
                intens[p] = value;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(format!(
                "phantom spec: could not place inner structure {label} after 64 attempts \
                 (seed {}, dims {:?})",
                spec.seed, spec.dims
            )));
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma).expect("validated sigma");
        for v in intens.iter_mut() {
            *v = ((*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0)) as f32;
        }
    }

    let atlas = ScalarVolume::new(spec.dims, intens);
    let mut mask = LabelVolume::new(spec.dims, labels);
    let mut names = std::collections::BTreeMap::new();
    names.insert(1u16, "outer".to_string());
    for t in 0..n {
        names.insert((t + 2) as u16, format!("inner-{}", t + 1));
    }
    mask.header.label_names = Some(names);
    Ok((atlas, mask))
}

/// Voxel range of `[c - r, c + r]` clamped into `[0, dim)`.
fn clamp_range(c: f64, r: f64, dim: usize) -> (usize, usize) {
    let lo = (c - r).floor().max(0.0) as usize;
    let hi = ((c + r).ceil() as usize).min(dim - 1);
    (lo.min(dim - 1), hi)
}

// ───────────────────────────── fields ─────────────────────────────

/// Draw the coarse control-grid displacements: i.i.d. Normal(0, (amp/2)²)
/// clamped to ±amp, laid out channel-major over `(nx, ny, nz)` nodes.
fn coarse_nodes(seed: u64, nodes: [usize; 3], amplitude: f64) -> Vec<f64> {
    let count = 3 * nodes[0] * nodes[1] * nodes[2];
    if amplitude == 0.0 {
        return vec![0.0; count];
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, amplitude / 2.0).expect("positive amplitude");
    (0..count)
        .map(|_| normal.sample(&mut rng).clamp(-amplitude, amplitude))
        .collect()
}

/// Generate a smooth random displacement field: Gaussian control vectors on
/// a grid of spacing `control_spacing`, trilinearly interpolated to full
/// resolution. Component-wise |u| ≤ amplitude, so |u|₂ ≤ amplitude·√3, and
/// the per-axis Lipschitz constant is at most `2·amplitude/control_spacing`.
pub fn make_smooth_field(
    seed: u64,
    dims: [usize; 3],
    amplitude: f64,
    control_spacing: usize,
) -> Result<DeformationField> {
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::Config(format!("field amplitude {amplitude} must be finite and >= 0")));
    }
    if control_spacing == 0 || dims.iter().any(|&e| e % control_spacing != 0) {
        return Err(Error::Config(format!(
            "control_spacing {control_spacing} must divide dims {dims:?}"
        )));
    }
    let cs = control_spacing;
    let nodes = [dims[0] / cs + 1, dims[1] / cs + 1, dims[2] / cs + 1];
    let coarse = coarse_nodes(seed, nodes, amplitude);
    let [w, h, d] = dims;
    let [nx, ny, nz] = nodes;
    let node = |c: usize, ix: usize, iy: usize, iz: usize| coarse[((c * nz + iz) * ny + iy) * nx + ix];

    let mut data = Vec::with_capacity(3 * w * h * d);
    for c in 0..3 {
        for k in 0..d {
            let (z0, fz) = (k / cs, (k % cs) as f64 / cs as f64);
            for j in 0..h {
                let (y0, fy) = (j / cs, (j % cs) as f64 / cs as f64);
                for i in 0..w {
                    let (x0, fx) = (i / cs, (i % cs) as f64 / cs as f64);
                    let c00 = node(c, x0, y0, z0) * (1.0 - fx) + node(c, x0 + 1, y0, z0) * fx;
                    let c10 = node(c, x0, y0 + 1, z0) * (1.0 - fx) + node(c, x0 + 1, y0 + 1, z0) * fx;
                    let c01 = node(c, x0, y0, z0 + 1) * (1.0 - fx) + node(c, x0 + 1, y0, z0 + 1) * fx;
                    let c11 =
                        node(c, x0, y0 + 1, z0 + 1) * (1.0 - fx) + node(c, x0 + 1, y0 + 1, z0 + 1) * fx;
                    let e0 = c00 * (1.0 - fy) + c10 * fy;
                    let e1 = c01 * (1.0 - fy) + c11 * fy;
                    data.push((e0 * (1.0 - fz) + e1 * fz) as f32);
                }
            }
        }
    }
    Ok(DeformationField::new(dims, data))
}

// ───────────────────────────── pairs & datasets ─────────────────────────────

/// Warp the atlas and its mask by a ground-truth field to obtain a moving
/// image and its true label map. The field *is* the pull-back sampling
/// relation: `moving(p) = atlas(p + gt(p))`.
pub fn make_pair(
    atlas: &ScalarVolume,
    atlas_mask: &LabelVolume,
    gt_field: &DeformationField,
) -> Result<(ScalarVolume, LabelVolume)> {
    if atlas.dims() != atlas_mask.dims() {
        return Err(Error::Config(format!(
            "atlas dims {:?} do not match mask dims {:?}",
            atlas.dims(),
            atlas_mask.dims()
        )));
    }
    let moving = warp_trilinear(atlas, gt_field)?;
    let moving_mask = warp_labels_nn(atlas_mask, gt_field)?;
    Ok((moving, moving_mask))
}

/// A generated dataset held in memory: one atlas (the fixed image) plus a
/// list of movings with their ground truth.
#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub atlas: ScalarVolume,
    pub atlas_mask: LabelVolume,
    pub movings: Vec<ScalarVolume>,
    pub moving_masks: Vec<LabelVolume>,
    pub gt_fields: Vec<DeformationField>,
}

impl PhantomDataset {
    /// Generate the atlas plus `n_movings` warped movings. Moving `k` uses
    /// a field seeded from `(spec.seed, k + 1)`, so datasets of different
    /// sizes share their common prefix.
    pub fn generate(spec: &PhantomSpec, n_movings: usize) -> Result<Self> {
        let (atlas, atlas_mask) = make_phantom(spec)?;
        let mut movings = Vec::with_capacity(n_movings);
        let mut moving_masks = Vec::with_capacity(n_movings);
        let mut gt_fields = Vec::with_capacity(n_movings);
        for k in 0..n_movings {
            let field = make_smooth_field(
                subseed(spec.seed, k as u64 + 1),
                spec.dims,
                spec.field_amplitude,
                spec.control_spacing,
            )?;
            let (moving, moving_mask) = make_pair(&atlas, &atlas_mask, &field)?;
            movings.push(moving);
            moving_masks.push(moving_mask);
            gt_fields.push(field);
        }
        Ok(PhantomDataset { atlas, atlas_mask, movings, moving_masks, gt_fields })
    }

    pub fn len(&self) -> usize {
        self.movings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.movings.is_empty()
    }

    /// Write the dataset into an existing directory as
    /// `atlas.rvol`, `atlas_mask.rvol`, and per-moving
    /// `moving_k.rvol` / `moving_mask_k.rvol` / `gt_field_k.rvol`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.atlas.save(&dir.join("atlas.rvol"))?;
        self.atlas_mask.save(&dir.join("atlas_mask.rvol"))?;
        for k in 0..self.len() {
            self.movings[k].save(&dir.join(format!("moving_{k}.rvol")))?;
            self.moving_masks[k].save(&dir.join(format!("moving_mask_{k}.rvol")))?;
            self.gt_fields[k].save(&dir.join(format!("gt_field_{k}.rvol")))?;
        }
        Ok(())
    }

    /// Read `n_movings` movings (and the atlas) back from `dir`.
    pub fn load(dir: &Path, n_movings: usize) -> Result<Self> {
        let atlas = ScalarVolume::read(&dir.join("atlas.rvol"))?;
        let atlas_mask = LabelVolume::read(&dir.join("atlas_mask.rvol"))?;
        let mut movings = Vec::with_capacity(n_movings);
        let mut moving_masks = Vec::with_capacity(n_movings);
        let mut gt_fields = Vec::with_capacity(n_movings);
        for k in 0..n_movings {
            movings.push(ScalarVolume::read(&dir.join(format!("moving_{k}.rvol")))?);
            moving_masks.push(LabelVolume::read(&dir.join(format!("moving_mask_{k}.rvol")))?);
            gt_fields.push(DeformationField::read(&dir.join(format!("gt_field_{k}.rvol")))?);
        }
        Ok(PhantomDataset { atlas, atlas_mask, movings, moving_masks, gt_fields })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec { dims: [16, 16, 16], control_spacing: 4, field_amplitude: 2.0, ..Default::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = small_spec();
        let (a1, m1) = make_phantom(&spec).unwrap();
        let (a2, m2) = make_phantom(&spec).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(m1, m2);
        let f1 = make_smooth_field(5, [16, 16, 16], 2.0, 4).unwrap();
        let f2 = make_smooth_field(5, [16, 16, 16], 2.0, 4).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn zero_noise_gives_piecewise_constant_intensities() {
        let spec = PhantomSpec { noise_sigma: 0.0, ..small_spec() };
        let (atlas, mask) = make_phantom(&spec).unwrap();
        let n = spec.n_inner_structures;
        for (v, &l) in atlas.data.iter().zip(&mask.data) {
            let expect = match l {
                0 => 0.0,
                1 => 0.3,
                l => inner_intensity(l as usize - 2, n),
            };
            assert_eq!(*v, expect, "label {l}");
        }
    }

    #[test]
    fn all_labels_present_and_each_covers_a_percent_of_the_outer() {
        let spec = PhantomSpec { seed: 7, dims: [32, 32, 32], control_spacing: 8, ..small_spec() };
        let (_, mask) = make_phantom(&spec).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for &l in &mask.data {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        for l in 0..=4u16 {
            assert!(counts.get(&l).copied().unwrap_or(0) > 0, "label {l} empty");
        }
        let outer_total: usize = counts.iter().filter(|(&l, _)| l >= 1).map(|(_, &c)| c).sum();
        for (&l, &c) in counts.iter().filter(|(&l, _)| l >= 1) {
            assert!(c as f64 >= 0.01 * outer_total as f64, "label {l}: {c} of {outer_total}");
        }
    }

    #[test]
    fn noise_is_clipped_to_unit_range() {
        let spec = PhantomSpec { noise_sigma: 0.5, ..small_spec() };
        let (atlas, _) = make_phantom(&spec).unwrap();
        assert!(atlas.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn field_hits_control_points_exactly_and_respects_bounds() {
        let (seed, dims, amp, cs) = (3u64, [32usize, 32, 32], 4.0f64, 8usize);
        let field = make_smooth_field(seed, dims, amp, cs).unwrap();
        let nodes = [dims[0] / cs + 1, dims[1] / cs + 1, dims[2] / cs + 1];
        let coarse = coarse_nodes(seed, nodes, amp);
        let [w, h, d] = dims;
        let [nx, ny, _] = nodes;
        for c in 0..3 {
            for iz in 0..nodes[2] - 1 {
                for iy in 0..ny - 1 {
                    for ix in 0..nx - 1 {
                        let grid = field.data[((c * d + iz * cs) * h + iy * cs) * w + ix * cs];
                        let want = coarse[((c * nodes[2] + iz) * ny + iy) * nx + ix] as f32;
                        assert_eq!(grid, want);
                    }
                }
            }
        }
        // Component bound |u| ≤ amp ⇒ vector bound ≤ amp·√3.
        assert!(field.data.iter().all(|&v| v.abs() <= amp as f32));
        let vox = w * h * d;
        let max_mag = (0..vox)
            .map(|p| {
                let (ux, uy, uz) =
                    (field.data[p] as f64, field.data[vox + p] as f64, field.data[2 * vox + p] as f64);
                (ux * ux + uy * uy + uz * uz).sqrt()
            })
            .fold(0.0f64, f64::max);
        assert!(max_mag <= amp * 3.0f64.sqrt() + 1e-6, "max |u| = {max_mag}");
    }

    #[test]
    fn field_is_lipschitz_with_the_documented_constant() {
        let (dims, amp, cs) = ([16usize, 16, 16], 2.0f64, 4usize);
        let field = make_smooth_field(11, dims, amp, cs).unwrap();
        let [w, h, d] = dims;
        let bound = (2.0 * amp / cs as f64) as f32 + 1e-5;
        let vox = w * h * d;
        for c in 0..3 {
            let ch = &field.data[c * vox..(c + 1) * vox];
            for k in 0..d {
                for j in 0..h {
                    for i in 0..w {
                        let p = (k * h + j) * w + i;
                        if i + 1 < w {
                            assert!((ch[p + 1] - ch[p]).abs() <= bound);
                        }
                        if j + 1 < h {
                            assert!((ch[p + w] - ch[p]).abs() <= bound);
                        }
                        if k + 1 < d {
                            assert!((ch[p + w * h] - ch[p]).abs() <= bound);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_amplitude_gives_the_zero_field_and_an_exact_pair() {
        let spec = small_spec();
        let (atlas, mask) = make_phantom(&spec).unwrap();
        let field = make_smooth_field(1, spec.dims, 0.0, 4).unwrap();
        assert!(field.data.iter().all(|&v| v == 0.0));
        let (moving, moving_mask) = make_pair(&atlas, &mask, &field).unwrap();
        assert_eq!(moving.data, atlas.data);
        assert_eq!(moving_mask.data, mask.data);
    }

    #[test]
    fn warped_pair_differs_but_keeps_the_label_set() {
        let spec = small_spec();
        let (atlas, mask) = make_phantom(&spec).unwrap();
        let field = make_smooth_field(2, spec.dims, 2.0, 4).unwrap();
        let (_, moving_mask) = make_pair(&atlas, &mask, &field).unwrap();
        assert_ne!(moving_mask.data, mask.data, "amplitude-2 field should move labels");
        let atlas_set: std::collections::BTreeSet<u16> = mask.data.iter().copied().collect();
        assert!(moving_mask.data.iter().all(|l| atlas_set.contains(l)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = small_spec();
        let cases = [
            PhantomSpec { dims: [8, 16, 16], ..base.clone() },
            PhantomSpec { n_inner_structures: 1, ..base.clone() },
            PhantomSpec { n_inner_structures: 5, ..base.clone() },
            PhantomSpec { noise_sigma: -0.1, ..base.clone() },
            PhantomSpec { field_amplitude: 2.5, control_spacing: 4, ..base.clone() },
            PhantomSpec { control_spacing: 5, ..base.clone() },
        ];
        for spec in cases {
            let err = make_phantom(&spec).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{spec:?}");
        }
        assert!(make_smooth_field(1, [16, 16, 16], 2.0, 5).is_err());
    }

    #[test]
    fn dataset_roundtrips_through_a_directory() {
        let spec = small_spec();
        let ds = PhantomDataset::generate(&spec, 2).unwrap();
        assert_eq!(ds.len(), 2);
        // Movings use distinct field seeds.
        assert_ne!(ds.gt_fields[0].data, ds.gt_fields[1].data);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = PhantomDataset::load(dir.path(), 2).unwrap();
        assert_eq!(back.atlas, ds.atlas);
        assert_eq!(back.atlas_mask, ds.atlas_mask);
        for k in 0..2 {
            assert_eq!(back.movings[k], ds.movings[k]);
            assert_eq!(back.moving_masks[k], ds.moving_masks[k]);
            assert_eq!(back.gt_fields[k], ds.gt_fields[k]);
        }
        // A dataset prefix is stable: generating fewer movings yields the
        // same first moving.
        let shorter = PhantomDataset::generate(&spec, 1).unwrap();
        assert_eq!(shorter.movings[0], ds.movings[0]);
    }
}
