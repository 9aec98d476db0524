//! Volume-level spatial transformer: warp an intensity or label grid by a
//! displacement field.
//!
//! Both variants *pull*: output voxel `p` samples the input at `p + u(p)`,
//! with the sample coordinate clamped into the grid (no zero fill, no wrap).
//! Intensities are interpolated trilinearly; label ids are never blended —
//! the sample coordinate is rounded half away from zero and the label at
//! that voxel is copied. The differentiable tape variant lives in
//! [`crate::autodiff`]; this module is the plain-buffer form used by the
//! phantom generator, evaluation, and the command-line outputs.

use crate::autodiff::spatial;
use crate::error::{Error, Result};
use crate::volume::{DeformationField, LabelVolume, ScalarVolume};

fn check_shapes(vol_dims: [usize; 3], field: &DeformationField) -> Result<()> {
    if vol_dims != field.dims() {
        return Err(Error::Config(format!(
            "volume dims {:?} do not match field dims {:?}",
            vol_dims,
            field.dims()
        )));
    }
    Ok(())
}

/// Trilinearly warp `vol` by `field`: `out(p) = vol(clamp(p + u(p)))`.
pub fn warp_trilinear(vol: &ScalarVolume, field: &DeformationField) -> Result<ScalarVolume> {
    check_shapes(vol.dims(), field)?;
    let [w, h, d] = vol.dims();
    let out = spatial::warp_forward(&vol.data, &field.data, &[1, w, h, d]);
    Ok(ScalarVolume::new(vol.dims(), out))
}

/// Warp a label grid by `field`, copying the nearest label:
/// `out(p) = labels(clamp(round(p + u(p))))` with ties rounded half away
/// from zero (`0.5 → 1`, `-0.5 → -1`; the clamp then folds negatives to 0).
pub fn warp_labels_nn(labels: &LabelVolume, field: &DeformationField) -> Result<LabelVolume> {
    check_shapes(labels.dims(), field)?;
    let [w, h, d] = labels.dims();
    let vox = w * h * d;
    let mut out = vec![0u16; vox];
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let p = (k * h + j) * w + i;
                let xi = nearest(i as f32 + field.data[p], w);
                let yj = nearest(j as f32 + field.data[vox + p], h);
                let zk = nearest(k as f32 + field.data[2 * vox + p], d);
                out[p] = labels.data[(zk * h + yj) * w + xi];
            }
        }
    }
    let mut warped = LabelVolume::new(labels.dims(), out);
    warped.header.label_names = labels.header.label_names.clone();
    Ok(warped)
}

/// Round half away from zero, then clamp into `[0, dim - 1]`.
fn nearest(coord: f32, dim: usize) -> usize {
    let r = coord.round(); // f32::round ties away from zero
    r.max(0.0).min((dim - 1) as f32) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ramp_x(dims: [usize; 3]) -> ScalarVolume {
        let [w, h, d] = dims;
        let mut data = Vec::with_capacity(w * h * d);
        for _k in 0..d {
            for _j in 0..h {
                for i in 0..w {
                    data.push(i as f32);
                }
            }
        }
        ScalarVolume::new(dims, data)
    }

    fn constant_field(dims: [usize; 3], u: [f32; 3]) -> DeformationField {
        let vox = dims[0] * dims[1] * dims[2];
        let mut data = Vec::with_capacity(3 * vox);
        for &c in &u {
            data.extend(std::iter::repeat(c).take(vox));
        }
        DeformationField::new(dims, data)
    }

    #[test]
    fn zero_field_is_identity_for_both_variants() {
        let dims = [4, 3, 5];
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let vol = ScalarVolume::new(dims, (0..60).map(|_| rng.gen_range(0.0..1.0)).collect());
        let labels = LabelVolume::new(dims, (0..60).map(|_| rng.gen_range(0..5u16)).collect());
        let zero = DeformationField::zeros(dims);
        assert_eq!(warp_trilinear(&vol, &zero).unwrap().data, vol.data);
        assert_eq!(warp_labels_nn(&labels, &zero).unwrap().data, labels.data);
    }

    #[test]
    fn unit_shift_on_ramp_clamps_at_the_far_face() {
        let dims = [4, 3, 3];
        let vol = ramp_x(dims);
        let out = warp_trilinear(&vol, &constant_field(dims, [1.0, 0.0, 0.0])).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..4usize {
                    let got = out.data[(k * 3 + j) * 4 + i];
                    assert_eq!(got, i.min(2) as f32 + 1.0, "i={i}");
                }
            }
        }
    }

    #[test]
    fn label_rounding_is_half_away_from_zero() {
        let dims = [4, 2, 2];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&[0u16, 1, 2, 3]);
        }
        let labels = LabelVolume::new(dims, data);
        // +0.4 rounds down: identical to the zero field.
        let nudged = warp_labels_nn(&labels, &constant_field(dims, [0.4, 0.0, 0.0])).unwrap();
        assert_eq!(nudged.data, labels.data);
        // +0.5 rounds up at every voxel: labels shift left, clamped at w-1.
        let up = warp_labels_nn(&labels, &constant_field(dims, [0.5, 0.0, 0.0])).unwrap();
        for chunk in up.data.chunks_exact(4) {
            assert_eq!(chunk, &[1, 2, 3, 3]);
        }
        // -0.5 also rounds away from zero (towards -1), so voxel 0 clamps to
        // itself and every higher coordinate p - 0.5 rounds back up to p.
        let down = warp_labels_nn(&labels, &constant_field(dims, [-0.5, 0.0, 0.0])).unwrap();
        assert_eq!(down.data, labels.data);
    }

    #[test]
    fn warped_labels_stay_within_the_input_label_set() {
        let dims = [6, 5, 4];
        let vox = 120;
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let labels =
            LabelVolume::new(dims, (0..vox).map(|_| if rng.gen_bool(0.5) { 7 } else { 0 }).collect());
        let field = DeformationField::new(
            dims,
            (0..3 * vox).map(|_| rng.gen_range(-2.5..2.5)).collect(),
        );
        let out = warp_labels_nn(&labels, &field).unwrap();
        assert!(out.data.iter().all(|&l| l == 0 || l == 7));
    }

    #[test]
    fn trilinear_warp_is_linear_in_the_volume() {
        let dims = [5, 4, 4];
        let vox = 80;
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let v1 = ScalarVolume::new(dims, (0..vox).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let v2 = ScalarVolume::new(dims, (0..vox).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let field = DeformationField::new(
            dims,
            (0..3 * vox).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        );
        let (a, b) = (0.7f32, -1.3f32);
        let mixed = ScalarVolume::new(
            dims,
            v1.data.iter().zip(&v2.data).map(|(&x, &y)| a * x + b * y).collect(),
        );
        let wm = warp_trilinear(&mixed, &field).unwrap();
        let w1 = warp_trilinear(&v1, &field).unwrap();
        let w2 = warp_trilinear(&v2, &field).unwrap();
        for p in 0..vox {
            let lhs = wm.data[p];
            let rhs = a * w1.data[p] + b * w2.data[p];
            assert!((lhs - rhs).abs() < 1e-5, "voxel {p}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn warped_intensities_stay_inside_the_input_range() {
        let dims = [5, 5, 5];
        let vox = 125;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let vol = ScalarVolume::new(dims, (0..vox).map(|_| rng.gen_range(0.2..0.9)).collect());
        let field = DeformationField::new(
            dims,
            (0..3 * vox).map(|_| rng.gen_range(-4.0..4.0)).collect(),
        );
        let (lo, hi) = vol.data.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        let out = warp_trilinear(&vol, &field).unwrap();
        assert!(out.data.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn shape_mismatch_is_reported_as_config_error() {
        let vol = ScalarVolume::new([4, 4, 4], vec![0.0; 64]);
        let field = DeformationField::zeros([4, 4, 2]);
        let err = warp_trilinear(&vol, &field).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("dims"));
    }
}
