//! Dice-overlap evaluation of registration and segmentation quality:
//! per-label and mean scores against ground truth, the zero-field
//! baseline, an upper-bound oracle from inverting the known generator
//! fields, and a seam-discontinuity metric that quantifies patch-border
//! artifacts in predicted fields.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{spatial::warp_forward, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::phantom::PhantomDataset;
use crate::volume::{DeformationField, LabelVolume, znormalize};
use crate::warp::warp_labels_nn;

// ───────────────────────────── dice ─────────────────────────────

/// Overlap of one label between two masks: `2|A∩B| / (|A|+|B|)`. Two empty
/// sets agree perfectly (1.0) — absent structures match.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Config(format!(
            "dice: dims {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    let mut both = 0usize;
    let mut total = 0usize;
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        let ia = va == label;
        let ib = vb == label;
        both += usize::from(ia && ib);
        total += usize::from(ia) + usize::from(ib);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// Every non-background label present in either mask.
fn foreground_labels(a: &LabelVolume, b: &LabelVolume) -> BTreeSet<u16> {
    a.data.iter().chain(&b.data).copied().filter(|&l| l != 0).collect()
}

/// Per-label Dice over the union of both masks' foreground labels, plus
/// the mean. Background (label 0) never enters the mean.
pub fn labelwise_dice(a: &LabelVolume, b: &LabelVolume) -> Result<(BTreeMap<u16, f64>, f64)> {
    let labels = foreground_labels(a, b);
    let mut per = BTreeMap::new();
    for &l in &labels {
        per.insert(l, dice(a, b, l)?);
    }
    let mean = if per.is_empty() {
        1.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    };
    Ok((per, mean))
}

// ───────────────────────────── oracles ─────────────────────────────

/// Numerically invert a displacement field by fixed-point iteration on
/// `z(q) = −u(q + z(q))`. Converges when the field is contractive (the
/// generator's smooth fields are); `iters` around 25 reaches voxel-level
/// accuracy at the amplitudes used here.
pub fn invert_field(field: &DeformationField, iters: usize) -> DeformationField {
    let dims = field.dims();
    let shape = [3usize, dims[0], dims[1], dims[2]];
    let mut z = vec![0.0f32; field.data.len()];
    for _ in 0..iters {
        let sampled = warp_forward(&field.data, &z, &shape);
        for (zi, si) in z.iter_mut().zip(&sampled) {
            *zi = -si;
        }
    }
    DeformationField::new(dims, z)
}

/// Mean absolute forward difference across patch-boundary faces minus the
/// same over interior faces; positive values mean visible seams. Zero when
/// there are no boundary faces (`n = 1`).
pub fn seam_discontinuity(field: &DeformationField, n: usize) -> f64 {
    let [w, h, d] = field.dims();
    assert!(
        w % n == 0 && h % n == 0 && d % n == 0,
        "seam metric: dims {:?} not divisible by n = {n}",
        field.dims()
    );
    let patch = [w / n, h / n, d / n];
    let vox = w * h * d;
    let at = |c: usize, i: usize, j: usize, k: usize| field.data[c * vox + (k * h + j) * w + i] as f64;
    let mut sums = [0.0f64; 2]; // interior, boundary
    let mut counts = [0usize; 2];
    for c in 0..3 {
        for k in 0..d {
            for j in 0..h {
                for i in 0..w {
                    // Forward faces along each axis, classified by whether
                    // they cross a patch border.
                    if i + 1 < w {
                        let cls = usize::from((i + 1) % patch[0] == 0);
                        sums[cls] += (at(c, i + 1, j, k) - at(c, i, j, k)).abs();
                        counts[cls] += 1;
                    }
                    if j + 1 < h {
                        let cls = usize::from((j + 1) % patch[1] == 0);
                        sums[cls] += (at(c, i, j + 1, k) - at(c, i, j, k)).abs();
                        counts[cls] += 1;
                    }
                    if k + 1 < d {
                        let cls = usize::from((k + 1) % patch[2] == 0);
                        sums[cls] += (at(c, i, j, k + 1) - at(c, i, j, k)).abs();
                        counts[cls] += 1;
                    }
                }
            }
        }
    }
    if counts[1] == 0 {
        return 0.0;
    }
    sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64
}

// ───────────────────────────── evaluation ─────────────────────────────

/// Scores of one moving volume against the atlas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEval {
    pub moving: usize,
    /// Dice of the moving mask warped toward the atlas, per label / mean.
    pub per_label_registration: BTreeMap<u16, f64>,
    pub registration_dice: f64,
    /// Dice of the atlas mask warped onto the moving image, per label / mean.
    pub per_label_segmentation: BTreeMap<u16, f64>,
    pub segmentation_dice: f64,
    /// Unregistered mean Dice of the raw mask pair.
    pub baseline_dice: f64,
    pub seam_xy: f64,
    pub seam_yx: f64,
}

/// Full evaluation output, serialized as the `eval` report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub pairs: Vec<PairEval>,
    pub mean_registration_dice: f64,
    pub mean_segmentation_dice: f64,
    pub baseline_dice: f64,
    /// Mean Dice after inverting the *known* generator fields — the
    /// pipeline's upper bound, independent of the model.
    pub oracle_registration_dice: Option<f64>,
    pub mean_seam: f64,
    pub wall_ms: u64,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Evaluate trained parameters on the dataset's movings with indices in
/// `movings`: predict both directed fields per pair, warp labels both
/// ways, and score against ground truth.
pub fn evaluate(
    params: &ModelParams<f32>,
    config: &RunConfig,
    data: &PhantomDataset,
    movings: std::ops::Range<usize>,
) -> Result<EvalReport> {
    config.validate()?;
    let t0 = Instant::now();
    if movings.is_empty() || movings.end > data.len() {
        return Err(Error::Config(format!(
            "evaluation range {movings:?} does not fit a dataset of {} movings",
            data.len()
        )));
    }
    let dims = config.phantom.dims;
    if data.atlas.dims() != dims {
        return Err(Error::Config(format!(
            "atlas dims {:?} differ from configured {dims:?}",
            data.atlas.dims()
        )));
    }
    let patch = config.patch_dims();
    let geo = config.stitch.resolve(patch)?;
    let vol_shape = vec![1usize, dims[0], dims[1], dims[2]];
    let mut atlas = data.atlas.data.clone();
    znormalize(&mut atlas);

    let mut pairs = Vec::new();
    let mut oracle_sum = 0.0;
    let mut oracle_count = 0usize;
    for k in movings.clone() {
        if data.movings[k].dims() != dims {
            return Err(Error::Config(format!(
                "moving {k} dims {:?} differ from configured {dims:?}",
                data.movings[k].dims()
            )));
        }
        let mut xz = data.movings[k].data.clone();
        znormalize(&mut xz);
        let mut tape = Tape::<f32>::new();
        let model = params.to_tape(&mut tape, &config.net);
        let x = tape.leaf(xz, vol_shape.clone(), false);
        let y = tape.leaf(atlas.clone(), vol_shape.clone(), false);
        let out =
            model.forward_volumes(&mut tape, x, y, config.train.n, &geo, config.stitch.use_stitcher);
        let field_xy = DeformationField::new(dims, tape.data(out.field_xy).to_vec());
        let field_yx = DeformationField::new(dims, tape.data(out.field_yx).to_vec());
        drop(tape);

        let moving_mask = &data.moving_masks[k];
        let reg_warped = warp_labels_nn(moving_mask, &field_xy)?;
        let (per_reg, reg) = labelwise_dice(&reg_warped, &data.atlas_mask)?;
        let seg_warped = warp_labels_nn(&data.atlas_mask, &field_yx)?;
        let (per_seg, seg) = labelwise_dice(&seg_warped, moving_mask)?;
        let (_, baseline) = labelwise_dice(moving_mask, &data.atlas_mask)?;
        if let Some(gt) = data.gt_fields.get(k) {
            let inv = invert_field(gt, 25);
            let oracle_warped = warp_labels_nn(moving_mask, &inv)?;
            let (_, oracle) = labelwise_dice(&oracle_warped, &data.atlas_mask)?;
            oracle_sum += oracle;
            oracle_count += 1;
        }
        pairs.push(PairEval {
            moving: k,
            per_label_registration: per_reg,
            registration_dice: reg,
            per_label_segmentation: per_seg,
            segmentation_dice: seg,
            baseline_dice: baseline,
            seam_xy: seam_discontinuity(&field_xy, config.train.n),
            seam_yx: seam_discontinuity(&field_yx, config.train.n),
        });
    }
    let count = pairs.len() as f64;
    let report = EvalReport {
        seed: config.train.seed,
        mean_registration_dice: pairs.iter().map(|p| p.registration_dice).sum::<f64>() / count,
        mean_segmentation_dice: pairs.iter().map(|p| p.segmentation_dice).sum::<f64>() / count,
        baseline_dice: pairs.iter().map(|p| p.baseline_dice).sum::<f64>() / count,
        oracle_registration_dice: (oracle_count > 0).then(|| oracle_sum / oracle_count as f64),
        mean_seam: pairs.iter().map(|p| 0.5 * (p.seam_xy + p.seam_yx)).sum::<f64>() / count,
        wall_ms: t0.elapsed().as_millis() as u64,
        pairs,
        config: config.clone(),
    };
    Ok(report)
}
