//! Training objectives: windowed normalized cross-correlation for
//! reconstruction, a diffusion penalty on field gradients, and a patchwise
//! contrastive term over the projection features.
//!
//! All of these build tape graphs, so every term is differentiable end to
//! end. Reconstruction is *negated* correlation: the optimizer minimizes,
//! similarity should rise.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape, Val};
use crate::error::{Error, Result};
use crate::net::PairOutput;

// ───────────────────────────── weights ─────────────────────────────

/// Scalar knobs of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_smooth: f64,
    pub lambda_contrast: f64,
    /// Softmax temperature of the contrastive term.
    pub tau: f64,
    /// Side length of the cubic correlation window (odd).
    pub ncc_window: usize,
    /// Guard added under the correlation denominator's square root.
    pub ncc_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_smooth: 1.0,
            lambda_contrast: 0.1,
            tau: 1.0,
            ncc_window: 9,
            ncc_eps: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("loss weights: {msg}")));
        if !(self.lambda_smooth.is_finite() && self.lambda_smooth >= 0.0) {
            return fail(format!("lambda_smooth {} must be finite and >= 0", self.lambda_smooth));
        }
        if !(self.lambda_contrast.is_finite() && self.lambda_contrast >= 0.0) {
            return fail(format!("lambda_contrast {} must be finite and >= 0", self.lambda_contrast));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return fail(format!("tau {} must be finite and positive", self.tau));
        }
        if self.ncc_window % 2 == 0 || self.ncc_window < 3 {
            return fail(format!("ncc_window {} must be odd and >= 3", self.ncc_window));
        }
        if !(self.ncc_eps.is_finite() && self.ncc_eps > 0.0) {
            return fail(format!("ncc_eps {} must be finite and positive", self.ncc_eps));
        }
        Ok(())
    }
}

// ───────────────────────────── terms ─────────────────────────────

/// Mean windowed correlation of two like-shaped volumes, in roughly
/// `[-1, 1]`. Per voxel, means and (co)variances are taken over the cubic
/// window centered there, clipped at borders (no padding); the ratio is
/// `cov / sqrt(var_a · var_b + eps)` and the result averages over voxels.
pub fn ncc_mean<T: Element>(
    tape: &mut Tape<T>,
    a: Val,
    b: Val,
    window: usize,
    eps: f64,
) -> Result<Val> {
    let shape = tape.shape(a).to_vec();
    if shape != tape.shape(b) {
        return Err(Error::Config(format!(
            "ncc: shapes {:?} and {:?} differ",
            shape,
            tape.shape(b)
        )));
    }
    if shape.len() != 4 {
        return Err(Error::Config(format!("ncc: expected a [c,w,h,d] volume, got {shape:?}")));
    }
    if window % 2 == 0 || window < 3 || shape[1..].iter().any(|&e| e < window) {
        return Err(Error::Config(format!(
            "ncc: window {window} must be odd, >= 3, and fit the volume {shape:?}"
        )));
    }
    let len: usize = shape.iter().product();
    let ones = tape.leaf(vec![T::one(); len], shape, false);
    let n = tape.box_sum(ones, window);
    let sa = tape.box_sum(a, window);
    let sb = tape.box_sum(b, window);
    let ab = tape.mul(a, b);
    let sab = tape.box_sum(ab, window);
    let aa = tape.square(a);
    let saa = tape.box_sum(aa, window);
    let bb = tape.square(b);
    let sbb = tape.box_sum(bb, window);
    let ma = tape.div(sa, n);
    let mb = tape.div(sb, n);
    // cov = Σab − ā·Σb; var_a = Σa² − ā·Σa (clamped: cancellation can push
    // a numerically-zero variance slightly negative).
    let masb = tape.mul(ma, sb);
    let cov = tape.sub(sab, masb);
    let masa = tape.mul(ma, sa);
    let va_raw = tape.sub(saa, masa);
    let va = tape.clamp_min(va_raw, T::zero());
    let mbsb = tape.mul(mb, sb);
    let vb_raw = tape.sub(sbb, mbsb);
    let vb = tape.clamp_min(vb_raw, T::zero());
    let vab = tape.mul(va, vb);
    let guarded = tape.add_scalar(vab, T::from_f64(eps));
    let den = tape.sqrt(guarded);
    let ratio = tape.div(cov, den);
    Ok(tape.mean(ratio))
}

/// Negated bidirectional reconstruction similarity:
/// `−ncc(x∘ẑxy, y) − ncc(y∘ẑyx, x)`.
pub fn loss_recon<T: Element>(
    tape: &mut Tape<T>,
    x: Val,
    y: Val,
    field_xy: Val,
    field_yx: Val,
    window: usize,
    eps: f64,
) -> Result<Val> {
    let wx = tape.warp_trilinear(x, field_xy);
    let wy = tape.warp_trilinear(y, field_yx);
    let nxy = ncc_mean(tape, wx, y, window, eps)?;
    let nyx = ncc_mean(tape, wy, x, window, eps)?;
    let s = tape.add(nxy, nyx);
    Ok(tape.neg(s))
}

/// Diffusion penalty: the mean squared forward difference over both
/// directed fields, all 3 channels, all 3 axes, and all voxels (the far
/// border difference is zero) — `18·V` terms for `V` voxels.
pub fn loss_smooth<T: Element>(tape: &mut Tape<T>, field_xy: Val, field_yx: Val) -> Val {
    let shape = tape.shape(field_xy).to_vec();
    assert_eq!(shape, tape.shape(field_yx), "loss_smooth: field shapes differ");
    assert_eq!(shape[0], 3, "loss_smooth: expected a [3,w,h,d] field");
    let voxels: usize = shape[1..].iter().product();
    let mut acc: Option<Val> = None;
    for field in [field_xy, field_yx] {
        for axis in 0..3 {
            let d = tape.axis_diff(field, axis);
            let sq = tape.square(d);
            let s = tape.sum(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
    }
    let total = acc.expect("six terms");
    tape.scale(total, T::from_f64(1.0 / (18.0 * voxels as f64)))
}

/// Patchwise contrastive loss over two `[P, D]` unit-feature stacks:
/// softmax cross-entropy of the cosine-similarity rows against the
/// diagonal, both directions averaged. The denominator of every row
/// includes its positive, so the value is nonnegative.
pub fn loss_contrast<T: Element>(tape: &mut Tape<T>, fx: Val, fy: Val, tau: f64) -> Result<Val> {
    let shape = tape.shape(fx).to_vec();
    if shape != tape.shape(fy) || shape.len() != 2 {
        return Err(Error::Config(format!(
            "contrastive loss: feature stacks must share a [P, D] shape, got {:?} and {:?}",
            shape,
            tape.shape(fy)
        )));
    }
    if shape[0] < 2 {
        return Err(Error::Config(format!(
            "contrastive loss: needs at least 2 patches, got {}",
            shape[0]
        )));
    }
    let inv_tau = T::from_f64(1.0 / tau);
    let direction = |tape: &mut Tape<T>, f: Val, g: Val| {
        let sim = tape.matmul_nt(f, g);
        let logits = tape.scale(sim, inv_tau);
        let probs = tape.softmax_last(logits);
        let diag = tape.take_diag(probs);
        let lp = tape.ln(diag);
        let nl = tape.neg(lp);
        tape.mean(nl)
    };
    let mxy = direction(tape, fx, fy);
    let myx = direction(tape, fy, fx);
    let s = tape.add(mxy, myx);
    Ok(tape.scale(s, T::from_f64(0.5)))
}

/// Weighted combination `recon + λ_smooth·smooth + λ_contrast·contrast`.
/// Rejects non-finite components by name.
pub fn loss_total<T: Element>(
    tape: &mut Tape<T>,
    recon: Val,
    smooth: Val,
    contrast: Val,
    w: &LossWeights,
) -> Result<Val> {
    for (name, v) in [("recon", recon), ("smooth", smooth), ("contrast", contrast)] {
        let value = Element::to_f64(tape.scalar(v));
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} is {value}")));
        }
    }
    let ws = tape.scale(smooth, T::from_f64(w.lambda_smooth));
    let wc = tape.scale(contrast, T::from_f64(w.lambda_contrast));
    let rs = tape.add(recon, ws);
    Ok(tape.add(rs, wc))
}

/// Every term of the objective for one volume pair, as tape scalars.
pub struct LossTerms {
    pub total: Val,
    pub recon: Val,
    pub smooth: Val,
    pub contrast: Val,
}

/// Build the full objective from a pair forward: warp both volumes by
/// their predicted fields, correlate, penalize field roughness, and
/// contrast the patch features.
pub fn compute_losses<T: Element>(
    tape: &mut Tape<T>,
    x: Val,
    y: Val,
    out: &PairOutput,
    w: &LossWeights,
) -> Result<LossTerms> {
    let recon = loss_recon(tape, x, y, out.field_xy, out.field_yx, w.ncc_window, w.ncc_eps)?;
    let smooth = loss_smooth(tape, out.field_xy, out.field_yx);
    let contrast = loss_contrast(tape, out.feats_x, out.feats_y, w.tau)?;
    let total = loss_total(tape, recon, smooth, contrast, w)?;
    Ok(LossTerms { total, recon, smooth, contrast })
}
