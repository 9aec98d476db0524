//! Adam optimization, the stepped learning-rate schedule, binary
//! checkpoints with a JSON manifest sidecar, and the epoch loop that fits
//! the registration model to phantom pairs.
//!
//! Determinism is a hard contract here: given (seed, config), the metrics
//! log and every checkpoint byte are reproducible — only the `wall_ms`
//! timing field varies between runs.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::compute_losses;
use crate::net::ModelParams;
use crate::phantom::PhantomDataset;
use crate::volume::{sidecar_path, znormalize};

// ───────────────────────────── config ─────────────────────────────

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays (and intermediate checkpoints).
    pub decay_every: usize,
    pub epochs: usize,
    /// Pairs per optimizer step; only 1 is supported.
    pub batch: usize,
    pub seed: u64,
    /// Patches per axis.
    pub n: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay_factor: 0.1,
            decay_every: 50,
            epochs: 200,
            batch: 1,
            seed: 1,
            n: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("train config: {msg}")));
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return fail(format!("lr0 {} must be finite and positive", self.lr0));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor {} must lie in (0, 1]", self.decay_factor));
        }
        if self.decay_every < 1 {
            return fail("decay_every must be >= 1".into());
        }
        if self.batch != 1 {
            return fail(format!("batch {} unsupported; only batch size 1", self.batch));
        }
        if self.n < 1 {
            return fail("n must be >= 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return fail(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return fail(format!("adam_eps {} must be finite and positive", self.adam_eps));
        }
        Ok(())
    }
}

/// Stepped schedule: `lr0 · decay^⌊epoch/decay_every⌋`. Asking past the
/// final epoch is an error, not an extrapolation.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} out of range: schedule covers [0, {})",
            cfg.epochs
        )));
    }
    Ok(cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32))
}

// ───────────────────────────── optimizer ─────────────────────────────

/// Adam moment accumulators, one pair of vectors per model tensor (same
/// order as [`ModelParams::tensors`]). Checkpoints restore this bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn zeros(params: &ModelParams<T>) -> Self {
        let m: Vec<Vec<T>> =
            params.tensors().iter().map(|(_, _, d)| vec![T::zero(); d.len()]).collect();
        AdamState { step: 0, m: m.clone(), v: m }
    }
}

/// One tensor's bias-corrected Adam update, in place. `step` is the
/// 1-based step count *after* this update.
pub fn adam_update<T: Element>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    assert_eq!(param.len(), grad.len(), "adam: gradient length");
    assert!(step >= 1, "adam: step counts from 1");
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1);
    let c2 = T::from_f64(1.0 - cfg.beta2);
    let inv_bc1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(step as i32)));
    let inv_bc2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(step as i32)));
    let tlr = T::from_f64(lr);
    let eps = T::from_f64(cfg.adam_eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
        let mhat = m[i] * inv_bc1;
        let vhat = v[i] * inv_bc2;
        param[i] = param[i] - tlr * mhat / (vhat.sqrt() + eps);
    }
}

/// Apply one optimizer step over every model tensor.
pub fn adam_step<T: Element>(
    params: &mut ModelParams<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    let tensors = params.tensors_mut();
    assert_eq!(tensors.len(), grads.len(), "adam_step: one gradient per tensor");
    assert_eq!(tensors.len(), state.m.len(), "adam_step: state mirrors tensors");
    state.step += 1;
    let step = state.step;
    for (i, dst) in tensors.into_iter().enumerate() {
        adam_update(dst, &grads[i], &mut state.m[i], &mut state.v[i], step, lr, cfg);
    }
}

// ───────────────────────────── checkpoints ─────────────────────────────

pub const CHECKPOINT_FORMAT: &str = "patchreg.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Manifest row describing one tensor's slot in the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor's *parameter* block. The first and second
    /// Adam moments mirror the whole parameter region at +1× and +2× its
    /// total size.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

/// JSON sidecar (`<payload>.json`) describing a checkpoint payload: format
/// tag, dtype, optimizer step, the full run config, and the tensor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub adam_step: u64,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl CheckpointManifest {
    /// Total bytes of one payload section (params, or one moment mirror).
    pub fn section_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.len * 4).sum()
    }

    fn check(&self) -> std::result::Result<(), ManifestError> {
        let bad = |msg: String| Err(ManifestError::Invalid(msg));
        if self.format != CHECKPOINT_FORMAT {
            return bad(format!("format tag {:?} is not {CHECKPOINT_FORMAT:?}", self.format));
        }
        if self.version != CHECKPOINT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.dtype != "f32" {
            return bad(format!("unsupported dtype {:?}", self.dtype));
        }
        if self.tensors.is_empty() {
            return bad("empty tensor table".into());
        }
        let mut expect = 0usize;
        for t in &self.tensors {
            if t.name.is_empty() {
                return bad("tensor with an empty name".into());
            }
            let prod: usize = t.shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| ManifestError::Invalid(format!("{}: shape overflows", t.name)))?;
            if prod != t.len || t.len == 0 {
                return bad(format!("{}: shape {:?} does not hold {} elements", t.name, t.shape, t.len));
            }
            if t.offset != expect {
                return bad(format!("{}: offset {} breaks contiguity (expected {expect})", t.name, t.offset));
            }
            expect = expect
                .checked_add(t.len.checked_mul(4).ok_or_else(|| {
                    ManifestError::Invalid(format!("{}: byte size overflows", t.name))
                })?)
                .ok_or_else(|| ManifestError::Invalid("payload size overflows".into()))?;
        }
        Ok(())
    }
}

/// Parse and structurally validate checkpoint-manifest bytes.
pub fn parse_manifest(bytes: &[u8]) -> std::result::Result<CheckpointManifest, ManifestError> {
    let manifest: CheckpointManifest = serde_json::from_slice(bytes)?;
    manifest.check()?;
    Ok(manifest)
}

/// A loaded checkpoint: parameters, optimizer state, and the manifest
/// (whose `config` field reconstructs the architecture).
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub state: AdamState<f32>,
    pub manifest: CheckpointManifest,
}

/// Write `<path>` (binary payload: parameters, then first moments, then
/// second moments, tensor order throughout) and `<path>.json` (manifest).
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    state: &AdamState<f32>,
    config: &RunConfig,
) -> Result<()> {
    let tensors = params.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: data.len() });
        offset += data.len() * 4;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        adam_step: state.step,
        config: config.clone(),
        tensors: entries,
    };
    let mut payload = Vec::with_capacity(3 * offset);
    for (_, _, data) in &tensors {
        for &x in *data {
            x.write_le(&mut payload);
        }
    }
    for section in [&state.m, &state.v] {
        for block in section {
            for &x in block {
                x.write_le(&mut payload);
            }
        }
    }
    std::fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Read a checkpoint pair written by [`save_checkpoint`]. The tensor table
/// must match the architecture in the embedded config name-for-name and
/// shape-for-shape, and every payload value must be finite.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let side = sidecar_path(path);
    let mbytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let manifest =
        parse_manifest(&mbytes).map_err(|e| Error::format(&side, e.to_string()))?;
    manifest.config.validate()?;
    let mut params = ModelParams::<f32>::init(
        &manifest.config.net,
        &manifest.config.stitch,
        manifest.config.patch_dims(),
        0,
    )?;
    {
        let skeleton = params.tensors();
        if skeleton.len() != manifest.tensors.len() {
            return Err(Error::format(
                path,
                format!(
                    "manifest lists {} tensors but the config implies {}",
                    manifest.tensors.len(),
                    skeleton.len()
                ),
            ));
        }
        for ((name, shape, _), entry) in skeleton.iter().zip(&manifest.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor {:?} {:?} does not match the config's {name:?} {shape:?}",
                        entry.name, entry.shape
                    ),
                ));
            }
        }
    }
    let payload = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let section = manifest.section_bytes();
    if payload.len() != 3 * section {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), 3 * section),
        ));
    }
    let read_block = |entry: &TensorEntry, base: usize, out: &mut [f32]| -> Result<()> {
        let start = base + entry.offset;
        for (i, slot) in out.iter_mut().enumerate() {
            let v = f32::read_le(&payload[start + 4 * i..]);
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    format!("tensor {:?} holds a non-finite value at index {i}", entry.name),
                ));
            }
            *slot = v;
        }
        Ok(())
    };
    let mut state = AdamState::zeros(&params);
    for (i, dst) in params.tensors_mut().into_iter().enumerate() {
        let entry = &manifest.tensors[i];
        read_block(entry, 0, dst)?;
        read_block(entry, section, &mut state.m[i])?;
        read_block(entry, 2 * section, &mut state.v[i])?;
    }
    state.step = manifest.adam_step;
    Ok(Checkpoint { params, state, manifest })
}

// ───────────────────────────── training loop ─────────────────────────────

/// One metrics-log line; losses are means over the epoch's steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_smooth: f64,
    pub loss_contrast: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub state: AdamState<f32>,
    pub metrics: Vec<EpochMetrics>,
    /// Path of the final checkpoint payload.
    pub checkpoint: PathBuf,
}

/// Fit the model on the dataset's first `train_movings` pairs, all against
/// the one atlas. Writes `metrics.jsonl` (one line per epoch) plus
/// checkpoints into `out_dir`: `checkpoint_epochNNNN.bin` at every
/// `decay_every`-th epoch and `checkpoint.bin` at the end.
pub fn train(config: &RunConfig, data: &PhantomDataset, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = config.phantom.dims;
    let count = config.phantom.train_movings;
    if data.len() < count {
        return Err(Error::Config(format!(
            "dataset holds {} movings but train_movings is {count}",
            data.len()
        )));
    }
    if data.atlas.dims() != dims {
        return Err(Error::Config(format!(
            "atlas dims {:?} differ from configured {dims:?}",
            data.atlas.dims()
        )));
    }
    let vol_shape = vec![1usize, dims[0], dims[1], dims[2]];
    let mut atlas = data.atlas.data.clone();
    znormalize(&mut atlas);
    let mut movings = Vec::with_capacity(count);
    for k in 0..count {
        if data.movings[k].dims() != dims {
            return Err(Error::Config(format!(
                "moving {k} dims {:?} differ from configured {dims:?}",
                data.movings[k].dims()
            )));
        }
        let mut m = data.movings[k].data.clone();
        znormalize(&mut m);
        movings.push(m);
    }

    let patch = config.patch_dims();
    let geo = config.stitch.resolve(patch)?;
    let mut params =
        ModelParams::<f32>::init(&config.net, &config.stitch, patch, config.train.seed)?;
    let mut state = AdamState::zeros(&params);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = Vec::with_capacity(config.train.epochs);

    for epoch in 0..config.train.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, &config.train)?;
        let mut sums = [0.0f64; 4];
        for (k, moving) in movings.iter().enumerate() {
            let mut tape = Tape::<f32>::new();
            let model = params.to_tape(&mut tape, &config.net);
            let x = tape.leaf(moving.clone(), vol_shape.clone(), false);
            let y = tape.leaf(atlas.clone(), vol_shape.clone(), false);
            let out =
                model.forward_volumes(&mut tape, x, y, config.train.n, &geo, config.stitch.use_stitcher);
            let terms = compute_losses(&mut tape, x, y, &out, &config.loss).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} step {k}: {msg}")),
                other => other,
            })?;
            for (slot, val) in sums.iter_mut().zip([terms.total, terms.recon, terms.smooth, terms.contrast])
            {
                *slot += Element::to_f64(tape.scalar(val));
            }
            tape.backward(terms.total);
            let grads: Vec<Vec<f32>> =
                model.leaves.iter().map(|&leaf| tape.grad(leaf).to_vec()).collect();
            adam_step(&mut params, &grads, &mut state, lr, &config.train);
        }
        let inv = 1.0 / count as f64;
        let line = EpochMetrics {
            epoch,
            lr,
            loss_total: sums[0] * inv,
            loss_recon: sums[1] * inv,
            loss_smooth: sums[2] * inv,
            loss_contrast: sums[3] * inv,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        let mut text = serde_json::to_string(&line).expect("metrics serialize");
        text.push('\n');
        log.write_all(text.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;
        metrics.push(line);
        let last = epoch + 1 == config.train.epochs;
        if (epoch + 1) % config.train.decay_every == 0 && !last {
            let p = out_dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1));
            save_checkpoint(&p, &params, &state, config)?;
        }
    }
    let checkpoint = out_dir.join("checkpoint.bin");
    save_checkpoint(&checkpoint, &params, &state, config)?;
    Ok(TrainOutcome { params, state, metrics, checkpoint })
}
