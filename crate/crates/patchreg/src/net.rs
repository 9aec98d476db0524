//! Registration backbone: a weight-shared convolutional encoder applied to
//! both volumes of a pair, a skip-connected decoder that predicts a
//! per-patch displacement field in each direction, and per-stream MLP
//! projection heads producing the contrastive features.
//!
//! One parameter set exists for the encoder — "stream x" and "stream y" are
//! the same tensors applied twice — and bidirectionality comes from calling
//! the single decoder with the two feature pyramids in swapped order. The
//! final field head starts near zero so the untrained model predicts an
//! (almost exactly) identity warp.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape, Val};
use crate::error::{Error, Result};
use crate::stitcher::{stitch_fields, AttnParams, StitchConfig, StitchGeometry, TapeAttn};

/// Hidden width of the two-layer projection heads.
pub const PROJ_HIDDEN: usize = 256;

// ───────────────────────────── config ─────────────────────────────

/// Architecture hyperparameters. Encoder level 0 keeps the patch
/// resolution; each deeper level halves every axis, so patches must be
/// divisible by `2^(depth−1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub proj_dim: usize,
    pub leaky_alpha: f64,
    pub kernel: usize,
    pub final_init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            enc_channels: vec![16, 32, 32, 32],
            dec_channels: vec![32, 32, 32, 16],
            proj_dim: 128,
            leaky_alpha: 0.2,
            kernel: 3,
            final_init_std: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn depth(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn validate(&self, patch_dims: [usize; 3]) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("net config: {msg}")));
        if self.enc_channels.is_empty() || self.enc_channels.len() != self.dec_channels.len() {
            return fail(format!(
                "encoder depth {} must equal decoder depth {} (and be nonzero)",
                self.enc_channels.len(),
                self.dec_channels.len()
            ));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return fail("channel counts must be positive".into());
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if self.proj_dim == 0 {
            return fail("proj_dim must be positive".into());
        }
        if !(self.leaky_alpha.is_finite() && self.leaky_alpha >= 0.0) {
            return fail(format!("leaky_alpha {} must be finite and >= 0", self.leaky_alpha));
        }
        if !(self.final_init_std.is_finite() && self.final_init_std >= 0.0) {
            return fail(format!("final_init_std {} must be finite and >= 0", self.final_init_std));
        }
        let down = 1usize << (self.depth() - 1);
        if patch_dims.iter().any(|&e| e % down != 0 || e / down == 0) {
            return fail(format!(
                "patch dims {patch_dims:?} must be divisible by 2^(depth-1) = {down}"
            ));
        }
        Ok(())
    }
}

// ───────────────────────────── parameters ─────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    /// `[cout, cin, k, k, k]` row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub rows: usize,
    pub cols: usize,
    /// `[rows, cols]`: output row index, input column index (`y = x·Wᵀ + b`).
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub l1: LinearParams<T>,
    pub l2: LinearParams<T>,
}

/// Every learned tensor of the model, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub enc: Vec<ConvParams<T>>,
    pub dec: Vec<ConvParams<T>>,
    pub head: ConvParams<T>,
    pub proj_x: MlpParams<T>,
    pub proj_y: MlpParams<T>,
    /// Window block then shifted-window block.
    pub stitch: Vec<AttnParams<T>>,
}

fn conv_init<T: Element>(
    cout: usize,
    cin: usize,
    k: usize,
    std: Option<f64>,
    rng: &mut ChaCha20Rng,
) -> ConvParams<T> {
    let fan_in = cin * k * k * k;
    let std = std.unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
    let len = cout * fan_in;
    let weight = if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()
    } else {
        vec![T::zero(); len]
    };
    ConvParams { cout, cin, k, weight, bias: vec![T::zero(); cout] }
}

fn linear_init<T: Element>(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> LinearParams<T> {
    let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
    LinearParams {
        rows,
        cols,
        weight: (0..rows * cols).map(|_| T::from_f64(normal.sample(rng))).collect(),
        bias: vec![T::zero(); rows],
    }
}

impl<T: Element> ModelParams<T> {
    /// Build freshly initialized parameters for `patch_dims`-sized patches:
    /// fan-in-scaled Gaussians everywhere, a near-zero field head, and
    /// exactly-zero attention output projections and bias tables.
    pub fn init(
        net: &NetConfig,
        stitch: &StitchConfig,
        patch_dims: [usize; 3],
        seed: u64,
    ) -> Result<ModelParams<T>> {
        net.validate(patch_dims)?;
        let geo = stitch.resolve(patch_dims)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = net.kernel;
        let depth = net.depth();

        let mut enc = Vec::with_capacity(depth);
        let mut cin = 1;
        for &cout in &net.enc_channels {
            enc.push(conv_init(cout, cin, k, None, &mut rng));
            cin = cout;
        }

        // Decoder: deepest conv sees both streams' deepest features; each
        // later conv sees the upsampled state plus both streams' skips.
        let mut dec = Vec::with_capacity(depth);
        let mut state = 0;
        for (i, &cout) in net.dec_channels.iter().enumerate() {
            let level = depth - 1 - i;
            let cin = if i == 0 { 2 * net.enc_channels[level] } else { state + 2 * net.enc_channels[level] };
            dec.push(conv_init(cout, cin, k, None, &mut rng));
            state = cout;
        }
        let head = conv_init(3, state, k, Some(net.final_init_std), &mut rng);

        let deepest = *net.enc_channels.last().expect("validated depth");
        let proj_x = MlpParams {
            l1: linear_init(PROJ_HIDDEN, deepest, &mut rng),
            l2: linear_init(net.proj_dim, PROJ_HIDDEN, &mut rng),
        };
        let proj_y = MlpParams {
            l1: linear_init(PROJ_HIDDEN, deepest, &mut rng),
            l2: linear_init(net.proj_dim, PROJ_HIDDEN, &mut rng),
        };

        let stitch = vec![
            AttnParams::init(geo.token_dim, geo.heads, stitch.m, &mut rng),
            AttnParams::init(geo.token_dim, geo.heads, stitch.m, &mut rng),
        ];
        Ok(ModelParams { enc, dec, head, proj_x, proj_y, stitch })
    }

    /// Named tensors in checkpoint order: `(name, shape, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        fn conv<'a, T>(
            name: String,
            c: &'a ConvParams<T>,
            out: &mut Vec<(String, Vec<usize>, &'a [T])>,
        ) {
            out.push((format!("{name}.weight"), vec![c.cout, c.cin, c.k, c.k, c.k], &c.weight));
            out.push((format!("{name}.bias"), vec![c.cout], &c.bias));
        }
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            conv(format!("enc{i}"), c, &mut out);
        }
        for (i, c) in self.dec.iter().enumerate() {
            conv(format!("dec{i}"), c, &mut out);
        }
        conv("head".into(), &self.head, &mut out);
        for (tag, mlp) in [("proj_x", &self.proj_x), ("proj_y", &self.proj_y)] {
            for (ln, l) in [("l1", &mlp.l1), ("l2", &mlp.l2)] {
                out.push((format!("{tag}.{ln}.weight"), vec![l.rows, l.cols], &l.weight));
                out.push((format!("{tag}.{ln}.bias"), vec![l.rows], &l.bias));
            }
        }
        for (i, a) in self.stitch.iter().enumerate() {
            let side = 2 * a.m - 1;
            let rows = side * side * side;
            out.push((format!("stitch{i}.wq"), vec![a.e, a.e], &a.wq));
            out.push((format!("stitch{i}.wk"), vec![a.e, a.e], &a.wk));
            out.push((format!("stitch{i}.wv"), vec![a.e, a.e], &a.wv));
            out.push((format!("stitch{i}.wo"), vec![a.e, a.e], &a.wo));
            out.push((format!("stitch{i}.bias_table"), vec![rows, a.heads], &a.bias_table));
        }
        out
    }

    /// Mutable view of the same tensors, same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for c in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        for mlp in [&mut self.proj_x, &mut self.proj_y] {
            out.push(&mut mlp.l1.weight);
            out.push(&mut mlp.l1.bias);
            out.push(&mut mlp.l2.weight);
            out.push(&mut mlp.l2.bias);
        }
        for a in self.stitch.iter_mut() {
            out.push(&mut a.wq);
            out.push(&mut a.wk);
            out.push(&mut a.wv);
            out.push(&mut a.wo);
            out.push(&mut a.bias_table);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }
}

// ───────────────────────────── tape model ─────────────────────────────

pub struct TapeConv {
    pub w: Val,
    pub b: Val,
}

pub struct TapeLinear {
    pub w: Val,
    pub b: Val,
}

pub struct TapeMlp {
    pub l1: TapeLinear,
    pub l2: TapeLinear,
}

/// The model's tensors loaded onto a tape as gradient-carrying leaves, in
/// the same order as [`ModelParams::tensors`] (mirrored in `leaves`).
pub struct TapeModel {
    pub enc: Vec<TapeConv>,
    pub dec: Vec<TapeConv>,
    pub head: TapeConv,
    pub proj_x: TapeMlp,
    pub proj_y: TapeMlp,
    pub stitch: Vec<TapeAttn>,
    /// Flat leaf handles, one per tensor, checkpoint order.
    pub leaves: Vec<Val>,
    alpha: f64,
}

/// Bundled outputs of one full-volume pair forward.
pub struct PairOutput {
    /// Stitched field warping x toward y, `[3, w, h, d]`.
    pub field_xy: Val,
    /// Stitched field warping y toward x.
    pub field_yx: Val,
    /// Patchwise unit features of the x stream, `[n³, proj_dim]`.
    pub feats_x: Val,
    pub feats_y: Val,
}

impl<T: Element> ModelParams<T> {
    pub fn to_tape(&self, tape: &mut Tape<T>, net: &NetConfig) -> TapeModel {
        let mut leaves = Vec::new();
        let conv = |tape: &mut Tape<T>, c: &ConvParams<T>, leaves: &mut Vec<Val>| {
            let w = tape.leaf(c.weight.clone(), vec![c.cout, c.cin, c.k, c.k, c.k], true);
            let b = tape.leaf(c.bias.clone(), vec![c.cout], true);
            leaves.push(w);
            leaves.push(b);
            TapeConv { w, b }
        };
        let enc: Vec<TapeConv> = self.enc.iter().map(|c| conv(tape, c, &mut leaves)).collect();
        let dec: Vec<TapeConv> = self.dec.iter().map(|c| conv(tape, c, &mut leaves)).collect();
        let head = conv(tape, &self.head, &mut leaves);
        let mlp = |tape: &mut Tape<T>, m: &MlpParams<T>, leaves: &mut Vec<Val>| {
            let lin = |tape: &mut Tape<T>, l: &LinearParams<T>, leaves: &mut Vec<Val>| {
                let w = tape.leaf(l.weight.clone(), vec![l.rows, l.cols], true);
                let b = tape.leaf(l.bias.clone(), vec![l.rows], true);
                leaves.push(w);
                leaves.push(b);
                TapeLinear { w, b }
            };
            TapeMlp { l1: lin(tape, &m.l1, leaves), l2: lin(tape, &m.l2, leaves) }
        };
        let proj_x = mlp(tape, &self.proj_x, &mut leaves);
        let proj_y = mlp(tape, &self.proj_y, &mut leaves);
        let stitch: Vec<TapeAttn> = self
            .stitch
            .iter()
            .map(|a| {
                let block = TapeAttn::new(tape, a);
                leaves.extend([block.wq, block.wk, block.wv, block.wo, block.table]);
                block
            })
            .collect();
        TapeModel { enc, dec, head, proj_x, proj_y, stitch, leaves, alpha: net.leaky_alpha }
    }
}

impl TapeModel {
    fn conv_block<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Val,
        conv: &TapeConv,
        stride: usize,
    ) -> Val {
        let k = tape.shape(conv.w)[2];
        let y = tape.conv3d(x, conv.w, conv.b, stride, k / 2);
        tape.leaky_relu(y, T::from_f64(self.alpha))
    }

    /// Feature pyramid of one patch: level 0 at patch resolution, each
    /// deeper level halved per axis. Both streams call this with the same
    /// parameter leaves — that is the weight sharing.
    pub fn encode<T: Element>(&self, tape: &mut Tape<T>, patch: Val) -> Vec<Val> {
        let mut levels = Vec::with_capacity(self.enc.len());
        let mut x = patch;
        for (l, conv) in self.enc.iter().enumerate() {
            x = self.conv_block(tape, x, conv, if l == 0 { 1 } else { 2 });
            levels.push(x);
        }
        levels
    }

    /// Decode a displacement-field patch from two pyramids: fuse the
    /// deepest features, then repeatedly upsample and fuse both streams'
    /// skip connections; a final linear conv maps to 3 channels.
    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, pyr_x: &[Val], pyr_y: &[Val]) -> Val {
        let depth = self.enc.len();
        assert_eq!(pyr_x.len(), depth, "decode: pyramid depth");
        assert_eq!(pyr_y.len(), depth, "decode: pyramid depth");
        let fused = tape.concat_channels(&[pyr_x[depth - 1], pyr_y[depth - 1]]);
        let mut state = self.conv_block(tape, fused, &self.dec[0], 1);
        for (i, conv) in self.dec.iter().enumerate().skip(1) {
            let level = depth - 1 - i;
            let up = tape.upsample2(state);
            let cat = tape.concat_channels(&[up, pyr_x[level], pyr_y[level]]);
            state = self.conv_block(tape, cat, conv, 1);
        }
        let k = tape.shape(self.head.w)[2];
        tape.conv3d(state, self.head.w, self.head.b, 1, k / 2)
    }

    /// Patch feature vector: global average pool of the deepest level, two
    /// linear layers with a leaky ReLU between, then L2 normalization.
    pub fn project<T: Element>(&self, tape: &mut Tape<T>, deepest: Val, mlp: &TapeMlp) -> Val {
        let pooled = tape.spatial_mean(deepest);
        let c = tape.shape(pooled)[0];
        let row = tape.reshape(pooled, vec![1, c]);
        let h = tape.matmul_nt(row, mlp.l1.w);
        let h = tape.add_row_vec(h, mlp.l1.b);
        let h = tape.leaky_relu(h, T::from_f64(self.alpha));
        let f = tape.matmul_nt(h, mlp.l2.w);
        let f = tape.add_row_vec(f, mlp.l2.b);
        tape.l2_normalize(f)
    }

    /// Forward one same-position patch pair: both directed field patches
    /// (swapped decoder arguments, same weights) plus both unit features.
    pub fn forward_pair<T: Element>(
        &self,
        tape: &mut Tape<T>,
        px: Val,
        py: Val,
    ) -> (Val, Val, Val, Val) {
        let pyr_x = self.encode(tape, px);
        let pyr_y = self.encode(tape, py);
        let zxy = self.decode(tape, &pyr_x, &pyr_y);
        let zyx = self.decode(tape, &pyr_y, &pyr_x);
        let fx = self.project(tape, pyr_x[pyr_x.len() - 1], &self.proj_x);
        let fy = self.project(tape, pyr_y[pyr_y.len() - 1], &self.proj_y);
        (zxy, zyx, fx, fy)
    }

    /// Full-volume bidirectional forward: partition `x` and `y` into n³
    /// patches, run [`Self::forward_pair`] at every position, then stitch
    /// both directed fields (through the attention stitcher unless
    /// `use_stitcher` is off) and stack the patch features row-wise.
    pub fn forward_volumes<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Val,
        y: Val,
        n: usize,
        geo: &StitchGeometry,
        use_stitcher: bool,
    ) -> PairOutput {
        let shape = tape.shape(x).to_vec();
        assert_eq!(shape, tape.shape(y), "forward_volumes: volume shapes differ");
        let (w, h, d) = (shape[1], shape[2], shape[3]);
        assert!(
            w % n == 0 && h % n == 0 && d % n == 0,
            "forward_volumes: dims {shape:?} not divisible by n = {n}"
        );
        let pdims = [w / n, h / n, d / n];
        assert_eq!(geo.layout.patch_dims, pdims, "forward_volumes: stitcher geometry");
        let mut zxy = Vec::with_capacity(n * n * n);
        let mut zyx = Vec::with_capacity(n * n * n);
        let mut fx = Vec::with_capacity(n * n * n);
        let mut fy = Vec::with_capacity(n * n * n);
        for p in 0..n * n * n {
            let (ix, iy, iz) = (p % n, (p / n) % n, p / (n * n));
            let origin = [ix * pdims[0], iy * pdims[1], iz * pdims[2]];
            let px = tape.extract_patch(x, origin, pdims);
            let py = tape.extract_patch(y, origin, pdims);
            let (a, b, c, d) = self.forward_pair(tape, px, py);
            zxy.push(a);
            zyx.push(b);
            fx.push(c);
            fy.push(d);
        }
        let (field_xy, field_yx) = if use_stitcher {
            (
                stitch_fields(tape, &zxy, n, geo, &self.stitch[0], &self.stitch[1]),
                stitch_fields(tape, &zyx, n, geo, &self.stitch[0], &self.stitch[1]),
            )
        } else {
            (tape.assemble_patches(&zxy, n), tape.assemble_patches(&zyx, n))
        };
        PairOutput {
            field_xy,
            field_yx,
            feats_x: tape.concat_rows(&fx),
            feats_y: tape.concat_rows(&fy),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use rand::Rng;

    fn tiny_net() -> NetConfig {
        NetConfig {
            enc_channels: vec![2, 4, 4, 4],
            dec_channels: vec![4, 4, 4, 2],
            proj_dim: 8,
            ..NetConfig::default()
        }
    }

    fn tiny_stitch() -> StitchConfig {
        StitchConfig { m: 2, heads: 2, use_stitcher: true }
    }

    fn rand_vec(rng: &mut ChaCha20Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn parameter_count_is_pinned_for_the_default_architecture() {
        let p =
            ModelParams::<f32>::init(&NetConfig::default(), &StitchConfig::default(), [16, 16, 16], 7)
                .unwrap();
        let by_prefix = |prefix: &str| -> usize {
            p.tensors().iter().filter(|(n, _, _)| n.starts_with(prefix)).map(|(_, _, d)| d.len()).sum()
        };
        assert_eq!(by_prefix("enc"), 69_664);
        assert_eq!(by_prefix("dec") + by_prefix("head"), 250_243);
        assert_eq!(by_prefix("proj_x"), 41_344);
        assert_eq!(by_prefix("proj_y"), 41_344);
        assert_eq!(by_prefix("stitch0"), 148_828);
        assert_eq!(by_prefix("stitch1"), 148_828);
        assert_eq!(p.param_count(), 700_251);
    }

    #[test]
    fn tensor_registry_is_consistent() {
        let p = ModelParams::<f32>::init(&tiny_net(), &tiny_stitch(), [8, 8, 8], 3).unwrap();
        let tensors = p.tensors();
        let mut names: Vec<&String> = tensors.iter().map(|(n, _, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), tensors.len(), "names must be unique");
        for (name, shape, data) in &tensors {
            assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        }
        // The mutable view walks the same tensors in the same order.
        let lens: Vec<usize> = tensors.iter().map(|(_, _, d)| d.len()).collect();
        let mut q = p.clone();
        let mlens: Vec<usize> = q.tensors_mut().iter().map(|d| d.len()).collect();
        assert_eq!(lens, mlens);
    }

    #[test]
    fn initialization_is_deterministic_in_the_seed() {
        let a = ModelParams::<f32>::init(&tiny_net(), &tiny_stitch(), [8, 8, 8], 5).unwrap();
        let b = ModelParams::<f32>::init(&tiny_net(), &tiny_stitch(), [8, 8, 8], 5).unwrap();
        let c = ModelParams::<f32>::init(&tiny_net(), &tiny_stitch(), [8, 8, 8], 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pyramid_shapes_follow_the_channel_plan() {
        let cfg = NetConfig::default();
        let p = ModelParams::<f32>::init(&cfg, &StitchConfig::default(), [16, 16, 16], 1).unwrap();
        let mut tape = Tape::new();
        let model = p.to_tape(&mut tape, &cfg);
        let patch = tape.leaf(vec![0.1; 16 * 16 * 16], vec![1, 16, 16, 16], false);
        let pyr = model.encode(&mut tape, patch);
        let shapes: Vec<Vec<usize>> = pyr.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![16, 16, 16, 16], vec![32, 8, 8, 8], vec![32, 4, 4, 4], vec![32, 2, 2, 2]]
        );
        let field = model.decode(&mut tape, &pyr, &pyr);
        assert_eq!(tape.shape(field), &[3, 16, 16, 16]);
    }

    #[test]
    fn zero_input_with_zero_biases_yields_zero_features() {
        let cfg = tiny_net();
        let p = ModelParams::<f64>::init(&cfg, &tiny_stitch(), [8, 8, 8], 2).unwrap();
        let mut tape = Tape::new();
        let model = p.to_tape(&mut tape, &cfg);
        let patch = tape.leaf(vec![0.0; 512], vec![1, 8, 8, 8], false);
        let pyr = model.encode(&mut tape, patch);
        for &lvl in &pyr {
            assert!(tape.data(lvl).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_head_predicts_an_exactly_zero_field() {
        let cfg = NetConfig { final_init_std: 0.0, ..tiny_net() };
        let p = ModelParams::<f64>::init(&cfg, &tiny_stitch(), [8, 8, 8], 4).unwrap();
        assert!(p.head.weight.iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let model = p.to_tape(&mut tape, &cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let px = tape.leaf(rand_vec(&mut rng, 512), vec![1, 8, 8, 8], false);
        let py = tape.leaf(rand_vec(&mut rng, 512), vec![1, 8, 8, 8], false);
        let (zxy, zyx, _, _) = model.forward_pair(&mut tape, px, py);
        assert!(tape.data(zxy).iter().all(|&v| v == 0.0));
        assert!(tape.data(zyx).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_the_pair_swaps_the_directed_fields_exactly() {
        let cfg = tiny_net();
        let p = ModelParams::<f64>::init(&cfg, &tiny_stitch(), [8, 8, 8], 9).unwrap();
        let mut tape = Tape::new();
        let model = p.to_tape(&mut tape, &cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let px = tape.leaf(rand_vec(&mut rng, 512), vec![1, 8, 8, 8], false);
        let py = tape.leaf(rand_vec(&mut rng, 512), vec![1, 8, 8, 8], false);
        let (xy, yx, _, _) = model.forward_pair(&mut tape, px, py);
        let (xy2, yx2, _, _) = model.forward_pair(&mut tape, py, px);
        assert_eq!(tape.data(xy), tape.data(yx2));
        assert_eq!(tape.data(yx), tape.data(xy2));
        // Direction matters: the two directed fields differ for px ≠ py.
        assert_ne!(tape.data(xy), tape.data(yx));
        // Weight sharing: identical inputs give identical pyramids, and the
        // pair then collapses to a single direction.
        let (same_xy, same_yx, fx, _) = model.forward_pair(&mut tape, px, px);
        assert_eq!(tape.data(same_xy), tape.data(same_yx));
        // One parameter object: the tape holds exactly one leaf per tensor.
        assert_eq!(model.leaves.len(), p.tensors().len());
        let _ = fx;
    }

    #[test]
    fn projections_are_unit_vectors() {
        let cfg = tiny_net();
        let p = ModelParams::<f64>::init(&cfg, &tiny_stitch(), [8, 8, 8], 11).unwrap();
        let mut tape = Tape::new();
        let model = p.to_tape(&mut tape, &cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let px = tape.leaf(rand_vec(&mut rng, 512), vec![1, 8, 8, 8], false);
        let py = tape.leaf(rand_vec(&mut rng, 512), vec![1, 8, 8, 8], false);
        let (_, _, fx, fy) = model.forward_pair(&mut tape, px, py);
        for f in [fx, fy] {
            let data = tape.data(f);
            assert_eq!(data.len(), cfg.proj_dim);
            let norm: f64 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
        // Identical inputs → identical projections per stream; cosine of a
        // projection with itself is 1.
        let (_, _, fx2, _) = model.forward_pair(&mut tape, px, py);
        assert_eq!(tape.data(fx), tape.data(fx2));
        let cos: f64 = tape.data(fx).iter().map(|v| v * v).sum();
        assert!((cos - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_volume_forward_shapes_and_init_identity() {
        let cfg = tiny_net();
        let scfg = tiny_stitch();
        let p = ModelParams::<f64>::init(&cfg, &scfg, [8, 8, 8], 13).unwrap();
        let geo = scfg.resolve([8, 8, 8]).unwrap();
        let mut tape = Tape::new();
        let model = p.to_tape(&mut tape, &cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = tape.leaf(rand_vec(&mut rng, 16 * 16 * 16), vec![1, 16, 16, 16], false);
        let y = tape.leaf(rand_vec(&mut rng, 16 * 16 * 16), vec![1, 16, 16, 16], false);
        let out = model.forward_volumes(&mut tape, x, y, 2, &geo, true);
        assert_eq!(tape.shape(out.field_xy), &[3, 16, 16, 16]);
        assert_eq!(tape.shape(out.feats_x), &[8, cfg.proj_dim]);
        // Zero-initialized attention output projections: the stitched field
        // equals the naive stitch of the same patches, so toggling the
        // stitcher changes nothing at init.
        let naive = model.forward_volumes(&mut tape, x, y, 2, &geo, false);
        assert_eq!(tape.data(out.field_xy), tape.data(naive.field_xy));
        assert_eq!(tape.data(out.field_yx), tape.data(naive.field_yx));
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let cfg = tiny_net();
        assert!(cfg.validate([8, 8, 8]).is_ok());
        assert!(cfg.validate([12, 8, 8]).is_err()); // 12 % 8 != 0
        assert!(cfg.validate([4, 4, 4]).is_err()); // too small to halve three times
        let bad = NetConfig { dec_channels: vec![4, 4], ..tiny_net() };
        assert!(bad.validate([8, 8, 8]).is_err());
        let bad = NetConfig { kernel: 4, ..tiny_net() };
        assert!(bad.validate([8, 8, 8]).is_err());
    }

    #[test]
    fn every_parameter_gradient_matches_finite_differences() {
        // Whole forward_pair on an 8³ patch pair, tiny config, f64. The
        // field head gets a healthy init here: with the near-zero default,
        // decoder gradients are ~1e-9 and the relative metric would only
        // measure finite-difference roundoff.
        let cfg = NetConfig { final_init_std: 0.05, ..tiny_net() };
        let scfg = tiny_stitch();
        let params = ModelParams::<f64>::init(&cfg, &scfg, [8, 8, 8], 17).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut inputs: Vec<(Vec<f64>, Vec<usize>)> = vec![
            (rand_vec(&mut rng, 512), vec![1, 8, 8, 8]),
            (rand_vec(&mut rng, 512), vec![1, 8, 8, 8]),
        ];
        for (_, shape, data) in params.tensors() {
            inputs.push((data.to_vec(), shape));
        }
        let report = grad_check(
            |tape, vals| {
                // Wire the model straight onto the harness's leaves so
                // finite differences see the perturbed tensors.
                let model = rebuild_on(&params, &cfg, &vals[2..]);
                let (zxy, zyx, fx, fy) = model.forward_pair(tape, vals[0], vals[1]);
                let a = tape.mean(zxy);
                let b = tape.mean(zyx);
                let c = tape.mean(fx);
                let d = tape.mean(fy);
                let ab = tape.add(a, b);
                let cd = tape.add(c, d);
                tape.add(ab, cd)
            },
            &inputs,
            1e-5,
            70,
        );
        assert!(report.max_rel < 1e-4, "{report:?}");
        assert!(report.max_rel < 1e-6, "expected comfortable margin, got {report:?}");
    }

    /// Build a TapeModel whose leaves are the caller's Vals (for gradcheck).
    fn rebuild_on(p: &ModelParams<f64>, cfg: &NetConfig, vals: &[Val]) -> TapeModel {
        let mut it = vals.iter().copied();
        let mut next = || it.next().expect("enough vals");
        let enc: Vec<TapeConv> = p.enc.iter().map(|_| TapeConv { w: next(), b: next() }).collect();
        let dec: Vec<TapeConv> = p.dec.iter().map(|_| TapeConv { w: next(), b: next() }).collect();
        let head = TapeConv { w: next(), b: next() };
        let mut mlp = || TapeMlp {
            l1: TapeLinear { w: next(), b: next() },
            l2: TapeLinear { w: next(), b: next() },
        };
        let proj_x = mlp();
        let proj_y = mlp();
        let stitch: Vec<TapeAttn> = p
            .stitch
            .iter()
            .map(|a| TapeAttn {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                table: next(),
                e: a.e,
                heads: a.heads,
                rel_idx: std::sync::Arc::new(crate::stitcher::rel_pos_index(a.m)),
            })
            .collect();
        TapeModel { enc, dec, head, proj_x, proj_y, stitch, leaves: vals.to_vec(), alpha: cfg.leaky_alpha }
    }
}
