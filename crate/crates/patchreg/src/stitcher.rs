//! Windowed self-attention stitcher for per-patch deformation fields.
//!
//! Each predicted field patch is one attention *window*; the window splits
//! into m³ regions, each flattened into one token of dimension
//! `E = 3·sx·sy·sz` (three displacement channels times the region volume).
//! A window-attention block mixes the tokens of a window (W-MSA); the
//! patches are stitched; the stitched field is cyclically shifted by one
//! region and re-windowed so a second block (SW-MSA — same computation,
//! separate parameters) can exchange information *across* the original
//! patch seams; the shift is then undone. Output projections and the
//! relative-position bias tables start at zero, so an untrained stitcher
//! is bit-exactly the naive patch stitch.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape, Val};
use crate::error::{Error, Result};
use crate::patching::WindowLayout;

// ───────────────────────────── config & geometry ─────────────────────────────

/// Attention-stitcher settings. `use_stitcher = false` bypasses both
/// attention blocks (fields are naively stitched), which is the ablation
/// baseline; it is not part of the learned identity-at-init story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StitchConfig {
    /// Regions per axis per window; tokens per window = m³.
    pub m: usize,
    /// Attention heads; must divide the token dimension.
    pub heads: usize,
    pub use_stitcher: bool,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig { m: 4, heads: 4, use_stitcher: true }
    }
}

/// Resolved per-run attention geometry, derived from the patch extent.
#[derive(Debug, Clone)]
pub struct StitchGeometry {
    pub layout: WindowLayout,
    /// Token dimension E = 3 · region volume.
    pub token_dim: usize,
    pub heads: usize,
    /// Rows of the relative-position bias table: (2m−1)³.
    pub table_rows: usize,
    /// Flattened token-pair → table-row map, length (m³)².
    pub rel_idx: Arc<Vec<usize>>,
}

impl StitchConfig {
    pub fn resolve(&self, patch_dims: [usize; 3]) -> Result<StitchGeometry> {
        let layout = WindowLayout::new(patch_dims, self.m)?;
        let token_dim = layout.token_dim(3);
        if self.heads == 0 || token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "stitcher: token dim {} not divisible by heads {}",
                token_dim, self.heads
            )));
        }
        let side = 2 * self.m - 1;
        Ok(StitchGeometry {
            layout,
            token_dim,
            heads: self.heads,
            table_rows: side * side * side,
            rel_idx: Arc::new(rel_pos_index(self.m)),
        })
    }
}

/// Map every ordered token pair (t, u) to a bias-table row addressed by the
/// 3D offset of their region coordinates: row = flatten(coords(t) −
/// coords(u) + (m−1)) over a (2m−1)³ grid, x fastest. Token t sits at
/// region (t mod m, (t/m) mod m, t/m²).
pub fn rel_pos_index(m: usize) -> Vec<usize> {
    let t = m * m * m;
    let side = 2 * m - 1;
    let coords = |p: usize| {
        [(p % m) as isize, ((p / m) % m) as isize, (p / (m * m)) as isize]
    };
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        let cq = coords(q);
        for k in 0..t {
            let ck = coords(k);
            let off = [
                (cq[0] - ck[0] + m as isize - 1) as usize,
                (cq[1] - ck[1] + m as isize - 1) as usize,
                (cq[2] - ck[2] + m as isize - 1) as usize,
            ];
            idx.push((off[2] * side + off[1]) * side + off[0]);
        }
    }
    idx
}

// ───────────────────────────── parameters ─────────────────────────────

/// One attention block's learned tensors. `wq/wk/wv/wo` are `[E, E]`
/// row-major (output row, input column); the bias table is
/// `[(2m−1)³, heads]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub e: usize,
    pub heads: usize,
    pub m: usize,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub bias_table: Vec<T>,
}

impl<T: Element> AttnParams<T> {
    /// He-style init for the q/k/v projections; the output projection and
    /// the bias table start at zero so the block is the identity.
    pub fn init(e: usize, heads: usize, m: usize, rng: &mut ChaCha20Rng) -> Self {
        let normal = Normal::new(0.0f64, (2.0 / e as f64).sqrt()).expect("positive std");
        let mut draw = |count: usize| -> Vec<T> {
            (0..count).map(|_| T::from_f64(normal.sample(rng))).collect()
        };
        let side = 2 * m - 1;
        let rows = side * side * side;
        AttnParams {
            e,
            heads,
            m,
            wq: draw(e * e),
            wk: draw(e * e),
            wv: draw(e * e),
            wo: vec![T::zero(); e * e],
            bias_table: vec![T::zero(); rows * heads],
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.e * self.e + self.bias_table.len()
    }
}

/// Tape handles for one attention block's parameters.
pub struct TapeAttn {
    pub wq: Val,
    pub wk: Val,
    pub wv: Val,
    pub wo: Val,
    pub table: Val,
    pub e: usize,
    pub heads: usize,
    pub rel_idx: Arc<Vec<usize>>,
}

impl TapeAttn {
    /// Load a block's parameters onto the tape as gradient-carrying leaves.
    pub fn new<T: Element>(tape: &mut Tape<T>, p: &AttnParams<T>) -> TapeAttn {
        let side = 2 * p.m - 1;
        let rows = side * side * side;
        TapeAttn {
            wq: tape.leaf(p.wq.clone(), vec![p.e, p.e], true),
            wk: tape.leaf(p.wk.clone(), vec![p.e, p.e], true),
            wv: tape.leaf(p.wv.clone(), vec![p.e, p.e], true),
            wo: tape.leaf(p.wo.clone(), vec![p.e, p.e], true),
            table: tape.leaf(p.bias_table.clone(), vec![rows, p.heads], true),
            e: p.e,
            heads: p.heads,
            rel_idx: Arc::new(rel_pos_index(p.m)),
        }
    }
}

// ───────────────────────────── attention block ─────────────────────────────

/// Windowed multi-head self-attention with a residual connection:
/// per head, `softmax(q·kᵀ/√(E/h) + bias)·v`, heads concatenated, output
/// projection, plus the input. Returns the per-head attention matrices too.
pub(crate) fn wmsa_with_attention<T: Element>(
    tape: &mut Tape<T>,
    tokens: Val,
    attn: &TapeAttn,
) -> (Val, Vec<Val>) {
    let shape = tape.shape(tokens).to_vec();
    assert_eq!(shape.len(), 2, "wmsa: tokens must be [T, E]");
    let (t, e) = (shape[0], shape[1]);
    assert_eq!(e, attn.e, "wmsa: token dim {} vs params {}", e, attn.e);
    assert_eq!(attn.rel_idx.len(), t * t, "wmsa: bias index table length");
    let q = tape.matmul_nt(tokens, attn.wq);
    let k = tape.matmul_nt(tokens, attn.wk);
    let v = tape.matmul_nt(tokens, attn.wv);
    let hd = e / attn.heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut merged = Vec::with_capacity(attn.heads);
    let mut weights = Vec::with_capacity(attn.heads);
    for head in 0..attn.heads {
        let qh = tape.slice_cols(q, head * hd, hd);
        let kh = tape.slice_cols(k, head * hd, hd);
        let vh = tape.slice_cols(v, head * hd, hd);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let biased = tape.rel_pos_bias(scaled, attn.table, head, attn.rel_idx.clone());
        let a = tape.softmax_last(biased);
        weights.push(a);
        merged.push(tape.matmul(a, vh));
    }
    let cat = tape.concat_cols(&merged);
    let proj = tape.matmul_nt(cat, attn.wo);
    (tape.add(proj, tokens), weights)
}

/// [`wmsa_with_attention`] without the attention matrices.
pub fn wmsa<T: Element>(tape: &mut Tape<T>, tokens: Val, attn: &TapeAttn) -> Val {
    wmsa_with_attention(tape, tokens, attn).0
}

// ───────────────────────────── stitching pipeline ─────────────────────────────

/// Refine n³ per-patch field values and stitch them into the full field:
/// W-MSA inside each patch window, naive stitch, cyclic shift by one region
/// along every axis, SW-MSA over the re-partitioned windows (wrapped content
/// attends freely — no mask), stitch, and unshift.
pub fn stitch_fields<T: Element>(
    tape: &mut Tape<T>,
    patch_fields: &[Val],
    n: usize,
    geo: &StitchGeometry,
    wblock: &TapeAttn,
    swblock: &TapeAttn,
) -> Val {
    assert_eq!(patch_fields.len(), n * n * n, "stitch_fields: patch count");
    let patch_dims = geo.layout.patch_dims;
    let m = geo.layout.m;
    let refined: Vec<Val> = patch_fields
        .iter()
        .map(|&p| {
            let tok = tape.tokenize(p, m);
            let out = wmsa(tape, tok, wblock);
            tape.detokenize(out, 3, patch_dims, m)
        })
        .collect();
    let naive = tape.assemble_patches(&refined, n);

    let [sx, sy, sz] = geo.layout.region_dims();
    let offsets = [sx as i64, sy as i64, sz as i64];
    let shifted = tape.cyclic_shift(naive, offsets);
    let [pw, ph, pd] = patch_dims;
    let windows: Vec<Val> = (0..n * n * n)
        .map(|p| {
            let (ix, iy, iz) = (p % n, (p / n) % n, p / (n * n));
            let win = tape.extract_patch(shifted, [ix * pw, iy * ph, iz * pd], patch_dims);
            let tok = tape.tokenize(win, m);
            let out = wmsa(tape, tok, swblock);
            tape.detokenize(out, 3, patch_dims, m)
        })
        .collect();
    let stitched = tape.assemble_patches(&windows, n);
    tape.cyclic_shift(stitched, [-offsets[0], -offsets[1], -offsets[2]])
}

// ───────────────────────────── complexity counter ─────────────────────────────

/// Which attention layout the analytic multiply-add counter prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionCost {
    /// Global attention over all voxels: 4·whd·C² + 2·(whd)²·C.
    FullMsa,
    /// Windowed attention: 4·whd·C² + 2·m³·whd·C.
    WindowMsa,
}

/// Analytic multiply-add count of one attention layer over a `dims` grid
/// with C = 3 value channels. Pure arithmetic — nothing is executed — used
/// to document the linear-vs-quadratic scaling gap.
pub fn count_attention_madds(dims: [usize; 3], m: usize, mode: AttentionCost) -> u128 {
    let whd = dims[0] as u128 * dims[1] as u128 * dims[2] as u128;
    let c: u128 = 3;
    match mode {
        AttentionCost::FullMsa => 4 * whd * c * c + 2 * whd * whd * c,
        AttentionCost::WindowMsa => {
            let m3 = (m as u128).pow(3);
            4 * whd * c * c + 2 * m3 * whd * c
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use rand::Rng;

    fn identity<T: Element>(e: usize) -> Vec<T> {
        let mut w = vec![T::zero(); e * e];
        for i in 0..e {
            w[i * e + i] = T::one();
        }
        w
    }

    fn rand_vec(rng: &mut ChaCha20Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn geometry_resolution_derives_token_dim_and_table() {
        let cfg = StitchConfig::default();
        let geo = cfg.resolve([8, 8, 8]).unwrap();
        assert_eq!(geo.layout.region_dims(), [2, 2, 2]);
        assert_eq!(geo.token_dim, 24);
        assert_eq!(geo.table_rows, 343);
        assert_eq!(geo.rel_idx.len(), 64 * 64);
        let geo = cfg.resolve([16, 16, 16]).unwrap();
        assert_eq!(geo.token_dim, 192);
        // Heads must divide E; m must divide the patch.
        assert!(StitchConfig { heads: 5, ..cfg.clone() }.resolve([8, 8, 8]).is_err());
        assert!(StitchConfig { m: 3, ..cfg }.resolve([8, 8, 8]).is_err());
    }

    #[test]
    fn relative_position_rows_follow_the_offset_grid() {
        let idx = rel_pos_index(2);
        assert_eq!(idx.len(), 64);
        // Same token → zero offset → center row (1·3+1)·3+1 = 13.
        for t in 0..8 {
            assert_eq!(idx[t * 8 + t], 13);
        }
        // Token 0 = region (0,0,0), token 1 = region (1,0,0): offset
        // (−1,0,0) → row (1·3+1)·3+0 = 12; reversed pair → row 14.
        assert_eq!(idx[1], 12);
        assert_eq!(idx[8], 14);
        // All 27 rows are hit for m = 2.
        let mut seen: Vec<usize> = idx.to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, (0..27).collect::<Vec<_>>());
    }

    #[test]
    fn zero_output_projection_makes_the_block_an_exact_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let params = AttnParams::<f64>::init(24, 4, 2, &mut rng);
        assert!(params.wo.iter().all(|&v| v == 0.0));
        assert!(params.bias_table.iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let tokens = tape.leaf(rand_vec(&mut rng, 8 * 24), vec![8, 24], true);
        let attn = TapeAttn::new(&mut tape, &params);
        let out = wmsa(&mut tape, tokens, &attn);
        assert_eq!(tape.data(out), tape.data(tokens));
    }

    #[test]
    fn single_token_window_reduces_to_the_value_path() {
        // One token (m = 1): the attention weight is exactly 1, so with
        // identity q/k/v/o projections the block returns token + v = 2·token.
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let e = 24;
        let mut params = AttnParams::<f64>::init(e, 4, 1, &mut rng);
        params.wq = identity(e);
        params.wk = identity(e);
        params.wv = identity(e);
        params.wo = identity(e);
        let mut tape = Tape::new();
        let data = rand_vec(&mut rng, e);
        let tokens = tape.leaf(data.clone(), vec![1, e], true);
        let attn = TapeAttn::new(&mut tape, &params);
        let (out, weights) = wmsa_with_attention(&mut tape, tokens, &attn);
        for &a in &weights {
            assert_eq!(tape.data(a), &[1.0]);
        }
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.data(out), &want[..]);
    }

    #[test]
    fn two_token_block_matches_a_hand_computed_softmax_oracle() {
        // E = 2, one head, identity q/k/o, hand-set v, zero bias.
        let params = AttnParams::<f64> {
            e: 2,
            heads: 1,
            m: 1,
            wq: identity(2),
            wk: identity(2),
            wv: vec![1.0, 2.0, 3.0, 4.0],
            wo: identity(2),
            bias_table: vec![0.0],
        };
        let mut tape = Tape::new();
        let t0 = [1.0, 0.0];
        let t1 = [0.0, 2.0];
        let tokens = tape.leaf(vec![t0[0], t0[1], t1[0], t1[1]], vec![2, 2], true);
        let mut attn = TapeAttn::new(&mut tape, &params);
        attn.rel_idx = Arc::new(vec![0; 4]); // all pairs share the single zero row
        let (out, weights) = wmsa_with_attention(&mut tape, tokens, &attn);

        // Hand oracle. q = k = tokens, v rows: v0 = t0·Wᵥᵀ = (1,3),
        // v1 = (4,8). scores = q·kᵀ/√2 = [[1,0],[0,4]]/√2.
        let s = 1.0 / 2.0f64.sqrt();
        let rows = [[1.0 * s, 0.0], [0.0, 4.0 * s]];
        let mut want = Vec::new();
        let v = [[1.0, 3.0], [4.0, 8.0]];
        let toks = [t0, t1];
        for (r, row) in rows.iter().enumerate() {
            let mx = row[0].max(row[1]);
            let (e0, e1) = ((row[0] - mx).exp(), (row[1] - mx).exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let got_a = tape.data(weights[0]);
            assert!((got_a[r * 2] - a0).abs() < 1e-10, "attention[{r},0]");
            assert!((got_a[r * 2 + 1] - a1).abs() < 1e-10, "attention[{r},1]");
            want.push(a0 * v[0][0] + a1 * v[1][0] + toks[r][0]);
            want.push(a0 * v[0][1] + a1 * v[1][1] + toks[r][1]);
        }
        for (g, w) in tape.data(out).iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_for_every_head() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (e, heads, m) = (6, 2, 3);
        let mut params = AttnParams::<f64>::init(e, heads, m, &mut rng);
        // Make the bias and output paths non-trivial.
        params.bias_table = rand_vec(&mut rng, params.bias_table.len());
        params.wo = rand_vec(&mut rng, e * e);
        let mut tape = Tape::new();
        let t = m * m * m;
        let tokens = tape.leaf(rand_vec(&mut rng, t * e), vec![t, e], true);
        let attn = TapeAttn::new(&mut tape, &params);
        let (_, weights) = wmsa_with_attention(&mut tape, tokens, &attn);
        assert_eq!(weights.len(), heads);
        for a in weights {
            for row in tape.data(a).chunks_exact(t) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn stitcher_at_init_equals_the_naive_stitch_bit_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let cfg = StitchConfig { m: 2, heads: 4, use_stitcher: true };
        let geo = cfg.resolve([4, 4, 4]).unwrap();
        let w = AttnParams::<f64>::init(geo.token_dim, geo.heads, cfg.m, &mut rng);
        let sw = AttnParams::<f64>::init(geo.token_dim, geo.heads, cfg.m, &mut rng);
        let mut tape = Tape::new();
        let patches: Vec<Val> = (0..8)
            .map(|_| tape.leaf(rand_vec(&mut rng, 3 * 64), vec![3, 4, 4, 4], true))
            .collect();
        let wb = TapeAttn::new(&mut tape, &w);
        let swb = TapeAttn::new(&mut tape, &sw);
        let out = stitch_fields(&mut tape, &patches, 2, &geo, &wb, &swb);
        let naive = tape.assemble_patches(&patches, 2);
        assert_eq!(tape.shape(out), &[3, 8, 8, 8]);
        assert_eq!(tape.data(out), tape.data(naive));
    }

    #[test]
    fn wmsa_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (t, e, heads, m) = (8usize, 6usize, 2usize, 2usize);
        let rows = 27;
        let inputs = vec![
            (rand_vec(&mut rng, t * e), vec![t, e]),
            (rand_vec(&mut rng, e * e), vec![e, e]),
            (rand_vec(&mut rng, e * e), vec![e, e]),
            (rand_vec(&mut rng, e * e), vec![e, e]),
            (rand_vec(&mut rng, e * e), vec![e, e]),
            (rand_vec(&mut rng, rows * heads), vec![rows, heads]),
        ];
        let idx = Arc::new(rel_pos_index(m));
        let report = grad_check(
            |tape, vals| {
                let attn = TapeAttn {
                    wq: vals[1],
                    wk: vals[2],
                    wv: vals[3],
                    wo: vals[4],
                    table: vals[5],
                    e,
                    heads,
                    rel_idx: idx.clone(),
                };
                let out = wmsa(tape, vals[0], &attn);
                tape.mean(out)
            },
            &inputs,
            1e-5,
            60,
        );
        assert!(report.max_rel < 1e-6, "{report:?}");
    }

    #[test]
    fn stitch_fields_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let cfg = StitchConfig { m: 2, heads: 3, use_stitcher: true };
        let geo = cfg.resolve([2, 2, 2]).unwrap(); // s = 1, E = 3
        let (e, heads, rows) = (geo.token_dim, geo.heads, geo.table_rows);
        let mut inputs: Vec<(Vec<f64>, Vec<usize>)> = (0..8)
            .map(|_| (rand_vec(&mut rng, 3 * 8), vec![3usize, 2, 2, 2]))
            .collect();
        for _ in 0..2 {
            for _ in 0..4 {
                inputs.push((rand_vec(&mut rng, e * e), vec![e, e]));
            }
            inputs.push((rand_vec(&mut rng, rows * heads), vec![rows, heads]));
        }
        let geo2 = geo.clone();
        let report = grad_check(
            |tape, vals| {
                let block = |_tape: &mut Tape<f64>, base: usize| TapeAttn {
                    wq: vals[base],
                    wk: vals[base + 1],
                    wv: vals[base + 2],
                    wo: vals[base + 3],
                    table: vals[base + 4],
                    e,
                    heads,
                    rel_idx: geo2.rel_idx.clone(),
                };
                let wb = block(tape, 8);
                let swb = block(tape, 13);
                let out = stitch_fields(tape, &vals[..8], 2, &geo2, &wb, &swb);
                tape.mean(out)
            },
            &inputs,
            1e-5,
            80,
        );
        assert!(report.max_rel < 1e-6, "{report:?}");
    }

    #[test]
    fn madd_counter_matches_the_closed_formulas() {
        // 1³ grid, full attention: 4·1·9 + 2·1·3 = 42.
        assert_eq!(count_attention_madds([1, 1, 1], 4, AttentionCost::FullMsa), 42);
        // Windowed cost is linear: 8× the voxels → exactly 8× the count.
        let one = count_attention_madds([8, 8, 8], 4, AttentionCost::WindowMsa);
        let eight = count_attention_madds([16, 16, 16], 4, AttentionCost::WindowMsa);
        assert_eq!(eight, 8 * one);
        // Full attention grows quadratically: doubling the side inflates the
        // count far beyond the 8× voxel growth.
        let full_8 = count_attention_madds([8, 8, 8], 4, AttentionCost::FullMsa);
        let full_16 = count_attention_madds([16, 16, 16], 4, AttentionCost::FullMsa);
        assert!(full_16 >= 32 * full_8, "{full_16} vs {full_8}");
        // Per-voxel cost: constant for windowed, strictly increasing for full.
        let sizes = [[8usize; 3], [16; 3], [32; 3]];
        let per_voxel = |dims: [usize; 3], mode| {
            let whd = (dims[0] * dims[1] * dims[2]) as u128;
            count_attention_madds(dims, 4, mode) / whd
        };
        let w: Vec<u128> = sizes.iter().map(|&s| per_voxel(s, AttentionCost::WindowMsa)).collect();
        assert!(w[0] == w[1] && w[1] == w[2]);
        let f: Vec<u128> = sizes.iter().map(|&s| per_voxel(s, AttentionCost::FullMsa)).collect();
        assert!(f[0] < f[1] && f[1] < f[2]);
    }
}
