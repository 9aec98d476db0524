//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of eagerly evaluated nodes; [`Val`] is a
//! copyable handle into it. One training step is one tape: build the graph,
//! call [`Tape::backward`] on a scalar loss, read gradients off the leaves,
//! drop the tape. Gradient accumulation is strictly sequential in reverse
//! node order, so results are bit-deterministic for a fixed graph regardless
//! of worker count (parallelism lives *inside* kernels, over disjoint output
//! slabs).
//!
//! Conventions:
//! - volumes are `[c, w, h, d]` with linear index `((c*d + k)*h + j)*w + i`
//!   (`i` along width runs fastest, matching the on-disk layout);
//! - matrices are `[rows, cols]` row-major; scalars have shape `[1]`;
//! - binary elementwise ops require identical shapes — scalar broadcasting is
//!   spelled explicitly (`scale`, `add_scalar`, `clamp_min`);
//! - shape violations panic (caller bugs); no op allocates on the heap other
//!   than its output buffer.

use std::fmt;
use std::sync::Arc;

pub mod conv;
pub mod gradcheck;
pub mod linalg;
pub mod spatial;

// ── element type ────────────────────────────────────────────────────────────

/// Floating-point element type: `f32` for training speed, `f64` for gradient
/// checks and oracle tests. Selected per run, never mixed within a tape.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads `Self::BYTES` bytes; caller guarantees the slice is long enough.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

// ── arena ───────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

pub(crate) struct Node<T: Element> {
    pub(crate) op: Op<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) needs_grad: bool,
}

/// Recorded operation; inputs are handles to earlier nodes.
pub(crate) enum Op<T: Element> {
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    Neg(Val),
    Scale(Val, T),
    AddScalar(Val, T),
    LeakyRelu(Val, T),
    Square(Val),
    Sqrt(Val),
    Ln(Val),
    ClampMin(Val, T),
    Sum(Val),
    Mean(Val),
    Reshape(Val),
    Matmul(Val, Val),
    MatmulNT(Val, Val),
    AddRowVec(Val, Val),
    SoftmaxLast(Val),
    /// Row L2 normalization; `norms` caches max(‖row‖, eps) from the forward.
    L2Normalize { x: Val, norms: Vec<T> },
    SliceCols { x: Val, start: usize, len: usize },
    ConcatCols(Vec<Val>),
    ConcatRows(Vec<Val>),
    TakeDiag(Val),
    SpatialMean(Val),
    Conv3d { x: Val, w: Val, b: Val, stride: usize, pad: usize },
    Upsample2(Val),
    BoxSum { x: Val, window: usize },
    AxisDiff { x: Val, axis: usize },
    WarpTrilinear { vol: Val, field: Val },
    ConcatChannels(Vec<Val>),
    ExtractPatch { x: Val, origin: [usize; 3], size: [usize; 3] },
    AssemblePatches { patches: Vec<Val>, n: usize },
    CyclicShift { x: Val, offsets: [i64; 3] },
    Tokenize { x: Val, m: usize },
    Detokenize { tokens: Val, channels: usize, dims: [usize; 3], m: usize },
    /// attn[i,j] + table[idx[i*n+j], head]; `idx` maps query/key pairs to
    /// relative-offset rows of the bias table.
    RelPosBias { attn: Val, table: Val, head: usize, idx: Arc<Vec<usize>> },
}

pub struct Tape<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub(crate) fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> Val {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { op, shape, data, needs_grad });
        Val(self.nodes.len() - 1)
    }

    /// New leaf node. Parameters pass `needs_grad = true`; plain data `false`.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> Val {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(Op::Leaf, shape, data, needs_grad)
    }

    pub fn scalar_leaf(&mut self, x: T, needs_grad: bool) -> Val {
        self.leaf(vec![x], vec![1], needs_grad)
    }

    pub fn data(&self, v: Val) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Val) -> T {
        assert_eq!(self.nodes[v.0].data.len(), 1, "scalar: node is not a scalar");
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` w.r.t. `v`. Panics if `v` does not
    /// require gradients or `backward` has not run.
    pub fn grad(&self, v: Val) -> &[T] {
        assert!(!self.grads.is_empty(), "grad: backward has not run");
        assert!(self.nodes[v.0].needs_grad, "grad: node does not require gradients");
        &self.grads[v.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn any_needs_grad(&self, vals: &[Val]) -> bool {
        vals.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ── elementwise constructors ────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: Val, b: Val, name: &str) -> (Vec<usize>, bool) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{name}: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        (self.nodes[a.0].shape.clone(), self.any_needs_grad(&[a, b]))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        let (shape, ng) = self.binary_same_shape(a, b, "add");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        self.push(Op::Add(a, b), shape, data, ng)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let (shape, ng) = self.binary_same_shape(a, b, "sub");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        self.push(Op::Sub(a, b), shape, data, ng)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        let (shape, ng) = self.binary_same_shape(a, b, "mul");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        self.push(Op::Mul(a, b), shape, data, ng)
    }

    /// Elementwise quotient; the caller guards against zero denominators
    /// (`clamp_min` on the denominator where an epsilon is wanted).
    pub fn div(&mut self, a: Val, b: Val) -> Val {
        let (shape, ng) = self.binary_same_shape(a, b, "div");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x / y);
        self.push(Op::Div(a, b), shape, data, ng)
    }

    pub fn neg(&mut self, a: Val) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        self.push(Op::Neg(a), shape, data, ng)
    }

    pub fn scale(&mut self, a: Val, c: T) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        self.push(Op::Scale(a, c), shape, data, ng)
    }

    pub fn add_scalar(&mut self, a: Val, c: T) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        self.push(Op::AddScalar(a, c), shape, data, ng)
    }

    /// x for x ≥ 0, alpha·x otherwise.
    pub fn leaky_relu(&mut self, a: Val, alpha: T) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x >= T::zero() { x } else { alpha * x })
            .collect();
        self.push(Op::LeakyRelu(a, alpha), shape, data, ng)
    }

    pub fn square(&mut self, a: Val) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| x * x).collect();
        self.push(Op::Square(a), shape, data, ng)
    }

    /// Caller guarantees strictly positive inputs (guard with `clamp_min`).
    pub fn sqrt(&mut self, a: Val) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        self.push(Op::Sqrt(a), shape, data, ng)
    }

    /// Caller guarantees strictly positive inputs.
    pub fn ln(&mut self, a: Val) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        self.push(Op::Ln(a), shape, data, ng)
    }

    /// max(x, c); the subgradient at x = c is taken as 0.
    pub fn clamp_min(&mut self, a: Val, c: T) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(c)).collect();
        self.push(Op::ClampMin(a, c), shape, data, ng)
    }

    pub fn sum(&mut self, a: Val) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let s = seq_sum(&self.nodes[a.0].data);
        self.push(Op::Sum(a), vec![1], vec![s], ng)
    }

    pub fn mean(&mut self, a: Val) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let n = T::from_f64(self.nodes[a.0].data.len() as f64);
        let s = seq_sum(&self.nodes[a.0].data) / n;
        self.push(Op::Mean(a), vec![1], vec![s], ng)
    }

    /// Same elements under a new shape; element count must be preserved.
    pub fn reshape(&mut self, a: Val, shape: Vec<usize>) -> Val {
        let ng = self.nodes[a.0].needs_grad;
        let data = self.nodes[a.0].data.clone();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "reshape: {shape:?} does not hold {} elements",
            data.len()
        );
        self.push(Op::Reshape(a), shape, data, ng)
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep seeding d(loss)/d(loss) = 1. `loss` must be scalar.
    /// Nodes with `needs_grad = false` are skipped entirely, so no gradient
    /// work is spent below data leaves.
    pub fn backward(&mut self, loss: Val) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| if n.needs_grad { vec![T::zero(); n.data.len()] } else { Vec::new() })
            .collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0][0] = T::one();
            for i in (0..=loss.0).rev() {
                if !self.nodes[i].needs_grad {
                    continue;
                }
                // The node's own gradient is final once we reach it (all
                // consumers sit later on the tape), so it can be moved out
                // while input gradients are accumulated.
                let g = std::mem::take(&mut grads[i]);
                self.backprop_node(i, &g, &mut grads);
                grads[i] = g;
            }
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Vec<T>]) {
        let ng = |v: Val| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if ng(*a) {
                    axpy(&mut grads[a.0], g, T::one());
                }
                if ng(*b) {
                    axpy(&mut grads[b.0], g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    axpy(&mut grads[a.0], g, T::one());
                }
                if ng(*b) {
                    axpy(&mut grads[b.0], g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let bd = &self.nodes[b.0].data;
                    for (dst, (&gi, &bi)) in grads[a.0].iter_mut().zip(g.iter().zip(bd)) {
                        *dst = gi.mul_add(bi, *dst);
                    }
                }
                if ng(*b) {
                    let ad = &self.nodes[a.0].data;
                    for (dst, (&gi, &ai)) in grads[b.0].iter_mut().zip(g.iter().zip(ad)) {
                        *dst = gi.mul_add(ai, *dst);
                    }
                }
            }
            Op::Div(a, b) => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if ng(*a) {
                    for (dst, (&gi, &bi)) in grads[a.0].iter_mut().zip(g.iter().zip(bd)) {
                        *dst = *dst + gi / bi;
                    }
                }
                if ng(*b) {
                    for (k, dst) in grads[b.0].iter_mut().enumerate() {
                        *dst = *dst - g[k] * ad[k] / (bd[k] * bd[k]);
                    }
                }
            }
            Op::Neg(a) => {
                if ng(*a) {
                    axpy(&mut grads[a.0], g, -T::one());
                }
            }
            Op::Scale(a, c) => {
                if ng(*a) {
                    axpy(&mut grads[a.0], g, *c);
                }
            }
            Op::AddScalar(a, _) => {
                if ng(*a) {
                    axpy(&mut grads[a.0], g, T::one());
                }
            }
            Op::LeakyRelu(a, alpha) => {
                if ng(*a) {
                    let xd = &self.nodes[a.0].data;
                    for (k, dst) in grads[a.0].iter_mut().enumerate() {
                        let w = if xd[k] >= T::zero() { T::one() } else { *alpha };
                        *dst = g[k].mul_add(w, *dst);
                    }
                }
            }
            Op::Square(a) => {
                if ng(*a) {
                    let xd = &self.nodes[a.0].data;
                    let two = T::from_f64(2.0);
                    for (k, dst) in grads[a.0].iter_mut().enumerate() {
                        *dst = (two * xd[k] * g[k]) + *dst;
                    }
                }
            }
            Op::Sqrt(a) => {
                if ng(*a) {
                    let yd = &self.nodes[i].data;
                    let half = T::from_f64(0.5);
                    for (k, dst) in grads[a.0].iter_mut().enumerate() {
                        *dst = *dst + half * g[k] / yd[k];
                    }
                }
            }
            Op::Ln(a) => {
                if ng(*a) {
                    let xd = &self.nodes[a.0].data;
                    for (k, dst) in grads[a.0].iter_mut().enumerate() {
                        *dst = *dst + g[k] / xd[k];
                    }
                }
            }
            Op::ClampMin(a, c) => {
                if ng(*a) {
                    let xd = &self.nodes[a.0].data;
                    for (k, dst) in grads[a.0].iter_mut().enumerate() {
                        if xd[k] > *c {
                            *dst = *dst + g[k];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if ng(*a) {
                    let g0 = g[0];
                    for dst in grads[a.0].iter_mut() {
                        *dst = *dst + g0;
                    }
                }
            }
            Op::Mean(a) => {
                if ng(*a) {
                    let n = T::from_f64(self.nodes[a.0].data.len() as f64);
                    let g0 = g[0] / n;
                    for dst in grads[a.0].iter_mut() {
                        *dst = *dst + g0;
                    }
                }
            }
            Op::Reshape(a) => {
                if ng(*a) {
                    axpy(&mut grads[a.0], g, T::one());
                }
            }
            Op::Matmul(a, b) => {
                let (r, k) = mat2(&self.nodes[a.0].shape);
                let (_, c) = mat2(&self.nodes[b.0].shape);
                if ng(*a) {
                    // da += g · bᵀ : [r,c]·[k,c]ᵀ -> [r,k]
                    linalg::mm_nt_acc(g, &self.nodes[b.0].data, r, k, c, &mut grads[a.0]);
                }
                if ng(*b) {
                    // db += aᵀ · g
                    linalg::mm_tn_acc(&self.nodes[a.0].data, g, r, k, c, &mut grads[b.0]);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = mat2(&self.nodes[a.0].shape);
                let (n, _) = mat2(&self.nodes[b.0].shape);
                if ng(*a) {
                    // da += g · b : [m,n]·[n,k] -> [m,k]
                    linalg::mm_acc(g, &self.nodes[b.0].data, m, k, n, &mut grads[a.0]);
                }
                if ng(*b) {
                    // db += gᵀ · a
                    linalg::mm_tn_acc(g, &self.nodes[a.0].data, m, n, k, &mut grads[b.0]);
                }
            }
            Op::AddRowVec(m, v) => {
                if ng(*m) {
                    axpy(&mut grads[m.0], g, T::one());
                }
                if ng(*v) {
                    let (_, c) = mat2(&self.nodes[m.0].shape);
                    let gv = &mut grads[v.0];
                    for (k, &gi) in g.iter().enumerate() {
                        gv[k % c] = gv[k % c] + gi;
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                if ng(*a) {
                    linalg::softmax_backward(&self.nodes[i].data, g, last_dim(&self.nodes[i].shape), &mut grads[a.0]);
                }
            }
            Op::L2Normalize { x, norms } => {
                if ng(*x) {
                    linalg::l2_normalize_backward(
                        &self.nodes[i].data,
                        norms,
                        g,
                        last_dim(&self.nodes[i].shape),
                        &mut grads[x.0],
                    );
                }
            }
            Op::SliceCols { x, start, len } => {
                if ng(*x) {
                    let (r, c) = mat2(&self.nodes[x.0].shape);
                    let gx = &mut grads[x.0];
                    for row in 0..r {
                        for j in 0..*len {
                            gx[row * c + start + j] = gx[row * c + start + j] + g[row * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[i].shape[0];
                let ctot = self.nodes[i].shape[1];
                let mut off = 0usize;
                for p in parts {
                    let (_, c) = mat2(&self.nodes[p.0].shape);
                    if ng(*p) {
                        let gp = &mut grads[p.0];
                        for row in 0..r {
                            for j in 0..c {
                                gp[row * c + j] = gp[row * c + j] + g[row * ctot + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if ng(*p) {
                        axpy(&mut grads[p.0], &g[off..off + len], T::one());
                    }
                    off += len;
                }
            }
            Op::TakeDiag(a) => {
                if ng(*a) {
                    let n = self.nodes[i].shape[0];
                    let ga = &mut grads[a.0];
                    for k in 0..n {
                        ga[k * n + k] = ga[k * n + k] + g[k];
                    }
                }
            }
            Op::SpatialMean(a) => {
                if ng(*a) {
                    let sh = &self.nodes[a.0].shape;
                    let vox = sh[1] * sh[2] * sh[3];
                    let inv = T::one() / T::from_f64(vox as f64);
                    let ga = &mut grads[a.0];
                    for c in 0..sh[0] {
                        let gc = g[c] * inv;
                        for dst in ga[c * vox..(c + 1) * vox].iter_mut() {
                            *dst = *dst + gc;
                        }
                    }
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let dims = conv::ConvDims::infer(&self.nodes[x.0].shape, &self.nodes[w.0].shape, *stride, *pad);
                if ng(*x) {
                    conv::backward_input(g, &self.nodes[w.0].data, &dims, &mut grads[x.0]);
                }
                if ng(*w) {
                    conv::backward_weight(g, &self.nodes[x.0].data, &dims, &mut grads[w.0]);
                }
                if ng(*b) {
                    conv::backward_bias(g, &dims, &mut grads[b.0]);
                }
            }
            Op::Upsample2(a) => {
                if ng(*a) {
                    spatial::upsample2_backward(g, &self.nodes[a.0].shape, &mut grads[a.0]);
                }
            }
            Op::BoxSum { x, window } => {
                // Clipped box windows are symmetric, so the adjoint is the
                // same clipped box sum applied to the incoming gradient.
                if ng(*x) {
                    let sh = &self.nodes[x.0].shape;
                    let gb = conv::box_sum(g, sh, *window);
                    axpy(&mut grads[x.0], &gb, T::one());
                }
            }
            Op::AxisDiff { x, axis } => {
                if ng(*x) {
                    spatial::axis_diff_backward(g, &self.nodes[x.0].shape, *axis, &mut grads[x.0]);
                }
            }
            Op::WarpTrilinear { vol, field } => {
                let sh = &self.nodes[vol.0].shape;
                if ng(*vol) {
                    spatial::warp_backward_vol(&self.nodes[field.0].data, sh, g, &mut grads[vol.0]);
                }
                if ng(*field) {
                    spatial::warp_backward_field(
                        &self.nodes[vol.0].data,
                        &self.nodes[field.0].data,
                        sh,
                        g,
                        &mut grads[field.0],
                    );
                }
            }
            Op::ConcatChannels(parts) => {
                let mut off = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if ng(*p) {
                        axpy(&mut grads[p.0], &g[off..off + len], T::one());
                    }
                    off += len;
                }
            }
            Op::ExtractPatch { x, origin, size } => {
                if ng(*x) {
                    spatial::extract_patch_backward(g, &self.nodes[x.0].shape, *origin, *size, &mut grads[x.0]);
                }
            }
            Op::AssemblePatches { patches, n } => {
                let full = &self.nodes[i].shape;
                let psh = self.nodes[patches[0].0].shape.clone();
                for (p_idx, p) in patches.iter().enumerate() {
                    if ng(*p) {
                        spatial::assemble_backward(g, full, &psh, *n, p_idx, &mut grads[p.0]);
                    }
                }
            }
            Op::CyclicShift { x, offsets } => {
                if ng(*x) {
                    spatial::cyclic_shift_acc(g, &self.nodes[x.0].shape, [-offsets[0], -offsets[1], -offsets[2]], &mut grads[x.0]);
                }
            }
            Op::Tokenize { x, m } => {
                if ng(*x) {
                    spatial::tokenize_backward(g, &self.nodes[x.0].shape, *m, &mut grads[x.0]);
                }
            }
            Op::Detokenize { tokens, channels, dims, m } => {
                if ng(*tokens) {
                    spatial::detokenize_backward(g, *channels, *dims, *m, &mut grads[tokens.0]);
                }
            }
            Op::RelPosBias { attn, table, head, idx } => {
                if ng(*attn) {
                    axpy(&mut grads[attn.0], g, T::one());
                }
                if ng(*table) {
                    let heads = self.nodes[table.0].shape[1];
                    let gt = &mut grads[table.0];
                    for (p, &row) in idx.iter().enumerate() {
                        gt[row * heads + head] = gt[row * heads + head] + g[p];
                    }
                }
            }
        }
    }
}

// ── small shared helpers ────────────────────────────────────────────────────

pub(crate) fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// dst += alpha * src, sequential order.
pub(crate) fn axpy<T: Element>(dst: &mut [T], src: &[T], alpha: T) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s.mul_add(alpha, *d);
    }
}

/// Sum with eight fixed-order partial accumulators — vectorizable yet
/// bit-deterministic for a given length.
pub(crate) fn seq_sum<T: Element>(xs: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = xs.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            lanes[l] = lanes[l] + xs[base + l];
        }
    }
    let mut tail = T::zero();
    for &x in &xs[chunks * 8..] {
        tail = tail + x;
    }
    let mut acc = tail;
    for l in 0..8 {
        acc = acc + lanes[l];
    }
    acc
}

/// Dot product over 32 fixed-order partial accumulators (several independent
/// vector chains, so the FMA latency chain doesn't bound throughput), followed
/// by an 8-lane pass over the remainder — vectorizable yet bit-deterministic
/// for a given length. Fixed-size array views keep bounds checks out of the
/// hot loops.
pub(crate) fn dot8<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut wide = [T::zero(); 32];
    for (xa, xb) in a.chunks_exact(32).zip(b.chunks_exact(32)) {
        for ((wl, &va), &vb) in wide.iter_mut().zip(xa).zip(xb) {
            *wl = va.mul_add(vb, *wl);
        }
    }
    let start = (a.len() / 32) * 32;
    let (ra, rb) = (&a[start..], &b[start..]);
    let mut lanes = [T::zero(); 8];
    for (xa, xb) in ra.chunks_exact(8).zip(rb.chunks_exact(8)) {
        for ((ll, &va), &vb) in lanes.iter_mut().zip(xa).zip(xb) {
            *ll = va.mul_add(vb, *ll);
        }
    }
    let mut tail = T::zero();
    for k in start + (ra.len() / 8) * 8..a.len() {
        tail = a[k].mul_add(b[k], tail);
    }
    let mut acc = tail;
    for l in 0..8 {
        acc = acc + lanes[l];
    }
    for l in 0..32 {
        acc = acc + wide[l];
    }
    acc
}

pub(crate) fn mat2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

pub(crate) fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("empty shape")
}

pub(crate) fn vol4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [c,w,h,d], got shape {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}
