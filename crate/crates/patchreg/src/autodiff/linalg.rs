//! Dense matrix kernels and the 2-D tape ops built on them: products,
//! row-softmax, row L2 normalization, column slicing/concatenation, and the
//! learned attention-bias gather.
//!
//! Matrices are row-major `[rows, cols]`. Kernels accumulate (`+=`) so the
//! backward pass can reuse them directly; forward constructors start from a
//! zeroed buffer.

use std::sync::Arc;

use super::{dot8, mat2, seq_sum, Element, Op, Tape, Val};

// ── raw kernels ──────────────────────────────────────────────────────────────

/// dst[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_acc<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize, dst: &mut [T]) {
    debug_assert_eq!(dst.len(), m * n);
    for i in 0..m {
        let drow = &mut dst[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                drow[j] = aik.mul_add(brow[j], drow[j]);
            }
        }
    }
}

/// dst[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt_acc<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize, dst: &mut [T]) {
    debug_assert_eq!(dst.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            dst[i * n + j] = dst[i * n + j] + dot8(arow, brow);
        }
    }
}

/// dst[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, dst: &mut [T]) {
    debug_assert_eq!(dst.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let drow = &mut dst[kk * n..(kk + 1) * n];
            for j in 0..n {
                drow[j] = aik.mul_add(brow[j], drow[j]);
            }
        }
    }
}

/// Row softmax with max subtraction; `n` is the row length.
pub(crate) fn softmax_rows<T: Element>(x: &[T], n: usize) -> Vec<T> {
    debug_assert_eq!(x.len() % n, 0);
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.len() / n {
        let row = &x[r * n..(r + 1) * n];
        let mut mx = row[0];
        for &v in row {
            mx = mx.max(v);
        }
        let orow = &mut out[r * n..(r + 1) * n];
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
        }
        let s = seq_sum(orow);
        for o in orow.iter_mut() {
            *o = *o / s;
        }
    }
    out
}

/// dx += y ⊙ (g − ⟨g, y⟩ per row), where y is the softmax output.
pub(crate) fn softmax_backward<T: Element>(y: &[T], g: &[T], n: usize, dx: &mut [T]) {
    for r in 0..y.len() / n {
        let yr = &y[r * n..(r + 1) * n];
        let gr = &g[r * n..(r + 1) * n];
        let dot = dot8(gr, yr);
        let dr = &mut dx[r * n..(r + 1) * n];
        for j in 0..n {
            dr[j] = (yr[j] * (gr[j] - dot)) + dr[j];
        }
    }
}

/// dx += (g − y·⟨y, g⟩) / norm per row, where y is the normalized output and
/// `norms` the cached max(‖row‖, eps).
pub(crate) fn l2_normalize_backward<T: Element>(y: &[T], norms: &[T], g: &[T], n: usize, dx: &mut [T]) {
    for r in 0..y.len() / n {
        let yr = &y[r * n..(r + 1) * n];
        let gr = &g[r * n..(r + 1) * n];
        let dot = dot8(yr, gr);
        let inv = T::one() / norms[r];
        let dr = &mut dx[r * n..(r + 1) * n];
        for j in 0..n {
            dr[j] = ((gr[j] - yr[j] * dot) * inv) + dr[j];
        }
    }
}

// ── tape ops ────────────────────────────────────────────────────────────────

impl<T: Element> Tape<T> {
    /// `[r,k] · [k,c] -> [r,c]`
    pub fn matmul(&mut self, a: Val, b: Val) -> Val {
        let (r, ka) = mat2(self.shape(a));
        let (kb, c) = mat2(self.shape(b));
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let mut data = vec![T::zero(); r * c];
        mm_acc(self.data(a), self.data(b), r, c, ka, &mut data);
        self.push(Op::Matmul(a, b), vec![r, c], data, ng)
    }

    /// `[m,k] · [n,k]ᵀ -> [m,n]` — product with the second factor transposed.
    pub fn matmul_nt(&mut self, a: Val, b: Val) -> Val {
        let (m, ka) = mat2(self.shape(a));
        let (n, kb) = mat2(self.shape(b));
        assert_eq!(ka, kb, "matmul_nt: inner dims {ka} vs {kb}");
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let mut data = vec![T::zero(); m * n];
        mm_nt_acc(self.data(a), self.data(b), m, n, ka, &mut data);
        self.push(Op::MatmulNT(a, b), vec![m, n], data, ng)
    }

    /// Adds a length-`c` vector to every row of an `[r,c]` matrix.
    pub fn add_row_vec(&mut self, m: Val, v: Val) -> Val {
        let (r, c) = mat2(self.shape(m));
        assert_eq!(self.shape(v), &[c], "add_row_vec: vector length mismatch");
        let ng = self.needs_grad(m) || self.needs_grad(v);
        let vd = self.data(v).to_vec();
        let mut data = self.data(m).to_vec();
        for row in 0..r {
            for j in 0..c {
                data[row * c + j] = data[row * c + j] + vd[j];
            }
        }
        self.push(Op::AddRowVec(m, v), vec![r, c], data, ng)
    }

    /// Numerically stabilized softmax along the last axis.
    pub fn softmax_last(&mut self, x: Val) -> Val {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("softmax_last: empty shape");
        let ng = self.needs_grad(x);
        let data = softmax_rows(self.data(x), n);
        self.push(Op::SoftmaxLast(x), shape, data, ng)
    }

    /// L2-normalizes along the last axis; zero rows are guarded by a 1e-12
    /// floor on the norm.
    pub fn l2_normalize(&mut self, x: Val) -> Val {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("l2_normalize: empty shape");
        let ng = self.needs_grad(x);
        let xd = self.data(x);
        let rows = xd.len() / n;
        let eps = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(rows);
        let mut data = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let nrm = dot8(row, row).sqrt().max(eps);
            norms.push(nrm);
            for j in 0..n {
                data[r * n + j] = row[j] / nrm;
            }
        }
        self.push(Op::L2Normalize { x, norms }, shape, data, ng)
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> Val {
        let (r, c) = mat2(self.shape(x));
        assert!(start + len <= c, "slice_cols: {start}+{len} exceeds {c} columns");
        let ng = self.needs_grad(x);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&xd[row * c + start..row * c + start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, vec![r, len], data, ng)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = self.shape(parts[0])[0];
        let ctot: usize = parts
            .iter()
            .map(|p| {
                let (pr, pc) = mat2(self.shape(*p));
                assert_eq!(pr, r, "concat_cols: row count mismatch");
                pc
            })
            .sum();
        let ng = self.any_needs_grad_slice(parts);
        let mut data = vec![T::zero(); r * ctot];
        let mut off = 0usize;
        for p in parts {
            let (_, c) = mat2(self.shape(*p));
            let pd = self.data(*p);
            for row in 0..r {
                data[row * ctot + off..row * ctot + off + c].copy_from_slice(&pd[row * c..(row + 1) * c]);
            }
            off += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), vec![r, ctot], data, ng)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = self.shape(parts[0])[1];
        let rtot: usize = parts
            .iter()
            .map(|p| {
                let (pr, pc) = mat2(self.shape(*p));
                assert_eq!(pc, c, "concat_rows: column count mismatch");
                pr
            })
            .sum();
        let ng = self.any_needs_grad_slice(parts);
        let mut data = Vec::with_capacity(rtot * c);
        for p in parts {
            data.extend_from_slice(self.data(*p));
        }
        self.push(Op::ConcatRows(parts.to_vec()), vec![rtot, c], data, ng)
    }

    /// Main diagonal of a square matrix as a length-n vector.
    pub fn take_diag(&mut self, x: Val) -> Val {
        let (r, c) = mat2(self.shape(x));
        assert_eq!(r, c, "take_diag: matrix is {r}x{c}, not square");
        let ng = self.needs_grad(x);
        let xd = self.data(x);
        let data = (0..r).map(|k| xd[k * c + k]).collect();
        self.push(Op::TakeDiag(x), vec![r], data, ng)
    }

    /// attn[i,j] + table[idx[i·n+j], head] — adds one head's learned bias,
    /// gathered by precomputed relative-offset rows.
    pub fn rel_pos_bias(&mut self, attn: Val, table: Val, head: usize, idx: Arc<Vec<usize>>) -> Val {
        let (r, c) = mat2(self.shape(attn));
        let (rows, heads) = mat2(self.shape(table));
        assert!(head < heads, "rel_pos_bias: head {head} out of {heads}");
        assert_eq!(idx.len(), r * c, "rel_pos_bias: index table length mismatch");
        let ng = self.needs_grad(attn) || self.needs_grad(table);
        let ad = self.data(attn);
        let td = self.data(table);
        let mut data = Vec::with_capacity(r * c);
        for (p, &row) in idx.iter().enumerate() {
            assert!(row < rows, "rel_pos_bias: offset row {row} out of {rows}");
            data.push(ad[p] + td[row * heads + head]);
        }
        self.push(Op::RelPosBias { attn, table, head, idx }, vec![r, c], data, ng)
    }

    fn any_needs_grad_slice(&self, vals: &[Val]) -> bool {
        vals.iter().any(|v| self.needs_grad(*v))
    }
}
