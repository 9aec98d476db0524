//! Direct 3-D convolution (forward + both backward passes), and the clipped
//! box-sum filter used by the windowed similarity loss.
//!
//! Layout everywhere: `[c, w, h, d]`, rows along `w` contiguous. The hot
//! configuration (k = 3, pad = 1, stride 1 or 2) gets row-stencil kernels
//! built on `mul_add`; anything else falls through to plain nested loops.
//! Parallelism is over disjoint output channels, so results do not depend on
//! the worker count.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::{vol4, Element, Op, Tape, Val};

/// Fault injection for the self-test of the verification harness: when set,
/// the convolution weight-gradient kernel adds a small error to its first
/// element so the finite-difference check must fail. Never set in normal
/// operation.
pub static CONV_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Serializes tests that toggle [`CONV_BACKWARD_FAULT`] against tests that
/// would observe the corrupted gradient.
#[cfg(test)]
pub(crate) static FAULT_TEST_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub w: usize,
    pub h: usize,
    pub d: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub wo: usize,
    pub ho: usize,
    pub dd: usize,
}

impl ConvDims {
    pub(crate) fn infer(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Self {
        let (cin, w, h, d) = vol4(x_shape);
        assert_eq!(w_shape.len(), 5, "conv3d: kernel must be [cout,cin,k,k,k]");
        let (cout, kc, k) = (w_shape[0], w_shape[1], w_shape[2]);
        assert_eq!(kc, cin, "conv3d: input has {cin} channels, kernel expects {kc}");
        assert!(w_shape[2] == k && w_shape[3] == k && w_shape[4] == k, "conv3d: kernel must be cubic");
        assert!(k % 2 == 1, "conv3d: kernel size must be odd");
        assert!(stride >= 1, "conv3d: stride must be >= 1");
        let out = |n: usize| (n + 2 * pad - k) / stride + 1;
        assert!(w + 2 * pad >= k && h + 2 * pad >= k && d + 2 * pad >= k, "conv3d: input smaller than kernel");
        ConvDims { cin, w, h, d, cout, k, stride, pad, wo: out(w), ho: out(h), dd: out(d) }
    }

    fn fast_path(&self) -> bool {
        self.k == 3 && self.pad == 1 && (self.stride == 1 || self.stride == 2) && self.w >= 2
    }
}

// ── forward ─────────────────────────────────────────────────────────────────

pub(crate) fn forward<T: Element>(x: &[T], wt: &[T], bias: &[T], dm: &ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); dm.cout * dm.wo * dm.ho * dm.dd];
    if dm.fast_path() {
        let chan = dm.wo * dm.ho * dm.dd;
        out.par_chunks_mut(chan).enumerate().for_each(|(co, ochan)| {
            for v in ochan.iter_mut() {
                *v = bias[co];
            }
            if dm.stride == 1 {
                k3s1_acc_channel(x, wt, dm, co, ochan);
            } else {
                k3s2_acc_channel(x, wt, dm, co, ochan);
            }
        });
    } else {
        forward_generic(x, wt, bias, dm, &mut out);
    }
    out
}

/// Reference nested-loop convolution; exercised directly by tests as the
/// oracle for the specialized kernels.
pub(crate) fn forward_generic<T: Element>(x: &[T], wt: &[T], bias: &[T], dm: &ConvDims, out: &mut [T]) {
    let (k, pad, s) = (dm.k as i64, dm.pad as i64, dm.stride as i64);
    for co in 0..dm.cout {
        for z in 0..dm.dd {
            for y in 0..dm.ho {
                for i in 0..dm.wo {
                    let mut acc = bias[co];
                    for ci in 0..dm.cin {
                        for dz in 0..k {
                            let zi = z as i64 * s + dz - pad;
                            if zi < 0 || zi >= dm.d as i64 {
                                continue;
                            }
                            for dy in 0..k {
                                let yi = y as i64 * s + dy - pad;
                                if yi < 0 || yi >= dm.h as i64 {
                                    continue;
                                }
                                for dx in 0..k {
                                    let xi = i as i64 * s + dx - pad;
                                    if xi < 0 || xi >= dm.w as i64 {
                                        continue;
                                    }
                                    let xv = x[((ci * dm.d + zi as usize) * dm.h + yi as usize) * dm.w + xi as usize];
                                    let wv = wt[(((co * dm.cin + ci) * dm.k + dz as usize) * dm.k + dy as usize) * dm.k
                                        + dx as usize];
                                    acc = xv.mul_add(wv, acc);
                                }
                            }
                        }
                    }
                    out[((co * dm.dd + z) * dm.ho + y) * dm.wo + i] = acc;
                }
            }
        }
    }
}

/// out channel `co` += stencil of `x`, stride 1, k = 3, pad = 1.
///
/// The three x-taps of a (dz,dy) pair are fused into one loop over a whole
/// xy-plane (rows are short, so per-row loops would drown in overhead); the
/// pair of voxels at every row seam then gets a scalar correction, since the
/// fused loop let taps bleed across row ends where the padding should be.
fn k3s1_acc_channel<T: Element>(x: &[T], wt: &[T], dm: &ConvDims, co: usize, ochan: &mut [T]) {
    let (w, h, d, cin) = (dm.w, dm.h, dm.d, dm.cin);
    let plane = w * h;
    for z in 0..d {
        let oplane = &mut ochan[z * plane..(z + 1) * plane];
        for ci in 0..cin {
            let kbase = (co * cin + ci) * 27;
            for dz in 0..3usize {
                let zz = z + dz;
                if zz < 1 || zz > d {
                    continue;
                }
                let zi = zz - 1;
                let xplane = &x[(ci * d + zi) * plane..(ci * d + zi + 1) * plane];
                for dy in 0..3usize {
                    let kb = kbase + dz * 9 + dy * 3;
                    let (k0, k1, k2) = (wt[kb], wt[kb + 1], wt[kb + 2]);
                    let off = (dy as i64 - 1) * w as i64;
                    // plane positions whose source row y+dy-1 exists
                    let lo = if dy == 0 { w } else { 0 };
                    let hi = if dy == 2 { plane - w } else { plane };
                    if lo + 2 > hi {
                        // degenerate plane (h == 1): scalar with tap checks
                        for p in lo..hi {
                            let col = p % w;
                            let xb = (p as i64 + off) as usize;
                            let mut acc = oplane[p];
                            if col > 0 {
                                acc = k0.mul_add(xplane[xb - 1], acc);
                            }
                            acc = k1.mul_add(xplane[xb], acc);
                            if col + 1 < w {
                                acc = k2.mul_add(xplane[xb + 1], acc);
                            }
                            oplane[p] = acc;
                        }
                        continue;
                    }
                    // fused interior [lo+1, hi-1)
                    let b = (lo as i64 + 1 + off) as usize;
                    let len = hi - lo - 2;
                    {
                        let xs0 = &xplane[b - 1..b - 1 + len];
                        let xs1 = &xplane[b..b + len];
                        let xs2 = &xplane[b + 1..b + 1 + len];
                        let om = &mut oplane[lo + 1..hi - 1];
                        for (((o, &a0), &a1), &a2) in om.iter_mut().zip(xs0).zip(xs1).zip(xs2) {
                            *o = k0.mul_add(a0, k1.mul_add(a1, k2.mul_add(a2, *o)));
                        }
                    }
                    // global ends: first position is a row start (no k0 tap),
                    // last is a row end (no k2 tap)
                    let xb = (lo as i64 + off) as usize;
                    oplane[lo] = k1.mul_add(xplane[xb], k2.mul_add(xplane[xb + 1], oplane[lo]));
                    let ph = hi - 1;
                    let xb = (ph as i64 + off) as usize;
                    oplane[ph] = k0.mul_add(xplane[xb - 1], k1.mul_add(xplane[xb], oplane[ph]));
                    // undo the cross-row bleed at interior row seams
                    let mut p = lo + w;
                    while p < hi - 1 {
                        let xb = (p as i64 + off) as usize;
                        oplane[p] = (-k0).mul_add(xplane[xb - 1], oplane[p]);
                        p += w;
                    }
                    let mut p = lo + w - 1;
                    while p < hi - 1 {
                        let xb = (p as i64 + off) as usize;
                        oplane[p] = (-k2).mul_add(xplane[xb + 1], oplane[p]);
                        p += w;
                    }
                }
            }
        }
    }
}

/// out channel `co` += stencil of `x`, stride 2, k = 3, pad = 1.
fn k3s2_acc_channel<T: Element>(x: &[T], wt: &[T], dm: &ConvDims, co: usize, ochan: &mut [T]) {
    let (w, h, d, cin) = (dm.w, dm.h, dm.d, dm.cin);
    let (wo, ho, dd) = (dm.wo, dm.ho, dm.dd);
    for z in 0..dd {
        for y in 0..ho {
            let orow = &mut ochan[(z * ho + y) * wo..(z * ho + y + 1) * wo];
            for ci in 0..cin {
                let kbase = (co * cin + ci) * 27;
                for dz in 0..3usize {
                    let zz = 2 * z + dz;
                    if zz < 1 || zz > d {
                        continue;
                    }
                    let zi = zz - 1;
                    for dy in 0..3usize {
                        let yy = 2 * y + dy;
                        if yy < 1 || yy > h {
                            continue;
                        }
                        let yi = yy - 1;
                        let irow = &x[((ci * d + zi) * h + yi) * w..((ci * d + zi) * h + yi + 1) * w];
                        let kb = kbase + dz * 9 + dy * 3;
                        let (k0, k1, k2) = (wt[kb], wt[kb + 1], wt[kb + 2]);
                        for (i, o) in orow.iter_mut().enumerate() {
                            let xc = 2 * i;
                            let mut acc = k1.mul_add(irow[xc], *o);
                            if xc >= 1 {
                                acc = k0.mul_add(irow[xc - 1], acc);
                            }
                            if xc + 1 < w {
                                acc = k2.mul_add(irow[xc + 1], acc);
                            }
                            *o = acc;
                        }
                    }
                }
            }
        }
    }
}

// ── backward: input ─────────────────────────────────────────────────────────

pub(crate) fn backward_input<T: Element>(g: &[T], wt: &[T], dm: &ConvDims, gx: &mut [T]) {
    if dm.fast_path() && dm.stride == 1 {
        // Adjoint of a stride-1 same conv is the same stencil with the kernel
        // flipped and channel roles swapped.
        let mut wflip = vec![T::zero(); wt.len()];
        for co in 0..dm.cout {
            for ci in 0..dm.cin {
                for t in 0..27 {
                    let (dz, rem) = (t / 9, t % 9);
                    let (dy, dx) = (rem / 3, rem % 3);
                    wflip[(ci * dm.cout + co) * 27 + (2 - dz) * 9 + (2 - dy) * 3 + (2 - dx)] =
                        wt[(co * dm.cin + ci) * 27 + t];
                }
            }
        }
        let back = ConvDims { cin: dm.cout, cout: dm.cin, ..*dm };
        let chan = dm.w * dm.h * dm.d;
        gx.par_chunks_mut(chan).enumerate().for_each(|(ci, gchan)| {
            k3s1_acc_channel(g, &wflip, &back, ci, gchan);
        });
    } else if dm.fast_path() && dm.stride == 2 {
        let chan = dm.w * dm.h * dm.d;
        gx.par_chunks_mut(chan).enumerate().for_each(|(ci, gchan)| {
            backward_input_s2_channel(g, wt, dm, ci, gchan);
        });
    } else {
        backward_input_generic(g, wt, dm, gx);
    }
}

/// Gather form of the stride-2 adjoint for one input channel: even input
/// columns receive the center tap, odd columns the two off-center taps.
fn backward_input_s2_channel<T: Element>(g: &[T], wt: &[T], dm: &ConvDims, ci: usize, gchan: &mut [T]) {
    let (w, h, d) = (dm.w, dm.h, dm.d);
    let (wo, ho, dd) = (dm.wo, dm.ho, dm.dd);
    for zi in 0..d {
        for yi in 0..h {
            let grow_base = |co: usize, z: usize, y: usize| ((co * dd + z) * ho + y) * wo;
            let drow = &mut gchan[(zi * h + yi) * w..(zi * h + yi + 1) * w];
            for co in 0..dm.cout {
                let kbase = (co * dm.cin + ci) * 27;
                for dz in 0..3usize {
                    if zi + 1 < dz || (zi + 1 - dz) % 2 != 0 {
                        continue;
                    }
                    let z = (zi + 1 - dz) / 2;
                    if z >= dd {
                        continue;
                    }
                    for dy in 0..3usize {
                        if yi + 1 < dy || (yi + 1 - dy) % 2 != 0 {
                            continue;
                        }
                        let y = (yi + 1 - dy) / 2;
                        if y >= ho {
                            continue;
                        }
                        let grow = &g[grow_base(co, z, y)..grow_base(co, z, y) + wo];
                        let kb = kbase + dz * 9 + dy * 3;
                        let (k0, k1, k2) = (wt[kb], wt[kb + 1], wt[kb + 2]);
                        // xi even -> center tap
                        let mut xi = 0usize;
                        while xi < w {
                            drow[xi] = k1.mul_add(grow[xi / 2], drow[xi]);
                            xi += 2;
                        }
                        // xi odd -> dx = 0 reads output (xi+1)/2, dx = 2 reads (xi-1)/2
                        let mut xi = 1usize;
                        while xi < w {
                            let mut acc = drow[xi];
                            let right = (xi + 1) / 2;
                            if right < wo {
                                acc = k0.mul_add(grow[right], acc);
                            }
                            acc = k2.mul_add(grow[(xi - 1) / 2], acc);
                            drow[xi] = acc;
                            xi += 2;
                        }
                    }
                }
            }
        }
    }
}

fn backward_input_generic<T: Element>(g: &[T], wt: &[T], dm: &ConvDims, gx: &mut [T]) {
    let (k, pad, s) = (dm.k as i64, dm.pad as i64, dm.stride as i64);
    for co in 0..dm.cout {
        for z in 0..dm.dd {
            for y in 0..dm.ho {
                for i in 0..dm.wo {
                    let gv = g[((co * dm.dd + z) * dm.ho + y) * dm.wo + i];
                    for ci in 0..dm.cin {
                        for dz in 0..k {
                            let zi = z as i64 * s + dz - pad;
                            if zi < 0 || zi >= dm.d as i64 {
                                continue;
                            }
                            for dy in 0..k {
                                let yi = y as i64 * s + dy - pad;
                                if yi < 0 || yi >= dm.h as i64 {
                                    continue;
                                }
                                for dx in 0..k {
                                    let xi = i as i64 * s + dx - pad;
                                    if xi < 0 || xi >= dm.w as i64 {
                                        continue;
                                    }
                                    let wv = wt[(((co * dm.cin + ci) * dm.k + dz as usize) * dm.k + dy as usize)
                                        * dm.k
                                        + dx as usize];
                                    let gi = ((ci * dm.d + zi as usize) * dm.h + yi as usize) * dm.w + xi as usize;
                                    gx[gi] = gv.mul_add(wv, gx[gi]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── backward: weight and bias ───────────────────────────────────────────────

pub(crate) fn backward_weight<T: Element>(g: &[T], x: &[T], dm: &ConvDims, gw: &mut [T]) {
    if dm.fast_path() && dm.stride == 1 {
        let tap_chunk = dm.cin * 27;
        gw.par_chunks_mut(tap_chunk).enumerate().for_each(|(co, gwc)| {
            backward_weight_s1_channel(g, x, dm, co, gwc);
        });
    } else if dm.fast_path() && dm.stride == 2 {
        let tap_chunk = dm.cin * 27;
        gw.par_chunks_mut(tap_chunk).enumerate().for_each(|(co, gwc)| {
            backward_weight_s2_channel(g, x, dm, co, gwc);
        });
    } else {
        backward_weight_generic(g, x, dm, gw);
    }
    if CONV_BACKWARD_FAULT.load(Ordering::Relaxed) {
        gw[0] = gw[0] + T::from_f64(1e-3);
    }
}

/// One streaming pass computing three dot products of `g` against three
/// shifted views of the input — 16 fixed-order lanes per tap.
fn dot3<T: Element>(g: &[T], x0: &[T], x1: &[T], x2: &[T]) -> (T, T, T) {
    let n = g.len();
    debug_assert!(x0.len() == n && x1.len() == n && x2.len() == n);
    let mut l0 = [T::zero(); 16];
    let mut l1 = [T::zero(); 16];
    let mut l2 = [T::zero(); 16];
    let blocks = n / 16;
    for c in 0..blocks {
        let base = c * 16;
        let gg: &[T; 16] = g[base..base + 16].try_into().unwrap();
        let a0: &[T; 16] = x0[base..base + 16].try_into().unwrap();
        let a1: &[T; 16] = x1[base..base + 16].try_into().unwrap();
        let a2: &[T; 16] = x2[base..base + 16].try_into().unwrap();
        for l in 0..16 {
            l0[l] = gg[l].mul_add(a0[l], l0[l]);
            l1[l] = gg[l].mul_add(a1[l], l1[l]);
            l2[l] = gg[l].mul_add(a2[l], l2[l]);
        }
    }
    let (mut s0, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
    for k in blocks * 16..n {
        s0 = g[k].mul_add(x0[k], s0);
        s1 = g[k].mul_add(x1[k], s1);
        s2 = g[k].mul_add(x2[k], s2);
    }
    for l in 0..16 {
        s0 = s0 + l0[l];
        s1 = s1 + l1[l];
        s2 = s2 + l2[l];
    }
    (s0, s1, s2)
}

/// Stride-1 weight gradient for one output channel: for each (dz,dy) pair the
/// three x-taps are dot products between the output-gradient channel and
/// shifted views of the input channel, fused across rows and planes in a
/// single streaming pass. Terms whose true source lies in the padding — rows
/// with an out-of-volume y source, and row seams the x-shift bled across —
/// are subtracted back out afterwards. Plane seams need no correction because
/// the z range is restricted up front.
fn backward_weight_s1_channel<T: Element>(g: &[T], x: &[T], dm: &ConvDims, co: usize, gwc: &mut [T]) {
    let (w, h, d, cin) = (dm.w, dm.h, dm.d, dm.cin);
    let plane = w * h;
    let chan = plane * d;
    let gchan = &g[co * chan..(co + 1) * chan];
    for ci in 0..cin {
        let xchan = &x[ci * chan..(ci + 1) * chan];
        for dz in 0..3usize {
            let zlo = if dz == 0 { 1 } else { 0 };
            let zhi = if dz == 2 { d - 1 } else { d };
            if zlo >= zhi {
                continue;
            }
            for dy in 0..3usize {
                let ybad = if dy == 0 { 0 } else { h - 1 };
                let off = ((dz as i64 - 1) * h as i64 + (dy as i64 - 1)) * w as i64;
                let lo = zlo * plane + if dy == 0 { w } else { 0 };
                let hi = zhi * plane - if dy == 2 { w } else { 0 };
                if lo >= hi {
                    continue;
                }
                // fused interior [lo+1, hi-1), then complete each tap's own
                // range ([lo+1,hi) / [lo,hi) / [lo,hi-1)) with its end term
                let (mut s0, mut s1, mut s2) = if lo + 2 <= hi {
                    let xb = (lo as i64 + 1 + off) as usize;
                    let n = hi - lo - 2;
                    let (mut a0, mut a1, mut a2) = dot3(
                        &gchan[lo + 1..hi - 1],
                        &xchan[xb - 1..xb - 1 + n],
                        &xchan[xb..xb + n],
                        &xchan[xb + 1..xb + 1 + n],
                    );
                    let xe = (hi as i64 - 1 + off) as usize;
                    a0 = gchan[hi - 1].mul_add(xchan[xe - 1], a0);
                    a1 = gchan[hi - 1].mul_add(xchan[xe], a1);
                    let xs = (lo as i64 + off) as usize;
                    a1 = gchan[lo].mul_add(xchan[xs], a1);
                    a2 = gchan[lo].mul_add(xchan[xs + 1], a2);
                    (a0, a1, a2)
                } else {
                    // single position: only the center tap's range is nonempty
                    let xs = (lo as i64 + off) as usize;
                    (T::zero(), gchan[lo] * xchan[xs], T::zero())
                };
                // subtract whole rows whose y source is padding
                if dy != 1 {
                    for z in zlo..zhi {
                        let rs = z * plane + ybad * w;
                        let mut p = rs.max(lo);
                        let end = (rs + w).min(hi);
                        while p < end {
                            let xi = (p as i64 + off) as usize;
                            let gv = gchan[p];
                            if p >= lo + 1 {
                                s0 = (-gv).mul_add(xchan[xi - 1], s0);
                            }
                            s1 = (-gv).mul_add(xchan[xi], s1);
                            if p < hi - 1 {
                                s2 = (-gv).mul_add(xchan[xi + 1], s2);
                            }
                            p += 1;
                        }
                    }
                }
                // subtract row-seam bleed: row starts for the left tap, row
                // ends for the right tap (rows already subtracted are skipped)
                for z in zlo..zhi {
                    for y in 0..h {
                        if dy != 1 && y == ybad {
                            continue;
                        }
                        let p = z * plane + y * w;
                        if p >= lo + 1 && p < hi {
                            s0 = (-gchan[p]).mul_add(xchan[(p as i64 + off) as usize - 1], s0);
                        }
                        let p = p + w - 1;
                        if p >= lo && p < hi - 1 {
                            s2 = (-gchan[p]).mul_add(xchan[(p as i64 + off) as usize + 1], s2);
                        }
                    }
                }
                let kb = ci * 27 + dz * 9 + dy * 3;
                gwc[kb] = gwc[kb] + s0;
                gwc[kb + 1] = gwc[kb + 1] + s1;
                gwc[kb + 2] = gwc[kb + 2] + s2;
            }
        }
    }
}

fn backward_weight_s2_channel<T: Element>(g: &[T], x: &[T], dm: &ConvDims, co: usize, gwc: &mut [T]) {
    let (w, h, d, cin) = (dm.w, dm.h, dm.d, dm.cin);
    let (wo, ho, dd) = (dm.wo, dm.ho, dm.dd);
    for z in 0..dd {
        for y in 0..ho {
            let grow = &g[((co * dd + z) * ho + y) * wo..((co * dd + z) * ho + y + 1) * wo];
            for ci in 0..cin {
                for dz in 0..3usize {
                    let zz = 2 * z + dz;
                    if zz < 1 || zz > d {
                        continue;
                    }
                    let zi = zz - 1;
                    for dy in 0..3usize {
                        let yy = 2 * y + dy;
                        if yy < 1 || yy > h {
                            continue;
                        }
                        let yi = yy - 1;
                        let xrow = &x[((ci * d + zi) * h + yi) * w..((ci * d + zi) * h + yi + 1) * w];
                        let kb = ci * 27 + dz * 9 + dy * 3;
                        let (mut s0, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
                        for (i, &gv) in grow.iter().enumerate() {
                            let xc = 2 * i;
                            s1 = gv.mul_add(xrow[xc], s1);
                            if xc >= 1 {
                                s0 = gv.mul_add(xrow[xc - 1], s0);
                            }
                            if xc + 1 < w {
                                s2 = gv.mul_add(xrow[xc + 1], s2);
                            }
                        }
                        gwc[kb] = gwc[kb] + s0;
                        gwc[kb + 1] = gwc[kb + 1] + s1;
                        gwc[kb + 2] = gwc[kb + 2] + s2;
                    }
                }
            }
        }
    }
}

fn backward_weight_generic<T: Element>(g: &[T], x: &[T], dm: &ConvDims, gw: &mut [T]) {
    let (k, pad, s) = (dm.k as i64, dm.pad as i64, dm.stride as i64);
    for co in 0..dm.cout {
        for z in 0..dm.dd {
            for y in 0..dm.ho {
                for i in 0..dm.wo {
                    let gv = g[((co * dm.dd + z) * dm.ho + y) * dm.wo + i];
                    for ci in 0..dm.cin {
                        for dz in 0..k {
                            let zi = z as i64 * s + dz - pad;
                            if zi < 0 || zi >= dm.d as i64 {
                                continue;
                            }
                            for dy in 0..k {
                                let yi = y as i64 * s + dy - pad;
                                if yi < 0 || yi >= dm.h as i64 {
                                    continue;
                                }
                                for dx in 0..k {
                                    let xi = i as i64 * s + dx - pad;
                                    if xi < 0 || xi >= dm.w as i64 {
                                        continue;
                                    }
                                    let xv = x[((ci * dm.d + zi as usize) * dm.h + yi as usize) * dm.w + xi as usize];
                                    let wi = (((co * dm.cin + ci) * dm.k + dz as usize) * dm.k + dy as usize) * dm.k
                                        + dx as usize;
                                    gw[wi] = gv.mul_add(xv, gw[wi]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_bias<T: Element>(g: &[T], dm: &ConvDims, gb: &mut [T]) {
    let chan = dm.wo * dm.ho * dm.dd;
    for co in 0..dm.cout {
        gb[co] = gb[co] + super::seq_sum(&g[co * chan..(co + 1) * chan]);
    }
}

// ── box sum ─────────────────────────────────────────────────────────────────

/// Sum over a centered cubic window of odd side `window`, clipped at the
/// volume border (no padding values are invented). Separable: one prefix-sum
/// pass per axis. Self-adjoint because the clipped window is symmetric.
pub(crate) fn box_sum<T: Element>(x: &[T], shape: &[usize], window: usize) -> Vec<T> {
    let (c, w, h, d) = vol4(shape);
    assert!(window % 2 == 1 && window >= 1, "box_sum: window must be odd and >= 1");
    let r = window / 2;
    let plane = w * h;
    let chan = plane * d;

    // pass 1: along w (contiguous rows)
    let mut a = vec![T::zero(); x.len()];
    let mut prefix = vec![T::zero(); w + 1];
    for row in 0..c * d * h {
        let src = &x[row * w..(row + 1) * w];
        let dst = &mut a[row * w..(row + 1) * w];
        for i in 0..w {
            prefix[i + 1] = prefix[i] + src[i];
        }
        for i in 0..w {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(w - 1);
            dst[i] = prefix[hi + 1] - prefix[lo];
        }
    }

    // pass 2: along h (prefix over rows of each plane)
    let mut b = vec![T::zero(); x.len()];
    let mut pp = vec![T::zero(); (h + 1) * w];
    for cz in 0..c * d {
        let src = &a[cz * plane..(cz + 1) * plane];
        for y in 0..h {
            for i in 0..w {
                pp[(y + 1) * w + i] = pp[y * w + i] + src[y * w + i];
            }
        }
        let dst = &mut b[cz * plane..(cz + 1) * plane];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for i in 0..w {
                dst[y * w + i] = pp[(hi + 1) * w + i] - pp[lo * w + i];
            }
        }
    }

    // pass 3: along d (prefix over planes of each channel)
    let mut out = vec![T::zero(); x.len()];
    let mut pz = vec![T::zero(); (d + 1) * plane];
    for cc in 0..c {
        let src = &b[cc * chan..(cc + 1) * chan];
        for z in 0..d {
            for i in 0..plane {
                pz[(z + 1) * plane + i] = pz[z * plane + i] + src[z * plane + i];
            }
        }
        let dst = &mut out[cc * chan..(cc + 1) * chan];
        for z in 0..d {
            let lo = z.saturating_sub(r);
            let hi = (z + r).min(d - 1);
            for i in 0..plane {
                dst[z * plane + i] = pz[(hi + 1) * plane + i] - pz[lo * plane + i];
            }
        }
    }
    out
}

// ── tape ops ────────────────────────────────────────────────────────────────

impl<T: Element> Tape<T> {
    /// 3-D convolution of `[cin,w,h,d]` with `[cout,cin,k,k,k]` kernel and
    /// `[cout]` bias. `pad = (k-1)/2` keeps spatial dims at stride 1.
    pub fn conv3d(&mut self, x: Val, w: Val, b: Val, stride: usize, pad: usize) -> Val {
        let dm = ConvDims::infer(self.shape(x), self.shape(w), stride, pad);
        assert_eq!(self.shape(b), &[dm.cout], "conv3d: bias length must equal cout");
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let data = forward(self.data(x), self.data(w), self.data(b), &dm);
        self.push(
            Op::Conv3d { x, w, b, stride, pad },
            vec![dm.cout, dm.wo, dm.ho, dm.dd],
            data,
            ng,
        )
    }

    /// Centered cubic window sum, window clipped at borders.
    pub fn box_sum(&mut self, x: Val, window: usize) -> Val {
        let shape = self.shape(x).to_vec();
        let (_, w, h, d) = vol4(&shape);
        assert!(window <= w.min(h).min(d), "box_sum: window {window} exceeds min dim");
        let ng = self.needs_grad(x);
        let data = box_sum(self.data(x), &shape, window);
        self.push(Op::BoxSum { x, window }, shape, data, ng)
    }
}
