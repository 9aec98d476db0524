//! Central-difference gradient checking in 64-bit, with deterministic
//! component sampling so large graphs stay affordable.

use super::{Element, Tape, Val};

/// Worst relative disagreement found by [`grad_check`], with its location.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// max over checked components of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel: f64,
    pub analytic: f64,
    pub numeric: f64,
    /// input-tensor index of the worst component
    pub tensor: usize,
    /// flat component index within that tensor
    pub component: usize,
    /// how many components were actually compared
    pub checked: usize,
}

fn forward_eval<F>(build: &mut F, inputs: &[(Vec<f64>, Vec<usize>)], ti: usize, idx: usize, delta: f64) -> f64
where
    F: FnMut(&mut Tape<f64>, &[Val]) -> Val,
{
    let mut t = Tape::<f64>::new();
    let vals: Vec<Val> = inputs
        .iter()
        .enumerate()
        .map(|(k, (d, s))| {
            let mut dd = d.clone();
            if k == ti {
                dd[idx] += delta;
            }
            t.leaf(dd, s.clone(), false)
        })
        .collect();
    let loss = build(&mut t, &vals);
    assert_eq!(t.data(loss).len(), 1, "grad_check: loss must be scalar");
    t.data(loss)[0]
}

/// Compare reverse-mode gradients of the scalar built by `build` against
/// central finite differences at the given `inputs` (each `(data, shape)`).
///
/// `build` must construct the same function every call. At most roughly
/// `max_components` components are checked, spread proportionally over the
/// inputs with at least one per tensor, at deterministic evenly spaced
/// indices (component 0 of every tensor is always included).
pub fn grad_check<F>(mut build: F, inputs: &[(Vec<f64>, Vec<usize>)], eps: f64, max_components: usize) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &[Val]) -> Val,
{
    assert!(max_components >= 1 && eps > 0.0);
    let mut tape = Tape::<f64>::new();
    let vals: Vec<Val> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true))
        .collect();
    let loss = build(&mut tape, &vals);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = vals.iter().map(|&v| tape.grad(v).to_vec()).collect();
    drop(tape);

    let total: usize = inputs.iter().map(|(d, _)| d.len()).sum();
    let mut report = GradCheckReport {
        max_rel: 0.0,
        analytic: 0.0,
        numeric: 0.0,
        tensor: 0,
        component: 0,
        checked: 0,
    };
    for ti in 0..inputs.len() {
        let len = inputs[ti].0.len();
        let cnt = if total <= max_components {
            len
        } else {
            (max_components * len / total).clamp(1, len)
        };
        for j in 0..cnt {
            let idx = j * len / cnt;
            let up = forward_eval(&mut build, inputs, ti, idx, eps);
            let dn = forward_eval(&mut build, inputs, ti, idx, -eps);
            let numeric = (up - dn) / (2.0 * eps);
            let a = analytic[ti][idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.analytic = a;
                report.numeric = numeric;
                report.tensor = ti;
                report.component = idx;
            }
        }
    }
    report
}

/// Convenience for f32 parameter blocks: widen to f64 before checking.
pub fn widen<T: Element>(data: &[T]) -> Vec<f64> {
    data.iter().map(|&v| Element::to_f64(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::conv::{CONV_BACKWARD_FAULT, FAULT_TEST_LOCK};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::atomic::Ordering;

    #[test]
    fn quadratic_gradients_agree_to_high_precision() {
        let rep = grad_check(
            |t, vs| {
                let sq = t.square(vs[0]);
                t.mean(sq)
            },
            &[(vec![0.3, -1.2, 2.0, 0.0], vec![4])],
            1e-5,
            16,
        );
        assert_eq!(rep.checked, 4);
        assert!(rep.max_rel < 1e-9, "rel {}", rep.max_rel);
    }

    #[test]
    fn multi_tensor_graph_checks_every_tensor() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rep = grad_check(
            |t, vs| {
                let p = t.matmul(vs[0], vs[1]);
                let q = t.square(p);
                t.mean(q)
            },
            &[(a, vec![2, 3]), (b, vec![3, 2])],
            1e-5,
            5,
        );
        assert!(rep.checked >= 2 && rep.checked <= 6);
        assert!(rep.max_rel < 1e-8, "rel {}", rep.max_rel);
    }

    #[test]
    fn injected_conv_fault_is_detected() {
        let _guard = FAULT_TEST_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..27).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let w: Vec<f64> = (0..27).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let inputs = [
            (x, vec![1usize, 3, 3, 3]),
            (w, vec![1usize, 1, 3, 3, 3]),
            (vec![0.05], vec![1usize]),
        ];
        let build = |t: &mut Tape<f64>, vs: &[Val]| {
            let y = t.conv3d(vs[0], vs[1], vs[2], 1, 1);
            let sq = t.square(y);
            t.mean(sq)
        };
        let clean = grad_check(build, &inputs, 1e-6, 100);
        assert!(clean.max_rel < 1e-6, "clean run rel {}", clean.max_rel);

        CONV_BACKWARD_FAULT.store(true, Ordering::SeqCst);
        let faulty = grad_check(build, &inputs, 1e-6, 100);
        CONV_BACKWARD_FAULT.store(false, Ordering::SeqCst);
        assert!(
            faulty.max_rel > 1e-3,
            "fault injection went undetected: rel {}",
            faulty.max_rel
        );
        assert_eq!(faulty.tensor, 1, "fault should surface in the kernel tensor");
    }
}
