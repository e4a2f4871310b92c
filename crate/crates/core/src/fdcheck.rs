//! Central finite-difference gradient checking.
//!
//! Test support: rebuilds the forward pass at perturbed inputs and compares
//! `(f(x+h) - f(x-h)) / 2h` against the analytic backward pass. Run at f64.

use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs the graph from raw parameter buffers and returns the
/// scalar loss id plus the leaf ids of each parameter, in order. The relative
/// error is `|a - n| / max(1, |a|, |n|)` so near-zero gradients are compared
/// absolutely.
pub fn check_gradients(
    build: &dyn Fn(&mut Graph<f64>, &[Vec<f64>]) -> (TensorId, Vec<TensorId>),
    params: &[Vec<f64>],
    h: f64,
) -> FdReport {
    let mut g = Graph::new();
    let (loss, ids) = build(&mut g, params);
    assert_eq!(ids.len(), params.len(), "build must return one id per parameter");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(id, p)| g.grad(*id).map(|gr| gr.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, data);
        g.value(loss).item()
    };

    let mut report = FdReport { max_rel_err: 0.0, max_abs_err: 0.0, worst_param: 0, worst_index: 0 };
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi][i] += h;
            let mut minus = params.to_vec();
            minus[pi][i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[pi][i];
            let abs = (a - numeric).abs();
            let rel = abs / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_index = i;
            }
            report.max_abs_err = report.max_abs_err.max(abs);
        }
    }
    report
}

/// Convenience: assert the check passes at a tolerance.
pub fn assert_gradients(
    build: &dyn Fn(&mut Graph<f64>, &[Vec<f64>]) -> (TensorId, Vec<TensorId>),
    params: &[Vec<f64>],
    h: f64,
    tol: f64,
    what: &str,
) {
    let report = check_gradients(build, params, h);
    assert!(
        report.max_rel_err < tol,
        "{}: rel err {:.3e} (abs {:.3e}) at param {} index {} exceeds {:.1e}",
        what,
        report.max_rel_err,
        report.max_abs_err,
        report.worst_param,
        report.worst_index,
        tol
    );
}

/// Random values in [-1, 1] from a seeded generator, for check inputs.
pub fn seeded_values(seed: u64, n: usize) -> Vec<f64> {
    use rand::Rng;
    let mut rng = crate::rng::derive_rng(seed, "fdcheck", &[]);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Leaf helper for build closures.
pub fn leaf64(g: &mut Graph<f64>, shape: Vec<usize>, data: &[f64], requires_grad: bool) -> TensorId {
    g.leaf(Tensor::from_f64_slice(shape, data).unwrap(), requires_grad)
}
