//! Adam and the warmup + polynomial-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-parameter Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Moments<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Optimizer state for one named parameter set: moment buffers in parameter
/// order plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar> {
    pub moments: Vec<Moments<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState { moments: Vec::new(), step: 0 }
    }
}

impl<T: Scalar> Default for OptimState<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update over a parameter list with bias correction.
/// `grads[i]` must match `params[i]` in length; moments are lazily allocated.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|p| Moments { m: vec![T::zero(); p.numel()], v: vec![T::zero(); p.numel()] })
            .collect();
    }
    if state.moments.len() != params.len() {
        return Err(Error::invalid("adam_step: moment buffers do not match parameter list".to_string()));
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::fromf(ADAM_BETA1);
    let b2 = T::fromf(ADAM_BETA2);
    let one = T::one();
    let corr1 = T::fromf(1.0 - ADAM_BETA1.powf(t));
    let corr2 = T::fromf(1.0 - ADAM_BETA2.powf(t));
    let eps = T::fromf(ADAM_EPS);
    let lr_t = T::fromf(lr);
    for ((p, g), mom) in params.iter_mut().zip(grads.iter()).zip(state.moments.iter_mut()) {
        if g.len() != p.numel() {
            return Err(Error::shape("adam_step", format!("{} elements", p.numel()), format!("{}", g.len())));
        }
        let data = p.data_mut();
        for i in 0..data.len() {
            mom.m[i] = b1 * mom.m[i] + (one - b1) * g[i];
            mom.v[i] = b2 * mom.v[i] + (one - b2) * g[i] * g[i];
            let m_hat = mom.m[i] / corr1;
            let v_hat = mom.v[i] / corr2;
            data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then polynomial decay with power 0.9.
pub fn poly_warmup_lr(iter: u64, total_iters: u64, warmup_iters: u64, base_lr: f64) -> Result<f64> {
    if total_iters <= warmup_iters {
        return Err(Error::invalid(format!(
            "total_iters {} must exceed warmup_iters {}",
            total_iters, warmup_iters
        )));
    }
    if iter > total_iters {
        return Err(Error::invalid(format!("iter {} > total_iters {}", iter, total_iters)));
    }
    if iter < warmup_iters {
        return Ok(base_lr * iter as f64 / warmup_iters as f64);
    }
    let frac = (iter - warmup_iters) as f64 / (total_iters - warmup_iters) as f64;
    Ok(base_lr * (1.0 - frac).powf(0.9))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_warmup_endpoints() {
        assert_eq!(poly_warmup_lr(0, 100, 10, 2e-4).unwrap(), 0.0);
        assert_eq!(poly_warmup_lr(10, 100, 10, 2e-4).unwrap(), 2e-4);
    }

    #[test]
    fn poly_lr_midpoint_matches_formula() {
        let lr = poly_warmup_lr(55, 100, 10, 2e-4).unwrap();
        let expect = 2e-4 * 0.5f64.powf(0.9);
        assert!((lr - expect).abs() < 1e-12);
        assert!((lr - 1.0718e-4).abs() < 1e-8);
    }

    #[test]
    fn poly_lr_rejects_bad_ranges() {
        assert!(poly_warmup_lr(0, 10, 10, 1e-3).is_err());
        assert!(poly_warmup_lr(11, 10, 2, 1e-3).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the very first step is ~lr * sign(g).
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap();
        let grads = vec![vec![0.5, -0.5]];
        let mut state = OptimState::new();
        adam_step(&mut [&mut p], &grads, &mut state, 0.1).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-1.0 + 0.1)).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_moments_shape_match() {
        let mut p = Tensor::<f64>::zeros(vec![3]);
        let grads = vec![vec![0.0, 0.0]];
        let mut state = OptimState::new();
        assert!(adam_step(&mut [&mut p], &grads, &mut state, 0.1).is_err());
    }
}
