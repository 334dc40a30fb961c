use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, Matrix, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
    /// Steps refused because of a non-finite gradient.
    pub skipped: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { m: zeros(), v: zeros(), t: 0, skipped: 0 }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient. Returns `false` (and counts the step
/// as skipped) when any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<bool> {
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!("optimizer state for {} parameters, model has {}", state.m.len(), params.len())));
    }
    if !grads.all_finite() {
        state.skipped += 1;
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.get(crate::numerics::ParamId(i));
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(T::zero(), |g| g.data()[j]);
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamId;

    fn single(value: f64) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        ps.add("w", Matrix::scalar(value));
        ps
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = single(0.5);
        let mut st = AdamState::new(&ps);
        let mut g = Grads::new(1);
        g.add(ParamId(0), &Matrix::scalar(1.0));
        assert!(adam_step(&mut ps, &g, &mut st, &AdamConfig::default()).unwrap());
        let delta = ps.value(ParamId(0)).item() - 0.5;
        assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut ps = single(0.5);
        let mut st = AdamState::new(&ps);
        for _ in 0..3 {
            adam_step(&mut ps, &Grads::new(1), &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(ps.value(ParamId(0)).item(), 0.5);

        let mut g = Grads::new(1);
        g.add(ParamId(0), &Matrix::scalar(2.0));
        adam_step(&mut ps, &g, &mut st, &AdamConfig::default()).unwrap();
        let m1 = st.m[0].item();
        adam_step(&mut ps, &Grads::new(1), &mut st, &AdamConfig::default()).unwrap();
        assert!(st.m[0].item().abs() < m1.abs());
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut ps = single(0.5);
        let mut st = AdamState::new(&ps);
        let mut g = Grads::new(1);
        g.add(ParamId(0), &Matrix::scalar(f64::NAN));
        assert!(!adam_step(&mut ps, &g, &mut st, &AdamConfig::default()).unwrap());
        assert_eq!((st.t, st.skipped), (0, 1));
        assert_eq!(ps.value(ParamId(0)).item(), 0.5);
        let bad = AdamConfig { lr: 0.0, ..Default::default() };
        assert!(adam_step(&mut ps, &Grads::new(1), &mut st, &bad).is_err());
    }
}
