use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Betas (0.9, 0.95), no weight decay.
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
    pub step_count: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = (0..store.len()).map(|i| vec![F::zero(); store.get(i).numel()]).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step_count: 0 }
    }
}

/// One AdamW update of a single tensor. `step` is the 1-based step index
/// used for bias correction.
pub fn adamw_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return shape_err(format!("adamw: param {} vs grad {}", param.len(), grad.len()));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let b1 = F::from_f64c(cfg.beta1);
    let b2 = F::from_f64c(cfg.beta2);
    let c1 = F::from_f64c(1.0 / (1.0 - cfg.beta1.powi(step as i32)));
    let c2 = F::from_f64c(1.0 / (1.0 - cfg.beta2.powi(step as i32)));
    let lr = F::from_f64c(cfg.lr);
    let eps = F::from_f64c(cfg.eps);
    let wd = F::from_f64c(cfg.weight_decay);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (F::one() - b1) * g;
        v[i] = b2 * v[i] + (F::one() - b2) * g * g;
        let mh = m[i] * c1;
        let vh = v[i] * c2;
        param[i] -= lr * (mh / (vh.sqrt() + eps) + wd * param[i]);
    }
    Ok(())
}

/// Applies one AdamW step to every parameter that has a gradient.
pub fn adamw_step<F: Real>(
    store: &mut ParamStore<F>,
    grads: &[Option<Vec<F>>],
    state: &mut OptimizerState<F>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.first_moment.len() != store.len() {
        return shape_err("adamw: gradient list does not match parameter store");
    }
    state.step_count += 1;
    let step = state.step_count;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        adamw_update(
            store.get_mut(i).data_mut(),
            g,
            &mut state.first_moment[i],
            &mut state.second_moment[i],
            step,
            cfg,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let mut st = OptimizerState::new(&store);
        adamw_step(&mut store, &[Some(vec![0.0; 3])], &mut st, &AdamWConfig::with_lr(1e-3)).unwrap();
        assert_eq!(store.get(0).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &AdamWConfig::with_lr(1e-3)).unwrap();
        // bias-corrected m = v = 1 -> step = lr / (1 + eps)
        assert!((p[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = [1.0f64, 2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        assert!(adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &AdamWConfig::with_lr(1e-3)).is_err());
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let cfg = AdamWConfig { lr: 1e-2, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 };
        let grads = [0.3f64, -1.7];
        let mut p = [0.8f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for (t, g) in grads.iter().enumerate() {
            adamw_update(&mut p, &[*g], &mut m, &mut v, t as u64 + 1, &cfg).unwrap();
        }
        let (mut x, mut mm, mut vv) = (0.8f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let step = (t + 1) as i32;
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.95 * vv + 0.05 * g * g;
            let mh = mm / (1.0 - 0.9f64.powi(step));
            let vh = vv / (1.0 - 0.95f64.powi(step));
            x -= 1e-2 * (mh / (vh.sqrt() + 1e-8) + 0.1 * x);
        }
        assert!((p[0] - x).abs() < 1e-10);
    }
}
