use std::f64::consts::PI;

use super::params::ParamSet;
use super::value::Tensor;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to the parameters rather than the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { m: Tensor::zeros(rows, cols), v: Tensor::zeros(rows, cols), step: 0 }
    }

    pub fn like(t: &Tensor) -> Self {
        Self::new(t.rows(), t.cols())
    }
}

/// One AdamW update of `param` in place.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(TensorError::Contract(format!(
            "adamw: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if lr.is_nan() || lr < 0.0 {
        return Err(TensorError::Contract(format!("adamw: learning rate {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, g) in grad.data().iter().enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over a whole [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        Self { cfg, states: params.tensors().iter().map(AdamState::like).collect() }
    }

    pub fn for_tensors(tensors: &[Tensor], cfg: AdamConfig) -> Self {
        Self { cfg, states: tensors.iter().map(AdamState::like).collect() }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.states.len() {
            return Err(TensorError::Contract(format!(
                "adamw: {} params, {} grads, {} states",
                params.len(),
                grads.len(),
                self.states.len()
            )));
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adamw_step(p, g, s, lr, &self.cfg)?;
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at step 0 to zero at `total_steps`.
/// Steps past the end are clamped to zero.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step > total_steps {
        log::warn!("cosine_lr: step {step} beyond schedule length {total_steps}; using 0");
        return 0.0;
    }
    base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::like(&p);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut p, &Tensor::zeros(1, 3), &mut s, 1e-3, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; after bias correction both are 1, so the step
        // is lr / (1 + eps).
        let mut p = Tensor::zeros(1, 1);
        let mut s = AdamState::like(&p);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &Tensor::scalar(1.0), &mut s, 1e-4, &cfg).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15, "{}", p.item());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = Tensor::scalar(2.0);
        let mut s = AdamState::like(&p);
        let cfg = AdamConfig { weight_decay: 0.1, ..Default::default() };
        adamw_step(&mut p, &Tensor::scalar(0.0), &mut s, 0.5, &cfg).unwrap();
        // zero gradient: only the multiplicative decay acts
        assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(s.m.item(), 0.0);
    }

    #[test]
    fn paper_defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.weight_decay, c.eps), (0.9, 0.999, 1e-4, 1e-8));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = Tensor::zeros(2, 2);
        let mut s = AdamState::like(&p);
        let err = adamw_step(&mut p, &Tensor::zeros(1, 2), &mut s, 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(TensorError::Contract(_))));
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-18);
        assert_eq!(cosine_lr(101, 100, 1e-3), 0.0);
    }
}
