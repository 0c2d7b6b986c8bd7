//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Optimizer state for a whole parameter set, indexed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub moments: Vec<Moments>,
}

impl OptimState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        OptimState {
            config,
            moments: params
                .into_iter()
                .map(|p| Moments::new(p.numel()))
                .collect(),
        }
    }
}

/// One AdamW update of `param` in place.
///
/// `θ ← θ − lr·wd·θ` followed by the bias-corrected Adam step. Each parameter
/// keeps its own step counter so that parameters frozen for a while start
/// their bias correction from scratch once they are released.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut Moments,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.numel() || state.m.len() != param.numel() {
        return Err(Error::Dimension(format!(
            "adamw_step: parameter {:?} with {} grads and {} moments",
            param.shape(),
            grad.len(),
            state.m.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::Parameter(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = lr * cfg.weight_decay;
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at epoch 0 down to `floor_fraction·lr_max`
/// at `total_epochs`. Epochs past the end clamp to the floor.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, floor_fraction: f64) -> f64 {
    let lr_min = floor_fraction * lr_max;
    if total_epochs == 0 || epoch >= total_epochs {
        return if epoch == 0 && total_epochs == 0 {
            lr_max
        } else {
            lr_min
        };
    }
    let progress = epoch as f64 / total_epochs as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adamw_oracle(
        theta: f64,
        grad: f64,
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        wd: f64,
    ) -> f64 {
        let m = (1.0 - b1) * grad;
        let v = (1.0 - b2) * grad * grad;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let decayed = theta - lr * wd * theta;
        decayed - lr * m_hat / (v_hat.sqrt() + eps)
    }

    #[test]
    fn decay_only_step() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut st = Moments::new(3);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut p, &[0.0; 3], &mut st, 0.1, &cfg).unwrap();
        for (a, b) in p.data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b * (1.0 - 0.001)).abs() < 1e-15);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::scalar(1.0);
        let mut st = Moments::new(1);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[1.0], &mut st, 0.1, &cfg).unwrap();
        let oracle = scalar_adamw_oracle(1.0, 1.0, 0.1, 0.9, 0.999, 1e-8, 0.0);
        assert!((p.item() - oracle).abs() < 1e-15);
        assert!((p.item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::new([2], vec![0.3, -0.7]).unwrap();
        let before = p.clone();
        let mut st = Moments::new(2);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[0.4, -1.3], &mut st, 0.0, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros([2]);
        let mut st = Moments::new(2);
        assert!(matches!(
            adamw_step(&mut p, &[1.0], &mut st, 0.1, &AdamWConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 5e-5, 0.01), 5e-5);
        assert!((cosine_lr(100, 100, 5e-5, 0.01) - 5e-7).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1.0, 0.01) - 0.505).abs() < 1e-12);
        assert_eq!(cosine_lr(150, 100, 1.0, 0.01), 0.01);
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = cosine_lr(e, 100, 1.0, 0.01);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
