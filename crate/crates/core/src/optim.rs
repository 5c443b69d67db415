//! Adam / AdamW and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning-rate multiplier over the course of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate towards zero over all steps.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate for update `step` (0-based) out of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step.min(total) as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moment buffers shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() {
            return Err(Error::dim(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            if weight_decay != 0.0 {
                data[j] -= lr * weight_decay * data[j];
            }
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.rate(0.2, 0, 10), 0.2);
        assert!((c.rate(0.2, 5, 10) - 0.1).abs() < 1e-15);
        assert!(c.rate(0.2, 10, 10).abs() < 1e-15);
        let rates: Vec<f64> = (0..=10).map(|s| c.rate(1.0, s, 10)).collect();
        assert!(rates.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(LrSchedule::Constant.rate(0.2, 7, 10), 0.2);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Tensor::zeros([3])], &mut state).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = Tensor::scalar(0.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &[&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state).unwrap();
        assert!((p.item().unwrap() + 0.01).abs() < 1e-9);
        for _ in 0..3 {
            let before = p.item().unwrap();
            adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state).unwrap();
            assert!(((before - p.item().unwrap()) - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = Tensor::scalar(5.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &[&w]);
        let mut converged_at = None;
        for step in 1..=500 {
            let g = Tensor::scalar(2.0 * w.item().unwrap());
            adam_step(&mut [&mut w], &[g], &mut state).unwrap();
            if w.item().unwrap().abs() < 1e-2 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some(), "w = {}", w.item().unwrap());
        assert!(w.item().unwrap().abs() < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros([2]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros([3])], &mut state).is_err());
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let mut p = Tensor::scalar(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &[&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut state).unwrap();
        assert!((p.item().unwrap() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::new([2], vec![3.0, 4.0]).unwrap()];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-12);
    }
}
