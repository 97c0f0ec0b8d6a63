//! AdamW with decoupled weight decay.
//!
//! ```text
//! w <- w - lr * decay * w            (decaying parameters only)
//! m <- b1 * m + (1 - b1) * g
//! v <- b2 * v + (1 - b2) * g^2
//! w <- w - lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//! with `m_hat = m / (1 - b1^t)`, `v_hat = v / (1 - b2^t)`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Biases and layer-norm gains are never decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with("gain"))
}

#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    pub step: u64,
    moments: IndexMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[F], &[F])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update of every parameter that has a gradient. Parameters
/// absent from `grads` are left untouched.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &ParamGrads<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::OutOfRange(format!("learning rate {lr}")));
    }
    if grads.values().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    for (name, g) in grads {
        let w = params
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("gradient for unknown parameter {name}")))?;
        if w.len() != g.len() {
            return Err(Error::shape(format!("gradient for {name}")));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = F::lit(c.beta1);
    let b2 = F::lit(c.beta2);
    let one = F::one();
    let bc1 = F::lit(1.0 - c.beta1.powi(t));
    let bc2 = F::lit(1.0 - c.beta2.powi(t));
    let eps = F::lit(c.eps);
    let lr_f = F::lit(lr);
    let shrink = F::lit(lr * c.weight_decay);

    for (name, g) in grads {
        let w = params.get_mut(name).expect("checked above").data_mut();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![F::zero(); g.len()], vec![F::zero(); g.len()]));
        let decay = decays(name) && c.weight_decay != 0.0;
        for i in 0..g.len() {
            if decay {
                w[i] -= shrink * w[i];
            }
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    fn grad(g: f64) -> ParamGrads<f64> {
        let mut m = ParamGrads::new();
        m.insert("w".to_string(), vec![g]);
        m
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = one_param(1.5);
        let mut s = OptimizerState::new(AdamWConfig::default());
        adamw_step(&mut p, &grad(3.0), &mut s, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut p = one_param(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = OptimizerState::new(cfg);
        adamw_step(&mut p, &grad(0.0), &mut s, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = v_hat = 1 after bias correction, so the update is lr / (1 + eps)
        let mut p = one_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = OptimizerState::new(cfg);
        adamw_step(&mut p, &grad(1.0), &mut s, 0.1).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w - 0.9).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn decoupled_decay_applies_to_weights_only() {
        let mut p = ParamStore::<f64>::new();
        p.insert("layer.weight", Tensor::scalar(2.0));
        p.insert("layer.bias", Tensor::scalar(2.0));
        p.insert("ln.gain", Tensor::scalar(2.0));
        let mut g = ParamGrads::new();
        for k in ["layer.weight", "layer.bias", "ln.gain"] {
            g.insert(k.to_string(), vec![0.0]);
        }
        let mut s = OptimizerState::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        adamw_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!((p.get("layer.weight").unwrap().data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(p.get("layer.bias").unwrap().data()[0], 2.0);
        assert_eq!(p.get("ln.gain").unwrap().data()[0], 2.0);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(AdamWConfig::default());
        let err = adamw_step(&mut p, &grad(f64::NAN), &mut s, 0.1).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient");
        assert_eq!(s.step, 0);
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn bit_deterministic() {
        let run = || {
            let mut p = one_param(0.3);
            let mut s = OptimizerState::new(AdamWConfig::default());
            for k in 0..50 {
                let g = ((k as f64) * 0.37).sin();
                adamw_step(&mut p, &grad(g), &mut s, 1e-2).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
