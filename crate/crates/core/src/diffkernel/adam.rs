//! Adam optimizer with bias correction.

use super::tensor::Scalar;
use super::{Gradients, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub non_finite: NonFinitePolicy,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            non_finite: NonFinitePolicy::SkipWithWarning,
        }
    }
}

/// What to do when a gradient contains non-finite values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonFinitePolicy {
    /// Leave the parameter untouched this step and report it.
    SkipWithWarning,
    /// Fail the whole step.
    HardError,
}

/// Names of parameters skipped because of non-finite gradients.
#[derive(Debug, Default)]
pub struct AdamOutcome {
    pub skipped: Vec<String>,
}

/// One Adam update over every parameter that has a gradient entry.
///
/// Parameters without gradients are untouched (state and step count
/// included). Updates are applied in sorted name order, so the result
/// is deterministic.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &Gradients<S>,
    cfg: &AdamConfig,
) -> Result<AdamOutcome> {
    let mut outcome = AdamOutcome::default();
    for (name, grad) in grads {
        let param = params.get_mut(name)?;
        if param.value.shape() != grad.shape() {
            return Err(Error::Validation(format!(
                "gradient shape {:?} vs parameter {:?} for {name}",
                grad.shape(),
                param.value.shape()
            )));
        }
        if !grad.is_finite() {
            match cfg.non_finite {
                NonFinitePolicy::SkipWithWarning => {
                    outcome.skipped.push(name.clone());
                    continue;
                }
                NonFinitePolicy::HardError => {
                    return Err(Error::Validation(format!(
                        "non-finite gradient for {name}"
                    )));
                }
            }
        }
        param.step += 1;
        let t = param.step as f64;
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one = S::one();
        let bias1 = S::from_f64(1.0 - cfg.beta1.powi(t as i32));
        let bias2 = S::from_f64(1.0 - cfg.beta2.powi(t as i32));
        let lr = S::from_f64(cfg.lr);
        let eps = S::from_f64(cfg.eps);
        let g = grad.data();
        let m = param.m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (one - b1) * gi;
        }
        let v = param.v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (one - b2) * gi * gi;
        }
        let value = param.value.data_mut();
        for ((pv, &mi), &vi) in value.iter_mut().zip(param.m.data()).zip(param.v.data()) {
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(outcome)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::Tensor;

    fn scalar_params(v: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::from_vec(vec![1], vec![v]).unwrap());
        ps
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut ps = scalar_params(0.7);
        let mut grads = Gradients::new();
        grads.insert("x".to_string(), Tensor::zeros(vec![1]));
        adam_step(&mut ps, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(ps.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut ps = scalar_params(0.7);
        let mut grads = Gradients::new();
        grads.insert("x".to_string(), Tensor::from_vec(vec![1], vec![1.3]).unwrap());
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut ps, &grads, &cfg).unwrap();
        assert_eq!(ps.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // One step on a scalar with known gradient.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let g = 0.4;
        let x0 = 1.0;
        let mut ps = scalar_params(x0);
        let mut grads = Gradients::new();
        grads.insert("x".to_string(), Tensor::from_vec(vec![1], vec![g]).unwrap());
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            non_finite: NonFinitePolicy::HardError,
        };
        adam_step(&mut ps, &grads, &cfg).unwrap();

        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = x0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((ps.get("x").unwrap().data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_skips_with_warning() {
        let mut ps = scalar_params(1.0);
        let mut grads = Gradients::new();
        grads.insert(
            "x".to_string(),
            Tensor::from_vec(vec![1], vec![f64::NAN]).unwrap(),
        );
        let outcome = adam_step(&mut ps, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(outcome.skipped, vec!["x".to_string()]);
        assert_eq!(ps.get("x").unwrap().data()[0], 1.0);

        let cfg = AdamConfig {
            non_finite: NonFinitePolicy::HardError,
            ..AdamConfig::default()
        };
        assert!(adam_step(&mut ps, &grads, &cfg).is_err());
    }

    #[test]
    fn clip_scales_large_gradients() {
        let mut grads = Gradients::new();
        grads.insert(
            "x".to_string(),
            Tensor::<f64>::from_vec(vec![2], vec![3.0, 4.0]).unwrap(),
        );
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = grads["x"].data();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn independent_parameter_sets_do_not_interfere() {
        let mut a = scalar_params(1.0);
        let b = scalar_params(1.0);
        let mut grads = Gradients::new();
        grads.insert("x".to_string(), Tensor::from_vec(vec![1], vec![0.5]).unwrap());
        adam_step(&mut a, &grads, &AdamConfig::default()).unwrap();
        assert_ne!(
            a.get("x").unwrap().data()[0],
            b.get("x").unwrap().data()[0]
        );
        assert_eq!(b.get("x").unwrap().data()[0], 1.0);
    }
}
