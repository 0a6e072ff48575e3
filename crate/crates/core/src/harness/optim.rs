//! LAMB optimizer and the linear learning-rate ramp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::params::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        LambConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

impl LambConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Input(format!("invalid LAMB settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment accumulators, one per parameter block, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambState {
    pub config: LambConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl LambState {
    pub fn new<T: Real>(config: LambConfig, params: &Params<T>) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.data().len()).collect();
        Ok(LambState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }
}

/// One LAMB update. `grads` pairs parameter block indices with gradients;
/// blocks without a gradient are left alone. The whole step is rejected
/// before any change if a gradient is non-finite.
pub fn lamb_step<T: Real>(
    params: &mut Params<T>,
    grads: &[(usize, Vec<T>)],
    state: &mut LambState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Input(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} blocks, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads {
        if *i >= params.len() || g.len() != params.tensor(*i).data().len() {
            return Err(Error::Shape(format!("gradient for block {i} has wrong size")));
        }
        if g.iter().any(|x| !x.as_f64().is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(*i).to_string()));
        }
    }
    let c = state.config.clone();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, g) in grads {
        let (m, v) = (&mut state.m[*i], &mut state.v[*i]);
        let w = params.tensor_mut(*i).data_mut();
        let mut u = vec![0.0; g.len()];
        let (mut wn, mut un) = (0.0, 0.0);
        for k in 0..g.len() {
            let gk = g[k].as_f64();
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let wk = w[k].as_f64();
            u[k] = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps) + c.weight_decay * wk;
            wn += wk * wk;
            un += u[k] * u[k];
        }
        let phi = if wn > 0.0 && un > 0.0 {
            wn.sqrt() / un.sqrt()
        } else {
            1.0
        };
        if lr == 0.0 {
            continue;
        }
        for k in 0..g.len() {
            w[k] = T::of(w[k].as_f64() - lr * phi * u[k]);
        }
    }
    Ok(())
}

/// Linear ramp from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_end;
    }
    if step > total_steps {
        log::warn!("schedule step {step} beyond {total_steps}; using the final rate");
        return lr_end;
    }
    if step == total_steps {
        return lr_end;
    }
    lr_start + (lr_end - lr_start) * step as f64 / total_steps as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn scalar_params(w: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert("w", Tensor::vector(vec![w]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_params(0.7);
        let mut s = LambState::new(LambConfig::default(), &p).unwrap();
        lamb_step(&mut p, &[(0, vec![0.0])], &mut s, 0.1).unwrap();
        assert_eq!(p.tensor(0).data(), &[0.7]);
    }

    #[test]
    fn scalar_first_step_matches_hand_computation() {
        let mut p = scalar_params(1.0);
        let mut s = LambState::new(LambConfig::default(), &p).unwrap();
        lamb_step(&mut p, &[(0, vec![0.1])], &mut s, 0.01).unwrap();
        // m = 0.01, v = 1e-5; corrected 0.1 and 0.01; u = 0.1 / (0.1 + 1e-6).
        let m_hat = (0.1 * 0.1) / (1.0 - 0.9);
        let v_hat = (0.001 * 0.01) / (1.0 - 0.999);
        let u: f64 = m_hat / (f64::sqrt(v_hat) + 1e-6);
        let phi = 1.0 / u.abs();
        let expected = 1.0 - 0.01 * phi * u;
        assert!((p.tensor(0).data()[0] - expected).abs() < 1e-15);
        assert!((p.tensor(0).data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn gradient_scale_does_not_change_the_step() {
        let grad = vec![0.3, -0.1, 0.05, 0.2];
        let run = |k: f64| {
            let mut p = Params::new();
            p.insert("w", Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]).unwrap());
            let mut s = LambState::new(LambConfig::default(), &p).unwrap();
            let g: Vec<f64> = grad.iter().map(|x| x * k).collect();
            lamb_step(&mut p, &[(0, g)], &mut s, 0.05).unwrap();
            p.tensor(0).data().to_vec()
        };
        for (a, b) in run(1.0).iter().zip(run(10.0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_rejects_the_step() {
        let mut p = scalar_params(1.0);
        let mut s = LambState::new(LambConfig::default(), &p).unwrap();
        let r = lamb_step(&mut p, &[(0, vec![f64::NAN])], &mut s, 0.1);
        assert!(matches!(r, Err(Error::NonFiniteGradient(name)) if name == "w"));
        assert_eq!(p.tensor(0).data(), &[1.0]);
        assert_eq!(s.step, 0);
        assert!(lamb_step(&mut p, &[(0, vec![1.0])], &mut s, -1.0).is_err());
        assert!(lamb_step(&mut p, &[(0, vec![1.0, 2.0])], &mut s, 0.1).is_err());
    }

    #[test]
    fn zero_weights_use_unit_trust_ratio() {
        let mut p = scalar_params(0.0);
        let mut s = LambState::new(LambConfig::default(), &p).unwrap();
        lamb_step(&mut p, &[(0, vec![2.0])], &mut s, 0.1).unwrap();
        let u = 2.0 / (2.0 + 1e-6);
        assert!((p.tensor(0).data()[0] + 0.1 * u).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 100, 1e-6, 1e-5), 1e-6);
        assert_eq!(lr_schedule(100, 100, 1e-6, 1e-5), 1e-5);
        assert!((lr_schedule(50, 100, 1e-6, 1e-5) - 5.5e-6).abs() < 1e-18);
        assert_eq!(lr_schedule(150, 100, 1e-6, 1e-5), 1e-5);
    }

    proptest! {
        #[test]
        fn zero_learning_rate_is_identity(ws in prop::collection::vec(-3.0f64..3.0, 1..8), seed in 0u64..1000) {
            let mut p = Params::new();
            p.insert("w", Tensor::vector(ws.clone()).unwrap());
            let mut s = LambState::new(LambConfig { weight_decay: 0.1, ..LambConfig::default() }, &p).unwrap();
            let g: Vec<f64> = (0..ws.len()).map(|i| ((seed + i as u64) % 7) as f64 - 3.0).collect();
            for _ in 0..3 {
                lamb_step(&mut p, &[(0, g.clone())], &mut s, 0.0).unwrap();
            }
            prop_assert_eq!(p.tensor(0).data(), &ws[..]);
        }

        #[test]
        fn schedule_stays_between_endpoints(step in 0usize..1000, total in 1usize..1000) {
            let lr = lr_schedule(step.min(total), total, 1e-6, 1e-5);
            prop_assert!((1e-6..=1e-5).contains(&lr));
        }
    }
}
