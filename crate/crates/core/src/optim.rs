//! SGD with momentum and learning-rate schedules.

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    Cosine,
    Step { milestones: Vec<usize>, factor: f64 },
}

/// Half-cosine decay from `eta0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(eta0: f64, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps < 1 {
        return Err(Error::input(
            "cosine_lr: total_steps must be >= 1".to_string(),
        ));
    }
    if step > total_steps {
        return Err(Error::input(format!(
            "cosine_lr: step {step} > total_steps {total_steps}"
        )));
    }
    Ok(eta0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

pub fn schedule_lr(schedule: &LrSchedule, eta0: f64, epoch: usize, epochs: usize) -> Result<f64> {
    match schedule {
        LrSchedule::Constant => Ok(eta0),
        LrSchedule::Cosine => cosine_lr(eta0, epoch, epochs.max(1)),
        LrSchedule::Step { milestones, factor } => {
            let hits = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
            Ok(eta0 * factor.powi(hits))
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub eta0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // eta0 = 0 is allowed: frozen-parameter runs are a test fixture.
        if self.eta0 < 0.0 {
            return Err(Error::input("sgd: eta0 must be >= 0".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::input("sgd: batch_size must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input("sgd: momentum must be in [0, 1)".to_string()));
        }
        Ok(())
    }
}

/// Velocity buffers aligned with a fixed parameter tensor order.
#[derive(Debug, Clone)]
pub struct Momentum {
    v: Vec<Tensor>,
}

impl Momentum {
    pub fn matching(params: &[&Tensor]) -> Self {
        Momentum {
            v: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `v <- momentum*v + g; w <- w - eta*v`. With zero momentum this is the
/// plain update `w <- w - eta*g`.
pub fn sgd_update(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    eta: f64,
    momentum: f64,
    state: &mut Momentum,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.v.len() {
        return Err(Error::usage(format!(
            "sgd_update: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.v.len()
        )));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.v) {
        if w.shape() != g.shape() {
            return Err(Error::dimension("sgd_update", w.shape(), g.shape()));
        }
        if momentum == 0.0 {
            w.axpy(-eta, g)?;
        } else {
            let mut nv = v.scale(momentum);
            nv.add_assign(g)?;
            w.axpy(-eta, &nv)?;
            *v = nv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.1, 0, 100).unwrap(), 0.1);
        assert!(cosine_lr(0.1, 100, 100).unwrap().abs() < 1e-17);
        assert!((cosine_lr(0.1, 50, 100).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_step_past_total() {
        assert!(cosine_lr(0.1, 11, 10).is_err());
        assert!(cosine_lr(0.1, 0, 0).is_err());
    }

    #[test]
    fn step_schedule_applies_factor_at_milestones() {
        let s = LrSchedule::Step {
            milestones: vec![10, 20],
            factor: 0.1,
        };
        assert!((schedule_lr(&s, 1.0, 5, 30).unwrap() - 1.0).abs() < 1e-15);
        assert!((schedule_lr(&s, 1.0, 10, 30).unwrap() - 0.1).abs() < 1e-15);
        assert!((schedule_lr(&s, 1.0, 25, 30).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut m = Momentum::matching(&[&w]);
        sgd_update(&mut [&mut w], &[&g], 0.5, 0.0, &mut m).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn unit_lr_gradient_equal_to_weights_zeroes_them() {
        let mut w = Tensor::vector(vec![3.0, -1.5]);
        let g = w.clone();
        let mut m = Momentum::matching(&[&w]);
        sgd_update(&mut [&mut w], &[&g], 1.0, 0.0, &mut m).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn momentum_matches_hand_computed_recurrence() {
        // Scalar oracle: v1 = g1, w1 = w0 - eta*v1; v2 = 0.9*v1 + g2, w2 = w1 - eta*v2.
        let (w0, g1, g2, eta, mu) = (2.0, 0.4, -0.3, 0.1, 0.9);
        let v1 = g1;
        let w1 = w0 - eta * v1;
        let v2 = mu * v1 + g2;
        let w2 = w1 - eta * v2;

        let mut w = Tensor::vector(vec![w0]);
        let mut m = Momentum::matching(&[&w]);
        sgd_update(&mut [&mut w], &[&Tensor::vector(vec![g1])], eta, mu, &mut m).unwrap();
        assert!((w.data()[0] - w1).abs() < 1e-15);
        sgd_update(&mut [&mut w], &[&Tensor::vector(vec![g2])], eta, mu, &mut m).unwrap();
        assert!((w.data()[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut m = Momentum::matching(&[&w]);
        assert!(sgd_update(&mut [&mut w], &[&g], 0.1, 0.0, &mut m).is_err());
    }
}
