//! Analytic per-epoch speedup model and the phase-timing aggregation that
//! feeds it.
//!
//! With `T_d` the data-loading cost, `T_f`/`T_b` the serial-equivalent
//! forward/backward cost, `t_psi` the boundary-loss cost, and
//! `t_aux_f`/`t_aux_b` the auxiliary-net forward/distillation cost, the
//! predicted serial-to-parallel runtime ratio at `K` stages is
//!
//! ```text
//! rho(K) = 1 / ( (1/K) * (T_f+T_b)/(T_d+T_f+T_b)
//!               + (T_d + t_psi + t_aux_f + t_aux_b)/(T_d+T_f+T_b) )
//! ```
//!
//! which is bounded above by `(T_d+T_f+T_b) / (T_d+t_psi+t_aux_f+t_aux_b)`.

use crate::error::Error;
use crate::parallel::StepTimings;
use crate::Result;

/// Measured per-epoch phase durations, all in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct PhaseTimings {
    pub t_data: f64,
    pub t_forward: f64,
    pub t_backward: f64,
    pub t_psi: f64,
    pub t_aux_forward: f64,
    pub t_aux_backward: f64,
}

impl PhaseTimings {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.t_data,
            self.t_forward,
            self.t_backward,
            self.t_psi,
            self.t_aux_forward,
            self.t_aux_backward,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::input(format!(
                "phase timings must be finite and >= 0: {self:?}"
            )));
        }
        if self.t_forward + self.t_backward <= 0.0 {
            return Err(Error::input(
                "phase timings need t_forward + t_backward > 0".to_string(),
            ));
        }
        Ok(())
    }

    fn serial_epoch(&self) -> f64 {
        self.t_data + self.t_forward + self.t_backward
    }

    fn overhead(&self) -> f64 {
        self.t_data + self.t_psi + self.t_aux_forward + self.t_aux_backward
    }
}

/// Predicted speedup ratio at `k` stages.
pub fn predict_speedup(t: &PhaseTimings, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::input("predict_speedup: k must be >= 1".to_string()));
    }
    t.validate()?;
    let total = t.serial_epoch();
    if total <= 0.0 {
        return Err(Error::input(
            "predict_speedup: zero serial epoch time".to_string(),
        ));
    }
    let denom = (t.t_forward + t.t_backward) / (k as f64 * total) + t.overhead() / total;
    if denom <= 0.0 {
        return Err(Error::input(
            "predict_speedup: degenerate denominator".to_string(),
        ));
    }
    Ok(1.0 / denom)
}

/// Upper bound of the speedup ratio over all `K`. Returns infinity when the
/// overhead is zero (the unbounded limit).
pub fn speedup_upper_bound(t: &PhaseTimings) -> Result<f64> {
    t.validate()?;
    let overhead = t.overhead();
    if overhead == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(t.serial_epoch() / overhead)
}

/// Aggregate one epoch of parallel step timings into [`PhaseTimings`].
///
/// `t_forward`/`t_backward` are `K` times the per-stage means, i.e. the
/// serial-equivalent cost the formula divides back down by `K`.
pub fn measure_phases(steps: &[StepTimings], stages: usize) -> Result<PhaseTimings> {
    if steps.is_empty() {
        return Err(Error::IncompleteMetrics(
            "no step timings recorded".to_string(),
        ));
    }
    if stages < 1 {
        return Err(Error::input(
            "measure_phases: stages must be >= 1".to_string(),
        ));
    }
    let k = stages as f64;
    Ok(PhaseTimings {
        t_data: steps.iter().map(|s| s.t_data).sum(),
        t_forward: k * steps.iter().map(|s| s.stage_forward_mean).sum::<f64>(),
        t_backward: k * steps.iter().map(|s| s.stage_backward_mean).sum::<f64>(),
        t_psi: steps.iter().map(|s| s.t_psi).sum(),
        t_aux_forward: steps.iter().map(|s| s.t_aux_forward).sum(),
        t_aux_backward: steps.iter().map(|s| s.t_aux_backward).sum(),
    })
}

/// Serial epochs have no boundary losses and no auxiliary nets.
pub fn serial_phases(t_data: f64, t_forward: f64, t_backward: f64) -> PhaseTimings {
    PhaseTimings {
        t_data,
        t_forward,
        t_backward,
        t_psi: 0.0,
        t_aux_forward: 0.0,
        t_aux_backward: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> PhaseTimings {
        // T_d=1, T_f=2, T_b=4, t_psi=0.1, aux total 0.4.
        PhaseTimings {
            t_data: 1.0,
            t_forward: 2.0,
            t_backward: 4.0,
            t_psi: 0.1,
            t_aux_forward: 0.25,
            t_aux_backward: 0.15,
        }
    }

    #[test]
    fn no_overhead_single_stage_is_exactly_one() {
        let t = serial_phases(0.5, 2.0, 4.0);
        assert!((predict_speedup(&t, 1).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ideal_scaling_reaches_k() {
        let t = serial_phases(0.0, 2.0, 4.0);
        for k in [1usize, 2, 3, 8] {
            assert!((predict_speedup(&t, k).unwrap() - k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_plugged_example() {
        // rho = 7 / (6/3 + 1.5) = 2.0, bound = 7/1.5.
        let t = worked_example();
        assert!((predict_speedup(&t, 3).unwrap() - 2.0).abs() < 1e-12);
        assert!((speedup_upper_bound(&t).unwrap() - 7.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn prediction_stays_below_bound_for_any_k() {
        let t = worked_example();
        let bound = speedup_upper_bound(&t).unwrap();
        let mut prev = 0.0;
        for k in [1usize, 2, 3, 5, 10, 100, 10_000, 1_000_000] {
            let rho = predict_speedup(&t, k).unwrap();
            assert!(rho < bound, "rho({k}) = {rho} >= {bound}");
            assert!(rho > prev, "not increasing at k = {k}");
            prev = rho;
        }
    }

    #[test]
    fn zero_overhead_bound_is_unbounded() {
        let t = serial_phases(0.0, 1.0, 2.0);
        assert!(speedup_upper_bound(&t).unwrap().is_infinite());
    }

    #[test]
    fn bound_decreases_as_aux_time_grows() {
        let mut prev = f64::INFINITY;
        for aux in [0.0, 0.1, 0.5, 2.0] {
            let t = PhaseTimings {
                t_data: 0.2,
                t_forward: 1.0,
                t_backward: 2.0,
                t_psi: 0.0,
                t_aux_forward: aux,
                t_aux_backward: aux,
            };
            let bound = speedup_upper_bound(&t).unwrap();
            assert!(bound < prev || prev.is_infinite());
            prev = bound;
        }
    }

    #[test]
    fn negative_or_degenerate_timings_are_rejected() {
        let mut t = worked_example();
        t.t_forward = -1.0;
        assert!(predict_speedup(&t, 2).is_err());
        let zeros = PhaseTimings::default();
        assert!(predict_speedup(&zeros, 2).is_err());
    }

    #[test]
    fn measure_phases_sums_synthetic_records() {
        let steps = vec![
            StepTimings {
                t_data: 0.1,
                stage_forward_mean: 0.2,
                stage_backward_mean: 0.3,
                t_psi: 0.01,
                t_aux_forward: 0.02,
                t_aux_backward: 0.03,
                wall: 1.0,
            };
            4
        ];
        let t = measure_phases(&steps, 2).unwrap();
        assert!((t.t_data - 0.4).abs() < 1e-12);
        assert!((t.t_forward - 2.0 * 0.8).abs() < 1e-12);
        assert!((t.t_backward - 2.0 * 1.2).abs() < 1e-12);
        assert!((t.t_psi - 0.04).abs() < 1e-12);
        assert!(measure_phases(&[], 2).is_err());
    }
}
