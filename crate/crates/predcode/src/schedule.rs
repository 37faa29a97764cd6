//! Inertial sequences, step sizes, and the in-place restart policy.
//!
//! Both schedule kinds emit beta_m = (k_m - 1) / k_{m+1}. The polynomial
//! family k_m = 1 + (m^r - 1)/d grows slower than Nesterov's recurrence for
//! the default (r, d), which delays the onset of oscillatory spectra in the
//! solver recurrence; see the diagnostics module.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// k_m = 1 + (m^r - 1)/d with r > 1, d > 0.
    Polynomial { r: f64, d: f64 },
    /// k_1 = 1, k_{m+1} = (1 + sqrt(1 + 4 k_m^2)) / 2.
    Nesterov,
    /// beta = 0 forever: plain proximal gradient, the benchmark baseline.
    Plain,
}

/// Default polynomial parameters. The growth constraint is only r > 1, d > 0;
/// this pair keeps beta well below the Nesterov sequence.
pub const DEFAULT_POLY_R: f64 = 2.0;
pub const DEFAULT_POLY_D: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct InertialSchedule {
    kind: ScheduleKind,
    /// Iteration counter; the next `next_beta` call emits beta_m.
    m: u64,
    /// Nesterov k_m; unused by the closed-form polynomial.
    k_curr: f64,
}

impl InertialSchedule {
    pub fn new(kind: ScheduleKind) -> Result<Self> {
        if let ScheduleKind::Polynomial { r, d } = kind {
            if !(r > 1.0) || !r.is_finite() {
                return Err(Error::Argument(format!(
                    "polynomial schedule needs r > 1 (got {r}); strong convergence needs summable 1/k_m"
                )));
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Argument(format!("polynomial schedule needs d > 0 (got {d})")));
            }
        }
        Ok(InertialSchedule { kind, m: 1, k_curr: 1.0 })
    }

    pub fn polynomial(r: f64, d: f64) -> Result<Self> {
        InertialSchedule::new(ScheduleKind::Polynomial { r, d })
    }

    pub fn nesterov() -> Self {
        InertialSchedule::new(ScheduleKind::Nesterov).unwrap()
    }

    pub fn plain() -> Self {
        InertialSchedule::new(ScheduleKind::Plain).unwrap()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Emit beta_m = (k_m - 1)/k_{m+1} and advance to m+1.
    pub fn next_beta(&mut self) -> f64 {
        let beta = match self.kind {
            ScheduleKind::Plain => 0.0,
            ScheduleKind::Polynomial { r, d } => {
                let k_m = poly_k(self.m, r, d);
                let k_next = poly_k(self.m + 1, r, d);
                (k_m - 1.0) / k_next
            }
            ScheduleKind::Nesterov => {
                let k_next = (1.0 + (1.0 + 4.0 * self.k_curr * self.k_curr).sqrt()) / 2.0;
                let beta = (self.k_curr - 1.0) / k_next;
                self.k_curr = k_next;
                beta
            }
        };
        self.m += 1;
        beta
    }

    /// In-place restart: momentum memory alone is cleared (m back to 1); the
    /// solver keeps its current iterate.
    pub fn restart(&mut self) {
        self.m = 1;
        self.k_curr = 1.0;
    }
}

fn poly_k(m: u64, r: f64, d: f64) -> f64 {
    1.0 + ((m as f64).powf(r) - 1.0) / d
}

/// When (and whether) the solver resets momentum on a cost increase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RestartPolicy {
    None,
    /// Trigger when cost(m) > cost(m-1) + tol_scale*(1 + |cost(m-1)|). Pure
    /// zero tolerance thrashes on floating-point noise.
    FunctionValue { tol_scale: f64 },
}

pub const RESTART_TOL_SCALE: f64 = 1e-12;

impl RestartPolicy {
    pub fn function_value() -> Self {
        RestartPolicy::FunctionValue { tol_scale: RESTART_TOL_SCALE }
    }

    pub fn triggered(&self, prev_cost: f64, new_cost: f64) -> bool {
        match *self {
            RestartPolicy::None => false,
            RestartPolicy::FunctionValue { tol_scale } => {
                new_cost > prev_cost + tol_scale * (1.0 + prev_cost.abs())
            }
        }
    }
}

/// Constant step tau = safety / lipschitz.
pub fn step_size(lipschitz: f64, safety: f64) -> Result<f64> {
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        return Err(Error::Argument(format!("step size needs a positive Lipschitz bound, got {lipschitz}")));
    }
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Argument(format!("step safety factor must lie in (0, 1], got {safety}")));
    }
    Ok(safety / lipschitz)
}
