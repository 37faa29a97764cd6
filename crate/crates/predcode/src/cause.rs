//! Sparse cause inference over pooled states, and the sparsity-field update
//! that closes the state-cause loop.
//!
//! The cause objective for causes u, pooled states g, and invariance bank G:
//!
//!   (1/2) ( sum_k a'(1 + exp(-[G u]_k)) |g_k|  +  e' ||u - u'||^2  +  l' ||u||_1 )
//!     + (w/2) ||u - interstage||^2                    (static coupling, optional)
//!
//! The exponential's argument is capped at +-30 in both the cost and the
//! gradient, so the two stay consistent wherever the cap is inactive.

use crate::error::{Error, Result};
use crate::ops::{conv_analyze, conv_synthesize, estimate_lipschitz, max_unpool};
use crate::schedule::{InertialSchedule, RestartPolicy};
use crate::solver::{run_prox, ProxObjective, SolverOptions, SolverReport};
use crate::state::SparsityField;
use crate::tensor::{FilterBank, PoolIndex, Tensor4};

/// Saturation bound on the exponent; exp(30) ~ 1.07e13 stays comfortably
/// inside f64 range even after products and sums.
pub const EXP_CAP: f64 = 30.0;

pub(crate) fn capped_exp_neg(u: f64) -> f64 {
    (-u).clamp(-EXP_CAP, EXP_CAP).exp()
}

#[derive(Debug, Clone)]
pub struct CauseProblem {
    /// Pooled states being explained, shape (n, k, hp, wp).
    pub pooled_states: Tensor4,
    /// Cause-to-pooled-state bank: q = cause channels, c = k.
    pub invariance: FilterBank,
    /// Top-down prediction of the causes (the anchor of the quadratic term).
    pub topdown: Tensor4,
    pub alpha_prime: f64,
    pub lambda_prime: f64,
    pub eta_prime: f64,
    /// Static-mode coupling target (next stage's reconstruction) and weight.
    pub interstage: Option<Tensor4>,
    pub interstage_weight: f64,
    /// Known squared operator norm of the invariance bank, when available.
    pub lipschitz_hint: Option<f64>,
}

impl CauseProblem {
    pub fn new(
        pooled_states: Tensor4,
        invariance: FilterBank,
        topdown: Tensor4,
        alpha_prime: f64,
        lambda_prime: f64,
        eta_prime: f64,
    ) -> Result<Self> {
        let p = CauseProblem {
            pooled_states,
            invariance,
            topdown,
            alpha_prime,
            lambda_prime,
            eta_prime,
            interstage: None,
            interstage_weight: 0.0,
            lipschitz_hint: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_interstage(mut self, target: Tensor4, weight: f64) -> Result<Self> {
        self.interstage = Some(target);
        self.interstage_weight = weight;
        self.validate()?;
        Ok(self)
    }

    /// Shape of the cause tensor this problem infers.
    pub fn cause_shape(&self) -> (usize, usize, usize, usize) {
        (self.pooled_states.n, self.invariance.q, self.pooled_states.h, self.pooled_states.w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.invariance.c != self.pooled_states.c {
            return Err(Error::Shape(format!(
                "invariance bank produces {} channels but pooled states have {}",
                self.invariance.c, self.pooled_states.c
            )));
        }
        let shape = self.cause_shape();
        if self.topdown.shape() != shape {
            return Err(Error::Shape(format!(
                "top-down prediction shape {:?} does not match cause shape {shape:?}",
                self.topdown.shape()
            )));
        }
        if !(self.alpha_prime > 0.0) || !self.alpha_prime.is_finite() {
            return Err(Error::Argument(format!(
                "cause sparsity scale must be positive, got {}",
                self.alpha_prime
            )));
        }
        if !(self.lambda_prime >= 0.0) || !self.lambda_prime.is_finite() {
            return Err(Error::Argument(format!(
                "cause L1 weight must be nonnegative, got {}",
                self.lambda_prime
            )));
        }
        if !(self.eta_prime >= 0.0) || !self.eta_prime.is_finite() {
            return Err(Error::Argument(format!(
                "top-down weight must be nonnegative, got {}",
                self.eta_prime
            )));
        }
        if let Some(t) = &self.interstage {
            if t.shape() != shape {
                return Err(Error::Shape("inter-stage target does not match the cause shape".into()));
            }
            if !(self.interstage_weight >= 0.0) || !self.interstage_weight.is_finite() {
                return Err(Error::Argument(format!(
                    "inter-stage weight must be nonnegative, got {}",
                    self.interstage_weight
                )));
            }
        }
        Ok(())
    }
}

/// Exact objective value at `kappa`.
pub fn cause_cost(kappa: &Tensor4, p: &CauseProblem) -> Result<f64> {
    p.validate()?;
    if kappa.shape() != p.cause_shape() {
        return Err(Error::Shape("causes do not match the problem's cause shape".into()));
    }
    let obj = CauseObjective::from_problem(p)?;
    let mut l1 = 0.0;
    for v in kappa.data() {
        l1 += v.abs();
    }
    Ok(obj.smooth_cost(kappa) + 0.5 * p.lambda_prime * l1)
}

/// Gradient of the smooth part of `cause_cost`.
pub fn cause_grad(pi: &Tensor4, p: &CauseProblem) -> Result<Tensor4> {
    p.validate()?;
    if pi.shape() != p.cause_shape() {
        return Err(Error::Shape("iterate does not match the problem's cause shape".into()));
    }
    let obj = CauseObjective::from_problem(p)?;
    Ok(obj.smooth_grad(pi))
}

struct CauseObjective<'a> {
    p: &'a CauseProblem,
    /// |pooled states|, precomputed.
    abs_states: Tensor4,
    weights: Tensor4,
    /// Squared operator norm of the invariance bank (0 for an all-zero bank,
    /// whose exponential term has zero curvature in the causes).
    gram: f64,
    max_abs_state: f64,
}

impl<'a> CauseObjective<'a> {
    fn from_problem(p: &'a CauseProblem) -> Result<Self> {
        let mut abs_states = p.pooled_states.clone();
        for v in abs_states.data_mut() {
            *v = v.abs();
        }
        let max_abs_state = abs_states.data().iter().fold(0.0f64, |m, v| m.max(*v));
        let (n, q, h, w) = p.cause_shape();
        let mut weights = Tensor4::zeros(n, q, h, w);
        weights.fill(0.5 * p.lambda_prime);
        let gram = if max_abs_state == 0.0 || p.invariance.is_zero() {
            0.0
        } else {
            match p.lipschitz_hint {
                Some(l) if l > 0.0 && l.is_finite() => l,
                Some(l) => {
                    return Err(Error::Argument(format!(
                        "operator-norm hint must be positive, got {l}"
                    )))
                }
                None => estimate_lipschitz(&p.invariance, h, w)?,
            }
        };
        Ok(CauseObjective { p, abs_states, weights, gram, max_abs_state })
    }

    /// exp(-(G kappa)) with the capped exponent, at pooled-state resolution.
    fn exp_field(&self, kappa: &Tensor4) -> Tensor4 {
        let mut u = conv_synthesize(&self.p.invariance, kappa).expect("validated shapes");
        for v in u.data_mut() {
            *v = capped_exp_neg(*v);
        }
        u
    }
}

impl ProxObjective for CauseObjective<'_> {
    fn smooth_cost(&self, x: &Tensor4) -> f64 {
        let expf = self.exp_field(x);
        let mut first = 0.0;
        for (e, g) in expf.data().iter().zip(self.abs_states.data()) {
            first += self.p.alpha_prime * (1.0 + e) * g;
        }
        let mut cost = 0.5 * first;
        if self.p.eta_prime > 0.0 {
            let mut sq = 0.0;
            for (v, t) in x.data().iter().zip(self.p.topdown.data()) {
                sq += (v - t) * (v - t);
            }
            cost += 0.5 * self.p.eta_prime * sq;
        }
        if let Some(target) = &self.p.interstage {
            let mut sq = 0.0;
            for (v, t) in x.data().iter().zip(target.data()) {
                sq += (v - t) * (v - t);
            }
            cost += 0.5 * self.p.interstage_weight * sq;
        }
        cost
    }

    fn smooth_grad(&self, x: &Tensor4) -> Tensor4 {
        let mut expf = self.exp_field(x);
        for (e, g) in expf.data_mut().iter_mut().zip(self.abs_states.data()) {
            *e *= g;
        }
        let mut grad = conv_analyze(&self.p.invariance, &expf).expect("validated shapes");
        grad.scale(-0.5 * self.p.alpha_prime);
        if self.p.eta_prime > 0.0 {
            grad.add_scaled(self.p.eta_prime, x);
            grad.add_scaled(-self.p.eta_prime, &self.p.topdown);
        }
        if let Some(target) = &self.p.interstage {
            grad.add_scaled(self.p.interstage_weight, x);
            grad.add_scaled(-self.p.interstage_weight, target);
        }
        grad
    }

    fn l1_weights(&self) -> &Tensor4 {
        &self.weights
    }

    fn curvature_bound(&self, at: &Tensor4) -> f64 {
        let mut ell = 2.0 * self.p.eta_prime;
        if self.p.interstage.is_some() {
            ell += self.p.interstage_weight;
        }
        if self.gram > 0.0 {
            // The exponential term's Hessian is bounded by its value near the
            // current iterate; evaluated here and refreshed on restarts.
            let peak = self
                .exp_field(at)
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(*v));
            ell += 0.5 * self.p.alpha_prime * self.gram * self.max_abs_state * peak;
        }
        ell
    }
}

/// Infer causes from a zero start with default stopping.
pub fn infer_causes(
    p: &CauseProblem,
    schedule: &mut InertialSchedule,
    restart: RestartPolicy,
    max_iters: usize,
) -> Result<(Tensor4, SolverReport)> {
    infer_causes_with(p, schedule, restart, &SolverOptions::with_max_iters(max_iters), None)
}

pub fn infer_causes_with(
    p: &CauseProblem,
    schedule: &mut InertialSchedule,
    restart: RestartPolicy,
    opts: &SolverOptions,
    warm_start: Option<Tensor4>,
) -> Result<(Tensor4, SolverReport)> {
    if opts.max_iters == 0 {
        return Err(Error::Argument("cause solver needs at least one iteration".into()));
    }
    p.validate()?;
    let (n, q, h, w) = p.cause_shape();
    let x0 = match warm_start {
        Some(x) => {
            if x.shape() != (n, q, h, w) {
                return Err(Error::Shape("warm start does not match the cause shape".into()));
            }
            x
        }
        None => Tensor4::zeros(n, q, h, w),
    };
    let obj = CauseObjective::from_problem(p)?;
    run_prox(&obj, x0, schedule, restart, opts)
}

/// Sparsity field for the next state solve: unpool G*kappa to state
/// resolution and map through a'(1 + exp(-.)). Output is strictly positive
/// and finite (the exponent is capped).
pub fn update_sparsity(
    invariance: &FilterBank,
    kappa: &Tensor4,
    alpha_prime: f64,
    idx: &PoolIndex,
) -> Result<SparsityField> {
    if !(alpha_prime > 0.0) || !alpha_prime.is_finite() {
        return Err(Error::Argument(format!(
            "cause sparsity scale must be positive, got {alpha_prime}"
        )));
    }
    let pooled = conv_synthesize(invariance, kappa)?;
    let mut field = max_unpool(&pooled, idx)?;
    for v in field.data_mut() {
        *v = alpha_prime * (1.0 + capped_exp_neg(*v));
    }
    Ok(field)
}
