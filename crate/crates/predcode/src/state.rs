//! Sparse hidden-state inference for one stage.
//!
//! The state objective on pre-pool states g, with input x and bank D, is
//!
//!   (1/2) ( ||x - synth(D, g)||^2 + alpha ||g - C g_prev||_1 + sum_k lambda_k |g_k| )
//!
//! The temporal middle term only exists when a transition matrix and previous
//! states are supplied; in static mode the inter-stage coupling moves to the
//! cause objective instead. The solver descends a smoothed surrogate in which
//! the transition L1 is replaced by a Huber envelope of width `mu`, so its
//! gradient is the clamp `(alpha/2) * proj_linf((g - C g_prev)/mu)` and the
//! curvature bound gains `alpha/mu`.

use crate::error::{Error, Result};
use crate::ops::{conv_analyze, conv_synthesize, estimate_lipschitz, max_pool, proj_linf};
use crate::schedule::{InertialSchedule, RestartPolicy};
use crate::solver::{run_prox, ProxObjective, SolverOptions, SolverReport};
use crate::tensor::{FilterBank, PoolIndex, Tensor4};
use crate::topdown::TransitionMatrix;

/// Per-element L1 weights at state resolution. Strictly positive wherever a
/// solve consumes it; cost evaluation alone tolerates zeros.
pub type SparsityField = Tensor4;

#[derive(Debug, Clone)]
pub struct StateProblem {
    /// Input being reconstructed (the stage below's causes, or the stimulus).
    pub input: Tensor4,
    pub bank: FilterBank,
    /// Temporal mode: channel-mixing matrix for the previous states.
    pub transition: Option<TransitionMatrix>,
    pub prev_state: Option<Tensor4>,
    /// Weight of the transition penalty (temporal mode only).
    pub alpha: f64,
    pub sparsity: SparsityField,
    /// Huber width of the smoothed transition term.
    pub mu: f64,
    /// Static-mode feedback from the stage above, carried for reporting; the
    /// coupling itself is applied on the cause side.
    pub interstage_feedback: Option<Tensor4>,
    /// Known squared operator norm of the bank, when the caller already has
    /// one (training reuses a warm power-iteration estimate). None means the
    /// solver estimates it.
    pub lipschitz_hint: Option<f64>,
}

impl StateProblem {
    pub fn new(input: Tensor4, bank: FilterBank, sparsity: SparsityField, mu: f64) -> Result<Self> {
        let p = StateProblem {
            input,
            bank,
            transition: None,
            prev_state: None,
            alpha: 0.0,
            sparsity,
            mu,
            interstage_feedback: None,
            lipschitz_hint: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_temporal(
        mut self,
        transition: TransitionMatrix,
        prev_state: Tensor4,
        alpha: f64,
    ) -> Result<Self> {
        self.transition = Some(transition);
        self.prev_state = Some(prev_state);
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    /// Shape of the pre-pool state tensor this problem infers.
    pub fn state_shape(&self) -> (usize, usize, usize, usize) {
        (self.input.n, self.bank.q, self.input.h, self.input.w)
    }

    pub fn is_temporal(&self) -> bool {
        self.transition.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.c != self.bank.c {
            return Err(Error::Shape(format!(
                "input has {} channels but the bank reconstructs {}",
                self.input.c, self.bank.c
            )));
        }
        let (n, q, h, w) = self.state_shape();
        let sp = self.sparsity.shape();
        if sp != (n, q, h, w) {
            return Err(Error::Shape(format!(
                "sparsity field shape {sp:?} does not match state shape {:?}",
                (n, q, h, w)
            )));
        }
        if self.sparsity.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Argument("sparsity weights must be finite and nonnegative".into()));
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::Argument(format!("smoothing width must be positive, got {}", self.mu)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Argument(format!("transition weight must be nonnegative, got {}", self.alpha)));
        }
        if self.transition.is_some() != self.prev_state.is_some() {
            return Err(Error::Config(
                "temporal mode needs the transition matrix and previous states together".into(),
            ));
        }
        if let Some(t) = &self.transition {
            if t.channels() != q {
                return Err(Error::Shape(format!(
                    "transition mixes {} channels but the bank has {} filters",
                    t.channels(),
                    q
                )));
            }
        }
        if let Some(prev) = &self.prev_state {
            if prev.shape() != (n, q, h, w) {
                return Err(Error::Shape("previous states do not match the state shape".into()));
            }
        }
        if let Some(fb) = &self.interstage_feedback {
            if fb.shape() != (n, q, h, w) {
                return Err(Error::Shape("inter-stage feedback does not match the state shape".into()));
            }
        }
        Ok(())
    }

    /// C * prev_state, the anchor of the transition penalty.
    fn anchor(&self) -> Result<Option<Tensor4>> {
        match (&self.transition, &self.prev_state) {
            (Some(c), Some(prev)) => Ok(Some(c.apply(prev)?)),
            _ => Ok(None),
        }
    }
}

/// Exact objective value, with the transition term as a true L1 norm.
pub fn state_cost(gamma: &Tensor4, p: &StateProblem) -> Result<f64> {
    p.validate()?;
    let (n, q, h, w) = p.state_shape();
    if gamma.shape() != (n, q, h, w) {
        return Err(Error::Shape("states do not match the problem's state shape".into()));
    }
    let mut recon = conv_synthesize(&p.bank, gamma)?;
    recon.add_scaled(-1.0, &p.input);
    let mut cost = 0.5 * recon.norm_sq();
    if let Some(anchor) = p.anchor()? {
        let mut l1 = 0.0;
        for (g, a) in gamma.data().iter().zip(anchor.data()) {
            l1 += (g - a).abs();
        }
        cost += 0.5 * p.alpha * l1;
    }
    let mut weighted = 0.0;
    for (g, l) in gamma.data().iter().zip(p.sparsity.data()) {
        weighted += l * g.abs();
    }
    Ok(cost + 0.5 * weighted)
}

/// Objective with the transition L1 replaced by its Huber envelope; this is
/// the function the solver's cost trace reports. Identical to `state_cost`
/// when the problem is static or alpha = 0.
pub fn state_cost_smoothed(gamma: &Tensor4, p: &StateProblem) -> Result<f64> {
    p.validate()?;
    let (n, q, h, w) = p.state_shape();
    if gamma.shape() != (n, q, h, w) {
        return Err(Error::Shape("states do not match the problem's state shape".into()));
    }
    let anchor = p.anchor()?;
    let obj = StateObjective::from_parts(p, anchor, 0.0)?;
    let mut l1 = 0.0;
    for (g, l) in gamma.data().iter().zip(p.sparsity.data()) {
        l1 += 0.5 * l * g.abs();
    }
    Ok(obj.smooth_cost(gamma) + l1)
}

/// Gradient of the Huber-smoothed L1, before any alpha scaling: the
/// elementwise clamp of (pi - anchor)/mu to [-1, 1].
pub fn smoothed_transition_grad(pi: &Tensor4, anchor: &Tensor4, mu: f64) -> Result<Tensor4> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Argument(format!("smoothing width must be positive, got {mu}")));
    }
    if !pi.same_shape(anchor) {
        return Err(Error::Shape("anchor shape differs from the iterate".into()));
    }
    let mut z = pi.clone();
    z.add_scaled(-1.0, anchor);
    z.scale(1.0 / mu);
    Ok(proj_linf(&z))
}

fn huber(z: f64, mu: f64) -> f64 {
    let a = z.abs();
    if a <= mu {
        z * z / (2.0 * mu)
    } else {
        a - mu / 2.0
    }
}

struct StateObjective<'a> {
    p: &'a StateProblem,
    anchor: Option<Tensor4>,
    weights: Tensor4,
    ell: f64,
}

impl<'a> StateObjective<'a> {
    /// `extra_ell` folds the Huber curvature in when the objective will be
    /// solved rather than merely evaluated.
    fn from_parts(p: &'a StateProblem, anchor: Option<Tensor4>, extra_ell: f64) -> Result<Self> {
        let mut weights = p.sparsity.clone();
        weights.scale(0.5);
        Ok(StateObjective { p, anchor, weights, ell: extra_ell })
    }

    fn for_solve(p: &'a StateProblem) -> Result<Self> {
        let ell_bank = match p.lipschitz_hint {
            Some(l) if l > 0.0 && l.is_finite() => l,
            Some(l) => {
                return Err(Error::Argument(format!("operator-norm hint must be positive, got {l}")))
            }
            None => estimate_lipschitz(&p.bank, p.input.h, p.input.w)?,
        };
        let anchor = p.anchor()?;
        let extra = if anchor.is_some() { p.alpha / p.mu } else { 0.0 };
        StateObjective::from_parts(p, anchor, ell_bank + extra)
    }
}

impl ProxObjective for StateObjective<'_> {
    fn smooth_cost(&self, x: &Tensor4) -> f64 {
        let mut recon = conv_synthesize(&self.p.bank, x).expect("validated shapes");
        recon.add_scaled(-1.0, &self.p.input);
        let mut cost = 0.5 * recon.norm_sq();
        if let Some(anchor) = &self.anchor {
            let mut hub = 0.0;
            for (g, a) in x.data().iter().zip(anchor.data()) {
                hub += huber(g - a, self.p.mu);
            }
            cost += 0.5 * self.p.alpha * hub;
        }
        cost
    }

    fn smooth_grad(&self, x: &Tensor4) -> Tensor4 {
        let mut recon = conv_synthesize(&self.p.bank, x).expect("validated shapes");
        recon.add_scaled(-1.0, &self.p.input);
        let mut grad = conv_analyze(&self.p.bank, &recon).expect("validated shapes");
        if let Some(anchor) = &self.anchor {
            let clamp = smoothed_transition_grad(x, anchor, self.p.mu).expect("validated shapes");
            grad.add_scaled(0.5 * self.p.alpha, &clamp);
        }
        grad
    }

    fn l1_weights(&self) -> &Tensor4 {
        &self.weights
    }

    fn curvature_bound(&self, _at: &Tensor4) -> f64 {
        // Global bound: bank operator norm plus Huber curvature; no refresh
        // needed because neither depends on the iterate.
        self.ell
    }
}

/// Infer states from a zero start with default stopping, then max-pool.
pub fn infer_states(
    p: &StateProblem,
    schedule: &mut InertialSchedule,
    restart: RestartPolicy,
    max_iters: usize,
) -> Result<(Tensor4, PoolIndex, SolverReport)> {
    infer_states_with(p, schedule, restart, &SolverOptions::with_max_iters(max_iters), None)
}

pub fn infer_states_with(
    p: &StateProblem,
    schedule: &mut InertialSchedule,
    restart: RestartPolicy,
    opts: &SolverOptions,
    warm_start: Option<Tensor4>,
) -> Result<(Tensor4, PoolIndex, SolverReport)> {
    if opts.max_iters == 0 {
        return Err(Error::Argument("state solver needs at least one iteration".into()));
    }
    p.validate()?;
    if p.sparsity.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Argument(
            "state solve requires strictly positive sparsity weights".into(),
        ));
    }
    let (n, q, h, w) = p.state_shape();
    let x0 = match warm_start {
        Some(x) => {
            if x.shape() != (n, q, h, w) {
                return Err(Error::Shape("warm start does not match the state shape".into()));
            }
            x
        }
        None => Tensor4::zeros(n, q, h, w),
    };
    let obj = StateObjective::for_solve(p)?;
    let (states, mut report) = run_prox(&obj, x0, schedule, restart, opts)?;
    let (pooled, idx) = max_pool(&states)?;
    report.pre_pool = Some(states);
    Ok((pooled, idx, report))
}
