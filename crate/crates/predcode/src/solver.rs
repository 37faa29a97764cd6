//! Accelerated proximal gradient driver shared by the state and cause solvers.
//!
//! The iteration is: candidate = shrink(pi - tau * grad(pi), tau * weights),
//! then pi_next = candidate + beta * (candidate - previous). Under the
//! function-value restart policy a cost increase discards the candidate,
//! clears momentum, refreshes the curvature bound at the current iterate, and
//! retakes a plain (beta = 0) step; if even that step fails to descend the
//! iterate is held in place for one round. The recorded trace is therefore
//! non-increasing up to the trigger tolerance whenever restarts are on.

use crate::error::{Error, Result};
use crate::ops::{shrink, step_from};
use crate::schedule::{step_size, InertialSchedule, RestartPolicy};
use crate::tensor::Tensor4;

/// Objective split f(x) + sum_k w_k |x_k| with f smooth.
pub(crate) trait ProxObjective {
    fn smooth_cost(&self, x: &Tensor4) -> f64;
    fn smooth_grad(&self, x: &Tensor4) -> Tensor4;
    /// Per-element nonnegative L1 weights w.
    fn l1_weights(&self) -> &Tensor4;
    /// Curvature bound for grad f, evaluated around `at`. Called once at the
    /// start and again after every restart, so bounds that depend on the
    /// current iterate (the cause objective's exponential term) stay valid.
    fn curvature_bound(&self, at: &Tensor4) -> f64;
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative step-size safety in (0, 1].
    pub safety: f64,
    /// Stop once the cost changes by less than plateau_tol * (1 + |cost|)
    /// across `plateau_window` iterations. Zero disables early stopping.
    pub plateau_tol: f64,
    pub plateau_window: usize,
    /// Record the support sign pattern of every iterate (diagnostics only).
    pub record_signs: bool,
}

impl SolverOptions {
    pub fn with_max_iters(max_iters: usize) -> Self {
        SolverOptions {
            max_iters,
            safety: 1.0,
            plateau_tol: 1e-8,
            plateau_window: 5,
            record_signs: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    /// Iterations actually executed; cost_trace has iterations + 1 entries,
    /// starting at the initial point.
    pub iterations: usize,
    pub cost_trace: Vec<f64>,
    /// beta_trace[m] is the momentum weight used after accepting iterate m+1.
    pub beta_trace: Vec<f64>,
    /// restart_flags[m] marks iteration m+1 as a momentum reset.
    pub restart_flags: Vec<bool>,
    pub restarts: usize,
    /// Fraction of exactly nonzero entries in the returned point.
    pub final_sparsity: f64,
    /// True when the plateau rule stopped the solve before max_iters.
    pub converged: bool,
    /// Sign pattern (-1, 0, +1) of each iterate, when requested.
    pub sign_trace: Option<Vec<Vec<i8>>>,
    /// State solves return the pooled tensor; the full-resolution states ride
    /// along here. Absent for cause solves.
    pub pre_pool: Option<Tensor4>,
}

fn total_cost<P: ProxObjective>(p: &P, x: &Tensor4) -> f64 {
    let mut l1 = 0.0;
    let w = p.l1_weights().data();
    for (xv, wv) in x.data().iter().zip(w) {
        l1 += wv * xv.abs();
    }
    p.smooth_cost(x) + l1
}

fn signs(x: &Tensor4) -> Vec<i8> {
    x.data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

fn scaled_weights(w: &Tensor4, tau: f64) -> Tensor4 {
    let mut t = w.clone();
    t.scale(tau);
    t
}

pub(crate) fn run_prox<P: ProxObjective>(
    problem: &P,
    x0: Tensor4,
    schedule: &mut InertialSchedule,
    restart: RestartPolicy,
    opts: &SolverOptions,
) -> Result<(Tensor4, SolverReport)> {
    if !x0.same_shape(p_weights_shape(problem)) {
        return Err(Error::Shape(
            "initial point and L1 weight field differ in shape".into(),
        ));
    }
    let mut ell = problem.curvature_bound(&x0).max(1e-12);
    let mut tau = step_size(ell, opts.safety)?;
    let mut thresholds = scaled_weights(problem.l1_weights(), tau);

    let mut prev = x0; // last accepted iterate
    let mut prev_cost = total_cost(problem, &prev);
    if !prev_cost.is_finite() {
        return Err(Error::Degenerate("initial cost is not finite".into()));
    }
    let mut pi = prev.clone(); // extrapolated point
    let mut trace = vec![prev_cost];
    let mut beta_trace = Vec::new();
    let mut restart_flags = Vec::new();
    let mut sign_trace = opts.record_signs.then(|| vec![signs(&prev)]);
    let mut restarts = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for m in 1..=opts.max_iters {
        let grad = problem.smooth_grad(&pi);
        let mut candidate = shrink(&step_from(&pi, &grad, tau), &thresholds)?;
        let mut cost = total_cost(problem, &candidate);
        if !cost.is_finite() {
            return Err(Error::Degenerate(format!(
                "solver diverged: non-finite cost at iteration {m}"
            )));
        }

        let mut restarted = false;
        if restart.triggered(prev_cost, cost) {
            // Reject the inertial candidate: refresh curvature at the last
            // good point and retake a momentum-free step from it.
            schedule.restart();
            ell = problem.curvature_bound(&prev).max(1e-12);
            tau = step_size(ell, opts.safety)?;
            thresholds = scaled_weights(problem.l1_weights(), tau);
            let grad_prev = problem.smooth_grad(&prev);
            let retaken = shrink(&step_from(&prev, &grad_prev, tau), &thresholds)?;
            let retaken_cost = total_cost(problem, &retaken);
            if !retaken_cost.is_finite() {
                return Err(Error::Degenerate(format!(
                    "solver diverged: non-finite cost at iteration {m}"
                )));
            }
            if restart.triggered(prev_cost, retaken_cost) {
                // Even the plain step rose (stale curvature bound); hold
                // position and let the refreshed bound act next round.
                candidate = prev.clone();
                cost = prev_cost;
            } else {
                candidate = retaken;
                cost = retaken_cost;
            }
            restarted = true;
            restarts += 1;
        }

        let beta = schedule.next_beta();
        let mut next_pi = candidate.clone();
        if beta != 0.0 {
            // candidate + beta * (candidate - prev)
            next_pi.scale(1.0 + beta);
            next_pi.add_scaled(-beta, &prev);
        }
        pi = next_pi;

        prev = candidate;
        prev_cost = cost;
        trace.push(cost);
        beta_trace.push(beta);
        restart_flags.push(restarted);
        if let Some(st) = sign_trace.as_mut() {
            st.push(signs(&prev));
        }
        iterations = m;

        if opts.plateau_window > 0 && m >= opts.plateau_window {
            let before = trace[m - opts.plateau_window];
            if (before - cost).abs() < opts.plateau_tol * (1.0 + cost.abs()) {
                converged = true;
                break;
            }
        }
    }

    let nnz = prev.data().iter().filter(|v| **v != 0.0).count();
    let report = SolverReport {
        iterations,
        cost_trace: trace,
        beta_trace,
        restart_flags,
        restarts,
        final_sparsity: nnz as f64 / prev.len() as f64,
        converged,
        sign_trace,
        pre_pool: None,
    };
    Ok((prev, report))
}

fn p_weights_shape<P: ProxObjective>(p: &P) -> &Tensor4 {
    p.l1_weights()
}
