//! Parameter updates for the dictionary, transition, and invariance banks.
//!
//! Two trainers share the same step directions. The dual-estimation form adds
//! decaying Gaussian transition noise and a growing momentum term to the raw
//! correlation step; Adam feeds the negated direction through bias-corrected
//! adaptive moments. Dictionary and invariance filters are renormalized to
//! unit norm after every update; the transition matrix is not.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ops::conv_synthesize;
use crate::tensor::{FilterBank, Tensor4};
use crate::topdown::TransitionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainerMode {
    DualEstimation,
    Adam,
}

/// Forgetting factor: starts at 0.7 and gains a tenth per thousand batches,
/// capped at 0.99.
pub fn theta(batches: u64) -> f64 {
    (0.7 + 0.1 * (batches / 1000) as f64).min(0.99)
}

/// Transition-noise scale at the given batch counter.
pub fn noise_sigma(base: f64, batches: u64) -> f64 {
    base * 0.999f64.powf(batches as f64)
}

/// Learning rate after per-epoch halving.
pub fn epoch_lr(base: f64, epoch: u32) -> f64 {
    base / f64::powi(2.0, epoch as i32)
}

#[derive(Debug, Clone, Default)]
struct AdamBuffers {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    pub mode: TrainerMode,
    /// Dual-estimation step sizes for dictionary, transition, invariance.
    pub psi: f64,
    pub psi_prime: f64,
    pub psi_dprime: f64,
    /// Adam base learning rate, halved each epoch.
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Base transition-noise scale; zero disables noise entirely.
    pub noise_base: f64,
    /// Mini-batches consumed so far; drives theta and the noise decay.
    pub batches: u64,
    pub epoch: u32,
    rng: ChaCha8Rng,
    adam: HashMap<String, AdamBuffers>,
    /// Previous applied delta per parameter, for the momentum term.
    momentum: HashMap<String, Vec<f64>>,
}

impl LearnerState {
    pub fn new(mode: TrainerMode, seed: u64) -> Self {
        use rand::SeedableRng;
        LearnerState {
            mode,
            psi: 0.001,
            psi_prime: 0.001,
            psi_dprime: 0.001,
            base_lr: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            noise_base: 1e-4,
            batches: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            adam: HashMap::new(),
            momentum: HashMap::new(),
        }
    }

    pub fn advance_batch(&mut self) {
        self.batches += 1;
    }

    pub fn theta(&self) -> f64 {
        theta(self.batches)
    }

    pub fn lr(&self) -> f64 {
        epoch_lr(self.base_lr, self.epoch)
    }

    fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One bias-corrected adaptive step on a flat parameter slice. `key`
    /// selects the moment buffers; a fresh key starts them at zero.
    pub fn adam_step(&mut self, key: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape("gradient length differs from parameter length".into()));
        }
        let lr = self.lr();
        let buf = self.adam.entry(key.to_string()).or_default();
        if buf.m.is_empty() {
            buf.m = vec![0.0; param.len()];
            buf.v = vec![0.0; param.len()];
        }
        if buf.m.len() != param.len() {
            return Err(Error::Shape(format!("moment buffers for '{key}' have a different length")));
        }
        buf.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(buf.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(buf.steps as i32);
        for i in 0..param.len() {
            buf.m[i] = self.beta1 * buf.m[i] + (1.0 - self.beta1) * grad[i];
            buf.v[i] = self.beta2 * buf.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = buf.m[i] / bc1;
            let vhat = buf.v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    /// Dual-estimation step: param += noise + psi * (direction + theta * prev_delta).
    /// Stores the applied delta (including noise) as the next momentum term.
    fn dual_step(&mut self, key: &str, psi: f64, param: &mut [f64], direction: &[f64]) {
        let th = self.theta();
        let sigma = noise_sigma(self.noise_base, self.batches);
        let prev = self.momentum.remove(key).unwrap_or_else(|| vec![0.0; param.len()]);
        let mut delta = vec![0.0; param.len()];
        for i in 0..param.len() {
            let noise = if sigma > 0.0 { sigma * self.gaussian() } else { 0.0 };
            delta[i] = noise + psi * (direction[i] + th * prev[i]);
            param[i] += delta[i];
        }
        self.momentum.insert(key.to_string(), delta);
    }

    fn apply(&mut self, key: &str, psi: f64, param: &mut [f64], direction: &[f64]) -> Result<()> {
        match self.mode {
            TrainerMode::DualEstimation => {
                self.dual_step(key, psi, param, direction);
                Ok(())
            }
            TrainerMode::Adam => {
                // Directions point uphill on the paper's update; Adam descends
                // on the negated direction.
                let grad: Vec<f64> = direction.iter().map(|d| -d).collect();
                self.adam_step(key, param, &grad)
            }
        }
    }
}

/// Ascent direction for the dictionary: correlate the reconstruction residual
/// with the states over every filter tap. Equals the negative gradient of
/// (1/2)||input - synth(D, gamma)||^2 in the filter weights.
pub fn dictionary_direction(
    bank: &FilterBank,
    input: &Tensor4,
    gamma: &Tensor4,
) -> Result<FilterBank> {
    let mut residual = conv_synthesize(bank, gamma)?;
    if !residual.same_shape(input) {
        return Err(Error::Shape("input shape does not match the reconstruction".into()));
    }
    residual.scale(-1.0);
    residual.add_scaled(1.0, input);
    correlate_taps(bank.q, bank.c, bank.f, &residual, gamma)
}

/// Correlate `field` (at channel resolution c) with `source` (at channel
/// resolution q) over all filter taps: the adjoint of synthesis in the
/// weights. field and source share batch and spatial dims.
fn correlate_taps(q: usize, c: usize, f: usize, field: &Tensor4, source: &Tensor4) -> Result<FilterBank> {
    if field.n != source.n || field.h != source.h || field.w != source.w {
        return Err(Error::Shape("correlation operands differ in batch or spatial dims".into()));
    }
    if field.c != c || source.c != q {
        return Err(Error::Shape("correlation operands have unexpected channel counts".into()));
    }
    let p = (f - 1) / 2;
    let (h, w) = (field.h, field.w);
    let mut dir = FilterBank::zeros(q, c, f)?;
    for n in 0..field.n {
        for qi in 0..q {
            for ci in 0..c {
                let fplane = field.plane(n, ci);
                let splane = source.plane(n, qi);
                for dy in 0..f {
                    for dx in 0..f {
                        // Matches synthesis: out[y,x] += w[dy,dx] src[y+dy-p, x+dx-p].
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = y as isize + dy as isize - p as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let sy = sy as usize;
                            for x in 0..w {
                                let sx = x as isize + dx as isize - p as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += fplane[y * w + x] * splane[sy * w + sx as usize];
                            }
                        }
                        *dir.at_mut(qi, ci, dy, dx) += acc;
                    }
                }
            }
        }
    }
    Ok(dir)
}

/// Update the dictionary in the trainer's mode and renormalize filters.
pub fn update_dictionary(
    bank: &FilterBank,
    input: &Tensor4,
    gamma: &Tensor4,
    ls: &mut LearnerState,
    key: &str,
) -> Result<FilterBank> {
    let dir = dictionary_direction(bank, input, gamma)?;
    let mut out = bank.clone();
    ls.apply(key, ls.psi, out.weights_mut(), dir.weights())?;
    if out.weights().iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("dictionary update produced non-finite weights".into()));
    }
    out.normalize_filters();
    Ok(out)
}

/// Ascent direction for the transition matrix: the paper's literal
/// sign(gamma_next - C gamma_prev) gamma_next^T, aggregated over batch and
/// spatial sites.
pub fn transition_direction(
    c: &TransitionMatrix,
    gamma_next: &Tensor4,
    gamma_prev: &Tensor4,
) -> Result<Vec<f64>> {
    if !gamma_next.same_shape(gamma_prev) {
        return Err(Error::Shape("state tensors differ in shape".into()));
    }
    let pred = c.apply(gamma_prev)?;
    let k = c.channels();
    let mut dir = vec![0.0; k * k];
    for n in 0..gamma_next.n {
        for a in 0..k {
            for b in 0..k {
                let mut acc = 0.0;
                let next_a = gamma_next.plane(n, a);
                let pred_a = pred.plane(n, a);
                let next_b = gamma_next.plane(n, b);
                for i in 0..next_a.len() {
                    let s = next_a[i] - pred_a[i];
                    if s > 0.0 {
                        acc += next_b[i];
                    } else if s < 0.0 {
                        acc -= next_b[i];
                    }
                }
                dir[a * k + b] += acc;
            }
        }
    }
    Ok(dir)
}

pub fn update_transition(
    c: &TransitionMatrix,
    gamma_next: &Tensor4,
    gamma_prev: &Tensor4,
    ls: &mut LearnerState,
    key: &str,
) -> Result<TransitionMatrix> {
    let dir = transition_direction(c, gamma_next, gamma_prev)?;
    let mut out = c.clone();
    ls.apply(key, ls.psi_prime, out.weights_mut(), &dir)?;
    if out.weights().iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("transition update produced non-finite weights".into()));
    }
    Ok(out)
}

/// Ascent direction for the invariance bank: correlate exp(-(G kappa)) .*
/// |gamma| with the causes over every tap. Proportional to the negative
/// gradient of the cause cost's exponential term in G (the cost carries an
/// extra alpha'/2 factor the paper's update omits).
pub fn invariance_direction(
    bank: &FilterBank,
    kappa: &Tensor4,
    pooled_states: &Tensor4,
) -> Result<FilterBank> {
    let mut field = conv_synthesize(bank, kappa)?;
    if !field.same_shape(pooled_states) {
        return Err(Error::Shape("pooled states do not match the invariance output".into()));
    }
    for (fv, g) in field.data_mut().iter_mut().zip(pooled_states.data()) {
        *fv = crate::cause::capped_exp_neg(*fv) * g.abs();
    }
    correlate_taps(bank.q, bank.c, bank.f, &field, kappa)
}

pub fn update_invariance(
    bank: &FilterBank,
    kappa: &Tensor4,
    pooled_states: &Tensor4,
    ls: &mut LearnerState,
    key: &str,
) -> Result<FilterBank> {
    let dir = invariance_direction(bank, kappa, pooled_states)?;
    let mut out = bank.clone();
    ls.apply(key, ls.psi_dprime, out.weights_mut(), dir.weights())?;
    if out.weights().iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("invariance update produced non-finite weights".into()));
    }
    out.normalize_filters();
    Ok(out)
}
