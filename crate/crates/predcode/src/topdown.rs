//! Temporal channel-mixing and the closed-form top-down prediction of
//! lower-stage causes.
//!
//! The prediction minimizes, independently per coordinate,
//!
//!   J(g) = alpha |g - [C gamma_prev]_k| + alpha' lambda_k |g|
//!
//! whose global minimum over the only two candidate values {0, [C g]_k} is
//! the anchor value exactly when alpha' lambda_k < alpha, and zero otherwise
//! (ties go to zero: both candidates then cost the same and zero is the
//! sparser choice).

use crate::cause::update_sparsity;
use crate::error::{Error, Result};
use crate::ops::conv_synthesize;
use crate::state::SparsityField;
use crate::tensor::{FilterBank, PoolIndex, Tensor4};

/// Square channel-mixing matrix applied independently at every spatial site:
/// out[n, a, y, x] = sum_b weights[a, b] * x[n, b, y, x].
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    /// Row-major k x k.
    weights: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(k: usize, weights: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("transition matrix needs at least one channel".into()));
        }
        if weights.len() != k * k {
            return Err(Error::Shape(format!(
                "transition matrix for {k} channels needs {} weights, got {}",
                k * k,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Argument("transition matrix entries must be finite".into()));
        }
        Ok(TransitionMatrix { k, weights })
    }

    pub fn identity(k: usize) -> Result<Self> {
        let mut w = vec![0.0; k * k];
        for i in 0..k {
            w[i * k + i] = 1.0;
        }
        TransitionMatrix::new(k, w)
    }

    pub fn zeros(k: usize) -> Result<Self> {
        TransitionMatrix::new(k, vec![0.0; k * k])
    }

    pub fn channels(&self) -> usize {
        self.k
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.k + col]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.weights[row * self.k + col]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Mix channels at every site. Skips zero rows' inner loops.
    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.c != self.k {
            return Err(Error::Shape(format!(
                "transition matrix mixes {} channels, tensor has {}",
                self.k, x.c
            )));
        }
        let mut out = Tensor4::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            for a in 0..self.k {
                let row = &self.weights[a * self.k..(a + 1) * self.k];
                for (b, &w) in row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let src = x.plane(n, b);
                    let dst = out.plane_mut(n, a);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Per-coordinate threshold rule: keep the anchor value where
/// alpha_prime * lambda < alpha, zero elsewhere.
pub fn threshold_prediction(
    anchor: &Tensor4,
    field: &SparsityField,
    alpha: f64,
    alpha_prime: f64,
) -> Result<Tensor4> {
    if !anchor.same_shape(field) {
        return Err(Error::Shape("sparsity field does not match the anchor shape".into()));
    }
    let mut out = anchor.clone();
    for (v, l) in out.data_mut().iter_mut().zip(field.data()) {
        if !(alpha_prime * l < alpha) {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Closed-form top-down prediction of the stage below's causes: mix the
/// previous states through the transition, gate them against the sparsity
/// field derived from the current causes, and synthesize through the
/// dictionary. Zero previous activity predicts zero.
#[allow(clippy::too_many_arguments)]
pub fn predict_topdown(
    bank: &FilterBank,
    invariance: &FilterBank,
    transition: &TransitionMatrix,
    gamma_prev: &Tensor4,
    kappa: &Tensor4,
    idx: &PoolIndex,
    alpha: f64,
    alpha_prime: f64,
) -> Result<Tensor4> {
    if !(alpha >= 0.0) {
        return Err(Error::Argument(format!("transition weight must be nonnegative, got {alpha}")));
    }
    if invariance.c != bank.q {
        return Err(Error::Shape(format!(
            "invariance bank feeds {} channels but the dictionary has {} filters",
            invariance.c, bank.q
        )));
    }
    let anchor = transition.apply(gamma_prev)?;
    let field = update_sparsity(invariance, kappa, alpha_prime, idx)?;
    if !field.same_shape(&anchor) {
        return Err(Error::Shape(
            "pool index resolution does not match the previous states".into(),
        ));
    }
    let gated = threshold_prediction(&anchor, &field, alpha, alpha_prime)?;
    conv_synthesize(bank, &gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::max_pool;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_mixing_is_a_no_op() {
        let x = Tensor4::from_vec(1, 2, 2, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        let c = TransitionMatrix::identity(2).unwrap();
        assert_eq!(c.apply(&x).unwrap().data(), x.data());
    }

    #[test]
    fn mixing_matches_per_site_matrix_product() {
        let x = Tensor4::from_vec(1, 2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = TransitionMatrix::new(2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let y = c.apply(&x).unwrap();
        // site 0: [1,3] -> [1-3, 0.5+6]; site 1: [2,4] -> [2-4, 1+8]
        assert_eq!(y.data(), &[-2.0, -2.0, 6.5, 9.0]);
    }

    #[test]
    fn construction_validates_shape_and_finiteness() {
        assert!(TransitionMatrix::new(2, vec![0.0; 3]).is_err());
        assert!(TransitionMatrix::new(0, vec![]).is_err());
        assert!(TransitionMatrix::new(1, vec![f64::NAN]).is_err());
        let c = TransitionMatrix::identity(3).unwrap();
        let bad = Tensor4::zeros(1, 2, 2, 2);
        assert!(c.apply(&bad).is_err());
    }

    #[test]
    fn threshold_rule_example() {
        let anchor = Tensor4::from_vec(1, 1, 1, 2, vec![0.5, -0.2]).unwrap();
        let field = Tensor4::from_vec(1, 1, 1, 2, vec![0.3, 1.2]).unwrap();
        let got = threshold_prediction(&anchor, &field, 1.0, 1.0).unwrap();
        assert_eq!(got.data(), &[0.5, 0.0]);
        // Equality binds to zero.
        let tie = Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 0.999]).unwrap();
        let got = threshold_prediction(&anchor, &tie, 1.0, 1.0).unwrap();
        assert_eq!(got.data(), &[0.0, -0.2]);
    }

    #[test]
    fn infinite_weight_passes_the_anchor_through() {
        let anchor = Tensor4::from_vec(1, 1, 1, 3, vec![0.5, -0.2, 7.0]).unwrap();
        let mut field = Tensor4::zeros(1, 1, 1, 3);
        field.fill(1e12);
        let got = threshold_prediction(&anchor, &field, f64::INFINITY, 1.0).unwrap();
        assert_eq!(got.data(), anchor.data());
    }

    fn random_setup(
        seed: u64,
    ) -> (FilterBank, FilterBank, TransitionMatrix, Tensor4, Tensor4, PoolIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, d, h) = (3, 2, 4);
        let bank =
            FilterBank::new(q, 1, 3, (0..q * 9).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let invariance =
            FilterBank::new(d, q, 3, (0..d * q * 9).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let transition =
            TransitionMatrix::new(q, (0..q * q).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let gamma_prev = Tensor4::from_vec(
            1,
            q,
            h,
            h,
            (0..q * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let states = Tensor4::from_vec(
            1,
            q,
            h,
            h,
            (0..q * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (_, idx) = max_pool(&states).unwrap();
        let kappa = Tensor4::from_vec(
            1,
            d,
            h / 2,
            h / 2,
            (0..d * h * h / 4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        (bank, invariance, transition, gamma_prev, kappa, idx)
    }

    /// Independent reimplementation of the whole prediction pipeline with
    /// per-coordinate two-candidate minimization.
    fn oracle_gated(
        invariance: &FilterBank,
        transition: &TransitionMatrix,
        gamma_prev: &Tensor4,
        kappa: &Tensor4,
        idx: &PoolIndex,
        alpha: f64,
        alpha_prime: f64,
    ) -> Tensor4 {
        let (n, q, h, w) = gamma_prev.shape();
        // Anchor by direct per-site summation.
        let mut anchor = Tensor4::zeros(n, q, h, w);
        for s in 0..n {
            for a in 0..q {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for b in 0..q {
                            acc += transition.at(a, b) * gamma_prev.at(s, b, y, x);
                        }
                        *anchor.at_mut(s, a, y, x) = acc;
                    }
                }
            }
        }
        // Sparsity field: reference synthesis, manual unpool, then the map.
        let pooled = crate::oracle::conv_synthesize_reference(invariance, kappa);
        let mut field = Tensor4::zeros(n, q, h, w);
        for s in 0..n {
            for c in 0..q {
                for py in 0..h / 2 {
                    for px in 0..w / 2 {
                        let code = idx.code(s, c, py, px) as usize;
                        let (dy, dx) = (code / 2, code % 2);
                        *field.at_mut(s, c, 2 * py + dy, 2 * px + dx) = pooled.at(s, c, py, px);
                    }
                }
            }
        }
        for v in field.data_mut() {
            *v = alpha_prime * (1.0 + (-v.clamp(-30.0, 30.0)).exp());
        }
        // Two-candidate minimization per coordinate, ties to zero.
        let mut gated = Tensor4::zeros(n, q, h, w);
        for i in 0..gated.len() {
            let a = anchor.data()[i];
            let l = field.data()[i];
            let keep_cost = alpha_prime * l * a.abs();
            let drop_cost = alpha * a.abs();
            gated.data_mut()[i] = if keep_cost < drop_cost { a } else { 0.0 };
        }
        gated
    }

    #[test]
    fn prediction_matches_two_point_oracle() {
        for seed in 0..20u64 {
            let (bank, invariance, transition, gamma_prev, kappa, idx) = random_setup(seed);
            let (alpha, alpha_prime) = (2.0, 1.0);
            let got = predict_topdown(
                &bank, &invariance, &transition, &gamma_prev, &kappa, &idx, alpha, alpha_prime,
            )
            .unwrap();
            let gated =
                oracle_gated(&invariance, &transition, &gamma_prev, &kappa, &idx, alpha, alpha_prime);
            let want = conv_synthesize(&bank, &gated).unwrap();
            assert_eq!(got.data(), want.data(), "seed {seed}");
        }
    }

    #[test]
    fn gating_beats_both_candidates_per_coordinate() {
        let (_, invariance, transition, gamma_prev, kappa, idx) = random_setup(99);
        let (alpha, alpha_prime) = (2.0, 1.0);
        let anchor = transition.apply(&gamma_prev).unwrap();
        let field = update_sparsity(&invariance, &kappa, alpha_prime, &idx).unwrap();
        let gated = threshold_prediction(&anchor, &field, alpha, alpha_prime).unwrap();
        for i in 0..gated.len() {
            let a = anchor.data()[i];
            let l = field.data()[i];
            let j = |g: f64| alpha * (g - a).abs() + alpha_prime * l * g.abs();
            let chosen = j(gated.data()[i]);
            assert!(chosen <= j(0.0) + 1e-15);
            assert!(chosen <= j(a) + 1e-15);
        }
    }

    #[test]
    fn zero_previous_activity_predicts_zero() {
        let (bank, invariance, transition, _, kappa, idx) = random_setup(7);
        let zero = Tensor4::zeros(1, 3, 4, 4);
        let got =
            predict_topdown(&bank, &invariance, &transition, &zero, &kappa, &idx, 2.0, 1.0)
                .unwrap();
        assert!(got.data().iter().all(|&v| v == 0.0));
    }
}
