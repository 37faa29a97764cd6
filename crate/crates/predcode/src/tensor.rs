//! Dense activation tensors and filter banks.
//!
//! `Tensor4` is the common container for stimuli, states, causes and solver
//! iterates: batch-major `(n, c, h, w)` with contiguous `f64` storage.
//! `FilterBank` holds the synthesis filters of one stage; applied through
//! `ops::conv_synthesize` it acts as the Toeplitz-form generative map, and
//! through `ops::conv_analyze` as its exact adjoint.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// Contiguous `(h*w)` slice of one channel plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        let base = (n * self.c + c) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let base = (n * self.c + c) * hw;
        &mut self.data[base..base + hw]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// self += s * other
    pub fn add_scaled(&mut self, s: f64, other: &Tensor4) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Max-pool bookkeeping: for every non-overlapping 2x2 window the row-major
/// offset code (0..4) of the argmax, together with the pre-pool spatial dims.
/// Unpooling scatters each pooled value back to exactly that cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    pub n: usize,
    pub c: usize,
    /// Pre-pool spatial dims (both even).
    pub h: usize,
    pub w: usize,
    /// One code per pooled cell, laid out like the pooled tensor.
    codes: Vec<u8>,
}

impl PoolIndex {
    pub(crate) fn new(n: usize, c: usize, h: usize, w: usize, codes: Vec<u8>) -> Self {
        debug_assert_eq!(codes.len(), n * c * (h / 2) * (w / 2));
        PoolIndex { n, c, h, w, codes }
    }

    pub fn pooled_dims(&self) -> (usize, usize) {
        (self.h / 2, self.w / 2)
    }

    #[inline]
    pub fn code(&self, n: usize, c: usize, py: usize, px: usize) -> u8 {
        let (ph, pw) = self.pooled_dims();
        self.codes[((n * self.c + c) * ph + py) * pw + px]
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Every code must address a cell inside its own 2x2 window.
    pub fn validate(&self) -> Result<()> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::Corrupt(format!("pool index dims {}x{} not even", self.h, self.w)));
        }
        let want = self.n * self.c * (self.h / 2) * (self.w / 2);
        if self.codes.len() != want {
            return Err(Error::Corrupt(format!(
                "pool index holds {} codes, dims imply {}",
                self.codes.len(),
                want
            )));
        }
        if let Some(bad) = self.codes.iter().find(|&&k| k >= 4) {
            return Err(Error::Corrupt(format!("pool index code {bad} outside its 2x2 window")));
        }
        Ok(())
    }
}

/// One stage's filter set: `q` filters over `c` input channels, square odd
/// support `f`. Synthesis treats filter channel `q` as the map from state
/// channel `q` into the input space; every filter is kept at unit Euclidean
/// norm by the learning steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub q: usize,
    pub c: usize,
    pub f: usize,
    weights: Vec<f64>,
}

impl FilterBank {
    pub fn new(q: usize, c: usize, f: usize, weights: Vec<f64>) -> Result<Self> {
        if q == 0 || c == 0 || f == 0 {
            return Err(Error::Argument("filter bank dims must be positive".into()));
        }
        if f % 2 == 0 {
            return Err(Error::Argument(format!("filter size {f} must be odd for symmetric padding")));
        }
        if weights.len() != q * c * f * f {
            return Err(Error::Shape(format!(
                "filter data length {} does not match {}x{}x{}x{}",
                weights.len(),
                q,
                c,
                f,
                f
            )));
        }
        Ok(FilterBank { q, c, f, weights })
    }

    pub fn zeros(q: usize, c: usize, f: usize) -> Result<Self> {
        FilterBank::new(q, c, f, vec![0.0; q * c * f * f])
    }

    #[inline]
    pub fn at(&self, q: usize, c: usize, dy: usize, dx: usize) -> f64 {
        self.weights[((q * self.c + c) * self.f + dy) * self.f + dx]
    }

    #[inline]
    pub fn at_mut(&mut self, q: usize, c: usize, dy: usize, dx: usize) -> &mut f64 {
        &mut self.weights[((q * self.c + c) * self.f + dy) * self.f + dx]
    }

    /// The `(c, f, f)` slab of one filter.
    pub fn filter(&self, q: usize) -> &[f64] {
        let len = self.c * self.f * self.f;
        &self.weights[q * len..(q + 1) * len]
    }

    pub fn filter_mut(&mut self, q: usize) -> &mut [f64] {
        let len = self.c * self.f * self.f;
        &mut self.weights[q * len..(q + 1) * len]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn filter_norms(&self) -> Vec<f64> {
        (0..self.q)
            .map(|q| self.filter(q).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Rescale every filter to unit Euclidean norm. Zero filters are left
    /// untouched rather than divided by zero; callers that must exclude them
    /// check `filter_norms` first.
    pub fn normalize_filters(&mut self) {
        for q in 0..self.q {
            let norm = self.filter(q).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in self.filter_mut(q) {
                    *v /= norm;
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_indexing_round_trips() {
        let mut t = Tensor4::zeros(2, 3, 4, 5);
        *t.at_mut(1, 2, 3, 4) = 7.5;
        assert_eq!(t.at(1, 2, 3, 4), 7.5);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 7.5);
    }

    #[test]
    fn tensor_from_vec_rejects_bad_length() {
        assert!(matches!(Tensor4::from_vec(1, 1, 2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn filter_bank_rejects_even_support() {
        assert!(matches!(FilterBank::zeros(1, 1, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn filter_normalization_sets_unit_norms() {
        let mut bank = FilterBank::new(2, 1, 3, (0..18).map(|i| i as f64).collect()).unwrap();
        bank.normalize_filters();
        for norm in bank.filter_norms() {
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_filters_survive_normalization() {
        let mut bank = FilterBank::zeros(1, 1, 3).unwrap();
        bank.normalize_filters();
        assert!(bank.is_zero());
    }

    #[test]
    fn pool_index_validation_catches_out_of_window_codes() {
        let idx = PoolIndex::new(1, 1, 2, 2, vec![4]);
        assert!(matches!(idx.validate(), Err(Error::Corrupt(_))));
    }
}
