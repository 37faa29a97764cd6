//! Independent reference routes: naive re-implementations used to certify the
//! fast paths. The benchmark command leans on `coordinate_descent_lasso` for
//! certified optima; the test suites use everything here as second opinions.
//! Nothing in this module may call into `ops` or the solvers — the point is
//! that results are reached through different code.

use nalgebra::{DMatrix, DVector};

use crate::tensor::{FilterBank, Tensor4};

/// Per-output gather form of 'same' cross-correlation synthesis. Quadruple
/// loop, no slicing tricks; shapes must already be consistent.
pub fn conv_synthesize_reference(bank: &FilterBank, states: &Tensor4) -> Tensor4 {
    assert_eq!(states.c, bank.q);
    let (n, _, h, w) = states.shape();
    let p = (bank.f as i64 - 1) / 2;
    let mut out = Tensor4::zeros(n, bank.c, h, w);
    for bn in 0..n {
        for cc in 0..bank.c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = 0.0;
                    for cq in 0..bank.q {
                        for dy in 0..bank.f as i64 {
                            for dx in 0..bank.f as i64 {
                                let sy = y + dy - p;
                                let sx = x + dx - p;
                                if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                acc += bank.at(cq, cc, dy as usize, dx as usize)
                                    * states.at(bn, cq, sy as usize, sx as usize);
                            }
                        }
                    }
                    *out.at_mut(bn, cc, y as usize, x as usize) = acc;
                }
            }
        }
    }
    out
}

/// Materialized Toeplitz-form synthesis operator: maps a flattened state
/// vector (channel-major, `q*h*w`) to a flattened input vector (`c*h*w`).
/// Built by index arithmetic alone.
pub fn dense_synthesis_matrix(bank: &FilterBank, h: usize, w: usize) -> DMatrix<f64> {
    let p = (bank.f as i64 - 1) / 2;
    let mut m = DMatrix::zeros(bank.c * h * w, bank.q * h * w);
    for cc in 0..bank.c {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let row = (cc * h + y as usize) * w + x as usize;
                for cq in 0..bank.q {
                    for dy in 0..bank.f as i64 {
                        for dx in 0..bank.f as i64 {
                            let sy = y + dy - p;
                            let sx = x + dx - p;
                            if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            let col = (cq * h + sy as usize) * w + sx as usize;
                            m[(row, col)] += bank.at(cq, cc, dy as usize, dx as usize);
                        }
                    }
                }
            }
        }
    }
    m
}

/// Largest eigenvalue of D D^T composed through the dense materialization,
/// i.e. the squared operator norm of synthesis, by symmetric eigensolve.
pub fn dense_operator_norm_sq(bank: &FilterBank, h: usize, w: usize) -> f64 {
    let a = dense_synthesis_matrix(bank, h, w);
    let gram = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max)
}

/// Cyclic coordinate descent for
///   min_x 0.5*||y - A x||^2 + sum_k t_k |x_k|
/// run until the largest coordinate move falls below `tol` or `max_sweeps`
/// sweeps complete. Exact coordinate minimization, so the result certifies
/// optima for the proximal solvers (different algorithm, different code).
pub fn coordinate_descent_lasso(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    t: &DVector<f64>,
    tol: f64,
    max_sweeps: usize,
) -> DVector<f64> {
    let k = a.ncols();
    let col_sq: Vec<f64> = (0..k).map(|j| a.column(j).norm_squared()).collect();
    let mut x = DVector::zeros(k);
    let mut residual = y.clone(); // y - A x
    for _ in 0..max_sweeps {
        let mut max_move = 0.0f64;
        for j in 0..k {
            if col_sq[j] == 0.0 {
                continue;
            }
            let old = x[j];
            // rho = A_j^T (residual + A_j * old)
            let rho = a.column(j).dot(&residual) + col_sq[j] * old;
            let new = soft(rho, t[j]) / col_sq[j];
            if new != old {
                residual.axpy(old - new, &a.column(j).into_owned(), 1.0);
                x[j] = new;
                max_move = max_move.max((new - old).abs());
            }
        }
        if max_move < tol {
            break;
        }
    }
    x
}

/// Cost functional matching `coordinate_descent_lasso`.
pub fn lasso_cost(a: &DMatrix<f64>, y: &DVector<f64>, t: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let r = y - a * x;
    0.5 * r.norm_squared() + t.iter().zip(x.iter()).map(|(tk, xk)| tk * xk.abs()).sum::<f64>()
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Central finite differences of a scalar function of a flat vector.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Exhaustive scalar minimizer over a regular grid [lo, hi] with the given
/// step; returns the best grid point.
pub fn grid_search_min(f: &mut dyn FnMut(f64) -> f64, lo: f64, hi: f64, step: f64) -> (f64, f64) {
    assert!(step > 0.0 && hi > lo);
    let mut best_x = lo;
    let mut best_f = f(lo);
    let steps = ((hi - lo) / step).round() as usize;
    for i in 1..=steps {
        let x = lo + i as f64 * step;
        let v = f(x);
        if v < best_f {
            best_f = v;
            best_x = x;
        }
    }
    (best_x, best_f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_descent_solves_separable_problem() {
        // A = I: solution is the soft threshold of y.
        let a = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![2.0, -3.0, 0.1]);
        let t = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        let x = coordinate_descent_lasso(&a, &y, &t, 1e-14, 100);
        let want = [1.5, -2.5, 0.0];
        for (a, b) in x.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn coordinate_descent_reaches_stationarity_on_random_instance() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut r = StdRng::seed_from_u64(11);
        let a = DMatrix::from_fn(12, 8, |_, _| r.gen_range(-1.0..1.0));
        let y = DVector::from_fn(12, |_, _| r.gen_range(-1.0..1.0));
        let t = DVector::from_element(8, 0.15);
        let x = coordinate_descent_lasso(&a, &y, &t, 1e-13, 10_000);
        // Subgradient optimality: |A_j^T (y - A x)| <= t_j (+slack), with
        // equality at t_j * sign(x_j) on the support.
        let res = &y - &a * &x;
        for j in 0..8 {
            let g = a.column(j).dot(&res);
            if x[j] == 0.0 {
                assert!(g.abs() <= t[j] + 1e-8, "coord {j}: |{g}| > {}", t[j]);
            } else {
                assert!((g - t[j] * x[j].signum()).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn fd_gradient_matches_quadratic() {
        let mut f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let g = fd_gradient(&mut f, &[1.0, -2.0, 3.0], 1e-5);
        for (gi, xi) in g.iter().zip([1.0, -2.0, 3.0]) {
            assert!((gi - xi).abs() <= 1e-9);
        }
    }

    #[test]
    fn grid_search_finds_parabola_minimum() {
        let mut f = |x: f64| (x - 0.37f64).powi(2);
        let (x, _) = grid_search_min(&mut f, -1.0, 1.0, 1e-3);
        assert!((x - 0.37).abs() <= 1e-3);
    }
}
