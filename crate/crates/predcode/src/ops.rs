//! Solver primitives: Toeplitz-form convolution (synthesis and adjoint),
//! 2x2 max pooling/unpooling, soft thresholding, L-inf projection, and
//! operator-norm estimation by power iteration.
//!
//! Boundary convention: synthesis is 'same' cross-correlation with symmetric
//! zero padding (odd filters), so stage outputs keep the stimulus spatial
//! dims; analysis is its exact adjoint. Pooling windows are non-overlapping
//! 2x2 with the first row-major cell winning ties.

use crate::error::{Error, Result};
use crate::tensor::{FilterBank, PoolIndex, Tensor4};

/// D^T gamma: each state channel is filtered and the results are summed into
/// the input space. Output shape `(n, bank.c, h, w)`.
pub fn conv_synthesize(bank: &FilterBank, states: &Tensor4) -> Result<Tensor4> {
    if states.c != bank.q {
        return Err(Error::Shape(format!(
            "states carry {} channels but bank has {} filters",
            states.c, bank.q
        )));
    }
    let (n, _, h, w) = states.shape();
    let p = (bank.f - 1) / 2;
    let mut out = Tensor4::zeros(n, bank.c, h, w);
    for bn in 0..n {
        for cq in 0..bank.q {
            let st = states.plane(bn, cq);
            for cc in 0..bank.c {
                let dst = out.plane_mut(bn, cc);
                for dy in 0..bank.f {
                    // Source row sy = y + dy - p stays in [0, h).
                    let y_lo = p.saturating_sub(dy);
                    let y_hi = (h + p).saturating_sub(dy).min(h);
                    for dx in 0..bank.f {
                        let tap = bank.at(cq, cc, dy, dx);
                        if tap == 0.0 {
                            continue;
                        }
                        let x_lo = p.saturating_sub(dx);
                        let x_hi = (w + p).saturating_sub(dx).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let sy = y + dy - p;
                            let src = &st[sy * w + (x_lo + dx - p)..sy * w + (x_hi + dx - p)];
                            let d = &mut dst[y * w + x_lo..y * w + x_hi];
                            for (dv, sv) in d.iter_mut().zip(src) {
                                *dv += tap * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of `conv_synthesize`:
/// `<conv_analyze(D, r), g> == <r, conv_synthesize(D, g)>` for all r, g.
/// Output shape `(n, bank.q, h, w)`.
pub fn conv_analyze(bank: &FilterBank, residual: &Tensor4) -> Result<Tensor4> {
    if residual.c != bank.c {
        return Err(Error::Shape(format!(
            "residual carries {} channels but bank expects {}",
            residual.c, bank.c
        )));
    }
    let (n, _, h, w) = residual.shape();
    let p = (bank.f - 1) / 2;
    let mut out = Tensor4::zeros(n, bank.q, h, w);
    for bn in 0..n {
        for cq in 0..bank.q {
            let dst = out.plane_mut(bn, cq);
            for cc in 0..bank.c {
                let src_plane = residual.plane(bn, cc);
                for dy in 0..bank.f {
                    // Source row sy = y - dy + p stays in [0, h).
                    let y_lo = dy.saturating_sub(p);
                    let y_hi = (h + dy).saturating_sub(p).min(h);
                    for dx in 0..bank.f {
                        let tap = bank.at(cq, cc, dy, dx);
                        if tap == 0.0 {
                            continue;
                        }
                        let x_lo = dx.saturating_sub(p);
                        let x_hi = (w + dx).saturating_sub(p).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let sy = y + p - dy;
                            let src =
                                &src_plane[sy * w + (x_lo + p - dx)..sy * w + (x_hi + p - dx)];
                            let d = &mut dst[y * w + x_lo..y * w + x_hi];
                            for (dv, sv) in d.iter_mut().zip(src) {
                                *dv += tap * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping 2x2 max pooling. Ties go to the first cell in row-major
/// scan order, which keeps the index deterministic across platforms.
pub fn max_pool(x: &Tensor4) -> Result<(Tensor4, PoolIndex)> {
    let (n, c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("pooling needs even spatial dims, got {h}x{w}")));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(n, c, ph, pw);
    let mut codes = vec![0u8; n * c * ph * pw];
    let mut k = 0;
    for bn in 0..n {
        for cc in 0..c {
            let src = x.plane(bn, cc);
            let dst = out.plane_mut(bn, cc);
            for py in 0..ph {
                for px in 0..pw {
                    let base = (2 * py) * w + 2 * px;
                    let window = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0usize;
                    for i in 1..4 {
                        if window[i] > window[best] {
                            best = i;
                        }
                    }
                    dst[py * pw + px] = window[best];
                    codes[k] = best as u8;
                    k += 1;
                }
            }
        }
    }
    Ok((out, PoolIndex::new(n, c, h, w, codes)))
}

/// Scatter pooled values back to their recorded argmax cells; everything else
/// is zero, so `max_pool(max_unpool(p, idx)).0 == p` exactly.
pub fn max_unpool(p: &Tensor4, idx: &PoolIndex) -> Result<Tensor4> {
    idx.validate()?;
    let (ph, pw) = idx.pooled_dims();
    if p.n != idx.n || p.c != idx.c || p.h != ph || p.w != pw {
        return Err(Error::Shape(format!(
            "pooled tensor {:?} does not match index dims ({}, {}, {}, {})",
            p.shape(),
            idx.n,
            idx.c,
            ph,
            pw
        )));
    }
    let mut out = Tensor4::zeros(idx.n, idx.c, idx.h, idx.w);
    let w = idx.w;
    for bn in 0..idx.n {
        for cc in 0..idx.c {
            let src = p.plane(bn, cc);
            let dst = out.plane_mut(bn, cc);
            for py in 0..ph {
                for px in 0..pw {
                    let code = idx.code(bn, cc, py, px) as usize;
                    let (dy, dx) = (code / 2, code % 2);
                    dst[(2 * py + dy) * w + 2 * px + dx] = src[py * pw + px];
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise soft threshold: sign(x) * max(|x| - tau, 0).
pub fn shrink(x: &Tensor4, tau: &Tensor4) -> Result<Tensor4> {
    if !x.same_shape(tau) {
        return Err(Error::Shape("threshold tensor shape differs from input".into()));
    }
    if tau.data().iter().any(|&t| t < 0.0) {
        return Err(Error::Argument("soft threshold weights must be nonnegative".into()));
    }
    let mut out = x.clone();
    shrink_into(out.data_mut(), tau.data());
    Ok(out)
}

/// In-place slice form used by the solver inner loop; `tau` must already be
/// validated nonnegative.
pub(crate) fn shrink_into(x: &mut [f64], tau: &[f64]) {
    for (v, &t) in x.iter_mut().zip(tau) {
        let a = v.abs() - t;
        *v = if a > 0.0 { v.signum() * a } else { 0.0 };
    }
}

/// Gradient step x - tau * g without mutating the inputs.
pub(crate) fn step_from(x: &Tensor4, g: &Tensor4, tau: f64) -> Tensor4 {
    let mut out = x.clone();
    out.add_scaled(-tau, g);
    out
}

/// Projection onto the unit L-inf ball: elementwise clamp to [-1, 1].
pub fn proj_linf(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    out
}

/// Largest eigenvalue of v -> conv_analyze(D, conv_synthesize(D, v)), i.e.
/// the squared operator norm of synthesis, via power iteration on a `dim_h x
/// dim_w` grid. Seeded from the normalized all-ones vector; stops when the
/// Rayleigh quotient moves by less than 1e-6 relative or after 200 rounds.
pub fn estimate_lipschitz(bank: &FilterBank, h: usize, w: usize) -> Result<f64> {
    if bank.is_zero() {
        return Err(Error::Degenerate("cannot estimate operator norm of a zero bank".into()));
    }
    let mut v = Tensor4::zeros(1, bank.q, h, w);
    let norm0 = (v.len() as f64).sqrt();
    v.fill(1.0 / norm0);
    let mut quotients: Vec<f64> = Vec::new();
    for _ in 0..200 {
        let av = conv_analyze(bank, &conv_synthesize(bank, &v)?)?;
        let quotient = av.dot(&v);
        let norm = av.norm_sq().sqrt();
        if norm == 0.0 {
            // Seed landed in the null space; perturb deterministically.
            let mut seeded = Tensor4::zeros(1, bank.q, h, w);
            for (i, x) in seeded.data_mut().iter_mut().enumerate() {
                *x = ((i % 7) as f64 - 3.0) / 3.0;
            }
            v = seeded;
            let n = v.norm_sq().sqrt();
            v.scale(1.0 / n);
            continue;
        }
        quotients.push(quotient);
        let mut next = av;
        next.scale(1.0 / norm);
        let mut moved = 0.0f64;
        for (a, b) in next.data().iter().zip(v.data()) {
            moved += (a - b) * (a - b);
        }
        v = next;
        if moved.sqrt() < 1e-6 {
            break;
        }
    }
    let lambda = extrapolated_limit(&quotients);
    if lambda <= 0.0 {
        return Err(Error::Degenerate("power iteration found no positive eigenvalue".into()));
    }
    Ok(lambda)
}

/// Rayleigh quotients of a power iteration approach the top eigenvalue
/// geometrically from below; an Aitken step on the last three values removes
/// most of the remaining bias when the gap is small. Falls back to the last
/// quotient when the sequence is short or the extrapolation is not sane.
fn extrapolated_limit(q: &[f64]) -> f64 {
    let n = q.len();
    if n == 0 {
        return 0.0;
    }
    let last = q[n - 1];
    if n < 3 {
        return last;
    }
    let (a, b, c) = (q[n - 3], q[n - 2], q[n - 1]);
    let denom = c - 2.0 * b + a;
    if denom.abs() <= 1e-300 {
        return last;
    }
    let extrapolated = c - (c - b) * (c - b) / denom;
    // The quotient underestimates for a PSD operator; accept only a small
    // upward correction.
    if extrapolated >= last && extrapolated <= last * (1.0 + 1e-2) {
        extrapolated
    } else {
        last
    }
}
