//! Spectral instruments for the accelerated proximal-gradient recurrence.
//!
//! On a fixed support sign pattern the solver iteration is linear, so its
//! local behaviour is governed by a 2k x 2k momentum matrix assembled from
//! the contraction block (I - l^-1 G) H^2, where G is the dense Gram operator
//! of the synthesis map, H the diagonal sign matrix, and l the curvature
//! bound. These helpers materialize that matrix at toy dimension, classify
//! the convergence regime from its spectrum, decide when a scalar mode turns
//! oscillatory, and fit empirical rate slopes from recorded cost traces.
//! They are verification instruments, not a production path.

use std::fmt;

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::oracle;
use crate::tensor::FilterBank;

/// Largest state dimension the dense instruments will materialize.
pub const TOY_DIM_LIMIT: usize = 64;

/// Boundary tolerance for spectrum classification.
const TOL: f64 = 1e-8;

/// Convergence regime of the recurrence on a fixed sign pattern.
///
/// I: spectral radius strictly inside the unit circle, linear convergence.
/// II: defective unit eigenvalue (non-trivial Jordan structure at 1).
/// III: simple unit eigenvalue, sublinear drift along its eigenvector.
/// IV: the sign pattern changed while a unit-modulus mode other than 1 is
/// present, so the linearization oscillates between supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    I,
    II,
    III,
    IV,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
            Phase::IV => "IV",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseLabel {
    pub phase: Phase,
    /// Eigenvalue of largest modulus (ties broken by real then imaginary
    /// part, so the label is deterministic).
    pub dominant: Complex<f64>,
    /// Dominant eigenvalue has a nonzero imaginary part.
    pub is_complex_pair: bool,
    /// Set when the spectrum sits within tolerance of a regime boundary
    /// without matching any recognized structure; the phase is then the
    /// nearest regime, not a certain one.
    pub boundary: bool,
}

/// Dense view of the solver's linearized iteration at one sign pattern.
#[derive(Debug, Clone)]
pub struct RecurrenceSnapshot {
    /// 2k x 2k momentum recurrence matrix with blocks (1+beta) B and
    /// -beta B over an identity/zero row, B = (I - l^-1 G) H^2.
    pub w: DMatrix<f64>,
    /// Optional (2k+1)-dimensional affine form. Its linear blocks apply the
    /// clamp after the gradient step (H^2 (I - l^-1 G), same spectrum as the
    /// clamp-first blocks in `w`), and its last column carries the constant
    /// drive, so it reproduces a fixed-sign proximal step exactly.
    pub affine: Option<DMatrix<f64>>,
    /// Diagonal entries of the sign matrix H, each in {-1, 0, +1}.
    pub flag: Vec<i8>,
    pub beta: f64,
    /// Curvature bound the blocks were assembled with, when known.
    pub lipschitz: Option<f64>,
    pub spectrum: Vec<Complex<f64>>,
}

impl RecurrenceSnapshot {
    /// Wrap an already-assembled recurrence matrix; used to probe the
    /// classifier with hand-made spectra. `w` must be square with twice the
    /// flag's dimension.
    pub fn from_matrix(w: DMatrix<f64>, flag: Vec<i8>, beta: f64) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::Shape("recurrence matrix must be square".into()));
        }
        if w.nrows() != 2 * flag.len() {
            return Err(Error::Shape(
                "recurrence matrix must have twice the sign pattern's dimension".into(),
            ));
        }
        validate_flag(&flag)?;
        let spectrum = w.complex_eigenvalues().iter().copied().collect();
        Ok(RecurrenceSnapshot { w, affine: None, flag, beta, lipschitz: None, spectrum })
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectrum.iter().map(|l| l.norm()).fold(0.0, f64::max)
    }

    /// Eigenvalue of largest modulus, ties broken by real then imaginary part.
    pub fn dominant(&self) -> Complex<f64> {
        let mut best = Complex::new(0.0, 0.0);
        let mut have = false;
        for &l in &self.spectrum {
            let better = !have
                || l.norm() > best.norm()
                || (l.norm() == best.norm() && (l.re, l.im) > (best.re, best.im));
            if better {
                best = l;
                have = true;
            }
        }
        best
    }
}

fn validate_flag(flag: &[i8]) -> Result<()> {
    if flag.is_empty() {
        return Err(Error::Argument("sign pattern must be non-empty".into()));
    }
    if flag.iter().any(|&h| !(-1..=1).contains(&h)) {
        return Err(Error::Argument("sign pattern entries must be -1, 0, or +1".into()));
    }
    Ok(())
}

fn check_toy_dim(k: usize) -> Result<()> {
    if k > TOY_DIM_LIMIT {
        return Err(Error::Unsupported(format!(
            "dense recurrence at dimension {k} exceeds the toy limit of {TOY_DIM_LIMIT}"
        )));
    }
    Ok(())
}

/// Contraction block (I - l^-1 G) H^2: clamped coordinates zero the
/// corresponding columns.
fn contraction_block(gram: &DMatrix<f64>, flag: &[i8], lipschitz: f64) -> DMatrix<f64> {
    let k = flag.len();
    let mut b = DMatrix::identity(k, k) - gram * (1.0 / lipschitz);
    for (j, &h) in flag.iter().enumerate() {
        if h == 0 {
            b.column_mut(j).fill(0.0);
        }
    }
    b
}

fn validate_recurrence_args(
    gram: &DMatrix<f64>,
    flag: &[i8],
    beta: f64,
    lipschitz: f64,
) -> Result<()> {
    validate_flag(flag)?;
    if gram.nrows() != gram.ncols() || gram.nrows() != flag.len() {
        return Err(Error::Shape(
            "gram operator must be square with the sign pattern's dimension".into(),
        ));
    }
    let skew = (gram - gram.transpose()).abs().max();
    if skew > 1e-9 * (1.0 + gram.abs().max()) {
        return Err(Error::Argument("gram operator must be symmetric".into()));
    }
    check_toy_dim(flag.len())?;
    if !(lipschitz.is_finite() && lipschitz > 0.0) {
        return Err(Error::Argument("curvature bound must be positive and finite".into()));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Argument("momentum weight must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Characteristic roots of one mode: r^2 - (1+beta) w r + beta w = 0.
fn mode_roots(w: f64, beta: f64) -> [Complex<f64>; 2] {
    let half_sum = 0.5 * (1.0 + beta) * w;
    let disc = w * ((1.0 + beta).powi(2) * w - 4.0 * beta);
    if disc < 0.0 {
        let im = 0.5 * (-disc).sqrt();
        [Complex::new(half_sum, im), Complex::new(half_sum, -im)]
    } else {
        let r = 0.5 * disc.sqrt();
        [Complex::new(half_sum - r, 0.0), Complex::new(half_sum + r, 0.0)]
    }
}

/// Exact spectrum of the assembled recurrence. The characteristic polynomial
/// of the block companion factors over the contraction block's eigenvalues
/// into the mode quadratics. Ordering coordinates as active-then-clamped
/// makes the block (I - l^-1 G) H^2 lower block triangular with diagonal
/// blocks A[active, active] and 0, so its spectrum is the symmetric active
/// principal submatrix's spectrum plus one exact zero per clamped
/// coordinate. Deflating those zeros structurally matters: feeding their
/// eigensolve jitter (about 1e-16) through the quadratic would inflate it to
/// sqrt-sized spurious roots near 1e-8. It also sidesteps a general
/// eigensolver, which fails to converge on the nilpotent matrices heavy
/// clamping produces.
fn recurrence_spectrum(
    gram: &DMatrix<f64>,
    flag: &[i8],
    beta: f64,
    lipschitz: f64,
) -> Vec<Complex<f64>> {
    let k = flag.len();
    let active: Vec<usize> = (0..k).filter(|&i| flag[i] != 0).collect();
    let mut spectrum = Vec::with_capacity(2 * k);
    for _ in 0..k - active.len() {
        spectrum.extend(mode_roots(0.0, beta));
    }
    if !active.is_empty() {
        let a = active.len();
        let sub = DMatrix::from_fn(a, a, |i, j| {
            let (gi, gj) = (active[i], active[j]);
            let g = 0.5 * (gram[(gi, gj)] + gram[(gj, gi)]);
            (if i == j { 1.0 } else { 0.0 }) - g / lipschitz
        });
        let eigen = nalgebra::SymmetricEigen::new(sub);
        for &w in eigen.eigenvalues.iter() {
            spectrum.extend(mode_roots(w, beta));
        }
    }
    spectrum
}

/// Assemble the 2k x 2k momentum recurrence for a dense Gram operator at one
/// sign pattern and momentum weight, and compute its full spectrum.
///
/// With l at least the top eigenvalue of `gram`, the spectral radius never
/// exceeds one and every eigenvalue lies in the closed disk of radius 1/2
/// centered at 1/2 on the real axis. The stacked matrix's operator 2-norm
/// does exceed one whenever the contraction block is nonzero, which is why
/// stability statements here are about the radius, not the norm.
pub fn build_recurrence(
    gram: &DMatrix<f64>,
    flag: &[i8],
    beta: f64,
    lipschitz: f64,
) -> Result<RecurrenceSnapshot> {
    validate_recurrence_args(gram, flag, beta, lipschitz)?;
    let k = flag.len();
    let b = contraction_block(gram, flag, lipschitz);
    let mut w = DMatrix::zeros(2 * k, 2 * k);
    w.view_mut((0, 0), (k, k)).copy_from(&(&b * (1.0 + beta)));
    w.view_mut((0, k), (k, k)).copy_from(&(&b * (-beta)));
    for i in 0..k {
        w[(k + i, i)] = 1.0;
    }
    let spectrum = recurrence_spectrum(gram, flag, beta, lipschitz);
    Ok(RecurrenceSnapshot {
        w,
        affine: None,
        flag: flag.to_vec(),
        beta,
        lipschitz: Some(lipschitz),
        spectrum,
    })
}

/// Materialize the Gram operator of a filter bank's synthesis map on an
/// h x w grid and assemble the recurrence at that dimension.
pub fn build_recurrence_from_bank(
    bank: &FilterBank,
    h: usize,
    w: usize,
    flag: &[i8],
    beta: f64,
    lipschitz: f64,
) -> Result<RecurrenceSnapshot> {
    let k = bank.q * h * w;
    check_toy_dim(k)?;
    if flag.len() != k {
        return Err(Error::Shape(format!(
            "sign pattern has {} entries but the state dimension is {k}",
            flag.len()
        )));
    }
    let a = oracle::dense_synthesis_matrix(bank, h, w);
    let gram = a.transpose() * &a;
    build_recurrence(&gram, flag, beta, lipschitz)
}

/// Assemble the recurrence together with its affine form. `drive` is the
/// constant gradient term (the analyzed input, D^T y) and `thresholds` the
/// per-coordinate shrink weights; both live at state dimension. The affine
/// matrix advances (w_next, w_curr, 1) exactly as one fixed-sign proximal
/// step with momentum `beta` would, provided the step keeps the signs in
/// `flag`.
pub fn build_affine_recurrence(
    gram: &DMatrix<f64>,
    flag: &[i8],
    beta: f64,
    lipschitz: f64,
    drive: &[f64],
    thresholds: &[f64],
) -> Result<RecurrenceSnapshot> {
    let mut snap = build_recurrence(gram, flag, beta, lipschitz)?;
    let k = flag.len();
    if drive.len() != k || thresholds.len() != k {
        return Err(Error::Shape("drive and thresholds must be at state dimension".into()));
    }
    if thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::Argument("shrink thresholds must be nonnegative and finite".into()));
    }
    let tau = 1.0 / lipschitz;
    // Clamp-last block H^2 (I - tau G): zero rows, not columns.
    let mut b = DMatrix::identity(k, k) - gram * tau;
    for (i, &h) in flag.iter().enumerate() {
        if h == 0 {
            b.row_mut(i).fill(0.0);
        }
    }
    let mut s = DMatrix::zeros(2 * k + 1, 2 * k + 1);
    s.view_mut((0, 0), (k, k)).copy_from(&(&b * (1.0 + beta)));
    s.view_mut((0, k), (k, k)).copy_from(&(&b * (-beta)));
    for (i, &h) in flag.iter().enumerate() {
        if h != 0 {
            s[(i, 2 * k)] = tau * (drive[i] - thresholds[i] * h as f64);
        }
        s[(k + i, i)] = 1.0;
    }
    s[(2 * k, 2 * k)] = 1.0;
    snap.affine = Some(s);
    Ok(snap)
}

/// Label the convergence regime of a snapshot's spectrum.
///
/// Checked in order: a changed sign pattern with a unit-modulus mode other
/// than 1 is Phase IV; a defective unit eigenvalue (geometric multiplicity
/// below algebraic, by a rank test on W - I) is Phase II; a simple unit
/// eigenvalue is Phase III; a radius strictly inside the unit circle is
/// Phase I. Anything else touches the boundary without recognized structure
/// (for example a stable-sign unit-modulus complex pair, or a repeated but
/// diagonalizable unit eigenvalue) and is labeled with the marginal Phase
/// III plus the `boundary` flag; assembled recurrences with a correct
/// curvature bound never land outside the closed unit disk.
pub fn classify_phase(snap: &RecurrenceSnapshot, flag_changed: bool) -> PhaseLabel {
    let dominant = snap.dominant();
    let is_complex_pair = dominant.im.abs() > TOL;
    let rho = snap.spectral_radius();
    let unit_mod_non_unit = snap
        .spectrum
        .iter()
        .any(|l| (l.norm() - 1.0).abs() <= TOL && (l - Complex::new(1.0, 0.0)).norm() > TOL);
    let unit_count = snap
        .spectrum
        .iter()
        .filter(|l| (*l - Complex::new(1.0, 0.0)).norm() <= TOL)
        .count();

    let (phase, boundary) = if flag_changed && unit_mod_non_unit {
        (Phase::IV, false)
    } else if unit_count > 0 {
        let dim = snap.w.nrows();
        let geometric = dim - (&snap.w - DMatrix::identity(dim, dim)).rank(TOL);
        if geometric < unit_count {
            (Phase::II, false)
        } else if unit_count == 1 {
            (Phase::III, false)
        } else {
            (Phase::III, true)
        }
    } else if rho < 1.0 - TOL {
        (Phase::I, false)
    } else {
        (Phase::III, true)
    };
    PhaseLabel { phase, dominant, is_complex_pair, boundary }
}

/// Root character of one scalar mode of the momentum recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootKind {
    RealRoots,
    ComplexPair,
}

/// The 2 x 2 block governing a single mode with one-step weight `wprime`:
/// rows [(1+beta) w', -beta w'] over [1, 0]. Its eigenvalues are the roots
/// of r^2 - (1+beta) w' r + beta w' = 0.
pub fn companion_block(wprime_radius: f64, beta: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        2,
        2,
        &[(1.0 + beta) * wprime_radius, -beta * wprime_radius, 1.0, 0.0],
    )
}

/// Decide whether the scalar mode's characteristic roots form a complex
/// conjugate pair, by the sign of the discriminant
/// w' ((1+beta)^2 w' - 4 beta).
///
/// Momentum beyond the one-step radius always produces a complex pair for
/// w' in (0, 1), but the converse fails: the pair appears already at
/// beta = (1 - s) / (1 + s) with s = sqrt(1 - w'), which is below w'. At
/// beta = w' the pair's modulus sqrt(beta w') crosses the one-step radius
/// itself, so past that point the inertial mode decays more slowly than the
/// plain one.
pub fn oscillation_test(wprime_radius: f64, beta: f64) -> Result<RootKind> {
    if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
        return Err(Error::Argument("momentum weight must lie in [0, 1)".into()));
    }
    if !(wprime_radius.is_finite() && wprime_radius >= 0.0) {
        return Err(Error::Argument("one-step radius must be nonnegative and finite".into()));
    }
    let disc = wprime_radius * ((1.0 + beta).powi(2) * wprime_radius - 4.0 * beta);
    Ok(if disc < 0.0 { RootKind::ComplexPair } else { RootKind::RealRoots })
}

/// Least-squares slope of log(cost - optimum) against log(iteration) over
/// the inclusive iteration window. `cost_trace[m]` is the cost after m
/// iterations, index 0 being the starting point.
pub fn measure_rate(cost_trace: &[f64], optimum: f64, window: (usize, usize)) -> Result<f64> {
    let (lo, hi) = window;
    if lo < 1 || hi <= lo {
        return Err(Error::Argument(
            "rate window must satisfy 1 <= start < end (log scale excludes iteration 0)".into(),
        ));
    }
    if hi >= cost_trace.len() {
        return Err(Error::Argument(format!(
            "rate window ends at {hi} but the trace has {} entries",
            cost_trace.len()
        )));
    }
    let n = (hi - lo + 1) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for m in lo..=hi {
        let gap = cost_trace[m] - optimum;
        if !(gap > 0.0) {
            return Err(Error::Argument(format!(
                "nonpositive cost gap at iteration {m}; the optimum must strictly lower-bound \
                 the windowed trace"
            )));
        }
        let x = (m as f64).ln();
        let y = gap.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom <= 0.0 {
        return Err(Error::Argument("rate window is too narrow to fit a slope".into()));
    }
    Ok((n * sxy - sx * sy) / denom)
}

/// One row of the phase timeline emitted alongside a recorded solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTimelineRow {
    pub iteration: usize,
    pub phase: Phase,
    pub rho: f64,
    pub beta: f64,
    pub flag_changed: bool,
}

/// Classify every iteration of a recorded solve against the idealized dense
/// recurrence. `sign_trace` holds the support signs starting at the initial
/// point (one more entry than `betas`); row m uses the signs after iterate
/// m, whether they changed from iterate m-1, and the momentum weight in
/// force after accepting iterate m.
pub fn phase_timeline(
    gram: &DMatrix<f64>,
    lipschitz: f64,
    betas: &[f64],
    sign_trace: &[Vec<i8>],
) -> Result<Vec<PhaseTimelineRow>> {
    if sign_trace.len() != betas.len() + 1 {
        return Err(Error::Shape(
            "sign trace must have exactly one more entry than the momentum trace".into(),
        ));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for m in 1..sign_trace.len() {
        let flag = &sign_trace[m];
        let flag_changed = flag != &sign_trace[m - 1];
        let beta = betas[m - 1];
        let snap = build_recurrence(gram, flag, beta, lipschitz)?;
        let label = classify_phase(&snap, flag_changed);
        rows.push(PhaseTimelineRow {
            iteration: m,
            phase: label.phase,
            rho: snap.spectral_radius(),
            beta,
            flag_changed,
        });
    }
    Ok(rows)
}

/// Render timeline rows as CSV with a fixed header and fixed float
/// formatting, so identical runs serialize byte-identically.
pub fn phase_timeline_csv(rows: &[PhaseTimelineRow]) -> String {
    let mut out = String::from("iteration,phase,rho,beta,flag_changed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.12e},{:.12e},{}\n",
            r.iteration, r.phase, r.rho, r.beta, r.flag_changed
        ));
    }
    out
}
