//! The weak-form estimators.
//!
//! [`ols_solve`] minimizes `||G w - b||` directly. Because the observations
//! enter both `G` and `b`, that regression is an errors-in-variables problem;
//! [`irls`] refines it by alternating between a first-order residual
//! covariance `C = (1 - alpha) L_w L_w^T + alpha I` built from the current
//! parameters and a whitened least-squares solve, until the iterates reach a
//! fixed point, the iteration cap, or the whitened residual stops looking
//! normal (Shapiro-Wilk).
//!
//! `L_w` is the linearization of the residual in the measurement noise:
//! `L_w = [mat(w)^T (x) Phi] grad(Theta) P + [I_d (x) Phid]`, with `P` the
//! vec-transpose permutation. Its `(i, l)` block reduces to
//! `Phi diag(dF_i/du_l(U_m)) + delta_il Phid`, which is how it is assembled.

use crate::stats::{fd_weights, shapiro_wilk};
use crate::testfn::TestBasis;
use crate::types::{
    Dataset, EquationMask, EstimationResult, FeatureLibrary, ParameterVector, Result, StopReason,
    WendyError,
};
use crate::weakform::{quadrature_weights, WeakSystem};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

/// IRLS hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    /// Covariance relaxation in `[0, 1]`: `C = (1 - alpha) L L^T + alpha I`.
    pub alpha: f64,
    /// Fixed-point tolerance on the relative parameter change.
    pub tau_fp: f64,
    /// Shapiro-Wilk p-value threshold.
    pub tau_sw: f64,
    /// Iterations before the Shapiro-Wilk check activates.
    pub n0: usize,
    pub max_its: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            alpha: 1e-10,
            tau_fp: 1e-6,
            tau_sw: 1e-4,
            n0: 10,
            max_its: 100,
        }
    }
}

/// High-order convolution filter for measurement-noise estimation: centered
/// finite-difference weights of derivative order 6 over 15 equally spaced
/// points, normalized to unit l2 norm. Annihilates polynomials up to degree 5.
#[derive(Debug, Clone)]
pub struct NoiseFilter {
    weights: Vec<f64>,
}

impl NoiseFilter {
    pub fn order6() -> Self {
        let stencil: Vec<f64> = (0..15).map(|i| i as f64 - 7.0).collect();
        let mut weights = fd_weights(6, &stencil, 0.0);
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        for w in &mut weights {
            *w /= norm;
        }
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for NoiseFilter {
    fn default() -> Self {
        Self::order6()
    }
}

/// Estimate the noise standard deviation by convolving each state with the
/// filter (valid mode) and taking the Frobenius norm over the
/// `N_valid * d` outputs. Unit filter norm makes the estimate unbiased in
/// variance for i.i.d. noise.
pub fn estimate_sigma(ds: &Dataset, filter: &NoiseFilter) -> Result<f64> {
    let f = filter.weights();
    let n = ds.grid.n_samples();
    if n < f.len() {
        return Err(WendyError::TooFewSamples {
            got: n,
            need: f.len(),
        });
    }
    let n_valid = n - f.len() + 1;
    let d = ds.dim();
    let mut sumsq = 0.0;
    for col in 0..d {
        for t in 0..n_valid {
            let mut acc = 0.0;
            for (i, &w) in f.iter().enumerate() {
                acc += w * ds.u[(t + i, col)];
            }
            sumsq += acc * acc;
        }
    }
    Ok((sumsq / (n_valid * d) as f64).sqrt())
}

/// The vec-transpose permutation `P` with `P vec(E) = vec(E^T)` for
/// `n_rows x d` matrices `E`. A 0/1 matrix with one 1 per row and column.
pub fn vec_transpose_permutation(n_rows: usize, d: usize) -> DMatrix<f64> {
    let sz = n_rows * d;
    let mut p = DMatrix::zeros(sz, sz);
    for m in 0..n_rows {
        for i in 0..d {
            p[(m * d + i, i * n_rows + m)] = 1.0;
        }
    }
    p
}

/// Precomputed pieces of the noise-to-residual map that do not depend on `w`.
struct LBuilder {
    /// Per state-derivative `l`: `(M+1) x J` table of `df_j/du_l (U_m)`.
    grad_tables: Vec<DMatrix<f64>>,
    phi_q: DMatrix<f64>,
    phi_dot_q: DMatrix<f64>,
}

impl LBuilder {
    fn new(ds: &Dataset, lib: &FeatureLibrary, sys: &WeakSystem) -> Self {
        Self {
            grad_tables: lib.grad_tables(&ds.u),
            phi_q: sys.phi_q.clone(),
            phi_dot_q: sys.phi_dot_q.clone(),
        }
    }

    /// `L_w`, `(K d) x ((M+1) d)`, from the full `J x d` coefficient matrix.
    fn build(&self, w_mat: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.phi_q.nrows();
        let n = self.phi_q.ncols();
        let d = self.grad_tables.len();
        let mut l = DMatrix::zeros(k * d, n * d);
        for i in 0..d {
            let w_col = w_mat.column(i);
            for (ll, table) in self.grad_tables.iter().enumerate() {
                // dF_i/du_l at every timepoint
                let dil = table * w_col;
                let diag = i == ll;
                for m in 0..n {
                    let scale = dil[m];
                    let col = ll * n + m;
                    for r in 0..k {
                        let mut v = self.phi_q[(r, m)] * scale;
                        if diag {
                            v += self.phi_dot_q[(r, m)];
                        }
                        l[(i * k + r, col)] = v;
                    }
                }
            }
        }
        l
    }
}

/// First-order map from measurement noise to the weak residual, at parameters
/// `w`. Quadrature weights are applied to the basis internally, matching
/// [`crate::weakform::assemble`].
pub fn build_l(
    w: &ParameterVector,
    ds: &Dataset,
    lib: &FeatureLibrary,
    basis: &TestBasis,
    mask: &EquationMask,
) -> Result<DMatrix<f64>> {
    let w_mat = mask.embed(w)?;
    let q = quadrature_weights(ds.grid.m(), ds.grid.dt());
    let scale_cols = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            col *= q[c];
        }
        out
    };
    let builder = LBuilder {
        grad_tables: lib.grad_tables(&ds.u),
        phi_q: scale_cols(&basis.phi),
        phi_dot_q: scale_cols(&basis.phi_dot),
    };
    Ok(builder.build(&w_mat))
}

/// Least squares through a rank-revealing column-pivoted QR; never forms an
/// explicit inverse.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, cols) = a.shape();
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let r00 = r[(0, 0)].abs();
    let tol = 10.0 * rows.max(cols) as f64 * f64::EPSILON * r00;
    let rank = (0..r.nrows().min(cols))
        .take_while(|&i| r[(i, i)].abs() > tol)
        .count();
    if rank < cols || rows < cols {
        // identify the original indices of the non-pivoted (suspect) columns
        let mut idx = DMatrix::from_fn(cols, 1, |i, _| i as f64);
        qr.p().permute_rows(&mut idx);
        let columns: Vec<usize> = (rank..cols).map(|i| idx[(i, 0)] as usize).collect();
        return Err(WendyError::RankDeficientG {
            rank,
            cols,
            columns,
        });
    }
    let qtb = qr.q().tr_mul(b);
    let mut x = r
        .solve_upper_triangular(&qtb)
        .ok_or(WendyError::RankDeficientG {
            rank,
            cols,
            columns: vec![],
        })?;
    qr.p().inv_permute_rows(&mut x);
    Ok(x)
}

/// Weak-form ordinary least squares.
pub fn ols_solve(sys: &WeakSystem) -> Result<ParameterVector> {
    Ok(ParameterVector::from_column(lstsq(&sys.g, &sys.b)?))
}

fn standardized(v: &DVector<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| (x - mean) / sd).collect()
}

fn sc_eval(
    w_next: &ParameterVector,
    w_prev: &ParameterVector,
    whitened_residual: &DVector<f64>,
    n: usize,
    opts: &IrlsOptions,
) -> (bool, Option<StopReason>) {
    let prev_norm = w_prev.as_vector().norm();
    let diff = (w_next.as_vector() - w_prev.as_vector()).norm();
    let rel = if prev_norm > 0.0 {
        diff / prev_norm
    } else {
        diff
    };
    if rel <= opts.tau_fp {
        return (false, Some(StopReason::FixedPoint));
    }
    if n >= opts.max_its {
        return (false, Some(StopReason::MaxIterations));
    }
    if n > opts.n0 {
        let p = match shapiro_wilk(&standardized(whitened_residual)) {
            Ok(r) => r.p,
            Err(_) => 1.0,
        };
        if p <= opts.tau_sw {
            return (false, Some(StopReason::ShapiroWilkReject));
        }
    }
    (true, None)
}

/// The stopping criterion of the IRLS loop: continue iff the relative step
/// exceeds `tau_fp`, the iteration count is below `max_its`, and (after `n0`
/// iterations) the standardized whitened residual passes Shapiro-Wilk at
/// `tau_sw`.
pub fn stopping_criteria(
    w_next: &ParameterVector,
    w_prev: &ParameterVector,
    whitened_residual: &DVector<f64>,
    n: usize,
    opts: &IrlsOptions,
) -> bool {
    sc_eval(w_next, w_prev, whitened_residual, n, opts).0
}

fn relaxed_covariance(l: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let mut c = l * l.transpose();
    c *= 1.0 - alpha;
    for i in 0..c.nrows() {
        c[(i, i)] += alpha;
    }
    c
}

/// Iteratively reweighted least squares with the first-order
/// errors-in-variables covariance.
pub fn irls(
    sys: &WeakSystem,
    ds: &Dataset,
    lib: &FeatureLibrary,
    opts: &IrlsOptions,
) -> Result<EstimationResult> {
    let sigma_hat = estimate_sigma(ds, &NoiseFilter::order6())?;
    let mut w = ols_solve(sys)?;
    let builder = LBuilder::new(ds, lib, sys);

    let mut n_iters = 0usize;
    let (stop, c_hat, residual) = loop {
        let w_mat = sys.mask.embed(&w)?;
        let l = builder.build(&w_mat);
        let mut c = relaxed_covariance(&l, opts.alpha);
        let chol = match nalgebra::Cholesky::new(c.clone()) {
            Some(ch) => ch,
            None => {
                // alpha too small for this system; retry once with a heavier
                // relaxation before giving up
                c = relaxed_covariance(&l, 1e-6);
                nalgebra::Cholesky::new(c.clone()).ok_or(WendyError::CholeskyFailure)?
            }
        };
        let lfac = chol.l();
        let g_t = lfac
            .solve_lower_triangular(&sys.g)
            .ok_or(WendyError::CholeskyFailure)?;
        let b_t = lfac
            .solve_lower_triangular(&sys.b)
            .ok_or(WendyError::CholeskyFailure)?;
        let w_next = ParameterVector::from_column(lstsq(&g_t, &b_t)?);
        let resid = &g_t * w_next.as_vector() - &b_t;

        n_iters += 1;
        let (cont, reason) = sc_eval(&w_next, &w, &resid, n_iters, opts);
        w = w_next;
        if !cont {
            break (
                reason.expect("a failing clause names its reason"),
                c,
                resid,
            );
        }
    };

    let (s, stdx) = parameter_covariance(sys, &c_hat, sigma_hat)?;
    Ok(EstimationResult {
        w_hat: w,
        c_hat,
        sigma_hat,
        s,
        stdx,
        n_iters,
        stop_reason: stop,
        residual,
    })
}

/// Parameter covariance `S = sigma^2 (G^T G)^{-1} G^T C G (G^T G)^{-1}` and the
/// per-parameter standard deviations. `S` is symmetrized to remove rounding
/// asymmetry.
pub fn parameter_covariance(
    sys: &WeakSystem,
    c_hat: &DMatrix<f64>,
    sigma_hat: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (rows, cols) = sys.g.shape();
    let qr = sys.g.clone().col_piv_qr();
    let r = qr.r();
    let r00 = r[(0, 0)].abs();
    let tol = 10.0 * rows.max(cols) as f64 * f64::EPSILON * r00;
    let rank = (0..r.nrows().min(cols))
        .take_while(|&i| r[(i, i)].abs() > tol)
        .count();
    if rank < cols {
        return Err(WendyError::RankDeficientG {
            rank,
            cols,
            columns: vec![],
        });
    }
    // pseudo-inverse G+ = P R^{-1} Q^T, applied to C from both sides
    let qt = qr.q().transpose();
    let mut pinv = r
        .solve_upper_triangular(&qt)
        .ok_or(WendyError::RankDeficientG {
            rank,
            cols,
            columns: vec![],
        })?;
    qr.p().inv_permute_rows(&mut pinv);
    let s_raw = &pinv * c_hat * pinv.transpose() * (sigma_hat * sigma_hat);
    let s = (&s_raw + s_raw.transpose()) * 0.5;
    let stdx = DVector::from_fn(cols, |i, _| s[(i, i)].max(0.0).sqrt());
    Ok((s, stdx))
}

/// Per-parameter two-sided normal confidence intervals
/// `w_j +/- z_(1+level)/2 * stdx_j`.
pub fn confidence_intervals(result: &EstimationResult, level: f64) -> Vec<(f64, f64)> {
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1)");
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    result
        .w_hat
        .as_slice()
        .iter()
        .zip(result.stdx.iter())
        .map(|(&w, &s)| (w - z * s, w + z * s))
        .collect()
}

/// End-to-end WENDy fit: select the test-function radius from the data, build
/// the orthonormal basis, assemble the weak system, and run IRLS.
pub fn fit(
    ds: &Dataset,
    lib: &FeatureLibrary,
    mask: &EquationMask,
    tf_opts: &crate::testfn::TestFnOptions,
    irls_opts: &IrlsOptions,
) -> Result<(EstimationResult, TestBasis)> {
    let basis = crate::testfn::choose_basis(ds, tf_opts)?;
    let sys = crate::weakform::assemble(ds, lib, &basis, mask)?;
    let result = irls(&sys, ds, lib, irls_opts)?;
    Ok((result, basis))
}

/// Weak-form OLS over the same automatically selected basis as [`fit`].
pub fn fit_ols(
    ds: &Dataset,
    lib: &FeatureLibrary,
    mask: &EquationMask,
    tf_opts: &crate::testfn::TestFnOptions,
) -> Result<(ParameterVector, TestBasis)> {
    let basis = crate::testfn::choose_basis(ds, tf_opts)?;
    let sys = crate::weakform::assemble(ds, lib, &basis, mask)?;
    Ok((ols_solve(&sys)?, basis))
}
