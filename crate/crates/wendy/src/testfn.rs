//! Test-function construction.
//!
//! Three stages, given a uniform grid and (possibly noisy) data:
//!
//! 1. [`integration_error_estimate`] — a surrogate for the quadrature error of
//!    the weak-form inner products, computed from a single aliased discrete
//!    Fourier mode of `phi_k * U` per test function and state.
//! 2. [`select_min_radius`] — scans the estimate over a log-spaced grid of
//!    support radii and picks the changepoint of its log, the radius where
//!    integration error stops dominating noise effects.
//! 3. [`build_orthonormal_basis`] — stacks convolution matrices of bumps at
//!    dyadic multiples of the minimum radius, orthonormalizes by SVD, and
//!    truncates at the changepoint of the cumulative singular values. The
//!    derivative matrix comes from Fourier differentiation, which is accurate
//!    because the rows are smooth and compactly supported inside the domain.

use crate::stats::changepoint;
use crate::types::{Dataset, Result, TimeGrid, WendyError};
use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};

/// Hyperparameters of the test-function pipeline.
#[derive(Debug, Clone, Copy)]
pub struct TestFnOptions {
    /// Bump shape parameter.
    pub eta: f64,
    /// Coarsening factor of the integration-error surrogate; must lie in (2, 4).
    pub s: f64,
    /// Center stride for both the error scan and the convolution stacks.
    pub stride: usize,
    /// Override the data-driven minimum radius.
    pub radius_override: Option<usize>,
}

impl Default for TestFnOptions {
    fn default() -> Self {
        Self {
            eta: 9.0,
            s: 3.0,
            stride: 1,
            radius_override: None,
        }
    }
}

impl TestFnOptions {
    fn validate(&self) -> Result<()> {
        if !(self.s > 2.0 && self.s < 4.0) {
            return Err(WendyError::InvalidConfig(format!(
                "coarsening factor s must lie in (2, 4), got {}",
                self.s
            )));
        }
        if !(self.eta > 0.0) {
            return Err(WendyError::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.stride == 0 {
            return Err(WendyError::InvalidConfig("stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Orthonormal test-function basis on a grid.
#[derive(Debug, Clone)]
pub struct TestBasis {
    /// `K x (M+1)`; rows are orthonormal.
    pub phi: DMatrix<f64>,
    /// Row-wise Fourier derivative of `phi`, `K x (M+1)`.
    pub phi_dot: DMatrix<f64>,
    /// Minimum radius the dyadic stack was built from.
    pub min_radius: usize,
    /// Radii of the levels that survived the domain clamp.
    pub radii_used: Vec<usize>,
}

impl TestBasis {
    /// Basis rank `K`.
    pub fn k(&self) -> usize {
        self.phi.nrows()
    }
}

/// Unnormalized bump `exp(-eta / (1 - ((t - center)/a)^2))` supported on
/// `|t - center| < a`, zero outside.
pub fn bump_eval(t: f64, center: f64, a: f64, eta: f64) -> f64 {
    let x = (t - center) / a;
    let arg = 1.0 - x * x;
    if arg <= 0.0 {
        0.0
    } else {
        (-eta / arg).exp()
    }
}

/// Bump profile over offsets `-m_t..=m_t`, normalized to unit l2 norm, so the
/// discretized test function satisfies `sum_m phi_k(t_m)^2 = 1`.
fn bump_profile(m_t: usize, eta: f64) -> Vec<f64> {
    let a = m_t as f64;
    let mut psi: Vec<f64> = (0..=2 * m_t)
        .map(|j| bump_eval(j as f64, a, a, eta))
        .collect();
    let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut psi {
        *v /= norm;
    }
    psi
}

/// Grid indices of the admissible centers for radius `m_t`: every point whose
/// full support `[t_c - a, t_c + a]` lies inside the domain.
fn centers(m: usize, m_t: usize, stride: usize) -> Result<Vec<usize>> {
    if m_t < 1 || 2 * m_t > m {
        return Err(WendyError::RadiusTooLarge { radius: m_t, m });
    }
    Ok((m_t..=m - m_t).step_by(stride).collect())
}

/// Per-(test function, state) integration-error surrogate.
///
/// Entry `(k, i)` is `-(4 pi floor(M/s) / sqrt(T)) * Im F_hat[phi_k U_i]` at
/// mode `floor(M/s)`, using the DFT normalization
/// `F_hat_n[f] = (dt / sqrt(T)) sum_{m=0}^{M-1} f(t_m) exp(-2 pi i n m / M)`.
pub fn integration_error_components(
    ds: &Dataset,
    m_t: usize,
    opts: &TestFnOptions,
) -> Result<DMatrix<f64>> {
    opts.validate()?;
    let grid = &ds.grid;
    let m = grid.m();
    let d = ds.dim();
    let t_total = grid.total_time();
    let n_star = (m as f64 / opts.s).floor();
    let cs = centers(m, m_t, opts.stride)?;
    let psi = bump_profile(m_t, opts.eta);

    // Factor the mode phase as exp(-i theta (c + j)) = exp(-i theta c) * exp(-i theta j).
    let theta = 2.0 * std::f64::consts::PI * n_star / m as f64;
    let ej: Vec<Complex<f64>> = (0..=2 * m_t)
        .map(|j| {
            let off = j as f64 - m_t as f64;
            Complex::from_polar(1.0, -theta * off)
        })
        .collect();

    let scale = -(4.0 * std::f64::consts::PI * n_star / t_total.sqrt()) * grid.dt()
        / t_total.sqrt();
    let mut out = DMatrix::zeros(cs.len(), d);
    for (row, &c) in cs.iter().enumerate() {
        let phase = Complex::from_polar(1.0, -theta * c as f64);
        for i in 0..d {
            let mut acc = Complex::new(0.0, 0.0);
            for (j, (&p, &e)) in psi.iter().zip(&ej).enumerate() {
                let idx = c + j - m_t;
                if idx < m {
                    // index m == M is excluded from the M-point DFT
                    acc += e * (p * ds.u[(idx, i)]);
                }
            }
            out[(row, i)] = scale * (acc * phase).im;
        }
    }
    Ok(out)
}

/// Root-mean-squared integration-error surrogate over all test functions and
/// states: `K^{-1} sum_k sum_i e_int(k, i)^2`.
pub fn integration_error_estimate(ds: &Dataset, m_t: usize, opts: &TestFnOptions) -> Result<f64> {
    let comps = integration_error_components(ds, m_t, opts)?;
    let k = comps.nrows() as f64;
    Ok(comps.iter().map(|v| v * v).sum::<f64>() / k)
}

/// Candidate radii for the minimum-radius scan: 50 log-spaced integers from 2
/// to `M/4`, deduplicated.
pub fn radius_candidates(m: usize) -> Vec<usize> {
    let hi = (m / 4).max(3) as f64;
    let lo = 2.0f64;
    let mut out: Vec<usize> = (0..50)
        .map(|i| {
            let f = i as f64 / 49.0;
            (lo.ln() + f * (hi.ln() - lo.ln())).exp().round() as usize
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// The integration-error surrogate on the candidate radius grid.
pub fn radius_scan(ds: &Dataset, opts: &TestFnOptions) -> Result<Vec<(usize, f64)>> {
    let m = ds.grid.m();
    if m < 16 {
        return Err(WendyError::TooFewSamples { got: m, need: 16 });
    }
    radius_candidates(m)
        .into_iter()
        .map(|r| integration_error_estimate(ds, r, opts).map(|e| (r, e)))
        .collect()
}

/// Data-driven minimum support radius: the changepoint of `log(e_rms)` over
/// the candidate radii, clamped into `[2, M/8]` so the largest dyadic level
/// `8 m_t` can fit inside the domain.
pub fn select_min_radius(ds: &Dataset, opts: &TestFnOptions) -> Result<usize> {
    let scan = radius_scan(ds, opts)?;
    min_radius_from_scan(ds.grid.m(), &scan)
}

/// Changepoint + clamp step of [`select_min_radius`], reusable when the scan
/// is already available.
pub fn min_radius_from_scan(m: usize, scan: &[(usize, f64)]) -> Result<usize> {
    let finite: Vec<(usize, f64)> = scan
        .iter()
        .filter(|(_, e)| e.is_finite() && *e > 0.0)
        .map(|&(r, e)| (r, e.ln()))
        .collect();
    if finite.len() < 4 {
        return Err(WendyError::DegenerateSeries);
    }
    let series: Vec<f64> = finite.iter().map(|&(_, l)| l).collect();
    let idx = changepoint(&series)?;
    let radius = finite[idx].0;
    Ok(radius.clamp(2, (m / 8).max(2)))
}

/// Stack bump convolution matrices at radii `m_t * (1, 2, 4, 8)`, dropping
/// dyadic levels whose support exceeds the domain, orthonormalize by SVD, and
/// truncate the rank at the changepoint of the cumulative singular values.
pub fn build_orthonormal_basis(
    grid: &TimeGrid,
    min_radius: usize,
    opts: &TestFnOptions,
) -> Result<TestBasis> {
    opts.validate()?;
    let m = grid.m();
    let n = grid.n_samples();
    let radii_used: Vec<usize> = (0..4)
        .map(|l| min_radius << l)
        .filter(|&r| 2 * r <= m)
        .collect();
    if radii_used.is_empty() {
        return Err(WendyError::RadiusTooLarge {
            radius: min_radius,
            m,
        });
    }

    let mut rows = Vec::new();
    for &r in &radii_used {
        let psi = bump_profile(r, opts.eta);
        for c in centers(m, r, opts.stride)? {
            let mut row = vec![0.0; n];
            for (j, &p) in psi.iter().enumerate() {
                row[c + j - r] = p;
            }
            rows.push(row);
        }
    }
    let stack = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);

    // Right singular vectors via the (M+1) x (M+1) Gram matrix; the stack has
    // many more rows than columns.
    let gram = stack.tr_mul(&stack);
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let svals: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let s_max = svals[0];
    if !(s_max > 0.0) || s_max < 1e-14 {
        return Err(WendyError::RankDeficient);
    }
    // Eigenvalues of the Gram matrix square the singular values, so the
    // trustworthy rank cutoff is sqrt(eps) relative.
    let rank = svals.iter().take_while(|&&s| s > 1e-7 * s_max).count();
    let cumsum: Vec<f64> = svals[..rank]
        .iter()
        .scan(0.0, |acc, &s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    let k = if rank < 4 {
        rank
    } else {
        changepoint(&cumsum)?.min(rank)
    };

    let mut phi = DMatrix::zeros(k, n);
    for (row, &i) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(i);
        for col in 0..n {
            phi[(row, col)] = v[col];
        }
    }
    let phi_dot = fourier_diff(&phi, grid.total_time());
    Ok(TestBasis {
        phi,
        phi_dot,
        min_radius,
        radii_used,
    })
}

/// Select the minimum radius from the data (unless overridden) and build the
/// orthonormal basis.
pub fn choose_basis(ds: &Dataset, opts: &TestFnOptions) -> Result<TestBasis> {
    let r = match opts.radius_override {
        Some(r) => r,
        None => select_min_radius(ds, opts)?,
    };
    build_orthonormal_basis(&ds.grid, r, opts)
}

/// Differentiate each row spectrally, treating rows as periodic on `[0, T)`
/// with the sample at `t = T` identified with `t = 0`.
///
/// Mode `n` is multiplied by `i 2 pi n / T`; for even lengths the Nyquist
/// mode's derivative coefficient is set to zero. The output's last column is
/// the periodic copy of the first.
pub fn fourier_diff(phi: &DMatrix<f64>, total_time: f64) -> DMatrix<f64> {
    let n = phi.ncols();
    let m = n - 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    let ifft = planner.plan_fft_inverse(m);

    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = DMatrix::zeros(phi.nrows(), n);
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); m];
    for row in 0..phi.nrows() {
        for (q, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(phi[(row, q)], 0.0);
        }
        fft.process(&mut buf);
        for (q, b) in buf.iter_mut().enumerate() {
            let wavenumber = if 2 * q < m {
                q as f64
            } else if 2 * q == m {
                0.0
            } else {
                q as f64 - m as f64
            };
            let omega = two_pi * wavenumber / total_time;
            *b *= Complex::new(0.0, omega);
        }
        ifft.process(&mut buf);
        for (q, b) in buf.iter().enumerate() {
            out[(row, q)] = b.re / m as f64;
        }
        out[(row, m)] = out[(row, 0)];
    }
    out
}
