//! Assembly of the weak-form linear system `(G, b)`.
//!
//! Quadrature (composite trapezoid) is folded into the test-function matrices
//! once at assembly time: `Phi_q = Phi Q`, `Phid_q = Phid Q`. The system is
//! then `G = blockdiag_i(Phi_q Theta(U)[:, mask_i])` and `b = -vec(Phid_q U)`,
//! which reduces to `G = I_d (x) (Phi_q Theta(U))` for a full mask. Both
//! matrices are reused unchanged by every IRLS iteration.

use crate::testfn::TestBasis;
use crate::types::{
    validate_dataset, Dataset, EquationMask, FeatureLibrary, Result, WendyError,
};
use nalgebra::{DMatrix, DVector};

/// Diagonal of the composite trapezoidal quadrature matrix `Q` for `M`
/// intervals of width `dt`: `(dt/2, dt, ..., dt, dt/2)`, `M + 1` entries.
pub fn quadrature_weights(m: usize, dt: f64) -> DVector<f64> {
    assert!(m >= 2, "trapezoid rule needs at least 2 intervals");
    DVector::from_fn(m + 1, |i, _| {
        if i == 0 || i == m {
            0.5 * dt
        } else {
            dt
        }
    })
}

/// The weak-form linear system together with the quadrature-weighted
/// test-function matrices it was assembled from.
#[derive(Debug, Clone)]
pub struct WeakSystem {
    /// `(K d) x p` block-diagonal design matrix.
    pub g: DMatrix<f64>,
    /// `(K d)` response vector `-vec(Phid_q U)`.
    pub b: DVector<f64>,
    /// `K x (M+1)` quadrature-weighted test functions.
    pub phi_q: DMatrix<f64>,
    /// `K x (M+1)` quadrature-weighted test-function derivatives.
    pub phi_dot_q: DMatrix<f64>,
    pub mask: EquationMask,
}

impl WeakSystem {
    /// Basis rank `K`.
    pub fn k(&self) -> usize {
        self.phi_q.nrows()
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.mask.n_equations()
    }

    /// Number of estimated parameters.
    pub fn n_params(&self) -> usize {
        self.mask.n_params()
    }
}

/// Assemble the weak-form system. Deterministic: identical inputs produce
/// bit-identical outputs.
pub fn assemble(
    ds: &Dataset,
    lib: &FeatureLibrary,
    basis: &TestBasis,
    mask: &EquationMask,
) -> Result<WeakSystem> {
    validate_dataset(ds, lib)?;
    let n = ds.grid.n_samples();
    if basis.phi.ncols() != n {
        return Err(WendyError::DimensionMismatch(format!(
            "basis has {} columns but the grid has {n} samples",
            basis.phi.ncols()
        )));
    }
    if mask.n_equations() != lib.dim() || mask.n_features() != lib.n_features() {
        return Err(WendyError::DimensionMismatch(format!(
            "mask is for {} equations over {} features; library has d = {}, J = {}",
            mask.n_equations(),
            mask.n_features(),
            lib.dim(),
            lib.n_features()
        )));
    }

    let q = quadrature_weights(ds.grid.m(), ds.grid.dt());
    let scale_cols = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = m.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            col *= q[c];
        }
        out
    };
    let phi_q = scale_cols(&basis.phi);
    let phi_dot_q = scale_cols(&basis.phi_dot);

    let theta = lib.theta(&ds.u);
    let k = basis.phi.nrows();
    let d = lib.dim();
    let p = mask.n_params();

    let gtheta = &phi_q * &theta; // K x J, shared by all blocks
    let mut g = DMatrix::zeros(k * d, p);
    let mut col = 0;
    for i in 0..d {
        for &jj in mask.equation(i) {
            for r in 0..k {
                g[(i * k + r, col)] = gtheta[(r, jj)];
            }
            col += 1;
        }
    }

    let bu = &phi_dot_q * &ds.u; // K x d
    let mut b = DVector::zeros(k * d);
    for i in 0..d {
        for r in 0..k {
            b[i * k + r] = -bu[(r, i)];
        }
    }

    Ok(WeakSystem {
        g,
        b,
        phi_q,
        phi_dot_q,
        mask: mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use crate::testfn::{build_orthonormal_basis, choose_basis, fourier_diff, TestFnOptions};
    use crate::types::TimeGrid;
    use approx::assert_relative_eq;

    #[test]
    fn trapezoid_weights_match_definition() {
        let q = quadrature_weights(2, 1.0);
        assert_eq!(q.as_slice(), &[0.5, 1.0, 0.5]);
        // weights telescope to the span
        for (m, dt) in [(7usize, 0.25), (100, 0.01)] {
            let q = quadrature_weights(m, dt);
            assert_relative_eq!(q.sum(), m as f64 * dt, epsilon = 1e-12);
        }
    }

    #[test]
    fn trapezoid_is_spectrally_accurate_on_periodic_integrand() {
        // integral of sin^2(2 pi t / T) over [0, T] is T/2; for a full period
        // the trapezoid rule is exact up to rounding.
        let m = 64;
        let t_total = 3.0;
        let grid = TimeGrid::from_span(t_total, m).unwrap();
        let q = quadrature_weights(m, grid.dt());
        let approx_val: f64 = (0..=m)
            .map(|i| {
                let s = (2.0 * std::f64::consts::PI * grid.t(i) / t_total).sin();
                q[i] * s * s
            })
            .sum();
        assert_relative_eq!(approx_val, t_total / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_data_with_vanishing_features_gives_zero_system() {
        let spec = models::catalog("logistic").unwrap();
        let grid = TimeGrid::from_span(2.0, 64).unwrap();
        let ds = Dataset::new(grid.clone(), DMatrix::zeros(65, 1)).unwrap();
        let basis = build_orthonormal_basis(&grid, 4, &TestFnOptions::default()).unwrap();
        let sys = assemble(&ds, &spec.lib, &basis, &spec.mask).unwrap();
        assert!(sys.g.iter().all(|v| *v == 0.0));
        assert!(sys.b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lotka_volterra_full_mask_has_identical_kronecker_blocks() {
        let spec = models::catalog("lotka_volterra").unwrap();
        let truth = models::truth_dataset(&spec, 256).unwrap();
        let basis = choose_basis(&truth, &TestFnOptions::default()).unwrap();
        let full = EquationMask::full(4, 2);
        let sys = assemble(&truth, &spec.lib, &basis, &full).unwrap();
        let k = sys.k();
        assert_eq!(sys.g.nrows(), 2 * k);
        assert_eq!(sys.g.ncols(), 8);
        let top = sys.g.view((0, 0), (k, 4));
        let bottom = sys.g.view((k, 4), (k, 4));
        assert_eq!(top, bottom);
        // off-diagonal blocks vanish
        assert!(sys.g.view((0, 4), (k, 4)).iter().all(|v| *v == 0.0));
        assert!(sys.g.view((k, 0), (k, 4)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noiseless_logistic_weak_residual_is_tiny() {
        let spec = models::catalog("logistic").unwrap();
        let truth = models::truth_dataset(&spec, 512).unwrap();
        let basis = choose_basis(&truth, &TestFnOptions::default()).unwrap();
        let sys = assemble(&truth, &spec.lib, &basis, &spec.mask).unwrap();
        let r = &sys.g * spec.w_star.as_vector() - &sys.b;
        let rel = r.norm() / sys.b.norm();
        assert!(rel <= 1e-6, "relative weak residual {rel}");
    }

    #[test]
    fn weak_integration_by_parts_error_decays_with_radius() {
        // |Phid_q u + Phi_q udot| is the trapezoid error of d/dt(phi u); it
        // should fall off rapidly as the support radius grows.
        let m = 256;
        let t_total = 2.0;
        let grid = TimeGrid::from_span(t_total, m).unwrap();
        let q = quadrature_weights(m, grid.dt());
        // periodic but not band-limited, so aliasing is visible
        let w = 2.0 * std::f64::consts::PI / t_total;
        let u = DMatrix::from_fn(1, m + 1, |_, i| (w * grid.t(i)).sin().exp()).transpose();
        let du = DMatrix::from_fn(1, m + 1, |_, i| {
            w * (w * grid.t(i)).cos() * (w * grid.t(i)).sin().exp()
        })
        .transpose();

        let mut errs = Vec::new();
        for m_t in [4usize, 8, 16] {
            let c = m / 2;
            let mut phi = DMatrix::zeros(1, m + 1);
            let a = m_t as f64;
            let mut norm = 0.0;
            for j in 0..=2 * m_t {
                let v = crate::testfn::bump_eval(j as f64, a, a, 9.0);
                phi[(0, c + j - m_t)] = v;
                norm += v * v;
            }
            phi /= norm.sqrt();
            let phi_dot = fourier_diff(&phi, t_total);
            let mut acc = 0.0;
            for i in 0..=m {
                acc += q[i] * (phi_dot[(0, i)] * u[(i, 0)] + phi[(0, i)] * du[(i, 0)]);
            }
            errs.push(acc.abs());
        }
        assert!(
            errs[1] < 0.5 * errs[0] && errs[2] < 0.5 * errs[1],
            "integration-by-parts errors do not decay: {errs:?}"
        );
    }
}
