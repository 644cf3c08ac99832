//! Shared domain types: time grids, datasets, feature libraries, parameter
//! vectors, and the crate-wide error enum.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// Each variant carries a stable machine-readable code (see [`WendyError::code`])
/// so the CLI can report failures without string matching.
#[derive(Debug, Error)]
pub enum WendyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite data: {0}")]
    NonFiniteData(String),
    #[error("feature domain violation: {0}")]
    DomainViolation(String),
    #[error("step size underflow at t = {t:.6e} (h = {h:.6e}); system too stiff or diverging")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("integrator exceeded {0} steps")]
    MaxStepsExceeded(usize),
    #[error("test function radius {radius} does not fit in a grid of {m} intervals")]
    RadiusTooLarge { radius: usize, m: usize },
    #[error("integration-error series is non-finite at every candidate radius")]
    DegenerateSeries,
    #[error("test function stack is numerically rank deficient")]
    RankDeficient,
    #[error("sample too small for Shapiro-Wilk (n = {0}, need n >= 3)")]
    SampleTooSmall(usize),
    #[error("degenerate sample: zero variance")]
    DegenerateSample,
    #[error("series too short for changepoint detection (n = {0}, need n >= 4)")]
    SeriesTooShort(usize),
    #[error("weak-form matrix G is rank deficient (rank {rank} of {cols}); suspect columns {columns:?}")]
    RankDeficientG {
        rank: usize,
        cols: usize,
        columns: Vec<usize>,
    },
    #[error("Cholesky factorization of the residual covariance failed")]
    CholeskyFailure,
    #[error("too few samples: {got} (need at least {need})")]
    TooFewSamples { got: usize, need: usize },
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("subsample factor {factor} does not divide {m} intervals")]
    IndivisibleFactor { factor: usize, m: usize },
    #[error("initial point is infeasible: residual is non-finite at w0")]
    InitialPointInfeasible,
    #[error("all optimization starts failed")]
    AllStartsFailed,
    #[error("time column is not a uniform grid: {0}")]
    NonUniformGrid(String),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad input or configuration; exit code 2.
    Validation,
    /// Failure at run time; exit code 1.
    Runtime,
}

impl WendyError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        use WendyError::*;
        match self {
            DimensionMismatch(_) => "dimension_mismatch",
            NonFiniteData(_) => "non_finite_data",
            DomainViolation(_) => "domain_violation",
            StepSizeUnderflow { .. } => "step_size_underflow",
            MaxStepsExceeded(_) => "max_steps_exceeded",
            RadiusTooLarge { .. } => "radius_too_large",
            DegenerateSeries => "degenerate_series",
            RankDeficient => "rank_deficient",
            SampleTooSmall(_) => "sample_too_small",
            DegenerateSample => "degenerate_sample",
            SeriesTooShort(_) => "series_too_short",
            RankDeficientG { .. } => "rank_deficient_g",
            CholeskyFailure => "cholesky_failure",
            TooFewSamples { .. } => "too_few_samples",
            UnknownModel(_) => "unknown_model",
            IndivisibleFactor { .. } => "indivisible_factor",
            InitialPointInfeasible => "initial_point_infeasible",
            AllStartsFailed => "all_starts_failed",
            NonUniformGrid(_) => "non_uniform_grid",
            ParseError(_) => "parse_error",
            InvalidConfig(_) => "invalid_config",
            Io(_) => "io_error",
        }
    }

    pub fn category(&self) -> ErrorCategory {
        use WendyError::*;
        match self {
            DimensionMismatch(_) | NonFiniteData(_) | DomainViolation(_) | UnknownModel(_)
            | IndivisibleFactor { .. } | NonUniformGrid(_) | ParseError(_) | InvalidConfig(_)
            | SampleTooSmall(_) | SeriesTooShort(_) | TooFewSamples { .. } => {
                ErrorCategory::Validation
            }
            _ => ErrorCategory::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, WendyError>;

/// Uniform time grid `t_m = t0 + m * dt`, `m = 0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n_samples: usize,
}

impl TimeGrid {
    /// Grid with `n_samples = M + 1` points. Requires `dt > 0` and `M >= 2`.
    pub fn new(t0: f64, dt: f64, n_samples: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(WendyError::InvalidConfig(format!(
                "time grid needs finite t0 and dt > 0, got t0 = {t0}, dt = {dt}"
            )));
        }
        if n_samples < 3 {
            return Err(WendyError::InvalidConfig(format!(
                "time grid needs at least 3 samples (M >= 2), got {n_samples}"
            )));
        }
        Ok(Self { t0, dt, n_samples })
    }

    /// Grid over `[0, t_final]` with `m` intervals.
    pub fn from_span(t_final: f64, m: usize) -> Result<Self> {
        Self::new(0.0, t_final / m as f64, m + 1)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of samples `M + 1`.
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Number of intervals `M`.
    pub fn m(&self) -> usize {
        self.n_samples - 1
    }

    /// Total span `T = M * dt`.
    pub fn total_time(&self) -> f64 {
        self.dt * self.m() as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t0 + self.dt * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples).map(|i| self.t(i)).collect()
    }
}

/// State observations on a [`TimeGrid`]: `u` is `(M+1) x d`, one row per
/// sample, one column per state variable.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: TimeGrid,
    pub u: DMatrix<f64>,
}

impl Dataset {
    pub fn new(grid: TimeGrid, u: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != grid.n_samples() {
            return Err(WendyError::DimensionMismatch(format!(
                "grid has {} samples but the state matrix has {} rows",
                grid.n_samples(),
                u.nrows()
            )));
        }
        if u.ncols() == 0 {
            return Err(WendyError::DimensionMismatch(
                "state matrix has no columns".into(),
            ));
        }
        Ok(Self { grid, u })
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.u.ncols()
    }
}

/// One right-hand-side feature `f_j` together with its gradient.
///
/// `grad` writes the `d` partial derivatives of `f_j` into its output slice.
pub struct Feature {
    pub name: String,
    pub eval: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub grad: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl Feature {
    pub fn new(
        name: impl Into<String>,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Box::new(eval),
            grad: Box::new(grad),
        }
    }
}

impl std::fmt::Debug for Feature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Feature({})", self.name)
    }
}

/// The `J` features of the right-hand side and their gradients, for a
/// `d`-dimensional state.
#[derive(Debug)]
pub struct FeatureLibrary {
    d: usize,
    features: Vec<Feature>,
}

impl FeatureLibrary {
    pub fn new(d: usize, features: Vec<Feature>) -> Result<Self> {
        if d == 0 || features.is_empty() {
            return Err(WendyError::InvalidConfig(
                "feature library needs d >= 1 and J >= 1".into(),
            ));
        }
        Ok(Self { d, features })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Feature count `J`.
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    /// Evaluate the feature matrix `Theta(U)`: `(M+1) x J`, entry `(m, j)` is
    /// `f_j(U_m)`.
    pub fn theta(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let n = u.nrows();
        let j = self.n_features();
        let mut out = DMatrix::zeros(n, j);
        let mut row = vec![0.0; self.d];
        for m in 0..n {
            for (l, r) in row.iter_mut().enumerate() {
                *r = u[(m, l)];
            }
            for (jj, feat) in self.features.iter().enumerate() {
                out[(m, jj)] = (feat.eval)(&row);
            }
        }
        out
    }

    /// Evaluate all feature gradients on the data.
    ///
    /// Returns one `(M+1) x J` matrix per state index `l`; entry `(m, j)` of
    /// table `l` is `df_j/du_l (U_m)`.
    pub fn grad_tables(&self, u: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let n = u.nrows();
        let j = self.n_features();
        let mut tables = vec![DMatrix::zeros(n, j); self.d];
        let mut row = vec![0.0; self.d];
        let mut g = vec![0.0; self.d];
        for m in 0..n {
            for (l, r) in row.iter_mut().enumerate() {
                *r = u[(m, l)];
            }
            for (jj, feat) in self.features.iter().enumerate() {
                (feat.grad)(&row, &mut g);
                for (l, table) in tables.iter_mut().enumerate() {
                    table[(m, jj)] = g[l];
                }
            }
        }
        tables
    }

    /// Vector field `F_i(u) = sum_j W[j, i] f_j(u)` for a full `J x d`
    /// coefficient matrix.
    pub fn vector_field(&self, w_mat: &DMatrix<f64>, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(w_mat.nrows(), self.n_features());
        debug_assert_eq!(w_mat.ncols(), self.d);
        out.fill(0.0);
        for (jj, feat) in self.features.iter().enumerate() {
            let fj = (feat.eval)(u);
            for i in 0..self.d {
                out[i] += w_mat[(jj, i)] * fj;
            }
        }
    }

    /// Jacobian of the vector field, `d x d`, entry `(i, l) = dF_i/du_l`.
    pub fn jacobian(&self, w_mat: &DMatrix<f64>, u: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.d, self.d);
        let mut g = vec![0.0; self.d];
        for (jj, feat) in self.features.iter().enumerate() {
            (feat.grad)(u, &mut g);
            for i in 0..self.d {
                let w = w_mat[(jj, i)];
                if w != 0.0 {
                    for l in 0..self.d {
                        jac[(i, l)] += w * g[l];
                    }
                }
            }
        }
        jac
    }
}

/// Which features are active in each state equation.
///
/// Entry `i` lists the indices (into the shared library) of the features that
/// appear in the equation for state `i`. The estimated parameter vector is the
/// concatenation of the active coefficients, equation by equation; embedding
/// into the full `J x d` coefficient matrix fills the inactive entries with
/// zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquationMask {
    per_eq: Vec<Vec<usize>>,
    n_features: usize,
}

impl EquationMask {
    pub fn new(per_eq: Vec<Vec<usize>>, n_features: usize) -> Result<Self> {
        if per_eq.is_empty() {
            return Err(WendyError::InvalidConfig("mask has no equations".into()));
        }
        for (i, eq) in per_eq.iter().enumerate() {
            if eq.is_empty() {
                return Err(WendyError::InvalidConfig(format!(
                    "equation {i} has no active features"
                )));
            }
            let mut sorted = eq.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != eq.len() || *eq != sorted {
                return Err(WendyError::InvalidConfig(format!(
                    "equation {i} mask must be sorted and duplicate-free"
                )));
            }
            if let Some(&max) = eq.last() {
                if max >= n_features {
                    return Err(WendyError::InvalidConfig(format!(
                        "equation {i} references feature {max} but the library has {n_features}"
                    )));
                }
            }
        }
        Ok(Self {
            per_eq,
            n_features,
        })
    }

    /// Every feature active in every equation: parameter length `J * d`.
    pub fn full(n_features: usize, d: usize) -> Self {
        Self {
            per_eq: vec![(0..n_features).collect(); d],
            n_features,
        }
    }

    pub fn n_equations(&self) -> usize {
        self.per_eq.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Active feature indices for equation `i`.
    pub fn equation(&self, i: usize) -> &[usize] {
        &self.per_eq[i]
    }

    /// Total number of estimated parameters.
    pub fn n_params(&self) -> usize {
        self.per_eq.iter().map(Vec::len).sum()
    }

    /// Embed a masked parameter vector into the full `J x d` coefficient
    /// matrix, zero elsewhere.
    pub fn embed(&self, w: &ParameterVector) -> Result<DMatrix<f64>> {
        if w.len() != self.n_params() {
            return Err(WendyError::DimensionMismatch(format!(
                "parameter vector has {} entries, mask expects {}",
                w.len(),
                self.n_params()
            )));
        }
        let mut mat = DMatrix::zeros(self.n_features, self.per_eq.len());
        let mut idx = 0;
        for (i, eq) in self.per_eq.iter().enumerate() {
            for &jj in eq {
                mat[(jj, i)] = w.as_vector()[idx];
                idx += 1;
            }
        }
        Ok(mat)
    }

    /// Extract the active coefficients of a full `J x d` matrix into a masked
    /// parameter vector (inverse of [`EquationMask::embed`] on its image).
    pub fn extract(&self, w_mat: &DMatrix<f64>) -> ParameterVector {
        let mut out = Vec::with_capacity(self.n_params());
        for (i, eq) in self.per_eq.iter().enumerate() {
            for &jj in eq {
                out.push(w_mat[(jj, i)]);
            }
        }
        ParameterVector::from_vec(out)
    }
}

/// Parameter vector; for an unmasked system of `J` features and `d` states it
/// has length `J * d` and matricizes column-major into `J x d` (column `i`
/// holds the coefficients of state `i`'s equation).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(DVector<f64>);

impl ParameterVector {
    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(DVector::from_vec(v))
    }

    pub fn from_column(v: DVector<f64>) -> Self {
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// Column-major matricization `mat(w)`: requires `len == j * d`.
    pub fn mat(&self, j: usize, d: usize) -> Result<DMatrix<f64>> {
        if self.len() != j * d {
            return Err(WendyError::DimensionMismatch(format!(
                "cannot matricize a length-{} vector into {j} x {d}",
                self.len()
            )));
        }
        Ok(DMatrix::from_column_slice(j, d, self.0.as_slice()))
    }

    /// Inverse of [`ParameterVector::mat`] (column stacking).
    pub fn from_mat(m: &DMatrix<f64>) -> Self {
        Self(DVector::from_column_slice(m.as_slice()))
    }
}

/// Reason the IRLS iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FixedPoint,
    MaxIterations,
    ShapiroWilkReject,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::FixedPoint => "fixed_point",
            StopReason::MaxIterations => "max_iterations",
            StopReason::ShapiroWilkReject => "shapiro_wilk_reject",
        };
        f.write_str(s)
    }
}

/// Output of the IRLS estimator.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    /// Estimated parameters (masked layout if a mask was supplied).
    pub w_hat: ParameterVector,
    /// Final residual covariance `C` (relaxed), `Kd x Kd`.
    pub c_hat: DMatrix<f64>,
    /// Estimated measurement noise standard deviation.
    pub sigma_hat: f64,
    /// Parameter covariance `S`, `p x p`, symmetric PSD.
    pub s: DMatrix<f64>,
    /// Per-parameter standard deviations `sqrt(diag(S))`.
    pub stdx: DVector<f64>,
    /// Number of weighted least-squares iterations performed.
    pub n_iters: usize,
    pub stop_reason: StopReason,
    /// Whitened residual at the final iterate.
    pub residual: DVector<f64>,
}

/// Check that a dataset and a feature library are mutually consistent and that
/// every feature and gradient evaluates to finite values on the data.
pub fn validate_dataset(ds: &Dataset, lib: &FeatureLibrary) -> Result<()> {
    if ds.dim() != lib.dim() {
        return Err(WendyError::DimensionMismatch(format!(
            "library expects d = {} states but the data has {} columns",
            lib.dim(),
            ds.dim()
        )));
    }
    for (idx, v) in ds.u.iter().enumerate() {
        if !v.is_finite() {
            let (r, c) = (idx % ds.u.nrows(), idx / ds.u.nrows());
            return Err(WendyError::NonFiniteData(format!(
                "U[{r}, {c}] = {v}"
            )));
        }
    }
    let mut row = vec![0.0; lib.dim()];
    let mut g = vec![0.0; lib.dim()];
    for m in 0..ds.u.nrows() {
        for (l, r) in row.iter_mut().enumerate() {
            *r = ds.u[(m, l)];
        }
        for (jj, feat) in lib.features().iter().enumerate() {
            let v = (feat.eval)(&row);
            if !v.is_finite() {
                return Err(WendyError::DomainViolation(format!(
                    "feature {jj} ({}) is non-finite at sample {m}",
                    feat.name
                )));
            }
            (feat.grad)(&row, &mut g);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(WendyError::DomainViolation(format!(
                    "gradient of feature {jj} ({}) is non-finite at sample {m}",
                    feat.name
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_feature_lib() -> FeatureLibrary {
        FeatureLibrary::new(
            1,
            vec![
                Feature::new("u", |u: &[f64]| u[0], |_u: &[f64], g: &mut [f64]| g[0] = 1.0),
                Feature::new(
                    "u^2",
                    |u: &[f64]| u[0] * u[0],
                    |u: &[f64], g: &mut [f64]| g[0] = 2.0 * u[0],
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn validate_accepts_consistent_logistic_dataset() {
        let grid = TimeGrid::from_span(1.0, 4).unwrap();
        let u = DMatrix::from_fn(5, 1, |m, _| 0.1 * (m as f64 + 1.0));
        let ds = Dataset::new(grid, u).unwrap();
        validate_dataset(&ds, &two_feature_lib()).unwrap();
    }

    #[test]
    fn validate_rejects_dimension_mismatch() {
        let lib = FeatureLibrary::new(
            2,
            vec![Feature::new(
                "u1",
                |u: &[f64]| u[0],
                |_u: &[f64], g: &mut [f64]| {
                    g[0] = 1.0;
                    g[1] = 0.0;
                },
            )],
        )
        .unwrap();
        let grid = TimeGrid::from_span(1.0, 4).unwrap();
        let ds = Dataset::new(grid, DMatrix::zeros(5, 1)).unwrap();
        let err = validate_dataset(&ds, &lib).unwrap_err();
        assert_eq!(err.code(), "dimension_mismatch");
    }

    #[test]
    fn validate_rejects_hill_pole() {
        // u5 / (0.3 + u5) blows up at u5 = -0.3 exactly.
        let lib = FeatureLibrary::new(
            5,
            vec![Feature::new(
                "hill",
                |u: &[f64]| u[4] / (0.3 + u[4]),
                |u: &[f64], g: &mut [f64]| {
                    g.fill(0.0);
                    let den = 0.3 + u[4];
                    g[4] = 0.3 / (den * den);
                },
            )],
        )
        .unwrap();
        let grid = TimeGrid::from_span(1.0, 4).unwrap();
        let mut u = DMatrix::from_element(5, 5, 1.0);
        u[(2, 4)] = -0.3;
        let ds = Dataset::new(grid, u).unwrap();
        let err = validate_dataset(&ds, &lib).unwrap_err();
        assert_eq!(err.code(), "domain_violation");
    }

    #[test]
    fn validate_rejects_non_finite_data() {
        let grid = TimeGrid::from_span(1.0, 4).unwrap();
        let mut u = DMatrix::zeros(5, 1);
        u[(3, 0)] = f64::NAN;
        let ds = Dataset::new(grid, u).unwrap();
        let err = validate_dataset(&ds, &two_feature_lib()).unwrap_err();
        assert_eq!(err.code(), "non_finite_data");
    }

    #[test]
    fn mask_embed_extract_round_trip() {
        // Lotka-Volterra layout: 4 stacked features over 2 equations.
        let mask = EquationMask::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let w = ParameterVector::from_vec(vec![3.0, -1.0, -6.0, 1.0]);
        let mat = mask.embed(&w).unwrap();
        assert_eq!(mat[(0, 0)], 3.0);
        assert_eq!(mat[(1, 0)], -1.0);
        assert_eq!(mat[(2, 1)], -6.0);
        assert_eq!(mat[(3, 1)], 1.0);
        assert_eq!(mat[(2, 0)], 0.0);
        assert_eq!(mask.extract(&mat), w);
    }

    proptest! {
        // vec/mat duality: vec(mat(w)) == w for arbitrary shapes.
        #[test]
        fn vec_mat_round_trip(j in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = ParameterVector::from_vec((0..j * d).map(|_| rng.random_range(-5.0..5.0)).collect());
            let m = w.mat(j, d).unwrap();
            prop_assert_eq!(ParameterVector::from_mat(&m), w);
        }

        // A full mask is the identity embedding.
        #[test]
        fn full_mask_embed_is_matricization(j in 1usize..5, d in 1usize..4) {
            let mask = EquationMask::full(j, d);
            let w = ParameterVector::from_vec((0..j * d).map(|i| i as f64).collect());
            let mat = mask.embed(&w).unwrap();
            prop_assert_eq!(mat, w.mat(j, d).unwrap());
        }
    }
}
