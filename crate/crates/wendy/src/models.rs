//! Benchmark model catalog: feature libraries with closed-form gradients,
//! reference parameters and initial conditions, noise injection, and
//! subsampling.
//!
//! Each model's library stacks the features equation by equation, with an
//! [`EquationMask`] assigning each feature to the equation it appears in; the
//! reference parameter vector lives in the masked layout, matching the number
//! of free coefficients of the model.

use crate::integrate::{self, IntegratorOptions};
use crate::types::{
    Dataset, EquationMask, Feature, FeatureLibrary, ParameterVector, Result, TimeGrid, WendyError,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A catalog model: library, mask, ground truth, and simulation protocol.
#[derive(Debug)]
pub struct ModelSpec {
    pub name: &'static str,
    pub lib: FeatureLibrary,
    pub mask: EquationMask,
    pub w_star: ParameterVector,
    pub u0: Vec<f64>,
    pub t_final: f64,
    /// Finest grid used for truth generation; coarser data comes from
    /// power-of-two subsampling.
    pub finest_m: usize,
    /// Reference `||vec(U*)||_rms` of the clean trajectory.
    pub rms_ref: f64,
    /// Whether the forward-solver baseline should use the stiff integrator.
    pub stiff: bool,
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.lib.dim()
    }

    pub fn n_features(&self) -> usize {
        self.lib.n_features()
    }

    /// Ground-truth coefficients embedded as the full `J x d` matrix.
    pub fn w_star_mat(&self) -> DMatrix<f64> {
        self.mask.embed(&self.w_star).expect("catalog w_star matches its mask")
    }
}

pub const MODEL_NAMES: [&str; 5] = [
    "logistic",
    "lotka_volterra",
    "fitzhugh_nagumo",
    "hindmarsh_rose",
    "ptb",
];

fn lin(name: &str, idx: usize, d: usize) -> Feature {
    let n = name.to_string();
    Feature::new(
        n,
        move |u: &[f64]| u[idx],
        move |_u: &[f64], g: &mut [f64]| {
            g[..d].fill(0.0);
            g[idx] = 1.0;
        },
    )
}

fn constant(d: usize) -> Feature {
    Feature::new(
        "1",
        |_u: &[f64]| 1.0,
        move |_u: &[f64], g: &mut [f64]| g[..d].fill(0.0),
    )
}

fn power(name: &str, idx: usize, p: i32, d: usize) -> Feature {
    let n = name.to_string();
    Feature::new(
        n,
        move |u: &[f64]| u[idx].powi(p),
        move |u: &[f64], g: &mut [f64]| {
            g[..d].fill(0.0);
            g[idx] = p as f64 * u[idx].powi(p - 1);
        },
    )
}

fn product(name: &str, a: usize, b: usize, d: usize) -> Feature {
    let n = name.to_string();
    Feature::new(
        n,
        move |u: &[f64]| u[a] * u[b],
        move |u: &[f64], g: &mut [f64]| {
            g[..d].fill(0.0);
            g[a] = u[b];
            g[b] = u[a];
        },
    )
}

/// Hill term `u_idx / (0.3 + u_idx)`; singular at `u_idx = -0.3`.
fn hill(idx: usize, d: usize) -> Feature {
    Feature::new(
        format!("u{}/(0.3+u{})", idx + 1, idx + 1),
        move |u: &[f64]| u[idx] / (0.3 + u[idx]),
        move |u: &[f64], g: &mut [f64]| {
            g[..d].fill(0.0);
            let den = 0.3 + u[idx];
            g[idx] = 0.3 / (den * den);
        },
    )
}

/// Look up a benchmark model by name.
pub fn catalog(name: &str) -> Result<ModelSpec> {
    match name {
        "logistic" => Ok(ModelSpec {
            name: "logistic",
            lib: FeatureLibrary::new(1, vec![lin("u", 0, 1), power("u^2", 0, 2, 1)])?,
            mask: EquationMask::new(vec![vec![0, 1]], 2)?,
            w_star: ParameterVector::from_vec(vec![1.0, -1.0]),
            u0: vec![0.01],
            t_final: 10.0,
            finest_m: 512,
            rms_ref: 0.66,
            stiff: false,
        }),
        "lotka_volterra" => Ok(ModelSpec {
            name: "lotka_volterra",
            lib: FeatureLibrary::new(
                2,
                vec![
                    lin("u1", 0, 2),
                    product("u1*u2", 0, 1, 2),
                    lin("u2", 1, 2),
                    product("u1*u2", 0, 1, 2),
                ],
            )?,
            mask: EquationMask::new(vec![vec![0, 1], vec![2, 3]], 4)?,
            w_star: ParameterVector::from_vec(vec![3.0, -1.0, -6.0, 1.0]),
            u0: vec![1.0, 1.0],
            t_final: 5.0,
            finest_m: 1024,
            rms_ref: 6.8,
            stiff: false,
        }),
        "fitzhugh_nagumo" => Ok(ModelSpec {
            name: "fitzhugh_nagumo",
            lib: FeatureLibrary::new(
                2,
                vec![
                    lin("u1", 0, 2),
                    power("u1^3", 0, 3, 2),
                    lin("u2", 1, 2),
                    lin("u1", 0, 2),
                    constant(2),
                    lin("u2", 1, 2),
                ],
            )?,
            mask: EquationMask::new(vec![vec![0, 1, 2], vec![3, 4, 5]], 6)?,
            w_star: ParameterVector::from_vec(vec![
                3.0,
                -3.0,
                3.0,
                -1.0 / 3.0,
                17.0 / 150.0,
                1.0 / 15.0,
            ]),
            u0: vec![0.0, 0.1],
            t_final: 25.0,
            finest_m: 1024,
            rms_ref: 0.68,
            stiff: true,
        }),
        "hindmarsh_rose" => Ok(ModelSpec {
            name: "hindmarsh_rose",
            lib: FeatureLibrary::new(
                3,
                vec![
                    lin("u2", 1, 3),
                    power("u1^3", 0, 3, 3),
                    power("u1^2", 0, 2, 3),
                    lin("u3", 2, 3),
                    constant(3),
                    power("u1^2", 0, 2, 3),
                    lin("u2", 1, 3),
                    lin("u1", 0, 3),
                    constant(3),
                    lin("u3", 2, 3),
                ],
            )?,
            mask: EquationMask::new(vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]], 10)?,
            w_star: ParameterVector::from_vec(vec![
                10.0, -10.0, 30.0, -10.0, 10.0, -50.0, -10.0, 0.04, 0.0319, -0.01,
            ]),
            u0: vec![-1.31, -7.6, -0.2],
            t_final: 10.0,
            finest_m: 1024,
            rms_ref: 2.8,
            stiff: true,
        }),
        "ptb" => Ok(ModelSpec {
            name: "ptb",
            lib: FeatureLibrary::new(
                5,
                vec![
                    lin("u1", 0, 5),
                    product("u1*u3", 0, 2, 5),
                    lin("u4", 3, 5),
                    lin("u1", 0, 5),
                    product("u1*u3", 0, 2, 5),
                    lin("u4", 3, 5),
                    hill(4, 5),
                    product("u1*u3", 0, 2, 5),
                    lin("u4", 3, 5),
                    lin("u4", 3, 5),
                    hill(4, 5),
                ],
            )?,
            mask: EquationMask::new(
                vec![vec![0, 1, 2], vec![3], vec![4, 5, 6], vec![7, 8], vec![9, 10]],
                11,
            )?,
            // the hill rate enters equations 3 and 5 with opposite signs
            w_star: ParameterVector::from_vec(vec![
                -0.07, -0.6, 0.35, 0.07, -0.6, 0.05, 0.017, 0.6, -0.35, 0.3, -0.017,
            ]),
            u0: vec![1.0, 0.0, 1.0, 0.0, 1.0],
            t_final: 25.0,
            finest_m: 1024,
            rms_ref: 0.81,
            stiff: false,
        }),
        other => Err(WendyError::UnknownModel(other.to_string())),
    }
}

/// Clean trajectory at `m` intervals: solve once on the model's finest grid at
/// tolerance 1e-12, then subsample by the (power-of-two) factor `finest_m / m`.
pub fn truth_dataset(spec: &ModelSpec, m: usize) -> Result<Dataset> {
    if m == 0 || spec.finest_m % m != 0 {
        return Err(WendyError::IndivisibleFactor {
            factor: m.max(1),
            m: spec.finest_m,
        });
    }
    let grid = TimeGrid::from_span(spec.t_final, spec.finest_m)?;
    let fine = integrate::solve(
        &spec.lib,
        &spec.w_star_mat(),
        &spec.u0,
        &grid,
        &IntegratorOptions::default(),
    )?;
    subsample(&fine, spec.finest_m / m)
}

/// Additive i.i.d. Gaussian noise with `sigma = sigma_nr * ||vec(U)||_rms`;
/// deterministic per seed.
pub fn add_noise(truth: &Dataset, sigma_nr: f64, seed: u64) -> Dataset {
    assert!(sigma_nr >= 0.0, "noise ratio must be nonnegative");
    if sigma_nr == 0.0 {
        return truth.clone();
    }
    let sigma = sigma_nr * integrate::rms_norm(&truth.u);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, sigma).expect("positive sigma");
    let mut u = truth.u.clone();
    for v in u.iter_mut() {
        *v += rng.sample(normal);
    }
    Dataset::new(truth.grid.clone(), u).expect("shape preserved")
}

/// Keep every `factor`-th sample, endpoints included.
pub fn subsample(truth: &Dataset, factor: usize) -> Result<Dataset> {
    if factor == 0 {
        return Err(WendyError::IndivisibleFactor {
            factor,
            m: truth.grid.m(),
        });
    }
    if factor == 1 {
        return Ok(truth.clone());
    }
    let m = truth.grid.m();
    if m % factor != 0 {
        return Err(WendyError::IndivisibleFactor { factor, m });
    }
    let new_m = m / factor;
    let grid = TimeGrid::new(
        truth.grid.t0(),
        truth.grid.dt() * factor as f64,
        new_m + 1,
    )?;
    let u = DMatrix::from_fn(new_m + 1, truth.dim(), |r, c| truth.u[(r * factor, c)]);
    Dataset::new(grid, u)
}
