//! Experiment harness: error metrics, the forward-solver nonlinear least
//! squares baseline (Levenberg-Marquardt over repeated ODE solves), and
//! noise/resolution sweeps with mean/median aggregation.

use crate::integrate::{self, IntegratorOptions, Method};
use crate::models::{self, ModelSpec};
use crate::testfn::TestFnOptions;
use crate::types::{Dataset, ParameterVector, Result, WendyError};
use crate::wendy::{self, IrlsOptions};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Relative coefficient error `||w_hat - w*||_2 / ||w*||_2`.
pub fn metric_e2(w_hat: &ParameterVector, w_star: &ParameterVector) -> f64 {
    assert_eq!(w_hat.len(), w_star.len(), "parameter lengths differ");
    (w_hat.as_vector() - w_star.as_vector()).norm() / w_star.as_vector().norm()
}

/// Forward-simulation error `||vec(U* - U_hat)||_2 / ||vec(U*)||_2`, with the
/// candidate simulated from the exact initial condition on the data grid.
/// Solver failure (an unstable candidate) maps to `+inf`.
pub fn metric_efs(w_hat: &ParameterVector, spec: &ModelSpec, truth: &Dataset) -> f64 {
    let w_mat = match spec.mask.embed(w_hat) {
        Ok(m) => m,
        Err(_) => return f64::INFINITY,
    };
    let opts = IntegratorOptions::default();
    match integrate::solve(&spec.lib, &w_mat, &spec.u0, &truth.grid, &opts) {
        Ok(sim) => {
            let diff = &sim.u - &truth.u;
            diff.norm() / truth.u.norm()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Levenberg-Marquardt stopping limits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_evals: usize,
    pub max_iter: usize,
    pub min_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            max_iter: 500,
            min_step: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub w: DVector<f64>,
    pub rnorm: f64,
    pub n_evals: usize,
    pub n_iters: usize,
}

/// Damped least squares with a Marquardt diagonal scaling and a forward-
/// difference Jacobian. The residual function returns `None` for infeasible
/// points (for example a diverging forward solve), which rejects the step.
pub fn lm_optimize(
    residual_fn: &mut dyn FnMut(&DVector<f64>) -> Option<DVector<f64>>,
    w0: &DVector<f64>,
    opts: &LmOptions,
) -> Result<LmOutcome> {
    let p = w0.len();
    let mut n_evals = 0usize;
    let mut eval = |w: &DVector<f64>, n_evals: &mut usize| -> Option<DVector<f64>> {
        *n_evals += 1;
        residual_fn(w).filter(|r| r.iter().all(|v| v.is_finite()))
    };

    let mut w = w0.clone();
    let mut r = eval(&w, &mut n_evals).ok_or(WendyError::InitialPointInfeasible)?;
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut n_iters = 0usize;

    'outer: for _ in 0..opts.max_iter {
        n_iters += 1;
        // forward-difference Jacobian
        let mut jac = DMatrix::zeros(r.len(), p);
        for j in 0..p {
            let step = 1e-7f64.max(1e-7 * w[j].abs());
            let mut wp = w.clone();
            wp[j] += step;
            if n_evals >= opts.max_evals {
                break 'outer;
            }
            match eval(&wp, &mut n_evals) {
                Some(rp) => {
                    for i in 0..r.len() {
                        jac[(i, j)] = (rp[i] - r[i]) / step;
                    }
                }
                None => {
                    // fall back to a backward difference at the boundary of
                    // the feasible region
                    wp[j] = w[j] - step;
                    match eval(&wp, &mut n_evals) {
                        Some(rm) => {
                            for i in 0..r.len() {
                                jac[(i, j)] = (r[i] - rm[i]) / step;
                            }
                        }
                        None => break 'outer,
                    }
                }
            }
        }
        let grad = jac.tr_mul(&r);
        if grad.amax() < 1e-14 * cost.max(1.0) {
            break;
        }
        let a = jac.tr_mul(&jac);

        loop {
            let mut damped = a.clone();
            for i in 0..p {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-12);
            }
            let delta = match nalgebra::Cholesky::new(damped) {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda = (lambda * 11.0).min(1e10);
                    continue;
                }
            };
            if n_evals >= opts.max_evals {
                break 'outer;
            }
            let trial = &w + &delta;
            let step_rel = delta.norm() / w.norm().max(1e-12);
            match eval(&trial, &mut n_evals) {
                Some(rt) if rt.norm_squared() < cost => {
                    w = trial;
                    r = rt;
                    cost = r.norm_squared();
                    lambda = (lambda / 9.0).max(1e-12);
                    if step_rel < opts.min_step || cost == 0.0 {
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda = (lambda * 11.0).min(1e10);
                    if step_rel < opts.min_step {
                        // cannot move: converged against the damping wall
                        break 'outer;
                    }
                    if lambda >= 1e10 {
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(LmOutcome {
        w,
        rnorm: cost.sqrt(),
        n_evals,
        n_iters,
    })
}

/// Initial-guess strategy for the forward-solver baseline.
#[derive(Debug, Clone)]
pub enum StartStrategy {
    /// Draws centered at the true parameters with per-coordinate standard
    /// deviation `0.25 |w*_j|`: uniform on `w*_j +/- sigma_j sqrt(3)`, so the
    /// signs always match the truth. Synthetic benchmarking only.
    BatchUniform { n_starts: usize, seed: u64 },
    /// Same protocol with Gaussian draws.
    BatchGaussian { n_starts: usize, seed: u64 },
    /// Single start from a weak-form estimate.
    WendyInit(ParameterVector),
}

#[derive(Debug, Clone)]
pub struct FsnlsOutcome {
    pub w_hat: ParameterVector,
    pub rnorm: f64,
    /// Starts that failed outright (infeasible initial point).
    pub n_failed_starts: usize,
    pub n_evals: usize,
}

/// Forward-solver nonlinear least squares: fit `vec(simulate(w) - U)` by
/// Levenberg-Marquardt, simulating from the exact initial condition at the
/// data resolution with per-model solver choice (tolerance 1e-6).
pub fn fsnls(
    spec: &ModelSpec,
    data: &Dataset,
    strategy: &StartStrategy,
    lm_opts: &LmOptions,
) -> Result<FsnlsOutcome> {
    let sim_opts = IntegratorOptions {
        rel_tol: 1e-6,
        abs_tol: 1e-6,
        method: if spec.stiff {
            Method::StiffImplicit
        } else {
            Method::ExplicitRk45
        },
        max_steps: 200_000,
    };
    let mut residual = |w: &DVector<f64>| -> Option<DVector<f64>> {
        let w_mat = spec
            .mask
            .embed(&ParameterVector::from_column(w.clone()))
            .ok()?;
        let sim = integrate::solve(&spec.lib, &w_mat, &spec.u0, &data.grid, &sim_opts).ok()?;
        let diff = &sim.u - &data.u;
        Some(DVector::from_column_slice(diff.as_slice()))
    };

    let starts: Vec<DVector<f64>> = match strategy {
        StartStrategy::WendyInit(w) => vec![w.as_vector().clone()],
        StartStrategy::BatchUniform { n_starts, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*n_starts)
                .map(|_| {
                    DVector::from_iterator(
                        spec.w_star.len(),
                        spec.w_star.as_slice().iter().map(|&wj| {
                            let half = 0.25 * wj.abs() * 3.0f64.sqrt();
                            wj + rng.random_range(-half..=half)
                        }),
                    )
                })
                .collect()
        }
        StartStrategy::BatchGaussian { n_starts, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*n_starts)
                .map(|_| {
                    DVector::from_iterator(
                        spec.w_star.len(),
                        spec.w_star.as_slice().iter().map(|&wj| {
                            let normal = rand_distr::Normal::new(wj, 0.25 * wj.abs().max(1e-12))
                                .expect("positive std");
                            rng.sample(normal)
                        }),
                    )
                })
                .collect()
        }
    };

    let mut best: Option<LmOutcome> = None;
    let mut n_failed = 0usize;
    let mut total_evals = 0usize;
    for w0 in &starts {
        match lm_optimize(&mut residual, w0, lm_opts) {
            Ok(out) => {
                total_evals += out.n_evals;
                if best.as_ref().is_none_or(|b| out.rnorm < b.rnorm) {
                    best = Some(out);
                }
            }
            Err(_) => n_failed += 1,
        }
    }
    let best = best.ok_or(WendyError::AllStartsFailed)?;
    Ok(FsnlsOutcome {
        w_hat: ParameterVector::from_column(best.w),
        rnorm: best.rnorm,
        n_failed_starts: n_failed,
        n_evals: total_evals,
    })
}

/// Which estimators a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ols,
    Wendy,
    Fsnls,
    WendyFsnls,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Ols => "ols",
            Estimator::Wendy => "wendy",
            Estimator::Fsnls => "fsnls",
            Estimator::WendyFsnls => "wendy_fsnls",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = WendyError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ols" => Ok(Estimator::Ols),
            "wendy" => Ok(Estimator::Wendy),
            "fsnls" => Ok(Estimator::Fsnls),
            "wendy_fsnls" => Ok(Estimator::WendyFsnls),
            other => Err(WendyError::InvalidConfig(format!(
                "unknown estimator '{other}' (expected ols, wendy, fsnls, wendy_fsnls)"
            ))),
        }
    }
}

/// One sweep: a model, noise ratios, resolutions, trials, and estimators.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: String,
    pub noise_ratios: Vec<f64>,
    pub subsample_factors: Vec<usize>,
    pub n_trials: usize,
    pub seed_base: u64,
    pub estimators: Vec<Estimator>,
    pub testfn: TestFnOptions,
    pub irls: IrlsOptions,
    pub lm: LmOptions,
    pub n_starts: usize,
}

impl ExperimentConfig {
    pub fn new(model: &str) -> Self {
        Self {
            model: model.to_string(),
            noise_ratios: vec![0.1],
            subsample_factors: vec![4],
            n_trials: 20,
            seed_base: 0,
            estimators: vec![Estimator::Ols, Estimator::Wendy],
            testfn: TestFnOptions::default(),
            irls: IrlsOptions::default(),
            lm: LmOptions::default(),
            n_starts: 5,
        }
    }
}

/// One estimator run on one noisy dataset.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub model: String,
    pub m: usize,
    pub sigma_nr: f64,
    pub estimator: &'static str,
    pub seed: u64,
    pub e2: f64,
    pub efs: f64,
    pub walltime_seconds: f64,
    pub n_iters: usize,
    pub stop_reason: Option<String>,
    pub diverged: bool,
}

/// Per-cell aggregates. Walltime is reported in the raw records only, so the
/// summary is reproducible run to run.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub model: String,
    pub m: usize,
    pub sigma_nr: f64,
    pub estimator: &'static str,
    pub n_trials: usize,
    pub n_diverged: usize,
    pub mean_e2: f64,
    pub median_e2: f64,
    pub mean_efs: f64,
    pub median_efs: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentTable {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<CellSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn finite(values: impl Iterator<Item = f64>) -> Vec<f64> {
    values.filter(|v| v.is_finite()).collect()
}

fn run_estimator(
    est: Estimator,
    spec: &ModelSpec,
    truth: &Dataset,
    noisy: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> TrialRecord {
    let mut record = TrialRecord {
        model: spec.name.to_string(),
        m: noisy.grid.m(),
        sigma_nr: 0.0,
        estimator: est.name(),
        seed,
        e2: f64::INFINITY,
        efs: f64::INFINITY,
        walltime_seconds: 0.0,
        n_iters: 0,
        stop_reason: None,
        diverged: true,
    };
    let start = Instant::now();
    let fitted: Result<(ParameterVector, usize, Option<String>)> = match est {
        Estimator::Ols => wendy::fit_ols(noisy, &spec.lib, &spec.mask, &cfg.testfn)
            .map(|(w, _)| (w, 1, None)),
        Estimator::Wendy => wendy::fit(noisy, &spec.lib, &spec.mask, &cfg.testfn, &cfg.irls)
            .map(|(r, _)| (r.w_hat, r.n_iters, Some(r.stop_reason.to_string()))),
        Estimator::Fsnls => {
            let strategy = StartStrategy::BatchUniform {
                n_starts: cfg.n_starts,
                seed: seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
            };
            fsnls(spec, noisy, &strategy, &cfg.lm).map(|o| (o.w_hat, o.n_evals, None))
        }
        Estimator::WendyFsnls => {
            wendy::fit(noisy, &spec.lib, &spec.mask, &cfg.testfn, &cfg.irls).and_then(|(r, _)| {
                let strategy = StartStrategy::WendyInit(r.w_hat);
                fsnls(spec, noisy, &strategy, &cfg.lm).map(|o| (o.w_hat, o.n_evals, None))
            })
        }
    };
    record.walltime_seconds = start.elapsed().as_secs_f64();
    if let Ok((w_hat, n_iters, stop_reason)) = fitted {
        record.e2 = metric_e2(&w_hat, &spec.w_star);
        record.efs = metric_efs(&w_hat, spec, truth);
        record.n_iters = n_iters;
        record.stop_reason = stop_reason;
        record.diverged = !record.e2.is_finite();
    }
    record
}

/// Run the sweep: truth is generated once per resolution, noise is drawn per
/// trial with seed `seed_base + trial`, and every estimator runs on the same
/// noisy dataset. Walltime covers the estimator only, not data generation or
/// metric evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentTable> {
    if cfg.n_trials == 0 {
        return Err(WendyError::InvalidConfig("n_trials must be >= 1".into()));
    }
    let spec = models::catalog(&cfg.model)?;
    let finest = models::truth_dataset(&spec, spec.finest_m)?;

    let mut jobs = Vec::new();
    for &factor in &cfg.subsample_factors {
        let truth = models::subsample(&finest, factor)?;
        for &sigma_nr in &cfg.noise_ratios {
            for trial in 0..cfg.n_trials {
                jobs.push((truth.clone(), sigma_nr, cfg.seed_base + trial as u64));
            }
        }
    }

    let mut records: Vec<TrialRecord> = jobs
        .par_iter()
        .flat_map_iter(|(truth, sigma_nr, seed)| {
            let noisy = models::add_noise(truth, *sigma_nr, *seed);
            cfg.estimators
                .iter()
                .map(|&est| {
                    let mut r = run_estimator(est, &spec, truth, &noisy, cfg, *seed);
                    r.sigma_nr = *sigma_nr;
                    r
                })
                .collect::<Vec<_>>()
        })
        .collect();

    records.sort_by(|a, b| {
        (a.m, a.sigma_nr, a.estimator, a.seed)
            .partial_cmp(&(b.m, b.sigma_nr, b.estimator, b.seed))
            .expect("finite keys")
    });

    let mut summaries = Vec::new();
    for &factor in &cfg.subsample_factors {
        let m = spec.finest_m / factor;
        for &sigma_nr in &cfg.noise_ratios {
            for &est in &cfg.estimators {
                let cell: Vec<&TrialRecord> = records
                    .iter()
                    .filter(|r| r.m == m && r.sigma_nr == sigma_nr && r.estimator == est.name())
                    .collect();
                let e2 = finite(cell.iter().map(|r| r.e2));
                let efs = finite(cell.iter().map(|r| r.efs));
                summaries.push(CellSummary {
                    model: spec.name.to_string(),
                    m,
                    sigma_nr,
                    estimator: est.name(),
                    n_trials: cell.len(),
                    n_diverged: cell
                        .iter()
                        .filter(|r| r.diverged || !r.efs.is_finite())
                        .count(),
                    mean_e2: e2.iter().sum::<f64>() / e2.len().max(1) as f64,
                    median_e2: median(&e2),
                    mean_efs: efs.iter().sum::<f64>() / efs.len().max(1) as f64,
                    median_efs: median(&efs),
                });
            }
        }
    }
    Ok(ExperimentTable { records, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn e2_metric_basics() {
        let w = ParameterVector::from_vec(vec![3.0, -1.0, -6.0, 1.0]);
        assert_eq!(metric_e2(&w, &w), 0.0);
        let double = ParameterVector::from_vec(vec![6.0, -2.0, -12.0, 2.0]);
        assert_relative_eq!(metric_e2(&double, &w), 1.0, epsilon = 1e-14);
        let mut shifted = w.as_vector().clone();
        shifted[0] += 0.5;
        assert_relative_eq!(
            metric_e2(&ParameterVector::from_column(shifted), &w),
            0.5 / w.as_vector().norm(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn efs_metric_truth_and_divergence() {
        let spec = models::catalog("lotka_volterra").unwrap();
        let truth = models::truth_dataset(&spec, 128).unwrap();
        // identical dynamics re-simulated on the same grid
        let efs = metric_efs(&spec.w_star, &spec, &truth);
        assert!(efs <= 1e-8, "EFS at the truth is {efs}");

        // flipping the damping signs gives mutually reinforcing quadratic
        // growth and a finite-time blow-up
        let flipped = ParameterVector::from_vec(vec![3.0, 1.0, 6.0, 1.0]);
        assert!(metric_efs(&flipped, &spec, &truth).is_infinite());

        // a perturbed candidate is positive and finite
        let near = ParameterVector::from_vec(vec![3.0, -1.0, -6.0, 1.1]);
        let efs = metric_efs(&near, &spec, &truth);
        assert!(efs.is_finite() && efs > 0.0);
    }

    #[test]
    fn lm_solves_linear_problem_in_few_iterations() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let w_ls = a.clone().svd(true, true).solve(&c, 1e-12).unwrap();
        let mut f = |w: &DVector<f64>| Some(&a * w - &c);
        let out = lm_optimize(&mut f, &DVector::zeros(4), &LmOptions::default()).unwrap();
        assert!(
            (out.w - &w_ls).norm() < 1e-6,
            "LM missed the least-squares solution"
        );
        assert!(out.n_iters <= 5, "took {} iterations", out.n_iters);
    }

    #[test]
    fn lm_reaches_rosenbrock_minimum() {
        let mut f = |w: &DVector<f64>| {
            Some(DVector::from_vec(vec![
                10.0 * (w[1] - w[0] * w[0]),
                1.0 - w[0],
            ]))
        };
        let out = lm_optimize(
            &mut f,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &LmOptions::default(),
        )
        .unwrap();
        assert!(out.rnorm < 1e-8, "residual norm {}", out.rnorm);
        assert_relative_eq!(out.w[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(out.w[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn lm_rejects_infeasible_start() {
        let mut f = |_: &DVector<f64>| -> Option<DVector<f64>> { None };
        let err = lm_optimize(&mut f, &DVector::zeros(2), &LmOptions::default()).unwrap_err();
        assert_eq!(err.code(), "initial_point_infeasible");
    }

    #[test]
    fn fsnls_consistency_on_clean_lotka_volterra() {
        let spec = models::catalog("lotka_volterra").unwrap();
        let truth = models::truth_dataset(&spec, 256).unwrap();
        // start exactly at the truth: LM must stay there
        let out = fsnls(
            &spec,
            &truth,
            &StartStrategy::WendyInit(spec.w_star.clone()),
            &LmOptions::default(),
        )
        .unwrap();
        let e2 = metric_e2(&out.w_hat, &spec.w_star);
        assert!(e2 <= 1e-4, "E2 = {e2}");
    }

    #[test]
    fn batch_starts_keep_the_true_signs() {
        use rand::Rng;
        let spec = models::catalog("hindmarsh_rose").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            for (j, &wj) in spec.w_star.as_slice().iter().enumerate() {
                let half = 0.25 * wj.abs() * 3.0f64.sqrt();
                let draw = wj + rng.random_range(-half..=half);
                assert_eq!(
                    draw.signum(),
                    wj.signum(),
                    "start sign flipped at coordinate {j}"
                );
            }
        }
    }

    #[test]
    fn experiment_is_deterministic_and_noiseless_floor_holds() {
        let mut cfg = ExperimentConfig::new("logistic");
        cfg.noise_ratios = vec![0.0];
        cfg.subsample_factors = vec![2];
        cfg.n_trials = 1;
        let t1 = run_experiment(&cfg).unwrap();
        let t2 = run_experiment(&cfg).unwrap();
        assert_eq!(t1.records.len(), 2);
        for (a, b) in t1.records.iter().zip(&t2.records) {
            assert_eq!(a.e2, b.e2);
            assert_eq!(a.efs, b.efs);
            assert_eq!(a.seed, b.seed);
        }
        let wendy_cell = t1
            .summaries
            .iter()
            .find(|s| s.estimator == "wendy")
            .unwrap();
        assert!(
            wendy_cell.median_e2 <= 1e-3,
            "noiseless logistic E2 {}",
            wendy_cell.median_e2
        );
        assert_eq!(wendy_cell.n_diverged, 0);
    }

    #[test]
    fn aggregates_match_recomputation_from_rows() {
        let mut cfg = ExperimentConfig::new("logistic");
        cfg.noise_ratios = vec![0.2];
        cfg.subsample_factors = vec![4];
        cfg.n_trials = 5;
        let t = run_experiment(&cfg).unwrap();
        for s in &t.summaries {
            let rows: Vec<f64> = t
                .records
                .iter()
                .filter(|r| r.estimator == s.estimator && r.m == s.m && r.sigma_nr == s.sigma_nr)
                .map(|r| r.e2)
                .filter(|v| v.is_finite())
                .collect();
            assert!(!rows.is_empty());
            assert_relative_eq!(s.mean_e2, rows.iter().sum::<f64>() / rows.len() as f64);
            assert_relative_eq!(s.median_e2, median(&rows));
        }
    }
}
