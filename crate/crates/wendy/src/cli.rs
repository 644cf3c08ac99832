//! Command handlers behind the `wendy` binary: data simulation, estimation
//! from CSV, benchmark sweeps, and estimator comparisons. Handlers return
//! strings or write files; the binary owns argument parsing and exit codes.

use crate::bench::{self, CellSummary, Estimator, TrialRecord};
use crate::config::RunConfig;
use crate::models;
use crate::types::{Dataset, EquationMask, Result, TimeGrid, WendyError};
use crate::wendy;
use nalgebra::DMatrix;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Model cards for `models list`.
#[derive(Debug, Serialize)]
struct ModelCard {
    name: &'static str,
    d: usize,
    n_features: usize,
    features: Vec<String>,
    w_star: Vec<f64>,
    u0: Vec<f64>,
    t_final: f64,
    finest_m: usize,
    rms_ref: f64,
    stiff: bool,
    notes: &'static str,
}

fn model_card(name: &str) -> Result<ModelCard> {
    let spec = models::catalog(name)?;
    Ok(ModelCard {
        name: spec.name,
        d: spec.dim(),
        n_features: spec.n_features(),
        features: spec
            .lib
            .features()
            .iter()
            .map(|f| f.name.clone())
            .collect(),
        w_star: spec.w_star.as_slice().to_vec(),
        u0: spec.u0.clone(),
        t_final: spec.t_final,
        finest_m: spec.finest_m,
        rms_ref: spec.rms_ref,
        stiff: spec.stiff,
        notes: match spec.name {
            // equal-variance additive noise swamps the small-amplitude third
            // component well before the others
            "hindmarsh_rose" => {
                "third component has small amplitude; moderate noise already makes it hard to identify"
            }
            _ => "",
        },
    })
}

pub fn cmd_models_list(json: bool) -> Result<String> {
    let cards: Vec<ModelCard> = models::MODEL_NAMES
        .iter()
        .map(|n| model_card(n))
        .collect::<Result<_>>()?;
    if json {
        return Ok(serde_json::to_string_pretty(&cards).expect("cards serialize"));
    }
    let mut out = String::new();
    writeln!(out, "{:<16} {:>2} {:>3} {:>7} {:>8} {:>7}  stiff", "name", "d", "J", "T", "finest_M", "rms").unwrap();
    for c in cards {
        writeln!(
            out,
            "{:<16} {:>2} {:>3} {:>7} {:>8} {:>7}  {}",
            c.name, c.d, c.n_features, c.t_final, c.finest_m, c.rms_ref, c.stiff
        )
        .unwrap();
    }
    Ok(out)
}

fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    write!(out, "t").unwrap();
    for i in 0..ds.dim() {
        write!(out, ",u{}", i + 1).unwrap();
    }
    out.push('\n');
    for m in 0..ds.grid.n_samples() {
        write!(out, "{}", ds.grid.t(m)).unwrap();
        for i in 0..ds.dim() {
            write!(out, ",{}", ds.u[(m, i)]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Sibling path for the clean trajectory: `data.csv` -> `data.truth.csv`.
pub fn truth_path(out: &Path) -> PathBuf {
    out.with_extension("truth.csv")
}

/// Simulate a catalog model at `m` intervals, write the (possibly noisy)
/// dataset to `out` and the clean trajectory next to it. Deterministic per
/// seed.
pub fn cmd_simulate(model: &str, m: usize, sigma_nr: f64, seed: u64, out: &Path) -> Result<()> {
    let spec = models::catalog(model)?;
    let truth = models::truth_dataset(&spec, m)?;
    let noisy = models::add_noise(&truth, sigma_nr, seed);
    write_dataset_csv(out, &noisy)?;
    write_dataset_csv(&truth_path(out), &truth)?;
    Ok(())
}

/// Parse a `t,u1..ud` CSV into a dataset, requiring a uniform time grid
/// (relative jitter up to 1e-9).
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| WendyError::ParseError("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") || cols.len() < 2 {
        return Err(WendyError::ParseError(format!(
            "expected header 't,u1,...', found '{header}'"
        )));
    }
    let d = cols.len() - 1;
    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(WendyError::ParseError(format!(
                "line {}: expected {} fields, found {}",
                ln + 2,
                d + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| WendyError::ParseError(format!("line {}: {e}", ln + 2)))
        };
        times.push(parse(fields[0])?);
        rows.push(fields[1..].iter().map(|s| parse(s)).collect::<Result<_>>()?);
    }
    let n = times.len();
    if n < 3 {
        return Err(WendyError::ParseError(format!(
            "need at least 3 samples, found {n}"
        )));
    }
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(WendyError::NonUniformGrid(
            "time column is not increasing".into(),
        ));
    }
    for i in 0..n - 1 {
        let gap = times[i + 1] - times[i];
        if ((gap - dt) / dt).abs() > 1e-9 {
            return Err(WendyError::NonUniformGrid(format!(
                "gap {} at sample {} differs from dt = {}",
                gap, i, dt
            )));
        }
    }
    let grid = TimeGrid::new(times[0], dt, n)?;
    let u = DMatrix::from_fn(n, d, |r, c| rows[r][c]);
    Dataset::new(grid, u)
}

#[derive(Debug, Clone)]
pub struct EstimateArgs {
    pub data_path: PathBuf,
    pub model: String,
    pub estimator: Estimator,
    pub level: f64,
    pub full_library: bool,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub model: String,
    pub estimator: &'static str,
    pub m: usize,
    pub dt: f64,
    pub min_radius: usize,
    pub k: usize,
    pub w_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stdx: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_upper: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
}

/// Estimate parameters from a CSV dataset; returns the JSON report.
pub fn cmd_estimate(args: &EstimateArgs) -> Result<String> {
    let ds = read_dataset_csv(&args.data_path)?;
    let spec = models::catalog(&args.model)?;
    if ds.dim() != spec.dim() {
        return Err(WendyError::DimensionMismatch(format!(
            "data has {} states but model '{}' has {}",
            ds.dim(),
            spec.name,
            spec.dim()
        )));
    }
    let mask = if args.full_library {
        EquationMask::full(spec.n_features(), spec.dim())
    } else {
        spec.mask.clone()
    };
    let tf = args.config.testfn_options();
    let report = match args.estimator {
        Estimator::Ols => {
            let (w, basis) = wendy::fit_ols(&ds, &spec.lib, &mask, &tf)?;
            EstimateReport {
                schema_version: 1,
                model: spec.name.to_string(),
                estimator: "ols",
                m: ds.grid.m(),
                dt: ds.grid.dt(),
                min_radius: basis.min_radius,
                k: basis.k(),
                w_hat: w.as_slice().to_vec(),
                sigma_hat: None,
                stdx: None,
                ci_level: None,
                ci_lower: None,
                ci_upper: None,
                n_iters: None,
                stop_reason: None,
            }
        }
        Estimator::Wendy => {
            let (res, basis) =
                wendy::fit(&ds, &spec.lib, &mask, &tf, &args.config.irls_options())?;
            let cis = wendy::confidence_intervals(&res, args.level);
            EstimateReport {
                schema_version: 1,
                model: spec.name.to_string(),
                estimator: "wendy",
                m: ds.grid.m(),
                dt: ds.grid.dt(),
                min_radius: basis.min_radius,
                k: basis.k(),
                w_hat: res.w_hat.as_slice().to_vec(),
                sigma_hat: Some(res.sigma_hat),
                stdx: Some(res.stdx.as_slice().to_vec()),
                ci_level: Some(args.level),
                ci_lower: Some(cis.iter().map(|c| c.0).collect()),
                ci_upper: Some(cis.iter().map(|c| c.1).collect()),
                n_iters: Some(res.n_iters),
                stop_reason: Some(res.stop_reason.to_string()),
            }
        }
        other => {
            return Err(WendyError::InvalidConfig(format!(
                "estimate supports ols and wendy, not {}",
                other.name()
            )))
        }
    };
    Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
}

#[derive(Debug, Serialize)]
struct DropRow {
    model: String,
    m: usize,
    sigma_nr: f64,
    e2_drop_percent: f64,
}

#[derive(Debug, Serialize)]
struct BenchmarkSummary<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    cells: &'a [CellSummary],
    /// Median percentage drop in E2 from the OLS solution to the reweighted
    /// one, per sweep cell.
    ols_to_wendy_drop: Vec<DropRow>,
}

fn drop_rows(cells: &[CellSummary]) -> Vec<DropRow> {
    let mut rows = Vec::new();
    for c in cells {
        if c.estimator != "ols" {
            continue;
        }
        if let Some(w) = cells.iter().find(|x| {
            x.estimator == "wendy" && x.m == c.m && x.sigma_nr == c.sigma_nr && x.model == c.model
        }) {
            rows.push(DropRow {
                model: c.model.clone(),
                m: c.m,
                sigma_nr: c.sigma_nr,
                e2_drop_percent: 100.0 * (1.0 - w.median_e2 / c.median_e2),
            });
        }
    }
    rows
}

fn write_records_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| WendyError::ParseError(e.to_string()))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| WendyError::ParseError(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_long_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut out = String::from("model,m,sigma_nr,estimator,metric,value\n");
    for r in records {
        for (metric, value) in [
            ("e2", r.e2),
            ("efs", r.efs),
            ("walltime_seconds", r.walltime_seconds),
        ] {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model, r.m, r.sigma_nr, r.estimator, metric, value
            )
            .unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Run the sweep described by a TOML config and write `trials.csv`,
/// `summary.json`, and plot-ready `long.csv` into `out_dir`. The summary
/// holds only reproducible quantities; per-trial walltimes stay in the CSVs.
pub fn cmd_benchmark(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let table = bench::run_experiment(&config.to_experiment_config()?)?;
    std::fs::create_dir_all(out_dir)?;
    write_records_csv(&out_dir.join("trials.csv"), &table.records)?;
    write_long_csv(&out_dir.join("long.csv"), &table.records)?;
    let summary = BenchmarkSummary {
        schema_version: 1,
        config,
        cells: &table.summaries,
        ols_to_wendy_drop: drop_rows(&table.summaries),
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(())
}

/// Head-to-head comparison on one sweep cell; returns a printable table and
/// optionally writes the raw trial records.
pub fn cmd_compare(
    model: &str,
    points: usize,
    sigma_nr: f64,
    trials: usize,
    seed_base: u64,
    estimators: &[Estimator],
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<String> {
    let spec = models::catalog(model)?;
    if points == 0 || spec.finest_m % points != 0 {
        return Err(WendyError::IndivisibleFactor {
            factor: points.max(1),
            m: spec.finest_m,
        });
    }
    let mut cfg = config.to_experiment_config()?;
    cfg.model = model.to_string();
    cfg.noise_ratios = vec![sigma_nr];
    cfg.subsample_factors = vec![spec.finest_m / points];
    cfg.n_trials = trials;
    cfg.seed_base = seed_base;
    cfg.estimators = estimators.to_vec();
    let table = bench::run_experiment(&cfg)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_records_csv(&dir.join("trials.csv"), &table.records)?;
    }

    let mut out = String::new();
    writeln!(
        out,
        "model={model} M={points} sigma_nr={sigma_nr} trials={trials}"
    )
    .unwrap();
    writeln!(
        out,
        "{:<12} {:>12} {:>12} {:>14} {:>9}",
        "estimator", "median_E2", "median_EFS", "median_wall_s", "diverged"
    )
    .unwrap();
    for est in estimators {
        let cell = table
            .summaries
            .iter()
            .find(|s| s.estimator == est.name())
            .expect("cell exists");
        let walls: Vec<f64> = table
            .records
            .iter()
            .filter(|r| r.estimator == est.name())
            .map(|r| r.walltime_seconds)
            .collect();
        writeln!(
            out,
            "{:<12} {:>12.5} {:>12.5} {:>14.4} {:>9}",
            est.name(),
            cell.median_e2,
            cell.median_efs,
            bench::median(&walls),
            cell.n_diverged
        )
        .unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("wendy-cli-{name}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn simulate_zero_noise_equals_truth_file() {
        let dir = tmpdir("sim0");
        let out = dir.join("logistic.csv");
        cmd_simulate("logistic", 128, 0.0, 7, &out).unwrap();
        let a = std::fs::read(&out).unwrap();
        let b = std::fs::read(truth_path(&out)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulate_is_deterministic_per_seed() {
        let dir = tmpdir("simdet");
        let o1 = dir.join("a.csv");
        let o2 = dir.join("b.csv");
        cmd_simulate("lotka_volterra", 256, 0.2, 1, &o1).unwrap();
        cmd_simulate("lotka_volterra", 256, 0.2, 1, &o2).unwrap();
        assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    }

    #[test]
    fn ptb_header_has_five_states() {
        let dir = tmpdir("ptbhdr");
        let out = dir.join("ptb.csv");
        cmd_simulate("ptb", 128, 0.0, 0, &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("t,u1,u2,u3,u4,u5\n"));
    }

    #[test]
    fn csv_round_trip_is_bit_identical() {
        let dir = tmpdir("roundtrip");
        let out = dir.join("lv.csv");
        cmd_simulate("lotka_volterra", 128, 0.1, 3, &out).unwrap();
        let ds = read_dataset_csv(&out).unwrap();
        let spec = models::catalog("lotka_volterra").unwrap();
        let truth = models::truth_dataset(&spec, 128).unwrap();
        let noisy = models::add_noise(&truth, 0.1, 3);
        assert_eq!(ds.u, noisy.u);
        assert_eq!(ds.grid.dt().to_bits(), noisy.grid.dt().to_bits());
    }

    #[test]
    fn non_uniform_grid_is_rejected() {
        let dir = tmpdir("nonuni");
        let p = dir.join("bad.csv");
        std::fs::write(&p, "t,u1\n0.0,1.0\n1.0,2.0\n2.5,3.0\n3.0,4.0\n").unwrap();
        assert_eq!(
            read_dataset_csv(&p).unwrap_err().code(),
            "non_uniform_grid"
        );
    }

    #[test]
    fn estimate_on_clean_logistic_recovers_parameters() {
        let dir = tmpdir("estlog");
        let out = dir.join("logistic.csv");
        cmd_simulate("logistic", 512, 0.0, 0, &out).unwrap();
        let args = EstimateArgs {
            data_path: out,
            model: "logistic".into(),
            estimator: Estimator::Wendy,
            level: 0.95,
            full_library: false,
            config: RunConfig::default(),
        };
        let json = cmd_estimate(&args).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let w = v["w_hat"].as_array().unwrap();
        assert!((w[0].as_f64().unwrap() - 1.0).abs() < 1e-3);
        assert!((w[1].as_f64().unwrap() + 1.0).abs() < 1e-3);
        assert_eq!(v["schema_version"], 1);
    }

    #[test]
    fn alpha_one_estimate_matches_ols_estimate() {
        let dir = tmpdir("alpha1");
        let out = dir.join("logistic.csv");
        cmd_simulate("logistic", 256, 0.2, 5, &out).unwrap();
        let mut cfg = RunConfig::default();
        cfg.irls.alpha = 1.0;
        let wendy_args = EstimateArgs {
            data_path: out.clone(),
            model: "logistic".into(),
            estimator: Estimator::Wendy,
            level: 0.95,
            full_library: false,
            config: cfg,
        };
        let ols_args = EstimateArgs {
            data_path: out,
            model: "logistic".into(),
            estimator: Estimator::Ols,
            level: 0.95,
            full_library: false,
            config: RunConfig::default(),
        };
        let a: serde_json::Value =
            serde_json::from_str(&cmd_estimate(&wendy_args).unwrap()).unwrap();
        let b: serde_json::Value =
            serde_json::from_str(&cmd_estimate(&ols_args).unwrap()).unwrap();
        assert_eq!(a["w_hat"], b["w_hat"]);
    }

    #[test]
    fn benchmark_writes_three_artifacts_and_reruns_identically() {
        let dir = tmpdir("benchout");
        let cfg = RunConfig::from_toml_str(
            "model = \"logistic\"\nnoise_ratios = [0.2]\nsubsample_factors = [8]\nn_trials = 2\n",
        )
        .unwrap();
        cmd_benchmark(&cfg, &dir).unwrap();
        for f in ["trials.csv", "summary.json", "long.csv"] {
            let meta = std::fs::metadata(dir.join(f)).unwrap();
            assert!(meta.len() > 0, "{f} is empty");
        }
        let s1 = std::fs::read_to_string(dir.join("summary.json")).unwrap();
        cmd_benchmark(&cfg, &dir).unwrap();
        let s2 = std::fs::read_to_string(dir.join("summary.json")).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.contains("ols_to_wendy_drop"));
    }
}
