//! Structured run configuration for the CLI: one TOML document covering the
//! experiment sweep, estimator hyperparameters, integrator tolerances, and
//! test-function options. Unknown keys are rejected; every default matches
//! the method's reference values (eta = 9, alpha = 1e-10, tau_fp = 1e-6,
//! tau_sw = 1e-4, n0 = 10, max_its = 100).

use crate::bench::{Estimator, ExperimentConfig, LmOptions};
use crate::integrate::IntegratorOptions;
use crate::testfn::TestFnOptions;
use crate::types::{Result, WendyError};
use crate::wendy::IrlsOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: String,
    pub noise_ratios: Vec<f64>,
    pub subsample_factors: Vec<usize>,
    /// Desk-scale default; `full_scale = true` raises it to 100 trials.
    pub n_trials: usize,
    pub seed_base: u64,
    pub estimators: Vec<String>,
    pub full_scale: bool,
    pub irls: IrlsConfig,
    pub testfn: TestFnConfig,
    pub integrator: IntegratorConfig,
    pub lm: LmConfig,
    /// Batch size of the forward-solver baseline's multistart.
    pub n_starts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "logistic".into(),
            noise_ratios: vec![0.1],
            subsample_factors: vec![4],
            n_trials: 20,
            seed_base: 0,
            estimators: vec!["ols".into(), "wendy".into()],
            full_scale: false,
            irls: IrlsConfig::default(),
            testfn: TestFnConfig::default(),
            integrator: IntegratorConfig::default(),
            lm: LmConfig::default(),
            n_starts: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlsConfig {
    pub alpha: f64,
    pub tau_fp: f64,
    pub tau_sw: f64,
    pub n0: usize,
    pub max_its: usize,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        let o = IrlsOptions::default();
        Self {
            alpha: o.alpha,
            tau_fp: o.tau_fp,
            tau_sw: o.tau_sw,
            n0: o.n0,
            max_its: o.max_its,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestFnConfig {
    pub eta: f64,
    pub s: f64,
    pub stride: usize,
    pub radius_override: Option<usize>,
}

impl Default for TestFnConfig {
    fn default() -> Self {
        let o = TestFnOptions::default();
        Self {
            eta: o.eta,
            s: o.s,
            stride: o.stride,
            radius_override: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let o = IntegratorOptions::default();
        Self {
            rel_tol: o.rel_tol,
            abs_tol: o.abs_tol,
            max_steps: o.max_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub max_evals: usize,
    pub max_iter: usize,
    pub min_step: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        let o = LmOptions::default();
        Self {
            max_evals: o.max_evals,
            max_iter: o.max_iter,
            min_step: o.min_step,
        }
    }
}

impl RunConfig {
    /// Parse a TOML document, rejecting unknown keys with the parser's
    /// line/column diagnostics.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| WendyError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_ratios.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(WendyError::InvalidConfig(
                "noise_ratios must be finite and nonnegative".into(),
            ));
        }
        if self.subsample_factors.is_empty() || self.subsample_factors.contains(&0) {
            return Err(WendyError::InvalidConfig(
                "subsample_factors must be nonempty positive integers".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(WendyError::InvalidConfig("estimators is empty".into()));
        }
        for e in &self.estimators {
            e.parse::<Estimator>()?;
        }
        if !(self.testfn.s > 2.0 && self.testfn.s < 4.0) {
            return Err(WendyError::InvalidConfig(format!(
                "testfn.s must lie in (2, 4), got {}",
                self.testfn.s
            )));
        }
        if self.testfn.stride == 0 {
            return Err(WendyError::InvalidConfig("testfn.stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_trials(&self) -> usize {
        if self.full_scale {
            100
        } else {
            self.n_trials
        }
    }

    pub fn irls_options(&self) -> IrlsOptions {
        IrlsOptions {
            alpha: self.irls.alpha,
            tau_fp: self.irls.tau_fp,
            tau_sw: self.irls.tau_sw,
            n0: self.irls.n0,
            max_its: self.irls.max_its,
        }
    }

    pub fn testfn_options(&self) -> TestFnOptions {
        TestFnOptions {
            eta: self.testfn.eta,
            s: self.testfn.s,
            stride: self.testfn.stride,
            radius_override: self.testfn.radius_override,
        }
    }

    pub fn integrator_options(&self) -> IntegratorOptions {
        IntegratorOptions {
            rel_tol: self.integrator.rel_tol,
            abs_tol: self.integrator.abs_tol,
            max_steps: self.integrator.max_steps,
            ..IntegratorOptions::default()
        }
    }

    pub fn lm_options(&self) -> LmOptions {
        LmOptions {
            max_evals: self.lm.max_evals,
            max_iter: self.lm.max_iter,
            min_step: self.lm.min_step,
        }
    }

    pub fn to_experiment_config(&self) -> Result<ExperimentConfig> {
        self.validate()?;
        Ok(ExperimentConfig {
            model: self.model.clone(),
            noise_ratios: self.noise_ratios.clone(),
            subsample_factors: self.subsample_factors.clone(),
            n_trials: self.effective_trials(),
            seed_base: self.seed_base,
            estimators: self
                .estimators
                .iter()
                .map(|e| e.parse())
                .collect::<Result<Vec<_>>>()?,
            testfn: self.testfn_options(),
            irls: self.irls_options(),
            lm: self.lm_options(),
            n_starts: self.n_starts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.testfn.eta, 9.0);
        assert_eq!(cfg.irls.alpha, 1e-10);
        assert_eq!(cfg.irls.tau_fp, 1e-6);
        assert_eq!(cfg.irls.tau_sw, 1e-4);
        assert_eq!(cfg.irls.n0, 10);
        assert_eq!(cfg.irls.max_its, 100);
        assert_eq!(cfg.lm.max_evals, 2000);
        assert_eq!(cfg.lm.max_iter, 500);
        assert_eq!(cfg.lm.min_step, 1e-8);
        assert_eq!(cfg.n_trials, 20);
    }

    #[test]
    fn unknown_keys_are_rejected_with_diagnostics() {
        let err = RunConfig::from_toml_str("model = \"logistic\"\nbogus_key = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "diagnostic was: {msg}");
        assert_eq!(err.code(), "invalid_config");
    }

    #[test]
    fn toml_round_trip_preserves_resolved_config() {
        let cfg = RunConfig::from_toml_str(
            "model = \"lotka_volterra\"\nnoise_ratios = [0.1, 0.2]\n[irls]\nalpha = 1.0\n",
        )
        .unwrap();
        assert_eq!(cfg.model, "lotka_volterra");
        assert_eq!(cfg.irls.alpha, 1.0);
        // untouched fields keep reference defaults
        assert_eq!(cfg.irls.tau_fp, 1e-6);
        let round = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(round.to_toml_string(), cfg.to_toml_string());
    }

    #[test]
    fn bad_estimator_is_a_validation_error() {
        let err = RunConfig::from_toml_str("estimators = [\"wendy\", \"nope\"]\n").unwrap_err();
        assert_eq!(err.code(), "invalid_config");
    }

    #[test]
    fn full_scale_flag_raises_trials() {
        let cfg = RunConfig::from_toml_str("full_scale = true\n").unwrap();
        assert_eq!(cfg.effective_trials(), 100);
    }
}
