use clap::{Parser, Subcommand};
use std::path::PathBuf;
use wendy::bench::Estimator;
use wendy::cli::{self, EstimateArgs};
use wendy::config::RunConfig;
use wendy::types::{ErrorCategory, Result, WendyError};

#[derive(Parser)]
#[command(
    name = "wendy",
    version,
    about = "Weak-form, forward-solver-free parameter estimation for ODE systems"
)]
struct Cli {
    /// Worker threads for parallel trials (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the benchmark model catalog
    Models {
        #[command(subcommand)]
        cmd: ModelsCmd,
    },
    /// Simulate a catalog model to CSV; writes a `.truth.csv` sibling with the
    /// clean trajectory
    Simulate {
        model: String,
        /// Number of time intervals M (samples = M + 1); must divide the
        /// model's finest grid
        #[arg(long, default_value_t = 512)]
        points: usize,
        /// Noise ratio sigma_NR
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate parameters from a `t,u1..ud` CSV
    Estimate {
        data: PathBuf,
        /// Catalog model supplying the feature library
        #[arg(long)]
        model: String,
        /// `wendy` (reweighted) or `ols`
        #[arg(long, default_value = "wendy")]
        estimator: String,
        /// Confidence level for the reported intervals
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Covariance relaxation override
        #[arg(long)]
        alpha: Option<f64>,
        /// Bump shape parameter override
        #[arg(long)]
        eta: Option<f64>,
        /// Fix the minimum test-function radius instead of selecting it from
        /// the data
        #[arg(long)]
        radius: Option<usize>,
        /// Estimate all J*d coefficients instead of the model's per-equation
        /// layout
        #[arg(long)]
        full_library: bool,
        /// TOML configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the fully resolved configuration and exit
        #[arg(long)]
        print_config: bool,
    },
    /// Run a benchmark sweep from a TOML config
    Benchmark {
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Print the fully resolved configuration and exit
        #[arg(long)]
        print_config: bool,
    },
    /// Compare estimators on one model/noise/resolution cell
    Compare {
        model: String,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        /// Comma-separated subset of ols,wendy,fsnls,wendy_fsnls
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
        /// Also write per-trial records here
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ModelsCmd {
    /// List the catalog (one line per model, or full cards with --json)
    List {
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_toml_str(&std::fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Models {
            cmd: ModelsCmd::List { json },
        } => {
            print!("{}", cli::cmd_models_list(json)?);
            Ok(())
        }
        Command::Simulate {
            model,
            points,
            noise,
            seed,
            out,
        } => cli::cmd_simulate(&model, points, noise, seed, &out),
        Command::Estimate {
            data,
            model,
            estimator,
            level,
            alpha,
            eta,
            radius,
            full_library,
            config,
            out,
            print_config,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(a) = alpha {
                cfg.irls.alpha = a;
            }
            if let Some(e) = eta {
                cfg.testfn.eta = e;
            }
            if let Some(r) = radius {
                cfg.testfn.radius_override = Some(r);
            }
            if print_config {
                print!("{}", cfg.to_toml_string());
                return Ok(());
            }
            if !(level > 0.0 && level < 1.0) {
                return Err(WendyError::InvalidConfig(format!(
                    "confidence level must lie in (0, 1), got {level}"
                )));
            }
            let args = EstimateArgs {
                data_path: data,
                model,
                estimator: estimator.parse()?,
                level,
                full_library,
                config: cfg,
            };
            let report = cli::cmd_estimate(&args)?;
            match out {
                Some(p) => std::fs::write(p, report)?,
                None => println!("{report}"),
            }
            Ok(())
        }
        Command::Benchmark {
            config,
            out_dir,
            print_config,
        } => {
            let cfg = RunConfig::from_toml_str(&std::fs::read_to_string(&config)?)?;
            if print_config {
                print!("{}", cfg.to_toml_string());
                return Ok(());
            }
            cli::cmd_benchmark(&cfg, &out_dir)
        }
        Command::Compare {
            model,
            points,
            noise,
            trials,
            seed_base,
            estimators,
            out_dir,
            config,
        } => {
            let cfg = load_config(&config)?;
            let ests: Vec<Estimator> = match estimators {
                Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?,
                None => vec![
                    Estimator::Ols,
                    Estimator::Wendy,
                    Estimator::Fsnls,
                    Estimator::WendyFsnls,
                ],
            };
            let table = cli::cmd_compare(
                &model,
                points,
                noise,
                trials,
                seed_base,
                &ests,
                &cfg,
                out_dir.as_deref(),
            )?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .ok();
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error [{}]: {e}", e.code());
        let code = match e.category() {
            ErrorCategory::Validation => 2,
            ErrorCategory::Runtime => 1,
        };
        std::process::exit(code);
    }
}
