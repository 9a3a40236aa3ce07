use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use otbe::simlab::{
    lambda_curve_experiment, lambda_star_experiment, population_shift_experiment, sample, sem_to_moments, GridConfig,
    LambdaCurveConfig, LambdaStarConfig, Method, SemSpec,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::table::{matrix_rows, numbered, write_csv, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Toy,
    Grid,
    LambdaCurve,
    LambdaStar,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(value_enum)]
    pub experiment: Experiment,
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Iterations (lambda-star).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Repetitions (lambda-curve).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Sample size (toy, lambda-curve).
    #[arg(long)]
    pub n: Option<usize>,
}

/// Toy SEM draw: `(Z, Y)` correlated by `rho`, two features.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub rho: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            rho: 0.9,
            sigma1_sq: 1.0,
            sigma2_sq: 1.0,
            n: 10_000,
            seed: 0,
        }
    }
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: invalid config: {e}", p.display())))
        }
    }
}

fn reject(flag: &str, value: Option<usize>, experiment: &str) -> CliResult<()> {
    match value {
        Some(_) => Err(CliError::usage(format!("--{flag} does not apply to `{experiment}`"))),
        None => Ok(()),
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Ols => "ols",
        Method::Anchor => "anchor",
        Method::Barycentric => "barycentric",
    }
}

pub fn run(args: &SimulateArgs) -> CliResult<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let config = args.config.as_deref();
    match args.experiment {
        Experiment::Toy => {
            reject("iters", args.iters, "toy")?;
            reject("reps", args.reps, "toy")?;
            let mut cfg: ToyConfig = load(config)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(n) = args.n {
                cfg.n = n;
            }
            if cfg.n == 0 {
                return Err(CliError::usage("n must be at least 1"));
            }
            let spec = SemSpec::toy(cfg.rho, cfg.sigma1_sq, cfg.sigma2_sq).with_seed(cfg.seed);
            let exact = sem_to_moments(&spec).map_err(|e| CliError::usage(e.to_string()))?;
            let data = sample(&spec, cfg.n)?;
            let mut headers = Vec::new();
            for (name, dim) in spec.partition()? {
                headers.extend(numbered(&format!("{name}_"), dim));
            }
            write_csv(&args.out.join("data.csv"), &headers, matrix_rows(&data))?;
            let cov = exact.joint_cov();
            let cov_rows: Vec<Vec<f64>> = (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect();
            write_json(
                &args.out.join("summary.json"),
                &json!({
                    "experiment": "toy",
                    "resolved_config": cfg,
                    "columns": headers,
                    "exact_mean": exact.joint_mean().as_slice(),
                    "exact_cov": cov_rows,
                }),
            )
        }
        Experiment::Grid => {
            reject("iters", args.iters, "grid")?;
            reject("reps", args.reps, "grid")?;
            reject("n", args.n, "grid")?;
            let cfg: GridConfig = load(config)?;
            let report = population_shift_experiment(&cfg)?;
            let headers: Vec<String> = [
                "source", "target", "frobenius_distance", "best_lambda", "best_gamma", "mse_ols", "mse_anchor",
                "mse_bary", "winner",
            ]
            .map(String::from)
            .to_vec();
            write_csv(
                &args.out.join("pairs.csv"),
                &headers,
                report.records.iter().map(|r| {
                    vec![
                        r.source.to_string(),
                        r.target.to_string(),
                        r.frobenius_distance.to_string(),
                        r.best_lambda.to_string(),
                        r.best_gamma.to_string(),
                        r.mse_ols.to_string(),
                        r.mse_anchor.to_string(),
                        r.mse_bary.to_string(),
                        method_name(r.winner).to_string(),
                    ]
                }),
            )?;
            let shares = |c: &otbe::simlab::WinCounts| {
                let [o, a, b] = c.shares();
                json!({ "ols": o, "anchor": a, "barycentric": b })
            };
            write_json(
                &args.out.join("summary.json"),
                &json!({
                    "experiment": "grid",
                    "seed": args.seed,
                    "resolved_config": report.config,
                    "admissible_count": report.admissible.len(),
                    "admissible": report.admissible,
                    "pairs": report.records.len(),
                    "counts": report.counts,
                    "shares": shares(&report.counts),
                    "top_quartile_counts": report.top_quartile_counts,
                    "top_quartile_shares": shares(&report.top_quartile_counts),
                }),
            )
        }
        Experiment::LambdaCurve => {
            reject("iters", args.iters, "lambda-curve")?;
            let mut cfg: LambdaCurveConfig = load(config)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(r) = args.reps {
                cfg.reps = r;
            }
            if let Some(n) = args.n {
                cfg.n = n;
            }
            let report = lambda_curve_experiment(&cfg)?;
            let headers: Vec<String> = ["rep", "lambda", "conditional_correlation", "mse_source", "mse_target"]
                .map(String::from)
                .to_vec();
            write_csv(
                &args.out.join("curve.csv"),
                &headers,
                report.rows.iter().map(|r| {
                    vec![
                        r.rep.to_string(),
                        r.lambda.to_string(),
                        r.conditional_correlation.to_string(),
                        r.mse_source.to_string(),
                        r.mse_target.to_string(),
                    ]
                }),
            )?;
            write_json(
                &args.out.join("summary.json"),
                &json!({
                    "experiment": "lambda-curve",
                    "resolved_config": report.config,
                    "rows": report.rows.len(),
                    "decay_fraction": report.decay_fraction,
                }),
            )
        }
        Experiment::LambdaStar => {
            reject("reps", args.reps, "lambda-star")?;
            reject("n", args.n, "lambda-star")?;
            let mut cfg: LambdaStarConfig = load(config)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(i) = args.iters {
                cfg.iters = i;
            }
            let report = lambda_star_experiment(&cfg)?;
            let headers: Vec<String> = [
                "iter", "lambda_star", "argmin_lambda", "mse_ols", "mse_best", "relative_improvement",
                "frobenius_distance",
            ]
            .map(String::from)
            .to_vec();
            write_csv(
                &args.out.join("lambda_star.csv"),
                &headers,
                report.records.iter().map(|r| {
                    vec![
                        r.iter.to_string(),
                        r.lambda_star.to_string(),
                        r.argmin_lambda.to_string(),
                        r.mse_ols.to_string(),
                        r.mse_best.to_string(),
                        r.relative_improvement.to_string(),
                        r.frobenius_distance.to_string(),
                    ]
                }),
            )?;
            // ten equal bins on [0, 1], plus the count of exact zeros
            let mut bins = [0usize; 10];
            for l in report.samples() {
                bins[((l * 10.0) as usize).min(9)] += 1;
            }
            let zeros = report.samples().iter().filter(|&&l| l == 0.0).count();
            write_json(
                &args.out.join("summary.json"),
                &json!({
                    "experiment": "lambda-star",
                    "resolved_config": report.config,
                    "iterations": report.records.len(),
                    "boundary_mass": report.boundary_mass,
                    "interior_mass": report.interior_mass,
                    "zero_count": zeros,
                    "histogram": { "edges": (0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>(), "counts": bins },
                }),
            )
        }
    }
}
