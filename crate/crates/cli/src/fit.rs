use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use nalgebra::DMatrix;
use otbe::barycenter::{categorical_dispersion, multi_correlation};
use otbe::extractor::{fit_classification_samples, fit_regression_samples, FeatureModel, FitConfig, Roles, Task};
use otbe::heads::Head;
use otbe::matstats::{empirical_moments, RidgePolicy};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::schema::ColumnSchema;
use crate::table::{write_json, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Regress,
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextArg {
    S,
    Z,
    Both,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training data (CSV with header).
    #[arg(long)]
    pub data: PathBuf,
    /// Column roles; defaults to the y_/z_/s_/x_ prefix convention.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, value_enum, default_value = "regress")]
    pub task: TaskArg,
    /// Which observed nuisance columns the barycenter map removes.
    #[arg(long, value_enum, default_value = "s")]
    pub context: ContextArg,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Fit report path (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct FitReport<'a> {
    task: Task,
    n: usize,
    lambda: f64,
    dim: usize,
    context: ContextArg,
    features: &'a [String],
    outcomes: &'a [String],
    context_columns: &'a [String],
    h_spectrum: &'a [f64],
    term_c: f64,
    term_d: f64,
    objective: f64,
    delta_wy: f64,
    delta_ws: f64,
    /// `𝒞(W, Y)` on the training moments (regression).
    #[serde(skip_serializing_if = "Option::is_none")]
    multi_correlation_w_y: Option<f64>,
    /// `𝔻(W, Y)` on the training data (classification).
    #[serde(skip_serializing_if = "Option::is_none")]
    dispersion_w_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    training_accuracy: Option<f64>,
    warnings: &'a [String],
}

pub fn check_params(lambda: f64, dim: usize) -> CliResult<()> {
    if !lambda.is_finite() || lambda >= 1.0 {
        return Err(CliError::usage(format!("lambda must be < 1, got {lambda}")));
    }
    if lambda < 0.0 {
        return Err(CliError::usage(format!("lambda must be >= 0, got {lambda}")));
    }
    if dim == 0 {
        return Err(CliError::usage("dim must be at least 1"));
    }
    Ok(())
}

fn context_columns(schema: &ColumnSchema, context: ContextArg) -> CliResult<Vec<String>> {
    let cols = match context {
        ContextArg::S => schema.context.clone(),
        ContextArg::Z => schema.confounder.clone(),
        ContextArg::Both => schema.context.iter().chain(&schema.confounder).cloned().collect(),
    };
    if cols.is_empty() {
        let which = match context {
            ContextArg::S => "context",
            ContextArg::Z => "confounder",
            ContextArg::Both => "context or confounder",
        };
        return Err(CliError::usage(format!("schema error: --context needs at least one {which} column")));
    }
    Ok(cols)
}

fn hcat(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut at = 0;
    for p in parts {
        out.view_mut((0, at), (n, p.ncols())).copy_from(p);
        at += p.ncols();
    }
    out
}

pub fn run(args: &FitArgs) -> CliResult<()> {
    check_params(args.lambda, args.dim)?;
    let table = Table::read(&args.data)?;
    let classify = args.task == TaskArg::Classify;
    let schema = ColumnSchema::resolve(&table.headers, args.schema.as_deref(), classify)?;
    let ctx_cols = context_columns(&schema, args.context)?;
    if args.dim > schema.feature.len() {
        return Err(CliError::usage(format!(
            "dim must be at most the number of features ({})",
            schema.feature.len()
        )));
    }
    let x = table.numeric(&schema.feature)?;
    let s = table.numeric(&ctx_cols)?;
    let config = FitConfig::new(args.lambda, args.dim);
    let (mut model, outcomes, mc, disp, acc) = if classify {
        let labels = table.labels(&schema.outcome_class[0])?;
        let model = fit_classification_samples(&x, &s, &labels, &config).map_err(|e| e.at("fit"))?;
        let w = model.transform(&x)?;
        let Some(Head::Centroid(head)) = &model.head else {
            return Err(CliError::usage("classification model without centroid head"));
        };
        let predicted = head.predict(&w)?;
        let hits = predicted.iter().zip(&labels).filter(|(a, b)| a == b).count();
        let means: Vec<_> = head
            .labels
            .iter()
            .map(|l| {
                let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *l).collect();
                let mut m = nalgebra::DVector::zeros(w.ncols());
                for &i in &rows {
                    m += w.row(i).transpose();
                }
                m / rows.len() as f64
            })
            .collect();
        let grand = w.row_mean().transpose();
        let disp = categorical_dispersion(&means, &grand, &head.priors)?;
        (model, schema.outcome_class.clone(), None, Some(disp), Some(hits as f64 / labels.len() as f64))
    } else {
        let y = table.numeric(&schema.outcome)?;
        let data = hcat(&[&y, &s, &x]);
        let partition = [("y", y.ncols()), ("c", s.ncols()), ("x", x.ncols())];
        let roles = Roles {
            outcome: "y".into(),
            features: "x".into(),
            context: vec!["c".into()],
        };
        let model = fit_regression_samples(&data, &partition, &roles, &config)?;
        let moments = empirical_moments(&data, &partition)?;
        let with_w = model.augment(&moments, "x", "w")?;
        let mc = multi_correlation(&with_w, "w", "y", RidgePolicy::default()).map_err(|e| e.at("report"))?;
        (model, schema.outcome.clone(), Some(mc), None, None)
    };
    model.feature_names = schema.feature.clone();
    model.outcome_names = outcomes.clone();
    write_model(&args.out, &model)?;
    let report = FitReport {
        task: model.task,
        n: table.rows.len(),
        lambda: model.lambda,
        dim: model.dim,
        context: args.context,
        features: &schema.feature,
        outcomes: &outcomes,
        context_columns: &ctx_cols,
        h_spectrum: model.h_eigenvalues.as_slice(),
        term_c: model.term_c(),
        term_d: model.term_d(),
        objective: model.objective(),
        delta_wy: model.delta_wy,
        delta_ws: model.delta_ws,
        multi_correlation_w_y: mc,
        dispersion_w_y: disp,
        training_accuracy: acc,
        warnings: &model.warnings,
    };
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write_json(&report_path, &report)
}

pub fn write_model(path: &Path, model: &FeatureModel) -> CliResult<()> {
    std::fs::write(path, model.to_document()?).map_err(|e| CliError::io(path, e))
}

pub fn read_model(path: &Path) -> CliResult<FeatureModel> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(FeatureModel::from_document(&text)?)
}
