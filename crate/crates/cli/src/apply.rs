use std::path::PathBuf;

use clap::Args;
use nalgebra::DMatrix;
use otbe::extractor::FeatureModel;
use otbe::heads::Head;

use crate::error::{CliError, CliResult};
use crate::fit::read_model;
use crate::table::{matrix_rows, numbered, write_csv, Table};

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Rows to process (CSV with header).
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn feature_columns(model: &FeatureModel) -> Vec<String> {
    if model.feature_names.is_empty() {
        numbered("x_", model.features_dim())
    } else {
        model.feature_names.clone()
    }
}

/// Features from raw feature columns, or the `w_*` columns of a `transform` output.
fn features(model: &FeatureModel, table: &Table) -> CliResult<DMatrix<f64>> {
    let names = feature_columns(model);
    if names.iter().all(|n| table.headers.contains(n)) {
        return Ok(model.transform(&table.numeric(&names)?)?);
    }
    let w_names = numbered("w_", model.dim);
    if w_names.iter().all(|n| table.headers.contains(n)) {
        return table.numeric(&w_names);
    }
    Err(CliError::usage(format!(
        "schema mismatch: data has neither the model's feature columns ({}) nor {}",
        names.join(", "),
        w_names.join(", ")
    )))
}

pub fn transform(args: &ApplyArgs) -> CliResult<()> {
    let model = read_model(&args.model)?;
    let table = Table::read(&args.data)?;
    let names = feature_columns(&model);
    if let Some(missing) = names.iter().find(|n| !table.headers.contains(n)) {
        return Err(CliError::usage(format!("schema mismatch: feature column `{missing}` not in data")));
    }
    let w = model.transform(&table.numeric(&names)?)?;
    write_csv(&args.out, &numbered("w_", model.dim), matrix_rows(&w))
}

pub fn predict(args: &ApplyArgs) -> CliResult<()> {
    let model = read_model(&args.model)?;
    let table = Table::read(&args.data)?;
    let w = features(&model, &table)?;
    match &model.head {
        Some(Head::Linear(head)) => {
            let yhat = head.predict(&w)?;
            write_csv(&args.out, &numbered("yhat_", yhat.ncols()), matrix_rows(&yhat))
        }
        Some(Head::Centroid(head)) => {
            let labels = head.predict(&w)?;
            write_csv(&args.out, &["class".to_string()], labels.into_iter().map(|l| vec![l.to_string()]))
        }
        None => Err(CliError::usage("model has no prediction head")),
    }
}
