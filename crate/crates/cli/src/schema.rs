//! Mapping of CSV columns to the outcome, confounder, context and feature blocks.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    OutcomeClass,
    Confounder,
    Context,
    Feature,
    Ignore,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    columns: BTreeMap<String, Role>,
}

/// Column names per role, each in CSV order.
#[derive(Debug, Default, Clone)]
pub struct ColumnSchema {
    pub outcome: Vec<String>,
    pub outcome_class: Vec<String>,
    pub confounder: Vec<String>,
    pub context: Vec<String>,
    pub feature: Vec<String>,
}

impl ColumnSchema {
    /// Roles from a schema file, or from `y_`, `z_`, `s_`, `x_` prefixes when none is given.
    /// Without a schema, a classification task reads its single `y_` column as the class.
    pub fn resolve(headers: &[String], schema: Option<&Path>, classify: bool) -> CliResult<Self> {
        let roles: Vec<Role> = match schema {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let file: SchemaFile = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("{}: invalid schema: {e}", path.display())))?;
                if let Some(missing) = file.columns.keys().find(|k| !headers.contains(k)) {
                    return Err(CliError::usage(format!("schema column `{missing}` is not in the data")));
                }
                headers
                    .iter()
                    .map(|h| file.columns.get(h).copied().unwrap_or(Role::Ignore))
                    .collect()
            }
            None => headers
                .iter()
                .map(|h| match h.split_once('_').map(|(p, _)| p) {
                    Some("y") if classify => Role::OutcomeClass,
                    Some("y") => Role::Outcome,
                    Some("z") => Role::Confounder,
                    Some("s") => Role::Context,
                    Some("x") => Role::Feature,
                    _ => Role::Ignore,
                })
                .collect(),
        };
        let mut out = ColumnSchema::default();
        for (h, role) in headers.iter().zip(roles) {
            let slot = match role {
                Role::Outcome => &mut out.outcome,
                Role::OutcomeClass => &mut out.outcome_class,
                Role::Confounder => &mut out.confounder,
                Role::Context => &mut out.context,
                Role::Feature => &mut out.feature,
                Role::Ignore => continue,
            };
            slot.push(h.clone());
        }
        if out.feature.is_empty() {
            return Err(CliError::usage("schema error: at least one feature column is required"));
        }
        if classify && out.outcome_class.len() != 1 {
            return Err(CliError::usage(format!(
                "schema error: classification needs exactly one outcome_class column, found {}",
                out.outcome_class.len()
            )));
        }
        if !classify && out.outcome.is_empty() {
            return Err(CliError::usage("schema error: regression needs at least one outcome column"));
        }
        Ok(out)
    }
}
