//! Closed-form invariant feature extraction.
//!
//! Features are `W = Ãᵀ X̃` with `X̃ = Σ_X^{-1/2}(X − E X)` and orthonormal
//! loadings `Ã` maximising
//!
//! ```text
//! L(Ã) = w_c ‖ÃᵀC‖²_F − w_d ‖ÃᵀD‖²_F,   w_c = (1−λ)/δ_wy,  w_d = λ/δ_ws
//! ```
//!
//! whose solution is the top-`d` (signed) eigenvectors of `H = w_c CCᵀ − w_d DDᵀ`.
//! `C` measures predictive content for the outcome and `D` the correlation of
//! `X̃` with the standardized barycenter residual of the context variables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{fit_categorical_map, fit_continuous_map, ClassStats, ContinuousResidualMap};
use crate::error::{Error, Result, StageExt};
use crate::heads::{CentroidClassifier, Head, LinearHead};
use crate::matstats::{
    empirical_moments, inv_sqrt_with, sym_eig, symmetrize, Matrix, MomentSummary, Provenance, RidgePolicy, Vector,
};
use crate::serial;

/// Magic first line of a serialized model document.
pub const MODEL_MAGIC: &str = "OTBE1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Normalisation of the predictive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaConvention {
    /// Regression divides by `min(d, d_y)`, classification by `d`.
    #[default]
    Paper,
    /// Both tasks divide by `min(d, columns of C)`.
    Uniform,
}

/// Names of the blocks playing each role in a [`MomentSummary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub outcome: String,
    pub features: String,
    /// One or more context blocks; several are concatenated.
    pub context: Vec<String>,
}

impl Default for Roles {
    fn default() -> Self {
        Roles {
            outcome: "y".into(),
            features: "x".into(),
            context: vec!["s".into()],
        }
    }
}

impl Roles {
    pub fn with_context(context: &[&str]) -> Self {
        Roles {
            context: context.iter().map(|c| c.to_string()).collect(),
            ..Roles::default()
        }
    }

    /// Summary with a single context block, and that block's name.
    fn resolve_context(&self, m: &MomentSummary) -> Result<(MomentSummary, String)> {
        match self.context.as_slice() {
            [] => Err(Error::InvalidParameter("at least one context block is required".into())),
            [one] => {
                m.range(one)?;
                Ok((m.clone(), one.clone()))
            }
            many => {
                let name = many.join("+");
                let parts: Vec<&str> = many.iter().map(String::as_str).collect();
                Ok((m.merge(&name, &parts)?, name))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    pub dim: usize,
    #[serde(default)]
    pub ridge: RidgePolicy,
    #[serde(default)]
    pub delta: DeltaConvention,
}

impl FitConfig {
    pub fn new(lambda: f64, dim: usize) -> Self {
        FitConfig {
            lambda,
            dim,
            ridge: RidgePolicy::default(),
            delta: DeltaConvention::Paper,
        }
    }
}

/// Whitened cross-covariance `Σ_X^{-1/2} Σ_XY Σ_Y^{-1/2}`.
pub fn build_c_regression(m: &MomentSummary, features: &str, outcome: &str, policy: RidgePolicy) -> Result<Matrix> {
    let kx = inv_sqrt_with(&m.cov(features, features)?, features, policy)?;
    let ky = inv_sqrt_with(&m.cov(outcome, outcome)?, outcome, policy)?;
    Ok(kx * m.cov(features, outcome)? * ky)
}

/// Column `j` is `√p_j · Σ_X^{-1/2}(E[X | y_j] − E X)`.
pub fn build_c_categorical(
    class_means: &[Vector],
    priors: &[f64],
    x_mean: &Vector,
    x_inv_sqrt: &Matrix,
) -> Result<Matrix> {
    if class_means.len() < 2 {
        return Err(Error::InvalidData(format!(
            "classification needs at least 2 classes, got {}",
            class_means.len()
        )));
    }
    if class_means.len() != priors.len() {
        return Err(Error::InvalidData("class means and priors do not match".into()));
    }
    let mut c = Matrix::zeros(x_mean.len(), class_means.len());
    for (j, (mu, p)) in class_means.iter().zip(priors).enumerate() {
        c.set_column(j, &(x_inv_sqrt * (mu - x_mean) * p.sqrt()));
    }
    Ok(c)
}

/// `D = Cov(X̃, S̃)` with `S̃` the standardized continuous barycenter residual of
/// the context given the outcome. Returns the fitted map alongside.
pub fn build_d_regression(
    m: &MomentSummary,
    features: &str,
    context: &str,
    outcome: &str,
    policy: RidgePolicy,
) -> Result<(Matrix, ContinuousResidualMap)> {
    let map = fit_continuous_map(m, context, outcome, policy)?;
    let kx = inv_sqrt_with(&m.cov(features, features)?, features, policy)?;
    // Cov(X, T(S,Y)) = Σ_XS − Σ_XY coeffᵀ
    let cross = m.cov(features, context)? - m.cov(features, outcome)? * map.coeff.transpose();
    Ok((kx * cross * &map.resid_inv_sqrt, map))
}

/// Moments of `(context, features)` within one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditional {
    pub label: i64,
    pub prior: f64,
    pub moments: MomentSummary,
}

/// Groups labelled rows into per-class moments over blocks `s` (context) and `x` (features).
///
/// Each class needs at least `d_s + 1` rows.
pub fn class_conditionals_from_samples(x: &Matrix, s: &Matrix, labels: &[i64]) -> Result<Vec<ClassConditional>> {
    if x.nrows() != labels.len() || s.nrows() != labels.len() {
        return Err(Error::InvalidData("features, context and labels must have the same rows".into()));
    }
    let mut order: Vec<i64> = labels.to_vec();
    order.sort_unstable();
    order.dedup();
    let n = labels.len() as f64;
    let (ds, dx) = (s.ncols(), x.ncols());
    order
        .into_iter()
        .map(|label| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
            let needed = (ds + 1).max(2);
            if idx.len() < needed {
                return Err(Error::ClassTooSmall {
                    label,
                    count: idx.len(),
                    needed,
                });
            }
            let mut joint = Matrix::zeros(idx.len(), ds + dx);
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..ds {
                    joint[(r, j)] = s[(i, j)];
                }
                for j in 0..dx {
                    joint[(r, ds + j)] = x[(i, j)];
                }
            }
            Ok(ClassConditional {
                label,
                prior: idx.len() as f64 / n,
                moments: empirical_moments(&joint, &[("s", ds), ("x", dx)])?,
            })
        })
        .collect()
}

/// `D = Σ_j p_j Σ_X^{-1/2} Cov(X, S | y_j) Σ_{S|y_j}^{-1/2}`, i.e. `Cov(X̃, S̃)` with
/// the class-whitened context `S̃ = Σ_Y^{-1/2}(S − μ_Y)`.
pub fn build_d_categorical(
    classes: &[ClassConditional],
    features: &str,
    context: &str,
    x_inv_sqrt: &Matrix,
    policy: RidgePolicy,
) -> Result<Matrix> {
    let mut d: Option<Matrix> = None;
    for c in classes {
        let ws = inv_sqrt_with(&c.moments.cov(context, context)?, &format!("{context} | class {}", c.label), policy)?;
        let term = x_inv_sqrt * c.moments.cov(features, context)? * ws * c.prior;
        d = Some(match d {
            Some(acc) => acc + term,
            None => term,
        });
    }
    d.ok_or_else(|| Error::InvalidData("no classes".into()))
}

/// Eigen-solution of the extraction problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingSolution {
    /// `Ã`, `d_x × d` with orthonormal columns.
    pub loadings: Matrix,
    /// Full signed-descending spectrum of `H`.
    pub eigenvalues: Vector,
    pub h: Matrix,
}

/// `H = ((1−λ)/δ_wy) CCᵀ − (λ/δ_ws) DDᵀ`.
pub fn build_h(c: &Matrix, d: &Matrix, lambda: f64, delta_wy: f64, delta_ws: f64) -> Matrix {
    let wc = (1.0 - lambda) / delta_wy;
    let wd = lambda / delta_ws;
    symmetrize(&(c * c.transpose() * wc - d * d.transpose() * wd))
}

/// Objective `L(A) = tr(Aᵀ H A)`.
pub fn objective(a: &Matrix, c: &Matrix, d: &Matrix, lambda: f64, delta_wy: f64, delta_ws: f64) -> f64 {
    let wc = (1.0 - lambda) / delta_wy;
    let wd = lambda / delta_ws;
    wc * (a.transpose() * c).norm_squared() - wd * (a.transpose() * d).norm_squared()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda must be in [0, 1), got {lambda}")));
    }
    Ok(())
}

pub fn solve_loadings(
    c: &Matrix,
    d: &Matrix,
    lambda: f64,
    dim: usize,
    delta_wy: f64,
    delta_ws: f64,
) -> Result<LoadingSolution> {
    check_lambda(lambda)?;
    let dx = c.nrows();
    if d.nrows() != dx {
        return Err(Error::InvalidData(format!("C has {dx} rows but D has {}", d.nrows())));
    }
    if dim == 0 || dim > dx {
        return Err(Error::InvalidParameter(format!("dim must be in 1..={dx}, got {dim}")));
    }
    if !(delta_wy > 0.0 && delta_ws > 0.0) {
        return Err(Error::InvalidParameter("normalisers must be positive".into()));
    }
    let h = build_h(c, d, lambda, delta_wy, delta_ws);
    let eig = sym_eig(&h)?;
    Ok(LoadingSolution {
        loadings: eig.leading(dim),
        eigenvalues: eig.values,
        h,
    })
}

/// Statistics the prediction head is fitted from.
#[derive(Debug, Clone, PartialEq)]
enum HeadStats {
    Regression {
        /// `Σ_YX`
        cov_yx: Matrix,
        mean_y: Vector,
        mean_x: Vector,
        provenance: Provenance,
    },
    Classification {
        labels: Vec<i64>,
        priors: Vec<f64>,
        class_means: Vec<Vector>,
    },
}

/// Everything that does not depend on `λ` or `d`: whitener, `C`, `D` and head statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub task: Task,
    pub x_mean: Vector,
    pub x_inv_sqrt: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    /// `d_y` for regression, number of classes for classification.
    pub outcome_dim: usize,
    pub context_dim: usize,
    pub ridge: RidgePolicy,
    head_stats: HeadStats,
}

impl Prepared {
    pub fn regression(m: &MomentSummary, roles: &Roles, ridge: RidgePolicy) -> Result<Self> {
        let (m, context) = roles.resolve_context(m).stage("context")?;
        let (x, y) = (roles.features.as_str(), roles.outcome.as_str());
        let x_inv_sqrt = inv_sqrt_with(&m.cov(x, x)?, x, ridge).stage("whitening")?;
        let c = build_c_regression(&m, x, y, ridge).stage("C")?;
        let (d, _) = build_d_regression(&m, x, &context, y, ridge).stage("barycenter")?;
        Ok(Prepared {
            task: Task::Regression,
            x_mean: m.mean(x)?,
            x_inv_sqrt,
            outcome_dim: c.ncols(),
            context_dim: d.ncols(),
            c,
            d,
            ridge,
            head_stats: HeadStats::Regression {
                cov_yx: m.cov(y, x)?,
                mean_y: m.mean(y)?,
                mean_x: m.mean(x)?,
                provenance: m.provenance(),
            },
        })
    }

    /// Classification from per-class moments over blocks `s` (context) and `x` (features).
    pub fn classification(classes: &[ClassConditional], ridge: RidgePolicy) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidData(format!(
                "classification needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let priors: Vec<f64> = classes.iter().map(|c| c.prior).collect();
        let x_means = classes.iter().map(|c| c.moments.mean("x")).collect::<Result<Vec<_>>>()?;
        let dx = x_means[0].len();
        let x_mean = x_means.iter().zip(&priors).fold(Vector::zeros(dx), |acc, (m, p)| acc + m * *p);
        // mixture covariance: within-class plus between-class scatter
        let mut sigma_x = Matrix::zeros(dx, dx);
        for (c, mu) in classes.iter().zip(&x_means) {
            let dev = mu - &x_mean;
            sigma_x += (c.moments.cov("x", "x")? + &dev * dev.transpose()) * c.prior;
        }
        let x_inv_sqrt = inv_sqrt_with(&symmetrize(&sigma_x), "x", ridge).stage("whitening")?;
        let c = build_c_categorical(&x_means, &priors, &x_mean, &x_inv_sqrt).stage("C")?;
        let s_stats = classes
            .iter()
            .map(|c| {
                Ok(ClassStats {
                    label: c.label,
                    prior: c.prior,
                    mean: c.moments.mean("s")?,
                    cov: c.moments.cov("s", "s")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // the barycenter itself is not needed for D, but fitting it validates the class covariances
        fit_categorical_map(&s_stats, ridge).stage("barycenter")?;
        let d = build_d_categorical(classes, "x", "s", &x_inv_sqrt, ridge).stage("D")?;
        Ok(Prepared {
            task: Task::Classification,
            x_mean,
            x_inv_sqrt,
            outcome_dim: c.ncols(),
            context_dim: d.ncols(),
            c,
            d,
            ridge,
            head_stats: HeadStats::Classification {
                labels: classes.iter().map(|c| c.label).collect(),
                priors,
                class_means: x_means,
            },
        })
    }

    pub fn features_dim(&self) -> usize {
        self.x_mean.len()
    }

    /// `(δ_wy, δ_ws)` for a feature dimension `dim`.
    pub fn deltas(&self, dim: usize, convention: DeltaConvention) -> (f64, f64) {
        let ws = dim.min(self.context_dim) as f64;
        let wy = match (self.task, convention) {
            (Task::Classification, DeltaConvention::Paper) => dim as f64,
            _ => dim.min(self.outcome_dim) as f64,
        };
        (wy, ws)
    }

    pub fn solve(&self, lambda: f64, dim: usize, delta: DeltaConvention) -> Result<FeatureModel> {
        let (delta_wy, delta_ws) = self.deltas(dim, delta);
        let sol = solve_loadings(&self.c, &self.d, lambda, dim, delta_wy, delta_ws).stage("loadings")?;
        let raw_loadings = &self.x_inv_sqrt * &sol.loadings;
        let nonpositive: Vec<f64> = sol.eigenvalues.iter().take(dim).copied().filter(|v| *v <= 0.0).collect();
        let mut warnings = Vec::new();
        if !nonpositive.is_empty() {
            warnings.push(format!(
                "dim {dim} exceeds the number of positive eigenvalues of H; nonpositive: {nonpositive:?}"
            ));
        }
        let head = match &self.head_stats {
            HeadStats::Regression {
                cov_yx,
                mean_y,
                mean_x,
                provenance,
            } => {
                let beta = cov_yx * &raw_loadings;
                let mean_w = raw_loadings.transpose() * (mean_x - &self.x_mean);
                Head::Linear(LinearHead::new(beta.clone(), mean_y - beta * mean_w, *provenance))
            }
            HeadStats::Classification {
                labels,
                priors,
                class_means,
            } => Head::Centroid(CentroidClassifier {
                labels: labels.clone(),
                priors: priors.clone(),
                centroids: class_means
                    .iter()
                    .map(|mu| raw_loadings.transpose() * (mu - &self.x_mean))
                    .collect(),
            }),
        };
        Ok(FeatureModel {
            task: self.task,
            x_mean: self.x_mean.clone(),
            x_inv_sqrt: self.x_inv_sqrt.clone(),
            loadings: sol.loadings,
            raw_loadings,
            lambda,
            dim,
            h_eigenvalues: sol.eigenvalues,
            c: self.c.clone(),
            d: self.d.clone(),
            delta_wy,
            delta_ws,
            head: Some(head),
            warnings,
            feature_names: Vec::new(),
            outcome_names: Vec::new(),
        })
    }
}

/// A fitted extractor with its prediction head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub task: Task,
    #[serde(with = "serial::vector")]
    pub x_mean: Vector,
    /// `Σ_X^{-1/2}`
    #[serde(with = "serial::matrix")]
    pub x_inv_sqrt: Matrix,
    /// `Ã`, orthonormal columns in whitened coordinates.
    #[serde(with = "serial::matrix")]
    pub loadings: Matrix,
    /// `A = Σ_X^{-1/2} Ã`, acting on raw `X`.
    #[serde(with = "serial::matrix")]
    pub raw_loadings: Matrix,
    pub lambda: f64,
    pub dim: usize,
    #[serde(with = "serial::vector")]
    pub h_eigenvalues: Vector,
    #[serde(with = "serial::matrix")]
    pub c: Matrix,
    #[serde(with = "serial::matrix")]
    pub d: Matrix,
    pub delta_wy: f64,
    pub delta_ws: f64,
    pub head: Option<Head>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Names of the raw feature columns, in order, when known.
    #[serde(default)]
    pub feature_names: Vec<String>,
    /// Names of the outcome columns (or the class column), when known.
    #[serde(default)]
    pub outcome_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    model: FeatureModel,
}

impl FeatureModel {
    pub fn features_dim(&self) -> usize {
        self.x_mean.len()
    }

    /// `‖ÃᵀC‖²_F`
    pub fn term_c(&self) -> f64 {
        (self.loadings.transpose() * &self.c).norm_squared()
    }

    /// `‖ÃᵀD‖²_F`
    pub fn term_d(&self) -> f64 {
        (self.loadings.transpose() * &self.d).norm_squared()
    }

    pub fn objective(&self) -> f64 {
        objective(&self.loadings, &self.c, &self.d, self.lambda, self.delta_wy, self.delta_ws)
    }

    /// `W = Aᵀ (x − x_mean)` row by row.
    pub fn transform(&self, x_rows: &Matrix) -> Result<Matrix> {
        if x_rows.ncols() != self.features_dim() {
            return Err(Error::InvalidData(format!(
                "expected {} feature columns, got {}",
                self.features_dim(),
                x_rows.ncols()
            )));
        }
        let mut w = Matrix::zeros(x_rows.nrows(), self.dim);
        for i in 0..x_rows.nrows() {
            let centered = x_rows.row(i).transpose() - &self.x_mean;
            w.set_row(i, &(self.raw_loadings.transpose() * centered).transpose());
        }
        Ok(w)
    }

    /// Loading and offset expressing `W` over the joint vector of `m`.
    pub fn joint_loading(&self, m: &MomentSummary, features: &str) -> Result<(Matrix, Vector)> {
        if m.block_dim(features)? != self.features_dim() {
            return Err(Error::InvalidData(format!(
                "block `{features}` has {} columns, model expects {}",
                m.block_dim(features)?,
                self.features_dim()
            )));
        }
        let at = self.raw_loadings.transpose();
        Ok((&at * m.selector(features)?, -(&at * &self.x_mean)))
    }

    /// `m` with an extra block `name` holding the features.
    pub fn augment(&self, m: &MomentSummary, features: &str, name: &str) -> Result<MomentSummary> {
        let (l, o) = self.joint_loading(m, features)?;
        m.augment(name, &l, &o)
    }

    /// Versioned text document: a magic line followed by JSON.
    pub fn to_document(&self) -> Result<String> {
        let doc = ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        Ok(format!("{MODEL_MAGIC}\n{json}\n"))
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix(MODEL_MAGIC)
            .and_then(|rest| rest.strip_prefix('\n').or_else(|| rest.strip_prefix("\r\n")))
            .ok_or_else(|| Error::Format(format!("missing `{MODEL_MAGIC}` header")))?;
        let doc: ModelDocument = serde_json::from_str(body).map_err(|e| Error::Format(e.to_string()))?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", doc.format_version)));
        }
        Ok(doc.model)
    }
}

/// Fits a regression extractor on moments (exact or empirical).
pub fn fit_regression(m: &MomentSummary, roles: &Roles, config: &FitConfig) -> Result<FeatureModel> {
    check_lambda(config.lambda)?;
    Prepared::regression(m, roles, config.ridge)?.solve(config.lambda, config.dim, config.delta)
}

/// Fits a regression extractor on samples: rows of `data` split by `partition`.
pub fn fit_regression_samples(
    data: &Matrix,
    partition: &[(&str, usize)],
    roles: &Roles,
    config: &FitConfig,
) -> Result<FeatureModel> {
    let m = empirical_moments(data, partition).stage("moments")?;
    fit_regression(&m, roles, config)
}

pub fn fit_classification(classes: &[ClassConditional], config: &FitConfig) -> Result<FeatureModel> {
    check_lambda(config.lambda)?;
    Prepared::classification(classes, config.ridge)?.solve(config.lambda, config.dim, config.delta)
}

pub fn fit_classification_samples(x: &Matrix, s: &Matrix, labels: &[i64], config: &FitConfig) -> Result<FeatureModel> {
    let classes = class_conditionals_from_samples(x, s, labels).stage("moments")?;
    fit_classification(&classes, config)
}

/// One model per `λ`, all sharing the whitener, `C` and `D` of `prepared`.
pub fn lambda_path(prepared: &Prepared, grid: &[f64], dim: usize, delta: DeltaConvention) -> Result<Vec<FeatureModel>> {
    for &l in grid {
        check_lambda(l)?;
    }
    grid.par_iter().map(|&l| prepared.solve(l, dim, delta)).collect()
}
