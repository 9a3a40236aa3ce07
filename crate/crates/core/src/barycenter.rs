//! Gaussian optimal-transport barycenter maps `T(S, Y)`.
//!
//! For jointly Gaussian `(S, Y)` with continuous `Y` the barycenter map is the
//! linear regression residual plus the mean of `S`. For categorical `Y` with
//! Gaussian classes the barycenter is Gaussian with the covariance solving
//! `Σ = Σ_y p_y (Σ^{1/2} Σ_y Σ^{1/2})^{1/2}`.
//!
//! Transport costs use `c(x, y) = ½‖y − x‖²`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matstats::{inv_sqrt_with, psd_sqrt, symmetrize, Matrix, MomentSummary, RidgePolicy, Vector};
use crate::serial;

/// Relative Frobenius change between iterates that stops the fixed-point loop.
pub const FIXED_POINT_TOL: f64 = 1e-10;
pub const FIXED_POINT_MAX_ITER: usize = 500;
/// Relative fixed-point residual a returned barycenter must satisfy.
pub const FIXED_POINT_RESIDUAL_TOL: f64 = 1e-8;

/// `T(S, Y) = S − coeff · (Y − mean_y)` for jointly Gaussian `(S, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousResidualMap {
    /// `Σ_SY Σ_Y⁻¹`, shape `d_s × d_y`.
    #[serde(with = "serial::matrix")]
    pub coeff: Matrix,
    #[serde(with = "serial::vector")]
    pub mean_s: Vector,
    #[serde(with = "serial::vector")]
    pub mean_y: Vector,
    /// Covariance of the mapped variable.
    #[serde(with = "serial::matrix")]
    pub resid_cov: Matrix,
    #[serde(with = "serial::matrix")]
    pub resid_inv_sqrt: Matrix,
}

/// Output of applying a barycenter map row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedRows {
    /// `T(S, Y)`.
    pub mapped: Matrix,
    /// Standardized map output `S̃`.
    pub standardized: Matrix,
}

pub fn fit_continuous_map(
    m: &MomentSummary,
    source: &str,
    conditioner: &str,
    policy: RidgePolicy,
) -> Result<ContinuousResidualMap> {
    let sigma_y = m.cov(conditioner, conditioner)?;
    let k = inv_sqrt_with(&sigma_y, conditioner, policy)?;
    let coeff = m.cov(source, conditioner)? * &k * &k;
    let resid_cov = symmetrize(&(m.cov(source, source)? - &coeff * m.cov(conditioner, source)?));
    let label = format!("T({source},{conditioner})");
    let resid_inv_sqrt = inv_sqrt_with(&resid_cov, &label, policy)?;
    Ok(ContinuousResidualMap {
        coeff,
        mean_s: m.mean(source)?,
        mean_y: m.mean(conditioner)?,
        resid_cov,
        resid_inv_sqrt,
    })
}

impl ContinuousResidualMap {
    pub fn source_dim(&self) -> usize {
        self.coeff.nrows()
    }

    pub fn conditioner_dim(&self) -> usize {
        self.coeff.ncols()
    }

    pub fn apply(&self, s_rows: &Matrix, y_rows: &Matrix) -> Result<MappedRows> {
        if s_rows.ncols() != self.source_dim()
            || y_rows.ncols() != self.conditioner_dim()
            || s_rows.nrows() != y_rows.nrows()
        {
            return Err(Error::InvalidData(format!(
                "expected n x {} and n x {} rows, got {}x{} and {}x{}",
                self.source_dim(),
                self.conditioner_dim(),
                s_rows.nrows(),
                s_rows.ncols(),
                y_rows.nrows(),
                y_rows.ncols()
            )));
        }
        let mut mapped = s_rows.clone();
        let mut standardized = Matrix::zeros(s_rows.nrows(), s_rows.ncols());
        for i in 0..s_rows.nrows() {
            let y = y_rows.row(i).transpose() - &self.mean_y;
            let t = s_rows.row(i).transpose() - &self.coeff * y;
            let st = &self.resid_inv_sqrt * (&t - &self.mean_s);
            mapped.set_row(i, &t.transpose());
            standardized.set_row(i, &st.transpose());
        }
        Ok(MappedRows { mapped, standardized })
    }

    /// Loading over the joint vector of `m` (and offset) expressing `T(S, Y)`,
    /// for use with [`MomentSummary::augment`].
    pub fn joint_loading(&self, m: &MomentSummary, source: &str, conditioner: &str) -> Result<(Matrix, Vector)> {
        let loading = m.selector(source)? - &self.coeff * m.selector(conditioner)?;
        let offset = &self.coeff * &self.mean_y;
        Ok((loading, offset))
    }

    /// Loading and offset for the standardized output `S̃`.
    pub fn standardized_loading(&self, m: &MomentSummary, source: &str, conditioner: &str) -> Result<(Matrix, Vector)> {
        let (l, o) = self.joint_loading(m, source, conditioner)?;
        Ok((&self.resid_inv_sqrt * l, &self.resid_inv_sqrt * (o - &self.mean_s)))
    }

    /// Expected transport cost `E[½‖S − T(S,Y)‖²]` under the fitted moments.
    pub fn transport_cost(&self, sigma_y: &Matrix) -> f64 {
        0.5 * (&self.coeff * sigma_y * self.coeff.transpose()).trace()
    }
}

/// Prior, mean and covariance of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: i64,
    pub prior: f64,
    #[serde(with = "serial::vector")]
    pub mean: Vector,
    #[serde(with = "serial::matrix")]
    pub cov: Matrix,
}

/// Per-class statistics of `rows` grouped by `labels` (priors are class
/// frequencies, covariances unbiased). Every class needs `dim + 1` rows.
pub fn class_stats_from_samples(rows: &Matrix, labels: &[i64]) -> Result<Vec<ClassStats>> {
    if rows.nrows() != labels.len() {
        return Err(Error::InvalidData(format!(
            "{} rows but {} labels",
            rows.nrows(),
            labels.len()
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite entries".into()));
    }
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let n = rows.nrows() as f64;
    let dim = rows.ncols();
    let mut stats = Vec::with_capacity(groups.len());
    for (label, idx) in groups {
        if idx.len() < dim + 1 {
            return Err(Error::ClassTooSmall {
                label,
                count: idx.len(),
                needed: dim + 1,
            });
        }
        let sub = rows.select_rows(&idx);
        let count = idx.len() as f64;
        let mean = sub.row_sum().transpose() / count;
        let mut centered = sub;
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        let cov = symmetrize(&(centered.transpose() * &centered / (count - 1.0)));
        stats.push(ClassStats {
            label,
            prior: count / n,
            mean,
            cov,
        });
    }
    Ok(stats)
}

/// Wasserstein barycenter of Gaussian classes and the per-class push-forward maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalBarycenterMap {
    pub classes: Vec<ClassStats>,
    /// Barycenter covariance `Σ`.
    #[serde(with = "serial::matrix")]
    pub bary_cov: Matrix,
    #[serde(with = "serial::matrix")]
    pub bary_sqrt: Matrix,
    /// Per-class whiteners `Σ_y^{-1/2}`.
    #[serde(with = "serial::matrices")]
    pub whiteners: Vec<Matrix>,
    /// `E(S) = Σ_y p_y μ_y`.
    #[serde(with = "serial::vector")]
    pub grand_mean: Vector,
    pub iterations: usize,
    /// Relative fixed-point residual of `bary_cov`.
    pub residual: f64,
}

fn validate_priors(priors: &[f64]) -> Result<()> {
    if priors.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidData("class priors must be positive".into()));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidData(format!("class priors sum to {total}, expected 1")));
    }
    Ok(())
}

/// `Σ_y p_y (Σ^{1/2} Σ_y Σ^{1/2})^{1/2}` given `Σ^{1/2}`.
fn fixed_point_image(sqrt: &Matrix, classes: &[ClassStats]) -> Result<Matrix> {
    let dim = sqrt.nrows();
    let mut acc = Matrix::zeros(dim, dim);
    for c in classes {
        let inner = symmetrize(&(sqrt * &c.cov * sqrt));
        acc += psd_sqrt(&inner)? * c.prior;
    }
    Ok(symmetrize(&acc))
}

/// Relative residual `‖Σ − Σ_y p_y (Σ^{1/2}Σ_yΣ^{1/2})^{1/2}‖_F / ‖Σ‖_F`.
pub fn fixed_point_residual(sigma: &Matrix, classes: &[ClassStats]) -> Result<f64> {
    let sqrt = psd_sqrt(sigma)?;
    let image = fixed_point_image(&sqrt, classes)?;
    Ok((sigma - image).norm() / sigma.norm())
}

/// Solves the Gaussian barycenter fixed point by
/// `Σ ← Σ^{-1/2} (Σ_y p_y (Σ^{1/2} Σ_y Σ^{1/2})^{1/2})² Σ^{-1/2}` from `Σ₀ = Σ_y p_y Σ_y`.
pub fn fit_categorical_map(classes: &[ClassStats], policy: RidgePolicy) -> Result<CategoricalBarycenterMap> {
    if classes.is_empty() {
        return Err(Error::InvalidData("at least one class is required".into()));
    }
    let dim = classes[0].mean.len();
    for c in classes {
        if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
            return Err(Error::InvalidData(format!("class {} has inconsistent dimensions", c.label)));
        }
    }
    let priors: Vec<f64> = classes.iter().map(|c| c.prior).collect();
    validate_priors(&priors)?;

    let whiteners = classes
        .iter()
        .map(|c| inv_sqrt_with(&c.cov, &format!("class {}", c.label), policy))
        .collect::<Result<Vec<_>>>()?;
    let grand_mean = classes
        .iter()
        .fold(Vector::zeros(dim), |acc, c| acc + &c.mean * c.prior);

    let mut sigma = symmetrize(&classes.iter().fold(Matrix::zeros(dim, dim), |acc, c| acc + &c.cov * c.prior));
    let mut iterations = 0;
    let mut converged = classes.len() == 1;
    while !converged && iterations < FIXED_POINT_MAX_ITER {
        let sqrt = psd_sqrt(&sigma)?;
        let inv_sqrt = inv_sqrt_with(&sigma, "barycenter", policy)?;
        let image = fixed_point_image(&sqrt, classes)?;
        let next = symmetrize(&(&inv_sqrt * &image * &image * &inv_sqrt));
        iterations += 1;
        let change = (&next - &sigma).norm() / sigma.norm();
        sigma = next;
        converged = change <= FIXED_POINT_TOL;
    }
    let residual = fixed_point_residual(&sigma, classes)?;
    if !converged || !(residual <= FIXED_POINT_RESIDUAL_TOL) {
        return Err(Error::ConvergenceFailure { iterations, residual });
    }
    let bary_sqrt = psd_sqrt(&sigma)?;
    Ok(CategoricalBarycenterMap {
        classes: classes.to_vec(),
        bary_cov: sigma,
        bary_sqrt,
        whiteners,
        grand_mean,
        iterations,
        residual,
    })
}

impl CategoricalBarycenterMap {
    pub fn dim(&self) -> usize {
        self.grand_mean.len()
    }

    pub fn labels(&self) -> Vec<i64> {
        self.classes.iter().map(|c| c.label).collect()
    }

    fn class_index(&self, label: i64) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.label == label)
            .ok_or(Error::UnknownClass(label))
    }

    /// Linear part `Σ^{1/2} Σ_y^{-1/2}` of the map for one class.
    pub fn class_transform(&self, label: i64) -> Result<Matrix> {
        let j = self.class_index(label)?;
        Ok(&self.bary_sqrt * &self.whiteners[j])
    }

    /// `T(S,Y) = Σ^{1/2} Σ_Y^{-1/2} (S − μ_Y) + E(S)` and `S̃ = Σ_Y^{-1/2} (S − μ_Y)`.
    pub fn apply(&self, s_rows: &Matrix, labels: &[i64]) -> Result<MappedRows> {
        if s_rows.ncols() != self.dim() || s_rows.nrows() != labels.len() {
            return Err(Error::InvalidData(format!(
                "expected n x {} rows with n labels, got {}x{} and {} labels",
                self.dim(),
                s_rows.nrows(),
                s_rows.ncols(),
                labels.len()
            )));
        }
        let transforms = (0..self.classes.len())
            .map(|j| &self.bary_sqrt * &self.whiteners[j])
            .collect::<Vec<_>>();
        let single = self.classes.len() == 1;
        let mut mapped = Matrix::zeros(s_rows.nrows(), s_rows.ncols());
        let mut standardized = Matrix::zeros(s_rows.nrows(), s_rows.ncols());
        for (i, &label) in labels.iter().enumerate() {
            let j = self.class_index(label)?;
            let centered = s_rows.row(i).transpose() - &self.classes[j].mean;
            let st = &self.whiteners[j] * &centered;
            if single {
                // a single class is already its own barycenter
                mapped.set_row(i, &s_rows.row(i));
            } else {
                let t = &transforms[j] * &centered + &self.grand_mean;
                mapped.set_row(i, &t.transpose());
            }
            standardized.set_row(i, &st.transpose());
        }
        Ok(MappedRows { mapped, standardized })
    }
}

/// Multidimensional correlation `‖Σ_U^{-1/2} Σ_UV Σ_V^{-1/2}‖_F² / min(d_u, d_v)`.
pub fn multi_correlation(m: &MomentSummary, u: &str, v: &str, policy: RidgePolicy) -> Result<f64> {
    multi_correlation_cov(&m.cov(u, u)?, &m.cov(u, v)?, &m.cov(v, v)?, policy)
}

pub fn multi_correlation_cov(sigma_u: &Matrix, sigma_uv: &Matrix, sigma_v: &Matrix, policy: RidgePolicy) -> Result<f64> {
    let (du, dv) = sigma_uv.shape();
    if sigma_u.shape() != (du, du) || sigma_v.shape() != (dv, dv) {
        return Err(Error::InvalidData("covariance shapes do not match".into()));
    }
    if du == 0 || dv == 0 {
        return Err(Error::InvalidData("empty block".into()));
    }
    let ku = inv_sqrt_with(sigma_u, "u", policy)?;
    let kv = inv_sqrt_with(sigma_v, "v", policy)?;
    let standardized = ku * sigma_uv * kv;
    Ok(standardized.norm_squared() / du.min(dv) as f64)
}

/// `Σ_j p_j ‖E[W | Y = y_j] − E(W)‖²`.
pub fn categorical_dispersion(class_means: &[Vector], mean: &Vector, priors: &[f64]) -> Result<f64> {
    if class_means.len() != priors.len() || class_means.iter().any(|c| c.len() != mean.len()) {
        return Err(Error::InvalidData("class means, grand mean and priors do not match".into()));
    }
    validate_priors(priors)?;
    Ok(class_means
        .iter()
        .zip(priors)
        .map(|(c, p)| p * (c - mean).norm_squared())
        .sum())
}
