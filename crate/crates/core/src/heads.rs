//! Prediction heads, raw-feature baselines and evaluation metrics.
//!
//! Population metrics are computed by Gaussian moment algebra on a target
//! [`MomentSummary`], never by sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureModel;
use crate::matstats::{inv_sqrt_with, partial_covariance_with, Matrix, MomentSummary, Provenance, RidgePolicy, Vector};
use crate::serial;

/// `ŷ = β·input + intercept`. The input is `W` for heads on a [`FeatureModel`]
/// and raw `X` for the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    #[serde(with = "serial::matrix")]
    pub beta: Matrix,
    #[serde(with = "serial::vector")]
    pub intercept: Vector,
    pub fitted_on: Provenance,
}

/// Nearest centroid in feature space with a log-prior offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidClassifier {
    pub labels: Vec<i64>,
    pub priors: Vec<f64>,
    #[serde(with = "serial::vectors")]
    pub centroids: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear(LinearHead),
    Centroid(CentroidClassifier),
}

impl LinearHead {
    pub fn new(beta: Matrix, intercept: Vector, fitted_on: Provenance) -> Self {
        LinearHead {
            beta,
            intercept,
            fitted_on,
        }
    }

    pub fn predict(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.ncols() != self.beta.ncols() {
            return Err(Error::InvalidData(format!(
                "head expects {} input columns, got {}",
                self.beta.ncols(),
                rows.ncols()
            )));
        }
        let mut out = rows * self.beta.transpose();
        for mut r in out.row_iter_mut() {
            r += self.intercept.transpose();
        }
        Ok(out)
    }
}

impl CentroidClassifier {
    pub fn scores(&self, w: &Vector) -> Vec<f64> {
        self.centroids
            .iter()
            .zip(&self.priors)
            .map(|(c, p)| -0.5 * (w - c).norm_squared() + p.ln())
            .collect()
    }

    pub fn predict(&self, w_rows: &Matrix) -> Result<Vec<i64>> {
        let dim = self.centroids.first().map_or(0, |c| c.len());
        if w_rows.ncols() != dim {
            return Err(Error::InvalidData(format!(
                "classifier expects {dim} feature columns, got {}",
                w_rows.ncols()
            )));
        }
        Ok(w_rows
            .row_iter()
            .map(|r| {
                let scores = self.scores(&r.transpose());
                let mut best = 0;
                for (j, s) in scores.iter().enumerate() {
                    if *s > scores[best] {
                        best = j;
                    }
                }
                self.labels[best]
            })
            .collect())
    }
}

/// `β = Σ_YW`, `intercept = E Y − β E W`, with `W` the model's features under `m`.
pub fn fit_linear_head(model: &FeatureModel, m: &MomentSummary, outcome: &str, features: &str) -> Result<LinearHead> {
    let at = model.raw_loadings.transpose();
    let beta = m.cov(outcome, features)? * at.transpose();
    let mean_w = &at * (m.mean(features)? - &model.x_mean);
    let intercept = m.mean(outcome)? - &beta * mean_w;
    Ok(LinearHead::new(beta, intercept, m.provenance()))
}

/// Predictions of a head on a model's features.
pub fn predict(head: &LinearHead, w_rows: &Matrix) -> Result<Matrix> {
    head.predict(w_rows)
}

/// `E‖Y − G X − c‖²` under `target`.
pub fn affine_mse(coef: &Matrix, offset: &Vector, target: &MomentSummary, outcome: &str, features: &str) -> Result<f64> {
    let dy = target.block_dim(outcome)?;
    let dx = target.block_dim(features)?;
    if coef.shape() != (dy, dx) || offset.len() != dy {
        return Err(Error::InvalidData(format!(
            "predictor is {}x{} but target blocks are {dy} outcomes and {dx} features",
            coef.nrows(),
            coef.ncols()
        )));
    }
    let syy = target.cov(outcome, outcome)?;
    let syx = target.cov(outcome, features)?;
    let sxx = target.cov(features, features)?;
    let resid_cov = syy - coef * syx.transpose() - &syx * coef.transpose() + coef * sxx * coef.transpose();
    let bias = target.mean(outcome)? - coef * target.mean(features)? - offset;
    Ok(resid_cov.trace() + bias.norm_squared())
}

/// Population MSE of the extractor + head on the target moments.
pub fn mse_population(
    head: &LinearHead,
    model: &FeatureModel,
    target: &MomentSummary,
    outcome: &str,
    features: &str,
) -> Result<f64> {
    if head.beta.ncols() != model.dim {
        return Err(Error::InvalidData("head does not match the model dimension".into()));
    }
    let coef = &head.beta * model.raw_loadings.transpose();
    let offset = &head.intercept - &coef * &model.x_mean;
    affine_mse(&coef, &offset, target, outcome, features)
}

/// Population MSE of a head acting on raw `X`.
pub fn mse_population_raw(head: &LinearHead, target: &MomentSummary, outcome: &str, features: &str) -> Result<f64> {
    affine_mse(&head.beta, &head.intercept, target, outcome, features)
}

/// Mean squared error over sample rows, summed across outcome columns.
pub fn mse_samples(predicted: &Matrix, observed: &Matrix) -> Result<f64> {
    if predicted.shape() != observed.shape() || predicted.nrows() == 0 {
        return Err(Error::InvalidData("prediction and observation shapes differ".into()));
    }
    Ok((predicted - observed).norm_squared() / predicted.nrows() as f64)
}

/// `β = Σ_YX Σ_X⁻¹` on raw features.
pub fn fit_ols_baseline(m: &MomentSummary, outcome: &str, features: &str, policy: RidgePolicy) -> Result<LinearHead> {
    let k = inv_sqrt_with(&m.cov(features, features)?, features, policy)?;
    let beta = m.cov(outcome, features)? * &k * &k;
    let intercept = m.mean(outcome)? - &beta * m.mean(features)?;
    Ok(LinearHead::new(beta, intercept, m.provenance()))
}

/// Population anchor regression,
/// `argmin_b E[((I−Π_A)(Y−bX))²] + γ E[(Π_A(Y−bX))²]`, solved from its normal
/// equations `(Σ_X + (γ−1)Σ_X̂) b = Σ_XY + (γ−1)Σ_X̂Y` with `X̂ = Σ_XA Σ_A⁻¹ A`.
pub fn fit_anchor_baseline(
    m: &MomentSummary,
    outcome: &str,
    features: &str,
    anchor: &str,
    gamma: f64,
    policy: RidgePolicy,
) -> Result<LinearHead> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let ka = inv_sqrt_with(&m.cov(anchor, anchor)?, anchor, policy)?;
    let inv_a = &ka * &ka;
    let sxa = m.cov(features, anchor)?;
    let proj_xx = &sxa * &inv_a * sxa.transpose();
    let proj_xy = &sxa * &inv_a * m.cov(anchor, outcome)?;
    let lhs = crate::matstats::symmetrize(&(m.cov(features, features)? + proj_xx * (gamma - 1.0)));
    let rhs = m.cov(features, outcome)? + proj_xy * (gamma - 1.0);
    let b = lhs
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or_else(|| Error::singular(format!("{features} (anchor-weighted)")))?;
    let beta = b.transpose();
    let intercept = m.mean(outcome)? - &beta * m.mean(features)?;
    Ok(LinearHead::new(beta, intercept, m.provenance()))
}

/// Anchor-regression objective evaluated on moments (centered variables).
pub fn anchor_objective(
    m: &MomentSummary,
    outcome: &str,
    features: &str,
    anchor: &str,
    gamma: f64,
    beta: &Matrix,
) -> Result<f64> {
    let ka = inv_sqrt_with(&m.cov(anchor, anchor)?, anchor, RidgePolicy::Exact)?;
    let syy = m.cov(outcome, outcome)?;
    let syx = m.cov(outcome, features)?;
    let sxx = m.cov(features, features)?;
    let resid = syy - beta * syx.transpose() - &syx * beta.transpose() + beta * sxx * beta.transpose();
    let resid_a = m.cov(outcome, anchor)? - beta * m.cov(features, anchor)?;
    let projected = (&resid_a * &ka).norm_squared();
    Ok(resid.trace() - projected + gamma * projected)
}

/// `‖Σ_{W|g}^{-1/2} Σ_{W,V|g} Σ_{V|g}^{-1/2}‖_F` for blocks `w` and `against` given `given`.
pub fn conditional_correlation(
    m: &MomentSummary,
    w: &str,
    against: &str,
    given: &str,
    policy: RidgePolicy,
) -> Result<f64> {
    let sww = partial_covariance_with(m, w, w, given, policy)?;
    let swv = partial_covariance_with(m, w, against, given, policy)?;
    let svv = partial_covariance_with(m, against, against, given, policy)?;
    let kw = inv_sqrt_with(&sww, &format!("{w} | {given}"), policy)?;
    let kv = inv_sqrt_with(&svv, &format!("{against} | {given}"), policy)?;
    Ok((kw * swv * kv).norm())
}

/// [`conditional_correlation`] of a model's features with `against` given `given`.
pub fn model_conditional_correlation(
    model: &FeatureModel,
    m: &MomentSummary,
    features: &str,
    against: &str,
    given: &str,
    policy: RidgePolicy,
) -> Result<f64> {
    let name = "__w";
    let aug = model.augment(m, features, name)?;
    let against = if against == features { name } else { against };
    conditional_correlation(&aug, name, against, given, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matstats::Block;

    fn xy(sigma_x: f64, sigma_xy: f64) -> MomentSummary {
        MomentSummary::new(
            vec![Block { name: "y".into(), dim: 1 }, Block { name: "x".into(), dim: 1 }],
            Vector::from_vec(vec![1.0, -2.0]),
            Matrix::from_row_slice(2, 2, &[1.0, sigma_xy, sigma_xy, sigma_x]),
            Provenance::Exact,
        )
        .unwrap()
    }

    #[test]
    fn ols_textbook_and_independent() {
        let h = fit_ols_baseline(&xy(1.0, 0.4), "y", "x", RidgePolicy::Exact).unwrap();
        assert!((h.beta[(0, 0)] - 0.4).abs() < 1e-15);
        assert!((h.intercept[0] - (1.0 + 0.8)).abs() < 1e-15);
        let z = fit_ols_baseline(&xy(2.0, 0.0), "y", "x", RidgePolicy::Exact).unwrap();
        assert_eq!(z.beta[(0, 0)], 0.0);
    }

    #[test]
    fn constant_predictor_mse() {
        let m = xy(1.0, 0.4);
        let head = LinearHead::new(Matrix::zeros(1, 1), Vector::from_vec(vec![3.0]), Provenance::Exact);
        let mse = mse_population_raw(&head, &m, "y", "x").unwrap();
        // trace Σ_Y + (E Y − c)²
        assert!((mse - (1.0 + 4.0)).abs() < 1e-15);
    }

    #[test]
    fn predict_shapes() {
        let head = LinearHead::new(
            Matrix::from_row_slice(2, 1, &[1.0, -1.0]),
            Vector::from_vec(vec![0.5, 0.0]),
            Provenance::Exact,
        );
        let out = head.predict(&Matrix::from_row_slice(2, 1, &[2.0, 3.0])).unwrap();
        assert_eq!(out, Matrix::from_row_slice(2, 2, &[2.5, -2.0, 3.5, -3.0]));
        assert!(head.predict(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn centroid_prediction_uses_priors() {
        let clf = CentroidClassifier {
            labels: vec![3, 8],
            priors: vec![0.9, 0.1],
            centroids: vec![Vector::from_vec(vec![-1.0]), Vector::from_vec(vec![1.0])],
        };
        // at 0.5 the distance favours class 8 but the prior wins
        let w = Matrix::from_row_slice(3, 1, &[-2.0, 0.5, 3.0]);
        assert_eq!(clf.predict(&w).unwrap(), vec![3, 3, 8]);
    }

    #[test]
    fn negative_gamma_rejected() {
        let m = xy(1.0, 0.4).augment("a", &Matrix::from_row_slice(1, 2, &[0.0, 1.0]), &Vector::zeros(1)).unwrap();
        assert!(matches!(
            fit_anchor_baseline(&m, "y", "x", "a", -1.0, RidgePolicy::Exact),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn mse_checks_blocks() {
        let m = xy(1.0, 0.4);
        let head = LinearHead::new(Matrix::zeros(1, 2), Vector::zeros(1), Provenance::Exact);
        assert!(matches!(mse_population_raw(&head, &m, "y", "x"), Err(Error::InvalidData(_))));
    }
}
