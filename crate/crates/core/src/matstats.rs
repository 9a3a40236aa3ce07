//! Dense matrix statistics: moment summaries, symmetric eigendecomposition,
//! PSD square roots and Gaussian partial covariances.
//!
//! Everything here is a pure function of its inputs. Matrices are symmetrized
//! as `(M + Mᵀ)/2` before any eigen call.

use std::cmp::Ordering;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance for the symmetry precondition.
const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues below `-PSD_TOL * ‖M‖₂` mean the matrix is not PSD.
const PSD_TOL: f64 = 1e-10;
/// Eigenvalues below `SINGULAR_TOL * λ_max` are treated as zero when inverting.
const SINGULAR_TOL: f64 = 1e-12;

/// How inverse square roots handle (near-)singular matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RidgePolicy {
    /// No ridge; singular matrices are an error.
    Exact,
    /// Always add this ridge to the eigenvalues.
    Fixed(f64),
    /// Try without ridge and, if singular, retry with `factor * trace(M) / dim`.
    Fallback(f64),
}

impl Default for RidgePolicy {
    fn default() -> Self {
        RidgePolicy::Fallback(1e-10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Empirical { n: usize },
    Exact,
}

/// Joint mean and covariance of a collection of named variable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    blocks: Vec<Block>,
    mean: Vector,
    cov: Matrix,
    provenance: Provenance,
}

impl MomentSummary {
    pub fn new(blocks: Vec<Block>, mean: Vector, cov: Matrix, provenance: Provenance) -> Result<Self> {
        let dim: usize = blocks.iter().map(|b| b.dim).sum();
        if mean.len() != dim || cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::InvalidData(format!(
                "block dimensions sum to {dim} but mean has {} entries and covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::InvalidData(format!("duplicate block name `{}`", b.name)));
            }
        }
        check_finite(&cov)?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite mean".into()));
        }
        let cov = symmetrize_checked(&cov)?;
        let summary = MomentSummary {
            blocks,
            mean,
            cov,
            provenance,
        };
        for b in &summary.blocks {
            let r = summary.range(&b.name)?;
            let diag = summary.cov.view((r.start, r.start), (b.dim, b.dim)).into_owned();
            check_psd(&diag).map_err(|_| {
                Error::InvalidData(format!("covariance of block `{}` is not positive semidefinite", b.name))
            })?;
        }
        Ok(summary)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn joint_mean(&self) -> &Vector {
        &self.mean
    }

    pub fn joint_cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| b.name == name)
    }

    pub fn block_dim(&self, name: &str) -> Result<usize> {
        Ok(self.range(name)?.len())
    }

    /// Column range of a block inside the joint vector.
    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        let mut start = 0;
        for b in &self.blocks {
            if b.name == name {
                return Ok(start..start + b.dim);
            }
            start += b.dim;
        }
        Err(Error::InvalidData(format!("no block named `{name}`")))
    }

    pub fn mean(&self, name: &str) -> Result<Vector> {
        let r = self.range(name)?;
        Ok(self.mean.rows(r.start, r.len()).into_owned())
    }

    /// Cross-covariance `Σ_ab`.
    pub fn cov(&self, a: &str, b: &str) -> Result<Matrix> {
        let ra = self.range(a)?;
        let rb = self.range(b)?;
        Ok(self.cov.view((ra.start, rb.start), (ra.len(), rb.len())).into_owned())
    }

    /// Appends a block `name = loading · V + offset` where `V` is the joint vector.
    pub fn augment(&self, name: &str, loading: &Matrix, offset: &Vector) -> Result<Self> {
        if self.has_block(name) {
            return Err(Error::InvalidData(format!("block `{name}` already exists")));
        }
        if loading.ncols() != self.dim() || loading.nrows() != offset.len() {
            return Err(Error::InvalidData(format!(
                "loading is {}x{}, expected k x {} with offset of length k",
                loading.nrows(),
                loading.ncols(),
                self.dim()
            )));
        }
        let k = loading.nrows();
        let p = self.dim();
        let cross = loading * &self.cov; // k x p
        let own = &cross * loading.transpose();
        let mut cov = Matrix::zeros(p + k, p + k);
        cov.view_mut((0, 0), (p, p)).copy_from(&self.cov);
        cov.view_mut((p, 0), (k, p)).copy_from(&cross);
        cov.view_mut((0, p), (p, k)).copy_from(&cross.transpose());
        cov.view_mut((p, p), (k, k)).copy_from(&symmetrize(&own));
        let mut mean = Vector::zeros(p + k);
        mean.rows_mut(0, p).copy_from(&self.mean);
        mean.rows_mut(p, k).copy_from(&(loading * &self.mean + offset));
        let mut blocks = self.blocks.clone();
        blocks.push(Block {
            name: name.to_string(),
            dim: k,
        });
        Ok(MomentSummary {
            blocks,
            mean,
            cov,
            provenance: self.provenance,
        })
    }

    /// Loading matrix (k x dim) that picks the given block out of the joint vector.
    pub fn selector(&self, name: &str) -> Result<Matrix> {
        let r = self.range(name)?;
        let mut sel = Matrix::zeros(r.len(), self.dim());
        for (i, j) in r.enumerate() {
            sel[(i, j)] = 1.0;
        }
        Ok(sel)
    }

    /// Adds a block that concatenates existing blocks, in the given order.
    pub fn merge(&self, name: &str, parts: &[&str]) -> Result<Self> {
        let sels = parts.iter().map(|p| self.selector(p)).collect::<Result<Vec<_>>>()?;
        let rows: usize = sels.iter().map(|s| s.nrows()).sum();
        let mut loading = Matrix::zeros(rows, self.dim());
        let mut at = 0;
        for s in sels {
            loading.view_mut((at, 0), (s.nrows(), s.ncols())).copy_from(&s);
            at += s.nrows();
        }
        self.augment(name, &loading, &Vector::zeros(rows))
    }

    /// Restricts the summary to the named blocks, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let ranges = names.iter().map(|n| self.range(n)).collect::<Result<Vec<_>>>()?;
        let idx: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let dim = idx.len();
        let mean = Vector::from_iterator(dim, idx.iter().map(|&i| self.mean[i]));
        let cov = Matrix::from_fn(dim, dim, |i, j| self.cov[(idx[i], idx[j])]);
        let blocks = names
            .iter()
            .zip(&ranges)
            .map(|(n, r)| Block {
                name: n.to_string(),
                dim: r.len(),
            })
            .collect();
        MomentSummary::new(blocks, mean, cov, self.provenance)
    }
}

/// Signed-descending eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub values: Vector,
    /// Orthonormal eigenvectors as columns, aligned with `values`.
    pub vectors: Matrix,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        &self.vectors * Matrix::from_diagonal(&self.values) * self.vectors.transpose()
    }

    /// First `d` eigenvectors (columns).
    pub fn leading(&self, d: usize) -> Matrix {
        self.vectors.columns(0, d).into_owned()
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.norm()
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidData("matrix has non-finite entries".into()))
    }
}

fn symmetrize_checked(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::InvalidData(format!("matrix is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    check_finite(m)?;
    let scale = 1.0 + m.amax();
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidData(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(symmetrize(m))
}

/// Eigendecomposition with values in signed-descending order and each
/// eigenvector's largest-magnitude entry made positive.
pub fn sym_eig(m: &Matrix) -> Result<EigenDecomposition> {
    let m = symmetrize_checked(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: Vector::zeros(0),
            vectors: Matrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        let max_abs = v.amax();
        // first entry within round-off of the maximum decides the sign
        let pivot = v.iter().position(|x| x.abs() >= max_abs * (1.0 - 1e-9)).unwrap_or(0);
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(k, &v);
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Eigendecomposition of a PSD matrix with slightly negative eigenvalues clipped to zero.
fn psd_eig(m: &Matrix) -> Result<EigenDecomposition> {
    let mut eig = sym_eig(m)?;
    let spectral = eig.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for v in eig.values.iter_mut() {
        if *v < -PSD_TOL * spectral {
            return Err(Error::InvalidData(format!(
                "matrix is not positive semidefinite (eigenvalue {v:e})"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn check_psd(m: &Matrix) -> Result<()> {
    psd_eig(m).map(|_| ())
}

fn spectral_map(eig: &EigenDecomposition, f: impl Fn(f64) -> f64) -> Matrix {
    let d = eig.values.map(f);
    symmetrize(&(&eig.vectors * Matrix::from_diagonal(&d) * eig.vectors.transpose()))
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = psd_eig(m)?;
    Ok(spectral_map(&eig, f64::sqrt))
}

/// Symmetric inverse square root using eigenvalues `max(λ, 0) + ridge`.
///
/// With `ridge == 0`, eigenvalues below `1e-12 · λ_max` are rejected.
pub fn psd_inv_sqrt(m: &Matrix, ridge: f64) -> Result<Matrix> {
    inv_sqrt_labeled(m, ridge, "matrix")
}

fn inv_sqrt_labeled(m: &Matrix, ridge: f64, label: &str) -> Result<Matrix> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidParameter(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let eig = psd_eig(m).map_err(|e| match e {
        Error::InvalidData(msg) => Error::InvalidData(format!("block `{label}`: {msg}")),
        other => other,
    })?;
    if eig.values.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    let max = eig.values[0];
    if ridge == 0.0 {
        let min = eig.values[eig.values.len() - 1];
        if max <= 0.0 || min < SINGULAR_TOL * max {
            return Err(Error::singular(label));
        }
    }
    Ok(spectral_map(&eig, |v| 1.0 / (v + ridge).sqrt()))
}

/// Inverse square root of a covariance block under a ridge policy; errors name `label`.
pub fn inv_sqrt_with(m: &Matrix, label: &str, policy: RidgePolicy) -> Result<Matrix> {
    match policy {
        RidgePolicy::Exact => inv_sqrt_labeled(m, 0.0, label),
        RidgePolicy::Fixed(r) => inv_sqrt_labeled(m, r, label),
        RidgePolicy::Fallback(factor) => match inv_sqrt_labeled(m, 0.0, label) {
            Err(Error::SingularCovariance { .. }) => {
                let dim = m.nrows().max(1) as f64;
                let ridge = factor * m.trace() / dim;
                if ridge > 0.0 {
                    inv_sqrt_labeled(m, ridge, label)
                } else {
                    Err(Error::singular(label))
                }
            }
            other => other,
        },
    }
}

/// Means and unbiased covariance of the rows of `data`, partitioned into named blocks.
///
/// Rows are put into a canonical order before accumulation, so the result is
/// bit-identical under any permutation of the rows.
pub fn empirical_moments(data: &Matrix, partition: &[(&str, usize)]) -> Result<MomentSummary> {
    let (n, p) = data.shape();
    if p == 0 {
        return Err(Error::InvalidData("data has no columns".into()));
    }
    check_finite(data)?;
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let total: usize = partition.iter().map(|(_, d)| d).sum();
    if total != p {
        return Err(Error::InvalidData(format!(
            "block partition covers {total} columns but data has {p}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        for j in 0..p {
            let c = data[(a, j)].total_cmp(&data[(b, j)]);
            if c != Ordering::Equal {
                return c;
            }
        }
        Ordering::Equal
    });
    let mut mean = Vector::zeros(p);
    for &i in &order {
        for j in 0..p {
            mean[j] += data[(i, j)];
        }
    }
    mean /= n as f64;
    let mut cov = Matrix::zeros(p, p);
    let mut centered = vec![0.0; p];
    for &i in &order {
        for j in 0..p {
            centered[j] = data[(i, j)] - mean[j];
        }
        for a in 0..p {
            for b in a..p {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let blocks = partition
        .iter()
        .map(|(name, dim)| Block {
            name: name.to_string(),
            dim: *dim,
        })
        .collect();
    MomentSummary::new(blocks, mean, cov, Provenance::Empirical { n })
}

/// Gaussian conditional cross-covariance `Σ_uv − Σ_ug Σ_g⁻¹ Σ_gv`.
pub fn partial_covariance(m: &MomentSummary, u: &str, v: &str, given: &str) -> Result<Matrix> {
    partial_covariance_with(m, u, v, given, RidgePolicy::Exact)
}

pub fn partial_covariance_with(
    m: &MomentSummary,
    u: &str,
    v: &str,
    given: &str,
    policy: RidgePolicy,
) -> Result<Matrix> {
    let k = inv_sqrt_with(&m.cov(given, given)?, given, policy)?;
    let left = m.cov(u, given)? * &k;
    let right = &k * m.cov(given, v)?;
    Ok(m.cov(u, v)? - left * right)
}
