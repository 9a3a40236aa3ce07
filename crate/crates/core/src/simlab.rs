//! Linear-Gaussian structural equation models and the shift-robustness experiments.
//!
//! Every experiment is a pure function of its config: iteration `i` draws from
//! its own ChaCha stream derived from `(seed, i)`, so results do not depend on
//! how rayon schedules the work.

use nalgebra::Cholesky;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::extractor::{lambda_path, DeltaConvention, Prepared, Roles};
use crate::heads::{
    fit_anchor_baseline, fit_ols_baseline, model_conditional_correlation, mse_population, mse_population_raw, Head,
};
use crate::matstats::{inv_sqrt_with, sym_eig, Block, Matrix, MomentSummary, Provenance, RidgePolicy, Vector};
use crate::serial;

pub const Y: &str = "y";
pub const Z: &str = "z";
pub const S: &str = "s";
pub const X: &str = "x";

/// Structural equation model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SemKind {
    /// `(Z, Y) ~ N(0, Σ_ρ)`, `X₁ = Z + ε₁`, `X₂ = Y − Z + ε₂`.
    Toy { rho: f64, sigma1_sq: f64, sigma2_sq: f64 },
    /// `(Z, S, Y) ~ N(0, Σ_e)` with the toy equations for `X`.
    Surrogate {
        /// Covariance of `(Z, S, Y)`, 3x3.
        #[serde(with = "serial::matrix")]
        sigma_e: Matrix,
        sigma1_sq: f64,
        sigma2_sq: f64,
    },
    /// `(S, Z, Y) ~ N(0, Σ)`, `X = A Z + B Y + ε_X`.
    Multivariate {
        d_s: usize,
        d_z: usize,
        d_y: usize,
        d_x: usize,
        /// Covariance of `(S, Z, Y)`.
        #[serde(with = "serial::matrix")]
        sigma: Matrix,
        #[serde(with = "serial::matrix")]
        a: Matrix,
        #[serde(with = "serial::matrix")]
        b: Matrix,
        #[serde(with = "serial::matrix")]
        noise_cov: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemSpec {
    #[serde(flatten)]
    pub kind: SemKind,
    #[serde(default)]
    pub seed: u64,
}

/// Latent covariance in `(Y, Z, S)` order, loading of `X` on the latent vector, and noise covariance.
struct LinearGaussian {
    dims: [usize; 3],
    latent_cov: Matrix,
    loading: Matrix,
    noise_cov: Matrix,
}

fn is_spd(m: &Matrix) -> bool {
    m.is_square() && m.iter().all(|v| v.is_finite()) && Cholesky::new(m.clone()).is_some()
}

fn toy_latent(sigma_zsy: &Matrix, has_s: bool) -> (Matrix, [usize; 3]) {
    // reorder (Z, S, Y) -> (Y, Z, S)
    let order: Vec<usize> = if has_s { vec![2, 0, 1] } else { vec![1, 0] };
    let k = order.len();
    let cov = Matrix::from_fn(k, k, |i, j| sigma_zsy[(order[i], order[j])]);
    (cov, [1, 1, usize::from(has_s)])
}

impl SemSpec {
    pub fn toy(rho: f64, sigma1_sq: f64, sigma2_sq: f64) -> Self {
        SemSpec {
            kind: SemKind::Toy {
                rho,
                sigma1_sq,
                sigma2_sq,
            },
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Blocks in output order `y, z, [s], x`.
    pub fn blocks(&self) -> Result<Vec<Block>> {
        let lg = self.linear_gaussian()?;
        let mut blocks = vec![
            Block { name: Y.into(), dim: lg.dims[0] },
            Block { name: Z.into(), dim: lg.dims[1] },
        ];
        if lg.dims[2] > 0 {
            blocks.push(Block { name: S.into(), dim: lg.dims[2] });
        }
        blocks.push(Block {
            name: X.into(),
            dim: lg.loading.nrows(),
        });
        Ok(blocks)
    }

    pub fn partition(&self) -> Result<Vec<(&'static str, usize)>> {
        Ok(self
            .blocks()?
            .into_iter()
            .map(|b| {
                let name = match b.name.as_str() {
                    "y" => Y,
                    "z" => Z,
                    "s" => S,
                    _ => X,
                };
                (name, b.dim)
            })
            .collect())
    }

    fn linear_gaussian(&self) -> Result<LinearGaussian> {
        let toy_x = |s1: f64, s2: f64, has_s: bool| -> Result<(Matrix, Matrix)> {
            if !(s1 > 0.0 && s2 > 0.0) {
                return Err(Error::InvalidData("noise variances must be positive".into()));
            }
            // X = [[0, 1, 0], [1, -1, 0]] (Y, Z, S)
            let loading = if has_s {
                Matrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 1.0, -1.0, 0.0])
            } else {
                Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -1.0])
            };
            Ok((loading, Matrix::from_diagonal(&Vector::from_vec(vec![s1, s2]))))
        };
        match &self.kind {
            SemKind::Toy {
                rho,
                sigma1_sq,
                sigma2_sq,
            } => {
                if !(rho.abs() < 1.0) {
                    return Err(Error::InvalidData(format!("toy correlation must satisfy |rho| < 1, got {rho}")));
                }
                let zy = Matrix::from_row_slice(2, 2, &[1.0, *rho, *rho, 1.0]);
                let (latent_cov, dims) = toy_latent(&zy, false);
                let (loading, noise_cov) = toy_x(*sigma1_sq, *sigma2_sq, false)?;
                Ok(LinearGaussian {
                    dims,
                    latent_cov,
                    loading,
                    noise_cov,
                })
            }
            SemKind::Surrogate {
                sigma_e,
                sigma1_sq,
                sigma2_sq,
            } => {
                if sigma_e.shape() != (3, 3) || !is_spd(sigma_e) {
                    return Err(Error::InvalidData("surrogate covariance must be a 3x3 SPD matrix".into()));
                }
                let (latent_cov, dims) = toy_latent(sigma_e, true);
                let (loading, noise_cov) = toy_x(*sigma1_sq, *sigma2_sq, true)?;
                Ok(LinearGaussian {
                    dims,
                    latent_cov,
                    loading,
                    noise_cov,
                })
            }
            SemKind::Multivariate {
                d_s,
                d_z,
                d_y,
                d_x,
                sigma,
                a,
                b,
                noise_cov,
            } => {
                let (ds, dz, dy, dx) = (*d_s, *d_z, *d_y, *d_x);
                let k = ds + dz + dy;
                if sigma.shape() != (k, k) || !is_spd(sigma) {
                    return Err(Error::InvalidData(format!("latent covariance must be a {k}x{k} SPD matrix")));
                }
                if a.shape() != (dx, dz) || b.shape() != (dx, dy) {
                    return Err(Error::InvalidData(format!("A must be {dx}x{dz} and B {dx}x{dy}")));
                }
                if noise_cov.shape() != (dx, dx) || !is_spd(noise_cov) {
                    return Err(Error::InvalidData(format!("noise covariance must be a {dx}x{dx} SPD matrix")));
                }
                // (S, Z, Y) -> (Y, Z, S)
                let order: Vec<usize> = (ds + dz..k).chain(ds..ds + dz).chain(0..ds).collect();
                let latent_cov = Matrix::from_fn(k, k, |i, j| sigma[(order[i], order[j])]);
                let mut loading = Matrix::zeros(dx, k);
                loading.view_mut((0, 0), (dx, dy)).copy_from(b);
                loading.view_mut((0, dy), (dx, dz)).copy_from(a);
                Ok(LinearGaussian {
                    dims: [dy, dz, ds],
                    latent_cov,
                    loading,
                    noise_cov: noise_cov.clone(),
                })
            }
        }
    }

    /// Exact covariance of the latent `(Z, S, Y)` (or `(Z, Y)`) vector in the
    /// order the spec was given in; used for source/target distances.
    pub fn latent_cov(&self) -> Matrix {
        match &self.kind {
            SemKind::Toy { rho, .. } => Matrix::from_row_slice(2, 2, &[1.0, *rho, *rho, 1.0]),
            SemKind::Surrogate { sigma_e, .. } => sigma_e.clone(),
            SemKind::Multivariate { sigma, .. } => sigma.clone(),
        }
    }
}

/// Exact joint moments of `(Y, Z, S, X)` by linear-Gaussian propagation.
pub fn sem_to_moments(spec: &SemSpec) -> Result<MomentSummary> {
    let lg = spec.linear_gaussian()?;
    let k = lg.latent_cov.nrows();
    let dx = lg.loading.nrows();
    let cross = &lg.loading * &lg.latent_cov; // dx x k
    let mut cov = Matrix::zeros(k + dx, k + dx);
    cov.view_mut((0, 0), (k, k)).copy_from(&lg.latent_cov);
    cov.view_mut((k, 0), (dx, k)).copy_from(&cross);
    cov.view_mut((0, k), (k, dx)).copy_from(&cross.transpose());
    cov.view_mut((k, k), (dx, dx))
        .copy_from(&(&cross * lg.loading.transpose() + &lg.noise_cov));
    MomentSummary::new(spec.blocks()?, Vector::zeros(k + dx), cov, Provenance::Exact)
}

fn standard_normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    // fill row by row so the draw order is independent of storage layout
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

fn cholesky_factor(m: &Matrix, what: &str) -> Result<Matrix> {
    Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidData(format!("{what} is not positive definite")))
}

/// `n` seeded draws; columns in the order of [`SemSpec::blocks`].
pub fn sample(spec: &SemSpec, n: usize) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_with(spec, n, &mut rng)
}

fn sample_with(spec: &SemSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let lg = spec.linear_gaussian()?;
    let k = lg.latent_cov.nrows();
    let dx = lg.loading.nrows();
    let l_latent = cholesky_factor(&lg.latent_cov, "latent covariance")?;
    let l_noise = cholesky_factor(&lg.noise_cov, "noise covariance")?;
    let latent = standard_normal_matrix(rng, n, k) * l_latent.transpose();
    let noise = standard_normal_matrix(rng, n, dx) * l_noise.transpose();
    let x = &latent * lg.loading.transpose() + noise;
    let mut data = Matrix::zeros(n, k + dx);
    data.view_mut((0, 0), (n, k)).copy_from(&latent);
    data.view_mut((0, k), (n, dx)).copy_from(&x);
    Ok(data)
}

/// Independent RNG for stream `stream` of the master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `GGᵀ + dim·1e-3·I` with `G` standard normal.
pub fn random_spd(dim: usize, seed: u64) -> Matrix {
    random_spd_with(dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_spd_with(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = standard_normal_matrix(rng, dim, dim);
    let m = &g * g.transpose() + Matrix::identity(dim, dim) * (dim as f64 * 1e-3);
    crate::matstats::symmetrize(&m)
}

/// Congruence by `blockdiag(I, I, Σ_Y^{-1/2})` on a covariance ordered `(S, Z, Y)`,
/// making the trailing `d_y` block the identity.
pub fn enforce_unit_y(sigma: &Matrix, d_y: usize) -> Result<Matrix> {
    let k = sigma.nrows();
    if !sigma.is_square() || d_y == 0 || d_y > k {
        return Err(Error::InvalidData(format!("cannot take a {d_y}-dim Y block from a {k}x{k} matrix")));
    }
    let off = k - d_y;
    let sy = sigma.view((off, off), (d_y, d_y)).into_owned();
    let ky = inv_sqrt_with(&sy, Y, RidgePolicy::Exact)?;
    let mut t = Matrix::identity(k, k);
    t.view_mut((off, off), (d_y, d_y)).copy_from(&ky);
    let mut out = crate::matstats::symmetrize(&(&t * sigma * &t));
    // exact identity on the Y block
    out.view_mut((off, off), (d_y, d_y)).copy_from(&Matrix::identity(d_y, d_y));
    Ok(out)
}

/// `λ` values evenly spaced on `[0, 0.999]`.
pub fn default_lambda_grid() -> Vec<f64> {
    let n = 41;
    (0..n).map(|i| 0.999 * i as f64 / (n - 1) as f64).collect()
}

pub fn default_gamma_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
}

fn check_grid(grid: &[f64], what: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} grid is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{what} grid has non-finite values")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ols,
    Anchor,
    Barycentric,
}

/// Index of the minimum; the preferred index wins ties within `1e-12` relative.
fn argmin_preferring(values: &[f64], preferred: Option<usize>) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    if let Some(p) = preferred {
        if values[p] <= values[best] + 1e-12 * values[best].abs() {
            return p;
        }
    }
    best
}

/// Winner among OLS and the two tuned methods. A tuned method competes only if its
/// parameter did not revert to the OLS-equivalent value and it improves on OLS by
/// more than `threshold` (relative) and by more than round-off.
pub fn decide_winner(
    mse_ols: f64,
    anchor: Option<f64>,
    barycentric: Option<f64>,
    threshold: f64,
) -> Method {
    let improves = |m: f64| m < mse_ols * (1.0 - threshold) && mse_ols - m > 1e-12 * mse_ols.abs();
    let mut winner = Method::Ols;
    let mut best = mse_ols;
    for (method, mse) in [(Method::Anchor, anchor), (Method::Barycentric, barycentric)] {
        if let Some(m) = mse {
            if improves(m) && (winner == Method::Ols || m < best) {
                winner = method;
                best = m;
            }
        }
    }
    winner
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Candidate values for each of `(ρ_ZS, ρ_ZY, ρ_SY)`.
    pub correlations: Vec<f64>,
    /// Explicit triples `(ρ_ZS, ρ_ZY, ρ_SY)`; overrides `correlations` when set.
    pub triples: Option<Vec<[f64; 3]>>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub dim: usize,
    pub improvement_threshold: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            correlations: vec![-0.8, -0.4, 0.0, 0.4, 0.8],
            triples: None,
            sigma1_sq: 0.25,
            sigma2_sq: 0.25,
            lambda_grid: default_lambda_grid(),
            gamma_grid: default_gamma_grid(),
            dim: 1,
            improvement_threshold: 0.0,
        }
    }
}

impl GridConfig {
    /// Unit-variance `(Z, S, Y)` covariances that are positive definite.
    pub fn admissible(&self) -> Vec<Matrix> {
        let triples: Vec<[f64; 3]> = match &self.triples {
            Some(t) => t.clone(),
            None => {
                let c = &self.correlations;
                let mut out = Vec::new();
                for &zs in c {
                    for &zy in c {
                        for &sy in c {
                            out.push([zs, zy, sy]);
                        }
                    }
                }
                out
            }
        };
        triples
            .into_iter()
            .map(|[zs, zy, sy]| Matrix::from_row_slice(3, 3, &[1.0, zs, zy, zs, 1.0, sy, zy, sy, 1.0]))
            .filter(|m| sym_eig(m).map(|e| e.values[2] > 1e-10).unwrap_or(false))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source: usize,
    pub target: usize,
    pub frobenius_distance: f64,
    pub best_lambda: f64,
    pub best_gamma: f64,
    pub mse_ols: f64,
    pub mse_anchor: f64,
    pub mse_bary: f64,
    pub winner: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WinCounts {
    pub ols: usize,
    pub anchor: usize,
    pub barycentric: usize,
}

impl WinCounts {
    pub fn tally<'a>(winners: impl IntoIterator<Item = &'a Method>) -> Self {
        let mut c = WinCounts::default();
        for w in winners {
            match w {
                Method::Ols => c.ols += 1,
                Method::Anchor => c.anchor += 1,
                Method::Barycentric => c.barycentric += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.ols + self.anchor + self.barycentric
    }

    /// Percentages in the order ols, anchor, barycentric.
    pub fn shares(&self) -> [f64; 3] {
        let t = self.total().max(1) as f64;
        [self.ols as f64 / t, self.anchor as f64 / t, self.barycentric as f64 / t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub config: GridConfig,
    /// Admissible `(Z, S, Y)` covariances, indexed by the pair records.
    pub admissible: Vec<[f64; 3]>,
    pub records: Vec<PairRecord>,
    pub counts: WinCounts,
    /// Counts among the top quarter of pairs by Frobenius distance.
    pub top_quartile_counts: WinCounts,
}

struct SourceFits {
    ols: crate::heads::LinearHead,
    anchors: Vec<crate::heads::LinearHead>,
    bary: Vec<crate::extractor::FeatureModel>,
}

fn surrogate_spec(sigma_e: &Matrix, config: &GridConfig) -> SemSpec {
    SemSpec {
        kind: SemKind::Surrogate {
            sigma_e: sigma_e.clone(),
            sigma1_sq: config.sigma1_sq,
            sigma2_sq: config.sigma2_sq,
        },
        seed: 0,
    }
}

fn linear_head(model: &crate::extractor::FeatureModel) -> Result<&crate::heads::LinearHead> {
    match &model.head {
        Some(Head::Linear(h)) => Ok(h),
        _ => Err(Error::InvalidData("model has no linear head".into())),
    }
}

/// Population comparison of OLS, anchor regression (anchor = S) and the
/// barycentric extractor (context = S) over all ordered pairs of admissible
/// covariances, each method tuned on the target MSE.
pub fn population_shift_experiment(config: &GridConfig) -> Result<GridReport> {
    check_grid(&config.lambda_grid, "lambda")?;
    check_grid(&config.gamma_grid, "gamma")?;
    let admissible = config.admissible();
    if admissible.is_empty() {
        return Err(Error::InvalidConfig("no admissible covariance in the grid".into()));
    }
    let policy = RidgePolicy::default();
    let moments = admissible
        .iter()
        .map(|s| sem_to_moments(&surrogate_spec(s, config)))
        .collect::<Result<Vec<_>>>()?;
    let roles = Roles::with_context(&[S]);
    let fits = moments
        .par_iter()
        .map(|m| {
            let prepared = Prepared::regression(m, &roles, policy)?;
            Ok(SourceFits {
                ols: fit_ols_baseline(m, Y, X, policy)?,
                anchors: config
                    .gamma_grid
                    .iter()
                    .map(|&g| fit_anchor_baseline(m, Y, X, S, g, policy))
                    .collect::<Result<_>>()?,
                bary: lambda_path(&prepared, &config.lambda_grid, config.dim, DeltaConvention::Paper)?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage("fit sources")?;
    let n = admissible.len();
    let gamma_ols = config.gamma_grid.iter().position(|&g| g == 1.0);
    let lambda_ols = config.lambda_grid.iter().position(|&l| l == 0.0);
    let records = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (si, ti) = (idx / n, idx % n);
            let (fit, target) = (&fits[si], &moments[ti]);
            let mse_ols = mse_population_raw(&fit.ols, target, Y, X)?;
            let anchor_mse = fit
                .anchors
                .iter()
                .map(|h| mse_population_raw(h, target, Y, X))
                .collect::<Result<Vec<_>>>()?;
            let bary_mse = fit
                .bary
                .iter()
                .map(|m| mse_population(linear_head(m)?, m, target, Y, X))
                .collect::<Result<Vec<_>>>()?;
            let ga = argmin_preferring(&anchor_mse, gamma_ols);
            let lb = argmin_preferring(&bary_mse, lambda_ols);
            let anchor = (Some(ga) != gamma_ols).then_some(anchor_mse[ga]);
            let bary = (Some(lb) != lambda_ols).then_some(bary_mse[lb]);
            Ok(PairRecord {
                source: si,
                target: ti,
                frobenius_distance: (&admissible[si] - &admissible[ti]).norm(),
                best_lambda: config.lambda_grid[lb],
                best_gamma: config.gamma_grid[ga],
                mse_ols,
                mse_anchor: anchor_mse[ga],
                mse_bary: bary_mse[lb],
                winner: decide_winner(mse_ols, anchor, bary, config.improvement_threshold),
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage("evaluate pairs")?;
    let counts = WinCounts::tally(records.iter().map(|r| &r.winner));
    let mut by_distance: Vec<&PairRecord> = records.iter().collect();
    by_distance.sort_by(|a, b| {
        b.frobenius_distance
            .total_cmp(&a.frobenius_distance)
            .then((a.source, a.target).cmp(&(b.source, b.target)))
    });
    let top = by_distance.len().div_ceil(4);
    let top_quartile_counts = WinCounts::tally(by_distance[..top].iter().map(|r| &r.winner));
    Ok(GridReport {
        config: config.clone(),
        admissible: admissible.iter().map(|m| [m[(0, 1)], m[(0, 2)], m[(1, 2)]]).collect(),
        records,
        counts,
        top_quartile_counts,
    })
}

/// Dimensions and noise for the multivariate experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultivariateDims {
    pub d_s: usize,
    pub d_z: usize,
    pub d_y: usize,
    pub d_x: usize,
    pub noise_var: f64,
}

impl Default for MultivariateDims {
    fn default() -> Self {
        MultivariateDims {
            d_s: 2,
            d_z: 2,
            d_y: 2,
            d_x: 6,
            noise_var: 0.25,
        }
    }
}

impl MultivariateDims {
    fn latent_dim(&self) -> usize {
        self.d_s + self.d_z + self.d_y
    }

    fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.d_z == 0 || self.d_y == 0 || self.d_x == 0 || !(self.noise_var > 0.0) {
            return Err(Error::InvalidConfig("dimensions and noise variance must be positive".into()));
        }
        Ok(())
    }

    /// `A` (`d_x × d_z`) and `B` (`d_x × d_y`) drawn from the master stream.
    fn draw_loadings(&self, seed: u64) -> (Matrix, Matrix) {
        let mut rng = stream_rng(seed, 0);
        let a = standard_normal_matrix(&mut rng, self.d_x, self.d_z);
        let b = standard_normal_matrix(&mut rng, self.d_x, self.d_y);
        (a, b)
    }

    fn draw_covariance(&self, rng: &mut ChaCha8Rng) -> Result<Matrix> {
        enforce_unit_y(&random_spd_with(self.latent_dim(), rng), self.d_y)
    }

    fn spec(&self, sigma: Matrix, a: &Matrix, b: &Matrix, seed: u64) -> SemSpec {
        SemSpec {
            kind: SemKind::Multivariate {
                d_s: self.d_s,
                d_z: self.d_z,
                d_y: self.d_y,
                d_x: self.d_x,
                sigma,
                a: a.clone(),
                b: b.clone(),
                noise_cov: Matrix::identity(self.d_x, self.d_x) * self.noise_var,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaCurveConfig {
    pub seed: u64,
    pub reps: usize,
    pub n: usize,
    pub lambda_grid: Vec<f64>,
    pub dims: MultivariateDims,
    /// Feature dimension; defaults to `d_y`.
    pub dim: Option<usize>,
    /// Context blocks handed to the extractor (`"s"`, `"z"` or both).
    pub context: Vec<String>,
}

impl Default for LambdaCurveConfig {
    fn default() -> Self {
        LambdaCurveConfig {
            seed: 0,
            reps: 100,
            n: 2000,
            lambda_grid: default_lambda_grid(),
            dims: MultivariateDims::default(),
            dim: None,
            context: vec![Z.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub rep: usize,
    pub lambda: f64,
    /// `‖Corr(W_λ, Z | Y)‖_F` on the exact source moments.
    pub conditional_correlation: f64,
    pub mse_source: f64,
    pub mse_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCurveReport {
    pub config: LambdaCurveConfig,
    pub rows: Vec<CurveRow>,
    /// Fraction of reps whose value at the largest `λ` is below the value at the smallest.
    pub decay_fraction: f64,
}

/// Finite-sample `λ ↦ ‖Corr(W_λ, Z | Y)‖_F` curves on random multivariate SEMs.
pub fn lambda_curve_experiment(config: &LambdaCurveConfig) -> Result<LambdaCurveReport> {
    if config.reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    check_grid(&config.lambda_grid, "lambda")?;
    config.dims.validate()?;
    let dims = config.dims;
    let dim = config.dim.unwrap_or(dims.d_y);
    let (a, b) = dims.draw_loadings(config.seed);
    let policy = RidgePolicy::default();
    if config.context.is_empty() || config.context.iter().any(|c| c != S && c != Z) {
        return Err(Error::InvalidConfig("context must be a non-empty subset of {s, z}".into()));
    }
    let context: Vec<&str> = config.context.iter().map(String::as_str).collect();
    let roles = Roles::with_context(&context);
    let first = config
        .lambda_grid
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let last = config
        .lambda_grid
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let per_rep = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(config.seed, rep as u64 + 1);
            let source = dims.spec(dims.draw_covariance(&mut rng)?, &a, &b, 0);
            let target = dims.spec(dims.draw_covariance(&mut rng)?, &a, &b, 0);
            let exact_source = sem_to_moments(&source)?;
            let exact_target = sem_to_moments(&target)?;
            let data = sample_with(&source, config.n, &mut rng)?;
            let empirical = crate::matstats::empirical_moments(&data, &source.partition()?)?;
            let prepared = Prepared::regression(&empirical, &roles, policy)?;
            let models = lambda_path(&prepared, &config.lambda_grid, dim, DeltaConvention::Paper)?;
            models
                .iter()
                .map(|m| {
                    let head = linear_head(m)?;
                    Ok(CurveRow {
                        rep,
                        lambda: m.lambda,
                        conditional_correlation: model_conditional_correlation(m, &exact_source, X, Z, Y, policy)?,
                        mse_source: mse_population(head, m, &exact_source, Y, X)?,
                        mse_target: mse_population(head, m, &exact_target, Y, X)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .stage("lambda curve")?;
    let decays = per_rep
        .iter()
        .filter(|rows| rows[last].conditional_correlation < rows[first].conditional_correlation)
        .count();
    Ok(LambdaCurveReport {
        config: config.clone(),
        decay_fraction: decays as f64 / config.reps as f64,
        rows: per_rep.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaStarConfig {
    pub seed: u64,
    pub iters: usize,
    pub lambda_grid: Vec<f64>,
    /// Relative improvement over OLS required to keep `λ > 0`.
    pub improvement_threshold: f64,
    /// Draw a new source covariance every iteration (otherwise one source for all).
    pub redraw_source: bool,
    pub dims: MultivariateDims,
    pub dim: Option<usize>,
}

impl Default for LambdaStarConfig {
    fn default() -> Self {
        LambdaStarConfig {
            seed: 0,
            iters: 5000,
            lambda_grid: default_lambda_grid(),
            improvement_threshold: 0.005,
            redraw_source: true,
            dims: MultivariateDims::default(),
            dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStarRecord {
    pub iter: usize,
    pub lambda_star: f64,
    pub argmin_lambda: f64,
    pub mse_ols: f64,
    pub mse_best: f64,
    pub relative_improvement: f64,
    pub frobenius_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStarReport {
    pub config: LambdaStarConfig,
    pub records: Vec<LambdaStarRecord>,
    /// Fraction of `λ*` in `{0} ∪ [0.9, 1]`.
    pub boundary_mass: f64,
    /// Fraction of `λ*` in `(0.1, 0.9)`.
    pub interior_mass: f64,
}

impl LambdaStarReport {
    pub fn samples(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda_star).collect()
    }
}

/// Best `λ` on random target shifts, reset to 0 unless it beats OLS by the threshold.
pub fn lambda_star_experiment(config: &LambdaStarConfig) -> Result<LambdaStarReport> {
    if config.iters == 0 {
        return Err(Error::InvalidConfig("iters must be at least 1".into()));
    }
    check_grid(&config.lambda_grid, "lambda")?;
    config.dims.validate()?;
    let dims = config.dims;
    let dim = config.dim.unwrap_or(dims.d_y);
    let (a, b) = dims.draw_loadings(config.seed);
    let fixed_source = if config.redraw_source {
        None
    } else {
        let mut rng = stream_rng(config.seed, u64::MAX);
        Some(dims.draw_covariance(&mut rng)?)
    };
    let policy = RidgePolicy::default();
    let roles = Roles::with_context(&[S]);
    let zero = config.lambda_grid.iter().position(|&l| l == 0.0);
    let records = (0..config.iters)
        .into_par_iter()
        .map(|iter| {
            let mut rng = stream_rng(config.seed, iter as u64 + 1);
            let sigma_source = match &fixed_source {
                Some(s) => s.clone(),
                None => dims.draw_covariance(&mut rng)?,
            };
            let sigma_target = dims.draw_covariance(&mut rng)?;
            let frobenius_distance = (&sigma_source - &sigma_target).norm();
            let source = sem_to_moments(&dims.spec(sigma_source, &a, &b, 0))?;
            let target = sem_to_moments(&dims.spec(sigma_target, &a, &b, 0))?;
            let ols = fit_ols_baseline(&source, Y, X, policy)?;
            let mse_ols = mse_population_raw(&ols, &target, Y, X)?;
            let prepared = Prepared::regression(&source, &roles, policy)?;
            let models = lambda_path(&prepared, &config.lambda_grid, dim, DeltaConvention::Paper)?;
            let mses = models
                .iter()
                .map(|m| mse_population(linear_head(m)?, m, &target, Y, X))
                .collect::<Result<Vec<_>>>()?;
            let best = argmin_preferring(&mses, zero);
            let relative_improvement = (mse_ols - mses[best]) / mse_ols;
            let keep = relative_improvement >= config.improvement_threshold;
            Ok(LambdaStarRecord {
                iter,
                lambda_star: if keep { config.lambda_grid[best] } else { 0.0 },
                argmin_lambda: config.lambda_grid[best],
                mse_ols,
                mse_best: mses[best],
                relative_improvement,
                frobenius_distance,
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage("lambda star")?;
    let n = records.len() as f64;
    let boundary = records
        .iter()
        .filter(|r| r.lambda_star == 0.0 || (0.9..=1.0).contains(&r.lambda_star))
        .count();
    let interior = records
        .iter()
        .filter(|r| r.lambda_star > 0.1 && r.lambda_star < 0.9)
        .count();
    Ok(LambdaStarReport {
        config: config.clone(),
        records,
        boundary_mass: boundary as f64 / n,
        interior_mass: interior as f64 / n,
    })
}
