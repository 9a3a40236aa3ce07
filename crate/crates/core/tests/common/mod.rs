#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use otbe::simlab::{enforce_unit_y, SemKind, SemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniform point on the Stiefel manifold: Gram-Schmidt on a Gaussian matrix.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    loop {
        let g = gaussian(rng, n, d);
        let mut q = Matrix::zeros(n, d);
        let mut ok = true;
        for j in 0..d {
            let mut v = g.column(j).into_owned();
            for k in 0..j {
                let qk = q.column(k).into_owned();
                v -= &qk * qk.dot(&v);
            }
            let norm = v.norm();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.set_column(j, &(v / norm));
        }
        if ok {
            return q;
        }
    }
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let g = gaussian(rng, n, n);
    &g * g.transpose() + Matrix::identity(n, n) * 0.1
}

/// Random multivariate SEM; `unit_y` forces `Cov(Y) = I`.
pub fn random_sem(rng: &mut ChaCha8Rng, d_s: usize, d_z: usize, d_y: usize, d_x: usize, unit_y: bool) -> SemSpec {
    let mut sigma = random_spd(rng, d_s + d_z + d_y);
    if unit_y {
        sigma = enforce_unit_y(&sigma, d_y).unwrap();
    }
    let a = gaussian(rng, d_x, d_z);
    let b = gaussian(rng, d_x, d_y);
    let noise = random_spd(rng, d_x) * 0.3;
    SemSpec {
        kind: SemKind::Multivariate {
            d_s,
            d_z,
            d_y,
            d_x,
            sigma,
            a,
            b,
            noise_cov: noise,
        },
        seed: rng.random(),
    }
}

/// Plain Nelder-Mead with restarts, used as a derivative-free oracle.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, restarts: usize) -> Vec<f64> {
    let n = x0.len();
    let mut best = x0.to_vec();
    let mut scale = step;
    for _ in 0..restarts {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for i in 0..n {
            let mut p = best.clone();
            p[i] += scale;
            simplex.push(p);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
        for _ in 0..20_000 * n {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            vals = order.iter().map(|&i| vals[i]).collect();
            let diameter = simplex[1..]
                .iter()
                .map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if diameter <= 1e-11 || (vals[n] - vals[0]).abs() <= 1e-16 * (1.0 + vals[0].abs()) {
                break;
            }
            let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
            let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < vals[0] {
                let xe = along(-2.0);
                let fe = f(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    vals[n] = fe;
                } else {
                    simplex[n] = xr;
                    vals[n] = fr;
                }
            } else if fr < vals[n - 1] {
                simplex[n] = xr;
                vals[n] = fr;
            } else {
                let xc = if fr < vals[n] { along(-0.5) } else { along(0.5) };
                let fc = f(&xc);
                if fc < vals[n].min(fr) {
                    simplex[n] = xc;
                    vals[n] = fc;
                } else {
                    for i in 1..=n {
                        simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                        vals[i] = f(&simplex[i]);
                    }
                }
            }
        }
        let i = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        best = simplex[i].clone();
        scale *= 0.1;
    }
    best
}

pub fn angle_between(u: &Vector, v: &Vector) -> f64 {
    let c = (u.dot(v) / (u.norm() * v.norm())).abs().min(1.0);
    c.acos()
}

/// Invertible matrix with singular values in `[0.5, 2]`.
pub fn well_conditioned(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let u = random_orthonormal(rng, d, d);
    let v = random_orthonormal(rng, d, d);
    let s = Vector::from_fn(d, |_, _| 0.5 + 1.5 * rng.random::<f64>());
    u * Matrix::from_diagonal(&s) * v.transpose()
}

/// Anchor objective `E[((I−Π_A)R)²] + γ E[(Π_A R)²]` with `R = Y − bX`, from
/// centered second moments: `Π_A R = Σ_RA Σ_A⁻¹ A`.
pub fn anchor_loss(m: &otbe::matstats::MomentSummary, gamma: f64, b: &Matrix) -> f64 {
    let syy = m.cov("y", "y").unwrap();
    let syx = m.cov("y", "x").unwrap();
    let sxx = m.cov("x", "x").unwrap();
    let sa_inv = m.cov("s", "s").unwrap().try_inverse().unwrap();
    let s_r = &syy - b * syx.transpose() - &syx * b.transpose() + b * &sxx * b.transpose();
    let s_ra = m.cov("y", "s").unwrap() - b * m.cov("x", "s").unwrap();
    let projected = (&s_ra * &sa_inv * s_ra.transpose()).trace();
    (s_r.trace() - projected) + gamma * projected
}
