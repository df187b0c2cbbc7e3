//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::PI;

use hormone_recon::mgp::{BlockHyper, BlockStructure, MgpHyperparams};
use hormone_recon::rng::Rng as ChaCha;
use hormone_recon::HormoneId;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

/// Random partition of the five hormones into groups of at most `max_group`.
pub fn random_partition(rng: &mut ChaCha, max_group: usize) -> BlockStructure {
    let mut hs = HormoneId::ALL.to_vec();
    hs.shuffle(rng);
    let mut groups = Vec::new();
    while !hs.is_empty() {
        let k = rng.random_range(1..=max_group.min(hs.len()));
        groups.push(hs.drain(..k).collect());
    }
    BlockStructure::new(groups).unwrap()
}

pub fn random_hyper(rng: &mut ChaCha, blocks: &BlockStructure) -> MgpHyperparams {
    MgpHyperparams {
        blocks: blocks
            .groups()
            .iter()
            .map(|g| {
                let rank = rng.random_range(1..=2);
                BlockHyper {
                    period: rng.random_range(15.0..40.0),
                    lengthscale: rng.random_range(0.3..2.0),
                    task_factors: DMatrix::from_fn(g.len(), rank, |_, _| rng.random_range(-1.0..1.0)),
                    task_diag: (0..g.len()).map(|_| rng.random_range(0.1..1.5)).collect(),
                }
            })
            .collect(),
        noise: std::array::from_fn(|_| rng.random_range(0.05..0.5)),
    }
}

/// `n` distinct sorted days in `1..=max`.
pub fn random_days(rng: &mut ChaCha, n: usize, max: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (1..=max).collect();
    all.shuffle(rng);
    let mut d = all[..n].to_vec();
    d.sort_unstable();
    d
}

pub fn kernel_oracle(t: f64, s: f64, p: f64, l: f64) -> f64 {
    let u = (PI * (t - s).abs() / p).sin();
    (-(2.0 * u * u) / (l * l)).exp()
}

/// Element-by-element covariance in hormone-major order.
pub fn brute_force_covariance(
    hyper: &MgpHyperparams,
    blocks: &BlockStructure,
    days: &[usize],
    with_noise: bool,
) -> DMatrix<f64> {
    let n = days.len();
    let mut out = DMatrix::zeros(5 * n, 5 * n);
    for h in HormoneId::ALL {
        for h2 in HormoneId::ALL {
            let (b, i) = blocks.locate(h);
            let (b2, j) = blocks.locate(h2);
            for (a, &t) in days.iter().enumerate() {
                for (c, &s) in days.iter().enumerate() {
                    let mut v = 0.0;
                    if b == b2 {
                        let bh = &hyper.blocks[b];
                        let mut task = 0.0;
                        for r in 0..bh.task_factors.ncols() {
                            task += bh.task_factors[(i, r)] * bh.task_factors[(j, r)];
                        }
                        if i == j {
                            task += bh.task_diag[i];
                        }
                        v = task * kernel_oracle(t as f64, s as f64, bh.period, bh.lengthscale);
                    }
                    if with_noise && h == h2 && a == c {
                        v += hyper.noise[h.index()];
                    }
                    out[(h.index() * n + a, h2.index() * n + c)] = v;
                }
            }
        }
    }
    out
}

/// `log N(y | 0, sigma)` via LU (determinant) and a dense inverse.
pub fn dense_log_likelihood(sigma: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = y.len();
    let yv = nalgebra::DVector::from_column_slice(y);
    let inv = sigma.clone().try_inverse().unwrap();
    let quad = (yv.transpose() * inv * &yv)[(0, 0)];
    let logdet = sigma.clone().lu().determinant().ln();
    -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln()
}

/// Observations flattened in hormone-major order (`values` is `n x 5`).
pub fn hormone_major(values: &DMatrix<f64>) -> Vec<f64> {
    let mut y = Vec::new();
    for h in 0..5 {
        for i in 0..values.nrows() {
            y.push(values[(i, h)]);
        }
    }
    y
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// DCNN with every weight and bias drawn uniformly from `[-scale, scale]`.
pub fn random_dcnn(cfg: hormone_recon::dcnn::DcnnConfig, rng: &mut ChaCha, scale: f64) -> hormone_recon::dcnn::DcnnModel {
    let mut model = hormone_recon::dcnn::DcnnModel::zeros(cfg).unwrap();
    let flat: Vec<f64> = (0..model.params.len())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    model.params.set_flat(&flat).unwrap();
    model
}

pub fn random_series(rng: &mut ChaCha, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Central finite differences of the full-range loss against the analytic
/// gradient. Returns `(index, analytic, numeric)` for every weight.
pub fn dcnn_gradient_pairs(
    model: &hormone_recon::dcnn::DcnnModel,
    z: &DMatrix<f64>,
    target: &DMatrix<f64>,
    step: f64,
) -> Vec<(usize, f64, f64)> {
    use hormone_recon::dcnn::{forward, gradients, mse_loss};
    let t = z.ncols();
    let (_, g) = gradients(model, z, target, 1..=t).unwrap();
    let g = g.to_flat();
    let x = model.params.to_flat();
    let mut probe = model.clone();
    let mut loss_at = |w: &[f64]| {
        probe.params.set_flat(w).unwrap();
        mse_loss(&forward(&probe, z).unwrap(), target, 1..=t).unwrap()
    };
    (0..x.len())
        .map(|i| {
            let mut w = x.clone();
            w[i] = x[i] + step;
            let fp = loss_at(&w);
            w[i] = x[i] - step;
            let fm = loss_at(&w);
            (i, g[i], (fp - fm) / (2.0 * step))
        })
        .collect()
}

/// Relative error with a floor on the denominator so that components that
/// are zero up to rounding compare on an absolute scale.
pub fn gradient_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `n` standard normal draws.
pub fn normals(rng: &mut ChaCha, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

/// Monte-Carlo mean of `|r - sigma * eps|` and its standard error.
pub fn mc_expected_distance(r: f64, sigma: f64, eps: &[f64]) -> (f64, f64) {
    let n = eps.len() as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for e in eps {
        let v = (r - sigma * e).abs();
        s += v;
        s2 += v * v;
    }
    let mean = s / n;
    let var = (s2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}
