use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{days_as_f64, BlockStructure, MgpHyperparams};
use crate::error::Result;
use crate::hormone::NUM_HORMONES;

/// Exponential periodic kernel `exp(-2 sin^2(pi |t - t'| / p) / l^2)`.
pub fn periodic_kernel(t: f64, t2: f64, period: f64, lengthscale: f64) -> f64 {
    let s = (PI * (t - t2).abs() / period).sin();
    (-2.0 * s * s / (lengthscale * lengthscale)).exp()
}

pub fn periodic_gram(a: &[f64], b: &[f64], period: f64, lengthscale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| periodic_kernel(a[i], b[j], period, lengthscale))
}

/// Gram matrix over `days` together with its derivatives with respect to
/// `ln p` and `ln l`.
pub(crate) fn periodic_gram_with_log_derivs(
    days: &[f64],
    period: f64,
    lengthscale: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = days.len();
    let l2 = lengthscale * lengthscale;
    let mut k = DMatrix::zeros(n, n);
    let mut dp = DMatrix::zeros(n, n);
    let mut dl = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let tau = (days[i] - days[j]).abs();
            let theta = PI * tau / period;
            let (s, c) = theta.sin_cos();
            let kv = (-2.0 * s * s / l2).exp();
            let dpv = kv * 4.0 * PI * tau * s * c / (l2 * period);
            let dlv = kv * 4.0 * s * s / l2;
            k[(i, j)] = kv;
            k[(j, i)] = kv;
            dp[(i, j)] = dpv;
            dp[(j, i)] = dpv;
            dl[(i, j)] = dlv;
            dl[(j, i)] = dlv;
        }
    }
    (k, dp, dl)
}

/// Coregionalization matrix `V V^T + diag(v)`.
pub fn task_kernel(factors: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    assert_eq!(factors.nrows(), diag.len(), "task factor/diagonal size mismatch");
    let mut k = factors * factors.transpose();
    for (i, v) in diag.iter().enumerate() {
        k[(i, i)] += v;
    }
    k
}

/// Dense joint covariance over `(hormone, day)` pairs in hormone-major order
/// (`NUM_HORMONES * days.len()` square). Entries across blocks are exactly
/// zero; `with_noise` adds `d_h` on the diagonal.
pub fn build_covariance(
    hyper: &MgpHyperparams,
    blocks: &BlockStructure,
    days: &[usize],
    with_noise: bool,
) -> Result<DMatrix<f64>> {
    hyper.validate(blocks)?;
    let n = days.len();
    let t = days_as_f64(days);
    let mut sigma = DMatrix::zeros(NUM_HORMONES * n, NUM_HORMONES * n);
    for (bh, group) in hyper.blocks.iter().zip(blocks.groups()) {
        let task = bh.task_matrix();
        let k = periodic_gram(&t, &t, bh.period, bh.lengthscale);
        for (a, ha) in group.iter().enumerate() {
            for (b, hb) in group.iter().enumerate() {
                let scale = task[(a, b)];
                let mut view = sigma.view_mut((ha.index() * n, hb.index() * n), (n, n));
                view.zip_apply(&k, |s, kv| *s = scale * kv);
            }
        }
    }
    if with_noise {
        for h in 0..NUM_HORMONES {
            for i in 0..n {
                sigma[(h * n + i, h * n + i)] += hyper.noise[h];
            }
        }
    }
    Ok(sigma)
}
