//! Log marginal likelihood and its gradient.
//!
//! All hormones of a block are observed on the same days, so the block
//! covariance is `K (x) k + D (x) I`. With `k = Q diag(lambda) Q^T`, rotating
//! the observations by `Q` splits the `H_b n` system into `n` small systems
//! `B_j = lambda_j K + D` of size `H_b`, each factorized by Cholesky.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::kernel::periodic_gram_with_log_derivs;
use super::{days_as_f64, BlockHyper, BlockStructure, MgpHyperparams, ObservationSet};
use crate::error::{Error, Result};
use crate::hormone::HormoneId;
use crate::linalg::cholesky_with_jitter;

/// Number of unconstrained parameters of a block with `size` hormones and
/// rank `rank`: `ln p`, `ln l`, `V` (row-major), `ln v`, `ln d`.
pub(crate) fn block_param_count(size: usize, rank: usize) -> usize {
    2 + size * rank + 2 * size
}

pub(crate) fn pack_block(bh: &BlockHyper, noise: &[f64]) -> Vec<f64> {
    let mut out = vec![bh.period.ln(), bh.lengthscale.ln()];
    for i in 0..bh.task_factors.nrows() {
        for j in 0..bh.task_factors.ncols() {
            out.push(bh.task_factors[(i, j)]);
        }
    }
    out.extend(bh.task_diag.iter().map(|v| v.ln()));
    out.extend(noise.iter().map(|d| d.ln()));
    out
}

pub(crate) fn unpack_block(x: &[f64], size: usize, rank: usize) -> (BlockHyper, Vec<f64>) {
    debug_assert_eq!(x.len(), block_param_count(size, rank));
    let vf = &x[2..2 + size * rank];
    let rest = &x[2 + size * rank..];
    let bh = BlockHyper {
        period: x[0].exp(),
        lengthscale: x[1].exp(),
        task_factors: DMatrix::from_row_slice(size, rank, vf),
        task_diag: rest[..size].iter().map(|v| v.exp()).collect(),
    };
    let noise = rest[size..].iter().map(|d| d.exp()).collect();
    (bh, noise)
}

pub(crate) fn block_noise(hyper: &MgpHyperparams, group: &[HormoneId]) -> Vec<f64> {
    group.iter().map(|h| hyper.noise[h.index()]).collect()
}

/// Flattens all hyperparameters into the unconstrained vector used by the
/// optimizer, block after block.
pub fn pack_params(hyper: &MgpHyperparams, blocks: &BlockStructure) -> Vec<f64> {
    hyper
        .blocks
        .iter()
        .zip(blocks.groups())
        .flat_map(|(bh, g)| pack_block(bh, &block_noise(hyper, g)))
        .collect()
}

/// Inverse of [`pack_params`]; `template` supplies the block ranks.
pub fn unpack_params(x: &[f64], template: &MgpHyperparams, blocks: &BlockStructure) -> MgpHyperparams {
    let mut out = template.clone();
    let mut off = 0;
    for (b, g) in blocks.groups().iter().enumerate() {
        let rank = template.blocks[b].task_factors.ncols();
        let n = block_param_count(g.len(), rank);
        let (bh, noise) = unpack_block(&x[off..off + n], g.len(), rank);
        out.blocks[b] = bh;
        for (h, d) in g.iter().zip(noise) {
            out.noise[h.index()] = d;
        }
        off += n;
    }
    out
}

/// Log likelihood of one block and, if requested, its gradient with respect
/// to the packed block parameters.
pub(crate) fn block_objective(
    bh: &BlockHyper,
    noise: &[f64],
    t: &[f64],
    y: &DMatrix<f64>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let hb = bh.size();
    let n = t.len();
    debug_assert_eq!(y.shape(), (hb, n));
    let (k, dk_dp, dk_dl) = periodic_gram_with_log_derivs(t, bh.period, bh.lengthscale);
    let eig = SymmetricEigen::new(k);
    let q = eig.eigenvectors;
    let lambda: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let task = bh.task_matrix();
    let y_rot = y * &q;

    let mut quad = 0.0;
    let mut logdet = 0.0;
    let mut g_task = DMatrix::zeros(hb, hb);
    let mut g_noise = DVector::<f64>::zeros(hb);
    let mut alpha_rot = DMatrix::zeros(hb, n);
    let mut trace_terms = vec![0.0; n];
    for j in 0..n {
        let mut b = &task * lambda[j];
        for h in 0..hb {
            b[(h, h)] += noise[h];
        }
        let f = cholesky_with_jitter(&b, "block likelihood")?;
        let yj = y_rot.column(j).into_owned();
        let aj = f.chol.solve(&yj);
        quad += yj.dot(&aj);
        logdet += f.ln_determinant();
        if want_grad {
            let binv = f.chol.inverse();
            let g = (&aj * aj.transpose() - &binv) * 0.5;
            g_task += &g * lambda[j];
            for h in 0..hb {
                g_noise[h] += g[(h, h)];
            }
            trace_terms[j] = task.component_mul(&binv).sum();
            alpha_rot.set_column(j, &aj);
        }
    }
    let value = -0.5 * quad - 0.5 * logdet - 0.5 * (hb * n) as f64 * (2.0 * PI).ln();
    if !value.is_finite() {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }

    let alpha = &alpha_rot * q.transpose();
    let qc = DMatrix::from_fn(n, n, |i, j| q[(i, j)] * trace_terms[j]);
    let w = (alpha.transpose() * &task * &alpha - qc * q.transpose()) * 0.5;

    let mut grad = Vec::with_capacity(block_param_count(hb, bh.task_factors.ncols()));
    grad.push(w.component_mul(&dk_dp).sum());
    grad.push(w.component_mul(&dk_dl).sum());
    let g_factors = &g_task * &bh.task_factors * 2.0;
    for i in 0..g_factors.nrows() {
        for r in 0..g_factors.ncols() {
            grad.push(g_factors[(i, r)]);
        }
    }
    for h in 0..hb {
        grad.push(g_task[(h, h)] * bh.task_diag[h]);
    }
    for h in 0..hb {
        grad.push(g_noise[h] * noise[h]);
    }
    Ok((value, Some(grad)))
}

fn check(hyper: &MgpHyperparams, blocks: &BlockStructure, obs: &ObservationSet) -> Result<()> {
    hyper.validate(blocks)?;
    if obs.is_empty() {
        return Err(Error::invalid(format!("{}: no observations", obs.individual_id)));
    }
    Ok(())
}

/// `log N(y | 0, Sigma_obs)` where `Sigma_obs` is the noisy covariance over
/// the observed days.
pub fn log_marginal_likelihood(
    hyper: &MgpHyperparams,
    blocks: &BlockStructure,
    obs: &ObservationSet,
) -> Result<f64> {
    check(hyper, blocks, obs)?;
    let t = days_as_f64(obs.days());
    let mut total = 0.0;
    for (bh, g) in hyper.blocks.iter().zip(blocks.groups()) {
        let (v, _) = block_objective(bh, &block_noise(hyper, g), &t, &obs.block_values(g), false)?;
        total += v;
    }
    Ok(total)
}

/// Log marginal likelihood with its gradient in the [`pack_params`] layout.
pub fn log_marginal_likelihood_with_gradient(
    hyper: &MgpHyperparams,
    blocks: &BlockStructure,
    obs: &ObservationSet,
) -> Result<(f64, Vec<f64>)> {
    check(hyper, blocks, obs)?;
    let t = days_as_f64(obs.days());
    let mut total = 0.0;
    let mut grad = Vec::new();
    for (bh, g) in hyper.blocks.iter().zip(blocks.groups()) {
        let (v, gb) = block_objective(bh, &block_noise(hyper, g), &t, &obs.block_values(g), true)?;
        total += v;
        grad.extend(gb.expect("gradient requested"));
    }
    Ok((total, grad))
}
