use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{block_values, days_as_f64, periodic_gram, BlockStructure, MgpHyperparams, ObservationSet};
use crate::error::{Error, Result};
use crate::hormone::{HormoneId, NUM_HORMONES};
use crate::linalg::{cholesky_with_jitter, symmetrize};

/// Gaussian posterior over the latent hormone levels on a grid of days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSeries {
    pub individual_id: String,
    pub days: Vec<usize>,
    /// `NUM_HORMONES x days.len()`.
    #[serde(with = "crate::linalg::rows")]
    pub mean: DMatrix<f64>,
    /// Joint covariance in hormone-major order.
    #[serde(with = "crate::linalg::rows")]
    pub covariance: DMatrix<f64>,
    /// Hormone groups with no cross-covariance between them.
    pub groups: Vec<Vec<HormoneId>>,
}

impl PosteriorSeries {
    fn flat(&self, h: HormoneId, i: usize) -> usize {
        h.index() * self.days.len() + i
    }

    /// Marginal variance of hormone `h` at grid position `i`.
    pub fn variance(&self, h: HormoneId, i: usize) -> f64 {
        let k = self.flat(h, i);
        self.covariance[(k, k)].max(0.0)
    }

    /// `NUM_HORMONES x days.len()` matrix of marginal variances.
    pub fn variances(&self) -> DMatrix<f64> {
        DMatrix::from_fn(NUM_HORMONES, self.days.len(), |h, i| {
            self.variance(HormoneId::ALL[h], i)
        })
    }

    /// Grid position of `day`, if present.
    pub fn position(&self, day: usize) -> Option<usize> {
        self.days.iter().position(|&d| d == day)
    }
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Posterior of the noise-free latent process at `query_days`, conditioned
/// on `obs` under a zero prior mean.
pub fn posterior(
    hyper: &MgpHyperparams,
    blocks: &BlockStructure,
    obs: &ObservationSet,
    query_days: &[usize],
) -> Result<PosteriorSeries> {
    posterior_unsorted(hyper, blocks, &obs.individual_id, obs.days(), obs.values(), query_days)
}

/// Same as [`posterior`] but accepts observation days in any order
/// (`values` has one row per entry of `days`).
pub fn posterior_unsorted(
    hyper: &MgpHyperparams,
    blocks: &BlockStructure,
    individual_id: &str,
    days: &[usize],
    values: &DMatrix<f64>,
    query_days: &[usize],
) -> Result<PosteriorSeries> {
    hyper.validate(blocks)?;
    if days.is_empty() {
        return Err(Error::invalid(format!("{individual_id}: no observations")));
    }
    if values.shape() != (days.len(), NUM_HORMONES) {
        return Err(Error::invalid("observation matrix shape"));
    }
    if query_days.is_empty() {
        return Err(Error::invalid("empty query grid"));
    }
    let n = days.len();
    let m = query_days.len();
    let to = days_as_f64(days);
    let tq = days_as_f64(query_days);
    let mut mean = DMatrix::zeros(NUM_HORMONES, m);
    let mut cov = DMatrix::zeros(NUM_HORMONES * m, NUM_HORMONES * m);

    for (bh, group) in hyper.blocks.iter().zip(blocks.groups()) {
        let hb = group.len();
        let task = bh.task_matrix();
        let k_oo = periodic_gram(&to, &to, bh.period, bh.lengthscale);
        let k_oq = periodic_gram(&to, &tq, bh.period, bh.lengthscale);
        let k_qq = periodic_gram(&tq, &tq, bh.period, bh.lengthscale);

        let mut sigma = kron(&task, &k_oo);
        for (a, h) in group.iter().enumerate() {
            for i in 0..n {
                sigma[(a * n + i, a * n + i)] += hyper.noise[h.index()];
            }
        }
        let factor = cholesky_with_jitter(&sigma, "posterior observation covariance")?;
        let l = factor.l();
        let kstar = kron(&task, &k_oq);
        let a = l
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::NonFinite("posterior triangular solve".into()))?;
        let yb = block_values(values, group);
        let y = DVector::from_iterator(hb * n, yb.transpose().iter().copied());
        let beta = l
            .solve_lower_triangular(&y)
            .ok_or_else(|| Error::NonFinite("posterior triangular solve".into()))?;
        let mean_b = a.tr_mul(&beta);
        let mut cov_b = kron(&task, &k_qq) - a.tr_mul(&a);
        symmetrize(&mut cov_b);

        for (ia, ha) in group.iter().enumerate() {
            for i in 0..m {
                mean[(ha.index(), i)] = mean_b[ia * m + i];
            }
            for (ib, hb2) in group.iter().enumerate() {
                let src = cov_b.view((ia * m, ib * m), (m, m));
                cov.view_mut((ha.index() * m, hb2.index() * m), (m, m))
                    .copy_from(&src);
            }
        }
    }
    if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{individual_id}: posterior")));
    }
    Ok(PosteriorSeries {
        individual_id: individual_id.to_string(),
        days: query_days.to_vec(),
        mean,
        covariance: cov,
        groups: blocks.groups().to_vec(),
    })
}

/// Draws `s` joint sample streams `mean + L eps`, where `L` is the Cholesky
/// factor of each independent block of the covariance (with jitter).
pub fn draw_streams<R: Rng + ?Sized>(
    post: &PosteriorSeries,
    s: usize,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    if s == 0 {
        return Err(Error::invalid("stream count must be at least 1"));
    }
    let m = post.days.len();
    let mut factors = Vec::with_capacity(post.groups.len());
    for g in &post.groups {
        let idx: Vec<usize> = g
            .iter()
            .flat_map(|h| (0..m).map(move |i| h.index() * m + i))
            .collect();
        let sub = post.covariance.select_rows(&idx).select_columns(&idx);
        let l = if sub.iter().all(|&x| x == 0.0) {
            None
        } else {
            Some(cholesky_with_jitter(&sub, "posterior stream covariance")?.l())
        };
        factors.push((g, l));
    }
    let mut out = Vec::with_capacity(s);
    for _ in 0..s {
        let mut z = post.mean.clone();
        for (g, l) in &factors {
            let eps = DVector::from_fn(g.len() * m, |_, _| rng.sample::<f64, _>(StandardNormal));
            if let Some(l) = l {
                let dz = l * eps;
                for (a, h) in g.iter().enumerate() {
                    for i in 0..m {
                        z[(h.index(), i)] += dz[a * m + i];
                    }
                }
            }
        }
        out.push(z);
    }
    Ok(out)
}
