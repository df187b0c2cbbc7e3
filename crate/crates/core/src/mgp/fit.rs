//! Type-II maximum likelihood fitting of the hyperparameters.
//!
//! The objective separates over blocks, so each block is optimized on its
//! own with Adam on the packed (log-transformed) parameters. Each restart
//! keeps the best iterate it visits; the best restart wins.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::likelihood::{block_noise, block_objective, pack_block, unpack_block};
use super::{days_as_f64, BlockStructure, MgpHyperparams, ObservationSet};
use crate::error::{Error, Result};
use crate::rng::{derive_path, rng_from};

/// Box constraints applied after every step, on the natural scale.
const PERIOD_BOUNDS: (f64, f64) = (2.0, 200.0);
const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-2, 1e2);
const VARIANCE_BOUNDS: (f64, f64) = (1e-6, 1e3);
const FACTOR_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub restarts: usize,
    /// Multiplier on the learning rate for `ln p`. The likelihood is much
    /// sharper in the period than in the other parameters.
    pub period_step_scale: f64,
    /// Stop a restart once its best value improved by less than this over
    /// the last `patience` iterations. Zero disables early stopping.
    pub tolerance: f64,
    pub patience: usize,
    /// Fits with fewer observed days return the initial values unchanged.
    pub min_observations: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 500,
            learning_rate: 0.05,
            restarts: 3,
            period_step_scale: 0.1,
            tolerance: 1e-6,
            patience: 50,
            min_observations: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Optimized,
    /// Too few observed days; the initial values were returned.
    TooFewObservations,
    /// Zero iterations requested; the initial values were returned.
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub status: FitStatus,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub restarts: usize,
    /// Total optimizer iterations over all blocks and restarts.
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub hyper: MgpHyperparams,
    pub diagnostics: FitDiagnostics,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step: `x += lr * mhat / (sqrt(vhat) + eps)`.
    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            x[i] += lr[i] * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Layout helpers for one block's packed vector.
struct BlockLayout {
    size: usize,
    rank: usize,
}

impl BlockLayout {
    fn len(&self) -> usize {
        2 + self.size * self.rank + 2 * self.size
    }

    fn factors(&self) -> std::ops::Range<usize> {
        2..2 + self.size * self.rank
    }

    fn clamp(&self, x: &mut [f64]) {
        x[0] = x[0].clamp(PERIOD_BOUNDS.0.ln(), PERIOD_BOUNDS.1.ln());
        x[1] = x[1].clamp(LENGTHSCALE_BOUNDS.0.ln(), LENGTHSCALE_BOUNDS.1.ln());
        let f = self.factors();
        for v in &mut x[f.clone()] {
            *v = v.clamp(-FACTOR_BOUND, FACTOR_BOUND);
        }
        for v in &mut x[f.end..] {
            *v = v.clamp(VARIANCE_BOUNDS.0.ln(), VARIANCE_BOUNDS.1.ln());
        }
    }

    fn learning_rates(&self, cfg: &FitConfig) -> Vec<f64> {
        let mut lr = vec![cfg.learning_rate; self.len()];
        lr[0] *= cfg.period_step_scale;
        lr
    }

    /// Fresh task factors from N(0, 0.1^2) and log-normal perturbations of
    /// the lengthscale and variances; the period is kept.
    fn perturb<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = x.to_vec();
        let mut z = || rng.sample::<f64, _>(StandardNormal);
        out[1] += 0.5 * z();
        let f = self.factors();
        for v in &mut out[f.clone()] {
            *v = 0.1 * z();
        }
        for v in &mut out[f.end..] {
            *v += 0.5 * z();
        }
        self.clamp(&mut out);
        out
    }
}

struct BlockResult {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
}

fn optimize_block(
    layout: &BlockLayout,
    start: Vec<f64>,
    objective: &dyn Fn(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
    cfg: &FitConfig,
) -> Option<BlockResult> {
    let lr = layout.learning_rates(cfg);
    let mut adam = Adam::new(start.len());
    let mut x = start;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.iterations {
        let (f, g) = match objective(&x, true) {
            Ok((f, Some(g))) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
            _ => break,
        };
        if best.as_ref().is_none_or(|(_, b)| f > *b) {
            best = Some((x.clone(), f));
        }
        let best_f = best.as_ref().map(|b| b.1).unwrap_or(f);
        history.push(best_f);
        if cfg.tolerance > 0.0 && history.len() > cfg.patience {
            let old = history[history.len() - 1 - cfg.patience];
            if best_f - old < cfg.tolerance {
                break;
            }
        }
        adam.step(&mut x, &g, &lr);
        layout.clamp(&mut x);
        iterations += 1;
    }
    if let Ok((f, _)) = objective(&x, false) {
        if f.is_finite() && best.as_ref().is_none_or(|(_, b)| f > *b) {
            best = Some((x, f));
        }
    }
    best.map(|(x, value)| BlockResult {
        x,
        value,
        iterations,
    })
}

/// Fits the hyperparameters by maximizing the log marginal likelihood,
/// starting from `init`. The returned likelihood is never below the
/// likelihood at `init`.
pub fn fit(
    obs: &ObservationSet,
    blocks: &BlockStructure,
    init: &MgpHyperparams,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    init.validate(blocks)?;
    if obs.is_empty() {
        return Err(Error::invalid(format!("{}: no observations", obs.individual_id)));
    }
    let t = days_as_f64(obs.days());
    let initial = super::log_marginal_likelihood(init, blocks, obs)?;
    let unchanged = |status| FitOutcome {
        hyper: init.clone(),
        diagnostics: FitDiagnostics {
            status,
            log_likelihood: initial,
            initial_log_likelihood: initial,
            restarts: 0,
            iterations: 0,
        },
    };
    if obs.len() < cfg.min_observations {
        log::warn!(
            "{}: {} observed days < {}; keeping initial hyperparameters",
            obs.individual_id,
            obs.len(),
            cfg.min_observations
        );
        return Ok(unchanged(FitStatus::TooFewObservations));
    }
    if cfg.iterations == 0 {
        return Ok(unchanged(FitStatus::NotRun));
    }

    let mut hyper = init.clone();
    let mut total = 0.0;
    let mut iterations = 0;
    let restarts = cfg.restarts.max(1);
    for (b, group) in blocks.groups().iter().enumerate() {
        let bh0 = &init.blocks[b];
        let layout = BlockLayout {
            size: group.len(),
            rank: bh0.task_factors.ncols(),
        };
        let y = obs.block_values(group);
        let objective = |x: &[f64], grad: bool| {
            let (bh, noise) = unpack_block(x, layout.size, layout.rank);
            block_objective(&bh, &noise, &t, &y, grad)
        };
        let x0 = pack_block(bh0, &block_noise(init, group));
        let mut best: Option<BlockResult> = None;
        for r in 0..restarts {
            let start = if r == 0 {
                x0.clone()
            } else {
                let mut rng = rng_from(derive_path(cfg.seed, &[b as u64, r as u64]));
                layout.perturb(&x0, &mut rng)
            };
            if let Some(res) = optimize_block(&layout, start, &objective, cfg) {
                iterations += res.iterations;
                if best.as_ref().is_none_or(|b| res.value > b.value) {
                    best = Some(res);
                }
            }
        }
        let best = best.ok_or(Error::FitDiverged {
            restarts,
            best_log_likelihood: None,
        })?;
        let (bh, noise) = unpack_block(&best.x, layout.size, layout.rank);
        hyper.blocks[b] = bh;
        for (h, d) in group.iter().zip(noise) {
            hyper.noise[h.index()] = d;
        }
        total += best.value;
    }
    Ok(FitOutcome {
        hyper,
        diagnostics: FitDiagnostics {
            status: FitStatus::Optimized,
            log_likelihood: total,
            initial_log_likelihood: initial,
            restarts,
            iterations,
        },
    })
}
