//! Per-individual multi-task Gaussian process.
//!
//! The joint covariance over (hormone, day) pairs is block-diagonal across
//! hormone groups; inside block `b` it is the Kronecker product of a
//! coregionalization matrix `K_b = V_b V_b^T + diag(v_b)` with an exponential
//! periodic kernel over days, plus per-hormone noise on the diagonal.
//!
//! Every vector over (hormone, day) pairs uses hormone-major order: all days
//! of hormone 0, then all days of hormone 1, and so on.

mod fit;
mod io;
mod kernel;
mod likelihood;
mod posterior;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hormone::{HormoneId, NUM_HORMONES};

pub use fit::{fit, FitConfig, FitDiagnostics, FitOutcome, FitStatus};
pub use io::{read_fitted_model, write_fitted_model, write_posterior_csv, FittedModelFile};
pub use kernel::{build_covariance, periodic_kernel, periodic_gram, task_kernel};
pub use likelihood::{log_marginal_likelihood, log_marginal_likelihood_with_gradient, pack_params, unpack_params};
pub use posterior::{draw_streams, posterior, posterior_unsorted, PosteriorSeries};

/// Partition of the hormones into independently modelled groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<HormoneId>>", into = "Vec<Vec<HormoneId>>")]
pub struct BlockStructure {
    groups: Vec<Vec<HormoneId>>,
}

impl BlockStructure {
    pub fn new(groups: Vec<Vec<HormoneId>>) -> Result<Self> {
        let mut seen = [false; NUM_HORMONES];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::invalid("empty hormone block"));
            }
            for h in g {
                if std::mem::replace(&mut seen[h.index()], true) {
                    return Err(Error::invalid(format!("{h} appears in more than one block")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!(
                "{} is not assigned to any block",
                HormoneId::ALL[i]
            )));
        }
        Ok(BlockStructure { groups })
    }

    /// One block with all five hormones.
    pub fn full() -> Self {
        BlockStructure {
            groups: vec![HormoneId::ALL.to_vec()],
        }
    }

    /// `{LH, FSH}` and `{E, P, Ih}`.
    pub fn blockwise() -> Self {
        BlockStructure {
            groups: vec![
                vec![HormoneId::E, HormoneId::P, HormoneId::Ih],
                vec![HormoneId::Fsh, HormoneId::Lh],
            ],
        }
    }

    /// Five singleton blocks, i.e. independent GPs.
    pub fn independent() -> Self {
        BlockStructure {
            groups: HormoneId::ALL.iter().map(|&h| vec![h]).collect(),
        }
    }

    pub fn groups(&self) -> &[Vec<HormoneId>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Block index and position inside that block.
    pub fn locate(&self, h: HormoneId) -> (usize, usize) {
        for (b, g) in self.groups.iter().enumerate() {
            if let Some(p) = g.iter().position(|&x| x == h) {
                return (b, p);
            }
        }
        unreachable!("validated block structure covers every hormone")
    }
}

impl TryFrom<Vec<Vec<HormoneId>>> for BlockStructure {
    type Error = Error;

    fn try_from(groups: Vec<Vec<HormoneId>>) -> Result<Self> {
        BlockStructure::new(groups)
    }
}

impl From<BlockStructure> for Vec<Vec<HormoneId>> {
    fn from(b: BlockStructure) -> Self {
        b.groups
    }
}

/// Named block structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPreset {
    Full,
    Blockwise,
    Independent,
}

impl BlockPreset {
    pub fn structure(self) -> BlockStructure {
        match self {
            BlockPreset::Full => BlockStructure::full(),
            BlockPreset::Blockwise => BlockStructure::blockwise(),
            BlockPreset::Independent => BlockStructure::independent(),
        }
    }
}

impl FromStr for BlockPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BlockPreset::Full),
            "blockwise" => Ok(BlockPreset::Blockwise),
            "independent" => Ok(BlockPreset::Independent),
            _ => Err(Error::invalid(format!(
                "unknown block structure {s:?} (full | blockwise | independent)"
            ))),
        }
    }
}

impl fmt::Display for BlockPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockPreset::Full => "full",
            BlockPreset::Blockwise => "blockwise",
            BlockPreset::Independent => "independent",
        })
    }
}

/// Hyperparameters of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockHyper {
    /// Period `p` of the time kernel, in days.
    pub period: f64,
    pub lengthscale: f64,
    /// Low-rank task factors `V` (`H_b x r`).
    #[serde(with = "crate::linalg::rows")]
    pub task_factors: DMatrix<f64>,
    /// Task diagonal `v` (`H_b`), strictly positive.
    pub task_diag: Vec<f64>,
}

impl BlockHyper {
    pub fn task_matrix(&self) -> DMatrix<f64> {
        task_kernel(&self.task_factors, &DVector::from_column_slice(&self.task_diag))
    }

    pub fn size(&self) -> usize {
        self.task_diag.len()
    }
}

/// Hyperparameters of the whole model: one [`BlockHyper`] per block plus a
/// noise variance per hormone (indexed by [`HormoneId::index`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgpHyperparams {
    pub blocks: Vec<BlockHyper>,
    pub noise: [f64; NUM_HORMONES],
}

/// Default coregionalization rank for a block of `size` hormones.
pub fn default_rank(size: usize) -> usize {
    if size >= 2 {
        2
    } else {
        1
    }
}

impl MgpHyperparams {
    /// Standard starting point: period `period`, lengthscale 1, task factors
    /// drawn from N(0, 0.1^2), task diagonal 0.5, noise 0.1.
    pub fn initial<R: Rng + ?Sized>(blocks: &BlockStructure, period: f64, rng: &mut R) -> Self {
        let hypers = blocks
            .groups()
            .iter()
            .map(|g| {
                let r = default_rank(g.len());
                BlockHyper {
                    period,
                    lengthscale: 1.0,
                    task_factors: DMatrix::from_fn(g.len(), r, |_, _| {
                        0.1 * rng.sample::<f64, _>(StandardNormal)
                    }),
                    task_diag: vec![0.5; g.len()],
                }
            })
            .collect();
        MgpHyperparams {
            blocks: hypers,
            noise: [0.1; NUM_HORMONES],
        }
    }

    /// Checks dimensions against `blocks` and all positivity constraints.
    pub fn validate(&self, blocks: &BlockStructure) -> Result<()> {
        if self.blocks.len() != blocks.len() {
            return Err(Error::invalid(format!(
                "{} block hyperparameter sets for {} blocks",
                self.blocks.len(),
                blocks.len()
            )));
        }
        for (b, (bh, g)) in self.blocks.iter().zip(blocks.groups()).enumerate() {
            let ok = bh.period > 0.0
                && bh.period.is_finite()
                && bh.lengthscale > 0.0
                && bh.lengthscale.is_finite()
                && bh.task_diag.len() == g.len()
                && bh.task_factors.nrows() == g.len()
                && bh.task_diag.iter().all(|&v| v > 0.0 && v.is_finite())
                && bh.task_factors.iter().all(|x| x.is_finite());
            if !ok {
                return Err(Error::invalid(format!("invalid hyperparameters for block {b}")));
            }
        }
        if self.noise.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid("noise variances must be positive"));
        }
        Ok(())
    }
}

/// Simultaneous measurements of all hormones on a set of days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub individual_id: String,
    days: Vec<usize>,
    /// `|days| x NUM_HORMONES`.
    #[serde(with = "crate::linalg::rows")]
    values: DMatrix<f64>,
}

impl ObservationSet {
    /// `days` must be strictly increasing and within `1..=max_day`; `values`
    /// has one row per day and one column per hormone.
    pub fn new(
        individual_id: impl Into<String>,
        days: Vec<usize>,
        values: DMatrix<f64>,
        max_day: usize,
    ) -> Result<Self> {
        let id = individual_id.into();
        if values.nrows() != days.len() || values.ncols() != NUM_HORMONES {
            return Err(Error::invalid(format!(
                "{id}: values are {}x{}, expected {}x{NUM_HORMONES}",
                values.nrows(),
                values.ncols(),
                days.len()
            )));
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("{id}: observation days must be strictly increasing")));
        }
        if days.iter().any(|&d| d < 1 || d > max_day) {
            return Err(Error::invalid(format!("{id}: observation day outside 1..={max_day}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{id}: observation values")));
        }
        Ok(ObservationSet {
            individual_id: id,
            days,
            values,
        })
    }

    /// Picks the given days out of a `NUM_HORMONES x T` series.
    pub fn from_series(
        individual_id: impl Into<String>,
        series: &DMatrix<f64>,
        days: &[usize],
        max_day: usize,
    ) -> Result<Self> {
        if days.iter().any(|&d| d < 1 || d > series.ncols()) {
            return Err(Error::invalid("observation day outside the series"));
        }
        let values = DMatrix::from_fn(days.len(), NUM_HORMONES, |i, h| series[(h, days[i] - 1)]);
        ObservationSet::new(individual_id, days.to_vec(), values, max_day)
    }

    pub fn days(&self) -> &[usize] {
        &self.days
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    /// Observations of the hormones in `group` as an `H_b x n` matrix.
    pub(crate) fn block_values(&self, group: &[HormoneId]) -> DMatrix<f64> {
        block_values(&self.values, group)
    }
}

pub(crate) fn block_values(values: &DMatrix<f64>, group: &[HormoneId]) -> DMatrix<f64> {
    DMatrix::from_fn(group.len(), values.nrows(), |i, t| values[(t, group[i].index())])
}

pub(crate) fn days_as_f64(days: &[usize]) -> Vec<f64> {
    days.iter().map(|&d| d as f64).collect()
}
