//! Experiment orchestration: standardization, splits, per-variant pipelines
//! and MSE tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    default_population_gaussian, generate_cohort, IndividualSeries, PopulationGaussian, WaveformParams,
};
use crate::dcnn::{self, DcnnConfig, DcnnModel, StreamSet};
use crate::error::{Error, Result};
use crate::hormone::{HormoneId, NUM_HORMONES, OBSERVATION_WINDOW, SERIES_DAYS};
use crate::mgp::{self, BlockPreset, FitConfig, MgpHyperparams, ObservationSet, PosteriorSeries};
use crate::rng::{derive_path, rng_from, stream};
use crate::sampling::{self, EdConfig, EdIndividual, NormalizedSchedule, Schedule};

/// Per-hormone standardization fitted on training individuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: [f64; NUM_HORMONES],
    pub std: [f64; NUM_HORMONES],
}

impl Scaler {
    /// Mean and population standard deviation over every day of every
    /// series (`NUM_HORMONES x T` each).
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a DMatrix<f64>>) -> Result<Self> {
        let mut sum = [0.0; NUM_HORMONES];
        let mut sq = [0.0; NUM_HORMONES];
        let mut n = 0usize;
        let all: Vec<&DMatrix<f64>> = series.into_iter().collect();
        for m in &all {
            if m.nrows() != NUM_HORMONES {
                return Err(Error::invalid("scaler input must have one row per hormone"));
            }
            n += m.ncols();
            for h in 0..NUM_HORMONES {
                sum[h] += m.row(h).sum();
            }
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit a scaler on no data"));
        }
        let mean = sum.map(|s| s / n as f64);
        for m in &all {
            for h in 0..NUM_HORMONES {
                sq[h] += m.row(h).iter().map(|x| (x - mean[h]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.map(|s| (s / n as f64).sqrt());
        if let Some(h) = (0..NUM_HORMONES).find(|&h| !(std[h] > 0.0 && std[h].is_finite())) {
            return Err(Error::invalid(format!(
                "hormone {} has zero variance in the training data",
                HormoneId::ALL[h]
            )));
        }
        Ok(Scaler { mean, std })
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |h, t| (m[(h, t)] - self.mean[h]) / self.std[h])
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |h, t| m[(h, t)] * self.std[h] + self.mean[h])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Uniform random partition; 40/10/10 for a cohort of 60, the same
/// proportions (with a warning) otherwise.
pub fn split_cohort(ids: &[String], seed: u64) -> Result<Split> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::invalid(format!("cannot split a cohort of {n}")));
    }
    if n != 60 {
        log::warn!("cohort of {n} individuals; splitting 4:1:1 instead of 40/10/10");
    }
    let held = ((n as f64 / 6.0).round() as usize).max(1);
    let mut order = ids.to_vec();
    order.shuffle(&mut rng_from(derive_path(seed, &[stream::SPLIT])));
    let test = order.split_off(n - held);
    let val = order.split_off(n - 2 * held);
    Ok(Split {
        train: order,
        val,
        test,
        seed,
    })
}

/// Mean squared error over `hormones` x `days` (1-based, inclusive).
pub fn mse(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    days: RangeInclusive<usize>,
    hormones: &[HormoneId],
) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::invalid("prediction and truth shapes differ"));
    }
    let (lo, hi) = (*days.start(), *days.end());
    if hormones.is_empty() || lo < 1 || lo > hi || hi > pred.ncols() {
        return Err(Error::invalid("empty MSE selection"));
    }
    let mut s = 0.0;
    for h in hormones {
        for t in lo..=hi {
            s += (pred[(h.index(), t - 1)] - truth[(h.index(), t - 1)]).powi(2);
        }
    }
    Ok(s / (hormones.len() * (hi - lo + 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Overall,
    Reconstruction,
    Prediction,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Overall, Scope::Reconstruction, Scope::Prediction];

    pub fn days(self) -> RangeInclusive<usize> {
        match self {
            Scope::Overall => 1..=SERIES_DAYS,
            Scope::Reconstruction => 1..=OBSERVATION_WINDOW,
            Scope::Prediction => OBSERVATION_WINDOW + 1..=SERIES_DAYS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Overall => "overall",
            Scope::Reconstruction => "reconstruction",
            Scope::Prediction => "prediction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Random,
    Ed,
}

/// Table rows, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Lstm,
    IndependentGp,
    Mgp,
    BMgp,
    BMgpEd,
    BMgpDcnn,
    BMgpDcnnEd,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Lstm,
        Variant::IndependentGp,
        Variant::Mgp,
        Variant::BMgp,
        Variant::BMgpEd,
        Variant::BMgpDcnn,
        Variant::BMgpDcnnEd,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Lstm => "LSTM",
            Variant::IndependentGp => "Independent GPs",
            Variant::Mgp => "MGP",
            Variant::BMgp => "B-MGP",
            Variant::BMgpEd => "B-MGP (ED)",
            Variant::BMgpDcnn => "B-MGP-DCNN",
            Variant::BMgpDcnnEd => "B-MGP-DCNN (ED)",
        }
    }

    pub fn blocks(self) -> BlockPreset {
        match self {
            Variant::IndependentGp => BlockPreset::Independent,
            Variant::Mgp => BlockPreset::Full,
            _ => BlockPreset::Blockwise,
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            Variant::BMgpEd | Variant::BMgpDcnnEd => Scheme::Ed,
            _ => Scheme::Random,
        }
    }

    pub fn uses_dcnn(self) -> bool {
        matches!(self, Variant::BMgpDcnn | Variant::BMgpDcnnEd)
    }

    /// The recurrent baseline is listed but not implemented.
    pub fn is_implemented(self) -> bool {
        self != Variant::Lstm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| {
                let k: String = v.label().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
                k.to_ascii_lowercase() == key || (key == "independentgp" && *v == Variant::IndependentGp)
            })
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub cohort_size: usize,
    pub cohort_seed: u64,
    pub population: PopulationGaussian,
    pub waveform: WaveformParams,
    /// Each split seed is a full repetition; table cells average over them.
    pub split_seeds: Vec<u64>,
    pub budgets: Vec<usize>,
    pub variants: Vec<Variant>,
    /// Explicit cells to run instead of the full `variants x budgets` grid.
    pub cells: Option<Vec<Cell>>,
    /// Seeds schedules, MGP restarts, ED refits and posterior draws.
    pub seed: u64,
    /// Posterior streams per individual.
    pub streams: usize,
    pub mgp: FitConfig,
    /// Fit settings for the refits inside greedy ED selection.
    pub ed_fit: FitConfig,
    pub dcnn: DcnnConfig,
    /// Directory for curves and tables; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            cohort_size: 60,
            cohort_seed: 7,
            population: default_population_gaussian(),
            waveform: WaveformParams::default(),
            split_seeds: vec![1, 2, 3],
            budgets: vec![10, 15, 25, 35, 70],
            variants: Variant::ALL.to_vec(),
            cells: None,
            seed: 11,
            streams: 100,
            mgp: FitConfig::default(),
            ed_fit: FitConfig::default(),
            // Plain SGD at the default step stalls within the early-stopping
            // patience on this task; experiments train with Adam.
            dcnn: DcnnConfig {
                optimizer: crate::dcnn::Optimizer::Adam,
                ..DcnnConfig::default()
            },
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Small end-to-end run: 12 individuals, budgets 10 and 35, B-MGP and
    /// B-MGP-DCNN.
    pub fn smoke() -> Self {
        ExperimentConfig {
            cohort_size: 12,
            split_seeds: vec![1],
            budgets: vec![10, 35],
            variants: vec![Variant::BMgp, Variant::BMgpDcnn],
            streams: 20,
            dcnn: DcnnConfig {
                max_iterations: 300,
                optimizer: crate::dcnn::Optimizer::Adam,
                ..DcnnConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    /// Cells to compute, in table order; the placeholder row is skipped.
    pub fn planned_cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = match &self.cells {
            Some(c) => c.clone(),
            None => self
                .variants
                .iter()
                .flat_map(|&v| self.budgets.iter().map(move |&b| Cell { variant: v, budget: b }))
                .collect(),
        };
        cells.retain(|c| c.variant.is_implemented());
        cells.sort_by_key(|c| (c.variant, c.budget));
        cells.dedup();
        cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.cohort_size < 3 {
            return Err(Error::invalid("cohort_size must be at least 3"));
        }
        if self.split_seeds.is_empty() {
            return Err(Error::invalid("at least one split seed is required"));
        }
        if self.streams == 0 {
            return Err(Error::invalid("streams must be at least 1"));
        }
        let cells = self.planned_cells();
        if cells.is_empty() {
            return Err(Error::invalid("experiment has no cells to run"));
        }
        for c in &cells {
            if c.budget < sampling::SEED_PEAKS || c.budget > OBSERVATION_WINDOW {
                return Err(Error::invalid(format!(
                    "budget {} outside {}..={OBSERVATION_WINDOW}",
                    c.budget,
                    sampling::SEED_PEAKS
                )));
            }
        }
        if cells.iter().any(|c| c.variant.uses_dcnn()) {
            self.dcnn.validate()?;
        }
        self.waveform.validate()?;
        self.population.cholesky()?;
        Ok(())
    }

    pub fn generate_cohort(&self) -> Result<Vec<IndividualSeries>> {
        generate_cohort(self.cohort_size, &self.population, &self.waveform, self.cohort_seed)
    }
}

pub fn read_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Test-set MSE of one cell for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub budget: usize,
    pub split_seed: u64,
    pub overall: f64,
    pub reconstruction: f64,
    pub prediction: f64,
    /// Overall-scope MSE per hormone, in hormone index order.
    pub per_hormone: [f64; NUM_HORMONES],
}

impl CellResult {
    pub fn scope(&self, s: Scope) -> f64 {
        match s {
            Scope::Overall => self.overall,
            Scope::Reconstruction => self.reconstruction,
            Scope::Prediction => self.prediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
}

impl ExperimentResults {
    /// Mean over split seeds of `f` for the given cell.
    pub fn mean_of(&self, variant: Variant, budget: usize, f: impl Fn(&CellResult) -> f64) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.budget == budget)
            .map(f)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn overall(&self, variant: Variant, budget: usize) -> Option<f64> {
        self.mean_of(variant, budget, |c| c.overall)
    }
}

pub fn write_results(path: &Path, results: &ExperimentResults) -> Result<()> {
    write_json(path, results)
}

pub fn read_results(path: &Path) -> Result<ExperimentResults> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Which individuals fed each fitted stage of a split.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: BTreeMap<String, Vec<String>>,
}

impl Provenance {
    pub fn record(&mut self, stage: impl Into<String>, ids: &[String]) {
        self.stages.entry(stage.into()).or_default().extend_from_slice(ids);
    }

    /// Fails if any test individual contributed to a population-level stage.
    pub fn check(&self, test: &[String]) -> Result<()> {
        for (stage, ids) in &self.stages {
            if let Some(id) = ids.iter().find(|id| test.contains(id)) {
                return Err(Error::Provenance(format!("test individual {id} used by {stage}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct StageKey {
    blocks: BlockPreset,
    scheme: Scheme,
    budget: usize,
}

/// Schedules and posteriors of one `(blocks, scheme, budget)` combination.
struct MgpStage {
    posteriors: Vec<Option<PosteriorSeries>>,
    template: Option<NormalizedSchedule>,
}

struct SplitContext<'a> {
    cfg: &'a ExperimentConfig,
    cohort: &'a [IndividualSeries],
    /// Standardized truth, aligned with `cohort`.
    truth: Vec<DMatrix<f64>>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    split: Split,
}

impl SplitContext<'_> {
    fn ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.cohort[i].id.clone()).collect()
    }

    fn schedule(&self, key: StageKey, i: usize, template: Option<&NormalizedSchedule>) -> Result<Schedule> {
        match key.scheme {
            Scheme::Random => {
                let path = [
                    stream::SCHEDULE,
                    self.split.seed,
                    key.budget as u64,
                    i as u64,
                ];
                let mut rng = rng_from(derive_path(self.cfg.seed, &path));
                sampling::random_schedule(
                    key.budget,
                    1..=OBSERVATION_WINDOW,
                    self.cohort[i].seed_peaks()?,
                    &mut rng,
                )
            }
            Scheme::Ed => sampling::materialize(template.expect("ED template computed"), &self.cohort[i]),
        }
    }

    fn fit_individual(&self, key: StageKey, i: usize, days: &[usize]) -> Result<PosteriorSeries> {
        let ind = &self.cohort[i];
        let blocks = key.blocks.structure();
        let obs = ObservationSet::from_series(&ind.id, &self.truth[i], days, OBSERVATION_WINDOW)?;
        let labels = [
            stream::MGP_INIT,
            self.split.seed,
            key.budget as u64,
            key.scheme as u64,
            key.blocks as u64,
            i as u64,
        ];
        let seed = derive_path(self.cfg.seed, &labels);
        let init = MgpHyperparams::initial(&blocks, ind.cycle_length_days as f64, &mut rng_from(seed));
        let fit_cfg = FitConfig {
            seed,
            ..self.cfg.mgp.clone()
        };
        let fitted = mgp::fit(&obs, &blocks, &init, &fit_cfg)
            .map_err(|e| e.in_stage("mgp fit"))?;
        let query: Vec<usize> = (1..=SERIES_DAYS).collect();
        mgp::posterior(&fitted.hyper, &blocks, &obs, &query).map_err(|e| e.in_stage("mgp posterior"))
    }

    fn mgp_stage(&self, key: StageKey, who: &[usize], prov: &mut Provenance) -> Result<MgpStage> {
        let template = match key.scheme {
            Scheme::Random => None,
            Scheme::Ed => {
                let members: Vec<EdIndividual> = self
                    .train
                    .iter()
                    .map(|&i| EdIndividual::from_series(&self.cohort[i], self.truth[i].clone()))
                    .collect::<Result<_>>()?;
                let ed_cfg = EdConfig {
                    blocks: key.blocks.structure(),
                    fit: self.cfg.ed_fit.clone(),
                    seed: derive_path(self.cfg.seed, &[stream::ED, self.split.seed, key.budget as u64]),
                };
                prov.record(format!("ed template (budget {})", key.budget), &self.ids(&self.train));
                Some(sampling::ed_greedy(&members, key.budget, &ed_cfg).map_err(|e| e.in_stage("ed"))?)
            }
        };
        let fitted: Vec<(usize, PosteriorSeries)> = who
            .par_iter()
            .map(|&i| {
                let s = self.schedule(key, i, template.as_ref())?;
                Ok((i, self.fit_individual(key, i, s.days())?))
            })
            .collect::<Result<_>>()?;
        let mut posteriors = vec![None; self.cohort.len()];
        for (i, p) in fitted {
            posteriors[i] = Some(p);
        }
        Ok(MgpStage { posteriors, template })
    }

    fn streams(&self, key: StageKey, stage: &MgpStage, i: usize, count: usize) -> Result<StreamSet> {
        let post = stage.posteriors[i]
            .as_ref()
            .expect("posterior computed for every DCNN individual");
        let labels = [
            stream::POSTERIOR_DRAW,
            self.split.seed,
            key.budget as u64,
            key.scheme as u64,
            i as u64,
        ];
        let mut rng = rng_from(derive_path(self.cfg.seed, &labels));
        Ok(StreamSet {
            id: self.cohort[i].id.clone(),
            streams: mgp::draw_streams(post, count, &mut rng)?,
            target: self.truth[i].clone(),
        })
    }

    fn train_dcnn(&self, key: StageKey, stage: &MgpStage, prov: &mut Provenance) -> Result<DcnnModel> {
        let s = self.cfg.streams;
        let data: Vec<StreamSet> = self
            .train
            .par_iter()
            .map(|&i| self.streams(key, stage, i, s))
            .collect::<Result<_>>()?;
        let val: Vec<StreamSet> = self
            .val
            .par_iter()
            .map(|&i| self.streams(key, stage, i, self.cfg.dcnn.val_streams))
            .collect::<Result<_>>()?;
        prov.record(format!("dcnn train (budget {})", key.budget), &self.ids(&self.train));
        prov.record(format!("dcnn validation (budget {})", key.budget), &self.ids(&self.val));
        let config = DcnnConfig {
            seed: derive_path(
                self.cfg.dcnn.seed,
                &[self.split.seed, key.budget as u64, key.scheme as u64],
            ),
            ..self.cfg.dcnn.clone()
        };
        let model = DcnnModel::init(config)?;
        let out = dcnn::train(model, &data, &val).map_err(|e| e.in_stage("dcnn training"))?;
        log::info!(
            "split {} budget {} {:?}: DCNN best iteration {} of {}",
            self.split.seed,
            key.budget,
            key.scheme,
            out.best_iteration,
            out.iterations
        );
        if let Some(dir) = &self.cfg.output_dir {
            let name = format!("loss_{}_{:?}_{}.csv", key.budget, key.scheme, self.split.seed).to_lowercase();
            dcnn::write_loss_history(&dir.join("curves").join(name), &out.history)?;
        }
        Ok(out.model)
    }
}

/// One row of the per-individual reconstruction export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub individual_id: String,
    pub day: usize,
    pub hormone: HormoneId,
    pub truth: f64,
    pub mgp_mean: f64,
    pub mgp_var: f64,
    pub dcnn_pred: Option<f64>,
}

fn score(cell: Cell, split_seed: u64, preds: &[(DMatrix<f64>, &DMatrix<f64>)]) -> Result<CellResult> {
    let n = preds.len() as f64;
    let mut scope = [0.0; 3];
    let mut per_hormone = [0.0; NUM_HORMONES];
    for (pred, truth) in preds {
        for (k, s) in Scope::ALL.iter().enumerate() {
            scope[k] += mse(pred, truth, s.days(), &HormoneId::ALL)? / n;
        }
        for h in HormoneId::ALL {
            per_hormone[h.index()] += mse(pred, truth, Scope::Overall.days(), &[h])? / n;
        }
    }
    Ok(CellResult {
        variant: cell.variant,
        budget: cell.budget,
        split_seed,
        overall: scope[0],
        reconstruction: scope[1],
        prediction: scope[2],
        per_hormone,
    })
}

fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run_split(
    cfg: &ExperimentConfig,
    cohort: &[IndividualSeries],
    split_seed: u64,
) -> Result<(Vec<CellResult>, Provenance)> {
    let ids: Vec<String> = cohort.iter().map(|s| s.id.clone()).collect();
    let split = split_cohort(&ids, split_seed)?;
    let index = |list: &[String]| -> Vec<usize> {
        list.iter()
            .map(|id| ids.iter().position(|x| x == id).expect("split ids come from the cohort"))
            .collect()
    };
    let (train, val, test) = (index(&split.train), index(&split.val), index(&split.test));
    let mut prov = Provenance::default();
    let scaler = Scaler::fit(train.iter().map(|&i| &cohort[i].values)).map_err(|e| e.in_stage("scaler"))?;
    prov.record("scaler", &split.train);
    let truth = cohort.iter().map(|s| scaler.apply(&s.values)).collect();
    let ctx = SplitContext {
        cfg,
        cohort,
        truth,
        train,
        val,
        test,
        split,
    };

    let cells = cfg.planned_cells();
    let mut by_stage: BTreeMap<StageKey, Vec<Cell>> = BTreeMap::new();
    for c in &cells {
        let key = StageKey {
            blocks: c.variant.blocks(),
            scheme: c.variant.scheme(),
            budget: c.budget,
        };
        by_stage.entry(key).or_default().push(*c);
    }

    let mut results = Vec::new();
    for (key, stage_cells) in by_stage {
        let needs_dcnn = stage_cells.iter().any(|c| c.variant.uses_dcnn());
        let who: Vec<usize> = if needs_dcnn {
            ctx.train.iter().chain(&ctx.val).chain(&ctx.test).copied().collect()
        } else {
            ctx.test.clone()
        };
        let stage = ctx.mgp_stage(key, &who, &mut prov)?;
        if let (Some(t), Some(dir)) = (&stage.template, &cfg.output_dir) {
            let name = format!("ed_template_{}_{}.json", key.budget, split_seed);
            write_json(&dir.join("curves").join(name), t)?;
        }
        let model = if needs_dcnn {
            Some(ctx.train_dcnn(key, &stage, &mut prov)?)
        } else {
            None
        };
        for cell in stage_cells {
            let preds: Vec<DMatrix<f64>> = if cell.variant.uses_dcnn() {
                let model = model.as_ref().expect("model trained for DCNN cells");
                ctx.test
                    .par_iter()
                    .map(|&i| {
                        let s = ctx.streams(key, &stage, i, cfg.streams)?;
                        dcnn::predict(model, &s.streams)
                    })
                    .collect::<Result<_>>()?
            } else {
                ctx.test
                    .iter()
                    .map(|&i| stage.posteriors[i].as_ref().expect("test posterior").mean.clone())
                    .collect()
            };
            let pairs: Vec<(DMatrix<f64>, &DMatrix<f64>)> = preds
                .iter()
                .cloned()
                .zip(ctx.test.iter().map(|&i| &ctx.truth[i]))
                .collect();
            let r = score(cell, split_seed, &pairs)?;
            log::info!(
                "split {split_seed} {} budget {}: overall {:.4}",
                cell.variant,
                cell.budget,
                r.overall
            );
            results.push(r);
            if let Some(dir) = &cfg.output_dir {
                let mut rows = Vec::new();
                for (k, &i) in ctx.test.iter().enumerate() {
                    let post = stage.posteriors[i].as_ref().expect("test posterior");
                    for h in HormoneId::ALL {
                        for day in 1..=SERIES_DAYS {
                            rows.push(CurveRow {
                                individual_id: cohort[i].id.clone(),
                                day,
                                hormone: h,
                                truth: ctx.truth[i][(h.index(), day - 1)],
                                mgp_mean: post.mean[(h.index(), day - 1)],
                                mgp_var: post.variance(h, day - 1),
                                dcnn_pred: cell.variant.uses_dcnn().then(|| preds[k][(h.index(), day - 1)]),
                            });
                        }
                    }
                }
                let name = format!(
                    "curves_{}_{}_{}.csv",
                    file_stem(cell.variant),
                    cell.budget,
                    split_seed
                );
                write_curves(&dir.join("curves").join(name), &rows)?;
            }
        }
    }
    prov.check(&ctx.split.test)?;
    Ok((results, prov))
}

fn file_stem(v: Variant) -> String {
    v.label()
        .chars()
        .filter_map(|c| match c {
            'A'..='Z' | 'a'..='z' | '0'..='9' => Some(c.to_ascii_lowercase()),
            ' ' | '-' => Some('_'),
            _ => None,
        })
        .collect::<String>()
        .replace("__", "_")
}

/// Runs every planned cell for every split seed on `cohort`.
pub fn run_experiment(cfg: &ExperimentConfig, cohort: &[IndividualSeries]) -> Result<ExperimentResults> {
    cfg.validate()?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir.join("curves")).map_err(|e| Error::io(dir, e))?;
    }
    let mut cells = Vec::new();
    for &seed in &cfg.split_seeds {
        let (r, _) = run_split(cfg, cohort, seed)?;
        cells.extend(r);
    }
    let results = ExperimentResults {
        config: cfg.clone(),
        cells,
    };
    if let Some(dir) = &cfg.output_dir {
        write_results(&dir.join("results.json"), &results)?;
        emit_tables(&results, dir)?;
    }
    Ok(results)
}

/// A table in the layout of the published ones: one row per variant, one
/// column per budget; cells averaged over split seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub scope: Scope,
    pub hormone: Option<HormoneId>,
    pub budgets: Vec<usize>,
    pub rows: Vec<(Variant, Vec<Option<f64>>)>,
}

/// Cell marker for variants that are listed but not implemented.
pub const NOT_IMPLEMENTED: &str = "not implemented";
/// Cell marker for implemented variants that were not run.
pub const MISSING: &str = "missing";

impl ResultTable {
    pub fn build(results: &ExperimentResults, scope: Scope, hormone: Option<HormoneId>) -> Self {
        let mut budgets: Vec<usize> = results.cells.iter().map(|c| c.budget).collect();
        budgets.extend(&results.config.budgets);
        budgets.sort_unstable();
        budgets.dedup();
        let rows = Variant::ALL
            .iter()
            .map(|&v| {
                let vals = budgets
                    .iter()
                    .map(|&b| match hormone {
                        Some(h) => results.mean_of(v, b, |c| c.per_hormone[h.index()]),
                        None => results.mean_of(v, b, |c| c.scope(scope)),
                    })
                    .collect();
                (v, vals)
            })
            .collect();
        ResultTable {
            scope,
            hormone,
            budgets,
            rows,
        }
    }

    pub fn file_name(&self) -> String {
        match self.hormone {
            Some(h) => format!("table_{}_{}.csv", self.scope.name(), h.name()),
            None => format!("table_{}.csv", self.scope.name()),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model".to_string()];
        header.extend(self.budgets.iter().map(|b| b.to_string()));
        w.write_record(&header)?;
        for (v, vals) in &self.rows {
            let mut rec = vec![v.label().to_string()];
            rec.extend(vals.iter().map(|x| match x {
                Some(x) => x.to_string(),
                None if !v.is_implemented() => NOT_IMPLEMENTED.to_string(),
                None => MISSING.to_string(),
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses a file written by [`ResultTable::write_csv`].
    pub fn read_csv(path: &Path, scope: Scope, hormone: Option<HormoneId>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let budgets = r
            .headers()?
            .iter()
            .skip(1)
            .map(|b| b.parse().map_err(|_| Error::invalid(format!("bad budget column {b:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v: Variant = rec.get(0).unwrap_or_default().parse()?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|x| x.parse::<f64>().ok())
                .collect();
            rows.push((v, vals));
        }
        Ok(ResultTable {
            scope,
            hormone,
            budgets,
            rows,
        })
    }
}

/// Writes the three all-hormone tables and the five per-hormone overall
/// tables into `dir`.
pub fn emit_tables(results: &ExperimentResults, dir: &Path) -> Result<Vec<PathBuf>> {
    if results.cells.is_empty() {
        return Err(Error::invalid("no completed cells to tabulate"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tables: Vec<ResultTable> = Scope::ALL
        .iter()
        .map(|&s| ResultTable::build(results, s, None))
        .collect();
    tables.extend(
        HormoneId::ALL
            .iter()
            .map(|&h| ResultTable::build(results, Scope::Overall, Some(h))),
    );
    let mut paths = Vec::new();
    for t in tables {
        let p = dir.join(t.file_name());
        t.write_csv(&p)?;
        paths.push(p);
    }
    Ok(paths)
}
