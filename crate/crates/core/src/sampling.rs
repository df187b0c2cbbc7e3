//! Choosing measurement days.
//!
//! Every schedule starts from the two LH-peak days of the individual. Random
//! schedules add uniformly drawn days; Expected Distance (ED) schedules are
//! built greedily on a normalized cycle clock where position `x` maps to
//! day `round(x * L)` for an individual with cycle length `L`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::datagen::IndividualSeries;
use crate::error::{Error, Result};
use crate::hormone::{HormoneId, OBSERVATION_WINDOW};
use crate::mgp::{self, BlockStructure, FitConfig, MgpHyperparams, ObservationSet, PosteriorSeries};
use crate::rng::{derive_path, rng_from, stream};

/// Seeded LH peaks included in every schedule.
pub const SEED_PEAKS: usize = 2;

/// Candidate positions per cycle-length unit on the normalized clock.
pub const GRID_RESOLUTION: usize = 70;

/// Number of cycles spanned by the candidate grid.
pub const GRID_CYCLES: usize = 2;

/// `E|y - z|` for `z ~ N(mu, sigma^2)`:
/// `(y - mu) [2 Phi(r / sigma) - 1] + 2 sigma phi(r / sigma)`, and `|y - mu|`
/// when `sigma == 0`.
pub fn expected_distance(y: f64, mu: f64, sigma: f64) -> f64 {
    let r = y - mu;
    if sigma <= 0.0 {
        return r.abs();
    }
    let z = r / sigma;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (r * erf(z / std::f64::consts::SQRT_2) + 2.0 * sigma * pdf).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleOrigin {
    Random,
    Ed,
    SeedPeaks,
}

/// Sorted, unique measurement days for one individual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    days: Vec<usize>,
    origin: ScheduleOrigin,
}

impl Schedule {
    /// Validates the schedule invariants: days unique and within `window`,
    /// both seeds present.
    pub fn new(
        mut days: Vec<usize>,
        origin: ScheduleOrigin,
        seeds: [usize; 2],
        window: &RangeInclusive<usize>,
    ) -> Result<Self> {
        days.sort_unstable();
        if days.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("schedule days must be unique"));
        }
        if days.iter().any(|d| !window.contains(d)) {
            return Err(Error::invalid("schedule day outside the observation window"));
        }
        if seeds.iter().any(|s| days.binary_search(s).is_err()) {
            return Err(Error::invalid("schedule must contain both LH-peak days"));
        }
        Ok(Schedule { days, origin })
    }

    pub fn days(&self) -> &[usize] {
        &self.days
    }

    pub fn budget(&self) -> usize {
        self.days.len()
    }

    pub fn origin(&self) -> ScheduleOrigin {
        self.origin
    }
}

fn check_window(window: &RangeInclusive<usize>) -> Result<()> {
    if *window.start() < 1 || window.start() > window.end() {
        return Err(Error::invalid(format!(
            "invalid window {}..={}",
            window.start(),
            window.end()
        )));
    }
    Ok(())
}

fn window_len(window: &RangeInclusive<usize>) -> usize {
    window.end() - window.start() + 1
}

/// The two peaks plus `budget - 2` days drawn uniformly without replacement
/// from the rest of the window.
pub fn random_schedule<R: Rng + ?Sized>(
    budget: usize,
    window: RangeInclusive<usize>,
    lh_peaks: [usize; 2],
    rng: &mut R,
) -> Result<Schedule> {
    check_window(&window)?;
    if budget < SEED_PEAKS {
        return Err(Error::invalid(format!("budget {budget} below the {SEED_PEAKS} seeded peaks")));
    }
    if budget > window_len(&window) {
        return Err(Error::invalid(format!(
            "budget {budget} exceeds the {}-day window",
            window_len(&window)
        )));
    }
    if lh_peaks[0] == lh_peaks[1] || lh_peaks.iter().any(|d| !window.contains(d)) {
        return Err(Error::invalid("LH peaks must be two distinct days inside the window"));
    }
    let rest: Vec<usize> = window.clone().filter(|d| !lh_peaks.contains(d)).collect();
    let mut days: Vec<usize> = rand::seq::index::sample(rng, rest.len(), budget - SEED_PEAKS)
        .into_iter()
        .map(|i| rest[i])
        .collect();
    days.extend(lh_peaks);
    let origin = if budget == SEED_PEAKS {
        ScheduleOrigin::SeedPeaks
    } else {
        ScheduleOrigin::Random
    };
    Schedule::new(days, origin, lh_peaks, &window)
}

/// A position on the normalized clock: `cycle + phase`, `phase` in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclePoint {
    pub cycle: usize,
    pub phase: f64,
}

impl CyclePoint {
    pub fn position(&self) -> f64 {
        self.cycle as f64 + self.phase
    }

    /// Day `round(position * L)`; may fall outside any window.
    pub fn day(&self, cycle_length: usize) -> i64 {
        (self.position() * cycle_length as f64).round() as i64
    }
}

/// Grid position `k / GRID_RESOLUTION`, `k = 1..=GRID_RESOLUTION * GRID_CYCLES`.
pub fn candidate_grid() -> Vec<CyclePoint> {
    (1..=GRID_RESOLUTION * GRID_CYCLES)
        .map(|k| CyclePoint {
            cycle: k / GRID_RESOLUTION,
            phase: (k % GRID_RESOLUTION) as f64 / GRID_RESOLUTION as f64,
        })
        .collect()
}

/// Cohort-level phase template. The two seeded LH peaks are individual
/// specific and not stored as points, but count toward the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSchedule {
    /// Sorted by position.
    pub points: Vec<CyclePoint>,
    pub lh_peak_seeds: usize,
}

impl NormalizedSchedule {
    pub fn seeds_only() -> Self {
        NormalizedSchedule {
            points: Vec::new(),
            lh_peak_seeds: SEED_PEAKS,
        }
    }

    pub fn budget(&self) -> usize {
        self.points.len() + self.lh_peak_seeds
    }

    fn insert(&mut self, p: CyclePoint) {
        let at = self
            .points
            .partition_point(|q| q.position() < p.position());
        self.points.insert(at, p);
    }
}

/// Maps a template onto one individual: the seeds first, then every point in
/// position order to `round(x * L)` clamped to the window; a taken day moves
/// to the nearest free day, the earlier one on ties.
pub fn materialize_days(
    norm: &NormalizedSchedule,
    cycle_length: usize,
    seeds: [usize; 2],
    window: RangeInclusive<usize>,
) -> Result<Schedule> {
    check_window(&window)?;
    if norm.budget() > window_len(&window) {
        return Err(Error::invalid("template budget exceeds the window"));
    }
    let (lo, hi) = (*window.start() as i64, *window.end() as i64);
    let mut taken: BTreeSet<usize> = seeds.into_iter().collect();
    for p in &norm.points {
        let d0 = p.day(cycle_length).clamp(lo, hi);
        let day = (0..=(hi - lo))
            .flat_map(|r| [d0 - r, d0 + r])
            .find(|&d| (lo..=hi).contains(&d) && !taken.contains(&(d as usize)))
            .ok_or_else(|| Error::invalid("no free day left in the window"))?;
        taken.insert(day as usize);
    }
    let origin = if norm.points.is_empty() {
        ScheduleOrigin::SeedPeaks
    } else {
        ScheduleOrigin::Ed
    };
    Schedule::new(taken.into_iter().collect(), origin, seeds, &window)
}

/// [`materialize_days`] over the observation window using the individual's
/// cycle length and LH peaks.
pub fn materialize(norm: &NormalizedSchedule, individual: &IndividualSeries) -> Result<Schedule> {
    materialize_days(
        norm,
        individual.cycle_length_days,
        individual.seed_peaks()?,
        1..=OBSERVATION_WINDOW,
    )
}

/// One individual's contribution to the population ED score.
#[derive(Debug, Clone, Copy)]
pub struct EdMember<'a> {
    pub cycle_length: usize,
    /// `NUM_HORMONES x T` ground truth, column `t - 1` for day `t`.
    pub truth: &'a DMatrix<f64>,
    pub posterior: &'a PosteriorSeries,
}

/// `sum_i sum_h Psi` at the day each candidate maps to for each individual.
/// Individuals for which the candidate lands outside `window` (or outside
/// their posterior grid) are skipped; `None` if nobody contributes.
pub fn population_ed(
    members: &[EdMember<'_>],
    candidates: &[CyclePoint],
    window: &RangeInclusive<usize>,
) -> Vec<Option<f64>> {
    candidates
        .iter()
        .map(|c| {
            let mut total = None;
            for m in members {
                let day = c.day(m.cycle_length);
                if day < 1 || !window.contains(&(day as usize)) {
                    continue;
                }
                let day = day as usize;
                let Some(i) = m.posterior.position(day) else {
                    continue;
                };
                let s: f64 = HormoneId::ALL
                    .iter()
                    .map(|&h| {
                        expected_distance(
                            m.truth[(h.index(), day - 1)],
                            m.posterior.mean[(h.index(), i)],
                            m.posterior.variance(h, i).sqrt(),
                        )
                    })
                    .sum();
                *total.get_or_insert(0.0) += s;
            }
            total
        })
        .collect()
}

/// Individual taking part in ED template construction.
#[derive(Debug, Clone)]
pub struct EdIndividual {
    pub id: String,
    /// Standardized `NUM_HORMONES x T` ground truth.
    pub truth: DMatrix<f64>,
    pub cycle_length: usize,
    pub seeds: [usize; 2],
}

impl EdIndividual {
    pub fn from_series(series: &IndividualSeries, standardized: DMatrix<f64>) -> Result<Self> {
        Ok(EdIndividual {
            id: series.id.clone(),
            truth: standardized,
            cycle_length: series.cycle_length_days,
            seeds: series.seed_peaks()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdConfig {
    pub blocks: BlockStructure,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for EdConfig {
    fn default() -> Self {
        EdConfig {
            blocks: BlockStructure::blockwise(),
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

/// Fits member `index` on the template materialized for it and returns the
/// posterior over the observation window. `step` only feeds the random
/// initialization.
pub fn refit_member(
    ind: &EdIndividual,
    index: usize,
    norm: &NormalizedSchedule,
    step: usize,
    cfg: &EdConfig,
) -> Result<PosteriorSeries> {
    let window = 1..=OBSERVATION_WINDOW;
    let schedule = materialize_days(norm, ind.cycle_length, ind.seeds, window.clone())?;
    let obs = ObservationSet::from_series(&ind.id, &ind.truth, schedule.days(), OBSERVATION_WINDOW)?;
    let path = [stream::ED, index as u64, step as u64];
    let mut rng = rng_from(derive_path(cfg.seed, &path));
    let init = MgpHyperparams::initial(&cfg.blocks, ind.cycle_length as f64, &mut rng);
    let fit_cfg = FitConfig {
        seed: derive_path(cfg.seed, &[stream::MGP_INIT, index as u64, step as u64]),
        ..cfg.fit.clone()
    };
    let fitted = mgp::fit(&obs, &cfg.blocks, &init, &fit_cfg)?;
    let query: Vec<usize> = window.collect();
    mgp::posterior(&fitted.hyper, &cfg.blocks, &obs, &query)
}

/// Index of the highest score; ties go to the earliest candidate.
pub fn argmax_earliest(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy ED template: starting from the seeds, repeatedly refit every
/// individual on the current template and add the unchosen grid position
/// with the highest population ED.
pub fn ed_greedy(cohort: &[EdIndividual], budget: usize, cfg: &EdConfig) -> Result<NormalizedSchedule> {
    if cohort.is_empty() {
        return Err(Error::invalid("ED needs at least one individual"));
    }
    if budget < SEED_PEAKS {
        return Err(Error::invalid(format!("budget {budget} below the {SEED_PEAKS} seeded peaks")));
    }
    if budget > OBSERVATION_WINDOW {
        return Err(Error::invalid(format!(
            "budget {budget} exceeds the {OBSERVATION_WINDOW}-day window"
        )));
    }
    let window = 1..=OBSERVATION_WINDOW;
    let grid = candidate_grid();
    let mut chosen = vec![false; grid.len()];
    let mut norm = NormalizedSchedule::seeds_only();
    let mut step = 0;
    while norm.budget() < budget {
        let posteriors: Vec<PosteriorSeries> = cohort
            .par_iter()
            .enumerate()
            .map(|(i, ind)| refit_member(ind, i, &norm, step, cfg))
            .collect::<Result<_>>()?;
        let members: Vec<EdMember> = cohort
            .iter()
            .zip(&posteriors)
            .map(|(ind, post)| EdMember {
                cycle_length: ind.cycle_length,
                truth: &ind.truth,
                posterior: post,
            })
            .collect();
        let mut scores = population_ed(&members, &grid, &window);
        for (s, &c) in scores.iter_mut().zip(&chosen) {
            if c {
                *s = None;
            }
        }
        let k = argmax_earliest(&scores)
            .ok_or_else(|| Error::invalid("no candidate position maps into the window"))?;
        log::debug!(
            "ED step {step}: position {:.4} score {:.4}",
            grid[k].position(),
            scores[k].unwrap_or(f64::NAN)
        );
        chosen[k] = true;
        norm.insert(grid[k]);
        step += 1;
    }
    Ok(norm)
}

/// Schedule file: the template (if any) plus every materialized schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub budget: usize,
    pub origin: ScheduleOrigin,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<NormalizedSchedule>,
    pub individuals: Vec<IndividualSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSchedule {
    pub individual_id: String,
    pub days: Vec<usize>,
}

impl ScheduleFile {
    pub fn days_for(&self, id: &str) -> Option<&[usize]> {
        self.individuals
            .iter()
            .find(|s| s.individual_id == id)
            .map(|s| s.days.as_slice())
    }
}

pub fn write_schedule_file(path: &Path, file: &ScheduleFile) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, file)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_schedule_file(path: &Path) -> Result<ScheduleFile> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let file: ScheduleFile = serde_json::from_reader(BufReader::new(f))?;
    if let Some(t) = &file.template {
        if t.budget() != file.budget {
            return Err(Error::invalid("schedule template does not match its budget"));
        }
    }
    Ok(file)
}
