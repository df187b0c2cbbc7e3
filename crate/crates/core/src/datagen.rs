//! Synthetic cohort generation.
//!
//! Each individual draws an (ovulation day, cycle length) pair from a
//! bivariate Gaussian fitted to tracked cycles, then gets five hormone series
//! built from Gaussian bumps placed on a normalized cycle clock. The clock
//! position of day `t` is `x = t / L` for an integer cycle length `L`; cycle
//! `c` covers days `c*L + 1 ..= (c+1)*L` and ovulates on day `c*L + ov`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hormone::{HormoneId, NUM_HORMONES, OBSERVATION_WINDOW, SERIES_DAYS};
use crate::rng::{derive_path, rng_from, stream};

pub const MIN_CYCLE_LENGTH: f64 = 21.0;
/// Three full cycles have to fit in the 105-day series.
pub const MAX_CYCLE_LENGTH: f64 = 35.0;
/// Ovulation must be at least this many days from either end of the cycle.
pub const OVULATION_MARGIN: f64 = 3.0;
pub const MAX_REJECTIONS: usize = 10_000;

/// Bivariate Gaussian over (ovulation day, cycle length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationGaussian {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

/// Population fit of (ovulation day, cycle length) from tracked cycles.
pub fn default_population_gaussian() -> PopulationGaussian {
    PopulationGaussian {
        mean: [15.5, 29.1],
        covariance: [[25.5, 8.0], [8.0, 12.6]],
    }
}

impl Default for PopulationGaussian {
    fn default() -> Self {
        default_population_gaussian()
    }
}

impl PopulationGaussian {
    /// Lower-triangular Cholesky factor. Semi-definite covariances (including
    /// the all-zero matrix) are accepted.
    pub fn cholesky(&self) -> Result<[[f64; 2]; 2]> {
        let c = &self.covariance;
        if self.mean.iter().any(|m| !m.is_finite()) || c.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("population gaussian has non-finite entries"));
        }
        if c[0][1] != c[1][0] {
            return Err(Error::invalid("population covariance is not symmetric"));
        }
        if c[0][0] < 0.0 || c[1][1] < 0.0 {
            return Err(Error::invalid("population covariance has a negative variance"));
        }
        let l00 = c[0][0].sqrt();
        let l10 = if l00 > 0.0 { c[1][0] / l00 } else { 0.0 };
        let rem = c[1][1] - l10 * l10;
        if rem < -1e-12 * c[1][1].max(1.0) || (l00 == 0.0 && c[1][0] != 0.0) {
            return Err(Error::invalid("population covariance is not positive semi-definite"));
        }
        Ok([[l00, 0.0], [l10, rem.max(0.0).sqrt()]])
    }

    /// One unconstrained draw `(ovulation day, cycle length)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 2]> {
        let l = self.cholesky()?;
        Ok(self.draw_with(&l, rng))
    }

    fn draw_with<R: Rng + ?Sized>(&self, l: &[[f64; 2]; 2], rng: &mut R) -> [f64; 2] {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        [
            self.mean[0] + l[0][0] * z0,
            self.mean[1] + l[1][0] * z0 + l[1][1] * z1,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleCharacteristics {
    pub ovulation_day: f64,
    pub cycle_length: f64,
}

impl CycleCharacteristics {
    pub fn new(ovulation_day: f64, cycle_length: f64) -> Result<Self> {
        let c = CycleCharacteristics {
            ovulation_day,
            cycle_length,
        };
        if c.is_valid() {
            Ok(c)
        } else {
            Err(Error::invalid(format!(
                "cycle characteristics out of bounds: ovulation {ovulation_day}, length {cycle_length}"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        let (ov, len) = (self.ovulation_day, self.cycle_length);
        ov.is_finite()
            && len.is_finite()
            && (MIN_CYCLE_LENGTH..=MAX_CYCLE_LENGTH).contains(&len)
            && ov >= OVULATION_MARGIN
            && ov <= len - OVULATION_MARGIN
    }

    /// Whole-day cycle length used to lay out the series.
    pub fn cycle_days(&self) -> usize {
        self.cycle_length.round() as usize
    }

    /// Whole-day ovulation offset within a cycle (1-based cycle day).
    pub fn ovulation_offset(&self) -> usize {
        self.ovulation_day.round() as usize
    }
}

/// Draws cycle characteristics, rejecting pairs outside the physiological
/// bounds.
pub fn sample_characteristics<R: Rng + ?Sized>(
    pop: &PopulationGaussian,
    rng: &mut R,
) -> Result<CycleCharacteristics> {
    let l = pop.cholesky()?;
    for _ in 0..MAX_REJECTIONS {
        let [ov, len] = pop.draw_with(&l, rng);
        let c = CycleCharacteristics {
            ovulation_day: ov,
            cycle_length: len,
        };
        if c.is_valid() {
            return Ok(c);
        }
    }
    Err(Error::SamplingExhausted {
        attempts: MAX_REJECTIONS,
        reason: format!("population {:?} rarely yields valid cycles", pop.mean),
    })
}

/// Where a bump sits on the normalized cycle clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Fixed phase in `[0, 1)`.
    Phase(f64),
    /// Offset (in phase units) from the ovulation phase.
    Ovulation(f64),
    /// Midpoint between ovulation and the end of the cycle.
    LutealMidpoint,
}

impl Anchor {
    fn phase(self, ovulation_phase: f64) -> f64 {
        match self {
            Anchor::Phase(u) => u,
            Anchor::Ovulation(du) => ovulation_phase + du,
            Anchor::LutealMidpoint => 0.5 * (ovulation_phase + 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub anchor: Anchor,
    /// Standard deviation in phase units.
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HormoneWave {
    pub hormone: HormoneId,
    pub baseline: f64,
    pub bumps: Vec<Bump>,
}

/// Shape parameters of the surrogate generator, in raw hormone units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformParams {
    pub hormones: Vec<HormoneWave>,
    /// Log-scale standard deviation of the per-individual multiplicative
    /// jitter on baselines, amplitudes and widths. Zero disables it.
    pub jitter: f64,
}

impl Default for WaveformParams {
    fn default() -> Self {
        let bump = |anchor, width, amplitude| Bump {
            anchor,
            width,
            amplitude,
        };
        WaveformParams {
            hormones: vec![
                HormoneWave {
                    hormone: HormoneId::E,
                    baseline: 40.0,
                    bumps: vec![
                        bump(Anchor::Ovulation(-0.08), 0.04, 200.0),
                        bump(Anchor::LutealMidpoint, 0.10, 100.0),
                    ],
                },
                HormoneWave {
                    hormone: HormoneId::P,
                    baseline: 0.5,
                    bumps: vec![bump(Anchor::LutealMidpoint, 0.12, 12.0)],
                },
                HormoneWave {
                    hormone: HormoneId::Ih,
                    baseline: 10.0,
                    bumps: vec![bump(Anchor::LutealMidpoint, 0.12, 45.0)],
                },
                HormoneWave {
                    hormone: HormoneId::Fsh,
                    baseline: 4.0,
                    bumps: vec![
                        bump(Anchor::Ovulation(0.0), 0.03, 10.0),
                        bump(Anchor::Phase(0.05), 0.05, 4.0),
                    ],
                },
                HormoneWave {
                    hormone: HormoneId::Lh,
                    baseline: 4.0,
                    bumps: vec![bump(Anchor::Ovulation(0.0), 0.015, 45.0)],
                },
            ],
            jitter: 0.10,
        }
    }
}

impl WaveformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid("waveform jitter must be finite and >= 0"));
        }
        for h in HormoneId::ALL {
            let n = self.hormones.iter().filter(|w| w.hormone == h).count();
            if n != 1 {
                return Err(Error::invalid(format!("waveform must define {h} exactly once")));
            }
        }
        let lh = self.wave(HormoneId::Lh);
        if !lh
            .bumps
            .iter()
            .any(|b| b.anchor == Anchor::Ovulation(0.0) && b.amplitude > 0.0)
        {
            return Err(Error::invalid("LH needs a positive bump anchored at ovulation"));
        }
        for w in &self.hormones {
            for b in &w.bumps {
                if !(b.width > 0.0 && b.amplitude.is_finite()) {
                    return Err(Error::invalid(format!("bad bump for {}", w.hormone)));
                }
            }
        }
        Ok(())
    }

    pub fn wave(&self, h: HormoneId) -> &HormoneWave {
        self.hormones
            .iter()
            .find(|w| w.hormone == h)
            .expect("validated waveform defines every hormone")
    }
}

/// Ground-truth daily hormone levels for one simulated individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSeries {
    pub id: String,
    /// `NUM_HORMONES x SERIES_DAYS`; column `t - 1` holds day `t`.
    #[serde(with = "crate::linalg::rows")]
    pub values: DMatrix<f64>,
    pub characteristics: CycleCharacteristics,
    /// Whole-day cycle length the series was laid out with.
    pub cycle_length_days: usize,
    /// LH peak day (1-based) of every cycle whose ovulation falls in the series.
    pub ovulation_days: Vec<usize>,
}

impl IndividualSeries {
    pub fn value(&self, h: HormoneId, day: usize) -> f64 {
        self.values[(h.index(), day - 1)]
    }

    /// The two LH-peak days used to seed every schedule: peaks of the first
    /// two complete cycles inside the observation window.
    pub fn seed_peaks(&self) -> Result<[usize; 2]> {
        let peaks = lh_peak_days(self, 1..=OBSERVATION_WINDOW)?;
        match peaks.as_slice() {
            [a, b, ..] => Ok([*a, *b]),
            _ => Err(Error::invalid(format!(
                "{}: fewer than two complete cycles in the observation window",
                self.id
            ))),
        }
    }
}

fn gaussian_bump_sum(x: f64, center: f64, width: f64, cycles: i64) -> f64 {
    (-1..=cycles)
        .map(|c| {
            let z = (x - c as f64 - center) / width;
            (-0.5 * z * z).exp()
        })
        .sum()
}

/// Builds the 5 x 105 series for one individual. With `wave.jitter == 0` the
/// random source is not touched and the result depends only on the inputs.
pub fn generate_series<R: Rng + ?Sized>(
    id: impl Into<String>,
    chars: &CycleCharacteristics,
    wave: &WaveformParams,
    rng: &mut R,
) -> Result<IndividualSeries> {
    if !chars.is_valid() {
        return Err(Error::invalid(format!("invalid cycle characteristics {chars:?}")));
    }
    wave.validate()?;
    let len = chars.cycle_days();
    let ov = chars.ovulation_offset();
    let lf = len as f64;
    let ov_phase = ov as f64 / lf;
    let cycles = (SERIES_DAYS / len) as i64 + 2;

    let jitter = |rng: &mut R| -> f64 {
        if wave.jitter > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            (wave.jitter * z).exp()
        } else {
            1.0
        }
    };

    let mut values = DMatrix::zeros(NUM_HORMONES, SERIES_DAYS);
    for h in HormoneId::ALL {
        let w = wave.wave(h);
        let baseline = w.baseline * jitter(rng);
        let bumps: Vec<(f64, f64, f64)> = w
            .bumps
            .iter()
            .map(|b| {
                let amp = b.amplitude * jitter(rng);
                let width = b.width * jitter(rng);
                (b.anchor.phase(ov_phase), width, amp)
            })
            .collect();
        for day in 1..=SERIES_DAYS {
            let x = day as f64 / lf;
            let v = baseline
                + bumps
                    .iter()
                    .map(|&(center, width, amp)| amp * gaussian_bump_sum(x, center, width, cycles))
                    .sum::<f64>();
            values[(h.index(), day - 1)] = v;
        }
    }

    let ovulation_days = (0..)
        .map(|c| c * len + ov)
        .take_while(|&d| d <= SERIES_DAYS)
        .collect();
    Ok(IndividualSeries {
        id: id.into(),
        values,
        characteristics: *chars,
        cycle_length_days: len,
        ovulation_days,
    })
}

pub fn individual_id(k: usize) -> String {
    format!("ind{k:03}")
}

/// Generates `n` individuals. Individual `k` uses a sub-seed derived from
/// `(seed, k)`, so a cohort of size `n` is a prefix of any larger cohort with
/// the same seed.
pub fn generate_cohort(
    n: usize,
    pop: &PopulationGaussian,
    wave: &WaveformParams,
    seed: u64,
) -> Result<Vec<IndividualSeries>> {
    if n == 0 {
        return Err(Error::invalid("cohort size must be at least 1"));
    }
    pop.cholesky()?;
    wave.validate()?;
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from(derive_path(seed, &[stream::COHORT, k as u64]));
            let chars = sample_characteristics(pop, &mut rng)?;
            generate_series(individual_id(k), &chars, wave, &mut rng)
        })
        .collect()
}

/// Day of maximum LH for every complete cycle inside `within`.
pub fn lh_peak_days(series: &IndividualSeries, within: RangeInclusive<usize>) -> Result<Vec<usize>> {
    let (lo, hi) = (*within.start(), *within.end());
    if lo < 1 || hi > SERIES_DAYS || lo > hi {
        return Err(Error::invalid(format!("day range {lo}..={hi} outside 1..={SERIES_DAYS}")));
    }
    let len = series.cycle_length_days;
    let lh = series.values.row(HormoneId::Lh.index());
    let mut peaks = Vec::new();
    for c in 0.. {
        let first = c * len + 1;
        let last = (c + 1) * len;
        if last > hi {
            break;
        }
        if first < lo {
            continue;
        }
        let mut best = first;
        for d in first..=last {
            if lh[d - 1] > lh[best - 1] {
                best = d;
            }
        }
        peaks.push(best);
    }
    Ok(peaks)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndividualMetadata {
    pub id: String,
    pub characteristics: CycleCharacteristics,
    pub cycle_length_days: usize,
    pub ovulation_days: Vec<usize>,
}

/// Sidecar written next to the dataset CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub seed: u64,
    pub population: PopulationGaussian,
    pub waveform: WaveformParams,
    pub individuals: Vec<IndividualMetadata>,
}

pub const DATASET_HEADER: [&str; 7] = ["individual_id", "day", "E", "P", "Ih", "FSH", "LH"];

pub fn write_dataset_csv(path: &Path, cohort: &[IndividualSeries]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(DATASET_HEADER)?;
    for s in cohort {
        for day in 1..=SERIES_DAYS {
            let mut rec = vec![s.id.clone(), day.to_string()];
            rec.extend(HormoneId::ALL.iter().map(|&h| s.value(h, day).to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a dataset CSV into `(id, 5 x 105 matrix)` pairs in file order.
pub fn read_dataset_csv(path: &Path) -> Result<Vec<(String, DMatrix<f64>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != DATASET_HEADER {
        return Err(Error::invalid(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut out: Vec<(String, DMatrix<f64>, Vec<bool>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec[0].to_string();
        let day: usize = rec[1]
            .parse()
            .map_err(|_| Error::invalid(format!("bad day {:?}", &rec[1])))?;
        if !(1..=SERIES_DAYS).contains(&day) {
            return Err(Error::invalid(format!("{id}: day {day} outside 1..={SERIES_DAYS}")));
        }
        if out.last().map(|(last, _, _)| last != &id).unwrap_or(true) {
            if out.iter().any(|(other, _, _)| other == &id) {
                return Err(Error::invalid(format!("{id}: rows are not contiguous")));
            }
            out.push((id.clone(), DMatrix::zeros(NUM_HORMONES, SERIES_DAYS), vec![false; SERIES_DAYS]));
        }
        let (_, m, seen) = out.last_mut().expect("pushed above");
        for h in 0..NUM_HORMONES {
            let v: f64 = rec[2 + h]
                .parse()
                .map_err(|_| Error::invalid(format!("{id} day {day}: bad value {:?}", &rec[2 + h])))?;
            m[(h, day - 1)] = v;
        }
        seen[day - 1] = true;
    }
    out.into_iter()
        .map(|(id, m, seen)| {
            if seen.iter().all(|&s| s) {
                Ok((id, m))
            } else {
                Err(Error::invalid(format!("{id}: missing days")))
            }
        })
        .collect()
}

pub fn metadata_for(seed: u64, pop: &PopulationGaussian, wave: &WaveformParams, cohort: &[IndividualSeries]) -> DatasetMetadata {
    DatasetMetadata {
        seed,
        population: pop.clone(),
        waveform: wave.clone(),
        individuals: cohort
            .iter()
            .map(|s| IndividualMetadata {
                id: s.id.clone(),
                characteristics: s.characteristics,
                cycle_length_days: s.cycle_length_days,
                ovulation_days: s.ovulation_days.clone(),
            })
            .collect(),
    }
}

pub fn write_metadata(path: &Path, meta: &DatasetMetadata) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), meta)?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<DatasetMetadata> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Sidecar path convention: `cohort.csv` -> `cohort.meta.json`.
pub fn metadata_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("meta.json")
}

/// Loads a dataset CSV and its metadata sidecar back into series.
pub fn load_dataset(csv_path: &Path) -> Result<(Vec<IndividualSeries>, DatasetMetadata)> {
    let rows = read_dataset_csv(csv_path)?;
    let meta = read_metadata(&metadata_path(csv_path))?;
    let series = rows
        .into_iter()
        .map(|(id, values)| {
            let m = meta
                .individuals
                .iter()
                .find(|m| m.id == id)
                .ok_or_else(|| Error::invalid(format!("{id}: not in metadata")))?;
            Ok(IndividualSeries {
                id,
                values,
                characteristics: m.characteristics,
                cycle_length_days: m.cycle_length_days,
                ovulation_days: m.ovulation_days.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((series, meta))
}
