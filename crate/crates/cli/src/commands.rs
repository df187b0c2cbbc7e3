use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hormone_recon::datagen::{self, IndividualSeries};
use hormone_recon::dcnn::{self, DcnnConfig, DcnnModel, StreamSet};
use hormone_recon::eval::{self, ExperimentConfig, Scaler};
use hormone_recon::mgp::{self, BlockPreset, FittedModelFile, MgpHyperparams, ObservationSet, PosteriorSeries};
use hormone_recon::rng::{derive_path, rng_from, stream};
use hormone_recon::sampling::{self, EdConfig, EdIndividual, IndividualSchedule, ScheduleFile, ScheduleOrigin};
use hormone_recon::{OBSERVATION_WINDOW, SERIES_DAYS};
use rayon::prelude::*;

use crate::{Cli, Command};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Bad flags or arguments, detected after parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Some individuals could not be processed; the rest were written.
#[derive(Debug)]
pub struct PartialFailure {
    pub failed: Vec<(String, hormone_recon::Error)>,
}

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} individual(s) failed:", self.failed.len())?;
        for (id, e) in &self.failed {
            write!(f, " {id} ({e});")?;
        }
        Ok(())
    }
}

impl std::error::Error for PartialFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn core_code(e: &hormone_recon::Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(p) = cause.downcast_ref::<PartialFailure>() {
            return p.failed.iter().map(|(_, e)| core_code(e)).max().unwrap_or(EXIT_DATA);
        }
        if let Some(c) = cause.downcast_ref::<hormone_recon::Error>() {
            return core_code(c);
        }
    }
    EXIT_DATA
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) if !p.exists() => Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Ok(eval::read_experiment_config(p)?),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn parse_blocks(s: &str) -> Result<BlockPreset> {
    s.parse::<BlockPreset>().map_err(|e| usage(e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.global.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build_global()
        .context("starting the worker pool")?;
    let cfg = load_config(cli.global.config.as_deref())?;
    let seed = cli.global.seed;
    match cli.command {
        Command::Generate { n, out } => generate(cfg, seed, n, &out),
        Command::FitMgp { data, blocks, schedule, out } => {
            fit_mgp(cfg, seed, &data, parse_blocks(&blocks)?, &schedule, &out)
        }
        Command::PlanEd { data, budget, scheme, blocks, out } => {
            plan(cfg, seed, &data, budget, &scheme, parse_blocks(&blocks)?, &out)
        }
        Command::TrainDcnn { posteriors, targets, split_seed, out } => {
            train_dcnn(cfg, seed, &posteriors, &targets, split_seed, &out)
        }
        Command::Evaluate { out } => evaluate(cfg, seed, out),
        Command::Report { results, out } => report(&results, &out),
    }
}

fn generate(cfg: ExperimentConfig, seed: Option<u64>, n: Option<usize>, out: &Path) -> Result<()> {
    let n = n.unwrap_or(cfg.cohort_size);
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let seed = seed.unwrap_or(cfg.cohort_seed);
    let cohort = datagen::generate_cohort(n, &cfg.population, &cfg.waveform, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    datagen::write_dataset_csv(out, &cohort)?;
    let meta_path = datagen::metadata_path(out);
    datagen::write_metadata(&meta_path, &datagen::metadata_for(seed, &cfg.population, &cfg.waveform, &cohort))?;
    log::info!("wrote {n} individuals to {} and {}", out.display(), meta_path.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Vec<IndividualSeries>> {
    require_file(path, "dataset")?;
    Ok(datagen::load_dataset(path)?.0)
}

/// Scaler over every individual of the file; fitted models live in these
/// standardized units.
fn standardize(cohort: &[IndividualSeries]) -> Result<(Scaler, Vec<nalgebra::DMatrix<f64>>)> {
    let scaler = Scaler::fit(cohort.iter().map(|s| &s.values))?;
    let truth = cohort.iter().map(|s| scaler.apply(&s.values)).collect();
    Ok((scaler, truth))
}

const SCALER_FILE: &str = "scaler.json";
const MODELS_DIR: &str = "models";

fn fit_mgp(
    cfg: ExperimentConfig,
    seed: Option<u64>,
    data: &Path,
    preset: BlockPreset,
    schedule: &Path,
    out: &Path,
) -> Result<()> {
    require_file(schedule, "schedule file")?;
    let cohort = load_data(data)?;
    let plan = sampling::read_schedule_file(schedule)?;
    let seed = seed.unwrap_or(cfg.seed);
    let blocks = preset.structure();
    let (scaler, truth) = standardize(&cohort)?;
    create_dir(&out.join(MODELS_DIR))?;
    eval::write_json(&out.join(SCALER_FILE), &scaler)?;

    let fit_one = |(k, entry): (usize, &IndividualSchedule)| -> hormone_recon::Result<(FittedModelFile, PosteriorSeries)> {
        let i = cohort
            .iter()
            .position(|s| s.id == entry.individual_id)
            .ok_or_else(|| hormone_recon::Error::invalid("not present in the dataset"))?;
        let mut days = entry.days.clone();
        days.sort_unstable();
        if days.iter().any(|d| !(1..=OBSERVATION_WINDOW).contains(d)) {
            return Err(hormone_recon::Error::invalid(format!(
                "schedule days must lie in 1..={OBSERVATION_WINDOW}"
            )));
        }
        let obs = ObservationSet::from_series(&entry.individual_id, &truth[i], &days, OBSERVATION_WINDOW)?;
        let init_seed = derive_path(seed, &[stream::MGP_INIT, k as u64]);
        let init = MgpHyperparams::initial(&blocks, cohort[i].cycle_length_days as f64, &mut rng_from(init_seed));
        let fit_cfg = mgp::FitConfig {
            seed: init_seed,
            ..cfg.mgp.clone()
        };
        let fitted = mgp::fit(&obs, &blocks, &init, &fit_cfg)?;
        let query: Vec<usize> = (1..=SERIES_DAYS).collect();
        let post = mgp::posterior(&fitted.hyper, &blocks, &obs, &query)?;
        let model = FittedModelFile {
            individual_id: entry.individual_id.clone(),
            blocks: blocks.clone(),
            hyper: fitted.hyper,
            diagnostics: fitted.diagnostics,
            observed_days: days,
        };
        Ok((model, post))
    };
    let results: Vec<_> = plan.individuals.par_iter().enumerate().map(fit_one).collect();

    let mut posts = Vec::new();
    let mut failed = Vec::new();
    for (entry, r) in plan.individuals.iter().zip(results) {
        match r {
            Ok((model, post)) => {
                let p = out.join(MODELS_DIR).join(format!("{}.json", entry.individual_id));
                mgp::write_fitted_model(&p, &model)?;
                posts.push(post);
            }
            Err(e) => {
                log::error!("{}: {e}", entry.individual_id);
                failed.push((entry.individual_id.clone(), e));
            }
        }
    }
    mgp::write_posterior_csv(&out.join("posteriors.csv"), &posts)?;
    log::info!("fitted {} of {} individuals", posts.len(), plan.individuals.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(PartialFailure { failed }.into())
    }
}

fn plan(
    cfg: ExperimentConfig,
    seed: Option<u64>,
    data: &Path,
    budget: usize,
    scheme: &str,
    preset: BlockPreset,
    out: &Path,
) -> Result<()> {
    if !(sampling::SEED_PEAKS..=OBSERVATION_WINDOW).contains(&budget) {
        return Err(usage(format!(
            "--budget must lie in {}..={OBSERVATION_WINDOW}",
            sampling::SEED_PEAKS
        )));
    }
    let seed = seed.unwrap_or(cfg.seed);
    let cohort = load_data(data)?;
    let (origin, template, individuals) = match scheme {
        "ed" => {
            let (_, truth) = standardize(&cohort)?;
            let members: Vec<EdIndividual> = cohort
                .iter()
                .zip(truth)
                .map(|(s, t)| EdIndividual::from_series(s, t))
                .collect::<hormone_recon::Result<_>>()?;
            let ed_cfg = EdConfig {
                blocks: preset.structure(),
                fit: cfg.ed_fit.clone(),
                seed: derive_path(seed, &[stream::ED, budget as u64]),
            };
            let template = sampling::ed_greedy(&members, budget, &ed_cfg)?;
            let individuals = cohort
                .iter()
                .map(|s| {
                    Ok(IndividualSchedule {
                        individual_id: s.id.clone(),
                        days: sampling::materialize(&template, s)?.days().to_vec(),
                    })
                })
                .collect::<hormone_recon::Result<_>>()?;
            (ScheduleOrigin::Ed, Some(template), individuals)
        }
        "random" => {
            let individuals = cohort
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = rng_from(derive_path(seed, &[stream::SCHEDULE, budget as u64, i as u64]));
                    let sched = sampling::random_schedule(budget, 1..=OBSERVATION_WINDOW, s.seed_peaks()?, &mut rng)?;
                    Ok(IndividualSchedule {
                        individual_id: s.id.clone(),
                        days: sched.days().to_vec(),
                    })
                })
                .collect::<hormone_recon::Result<_>>()?;
            (ScheduleOrigin::Random, None, individuals)
        }
        other => return Err(usage(format!("unknown scheme {other:?}; expected ed or random"))),
    };
    let file = ScheduleFile {
        budget,
        origin,
        seed,
        template,
        individuals,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    sampling::write_schedule_file(out, &file)?;
    log::info!("wrote {} schedules to {}", file.individuals.len(), out.display());
    Ok(())
}

fn train_dcnn(
    cfg: ExperimentConfig,
    seed: Option<u64>,
    posteriors: &Path,
    targets: &Path,
    split_seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let models_dir = posteriors.join(MODELS_DIR);
    if !models_dir.is_dir() {
        return Err(usage(format!("{} has no {MODELS_DIR}/ directory", posteriors.display())));
    }
    let cohort = load_data(targets)?;
    let scaler_path = posteriors.join(SCALER_FILE);
    let scaler: Scaler = serde_json::from_reader(
        fs::File::open(&scaler_path).with_context(|| format!("opening {}", scaler_path.display()))?,
    )
    .map_err(hormone_recon::Error::from)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&models_dir)
        .with_context(|| format!("listing {}", models_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    let models: Vec<FittedModelFile> = paths
        .iter()
        .map(|p| mgp::read_fitted_model(p))
        .collect::<hormone_recon::Result<_>>()?;
    let ids: Vec<String> = models.iter().map(|m| m.individual_id.clone()).collect();
    let split = eval::split_cohort(&ids, split_seed.unwrap_or(cfg.split_seeds[0]))?;
    let seed = seed.unwrap_or(cfg.dcnn.seed);

    let stream_set = |k: usize, count: usize| -> hormone_recon::Result<StreamSet> {
        let m = &models[k];
        let series = cohort
            .iter()
            .find(|s| s.id == m.individual_id)
            .ok_or_else(|| hormone_recon::Error::invalid(format!("{} missing from targets", m.individual_id)))?;
        let truth = scaler.apply(&series.values);
        let obs = ObservationSet::from_series(&m.individual_id, &truth, &m.observed_days, OBSERVATION_WINDOW)?;
        let query: Vec<usize> = (1..=SERIES_DAYS).collect();
        let post = mgp::posterior(&m.hyper, &m.blocks, &obs, &query)?;
        let mut rng = rng_from(derive_path(seed, &[stream::POSTERIOR_DRAW, k as u64]));
        Ok(StreamSet {
            id: m.individual_id.clone(),
            streams: mgp::draw_streams(&post, count, &mut rng)?,
            target: truth,
        })
    };
    let pick = |group: &[String], count: usize| -> hormone_recon::Result<Vec<StreamSet>> {
        let idx: Vec<usize> = group
            .iter()
            .map(|id| ids.iter().position(|x| x == id).expect("split of known ids"))
            .collect();
        idx.par_iter().map(|&k| stream_set(k, count)).collect()
    };
    let data = pick(&split.train, cfg.streams)?;
    let val = pick(&split.val, cfg.dcnn.val_streams)?;
    let config = DcnnConfig {
        seed,
        ..cfg.dcnn.clone()
    };
    let outcome = dcnn::train(DcnnModel::init(config)?, &data, &val)?;
    create_dir(out)?;
    dcnn::write_checkpoint(&out.join("dcnn.json"), &outcome.model)?;
    dcnn::write_loss_history(&out.join("loss.csv"), &outcome.history)?;
    eval::write_json(&out.join("split.json"), &split)?;
    log::info!(
        "trained on {} individuals; best validation at iteration {} of {}",
        data.len(),
        outcome.best_iteration,
        outcome.iterations
    );
    Ok(())
}

fn evaluate(mut cfg: ExperimentConfig, seed: Option<u64>, out: PathBuf) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.output_dir = Some(out.clone());
    cfg.validate().map_err(|e| usage(format!("invalid experiment config: {e}")))?;
    let cohort = cfg.generate_cohort()?;
    let results = eval::run_experiment(&cfg, &cohort)?;
    log::info!("{} cells written to {}", results.cells.len(), out.display());
    Ok(())
}

fn report(results: &Path, out: &Path) -> Result<()> {
    require_file(results, "results file")?;
    let r = eval::read_results(results)?;
    let tables = eval::emit_tables(&r, out)?;
    let curves = results.parent().unwrap_or(Path::new(".")).join("curves");
    let mut copied = 0;
    if curves.is_dir() && curves.canonicalize().ok() != out.join("curves").canonicalize().ok() {
        create_dir(&out.join("curves"))?;
        for entry in fs::read_dir(&curves)? {
            let p = entry?.path();
            if let Some(name) = p.file_name() {
                fs::copy(&p, out.join("curves").join(name))
                    .with_context(|| format!("copying {}", p.display()))?;
                copied += 1;
            }
        }
    }
    log::info!("wrote {} tables and {copied} curve files to {}", tables.len(), out.display());
    Ok(())
}
