//! Non-causal dilated convolutional network `g(z, w)`.
//!
//! Architecture: a width-1 input projection `H -> W`, `L` residual units
//! `h <- ReLU(h + conv_d(h) + b)` and a width-1 linear output projection
//! `W -> H`. Gradients are derived by hand; see [`gradients`].
//!
//! Flat weight layout (used by checkpoints and [`Params::to_flat`]), every
//! matrix column-major:
//! input weights `W x H`, input bias `W`, then per layer the `K` taps
//! `W x W` followed by the layer bias `W`, then output weights `H x W` and
//! output bias `H`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hormone::NUM_HORMONES;
use crate::rng::{derive_path, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationSchedule {
    /// Every layer uses dilation `d`.
    Constant,
    /// Layer `l` (1-based) uses dilation `d^l`.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `w <- w - eta * grad`.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Projections start as a shifted identity so the untrained network
    /// passes its input through; convolution taps start small.
    Identity,
    /// Scaled Gaussian weights everywhere.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcnnConfig {
    pub layers: usize,
    pub dilation: usize,
    pub dilation_schedule: DilationSchedule,
    pub filter_size: usize,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub init: InitScheme,
    /// Validation is evaluated every this many iterations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Streams per validation individual used for the validation loss.
    pub val_streams: usize,
    /// Enforce the usual search ranges for `L`, `d`, `K` and `W`.
    pub strict_ranges: bool,
}

impl Default for DcnnConfig {
    fn default() -> Self {
        DcnnConfig {
            layers: 4,
            dilation: 2,
            dilation_schedule: DilationSchedule::Constant,
            filter_size: 5,
            hidden_width: 8,
            learning_rate: 2e-3,
            max_iterations: 4000,
            batch_size: 16,
            seed: 0,
            optimizer: Optimizer::Sgd,
            init: InitScheme::Identity,
            eval_every: 50,
            patience: 20,
            val_streams: 10,
            strict_ranges: true,
        }
    }
}

/// One-sided reach of the network in time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub backward: usize,
    pub forward: usize,
}

impl DcnnConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize, lo: usize, hi: usize| {
            if self.strict_ranges && !(lo..=hi).contains(&v) {
                Err(Error::invalid(format!("{name} = {v} outside {lo}..={hi}")))
            } else if v == 0 {
                Err(Error::invalid(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        check("layers", self.layers, 3, 6)?;
        check("dilation", self.dilation, 1, 3)?;
        check("filter_size", self.filter_size, 2, 9)?;
        check("hidden_width", self.hidden_width, 5, 12)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.val_streams == 0 {
            return Err(Error::invalid("batch_size, eval_every and val_streams must be positive"));
        }
        Ok(())
    }

    /// Dilation of layer `l`, 1-based.
    pub fn dilation_at(&self, l: usize) -> usize {
        match self.dilation_schedule {
            DilationSchedule::Constant => self.dilation,
            DilationSchedule::Exponential => self.dilation.pow(l as u32),
        }
    }

    /// Reach of the convolution of layer `l` alone: `d_l * (K - 1)`.
    pub fn layer_span(&self, l: usize) -> usize {
        self.dilation_at(l) * (self.filter_size - 1)
    }

    /// Taps sit at `d_l * (k - K/2)`, so each layer reaches `d_l * floor(K/2)`
    /// back and `d_l * (K - 1 - floor(K/2))` forward.
    pub fn receptive_field(&self) -> ReceptiveField {
        let back = self.filter_size / 2;
        let fwd = self.filter_size - 1 - back;
        let total: usize = (1..=self.layers).map(|l| self.dilation_at(l)).sum();
        ReceptiveField {
            backward: total * back,
            forward: total * fwd,
        }
    }
}

/// `sum_k filter[k] * x[t + d (k - floor(K/2))]` with zeros outside the
/// sequence. `filter[k]` is `C' x C`, `x` is `C x T`.
pub fn dilated_conv_noncausal(x: &DMatrix<f64>, filter: &[DMatrix<f64>], d: usize) -> DMatrix<f64> {
    let cout = filter.first().map_or(0, |f| f.nrows());
    let mut out = DMatrix::zeros(cout, x.ncols());
    conv_accumulate(&mut out, filter, x, d);
    out
}

/// Column ranges `(out_start, in_start, len)` for a tap at `offset`.
fn tap_range(offset: isize, t: usize) -> Option<(usize, usize, usize)> {
    let o = offset.unsigned_abs();
    if o >= t {
        return None;
    }
    let len = t - o;
    Some(if offset >= 0 { (0, o, len) } else { (o, 0, len) })
}

fn tap_offset(k: usize, taps: usize, d: usize) -> isize {
    d as isize * (k as isize - (taps / 2) as isize)
}

fn conv_accumulate(out: &mut DMatrix<f64>, filter: &[DMatrix<f64>], x: &DMatrix<f64>, d: usize) {
    let t = x.ncols();
    for (k, w) in filter.iter().enumerate() {
        if let Some((o0, i0, len)) = tap_range(tap_offset(k, filter.len(), d), t) {
            out.columns_mut(o0, len)
                .gemm(1.0, w, &x.columns(i0, len), 1.0);
        }
    }
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut c in m.column_iter_mut() {
        c += b;
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut s = DVector::zeros(m.nrows());
    for c in m.column_iter() {
        s += c;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `K` taps, each `W x W`.
    pub taps: Vec<DMatrix<f64>>,
    pub bias: DVector<f64>,
}

/// All trainable weights; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub input_weights: DMatrix<f64>,
    pub input_bias: DVector<f64>,
    pub layers: Vec<Layer>,
    pub output_weights: DMatrix<f64>,
    pub output_bias: DVector<f64>,
}

impl Params {
    pub fn zeros(cfg: &DcnnConfig) -> Self {
        let w = cfg.hidden_width;
        Params {
            input_weights: DMatrix::zeros(w, NUM_HORMONES),
            input_bias: DVector::zeros(w),
            layers: (0..cfg.layers)
                .map(|_| Layer {
                    taps: vec![DMatrix::zeros(w, w); cfg.filter_size],
                    bias: DVector::zeros(w),
                })
                .collect(),
            output_weights: DMatrix::zeros(NUM_HORMONES, w),
            output_bias: DVector::zeros(NUM_HORMONES),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.input_weights.as_slice(), self.input_bias.as_slice()];
        for l in &self.layers {
            v.extend(l.taps.iter().map(|t| t.as_slice()));
            v.push(l.bias.as_slice());
        }
        v.push(self.output_weights.as_slice());
        v.push(self.output_bias.as_slice());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.input_weights.as_mut_slice(),
            self.input_bias.as_mut_slice(),
        ];
        for l in &mut self.layers {
            v.extend(l.taps.iter_mut().map(|t| t.as_mut_slice()));
            v.push(l.bias.as_mut_slice());
        }
        v.push(self.output_weights.as_mut_slice());
        v.push(self.output_bias.as_mut_slice());
        v
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut at = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcnnModel {
    pub config: DcnnConfig,
    pub params: Params,
}

/// Offset added by the identity initialization so that standardized inputs
/// stay on the linear side of the ReLUs.
const IDENTITY_SHIFT: f64 = 4.0;

impl DcnnModel {
    /// All-zero weights.
    pub fn zeros(config: DcnnConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::zeros(&config);
        Ok(DcnnModel { config, params })
    }

    /// Initial weights according to `config.init`, seeded from `config.seed`.
    pub fn init(config: DcnnConfig) -> Result<Self> {
        let mut model = DcnnModel::zeros(config)?;
        let cfg = &model.config;
        let mut rng = rng_from(derive_path(cfg.seed, &[stream::DCNN, 0]));
        let (w, k, h) = (cfg.hidden_width, cfg.filter_size, NUM_HORMONES);
        let mut gauss = |std: f64| std * rng.sample::<f64, _>(StandardNormal);
        let p = &mut model.params;
        match cfg.init {
            InitScheme::Random => {
                let s_in = (2.0 / h as f64).sqrt();
                let s_conv = (1.0 / (w * k) as f64).sqrt();
                let s_out = (1.0 / w as f64).sqrt();
                p.input_weights.iter_mut().for_each(|x| *x = gauss(s_in));
                for l in &mut p.layers {
                    l.taps.iter_mut().flat_map(|t| t.iter_mut()).for_each(|x| *x = gauss(s_conv));
                }
                p.output_weights.iter_mut().for_each(|x| *x = gauss(s_out));
            }
            InitScheme::Identity => {
                let s = 0.01;
                p.input_weights.iter_mut().for_each(|x| *x = gauss(s));
                p.output_weights.iter_mut().for_each(|x| *x = gauss(s));
                for l in &mut p.layers {
                    l.taps.iter_mut().flat_map(|t| t.iter_mut()).for_each(|x| *x = gauss(0.1 * s));
                }
                for i in 0..w.min(h) {
                    p.input_weights[(i, i)] += 1.0;
                    p.output_weights[(i, i)] += 1.0;
                }
                p.input_bias.fill(IDENTITY_SHIFT);
                // Residual units are ReLU(h + ...) with h > 0, so the shift
                // passes through; the output bias removes it again.
                for i in 0..h {
                    p.output_bias[i] = -IDENTITY_SHIFT * p.output_weights.row(i).sum();
                }
            }
        }
        Ok(model)
    }
}

struct Tape {
    /// `h_0 .. h_L`, each `W x T`.
    hidden: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

fn forward_tape(model: &DcnnModel, z: &DMatrix<f64>) -> Tape {
    let p = &model.params;
    let mut h = &p.input_weights * z;
    add_bias(&mut h, &p.input_bias);
    let mut hidden = Vec::with_capacity(p.layers.len() + 1);
    for (l, layer) in p.layers.iter().enumerate() {
        let mut a = h.clone();
        conv_accumulate(&mut a, &layer.taps, &h, model.config.dilation_at(l + 1));
        add_bias(&mut a, &layer.bias);
        a.apply(|x| *x = x.max(0.0));
        hidden.push(h);
        h = a;
    }
    let mut output = &p.output_weights * &h;
    add_bias(&mut output, &p.output_bias);
    hidden.push(h);
    Tape { hidden, output }
}

fn check_input(z: &DMatrix<f64>) -> Result<()> {
    if z.nrows() != NUM_HORMONES || z.ncols() == 0 {
        return Err(Error::invalid(format!(
            "network input must be {NUM_HORMONES} x T, got {} x {}",
            z.nrows(),
            z.ncols()
        )));
    }
    Ok(())
}

/// `g(z, w)`: `NUM_HORMONES x T` in, `NUM_HORMONES x T` out.
pub fn forward(model: &DcnnModel, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_input(z)?;
    Ok(forward_tape(model, z).output)
}

/// Average of `g` over several streams.
pub fn predict(model: &DcnnModel, streams: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = streams
        .first()
        .ok_or_else(|| Error::invalid("no streams to predict from"))?;
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for z in streams {
        acc += forward(model, z)?;
    }
    Ok(acc / streams.len() as f64)
}

fn mask_columns(t: usize, mask: &RangeInclusive<usize>) -> Result<(usize, usize)> {
    let (lo, hi) = (*mask.start(), (*mask.end()).min(t));
    if lo < 1 || lo > hi {
        return Err(Error::invalid(format!("empty loss mask {mask:?} for {t} days")));
    }
    Ok((lo - 1, hi - lo + 1))
}

/// Mean squared difference over all hormones and the days in `mask`
/// (1-based, inclusive).
pub fn mse_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>, mask: RangeInclusive<usize>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid("prediction and target shapes differ"));
    }
    let (c0, n) = mask_columns(pred.ncols(), &mask)?;
    let diff = pred.columns(c0, n) - target.columns(c0, n);
    Ok(diff.norm_squared() / diff.len() as f64)
}

/// Loss and its exact gradient with respect to every weight.
pub fn gradients(
    model: &DcnnModel,
    z: &DMatrix<f64>,
    target: &DMatrix<f64>,
    mask: RangeInclusive<usize>,
) -> Result<(f64, Params)> {
    check_input(z)?;
    if z.shape() != target.shape() {
        return Err(Error::invalid("input and target shapes differ"));
    }
    let (c0, n) = mask_columns(z.ncols(), &mask)?;
    let p = &model.params;
    let tape = forward_tape(model, z);
    let t = z.ncols();

    let mut dy = DMatrix::zeros(NUM_HORMONES, t);
    let scale = 2.0 / (NUM_HORMONES * n) as f64;
    let diff = tape.output.columns(c0, n) - target.columns(c0, n);
    let loss = diff.norm_squared() / (NUM_HORMONES * n) as f64;
    dy.columns_mut(c0, n).copy_from(&(diff * scale));

    let mut g = Params::zeros(&model.config);
    let last = tape.hidden.last().expect("tape has the final hidden state");
    g.output_weights = &dy * last.transpose();
    g.output_bias = row_sums(&dy);
    let mut dh = p.output_weights.transpose() * &dy;

    for l in (0..p.layers.len()).rev() {
        let layer = &p.layers[l];
        let h_in = &tape.hidden[l];
        let h_out = &tape.hidden[l + 1];
        // ReLU gate: the unit output is positive exactly where it was active.
        let mut da = dh;
        da.zip_apply(h_out, |g, y| {
            if y <= 0.0 {
                *g = 0.0
            }
        });
        g.layers[l].bias = row_sums(&da);
        let mut dprev = da.clone();
        let d = model.config.dilation_at(l + 1);
        for (k, w) in layer.taps.iter().enumerate() {
            if let Some((o0, i0, len)) = tap_range(tap_offset(k, layer.taps.len(), d), t) {
                let da_v = da.columns(o0, len);
                g.layers[l].taps[k].gemm(1.0, &da_v, &h_in.columns(i0, len).transpose(), 0.0);
                dprev
                    .columns_mut(i0, len)
                    .gemm(1.0, &w.transpose(), &da_v, 1.0);
            }
        }
        dh = dprev;
    }
    g.input_weights = &dh * z.transpose();
    g.input_bias = row_sums(&dh);
    Ok((loss, g))
}

/// Posterior streams of one individual together with the shared target.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSet {
    pub id: String,
    pub streams: Vec<DMatrix<f64>>,
    pub target: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// Mean mini-batch loss since the previous record.
    pub train_mse: f64,
    /// `NaN` when there is no validation set.
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: DcnnModel,
    pub history: Vec<LossRecord>,
    /// Records at which a new best validation loss was accepted; their
    /// `val_mse` is strictly decreasing.
    pub checkpoints: Vec<LossRecord>,
    pub best_iteration: usize,
    pub iterations: usize,
}

/// Validation loss: for each individual, average `g` over its first
/// `val_streams` streams and score against the target; mean over people.
pub fn validation_loss(model: &DcnnModel, val: &[StreamSet]) -> Result<f64> {
    let k = model.config.val_streams;
    let losses: Vec<f64> = val
        .par_iter()
        .map(|s| {
            let n = s.streams.len().min(k);
            let pred = predict(model, &s.streams[..n])?;
            mse_loss(&pred, &s.target, 1..=pred.ncols())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Mini-batch gradient descent on the squared error between `g(z_i^(s))`
/// and `y_i` over all pairs `(i, s)`. Keeps the weights with the best
/// validation loss and stops after `patience` evaluations without
/// improvement.
pub fn train(model: DcnnModel, data: &[StreamSet], val: &[StreamSet]) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let pairs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.streams.len()).map(move |j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("training set has no streams"));
    }
    for s in data.iter().chain(val) {
        for z in &s.streams {
            if z.shape() != s.target.shape() {
                return Err(Error::invalid(format!("{}: stream/target shape mismatch", s.id)));
            }
        }
        if s.streams.is_empty() {
            return Err(Error::invalid(format!("{}: no streams", s.id)));
        }
    }
    let mut rng = rng_from(derive_path(cfg.seed, &[stream::DCNN, 1]));
    let mut model = model;
    let mut flat = model.params.to_flat();
    let mut adam = AdamState {
        m: vec![0.0; flat.len()],
        v: vec![0.0; flat.len()],
        t: 0,
    };
    let evaluate = |m: &DcnnModel| -> Result<f64> {
        if val.is_empty() {
            Ok(f64::NAN)
        } else {
            validation_loss(m, val)
        }
    };

    let mut best_val = evaluate(&model)?;
    let mut best = model.params.clone();
    let mut best_iteration = 0;
    let first = LossRecord {
        iteration: 0,
        train_mse: f64::NAN,
        val_mse: best_val,
    };
    let mut history = vec![first];
    let mut checkpoints = vec![first];
    let mut stale = 0;
    let mut window_loss = 0.0;
    let mut window_n = 0;
    let mut iterations = 0;

    for it in 1..=cfg.max_iterations {
        let batch: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| pairs[rng.random_range(0..pairs.len())])
            .collect();
        let results: Vec<(f64, Params)> = batch
            .par_iter()
            .map(|&(i, j)| {
                let s = &data[i];
                gradients(&model, &s.streams[j], &s.target, 1..=s.target.ncols())
            })
            .collect::<Result<_>>()?;
        let mut grad = Params::zeros(&cfg);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grad.add_assign(g);
        }
        loss /= batch.len() as f64;
        grad.scale(1.0 / batch.len() as f64);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at iteration {it} (learning rate {} may be too high)",
                cfg.learning_rate
            )));
        }
        let g = grad.to_flat();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (w, gi) in flat.iter_mut().zip(&g) {
                    *w -= cfg.learning_rate * gi;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                adam.t += 1;
                let c1 = 1.0 - B1.powi(adam.t);
                let c2 = 1.0 - B2.powi(adam.t);
                for i in 0..flat.len() {
                    adam.m[i] = B1 * adam.m[i] + (1.0 - B1) * g[i];
                    adam.v[i] = B2 * adam.v[i] + (1.0 - B2) * g[i] * g[i];
                    flat[i] -= cfg.learning_rate * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
        model.params.set_flat(&flat)?;
        iterations = it;
        window_loss += loss;
        window_n += 1;

        if it % cfg.eval_every == 0 || it == cfg.max_iterations {
            let v = evaluate(&model)?;
            if val.is_empty() {
                best = model.params.clone();
                best_iteration = it;
            }
            let rec = LossRecord {
                iteration: it,
                train_mse: window_loss / window_n as f64,
                val_mse: v,
            };
            history.push(rec);
            window_loss = 0.0;
            window_n = 0;
            if !val.is_empty() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("validation loss at iteration {it}")));
                }
                if v < best_val {
                    best_val = v;
                    best = model.params.clone();
                    best_iteration = it;
                    checkpoints.push(rec);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        log::debug!("early stop at iteration {it}, best {best_iteration}");
                        break;
                    }
                }
            }
        }
    }
    model.params = best;
    Ok(TrainOutcome {
        model,
        history,
        checkpoints,
        best_iteration,
        iterations,
    })
}

/// Checkpoint file: the configuration plus the flat weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: DcnnConfig,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &DcnnModel) -> Self {
        Checkpoint {
            config: model.config.clone(),
            weights: model.params.to_flat(),
        }
    }

    pub fn into_model(self) -> Result<DcnnModel> {
        let mut model = DcnnModel::zeros(self.config)?;
        model.params.set_flat(&self.weights)?;
        if !model.params.is_finite() {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        Ok(model)
    }
}

pub fn write_checkpoint(path: &Path, model: &DcnnModel) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &Checkpoint::from_model(model))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<DcnnModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let c: Checkpoint = serde_json::from_reader(BufReader::new(f))?;
    c.into_model()
}

/// `iteration,train_mse,val_mse`.
pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
