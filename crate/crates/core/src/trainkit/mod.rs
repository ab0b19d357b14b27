//! Optimisation, training loop, evaluation, grid search, embedding export
//! and attention benchmarks.

pub mod bench;
pub mod config;
pub mod grid;
pub mod metrics;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bench::{benchmark_attention, doubling_ratios, BenchConfig, BenchRow, Kernel, KERNELS};
pub use config::{RunConfig, SEED_ENV};
pub use grid::{staged_grid_search, GridResult, Stage, Trial, GRID};
pub use metrics::{compute_metrics, MetricsReport, SliceMetric};
pub use optim::{Adam, OptimizerConfig};

use crate::backbone::{DualCast, ForwardOutput};
use crate::data::{Batch, Dataset, NormStats, Prepared, WindowSet};
use crate::error::{Error, Result};
use crate::losses::{
    dbi_loss, environment_loss, filter_loss, prediction_loss, total_loss, Derangement, LossBreakdown, LossWeights,
};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::nn::Bound;
use crate::patterns::PatternCalendar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub pairing: Derangement,
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            loss: cfg.loss,
            optimizer: cfg.optimizer,
            pairing: cfg.pairing,
            seed: cfg.seed,
        }
    }
}

/// Mean loss terms over one epoch's batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_flt: f64,
    pub l_env: f64,
    pub l_dbi: f64,
    pub total: f64,
    pub val_rmse: f64,
}

pub fn write_epoch_log(log: &[EpochLog], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation RMSE.
    pub model: DualCast,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

/// Forward pass and weighted objective on one batch.
pub fn objective<'t>(
    model: &DualCast,
    p: &Bound<'t>,
    batch: &Batch,
    loss: &LossWeights,
    pairing: Derangement,
) -> Result<(Var<'t>, LossBreakdown, ForwardOutput<'t>)> {
    let tape = p.get(model.prototypes.psi).tape();
    let out = model.forward(p, tape.constant(batch.x.clone()), &batch.patterns)?;
    let l_pred = prediction_loss(out.x_hat, tape.constant(batch.y.clone()), loss.p_norm)?;
    let l_flt = filter_loss(out.g_i, out.g_e)?;
    let l_env = environment_loss(out.g_e, pairing)?;
    let l_dbi = dbi_loss(out.z_i, out.psi, &batch.patterns)?;
    let (total, breakdown) = total_loss(l_pred, l_flt, l_env, l_dbi, loss)?;
    Ok((total, breakdown, out))
}

pub fn train(model: DualCast, data: &Prepared, settings: &TrainSettings) -> Result<TrainOutcome> {
    train_observed(model, data, settings, |_, _, _, _| Ok(()))
}

/// Training loop; `observe(epoch, batch_index, batch, forward)` sees every
/// forward pass.
pub fn train_observed(
    mut model: DualCast,
    data: &Prepared,
    settings: &TrainSettings,
    mut observe: impl FnMut(usize, usize, &Batch, &ForwardOutput<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    settings.loss.validate()?;
    settings.optimizer.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Training("training and validation splits must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = Adam::new(&model.params, settings.optimizer);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(settings.optimizer.epochs);
    let mut best = (f64::INFINITY, 0, model.params.clone());
    for epoch in 1..=settings.optimizer.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0;
        for (bi, idx) in order.chunks(settings.optimizer.batch_size).enumerate() {
            let batch = data.train.batch(idx)?;
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let (total, b, out) = objective(&model, &p, &batch, &settings.loss, settings.pairing)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {bi}: {e}")))?;
            if !b.total.is_finite() {
                return Err(Error::Training(format!("epoch {epoch}, batch {bi}: non-finite loss {}", b.total)));
            }
            observe(epoch, bi, &batch, &out)?;
            let grads = tape.backward(total)?;
            adam.update(&mut model.params, &p.gradients(&grads))
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {bi}: {e}")))?;
            sums.l_pred += b.l_pred;
            sums.l_flt += b.l_flt;
            sums.l_env += b.l_env;
            sums.l_dbi += b.l_dbi;
            sums.total += b.total;
            batches += 1;
        }
        let val_rmse = evaluate(&model, &data.val, &data.stats, &data.calendar, settings.optimizer.batch_size)?.rmse;
        let n = batches as f64;
        log.push(EpochLog {
            epoch,
            l_pred: sums.l_pred / n,
            l_flt: sums.l_flt / n,
            l_env: sums.l_env / n,
            l_dbi: sums.l_dbi / n,
            total: sums.total / n,
            val_rmse,
        });
        if val_rmse < best.0 {
            best = (val_rmse, epoch, model.params.clone());
        }
    }
    let (best_val_rmse, best_epoch, params) = best;
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_rmse,
    })
}

/// Runs frozen forward passes over `set` in order, `batch_size` samples at a time.
pub fn for_each_batch(
    model: &DualCast,
    set: &WindowSet,
    batch_size: usize,
    mut f: impl FnMut(&[usize], &ForwardOutput<'_>) -> Result<()>,
) -> Result<()> {
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let batch = set.batch(idx)?;
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let out = model.forward(&p, tape.constant(batch.x), &batch.patterns)?;
        f(idx, &out)?;
    }
    Ok(())
}

fn stack(shape_tail: &[usize], rows: usize, data: Vec<f64>) -> Result<Tensor> {
    let mut shape = vec![rows];
    shape.extend_from_slice(shape_tail);
    Ok(Tensor::new(shape, data)?)
}

/// Denormalised `(S, T', N, C)` forecasts.
pub fn predict(model: &DualCast, set: &WindowSet, stats: &NormStats, batch_size: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    for_each_batch(model, set, batch_size, |_, out| {
        data.extend_from_slice(out.x_hat.value().data());
        Ok(())
    })?;
    let tail = [set.output_steps, set.nodes(), set.channels()];
    Ok(stats.inverse(&stack(&tail, set.len(), data)?))
}

/// Denormalised `(S, T', N, C)` targets.
pub fn targets(set: &WindowSet, stats: &NormStats) -> Result<Tensor> {
    let all: Vec<usize> = (0..set.len()).collect();
    Ok(stats.inverse(&set.batch(&all)?.y))
}

/// Last observed reading repeated over the output window.
pub fn persistence_forecast(set: &WindowSet, stats: &NormStats) -> Result<Tensor> {
    let (t, tp, n, c) = (set.input_steps, set.output_steps, set.nodes(), set.channels());
    let row = n * c;
    let mut data = Vec::with_capacity(set.len() * tp * row);
    for s in &set.samples {
        let last = (s.start + t - 1) * row;
        for _ in 0..tp {
            data.extend_from_slice(&set.readings.data()[last..last + row]);
        }
    }
    Ok(stats.inverse(&stack(&[tp, n, c], set.len(), data)?))
}

pub fn evaluate(
    model: &DualCast,
    set: &WindowSet,
    stats: &NormStats,
    calendar: &PatternCalendar,
    batch_size: usize,
) -> Result<MetricsReport> {
    let pred = predict(model, set, stats, batch_size)?;
    compute_metrics(&pred, &targets(set, stats)?, &set.samples, calendar)
}

/// One CSV row per sample: index, start timestamp, pattern, incident flag,
/// then `g^i` and `g^e`. Returns the row count.
pub fn export_embeddings(model: &DualCast, set: &WindowSet, batch_size: usize, out: impl Write) -> Result<usize> {
    let d = model.config.width;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string(), "start_timestamp".into(), "pattern".into(), "incident".into()];
    header.extend((0..d).map(|i| format!("gi_{i}")));
    header.extend((0..d).map(|i| format!("ge_{i}")));
    w.write_record(&header)?;
    let mut rows = 0;
    for_each_batch(model, set, batch_size, |idx, out| {
        let (gi, ge) = (out.g_i.value(), out.g_e.value());
        for (r, &i) in idx.iter().enumerate() {
            let s = &set.samples[i];
            let mut rec = vec![
                i.to_string(),
                s.start_timestamp.format("%Y-%m-%dT%H:%M:%S").to_string(),
                s.pattern.to_string(),
                s.incident.to_string(),
            ];
            rec.extend(gi.data()[r * d..(r + 1) * d].iter().map(f64::to_string));
            rec.extend(ge.data()[r * d..(r + 1) * d].iter().map(f64::to_string));
            w.write_record(&rec)?;
            rows += 1;
        }
        Ok(())
    })?;
    w.flush().map_err(csv::Error::from)?;
    Ok(rows)
}

const META_STATS: &str = "norm_stats";
const META_LOSS: &str = "loss";

/// Saves a trained model with its normalisation statistics and loss weights.
pub fn save_trained(model: &DualCast, dir: &Path, stats: &NormStats, loss: &LossWeights) -> Result<()> {
    let meta = BTreeMap::from([
        (META_STATS.to_string(), serde_json::to_string(stats)?),
        (META_LOSS.to_string(), serde_json::to_string(loss)?),
    ]);
    model.save(dir, &meta)
}

pub fn load_trained(dir: &Path) -> Result<(DualCast, NormStats)> {
    let (model, meta) = DualCast::load(dir)?;
    let stats = meta
        .get(META_STATS)
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks normalisation statistics".into()))?;
    Ok((model, serde_json::from_str(stats)?))
}

/// Prepares windows from `ds` and trains a fresh model under `cfg`.
pub fn train_on(cfg: &RunConfig, ds: &Dataset) -> Result<(TrainOutcome, Prepared)> {
    let data = crate::data::prepare(ds, cfg.model.input_steps, cfg.model.output_steps, &cfg.calendar)?;
    if ds.manifest.reading_channels != cfg.model.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, model expects {}",
            ds.manifest.reading_channels, cfg.model.channels
        )));
    }
    let model = DualCast::new(cfg.model.clone(), ds.graph.clone())?;
    let outcome = train(model, &data, &TrainSettings::from_run(cfg))?;
    Ok((outcome, data))
}
