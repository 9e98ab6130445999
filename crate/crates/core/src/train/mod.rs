//! Training loop, optimizers, evaluation and metrics logging.

mod eval;
mod optim;

use std::io::Write;
use std::time::Instant;

use crate::data::{iterate_batches, plan_epoch, Batch, CorpusManifest, LoaderConfig, PlanConfig};
use crate::error::{Error, Result};
use crate::models::{loss_and_grads, warm_up_swap, ModelConfig, ModelState, OutputMode, ResNet3DConfig};

pub use eval::{
    evaluate, CityScore, ErrorAccumulator, Evaluation, REFERENCE_CORE_MSE, REFERENCE_CORE_UNET_BASELINE,
    REFERENCE_EXTENDED_AVERAGE_BASELINE, REFERENCE_EXTENDED_MSE,
};
pub use optim::{adam_step, sgd_step, Optimizer, OptimizerState};

pub const METRICS_HEADER: &str = "epoch,step,city,train_mse,wall_seconds,batches_per_second,nnz_rate";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Epochs with the one-layer output block before switching to the
    /// sequential block. Only valid for sequential residual networks.
    pub warm_up_epochs: usize,
    /// Timing fields are written as zero so that metrics are reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            optimizer: Optimizer::ADAM,
            seed: 0,
            warm_up_epochs: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One row of the metrics CSV, written at the end of each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// The city of every batch in the epoch, or `all` for a mixed epoch.
    pub city: String,
    /// Mean batch loss over the epoch.
    pub train_mse: f64,
    /// Since the start of the run.
    pub wall_seconds: f64,
    pub batches_per_second: f64,
    /// Mean batch non-zero rate.
    pub nnz_rate: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.city, self.train_mse, self.wall_seconds, self.batches_per_second, self.nnz_rate
        )
    }
}

/// Header plus one row per record.
pub fn write_metrics_csv(out: &mut impl Write, records: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Yields the batches of each epoch.
pub trait EpochSource {
    /// `epoch` is 0-based.
    fn batches(&mut self, epoch: usize) -> Result<Box<dyn Iterator<Item = Result<Batch>> + '_>>;
}

/// The same batches every epoch.
#[derive(Clone, Debug)]
pub struct FixedBatches(pub Vec<Batch>);

impl EpochSource for FixedBatches {
    fn batches(&mut self, _epoch: usize) -> Result<Box<dyn Iterator<Item = Result<Batch>> + '_>> {
        Ok(Box::new(self.0.iter().cloned().map(Ok)))
    }
}

/// A fresh two-stage plan per epoch, streamed through the loader.
#[derive(Clone, Debug)]
pub struct CorpusEpochs {
    pub manifest: CorpusManifest,
    pub seed: u64,
    pub plan: PlanConfig,
    pub loader: LoaderConfig,
}

impl CorpusEpochs {
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

impl EpochSource for CorpusEpochs {
    fn batches(&mut self, epoch: usize) -> Result<Box<dyn Iterator<Item = Result<Batch>> + '_>> {
        let plan = plan_epoch(&self.manifest, self.epoch_seed(epoch), self.plan)?;
        Ok(Box::new(iterate_batches(&plan, self.loader)?))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot after the epoch with the lowest training MSE; the initial
    /// state when no epoch ran.
    pub best: ModelState<f32>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub last: ModelState<f32>,
    pub records: Vec<MetricsRecord>,
}

/// Trains a fresh model drawn from `config.seed`, with a warm-up phase when
/// `config.warm_up_epochs > 0`.
pub fn train(model: ModelConfig, config: &TrainConfig, source: &mut dyn EpochSource) -> Result<TrainOutcome> {
    if config.warm_up_epochs > 0 {
        let ModelConfig::ResNet(c) = model else {
            return Err(Error::InvalidConfig("warm-up needs a residual network".into()));
        };
        return Ok(warm_up_train(c, config, source)?.phase2);
    }
    train_state(ModelState::init(model, config.seed)?, config, source)
}

/// Runs `config.epochs` epochs from `state`.
pub fn train_state(state: ModelState<f32>, config: &TrainConfig, source: &mut dyn EpochSource) -> Result<TrainOutcome> {
    run(state, config, config.epochs, 0, source)
}

fn run(
    mut state: ModelState<f32>,
    config: &TrainConfig,
    epochs: usize,
    epoch_offset: usize,
    source: &mut dyn EpochSource,
) -> Result<TrainOutcome> {
    config.validate()?;
    state.validate()?;
    let mut opt = OptimizerState::new(config.optimizer, &state.params);
    let start = Instant::now();
    let mut records = Vec::with_capacity(epochs);
    let mut best = (f64::INFINITY, 0, state.clone());
    for e in 0..epochs {
        let epoch_start = Instant::now();
        let (mut loss_sum, mut nnz_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut city: Option<String> = None;
        for batch in source.batches(epoch_offset + e)? {
            let batch = batch?;
            if batch.samples.len() > config.batch_size {
                return Err(Error::shape(
                    "train",
                    "batch size",
                    config.batch_size,
                    batch.samples.len(),
                ));
            }
            let lg = loss_and_grads(&state, &batch.input, &batch.target)?;
            if !lg.loss.is_finite() {
                return Err(Error::Divergence {
                    step: state.step,
                    loss: lg.loss,
                });
            }
            opt.step(&mut state.params, &lg.grads, config.learning_rate)?;
            state.step += 1;
            loss_sum += lg.loss;
            nnz_sum += batch.nnz_rate();
            batches += 1;
            match &city {
                None => city = Some(batch.city().to_owned()),
                Some(c) if batch.samples.iter().any(|s| *s.city != **c) => city = Some("all".into()),
                Some(_) => {}
            }
        }
        if batches == 0 {
            return Err(Error::InvalidConfig(format!("epoch {} produced no batches", e + 1)));
        }
        let train_mse = loss_sum / batches as f64;
        let (wall, rate) = if config.deterministic {
            (0.0, 0.0)
        } else {
            let dt = epoch_start.elapsed().as_secs_f64();
            (start.elapsed().as_secs_f64(), batches as f64 / dt)
        };
        let epoch = epoch_offset + e + 1;
        records.push(MetricsRecord {
            epoch,
            step: state.step,
            city: city.unwrap_or_default(),
            train_mse,
            wall_seconds: wall,
            batches_per_second: rate,
            nnz_rate: nnz_sum / batches as f64,
        });
        if train_mse < best.0 {
            best = (train_mse, epoch, state.clone());
        }
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        last: state,
        records,
    })
}

#[derive(Clone, Debug)]
pub struct WarmUpOutcome {
    /// Training with the one-layer output block.
    pub phase1: TrainOutcome,
    /// `phase1.last` with a fresh sequential output block.
    pub swapped: ModelState<f32>,
    /// Training with the sequential output block; its records continue the
    /// epoch numbering of phase 1 and include them.
    pub phase2: TrainOutcome,
}

/// Trains the one-layer-output variant of `model` for `warm_up_epochs`, swaps
/// in a sequential output block and trains `epochs` more epochs.
pub fn warm_up_train(
    model: ResNet3DConfig,
    config: &TrainConfig,
    source: &mut dyn EpochSource,
) -> Result<WarmUpOutcome> {
    if config.warm_up_epochs == 0 {
        return Err(Error::InvalidConfig("warm-up training needs warm_up_epochs > 0".into()));
    }
    if model.output_mode != OutputMode::Sequential {
        return Err(Error::InvalidConfig(
            "warm-up training targets the sequential output block".into(),
        ));
    }
    let phase1_model = ModelConfig::ResNet(ResNet3DConfig {
        output_mode: OutputMode::ConvOutput,
        ..model
    });
    let phase1 = run(
        ModelState::init(phase1_model, config.seed)?,
        config,
        config.warm_up_epochs,
        0,
        source,
    )?;
    let swapped = warm_up_swap(&phase1.last, config.seed.wrapping_add(1))?;
    let mut phase2 = run(swapped.clone(), config, config.epochs, config.warm_up_epochs, source)?;
    let mut records = phase1.records.clone();
    records.append(&mut phase2.records);
    phase2.records = records;
    Ok(WarmUpOutcome {
        phase1,
        swapped,
        phase2,
    })
}
