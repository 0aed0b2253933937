//! Training: AdamW, the curriculum-gated loop, early stopping, checkpoints
//! and the multi-seed experiment runner.
//!
//! A run is a deterministic function of `(dataset, config, seed)`. The seed
//! derives independent streams for initialization, shuffling, gating and
//! paraphrase sampling, so switching the schedule never perturbs batch order,
//! and the gate consumes exactly one draw per sample regardless of outcome.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{gate, Branch, Schedule, ScheduleError, ScheduleKind};
use crate::dataset::{atomic_write, batch_indices, sample_paraphrases, Dataset, DatasetError};
use crate::metrics::{self, CiderConfig, MetricsError};
use crate::model::{
    augment_question, forward_rows, init_params, logits_raw_batch, register_params, ModelDims,
    ModelParams,
};
use crate::rng::{stream_rng, DOMAIN_GATE, DOMAIN_PARAPHRASE};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{NumError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u64, batch: u64 },
    #[error("non-finite gradient for parameter {param} at epoch {epoch}, batch {batch}")]
    NonFiniteGrad {
        param: &'static str,
        epoch: u64,
        batch: u64,
    },
}

/// Which task metric to monitor and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Cider,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Accuracy => write!(f, "accuracy"),
            MetricKind::Cider => write!(f, "cider"),
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "cider" => Ok(MetricKind::Cider),
            other => Err(format!("unknown metric {other:?} (accuracy|cider)")),
        }
    }
}

/// Threshold policy with an optional horizon; a missing horizon resolves to
/// the run length (epochs for fixed/linear, total steps for cosine).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePolicy {
    pub kind: ScheduleKind,
    pub t_max: f64,
    pub t_min: f64,
    #[serde(default)]
    pub horizon: Option<u64>,
}

impl SchedulePolicy {
    pub fn fixed(t: f64) -> Self {
        SchedulePolicy {
            kind: ScheduleKind::Fixed,
            t_max: t,
            t_min: t,
            horizon: None,
        }
    }

    pub fn linear(t_max: f64, t_min: f64) -> Self {
        SchedulePolicy {
            kind: ScheduleKind::LinearPerEpoch,
            t_max,
            t_min,
            horizon: None,
        }
    }

    pub fn cosine(t_max: f64, t_min: f64) -> Self {
        SchedulePolicy {
            kind: ScheduleKind::CosinePerStep,
            t_max,
            t_min,
            horizon: None,
        }
    }

    pub fn resolve(&self, max_epochs: u64, steps_per_epoch: u64) -> Result<Schedule, ScheduleError> {
        let horizon = self.horizon.unwrap_or(match self.kind {
            ScheduleKind::Fixed | ScheduleKind::LinearPerEpoch => max_epochs,
            ScheduleKind::CosinePerStep => max_epochs * steps_per_epoch.max(1),
        });
        Schedule::validated(self.kind, self.t_max, self.t_min, horizon)
    }
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub patience: u64,
    pub n_paraphrases: usize,
    pub schedule: SchedulePolicy,
    pub seeds: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub metric: MetricKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            max_epochs: 40,
            patience: 5,
            n_paraphrases: 2,
            schedule: SchedulePolicy::linear(0.8, 0.4),
            seeds: vec![1, 2, 3, 4, 5],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            metric: MetricKind::Accuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(TrainError::InvalidConfig(format!(
                "patience must be in 1..=max_epochs ({})",
                self.max_epochs
            )));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::InvalidConfig("seeds must be nonempty".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidConfig("betas must be in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig(
                "epsilon must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(dims: &ModelDims) -> Self {
        OptimizerState {
            m: ModelParams::zeros(dims),
            v: ModelParams::zeros(dims),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay update:
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`
/// with bias-corrected moments. Gradients must be finite.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads.named() {
        if !g.is_all_finite() {
            return Err(TrainError::NonFiniteGrad {
                param: name,
                epoch: 0,
                batch: 0,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = T::of_f64(config.learning_rate);
    let beta1 = T::of_f64(config.beta1);
    let beta2 = T::of_f64(config.beta2);
    let one_m_beta1 = T::of_f64(1.0 - config.beta1);
    let one_m_beta2 = T::of_f64(1.0 - config.beta2);
    let eps = T::of_f64(config.epsilon);
    let wd = T::of_f64(config.weight_decay);
    let bc1 = T::of_f64(1.0 - config.beta1.powi(t));
    let bc2 = T::of_f64(1.0 - config.beta2.powi(t));

    let param_mats = params.named_mut();
    let m_mats = state.m.named_mut();
    let v_mats = state.v.named_mut();
    let g_mats = grads.named();
    for (((p, m), v), g) in param_mats
        .into_iter()
        .zip(m_mats)
        .zip(v_mats)
        .zip(g_mats)
    {
        let p = p.1.data_mut();
        let m = m.1.data_mut();
        let v = v.1.data_mut();
        let g = g.1.data();
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + one_m_beta1 * gi;
            v[i] = beta2 * v[i] + one_m_beta2 * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Patience-based stopper maximizing a dev metric. Ties do not count as
/// improvements, so a plateau burns patience.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: u64,
    best: Option<f64>,
    best_epoch: u64,
    bad_epochs: u64,
}

impl EarlyStopping {
    pub fn new(patience: u64) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Record one epoch's metric; returns true when it improved on the best.
    pub fn observe(&mut self, epoch: u64, metric: f64) -> bool {
        match self.best {
            Some(best) if metric <= best => {
                self.bad_epochs += 1;
                false
            }
            _ => {
                self.best = Some(metric);
                self.best_epoch = epoch;
                self.bad_epochs = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best_epoch(&self) -> u64 {
        self.best_epoch
    }
}

/// Where the patience rule lands on a full metric sequence: index of the best
/// epoch (first maximum) and the index of the epoch after which training
/// stops, if it stops before the sequence ends.
pub fn early_stop_plan(metrics: &[f64], patience: u64) -> (usize, Option<usize>) {
    let mut stopper = EarlyStopping::new(patience);
    for (epoch, &m) in metrics.iter().enumerate() {
        stopper.observe(epoch as u64, m);
        if stopper.should_stop() {
            return (stopper.best_epoch() as usize, Some(epoch));
        }
    }
    (stopper.best_epoch() as usize, None)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Per-epoch log record. `wall_ms` is the only non-deterministic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Threshold at the start of the epoch (per-step schedules keep moving
    /// within it).
    pub t_thresh: f64,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub augmented_count: u64,
    pub wall_ms: u64,
}

/// Outcome of a single-seed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: u64,
    pub best_dev_metric: f64,
    pub test_metric: f64,
}

/// Aggregate over seeds. `mean`/`std` are the population statistics of the
/// per-seed final test metrics and are recomputable from `runs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub metric: MetricKind,
    pub runs: Vec<SeedRun>,
    pub failures: Vec<(u64, String)>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Best-epoch parameters plus the run trace.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub params: ModelParams<T>,
    pub best_epoch: u64,
    pub best_dev_metric: f64,
    pub epochs: Vec<EpochLog>,
}

fn check_dataset_dims(data: &Dataset, dims: &ModelDims) -> Result<(), TrainError> {
    if data.header.d_img != dims.d_img
        || data.header.d_text != dims.d_text
        || data.header.num_classes != dims.num_classes
    {
        return Err(TrainError::InvalidConfig(format!(
            "dataset dims (d_img={}, d_text={}, C={}) do not match model dims (d_img={}, d_text={}, C={})",
            data.header.d_img, data.header.d_text, data.header.num_classes,
            dims.d_img, dims.d_text, dims.num_classes
        )));
    }
    Ok(())
}

/// Train one seed: curriculum-gated epochs with dev evaluation (raw branch
/// only), early stopping on the dev metric, parameters returned from the
/// best-dev epoch.
pub fn train_one<T: Scalar>(
    train: &Dataset,
    dev: &Dataset,
    dims: &ModelDims,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel<T>, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    check_dataset_dims(train, dims)?;
    check_dataset_dims(dev, dims)?;

    let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let schedule = config.schedule.resolve(config.max_epochs, steps_per_epoch)?;

    // Pool exhaustion must surface before epoch 1, not mid-run.
    if config.n_paraphrases > 0 && schedule.t_max > 0.0 {
        let min_pool = train.min_pool_size();
        if config.n_paraphrases > min_pool {
            return Err(DatasetError::PoolExhausted {
                requested: config.n_paraphrases,
                available: min_pool,
            }
            .into());
        }
    }

    let mut params: ModelParams<T> = init_params(dims, seed);
    let mut state = OptimizerState::new(dims);
    let mut gate_rng = stream_rng(seed, DOMAIN_GATE, 0);
    let mut para_rng = stream_rng(seed, DOMAIN_PARAPHRASE, 0);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<TrainedModel<T>> = None;
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut global_step: u64 = 0;
    let per_step = schedule.kind == ScheduleKind::CosinePerStep;

    for epoch in 0..config.max_epochs {
        let epoch_start = Instant::now();
        let epoch_t = schedule.threshold_at(epoch, global_step);
        let mut loss_sum = 0.0f64;
        let mut augmented_count = 0u64;

        let batches = batch_indices(train.len(), config.batch_size, epoch, seed);
        for (batch_idx, batch) in batches.iter().enumerate() {
            let t_now = if per_step {
                schedule.threshold_at(epoch, global_step)
            } else {
                epoch_t
            };

            // Per-sample gating; the gate draw happens for every sample so
            // the stream stays aligned across configurations.
            let mut augmented: Vec<(usize, Vec<&[f32]>)> = Vec::new();
            let mut raw: Vec<usize> = Vec::new();
            for &i in batch {
                let decision = gate(t_now, &mut gate_rng);
                if config.n_paraphrases > 0 && decision.branch == Branch::Augmented {
                    let ps =
                        sample_paraphrases(&train.records[i], config.n_paraphrases, &mut para_rng)?;
                    augmented.push((i, ps));
                } else {
                    raw.push(i);
                }
            }
            augmented_count += augmented.len() as u64;

            let mut tape: Tape<T> = Tape::new();
            let vars = register_params(&mut tape, &params, true);
            let mut branch_losses = Vec::new();

            if !augmented.is_empty() {
                let images = tape.leaf(
                    Tensor::from_f32_rows(
                        augmented.iter().map(|(i, _)| train.records[*i].image_embed.as_slice()),
                        dims.d_img,
                    )?,
                    false,
                );
                let e_o = tape.leaf(
                    Tensor::from_f32_rows(
                        augmented
                            .iter()
                            .map(|(i, _)| train.records[*i].question_embed.as_slice()),
                        dims.d_text,
                    )?,
                    false,
                );
                let paras = tape.leaf(
                    Tensor::from_f32_rows(
                        augmented.iter().flat_map(|(_, ps)| ps.iter().copied()),
                        dims.d_text,
                    )?,
                    false,
                );
                let q_final = augment_question(&mut tape, &vars, e_o, paras, config.n_paraphrases)?;
                let logits = forward_rows(&mut tape, &vars, images, q_final)?;
                let labels: Vec<usize> = augmented
                    .iter()
                    .map(|(i, _)| train.records[*i].answer_id as usize)
                    .collect();
                branch_losses.push(tape.cross_entropy_sum(logits, &labels)?);
            }

            if !raw.is_empty() {
                let images = tape.leaf(
                    Tensor::from_f32_rows(
                        raw.iter().map(|&i| train.records[i].image_embed.as_slice()),
                        dims.d_img,
                    )?,
                    false,
                );
                let questions = tape.leaf(
                    Tensor::from_f32_rows(
                        raw.iter().map(|&i| train.records[i].question_embed.as_slice()),
                        dims.d_text,
                    )?,
                    false,
                );
                let logits = forward_rows(&mut tape, &vars, images, questions)?;
                let labels: Vec<usize> =
                    raw.iter().map(|&i| train.records[i].answer_id as usize).collect();
                branch_losses.push(tape.cross_entropy_sum(logits, &labels)?);
            }

            let loss_total = match branch_losses.len() {
                1 => branch_losses[0],
                _ => tape.add(branch_losses[0], branch_losses[1])?,
            };
            // Mean over the batch, short final batches included.
            let loss = tape.scale(loss_total, T::of_f64(1.0 / batch.len() as f64))?;
            let loss_value = tape.scalar_value(loss)?.as_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx as u64,
                });
            }
            tape.backward(loss)?;

            let grads = ModelParams {
                w_i: tape.take_grad(vars.w_i).expect("gradient"),
                w_q: tape.take_grad(vars.w_q).expect("gradient"),
                w_f: tape.take_grad(vars.w_f).expect("gradient"),
                w_cls: tape.take_grad(vars.w_cls).expect("gradient"),
                w_p: tape.take_grad(vars.w_p).expect("gradient"),
                w_o: tape.take_grad(vars.w_o).expect("gradient"),
                w_out: tape.take_grad(vars.w_out).expect("gradient"),
            };
            drop(tape);
            adamw_step(&mut params, &grads, &mut state, config).map_err(|e| match e {
                TrainError::NonFiniteGrad { param, .. } => TrainError::NonFiniteGrad {
                    param,
                    epoch,
                    batch: batch_idx as u64,
                },
                other => other,
            })?;

            loss_sum += loss_value * batch.len() as f64;
            global_step += 1;
        }

        let dev_metric = evaluate(&params, dev, dims, config.metric)?;
        let improved = stopper.observe(epoch, dev_metric);
        if improved {
            best = Some(TrainedModel {
                params: params.clone(),
                best_epoch: epoch,
                best_dev_metric: dev_metric,
                epochs: Vec::new(),
            });
        }
        epochs.push(EpochLog {
            epoch,
            t_thresh: epoch_t,
            train_loss: loss_sum / train.len() as f64,
            dev_metric,
            augmented_count,
            wall_ms: epoch_start.elapsed().as_millis() as u64,
        });
        log::debug!(
            "seed {seed} epoch {epoch}: t={epoch_t:.4} loss={:.6} dev={dev_metric:.4} aug={augmented_count}",
            loss_sum / train.len() as f64
        );
        if stopper.should_stop() {
            break;
        }
    }

    let mut model = best.expect("at least one epoch ran");
    model.epochs = epochs;
    Ok(model)
}

/// Evaluate on a split. Inference activates only the raw branch; paraphrase
/// pools are never read.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    data: &Dataset,
    dims: &ModelDims,
    metric: MetricKind,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    check_dataset_dims(data, dims)?;
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.records.chunks(256) {
        let refs: Vec<&crate::dataset::SampleRecord> = chunk.iter().collect();
        let logits = logits_raw_batch(params, dims, &refs)?;
        predictions.extend(logits.argmax_rows());
    }
    let labels: Vec<usize> = data.records.iter().map(|r| r.answer_id as usize).collect();
    match metric {
        MetricKind::Accuracy => Ok(metrics::accuracy(&predictions, &labels)?),
        MetricKind::Cider => {
            let candidates: Vec<String> = predictions
                .iter()
                .map(|&p| data.header.answer_vocab[p].clone())
                .collect();
            let references: Vec<Vec<String>> = data
                .records
                .iter()
                .map(|r| vec![r.answer_text.clone()])
                .collect();
            Ok(metrics::cider(&candidates, &references, &CiderConfig::default())?)
        }
    }
}

/// Train every seed and aggregate the final test metrics. Seeds run
/// independently; `jobs` bounds how many run concurrently. A failing seed is
/// reported while the remaining seeds still complete.
pub fn run_experiment<T: Scalar>(
    train: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    dims: &ModelDims,
    config: &TrainConfig,
    jobs: usize,
) -> Result<RunResult, TrainError> {
    config.validate()?;
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let jobs = jobs.max(1);
    let mut outcomes: Vec<Option<Result<SeedRun, String>>> = (0..config.seeds.len()).map(|_| None).collect();

    for wave in config.seeds.chunks(jobs).enumerate() {
        let (wave_idx, seeds) = wave;
        let base = wave_idx * jobs;
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    scope.spawn(move || -> Result<SeedRun, String> {
                        let trained: TrainedModel<T> =
                            train_one(train, dev, dims, config, seed).map_err(|e| e.to_string())?;
                        let test_metric = evaluate(&trained.params, test, dims, config.metric)
                            .map_err(|e| e.to_string())?;
                        Ok(SeedRun {
                            seed,
                            epochs: trained.epochs,
                            best_epoch: trained.best_epoch,
                            best_dev_metric: trained.best_dev_metric,
                            test_metric,
                        })
                    })
                })
                .collect();
            for (offset, handle) in handles.into_iter().enumerate() {
                outcomes[base + offset] = Some(handle.join().expect("seed thread panicked"));
            }
        });
    }

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in config.seeds.iter().zip(outcomes) {
        match outcome.expect("all seeds ran") {
            Ok(run) => runs.push(run),
            Err(message) => failures.push((*seed, message)),
        }
    }
    let metrics: Vec<f64> = runs.iter().map(|r| r.test_metric).collect();
    let (mean, std) = mean_std(&metrics);
    Ok(RunResult {
        metric: config.metric,
        runs,
        failures,
        mean,
        std,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 7] = b"CAVCKPT";
pub const CKPT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated or corrupt: {0}")]
    Integrity(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint dims invalid: {0}")]
    BadDims(String),
}

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

/// Serialize parameters (as f32), dims and key/value metadata. The payload
/// length trailer guards against truncation.
pub fn encode_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    dims: &ModelDims,
    metadata: &BTreeMap<String, String>,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let payload_start = buf.len();

    put_u32(&mut buf, dims.d as u32);
    put_u32(&mut buf, dims.d_img as u32);
    put_u32(&mut buf, dims.d_text as u32);
    put_u32(&mut buf, dims.num_classes as u32);
    put_u32(&mut buf, metadata.len() as u32);
    for (k, v) in metadata {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    let named = params.named();
    put_u32(&mut buf, named.len() as u32);
    for (name, tensor) in named {
        put_str(&mut buf, name);
        put_u32(&mut buf, tensor.rows() as u32);
        put_u32(&mut buf, tensor.cols() as u32);
        for &x in tensor.data() {
            buf.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    let payload_len = (buf.len() - payload_start) as u64;
    buf.extend_from_slice(&payload_len.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Integrity(format!(
                "unexpected end of data reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|e| CheckpointError::Integrity(format!("{what} not utf-8: {e}")))
    }
}

pub fn decode_checkpoint<T: Scalar>(
    buf: &[u8],
) -> Result<(ModelParams<T>, ModelDims, BTreeMap<String, String>), CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(CKPT_MAGIC.len(), "magic")? != CKPT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let vb = r.take(2, "version")?;
    let version = u16::from_le_bytes([vb[0], vb[1]]);
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let payload_start = r.pos;
    if buf.len() < payload_start + 8 {
        return Err(CheckpointError::Integrity("missing length trailer".into()));
    }
    let trailer = &buf[buf.len() - 8..];
    let declared = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let actual = (buf.len() - 8 - payload_start) as u64;
    if declared != actual {
        return Err(CheckpointError::Integrity(format!(
            "payload length {actual} does not match trailer {declared}"
        )));
    }

    let d = r.u32("dims.d")? as usize;
    let d_img = r.u32("dims.d_img")? as usize;
    let d_text = r.u32("dims.d_text")? as usize;
    let num_classes = r.u32("dims.num_classes")? as usize;
    let dims = ModelDims::new(d, d_img, d_text, num_classes)
        .map_err(|e| CheckpointError::BadDims(e.to_string()))?;

    let meta_len = r.u32("metadata count")?;
    let mut metadata = BTreeMap::new();
    for _ in 0..meta_len {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        metadata.insert(k, v);
    }

    let n_mats = r.u32("matrix count")?;
    let mut params: ModelParams<T> = ModelParams::zeros(&dims);
    let mut seen = Vec::new();
    for _ in 0..n_mats {
        let name = r.string("matrix name")?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let raw = r.take(4 * rows * cols, "matrix data")?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let tensor = Tensor::from_vec(rows, cols, data)
            .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
        let slot = match name.as_str() {
            "W_I" => &mut params.w_i,
            "W_Q" => &mut params.w_q,
            "W_F" => &mut params.w_f,
            "W_CLS" => &mut params.w_cls,
            "W_P" => &mut params.w_p,
            "W_O" => &mut params.w_o,
            "W_out" => &mut params.w_out,
            other => {
                return Err(CheckpointError::Integrity(format!(
                    "unknown parameter {other:?}"
                )))
            }
        };
        if slot.shape() != (rows, cols) {
            return Err(CheckpointError::Integrity(format!(
                "parameter {name} has shape {rows}x{cols}, dims imply {:?}",
                slot.shape()
            )));
        }
        *slot = tensor;
        seen.push(name);
    }
    for required in crate::model::PARAM_NAMES {
        if !seen.iter().any(|s| s == required) {
            return Err(CheckpointError::MissingParam(required.to_string()));
        }
    }
    if r.pos != buf.len() - 8 {
        return Err(CheckpointError::Integrity("trailing bytes in payload".into()));
    }
    Ok((params, dims, metadata))
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    dims: &ModelDims,
    metadata: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params, dims, metadata);
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ModelParams<T>, ModelDims, BTreeMap<String, String>), CheckpointError> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}
