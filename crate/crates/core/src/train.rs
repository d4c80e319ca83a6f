//! Behavioral-cloning training: seeded minibatch loop with per-source
//! validation tracking, multi-seed reruns, and the lowest-average-MSE
//! model-selection rule.
//!
//! Training is bit-deterministic: the config and its seed fully determine
//! the initialization, the epoch shuffles, every dropout mask, and therefore
//! the final parameters and history. Wall time is recorded in memory but
//! never serialized, so result documents are byte-stable across reruns.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{mix_equal, split, Dataset, DatasetError, MixSpec, Sample, DEFAULT_VAL_FRACTION};
use crate::nn::{
    adam_step, apply_bn_updates, model_backward, model_forward, mse_loss, AdamConfig, AdamState,
    ModelConfig, ModelParams, NnError, RunMode, Tensor,
};
use crate::preprocess::INPUT_LEN;
use crate::render::Domain;
use crate::rng::{derive, derive_idx, CounterRng};

/// Default epoch count.
pub const DEFAULT_EPOCHS: usize = 50;
/// Default minibatch size.
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Default number of differently-seeded reruns in a sweep.
pub const DEFAULT_SEED_COUNT: usize = 5;
/// Samples per forward chunk when computing Eval-mode MSE.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad training config: {0}")]
    BadConfig(String),
}

/// Adam hyperparameters in config form; defaults match [`AdamConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSettings {
    fn default() -> OptimSettings {
        let a = AdamConfig::default();
        OptimSettings { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

impl OptimSettings {
    fn to_adam(self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

/// Everything one training run depends on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Source files and draw counts, for the file-based entry point
    /// [`train_model`]. `None` when the caller supplies a dataset directly.
    #[serde(default)]
    pub mix: Option<MixSpec>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimSettings,
    #[serde(default)]
    pub model: ModelConfig,
    pub seed: u64,
    /// Share of the dataset held out for per-epoch validation tracking.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Seed of the train/validation split; derived from `seed` when absent.
    /// Multi-seed sweeps pin it to the base seed so every run scores the
    /// same validation subsets and only the weights differ.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(
                "batch size must be at least 2 (batch normalization needs two samples)".into(),
            ));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainHistory {
    /// Mean Train-mode loss over the samples seen each epoch.
    pub train_loss: Vec<f64>,
    /// Eval-mode MSE per validation source after each epoch.
    pub val_mse: Vec<BTreeMap<String, f64>>,
    /// Wall time of the run; in-memory only, so serialized results stay
    /// byte-identical across reruns.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainHistory {
    /// The last epoch's per-source validation MSEs.
    pub fn final_val(&self) -> &BTreeMap<String, f64> {
        self.val_mse.last().expect("history has at least one epoch")
    }
}

/// The seeded weight initialization a run starts from.
pub fn initial_params(model: &ModelConfig, train_seed: u64) -> ModelParams<f32> {
    ModelParams::init(model, derive(train_seed, "init"))
}

/// Pack borrowed samples into `(inputs [N,C,H,W], targets [N,2])`.
fn batch_xy(samples: &[&Sample]) -> (Tensor<f32>, Tensor<f32>) {
    let n = samples.len();
    let (c, h, w) = (
        crate::preprocess::INPUT_CHANNELS,
        crate::preprocess::INPUT_HEIGHT,
        crate::preprocess::INPUT_WIDTH,
    );
    let mut x = Tensor::<f32>::zeros(&[n, c, h, w]);
    let mut y = Tensor::<f32>::zeros(&[n, 2]);
    for (i, s) in samples.iter().enumerate() {
        x.data[i * INPUT_LEN..(i + 1) * INPUT_LEN].copy_from_slice(&s.input.data);
        y.data[2 * i] = s.action[0];
        y.data[2 * i + 1] = s.action[1];
    }
    (x, y)
}

/// Eval-mode mean squared error of the model over `samples` (mean over all
/// samples and both outputs), accumulated in 64-bit.
pub fn eval_mse(
    model: &ModelConfig,
    params: &ModelParams<f32>,
    samples: &[Sample],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::BadConfig("cannot average an error over zero samples".into()));
    }
    let mut sq_sum = 0.0f64;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = batch_xy(&refs);
        let (pred, _) = model_forward(model, params, &x, RunMode::Eval, 0)?;
        let (mse, _) = mse_loss(&pred, &y)?;
        sq_sum += mse * (chunk.len() as f64);
    }
    Ok(sq_sum / samples.len() as f64)
}

/// Group a dataset's samples by domain name.
pub fn by_source(samples: &[Sample]) -> BTreeMap<String, Vec<Sample>> {
    let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        let name = Domain::from_id(s.domain_id).map_or("UNKNOWN", Domain::name);
        groups.entry(name.to_string()).or_default().push(s.clone());
    }
    groups
}

/// Train on an already-assembled dataset.
///
/// The run splits off a validation share first (seeded, frozen for the whole
/// run), then iterates epochs of seeded-shuffle minibatch SGD with Adam:
/// Train-mode forward/backward, optimizer step, and the batch-normalization
/// running-stat fold, in that fixed order. A final batch shorter than two
/// samples is dropped (batch normalization cannot standardize a single
/// sample). After every epoch the Eval-mode MSE is recorded on each
/// per-source validation subset.
pub fn train_on(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainHistory), TrainError> {
    cfg.validate()?;
    let started = Instant::now();

    let split_seed = cfg.split_seed.unwrap_or_else(|| derive(cfg.seed, "split"));
    let (train_ds, val_ds) = split(ds, cfg.val_fraction, split_seed)?;
    let val_by_source = by_source(&val_ds.samples);

    let mut params = initial_params(&cfg.model, cfg.seed);
    let mut adam = AdamState::new_for(&params.trainable());
    let adam_cfg = cfg.optimizer.to_adam();
    let shuffle_base = derive(cfg.seed, "shuffle");
    let dropout_base = derive(cfg.seed, "dropout");

    let mut history =
        TrainHistory { train_loss: Vec::with_capacity(cfg.epochs), val_mse: Vec::with_capacity(cfg.epochs), wall_time_s: 0.0 };
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        CounterRng::new(derive_idx(shuffle_base, epoch as u64)).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_ds.samples[i]).collect();
            let (x, y) = batch_xy(&refs);
            let (pred, cache) =
                model_forward(&cfg.model, &params, &x, RunMode::Train, derive_idx(dropout_base, step))?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            let grads = model_backward(&cfg.model, &params, &cache, &grad)?;
            adam_step(&mut params, &grads, &mut adam, &adam_cfg);
            apply_bn_updates(&mut params, &cache);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        if seen == 0 {
            return Err(TrainError::BadConfig(format!(
                "no trainable batches: {} training samples at batch size {}",
                train_ds.len(),
                cfg.batch_size
            )));
        }
        history.train_loss.push(loss_sum / seen as f64);

        let mut row = BTreeMap::new();
        for (name, subset) in &val_by_source {
            row.insert(name.clone(), eval_mse(&cfg.model, &params, subset)?);
        }
        history.val_mse.push(row);
    }

    history.wall_time_s = started.elapsed().as_secs_f64();
    Ok((params, history))
}

/// Mix the configured sources, then train on the result.
pub fn train_model(cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainHistory), TrainError> {
    let mix = cfg
        .mix
        .as_ref()
        .ok_or_else(|| TrainError::BadConfig("config lists no dataset sources to mix".into()))?;
    let ds = mix_equal(mix)?;
    train_on(&ds, cfg)
}

/// Unweighted mean of a per-source MSE row.
pub fn source_average(row: &BTreeMap<String, f64>) -> f64 {
    row.values().sum::<f64>() / row.len() as f64
}

/// Round to four decimals, the precision used in reports.
///
/// Rounds half away from zero with a tiny tolerance below the halfway
/// point, so that averages of four-decimal report values round the way
/// their exact decimal arithmetic would instead of being flipped by
/// float representation dust (e.g. a true mean of 0.147250 must report
/// 0.1473 even though the nearest double sits fractionally below it).
pub fn round4(x: f64) -> f64 {
    (x * 10_000.0 + 1e-6 * x.signum()).round() / 10_000.0
}

/// Index of the run with the lowest per-source-averaged MSE; exact ties go
/// to the earliest run. All runs must report the same source set.
pub fn select_best(runs: &[BTreeMap<String, f64>]) -> Result<usize, TrainError> {
    let first = runs
        .first()
        .ok_or_else(|| TrainError::BadConfig("selection needs at least one run".into()))?;
    let mut best = 0usize;
    let mut best_avg = f64::INFINITY;
    for (i, row) in runs.iter().enumerate() {
        if row.len() != first.len() || !row.keys().eq(first.keys()) {
            return Err(TrainError::BadConfig(format!(
                "run {i} reports different validation sources than run 0"
            )));
        }
        if row.is_empty() {
            return Err(TrainError::BadConfig("runs report no validation sources".into()));
        }
        let avg = source_average(row);
        if avg < best_avg {
            best_avg = avg;
            best = i;
        }
    }
    Ok(best)
}

/// Summary of a multi-seed sweep, serializable as a result document.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSweep {
    /// The seed each run trained with.
    pub seeds: Vec<u64>,
    /// Each run's final per-source validation MSEs.
    pub final_val: Vec<BTreeMap<String, f64>>,
    /// Each run's source-averaged final MSE.
    pub avg: Vec<f64>,
    /// Per-source mean of the final MSEs across runs.
    pub mean_val_mse: BTreeMap<String, f64>,
    /// Index of the selected run (lowest [`SeedSweep::avg`]).
    pub best: usize,
}

/// Outcome of [`multi_seed`]: every run's artifacts plus the summary.
pub struct MultiSeedOutcome {
    pub runs: Vec<(ModelParams<f32>, TrainHistory)>,
    pub summary: SeedSweep,
}

/// Train `k` runs on the same dataset with seeds `cfg.seed .. cfg.seed + k`,
/// then select the run with the lowest source-averaged validation MSE.
pub fn multi_seed_on(ds: &Dataset, cfg: &TrainConfig, k: usize) -> Result<MultiSeedOutcome, TrainError> {
    if k < 1 {
        return Err(TrainError::BadConfig("a sweep needs at least one seed".into()));
    }
    let split_seed = cfg.split_seed.unwrap_or_else(|| derive(cfg.seed, "split"));
    let mut runs = Vec::with_capacity(k);
    let mut seeds = Vec::with_capacity(k);
    for i in 0..k {
        let sub =
            TrainConfig { seed: cfg.seed + i as u64, split_seed: Some(split_seed), ..cfg.clone() };
        seeds.push(sub.seed);
        runs.push(train_on(ds, &sub)?);
    }

    let final_val: Vec<BTreeMap<String, f64>> =
        runs.iter().map(|(_, h)| h.final_val().clone()).collect();
    let best = select_best(&final_val)?;
    let avg: Vec<f64> = final_val.iter().map(source_average).collect();
    let mut mean_val_mse = BTreeMap::new();
    for name in final_val[0].keys() {
        let sum: f64 = final_val.iter().map(|row| row[name]).sum();
        mean_val_mse.insert(name.clone(), sum / k as f64);
    }

    Ok(MultiSeedOutcome { runs, summary: SeedSweep { seeds, final_val, avg, mean_val_mse, best } })
}

/// File-based [`multi_seed_on`]: mix the configured sources first.
pub fn multi_seed(cfg: &TrainConfig, k: usize) -> Result<MultiSeedOutcome, TrainError> {
    let mix = cfg
        .mix
        .as_ref()
        .ok_or_else(|| TrainError::BadConfig("config lists no dataset sources to mix".into()))?;
    let ds = mix_equal(mix)?;
    multi_seed_on(&ds, cfg, k)
}
