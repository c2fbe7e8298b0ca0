//! SGD-with-momentum training of both branches on sampled pair batches.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, augment_photo, augment_sketch, AugmentConfig};
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::losses::{evaluate_batch, ContrastiveConfig, LossBreakdown, LossWeights, TermCoefficients};
use crate::network::{
    build_model, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelParams, TrainingProgress,
};
use crate::sampler::{PairBatch, PairLabel, PairSampler};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Genuine pairs per batch; each brings four impostors.
    pub batch_size: usize,
    pub epochs: usize,
    /// Set from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    /// Applied to every batch when `augment_enabled` is set.
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::SgdMomentum,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig::default(),
            augment_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()?;
        self.contrastive.validate()?;
        if self.augment_enabled {
            self.augment.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub last_loss: Option<LossBreakdown>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            velocity: params.zeros_like(),
            params,
            epoch: 0,
            step: 0,
            last_loss: None,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let progress = ckpt.progress.unwrap_or(TrainingProgress { epoch: 0, step: 0 });
        Self {
            velocity: ckpt.velocity.unwrap_or_else(|| ckpt.params.zeros_like()),
            params: ckpt.params,
            epoch: progress.epoch,
            step: progress.step,
            last_loss: None,
        }
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            velocity: Some(self.velocity.clone()),
            progress: Some(TrainingProgress {
                epoch: self.epoch,
                step: self.step,
            }),
            config_hash: config_hash.to_string(),
        }
    }
}

/// `v <- momentum v - lr g`, `w <- w + v`.
pub fn sgd_momentum_update(params: &mut ModelParams, velocity: &mut ModelParams, grad: &ModelParams, lr: f64, momentum: f64) {
    for ((w, v), g) in params
        .blocks_mut()
        .into_iter()
        .zip(velocity.blocks_mut())
        .zip(grad.blocks())
    {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi - lr * gi;
            *wi += *vi;
        }
    }
}

/// Augments every image of a batch. Photos and sketches of genuine pairs go
/// through [`augment_pair`] together; other images are augmented alone.
pub fn augment_batch(batch: &PairBatch, config: &AugmentConfig, seed: u64) -> Result<PairBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut photos: Vec<Option<_>> = vec![None; batch.photos.len()];
    let mut sketches: Vec<Option<_>> = vec![None; batch.sketches.len()];
    for pair in batch.pairs.iter().filter(|p| p.label == PairLabel::Genuine) {
        let s = rng.next_u64();
        if photos[pair.photo].is_some() || sketches[pair.sketch].is_some() {
            continue;
        }
        let (p, k) = augment_pair(&batch.photos[pair.photo], &batch.sketches[pair.sketch], config, s)?;
        photos[pair.photo] = Some(p);
        sketches[pair.sketch] = Some(k);
    }
    let photos = photos
        .into_iter()
        .zip(&batch.photos)
        .map(|(done, orig)| {
            let s = rng.next_u64();
            done.map_or_else(|| augment_photo(orig, config, s), Ok)
        })
        .collect::<Result<Vec<_>>>()?;
    let sketches = sketches
        .into_iter()
        .zip(&batch.sketches)
        .map(|(done, orig)| {
            let s = rng.next_u64();
            done.map_or_else(|| augment_sketch(orig, config, s), Ok)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairBatch {
        photos,
        sketches,
        pairs: batch.pairs.clone(),
    })
}

/// One optimizer step on an already-augmented batch.
pub fn apply_step(mut state: TrainState, batch: &PairBatch, cfg: &TrainConfig) -> Result<TrainState> {
    let (loss, grad) = evaluate_batch(
        &state.params,
        batch,
        &cfg.contrastive,
        &cfg.weights,
        TermCoefficients::total(&cfg.weights),
        true,
    )?;
    if let Some(name) = loss.non_finite_component() {
        return Err(Error::Numeric(format!(
            "loss component {name} is non-finite at step {} ({loss:?})",
            state.step
        )));
    }
    let grad = grad.expect("gradient requested");
    if !grad.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
    }
    match cfg.optimizer {
        Optimizer::SgdMomentum => sgd_momentum_update(
            &mut state.params,
            &mut state.velocity,
            &grad,
            cfg.learning_rate,
            cfg.momentum,
        ),
    }
    state.step += 1;
    state.last_loss = Some(loss);
    Ok(state)
}

/// Augments `batch` (seeded by the config seed and step counter) and takes one step.
pub fn train_step(state: TrainState, batch: &PairBatch, cfg: &TrainConfig) -> Result<TrainState> {
    if cfg.augment_enabled {
        let seed = derive_seed(derive_seed(cfg.seed, 0xA06), state.step as u64);
        let augmented = augment_batch(batch, &cfg.augment, seed)?;
        apply_step(state, &augmented, cfg)
    } else {
        apply_step(state, batch, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "L3")]
    pub l3: f64,
    #[serde(rename = "LT")]
    pub lt: f64,
    pub wall_ms: u64,
}

pub fn steps_per_epoch(entries: usize, batch_size: usize) -> usize {
    entries.div_ceil(batch_size)
}

/// Runs the remaining epochs of `state`. `on_epoch` sees the state and the
/// rows of each completed epoch.
pub fn train_loop(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState, &[MetricsRow]) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let sampler = PairSampler::new(dataset)?;
    let start = Instant::now();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut rows = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = sampler.batch(chunk, &mut rng)?;
            state = train_step(state, &batch, cfg)?;
            let loss = state.last_loss.expect("step records loss");
            rows.push(MetricsRow {
                step: state.step,
                epoch,
                l1: loss.l1,
                l2: loss.l2,
                l3: loss.l3,
                lt: loss.total,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        state.epoch += 1;
        on_epoch(&state, &rows)?;
    }
    Ok(state)
}

/// Trains in memory from `init`, returning the final state and all metrics rows.
pub fn train_in_memory(dataset: &Dataset, cfg: &TrainConfig, init: TrainState) -> Result<(TrainState, Vec<MetricsRow>)> {
    let mut all = Vec::new();
    let state = train_loop(dataset, cfg, init, |_, rows| {
        all.extend_from_slice(rows);
        Ok(())
    })?;
    Ok((state, all))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Start from these weights (fresh optimizer state).
    pub init_from: Option<PathBuf>,
    /// Continue from `out/checkpoint.bin` if it exists.
    pub resume: bool,
    pub config_hash: String,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains on `dataset`, writing `checkpoint.bin` after every epoch and
/// appending per-step rows to `metrics.csv` under `out`.
pub fn train(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
    options: &TrainOptions,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let resuming = options.resume && ckpt_path.is_file();
    let state = if resuming {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if &ckpt.params.config != model {
            return Err(Error::Incompatible("resume checkpoint has a different model configuration".into()));
        }
        if ckpt.config_hash != options.config_hash {
            return Err(Error::Fingerprint(format!(
                "resume checkpoint was produced by config {}, current config is {}",
                ckpt.config_hash, options.config_hash
            )));
        }
        TrainState::from_checkpoint(ckpt)
    } else if let Some(init) = &options.init_from {
        let ckpt = load_checkpoint(init)?;
        if &ckpt.params.config != model {
            return Err(Error::Incompatible(format!(
                "{} was built for a different model configuration",
                init.display()
            )));
        }
        TrainState::new(ckpt.params)
    } else {
        TrainState::new(build_model(model, cfg.seed)?)
    };

    let mut metrics = if resuming && metrics_path.is_file() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)
    } else {
        std::fs::File::create(&metrics_path).and_then(|mut f| {
            writeln!(f, "step,epoch,L1,L2,L3,LT,wall_ms")?;
            Ok(f)
        })
    }
    .map_err(|e| Error::io(&metrics_path, e))?;

    save_checkpoint(&state.to_checkpoint(&options.config_hash), &ckpt_path)?;
    train_loop(dataset, cfg, state, |s, rows| {
        for r in rows {
            writeln!(
                metrics,
                "{},{},{},{},{},{},{}",
                r.step, r.epoch, r.l1, r.l2, r.l3, r.lt, r.wall_ms
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        save_checkpoint(&s.to_checkpoint(&options.config_hash), &ckpt_path)
    })?;
    Ok(TrainArtifacts {
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}
