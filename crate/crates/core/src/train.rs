//! Optimisation loop, learning-rate schedule and the shared training objective.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, collate, epoch_order, AugmentConfig, Batch, Dataset};
use crate::depth::DisparityPyramid;
use crate::error::{bail, Error, Result};
use crate::losses::{total_loss, LossConfig, LossInputs, LossReport};
use crate::model::SfmModel;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};

/// Where the photometric objective takes its camera matrix from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntrinsicsMode {
    Given,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub width: usize,
    pub height: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// `None` picks Adam for CNN models and AdamW for transformer models.
    pub optimizer: Option<OptimizerKind>,
    /// `None` picks 1e-4 for CNN models and 1e-5 for transformer models.
    pub lr: Option<f64>,
    /// First epoch (0-based) trained at the decayed rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `None` uses the optimiser's default.
    pub weight_decay: Option<f64>,
    pub seed: u64,
    pub intrinsics: IntrinsicsMode,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub log_every: usize,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 192,
            batch_size: 12,
            epochs: 20,
            max_steps: None,
            optimizer: None,
            lr: None,
            decay_epoch: 15,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: None,
            seed: 0,
            intrinsics: IntrinsicsMode::Given,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            bail!(Config, "image size must be non-zero");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                bail!(Config, "lr must be positive, got {lr}");
            }
        }
        if self.decay_epoch >= self.epochs {
            bail!(
                Config,
                "decay_epoch ({}) must be smaller than epochs ({})",
                self.decay_epoch,
                self.epochs
            );
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            bail!(
                Config,
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            );
        }
        if self.log_every == 0 {
            bail!(Config, "log_every must be at least 1");
        }
        if !(self.loss.min_depth > 0.0 && self.loss.min_depth < self.loss.max_depth) {
            bail!(
                Config,
                "loss depth range must satisfy 0 < min_depth < max_depth"
            );
        }
        self.optimizer_config(false).validate()
    }

    /// Optimiser settings for a model family.
    pub fn optimizer_config(&self, transformer: bool) -> OptimizerConfig {
        let kind = self.optimizer.unwrap_or(if transformer {
            OptimizerKind::AdamW
        } else {
            OptimizerKind::Adam
        });
        let base = match kind {
            OptimizerKind::Adam => OptimizerConfig::adam(),
            OptimizerKind::AdamW => OptimizerConfig::adamw(),
        };
        OptimizerConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            ..base
        }
    }

    pub fn initial_lr(&self, transformer: bool) -> f64 {
        self.lr.unwrap_or(if transformer { 1e-5 } else { 1e-4 })
    }

    /// Step schedule: the initial rate until `decay_epoch`, then scaled once.
    pub fn lr_at(&self, epoch: usize, transformer: bool) -> f64 {
        let lr = self.initial_lr(transformer);
        if epoch >= self.decay_epoch {
            lr * self.decay_factor
        } else {
            lr
        }
    }
}

/// One frame as seen by the loss and by the networks.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    /// `(B, 3, H, W)` image the photometric error compares.
    pub image: &'a Tensor,
    /// `(B, 3, H, W)` image fed to the networks.
    pub input: &'a Tensor,
}

impl<'a> FrameView<'a> {
    pub fn same(t: &'a Tensor) -> Self {
        Self { image: t, input: t }
    }
}

/// A target frame with whichever neighbours exist. At sequence boundaries one
/// neighbour may be missing; the objective then uses the remaining pair.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub prev: Option<FrameView<'a>>,
    pub center: FrameView<'a>,
    pub next: Option<FrameView<'a>>,
    /// `(B, 4)` ground-truth intrinsics; required in [`IntrinsicsMode::Given`].
    pub intrinsics: Option<&'a Tensor>,
}

impl<'a> ObjectiveInputs<'a> {
    pub fn from_batch(batch: &'a Batch) -> Self {
        let view = |k: usize| FrameView {
            image: &batch.frames[k],
            input: &batch.inputs[k],
        };
        Self {
            prev: Some(view(0)),
            center: view(1),
            next: Some(view(2)),
            intrinsics: batch.intrinsics.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Tensor,
    pub report: LossReport,
    pub disparity: DisparityPyramid,
    /// `(B, 4)` intrinsics the view synthesis used.
    pub intrinsics: Tensor,
    /// `(B, 4)` network estimate when the model has an intrinsics head.
    pub predicted_intrinsics: Option<Tensor>,
}

/// The unsupervised objective: depth of the centre frame, poses from the
/// centre to each neighbour, photometric reconstruction of the centre.
/// Training and the untargeted attack both call this.
pub fn sfm_objective(
    model: &SfmModel,
    inputs: &ObjectiveInputs<'_>,
    mode: IntrinsicsMode,
    loss_cfg: &LossConfig,
    train: bool,
    noise_seed: u64,
) -> Result<Objective> {
    let disparity = model.depth().forward(inputs.center.input, train)?;
    let mut sources = Vec::with_capacity(2);
    let mut transforms = Vec::with_capacity(2);
    let mut predicted = Vec::with_capacity(2);
    if let Some(prev) = inputs.prev {
        let out = model
            .pose()
            .forward(prev.input, inputs.center.input, train)?;
        transforms.push(out.transform(true)?);
        sources.push(prev.image.clone());
        predicted.extend(out.intrinsics);
    }
    if let Some(next) = inputs.next {
        let out = model
            .pose()
            .forward(inputs.center.input, next.input, train)?;
        transforms.push(out.transform(false)?);
        sources.push(next.image.clone());
        predicted.extend(out.intrinsics);
    }
    if sources.is_empty() {
        bail!(Data, "the objective needs at least one neighbouring frame");
    }
    let predicted_intrinsics = match predicted.len() {
        0 => None,
        n => Some((Tensor::stack(&predicted, 0)?.sum(0)? / n as f64)?),
    };
    let intrinsics = match mode {
        IntrinsicsMode::Given => inputs.intrinsics.cloned().ok_or_else(|| {
            Error::Config("intrinsics mode `given` requires ground-truth intrinsics".into())
        })?,
        IntrinsicsMode::Learned => predicted_intrinsics.clone().ok_or_else(|| {
            Error::Config(
                "intrinsics mode `learned` requires a pose network with an intrinsics head".into(),
            )
        })?,
    };
    let (loss, report) = total_loss(
        &LossInputs {
            target: inputs.center.image,
            sources: &sources,
            transforms: &transforms,
            intrinsics: &intrinsics,
            disparities: &disparity.scales,
            noise_seed,
        },
        loss_cfg,
    )?;
    Ok(Objective {
        loss,
        report,
        disparity,
        intrinsics,
        predicted_intrinsics,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimiser step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub mask_coverage: f64,
    /// Batch mean of the intrinsics estimate, when the model predicts one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intrinsics: Option<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub records: Vec<StepRecord>,
    /// Checkpoints written, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

const STEP_KEY: &str = "train.step";
const EPOCH_KEY: &str = "train.epoch";
const BATCH_KEY: &str = "train.batch";
const CONFIG_KEY: &str = "train.config";

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST: &str = "latest.safetensors";
pub const LAST_GOOD: &str = "last_good.safetensors";

/// Position in the data stream, enough to resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Cursor {
    step: usize,
    epoch: usize,
    batch: usize,
}

/// Trains `model` in place.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: &'a SfmModel,
    optimizer: Optimizer,
    transformer: bool,
    cursor: Cursor,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, model: &'a SfmModel) -> Result<Self> {
        cfg.validate()?;
        if cfg.intrinsics == IntrinsicsMode::Learned && !model.pose().learns_intrinsics() {
            bail!(
                Config,
                "intrinsics mode `learned` needs a model built with the intrinsics head"
            );
        }
        let ds = model.config().downsampling();
        if !cfg.width.is_multiple_of(ds) || !cfg.height.is_multiple_of(ds) {
            bail!(
                Config,
                "image size {}x{} must be divisible by {ds} for this model",
                cfg.width,
                cfg.height
            );
        }
        let transformer = model.config().is_transformer();
        let optimizer =
            Optimizer::new(model.store().trainable(), cfg.optimizer_config(transformer))?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            optimizer,
            transformer,
            cursor: Cursor::default(),
            out_dir: None,
        })
    }

    /// Write the metric log and checkpoints under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn step(&self) -> usize {
        self.cursor.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Model weights, optimiser moments and the data cursor.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        let (state, _) = self.optimizer.state();
        ck.insert_section("optim", state);
        ck.metadata
            .insert(STEP_KEY.into(), self.cursor.step.to_string());
        ck.metadata
            .insert(EPOCH_KEY.into(), self.cursor.epoch.to_string());
        ck.metadata
            .insert(BATCH_KEY.into(), self.cursor.batch.to_string());
        ck.metadata.insert(
            CONFIG_KEY.into(),
            serde_json::to_string(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        Ok(ck)
    }

    /// Restore weights, optimiser state and data position.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.load_checkpoint(ck)?;
        let parse = |key: &str| -> Result<usize> {
            ck.meta(key)?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("bad `{key}`: {e}")))
        };
        self.cursor = Cursor {
            step: parse(STEP_KEY)?,
            epoch: parse(EPOCH_KEY)?,
            batch: parse(BATCH_KEY)?,
        };
        self.optimizer
            .load_state(&ck.section("optim"), self.cursor.step as u64)?;
        Ok(())
    }

    /// Latest checkpoint in a run directory, if any.
    pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
        let p = dir.join(CHECKPOINT_DIR).join(LATEST);
        p.exists().then_some(p)
    }

    fn save(&self, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else {
            return Ok(None);
        };
        let path = dir.join(CHECKPOINT_DIR).join(name);
        self.checkpoint()?.save(&path)?;
        Ok(Some(path))
    }

    fn batch(
        &self,
        dataset: &Dataset,
        ids: &[usize],
        dtype: DType,
        device: &Device,
    ) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg
                .seed
                .wrapping_add(0xA5A5_0000)
                .wrapping_add(self.cursor.step as u64),
        );
        let mut items = Vec::with_capacity(ids.len());
        for &i in ids {
            let t = dataset.get(i)?;
            if t.size() != (self.cfg.width, self.cfg.height) {
                bail!(
                    Data,
                    "triplet {} has size {:?}, expected {}x{}",
                    i,
                    t.size(),
                    self.cfg.width,
                    self.cfg.height
                );
            }
            items.push(augment(&t, &self.cfg.augment, &mut rng));
        }
        collate(&items, dtype, device)
    }

    /// Runs until the epoch budget or `max_steps` is exhausted.
    pub fn run(&mut self, dataset: &Dataset) -> Result<TrainSummary> {
        if dataset.is_empty() {
            bail!(Data, "cannot train on an empty dataset");
        }
        if self.cfg.intrinsics == IntrinsicsMode::Given && dataset.get(0)?.intrinsics.is_none() {
            bail!(
                Config,
                "intrinsics mode `given` but the dataset carries no intrinsics"
            );
        }
        let store = self.model.store();
        let (dtype, device) = (store.dtype(), store.device().clone());
        let mut log = match &self.out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join(METRICS_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?;
                Some((BufWriter::new(f), p))
            }
            None => None,
        };
        let per_epoch = dataset.len().div_ceil(self.cfg.batch_size);
        let mut records = Vec::new();
        let mut checkpoints = Vec::new();
        let budget = self.cfg.max_steps.unwrap_or(usize::MAX);

        'epochs: while self.cursor.epoch < self.cfg.epochs {
            let order = epoch_order(dataset.len(), self.cfg.seed, self.cursor.epoch);
            while self.cursor.batch < per_epoch {
                if self.cursor.step >= budget {
                    break 'epochs;
                }
                let lo = self.cursor.batch * self.cfg.batch_size;
                let hi = (lo + self.cfg.batch_size).min(order.len());
                let batch = self.batch(dataset, &order[lo..hi], dtype, &device)?;
                let lr = self.cfg.lr_at(self.cursor.epoch, self.transformer);
                let noise_seed = self
                    .cfg
                    .seed
                    .wrapping_mul(31)
                    .wrapping_add(self.cursor.step as u64);
                let obj = match sfm_objective(
                    self.model,
                    &ObjectiveInputs::from_batch(&batch),
                    self.cfg.intrinsics,
                    &self.cfg.loss,
                    true,
                    noise_seed,
                ) {
                    Ok(o) => o,
                    Err(Error::NonFinite { what, .. }) => {
                        return Err(self.abort(what, &mut log));
                    }
                    Err(e) => return Err(e),
                };
                let grads = obj.loss.backward()?;
                self.optimizer.step(&grads, lr)?;
                self.cursor.step += 1;
                self.cursor.batch += 1;

                let intrinsics = match &obj.predicted_intrinsics {
                    Some(k) => {
                        let m = k.to_dtype(DType::F64)?.mean(0)?.to_vec1::<f64>()?;
                        Some([m[0], m[1], m[2], m[3]])
                    }
                    None => None,
                };
                let rec = StepRecord {
                    step: self.cursor.step,
                    epoch: self.cursor.epoch,
                    lr,
                    loss: obj.report.total,
                    photometric: obj.report.photometric,
                    smoothness: obj.report.smoothness,
                    mask_coverage: obj.report.mask_coverage,
                    intrinsics,
                };
                if self.cursor.step.is_multiple_of(self.cfg.log_every) {
                    log::info!(
                        "step {} epoch {} loss {:.5} lr {:.2e}",
                        rec.step,
                        rec.epoch,
                        rec.loss,
                        rec.lr
                    );
                    if let Some((w, p)) = log.as_mut() {
                        write_record(w, p, &rec)?;
                    }
                }
                records.push(rec);
                if self.cfg.checkpoint_every > 0
                    && self.cursor.step.is_multiple_of(self.cfg.checkpoint_every)
                {
                    checkpoints
                        .extend(self.save(&format!("step_{:06}.safetensors", self.cursor.step))?);
                    self.save(LATEST)?;
                }
            }
            self.cursor.epoch += 1;
            self.cursor.batch = 0;
        }
        if let Some((w, p)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let Some(p) = self.save(&format!("step_{:06}.safetensors", self.cursor.step))? {
            if checkpoints.last() != Some(&p) {
                checkpoints.push(p);
            }
        }
        self.save(LATEST)?;
        Ok(TrainSummary {
            steps: self.cursor.step,
            records,
            checkpoints,
        })
    }

    /// Parameters are untouched by the failing step, so they are the last
    /// good state.
    fn abort(&self, what: String, log: &mut Option<(BufWriter<File>, PathBuf)>) -> Error {
        if let Some((w, _)) = log.as_mut() {
            let _ = w.flush();
        }
        match self.save(LAST_GOOD) {
            Ok(Some(p)) => log::error!("non-finite loss; last good state saved to {}", p.display()),
            Ok(None) => log::error!("non-finite loss"),
            Err(e) => log::error!("non-finite loss; saving the last good state failed: {e}"),
        }
        Error::NonFinite {
            what,
            step: self.cursor.step + 1,
        }
    }
}

fn write_record(w: &mut impl Write, path: &Path, rec: &StepRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Read a metric log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Convenience wrapper: fresh trainer, optional output directory.
pub fn train(
    cfg: &TrainConfig,
    model: &SfmModel,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainSummary> {
    let mut t = Trainer::new(cfg, model)?;
    if let Some(d) = out_dir {
        t = t.with_output(d);
    }
    t.run(dataset)
}
