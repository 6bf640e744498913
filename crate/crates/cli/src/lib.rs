//! Command implementations behind the `tsfm` binary.

pub mod colormap;
pub mod config;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::Serialize;
use tsfm_core::checkpoint::Checkpoint;
use tsfm_core::data::image_io::{image_size, load_rgb, stack};
use tsfm_core::data::{ImageTriplet, Rgb32};
use tsfm_core::depth::disparity_to_depth;
use tsfm_core::eval::{
    evaluate_depth_maps, predict_disparity, predict_trajectory, DepthEvaluation,
};
use tsfm_core::geometry::{Intrinsics, RigidTransform};
use tsfm_core::metrics::{
    efficiency_benchmark, intrinsics_error, odometry_metrics, DepthMetrics, Efficiency,
    OdometryMetrics, PowerSampler, RaplSampler,
};
use tsfm_core::model::SfmModel;
use tsfm_core::nn::resample::{resize, Mode};
use tsfm_core::robustness::{
    corrupt, export_images, pgd_untargeted, targeted_flip_attack, AttackFrames, AttackKind,
    AttackSpec, CorruptionSpec,
};
use tsfm_core::train::{TrainConfig, Trainer, CHECKPOINT_DIR, METRICS_FILE};

use config::{DataKind, RunConfig};
use manifest::{dataset_fingerprint, file_sha256, CheckpointRef, RunManifest};

/// Exit status for invalid configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running a valid configuration.
pub const EXIT_RUNTIME: i32 = 1;

/// A configuration problem, reported with the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<tsfm_core::Error>() {
            return match e {
                tsfm_core::Error::Config(_) | tsfm_core::Error::Unknown { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

const DEVICE: Device = Device::Cpu;
const TRAIN_CONFIG_KEY: &str = "train.config";

fn rel(dir: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(dir).unwrap_or(p).to_path_buf()
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint, CheckpointRef)> {
    let ck = Checkpoint::load(path, &DEVICE)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let r = CheckpointRef {
        path: path.to_path_buf(),
        sha256: file_sha256(path)?,
    };
    Ok((ck, r))
}

/// Inference model from a checkpoint, checked against the run config.
fn model_for(cfg: &RunConfig, ck: &Checkpoint) -> anyhow::Result<SfmModel> {
    let stored = SfmModel::config_of(ck)?;
    if stored != cfg.model_config() {
        return Err(ConfigError(
            "model: checkpoint was written for a different architecture or intrinsics head".into(),
        )
        .into());
    }
    Ok(SfmModel::inference_from_checkpoint(
        ck,
        cfg.dtype(),
        &DEVICE,
    )?)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train into `out`, continuing from `out/checkpoints/latest` when `resume`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> anyhow::Result<TrainOutcome> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dataset = cfg.dataset(false)?;
    let model = SfmModel::new(&cfg.model_config(), cfg.seed(), cfg.dtype(), &DEVICE)?;
    let mut trainer = Trainer::new(&cfg.train, &model)?.with_output(out);
    let mut manifest = RunManifest::new("train", cfg);
    if resume {
        if let Some(p) = Trainer::latest_checkpoint(out) {
            let (ck, r) = load_checkpoint(&p)?;
            trainer.resume(&ck)?;
            log::info!("resuming from step {}", trainer.step());
            manifest.checkpoint = Some(r);
        }
    }
    let summary = trainer.run(&dataset)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&dataset, cfg));
    manifest.outputs = vec![PathBuf::from("config.toml"), PathBuf::from(METRICS_FILE)];
    manifest
        .outputs
        .extend(summary.checkpoints.iter().map(|p| rel(out, p)));
    manifest
        .outputs
        .push(Path::new(CHECKPOINT_DIR).join(tsfm_core::train::LATEST));
    manifest.write(out)?;
    Ok(TrainOutcome {
        steps: summary.steps,
        first_loss: summary.records.first().map(|r| r.loss),
        last_loss: summary.records.last().map(|r| r.loss),
        checkpoints: summary.checkpoints,
    })
}

// ---------------------------------------------------------------------------
// eval / attack / corrupt

/// Optional harness stages applied to inputs before the model sees them.
#[derive(Debug, Clone, Default)]
pub struct Harness {
    pub corruption: Option<CorruptionSpec>,
    pub attack: Option<AttackSpec>,
}

impl Harness {
    pub fn parse(
        corruption: Option<&str>,
        attack: Option<&str>,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        Ok(Self {
            corruption: corruption
                .map(|s| CorruptionSpec::parse(s, seed))
                .transpose()
                .map_err(|e| ConfigError(format!("--corruption: {e}")))?,
            attack: attack
                .map(AttackSpec::parse)
                .transpose()
                .map_err(|e| ConfigError(format!("--attack: {e}")))?,
        })
    }

    fn labels(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(c) = &self.corruption {
            v.push(format!(
                "corruption {}:{} seed {}",
                c.kind, c.severity, c.seed
            ));
        }
        if let Some(a) = &self.attack {
            v.push(format!("attack {a}"));
        }
        v
    }

    /// Corrupt one frame; the seed depends on the triplet and frame position.
    fn corrupt_frame(&self, img: &Rgb32, item: usize, frame: usize) -> tsfm_core::Result<Rgb32> {
        match &self.corruption {
            Some(c) => {
                let spec = CorruptionSpec {
                    seed: c.seed.wrapping_add(3 * item as u64 + frame as u64),
                    ..*c
                };
                corrupt(img, &spec)
            }
            None => Ok(img.clone()),
        }
    }
}

/// Centre-frame tensors after the harness, one batch at a time.
fn harnessed_centres(
    cfg: &RunConfig,
    model: &SfmModel,
    triplets: &[ImageTriplet],
    first_index: usize,
    harness: &Harness,
) -> anyhow::Result<Tensor> {
    let dtype = cfg.dtype();
    let mut frames: [Vec<Rgb32>; 3] = Default::default();
    for (k, t) in triplets.iter().enumerate() {
        for (f, img) in t.frames.iter().enumerate() {
            frames[f].push(harness.corrupt_frame(img, first_index + k, f)?);
        }
    }
    let as_tensor = |v: &[Rgb32]| stack(&v.iter().collect::<Vec<_>>(), dtype, &DEVICE);
    let centre = as_tensor(&frames[1])?;
    let Some(spec) = harness.attack else {
        return Ok(centre);
    };
    let range = (cfg.train.loss.min_depth, cfg.train.loss.max_depth);
    Ok(match spec.kind {
        AttackKind::UntargetedPgd => {
            let intrinsics = triplets
                .iter()
                .map(|t| t.intrinsics.map(|k| k.to_tensor(&DEVICE)))
                .collect::<Option<tsfm_core::Result<Vec<_>>>>()
                .transpose()?
                .map(|ks| Tensor::cat(&ks, 0).and_then(|k| k.to_dtype(dtype)))
                .transpose()?;
            let frames = AttackFrames {
                prev: Some(as_tensor(&frames[0])?),
                center: centre,
                next: Some(as_tensor(&frames[2])?),
            };
            let seed = cfg.seed().wrapping_add(first_index as u64);
            pgd_untargeted(
                model,
                &frames,
                intrinsics.as_ref(),
                cfg.train.intrinsics,
                &cfg.train.loss,
                &spec,
                seed,
            )?
            .images
            .center
        }
        AttackKind::TargetedHflip | AttackKind::TargetedVflip => {
            targeted_flip_attack(model, &centre, &spec, range)?.images
        }
    })
}

fn depth_maps(
    cfg: &RunConfig,
    model: &SfmModel,
    centres: &Tensor,
    size: (usize, usize),
) -> anyhow::Result<Vec<Array2<f64>>> {
    let range = (cfg.train.loss.min_depth, cfg.train.loss.max_depth);
    Ok(tsfm_core::eval::predict_depth(
        model,
        centres,
        range,
        Some(size),
    )?)
}

#[derive(Debug, Clone, Serialize)]
pub struct PoseReport {
    pub sequences: Vec<(String, Option<OdometryMetrics>)>,
    pub mean_t_err: Option<f64>,
    pub mean_r_err: Option<f64>,
    /// Signed percentage error of `[fx, fy, cx, cy]`, averaged over sequences.
    pub intrinsics_error: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub depth: DepthEvaluation,
    pub pose: Option<PoseReport>,
    pub table: String,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    harness: &Harness,
    pose: bool,
) -> anyhow::Result<EvalOutcome> {
    std::fs::create_dir_all(out)?;
    let (ck, ck_ref) = load_checkpoint(checkpoint)?;
    let model = model_for(cfg, &ck)?;
    let dataset = cfg.dataset(true)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut with_depth = Vec::new();
    for i in 0..dataset.len() {
        if dataset.get(i)?.depth.is_none() {
            log::warn!("triplet {i} has no ground-truth depth, skipped");
        } else {
            with_depth.push(i);
        }
    }
    let mut start = 0;
    for idx in with_depth.chunks(cfg.eval.batch_size) {
        let batch = idx
            .iter()
            .map(|&i| dataset.get(i))
            .collect::<tsfm_core::Result<Vec<_>>>()?;
        let centres = harnessed_centres(cfg, &model, &batch, start, harness)?;
        for (b, t) in batch.iter().enumerate() {
            let gt = t.depth.as_ref().expect("filtered").mapv(f64::from);
            let c = centres.narrow(0, b, 1)?;
            preds.extend(depth_maps(cfg, &model, &c, gt.dim())?);
            gts.push(gt);
        }
        start += batch.len();
    }
    if gts.is_empty() {
        bail!("no frame with ground-truth depth to evaluate");
    }
    let depth = evaluate_depth_maps(&preds, &gts, &cfg.eval)?;
    let label = {
        let l = harness.labels();
        if l.is_empty() {
            "clean".to_string()
        } else {
            l.join(", ")
        }
    };
    let table = match &depth.mean {
        Some(m) => DepthMetrics::table(&[(label, *m)]),
        None => bail!("every frame was skipped"),
    };
    std::fs::write(out.join("depth_metrics.md"), &table)?;
    write_json(&out.join("depth_metrics.json"), &depth)?;
    let mut outputs = vec![
        PathBuf::from("depth_metrics.md"),
        PathBuf::from("depth_metrics.json"),
    ];

    let pose_report = if pose {
        let r = evaluate_pose(cfg, &model, harness)?;
        write_json(&out.join("pose_metrics.json"), &r)?;
        outputs.push(PathBuf::from("pose_metrics.json"));
        Some(r)
    } else {
        None
    };

    let mut manifest = RunManifest::new("eval", cfg);
    manifest.checkpoint = Some(ck_ref);
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&dataset, cfg));
    manifest.harness = harness.labels();
    manifest.outputs = outputs;
    manifest.write(out)?;
    Ok(EvalOutcome {
        depth,
        pose: pose_report,
        table,
    })
}

/// Drift over whole synthetic sequences; the only source with full trajectories.
fn evaluate_pose(
    cfg: &RunConfig,
    model: &SfmModel,
    harness: &Harness,
) -> anyhow::Result<PoseReport> {
    if cfg.data.kind != DataKind::Synthetic {
        return Err(ConfigError(
            "--pose: trajectory ground truth is only available for synthetic data".into(),
        )
        .into());
    }
    if harness.attack.is_some() {
        return Err(ConfigError("--pose: attacks apply to depth evaluation only".into()).into());
    }
    let mut sequences = Vec::new();
    let mut k_err = Vec::new();
    for (s, seq) in cfg.synthetic_sequences()?.into_iter().enumerate() {
        let frames = seq
            .frames
            .iter()
            .enumerate()
            .map(|(f, img)| harness.corrupt_frame(img, 1000 * s, f))
            .collect::<tsfm_core::Result<Vec<_>>>()?;
        let pred = predict_trajectory(model, &frames)?;
        let gt: Vec<RigidTransform> = seq
            .centres
            .iter()
            .map(|c| {
                let mut p = RigidTransform::identity();
                for (k, v) in c.iter().enumerate() {
                    p.translation[k] = *v;
                }
                p
            })
            .collect();
        let m = odometry_metrics(&pred.poses, &gt, &cfg.odometry)?;
        if let Some(k) = pred.intrinsics {
            let (w, h) = cfg.size();
            let k = Intrinsics::new(k[0], k[1], k[2], k[3], w, h)?;
            k_err.push(intrinsics_error(&k, &seq.intrinsics));
        }
        sequences.push((seq.name, m));
    }
    let valid: Vec<&OdometryMetrics> = sequences.iter().filter_map(|(_, m)| m.as_ref()).collect();
    let mean = |f: fn(&OdometryMetrics) -> f64| {
        (!valid.is_empty()).then(|| valid.iter().map(|m| f(m)).sum::<f64>() / valid.len() as f64)
    };
    Ok(PoseReport {
        mean_t_err: mean(|m| m.t_err),
        mean_r_err: mean(|m| m.r_err),
        intrinsics_error: (!k_err.is_empty()).then(|| {
            std::array::from_fn(|i| k_err.iter().map(|e| e[i]).sum::<f64>() / k_err.len() as f64)
        }),
        sequences,
    })
}

/// Export the attacked centre frames of the dataset as lossless arrays.
pub fn cmd_attack(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    harness: &Harness,
) -> anyhow::Result<PathBuf> {
    let Some(spec) = harness.attack else {
        return Err(ConfigError("attack: an --attack spec is required".into()).into());
    };
    let (ck, ck_ref) = load_checkpoint(checkpoint)?;
    let model = model_for(cfg, &ck)?;
    let dataset = cfg.dataset(false)?;
    let ids = dataset.ids();
    let mut images = Vec::new();
    let mut batch = Vec::new();
    for i in 0..dataset.len() {
        batch.push(dataset.get(i)?);
        if batch.len() == cfg.eval.batch_size || i + 1 == dataset.len() {
            let start = i + 1 - batch.len();
            let adv = harnessed_centres(cfg, &model, &batch, start, harness)?;
            for (k, img) in tsfm_core::data::image_io::unstack(&adv)?
                .into_iter()
                .enumerate()
            {
                images.push((ids[start + k].clone(), img));
            }
            batch.clear();
        }
    }
    let dir = out.join("images");
    export_images(&dir, &spec.to_string(), cfg.seed(), &images)?;
    let mut manifest = RunManifest::new("attack", cfg);
    manifest.checkpoint = Some(ck_ref);
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&dataset, cfg));
    manifest.harness = harness.labels();
    manifest.outputs = vec![PathBuf::from("images")];
    manifest.write(out)?;
    Ok(dir)
}

/// Export corrupted centre frames as lossless arrays.
pub fn cmd_corrupt(cfg: &RunConfig, out: &Path, harness: &Harness) -> anyhow::Result<PathBuf> {
    let Some(spec) = harness.corruption else {
        return Err(ConfigError("corrupt: a --corruption spec is required".into()).into());
    };
    let dataset = cfg.dataset(false)?;
    let ids = dataset.ids();
    let images = (0..dataset.len())
        .map(|i| {
            Ok((
                ids[i].clone(),
                harness.corrupt_frame(&dataset.get(i)?.frames[1], i, 1)?,
            ))
        })
        .collect::<tsfm_core::Result<Vec<_>>>()?;
    let dir = out.join("images");
    export_images(
        &dir,
        &format!("{}:{}", spec.kind, spec.severity),
        spec.seed,
        &images,
    )?;
    let mut manifest = RunManifest::new("corrupt", cfg);
    manifest.dataset_fingerprint = Some(dataset_fingerprint(&dataset, cfg));
    manifest.harness = harness.labels();
    manifest.outputs = vec![PathBuf::from("images")];
    manifest.write(out)?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// benchmark

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub architecture: String,
    pub width: usize,
    pub height: usize,
    pub parameters: usize,
    pub depth: Efficiency,
    pub pose: Efficiency,
}

/// Throughput of the depth network on single frames and of the pose network
/// on frame pairs, with energy when a RAPL counter is readable.
pub fn cmd_benchmark(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
    passes: usize,
    warmup: usize,
) -> anyhow::Result<BenchmarkReport> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("benchmark", cfg);
    let model = match checkpoint {
        Some(p) => {
            let (ck, r) = load_checkpoint(p)?;
            manifest.checkpoint = Some(r);
            model_for(cfg, &ck)?
        }
        None => SfmModel::new_inference(&cfg.model_config(), cfg.seed(), cfg.dtype(), &DEVICE)?,
    };
    let (w, h) = cfg.size();
    let x = Tensor::rand(0f32, 1.0, (1, 3, h, w), &DEVICE)?.to_dtype(cfg.dtype())?;
    let mut rapl = RaplSampler::detect();
    let depth = efficiency_benchmark(
        || model.depth().forward(&x, false).map(|_| ()),
        passes,
        warmup,
        rapl.as_mut().map(|r| r as &mut dyn PowerSampler),
    )?;
    let pose = efficiency_benchmark(
        || model.pose().forward(&x, &x, false).map(|_| ()),
        passes,
        warmup,
        rapl.as_mut().map(|r| r as &mut dyn PowerSampler),
    )?;
    let report = BenchmarkReport {
        architecture: format!("{:?}", cfg.model.architecture),
        width: w,
        height: h,
        parameters: model.store().num_trainable_elements(),
        depth,
        pose,
    };
    write_json(&out.join("benchmark.json"), &report)?;
    manifest.outputs = vec![PathBuf::from("benchmark.json")];
    manifest.write(out)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// export-disparity

/// Network input size: the training size stored in the checkpoint, else the
/// run config's.
fn input_size(cfg: &RunConfig, ck: &Checkpoint) -> (usize, usize) {
    ck.meta(TRAIN_CONFIG_KEY)
        .ok()
        .and_then(|s| serde_json::from_str::<TrainConfig>(s).ok())
        .map(|t| (t.width, t.height))
        .unwrap_or_else(|| cfg.size())
}

/// Finest disparity of one image, resized back to the image's own resolution.
pub fn disparity_at_input_resolution(
    model: &SfmModel,
    image: &Path,
    size: (usize, usize),
    dtype: DType,
) -> anyhow::Result<Array2<f32>> {
    let (ow, oh) = image_size(image)?;
    let img = load_rgb(image, Some(size))?;
    let x = stack(&[&img], dtype, &DEVICE)?;
    let disp = predict_disparity(model, &x)?;
    let disp = resize(&disp, oh, ow, Mode::Bilinear)?.to_dtype(DType::F32)?;
    let v = disp.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((oh, ow), v)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportedDisparity {
    pub input: PathBuf,
    pub array: PathBuf,
    pub preview: PathBuf,
}

pub fn cmd_export_disparity(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    out: &Path,
) -> anyhow::Result<Vec<ExportedDisparity>> {
    if images.is_empty() {
        return Err(ConfigError("export-disparity: no input images".into()).into());
    }
    std::fs::create_dir_all(out)?;
    let (ck, ck_ref) = load_checkpoint(checkpoint)?;
    let model = SfmModel::inference_from_checkpoint(&ck, cfg.dtype(), &DEVICE)?;
    let size = input_size(cfg, &ck);
    let mut written = Vec::new();
    let mut used = std::collections::HashSet::new();
    for (i, path) in images.iter().enumerate() {
        let disp = disparity_at_input_resolution(&model, path, size, cfg.dtype())
            .with_context(|| format!("reading {}", path.display()))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let stem = if used.insert(stem.clone()) {
            stem
        } else {
            format!("{stem}_{i}")
        };
        let array = out.join(format!("{stem}_disp.npy"));
        ndarray_npy::write_npy(&array, &disp)?;
        let preview = out.join(format!("{stem}_disp.png"));
        colormap::colorize(&disp).save(&preview)?;
        written.push(ExportedDisparity {
            input: path.clone(),
            array,
            preview,
        });
    }
    let mut manifest = RunManifest::new("export-disparity", cfg);
    manifest.checkpoint = Some(ck_ref);
    manifest.outputs = written
        .iter()
        .flat_map(|e| [rel(out, &e.array), rel(out, &e.preview)])
        .collect();
    manifest.write(out)?;
    Ok(written)
}

/// Depth in scene units for a disparity map and the run's depth range.
pub fn disparity_to_depth_map(cfg: &RunConfig, disp: &Array2<f32>) -> anyhow::Result<Array2<f32>> {
    let (h, w) = disp.dim();
    let t = Tensor::from_vec(disp.iter().copied().collect::<Vec<_>>(), (h, w), &DEVICE)?;
    let d = disparity_to_depth(&t, cfg.train.loss.min_depth, cfg.train.loss.max_depth)?;
    Ok(Array2::from_shape_vec(
        (h, w),
        d.flatten_all()?.to_vec1::<f32>()?,
    )?)
}
