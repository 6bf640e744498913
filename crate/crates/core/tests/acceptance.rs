//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsfm_core::data::image_io::stack;
use tsfm_core::data::synthetic::{generate_triplets, SyntheticConfig};
use tsfm_core::data::{AugmentConfig, Dataset, ImageTriplet};
use tsfm_core::depth::{DepthNet, DepthNetConfig};
use tsfm_core::eval::{evaluate_depth_maps, predict_depth, predict_disparity, EvalConfig};
use tsfm_core::geometry::{axis_angle_to_matrix, synthesize_view, BatchTransform, RigidTransform};
use tsfm_core::losses::{
    min_reprojection_with_automask, smoothness, ssim, total_loss, LossConfig, LossInputs,
};
use tsfm_core::metrics::{depth_metrics, odometry_metrics, OdometryConfig};
use tsfm_core::model::{Architecture, ModelConfig, SfmModel};
use tsfm_core::nn::ParamStore;
use tsfm_core::pose::{PoseNet, PoseNetConfig};
use tsfm_core::robustness::{
    corrupt, flip_target_rmse, iterations, pgd_untargeted, targeted_flip_attack, AttackFrames,
    AttackKind, AttackSpec, CorruptionKind, CorruptionSpec,
};
use tsfm_core::train::{
    sfm_objective, train, FrameView, IntrinsicsMode, ObjectiveInputs, TrainConfig, TrainSummary,
};

use common::*;

type Outcome = Result<String, Box<dyn std::error::Error>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

const DEV: Device = Device::Cpu;

fn scalar(t: &Tensor) -> candle_core::Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> candle_core::Result<f64> {
    scalar(
        &(a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
            .abs()?
            .max_all()?,
    )
}

fn random_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> candle_core::Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &DEV)
}

fn transform(rot: [f64; 3], t: [f64; 3]) -> RigidTransform {
    RigidTransform {
        rotation: axis_angle_to_matrix(rot),
        translation: Vector3::new(t[0], t[1], t[2]),
    }
}

// ---------------------------------------------------------------------------

fn geometry_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let source = random_tensor(&mut rng, &[2, 3, 12, 20], 0.0, 1.0)?;
    let depth = random_tensor(&mut rng, &[2, 1, 12, 20], 1.0, 30.0)?;
    let k = Tensor::new(&[[18.0f64, 17.0, 9.5, 6.0], [25.0, 24.0, 10.0, 5.5]], &DEV)?;
    let out = synthesize_view(&source, &depth, &BatchTransform::identity(2, &DEV)?, &k)?;
    let identity_err = max_abs_diff(&out.image, &source)?;
    ensure!(
        identity_err < 1e-6,
        "identity warp differs by {identity_err:e}"
    );

    // K = I, D = 1, T = (0.1, 0, 0): target pixel (u, v) samples the source at
    // (u + 0.1, v), i.e. 0.9 * s[v][u] + 0.1 * s[v][u + 1]. With s = 10 v + u
    // pixel (1, 2) must read 21.1.
    let s: Vec<f64> = (0..4)
        .flat_map(|v| (0..5).map(move |u| (10 * v + u) as f64))
        .collect();
    let source = Tensor::from_vec(s, (1, 1, 4, 5), &DEV)?;
    let ones = Tensor::ones((1, 1, 4, 5), DType::F64, &DEV)?;
    let k = Tensor::new(&[[1.0f64, 1.0, 0.0, 0.0]], &DEV)?;
    let tr = BatchTransform::from_transforms(&[transform([0.0; 3], [0.1, 0.0, 0.0])], &DEV)?;
    let out = synthesize_view(&source, &ones, &tr, &k)?;
    let idx = 2 * 5 + 1;
    let u = out.projection.u.flatten_all()?.to_vec1::<f64>()?[idx];
    let v = out.projection.v.flatten_all()?.to_vec1::<f64>()?[idx];
    let val = out.image.flatten_all()?.to_vec1::<f64>()?[idx];
    let err = (u - 1.1).abs().max((v - 2.0).abs()).max((val - 21.1).abs());
    ensure!(err < 1e-6, "hand case: u={u} v={v} value={val}");
    Ok(format!(
        "identity max diff {identity_err:.1e}, hand case error {err:.1e}"
    ))
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (16usize, 24usize);
    let k = Tensor::new(&[[20.0f64, 20.0, 12.0, 8.0]], &DEV)?;
    let source = random_tensor(&mut rng, &[1, 3, h, w], 0.0, 1.0)?;
    let weights = random_tensor(&mut rng, &[1, 3, h, w], -1.0, 1.0)?;
    let depth0 = random_tensor(&mut rng, &[1, 1, h, w], 2.0, 4.0)?;
    let tr = BatchTransform::from_transforms(
        &[transform([0.01, -0.02, 0.005], [0.1, -0.05, 0.05])],
        &DEV,
    )?;

    let warp_objective = |depth: &Tensor| -> candle_core::Result<Tensor> {
        let out = synthesize_view(&source, depth, &tr, &k).map_err(candle_core::Error::wrap)?;
        (out.image * &weights)?.sum_all()
    };
    let var = Var::from_tensor(&depth0)?;
    let grads = warp_objective(var.as_tensor())?.backward()?;
    let analytic = grads
        .get(var.as_tensor())
        .ok_or("no depth gradient")?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let base = depth0.flatten_all()?.to_vec1::<f64>()?;
    let mut worst_warp = 0.0f64;
    for _ in 0..10 {
        let i = rng.random_range(0..h * w);
        let fd = central_difference(
            |x| {
                let mut d = base.clone();
                d[i] = x;
                let t = Tensor::from_vec(d, (1, 1, h, w), &DEV).unwrap();
                scalar(&warp_objective(&t).unwrap()).unwrap()
            },
            base[i],
            1e-4,
        );
        worst_warp = worst_warp.max(relative_gap(analytic[i], fd));
    }
    ensure!(
        worst_warp < 1e-3,
        "synthesize_view gradient gap {worst_warp:e}"
    );

    let cfg = LossConfig::default();
    let target = random_tensor(&mut rng, &[1, 3, h, w], 0.0, 1.0)?;
    let sources = vec![
        random_tensor(&mut rng, &[1, 3, h, w], 0.0, 1.0)?,
        random_tensor(&mut rng, &[1, 3, h, w], 0.0, 1.0)?,
    ];
    let transforms = vec![
        BatchTransform::from_transforms(&[transform([0.0, 0.01, 0.0], [0.05, 0.0, 0.1])], &DEV)?,
        BatchTransform::from_transforms(&[transform([0.0, -0.01, 0.0], [-0.05, 0.0, -0.1])], &DEV)?,
    ];
    let coarse: Vec<Tensor> = (1..4)
        .map(|s| random_tensor(&mut rng, &[1, 1, h >> s, w >> s], 0.05, 0.95))
        .collect::<candle_core::Result<_>>()?;
    let fine0 = random_tensor(&mut rng, &[1, 1, h, w], 0.05, 0.95)?;
    let loss_of = |fine: &Tensor| -> candle_core::Result<Tensor> {
        let mut disparities = vec![fine.clone()];
        disparities.extend(coarse.iter().cloned());
        let inputs = LossInputs {
            target: &target,
            sources: &sources,
            transforms: &transforms,
            intrinsics: &k,
            disparities: &disparities,
            noise_seed: 7,
        };
        Ok(total_loss(&inputs, &cfg)
            .map_err(candle_core::Error::wrap)?
            .0)
    };
    let var = Var::from_tensor(&fine0)?;
    let grads = loss_of(var.as_tensor())?.backward()?;
    let analytic = grads
        .get(var.as_tensor())
        .ok_or("no disparity gradient")?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let base = fine0.flatten_all()?.to_vec1::<f64>()?;
    let mut worst_loss = 0.0f64;
    for _ in 0..10 {
        let i = rng.random_range(0..h * w);
        let fd = central_difference(
            |x| {
                let mut d = base.clone();
                d[i] = x;
                let t = Tensor::from_vec(d, (1, 1, h, w), &DEV).unwrap();
                scalar(&loss_of(&t).unwrap()).unwrap()
            },
            base[i],
            1e-6,
        );
        worst_loss = worst_loss.max(relative_gap(analytic[i], fd));
    }
    ensure!(worst_loss < 1e-3, "total_loss gradient gap {worst_loss:e}");
    Ok(format!(
        "worst relative gap: warp {worst_warp:.1e}, loss {worst_loss:.1e}"
    ))
}

fn shape_contract() -> Outcome {
    let image = Tensor::rand(0f32, 1.0, (1, 3, 192, 640), &DEV)?;
    let pair = Tensor::rand(0f32, 1.0, (1, 6, 192, 640), &DEV)?;
    let scales = [
        [1, 1, 192, 640],
        [1, 1, 96, 320],
        [1, 1, 48, 160],
        [1, 1, 24, 80],
    ];
    let check_depth = |cfg: &DepthNetConfig, expect: &[[usize; 4]]| -> Outcome {
        let store = ParamStore::inference(0, DType::F32, &DEV);
        let net = DepthNet::new(&store.root().pp("depth"), cfg)?;
        let trace = net.forward_detailed(&image, false)?;
        let got: Vec<Vec<usize>> = trace.pyramid.iter().map(|t| t.dims().to_vec()).collect();
        ensure!(
            got.iter().zip(expect).all(|(g, e)| g[..] == e[..]) && got.len() == expect.len(),
            "reassemble shapes {got:?}"
        );
        let disp: Vec<Vec<usize>> = trace
            .disparity
            .scales
            .iter()
            .map(|t| t.dims().to_vec())
            .collect();
        ensure!(
            disp.len() == 4 && disp.iter().zip(&scales).all(|(g, e)| g[..] == e[..]),
            "disparity shapes {disp:?}"
        );
        for d in &trace.disparity.scales {
            let (lo, hi) = (scalar(&d.min_all()?)?, scalar(&d.max_all()?)?);
            ensure!(
                lo > 0.0 && hi < 1.0,
                "disparity outside (0, 1): [{lo}, {hi}]"
            );
        }
        Ok(format!("{got:?}"))
    };
    let check_pose = |cfg: &PoseNetConfig, expect: [usize; 4]| -> Outcome {
        let store = ParamStore::inference(0, DType::F32, &DEV);
        let net = PoseNet::new(&store.root().pp("pose"), cfg)?;
        let f = net.encode(&pair, false)?;
        ensure!(f.dims() == expect, "PN4 shape {:?}", f.dims());
        Ok(format!("{:?}", f.dims()))
    };
    let deit = check_depth(
        &DepthNetConfig::deit_base(),
        &[
            [1, 96, 48, 160],
            [1, 768, 24, 80],
            [1, 1536, 12, 40],
            [1, 3072, 6, 20],
        ],
    )?;
    let deit_pose = check_pose(&PoseNetConfig::deit_base(false), [1, 2048, 12, 40])?;
    let pvt = check_depth(
        &DepthNetConfig::pvt_b4(),
        &[
            [1, 64, 48, 160],
            [1, 128, 24, 80],
            [1, 320, 12, 40],
            [1, 512, 6, 20],
        ],
    )?;
    let pvt_pose = check_pose(&PoseNetConfig::pvt_b4(false), [1, 512, 6, 20])?;
    Ok(format!(
        "DeiT {deit} PN4 {deit_pose}; PVT {pvt} PN4 {pvt_pose}"
    ))
}

fn loss_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = LossConfig::default();
    let x = random_tensor(&mut rng, &[2, 3, 16, 24], 0.0, 1.0)?;
    let s = ssim(&x, &x, cfg.ssim_c1, cfg.ssim_c2)?;
    let ssim_gap = scalar(&(s - 1.0)?.abs()?.max_all()?)?;
    ensure!(ssim_gap < 1e-6, "ssim(x, x) off by {ssim_gap:e}");

    // Static triplet: both sources equal the target. Synthesized views come
    // from a non-trivial warp so the warped error is generally positive.
    let noise = (random_tensor(&mut rng, &[2, 1, 16, 24], 0.0, 1.0)? * cfg.identity_noise)?;
    let k = Tensor::new(&[[20.0f64, 20.0, 12.0, 8.0], [20.0, 20.0, 12.0, 8.0]], &DEV)?;
    let depth = Tensor::full(5.0f64, (2, 1, 16, 24), &DEV)?;
    let tr =
        BatchTransform::from_transforms(&[transform([0.0, 0.02, 0.0], [0.1, 0.0, 0.0]); 2], &DEV)?;
    let warped = synthesize_view(&x, &depth, &tr, &k)?;
    let synth = vec![warped.image.clone(), x.clone()];
    let sources = vec![x.clone(), x.clone()];
    let rep = min_reprojection_with_automask(&x, &synth, None, &sources, Some(&noise), &cfg)?;
    ensure!(
        rep.coverage.abs() < 1e-6,
        "auto-mask keeps {} of a static triplet",
        rep.coverage
    );

    // The same through the full objective of an untrained model.
    let model = SfmModel::new(
        &ModelConfig::preset(Architecture::Tiny, false),
        0,
        DType::F32,
        &DEV,
    )?;
    let frame = Tensor::rand(0f32, 1.0, (1, 3, 64, 96), &DEV)?;
    let kf = Tensor::new(&[[60.0f32, 60.0, 48.0, 32.0]], &DEV)?;
    let inputs = ObjectiveInputs {
        prev: Some(FrameView::same(&frame)),
        center: FrameView::same(&frame),
        next: Some(FrameView::same(&frame)),
        intrinsics: Some(&kf),
    };
    let obj = sfm_objective(&model, &inputs, IntrinsicsMode::Given, &cfg, false, 3)?;
    ensure!(
        obj.report.mask_coverage.abs() < 1e-6,
        "objective keeps {}",
        obj.report.mask_coverage
    );

    let flat = Tensor::full(0.37f64, (2, 1, 16, 24), &DEV)?;
    let sm = scalar(&smoothness(&flat, &x)?)?.abs();
    ensure!(sm < 1e-6, "smoothness of a constant map is {sm:e}");
    Ok(format!(
        "ssim gap {ssim_gap:.1e}, static coverage {}, smoothness {sm:.1e}",
        rep.coverage
    ))
}

// ---------------------------------------------------------------------------

struct Overfit {
    model: SfmModel,
    summary: TrainSummary,
    train_cfg: TrainConfig,
    held_out: Vec<ImageTriplet>,
    seconds: f64,
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        width: 192,
        height: 64,
        batch_size: 4,
        epochs: 1000,
        decay_epoch: 999,
        max_steps: Some(200),
        lr: Some(1e-3),
        augment: AugmentConfig::off(),
        intrinsics: IntrinsicsMode::Learned,
        ..Default::default()
    }
}

fn run_overfit() -> Result<Overfit, Box<dyn std::error::Error>> {
    let triplets = generate_triplets(&SyntheticConfig {
        seed: 1,
        ..Default::default()
    })?;
    let dataset = Dataset::from_triplets(triplets).truncate(50);
    if dataset.len() != 50 {
        return Err(format!("expected 50 triplets, got {}", dataset.len()).into());
    }
    let held_out = generate_triplets(&SyntheticConfig {
        seed: 99,
        sequences: 2,
        ..Default::default()
    })?;
    let model = SfmModel::new(
        &ModelConfig::preset(Architecture::Tiny, true),
        0,
        DType::F32,
        &DEV,
    )?;
    let train_cfg = overfit_config();
    let t = Instant::now();
    let summary = train(&train_cfg, &model, &dataset, None)?;
    Ok(Overfit {
        model,
        summary,
        train_cfg,
        held_out,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn centers(ts: &[ImageTriplet], i: usize) -> candle_core::Result<Tensor> {
    let imgs: Vec<&Array3<f32>> = ts.iter().map(|t| &t.frames[i]).collect();
    stack(&imgs, DType::F32, &DEV).map_err(candle_core::Error::wrap)
}

fn gt_depths(ts: &[ImageTriplet]) -> Vec<Array2<f64>> {
    ts.iter()
        .map(|t| t.depth.as_ref().expect("synthetic depth").mapv(f64::from))
        .collect()
}

fn overfit_smoke(run: &Overfit) -> Outcome {
    let losses: Vec<f64> = run.summary.records.iter().map(|r| r.loss).collect();
    ensure!(losses.len() == 200, "{} steps recorded", losses.len());
    let first = losses[..10].iter().sum::<f64>() / 10.0;
    let last = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    let ratio = last / first;
    let x = centers(&run.held_out, 1)?;
    let disp = predict_disparity(&run.model, &x)?.to_dtype(DType::F64)?;
    let mut rhos = Vec::new();
    for (i, t) in run.held_out.iter().enumerate() {
        let d = disp.get(i)?.flatten_all()?.to_vec1::<f64>()?;
        let inv: Vec<f64> = t
            .depth
            .as_ref()
            .ok_or("missing depth")?
            .iter()
            .map(|&z| 1.0 / f64::from(z))
            .collect();
        rhos.push(spearman(&d, &inv));
    }
    let rho = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let minutes = run.seconds / 60.0;
    ensure!(ratio < 0.5, "loss ratio {ratio:.3}");
    ensure!(rho > 0.5, "held-out Spearman {rho:.3}");
    ensure!(minutes < 10.0, "training took {minutes:.1} min");
    Ok(format!(
        "loss {first:.4} -> {last:.4} (ratio {ratio:.3}), held-out Spearman {rho:.3} over {} frames, train {:.0}s",
        rhos.len(),
        run.seconds
    ))
}

fn intrinsics_head(run: &Overfit) -> Outcome {
    // Positivity along the whole run and on held-out pairs.
    let logged: Vec<[f64; 4]> = run
        .summary
        .records
        .iter()
        .filter_map(|r| r.intrinsics)
        .collect();
    ensure!(
        logged.len() == run.summary.records.len(),
        "steps without predicted intrinsics"
    );
    ensure!(
        logged.iter().all(|k| k[0] > 0.0 && k[1] > 0.0),
        "non-positive focal length during training"
    );
    let prev = centers(&run.held_out, 0)?;
    let center = centers(&run.held_out, 1)?;
    let out = run.model.pose().forward(&prev, &center, false)?;
    let k = out
        .intrinsics
        .ok_or("no intrinsics head")?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    ensure!(
        k.iter().all(|r| r[0] > 0.0 && r[1] > 0.0),
        "non-positive held-out focal length"
    );
    let fx = k.iter().map(|r| r[0]).sum::<f64>() / k.len() as f64;
    let gt = run.held_out[0].intrinsics.ok_or("missing gt intrinsics")?;
    let fx_err = 100.0 * (fx - gt.fx) / gt.fx;

    // Gradient reaches both the focal and the principal-point branch.
    let model = SfmModel::new(
        &ModelConfig::preset(Architecture::Tiny, true),
        5,
        DType::F32,
        &DEV,
    )?;
    let next = centers(&run.held_out[..2], 2)?;
    let (prev, center) = (
        centers(&run.held_out[..2], 0)?,
        centers(&run.held_out[..2], 1)?,
    );
    let inputs = ObjectiveInputs {
        prev: Some(FrameView::same(&prev)),
        center: FrameView::same(&center),
        next: Some(FrameView::same(&next)),
        intrinsics: None,
    };
    let obj = sfm_objective(
        &model,
        &inputs,
        IntrinsicsMode::Learned,
        &run.train_cfg.loss,
        true,
        0,
    )?;
    let grads = obj.loss.backward()?;
    let mut reached = Vec::new();
    for branch in ["focal", "principal"] {
        let params: Vec<_> = model
            .store()
            .trainable()
            .into_iter()
            .filter(|(n, _)| n.contains(&format!("intrinsics.{branch}")))
            .collect();
        ensure!(!params.is_empty(), "no {branch} parameters");
        let mut norm = 0.0;
        for (_, v) in &params {
            if let Some(g) = grads.get(v.as_tensor()) {
                norm += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        ensure!(
            norm > 0.0 && norm.is_finite(),
            "{branch} branch gets no gradient"
        );
        reached.push(format!("{branch} |g|={:.1e}", norm.sqrt()));
    }
    Ok(format!(
        "fx {fx:.2} vs gt {:.2}: signed error {fx_err:+.1}% (reported only); {}",
        gt.fx,
        reached.join(", ")
    ))
}

fn attack_engine(run: &Overfit) -> Outcome {
    for kind in [
        AttackKind::UntargetedPgd,
        AttackKind::TargetedHflip,
        AttackKind::TargetedVflip,
    ] {
        for &eps in kind.epsilons() {
            let expect = ((eps + 4.0).min((1.25 * eps).ceil())) as usize;
            let spec = AttackSpec::new(kind, eps)?;
            ensure!(
                iterations(eps) == expect && spec.iterations() == expect,
                "{kind:?} eps {eps}: {} iterations, expected {expect}",
                spec.iterations()
            );
        }
    }
    ensure!(
        iterations(2.0) == 3 && iterations(16.0) == 20,
        "worked examples"
    );

    let model = &run.model;
    let loss_cfg = &run.train_cfg.loss;
    let mode = IntrinsicsMode::Learned;
    let small = &run.held_out[..2];
    let frames = AttackFrames {
        prev: Some(centers(small, 0)?),
        center: centers(small, 1)?,
        next: Some(centers(small, 2)?),
    };
    let range = (loss_cfg.min_depth, loss_cfg.max_depth);
    let mut worst = 0.0f64;
    let mut budget_check =
        |adv: &Tensor, clean: &Tensor, eps: f64| -> Result<(), Box<dyn std::error::Error>> {
            let d = max_abs_diff(adv, clean)?;
            let lo = scalar(&adv.min_all()?)?;
            let hi = scalar(&adv.max_all()?)?;
            // f32 rounding of clean +- eps/255 may overshoot by half an ulp.
            ensure!(
                d <= eps / 255.0 + 1e-7,
                "eps {eps}: L-inf {d} exceeds {}",
                eps / 255.0
            );
            ensure!(lo >= 0.0 && hi <= 1.0, "eps {eps}: pixels outside [0, 1]");
            worst = worst.max(d * 255.0 / eps.max(1e-12));
            Ok(())
        };
    for &eps in AttackKind::UntargetedPgd.epsilons() {
        let spec = AttackSpec::new(AttackKind::UntargetedPgd, eps)?;
        let r = pgd_untargeted(model, &frames, None, mode, loss_cfg, &spec, 0)?;
        budget_check(&r.images.center, &frames.center, eps)?;
        budget_check(
            r.images.prev.as_ref().unwrap(),
            frames.prev.as_ref().unwrap(),
            eps,
        )?;
        budget_check(
            r.images.next.as_ref().unwrap(),
            frames.next.as_ref().unwrap(),
            eps,
        )?;
    }
    for kind in [AttackKind::TargetedHflip, AttackKind::TargetedVflip] {
        for &eps in kind.epsilons() {
            let r =
                targeted_flip_attack(model, &frames.center, &AttackSpec::new(kind, eps)?, range)?;
            budget_check(&r.images, &frames.center, eps)?;
        }
    }
    for kind in [
        AttackKind::UntargetedPgd,
        AttackKind::TargetedHflip,
        AttackKind::TargetedVflip,
    ] {
        let spec = AttackSpec::new(kind, 0.0)?;
        let same = if kind == AttackKind::UntargetedPgd {
            let r = pgd_untargeted(model, &frames, None, mode, loss_cfg, &spec, 0)?;
            max_abs_diff(&r.images.center, &frames.center)? == 0.0
                && max_abs_diff(
                    r.images.prev.as_ref().unwrap(),
                    frames.prev.as_ref().unwrap(),
                )? == 0.0
                && max_abs_diff(
                    r.images.next.as_ref().unwrap(),
                    frames.next.as_ref().unwrap(),
                )? == 0.0
        } else {
            max_abs_diff(
                &targeted_flip_attack(model, &frames.center, &spec, range)?.images,
                &frames.center,
            )? == 0.0
        };
        ensure!(same, "{kind:?} at eps 0 changed the input");
    }

    // Effect on the trained model, over all held-out frames.
    let all = AttackFrames {
        prev: Some(centers(&run.held_out, 0)?),
        center: centers(&run.held_out, 1)?,
        next: Some(centers(&run.held_out, 2)?),
    };
    let gts = gt_depths(&run.held_out);
    let eval = EvalConfig::default();
    let rmse = |x: &Tensor| -> Result<f64, Box<dyn std::error::Error>> {
        let preds = predict_depth(model, x, range, None)?;
        Ok(evaluate_depth_maps(&preds, &gts, &eval)?
            .mean
            .ok_or("no valid frames")?
            .rmse)
    };
    let clean_rmse = rmse(&all.center)?;
    let spec = AttackSpec::new(AttackKind::UntargetedPgd, 4.0)?;
    let adv = pgd_untargeted(model, &all, None, mode, loss_cfg, &spec, 0)?;
    let adv_rmse = rmse(&adv.images.center)?;
    ensure!(
        adv_rmse > clean_rmse,
        "PGD eps 4: RMSE {adv_rmse:.4} not above clean {clean_rmse:.4}"
    );

    let mut flips = Vec::new();
    for (kind, horizontal) in [
        (AttackKind::TargetedHflip, true),
        (AttackKind::TargetedVflip, false),
    ] {
        let spec = AttackSpec::new(kind, 4.0)?;
        let r = targeted_flip_attack(model, &all.center, &spec, range)?;
        let before = flip_target_rmse(model, &all.center, &all.center, horizontal, range)?;
        let after = flip_target_rmse(model, &all.center, &r.images, horizontal, range)?;
        ensure!(
            after < before,
            "{kind:?}: RMSE to flipped target {after:.4} not below {before:.4}"
        );
        flips.push(format!("{} {before:.3}->{after:.3}", kind.name()));
    }
    Ok(format!(
        "iterations match; worst budget use {worst:.3}; PGD eps 4 RMSE {clean_rmse:.4}->{adv_rmse:.4}; {}",
        flips.join(", ")
    ))
}

// ---------------------------------------------------------------------------

fn corruption_engine() -> Outcome {
    let img = generate_triplets(&SyntheticConfig {
        sequences: 1,
        frames_per_sequence: 3,
        ..Default::default()
    })?
    .remove(0)
    .frames[1]
        .clone();
    ensure!(
        CorruptionKind::ALL.len() == 15,
        "{} kinds",
        CorruptionKind::ALL.len()
    );
    let mut runs = 0;
    for kind in CorruptionKind::ALL {
        for severity in 1..=5u8 {
            let spec = CorruptionSpec::new(kind, severity, 11)?;
            let a = corrupt(&img, &spec)?;
            let b = corrupt(&img, &spec)?;
            ensure!(a.dim() == img.dim(), "{kind}:{severity} changed the shape");
            ensure!(
                a.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
                "{kind}:{severity} produced values outside [0, 1]"
            );
            ensure!(
                a.iter()
                    .zip(b.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{kind}:{severity} is not deterministic"
            );
            runs += 1;
        }
    }
    ensure!(
        CorruptionSpec::new(CorruptionKind::Fog, 6, 0).is_err(),
        "severity 6 accepted"
    );

    let grey = Array3::from_elem((3, 128, 128), 0.5f32);
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 3)?;
    let mut noise: Vec<f64> = corrupt(&grey, &spec)?
        .iter()
        .map(|&v| f64::from(v) - 0.5)
        .collect();
    noise.sort_by(f64::total_cmp);
    let q = |p: f64| noise[(p * (noise.len() - 1) as f64).round() as usize];
    // The interquartile range is untouched by clipping at 0 and 1.
    let sigma = (q(0.75) - q(0.25)) / 1.349;
    let reference = CorruptionKind::GaussianNoise.params(5)?[0];
    let rel = (sigma - reference).abs() / reference;
    ensure!(rel < 0.1, "gaussian-noise sigma {sigma:.4} vs {reference}");
    Ok(format!(
        "{runs} runs byte-deterministic; sigma {sigma:.4} vs {reference} ({:.1}%)",
        100.0 * rel
    ))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(3..20), rng.random_range(3..20));
        let gt = Array2::from_shape_fn((h, w), |_| rng.random_range(0.5..80.0));
        let pred = Array2::from_shape_fn((h, w), |(y, x)| gt[[y, x]] * rng.random_range(0.5..1.8));
        let mut mask = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.7));
        mask[[0, 0]] = true;
        let got = depth_metrics(pred.view(), gt.view(), mask.view())?.values();
        let want = naive_depth_metrics(&pred, &gt, &mask);
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(
        worst <= 1e-10,
        "depth metrics differ from the loop oracle by {worst:e}"
    );

    let (gt, pred) = noisy_trajectory(10, 15.0, 3);
    let mut odo = Vec::new();
    for lengths in [
        vec![100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0],
        vec![20.0, 50.0, 100.0],
    ] {
        let cfg = OdometryConfig {
            lengths: lengths.clone(),
            ..Default::default()
        };
        let got = odometry_metrics(&pred, &gt, &cfg)?.ok_or("no segments")?;
        let (t, r, n) =
            brute_force_odometry(&pred, &gt, &lengths).ok_or("oracle found no segments")?;
        ensure!(
            got.segments == n
                && relative_gap(got.t_err, t) < 1e-9
                && relative_gap(got.r_err, r) < 1e-9,
            "odometry {got:?} vs oracle ({t}, {r}, {n})"
        );
        odo.push(format!("{n} segs t {t:.3}% r {r:.3}"));
    }

    // One degree of heading drift per 100 units of travel.
    let gt = drive(1000, 1.0, 0.0);
    let pred = drive(1000, 1.0, 0.01f64.to_radians());
    let m = odometry_metrics(&pred, &gt, &OdometryConfig::default())?.ok_or("no segments")?;
    ensure!(
        (m.r_err - 1.0).abs() <= 0.05,
        "bias construction r_err {}",
        m.r_err
    );
    Ok(format!(
        "depth worst gap {worst:.1e}; odometry matches oracle ({}); bias r_err {:.4}",
        odo.join("; "),
        m.r_err
    ))
}

fn protocol_invariance(run: &Overfit) -> Outcome {
    let range = (run.train_cfg.loss.min_depth, run.train_cfg.loss.max_depth);
    let preds = predict_depth(&run.model, &centers(&run.held_out, 1)?, range, None)?;
    let gts = gt_depths(&run.held_out);
    let cfg = EvalConfig::default();
    let base = evaluate_depth_maps(&preds, &gts, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rand_gt: Vec<Array2<f64>> = (0..20)
        .map(|_| Array2::from_shape_fn((12, 17), |_| f64::from(rng.random_range(1.0f32..70.0))))
        .collect();
    let rand_pred: Vec<Array2<f64>> = (0..20)
        .map(|_| Array2::from_shape_fn((12, 17), |_| f64::from(rng.random_range(0.2f32..20.0))))
        .collect();
    let rand_base = evaluate_depth_maps(&rand_pred, &rand_gt, &cfg)?;
    for c in [0.5, 1.0, 3.0] {
        let scaled: Vec<Array2<f64>> = preds.iter().map(|p| p * c).collect();
        let e = evaluate_depth_maps(&scaled, &gts, &cfg)?;
        ensure!(
            e.mean == base.mean && e.per_image == base.per_image,
            "model predictions differ at c = {c}"
        );
        let scaled: Vec<Array2<f64>> = rand_pred.iter().map(|p| p * c).collect();
        let e = evaluate_depth_maps(&scaled, &rand_gt, &cfg)?;
        ensure!(
            e.mean == rand_base.mean && e.per_image == rand_base.per_image,
            "random predictions differ at c = {c}"
        );
    }
    let m = base.mean.ok_or("no valid frames")?;
    Ok(format!(
        "bit-identical for c in {{0.5, 1, 3}} ({} model + 20 random maps); abs rel {:.4}",
        preds.len(),
        m.abs_rel
    ))
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, limit: Option<f64>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(e)) => (false, e.to_string()),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()),
        ),
    };
    let (ok, detail) = match limit {
        Some(l) if ok && secs >= l => (false, format!("{detail}; exceeded {l}s budget")),
        _ => (ok, detail),
    };
    println!(
        "criterion {id:>2} {} {name}: {detail} [{secs:.1}s]",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn main() {
    let mut ok = true;
    ok &= report(1, "geometry oracle", Some(1.0), geometry_oracle);
    ok &= report(2, "gradient checks", Some(60.0), gradient_checks);
    ok &= report(3, "architecture shape contract", None, shape_contract);
    ok &= report(4, "loss-suite properties", Some(10.0), loss_properties);

    let t = Instant::now();
    let run = run_overfit();
    let train_secs = t.elapsed().as_secs_f64();
    match &run {
        Ok(run) => {
            ok &= report(5, "overfit smoke test", None, || overfit_smoke(run));
            ok &= report(6, "intrinsics head", None, || intrinsics_head(run));
            ok &= report(7, "attack engine", None, || attack_engine(run));
        }
        Err(e) => {
            for (id, name) in [
                (5, "overfit smoke test"),
                (6, "intrinsics head"),
                (7, "attack engine"),
            ] {
                println!(
                    "criterion {id:>2} FAIL {name}: overfit run failed: {e} [{train_secs:.1}s]"
                );
            }
            ok = false;
        }
    }
    ok &= report(8, "corruption engine", None, corruption_engine);
    ok &= report(9, "metric oracles", None, metric_oracles);
    match &run {
        Ok(run) => ok &= report(10, "protocol invariance", None, || protocol_invariance(run)),
        Err(e) => {
            println!("criterion 10 FAIL protocol invariance: overfit run failed: {e}");
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
