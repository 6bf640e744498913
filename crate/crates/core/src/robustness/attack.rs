//! Gradient-sign attacks with an L-infinity budget on the 0-255 scale.

use std::fmt;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::depth::disparity_to_depth;
use crate::error::{bail, Error, Result};
use crate::losses::LossConfig;
use crate::model::SfmModel;
use crate::train::{sfm_objective, FrameView, IntrinsicsMode, ObjectiveInputs};

/// Budgets evaluated for the untargeted attack.
pub const UNTARGETED_EPSILONS: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
/// Budgets evaluated for the flip attacks.
pub const TARGETED_EPSILONS: [f64; 3] = [1.0, 2.0, 4.0];
/// Per-iteration step on the 0-255 scale.
pub const STEP_SIZE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    UntargetedPgd,
    TargetedHflip,
    TargetedVflip,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::UntargetedPgd => "pgd",
            Self::TargetedHflip => "hflip",
            Self::TargetedVflip => "vflip",
        }
    }

    pub fn epsilons(self) -> &'static [f64] {
        match self {
            Self::UntargetedPgd => &UNTARGETED_EPSILONS,
            _ => &TARGETED_EPSILONS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Budget on the 0-255 scale.
    pub epsilon: f64,
}

/// `min(eps + 4, ceil(1.25 eps))`.
pub fn iterations(epsilon: f64) -> usize {
    (epsilon + 4.0)
        .min((1.25 * epsilon).ceil())
        .floor()
        .max(0.0) as usize
}

impl AttackSpec {
    /// `epsilon` must be one of the kind's budgets, or zero.
    pub fn new(kind: AttackKind, epsilon: f64) -> Result<Self> {
        if epsilon != 0.0 && !kind.epsilons().contains(&epsilon) {
            bail!(
                Config,
                "epsilon {epsilon} is not in the {} grid {:?}",
                kind.name(),
                kind.epsilons()
            );
        }
        Ok(Self { kind, epsilon })
    }

    /// Parse `pgd:<eps>`, `hflip:<eps>` or `vflip:<eps>`.
    pub fn parse(s: &str) -> Result<Self> {
        let (k, e) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("attack spec `{s}` is not `kind:epsilon`")))?;
        let kind = match k.trim().to_ascii_lowercase().as_str() {
            "pgd" | "untargeted-pgd" => AttackKind::UntargetedPgd,
            "hflip" | "targeted-hflip" => AttackKind::TargetedHflip,
            "vflip" | "targeted-vflip" => AttackKind::TargetedVflip,
            _ => {
                return Err(Error::Unknown {
                    what: "attack",
                    value: k.to_string(),
                })
            }
        };
        let epsilon: f64 = e
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad epsilon `{e}` in `{s}`")))?;
        Self::new(kind, epsilon)
    }

    pub fn iterations(&self) -> usize {
        iterations(self.epsilon)
    }

    fn radius(&self) -> f64 {
        self.epsilon / 255.0
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.epsilon)
    }
}

/// Adversarial images and the attacked objective before each step and after
/// the last one.
#[derive(Debug, Clone)]
pub struct AttackResult<T> {
    pub images: T,
    pub objective: Vec<f64>,
}

/// Signed step, then projection onto the budget ball and the image range.
fn project_step(
    x: &Tensor,
    grad: &Tensor,
    clean: &Tensor,
    step: f64,
    radius: f64,
) -> Result<Tensor> {
    let moved = (x + (grad.sign()? * step)?)?;
    let lo = (clean - radius)?;
    let hi = (clean + radius)?;
    Ok(moved.maximum(&lo)?.minimum(&hi)?.clamp(0.0, 1.0)?)
}

/// Frames of one attacked sample set; `prev`/`next` may be absent at
/// sequence boundaries.
#[derive(Debug, Clone)]
pub struct AttackFrames {
    pub prev: Option<Tensor>,
    pub center: Tensor,
    pub next: Option<Tensor>,
}

/// Ascend the training objective with respect to every available frame.
pub fn pgd_untargeted(
    model: &SfmModel,
    frames: &AttackFrames,
    intrinsics: Option<&Tensor>,
    mode: IntrinsicsMode,
    loss_cfg: &LossConfig,
    spec: &AttackSpec,
    noise_seed: u64,
) -> Result<AttackResult<AttackFrames>> {
    let clean: Vec<Option<Tensor>> = vec![
        frames.prev.clone(),
        Some(frames.center.clone()),
        frames.next.clone(),
    ];
    let mut adv = clean.clone();
    let mut objective = Vec::new();
    let n = if spec.epsilon == 0.0 {
        0
    } else {
        spec.iterations()
    };
    let eval = |adv: &[Option<Tensor>], vars: bool| -> Result<(f64, Option<Vec<Option<Tensor>>>)> {
        let vs: Vec<Option<Var>> = adv
            .iter()
            .map(|t| {
                t.as_ref()
                    .map(|t| {
                        if vars {
                            Var::from_tensor(t)
                        } else {
                            Var::from_tensor(&t.detach())
                        }
                    })
                    .transpose()
            })
            .collect::<candle_core::Result<_>>()?;
        let ts: Vec<Option<&Tensor>> = vs
            .iter()
            .map(|v| v.as_ref().map(|v| v.as_tensor()))
            .collect();
        let inputs = ObjectiveInputs {
            prev: ts[0].map(FrameView::same),
            center: FrameView::same(ts[1].expect("centre frame")),
            next: ts[2].map(FrameView::same),
            intrinsics,
        };
        let obj = sfm_objective(model, &inputs, mode, loss_cfg, false, noise_seed)?;
        if !vars {
            return Ok((obj.report.total, None));
        }
        let grads = obj.loss.backward()?;
        let g = ts
            .iter()
            .map(|t| {
                t.map(|t| {
                    grads
                        .get(t)
                        .cloned()
                        .unwrap_or_else(|| t.zeros_like().expect("zeros"))
                })
            })
            .collect();
        Ok((obj.report.total, Some(g)))
    };
    for _ in 0..n {
        let (value, grads) = eval(&adv, true)?;
        objective.push(value);
        let grads = grads.expect("requested");
        for k in 0..3 {
            if let (Some(x), Some(g), Some(c)) = (&adv[k], &grads[k], &clean[k]) {
                adv[k] = Some(project_step(x, g, c, STEP_SIZE / 255.0, spec.radius())?.detach());
            }
        }
    }
    objective.push(eval(&adv, false)?.0);
    let mut it = adv.into_iter();
    Ok(AttackResult {
        images: AttackFrames {
            prev: it.next().flatten(),
            center: it.next().flatten().expect("centre frame"),
            next: it.next().flatten(),
        },
        objective,
    })
}

/// Depth the flip attack compares against.
fn depth_of(model: &SfmModel, image: &Tensor, range: (f64, f64)) -> Result<Tensor> {
    let disp = model.depth().forward(image, false)?;
    disparity_to_depth(disp.finest(), range.0, range.1)
}

fn rmse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?.sqrt()?)
}

/// Flip of a `(B, C, H, W)` tensor along width (`horizontal`) or height.
pub fn flip(t: &Tensor, horizontal: bool) -> Result<Tensor> {
    let dim = if horizontal { 3 } else { 2 };
    let n = t.dim(dim)?;
    let idx: Vec<u32> = (0..n as u32).rev().collect();
    let idx = Tensor::from_vec(idx, n, t.device())?;
    Ok(t.contiguous()?.index_select(&idx, dim)?)
}

/// Drive the depth prediction of `image` towards its own mirrored clean
/// prediction by descending the RMSE between the two.
pub fn targeted_flip_attack(
    model: &SfmModel,
    image: &Tensor,
    spec: &AttackSpec,
    depth_range: (f64, f64),
) -> Result<AttackResult<Tensor>> {
    let horizontal = match spec.kind {
        AttackKind::TargetedHflip => true,
        AttackKind::TargetedVflip => false,
        AttackKind::UntargetedPgd => bail!(Config, "targeted_flip_attack needs a flip attack spec"),
    };
    let target = flip(&depth_of(model, image, depth_range)?, horizontal)?.detach();
    let clean = image.detach();
    let mut adv = clean.clone();
    let mut objective = Vec::new();
    let n = if spec.epsilon == 0.0 {
        0
    } else {
        spec.iterations()
    };
    for _ in 0..n {
        let v = Var::from_tensor(&adv)?;
        let loss = rmse(&depth_of(model, v.as_tensor(), depth_range)?, &target)?;
        objective.push(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?);
        let grads = loss.backward()?;
        let g = grads
            .get(v.as_tensor())
            .cloned()
            .unwrap_or_else(|| adv.zeros_like().expect("zeros"));
        adv = project_step(&adv, &g.neg()?, &clean, STEP_SIZE / 255.0, spec.radius())?.detach();
    }
    let last = rmse(&depth_of(model, &adv, depth_range)?, &target)?;
    objective.push(last.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?);
    Ok(AttackResult {
        images: adv,
        objective,
    })
}

/// RMSE between the depth of `image` and the mirrored depth of `clean`.
pub fn flip_target_rmse(
    model: &SfmModel,
    clean: &Tensor,
    image: &Tensor,
    horizontal: bool,
    depth_range: (f64, f64),
) -> Result<f64> {
    let target = flip(&depth_of(model, clean, depth_range)?, horizontal)?;
    Ok(rmse(&depth_of(model, image, depth_range)?, &target)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}
