//! Constant-velocity teacher flows and the teacher/student training step.
//!
//! Over a fraction `alpha` of the frame interval a point under uniform motion
//! covers `alpha` times its full displacement. The model's own full-interval
//! prediction, scaled and detached, supervises a second prediction made
//! against features warped part of the way.

use kineflow_tensor::{Float, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{kgl_total_var, kinetics_loss_var, LossConfig, PerceptualExtractor};
use crate::model::{FlowNet, Model};
use crate::nn::Ctx;
use crate::types::{debug_validate, FlowField, FlowSequence, Frame, RngSeed};
use crate::warp::{scale_flow, PayloadKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaSampling {
    Fixed { alpha: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticsConfig {
    /// How the time fraction is drawn, once per batch.
    pub alpha: AlphaSampling,
    /// Keep the encoder fixed during this phase.
    pub freeze_encoder: bool,
}

impl Default for KineticsConfig {
    fn default() -> Self {
        Self {
            alpha: AlphaSampling::Uniform { lo: 0.1, hi: 0.9 },
            freeze_encoder: false,
        }
    }
}

fn open_unit(a: f64) -> bool {
    a > 0.0 && a < 1.0
}

impl KineticsConfig {
    pub fn check(&self) -> Result<()> {
        let ok = match self.alpha {
            AlphaSampling::Fixed { alpha } => open_unit(alpha),
            AlphaSampling::Uniform { lo, hi } => open_unit(lo) && open_unit(hi) && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("kinetics.alpha", "values must lie in (0, 1) with lo <= hi"))
        }
    }

    /// The time fraction for training step `step`.
    pub fn sample_alpha(&self, seed: RngSeed, step: u64) -> f64 {
        match self.alpha {
            AlphaSampling::Fixed { alpha } => alpha,
            AlphaSampling::Uniform { lo, hi } => {
                let u: f64 = seed.rng_for("alpha", step).random();
                lo + (hi - lo) * u
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if open_unit(alpha) {
        Ok(())
    } else {
        Err(Error::Range(format!("alpha = {alpha} is outside (0, 1)")))
    }
}

/// `alpha * flow`, with `alpha` rounded to `f32` first; the valid mask is kept.
pub fn motion_generator(full_flow: &FlowField, alpha: f64) -> Result<FlowField> {
    check_alpha(alpha)?;
    let a = alpha as f32;
    Ok(full_flow.map(|v| a * v))
}

/// Graph form of [`motion_generator`]; the result carries no gradient.
pub fn motion_generator_var<T: Float>(full_flow: &Var<T>, alpha: f64) -> Result<Var<T>> {
    check_alpha(alpha)?;
    Ok(full_flow.detach().scale(alpha))
}

/// Graph-level results of one teacher/student pass.
pub struct KglOutput<T: Float> {
    pub total: Var<T>,
    pub kinetics: Var<T>,
    pub perceptual: Var<T>,
    /// `[B, 2, H, W]`, detached.
    pub teacher: Var<T>,
    pub student: Vec<Var<T>>,
    /// Full-interval prediction the teacher was made from.
    pub full: Var<T>,
}

/// Teacher from the full-interval forward flow; features of frame 0 warped to
/// time `alpha` by WarpNet in single-flow mode; student from frame 0 and the
/// warped features. The perceptual term compares frame 0 with frame 1 warped
/// back by the detached bidirectional prediction.
pub fn kgl_forward<T: Float>(
    net: &FlowNet,
    ctx: &Ctx<T>,
    ext: &PerceptualExtractor,
    i0: &Var<T>,
    i1: &Var<T>,
    alpha: f64,
    loss_cfg: &LossConfig,
) -> Result<KglOutput<T>> {
    let (_, _, h, w) = i0.value().dims4();
    let fl = net.flows(ctx, i0, i1, true)?;
    let full = fl.fwd.last().expect("N >= 1").clone();
    let bwd = fl.bwd.as_ref().and_then(|b| b.last()).expect("bidirectional").clone();
    let teacher = motion_generator_var(&full, alpha)?;

    // Backward-warping F0 by -alpha * f moves its content alpha of the way along f.
    let (_, _, fh, fw) = fl.feat0.value().dims4();
    let to_mid = scale_flow(&teacher.neg(), fh, fw);
    let mid = net
        .warpnet
        .forward(ctx, &fl.feat0, PayloadKind::Features, &to_mid, None)?
        .warped;
    let (student, _) = net.motion(ctx, &fl.feat0, &mid, (h, w), false)?;
    let kinetics = kinetics_loss_var(&teacher, &student, loss_cfg.gamma)?;

    let back = net
        .warpnet
        .forward(ctx, i1, PayloadKind::Frame, &full.detach(), Some(&bwd.detach()))?;
    let perceptual = ext.loss_var(i0, &back.warped, loss_cfg)?;
    let total = kgl_total_var(&kinetics, &perceptual, loss_cfg);
    Ok(KglOutput {
        total,
        kinetics,
        perceptual,
        teacher,
        student,
        full,
    })
}

/// Domain-level teacher/student pass for one frame pair at a given `alpha`.
/// Returns the loss, the teacher flow and the student predictions.
pub fn kgl_step(
    model: &Model,
    ext: &PerceptualExtractor,
    i0: &Frame,
    i1: &Frame,
    alpha: f64,
    loss_cfg: &LossConfig,
) -> Result<(f64, FlowField, FlowSequence)> {
    debug_validate(i0)?;
    debug_validate(i1)?;
    if i0.dims() != i1.dims() {
        return Err(Error::ShapeMismatch(format!("frames {:?} and {:?}", i0.dims(), i1.dims())));
    }
    let ctx = Ctx::new(&model.params, false);
    let out = kgl_forward(
        &model.net,
        &ctx,
        ext,
        &ctx.constant(i0.to_array()),
        &ctx.constant(i1.to_array()),
        alpha,
        loss_cfg,
    )?;
    let student = FlowSequence::new(out.student.iter().map(|v| FlowField::from_array(v.value(), 0)).collect())?;
    Ok((
        out.total.item().as_f64(),
        FlowField::from_array(out.teacher.value(), 0),
        student,
    ))
}
