//! Training objectives.
//!
//! Each loss comes as a graph-level `*_var` function over tape values and a
//! plain function over domain types. Per-pixel L1 terms are averaged over
//! pixels, not summed, so the losses do not depend on resolution.

use std::path::Path;

use kineflow_tensor::{Array, Float, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Init;
use crate::resample::area_matrix;
use crate::types::{debug_validate, FlowField, FlowSequence, Frame, OcclusionMap, RngSeed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Sequence weight base; the last prediction has weight 1.
    pub gamma: f64,
    pub lambda_perc: f64,
    pub lambda_occ: f64,
    pub lambda_kin: f64,
    /// Downsampling factors of the perceptual pyramid.
    pub perc_scales: Vec<usize>,
    /// Extractor layers compared by the perceptual loss.
    pub perc_layers: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            lambda_perc: 1.0,
            lambda_occ: 1.0,
            lambda_kin: 1.0,
            perc_scales: vec![1, 2, 4],
            perc_layers: (0..PerceptualExtractor::LAYERS).collect(),
        }
    }
}

impl LossConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("loss.gamma", "must lie in (0, 1]"));
        }
        for (k, v) in [
            ("loss.lambda_perc", self.lambda_perc),
            ("loss.lambda_occ", self.lambda_occ),
            ("loss.lambda_kin", self.lambda_kin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be a nonnegative number"));
            }
        }
        if self.perc_scales.contains(&0) {
            return Err(Error::config("loss.perc_scales", "factors must be positive"));
        }
        if self.perc_layers.iter().any(|&i| i >= PerceptualExtractor::LAYERS) {
            return Err(Error::config(
                "loss.perc_layers",
                format!("layer indices must be below {}", PerceptualExtractor::LAYERS),
            ));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("gamma = {gamma} is outside (0, 1]")))
    }
}

/// Mean over valid pixels of `|du| + |dv|`. `valid` is `[B, 1, H, W]` with 0/1 entries.
pub fn flow_l1_var<T: Float>(pred: &Var<T>, gt: &Var<T>, valid: Option<&Var<T>>) -> Result<Var<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("flow {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let diff = pred.sub(gt).abs();
    match valid {
        None => {
            let (b, _, h, w) = pred.value().dims4();
            Ok(diff.sum_all().scale(1.0 / (b * h * w) as f64))
        }
        Some(m) => {
            let n: f64 = m.value().data().iter().map(|v| v.as_f64()).sum();
            if n == 0.0 {
                return Err(Error::EmptyValidSet);
            }
            Ok(diff.mul(m).sum_all().scale(1.0 / n))
        }
    }
}

/// `sum_i gamma^(N-i) * L1(pred_i, gt)`.
pub fn seq_l1_var<T: Float>(preds: &[Var<T>], gt: &Var<T>, valid: Option<&Var<T>>, gamma: f64) -> Result<Var<T>> {
    check_gamma(gamma)?;
    let n = preds.len();
    if n == 0 {
        return Err(Error::invariant("N >= 1", None));
    }
    let mut total: Option<Var<T>> = None;
    for (i, p) in preds.iter().enumerate() {
        let term = flow_l1_var(p, gt, valid)?.scale(gamma.powi((n - 1 - i) as i32));
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.expect("N >= 1"))
}

/// Sequence L1 against a stop-gradient teacher.
pub fn kinetics_loss_var<T: Float>(teacher: &Var<T>, student: &[Var<T>], gamma: f64) -> Result<Var<T>> {
    seq_l1_var(student, &teacher.detach(), None, gamma)
}

/// Mean absolute difference of occlusion maps.
pub fn occ_l1_var<T: Float>(pred: &Var<T>, gt: &Var<T>) -> Result<Var<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("occlusion {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok(pred.sub(gt).abs().mean_all())
}

pub fn ail_total_var<T: Float>(l1: &Var<T>, perc: &Var<T>, occ: Option<&Var<T>>, cfg: &LossConfig) -> Var<T> {
    let t = l1.add(&perc.scale(cfg.lambda_perc));
    match occ {
        Some(o) => t.add(&o.scale(cfg.lambda_occ)),
        None => t,
    }
}

pub fn kgl_total_var<T: Float>(kin: &Var<T>, perc: &Var<T>, cfg: &LossConfig) -> Var<T> {
    kin.scale(cfg.lambda_kin).add(&perc.scale(cfg.lambda_perc))
}

/// `L1 + lambda_perc * perceptual + lambda_occ * occlusion`; a missing
/// occlusion term counts as zero.
pub fn ail_total(l1: f64, perc: f64, occ: Option<f64>, cfg: &LossConfig) -> f64 {
    l1 + cfg.lambda_perc * perc + occ.map_or(0.0, |o| cfg.lambda_occ * o)
}

/// `lambda_kin * kinetics + lambda_perc * perceptual`.
pub fn kgl_total(kin: f64, perc: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_kin * kin + cfg.lambda_perc * perc
}

fn seq_vars(tape: &Tape<f64>, seq: &FlowSequence) -> Vec<Var<f64>> {
    seq.items().iter().map(|f| tape.constant(f.to_array())).collect()
}

fn check_seq(seq: &FlowSequence, gt: &FlowField) -> Result<()> {
    debug_validate(seq)?;
    debug_validate(gt)?;
    if !seq.last().same_size(gt) {
        return Err(Error::ShapeMismatch(format!(
            "predictions are {}x{}, target is {}x{}",
            seq.last().height(),
            seq.last().width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Gamma-weighted sequence L1 over the pixels `gt` marks valid.
pub fn seq_l1(preds: &FlowSequence, gt: &FlowField, gamma: f64) -> Result<f64> {
    check_seq(preds, gt)?;
    let tape = Tape::no_grad();
    let valid = gt.valid_array::<f64>().map(|a| tape.constant(a));
    Ok(seq_l1_var(&seq_vars(&tape, preds), &tape.constant(gt.to_array()), valid.as_ref(), gamma)?.item())
}

/// Gamma-weighted L1 between a teacher flow and each student prediction.
pub fn kinetics_loss(teacher: &FlowField, student: &FlowSequence, gamma: f64) -> Result<f64> {
    check_seq(student, teacher)?;
    let tape = Tape::no_grad();
    Ok(kinetics_loss_var(&tape.constant(teacher.to_array()), &seq_vars(&tape, student), gamma)?.item())
}

pub fn occ_l1(pred: &OcclusionMap, gt: &OcclusionMap) -> Result<f64> {
    debug_validate(pred)?;
    debug_validate(gt)?;
    let tape = Tape::<f64>::no_grad();
    Ok(occ_l1_var(&tape.constant(pred.to_array()), &tape.constant(gt.to_array()))?.item())
}

/// Fixed random convolutional pyramid standing in for a pretrained network.
///
/// Five 3x3 SiLU layers; the second and fourth have stride 2. Weights never
/// change during training.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    layers: Vec<(Array<f64>, Array<f64>, usize)>,
}

impl PerceptualExtractor {
    pub const LAYERS: usize = 5;
    const WIDTHS: [usize; 5] = [8, 16, 16, 32, 32];
    const STRIDES: [usize; 5] = [1, 2, 1, 2, 1];

    /// Seeded weights for `channels`-channel input.
    pub fn new(channels: usize, seed: RngSeed) -> Self {
        let mut init = Init::new(seed.rng_for("perceptual", 0));
        let mut cin = channels;
        let layers = (0..Self::LAYERS)
            .map(|i| {
                let cout = Self::WIDTHS[i];
                let w = init.scaled(vec![cout, cin, 3, 3], cin * 9, 2f64.sqrt());
                let b = Array::zeros(vec![cout]);
                cin = cout;
                (w, b, Self::STRIDES[i])
            })
            .collect();
        Self { layers }
    }

    /// The default extractor every loss uses unless told otherwise.
    pub fn standard(channels: usize) -> Self {
        Self::new(channels, RngSeed(0x5eed))
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].0.shape()[1]
    }

    /// Replaces the weights with `perceptual.layer{i}.weight` / `.bias`
    /// tensors from a safetensors file; shapes must match.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let file = crate::tensorfile::read_tensor_file(path)?;
        for (i, (w, b, _)) in self.layers.iter_mut().enumerate() {
            for (name, slot) in [(format!("perceptual.layer{i}.weight"), &mut *w), (format!("perceptual.layer{i}.bias"), b)] {
                let (_, a) = file
                    .tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
                if a.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch(format!("`{name}` is {:?}", a.shape())));
                }
                *slot = a.cast();
            }
        }
        Ok(())
    }

    /// Outputs of every layer for `[B, C, H, W]` input.
    pub fn features<T: Float>(&self, x: &Var<T>) -> Vec<Var<T>> {
        let tape = x.tape();
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (w, b, s) in &self.layers {
            h = h.conv2d(&tape.constant(w.cast()), Some(&tape.constant(b.cast())), *s, 1).silu();
            out.push(h.clone());
        }
        out
    }

    /// `sum_j sum_i mean|V_i(a_j) - V_i(b_j)|` over scales `j` and layers `i`.
    pub fn loss_var<T: Float>(&self, a: &Var<T>, b: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!("images {:?} vs {:?}", a.shape(), b.shape())));
        }
        let (_, c, h, w) = a.value().dims4();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "extractor expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let mut total = a.tape().constant(Array::scalar(T::zero()));
        for &j in &cfg.perc_scales {
            let (hj, wj) = ((h / j).max(1), (w / j).max(1));
            let down = |x: &Var<T>| {
                if j == 1 {
                    x.clone()
                } else {
                    x.resample2d(&area_matrix(hj, h), &area_matrix(wj, w))
                }
            };
            let (fa, fb) = (self.features(&down(a)), self.features(&down(b)));
            for &i in &cfg.perc_layers {
                total = total.add(&fa[i].sub(&fb[i]).abs().mean_all());
            }
        }
        Ok(total)
    }
}

/// Perceptual distance between two frames.
pub fn perceptual(ext: &PerceptualExtractor, a: &Frame, b: &Frame, cfg: &LossConfig) -> Result<f64> {
    debug_validate(a)?;
    debug_validate(b)?;
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("frames {:?} vs {:?}", a.dims(), b.dims())));
    }
    let tape = Tape::<f64>::no_grad();
    Ok(ext
        .loss_var(&tape.constant(a.to_array()), &tape.constant(b.to_array()), cfg)?
        .item())
}
