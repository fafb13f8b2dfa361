//! WarpNet: a small U-Net that predicts occlusion from a flow pair and
//! inpaints occluded pixels on top of the classical backward warp.

use kineflow_tensor::{Array, Float, Var};
use serde::{Deserialize, Serialize};

use super::{scale_flow, warp, CONSISTENCY_B};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, ParamStore};
use crate::resample::bilinear_matrix;
use crate::types::{debug_validate, FeatureMap, FlowField, Frame, OcclusionMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpNetConfig {
    /// Base channel width.
    pub width: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    /// Reject calls without a backward flow.
    pub require_backward: bool,
}

impl Default for WarpNetConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 3,
            require_backward: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Frame,
    Features,
}

/// Graph-level WarpNet result.
pub struct WarpOutput<T: Float> {
    /// `base * (1 - occ) + refine * occ`.
    pub warped: Var<T>,
    /// Occlusion probability, `[B, 1, H, W]`.
    pub occ: Var<T>,
    /// Classical backward warp of the payload.
    pub base: Var<T>,
}

/// Number of flow-derived input channels.
const FLOW_FEATURES: usize = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct WarpNet {
    pub cfg: WarpNetConfig,
    pub frame_channels: usize,
    pub feature_channels: usize,
    frame_in: Conv2d,
    feature_in: Conv2d,
    fuse: Conv2d,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    occ_head: Conv2d,
    frame_out: Conv2d,
    feature_out: Conv2d,
}

fn level_width(base: usize, level: usize) -> usize {
    if level <= 1 {
        base
    } else {
        2 * base
    }
}

impl WarpNet {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cfg: WarpNetConfig,
        frame_channels: usize,
        feature_channels: usize,
    ) -> Self {
        let dw = cfg.width;
        let n = |s: &str| format!("{prefix}.{s}");
        let frame_in = Conv2d::new(store, init, &n("frame_in"), frame_channels, dw, 1, 1, 1.0);
        let feature_in = Conv2d::new(store, init, &n("feature_in"), feature_channels, dw, 1, 1, 1.0);
        let fuse = Conv2d::new(store, init, &n("fuse"), 2 * dw + FLOW_FEATURES, dw, 1, 1, 1.0);
        let downs = (0..cfg.depth)
            .map(|e| {
                Conv2d::new(
                    store,
                    init,
                    &n(&format!("down{e}")),
                    level_width(dw, e),
                    level_width(dw, e + 1),
                    3,
                    2,
                    1.0,
                )
            })
            .collect();
        let ups = (0..cfg.depth)
            .map(|e| {
                let k = if e + 1 == cfg.depth { 3 } else { 1 };
                let cin = level_width(dw, e + 1) + level_width(dw, e);
                Conv2d::new(store, init, &n(&format!("up{e}")), cin, level_width(dw, e), k, 1, 1.0)
            })
            .collect();
        let occ_head = Conv2d::zeroed(store, &n("occ_head"), dw, 1, 3);
        let frame_out = Conv2d::zeroed(store, &n("frame_out"), dw, frame_channels, 3);
        let feature_out = Conv2d::zeroed(store, &n("feature_out"), dw, feature_channels, 3);
        Self {
            cfg,
            frame_channels,
            feature_channels,
            frame_in,
            feature_in,
            fuse,
            downs,
            ups,
            occ_head,
            frame_out,
            feature_out,
        }
    }

    /// Runs on `[B, C, H, W]` payloads with `[B, 2, H, W]` flows at the payload
    /// resolution. Without `bwd`, the forward flow fills both slots.
    pub fn forward<T: Float>(
        &self,
        ctx: &Ctx<T>,
        payload: &Var<T>,
        kind: PayloadKind,
        fwd: &Var<T>,
        bwd: Option<&Var<T>>,
    ) -> Result<WarpOutput<T>> {
        let (b, c, h, w) = payload.value().dims4();
        let want_c = match kind {
            PayloadKind::Frame => self.frame_channels,
            PayloadKind::Features => self.feature_channels,
        };
        if c != want_c {
            return Err(Error::ShapeMismatch(format!(
                "WarpNet expects {want_c} payload channels for {kind:?}, got {c}"
            )));
        }
        for f in std::iter::once(fwd).chain(bwd) {
            if f.shape() != [b, 2, h, w] {
                return Err(Error::ShapeMismatch(format!(
                    "flow {:?} does not match payload {:?}",
                    f.shape(),
                    payload.shape()
                )));
            }
        }
        if bwd.is_none() && self.cfg.require_backward {
            return Err(Error::Mode("this WarpNet requires a backward flow".into()));
        }
        let bwd = bwd.unwrap_or(fwd);
        let (adapter, head) = match kind {
            PayloadKind::Frame => (&self.frame_in, &self.frame_out),
            PayloadKind::Features => (&self.feature_in, &self.feature_out),
        };

        let base = warp(payload, fwd);
        let a = adapter.forward(ctx, payload);
        let a_w = warp(&a, fwd);
        let cons = fwd.add(&warp(bwd, fwd));

        let nu = (h.max(w) as f64 / 8.0).max(1.0);
        let inv = 1.0 / nu;
        let cons_mag = cons.sqr().sum_axis(1).scale(1.0 / (2.0 * CONSISTENCY_B)).tanh();
        let gx = ctx.constant(Array::from_f64(
            vec![1, 1, 1, w],
            &(0..w).map(|x| x as f64).collect::<Vec<_>>(),
        ));
        let gy = ctx.constant(Array::from_f64(
            vec![1, 1, h, 1],
            &(0..h).map(|y| y as f64).collect::<Vec<_>>(),
        ));
        let tx = fwd.narrow(1, 0, 1).add(&gx);
        let ty = fwd.narrow(1, 1, 1).add(&gy);
        let excess = |t: &Var<T>, hi: usize| t.neg().relu().add(&t.add_scalar(-(hi as f64)).relu());
        let ex = Var::cat(&[&excess(&tx, w - 1), &excess(&ty, h - 1)], 1);
        let z = Var::cat(
            &[
                &a,
                &a_w,
                &fwd.scale(inv),
                &bwd.scale(inv),
                &cons.scale(inv),
                &cons_mag,
                &ex.scale(inv),
                &ex.scale(4.0).tanh(),
            ],
            1,
        );

        let mut levels = vec![self.fuse.forward(ctx, &z).silu()];
        for d in &self.downs {
            let next = d.forward(ctx, levels.last().expect("non-empty")).silu();
            levels.push(next);
        }
        let mut x = levels.pop().expect("non-empty");
        for (e, up) in self.ups.iter().enumerate().rev() {
            let skip = &levels[e];
            let (sh, sw) = (skip.shape()[2], skip.shape()[3]);
            let (xh, xw) = (x.shape()[2], x.shape()[3]);
            let upx = x.resample2d(&bilinear_matrix(sh, xh), &bilinear_matrix(sw, xw));
            x = up.forward(ctx, &Var::cat(&[&upx, skip], 1)).silu();
        }

        let occ = self.occ_head.forward(ctx, &x).sigmoid();
        let refine = base.add(&head.forward(ctx, &x));
        let keep = occ.neg().add_scalar(1.0);
        let warped = base.mul(&keep).add(&refine.mul(&occ));
        Ok(WarpOutput { warped, occ, base })
    }

    /// Warps a frame; the output is clamped into `[0, 1]`.
    pub fn warp_frame(
        &self,
        store: &ParamStore<f32>,
        payload: &Frame,
        fwd: &FlowField,
        bwd: Option<&FlowField>,
    ) -> Result<(Frame, OcclusionMap)> {
        debug_validate(payload)?;
        debug_validate(fwd)?;
        if let Some(b) = bwd {
            debug_validate(b)?;
        }
        let ctx = Ctx::new(store, false);
        let p = ctx.constant(payload.to_array());
        let f = ctx.constant(fwd.to_array());
        let bv = bwd.map(|b| ctx.constant(b.to_array()));
        let out = self.forward(&ctx, &p, PayloadKind::Frame, &f, bv.as_ref())?;
        let frame = Frame::from_array(out.warped.value(), 0).clamped().with_time(payload.time_tag);
        Ok((frame, OcclusionMap::from_array(out.occ.value(), 0).clamped()))
    }

    /// Warps a feature map. Flows may be at the feature or the source-frame
    /// resolution; frame-resolution flows are resized and divided by the scale.
    pub fn warp_features(
        &self,
        store: &ParamStore<f32>,
        payload: &FeatureMap,
        fwd: &FlowField,
        bwd: Option<&FlowField>,
    ) -> Result<(FeatureMap, OcclusionMap)> {
        debug_validate(payload)?;
        debug_validate(fwd)?;
        let (h, w, s) = (payload.height(), payload.width(), payload.scale);
        let ctx = Ctx::new(store, false);
        let fit = |f: &FlowField| -> Result<Var<f32>> {
            let ok = (f.height(), f.width()) == (h, w)
                || (f.height().div_ceil(s) == h && f.width().div_ceil(s) == w);
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "flow {}x{} does not fit {h}x{w} features at scale {s}",
                    f.height(),
                    f.width()
                )));
            }
            Ok(scale_flow(&ctx.constant(f.to_array()), h, w))
        };
        let f = fit(fwd)?;
        let bv = bwd.map(fit).transpose()?;
        let p = ctx.constant(payload.to_array());
        let out = self.forward(&ctx, &p, PayloadKind::Features, &f, bv.as_ref())?;
        Ok((
            FeatureMap::from_array(out.warped.value(), 0, payload.stage, s),
            OcclusionMap::from_array(out.occ.value(), 0).clamped(),
        ))
    }
}

impl OcclusionMap {
    fn clamped(self) -> Self {
        let (h, w) = (self.height(), self.width());
        let v = self.values().iter().map(|x| x.clamp(0.0, 1.0)).collect();
        OcclusionMap::new(h, w, v).expect("same size")
    }
}
