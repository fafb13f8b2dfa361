//! Differentiable backward warping, the consistency occlusion oracle and WarpNet.

mod net;
mod oracle;

pub use net::{PayloadKind, WarpNet, WarpNetConfig, WarpOutput};
pub use oracle::{occlusion_oracle, occlusion_oracle_with, CONSISTENCY_A, CONSISTENCY_B};

use kineflow_tensor::{Array, Float, Tape, Var};

use crate::error::{Error, Result};
use crate::resample::area_matrix;
use crate::types::{debug_validate, FeatureMap, FlowField, Frame};

#[derive(Clone, Copy)]
struct Tap {
    i00: u32,
    dx: u32,
    dy: u32,
    ax: f64,
    ay: f64,
    in_x: bool,
    in_y: bool,
}

fn taps<T: Float>(flow: &[T], h: usize, w: usize) -> Vec<Tap> {
    let n = h * w;
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let mut out = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow[i].as_f64();
            let sy = y as f64 + flow[n + i].as_f64();
            let xc = sx.clamp(0.0, xmax);
            let yc = sy.clamp(0.0, ymax);
            let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            out.push(Tap {
                i00: (y0 * w + x0) as u32,
                dx: (x1 - x0) as u32,
                dy: ((y1 - y0) * w) as u32,
                ax: xc - x0 as f64,
                ay: yc - y0 as f64,
                in_x: (0.0..=xmax).contains(&sx),
                in_y: (0.0..=ymax).contains(&sy),
            });
        }
    }
    out
}

/// Bilinear backward warp of `[B, C, H, W]` by `[B, 2, H, W]` flow:
/// `out(p) = payload(p + flow(p))`, sample positions clamped to the border.
///
/// Differentiable in both arguments; the flow gradient vanishes along an
/// axis where the sample position was clamped.
pub fn warp<T: Float>(payload: &Var<T>, flow: &Var<T>) -> Var<T> {
    let (b, c, h, w) = payload.value().dims4();
    let (fb, fc, fh, fw) = flow.value().dims4();
    assert!(
        fb == b && fc == 2 && fh == h && fw == w,
        "warp: flow {:?} does not match payload {:?}",
        flow.shape(),
        payload.shape()
    );
    let n = h * w;
    let x = payload.value_rc();
    let mut all_taps = Vec::with_capacity(b);
    let mut out = vec![T::zero(); b * c * n];
    for bi in 0..b {
        let t = taps(&flow.value().data()[bi * 2 * n..(bi + 1) * 2 * n], h, w);
        for ch in 0..c {
            let src = &x.data()[(bi * c + ch) * n..(bi * c + ch + 1) * n];
            let dst = &mut out[(bi * c + ch) * n..(bi * c + ch + 1) * n];
            for (d, tp) in dst.iter_mut().zip(&t) {
                let i = tp.i00 as usize;
                let (ax, ay) = (T::of(tp.ax), T::of(tp.ay));
                let (bx, by) = (T::one() - ax, T::one() - ay);
                *d = src[i] * bx * by
                    + src[i + tp.dx as usize] * ax * by
                    + src[i + tp.dy as usize] * bx * ay
                    + src[i + (tp.dx + tp.dy) as usize] * ax * ay;
            }
        }
        all_taps.push(t);
    }
    let value = Array::new(vec![b, c, h, w], out);
    payload.tape().op(value, &[payload, flow], move |g, need| {
        let gd = g.data();
        let mut dp = need[0].then(|| vec![T::zero(); b * c * n]);
        let mut df = need[1].then(|| vec![T::zero(); b * 2 * n]);
        for (bi, t) in all_taps.iter().enumerate() {
            for ch in 0..c {
                let off = (bi * c + ch) * n;
                let gsl = &gd[off..off + n];
                if let Some(dp) = dp.as_mut() {
                    let dst = &mut dp[off..off + n];
                    for (gv, tp) in gsl.iter().zip(t) {
                        let i = tp.i00 as usize;
                        let (ax, ay) = (T::of(tp.ax), T::of(tp.ay));
                        let (bx, by) = (T::one() - ax, T::one() - ay);
                        dst[i] += *gv * bx * by;
                        dst[i + tp.dx as usize] += *gv * ax * by;
                        dst[i + tp.dy as usize] += *gv * bx * ay;
                        dst[i + (tp.dx + tp.dy) as usize] += *gv * ax * ay;
                    }
                }
                if let Some(df) = df.as_mut() {
                    let src = &x.data()[off..off + n];
                    let fo = bi * 2 * n;
                    for (p, (gv, tp)) in gsl.iter().zip(t).enumerate() {
                        let i = tp.i00 as usize;
                        let (ax, ay) = (T::of(tp.ax), T::of(tp.ay));
                        let v00 = src[i];
                        let v01 = src[i + tp.dx as usize];
                        let v10 = src[i + tp.dy as usize];
                        let v11 = src[i + (tp.dx + tp.dy) as usize];
                        if tp.in_x && tp.dx > 0 {
                            let d = (T::one() - ay) * (v01 - v00) + ay * (v11 - v10);
                            df[fo + p] += *gv * d;
                        }
                        if tp.in_y && tp.dy > 0 {
                            let d = (T::one() - ax) * (v10 - v00) + ax * (v11 - v01);
                            df[fo + n + p] += *gv * d;
                        }
                    }
                }
            }
        }
        vec![
            dp.map(|d| Array::new(vec![b, c, h, w], d)),
            df.map(|d| Array::new(vec![b, 2, h, w], d)),
        ]
    })
}

/// Flow resized from frame resolution to `(h, w)` with area weights and
/// divided by the per-axis size ratio, so displacements are in target pixels.
pub fn scale_flow<T: Float>(flow: &Var<T>, h: usize, w: usize) -> Var<T> {
    let (_, _, fh, fw) = flow.value().dims4();
    if (fh, fw) == (h, w) {
        return flow.clone();
    }
    let sx = w as f64 / fw as f64;
    let sy = h as f64 / fh as f64;
    let resized = flow.resample2d(&area_matrix(h, fh), &area_matrix(w, fw));
    let s = flow.tape().constant(Array::from_f64(vec![1, 2, 1, 1], &[sx, sy]));
    resized.mul(&s)
}

fn warp_array(payload: Array<f32>, flow: Array<f32>) -> Array<f32> {
    let tape = Tape::no_grad();
    let out = warp(&tape.constant(payload), &tape.constant(flow));
    out.value().clone()
}

/// Backward warp of a frame; the flow must match the frame size.
pub fn backward_warp_frame(payload: &Frame, flow: &FlowField) -> Result<Frame> {
    debug_validate(payload)?;
    debug_validate(flow)?;
    if (payload.height(), payload.width()) != (flow.height(), flow.width()) {
        return Err(Error::ShapeMismatch(format!(
            "flow is {}x{}, frame is {}x{}",
            flow.height(),
            flow.width(),
            payload.height(),
            payload.width()
        )));
    }
    let out = warp_array(payload.to_array(), flow.to_array());
    Ok(Frame::from_array(&out, 0).with_time(payload.time_tag))
}

/// Backward warp of a feature map. The flow may be given at the feature
/// resolution, or at the source-frame resolution, in which case it is
/// resized and divided by the scale.
pub fn backward_warp_features(payload: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    debug_validate(payload)?;
    debug_validate(flow)?;
    let (h, w, s) = (payload.height(), payload.width(), payload.scale);
    let at_feature = (flow.height(), flow.width()) == (h, w);
    let at_frame = flow.height().div_ceil(s) == h && flow.width().div_ceil(s) == w;
    if !at_feature && !at_frame {
        return Err(Error::ShapeMismatch(format!(
            "flow {}x{} fits neither the {h}x{w} features nor their scale-{s} source",
            flow.height(),
            flow.width()
        )));
    }
    let tape = Tape::no_grad();
    let f = scale_flow(&tape.constant(flow.to_array::<f32>()), h, w);
    let out = warp(&tape.constant(payload.to_array::<f32>()), &f);
    Ok(FeatureMap::from_array(out.value(), 0, payload.stage, s))
}

/// Backward warp of a flow field by another flow (both at the same size).
pub fn backward_warp_flow(field: &FlowField, by: &FlowField) -> Result<FlowField> {
    if !field.same_size(by) {
        return Err(Error::ShapeMismatch("flow fields differ in size".into()));
    }
    let out = warp_array(field.to_array(), by.to_array());
    Ok(FlowField::from_array(&out, 0))
}
