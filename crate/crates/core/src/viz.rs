//! Flow rendering with the Middlebury colour wheel: hue encodes direction,
//! saturation encodes magnitude relative to a normalising maximum.

use crate::types::{FlowField, Frame};

fn color_wheel() -> Vec<[f64; 3]> {
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let mut w = Vec::with_capacity(ry + yg + gc + cb + bm + mr);
    let ramp = |i: usize, n: usize| 255.0 * i as f64 / n as f64;
    w.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    w.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    w.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    w.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    w
}

/// Colour of one normalised flow vector; magnitudes above 1 are darkened.
pub fn flow_color(u: f64, v: f64) -> [f32; 3] {
    let wheel = color_wheel();
    let n = wheel.len();
    let rad = u.hypot(v);
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = (k0 + 1) % n;
    let f = fk - k0 as f64;
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        *o = col as f32;
    }
    out
}

/// RGB rendering of `flow`. Vectors are divided by `max_magnitude`, or by the
/// largest valid magnitude in the field when `None`. Invalid pixels are black;
/// zero flow is white.
pub fn flow_to_rgb(flow: &FlowField, max_magnitude: Option<f64>) -> Frame {
    let norm = max_magnitude.unwrap_or_else(|| flow.max_magnitude()).max(1e-9);
    let (h, w) = (flow.height(), flow.width());
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            if !flow.is_valid(y, x) {
                px.extend([0.0; 3]);
                continue;
            }
            let (u, v) = flow.get(y, x);
            px.extend(flow_color(u as f64 / norm, v as f64 / norm));
        }
    }
    Frame::new(h, w, 3, px).expect("sized")
}
