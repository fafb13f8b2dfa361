use crate::error::{Error, Result};
use crate::types::{debug_validate, FlowField, OcclusionMap};

/// Relative tolerance of the forward-backward check.
pub const CONSISTENCY_A: f64 = 0.01;
/// Absolute tolerance of the forward-backward check, in squared pixels.
pub const CONSISTENCY_B: f64 = 0.5;

fn sample_flow(f: &FlowField, x: f64, y: f64) -> (f64, f64) {
    let (h, w) = (f.height(), f.width());
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (xc - x0 as f64, yc - y0 as f64);
    let g = |yy: usize, xx: usize| {
        let (u, v) = f.get(yy, xx);
        (u as f64, v as f64)
    };
    let (p00, p01, p10, p11) = (g(y0, x0), g(y0, x1), g(y1, x0), g(y1, x1));
    let mix = |a: f64, b: f64, c: f64, d: f64| {
        a * (1.0 - ax) * (1.0 - ay) + b * ax * (1.0 - ay) + c * (1.0 - ax) * ay + d * ax * ay
    };
    (mix(p00.0, p01.0, p10.0, p11.0), mix(p00.1, p01.1, p10.1, p11.1))
}

/// Forward-backward consistency occlusion with the default tolerances.
pub fn occlusion_oracle(fwd: &FlowField, bwd: &FlowField) -> Result<OcclusionMap> {
    occlusion_oracle_with(fwd, bwd, CONSISTENCY_A, CONSISTENCY_B)
}

/// Pixel `p` is occluded when `p + fwd(p)` leaves the frame, or when
/// `|fwd(p) + bwd(p + fwd(p))|^2 > a * (|fwd(p)|^2 + |bwd(p + fwd(p))|^2) + b`
/// with `bwd` sampled bilinearly.
pub fn occlusion_oracle_with(fwd: &FlowField, bwd: &FlowField, a: f64, b: f64) -> Result<OcclusionMap> {
    debug_validate(fwd)?;
    debug_validate(bwd)?;
    if !fwd.same_size(bwd) {
        return Err(Error::ShapeMismatch(format!(
            "forward flow is {}x{}, backward flow is {}x{}",
            fwd.height(),
            fwd.width(),
            bwd.height(),
            bwd.width()
        )));
    }
    let (h, w) = (fwd.height(), fwd.width());
    let mut occ = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = fwd.get(y, x);
            let (u, v) = (u as f64, v as f64);
            let (tx, ty) = (x as f64 + u, y as f64 + v);
            let exits = tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64;
            let occluded = exits || {
                let (bu, bv) = sample_flow(bwd, tx, ty);
                let (cu, cv) = (u + bu, v + bv);
                cu * cu + cv * cv > a * (u * u + v * v + bu * bu + bv * bv) + b
            };
            occ.push(if occluded { 1.0 } else { 0.0 });
        }
    }
    OcclusionMap::new(h, w, occ)
}
