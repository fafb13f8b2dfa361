//! Synthetic pairs with analytic ground truth.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};
use crate::types::{FlowField, Frame, OcclusionMap, RngSeed};
use crate::warp::occlusion_oracle;

/// Texture smoothing width in pixels.
pub const TEXTURE_SIGMA: f64 = 2.0;

/// Point map `p -> A p + t` in pixel coordinates (x right, y down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let d = self.det();
        if d.abs() < 1e-9 {
            return None;
        }
        let a = [
            [self.a[1][1] / d, -self.a[0][1] / d],
            [-self.a[1][0] / d, self.a[0][0] / d],
        ];
        let t = [
            -(a[0][0] * self.t[0] + a[0][1] * self.t[1]),
            -(a[1][0] * self.t[0] + a[1][1] * self.t[1]),
        ];
        Some(Affine2 { a, t })
    }

    /// The constant-velocity position after a fraction `alpha` of the motion:
    /// `p + alpha * (M(p) - p)`.
    pub fn toward(&self, alpha: f64) -> Affine2 {
        let mut out = *self;
        for (r, row) in out.a.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let id = if r == c { 1.0 } else { 0.0 };
                *v = id + alpha * (self.a[r][c] - id);
            }
        }
        out.t = [alpha * self.t[0], alpha * self.t[1]];
        out
    }
}

/// Analytic motion. Rotation, zoom and affine act about the frame centre
/// `((W - 1) / 2, (H - 1) / 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum Motion {
    Translation { dx: f64, dy: f64 },
    Rotation { angle: f64 },
    Zoom { factor: f64 },
    Affine { a: [[f64; 2]; 2], t: [f64; 2] },
}

/// Motion families, as named on the command line and in manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Translation,
    Rotation,
    Zoom,
    Affine,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [
        MotionKind::Translation,
        MotionKind::Rotation,
        MotionKind::Zoom,
        MotionKind::Affine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Translation => "translation",
            MotionKind::Rotation => "rotation",
            MotionKind::Zoom => "zoom",
            MotionKind::Affine => "affine",
        }
    }

    pub fn parse(s: &str) -> Option<MotionKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// A random motion of this kind with moderate magnitude for an `h x w` frame.
    pub fn sample(self, rng: &mut impl Rng, h: usize, w: usize) -> Motion {
        let (fh, fw) = (h as f64, w as f64);
        let sym = |rng: &mut dyn rand::RngCore, r: f64| Uniform::new_inclusive(-r, r).unwrap().sample(rng);
        match self {
            MotionKind::Translation => Motion::Translation {
                dx: sym(rng, fw / 8.0),
                dy: sym(rng, fh / 8.0),
            },
            MotionKind::Rotation => Motion::Rotation { angle: sym(rng, 0.3) },
            MotionKind::Zoom => Motion::Zoom {
                factor: sym(rng, 0.2).exp(),
            },
            MotionKind::Affine => Motion::Affine {
                a: [[1.0 + sym(rng, 0.1), sym(rng, 0.1)], [sym(rng, 0.1), 1.0 + sym(rng, 0.1)]],
                t: [sym(rng, fw / 10.0), sym(rng, fh / 10.0)],
            },
        }
    }
}

impl Motion {
    pub fn kind(&self) -> MotionKind {
        match self {
            Motion::Translation { .. } => MotionKind::Translation,
            Motion::Rotation { .. } => MotionKind::Rotation,
            Motion::Zoom { .. } => MotionKind::Zoom,
            Motion::Affine { .. } => MotionKind::Affine,
        }
    }

    /// The point map `M` for an `h x w` frame.
    pub fn map(&self, h: usize, w: usize) -> Affine2 {
        let c = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
        let about_centre = |a: [[f64; 2]; 2], extra: [f64; 2]| Affine2 {
            a,
            t: [
                c[0] - (a[0][0] * c[0] + a[0][1] * c[1]) + extra[0],
                c[1] - (a[1][0] * c[0] + a[1][1] * c[1]) + extra[1],
            ],
        };
        match *self {
            Motion::Translation { dx, dy } => Affine2 {
                a: Affine2::IDENTITY.a,
                t: [dx, dy],
            },
            Motion::Rotation { angle } => {
                let (s, co) = angle.sin_cos();
                about_centre([[co, -s], [s, co]], [0.0, 0.0])
            }
            Motion::Zoom { factor } => about_centre([[factor, 0.0], [0.0, factor]], [0.0, 0.0]),
            Motion::Affine { a, t } => about_centre(a, t),
        }
    }

    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if h < 8 || w < 8 {
            return Err(Error::Spec(format!("frame size {h}x{w} is below 8x8")));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let shift_ok = |dx: f64, dy: f64| dx.abs() <= w as f64 / 4.0 && dy.abs() <= h as f64 / 4.0;
        match *self {
            Motion::Translation { dx, dy } => {
                if !finite(&[dx, dy]) || !shift_ok(dx, dy) {
                    return Err(Error::Spec(format!(
                        "translation ({dx}, {dy}) must satisfy |dx| <= W/4 and |dy| <= H/4"
                    )));
                }
            }
            Motion::Rotation { angle } => {
                if !angle.is_finite() {
                    return Err(Error::Spec("rotation angle must be finite".into()));
                }
            }
            Motion::Zoom { factor } => {
                if !(0.5..=2.0).contains(&factor) {
                    return Err(Error::Spec(format!("zoom factor {factor} outside [0.5, 2]")));
                }
            }
            Motion::Affine { a, t } => {
                let m = self.map(h, w);
                if !finite(&[a[0][0], a[0][1], a[1][0], a[1][1], t[0], t[1]]) || !shift_ok(t[0], t[1]) {
                    return Err(Error::Spec(format!(
                        "affine offset ({}, {}) must satisfy |tx| <= W/4 and |ty| <= H/4",
                        t[0], t[1]
                    )));
                }
                if !(0.25..=4.0).contains(&m.det()) {
                    return Err(Error::Spec(format!(
                        "affine determinant {} outside [0.25, 4]",
                        m.det()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A motion together with the seed of the texture it moves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMotionSpec {
    #[serde(flatten)]
    pub motion: Motion,
    pub texture_seed: RngSeed,
}

impl SyntheticMotionSpec {
    pub fn new(motion: Motion, texture_seed: u64) -> Self {
        Self {
            motion,
            texture_seed: RngSeed(texture_seed),
        }
    }

    pub fn translation(dx: f64, dy: f64, texture_seed: u64) -> Self {
        Self::new(Motion::Translation { dx, dy }, texture_seed)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_axis(src: &[f64], h: usize, w: usize, k: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let o = i as isize - r;
                let (yy, xx) = if horizontal {
                    (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                } else {
                    ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                };
                acc += kv * src[yy * w + xx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Gaussian-smoothed uniform noise, stretched per channel to `[0, 1]`.
pub fn texture(seed: RngSeed, h: usize, w: usize, channels: usize) -> Frame {
    let mut rng = seed.rng_for("texture", 0);
    let k = gaussian_kernel(TEXTURE_SIGMA);
    let mut planes = Vec::with_capacity(channels);
    for _ in 0..channels {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let b = blur_axis(&blur_axis(&noise, h, w, &k, true), h, w, &k, false);
        let (lo, hi) = b.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        let span = (hi - lo).max(1e-12);
        planes.push(b.into_iter().map(|v| ((v - lo) / span) as f32).collect::<Vec<f32>>());
    }
    Frame::from_fn(h, w, channels, |y, x, c| planes[c][y * w + x])
}

/// Bilinear sample at `(sx, sy)`; zero outside `[0, W-1] x [0, H-1]`.
fn sample_zero_fill(f: &Frame, sx: f64, sy: f64, out: &mut [f32]) {
    let (h, w, _) = f.dims();
    if !(0.0..=(w - 1) as f64).contains(&sx) || !(0.0..=(h - 1) as f64).contains(&sy) {
        out.fill(0.0);
        return;
    }
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
    for (ch, o) in out.iter_mut().enumerate() {
        let v = f.get(y0, x0, ch) as f64 * (1.0 - ax) * (1.0 - ay)
            + f.get(y0, x1, ch) as f64 * ax * (1.0 - ay)
            + f.get(y1, x0, ch) as f64 * (1.0 - ax) * ay
            + f.get(y1, x1, ch) as f64 * ax * ay;
        *o = v as f32;
    }
}

/// `frame0` resampled through the inverse of `m`: `out(q) = frame0(m^-1(q))`.
fn resample_through(frame0: &Frame, m: &Affine2) -> Result<Frame> {
    let inv = m
        .inverse()
        .ok_or_else(|| Error::Spec("motion map is not invertible".into()))?;
    let (h, w, c) = frame0.dims();
    let mut px = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            sample_zero_fill(frame0, sx, sy, &mut px[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Frame::new(h, w, c, px)
}

/// Forward flow `M(p) - p`.
pub fn analytic_flow(m: &Affine2, h: usize, w: usize) -> FlowField {
    FlowField::from_fn(h, w, |y, x| {
        let (tx, ty) = m.apply(x as f64, y as f64);
        ((tx - x as f64) as f32, (ty - y as f64) as f32)
    })
}

/// Backward flow `M^-1(q) - q`, or a spec error for a singular map.
pub fn analytic_backward_flow(m: &Affine2, h: usize, w: usize) -> Result<FlowField> {
    let inv = m
        .inverse()
        .ok_or_else(|| Error::Spec("motion map is not invertible".into()))?;
    Ok(analytic_flow(&inv, h, w))
}

/// Forward coverage oracle: a pixel is occluded iff its analytic image
/// `M(p)` leaves `[0, W-1] x [0, H-1]`.
pub fn forward_coverage_occlusion(m: &Affine2, h: usize, w: usize) -> OcclusionMap {
    let mut occ = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = m.apply(x as f64, y as f64);
            let inside = (0.0..=(w - 1) as f64).contains(&tx) && (0.0..=(h - 1) as f64).contains(&ty);
            occ.push(if inside { 0.0 } else { 1.0 });
        }
    }
    OcclusionMap::new(h, w, occ).expect("sized by construction")
}

fn record_for(id: String, frame0: Frame, m: &Affine2, spec: SyntheticMotionSpec, time: f64) -> Result<SampleRecord> {
    let (h, w, _) = frame0.dims();
    let frame1 = resample_through(&frame0, m)?.with_time(time);
    let fwd = analytic_flow(m, h, w);
    let bwd = analytic_backward_flow(m, h, w)?;
    let occ = occlusion_oracle(&fwd, &bwd)?;
    Ok(SampleRecord {
        id,
        frame0,
        frame1,
        gt_flow: Some(fwd),
        gt_occ: Some(occ),
        motion: Some(spec),
    })
}

/// Three-channel synthetic pair of size `(H, W)`.
pub fn synth_pair(spec: SyntheticMotionSpec, size: (usize, usize)) -> Result<SampleRecord> {
    synth_pair_channels(spec, size, 3)
}

pub fn synth_pair_channels(spec: SyntheticMotionSpec, size: (usize, usize), channels: usize) -> Result<SampleRecord> {
    let (h, w) = size;
    spec.motion.check(h, w)?;
    if channels != 1 && channels != 3 {
        return Err(Error::Spec(format!("channels must be 1 or 3, got {channels}")));
    }
    let frame0 = texture(spec.texture_seed, h, w, channels);
    let id = format!("{}-{}", spec.motion.kind().name(), spec.texture_seed.0);
    record_for(id, frame0, &spec.motion.map(h, w), spec, 1.0)
}

/// The same scene observed after a fraction `alpha` of the motion.
///
/// `alpha` must lie in `(0, 1]`. The record must carry ground-truth flow and
/// the analytic motion that generated it.
pub fn make_subsampled_pair(record: &SampleRecord, alpha: f64) -> Result<SampleRecord> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Range(format!("alpha {alpha} outside (0, 1]")));
    }
    let gt = record
        .gt_flow
        .as_ref()
        .ok_or_else(|| Error::Spec(format!("record `{}` has no ground-truth flow", record.id)))?;
    let spec = record.motion.ok_or_else(|| {
        Error::Spec(format!(
            "record `{}` has no analytic motion to interpolate",
            record.id
        ))
    })?;
    let (h, w, _) = record.frame0.dims();
    let m = spec.motion.map(h, w).toward(alpha);
    let mut out = record_for(record.id.clone(), record.frame0.clone(), &m, spec, alpha)?;
    let a = alpha as f32;
    let flow = gt.map(|x| a * x);
    let bwd = analytic_backward_flow(&m, h, w)?;
    out.gt_occ = Some(occlusion_oracle(&flow, &bwd)?);
    out.gt_flow = Some(flow);
    Ok(out)
}

/// `count` random pairs cycling through `kinds`, seeded per index.
pub fn synth_corpus(kinds: &[MotionKind], count: usize, size: (usize, usize), seed: RngSeed) -> Result<Vec<SampleRecord>> {
    synth_specs(kinds, count, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut r = synth_pair(spec, size)?;
            r.id = format!("s{i:04}");
            Ok(r)
        })
        .collect()
}

/// The specs [`synth_corpus`] draws.
pub fn synth_specs(kinds: &[MotionKind], count: usize, size: (usize, usize), seed: RngSeed) -> Vec<SyntheticMotionSpec> {
    assert!(!kinds.is_empty(), "at least one motion kind is needed");
    (0..count)
        .map(|i| {
            let mut rng = seed.rng_for("synth", i as u64);
            let kind = kinds[i % kinds.len()];
            let motion = kind.sample(&mut rng, size.0, size.1);
            SyntheticMotionSpec::new(motion, rng.random())
        })
        .collect()
}
