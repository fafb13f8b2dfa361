//! Domain types shared by every module, with their validity contracts.
//!
//! All pixel data is stored row-major in `[height, width, channel]` order.
//! Values are immutable once constructed; operations return new values.

use kineflow_tensor::{Array, Float};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Checks the invariants of a domain value.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

/// Validates in debug builds, or always with the `always-validate` feature.
///
/// Every public operation routes its domain-typed inputs through here.
#[inline]
pub fn debug_validate<V: Validate + ?Sized>(v: &V) -> Result<()> {
    if cfg!(any(debug_assertions, feature = "always-validate")) {
        v.validate()
    } else {
        Ok(())
    }
}

fn check_finite(data: &[f32], dims: &[usize]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::invariant("finite", unravel(i, dims))),
        None => Ok(()),
    }
}

fn unravel(mut i: usize, dims: &[usize]) -> Vec<usize> {
    let mut ix = vec![0; dims.len()];
    for (k, &d) in dims.iter().enumerate().rev() {
        ix[k] = i % d;
        i /= d;
    }
    ix
}

fn check_len(what: &str, dims: &[usize], len: usize) -> Result<()> {
    let need: usize = dims.iter().product();
    if need != len {
        return Err(Error::ShapeMismatch(format!(
            "{what} of shape {dims:?} needs {need} values, got {len}"
        )));
    }
    Ok(())
}

/// An image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
    /// Timestamp in units of the inter-frame interval.
    pub time_tag: f64,
}

impl Frame {
    /// Wraps `pixels` laid out as `[height, width, channels]`.
    ///
    /// Only the element count is checked here; call [`Validate::validate`]
    /// for the full contract.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        check_len("frame", &[height, width, channels], pixels.len())?;
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            time_tag: 0.0,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
            time_tag: 0.0,
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            pixels,
            time_tag: 0.0,
        }
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time_tag = t;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Copy as a `[1, C, H, W]` array.
    pub fn to_array<T: Float>(&self) -> Array<T> {
        hwc_to_nchw(&self.pixels, self.height, self.width, self.channels)
    }

    /// Reads one sample of an `[N, C, H, W]` array.
    pub fn from_array<T: Float>(a: &Array<T>, index: usize) -> Self {
        let (height, width, channels, pixels) = nchw_to_hwc(a, index);
        Self {
            height,
            width,
            channels,
            pixels,
            time_tag: 0.0,
        }
    }

    /// Same frame with every value clamped into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
        self
    }
}

impl Validate for Frame {
    fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invariant("channels in {1, 3}", vec![self.channels]));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invariant("H >= 8 and W >= 8", vec![self.height, self.width]));
        }
        let dims = [self.height, self.width, self.channels];
        check_finite(&self.pixels, &dims)?;
        if let Some(i) = self.pixels.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invariant("0 <= value <= 1", unravel(i, &dims)));
        }
        if !self.time_tag.is_finite() {
            return Err(Error::invariant("finite time_tag", None));
        }
        Ok(())
    }
}

pub(crate) fn hwc_to_nchw<T: Float>(data: &[f32], h: usize, w: usize, c: usize) -> Array<T> {
    let mut out = vec![T::zero(); data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = T::of(data[(y * w + x) * c + ch] as f64);
            }
        }
    }
    Array::new(vec![1, c, h, w], out)
}

pub(crate) fn nchw_to_hwc<T: Float>(a: &Array<T>, index: usize) -> (usize, usize, usize, Vec<f32>) {
    let (n, c, h, w) = a.dims4();
    assert!(index < n, "sample {index} out of range for batch of {n}");
    let src = &a.data()[index * c * h * w..(index + 1) * c * h * w];
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x].as_f64() as f32;
            }
        }
    }
    (h, w, c, out)
}

/// Dense per-pixel displacement `(u, v)` in pixels, with an optional validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    uv: Vec<f32>,
    valid: Option<Vec<bool>>,
}

impl FlowField {
    /// Builds a flow from an `[H, W, K]` array; `K` must be 2.
    pub fn from_hwc(shape: &[usize], uv: Vec<f32>, valid: Option<Vec<bool>>) -> Result<Self> {
        let [height, width, k] = shape else {
            return Err(Error::ShapeMismatch(format!("flow needs a rank-3 shape, got {shape:?}")));
        };
        if *k != 2 {
            return Err(Error::invariant("last dim = 2", vec![*k]));
        }
        Self::new(*height, *width, uv, valid)
    }

    pub fn new(height: usize, width: usize, uv: Vec<f32>, valid: Option<Vec<bool>>) -> Result<Self> {
        check_len("flow", &[height, width, 2], uv.len())?;
        if let Some(m) = &valid {
            check_len("valid mask", &[height, width], m.len())?;
        }
        Ok(Self {
            height,
            width,
            uv,
            valid,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::uniform(height, width, 0.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut uv = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                uv.push(u);
                uv.push(v);
            }
        }
        Self {
            height,
            width,
            uv,
            valid: None,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn uv(&self) -> &[f32] {
        &self.uv
    }

    pub fn valid(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid.as_ref().is_none_or(|m| m[y * self.width + x])
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.uv[i], self.uv[i + 1])
    }

    pub fn with_valid(mut self, valid: Option<Vec<bool>>) -> Result<Self> {
        if let Some(m) = &valid {
            check_len("valid mask", &[self.height, self.width], m.len())?;
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn same_size(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Elementwise map over `(u, v)`, keeping the mask.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            uv: self.uv.iter().map(|&x| f(x)).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Copy as a `[1, 2, H, W]` array.
    pub fn to_array<T: Float>(&self) -> Array<T> {
        hwc_to_nchw(&self.uv, self.height, self.width, 2)
    }

    /// Validity mask as a `[1, 1, H, W]` array of 0/1, if present.
    pub fn valid_array<T: Float>(&self) -> Option<Array<T>> {
        self.valid.as_ref().map(|m| {
            Array::new(
                vec![1, 1, self.height, self.width],
                m.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
            )
        })
    }

    /// Reads one sample of an `[N, 2, H, W]` array.
    pub fn from_array<T: Float>(a: &Array<T>, index: usize) -> Self {
        let (height, width, c, uv) = nchw_to_hwc(a, index);
        assert_eq!(c, 2, "flow arrays carry two channels");
        Self {
            height,
            width,
            uv,
            valid: None,
        }
    }

    /// Largest vector length.
    pub fn max_magnitude(&self) -> f64 {
        self.uv
            .chunks_exact(2)
            .map(|p| (p[0] as f64).hypot(p[1] as f64))
            .fold(0.0, f64::max)
    }
}

impl Validate for FlowField {
    fn validate(&self) -> Result<()> {
        check_finite(&self.uv, &[self.height, self.width, 2])?;
        if let Some(m) = &self.valid {
            if m.len() != self.height * self.width {
                return Err(Error::invariant("valid mask is H x W", vec![m.len()]));
            }
        }
        Ok(())
    }
}

/// Ordered intermediate predictions; the last item is the final one.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence {
    items: Vec<FlowField>,
}

impl FlowSequence {
    pub fn new(items: Vec<FlowField>) -> Result<Self> {
        let s = Self { items };
        s.validate()?;
        Ok(s)
    }

    pub fn items(&self) -> &[FlowField] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn last(&self) -> &FlowField {
        self.items.last().expect("a flow sequence is never empty")
    }

    pub fn into_last(mut self) -> FlowField {
        self.items.pop().expect("a flow sequence is never empty")
    }
}

impl Validate for FlowSequence {
    fn validate(&self) -> Result<()> {
        let Some(first) = self.items.first() else {
            return Err(Error::invariant("N >= 1", None));
        };
        for (i, f) in self.items.iter().enumerate() {
            if !f.same_size(first) {
                return Err(Error::invariant("items share H, W", vec![i]));
            }
            f.validate()?;
        }
        Ok(())
    }
}

/// Processing stage of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStage {
    Raw,
    PosEmbedded,
    SelfAttended,
    CrossAttended,
}

impl FeatureStage {
    pub fn name(self) -> &'static str {
        match self {
            FeatureStage::Raw => "raw",
            FeatureStage::PosEmbedded => "pos_embedded",
            FeatureStage::SelfAttended => "self_attended",
            FeatureStage::CrossAttended => "cross_attended",
        }
    }
}

/// Latent tensor `[H', W', D]` at `scale` times coarser than its source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    pub stage: FeatureStage,
    pub scale: usize,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        stage: FeatureStage,
        scale: usize,
    ) -> Result<Self> {
        check_len("feature map", &[height, width, channels], data.len())?;
        Ok(Self {
            height,
            width,
            channels,
            data,
            stage,
            scale,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, d: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + d]
    }

    /// Flattened spatial values of channel `d`.
    pub fn channel(&self, d: usize) -> Vec<f32> {
        self.data.iter().skip(d).step_by(self.channels).copied().collect()
    }

    pub fn to_array<T: Float>(&self) -> Array<T> {
        hwc_to_nchw(&self.data, self.height, self.width, self.channels)
    }

    pub fn from_array<T: Float>(a: &Array<T>, index: usize, stage: FeatureStage, scale: usize) -> Self {
        let (height, width, channels, data) = nchw_to_hwc(a, index);
        Self {
            height,
            width,
            channels,
            data,
            stage,
            scale,
        }
    }

    pub fn require_stage(&self, expected: FeatureStage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Stage {
                expected: expected.name(),
                actual: self.stage.name(),
            });
        }
        Ok(())
    }

    /// Checks the size contract against the source frame size.
    pub fn validate_for_source(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.height != height.div_ceil(self.scale) || self.width != width.div_ceil(self.scale) {
            return Err(Error::invariant(
                "H' = ceil(H / scale), W' = ceil(W / scale)",
                vec![self.height, self.width],
            ));
        }
        Ok(())
    }
}

impl Validate for FeatureMap {
    fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::invariant("scale >= 1", None));
        }
        check_finite(&self.data, &[self.height, self.width, self.channels])
    }
}

/// Per-pixel occlusion probability; 1 means visible at t0 but not at t1.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMap {
    height: usize,
    width: usize,
    occ: Vec<f32>,
}

impl OcclusionMap {
    pub fn new(height: usize, width: usize, occ: Vec<f32>) -> Result<Self> {
        check_len("occlusion map", &[height, width], occ.len())?;
        Ok(Self { height, width, occ })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            occ: vec![0.0; height * width],
        }
    }

    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Result<Self> {
        Self::new(height, width, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.occ
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.occ[y * self.width + x]
    }

    /// Hard mask: occluded where the probability exceeds 0.5.
    pub fn binarize(&self) -> Vec<bool> {
        self.occ.iter().map(|&p| p > 0.5).collect()
    }

    pub fn to_array<T: Float>(&self) -> Array<T> {
        hwc_to_nchw(&self.occ, self.height, self.width, 1)
    }

    pub fn from_array<T: Float>(a: &Array<T>, index: usize) -> Self {
        let (height, width, c, occ) = nchw_to_hwc(a, index);
        assert_eq!(c, 1, "occlusion arrays carry one channel");
        Self { height, width, occ }
    }

    /// Intersection over union of the binarized occluded sets; 1 when both are empty.
    pub fn iou(&self, other: &OcclusionMap) -> f64 {
        let (a, b) = (self.binarize(), other.binarize());
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl Validate for OcclusionMap {
    fn validate(&self) -> Result<()> {
        let dims = [self.height, self.width];
        check_finite(&self.occ, &dims)?;
        if let Some(i) = self.occ.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invariant("0 <= occ <= 1", unravel(i, &dims)));
        }
        Ok(())
    }
}

/// Root of every random stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Independent deterministic stream `stream` derived from this seed.
    pub fn rng(self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }

    /// Stream keyed by a purpose tag and an index, e.g. `("data", epoch)`.
    pub fn rng_for(self, purpose: &str, index: u64) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in purpose.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ h);
        rng.set_stream(index);
        rng
    }
}
