//! Feature encoder and the correlation-free motion decoder.
//!
//! The decoder adds a per-channel positional embedding, runs siamese self-
//! and cross-attention over spatial tokens, appends the Top-K most similar
//! channels as a sparse stand-in for a correlation volume, and regresses flow
//! through a stack of residual blocks. Each block owns a zero-initialised flow
//! head, so an untrained model predicts zero flow and the sequence has one
//! item per block.

mod attention;

use std::path::Path;

use kineflow_tensor::{Array, Float, Var};
use serde::{Deserialize, Serialize};

pub use attention::{AttentionBlock, MultiHeadAttention};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, ParamId, ParamStore};
use crate::resample::bilinear_matrix;
use crate::types::{debug_validate, FeatureMap, FeatureStage, FlowField, FlowSequence, Frame, RngSeed};
use crate::warp::WarpNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frame channels.
    pub in_channels: usize,
    /// Feature stride, a power of two.
    pub scale: usize,
    /// Feature channels D.
    pub dim: usize,
    /// Width of the first encoder stage; doubles per stage up to `dim`.
    pub encoder_width: usize,
    pub heads: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Channels kept by the Top-K similarity auxiliary.
    pub top_k: usize,
    /// Residual regression blocks, one flow prediction each.
    pub residual_blocks: usize,
    /// Decoder hidden width.
    pub hidden: usize,
    /// Learned channel embedding; a fixed sinusoid otherwise.
    pub learned_pos: bool,
    /// Take the auxiliary channels from the first frame's features.
    pub aux_from_first: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            scale: 8,
            dim: 128,
            encoder_width: 32,
            heads: 4,
            self_layers: 2,
            cross_layers: 2,
            ffn_mult: 2,
            top_k: 64,
            residual_blocks: 4,
            hidden: 96,
            learned_pos: true,
            aux_from_first: false,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("model.{k}"), m));
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive");
        }
        if !self.scale.is_power_of_two() {
            return bad("scale", "must be a power of two");
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("heads", "must divide dim");
        }
        if self.top_k > self.dim {
            return bad("top_k", "must not exceed dim");
        }
        if self.residual_blocks == 0 {
            return bad("residual_blocks", "must be at least 1");
        }
        if self.encoder_width == 0 || self.hidden == 0 || self.ffn_mult == 0 {
            return bad("hidden", "widths must be positive");
        }
        Ok(())
    }
}

/// Strided convolutional feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    stages: Vec<Conv2d>,
    out: Conv2d,
}

impl Encoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let n = cfg.scale.trailing_zeros() as usize;
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for i in 0..n {
            let cout = (cfg.encoder_width << i).min(cfg.dim);
            stages.push(Conv2d::new(store, init, &format!("encoder.stage{i}"), cin, cout, 3, 2, 1.0));
            cin = cout;
        }
        let out = Conv2d::new(store, init, "encoder.out", cin, cfg.dim, 3, 1, 1.0);
        Self { stages, out }
    }

    /// `[B, C, H, W]` frames in `[0, 1]` to `[B, D, ceil(H/s), ceil(W/s)]`.
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut x = x.scale(2.0).add_scalar(-1.0);
        for s in &self.stages {
            x = s.forward(ctx, &x).silu();
        }
        self.out.forward(ctx, &x)
    }
}

/// Fixed alternative to the learned channel embedding.
pub fn sinusoid_embedding(dim: usize) -> Vec<f64> {
    (0..dim).map(|d| 0.02 * (d as f64 + 1.0).sin()).collect()
}

#[derive(Clone, Debug, PartialEq)]
enum PosEmbedding {
    Learned(ParamId),
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
    head: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pos: PosEmbedding,
    self_blocks: Vec<AttentionBlock>,
    cross_blocks: Vec<AttentionBlock>,
    input: Conv2d,
    blocks: Vec<ResBlock>,
    top_k: usize,
    aux_from_first: bool,
}

/// `[B, D, h, w] -> [B, h*w, D]`
fn to_tokens<T: Float>(f: &Var<T>) -> Var<T> {
    let (b, d, h, w) = f.value().dims4();
    f.reshape(vec![b, d, h * w]).transpose(1, 2)
}

fn from_tokens<T: Float>(t: &Var<T>, h: usize, w: usize) -> Var<T> {
    let s = t.shape().to_vec();
    t.transpose(1, 2).reshape(vec![s[0], s[2], h, w])
}

/// Cosine similarity of every channel pair `(x0[d], x1[d])` for batch item `b`.
/// A zero-norm channel scores 0.
pub fn channel_scores<T: Float>(x0: &Array<T>, x1: &Array<T>, b: usize) -> Vec<f64> {
    let (_, d, h, w) = x0.dims4();
    let n = h * w;
    (0..d)
        .map(|c| {
            let off = (b * d + c) * n;
            let (p, q) = (&x0.data()[off..off + n], &x1.data()[off..off + n]);
            let (mut dot, mut pp, mut qq) = (0.0, 0.0, 0.0);
            for (a, bb) in p.iter().zip(q) {
                let (a, bb) = (a.as_f64(), bb.as_f64());
                dot += a * bb;
                pp += a * a;
                qq += bb * bb;
            }
            let den = (pp * qq).sqrt();
            if den > 0.0 {
                dot / den
            } else {
                0.0
            }
        })
        .collect()
}

/// Indices of the `k` best scores, best first; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Graph-level Top-K auxiliary: per batch item, the `k` channels of `source`
/// whose cosine similarity between `x0` and `x1` is highest.
pub fn topk_aux_var<T: Float>(x0: &Var<T>, x1: &Var<T>, source: &Var<T>, k: usize) -> Result<Var<T>> {
    let d = x0.shape()[1];
    if k > d {
        return Err(Error::config("model.top_k", format!("K = {k} exceeds D = {d}")));
    }
    if x0.shape() != x1.shape() || x0.shape() != source.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let b = x0.shape()[0];
    let parts: Vec<Var<T>> = (0..b)
        .map(|i| {
            let idx = top_k_indices(&channel_scores(x0.value(), x1.value(), i), k);
            source.narrow(0, i, 1).index_select(1, &idx)
        })
        .collect();
    Ok(Var::cat(&parts.iter().collect::<Vec<_>>(), 0))
}

/// Flow at feature resolution, in feature pixels, to full resolution in
/// frame pixels.
fn upsample_flow<T: Float>(flow: &Var<T>, h: usize, w: usize) -> Var<T> {
    let (_, _, fh, fw) = flow.value().dims4();
    let up = flow.resample2d(&bilinear_matrix(h, fh), &bilinear_matrix(w, fw));
    let s = flow
        .tape()
        .constant(Array::from_f64(vec![1, 2, 1, 1], &[w as f64 / fw as f64, h as f64 / fh as f64]));
    up.mul(&s)
}

impl Decoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let pos = if cfg.learned_pos {
            PosEmbedding::Learned(store.add("decoder.pos", init.normal(vec![1, d, 1, 1], 0.02)))
        } else {
            PosEmbedding::Fixed(sinusoid_embedding(d))
        };
        let mut blocks = |kind: &str, n: usize| -> Vec<AttentionBlock> {
            (0..n)
                .map(|i| AttentionBlock::new(store, init, &format!("decoder.{kind}{i}"), d, cfg.heads, cfg.ffn_mult))
                .collect()
        };
        let self_blocks = blocks("self", cfg.self_layers);
        let cross_blocks = blocks("cross", cfg.cross_layers);
        let hd = cfg.hidden;
        let input = Conv2d::new(store, init, "decoder.input", 2 * d + cfg.top_k, hd, 1, 1, 1.0);
        let blocks = (0..cfg.residual_blocks)
            .map(|r| ResBlock {
                c1: Conv2d::new(store, init, &format!("decoder.res{r}.c1"), hd, hd, 3, 1, 1.0),
                c2: Conv2d::new(store, init, &format!("decoder.res{r}.c2"), hd, hd, 3, 1, 0.5),
                head: Conv2d::zeroed(store, &format!("decoder.res{r}.head"), hd, 2, 3),
            })
            .collect();
        Self {
            pos,
            self_blocks,
            cross_blocks,
            input,
            blocks,
            top_k: cfg.top_k,
            aux_from_first: cfg.aux_from_first,
        }
    }

    /// The channel embedding as `[1, D, 1, 1]`.
    pub fn pos<T: Float>(&self, ctx: &Ctx<T>) -> Var<T> {
        match &self.pos {
            PosEmbedding::Learned(id) => ctx.p(*id),
            PosEmbedding::Fixed(v) => ctx.constant(Array::from_f64(vec![1, v.len(), 1, 1], v)),
        }
    }

    pub fn add_pos<T: Float>(&self, ctx: &Ctx<T>, f: &Var<T>) -> Var<T> {
        f.add(&self.pos(ctx))
    }

    /// Self-attention on each stream, then cross-attention with the query from
    /// the own stream and keys and values from the other stream's embedded
    /// features. Both streams share weights and run as one batch.
    pub fn attend<T: Float>(&self, ctx: &Ctx<T>, f0p: &Var<T>, f1p: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        if f0p.shape() != f1p.shape() {
            return Err(Error::ShapeMismatch(format!(
                "feature maps {:?} and {:?}",
                f0p.shape(),
                f1p.shape()
            )));
        }
        let (b, _, h, w) = f0p.value().dims4();
        let (t0, t1) = (to_tokens(f0p), to_tokens(f1p));
        let mut x = Var::cat(&[&t0, &t1], 0);
        for blk in &self.self_blocks {
            x = blk.forward(ctx, &x, &x);
        }
        let other = Var::cat(&[&t1, &t0], 0);
        for blk in &self.cross_blocks {
            x = blk.forward(ctx, &x, &other);
        }
        Ok((
            from_tokens(&x.narrow(0, 0, b), h, w),
            from_tokens(&x.narrow(0, b, b), h, w),
        ))
    }

    pub fn topk_aux<T: Float>(&self, f0pp: &Var<T>, f1pp: &Var<T>) -> Result<Var<T>> {
        let src = if self.aux_from_first { f0pp } else { f1pp };
        topk_aux_var(f0pp, f1pp, src, self.top_k)
    }

    /// One full-resolution `[B, 2, H, W]` flow per residual block.
    pub fn decode<T: Float>(
        &self,
        ctx: &Ctx<T>,
        f0pp: &Var<T>,
        f1pp: &Var<T>,
        aux: &Var<T>,
        out: (usize, usize),
    ) -> Result<Vec<Var<T>>> {
        let (s0, s1, sa) = (f0pp.shape(), f1pp.shape(), aux.shape());
        if s0 != s1 || s0[0] != sa[0] || s0[2..] != sa[2..] || sa[1] != self.top_k {
            return Err(Error::ShapeMismatch(format!("decoder inputs {s0:?}, {s1:?}, {sa:?}")));
        }
        let mut x = self.input.forward(ctx, &Var::cat(&[f0pp, f1pp, aux], 1));
        let mut flow: Option<Var<T>> = None;
        let mut seq = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let r = blk.c2.forward(ctx, &blk.c1.forward(ctx, &x.silu()).silu());
            x = x.add(&r);
            let d = blk.head.forward(ctx, &x.silu());
            let f = match flow {
                Some(f) => f.add(&d),
                None => d,
            };
            seq.push(upsample_flow(&f, out.0, out.1));
            flow = Some(f);
        }
        Ok(seq)
    }
}

/// The full network description: encoder, decoder and WarpNet.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub warpnet: WarpNet,
}

/// Graph-level predictions.
pub struct Flows<T: Float> {
    /// Raw encoder features of each frame.
    pub feat0: Var<T>,
    pub feat1: Var<T>,
    /// Frame 0 to frame 1, one per residual block.
    pub fwd: Vec<Var<T>>,
    /// Frame 1 to frame 0, when requested.
    pub bwd: Option<Vec<Var<T>>>,
}

impl FlowNet {
    /// Registers every parameter in `store`, initialised from `seed`.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        seed: RngSeed,
        cfg: ModelConfig,
        warp_cfg: crate::warp::WarpNetConfig,
    ) -> Result<Self> {
        cfg.check()?;
        let mut init = Init::new(seed.rng_for("init", 0));
        let encoder = Encoder::new(store, &mut init, &cfg);
        let decoder = Decoder::new(store, &mut init, &cfg);
        let warpnet = WarpNet::new(store, &mut init, "warpnet", warp_cfg, cfg.in_channels, cfg.dim);
        Ok(Self {
            cfg,
            encoder,
            decoder,
            warpnet,
        })
    }

    /// Motion decoder on raw features: embedding, attention, auxiliary and
    /// regression. With `bidirectional` the swapped pass runs in the same batch.
    pub fn motion<T: Float>(
        &self,
        ctx: &Ctx<T>,
        f0: &Var<T>,
        f1: &Var<T>,
        out: (usize, usize),
        bidirectional: bool,
    ) -> Result<(Vec<Var<T>>, Option<Vec<Var<T>>>)> {
        let b = f0.shape()[0];
        let (a0, a1) = self.decoder.attend(ctx, &self.decoder.add_pos(ctx, f0), &self.decoder.add_pos(ctx, f1))?;
        if !bidirectional {
            let aux = self.decoder.topk_aux(&a0, &a1)?;
            return Ok((self.decoder.decode(ctx, &a0, &a1, &aux, out)?, None));
        }
        let (x0, x1) = (Var::cat(&[&a0, &a1], 0), Var::cat(&[&a1, &a0], 0));
        let aux = self.decoder.topk_aux(&x0, &x1)?;
        let seq = self.decoder.decode(ctx, &x0, &x1, &aux, out)?;
        let fwd = seq.iter().map(|f| f.narrow(0, 0, b)).collect();
        let bwd = seq.iter().map(|f| f.narrow(0, b, b)).collect();
        Ok((fwd, Some(bwd)))
    }

    /// Encodes both `[B, C, H, W]` frame batches and decodes flow.
    pub fn flows<T: Float>(&self, ctx: &Ctx<T>, i0: &Var<T>, i1: &Var<T>, bidirectional: bool) -> Result<Flows<T>> {
        if i0.shape() != i1.shape() {
            return Err(Error::ShapeMismatch(format!("frames {:?} and {:?}", i0.shape(), i1.shape())));
        }
        let (b, c, h, w) = i0.value().dims4();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} channels, frames have {c}",
                self.cfg.in_channels
            )));
        }
        let f = self.encoder.forward(ctx, &Var::cat(&[i0, i1], 0));
        let (feat0, feat1) = (f.narrow(0, 0, b), f.narrow(0, b, b));
        let (fwd, bwd) = self.motion(ctx, &feat0, &feat1, (h, w), bidirectional)?;
        Ok(Flows { feat0, feat1, fwd, bwd })
    }
}

fn seq_from(vars: &[Var<f32>], index: usize) -> Result<FlowSequence> {
    FlowSequence::new(vars.iter().map(|v| FlowField::from_array(v.value(), index)).collect())
}

/// A [`FlowNet`] together with its `f32` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub net: FlowNet,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(cfg: ModelConfig, warp_cfg: crate::warp::WarpNetConfig, seed: RngSeed) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = FlowNet::new(&mut params, seed, cfg, warp_cfg)?;
        Ok(Self { net, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    fn frame_pair(&self, i0: &Frame, i1: &Frame) -> Result<()> {
        debug_validate(i0)?;
        debug_validate(i1)?;
        if i0.dims() != i1.dims() {
            return Err(Error::ShapeMismatch(format!("frames {:?} and {:?}", i0.dims(), i1.dims())));
        }
        Ok(())
    }

    /// Raw features of one frame.
    pub fn encode(&self, frame: &Frame) -> Result<FeatureMap> {
        debug_validate(frame)?;
        let ctx = Ctx::new(&self.params, false);
        let f = self.net.encoder.forward(&ctx, &ctx.constant(frame.to_array()));
        Ok(FeatureMap::from_array(f.value(), 0, FeatureStage::Raw, self.cfg().scale))
    }

    /// Adds the model's channel embedding.
    pub fn add_channel_pos(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let ctx = Ctx::new(&self.params, false);
        let p: Vec<f32> = self.net.decoder.pos(&ctx).value().data().to_vec();
        add_channel_pos(f, &p)
    }

    pub fn attend(&self, f0p: &FeatureMap, f1p: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        f0p.require_stage(FeatureStage::PosEmbedded)?;
        f1p.require_stage(FeatureStage::PosEmbedded)?;
        let ctx = Ctx::new(&self.params, false);
        let (a, b) = self
            .net
            .decoder
            .attend(&ctx, &ctx.constant(f0p.to_array()), &ctx.constant(f1p.to_array()))?;
        let s = f0p.scale;
        Ok((
            FeatureMap::from_array(a.value(), 0, FeatureStage::CrossAttended, s),
            FeatureMap::from_array(b.value(), 0, FeatureStage::CrossAttended, s),
        ))
    }

    /// Flow sequence at `out` resolution from cross-attended features and the
    /// auxiliary channels.
    pub fn decode_flow(
        &self,
        f0pp: &FeatureMap,
        f1pp: &FeatureMap,
        aux: &FeatureMap,
        out: (usize, usize),
    ) -> Result<FlowSequence> {
        f0pp.require_stage(FeatureStage::CrossAttended)?;
        f1pp.require_stage(FeatureStage::CrossAttended)?;
        let ctx = Ctx::new(&self.params, false);
        let c = |f: &FeatureMap| ctx.constant(f.to_array());
        let seq = self.net.decoder.decode(&ctx, &c(f0pp), &c(f1pp), &c(aux), out)?;
        seq_from(&seq, 0)
    }

    /// Flow from `i0` to `i1`.
    pub fn predict(&self, i0: &Frame, i1: &Frame) -> Result<FlowSequence> {
        self.frame_pair(i0, i1)?;
        let ctx = Ctx::new(&self.params, false);
        let fl = self
            .net
            .flows(&ctx, &ctx.constant(i0.to_array()), &ctx.constant(i1.to_array()), false)?;
        seq_from(&fl.fwd, 0)
    }

    /// Forward and backward flow from one shared encoding and attention pass.
    pub fn predict_bidirectional(&self, i0: &Frame, i1: &Frame) -> Result<(FlowSequence, FlowSequence)> {
        self.frame_pair(i0, i1)?;
        let ctx = Ctx::new(&self.params, false);
        let fl = self
            .net
            .flows(&ctx, &ctx.constant(i0.to_array()), &ctx.constant(i1.to_array()), true)?;
        let bwd = fl.bwd.expect("bidirectional");
        Ok((seq_from(&fl.fwd, 0)?, seq_from(&bwd, 0)?))
    }

    /// Loads externally trained encoder weights (`encoder.*` tensors) from a
    /// safetensors file; returns how many tensors were replaced.
    pub fn load_encoder_weights(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let file = crate::tensorfile::read_tensor_file(path)?;
        self.params.load_prefixed("encoder.", &file.tensors)
    }
}

/// `F^P[.., d] = F[.., d] + p[d]`.
pub fn add_channel_pos(f: &FeatureMap, p: &[f32]) -> Result<FeatureMap> {
    f.require_stage(FeatureStage::Raw)?;
    if p.len() != f.channels() {
        return Err(Error::ShapeMismatch(format!(
            "embedding has {} channels, features have {}",
            p.len(),
            f.channels()
        )));
    }
    let data = f
        .data()
        .chunks_exact(f.channels())
        .flat_map(|px| px.iter().zip(p).map(|(a, b)| a + b))
        .collect();
    FeatureMap::new(f.height(), f.width(), f.channels(), data, FeatureStage::PosEmbedded, f.scale)
}

/// Domain-level Top-K auxiliary taken from `f1pp`.
pub fn topk_aux(f0pp: &FeatureMap, f1pp: &FeatureMap, k: usize) -> Result<FeatureMap> {
    topk_aux_from(f0pp, f1pp, k, false)
}

/// As [`topk_aux`]; `from_first` takes the channels from `f0pp` instead.
pub fn topk_aux_from(f0pp: &FeatureMap, f1pp: &FeatureMap, k: usize, from_first: bool) -> Result<FeatureMap> {
    if (f0pp.height(), f0pp.width(), f0pp.channels()) != (f1pp.height(), f1pp.width(), f1pp.channels()) {
        return Err(Error::ShapeMismatch("Top-K inputs differ in shape".into()));
    }
    let tape = kineflow_tensor::Tape::<f32>::no_grad();
    let (a, b) = (tape.constant(f0pp.to_array()), tape.constant(f1pp.to_array()));
    let src = if from_first { &a } else { &b };
    let out = topk_aux_var(&a, &b, src, k)?;
    Ok(FeatureMap::from_array(out.value(), 0, f1pp.stage, f1pp.scale))
}
