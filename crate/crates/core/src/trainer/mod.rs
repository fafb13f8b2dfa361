//! Two-phase training: supervised learning on labeled pairs, then
//! kinetics-guided self-supervision on unlabeled ones.
//!
//! Step `s` of a phase always trains on batch `s` of the dataset iterator and,
//! in the second phase, on the time fraction drawn for `s`. Together with a
//! checkpoint of parameters and optimizer moments this makes resumed runs
//! bit-identical to uninterrupted ones.

mod checkpoint;
mod log;
mod optim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kineflow_tensor::{Array, Float, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use log::{read_log, LogRecord, LogWriter};
pub use optim::{clip_grad_norm, one_cycle_lr, AdamW, Schedule};

use crate::dataio::{DatasetIter, SampleRecord};
use crate::error::{Error, Result};
use crate::kinetics::{kgl_forward, KineticsConfig};
use crate::losses::{ail_total_var, occ_l1_var, seq_l1_var, LossConfig, PerceptualExtractor};
use crate::metrics::MetricReport;
use crate::model::{FlowNet, Model, ModelConfig};
use crate::nn::Ctx;
use crate::types::{FlowField, RngSeed};
use crate::warp::{PayloadKind, WarpNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[serde(alias = "AIL")]
    Ail,
    #[serde(alias = "KGL")]
    Kgl,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Ail => "ail",
            Phase::Kgl => "kgl",
        }
    }
}

/// Dataset locations, relative to the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: u64,
    pub batch: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// `[height, width]` of the random training crop.
    pub crop: [usize; 2],
    pub seed: RngSeed,
    /// Evaluate every this many steps; 0 disables.
    #[serde(default)]
    pub eval_every: u64,
    /// Random horizontal flips.
    #[serde(default)]
    pub augment: bool,
    /// Global gradient-norm limit.
    #[serde(default = "default_clip")]
    pub clip_grad: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub warpnet: WarpNetConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub kinetics: KineticsConfig,
}

/// Pulls the offending key out of a deserializer message.
fn toml_key(msg: &str) -> String {
    for pat in ["missing field `", "unknown field `", "unknown variant `"] {
        if let Some(i) = msg.find(pat) {
            let rest = &msg[i + pat.len()..];
            if let Some(j) = rest.find('`') {
                return rest[..j].to_string();
            }
        }
    }
    // Type errors point at the key in the rendered snippet.
    msg.lines()
        .find_map(|l| l.split_once('|').map(|(_, r)| r.trim()).filter(|r| r.contains('=')))
        .and_then(|l| l.split('=').next())
        .map(|k| k.trim().to_string())
        .unwrap_or_else(|| "<document>".into())
}

impl TrainConfig {
    /// Desk-scale defaults: 2000 supervised steps or 500 self-supervised
    /// steps on 64x64 crops.
    pub fn desk(phase: Phase) -> Self {
        let (steps, lr_max) = match phase {
            Phase::Ail => (2000, 1e-3),
            Phase::Kgl => (500, 2e-5),
        };
        Self {
            phase,
            steps,
            batch: 2,
            lr_max,
            weight_decay: 1e-4,
            crop: [64, 64],
            seed: RngSeed(0),
            eval_every: 100,
            augment: false,
            clip_grad: 1.0,
            schedule: Schedule::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            warpnet: WarpNetConfig::default(),
            loss: LossConfig::default(),
            kinetics: KineticsConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            Error::config(toml_key(&e.to_string()), msg)
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads a config file; relative manifest paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.eval_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config serialization: {e}")))
    }

    pub fn check(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch < 1 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config("lr_max", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if self.crop[0] < 8 || self.crop[1] < 8 {
            return Err(Error::config("crop", "must be at least 8x8"));
        }
        if !(self.clip_grad > 0.0) {
            return Err(Error::config("clip_grad", "must be positive"));
        }
        let s = &self.schedule;
        if !(0.0..1.0).contains(&s.warmup) || !(s.start > 0.0 && s.start <= 1.0) || !(s.final_frac > 0.0 && s.final_frac <= 1.0)
        {
            return Err(Error::config("schedule", "fractions must lie in (0, 1]"));
        }
        self.model.check()?;
        self.loss.check()?;
        self.kinetics.check()
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        one_cycle_lr(step, self.steps, self.lr_max, &self.schedule)
    }
}

/// `[B, C, H, W]` from per-record `[1, C, H, W]` arrays.
fn stack<T: Float>(parts: Vec<Array<T>>) -> Array<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.len();
    Array::new(shape, parts.into_iter().flat_map(|a| a.into_data()).collect())
}

/// Batched training tensors.
pub struct Batch<T: Float> {
    pub i0: Array<T>,
    pub i1: Array<T>,
    pub flow: Option<Array<T>>,
    /// `[B, 1, H, W]` 0/1 mask, present when any record is sparse.
    pub valid: Option<Array<T>>,
    /// Present when every record carries one.
    pub occ: Option<Array<T>>,
}

impl<T: Float> Batch<T> {
    pub fn new(records: &[SampleRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let i0 = stack(records.iter().map(|r| r.frame0.to_array()).collect());
        let i1 = stack(records.iter().map(|r| r.frame1.to_array()).collect());
        let flow = records
            .iter()
            .map(|r| r.gt_flow.as_ref().map(|f| f.to_array()))
            .collect::<Option<Vec<_>>>()
            .map(stack);
        let mut valid = None;
        if records.iter().any(|r| r.gt_flow.as_ref().is_some_and(|f| f.valid().is_some())) {
            let mut parts = Vec::new();
            for r in records {
                let f = r.gt_flow.as_ref().expect("labeled");
                if f.valid().is_some_and(|m| !m.iter().any(|&v| v)) {
                    return Err(Error::EmptyValidSet);
                }
                let a = f
                    .valid_array()
                    .unwrap_or_else(|| Array::ones(vec![1, 1, f.height(), f.width()]));
                parts.push(a);
            }
            valid = Some(stack(parts));
        }
        let occ = records
            .iter()
            .map(|r| r.gt_occ.as_ref().map(|o| o.to_array()))
            .collect::<Option<Vec<_>>>()
            .map(stack);
        Ok(Self {
            i0,
            i1,
            flow,
            valid,
            occ,
        })
    }
}

/// Graph-level supervised loss and its named components.
pub fn ail_loss<T: Float>(
    net: &FlowNet,
    ctx: &Ctx<T>,
    ext: &PerceptualExtractor,
    batch: &Batch<T>,
    cfg: &LossConfig,
) -> Result<(Var<T>, BTreeMap<String, Var<T>>)> {
    let gt = ctx.constant(
        batch
            .flow
            .clone()
            .ok_or_else(|| Error::Precondition("supervised training needs ground-truth flow".into()))?,
    );
    let valid = batch.valid.clone().map(|v| ctx.constant(v));
    let (i0, i1) = (ctx.constant(batch.i0.clone()), ctx.constant(batch.i1.clone()));
    let fl = net.flows(ctx, &i0, &i1, true)?;
    let fwd = fl.fwd.last().expect("N >= 1");
    let bwd = fl.bwd.as_ref().and_then(|b| b.last()).expect("bidirectional");
    let l1 = seq_l1_var(&fl.fwd, &gt, valid.as_ref(), cfg.gamma)?;
    let l1_final = crate::losses::flow_l1_var(fwd, &gt, valid.as_ref())?;
    let wn = net.warpnet.forward(ctx, &i1, PayloadKind::Frame, fwd, Some(bwd))?;
    let perc = ext.loss_var(&i0, &wn.warped, cfg)?;
    let occ = match &batch.occ {
        Some(o) => Some(occ_l1_var(&wn.occ, &ctx.constant(o.clone()))?),
        None => None,
    };
    let total = ail_total_var(&l1, &perc, occ.as_ref(), cfg);
    let mut parts = BTreeMap::from([
        ("l1".to_string(), l1),
        ("l1_final".to_string(), l1_final.detach()),
        ("perceptual".to_string(), perc),
    ]);
    if let Some(o) = occ {
        parts.insert("occ".into(), o);
    }
    Ok((total, parts))
}

/// Losses and gradient norm of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub losses: BTreeMap<String, f64>,
    pub grad_norm: f64,
}

fn apply(
    model: &mut Model,
    opt: &mut AdamW,
    total: Var<f32>,
    parts: BTreeMap<String, Var<f32>>,
    ctx: &Ctx<f32>,
    lr: f64,
    weight_decay: f64,
    clip: f64,
) -> Result<StepStats> {
    let t = total.item() as f64;
    if !t.is_finite() {
        return Err(Error::invariant("finite loss", None));
    }
    let mut g = total.backward();
    let mut grads = ctx.param_grads(&mut g);
    let grad_norm = clip_grad_norm(&mut grads, clip);
    let mut losses: BTreeMap<String, f64> = parts.into_iter().map(|(k, v)| (k, v.item() as f64)).collect();
    losses.insert("total".into(), t);
    opt.step(&mut model.params, &grads, lr, weight_decay);
    Ok(StepStats {
        total: t,
        losses,
        grad_norm,
    })
}

/// One supervised update at learning rate `lr`.
pub fn ail_step(
    model: &mut Model,
    opt: &mut AdamW,
    ext: &PerceptualExtractor,
    records: &[SampleRecord],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let batch = Batch::new(records)?;
    let params = model.params.clone();
    let ctx = Ctx::new(&params, true);
    let (total, parts) = ail_loss(&model.net, &ctx, ext, &batch, &cfg.loss)?;
    apply(model, opt, total, parts, &ctx, lr, cfg.weight_decay, cfg.clip_grad)
}

/// One self-supervised update at time fraction `alpha` and learning rate `lr`.
pub fn kgl_update(
    model: &mut Model,
    opt: &mut AdamW,
    ext: &PerceptualExtractor,
    records: &[SampleRecord],
    alpha: f64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let batch = Batch::<f32>::new(records)?;
    let params = model.params.clone();
    let ctx = Ctx::new(&params, true);
    let (i0, i1) = (ctx.constant(batch.i0), ctx.constant(batch.i1));
    let out = kgl_forward(&model.net, &ctx, ext, &i0, &i1, alpha, &cfg.loss)?;
    let parts = BTreeMap::from([
        ("kinetics".to_string(), out.kinetics),
        ("perceptual".to_string(), out.perceptual),
    ]);
    let mut stats = apply(model, opt, out.total, parts, &ctx, lr, cfg.weight_decay, cfg.clip_grad)?;
    stats.losses.insert("alpha".into(), alpha);
    Ok(stats)
}

/// Mean metrics of `predict` over labeled records.
pub fn evaluate_with(
    records: &[SampleRecord],
    mut predict: impl FnMut(&SampleRecord) -> Result<FlowField>,
) -> Result<MetricReport> {
    let reports = records
        .iter()
        .map(|r| {
            let gt = r
                .gt_flow
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("record `{}` has no ground-truth flow", r.id)))?;
            MetricReport::compute(&predict(r)?, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(&reports)
}

/// Mean metrics of the model's final prediction over labeled records.
pub fn evaluate(model: &Model, records: &[SampleRecord]) -> Result<MetricReport> {
    evaluate_with(records, |r| Ok(model.predict(&r.frame0, &r.frame1)?.into_last()))
}

/// Parameters, optimizer and position within one phase.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    /// Completed steps of this phase.
    pub step: u64,
    pub ext: PerceptualExtractor,
}

impl Trainer {
    /// Fresh model initialised from the config seed.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.check()?;
        let model = Model::new(cfg.model.clone(), cfg.warpnet.clone(), cfg.seed)?;
        Self::from_model(cfg, model)
    }

    /// Starts a phase from existing weights with a fresh optimizer. The
    /// architecture sections of `cfg` are replaced by the model's own.
    pub fn from_model(mut cfg: TrainConfig, mut model: Model) -> Result<Self> {
        cfg.model = model.net.cfg.clone();
        cfg.warpnet = model.net.warpnet.cfg.clone();
        cfg.check()?;
        let freeze = cfg.phase == Phase::Kgl && cfg.kinetics.freeze_encoder;
        model.params.set_frozen("encoder.", freeze);
        let ext = PerceptualExtractor::standard(cfg.model.in_channels);
        Ok(Self {
            opt: AdamW::new(model.params.len()),
            cfg,
            model,
            step: 0,
            ext,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn data<'a>(&self, records: &'a [SampleRecord]) -> Result<DatasetIter<'a>> {
        let (h, w) = (self.cfg.crop[0], self.cfg.crop[1]);
        let mut it = DatasetIter::new(records, self.cfg.batch, self.cfg.seed, (h, w), self.cfg.augment)?;
        it.seek(self.step);
        Ok(it)
    }

    /// Trains on batch `self.step` and advances.
    pub fn train_step(&mut self, data: &DatasetIter) -> Result<LogRecord> {
        if self.is_done() {
            return Err(Error::Range(format!("phase already ran its {} steps", self.cfg.steps)));
        }
        let start = Instant::now();
        let s = self.step;
        let lr = self.cfg.lr(s)?;
        let batch = data.batch_at(s);
        let stats = match self.cfg.phase {
            Phase::Ail => ail_step(&mut self.model, &mut self.opt, &self.ext, &batch, lr, &self.cfg)?,
            Phase::Kgl => {
                let batch: Vec<_> = batch.iter().map(|r| r.strip_labels()).collect();
                let alpha = self.cfg.kinetics.sample_alpha(self.cfg.seed, s);
                kgl_update(&mut self.model, &mut self.opt, &self.ext, &batch, alpha, lr, &self.cfg)?
            }
        };
        self.step += 1;
        let mut losses = stats.losses;
        losses.insert("grad_norm".into(), stats.grad_norm);
        Ok(LogRecord {
            phase: self.cfg.phase.name().into(),
            step: s,
            lr,
            losses,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            eval: None,
        })
    }

    /// Runs until `until` steps are complete (the whole phase by default).
    /// Every record is passed to `on_record`, evaluation lines included.
    pub fn run(
        &mut self,
        train: &[SampleRecord],
        eval: Option<&[SampleRecord]>,
        until: Option<u64>,
        mut on_record: impl FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        let stop = until.unwrap_or(self.cfg.steps).min(self.cfg.steps);
        let data = self.data(train)?;
        while self.step < stop {
            let rec = self.train_step(&data)?;
            on_record(&rec)?;
            let every = self.cfg.eval_every;
            if let Some(ev) = eval.filter(|_| every > 0 && (self.step % every == 0 || self.step == self.cfg.steps)) {
                let start = Instant::now();
                let report = evaluate(&self.model, ev)?;
                on_record(&LogRecord::eval(self.cfg.phase, self.step, &report, start.elapsed()))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    /// Continues a phase exactly where the checkpoint left it.
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        ck.into_trainer()
    }
}

/// Self-supervised phase over unlabeled pairs, starting from `model`.
pub fn kgl_phase(
    model: Model,
    records: &[SampleRecord],
    cfg: &TrainConfig,
    eval: Option<&[SampleRecord]>,
    on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<Model> {
    if cfg.phase != Phase::Kgl {
        return Err(Error::config("phase", "expected kgl"));
    }
    let mut t = Trainer::from_model(cfg.clone(), model)?;
    t.run(records, eval, None, on_record)?;
    Ok(t.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_key_is_named() {
        let err = TrainConfig::from_toml_str("phase = \"ail\"\nbatch = 2\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "steps"),
            e => panic!("{e}"),
        }
        let err = TrainConfig::from_toml_str(
            "phase = \"ail\"\nsteps = 3\nbatch = 2\nlr_max = 0.001\nweight_decay = 0.0\ncrop = [16, 16]\nseed = 1\nbogus = 1\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "bogus"));
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig::desk(Phase::Kgl);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invariants_checked() {
        let mut cfg = TrainConfig::desk(Phase::Ail);
        cfg.lr_max = 0.0;
        assert!(matches!(cfg.check(), Err(Error::Config { key, .. }) if key == "lr_max"));
        cfg = TrainConfig::desk(Phase::Ail);
        cfg.steps = 0;
        assert!(matches!(cfg.check(), Err(Error::Config { key, .. }) if key == "steps"));
    }

    #[test]
    fn zero_flow_predictor_on_translation() {
        let r = crate::dataio::synth_pair(crate::dataio::SyntheticMotionSpec::translation(5.0, 0.0, 3), (32, 32)).unwrap();
        let rep = evaluate_with(std::slice::from_ref(&r), |r| Ok(FlowField::zeros(r.height(), r.width()))).unwrap();
        assert_eq!(rep.epe, 5.0);
        let rep = evaluate_with(std::slice::from_ref(&r), |r| Ok(r.gt_flow.clone().unwrap())).unwrap();
        assert_eq!(rep.epe, 0.0);
        rep.check_invariants().unwrap();
    }
}
