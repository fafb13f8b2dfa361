//! Independent reference implementations shared by the integration tests and
//! the acceptance harness.

#![allow(dead_code)]

use std::rc::Rc;

use kineflow::model::ModelConfig;
use kineflow::nn::{Ctx, ParamId, ParamStore};
use kineflow::types::{FeatureMap, FlowField, RngSeed};
use kineflow::warp::WarpNetConfig;
use kineflow_tensor::{Array, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

/// Relative error with a floor on the denominator, so coordinates whose true
/// derivative is zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub probed: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            probed: 0,
            max_rel: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        self.probed += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            self.worst = format!("{what}: analytic {analytic:e}, numeric {numeric:e}");
        }
    }
}

const STEP: f64 = 1e-6;

/// Central differences of the scalar `f` against reverse mode, at up to
/// `per_input` evenly spaced coordinates of each input listed in `probe`.
pub fn grad_check(
    inputs: &[Array<f64>],
    probe: &[usize],
    per_input: usize,
    f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
) -> GradCheck {
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|a| tape.leaf(Rc::new(a.clone()))).collect();
    let y = f(&tape, &vars);
    let g = y.backward();
    let eval = |xs: &[Array<f64>]| {
        let t = Tape::no_grad();
        let vs: Vec<Var<f64>> = xs.iter().map(|a| t.constant(a.clone())).collect();
        f(&t, &vs).item()
    };
    let mut out = GradCheck::new();
    for &i in probe {
        let analytic = g.get_or_zeros(&vars[i]);
        let n = inputs[i].len();
        let stride = (n / per_input.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_input) {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&xs);
            out.record(format!("input {i}[{j}]"), analytic.data()[j], (up - down) / (2.0 * STEP));
        }
    }
    out
}

/// Central differences of a loss with respect to chosen parameter entries.
pub fn param_grad_check(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    f: impl Fn(&Ctx<f64>) -> Var<f64>,
) -> GradCheck {
    let ctx = Ctx::new(store, true);
    let y = f(&ctx);
    let mut g = y.backward();
    let grads = ctx.param_grads(&mut g);
    let eval = |s: &ParamStore<f64>| f(&Ctx::new(s, false)).item();
    let mut out = GradCheck::new();
    for &(id, j) in coords {
        let analytic = grads[id.index()].as_ref().map_or(0.0, |a| a.data()[j]);
        let mut s = store.clone();
        s.get_mut(id).data_mut()[j] += STEP;
        let up = eval(&s);
        s.get_mut(id).data_mut()[j] -= 2.0 * STEP;
        let down = eval(&s);
        out.record(format!("{}[{j}]", store.name(id)), analytic, (up - down) / (2.0 * STEP));
    }
    out
}

/// Replaces every all-zero parameter (the zero-initialised heads) with small
/// random values, so gradients reach every input.
pub fn perturb_zeroed(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.data().iter().all(|&v| v == 0.0) {
            for v in p.data_mut() {
                *v = scale * (rng.random::<f64>() - 0.5);
            }
        }
    }
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    RngSeed(seed).rng(0)
}

// ------------------------------------------------------------------ metrics

fn pixel(pred: &FlowField, gt: &FlowField, y: usize, x: usize) -> (f64, f64) {
    let (pu, pv) = pred.get(y, x);
    let (gu, gv) = gt.get(y, x);
    let (du, dv) = (pu as f64 - gu as f64, pv as f64 - gv as f64);
    ((du * du + dv * dv).sqrt(), ((gu as f64).powi(2) + (gv as f64).powi(2)).sqrt())
}

fn valid_pixels(gt: &FlowField) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if gt.is_valid(y, x) {
                v.push((y, x));
            }
        }
    }
    v
}

pub fn oracle_epe_map(pred: &FlowField, gt: &FlowField) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            out.push(if gt.is_valid(y, x) { pixel(pred, gt, y, x).0 } else { f64::NAN });
        }
    }
    out
}

pub fn oracle_epe(pred: &FlowField, gt: &FlowField) -> f64 {
    let v = valid_pixels(gt);
    v.iter().map(|&(y, x)| pixel(pred, gt, y, x).0).sum::<f64>() / v.len() as f64
}

pub fn oracle_fl_all(pred: &FlowField, gt: &FlowField) -> f64 {
    let v = valid_pixels(gt);
    let mut outliers = 0;
    for &(y, x) in &v {
        let (e, m) = pixel(pred, gt, y, x);
        if e > 3.0 && e / m > 0.05 {
            outliers += 1;
        }
    }
    100.0 * outliers as f64 / v.len() as f64
}

pub fn oracle_buckets(pred: &FlowField, gt: &FlowField) -> [Option<f64>; 3] {
    let mut sums = [(0.0, 0usize); 3];
    for (y, x) in valid_pixels(gt) {
        let (e, m) = pixel(pred, gt, y, x);
        let b = if m < 10.0 {
            0
        } else if m < 40.0 {
            1
        } else {
            2
        };
        sums[b].0 += e;
        sums[b].1 += 1;
    }
    sums.map(|(s, n)| if n == 0 { None } else { Some(s / n as f64) })
}

pub fn oracle_fractions(pred: &FlowField, gt: &FlowField) -> [f64; 3] {
    let v = valid_pixels(gt);
    [1.0, 3.0, 5.0].map(|t| v.iter().filter(|&&(y, x)| pixel(pred, gt, y, x).0 > t).count() as f64 / v.len() as f64)
}

/// A random `h x w` prediction and ground truth with magnitudes spanning all
/// three buckets and a random sparse mask (never empty).
pub fn random_flow_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (FlowField, FlowField) {
    let mut gt_uv = Vec::with_capacity(h * w * 2);
    let mut pred_uv = Vec::with_capacity(h * w * 2);
    for _ in 0..h * w {
        let mag = [3.0, 25.0, 70.0][rng.random_range(0..3)] * rng.random::<f64>();
        let ang = rng.random::<f64>() * std::f64::consts::TAU;
        let (u, v) = (mag * ang.cos(), mag * ang.sin());
        let err = 8.0 * rng.random::<f64>();
        let eang = rng.random::<f64>() * std::f64::consts::TAU;
        gt_uv.extend([u as f32, v as f32]);
        pred_uv.extend([(u + err * eang.cos()) as f32, (v + err * eang.sin()) as f32]);
    }
    let mut valid: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < 0.7).collect();
    valid[rng.random_range(0..h * w)] = true;
    let hwc = |uv: Vec<f32>| {
        FlowField::from_hwc(&[h, w, 2], uv, None).unwrap()
    };
    let sparse = rng.random::<bool>();
    let gt = hwc(gt_uv).with_valid(sparse.then_some(valid)).unwrap();
    (hwc(pred_uv), gt)
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

// -------------------------------------------------------------------- top-k

/// Flattened cosine similarity of channel `d` between the two maps.
pub fn oracle_channel_score(f0: &FeatureMap, f1: &FeatureMap, d: usize) -> f64 {
    let (mut dot, mut a, mut b) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..f0.height() {
        for x in 0..f0.width() {
            let (p, q) = (f0.get(y, x, d) as f64, f1.get(y, x, d) as f64);
            dot += p * q;
            a += p * p;
            b += q * q;
        }
    }
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        dot / (a.sqrt() * b.sqrt())
    }
}

/// Repeated selection of the best remaining score; a strict comparison keeps
/// the lower index on ties.
pub fn oracle_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (d, &s) in scores.iter().enumerate() {
            if !taken[d] && best.is_none_or(|b| s > scores[b]) {
                best = Some(d);
            }
        }
        let b = best.expect("k <= D");
        taken[b] = true;
        out.push(b);
    }
    out
}

// ------------------------------------------------------------------- models

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        scale: 4,
        dim: 8,
        encoder_width: 4,
        heads: 2,
        self_layers: 1,
        cross_layers: 1,
        top_k: 3,
        residual_blocks: 2,
        hidden: 6,
        ..ModelConfig::default()
    }
}

pub fn tiny_warp() -> WarpNetConfig {
    WarpNetConfig {
        width: 4,
        depth: 1,
        ..WarpNetConfig::default()
    }
}

// ------------------------------------------------------------------- suites

use kineflow::losses::{kinetics_loss_var, seq_l1_var, LossConfig, PerceptualExtractor};
use kineflow::metrics::{bucketed_epe, epe, epe_map, fl_all, px_fractions};
use kineflow::model::topk_aux;
use kineflow::nn::Init;
use kineflow::types::FeatureStage;
use kineflow::warp::{warp, PayloadKind, WarpNet};

/// Finite-difference checks of the differentiable operations on 4x4 float64
/// instances, with the probed-coordinate count of each.
pub fn gradient_suite() -> Vec<(&'static str, GradCheck)> {
    let mut r = rng(404);
    let (h, w) = (4, 4);
    let mut out = Vec::new();

    // Flows avoid integer offsets, where bilinear sampling has kinks.
    let flow = |r: &mut ChaCha8Rng| {
        let mut a = random_array(r, vec![1, 2, h, w], -1.4, 1.4);
        for v in a.data_mut() {
            if (*v - v.round()).abs() < 0.05 {
                *v += 0.1;
            }
        }
        a
    };

    let payload = random_array(&mut r, vec![1, 2, h, w], -1.0, 1.0);
    let weights = random_array(&mut r, vec![1, 2, h, w], -1.0, 1.0);
    let f = flow(&mut r);
    out.push((
        "backward_warp",
        grad_check(&[payload, f], &[0, 1], 32, |t, v| warp(&v[0], &v[1]).mul(&t.constant(weights.clone())).sum_all()),
    ));

    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(RngSeed(9).rng_for("init", 0));
    let net = WarpNet::new(&mut store, &mut init, "warpnet", tiny_warp(), 3, 8);
    perturb_zeroed(&mut store, &mut r, 0.4);
    let frame = random_array(&mut r, vec![1, 3, h, w], 0.0, 1.0);
    let w1 = random_array(&mut r, vec![1, 3, h, w], -1.0, 1.0);
    let w2 = random_array(&mut r, vec![1, 1, h, w], -1.0, 1.0);
    let (fwd, bwd) = (flow(&mut r), flow(&mut r));
    out.push((
        "warpnet_forward",
        grad_check(&[frame, fwd, bwd], &[0, 1, 2], 24, |t, v| {
            let ctx = Ctx::on_tape(&store, t.clone());
            let o = net.forward(&ctx, &v[0], PayloadKind::Frame, &v[1], Some(&v[2])).unwrap();
            o.warped.mul(&t.constant(w1.clone())).sum_all().add(&o.occ.mul(&t.constant(w2.clone())).sum_all())
        }),
    ));

    let preds: Vec<Array<f64>> = (0..3).map(|_| random_array(&mut r, vec![1, 2, h, w], -3.0, 3.0)).collect();
    let gt = random_array(&mut r, vec![1, 2, h, w], -3.0, 3.0);
    let mut inputs = preds.clone();
    inputs.push(gt);
    out.push((
        "seq_l1",
        grad_check(&inputs, &[0, 1, 2], 20, |_, v| seq_l1_var(&v[..3], &v[3], None, 0.8).unwrap()),
    ));
    // The teacher is a stop-gradient target; only the students are probed.
    out.push((
        "kinetics_loss",
        grad_check(&inputs, &[0, 1, 2], 20, |_, v| kinetics_loss_var(&v[3], &v[..3], 0.8).unwrap()),
    ));

    let ext = PerceptualExtractor::standard(3);
    let cfg = LossConfig::default();
    let a = random_array(&mut r, vec![1, 3, h, w], 0.0, 1.0);
    let b = random_array(&mut r, vec![1, 3, h, w], 0.0, 1.0);
    out.push(("perceptual", grad_check(&[a, b], &[0, 1], 48, |_, v| ext.loss_var(&v[0], &v[1], &cfg).unwrap())));
    out
}

/// Metric functions against the loop oracles on `n` random 8x8 instances;
/// returns the first disagreement.
pub fn metric_suite(n: usize) -> Result<(), String> {
    let mut r = rng(505);
    for k in 0..n {
        let (pred, gt) = random_flow_pair(&mut r, 8, 8);
        let e = |m: &str| format!("instance {k}: {m}");
        let map = epe_map(&pred, &gt).map_err(|x| e(&x.to_string()))?;
        for (i, (a, b)) in map.iter().zip(oracle_epe_map(&pred, &gt)).enumerate() {
            if a.is_nan() != b.is_nan() || (!b.is_nan() && !close(*a, b, 1e-6)) {
                return Err(e(&format!("epe_map[{i}] {a} vs {b}")));
            }
        }
        let checks = [
            ("epe", epe(&pred, &gt).unwrap(), oracle_epe(&pred, &gt)),
            ("fl_all", fl_all(&pred, &gt).unwrap(), oracle_fl_all(&pred, &gt)),
        ];
        for (name, a, b) in checks {
            if !close(a, b, 1e-6) {
                return Err(e(&format!("{name} {a} vs {b}")));
            }
        }
        let (s0, s1, s2) = bucketed_epe(&pred, &gt).unwrap();
        for (i, (a, b)) in [s0, s1, s2].into_iter().zip(oracle_buckets(&pred, &gt)).enumerate() {
            let same = match (a, b) {
                (Some(a), Some(b)) => close(a, b, 1e-6),
                (None, None) => true,
                _ => false,
            };
            if !same {
                return Err(e(&format!("bucket {i} {a:?} vs {b:?}")));
            }
        }
        let (f1, f3, f5) = px_fractions(&pred, &gt).unwrap();
        for (a, b) in [f1, f3, f5].into_iter().zip(oracle_fractions(&pred, &gt)) {
            if !close(a, b, 1e-6) {
                return Err(e(&format!("px_fractions {a} vs {b}")));
            }
        }
    }
    Ok(())
}

/// The two single-pixel outlier cases: magnitude 10 with error 5 is an
/// outlier, magnitude 200 with error 5 is not.
pub fn fl_hand_cases() -> (f64, f64) {
    let gt10 = FlowField::uniform(1, 1, 6.0, 8.0);
    let pred10 = FlowField::uniform(1, 1, 9.0, 12.0);
    let gt200 = FlowField::uniform(1, 1, 120.0, 160.0);
    let pred200 = FlowField::uniform(1, 1, 123.0, 164.0);
    (fl_all(&pred10, &gt10).unwrap(), fl_all(&pred200, &gt200).unwrap())
}

pub fn random_features(r: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    let data = (0..h * w * d).map(|_| r.random::<f32>() * 2.0 - 1.0).collect();
    FeatureMap::new(h, w, d, data, FeatureStage::CrossAttended, 8).unwrap()
}

/// Checks `topk_aux` output channels against the exhaustive oracle order.
pub fn check_topk(f0: &FeatureMap, f1: &FeatureMap, k: usize) -> Result<(), String> {
    let aux = topk_aux(f0, f1, k).map_err(|e| e.to_string())?;
    if aux.channels() != k {
        return Err(format!("{} channels, expected {k}", aux.channels()));
    }
    let scores: Vec<f64> = (0..f1.channels()).map(|d| oracle_channel_score(f0, f1, d)).collect();
    let order = oracle_top_k(&scores, k);
    for (j, &d) in order.iter().enumerate() {
        let (a, b) = (aux.channel(j), f1.channel(d));
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("aux channel {j} is not source channel {d}"));
        }
    }
    Ok(())
}

// ----------------------------------------------------------------- training

use kineflow::dataio::{synth_corpus, MotionKind, SampleRecord};
use kineflow::trainer::{Checkpoint, Phase, TrainConfig, Trainer};

/// A few seconds of training: tiny model, 16x16 crops, batch 2.
pub fn tiny_train_config(phase: Phase, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(phase);
    cfg.steps = steps;
    cfg.crop = [16, 16];
    cfg.eval_every = 0;
    cfg.model = tiny_model();
    cfg.warpnet = tiny_warp();
    cfg
}

pub fn tiny_corpus(n: usize, seed: u64) -> Vec<SampleRecord> {
    synth_corpus(&[MotionKind::Translation, MotionKind::Rotation], n, (20, 20), RngSeed(seed)).unwrap()
}

/// Trains `before` steps, round-trips a checkpoint through bytes, and checks
/// that the next step matches an uninterrupted run bit for bit.
pub fn checkpoint_resume_matches(cfg: TrainConfig, before: u64) -> Result<(), String> {
    let data = tiny_corpus(4, 5);
    let mut straight = Trainer::new(cfg).map_err(|e| e.to_string())?;
    straight.run(&data, None, Some(before), |_| Ok(())).map_err(|e| e.to_string())?;
    let bytes = straight.checkpoint().to_bytes().map_err(|e| e.to_string())?;
    let mut resumed = Checkpoint::from_bytes(&bytes)
        .and_then(|c| c.into_trainer())
        .map_err(|e| e.to_string())?;
    if resumed.model != straight.model || resumed.opt != straight.opt || resumed.step != before {
        return Err("restored state differs before stepping".into());
    }
    let a = straight.train_step(&straight.data(&data).unwrap()).map_err(|e| e.to_string())?;
    let b = resumed.train_step(&resumed.data(&data).unwrap()).map_err(|e| e.to_string())?;
    if a.losses != b.losses || a.lr != b.lr {
        return Err(format!("step losses differ: {:?} vs {:?}", a.losses, b.losses));
    }
    let bits = |t: &Trainer| -> Vec<u32> {
        t.model.params.iter().flat_map(|(_, _, v)| v.data().iter().map(|x| x.to_bits())).collect()
    };
    if bits(&straight) != bits(&resumed) || straight.opt != resumed.opt {
        return Err("parameters or optimizer state differ after one step".into());
    }
    Ok(())
}
