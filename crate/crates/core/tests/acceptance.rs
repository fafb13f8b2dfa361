//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.
//!
//! Arguments act as substring filters on criterion names, so
//! `cargo test --test acceptance -- warp topk` runs only those two.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use kineflow::dataio::{
    analytic_backward_flow, analytic_flow, decode_flo, encode_flo, forward_coverage_occlusion, make_subsampled_pair,
    read_kitti_png, synth_corpus, synth_pair, synth_specs, write_kitti_png, MotionKind, SampleRecord,
};
use kineflow::kinetics::motion_generator;
use kineflow::model::{Model, ModelConfig};
use kineflow::trainer::{evaluate, LogRecord, Phase, TrainConfig, Trainer};
use kineflow::types::{FlowField, Frame, RngSeed};
use kineflow::warp::{backward_warp_frame, occlusion_oracle};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_flow(r: &mut impl Rng, h: usize, w: usize, span: f32) -> FlowField {
    let uv = (0..h * w * 2).map(|_| r.random_range(-span..span)).collect();
    FlowField::new(h, w, uv, None).unwrap()
}

fn kinetics_scaling() -> Outcome {
    let mut r = rng(1);
    let alphas = [0.1, 0.25, 0.5, 0.9];
    for i in 0..1000 {
        let f = random_flow(&mut r, 8, 8, 64.0);
        for &a in &alphas {
            let g = motion_generator(&f, a).map_err(|e| e.to_string())?;
            let a32 = a as f32;
            for (j, (x, y)) in f.uv().iter().zip(g.uv()).enumerate() {
                ensure((a32 * x).to_bits() == y.to_bits(), || {
                    format!("flow {i}, alpha {a}, component {j}: {y} vs {}", a32 * x)
                })?;
            }
        }
    }
    for spec in synth_specs(&[MotionKind::Translation], 20, (32, 32), RngSeed(2)) {
        let rec = synth_pair(spec, (32, 32)).map_err(|e| e.to_string())?;
        for &a in &alphas {
            let sub = make_subsampled_pair(&rec, a).map_err(|e| e.to_string())?;
            let want = motion_generator(rec.gt_flow.as_ref().unwrap(), a).unwrap();
            ensure(sub.gt_flow.as_ref() == Some(&want), || format!("{spec:?} at alpha {a}"))?;
        }
    }
    Ok("4000 scaled flows and 80 subsampled pairs exact".into())
}

fn warp_identity() -> Outcome {
    let px = random_array(&mut rng(2), vec![24 * 20 * 3], 0.0, 1.0);
    let frame = Frame::new(24, 20, 3, px.data().iter().map(|&v| v as f32).collect()).unwrap();
    let out = backward_warp_frame(&frame, &FlowField::zeros(24, 20)).map_err(|e| e.to_string())?;
    let same = out.pixels().iter().zip(frame.pixels()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "zero flow changed the payload".into())?;

    for (dx, dy) in [(3i32, 0i32), (0, -2), (-4, 5), (1, 1)] {
        let out = backward_warp_frame(&frame, &FlowField::uniform(24, 20, dx as f32, dy as f32)).unwrap();
        for y in 0..24i32 {
            for x in 0..20i32 {
                let (sx, sy) = (x + dx, y + dy);
                if !(0..20).contains(&sx) || !(0..24).contains(&sy) {
                    continue;
                }
                for c in 0..3 {
                    let (got, want) = (out.get(y as usize, x as usize, c), frame.get(sy as usize, sx as usize, c));
                    ensure(got.to_bits() == want.to_bits(), || format!("shift ({dx}, {dy}) at ({y}, {x})"))?;
                }
            }
        }
    }

    let (h, w) = (16, 33);
    let ramp = Frame::from_fn(h, w, 1, |y, x, _| (x + 2 * y) as f32 / 64.0);
    let mut worst = 0f64;
    for (u, v) in [(0.25f32, 0.0f32), (0.5, 0.75), (-1.125, 0.375)] {
        let out = backward_warp_frame(&ramp, &FlowField::uniform(h, w, u, v)).unwrap();
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let want = (x as f64 + u as f64 + 2.0 * (y as f64 + v as f64)) / 64.0;
                worst = worst.max((out.get(y, x, 0) as f64 - want).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("ramp error {worst:e}"))?;
    Ok(format!("identity bit-exact, shifts exact, ramp error {worst:.1e}"))
}

fn occlusion_equivalence() -> Outcome {
    let (h, w) = (48, 48);
    let mut worst = 1.0f64;
    for spec in synth_specs(&[MotionKind::Translation, MotionKind::Rotation], 50, (h, w), RngSeed(3)) {
        let m = spec.motion.map(h, w);
        let fwd = analytic_flow(&m, h, w);
        let bwd = analytic_backward_flow(&m, h, w).map_err(|e| e.to_string())?;
        let a = occlusion_oracle(&fwd, &bwd).map_err(|e| e.to_string())?;
        let b = forward_coverage_occlusion(&m, h, w);
        let agree = a.binarize().iter().zip(b.binarize()).filter(|(p, q)| *p == q).count();
        worst = worst.min(agree as f64 / (h * w) as f64);
    }
    ensure(worst >= 0.99, || format!("worst pixel accuracy {worst:.4}"))?;
    Ok(format!("worst pixel accuracy {:.2}%", 100.0 * worst))
}

fn gradients() -> Outcome {
    let suite = gradient_suite();
    let mut parts = Vec::new();
    for (name, g) in &suite {
        ensure(g.probed >= 50, || format!("{name}: {} coordinates", g.probed))?;
        ensure(g.max_rel < 1e-4, || format!("{name}: {:e} at {}", g.max_rel, g.worst))?;
        parts.push(format!("{name} {:.0e}", g.max_rel));
    }
    Ok(parts.join(", "))
}

fn metrics() -> Outcome {
    metric_suite(100)?;
    let (outlier, inlier) = fl_hand_cases();
    ensure(outlier == 100.0 && inlier == 0.0, || format!("hand cases gave {outlier} and {inlier}"))?;
    Ok("100 instances within 1e-6, hand cases exact".into())
}

fn formats() -> Outcome {
    let mut r = rng(6);
    for _ in 0..50 {
        let f = random_flow(&mut r, 9, 13, 400.0);
        let back = decode_flo(&encode_flo(&f).unwrap()).map_err(|e| e.to_string())?;
        let same = back.uv().iter().zip(f.uv()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && back.same_size(&f), || ".flo round trip changed bits".into())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("k.png");
    let mut worst = 0f32;
    for _ in 0..20 {
        let f = random_flow(&mut r, 7, 11, 500.0);
        write_kitti_png(&f, &path).map_err(|e| e.to_string())?;
        let g = read_kitti_png(&path).map_err(|e| e.to_string())?;
        for (a, b) in f.uv().iter().zip(g.uv()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1.0 / 128.0, || format!("KITTI error {worst}"))?;
    let mut bytes = encode_flo(&FlowField::zeros(2, 2)).unwrap();
    bytes[0] ^= 0xff;
    let rejected = matches!(decode_flo(&bytes), Err(kineflow::Error::Format(_)));
    ensure(rejected, || "corrupted magic accepted".into())?;
    Ok(format!(".flo bit-exact, KITTI error {worst:.5}, bad magic rejected"))
}

fn topk() -> Outcome {
    let mut r = rng(9);
    for i in 0..100 {
        let (f0, f1) = (random_features(&mut r, 4, 5, 8), random_features(&mut r, 4, 5, 8));
        check_topk(&f0, &f1, 3).map_err(|e| format!("instance {i}: {e}"))?;
    }
    let d = ModelConfig::default();
    let (f0, f1) = (random_features(&mut r, 8, 8, d.dim), random_features(&mut r, 8, 8, d.dim));
    check_topk(&f0, &f1, d.top_k)?;
    Ok(format!("100 D=8/K=3 instances and K={} of D={} match the oracle", d.top_k, d.dim))
}

fn resume() -> Outcome {
    checkpoint_resume_matches(tiny_train_config(Phase::Ail, 6), 3)?;
    checkpoint_resume_matches(tiny_train_config(Phase::Kgl, 6), 3)?;
    Ok("supervised and self-supervised resumes bit-identical".into())
}

// -------------------------------------------------------------- training runs

fn overfit_corpus() -> Vec<SampleRecord> {
    synth_corpus(&[MotionKind::Translation], 10, (64, 64), RngSeed(0)).unwrap()
}

/// Every number a run logs, as bits; wall-clock time is excluded.
fn fingerprint(r: &LogRecord) -> Vec<u64> {
    let mut v = vec![r.step, r.lr.to_bits()];
    v.extend(r.losses.values().map(|x| x.to_bits()));
    v
}

struct AilRun {
    model: Model,
    l1_tail: f64,
    trace: Vec<Vec<u64>>,
}

/// Training L1 is the mean final-prediction L1 over the last this many steps.
const L1_WINDOW: usize = 50;

fn ail_run(data: &[SampleRecord]) -> Result<AilRun, String> {
    let mut t = Trainer::new(TrainConfig::desk(Phase::Ail)).map_err(|e| e.to_string())?;
    let (mut trace, mut l1) = (Vec::new(), Vec::new());
    t.run(data, None, None, |r| {
        trace.push(fingerprint(r));
        l1.push(r.losses["l1_final"]);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let tail = &l1[l1.len() - L1_WINDOW..];
    Ok(AilRun {
        model: t.model,
        l1_tail: tail.iter().sum::<f64>() / tail.len() as f64,
        trace,
    })
}

fn overfit(keep: &mut Option<Model>) -> Outcome {
    let data = overfit_corpus();
    let first = ail_run(&data)?;
    let epe = evaluate(&first.model, &data).map_err(|e| e.to_string())?.epe;
    let second = ail_run(&data)?;
    let same = first.trace == second.trace && first.model == second.model;
    let summary = format!("training L1 {:.3}, eval EPE {epe:.3}", first.l1_tail);
    *keep = Some(first.model);
    ensure(first.l1_tail < 0.5 && epe < 1.0, || summary.clone())?;
    ensure(same, || format!("{summary}; repeat run diverged"))?;
    Ok(format!("{summary}, repeat bit-identical"))
}

/// 100-step window means of the kinetics loss, in order.
fn window_means(kin: &[f64]) -> Vec<f64> {
    kin.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

fn kinetics_phase(model: Option<Model>) -> Outcome {
    let model = model.ok_or("needs the overfit checkpoint")?;
    let unlabeled: Vec<SampleRecord> = synth_corpus(&[MotionKind::Translation], 10, (64, 64), RngSeed(2))
        .unwrap()
        .iter()
        .map(|r| r.strip_labels())
        .collect();
    let held = synth_corpus(&[MotionKind::Translation], 10, (64, 64), RngSeed(1)).unwrap();
    let before = evaluate(&model, &held).map_err(|e| e.to_string())?.epe;
    let mut t = Trainer::from_model(TrainConfig::desk(Phase::Kgl), model).map_err(|e| e.to_string())?;
    let mut kin = Vec::new();
    t.run(&unlabeled, None, None, |r| {
        kin.push(r.losses["kinetics"]);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let after = evaluate(&t.model, &held).map_err(|e| e.to_string())?.epe;
    let means = window_means(&kin);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
    let summary = format!(
        "held-out EPE {before:.3} -> {after:.3}, kinetics window means [{}]",
        shown.join(", ")
    );
    ensure(after <= before + 0.05, || summary.clone())?;
    ensure(means.windows(2).all(|w| w[1] <= w[0]), || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------- main

struct Criterion {
    name: &'static str,
    budget: Duration,
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mins = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { name: "1 kinetics scaling", budget: Duration::from_secs(1) },
        Criterion { name: "2 warp identity", budget: Duration::from_secs(1) },
        Criterion { name: "3 occlusion oracle", budget: Duration::from_secs(10) },
        Criterion { name: "4 gradients", budget: Duration::from_secs(30) },
        Criterion { name: "5 metrics", budget: Duration::from_secs(5) },
        Criterion { name: "6 formats", budget: Duration::from_secs(5) },
        Criterion { name: "7 overfit", budget: mins(30) },
        Criterion { name: "8 kinetics phase", budget: mins(15) },
        Criterion { name: "9 topk", budget: Duration::from_secs(5) },
        Criterion { name: "10 resume", budget: mins(1) },
    ];

    let mut trained = None;
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        // The kinetics phase starts from the overfit model.
        let needed = wanted(c.name) || (c.name.starts_with("7 ") && wanted(criteria[7].name));
        if !needed {
            continue;
        }
        let start = Instant::now();
        let out = match c.name.split(' ').next().unwrap() {
            "1" => kinetics_scaling(),
            "2" => warp_identity(),
            "3" => occlusion_equivalence(),
            "4" => gradients(),
            "5" => metrics(),
            "6" => formats(),
            "7" => overfit(&mut trained),
            "8" => kinetics_phase(trained.take()),
            "9" => topk(),
            _ => resume(),
        };
        let took = start.elapsed();
        let out = out.and_then(|m| {
            if took <= c.budget {
                Ok(m)
            } else {
                Err(format!("{m}; took {took:.1?}, budget {:?}", c.budget))
            }
        });
        ran += 1;
        let (tag, msg) = match &out {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("criterion {:<20} {tag}  {:>8.2?}  {msg}", c.name, took);
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
