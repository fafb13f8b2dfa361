mod common;

use common::*;
use kineflow::dataio::{
    analytic_backward_flow, decode_flo, encode_flo, make_subsampled_pair, read_kitti_png, synth_pair,
    write_kitti_png, Motion, SyntheticMotionSpec,
};
use kineflow::kinetics::motion_generator;
use kineflow::losses::{kinetics_loss, occ_l1, perceptual, seq_l1, LossConfig, PerceptualExtractor};
use kineflow::model::{topk_aux, FlowNet};
use kineflow::nn::{Ctx, ParamStore};
use kineflow::trainer::{one_cycle_lr, Schedule};
use kineflow::types::{Frame, FlowField, FlowSequence, OcclusionMap, RngSeed, Validate};
use kineflow::warp::{backward_warp_frame, occlusion_oracle, warp};
use kineflow_tensor::{Tape, Var};
use proptest::prelude::*;

fn frame_from(seed: u64, h: usize, w: usize, c: usize) -> Frame {
    let a = random_array(&mut rng(seed), vec![1, c, h, w], 0.0, 1.0);
    Frame::from_array(&a, 0)
}

fn flow_from(seed: u64, h: usize, w: usize, span: f64) -> FlowField {
    let a = random_array(&mut rng(seed), vec![1, 2, h, w], -span, span);
    FlowField::from_array(&a, 0)
}

fn motion() -> impl Strategy<Value = Motion> {
    prop_oneof![
        (-4.0..4.0f64, -4.0..4.0f64).prop_map(|(dx, dy)| Motion::Translation { dx, dy }),
        (-0.3..0.3f64).prop_map(|angle| Motion::Rotation { angle }),
        (0.85..1.2f64).prop_map(|factor| Motion::Zoom { factor }),
        (-0.1..0.1f64, -0.1..0.1f64, -2.0..2.0f64).prop_map(|(p, q, t)| Motion::Affine {
            a: [[1.0 + p, q], [-q, 1.0 - p]],
            t: [t, -t],
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_is_linear_in_the_payload(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = random_array(&mut r, vec![2, 3, 7, 9], -1.0, 1.0);
        let y = random_array(&mut r, vec![2, 3, 7, 9], -1.0, 1.0);
        let f = random_array(&mut r, vec![2, 2, 7, 9], -3.0, 3.0);
        let t = Tape::<f64>::new();
        let (xv, yv, fv) = (t.constant(x), t.constant(y), t.constant(f));
        let lhs = warp(&xv.scale(a).add(&yv.scale(b)), &fv);
        let rhs = warp(&xv, &fv).scale(a).add(&warp(&yv, &fv).scale(b));
        for (l, r) in lhs.value().data().iter().zip(rhs.value().data()) {
            prop_assert!((l - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_flow_warp_is_the_identity(seed in any::<u64>(), h in 8usize..20, w in 8usize..20) {
        let x = frame_from(seed, h, w, 3);
        let out = backward_warp_frame(&x, &FlowField::zeros(h, w)).unwrap();
        prop_assert_eq!(out.pixels(), x.pixels());
    }

    #[test]
    fn flo_round_trips_exactly(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let f = flow_from(seed, h, w, 300.0);
        prop_assert_eq!(decode_flo(&encode_flo(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn kitti_round_trip_is_within_half_a_step(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let f = flow_from(seed, h, w, 500.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        write_kitti_png(&f, &path).unwrap();
        let g = read_kitti_png(&path).unwrap();
        prop_assert!(g.valid().unwrap().iter().all(|&v| v));
        for (a, b) in f.uv().iter().zip(g.uv()) {
            prop_assert!((a - b).abs() <= 1.0 / 128.0, "{} vs {}", a, b);
        }
    }

    // frame1 is frame0 resampled through the inverse map, so sampling frame0
    // along the backward flow reproduces frame1 wherever the source lies
    // inside frame0.
    #[test]
    fn synthetic_pairs_are_photometrically_consistent(m in motion(), tex in any::<u64>()) {
        let (h, w) = (20, 24);
        let r = synth_pair(SyntheticMotionSpec::new(m, tex), (h, w)).unwrap();
        let map = m.map(h, w);
        let warped = backward_warp_frame(&r.frame0, &analytic_backward_flow(&map, h, w).unwrap()).unwrap();
        let inv = map.inverse().unwrap();
        for y in 0..h {
            for x in 0..w {
                let (tx, ty) = inv.apply(x as f64, y as f64);
                if !(0.0..=(w - 1) as f64).contains(&tx) || !(0.0..=(h - 1) as f64).contains(&ty) {
                    continue;
                }
                for c in 0..3 {
                    let d = (r.frame1.get(y, x, c) - warped.get(y, x, c)).abs();
                    prop_assert!(d <= 1e-5, "{:?} at ({}, {}): {}", m, y, x, d);
                }
            }
        }
    }

    #[test]
    fn full_subsampling_reproduces_the_record(m in motion(), tex in any::<u64>()) {
        let r = synth_pair(SyntheticMotionSpec::new(m, tex), (16, 18)).unwrap();
        let s = make_subsampled_pair(&r, 1.0).unwrap();
        prop_assert_eq!(&s.gt_flow, &r.gt_flow);
        prop_assert_eq!(s.frame0.pixels(), r.frame0.pixels());
        for (a, b) in s.frame1.pixels().iter().zip(r.frame1.pixels()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn intermediate_truth_is_the_generator_output(
        dx in -6.0..6.0f64, dy in -6.0..6.0f64, tex in any::<u64>(), alpha in 0.05..0.95f64,
    ) {
        let r = synth_pair(SyntheticMotionSpec::translation(dx, dy, tex), (24, 24)).unwrap();
        let s = make_subsampled_pair(&r, alpha).unwrap();
        let want = motion_generator(r.gt_flow.as_ref().unwrap(), alpha).unwrap();
        prop_assert_eq!(s.gt_flow.unwrap(), want);
    }

    #[test]
    fn generator_is_linear(seed in any::<u64>(), alpha in 0.01..0.99f64, k in -4i32..4, a in -3.0f32..3.0) {
        let f = flow_from(seed, 5, 6, 50.0);
        let g = motion_generator(&f, alpha).unwrap();
        // Scaling by a power of two commutes exactly with the rounded product.
        let p = 2f32.powi(k);
        prop_assert_eq!(motion_generator(&f.map(|v| p * v), alpha).unwrap(), g.map(|v| p * v));
        // Any other scalar rounds twice, so the two sides may differ by one ulp.
        let lhs = motion_generator(&f.map(|v| a * v), alpha).unwrap();
        for (l, r) in lhs.uv().iter().zip(g.map(|v| a * v).uv()) {
            prop_assert!((l - r).abs() <= 2.0 * f32::EPSILON * l.abs().max(r.abs()));
        }
    }

    // A pixel is consistent when the backward flow at its target undoes it,
    // which holds exactly for affine maps; only pixels whose target leaves the
    // frame may be flagged.
    #[test]
    fn consistent_affine_pairs_have_no_interior_occlusion(m in motion()) {
        let (h, w) = (20, 22);
        let map = m.map(h, w);
        let fwd = kineflow::dataio::analytic_flow(&map, h, w);
        let bwd = analytic_backward_flow(&map, h, w).unwrap();
        let occ = occlusion_oracle(&fwd, &bwd).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (tx, ty) = map.apply(x as f64, y as f64);
                let interior = tx >= 0.0 && tx <= (w - 1) as f64 && ty >= 0.0 && ty <= (h - 1) as f64;
                if interior {
                    prop_assert_eq!(occ.get(y, x), 0.0, "{:?} at ({}, {})", m, y, x);
                }
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_identity(seed in any::<u64>(), gamma in 0.1..1.0f64) {
        let gt = flow_from(seed, 4, 4, 5.0);
        let preds = FlowSequence::new(vec![flow_from(seed ^ 1, 4, 4, 5.0), flow_from(seed ^ 2, 4, 4, 5.0)]).unwrap();
        prop_assert!(seq_l1(&preds, &gt, gamma).unwrap() >= 0.0);
        prop_assert!(kinetics_loss(&gt, &preds, gamma).unwrap() >= 0.0);
        let exact = FlowSequence::new(vec![gt.clone(), gt.clone()]).unwrap();
        prop_assert_eq!(seq_l1(&exact, &gt, gamma).unwrap(), 0.0);
        prop_assert_eq!(kinetics_loss(&gt, &exact, gamma).unwrap(), 0.0);

        let o: Vec<f32> = random_array(&mut rng(seed), vec![16], 0.0, 1.0).data().iter().map(|&v| v as f32).collect();
        let occ = OcclusionMap::new(4, 4, o).unwrap();
        prop_assert_eq!(occ_l1(&occ, &occ).unwrap(), 0.0);
        prop_assert!(occ_l1(&occ, &OcclusionMap::zeros(4, 4)).unwrap() >= 0.0);

        let ext = PerceptualExtractor::standard(3);
        let cfg = LossConfig::default();
        let (a, b) = (frame_from(seed, 8, 8, 3), frame_from(seed ^ 3, 8, 8, 3));
        prop_assert!(perceptual(&ext, &a, &b, &cfg).unwrap() >= 0.0);
        prop_assert_eq!(perceptual(&ext, &a, &a, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn worse_predictions_never_lower_the_sequence_loss(
        seed in any::<u64>(), which in 0usize..3, grow in 0.0f32..5.0, gamma in 0.1..1.0f64,
    ) {
        let gt = flow_from(seed, 4, 4, 5.0);
        let items: Vec<FlowField> = (0..3).map(|i| flow_from(seed ^ (i + 1), 4, 4, 5.0)).collect();
        let base = seq_l1(&FlowSequence::new(items.clone()).unwrap(), &gt, gamma).unwrap();
        // Moving every component further from the truth raises that item's L1.
        let mut worse = items;
        let uv: Vec<f32> = worse[which]
            .uv()
            .iter()
            .zip(gt.uv())
            .map(|(&p, &g)| if p >= g { p + grow } else { p - grow })
            .collect();
        worse[which] = FlowField::new(4, 4, uv, None).unwrap();
        prop_assert!(seq_l1(&FlowSequence::new(worse).unwrap(), &gt, gamma).unwrap() >= base);
    }

    #[test]
    fn validation_is_idempotent(seed in any::<u64>(), poison in any::<bool>()) {
        let mut px = frame_from(seed, 8, 9, 3).pixels().to_vec();
        if poison {
            px[(seed % 216) as usize] = f32::NAN;
        }
        let f = Frame::new(8, 9, 3, px).unwrap();
        let before = f.clone();
        let (first, second) = (f.validate(), f.validate());
        prop_assert_eq!(first.is_ok(), !poison);
        prop_assert_eq!(format!("{first:?}"), format!("{second:?}"));
        if let Err(e) = first {
            prop_assert_eq!(e.code(), "E_INVARIANT");
            prop_assert!(e.to_string().contains("finite"));
        }
        prop_assert_eq!(f.pixels().len(), before.pixels().len());
        prop_assert!(f.pixels().iter().zip(before.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let flow = flow_from(seed, 8, 9, 2.0);
        prop_assert_eq!(flow.validate().is_ok(), flow.validate().is_ok());
    }

    #[test]
    fn auxiliary_channels_come_from_the_source(seed in any::<u64>(), k in 1usize..=8) {
        let mut r = rng(seed);
        let (f0, f1) = (random_features(&mut r, 3, 4, 8), random_features(&mut r, 3, 4, 8));
        let aux = topk_aux(&f0, &f1, k).unwrap();
        prop_assert_eq!(aux.channels(), k);
        for d in 0..k {
            let ch = aux.channel(d);
            let hit = (0..8).any(|s| {
                f1.channel(s).iter().zip(&ch).all(|(a, b)| a.to_bits() == b.to_bits())
            });
            prop_assert!(hit, "aux channel {} matches no source channel", d);
        }
    }

    #[test]
    fn schedule_stays_within_its_bounds(steps in 1u64..5000, frac in 0.0..1.0f64, lr in 1e-6..1.0f64) {
        let s = Schedule::default();
        let step = ((steps - 1) as f64 * frac) as u64;
        let v = one_cycle_lr(step, steps, lr, &s).unwrap();
        prop_assert!(v > 0.0 && v <= lr * (1.0 + 1e-12));
        prop_assert!(v >= lr * s.start.min(s.final_frac) * (1.0 - 1e-12));
        prop_assert!(one_cycle_lr(steps, steps, lr, &s).is_err());
    }
}

#[test]
fn attention_keeps_batch_items_apart() {
    let mut store = ParamStore::<f64>::new();
    let net = FlowNet::new(&mut store, RngSeed(8), tiny_model(), tiny_warp()).unwrap();
    let ctx = Ctx::new(&store, false);
    let mut r = rng(8);
    let f0 = random_array(&mut r, vec![3, 8, 3, 4], -1.0, 1.0);
    let f1 = random_array(&mut r, vec![3, 8, 3, 4], -1.0, 1.0);
    let (a0, a1) = net.decoder.attend(&ctx, &ctx.constant(f0.clone()), &ctx.constant(f1.clone())).unwrap();

    let perm = [2usize, 0, 1];
    let shuffle = |a: &kineflow_tensor::Array<f64>| {
        let v = ctx.constant(a.clone());
        let parts: Vec<Var<f64>> = perm.iter().map(|&i| v.narrow(0, i, 1)).collect();
        Var::cat(&parts.iter().collect::<Vec<_>>(), 0)
    };
    let (p0, p1) = net.decoder.attend(&ctx, &shuffle(&f0), &shuffle(&f1)).unwrap();
    for (slot, &i) in perm.iter().enumerate() {
        for (full, part) in [(&a0, &p0), (&a1, &p1)] {
            let want = full.narrow(0, i, 1);
            let got = part.narrow(0, slot, 1);
            for (x, y) in want.value().data().iter().zip(got.value().data()) {
                assert!((x - y).abs() <= 1e-12, "item {i}: {x} vs {y}");
            }
        }
    }
}
