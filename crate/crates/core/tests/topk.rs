mod common;

use common::*;
use kineflow::model::{topk_aux, topk_aux_from, ModelConfig};
use kineflow::types::{FeatureMap, FeatureStage};
use kineflow::Error;

#[test]
fn small_instances_agree_with_exhaustive_scoring() {
    let mut r = rng(90);
    for i in 0..100 {
        let (f0, f1) = (random_features(&mut r, 4, 5, 8), random_features(&mut r, 4, 5, 8));
        check_topk(&f0, &f1, 3).unwrap_or_else(|e| panic!("instance {i}: {e}"));
    }
}

#[test]
fn default_k_keeps_exactly_k_source_channels() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.top_k, 64);
    let mut r = rng(91);
    let (f0, f1) = (random_features(&mut r, 8, 8, cfg.dim), random_features(&mut r, 8, 8, cfg.dim));
    check_topk(&f0, &f1, cfg.top_k).unwrap();
}

#[test]
fn identical_maps_keep_the_first_channels() {
    // Every channel scores 1, so ties resolve to the lowest indices.
    let mut r = rng(92);
    let f = random_features(&mut r, 3, 3, 8);
    let aux = topk_aux(&f, &f, 3).unwrap();
    for d in 0..3 {
        assert_eq!(aux.channel(d), f.channel(d));
    }
}

#[test]
fn source_side_is_selectable() {
    let mut r = rng(93);
    let (f0, f1) = (random_features(&mut r, 3, 4, 8), random_features(&mut r, 3, 4, 8));
    let from0 = topk_aux_from(&f0, &f1, 4, true).unwrap();
    let from1 = topk_aux_from(&f0, &f1, 4, false).unwrap();
    let scores: Vec<f64> = (0..8).map(|d| oracle_channel_score(&f0, &f1, d)).collect();
    for (j, &d) in oracle_top_k(&scores, 4).iter().enumerate() {
        assert_eq!(from0.channel(j), f0.channel(d));
        assert_eq!(from1.channel(j), f1.channel(d));
    }
}

#[test]
fn zero_channels_score_zero() {
    // Channel 0 is all zeros in f1; channel 1 is anticorrelated; channel 2
    // matches. The zero channel must rank between them.
    let f0 = FeatureMap::new(1, 2, 3, vec![1.0, 1.0, 1.0, 2.0, -1.0, 2.0], FeatureStage::CrossAttended, 8).unwrap();
    let f1 = FeatureMap::new(1, 2, 3, vec![0.0, -1.0, 1.0, 0.0, 1.0, 2.0], FeatureStage::CrossAttended, 8).unwrap();
    let aux = topk_aux(&f0, &f1, 2).unwrap();
    assert_eq!(aux.channel(0), f1.channel(2));
    assert_eq!(aux.channel(1), f1.channel(0));
}

#[test]
fn k_above_d_is_a_config_error() {
    let mut r = rng(94);
    let f = random_features(&mut r, 2, 2, 4);
    assert!(matches!(topk_aux(&f, &f, 5), Err(Error::Config { .. })));
}
