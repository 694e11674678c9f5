mod common;

use common::oracles::enumerate_proposals;
use common::rng;
use miniyolo::model::ChannelWidths;
use miniyolo::postprocess::{count_for_grids, count_proposals, decode_all};
use miniyolo::*;
use rand::Rng;

#[test]
fn full_scale_identity() {
    assert_eq!(count_for_grids(&[13, 26, 52], 3), 10647);
    assert_eq!(count_proposals(&ModelConfig::paper_scale()), 10647);
    assert_eq!(enumerate_proposals(&ModelConfig::paper_scale()), 10647);
}

#[test]
fn closed_form_matches_enumeration_on_random_configs() {
    let mut r = rng(21);
    for _ in 0..50 {
        let s0 = 1usize << r.random_range(1..4);
        let cfg = ModelConfig {
            input_size: 4 * s0 * r.random_range(1..8),
            num_classes: r.random_range(1..5),
            anchors_per_cell: r.random_range(1..6),
            pathway_strides: [s0, 2 * s0, 4 * s0],
            widths: ChannelWidths {
                stem: vec![1; s0.trailing_zeros() as usize],
                stages: [1, 1, 1],
                heads: [1, 1, 1],
            },
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(count_proposals(&cfg), enumerate_proposals(&cfg), "{cfg:?}");
    }
}

#[test]
fn decoded_slots_match_the_count() {
    let cfg = ModelConfig::default();
    let state = ModelState::build(cfg.clone(), 1).unwrap();
    let out = state.forward(&Tensor::full(&[3, 96, 96], 0.5)).unwrap();
    let ext: Vec<(f64, f64)> = (1..=9).map(|i| (6.0 * i as f64, 6.0 * i as f64)).collect();
    let anchors = AnchorSet::from_extents(&ext, 3).unwrap();
    assert_eq!(decode_all(&out.pathways, &cfg, &anchors).len(), 567);
}
