mod common;

use inflate3d_core::graph::{
    build, count_params, infer_shapes, init_params, nominal_input_shapes, receptive_field,
    receptive_fields, summary, temporal_footprint, ArchConfig, Family, GraphSpec, Op,
};
use proptest::prelude::*;

fn full(family: Family) -> GraphSpec {
    build(&ArchConfig::full_scale(family, 400)).unwrap()
}

#[test]
fn full_scale_parameter_counts_are_near_table_values() {
    for (family, millions) in [
        (Family::Lstm, 9.0),
        (Family::C3d, 79.0),
        (Family::TwoStream, 12.0),
        (Family::Fused3d, 39.0),
        (Family::I3d, 25.0),
    ] {
        let n = count_params(&full(family)) as f64 / 1e6;
        assert!((n - millions).abs() <= 0.2 * millions, "{family}: {n:.2}M");
    }
}

#[test]
fn classic_inception_count_with_imagenet_head() {
    // the 1000-way 2D network is about 6.6M parameters with batch norm
    let n = count_params(&full_2d(1000)) as f64 / 1e6;
    assert!((6.0..7.2).contains(&n), "{n}");
}

fn full_2d(classes: usize) -> GraphSpec {
    build(&ArchConfig::full_scale(Family::Inception2d, classes)).unwrap()
}

#[test]
fn train_and_test_footprints() {
    let expect = [
        (Family::Lstm, 5.0, 10.0),
        (Family::C3d, 0.64, 9.6),
        (Family::TwoStream, 0.4, 10.0),
        (Family::Fused3d, 2.0, 10.0),
        (Family::I3d, 2.56, 10.0),
    ];
    for (family, train, test) in expect {
        let cfg = ArchConfig::full_scale(family, 400);
        assert!((cfg.footprint() - train).abs() < 1e-9, "{family}");
        assert!((cfg.test_footprint() - test).abs() < 1e-9, "{family}");
    }
    assert_eq!(temporal_footprint(125, 1, 25.0), 5.0);
}

#[test]
fn two_stream_flow_tower_takes_twenty_channels() {
    let g = full(Family::TwoStream);
    let conv = g.node(&"flow/conv1".to_string()).unwrap();
    let Op::Conv { in_channels, .. } = conv.op else {
        panic!()
    };
    assert_eq!(in_channels, 20);
}

#[test]
fn i3d_receptive_fields_match_known_values() {
    let g = full(Family::I3d);
    let rf = |l: &str| receptive_field(&g, l).unwrap();
    assert_eq!(rf("rgb/conv1").extent, [7, 7, 7]);
    assert_eq!(rf("rgb/pool1").extent, [7, 11, 11]);
    assert_eq!(rf("rgb/pool4").extent, [67, 251, 251]);
    assert_eq!(rf("rgb/logits").extent, [107, 571, 571]);
    // the first two max pools do not pool in time
    assert_eq!(rf("rgb/conv1").stride[0], 2);
    assert_eq!(rf("rgb/pool2").stride[0], 2);
    assert_eq!(rf("rgb/pool2").stride[1], 8);
}

#[test]
fn count_params_ignores_weights_and_input_geometry() {
    let small = build(&ArchConfig::toy(Family::I3d, 7, 0.25, 8, 32)).unwrap();
    let large = build(&ArchConfig::toy(Family::I3d, 7, 0.25, 32, 64)).unwrap();
    assert_eq!(count_params(&small), count_params(&large));
    use rand::SeedableRng;
    let w = init_params(&small, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    let stored: usize = small
        .params()
        .iter()
        .filter(|p| p.role == inflate3d_core::graph::ParamRole::Trainable)
        .map(|p| w.get(&p.name).unwrap().len())
        .sum();
    assert_eq!(stored, count_params(&small));
}

#[test]
fn receptive_fields_agree_with_delta_probe_on_toy_i3d() {
    let (compared, bad) = common::checks::rf_mismatches();
    assert!(compared > 100);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn summary_ends_with_total() {
    let g = build(&ArchConfig::toy(Family::C3d, 3, 0.25, 16, 32)).unwrap();
    let s = summary(&g).unwrap();
    assert!(s
        .trim_end()
        .ends_with(&format!("total params: {}", count_params(&g))));
}

#[test]
fn json_round_trip_and_validation() {
    let g = build(&ArchConfig::toy(Family::Fused3d, 3, 0.25, 5, 32)).unwrap();
    let back = GraphSpec::from_json(&g.to_json()).unwrap();
    assert_eq!(back, g);
    let mut broken = g.clone();
    broken.nodes.swap(1, 2);
    assert!(broken.validate().is_err());
}

#[test]
fn every_toy_family_infers_shapes() {
    for family in [
        Family::Lstm,
        Family::C3d,
        Family::TwoStream,
        Family::Fused3d,
        Family::I3d,
        Family::Inception2d,
    ] {
        let frames = if family == Family::TwoStream { 1 } else { 8 };
        let g = build(&ArchConfig::toy(family, 5, 0.25, frames, 32)).unwrap();
        let shapes = infer_shapes(&g, &nominal_input_shapes(&g)).unwrap();
        assert_eq!(shapes[g.output][0], 5, "{family}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scaled_graphs_keep_their_topology(w in 0.05f64..1.0, classes in 2usize..50) {
        let a = build(&ArchConfig::toy(Family::I3d, classes, w, 8, 32)).unwrap();
        let b = build(&ArchConfig::toy(Family::I3d, classes, 1.0, 8, 32)).unwrap();
        prop_assert_eq!(a.nodes.len(), b.nodes.len());
        prop_assert!(count_params(&a) <= count_params(&b));
        let ra = receptive_fields(&a).unwrap();
        let rb = receptive_fields(&b).unwrap();
        prop_assert_eq!(ra, rb);
    }
}
