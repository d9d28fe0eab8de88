use fastsal::network::{
    build_backbone, fastsal, fold_batch_norm, group_feature_blocks, init_weights, modified_inverted_residual_graph,
    ModelConfig, Variant,
};
use fastsal::{analyzer, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_| rng.random_range(-2.0..2.0))
}

#[test]
fn tap_schedule_at_192x256() {
    let g = build_backbone(Shape::new(1, 3, 192, 256)).unwrap();
    assert_eq!(g.taps().len(), 18);
    let shapes = g.infer_shapes(&[Shape::new(1, 3, 192, 256)]).unwrap();
    let sizes: Vec<(usize, usize)> = g.taps().iter().map(|t| (shapes[t.index()].h, shapes[t.index()].w)).collect();
    let mut expect = vec![(96, 128); 2];
    expect.extend([(48, 64); 2]);
    expect.extend([(24, 32); 3]);
    expect.extend([(12, 16); 7]);
    expect.extend([(6, 8); 4]);
    assert_eq!(sizes, expect);
}

#[test]
fn final_tap_is_one_pixel_at_32x32() {
    let g = build_backbone(Shape::new(1, 3, 32, 32)).unwrap();
    let shapes = g.infer_shapes(&[Shape::new(1, 3, 32, 32)]).unwrap();
    let last = shapes[g.taps()[17].index()];
    assert_eq!((last.h, last.w), (1, 1));
}

#[test]
fn indivisible_input_is_a_config_error() {
    assert!(matches!(
        build_backbone(Shape::new(1, 3, 100, 100)),
        Err(fastsal::Error::Config(_))
    ));
    assert!(fastsal(Variant::Concat, Shape::new(1, 3, 96, 100)).is_err());
}

#[test]
fn block_channels_and_scales() {
    let g = fastsal(Variant::Concat, Shape::new(1, 3, 192, 256)).unwrap();
    let shapes = g.infer_shapes(&[Shape::new(1, 3, 192, 256)]).unwrap();
    let blocks: Vec<Shape> = g.blocks().iter().map(|b| shapes[b.index()]).collect();
    assert_eq!(
        blocks.iter().map(|s| (s.c, s.h, s.w)).collect::<Vec<_>>(),
        vec![(96, 48, 64), (96, 24, 32), (544, 12, 16), (800, 6, 8)]
    );
    assert_eq!(blocks.iter().map(|s| s.c).sum::<usize>(), 1536);
    let cat = g.find("decoder.concat").unwrap();
    assert_eq!(shapes[cat.index()].c, 1408);
    let sh = g.find("decoder.shuffle").unwrap();
    assert_eq!(shapes[sh.index()].c, 352);
}

#[test]
fn grouping_matches_graph_blocks() {
    let cfg = ModelConfig::new(Variant::Concat).with_width(0.25);
    let g = cfg.build(Shape::new(1, 3, 64, 64)).unwrap();
    let w = init_weights(&g, 3);
    let x = random_image(64, 64, 1);
    let taps = g.forward_nodes(&w, &[&x], g.taps()).unwrap();
    let grouped = group_feature_blocks(&taps).unwrap();
    let blocks = g.forward_nodes(&w, &[&x], g.blocks()).unwrap();
    for (a, b) in grouped.blocks.iter().zip(&blocks) {
        assert_eq!(a, b);
    }
    assert!(matches!(group_feature_blocks(&taps[..17]), Err(fastsal::Error::Contract(_))));
}

#[test]
fn both_variants_preserve_input_size() {
    for v in [Variant::Concat, Variant::Add] {
        let g = ModelConfig::new(v).with_width(0.25).build(Shape::new(2, 3, 64, 96)).unwrap();
        let w = init_weights(&g, 1);
        let x = Tensor::from_fn(Shape::new(2, 3, 64, 96), |[n, c, h, w]| ((n + c + h * w) % 7) as f32 / 7.0);
        let y = g.forward(&w, &[&x]).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 64, 96));
        assert!(y.is_finite());
    }
}

#[test]
fn weight_store_matches_analyzer_params() {
    for v in [Variant::Concat, Variant::Add] {
        let g = fastsal(v, Shape::new(1, 3, 192, 256)).unwrap();
        let w = init_weights(&g, 0);
        w.check(&g).unwrap();
        let stored: usize = g
            .slots()
            .iter()
            .filter(|s| s.role.is_parameter())
            .map(|s| w.get(&s.name).unwrap().numel())
            .sum();
        assert_eq!(stored, analyzer::count_params(&g));
    }
}

#[test]
fn modified_block_param_fixture() {
    let g = modified_inverted_residual_graph("m", 64, 64, true).unwrap();
    assert_eq!(analyzer::count_params(&g), 18_496);
    let expand = g.find("m.expand.conv").unwrap();
    assert_eq!(g.layer(expand).channels, 128);
}

#[test]
fn missing_slot_is_named_at_inference() {
    let g = ModelConfig::new(Variant::Concat).with_width(0.25).build(Shape::new(1, 3, 32, 32)).unwrap();
    let mut w = init_weights(&g, 0);
    w.remove("decoder.head.weight");
    let err = g.forward(&w, &[&random_image(32, 32, 0)]).unwrap_err();
    assert!(err.to_string().contains("decoder.head.weight"), "{err}");
}

#[test]
fn folding_preserves_outputs() {
    let g = ModelConfig::new(Variant::Add).with_width(0.25).build(Shape::new(1, 3, 64, 64)).unwrap();
    let mut w = init_weights(&g, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for slot in g.slots() {
        let t = w.get_mut(&slot.name).unwrap();
        match slot.role {
            fastsal::network::SlotRole::RunningMean | fastsal::network::SlotRole::Beta => {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5))
            }
            fastsal::network::SlotRole::RunningVar | fastsal::network::SlotRole::Gamma => {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5))
            }
            _ => {}
        }
    }
    let (fg, fw) = fold_batch_norm(&g, &w).unwrap();
    assert!(fg.layers().iter().all(|l| l.kind_name() != "bn"));
    assert_eq!(fg.taps().len(), 18);
    let x = random_image(64, 64, 2);
    let a = g.forward(&w, &[&x]).unwrap();
    let b = fg.forward(&fw, &[&x]).unwrap();
    let rel = a.max_abs_diff(&b) / a.max_abs().max(1e-6);
    assert!(rel <= 1e-5, "relative diff {rel}");
}

#[test]
fn execution_is_deterministic() {
    let g = ModelConfig::new(Variant::Concat).with_width(0.25).build(Shape::new(1, 3, 64, 64)).unwrap();
    let w = init_weights(&g, 1);
    let x = random_image(64, 64, 4);
    let a = g.forward(&w, &[&x]).unwrap();
    let b = g.forward(&w, &[&x]).unwrap();
    assert_eq!(a.data(), b.data());
}
