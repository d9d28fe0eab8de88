use fastsal::analyzer::{analyze, count_params, CONVENTION_TAG};
use fastsal::network::GraphBuilder;
use fastsal::{ModelConfig, Shape, Variant};
use proptest::prelude::*;

#[test]
fn unit_layer_fixtures() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", 96);
    let pw = b.conv("pw", x, 128, 1, 1, 1, true);
    let dw = b.conv("dw", pw, 128, 3, 1, 128, false);
    let bn = b.batch_norm("bn", dw);
    let g = b.finish(vec![bn], vec![], vec![], None).unwrap();
    let r = analyze(&g, Shape::new(1, 96, 48, 64)).unwrap();
    let row = |n: &str| r.rows.iter().find(|c| c.name == n).unwrap();
    assert_eq!(row("pw").params, 12_416);
    assert_eq!(row("pw").flops, 75_497_472);
    assert_eq!(row("dw").params, 1152);
    assert_eq!(row("dw").flops, 2 * 128 * 9 * 48 * 64);
    assert_eq!(row("bn").params, 256);
    assert_eq!(row("bn").flops, 2 * 128 * 48 * 64);
    assert_eq!(r.total_params(), 12_416 + 1152 + 256);
    assert_eq!(r.total_params(), count_params(&g));
}

#[test]
fn csv_and_table_are_tagged_and_stable() {
    let g = ModelConfig::new(Variant::Add).with_width(0.25).graph().unwrap();
    let r = analyze(&g, Shape::new(1, 3, 64, 96)).unwrap();
    let csv = r.to_csv();
    assert!(csv.starts_with(&format!("# convention: {CONVENTION_TAG}\n")));
    assert_eq!(csv.lines().count(), r.rows.len() + 3);
    assert_eq!(csv, analyze(&g, Shape::new(1, 3, 64, 96)).unwrap().to_csv());
    assert!(r.to_string().ends_with(&format!("convention: {CONVENTION_TAG}")));
    let names: Vec<&str> = g.layers().iter().map(|l| l.name.as_str()).collect();
    let rows: Vec<&str> = r.rows.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(rows, names);
}

#[test]
fn unresolved_shapes_are_rejected() {
    let g = ModelConfig::new(Variant::Concat).graph().unwrap();
    assert!(analyze(&g, Shape::new(1, 4, 64, 64)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn flops_scale_with_area_and_params_do_not(variant in prop_oneof![Just(Variant::Concat), Just(Variant::Add)], h in 1..5usize, w in 1..5usize) {
        let g = ModelConfig::new(variant).with_width(0.5).graph().unwrap();
        let small = analyze(&g, Shape::new(1, 3, 32 * h, 32 * w)).unwrap();
        let tall = analyze(&g, Shape::new(1, 3, 64 * h, 32 * w)).unwrap();
        let ratio = tall.total_flops() as f64 / small.total_flops() as f64;
        prop_assert!((ratio - 2.0).abs() <= 1e-9, "{}", ratio);
        prop_assert_eq!(small.total_params(), tall.total_params());
        prop_assert_eq!(small.total_params(), small.rows.iter().map(|r| r.params).sum::<usize>());
    }
}
