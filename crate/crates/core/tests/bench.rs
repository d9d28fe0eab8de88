use fastsal::bench::{benchmark, BenchConfig, BenchReport, BENCH_CSV_HEADER};
use fastsal::network::init_weights;
use fastsal::{Error, ModelConfig, Shape, Variant};
use proptest::prelude::*;

#[test]
fn fps_is_the_reciprocal_of_mean_latency() {
    let r = BenchReport::from_latencies("stub", &[20.0; 7], 3, 2, true).unwrap();
    assert_eq!(r.fps, 50.0);
    assert_eq!((r.iterations, r.warmup, r.threads), (7, 3, 2));
    let r = BenchReport::from_latencies("stub", &[10.0, 30.0], 0, 1, false).unwrap();
    assert_eq!(r.mean_ms, 20.0);
    assert_eq!(r.fps, 50.0);
    assert!(r.p95_ms >= r.median_ms);
}

#[test]
fn empty_runs_are_rejected() {
    assert!(matches!(BenchReport::from_latencies("x", &[], 0, 1, true), Err(Error::Config(_))));
    let shape = Shape::new(1, 3, 32, 32);
    let g = ModelConfig::new(Variant::Concat).with_width(0.25).build(shape).unwrap();
    let w = init_weights(&g, 0);
    let cfg = BenchConfig {
        iterations: 0,
        ..BenchConfig::default()
    };
    assert!(matches!(benchmark("x", &g, &w, shape, &cfg), Err(Error::Config(_))));
}

#[test]
fn deterministic_runs_repeat_bit_for_bit() {
    let shape = Shape::new(1, 3, 64, 64);
    let g = ModelConfig::new(Variant::Add).with_width(0.25).build(shape).unwrap();
    let w = init_weights(&g, 4);
    let run = |threads| {
        let cfg = BenchConfig {
            iterations: 2,
            warmup: 1,
            threads,
            ..BenchConfig::default()
        };
        benchmark("a", &g, &w, shape, &cfg).unwrap()
    };
    let (r1, y1) = run(1);
    let (_, y2) = run(1);
    let (_, y3) = run(3);
    assert_eq!(r1.iterations, 2);
    assert!(r1.fps.is_finite() && r1.fps > 0.0);
    let bits = |t: &fastsal::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&y1), bits(&y2));
    assert_eq!(bits(&y1), bits(&y3));
}

proptest! {
    #[test]
    fn csv_rows_round_trip(lat in prop::collection::vec(0.001..1e4f64, 1..40), warmup in 0..50usize, threads in 1..64usize, det in any::<bool>(), label in "[a-zA-Z0-9_-]{1,12}") {
        let r = BenchReport::from_latencies(&label, &lat, warmup, threads, det).unwrap();
        let row = r.to_csv_row();
        prop_assert_eq!(row.split(',').count(), BENCH_CSV_HEADER.split(',').count());
        prop_assert_eq!(BenchReport::from_csv_row(&row).unwrap(), r);
    }
}
