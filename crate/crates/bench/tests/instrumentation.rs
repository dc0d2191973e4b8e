use cnn_bench::{LadderStep, RunConfig};
use cnn_engine::gemm::median;
use cnn_engine::model::{parse_model, Engine, Weights, RESNET_MINI};
use cnn_engine::{Fill, Layout, Tensor};

/// Median end-to-end latency with and without per-layer timing, measured
/// with interleaved passes so drift hits both sides equally.
fn overhead(reps: usize) -> f64 {
    let model = parse_model(RESNET_MINI).unwrap();
    let weights = Weights::for_model(&model).unwrap();
    let build = |instrument| {
        let cfg = RunConfig {
            instrument,
            ..RunConfig::default()
        };
        Engine::new(
            &model,
            weights.clone(),
            8,
            cfg.engine_config(LadderStep::Fuse),
        )
        .unwrap()
    };
    let (mut on, mut off) = (build(true), build(false));
    let x = Tensor::new(on.input_shape(), Layout::Nhwc, Fill::Random(5)).unwrap();
    on.forward(&x).unwrap();
    off.forward(&x).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..reps {
        a.push(on.forward(&x).unwrap().1.total_seconds);
        b.push(off.forward(&x).unwrap().1.total_seconds);
    }
    median(&mut a) / median(&mut b) - 1.0
}

#[test]
fn per_layer_timing_costs_under_five_percent() {
    // a noisy host gets three tries
    let runs: Vec<f64> = (0..3).map(|_| overhead(40)).collect();
    let best = runs.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "instrumentation overhead {runs:?}");
}

#[test]
fn uninstrumented_runs_report_no_breakdown() {
    let model = parse_model(RESNET_MINI).unwrap();
    let cfg = RunConfig {
        instrument: false,
        ..RunConfig::default()
    };
    let mut e = Engine::from_model(&model, 2, cfg.engine_config(LadderStep::Fuse)).unwrap();
    let x = Tensor::new(e.input_shape(), Layout::Nhwc, Fill::Random(1)).unwrap();
    let (_, t) = e.forward(&x).unwrap();
    assert!(!t.instrumented);
    assert_eq!(t.kind_sum(), 0.0);
    assert!(t.total_seconds > 0.0);
}
