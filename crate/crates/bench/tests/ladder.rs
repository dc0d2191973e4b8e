use cnn_bench::{run_ladder, run_step, LadderStep, RunConfig};

fn rel_diff(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den).sqrt()
}

#[test]
fn all_steps_compute_the_same_network() {
    let cfg = RunConfig {
        batch: Some(16),
        threads: 4,
        steps: LadderStep::ALL.to_vec(),
        reps: 2,
        ..RunConfig::default()
    };
    let out = run_ladder(&cfg).unwrap();
    assert_eq!(out.len(), 4);
    let steps: Vec<LadderStep> = out.iter().map(|o| o.report.step).collect();
    assert_eq!(steps, LadderStep::ALL);
    for o in &out {
        assert_eq!(o.output.shape().batch, 16);
        let e = rel_diff(o.output.data(), out[0].output.data());
        assert!(e <= 1e-4, "{} differs from baseline by {e:.2e}", o.report.run);
    }
}

#[test]
fn statistics_cover_only_timed_repetitions() {
    let cfg = RunConfig {
        batch: Some(2),
        reps: 5,
        warmup: 3,
        ..RunConfig::default()
    };
    let r = run_step(&cfg, LadderStep::Fuse).unwrap().report;
    let l = r.latency;
    assert_eq!(l.reps, 5);
    assert!(l.min <= l.median && l.median <= l.max);
    assert_eq!(r.timing.batch, 2);
    assert!((r.timing.percent_sum() - 100.0).abs() <= 0.1);
}

#[test]
fn single_step_ladder_gives_one_report() {
    let cfg = RunConfig {
        batch: Some(1),
        steps: vec![LadderStep::ConvOpt],
        reps: 1,
        ..RunConfig::default()
    };
    let out = run_ladder(&cfg).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].report.run, "conv-opt");
}
