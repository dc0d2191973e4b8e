#![allow(dead_code)]

use std::path::PathBuf;

use cnn_bench::{BenchReport, InstanceReport, LadderStep};
use cnn_engine::model::LayerTimingReport;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Reports built from fixed timings, so their rendering never changes.
pub fn fake_reports() -> Vec<BenchReport> {
    let single = BenchReport::new(
        "baseline",
        LadderStep::Baseline,
        16,
        4,
        LayerTimingReport::new([0.61, 0.09, 0.05, 0.03, 0.02, 0.004], 0.81, 16, true),
        vec![InstanceReport::new(
            0,
            vec![0, 1, 2, 3],
            true,
            16,
            &[0.8, 0.81, 0.83],
        )],
    );
    let multi = BenchReport::new(
        "fuse",
        LadderStep::Fuse,
        16,
        2,
        LayerTimingReport::new([0.5, 0.0, 0.0125, 0.03, 0.02, 0.004], 0.6, 16, true),
        vec![
            InstanceReport::new(0, vec![0, 1], true, 16, &[0.6, 0.64, 0.62]),
            InstanceReport::new(1, vec![2, 3], false, 16, &[0.625, 0.61, 0.7]),
        ],
    );
    vec![single, multi]
}
