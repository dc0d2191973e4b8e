//! Benchmark reports and their CSV, JSON and table renderings.

use std::fmt::Write as _;

use cnn_engine::gemm::median;
use cnn_engine::model::{LayerTimingReport, TimedKind};
use serde::{Deserialize, Serialize};

use crate::config::{LadderStep, OutputFormat};
use crate::{BenchError, Result};

pub const CSV_HEADER: &str = "run,batch,threads,instances,kind,seconds,percent,images_per_s";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Timed repetitions behind the statistics.
    pub reps: usize,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty(), "no timed repetitions");
        let mut v = samples.to_vec();
        LatencyStats {
            median: median(&mut v),
            min: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            reps: samples.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub cpus: Vec<usize>,
    pub pinned: bool,
    /// Batch latency over the timed repetitions.
    pub latency: LatencyStats,
    /// Batch size over median latency.
    pub images_per_second: f64,
}

impl InstanceReport {
    pub fn new(
        index: usize,
        cpus: Vec<usize>,
        pinned: bool,
        batch: usize,
        samples: &[f64],
    ) -> Self {
        let latency = LatencyStats::from_samples(samples);
        InstanceReport {
            index,
            cpus,
            pinned,
            latency,
            images_per_second: batch as f64 / latency.median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub run: String,
    pub step: LadderStep,
    pub batch: usize,
    pub threads: usize,
    pub instances: usize,
    /// Per-kind breakdown of the median repetition of the first instance.
    pub timing: LayerTimingReport,
    /// Slowest median, fastest minimum and slowest maximum across instances.
    pub latency: LatencyStats,
    /// Largest median batch latency of any instance.
    pub max_latency: f64,
    /// Sum of the per-instance throughputs.
    pub images_per_second: f64,
    pub per_instance: Vec<InstanceReport>,
    /// True when every instance was pinned to its CPUs.
    pub pinned: bool,
}

impl BenchReport {
    pub fn new(
        run: impl Into<String>,
        step: LadderStep,
        batch: usize,
        threads: usize,
        timing: LayerTimingReport,
        per_instance: Vec<InstanceReport>,
    ) -> Self {
        assert!(
            !per_instance.is_empty(),
            "a report needs at least one instance"
        );
        let max_latency = per_instance
            .iter()
            .map(|i| i.latency.median)
            .fold(f64::NEG_INFINITY, f64::max);
        let latency = LatencyStats {
            median: max_latency,
            min: per_instance
                .iter()
                .map(|i| i.latency.min)
                .fold(f64::INFINITY, f64::min),
            max: per_instance
                .iter()
                .map(|i| i.latency.max)
                .fold(f64::NEG_INFINITY, f64::max),
            reps: per_instance.iter().map(|i| i.latency.reps).min().unwrap_or(0),
        };
        BenchReport {
            run: run.into(),
            step,
            batch,
            threads,
            instances: per_instance.len(),
            timing,
            latency,
            max_latency,
            images_per_second: per_instance.iter().map(|i| i.images_per_second).sum(),
            pinned: per_instance.iter().all(|i| i.pinned),
            per_instance,
        }
    }

    /// Checks the arithmetic relations between the report's fields.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let sum: f64 = self.per_instance.iter().map(|i| i.images_per_second).sum();
        if (sum - self.images_per_second).abs() > 1e-9 * sum.max(1.0) {
            return Err(format!(
                "aggregate {} != instance sum {sum}",
                self.images_per_second
            ));
        }
        if let Some(i) = self
            .per_instance
            .iter()
            .find(|i| i.latency.median > self.max_latency)
        {
            return Err(format!(
                "instance {} latency exceeds the reported maximum",
                i.index
            ));
        }
        if self.timing.instrumented && (self.timing.percent_sum() - 100.0).abs() > 0.1 {
            return Err(format!("percentages sum to {}", self.timing.percent_sum()));
        }
        if self.instances != self.per_instance.len() {
            return Err("instance count mismatch".into());
        }
        Ok(())
    }
}

/// Renders reports in a stable, machine-parsable layout.
pub fn emit_report(reports: &[BenchReport], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => Ok(to_csv(reports)),
        OutputFormat::Json => serde_json::to_string_pretty(reports)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| BenchError::Config(format!("cannot serialize report: {e}"))),
        OutputFormat::Table => Ok(to_table(reports)),
    }
}

pub fn parse_json(text: &str) -> Result<Vec<BenchReport>> {
    serde_json::from_str(text).map_err(|e| BenchError::Config(format!("bad report JSON: {e}")))
}

fn to_csv(reports: &[BenchReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let prefix = format!("{},{},{},{}", r.run, r.batch, r.threads, r.instances);
        for k in &r.timing.kinds {
            writeln!(
                s,
                "{prefix},{},{:.6},{:.2},{:.4}",
                k.kind, k.seconds, k.percent, r.images_per_second
            )
            .expect("writing to a String");
        }
        writeln!(
            s,
            "{prefix},Total,{:.6},100.00,{:.4}",
            r.timing.total_seconds, r.images_per_second
        )
        .expect("writing to a String");
    }
    s
}

fn to_table(reports: &[BenchReport]) -> String {
    let mut s = format!(
        "{:<12} {:>5} {:>7} {:>4} {:>11} {:>10}",
        "run", "batch", "threads", "inst", "latency_s", "images/s"
    );
    for k in TimedKind::ALL {
        write!(s, " {:>9}", format!("{}%", k.name())).expect("writing to a String");
    }
    s.push('\n');
    for r in reports {
        write!(
            s,
            "{:<12} {:>5} {:>7} {:>4} {:>11.6} {:>10.3}",
            r.run, r.batch, r.threads, r.instances, r.latency.median, r.images_per_second
        )
        .expect("writing to a String");
        for k in &r.timing.kinds {
            write!(s, " {:>9.2}", k.percent).expect("writing to a String");
        }
        s.push('\n');
    }
    s
}
