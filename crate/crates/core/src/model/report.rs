//! Per-layer-kind timing of a forward pass.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::spec::LayerKind;

/// Reporting bucket. Fused batchnorm and ReLU work is charged to `Conv2D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimedKind {
    Conv2D,
    BatchNorm,
    ReLU,
    Pooling,
    Add,
    Dense,
}

impl TimedKind {
    pub const ALL: [TimedKind; 6] = [
        TimedKind::Conv2D,
        TimedKind::BatchNorm,
        TimedKind::ReLU,
        TimedKind::Pooling,
        TimedKind::Add,
        TimedKind::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TimedKind::Conv2D => "Conv2D",
            TimedKind::BatchNorm => "BatchNorm",
            TimedKind::ReLU => "ReLU",
            TimedKind::Pooling => "Pooling",
            TimedKind::Add => "Add",
            TimedKind::Dense => "Dense",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn of(kind: LayerKind) -> Option<TimedKind> {
        match kind {
            LayerKind::Input => None,
            LayerKind::Conv => Some(TimedKind::Conv2D),
            LayerKind::BatchNorm => Some(TimedKind::BatchNorm),
            LayerKind::Relu => Some(TimedKind::ReLU),
            LayerKind::Pool => Some(TimedKind::Pooling),
            LayerKind::Add => Some(TimedKind::Add),
            LayerKind::Dense => Some(TimedKind::Dense),
        }
    }
}

impl fmt::Display for TimedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindTiming {
    pub kind: TimedKind,
    pub seconds: f64,
    /// Share of the summed per-kind time.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTimingReport {
    /// One entry per [`TimedKind`], in [`TimedKind::ALL`] order.
    pub kinds: Vec<KindTiming>,
    /// Wall-clock time of the whole forward call.
    pub total_seconds: f64,
    pub batch: usize,
    pub images_per_second: f64,
    /// False when per-layer timing was disabled; the kind rows are then zero.
    pub instrumented: bool,
}

impl LayerTimingReport {
    pub fn new(seconds: [f64; 6], total_seconds: f64, batch: usize, instrumented: bool) -> Self {
        let sum: f64 = seconds.iter().sum();
        let kinds = TimedKind::ALL
            .iter()
            .map(|&kind| {
                let s = seconds[kind.index()];
                KindTiming {
                    kind,
                    seconds: s,
                    percent: if sum > 0.0 { s / sum * 100.0 } else { 0.0 },
                }
            })
            .collect();
        LayerTimingReport {
            kinds,
            total_seconds,
            batch,
            images_per_second: if total_seconds > 0.0 {
                batch as f64 / total_seconds
            } else {
                0.0
            },
            instrumented,
        }
    }

    pub fn seconds(&self, kind: TimedKind) -> f64 {
        self.kinds[kind.index()].seconds
    }

    pub fn percent(&self, kind: TimedKind) -> f64 {
        self.kinds[kind.index()].percent
    }

    pub fn kind_sum(&self) -> f64 {
        self.kinds.iter().map(|k| k.seconds).sum()
    }

    pub fn percent_sum(&self) -> f64 {
        self.kinds.iter().map(|k| k.percent).sum()
    }

    /// `kind,seconds,percent` rows followed by a `Total` row carrying the
    /// wall-clock time.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,seconds,percent\n");
        for k in &self.kinds {
            s.push_str(&format!("{},{:.6},{:.2}\n", k.kind, k.seconds, k.percent));
        }
        s.push_str(&format!("Total,{:.6},100.00\n", self.total_seconds));
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Io(e.to_string()))
    }
}
