//! Run configuration and the optimization ladder.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use cnn_engine::conv::ConvAlgorithm;
use cnn_engine::gemm::{CacheHierarchy, GemmCacheParams, KernelKind, LoopVariant, ParamTable};
use cnn_engine::model::{
    bundled, load_model, parse_model, AlgorithmPolicy, CachePolicy, EngineConfig, LayerOverride,
    ModelSpec,
};
use serde::{Deserialize, Serialize};

use crate::affinity::allowed_cpus;
use crate::{BenchError, Result};

/// One rung of the optimization ladder. Each adds one change to the previous:
/// per-layer algorithm choice, then shape-dependent blocking parameters,
/// then epilogue fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LadderStep {
    Baseline,
    ConvOpt,
    CacheOpt,
    Fuse,
}

impl LadderStep {
    pub const ALL: [LadderStep; 4] = [
        LadderStep::Baseline,
        LadderStep::ConvOpt,
        LadderStep::CacheOpt,
        LadderStep::Fuse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LadderStep::Baseline => "baseline",
            LadderStep::ConvOpt => "conv-opt",
            LadderStep::CacheOpt => "cache-opt",
            LadderStep::Fuse => "fuse",
        }
    }
}

impl fmt::Display for LadderStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LadderStep {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        LadderStep::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown ladder step `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFormat {
    Csv,
    Json,
    Table,
}

impl FromStr for OutputFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "table" => Ok(OutputFormat::Table),
            _ => Err(BenchError::Config(format!("unknown output format `{s}`"))),
        }
    }
}

/// A model file on disk or one of the bundled descriptions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSource {
    Path(PathBuf),
    Bundled(String),
}

impl ModelSource {
    /// Existing files win; otherwise a bundled name is accepted.
    pub fn from_arg(arg: &str) -> Self {
        let p = PathBuf::from(arg);
        if !p.exists() && bundled(arg).is_some() {
            ModelSource::Bundled(arg.to_string())
        } else {
            ModelSource::Path(p)
        }
    }

    pub fn load(&self) -> Result<ModelSpec> {
        Ok(match self {
            ModelSource::Path(p) => load_model(p)?,
            ModelSource::Bundled(name) => {
                let text = bundled(name).ok_or_else(|| {
                    BenchError::Config(format!("no bundled model named `{name}`"))
                })?;
                parse_model(text)?
            }
        })
    }
}

/// Parses `LAYER=ALGO`.
pub fn parse_override(s: &str) -> Result<(String, ConvAlgorithm)> {
    let (layer, algo) = s
        .split_once('=')
        .ok_or_else(|| BenchError::Config(format!("expected LAYER=ALGO, got `{s}`")))?;
    Ok((layer.to_string(), algo.parse()?))
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSource,
    /// Batch size; the model's default when unset.
    pub batch: Option<usize>,
    pub threads: usize,
    pub instances: usize,
    pub steps: Vec<LadderStep>,
    pub sweep: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub overrides: BTreeMap<String, LayerOverride>,
    /// Forces fixed blocking parameters on every step.
    pub params: Option<GemmCacheParams>,
    pub variant: Option<LoopVariant>,
    pub param_table: Option<ParamTable>,
    pub hw: CacheHierarchy,
    pub instrument: bool,
    pub kernel: KernelKind,
    pub format: OutputFormat,
    pub out: Option<PathBuf>,
    /// Seed of the random input batches.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSource::Bundled("resnet-mini".into()),
            batch: None,
            threads: 1,
            instances: 1,
            steps: vec![LadderStep::Fuse],
            sweep: Vec::new(),
            reps: 5,
            warmup: 1,
            overrides: BTreeMap::new(),
            params: None,
            variant: None,
            param_table: None,
            hw: CacheHierarchy::detect(),
            instrument: true,
            kernel: KernelKind::Auto,
            format: OutputFormat::Csv,
            out: None,
            seed: 1,
        }
    }
}

impl RunConfig {
    /// Hard errors for unusable settings; returns warnings for settings that
    /// run but oversubscribe the host.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("threads", self.threads),
            ("instances", self.instances),
            ("reps", self.reps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BenchError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.batch == Some(0) || self.sweep.contains(&0) {
            return Err(BenchError::Config("batch sizes must be positive".into()));
        }
        if self.steps.is_empty() {
            return Err(BenchError::Config("no ladder step selected".into()));
        }
        if let Some(p) = &self.params {
            p.validate()?;
        }
        let mut warnings = Vec::new();
        if let Some(p) = &self.params {
            if let Err(e) = p.check_fit(&self.hw, self.variant.unwrap_or_default()) {
                warnings.push(format!(
                    "blocking parameters do not fit this host's caches: {e}"
                ));
            }
        }
        let cores = allowed_cpus().len();
        if self.instances * self.threads > cores {
            warnings.push(format!(
                "{} instances x {} threads oversubscribe the {cores} available core(s)",
                self.instances, self.threads
            ));
        }
        Ok(warnings)
    }

    fn fixed_cache(&self) -> CachePolicy {
        CachePolicy::Fixed {
            params: self.params.unwrap_or(GemmCacheParams::BLIS_DEFAULT),
            variant: self.variant.unwrap_or(LoopVariant::A2B1),
        }
    }

    /// Engine settings of one ladder step.
    pub fn engine_config(&self, step: LadderStep) -> EngineConfig {
        let forced = self.params.is_some() || self.variant.is_some();
        let dynamic = CachePolicy::Dynamic {
            hw: self.hw,
            table: self.param_table.clone(),
        };
        let (algorithm, cache, fusion) = match step {
            LadderStep::Baseline => (AlgorithmPolicy::FullIm2col, self.fixed_cache(), false),
            LadderStep::ConvOpt => (AlgorithmPolicy::PerLayer, self.fixed_cache(), false),
            LadderStep::CacheOpt | LadderStep::Fuse => (
                AlgorithmPolicy::PerLayer,
                if forced { self.fixed_cache() } else { dynamic },
                step == LadderStep::Fuse,
            ),
        };
        EngineConfig {
            threads: self.threads,
            fusion,
            algorithm,
            cache,
            overrides: self.overrides.clone(),
            instrument: self.instrument,
            kernel: self.kernel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_adds_one_change_per_step() {
        let cfg = RunConfig::default();
        let base = cfg.engine_config(LadderStep::Baseline);
        let conv = cfg.engine_config(LadderStep::ConvOpt);
        let cache = cfg.engine_config(LadderStep::CacheOpt);
        let fuse = cfg.engine_config(LadderStep::Fuse);
        assert_eq!(base.algorithm, AlgorithmPolicy::FullIm2col);
        assert_eq!(conv.algorithm, AlgorithmPolicy::PerLayer);
        assert_eq!(base.cache, conv.cache);
        assert!(matches!(cache.cache, CachePolicy::Dynamic { .. }));
        assert!(!cache.fusion && fuse.fusion);
        assert_eq!(cache.cache, fuse.cache);
    }

    #[test]
    fn forced_params_apply_everywhere() {
        let cfg = RunConfig {
            params: Some(GemmCacheParams::new(64, 256, 64, 8, 8).unwrap()),
            ..RunConfig::default()
        };
        assert!(matches!(
            cfg.engine_config(LadderStep::Fuse).cache,
            CachePolicy::Fixed { .. }
        ));
    }

    #[test]
    fn parsing() {
        assert_eq!(
            "conv-opt".parse::<LadderStep>().unwrap(),
            LadderStep::ConvOpt
        );
        assert!("turbo".parse::<LadderStep>().is_err());
        assert_eq!(
            parse_override("s1b1_conv2=im2col").unwrap(),
            ("s1b1_conv2".to_string(), ConvAlgorithm::Im2colGemm)
        );
        assert!(parse_override("nolayer").is_err());
        assert_eq!(
            ModelSource::from_arg("resnet-mini"),
            ModelSource::Bundled("resnet-mini".into())
        );
    }

    #[test]
    fn validation() {
        assert!(RunConfig {
            instances: 0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            sweep: vec![1, 0],
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        let many = RunConfig {
            instances: 4096,
            ..RunConfig::default()
        };
        assert_eq!(many.validate().unwrap().len(), 1);
    }
}
