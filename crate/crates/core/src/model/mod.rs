//! Network description, weights, fusion planning and the forward executor.

mod engine;
mod fusion;
mod report;
mod spec;
mod weights;

pub use engine::{AlgorithmPolicy, CachePolicy, Engine, EngineConfig, LayerPlan};
pub use fusion::{clear_fusion, fusion_summary, plan_fusion, FusionRole, FusionSummary};
pub use report::{KindTiming, LayerTimingReport, TimedKind};
pub use spec::{
    load_model, parse_model, LayerKind, LayerOp, LayerOverride, LayerSpec, ModelSpec, WeightSource,
};
pub use weights::{manifest_path, LayerWeights, Weights, INIT_BOUND};

/// Small residual network: 64×64×3 input, a strided stem, three bottleneck
/// stages and a 10-way classifier.
pub const RESNET_MINI: &str = include_str!("../../models/resnet-mini.model");

/// ResNet-50 v1.5 topology (stride on the 3×3 convolution of each
/// downsampling bottleneck), 224×224×3 input, 1000 classes.
pub const RESNET50_V15: &str = include_str!("../../models/resnet50-v15.model");

/// Source text of a bundled model by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "resnet-mini" => Some(RESNET_MINI),
        "resnet50-v15" | "resnet50" => Some(RESNET50_V15),
        _ => None,
    }
}
