//! Forward-pass executor.
//!
//! An [`Engine`] binds a model, its weights, a batch size and a
//! configuration. Construction resolves everything that does not depend on
//! the input values: fusion, per-layer algorithms and blocking parameters,
//! folded batchnorm coefficients, and the activation buffers. Buffers are
//! assigned by liveness and only reused between values of identical size,
//! so a forward call never allocates or resizes them.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv::{choose_algorithm, conv2d_into, ConvAlgorithm, ConvStats};
use crate::error::{Error, Result};
use crate::gemm::{
    select_cache_params_with, CacheHierarchy, GemmCacheParams, GemmConfig, KernelKind, LoopVariant,
    ParamTable,
};
use crate::layers::{
    batchnorm_inference_into, dense_into, fold_batchnorm, pool_into, relu_into, residual_add_into,
    FoldedBatchNorm, PoolDescriptor,
};
use crate::model::fusion::{clear_fusion, plan_fusion, FusionRole};
use crate::model::report::{LayerTimingReport, TimedKind};
use crate::model::spec::{LayerKind, LayerOp, LayerOverride, ModelSpec};
use crate::model::weights::Weights;
use crate::tensor::{Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlgorithmPolicy {
    /// Every convolution materializes its im2col matrix.
    FullIm2col,
    /// Each convolution uses [`choose_algorithm`].
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CachePolicy {
    /// The same strides and loop order for every GEMM.
    Fixed {
        params: GemmCacheParams,
        variant: LoopVariant,
    },
    /// Per-shape choice: a matching table record, else the heuristic.
    Dynamic {
        hw: CacheHierarchy,
        table: Option<ParamTable>,
    },
}

impl CachePolicy {
    pub fn blis_default() -> Self {
        CachePolicy::Fixed {
            params: GemmCacheParams::BLIS_DEFAULT,
            variant: LoopVariant::A2B1,
        }
    }

    pub fn resolve(&self, m: usize, n: usize, k: usize) -> (GemmCacheParams, LoopVariant) {
        match self {
            CachePolicy::Fixed { params, variant } => (*params, *variant),
            CachePolicy::Dynamic { hw, table } => {
                select_cache_params_with(m, n, k, hw, table.as_ref())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub threads: usize,
    pub fusion: bool,
    pub algorithm: AlgorithmPolicy,
    pub cache: CachePolicy,
    /// Keyed by layer id; these win over the model file's own overrides.
    pub overrides: BTreeMap<String, LayerOverride>,
    /// Time every layer; when false only the total is measured.
    pub instrument: bool,
    pub kernel: KernelKind,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            threads: 1,
            fusion: true,
            algorithm: AlgorithmPolicy::PerLayer,
            cache: CachePolicy::Dynamic {
                hw: CacheHierarchy::detect(),
                table: None,
            },
            overrides: BTreeMap::new(),
            instrument: true,
            kernel: KernelKind::Auto,
        }
    }
}

/// What the engine decided for one executed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub id: String,
    pub kind: TimedKind,
    pub algorithm: Option<ConvAlgorithm>,
    pub params: Option<GemmCacheParams>,
    pub variant: Option<LoopVariant>,
    /// Ids of layers executed inside this one's epilogue.
    pub fused: Vec<String>,
    pub output_shape: Shape,
}

#[derive(Debug, Clone)]
enum StepOp {
    Conv {
        algo: ConvAlgorithm,
        gemm: GemmConfig,
        bn: Option<usize>,
        relu: bool,
    },
    BatchNorm {
        bn: usize,
    },
    Relu,
    Pool(PoolDescriptor),
    Add,
    Dense {
        gemm: GemmConfig,
    },
}

#[derive(Debug, Clone)]
struct Step {
    layer: usize,
    op: StepOp,
    kind: TimedKind,
    inputs: Vec<usize>,
    output: usize,
}

/// An activation value: which buffer holds it and its shape.
#[derive(Debug, Clone, Copy)]
struct Value {
    slot: usize,
    shape: Shape,
}

#[derive(Debug)]
pub struct Engine {
    model: ModelSpec,
    weights: Weights,
    folded: Vec<FoldedBatchNorm>,
    batch: usize,
    config: EngineConfig,
    steps: Vec<Step>,
    values: Vec<Value>,
    input_value: usize,
    output_value: usize,
    slots: Vec<Vec<f32>>,
    plans: Vec<LayerPlan>,
    conv_stats: Vec<(usize, ConvStats)>,
}

impl Engine {
    /// Builds an engine with the weights the model file declares.
    pub fn from_model(model: &ModelSpec, batch: usize, config: EngineConfig) -> Result<Self> {
        Engine::new(model, Weights::for_model(model)?, batch, config)
    }

    pub fn new(
        model: &ModelSpec,
        weights: Weights,
        batch: usize,
        config: EngineConfig,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if config.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        weights.check(model)?;
        for (id, ov) in &config.overrides {
            let l = model.layer(id)?;
            let gemm_layer = matches!(l.kind(), LayerKind::Conv | LayerKind::Dense);
            if !gemm_layer || (ov.algo.is_some() && l.kind() != LayerKind::Conv) {
                return Err(Error::Config(format!(
                    "override for `{id}` does not apply to a {} layer",
                    l.kind()
                )));
            }
        }
        let model = if config.fusion {
            plan_fusion(model)
        } else {
            clear_fusion(model)
        };

        let mut folded = Vec::new();
        let mut bn_index = vec![usize::MAX; model.layers.len()];
        for (i, l) in model.layers.iter().enumerate() {
            if let Some(p) = weights.batchnorm(i) {
                bn_index[i] = folded.len();
                folded.push(fold_batchnorm(p)?);
            }
            debug_assert!(l.kind() != LayerKind::BatchNorm || bn_index[i] != usize::MAX);
        }

        let mut values: Vec<Value> = Vec::new();
        let mut value_of = vec![usize::MAX; model.layers.len()];
        let mut steps: Vec<Step> = Vec::new();
        let mut plans = Vec::new();
        let input_layer = model.input_index();
        values.push(Value {
            slot: usize::MAX,
            shape: model.layers[input_layer].output_shape.with_batch(batch),
        });
        value_of[input_layer] = 0;

        for (i, l) in model.layers.iter().enumerate() {
            if l.kind() == LayerKind::Input {
                continue;
            }
            if let FusionRole::Absorbed { head } = l.fusion {
                value_of[i] = value_of[head];
                continue;
            }
            let ov = l
                .overrides
                .merged(config.overrides.get(&l.id).copied().unwrap_or_default());
            let inputs: Vec<usize> = l.inputs.iter().map(|&j| value_of[j]).collect();
            let in_shape = l.input_shape.with_batch(batch);
            let mut out_shape = l.output_shape.with_batch(batch);
            let mut plan = LayerPlan {
                id: l.id.clone(),
                kind: TimedKind::of(l.kind()).expect("non-input layer"),
                algorithm: None,
                params: None,
                variant: None,
                fused: Vec::new(),
                output_shape: out_shape,
            };
            let op = match &l.op {
                LayerOp::Conv { .. } => {
                    let d = l.conv_descriptor().expect("conv layer");
                    let g = d.geometry(in_shape)?;
                    let algo = ov.algo.unwrap_or(match config.algorithm {
                        AlgorithmPolicy::FullIm2col => ConvAlgorithm::Im2colGemm,
                        AlgorithmPolicy::PerLayer => choose_algorithm(&d, in_shape),
                    });
                    let gemm = gemm_config(&config, &ov, g.m, g.n, g.k)?;
                    let (bn, relu) = match l.fusion {
                        FusionRole::Head { bn, relu } => (bn, relu),
                        _ => (None, None),
                    };
                    for j in bn.into_iter().chain(relu) {
                        plan.fused.push(model.layers[j].id.clone());
                        out_shape = model.layers[j].output_shape.with_batch(batch);
                    }
                    plan.algorithm = Some(algo);
                    plan.params = Some(gemm.params);
                    plan.variant = Some(gemm.variant);
                    StepOp::Conv {
                        algo,
                        gemm,
                        bn: bn.map(|j| bn_index[j]),
                        relu: relu.is_some(),
                    }
                }
                LayerOp::BatchNorm { .. } => StepOp::BatchNorm { bn: bn_index[i] },
                LayerOp::Relu => StepOp::Relu,
                LayerOp::Pool(d) => StepOp::Pool(*d),
                LayerOp::Add => StepOp::Add,
                LayerOp::Dense { out } => {
                    let gemm = gemm_config(&config, &ov, *out, batch, l.input_shape.item_len())?;
                    plan.params = Some(gemm.params);
                    plan.variant = Some(gemm.variant);
                    StepOp::Dense { gemm }
                }
                LayerOp::Input { .. } => unreachable!("skipped above"),
            };
            values.push(Value {
                slot: usize::MAX,
                shape: out_shape,
            });
            value_of[i] = values.len() - 1;
            steps.push(Step {
                layer: i,
                op,
                kind: plan.kind,
                inputs,
                output: values.len() - 1,
            });
            plans.push(plan);
        }
        let output_value = value_of[model.output_index()];
        let slots = assign_slots(&steps, &mut values, output_value)?;

        Ok(Engine {
            model,
            weights,
            folded,
            batch,
            config,
            steps,
            values,
            input_value: 0,
            output_value,
            slots,
            plans,
            conv_stats: Vec::new(),
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn input_shape(&self) -> Shape {
        self.values[self.input_value].shape
    }

    pub fn output_shape(&self) -> Shape {
        self.values[self.output_value].shape
    }

    pub fn plans(&self) -> &[LayerPlan] {
        &self.plans
    }

    /// Bytes held by the preallocated activation buffers.
    pub fn activation_bytes(&self) -> usize {
        self.slots.iter().map(|s| s.len() * 4).sum()
    }

    /// Counters of every convolution in the last forward call, by layer index.
    pub fn conv_stats(&self) -> &[(usize, ConvStats)] {
        &self.conv_stats
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, LayerTimingReport)> {
        if x.shape() != self.input_shape() || x.layout() != Layout::Nhwc {
            return Err(Error::DimensionMismatch(format!(
                "engine expects NHWC input {}, got {}",
                self.input_shape(),
                x.shape()
            )));
        }
        let start = Instant::now();
        let mut seconds = [0.0f64; 6];
        self.slots[self.values[self.input_value].slot].copy_from_slice(x.data());
        self.conv_stats.clear();
        for s in 0..self.steps.len() {
            let step = &self.steps[s];
            let mut ins: Vec<(usize, Tensor)> = Vec::with_capacity(step.inputs.len());
            for &v in &step.inputs {
                let slot = self.values[v].slot;
                if ins.iter().all(|(sl, _)| *sl != slot) {
                    let data = std::mem::take(&mut self.slots[slot]);
                    ins.push((
                        slot,
                        Tensor::from_vec(self.values[v].shape, Layout::Nhwc, data)?,
                    ));
                }
            }
            let out_value = self.values[step.output];
            let data = std::mem::take(&mut self.slots[out_value.slot]);
            let mut out = Tensor::from_vec(out_value.shape, Layout::Nhwc, data)?;
            let arg = |k: usize| {
                let slot = self.values[step.inputs[k]].slot;
                &ins.iter()
                    .find(|(sl, _)| *sl == slot)
                    .expect("taken above")
                    .1
            };

            let t0 = self.config.instrument.then(Instant::now);
            let threads = self.config.threads;
            let result = match &step.op {
                StepOp::Conv {
                    algo,
                    gemm,
                    bn,
                    relu,
                } => {
                    let filter = self
                        .weights
                        .conv_filter(step.layer)
                        .expect("checked weights");
                    let d = self.model.layers[step.layer]
                        .conv_descriptor()
                        .expect("conv layer");
                    let ep = match (bn, relu) {
                        (Some(b), r) => self.folded[*b].epilogue(*r),
                        (None, true) => crate::gemm::Epilogue::Relu,
                        (None, false) => crate::gemm::Epilogue::None,
                    };
                    conv2d_into(*algo, arg(0), filter, &d, gemm, &ep, &mut out)
                        .map(|st| self.conv_stats.push((step.layer, st)))
                }
                StepOp::BatchNorm { bn } => {
                    batchnorm_inference_into(arg(0), &self.folded[*bn], false, threads, &mut out)
                }
                StepOp::Relu => relu_into(arg(0), threads, &mut out),
                StepOp::Pool(d) => pool_into(arg(0), d, threads, &mut out),
                StepOp::Add => residual_add_into(arg(0), arg(1), threads, &mut out),
                StepOp::Dense { gemm } => {
                    let (w, bias) = self.weights.dense(step.layer).expect("checked weights");
                    dense_into(arg(0), w, bias, gemm, &mut out).map(|_| ())
                }
            };
            if let Some(t0) = t0 {
                seconds[step.kind.index()] += t0.elapsed().as_secs_f64();
            }

            self.slots[out_value.slot] = out.into_vec();
            for (slot, t) in ins {
                self.slots[slot] = t.into_vec();
            }
            result.map_err(|e| match e {
                Error::Allocation { .. } => e,
                e => Error::Config(format!("layer `{}`: {e}", self.model.layers[step.layer].id)),
            })?;
        }
        let v = self.values[self.output_value];
        let y = Tensor::from_vec(v.shape, Layout::Nhwc, self.slots[v.slot].clone())?;
        let total = start.elapsed().as_secs_f64();
        Ok((
            y,
            LayerTimingReport::new(seconds, total, self.batch, self.config.instrument),
        ))
    }
}

fn gemm_config(
    config: &EngineConfig,
    ov: &LayerOverride,
    m: usize,
    n: usize,
    k: usize,
) -> Result<GemmConfig> {
    let (params, variant) = config.cache.resolve(m, n, k);
    let params = ov.params.unwrap_or(params);
    params.validate()?;
    Ok(GemmConfig {
        params,
        variant: ov.variant.unwrap_or(variant),
        threads: config.threads,
        kernel: config.kernel,
    })
}

/// Gives every value a buffer. A buffer is handed to a new value once its
/// previous value is dead, and only when the lengths match exactly.
fn assign_slots(
    steps: &[Step],
    values: &mut [Value],
    output_value: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut last_use = vec![0usize; values.len()];
    for (s, step) in steps.iter().enumerate() {
        for &v in &step.inputs {
            last_use[v] = s;
        }
    }
    let mut lens: Vec<usize> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    let take = |len: usize, free: &mut Vec<usize>, lens: &mut Vec<usize>| {
        if let Some(pos) = free.iter().position(|&sl| lens[sl] == len) {
            free.swap_remove(pos)
        } else {
            lens.push(len);
            lens.len() - 1
        }
    };
    values[0].slot = take(values[0].shape.len(), &mut free, &mut lens);
    for (s, step) in steps.iter().enumerate() {
        let v = step.output;
        values[v].slot = take(values[v].shape.len(), &mut free, &mut lens);
        let mut released: Vec<usize> = step
            .inputs
            .iter()
            .copied()
            .filter(|&u| last_use[u] == s && u != output_value)
            .collect();
        released.sort_unstable();
        released.dedup();
        free.extend(released.into_iter().map(|u| values[u].slot));
    }
    lens.into_iter()
        .map(|len| {
            let mut buf = Vec::new();
            buf.try_reserve_exact(len).map_err(|_| Error::Allocation {
                what: "activation buffer",
                bytes: len * 4,
            })?;
            buf.resize(len, 0.0);
            Ok(buf)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::parse_model;
    use crate::model::weights::LayerWeights;
    use crate::tensor::Fill;

    fn fixed() -> EngineConfig {
        EngineConfig {
            cache: CachePolicy::blis_default(),
            ..EngineConfig::default()
        }
    }

    #[test]
    fn identity_pointwise_model() {
        let m = parse_model("x input shape=5x5x4\nc conv out=4 k=1\n").unwrap();
        let mut w = Weights::random(&m, 0).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let filter = Tensor::from_vec(Shape::new(4, 1, 1, 4), Layout::Nhwc, eye).unwrap();
        w.set(&m, 1, LayerWeights::Conv { filter }).unwrap();
        let mut e = Engine::new(&m, w, 3, fixed()).unwrap();
        let x = Tensor::new(Shape::new(3, 5, 5, 4), Layout::Nhwc, Fill::Random(2)).unwrap();
        let (y, r) = e.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
        assert!((r.percent_sum() - 100.0).abs() < 0.1);
    }

    #[test]
    fn unknown_override_is_rejected() {
        let m = parse_model("x input shape=5x5x4\nc conv out=4 k=1\n").unwrap();
        let mut cfg = fixed();
        cfg.overrides
            .insert("nope".into(), LayerOverride::default());
        assert!(matches!(
            Engine::from_model(&m, 1, cfg),
            Err(Error::UnknownLayer(id)) if id == "nope"
        ));
    }

    #[test]
    fn buffers_are_reused_by_liveness() {
        let text = "x input shape=8x8x4\na relu\nb relu\nc relu\nd relu\n";
        let m = parse_model(text).unwrap();
        let e = Engine::from_model(&m, 1, fixed()).unwrap();
        // a chain needs only two equally sized buffers
        assert_eq!(e.slots.len(), 2);
        let x = Tensor::new(Shape::new(1, 8, 8, 4), Layout::Nhwc, Fill::Random(1)).unwrap();
        let mut e = e;
        let (y, _) = e.forward(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, a.max(0.0));
        }
    }

    #[test]
    fn fused_and_plain_agree_bitwise() {
        let text = "x input shape=9x9x3\nc conv out=8 k=3 pad=1\nb batchnorm\nr relu\nd conv out=5 k=1\ne batchnorm\n";
        let m = parse_model(text).unwrap();
        let x = Tensor::new(Shape::new(2, 9, 9, 3), Layout::Nhwc, Fill::Random(4)).unwrap();
        let mut on = Engine::from_model(&m, 2, fixed()).unwrap();
        let mut off = Engine::from_model(
            &m,
            2,
            EngineConfig {
                fusion: false,
                ..fixed()
            },
        )
        .unwrap();
        assert_eq!(on.plans().len(), 2);
        assert_eq!(off.plans().len(), 5);
        let (a, _) = on.forward(&x).unwrap();
        let (b, _) = off.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn wrong_input_shape() {
        let m = parse_model("x input shape=5x5x4\nc conv out=4 k=1\n").unwrap();
        let mut e = Engine::from_model(&m, 2, fixed()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 5, 5, 4)).unwrap();
        assert!(e.forward(&x).is_err());
    }
}
