//! Layer graph and the line-oriented model description format.
//!
//! ```text
//! # comments run to end of line
//! tiny model batch=4 seed=7
//! data   input     shape=32x32x3
//! conv1  conv      from=data out=16 k=3 stride=1 pad=1
//! bn1    batchnorm from=conv1
//! relu1  relu
//! pool1  pool      mode=max k=2 stride=2
//! fc     dense     out=10
//! ```
//!
//! Every record is `id kind key=value...`. `from` names the input layer(s)
//! (`add` takes two, comma separated) and defaults to the previous record.
//! The optional header record (`<name> model ...`) sets the default batch
//! size and the weight source (`seed=N` or `weights=PATH`).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv::ConvAlgorithm;
use crate::error::{Error, Result};
use crate::gemm::{GemmCacheParams, LoopVariant};
use crate::layers::{PoolDescriptor, PoolMode, DEFAULT_EPS};
use crate::model::fusion::FusionRole;
use crate::tensor::{ConvDescriptor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv,
    BatchNorm,
    Relu,
    Pool,
    Add,
    Dense,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::Add => "add",
            LayerKind::Dense => "dense",
        }
    }

    fn arity(self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "input" => LayerKind::Input,
            "conv" => LayerKind::Conv,
            "batchnorm" | "bn" => LayerKind::BatchNorm,
            "relu" => LayerKind::Relu,
            "pool" => LayerKind::Pool,
            "add" => LayerKind::Add,
            "dense" | "fc" => LayerKind::Dense,
            _ => return Err(Error::Config(format!("unknown layer kind `{s}`"))),
        })
    }
}

/// Per-kind layer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    Input {
        height: usize,
        width: usize,
        channels: usize,
    },
    Conv {
        out: usize,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
        ph: usize,
        pw: usize,
    },
    BatchNorm {
        eps: f32,
    },
    Relu,
    Pool(PoolDescriptor),
    Add,
    Dense {
        out: usize,
    },
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Input { .. } => LayerKind::Input,
            LayerOp::Conv { .. } => LayerKind::Conv,
            LayerOp::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::Pool(_) => LayerKind::Pool,
            LayerOp::Add => LayerKind::Add,
            LayerOp::Dense { .. } => LayerKind::Dense,
        }
    }
}

/// Per-layer algorithm and blocking choices that take precedence over the
/// engine-wide policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOverride {
    pub algo: Option<ConvAlgorithm>,
    pub params: Option<GemmCacheParams>,
    pub variant: Option<LoopVariant>,
}

impl LayerOverride {
    pub fn is_empty(&self) -> bool {
        self.algo.is_none() && self.params.is_none() && self.variant.is_none()
    }

    /// `other`'s fields win where set.
    pub fn merged(self, other: LayerOverride) -> LayerOverride {
        LayerOverride {
            algo: other.algo.or(self.algo),
            params: other.params.or(self.params),
            variant: other.variant.or(self.variant),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub op: LayerOp,
    /// Indices of the producing layers, in `from=` order.
    pub inputs: Vec<usize>,
    /// 1-based source line.
    pub line: usize,
    /// Per-item (batch 1) shape of the first input; the layer's own shape for
    /// the input layer.
    pub input_shape: Shape,
    /// Per-item (batch 1) output shape.
    pub output_shape: Shape,
    pub overrides: LayerOverride,
    pub fusion: FusionRole,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    pub fn conv_descriptor(&self) -> Option<ConvDescriptor> {
        conv_descriptor(&self.op, self.input_shape.channels)
    }
}

fn conv_descriptor(op: &LayerOp, cin: usize) -> Option<ConvDescriptor> {
    match *op {
        LayerOp::Conv {
            out,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
        } => Some(ConvDescriptor {
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            cin,
            cout: out,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSource {
    Random { seed: u64 },
    File { path: PathBuf },
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Random { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Default batch size.
    pub batch: usize,
    pub weights: WeightSource,
    /// Layers in topological order.
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn find(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        self.find(id)
            .map(|i| &self.layers[i])
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    pub fn input_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind() == LayerKind::Input)
            .expect("validated model has an input")
    }

    pub fn output_index(&self) -> usize {
        let consumers = self.consumers();
        consumers
            .iter()
            .position(|c| c.is_empty())
            .expect("validated model has an output")
    }

    /// For every layer, the indices of the layers reading its output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for &j in &l.inputs {
                out[j].push(i);
            }
        }
        out
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        self.layers[self.input_index()]
            .output_shape
            .with_batch(batch)
    }

    pub fn output_shape(&self, batch: usize) -> Shape {
        self.layers[self.output_index()]
            .output_shape
            .with_batch(batch)
    }

    /// Convolution layers with their descriptors and per-item input shapes.
    pub fn conv_layers(&self) -> Vec<(usize, ConvDescriptor, Shape)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.conv_descriptor().map(|d| (i, d, l.input_shape)))
            .collect()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

struct Record {
    id: String,
    kind: LayerKind,
    from: Vec<String>,
    keys: BTreeMap<String, String>,
    line: usize,
}

struct Keys<'a> {
    line: usize,
    map: &'a mut BTreeMap<String, String>,
}

impl Keys<'_> {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| perr(self.line, format!("bad value `{v}` for `{key}`: {e}"))),
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.take(key)?
            .ok_or_else(|| perr(self.line, format!("missing `{key}=`")))
    }

    /// `key` for both dimensions, or `key_h`/`key_w` style pairs.
    fn pair(
        &mut self,
        both: &str,
        h: &str,
        w: &str,
        default: Option<usize>,
    ) -> Result<(usize, usize)> {
        let b: Option<usize> = self.take(both)?;
        let hv: Option<usize> = self.take(h)?;
        let wv: Option<usize> = self.take(w)?;
        let pick = |v: Option<usize>, name: &str| {
            v.or(b)
                .or(default)
                .ok_or_else(|| perr(self.line, format!("missing `{both}=` or `{name}=`")))
        };
        Ok((pick(hv, h)?, pick(wv, w)?))
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(perr(self.line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    match parts.as_slice() {
        [h, w, c] => {
            let p = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
            Ok((p(h)?, p(w)?, p(c)?))
        }
        _ => Err(format!("expected HxWxC, got `{s}`")),
    }
}

fn split_record(line: usize, text: &str) -> Result<(String, String, BTreeMap<String, String>)> {
    let mut tokens = text.split_whitespace();
    let id = tokens.next().expect("non-empty line").to_string();
    let kind = tokens
        .next()
        .ok_or_else(|| perr(line, format!("record `{id}` has no kind")))?
        .to_string();
    let mut keys = BTreeMap::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| perr(line, format!("expected key=value, got `{t}`")))?;
        if keys.insert(k.to_string(), v.to_string()).is_some() {
            return Err(perr(line, format!("duplicate key `{k}`")));
        }
    }
    Ok((id, kind, keys))
}

fn parse_op(rec: &mut Record) -> Result<(LayerOp, LayerOverride)> {
    let mut k = Keys {
        line: rec.line,
        map: &mut rec.keys,
    };
    let mut ov = LayerOverride::default();
    let op = match rec.kind {
        LayerKind::Input => {
            let dims: String = k.require("shape")?;
            let (height, width, channels) = parse_dims(&dims).map_err(|e| perr(rec.line, e))?;
            LayerOp::Input {
                height,
                width,
                channels,
            }
        }
        LayerKind::Conv => {
            let out = k.require("out")?;
            let (kh, kw) = k.pair("k", "kh", "kw", None)?;
            let (sh, sw) = k.pair("stride", "sh", "sw", Some(1))?;
            let (ph, pw) = k.pair("pad", "ph", "pw", Some(0))?;
            ov.algo = k.take("algo")?;
            ov.params = k.take("params")?;
            ov.variant = k.take("variant")?;
            LayerOp::Conv {
                out,
                kh,
                kw,
                sh,
                sw,
                ph,
                pw,
            }
        }
        LayerKind::BatchNorm => LayerOp::BatchNorm {
            eps: k.take("eps")?.unwrap_or(DEFAULT_EPS),
        },
        LayerKind::Relu => LayerOp::Relu,
        LayerKind::Pool => {
            let mode: PoolMode = k.require("mode")?;
            let window: String = k.require("k")?;
            if window == "global" {
                LayerOp::Pool(PoolDescriptor::global(mode))
            } else {
                let size: usize = window
                    .parse()
                    .map_err(|e| perr(rec.line, format!("bad value `{window}` for `k`: {e}")))?;
                let stride = k.take("stride")?.unwrap_or(size);
                let pad = k.take("pad")?.unwrap_or(0);
                LayerOp::Pool(PoolDescriptor::square(mode, size, stride, pad))
            }
        }
        LayerKind::Add => LayerOp::Add,
        LayerKind::Dense => {
            ov.params = k.take("params")?;
            ov.variant = k.take("variant")?;
            LayerOp::Dense {
                out: k.require("out")?,
            }
        }
    };
    k.finish()?;
    Ok((op, ov))
}

/// Parses and validates a model description.
pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let mut name = String::from("model");
    let mut batch = 1usize;
    let mut weights = WeightSource::default();
    let mut records: Vec<Record> = Vec::new();
    let mut seen_header = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (id, kind, mut keys) = split_record(line, body)?;
        if kind == "model" {
            if seen_header || !records.is_empty() {
                return Err(perr(line, "the model header must be the first record"));
            }
            seen_header = true;
            name = id;
            let mut k = Keys {
                line,
                map: &mut keys,
            };
            batch = k.take("batch")?.unwrap_or(1);
            if batch == 0 {
                return Err(perr(line, "batch must be positive"));
            }
            let seed: Option<u64> = k.take("seed")?;
            let path: Option<String> = k.take("weights")?;
            weights = match (seed, path) {
                (Some(_), Some(_)) => {
                    return Err(perr(line, "give either seed= or weights=, not both"))
                }
                (_, Some(p)) => WeightSource::File {
                    path: PathBuf::from(p),
                },
                (s, None) => WeightSource::Random {
                    seed: s.unwrap_or(0),
                },
            };
            k.finish()?;
            continue;
        }
        let kind: LayerKind = kind.parse().map_err(|e: Error| perr(line, e.to_string()))?;
        let from = match keys.remove("from") {
            Some(v) => v.split(',').map(str::to_string).collect(),
            None if kind == LayerKind::Input => Vec::new(),
            None => match records.last() {
                Some(prev) => vec![prev.id.clone()],
                None => return Err(perr(line, format!("layer `{id}` has no input"))),
            },
        };
        if from.len() != kind.arity() {
            return Err(perr(
                line,
                format!(
                    "{kind} layer `{id}` needs {} input(s), got {}",
                    kind.arity(),
                    from.len()
                ),
            ));
        }
        if records.iter().any(|r| r.id == id) {
            return Err(perr(line, format!("duplicate layer id `{id}`")));
        }
        records.push(Record {
            id,
            kind,
            from,
            keys,
            line,
        });
    }
    if records.is_empty() {
        return Err(perr(0, "model has no layers"));
    }

    let index: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut edges: Vec<Vec<usize>> = Vec::with_capacity(records.len());
    for r in &records {
        let mut ins = Vec::new();
        for f in &r.from {
            match index.get(f.as_str()) {
                Some(&j) => ins.push(j),
                None => {
                    return Err(perr(
                        r.line,
                        format!("layer `{}` refers to undefined layer `{f}`", r.id),
                    ))
                }
            }
        }
        edges.push(ins);
    }
    let order = topological_order(&records, &edges)?;

    let inputs: Vec<&Record> = records
        .iter()
        .filter(|r| r.kind == LayerKind::Input)
        .collect();
    match inputs.as_slice() {
        [_] => {}
        [] => return Err(perr(0, "model has no input layer")),
        [_, second, ..] => {
            return Err(perr(
                second.line,
                format!("second input layer `{}`", second.id),
            ))
        }
    }

    // renumber into topological order
    let mut new_index = vec![0; records.len()];
    for (pos, &old) in order.iter().enumerate() {
        new_index[old] = pos;
    }
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(records.len());
    let mut records: Vec<Option<Record>> = records.into_iter().map(Some).collect();
    for &old in &order {
        let mut rec = records[old].take().expect("each record visited once");
        let (op, overrides) = parse_op(&mut rec)?;
        let ins: Vec<usize> = edges[old].iter().map(|&j| new_index[j]).collect();
        let (input_shape, output_shape) = propagate(&rec, &op, &ins, &layers)?;
        layers.push(LayerSpec {
            id: rec.id,
            op,
            inputs: ins,
            line: rec.line,
            input_shape,
            output_shape,
            overrides,
            fusion: FusionRole::None,
        });
    }

    let model = ModelSpec {
        name,
        batch,
        weights,
        layers,
    };
    let consumers = model.consumers();
    let outputs: Vec<usize> = (0..model.layers.len())
        .filter(|&i| consumers[i].is_empty())
        .collect();
    if outputs.len() != 1 {
        let ids: Vec<&str> = outputs
            .iter()
            .map(|&i| model.layers[i].id.as_str())
            .collect();
        let line = outputs.get(1).map_or(0, |&i| model.layers[i].line);
        return Err(perr(
            line,
            format!("model must have one output, found {}", ids.join(", ")),
        ));
    }
    Ok(model)
}

/// Stable Kahn ordering; any leftover layer sits on a cycle.
fn topological_order(records: &[Record], edges: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = records.len();
    let mut indegree: Vec<usize> = edges.iter().map(Vec::len).collect();
    let mut consumers = vec![Vec::new(); n];
    for (i, ins) in edges.iter().enumerate() {
        for &j in ins {
            consumers[j].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() < n {
        let stuck = (0..n)
            .find(|&i| indegree[i] > 0)
            .expect("some layer is left");
        return Err(perr(
            records[stuck].line,
            format!("cycle through layer `{}`", records[stuck].id),
        ));
    }
    Ok(order)
}

fn propagate(
    rec: &Record,
    op: &LayerOp,
    ins: &[usize],
    layers: &[LayerSpec],
) -> Result<(Shape, Shape)> {
    let line = rec.line;
    let wrap = |e: Error| perr(line, format!("layer `{}`: {e}", rec.id));
    let src = ins.first().map(|&i| layers[i].output_shape);
    let out = match *op {
        LayerOp::Input {
            height,
            width,
            channels,
        } => {
            let s = Shape::new(1, height, width, channels);
            s.checked_len().filter(|&l| l > 0).ok_or_else(|| {
                perr(
                    line,
                    format!("invalid input shape {height}x{width}x{channels}"),
                )
            })?;
            return Ok((s, s));
        }
        LayerOp::Conv { .. } => {
            let input = src.expect("conv has an input");
            let d = conv_descriptor(op, input.channels).expect("conv op");
            d.geometry(input).map_err(wrap)?.output_shape()
        }
        LayerOp::BatchNorm { eps } => {
            if eps.is_nan() || eps < 0.0 {
                return Err(perr(
                    line,
                    format!("layer `{}`: eps must be non-negative", rec.id),
                ));
            }
            src.expect("batchnorm has an input")
        }
        LayerOp::Relu => src.expect("relu has an input"),
        LayerOp::Pool(d) => d
            .output_shape(src.expect("pool has an input"))
            .map_err(wrap)?,
        LayerOp::Add => {
            let (a, b) = (layers[ins[0]].output_shape, layers[ins[1]].output_shape);
            if a != b {
                return Err(perr(
                    line,
                    format!(
                        "layer `{}` adds `{}` {} and `{}` {}",
                        rec.id, layers[ins[0]].id, a, layers[ins[1]].id, b
                    ),
                ));
            }
            a
        }
        LayerOp::Dense { out } => {
            if out == 0 {
                return Err(perr(
                    line,
                    format!("layer `{}`: out must be positive", rec.id),
                ));
            }
            Shape::new(1, 1, 1, out)
        }
    };
    Ok((src.expect("non-input layers have an input"), out))
}

/// Reads and parses a model file. A relative `weights=` path is resolved
/// against the file's directory.
pub fn load_model(path: &Path) -> Result<ModelSpec> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut model = parse_model(&text)?;
    if let WeightSource::File { path: w } = &mut model.weights {
        if w.is_relative() {
            if let Some(dir) = path.parent() {
                *w = dir.join(&*w);
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv() {
        let m = parse_model("x input shape=8x8x3\nc conv from=x out=4 k=3 pad=1\n").unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.count(LayerKind::Conv), 1);
        assert_eq!(m.output_shape(2), Shape::new(2, 8, 8, 4));
    }

    #[test]
    fn dangling_reference_names_the_id() {
        let err = parse_model("x input shape=8x8x3\nc conv from=nope out=4 k=1\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("`nope`"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn cycles_are_rejected() {
        let text = "x input shape=4x4x2\na add from=x,b\nb relu from=a\nout relu from=b\n";
        let err = parse_model(text).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
        let err = parse_model("x input shape=4x4x2\na relu from=a\n").unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn out_of_order_records_are_sorted() {
        let m = parse_model("y relu from=x\nx input shape=2x2x1\n").unwrap();
        assert_eq!(m.layers[0].id, "x");
        assert_eq!(m.layers[1].inputs, vec![0]);
    }

    #[test]
    fn shape_mismatch_on_add() {
        let text = "x input shape=8x8x3\nc conv from=x out=4 k=1\nd add from=x,c\n";
        assert!(matches!(
            parse_model(text),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn structural_errors() {
        assert!(parse_model("x input shape=8x8x3\ny input shape=8x8x3\nz add from=x,y\n").is_err());
        assert!(parse_model("x input shape=8x8x3\na relu from=x\nb relu from=x\n").is_err());
        assert!(parse_model("x input shape=8x8x3\na softmax\n").is_err());
        assert!(parse_model("x input shape=8x8x3\na conv out=2 k=9\n").is_err());
        assert!(parse_model("x input shape=8x8x3\na conv out=2 k=1 bogus=1\n").is_err());
        assert!(parse_model("x input shape=8x8x3\nm model batch=2\n").is_err());
    }

    #[test]
    fn header_and_overrides() {
        let text = "net model batch=3 seed=9\n\
                    x input shape=8x8x3 # the image\n\
                    c conv out=8 k=3 stride=2 pad=1 algo=convgemm params=64,256,32,8,8 variant=b2a1\n\
                    p pool mode=avg k=global\n";
        let m = parse_model(text).unwrap();
        assert_eq!((m.name.as_str(), m.batch), ("net", 3));
        assert_eq!(m.weights, WeightSource::Random { seed: 9 });
        let c = m.layer("c").unwrap();
        assert_eq!(c.overrides.algo, Some(ConvAlgorithm::ConvGemm));
        assert_eq!(c.overrides.variant, Some(LoopVariant::B2A1));
        assert_eq!(c.overrides.params.unwrap().kc, 32);
        assert_eq!(m.output_shape(1), Shape::new(1, 1, 1, 8));
    }
}
