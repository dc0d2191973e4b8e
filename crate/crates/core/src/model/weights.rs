//! Layer parameters: seeded random initialization and the on-disk format.
//!
//! A weight file is a raw blob of little-endian `f32` values plus a sidecar
//! manifest (`<blob>.manifest`) with one `layer tensor offset length` record
//! per tensor, offsets and lengths counted in elements. Tensor names are
//! `filter` for convolutions, `gamma beta mean var` for batchnorm and
//! `weight bias` for dense layers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::BatchNormParams;
use crate::model::spec::{LayerOp, LayerSpec, ModelSpec, WeightSource};
use crate::tensor::{Layout, Shape, Tensor};

/// Bound of the uniform random initialization.
pub const INIT_BOUND: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Conv { filter: Tensor },
    BatchNorm { params: BatchNormParams },
    Dense { weight: Tensor, bias: Vec<f32> },
}

impl LayerWeights {
    fn tensors(&self) -> Vec<(&'static str, &[f32])> {
        match self {
            LayerWeights::Conv { filter } => vec![("filter", filter.data())],
            LayerWeights::BatchNorm { params } => vec![
                ("gamma", &params.gamma[..]),
                ("beta", &params.beta[..]),
                ("mean", &params.running_mean[..]),
                ("var", &params.running_var[..]),
            ],
            LayerWeights::Dense { weight, bias } => {
                vec![("weight", weight.data()), ("bias", &bias[..])]
            }
        }
    }
}

/// Tensor names and lengths a layer needs, or nothing for parameter-free
/// layers.
fn layout_of(l: &LayerSpec) -> Vec<(&'static str, usize)> {
    match l.op {
        LayerOp::Conv { .. } => {
            let d = l.conv_descriptor().expect("conv layer");
            vec![("filter", d.filter_shape().len())]
        }
        LayerOp::BatchNorm { .. } => {
            let c = l.output_shape.channels;
            vec![("gamma", c), ("beta", c), ("mean", c), ("var", c)]
        }
        LayerOp::Dense { out } => vec![("weight", out * l.input_shape.item_len()), ("bias", out)],
        _ => Vec::new(),
    }
}

fn build(
    l: &LayerSpec,
    mut next: impl FnMut(&'static str, usize) -> Result<Vec<f32>>,
) -> Result<Option<LayerWeights>> {
    Ok(match l.op {
        LayerOp::Conv { .. } => {
            let d = l.conv_descriptor().expect("conv layer");
            let data = next("filter", d.filter_shape().len())?;
            Some(LayerWeights::Conv {
                filter: Tensor::from_vec(d.filter_shape(), Layout::Nhwc, data)?,
            })
        }
        LayerOp::BatchNorm { eps } => {
            let c = l.output_shape.channels;
            let params = BatchNormParams {
                gamma: next("gamma", c)?,
                beta: next("beta", c)?,
                running_mean: next("mean", c)?,
                running_var: next("var", c)?,
                eps,
            };
            params
                .validate()
                .map_err(|e| Error::Parameter(format!("layer `{}`: {e}", l.id)))?;
            Some(LayerWeights::BatchNorm { params })
        }
        LayerOp::Dense { out } => {
            let fin = l.input_shape.item_len();
            let weight = next("weight", out * fin)?;
            Some(LayerWeights::Dense {
                weight: Tensor::from_vec(Shape::new(out, 1, 1, fin), Layout::Nhwc, weight)?,
                bias: next("bias", out)?,
            })
        }
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    layers: Vec<Option<LayerWeights>>,
}

impl Weights {
    /// Uniform values in `[-0.1, 0.1]` from a ChaCha8 stream, layer by layer
    /// in model order. Batchnorm statistics are centred on an identity
    /// transform: `gamma` and `var` are `1 + u`, `beta` and `mean` are `u`.
    pub fn random(m: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-INIT_BOUND, INIT_BOUND);
        let layers = m
            .layers
            .iter()
            .map(|l| {
                build(l, |name, len| {
                    let offset = if matches!(name, "gamma" | "var") {
                        1.0
                    } else {
                        0.0
                    };
                    Ok((0..len).map(|_| offset + dist.sample(&mut rng)).collect())
                })
            })
            .collect::<Result<_>>()?;
        Ok(Weights { layers })
    }

    /// Weights according to the model's declared source.
    pub fn for_model(m: &ModelSpec) -> Result<Self> {
        match &m.weights {
            WeightSource::Random { seed } => Weights::random(m, *seed),
            WeightSource::File { path } => Weights::load(m, path),
        }
    }

    pub fn get(&self, layer: usize) -> Option<&LayerWeights> {
        self.layers.get(layer).and_then(Option::as_ref)
    }

    /// Replaces one layer's parameters, checking they fit the model.
    pub fn set(&mut self, m: &ModelSpec, layer: usize, w: LayerWeights) -> Result<()> {
        let l = m
            .layers
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(format!("#{layer}")))?;
        let want = layout_of(l);
        let got: Vec<(&str, usize)> = w.tensors().iter().map(|(n, d)| (*n, d.len())).collect();
        if want != got {
            return Err(Error::Parameter(format!(
                "layer `{}` expects {want:?}, got {got:?}",
                l.id
            )));
        }
        if let LayerWeights::BatchNorm { params } = &w {
            params.validate()?;
        }
        self.layers[layer] = Some(w);
        Ok(())
    }

    pub fn conv_filter(&self, layer: usize) -> Option<&Tensor> {
        match self.get(layer) {
            Some(LayerWeights::Conv { filter }) => Some(filter),
            _ => None,
        }
    }

    pub fn batchnorm(&self, layer: usize) -> Option<&BatchNormParams> {
        match self.get(layer) {
            Some(LayerWeights::BatchNorm { params }) => Some(params),
            _ => None,
        }
    }

    pub fn dense(&self, layer: usize) -> Option<(&Tensor, &[f32])> {
        match self.get(layer) {
            Some(LayerWeights::Dense { weight, bias }) => Some((weight, bias)),
            _ => None,
        }
    }

    /// Checks that every parameterized layer of `m` has weights of the right
    /// size.
    pub fn check(&self, m: &ModelSpec) -> Result<()> {
        if self.layers.len() != m.layers.len() {
            return Err(Error::Parameter(format!(
                "weights cover {} layers, model has {}",
                self.layers.len(),
                m.layers.len()
            )));
        }
        for (l, w) in m.layers.iter().zip(&self.layers) {
            let want = layout_of(l);
            let got: Vec<(&str, usize)> = w
                .as_ref()
                .map(|w| w.tensors().iter().map(|(n, d)| (*n, d.len())).collect())
                .unwrap_or_default();
            if want != got {
                return Err(Error::Parameter(format!(
                    "layer `{}` expects {want:?}, got {got:?}",
                    l.id
                )));
            }
        }
        Ok(())
    }

    /// Writes the blob and its manifest.
    pub fn save(&self, m: &ModelSpec, blob: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut manifest = String::from("# layer tensor offset length\n");
        let mut offset = 0;
        for (l, w) in m.layers.iter().zip(&self.layers) {
            let Some(w) = w else { continue };
            for (name, data) in w.tensors() {
                writeln!(manifest, "{} {name} {offset} {}", l.id, data.len())
                    .expect("writing to a String");
                bytes.extend(data.iter().flat_map(|v| v.to_le_bytes()));
                offset += data.len();
            }
        }
        std::fs::write(blob, bytes).map_err(|e| Error::Io(format!("{}: {e}", blob.display())))?;
        let mp = manifest_path(blob);
        std::fs::write(&mp, manifest).map_err(|e| Error::Io(format!("{}: {e}", mp.display())))?;
        Ok(())
    }

    pub fn load(m: &ModelSpec, blob: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(blob).map_err(|e| Error::Io(format!("{}: {e}", blob.display())))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Parameter(format!(
                "{}: {} bytes is not a whole number of f32 values",
                blob.display(),
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mp = manifest_path(blob);
        let text = std::fs::read_to_string(&mp)
            .map_err(|e| Error::Io(format!("{}: {e}", mp.display())))?;
        let entries = parse_manifest(&text)?;
        for (id, _) in entries.keys() {
            if m.find(id).is_none() {
                return Err(Error::UnknownLayer(id.clone()));
            }
        }
        let layers = m
            .layers
            .iter()
            .map(|l| {
                build(l, |name, len| {
                    let &(off, n) =
                        entries
                            .get(&(l.id.clone(), name.to_string()))
                            .ok_or_else(|| {
                                Error::Parameter(format!("no `{name}` tensor for layer `{}`", l.id))
                            })?;
                    if n != len {
                        return Err(Error::Parameter(format!(
                            "layer `{}` tensor `{name}` has {n} values, expected {len}",
                            l.id
                        )));
                    }
                    values
                        .get(off..off + n)
                        .map(<[f32]>::to_vec)
                        .ok_or_else(|| {
                            Error::Parameter(format!(
                                "layer `{}` tensor `{name}` lies outside the blob",
                                l.id
                            ))
                        })
                })
            })
            .collect::<Result<_>>()?;
        Ok(Weights { layers })
    }
}

pub fn manifest_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn parse_manifest(text: &str) -> Result<HashMap<(String, String), (usize, usize)>> {
    let mut out = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let f: Vec<&str> = body.split_whitespace().collect();
        let [id, name, off, len] = f.as_slice() else {
            return Err(Error::Parse {
                line,
                message: format!("expected `layer tensor offset length`, got `{body}`"),
            });
        };
        let num = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad number `{s}`: {e}"),
            })
        };
        let key = (id.to_string(), name.to_string());
        if out.insert(key, (num(off)?, num(len)?)).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate entry for {id} {name}"),
            });
        }
    }
    Ok(out)
}
