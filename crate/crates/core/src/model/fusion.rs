//! Conv + batchnorm + ReLU fusion planning.
//!
//! A batchnorm directly after a convolution joins the convolution's epilogue
//! when the convolution output has no other consumer. A ReLU then joins when
//! the tail of the group (the batchnorm, or the convolution itself) has no
//! other consumer. ReLUs behind residual adds stay standalone.

use serde::{Deserialize, Serialize};

use crate::model::spec::{LayerKind, ModelSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionRole {
    #[default]
    None,
    /// A convolution whose epilogue applies the listed layers.
    Head {
        bn: Option<usize>,
        relu: Option<usize>,
    },
    /// Executed inside the epilogue of convolution `head`.
    Absorbed { head: usize },
}

impl FusionRole {
    pub fn is_absorbed(&self) -> bool {
        matches!(self, FusionRole::Absorbed { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSummary {
    /// Convolutions carrying at least one fused layer.
    pub groups: usize,
    pub batchnorms: usize,
    pub relus: usize,
    pub standalone_relus: usize,
}

/// Returns `m` with fusion annotations recomputed from scratch.
pub fn plan_fusion(m: &ModelSpec) -> ModelSpec {
    let mut out = clear_fusion(m);
    let consumers = out.consumers();
    let sole = |i: usize, kind: LayerKind| match consumers[i].as_slice() {
        [c] if out.layers[*c].kind() == kind => Some(*c),
        _ => None,
    };
    let mut roles = vec![FusionRole::None; out.layers.len()];
    for (i, l) in out.layers.iter().enumerate() {
        if l.kind() != LayerKind::Conv {
            continue;
        }
        let bn = sole(i, LayerKind::BatchNorm);
        let relu = sole(bn.unwrap_or(i), LayerKind::Relu);
        if bn.is_none() && relu.is_none() {
            continue;
        }
        roles[i] = FusionRole::Head { bn, relu };
        for j in bn.into_iter().chain(relu) {
            roles[j] = FusionRole::Absorbed { head: i };
        }
    }
    for (l, r) in out.layers.iter_mut().zip(roles) {
        l.fusion = r;
    }
    out
}

/// Returns `m` with every layer executing on its own.
pub fn clear_fusion(m: &ModelSpec) -> ModelSpec {
    let mut out = m.clone();
    for l in &mut out.layers {
        l.fusion = FusionRole::None;
    }
    out
}

pub fn fusion_summary(m: &ModelSpec) -> FusionSummary {
    let mut s = FusionSummary::default();
    for l in &m.layers {
        match (l.kind(), l.fusion) {
            (LayerKind::Conv, FusionRole::Head { bn, relu }) => {
                s.groups += 1;
                s.batchnorms += usize::from(bn.is_some());
                s.relus += usize::from(relu.is_some());
            }
            (LayerKind::Relu, FusionRole::None) => s.standalone_relus += 1,
            _ => {}
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::parse_model;

    #[test]
    fn chain_becomes_one_group() {
        let m = parse_model("x input shape=8x8x3\nc conv out=4 k=3 pad=1\nb batchnorm\nr relu\n")
            .unwrap();
        let f = plan_fusion(&m);
        assert_eq!(
            f.layers[1].fusion,
            FusionRole::Head {
                bn: Some(2),
                relu: Some(3)
            }
        );
        assert!(f.layers[2].fusion.is_absorbed() && f.layers[3].fusion.is_absorbed());
        assert_eq!(plan_fusion(&f), f);
    }

    #[test]
    fn conv_relu_without_batchnorm() {
        let m = parse_model("x input shape=8x8x3\nc conv out=4 k=1\nr relu\n").unwrap();
        let f = plan_fusion(&m);
        assert_eq!(
            f.layers[1].fusion,
            FusionRole::Head {
                bn: None,
                relu: Some(2)
            }
        );
    }

    #[test]
    fn shared_batchnorm_output_blocks_relu() {
        // bn feeds both the relu and the add
        let text =
            "x input shape=8x8x4\nc conv out=4 k=1\nb batchnorm\nr relu from=b\na add from=b,r\n";
        let f = plan_fusion(&parse_model(text).unwrap());
        assert_eq!(
            f.layers[1].fusion,
            FusionRole::Head {
                bn: Some(2),
                relu: None
            }
        );
        assert_eq!(f.layers[3].fusion, FusionRole::None);
    }

    #[test]
    fn shared_conv_output_blocks_everything() {
        let text = "x input shape=8x8x4\nc conv out=4 k=1\nb batchnorm\na add from=c,b\n";
        let f = plan_fusion(&parse_model(text).unwrap());
        assert!(f.layers.iter().all(|l| l.fusion == FusionRole::None));
    }

    #[test]
    fn relu_after_add_stays_standalone() {
        let text = "x input shape=8x8x4\nc conv out=4 k=1\nb batchnorm\na add from=x,b\nr relu\n";
        let f = plan_fusion(&parse_model(text).unwrap());
        let s = fusion_summary(&f);
        assert_eq!(
            (s.groups, s.batchnorms, s.relus, s.standalone_relus),
            (1, 1, 0, 1)
        );
    }
}
