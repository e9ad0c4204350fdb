//! Fully-connected ReLU networks with optional batch normalization.
//!
//! Weight matrices are stored `fan_in x fan_out`, so column `j` of layer `l`
//! is the incoming filter `w_j` of node `j`. The top layer is linear: no
//! ReLU, no BN, gating identically one.

mod backward;
mod forward;
mod serial;
mod update;

pub use backward::{backward, bn_backward, loss, residual, BnGrad, GradientSet, LayerGrad};
pub use forward::{bn_forward, forward, BnTrace, ForwardTrace, LayerTrace, MIN_BATCH_STD};
pub use serial::NetworkDoc;
pub use update::{filter_norms, sgd_step};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;

/// Where batch normalization sits in each hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    #[default]
    None,
    /// Linear -> ReLU -> BN.
    LinearReluBn,
    /// Linear -> BN -> ReLU.
    LinearBnRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input width first, output width last.
    pub widths: Vec<usize>,
    pub bn_mode: BnMode,
    /// One entry per weight layer.
    pub has_bias: Vec<bool>,
}

impl NetworkSpec {
    /// Standard MLP layout: biases everywhere except on BN sites, where the
    /// BN shift takes their place.
    pub fn mlp(widths: Vec<usize>, bn_mode: BnMode, bias: bool) -> Result<Self> {
        let depth = widths.len().saturating_sub(1);
        let mut spec = NetworkSpec {
            widths,
            bn_mode,
            has_bias: vec![bias; depth],
        };
        for l in 0..depth {
            if spec.has_bn(l) {
                spec.has_bias[l] = false;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("network needs at least an input and an output width"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("all layer widths must be positive"));
        }
        if self.has_bias.len() != self.depth() {
            return Err(Error::config(format!(
                "has_bias has {} entries for {} weight layers",
                self.has_bias.len(),
                self.depth()
            )));
        }
        Ok(())
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn is_top(&self, layer: usize) -> bool {
        layer + 1 == self.depth()
    }

    /// Whether weight layer `layer` carries a BN site.
    pub fn has_bn(&self, layer: usize) -> bool {
        self.bn_mode != BnMode::None && layer + 1 < self.depth()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// BN scale `c0` and shift `c1`, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub c0: Array1<f64>,
    pub c1: Array1<f64>,
}

impl BnParams {
    pub fn identity(width: usize) -> Self {
        BnParams {
            c0: Array1::ones(width),
            c1: Array1::zeros(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
    pub bn: Option<BnParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

impl Network {
    /// All weights and biases zero, BN parameters at identity.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.depth())
            .map(|l| {
                let (fi, fo) = (spec.widths[l], spec.widths[l + 1]);
                Layer {
                    w: Array2::zeros((fi, fo)),
                    b: spec.has_bias[l].then(|| Array1::zeros(fo)),
                    bn: spec.has_bn(l).then(|| BnParams::identity(fo)),
                }
            })
            .collect();
        Ok(Network { spec, layers })
    }

    /// I.i.d. Gaussian weights with std `1/sqrt(fan_in)`, zero biases, BN at
    /// identity. With `unit_columns` every hidden filter is rescaled to unit norm.
    pub fn random(spec: NetworkSpec, unit_columns: bool, rng: &mut Rng) -> Result<Self> {
        let mut net = Network::zeros(spec)?;
        let depth = net.spec.depth();
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (fi, fo) = layer.w.dim();
            layer.w = linalg::gaussian_matrix(fi, fo, 1.0 / (fi as f64).sqrt(), rng);
            if unit_columns && l + 1 < depth {
                linalg::normalize_columns(&mut layer.w);
            }
        }
        Ok(net)
    }

    /// Build from explicit layers, checking every shape against `spec`.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        let net = Network { spec, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.layers.len() != self.spec.depth() {
            return Err(Error::config(format!(
                "{} layers given for depth {}",
                self.layers.len(),
                self.spec.depth()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let want = (self.spec.widths[l], self.spec.widths[l + 1]);
            if layer.w.dim() != want {
                return Err(Error::config(format!(
                    "layer {l}: weight shape {:?}, expected {:?}",
                    layer.w.dim(),
                    want
                )));
            }
            if layer.b.is_some() != self.spec.has_bias[l] {
                return Err(Error::config(format!("layer {l}: bias presence disagrees with spec")));
            }
            if let Some(b) = &layer.b {
                if b.len() != want.1 {
                    return Err(Error::config(format!("layer {l}: bias length {}", b.len())));
                }
            }
            if layer.bn.is_some() != self.spec.has_bn(l) {
                return Err(Error::config(format!("layer {l}: BN presence disagrees with spec")));
            }
            if let Some(bn) = &layer.bn {
                if bn.c0.len() != want.1 || bn.c1.len() != want.1 {
                    return Err(Error::config(format!("layer {l}: BN parameter length")));
                }
            }
            let finite = layer.w.iter().all(|x| x.is_finite())
                && layer.b.iter().flatten().all(|x| x.is_finite())
                && layer
                    .bn
                    .iter()
                    .all(|p| p.c0.iter().chain(p.c1.iter()).all(|x| x.is_finite()));
            if !finite {
                return Err(Error::Numeric(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.as_ref().map_or(0, |b| b.len()) + l.bn.as_ref().map_or(0, |p| 2 * p.c0.len()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_bad_widths() {
        assert!(NetworkSpec::mlp(vec![3], BnMode::None, true).is_err());
        assert!(NetworkSpec::mlp(vec![3, 0, 2], BnMode::None, true).is_err());
    }

    #[test]
    fn bn_sites_drop_linear_bias() {
        let s = NetworkSpec::mlp(vec![4, 5, 6, 2], BnMode::LinearBnRelu, true).unwrap();
        assert_eq!(s.has_bias, vec![false, false, true]);
        assert!(s.has_bn(0) && s.has_bn(1) && !s.has_bn(2));
        let net = Network::zeros(s).unwrap();
        assert!(net.layers[2].bn.is_none());
        assert_eq!(net.num_params(), 4 * 5 + 10 + 5 * 6 + 12 + 6 * 2 + 2);
    }

    #[test]
    fn from_layers_checks_shapes() {
        let s = NetworkSpec::mlp(vec![2, 3], BnMode::None, false).unwrap();
        let bad = Layer {
            w: Array2::zeros((3, 2)),
            b: None,
            bn: None,
        };
        assert!(matches!(Network::from_layers(s, vec![bad]), Err(Error::Config(_))));
    }
}
