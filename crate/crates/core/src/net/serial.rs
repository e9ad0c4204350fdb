use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BnMode, BnParams, Layer, Network, NetworkSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    /// Row-major `fan_in x fan_out`.
    pub w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<Vec<f64>>,
}

/// On-disk JSON form of a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub widths: Vec<usize>,
    pub bn_mode: BnMode,
    pub layers: Vec<LayerDoc>,
}

impl From<&Network> for NetworkDoc {
    fn from(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerDoc {
                w: l.w.iter().copied().collect(),
                b: l.b.as_ref().map(|b| b.to_vec()),
                c0: l.bn.as_ref().map(|p| p.c0.to_vec()),
                c1: l.bn.as_ref().map(|p| p.c1.to_vec()),
            })
            .collect();
        NetworkDoc {
            widths: net.spec.widths.clone(),
            bn_mode: net.spec.bn_mode,
            layers,
        }
    }
}

impl NetworkDoc {
    pub fn into_network(self) -> Result<Network> {
        let depth = self.widths.len().saturating_sub(1);
        if self.layers.len() != depth {
            return Err(Error::config(format!(
                "{} layers for {} widths",
                self.layers.len(),
                self.widths.len()
            )));
        }
        let spec = NetworkSpec {
            has_bias: self.layers.iter().map(|l| l.b.is_some()).collect(),
            widths: self.widths,
            bn_mode: self.bn_mode,
        };
        spec.validate()?;
        let mut layers = Vec::with_capacity(depth);
        for (l, doc) in self.layers.into_iter().enumerate() {
            let shape = (spec.widths[l], spec.widths[l + 1]);
            let w =
                Array2::from_shape_vec(shape, doc.w).map_err(|e| Error::config(format!("layer {l} weights: {e}")))?;
            let bn = match (doc.c0, doc.c1) {
                (Some(c0), Some(c1)) => Some(BnParams {
                    c0: Array1::from(c0),
                    c1: Array1::from(c1),
                }),
                (None, None) => None,
                _ => return Err(Error::config(format!("layer {l}: c0 and c1 must come together"))),
            };
            layers.push(Layer {
                w,
                b: doc.b.map(Array1::from),
                bn,
            });
        }
        Network::from_layers(spec, layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("network document: {e}")))
    }
}

impl Network {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = NetworkDoc::from(self).to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        NetworkDoc::from_json(&text)?.into_network()
    }
}
