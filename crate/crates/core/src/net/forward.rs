use ndarray::{Array1, Array2, Axis, Zip};

use super::{BnMode, BnParams, Network};
use crate::error::{Error, Result};

/// Batch std below which a BN channel is treated as degenerate.
pub const MIN_BATCH_STD: f64 = 1e-12;

/// Batch statistics of one BN site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnTrace {
    /// Pre-BN activations `f`.
    pub input: Array2<f64>,
    pub mean: Array1<f64>,
    /// Population std (divides by the batch size).
    pub std: Array1<f64>,
    /// `(f - mean) / std`.
    pub whitened: Array2<f64>,
    /// `c0 * whitened + c1`.
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Linear output `x W + b`.
    pub pre_act: Array2<f64>,
    /// ReLU gating in `{0, 1}`; all ones on the top layer.
    pub gate: Array2<f64>,
    /// What the layer hands to the next one.
    pub act: Array2<f64>,
    pub bn: Option<BnTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    pub bn_mode: BnMode,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.layers.last().expect("trace has layers").act
    }

    /// Input seen by weight layer `layer`.
    pub fn layer_input(&self, layer: usize) -> &Array2<f64> {
        if layer == 0 {
            &self.input
        } else {
            &self.layers[layer - 1].act
        }
    }

    /// Pre-activation of the ReLU in `layer` (equal to `pre_act` unless BN sits in front).
    pub fn relu_input(&self, layer: usize) -> &Array2<f64> {
        let lt = &self.layers[layer];
        match (&lt.bn, self.bn_mode) {
            (Some(bn), BnMode::LinearBnRelu) => &bn.output,
            _ => &lt.pre_act,
        }
    }

    /// ReLU output of node layer `layer` (before any trailing BN). This is
    /// the node activation `f_j(x)` used by the correlation metrics.
    pub fn node_activations(&self, layer: usize) -> &Array2<f64> {
        let lt = &self.layers[layer];
        match (&lt.bn, self.bn_mode) {
            (Some(bn), BnMode::LinearReluBn) => &bn.input,
            _ => &lt.act,
        }
    }

    /// Checks `relu(z) == relu'(z) * z` on every hidden layer, exactly.
    pub fn relu_identity_holds(&self) -> bool {
        let hidden = self.layers.len().saturating_sub(1);
        (0..hidden).all(|l| {
            let z = self.relu_input(l);
            let f = self.node_activations(l);
            let g = &self.layers[l].gate;
            Zip::from(z)
                .and(f)
                .and(g)
                .all(|&z, &f, &g| (g == 0.0 || g == 1.0) && f == g * z)
        })
    }
}

fn relu(z: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let gate = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let act = z.mapv(|v| if v > 0.0 { v } else { 0.0 });
    (act, gate)
}

/// Batch-statistics normalization of every column of `f`.
pub fn bn_forward(f: &Array2<f64>, params: &BnParams) -> Result<BnTrace> {
    let n = f.nrows();
    if n < 2 {
        return Err(Error::pre(format!("batch norm needs batch size >= 2, got {n}")));
    }
    let mean = f.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = f - &mean;
    let var = centered.mapv(|x| x * x).mean_axis(Axis(0)).expect("non-empty batch");
    let std = var.mapv(f64::sqrt);
    if let Some((j, s)) = std.iter().enumerate().find(|(_, &s)| s < MIN_BATCH_STD) {
        return Err(Error::DegenerateBatch(format!("channel {j} has batch std {s:e}")));
    }
    let whitened = &centered / &std;
    let output = &whitened * &params.c0 + &params.c1;
    Ok(BnTrace {
        input: f.clone(),
        mean,
        std,
        whitened,
        output,
    })
}

/// Evaluate `net` on a `batch x in_dim` matrix, recording everything the
/// backward pass and the instruments need.
pub fn forward(net: &Network, batch: &Array2<f64>) -> Result<ForwardTrace> {
    let spec = &net.spec;
    if batch.ncols() != spec.input_dim() {
        return Err(Error::config(format!(
            "batch has {} columns, network input width is {}",
            batch.ncols(),
            spec.input_dim()
        )));
    }
    if batch.nrows() == 0 {
        return Err(Error::pre("empty batch"));
    }
    let mut layers = Vec::with_capacity(net.depth());
    let mut h = batch.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        let mut pre = h.dot(&layer.w);
        if let Some(b) = &layer.b {
            pre += b;
        }
        let trace = if spec.is_top(l) {
            LayerTrace {
                gate: Array2::ones(pre.raw_dim()),
                act: pre.clone(),
                pre_act: pre,
                bn: None,
            }
        } else {
            match (spec.bn_mode, &layer.bn) {
                (BnMode::None, _) | (_, None) => {
                    let (act, gate) = relu(&pre);
                    LayerTrace {
                        pre_act: pre,
                        gate,
                        act,
                        bn: None,
                    }
                }
                (BnMode::LinearBnRelu, Some(p)) => {
                    let bn = bn_forward(&pre, p)?;
                    let (act, gate) = relu(&bn.output);
                    LayerTrace {
                        pre_act: pre,
                        gate,
                        act,
                        bn: Some(bn),
                    }
                }
                (BnMode::LinearReluBn, Some(p)) => {
                    let (r, gate) = relu(&pre);
                    let bn = bn_forward(&r, p)?;
                    LayerTrace {
                        pre_act: pre,
                        gate,
                        act: bn.output.clone(),
                        bn: Some(bn),
                    }
                }
            }
        };
        h = trace.act.clone();
        layers.push(trace);
    }
    Ok(ForwardTrace {
        input: batch.clone(),
        bn_mode: spec.bn_mode,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, NetworkSpec};
    use ndarray::array;

    fn two_two_one() -> Network {
        // hidden: h1 = relu(x1 - x2 + 0.5), h2 = relu(2 x1 + x2 - 1)
        // out = 3 h1 - h2 + 0.25
        let spec = NetworkSpec::mlp(vec![2, 2, 1], BnMode::None, true).unwrap();
        Network::from_layers(
            spec,
            vec![
                Layer {
                    w: array![[1.0, 2.0], [-1.0, 1.0]],
                    b: Some(array![0.5, -1.0]),
                    bn: None,
                },
                Layer {
                    w: array![[3.0], [-1.0]],
                    b: Some(array![0.25]),
                    bn: None,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_everything() {
        let spec = NetworkSpec::mlp(vec![3, 4, 2], BnMode::None, false).unwrap();
        let mut rng = crate::rng::rng_for(1, "t");
        let net = Network::random(spec, false, &mut rng).unwrap();
        let tr = forward(&net, &Array2::zeros((2, 3))).unwrap();
        assert!(tr.layers[0].act.iter().all(|&v| v == 0.0));
        assert!(tr.layers[0].gate.iter().all(|&v| v == 0.0));
        assert!(tr.output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let spec = NetworkSpec::mlp(vec![2, 2], BnMode::None, false).unwrap();
        let mut net = Network::zeros(spec).unwrap();
        net.layers[0].w = Array2::eye(2);
        let x = array![[1.0, -2.0]];
        let tr = forward(&net, &x).unwrap();
        assert_eq!(tr.output(), &array![[1.0, -2.0]]);
        // the same values fed through a ReLU would gate as (1, 0)
        let (_, gate) = relu(&tr.output().clone());
        assert_eq!(gate, array![[1.0, 0.0]]);
    }

    #[test]
    fn hand_computed_two_layer() {
        let net = two_two_one();
        let x = array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
        // sample 1: h = (1.5, 1.0), out = 4.5 - 1 + 0.25 = 3.75
        // sample 2: h = (relu(-1.5), relu(1)) = (0, 1), out = -1 + 0.25 = -0.75
        // sample 3: h = (0.5, 2.0), out = 1.5 - 2 + 0.25 = -0.25
        let tr = forward(&net, &x).unwrap();
        assert_eq!(tr.layers[0].act, array![[1.5, 1.0], [0.0, 1.0], [0.5, 2.0]]);
        assert_eq!(tr.layers[0].gate, array![[1.0, 1.0], [0.0, 1.0], [1.0, 1.0]]);
        assert_eq!(tr.output(), &array![[3.75], [-0.75], [-0.25]]);
        assert!(tr.relu_identity_holds());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let net = two_two_one();
        assert!(matches!(forward(&net, &Array2::zeros((2, 3))), Err(Error::Config(_))));
    }

    #[test]
    fn bn_needs_two_samples_and_nonzero_std() {
        let spec = NetworkSpec::mlp(vec![2, 3, 1], BnMode::LinearBnRelu, true).unwrap();
        let mut rng = crate::rng::rng_for(2, "t");
        let net = Network::random(spec, false, &mut rng).unwrap();
        assert!(matches!(
            forward(&net, &array![[1.0, 2.0]]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            forward(&net, &array![[1.0, 2.0], [1.0, 2.0]]),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn bn_output_has_target_moments() {
        for mode in [BnMode::LinearBnRelu, BnMode::LinearReluBn] {
            let spec = NetworkSpec::mlp(vec![4, 6, 3], mode, true).unwrap();
            let mut rng = crate::rng::rng_for(5, "t");
            let mut net = Network::random(spec, false, &mut rng).unwrap();
            let p = net.layers[0].bn.as_mut().unwrap();
            p.c0 = array![0.5, 2.0, -1.0, 1.0, 3.0, 0.7];
            p.c1 = array![0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
            let p = p.clone();
            let x = crate::linalg::gaussian_matrix(64, 4, 1.0, &mut rng);
            let tr = forward(&net, &x).unwrap();
            let bn = tr.layers[0].bn.as_ref().unwrap();
            let m = bn.output.mean_axis(Axis(0)).unwrap();
            let s = bn.output.std_axis(Axis(0), 0.0);
            for j in 0..6 {
                assert!((m[j] - p.c1[j]).abs() < 1e-12);
                assert!((s[j] - p.c0[j].abs()).abs() < 1e-12);
            }
            assert!(tr.relu_identity_holds());
        }
    }
}
