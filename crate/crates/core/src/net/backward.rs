use ndarray::{Array1, Array2, Axis};

use super::forward::{BnTrace, ForwardTrace, MIN_BATCH_STD};
use super::{BnMode, Network};
use crate::error::{Error, Result};

/// Gradients of the BN shift and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BnGrad {
    pub c0: Array1<f64>,
    pub c1: Array1<f64>,
}

/// Per-layer gradients. Every entry is the *negative* gradient of the
/// batch-mean loss, i.e. the descent direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Per-sample gradient at the linear output of each node, `batch x width`.
    pub node: Array2<f64>,
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
    pub bn: Option<BnGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

/// Top-layer residual `teacher_out - student_out`.
pub fn residual(trace: &ForwardTrace, teacher_out: &Array2<f64>) -> Result<Array2<f64>> {
    let out = trace.output();
    if out.dim() != teacher_out.dim() {
        return Err(Error::pre(format!(
            "teacher output shape {:?} does not match student output {:?}",
            teacher_out.dim(),
            out.dim()
        )));
    }
    Ok(teacher_out - out)
}

/// `0.5 * mean_x ||f_student(x) - f_teacher(x)||^2`.
pub fn loss(trace: &ForwardTrace, teacher_out: &Array2<f64>) -> Result<f64> {
    let r = residual(trace, teacher_out)?;
    Ok(0.5 * r.mapv(|v| v * v).sum() / r.nrows() as f64)
}

/// Backpropagate through one BN site.
///
/// `g_out` holds per-sample negative gradients at the BN output. Returns the
/// gradient at the BN input, `(c0 / std) * P g_out` with `P` the projection
/// onto the complement of `span{f, 1}`, plus the shift and scale gradients
/// of the batch-mean loss.
pub fn bn_backward(
    g_out: &Array2<f64>,
    site: &BnTrace,
    c0: &Array1<f64>,
) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    if g_out.dim() != site.whitened.dim() || c0.len() != site.std.len() {
        return Err(Error::pre("BN gradient shape does not match the traced site"));
    }
    if let Some((j, s)) = site.std.iter().enumerate().find(|(_, &s)| s < MIN_BATCH_STD) {
        return Err(Error::DegenerateBatch(format!("channel {j} has batch std {s:e}")));
    }
    let ft = &site.whitened;
    let g_mean = g_out.mean_axis(Axis(0)).expect("non-empty");
    let gf_mean = (g_out * ft).mean_axis(Axis(0)).expect("non-empty");
    // whitened columns have zero mean and unit second moment, so removing
    // these two components is exactly the orthogonal projection.
    let projected = g_out - &g_mean - &(ft * &gf_mean);
    let g_in = projected * &(c0 / &site.std);
    Ok((g_in, gf_mean, g_mean))
}

/// Backpropagate the squared loss against `teacher_out` through `net`.
pub fn backward(net: &Network, trace: &ForwardTrace, teacher_out: &Array2<f64>) -> Result<GradientSet> {
    if trace.layers.len() != net.depth() {
        return Err(Error::pre("trace depth does not match network"));
    }
    for (l, lt) in trace.layers.iter().enumerate() {
        if lt.pre_act.ncols() != net.spec.widths[l + 1] {
            return Err(Error::pre(format!("trace layer {l} width does not match network")));
        }
    }
    let batch = trace.batch_size() as f64;
    // negative gradient at the output of the current layer
    let mut g_act = residual(trace, teacher_out)?;
    let mut out: Vec<LayerGrad> = Vec::with_capacity(net.depth());
    for l in (0..net.depth()).rev() {
        let layer = &net.layers[l];
        let lt = &trace.layers[l];
        let mut bn_grad = None;
        let g_lin = if net.spec.is_top(l) {
            g_act
        } else {
            match (net.spec.bn_mode, &lt.bn, &layer.bn) {
                (BnMode::LinearBnRelu, Some(site), Some(p)) => {
                    let g_bn_out = &g_act * &lt.gate;
                    let (g_in, gc0, gc1) = bn_backward(&g_bn_out, site, &p.c0)?;
                    bn_grad = Some(BnGrad { c0: gc0, c1: gc1 });
                    g_in
                }
                (BnMode::LinearReluBn, Some(site), Some(p)) => {
                    let (g_relu, gc0, gc1) = bn_backward(&g_act, site, &p.c0)?;
                    bn_grad = Some(BnGrad { c0: gc0, c1: gc1 });
                    g_relu * &lt.gate
                }
                _ => &g_act * &lt.gate,
            }
        };
        let input = trace.layer_input(l);
        let gw = input.t().dot(&g_lin) / batch;
        let gb = layer.b.as_ref().map(|_| g_lin.mean_axis(Axis(0)).expect("non-empty"));
        g_act = g_lin.dot(&layer.w.t());
        out.push(LayerGrad {
            node: g_lin,
            w: gw,
            b: gb,
            bn: bn_grad,
        });
    }
    out.reverse();
    Ok(GradientSet { layers: out })
}
