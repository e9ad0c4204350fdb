use ndarray::Array1;

use super::backward::GradientSet;
use super::Network;
use crate::error::{Error, Result};
use crate::linalg::{axpy, column_norms};

/// One plain SGD step. `grads` holds negative gradients, so every parameter
/// moves by `+eta * g`.
pub fn sgd_step(net: &Network, grads: &GradientSet, eta: f64) -> Result<Network> {
    if grads.layers.len() != net.depth() {
        return Err(Error::pre("gradient depth does not match network"));
    }
    let mut next = net.clone();
    for (l, (layer, g)) in next.layers.iter_mut().zip(&grads.layers).enumerate() {
        if g.w.dim() != layer.w.dim() {
            return Err(Error::pre(format!("layer {l}: weight gradient shape mismatch")));
        }
        let finite = g.w.iter().all(|v| v.is_finite())
            && g.b.iter().flatten().all(|v| v.is_finite())
            && g.bn
                .iter()
                .all(|p| p.c0.iter().chain(p.c1.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numeric(format!("layer {l}: non-finite gradient")));
        }
        axpy(&mut layer.w, eta, &g.w);
        match (&mut layer.b, &g.b) {
            (Some(b), Some(gb)) if b.len() == gb.len() => b.scaled_add(eta, gb),
            (None, None) => {}
            _ => return Err(Error::pre(format!("layer {l}: bias gradient mismatch"))),
        }
        match (&mut layer.bn, &g.bn) {
            (Some(p), Some(gp)) if p.c0.len() == gp.c0.len() => {
                p.c0.scaled_add(eta, &gp.c0);
                p.c1.scaled_add(eta, &gp.c1);
            }
            (None, None) => {}
            _ => return Err(Error::pre(format!("layer {l}: BN gradient mismatch"))),
        }
    }
    Ok(next)
}

/// Norm of every incoming filter `w_j`, per weight layer. Biases are excluded.
pub fn filter_norms(net: &Network) -> Vec<Array1<f64>> {
    net.layers.iter().map(|l| column_norms(&l.w)).collect()
}
