//! Per-sample gradient decomposition and the moment statistics built on it.
//!
//! For node layer `k` below the top, every student node's backpropagated
//! gradient is a gated linear combination of teacher and student activations
//! at the same layer:
//!
//! ```text
//! g_k(x) = f'_k(x) [ sum_t B*_kt(x) f*_t(x) - sum_k' B_kk'(x) f_k'(x) + r_k(x) ]
//! ```
//!
//! The coefficient matrices follow the recursion
//! `B*_k = (W_{k+1} . g_{k+1}) B*_{k+1} (W*_{k+1} . g*_{k+1})^T` from the
//! identity at the output. The term `r_k` collects what the biases of the
//! layers above contribute; it vanishes for bias-free networks.

mod moments;
mod psi;

pub use moments::{estimate_moments, separation_residual, MatrixEstimate, MomentSet};
pub use psi::{lipschitz_probe, overlap_eps, psi_d, psi_l, Estimate, LipschitzReport, OverlapReport};

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BnMode, ForwardTrace, GradientSet, Network};
use crate::rng::Rng;
use crate::teacher::Sampler;

/// Coefficients for one node layer, one slice per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaLayer {
    /// `batch x n x m`, student node against teacher node.
    pub beta_star: Array3<f64>,
    /// `batch x n x n`, student node against student node.
    pub beta: Array3<f64>,
    /// `batch x n`, the bias contribution `r_k`.
    pub bias_term: Array2<f64>,
}

/// One [`BetaLayer`] per node layer; the last entry is the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaTensors {
    pub layers: Vec<BetaLayer>,
}

fn check_pair(student: &Network, teacher: &Network) -> Result<()> {
    if student.depth() != teacher.depth() {
        return Err(Error::config(format!(
            "student depth {} differs from teacher depth {}",
            student.depth(),
            teacher.depth()
        )));
    }
    if student.spec.bn_mode != BnMode::None || teacher.spec.bn_mode != BnMode::None {
        return Err(Error::config(
            "the gradient decomposition is defined for networks without BN",
        ));
    }
    if student.spec.input_dim() != teacher.spec.input_dim() || student.spec.output_dim() != teacher.spec.output_dim() {
        return Err(Error::config("student and teacher disagree on input or output width"));
    }
    Ok(())
}

fn bias_or_zero(net: &Network, layer: usize) -> Array1<f64> {
    net.layers[layer]
        .b
        .clone()
        .unwrap_or_else(|| Array1::zeros(net.spec.widths[layer + 1]))
}

/// Run the recursion for every sample of a batch.
pub fn compute_beta(
    student: &Network,
    teacher: &Network,
    trace_s: &ForwardTrace,
    trace_t: &ForwardTrace,
) -> Result<BetaTensors> {
    check_pair(student, teacher)?;
    let batch = trace_s.batch_size();
    if trace_t.batch_size() != batch
        || trace_s.layers.len() != student.depth()
        || trace_t.layers.len() != teacher.depth()
    {
        return Err(Error::config("traces do not match the networks or each other"));
    }
    let depth = student.depth();
    let c = student.spec.output_dim();
    let mut top_star = Array3::zeros((batch, c, c));
    let mut top = Array3::zeros((batch, c, c));
    for s in 0..batch {
        top_star.slice_mut(s![s, .., ..]).assign(&Array2::eye(c));
        top.slice_mut(s![s, .., ..]).assign(&Array2::eye(c));
    }
    let mut layers = vec![BetaLayer {
        beta_star: top_star,
        beta: top,
        bias_term: Array2::zeros((batch, c)),
    }];
    for k in (0..depth - 1).rev() {
        let above = layers.last().expect("top layer present");
        let w = &student.layers[k + 1].w;
        let wt = &teacher.layers[k + 1].w;
        let (n, m) = (w.nrows(), wt.nrows());
        let b = bias_or_zero(student, k + 1);
        let bt = bias_or_zero(teacher, k + 1);
        let gate = &trace_s.layers[k + 1].gate;
        let gate_t = &trace_t.layers[k + 1].gate;
        let mut beta_star = Array3::zeros((batch, n, m));
        let mut beta = Array3::zeros((batch, n, n));
        let mut bias_term = Array2::zeros((batch, n));
        for s in 0..batch {
            let g = gate.row(s);
            let gt = gate_t.row(s);
            let wg = w * &g;
            let wtg = wt * &gt;
            let bs_above = above.beta_star.index_axis(Axis(0), s);
            let b_above = above.beta.index_axis(Axis(0), s);
            let bs = wg.dot(&bs_above).dot(&wtg.t());
            let bb = wg.dot(&b_above).dot(&wg.t());
            let carried = bs_above.dot(&(&gt * &bt)) - b_above.dot(&(&g * &b)) + above.bias_term.row(s);
            bias_term.row_mut(s).assign(&wg.dot(&carried));
            beta_star.slice_mut(s![s, .., ..]).assign(&bs);
            beta.slice_mut(s![s, .., ..]).assign(&bb);
        }
        layers.push(BetaLayer {
            beta_star,
            beta,
            bias_term,
        });
    }
    layers.reverse();
    Ok(BetaTensors { layers })
}

/// Largest absolute gap between backprop node gradients and the gradient
/// rebuilt from the decomposition, over samples, layers and nodes.
pub fn verify_identity(
    betas: &BetaTensors,
    trace_s: &ForwardTrace,
    trace_t: &ForwardTrace,
    grads: &GradientSet,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, bl) in betas.layers.iter().enumerate() {
        let f = &trace_s.layers[k].act;
        let ft = &trace_t.layers[k].act;
        let gate = &trace_s.layers[k].gate;
        let g = &grads.layers[k].node;
        for s in 0..f.nrows() {
            let bracket = bl.beta_star.index_axis(Axis(0), s).dot(&ft.row(s))
                - bl.beta.index_axis(Axis(0), s).dot(&f.row(s))
                + bl.bias_term.row(s);
            let rebuilt = &bracket * &gate.row(s);
            for (a, b) in rebuilt.iter().zip(g.row(s)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Audit of the modelling assumptions for one student-teacher pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Worst teacher overlap over all hidden layers; infinite with a dead node.
    pub eps_d: f64,
    pub eps_l: f64,
    pub overlap: Vec<OverlapReport>,
    pub separation_rel_err: f64,
    /// Largest Lipschitz estimates over the first-layer teacher filters.
    pub k_d: f64,
    pub k_l: f64,
}

/// Measure overlap, the factorization error of the expectations and the
/// Lipschitz constants, each on `n_samples` fresh inputs from `stream`.
pub fn audit_assumptions<S: Sampler>(
    student: &Network,
    teacher: &Network,
    stream: &mut S,
    n_samples: usize,
    n_probes: usize,
    rng: &mut Rng,
) -> Result<AssumptionReport> {
    check_pair(student, teacher)?;
    let overlap = overlap_eps(teacher, stream, n_samples)?;
    let separation_rel_err = separation_residual(student, teacher, stream, n_samples, n_probes, rng)?;
    let (mut k_d, mut k_l): (f64, f64) = (0.0, 0.0);
    let w0 = &teacher.layers[0].w;
    for j in 0..w0.ncols() {
        let lip = lipschitz_probe(&w0.column(j).to_owned(), stream, n_samples, 4, &[0.05], None, rng)?;
        k_d = k_d.max(lip.k_d);
        k_l = k_l.max(lip.k_l);
    }
    Ok(AssumptionReport {
        eps_d: overlap.iter().map(|o| o.eps_d).fold(0.0, f64::max),
        eps_l: overlap.iter().map(|o| o.eps_l).fold(0.0, f64::max),
        overlap,
        separation_rel_err,
        k_d,
        k_l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::net::{backward, forward, NetworkSpec};
    use crate::rng::rng_for;

    fn pair(bias: bool, seed: u64) -> (Network, Network) {
        let mut rng = rng_for(seed, "pair");
        let s = NetworkSpec::mlp(vec![6, 9, 7, 4], BnMode::None, bias).unwrap();
        let t = NetworkSpec::mlp(vec![6, 5, 3, 4], BnMode::None, bias).unwrap();
        let mut student = Network::random(s, false, &mut rng).unwrap();
        let mut teacher = Network::random(t, false, &mut rng).unwrap();
        if bias {
            for net in [&mut student, &mut teacher] {
                for l in net.layers.iter_mut() {
                    let n = l.w.ncols();
                    l.b = Some(crate::linalg::gaussian_vector(n, &mut rng) * 0.3);
                }
            }
        }
        (student, teacher)
    }

    fn residual_ratio(student: &Network, teacher: &Network, seed: u64) -> (f64, f64) {
        let x = gaussian_matrix(12, 6, 1.0, &mut rng_for(seed, "x"));
        let ts = forward(student, &x).unwrap();
        let tt = forward(teacher, &x).unwrap();
        let grads = backward(student, &ts, tt.output()).unwrap();
        let betas = compute_beta(student, teacher, &ts, &tt).unwrap();
        let gmax = grads
            .layers
            .iter()
            .flat_map(|l| l.node.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        (verify_identity(&betas, &ts, &tt, &grads), gmax)
    }

    #[test]
    fn identity_exact_without_bias() {
        let (s, t) = pair(false, 1);
        let (r, g) = residual_ratio(&s, &t, 2);
        assert!(r <= 1e-12 * g, "residual {r} vs {g}");
    }

    #[test]
    fn identity_exact_with_bias() {
        let (s, t) = pair(true, 3);
        let (r, g) = residual_ratio(&s, &t, 4);
        assert!(r <= 1e-12 * g, "residual {r} vs {g}");
    }

    #[test]
    fn depth_one_is_only_the_base_case() {
        let mut rng = rng_for(0, "d1");
        let spec = NetworkSpec::mlp(vec![3, 2], BnMode::None, true).unwrap();
        let s = Network::random(spec.clone(), false, &mut rng).unwrap();
        let t = Network::random(spec, false, &mut rng).unwrap();
        let x = gaussian_matrix(4, 3, 1.0, &mut rng);
        let b = compute_beta(&s, &t, &forward(&s, &x).unwrap(), &forward(&t, &x).unwrap()).unwrap();
        assert_eq!(b.layers.len(), 1);
        assert_eq!(b.layers[0].beta.index_axis(Axis(0), 3), Array2::<f64>::eye(2));
    }

    #[test]
    fn dead_gates_zero_lower_betas() {
        let (mut s, t) = pair(true, 5);
        for l in 0..2 {
            s.layers[l].b.as_mut().unwrap().fill(-1e6);
        }
        let x = gaussian_matrix(5, 6, 1.0, &mut rng_for(6, "x"));
        let b = compute_beta(&s, &t, &forward(&s, &x).unwrap(), &forward(&t, &x).unwrap()).unwrap();
        assert!(b.layers[0].beta.iter().all(|&v| v == 0.0));
        assert!(b.layers[0].beta_star.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audit_reports_finite_values_for_a_small_pair() {
        let (s, t) = pair(true, 7);
        let mut stream = crate::teacher::GausStream::new(crate::teacher::StreamSpec::gaus(6, 1)).unwrap();
        let r = audit_assumptions(&s, &t, &mut stream, 4000, 20, &mut rng_for(1, "audit")).unwrap();
        assert_eq!(r.overlap.len(), 2);
        assert!(r.eps_d >= 0.0 && r.separation_rel_err >= 0.0 && r.k_d >= 0.0);
    }

    #[test]
    fn bn_networks_are_rejected() {
        let mut rng = rng_for(0, "bn");
        let spec = NetworkSpec::mlp(vec![3, 4, 2], BnMode::LinearBnRelu, true).unwrap();
        let s = Network::random(spec.clone(), false, &mut rng).unwrap();
        let x = gaussian_matrix(4, 3, 1.0, &mut rng);
        let tr = forward(&s, &x).unwrap();
        assert!(matches!(compute_beta(&s, &s, &tr, &tr), Err(Error::Config(_))));
    }
}
