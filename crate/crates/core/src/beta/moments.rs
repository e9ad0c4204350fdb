use ndarray::{Array2, Axis};

use super::compute_beta;
use crate::error::{Error, Result};
use crate::linalg::symmetrize_upper;
use crate::net::{forward, ForwardTrace, Network};
use crate::rng::Rng;
use crate::teacher::Sampler;
use rand::Rng as _;

const CHUNK: usize = 512;

/// Monte-Carlo mean of a matrix-valued quantity with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixEstimate {
    pub mean: Array2<f64>,
    pub stderr: Array2<f64>,
}

/// Running first and second moments of a matrix quantity.
struct Accum {
    sum: Array2<f64>,
    sumsq: Array2<f64>,
}

impl Accum {
    fn new(shape: (usize, usize)) -> Self {
        Accum {
            sum: Array2::zeros(shape),
            sumsq: Array2::zeros(shape),
        }
    }

    /// Add `a^T b` and `(a.a)^T (b.b)`, i.e. all pairwise products summed
    /// over the rows of a chunk.
    fn add_products(&mut self, a: &Array2<f64>, b: &Array2<f64>) {
        self.sum += &a.t().dot(b);
        let a2 = a.mapv(|v| v * v);
        let b2 = b.mapv(|v| v * v);
        self.sumsq += &a2.t().dot(&b2);
    }

    fn finish(self, n: usize, symmetric: bool) -> MatrixEstimate {
        let nf = n as f64;
        let mut mean = self.sum / nf;
        let var = (self.sumsq / nf - mean.mapv(|m| m * m)).mapv(|v| v.max(0.0));
        let mut stderr = var / (nf - 1.0).max(1.0);
        stderr.mapv_inplace(f64::sqrt);
        if symmetric {
            symmetrize_upper(&mut mean);
            symmetrize_upper(&mut stderr);
        }
        MatrixEstimate { mean, stderr }
    }
}

/// Expectation matrices for one weight layer `i`.
///
/// `L`-type matrices come from the activations feeding the layer (the input
/// itself at `i = 0`), `D`-type and `beta_bar` from the nodes the layer
/// produces. At the output layer `D` is all ones and `beta_bar` the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub layer: usize,
    pub l: MatrixEstimate,
    pub l_star: MatrixEstimate,
    pub l_ss: MatrixEstimate,
    pub d: MatrixEstimate,
    pub d_star: MatrixEstimate,
    pub d_ss: MatrixEstimate,
    pub beta_bar: MatrixEstimate,
    pub beta_bar_star: MatrixEstimate,
    pub h: Array2<f64>,
    pub h_star: Array2<f64>,
    pub sample_count: usize,
}

impl MomentSet {
    /// The separated update `L* W* H*^T - L W H^T` for this layer, with `W`
    /// stored `fan_in x fan_out`. Bias contributions are not part of it.
    pub fn factorized_update(&self, w: &Array2<f64>, w_star: &Array2<f64>) -> Array2<f64> {
        self.l_star.mean.dot(w_star).dot(&self.h_star.t()) - self.l.mean.dot(w).dot(&self.h.t())
    }
}

fn layer_input(trace: &ForwardTrace, i: usize) -> &Array2<f64> {
    trace.layer_input(i)
}

/// Estimate the moment matrices of every weight layer from `n_samples`
/// fresh inputs.
pub fn estimate_moments<S: Sampler>(
    student: &Network,
    teacher: &Network,
    stream: &mut S,
    n_samples: usize,
) -> Result<Vec<MomentSet>> {
    if n_samples < 2 {
        return Err(Error::pre("moment estimation needs at least 2 samples"));
    }
    let depth = student.depth();
    let sw = &student.spec.widths;
    let tw = &teacher.spec.widths;
    let mut acc: Vec<[Accum; 8]> = (0..depth)
        .map(|i| {
            [
                Accum::new((sw[i], sw[i])),
                Accum::new((sw[i], tw[i])),
                Accum::new((tw[i], tw[i])),
                Accum::new((sw[i + 1], sw[i + 1])),
                Accum::new((sw[i + 1], tw[i + 1])),
                Accum::new((tw[i + 1], tw[i + 1])),
                Accum::new((sw[i + 1], sw[i + 1])),
                Accum::new((sw[i + 1], tw[i + 1])),
            ]
        })
        .collect();
    let mut done = 0;
    while done < n_samples {
        let n = CHUNK.min(n_samples - done);
        let x = stream.next_batch(n);
        let ts = forward(student, &x)?;
        let tt = forward(teacher, &x)?;
        let betas = compute_beta(student, teacher, &ts, &tt)?;
        for (i, a) in acc.iter_mut().enumerate() {
            let (fs, ft) = (layer_input(&ts, i), layer_input(&tt, i));
            a[0].add_products(fs, fs);
            a[1].add_products(fs, ft);
            a[2].add_products(ft, ft);
            let (gs, gt) = (&ts.layers[i].gate, &tt.layers[i].gate);
            a[3].add_products(gs, gs);
            a[4].add_products(gs, gt);
            a[5].add_products(gt, gt);
            let bl = &betas.layers[i];
            a[6].sum += &bl.beta.sum_axis(Axis(0));
            a[6].sumsq += &bl.beta.mapv(|v| v * v).sum_axis(Axis(0));
            a[7].sum += &bl.beta_star.sum_axis(Axis(0));
            a[7].sumsq += &bl.beta_star.mapv(|v| v * v).sum_axis(Axis(0));
        }
        done += n;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(layer, a)| {
            let [l, l_star, l_ss, d, d_star, d_ss, bb, bbs] = a;
            let l = l.finish(n_samples, true);
            let l_star = l_star.finish(n_samples, false);
            let l_ss = l_ss.finish(n_samples, true);
            let d = d.finish(n_samples, true);
            let d_star = d_star.finish(n_samples, false);
            let d_ss = d_ss.finish(n_samples, true);
            let beta_bar = bb.finish(n_samples, true);
            let beta_bar_star = bbs.finish(n_samples, false);
            let h = &beta_bar.mean * &d.mean;
            let h_star = &beta_bar_star.mean * &d_star.mean;
            MomentSet {
                layer,
                l,
                l_star,
                l_ss,
                d,
                d_star,
                d_ss,
                beta_bar,
                beta_bar_star,
                h,
                h_star,
                sample_count: n_samples,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    layer: usize,
    star: bool,
    j: usize,
    jj: usize,
    k: usize,
    kk: usize,
}

/// Audit the separation of expectations on randomly chosen index tuples.
///
/// Each probe compares `E[beta f'_j f'_jj f_k f_kk]` against
/// `E[beta] E[f'_j f'_jj] E[f_k f_kk]`, for either the student-teacher
/// (`star`) or the student-student coefficients, and the worst relative gap
/// `|lhs - rhs| / (|lhs| + |rhs| + 1e-12)` is returned. Probes are drawn as a
/// prefix-stable sequence from `rng`, so asking for more probes only adds
/// tuples.
pub fn separation_residual<S: Sampler>(
    student: &Network,
    teacher: &Network,
    stream: &mut S,
    n_samples: usize,
    n_probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::pre("separation audit needs at least 2 samples"));
    }
    let depth = student.depth();
    let sw = &student.spec.widths;
    let tw = &teacher.spec.widths;
    let probes: Vec<Probe> = (0..n_probes)
        .map(|_| {
            let layer = rng.random_range(0..depth);
            let star = rng.random_bool(0.5);
            let j = rng.random_range(0..sw[layer + 1]);
            let k = rng.random_range(0..sw[layer]);
            let (jj, kk) = if star {
                (rng.random_range(0..tw[layer + 1]), rng.random_range(0..tw[layer]))
            } else {
                (rng.random_range(0..sw[layer + 1]), rng.random_range(0..sw[layer]))
            };
            Probe {
                layer,
                star,
                j,
                jj,
                k,
                kk,
            }
        })
        .collect();
    // per probe: sum of the full product, of beta, of the gate product and of
    // the activation product
    let mut sums = vec![[0.0f64; 4]; probes.len()];
    let mut done = 0;
    while done < n_samples {
        let n = CHUNK.min(n_samples - done);
        let x = stream.next_batch(n);
        let ts = forward(student, &x)?;
        let tt = forward(teacher, &x)?;
        let betas = compute_beta(student, teacher, &ts, &tt)?;
        for (p, acc) in probes.iter().zip(sums.iter_mut()) {
            let bl = &betas.layers[p.layer];
            let (beta, other_gate, other_f) = if p.star {
                (&bl.beta_star, &tt.layers[p.layer].gate, layer_input(&tt, p.layer))
            } else {
                (&bl.beta, &ts.layers[p.layer].gate, layer_input(&ts, p.layer))
            };
            let gate = &ts.layers[p.layer].gate;
            let f = layer_input(&ts, p.layer);
            for s in 0..n {
                let b = beta[[s, p.j, p.jj]];
                let d = gate[[s, p.j]] * other_gate[[s, p.jj]];
                let l = f[[s, p.k]] * other_f[[s, p.kk]];
                acc[0] += b * d * l;
                acc[1] += b;
                acc[2] += d;
                acc[3] += l;
            }
        }
        done += n;
    }
    let nf = n_samples as f64;
    Ok(sums
        .iter()
        .map(|a| {
            let lhs = a[0] / nf;
            let rhs = (a[1] / nf) * (a[2] / nf) * (a[3] / nf);
            (lhs - rhs).abs() / (lhs.abs() + rhs.abs() + 1e-12)
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{backward, BnMode, NetworkSpec};
    use crate::rng::rng_for;
    use crate::teacher::{GausStream, StreamSpec};

    fn nets() -> (Network, Network) {
        let mut rng = rng_for(2, "m");
        let s = NetworkSpec::mlp(vec![5, 8, 3], BnMode::None, false).unwrap();
        let t = NetworkSpec::mlp(vec![5, 4, 3], BnMode::None, false).unwrap();
        (
            Network::random(s, true, &mut rng).unwrap(),
            Network::random(t, true, &mut rng).unwrap(),
        )
    }

    #[test]
    fn symmetric_and_top_identity() {
        let (s, t) = nets();
        let mut st = GausStream::new(StreamSpec::gaus(5, 1)).unwrap();
        let m = estimate_moments(&s, &t, &mut st, 2000).unwrap();
        for ms in &m {
            assert_eq!(ms.l.mean, ms.l.mean.t());
            assert_eq!(ms.d.mean, ms.d.mean.t());
            assert!(ms.d.mean.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let eye: Array2<f64> = Array2::eye(3);
        assert_eq!(m[1].beta_bar.mean, eye);
        assert_eq!(m[1].h, eye);
        assert_eq!(m[1].h_star, eye);
    }

    #[test]
    fn zero_bias_node_fires_half_the_time() {
        let (s, t) = nets();
        let mut st = GausStream::new(StreamSpec::gaus(5, 7)).unwrap();
        let m = estimate_moments(&s, &t, &mut st, 20_000).unwrap();
        for j in 0..8 {
            let (d, se) = (m[0].d.mean[[j, j]], m[0].d.stderr[[j, j]]);
            assert!((d - 0.5).abs() < 4.0 * se, "d = {d} +- {se}");
        }
    }

    #[test]
    fn top_layer_update_matches_backprop_mean() {
        // with no top bias the separated form is exact at the output layer
        let (s, t) = nets();
        let spec = StreamSpec::gaus(5, 3);
        let m = estimate_moments(&s, &t, &mut GausStream::new(spec.clone()).unwrap(), 1024).unwrap();
        // the same 1024 inputs, replayed as one batch
        let x = GausStream::new(spec).unwrap().next_batch(1024);
        let ts = forward(&s, &x).unwrap();
        let tt = forward(&t, &x).unwrap();
        let g = backward(&s, &ts, tt.output()).unwrap();
        let upd = m[1].factorized_update(&s.layers[1].w, &t.layers[1].w);
        let err = (&upd - &g.layers[1].w).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        let scale = g.layers[1].w.mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(err < 1e-9 * scale, "{err} vs {scale}");
    }

    #[test]
    fn more_probes_never_lower_the_worst_case() {
        let (s, t) = nets();
        let spec = StreamSpec::gaus(5, 4);
        let run = |p| {
            let mut st = GausStream::new(spec.clone()).unwrap();
            separation_residual(&s, &t, &mut st, 1024, p, &mut rng_for(9, "probe")).unwrap()
        };
        let (a, b, c) = (run(5), run(20), run(80));
        assert!(a <= b && b <= c);
    }
}
