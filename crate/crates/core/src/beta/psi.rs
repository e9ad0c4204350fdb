use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, normalized, random_tangent};
use crate::net::{forward, Network};
use crate::rng::Rng;
use crate::teacher::Sampler;
use rand::Rng as _;

const CHUNK: usize = 8192;

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Running {
    sum: f64,
    sumsq: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sumsq += v * v;
        self.n += 1;
    }

    fn estimate(&self) -> Estimate {
        let n = self.n.max(1) as f64;
        let mean = self.sum / n;
        let var = (self.sumsq / n - mean * mean).max(0.0);
        Estimate {
            mean,
            stderr: (var / (n - 1.0).max(1.0)).sqrt(),
            n: self.n,
        }
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn step(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn psi<S: Sampler>(
    w: &Array1<f64>,
    w2: &Array1<f64>,
    stream: &mut S,
    n: usize,
    act: fn(f64) -> f64,
) -> Result<Estimate> {
    if norm(w.view()) == 0.0 || norm(w2.view()) == 0.0 {
        return Err(Error::pre("psi needs nonzero weight vectors"));
    }
    if w.len() != stream.dim() || w2.len() != stream.dim() {
        return Err(Error::pre("weight length does not match the input dimension"));
    }
    let mut r = Running::default();
    let mut done = 0;
    while done < n {
        let m = CHUNK.min(n - done);
        let x = stream.next_batch(m);
        let a = x.dot(w);
        let b = x.dot(w2);
        for (p, q) in a.iter().zip(&b) {
            r.push(act(*p) * act(*q));
        }
        done += m;
    }
    Ok(r.estimate())
}

/// `E[relu(w.x) relu(w'.x)]`.
pub fn psi_l<S: Sampler>(w: &Array1<f64>, w2: &Array1<f64>, stream: &mut S, n: usize) -> Result<Estimate> {
    psi(w, w2, stream, n, relu)
}

/// `E[1(w.x > 0) 1(w'.x > 0)]`.
pub fn psi_d<S: Sampler>(w: &Array1<f64>, w2: &Array1<f64>, stream: &mut S, n: usize) -> Result<Estimate> {
    psi(w, w2, stream, n, step)
}

/// Pairwise overlap of one teacher node layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub layer: usize,
    /// Infinite when a node never fires.
    pub eps_d: f64,
    pub eps_l: f64,
    pub dead_nodes: Vec<usize>,
}

fn worst_ratio(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let den = m[[a, a]].min(m[[b, b]]);
                worst = worst.max(if den > 0.0 { m[[a, b]] / den } else { f64::INFINITY });
            }
        }
    }
    worst
}

/// Smallest `eps` with `d**_ab <= eps * min(d**_aa, d**_bb)` (and the same for
/// `l**`) over all pairs in every hidden layer of `teacher`.
pub fn overlap_eps<S: Sampler>(teacher: &Network, stream: &mut S, n: usize) -> Result<Vec<OverlapReport>> {
    let hidden = teacher.depth() - 1;
    let widths = &teacher.spec.widths;
    let mut d: Vec<Array2<f64>> = (0..hidden)
        .map(|l| Array2::zeros((widths[l + 1], widths[l + 1])))
        .collect();
    let mut lm = d.clone();
    let mut done = 0;
    while done < n {
        let m = 1024.min(n - done);
        let x = stream.next_batch(m);
        let tr = forward(teacher, &x)?;
        for l in 0..hidden {
            let g = &tr.layers[l].gate;
            let f = &tr.layers[l].act;
            d[l] += &g.t().dot(g);
            lm[l] += &f.t().dot(f);
        }
        done += m;
    }
    Ok((0..hidden)
        .map(|l| {
            let dead = (0..widths[l + 1]).filter(|&j| d[l][[j, j]] == 0.0).collect();
            OverlapReport {
                layer: l,
                eps_d: worst_ratio(&d[l]),
                eps_l: worst_ratio(&lm[l]),
                dead_nodes: dead,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub k_d: f64,
    pub k_l: f64,
    /// `(delta, k_d, k_l)` for each perturbation scale.
    pub per_scale: Vec<(f64, f64, f64)>,
    /// Probes dropped because `psi(w, w1)` was indistinguishable from zero.
    pub skipped: usize,
}

/// Empirical Lipschitz constants of `psi_d` and `psi_l` around `w`.
///
/// For each of `n_directions` random unit vectors `w1` (uniform on the
/// sphere, or at a uniform angle in `[0, radius]` from `w` when a radius is
/// given) and each scale
/// `delta`, `w2` is `w1` moved by `delta` along a random tangent and
/// renormalized. The ratio `|psi(w, w1) - psi(w, w2)| / (psi(w, w1) |w1 - w2|)`
/// is evaluated on common samples and its maximum reported.
pub fn lipschitz_probe<S: Sampler>(
    w: &Array1<f64>,
    stream: &mut S,
    n: usize,
    n_directions: usize,
    deltas: &[f64],
    radius: Option<f64>,
    rng: &mut Rng,
) -> Result<LipschitzReport> {
    if deltas.iter().any(|&d| !(d > 0.0 && d <= 0.3)) {
        return Err(Error::pre("perturbation scales must lie in (0, 0.3]"));
    }
    if radius.is_some_and(|r| !(0.0..=std::f64::consts::PI).contains(&r)) {
        return Err(Error::pre("probe radius must lie in [0, pi]"));
    }
    let d = stream.dim();
    let w = normalized(w);
    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(n_directions * (1 + deltas.len()));
    for _ in 0..n_directions {
        let w1 = match radius {
            None => normalized(&crate::linalg::gaussian_vector(d, rng)),
            Some(r) => {
                let angle = r * rng.random::<f64>();
                &w * angle.cos() + &(random_tangent(&w, rng) * angle.sin())
            }
        };
        let t = random_tangent(&w1, rng);
        dirs.push(w1.clone());
        for &delta in deltas {
            dirs.push(normalized(&(&w1 + &(&t * delta))));
        }
    }
    let cols = Array2::from_shape_fn((d, dirs.len()), |(i, j)| dirs[j][i]);
    let stride = 1 + deltas.len();
    // per direction column: running stats of the d and l products, and of the
    // differences against the base direction
    let mut base = vec![(Running::default(), Running::default()); n_directions];
    let mut diffs = vec![(Running::default(), Running::default()); dirs.len()];
    let mut done = 0;
    while done < n {
        let m = CHUNK.min(n - done);
        let x = stream.next_batch(m);
        let a = x.dot(&w);
        let p = x.dot(&cols);
        for s in 0..m {
            let (ad, al) = (step(a[s]), relu(a[s]));
            for k in 0..n_directions {
                let c0 = k * stride;
                let (bd, bl) = (ad * step(p[[s, c0]]), al * relu(p[[s, c0]]));
                base[k].0.push(bd);
                base[k].1.push(bl);
                for c in c0 + 1..c0 + stride {
                    diffs[c].0.push(bd - ad * step(p[[s, c]]));
                    diffs[c].1.push(bl - al * relu(p[[s, c]]));
                }
            }
        }
        done += m;
    }
    let mut per_scale: Vec<(f64, f64, f64)> = deltas.iter().map(|&dl| (dl, 0.0, 0.0)).collect();
    let mut skipped = 0;
    for k in 0..n_directions {
        let (bd, bl) = (base[k].0.estimate(), base[k].1.estimate());
        if bd.mean <= 3.0 * bd.stderr || bl.mean <= 3.0 * bl.stderr {
            skipped += 1;
            continue;
        }
        for (i, entry) in per_scale.iter_mut().enumerate() {
            let c = k * stride + 1 + i;
            let dist = norm((&dirs[k * stride] - &dirs[c]).view());
            let rd = diffs[c].0.estimate().mean.abs() / (bd.mean * dist);
            let rl = diffs[c].1.estimate().mean.abs() / (bl.mean * dist);
            entry.1 = entry.1.max(rd);
            entry.2 = entry.2.max(rl);
        }
    }
    Ok(LipschitzReport {
        k_d: per_scale.iter().map(|e| e.1).fold(0.0, f64::max),
        k_l: per_scale.iter().map(|e| e.2).fold(0.0, f64::max),
        per_scale,
        skipped,
    })
}
