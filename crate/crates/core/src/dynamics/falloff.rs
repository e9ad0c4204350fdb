use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, normalized, random_tangent};
use crate::rng::Rng;
use crate::teacher::Sampler;

/// One perturbation scale of the fall-off probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalloffPoint {
    pub delta: f64,
    /// `|w - w*|` after renormalization.
    pub dist: f64,
    /// `l*_jj - l_jj` estimate and its standard error.
    pub diff: f64,
    pub stderr: f64,
    /// `|diff| / (l*_jj dist^2)`.
    pub ratio: f64,
    /// False when the difference is within three standard errors of zero.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalloffFit {
    pub exponent: f64,
    pub c0_hat: f64,
    pub points: Vec<FalloffPoint>,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Measure how `l*_jj - l_jj = psi_l(w, w*) - psi_l(w, w)` shrinks as
/// `w` approaches the unit teacher filter `w*`.
///
/// `w` is `w*` moved by `delta` along one random tangent and renormalized;
/// every scale is evaluated on the same `n` inputs. Returns the least-squares
/// slope of `log |diff|` against `log |w - w*|` over the scales whose
/// difference clears three standard errors, and the largest ratio
/// `|diff| / (l*_jj |w - w*|^2)` as the constant estimate.
pub fn quadratic_falloff_probe<S: Sampler>(
    w_star: &Array1<f64>,
    deltas: &[f64],
    input: &mut S,
    n: usize,
    rng: &mut Rng,
) -> Result<FalloffFit> {
    if deltas.iter().any(|d| !(0.0..=0.5).contains(d)) {
        return Err(Error::pre("perturbation scales must lie in [0, 0.5]"));
    }
    if w_star.len() != input.dim() {
        return Err(Error::pre("teacher filter does not match the input dimension"));
    }
    let ws = normalized(w_star);
    let t = random_tangent(&ws, rng);
    let ws_pert: Vec<Array1<f64>> = deltas.iter().map(|&d| normalized(&(&ws + &(&t * d)))).collect();
    let k = deltas.len();
    let (mut sum, mut sumsq) = (vec![0.0; k], vec![0.0; k]);
    let mut lstar = vec![0.0; k];
    let mut done = 0;
    while done < n {
        let c = 8192.min(n - done);
        let x = input.next_batch(c);
        let b = x.dot(&ws);
        for (i, w) in ws_pert.iter().enumerate() {
            let a = x.dot(w);
            for (p, q) in a.iter().zip(&b) {
                let (fa, fb) = (relu(*p), relu(*q));
                let diff = fa * fb - fa * fa;
                sum[i] += diff;
                sumsq[i] += diff * diff;
                lstar[i] += fa * fb;
            }
        }
        done += c;
    }
    let nf = n as f64;
    let points: Vec<FalloffPoint> = (0..k)
        .map(|i| {
            let mean = sum[i] / nf;
            let var = (sumsq[i] / nf - mean * mean).max(0.0);
            let stderr = (var / (nf - 1.0)).sqrt();
            let dist = norm((&ws_pert[i] - &ws).view());
            let l = lstar[i] / nf;
            let used = dist > 0.0 && mean.abs() > 3.0 * stderr;
            FalloffPoint {
                delta: deltas[i],
                dist,
                diff: mean,
                stderr,
                ratio: if dist > 0.0 {
                    mean.abs() / (l * dist * dist)
                } else {
                    0.0
                },
                used,
            }
        })
        .collect();
    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.used)
        .map(|p| (p.dist.ln(), p.diff.abs().ln()))
        .collect();
    let exponent = if fit.len() >= 2 {
        let mx = fit.iter().map(|p| p.0).sum::<f64>() / fit.len() as f64;
        let my = fit.iter().map(|p| p.1).sum::<f64>() / fit.len() as f64;
        let sxy: f64 = fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = fit.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    let c0_hat = points.iter().filter(|p| p.used).map(|p| p.ratio).fold(0.0, f64::max);
    Ok(FalloffFit {
        exponent,
        c0_hat,
        points,
    })
}
