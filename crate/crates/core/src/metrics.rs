//! Student-teacher correspondence metrics.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::row_norms;
use crate::net::Network;

/// Standard deviation below which a node counts as dead.
const DEAD_STD: f64 = 1e-12;

/// Correlations between standardized student and teacher activations.
///
/// Entries involving a dead node are stored as 0 with `valid == false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    /// `n_students x n_teachers`.
    pub rho: Array2<f64>,
    pub valid: Array2<bool>,
}

impl CorrelationMatrix {
    pub fn n_students(&self) -> usize {
        self.rho.nrows()
    }

    pub fn n_teachers(&self) -> usize {
        self.rho.ncols()
    }

    pub fn get(&self, student: usize, teacher: usize) -> Option<f64> {
        self.valid[[student, teacher]].then(|| self.rho[[student, teacher]])
    }

    /// Best valid student for a teacher node; ties go to the smaller index.
    pub fn winner(&self, teacher: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.n_students() {
            if let Some(r) = self.get(j, teacher) {
                if best.is_none_or(|(_, b)| r > b) {
                    best = Some((j, r));
                }
            }
        }
        best.map(|(j, _)| j)
    }
}

fn standardize(acts: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let n = acts.nrows() as f64;
    let mean = acts.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = acts - &mean;
    let std = centered.map_axis(Axis(0), |c| (c.dot(&c) / n).sqrt());
    let alive: Vec<bool> = std.iter().map(|&s| s > DEAD_STD).collect();
    let safe = Array1::from_iter(std.iter().map(|&s| if s > DEAD_STD { s } else { 1.0 }));
    (centered / &safe, alive)
}

/// `rho[j, t] = f~_j . f~_t / batch`, with `f~ = (f - mean f) / std f` over
/// the batch.
pub fn rho_matrix(acts_s: &Array2<f64>, acts_t: &Array2<f64>) -> Result<CorrelationMatrix> {
    if acts_s.nrows() != acts_t.nrows() {
        return Err(Error::pre("student and teacher activations cover different batches"));
    }
    if acts_s.nrows() < 2 {
        return Err(Error::pre("correlations need a batch of at least 2"));
    }
    let (zs, alive_s) = standardize(acts_s);
    let (zt, alive_t) = standardize(acts_t);
    let batch = acts_s.nrows() as f64;
    let mut rho = zs.t().dot(&zt) / batch;
    let valid = Array2::from_shape_fn(rho.dim(), |(j, t)| alive_s[j] && alive_t[t]);
    ndarray::Zip::from(&mut rho).and(&valid).for_each(|r, &ok| {
        *r = if ok { r.clamp(-1.0, 1.0) } else { 0.0 };
    });
    Ok(CorrelationMatrix { rho, valid })
}

/// Layer summary: mean over teacher nodes of the best student correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoBar {
    /// `None` when no teacher node has a valid student.
    pub value: Option<f64>,
    pub covered: usize,
    /// Teacher nodes without any valid entry.
    pub excluded: Vec<usize>,
}

pub fn rho_bar(rho: &CorrelationMatrix) -> RhoBar {
    let mut sum = 0.0;
    let mut excluded = Vec::new();
    for t in 0..rho.n_teachers() {
        match rho.winner(t) {
            Some(j) => sum += rho.rho[[j, t]],
            None => excluded.push(t),
        }
    }
    let covered = rho.n_teachers() - excluded.len();
    RhoBar {
        value: (covered > 0).then(|| sum / covered as f64),
        covered,
        excluded,
    }
}

/// Normalized rank, at every checkpoint, of each teacher node's final winner,
/// averaged over teacher nodes.
///
/// Rank 0 is the best student; a student's rank counts the students with a
/// larger correlation plus those tied with it at a smaller index, and is
/// divided by `n_students - 1`. Invalid entries rank below every valid one.
/// Teacher nodes with no valid student at the final checkpoint are skipped;
/// if none remain every value is 0.
pub fn mean_rank(checkpoints: &[CorrelationMatrix]) -> Result<Vec<f64>> {
    let last = checkpoints
        .last()
        .filter(|_| checkpoints.len() >= 2)
        .ok_or_else(|| Error::pre("mean rank needs at least 2 checkpoints"))?;
    let shape = last.rho.dim();
    if checkpoints.iter().any(|c| c.rho.dim() != shape) {
        return Err(Error::pre("checkpoints have different shapes"));
    }
    let n = shape.0;
    let winners: Vec<(usize, usize)> = (0..shape.1).filter_map(|t| last.winner(t).map(|j| (t, j))).collect();
    if winners.is_empty() || n < 2 {
        return Ok(vec![0.0; checkpoints.len()]);
    }
    let key = |c: &CorrelationMatrix, j: usize, t: usize| c.get(j, t).unwrap_or(f64::NEG_INFINITY);
    Ok(checkpoints
        .iter()
        .map(|c| {
            let total: f64 = winners
                .iter()
                .map(|&(t, w)| {
                    let mine = key(c, w, t);
                    let ahead = (0..n)
                        .filter(|&j| {
                            let other = key(c, j, t);
                            other > mine || (other == mine && j < w)
                        })
                        .count();
                    ahead as f64 / (n - 1) as f64
                })
                .sum();
            total / winners.len() as f64
        })
        .collect())
}

/// Norms of the fan-out rows of the nodes at the output of `layer`.
pub fn v_row_norms(net: &Network, layer: usize) -> Result<Array1<f64>> {
    let upper = net
        .layers
        .get(layer + 1)
        .ok_or_else(|| Error::pre(format!("layer {layer} has no upper layer")))?;
    Ok(row_norms(&upper.w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnAudit {
    pub layer: usize,
    pub n_negative: usize,
    /// Zero counts as non-negative.
    pub n_positive: usize,
    /// `(lo, hi, count)` for 20 equal bins spanning the observed range.
    pub bins: Vec<(f64, f64, usize)>,
}

pub const AUDIT_BINS: usize = 20;

/// Sign counts and histogram of the BN biases `c1` of each BN site.
pub fn bn_bias_audit(net: &Network) -> Vec<BnAudit> {
    net.layers
        .iter()
        .enumerate()
        .filter_map(|(l, layer)| layer.bn.as_ref().map(|bn| (l, &bn.c1)))
        .map(|(layer, c1)| {
            let n_negative = c1.iter().filter(|&&c| c < 0.0).count();
            let lo = c1.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = c1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
            let width = (hi - lo) / AUDIT_BINS as f64;
            let mut counts = [0usize; AUDIT_BINS];
            for &c in c1 {
                let k = (((c - lo) / width) as usize).min(AUDIT_BINS - 1);
                counts[k] += 1;
            }
            let bins = counts
                .iter()
                .enumerate()
                .map(|(k, &count)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, count))
                .collect();
            BnAudit {
                layer,
                n_negative,
                n_positive: c1.len() - n_negative,
                bins,
            }
        })
        .collect()
}
