use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::ledger::ConstantLedger;
use super::single::{angles, check_unit_columns, sphere_step, step_gate};
use crate::error::{Error, Result};
use crate::linalg::{column_norms, gaussian_matrix, norm, normalize_columns, row_norms};
use crate::net::{BnMode, Network};
use crate::rng::Rng;
use crate::teacher::Sampler;

/// Two-layer reduced dynamics state. The first `m` student nodes form the
/// u-set, the rest the r-set.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerState {
    /// `d x n`, unit columns.
    pub w: Array2<f64>,
    /// `n x C`; row `j` is the fan-out `v_j`.
    pub v: Array2<f64>,
    /// `d x m`, unit columns.
    pub w_star: Array2<f64>,
    /// `m x C`.
    pub v_star: Array2<f64>,
    /// Initial filters, the reference point for the r-set.
    pub w0: Array2<f64>,
    pub t: usize,
}

impl TwoLayerState {
    pub fn new(w: Array2<f64>, v: Array2<f64>, w_star: Array2<f64>, v_star: Array2<f64>) -> Result<Self> {
        let (d, n) = w.dim();
        let (ds, m) = w_star.dim();
        if d != ds || v.nrows() != n || v_star.nrows() != m || v.ncols() != v_star.ncols() || m > n {
            return Err(Error::pre("inconsistent two-layer shapes"));
        }
        check_unit_columns(&w, "student")?;
        check_unit_columns(&w_star, "teacher")?;
        Ok(TwoLayerState {
            w0: w.clone(),
            w,
            v,
            w_star,
            v_star,
            t: 0,
        })
    }

    pub fn m(&self) -> usize {
        self.w_star.ncols()
    }

    pub fn n(&self) -> usize {
        self.w.ncols()
    }

    pub fn v_norms(&self) -> Array1<f64> {
        row_norms(&self.v)
    }

    /// `max_r |v_j| / min_u |v_j|`; zero when there is no r-set.
    pub fn separation(&self) -> f64 {
        let norms = self.v_norms();
        let m = self.m();
        let min_u = norms.slice(s![..m]).iter().copied().fold(f64::INFINITY, f64::min);
        let max_r = norms.slice(s![m..]).iter().copied().fold(0.0, f64::max);
        max_r / min_u
    }

    /// Angles of the u-set filters to their teachers.
    pub fn theta_u(&self) -> Array1<f64> {
        angles(&self.w.slice(s![.., ..self.m()]).to_owned(), &self.w_star)
    }

    /// Teacher filters extended by the initial r-set filters.
    pub fn extended_teacher(&self) -> Array2<f64> {
        let mut ext = self.w0.clone();
        ext.slice_mut(s![.., ..self.m()]).assign(&self.w_star);
        ext
    }
}

/// Unit-filter form `(W*, V*)` of a one-hidden-layer teacher.
///
/// The hidden bias becomes an extra last row of `W*`, matching the affine
/// input `x = (z, 1)`, and each filter's norm moves into its `V*` row, which
/// leaves the teacher function unchanged. The teacher's output bias has no
/// counterpart in the reduced dynamics and is dropped.
pub fn reduce_teacher(teacher: &Network) -> Result<(Array2<f64>, Array2<f64>)> {
    if teacher.spec.depth() != 2 || teacher.spec.bn_mode != BnMode::None {
        return Err(Error::config(
            "reduced two-layer dynamics need a one-hidden-layer teacher without BN",
        ));
    }
    let hidden = &teacher.layers[0];
    let (d, m) = hidden.w.dim();
    let mut w = Array2::zeros((d + 1, m));
    w.slice_mut(s![..d, ..]).assign(&hidden.w);
    if let Some(b) = &hidden.b {
        w.row_mut(d).assign(b);
    }
    let scale = column_norms(&w);
    if scale.iter().any(|&c| c == 0.0) {
        return Err(Error::config("teacher has a zero filter"));
    }
    normalize_columns(&mut w);
    let v = &teacher.layers[1].w * &scale.insert_axis(Axis(1));
    Ok((w, v))
}

/// Student near a reduced teacher: `W_u = normalize(p_w W* + W_eps)`,
/// `W_r = W_eps`, `V_u = p_v V* + V_eps`, `V_r = V_eps`, where `W_eps` and
/// `V_eps` are Gaussian with unit-norm columns. `V` rows are not normalized.
pub fn init_two_layer(
    w_star: Array2<f64>,
    v_star: Array2<f64>,
    overparam: usize,
    p_w: f64,
    p_v: f64,
    rng: &mut Rng,
) -> Result<TwoLayerState> {
    if overparam < 1 || !(p_w >= 0.0 && p_v >= 0.0) {
        return Err(Error::config("need overparam >= 1 and non-negative proximity factors"));
    }
    let (d, m) = w_star.dim();
    let n = m * overparam;
    let mut w = gaussian_matrix(d, n, 1.0, rng);
    normalize_columns(&mut w);
    w.slice_mut(s![.., ..m]).scaled_add(p_w, &w_star);
    normalize_columns(&mut w);
    let mut v = gaussian_matrix(n, v_star.ncols(), 1.0, rng);
    normalize_columns(&mut v);
    v.slice_mut(s![..m, ..]).scaled_add(p_v, &v_star);
    TwoLayerState::new(w, v, w_star, v_star)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerStep {
    /// `0.5 * mean |f* V* - f V|^2` on the step's batch, before the update.
    pub loss: f64,
    pub separation: f64,
    pub w_update_norm: f64,
    pub v_update_norm: f64,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

/// One simultaneous Euler step of
/// `W <- normalize(W + eta P (W* H*^T - W H^T))` and
/// `V <- V + eta (L* V* - L V)`, with `H = D . V V^T`,
/// `H* = D* . V V*^T` and all moments taken on one fresh batch.
/// With `update_v == false` the top layer is held fixed.
pub fn step_two_layer<S: Sampler>(
    state: &mut TwoLayerState,
    input: &mut S,
    n_samples: usize,
    eta: f64,
    update_v: bool,
) -> Result<TwoLayerStep> {
    if n_samples < 2 {
        return Err(Error::pre("need at least 2 samples per step"));
    }
    if input.dim() != state.w.nrows() {
        return Err(Error::pre("input dimension does not match the filters"));
    }
    let nf = n_samples as f64;
    let x = input.next_batch(n_samples);
    let z = x.dot(&state.w);
    let zs = x.dot(&state.w_star);
    let g = step_gate(&z);
    let gs = step_gate(&zs);
    let d = g.t().dot(&g) / nf;
    let d_star = g.t().dot(&gs) / nf;
    let h = d * state.v.dot(&state.v.t());
    let h_star = d_star * state.v.dot(&state.v_star.t());
    let mut w_dot = state.w_star.dot(&h_star.t()) - state.w.dot(&h.t());
    let f = relu(&z);
    let resid = relu(&zs).dot(&state.v_star) - f.dot(&state.v);
    let loss = 0.5 * resid.iter().map(|r| r * r).sum::<f64>() / nf;
    let v_dot = update_v.then(|| f.t().dot(&resid) / nf);
    let w_update_norm = sphere_step(&mut state.w, &mut w_dot, eta)?;
    let mut v_update_norm = 0.0;
    if let Some(vd) = v_dot {
        v_update_norm = row_norms(&vd).iter().copied().fold(0.0, f64::max);
        state.v.scaled_add(eta, &vd);
    }
    if !state.v.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("fan-out weights diverged".into()));
    }
    state.t += 1;
    Ok(TwoLayerStep {
        loss,
        separation: state.separation(),
        w_update_norm,
        v_update_norm,
    })
}

/// Slack (right minus left side, minimized over indices) of each induction
/// hypothesis at one iteration. A family with no applicable index has
/// infinite slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisMonitor {
    pub t: usize,
    pub w_separation_ok: bool,
    pub wu_contraction_ok: bool,
    pub v_contraction_ok: bool,
    pub wr_bound_ok: bool,
    pub w_separation_slack: f64,
    pub wu_contraction_slack: f64,
    pub v_contraction_slack: f64,
    pub wr_bound_slack: f64,
}

/// Evaluate the four induction hypotheses on the current state.
///
/// The overlap matrices against the extended teacher are estimated from
/// `n_samples` fresh inputs. The iteration index follows the bounds'
/// convention: the initial state is iteration 1, so the contraction
/// exponent equals the number of steps taken.
pub fn monitor_hypotheses<S: Sampler>(
    state: &TwoLayerState,
    ledger: &ConstantLedger,
    input: &mut S,
    n_samples: usize,
) -> Result<HypothesisMonitor> {
    let m = state.m();
    let n = state.n();
    let nf = n_samples as f64;
    let x = input.next_batch(n_samples);
    let z = x.dot(&state.w);
    let ze = x.dot(&state.extended_teacher());
    let d_star = step_gate(&z).t().dot(&step_gate(&ze)) / nf;
    let l_star = relu(&z).t().dot(&relu(&ze)) / nf;
    let inp = &ledger.inputs;

    let mut sep = f64::INFINITY;
    for j in 0..n {
        for jp in 0..n {
            if j == jp {
                continue;
            }
            let (ju, jpu) = (j < m, jp < m);
            let sd = inp.eps_d * ledger.d.m_for(ju, jpu) * d_star[[j, j]] - d_star[[j, jp]];
            let sl = inp.eps_l * ledger.l.m_for(ju, jpu) * l_star[[j, j]] - l_star[[j, jp]];
            sep = sep.min(sd).min(sl);
        }
    }

    let steps = state.t as i32;
    let rate_w = 1.0 - inp.eta * ledger.d_bar * ledger.gamma;
    let rate_v = 1.0 - inp.eta * ledger.l_bar * ledger.gamma;
    let bound_w = rate_w.powi(steps) * inp.theta0.sin();
    let wu = state
        .theta_u()
        .iter()
        .map(|t| bound_w - t.sin())
        .fold(f64::INFINITY, f64::min);

    let shrink = rate_v.powi(steps);
    let mut vc = f64::INFINITY;
    for j in 0..n {
        let slack = if j < m {
            let dv = &state.v.row(j) - &state.v_star.row(j);
            shrink * inp.b_dv - norm(dv.view())
        } else {
            shrink * inp.b_v - norm(state.v.row(j))
        };
        vc = vc.min(slack);
    }

    let drift = &state.w - &state.w0;
    let wr = drift
        .axis_iter(Axis(1))
        .skip(m)
        .map(|c| ledger.d.c_r - norm(c))
        .fold(f64::INFINITY, f64::min);

    Ok(HypothesisMonitor {
        t: state.t + 1,
        w_separation_ok: sep >= 0.0,
        wu_contraction_ok: wu >= 0.0,
        v_contraction_ok: vc >= 0.0,
        wr_bound_ok: wr >= 0.0,
        w_separation_slack: sep,
        wu_contraction_slack: wu,
        v_contraction_slack: vc,
        wr_bound_slack: wr,
    })
}
