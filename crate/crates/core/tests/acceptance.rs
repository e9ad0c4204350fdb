//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any of them fails.
//!
//! Run a subset with `cargo test -p tsrelu-core --test acceptance -- 3 12`.

use std::f64::consts::FRAC_PI_2;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rayon::prelude::*;

use tsrelu::beta::{lipschitz_probe, psi_d};
use tsrelu::dynamics::{
    corner_teacher, step_single, thm4_constants, thm5_constants, InputModel, SingleLayerState, Thm4Ledger, Thm5Inputs,
    WhiteInput,
};
use tsrelu::exp::{
    identity_trial, lottery_seed, psi_comparisons, run, run_cell, run_falloff, train_seed, Cell, ExperimentConfig,
    ExperimentKind, TrainRun,
};
use tsrelu::linalg::gaussian_matrix;
use tsrelu::net::{backward, bn_backward, bn_forward, filter_norms, forward, loss, sgd_step, GradientSet};
use tsrelu::rng::{rng_for, Rng};
use tsrelu::{BnMode, BnParams, Network, NetworkSpec, StreamMode, TeacherSpec};

type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------- 1

fn identity_exactness() -> Outcome {
    let mut rng = rng_for(2024, "acceptance-identity");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        match identity_trial(&mut rng) {
            Ok(t) => worst = worst.max(t.relative()),
            Err(e) => return outcome(false, format!("trial failed: {e}")),
        }
    }
    outcome(
        worst < 1e-10,
        format!("worst residual / max gradient {worst:.2e} over 50 triples"),
    )
}

// ---------------------------------------------------------------- 2

/// Every trainable scalar of a network, addressed by layer and slot.
#[derive(Clone, Copy)]
enum Slot {
    W(usize, usize),
    B(usize),
    C0(usize),
    C1(usize),
}

fn param_mut(net: &mut Network, layer: usize, slot: Slot) -> &mut f64 {
    let l = &mut net.layers[layer];
    match slot {
        Slot::W(i, j) => &mut l.w[[i, j]],
        Slot::B(j) => &mut l.b.as_mut().unwrap()[j],
        Slot::C0(j) => &mut l.bn.as_mut().unwrap().c0[j],
        Slot::C1(j) => &mut l.bn.as_mut().unwrap().c1[j],
    }
}

fn analytic(g: &GradientSet, layer: usize, slot: Slot) -> f64 {
    let l = &g.layers[layer];
    // stored gradients are descent directions
    -match slot {
        Slot::W(i, j) => l.w[[i, j]],
        Slot::B(j) => l.b.as_ref().unwrap()[j],
        Slot::C0(j) => l.bn.as_ref().unwrap().c0[j],
        Slot::C1(j) => l.bn.as_ref().unwrap().c1[j],
    }
}

fn slots(net: &Network) -> Vec<(usize, Slot)> {
    let mut out = Vec::new();
    for (li, l) in net.layers.iter().enumerate() {
        let (rows, cols) = l.w.dim();
        for i in 0..rows {
            for j in 0..cols {
                out.push((li, Slot::W(i, j)));
            }
        }
        for j in 0..cols {
            if l.b.is_some() {
                out.push((li, Slot::B(j)));
            }
            if l.bn.is_some() {
                out.push((li, Slot::C0(j)));
                out.push((li, Slot::C1(j)));
            }
        }
    }
    out
}

fn random_bn(net: &mut Network, rng: &mut Rng) {
    for l in &mut net.layers {
        if let Some(p) = &mut l.bn {
            let w = p.c0.len();
            *p = BnParams {
                c0: Array1::from_shape_fn(w, |_| rng.random_range(0.5..2.0)),
                c1: Array1::from_shape_fn(w, |_| rng.random_range(-0.5..0.5)),
            };
        }
    }
}

fn min_abs_relu_input(net: &Network, x: &Array2<f64>) -> f64 {
    let trace = forward(net, x).unwrap();
    (0..net.depth() - 1)
        .flat_map(|l| trace.relu_input(l).iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

fn finite_difference_net(bn_mode: BnMode, rng: &mut Rng) -> Result<f64, String> {
    const H: f64 = 1e-4;
    let depth = rng.random_range(2..=3usize);
    let mut widths = vec![rng.random_range(3..=6usize)];
    for _ in 0..depth {
        widths.push(rng.random_range(3..=7usize));
    }
    let spec = NetworkSpec::mlp(widths.clone(), bn_mode, true).map_err(|e| e.to_string())?;
    let mut net = Network::random(spec, false, rng).map_err(|e| e.to_string())?;
    random_bn(&mut net, rng);
    for l in &mut net.layers {
        if let Some(b) = &mut l.b {
            b.mapv_inplace(|_| 0.3 * rng.random_range(-1.0..1.0));
        }
    }
    let batch = 8;
    // keep every ReLU input away from the kink so the central difference
    // never straddles it
    let mut x = gaussian_matrix(batch, widths[0], 1.0, rng);
    let mut tries = 0;
    while min_abs_relu_input(&net, &x) < 1e-3 {
        tries += 1;
        if tries > 1000 {
            return Err("could not draw a kink-free batch".into());
        }
        x = gaussian_matrix(batch, widths[0], 1.0, rng);
    }
    let y = gaussian_matrix(batch, *widths.last().unwrap(), 1.0, rng);
    let trace = forward(&net, &x).map_err(|e| e.to_string())?;
    let grads = backward(&net, &trace, &y).map_err(|e| e.to_string())?;
    let eval = |n: &Network| loss(&forward(n, &x).unwrap(), &y).unwrap();
    let (mut max_err, mut max_grad): (f64, f64) = (0.0, 0.0);
    for (layer, slot) in slots(&net) {
        let mut plus = net.clone();
        *param_mut(&mut plus, layer, slot) += H;
        let mut minus = net.clone();
        *param_mut(&mut minus, layer, slot) -= H;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
        let an = analytic(&grads, layer, slot);
        max_err = max_err.max((fd - an).abs());
        max_grad = max_grad.max(an.abs());
    }
    Ok(max_err / max_grad)
}

fn gradient_oracle() -> Outcome {
    let mut rng = rng_for(7, "acceptance-fd");
    let mut worst = [0.0f64; 3];
    for (k, mode) in [BnMode::None, BnMode::LinearBnRelu, BnMode::LinearReluBn]
        .into_iter()
        .enumerate()
    {
        // ten plain nets, and ten with BN split across the two placements
        let count = if mode == BnMode::None { 10 } else { 5 };
        for _ in 0..count {
            match finite_difference_net(mode, &mut rng) {
                Ok(e) => worst[k] = worst[k].max(e),
                Err(e) => return outcome(false, format!("{mode:?}: {e}")),
            }
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        max < 1e-5,
        format!(
            "worst relative error: plain {:.1e}, linear-bn-relu {:.1e}, linear-relu-bn {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Largest relative change of a hidden-layer filter norm over 1000 SGD steps.
fn norm_drift(bn_mode: BnMode, filter_scale: f64) -> Result<f64, String> {
    let mut rng = rng_for(1, "acceptance-conservation");
    let err = |e: tsrelu::Error| e.to_string();
    let teacher = Network::random(
        NetworkSpec::mlp(vec![10, 8, 6, 4], BnMode::None, false).map_err(err)?,
        false,
        &mut rng,
    )
    .map_err(err)?;
    let spec = NetworkSpec::mlp(vec![10, 16, 12, 4], bn_mode, false).map_err(err)?;
    let mut student = Network::random(spec, true, &mut rng).map_err(err)?;
    let hidden = student.depth() - 1;
    for l in 0..hidden {
        student.layers[l].w *= filter_scale;
    }
    let before = filter_norms(&student);
    for _ in 0..1000 {
        let x = gaussian_matrix(64, 10, 1.0, &mut rng);
        let y = forward(&teacher, &x).map_err(err)?.output().clone();
        let trace = forward(&student, &x).map_err(err)?;
        let g = backward(&student, &trace, &y).map_err(err)?;
        student = sgd_step(&student, &g, 0.01).map_err(err)?;
    }
    let after = filter_norms(&student);
    let mut worst: f64 = 0.0;
    for l in 0..hidden {
        for (a, b) in before[l].iter().zip(&after[l]) {
            worst = worst.max((a - b).abs() / a);
        }
    }
    Ok(worst)
}

fn bn_conservation() -> Outcome {
    // The discrete step grows each norm by eta^2 |g|^2 / 2 per step, and |g|
    // scales like 1 / |w| under BN, so filters start at norm 10.
    let runs = [
        ("linear-bn-relu", norm_drift(BnMode::LinearBnRelu, 10.0)),
        ("linear-relu-bn", norm_drift(BnMode::LinearReluBn, 10.0)),
        ("no-bn control", norm_drift(BnMode::None, 1.0)),
    ];
    let mut parts = Vec::new();
    let mut passed = true;
    for (i, (name, r)) in runs.iter().enumerate() {
        match r {
            Ok(d) => {
                passed &= if i < 2 { *d < 1e-6 } else { *d > 1e-3 };
                parts.push(format!("{name} {d:.2e}"));
            }
            Err(e) => {
                passed = false;
                parts.push(format!("{name} failed: {e}"));
            }
        }
    }
    outcome(passed, format!("relative filter-norm drift: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 4

fn bn_projection() -> Outcome {
    let mut rng = rng_for(3, "acceptance-bn-sites");
    let (mut worst_mean, mut worst_corr): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let batch = rng.random_range(2..=64usize);
        let width = rng.random_range(1..=20usize);
        let offset = rng.random_range(-5.0..5.0);
        let spread = rng.random_range(0.1..10.0);
        let f = gaussian_matrix(batch, width, spread, &mut rng) + offset;
        let params = BnParams {
            c0: Array1::from_shape_fn(width, |_| rng.random_range(-3.0..3.0)),
            c1: Array1::from_shape_fn(width, |_| rng.random_range(-3.0..3.0)),
        };
        let site = match bn_forward(&f, &params) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("forward failed: {e}")),
        };
        let g_out = gaussian_matrix(batch, width, 1.0, &mut rng);
        let (g_in, _, _) = match bn_backward(&g_out, &site, &params.c0) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("backward failed: {e}")),
        };
        let centered = &f - &f.mean_axis(Axis(0)).unwrap();
        for j in 0..width {
            let g = g_in.column(j);
            // measured against the size of the gradient coming in, since the
            // projected one can vanish entirely (a batch of two, say)
            let go = g_out.column(j);
            let scale = go.dot(&go).sqrt() * (params.c0[j] / site.std[j]).abs();
            if scale == 0.0 {
                continue;
            }
            let fc = centered.column(j);
            let mean = g.sum().abs() / (batch as f64).sqrt() / scale;
            let corr = g.dot(&f.column(j)).abs() / (scale * fc.dot(&fc).sqrt());
            worst_mean = worst_mean.max(mean);
            worst_corr = worst_corr.max(corr);
        }
    }
    outcome(
        worst_mean < 1e-10 && worst_corr < 1e-10,
        format!("worst relative batch mean {worst_mean:.1e}, worst correlation with f {worst_corr:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn psi_oracle() -> Outcome {
    let comps = match psi_comparisons(20, 1_000_000, 1) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let checked: Vec<_> = comps.iter().filter(|c| c.quantity == "psi_d").collect();
    let worst = checked.iter().map(|c| c.z()).fold(0.0, f64::max);
    let parts: Vec<String> = checked
        .iter()
        .map(|c| format!("{:.3}: {:.2}", c.angle, c.z()))
        .collect();
    outcome(
        checked.len() == 3 && worst <= 3.0,
        format!("psi_d gaps in combined stderr at angle {}", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 6

fn single_layer_contraction() -> Outcome {
    const D: usize = 20;
    const M: usize = 10;
    const THETA0: f64 = 0.2;
    const ETA: f64 = 10.0;
    let mut rng = rng_for(7, "calib");
    let mut input = match WhiteInput::new(D, InputModel::Affine, 11) {
        Ok(i) => i,
        Err(e) => return outcome(false, e.to_string()),
    };
    let prepared = (|| -> tsrelu::Result<(SingleLayerState, Thm4Ledger)> {
        let ws = corner_teacher(D, M, 2.5, &mut rng)?;
        let mut eps: f64 = 0.0;
        for a in 0..M {
            let wa = ws.column(a).to_owned();
            let diag = psi_d(&wa, &wa, &mut input, 1_000_000)?.mean;
            for b in a + 1..M {
                let e = psi_d(&wa, &ws.column(b).to_owned(), &mut input, 1_000_000)?;
                eps = eps.max(e.mean / diag);
            }
        }
        let lip = lipschitz_probe(
            &ws.column(0).to_owned(),
            &mut input,
            1_000_000,
            8,
            &[0.05],
            Some(THETA0),
            &mut rng,
        )?;
        let state = SingleLayerState::at_angle(ws.clone(), THETA0, &mut rng)?;
        let mut d_min = f64::INFINITY;
        for j in 0..M {
            let e = psi_d(
                &state.w.column(j).to_owned(),
                &ws.column(j).to_owned(),
                &mut input,
                400_000,
            )?;
            d_min = d_min.min(e.mean);
        }
        Ok((state, thm4_constants(THETA0, M, eps, lip.k_d, d_min, ETA)?))
    })();
    let (mut state, ledger) = match prepared {
        Ok(p) => p,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut within = 0;
    for _ in 0..500 {
        match step_single(&mut state, &mut input, 100_000, ETA) {
            Ok(step) => within += usize::from(step.within(ledger.rate, 3.0)),
            Err(e) => return outcome(false, format!("step failed: {e}")),
        }
    }
    let final_sin = state.max_sin();
    outcome(
        ledger.gamma > 0.0 && within >= 475 && final_sin < 0.02,
        format!(
            "eps {:.4}, K {:.3}, gamma {:.4}, rate {:.5}; {within}/500 steps within bound, final max sin {final_sin:.2e}",
            ledger.eps_d, ledger.k_d, ledger.gamma, ledger.rate
        ),
    )
}

// ---------------------------------------------------------------- 7

fn two_layer_grid() -> Outcome {
    let mut cfg = ExperimentConfig::for_kind(ExperimentKind::Thm5Grid);
    cfg.seeds = (1..=32).collect();
    cfg.thm5.iterations = 1000;
    cfg.thm5.cadence = 50;
    let high = Cell {
        overparam: 5,
        p_w: 10.0,
        p_v: 1.0,
    };
    let low = Cell {
        overparam: 5,
        p_w: 0.3,
        p_v: 1.0,
    };
    let (high_run, low_run) = match (run_cell(&cfg, high), run_cell(&cfg, low)) {
        (Ok(h), Ok(l)) => (h, l),
        (Err(e), _) | (_, Err(e)) => return outcome(false, e.to_string()),
    };
    let separated = high_run
        .trajectories
        .iter()
        .filter(|t| t.error.is_none() && t.final_separation() < 0.2)
        .count();
    let mean = |f: &dyn Fn(&tsrelu::exp::Trajectory) -> f64| {
        low_run.trajectories.iter().map(f).sum::<f64>() / low_run.trajectories.len() as f64
    };
    let (gap0, gap_t) = (mean(&|t| t.first_separation()), mean(&|t| t.final_separation()));
    let improvement = gap0 / gap_t;
    outcome(
        separated >= 29 && improvement < 2.0,
        format!(
            "high cell: {separated}/32 seeds below 0.2; low cell: mean gap {gap0:.3} -> {gap_t:.3}, improvement {improvement:.2}x"
        ),
    )
}

// ---------------------------------------------------------------- 8, 9, 11

struct SmallTeacherRuns {
    infinite: Vec<TrainRun>,
    finite: Vec<TrainRun>,
    /// `(reset, reinit)` final losses per seed.
    lottery: Vec<(f64, f64)>,
}

fn small_teacher_runs() -> Result<SmallTeacherRuns, String> {
    let mut cfg = ExperimentConfig::for_kind(ExperimentKind::Lottery);
    cfg.epochs = 30;
    cfg.seeds = (1..=5).collect();
    let outcomes: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&s| lottery_seed(&cfg, s))
        .collect::<tsrelu::Result<_>>()
        .map_err(|e| e.to_string())?;
    let mut finite_cfg = cfg.clone();
    finite_cfg.kind = ExperimentKind::Train;
    finite_cfg.stream.mode = StreamMode::Finite(512);
    let finite = cfg
        .seeds
        .par_iter()
        .map(|&s| train_seed(&finite_cfg, s))
        .collect::<tsrelu::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let lottery = outcomes
        .iter()
        .map(|o| (o.reset.final_loss(), o.reinit.final_loss()))
        .collect();
    Ok(SmallTeacherRuns {
        infinite: outcomes.into_iter().map(|o| o.baseline).collect(),
        finite,
        lottery,
    })
}

fn rho_growth(runs: &SmallTeacherRuns) -> Outcome {
    let mut ok = true;
    let mut finals = Vec::new();
    for run in &runs.infinite {
        let layers = run.records[0].rho_bar.len();
        let last = run.records.len() - 1;
        ok &= run.diverged_at.is_none();
        for l in 0..layers {
            match (run.rho_bar_at(0, l), run.rho_bar_at(last, l)) {
                (Some(a), Some(b)) => ok &= b > a,
                _ => ok = false,
            }
        }
        let top = run.final_rho_bar(0).unwrap_or(f64::NAN);
        ok &= top >= 0.9;
        finals.push(format!("{top:.3}"));
    }
    outcome(
        ok,
        format!(
            "final layer-0 rho_bar per seed [{}], every layer grew: {ok}",
            finals.join(", ")
        ),
    )
}

fn finite_stall(runs: &SmallTeacherRuns) -> Outcome {
    let mut ok = true;
    let mut gaps = Vec::new();
    for (inf, fin) in runs.infinite.iter().zip(&runs.finite) {
        let gap = inf.final_rho_bar(0).unwrap_or(f64::NAN) - fin.final_rho_bar(0).unwrap_or(f64::NAN);
        ok &= gap >= 0.05;
        gaps.push(format!("{gap:.3}"));
    }
    outcome(
        ok,
        format!(
            "infinite minus finite(512) layer-0 rho_bar per seed [{}]",
            gaps.join(", ")
        ),
    )
}

fn lottery_direction(runs: &SmallTeacherRuns) -> Outcome {
    let wins = runs.lottery.iter().filter(|(reset, reinit)| reset < reinit).count();
    let pairs: Vec<String> = runs.lottery.iter().map(|(a, b)| format!("{a:.3e}/{b:.3e}")).collect();
    outcome(
        wins >= 4,
        format!(
            "reset beats reinit on {wins}/5 seeds (reset/reinit: {})",
            pairs.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn falloff() -> Outcome {
    let mut cfg = ExperimentConfig::for_kind(ExperimentKind::FalloffProbe);
    cfg.probe.input_dim = 20;
    cfg.probe.samples = 1_000_000;
    let log = match run_falloff(&cfg) {
        Ok(l) => l,
        Err(e) => return outcome(false, e.to_string()),
    };
    match log.checks.iter().find(|c| c.name == "falloff_exponent") {
        Some(c) => outcome(c.passed, c.detail.clone()),
        None => outcome(false, "no exponent check in the run log".into()),
    }
}

// ---------------------------------------------------------------- 12

/// Second implementation of the single-layer constants, written from the
/// formulas rather than from the library code.
fn thm4_oracle(theta0: f64, m: usize, eps: f64, k: f64, d_min: f64, eta: f64) -> (f64, f64, f64, f64) {
    let s = 1.0 + 2.0 * k * (theta0 / 2.0).sin();
    let m_d = (1.0 + k) * s.powi(2) / (theta0 / 2.0).cos();
    let gamma = theta0.cos() - eps * m_d * (m - 1) as f64;
    let d_bar = d_min * s;
    (m_d, d_bar, gamma, 1.0 - eta * d_bar * gamma)
}

#[derive(Debug)]
struct Thm5Oracle {
    kappa: f64,
    gamma_w: f64,
    gamma_v: f64,
    d_bar: f64,
    l_bar: f64,
    b_d: f64,
    b_l: f64,
    feasible: bool,
}

/// Aggregated cross bound `max(B_u, B_r)` of one family.
fn cross_bound(k: f64, c_u: f64, c_r: f64, theta0: f64, m: usize, n: usize) -> f64 {
    let ch = (theta0 / 2.0).cos();
    let (pu, pr) = (1.0 + c_u, 1.0 + c_r);
    let uu = (1.0 + k) * pu * pu / ch;
    let ur = (1.0 + k) * pu * pr;
    let ru = ur / ch;
    let rr = (1.0 + k) * pr * pr;
    let others = (n - m) as f64;
    let lucky = m as f64 - 1.0;
    (lucky * uu + others * ur).max(lucky * ru + others * rr)
}

fn thm5_oracle(x: &Thm5Inputs) -> Thm5Oracle {
    let sh = (x.theta0 / 2.0).sin();
    let (c_du, c_lu) = (2.0 * x.k_d * sh, 2.0 * x.k_l * sh);
    let kappa = 2.0 * x.c0 * sh * (1.0 + x.b_dv);
    let mut c_r = [0.0f64; 2];
    for round in 1..=100 {
        let b_d = cross_bound(x.k_d, c_du, c_r[0], x.theta0, x.m, x.n);
        let b_l = cross_bound(x.k_l, c_lu, c_r[1], x.theta0, x.m, x.n);
        let gamma_w = (x.b_v - x.b_dv) * x.theta0.cos() - x.eps_d * (x.b_v + x.b_dv) * b_d;
        let gamma_v = 1.0 - x.eps_l * b_l - kappa;
        let d_bar = x.d_min * (1.0 - x.k_d * c_du.max(c_r[0]));
        let l_bar = x.l_min * (1.0 - x.k_l * c_lu.max(c_r[1]));
        let snapshot = |feasible| Thm5Oracle {
            kappa,
            gamma_w,
            gamma_v,
            d_bar,
            l_bar,
            b_d,
            b_l,
            feasible,
        };
        let gamma = gamma_w.min(gamma_v);
        let lambda = d_bar.min(l_bar);
        let denom = lambda * gamma * (2.0 - x.eta * lambda * gamma);
        if gamma <= 0.0 || d_bar <= 0.0 || l_bar <= 0.0 || denom <= 0.0 {
            return snapshot(false);
        }
        let pull = (x.b_v + x.b_dv) * x.b_v / denom;
        let target = [x.eps_d * x.k_d * b_d * pull, x.eps_l * x.k_l * b_l * pull];
        let next = [(c_r[0] + target[0]) / 2.0, (c_r[1] + target[1]) / 2.0];
        let change = (next[0] - c_r[0]).abs().max((next[1] - c_r[1]).abs());
        c_r = next;
        if !change.is_finite() {
            return snapshot(false);
        }
        if change < 1e-10 {
            return snapshot(true);
        }
        if round == 100 {
            return snapshot(false);
        }
    }
    unreachable!()
}

fn ledger_arithmetic() -> Outcome {
    let mut rng = rng_for(12, "acceptance-ledger");
    let mut worst: f64 = 0.0;
    let mut mismatches = Vec::new();
    let mut feasible = [0usize; 2];
    for i in 0..100 {
        let theta0 = rng.random_range(0.01..FRAC_PI_2 - 0.01);
        let m = rng.random_range(1..=20usize);
        let (eps, k, d_min, eta) = (
            rng.random_range(0.0..0.1),
            rng.random_range(0.0..3.0),
            rng.random_range(0.01..0.5),
            rng.random_range(0.01..20.0),
        );
        match thm4_constants(theta0, m, eps, k, d_min, eta) {
            Ok(l) => {
                let (m_d, d_bar, gamma, rate) = thm4_oracle(theta0, m, eps, k, d_min, eta);
                for (a, b) in [(l.m_d, m_d), (l.d_bar, d_bar), (l.gamma, gamma), (l.rate, rate)] {
                    worst = worst.max(rel(a, b));
                }
                feasible[0] += usize::from(l.feasible);
                if l.feasible != (gamma > 0.0) {
                    mismatches.push(format!("thm4 tuple {i} feasibility"));
                }
            }
            Err(e) => mismatches.push(format!("thm4 tuple {i}: {e}")),
        }
        let inp = Thm5Inputs {
            k_d: rng.random_range(0.0..2.0),
            k_l: rng.random_range(0.0..2.0),
            theta0,
            eps_d: 10f64.powf(rng.random_range(-7.0..-2.0)),
            eps_l: 10f64.powf(rng.random_range(-7.0..-2.0)),
            b_v: rng.random_range(0.5..3.0),
            b_dv: rng.random_range(0.0..0.5),
            m,
            n: m + rng.random_range(0..=40usize),
            c0: rng.random_range(0.0..1.0),
            eta: rng.random_range(0.01..1.0),
            d_min: rng.random_range(0.05..0.5),
            l_min: rng.random_range(0.05..0.5),
        };
        match thm5_constants(&inp) {
            Ok(l) => {
                let o = thm5_oracle(&inp);
                for (a, b) in [
                    (l.kappa, o.kappa),
                    (l.gamma_w, o.gamma_w),
                    (l.gamma_v, o.gamma_v),
                    (l.d_bar, o.d_bar),
                    (l.l_bar, o.l_bar),
                    (l.d.b_max(), o.b_d),
                    (l.l.b_max(), o.b_l),
                ] {
                    worst = worst.max(rel(a, b));
                }
                feasible[1] += usize::from(l.feasible);
                if l.feasible != o.feasible {
                    mismatches.push(format!("thm5 tuple {i} feasibility"));
                }
            }
            Err(e) => mismatches.push(format!("thm5 tuple {i}: {e}")),
        }
    }

    // eps = K = 0 collapses both ledgers to closed forms
    let theta0 = 0.37;
    let single = thm4_constants(theta0, 7, 0.0, 0.0, 0.25, 0.5).unwrap();
    let closed4 = single.m_d == 1.0 / (theta0 / 2.0).cos()
        && single.d_bar == 0.25
        && single.gamma == theta0.cos()
        && single.rate == 1.0 - 0.5 * 0.25 * theta0.cos();
    let inp = Thm5Inputs {
        k_d: 0.0,
        k_l: 0.0,
        theta0,
        eps_d: 0.0,
        eps_l: 0.0,
        b_v: 1.25,
        b_dv: 0.2,
        m: 10,
        n: 50,
        c0: 0.4,
        eta: 0.1,
        d_min: 0.3,
        l_min: 0.2,
    };
    let two = thm5_constants(&inp).unwrap();
    let kappa = 2.0 * 0.4 * (theta0 / 2.0).sin() * (1.0 + 0.2);
    let closed5 = two.kappa == kappa
        && two.gamma_w == (1.25 - 0.2) * theta0.cos()
        && two.gamma_v == 1.0 - kappa
        && two.gamma == ((1.25 - 0.2) * theta0.cos()).min(1.0 - kappa)
        && two.d_bar == 0.3
        && two.l_bar == 0.2
        && two.feasible;
    if !closed4 {
        mismatches.push("single-layer closed form".into());
    }
    if !closed5 {
        mismatches.push("two-layer closed form".into());
    }
    outcome(
        worst <= 1e-12 && mismatches.is_empty(),
        format!(
            "worst relative disagreement {worst:.1e} over 100 tuples ({} and {} feasible); closed forms exact: {}{}",
            feasible[0],
            feasible[1],
            closed4 && closed5,
            if mismatches.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {}", mismatches.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------- 13

fn small_config(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_kind(kind);
    cfg.teacher = TeacherSpec::new(vec![6, 4, 4], 3, cfg.teacher.seed);
    cfg.student.overparam = 2;
    cfg.epochs = 2;
    cfg.batches_per_epoch = 4;
    cfg.batch_size = 16;
    cfg.validation_size = 64;
    cfg.seeds = vec![1, 2];
    cfg.thm5.overparam = vec![2];
    cfg.thm5.proximity = vec![(10.0, 1.0)];
    cfg.thm5.iterations = 20;
    cfg.thm5.cadence = 5;
    cfg.thm5.samples_per_step = 128;
    cfg.thm5.ledger_samples = 2000;
    cfg.probe.samples = 4000;
    cfg.probe.trials = 5;
    cfg.probe.audit_samples = 256;
    for v in &mut cfg.variants {
        if let Some(w) = &mut v.layer_widths {
            let grow = if w[1] > 10 { 2 } else { 1 };
            *w = vec![6, 4 * grow, 4 * grow];
        }
    }
    cfg
}

fn determinism() -> Outcome {
    let kinds = [
        ExperimentKind::VerifyThm1,
        ExperimentKind::Train,
        ExperimentKind::Thm5Grid,
        ExperimentKind::AblateSize,
        ExperimentKind::AblateOverparam,
        ExperimentKind::AblateFinite,
        ExperimentKind::Lottery,
        ExperimentKind::BnAudit,
        ExperimentKind::PsiCheck,
        ExperimentKind::FalloffProbe,
    ];
    let mut differing = Vec::new();
    for kind in kinds {
        let cfg = small_config(kind);
        let twice: Vec<_> = (0..2).map(|_| run(&cfg).map(|log| log.summary_csv())).collect();
        match (&twice[0], &twice[1]) {
            (Ok(a), Ok(b)) if a == b && a.lines().count() > 1 => {}
            (Ok(_), Ok(_)) => differing.push(format!("{kind:?}")),
            (Err(e), _) | (_, Err(e)) => differing.push(format!("{kind:?} ({e})")),
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} experiment kinds give byte-identical summary.csv on a rerun",
                kinds.len()
            )
        } else {
            format!("differing or failing: {}", differing.join(", "))
        },
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, start: Instant, o: Outcome| {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {n:>2} {name} ({:.1} s): {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        failures += usize::from(!o.passed);
    };

    let simple: [Criterion; 8] = [
        (1, "gradient decomposition is exact", identity_exactness),
        (2, "backprop matches finite differences", gradient_oracle),
        (3, "BN conserves pre-BN filter norms", bn_conservation),
        (4, "BN backward projects out mean and f", bn_projection),
        (5, "overlap estimator matches planar oracle", psi_oracle),
        (6, "single-layer contraction", single_layer_contraction),
        (7, "two-layer separation grid", two_layer_grid),
        (10, "quadratic fall-off exponent", falloff),
    ];
    for (n, name, f) in simple.iter().take(7) {
        if wanted(*n) {
            let start = Instant::now();
            report(*n, name, start, f());
        }
    }
    if wanted(8) || wanted(9) || wanted(11) {
        let start = Instant::now();
        match small_teacher_runs() {
            Ok(runs) => {
                println!(
                    "     small-teacher runs shared by 8, 9 and 11 took {:.1} s",
                    start.elapsed().as_secs_f64()
                );
                for (n, name, f) in [
                    (
                        8,
                        "rho_bar grows on infinite data",
                        rho_growth as fn(&SmallTeacherRuns) -> Outcome,
                    ),
                    (9, "finite data stalls rho_bar", finite_stall),
                    (11, "winners reset beats reinit", lottery_direction),
                ] {
                    if wanted(n) {
                        report(n, name, Instant::now(), f(&runs));
                    }
                }
            }
            Err(e) => {
                for n in [8, 9, 11] {
                    if wanted(n) {
                        report(n, "small-teacher runs", start, outcome(false, e.clone()));
                    }
                }
            }
        }
    }
    let (n, name, f) = simple[7];
    if wanted(n) {
        let start = Instant::now();
        report(n, name, start, f());
    }
    for (n, name, f) in [
        (
            12,
            "ledger arithmetic has a second implementation",
            ledger_arithmetic as fn() -> Outcome,
        ),
        (13, "reruns are byte-identical", determinism),
    ] {
        if wanted(n) {
            let start = Instant::now();
            report(n, name, start, f());
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
