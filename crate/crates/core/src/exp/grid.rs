use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::{ExperimentConfig, RunMode, Thm5Config};
use super::report::{Plot, RunLog, SummaryRow, Table};
use crate::beta::lipschitz_probe;
use crate::dynamics::{
    init_two_layer, monitor_hypotheses, quadratic_falloff_probe, reduce_teacher, step_two_layer, thm5_constants,
    ConstantLedger, HypothesisMonitor, InputModel, Thm5Inputs, TwoLayerState, WhiteInput,
};
use crate::error::Result;
use crate::linalg::row_norms;
use crate::rng::{derive_seed, rng_for};
use crate::teacher::{make_teacher, Sampler, TeacherSpec};

/// One grid cell: an over-parameterization factor and the two proximity
/// factors of the initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub overparam: usize,
    pub p_w: f64,
    pub p_v: f64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("k{}_pw{}_pv{}", self.overparam, self.p_w, self.p_v)
    }
}

pub fn grid_cells(cfg: &Thm5Config) -> Vec<Cell> {
    cfg.overparam
        .iter()
        .flat_map(|&k| {
            cfg.proximity
                .iter()
                .map(move |&(p_w, p_v)| Cell { overparam: k, p_w, p_v })
        })
        .collect()
}

/// Initial reduced state and its input stream for one cell and seed.
pub fn thm5_initial(cfg: &ExperimentConfig, cell: Cell, seed: u64) -> Result<(TwoLayerState, WhiteInput)> {
    let t = &cfg.thm5;
    let seeds = cfg.run_seeds(seed);
    let teacher = make_teacher(&TeacherSpec {
        seed: seeds.teacher,
        ..TeacherSpec::new(vec![t.input_dim, t.hidden], t.outputs, 0)
    })?;
    let (w_star, v_star) = reduce_teacher(&teacher)?;
    let mut rng = rng_for(seeds.student, "thm5-init");
    let state = init_two_layer(w_star, v_star, cell.overparam, cell.p_w, cell.p_v, &mut rng)?;
    let input = WhiteInput::new(t.input_dim + 1, InputModel::Affine, seeds.stream)?;
    Ok((state, input))
}

fn step_gate(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn worst_overlap(m: &Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            if a != b {
                worst = worst.max(m[[a, b]] / m[[a, a]].min(m[[b, b]]));
            }
        }
    }
    worst
}

/// Ledger for a cell, measured on its initial state, or the reason it
/// cannot be formed.
#[derive(Debug, Clone, Serialize)]
pub struct CellLedger {
    pub inputs: Option<Thm5Inputs>,
    pub ledger: Option<ConstantLedger>,
    pub reason: Option<String>,
}

/// Estimate every ledger input on the initial state: teacher overlaps,
/// Lipschitz constants in a cap of radius `theta0` around each teacher node,
/// the fall-off constant, the norm bounds and the initial diagonals.
pub fn measure_ledger(state: &TwoLayerState, t: &Thm5Config, seed: u64) -> Result<CellLedger> {
    let theta0 = state.theta_u().iter().copied().fold(0.0, f64::max);
    if !(theta0 > 0.0 && theta0 < std::f64::consts::FRAC_PI_2) {
        return Ok(CellLedger {
            inputs: None,
            ledger: None,
            reason: Some(format!("initial u-set angle {theta0:.4} outside (0, pi/2)")),
        });
    }
    let m = state.m();
    let dim = state.w.nrows();
    let mut input = WhiteInput::new(dim, InputModel::Affine, derive_seed(seed, "ledger"))?;
    let n = t.ledger_samples;
    let x = input.next_batch(n);
    let nf = n as f64;
    let zs = x.dot(&state.w_star);
    let zu = x.dot(&state.w.slice(s![.., ..m]));
    let (gs, fs) = (step_gate(&zs), zs.mapv(|v| v.max(0.0)));
    let (gu, fu) = (step_gate(&zu), zu.mapv(|v| v.max(0.0)));
    let d_ss = gs.t().dot(&gs) / nf;
    let l_ss = fs.t().dot(&fs) / nf;
    let d_min = (0..m)
        .map(|j| gu.column(j).dot(&gs.column(j)) / nf)
        .fold(f64::INFINITY, f64::min);
    let l_min = (0..m)
        .map(|j| fu.column(j).dot(&fs.column(j)) / nf)
        .fold(f64::INFINITY, f64::min);
    let mut rng = rng_for(seed, "ledger-probe");
    let (mut k_d, mut k_l, mut c0): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for j in 0..m {
        let w = state.w_star.column(j).to_owned();
        let lip = lipschitz_probe(&w, &mut input, n, 4, &[0.05], Some(theta0), &mut rng)?;
        k_d = k_d.max(lip.k_d);
        k_l = k_l.max(lip.k_l);
        let fall = quadratic_falloff_probe(&w, &[0.05, 0.1, 0.2], &mut input, n, &mut rng)?;
        c0 = c0.max(fall.c0_hat);
    }
    let v_u = state.v.slice(s![..m, ..]);
    let b_dv = row_norms(&(&v_u - &state.v_star)).iter().copied().fold(0.0, f64::max);
    let inputs = Thm5Inputs {
        k_d,
        k_l,
        theta0,
        eps_d: worst_overlap(&d_ss),
        eps_l: worst_overlap(&l_ss),
        b_v: row_norms(&state.v_star).iter().copied().fold(0.0, f64::max),
        b_dv,
        m,
        n: state.n(),
        c0,
        eta: t.eta,
        d_min,
        l_min,
    };
    let ledger = thm5_constants(&inputs)?;
    Ok(CellLedger {
        inputs: Some(inputs),
        ledger: Some(ledger),
        reason: None,
    })
}

/// Recorded point of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajPoint {
    pub t: usize,
    pub separation: f64,
    pub u_min: f64,
    pub u_mean: f64,
    pub r_max: f64,
    pub r_mean: f64,
    pub loss: f64,
    pub theta_max: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    pub points: Vec<TrajPoint>,
    pub monitors: Vec<HypothesisMonitor>,
    /// Set when a step failed; the trajectory stops there.
    pub error: Option<String>,
}

impl Trajectory {
    pub fn first_separation(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |p| p.separation)
    }

    pub fn final_separation(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.separation)
    }
}

fn point(state: &TwoLayerState, loss: f64) -> TrajPoint {
    let norms = state.v_norms();
    let m = state.m();
    let (u, r) = (norms.slice(s![..m]), norms.slice(s![m..]));
    let mean = |v: ndarray::ArrayView1<f64>| if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 };
    TrajPoint {
        t: state.t,
        separation: state.separation(),
        u_min: u.iter().copied().fold(f64::INFINITY, f64::min),
        u_mean: mean(u),
        r_max: r.iter().copied().fold(0.0, f64::max),
        r_mean: mean(r),
        loss,
        theta_max: state.theta_u().iter().copied().fold(0.0, f64::max),
    }
}

/// Run one trajectory, recording a point (and, with a ledger, the
/// hypothesis monitors) every `cadence` iterations and at the end.
pub fn run_trajectory(
    cfg: &ExperimentConfig,
    cell: Cell,
    seed: u64,
    ledger: Option<&ConstantLedger>,
) -> Result<Trajectory> {
    let t = &cfg.thm5;
    let (mut state, mut input) = thm5_initial(cfg, cell, seed)?;
    let mut monitor_input = WhiteInput::new(state.w.nrows(), InputModel::Affine, derive_seed(seed, "monitor"))?;
    let mut traj = Trajectory {
        seed,
        points: Vec::new(),
        monitors: Vec::new(),
        error: None,
    };
    let mut record = |state: &TwoLayerState, loss: f64, traj: &mut Trajectory| -> Result<()> {
        traj.points.push(point(state, loss));
        if let Some(l) = ledger {
            traj.monitors
                .push(monitor_hypotheses(state, l, &mut monitor_input, t.samples_per_step)?);
        }
        Ok(())
    };
    let mut last_loss = f64::NAN;
    record(&state, last_loss, &mut traj)?;
    for it in 1..=t.iterations {
        match step_two_layer(&mut state, &mut input, t.samples_per_step, t.eta, true) {
            Ok(step) => last_loss = step.loss,
            Err(e) => {
                traj.error = Some(e.to_string());
                break;
            }
        }
        if it % t.cadence == 0 || it == t.iterations {
            record(&state, last_loss, &mut traj)?;
        }
    }
    Ok(traj)
}

/// All seeds of one cell plus its ledger.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: Cell,
    pub ledger: CellLedger,
    /// `guaranteed` when the ledger is feasible and the run mode allows it.
    pub regime: &'static str,
    pub trajectories: Vec<Trajectory>,
}

pub fn run_cell(cfg: &ExperimentConfig, cell: Cell) -> Result<CellRun> {
    let first = cfg.seeds[0];
    let (state, _) = thm5_initial(cfg, cell, first)?;
    let ledger = measure_ledger(&state, &cfg.thm5, first)?;
    let feasible = ledger.ledger.as_ref().is_some_and(|l| l.feasible);
    let regime = if feasible && cfg.mode == RunMode::Guaranteed {
        "guaranteed"
    } else {
        "free-run"
    };
    let trajectories = cfg
        .seeds
        .par_iter()
        .map(|&s| run_trajectory(cfg, cell, s, ledger.ledger.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellRun {
        cell,
        ledger,
        regime,
        trajectories,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-iteration mean and std across seeds of the u-set and r-set norms.
pub fn cell_table(run: &CellRun) -> Table {
    let mut t = Table::new(
        &format!("thm5_{}", run.cell.label()),
        &[
            "t",
            "u_mean",
            "u_std",
            "u_min_mean",
            "r_mean",
            "r_std",
            "r_max_mean",
            "sep_mean",
            "sep_std",
            "seeds",
        ],
    );
    let len = run.trajectories.iter().map(|x| x.points.len()).max().unwrap_or(0);
    for k in 0..len {
        let pts: Vec<&TrajPoint> = run.trajectories.iter().filter_map(|x| x.points.get(k)).collect();
        let col = |f: fn(&TrajPoint) -> f64| pts.iter().map(|p| f(p)).collect::<Vec<_>>();
        let (um, us) = mean_std(&col(|p| p.u_mean));
        let (rm, rs) = mean_std(&col(|p| p.r_mean));
        let (sm, ss) = mean_std(&col(|p| p.separation));
        let (umin, _) = mean_std(&col(|p| p.u_min));
        let (rmax, _) = mean_std(&col(|p| p.r_max));
        t.push(
            [pts[0].t as f64, um, us, umin, rm, rs, rmax, sm, ss, pts.len() as f64]
                .iter()
                .map(|v| v.to_string())
                .collect(),
        );
    }
    t
}

fn cell_plot(run: &CellRun, table: &Table) -> Plot {
    let get = |name: &str| table.column(name).expect("known column");
    let series = |label: &str, f: &dyn Fn(&[String]) -> f64| {
        let pts = table
            .rows
            .iter()
            .map(|r| (r[0].parse::<f64>().unwrap_or(f64::NAN), f(r)))
            .collect();
        (label.to_string(), pts)
    };
    let num = |r: &[String], c: usize| r[c].parse::<f64>().unwrap_or(f64::NAN);
    let (um, us, rm, rs) = (get("u_mean"), get("u_std"), get("r_mean"), get("r_std"));
    Plot {
        name: format!("thm5_{}", run.cell.label()),
        title: format!(
            "|v_j| rows, overparam {}, p_W {}, p_V {} ({})",
            run.cell.overparam, run.cell.p_w, run.cell.p_v, run.regime
        ),
        x_label: "iteration".into(),
        y_label: "row norm (mean +- std over seeds)".into(),
        series: vec![
            series("u-set mean", &|r| num(r, um)),
            series("u-set +std", &|r| num(r, um) + num(r, us)),
            series("u-set -std", &|r| num(r, um) - num(r, us)),
            series("r-set mean", &|r| num(r, rm)),
            series("r-set +std", &|r| num(r, rm) + num(r, rs)),
            series("r-set -std", &|r| num(r, rm) - num(r, rs)),
        ],
    }
}

/// The two-layer verification grid.
pub fn run_thm5_grid(cfg: &ExperimentConfig) -> Result<RunLog> {
    let mut log = RunLog::new(cfg);
    let runs = grid_cells(&cfg.thm5)
        .into_iter()
        .map(|c| run_cell(cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let mut seeds_table = Table::new(
        "thm5_seeds",
        &[
            "cell",
            "seed",
            "sep_initial",
            "sep_final",
            "first_below_0.2",
            "theta_final",
            "error",
        ],
    );
    let mut monitors = Table::new(
        "thm5_monitors",
        &[
            "cell",
            "seed",
            "t",
            "w_separation_ok",
            "wu_contraction_ok",
            "v_contraction_ok",
            "wr_bound_ok",
            "w_separation_slack",
            "wu_contraction_slack",
            "v_contraction_slack",
            "wr_bound_slack",
        ],
    );
    let mut ledgers = serde_json::Map::new();
    for run in &runs {
        let label = run.cell.label();
        for tr in &run.trajectories {
            for p in &tr.points {
                log.summary.push(SummaryRow {
                    variant: label.clone(),
                    seed: tr.seed,
                    epoch: p.t,
                    layer: None,
                    rho_bar: None,
                    r_mean: None,
                    loss: p.loss.is_finite().then_some(p.loss),
                });
            }
            let below = tr.points.iter().find(|p| p.separation < 0.2).map(|p| p.t.to_string());
            seeds_table.push(vec![
                label.clone(),
                tr.seed.to_string(),
                tr.first_separation().to_string(),
                tr.final_separation().to_string(),
                below.unwrap_or_default(),
                tr.points.last().map_or(f64::NAN, |p| p.theta_max).to_string(),
                tr.error.clone().unwrap_or_default(),
            ]);
            for mo in &tr.monitors {
                monitors.push(vec![
                    label.clone(),
                    tr.seed.to_string(),
                    mo.t.to_string(),
                    mo.w_separation_ok.to_string(),
                    mo.wu_contraction_ok.to_string(),
                    mo.v_contraction_ok.to_string(),
                    mo.wr_bound_ok.to_string(),
                    mo.w_separation_slack.to_string(),
                    mo.wu_contraction_slack.to_string(),
                    mo.v_contraction_slack.to_string(),
                    mo.wr_bound_slack.to_string(),
                ]);
            }
        }
        let table = cell_table(run);
        log.plots.push(cell_plot(run, &table));
        log.tables.push(table);
        ledgers.insert(
            label,
            json!({"regime": run.regime, "cell": run.cell, "ledger": run.ledger}),
        );
    }
    log.tables.push(seeds_table);
    log.tables.push(monitors);
    log.meta.insert("ledgers".into(), serde_json::Value::Object(ledgers));
    Ok(log)
}
