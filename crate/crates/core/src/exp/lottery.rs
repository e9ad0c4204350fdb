use ndarray::Axis;
use rayon::prelude::*;
use serde_json::json;

use super::config::ExperimentConfig;
use super::report::{RunLog, Table};
use super::train::{build_pair, summary_rows, train, TrainRun, TrainSettings};
use crate::error::{Error, Result};
use crate::metrics::CorrelationMatrix;
use crate::net::{BnParams, Layer, Network, NetworkSpec};
use crate::rng::derive_seed;
use crate::teacher::{make_student, StudentInit};

/// Distinct students matched to teacher nodes by greedy assignment on `rho`:
/// pairs are taken in decreasing correlation (ties by teacher, then student
/// index) whenever neither side is matched yet.
///
/// Returns the kept student indices in ascending order and the number of
/// teacher nodes whose unconstrained best student was also the best for an
/// earlier teacher node.
pub fn greedy_winners(rho: &CorrelationMatrix) -> (Vec<usize>, usize) {
    let (n, m) = rho.rho.dim();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * m);
    for t in 0..m {
        for j in 0..n {
            if let Some(r) = rho.get(j, t) {
                pairs.push((r, t, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut student_used, mut teacher_done) = (vec![false; n], vec![false; m]);
    let mut kept = Vec::new();
    for (_, t, j) in pairs {
        if !student_used[j] && !teacher_done[t] {
            student_used[j] = true;
            teacher_done[t] = true;
            kept.push(j);
        }
    }
    kept.sort_unstable();
    let mut seen = Vec::new();
    let mut shared = 0;
    for t in 0..m {
        if let Some(w) = rho.winner(t) {
            if seen.contains(&w) {
                shared += 1;
            }
            seen.push(w);
        }
    }
    (kept, shared)
}

/// Keep only the listed nodes of every hidden layer: their fan-in columns,
/// biases and BN parameters, and their fan-out rows.
pub fn prune(net: &Network, keep: &[Vec<usize>]) -> Result<Network> {
    let depth = net.depth();
    if keep.len() != depth - 1 {
        return Err(Error::pre(format!("need a mask per hidden layer, got {}", keep.len())));
    }
    let mut widths = net.spec.widths.clone();
    for (l, k) in keep.iter().enumerate() {
        if k.is_empty() || k.iter().any(|&j| j >= widths[l + 1]) {
            return Err(Error::pre(format!("mask of layer {l} is empty or out of range")));
        }
        widths[l + 1] = k.len();
    }
    let mut spec = NetworkSpec::mlp(widths, net.spec.bn_mode, false)?;
    spec.has_bias = net.spec.has_bias.clone();
    let layers = (0..depth)
        .map(|l| {
            let src = &net.layers[l];
            let mut w = src.w.clone();
            if l > 0 {
                w = w.select(Axis(0), &keep[l - 1]);
            }
            let out = keep.get(l);
            if let Some(k) = out {
                w = w.select(Axis(1), k);
            }
            let pick = |v: &ndarray::Array1<f64>| out.map_or_else(|| v.clone(), |k| v.select(Axis(0), k));
            Layer {
                w,
                b: src.b.as_ref().map(pick),
                bn: src.bn.as_ref().map(|p| BnParams {
                    c0: pick(&p.c0),
                    c1: pick(&p.c1),
                }),
            }
        })
        .collect();
    Network::from_layers(spec, layers)
}

/// Final outcome of the three arms for one seed.
#[derive(Debug, Clone)]
pub struct LotteryOutcome {
    pub seed: u64,
    pub baseline: TrainRun,
    pub reset: TrainRun,
    pub reinit: TrainRun,
    pub kept: Vec<Vec<usize>>,
    pub shared_winners: usize,
}

pub fn lottery_seed(cfg: &ExperimentConfig, seed: u64) -> Result<LotteryOutcome> {
    let settings = TrainSettings::from(cfg);
    let stream = cfg.stream_spec();
    let (teacher, student, seeds) = build_pair(cfg, seed)?;
    let baseline = train(&teacher, student, &stream, seeds, &settings, seed)?;
    let (mut kept, mut shared_winners) = (Vec::new(), 0);
    for rho in &baseline.final_rho {
        let (k, s) = greedy_winners(rho);
        kept.push(k);
        shared_winners += s;
    }
    let reset_net = prune(&baseline.init, &kept)?;
    let fresh = make_student(
        &teacher,
        &StudentInit {
            seed: derive_seed(seeds.student, "reinit"),
            ..cfg.student.clone()
        },
    )?;
    let reinit_net = prune(&fresh, &kept)?;
    let reset = train(&teacher, reset_net, &stream, seeds, &settings, seed)?;
    let reinit = train(&teacher, reinit_net, &stream, seeds, &settings, seed)?;
    Ok(LotteryOutcome {
        seed,
        baseline,
        reset,
        reinit,
        kept,
        shared_winners,
    })
}

/// Reset-and-prune experiment: a full baseline, the winners restored to
/// their initial weights, and the same pruned shape freshly initialized.
pub fn run_lottery(cfg: &ExperimentConfig) -> Result<RunLog> {
    let mut log = RunLog::new(cfg);
    let outcomes: Vec<LotteryOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&s| lottery_seed(cfg, s))
        .collect::<Result<_>>()?;
    let layers = cfg.teacher.layer_widths.len() - 1;
    let mut header = vec!["seed", "arm", "final_loss", "diverged"];
    let rho_cols: Vec<String> = (0..layers).map(|l| format!("rho_bar_layer{l}")).collect();
    header.extend(rho_cols.iter().map(String::as_str));
    let mut table = Table::new("lottery", &header);
    let mut wins = 0;
    for o in &outcomes {
        for (arm, run) in [("baseline", &o.baseline), ("reset", &o.reset), ("reinit", &o.reinit)] {
            log.summary.extend(summary_rows(run, arm));
            let mut row = vec![
                o.seed.to_string(),
                arm.to_string(),
                run.final_loss().to_string(),
                run.diverged_at.is_some().to_string(),
            ];
            row.extend((0..layers).map(|l| run.final_rho_bar(l).map(|v| v.to_string()).unwrap_or_default()));
            table.push(row);
        }
        if o.reset.final_loss() < o.reinit.final_loss() {
            wins += 1;
        }
    }
    log.tables.push(table);
    log.meta.insert(
        "winners".into(),
        json!(outcomes
            .iter()
            .map(|o| json!({"seed": o.seed, "kept": o.kept, "shared_winners": o.shared_winners}))
            .collect::<Vec<_>>()),
    );
    let need = (4 * outcomes.len()).div_ceil(5);
    log.check(
        "reset_beats_reinit",
        wins >= need,
        format!(
            "reset arm had the lower final loss on {wins} of {} seeds",
            outcomes.len()
        ),
    );
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward, BnMode};
    use crate::rng::rng_for;
    use ndarray::{array, Array2};

    #[test]
    fn greedy_assignment_resolves_shared_winners() {
        let rho = CorrelationMatrix {
            rho: array![[0.9, 0.8], [0.1, 0.7], [0.0, 0.0]],
            valid: Array2::from_elem((3, 2), true),
        };
        let (kept, shared) = greedy_winners(&rho);
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(shared, 1);
    }

    #[test]
    fn pruning_unused_nodes_keeps_the_function() {
        let spec = NetworkSpec::mlp(vec![3, 4, 2], BnMode::None, true).unwrap();
        let mut net = Network::random(spec, true, &mut rng_for(1, "p")).unwrap();
        net.layers[1].w.row_mut(2).fill(0.0);
        net.layers[1].w.row_mut(3).fill(0.0);
        let small = prune(&net, &[vec![0, 1]]).unwrap();
        assert_eq!(small.spec.widths, vec![3, 2, 2]);
        let x = array![[1.0, -2.0, 0.5], [0.3, 0.2, -1.0]];
        let a = forward(&net, &x).unwrap();
        let b = forward(&small, &x).unwrap();
        assert!((a.output() - b.output()).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn full_mask_is_identity() {
        let spec = NetworkSpec::mlp(vec![2, 3, 3, 1], BnMode::LinearBnRelu, false).unwrap();
        let net = Network::random(spec, false, &mut rng_for(2, "p")).unwrap();
        assert_eq!(prune(&net, &[vec![0, 1, 2], vec![0, 1, 2]]).unwrap(), net);
        assert!(prune(&net, &[vec![0, 5], vec![0]]).is_err());
    }
}
