use serde_json::json;

use super::config::{ExperimentConfig, ExperimentKind};
use super::report::{Plot, RunLog};
use super::train::{band_table, diverged_json, summary_rows, train_all, TrainRun};
use crate::error::{Error, Result};

/// Mean, min and max of `rho_bar` across seeds for every variant, one plot
/// per hidden layer.
pub fn band_plots(groups: &[(String, Vec<TrainRun>)]) -> Vec<Plot> {
    let layers = groups
        .iter()
        .filter_map(|g| g.1.first())
        .map(|r| r.r_mean.len())
        .min()
        .unwrap_or(0);
    (0..layers)
        .map(|l| {
            let mut series = Vec::new();
            for (label, runs) in groups {
                let epochs = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
                let mut stats = [Vec::new(), Vec::new(), Vec::new()];
                for e in 0..epochs {
                    let vals: Vec<f64> = runs.iter().filter_map(|r| r.rho_bar_at(e, l)).collect();
                    if vals.is_empty() {
                        continue;
                    }
                    let x = e as f64;
                    stats[0].push((x, vals.iter().sum::<f64>() / vals.len() as f64));
                    stats[1].push((x, vals.iter().copied().fold(f64::INFINITY, f64::min)));
                    stats[2].push((x, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
                }
                for (tag, pts) in ["mean", "min", "max"].iter().zip(stats) {
                    series.push((format!("{label} {tag}"), pts));
                }
            }
            Plot {
                name: format!("bands_layer{l}"),
                title: format!("rho_bar across seeds, layer {l}"),
                x_label: "epoch".into(),
                y_label: "rho_bar".into(),
                series,
            }
        })
        .collect()
}

fn mean_final(runs: &[TrainRun], layer: usize) -> Option<f64> {
    let v: Vec<f64> = runs.iter().filter_map(|r| r.final_rho_bar(layer)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn std_final(runs: &[TrainRun], layer: usize) -> Option<f64> {
    let mean = mean_final(runs, layer)?;
    let v: Vec<f64> = runs.iter().filter_map(|r| r.final_rho_bar(layer)).collect();
    Some((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

/// First epoch at which the seed-mean of layer-0 `rho_bar` reaches `level`.
fn epochs_to(runs: &[TrainRun], level: f64) -> Option<usize> {
    let epochs = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    (0..epochs).find(|&e| {
        let v: Vec<f64> = runs.iter().filter_map(|r| r.rho_bar_at(e, 0)).collect();
        !v.is_empty() && v.iter().sum::<f64>() / v.len() as f64 >= level
    })
}

/// Directional checks for the default variant labels; a check is skipped
/// when its variants are absent.
fn directional_checks(log: &mut RunLog, kind: ExperimentKind, groups: &[(String, Vec<TrainRun>)]) {
    let find = |label: &str| groups.iter().find(|g| g.0 == label).map(|g| g.1.as_slice());
    match kind {
        ExperimentKind::AblateSize => {
            if let (Some(plain), Some(bn)) = (find("small-plain"), find("small-bn")) {
                let (a, b) = (epochs_to(plain, 0.9), epochs_to(bn, 0.9));
                let passed = match (a, b) {
                    (Some(a), Some(b)) => a < b,
                    (Some(_), None) => true,
                    _ => false,
                };
                log.check(
                    "small_plain_faster_than_bn",
                    passed,
                    format!("epochs to mean layer-0 rho_bar >= 0.9: plain {a:?}, bn {b:?}"),
                );
            }
        }
        ExperimentKind::AblateOverparam => {
            if let (Some(one), Some(ten)) = (find("x1"), find("x10")) {
                let (m1, m10) = (mean_final(one, 0), mean_final(ten, 0));
                let (s1, s10) = (std_final(one, 0), std_final(ten, 0));
                let passed = matches!((m1, m10, s1, s10), (Some(a), Some(b), Some(sa), Some(sb)) if b > a && sb <= sa);
                log.check(
                    "overparam_higher_and_steadier",
                    passed,
                    format!("final layer-0 rho_bar mean/std: x1 {m1:?}/{s1:?}, x10 {m10:?}/{s10:?}"),
                );
            }
        }
        ExperimentKind::AblateFinite => {
            if let (Some(inf), Some(fin)) = (find("infinite"), find("finite-512")) {
                let (a, b) = (mean_final(inf, 0), mean_final(fin, 0));
                log.check(
                    "finite_stalls_below_infinite",
                    matches!((a, b), (Some(a), Some(b)) if b < a),
                    format!("final layer-0 rho_bar mean: infinite {a:?}, finite {b:?}"),
                );
            }
        }
        _ => {}
    }
}

/// Train every variant on the same seed list and compare them.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunLog> {
    if !cfg.kind.is_ablation() {
        return Err(Error::config(format!("{:?} is not an ablation", cfg.kind)));
    }
    let mut log = RunLog::new(cfg);
    let mut groups = Vec::with_capacity(cfg.variants.len());
    let mut diverged = serde_json::Map::new();
    for v in &cfg.variants {
        let vc = cfg.apply(v);
        vc.validate()?;
        let runs = train_all(&vc)?;
        for r in &runs {
            log.summary.extend(summary_rows(r, &v.label));
        }
        diverged.insert(v.label.clone(), diverged_json(&runs));
        groups.push((v.label.clone(), runs));
    }
    let refs: Vec<(&str, &[TrainRun])> = groups.iter().map(|(l, r)| (l.as_str(), r.as_slice())).collect();
    log.tables.push(band_table("bands", &refs));
    log.plots = band_plots(&groups);
    directional_checks(&mut log, cfg.kind, &groups);
    log.meta.insert("diverged".into(), json!(diverged));
    Ok(log)
}
