use ndarray::{Array1, Array2};
use rayon::prelude::*;

use super::config::{ExperimentConfig, RunSeeds};
use super::report::{Plot, RunLog, SummaryRow, Table};
use crate::error::{Error, Result};
use crate::metrics::{mean_rank, rho_bar, rho_matrix, v_row_norms, CorrelationMatrix};
use crate::net::{backward, forward, loss, sgd_step, Network};
use crate::teacher::{
    make_student, make_teacher, teacher_labels, GausStream, StreamMode, StreamSpec, StudentInit, TeacherSpec,
};

/// Metrics of one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss on the validation batch.
    pub loss: f64,
    /// Per hidden layer; `None` when no teacher node is covered.
    pub rho_bar: Vec<Option<f64>>,
    pub coverage: Vec<usize>,
    /// Per hidden layer, the fan-out row norms.
    pub v_norms: Vec<Array1<f64>>,
}

/// One training run of one student against one teacher.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    /// Per hidden layer, `r_mean` at every checkpoint.
    pub r_mean: Vec<Vec<f64>>,
    /// Epoch at which the loss exceeded the divergence threshold.
    pub diverged_at: Option<usize>,
    pub teacher: Network,
    pub init: Network,
    pub student: Network,
    /// Correlations at the final checkpoint, per hidden layer.
    pub final_rho: Vec<CorrelationMatrix>,
}

impl TrainRun {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn rho_bar_at(&self, epoch: usize, layer: usize) -> Option<f64> {
        self.records.get(epoch).and_then(|r| r.rho_bar[layer])
    }

    pub fn final_rho_bar(&self, layer: usize) -> Option<f64> {
        self.records.last().and_then(|r| r.rho_bar[layer])
    }
}

/// Hyper-parameters of the SGD loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub eta: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub validation_size: usize,
    pub divergence_loss: f64,
}

impl From<&ExperimentConfig> for TrainSettings {
    fn from(c: &ExperimentConfig) -> Self {
        TrainSettings {
            eta: c.eta,
            epochs: c.epochs,
            batches_per_epoch: c.batches_per_epoch,
            batch_size: c.batch_size,
            validation_size: c.validation_size,
            divergence_loss: c.divergence_loss,
        }
    }
}

fn hidden_layers(net: &Network) -> usize {
    net.depth() - 1
}

struct Validation {
    x: Array2<f64>,
    labels: Array2<f64>,
    teacher_acts: Vec<Array2<f64>>,
}

impl Validation {
    fn new(teacher: &Network, spec: StreamSpec, size: usize) -> Result<Self> {
        let x = GausStream::new(StreamSpec {
            mode: StreamMode::Infinite,
            ..spec
        })?
        .next_batch(size);
        let trace = forward(teacher, &x)?;
        let teacher_acts = (0..hidden_layers(teacher))
            .map(|l| trace.node_activations(l).clone())
            .collect();
        Ok(Validation {
            labels: trace.output().clone(),
            x,
            teacher_acts,
        })
    }

    fn evaluate(&self, epoch: usize, student: &Network) -> Result<(EpochRecord, Vec<CorrelationMatrix>)> {
        let trace = forward(student, &self.x)?;
        let mut rhos = Vec::with_capacity(self.teacher_acts.len());
        let (mut bars, mut coverage, mut v_norms) = (Vec::new(), Vec::new(), Vec::new());
        for (l, t) in self.teacher_acts.iter().enumerate() {
            let rho = rho_matrix(trace.node_activations(l), t)?;
            let bar = rho_bar(&rho);
            bars.push(bar.value);
            coverage.push(bar.covered);
            v_norms.push(v_row_norms(student, l)?);
            rhos.push(rho);
        }
        let record = EpochRecord {
            epoch,
            loss: loss(&trace, &self.labels)?,
            rho_bar: bars,
            coverage,
            v_norms,
        };
        Ok((record, rhos))
    }
}

/// Train `student` on the teacher's soft targets with plain SGD and record
/// metrics on a fixed validation batch after every epoch (epoch 0 is the
/// initialization).
///
/// The run stops early, keeping what it has, when the validation loss
/// exceeds `divergence_loss`, goes non-finite, or a step fails numerically.
pub fn train(
    teacher: &Network,
    student: Network,
    stream_spec: &StreamSpec,
    seeds: RunSeeds,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainRun> {
    let val_spec = StreamSpec {
        seed: seeds.validation,
        ..stream_spec.clone()
    };
    let validation = Validation::new(teacher, val_spec, settings.validation_size)?;
    let mut stream = GausStream::new(StreamSpec {
        seed: seeds.stream,
        ..stream_spec.clone()
    })?;
    let init = student.clone();
    let mut net = student;
    let (first, first_rho) = validation.evaluate(0, &net)?;
    let mut records = vec![first];
    let mut checkpoints: Vec<Vec<CorrelationMatrix>> = first_rho.into_iter().map(|r| vec![r]).collect();
    let mut diverged_at = None;
    'epochs: for epoch in 1..=settings.epochs {
        for _ in 0..settings.batches_per_epoch {
            let x = stream.next_batch(settings.batch_size);
            let y = teacher_labels(teacher, &x)?;
            let trace = forward(&net, &x)?;
            let grads = backward(&net, &trace, &y)?;
            match sgd_step(&net, &grads, settings.eta) {
                Ok(next) => net = next,
                Err(Error::Numeric(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (record, rhos) = match validation.evaluate(epoch, &net) {
            Ok(v) => v,
            Err(Error::DegenerateBatch(_)) => {
                diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        let bad = !(record.loss.is_finite() && record.loss <= settings.divergence_loss);
        records.push(record);
        for (c, r) in checkpoints.iter_mut().zip(rhos) {
            c.push(r);
        }
        if bad {
            diverged_at = Some(epoch);
            break;
        }
    }
    let r_mean = checkpoints
        .iter()
        .map(|c| {
            if c.len() >= 2 {
                mean_rank(c)
            } else {
                Ok(vec![0.0; c.len()])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let final_rho = checkpoints
        .into_iter()
        .map(|mut c| c.pop().expect("epoch 0 exists"))
        .collect();
    Ok(TrainRun {
        seed,
        records,
        r_mean,
        diverged_at,
        teacher: teacher.clone(),
        init,
        student: net,
        final_rho,
    })
}

/// Teacher and student for one seed of a config.
pub fn build_pair(cfg: &ExperimentConfig, seed: u64) -> Result<(Network, Network, RunSeeds)> {
    let seeds = cfg.run_seeds(seed);
    let teacher = make_teacher(&TeacherSpec {
        seed: seeds.teacher,
        ..cfg.teacher.clone()
    })?;
    let student = make_student(
        &teacher,
        &StudentInit {
            seed: seeds.student,
            ..cfg.student.clone()
        },
    )?;
    Ok((teacher, student, seeds))
}

/// One seed of the plain training experiment.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<TrainRun> {
    let (teacher, student, seeds) = build_pair(cfg, seed)?;
    train(
        &teacher,
        student,
        &cfg.stream_spec(),
        seeds,
        &TrainSettings::from(cfg),
        seed,
    )
}

/// Train every seed in parallel; results come back in seed order.
pub fn train_all(cfg: &ExperimentConfig) -> Result<Vec<TrainRun>> {
    cfg.seeds.par_iter().map(|&s| train_seed(cfg, s)).collect()
}

/// Summary rows of one run: one row per checkpoint and hidden layer.
pub fn summary_rows(run: &TrainRun, variant: &str) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for (k, rec) in run.records.iter().enumerate() {
        for (l, bar) in rec.rho_bar.iter().enumerate() {
            rows.push(SummaryRow {
                variant: variant.to_string(),
                seed: run.seed,
                epoch: rec.epoch,
                layer: Some(l),
                rho_bar: *bar,
                r_mean: run.r_mean[l].get(k).copied(),
                loss: Some(rec.loss),
            });
        }
    }
    rows
}

/// Per-run detail tables: fan-out norms per checkpoint and final correlations.
pub fn detail_tables(run: &TrainRun, variant: &str) -> Vec<Table> {
    let tag = if variant.is_empty() {
        format!("seed{}", run.seed)
    } else {
        format!("{variant}_seed{}", run.seed)
    };
    let mut norms = Table::new(&format!("v_norms_{tag}"), &["epoch", "layer", "node", "v_norm"]);
    for rec in &run.records {
        for (l, v) in rec.v_norms.iter().enumerate() {
            for (j, n) in v.iter().enumerate() {
                norms.push(vec![rec.epoch.to_string(), l.to_string(), j.to_string(), n.to_string()]);
            }
        }
    }
    let mut corr = Table::new(&format!("correlations_{tag}"), &["layer", "student", "teacher", "rho"]);
    for (l, rho) in run.final_rho.iter().enumerate() {
        for ((j, t), r) in rho.rho.indexed_iter() {
            let cell = if rho.valid[[j, t]] {
                r.to_string()
            } else {
                String::new()
            };
            corr.push(vec![l.to_string(), j.to_string(), t.to_string(), cell]);
        }
    }
    vec![norms, corr]
}

/// Min/max/mean of `rho_bar` and loss across seeds per checkpoint and layer.
pub fn band_table(name: &str, groups: &[(&str, &[TrainRun])]) -> Table {
    let mut t = Table::new(
        name,
        &[
            "variant",
            "epoch",
            "layer",
            "rho_bar_min",
            "rho_bar_max",
            "rho_bar_mean",
            "rho_bar_std",
            "loss_min",
            "loss_max",
        ],
    );
    for (variant, runs) in groups {
        let epochs = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
        let layers = runs.first().map_or(0, |r| r.r_mean.len());
        for e in 0..epochs {
            for l in 0..layers {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.rho_bar_at(e, l)).collect();
                let losses: Vec<f64> = runs.iter().filter_map(|r| r.records.get(e).map(|x| x.loss)).collect();
                if vals.is_empty() {
                    continue;
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                let fmt = |v: f64| v.to_string();
                t.push(vec![
                    variant.to_string(),
                    e.to_string(),
                    l.to_string(),
                    fmt(vals.iter().copied().fold(f64::INFINITY, f64::min)),
                    fmt(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                    fmt(mean),
                    fmt(std),
                    fmt(losses.iter().copied().fold(f64::INFINITY, f64::min)),
                    fmt(losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                ]);
            }
        }
    }
    t
}

/// `rho_bar` per layer and the loss against epochs, one series per seed.
pub fn train_plots(prefix: &str, runs: &[TrainRun]) -> Vec<Plot> {
    let layers = runs.first().map_or(0, |r| r.r_mean.len());
    let mut plots: Vec<Plot> = (0..layers)
        .map(|l| Plot {
            name: format!("{prefix}rho_bar_layer{l}"),
            title: format!("{prefix}rho_bar, layer {l}"),
            x_label: "epoch".into(),
            y_label: "rho_bar".into(),
            series: runs
                .iter()
                .map(|r| {
                    let pts = r
                        .records
                        .iter()
                        .filter_map(|x| x.rho_bar[l].map(|v| (x.epoch as f64, v)))
                        .collect();
                    (format!("seed {}", r.seed), pts)
                })
                .collect(),
        })
        .collect();
    plots.push(Plot {
        name: format!("{prefix}loss"),
        title: format!("{prefix}validation loss (log10)"),
        x_label: "epoch".into(),
        y_label: "log10 loss".into(),
        series: runs
            .iter()
            .map(|r| {
                let pts = r.records.iter().map(|x| (x.epoch as f64, x.loss.log10())).collect();
                (format!("seed {}", r.seed), pts)
            })
            .collect(),
    });
    plots
}

pub(crate) fn diverged_json(runs: &[TrainRun]) -> serde_json::Value {
    serde_json::Value::Array(
        runs.iter()
            .filter_map(|r| r.diverged_at.map(|e| serde_json::json!({"seed": r.seed, "epoch": e})))
            .collect(),
    )
}

/// The `train` experiment.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunLog> {
    let mut log = RunLog::new(cfg);
    let runs = train_all(cfg)?;
    for r in &runs {
        log.summary.extend(summary_rows(r, ""));
        log.tables.extend(detail_tables(r, ""));
    }
    log.tables.push(band_table("bands", &[("", &runs)]));
    log.plots = train_plots("", &runs);
    log.meta.insert("diverged".into(), diverged_json(&runs));
    Ok(log)
}
