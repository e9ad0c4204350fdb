//! Quick numerical probes: the exact gradient identity, the overlap
//! functions against a planar oracle, the fall-off exponent and the BN bias
//! audit.

use ndarray::Array1;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::json;

use super::config::ExperimentConfig;
use super::report::{RunLog, SummaryRow, Table};
use super::train::{build_pair, summary_rows, train_all};
use crate::beta::{audit_assumptions, compute_beta, psi_d, psi_l, verify_identity, Estimate};
use crate::dynamics::quadratic_falloff_probe;
use crate::error::Result;
use crate::linalg::{gaussian_matrix, gaussian_vector, normalized, random_tangent};
use crate::metrics::bn_bias_audit;
use crate::net::{backward, forward, BnMode, Network, NetworkSpec};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::teacher::{GausStream, StreamSpec};

/// One random student-teacher pair checked against the decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTrial {
    pub student_widths: Vec<usize>,
    pub teacher_widths: Vec<usize>,
    pub batch: usize,
    pub bias: bool,
    pub residual: f64,
    pub max_grad: f64,
    pub loss: f64,
}

impl IdentityTrial {
    pub fn relative(&self) -> f64 {
        if self.max_grad > 0.0 {
            self.residual / self.max_grad
        } else {
            self.residual
        }
    }
}

/// Draw a depth in 1..=4, hidden widths and input/output widths in 2..=40, a
/// batch in 2..=64 and whether both nets carry biases, then compare backprop
/// with the rebuilt gradient.
pub fn identity_trial(rng: &mut Rng) -> Result<IdentityTrial> {
    let depth = rng.random_range(1..=4usize);
    let bias = rng.random_bool(0.5);
    let batch = rng.random_range(2..=64usize);
    let draw = |rng: &mut Rng| rng.random_range(2..=40usize);
    let (input, output) = (draw(rng), draw(rng));
    let widths = |rng: &mut Rng| {
        let mut w = vec![input];
        w.extend((1..depth).map(|_| draw(rng)));
        w.push(output);
        w
    };
    let (sw, tw) = (widths(rng), widths(rng));
    let make = |w: &[usize], rng: &mut Rng| -> Result<Network> {
        let mut net = Network::random(NetworkSpec::mlp(w.to_vec(), BnMode::None, bias)?, false, rng)?;
        for l in net.layers.iter_mut() {
            if let Some(b) = l.b.as_mut() {
                *b = gaussian_vector(b.len(), rng) * 0.3;
            }
        }
        Ok(net)
    };
    let student = make(&sw, rng)?;
    let teacher = make(&tw, rng)?;
    let x = gaussian_matrix(batch, input, 1.0, rng);
    let ts = forward(&student, &x)?;
    let tt = forward(&teacher, &x)?;
    let grads = backward(&student, &ts, tt.output())?;
    let betas = compute_beta(&student, &teacher, &ts, &tt)?;
    let max_grad = grads
        .layers
        .iter()
        .flat_map(|l| l.node.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(IdentityTrial {
        student_widths: sw,
        teacher_widths: tw,
        batch,
        bias,
        residual: verify_identity(&betas, &ts, &tt, &grads),
        max_grad,
        loss: crate::net::loss(&ts, tt.output())?,
    })
}

fn join(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

/// `probe.trials` random triples per seed; passes when every relative
/// residual is below 1e-10.
pub fn run_verify_thm1(cfg: &ExperimentConfig) -> Result<RunLog> {
    let mut log = RunLog::new(cfg);
    let mut table = Table::new(
        "identity",
        &[
            "seed", "trial", "student", "teacher", "batch", "bias", "residual", "max_grad", "relative",
        ],
    );
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for &seed in &cfg.seeds {
        let mut rng = rng_for(seed, "thm1-trials");
        for i in 0..cfg.probe.trials {
            let t = identity_trial(&mut rng)?;
            worst = worst.max(t.relative());
            total += 1;
            table.push(vec![
                seed.to_string(),
                i.to_string(),
                join(&t.student_widths),
                join(&t.teacher_widths),
                t.batch.to_string(),
                t.bias.to_string(),
                t.residual.to_string(),
                t.max_grad.to_string(),
                t.relative().to_string(),
            ]);
            log.summary.push(SummaryRow {
                variant: format!("trial{i}"),
                seed,
                epoch: 0,
                layer: None,
                rho_bar: None,
                r_mean: None,
                loss: Some(t.loss),
            });
        }
    }
    log.tables.push(table);
    log.check(
        "gradient_identity",
        worst < 1e-10,
        format!("worst relative residual {worst:.3e} over {total} trials"),
    );
    Ok(log)
}

/// Brute-force planar estimate of both overlap functions for two unit
/// vectors at `angle`: only the projection onto their span matters, so
/// standard 2D Gaussian points suffice.
pub fn planar_oracle(angle: f64, n: usize, rng: &mut Rng) -> (Estimate, Estimate) {
    let (c, s) = (angle.cos(), angle.sin());
    let (mut d_sum, mut l_sum, mut l_sq) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let p = c * a + s * b;
        if a > 0.0 && p > 0.0 {
            d_sum += 1.0;
            l_sum += a * p;
            l_sq += (a * p) * (a * p);
        }
    }
    let nf = n as f64;
    let pd = d_sum / nf;
    let ml = l_sum / nf;
    let est = |mean: f64, var: f64| Estimate {
        mean,
        stderr: (var.max(0.0) / (nf - 1.0)).sqrt(),
        n,
    };
    (est(pd, pd * (1.0 - pd)), est(ml, l_sq / nf - ml * ml))
}

/// One comparison of the estimator against its reference value.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiComparison {
    pub quantity: &'static str,
    pub angle: f64,
    pub estimate: Estimate,
    pub reference: f64,
    pub reference_stderr: f64,
}

impl PsiComparison {
    /// Distance in combined standard errors.
    pub fn z(&self) -> f64 {
        let se = self.estimate.stderr.hypot(self.reference_stderr);
        (self.estimate.mean - self.reference).abs() / se
    }
}

/// Compare the overlap estimators with the planar oracle at pi/6 and pi/2 and
/// `psi_d(w, w)` with 1/2, all at `n` samples in `dim` dimensions.
///
/// `psi_l` is rescaled by the stream variance so that both sides refer to
/// unit-variance inputs.
pub fn psi_comparisons(dim: usize, n: usize, seed: u64) -> Result<Vec<PsiComparison>> {
    let spec = StreamSpec::gaus(dim, derive_seed(seed, "psi-stream"));
    let var = spec.std * spec.std;
    let mut stream = GausStream::new(spec)?;
    let mut rng = rng_for(seed, "psi-directions");
    let mut oracle_rng = rng_for(seed, "psi-oracle");
    let w = normalized(&gaussian_vector(dim, &mut rng));
    let mut out = Vec::new();
    for angle in [std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_2] {
        let w2: Array1<f64> = &w * angle.cos() + &(random_tangent(&w, &mut rng) * angle.sin());
        let (od, ol) = planar_oracle(angle, n, &mut oracle_rng);
        out.push(PsiComparison {
            quantity: "psi_d",
            angle,
            estimate: psi_d(&w, &w2, &mut stream, n)?,
            reference: od.mean,
            reference_stderr: od.stderr,
        });
        let l = psi_l(&w, &w2, &mut stream, n)?;
        out.push(PsiComparison {
            quantity: "psi_l",
            angle,
            estimate: Estimate {
                mean: l.mean / var,
                stderr: l.stderr / var,
                n: l.n,
            },
            reference: ol.mean,
            reference_stderr: ol.stderr,
        });
    }
    out.push(PsiComparison {
        quantity: "psi_d",
        angle: 0.0,
        estimate: psi_d(&w, &w, &mut stream, n)?,
        reference: 0.5,
        reference_stderr: 0.0,
    });
    Ok(out)
}

/// Overlap estimators against the oracle, plus an assumption audit of the
/// configured teacher and student for every seed.
pub fn run_psi_check(cfg: &ExperimentConfig) -> Result<RunLog> {
    let mut log = RunLog::new(cfg);
    let p = &cfg.probe;
    let mut table = Table::new(
        "psi_check",
        &[
            "seed",
            "quantity",
            "angle",
            "estimate",
            "stderr",
            "reference",
            "reference_stderr",
            "z",
        ],
    );
    let mut worst_z: f64 = 0.0;
    for &seed in &cfg.seeds {
        for c in psi_comparisons(p.input_dim, p.samples, seed)? {
            worst_z = worst_z.max(c.z());
            table.push(vec![
                seed.to_string(),
                c.quantity.to_string(),
                c.angle.to_string(),
                c.estimate.mean.to_string(),
                c.estimate.stderr.to_string(),
                c.reference.to_string(),
                c.reference_stderr.to_string(),
                c.z().to_string(),
            ]);
        }
    }
    log.tables.push(table);
    log.check(
        "psi_matches_oracle",
        worst_z <= 3.0,
        format!("largest gap {worst_z:.2} combined standard errors"),
    );
    let mut audits = Table::new("assumptions", &["seed", "layer", "eps_d", "eps_l", "dead_nodes"]);
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let (teacher, student, seeds) = build_pair(cfg, seed)?;
        let mut stream = GausStream::new(StreamSpec {
            seed: seeds.stream,
            ..cfg.stream_spec()
        })?;
        let mut rng = rng_for(seed, "audit");
        let report = audit_assumptions(&student, &teacher, &mut stream, p.audit_samples, 64, &mut rng)?;
        for o in &report.overlap {
            audits.push(vec![
                seed.to_string(),
                o.layer.to_string(),
                o.eps_d.to_string(),
                o.eps_l.to_string(),
                o.dead_nodes.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "),
            ]);
        }
        log.summary.push(SummaryRow {
            variant: "audit".into(),
            seed,
            epoch: 0,
            layer: None,
            rho_bar: None,
            r_mean: None,
            loss: None,
        });
        reports.push(json!({"seed": seed, "report": report}));
    }
    log.tables.push(audits);
    log.meta.insert("assumption_reports".into(), json!(reports));
    Ok(log)
}

/// Fall-off probe around a random unit teacher node, one per seed.
pub fn run_falloff(cfg: &ExperimentConfig) -> Result<RunLog> {
    let mut log = RunLog::new(cfg);
    let p = &cfg.probe;
    let fits = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = rng_for(seed, "falloff");
            let w = normalized(&gaussian_vector(p.input_dim, &mut rng));
            let mut stream = GausStream::new(StreamSpec::gaus(p.input_dim, derive_seed(seed, "falloff-stream")))?;
            quadratic_falloff_probe(&w, &p.deltas, &mut stream, p.samples, &mut rng).map(|f| (seed, f))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Table::new("falloff", &["seed", "delta", "dist", "diff", "stderr", "ratio", "used"]);
    let mut fit_table = Table::new("falloff_fit", &["seed", "exponent", "c0_hat"]);
    for (seed, fit) in &fits {
        for pt in &fit.points {
            points.push(vec![
                seed.to_string(),
                pt.delta.to_string(),
                pt.dist.to_string(),
                pt.diff.to_string(),
                pt.stderr.to_string(),
                pt.ratio.to_string(),
                pt.used.to_string(),
            ]);
        }
        fit_table.push(vec![seed.to_string(), fit.exponent.to_string(), fit.c0_hat.to_string()]);
        log.summary.push(SummaryRow {
            variant: "falloff".into(),
            seed: *seed,
            epoch: 0,
            layer: None,
            rho_bar: None,
            r_mean: None,
            loss: None,
        });
    }
    let exps: Vec<f64> = fits.iter().map(|f| f.1.exponent).collect();
    let in_band = exps.iter().all(|e| (1.7..=2.3).contains(e));
    log.check(
        "falloff_exponent",
        in_band,
        format!("fitted exponents {exps:.3?}, expected within [1.7, 2.3]"),
    );
    let c0: Vec<f64> = fits.iter().map(|f| f.1.c0_hat).collect();
    let mean = c0.iter().sum::<f64>() / c0.len() as f64;
    let spread = c0.iter().map(|c| (c - mean).abs() / mean).fold(0.0, f64::max);
    log.check(
        "c0_repeatable",
        spread <= 0.3,
        format!("largest deviation of C0 from its mean {:.1}%", 100.0 * spread),
    );
    log.tables.push(points);
    log.tables.push(fit_table);
    Ok(log)
}

/// Train students with BN and report the sign split of their BN biases.
pub fn run_bn_audit(cfg: &ExperimentConfig) -> Result<RunLog> {
    let mut log = RunLog::new(cfg);
    let runs = train_all(cfg)?;
    let mut table = Table::new(
        "audit",
        &["seed", "layer", "n_neg", "n_pos", "bin_lo", "bin_hi", "count"],
    );
    let mut fractions = Vec::new();
    for run in &runs {
        log.summary.extend(summary_rows(run, ""));
        for a in bn_bias_audit(&run.student) {
            for &(lo, hi, count) in &a.bins {
                table.push(vec![
                    run.seed.to_string(),
                    a.layer.to_string(),
                    a.n_negative.to_string(),
                    a.n_positive.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    count.to_string(),
                ]);
            }
            let frac = a.n_negative as f64 / (a.n_negative + a.n_positive) as f64;
            fractions.push(json!({"seed": run.seed, "layer": a.layer, "negative_fraction": frac}));
        }
    }
    log.tables.push(table);
    log.meta.insert("negative_fraction".into(), json!(fractions));
    log.meta.insert("diverged".into(), super::train::diverged_json(&runs));
    Ok(log)
}
