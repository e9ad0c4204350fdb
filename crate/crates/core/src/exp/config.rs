use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::BnMode;
use crate::rng::derive_seed;
use crate::teacher::{StreamMode, StreamSpec, StudentInit, TeacherSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VerifyThm1,
    Train,
    Thm5Grid,
    AblateSize,
    AblateOverparam,
    AblateFinite,
    Lottery,
    BnAudit,
    PsiCheck,
    FalloffProbe,
}

impl ExperimentKind {
    pub fn is_ablation(self) -> bool {
        matches!(self, Self::AblateSize | Self::AblateOverparam | Self::AblateFinite)
    }
}

/// Whether the two-layer simulation may run outside the proven regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Cells whose ledger is infeasible are still run but flagged free-run.
    #[default]
    Guaranteed,
    FreeRun,
}

/// The two-layer verification grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thm5Config {
    pub input_dim: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub overparam: Vec<usize>,
    /// `(p_w, p_v)` pairs; each forms one cell with every overparam factor.
    pub proximity: Vec<(f64, f64)>,
    pub iterations: usize,
    pub samples_per_step: usize,
    pub eta: f64,
    /// Iterations between recorded points and hypothesis checks.
    pub cadence: usize,
    /// Monte-Carlo samples for the ledger inputs.
    pub ledger_samples: usize,
}

impl Default for Thm5Config {
    fn default() -> Self {
        Thm5Config {
            input_dim: 10,
            hidden: 20,
            outputs: 30,
            overparam: vec![2, 5, 10],
            proximity: vec![(10.0, 1.0), (10.0, 0.1), (0.3, 1.0), (0.3, 0.1)],
            iterations: 2000,
            samples_per_step: 1024,
            eta: 0.1,
            cadence: 10,
            ledger_samples: 200_000,
        }
    }
}

/// One arm of an ablation, given as overrides of the base config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub layer_widths: Option<Vec<usize>>,
    #[serde(default)]
    pub bn_mode: Option<BnMode>,
    #[serde(default)]
    pub overparam: Option<usize>,
    #[serde(default)]
    pub stream_mode: Option<StreamMode>,
}

/// Settings of the quick probes (`verify_thm1`, `psi_check`, `falloff_probe`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub samples: usize,
    pub trials: usize,
    pub input_dim: usize,
    pub deltas: Vec<f64>,
    /// Samples for each estimate of the assumption audit.
    pub audit_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            samples: 1_000_000,
            trials: 50,
            input_dim: 20,
            deltas: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            audit_samples: 4096,
        }
    }
}

fn default_teacher() -> TeacherSpec {
    TeacherSpec::new(vec![20, 10, 15, 20, 25], 100, 0)
}

fn default_student() -> StudentInit {
    StudentInit {
        overparam: 10,
        ..StudentInit::default()
    }
}

/// A full experiment description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub teacher: TeacherSpec,
    pub student: StudentInit,
    /// Base input stream; `dim` is taken from the teacher when 0.
    pub stream: StreamSpec,
    pub eta: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub validation_size: usize,
    pub seeds: Vec<u64>,
    pub mode: RunMode,
    /// Training loss above which a run is declared diverged.
    pub divergence_loss: f64,
    pub variants: Vec<Variant>,
    pub thm5: Thm5Config,
    pub probe: ProbeConfig,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::Train,
            teacher: default_teacher(),
            student: default_student(),
            stream: StreamSpec::gaus(0, 0),
            eta: 3e-5,
            epochs: 100,
            batches_per_epoch: 100,
            batch_size: 128,
            validation_size: 4096,
            seeds: vec![1, 2, 3, 4, 5],
            mode: RunMode::Guaranteed,
            divergence_loss: 1e6,
            variants: Vec::new(),
            thm5: Thm5Config::default(),
            probe: ProbeConfig::default(),
            output_dir: None,
        }
    }
}

/// Seeds of the independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub teacher: u64,
    pub student: u64,
    pub stream: u64,
    pub validation: u64,
}

impl ExperimentConfig {
    /// Defaults for a kind, with the ablation arms filled in.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            kind,
            ..Default::default()
        };
        cfg.variants = default_variants(kind);
        if kind == ExperimentKind::BnAudit {
            cfg.student.bn_mode = BnMode::LinearBnRelu;
        }
        cfg.seeds = match kind {
            ExperimentKind::Thm5Grid | ExperimentKind::AblateOverparam => (1..=32).collect(),
            ExperimentKind::FalloffProbe => (1..=8).collect(),
            ExperimentKind::VerifyThm1 | ExperimentKind::PsiCheck => vec![1],
            _ => cfg.seeds,
        };
        cfg
    }

    /// Parse a config, filling omitted fields from the defaults of its kind.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let kind = match v.get("kind") {
            Some(k) => serde_json::from_value(k.clone()).map_err(|e| Error::config(e.to_string()))?,
            None => ExperimentKind::Train,
        };
        Self::for_kind(kind).with_overrides(text)
    }

    /// Layer a JSON object over `self`: nested objects merge key by key,
    /// anything else replaces the current value. The result is validated.
    pub fn with_overrides(&self, text: &str) -> Result<Self> {
        let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if !patch.is_object() {
            return Err(Error::config("config must be a JSON object"));
        }
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, patch);
        let cfg: ExperimentConfig = serde_json::from_value(base).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The stream spec with its dimension resolved against the teacher.
    pub fn stream_spec(&self) -> StreamSpec {
        let mut s = self.stream.clone();
        if s.dim == 0 {
            s.dim = self.teacher.layer_widths.first().copied().unwrap_or(0);
        }
        s
    }

    // negated comparisons below also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        let stream = self.stream_spec();
        stream.validate()?;
        if stream.dim != self.teacher.layer_widths[0] {
            return Err(Error::config(format!(
                "stream dim {} does not match teacher input width {}",
                stream.dim, self.teacher.layer_widths[0]
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta must be positive"));
        }
        if self.batch_size < 2 || self.batches_per_epoch == 0 || self.validation_size < 2 {
            return Err(Error::config(
                "batch_size and validation_size must be >= 2, batches_per_epoch >= 1",
            ));
        }
        if !(self.divergence_loss > 0.0) {
            return Err(Error::config("divergence_loss must be positive"));
        }
        if self.kind.is_ablation() && self.variants.is_empty() {
            return Err(Error::config("ablation needs at least one variant"));
        }
        let mut labels: Vec<&str> = self.variants.iter().map(|v| v.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) || labels.iter().any(|l| l.is_empty()) {
            return Err(Error::config("variant labels must be non-empty and unique"));
        }
        for v in &self.variants {
            if let Some(w) = &v.layer_widths {
                if w.first() != Some(&self.teacher.layer_widths[0]) || w.contains(&0) {
                    return Err(Error::config(format!(
                        "variant {}: widths must keep the input width",
                        v.label
                    )));
                }
            }
            if v.overparam == Some(0) || v.stream_mode == Some(StreamMode::Finite(0)) {
                return Err(Error::config(format!("variant {}: invalid override", v.label)));
            }
        }
        if self.kind == ExperimentKind::BnAudit && self.student.bn_mode == BnMode::None {
            return Err(Error::config("bn_audit needs a student bn_mode"));
        }
        if self.kind == ExperimentKind::Lottery && self.student.bn_mode != BnMode::None {
            return Err(Error::config("lottery pruning is defined for students without BN"));
        }
        let t = &self.thm5;
        if t.input_dim == 0 || t.hidden == 0 || t.outputs == 0 || t.overparam.contains(&0) {
            return Err(Error::config("thm5 widths and overparam factors must be positive"));
        }
        if t.overparam.is_empty() || t.proximity.is_empty() {
            return Err(Error::config("thm5 grid needs overparam factors and proximity pairs"));
        }
        if t.proximity
            .iter()
            .any(|&(a, b)| !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()))
        {
            return Err(Error::config("thm5 proximity factors must be finite and non-negative"));
        }
        if t.samples_per_step < 2 || t.cadence == 0 || !(t.eta > 0.0) || t.ledger_samples < 2 {
            return Err(Error::config("thm5 needs samples_per_step >= 2, cadence >= 1, eta > 0"));
        }
        let p = &self.probe;
        if p.samples < 2 || p.audit_samples < 2 || p.trials == 0 || p.input_dim < 2 {
            return Err(Error::config("probe needs samples >= 2, trials >= 1, input_dim >= 2"));
        }
        if p.deltas.iter().any(|&d| !(d > 0.0 && d <= 0.3)) {
            return Err(Error::config("probe deltas must lie in (0, 0.3]"));
        }
        Ok(())
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_seeds(&self, seed: u64) -> RunSeeds {
        RunSeeds {
            teacher: derive_seed(seed, "teacher").wrapping_add(self.teacher.seed),
            student: derive_seed(seed, "student").wrapping_add(self.student.seed),
            stream: derive_seed(seed, "stream").wrapping_add(self.stream.seed),
            validation: derive_seed(seed, "validation").wrapping_add(self.stream.seed),
        }
    }

    /// The base config with a variant's overrides applied, as a plain
    /// training run.
    pub fn apply(&self, v: &Variant) -> ExperimentConfig {
        let mut c = self.clone();
        c.kind = ExperimentKind::Train;
        if let Some(w) = &v.layer_widths {
            c.teacher.layer_widths = w.clone();
        }
        if let Some(b) = v.bn_mode {
            c.student.bn_mode = b;
        }
        if let Some(k) = v.overparam {
            c.student.overparam = k;
        }
        if let Some(m) = v.stream_mode {
            c.stream.mode = m;
        }
        c.variants.clear();
        c
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn default_variants(kind: ExperimentKind) -> Vec<Variant> {
    let small = vec![20, 10, 15, 20, 25];
    let large = vec![20, 50, 75, 100, 125];
    match kind {
        ExperimentKind::AblateSize => [("small", &small), ("large", &large)]
            .into_iter()
            .flat_map(|(name, widths)| {
                [(BnMode::None, "plain"), (BnMode::LinearBnRelu, "bn")].map(|(bn, tag)| Variant {
                    label: format!("{name}-{tag}"),
                    layer_widths: Some(widths.clone()),
                    bn_mode: Some(bn),
                    ..Default::default()
                })
            })
            .collect(),
        ExperimentKind::AblateOverparam => [1, 2, 5, 10, 20, 50]
            .into_iter()
            .map(|k| Variant {
                label: format!("x{k}"),
                overparam: Some(k),
                ..Default::default()
            })
            .collect(),
        ExperimentKind::AblateFinite => vec![
            Variant {
                label: "infinite".into(),
                stream_mode: Some(StreamMode::Infinite),
                ..Default::default()
            },
            Variant {
                label: "finite-512".into(),
                stream_mode: Some(StreamMode::Finite(512)),
                ..Default::default()
            },
        ],
        _ => Vec::new(),
    }
}
