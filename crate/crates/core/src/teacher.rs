//! Teachers, students and the GAUS input stream.

use std::collections::HashSet;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, normalize_columns, normalized};
use crate::net::{forward, BnMode, Network, NetworkSpec};
use crate::rng::{rng_for, Rng};

fn default_grid() -> Vec<f64> {
    vec![-0.5, -0.25, 0.0, 0.25, 0.5]
}

fn default_bias_range() -> (f64, f64) {
    (-0.5, 0.5)
}

fn default_outputs() -> usize {
    100
}

/// Grid-sampled teacher description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    /// Input width followed by the hidden widths, e.g. `[20, 10, 15, 20, 25]`.
    pub layer_widths: Vec<usize>,
    /// Number of linear outputs `C`.
    #[serde(default = "default_outputs")]
    pub outputs: usize,
    /// Allowed weight values. Zero is always dropped.
    #[serde(default = "default_grid")]
    pub weight_grid: Vec<f64>,
    #[serde(default = "default_bias_range")]
    pub bias_range: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

impl TeacherSpec {
    pub fn new(layer_widths: Vec<usize>, outputs: usize, seed: u64) -> Self {
        TeacherSpec {
            layer_widths,
            outputs,
            weight_grid: default_grid(),
            bias_range: default_bias_range(),
            seed,
        }
    }

    /// Full width list including the output layer.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = self.layer_widths.clone();
        w.push(self.outputs);
        w
    }

    fn nonzero_grid(&self) -> Vec<f64> {
        let mut g: Vec<f64> = self.weight_grid.iter().copied().filter(|v| *v != 0.0).collect();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() || self.outputs == 0 {
            return Err(Error::config("teacher needs an input width and at least one output"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config("teacher widths must be positive"));
        }
        if self.weight_grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("weight grid must be finite"));
        }
        let (lo, hi) = self.bias_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config("bias_range must be a finite interval"));
        }
        Ok(())
    }
}

fn distinct_patterns(values: usize, fan_in: usize) -> f64 {
    (values as f64).powi(fan_in.min(1000) as i32)
}

/// Build a teacher whose weights come from the nonzero grid values and whose
/// columns are pairwise distinct within each layer.
pub fn make_teacher(spec: &TeacherSpec) -> Result<Network> {
    spec.validate()?;
    let grid = spec.nonzero_grid();
    if grid.len() < 2 {
        return Err(Error::config(format!(
            "weight grid needs at least 2 nonzero values, has {}",
            grid.len()
        )));
    }
    let widths = spec.widths();
    let net_spec = NetworkSpec::mlp(widths.clone(), BnMode::None, true)?;
    let mut net = Network::zeros(net_spec)?;
    let mut rng = rng_for(spec.seed, "teacher");
    let (lo, hi) = spec.bias_range;
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        if fan_out as f64 > distinct_patterns(grid.len(), fan_in) {
            return Err(Error::config(format!(
                "layer {l}: {fan_out} distinct columns impossible with fan-in {fan_in} over {} values",
                grid.len()
            )));
        }
        let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(fan_out);
        for j in 0..fan_out {
            let mut attempts = 0;
            let col = loop {
                let col: Vec<f64> = (0..fan_in).map(|_| grid[rng.random_range(0..grid.len())]).collect();
                if seen.insert(col.iter().map(|v| v.to_bits()).collect()) {
                    break col;
                }
                attempts += 1;
                if attempts >= 1000 {
                    return Err(Error::config(format!(
                        "layer {l}: no distinct column {j} after 1000 draws"
                    )));
                }
            };
            layer.w.column_mut(j).assign(&Array1::from(col));
        }
        if let Some(b) = layer.b.as_mut() {
            b.mapv_inplace(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        }
    }
    Ok(net)
}

/// How a student is laid out relative to its teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentInit {
    /// Student hidden width is `overparam` times the teacher's.
    #[serde(default = "one")]
    pub overparam: usize,
    #[serde(default)]
    pub p_w: f64,
    #[serde(default)]
    pub p_v: f64,
    #[serde(default)]
    pub bn_mode: BnMode,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for StudentInit {
    fn default() -> Self {
        StudentInit {
            overparam: 1,
            p_w: 0.0,
            p_v: 0.0,
            bn_mode: BnMode::None,
            seed: 0,
        }
    }
}

impl StudentInit {
    pub fn validate(&self) -> Result<()> {
        if self.overparam == 0 {
            return Err(Error::config("overparam must be at least 1"));
        }
        if !(self.p_w >= 0.0 && self.p_v >= 0.0 && self.p_w.is_finite() && self.p_v.is_finite()) {
            return Err(Error::config("p_w and p_v must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Student of the same depth with `overparam`-times wider hidden layers.
///
/// In every hidden layer the first `m` columns (the u-set) start at
/// `normalize(p_w * w*_j / |w*_j| + eps_j)` with `eps_j` a unit Gaussian
/// direction; the rest (the r-set) are unit noise. The top layer starts from
/// column-normalized noise, and u-rows get `p_v * v*_j` added. Teacher
/// vectors are embedded into the rows that feed from u-set nodes below.
pub fn make_student(teacher: &Network, init: &StudentInit) -> Result<Network> {
    init.validate()?;
    let t = &teacher.spec;
    let depth = t.depth();
    let mut widths = t.widths.clone();
    for w in widths.iter_mut().take(depth).skip(1) {
        *w *= init.overparam;
    }
    let spec = NetworkSpec::mlp(widths.clone(), init.bn_mode, t.has_bias.iter().any(|&b| b))?;
    let mut spec = spec;
    for l in 0..depth {
        spec.has_bias[l] = t.has_bias[l] && !spec.has_bn(l);
    }
    let mut net = Network::zeros(spec)?;
    let mut rng = rng_for(init.seed, "student");
    for l in 0..depth {
        let (fi, fo) = (widths[l], widths[l + 1]);
        let (ti, to) = (t.widths[l], t.widths[l + 1]);
        let tw = &teacher.layers[l].w;
        let mut w = gaussian_matrix(fi, fo, 1.0, &mut rng);
        normalize_columns(&mut w);
        if l + 1 < depth {
            if init.p_w > 0.0 {
                for j in 0..to {
                    let target = normalized(&tw.column(j).to_owned());
                    let mut col = w.slice_mut(s![..ti, j]);
                    col.scaled_add(init.p_w, &target);
                }
                normalize_columns(&mut w);
            }
        } else if init.p_v > 0.0 {
            w.slice_mut(s![..ti, ..to]).scaled_add(init.p_v, tw);
        }
        net.layers[l].w = w;
    }
    net.validate()?;
    Ok(net)
}

/// Raw teacher outputs, used as soft targets.
pub fn teacher_labels(teacher: &Network, batch: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward(teacher, batch)?.output().clone())
}

fn default_std() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    #[default]
    Infinite,
    /// Cycle through a fixed pool of this many samples.
    Finite(usize),
}

/// Serializable description of a GAUS stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub dim: usize,
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default)]
    pub mode: StreamMode,
    #[serde(default)]
    pub seed: u64,
}

impl StreamSpec {
    pub fn gaus(dim: usize, seed: u64) -> Self {
        StreamSpec {
            dim,
            std: default_std(),
            mode: StreamMode::Infinite,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("stream dim must be positive"));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::config("stream std must be positive"));
        }
        if self.mode == StreamMode::Finite(0) {
            return Err(Error::config("finite stream needs at least one sample"));
        }
        Ok(())
    }
}

/// Anything that hands out `n x dim` input batches.
pub trait Sampler {
    fn dim(&self) -> usize;
    fn next_batch(&mut self, n: usize) -> Array2<f64>;
}

/// Zero-mean Gaussian inputs, either fresh forever or cycled from a fixed
/// pool with a reshuffle on every pass.
#[derive(Debug, Clone)]
pub struct GausStream {
    spec: StreamSpec,
    rng: Rng,
    pool: Option<Array2<f64>>,
    order: Vec<usize>,
    cursor: usize,
}

impl GausStream {
    pub fn new(spec: StreamSpec) -> Result<Self> {
        spec.validate()?;
        let pool = match spec.mode {
            StreamMode::Infinite => None,
            StreamMode::Finite(n) => {
                let mut prng = rng_for(spec.seed, "stream-pool");
                Some(gaussian_matrix(n, spec.dim, spec.std, &mut prng))
            }
        };
        let n = pool.as_ref().map_or(0, |p| p.nrows());
        Ok(GausStream {
            rng: rng_for(spec.seed, "stream"),
            order: (0..n).collect(),
            cursor: n,
            pool,
            spec,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    /// The fixed sample pool in finite mode.
    pub fn pool(&self) -> Option<&Array2<f64>> {
        self.pool.as_ref()
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Array2<f64> {
        assert!(batch_size >= 1, "batch size must be positive");
        match &self.pool {
            None => gaussian_matrix(batch_size, self.spec.dim, self.spec.std, &mut self.rng),
            Some(pool) => {
                let mut out = Array2::zeros((batch_size, self.spec.dim));
                for mut row in out.rows_mut() {
                    if self.cursor == self.order.len() {
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    row.assign(&pool.row(self.order[self.cursor]));
                    self.cursor += 1;
                }
                out
            }
        }
    }
}

impl Sampler for GausStream {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn next_batch(&mut self, n: usize) -> Array2<f64> {
        GausStream::next_batch(self, n)
    }
}
