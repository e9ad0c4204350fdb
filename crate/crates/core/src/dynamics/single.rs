use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{angle, norm, random_tangent};
use crate::rng::Rng;
use crate::teacher::Sampler;

/// Unit-norm student filters paired one-to-one with unit-norm teacher filters.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleLayerState {
    /// `d x n`.
    pub w: Array2<f64>,
    /// `d x m`, with `m == n`.
    pub w_star: Array2<f64>,
    pub t: usize,
    /// Angle between `w_j` and `w*_j`.
    pub theta: Array1<f64>,
}

pub(crate) fn check_unit_columns(w: &Array2<f64>, what: &str) -> Result<()> {
    for (j, c) in w.axis_iter(Axis(1)).enumerate() {
        let n = norm(c);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::pre(format!("{what} column {j} has norm {n}")));
        }
    }
    Ok(())
}

pub(crate) fn angles(w: &Array2<f64>, w_star: &Array2<f64>) -> Array1<f64> {
    (0..w_star.ncols())
        .map(|j| angle(w.column(j), w_star.column(j)))
        .collect()
}

impl SingleLayerState {
    pub fn new(w: Array2<f64>, w_star: Array2<f64>) -> Result<Self> {
        if w.dim() != w_star.dim() {
            return Err(Error::pre("student and teacher filter matrices differ in shape"));
        }
        check_unit_columns(&w, "student")?;
        check_unit_columns(&w_star, "teacher")?;
        let theta = angles(&w, &w_star);
        Ok(SingleLayerState { w, w_star, t: 0, theta })
    }

    /// Every student filter at angle exactly `theta0` from its teacher,
    /// rotated along an independent random tangent.
    pub fn at_angle(w_star: Array2<f64>, theta0: f64, rng: &mut Rng) -> Result<Self> {
        let mut w = w_star.clone();
        for j in 0..w.ncols() {
            let ws = w_star.column(j).to_owned();
            let t = random_tangent(&ws, rng);
            w.column_mut(j).assign(&(&ws * theta0.cos() + &t * theta0.sin()));
        }
        Self::new(w, w_star)
    }

    pub fn max_sin(&self) -> f64 {
        self.theta.iter().map(|t| t.sin()).fold(0.0, f64::max)
    }
}

/// What one reduced-dynamics step measured.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleStep {
    pub max_sin_before: f64,
    pub max_sin_after: f64,
    /// Per column: Monte-Carlo standard error of `sin theta_j` after the
    /// step, propagated from the per-sample update vectors.
    pub sin_stderr: Array1<f64>,
    /// Largest norm of a projected update column.
    pub update_norm: f64,
}

impl SingleStep {
    /// `max_sin_after / max_sin_before` with its propagated standard error.
    /// A step taken from the fixed point itself counts as ratio 0.
    pub fn contraction(&self) -> (f64, f64) {
        let se = self.sin_stderr.iter().copied().fold(0.0, f64::max);
        if self.max_sin_before == 0.0 {
            return (0.0, 0.0);
        }
        (self.max_sin_after / self.max_sin_before, se / self.max_sin_before)
    }

    /// Whether the step satisfies `sin_after <= rate * sin_before + k * se`.
    pub fn within(&self, rate: f64, k: f64) -> bool {
        let se = self.sin_stderr.iter().copied().fold(0.0, f64::max);
        self.max_sin_after <= rate * self.max_sin_before + k * se
    }
}

/// `(mean, stderr)` of `G^T A / N` computed sample-wise, for 0/1 gates `G`.
pub(crate) fn gated_mean(g: &Array2<f64>, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = g.nrows() as f64;
    let mean = g.t().dot(a) / n;
    let second = g.t().dot(&a.mapv(|v| v * v)) / n;
    let var = (second - mean.mapv(|v| v * v)).mapv(|v| v.max(0.0));
    (mean, (var / (n - 1.0).max(1.0)).mapv(f64::sqrt))
}

pub(crate) fn step_gate(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Project `update` column-wise off `w` and take a renormalized Euler step.
pub(crate) fn sphere_step(w: &mut Array2<f64>, update: &mut Array2<f64>, eta: f64) -> Result<f64> {
    let mut biggest: f64 = 0.0;
    for j in 0..w.ncols() {
        let wj = w.column(j).to_owned();
        let along = wj.dot(&update.column(j));
        update.column_mut(j).scaled_add(-along, &wj);
        biggest = biggest.max(norm(update.column(j)));
        let next = &wj + &(&update.column(j) * eta);
        let n = norm(next.view());
        if n < 1e-6 || !n.is_finite() {
            return Err(Error::StepSize(format!("filter {j} collapsed to norm {n:e}")));
        }
        w.column_mut(j).assign(&(next / n));
    }
    Ok(biggest)
}

/// One step of `w_j <- normalize(w_j + eta P_j (W* h*_j - W h_j))` with both
/// overlap matrices estimated on the same fresh batch of `n_samples` inputs
/// and the top-down coefficients all equal to one.
pub fn step_single<S: Sampler>(
    state: &mut SingleLayerState,
    input: &mut S,
    n_samples: usize,
    eta: f64,
) -> Result<SingleStep> {
    if n_samples < 2 {
        return Err(Error::pre("need at least 2 samples per step"));
    }
    if input.dim() != state.w.nrows() {
        return Err(Error::pre("input dimension does not match the filters"));
    }
    let before = state.max_sin();
    let x = input.next_batch(n_samples);
    let g = step_gate(&x.dot(&state.w));
    let gs = step_gate(&x.dot(&state.w_star));
    // per-sample direction sum_t w*_t g*_t(x) - sum_j' w_j' g_j'(x)
    let a = gs.dot(&state.w_star.t()) - g.dot(&state.w.t());
    let (mean, se) = gated_mean(&g, &a);
    let mut update = mean.t().to_owned();
    let biggest = sphere_step(&mut state.w, &mut update, eta)?;
    state.t += 1;
    state.theta = angles(&state.w, &state.w_star);
    let sin_stderr = se.axis_iter(Axis(0)).map(|r| eta * norm(r)).collect();
    Ok(SingleStep {
        max_sin_before: before,
        max_sin_after: state.max_sin(),
        sin_stderr,
        update_norm: biggest,
    })
}
