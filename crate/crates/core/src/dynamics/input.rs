//! Inputs for the reduced dynamics.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, normalize_columns};
use crate::rng::{rng_for, Rng};
use crate::teacher::Sampler;

/// Which whitened input distribution feeds the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModel {
    /// `x ~ N(0, I_d)`.
    #[default]
    Isotropic,
    /// `x = (z, 1)` with `z ~ N(0, I_{d-1})`. Still `E[x x^T] = I`, but a
    /// weight's last coordinate now acts as a bias, so teacher nodes can sit
    /// on a corner of the space and rarely fire together.
    Affine,
}

/// Unit-variance whitened input stream.
#[derive(Debug, Clone)]
pub struct WhiteInput {
    dim: usize,
    model: InputModel,
    rng: Rng,
}

impl WhiteInput {
    pub fn new(dim: usize, model: InputModel, seed: u64) -> Result<Self> {
        if dim < 1 || (model == InputModel::Affine && dim < 2) {
            return Err(Error::config("input dimension too small for the input model"));
        }
        Ok(WhiteInput {
            dim,
            model,
            rng: rng_for(seed, "white-input"),
        })
    }
}

impl Sampler for WhiteInput {
    fn dim(&self) -> usize {
        self.dim
    }

    fn next_batch(&mut self, n: usize) -> Array2<f64> {
        match self.model {
            InputModel::Isotropic => gaussian_matrix(n, self.dim, 1.0, &mut self.rng),
            InputModel::Affine => {
                let mut x = Array2::ones((n, self.dim));
                let z = gaussian_matrix(n, self.dim - 1, 1.0, &mut self.rng);
                x.slice_mut(s![.., ..self.dim - 1]).assign(&z);
                x
            }
        }
    }
}

/// `m` unit teacher filters in dimension `d` for the affine input.
///
/// Their `z` parts are orthonormal and every filter carries the same
/// negative bias, so node `j` fires when `u_j . z > threshold`. Pairwise
/// joint firing is then about `P(fire)^2`.
pub fn corner_teacher(d: usize, m: usize, threshold: f64, rng: &mut Rng) -> Result<Array2<f64>> {
    if d < 2 || m > d - 1 {
        return Err(Error::config(format!(
            "cannot place {m} orthogonal filters in dimension {d}"
        )));
    }
    let mut u = gaussian_matrix(d - 1, m, 1.0, rng);
    // Gram-Schmidt on the columns
    for j in 0..m {
        for k in 0..j {
            let dot = u.column(j).dot(&u.column(k));
            let ck = u.column(k).to_owned();
            u.column_mut(j).scaled_add(-dot, &ck);
        }
        let n = u.column(j).dot(&u.column(j)).sqrt();
        u.column_mut(j).mapv_inplace(|v| v / n);
    }
    let mut w = Array2::from_elem((d, m), -threshold);
    w.slice_mut(s![..d - 1, ..]).assign(&u);
    normalize_columns(&mut w);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    #[test]
    fn affine_input_is_white() {
        let mut inp = WhiteInput::new(4, InputModel::Affine, 1).unwrap();
        let x = inp.next_batch(50_000);
        let second = x.t().dot(&x) / 50_000.0;
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((second[[i, j]] - want).abs() < 0.03);
            }
        }
        assert!(x.column(3).iter().all(|&v| v == 1.0));
        assert!(x.mean_axis(Axis(0)).unwrap()[3] == 1.0);
    }

    #[test]
    fn corner_teacher_is_orthogonal_in_z() {
        let w = corner_teacher(12, 5, 2.0, &mut rng_for(0, "c")).unwrap();
        for j in 0..5 {
            assert!((w.column(j).dot(&w.column(j)) - 1.0).abs() < 1e-12);
            for k in 0..j {
                let zdot = w.slice(s![..11, j]).dot(&w.slice(s![..11, k]));
                assert!(zdot.abs() < 1e-12);
            }
        }
        assert!(corner_teacher(4, 4, 1.0, &mut rng_for(0, "c")).is_err());
    }
}
