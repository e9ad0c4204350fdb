//! Small dense helpers on top of `ndarray`.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::Rng;

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Euclidean norm of every column.
pub fn column_norms(m: &Array2<f64>) -> Array1<f64> {
    m.axis_iter(Axis(1)).map(norm).collect()
}

/// Euclidean norm of every row.
pub fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.axis_iter(Axis(0)).map(norm).collect()
}

/// Scale each column to unit norm. Columns with zero norm are left untouched.
pub fn normalize_columns(m: &mut Array2<f64>) {
    for mut col in m.axis_iter_mut(Axis(1)) {
        let n = norm(col.view());
        if n > 0.0 {
            col /= n;
        }
    }
}

pub fn normalized(v: &Array1<f64>) -> Array1<f64> {
    let n = norm(v.view());
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

pub fn gaussian_vector(len: usize, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

/// Angle between two vectors in `[0, pi]`.
pub fn angle(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let c = a.dot(&b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

/// A random unit vector orthogonal to the unit vector `w`.
pub fn random_tangent(w: &Array1<f64>, rng: &mut Rng) -> Array1<f64> {
    loop {
        let mut u = gaussian_vector(w.len(), rng);
        let along = u.dot(w);
        u.scaled_add(-along, w);
        let n = norm(u.view());
        if n > 1e-9 {
            return u / n;
        }
    }
}

/// `m = m + alpha * other`, elementwise, asserting shapes agree.
pub fn axpy(m: &mut Array2<f64>, alpha: f64, other: &Array2<f64>) {
    Zip::from(m).and(other).for_each(|a, &b| *a += alpha * b);
}

/// Copy the upper triangle onto the lower one so the matrix is exactly symmetric.
pub fn symmetrize_upper(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            m[[i, j]] = m[[j, i]];
        }
    }
}

pub fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn column_and_row_norms() {
        let m = array![[3.0, 0.0], [4.0, 1.0]];
        assert_eq!(column_norms(&m), array![5.0, 1.0]);
        assert_eq!(row_norms(&m), array![3.0, 17f64.sqrt()]);
    }

    #[test]
    fn tangent_is_orthogonal_unit() {
        let mut rng = crate::rng::rng_for(3, "t");
        let w = normalized(&gaussian_vector(7, &mut rng));
        let u = random_tangent(&w, &mut rng);
        assert!(u.dot(&w).abs() < 1e-12);
        assert!((norm(u.view()) - 1.0).abs() < 1e-12);
    }
}
