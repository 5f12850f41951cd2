//! Vector helpers for unit-sphere embeddings.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{DdlError, Result};

/// Norms below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Allowed deviation from unit norm before `cosine_similarity` rejects an input.
pub const UNIT_TOL: f64 = 1e-6;

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm > NORM_EPS) {
        return Err(DdlError::DegenerateVector {
            norm,
            eps: NORM_EPS,
        });
    }
    Ok(v.mapv(|x| x / norm))
}

/// Normalizes every row in place, returning the original row norms.
pub fn normalize_rows(m: &mut Array2<f64>) -> Result<Array1<f64>> {
    let mut norms = Array1::zeros(m.nrows());
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > NORM_EPS) {
            return Err(DdlError::DegenerateVector {
                norm: n,
                eps: NORM_EPS,
            });
        }
        row.mapv_inplace(|x| x / n);
        norms[i] = n;
    }
    Ok(norms)
}

/// Inner product clamped to [-1, 1]. Callers guarantee unit-norm inputs.
#[inline]
pub fn clamped_dot(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    u.dot(&v).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DdlError::ShapeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    for (name, x) in [("u", u), ("v", v)] {
        let n = x.dot(&x).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(DdlError::Contract(format!(
                "cosine_similarity expects unit vectors, `{name}` has norm {n}"
            )));
        }
    }
    Ok(clamped_dot(u, v))
}

/// Gram matrix of row vectors, entries clamped to [-1, 1].
pub fn cosine_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut g = a.dot(&b.t());
    g.mapv_inplace(|x| x.clamp(-1.0, 1.0));
    g
}
