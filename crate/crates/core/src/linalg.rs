//! Small dense helpers shared by the numerical modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub type Chol = Cholesky<f64, Dyn>;

pub fn cholesky(m: DMatrix<f64>) -> Option<Chol> {
    let chol = m.cholesky()?;
    let l = chol.l_dirty();
    if (0..l.nrows()).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
        Some(chol)
    } else {
        None
    }
}

pub fn chol_logdet(chol: &Chol) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Weighted quantile with linear interpolation on the cumulative weight
/// midpoints. `w` need not be normalized.
pub fn weighted_quantile(x: &[f64], w: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let total: f64 = w.iter().sum();
    let mut cum = 0.0;
    let mut pts = Vec::with_capacity(x.len());
    for &i in &idx {
        let mid = (cum + 0.5 * w[i]) / total;
        cum += w[i];
        pts.push((mid, x[i]));
    }
    if p <= pts[0].0 {
        return pts[0].1;
    }
    for win in pts.windows(2) {
        let (p0, x0) = win[0];
        let (p1, x1) = win[1];
        if p <= p1 {
            if p1 - p0 <= 0.0 {
                return x1;
            }
            return x0 + (x1 - x0) * (p - p0) / (p1 - p0);
        }
    }
    pts[pts.len() - 1].1
}
