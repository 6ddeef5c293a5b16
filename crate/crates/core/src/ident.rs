//! Identified set of the covariance between factors of the two age-specific
//! blocks, which are never observed in the same classroom.
//!
//! With factors ordered as common block (Q), toddler block (T) and infant
//! block (I), the factor covariance is partitioned as
//!
//! ```text
//!     | A    B    C |
//!     | B^T  D    F |
//!     | C^T  F^T  E |
//! ```
//!
//! and only `F` is absent from the likelihood. A candidate `F` completes a
//! positive definite matrix iff `M = D - B^T A^{-1} B` and
//! `W = E - C^T A^{-1} C` are positive definite and
//! `W - G^T M^{-1} G` is positive definite, `G = F - B^T A^{-1} C`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Block, ItemCatalog};

/// Margins within this distance of zero are classified as boundary.
pub const BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// Candidate toddler-infant cross covariance.
    pub f: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Feasible,
    Boundary,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// Smallest eigenvalue of `W - G^T M^{-1} G` (for scalar `E`,
    /// `v - quadratic form`), or of `M` / `W` when those fail.
    pub margin: f64,
    pub classification: Classification,
}

/// Factor indices of each block, in catalog order.
pub fn block_factors(catalog: &ItemCatalog) -> [Vec<usize>; 3] {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for f in 0..catalog.n_factors() {
        let slot = match catalog.factor_block(f) {
            Block::Qcit => 0,
            Block::ClassT => 1,
            Block::ClassI => 2,
        };
        out[slot].push(f);
    }
    out
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

impl BlockPartition {
    pub fn from_psi(psi: &DMatrix<f64>, catalog: &ItemCatalog) -> Result<Self> {
        let [q, t, i] = block_factors(catalog);
        if q.is_empty() || t.is_empty() || i.is_empty() {
            return Err(Error::DimensionMismatch(
                "identified-set analysis needs factors in all three blocks".into(),
            ));
        }
        Ok(Self {
            a: sub(psi, &q, &q),
            b: sub(psi, &q, &t),
            c: sub(psi, &q, &i),
            d: sub(psi, &t, &t),
            e: sub(psi, &i, &i),
            f: sub(psi, &t, &i),
        })
    }

    /// Full matrix in block order (Q, T, I) with the candidate `f`.
    pub fn completed(&self) -> DMatrix<f64> {
        let (nq, nt, ni) = (self.a.nrows(), self.d.nrows(), self.e.nrows());
        let n = nq + nt + ni;
        let mut m = DMatrix::zeros(n, n);
        m.view_mut((0, 0), (nq, nq)).copy_from(&self.a);
        m.view_mut((0, nq), (nq, nt)).copy_from(&self.b);
        m.view_mut((nq, 0), (nt, nq)).copy_from(&self.b.transpose());
        m.view_mut((0, nq + nt), (nq, ni)).copy_from(&self.c);
        m.view_mut((nq + nt, 0), (ni, nq)).copy_from(&self.c.transpose());
        m.view_mut((nq, nq), (nt, nt)).copy_from(&self.d);
        m.view_mut((nq + nt, nq + nt), (ni, ni)).copy_from(&self.e);
        m.view_mut((nq, nq + nt), (nt, ni)).copy_from(&self.f);
        m.view_mut((nq + nt, nq), (ni, nt)).copy_from(&self.f.transpose());
        m
    }

    /// Writes the completed matrix back into catalog factor order.
    pub fn to_psi(&self, catalog: &ItemCatalog) -> DMatrix<f64> {
        let [q, t, i] = block_factors(catalog);
        let order: Vec<usize> = q.into_iter().chain(t).chain(i).collect();
        let full = self.completed();
        let mut psi = DMatrix::zeros(order.len(), order.len());
        for (r, &fr) in order.iter().enumerate() {
            for (c, &fc) in order.iter().enumerate() {
                psi[(fr, fc)] = full[(r, c)];
            }
        }
        psi
    }

    fn a_inv(&self) -> Result<DMatrix<f64>> {
        linalg::cholesky(self.a.clone())
            .map(|c| c.inverse())
            .ok_or(Error::SingularA)
    }
}

/// Center of the feasibility ellipsoid, `B^T A^{-1} C`: the completion under
/// which the two age-specific blocks are conditionally independent given the
/// common block.
pub fn ci_completion(p: &BlockPartition) -> Result<DMatrix<f64>> {
    let a_inv = p.a_inv()?;
    Ok(p.b.transpose() * a_inv * &p.c)
}

pub fn feasibility_check(p: &BlockPartition) -> Result<Feasibility> {
    let a_inv = p.a_inv()?;
    let mut m = &p.d - p.b.transpose() * &a_inv * &p.b;
    let mut w = &p.e - p.c.transpose() * &a_inv * &p.c;
    linalg::symmetrize(&mut m);
    linalg::symmetrize(&mut w);
    let classify = |margin: f64| {
        if margin > BOUNDARY_TOL {
            Classification::Feasible
        } else if margin >= -BOUNDARY_TOL {
            Classification::Boundary
        } else {
            Classification::Infeasible
        }
    };
    let min_m = linalg::min_eigenvalue(&m);
    let min_w = linalg::min_eigenvalue(&w);
    if min_m <= 0.0 || min_w <= 0.0 {
        let margin = min_m.min(min_w);
        return Ok(Feasibility {
            feasible: false,
            margin,
            classification: classify(margin),
        });
    }
    let g = &p.f - p.b.transpose() * &a_inv * &p.c;
    let m_inv_g = linalg::cholesky(m)
        .expect("positive eigenvalues")
        .solve(&g);
    let mut cond = w - g.transpose() * m_inv_g;
    linalg::symmetrize(&mut cond);
    let margin = linalg::min_eigenvalue(&cond);
    Ok(Feasibility {
        feasible: margin > 0.0,
        margin,
        classification: classify(margin),
    })
}
