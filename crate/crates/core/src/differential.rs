//! The differential `dR = A dAᵀ + dA Aᵀ + B dBᵀ + dB Bᵀ + dΦ` in the η
//! coordinates. Every partial derivative is a symmetric rank-two matrix
//! `∂R/∂η_k = u_k v_kᵀ + v_k u_kᵀ`; the factor pairs are stored as columns.

use nalgebra::DMatrix;

use crate::linalg;
use crate::model::{free_entries, FreeEntry, MfaParams};

pub struct DerivativeFactors {
    /// `n x L`, column `k` is `u_k`.
    pub u: DMatrix<f64>,
    /// `n x L`, column `k` is `v_k`.
    pub v: DMatrix<f64>,
}

pub fn derivative_factors(params: &MfaParams) -> DerivativeFactors {
    derivative_factors_for(params, &free_entries(params.structure()))
}

/// Factors for an arbitrary list of coordinates.
pub(crate) fn derivative_factors_for(params: &MfaParams, entries: &[FreeEntry]) -> DerivativeFactors {
    let s = params.structure();
    let n = s.n();
    let mut u = DMatrix::zeros(n, entries.len());
    let mut v = DMatrix::zeros(n, entries.len());
    for (k, e) in entries.iter().enumerate() {
        match *e {
            FreeEntry::A { row, col } => {
                u[(row, k)] = 1.0;
                v.column_mut(k).copy_from(&params.a().column(col));
            }
            FreeEntry::B { channel, row, col } => {
                let off = s.n_before(channel);
                u[(off + row, k)] = 1.0;
                let blk = &params.b_blocks()[channel];
                v.view_mut((off, k), (blk.nrows(), 1)).copy_from(&blk.column(col));
            }
            FreeEntry::Phi(i) => {
                u[(i, k)] = 1.0;
                v[(i, k)] = 0.5;
            }
        }
    }
    DerivativeFactors { u, v }
}

impl DerivativeFactors {
    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.u.ncols() == 0
    }

    /// Dense `∂R/∂η_k`.
    pub fn partial(&self, k: usize) -> DMatrix<f64> {
        let uv = self.u.column(k) * self.v.column(k).transpose();
        &uv + uv.transpose()
    }

    /// `Σ_k dη_k ∂R/∂η_k`.
    pub fn apply(&self, d_eta: &[f64]) -> DMatrix<f64> {
        let n = self.u.nrows();
        let mut scaled = self.v.clone();
        for (k, &d) in d_eta.iter().enumerate() {
            scaled.column_mut(k).scale_mut(d);
        }
        let uv = &self.u * scaled.transpose();
        let mut out = DMatrix::zeros(n, n);
        out += &uv;
        out += uv.transpose();
        out
    }

    /// `n(n+1)/2 x L` Jacobian whose columns are `vech(∂R/∂η_k)`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n = self.u.nrows();
        let mut j = DMatrix::zeros(n * (n + 1) / 2, self.len());
        for k in 0..self.len() {
            j.column_mut(k).copy_from(&linalg::vech(&self.partial(k)));
        }
        j
    }
}
