//! Limiting covariance of the quasi-ML estimator in η coordinates:
//! `√T(η̂ − η̊) → N(0, W)` with `W = V0⁻¹ Ω V0⁻¹`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::differential::{derivative_factors, derivative_factors_for, DerivativeFactors};
use crate::error::{MfaError, Result};
use crate::linalg::{self, RANK_TOL};
use crate::model::{build_covariance, unvectorize, EtaVector, FreeEntry, MfaParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CovarianceMode {
    GaussianClosedForm,
    EmpiricalSandwich,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymptoticCov {
    pub v0: DMatrix<f64>,
    pub score_cov: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub mode: CovarianceMode,
    /// Set in sandwich mode when fewer observations than parameters were used.
    pub insufficient_data: bool,
}

struct Whitened {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    factors: DerivativeFactors,
}

fn whiten(eta: &EtaVector) -> Result<Whitened> {
    whiten_params(&unvectorize(eta))
}

fn whiten_params(params: &MfaParams) -> Result<Whitened> {
    whiten_with(params, derivative_factors(params))
}

fn whiten_with(params: &MfaParams, factors: DerivativeFactors) -> Result<Whitened> {
    let chol = Cholesky::new(build_covariance(params)).ok_or(MfaError::NonPd)?;
    let mut u = factors.u.clone();
    let mut v = factors.v.clone();
    chol.l().solve_lower_triangular_mut(&mut u);
    chol.l().solve_lower_triangular_mut(&mut v);
    Ok(Whitened { u, v, chol, factors })
}

/// `V0[j,k] = tr(R⁻¹ ∂R_j R⁻¹ ∂R_k)`.
pub fn hessian_v0(eta: &EtaVector) -> Result<DMatrix<f64>> {
    let w = whiten(eta)?;
    Ok(v0_from(&w))
}

/// `V0` over an arbitrary coordinate list.
pub(crate) fn v0_for_entries(params: &MfaParams, entries: &[FreeEntry]) -> Result<DMatrix<f64>> {
    Ok(v0_from(&whiten_with(params, derivative_factors_for(params, entries))?))
}

fn v0_from(w: &Whitened) -> DMatrix<f64> {
    let uu = w.u.tr_mul(&w.u);
    let vv = w.v.tr_mul(&w.v);
    let uv = w.u.tr_mul(&w.v);
    let mut v0 = (uu.component_mul(&vv) + uv.component_mul(&uv.transpose())) * 2.0;
    linalg::symmetrize(&mut v0);
    v0
}

const SCORE_CHUNK: usize = 1024;

/// Per-observation scores `tr((R⁻¹ − R⁻¹xxᵀR⁻¹) ∂R_k)` as an `L x T` matrix.
pub fn observation_scores(eta: &EtaVector, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = whiten(eta)?;
    check_data(eta, data)?;
    Ok(scores_for(&w, data, 0, data.nrows()))
}

fn check_data(eta: &EtaVector, data: &DMatrix<f64>) -> Result<()> {
    let n = eta.structure().n();
    if data.ncols() != n {
        return Err(MfaError::DimensionMismatch(format!("expected n = {} columns, data has {}", n, data.ncols())));
    }
    if data.nrows() == 0 {
        return Err(MfaError::EmptyData("no observations for the empirical score covariance".into()));
    }
    Ok(())
}

fn scores_for(w: &Whitened, data: &DMatrix<f64>, start: usize, len: usize) -> DMatrix<f64> {
    let l = w.factors.len();
    // c_k = 2 u_kᵀ R⁻¹ v_k = 2 ũ_kᵀ ṽ_k.
    let c: DVector<f64> = DVector::from_iterator(l, (0..l).map(|k| 2.0 * w.u.column(k).dot(&w.v.column(k))));
    let x = data.rows(start, len).transpose();
    let z = w.chol.solve(&x);
    let p = w.factors.u.tr_mul(&z);
    let q = w.factors.v.tr_mul(&z);
    let mut s = p.component_mul(&q) * -2.0;
    for mut col in s.column_iter_mut() {
        col += &c;
    }
    s
}

/// Gaussian closed form `2 V0` without data, otherwise the average outer
/// product of the per-observation scores evaluated at `eta`.
pub fn score_covariance(eta: &EtaVector, data: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    let w = whiten(eta)?;
    match data {
        None => Ok(v0_from(&w) * 2.0),
        Some(d) => {
            check_data(eta, d)?;
            Ok(empirical(&w, d))
        }
    }
}

fn empirical(w: &Whitened, data: &DMatrix<f64>) -> DMatrix<f64> {
    let l = w.factors.len();
    let t = data.nrows();
    let mut acc = DMatrix::zeros(l, l);
    let mut start = 0;
    while start < t {
        let len = SCORE_CHUNK.min(t - start);
        let s = scores_for(w, data, start, len);
        acc += &s * s.transpose();
        start += len;
    }
    acc /= t as f64;
    linalg::symmetrize(&mut acc);
    acc
}

pub fn asymptotic_cov(eta: &EtaVector, data: Option<&DMatrix<f64>>) -> Result<AsymptoticCov> {
    let wh = whiten(eta)?;
    let v0 = v0_from(&wh);
    let ev = linalg::sym_eigenvalues(&v0);
    let (min, max) = (ev.first().copied().unwrap_or(0.0), ev.last().copied().unwrap_or(0.0));
    if !(max > 0.0) || min <= RANK_TOL * max {
        return Err(MfaError::SingularHessian { min, max });
    }
    let (score_cov, mode, insufficient_data) = match data {
        None => (&v0 * 2.0, CovarianceMode::GaussianClosedForm, false),
        Some(d) => {
            check_data(eta, d)?;
            (empirical(&wh, d), CovarianceMode::EmpiricalSandwich, d.nrows() < wh.factors.len())
        }
    };
    let chol = Cholesky::new(v0.clone()).ok_or(MfaError::SingularHessian { min, max })?;
    let half = chol.solve(&score_cov);
    let mut w = chol.solve(&half.transpose());
    linalg::symmetrize(&mut w);
    Ok(AsymptoticCov { v0, score_cov, w, mode, insufficient_data })
}

/// `SE_k = sqrt(W_kk / T)`.
pub fn standard_errors(cov: &AsymptoticCov, t: usize) -> DVector<f64> {
    cov.w.diagonal().map(|v| (v.max(0.0) / t as f64).sqrt())
}

/// JSON summary written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticSummary {
    pub mode: CovarianceMode,
    #[serde(rename = "T")]
    pub t: usize,
    pub se: Vec<f64>,
    #[serde(rename = "W_diag")]
    pub w_diag: Vec<f64>,
    #[serde(default, rename = "insufficientData")]
    pub insufficient_data: bool,
}

impl AsymptoticSummary {
    pub fn new(cov: &AsymptoticCov, t: usize) -> Self {
        Self {
            mode: cov.mode,
            t,
            se: standard_errors(cov, t).iter().copied().collect(),
            w_diag: cov.w.diagonal().iter().copied().collect(),
            insufficient_data: cov.insufficient_data,
        }
    }
}
