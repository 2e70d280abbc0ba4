//! Quasi-maximum-likelihood fitting of the MFA model.
//!
//! The objective is `ℓ(S; η) = log det R(η) + tr(R(η)⁻¹ S)`. The fitter runs
//! L-BFGS on the free loadings and `s`, with `Φ = ε + s²` so the floor
//! `Φ ≥ ε` holds by construction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};
use crate::linalg;
use crate::model::{
    build_covariance, canonicalize, entry_value, free_entries, full_entries, params_from_slice, vectorize, ChannelStructure, EtaVector,
    FreeEntry, MfaParams,
};
use crate::asymptotics::v0_for_entries;
use crate::optim::{self, LbfgsOptions, NewtonOptions};
use crate::simulation::{random_params_with_rng, substream, Purpose};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleCovariance {
    s: DMatrix<f64>,
    t: usize,
}

impl SampleCovariance {
    /// Wraps a given covariance matrix; it is symmetrized and checked for PSD.
    pub fn new(mut s: DMatrix<f64>, t: usize) -> Result<Self> {
        if !s.is_square() {
            return Err(MfaError::DimensionMismatch(format!("covariance is {}x{}", s.nrows(), s.ncols())));
        }
        if s.nrows() == 0 || t == 0 {
            return Err(MfaError::EmptyData("covariance needs n >= 1 and T >= 1".into()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(MfaError::Domain("covariance has non-finite entries".into()));
        }
        linalg::symmetrize(&mut s);
        let ev = linalg::sym_eigenvalues(&s);
        let norm = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if ev[0] < -1e-10 * norm {
            return Err(MfaError::Domain(format!("covariance is not PSD (lambda_min = {:e})", ev[0])));
        }
        Ok(Self { s, t })
    }

    /// Population covariance of `params`, used as an exact "sample".
    pub fn from_model(params: &MfaParams, t: usize) -> Result<Self> {
        Self::new(build_covariance(params), t)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }
}

/// `S = XᵀX / T` for the `T x n` data matrix, without mean removal.
pub fn sample_covariance(data: &DMatrix<f64>) -> Result<SampleCovariance> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(MfaError::EmptyData(format!("data matrix is {}x{}", data.nrows(), data.ncols())));
    }
    let t = data.nrows();
    let s = data.tr_mul(data) / t as f64;
    SampleCovariance::new(s, t)
}

/// Subtracts the column means in place.
pub fn center_columns(data: &mut DMatrix<f64>) {
    for mut col in data.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

fn factor(r: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(r).ok_or(MfaError::NonPd)
}

fn check_dims(structure: &ChannelStructure, s: &SampleCovariance) -> Result<()> {
    if structure.n() != s.dim() {
        return Err(MfaError::DimensionMismatch(format!(
            "structure expects n = {} but the covariance is {}x{}",
            structure.n(),
            s.dim(),
            s.dim()
        )));
    }
    Ok(())
}

fn objective_params(params: &MfaParams, s: &SampleCovariance) -> Result<f64> {
    let chol = factor(build_covariance(params))?;
    let l = chol.l_dirty();
    let logdet: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    // tr(R⁻¹S) = tr(L⁻¹ S L⁻ᵀ).
    let mut y = s.matrix().clone();
    chol.l().solve_lower_triangular_mut(&mut y);
    let mut z = y.transpose();
    chol.l().solve_lower_triangular_mut(&mut z);
    Ok(logdet + z.trace())
}

/// `ℓ(S; η) = log det R(η) + tr(R(η)⁻¹ S)`.
pub fn objective(eta: &EtaVector, s: &SampleCovariance) -> Result<f64> {
    check_dims(eta.structure(), s)?;
    objective_params(&crate::model::unvectorize(eta), s)
}

/// Objective and `M = R⁻¹ − R⁻¹ S R⁻¹` in one factorization.
fn objective_and_m(params: &MfaParams, s: &SampleCovariance) -> Result<(f64, DMatrix<f64>)> {
    let n = params.structure().n();
    let chol = factor(build_covariance(params))?;
    let l = chol.l_dirty();
    let logdet: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let rinv = chol.solve(&DMatrix::identity(n, n));
    let p = &rinv * s.matrix();
    let f = logdet + p.trace();
    let mut m = &rinv - &p * &rinv;
    linalg::symmetrize(&mut m);
    Ok((f, m))
}

fn gradient_from_m(params: &MfaParams, m: &DMatrix<f64>, entries: &[FreeEntry]) -> DVector<f64> {
    let s = params.structure();
    let ma = m * params.a();
    let mb: Vec<DMatrix<f64>> = params
        .b_blocks()
        .iter()
        .enumerate()
        .map(|(c, blk)| {
            let off = s.n_before(c);
            let nc = s.channels()[c];
            m.view((off, off), (nc, nc)) * blk
        })
        .collect();
    DVector::from_iterator(
        entries.len(),
        entries.iter().map(|e| match *e {
            FreeEntry::A { row, col } => 2.0 * ma[(row, col)],
            FreeEntry::B { channel, row, col } => 2.0 * mb[channel][(row, col)],
            FreeEntry::Phi(i) => m[(i, i)],
        }),
    )
}

/// Analytic gradient `∂ℓ/∂η_k = tr(M ∂R/∂η_k)`.
pub fn gradient(eta: &EtaVector, s: &SampleCovariance) -> Result<DVector<f64>> {
    check_dims(eta.structure(), s)?;
    let params = crate::model::unvectorize(eta);
    let (_, m) = objective_and_m(&params, s)?;
    Ok(gradient_from_m(&params, &m, &free_entries(eta.structure())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitOptions {
    /// Heywood floor; `None` means `1e-4 · mean(diag S)`.
    pub epsilon: Option<f64>,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub num_starts: usize,
    pub seed: u64,
    /// L-BFGS history length.
    #[serde(default = "default_memory")]
    pub memory: usize,
    #[serde(default)]
    pub method: FitMethod,
    #[serde(default)]
    pub coordinates: Coordinates,
}

/// Coordinates the optimizer works in. `Full` uses every loading entry
/// (rotation-redundant); the result is canonicalized either way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Coordinates {
    Canonical,
    #[default]
    Full,
}

fn default_memory() -> usize {
    10
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_iterations: 5000,
            grad_tolerance: 1e-8,
            num_starts: 20,
            seed: 0,
            memory: 10,
            method: FitMethod::default(),
            coordinates: Coordinates::default(),
        }
    }
}

/// Descent used by each start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FitMethod {
    Lbfgs,
    FisherScoring,
    /// L-BFGS until the relative gradient reaches `HYBRID_SWITCH_TOLERANCE`
    /// (at most `HYBRID_WARMUP` iterations), then damped Fisher scoring.
    #[default]
    Hybrid,
}

/// Newton steps taken past the gradient tolerance while they still help.
pub const POLISH_STEPS: usize = 3;

pub const HYBRID_WARMUP: usize = 3000;
pub const HYBRID_SWITCH_TOLERANCE: f64 = 1e-6;

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(MfaError::Domain(format!("epsilon must be positive, got {}", e)));
            }
        }
        if self.num_starts == 0 {
            return Err(MfaError::Domain("numStarts must be at least 1".into()));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(MfaError::Domain("gradTolerance must be positive".into()));
        }
        if self.memory == 0 {
            return Err(MfaError::Domain("memory must be at least 1".into()));
        }
        Ok(())
    }

    pub fn resolved_epsilon(&self, s: &SampleCovariance) -> f64 {
        self.epsilon.unwrap_or_else(|| {
            let mean = s.matrix().diagonal().mean();
            if mean > 0.0 {
                1e-4 * mean
            } else {
                1e-4
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StartSummary {
    pub index: usize,
    pub initial_objective: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitResult {
    pub eta_hat: EtaVector,
    pub objective: f64,
    /// `‖∂ℓ/∂θ‖∞ / (1 + |ℓ|)` at the returned point.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub start_index: usize,
    pub epsilon: f64,
    pub starts: Vec<StartSummary>,
}

/// Objective in the optimizer coordinates `θ = (loadings, s)`.
struct Problem<'a> {
    structure: &'a ChannelStructure,
    entries: Vec<FreeEntry>,
    s: &'a SampleCovariance,
    epsilon: f64,
    n_load: usize,
}

impl<'a> Problem<'a> {
    fn new(structure: &'a ChannelStructure, s: &'a SampleCovariance, epsilon: f64, coords: Coordinates) -> Self {
        let entries = match coords {
            Coordinates::Canonical => free_entries(structure),
            Coordinates::Full => full_entries(structure),
        };
        let n_load = entries.len() - structure.n();
        Self { structure, entries, s, epsilon, n_load }
    }

    fn eta_values(&self, theta: &DVector<f64>) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(k, &v)| if k < self.n_load { v } else { self.epsilon + v * v })
            .collect()
    }

    fn params(&self, theta: &DVector<f64>) -> MfaParams {
        let (a, b, phi) = params_from_slice(self.structure, &self.entries, &self.eta_values(theta));
        MfaParams::new(self.structure.clone(), a, b, phi).expect("floored params are valid")
    }

    fn eval(&self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let p = self.params(theta);
        let (f, m) = objective_and_m(&p, self.s).ok()?;
        let mut g = gradient_from_m(&p, &m, &self.entries);
        for k in self.n_load..g.len() {
            g[k] *= 2.0 * theta[k];
        }
        Some((f, g))
    }

    fn eval_f(&self, theta: &DVector<f64>) -> Option<f64> {
        objective_params(&self.params(theta), self.s).ok()
    }

    /// Objective, gradient and Fisher curvature `Dᵀ V0 D` in θ, where `D` is
    /// the Jacobian of `θ ↦ η`. The Φ diagonal also gets the positive part
    /// of the chain-rule term `2 ∂ℓ/∂Φ`.
    fn eval_fisher(&self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let p = self.params(theta);
        let (f, m) = objective_and_m(&p, self.s).ok()?;
        let mut g = gradient_from_m(&p, &m, &self.entries);
        let mut h = v0_for_entries(&p, &self.entries).ok()?;
        let d: Vec<f64> = (0..g.len()).map(|k| if k < self.n_load { 1.0 } else { 2.0 * theta[k] }).collect();
        for j in 0..g.len() {
            for i in 0..g.len() {
                h[(i, j)] *= d[i] * d[j];
            }
        }
        for k in self.n_load..g.len() {
            h[(k, k)] += (2.0 * g[k]).max(0.0);
            g[k] *= d[k];
        }
        Some((f, g, h))
    }

    fn theta_from(&self, params: &MfaParams) -> DVector<f64> {
        DVector::from_iterator(
            self.entries.len(),
            self.entries.iter().map(|&e| entry_value(params, e)).enumerate().map(|(k, v)| {
                if k < self.n_load {
                    v
                } else {
                    let s = (v - self.epsilon).max(0.0).sqrt();
                    if s > 0.0 {
                        s
                    } else {
                        1e-3 * self.epsilon.sqrt()
                    }
                }
            }),
        )
    }
}

/// Random start following the truth-generation protocol, rescaled so that
/// the model's mean variance matches that of `S`.
fn initial_params(structure: &ChannelStructure, s: &SampleCovariance, seed: u64, start: usize) -> MfaParams {
    let mut rng = substream(seed, start as u64, 0, Purpose::FitStart);
    let p = random_params_with_rng(structure, 0.0, &mut rng);
    let model_scale = build_covariance(&p).diagonal().mean();
    let data_scale = s.matrix().diagonal().mean();
    if !(model_scale > 0.0 && data_scale > 0.0) {
        return p;
    }
    let k = (data_scale / model_scale).sqrt();
    MfaParams::new(
        structure.clone(),
        p.a() * k,
        p.b_blocks().iter().map(|b| b * k).collect(),
        p.phi() * (k * k),
    )
    .expect("scaling preserves validity")
}

fn run_start(problem: &Problem<'_>, theta0: DVector<f64>, options: &FitOptions, index: usize) -> Option<(StartSummary, DVector<f64>)> {
    let lbfgs = |max_iterations: usize, grad_tolerance: f64| LbfgsOptions {
        memory: options.memory,
        max_iterations,
        grad_tolerance,
        ..LbfgsOptions::default()
    };
    let newton = |theta: DVector<f64>, max_iterations: usize| {
        let opts = NewtonOptions { max_iterations, grad_tolerance: options.grad_tolerance, polish_steps: POLISH_STEPS };
        optim::damped_newton(|t| problem.eval_fisher(t), |t| problem.eval_f(t), theta, &opts)
    };
    let (initial, r, iterations) = match options.method {
        FitMethod::Lbfgs => {
            let r = optim::minimize(|t| problem.eval(t), theta0, &lbfgs(options.max_iterations, options.grad_tolerance))?;
            let it = r.iterations;
            (r.trace[0], r, it)
        }
        FitMethod::FisherScoring => {
            let r = newton(theta0, options.max_iterations)?;
            let it = r.iterations;
            (r.trace[0], r, it)
        }
        FitMethod::Hybrid => {
            let warm = HYBRID_WARMUP.min(options.max_iterations);
            let tol = options.grad_tolerance.max(HYBRID_SWITCH_TOLERANCE);
            let a = optim::minimize(|t| problem.eval(t), theta0, &lbfgs(warm, tol))?;
            let b = newton(a.x, options.max_iterations - a.iterations)?;
            let it = a.iterations + b.iterations;
            (a.trace[0], b, it)
        }
    };
    let summary = StartSummary {
        index,
        initial_objective: initial,
        objective: r.f,
        grad_norm: optim::relative_grad_norm(&r.grad, r.f),
        iterations,
        converged: r.converged,
    };
    Some((summary, r.x))
}

/// Multi-start quasi-ML fit. The best converged start wins (lowest objective,
/// ties to the lowest index); the returned η̂ is canonicalized.
pub fn fit(s: &SampleCovariance, structure: &ChannelStructure, options: &FitOptions) -> Result<FitResult> {
    fit_starts(s, structure, options, options.num_starts, |i| initial_params(structure, s, options.seed, i))
}

/// Single run started from `start`, e.g. a pilot estimate. `numStarts` is ignored.
pub fn refine(s: &SampleCovariance, start: &MfaParams, options: &FitOptions) -> Result<FitResult> {
    fit_starts(s, start.structure(), options, 1, |_| start.clone())
}

fn fit_starts<I>(
    s: &SampleCovariance,
    structure: &ChannelStructure,
    options: &FitOptions,
    count: usize,
    init: I,
) -> Result<FitResult>
where
    I: Fn(usize) -> MfaParams + Sync,
{
    options.validate()?;
    check_dims(structure, s)?;
    structure.check_model_dims()?;
    let epsilon = options.resolved_epsilon(s);
    let problem = Problem::new(structure, s, epsilon, options.coordinates);
    let one = |i: usize| {
        let theta0 = problem.theta_from(&init(i));
        run_start(&problem, theta0, options, i)
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<_> = {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<_> = (0..count).map(one).collect();

    let starts: Vec<StartSummary> = runs.iter().flatten().map(|(s, _)| s.clone()).collect();
    let pick = |require_converged: bool| {
        runs.iter()
            .flatten()
            .filter(|(s, _)| !require_converged || s.converged)
            .min_by(|(a, _), (b, _)| a.objective.total_cmp(&b.objective).then(a.index.cmp(&b.index)))
    };
    let (best, converged) = match pick(true) {
        Some(b) => (b, true),
        None => (pick(false).ok_or(MfaError::NonPd)?, false),
    };
    let params = canonicalize(&problem.params(&best.1));
    let eta_hat = vectorize(&params)?;
    let result = FitResult {
        eta_hat,
        objective: best.0.objective,
        grad_norm: best.0.grad_norm,
        iterations: best.0.iterations,
        converged,
        start_index: best.0.index,
        epsilon,
        starts,
    };
    if converged {
        Ok(result)
    } else {
        Err(MfaError::AllStartsFailed { starts: count, best: Box::new(result) })
    }
}

/// `‖η̂ − η̊‖² / ‖η̊‖²`.
pub fn nmse(eta_hat: &EtaVector, eta_true: &EtaVector) -> Result<f64> {
    if eta_hat.structure() != eta_true.structure() {
        return Err(MfaError::DimensionMismatch("nmse needs two vectors of the same structure".into()));
    }
    let denom = eta_true.values().norm_squared();
    if denom == 0.0 {
        return Err(MfaError::ZeroNorm);
    }
    Ok((eta_hat.values() - eta_true.values()).norm_squared() / denom)
}
