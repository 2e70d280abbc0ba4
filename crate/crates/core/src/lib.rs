//! Multi-channel factor analysis (MFA).
//!
//! The observation `x = [x_1; …; x_C]` has covariance
//! `R = A Aᵀ + B Bᵀ + Φ`, where `A` holds loadings on factors shared by all
//! channels, `B = blkdiag(B_1, …, B_C)` loadings on channel-specific factors,
//! and `Φ` is diagonal noise. The crate covers
//!
//! * the model and its canonical parameter vector η ([`model`]),
//! * exact identifiability conditions and max-`r0` scans ([`identifiability`]),
//! * quasi-maximum-likelihood fitting ([`estimation`]),
//! * the sandwich covariance of the estimator ([`asymptotics`]),
//! * data generation and Monte Carlo experiments ([`simulation`]).

pub mod asymptotics;
pub mod differential;
pub mod error;
pub mod estimation;
pub mod identifiability;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod simulation;

pub use asymptotics::{asymptotic_cov, hessian_v0, score_covariance, standard_errors, AsymptoticCov, CovarianceMode};
pub use error::{MfaError, Result};
pub use estimation::{fit, gradient, nmse, objective, sample_covariance, FitOptions, FitResult, SampleCovariance};
pub use identifiability::{
    check_condition1, check_condition2, check_condition3, check_condition4, fcr_submatrix_test,
    identifiability_report, local_identifiability_numeric, max_r0, phi_criterion, psi_criterion, ConditionSet,
    IdentifiabilityReport, Verdict,
};
pub use model::{
    build_covariance, canonicalize, decompose_params, eta_dim, unvectorize, vectorize, ChannelStructure,
    CovarianceTriple, EtaVector, MfaParams,
};
pub use simulation::{monte_carlo_nmse, random_params, sample_mfa, FactorDistribution, McConfig};
