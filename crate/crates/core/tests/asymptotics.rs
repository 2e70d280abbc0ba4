mod common;

use common::{rel_frobenius, st};
use mfa_core::identifiability::local_identifiability_numeric;
use mfa_core::{
    asymptotic_cov, gradient, hessian_v0, linalg, random_params, sample_mfa, score_covariance, unvectorize,
    vectorize, EtaVector, FactorDistribution, SampleCovariance,
};
use nalgebra::{DMatrix, DVector};

fn small_eta(seed: u64) -> EtaVector {
    vectorize(&random_params(&st(&[2, 2], 1, &[1, 1]), seed, 0.3)).unwrap()
}

#[test]
fn gaussian_score_covariance_is_twice_v0() {
    let eta = small_eta(1);
    let target = hessian_v0(&eta).unwrap() * 2.0;
    let x = sample_mfa(&unvectorize(&eta), 100_000, FactorDistribution::Gaussian, 21);
    let emp = score_covariance(&eta, Some(&x)).unwrap();
    let e = rel_frobenius(&emp, &target);
    assert!(e < 0.03, "relative error {}", e);
    assert!(e < 0.05);
    assert_eq!(score_covariance(&eta, None).unwrap(), target);
}

#[test]
fn heavy_tails_change_the_loading_block() {
    let eta = small_eta(1);
    let target = hessian_v0(&eta).unwrap() * 2.0;
    let x = sample_mfa(&unvectorize(&eta), 100_000, FactorDistribution::StudentT { dof: 5.0 }, 22);
    let emp = score_covariance(&eta, Some(&x)).unwrap();
    // Loading coordinates come before the n noise variances.
    let k = eta.len() - 4;
    let e = rel_frobenius(&emp.view((0, 0), (k, k)).into_owned(), &target.view((0, 0), (k, k)).into_owned());
    assert!(e > 0.10, "relative difference {}", e);
}

#[test]
fn sandwich_converges_at_root_t() {
    let eta = small_eta(3);
    let target = hessian_v0(&eta).unwrap() * 2.0;
    let p = unvectorize(&eta);
    for (i, t) in [1_000usize, 10_000, 100_000].into_iter().enumerate() {
        let x = sample_mfa(&p, t, FactorDistribution::Gaussian, 40 + i as u64);
        let e = rel_frobenius(&score_covariance(&eta, Some(&x)).unwrap(), &target);
        assert!(e < 10.0 / (t as f64).sqrt(), "T = {}: {}", t, e);
    }
}

#[test]
fn v0_is_the_hessian_of_the_population_objective() {
    let s = st(&[3, 3], 1, &[1, 1]);
    let p = random_params(&s, 8, 0.2);
    let eta = vectorize(&p).unwrap();
    let cov = SampleCovariance::from_model(&p, 10).unwrap();
    let v0 = hessian_v0(&eta).unwrap();
    let l = eta.len();
    let mut fd = DMatrix::zeros(l, l);
    for k in 0..l {
        let h = 1e-5 * (1.0 + eta.values()[k].abs());
        let at = |d: f64| {
            let mut v = eta.values().clone();
            v[k] += d;
            gradient(&EtaVector::new(s.clone(), v).unwrap(), &cov).unwrap()
        };
        fd.set_column(k, &((at(h) - at(-h)) / (2.0 * h)));
    }
    assert!(rel_frobenius(&fd, &v0) < 1e-6, "{}", rel_frobenius(&fd, &v0));
}

#[test]
fn quadratic_form_identity_for_many_directions() {
    let s = st(&[3, 4], 2, &[1, 2]);
    let p = random_params(&s, 2, 0.1);
    let eta = vectorize(&p).unwrap();
    let v0 = hessian_v0(&eta).unwrap();
    let r = mfa_core::build_covariance(&p);
    let chol = r.cholesky().unwrap();
    let f = mfa_core::differential::derivative_factors(&p);
    let mut g = common::rng(77);
    for _ in 0..100 {
        let d = common::gaussian_matrix(&mut g, eta.len(), 1).column(0).into_owned();
        let mut x = f.apply(d.as_slice());
        chol.l().solve_lower_triangular_mut(&mut x);
        let mut y = x.transpose();
        chol.l().solve_lower_triangular_mut(&mut y);
        let want = y.norm_squared();
        let got = (d.transpose() * &v0 * &d)[(0, 0)];
        assert!((got - want).abs() <= 1e-10 * want);
    }
}

#[test]
fn v0_definiteness_tracks_local_identifiability() {
    let mut g = common::rng(5150);
    for k in 0..30u64 {
        let s = common::random_structure(&mut g, 3, 4, 3);
        let p = random_params(&s, k, 1e-2);
        let eta = vectorize(&p).unwrap();
        let v0 = hessian_v0(&eta).unwrap();
        let ev = linalg::sym_eigenvalues(&v0);
        let (min, max) = (ev[0], ev[ev.len() - 1]);
        assert!(min >= -1e-10 * max);
        let pd = min > linalg::RANK_TOL * max;
        assert_eq!(pd, local_identifiability_numeric(&p).identifiable, "{:?}", s);
        if pd {
            let w = asymptotic_cov(&eta, None).unwrap().w;
            assert!((&w - w.transpose()).amax() <= 1e-12 * w.amax());
            assert!(linalg::sym_eigenvalues(&w)[0] > 0.0);
        }
    }
}

#[test]
fn diagonal_model_w() {
    let phi = DVector::from_vec(vec![0.3, 1.7]);
    let eta = EtaVector::new(st(&[1, 1], 0, &[0, 0]), phi.clone()).unwrap();
    let cov = asymptotic_cov(&eta, None).unwrap();
    for i in 0..2 {
        assert!((cov.w[(i, i)] - 2.0 * phi[i] * phi[i]).abs() < 1e-12);
    }
}
