#![allow(dead_code)]

use mfa_core::{gradient, objective, ChannelStructure, EtaVector, SampleCovariance};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn st(ch: &[usize], r0: usize, d: &[usize]) -> ChannelStructure {
    ChannelStructure::new(ch.to_vec(), r0, d.to_vec()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Haar-ish orthogonal matrix from the QR of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    gaussian_matrix(rng, k, k).qr().q()
}

/// Structure with at most `max_c` channels of size at most `max_n` that
/// admits loadings (`r_c <= n_c`, `r0 <= n`).
pub fn random_structure(rng: &mut ChaCha8Rng, max_c: usize, max_n: usize, max_r: usize) -> ChannelStructure {
    let c = rng.random_range(1..=max_c);
    let ch: Vec<usize> = (0..c).map(|_| rng.random_range(1..=max_n)).collect();
    let d: Vec<usize> = ch.iter().map(|&n| rng.random_range(0..=n.min(max_r))).collect();
    let n: usize = ch.iter().sum();
    let r0 = rng.random_range(0..=n.min(max_r));
    st(&ch, r0, &d)
}

fn phi(n: i64, r: i64, rho: i64) -> i64 {
    r * (r + 1) / 2 - rho * (rho + 1) / 2 - rho * (r - rho) - n
}

/// Condition 2 by plain enumeration of every `(n', ρ)`: no pruning, no
/// symmetry reduction and no use of the monotonicity of ψ in ρ₀.
/// Returns `(holds, ψ*)`.
pub fn naive_condition2(channels: &[usize], r0: usize, distinct: &[usize]) -> (bool, Option<i64>) {
    let n: usize = channels.iter().sum();
    let r: usize = distinct.iter().sum();
    if distinct.iter().zip(channels).any(|(rc, nc)| rc > nc) || r0 + r > n {
        return (false, None);
    }
    let c = channels.len();
    let ns: Vec<i64> = channels.iter().map(|&v| v as i64).collect();
    let rs: Vec<i64> = distinct.iter().map(|&v| v as i64).collect();
    let r0 = r0 as i64;
    let mut best: Option<i64> = None;
    let mut np = vec![0i64; c];
    loop {
        if np.iter().sum::<i64>() > 0 {
            let rp: Vec<i64> = (0..c).map(|k| (rs[k] - (ns[k] - np[k])).max(0)).collect();
            let drop: i64 = (0..c).map(|k| (ns[k] - np[k] - rs[k]).max(0)).sum();
            let r0p = (r0 - drop).max(0);
            let caps: Vec<i64> = (0..c).map(|k| rp[k].min(2 * (r0p + rp[k]) - np[k])).collect();
            if caps.iter().all(|&m| m >= 0) {
                let mut rho = vec![0i64; c];
                loop {
                    let k_sum: i64 = (0..c).map(|k| 2 * rp[k] - rho[k] - np[k]).sum();
                    let rho0 = r0p.min(2 * r0p + k_sum);
                    if rho0 >= 0 {
                        let total: i64 = np.iter().sum();
                        let mut psi = total + phi(total, r0p, rho0);
                        for k in 0..c {
                            psi += phi(np[k], rp[k], rho[k]) + rp[k] * (r0p - rho0);
                        }
                        best = Some(best.map_or(psi, |b| b.min(psi)));
                    }
                    if !odometer(&mut rho, &caps) {
                        break;
                    }
                }
            }
        }
        if !odometer(&mut np, &ns) {
            break;
        }
    }
    match best {
        None => (true, None),
        Some(p) => (p > 0, Some(p)),
    }
}

fn odometer(v: &mut [i64], max: &[i64]) -> bool {
    for k in 0..v.len() {
        if v[k] < max[k] {
            v[k] += 1;
            return true;
        }
        v[k] = 0;
    }
    false
}

/// Central finite-difference gradient of the objective in η.
pub fn fd_gradient(eta: &EtaVector, s: &SampleCovariance) -> DVector<f64> {
    let base = eta.values().clone();
    DVector::from_fn(base.len(), |k, _| {
        let h = 1e-6 * (1.0 + base[k].abs());
        let at = |d: f64| {
            let mut v = base.clone();
            v[k] += d;
            objective(&EtaVector::new(eta.structure().clone(), v).unwrap(), s).unwrap()
        };
        (at(h) - at(-h)) / (2.0 * h)
    })
}

/// `max_k |g_k − fd_k| / max(1, ‖g‖∞)`.
pub fn gradient_error(eta: &EtaVector, s: &SampleCovariance) -> f64 {
    let g = gradient(eta, s).unwrap();
    let fd = fd_gradient(eta, s);
    (&g - &fd).amax() / g.amax().max(1.0)
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
