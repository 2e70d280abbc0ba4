//! Random model instances, data generation and the Monte Carlo harness.
//!
//! All randomness comes from ChaCha8 substreams keyed by
//! `(seed, cell, trial, purpose)`, so results do not depend on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};
use crate::estimation::{fit, nmse, sample_covariance, FitOptions, SampleCovariance};
use crate::model::{free_entries, params_from_slice, vectorize, ChannelStructure, FreeEntry, MfaParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Truth = 1,
    Data = 2,
    FitStart = 3,
    FitSeed = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(cell, trial, purpose)` under `seed`.
pub fn substream(seed: u64, cell: u64, trial: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(splitmix(splitmix(purpose as u64) ^ cell) ^ trial));
    rng
}

/// Latent factor law; every kind has zero mean and unit variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FactorDistribution {
    #[default]
    Gaussian,
    StudentT { dof: f64 },
    Uniform,
}

impl FactorDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::StudentT { dof } if !(dof > 2.0 && dof.is_finite()) => {
                Err(MfaError::Domain(format!("Student-t needs dof > 2 for unit variance, got {}", dof)))
            }
            _ => Ok(()),
        }
    }

    fn fill(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match *self {
            Self::Gaussian => out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
            Self::StudentT { dof } => {
                let t = StudentT::new(dof).expect("validated dof");
                let scale = (dof / (dof - 2.0)).sqrt();
                out.iter_mut().for_each(|v| *v = t.sample(rng) / scale);
            }
            Self::Uniform => {
                let s = 12f64.sqrt();
                out.iter_mut().for_each(|v| *v = (rng.random::<f64>() - 0.5) * s);
            }
        }
    }
}

impl std::str::FromStr for FactorDistribution {
    type Err = MfaError;

    /// `gaussian`, `uniform`, or `t<dof>` / `student-t:<dof>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let d = match lower.as_str() {
            "gaussian" | "normal" => Self::Gaussian,
            "uniform" => Self::Uniform,
            other => {
                let dof = other
                    .strip_prefix("student-t:")
                    .or_else(|| other.strip_prefix("t"))
                    .ok_or_else(|| MfaError::Parse(format!("unknown factor distribution '{}'", s)))?;
                let dof: f64 = dof.parse().map_err(|_| MfaError::Parse(format!("bad dof in '{}'", s)))?;
                Self::StudentT { dof }
            }
        };
        d.validate()?;
        Ok(d)
    }
}

/// Free entries N(0,1); lower-triangular diagonals and Φ take absolute
/// values and Φ is floored at `floor`.
pub fn random_params(structure: &ChannelStructure, seed: u64, floor: f64) -> MfaParams {
    let mut rng = substream(seed, 0, 0, Purpose::Truth);
    random_params_with_rng(structure, floor, &mut rng)
}

pub fn random_params_with_rng(structure: &ChannelStructure, floor: f64, rng: &mut ChaCha8Rng) -> MfaParams {
    let entries = free_entries(structure);
    let values: Vec<f64> = entries
        .iter()
        .map(|e| {
            let z: f64 = rng.sample(StandardNormal);
            match *e {
                FreeEntry::A { row, col } if row == col => z.abs(),
                FreeEntry::B { row, col, .. } if row == col => z.abs(),
                FreeEntry::Phi(_) => z.abs().max(floor),
                _ => z,
            }
        })
        .collect();
    let (a, b, phi) = params_from_slice(structure, &entries, &values);
    MfaParams::new(structure.clone(), a, b, phi).expect("random params satisfy the model constraints")
}

/// `T x n` matrix whose rows are `A f + B g + u`.
pub fn sample_mfa(params: &MfaParams, t: usize, dist: FactorDistribution, seed: u64) -> DMatrix<f64> {
    let mut rng = substream(seed, 0, 0, Purpose::Data);
    sample_mfa_with_rng(params, t, dist, &mut rng)
}

pub fn sample_mfa_with_rng(params: &MfaParams, t: usize, dist: FactorDistribution, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let s = params.structure();
    let n = s.n();
    let mut f = DMatrix::zeros(t, s.r0());
    dist.fill(rng, f.as_mut_slice());
    let mut x = f * params.a().transpose();
    for (c, blk) in params.b_blocks().iter().enumerate() {
        if blk.ncols() == 0 {
            continue;
        }
        let mut g = DMatrix::zeros(t, blk.ncols());
        dist.fill(rng, g.as_mut_slice());
        let off = s.n_before(c);
        let mut view = x.columns_mut(off, blk.nrows());
        view += g * blk.transpose();
    }
    let sd: DVector<f64> = params.phi().map(f64::sqrt);
    let mut u = DMatrix::zeros(t, n);
    FactorDistribution::Gaussian.fill(rng, u.as_mut_slice());
    for j in 0..n {
        let mut col = x.column_mut(j);
        col.axpy(sd[j], &u.column(j), 1.0);
    }
    x
}

/// Floor used for the MC truths and fits when the options leave ε open.
pub const DEFAULT_MC_EPSILON: f64 = 1e-3;

pub fn default_t_list() -> Vec<usize> {
    vec![100, 316, 1000, 3162, 10000]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct McConfig {
    /// Channel sizes and distinct factors; its `r0` is replaced by each entry of `r0_list`.
    pub structure: ChannelStructure,
    pub r0_list: Vec<usize>,
    #[serde(rename = "Tlist", alias = "tList")]
    pub t_list: Vec<usize>,
    pub trials: usize,
    #[serde(default)]
    pub dist: FactorDistribution,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "mc_fit_options")]
    pub fit_options: FitOptions,
    /// Replace the sample covariance by the population covariance.
    #[serde(default)]
    pub oracle: bool,
}

pub fn mc_fit_options() -> FitOptions {
    FitOptions { epsilon: Some(DEFAULT_MC_EPSILON), num_starts: 5, ..FitOptions::default() }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(MfaError::Domain("trials must be at least 1".into()));
        }
        if self.t_list.is_empty() || self.t_list.contains(&0) {
            return Err(MfaError::Domain("Tlist must hold positive sample sizes".into()));
        }
        if self.t_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MfaError::Domain("Tlist must be strictly ascending".into()));
        }
        for &r0 in &self.r0_list {
            self.structure.with_r0(r0).check_model_dims()?;
        }
        self.dist.validate()?;
        self.fit_options.validate()
    }

    fn epsilon(&self) -> f64 {
        self.fit_options.epsilon.unwrap_or(DEFAULT_MC_EPSILON)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub r0: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub mean_nmse: f64,
    pub stderr_nmse: f64,
    pub failures: usize,
}

/// NMSE of one trial, or `None` when the fit failed.
pub fn mc_trial(config: &McConfig, r0_index: usize, t_index: usize, trial: usize) -> Option<f64> {
    let r0 = config.r0_list[r0_index];
    let t = config.t_list[t_index];
    let structure = config.structure.with_r0(r0);
    let eps = config.epsilon();
    let cell = (r0_index * config.t_list.len() + t_index) as u64;
    // The truth depends on (r0, trial) only, so every T sees the same models.
    let mut truth_rng = substream(config.seed, r0_index as u64, trial as u64, Purpose::Truth);
    let truth = random_params_with_rng(&structure, eps, &mut truth_rng);
    let s = if config.oracle {
        SampleCovariance::from_model(&truth, t).ok()?
    } else {
        let mut data_rng = substream(config.seed, cell, trial as u64, Purpose::Data);
        let x = sample_mfa_with_rng(&truth, t, config.dist, &mut data_rng);
        sample_covariance(&x).ok()?
    };
    let fit_seed = substream(config.seed, cell, trial as u64, Purpose::FitSeed).random::<u64>();
    let opts = FitOptions { epsilon: Some(eps), seed: fit_seed, ..config.fit_options.clone() };
    let result = fit(&s, &structure, &opts).ok()?;
    let truth_eta = vectorize(&truth).ok()?;
    nmse(&result.eta_hat, &truth_eta).ok().filter(|v| v.is_finite())
}

/// Mean and standard error of the NMSE for every `(r0, T)` cell.
pub fn monte_carlo_nmse(config: &McConfig) -> Result<Vec<McRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for (i, &r0) in config.r0_list.iter().enumerate() {
        for (j, &t) in config.t_list.iter().enumerate() {
            let one = |k: usize| mc_trial(config, i, j, k);
            #[cfg(feature = "parallel")]
            let results: Vec<Option<f64>> = {
                use rayon::prelude::*;
                (0..config.trials).into_par_iter().map(one).collect()
            };
            #[cfg(not(feature = "parallel"))]
            let results: Vec<Option<f64>> = (0..config.trials).map(one).collect();
            rows.push(summarize(r0, t, &results));
        }
    }
    Ok(rows)
}

fn summarize(r0: usize, t: usize, results: &[Option<f64>]) -> McRow {
    let ok: Vec<f64> = results.iter().flatten().copied().collect();
    let failures = results.len() - ok.len();
    let k = ok.len() as f64;
    let (mean, stderr) = match ok.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (ok[0], 0.0),
        _ => {
            let mean = ok.iter().sum::<f64>() / k;
            let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (mean, (var / k).sqrt())
        }
    };
    McRow { r0, t, mean_nmse: mean, stderr_nmse: stderr, failures }
}

pub const MC_CSV_HEADER: &str = "r0,T,mean_nmse,stderr_nmse,failures";

pub fn mc_to_csv(rows: &[McRow]) -> String {
    let mut out = String::from(MC_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{:e},{:e},{}\n", r.r0, r.t, r.mean_nmse, r.stderr_nmse, r.failures));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_covariance;

    fn st(ch: &[usize], r0: usize, d: &[usize]) -> ChannelStructure {
        ChannelStructure::new(ch.to_vec(), r0, d.to_vec()).unwrap()
    }

    #[test]
    fn random_params_are_deterministic_and_canonical() {
        let s = st(&[4, 3], 2, &[1, 2]);
        let a = random_params(&s, 17, 1e-3);
        assert_eq!(a, random_params(&s, 17, 1e-3));
        assert_ne!(a, random_params(&s, 18, 1e-3));
        assert!(vectorize(&a).is_ok());
        assert!(a.phi().iter().all(|&v| v >= 1e-3));
        assert!(a.a()[(0, 0)] >= 0.0 && a.a()[(1, 1)] >= 0.0);
    }

    #[test]
    fn distribution_parsing() {
        assert_eq!("gaussian".parse::<FactorDistribution>().unwrap(), FactorDistribution::Gaussian);
        assert_eq!("t5".parse::<FactorDistribution>().unwrap(), FactorDistribution::StudentT { dof: 5.0 });
        assert_eq!("student-t:7.5".parse::<FactorDistribution>().unwrap(), FactorDistribution::StudentT { dof: 7.5 });
        assert!("t2".parse::<FactorDistribution>().is_err());
        assert!("cauchy".parse::<FactorDistribution>().is_err());
        let json = serde_json::to_string(&FactorDistribution::StudentT { dof: 5.0 }).unwrap();
        assert_eq!(json, r#"{"kind":"STUDENT_T","dof":5.0}"#);
    }

    #[test]
    fn zero_loadings_give_white_noise() {
        let s = st(&[2, 1], 0, &[0, 0]);
        let p = MfaParams::new(s, DMatrix::zeros(3, 0), vec![DMatrix::zeros(2, 0), DMatrix::zeros(1, 0)], DVector::from_element(3, 1.0)).unwrap();
        let x = sample_mfa(&p, 40_000, FactorDistribution::Uniform, 3);
        let s = sample_covariance(&x).unwrap();
        assert!((s.matrix() - DMatrix::identity(3, 3)).norm() < 0.05);
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let s = st(&[2, 2], 1, &[1, 1]);
        let p = random_params(&s, 1, 1e-3);
        let a = sample_mfa(&p, 10, FactorDistribution::StudentT { dof: 5.0 }, 9);
        assert_eq!(a, sample_mfa(&p, 10, FactorDistribution::StudentT { dof: 5.0 }, 9));
        assert_eq!(a.shape(), (10, 4));
        let _ = build_covariance(&p);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![McRow { r0: 9, t: 100, mean_nmse: 0.5, stderr_nmse: 0.25, failures: 1 }];
        assert_eq!(mc_to_csv(&rows), "r0,T,mean_nmse,stderr_nmse,failures\n9,100,5e-1,2.5e-1,1\n");
    }

    #[test]
    fn oracle_mc_recovers_truth() {
        let cfg = McConfig {
            structure: st(&[3, 3, 3], 0, &[1, 1, 1]),
            r0_list: vec![1],
            t_list: vec![100],
            trials: 1,
            dist: FactorDistribution::Gaussian,
            seed: 1,
            fit_options: FitOptions { num_starts: 5, ..mc_fit_options() },
            oracle: true,
        };
        let rows = monte_carlo_nmse(&cfg).unwrap();
        assert_eq!(rows[0].failures, 0);
        assert!(rows[0].mean_nmse <= 1e-8, "{}", rows[0].mean_nmse);
    }
}
