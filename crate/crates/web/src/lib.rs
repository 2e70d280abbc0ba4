//! Browser bindings for the `www/` demo page: identifiability verdicts,
//! max-`r0` sweeps and a small simulate-and-fit run, all returning JSON.

use serde_json::json;
use wasm_bindgen::prelude::*;

use mfa_core::identifiability::{sweep_equal_channels, SweepRow};
use mfa_core::simulation::DEFAULT_MC_EPSILON;
use mfa_core::{
    fit, identifiability_report, nmse, random_params, sample_covariance, sample_mfa, vectorize, ChannelStructure,
    FactorDistribution, FitOptions,
};

/// Largest total dimension the fit demo accepts; keeps the page responsive.
pub const FIT_DEMO_MAX_N: usize = 24;
pub const FIT_DEMO_MAX_T: usize = 20_000;
const SWEEP_MAX_SIZE: usize = 40;

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("{}: {:?} is not a non-negative integer", what, t)))
        .collect()
}

fn structure(channels: &str, r0: usize, distinct: &str) -> Result<ChannelStructure, String> {
    ChannelStructure::new(parse_list(channels, "channels")?, r0, parse_list(distinct, "distinct")?)
        .map_err(|e| e.to_string())
}

pub fn check_json(channels: &str, r0: usize, distinct: &str) -> Result<String, String> {
    let s = structure(channels, r0, distinct)?;
    let report = identifiability_report(&s, None).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

pub fn sweep_json(lo: usize, hi: usize, distinct: &str) -> Result<String, String> {
    let d = parse_list(distinct, "distinct")?;
    if d.is_empty() {
        return Err("distinct needs at least one channel".into());
    }
    if hi > SWEEP_MAX_SIZE {
        return Err(format!("channel sizes above {} are not offered here", SWEEP_MAX_SIZE));
    }
    let rows: Vec<SweepRow> = sweep_equal_channels(lo..=hi, &d).map_err(|e| e.to_string())?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

pub fn fit_demo_json(channels: &str, r0: usize, distinct: &str, t: usize, seed: u64) -> Result<String, String> {
    let s = structure(channels, r0, distinct)?;
    s.check_model_dims().map_err(|e| e.to_string())?;
    if s.n() > FIT_DEMO_MAX_N {
        return Err(format!("the demo fits at most n = {} observed dimensions", FIT_DEMO_MAX_N));
    }
    if t == 0 || t > FIT_DEMO_MAX_T {
        return Err(format!("T must be between 1 and {}", FIT_DEMO_MAX_T));
    }
    let truth = random_params(&s, seed, DEFAULT_MC_EPSILON);
    let x = sample_mfa(&truth, t, FactorDistribution::Gaussian, seed);
    let cov = sample_covariance(&x).map_err(|e| e.to_string())?;
    let options = FitOptions { epsilon: Some(DEFAULT_MC_EPSILON), num_starts: 4, seed, ..FitOptions::default() };
    let (result, converged) = match fit(&cov, &s, &options) {
        Ok(r) => (r, true),
        Err(mfa_core::MfaError::AllStartsFailed { best, .. }) => (*best, false),
        Err(e) => return Err(e.to_string()),
    };
    let eta_true = vectorize(&truth).map_err(|e| e.to_string())?;
    let err = nmse(&result.eta_hat, &eta_true).map_err(|e| e.to_string())?;
    let out = json!({
        "T": t,
        "nmse": err,
        "objective": result.objective,
        "converged": converged,
        "iterations": result.iterations,
        "truth": eta_true.values().as_slice(),
        "estimate": result.eta_hat.values().as_slice(),
    });
    Ok(out.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Identifiability report for comma-separated channel sizes and distinct counts.
#[wasm_bindgen]
pub fn check(channels: &str, r0: usize, distinct: &str) -> Result<String, JsError> {
    js(check_json(channels, r0, distinct))
}

/// Max-`r0` rows for equal channel sizes `lo..=hi`.
#[wasm_bindgen]
pub fn sweep(lo: usize, hi: usize, distinct: &str) -> Result<String, JsError> {
    js(sweep_json(lo, hi, distinct))
}

/// Draws a random model, simulates `t` rows and fits them.
#[wasm_bindgen(js_name = fitDemo)]
pub fn fit_demo(channels: &str, r0: usize, distinct: &str, t: usize, seed: u32) -> Result<String, JsError> {
    js(fit_demo_json(channels, r0, distinct, t, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn check_reports_verdicts() {
        let v: Value = serde_json::from_str(&check_json("8, 8, 8", 9, "2,2,2").unwrap()).unwrap();
        assert_eq!(v["verdict"], "GLOBAL");
        let v: Value = serde_json::from_str(&check_json("8,8,8", 12, "2,2,2").unwrap()).unwrap();
        assert_eq!(v["verdict"], "LOCAL_ONLY");
        assert!(check_json("8,x", 1, "1,1").is_err());
        assert!(check_json("8,8", 1, "1").is_err());
    }

    #[test]
    fn sweep_rows() {
        let v: Value = serde_json::from_str(&sweep_json(8, 9, "2,2,2").unwrap()).unwrap();
        assert_eq!(v[0]["n_c"], 8);
        assert_eq!(v[0]["r0_local"], 12);
        assert_eq!(v[0]["r0_global"], 9);
        assert_eq!(sweep_json(9, 8, "2,2,2").unwrap(), "[]");
        assert!(sweep_json(5, 500, "1").is_err());
    }

    #[test]
    fn fit_demo_recovers_small_model() {
        let v: Value = serde_json::from_str(&fit_demo_json("5,5", 1, "1,1", 5000, 3).unwrap()).unwrap();
        assert!(v["nmse"].as_f64().unwrap() < 0.05, "{}", v["nmse"]);
        assert_eq!(v["truth"].as_array().unwrap().len(), v["estimate"].as_array().unwrap().len());
        assert!(fit_demo_json("20,20", 1, "1,1", 100, 1).is_err());
        assert!(fit_demo_json("4,4", 1, "1,1", 0, 1).is_err());
    }
}
