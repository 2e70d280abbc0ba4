use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use mfa_core::asymptotics::AsymptoticSummary;
use mfa_core::estimation::{center_columns, FitMethod};
use mfa_core::identifiability::ConditionSet;
use mfa_core::simulation::{mc_fit_options, mc_to_csv, DEFAULT_MC_EPSILON};
use mfa_core::{
    asymptotic_cov, fit, identifiability_report, io, max_r0, nmse, sample_covariance, sample_mfa, vectorize,
    ChannelStructure, EtaVector, FactorDistribution, FitOptions, FitResult, McConfig, MfaError, MfaParams,
    Verdict,
};

use crate::error::{self, CliError, EXIT_LOCAL_ONLY, EXIT_NOT_IDENTIFIABLE};
use crate::settings::{resolve, Common, Format};

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => io::atomic_write(p, text.as_bytes()).map_err(error::input),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| CliError::data(e.to_string()))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn json_only(common: &Common, what: &str) -> Result<(), CliError> {
    match common.format {
        Some(Format::Csv) => Err(CliError::usage(format!("{} output is JSON only", what))),
        _ => Ok(()),
    }
}

fn read_params(path: &Path) -> Result<MfaParams, CliError> {
    io::read_json(path).map_err(|e| CliError::data(format!("{}: {}", path.display(), e)))
}

fn read_data(path: &Path, center: bool) -> Result<DMatrix<f64>, CliError> {
    let mut x = io::read_data_matrix(path).map_err(|e| CliError::data(format!("{}: {}", path.display(), e)))?;
    if center {
        center_columns(&mut x);
    }
    Ok(x)
}

/// Structure from the flags, else from `fallback` (e.g. a parameter file).
fn structure_or(common: &Common, fallback: Option<&ChannelStructure>) -> Result<ChannelStructure, CliError> {
    let given = common.channels.is_some() || common.r0.is_some() || common.distinct.is_some();
    match fallback {
        Some(s) if !given => Ok(s.clone()),
        Some(s) => {
            let flags = common.structure()?;
            if &flags != s {
                return Err(CliError::usage("structure flags disagree with the parameter file"));
            }
            Ok(flags)
        }
        None => common.structure(),
    }
}

fn deserialize_dist<'de, D: Deserializer<'de>>(d: D) -> Result<Option<FactorDistribution>, D::Error> {
    match Option::<Value>::deserialize(d)? {
        None => Ok(None),
        Some(Value::String(s)) => FactorDistribution::from_str(&s).map(Some).map_err(serde::de::Error::custom),
        Some(v) => serde_json::from_value(v).map(Some).map_err(serde::de::Error::custom),
    }
}

fn parse_dist(s: &str) -> Result<FactorDistribution, String> {
    FactorDistribution::from_str(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<FitMethod, String> {
    match s.to_ascii_lowercase().as_str() {
        "lbfgs" => Ok(FitMethod::Lbfgs),
        "fisher" | "fisher-scoring" | "fisher_scoring" => Ok(FitMethod::FisherScoring),
        "hybrid" => Ok(FitMethod::Hybrid),
        _ => Err(format!("unknown method {:?} (lbfgs, fisher, hybrid)", s)),
    }
}

fn deserialize_method<'de, D: Deserializer<'de>>(d: D) -> Result<Option<FitMethod>, D::Error> {
    match Option::<Value>::deserialize(d)? {
        None => Ok(None),
        Some(Value::String(s)) => match parse_method(&s) {
            Ok(m) => Ok(Some(m)),
            Err(_) => serde_json::from_value(Value::String(s)).map(Some).map_err(serde::de::Error::custom),
        },
        Some(v) => serde_json::from_value(v).map(Some).map_err(serde::de::Error::custom),
    }
}

/// Fit settings shared by `fit` and `mc`.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_starts: Option<usize>,
    /// Heywood floor on Phi.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_tolerance: Option<f64>,
    /// lbfgs, fisher or hybrid.
    #[arg(long, value_parser = parse_method)]
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "deserialize_method")]
    pub method: Option<FitMethod>,
    /// Full options object (config file only).
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_options: Option<FitOptions>,
}

impl FitFlags {
    fn apply(&self, base: FitOptions, seed: Option<u64>) -> FitOptions {
        let mut o = self.fit_options.clone().unwrap_or(base);
        if let Some(v) = self.num_starts {
            o.num_starts = v;
        }
        if let Some(v) = self.epsilon {
            o.epsilon = Some(v);
        }
        if let Some(v) = self.max_iterations {
            o.max_iterations = v;
        }
        if let Some(v) = self.grad_tolerance {
            o.grad_tolerance = v;
        }
        if let Some(v) = self.method {
            o.method = v;
        }
        if let Some(v) = seed {
            o.seed = v;
        }
        o
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Parameter JSON for the numeric Jacobian and FCR tests.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
}

pub fn check(args: &CheckArgs) -> Result<i32, CliError> {
    let a = resolve(args, args.common.config.as_deref())?;
    let params = a.params.as_deref().map(read_params).transpose()?;
    let structure = structure_or(&a.common, params.as_ref().map(MfaParams::structure))?;
    let report = identifiability_report(&structure, params.as_ref()).map_err(error::numeric)?;
    let text = match a.common.format_or(Format::Json) {
        Format::Json => to_json(&report)?,
        Format::Csv => format!(
            "verdict,cond1,cond2,cond3,cond4,locallyIdentifiable\n{},{},{},{},{},{}\n",
            serde_json::to_value(report.verdict).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            report.cond1.holds,
            report.cond2.holds,
            report.cond3,
            report.cond4.holds,
            report.locally_identifiable.map(|b| b.to_string()).unwrap_or_default(),
        ),
    };
    emit(a.common.out.as_deref(), &text)?;
    Ok(match report.verdict {
        Verdict::Global => 0,
        Verdict::LocalOnly => EXIT_LOCAL_ONLY,
        _ => EXIT_NOT_IDENTIFIABLE,
    })
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Channel sizes: an inclusive range `lo..hi` or a list `a,b,c`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<String>,
    /// Subset of necessary,local,global.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<String>>,
}

fn parse_sizes(spec: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::usage(format!("bad --sizes {:?}; use lo..hi or a,b,c", spec));
    let spec = spec.trim();
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        return Ok((lo..=hi).collect());
    }
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

pub fn sweep(args: &SweepArgs) -> Result<i32, CliError> {
    let a = resolve(args, args.common.config.as_deref())?;
    let distinct = a.common.distinct.clone().ok_or_else(|| CliError::usage("missing --distinct"))?;
    if distinct.is_empty() {
        return Err(CliError::usage("--distinct needs at least one channel"));
    }
    let sizes = parse_sizes(a.sizes.as_deref().ok_or_else(|| CliError::usage("missing --sizes"))?)?;
    let sets: Vec<ConditionSet> = match &a.conditions {
        None => vec![ConditionSet::Necessary, ConditionSet::Local, ConditionSet::Global],
        Some(names) => {
            names.iter().map(|n| n.parse().map_err(|e: MfaError| CliError::usage(e.to_string()))).collect::<Result<_, _>>()?
        }
    };
    let column = |s: &ConditionSet| match s {
        ConditionSet::Necessary => "r0_necessary",
        ConditionSet::Local => "r0_local",
        ConditionSet::Global => "r0_global",
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for &nc in &sizes {
        let ch = vec![nc; distinct.len()];
        let vals = sets.iter().map(|&s| max_r0(&ch, &distinct, s).map(|m| m.r0)).collect::<Result<Vec<_>, _>>();
        rows.push((nc, vals.map_err(error::numeric)?));
    }
    let text = match a.common.format_or(Format::Csv) {
        Format::Csv => {
            let mut out = String::from("n_c");
            for s in &sets {
                out.push(',');
                out.push_str(column(s));
            }
            out.push('\n');
            for (nc, vals) in &rows {
                out.push_str(&nc.to_string());
                for v in vals {
                    out.push_str(&format!(",{}", v));
                }
                out.push('\n');
            }
            out
        }
        Format::Json => {
            let list: Vec<Value> = rows
                .iter()
                .map(|(nc, vals)| {
                    let mut m = serde_json::Map::new();
                    m.insert("n_c".into(), (*nc).into());
                    for (s, v) in sets.iter().zip(vals) {
                        m.insert(column(s).into(), (*v).into());
                    }
                    Value::Object(m)
                })
                .collect();
            to_json(&list)?
        }
    };
    emit(a.common.out.as_deref(), &text)?;
    Ok(0)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Parameter JSON; drawn at random from --seed when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    /// Number of observations.
    #[arg(long = "T")]
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// gaussian, uniform or t<dof>.
    #[arg(long, value_parser = parse_dist)]
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "deserialize_dist")]
    pub dist: Option<FactorDistribution>,
    /// Where to write the generating parameters; defaults next to --out.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_out: Option<PathBuf>,
    /// Lower bound on the random Phi entries.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_floor: Option<f64>,
}

/// Default noise floor for randomly drawn parameters.
const SIMULATE_PHI_FLOOR: f64 = DEFAULT_MC_EPSILON;

pub fn simulate(args: &SimulateArgs) -> Result<i32, CliError> {
    let a = resolve(args, args.common.config.as_deref())?;
    let out = a.common.out.clone().ok_or_else(|| CliError::usage("simulate needs --out for the data file"))?;
    let t = a.t.ok_or_else(|| CliError::usage("missing --T"))?;
    let seed = a.common.seed.unwrap_or(0);
    let params = match a.params.as_deref() {
        Some(p) => {
            let params = read_params(p)?;
            structure_or(&a.common, Some(params.structure()))?;
            params
        }
        None => {
            let structure = a.common.structure()?;
            structure.check_model_dims().map_err(error::input)?;
            let floor = a.phi_floor.unwrap_or(SIMULATE_PHI_FLOOR);
            if !(floor >= 0.0) {
                return Err(CliError::usage("--phi-floor must be non-negative"));
            }
            mfa_core::random_params(&structure, seed, floor)
        }
    };
    let dist = a.dist.unwrap_or_default();
    dist.validate().map_err(error::input)?;
    let x = sample_mfa(&params, t, dist, seed);
    io::write_data_matrix(&out, &x).map_err(error::input)?;
    let truth_out = a.truth_out.clone().unwrap_or_else(|| out.with_extension("truth.json"));
    io::write_json(&truth_out, &params).map_err(error::input)?;
    Ok(0)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Observations, CSV or `.bin`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Subtract the sample mean first.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<bool>,
    /// Parameter JSON of the generating model; adds `nmse` to the output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitFlags,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct FitReport {
    #[serde(flatten)]
    result: FitResult,
    #[serde(rename = "T")]
    t: usize,
    centered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    nmse: Option<f64>,
    options: FitOptions,
}

pub fn fit_cmd(args: &FitArgs) -> Result<i32, CliError> {
    let a = resolve(args, args.common.config.as_deref())?;
    json_only(&a.common, "fit")?;
    let structure = a.common.structure()?;
    structure.check_model_dims().map_err(error::input)?;
    let data = a.data.as_deref().ok_or_else(|| CliError::usage("missing --data"))?;
    let center = a.center.unwrap_or(false);
    let x = read_data(data, center)?;
    if x.ncols() != structure.n() {
        return Err(CliError::data(format!(
            "{}: expected n = {} columns, found {}",
            data.display(),
            structure.n(),
            x.ncols()
        )));
    }
    let truth = a.truth.as_deref().map(read_params).transpose()?;
    let options = a.fit.apply(FitOptions::default(), a.common.seed);
    options.validate().map_err(error::input)?;
    let s = sample_covariance(&x).map_err(error::input)?;
    let (result, code) = match fit(&s, &structure, &options) {
        Ok(r) => (r, 0),
        Err(MfaError::AllStartsFailed { starts, best }) => {
            eprintln!("mfa: none of the {} starts converged; writing the best one", starts);
            (*best, error::EXIT_NUMERIC)
        }
        Err(e) => return Err(error::numeric(e)),
    };
    let nmse = match truth {
        Some(p) => {
            let eta = vectorize(&p).map_err(error::input)?;
            Some(nmse(&result.eta_hat, &eta).map_err(error::input)?)
        }
        None => None,
    };
    let report = FitReport { result, t: x.nrows(), centered: center, nmse, options };
    emit(a.common.out.as_deref(), &to_json(&report)?)?;
    Ok(code)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AsympArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Output of `fit`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    /// Parameter JSON, instead of --fit.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    /// Observations for the empirical sandwich; Gaussian closed form otherwise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<bool>,
    /// Sample size for the standard errors.
    #[arg(long = "T")]
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Binary sidecar for the full W (column-major float64).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct FitHeader {
    #[serde(rename = "etaHat")]
    eta_hat: EtaVector,
    #[serde(rename = "T")]
    t: Option<usize>,
    centered: Option<bool>,
}

pub fn asymp(args: &AsympArgs) -> Result<i32, CliError> {
    let a = resolve(args, args.common.config.as_deref())?;
    json_only(&a.common, "asymp")?;
    let (eta, fit_t, fit_centered) = match (&a.fit, &a.params) {
        (Some(_), Some(_)) => return Err(CliError::usage("give either --fit or --params, not both")),
        (Some(p), None) => {
            let h: FitHeader = io::read_json(p).map_err(|e| CliError::data(format!("{}: {}", p.display(), e)))?;
            (h.eta_hat, h.t, h.centered)
        }
        (None, Some(p)) => (vectorize(&read_params(p)?).map_err(error::input)?, None, None),
        (None, None) => return Err(CliError::usage("asymp needs --fit or --params")),
    };
    structure_or(&a.common, Some(eta.structure()))?;
    let data = match a.data.as_deref() {
        Some(p) => {
            let x = read_data(p, a.center.or(fit_centered).unwrap_or(false))?;
            if x.ncols() != eta.structure().n() {
                return Err(CliError::data(format!(
                    "{}: expected n = {} columns, found {}",
                    p.display(),
                    eta.structure().n(),
                    x.ncols()
                )));
            }
            Some(x)
        }
        None => None,
    };
    let t = a
        .t
        .or(data.as_ref().map(|x| x.nrows()))
        .or(fit_t)
        .ok_or_else(|| CliError::usage("missing --T (no data or fit file to take it from)"))?;
    if t == 0 {
        return Err(CliError::usage("--T must be positive"));
    }
    let cov = asymptotic_cov(&eta, data.as_ref()).map_err(error::numeric)?;
    if cov.insufficient_data {
        eprintln!("mfa: fewer observations than parameters; the sandwich estimate is rank deficient");
    }
    if let Some(p) = a.w_out.as_deref() {
        io::write_binary_matrix(p, &cov.w).map_err(error::input)?;
    }
    emit(a.common.out.as_deref(), &to_json(&AsymptoticSummary::new(&cov, t))?)?;
    Ok(0)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct McArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0_list: Option<Vec<usize>>,
    /// Sample sizes, strictly ascending.
    #[arg(long = "Tlist", value_delimiter = ',')]
    #[serde(rename = "Tlist", alias = "tList", skip_serializing_if = "Option::is_none")]
    pub t_list: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[arg(long, value_parser = parse_dist)]
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "deserialize_dist")]
    pub dist: Option<FactorDistribution>,
    /// Fit the population covariance instead of sampled data.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitFlags,
}

pub fn mc(args: &McArgs) -> Result<i32, CliError> {
    let a = resolve(args, args.common.config.as_deref())?;
    let c = &a.common;
    let channels = c.channels.clone().ok_or_else(|| CliError::usage("missing --channels"))?;
    let distinct = c.distinct.clone().ok_or_else(|| CliError::usage("missing --distinct"))?;
    let r0_list = match (&a.r0_list, c.r0) {
        (Some(l), _) => l.clone(),
        (None, Some(r0)) => vec![r0],
        (None, None) => return Err(CliError::usage("missing --r0-list")),
    };
    let structure = ChannelStructure::new(channels, r0_list.first().copied().unwrap_or(0), distinct)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let config = McConfig {
        structure,
        r0_list,
        t_list: a.t_list.clone().unwrap_or_else(mfa_core::simulation::default_t_list),
        trials: a.trials.ok_or_else(|| CliError::usage("missing --trials"))?,
        dist: a.dist.unwrap_or_default(),
        seed: c.seed.unwrap_or(0),
        fit_options: a.fit.apply(mc_fit_options(), None),
        oracle: a.oracle.unwrap_or(false),
    };
    let rows = mfa_core::monte_carlo_nmse(&config).map_err(error::numeric)?;
    let text = match c.format_or(Format::Csv) {
        Format::Csv => mc_to_csv(&rows),
        Format::Json => to_json(&rows)?,
    };
    emit(c.out.as_deref(), &text)?;
    Ok(0)
}
