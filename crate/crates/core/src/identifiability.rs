//! Identifiability conditions for MFA.
//!
//! Conditions 1 to 4 are exact integer tests on the channel sizes and factor
//! numbers. Condition 2 minimizes the criterion ψ over the set `M` of
//! reductions; that enumeration is the expensive part and is kept exact.
//! Two numeric checks on concrete loadings complement them: the full column
//! rank test on the submatrices `M_c` and the rank of the Jacobian of `R(η)`.

use serde::{Deserialize, Serialize};

use crate::differential::derivative_factors;
use crate::error::{MfaError, Result};
use crate::linalg;
use crate::model::{eta_dim, ChannelStructure, MfaParams};

/// Default cap on the number of candidate reduction tuples for Condition 2.
pub const DEFAULT_ENUMERATION_CAP: u128 = 100_000_000;

/// Channel counts up to which Condition 1 searches every ordering.
pub const EXHAUSTIVE_PERMUTATION_LIMIT: usize = 8;

/// `φ(n, r, ρ) = r(r+1)/2 − ρ(ρ+1)/2 − ρ(r−ρ) − n`.
pub fn phi_criterion(n: i64, r: i64, rho: i64) -> Result<i64> {
    if n < 0 || r < 0 || rho < 0 || rho > r {
        return Err(MfaError::Domain(format!("phi({}, {}, {}) needs n, r >= 0 and 0 <= rho <= r", n, r, rho)));
    }
    Ok(phi_raw(n, r, rho))
}

#[inline]
fn phi_raw(n: i64, r: i64, rho: i64) -> i64 {
    r * (r + 1) / 2 - rho * (rho + 1) / 2 - rho * (r - rho) - n
}

/// `ψ = n + φ(n, r0, ρ0) + Σ_c [φ(n_c, r_c, ρ_c) + r_c (r0 − ρ0)]`.
pub fn psi_criterion(channels: &[usize], r0: usize, distinct: &[usize], rho0: usize, rho: &[usize]) -> Result<i64> {
    if channels.len() != distinct.len() || channels.len() != rho.len() {
        return Err(MfaError::Domain("psi needs one n_c, r_c and rho_c per channel".into()));
    }
    let n: i64 = channels.iter().map(|&v| v as i64).sum();
    let mut psi = n + phi_criterion(n, r0 as i64, rho0 as i64)?;
    for c in 0..channels.len() {
        psi += phi_criterion(channels[c] as i64, distinct[c] as i64, rho[c] as i64)?
            + distinct[c] as i64 * (r0 as i64 - rho0 as i64);
    }
    Ok(psi)
}

/// An element `(n', r', ρ)` of the reduction set `M`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionTuple {
    /// `n'_1 … n'_C`.
    pub n_prime: Vec<usize>,
    /// `r'_0, r'_1 … r'_C`.
    pub r_prime: Vec<usize>,
    /// `ρ_0, ρ_1 … ρ_C`.
    pub rho: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition1 {
    pub holds: bool,
    /// Channel order (zero-based original indices) for which the inequalities hold.
    pub permutation: Option<Vec<usize>>,
    /// Set when the channel count was too large for an exhaustive search.
    pub heuristic: bool,
}

fn condition1_in_order(structure: &ChannelStructure, order: &[usize]) -> bool {
    let n = structure.n();
    let (ch, rd) = (structure.channels(), structure.distinct());
    let mut cum = structure.r0();
    for &c in order {
        if rd[c] > ch[c] || cum > n - ch[c] {
            return false;
        }
        cum += rd[c];
    }
    true
}

fn for_each_permutation(k: usize, mut f: impl FnMut(&[usize]) -> bool) {
    // Heap's algorithm; `f` returns true to stop.
    let mut p: Vec<usize> = (0..k).collect();
    let mut c = vec![0usize; k];
    if f(&p) {
        return;
    }
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            if f(&p) {
                return;
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Condition 1 for some ordering of the channels.
pub fn check_condition1(structure: &ChannelStructure) -> Condition1 {
    let k = structure.num_channels();
    let (ch, rd) = (structure.channels(), structure.distinct());
    if rd.iter().zip(ch).any(|(r, n)| r > n) {
        return Condition1 { holds: false, permutation: None, heuristic: false };
    }
    if k <= EXHAUSTIVE_PERMUTATION_LIMIT {
        let mut found = None;
        for_each_permutation(k, |p| {
            if condition1_in_order(structure, p) {
                found = Some(p.to_vec());
                true
            } else {
                false
            }
        });
        return Condition1 { holds: found.is_some(), permutation: found, heuristic: false };
    }
    let mut by_slack: Vec<usize> = (0..k).collect();
    by_slack.sort_by_key(|&c| std::cmp::Reverse(ch[c] - rd[c]));
    let mut by_r: Vec<usize> = (0..k).collect();
    by_r.sort_by_key(|&c| rd[c]);
    let identity: Vec<usize> = (0..k).collect();
    for order in [identity, by_slack, by_r] {
        if condition1_in_order(structure, &order) {
            return Condition1 { holds: true, permutation: Some(order), heuristic: true };
        }
    }
    Condition1 { holds: false, permutation: None, heuristic: true }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition2 {
    pub holds: bool,
    /// `r_c <= n_c` for all channels and `r0 + r <= n`.
    pub preamble_holds: bool,
    pub m_empty: bool,
    pub psi_star: Option<i64>,
    pub minimizer: Option<ReductionTuple>,
}

/// Orders the channel enumeration so exchangeable channels (equal `n_c` and
/// `r_c`) are visited once per multiset of reduced sizes; ψ is symmetric in
/// the channels.
struct Enumerator<'a> {
    structure: &'a ChannelStructure,
    order: Vec<usize>,
    // Same (n_c, r_c) as the previous channel in `order`.
    tied: Vec<bool>,
    stop_at_nonpositive: bool,
    n_prime: Vec<usize>,
    best: Option<(i64, ReductionTuple)>,
    found_nonpositive: bool,
    // DP scratch: dp[c][s] = min Σ_{k<=c} φ_k with Σ ρ_k = s.
    dp: Vec<Vec<i64>>,
    arg: Vec<Vec<usize>>,
}

impl<'a> Enumerator<'a> {
    fn new(structure: &'a ChannelStructure, stop_at_nonpositive: bool) -> Self {
        let k = structure.num_channels();
        let (ch, rd) = (structure.channels(), structure.distinct());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&c| (ch[c], rd[c]));
        let tied = (0..k)
            .map(|p| p > 0 && ch[order[p]] == ch[order[p - 1]] && rd[order[p]] == rd[order[p - 1]])
            .collect();
        let rmax = structure.r() + 1;
        Self {
            structure,
            order,
            tied,
            stop_at_nonpositive,
            n_prime: vec![0; k],
            best: None,
            found_nonpositive: false,
            dp: vec![vec![0; rmax]; k],
            arg: vec![vec![0; rmax]; k],
        }
    }

    fn done(&self) -> bool {
        self.stop_at_nonpositive && self.found_nonpositive
    }

    fn recurse(&mut self, pos: usize) {
        if self.done() {
            return;
        }
        let k = self.order.len();
        if pos == k {
            self.leaf();
            return;
        }
        let c = self.order[pos];
        let lo = if self.tied[pos] { self.n_prime[self.order[pos - 1]] } else { 0 };
        for np in lo..=self.structure.channels()[c] {
            self.n_prime[c] = np;
            self.recurse(pos + 1);
            if self.done() {
                return;
            }
        }
    }

    fn leaf(&mut self) {
        let s = self.structure;
        let (ch, rd) = (s.channels(), s.distinct());
        let k = ch.len();
        let n_total: i64 = self.n_prime.iter().map(|&v| v as i64).sum();
        if n_total == 0 {
            return;
        }
        let mut excess = 0i64;
        for c in 0..k {
            let removed = (ch[c] - self.n_prime[c]) as i64;
            excess += (removed - rd[c] as i64).max(0);
        }
        let r0p = (s.r0() as i64 - excess).max(0);
        let rp: Vec<i64> = (0..k)
            .map(|c| (rd[c] as i64 - (ch[c] - self.n_prime[c]) as i64).max(0))
            .collect();
        let mut caps = vec![0i64; k];
        for c in 0..k {
            let m = rp[c].min(2 * (r0p + rp[c]) - self.n_prime[c] as i64);
            if m < 0 {
                return;
            }
            caps[c] = m;
        }
        // Min-plus convolution over channels of φ(n'_c, r'_c, ρ_c).
        let mut width = 0usize;
        for c in 0..k {
            let np = self.n_prime[c] as i64;
            let new_width = width + caps[c] as usize;
            for total in 0..=new_width {
                let mut best = i64::MAX;
                let mut arg = 0usize;
                for rho in 0..=caps[c] as usize {
                    if rho > total || total - rho > width {
                        continue;
                    }
                    let prev = if c == 0 { 0 } else { self.dp[c - 1][total - rho] };
                    if prev == i64::MAX {
                        continue;
                    }
                    let v = prev + phi_raw(np, rp[c], rho as i64);
                    if v < best {
                        best = v;
                        arg = rho;
                    }
                }
                self.dp[c][total] = best;
                self.arg[c][total] = arg;
            }
            width = new_width;
        }
        let r_sum: i64 = rp.iter().sum();
        let base: i64 = 2 * r0p + (0..k).map(|c| 2 * rp[c] - self.n_prime[c] as i64).sum::<i64>();
        for total in 0..=width {
            let phis = self.dp[k - 1][total];
            if phis == i64::MAX {
                continue;
            }
            let rho0 = r0p.min(base - total as i64);
            if rho0 < 0 {
                continue;
            }
            let psi = n_total + phi_raw(n_total, r0p, rho0) + phis + r_sum * (r0p - rho0);
            if psi <= 0 {
                self.found_nonpositive = true;
            }
            if self.best.as_ref().is_none_or(|(b, _)| psi < *b) {
                let mut rho = vec![0usize; k + 1];
                rho[0] = rho0 as usize;
                let mut t = total;
                for c in (0..k).rev() {
                    let r = self.arg[c][t];
                    rho[c + 1] = r;
                    t -= r;
                }
                let mut r_prime = vec![r0p as usize];
                r_prime.extend(rp.iter().map(|&v| v as usize));
                self.best = Some((psi, ReductionTuple { n_prime: self.n_prime.clone(), r_prime, rho }));
            }
            if self.done() {
                return;
            }
        }
    }
}

/// Upper bound on the number of candidate `(n', ρ)` combinations.
pub fn condition2_workload(structure: &ChannelStructure) -> u128 {
    structure
        .channels()
        .iter()
        .zip(structure.distinct())
        .map(|(&n, &r)| (n as u128 + 1) * (r as u128 + 1))
        .product()
}

fn condition2_preamble(structure: &ChannelStructure) -> bool {
    structure.distinct().iter().zip(structure.channels()).all(|(r, n)| r <= n)
        && structure.r0() + structure.r() <= structure.n()
}

fn run_condition2(structure: &ChannelStructure, cap: u128, stop_at_nonpositive: bool) -> Result<Condition2> {
    if !condition2_preamble(structure) {
        return Ok(Condition2 { holds: false, preamble_holds: false, m_empty: false, psi_star: None, minimizer: None });
    }
    let needed = condition2_workload(structure);
    if needed > cap {
        return Err(MfaError::Infeasible { needed, cap });
    }
    let mut e = Enumerator::new(structure, stop_at_nonpositive);
    e.recurse(0);
    Ok(match e.best {
        None => Condition2 { holds: true, preamble_holds: true, m_empty: true, psi_star: None, minimizer: None },
        Some((psi, tuple)) => Condition2 {
            holds: psi > 0,
            preamble_holds: true,
            m_empty: false,
            psi_star: Some(psi),
            minimizer: Some(tuple),
        },
    })
}

/// Condition 2 with the exact minimum ψ* over `M` and one minimizer.
pub fn check_condition2(structure: &ChannelStructure) -> Result<Condition2> {
    check_condition2_with_cap(structure, DEFAULT_ENUMERATION_CAP)
}

pub fn check_condition2_with_cap(structure: &ChannelStructure, cap: u128) -> Result<Condition2> {
    run_condition2(structure, cap, false)
}

/// Boolean-only Condition 2; stops at the first tuple with ψ <= 0.
pub fn condition2_holds(structure: &ChannelStructure, cap: u128) -> Result<bool> {
    Ok(run_condition2(structure, cap, true)?.holds)
}

/// `r0 r + Σ_c r_c r_{<c} <= Σ_c (n − n_c) r_c`.
pub fn check_condition3(structure: &ChannelStructure) -> bool {
    let n = structure.n() as i128;
    let mut lhs = structure.r0() as i128 * structure.r() as i128;
    let mut rhs = 0i128;
    let mut before = 0i128;
    for (&nc, &rc) in structure.channels().iter().zip(structure.distinct()) {
        lhs += rc as i128 * before;
        rhs += (n - nc as i128) * rc as i128;
        before += rc as i128;
    }
    lhs <= rhs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition4 {
    pub holds: bool,
    /// `D = Σ_c n_c r_c − r_c(r_c−1)/2`.
    pub d: i64,
    /// `(2n + 1 − √(8(n+D)+1)) / 2`.
    pub r0_bound: f64,
    /// `(2n_c + 1 − √(8n_c+1)) / 2` per channel.
    pub distinct_bounds: Vec<f64>,
}

/// `x <= (2m + 1 − √q) / 2` evaluated exactly as `(2m + 1 − 2x)² >= q` with a sign guard.
fn below_sqrt_bound(x: i128, m: i128, q: i128) -> bool {
    let lhs = 2 * m + 1 - 2 * x;
    if q < 0 {
        return false;
    }
    lhs >= 0 && lhs * lhs >= q
}

pub fn check_condition4(structure: &ChannelStructure) -> Condition4 {
    let n = structure.n() as i128;
    let d: i128 = structure
        .channels()
        .iter()
        .zip(structure.distinct())
        .map(|(&nc, &rc)| nc as i128 * rc as i128 - rc as i128 * (rc as i128 - 1) / 2)
        .sum();
    let q0 = 8 * (n + d) + 1;
    let r0_bound = if q0 >= 0 { (2.0 * n as f64 + 1.0 - (q0 as f64).sqrt()) / 2.0 } else { f64::NAN };
    let mut holds = below_sqrt_bound(structure.r0() as i128, n, q0);
    let mut distinct_bounds = Vec::with_capacity(structure.num_channels());
    for (&nc, &rc) in structure.channels().iter().zip(structure.distinct()) {
        let nc = nc as i128;
        let q = 8 * nc + 1;
        distinct_bounds.push((2.0 * nc as f64 + 1.0 - (q as f64).sqrt()) / 2.0);
        holds &= below_sqrt_bound(rc as i128, nc, q);
    }
    Condition4 { holds, d: d as i64, r0_bound, distinct_bounds }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcrResult {
    pub holds: bool,
    /// Order of the channels used to build `M_1 … M_C`.
    pub order: Vec<usize>,
    pub ranks: Vec<usize>,
    pub columns: Vec<usize>,
}

/// Full-column-rank test of the submatrices `M_c` of `[A B]` in the given channel order.
pub fn fcr_submatrix_test(params: &MfaParams) -> FcrResult {
    let order: Vec<usize> = (0..params.structure().num_channels()).collect();
    fcr_submatrix_test_ordered(params, &order)
}

/// Same test after renumbering the channels; `order[p]` is the original
/// index of the channel placed at position `p`.
pub fn fcr_submatrix_test_ordered(params: &MfaParams, order: &[usize]) -> FcrResult {
    let s = params.structure();
    let r0 = s.r0();
    let mut ranks = Vec::with_capacity(order.len());
    let mut columns = Vec::with_capacity(order.len());
    for (p, &c) in order.iter().enumerate() {
        let before = &order[..p];
        let rows = s.n() - s.channels()[c];
        let cols = r0 + before.iter().map(|&k| s.distinct()[k]).sum::<usize>();
        let mut m = nalgebra::DMatrix::zeros(rows, cols);
        let mut row = 0;
        for (q, &k) in order.iter().enumerate() {
            if q == p {
                continue;
            }
            let nk = s.channels()[k];
            let src = s.n_before(k);
            m.view_mut((row, 0), (nk, r0)).copy_from(&params.a().rows(src, nk));
            if q < p {
                let col = r0 + order[..q].iter().map(|&j| s.distinct()[j]).sum::<usize>();
                let blk = &params.b_blocks()[k];
                m.view_mut((row, col), blk.shape()).copy_from(blk);
            }
            row += nk;
        }
        columns.push(cols);
        ranks.push(if cols == 0 { 0 } else { linalg::numeric_rank(&m) });
    }
    let holds = ranks.iter().zip(&columns).all(|(r, c)| r == c);
    FcrResult { holds, order: order.to_vec(), ranks, columns }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalIdentifiability {
    pub identifiable: bool,
    pub rank: usize,
    /// Number of free parameters `L`.
    pub l: usize,
    /// `n(n+1)/2`.
    pub rows: usize,
}

/// Rank of the Jacobian of `η ↦ vech R(η)`; full column rank means `dR` is injective.
pub fn local_identifiability_numeric(params: &MfaParams) -> LocalIdentifiability {
    let f = derivative_factors(params);
    let j = f.jacobian();
    let rank = linalg::numeric_rank(&j);
    let l = eta_dim(params.structure());
    LocalIdentifiability { identifiable: rank == l, rank, l, rows: j.nrows() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConditionSet {
    /// Condition 3.
    Necessary,
    /// Conditions 1 and 4.
    Local,
    /// Conditions 1 and 2.
    Global,
}

impl std::str::FromStr for ConditionSet {
    type Err = MfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "necessary" | "3" => Ok(Self::Necessary),
            "local" | "14" | "1&4" => Ok(Self::Local),
            "global" | "12" | "1&2" => Ok(Self::Global),
            other => Err(MfaError::Parse(format!("unknown condition set '{}'", other))),
        }
    }
}

pub fn condition_set_holds(structure: &ChannelStructure, set: ConditionSet, cap: u128) -> Result<bool> {
    Ok(match set {
        ConditionSet::Necessary => check_condition3(structure),
        ConditionSet::Local => check_condition1(structure).holds && check_condition4(structure).holds,
        ConditionSet::Global => check_condition1(structure).holds && condition2_holds(structure, cap)?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxR0 {
    /// Largest feasible `r0`, or −1.
    pub r0: i64,
    /// Whether the feasible set is exactly `{0, …, r0}`.
    pub monotone: bool,
}

/// Largest `r0` in `0..=n` satisfying the condition set; every candidate is
/// evaluated so that monotonicity in `r0` is checked rather than assumed.
pub fn max_r0(channels: &[usize], distinct: &[usize], set: ConditionSet) -> Result<MaxR0> {
    max_r0_with_cap(channels, distinct, set, DEFAULT_ENUMERATION_CAP)
}

pub fn max_r0_with_cap(channels: &[usize], distinct: &[usize], set: ConditionSet, cap: u128) -> Result<MaxR0> {
    let base = ChannelStructure::new(channels.to_vec(), 0, distinct.to_vec())?;
    let n = base.n();
    let feasible: Vec<bool> = (0..=n)
        .map(|r0| condition_set_holds(&base.with_r0(r0), set, cap))
        .collect::<Result<_>>()?;
    let top = feasible.iter().rposition(|&f| f);
    let r0 = top.map_or(-1, |t| t as i64);
    let monotone = match top {
        None => true,
        Some(t) => feasible[..=t].iter().all(|&f| f),
    };
    Ok(MaxR0 { r0, monotone })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Global,
    LocalOnly,
    NecessaryFail,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub structure: ChannelStructure,
    pub eta_dim: usize,
    pub cond1: Condition1,
    pub cond2: Condition2,
    pub cond3: bool,
    pub cond4: Condition4,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcr: Option<FcrResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local: Option<LocalIdentifiability>,
    #[serde(rename = "locallyIdentifiable")]
    pub locally_identifiable: Option<bool>,
    pub verdict: Verdict,
}

pub fn verdict(cond1: bool, cond2: bool, cond3: bool, cond4: bool) -> Verdict {
    if cond1 && cond2 {
        Verdict::Global
    } else if cond1 && cond4 {
        Verdict::LocalOnly
    } else if !cond3 {
        Verdict::NecessaryFail
    } else {
        Verdict::Unknown
    }
}

/// Runs every condition; with loadings supplied also the FCR and Jacobian tests.
pub fn identifiability_report(structure: &ChannelStructure, params: Option<&MfaParams>) -> Result<IdentifiabilityReport> {
    if let Some(p) = params {
        if p.structure() != structure {
            return Err(MfaError::DimensionMismatch("params were built for a different structure".into()));
        }
    }
    let cond1 = check_condition1(structure);
    let cond2 = check_condition2(structure)?;
    let cond3 = check_condition3(structure);
    let cond4 = check_condition4(structure);
    let fcr = params.map(|p| match &cond1.permutation {
        Some(order) => fcr_submatrix_test_ordered(p, order),
        None => fcr_submatrix_test(p),
    });
    let local = params.map(local_identifiability_numeric);
    let v = verdict(cond1.holds, cond2.holds, cond3, cond4.holds);
    Ok(IdentifiabilityReport {
        structure: structure.clone(),
        eta_dim: eta_dim(structure),
        locally_identifiable: local.as_ref().map(|l| l.identifiable),
        cond1,
        cond2,
        cond3,
        cond4,
        fcr,
        local,
        verdict: v,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_c: usize,
    pub r0_necessary: i64,
    pub r0_local: i64,
    pub r0_global: i64,
}

/// Max-`r0` under the three condition sets for equal channels of each size
/// in `sizes`; channel `c` has `distinct[c]` distinct factors.
pub fn sweep_equal_channels(sizes: impl IntoIterator<Item = usize>, distinct: &[usize]) -> Result<Vec<SweepRow>> {
    sizes
        .into_iter()
        .map(|nc| {
            let ch = vec![nc; distinct.len()];
            Ok(SweepRow {
                n_c: nc,
                r0_necessary: max_r0(&ch, distinct, ConditionSet::Necessary)?.r0,
                r0_local: max_r0(&ch, distinct, ConditionSet::Local)?.r0,
                r0_global: max_r0(&ch, distinct, ConditionSet::Global)?.r0,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "n_c,r0_necessary,r0_local,r0_global";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.n_c, r.r0_necessary, r.r0_local, r.r0_global));
    }
    out
}
