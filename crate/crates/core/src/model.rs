//! The MFA covariance model: channel structure, loadings, the three
//! parameterizations of the observation covariance, and the free-parameter
//! vector with its lower-triangular canonical form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MfaError, Result};
use crate::linalg;

/// Tolerance on the structural zeros of the lower-triangular top blocks.
pub const STRUCTURAL_ZERO_TOL: f64 = 1e-12;

/// Channel sizes and factor numbers.
///
/// Only the counting invariants are enforced here, so that the identifiability
/// arithmetic can be evaluated for any sizes. Building loadings additionally
/// requires `r_c <= n_c` and `r0 <= n` (see [`ChannelStructure::check_model_dims`]).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawStructure", into = "RawStructure")]
pub struct ChannelStructure {
    channels: Vec<usize>,
    r0: usize,
    distinct: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawStructure {
    channels: Vec<usize>,
    r0: usize,
    distinct: Vec<usize>,
}

impl TryFrom<RawStructure> for ChannelStructure {
    type Error = MfaError;

    fn try_from(raw: RawStructure) -> Result<Self> {
        ChannelStructure::new(raw.channels, raw.r0, raw.distinct)
    }
}

impl From<ChannelStructure> for RawStructure {
    fn from(s: ChannelStructure) -> Self {
        RawStructure { channels: s.channels, r0: s.r0, distinct: s.distinct }
    }
}

impl ChannelStructure {
    pub fn new(channels: Vec<usize>, r0: usize, distinct: Vec<usize>) -> Result<Self> {
        if channels.is_empty() {
            return Err(MfaError::InvalidStructure("at least one channel is required".into()));
        }
        if channels.len() != distinct.len() {
            return Err(MfaError::InvalidStructure(format!(
                "{} channel sizes but {} distinct-factor counts",
                channels.len(),
                distinct.len()
            )));
        }
        if let Some(c) = channels.iter().position(|&n| n == 0) {
            return Err(MfaError::InvalidStructure(format!("channel {} has size 0", c + 1)));
        }
        Ok(Self { channels, r0, distinct })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn r0(&self) -> usize {
        self.r0
    }

    pub fn distinct(&self) -> &[usize] {
        &self.distinct
    }

    /// Total observation dimension `n`.
    pub fn n(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Total distinct factor number `r`.
    pub fn r(&self) -> usize {
        self.distinct.iter().sum()
    }

    /// `n_{<c}` for a zero-based channel index.
    pub fn n_before(&self, c: usize) -> usize {
        self.channels[..c].iter().sum()
    }

    pub fn r_before(&self, c: usize) -> usize {
        self.distinct[..c].iter().sum()
    }

    pub fn n_after(&self, c: usize) -> usize {
        self.n() - self.channels[c] - self.n_before(c)
    }

    pub fn r_after(&self, c: usize) -> usize {
        self.r() - self.distinct[c] - self.r_before(c)
    }

    pub fn with_r0(&self, r0: usize) -> Self {
        Self { r0, ..self.clone() }
    }

    /// Dimensions required to realize loadings with lower-triangular top blocks.
    pub fn check_model_dims(&self) -> Result<()> {
        if self.r0 > self.n() {
            return Err(MfaError::InvalidStructure(format!(
                "r0 = {} exceeds the total size n = {}",
                self.r0,
                self.n()
            )));
        }
        for (c, (&n, &r)) in self.channels.iter().zip(&self.distinct).enumerate() {
            if r > n {
                return Err(MfaError::InvalidStructure(format!(
                    "channel {} has r_c = {} > n_c = {}",
                    c + 1,
                    r,
                    n
                )));
            }
        }
        Ok(())
    }

    /// Number of free parameters `L`.
    pub fn eta_dim(&self) -> usize {
        eta_dim(self)
    }
}

/// `L = n r0 - r0(r0-1)/2 + sum_c [n_c r_c - r_c(r_c-1)/2] + n`.
pub fn eta_dim(structure: &ChannelStructure) -> usize {
    let tri = |n: i128, r: i128| n * r - r * (r - 1) / 2;
    let n = structure.n() as i128;
    let mut l = tri(n, structure.r0() as i128) + n;
    for (&nc, &rc) in structure.channels().iter().zip(structure.distinct()) {
        l += tri(nc as i128, rc as i128);
    }
    l.max(0) as usize
}

/// One free coordinate of the parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreeEntry {
    /// Entry of `A` at a global row.
    A { row: usize, col: usize },
    /// Entry of `B_c` at a row local to the channel.
    B { channel: usize, row: usize, col: usize },
    Phi(usize),
}

/// Ordered list of the free coordinates, in the η ordering: `vech(A_1)`,
/// `vec(A_2)`, then per channel `vech(B_{c,1})`, `vec(B_{c,2})`, then `diag(Φ)`.
pub fn free_entries(structure: &ChannelStructure) -> Vec<FreeEntry> {
    let n = structure.n();
    let r0 = structure.r0();
    let mut out = Vec::with_capacity(eta_dim(structure));
    lt_entries(n, r0, |row, col| out.push(FreeEntry::A { row, col }));
    for (channel, (&nc, &rc)) in structure.channels().iter().zip(structure.distinct()).enumerate() {
        lt_entries(nc, rc, |row, col| out.push(FreeEntry::B { channel, row, col }));
    }
    out.extend((0..n).map(FreeEntry::Phi));
    out
}

/// Every entry of `A` and of each `B_c`, then `diag(Φ)`: the coordinates of
/// the rotation-redundant parameterization.
pub(crate) fn full_entries(structure: &ChannelStructure) -> Vec<FreeEntry> {
    let mut out = Vec::new();
    for col in 0..structure.r0() {
        out.extend((0..structure.n()).map(|row| FreeEntry::A { row, col }));
    }
    for (channel, (&nc, &rc)) in structure.channels().iter().zip(structure.distinct()).enumerate() {
        for col in 0..rc {
            out.extend((0..nc).map(|row| FreeEntry::B { channel, row, col }));
        }
    }
    out.extend((0..structure.n()).map(FreeEntry::Phi));
    out
}

pub(crate) fn entry_value(params: &MfaParams, e: FreeEntry) -> f64 {
    match e {
        FreeEntry::A { row, col } => params.a()[(row, col)],
        FreeEntry::B { channel, row, col } => params.b_blocks()[channel][(row, col)],
        FreeEntry::Phi(i) => params.phi()[i],
    }
}

fn lt_entries(rows: usize, cols: usize, mut push: impl FnMut(usize, usize)) {
    let top = cols.min(rows);
    for j in 0..cols {
        for i in j..top {
            push(i, j);
        }
    }
    for j in 0..cols {
        for i in cols..rows {
            push(i, j);
        }
    }
}

/// Loadings `A` (n x r0), the diagonal blocks `B_c` (n_c x r_c) of the
/// block-diagonal `B`, and the noise variances `Φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MfaParams {
    structure: ChannelStructure,
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    phi: DVector<f64>,
}

impl MfaParams {
    pub fn new(
        structure: ChannelStructure,
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        phi: DVector<f64>,
    ) -> Result<Self> {
        let p = Self::from_parts_unchecked(structure, a, b, phi)?;
        if let Some(i) = p.phi.iter().position(|&v| !(v >= 0.0)) {
            return Err(MfaError::Domain(format!("Phi[{}] = {} is negative", i, p.phi[i])));
        }
        Ok(p)
    }

    /// Dimension checks only; `Φ` may hold any finite value.
    pub(crate) fn from_parts_unchecked(
        structure: ChannelStructure,
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        phi: DVector<f64>,
    ) -> Result<Self> {
        structure.check_model_dims()?;
        let n = structure.n();
        if a.shape() != (n, structure.r0()) {
            return Err(MfaError::DimensionMismatch(format!(
                "A is {}x{}, expected {}x{}",
                a.nrows(),
                a.ncols(),
                n,
                structure.r0()
            )));
        }
        if b.len() != structure.num_channels() {
            return Err(MfaError::DimensionMismatch(format!(
                "{} B blocks for {} channels",
                b.len(),
                structure.num_channels()
            )));
        }
        for (c, blk) in b.iter().enumerate() {
            let want = (structure.channels()[c], structure.distinct()[c]);
            if blk.shape() != want {
                return Err(MfaError::DimensionMismatch(format!(
                    "B_{} is {}x{}, expected {}x{}",
                    c + 1,
                    blk.nrows(),
                    blk.ncols(),
                    want.0,
                    want.1
                )));
            }
        }
        if phi.len() != n {
            return Err(MfaError::DimensionMismatch(format!("Phi has length {}, expected {}", phi.len(), n)));
        }
        Ok(Self { structure, a, b, phi })
    }

    pub fn zeros(structure: &ChannelStructure) -> Result<Self> {
        let b = structure
            .channels()
            .iter()
            .zip(structure.distinct())
            .map(|(&n, &r)| DMatrix::zeros(n, r))
            .collect();
        Self::new(
            structure.clone(),
            DMatrix::zeros(structure.n(), structure.r0()),
            b,
            DVector::zeros(structure.n()),
        )
    }

    pub fn structure(&self) -> &ChannelStructure {
        &self.structure
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b_blocks(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    /// Dense `n x r` block-diagonal `B`.
    pub fn b_dense(&self) -> DMatrix<f64> {
        let s = &self.structure;
        let mut out = DMatrix::zeros(s.n(), s.r());
        for (c, blk) in self.b.iter().enumerate() {
            out.view_mut((s.n_before(c), s.r_before(c)), blk.shape()).copy_from(blk);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    structure: ChannelStructure,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Phi")]
    phi: Vec<f64>,
}

impl Serialize for MfaParams {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsFile {
            structure: self.structure.clone(),
            a: linalg::matrix_to_rows(&self.a),
            b: self.b.iter().map(linalg::matrix_to_rows).collect(),
            phi: self.phi.iter().cloned().collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for MfaParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let f = ParamsFile::deserialize(de)?;
        let s = f.structure;
        let a = linalg::rows_to_matrix(&f.a, s.r0())
            .ok_or_else(|| D::Error::custom("A rows have inconsistent length"))?;
        let mut b = Vec::with_capacity(f.b.len());
        for (c, rows) in f.b.iter().enumerate() {
            let rc = s.distinct().get(c).copied().unwrap_or(0);
            b.push(
                linalg::rows_to_matrix(rows, rc)
                    .ok_or_else(|| D::Error::custom(format!("B_{} rows have inconsistent length", c + 1)))?,
            );
        }
        MfaParams::new(s, a, b, DVector::from_vec(f.phi)).map_err(D::Error::custom)
    }
}

/// `(R_ss, R_ii, Φ)` with `R_ss = A Aᵀ` and block-diagonal `R_ii = B Bᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceTriple {
    pub rss: DMatrix<f64>,
    pub rii: DMatrix<f64>,
    pub phi: DVector<f64>,
}

fn gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = m * m.transpose();
    linalg::symmetrize(&mut g);
    g
}

pub fn decompose_params(params: &MfaParams) -> CovarianceTriple {
    let s = params.structure();
    let mut rii = DMatrix::zeros(s.n(), s.n());
    for (c, blk) in params.b_blocks().iter().enumerate() {
        let off = s.n_before(c);
        rii.view_mut((off, off), (blk.nrows(), blk.nrows())).copy_from(&gram(blk));
    }
    CovarianceTriple { rss: gram(params.a()), rii, phi: params.phi().clone() }
}

/// `R_xx = A Aᵀ + B Bᵀ + diag(Φ)`.
pub fn build_covariance(params: &MfaParams) -> DMatrix<f64> {
    let s = params.structure();
    let mut r = gram(params.a());
    for (c, blk) in params.b_blocks().iter().enumerate() {
        let off = s.n_before(c);
        let mut v = r.view_mut((off, off), (blk.nrows(), blk.nrows()));
        v += gram(blk);
    }
    for i in 0..s.n() {
        r[(i, i)] += params.phi()[i];
    }
    r
}

/// The free-parameter vector η together with its structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEta", into = "RawEta")]
pub struct EtaVector {
    structure: ChannelStructure,
    values: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawEta {
    structure: ChannelStructure,
    values: Vec<f64>,
}

impl TryFrom<RawEta> for EtaVector {
    type Error = MfaError;

    fn try_from(raw: RawEta) -> Result<Self> {
        EtaVector::new(raw.structure, DVector::from_vec(raw.values))
    }
}

impl From<EtaVector> for RawEta {
    fn from(e: EtaVector) -> Self {
        RawEta { structure: e.structure, values: e.values.iter().cloned().collect() }
    }
}

impl EtaVector {
    pub fn new(structure: ChannelStructure, values: DVector<f64>) -> Result<Self> {
        structure.check_model_dims()?;
        let l = eta_dim(&structure);
        if values.len() != l {
            return Err(MfaError::DimensionMismatch(format!("eta has length {}, expected L = {}", values.len(), l)));
        }
        let phi_start = l - structure.n();
        if let Some(i) = values.rows(phi_start, structure.n()).iter().position(|&v| !(v >= 0.0)) {
            return Err(MfaError::Domain(format!("Phi entry {} of eta is negative", i)));
        }
        Ok(Self { structure, values })
    }

    pub fn structure(&self) -> &ChannelStructure {
        &self.structure
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The trailing `Φ` block.
    pub fn phi(&self) -> nalgebra::DVectorView<'_, f64> {
        let n = self.structure.n();
        self.values.rows(self.values.len() - n, n)
    }
}

fn check_lt(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let top = m.ncols().min(m.nrows());
    for j in 0..m.ncols() {
        for i in 0..j.min(top) {
            let v = m[(i, j)];
            if v.abs() > STRUCTURAL_ZERO_TOL {
                return Err(MfaError::ConstraintViolation { what: format!("{}[{},{}]", name, i, j), value: v });
            }
        }
    }
    Ok(())
}

/// Stacks the free entries of lower-triangular-constrained params into η.
pub fn vectorize(params: &MfaParams) -> Result<EtaVector> {
    check_lt(params.a(), "A")?;
    for (c, blk) in params.b_blocks().iter().enumerate() {
        check_lt(blk, &format!("B_{}", c + 1))?;
    }
    let s = params.structure();
    let values: Vec<f64> = free_entries(s)
        .into_iter()
        .map(|e| match e {
            FreeEntry::A { row, col } => params.a()[(row, col)],
            FreeEntry::B { channel, row, col } => params.b_blocks()[channel][(row, col)],
            FreeEntry::Phi(i) => params.phi()[i],
        })
        .collect();
    EtaVector::new(s.clone(), DVector::from_vec(values))
}

/// Scatters a raw coordinate slice into loadings; structural zeros are restored.
pub(crate) fn params_from_slice(
    structure: &ChannelStructure,
    entries: &[FreeEntry],
    values: &[f64],
) -> (DMatrix<f64>, Vec<DMatrix<f64>>, DVector<f64>) {
    let mut a = DMatrix::zeros(structure.n(), structure.r0());
    let mut b: Vec<DMatrix<f64>> = structure
        .channels()
        .iter()
        .zip(structure.distinct())
        .map(|(&n, &r)| DMatrix::zeros(n, r))
        .collect();
    let mut phi = DVector::zeros(structure.n());
    for (e, &v) in entries.iter().zip(values) {
        match *e {
            FreeEntry::A { row, col } => a[(row, col)] = v,
            FreeEntry::B { channel, row, col } => b[channel][(row, col)] = v,
            FreeEntry::Phi(i) => phi[i] = v,
        }
    }
    (a, b, phi)
}

pub fn unvectorize(eta: &EtaVector) -> MfaParams {
    let s = eta.structure();
    let (a, b, phi) = params_from_slice(s, &free_entries(s), eta.values().as_slice());
    MfaParams::new(s.clone(), a, b, phi).expect("EtaVector invariants guarantee valid params")
}

/// Rotates one loading matrix so its top `k x k` block is lower triangular
/// with non-negative diagonal. Returns whether a degenerate column was zeroed.
fn canonicalize_block(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = m.ncols();
    if k == 0 {
        return (m.clone(), false);
    }
    let top = m.rows(0, k).transpose();
    let q = top.qr().q();
    let mut out = m * q;
    let scale = linalg::spectral_norm(m);
    let mut degenerate = false;
    for j in 0..k {
        for i in 0..j {
            out[(i, j)] = 0.0;
        }
        let d = out[(j, j)];
        if d.abs() <= 1e-10 * scale {
            degenerate = true;
            for i in j..k {
                out[(i, j)] = 0.0;
            }
        } else if d < 0.0 {
            out.column_mut(j).neg_mut();
        }
    }
    (out, degenerate)
}

/// Canonical representative together with a flag telling whether a
/// rank-deficient top block forced a column to be zeroed.
pub fn canonicalize_with_flag(params: &MfaParams) -> (MfaParams, bool) {
    let (a, mut degenerate) = canonicalize_block(params.a());
    let b = params
        .b_blocks()
        .iter()
        .map(|blk| {
            let (out, d) = canonicalize_block(blk);
            degenerate |= d;
            out
        })
        .collect();
    let p = MfaParams::from_parts_unchecked(params.structure().clone(), a, b, params.phi().clone())
        .expect("rotation preserves dimensions");
    (p, degenerate)
}

/// Maps params to the unique lower-triangular representative of their
/// rotation class: `A Q0`, `B_c Q_c` with orthogonal `Q`s.
pub fn canonicalize(params: &MfaParams) -> MfaParams {
    canonicalize_with_flag(params).0
}
