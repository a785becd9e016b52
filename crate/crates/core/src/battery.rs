//! Stored energy and charging power for arbitrary photon-number distributions.
//!
//! Everything reduces to the number-state table `F(M, t)`: for an initial field
//! `Σ C_M |M⟩` the atoms hold `E(t) = Σ |C_M|² F(M, t)`. Relative phases drop
//! out, so distributions over Fock states are all we store.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bethe::{BetheError, BetheSolver, SectorSpec};
use crate::spectral::{CosineSeries, SectorSpectrum, SeriesRecord, SpectralError};

const SUM_TOL: f64 = 1e-12;
const INTEGER_SNAP: f64 = 1e-9;
const MAX_TAIL: f64 = 1e-3;
const SPLIT_AGREEMENT: f64 = 1e-10;
const SLOPE_TOL: f64 = 1e-9;
const INEQUALITY_TOL: f64 = 1e-9;
/// Below this `F(m0, t)` the quotient in the derivative inequality is not trusted.
const QUOTIENT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BatteryError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("Poisson tail {tail:e} beyond M = {truncation} exceeds 1e-3")]
    TruncationTooSmall { truncation: u32, tail: f64 },
    #[error("distribution needs F({needed}) but the table stops at M = {available}")]
    SupportExceedsTable { needed: u32, available: u32 },
    #[error("charging power needs t > 0, got {0}")]
    NonpositiveTime(f64),
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("no weight above the mean floor, yet {below:e} below it")]
    DegenerateSplit { below: f64 },
    #[error("direct and split differences disagree: {direct:e} vs {split:e}")]
    SplitMismatch { direct: f64, split: f64 },
    #[error("reference energy must be positive, got {0}")]
    ZeroReferenceEnergy(f64),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Bethe(#[from] BetheError),
}

pub type Result<T> = std::result::Result<T, BatteryError>;

/// `n̄ = [n̄] + frac`, with values within 1e-9 of an integer treated as integers.
pub fn split_mean(mean: f64) -> (u32, f64) {
    let nearest = mean.round();
    if (mean - nearest).abs() < INTEGER_SNAP {
        (nearest as u32, 0.0)
    } else {
        let floor = mean.floor();
        (floor as u32, mean - floor)
    }
}

/// On-disk form: `{"probs": {"0": 0.0889, ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFile {
    pub probs: BTreeMap<u32, f64>,
}

/// Probabilities over photon-number states with finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionFile", into = "DistributionFile")]
pub struct PhotonDistribution {
    probs: BTreeMap<u32, f64>,
    mean: f64,
}

impl TryFrom<DistributionFile> for PhotonDistribution {
    type Error = BatteryError;

    fn try_from(file: DistributionFile) -> Result<Self> {
        Self::new(file.probs)
    }
}

impl From<PhotonDistribution> for DistributionFile {
    fn from(dist: PhotonDistribution) -> Self {
        Self { probs: dist.probs }
    }
}

/// How to cut the Poisson law of a coherent state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Keep `M ≤ max`.
    At(u32),
    /// Smallest cut leaving at most this much mass outside.
    Tail(f64),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Tail(1e-6)
    }
}

impl PhotonDistribution {
    /// Exact probabilities; they must be nonnegative and sum to one within 1e-12.
    pub fn new(probs: BTreeMap<u32, f64>) -> Result<Self> {
        let mut sum = 0.0;
        for (&m, &p) in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(BatteryError::InvalidDistribution(format!("p({m}) = {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(BatteryError::InvalidDistribution(format!("probabilities sum to {sum}")));
        }
        let probs: BTreeMap<u32, f64> = probs.into_iter().filter(|(_, p)| *p > 0.0).collect();
        let mean = probs.iter().map(|(&m, &p)| f64::from(m) * p).sum();
        Ok(Self { probs, mean })
    }

    /// Nonnegative weights rescaled to unit total.
    pub fn from_weights(weights: BTreeMap<u32, f64>) -> Result<Self> {
        if let Some((m, w)) = weights.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(BatteryError::InvalidDistribution(format!("weight {w} at M = {m}")));
        }
        let total: f64 = weights.values().sum();
        if total <= 0.0 {
            return Err(BatteryError::InvalidDistribution("weights sum to zero".into()));
        }
        let probs: BTreeMap<u32, f64> =
            weights.into_iter().filter(|(_, w)| *w > 0.0).map(|(m, w)| (m, w / total)).collect();
        let mean = probs.iter().map(|(&m, &p)| f64::from(m) * p).sum();
        Ok(Self { probs, mean })
    }

    pub fn fock(m: u32) -> Self {
        Self { probs: BTreeMap::from([(m, 1.0)]), mean: f64::from(m) }
    }

    pub fn vacuum() -> Self {
        Self::fock(0)
    }

    /// Poisson law `e^{−|α|²}|α|^{2M}/M!`, renormalized over the kept support.
    pub fn coherent(alpha_sq: f64, truncation: Truncation) -> Result<Self> {
        if !alpha_sq.is_finite() || alpha_sq < 0.0 {
            return Err(BatteryError::InvalidDistribution(format!("|α|² = {alpha_sq}")));
        }
        if alpha_sq == 0.0 {
            return Ok(Self::vacuum());
        }
        let cut = match truncation {
            Truncation::At(max) => {
                let tail = poisson_tail(alpha_sq, max);
                if tail > MAX_TAIL {
                    return Err(BatteryError::TruncationTooSmall { truncation: max, tail });
                }
                max
            }
            Truncation::Tail(tol) => {
                let limit = crate::bethe::MAX_EXCITATIONS;
                (0..=limit)
                    .find(|&m| poisson_tail(alpha_sq, m) <= tol)
                    .ok_or(BatteryError::TruncationTooSmall { truncation: limit, tail: poisson_tail(alpha_sq, limit) })?
            }
        };
        let weights = poisson_weights(alpha_sq, cut).into_iter().enumerate().map(|(m, p)| (m as u32, p)).collect();
        Self::from_weights(weights)
    }

    /// `p([n̄]) = 1 − frac`, `p([n̄] + 1) = frac`.
    pub fn optimal(mean: f64) -> Result<Self> {
        if !mean.is_finite() || mean < 0.0 {
            return Err(BatteryError::InvalidDistribution(format!("mean {mean}")));
        }
        let (floor, frac) = split_mean(mean);
        if frac == 0.0 {
            return Ok(Self::fock(floor));
        }
        Ok(Self { probs: BTreeMap::from([(floor, 1.0 - frac), (floor + 1, frac)]), mean })
    }

    /// `α p + (1 − α) q`.
    pub fn mix(&self, other: &Self, alpha: f64) -> Result<Self> {
        let mut probs = BTreeMap::new();
        for (&m, &p) in &self.probs {
            *probs.entry(m).or_insert(0.0) += alpha * p;
        }
        for (&m, &p) in &other.probs {
            *probs.entry(m).or_insert(0.0) += (1.0 - alpha) * p;
        }
        Self::new(probs)
    }

    pub fn probs(&self) -> &BTreeMap<u32, f64> {
        &self.probs
    }

    pub fn probability(&self, m: u32) -> f64 {
        self.probs.get(&m).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Largest supported photon number `M_m`.
    pub fn truncation(&self) -> u32 {
        self.probs.keys().next_back().copied().unwrap_or(0)
    }

    pub fn integer_part(&self) -> u32 {
        split_mean(self.mean).0
    }

    pub fn fractional_part(&self) -> f64 {
        split_mean(self.mean).1
    }
}

fn poisson_weights(alpha_sq: f64, max: u32) -> Vec<f64> {
    let mut p = (-alpha_sq).exp();
    let mut out = Vec::with_capacity(max as usize + 1);
    for m in 0..=max {
        if m > 0 {
            p *= alpha_sq / f64::from(m);
        }
        out.push(p);
    }
    out
}

/// Poisson mass above `max`.
pub fn poisson_tail(alpha_sq: f64, max: u32) -> f64 {
    (1.0 - poisson_weights(alpha_sq, max).iter().sum::<f64>()).max(0.0)
}

/// Random distribution on `0..=support_max` with the requested mean.
///
/// Exponential base weights on a random subset are tilted by `e^{θM}`, with
/// `θ` found by bisection so the mean matches.
pub fn random_with_mean<R: Rng + ?Sized>(mean: f64, support_max: u32, rng: &mut R) -> Result<PhotonDistribution> {
    if !(0.0..=f64::from(support_max)).contains(&mean) {
        return Err(BatteryError::InvalidDistribution(format!("mean {mean} outside 0..={support_max}")));
    }
    if mean == 0.0 || mean == f64::from(support_max) {
        return Ok(PhotonDistribution::fock(mean as u32));
    }
    loop {
        let mut base: Vec<(u32, f64)> = Vec::new();
        for m in 0..=support_max {
            if rng.random_bool(0.5) {
                let w: f64 = Exp1.sample(rng);
                if w > 0.0 {
                    base.push((m, w));
                }
            }
        }
        let below = base.iter().any(|(m, _)| f64::from(*m) < mean);
        let above = base.iter().any(|(m, _)| f64::from(*m) > mean);
        if !(below && above) {
            continue;
        }
        let tilted = |theta: f64| -> Vec<(u32, f64)> {
            // Shifting by the mean keeps the exponent small.
            base.iter().map(|&(m, w)| (m, w * (theta * (f64::from(m) - mean)).exp())).collect()
        };
        let excess = |theta: f64| -> f64 {
            let w = tilted(theta);
            let total: f64 = w.iter().map(|(_, x)| x).sum();
            w.iter().map(|(m, x)| (f64::from(*m) - mean) * x).sum::<f64>() / total
        };
        let (mut lo, mut hi) = (-1.0, 1.0);
        while excess(lo) > 0.0 {
            lo *= 2.0;
        }
        while excess(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if excess(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let weights = tilted(0.5 * (lo + hi)).into_iter().collect();
        let dist = PhotonDistribution::from_weights(weights)?;
        if (dist.mean() - mean).abs() < 1e-12 {
            return Ok(dist);
        }
    }
}

/// `F(M, t)` for `M = 0..=M_m` at one atom number.
#[derive(Debug)]
pub struct EnergyTable {
    n_atoms: u32,
    series: Vec<CosineSeries>,
    t_max: Vec<OnceLock<Option<f64>>>,
}

impl Clone for EnergyTable {
    fn clone(&self) -> Self {
        Self::from_series(self.n_atoms, self.series.clone())
    }
}

impl EnergyTable {
    pub fn from_series(n_atoms: u32, series: Vec<CosineSeries>) -> Self {
        let t_max = (0..series.len()).map(|_| OnceLock::new()).collect();
        Self { n_atoms, series, t_max }
    }

    /// Solve every sector `0..=m_max` by continuation and expand each `F(M, t)`.
    pub fn build(n_atoms: u32, m_max: u32, solver: &BetheSolver) -> Result<Self> {
        let ladder = solver.solve_ladder(n_atoms, m_max)?;
        let mut series = Vec::with_capacity(ladder.len());
        for (m, branches) in ladder.iter().enumerate() {
            let spec = SectorSpec::new(n_atoms, m as u32)?;
            series.push(SectorSpectrum::new(&spec, branches)?.number_state_energy()?);
        }
        Ok(Self::from_series(n_atoms, series))
    }

    pub fn from_records(n_atoms: u32, records: Vec<SeriesRecord>) -> Result<Self> {
        let mut records = records;
        records.sort_by_key(|r| r.m);
        for (i, r) in records.iter().enumerate() {
            if r.m as usize != i {
                return Err(BatteryError::InvalidDistribution(format!("table is missing M = {i}")));
            }
        }
        Ok(Self::from_series(n_atoms, records.into_iter().map(SeriesRecord::into_series).collect()))
    }

    pub fn records(&self) -> Vec<SeriesRecord> {
        self.series.iter().enumerate().map(|(m, s)| SeriesRecord::new(m as u32, s)).collect()
    }

    pub fn n_atoms(&self) -> u32 {
        self.n_atoms
    }

    pub fn m_max(&self) -> u32 {
        self.series.len().saturating_sub(1) as u32
    }

    pub fn series(&self, m: u32) -> Result<&CosineSeries> {
        self.series
            .get(m as usize)
            .ok_or(BatteryError::SupportExceedsTable { needed: m, available: self.m_max() })
    }

    pub fn f(&self, m: u32, t: f64) -> Result<f64> {
        Ok(self.series(m)?.value(t))
    }

    /// First maximum of `F(m, t)`; `None` for the empty `M = 0` entry.
    pub fn t_max(&self, m: u32) -> Result<Option<f64>> {
        self.series(m)?;
        Ok(*self.t_max[m as usize].get_or_init(|| self.series[m as usize].first_max_time().ok()))
    }

    /// Smallest first-maximum time over `1..=m_max`.
    pub fn min_t_max(&self) -> Result<Option<f64>> {
        let mut best: Option<f64> = None;
        for m in 1..=self.m_max() {
            if let Some(t) = self.t_max(m)? {
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        }
        Ok(best)
    }
}

fn check_support(dist: &PhotonDistribution, table: &EnergyTable) -> Result<()> {
    if dist.truncation() > table.m_max() {
        return Err(BatteryError::SupportExceedsTable { needed: dist.truncation(), available: table.m_max() });
    }
    Ok(())
}

/// `E(t) = Σ p(M) F(M, t)`.
pub fn stored_energy(dist: &PhotonDistribution, table: &EnergyTable, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(BatteryError::NegativeTime(t));
    }
    check_support(dist, table)?;
    dist.probs.iter().map(|(&m, &p)| Ok(p * table.f(m, t)?)).sum()
}

/// `P(t) = E(t) / t`.
pub fn charging_power(dist: &PhotonDistribution, table: &EnergyTable, t: f64) -> Result<f64> {
    if t <= 0.0 || t.is_nan() {
        return Err(BatteryError::NonpositiveTime(t));
    }
    Ok(stored_energy(dist, table, t)? / t)
}

/// One group `j` of the equal-probability, equal-expectation split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitPart {
    pub j: u32,
    /// `j p([n̄]+j) / Σ_k k p([n̄]+k)`.
    pub weight: f64,
    /// `p_j(i)` for `i = 0..=[n̄]`.
    pub below: Vec<f64>,
    /// `p([n̄] + j)`.
    pub above: f64,
    /// `(n̄ − [n̄])_j`.
    pub frac: f64,
    /// `[1 − (n̄ − [n̄])]_j`.
    pub complement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitTableau {
    pub floor: u32,
    pub frac: f64,
    /// `M_m − [n̄]`; zero for a point mass at the mean.
    pub d: u32,
    pub parts: Vec<SplitPart>,
}

impl SplitTableau {
    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// `max_i |Σ_j p_j(i) − p(i)|`.
    pub fn partition_error(&self, dist: &PhotonDistribution) -> f64 {
        if self.parts.is_empty() {
            return 0.0;
        }
        (0..=self.floor)
            .map(|i| {
                let sum: f64 = self.parts.iter().map(|p| p.below[i as usize]).sum();
                (sum - dist.probability(i)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Worst violation of `Σ_{i≤[n̄]} p_j(i) + p([n̄]+j) = [1−frac]_j + frac_j` over `j`.
    pub fn group_probability_error(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| (p.below.iter().sum::<f64>() + p.above - p.complement - p.frac).abs())
            .fold(0.0, f64::max)
    }

    /// Worst violation of the matching expectation identity over `j`.
    pub fn group_expectation_error(&self) -> f64 {
        let fl = f64::from(self.floor);
        self.parts
            .iter()
            .map(|p| {
                let lhs: f64 = p.below.iter().enumerate().map(|(i, x)| i as f64 * x).sum::<f64>()
                    + p.above * (fl + f64::from(p.j));
                let rhs = fl * p.complement + (fl + 1.0) * p.frac;
                (lhs - rhs).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Split the weight at and below `[n̄]` into `d` groups, one per state above it.
pub fn split(dist: &PhotonDistribution) -> Result<SplitTableau> {
    let (floor, frac) = split_mean(dist.mean());
    let d = dist.truncation().saturating_sub(floor);
    let below_mass: f64 = (0..floor).map(|i| dist.probability(i) * f64::from(floor - i)).sum();
    let balance: f64 = (1..=d).map(|k| f64::from(k) * dist.probability(floor + k)).sum();
    if balance == 0.0 {
        if below_mass + frac > SUM_TOL {
            return Err(BatteryError::DegenerateSplit { below: below_mass + frac });
        }
        return Ok(SplitTableau { floor, frac, d: 0, parts: Vec::new() });
    }
    let head: f64 = (0..=floor).map(|i| dist.probability(i)).sum();
    let parts = (1..=d)
        .map(|j| {
            let above = dist.probability(floor + j);
            let weight = f64::from(j) * above / balance;
            SplitPart {
                j,
                weight,
                below: (0..=floor).map(|i| weight * dist.probability(i)).collect(),
                above,
                frac: weight * frac,
                complement: weight * (head - frac) + above,
            }
        })
        .collect();
    Ok(SplitTableau { floor, frac, d, parts })
}

/// `ΔF` by both routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaF {
    /// `F([n̄]) + frac·(F([n̄]+1) − F([n̄])) − Σ p(M) F(M)`.
    pub direct: f64,
    /// Sum over the split groups of weighted chord-slope differences.
    pub split: f64,
}

/// `ΔF(t) = Σ p_s(M)F(M,t) − Σ p(M)F(M,t)` against the optimal distribution
/// of the same mean, evaluated directly and through the split; the routes
/// must agree within 1e-10.
pub fn delta_f_both(dist: &PhotonDistribution, table: &EnergyTable, t: f64) -> Result<DeltaF> {
    if t < 0.0 {
        return Err(BatteryError::NegativeTime(t));
    }
    check_support(dist, table)?;
    let tableau = split(dist)?;
    let fl = tableau.floor;
    let frac = tableau.frac;
    let f = |m: u32| table.f(m, t);
    let f_fl = f(fl)?;
    let rise = if frac > 0.0 { f(fl + 1)? - f_fl } else { 0.0 };

    let direct = f_fl + frac * rise - stored_energy(dist, table, t)?;

    let mut split_sum = 0.0;
    for part in &tableau.parts {
        if part.weight == 0.0 {
            continue;
        }
        let jf = f64::from(part.j);
        let upper_slope = (f(fl + part.j)? - f_fl) / jf;
        for i in 0..fl {
            let gap = f64::from(fl - i);
            let lower_slope = (f_fl - f(i)?) / gap;
            split_sum += part.below[i as usize] * gap * (lower_slope - upper_slope);
        }
        split_sum += part.frac * (rise - upper_slope);
    }

    if (direct - split_sum).abs() > SPLIT_AGREEMENT {
        return Err(BatteryError::SplitMismatch { direct, split: split_sum });
    }
    Ok(DeltaF { direct, split: split_sum })
}

pub fn delta_f(dist: &PhotonDistribution, table: &EnergyTable, t: f64) -> Result<f64> {
    Ok(delta_f_both(dist, table, t)?.direct)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeCheck {
    pub monotone: bool,
    /// First `M` with `F(M)/M > F(M−1)/(M−1) + 1e-9`.
    pub first_violation: Option<u32>,
}

/// Is `F(M, t)/M` non-increasing over `1..=m_max`?
pub fn avg_slope_monotone(table: &EnergyTable, t: f64) -> Result<SlopeCheck> {
    let mut prev = None;
    for m in 1..=table.m_max() {
        let slope = table.f(m, t)? / f64::from(m);
        if let Some(p) = prev {
            if slope > p + SLOPE_TOL {
                return Ok(SlopeCheck { monotone: false, first_violation: Some(m) });
            }
        }
        prev = Some(slope);
    }
    Ok(SlopeCheck { monotone: true, first_violation: None })
}

/// Outcome of one grid scan of an inequality; excess is `lhs − rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InequalityReport {
    pub checked: usize,
    pub violations: usize,
    pub max_excess: f64,
    pub at_t: Option<f64>,
}

impl InequalityReport {
    fn new() -> Self {
        Self { checked: 0, violations: 0, max_excess: f64::NEG_INFINITY, at_t: None }
    }

    fn record(&mut self, t: f64, excess: f64) {
        self.checked += 1;
        if excess > INEQUALITY_TOL {
            self.violations += 1;
        }
        if excess > self.max_excess {
            self.max_excess = excess;
            self.at_t = Some(t);
        }
    }

    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Which first-maximum time bounds the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// `t ≤ t_max(M)` of the largest photon number only.
    #[default]
    Larger,
    /// `t ≤ t_max` of every photon number involved.
    Joint,
}

impl Window {
    /// Upper end of the scan for the photon numbers in `ms` (largest first).
    pub fn end(self, table: &EnergyTable, ms: &[u32]) -> Result<Option<f64>> {
        let used = match self {
            Window::Larger => &ms[..1],
            Window::Joint => ms,
        };
        let mut end: Option<f64> = None;
        for &m in used {
            match table.t_max(m)? {
                Some(t) => end = Some(end.map_or(t, |e: f64| e.min(t))),
                None => return Ok(None),
            }
        }
        Ok(end)
    }
}

/// `F(M,t)/F(m,t) ≤ M/m` on grid points in `(0, end]`, `end` set by `window`.
pub fn check_ratio_inequality(
    table: &EnergyTable,
    big: u32,
    small: u32,
    grid: &[f64],
    window: Window,
) -> Result<InequalityReport> {
    if small == 0 || big < small {
        return Err(BatteryError::InvalidDistribution(format!("need M ≥ m ≥ 1, got M = {big}, m = {small}")));
    }
    let bound = f64::from(big) / f64::from(small);
    let end = window.end(table, &[big, small])?.unwrap_or(0.0);
    let mut report = InequalityReport::new();
    for &t in grid.iter().filter(|&&t| t > 0.0 && t <= end) {
        let denom = table.f(small, t)?;
        if denom <= 0.0 {
            continue;
        }
        report.record(t, table.f(big, t)? / denom - bound);
    }
    Ok(report)
}

/// `d/dt[F(M)/F(m0)] ≤ d/dt[F(m)/F(m0)]` on grid points in `(0, end]`,
/// skipping points where `F(m0, t) < 1e-8`.
pub fn check_derivative_inequality(
    table: &EnergyTable,
    big: u32,
    mid: u32,
    base: u32,
    grid: &[f64],
    window: Window,
) -> Result<InequalityReport> {
    if base == 0 || mid < base || big < mid {
        return Err(BatteryError::InvalidDistribution(format!(
            "need M ≥ m ≥ m0 ≥ 1, got M = {big}, m = {mid}, m0 = {base}"
        )));
    }
    let d_big = table.series(big)?.derivative();
    let d_mid = table.series(mid)?.derivative();
    let d_base = table.series(base)?.derivative();
    let end = window.end(table, &[big, mid, base])?.unwrap_or(0.0);
    let mut report = InequalityReport::new();
    for &t in grid.iter().filter(|&&t| t > 0.0 && t <= end) {
        let f0 = table.f(base, t)?;
        if f0 < QUOTIENT_FLOOR {
            continue;
        }
        let df0 = d_base.value(t);
        let quotient_rate = |f: f64, df: f64| (df * f0 - f * df0) / (f0 * f0);
        let lhs = quotient_rate(table.f(big, t)?, d_big.value(t));
        let rhs = quotient_rate(table.f(mid, t)?, d_mid.value(t));
        report.record(t, lhs - rhs);
    }
    Ok(report)
}

/// `M ≈ m E(M)/E(m)`, exact as `t → 0`.
pub fn estimate_photon_number(e_known: f64, m: u32, e_observed: f64) -> Result<f64> {
    if e_known <= 0.0 || e_known.is_nan() {
        return Err(BatteryError::ZeroReferenceEnergy(e_known));
    }
    Ok(f64::from(m) * e_observed / e_known)
}

/// `steps` evenly spaced points on `[0, t_end]`, both ends included.
pub fn linear_grid(t_end: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps).map(|i| t_end * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// `step, 2·step, …` up to and including `t_end`.
pub fn step_grid(t_end: f64, step: f64) -> Vec<f64> {
    let n = (t_end / step + 1e-9).floor() as usize;
    (1..=n).map(|i| i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::LazyLock;

    static TABLE: LazyLock<EnergyTable> =
        LazyLock::new(|| EnergyTable::build(10, 16, &BetheSolver::default()).unwrap());

    fn section_four() -> PhotonDistribution {
        PhotonDistribution::new(BTreeMap::from([
            (0, 4.0 / 45.0),
            (8, 0.25),
            (9, 1.0 / 9.0),
            (10, 0.1),
            (12, 0.25),
            (15, 0.2),
        ]))
        .unwrap()
    }

    #[test]
    fn fock_and_vacuum() {
        let d = PhotonDistribution::fock(10);
        assert_eq!(d.probability(10), 1.0);
        assert_eq!(d.mean(), 10.0);
        assert_eq!(PhotonDistribution::vacuum().truncation(), 0);
        for t in [0.1, 0.7] {
            assert_eq!(stored_energy(&d, &TABLE, t).unwrap(), TABLE.f(10, t).unwrap());
        }
    }

    #[test]
    fn coherent_laws() {
        assert!((poisson_weights(4.0, 16)[0] - (-4f64).exp()).abs() < 1e-15);
        assert_eq!(PhotonDistribution::coherent(0.0, Truncation::default()).unwrap(), PhotonDistribution::vacuum());
        let d = PhotonDistribution::coherent(6.0, Truncation::At(16)).unwrap();
        assert!((d.mean() - 6.0).abs() < 0.05);
        assert_eq!(d.truncation(), 16);
        assert!(matches!(
            PhotonDistribution::coherent(6.0, Truncation::At(8)),
            Err(BatteryError::TruncationTooSmall { .. })
        ));
        let tail = PhotonDistribution::coherent(6.0, Truncation::Tail(1e-6)).unwrap();
        assert!(poisson_tail(6.0, tail.truncation()) <= 1e-6);
        assert!(poisson_tail(6.0, tail.truncation() - 1) > 1e-6);
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(PhotonDistribution::new(BTreeMap::from([(0, 0.5), (1, 0.4)])).is_err());
        assert!(PhotonDistribution::new(BTreeMap::from([(0, 1.5), (1, -0.5)])).is_err());
        assert!(PhotonDistribution::from_weights(BTreeMap::from([(0, 0.0)])).is_err());
    }

    #[test]
    fn json_shape() {
        let d = PhotonDistribution::optimal(2.5).unwrap();
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(text, r#"{"probs":{"2":0.5,"3":0.5}}"#);
        let back: PhotonDistribution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<PhotonDistribution>(r#"{"probs":{"0":0.7}}"#).is_err());
    }

    #[test]
    fn optimal_states() {
        assert_eq!(PhotonDistribution::optimal(10.0).unwrap(), PhotonDistribution::fock(10));
        assert_eq!(PhotonDistribution::optimal(0.0).unwrap(), PhotonDistribution::vacuum());
        let d = PhotonDistribution::optimal(2.5).unwrap();
        assert_eq!((d.probability(2), d.probability(3)), (0.5, 0.5));
    }

    #[test]
    fn single_photon_peak() {
        let t = std::f64::consts::PI / (2.0 * 10f64.sqrt());
        let e = stored_energy(&PhotonDistribution::fock(1), &TABLE, t).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        assert_eq!(stored_energy(&section_four(), &TABLE, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn power_definition() {
        let d = PhotonDistribution::fock(1);
        // F(1, t) = sin²(√10 t) ≈ 10 t²
        let p = charging_power(&d, &TABLE, 1e-4).unwrap();
        assert!((p - 10.0 * 1e-4).abs() < 1e-9);
        assert!(matches!(charging_power(&d, &TABLE, 0.0), Err(BatteryError::NonpositiveTime(_))));
        assert_eq!(charging_power(&PhotonDistribution::vacuum(), &TABLE, 0.3).unwrap(), 0.0);
        let tm = TABLE.t_max(1).unwrap().unwrap();
        let p = charging_power(&d, &TABLE, tm).unwrap();
        assert!((p * tm - stored_energy(&d, &TABLE, tm).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn support_must_fit() {
        let d = PhotonDistribution::fock(17);
        assert!(matches!(stored_energy(&d, &TABLE, 0.2), Err(BatteryError::SupportExceedsTable { .. })));
    }

    #[test]
    fn section_four_split_identities() {
        let d = section_four();
        assert!((d.mean() - 10.0).abs() < 1e-12);
        let s = split(&d).unwrap();
        assert_eq!((s.floor, s.frac, s.d), (10, 0.0, 5));
        assert!(s.partition_error(&d) < 1e-12);
        assert!(s.group_probability_error() < 1e-12);
        assert!(s.group_expectation_error() < 1e-12);
        // Groups j = 2 and 5 carry all the weight: 2·(1/4) + 5·(1/5) = 3/2.
        assert!((s.parts[1].weight - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.parts[4].weight - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.parts[0].weight, 0.0);
    }

    #[test]
    fn point_mass_gives_empty_tableau() {
        assert!(split(&PhotonDistribution::fock(7)).unwrap().is_empty());
    }

    #[test]
    fn section_four_beats_nothing() {
        let tm = TABLE.t_max(10).unwrap().unwrap();
        for t in step_grid(tm, 0.01) {
            assert!(delta_f(&section_four(), &TABLE, t).unwrap() >= -1e-9, "t = {t}");
        }
    }

    #[test]
    fn optimal_has_zero_gap() {
        for mean in [2.5, 7.0, 3.25] {
            let d = PhotonDistribution::optimal(mean).unwrap();
            assert!(delta_f(&d, &TABLE, 0.2).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn convex_toy_table_reverses_sign() {
        // F(M) = M² at every t, so chord slopes grow.
        let series = (0..=4).map(|m| CosineSeries::new(f64::from(m * m), Vec::new())).collect();
        let table = EnergyTable::from_series(1, series);
        let d = PhotonDistribution::new(BTreeMap::from([(0, 0.5), (4, 0.5)])).unwrap();
        let gap = delta_f_both(&d, &table, 0.3).unwrap();
        assert!(gap.direct < 0.0);
        assert!((gap.direct - gap.split).abs() < 1e-12);
    }

    #[test]
    fn split_routes_agree_on_random_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..200 {
            let mean = f64::from(rng.random_range(1..=14u32));
            let d = random_with_mean(mean, 16, &mut rng).unwrap();
            let s = split(&d).unwrap();
            assert!(s.group_probability_error() < 1e-12 && s.group_expectation_error() < 1e-12, "{trial}");
            let gap = delta_f_both(&d, &TABLE, 0.05 + 0.01 * f64::from(trial % 20)).unwrap();
            assert!((gap.direct - gap.split).abs() < 1e-10);
        }
    }

    #[test]
    fn random_distributions_hit_their_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mean in [0.3, 3.0, 7.5, 19.9] {
            let d = random_with_mean(mean, 20, &mut rng).unwrap();
            assert!((d.mean() - mean).abs() < 1e-12);
            assert!(d.truncation() <= 20);
        }
    }

    #[test]
    fn slope_check() {
        assert!(avg_slope_monotone(&TABLE, 0.0).unwrap().monotone);
        let c = avg_slope_monotone(&EnergyTable::from_series(10, TABLE.series[..15].to_vec()), 0.3).unwrap();
        assert!(c.monotone, "{c:?}");
    }

    #[test]
    fn ratio_inequality_examples() {
        let grid = step_grid(3.0, 1e-3);
        let r = check_ratio_inequality(&TABLE, 4, 2, &grid, Window::Joint).unwrap();
        assert!(r.holds() && r.checked > 0, "{r:?}");
        // Past t_max(2) the denominator falls while F(4) still rises.
        let late = check_ratio_inequality(&TABLE, 4, 2, &grid, Window::Larger).unwrap();
        assert_eq!(late.violations, 1);
        assert!(late.at_t.unwrap() > TABLE.t_max(2).unwrap().unwrap());
        let same = check_ratio_inequality(&TABLE, 5, 5, &grid, Window::Larger).unwrap();
        assert!(same.max_excess.abs() < 1e-12);
        let ratio = TABLE.f(6, 1e-4).unwrap() / TABLE.f(3, 1e-4).unwrap();
        assert!((ratio - 2.0).abs() < 1e-6);
    }

    #[test]
    fn ratio_inequality_holds_on_joint_window() {
        let grid = step_grid(3.0, 1e-3);
        for big in 1..=14 {
            for small in 1..=big {
                let r = check_ratio_inequality(&TABLE, big, small, &grid, Window::Joint).unwrap();
                assert!(r.holds(), "M = {big}, m = {small}: {r:?}");
            }
        }
    }

    #[test]
    fn derivative_inequality_depends_on_base() {
        let grid = step_grid(3.0, 1e-3);
        let same = check_derivative_inequality(&TABLE, 4, 4, 2, &grid, Window::Larger).unwrap();
        assert_eq!(same.max_excess, 0.0);
        // Small reference photon numbers break it once t passes about 0.37.
        let early = check_derivative_inequality(&TABLE, 6, 4, 2, &step_grid(0.3, 1e-3), Window::Larger).unwrap();
        assert!(early.holds() && early.checked == 300);
        let full = check_derivative_inequality(&TABLE, 6, 4, 2, &grid, Window::Joint).unwrap();
        assert!(!full.holds());
        for base in 9..=14 {
            for mid in base..=14 {
                for big in mid..=14 {
                    let r = check_derivative_inequality(&TABLE, big, mid, base, &grid, Window::Larger).unwrap();
                    assert!(r.holds(), "({big}, {mid}, {base}): {r:?}");
                }
            }
        }
    }

    #[test]
    fn photon_number_estimates() {
        assert!((estimate_photon_number(0.7, 3, 0.7).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(estimate_photon_number(0.0, 3, 0.7), Err(BatteryError::ZeroReferenceEnergy(_))));
        let t = 0.02;
        let est = estimate_photon_number(TABLE.f(2, t).unwrap(), 2, TABLE.f(4, t).unwrap()).unwrap();
        assert!((3.9..=4.1).contains(&est));
        let late = estimate_photon_number(TABLE.f(2, 0.4).unwrap(), 2, TABLE.f(8, 0.4).unwrap()).unwrap();
        assert!(late < 8.0);
    }

    #[test]
    fn grids() {
        let g = linear_grid(3.0, 2000);
        assert_eq!((g.len(), g[0], g[1999]), (2000, 0.0, 3.0));
        let s = step_grid(0.5, 0.1);
        assert_eq!(s.len(), 5);
        assert!((s[4] - 0.5).abs() < 1e-15);
    }

    fn arb_dist() -> impl Strategy<Value = PhotonDistribution> {
        prop::collection::btree_map(0u32..=16, 0.01f64..1.0, 1..8)
            .prop_map(|w| PhotonDistribution::from_weights(w).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn stored_energy_is_linear(p in arb_dist(), q in arb_dist(), alpha in 0.0f64..=1.0, t in 0.0f64..3.0) {
            let mixed = stored_energy(&p.mix(&q, alpha).unwrap(), &TABLE, t).unwrap();
            let split = alpha * stored_energy(&p, &TABLE, t).unwrap()
                + (1.0 - alpha) * stored_energy(&q, &TABLE, t).unwrap();
            prop_assert!((mixed - split).abs() < 1e-12);
        }

        #[test]
        fn stored_energy_within_capacity(p in arb_dist(), t in 0.0f64..3.0) {
            let e = stored_energy(&p, &TABLE, t).unwrap();
            prop_assert!(e >= -1e-9 && e <= p.mean().min(10.0) + 1e-6);
        }

        #[test]
        fn split_partitions_every_level(p in arb_dist()) {
            let s = split(&p).unwrap();
            prop_assert!(s.partition_error(&p) < 1e-12);
            prop_assert!(s.group_probability_error() < 1e-12);
            prop_assert!(s.group_expectation_error() < 1e-12);
        }
    }
}
