//! Bethe eigenvectors in the number–Dicke basis and the cosine-series form of
//! the number-state stored energy `F(M, t)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bethe::{BetheBranch, SectorSpec};
use crate::ed_oracle::sector_hamiltonian;

const ORTHO_TOL: f64 = 1e-10;
const ENERGY_TOL: f64 = 1e-9;
const IMAG_TOL: f64 = 1e-9;
const EIGEN_RESIDUAL_TOL: f64 = 1e-8;
const MERGE_TOL: f64 = 1e-9;
const PRUNE_TOL: f64 = 1e-12;
const ANCHOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("expected {expected} branches, got {found}")]
    IncompleteBranchSet { found: usize, expected: usize },
    #[error("branch {index} has {roots} roots, sector needs {expected}")]
    WrongRootCount { index: usize, roots: usize, expected: usize },
    #[error("eigenvector residual {0:e} exceeds 1e-8")]
    EigenResidualTooLarge(f64),
    #[error("branch {index} energy differs from −Σλ")]
    EnergyMismatch { index: usize },
    #[error("eigenvectors are not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("imaginary part {0:e} survived realification")]
    ImaginaryLeak(f64),
    #[error("series value at t = 0 is {0:e}, expected 0")]
    NotAnchored(f64),
    #[error("branch index {index} out of range ({count} branches)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("no maximum found in (0, {horizon}]")]
    NoMaximumFound { horizon: f64 },
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// `e_0..=e_kmax` of the inputs via the one-pass recurrence `e_k ← e_k + x·e_{k−1}`.
pub fn elementary_symmetric(values: &[Complex64], kmax: usize) -> Vec<Complex64> {
    let mut e = vec![Complex64::new(0.0, 0.0); kmax + 1];
    e[0] = Complex64::new(1.0, 0.0);
    for (n, &x) in values.iter().enumerate() {
        for k in (1..=kmax.min(n + 1)).rev() {
            let prev = e[k - 1];
            e[k] += x * prev;
        }
    }
    e
}

/// Norms of `a†^{M−k} J₊^k |0⟩⊗|J,−J⟩`: `√((M−k)!) · Π_{l<k} √((2J−l)(l+1))`.
fn ladder_weights(spec: &SectorSpec) -> Vec<f64> {
    let m = spec.excitations() as usize;
    let two_j = f64::from(spec.n_atoms());
    let mut photon = (1..=m).map(|n| (n as f64).sqrt()).product::<f64>();
    let mut spin = 1.0;
    let mut out = Vec::with_capacity(spec.branch_count());
    for k in 0..spec.branch_count() {
        out.push(photon * spin);
        let kf = k as f64;
        spin *= ((two_j - kf) * (kf + 1.0)).max(0.0).sqrt();
        if m > k {
            photon /= ((m - k) as f64).sqrt();
        }
    }
    out
}

/// Unnormalized coefficients of `Π_j (a† − J₊/λ_j)|0⟩⊗|J,−J⟩` on `|M−k⟩⊗|J,−J+k⟩`.
///
/// Singular branches (all rapidities on the pole) go through
/// [`singular_limit_vector`] instead.
pub fn expand_eigenstate(branch: &BetheBranch, spec: &SectorSpec) -> Vec<Complex64> {
    if branch.is_singular() {
        return singular_limit_vector(spec, branch.eigenenergy).into_iter().map(|x| Complex64::new(x, 0.0)).collect();
    }
    let dim = spec.branch_count();
    let inv: Vec<Complex64> = branch.roots.iter().map(|l| -l.inv()).collect();
    let e = elementary_symmetric(&inv, dim - 1);
    e.iter().zip(ladder_weights(spec)).map(|(ek, w)| ek * w).collect()
}

/// Eigenvector attached to a singular solution, as a limit of rescaled Bethe vectors.
///
/// Multiplying the Bethe vector by `Π λ_j` turns it into `Σ_k c_k a†^{M−k} J₊^k |0̃⟩`,
/// where `c_k` are the coefficients of `P(λ) = Π (λ − λ_j)`. Along the family
/// `c_k(E)` generated by the root-polynomial recurrence this vector vanishes at
/// a singular energy; its lowest non-vanishing Taylor coefficient in `E − E*`
/// is the eigenvector.
pub fn singular_limit_vector(spec: &SectorSpec, energy: f64) -> Vec<f64> {
    let m = spec.excitations() as usize;
    let two_j = f64::from(spec.n_atoms());
    let order = m + 1;
    // c[k][p]: coefficient of ε^p in c_k(E* + ε).
    let mut c = vec![vec![0.0; order]; m + 2];
    c[m][0] = 1.0;
    for k in (1..=m).rev() {
        let kf = k as f64;
        let lift = (kf + 1.0) * (kf - two_j);
        let denom = m as f64 + 1.0 - kf;
        let mut next = vec![0.0; order];
        for p in 0..order {
            let shifted = if p > 0 { c[k][p - 1] } else { 0.0 };
            next[p] = (lift * c[k + 1][p] + energy * c[k][p] + shifted) / denom;
        }
        c[k - 1] = next;
    }
    let weights = ladder_weights(spec);
    let scale = c.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    for p in 0..order {
        let v: Vec<f64> = weights.iter().enumerate().map(|(k, w)| c[k][p] * w).collect();
        let big = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if big > 1e-12 * scale.max(1.0) {
            return v;
        }
    }
    vec![0.0; weights.len()]
}

/// All eigenpairs of one sector, built from its Bethe branches.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorSpectrum {
    pub spec: SectorSpec,
    /// Ascending, units of `g`.
    pub energies: Vec<f64>,
    /// Real orthonormal vectors, leading component positive.
    pub vectors: Vec<Vec<f64>>,
    /// Norms of the Bethe product states before normalization.
    pub norms: Vec<f64>,
    /// Largest `‖H v − E v‖` over the sector.
    pub eigen_residual: f64,
    /// Largest imaginary component discarded by realification.
    pub imag_leak: f64,
}

impl SectorSpectrum {
    pub fn new(spec: &SectorSpec, branches: &[BetheBranch]) -> Result<Self> {
        let expected = spec.branch_count();
        if branches.len() != expected {
            return Err(SpectralError::IncompleteBranchSet { found: branches.len(), expected });
        }
        let m = spec.excitations() as usize;
        let mut order: Vec<usize> = (0..branches.len()).collect();
        order.sort_by(|&a, &b| branches[a].eigenenergy.total_cmp(&branches[b].eigenenergy));

        let mut energies = Vec::with_capacity(expected);
        let mut vectors = Vec::with_capacity(expected);
        let mut norms = Vec::with_capacity(expected);
        let mut imag_leak: f64 = 0.0;
        for &i in &order {
            let branch = &branches[i];
            if branch.roots.len() != m {
                return Err(SpectralError::WrongRootCount { index: i, roots: branch.roots.len(), expected: m });
            }
            let sum: Complex64 = branch.roots.iter().sum();
            if (-sum.re - branch.eigenenergy).abs() > ENERGY_TOL {
                return Err(SpectralError::EnergyMismatch { index: i });
            }
            let raw = expand_eigenstate(branch, spec);
            let norm = raw.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let mut v = Vec::with_capacity(raw.len());
            for c in &raw {
                let c = c / norm;
                imag_leak = imag_leak.max(c.im.abs());
                v.push(c.re);
            }
            energies.push(branch.eigenenergy);
            vectors.push(v);
            norms.push(norm);
        }
        if imag_leak >= IMAG_TOL {
            return Err(SpectralError::ImaginaryLeak(imag_leak));
        }

        let h = sector_hamiltonian(spec);
        let eigen_residual = energies
            .iter()
            .zip(&vectors)
            .map(|(&e, v)| h.apply(v).iter().zip(v).map(|(hv, x)| (hv - e * x).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if eigen_residual >= EIGEN_RESIDUAL_TOL {
            return Err(SpectralError::EigenResidualTooLarge(eigen_residual));
        }

        let mut ortho: f64 = 0.0;
        for a in 0..vectors.len() {
            for b in a..vectors.len() {
                let dot: f64 = vectors[a].iter().zip(&vectors[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                ortho = ortho.max((dot - want).abs());
            }
        }
        if ortho >= ORTHO_TOL {
            return Err(SpectralError::NotOrthonormal(ortho));
        }
        Ok(Self { spec: *spec, energies, vectors, norms, eigen_residual, imag_leak })
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// `⟨Φ_σ | M⟩⊗|J,−J⟩`, the leading component of the normalized eigenvector.
    pub fn initial_overlap(&self, sigma: usize) -> Result<f64> {
        self.vectors
            .get(sigma)
            .map(|v| v[0])
            .ok_or(SpectralError::IndexOutOfRange { index: sigma, count: self.len() })
    }

    /// `⟨v_γ| diag(M−k) |v_σ⟩`.
    fn photon_element(&self, gamma: usize, sigma: usize) -> f64 {
        let m = f64::from(self.spec.excitations());
        self.vectors[gamma]
            .iter()
            .zip(&self.vectors[sigma])
            .enumerate()
            .map(|(k, (a, b))| (m - k as f64) * a * b)
            .sum()
    }

    /// `F(M, t) = M − ⟨a†a⟩(t)` as an exact cosine series.
    pub fn number_state_energy(&self) -> Result<CosineSeries> {
        if self.imag_leak >= IMAG_TOL {
            return Err(SpectralError::ImaginaryLeak(self.imag_leak));
        }
        let m = f64::from(self.spec.excitations());
        let g = self.spec.coupling();
        let c: Vec<f64> = self.vectors.iter().map(|v| v[0]).collect();
        let mut offset = m;
        let mut terms = Vec::new();
        for s in 0..self.len() {
            offset -= c[s] * c[s] * self.photon_element(s, s);
            for gm in 0..s {
                let amp = -2.0 * c[gm] * c[s] * self.photon_element(gm, s);
                let omega = (self.energies[s] - self.energies[gm]) * g;
                terms.push(CosineTerm { amplitude: amp, omega });
            }
        }
        let mut series = CosineSeries::new(offset, terms);
        let at_zero = series.value(0.0);
        if at_zero.abs() >= ANCHOR_TOL {
            return Err(SpectralError::NotAnchored(at_zero));
        }
        // F(M, 0) = 0 exactly.
        series.offset = -series.terms.iter().map(|t| t.amplitude).sum::<f64>();
        Ok(series)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub amplitude: f64,
    pub omega: f64,
}

/// `value(t) = offset + Σ amplitude·cos(omega·t)`, omegas strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CosineSeries {
    pub offset: f64,
    pub terms: Vec<CosineTerm>,
}

impl CosineSeries {
    /// Sorts, merges equal frequencies (within 1e-9) and prunes tiny amplitudes.
    /// Zero-frequency content is folded into the offset.
    pub fn new(mut offset: f64, mut terms: Vec<CosineTerm>) -> Self {
        for t in terms.iter_mut() {
            t.omega = t.omega.abs();
        }
        terms.sort_by(|a, b| a.omega.total_cmp(&b.omega));
        let mut merged: Vec<CosineTerm> = Vec::with_capacity(terms.len());
        for t in terms {
            if t.omega <= MERGE_TOL {
                offset += t.amplitude;
                continue;
            }
            match merged.last_mut() {
                Some(last) if t.omega - last.omega <= MERGE_TOL => last.amplitude += t.amplitude,
                _ => merged.push(t),
            }
        }
        merged.retain(|t| t.amplitude.abs() >= PRUNE_TOL);
        Self { offset, terms: merged }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.offset == 0.0 && self.terms.is_empty()
    }

    /// Evaluated as `value(0) − 2Σ a sin²(ωt/2)` to keep small-`t` values accurate.
    pub fn value(&self, t: f64) -> f64 {
        // Summed like the anchor, so an anchored series gives exactly 0 at t = 0.
        let at_zero = self.offset + self.terms.iter().map(|term| term.amplitude).sum::<f64>();
        let drift: f64 = self
            .terms
            .iter()
            .map(|term| {
                let s = (0.5 * term.omega * t).sin();
                term.amplitude * s * s
            })
            .sum();
        at_zero - 2.0 * drift
    }

    pub fn derivative(&self) -> SineSeries {
        SineSeries {
            terms: self
                .terms
                .iter()
                .map(|t| CosineTerm { amplitude: -t.amplitude * t.omega, omega: t.omega })
                .collect(),
        }
    }

    /// First local maximum in `(0, 20]`.
    pub fn first_max_time(&self) -> Result<f64> {
        first_max_time_of(|t| self.value(t), 20.0)
    }
}

/// `Σ amplitude·sin(omega·t)`; the exact derivative of a [`CosineSeries`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SineSeries {
    pub terms: Vec<CosineTerm>,
}

impl SineSeries {
    pub fn value(&self, t: f64) -> f64 {
        self.terms.iter().map(|term| term.amplitude * (term.omega * t).sin()).sum()
    }
}

/// Grid scan with step 1e-3 for the first strict rise followed by a fall,
/// then golden-section refinement to 1e-6.
pub fn first_max_time_of<F: Fn(f64) -> f64>(f: F, horizon: f64) -> Result<f64> {
    const STEP: f64 = 1e-3;
    let steps = (horizon / STEP).round() as usize;
    let mut cur = f(STEP);
    let mut rising = cur > f(0.0);
    for i in 1..steps {
        let next = f((i + 1) as f64 * STEP);
        if rising && cur >= next {
            return Ok(golden_max(&f, (i - 1) as f64 * STEP, (i + 1) as f64 * STEP, 1e-6));
        }
        if next > cur {
            rising = true;
        } else if next < cur {
            rising = false;
        }
        cur = next;
    }
    Err(SpectralError::NoMaximumFound { horizon })
}

fn golden_max<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// JSON shape `{"m", "offset", "terms": [[amp, omega], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub m: u32,
    pub offset: f64,
    pub terms: Vec<[f64; 2]>,
}

impl SeriesRecord {
    pub fn new(m: u32, series: &CosineSeries) -> Self {
        Self { m, offset: series.offset, terms: series.terms.iter().map(|t| [t.amplitude, t.omega]).collect() }
    }

    pub fn into_series(self) -> CosineSeries {
        CosineSeries::new(
            self.offset,
            self.terms.into_iter().map(|[amplitude, omega]| CosineTerm { amplitude, omega }).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bethe::{solve_sector, BetheSolver};
    use crate::ed_oracle::{diagonalize, SectorOracle};

    fn spectrum(n: u32, m: u32) -> SectorSpectrum {
        let spec = SectorSpec::new(n, m).unwrap();
        SectorSpectrum::new(&spec, &solve_sector(&spec).unwrap()).unwrap()
    }

    #[test]
    fn symmetric_polynomials_match_expansion() {
        let xs = [Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(3.0, 0.0)];
        let e = elementary_symmetric(&xs, 3);
        let want = [1.0, 6.0, 11.0, 6.0];
        for (a, b) in e.iter().zip(want) {
            assert!((a.re - b).abs() < 1e-14 && a.im == 0.0);
        }
        assert_eq!(elementary_symmetric(&xs, 1).len(), 2);
    }

    #[test]
    fn single_excitation_vectors() {
        let s = spectrum(10, 1);
        let h = 0.5f64.sqrt();
        // Lowest energy −√10 pairs with λ = √10 and the vector (1, −1)/√2.
        assert!((s.energies[0] + 10f64.sqrt()).abs() < 1e-12);
        assert!((s.vectors[0][0] - h).abs() < 1e-12 && (s.vectors[0][1] + h).abs() < 1e-12);
        let dot: f64 = s.vectors[0].iter().zip(&s.vectors[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        assert!((s.initial_overlap(0).unwrap() - h).abs() < 1e-12);
        assert!((s.initial_overlap(1).unwrap() - h).abs() < 1e-12);
        assert!(s.initial_overlap(2).is_err());
    }

    #[test]
    fn vacuum_sector_vector() {
        let spec = SectorSpec::new(10, 0).unwrap();
        let s = SectorSpectrum::new(&spec, &[BetheBranch::vacuum()]).unwrap();
        assert_eq!(s.vectors, vec![vec![1.0]]);
        assert_eq!(s.initial_overlap(0).unwrap(), 1.0);
        assert!(s.number_state_energy().unwrap().is_zero());
    }

    #[test]
    fn m2_energies() {
        let s = spectrum(10, 2);
        let r = 38f64.sqrt();
        for (got, want) in s.energies.iter().zip([-r, 0.0, r]) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn m4_vectors_match_oracle_up_to_sign() {
        let s = spectrum(10, 4);
        let spec = SectorSpec::new(10, 4).unwrap();
        let eig = diagonalize(&sector_hamiltonian(&spec)).unwrap();
        for (v, w) in s.vectors.iter().zip(&eig.vectors) {
            let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-10);
        }
        assert!(s.imag_leak < 1e-9);
    }

    #[test]
    fn singular_limit_is_null_vector() {
        // (N=2, M=3): H = [[0, √6, 0], [√6, 0, 2], [0, 2, 0]] has null vector (2, 0, −√6)/√10.
        let spec = SectorSpec::new(2, 3).unwrap();
        let v = singular_limit_vector(&spec, 0.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = [2.0 / 10f64.sqrt(), 0.0, -6f64.sqrt() / 10f64.sqrt()];
        let dot: f64 = v.iter().zip(want).map(|(a, b)| a * b / norm).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_sector_builds() {
        let s = spectrum(10, 11);
        assert_eq!(s.len(), 11);
        assert!(s.energies[5].abs() < 1e-12);
        assert!(s.eigen_residual < 1e-8);
    }

    #[test]
    fn overlaps_are_complete() {
        let s = spectrum(10, 6);
        let total: f64 = (0..s.len()).map(|i| s.initial_overlap(i).unwrap().powi(2)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rabi_series() {
        let f = spectrum(10, 1).number_state_energy().unwrap();
        assert!((f.offset - 0.5).abs() < 1e-12);
        assert_eq!(f.terms.len(), 1);
        assert!((f.terms[0].amplitude + 0.5).abs() < 1e-12);
        assert!((f.terms[0].omega - 2.0 * 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn m2_series_matches_printed_form() {
        let f = spectrum(10, 2).number_state_energy().unwrap();
        assert!((f.offset - 1.01).abs() < 0.01);
        assert_eq!(f.terms.len(), 2);
        assert!((f.terms[0].amplitude + 1.00).abs() < 0.01 && (f.terms[0].omega - 6.16).abs() < 0.01);
        assert!((f.terms[1].amplitude + 0.01).abs() < 0.01 && (f.terms[1].omega - 12.33).abs() < 0.01);
    }

    #[test]
    fn series_agrees_with_oracle() {
        let ladder = BetheSolver::default().solve_ladder(10, 8).unwrap();
        for (m, branches) in ladder.iter().enumerate() {
            let spec = SectorSpec::new(10, m as u32).unwrap();
            let f = SectorSpectrum::new(&spec, branches).unwrap().number_state_energy().unwrap();
            let oracle = SectorOracle::new(&spec).unwrap();
            for i in 0..=300 {
                let t = i as f64 * 0.01;
                assert!((f.value(t) - oracle.number_state_energy(t)).abs() < 1e-9, "M={m} t={t}");
            }
        }
    }

    #[test]
    fn first_maximum_of_rabi() {
        let f = spectrum(10, 1).number_state_energy().unwrap();
        let t = f.first_max_time().unwrap();
        assert!((t - std::f64::consts::PI / (2.0 * 10f64.sqrt())).abs() < 1e-6);
        assert!(matches!(CosineSeries::zero().first_max_time(), Err(SpectralError::NoMaximumFound { .. })));
    }

    #[test]
    fn first_maximum_dominates_earlier_grid() {
        let f = spectrum(10, 10).number_state_energy().unwrap();
        let t_max = f.first_max_time().unwrap();
        assert!(t_max > 0.0);
        let peak = f.value(t_max);
        let mut t = 0.0;
        while t <= t_max {
            assert!(peak >= f.value(t) - 1e-12);
            t += 1e-3;
        }
    }

    #[test]
    fn derivative_is_exact() {
        let f1 = spectrum(10, 1).number_state_energy().unwrap();
        assert_eq!(f1.derivative().value(0.0), 0.0);
        let f2 = spectrum(10, 2).number_state_energy().unwrap();
        let d = f2.derivative();
        let h = 1e-5;
        for t in [0.05, 0.3, 0.77, 1.9] {
            let fd = (f2.value(t + h) - f2.value(t - h)) / (2.0 * h);
            assert!((fd - d.value(t)).abs() < 1e-6);
        }
        assert_eq!(CosineSeries::zero().derivative().value(0.4), 0.0);
    }

    #[test]
    fn merging_and_pruning() {
        let s = CosineSeries::new(1.0, vec![
            CosineTerm { amplitude: -0.25, omega: 2.0 },
            CosineTerm { amplitude: -0.25, omega: 2.0 + 1e-12 },
            CosineTerm { amplitude: 1e-14, omega: 3.0 },
            CosineTerm { amplitude: -0.5, omega: 0.0 },
        ]);
        assert_eq!(s.offset, 0.5);
        assert_eq!(s.terms.len(), 1);
        assert_eq!(s.terms[0].amplitude, -0.5);
    }

    #[test]
    fn series_record_round_trip() {
        let f = spectrum(10, 3).number_state_energy().unwrap();
        let json = serde_json::to_string(&SeriesRecord::new(3, &f)).unwrap();
        let back: SeriesRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_series(), f);
    }
}
