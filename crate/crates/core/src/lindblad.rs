//! Open-system charging: cavity decay and collective dephasing.
//!
//! The state lives on `|n⟩⊗|J, −J+k⟩`, `n ≤ n_max`, index `n·(N+1) + k`. Both
//! jump operators (`a`, `J_z`) commute with the total spin, so the maximal
//! multiplet is closed under the dynamics.
//!
//! `H = g(a†J₋ + J₊a)`. The `ω_c M̂` part is left out: it commutes with `H`
//! and with both dissipators, so dropping it just moves to the frame rotating
//! with `M̂`. Populations, `⟨J_z⟩` and the spectrum of `ρ` are unchanged.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::PhotonDistribution;

const TRACE_LIMIT: f64 = 1e-6;
const LEAK_LIMIT: f64 = 1e-6;
const MIN_EIG_EVERY: usize = 100;
const HERMITIAN_TOL: f64 = 1e-10;
const INPUT_TRACE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LindbladError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("density matrix has dimension {found}, configuration needs {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
    #[error("trace drifted by {drift:e} at t = {t}; try a smaller dt")]
    StepUnstable { t: f64, drift: f64 },
    #[error("population {population:e} reached n = n_max at t = {t}; raise n_max")]
    TruncationLeak { t: f64, population: f64 },
    #[error("eigensolver failed on the density matrix")]
    Eigen,
}

pub type Result<T> = std::result::Result<T, LindbladError>;

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// Rates and times share the unit of `g`; with `g = 1` everything is in units of the coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenSystemConfig {
    pub n_atoms: u32,
    pub n_max: usize,
    pub kappa: f64,
    pub gamma_phi: f64,
    pub g: f64,
    pub detuning: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Integrator steps between output rows.
    pub output_stride: usize,
}

impl Default for OpenSystemConfig {
    fn default() -> Self {
        Self {
            n_atoms: 10,
            n_max: 20,
            kappa: 0.0,
            gamma_phi: 0.0,
            g: 1.0,
            detuning: 0.0,
            dt: 1e-3,
            t_end: 3.0,
            output_stride: 10,
        }
    }
}

impl OpenSystemConfig {
    /// Defaults with `n_max = initial photons + 10`.
    pub fn for_initial(n_atoms: u32, initial_photons: usize) -> Self {
        Self { n_atoms, n_max: initial_photons + 10, ..Self::default() }
    }

    pub fn dimension(&self) -> usize {
        (self.n_max + 1) * (self.n_atoms as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LindbladError::InvalidConfig(msg));
        if self.n_atoms == 0 {
            return bad("n_atoms must be positive".into());
        }
        if !(self.kappa >= 0.0 && self.gamma_phi >= 0.0) {
            return bad(format!("rates must be nonnegative (kappa {}, gamma_phi {})", self.kappa, self.gamma_phi));
        }
        if self.detuning != 0.0 {
            return bad("only resonant dynamics (detuning 0) is supported".into());
        }
        if !(self.g > 0.0 && self.g.is_finite()) {
            return bad(format!("coupling must be positive, got {}", self.g));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be nonnegative, got {}", self.t_end));
        }
        if self.output_stride == 0 {
            return bad("output_stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Real sparse matrix in coordinate form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    pub dim: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseOp {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    pub fn adjoint(&self) -> SparseOp {
        SparseOp { dim: self.dim, entries: self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect() }
    }
}

/// Ladder operators on the truncated product basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Operators {
    pub a: SparseOp,
    pub a_dag: SparseOp,
    pub j_z: SparseOp,
    pub j_plus: SparseOp,
    pub j_minus: SparseOp,
    /// `a†a + J_z`.
    pub m_hat: SparseOp,
}

pub fn build_operators(n_atoms: u32, n_max: usize) -> Operators {
    let spins = n_atoms as usize + 1;
    let dim = (n_max + 1) * spins;
    let j = f64::from(n_atoms) / 2.0;
    let two_j = f64::from(n_atoms);
    let mut a = Vec::new();
    let mut j_plus = Vec::new();
    let mut j_z = Vec::new();
    let mut m_hat = Vec::new();
    for n in 0..=n_max {
        for k in 0..spins {
            let i = n * spins + k;
            let kf = k as f64;
            if n > 0 {
                a.push((i - spins, i, (n as f64).sqrt()));
            }
            if k + 1 < spins {
                j_plus.push((i + 1, i, ((two_j - kf) * (kf + 1.0)).sqrt()));
            }
            j_z.push((i, i, kf - j));
            m_hat.push((i, i, n as f64 + kf - j));
        }
    }
    let a = SparseOp { dim, entries: a };
    let j_plus = SparseOp { dim, entries: j_plus };
    Operators {
        a_dag: a.adjoint(),
        a,
        j_minus: j_plus.adjoint(),
        j_plus,
        j_z: SparseOp { dim, entries: j_z },
        m_hat: SparseOp { dim, entries: m_hat },
    }
}

/// `g(a†J₋ + J₊a)`.
pub fn hamiltonian(n_atoms: u32, n_max: usize, g: f64) -> SparseOp {
    let spins = n_atoms as usize + 1;
    let two_j = f64::from(n_atoms);
    let mut entries = Vec::new();
    for n in 1..=n_max {
        for k in 0..spins - 1 {
            let kf = k as f64;
            let v = g * (n as f64).sqrt() * ((two_j - kf) * (kf + 1.0)).sqrt();
            let from = n * spins + k;
            let to = (n - 1) * spins + k + 1;
            entries.push((to, from, v));
            entries.push((from, to, v));
        }
    }
    SparseOp { dim: (n_max + 1) * spins, entries }
}

/// Hermitian, unit-trace state on the product basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n_atoms: u32,
    n_max: usize,
    data: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn new(n_atoms: u32, n_max: usize, data: DMatrix<Complex64>) -> Result<Self> {
        let dim = (n_max + 1) * (n_atoms as usize + 1);
        if data.nrows() != dim || data.ncols() != dim {
            return Err(LindbladError::DimensionMismatch { expected: dim, found: data.nrows() });
        }
        let state = Self { n_atoms, n_max, data };
        let herm = state.hermiticity_error();
        if herm > HERMITIAN_TOL {
            return Err(LindbladError::InvalidState(format!("not Hermitian ({herm:e})")));
        }
        let trace = state.trace();
        if (trace - 1.0).abs() > INPUT_TRACE_TOL {
            return Err(LindbladError::InvalidState(format!("trace {trace}")));
        }
        Ok(state)
    }

    /// Incoherent mixture `Σ p(M) |M⟩⟨M| ⊗ |J,−J⟩⟨J,−J|`.
    pub fn from_distribution(n_atoms: u32, n_max: usize, dist: &PhotonDistribution) -> Result<Self> {
        if dist.truncation() as usize > n_max {
            return Err(LindbladError::InvalidConfig(format!(
                "initial photons up to {} exceed n_max = {n_max}",
                dist.truncation()
            )));
        }
        let spins = n_atoms as usize + 1;
        let dim = (n_max + 1) * spins;
        let mut data = DMatrix::from_element(dim, dim, zero());
        for (&m, &p) in dist.probs() {
            let i = m as usize * spins;
            data[(i, i)] = Complex64::new(p, 0.0);
        }
        Self::new(n_atoms, n_max, data)
    }

    pub fn fock(n_atoms: u32, n_max: usize, photons: u32) -> Result<Self> {
        Self::from_distribution(n_atoms, n_max, &PhotonDistribution::fock(photons))
    }

    /// Pure `(Σ c_n |n⟩) ⊗ |J,−J⟩`; the amplitudes must be normalized.
    pub fn pure_field(n_atoms: u32, n_max: usize, amplitudes: &[Complex64]) -> Result<Self> {
        if amplitudes.len() > n_max + 1 {
            return Err(LindbladError::InvalidConfig(format!(
                "{} field amplitudes exceed n_max = {n_max}",
                amplitudes.len()
            )));
        }
        let spins = n_atoms as usize + 1;
        let dim = (n_max + 1) * spins;
        let mut data = DMatrix::from_element(dim, dim, zero());
        for (n, cn) in amplitudes.iter().enumerate() {
            for (m, cm) in amplitudes.iter().enumerate() {
                data[(n * spins, m * spins)] = cn * cm.conj();
            }
        }
        Self::new(n_atoms, n_max, data)
    }

    pub fn n_atoms(&self) -> u32 {
        self.n_atoms
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dimension(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dimension();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self.data[(i, j)] - self.data[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let eig = SymmetricEigen::try_new(self.data.clone(), 1e-14, 10_000).ok_or(LindbladError::Eigen)?;
        Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// Largest photon number with nonzero population.
    fn max_photons(&self) -> usize {
        let spins = self.n_atoms as usize + 1;
        (0..self.dimension()).filter(|&i| self.data[(i, i)].re.abs() > 0.0).map(|i| i / spins).max().unwrap_or(0)
    }
}

/// `dρ/dt` by dense matrix products; the reference the integrator is tested against.
pub fn lindblad_rhs(rho: &DensityMatrix, config: &OpenSystemConfig) -> Result<DMatrix<Complex64>> {
    if rho.dimension() != config.dimension() {
        return Err(LindbladError::DimensionMismatch { expected: config.dimension(), found: rho.dimension() });
    }
    let ops = build_operators(config.n_atoms, config.n_max);
    let cplx = |m: DMatrix<f64>| m.map(|x| Complex64::new(x, 0.0));
    let h = cplx(hamiltonian(config.n_atoms, config.n_max, config.g).to_dense());
    let jz = cplx(ops.j_z.to_dense());
    let a = cplx(ops.a.to_dense());
    let ad = a.adjoint();
    let r = rho.matrix();
    let jz2 = &jz * &jz;
    let n = &ad * &a;
    let i = Complex64::new(0.0, 1.0);
    let c = |x: f64| Complex64::new(x, 0.0);
    let commutator = (&h * r - r * &h) * (-i);
    let dephasing = (&jz * r * &jz * c(2.0) - &jz2 * r - r * &jz2) * c(config.gamma_phi / 2.0);
    let decay = (&a * r * &ad * c(2.0) - &n * r - r * &n) * c(config.kappa / 2.0);
    Ok(commutator + dephasing + decay)
}

/// The Liouvillian restricted to entries `(i, j)` whose excitation difference
/// is in a fixed set. Every term conserves that difference, so the restriction
/// is exact for states supported there.
struct Liouvillian {
    pairs: Vec<(usize, usize)>,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

impl Liouvillian {
    fn new(config: &OpenSystemConfig, deltas: &BTreeSet<i64>) -> Self {
        let spins = config.n_atoms as usize + 1;
        let dim = config.dimension();
        let excitation = |i: usize| (i / spins + i % spins) as i64;
        let j = f64::from(config.n_atoms) / 2.0;
        let jz = |i: usize| (i % spins) as f64 - j;
        let photons = |i: usize| (i / spins) as f64;

        let mut index = vec![usize::MAX; dim * dim];
        let mut pairs = Vec::new();
        for a in 0..dim {
            for b in 0..dim {
                if deltas.contains(&(excitation(a) - excitation(b))) {
                    index[a * dim + b] = pairs.len();
                    pairs.push((a, b));
                }
            }
        }

        let mut neighbours: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for (r, c, v) in hamiltonian(config.n_atoms, config.n_max, config.g).entries {
            neighbours[r].push((c, v));
        }

        let mut row_start = Vec::with_capacity(pairs.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let i_unit = Complex64::new(0.0, 1.0);
        for &(a, b) in &pairs {
            row_start.push(cols.len());
            // −i(Hρ − ρH)
            for &(l, h) in &neighbours[a] {
                cols.push(index[l * dim + b]);
                vals.push(-i_unit * h);
            }
            for &(l, h) in &neighbours[b] {
                cols.push(index[a * dim + l]);
                vals.push(i_unit * h);
            }
            let gap = jz(a) - jz(b);
            let diag = -0.5 * config.gamma_phi * gap * gap - 0.5 * config.kappa * (photons(a) + photons(b));
            cols.push(index[a * dim + b]);
            vals.push(Complex64::new(diag, 0.0));
            let (na, nb) = (a / spins, b / spins);
            if config.kappa > 0.0 && na < config.n_max && nb < config.n_max {
                let up = index[(a + spins) * dim + (b + spins)];
                cols.push(up);
                vals.push(Complex64::new(config.kappa * ((photons(a) + 1.0) * (photons(b) + 1.0)).sqrt(), 0.0));
            }
        }
        row_start.push(cols.len());
        Self { pairs, row_start, cols, vals }
    }

    fn apply(&self, x: &[Complex64], out: &mut [Complex64]) {
        for (row, o) in out.iter_mut().enumerate() {
            let mut acc = zero();
            for k in self.row_start[row]..self.row_start[row + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *o = acc;
        }
    }
}

/// One output row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    /// `⟨J_z⟩ + N/2`.
    pub energy: f64,
    /// `E/t`, zero at `t = 0`.
    pub power: f64,
    pub trace: f64,
    /// Smallest eigenvalue of `ρ` at the latest check (every 100 steps).
    pub min_eig: f64,
    /// `⟨a†a + J_z⟩`.
    pub m_expect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSeries {
    pub samples: Vec<Sample>,
    pub max_trace_drift: f64,
    pub max_hermiticity_error: f64,
    pub lowest_eigenvalue: f64,
}

impl TimeSeries {
    pub const CSV_HEADER: &'static str = "t,E,P,trace,min_eig,m_expect";

    /// 12 significant digits per field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
                s.t, s.energy, s.power, s.trace, s.min_eig, s.m_expect
            ));
        }
        out
    }
}

/// Classical fixed-step RK4 from `rho0` to `config.t_end`.
pub fn evolve(rho0: &DensityMatrix, config: &OpenSystemConfig) -> Result<TimeSeries> {
    config.validate()?;
    if rho0.n_atoms() != config.n_atoms || rho0.dimension() != config.dimension() {
        return Err(LindbladError::DimensionMismatch { expected: config.dimension(), found: rho0.dimension() });
    }
    let initial = rho0.max_photons();
    if config.n_max < initial + 5 {
        return Err(LindbladError::InvalidConfig(format!(
            "n_max = {} must be at least the initial photon number {initial} + 5",
            config.n_max
        )));
    }

    let spins = config.n_atoms as usize + 1;
    let dim = config.dimension();
    let excitation = |i: usize| (i / spins + i % spins) as i64;
    let mut deltas = BTreeSet::new();
    for a in 0..dim {
        for b in 0..dim {
            if rho0.matrix()[(a, b)] != zero() {
                deltas.insert(excitation(a) - excitation(b));
            }
        }
    }
    let liouvillian = Liouvillian::new(config, &deltas);
    let pairs = &liouvillian.pairs;
    let mut x: Vec<Complex64> = pairs.iter().map(|&(a, b)| rho0.matrix()[(a, b)]).collect();

    let diagonal: Vec<usize> = (0..pairs.len()).filter(|&p| pairs[p].0 == pairs[p].1).collect();
    let mirror: Vec<usize> = {
        let lookup: std::collections::HashMap<(usize, usize), usize> =
            pairs.iter().enumerate().map(|(p, &ab)| (ab, p)).collect();
        pairs.iter().map(|&(a, b)| lookup[&(b, a)]).collect()
    };
    let j = f64::from(config.n_atoms) / 2.0;
    let n_atoms_half = j;
    let min_eig_of = |x: &[Complex64]| -> Result<f64> {
        let mut data = DMatrix::from_element(dim, dim, zero());
        for (p, &(a, b)) in pairs.iter().enumerate() {
            data[(a, b)] = x[p];
        }
        if deltas.len() == 1 && deltas.contains(&0) {
            // Block diagonal by excitation number.
            let mut lowest = f64::INFINITY;
            for ex in 0..=(config.n_max + spins - 1) as i64 {
                let members: Vec<usize> = (0..dim).filter(|&i| excitation(i) == ex).collect();
                let block = DMatrix::from_fn(members.len(), members.len(), |r, c| data[(members[r], members[c])]);
                let eig = SymmetricEigen::try_new(block, 1e-14, 10_000).ok_or(LindbladError::Eigen)?;
                lowest = eig.eigenvalues.iter().copied().fold(lowest, f64::min);
            }
            Ok(lowest)
        } else {
            let eig = SymmetricEigen::try_new(data, 1e-14, 10_000).ok_or(LindbladError::Eigen)?;
            Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
        }
    };

    let steps = (config.t_end / config.dt).round() as usize;
    let mut samples = Vec::with_capacity(steps / config.output_stride + 1);
    let mut max_trace_drift: f64 = 0.0;
    let mut max_herm: f64 = 0.0;
    let mut min_eig = min_eig_of(&x)?;
    let mut lowest_eig = min_eig;
    let (mut k1, mut k2, mut k3, mut k4) =
        (vec![zero(); x.len()], vec![zero(); x.len()], vec![zero(); x.len()], vec![zero(); x.len()]);
    let mut tmp = vec![zero(); x.len()];
    let dt = config.dt;

    for step in 0..=steps {
        let t = step as f64 * dt;
        if step > 0 && step % MIN_EIG_EVERY == 0 {
            min_eig = min_eig_of(&x)?;
            lowest_eig = lowest_eig.min(min_eig);
        }
        if step % config.output_stride == 0 || step == steps {
            let mut trace = 0.0;
            let mut stored = 0.0;
            let mut m_expect = 0.0;
            let mut edge = 0.0;
            for &p in &diagonal {
                let i = pairs[p].0;
                let pop = x[p].re;
                trace += pop;
                stored += (i % spins) as f64 * pop;
                m_expect += ((i / spins + i % spins) as f64 - n_atoms_half) * pop;
                if i / spins == config.n_max {
                    edge += pop;
                }
            }
            let drift = (trace - 1.0).abs();
            max_trace_drift = max_trace_drift.max(drift);
            if drift > TRACE_LIMIT {
                return Err(LindbladError::StepUnstable { t, drift });
            }
            if edge > LEAK_LIMIT {
                return Err(LindbladError::TruncationLeak { t, population: edge });
            }
            for (p, &q) in mirror.iter().enumerate() {
                max_herm = max_herm.max((x[p] - x[q].conj()).norm());
            }
            let power = if t > 0.0 { stored / t } else { 0.0 };
            samples.push(Sample { t, energy: stored, power, trace, min_eig, m_expect });
        }
        if step == steps {
            break;
        }
        liouvillian.apply(&x, &mut k1);
        for i in 0..x.len() {
            tmp[i] = x[i] + k1[i] * (0.5 * dt);
        }
        liouvillian.apply(&tmp, &mut k2);
        for i in 0..x.len() {
            tmp[i] = x[i] + k2[i] * (0.5 * dt);
        }
        liouvillian.apply(&tmp, &mut k3);
        for i in 0..x.len() {
            tmp[i] = x[i] + k3[i] * dt;
        }
        liouvillian.apply(&tmp, &mut k4);
        for i in 0..x.len() {
            x[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
        }
    }
    Ok(TimeSeries { samples, max_trace_drift, max_hermiticity_error: max_herm, lowest_eigenvalue: lowest_eig })
}
