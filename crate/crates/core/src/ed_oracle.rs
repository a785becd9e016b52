//! Brute-force exact diagonalization.
//!
//! Everything here is built from the ladder-operator matrix elements alone and
//! never consumes Bethe roots, so it can serve as ground truth for them.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

use crate::bethe::SectorSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("symmetric eigensolver did not converge")]
    ConvergenceFailure,
    #[error("eigen-decomposition residual {0:e} exceeds 1e-10")]
    ResidualTooLarge(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Tridiagonal `a†J₋ + J₊a` restricted to one excitation sector, in the basis
/// `|M−k⟩⊗|J, −J+k⟩`, `k = 0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorMatrix {
    pub spec: SectorSpec,
    /// `h_k = √((M−k)(2J−k)(k+1))`, length `K − 1`.
    pub offdiag: Vec<f64>,
}

impl SectorMatrix {
    pub fn dimension(&self) -> usize {
        self.offdiag.len() + 1
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.dimension();
        let mut h = DMatrix::zeros(k, k);
        for (i, &v) in self.offdiag.iter().enumerate() {
            h[(i, i + 1)] = v;
            h[(i + 1, i)] = v;
        }
        h
    }

    /// `H·v` without forming the dense matrix.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let k = self.dimension();
        let mut out = vec![0.0; k];
        for (i, &h) in self.offdiag.iter().enumerate() {
            out[i] += h * v[i + 1];
            out[i + 1] += h * v[i];
        }
        out
    }
}

pub fn sector_hamiltonian(spec: &SectorSpec) -> SectorMatrix {
    let m = f64::from(spec.excitations());
    let two_j = f64::from(spec.n_atoms());
    let offdiag = (0..spec.branch_count() - 1)
        .map(|k| {
            let k = k as f64;
            ((m - k) * (two_j - k) * (k + 1.0)).sqrt()
        })
        .collect();
    SectorMatrix { spec: *spec, offdiag }
}

/// Ascending eigenvalues with orthonormal eigenvectors, first component ≥ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

pub fn diagonalize(matrix: &SectorMatrix) -> Result<SectorEigen> {
    let (values, vectors) = symmetric_eigen(matrix.to_dense())?;
    let residual = values
        .iter()
        .zip(&vectors)
        .map(|(&e, v)| {
            matrix.apply(v).iter().zip(v).map(|(hv, x)| (hv - e * x).powi(2)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    if residual >= 1e-10 {
        return Err(OracleError::ResidualTooLarge(residual));
    }
    Ok(SectorEigen { values, vectors })
}

fn symmetric_eigen(h: DMatrix<f64>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let eig = SymmetricEigen::try_new(h, 1e-15, 10_000).ok_or(OracleError::ConvergenceFailure)?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // First non-negligible component positive.
            let pivot = col.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
            if pivot < 0.0 {
                col.into_iter().map(|x| -x).collect()
            } else {
                col
            }
        })
        .collect();
    Ok((values, vectors))
}

/// Exact time evolution of `|M⟩⊗|J,−J⟩` inside one sector.
#[derive(Debug, Clone)]
pub struct SectorOracle {
    spec: SectorSpec,
    eigen: SectorEigen,
}

impl SectorOracle {
    pub fn new(spec: &SectorSpec) -> Result<Self> {
        let eigen = diagonalize(&sector_hamiltonian(spec))?;
        Ok(Self { spec: *spec, eigen })
    }

    pub fn eigen(&self) -> &SectorEigen {
        &self.eigen
    }

    /// Amplitudes on `|M−k⟩⊗|J,−J+k⟩` at time `t` (units of `1/g`).
    pub fn amplitudes(&self, t: f64) -> Vec<Complex64> {
        let g = self.spec.coupling();
        let dim = self.eigen.values.len();
        let mut amp = vec![Complex64::new(0.0, 0.0); dim];
        for (e, v) in self.eigen.values.iter().zip(&self.eigen.vectors) {
            let phase = Complex64::from_polar(v[0], -e * g * t);
            for (a, x) in amp.iter_mut().zip(v) {
                *a += phase * x;
            }
        }
        amp
    }

    /// Energy absorbed by the atoms, `M − Σ_k (M−k)|amp_k(t)|²`.
    pub fn number_state_energy(&self, t: f64) -> f64 {
        let m = f64::from(self.spec.excitations());
        let photons: f64 = self
            .amplitudes(t)
            .iter()
            .enumerate()
            .map(|(k, a)| (m - k as f64) * a.norm_sqr())
            .sum();
        m - photons
    }
}

pub fn oracle_f(spec: &SectorSpec, t: f64) -> Result<f64> {
    Ok(SectorOracle::new(spec)?.number_state_energy(t))
}

/// Eigen-data handed to the Bethe solver for targeted recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSeed {
    pub energy: f64,
    pub vector: Vec<f64>,
}

pub fn eigen_seed(spec: &SectorSpec) -> Result<Vec<EigenSeed>> {
    let eigen = diagonalize(&sector_hamiltonian(spec))?;
    Ok(eigen
        .values
        .into_iter()
        .zip(eigen.vectors)
        .map(|(energy, vector)| EigenSeed { energy, vector })
        .collect())
}

/// Full Fock ⊗ Dicke evolution for superpositions of photon-number states.
///
/// Basis index `n·(N+1) + k` stands for `|n⟩⊗|J, −J+k⟩`, `n ≤ n_max`.
#[derive(Debug, Clone)]
pub struct FullStateOracle {
    n_atoms: usize,
    n_max: usize,
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
}

impl FullStateOracle {
    pub fn new(n_atoms: u32, n_max: usize) -> Result<Self> {
        if n_atoms == 0 {
            return Err(OracleError::InvalidInput("n_atoms must be positive".into()));
        }
        let spins = n_atoms as usize + 1;
        let two_j = f64::from(n_atoms);
        let dim = (n_max + 1) * spins;
        let mut h = DMatrix::zeros(dim, dim);
        for n in 1..=n_max {
            for k in 0..spins - 1 {
                // J₊a: |n, k⟩ → √n √((2J−k)(k+1)) |n−1, k+1⟩
                let kf = k as f64;
                let v = (n as f64).sqrt() * ((two_j - kf) * (kf + 1.0)).sqrt();
                let from = n * spins + k;
                let to = (n - 1) * spins + k + 1;
                h[(to, from)] = v;
                h[(from, to)] = v;
            }
        }
        let (values, vectors) = symmetric_eigen(h)?;
        Ok(Self { n_atoms: n_atoms as usize, n_max, values, vectors })
    }

    /// Stored energy `⟨J_z⟩(t) + J` for the initial state `Σ_n c_n |n⟩⊗|J,−J⟩`.
    pub fn stored_energy(&self, photon_amplitudes: &[f64], t: f64) -> Result<f64> {
        if photon_amplitudes.len() > self.n_max + 1 {
            return Err(OracleError::InvalidInput(format!(
                "initial state needs {} Fock levels, oracle holds {}",
                photon_amplitudes.len(),
                self.n_max + 1
            )));
        }
        let spins = self.n_atoms + 1;
        let dim = self.values.len();
        let mut psi0 = vec![0.0; dim];
        for (n, &c) in photon_amplitudes.iter().enumerate() {
            psi0[n * spins] = c;
        }
        let mut psi_t = vec![Complex64::new(0.0, 0.0); dim];
        for (e, v) in self.values.iter().zip(&self.vectors) {
            let overlap: f64 = v.iter().zip(&psi0).map(|(a, b)| a * b).sum();
            if overlap == 0.0 {
                continue;
            }
            let phase = Complex64::from_polar(overlap, -e * t);
            for (p, x) in psi_t.iter_mut().zip(v) {
                *p += phase * x;
            }
        }
        // ⟨J_z⟩ + J = Σ k |ψ_{n,k}|²
        Ok(psi_t.iter().enumerate().map(|(i, a)| (i % spins) as f64 * a.norm_sqr()).sum())
    }
}
