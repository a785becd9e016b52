//! Bethe ansatz equations of the resonant Tavis-Cummings model.
//!
//! For `N` atoms (total spin `J = N/2`) and `M` excitations every eigenstate of
//! the interaction Hamiltonian `a†J₋ + J₊a` is labelled by a set of `M` complex
//! rapidities `λ_j` solving
//!
//! ```text
//! J/λ_j − λ_j/2 − Σ_{k≠j} 1/(λ_j − λ_k) = 0,     E = −Σ_j λ_j.
//! ```
//!
//! There are `K = min(2J, M) + 1` solution sets per sector. They are found by
//! warm-starting damped complex Newton iteration from the solutions of the
//! `M − 1` sector (the trial-solution continuation), with random restarts and
//! an optional oracle-seeded recovery as fallbacks.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ed_oracle;

/// Largest excitation number the solver accepts.
pub const MAX_EXCITATIONS: u32 = 64;
/// Largest atom number the solver accepts.
pub const MAX_ATOMS: u32 = 64;

const POLE_EPS: f64 = 1e-14;
const ZERO_ROOT_EPS: f64 = 1e-10;
const REAL_SNAP: f64 = 1e-8;
const PAIR_TOL: f64 = 1e-6;
const DEDUP_TOL: f64 = 1e-6;
const DUPLICATE_SHIFT: f64 = 1e-3;
const RESTART_SIGMA: f64 = 0.2;
const MAX_HALVINGS: usize = 30;
const MAX_DAMPING_FAILURES: usize = 5;
const CONDITION_LIMIT: f64 = 1e14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BetheError {
    #[error("invalid sector: {0}")]
    InvalidSpec(String),
    #[error("root {index} is zero (|λ| < 1e-14)")]
    ZeroRoot { index: usize },
    #[error("roots {first} and {second} coincide")]
    CoincidentRoots { first: usize, second: usize },
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("a root collapsed onto the pole at λ = 0")]
    DivergedToZeroRoot,
    #[error("Jacobian is singular after repeated damping failures")]
    SingularJacobian,
    #[error("complex root {re}{im:+}i has no conjugate partner")]
    UnpairedComplexRoot { re: f64, im: f64 },
    #[error("found {found} of {expected} branches")]
    MissingBranches { found: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, BetheError>;

/// One excitation sector `(N, M)` of the resonant model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorSpec {
    n_atoms: u32,
    excitations: u32,
    coupling: f64,
}

impl SectorSpec {
    pub fn new(n_atoms: u32, excitations: u32) -> Result<Self> {
        if n_atoms == 0 {
            return Err(BetheError::InvalidSpec("at least one atom is required".into()));
        }
        if n_atoms > MAX_ATOMS {
            return Err(BetheError::InvalidSpec(format!(
                "n_atoms = {n_atoms} exceeds the supported maximum {MAX_ATOMS}"
            )));
        }
        if excitations > MAX_EXCITATIONS {
            return Err(BetheError::InvalidSpec(format!(
                "M = {excitations} exceeds the supported maximum {MAX_EXCITATIONS}"
            )));
        }
        Ok(Self { n_atoms, excitations, coupling: 1.0 })
    }

    /// Coupling strength `g`; energies are reported in units of `g`.
    pub fn with_coupling(mut self, g: f64) -> Result<Self> {
        if !(g > 0.0 && g.is_finite()) {
            return Err(BetheError::InvalidSpec(format!("coupling must be positive, got {g}")));
        }
        self.coupling = g;
        Ok(self)
    }

    /// Only the resonant case is solvable here.
    pub fn with_detuning(self, detuning: f64) -> Result<Self> {
        if detuning != 0.0 {
            return Err(BetheError::InvalidSpec(format!(
                "nonzero detuning {detuning} is not supported"
            )));
        }
        Ok(self)
    }

    pub fn n_atoms(&self) -> u32 {
        self.n_atoms
    }

    pub fn excitations(&self) -> u32 {
        self.excitations
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn detuning(&self) -> f64 {
        0.0
    }

    pub fn total_spin(&self) -> f64 {
        f64::from(self.n_atoms) / 2.0
    }

    /// `K = min(2J, M) + 1`.
    pub fn branch_count(&self) -> usize {
        self.n_atoms.min(self.excitations) as usize + 1
    }

    pub fn with_excitations(&self, excitations: u32) -> Result<Self> {
        Self::new(self.n_atoms, excitations)?.with_coupling(self.coupling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Continuation,
    RandomRestart,
    OracleSeeded,
    /// All rapidities sit on the pole `λ = 0`; the eigenvector is a limit.
    SingularLimit,
}

/// A solved set of rapidities together with its eigenenergy.
#[derive(Debug, Clone, PartialEq)]
pub struct BetheBranch {
    pub roots: Vec<Complex64>,
    /// `E = −Σ λ_j` in units of `g`.
    pub eigenenergy: f64,
    /// `max_j |f_j|` at the returned roots.
    pub residual_norm: f64,
    pub provenance: Provenance,
}

impl BetheBranch {
    /// The empty branch of the `M = 0` sector.
    pub fn vacuum() -> Self {
        Self { roots: Vec::new(), eigenenergy: 0.0, residual_norm: 0.0, provenance: Provenance::Continuation }
    }

    fn from_roots(roots: Vec<Complex64>, j: f64, provenance: Provenance) -> Result<Self> {
        let residual_norm = max_abs(&bae_residual(&roots, j)?);
        let sum: Complex64 = roots.iter().sum();
        Ok(Self { roots, eigenenergy: -sum.re, residual_norm, provenance })
    }

    pub fn excitations(&self) -> usize {
        self.roots.len()
    }

    pub fn is_singular(&self) -> bool {
        self.roots.iter().any(|r| *r == Complex64::new(0.0, 0.0))
    }

    /// Two branches are the same solution if their roots match one-to-one within tolerance.
    ///
    /// Matching is by set rather than by position: roots whose real parts tie up
    /// to rounding may sort differently in two otherwise identical lists.
    pub fn same_solution(&self, other: &BetheBranch) -> bool {
        if self.roots.len() != other.roots.len() {
            return false;
        }
        let mut unused: Vec<Complex64> = other.roots.clone();
        self.roots.iter().all(|a| {
            let hit = unused.iter().position(|b| (a - b).norm() <= DEDUP_TOL);
            hit.map(|i| unused.swap_remove(i)).is_some()
        })
    }
}

fn max_abs(values: &[Complex64]) -> f64 {
    values.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn check_roots(roots: &[Complex64]) -> Result<()> {
    for (i, r) in roots.iter().enumerate() {
        if r.norm() < POLE_EPS {
            return Err(BetheError::ZeroRoot { index: i });
        }
    }
    for i in 0..roots.len() {
        for k in i + 1..roots.len() {
            if (roots[i] - roots[k]).norm() < POLE_EPS {
                return Err(BetheError::CoincidentRoots { first: i, second: k });
            }
        }
    }
    Ok(())
}

/// `f_j = J/λ_j − λ_j/2 − Σ_{k≠j} 1/(λ_j − λ_k)`.
pub fn bae_residual(roots: &[Complex64], j: f64) -> Result<Vec<Complex64>> {
    check_roots(roots)?;
    Ok(roots
        .iter()
        .enumerate()
        .map(|(a, &la)| {
            let pair: Complex64 = roots
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, &lb)| (la - lb).inv())
                .sum();
            j / la - la / 2.0 - pair
        })
        .collect())
}

/// Analytic Jacobian `∂f_j/∂λ_k` of [`bae_residual`].
pub fn bae_jacobian(roots: &[Complex64], j: f64) -> Result<DMatrix<Complex64>> {
    check_roots(roots)?;
    let m = roots.len();
    let mut jac = DMatrix::from_element(m, m, Complex64::new(0.0, 0.0));
    for a in 0..m {
        let la = roots[a];
        let mut diag = -j / (la * la) - 0.5;
        for b in 0..m {
            if b == a {
                continue;
            }
            let inv_sq = ((la - roots[b]) * (la - roots[b])).inv();
            diag += inv_sq;
            jac[(a, b)] = -inv_sq;
        }
        jac[(a, a)] = diag;
    }
    Ok(jac)
}

/// Sort by `(Re, Im)`, snap nearly-real roots onto the real axis and replace
/// near-conjugate pairs by exact conjugates.
pub fn canonicalize(roots: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out: Vec<Complex64> = Vec::with_capacity(roots.len());
    let mut lower: Vec<Complex64> = Vec::new();
    let mut upper: Vec<Complex64> = Vec::new();
    for &r in roots {
        if r.im.abs() < REAL_SNAP {
            out.push(Complex64::new(r.re, 0.0));
        } else if r.im > 0.0 {
            upper.push(r);
        } else {
            lower.push(r);
        }
    }
    // Greedy nearest-partner matching, processing upper roots in a fixed order.
    upper.sort_by(cmp_complex);
    for u in upper {
        let target = u.conj();
        let best = lower
            .iter()
            .enumerate()
            .map(|(i, l)| (i, (l - target).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((i, dist)) if dist <= PAIR_TOL => {
                let l = lower.swap_remove(i);
                let re = 0.5 * (u.re + l.re);
                let im = 0.5 * (u.im - l.im);
                out.push(Complex64::new(re, -im));
                out.push(Complex64::new(re, im));
            }
            _ => return Err(BetheError::UnpairedComplexRoot { re: u.re, im: u.im }),
        }
    }
    if let Some(l) = lower.first() {
        return Err(BetheError::UnpairedComplexRoot { re: l.re, im: l.im });
    }
    out.sort_by(cmp_complex);
    Ok(out)
}

fn cmp_complex(a: &Complex64, b: &Complex64) -> Ordering {
    a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
}

fn min_separation(roots: &[Complex64]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..roots.len() {
        for k in i + 1..roots.len() {
            best = best.min((roots[i] - roots[k]).norm());
        }
    }
    best
}

/// Damped Newton iteration on the Bethe equations, followed by canonicalization.
pub fn newton_refine(guess: &[Complex64], j: f64, tol: f64, max_iter: usize) -> Result<BetheBranch> {
    if guess.is_empty() {
        return Ok(BetheBranch::vacuum());
    }
    if guess.iter().any(|r| r.norm() < ZERO_ROOT_EPS) {
        return Err(BetheError::DivergedToZeroRoot);
    }
    let mut x = iterate(guess.to_vec(), j, tol, max_iter)?;

    // Symmetrize, then polish so the reported residual belongs to the canonical roots.
    for _ in 0..3 {
        x = canonicalize(&x)?;
        let res = max_abs(&bae_residual(&x, j)?);
        if res < tol {
            break;
        }
        x = newton_step_plain(&x, j)?;
    }
    let x = canonicalize(&x)?;
    let branch = BetheBranch::from_roots(x, j, Provenance::Continuation)?;
    if branch.residual_norm >= tol {
        return Err(BetheError::NoConvergence { iterations: max_iter, residual: branch.residual_norm });
    }
    if min_separation(&branch.roots) < REAL_SNAP {
        return Err(BetheError::NoConvergence { iterations: max_iter, residual: branch.residual_norm });
    }
    Ok(branch)
}

fn solve_linear(jac: DMatrix<Complex64>, rhs: DVector<Complex64>) -> Option<DVector<Complex64>> {
    let lu = jac.lu();
    let u = lu.u();
    let diag: Vec<f64> = u.diagonal().iter().map(|d| d.norm()).collect();
    let hi = diag.iter().cloned().fold(0.0, f64::max);
    let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lo > 0.0) || hi / lo > CONDITION_LIMIT {
        return None;
    }
    lu.solve(&rhs)
}

fn newton_direction(x: &[Complex64], j: f64, f: &[Complex64]) -> Result<Option<DVector<Complex64>>> {
    let jac = bae_jacobian(x, j)?;
    let rhs = DVector::from_iterator(f.len(), f.iter().map(|v| -v));
    Ok(solve_linear(jac, rhs))
}

fn newton_step_plain(x: &[Complex64], j: f64) -> Result<Vec<Complex64>> {
    let f = bae_residual(x, j)?;
    match newton_direction(x, j, &f)? {
        Some(dx) => Ok(x.iter().zip(dx.iter()).map(|(a, d)| a + d).collect()),
        None => Err(BetheError::SingularJacobian),
    }
}

fn trial_norm(x: &[Complex64], j: f64) -> Option<f64> {
    bae_residual(x, j).ok().map(|f| max_abs(&f)).filter(|n| n.is_finite())
}

fn iterate(mut x: Vec<Complex64>, j: f64, tol: f64, max_iter: usize) -> Result<Vec<Complex64>> {
    let mut f = bae_residual(&x, j).map_err(|_| BetheError::NoConvergence { iterations: 0, residual: f64::INFINITY })?;
    let mut norm = max_abs(&f);
    let mut failures = 0;
    for _ in 0..max_iter {
        if norm < tol {
            return Ok(x);
        }
        let step = match newton_direction(&x, j, &f)? {
            Some(step) => step,
            None => {
                failures += 1;
                if failures >= MAX_DAMPING_FAILURES {
                    return Err(BetheError::SingularJacobian);
                }
                // Nudge off the singular configuration.
                for (i, r) in x.iter_mut().enumerate() {
                    *r += Complex64::new(1e-7, 1e-7) * (i as f64 + 1.0);
                }
                f = bae_residual(&x, j)?;
                norm = max_abs(&f);
                continue;
            }
        };

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<Complex64> = x.iter().zip(step.iter()).map(|(a, d)| a + d * scale).collect();
            if let Some(n) = trial_norm(&trial, j) {
                if n < norm {
                    accepted = Some(trial);
                    break;
                }
            }
            scale *= 0.5;
        }
        let next = match accepted {
            Some(trial) => {
                failures = 0;
                trial
            }
            None => {
                failures += 1;
                if failures >= MAX_DAMPING_FAILURES {
                    return Err(BetheError::SingularJacobian);
                }
                x.iter().zip(step.iter()).map(|(a, d)| a + d).collect()
            }
        };
        if next.iter().any(|r| r.norm() < ZERO_ROOT_EPS) {
            return Err(BetheError::DivergedToZeroRoot);
        }
        if next.iter().any(|r| !r.re.is_finite() || !r.im.is_finite()) {
            return Err(BetheError::NoConvergence { iterations: max_iter, residual: f64::INFINITY });
        }
        x = next;
        f = match bae_residual(&x, j) {
            Ok(f) => f,
            Err(_) => return Err(BetheError::NoConvergence { iterations: max_iter, residual: f64::INFINITY }),
        };
        norm = max_abs(&f);
    }
    if norm < tol {
        Ok(x)
    } else {
        Err(BetheError::NoConvergence { iterations: max_iter, residual: norm })
    }
}

/// Shift repeated entries by multiples of `ε(1 + i)` so the guess avoids the poles.
fn separate_duplicates(mut guess: Vec<Complex64>) -> Vec<Complex64> {
    for a in 1..guess.len() {
        let copies = guess[..a].iter().filter(|&&b| (b - guess[a]).norm() < 1e-12).count();
        if copies > 0 {
            guess[a] += Complex64::new(DUPLICATE_SHIFT, DUPLICATE_SHIFT) * copies as f64;
        }
    }
    guess
}

fn distinct_members(roots: &[Complex64]) -> Vec<Complex64> {
    let mut out: Vec<Complex64> = Vec::new();
    for &r in roots {
        if out.iter().all(|&o| (o - r).norm() >= 1e-12) {
            out.push(r);
        }
    }
    out
}

/// Trial guesses for the `target_m` sector built from the `target_m − 1` solutions.
///
/// Stage 0 appends each distinct member of a previous branch to that branch.
/// Stage `s ≥ 1` keeps `M − 1 − s` randomly chosen members and resamples
/// `s + 1` members with replacement, `samples` times per branch. Returns an
/// empty list once `s > M − 1`.
pub fn seed_trials<R: Rng>(
    prev_branches: &[BetheBranch],
    target_m: usize,
    stage: usize,
    samples: usize,
    rng: &mut R,
) -> Vec<Vec<Complex64>> {
    let mut guesses = Vec::new();
    if target_m == 0 {
        return guesses;
    }
    let prev_m = target_m - 1;
    for branch in prev_branches.iter().filter(|b| b.roots.len() == prev_m && prev_m > 0 && !b.is_singular()) {
        if stage == 0 {
            for member in distinct_members(&branch.roots) {
                let mut g = branch.roots.clone();
                g.push(member);
                guesses.push(separate_duplicates(g));
            }
        } else {
            if stage > prev_m {
                continue;
            }
            let keep = prev_m - stage;
            for _ in 0..samples {
                let mut g: Vec<Complex64> =
                    sample(rng, prev_m, keep).into_iter().map(|i| branch.roots[i]).collect();
                for _ in 0..=stage {
                    g.push(branch.roots[rng.random_range(0..prev_m)]);
                }
                guesses.push(separate_duplicates(g));
            }
        }
    }
    guesses
}

/// Guesses that append to each previous branch a member of a *different*
/// previous branch. Reaches solutions such as `{±3}` at `M = 2` that no
/// same-branch resampling can produce.
pub fn cross_trials(prev_branches: &[BetheBranch], target_m: usize) -> Vec<Vec<Complex64>> {
    let mut guesses = Vec::new();
    if target_m < 2 {
        return guesses;
    }
    for (a, branch) in prev_branches.iter().enumerate() {
        if branch.roots.len() + 1 != target_m || branch.is_singular() {
            continue;
        }
        for (b, other) in prev_branches.iter().enumerate() {
            if a == b || other.is_singular() {
                continue;
            }
            for member in distinct_members(&other.roots) {
                let mut g = branch.roots.clone();
                g.push(member);
                guesses.push(separate_duplicates(g));
            }
        }
    }
    guesses
}

/// Knobs for [`BetheSolver`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub max_restarts: usize,
    pub samples_per_stage: usize,
    pub allow_oracle_seed: bool,
    /// Disable the trial-solution continuation (recovery drills only).
    pub continuation: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 200,
            seed: 0,
            max_restarts: 500,
            samples_per_stage: 4,
            allow_oracle_seed: false,
            continuation: true,
        }
    }
}

/// Solver for whole sectors. Stateless apart from its options.
#[derive(Debug, Clone, Default)]
pub struct BetheSolver {
    options: SolverOptions,
}

impl BetheSolver {
    pub fn new(options: SolverOptions) -> Self {
        Self { options }
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    fn sector_rng(&self, spec: &SectorSpec) -> ChaCha8Rng {
        let key = self.options.seed
            ^ (u64::from(spec.n_atoms()) << 32)
            ^ u64::from(spec.excitations()).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ChaCha8Rng::seed_from_u64(key)
    }

    fn refine(&self, guess: &[Complex64], j: f64, provenance: Provenance) -> Option<BetheBranch> {
        newton_refine(guess, j, self.options.tol, self.options.max_iter)
            .ok()
            .map(|b| BetheBranch { provenance, ..b })
    }

    /// Solve sector `spec` given all branches of the sector with one excitation fewer.
    pub fn continue_sector(&self, spec: &SectorSpec, prev: &[BetheBranch]) -> Result<Vec<BetheBranch>> {
        let m = spec.excitations() as usize;
        let j = spec.total_spin();
        let expected = spec.branch_count();
        if m == 0 {
            return Ok(vec![BetheBranch::vacuum()]);
        }
        let mut found: Vec<BetheBranch> = Vec::with_capacity(expected);
        let push = |found: &mut Vec<BetheBranch>, b: BetheBranch| {
            if !found.iter().any(|f| f.same_solution(&b)) {
                found.push(b);
            }
        };

        if let Some(b) = singular_branch(spec) {
            found.push(b);
        }

        if m == 1 {
            let root = (2.0 * j).sqrt();
            for r in [root, -root] {
                let b = self.refine(&[Complex64::new(r, 0.0)], j, Provenance::Continuation)
                    .ok_or(BetheError::MissingBranches { found: found.len(), expected })?;
                push(&mut found, b);
            }
        }

        let mut rng = self.sector_rng(spec);
        if self.options.continuation && m > 1 {
            // The spectrum is symmetric: {−λ} solves the equations whenever {λ} does.
            let try_guesses = |found: &mut Vec<BetheBranch>, guesses: Vec<Vec<Complex64>>| {
                for g in guesses {
                    if found.len() == expected {
                        break;
                    }
                    if let Some(b) = self.refine(&g, j, Provenance::Continuation) {
                        let mirror: Vec<Complex64> = b.roots.iter().map(|z| -z).collect();
                        push(found, b);
                        if found.len() < expected {
                            if let Some(mb) = self.refine(&mirror, j, Provenance::Continuation) {
                                push(found, mb);
                            }
                        }
                    }
                }
            };
            try_guesses(&mut found, seed_trials(prev, m, 0, self.options.samples_per_stage, &mut rng));
            if found.len() < expected {
                try_guesses(&mut found, cross_trials(prev, m));
            }
            for stage in 1..m {
                if found.len() == expected {
                    break;
                }
                let guesses = seed_trials(prev, m, stage, self.options.samples_per_stage, &mut rng);
                try_guesses(&mut found, guesses);
            }
        }

        if found.len() < expected && !found.is_empty() {
            let normal = Normal::new(0.0, RESTART_SIGMA).expect("valid sigma");
            for r in 0..self.options.max_restarts {
                if found.len() == expected {
                    break;
                }
                let base = &found[r % found.len()];
                if base.is_singular() {
                    continue;
                }
                let g: Vec<Complex64> = base
                    .roots
                    .iter()
                    .map(|z| z + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
                    .collect();
                if let Some(b) = self.refine(&g, j, Provenance::RandomRestart) {
                    push(&mut found, b);
                }
            }
        }

        if found.len() < expected && self.options.allow_oracle_seed {
            for seed in ed_oracle::eigen_seed(spec).map_err(|_| BetheError::MissingBranches { found: found.len(), expected })? {
                if found.len() == expected {
                    break;
                }
                if found.iter().any(|b| (b.eigenenergy - seed.energy).abs() < 1e-6) {
                    continue;
                }
                if let Some(guess) = roots_from_energy(m, j, seed.energy) {
                    if let Some(b) = self.refine(&guess, j, Provenance::OracleSeeded) {
                        push(&mut found, b);
                    }
                }
            }
        }

        if found.len() < expected {
            return Err(BetheError::MissingBranches { found: found.len(), expected });
        }
        found.sort_by(|a, b| a.eigenenergy.total_cmp(&b.eigenenergy));
        Ok(found)
    }

    /// Solve sectors `0..=m_max` in increasing `M`; entry `M` holds that sector's branches.
    pub fn solve_ladder(&self, n_atoms: u32, m_max: u32) -> Result<Vec<Vec<BetheBranch>>> {
        let mut ladder: Vec<Vec<BetheBranch>> = Vec::with_capacity(m_max as usize + 1);
        for m in 0..=m_max {
            let spec = SectorSpec::new(n_atoms, m)?;
            let prev = ladder.last().map(Vec::as_slice).unwrap_or(&[]);
            let branches = self.continue_sector(&spec, prev)?;
            ladder.push(branches);
        }
        Ok(ladder)
    }

    /// Solve one sector, walking the continuation up from `M = 1`.
    pub fn solve_sector(&self, spec: &SectorSpec) -> Result<Vec<BetheBranch>> {
        let ladder = self.solve_ladder(spec.n_atoms(), spec.excitations())?;
        Ok(ladder.into_iter().last().expect("ladder holds at least M = 0"))
    }
}

/// Spin of the reduced problem left after `2J + 1` rapidities collapse onto `λ = 0`.
///
/// Writing `P(λ) = λ^{2J+1} Q(λ)` in the root-polynomial equation leaves the same
/// equation for `Q` with `J → −(J + 1)`. Its Bethe roots are the nonzero ones.
pub fn reduced_spin(j: f64) -> f64 {
    -(j + 1.0)
}

/// Residual of a branch: plain Bethe equations, or the reduced ones for the
/// nonzero roots of a singular branch.
pub fn branch_residual(roots: &[Complex64], j: f64) -> Result<f64> {
    let zero = Complex64::new(0.0, 0.0);
    let zeros = roots.iter().filter(|r| **r == zero).count();
    if zeros == 0 {
        return Ok(max_abs(&bae_residual(roots, j)?));
    }
    if (zeros as f64 - (2.0 * j + 1.0)).abs() > 0.5 {
        return Err(BetheError::ZeroRoot { index: roots.iter().position(|r| *r == zero).unwrap_or(0) });
    }
    let rest: Vec<Complex64> = roots.iter().copied().filter(|r| *r != zero).collect();
    Ok(max_abs(&bae_residual(&rest, reduced_spin(j))?))
}

/// The branch with `2J + 1` rapidities on the pole `λ = 0`, when the sector has one.
///
/// The reduced problem has a real energy only at `E = 0` with an even number of
/// remaining roots, so this needs integer `J` (even `N`) and `M − 2J − 1` even.
/// The remaining roots solve the reduced Bethe equations at `E = 0`.
pub fn singular_branch(spec: &SectorSpec) -> Option<BetheBranch> {
    let n = spec.n_atoms();
    let m = spec.excitations();
    if n % 2 != 0 || m < n + 1 || (m - n - 1) % 2 != 0 {
        return None;
    }
    let jr = reduced_spin(spec.total_spin());
    let reduced = (m - n - 1) as usize;
    let rest = if reduced == 0 {
        Vec::new()
    } else {
        let guess = roots_from_energy(reduced, jr, 0.0)?;
        newton_refine(&guess, jr, 1e-12, 200).ok()?.roots
    };
    let mut roots = vec![Complex64::new(0.0, 0.0); n as usize + 1];
    roots.extend(rest);
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let residual_norm = branch_residual(&roots, spec.total_spin()).ok()?;
    Some(BetheBranch { roots, eigenenergy: 0.0, residual_norm, provenance: Provenance::SingularLimit })
}

/// Convenience wrapper with default options.
pub fn solve_sector(spec: &SectorSpec) -> Result<Vec<BetheBranch>> {
    BetheSolver::default().solve_sector(spec)
}

/// Roots of the polynomial `P(λ) = Π (λ − λ_j)` whose zeros solve the Bethe
/// equations for eigenenergy `energy`.
///
/// `P` satisfies `λP'' + (λ² − 2J)P' − (Mλ − E)P = 0`, which fixes its
/// coefficients through a three-term recurrence started from the leading one.
/// The zeros come from the companion matrix and serve as Newton seeds.
pub fn roots_from_energy(m: usize, j: f64, energy: f64) -> Option<Vec<Complex64>> {
    if m == 0 {
        return Some(Vec::new());
    }
    let two_j = 2.0 * j;
    let mut c = vec![0.0; m + 2];
    c[m] = 1.0;
    for k in (1..=m).rev() {
        // (k+1)(k − 2J) c_{k+1} + E c_k + (k − 1 − M) c_{k−1} = 0
        let kf = k as f64;
        let num = (kf + 1.0) * (kf - two_j) * c[k + 1] + energy * c[k];
        c[k - 1] = num / (m as f64 + 1.0 - kf);
    }
    // Exactly vanishing low coefficients are roots at λ = 0; peel them off so the
    // companion matrix is never nilpotent.
    let zeros = c.iter().take(m).take_while(|x| **x == 0.0).count();
    let deg = m - zeros;
    let mut roots = vec![Complex64::new(0.0, 0.0); zeros];
    if deg > 0 {
        let mut companion = DMatrix::<f64>::zeros(deg, deg);
        for row in 1..deg {
            companion[(row, row - 1)] = 1.0;
        }
        for row in 0..deg {
            companion[(row, deg - 1)] = -c[row + zeros];
        }
        let eig = Schur::try_new(companion, f64::EPSILON, 10_000)?.complex_eigenvalues();
        roots.extend(eig.iter().map(|z| Complex64::new(z.re, z.im)));
    }
    if roots.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    Some(separate_duplicates(roots))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn residual_vanishes_at_single_root() {
        let f = bae_residual(&[c(10f64.sqrt(), 0.0)], 5.0).unwrap();
        assert!(f[0].norm() < 1e-15);
    }

    #[test]
    fn residual_of_symmetric_pair() {
        let f = bae_residual(&[c(3.0, 0.0), c(-3.0, 0.0)], 5.0).unwrap();
        assert!(f.iter().all(|v| v.norm() < 1e-15));
    }

    #[test]
    fn residual_direct_value() {
        let f = bae_residual(&[c(1.0, 0.0)], 5.0).unwrap();
        assert!((f[0] - c(4.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn residual_rejects_poles() {
        assert_eq!(bae_residual(&[c(0.0, 0.0)], 5.0), Err(BetheError::ZeroRoot { index: 0 }));
        assert_eq!(
            bae_residual(&[c(1.0, 0.0), c(1.0, 0.0)], 5.0),
            Err(BetheError::CoincidentRoots { first: 0, second: 1 })
        );
    }

    #[test]
    fn jacobian_single_root() {
        let jac = bae_jacobian(&[c(10f64.sqrt(), 0.0)], 5.0).unwrap();
        assert!((jac[(0, 0)] - c(-1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let roots = [c(3.0, 0.0), c(-3.0, 0.0)];
        let jac = bae_jacobian(&roots, 5.0).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut plus = roots;
            let mut minus = roots;
            plus[k] += h;
            minus[k] -= h;
            let fp = bae_residual(&plus, 5.0).unwrap();
            let fm = bae_residual(&minus, 5.0).unwrap();
            for a in 0..2 {
                let fd = (fp[a] - fm[a]) / (2.0 * h);
                let rel = (fd - jac[(a, k)]).norm() / jac[(a, k)].norm();
                assert!(rel < 1e-6, "entry ({a},{k}): fd {fd} vs {}", jac[(a, k)]);
            }
        }
    }

    #[test]
    fn jacobian_off_diagonal_symmetric() {
        let jac = bae_jacobian(&[c(0.0, 1.0), c(0.0, -1.0)], 5.0).unwrap();
        assert!((jac[(0, 1)] - jac[(1, 0)]).norm() < 1e-15);
    }

    #[test]
    fn newton_single_root() {
        let b = newton_refine(&[c(3.1, 0.0)], 5.0, 1e-12, 200).unwrap();
        assert!((b.roots[0] - c(10f64.sqrt(), 0.0)).norm() < 1e-12);
        assert!(b.residual_norm < 1e-12);
    }

    #[test]
    fn newton_recovers_complex_pair() {
        let b = newton_refine(&[c(3.08, 0.7), c(3.08, -0.7)], 5.0, 1e-12, 200).unwrap();
        assert!(b.residual_norm < 1e-12);
        assert!((b.roots[0].re - 3.08).abs() < 0.01);
        assert!((b.roots[1].im - 0.7).abs() < 0.01);
        assert_eq!(b.roots[0], b.roots[1].conj());
        assert!((b.eigenenergy + 6.16).abs() < 0.01);
    }

    #[test]
    fn newton_near_pole_never_returns_spurious_root() {
        // The iteration roughly doubles λ near the pole, so it either reaches
        // ±√10 or reports a failure; it never settles near zero.
        match newton_refine(&[c(0.001, 0.0)], 5.0, 1e-12, 200) {
            Ok(b) => assert!((b.roots[0].norm() - 10f64.sqrt()).abs() < 1e-10),
            Err(e) => assert!(matches!(e, BetheError::DivergedToZeroRoot | BetheError::NoConvergence { .. })),
        }
        assert_eq!(newton_refine(&[c(1e-11, 0.0)], 5.0, 1e-12, 200), Err(BetheError::DivergedToZeroRoot));
    }

    #[test]
    fn canonicalize_symmetrizes_pairs() {
        let out = canonicalize(&[c(3.08, 0.7), c(3.08, -0.70000001)]).unwrap();
        assert_eq!(out[0], out[1].conj());
        assert!((out[1].im - 0.700000005).abs() < 1e-15);
    }

    #[test]
    fn canonicalize_keeps_sorted_reals() {
        let roots = [c(-3.16, 0.0), c(3.16, 0.0)];
        assert_eq!(canonicalize(&roots).unwrap(), roots.to_vec());
    }

    #[test]
    fn canonicalize_rejects_lonely_complex_root() {
        assert!(matches!(canonicalize(&[c(1.0, 0.5)]), Err(BetheError::UnpairedComplexRoot { .. })));
    }

    #[test]
    fn stage_zero_appends_each_member() {
        let prev = BetheBranch {
            roots: vec![c(1.0, 0.0), c(2.0, 0.0)],
            eigenenergy: -3.0,
            residual_norm: 0.0,
            provenance: Provenance::Continuation,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let guesses = seed_trials(&[prev], 3, 0, 4, &mut rng);
        let eps = c(1e-3, 1e-3);
        assert_eq!(guesses, vec![
            vec![c(1.0, 0.0), c(2.0, 0.0), c(1.0, 0.0) + eps],
            vec![c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0) + eps],
        ]);
    }

    #[test]
    fn empty_previous_set_gives_no_guesses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(seed_trials(&[], 3, 0, 4, &mut rng).is_empty());
    }

    #[test]
    fn staged_guesses_resample_members() {
        let roots: Vec<Complex64> = (1..=8).map(|k| c(k as f64, 0.0)).collect();
        let prev = BetheBranch { roots: roots.clone(), eigenenergy: 0.0, residual_norm: 0.0, provenance: Provenance::Continuation };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let guesses = seed_trials(&[prev.clone()], 9, 1, 5, &mut rng);
        assert_eq!(guesses.len(), 5);
        for g in &guesses {
            assert_eq!(g.len(), 9);
            // Every entry is a member of the previous branch up to the duplicate shift.
            assert!(g.iter().all(|z| roots.iter().any(|r| (r - z).norm() < 0.01)));
        }
        assert!(seed_trials(&[prev], 9, 9, 5, &mut rng).is_empty());
    }

    #[test]
    fn sector_m1_is_analytic() {
        let spec = SectorSpec::new(1, 1).unwrap();
        let branches = solve_sector(&spec).unwrap();
        assert_eq!(branches.len(), 2);
        assert!((branches[0].roots[0].re - 1.0).abs() < 1e-14);
        assert!((branches[1].roots[0].re + 1.0).abs() < 1e-14);
    }

    #[test]
    fn spec_validation() {
        assert!(SectorSpec::new(0, 1).is_err());
        assert!(SectorSpec::new(10, 65).is_err());
        assert!(SectorSpec::new(10, 2).unwrap().with_detuning(0.1).is_err());
        assert_eq!(SectorSpec::new(10, 4).unwrap().branch_count(), 5);
        assert_eq!(SectorSpec::new(3, 9).unwrap().branch_count(), 4);
    }

    #[test]
    fn singular_branches_at_even_n() {
        assert!(singular_branch(&SectorSpec::new(10, 11).unwrap()).unwrap().is_singular());
        let b = singular_branch(&SectorSpec::new(10, 15).unwrap()).unwrap();
        assert_eq!(b.roots.iter().filter(|r| r.norm() == 0.0).count(), 11);
        assert!(b.residual_norm < 1e-10);
        assert!(singular_branch(&SectorSpec::new(10, 10).unwrap()).is_none());
        assert!(singular_branch(&SectorSpec::new(10, 12).unwrap()).is_none());
        assert!(singular_branch(&SectorSpec::new(9, 10).unwrap()).is_none());
        // The E = 0 state of (N=2, M=3) has P(λ) = λ³: the recurrence collapses every root.
        let roots = roots_from_energy(3, 1.0, 0.0).unwrap();
        assert!(roots.iter().all(|z| z.norm() < 1e-2));
        let reduced = roots_from_energy(2, reduced_spin(5.0), 0.0).unwrap();
        assert!(reduced.iter().all(|z| z.re.abs() < 1e-12 && z.im.abs() > 1.0));
    }

    #[test]
    fn vacuum_sector() {
        let branches = BetheSolver::default().continue_sector(&SectorSpec::new(10, 0).unwrap(), &[]).unwrap();
        assert_eq!(branches, vec![BetheBranch::vacuum()]);
    }

    #[test]
    fn energy_polynomial_reproduces_pair() {
        // E = 0 in (N=10, M=2) is the {±3} branch.
        let roots = roots_from_energy(2, 5.0, 0.0).unwrap();
        let b = newton_refine(&roots, 5.0, 1e-12, 200).unwrap();
        assert!((b.roots[0].re + 3.0).abs() < 1e-12 && (b.roots[1].re - 3.0).abs() < 1e-12);
    }
}
