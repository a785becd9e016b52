//! Command-line front end. Every data file is written next to a
//! `<file>.manifest.json` describing the run that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::battery::{self, BatteryError, EnergyTable, PhotonDistribution, Truncation, Window};
use crate::bethe::{self, BetheBranch, BetheError, BetheSolver, Provenance, SectorSpec, SolverOptions};
use crate::ed_oracle::SectorOracle;
use crate::lindblad::{self, DensityMatrix, LindbladError, OpenSystemConfig};
use crate::spectral::{SectorSpectrum, SpectralError};

/// Environment variable naming the spectrum cache directory.
pub const CACHE_ENV: &str = "TCQB_CACHE_DIR";
/// Cached branches are only reused by the same solver version.
pub const SOLVER_VERSION: &str = env!("CARGO_PKG_VERSION");

const CACHE_RESIDUAL: f64 = 1e-9;
const VERIFY_RESIDUAL: f64 = 1e-10;
const VERIFY_ENERGY: f64 = 1e-9;
const VERIFY_CURVE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("sector M = {m}: {source}")]
    Sector { m: u32, source: BetheError },
    #[error(transparent)]
    Bethe(#[from] BetheError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Battery(#[from] BatteryError),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Lindblad(#[from] LindbladError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Json { .. } => 1,
            CliError::Sector { .. } | CliError::Bethe(_) | CliError::Spectral(_) => 2,
            CliError::Battery(BatteryError::Bethe(_) | BatteryError::Spectral(_)) => 2,
            CliError::Battery(_) => 3,
            CliError::Verify(_) => 4,
            CliError::Lindblad(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "tcqb", version, about = "Cavity-charged atomic battery: Bethe roots, stored energy, open-system runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Bethe equations for sectors M = 1..m-max and write one JSON file per sector.
    Solve(SolveArgs),
    /// Eigenenergies, F(M, t) cosine series and first-maximum times.
    Spectrum(SpectrumArgs),
    /// Stored energy and power, CSV `t,E,P`.
    Energy(EnergyArgs),
    /// Like `energy`, and report the peak power.
    Power(EnergyArgs),
    /// Optimal distribution for a given mean photon number.
    Optimal(OptimalArgs),
    /// Check the equal-probability, equal-expectation split of a distribution.
    SplitCheck(SplitArgs),
    /// Grid scan of the ratio or derivative inequality between number-state curves.
    Inequality(InequalityArgs),
    /// Estimate an unknown photon number from a measured stored energy.
    Estimate(EstimateArgs),
    /// Open-system evolution, CSV `t,E,P,trace,min_eig,m_expect`.
    Lindblad(LindbladArgs),
    /// Compare Bethe results with exact diagonalization.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveArgs {
    #[arg(long)]
    pub n_atoms: Option<u32>,
    #[arg(long)]
    pub m_max: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_oracle_seed: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of these options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub n_atoms: Option<u32>,
    #[arg(long)]
    pub m_max: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_oracle_seed: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyArgs {
    /// `fock:M`, `coherent:ALPHA2[:TRUNC]` or `file:PATH`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub n_atoms: Option<u32>,
    /// End of the time grid, units of 1/g (default 3).
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Grid points including both ends (default 1001).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_oracle_seed: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimalArgs {
    #[arg(long)]
    pub mean: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitArgs {
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub n_atoms: Option<u32>,
    /// Grid spacing for the ΔF scan over (0, t_max(floor)] (default 1e-3).
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_oracle_seed: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowArg {
    Larger,
    Joint,
}

impl From<WindowArg> for Window {
    fn from(w: WindowArg) -> Self {
        match w {
            WindowArg::Larger => Window::Larger,
            WindowArg::Joint => Window::Joint,
        }
    }
}

/// `F(M)/F(m) ≤ M/m`, or the ordering of `d/dt[F(·)/F(m0)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    #[value(alias = "28")]
    #[serde(alias = "28")]
    Ratio,
    #[value(alias = "29")]
    #[serde(alias = "29")]
    Derivative,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InequalityArgs {
    #[arg(long, value_enum)]
    pub which: Option<Which>,
    #[arg(long)]
    pub n_atoms: Option<u32>,
    #[arg(long)]
    pub max_m: Option<u32>,
    /// Grid spacing (default 1e-3).
    #[arg(long)]
    pub step: Option<f64>,
    /// Scan up to t_max of the largest photon number, or of every one involved (default joint).
    #[arg(long, value_enum)]
    pub window: Option<WindowArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_oracle_seed: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateArgs {
    #[arg(long)]
    pub n_atoms: Option<u32>,
    /// Known reference photon number m.
    #[arg(long)]
    pub reference_m: Option<u32>,
    /// Measurement time.
    #[arg(long)]
    pub t: Option<f64>,
    /// Stored energy measured for the unknown state at time t.
    #[arg(long)]
    pub energy: Option<f64>,
    /// Stored energy of the reference at time t; computed from F(m, t) when absent.
    #[arg(long)]
    pub reference_energy: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_oracle_seed: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LindbladArgs {
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub n_atoms: Option<u32>,
    /// Cavity decay rate.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Collective dephasing rate.
    #[arg(long)]
    pub gamma_phi: Option<f64>,
    /// Coupling; rates and times are in its units (default 1).
    #[arg(long)]
    pub g: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Default 5.
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Photon cutoff (default initial photons + 10).
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Integrator steps per output row (default 10).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyArgs {
    #[arg(long)]
    pub n_atoms: Option<u32>,
    #[arg(long)]
    pub m_max: Option<u32>,
    /// Check branch files from this directory instead of solving.
    #[arg(long)]
    pub branches: Option<PathBuf>,
    /// Points on the [0, 3] comparison grid (default 2000).
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_oracle_seed: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Overlay the flags that were given onto the config file, flags winning.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let mut merged = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let value: Value =
                serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
            if !value.is_object() {
                return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
            }
            value
        }
        None => json!({}),
    };
    let given = serde_json::to_value(flags).expect("argument structs serialize");
    for (key, value) in given.as_object().expect("argument structs are objects") {
        if value.is_null() || *value == Value::Bool(false) {
            continue;
        }
        merged[key] = value.clone();
    }
    let path = config.map(Path::to_path_buf).unwrap_or_default();
    serde_json::from_value(merged).map_err(|source| CliError::Json { path, source })
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Usage(format!("--{flag} is required (as a flag or in --config)")))
}

/// Written next to each data file as `<file>.manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

struct Run {
    command: &'static str,
    config: Value,
    seed: Option<u64>,
    start: Instant,
    warnings: Vec<String>,
}

impl Run {
    fn new<T: Serialize>(command: &'static str, args: &T, seed: Option<u64>) -> Self {
        Self {
            command,
            config: serde_json::to_value(args).expect("argument structs serialize"),
            seed,
            start: Instant::now(),
            warnings: Vec::new(),
        }
    }

    fn manifest(&self, outputs: Vec<String>) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            version: SOLVER_VERSION.to_string(),
            wall_time_s: self.start.elapsed().as_secs_f64(),
            warnings: self.warnings.clone(),
            outputs,
        }
    }

    /// Write `data` to `out` with its manifest, or print it when there is no `out`.
    fn emit(&self, out: Option<&Path>, data: &str) -> Result<()> {
        match out {
            Some(path) => {
                write_file(path, data)?;
                let manifest_path = manifest_path(path);
                let manifest = self.manifest(vec![path.display().to_string()]);
                write_file(&manifest_path, &to_json(&manifest))
            }
            None => {
                print!("{data}");
                Ok(())
            }
        }
    }
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    data.with_file_name(name)
}

fn write_file(path: &Path, data: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, data).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

/// On-disk form of one solved sector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFile {
    pub n_atoms: u32,
    pub m: u32,
    pub seed: u64,
    pub branches: Vec<BranchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    /// `[re, im]` pairs.
    pub roots: Vec<[f64; 2]>,
    pub energy: f64,
    pub residual: f64,
    pub provenance: Provenance,
}

impl BranchFile {
    pub fn new(n_atoms: u32, m: u32, seed: u64, branches: &[BetheBranch]) -> Self {
        let branches = branches
            .iter()
            .map(|b| BranchRecord {
                roots: b.roots.iter().map(|z| [z.re, z.im]).collect(),
                // Adding 0.0 turns −0.0 into 0.0.
                energy: b.eigenenergy + 0.0,
                residual: b.residual_norm,
                provenance: b.provenance,
            })
            .collect();
        Self { n_atoms, m, seed, branches }
    }

    pub fn to_branches(&self) -> Vec<BetheBranch> {
        self.branches
            .iter()
            .map(|r| BetheBranch {
                roots: r.roots.iter().map(|&[re, im]| Complex64::new(re, im)).collect(),
                eigenenergy: r.energy,
                residual_norm: r.residual,
                provenance: r.provenance,
            })
            .collect()
    }

    pub fn file_name(n_atoms: u32, m: u32) -> String {
        format!("sector_N{n_atoms}_M{m}.json")
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn cache_path(dir: &Path, n_atoms: u32, m: u32) -> PathBuf {
    dir.join(format!("v{SOLVER_VERSION}")).join(BranchFile::file_name(n_atoms, m))
}

/// A cached sector is used only if it is complete and every branch still solves.
fn load_cached(dir: &Path, spec: &SectorSpec) -> Option<Vec<BetheBranch>> {
    let file: BranchFile = read_json(&cache_path(dir, spec.n_atoms(), spec.excitations())).ok()?;
    let branches = file.to_branches();
    let complete = file.n_atoms == spec.n_atoms()
        && file.m == spec.excitations()
        && branches.len() == spec.branch_count()
        && branches.iter().all(|b| {
            b.roots.len() == spec.excitations() as usize
                && bethe::branch_residual(&b.roots, spec.total_spin()).is_ok_and(|r| r <= CACHE_RESIDUAL)
        });
    complete.then_some(branches)
}

/// Branches for `M = 0..=m_max`, from the cache where possible.
fn ladder(n_atoms: u32, m_max: u32, options: &SolverOptions, warnings: &mut Vec<String>) -> Result<Vec<Vec<BetheBranch>>> {
    if n_atoms > bethe::MAX_ATOMS || m_max > bethe::MAX_EXCITATIONS {
        return Err(CliError::Usage(format!(
            "n-atoms ≤ {} and m-max ≤ {} required",
            bethe::MAX_ATOMS,
            bethe::MAX_EXCITATIONS
        )));
    }
    let solver = BetheSolver::new(options.clone());
    let cache = cache_dir();
    let mut out = vec![vec![BetheBranch::vacuum()]];
    for m in 1..=m_max {
        let spec = SectorSpec::new(n_atoms, m)?;
        let cached = cache.as_deref().and_then(|dir| load_cached(dir, &spec));
        let branches = match cached {
            Some(b) => b,
            None => {
                let b = solver.continue_sector(&spec, &out[m as usize - 1]).map_err(|source| CliError::Sector { m, source })?;
                if let Some(dir) = cache.as_deref() {
                    // A cache that cannot be written is only a slowdown.
                    if write_file(&cache_path(dir, n_atoms, m), &to_json(&BranchFile::new(n_atoms, m, options.seed, &b))).is_err() {
                        warnings.push(format!("could not write cache entry for M = {m}"));
                    }
                }
                b
            }
        };
        let seeded = branches.iter().filter(|b| b.provenance == Provenance::OracleSeeded).count();
        if seeded > 0 {
            warnings.push(format!("M = {m}: {seeded} branch(es) oracle_seeded"));
        }
        out.push(branches);
    }
    Ok(out)
}

fn energy_table(n_atoms: u32, m_max: u32, options: &SolverOptions, warnings: &mut Vec<String>) -> Result<EnergyTable> {
    let branches = ladder(n_atoms, m_max, options, warnings)?;
    let mut series = Vec::with_capacity(branches.len());
    for (m, b) in branches.iter().enumerate() {
        let spec = SectorSpec::new(n_atoms, m as u32)?;
        series.push(SectorSpectrum::new(&spec, b)?.number_state_energy()?);
    }
    Ok(EnergyTable::from_series(n_atoms, series))
}

fn solver_options(seed: Option<u64>, allow_oracle_seed: bool) -> SolverOptions {
    SolverOptions { seed: seed.unwrap_or(0), allow_oracle_seed, ..SolverOptions::default() }
}

/// Parsed `--init`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fock(u32),
    Coherent { alpha_sq: f64, truncation: Option<u32> },
    File(PathBuf),
}

impl InitialState {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || CliError::Usage(format!("cannot parse --init {s:?}; use fock:M, coherent:ALPHA2[:TRUNC] or file:PATH"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "fock" => rest.parse().map(InitialState::Fock).map_err(|_| bad()),
            "coherent" => {
                let mut parts = rest.splitn(2, ':');
                let alpha_sq = parts.next().and_then(|a| a.parse().ok()).ok_or_else(bad)?;
                let truncation = match parts.next() {
                    Some(t) => Some(t.parse().map_err(|_| bad())?),
                    None => None,
                };
                Ok(InitialState::Coherent { alpha_sq, truncation })
            }
            "file" if !rest.is_empty() => Ok(InitialState::File(PathBuf::from(rest))),
            _ => Err(bad()),
        }
    }

    pub fn distribution(&self) -> Result<PhotonDistribution> {
        Ok(match self {
            InitialState::Fock(m) => PhotonDistribution::fock(*m),
            InitialState::Coherent { alpha_sq, truncation } => {
                let cut = truncation.map(Truncation::At).unwrap_or_default();
                PhotonDistribution::coherent(*alpha_sq, cut)?
            }
            InitialState::File(path) => read_json(path)?,
        })
    }
}

fn closed_csv(dist: &PhotonDistribution, table: &EnergyTable, grid: &[f64]) -> Result<(String, Vec<(f64, f64, f64)>)> {
    let mut csv = String::from("t,E,P\n");
    let mut rows = Vec::with_capacity(grid.len());
    for &t in grid {
        let e = battery::stored_energy(dist, table, t)?;
        let p = if t > 0.0 { battery::charging_power(dist, table, t)? } else { 0.0 };
        csv.push_str(&format!("{t:.11e},{e:.11e},{p:.11e}\n"));
        rows.push((t, e, p));
    }
    Ok((csv, rows))
}

fn cmd_solve(args: SolveArgs) -> Result<()> {
    let n_atoms = required(args.n_atoms, "n-atoms")?;
    let m_max = required(args.m_max, "m-max")?;
    let out = required(args.out.clone(), "out")?;
    let options = solver_options(args.seed, args.allow_oracle_seed);
    let mut run = Run::new("solve", &args, Some(options.seed));
    let ladder = ladder(n_atoms, m_max, &options, &mut run.warnings)?;
    let mut outputs = Vec::new();
    for (m, branches) in ladder.iter().enumerate().skip(1) {
        let file = BranchFile::new(n_atoms, m as u32, options.seed, branches);
        let path = out.join(BranchFile::file_name(n_atoms, m as u32));
        write_file(&path, &to_json(&file))?;
        outputs.push(path.display().to_string());
        let worst = branches.iter().map(|b| b.residual_norm).fold(0.0, f64::max);
        println!("M = {m}: {} branches, max residual {worst:.3e}", branches.len());
    }
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_file(&out.join("manifest.json"), &to_json(&run.manifest(outputs)))
}

#[derive(Debug, Serialize)]
struct SpectrumSector {
    m: u32,
    energies: Vec<f64>,
    t_max: Option<f64>,
    offset: f64,
    terms: Vec<[f64; 2]>,
}

fn cmd_spectrum(args: SpectrumArgs) -> Result<()> {
    let n_atoms = required(args.n_atoms, "n-atoms")?;
    let m_max = required(args.m_max, "m-max")?;
    let options = solver_options(args.seed, args.allow_oracle_seed);
    let mut run = Run::new("spectrum", &args, Some(options.seed));
    let ladder = ladder(n_atoms, m_max, &options, &mut run.warnings)?;
    let mut sectors = Vec::new();
    for (m, branches) in ladder.iter().enumerate() {
        let spec = SectorSpec::new(n_atoms, m as u32)?;
        let spectrum = SectorSpectrum::new(&spec, branches)?;
        let series = spectrum.number_state_energy()?;
        let t_max = if series.is_zero() { None } else { series.first_max_time().ok() };
        sectors.push(SpectrumSector {
            m: m as u32,
            energies: spectrum.energies.clone(),
            t_max,
            offset: series.offset,
            terms: series.terms.iter().map(|t| [t.amplitude, t.omega]).collect(),
        });
    }
    run.emit(args.out.as_deref(), &to_json(&json!({ "n_atoms": n_atoms, "sectors": sectors })))
}

fn prepare_energy(args: &EnergyArgs, run: &mut Run) -> Result<(PhotonDistribution, EnergyTable, Vec<f64>)> {
    let init = InitialState::parse(&required(args.init.clone(), "init")?)?;
    let n_atoms = required(args.n_atoms, "n-atoms")?;
    let dist = init.distribution()?;
    if dist.truncation() > bethe::MAX_EXCITATIONS {
        return Err(BatteryError::SupportExceedsTable { needed: dist.truncation(), available: bethe::MAX_EXCITATIONS }.into());
    }
    let options = solver_options(args.seed, args.allow_oracle_seed);
    let table = energy_table(n_atoms, dist.truncation(), &options, &mut run.warnings)?;
    let t_end = args.t_end.unwrap_or(3.0);
    let steps = args.steps.unwrap_or(1001);
    if !(t_end > 0.0) || steps < 2 {
        return Err(CliError::Usage("need t-end > 0 and steps ≥ 2".into()));
    }
    Ok((dist, table, battery::linear_grid(t_end, steps)))
}

fn cmd_energy(args: EnergyArgs) -> Result<()> {
    let mut run = Run::new("energy", &args, Some(args.seed.unwrap_or(0)));
    let (dist, table, grid) = prepare_energy(&args, &mut run)?;
    let (csv, _) = closed_csv(&dist, &table, &grid)?;
    run.emit(args.out.as_deref(), &csv)
}

fn cmd_power(args: EnergyArgs) -> Result<()> {
    let mut run = Run::new("power", &args, Some(args.seed.unwrap_or(0)));
    let (dist, table, grid) = prepare_energy(&args, &mut run)?;
    let (csv, rows) = closed_csv(&dist, &table, &grid)?;
    let best_p = rows.iter().skip(1).copied().fold((0.0, 0.0, f64::NEG_INFINITY), |a, r| if r.2 > a.2 { r } else { a });
    let best_e = rows.iter().copied().fold((0.0, f64::NEG_INFINITY, 0.0), |a, r| if r.1 > a.1 { r } else { a });
    let summary = json!({
        "peak_power": best_p.2,
        "t_peak_power": best_p.0,
        "peak_energy": best_e.1,
        "t_peak_energy": best_e.0,
    });
    match args.out.as_deref() {
        Some(_) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            run.emit(args.out.as_deref(), &csv)
        }
        None => run.emit(None, &to_json(&summary)),
    }
}

fn cmd_optimal(args: OptimalArgs) -> Result<()> {
    let mean = required(args.mean, "mean")?;
    let run = Run::new("optimal", &args, None);
    let dist = PhotonDistribution::optimal(mean)?;
    run.emit(args.out.as_deref(), &to_json(&dist))
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let init = InitialState::parse(&required(args.init.clone(), "init")?)?;
    let n_atoms = required(args.n_atoms, "n-atoms")?;
    let step = args.step.unwrap_or(1e-3);
    let options = solver_options(args.seed, args.allow_oracle_seed);
    let mut run = Run::new("split-check", &args, Some(options.seed));
    let dist = init.distribution()?;
    let tableau = battery::split(&dist)?;
    let top = dist.truncation().max(tableau.floor + 1).min(bethe::MAX_EXCITATIONS);
    let table = energy_table(n_atoms, top, &options, &mut run.warnings)?;
    let horizon = table.t_max(tableau.floor.max(1))?.unwrap_or(0.0);
    let mut min_delta = f64::INFINITY;
    let mut worst_gap: f64 = 0.0;
    let mut checked = 0;
    for t in battery::step_grid(horizon, step) {
        let d = battery::delta_f_both(&dist, &table, t)?;
        min_delta = min_delta.min(d.direct);
        worst_gap = worst_gap.max((d.direct - d.split).abs());
        checked += 1;
    }
    let report = json!({
        "mean": dist.mean(),
        "floor": tableau.floor,
        "frac": tableau.frac,
        "d": tableau.d,
        "weights": tableau.parts.iter().map(|p| json!({ "j": p.j, "weight": p.weight })).collect::<Vec<_>>(),
        "partition_error": tableau.partition_error(&dist),
        "group_probability_error": tableau.group_probability_error(),
        "group_expectation_error": tableau.group_expectation_error(),
        "t_max_floor": horizon,
        "checked": checked,
        "max_route_disagreement": worst_gap,
        "min_delta_f": if checked > 0 { Some(min_delta) } else { None },
    });
    run.emit(args.out.as_deref(), &to_json(&report))
}

fn cmd_inequality(args: InequalityArgs) -> Result<()> {
    let which = required(args.which, "which")?;
    let n_atoms = args.n_atoms.unwrap_or(10);
    let max_m = args.max_m.unwrap_or(14);
    let step = args.step.unwrap_or(1e-3);
    let window = args.window.unwrap_or(WindowArg::Joint);
    let options = solver_options(args.seed, args.allow_oracle_seed);
    let mut run = Run::new("inequality", &args, Some(options.seed));
    let table = energy_table(n_atoms, max_m, &options, &mut run.warnings)?;
    let horizon = (1..=max_m).filter_map(|m| table.t_max(m).ok().flatten()).fold(0.0, f64::max);
    let grid = battery::step_grid(horizon, step);
    let mut tuples = Vec::new();
    let (mut violations, mut checked) = (0usize, 0usize);
    for big in 1..=max_m {
        for mid in 1..=big {
            let bases: Vec<u32> = if which == Which::Ratio { vec![0] } else { (1..=mid).collect() };
            for base in bases {
                let report = if which == Which::Ratio {
                    battery::check_ratio_inequality(&table, big, mid, &grid, window.into())?
                } else {
                    battery::check_derivative_inequality(&table, big, mid, base, &grid, window.into())?
                };
                violations += report.violations;
                checked += report.checked;
                if !report.holds() {
                    let ms: Vec<u32> = if which == Which::Ratio { vec![big, mid] } else { vec![big, mid, base] };
                    eprintln!("{ms:?}: {} violations, max excess {:.3e} at t = {:?}", report.violations, report.max_excess, report.at_t);
                    tuples.push(json!({ "m": ms, "report": report }));
                }
            }
        }
    }
    println!("{violations} violations");
    let report = json!({
        "which": which,
        "n_atoms": n_atoms,
        "max_m": max_m,
        "window": window,
        "checked": checked,
        "violations": violations,
        "failing": tuples,
    });
    match args.out.as_deref() {
        Some(path) => run.emit(Some(path), &to_json(&report)),
        None => Ok(()),
    }
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let reference_m = required(args.reference_m, "reference-m")?;
    let t = required(args.t, "t")?;
    let energy = required(args.energy, "energy")?;
    let options = solver_options(args.seed, args.allow_oracle_seed);
    let mut run = Run::new("estimate", &args, Some(options.seed));
    let reference = match args.reference_energy {
        Some(e) => e,
        None => {
            let n_atoms = required(args.n_atoms, "n-atoms")?;
            energy_table(n_atoms, reference_m, &options, &mut run.warnings)?.f(reference_m, t)?
        }
    };
    let estimate = battery::estimate_photon_number(reference, reference_m, energy)?;
    let report = json!({ "estimate": estimate, "reference_energy": reference, "reference_m": reference_m, "t": t });
    run.emit(args.out.as_deref(), &to_json(&report))
}

fn cmd_lindblad(args: LindbladArgs) -> Result<()> {
    let init = InitialState::parse(&required(args.init.clone(), "init")?)?;
    let kappa = required(args.kappa, "kappa")?;
    let gamma_phi = required(args.gamma_phi, "gamma-phi")?;
    let n_atoms = args.n_atoms.unwrap_or(10);
    let dist = init.distribution()?;
    let base = OpenSystemConfig::for_initial(n_atoms, dist.truncation() as usize);
    let config = OpenSystemConfig {
        kappa,
        gamma_phi,
        g: args.g.unwrap_or(base.g),
        dt: args.dt.unwrap_or(base.dt),
        t_end: args.t_end.unwrap_or(5.0),
        n_max: args.n_max.unwrap_or(base.n_max),
        output_stride: args.stride.unwrap_or(base.output_stride),
        ..base
    };
    config.validate()?;
    let run = Run::new("lindblad", &json!({ "init": args.init, "config": config }), None);
    let rho0 = match init {
        InitialState::Coherent { .. } => {
            let amps: Vec<Complex64> = (0..=dist.truncation())
                .map(|m| Complex64::new(dist.probability(m).sqrt(), 0.0))
                .collect();
            DensityMatrix::pure_field(n_atoms, config.n_max, &amps)?
        }
        _ => DensityMatrix::from_distribution(n_atoms, config.n_max, &dist)?,
    };
    let series = lindblad::evolve(&rho0, &config)?;
    run.emit(args.out.as_deref(), &series.to_csv())
}

#[derive(Debug, Serialize)]
struct SectorCheck {
    m: u32,
    branches: usize,
    max_residual: f64,
    max_energy_error: f64,
    max_curve_error: f64,
}

fn verify_sector(spec: &SectorSpec, branches: &[BetheBranch], grid: &[f64]) -> std::result::Result<SectorCheck, String> {
    let m = spec.excitations();
    let expected = spec.branch_count();
    if branches.len() != expected {
        return Err(format!("M = {m}: {} branches, expected {expected}", branches.len()));
    }
    let j = spec.total_spin();
    let mut max_residual: f64 = 0.0;
    for (i, b) in branches.iter().enumerate() {
        if b.roots.len() != m as usize {
            return Err(format!("M = {m}: branch {i} has {} roots", b.roots.len()));
        }
        let r = bethe::branch_residual(&b.roots, j).map_err(|e| format!("M = {m}: branch {i}: {e}"))?;
        if !(r <= VERIFY_RESIDUAL) {
            return Err(format!("M = {m}: branch {i} residual {r:e} exceeds {VERIFY_RESIDUAL:e}"));
        }
        max_residual = max_residual.max(r);
    }
    let oracle = SectorOracle::new(spec).map_err(|e| format!("M = {m}: oracle: {e}"))?;
    let mut energies: Vec<f64> = branches.iter().map(|b| b.eigenenergy).collect();
    energies.sort_by(f64::total_cmp);
    let max_energy_error = energies
        .iter()
        .zip(&oracle.eigen().values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(max_energy_error <= VERIFY_ENERGY) {
        return Err(format!("M = {m}: eigenenergies differ from the oracle by {max_energy_error:e}"));
    }
    let series = SectorSpectrum::new(spec, branches)
        .and_then(|s| s.number_state_energy())
        .map_err(|e| format!("M = {m}: {e}"))?;
    let max_curve_error =
        grid.iter().map(|&t| (series.value(t) - oracle.number_state_energy(t)).abs()).fold(0.0, f64::max);
    if !(max_curve_error < VERIFY_CURVE) {
        return Err(format!("M = {m}: F(M, t) differs from the oracle by {max_curve_error:e}"));
    }
    Ok(SectorCheck { m, branches: branches.len(), max_residual, max_energy_error, max_curve_error })
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let n_atoms = required(args.n_atoms, "n-atoms")?;
    let m_max = required(args.m_max, "m-max")?;
    let grid = battery::linear_grid(3.0, args.grid.unwrap_or(2000));
    let options = solver_options(args.seed, args.allow_oracle_seed);
    let mut run = Run::new("verify", &args, Some(options.seed));
    let ladder = match &args.branches {
        Some(dir) => {
            let mut out = vec![vec![BetheBranch::vacuum()]];
            for m in 1..=m_max {
                let path = dir.join(BranchFile::file_name(n_atoms, m));
                let file: BranchFile = read_json(&path).map_err(|e| CliError::Verify(e.to_string()))?;
                if file.n_atoms != n_atoms || file.m != m {
                    return Err(CliError::Verify(format!("{}: holds sector ({}, {})", path.display(), file.n_atoms, file.m)));
                }
                out.push(file.to_branches());
            }
            out
        }
        None => ladder(n_atoms, m_max, &options, &mut run.warnings)?,
    };
    let mut checks = Vec::new();
    for (m, branches) in ladder.iter().enumerate().skip(1) {
        let spec = SectorSpec::new(n_atoms, m as u32)?;
        let check = verify_sector(&spec, branches, &grid).map_err(CliError::Verify)?;
        println!(
            "M = {m}: ok ({} branches, residual {:.2e}, energy {:.2e}, F {:.2e})",
            check.branches, check.max_residual, check.max_energy_error, check.max_curve_error
        );
        checks.push(check);
    }
    println!("verify passed for N = {n_atoms}, M ≤ {m_max}");
    match args.out.as_deref() {
        Some(path) => run.emit(Some(path), &to_json(&json!({ "n_atoms": n_atoms, "sectors": checks }))),
        None => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(a) => cmd_solve(resolve(&a, a.config.as_deref())?),
        Command::Spectrum(a) => cmd_spectrum(resolve(&a, a.config.as_deref())?),
        Command::Energy(a) => cmd_energy(resolve(&a, a.config.as_deref())?),
        Command::Power(a) => cmd_power(resolve(&a, a.config.as_deref())?),
        Command::Optimal(a) => cmd_optimal(resolve(&a, a.config.as_deref())?),
        Command::SplitCheck(a) => cmd_split(resolve(&a, a.config.as_deref())?),
        Command::Inequality(a) => cmd_inequality(resolve(&a, a.config.as_deref())?),
        Command::Estimate(a) => cmd_estimate(resolve(&a, a.config.as_deref())?),
        Command::Lindblad(a) => cmd_lindblad(resolve(&a, a.config.as_deref())?),
        Command::Verify(a) => cmd_verify(resolve(&a, a.config.as_deref())?),
    }
}

/// Parse the process arguments, run, and map failures to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_specs_parse() {
        assert_eq!(InitialState::parse("fock:10").unwrap(), InitialState::Fock(10));
        assert_eq!(
            InitialState::parse("coherent:6:16").unwrap(),
            InitialState::Coherent { alpha_sq: 6.0, truncation: Some(16) }
        );
        assert_eq!(InitialState::parse("coherent:2.5").unwrap(), InitialState::Coherent { alpha_sq: 2.5, truncation: None });
        assert_eq!(InitialState::parse("file:a/b.json").unwrap(), InitialState::File("a/b.json".into()));
        for bad in ["fock", "fock:x", "coherent:", "poisson:3", "file:"] {
            assert!(InitialState::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"n_atoms": 4, "m_max": 7, "allow_oracle_seed": true}"#).unwrap();
        let flags = SolveArgs { m_max: Some(3), ..SolveArgs::default() };
        let merged = resolve(&flags, Some(&path)).unwrap();
        assert_eq!((merged.n_atoms, merged.m_max, merged.allow_oracle_seed), (Some(4), Some(3), true));
        fs::write(&path, r#"{"n_atom": 4}"#).unwrap();
        assert!(resolve(&flags, Some(&path)).is_err());
    }

    #[test]
    fn exit_codes() {
        let missing = CliError::Sector { m: 3, source: BetheError::MissingBranches { found: 2, expected: 4 } };
        assert_eq!(missing.exit_code(), 2);
        assert_eq!(CliError::from(BatteryError::SupportExceedsTable { needed: 9, available: 4 }).exit_code(), 3);
        assert_eq!(CliError::Verify("x".into()).exit_code(), 4);
        assert_eq!(CliError::from(LindbladError::Eigen).exit_code(), 5);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
    }

    #[test]
    fn branch_file_round_trip() {
        let spec = SectorSpec::new(3, 2).unwrap();
        let branches = BetheSolver::default().solve_sector(&spec).unwrap();
        let file = BranchFile::new(3, 2, 0, &branches);
        let back: BranchFile = serde_json::from_str(&to_json(&file)).unwrap();
        assert_eq!(back.to_branches(), branches);
    }

    #[test]
    fn manifest_sits_beside_data() {
        assert_eq!(manifest_path(Path::new("out/e.csv")), PathBuf::from("out/e.csv.manifest.json"));
    }

    #[test]
    fn verify_rejects_tampered_roots() {
        let spec = SectorSpec::new(4, 3).unwrap();
        let mut branches = BetheSolver::default().solve_sector(&spec).unwrap();
        let grid = battery::linear_grid(3.0, 50);
        assert!(verify_sector(&spec, &branches, &grid).is_ok());
        branches[1].roots[0] += Complex64::new(1e-3, 0.0);
        assert!(verify_sector(&spec, &branches, &grid).unwrap_err().contains("residual"));
        branches.pop();
        assert!(verify_sector(&spec, &branches, &grid).is_err());
    }
}
