//! Run configuration: a JSON tree with a grid, a problem, evolution and
//! scan settings, an optional many-body block and output options.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weylsim::evolve::{EvolveConfig, Problem, Scheme};
use weylsim::field::{gaussian, random_packet_state, read_csv, Grid, State};
use weylsim::manybody::{Interaction, InteractionClass, ManyBodyProblem, Particle};
use weylsim::sensitivity::ParametrizedFamily;
use weylsim::symbols::{DampingSpec, GrowthClass, PhaseFn, PotentialSpec};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Sensitivity,
    ParametrixScan,
    CommutatorScan,
    Assumptions,
    Manybody,
    QuantizeCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Sensitivity => "sensitivity",
            Command::ParametrixScan => "parametrix-scan",
            Command::CommutatorScan => "commutator-scan",
            Command::Assumptions => "assumptions",
            Command::Manybody => "manybody",
            Command::QuantizeCheck => "quantize-check",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub evolve: Option<EvolveBlock>,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub manybody: Option<ManyBodyConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
    pub half_width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthConfig {
    pub class: GrowthKindConfig,
    #[serde(default)]
    pub m: f64,
    #[serde(default = "one")]
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthKindConfig {
    A21,
    A22,
}

fn one() -> f64 {
    1.0
}

fn zero_str() -> String {
    "0".into()
}

impl GrowthConfig {
    pub fn build(&self) -> Result<GrowthClass, CliError> {
        Ok(match self.class {
            GrowthKindConfig::A21 => GrowthClass::a21(),
            GrowthKindConfig::A22 => GrowthClass::a22(self.m, self.delta)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum InitialConfig {
    Gaussian {
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        momentum: Vec<f64>,
    },
    /// Superposition of packets drawn from `seed`, or the run seed.
    Random {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// CSV state file as written by the state dump.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "zero_str")]
    pub v: String,
    #[serde(default)]
    pub a: Vec<String>,
    #[serde(default = "zero_str")]
    pub k: String,
    #[serde(default = "one")]
    pub mass: f64,
    pub growth: GrowthConfig,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub initial: InitialConfig,
    #[serde(default = "one")]
    pub horizon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveBlock {
    #[serde(default)]
    pub scheme: Scheme,
    pub dt: f64,
    #[serde(default)]
    pub levels: Vec<(i32, f64)>,
    #[serde(default = "one_usize")]
    pub stride: usize,
    #[serde(default)]
    pub growth_tol: Option<f64>,
}

fn one_usize() -> usize {
    1
}

impl EvolveBlock {
    pub fn build(&self) -> EvolveConfig {
        let mut c = EvolveConfig::new(self.dt).scheme(self.scheme).levels(self.levels.clone()).stride(self.stride);
        if let Some(t) = self.growth_tol {
            c.growth_tol = t;
        }
        c
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default)]
    pub mu: Vec<f64>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub tau: Vec<f64>,
    /// Fixed shift for the commutator scan; the fitted default otherwise.
    #[serde(default)]
    pub shift: Option<f64>,
    /// Also scan `Q_{aε}` for these `a`.
    #[serde(default)]
    pub q_levels: Vec<i32>,
    #[serde(default)]
    pub param: Option<String>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub interval: Option<(f64, f64)>,
    /// `(a, M)` of the sensitivity bound ratio.
    #[serde(default)]
    pub level: Option<(i32, f64)>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub probes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleConfig {
    #[serde(default = "zero_str")]
    pub v: String,
    #[serde(default)]
    pub a: Vec<String>,
    #[serde(default = "zero_str")]
    pub k: String,
    #[serde(default = "one")]
    pub mass: f64,
    pub growth: GrowthConfig,
    pub initial: InitialConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionClassConfig {
    W12Type,
    Generic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConfig {
    pub i: usize,
    pub j: usize,
    pub w: String,
    pub class: InteractionClassConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManyBodyConfig {
    #[serde(default = "one_usize")]
    pub d: usize,
    pub n: usize,
    pub half_width: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    pub particles: Vec<ParticleConfig>,
    #[serde(default)]
    pub interactions: Vec<InteractionConfig>,
    /// Symmetrize the product initial state under particle exchange.
    #[serde(default)]
    pub symmetrize: bool,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    State,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: default_dir(), formats: default_formats() }
    }
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn missing(block: &str) -> CliError {
    CliError::Config(format!("missing '{block}' block"))
}

impl RunConfig {
    pub fn grid(&self) -> Result<Grid, CliError> {
        let g = self.grid.as_ref().ok_or_else(|| missing("grid"))?;
        Grid::new(g.dim, g.n, g.half_width).map_err(|e| CliError::Config(format!("grid: {e}")))
    }

    pub fn problem_block(&self) -> Result<&ProblemConfig, CliError> {
        self.problem.as_ref().ok_or_else(|| missing("problem"))
    }

    pub fn evolve_block(&self) -> Result<&EvolveBlock, CliError> {
        self.evolve.as_ref().ok_or_else(|| missing("evolve"))
    }

    pub fn manybody_block(&self) -> Result<&ManyBodyConfig, CliError> {
        self.manybody.as_ref().ok_or_else(|| missing("manybody"))
    }

    /// Potentials and damping; expressions see `params`.
    pub fn specs(&self, bindings: &BTreeMap<String, f64>) -> Result<(PotentialSpec, DampingSpec), CliError> {
        let grid = self.grid()?;
        let p = self.problem_block()?;
        specs(grid.dim(), &p.v, &p.a, &p.k, p.mass, bindings)
    }

    pub fn build_problem(&self) -> Result<Problem, CliError> {
        let grid = self.grid()?;
        let p = self.problem_block()?;
        let (pot, damp) = self.specs(&p.params)?;
        let u0 = initial_state(&p.initial, grid, self.seed)?;
        Ok(Problem::new(pot, damp, p.growth.build()?, grid, u0, p.horizon)?)
    }

    /// Family in the scan parameter; its value is left symbolic.
    pub fn build_family(&self) -> Result<(ParametrizedFamily, f64), CliError> {
        let grid = self.grid()?;
        let p = self.problem_block()?;
        let name = self.scan.param.clone().ok_or_else(|| CliError::Config("scan.param is required".into()))?;
        let rho = self.scan.rho.ok_or_else(|| CliError::Config("scan.rho is required".into()))?;
        let interval = self.scan.interval.unwrap_or((rho - 0.5, rho + 0.5));
        let mut bindings = p.params.clone();
        bindings.insert(name.clone(), rho);
        let (pot, damp) = self.specs(&bindings)?;
        let u0 = initial_state(&p.initial, grid, self.seed)?;
        let fam = ParametrizedFamily::new(pot, damp, p.growth.build()?, grid, u0, p.horizon, &name, interval)?;
        Ok((fam, rho))
    }

    pub fn build_manybody(&self) -> Result<(ManyBodyProblem, State), CliError> {
        let m = self.manybody_block()?;
        let mut particles = Vec::new();
        for (k, pc) in m.particles.iter().enumerate() {
            let (pot, damp) = specs(m.d, &pc.v, &pc.a, &pc.k, pc.mass, &m.params)
                .map_err(|e| CliError::Config(format!("particle {}: {e}", k + 1)))?;
            particles.push(Particle::new(pot, damp, pc.growth.build()?)?);
        }
        let mut interactions = Vec::new();
        for ic in &m.interactions {
            let w = PhaseFn::parse(&ic.w, m.d, &m.params)
                .map_err(|e| CliError::Config(format!("interaction W{}{}: {e}", ic.i + 1, ic.j + 1)))?;
            let class = match ic.class {
                InteractionClassConfig::W12Type => InteractionClass::W12Type,
                InteractionClassConfig::Generic => InteractionClass::Generic,
            };
            interactions.push(Interaction { i: ic.i, j: ic.j, w, class });
        }
        let problem = ManyBodyProblem::new(particles, interactions, m.d, m.n, m.half_width, m.horizon)?;
        let pg = problem.particle_grid();
        let factors = m
            .particles
            .iter()
            .enumerate()
            .map(|(k, pc)| initial_state(&pc.initial, pg, self.seed.wrapping_add(k as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut u0 = weylsim::manybody::product_state(&problem, &factors)?;
        if m.symmetrize {
            if problem.n() != 2 {
                return Err(CliError::Config("symmetrize needs exactly two particles".into()));
            }
            u0 = u0.plus(&weylsim::manybody::swap_particles(&u0, m.d, 0, 1)?)?.normalized();
        }
        Ok((problem, u0))
    }
}

fn specs(
    dim: usize,
    v: &str,
    a: &[String],
    k: &str,
    mass: f64,
    bindings: &BTreeMap<String, f64>,
) -> Result<(PotentialSpec, DampingSpec), CliError> {
    let a: Vec<&str> = a.iter().map(String::as_str).collect();
    let pot = PotentialSpec::parse(dim, v, &a, mass, bindings).map_err(|e| CliError::Config(format!("potentials: {e}")))?;
    let damp = DampingSpec::parse(dim, k, bindings).map_err(|e| CliError::Config(format!("damping k: {e}")))?;
    Ok((pot, damp))
}

pub fn initial_state(init: &InitialConfig, grid: Grid, seed: u64) -> Result<State, CliError> {
    match init {
        InitialConfig::Gaussian { center, width, momentum } => {
            if center.len() != grid.dim() || !(momentum.is_empty() || momentum.len() == grid.dim()) {
                return Err(CliError::Config("initial gaussian: center/momentum length differs from the grid dimension".into()));
            }
            if !(*width > 0.0) {
                return Err(CliError::Config("initial gaussian: width must be positive".into()));
            }
            Ok(gaussian(grid, center, *width, momentum).normalized())
        }
        InitialConfig::Random { seed: s } => Ok(random_packet_state(grid, s.unwrap_or(seed))),
        InitialConfig::File { path } => {
            let f = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let s = read_csv(BufReader::new(f))?;
            grid.check_same(s.grid())?;
            Ok(s)
        }
    }
}
