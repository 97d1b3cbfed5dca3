//! Experiment configuration, orchestration, diagnostics and data export.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conservation::{invariants, Invariant};
use crate::error::{KineticError, Result};
use crate::field::{Field, PhaseGrid, SpatialGridSpec};
use crate::geometry::{Domain, DomainKind};
use crate::kernels::{
    default_probes, estimate_delta, estimate_delta_tilde, phi_q, CollisionModel, CollisionSpec, Exponent,
    LatticeCollision, SplitOperator,
};
use crate::solver::{decay_fit, sup_weighted, CoupledSolution, DecayFit, FullForm, Solver, SolverConfig, Trajectory};
use crate::transport::{
    chain_rng, escape_probability, escape_probability_tilted, escape_tilt, semigroup_diffusive, semigroup_specular, BoundaryCondition, ChainOptions,
    EscapeEstimate, TransportStepper,
};
use crate::vec3::Vec3;
use crate::velocity::{maxwellian, VelocityGrid, VelocityGridSpec};
use crate::weights::Weight;

pub const SCHEMA_VERSION: u32 = 1;

/// JSON schema of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "KINETIC_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentTag {
    SemigroupSpecular,
    SemigroupDiffusive,
    Chains,
    SplittingConstants,
    SolveLinear,
    SolveNonlinear,
    Positivity,
    Conservation,
}

/// Spatial profile of the initial perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialProfile {
    /// The same microscopic velocity profile in every cell.
    Homogeneous,
    /// The velocity profile modulated by `1 + 0.3 cos(pi x_1)`.
    Modulated,
}

/// Sizes of the initial perturbation and the analysis windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// `||f0||_{L^infinity(m)}` of the initial perturbation.
    pub amplitude: f64,
    pub profile: InitialProfile,
    /// Start of the window used by decay fits.
    pub burn_in: f64,
    /// Start of the window used by the lower-bound fit.
    pub tau: f64,
    /// Times probed by the specular semigroup experiment.
    pub times: Vec<f64>,
    pub n_probes: usize,
    pub n_chains: usize,
    /// Rebound counts of the escape-probability sweep.
    pub rebounds: Vec<usize>,
    /// Time window of the escape-probability sweep.
    pub chain_time: f64,
    pub deltas: Vec<f64>,
    pub stretch_weight: Weight,
    pub tilde_k: f64,
    /// End of the weighted decay window of the diffusive semigroup.
    pub decay_horizon: f64,
    /// Coupled solves keep their outer iteration state in `outer_state.bin` in the
    /// output directory and resume from it.
    pub checkpoint: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            amplitude: 1e-2,
            profile: InitialProfile::Modulated,
            burn_in: 0.2,
            tau: 1.0,
            times: vec![0.5, 1.0, 2.0, 4.0],
            n_probes: 1000,
            n_chains: 4000,
            rebounds: vec![4, 8, 16, 32],
            chain_time: 10.0,
            deltas: vec![0.4, 0.2, 0.1, 0.05],
            stretch_weight: Weight::StretchExp { kappa: 0.5, alpha: 1.0 },
            tilde_k: 8.0,
            decay_horizon: 6.0,
            checkpoint: false,
        }
    }
}

/// Bounds that pass/fail records are judged against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub mass_drift_per_time: f64,
    pub energy_drift: f64,
    pub semigroup_law: f64,
    pub slab_oracle: f64,
    /// Required fraction of `nu_0` for the nonlinear decay rate.
    pub nonlinear_rate: f64,
    /// Required fraction of `nu_0` for the diffusive semigroup decay rate.
    pub diffusive_rate: f64,
    /// Allowed growth `sup_t ||f(t)|| / ||f0||`.
    pub growth: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            mass_drift_per_time: 1e-5,
            energy_drift: 1e-4,
            semigroup_law: 1e-8,
            slab_oracle: 1e-10,
            nonlinear_rate: 0.3,
            diffusive_rate: 0.8,
            growth: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentTag,
    #[serde(default = "default_domain")]
    pub domain: DomainKind,
    #[serde(default)]
    pub collision: CollisionSpec,
    #[serde(default)]
    pub velocity: VelocityGridSpec,
    #[serde(default)]
    pub space: SpatialGridSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_domain() -> DomainKind {
    DomainKind::Slab
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentTag) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment,
            domain: default_domain(),
            collision: CollisionSpec::default(),
            velocity: VelocityGridSpec::default(),
            space: SpatialGridSpec::default(),
            solver: SolverConfig::default(),
            seed: 0,
            output_dir: None,
            analysis: AnalysisConfig::default(),
            tolerances: Tolerances::default(),
        }
    }

    /// Checks every parameter against the preconditions of the modules it feeds.
    pub fn validate(&self) -> std::result::Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        Domain::new(self.domain.clone()).map_err(|e| keyed("domain", e))?;
        CollisionModel::new(self.collision).map_err(|e| keyed("collision", e))?;
        VelocityGrid::new(self.velocity).map_err(|e| keyed("velocity", e))?;
        if self.space.cells < 2 {
            return Err(HarnessError::config("space.cells", "need at least 2 spatial cells"));
        }
        self.solver.validate().map_err(|e| keyed("solver", e))?;
        let a = &self.analysis;
        for (key, v) in [
            ("analysis.amplitude", a.amplitude),
            ("analysis.chain_time", a.chain_time),
            ("analysis.tilde_k", a.tilde_k),
        ] {
            if !(v > 0.0) {
                return Err(HarnessError::config(key, "must be positive"));
            }
        }
        if !(a.burn_in >= 0.0) {
            return Err(HarnessError::config("analysis.burn_in", "must be non-negative"));
        }
        if !(a.tau >= 0.0) {
            return Err(HarnessError::config("analysis.tau", "must be non-negative"));
        }
        if a.times.is_empty() || a.times.iter().any(|t| !(*t > 0.0)) {
            return Err(HarnessError::config("analysis.times", "need at least one positive time"));
        }
        if a.n_probes == 0 {
            return Err(HarnessError::config("analysis.n_probes", "must be at least 1"));
        }
        if a.n_chains < 2 {
            return Err(HarnessError::config("analysis.n_chains", "must be at least 2"));
        }
        if a.rebounds.len() < 3 || a.rebounds.windows(2).any(|w| w[0] >= w[1]) || a.rebounds[0] == 0 {
            return Err(HarnessError::config(
                "analysis.rebounds",
                "need at least three increasing positive counts",
            ));
        }
        if a.deltas.is_empty() || a.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(HarnessError::config("analysis.deltas", "every delta must lie in (0, 1)"));
        }
        a.stretch_weight.validate().map_err(|e| keyed("analysis.stretch_weight", e))?;
        if !(a.decay_horizon > a.burn_in.max(1.0)) {
            return Err(HarnessError::config("analysis.decay_horizon", "must exceed max(1, burn_in)"));
        }
        match self.experiment {
            ExperimentTag::SemigroupDiffusive if self.domain != DomainKind::Slab => {
                return Err(HarnessError::config("domain", "the diffusive comparison runs on the slab"));
            }
            ExperimentTag::SolveNonlinear | ExperimentTag::Positivity | ExperimentTag::SolveLinear
                if a.amplitude > self.solver.eta =>
            {
                return Err(HarnessError::config("analysis.amplitude", "exceeds solver.eta"));
            }
            _ => {}
        }
        Ok(())
    }
}

fn keyed(section: &str, e: KineticError) -> HarnessError {
    match e {
        KineticError::InvalidParameter { name, reason } => {
            let key = match (section, name.as_str()) {
                ("solver", "kappa" | "alpha" | "k" | "beta") => format!("solver.weight.{name}"),
                _ => format!("{section}.{name}"),
            };
            HarnessError::config(&key, reason)
        }
        other => HarnessError::config(section, other.to_string()),
    }
}

#[derive(Debug)]
pub enum HarnessError {
    /// Invalid configuration; `key` is the dotted path of the offending entry.
    Config { key: String, message: String },
    Io(String),
    Run(KineticError),
}

impl HarnessError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        HarnessError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Io(_) | HarnessError::Run(_) => 1,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config { key, message } => write!(f, "invalid config at `{key}`: {message}"),
            HarnessError::Io(m) => write!(f, "i/o error: {m}"),
            HarnessError::Run(e) => write!(f, "run failed: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<KineticError> for HarnessError {
    fn from(e: KineticError) -> Self {
        HarnessError::Run(e)
    }
}

/// Parses a configuration document, rejecting unknown keys, and validates it.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, HarnessError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| HarnessError::config("<document>", e.to_string()))?;
    config_from_value(value)
}

pub fn config_from_value(value: serde_json::Value) -> std::result::Result<ExperimentConfig, HarnessError> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "<document>".to_string() } else { path };
        HarnessError::config(&key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> std::result::Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::config("<document>", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `value <= bound`
    AtMost,
    /// `value >= bound`
    AtLeast,
    /// `value > bound`
    Above,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl CheckRecord {
    pub fn new(name: &str, value: f64, relation: Relation, bound: f64) -> Self {
        let pass = match relation {
            Relation::AtMost => value <= bound,
            Relation::AtLeast => value >= bound,
            Relation::Above => value > bound,
        };
        CheckRecord {
            name: name.to_string(),
            value,
            bound,
            relation,
            pass,
        }
    }

    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self::new(name, value, Relation::AtMost, bound)
    }

    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self::new(name, value, Relation::AtLeast, bound)
    }

    pub fn above(name: &str, value: f64, bound: f64) -> Self {
        Self::new(name, value, Relation::Above, bound)
    }
}

impl fmt::Display for CheckRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Above => ">",
        };
        let status = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {:.6e} {op} {:.6e}", self.name, self.value, self.bound)
    }
}

/// A table exported as one CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Series {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// CSV text with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub name: String,
    pub fit: DecayFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub checks: Vec<CheckRecord>,
    pub series: Vec<Series>,
    pub fits: Vec<NamedFit>,
    pub notices: Vec<String>,
    pub environment: Environment,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// Writes `report.json` and one CSV per series into `dir`.
    pub fn write(&self, dir: &Path) -> std::result::Result<(), HarnessError> {
        let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Io(e.to_string()))?;
        fs::write(dir.join("report.json"), json).map_err(io)?;
        for s in &self.series {
            fs::write(dir.join(format!("{}.csv", s.name)), s.to_csv()).map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Outcome {
    checks: Vec<CheckRecord>,
    series: Vec<Series>,
    fits: Vec<NamedFit>,
    notices: Vec<String>,
}

impl Outcome {
    fn fit(&mut self, name: &str, fit: DecayFit) {
        if let Some(w) = &fit.warning {
            self.notices.push(format!("{name}: {w}"));
        }
        self.fits.push(NamedFit {
            name: name.to_string(),
            fit,
        });
    }
}

/// Output directory: the configured one, else the environment default, else `out`.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Loads, validates and runs the configuration at `path`, writing the outputs.
pub fn run_experiment(path: &Path) -> std::result::Result<(Report, PathBuf), HarnessError> {
    let cfg = load_config(path)?;
    let dir = output_dir(&cfg);
    let report = run(&cfg)?;
    report.write(&dir)?;
    Ok((report, dir))
}

/// Runs a validated configuration without touching the file system.
pub fn run(cfg: &ExperimentConfig) -> std::result::Result<Report, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let out = match cfg.experiment {
        ExperimentTag::SemigroupSpecular => run_semigroup_specular(cfg)?,
        ExperimentTag::SemigroupDiffusive => run_semigroup_diffusive(cfg)?,
        ExperimentTag::Chains => run_chains(cfg)?,
        ExperimentTag::SplittingConstants => run_splitting_constants(cfg)?,
        ExperimentTag::SolveLinear => run_solve(cfg, true)?,
        ExperimentTag::SolveNonlinear => run_solve(cfg, false)?,
        ExperimentTag::Positivity => run_positivity(cfg)?,
        ExperimentTag::Conservation => run_conservation(cfg)?,
    };
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        checks: out.checks,
        series: out.series,
        fits: out.fits,
        notices: out.notices,
        environment: Environment {
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Sets the dotted `key` of a configuration document to `value`, creating objects on the way.
pub fn set_key(doc: &mut serde_json::Value, key: &str, value: serde_json::Value) -> std::result::Result<(), HarnessError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| HarnessError::config(key, format!("`{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// A sweep value: JSON when it parses, a string otherwise.
pub fn sweep_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// One configuration per value of `key`, all validated before anything runs.
pub fn sweep_configs(
    text: &str,
    key: &str,
    values: &[String],
) -> std::result::Result<Vec<(String, ExperimentConfig)>, HarnessError> {
    let base: serde_json::Value =
        serde_json::from_str(text).map_err(|e| HarnessError::config("<document>", e.to_string()))?;
    let base_cfg = config_from_value(base.clone())?;
    let root = output_dir(&base_cfg);
    values
        .iter()
        .map(|raw| {
            let mut doc = base.clone();
            set_key(&mut doc, key, sweep_value(raw))?;
            let mut cfg = config_from_value(doc)?;
            cfg.output_dir = Some(root.join(format!("{key}={raw}")));
            Ok((raw.clone(), cfg))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// shared set-up

struct Setup {
    model: CollisionModel,
    grid: Arc<PhaseGrid>,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let model = CollisionModel::new(cfg.collision)?;
    let vg = Arc::new(VelocityGrid::new(cfg.velocity)?);
    let grid = PhaseGrid::from_kind(cfg.domain.clone(), cfg.space.cells, vg)?;
    Ok(Setup { model, grid })
}

fn solver_for(s: &Setup, cfg: &ExperimentConfig) -> Result<Solver> {
    let lattice = Arc::new(LatticeCollision::new(&s.model, s.grid.velocity.clone()));
    Solver::new(s.grid.clone(), lattice, cfg.solver)
}

/// `nu_0 = nu(0)`, the infimum of the collision frequency.
pub fn nu_zero(model: &CollisionModel) -> f64 {
    model.nu_of_speed(0.0)
}

/// Microscopic perturbation `a(x) P(v) mu` with `P` free of hydrodynamic moments,
/// scaled to `||f0||_{L^infinity(m)} = amplitude`. `mu + f0` stays positive for
/// amplitudes up to the default smallness threshold.
pub fn initial_perturbation(grid: &Arc<PhaseGrid>, m: &Weight, amplitude: f64, profile: InitialProfile) -> Field {
    let vg = &grid.velocity;
    let raw: Vec<f64> = vg
        .nodes
        .iter()
        .zip(&vg.mu)
        .map(|(v, mu)| (v.x() * v.x() - v.y() * v.y() + 0.5 * v.z() * v.x().powi(2)) * mu)
        .collect();
    let (_, micro) = crate::kernels::project_pi_l(vg, &raw);
    let center = grid.space.domain.center();
    let mut out = Field::zeros(grid.clone());
    for c in 0..grid.ncell() {
        let a = match profile {
            InitialProfile::Homogeneous => 1.0,
            InitialProfile::Modulated => 1.0 + 0.3 * (PI * (grid.space.centers[c] - center).x()).cos(),
        };
        for (o, p) in out.cell_mut(c).iter_mut().zip(&micro) {
            *o = a * p;
        }
    }
    let n = sup_weighted(&out, &m.on_grid(vg));
    out.scaled(amplitude / n)
}

// ---------------------------------------------------------------------------
// specular semigroup

/// Data used by the semigroup experiments: a smooth positive bump around `mu`.
pub fn semigroup_data(x: Vec3, v: Vec3) -> f64 {
    maxwellian(v) * (1.0 + 0.5 * (2.0 * PI * x.x() + x.y() - 0.5 * x.z() + 0.3 * v.x()).cos())
}

/// `sup |semigroup_data|`.
pub fn semigroup_data_sup() -> f64 {
    1.5 * maxwellian(Vec3::ZERO)
}

/// Closed form of the specular slab semigroup: the backward characteristic of `x_1`
/// unfolded onto the line, folded back with period 2.
pub fn slab_specular_oracle<N, F>(nu: &N, f0: &F, t: f64, x: Vec3, v: Vec3) -> f64
where
    N: Fn(Vec3) -> f64,
    F: Fn(Vec3, Vec3) -> f64,
{
    let y = (x.x() - v.x() * t).rem_euclid(2.0);
    let (y1, v1) = if y <= 1.0 { (y, v.x()) } else { (2.0 - y, -v.x()) };
    let xx = Vec3::new(y1, (x.y() - v.y() * t).rem_euclid(1.0), (x.z() - v.z() * t).rem_euclid(1.0));
    (-nu(v) * t).exp() * f0(xx, Vec3::new(v1, v.y(), v.z()))
}

/// Uniform interior points and velocities in `[-4, 4]^3`.
pub fn random_phase_points(domain: &Domain, n: usize, seed: u64) -> Vec<(Vec3, Vec3)> {
    let mut rng = chain_rng(seed, 0);
    let (lo, hi) = domain.bounding_box();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = Vec3::new(
            rng.gen_range(lo.x()..hi.x()),
            rng.gen_range(lo.y()..hi.y()),
            rng.gen_range(lo.z()..hi.z()),
        );
        if !domain.contains(x) {
            continue;
        }
        let v = Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        out.push((x, v));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecularSemigroupSummary {
    /// Per probed time: `(t, max |S(t) f0| e^{nu_0 t} / ||f0||)`.
    pub decay_ratio: Vec<(f64, f64)>,
    /// `max |S(t) S(s) f0 - S(t + s) f0| / ||f0||` over the probe pairs.
    pub semigroup_defect: f64,
    /// `max |S(t) f0 - oracle| / ||f0||` on the slab.
    pub oracle_defect: Option<f64>,
    pub probed: usize,
    pub skipped: usize,
}

pub fn specular_semigroup_summary(
    domain: &Domain,
    model: &CollisionModel,
    times: &[f64],
    n_probes: usize,
    seed: u64,
) -> SpecularSemigroupSummary {
    let nu = |v: Vec3| model.collision_frequency(v);
    let nu0 = nu_zero(model);
    let sup = semigroup_data_sup();
    let points = random_phase_points(domain, n_probes, seed);
    let mut skipped = 0;
    let mut decay_ratio = Vec::new();
    let mut oracle: Option<f64> = if domain.is_slab() { Some(0.0) } else { None };
    for &t in times {
        let mut worst: f64 = 0.0;
        for &(x, v) in &points {
            match semigroup_specular(domain, &nu, &semigroup_data, t, x, v) {
                Ok(val) => {
                    worst = worst.max(val.abs() * (nu0 * t).exp() / sup);
                    if let Some(o) = oracle.as_mut() {
                        let exact = slab_specular_oracle(&nu, &semigroup_data, t, x, v);
                        *o = o.max((val - exact).abs() / sup);
                    }
                }
                Err(_) => skipped += 1,
            }
        }
        decay_ratio.push((t, worst));
    }
    // the composition only needs a subset; every inner evaluation is a full trace
    let s_eval = |s: f64, x: Vec3, v: Vec3| semigroup_specular(domain, &nu, &semigroup_data, s, x, v).unwrap_or(f64::NAN);
    let mut semigroup_defect: f64 = 0.0;
    for &(x, v) in points.iter().take(100) {
        for (t, s) in [(0.5, 1.0), (1.0, 1.0), (0.7, 2.3)] {
            let composed = semigroup_specular(domain, &nu, &|y, w| s_eval(s, y, w), t, x, v);
            let direct = semigroup_specular(domain, &nu, &semigroup_data, t + s, x, v);
            match (composed, direct) {
                (Ok(a), Ok(b)) if a.is_finite() => semigroup_defect = semigroup_defect.max((a - b).abs() / sup),
                _ => skipped += 1,
            }
        }
    }
    SpecularSemigroupSummary {
        decay_ratio,
        semigroup_defect,
        oracle_defect: oracle,
        probed: points.len(),
        skipped,
    }
}

fn run_semigroup_specular(cfg: &ExperimentConfig) -> Result<Outcome> {
    let domain = Domain::new(cfg.domain.clone())?;
    let model = CollisionModel::new(cfg.collision)?;
    let a = &cfg.analysis;
    let sum = specular_semigroup_summary(&domain, &model, &a.times, a.n_probes, cfg.seed);
    let mut out = Outcome::default();
    let mut series = Series::new("specular_decay", &["t", "max_ratio", "bound"]);
    for &(t, r) in &sum.decay_ratio {
        series.push(vec![t, r, 1.0]);
        out.checks.push(CheckRecord::at_most(&format!("pointwise_decay_t{t}"), r, 1.0));
    }
    out.series.push(series);
    out.checks
        .push(CheckRecord::at_most("semigroup_law", sum.semigroup_defect, cfg.tolerances.semigroup_law));
    if let Some(o) = sum.oracle_defect {
        out.checks.push(CheckRecord::at_most("slab_oracle", o, cfg.tolerances.slab_oracle));
    }
    if sum.skipped > 0 {
        out.notices.push(format!("{} grazing probes skipped", sum.skipped));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// diffusive semigroup

/// Slab data compatible with diffusive walls: the outgoing traces match the
/// re-emitted flux, so the semigroup stays continuous.
pub fn diffusive_data(x: Vec3, v: Vec3) -> f64 {
    maxwellian(v)
        * (1.0
            + 0.5 * (2.0 * PI * x.x()).cos()
            + 0.4 * v.x() * (PI * x.x()).sin()
            + 0.1 * v.y() * v.y() * (PI * x.x()).sin())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSetup {
    pub velocity: VelocityGridSpec,
    pub cells: usize,
    pub dt: f64,
    pub t: f64,
    pub n_chains: usize,
    pub seed: u64,
}

impl Default for ComparisonSetup {
    fn default() -> Self {
        ComparisonSetup {
            velocity: VelocityGridSpec::default(),
            cells: 32,
            dt: 0.01,
            t: 0.2,
            n_chains: 4000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub cell: usize,
    pub node: usize,
    pub x1: f64,
    pub v: Vec3,
    pub monte_carlo: f64,
    pub stderr: f64,
    pub coarse: f64,
    pub refined_space_time: f64,
    pub refined_velocity: f64,
    /// `coarse` corrected by both refinements.
    pub corrected: f64,
    /// `3 stderr` plus both refinement corrections.
    pub tolerance: f64,
}

impl ComparisonRow {
    pub fn ratio(&self) -> f64 {
        (self.monte_carlo - self.corrected).abs() / self.tolerance.max(f64::MIN_POSITIVE)
    }
}

fn run_stepper(grid: &Arc<PhaseGrid>, model: &CollisionModel, dt: f64, t: f64) -> Result<Field> {
    let st = TransportStepper::new(grid.clone(), BoundaryCondition::Diffusive, dt)?;
    let nu: Vec<f64> = grid.velocity.nodes.iter().map(|v| model.collision_frequency(*v)).collect();
    let mut f = Field::from_fn(grid.clone(), diffusive_data);
    for _ in 0..(t / dt).round() as usize {
        f = st.step(&f, &nu);
    }
    Ok(f)
}

/// Monte-Carlo diffusive semigroup against the stepped one at 100 probe points. The
/// stepped value is corrected by a 3x refinement in space and time and a separate 3x
/// refinement in velocity; the tolerance adds both corrections to three standard errors.
pub fn diffusive_comparison(model: &CollisionModel, s: &ComparisonSetup) -> Result<Vec<ComparisonRow>> {
    let n = s.cells;
    let vg = Arc::new(VelocityGrid::new(s.velocity)?);
    let fine_v = Arc::new(VelocityGrid::new(VelocityGridSpec {
        n_per_dim: 3 * s.velocity.n_per_dim,
        v_max: s.velocity.v_max,
    })?);
    let coarse_grid = PhaseGrid::from_kind(DomainKind::Slab, n, vg.clone())?;
    let fine_grid = PhaseGrid::from_kind(DomainKind::Slab, 3 * n, vg.clone())?;
    let vel_grid = PhaseGrid::from_kind(DomainKind::Slab, n, fine_v.clone())?;
    let coarse = run_stepper(&coarse_grid, model, s.dt, s.t)?;
    let fine = run_stepper(&fine_grid, model, s.dt / 3.0, s.t)?;
    let vfine = run_stepper(&vel_grid, model, s.dt, s.t)?;
    let domain = Domain::slab();
    let nu = |v: Vec3| model.collision_frequency(v);
    let fracs = [0.0, 0.03, 0.1, 0.26, 0.48, 0.52, 0.77, 0.94, 0.97, 1.0];
    let nv = vg.len();
    let mut rows = Vec::with_capacity(100);
    let mut k = 0u64;
    for f in fracs {
        let c = (f * (n - 1) as f64).round() as usize;
        for i in 0..10 {
            let j = (97 * i) % nv;
            let x = coarse_grid.space.centers[c];
            let v = vg.nodes[j];
            let opts = ChainOptions {
                n_chains: s.n_chains,
                p_max: 64,
                seed: s.seed.wrapping_add(k),
                require_rebound: false,
            };
            k += 1;
            let est = semigroup_diffusive(&domain, &nu, &diffusive_data, s.t, x, v, &opts)?;
            let vj = fine_v.index_of(std::array::from_fn(|a| 3 * vg.coords[j][a])).ok_or_else(|| {
                KineticError::Domain("velocity node missing from the refined grid".into())
            })?;
            let uc = coarse.get(c, j);
            let uf = fine.get(3 * c + 1, j);
            let uv = vfine.get(c, vj);
            rows.push(ComparisonRow {
                cell: c,
                node: j,
                x1: x.x(),
                v,
                monte_carlo: est.estimate,
                stderr: est.stderr,
                coarse: uc,
                refined_space_time: uf,
                refined_velocity: uv,
                corrected: uf + uv - uc,
                tolerance: 3.0 * est.stderr + (uf - uc).abs() + (uv - uc).abs(),
            });
        }
    }
    Ok(rows)
}

/// `||S(t) f0||_{L^infinity(m)}` of the stepped diffusive semigroup at every step.
pub fn diffusive_decay_series(
    model: &CollisionModel,
    velocity: VelocityGridSpec,
    cells: usize,
    dt: f64,
    horizon: f64,
    m: &Weight,
) -> Result<Vec<(f64, f64)>> {
    let vg = Arc::new(VelocityGrid::new(velocity)?);
    let grid = PhaseGrid::from_kind(DomainKind::Slab, cells, vg.clone())?;
    let st = TransportStepper::new(grid.clone(), BoundaryCondition::Diffusive, dt)?;
    let nu: Vec<f64> = vg.nodes.iter().map(|v| model.collision_frequency(*v)).collect();
    let mw = m.on_grid(&vg);
    let mut f = Field::from_fn(grid, diffusive_data);
    let steps = (horizon / dt).round() as usize;
    let mut out = vec![(0.0, sup_weighted(&f, &mw))];
    for n in 1..=steps {
        f = st.step(&f, &nu);
        out.push((n as f64 * dt, sup_weighted(&f, &mw)));
    }
    Ok(out)
}

fn run_semigroup_diffusive(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = CollisionModel::new(cfg.collision)?;
    let setup = ComparisonSetup {
        velocity: cfg.velocity,
        cells: cfg.space.cells,
        n_chains: cfg.analysis.n_chains,
        seed: cfg.seed,
        ..ComparisonSetup::default()
    };
    let rows = diffusive_comparison(&model, &setup)?;
    let mut out = Outcome::default();
    let mut series = Series::new(
        "diffusive_comparison",
        &["x1", "v1", "v2", "v3", "monte_carlo", "stderr", "stepped", "corrected", "tolerance"],
    );
    for r in &rows {
        series.push(vec![
            r.x1,
            r.v.x(),
            r.v.y(),
            r.v.z(),
            r.monte_carlo,
            r.stderr,
            r.coarse,
            r.corrected,
            r.tolerance,
        ]);
    }
    out.series.push(series);
    let worst = rows.iter().map(|r| r.ratio()).fold(0.0, f64::max);
    out.checks.push(CheckRecord::at_most("monte_carlo_vs_stepped", worst, 1.0));
    let decay = diffusive_decay_series(
        &model,
        cfg.velocity,
        cfg.space.cells,
        setup.dt,
        cfg.analysis.decay_horizon,
        &cfg.solver.weight,
    )?;
    let mut s = Series::new("diffusive_decay", &["t", "norm"]);
    for &(t, v) in &decay {
        s.push(vec![t, v]);
    }
    out.series.push(s);
    let fit = decay_fit(&decay, 1.0)?;
    let nu0 = nu_zero(&model);
    out.checks.push(CheckRecord::at_least(
        "diffusive_decay_rate",
        fit.lambda_hat,
        cfg.tolerances.diffusive_rate * nu0,
    ));
    out.fit("diffusive_decay", fit);
    Ok(out)
}

// ---------------------------------------------------------------------------
// chains

/// Escape probabilities for every rebound count, each under the tilt chosen by `escape_tilt`.
pub fn escape_sweep(
    domain: &Domain,
    t: f64,
    x: Vec3,
    v: Vec3,
    rebounds: &[usize],
    n_chains: usize,
    seed: u64,
) -> Result<Vec<(usize, f64, EscapeEstimate)>> {
    rebounds
        .iter()
        .map(|&p| {
            let theta = escape_tilt(domain, t, x, v, p, seed)?;
            Ok((p, theta, escape_probability_tilted(domain, t, x, v, p, n_chains, seed, theta)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailShape {
    /// Largest increase of the estimate from one rebound count to the next, less three
    /// combined standard errors.
    pub max_increase: f64,
    /// Slopes of `ln P` against `p` between consecutive counts.
    pub slopes: Vec<f64>,
    /// Largest increase of the slope from one interval to the next.
    pub max_slope_increase: f64,
    /// Three standard errors of that slope increase.
    pub slope_tolerance: f64,
}

/// Monotonicity and concavity diagnostics of `ln P` against `p`.
pub fn tail_shape(rows: &[(usize, EscapeEstimate)]) -> TailShape {
    let max_increase = rows
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].1, &w[1].1);
            b.probability - a.probability - 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let rel = |e: &EscapeEstimate| e.stderr / e.probability;
    let mut slopes = Vec::new();
    let mut slope_err: Vec<f64> = Vec::new();
    for w in rows.windows(2) {
        let dp = (w[1].0 - w[0].0) as f64;
        slopes.push((w[1].1.probability.ln() - w[0].1.probability.ln()) / dp);
        slope_err.push((rel(&w[0].1).powi(2) + rel(&w[1].1).powi(2)).sqrt() / dp);
    }
    let mut max_slope_increase = f64::NEG_INFINITY;
    let mut slope_tolerance: f64 = 0.0;
    for i in 1..slopes.len() {
        let d = slopes[i] - slopes[i - 1];
        if d > max_slope_increase || d.is_nan() {
            max_slope_increase = d;
            slope_tolerance = 3.0 * (slope_err[i].powi(2) + slope_err[i - 1].powi(2)).sqrt();
        }
    }
    TailShape {
        max_increase,
        slopes,
        max_slope_increase,
        slope_tolerance,
    }
}

fn run_chains(cfg: &ExperimentConfig) -> Result<Outcome> {
    let domain = Domain::new(cfg.domain.clone())?;
    let a = &cfg.analysis;
    let x = domain.center();
    let v = Vec3::new(1.0, 0.3, -0.2);
    let rows = escape_sweep(&domain, a.chain_time, x, v, &a.rebounds, a.n_chains, cfg.seed)?;
    let mut out = Outcome::default();
    let mut s = Series::new(
        "escape_probability",
        &["p", "theta", "probability", "stderr", "direct_probability", "direct_stderr"],
    );
    for (p, theta, e) in &rows {
        let direct = escape_probability(&domain, a.chain_time, x, v, *p, a.n_chains, cfg.seed)?;
        s.push(vec![*p as f64, *theta, e.probability, e.stderr, direct.probability, direct.stderr]);
    }
    out.series.push(s);
    let est: Vec<(usize, EscapeEstimate)> = rows.iter().map(|(p, _, e)| (*p, *e)).collect();
    let shape = tail_shape(&est);
    out.checks.push(CheckRecord::at_most("escape_non_increasing", shape.max_increase, 0.0));
    out.checks.push(CheckRecord::above(
        "escape_last_positive",
        est.last().map(|r| r.1.probability).unwrap_or(0.0),
        0.0,
    ));
    out.checks.push(CheckRecord::at_most(
        "log_tail_concave",
        shape.max_slope_increase,
        shape.slope_tolerance,
    ));
    out.checks.push(CheckRecord::at_most(
        "log_tail_decreasing",
        shape.slopes.last().cloned().unwrap_or(f64::NAN),
        0.0,
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// splitting constants

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub delta: f64,
    /// `Delta_hat` for the polynomial weight with `q = infinity`.
    pub polynomial: f64,
    /// `Delta_hat` for the stretched exponential weight with `q = infinity`.
    pub stretch: f64,
    pub tilde: f64,
    /// `phi_infinity(k)` of the polynomial weight.
    pub phi: f64,
}

pub fn delta_ladder(
    model: &CollisionModel,
    lattice: &LatticeCollision,
    deltas: &[f64],
    polynomial: &Weight,
    stretch: &Weight,
    tilde_k: f64,
) -> Result<Vec<LadderRow>> {
    let grid = lattice.grid.clone();
    let k = match *polynomial {
        Weight::Polynomial { k } => k,
        _ => return Err(KineticError::invalid("weight", "the ladder needs a polynomial weight")),
    };
    let phi = phi_q(Exponent::Infinity, k, model.gamma, model.b_inf, model.l_b)?;
    deltas
        .iter()
        .map(|&delta| {
            let split = SplitOperator::new(lattice, delta)?;
            let pp = default_probes(&split, polynomial, &grid, Exponent::Infinity);
            let sp = default_probes(&split, stretch, &grid, Exponent::Infinity);
            Ok(LadderRow {
                delta,
                polynomial: estimate_delta(&split, &grid, polynomial, Exponent::Infinity, &pp)?,
                stretch: estimate_delta(&split, &grid, stretch, Exponent::Infinity, &sp)?,
                tilde: estimate_delta_tilde(&split, &grid, tilde_k),
                phi,
            })
        })
        .collect()
}

/// Largest increase between consecutive entries, for rows sorted by decreasing `delta`.
pub fn max_increase(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

fn run_splitting_constants(cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = CollisionModel::new(cfg.collision)?;
    let vg = Arc::new(VelocityGrid::new(cfg.velocity)?);
    let lattice = LatticeCollision::new(&model, vg);
    let mut deltas = cfg.analysis.deltas.clone();
    deltas.sort_by(|a, b| b.total_cmp(a));
    let rows = delta_ladder(
        &model,
        &lattice,
        &deltas,
        &cfg.solver.weight,
        &cfg.analysis.stretch_weight,
        cfg.analysis.tilde_k,
    )?;
    let mut out = Outcome::default();
    let mut s = Series::new("splitting_constants", &["delta", "delta_polynomial", "delta_stretch", "delta_tilde", "phi"]);
    for r in &rows {
        s.push(vec![r.delta, r.polynomial, r.stretch, r.tilde, r.phi]);
    }
    out.series.push(s);
    out.checks.push(CheckRecord::at_most(
        "polynomial_non_increasing",
        max_increase(rows.iter().map(|r| r.polynomial)),
        0.0,
    ));
    out.checks.push(CheckRecord::at_most(
        "stretch_non_increasing",
        max_increase(rows.iter().map(|r| r.stretch)),
        0.0,
    ));
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    if rows.len() > 1 {
        out.checks.push(CheckRecord::at_most("stretch_halved", last.stretch, 0.5 * first.stretch));
        out.checks.push(CheckRecord::at_most("tilde_halved", last.tilde, 0.5 * first.tilde));
    }
    out.checks.push(CheckRecord::at_most("polynomial_smallest_delta", last.polynomial, 0.6));
    Ok(out)
}

// ---------------------------------------------------------------------------
// solves

/// Name of the outer iteration checkpoint inside the output directory.
pub const CHECKPOINT_FILE: &str = "outer_state.bin";

fn coupled(solver: &Solver, f0: &Field, cfg: &ExperimentConfig) -> Result<CoupledSolution> {
    if !cfg.analysis.checkpoint {
        return solver.solve_coupled(f0);
    }
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| KineticError::Checkpoint {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    solver.solve_coupled_checkpointed(f0, &dir.join(CHECKPOINT_FILE))
}

fn run_solve(cfg: &ExperimentConfig, linear: bool) -> Result<Outcome> {
    let s = setup(cfg)?;
    let mut solver = solver_for(&s, cfg)?;
    solver.quadratic_off = linear;
    let m = cfg.solver.weight;
    let f0 = initial_perturbation(&s.grid, &m, cfg.analysis.amplitude, cfg.analysis.profile);
    let sol = coupled(&solver, &f0, cfg)?;
    let mut out = Outcome::default();
    let tol = cfg.solver.tol_fixed_point;
    let norm0 = solver.weight_norm(&f0);
    let mut series = Series::new("norms", &["t", "f", "f1", "f2"]);
    let (a, b, c) = (sol.f.norm_series(&m), sol.f1.norm_series(&m), sol.f2.norm_series(&m));
    for i in 0..a.len() {
        series.push(vec![a[i].0, a[i].1, b[i].1, c[i].1]);
    }
    out.series.push(series);
    let mut it = Series::new("outer_iterations", &["iteration", "difference", "inner_iterations", "contraction"]);
    for (l, d) in sol.outer_differences.iter().enumerate() {
        it.push(vec![(l + 1) as f64, *d, sol.inner_iterations[l] as f64, sol.contraction[l]]);
    }
    out.series.push(it);
    out.checks.push(CheckRecord::at_most(
        "outer_iterations",
        sol.outer_iterations as f64,
        cfg.solver.max_outer_iters as f64,
    ));
    let fit = decay_fit(&a, cfg.analysis.burn_in)?;
    let nu0 = nu_zero(&s.model);
    out.checks.push(CheckRecord::above(
        "decay_rate",
        fit.lambda_hat,
        if linear { 0.0 } else { cfg.tolerances.nonlinear_rate * nu0 },
    ));
    out.fit("norm_decay", fit);
    out.checks.push(CheckRecord::at_most(
        "max_growth",
        sol.f.sup_norm(&m) / norm0,
        cfg.tolerances.growth,
    ));
    out.checks.push(CheckRecord::at_most(
        "residual",
        solver.residual(&sol.f),
        cfg.solver.tol_residual,
    ));
    if linear {
        let direct = solver.solve_full(&f0, FullForm::Perturbation)?;
        let d = sol.f.sup_distance(&direct.traj, &m) / sol.f.sup_norm(&m);
        out.checks.push(CheckRecord::at_most("direct_linear_distance", d, 2.0 * tol));
    }
    out.checks.push(CheckRecord::at_most(
        "projection_defect",
        sol.projection_defect,
        cfg.tolerances.mass_drift_per_time * cfg.solver.t_final * norm0.max(1.0),
    ));
    Ok(out)
}

/// Adds `mu` to every field of a perturbation trajectory.
pub fn with_maxwellian(f: &Trajectory) -> Trajectory {
    let mu = Field::maxwellian(f.fields[0].grid.clone());
    Trajectory {
        dt: f.dt,
        fields: f.fields.iter().map(|x| x.add(&mu)).collect(),
    }
}

fn run_positivity(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = setup(cfg)?;
    let solver = solver_for(&s, cfg)?;
    let f0 = initial_perturbation(&s.grid, &cfg.solver.weight, cfg.analysis.amplitude, cfg.analysis.profile);
    let big_f0 = f0.add(&Field::maxwellian(s.grid.clone()));
    let mut out = Outcome::default();
    out.checks.push(CheckRecord::at_least("initial_minimum", big_f0.data.iter().cloned().fold(f64::INFINITY, f64::min), 0.0));
    let sol = coupled(&solver, &f0, cfg)?;
    let big = with_maxwellian(&sol.f);
    let lb = check_lower_bound(&big, cfg.analysis.tau, cfg.solver.tol_pos)?;
    out.checks.push(CheckRecord::above("min_mass", lb.min_mass, 0.0));
    out.checks.push(CheckRecord::at_most("max_local_energy", lb.max_local_energy, f64::MAX));
    out.checks.push(CheckRecord::above("rho_hat", lb.rho_hat, 0.0));
    out.checks.push(CheckRecord::above("theta_hat", lb.theta_hat, 0.0));
    let mut series = Series::new("lower_bound", &["rho_hat", "theta_hat", "min_value", "min_mass", "max_local_energy"]);
    series.push(vec![lb.rho_hat, lb.theta_hat, lb.min_value, lb.min_mass, lb.max_local_energy]);
    out.series.push(series);
    Ok(out)
}

fn run_conservation(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = setup(cfg)?;
    let solver = solver_for(&s, cfg)?;
    let mu = Field::maxwellian(s.grid.clone());
    let f0 = initial_perturbation(&s.grid, &cfg.solver.weight, cfg.analysis.amplitude, cfg.analysis.profile);
    let sol = solver.solve_full(&f0.add(&mu), FullForm::Full)?;
    let mut out = Outcome::default();
    let drift = check_conservation(&sol.traj, cfg.solver.bc);
    let mut series = Series::new("moments", &["t", "mass", "energy"]);
    for (t, f) in sol.traj.times().iter().zip(&sol.traj.fields) {
        series.push(vec![*t, f.mass(), f.energy()]);
    }
    out.series.push(series);
    let horizon = cfg.solver.t_final;
    out.checks.push(CheckRecord::at_most(
        "mass_drift_per_time",
        drift.mass / horizon,
        cfg.tolerances.mass_drift_per_time,
    ));
    match drift.energy {
        Some(e) if cfg.solver.bc == BoundaryCondition::Specular => {
            out.checks.push(CheckRecord::at_most("energy_drift", e, cfg.tolerances.energy_drift))
        }
        Some(e) => out.notices.push(format!("energy drift {e:e} (not conserved by diffusive walls)")),
        None => {}
    }
    for (name, d) in &drift.angular_momentum {
        out.checks.push(CheckRecord::at_most(name, *d, cfg.tolerances.energy_drift));
    }
    out.checks.push(CheckRecord::at_least("min_value", sol.min_value.0, -cfg.solver.tol_pos));
    let eq = solver.solve_full(&mu, FullForm::Full)?;
    let dev = eq.traj.fields.iter().map(|f| f.sub(&mu).max_abs()).fold(0.0, f64::max) / mu.max_abs();
    out.checks.push(CheckRecord::at_most("maxwellian_fixed_point", dev, 1e-10));
    Ok(out)
}

// ---------------------------------------------------------------------------
// diagnostics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    /// `max_t |M(t) - M(0)| / |M(0)|`.
    pub mass: f64,
    /// Relative energy drift; reported for both wall conditions.
    pub energy: Option<f64>,
    /// Angular momentum drifts about the symmetry axes, relative to `int int |x - c| |v| |F|`.
    pub angular_momentum: Vec<(String, f64)>,
}

pub fn check_conservation(traj: &Trajectory, bc: BoundaryCondition) -> DriftRecord {
    let f0 = &traj.fields[0];
    let grid = &f0.grid;
    let rel = |series: Vec<f64>| {
        let base = series[0];
        let scale = base.abs().max(f64::MIN_POSITIVE);
        series.iter().map(|x| (x - base).abs()).fold(0.0, f64::max) / scale
    };
    let mass = rel(traj.fields.iter().map(|f| f.mass()).collect());
    let energy = Some(rel(traj.fields.iter().map(|f| f.energy()).collect()));
    let center = grid.space.domain.center();
    let abs = Field {
        grid: grid.clone(),
        data: f0.data.iter().map(|x| x.abs()).collect(),
    };
    let lever = abs
        .global_moment_at(|x, v| (x - center).norm() * v.norm())
        .max(f64::MIN_POSITIVE);
    let angular_momentum = invariants(grid.space.domain.kind(), bc)
        .into_iter()
        .filter_map(|inv| match inv {
            Invariant::AngularMomentum(k) => {
                let vals: Vec<f64> = traj.fields.iter().map(|f| f.angular_momentum(Vec3::e(k))).collect();
                let d = vals.iter().map(|x| (x - vals[0]).abs()).fold(0.0, f64::max) / lever;
                Some((inv.name(), d))
            }
            _ => None,
        })
        .collect();
    DriftRecord {
        mass,
        energy,
        angular_momentum,
    }
}

/// A short phase-space segment `x0 + s dir`, `0 <= s <= length`, at fixed velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLine {
    pub start: Vec3,
    pub direction: Vec3,
    pub length: f64,
    pub velocity: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    /// Largest second difference along a probe line over the largest value on it.
    pub max_jump: f64,
    pub probed: usize,
    pub skipped: usize,
    pub notices: Vec<String>,
}

/// Samples `f` along each line at the cell spacing and reports the largest
/// normalized second difference. Lines entering the grazing collar
/// `{dist(x, boundary) < collar, |v . n| < collar}` are skipped.
pub fn continuity_probe(f: &Field, lines: &[ProbeLine], collar: f64) -> ContinuityReport {
    let space = &f.grid.space;
    let domain = &space.domain;
    let mut report = ContinuityReport {
        max_jump: 0.0,
        probed: 0,
        skipped: 0,
        notices: Vec::new(),
    };
    for (i, line) in lines.iter().enumerate() {
        let Some(dir) = line.direction.normalized() else {
            report.skipped += 1;
            report.notices.push(format!("line {i}: zero direction"));
            continue;
        };
        // slab fields vary in x_1 only
        let h = if space.is_slab() { space.dx.x() / dir.x().abs() } else { space.dx.x() };
        if !h.is_finite() {
            report.skipped += 1;
            report.notices.push(format!("line {i}: parallel to the slab walls"));
            continue;
        }
        let n = (line.length / h).floor() as usize + 1;
        if n < 3 {
            report.skipped += 1;
            report.notices.push(format!("line {i}: shorter than three samples"));
            continue;
        }
        let pts: Vec<Vec3> = (0..n).map(|s| line.start + dir * (s as f64 * h)).collect();
        let grazing = pts.iter().any(|&x| {
            let xb = domain.project_to_boundary(x);
            let near = (x - xb).norm() < collar || !domain.contains(x);
            near && line.velocity.dot(&domain.level_set_normal(xb)).abs() < collar
        });
        if grazing {
            report.skipped += 1;
            report.notices.push(format!("line {i}: crosses the grazing collar"));
            continue;
        }
        let vals: Option<Vec<f64>> = pts.iter().map(|&x| f.eval(x, line.velocity)).collect();
        let Some(vals) = vals else {
            report.skipped += 1;
            report.notices.push(format!("line {i}: velocity outside the grid"));
            continue;
        };
        let scale = vals.iter().fold(0.0, |a: f64, x| a.max(x.abs()));
        if scale == 0.0 {
            report.probed += 1;
            continue;
        }
        let jump = vals
            .windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
            .fold(0.0, f64::max);
        report.max_jump = report.max_jump.max(jump / scale);
        report.probed += 1;
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub rho_hat: f64,
    pub theta_hat: f64,
    pub min_value: f64,
    pub min_mass: f64,
    /// `sup_{t, x} int |v|^2 F dv`.
    pub max_local_energy: f64,
    pub pass: bool,
}

/// `(2 pi theta)^{-3/2} exp(-|v|^2 / (2 theta))`.
pub fn gaussian(theta: f64, v2: f64) -> f64 {
    (2.0 * PI * theta).powf(-1.5) * (-0.5 * v2 / theta).exp()
}

/// Fits `F >= rho (2 pi theta)^{-3/2} e^{-|v|^2 / 2 theta}` at every node with `t >= tau`
/// and `|v| <= V_max - 1`, after checking positive mass, bounded local energy and
/// `F >= -tol_pos`. For each `theta` the largest admissible `rho` is taken; `theta` maximizes
/// the mass of the bound on the fit region.
pub fn check_lower_bound(traj: &Trajectory, tau: f64, tol_pos: f64) -> Result<LowerBound> {
    let grid = traj.fields[0].grid.clone();
    let vg = &grid.velocity;
    let nv = vg.len();
    let mut min_value = f64::INFINITY;
    for (n, f) in traj.fields.iter().enumerate() {
        for (k, &x) in f.data.iter().enumerate() {
            if x < -tol_pos {
                return Err(KineticError::Negativity {
                    value: x,
                    cell: k / nv,
                    node: k % nv,
                    t: n as f64 * traj.dt,
                });
            }
            min_value = min_value.min(x);
        }
    }
    let min_mass = traj.fields.iter().map(|f| f.mass()).fold(f64::INFINITY, f64::min);
    let e2_owned: Vec<f64> = vg.nodes.iter().map(|v| v.norm_sq()).collect();
    let e2 = &e2_owned;
    let max_local_energy = traj
        .fields
        .iter()
        .flat_map(|f| {
            (0..f.ncell()).map(move |c| {
                let t: Vec<f64> = f.cell(c).iter().zip(e2).map(|(a, b)| a * b).collect();
                vg.integrate(&t)
            })
        })
        .fold(0.0, f64::max);
    let cut = vg.spec.v_max - 1.0;
    let nodes: Vec<usize> = (0..nv).filter(|&j| vg.nodes[j].norm() <= cut).collect();
    let mut floor = vec![f64::INFINITY; nv];
    for (n, f) in traj.fields.iter().enumerate() {
        if (n as f64) * traj.dt < tau - 1e-12 {
            continue;
        }
        for c in 0..f.ncell() {
            for &j in &nodes {
                floor[j] = floor[j].min(f.get(c, j));
            }
        }
    }
    let rho_at = |theta: f64| {
        nodes
            .iter()
            .map(|&j| floor[j] / gaussian(theta, e2[j]))
            .fold(f64::INFINITY, f64::min)
    };
    // rho alone is unbounded as theta grows; the pair is chosen to maximize the mass
    // the bound captures on the fit region
    let captured = |theta: f64| rho_at(theta) * nodes.iter().map(|&j| gaussian(theta, e2[j])).sum::<f64>() * vg.weight;
    let (rho_hat, theta_hat) = if nodes.iter().any(|&j| !(floor[j] > 0.0)) {
        (0.0, 0.0)
    } else {
        // dense logarithmic scan, then golden-section refinement around the best point
        let grid_n = 2001;
        let (lo, hi) = (0.02f64.ln(), 50.0f64.ln());
        let step = (hi - lo) / (grid_n - 1) as f64;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..grid_n {
            let r = captured((lo + i as f64 * step).exp());
            if r > best.0 {
                best = (r, i);
            }
        }
        let mut a = lo + (best.1 as f64 - 1.0) * step;
        let mut b = lo + (best.1 as f64 + 1.0) * step;
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if captured(c.exp()) >= captured(d.exp()) {
                b = d;
            } else {
                a = c;
            }
        }
        let s = 0.5 * (a + b);
        let theta = if captured(s.exp()) >= best.0 { s.exp() } else { (lo + best.1 as f64 * step).exp() };
        (rho_at(theta), theta)
    };
    Ok(LowerBound {
        rho_hat,
        theta_hat,
        min_value,
        min_mass,
        max_local_energy,
        pass: rho_hat > 0.0 && theta_hat > 0.0 && min_mass > 0.0 && max_local_energy.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn slab(cells: usize, n: usize) -> Arc<PhaseGrid> {
        let vg = Arc::new(VelocityGrid::new(VelocityGridSpec { n_per_dim: n, v_max: 6.0 }).unwrap());
        PhaseGrid::from_kind(DomainKind::Slab, cells, vg).unwrap()
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let e = parse_config(r#"{"schema_version": 1, "experiment": "chains", "bogus": 1}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(matches!(&e, HarnessError::Config { message, .. } if message.contains("bogus")));
        let e = parse_config(r#"{"schema_version": 1, "experiment": "chains", "solver": {"delta": 2.0}}"#).unwrap_err();
        assert!(matches!(&e, HarnessError::Config { key, .. } if key == "solver.delta"), "{e}");
        let e = parse_config(r#"{"schema_version": 1, "experiment": "chains", "solver": {"dtt": 2.0}}"#).unwrap_err();
        assert!(matches!(&e, HarnessError::Config { key, .. } if key == "solver.dtt"), "{e}");
        let e = parse_config(r#"{"schema_version": 2, "experiment": "chains"}"#).unwrap_err();
        assert!(matches!(&e, HarnessError::Config { key, .. } if key == "schema_version"));
        let e = parse_config(r#"{"schema_version": 1, "experiment": "chains", "velocity": {"n_per_dim": 7, "v_max": 6}}"#)
            .unwrap_err();
        assert!(matches!(&e, HarnessError::Config { key, .. } if key == "velocity.n_per_dim"));
        let ok = parse_config(r#"{"schema_version": 1, "experiment": "chains"}"#).unwrap();
        assert_eq!(ok, ExperimentConfig::new(ExperimentTag::Chains));
    }

    #[test]
    fn sweep_sets_nested_keys() {
        let text = r#"{"schema_version": 1, "experiment": "splitting_constants", "output_dir": "o"}"#;
        let cfgs = sweep_configs(text, "solver.delta", &["0.2".into(), "0.3".into()]).unwrap();
        assert_eq!(cfgs[1].1.solver.delta, 0.3);
        assert_eq!(cfgs[0].1.output_dir, Some(PathBuf::from("o/solver.delta=0.2")));
        assert!(sweep_configs(text, "solver.delta", &["7".into()]).is_err());
    }

    #[test]
    fn csv_keeps_seventeen_digits() {
        let mut s = Series::new("x", &["a", "b"]);
        s.push(vec![0.1, 1.0 / 3.0]);
        let csv = s.to_csv();
        let line = csv.lines().nth(1).unwrap();
        let back: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(back, vec![0.1, 1.0 / 3.0]);
    }

    #[test]
    fn lower_bound_of_maxwellians() {
        let g = slab(4, 12);
        let mu = Field::from_fn(g.clone(), |_, v| maxwellian(v));
        let traj = Trajectory { dt: 0.5, fields: vec![mu.clone(); 3] };
        let lb = check_lower_bound(&traj, 1.0, 1e-8).unwrap();
        assert_abs_diff_eq!(lb.rho_hat, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(lb.theta_hat, 1.0, epsilon = 1e-6);
        let half = Trajectory { dt: 0.5, fields: vec![mu.scaled(0.5); 3] };
        let lb = check_lower_bound(&half, 1.0, 1e-8).unwrap();
        assert_abs_diff_eq!(lb.rho_hat, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(lb.theta_hat, 1.0, epsilon = 1e-6);
        let mut neg = mu.clone();
        neg.data[5] = -1e-6;
        let bad = Trajectory { dt: 0.5, fields: vec![neg] };
        assert!(matches!(check_lower_bound(&bad, 0.0, 1e-8), Err(KineticError::Negativity { node: 5, .. })));
    }

    #[test]
    fn continuity_of_smooth_fields_improves_at_second_order() {
        let v = Vec3::new(0.5, 0.5, -0.5);
        let line = ProbeLine {
            start: Vec3::new(0.2, 0.5, 0.5),
            direction: Vec3::e(0),
            length: 0.6,
            velocity: v,
        };
        let jump = |cells: usize| {
            let f = Field::from_fn(slab(cells, 8), |x, v| maxwellian(v) * (2.0 + (3.0 * x.x()).sin()));
            continuity_probe(&f, &[line], 1e-3).max_jump
        };
        let (a, b) = (jump(32), jump(64));
        assert!(a > 0.0 && (a / b - 4.0).abs() < 0.5, "{a} {b}");
        let grazing = ProbeLine {
            start: Vec3::new(0.0, 0.5, 0.5),
            velocity: Vec3::new(0.0, 0.5, 0.5),
            ..line
        };
        let f = Field::from_fn(slab(8, 8), |_, v| maxwellian(v));
        let r = continuity_probe(&f, &[grazing], 0.05);
        assert_eq!((r.probed, r.skipped), (0, 1));
    }

    #[test]
    fn drift_of_a_constant_trajectory_is_zero() {
        let g = slab(4, 8);
        let mu = Field::maxwellian(g);
        let traj = Trajectory { dt: 0.1, fields: vec![mu.clone(), mu] };
        let d = check_conservation(&traj, BoundaryCondition::Specular);
        assert_eq!(d.mass, 0.0);
        assert_eq!(d.energy, Some(0.0));
    }

    #[test]
    fn slab_oracle_matches_the_traced_semigroup() {
        let model = CollisionModel::hard_spheres();
        let s = specular_semigroup_summary(&Domain::slab(), &model, &[0.5, 2.0], 50, 3);
        assert!(s.oracle_defect.unwrap() < 1e-10);
        assert!(s.decay_ratio.iter().all(|(_, r)| *r <= 1.0));
    }

    #[test]
    fn initial_perturbation_is_sized_and_positive_around_mu() {
        let g = slab(4, 12);
        let m = Weight::Polynomial { k: 10.0 };
        let f0 = initial_perturbation(&g, &m, 1e-2, InitialProfile::Modulated);
        assert_abs_diff_eq!(sup_weighted(&f0, &m.on_grid(&g.velocity)), 1e-2, epsilon = 1e-16);
        let big = f0.add(&Field::maxwellian(g));
        assert!(big.data.iter().all(|x| *x > 0.0));
    }
}
