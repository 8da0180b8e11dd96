//! Batch pipeline behind the `mot-bridge` binary: instance files in,
//! JSON reports and tidy CSV out.
//!
//! Every command reads one instance JSON (`--instance`), an optional
//! overrides JSON (`--config`) and writes into `--out`. Reports contain no
//! timings or paths, so identical inputs give byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fokker_planck::{simulate, Control, EnsembleSummary, Sampling, SimulationSetup};
use crate::hamiltonian::{legendre, symmetric_a_grid, LagrangianSpec};
use crate::measures::{breeden_litzenberger, convex_order, convex_order_lower, CallCurve, Grid1D, GridMeasure};
use crate::mot_dual::{ascend, dual_objective, optimal_flow, AscentConfig, AscentStatus, DualState, MotProblem};
use crate::primal_oracle::tree::{solve_discrete_sb, PathTree, SbTargets};
use crate::primal_oracle::{solve_discrete_mot, DiscreteMotInstance};
use crate::sb_dual::{optimal_density_report, sb_ascend, sb_dual_objective, tilted_flow, DensityReport, SbDualState, SbProblem};
use crate::svm_models::SvmSpec;
use crate::vix::{compute_phi, post_t1_family, pre_t1_value, vix_index, vix_put_bound, ConvexPiecewise, PutBoundReport, VixGrids, VixInstance};

pub const EXIT_OK: i32 = 0;
/// Bad input or I/O.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PLATEAU: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) | Error::Arbitrage { .. } => EXIT_INFEASIBLE,
        Error::Truncation { .. }
        | Error::OutOfRange { .. }
        | Error::Cfl { .. }
        | Error::Stencil(_)
        | Error::EnlargeDomain { .. }
        | Error::Refine(_)
        | Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "mot-bridge", version, about = "Martingale transport and Schrödinger bridge calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Recover marginals from call-price CSVs.
    Ingest(RunArgs),
    /// Run the dual ascent of an mot, sb or vix instance.
    Calibrate(RunArgs),
    /// Dual ascent against the discrete primal oracle.
    Verify(RunArgs),
    /// Monte Carlo paths under the calibrated bridge.
    Simulate(RunArgs),
    /// Convex order between two measures.
    CheckOrder(RunArgs),
}

impl Command {
    pub fn args(&self) -> &RunArgs {
        match self {
            Self::Ingest(a) | Self::Calibrate(a) | Self::Verify(a) | Self::Simulate(a) | Self::CheckOrder(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ingest(_) => "ingest",
            Self::Calibrate(_) => "calibrate",
            Self::Verify(_) => "verify",
            Self::Simulate(_) => "simulate",
            Self::CheckOrder(_) => "check-order",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// JSON file of solver overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

/// Solver overrides from `--config`; flags win over file values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub step: Option<f64>,
    pub min_step: Option<f64>,
    pub bound: Option<f64>,
    pub lipschitz: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    /// Relative gap accepted by `verify`.
    pub gap_tol: Option<f64>,
    pub paths: Option<usize>,
    /// Worker threads; results do not depend on it.
    pub threads: Option<usize>,
}

/// Resolved command line.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: &'static str,
    pub instance: PathBuf,
    pub overrides: Overrides,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_command(cmd: &Command) -> Result<Self> {
        let a = cmd.args();
        if !a.instance.is_file() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("instance file {} not found", a.instance.display()),
            )));
        }
        let mut overrides: Overrides = match &a.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => Overrides::default(),
        };
        if a.tol.is_some() {
            overrides.tol = a.tol;
        }
        if a.max_iters.is_some() {
            overrides.max_iters = a.max_iters;
        }
        for (name, v) in [("tol", overrides.tol), ("gap_tol", overrides.gap_tol)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::InvalidParameter {
                        name,
                        value: v,
                        constraint: "must be positive".into(),
                    });
                }
            }
        }
        Ok(Self {
            command: cmd.name(),
            instance: a.instance.clone(),
            overrides,
            seed: a.seed,
            out: a.out.clone(),
        })
    }

    fn ascent(&self) -> AscentConfig {
        let d = AscentConfig::default();
        let o = &self.overrides;
        AscentConfig {
            step: o.step.unwrap_or(d.step),
            min_step: o.min_step.unwrap_or(d.min_step),
            max_iters: o.max_iters.unwrap_or(d.max_iters),
            tol: o.tol.unwrap_or(d.tol),
            bound: o.bound.unwrap_or(d.bound),
            lipschitz: o.lipschitz.unwrap_or(d.lipschitz),
        }
    }

    fn base_dir(&self) -> PathBuf {
        self.instance.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Uniform { lo: f64, hi: f64, n: usize },
    Nodes { nodes: Vec<f64> },
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid1D> {
        match self {
            Self::Uniform { lo, hi, n } => Grid1D::uniform(*lo, *hi, *n),
            Self::Nodes { nodes } => Grid1D::new(nodes.clone()),
        }
    }
}

/// A measure given by atoms (split onto the grid, mean preserving), by
/// grid weights, by a measure JSON file, or as the reference-model law.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSpec {
    Atoms { atoms: Vec<(f64, f64)> },
    Weights { weights: Vec<f64> },
    File { file: PathBuf },
    Reference { reference: bool },
}

impl MeasureSpec {
    pub fn build(&self, grid: &Grid1D, base: &Path) -> Result<GridMeasure> {
        match self {
            Self::Atoms { atoms } => GridMeasure::project_atoms(grid.clone(), atoms),
            Self::Weights { weights } => GridMeasure::new(grid.clone(), weights.clone()),
            Self::File { file } => {
                let m = GridMeasure::from_json(&fs::read_to_string(base.join(file))?)?;
                if m.grid() == grid {
                    Ok(m)
                } else {
                    GridMeasure::project_atoms(grid.clone(), &m.support().collect::<Vec<_>>())
                }
            }
            Self::Reference { .. } => Err(Error::InvalidMeasure("reference law is only defined for sb instances".into())),
        }
    }

    fn is_reference(&self) -> bool {
        matches!(self, Self::Reference { reference: true })
    }
}

fn default_key() -> String {
    "quadratic".into()
}

fn default_b_max() -> f64 {
    40.0
}

fn default_b_points() -> usize {
    4001
}

fn default_a_points() -> usize {
    2001
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(default = "default_key")]
    pub key: String,
    #[serde(default)]
    pub param: Option<f64>,
    #[serde(default = "default_b_max")]
    pub b_max: f64,
    #[serde(default = "default_b_points")]
    pub b_points: usize,
    /// Half-width of the `a`-table; defaults to `1.8 b_max`.
    #[serde(default)]
    pub a_half_width: Option<f64>,
    #[serde(default = "default_a_points")]
    pub a_points: usize,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            key: default_key(),
            param: None,
            b_max: default_b_max(),
            b_points: default_b_points(),
            a_half_width: None,
            a_points: default_a_points(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotOracleSpec {
    pub grid: GridSpec,
    pub steps: (usize, usize),
}

fn cfl_mot() -> f64 {
    0.9
}

fn cfl_plane() -> f64 {
    0.5
}

fn default_paths() -> usize {
    20_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotFile {
    pub grid: GridSpec,
    pub times: (f64, f64, f64),
    pub mu0: MeasureSpec,
    pub mu1: MeasureSpec,
    pub mu2: MeasureSpec,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default = "cfl_mot")]
    pub cfl: f64,
    #[serde(default)]
    pub oracle: Option<MotOracleSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub steps: (usize, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbFile {
    pub model: SvmSpec,
    pub x_grid: GridSpec,
    pub y_grid: GridSpec,
    pub times: (f64, f64, f64),
    pub mu1: MeasureSpec,
    pub mu2: MeasureSpec,
    #[serde(default = "cfl_plane")]
    pub cfl: f64,
    #[serde(default)]
    pub oracle: Option<TreeSpec>,
    #[serde(default = "default_paths")]
    pub paths: usize,
}

fn delta_max() -> f64 {
    5.0
}

fn n_delta() -> usize {
    101
}

fn v_nodes() -> usize {
    201
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VixFile {
    pub model: SvmSpec,
    pub price_grid: GridSpec,
    pub times: (f64, f64, f64),
    pub mu1: MeasureSpec,
    pub mu2: MeasureSpec,
    pub mu3_grid: GridSpec,
    pub mu3: MeasureSpec,
    pub w_grid: GridSpec,
    pub y_grid: GridSpec,
    #[serde(default = "delta_max")]
    pub delta_max: f64,
    #[serde(default = "n_delta")]
    pub n_delta: usize,
    #[serde(default = "v_nodes")]
    pub v_nodes: usize,
    #[serde(default = "cfl_plane")]
    pub cfl: f64,
    /// Potentials on the `μ1`, `μ2` grids; zero when absent.
    #[serde(default)]
    pub u1: Option<Vec<f64>>,
    #[serde(default)]
    pub u2: Option<Vec<f64>>,
    #[serde(default)]
    pub u3: Option<ConvexPiecewise>,
    /// VIX strikes of the put table; by default 21 levels up to the VIX of
    /// the top `μ3` node.
    #[serde(default)]
    pub strikes: Option<Vec<f64>>,
    #[serde(default = "default_paths")]
    pub paths: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveFile {
    pub maturity: f64,
    pub csv: PathBuf,
    #[serde(default)]
    pub forward: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestFile {
    pub grid: GridSpec,
    pub curves: Vec<CurveFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderFile {
    pub grid: GridSpec,
    pub mu: MeasureSpec,
    pub nu: MeasureSpec,
    /// Convex-lower order on `[0, inf)` instead of the convex order.
    #[serde(default)]
    pub lower: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Instance {
    Mot(MotFile),
    Sb(SbFile),
    Vix(VixFile),
    Ingest(IngestFile),
    Order(OrderFile),
}

impl Instance {
    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Mot(_) => "mot",
            Self::Sb(_) => "sb",
            Self::Vix(_) => "vix",
            Self::Ingest(_) => "ingest",
            Self::Order(_) => "order",
        }
    }
}

/// Files written by a command: name and contents.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub files: Vec<(String, String)>,
    /// Name of the report echoed on stdout.
    pub report: Option<String>,
    pub exit: i32,
}

impl Outputs {
    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.files.push((name.into(), s));
        Ok(())
    }

    fn report(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.report = Some(name.into());
        self.json(name, value)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.files.push((name.into(), String::from_utf8_lossy(&bytes).into_owned()));
        Ok(())
    }

    fn raw(&mut self, name: &str, contents: String) {
        self.files.push((name.into(), contents));
    }

    pub fn report_text(&self) -> Option<&str> {
        self.report.as_deref().and_then(|n| self.get(n))
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, contents) in &self.files {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

fn status_name(s: AscentStatus) -> &'static str {
    match s {
        AscentStatus::Converged => "converged",
        AscentStatus::Plateau => "plateau",
        AscentStatus::MaxIters => "max-iters",
    }
}

fn status_exit(s: AscentStatus) -> i32 {
    match s {
        AscentStatus::Converged => EXIT_OK,
        AscentStatus::Plateau => EXIT_PLATEAU,
        AscentStatus::MaxIters => EXIT_NUMERICAL,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    pub kind: &'static str,
    pub status: &'static str,
    pub exit_code: i32,
    pub dual_value: f64,
    pub residual1: f64,
    pub residual2: f64,
    pub iterations: usize,
    /// Bridge only: entropy of the tilted flow and the duality-gap bound
    /// `2M(|r1|₁ + |r2|₁)`.
    pub entropy: Option<f64>,
    pub improvement_bound: Option<f64>,
    /// Largest drift of the flow's price mean away from its start.
    pub mean_drift: f64,
    pub grid: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

#[derive(Serialize)]
struct PotentialRow {
    x: f64,
    u1: f64,
    u2: f64,
}

#[derive(Serialize)]
struct MarginalRow {
    t: f64,
    x: f64,
    mass: f64,
}

fn potentials_csv(out: &mut Outputs, grid: &Grid1D, u1: &[f64], u2: &[f64]) -> Result<()> {
    out.csv(
        "potentials.csv",
        grid.nodes().iter().zip(u1.iter().zip(u2)).map(|(&x, (&a, &b))| PotentialRow { x, u1: a, u2: b }),
    )
}

fn flow_csv(out: &mut Outputs, flow: &crate::fokker_planck::FlowResult) -> Result<f64> {
    let mut rows = Vec::new();
    let mut drift: f64 = 0.0;
    let mut m0 = None;
    for k in 0..flow.marginals.len() {
        let m = flow.marginal(k)?;
        let start = *m0.get_or_insert(m.mean());
        drift = drift.max((m.mean() - start).abs());
        for (&x, &w) in m.nodes().iter().zip(m.weights()) {
            rows.push(MarginalRow { t: flow.times[k], x, mass: w });
        }
    }
    out.csv("flow.csv", rows)?;
    Ok(drift)
}

fn mot_problem(f: &MotFile, base: &Path) -> Result<MotProblem> {
    let grid = f.grid.build()?;
    let mu0 = f.mu0.build(&grid, base)?;
    let mu1 = f.mu1.build(&grid, base)?;
    let mu2 = f.mu2.build(&grid, base)?;
    let spec = LagrangianSpec::from_key(&f.cost.key, f.cost.param, f.cost.b_max)?;
    let hw = f.cost.a_half_width.unwrap_or(1.8 * f.cost.b_max);
    let h = legendre(&spec, &symmetric_a_grid(hw, f.cost.a_points), f.cost.b_max, f.cost.b_points)?;
    MotProblem::new(mu0, mu1, mu2, f.times, h, f.cfl)
}

fn calibrate_mot(f: &MotFile, cfg: &RunConfig) -> Result<(Outputs, DualState, MotProblem)> {
    let p = mot_problem(f, &cfg.base_dir())?;
    let grid = p.grid().clone();
    let st = ascend(DualState::zero(grid.len()), &p, &cfg.ascent())?;
    let (_, sol) = dual_objective(&p, &st.u1, &st.u2)?;
    let mut out = Outputs::default();
    let drift = flow_csv(&mut out, &optimal_flow(&p, &sol)?)?;
    let (r1, r2) = st.residual_norms();
    let report = CalibrationReport {
        kind: "mot",
        status: status_name(st.status),
        exit_code: status_exit(st.status),
        dual_value: st.dual_value,
        residual1: r1,
        residual2: r2,
        iterations: st.iterations(),
        entropy: None,
        improvement_bound: None,
        mean_drift: drift,
        grid: grid.nodes().to_vec(),
        u1: st.u1.clone(),
        u2: st.u2.clone(),
    };
    out.report("result.json", &report)?;
    out.csv("trace.csv", st.history.iter().copied())?;
    potentials_csv(&mut out, &grid, &st.u1, &st.u2)?;
    out.exit = report.exit_code;
    Ok((out, st, p))
}

/// Builds the bridge problem; `reference` targets are replaced by the
/// untilted flow's marginals.
pub fn sb_problem(f: &SbFile, base: &Path) -> Result<SbProblem> {
    let g = f.x_grid.build()?;
    let build = |m: &MeasureSpec| -> Result<GridMeasure> {
        if m.is_reference() {
            GridMeasure::from_atoms(g.clone(), &[(f.model.x0, 1.0)])
        } else {
            m.build(&g, base)
        }
    };
    let mut p = SbProblem::new(f.model.clone(), build(&f.mu1)?, build(&f.mu2)?, f.times, f.y_grid.build()?, f.cfl)?;
    if f.mu1.is_reference() || f.mu2.is_reference() {
        let zero = vec![vec![0.0; p.grid.len()]; p.time.n_steps()];
        let flow = crate::fokker_planck::evolve_2d_with(p.generator(), &zero, &p.initial()?, &p.time)?;
        if f.mu1.is_reference() {
            p.mu1 = flow.marginal(p.time.jump_node())?;
        }
        if f.mu2.is_reference() {
            p.mu2 = flow.last()?;
        }
    }
    Ok(p)
}

fn calibrate_sb(f: &SbFile, cfg: &RunConfig) -> Result<(Outputs, SbDualState, SbProblem)> {
    let p = sb_problem(f, &cfg.base_dir())?;
    let ascent = cfg.ascent();
    let st = sb_ascend(SbDualState::zero(p.grid.nx()), &p, &ascent)?;
    let (_, sol) = sb_dual_objective(&p, &st.u1, &st.u2)?;
    let mut out = Outputs::default();
    let drift = flow_csv(&mut out, &tilted_flow(&p, &sol)?)?;
    let (r1, r2) = st.residual_norms();
    let report = CalibrationReport {
        kind: "sb",
        status: status_name(st.status),
        exit_code: status_exit(st.status),
        dual_value: st.dual_value,
        residual1: r1,
        residual2: r2,
        iterations: st.history.len(),
        entropy: Some(st.entropy),
        improvement_bound: Some(st.improvement_bound(ascent.bound)),
        mean_drift: drift,
        grid: p.grid.x.nodes().to_vec(),
        u1: st.u1.clone(),
        u2: st.u2.clone(),
    };
    out.report("result.json", &report)?;
    out.csv("trace.csv", st.history.iter().copied())?;
    potentials_csv(&mut out, &p.grid.x, &st.u1, &st.u2)?;
    out.exit = report.exit_code;
    Ok((out, st, p))
}

#[derive(Clone, Debug, Serialize)]
pub struct PhiBoundsCheck {
    pub nodes: usize,
    pub max_violation: f64,
    pub concavity_violation: f64,
    pub delta_lipschitz: f64,
    pub delta_lipschitz_bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VixReport {
    pub kind: &'static str,
    pub dual_value: f64,
    pub value_at_start: f64,
    pub pairing: [f64; 3],
    pub phi_bounds_check: PhiBoundsCheck,
    /// Reference-law log-contract samples checked against `μ3`.
    pub put_bound_table: PutBoundReport,
    pub exit_code: i32,
}

#[derive(Serialize)]
struct PhiRow {
    w: f64,
    y: f64,
    phi: f64,
    lower: f64,
    upper: f64,
    v_star: f64,
    delta_star: f64,
}

pub fn vix_instance(f: &VixFile, base: &Path) -> Result<VixInstance> {
    let g = f.price_grid.build()?;
    let inst = VixInstance {
        spec: f.model.clone(),
        mu1: f.mu1.build(&g, base)?,
        mu2: f.mu2.build(&g, base)?,
        mu3: f.mu3.build(&f.mu3_grid.build()?, base)?,
        t0: f.times.0,
        t1: f.times.1,
        t2: f.times.2,
    };
    inst.validate()?;
    Ok(inst)
}

fn calibrate_vix(f: &VixFile, cfg: &RunConfig) -> Result<Outputs> {
    let inst = vix_instance(f, &cfg.base_dir())?;
    let grids = VixGrids::new(&inst, f.w_grid.build()?, f.y_grid.build()?, f.delta_max, f.n_delta, f.v_nodes, f.cfl)?;
    let n1 = inst.mu1.grid().len();
    let u1 = f.u1.clone().unwrap_or_else(|| vec![0.0; n1]);
    let u2 = f.u2.clone().unwrap_or_else(|| vec![0.0; n1]);
    let u3 = f.u3.clone().unwrap_or_else(ConvexPiecewise::zero);
    let family = post_t1_family(&inst, &u2, &grids)?;
    let smax = inst.spec.model.sigma_tilde_max((grids.y.lo(), grids.y.hi()));
    let phi = compute_phi(&family, &u3, grids.v_nodes, grids.v_max, smax)?;
    let pre = pre_t1_value(&inst, &phi, &u1, &grids.time)?;
    let start = phi.grid.interpolate(pre.initial(), inst.spec.x0.ln(), inst.spec.y0);
    let pairing = [inst.mu1.integrate(&u1), inst.mu2.integrate(&u2), u3.integrate(&inst.mu3)];

    // reference log-contract at T1 from simulated states
    let v0: Vec<f64> = phi
        .grid
        .broadcast_x(phi.grid.x.nodes())
        .iter()
        .zip(&family.expected_log)
        .map(|(w, e)| w - e)
        .collect();
    let n_paths = cfg.overrides.paths.unwrap_or(f.paths);
    let setup = SimulationSetup {
        model: &inst.spec.model,
        x0: inst.spec.x0,
        y0: inst.spec.y0,
        time: &grids.time,
        control: None,
        sampling: Sampling::Reference,
        record: vec![grids.time.jump_node()],
    };
    let ens = simulate(&setup, n_paths, cfg.seed)?;
    let r = ens.record_nodes.iter().position(|&k| k == grids.time.jump_node()).unwrap_or(0);
    let samples: Vec<f64> = ens.x[r]
        .iter()
        .zip(&ens.y[r])
        .map(|(&x, &y)| phi.grid.interpolate(&v0, x.ln(), y).max(0.0))
        .collect();
    let strikes = match &f.strikes {
        Some(s) => s.clone(),
        None => {
            let g3 = inst.mu3.grid();
            let hi = vix_index(g3.hi(), inst.t1, inst.t2)?;
            (1..=21).map(|i| hi * i as f64 / 21.0).collect()
        }
    };
    let table = vix_put_bound(&inst.mu3, &samples, &strikes, inst.t1, inst.t2)?;
    let check = PhiBoundsCheck {
        nodes: phi.values.len(),
        max_violation: phi.bound_violation,
        concavity_violation: family.concavity_violation,
        delta_lipschitz: family.delta_lipschitz,
        delta_lipschitz_bound: family.delta_lipschitz_bound,
        pass: phi.bound_violation == 0.0 && family.concavity_violation <= 1e-9,
    };
    let exit = if check.pass { EXIT_OK } else { EXIT_NUMERICAL };
    let report = VixReport {
        kind: "vix",
        dual_value: start - pairing.iter().sum::<f64>(),
        value_at_start: start,
        pairing,
        phi_bounds_check: check,
        put_bound_table: table,
        exit_code: exit,
    };
    let mut out = Outputs::default();
    out.report("result.json", &report)?;
    let g = &phi.grid;
    out.csv(
        "phi.csv",
        (0..g.len()).map(|p| PhiRow {
            w: g.x.nodes()[p / g.ny()],
            y: g.y.nodes()[p % g.ny()],
            phi: phi.values[p],
            lower: phi.lower[p],
            upper: phi.upper[p],
            v_star: phi.v_star[p],
            delta_star: phi.delta_star[p],
        }),
    )?;
    out.exit = exit;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub kind: &'static str,
    pub dual: f64,
    pub primal: Option<f64>,
    pub gap: Option<f64>,
    pub relative_gap: Option<f64>,
    /// `dual <= primal + 1e-6`.
    pub weak_duality: bool,
    pub gap_tol: f64,
    pub pass: bool,
    pub ascent_status: &'static str,
    /// Why the oracle could not produce a primal value, if it failed.
    pub certificate: Option<String>,
}

/// `|primal - dual| / max(|primal|, |dual|)`, zero when both vanish.
pub fn relative_gap(dual: f64, primal: f64) -> f64 {
    let gap = (primal - dual).abs();
    if gap <= 1e-12 {
        0.0
    } else {
        gap / primal.abs().max(dual.abs())
    }
}

fn verdict(kind: &'static str, dual: f64, status: AscentStatus, oracle: Result<f64>, gap_tol: f64) -> Result<(VerifyReport, i32)> {
    let (primal, certificate) = match oracle {
        Ok(v) => (Some(v), None),
        Err(e @ (Error::Infeasible(_) | Error::Domain(_) | Error::Numerical(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let gap = primal.map(|p| p - dual);
    let rel = primal.map(|p| relative_gap(dual, p));
    let weak = primal.is_some_and(|p| dual <= p + 1e-6);
    let pass = weak && rel.is_some_and(|r| r <= gap_tol);
    let exit = if certificate.is_some() {
        EXIT_INFEASIBLE
    } else if pass {
        EXIT_OK
    } else {
        EXIT_NUMERICAL
    };
    Ok((
        VerifyReport {
            kind,
            dual,
            primal,
            gap,
            relative_gap: rel,
            weak_duality: weak,
            gap_tol,
            pass,
            ascent_status: status_name(status),
            certificate,
        },
        exit,
    ))
}

fn verify_mot(f: &MotFile, cfg: &RunConfig) -> Result<Outputs> {
    let (_, st, p) = calibrate_mot(f, cfg)?;
    let spec = f
        .oracle
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter {
            name: "oracle",
            value: f64::NAN,
            constraint: "verify needs an oracle grid and step counts".into(),
        })?;
    let og = spec.grid.build()?;
    let onto = |m: &GridMeasure| GridMeasure::project_atoms(og.clone(), &m.support().collect::<Vec<_>>());
    let oracle = (|| {
        let inst = DiscreteMotInstance {
            grid: og.clone(),
            t0: p.t0,
            t1: p.t1,
            t2: p.t2,
            steps: spec.steps,
            mu0: onto(&p.mu0)?,
            mu1: onto(&p.mu1)?,
            mu2: onto(&p.mu2)?,
            cost: p.hamiltonian.spec().cost.clone(),
        };
        Ok(solve_discrete_mot(&inst)?.value)
    })();
    let (report, exit) = verdict("mot", st.dual_value, st.status, oracle, cfg.overrides.gap_tol.unwrap_or(0.05))?;
    let mut out = Outputs::default();
    out.report("verify.json", &report)?;
    out.exit = exit;
    Ok(out)
}

fn verify_sb(f: &SbFile, cfg: &RunConfig) -> Result<Outputs> {
    let (_, st, p) = calibrate_sb(f, cfg)?;
    let steps = f.oracle.as_ref().map(|o| o.steps).unwrap_or((2, 2));
    let oracle = (|| {
        let tree = PathTree::trinomial(&p.spec.model, p.spec.x0, p.spec.y0, (p.t0, p.t1, p.t2), steps)?;
        // reference targets mean the tree's own reference law
        let pick = |spec: &MeasureSpec, mu: &GridMeasure, level: usize| {
            if spec.is_reference() {
                tree.x_marginal(&tree.p0, level, mu.grid())
            } else {
                Ok(mu.clone())
            }
        };
        let mu1 = match tree.t1_level {
            Some(l) if p.uses_mu1() => Some(pick(&f.mu1, &p.mu1, l)?),
            _ => None,
        };
        let targets = SbTargets {
            mu1,
            mu2: pick(&f.mu2, &p.mu2, tree.depth())?,
            mu3: None,
        };
        Ok(solve_discrete_sb(&tree, &targets)?.value)
    })();
    let (report, exit) = verdict("sb", st.dual_value, st.status, oracle, cfg.overrides.gap_tol.unwrap_or(0.05))?;
    let mut out = Outputs::default();
    out.report("verify.json", &report)?;
    out.exit = exit;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderCheck {
    pub first: String,
    pub second: String,
    pub holds: bool,
    pub max_violation: f64,
    pub worst_strike: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct IngestReport {
    pub files: Vec<String>,
    pub maturities: Vec<f64>,
    pub means: Vec<f64>,
    pub order_checks: Vec<OrderCheck>,
    /// Static-arbitrage failure of a curve, with the offending file.
    pub violation: Option<String>,
    pub pass: bool,
}

fn ingest(f: &IngestFile, cfg: &RunConfig) -> Result<Outputs> {
    let grid = f.grid.build()?;
    let base = cfg.base_dir();
    let mut curves = f.curves.clone();
    curves.sort_by(|a, b| a.maturity.total_cmp(&b.maturity));
    let mut out = Outputs::default();
    let mut report = IngestReport {
        files: Vec::new(),
        maturities: Vec::new(),
        means: Vec::new(),
        order_checks: Vec::new(),
        violation: None,
        pass: true,
    };
    let mut measures: Vec<GridMeasure> = Vec::new();
    for (i, c) in curves.iter().enumerate() {
        let mut curve = CallCurve::from_csv_path(c.maturity, base.join(&c.csv))?;
        curve.forward = c.forward;
        match breeden_litzenberger(&curve, &grid) {
            Ok(m) => {
                let name = format!("mu_{i}.json");
                out.raw(&name, m.to_json()? + "\n");
                report.files.push(name);
                report.maturities.push(c.maturity);
                report.means.push(m.mean());
                measures.push(m);
            }
            Err(e @ (Error::Arbitrage { .. } | Error::InsufficientStrikes(_))) => {
                report.violation = Some(format!("{}: {e}", c.csv.display()));
                report.pass = false;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    for (i, w) in measures.windows(2).enumerate() {
        let r = convex_order(&w[0], &w[1]);
        report.pass &= r.holds;
        report.order_checks.push(OrderCheck {
            first: report.files[i].clone(),
            second: report.files[i + 1].clone(),
            holds: r.holds,
            max_violation: r.max_violation,
            worst_strike: r.worst_strike,
        });
    }
    out.exit = if report.pass { EXIT_OK } else { EXIT_INFEASIBLE };
    out.report("ingest_report.json", &report)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderReportOut {
    pub lower: bool,
    pub holds: bool,
    pub max_violation: f64,
    pub worst_strike: f64,
    pub mean_mu: f64,
    pub mean_nu: f64,
}

fn check_order(f: &OrderFile, cfg: &RunConfig) -> Result<Outputs> {
    let g = f.grid.build()?;
    let base = cfg.base_dir();
    let mu = f.mu.build(&g, &base)?;
    let nu = f.nu.build(&g, &base)?;
    let r = if f.lower { convex_order_lower(&mu, &nu)? } else { convex_order(&mu, &nu) };
    let mut out = Outputs::default();
    out.report(
        "order.json",
        &OrderReportOut {
            lower: f.lower,
            holds: r.holds,
            max_violation: r.max_violation,
            worst_strike: r.worst_strike,
            mean_mu: mu.mean(),
            mean_nu: nu.mean(),
        },
    )?;
    out.exit = if r.holds { EXIT_OK } else { EXIT_INFEASIBLE };
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationReport {
    pub calibration_status: &'static str,
    pub dual_value: f64,
    pub density: DensityReport,
    pub tilted: EnsembleSummary,
}

fn simulate_sb(f: &SbFile, cfg: &RunConfig) -> Result<Outputs> {
    let (mut out, st, p) = calibrate_sb(f, cfg)?;
    out.files.retain(|(n, _)| n == "potentials.csv");
    let (_, sol) = sb_dual_objective(&p, &st.u1, &st.u2)?;
    let n = cfg.overrides.paths.unwrap_or(f.paths);
    let density = optimal_density_report(&p, &sol, n, cfg.seed)?;
    let setup = SimulationSetup {
        model: &p.spec.model,
        x0: p.spec.x0,
        y0: p.spec.y0,
        time: &p.time,
        control: Some(Control { solution: &sol }),
        sampling: Sampling::Tilted,
        record: vec![p.time.jump_node(), p.time.n_steps()],
    };
    let ens = simulate(&setup, n, cfg.seed)?;
    let summary = ens.summary();
    out.csv("moments.csv", summary.moments.iter().cloned())?;
    let report = SimulationReport {
        calibration_status: status_name(st.status),
        dual_value: st.dual_value,
        density,
        tilted: summary,
    };
    out.report("simulation.json", &report)?;
    out.exit = if report.density.failure.is_some() { EXIT_NUMERICAL } else { EXIT_OK };
    Ok(out)
}

/// Runs one command without touching the file system beyond reading
/// inputs. Errors that map to an exit code are returned as `Err`.
pub fn execute(cmd: &Command) -> Result<Outputs> {
    let cfg = RunConfig::from_command(cmd)?;
    let inst = Instance::from_path(&cfg.instance)?;
    let run = || -> Result<Outputs> {
        match (cmd, &inst) {
            (Command::Ingest(_), Instance::Ingest(f)) => ingest(f, &cfg),
            (Command::Calibrate(_), Instance::Mot(f)) => Ok(calibrate_mot(f, &cfg)?.0),
            (Command::Calibrate(_), Instance::Sb(f)) => Ok(calibrate_sb(f, &cfg)?.0),
            (Command::Calibrate(_), Instance::Vix(f)) => calibrate_vix(f, &cfg),
            (Command::Verify(_), Instance::Mot(f)) => verify_mot(f, &cfg),
            (Command::Verify(_), Instance::Sb(f)) => verify_sb(f, &cfg),
            (Command::Simulate(_), Instance::Sb(f)) => simulate_sb(f, &cfg),
            (Command::CheckOrder(_), Instance::Order(f)) => check_order(f, &cfg),
            (c, i) => Err(Error::InvalidParameter {
                name: "kind",
                value: f64::NAN,
                constraint: format!("`{}` does not accept a `{}` instance", c.name(), i.kind()),
            }),
        }
    };
    match cfg.overrides.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Parses `args`, runs the command, writes the outputs and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let out_dir = cli.command.args().out.clone();
    match execute(&cli.command) {
        Ok(out) => {
            if let Err(e) = out.write(&out_dir) {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
            if let Some(report) = out.report_text() {
                print!("{report}");
            }
            out.exit
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            let mut out = Outputs::default();
            let failure = ErrorReport {
                exit_code: code,
                error: e.to_string(),
            };
            if out.json("error.json", &failure).and_then(|_| out.write(&out_dir)).is_err() {
                eprintln!("error: could not write error.json");
            }
            code
        }
    }
}

/// Written in place of the report when a command fails; for infeasible
/// instances the message is the certificate.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorReport {
    pub exit_code: i32,
    pub error: String,
}
