//! `delayctl`: command-line front end for the delayed recursive control lab.
//!
//! Exit codes: 0 ok, 2 usage or configuration error, 3 numerical failure
//! (with a JSON error record on stderr), 4 budget gate.

mod output;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use delayctl_core::bsde::{solve, BsdeError};
use delayctl_core::control::{dpp_residual, value_function, ControlError};
use delayctl_core::ezapp::{
    ez_hjb_residual, monotonicity_regime_audit, solve_ez, CandidateGrid, EzError, EzParams, EzSetup, RamseyModel,
    Regime, EPS_DOM,
};
use delayctl_core::lattice::LatticeError;
use delayctl_core::mollify::{convergence_table, mollify, MollifierSpec, ProbeSet};
use delayctl_core::repro::{self, audit_hamiltonian, ez_rk4, hamiltonian_table, scenario_hamiltonian, viscosity_rows};
use delayctl_core::scenario::{bundled, CoefficientSpec, GeneratorSpec, ScenarioConfig, ScenarioError, BUNDLED};
use delayctl_core::sdde::{simulate, SimError};
use delayctl_core::segment::PathSegment;

use output::Artifacts;

#[derive(Parser)]
#[command(name = "delayctl", version, about = "Delayed stochastic recursive control lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    /// Bundled scenario name.
    #[arg(long)]
    scenario: Option<String>,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (outputs do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Euler-Maruyama paths of the scenario dynamics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the raw paths as a binary dump.
        #[arg(long)]
        dump: bool,
    },
    /// Backward solve along simulated paths.
    SolveBsde {
        #[command(flatten)]
        common: Common,
    },
    /// Sup-error table of mollified generators.
    MollifyAudit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
        schedule: Vec<usize>,
        /// Probe |y| <= y_max.
        #[arg(long, default_value_t = 1.0)]
        y_max: f64,
    },
    /// Lattice value function at the initial history.
    Value {
        #[command(flatten)]
        common: Common,
    },
    /// Dynamic-programming residual.
    DppCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Ellipticity audits and the mollified Hamiltonian table.
    HamiltonianAudit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
    },
    /// Viscosity inequality checks on the heat-equation fixture.
    ViscosityCheck {
        #[command(flatten)]
        common: Common,
        /// Source injected into the violation fixture.
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
    },
    /// Delayed Ramsey model under Epstein-Zin utility.
    EzDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        psi: Option<f64>,
        #[arg(long)]
        vartheta: Option<f64>,
        /// Also audit monotonicity on the regime's probe box.
        #[arg(long)]
        regime_check: bool,
    },
    /// Runs every acceptance criterion and writes a summary table.
    ReproAll {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric { kind: &'static str, message: String },
    Budget(String),
}

impl Failure {
    pub fn usage(msg: impl Display) -> Self {
        Self::Usage(msg.to_string())
    }

    pub fn numeric(kind: &'static str, msg: impl Display) -> Self {
        Self::Numeric {
            kind,
            message: msg.to_string(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Numeric { .. } => 3,
            Self::Budget(_) => 4,
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Lattice(l) => l.into(),
            e => Self::usage(e),
        }
    }
}

impl From<LatticeError> for Failure {
    fn from(e: LatticeError) -> Self {
        match e {
            LatticeError::OverBudget { .. } => Self::Budget(e.to_string()),
            e => Self::usage(e),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Self::numeric("simulation", e)
    }
}

impl From<BsdeError> for Failure {
    fn from(e: BsdeError) -> Self {
        Self::numeric("bsde", e)
    }
}

impl From<ControlError> for Failure {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Budget { .. } => Self::Budget(e.to_string()),
            ControlError::Lattice(l) => l.into(),
            ControlError::Sim(s) => s.into(),
            ControlError::Bsde(b) => b.into(),
            e @ (ControlError::Grid(_) | ControlError::NotGridMultiple(_) | ControlError::BadWindow(_)) => {
                Self::usage(e)
            }
        }
    }
}

impl From<EzError> for Failure {
    fn from(e: EzError) -> Self {
        match e {
            EzError::Control(c) => c.into(),
            EzError::Lattice(l) => l.into(),
            e @ (EzError::Params(_) | EzError::Regime | EzError::ZeroConsumption | EzError::Grid(_)) => {
                Self::usage(e)
            }
            e => Self::numeric("epstein_zin", e),
        }
    }
}

fn load(common: &Common, default: &str) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match (&common.config, &common.scenario) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            ScenarioConfig::from_json(&text)?
        }
        (None, Some(name)) => bundled(name)?,
        (None, None) => bundled(default)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct NodeRow {
    node: usize,
    time: f64,
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct SimulateSummary {
    scenario: String,
    n_paths: usize,
    n_nodes: usize,
    t0: f64,
    horizon: f64,
    step: f64,
    lag_steps: usize,
    terminal_mean: f64,
    terminal_stderr: f64,
    deterministic: bool,
}

fn cmd_simulate(common: &Common, dump: bool) -> Result<Artifacts, Failure> {
    let cfg = load(common, "gbm_linear")?;
    let s = cfg.build()?;
    let ens = simulate(&s.problem.coeffs, &s.x0, &s.control, &s.grid, s.mc.n_paths, s.mc.seed)?;
    let mut out = Artifacts::new("simulate", cfg.hash(), cfg.seed);
    let stats = ens.node_statistics(0);
    let last = stats.last().copied();
    out.csv(
        "node_stats.csv",
        stats.iter().map(|n| NodeRow {
            node: n.node,
            time: n.time,
            mean: n.mean,
            variance: n.variance,
        }),
    )?;
    let terminal = ens.moment_estimate(1.0);
    out.json(
        "simulate.json",
        &SimulateSummary {
            scenario: cfg.name.clone(),
            n_paths: ens.n_paths(),
            n_nodes: s.grid.n_nodes(),
            t0: s.grid.t0(),
            horizon: s.grid.horizon(),
            step: s.grid.step(),
            lag_steps: s.grid.lag_steps(),
            terminal_mean: last.map(|n| n.mean).unwrap_or(f64::NAN),
            terminal_stderr: terminal.stderr,
            deterministic: ens.is_deterministic(),
        },
    )?;
    if dump {
        out.dump(
            "paths.bin",
            ens.n_paths(),
            s.grid.n_nodes(),
            ens.dim(),
            s.grid.node_time(0),
            s.grid.step(),
            ens.states(),
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct BsdeSummary {
    scenario: String,
    generator: String,
    y0: f64,
    y0_stderr: f64,
    max_condition: f64,
    newton_solves: u64,
    newton_max_iterations: usize,
    bisection_steps: u64,
    deterministic: bool,
}

fn cmd_solve_bsde(common: &Common) -> Result<Artifacts, Failure> {
    let cfg = load(common, "gbm_linear")?;
    let s = cfg.build()?;
    let ens = simulate(&s.problem.coeffs, &s.x0, &s.control, &s.grid, s.mc.n_paths, s.mc.seed)?;
    let sol = solve(&ens, &s.problem.generator, &s.mc.bsde)?;
    let mut out = Artifacts::new("solve-bsde", cfg.hash(), cfg.seed);
    out.csv("bsde_steps.csv", sol.step_summary())?;
    let y0 = sol.initial_estimate();
    out.json(
        "bsde.json",
        &BsdeSummary {
            scenario: cfg.name.clone(),
            generator: s.problem.generator.name.clone(),
            y0: y0.mean,
            y0_stderr: y0.stderr,
            max_condition: sol.condition_numbers.iter().cloned().fold(0.0, f64::max),
            newton_solves: sol.newton.solves,
            newton_max_iterations: sol.newton.max_iterations,
            bisection_steps: sol.newton.bisection_steps,
            deterministic: sol.deterministic,
        },
    )?;
    Ok(out)
}

#[derive(Serialize)]
struct MollifyRow {
    n: usize,
    sup_error: f64,
    one_over_n: f64,
    worst_y: f64,
}

fn cmd_mollify_audit(common: &Common, schedule: &[usize], y_max: f64) -> Result<Artifacts, Failure> {
    if schedule.is_empty() || schedule.contains(&0) {
        return Err(Failure::usage("schedule must be a list of positive integers"));
    }
    if !(y_max > 0.0) {
        return Err(Failure::usage("y-max must be positive"));
    }
    let (rows, hash, seed, probes) = if common.config.is_some() || common.scenario.is_some() {
        let cfg = load(common, "gbm_linear")?;
        let s = cfg.build()?;
        let g = s.problem.generator.clone();
        let probes = ProbeSet::lattice(
            &[s.grid.t0()],
            &[s.x0.clone()],
            (-y_max, y_max),
            2001,
            s.lattice.values(),
            s.problem.coeffs.noise_dim(),
        );
        let spec = MollifierSpec::default();
        (convergence_table(&g, |n| mollify(&g, n, &spec), &probes, schedule), cfg.hash(), cfg.seed, probes)
    } else {
        let g = delayctl_core::scenario::build_generator(
            &GeneratorSpec::Abs { scale: 1.0, shift: 0.0 },
            &delayctl_core::scenario::TerminalSpec::Constant { value: 0.0 },
            (0.0, 1.0),
        )?
        .0;
        let probes = ProbeSet::lattice(&[0.0], &[PathSegment::constant(0.0, 0.1, 0, &[0.0])], (-y_max, y_max), 2001, &[vec![0.0]], 1);
        let spec = MollifierSpec::default();
        let hash = delayctl_core::digest::config_hash(&("mollify-audit", "abs", y_max, schedule));
        (convergence_table(&g, |n| mollify(&g, n, &spec), &probes, schedule), hash, common.seed.unwrap_or(0), probes)
    };
    let mut out = Artifacts::new("mollify-audit", hash, seed);
    let table: Vec<MollifyRow> = rows
        .iter()
        .map(|r| MollifyRow {
            n: r.n,
            sup_error: r.sup_error,
            one_over_n: 1.0 / r.n as f64,
            worst_y: probes.probes[r.worst_probe].y,
        })
        .collect();
    out.json("mollify.json", &table)?;
    out.csv("mollify.csv", table)?;
    Ok(out)
}

#[derive(Serialize)]
struct ControlRow {
    index: usize,
    cost: f64,
    switch_steps: String,
    values: String,
}

fn cmd_value(common: &Common) -> Result<Artifacts, Failure> {
    let cfg = load(common, "delayed_linear")?;
    let s = cfg.build()?;
    let v = value_function(s.grid.t0(), &s.x0, &s.problem, &s.lattice, &s.mc)?;
    let controls = s.lattice.enumerate(s.mc.control_budget)?;
    let mut out = Artifacts::new("value", cfg.hash(), cfg.seed);
    out.csv(
        "value_controls.csv",
        controls.iter().zip(&v.per_control).enumerate().map(|(i, (c, cost))| ControlRow {
            index: i,
            cost: *cost,
            switch_steps: c.switch_steps().iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
            values: c
                .values()
                .iter()
                .map(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join(";"),
        }),
    )?;
    out.json("value.json", &v)?;
    Ok(out)
}

fn cmd_dpp(common: &Common, tau: Option<f64>) -> Result<Artifacts, Failure> {
    let cfg = load(common, "quadratic_steering")?;
    let s = cfg.build()?;
    let spec = cfg.dpp;
    let t = spec.map(|d| d.t).unwrap_or(s.grid.t0());
    let tau = tau
        .or(spec.map(|d| d.tau))
        .ok_or_else(|| Failure::usage("no tau given and the scenario has no dpp section"))?;
    let x0 = PathSegment::constant(t, s.grid.step(), s.grid.lag_steps(), &[cfg.x0]);
    let r = dpp_residual(t, &x0, tau, &s.problem, &s.lattice, &s.mc)?;
    let mut out = Artifacts::new("dpp-check", cfg.hash(), cfg.seed);
    out.json("dpp.json", &r)?;
    Ok(out)
}

#[derive(Serialize)]
struct EllipticRow {
    model: String,
    probes: usize,
    violations: usize,
    max_excess: f64,
}

fn cmd_hamiltonian(common: &Common, probes: usize) -> Result<Artifacts, Failure> {
    let seed = common.seed.unwrap_or(42);
    let configs: Vec<ScenarioConfig> = if common.config.is_some() || common.scenario.is_some() {
        vec![load(common, "")?]
    } else {
        BUNDLED.iter().map(|(n, _)| bundled(n)).collect::<Result<_, _>>()?
    };
    let mut rows = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let s = cfg.build()?;
        let ham = scenario_hamiltonian(&s).map_err(Failure::usage)?;
        let r = audit_hamiltonian(&ham, s.grid.t0(), s.grid.horizon(), probes, seed.wrapping_add(i as u64));
        rows.push(EllipticRow {
            model: cfg.name.clone(),
            probes: r.probes,
            violations: r.violations,
            max_excess: r.max_excess,
        });
    }
    let negated = delayctl_core::hjb::ellipticity_audit(2, probes, seed, false, |p, a| -0.5 * a.trace() + p.p[0]);
    rows.push(EllipticRow {
        model: "negated_trace_fixture".into(),
        probes: negated.probes,
        violations: negated.violations,
        max_excess: negated.max_excess,
    });
    let table = hamiltonian_table(&[1, 5, 10, 20, 40]).map_err(|e| Failure::numeric("hamiltonian", e))?;
    let hashes: Vec<String> = configs.iter().map(|c| c.hash()).collect();
    let mut out = Artifacts::new(
        "hamiltonian-audit",
        delayctl_core::digest::config_hash(&(&hashes, probes)),
        seed,
    );
    out.csv("ellipticity.csv", &rows)?;
    out.csv("hamiltonian_transfer.csv", &table)?;
    out.json("hamiltonian.json", &(&rows, &table))?;
    Ok(out)
}

#[derive(Serialize)]
struct ViscosityRow {
    t: f64,
    x: f64,
    residual: f64,
    violation_residual: f64,
    eta: f64,
}

fn cmd_viscosity(common: &Common, eta: f64) -> Result<Artifacts, Failure> {
    let rows = viscosity_rows(eta).map_err(|e| Failure::numeric("viscosity", e))?;
    let mut out = Artifacts::new(
        "viscosity-check",
        delayctl_core::digest::config_hash(&("viscosity-check", eta)),
        common.seed.unwrap_or(0),
    );
    let table: Vec<ViscosityRow> = rows
        .into_iter()
        .map(|(t, x, residual, violation_residual)| ViscosityRow {
            t,
            x,
            residual,
            violation_residual,
            eta,
        })
        .collect();
    out.json("viscosity.json", &table)?;
    out.csv("viscosity.csv", table)?;
    Ok(out)
}

#[derive(Serialize)]
struct ResidualCsv {
    t: f64,
    x_current: f64,
    x_lagged: Option<f64>,
    value: f64,
    dt_term: f64,
    hamiltonian: f64,
    residual: f64,
    interior: bool,
}

fn cmd_ez(
    common: &Common,
    r: Option<f64>,
    psi: Option<f64>,
    vartheta: Option<f64>,
    regime_check: bool,
) -> Result<Artifacts, Failure> {
    let mut cfg = load(common, "ez_demo")?;
    let model = match (&cfg.coefficients, &mut cfg.generator) {
        (CoefficientSpec::Ramsey(m), GeneratorSpec::Ez { vartheta: th, psi: ps, r: rr }) => {
            if let Some(x) = r {
                *rr = x;
            }
            if let Some(x) = psi {
                *ps = x;
            }
            if let Some(x) = vartheta {
                *th = x;
            }
            *m
        }
        _ => return Err(Failure::usage("ez-demo needs ramsey coefficients and an ez generator")),
    };
    let params = match cfg.generator {
        GeneratorSpec::Ez { vartheta, psi, r } => EzParams::new(vartheta, psi, r)?,
        _ => unreachable!("checked above"),
    };
    let s = cfg.build()?;
    let setup = EzSetup {
        horizon: cfg.grid.horizon,
        delta: cfg.grid.delta,
        step: cfg.grid.step,
        x0: cfg.x0,
        eps_dom: EPS_DOM,
    };
    let run = solve_ez(&model, &params, &s.lattice, &setup, &s.mc, true)?;
    let mut out = Artifacts::new("ez-demo", cfg.hash(), cfg.seed);
    out.csv("ez_policy.csv", &run.policy)?;

    // residual of the deterministic reference: no production, no volatility,
    // first-interval policy held constant
    let quiet = RamseyModel {
        productivity: 0.0,
        sigma0: 0.0,
        ..model
    };
    let (pi, c) = (run.policy[0].pi, run.policy[0].c);
    let h = quiet.terminal(&params);
    let v_end = h(PathSegment::constant(0.0, 1.0, 0, &[cfg.x0 - c * cfg.grid.horizon]).view());
    let times: Vec<f64> = (0..=50).map(|i| cfg.grid.horizon * i as f64 / 50.0).collect();
    let axis = vec![cfg.x0 - 0.5, cfg.x0, cfg.x0 + 0.5];
    let axes = if s.grid.lag_steps() > 0 { vec![axis.clone(), axis] } else { vec![axis] };
    let horizon = cfg.grid.horizon;
    let cand = CandidateGrid::from_fn(times, axes, |t, _| {
        let steps = ((horizon - t) / 1e-3).round().max(1.0) as usize;
        ez_rk4(&params, c, v_end, horizon - t, steps)
    });
    let rows = ez_hjb_residual(&quiet, &params, &setup, &[vec![pi, c]], &cand)?;
    out.csv(
        "ez_residual.csv",
        rows.iter().map(|r| ResidualCsv {
            t: r.t,
            x_current: r.coords[0],
            x_lagged: r.coords.get(1).copied(),
            value: r.value,
            dt_term: r.dt_term,
            hamiltonian: r.hamiltonian,
            residual: r.residual,
            interior: r.interior,
        }),
    )?;
    let regime = if regime_check {
        let (ub, cb) = match params.regime() {
            Regime::II => ((0.1, 2.0), (0.5, 1.0)),
            _ => ((-2.0, -0.1), (0.1, 1.0)),
        };
        let a = monotonicity_regime_audit(&params, ub, cb, 80, 25)?;
        if a.contract && a.violations > 0 {
            return Err(Failure::numeric(
                "epstein_zin",
                format!("{} monotonicity violations in a monotone regime", a.violations),
            ));
        }
        Some(a)
    } else {
        None
    };
    out.json("ez_value.json", &(&run, &regime))?;
    Ok(out)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    id: u8,
    name: &'a str,
    pass: bool,
    measured: String,
    threshold: String,
    detail: &'a str,
}

fn cmd_repro(common: &Common) -> Result<(Artifacts, bool), Failure> {
    let seed = common.seed.unwrap_or(42);
    let results = repro::run_all(seed);
    for r in &results {
        println!("{}", r.line());
    }
    let scenario_hashes: Vec<String> = BUNDLED
        .iter()
        .map(|(n, _)| bundled(n).map(|c| c.hash()))
        .collect::<Result<_, _>>()?;
    let mut out = Artifacts::new(
        "repro-all",
        delayctl_core::digest::config_hash(&("repro-all", &scenario_hashes)),
        seed,
    );
    out.csv(
        "repro_summary.csv",
        results.iter().map(|r| SummaryRow {
            id: r.id,
            name: &r.name,
            pass: r.pass,
            measured: format!("{:.6e}", r.measured),
            threshold: format!("{:.6e}", r.threshold),
            detail: &r.detail,
        }),
    )?;
    out.json("repro_summary.json", &results)?;
    Ok((out, results.iter().all(|r| r.pass)))
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let common = match &cli.command {
        Command::Simulate { common, .. }
        | Command::SolveBsde { common }
        | Command::MollifyAudit { common, .. }
        | Command::Value { common }
        | Command::DppCheck { common, .. }
        | Command::HamiltonianAudit { common, .. }
        | Command::ViscosityCheck { common, .. }
        | Command::EzDemo { common, .. }
        | Command::ReproAll { common } => common.clone(),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e))?;
    }
    let (artifacts, ok) = match cli.command {
        Command::Simulate { dump, .. } => (cmd_simulate(&common, dump)?, true),
        Command::SolveBsde { .. } => (cmd_solve_bsde(&common)?, true),
        Command::MollifyAudit { schedule, y_max, .. } => (cmd_mollify_audit(&common, &schedule, y_max)?, true),
        Command::Value { .. } => (cmd_value(&common)?, true),
        Command::DppCheck { tau, .. } => (cmd_dpp(&common, tau)?, true),
        Command::HamiltonianAudit { probes, .. } => (cmd_hamiltonian(&common, probes)?, true),
        Command::ViscosityCheck { eta, .. } => (cmd_viscosity(&common, eta)?, true),
        Command::EzDemo {
            r,
            psi,
            vartheta,
            regime_check,
            ..
        } => (cmd_ez(&common, r, psi, vartheta, regime_check)?, true),
        Command::ReproAll { .. } => cmd_repro(&common)?,
    };
    let hash = artifacts.hash().to_string();
    let written = artifacts.write(&common.out)?;
    eprintln!("config_hash={hash} wrote {} file(s) to {}: {}", written.len(), common.out.display(), written.join(", "));
    Ok(ok)
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: &'a str,
    exit_code: u8,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more acceptance criteria failed");
            ExitCode::from(3)
        }
        Err(f) => {
            let code = f.code();
            let (kind, msg) = match &f {
                Failure::Usage(m) => ("usage", m.as_str()),
                Failure::Numeric { kind, message } => (*kind, message.as_str()),
                Failure::Budget(m) => ("budget", m.as_str()),
            };
            let rec = ErrorRecord {
                error: kind,
                message: msg,
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| msg.to_string()));
            ExitCode::from(code)
        }
    }
}
