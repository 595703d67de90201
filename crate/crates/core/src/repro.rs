//! Acceptance criteria at their pinned tolerances.
//!
//! Every criterion is a pure function of the master seed; outputs carry no
//! timing so that summaries are byte-for-byte reproducible.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::{comparison_check, solve, BsdeConfig, Scheme};
use crate::control::{backward_semigroup, dpp_residual, value_regularity_probe, McConfig};
use crate::ezapp::{
    crra_reduction_error, ez_aggregator, monotonicity_regime_audit, solve_ez, EzParams, EzSetup, RamseyModel,
    EPS_DOM,
};
use crate::grid::TimeGrid;
use crate::hjb::{
    ellipticity_audit, ham_probe_lattice, hamiltonian_convergence_audit, heat_solution, viscosity_inequality_check,
    with_time_source, Hamiltonian, Neighbourhood, ProjectedState, Projection, Side,
};
use crate::lattice::PiecewiseControl;
use crate::model::Generator;
use crate::mollify::{convergence_table, mollify, MollifierSpec, ProbeSet};
use crate::rng::derive_seed;
use crate::scenario::{
    build_coefficients, build_generator, bundled, CoefficientSpec, GeneratorSpec, Scenario, ScenarioConfig,
    TerminalSpec, BUNDLED,
};
use crate::sdde::simulate;
use crate::segment::PathSegment;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: u8, name: &str, pass: bool, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            id,
            name: name.into(),
            pass,
            measured,
            threshold,
            detail,
        }
    }

    fn failed(id: u8, name: &str, err: impl std::fmt::Display) -> Self {
        Self::new(id, name, false, f64::NAN, f64::NAN, format!("error: {err}"))
    }

    /// `PASS|FAIL [id] name measured=... threshold=... detail`.
    pub fn line(&self) -> String {
        format!(
            "{} [{:02}] {} measured={:.6e} threshold={:.6e} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.threshold,
            self.detail
        )
    }
}

pub const CRITERIA: &[(u8, &str)] = &[
    (1, "bsde_linear_oracle"),
    (2, "cubic_driver_oracle"),
    (3, "comparison"),
    (4, "mollifier_convergence"),
    (5, "hamiltonian_transfer"),
    (6, "ellipticity"),
    (7, "dpp_residual"),
    (8, "semigroup_flow"),
    (9, "value_regularity"),
    (10, "viscosity_fixture"),
    (11, "epstein_zin"),
    (12, "determinism"),
];

pub fn run_criterion(id: u8, seed: u64) -> CriterionResult {
    let s = derive_seed(seed, id as u64);
    match id {
        1 => linear_oracle(s),
        2 => cubic_oracle(s),
        3 => comparison(s),
        4 => mollifier_convergence(),
        5 => hamiltonian_transfer(),
        6 => ellipticity(s),
        7 => dpp(s),
        8 => semigroup(s),
        9 => regularity(s),
        10 => viscosity(),
        11 => epstein_zin(s),
        12 => determinism(seed),
        _ => CriterionResult::failed(id, "unknown", "no such criterion"),
    }
}

pub fn run_all(seed: u64) -> Vec<CriterionResult> {
    CRITERIA.iter().map(|&(id, _)| run_criterion(id, seed)).collect()
}

fn name(id: u8) -> &'static str {
    CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1).unwrap_or("unknown")
}

fn base_config(generator: GeneratorSpec, terminal: TerminalSpec, horizon: f64, step: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: "inline".into(),
        description: String::new(),
        coefficients: CoefficientSpec::Zero,
        generator,
        terminal,
        grid: crate::scenario::GridSpec {
            t0: 0.0,
            horizon,
            delta: 0.0,
            step,
        },
        x0: 0.0,
        lattice: None,
        control: None,
        mc: crate::scenario::McSpec {
            n_paths: 1,
            outer_paths: 1,
            inner_paths: 1,
            control_budget: 1,
            max_work: 1,
            degree: 2,
        },
        seed: 0,
        dpp: None,
        tolerances: Default::default(),
        output_dir: None,
    }
}

fn y0(s: &Scenario, cfg: &BsdeConfig) -> Result<f64, String> {
    let ens = simulate(&s.problem.coeffs, &s.x0, &s.control, &s.grid, s.mc.n_paths, s.mc.seed).map_err(|e| e.to_string())?;
    Ok(solve(&ens, &s.problem.generator, cfg).map_err(|e| e.to_string())?.initial_estimate().mean)
}

fn linear_oracle(seed: u64) -> CriterionResult {
    let id = 1;
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for mu in [-1.0, 0.5] {
        let mut cfg = base_config(GeneratorSpec::Linear { mu, shift: 0.0 }, TerminalSpec::Constant { value: 1.0 }, 1.0, 1e-3);
        cfg.seed = seed;
        let s = match cfg.build() {
            Ok(s) => s,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        match y0(&s, &BsdeConfig::default()) {
            Ok(y) => {
                let err = (y - mu.exp()).abs();
                worst = worst.max(err);
                detail.push(format!("mu={mu}:Y0={y:.9}"));
            }
            Err(e) => return CriterionResult::failed(id, name(id), e),
        }
    }
    CriterionResult::new(id, name(id), worst <= 5e-3, worst, 5e-3, detail.join(" "))
}

/// `Y' = Y^3` backwards from `Y(T) = y_end` by classical RK4.
pub fn cubic_rk4(y_end: f64, horizon: f64, steps: usize) -> f64 {
    let f = |y: f64| y * y * y;
    let h = horizon / steps as f64;
    let mut y = y_end;
    for _ in 0..steps {
        // integrating in reversed time s = T - t: dy/ds = -y^3
        let k1 = -f(y);
        let k2 = -f(y + 0.5 * h * k1);
        let k3 = -f(y + 0.5 * h * k2);
        let k4 = -f(y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y
}

fn cubic_oracle(seed: u64) -> CriterionResult {
    let id = 2;
    let mut cfg = match bundled("cubic_driver") {
        Ok(c) => c,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    cfg.seed = seed;
    let s = match cfg.build() {
        Ok(s) => s,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let y = match y0(&s, &BsdeConfig::default()) {
        Ok(y) => y,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let oracle = cubic_rk4(2.0, 2.4, 24_000);
    let rel = ((y - oracle) / oracle).abs();
    // negative control: explicit Euler at h = 0.6 on the same instance
    let mut coarse = cfg.clone();
    coarse.grid.step = 0.6;
    let explicit = BsdeConfig {
        scheme: Scheme::Explicit,
        ..BsdeConfig::default()
    };
    let (unstable, explicit_note) = match coarse.build().map_err(|e| e.to_string()).and_then(|c| y0(&c, &explicit)) {
        Ok(v) => (!v.is_finite() || v.abs() > 10.0 * 2.0, format!("explicit_Y0={v:.6e}")),
        Err(e) => (true, format!("explicit_failed({e})")),
    };
    let implicit_coarse = coarse
        .build()
        .map_err(|e| e.to_string())
        .and_then(|c| y0(&c, &BsdeConfig::default()))
        .map(|v| format!("{v:.6}"))
        .unwrap_or_else(|e| e);
    CriterionResult::new(
        id,
        name(id),
        rel <= 1e-3 && unstable,
        rel,
        1e-3,
        format!("Y0={y:.9} oracle={oracle:.9} {explicit_note} implicit_Y0(h=0.6)={implicit_coarse} explicit_unstable={unstable}"),
    )
}

/// Generator pairs with `g1 <= g2`, `Phi1 <= Phi2`.
pub fn comparison_pairs() -> Vec<(&'static str, (GeneratorSpec, TerminalSpec), (GeneratorSpec, TerminalSpec))> {
    let clamp = TerminalSpec::Clamp {
        lo: -2.0,
        hi: 2.0,
        shift: 0.0,
    };
    let clamp_up = TerminalSpec::Clamp {
        lo: -2.0,
        hi: 2.0,
        shift: 0.2,
    };
    vec![
        (
            "cubic_shift",
            (GeneratorSpec::Cubic { coef: 1.0, shift: 0.0 }, clamp.clone()),
            (GeneratorSpec::Cubic { coef: 1.0, shift: 0.5 }, clamp.clone()),
        ),
        (
            "linear_terminal",
            (GeneratorSpec::Linear { mu: 0.5, shift: 0.0 }, clamp.clone()),
            (GeneratorSpec::Linear { mu: 0.5, shift: 0.0 }, clamp_up),
        ),
        (
            "neg_abs_vs_zero",
            (GeneratorSpec::Abs { scale: -1.0, shift: 0.0 }, clamp.clone()),
            (GeneratorSpec::Zero, clamp.clone()),
        ),
        (
            "z_lipschitz",
            (GeneratorSpec::LipschitzZ { k: -0.5, shift: 0.0 }, clamp.clone()),
            (GeneratorSpec::LipschitzZ { k: 0.5, shift: 0.0 }, clamp),
        ),
        (
            "capped_identity",
            (
                GeneratorSpec::Linear { mu: -1.0, shift: 0.0 },
                TerminalSpec::Clamp {
                    lo: -1e9,
                    hi: 1.0,
                    shift: 0.0,
                },
            ),
            (GeneratorSpec::Linear { mu: -1.0, shift: 0.0 }, TerminalSpec::Identity { scale: 1.0, shift: 0.0 }),
        ),
    ]
}

fn comparison(seed: u64) -> CriterionResult {
    let id = 3;
    let h = 1e-2;
    let slack = 1.0 * h;
    let coeffs = build_coefficients(&CoefficientSpec::DelayedLinear {
        a: -0.5,
        b: 0.4,
        sigma: 0.3,
        control_gain: 0.0,
    });
    let grid = match TimeGrid::with_step(0.0, 1.0, 0.2, h) {
        Ok(g) => g,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let x0 = PathSegment::constant(0.0, h, grid.lag_steps(), &[0.5]);
    let ens = match simulate(&coeffs, &x0, &PiecewiseControl::constant(vec![0.0]), &grid, 10_000, seed) {
        Ok(e) => e,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let cfg = BsdeConfig::default();
    let mut worst: f64 = 0.0;
    let mut applicable = true;
    let mut detail = Vec::new();
    for (label, (g1, t1), (g2, t2)) in comparison_pairs() {
        let build = |g: &GeneratorSpec, t: &TerminalSpec| build_generator(g, t, (0.0, 1.0)).map(|x| x.0);
        let (gen1, gen2) = match (build(&g1, &t1), build(&g2, &t2)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return CriterionResult::failed(id, name(id), e),
        };
        let (s1, s2) = match (solve(&ens, &gen1, &cfg), solve(&ens, &gen2, &cfg)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return CriterionResult::failed(id, name(id), e),
        };
        let r = comparison_check(&s1, &s2, &gen1, &gen2, &ens, slack);
        applicable &= r.applicable;
        worst = worst.max(r.violation_fraction);
        detail.push(format!(
            "{label}:applicable={} frac={:.3e} max_excess={:.3e}",
            r.applicable, r.violation_fraction, r.max_excess
        ));
    }
    CriterionResult::new(id, name(id), applicable && worst <= 1e-3, worst, 1e-3, detail.join(" "))
}

fn abs_generator() -> Generator {
    build_generator(&GeneratorSpec::Abs { scale: 1.0, shift: 0.0 }, &TerminalSpec::Constant { value: 0.0 }, (0.0, 1.0))
        .expect("abs generator builds")
        .0
}

/// `|y|` on `|y| <= 1`: sup-error table of the mollified generator.
pub fn mollifier_table(schedule: &[usize]) -> Vec<crate::mollify::ConvergenceRow> {
    let g = abs_generator();
    let spec = MollifierSpec::default();
    let probes = ProbeSet::lattice(
        &[0.0],
        &[PathSegment::constant(0.0, 0.1, 0, &[0.0])],
        (-1.0, 1.0),
        2001,
        &[vec![0.0]],
        1,
    );
    convergence_table(&g, |n| mollify(&g, n, &spec), &probes, schedule)
}

fn mollifier_convergence() -> CriterionResult {
    let id = 4;
    let rows = mollifier_table(&[5, 10, 20, 40]);
    let mut worst_margin = f64::NEG_INFINITY;
    let mut pass = true;
    let mut detail = Vec::new();
    for r in &rows {
        let bound = 1.0 / r.n as f64 + 1e-8;
        pass &= r.sup_error <= bound;
        worst_margin = worst_margin.max(r.sup_error * r.n as f64);
        detail.push(format!("n={}:{:.6e}", r.n, r.sup_error));
    }
    CriterionResult::new(id, name(id), pass, worst_margin, 1.0, format!("n*err max; {}", detail.join(" ")))
}

/// Bang-bang drift, diffusion 0.5 and `g = |y|` on a probe lattice.
pub fn hamiltonian_table(schedule: &[usize]) -> Result<Vec<crate::hjb::HamiltonianRow>, String> {
    let g = abs_generator();
    let coeffs = build_coefficients(&CoefficientSpec::ControlledDrift { sigma: 0.5 });
    let ham = Hamiltonian::new(coeffs, g.clone(), vec![vec![-1.0], vec![0.0], vec![1.0]], Projection::current_only(0, 0.1))
        .map_err(|e| e.to_string())?;
    let rs: Vec<f64> = (-20..=20).map(|i| i as f64 / 20.0).collect();
    let probes = ham_probe_lattice(
        &[0.0, 0.5],
        &[vec![-1.0], vec![0.0], vec![1.0]],
        &rs,
        &[-1.0, 0.0, 0.5, 2.0],
        &[-1.0, 0.0, 1.0],
    );
    let spec = MollifierSpec::default();
    hamiltonian_convergence_audit(&ham, |n| mollify(&g, n, &spec), &probes, schedule).map_err(|e| e.to_string())
}

fn hamiltonian_transfer() -> CriterionResult {
    let id = 5;
    match hamiltonian_table(&[1, 5, 10, 20, 40]) {
        Ok(rows) => {
            let exceptions: usize = rows.iter().map(|r| r.exceptions).sum();
            let detail = rows
                .iter()
                .map(|r| format!("n={}:H={:.3e},g={:.3e}", r.n, r.h_error, r.g_error))
                .collect::<Vec<_>>()
                .join(" ");
            CriterionResult::new(id, name(id), exceptions == 0, exceptions as f64, 0.0, detail)
        }
        Err(e) => CriterionResult::failed(id, name(id), e),
    }
}

/// Hamiltonian of a bundled scenario on current and lagged coordinates.
pub fn scenario_hamiltonian(s: &Scenario) -> Result<Hamiltonian, String> {
    let proj = Projection::current_and_lagged(s.grid.lag_steps(), s.grid.step());
    Hamiltonian::new(s.problem.coeffs.clone(), s.problem.generator.clone(), s.lattice.values().to_vec(), proj)
        .map_err(|e| e.to_string())
}

/// Ellipticity audit of a Hamiltonian with random states mapped into its time
/// window and `r` mapped into the generator domain.
pub fn audit_hamiltonian(ham: &Hamiltonian, t0: f64, t1: f64, n: usize, seed: u64) -> crate::hjb::EllipticityReport {
    let k = ham.projection.k();
    let (lo, hi) = ham.generator.domain();
    ellipticity_audit(k, n, seed, false, |probe, a| {
        let t = t0 + probe.u * (t1 - t0);
        let r = if lo.is_finite() {
            lo + 0.2 + probe.r.abs()
        } else if hi.is_finite() {
            hi - 0.2 - probe.r.abs()
        } else {
            probe.r
        };
        let x = ProjectedState {
            coords: probe.coords.clone(),
        };
        ham.eval_projected(t, &x, r, &probe.p, a).unwrap_or(f64::NAN)
    })
}

fn ellipticity(seed: u64) -> CriterionResult {
    let id = 6;
    let mut total = 0;
    let mut detail = Vec::new();
    for (i, (label, _)) in BUNDLED.iter().enumerate() {
        let s = match bundled(label).and_then(|c| c.build()) {
            Ok(s) => s,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let ham = match scenario_hamiltonian(&s) {
            Ok(h) => h,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let r = audit_hamiltonian(&ham, s.grid.t0(), s.grid.horizon(), 1000, derive_seed(seed, i as u64));
        // NaN excess would mean an evaluation failure
        let broken = r.max_excess.is_nan();
        total += r.violations + broken as usize;
        detail.push(format!("{label}:{}", r.violations));
    }
    let negated = ellipticity_audit(2, 1000, seed, false, |p, a: &DMatrix<f64>| -0.5 * a.trace() + p.p[0]);
    detail.push(format!("negated_trace:{}", negated.violations));
    CriterionResult::new(
        id,
        name(id),
        total == 0 && negated.violations > 0,
        total as f64,
        0.0,
        detail.join(" "),
    )
}

fn dpp(seed: u64) -> CriterionResult {
    let id = 7;
    let base = match bundled("quadratic_steering") {
        Ok(c) => c,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let spec = base.dpp.unwrap_or(crate::scenario::DppSpec { t: 0.0, tau: 0.5 });
    let tol = base.tolerance("dpp_residual", 1e-2);
    let run = |step: f64, tau: f64| -> Result<crate::control::DppReport, String> {
        let mut c = base.clone();
        c.seed = seed;
        c.grid.step = step;
        let s = c.build().map_err(|e| e.to_string())?;
        let x0 = PathSegment::constant(spec.t, step, s.grid.lag_steps(), &[c.x0]);
        dpp_residual(spec.t, &x0, tau, &s.problem, &s.lattice, &s.mc).map_err(|e| e.to_string())
    };
    let default = match run(base.grid.step, spec.tau) {
        Ok(r) => r,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let zero = match run(base.grid.step, 0.0) {
        Ok(r) => r,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let mut levels = Vec::new();
    for step in [0.1, 0.05, 0.025] {
        match run(step, spec.tau) {
            Ok(r) => levels.push(r),
            Err(e) => return CriterionResult::failed(id, name(id), e),
        }
    }
    let monotone = levels
        .windows(2)
        .all(|w| w[1].residual <= w[0].residual + w[0].lhs_stderr + w[0].rhs_stderr + w[1].lhs_stderr + w[1].rhs_stderr);
    let pass = default.residual <= tol && zero.residual == 0.0 && monotone;
    let lv = levels
        .iter()
        .map(|r| format!("{:.3e}", r.residual))
        .collect::<Vec<_>>()
        .join(",");
    CriterionResult::new(
        id,
        name(id),
        pass,
        default.residual,
        tol,
        format!(
            "lhs={:.9} rhs={:.9} tau0_residual={:e} levels=[{lv}] monotone={monotone}",
            default.lhs, default.rhs, zero.residual
        ),
    )
}

fn semigroup(seed: u64) -> CriterionResult {
    let id = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BsdeConfig::default();
    let tol = 10.0 * cfg.newton_tol;
    let gens = [
        GeneratorSpec::Linear { mu: 0.5, shift: 0.1 },
        GeneratorSpec::Cubic { coef: 1.0, shift: 0.0 },
        GeneratorSpec::Abs { scale: -0.7, shift: 0.2 },
    ];
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let step = [0.02, 0.05][rng.gen_range(0..2)];
        let gspec = gens[rng.gen_range(0..gens.len())].clone();
        let term = TerminalSpec::Clamp {
            lo: -2.0,
            hi: 2.0,
            shift: 0.0,
        };
        let gen = match build_generator(&gspec, &term, (0.0, 1.0)) {
            Ok(g) => g.0,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let coeffs = build_coefficients(&CoefficientSpec::DelayedLinear {
            a: rng.gen_range(-1.0..0.5),
            b: rng.gen_range(-0.5..0.5),
            sigma: rng.gen_range(0.1..0.5),
            control_gain: 1.0,
        });
        let grid = match TimeGrid::with_step(0.0, 1.0, 0.2, step) {
            Ok(g) => g,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let n = grid.n_steps();
        let mut idx = [rng.gen_range(0..=n), rng.gen_range(0..=n), rng.gen_range(0..=n)];
        idx.sort_unstable();
        let [jt, jth, js] = idx;
        let x0 = PathSegment::constant(0.0, step, grid.lag_steps(), &[rng.gen_range(-1.0..1.0)]);
        let ctrl = PiecewiseControl::constant(vec![rng.gen_range(-0.5..0.5)]);
        let ens = match simulate(&coeffs, &x0, &ctrl, &grid, 500, derive_seed(seed, trial)) {
            Ok(e) => e,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let (t, th, s) = (grid.step_time(jt), grid.step_time(jth), grid.step_time(js));
        let xi: Vec<f64> = (0..500)
            .map(|p| gen.terminal(ens.segment_at(p, grid.start_node() + js).expect("node in range")))
            .collect();
        let composed = backward_semigroup(&ens, &gen, &cfg, th, s, &xi).and_then(|mid| backward_semigroup(&ens, &gen, &cfg, t, th, &mid));
        let direct = backward_semigroup(&ens, &gen, &cfg, t, s, &xi);
        match (composed, direct) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x - y).abs() / (1.0 + y.abs()));
                }
            }
            (Err(e), _) | (_, Err(e)) => return CriterionResult::failed(id, name(id), e),
        }
    }
    CriterionResult::new(id, name(id), worst <= tol, worst, tol, "10 random (coefficients, generator, t<=theta<=s)".into())
}

/// Probe pairs anchored at 0 for the regularity study.
pub fn regularity_pairs(step: f64, lag: usize) -> Vec<(PathSegment, PathSegment)> {
    let c = |x: f64| PathSegment::constant(0.0, step, lag, &[x]);
    let ramp = |a: f64, b: f64| PathSegment::from_fn(0.0, step, lag, move |s| a + b * s);
    vec![(c(0.0), c(0.5)), (c(0.5), c(1.0)), (c(-0.5), c(0.25)), (ramp(0.2, 1.0), ramp(0.2, -1.0))]
}

fn regularity(seed: u64) -> CriterionResult {
    let id = 9;
    let base = match bundled("delayed_linear") {
        Ok(c) => c,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let spread_tol = base.tolerance("regularity_spread", 0.2);
    let mut lips = Vec::new();
    let mut grows = Vec::new();
    for (step, paths) in [(0.05, 1000), (0.025, 2000), (0.0125, 4000)] {
        let mut c = base.clone();
        c.seed = seed;
        c.grid.step = step;
        c.mc.n_paths = paths;
        let s = match c.build() {
            Ok(s) => s,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let pairs = regularity_pairs(step, s.grid.lag_steps());
        match value_regularity_probe(0.0, &pairs, &s.problem, &s.lattice, &s.mc) {
            Ok(r) => {
                lips.push(r.lipschitz_ratio);
                grows.push(r.growth_ratio);
            }
            Err(e) => return CriterionResult::failed(id, name(id), e),
        }
    }
    let spread = |v: &[f64]| {
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        (hi - lo) / hi
    };
    let bounded = lips.iter().chain(&grows).all(|x| x.is_finite() && *x < 10.0);
    let worst = spread(&lips).max(spread(&grows));
    CriterionResult::new(
        id,
        name(id),
        bounded && worst <= spread_tol,
        worst,
        spread_tol,
        format!(
            "lipschitz=[{}] growth=[{}]",
            lips.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(","),
            grows.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",")
        ),
    )
}

/// Heat-equation residuals at interior points and the injected-source check.
pub fn viscosity_rows(eta: f64) -> Result<Vec<(f64, f64, f64, f64)>, String> {
    let horizon = 1.0;
    let phi = heat_solution(horizon);
    let ham = Hamiltonian::new(
        build_coefficients(&CoefficientSpec::ControlledDrift { sigma: 1.0 }),
        build_generator(&GeneratorSpec::Zero, &TerminalSpec::Constant { value: 0.0 }, (0.0, 1.0))
            .map_err(|e| e.to_string())?
            .0,
        vec![vec![0.0]],
        Projection::current_only(0, 0.1),
    )
    .map_err(|e| e.to_string())?;
    let bad = with_time_source(&phi, eta, horizon);
    let u = phi.phi.clone();
    let ub = bad.phi.clone();
    let cand = move |t: f64, x: &[f64]| u(t, x);
    let cand_bad = move |t: f64, x: &[f64]| ub(t, x);
    let hood = Neighbourhood::default();
    let mut rows = Vec::new();
    for t in [0.2, 0.5, 0.8] {
        for x in [-1.5, -0.5, 0.0, 0.7, 1.2] {
            let p = ProjectedState { coords: vec![x] };
            let r = viscosity_inequality_check(&cand, &phi, t, &p, Side::Sub, &ham, &hood, (0.0, horizon), 1e-6)
                .map_err(|e| e.to_string())?
                .residual()
                .ok_or("heat fixture not extremal")?;
            let rb = viscosity_inequality_check(&cand_bad, &bad, t, &p, Side::Super, &ham, &hood, (0.0, horizon), 1e-6)
                .map_err(|e| e.to_string())?
                .residual()
                .ok_or("violation fixture not extremal")?;
            rows.push((t, x, r, rb));
        }
    }
    Ok(rows)
}

fn viscosity() -> CriterionResult {
    let id = 10;
    let eta = 0.05;
    let rows = match viscosity_rows(eta) {
        Ok(r) => r,
        Err(e) => return CriterionResult::failed(id, name(id), e),
    };
    let phi = heat_solution(1.0);
    let pts: Vec<(f64, Vec<f64>)> = rows.iter().map(|r| (r.0, vec![r.1])).collect();
    let audit = phi.self_audit(&pts, 1e-6);
    let worst = rows.iter().map(|r| r.2.abs()).fold(0.0, f64::max);
    let worst_src = rows.iter().map(|r| (r.3 - eta).abs()).fold(0.0, f64::max);
    CriterionResult::new(
        id,
        name(id),
        worst <= 1e-6 && worst_src <= 1e-4 && audit.failures == 0,
        worst,
        1e-6,
        format!(
            "source_error={worst_src:.3e} (tol 1e-4) derivative_audit_max_rel={:.3e}",
            audit.max_rel_error
        ),
    )
}

/// `V' = -g(V, c)` backwards from `v_end` by RK4.
pub fn ez_rk4(p: &EzParams, c: f64, v_end: f64, horizon: f64, steps: usize) -> f64 {
    let f = |v: f64| ez_aggregator(p, v, c).unwrap_or(f64::NAN);
    let h = horizon / steps as f64;
    let mut v = v_end;
    for _ in 0..steps {
        let k1 = f(v);
        let k2 = f(v + 0.5 * h * k1);
        let k3 = f(v + 0.5 * h * k2);
        let k4 = f(v + h * k3);
        v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    v
}

fn epstein_zin(seed: u64) -> CriterionResult {
    let id = 11;
    let mut notes = Vec::new();
    let mut pass = true;
    // (a)
    let crra = [(0.5, 2.0), (2.0, 0.5)]
        .iter()
        .map(|&(psi, r)| EzParams::new(0.2, psi, r).and_then(|p| crra_reduction_error(&p, 10_000, seed)))
        .collect::<Result<Vec<_>, _>>();
    match crra {
        Ok(v) => {
            let w = v.iter().cloned().fold(0.0, f64::max);
            pass &= w <= 1e-12;
            notes.push(format!("a:crra={w:.3e}"));
        }
        Err(e) => return CriterionResult::failed(id, name(id), e),
    }
    // (b)
    let boxes = [((0.1, 2.0, 2.0), (-2.0, -0.1), (0.1, 1.0)), ((0.1, 0.5, 0.5), (0.1, 2.0), (0.5, 1.0))];
    for ((th, psi, r), ub, cb) in boxes {
        match EzParams::new(th, psi, r).and_then(|p| monotonicity_regime_audit(&p, ub, cb, 80, 25)) {
            Ok(a) => {
                pass &= a.violations == 0;
                notes.push(format!("b:r={r}:violations={}", a.violations));
            }
            Err(e) => return CriterionResult::failed(id, name(id), e),
        }
    }
    // (c) deterministic ODE, f = 0, sigma = 0, constant controls
    let quiet = RamseyModel {
        productivity: 0.0,
        sigma0: 0.0,
        ..RamseyModel::default()
    };
    let setup = EzSetup {
        horizon: 1.0,
        delta: 0.2,
        step: 1e-3,
        x0: 1.0,
        eps_dom: EPS_DOM,
    };
    let c = 0.4;
    let mut rel_worst: f64 = 0.0;
    for (psi, r) in [(2.0, 2.0), (0.5, 0.5)] {
        let p = match EzParams::new(0.3, psi, r) {
            Ok(p) => p,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let lat = match quiet.lattice(&[0.5], &[c], vec![0]) {
            Ok(l) => l,
            Err(e) => return CriterionResult::failed(id, name(id), e),
        };
        let mc = McConfig {
            n_paths: 1,
            seed,
            ..Default::default()
        };
        match solve_ez(&quiet, &p, &lat, &setup, &mc, true) {
            Ok(run) => {
                let seg = PathSegment::constant(0.0, 1.0, 0, &[setup.x0 - c * setup.horizon]);
                let v_end = quiet.terminal(&p)(seg.view());
                let want = ez_rk4(&p, c, v_end, setup.horizon, 4000);
                rel_worst = rel_worst.max(((run.value.value - want) / want).abs());
            }
            Err(e) => return CriterionResult::failed(id, name(id), e),
        }
    }
    pass &= rel_worst <= 1e-3;
    notes.push(format!("c:ode_rel={rel_worst:.3e}"));
    // (d) bundled demo
    match ez_demo_check(seed) {
        Ok((clamps, big, small, sign)) => {
            pass &= clamps == 0 && big >= small && sign == 0;
            notes.push(format!("d:clamps={clamps} V0={big:.6} V0_singleton={small:.6} sign_violations={sign}"));
        }
        Err(e) => return CriterionResult::failed(id, name(id), e),
    }
    CriterionResult::new(id, name(id), pass, rel_worst, 1e-3, notes.join(" "))
}

/// Clean run of the bundled demo and of its singleton sub-lattice:
/// `(clamps, V0, V0_singleton, sign violations)`.
pub fn ez_demo_check(seed: u64) -> Result<(u64, f64, f64, usize), String> {
    let cfg = bundled("ez_demo").map_err(|e| e.to_string())?;
    let (model, params) = match (&cfg.coefficients, &cfg.generator) {
        (CoefficientSpec::Ramsey(m), GeneratorSpec::Ez { vartheta, psi, r }) => {
            (*m, EzParams::new(*vartheta, *psi, *r).map_err(|e| e.to_string())?)
        }
        _ => return Err("ez_demo must use ramsey + ez".into()),
    };
    let s = cfg.build().map_err(|e| e.to_string())?;
    let setup = EzSetup {
        horizon: cfg.grid.horizon,
        delta: cfg.grid.delta,
        step: cfg.grid.step,
        x0: cfg.x0,
        eps_dom: EPS_DOM,
    };
    let mc = McConfig { seed, ..s.mc };
    let big = solve_ez(&model, &params, &s.lattice, &setup, &mc, true).map_err(|e| e.to_string())?;
    let single = model.lattice(&[0.5], &[0.5], vec![0]).map_err(|e| e.to_string())?;
    let small = solve_ez(&model, &params, &single, &setup, &mc, true).map_err(|e| e.to_string())?;
    Ok((big.clamps + small.clamps, big.value.value, small.value.value, big.sign_violations))
}

/// Value and DPP outputs under 1 and 4 worker threads must serialise identically.
fn determinism(seed: u64) -> CriterionResult {
    let id = 12;
    let work = || -> Result<String, String> {
        let s = bundled("delayed_linear")
            .and_then(|mut c| {
                c.seed = seed;
                c.mc.n_paths = 3000;
                c.build()
            })
            .map_err(|e| e.to_string())?;
        let v = crate::control::value_function(0.0, &s.x0, &s.problem, &s.lattice, &s.mc).map_err(|e| e.to_string())?;
        let q = bundled("quadratic_steering").and_then(|c| c.build()).map_err(|e| e.to_string())?;
        let d = dpp_residual(0.0, &q.x0, 0.5, &q.problem, &q.lattice, &q.mc).map_err(|e| e.to_string())?;
        serde_json::to_string(&(v, d)).map_err(|e| e.to_string())
    };
    let run_with = |threads: usize| -> Result<String, String> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?
            .install(work)
    };
    match (run_with(1), run_with(4), run_with(4)) {
        (Ok(a), Ok(b), Ok(c)) => {
            let same = a == b && b == c;
            CriterionResult::new(
                id,
                name(id),
                same,
                (!same) as u8 as f64,
                0.0,
                format!("bytes={} digest={}", a.len(), &crate::digest::config_hash(&a)[..16]),
            )
        }
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => CriterionResult::failed(id, name(id), e),
    }
}
