//! Delayed Ramsey capital dynamics under Epstein-Zin recursive utility.
//!
//! State `dX = [K pi f(X_t) - c] dt + sigma(X_t) dW`, utility
//! `dV = -g(V, c) dt + Z dW`, `V(T) = h(X_T)` with the Epstein-Zin aggregator
//! `g(u, c) = theta / (1 - 1/psi) (1 - r) u [(c / ((1 - r) u)^{1/(1-r)})^{1 - 1/psi} - 1]`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::solve;
use crate::control::{value_function, ControlError, ControlProblem, McConfig, ValueEstimate};
use crate::hjb::{Hamiltonian, HjbError, ProjectedState, Projection};
use crate::lattice::{ControlLattice, LatticeError};
use crate::model::{Coefficients, Generator, GeneratorConstants, TerminalFn};
use crate::sdde::simulate;
use crate::segment::{PathSegment, Segment};

/// Default floor for `(1 - r) u` and for `c` when `1 - 1/psi < 0`.
pub const EPS_DOM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EzError {
    #[error("invalid Epstein-Zin parameters: {0}")]
    Params(String),
    #[error("(1 - r) u must be positive and c admissible, got u = {u}, c = {c}")]
    Domain { u: f64, c: f64 },
    #[error("{count} domain clamps during a clean run; worst operands u = {u}, c = {c}")]
    Clamped { count: u64, u: f64, c: f64 },
    #[error("parameters are in neither monotone regime nor the psi = 1/r reduction")]
    Regime,
    #[error("zero consumption is only admissible when r > 1 and psi > 1")]
    ZeroConsumption,
    #[error("candidate grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    /// `r > 1`, `psi > 1`.
    I,
    /// `r < 1`, `psi < 1`.
    II,
    Other,
}

/// Rate of time preference, elasticity of intertemporal substitution and
/// relative risk aversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct EzParams {
    vartheta: f64,
    psi: f64,
    r: f64,
}

#[derive(Deserialize)]
struct RawParams {
    vartheta: f64,
    psi: f64,
    r: f64,
}

impl TryFrom<RawParams> for EzParams {
    type Error = EzError;
    fn try_from(p: RawParams) -> Result<Self, EzError> {
        EzParams::new(p.vartheta, p.psi, p.r)
    }
}

impl EzParams {
    pub fn new(vartheta: f64, psi: f64, r: f64) -> Result<Self, EzError> {
        for (name, x) in [("vartheta", vartheta), ("psi", psi), ("r", r)] {
            if !(x.is_finite() && x > 0.0) {
                return Err(EzError::Params(format!("{name} must be positive, got {x}")));
            }
        }
        if psi == 1.0 {
            return Err(EzError::Params("psi = 1 is excluded".into()));
        }
        if r == 1.0 {
            return Err(EzError::Params("r = 1 is excluded".into()));
        }
        Ok(Self { vartheta, psi, r })
    }

    pub fn vartheta(&self) -> f64 {
        self.vartheta
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn regime(&self) -> Regime {
        if self.r > 1.0 && self.psi > 1.0 {
            Regime::I
        } else if self.r < 1.0 && self.psi < 1.0 {
            Regime::II
        } else {
            Regime::Other
        }
    }

    /// `1 - 1/psi`.
    pub fn rho(&self) -> f64 {
        1.0 - 1.0 / self.psi
    }

    /// `psi = 1/r`, where the aggregator is additive CRRA.
    pub fn is_crra(&self) -> bool {
        (self.psi * self.r - 1.0).abs() <= 1e-12
    }

    /// Upper bound of `dg/du`: `theta (r - 1) / (1 - 1/psi)`.
    pub fn monotone_mu(&self) -> f64 {
        self.vartheta * (self.r - 1.0) / self.rho()
    }

    /// Sign of `1 - r`, which is the sign every utility value must carry.
    pub fn utility_sign(&self) -> f64 {
        (1.0 - self.r).signum()
    }
}

/// Aggregator value; rejects operands outside the natural domain.
pub fn ez_aggregator(p: &EzParams, u: f64, c: f64) -> Result<f64, EzError> {
    let w = (1.0 - p.r) * u;
    let rho = p.rho();
    if !(w > 0.0) || !(c >= 0.0) || (c == 0.0 && rho < 0.0) {
        return Err(EzError::Domain { u, c });
    }
    Ok(raw(p, w, c))
}

fn raw(p: &EzParams, w: f64, c: f64) -> f64 {
    let rho = p.rho();
    let base = c / w.powf(1.0 / (1.0 - p.r));
    p.vartheta / rho * w * (base.powf(rho) - 1.0)
}

/// Shared record of domain clamps across parallel evaluations.
#[derive(Debug, Default)]
pub struct ClampLog {
    count: AtomicU64,
    /// Operands with the smallest `(1 - r) u` seen.
    worst: Mutex<Option<(f64, f64, f64)>>,
}

impl ClampLog {
    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn worst(&self) -> Option<(f64, f64)> {
        self.worst.lock().expect("clamp log").map(|(_, u, c)| (u, c))
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
        *self.worst.lock().expect("clamp log") = None;
    }

    fn record(&self, w: f64, u: f64, c: f64) {
        self.count.fetch_add(1, Ordering::Relaxed);
        let mut g = self.worst.lock().expect("clamp log");
        let replace = match *g {
            None => true,
            Some((w0, u0, c0)) => (w, u, c).partial_cmp(&(w0, u0, c0)) == Some(std::cmp::Ordering::Less),
        };
        if replace {
            *g = Some((w, u, c));
        }
    }
}

/// Aggregator with `(1 - r) u` floored at `eps` (and `c` at `eps` when the
/// exponent is negative); every floor application is logged.
pub fn ez_aggregator_clamped(p: &EzParams, u: f64, c: f64, eps: f64, log: &ClampLog) -> f64 {
    let w = (1.0 - p.r) * u;
    let c_min = if p.rho() < 0.0 { eps } else { 0.0 };
    if !(w >= eps) || !(c >= c_min) {
        log.record(w, u, c);
    }
    let w = if w >= eps { w } else { eps };
    let c = if c >= c_min { c } else { c_min };
    raw(p, w, c)
}

/// Epstein-Zin driver in `(y, v = (pi, c))` with a clamp log.
///
/// `c_range` bounds consumption for the declared growth constant. The domain
/// handed to the implicit solver stops at `(1 - r) y = eps`, so the solver
/// itself never triggers a clamp.
pub fn ez_generator(
    params: EzParams,
    c_range: (f64, f64),
    eps: f64,
    terminal: TerminalFn,
) -> (Generator, Arc<ClampLog>) {
    let log = Arc::new(ClampLog::default());
    let rho = params.rho();
    let one_r = 1.0 - params.r;
    let alpha = rho / one_r;
    let p_growth = (1.0 - alpha).max(1.0);
    let c_pow = c_range.0.max(eps).powf(rho).max(c_range.1.max(eps).powf(rho));
    let m = (params.vartheta / rho).abs() * (c_pow * one_r.abs().powf(1.0 - alpha) + one_r.abs());
    let constants = GeneratorConstants {
        lipschitz: 0.0,
        monotone_mu: params.monotone_mu(),
        growth_m: m,
        growth_p: p_growth,
    };
    let l = Arc::clone(&log);
    let gen = Generator::z_free(
        format!("ez(vartheta={}, psi={}, r={})", params.vartheta, params.psi, params.r),
        constants,
        move |_, _, y, v| ez_aggregator_clamped(&params, y, v[1], eps, &l),
        |_| 0.0,
    )
    .with_terminal_fn(terminal)
    .with_smooth_in_y(true);
    let edge = eps / one_r;
    let gen = if one_r > 0.0 {
        gen.with_domain(edge, f64::INFINITY)
    } else {
        gen.with_domain(f64::NEG_INFINITY, edge)
    };
    (gen, log)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeAudit {
    pub regime: Regime,
    /// True when the regime carries a zero-violation contract.
    pub contract: bool,
    pub mu_declared: f64,
    /// Largest difference quotient in `u` seen on the lattice.
    pub mu_hat: f64,
    pub pairs: usize,
    pub violations: usize,
}

/// Checks `(u - u')(g(u, c) - g(u', c)) <= mu |u - u'|^2` for all `u`-pairs of a
/// dense lattice in the box, with `mu` the declared constant.
pub fn monotonicity_regime_audit(
    p: &EzParams,
    u_range: (f64, f64),
    c_range: (f64, f64),
    n_u: usize,
    n_c: usize,
) -> Result<RegimeAudit, EzError> {
    let grid = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
        if n <= 1 {
            return vec![lo];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    };
    let us = grid(u_range, n_u);
    let mu = p.monotone_mu();
    let mut audit = RegimeAudit {
        regime: p.regime(),
        contract: p.regime() != Regime::Other,
        mu_declared: mu,
        mu_hat: f64::NEG_INFINITY,
        pairs: 0,
        violations: 0,
    };
    for c in grid(c_range, n_c) {
        let g: Vec<f64> = us.iter().map(|&u| ez_aggregator(p, u, c)).collect::<Result<_, _>>()?;
        for i in 0..us.len() {
            for j in i + 1..us.len() {
                let du = us[j] - us[i];
                let dg = g[j] - g[i];
                audit.pairs += 1;
                audit.mu_hat = audit.mu_hat.max(dg / du);
                let tol = 1e-9 * (mu.abs() * du * du + (du * dg).abs());
                if du * dg > mu * du * du + tol {
                    audit.violations += 1;
                }
            }
        }
    }
    Ok(audit)
}

/// Demo instance with `f(gamma) = clamp(gamma(t - delta), 0, f_max)`,
/// `sigma(gamma) = sigma0 / (1 + exp(-gamma(t)))` and a sigmoid-type terminal
/// utility of the sign required by `1 - r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyModel {
    pub productivity: f64,
    pub f_max: f64,
    pub sigma0: f64,
    /// `[a1, a2]` for the investment share `pi`.
    pub pi_bounds: (f64, f64),
    /// `[b1, b2]` for consumption `c`.
    pub c_bounds: (f64, f64),
}

impl Default for RamseyModel {
    fn default() -> Self {
        Self {
            productivity: 0.5,
            f_max: 2.0,
            sigma0: 0.2,
            pi_bounds: (0.0, 1.0),
            c_bounds: (0.1, 1.0),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RamseyModel {
    pub fn f(&self, seg: Segment<'_>) -> f64 {
        seg.lagged()[0].clamp(0.0, self.f_max)
    }

    pub fn sigma(&self, seg: Segment<'_>) -> f64 {
        self.sigma0 * sigmoid(seg.current()[0])
    }

    pub fn coefficients(&self) -> Coefficients {
        let m = *self;
        let lip = m.productivity * m.pi_bounds.0.abs().max(m.pi_bounds.1.abs()) + 0.25 * m.sigma0;
        Coefficients::scalar(
            "ramsey",
            lip,
            move |_, s, v| m.productivity * v[0] * m.f(s) - v[1],
            move |_, s, _| m.sigma(s),
        )
    }

    /// `h < 0` when `r > 1` and `h > 0` when `r < 1`, bounded away from 0.
    pub fn terminal(&self, params: &EzParams) -> TerminalFn {
        if params.r() > 1.0 {
            Arc::new(|s: Segment<'_>| -0.5 - 1.0 / (1.0 + s.current()[0].exp()))
        } else {
            Arc::new(|s: Segment<'_>| 0.5 + sigmoid(s.current()[0]))
        }
    }

    /// Product lattice `{pi_i} x {c_j}` held on each switch interval.
    pub fn lattice(&self, pis: &[f64], cs: &[f64], switch_steps: Vec<usize>) -> Result<ControlLattice, EzError> {
        let values = pis.iter().flat_map(|&p| cs.iter().map(move |&c| vec![p, c])).collect();
        Ok(ControlLattice::new(values, switch_steps, vec![self.pi_bounds, self.c_bounds])?)
    }
}

/// Horizon, delay, step and initial capital of an Epstein-Zin run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EzSetup {
    pub horizon: f64,
    pub delta: f64,
    pub step: f64,
    pub x0: f64,
    pub eps_dom: f64,
}

impl Default for EzSetup {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            delta: 0.2,
            step: 0.05,
            x0: 1.0,
            eps_dom: EPS_DOM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub interval: usize,
    pub start_step: usize,
    pub start_time: f64,
    pub pi: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EzRun {
    pub regime: Regime,
    pub value: ValueEstimate,
    pub policy: Vec<PolicyRow>,
    pub clamps: u64,
    /// Paths on which `(1 - r) Y` is not positive at every step under the optimal control.
    pub sign_violations: usize,
}

/// Control problem wired from the model and parameters, plus its clamp log.
pub fn ez_problem(model: &RamseyModel, params: &EzParams, setup: &EzSetup) -> (ControlProblem, Arc<ClampLog>) {
    let (gen, log) = ez_generator(*params, model.c_bounds, setup.eps_dom, model.terminal(params));
    (
        ControlProblem {
            name: "ramsey-ez".into(),
            coeffs: model.coefficients(),
            generator: gen,
            horizon: setup.horizon,
            delta: setup.delta,
            step: setup.step,
        },
        log,
    )
}

/// Lattice value `V(0)`, optimal policy per switch interval and domain
/// diagnostics. With `clean` set, any clamp is an error.
pub fn solve_ez(
    model: &RamseyModel,
    params: &EzParams,
    lattice: &ControlLattice,
    setup: &EzSetup,
    mc: &McConfig,
    clean: bool,
) -> Result<EzRun, EzError> {
    if params.regime() == Regime::Other && !params.is_crra() {
        return Err(EzError::Regime);
    }
    let c_min = lattice.values().iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
    if c_min <= 0.0 && params.regime() != Regime::I {
        return Err(EzError::ZeroConsumption);
    }
    let (problem, log) = ez_problem(model, params, setup);
    let grid = problem.grid_from(0.0).map_err(ControlError::from)?;
    let x0 = PathSegment::constant(0.0, setup.step, grid.lag_steps(), &[setup.x0]);
    let value = value_function(0.0, &x0, &problem, lattice, mc)?;
    let ctrl = &value.argmax_control;
    let ens = simulate(&problem.coeffs, &x0, ctrl, &grid, mc.n_paths, mc.seed).map_err(ControlError::from)?;
    let sol = solve(&ens, &problem.generator, &mc.bsde).map_err(ControlError::from)?;
    let sign = params.utility_sign();
    let sign_violations = (0..sol.n_paths())
        .filter(|&p| (sol.first_step()..=sol.last_step()).any(|j| !(sign * sol.y(p, j) > 0.0)))
        .count();
    let clamps = log.count();
    if clean && clamps > 0 {
        let (u, c) = log.worst().unwrap_or((f64::NAN, f64::NAN));
        return Err(EzError::Clamped { count: clamps, u, c });
    }
    let policy = ctrl
        .switch_steps()
        .iter()
        .zip(ctrl.values())
        .enumerate()
        .map(|(i, (&s, v))| PolicyRow {
            interval: i,
            start_step: s,
            start_time: grid.step_time(s),
            pi: v[0],
            c: v[1],
        })
        .collect();
    Ok(EzRun {
        regime: params.regime(),
        value,
        policy,
        clamps,
        sign_violations,
    })
}

/// Candidate values on a tensor grid `times x axes[0] (x axes[1])`, row-major
/// with time slowest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateGrid {
    pub times: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl CandidateGrid {
    pub fn from_fn(times: Vec<f64>, axes: Vec<Vec<f64>>, u: impl Fn(f64, &[f64]) -> f64) -> Self {
        let mut values = Vec::new();
        for &t in &times {
            for idx in tensor_indices(&axes) {
                let x: Vec<f64> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
                values.push(u(t, &x));
            }
        }
        Self { times, axes, values }
    }

    fn space_len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    fn at(&self, ti: usize, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (a, &i) in self.axes.iter().zip(idx) {
            flat = flat * a.len() + i;
        }
        self.values[ti * self.space_len() + flat]
    }
}

fn tensor_indices(axes: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..a.len()).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    pub coords: Vec<f64>,
    pub value: f64,
    pub dt_term: f64,
    pub hamiltonian: f64,
    pub residual: f64,
    /// Interior in every direction, so all differences are centred.
    pub interior: bool,
}

/// Finite-difference HJB residual `u_t + H(t, gamma, u, Du, D^2u)` of a
/// candidate on a `k`-lag grid, `k` in `{1, 2}`, with the Epstein-Zin
/// Hamiltonian over the lattice control values.
pub fn ez_hjb_residual(
    model: &RamseyModel,
    params: &EzParams,
    setup: &EzSetup,
    controls: &[Vec<f64>],
    candidate: &CandidateGrid,
) -> Result<Vec<ResidualRow>, EzError> {
    let k = candidate.axes.len();
    let lag = (setup.delta / setup.step).round() as usize;
    let projection = match k {
        1 => Projection::current_only(lag, setup.step),
        2 if lag > 0 => Projection::current_and_lagged(lag, setup.step),
        _ => return Err(EzError::Grid(format!("need 1 or 2 coordinates (2 only with a delay), got {k}"))),
    };
    let nt = candidate.times.len();
    if nt < 2 || candidate.axes.iter().any(|a| a.len() < 3) {
        return Err(EzError::Grid("need at least 2 times and 3 points per axis".into()));
    }
    if candidate.values.len() != nt * candidate.space_len() {
        return Err(EzError::Grid("value count does not match the grid".into()));
    }
    for &u in &candidate.values {
        if !((1.0 - params.r()) * u > 0.0) {
            return Err(EzError::Domain { u, c: f64::NAN });
        }
    }
    let (mut problem, _) = ez_problem(model, params, setup);
    // strict evaluation: a clamp here would hide a domain error
    let p = *params;
    problem.generator = problem.generator.map_driver(
        problem.generator.name.clone(),
        problem.generator.constants,
        move |_, _, y, _, v| ez_aggregator(&p, y, v[1]).unwrap_or(f64::NAN),
    );
    let ham = Hamiltonian::new(problem.coeffs, problem.generator, controls.to_vec(), projection)?;
    let mut rows = Vec::new();
    for ti in 0..nt {
        let t = candidate.times[ti];
        let (ta, tb) = if ti == 0 { (0, 1) } else if ti == nt - 1 { (nt - 2, nt - 1) } else { (ti - 1, ti + 1) };
        for idx in tensor_indices(&candidate.axes) {
            let x: Vec<f64> = idx.iter().zip(&candidate.axes).map(|(&i, a)| a[i]).collect();
            let u = candidate.at(ti, &idx);
            let dt_term =
                (candidate.at(tb, &idx) - candidate.at(ta, &idx)) / (candidate.times[tb] - candidate.times[ta]);
            let mut grad = vec![0.0; k];
            let mut hess = DMatrix::zeros(k, k);
            let mut interior = ti > 0 && ti < nt - 1;
            for d in 0..k {
                let ax = &candidate.axes[d];
                let i = idx[d].clamp(1, ax.len() - 2);
                interior &= i == idx[d];
                let mut lo = idx.clone();
                let mut mid = idx.clone();
                let mut hi = idx.clone();
                lo[d] = i - 1;
                mid[d] = i;
                hi[d] = i + 1;
                let (xl, xm, xh) = (ax[i - 1], ax[i], ax[i + 1]);
                let (fl, fm, fh) = (candidate.at(ti, &lo), candidate.at(ti, &mid), candidate.at(ti, &hi));
                grad[d] = (fh - fl) / (xh - xl);
                hess[(d, d)] = 2.0 * ((fh - fm) / (xh - xm) - (fm - fl) / (xm - xl)) / (xh - xl);
            }
            let state = ProjectedState { coords: x.clone() };
            let h = ham.eval_projected(t, &state, u, &grad, &hess)?;
            if !h.is_finite() {
                return Err(EzError::Domain { u, c: f64::NAN });
            }
            rows.push(ResidualRow {
                t,
                coords: x,
                value: u,
                dt_term,
                hamiltonian: h,
                residual: dt_term + h,
                interior,
            });
        }
    }
    Ok(rows)
}

/// `max |u(T, x) - h(embed(x))|` over the last time slice of the candidate.
pub fn terminal_mismatch(model: &RamseyModel, params: &EzParams, setup: &EzSetup, candidate: &CandidateGrid) -> f64 {
    let lag = (setup.delta / setup.step).round() as usize;
    let projection = if candidate.axes.len() == 2 {
        Projection::current_and_lagged(lag, setup.step)
    } else {
        Projection::current_only(lag, setup.step)
    };
    let h = model.terminal(params);
    let last = candidate.times.len() - 1;
    tensor_indices(&candidate.axes)
        .into_iter()
        .map(|idx| {
            let x: Vec<f64> = idx.iter().zip(&candidate.axes).map(|(&i, a)| a[i]).collect();
            let seg = projection
                .embed(candidate.times[last], &ProjectedState { coords: x })
                .expect("coordinates match the projection");
            (candidate.at(last, &idx) - h(seg.view())).abs()
        })
        .fold(0.0, f64::max)
}

/// Random in-domain probes `(u, c)` for the additive CRRA reduction; returns
/// the largest deviation from `theta (c^{1-r} / (1 - r) - u)`.
pub fn crra_reduction_error(p: &EzParams, n: usize, seed: u64) -> Result<f64, EzError> {
    if !p.is_crra() {
        return Err(EzError::Params("psi != 1/r".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = p.utility_sign();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let u = sign * rng.gen_range(0.05..3.0);
        let c: f64 = rng.gen_range(0.05..3.0);
        let crra = p.vartheta() * (c.powf(1.0 - p.r()) / (1.0 - p.r()) - u);
        worst = worst.max((ez_aggregator(p, u, c)? - crra).abs());
    }
    Ok(worst)
}
