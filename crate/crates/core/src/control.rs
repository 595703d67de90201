//! Cost functional, value function over a control lattice, backward semigroup
//! and the dynamic-programming residual.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::{solve, solve_with_terminal, BsdeConfig, BsdeError};
use crate::digest::config_hash;
use crate::grid::{GridError, TimeGrid};
use crate::lattice::{ControlLattice, LatticeError, PiecewiseControl};
use crate::model::{Coefficients, Generator, GeneratorConstants};
use crate::rng::{derive_seed, BrownianIncrements};
use crate::sdde::{simulate, simulate_with_increments, InitialData, McEstimate, PathEnsemble, SimError};
use crate::segment::{sup_norm_distance, PathSegment};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("estimated cost {estimated} state updates exceeds the budget of {limit}")]
    Budget { estimated: u128, limit: u128 },
    #[error("{0} is not a whole number of grid steps")]
    NotGridMultiple(f64),
    #[error("time window is invalid: {0}")]
    BadWindow(String),
}

/// Dynamics, recursive utility and discretisation of one control problem.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub name: String,
    pub coeffs: Coefficients,
    pub generator: Generator,
    pub horizon: f64,
    pub delta: f64,
    pub step: f64,
}

impl ControlProblem {
    /// Grid on `[t, T]` with the problem's step and delay.
    pub fn grid_from(&self, t: f64) -> Result<TimeGrid, GridError> {
        TimeGrid::with_step(t, self.horizon, self.delta, self.step)
    }

    pub fn lag_steps(&self) -> usize {
        (self.delta / self.step).round() as usize
    }

    /// True when `t` sits on the horizon (within a small fraction of a step).
    fn at_horizon(&self, t: f64) -> bool {
        (self.horizon - t).abs() <= 1e-9 * self.step
    }

    /// Fields that identify the problem in provenance hashes.
    pub fn fingerprint(&self) -> ProblemFingerprint {
        ProblemFingerprint {
            name: self.name.clone(),
            coefficients: self.coeffs.name.clone(),
            generator: self.generator.name.clone(),
            constants: self.generator.constants,
            horizon: self.horizon,
            delta: self.delta,
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemFingerprint {
    pub name: String,
    pub coefficients: String,
    pub generator: String,
    pub constants: GeneratorConstants,
    pub horizon: f64,
    pub delta: f64,
    pub step: f64,
}

/// Monte Carlo sizes, seed and budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub bsde: BsdeConfig,
    /// Largest number of lattice controls a single maximisation may enumerate.
    pub control_budget: usize,
    pub outer_paths: usize,
    pub inner_paths: usize,
    /// Cap on the estimated number of Euler state updates of a nested run.
    pub max_work: u128,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            seed: 0,
            bsde: BsdeConfig::default(),
            control_budget: 4096,
            outer_paths: 1000,
            inner_paths: 100,
            max_work: 2_000_000_000,
        }
    }
}

/// `J(t, gamma; v) = Y(t)` estimated on `mc.n_paths` paths.
pub fn cost_functional(
    t: f64,
    seg: &PathSegment,
    control: &PiecewiseControl,
    problem: &ControlProblem,
    mc: &McConfig,
) -> Result<McEstimate, ControlError> {
    if problem.at_horizon(t) {
        return Ok(McEstimate {
            mean: problem.generator.terminal(seg.view()),
            stderr: 0.0,
        });
    }
    let grid = problem.grid_from(t)?;
    let ens = simulate(&problem.coeffs, seg, control, &grid, mc.n_paths, mc.seed)?;
    Ok(solve(&ens, &problem.generator, &mc.bsde)?.initial_estimate())
}

/// Lattice maximum of the cost functional at `(t, gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub t: f64,
    pub segment: PathSegment,
    pub value: f64,
    pub argmax: usize,
    pub argmax_control: PiecewiseControl,
    pub stderr: f64,
    /// Cost of every lattice control in index order.
    pub per_control: Vec<f64>,
    pub config_hash: String,
}

/// Exhaustive maximisation over the lattice with common random numbers;
/// ties go to the lowest index.
pub fn value_function(
    t: f64,
    seg: &PathSegment,
    problem: &ControlProblem,
    lattice: &ControlLattice,
    mc: &McConfig,
) -> Result<ValueEstimate, ControlError> {
    let controls = lattice.enumerate(mc.control_budget)?;
    let costs: Vec<Result<McEstimate, ControlError>> = controls
        .par_iter()
        .map(|c| cost_functional(t, seg, c, problem, mc))
        .collect();
    let costs: Vec<McEstimate> = costs.into_iter().collect::<Result<_, _>>()?;
    let mut best = 0;
    for (i, c) in costs.iter().enumerate() {
        if c.mean > costs[best].mean {
            best = i;
        }
    }
    let hash = config_hash(&(t, seg, problem.fingerprint(), lattice, mc));
    Ok(ValueEstimate {
        t,
        segment: seg.clone(),
        value: costs[best].mean,
        argmax: best,
        argmax_control: controls[best].clone(),
        stderr: costs[best].stderr,
        per_control: costs.iter().map(|c| c.mean).collect(),
        config_hash: hash,
    })
}

/// `G_{theta, s}[xi]` on an existing ensemble; `theta` and `s` are times on its grid.
pub fn backward_semigroup(
    ens: &PathEnsemble,
    gen: &Generator,
    cfg: &BsdeConfig,
    theta: f64,
    s: f64,
    xi: &[f64],
) -> Result<Vec<f64>, ControlError> {
    let grid = ens.grid();
    let j_theta = grid
        .steps_in(theta - grid.t0())
        .ok_or(ControlError::NotGridMultiple(theta))?;
    let j_s = grid.steps_in(s - grid.t0()).ok_or(ControlError::NotGridMultiple(s))?;
    if j_theta > j_s || j_s > grid.n_steps() {
        return Err(ControlError::BadWindow(format!(
            "need t0 <= theta <= s <= T, got theta = {theta}, s = {s} on [{}, {}]",
            grid.t0(),
            grid.horizon()
        )));
    }
    Ok(solve_with_terminal(ens, gen, cfg, j_theta, j_s, xi)?.initial_values())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    pub t: f64,
    pub tau: f64,
    pub residual: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
    /// First-stage control attaining the right-hand side.
    pub rhs_argmax: usize,
    pub estimated_cost: u128,
    pub budget: u128,
    pub config_hash: String,
}

/// Estimated Euler state updates of [`dpp_residual`].
pub fn dpp_cost(
    problem: &ControlProblem,
    t: f64,
    tau: f64,
    lattice: &ControlLattice,
    mc: &McConfig,
) -> Result<u128, ControlError> {
    let grid = problem.grid_from(t)?;
    let k = grid.steps_in(tau).ok_or(ControlError::NotGridMultiple(tau))?;
    let n = grid.n_steps();
    let full = if k < n { lattice.with_switch(k) } else { lattice.clone() };
    let (first, second) = split(&full, k, n);
    let lhs = full.count() * mc.n_paths as u128 * n as u128;
    let outer = first.count() * mc.outer_paths as u128 * k as u128;
    let inner = mc.outer_paths as u128 * second.count() * mc.inner_paths as u128 * (n - k) as u128;
    Ok(lhs.saturating_add(outer).saturating_add(inner))
}

fn split(full: &ControlLattice, k: usize, n: usize) -> (ControlLattice, ControlLattice) {
    if k == 0 {
        let single = ControlLattice::new(vec![full.values()[0].clone()], vec![0], full.bounds().to_vec())
            .expect("value taken from a valid lattice");
        (single, full.clone())
    } else if k >= n {
        let single = ControlLattice::new(vec![full.values()[0].clone()], vec![0], full.bounds().to_vec())
            .expect("value taken from a valid lattice");
        (full.clone(), single)
    } else {
        full.split_at(k).expect("switch inserted at k")
    }
}

/// `|u(t, gamma) - max_{v on [t, t+tau]} E G_{t, t+tau}[u(t + tau, X_{t+tau})]|`.
///
/// `t + tau` is added to the lattice switch steps, so both sides range over the
/// same controls. The inner value is a lattice maximisation from every
/// realised outer segment on `mc.inner_paths` paths; its seed is shared by all
/// outer paths, which lets identical outer segments reuse one evaluation.
pub fn dpp_residual(
    t: f64,
    seg: &PathSegment,
    tau: f64,
    problem: &ControlProblem,
    lattice: &ControlLattice,
    mc: &McConfig,
) -> Result<DppReport, ControlError> {
    let grid = problem.grid_from(t)?;
    let n = grid.n_steps();
    let k = grid.steps_in(tau).ok_or(ControlError::NotGridMultiple(tau))?;
    if k > n {
        return Err(ControlError::BadWindow(format!("tau = {tau} runs past the horizon")));
    }
    let estimated = dpp_cost(problem, t, tau, lattice, mc)?;
    if estimated > mc.max_work {
        return Err(ControlError::Budget {
            estimated,
            limit: mc.max_work,
        });
    }
    let full = if k < n { lattice.with_switch(k) } else { lattice.clone() };
    let lhs = value_function(t, seg, problem, &full, mc)?;
    let hash = config_hash(&(t, tau, seg, problem.fingerprint(), lattice, mc));
    let report = |rhs: f64, rhs_stderr: f64, rhs_argmax: usize| DppReport {
        t,
        tau,
        residual: (lhs.value - rhs).abs(),
        lhs: lhs.value,
        rhs,
        lhs_stderr: lhs.stderr,
        rhs_stderr,
        rhs_argmax,
        estimated_cost: estimated,
        budget: mc.max_work,
        config_hash: hash.clone(),
    };
    if k == 0 {
        // G_{t,t} is the identity and X_t = gamma on every path
        return Ok(report(lhs.value, lhs.stderr, 0));
    }

    let (first, second) = split(&full, k, n);
    let first_controls = first.enumerate(mc.control_budget)?;
    let stage_grid = grid.truncated(k)?;
    let outer_inc = BrownianIncrements::generate(
        mc.seed,
        mc.outer_paths,
        k,
        problem.coeffs.noise_dim(),
        grid.step(),
    );
    let inner_mc = McConfig {
        n_paths: mc.inner_paths,
        seed: derive_seed(mc.seed, 1),
        ..*mc
    };
    let mid = t + tau;
    let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut best: Option<(usize, McEstimate)> = None;
    for (i, c1) in first_controls.iter().enumerate() {
        let ens = simulate_with_increments(
            &problem.coeffs,
            &InitialData::Shared(seg.clone()),
            c1,
            &stage_grid,
            outer_inc.clone(),
        )?;
        let segs: Vec<PathSegment> = (0..ens.n_paths())
            .map(|p| ens.terminal_segment(p).to_owned().with_anchor(mid))
            .collect();
        let mut fresh: Vec<(Vec<u64>, PathSegment)> = Vec::new();
        for s in &segs {
            let key = key_of(s);
            if !cache.contains_key(&key) && !fresh.iter().any(|(k2, _)| *k2 == key) {
                fresh.push((key, s.clone()));
            }
        }
        let values: Vec<Result<f64, ControlError>> = fresh
            .par_iter()
            .map(|(_, s)| {
                if problem.at_horizon(mid) {
                    Ok(problem.generator.terminal(s.view()))
                } else {
                    value_function(mid, s, problem, &second, &inner_mc).map(|v| v.value)
                }
            })
            .collect();
        for ((key, _), v) in fresh.into_iter().zip(values) {
            cache.insert(key, v?);
        }
        let xi: Vec<f64> = segs.iter().map(|s| cache[&key_of(s)]).collect();
        let g = solve_with_terminal(&ens, &problem.generator, &mc.bsde, 0, k, &xi)?;
        let est = g.initial_estimate();
        if best.as_ref().is_none_or(|(_, b)| est.mean > b.mean) {
            best = Some((i, est));
        }
    }
    let (arg, est) = best.expect("lattice is non-empty");
    Ok(report(est.mean, est.stderr, arg))
}

fn key_of(s: &PathSegment) -> Vec<u64> {
    s.values().iter().map(|x| x.to_bits()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    /// `max |u(gamma) - u(gamma')| / ||gamma - gamma'||_C`.
    pub lipschitz_ratio: f64,
    /// `max |u(gamma)| / (1 + ||gamma||_C)`.
    pub growth_ratio: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Lipschitz and linear-growth ratios of the value function over probe pairs
/// anchored at `t`.
pub fn value_regularity_probe(
    t: f64,
    pairs: &[(PathSegment, PathSegment)],
    problem: &ControlProblem,
    lattice: &ControlLattice,
    mc: &McConfig,
) -> Result<RegularityReport, ControlError> {
    let mut report = RegularityReport {
        lipschitz_ratio: 0.0,
        growth_ratio: 0.0,
        evaluated: 0,
        skipped: 0,
    };
    for (a, b) in pairs {
        let ua = value_function(t, a, problem, lattice, mc)?.value;
        let ub = value_function(t, b, problem, lattice, mc)?.value;
        for (u, s) in [(ua, a), (ub, b)] {
            report.growth_ratio = report.growth_ratio.max(u.abs() / (1.0 + s.sup_norm()));
        }
        let dist = sup_norm_distance(a.view(), b.view())
            .map_err(|e| ControlError::BadWindow(e.to_string()))?;
        if dist == 0.0 {
            report.skipped += 1;
            continue;
        }
        report.lipschitz_ratio = report.lipschitz_ratio.max((ua - ub).abs() / dist);
        report.evaluated += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve;
    use crate::model::GeneratorConstants;

    fn steering(t_end: f64, h: f64, sigma: f64) -> ControlProblem {
        ControlProblem {
            name: "steering".into(),
            coeffs: Coefficients::scalar("controlled_drift", 1.0, |_, _, v| v[0], move |_, _, _| sigma),
            generator: Generator::z_free(
                "zero",
                GeneratorConstants::default(),
                |_, _, _, _| 0.0,
                |s| -s.current()[0] * s.current()[0],
            ),
            horizon: t_end,
            delta: 0.0,
            step: h,
        }
    }

    fn x0(x: f64, h: f64) -> PathSegment {
        PathSegment::constant(0.0, h, 0, &[x])
    }

    fn mc(n: usize) -> McConfig {
        McConfig {
            n_paths: n,
            seed: 9,
            outer_paths: 50,
            inner_paths: 20,
            ..Default::default()
        }
    }

    #[test]
    fn constant_problem_ignores_control() {
        let mut p = steering(1.0, 0.1, 0.3);
        p.generator = Generator::z_free("zero", GeneratorConstants::default(), |_, _, _, _| 0.0, |_| 4.0);
        let l = ControlLattice::scalar(&[0.0, 1.0]).unwrap();
        let v = value_function(0.0, &x0(0.0, 0.1), &p, &l, &mc(200)).unwrap();
        assert!(v.per_control.iter().all(|c| (c - 4.0).abs() < 1e-12));
        assert_eq!(v.argmax, 0);
    }

    #[test]
    fn integrating_a_constant_control() {
        let mut p = steering(1.0, 0.1, 0.0);
        p.generator = Generator::z_free("zero", GeneratorConstants::default(), |_, _, _, _| 0.0, |s| s.current()[0]);
        let j = cost_functional(0.0, &x0(0.5, 0.1), &PiecewiseControl::constant(vec![1.0]), &p, &mc(3)).unwrap();
        assert!((j.mean - 1.5).abs() < 1e-12);
    }

    #[test]
    fn quadratic_steering_enumeration() {
        let p = steering(1.0, 0.1, 0.0);
        let l = ControlLattice::scalar(&[0.0, 1.0]).unwrap();
        let v = value_function(0.0, &x0(-1.0, 0.1), &p, &l, &mc(4)).unwrap();
        assert!((v.per_control[0] + 1.0).abs() < 1e-12);
        assert!(v.per_control[1].abs() < 1e-12);
        assert_eq!(v.argmax, 1);
        assert_eq!(v.argmax_control.at(0), &[1.0]);
        assert_eq!(v.config_hash.len(), 64);
        let single = ControlLattice::scalar(&[0.0]).unwrap();
        let s = value_function(0.0, &x0(-1.0, 0.1), &p, &single, &mc(4)).unwrap();
        assert_eq!(s.value, v.per_control[0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut p = steering(1.0, 0.1, 0.2);
        p.coeffs = Coefficients::scalar("nil", 0.0, |_, _, _| 0.0, |_, _, _| 0.2);
        let l = ControlLattice::scalar(&[0.0, 1.0, 2.0]).unwrap();
        let v = value_function(0.0, &x0(0.3, 0.1), &p, &l, &mc(100)).unwrap();
        assert_eq!(v.argmax, 0);
        assert_eq!(v.per_control[0], v.per_control[2]);
    }

    #[test]
    fn enlarging_lattice_never_lowers_value() {
        let p = steering(1.0, 0.1, 0.3);
        let small = ControlLattice::scalar(&[0.0]).unwrap();
        let big = ControlLattice::scalar(&[0.0, 0.5, 1.0]).unwrap().with_switch(5);
        let a = value_function(0.0, &x0(-1.0, 0.1), &p, &small, &mc(300)).unwrap();
        let b = value_function(0.0, &x0(-1.0, 0.1), &p, &big, &mc(300)).unwrap();
        assert!(b.value >= a.value);
    }

    #[test]
    fn budget_gate() {
        let p = steering(1.0, 0.1, 0.0);
        let l = ControlLattice::scalar(&[0.0, 1.0]).unwrap().with_switch(3).with_switch(6);
        let tight = McConfig {
            control_budget: 4,
            ..mc(2)
        };
        assert!(matches!(
            value_function(0.0, &x0(0.0, 0.1), &p, &l, &tight),
            Err(ControlError::Lattice(LatticeError::OverBudget { count: 8, .. }))
        ));
        let poor = McConfig { max_work: 10, ..mc(2) };
        assert!(matches!(
            dpp_residual(0.0, &x0(0.0, 0.1), 0.5, &p, &ControlLattice::scalar(&[0.0, 1.0]).unwrap(), &poor),
            Err(ControlError::Budget { .. })
        ));
    }

    #[test]
    fn semigroup_edge_cases() {
        let p = steering(1.0, 0.1, 0.3);
        let grid = p.grid_from(0.0).unwrap();
        let ens = simulate(&p.coeffs, &x0(0.0, 0.1), &PiecewiseControl::constant(vec![0.5]), &grid, 300, 2).unwrap();
        let zero = Generator::z_free("zero", GeneratorConstants::default(), |_, _, _, _| 0.0, |_| 0.0);
        let cfg = BsdeConfig::default();
        let c = backward_semigroup(&ens, &zero, &cfg, 0.2, 0.7, &vec![2.5; 300]).unwrap();
        assert!(c.iter().all(|x| (x - 2.5).abs() < 1e-12));
        let xi: Vec<f64> = (0..300).map(|i| i as f64).collect();
        assert_eq!(backward_semigroup(&ens, &zero, &cfg, 0.4, 0.4, &xi).unwrap(), xi);
        let full = solve(&ens, &p.generator, &cfg).unwrap();
        let g = backward_semigroup(&ens, &p.generator, &cfg, 0.0, 0.6, &full.y_column(6)).unwrap();
        assert_eq!(g, full.initial_values());
        assert!(backward_semigroup(&ens, &zero, &cfg, 0.5, 0.3, &xi).is_err());
    }

    #[test]
    fn dpp_on_deterministic_steering() {
        let p = steering(1.0, 0.05, 0.0);
        let l = ControlLattice::scalar(&[0.0, 1.0]).unwrap();
        let seg = x0(-1.0, 0.05);
        let zero = dpp_residual(0.0, &seg, 0.0, &p, &l, &mc(8)).unwrap();
        assert_eq!(zero.residual, 0.0);
        let half = dpp_residual(0.0, &seg, 0.5, &p, &l, &mc(8)).unwrap();
        assert!(half.residual < 1e-12, "{half:?}");
        assert!(half.lhs.abs() < 1e-12);
        let end = dpp_residual(0.0, &seg, 1.0, &p, &l, &mc(8)).unwrap();
        assert!(end.residual < 1e-12, "{end:?}");
    }

    #[test]
    fn dpp_single_control_is_tower_property() {
        // one control, g = 0: rhs is E[E[Phi | X_{t+tau}]], lhs is E[Phi]
        let p = steering(1.0, 0.1, 0.3);
        let l = ControlLattice::scalar(&[0.5]).unwrap();
        let cfg = McConfig {
            n_paths: 4000,
            outer_paths: 400,
            inner_paths: 400,
            ..mc(0)
        };
        let r = dpp_residual(0.0, &x0(-0.5, 0.1), 0.5, &p, &l, &cfg).unwrap();
        // Y(0) is deterministic, so the reported stderr is ~0; the Monte Carlo
        // error of E[X_T^2] with sd(X_T^2) ~ 0.13 on 400 outer paths is ~0.007
        assert!(r.residual < 0.02, "{r:?}");
        assert!((r.lhs + 0.09).abs() < 0.02);
    }

    #[test]
    fn regularity_of_identity_terminal() {
        let mut p = steering(1.0, 0.1, 0.0);
        p.coeffs = Coefficients::scalar("nil", 0.0, |_, _, _| 0.0, |_, _, _| 0.0);
        p.generator = Generator::z_free("zero", GeneratorConstants::default(), |_, _, _, _| 0.0, |s| s.current()[0]);
        let l = ControlLattice::scalar(&[0.0]).unwrap();
        let pairs = vec![(x0(0.0, 0.1), x0(1.0, 0.1)), (x0(2.0, 0.1), x0(2.0, 0.1)), (x0(-1.0, 0.1), x0(0.5, 0.1))];
        let r = value_regularity_probe(0.0, &pairs, &p, &l, &mc(2)).unwrap();
        assert!(r.lipschitz_ratio <= 1.0 + 1e-12);
        assert_eq!(r.skipped, 1);
        assert!(r.growth_ratio <= 1.0);
    }
}
