//! Backward scheme for `Y(s) = Phi(X_T) + int_s^T g(r, X_r, Y, Z, v) dr - int_s^T Z dW`.
//!
//! Per step `k` (backwards):
//! `Z_k = E_k[(Y_{k+1} - E_k[Y_{k+1}]) dW_k] / h`, `A_k = E_k[Y_{k+1}]`, and `Y_k` solves
//! `Y_k = A_k + h g(t_k, X_{t_k}, Y_k, Z_k, v_k)`.
//! Conditional expectations are least-squares projections on segment features,
//! or the identity when the ensemble is deterministic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Generator;
use crate::regression::{Design, FeatureBasis, RegressionError};
use crate::sdde::{McEstimate, PathEnsemble};
use crate::segment::Segment;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BsdeError {
    #[error("implicit step is ill-posed: h * mu = {0} >= 1")]
    IllPosedStep(f64),
    #[error("implicit solve did not converge at forward step {step}, path {path}: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence {
        step: usize,
        path: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("no root bracket inside the generator domain at step {step}, path {path} (a = {a})")]
    NoBracket { step: usize, path: usize, a: f64 },
    #[error("regression failed at forward step {step}: {source}")]
    Regression {
        step: usize,
        #[source]
        source: RegressionError,
    },
    #[error("non-finite value at forward step {step}, path {path}")]
    NonFinite { step: usize, path: usize },
    #[error("terminal data has {got} entries for {expected} paths")]
    TerminalShape { expected: usize, got: usize },
    #[error("terminal data is non-finite on path {0}")]
    TerminalNonFinite(usize),
    #[error("bad time window [{theta}, {s}] on a grid of {n_steps} steps")]
    BadWindow { theta: usize, s: usize, n_steps: usize },
}

/// How `Y` is advanced across a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `Y_k = A_k + h g(Y_k)`.
    #[default]
    Implicit,
    /// `Y_k = E_k[Y_{k+1} + h g(Y_{k+1})]`; kept as a negative control.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdeConfig {
    pub basis: FeatureBasis,
    pub scheme: Scheme,
    pub newton_tol: f64,
    pub max_iter: usize,
    pub max_condition: f64,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self {
            basis: FeatureBasis::default(),
            scheme: Scheme::Implicit,
            newton_tol: 1e-12,
            max_iter: 100,
            max_condition: 1e10,
        }
    }
}

/// Iteration counts of the scalar implicit solves.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct NewtonStats {
    pub solves: u64,
    pub total_iterations: u64,
    pub max_iterations: usize,
    pub bisection_steps: u64,
}

impl NewtonStats {
    fn merge(&mut self, o: &NewtonStats) {
        self.solves += o.solves;
        self.total_iterations += o.total_iterations;
        self.max_iterations = self.max_iterations.max(o.max_iterations);
        self.bisection_steps += o.bisection_steps;
    }
}

/// `(Y, Z)` on forward steps `theta..=s` of an ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct BsdeSolution {
    n_paths: usize,
    noise_dim: usize,
    first_step: usize,
    last_step: usize,
    step_times: Vec<f64>,
    /// `[path x (last_step - first_step + 1)]`.
    y: Vec<f64>,
    /// `[path x (last_step - first_step) x d]`.
    z: Vec<f64>,
    pub condition_numbers: Vec<f64>,
    pub newton: NewtonStats,
    pub config: BsdeConfig,
    pub deterministic: bool,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn first_step(&self) -> usize {
        self.first_step
    }

    pub fn last_step(&self) -> usize {
        self.last_step
    }

    fn width(&self) -> usize {
        self.last_step - self.first_step + 1
    }

    /// `Y` at forward step `j` (absolute index on the ensemble grid).
    pub fn y(&self, path: usize, j: usize) -> f64 {
        self.y[path * self.width() + j - self.first_step]
    }

    pub fn z(&self, path: usize, j: usize) -> &[f64] {
        let w = self.width() - 1;
        let off = (path * w + j - self.first_step) * self.noise_dim;
        &self.z[off..off + self.noise_dim]
    }

    /// `Y` at step `j` for every path.
    pub fn y_column(&self, j: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.y(p, j)).collect()
    }

    pub fn initial_values(&self) -> Vec<f64> {
        self.y_column(self.first_step)
    }

    /// Mean of `Y` at the first step with its standard error.
    pub fn initial_estimate(&self) -> McEstimate {
        McEstimate::from_samples(&self.initial_values())
    }

    pub fn step_time(&self, j: usize) -> f64 {
        self.step_times[j - self.first_step]
    }

    /// Per-step `(time, mean Y, std Y, mean |Z|)`; `|Z|` is 0 at the last step.
    pub fn step_summary(&self) -> Vec<StepSummary> {
        (self.first_step..=self.last_step)
            .map(|j| {
                let ys = self.y_column(j);
                let n = ys.len() as f64;
                let mean = ys.iter().sum::<f64>() / n;
                let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
                let mean_abs_z = if j < self.last_step {
                    (0..self.n_paths)
                        .map(|p| self.z(p, j).iter().map(|x| x * x).sum::<f64>().sqrt())
                        .sum::<f64>()
                        / n
                } else {
                    0.0
                };
                StepSummary {
                    step: j,
                    time: self.step_time(j),
                    mean_y: mean,
                    std_y: std,
                    mean_abs_z,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub time: f64,
    pub mean_y: f64,
    pub std_y: f64,
    pub mean_abs_z: f64,
}

/// Full solve with terminal data `Phi(X_T)`.
pub fn solve(ens: &PathEnsemble, gen: &Generator, cfg: &BsdeConfig) -> Result<BsdeSolution, BsdeError> {
    let xi: Vec<f64> = (0..ens.n_paths())
        .map(|p| gen.terminal(ens.terminal_segment(p)))
        .collect();
    solve_with_terminal(ens, gen, cfg, 0, ens.grid().n_steps(), &xi)
}

/// Solves on forward steps `theta..=s` with terminal data `xi` at step `s`.
/// This is the backward semigroup `G_{theta, s}[xi]` on the given ensemble.
pub fn solve_with_terminal(
    ens: &PathEnsemble,
    gen: &Generator,
    cfg: &BsdeConfig,
    theta: usize,
    s: usize,
    xi: &[f64],
) -> Result<BsdeSolution, BsdeError> {
    let grid = ens.grid();
    let n_paths = ens.n_paths();
    let d = ens.noise_dim();
    let h = grid.step();
    if theta > s || s > grid.n_steps() {
        return Err(BsdeError::BadWindow {
            theta,
            s,
            n_steps: grid.n_steps(),
        });
    }
    if xi.len() != n_paths {
        return Err(BsdeError::TerminalShape {
            expected: n_paths,
            got: xi.len(),
        });
    }
    if let Some(p) = xi.iter().position(|x| !x.is_finite()) {
        return Err(BsdeError::TerminalNonFinite(p));
    }
    if cfg.scheme == Scheme::Implicit && h * gen.constants.monotone_mu.max(0.0) >= 1.0 {
        return Err(BsdeError::IllPosedStep(h * gen.constants.monotone_mu));
    }

    let width = s - theta + 1;
    let mut y = vec![0.0; n_paths * width];
    let mut z = vec![0.0; n_paths * (width - 1) * d];
    for (p, x) in xi.iter().enumerate() {
        y[p * width + width - 1] = *x;
    }
    let deterministic = ens.is_deterministic();
    let mut condition_numbers = vec![1.0; width - 1];
    let mut newton = NewtonStats::default();
    let n_vars = {
        let mut buf = Vec::new();
        cfg.basis.raw(ens.step_segment(0, theta), &mut buf);
        buf.len()
    };

    let mut next: Vec<f64> = xi.to_vec();
    for j in (theta..s).rev() {
        let t = grid.step_time(j);
        let v = ens.control().at(j);
        let (cond_exp, zs): (Vec<f64>, Vec<f64>) = if deterministic {
            (next.clone(), vec![0.0; n_paths * d])
        } else {
            let mut raw = vec![0.0; n_paths * n_vars];
            raw.par_chunks_mut(n_vars.max(1)).enumerate().for_each(|(p, out)| {
                let mut buf = Vec::with_capacity(n_vars);
                cfg.basis.raw(ens.step_segment(p, j), &mut buf);
                out[..n_vars].copy_from_slice(&buf);
            });
            let design = Design::fit(&raw, n_vars, cfg.basis.degree, cfg.max_condition)
                .map_err(|source| BsdeError::Regression { step: j, source })?;
            condition_numbers[j - theta] = design.condition;
            // Z from the centred target (Y_{k+1} - E_k[Y_{k+1}]) dW / h
            let proj = design.project(&next);
            let mut zs = vec![0.0; n_paths * d];
            for l in 0..d {
                let target: Vec<f64> = (0..n_paths)
                    .map(|p| (next[p] - proj[p]) * ens.increments().get(p, j)[l] / h)
                    .collect();
                for (p, zp) in design.project(&target).into_iter().enumerate() {
                    zs[p * d + l] = zp;
                }
            }
            let a = match cfg.scheme {
                Scheme::Implicit => proj,
                Scheme::Explicit => {
                    let target: Vec<f64> = (0..n_paths)
                        .into_par_iter()
                        .map(|p| {
                            let zp = &zs[p * d..(p + 1) * d];
                            next[p] + h * gen.eval(t, ens.step_segment(p, j), next[p], zp, v)
                        })
                        .collect();
                    design.project(&target)
                }
            };
            (a, zs)
        };

        let results: Vec<Result<(f64, NewtonStats), BsdeError>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let seg = ens.step_segment(p, j);
                let zp = &zs[p * d..(p + 1) * d];
                let mut stats = NewtonStats::default();
                let val = match cfg.scheme {
                    Scheme::Implicit => {
                        let out = implicit_scalar_step(cond_exp[p], t, seg, zp, v, gen, h, cfg.newton_tol, cfg.max_iter)
                            .map_err(|e| e.at(j, p))?;
                        stats.solves = 1;
                        stats.total_iterations = out.iterations as u64;
                        stats.max_iterations = out.iterations;
                        stats.bisection_steps = out.bisection_steps as u64;
                        out.y
                    }
                    Scheme::Explicit if deterministic => next[p] + h * gen.eval(t, seg, next[p], zp, v),
                    Scheme::Explicit => cond_exp[p],
                };
                if !val.is_finite() {
                    return Err(BsdeError::NonFinite { step: j, path: p });
                }
                Ok((val, stats))
            })
            .collect();
        for (p, r) in results.into_iter().enumerate() {
            let (val, stats) = r?;
            newton.merge(&stats);
            next[p] = val;
            y[p * width + j - theta] = val;
            let off = (p * (width - 1) + j - theta) * d;
            z[off..off + d].copy_from_slice(&zs[p * d..(p + 1) * d]);
        }
    }

    Ok(BsdeSolution {
        n_paths,
        noise_dim: d,
        first_step: theta,
        last_step: s,
        step_times: (theta..=s).map(|j| grid.step_time(j)).collect(),
        y,
        z,
        condition_numbers,
        newton,
        config: *cfg,
        deterministic,
    })
}

/// Result of one scalar implicit solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitSolve {
    pub y: f64,
    pub residual: f64,
    pub iterations: usize,
    pub bisection_steps: usize,
}

/// Failure of [`implicit_scalar_step`] before it is tied to a path and step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImplicitError {
    IllPosed(f64),
    NoBracket(f64),
    NoConvergence { residual: f64, iterations: usize },
}

impl ImplicitError {
    fn at(self, step: usize, path: usize) -> BsdeError {
        match self {
            ImplicitError::IllPosed(hm) => BsdeError::IllPosedStep(hm),
            ImplicitError::NoBracket(a) => BsdeError::NoBracket { step, path, a },
            ImplicitError::NoConvergence { residual, iterations } => BsdeError::NoConvergence {
                step,
                path,
                residual,
                iterations,
            },
        }
    }
}

/// Solves `y = a + h g(t, seg, y, z, v)` for `y` inside the generator domain.
///
/// `F(y) = y - h g(y) - a` is strictly increasing when `h max(mu, 0) < 1`, so
/// the root is bracketed by expanding from `a` and then refined by Newton
/// steps (central-difference slope) that fall back to bisection whenever they
/// leave the bracket. Converged means `|F(y)| <= tol max(1, |y|)`.
#[allow(clippy::too_many_arguments)]
pub fn implicit_scalar_step(
    a: f64,
    t: f64,
    seg: Segment<'_>,
    z: &[f64],
    v: &[f64],
    gen: &Generator,
    h: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ImplicitSolve, ImplicitError> {
    let hm = h * gen.constants.monotone_mu;
    if hm >= 1.0 {
        return Err(ImplicitError::IllPosed(hm));
    }
    let f = |y: f64| y - h * gen.eval(t, seg, y, z, v) - a;
    let (dlo, dhi) = gen.domain();
    let scale = |y: f64| tol * y.abs().max(1.0);

    // starting point inside the open domain
    let y0 = if gen.in_domain(a) {
        a
    } else if a <= dlo {
        inner_point(dlo, dhi, 0)
    } else {
        inner_point(dhi, dlo, 0)
    };
    let f0 = f(y0);
    if !f0.is_finite() {
        return Err(ImplicitError::NoBracket(a));
    }
    if f0.abs() <= scale(y0) {
        return Ok(ImplicitSolve {
            y: y0,
            residual: f0,
            iterations: 0,
            bisection_steps: 0,
        });
    }

    // bracket [lo, hi] with F(lo) < 0 < F(hi)
    let upward = f0 < 0.0;
    let (mut lo, mut hi, mut flo, mut fhi) = (y0, y0, f0, f0);
    let mut found = false;
    for k in 0..200 {
        let cand = if upward {
            if dhi.is_finite() {
                dhi - (dhi - y0) * 0.5f64.powi(k + 1)
            } else {
                y0 + (1.0 + y0.abs()) * 2f64.powi(k)
            }
        } else if dlo.is_finite() {
            dlo + (y0 - dlo) * 0.5f64.powi(k + 1)
        } else {
            y0 - (1.0 + y0.abs()) * 2f64.powi(k)
        };
        let fc = f(cand);
        if !fc.is_finite() {
            break;
        }
        if upward {
            if fc >= 0.0 {
                hi = cand;
                fhi = fc;
                found = true;
                break;
            }
            lo = cand;
            flo = fc;
        } else {
            if fc <= 0.0 {
                lo = cand;
                flo = fc;
                found = true;
                break;
            }
            hi = cand;
            fhi = fc;
        }
    }
    if !found {
        return Err(ImplicitError::NoBracket(a));
    }
    if flo == 0.0 || fhi == 0.0 {
        let y = if flo == 0.0 { lo } else { hi };
        return Ok(ImplicitSolve {
            y,
            residual: 0.0,
            iterations: 0,
            bisection_steps: 0,
        });
    }

    let mut y = if upward { lo } else { hi };
    let mut fy = if upward { flo } else { fhi };
    let mut bisections = 0;
    for it in 1..=max_iter {
        let e = 1e-7 * y.abs().max(1.0);
        let (ya, yb) = (
            if gen.in_domain(y - e) { y - e } else { y },
            if gen.in_domain(y + e) { y + e } else { y },
        );
        let slope = if yb > ya { (f(yb) - f(ya)) / (yb - ya) } else { f64::NAN };
        let mut cand = if slope.is_finite() && slope > 0.0 {
            y - fy / slope
        } else {
            f64::NAN
        };
        if !(cand > lo && cand < hi) {
            cand = 0.5 * (lo + hi);
            bisections += 1;
        }
        y = cand;
        fy = f(y);
        if fy.abs() <= scale(y) {
            return Ok(ImplicitSolve {
                y,
                residual: fy,
                iterations: it,
                bisection_steps: bisections,
            });
        }
        if fy < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        if hi - lo <= 4.0 * f64::EPSILON * y.abs().max(f64::MIN_POSITIVE) {
            // bracket collapsed to adjacent floats
            return Ok(ImplicitSolve {
                y,
                residual: fy,
                iterations: it,
                bisection_steps: bisections,
            });
        }
    }
    Err(ImplicitError::NoConvergence {
        residual: fy,
        iterations: max_iter,
    })
}

fn inner_point(bound: f64, other: f64, k: i32) -> f64 {
    let width = if other.is_finite() { (other - bound).abs() } else { 1.0 };
    let dir = if other > bound { 1.0 } else { -1.0 };
    bound + dir * width.min(1.0) * 0.5f64.powi(k + 1)
}

/// Where a comparison precondition was seen to fail.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreconditionWitness {
    Terminal { path: usize, phi1: f64, phi2: f64 },
    Driver { path: usize, step: usize, g1: f64, g2: f64 },
    EnsembleMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub applicable: bool,
    pub witness: Option<PreconditionWitness>,
    pub pairs: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    /// Largest `Y1 - Y2` seen.
    pub max_excess: f64,
    pub slack: f64,
}

/// Checks `Y1 <= Y2 + slack` at every `(path, step)` after verifying
/// `Phi1 <= Phi2` and `g1 <= g2` along `(Y2, Z2)` sample-wise.
pub fn comparison_check(
    sol1: &BsdeSolution,
    sol2: &BsdeSolution,
    gen1: &Generator,
    gen2: &Generator,
    ens: &PathEnsemble,
    slack: f64,
) -> ComparisonReport {
    let mut report = ComparisonReport {
        applicable: false,
        witness: None,
        pairs: 0,
        violations: 0,
        violation_fraction: 0.0,
        max_excess: f64::NEG_INFINITY,
        slack,
    };
    if sol1.n_paths != ens.n_paths()
        || sol2.n_paths != ens.n_paths()
        || sol1.first_step != sol2.first_step
        || sol1.last_step != sol2.last_step
        || sol1.last_step != ens.grid().n_steps()
    {
        report.witness = Some(PreconditionWitness::EnsembleMismatch);
        return report;
    }
    for p in 0..ens.n_paths() {
        let seg = ens.terminal_segment(p);
        let (phi1, phi2) = (gen1.terminal(seg), gen2.terminal(seg));
        if phi1 > phi2 {
            report.witness = Some(PreconditionWitness::Terminal { path: p, phi1, phi2 });
            return report;
        }
    }
    let grid = ens.grid();
    for j in sol2.first_step..sol2.last_step {
        let t = grid.step_time(j);
        let v = ens.control().at(j);
        for p in 0..ens.n_paths() {
            let seg = ens.step_segment(p, j);
            let (y2, z2) = (sol2.y(p, j), sol2.z(p, j));
            let (g1, g2) = (gen1.eval(t, seg, y2, z2, v), gen2.eval(t, seg, y2, z2, v));
            if g1 > g2 {
                report.witness = Some(PreconditionWitness::Driver { path: p, step: j, g1, g2 });
                return report;
            }
        }
    }
    report.applicable = true;
    for j in sol1.first_step..=sol1.last_step {
        for p in 0..ens.n_paths() {
            let excess = sol1.y(p, j) - sol2.y(p, j);
            report.max_excess = report.max_excess.max(excess);
            report.pairs += 1;
            if excess > slack {
                report.violations += 1;
            }
        }
    }
    report.violation_fraction = report.violations as f64 / report.pairs as f64;
    report
}

/// `|Y(t0; gamma) - Y(t0; gamma')|` against `||gamma - gamma'||_C` for one probe pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContinuityPair {
    pub y0: f64,
    pub y0_other: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateAudit {
    /// `E[sup_k |Y_k|^2]`.
    pub mean_sup_y2: McEstimate,
    /// Largest continuity ratio over pairs with positive distance.
    pub continuity_ratio: Option<f64>,
}

pub fn estimate_audit(sol: &BsdeSolution, pairs: &[ContinuityPair]) -> EstimateAudit {
    let sups: Vec<f64> = (0..sol.n_paths)
        .map(|p| {
            (sol.first_step..=sol.last_step)
                .map(|j| sol.y(p, j).powi(2))
                .fold(0.0, f64::max)
        })
        .collect();
    let continuity_ratio = pairs
        .iter()
        .filter(|c| c.distance > 0.0)
        .map(|c| (c.y0 - c.y0_other).abs() / c.distance)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    EstimateAudit {
        mean_sup_y2: McEstimate::from_samples(&sups),
        continuity_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::lattice::PiecewiseControl;
    use crate::model::{Coefficients, GeneratorConstants};
    use crate::sdde::simulate;
    use crate::segment::PathSegment;

    fn linear(mu: f64, phi: f64) -> Generator {
        Generator::z_free(
            "linear",
            GeneratorConstants {
                monotone_mu: mu,
                growth_m: mu.abs(),
                ..Default::default()
            },
            move |_, _, y, _| mu * y,
            move |_| phi,
        )
    }

    fn cubic() -> Generator {
        Generator::z_free(
            "cubic",
            GeneratorConstants {
                growth_m: 1.0,
                growth_p: 3.0,
                ..Default::default()
            },
            |_, _, y, _| -y * y * y,
            |_| 2.0,
        )
    }

    fn seg0() -> PathSegment {
        PathSegment::constant(0.0, 0.1, 0, &[0.0])
    }

    fn frozen(t: f64, h: f64, n_paths: usize) -> PathEnsemble {
        let grid = TimeGrid::with_step(0.0, t, 0.0, h).unwrap();
        let c = Coefficients::scalar("zero", 0.0, |_, _, _| 0.0, |_, _, _| 0.0);
        simulate(&c, &PathSegment::constant(0.0, h, 0, &[1.0]), &PiecewiseControl::constant(vec![0.0]), &grid, n_paths, 0).unwrap()
    }

    fn gbm_ens(n_paths: usize, seed: u64) -> PathEnsemble {
        let grid = TimeGrid::with_step(0.0, 1.0, 0.0, 0.05).unwrap();
        let c = Coefficients::scalar("gbm", 0.4, |_, g, _| 0.2 * g.current()[0], |_, g, _| 0.2 * g.current()[0]);
        simulate(&c, &PathSegment::constant(0.0, 0.05, 0, &[1.0]), &PiecewiseControl::constant(vec![0.0]), &grid, n_paths, seed).unwrap()
    }

    #[test]
    fn implicit_step_closed_forms() {
        let s = seg0();
        let zero = Generator::z_free("zero", GeneratorConstants::default(), |_, _, _, _| 0.0, |_| 0.0);
        let r = implicit_scalar_step(0.7, 0.0, s.view(), &[0.0], &[0.0], &zero, 0.1, 1e-12, 100).unwrap();
        assert_eq!(r.y, 0.7);
        let lin = linear(-1.0, 0.0);
        let r = implicit_scalar_step(1.0, 0.0, s.view(), &[0.0], &[0.0], &lin, 0.1, 1e-12, 100).unwrap();
        assert!((r.y - 1.0 / 1.1).abs() < 1e-14);
    }

    #[test]
    fn implicit_cubic_matches_bisection_oracle() {
        let r = implicit_scalar_step(2.0, 0.0, seg0().view(), &[0.0], &[0.0], &cubic(), 0.5, 1e-12, 100).unwrap();
        // plain bisection on y + 0.5 y^3 - 2 over [0, 2]
        let (mut lo, mut hi) = (0.0f64, 2.0f64);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if m + 0.5 * m * m * m - 2.0 < 0.0 {
                lo = m
            } else {
                hi = m
            }
        }
        assert!((r.y - lo).abs() < 1e-12, "{} vs {}", r.y, lo);
    }

    #[test]
    fn implicit_step_respects_domain() {
        // g(y) = -1/y on y > 0: y + h/y = a
        let g = Generator::z_free("inv", GeneratorConstants::default(), |_, _, y, _| -1.0 / y, |_| 1.0)
            .with_domain(0.0, f64::INFINITY);
        let (a, h) = (0.3, 0.01);
        let r = implicit_scalar_step(a, 0.0, seg0().view(), &[0.0], &[0.0], &g, h, 1e-12, 100).unwrap();
        let exact = 0.5 * (a + (a * a - 4.0 * h).sqrt());
        assert!((r.y - exact).abs() < 1e-10, "{} vs {}", r.y, exact);
    }

    #[test]
    fn ill_posed_step_is_rejected() {
        let err = implicit_scalar_step(1.0, 0.0, seg0().view(), &[0.0], &[0.0], &linear(20.0, 0.0), 0.1, 1e-12, 100).unwrap_err();
        assert!(matches!(err, ImplicitError::IllPosed(_)));
    }

    #[test]
    fn constant_terminal_zero_driver() {
        let ens = gbm_ens(500, 1);
        let zero = Generator::z_free("zero", GeneratorConstants::default(), |_, _, _, _| 0.0, |_| 3.0);
        let sol = solve(&ens, &zero, &BsdeConfig::default()).unwrap();
        for p in 0..ens.n_paths() {
            for j in 0..=ens.grid().n_steps() {
                assert!((sol.y(p, j) - 3.0).abs() < 1e-12);
            }
            for j in 0..ens.grid().n_steps() {
                assert!(sol.z(p, j)[0].abs() < 1e-10);
            }
        }
        let audit = estimate_audit(&sol, &[]);
        assert!((audit.mean_sup_y2.mean - 9.0).abs() < 1e-10);
    }

    #[test]
    fn linear_driver_deterministic() {
        let ens = frozen(1.0, 1e-3, 4);
        let sol = solve(&ens, &linear(-1.0, 1.0), &BsdeConfig::default()).unwrap();
        let y0 = sol.initial_estimate();
        assert!((y0.mean - (-1.0f64).exp()).abs() < 1e-3);
        assert_eq!(y0.stderr, 0.0);
        assert!(sol.deterministic);
    }

    #[test]
    fn martingale_terminal_under_gbm() {
        let ens = gbm_ens(20_000, 2);
        let g = Generator::z_free("zero", GeneratorConstants::default(), |_, _, _, _| 0.0, |s| s.current()[0]);
        let sol = solve(&ens, &g, &BsdeConfig::default()).unwrap();
        let xt: Vec<f64> = (0..ens.n_paths()).map(|p| ens.terminal_segment(p).current()[0]).collect();
        let est = McEstimate::from_samples(&xt);
        let y0 = sol.initial_estimate().mean;
        // regression keeps the sample mean at every step (intercept in the basis)
        assert!((y0 - est.mean).abs() < 1e-9);
        assert!((y0 - 0.2f64.exp()).abs() < 3.0 * est.stderr + 0.02);
        // Z(0) = sigma x0 d/dx E[X_T] = 0.2 e^{0.2}
        assert!((sol.z(0, 0)[0] - 0.2 * 0.2f64.exp()).abs() < 0.03, "{}", sol.z(0, 0)[0]);
    }

    #[test]
    fn terminal_consistency_is_exact() {
        let ens = gbm_ens(300, 3);
        let g = Generator::z_free("sq", GeneratorConstants::default(), |_, _, y, _| -y, |s| s.current()[0].sin());
        let sol = solve(&ens, &g, &BsdeConfig::default()).unwrap();
        let n = ens.grid().n_steps();
        for p in 0..ens.n_paths() {
            assert_eq!(sol.y(p, n), ens.terminal_segment(p).current()[0].sin());
        }
    }

    #[test]
    fn semigroup_window_reproduces_full_solve() {
        let ens = gbm_ens(400, 4);
        let g = linear(-0.5, 0.0).with_terminal(|s| s.current()[0]);
        let cfg = BsdeConfig::default();
        let full = solve(&ens, &g, &cfg).unwrap();
        let mid = 10;
        let xi = full.y_column(mid);
        let part = solve_with_terminal(&ens, &g, &cfg, 0, mid, &xi).unwrap();
        assert_eq!(part.initial_values(), full.initial_values());
        let same = solve_with_terminal(&ens, &g, &cfg, mid, mid, &xi).unwrap();
        assert_eq!(same.initial_values(), xi);
        assert!(matches!(
            solve_with_terminal(&ens, &g, &cfg, 0, mid, &vec![f64::NAN; 400]),
            Err(BsdeError::TerminalNonFinite(0))
        ));
    }

    #[test]
    fn comparison_shifted_terminal() {
        let ens = gbm_ens(200, 5);
        let g1 = linear(-1.0, 0.0).with_terminal(|s| s.current()[0]);
        let g2 = linear(-1.0, 0.0).with_terminal(|s| s.current()[0] + 1.0);
        let cfg = BsdeConfig::default();
        let (s1, s2) = (solve(&ens, &g1, &cfg).unwrap(), solve(&ens, &g2, &cfg).unwrap());
        let rep = comparison_check(&s1, &s2, &g1, &g2, &ens, 0.0);
        assert!(rep.applicable);
        assert_eq!(rep.violations, 0);
        let n = ens.grid().n_steps();
        assert!((s2.y(0, n) - s1.y(0, n) - 1.0).abs() < 1e-12);
        let same = comparison_check(&s1, &s1, &g1, &g1, &ens, 0.0);
        assert_eq!(same.violations, 0);
        let rev = comparison_check(&s2, &s1, &g2, &g1, &ens, 0.0);
        assert!(!rev.applicable);
        assert!(matches!(rev.witness, Some(PreconditionWitness::Terminal { .. })));
    }

    #[test]
    fn comparison_constant_source() {
        let ens = frozen(1.0, 0.01, 2);
        let g1 = Generator::z_free("a", GeneratorConstants::default(), |_, _, _, _| 0.0, |_| 0.0);
        let g2 = Generator::z_free("b", GeneratorConstants::default(), |_, _, _, _| 1.0, |_| 0.0);
        let cfg = BsdeConfig::default();
        let (s1, s2) = (solve(&ens, &g1, &cfg).unwrap(), solve(&ens, &g2, &cfg).unwrap());
        let rep = comparison_check(&s1, &s2, &g1, &g2, &ens, 0.0);
        assert!(rep.applicable && rep.violations == 0);
        assert!((s2.y(0, 0) - s1.y(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn damping_shrinks_sup_moment() {
        let ens = gbm_ens(500, 6);
        let cfg = BsdeConfig::default();
        let undamped = linear(0.0, 0.0).with_terminal(|s| s.current()[0]);
        let damped = linear(-1.0, 0.0).with_terminal(|s| s.current()[0]);
        let a = estimate_audit(&solve(&ens, &undamped, &cfg).unwrap(), &[]);
        let b = estimate_audit(&solve(&ens, &damped, &cfg).unwrap(), &[]);
        assert!(b.mean_sup_y2.mean <= a.mean_sup_y2.mean);
        let pair = ContinuityPair {
            y0: 1.0,
            y0_other: 0.5,
            distance: 1.0,
        };
        assert_eq!(estimate_audit(&solve(&ens, &damped, &cfg).unwrap(), &[pair]).continuity_ratio, Some(0.5));
    }

    #[test]
    fn explicit_scheme_blows_up_on_coarse_cubic() {
        let ens = frozen(2.4, 0.6, 1);
        let exp = BsdeConfig {
            scheme: Scheme::Explicit,
            ..Default::default()
        };
        let e = solve(&ens, &cubic(), &exp).unwrap();
        assert!(e.y(0, 0).abs() > 1e6);
        let i = solve(&ens, &cubic(), &BsdeConfig::default()).unwrap();
        assert!((0..=4).all(|j| i.y(0, j) > 0.0 && i.y(0, j) <= 2.0));
    }
}
