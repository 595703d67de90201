//! JSON scenario files and the registry of built-in coefficients, generators
//! and terminal functionals.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::BsdeConfig;
use crate::control::{ControlProblem, McConfig};
use crate::digest::config_hash;
use crate::ezapp::{ez_generator, ClampLog, EzError, EzParams, RamseyModel, EPS_DOM};
use crate::grid::{GridError, TimeGrid};
use crate::lattice::{ControlLattice, LatticeError, PiecewiseControl};
use crate::model::{Coefficients, Generator, GeneratorConstants, TerminalFn};
use crate::regression::FeatureBasis;
use crate::segment::{PathSegment, Segment};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown bundled scenario '{0}'")]
    Unknown(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Ez(#[from] EzError),
}

fn one() -> f64 {
    1.0
}

/// Scalar state dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// `dX = 0`.
    Zero,
    /// `dX = mu X dt + sigma X dW`.
    Gbm { mu: f64, sigma: f64 },
    /// `dX = (a X(t) + b X(t - delta) + k v) dt + sigma dW`.
    DelayedLinear {
        a: f64,
        b: f64,
        sigma: f64,
        #[serde(default)]
        control_gain: f64,
    },
    /// `dX = v dt + sigma dW`.
    ControlledDrift { sigma: f64 },
    /// Delayed Ramsey capital dynamics, controls `(pi, c)`.
    Ramsey(RamseyModel),
}

/// BSDE driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Zero,
    /// `g = mu y + shift`.
    Linear {
        mu: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `g = -coef y^3 + shift`.
    Cubic {
        #[serde(default = "one")]
        coef: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `g = scale |y| + shift`.
    Abs {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `g = k |z| + shift`.
    LipschitzZ {
        k: f64,
        #[serde(default)]
        shift: f64,
    },
    /// Epstein-Zin aggregator in `(y, c)` with `c` the second control.
    Ez { vartheta: f64, psi: f64, r: f64 },
}

/// Terminal functional of the current state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Constant { value: f64 },
    /// `scale x + shift`.
    Identity {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `-x^2`.
    NegSquare,
    /// `clamp(x, lo, hi) + shift`.
    Clamp {
        lo: f64,
        hi: f64,
        #[serde(default)]
        shift: f64,
    },
    /// Sigmoid-type utility whose sign matches `1 - r` of the Epstein-Zin generator.
    EzTerminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub t0: f64,
    pub horizon: f64,
    #[serde(default)]
    pub delta: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub values: Vec<Vec<f64>>,
    #[serde(default = "zero_times")]
    pub switch_times: Vec<f64>,
}

fn zero_times() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub n_paths: usize,
    #[serde(default = "default_outer")]
    pub outer_paths: usize,
    #[serde(default = "default_inner")]
    pub inner_paths: usize,
    #[serde(default = "default_budget")]
    pub control_budget: usize,
    #[serde(default = "default_work")]
    pub max_work: u128,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_outer() -> usize {
    McConfig::default().outer_paths
}
fn default_inner() -> usize {
    McConfig::default().inner_paths
}
fn default_budget() -> usize {
    McConfig::default().control_budget
}
fn default_work() -> u128 {
    McConfig::default().max_work
}
fn default_degree() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DppSpec {
    #[serde(default)]
    pub t: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub coefficients: CoefficientSpec,
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    pub grid: GridSpec,
    /// Constant initial history.
    pub x0: f64,
    #[serde(default)]
    pub lattice: Option<LatticeSpec>,
    /// Control for single-control runs; defaults to the first lattice value.
    #[serde(default)]
    pub control: Option<Vec<f64>>,
    pub mc: McSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dpp: Option<DppSpec>,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// Built objects of a scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub problem: ControlProblem,
    pub grid: TimeGrid,
    pub x0: PathSegment,
    pub lattice: ControlLattice,
    pub control: PiecewiseControl,
    pub mc: McConfig,
    /// Present for Epstein-Zin generators.
    pub clamps: Option<Arc<ClampLog>>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn tolerance(&self, key: &str, default: f64) -> f64 {
        self.tolerances.get(key).copied().unwrap_or(default)
    }

    pub fn control_dim(&self) -> usize {
        match self.coefficients {
            CoefficientSpec::Ramsey(_) => 2,
            _ => 1,
        }
    }

    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        let g = &self.grid;
        let grid = TimeGrid::with_step(g.t0, g.horizon, g.delta, g.step)?;
        let coeffs = build_coefficients(&self.coefficients);
        let lattice = match &self.lattice {
            Some(l) => {
                let steps = l
                    .switch_times
                    .iter()
                    .map(|&t| {
                        grid.steps_in(t - g.t0)
                            .filter(|&k| k < grid.n_steps().max(1))
                            .ok_or_else(|| ScenarioError::Invalid(format!("switch time {t} is not an interior grid node")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                match &self.coefficients {
                    CoefficientSpec::Ramsey(m) => {
                        ControlLattice::new(l.values.clone(), steps, vec![m.pi_bounds, m.c_bounds])?
                    }
                    _ => ControlLattice::from_values(l.values.clone(), steps)?,
                }
            }
            None => ControlLattice::from_values(vec![vec![0.0; self.control_dim()]], vec![0])?,
        };
        let cvalue = self.control.clone().unwrap_or_else(|| lattice.values()[0].clone());
        if cvalue.len() != self.control_dim() || lattice.control_dim() != self.control_dim() {
            return Err(ScenarioError::Invalid(format!(
                "controls of '{}' have dimension {}",
                self.name,
                self.control_dim()
            )));
        }
        let c_range = lattice
            .values()
            .iter()
            .map(|v| v[v.len() - 1])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c), hi.max(c)));
        let (generator, clamps) = build_generator(&self.generator, &self.terminal, c_range)?;
        let mc = McConfig {
            n_paths: self.mc.n_paths,
            seed: self.seed,
            bsde: BsdeConfig {
                basis: FeatureBasis {
                    degree: self.mc.degree,
                    use_lagged: true,
                },
                ..BsdeConfig::default()
            },
            control_budget: self.mc.control_budget,
            outer_paths: self.mc.outer_paths,
            inner_paths: self.mc.inner_paths,
            max_work: self.mc.max_work,
        };
        Ok(Scenario {
            problem: ControlProblem {
                name: self.name.clone(),
                coeffs,
                generator,
                horizon: g.horizon,
                delta: g.delta,
                step: g.step,
            },
            x0: PathSegment::constant(g.t0, g.step, grid.lag_steps(), &[self.x0]),
            grid,
            lattice,
            control: PiecewiseControl::constant(cvalue),
            mc,
            clamps,
            config: self.clone(),
        })
    }
}

pub fn build_coefficients(spec: &CoefficientSpec) -> Coefficients {
    match *spec {
        CoefficientSpec::Zero => Coefficients::scalar("zero", 0.0, |_, _, _| 0.0, |_, _, _| 0.0),
        CoefficientSpec::Gbm { mu, sigma } => Coefficients::scalar(
            "gbm",
            mu.abs().max(sigma.abs()),
            move |_, s, _| mu * s.current()[0],
            move |_, s, _| sigma * s.current()[0],
        ),
        CoefficientSpec::DelayedLinear {
            a,
            b,
            sigma,
            control_gain,
        } => Coefficients::scalar(
            "delayed_linear",
            a.abs() + b.abs(),
            move |_, s, v| a * s.current()[0] + b * s.lagged()[0] + control_gain * v[0],
            move |_, _, _| sigma,
        ),
        CoefficientSpec::ControlledDrift { sigma } => {
            Coefficients::scalar("controlled_drift", 0.0, |_, _, v| v[0], move |_, _, _| sigma)
        }
        CoefficientSpec::Ramsey(m) => m.coefficients(),
    }
}

pub fn build_terminal(spec: &TerminalSpec, ez: Option<&EzParams>) -> Result<TerminalFn, ScenarioError> {
    Ok(match *spec {
        TerminalSpec::Constant { value } => Arc::new(move |_: Segment<'_>| value),
        TerminalSpec::Identity { scale, shift } => Arc::new(move |s: Segment<'_>| scale * s.current()[0] + shift),
        TerminalSpec::NegSquare => Arc::new(|s: Segment<'_>| -s.current()[0].powi(2)),
        TerminalSpec::Clamp { lo, hi, shift } => {
            if !(lo <= hi) {
                return Err(ScenarioError::Invalid(format!("clamp bounds {lo} > {hi}")));
            }
            Arc::new(move |s: Segment<'_>| s.current()[0].clamp(lo, hi) + shift)
        }
        TerminalSpec::EzTerminal => {
            let p = ez.ok_or_else(|| ScenarioError::Invalid("ez_terminal needs an ez generator".into()))?;
            RamseyModel::default().terminal(p)
        }
    })
}

/// Generator with its terminal; `c_range` bounds consumption for Epstein-Zin.
pub fn build_generator(
    spec: &GeneratorSpec,
    terminal: &TerminalSpec,
    c_range: (f64, f64),
) -> Result<(Generator, Option<Arc<ClampLog>>), ScenarioError> {
    let plain = |name: &str, c: GeneratorConstants, f: Box<dyn Fn(f64) -> f64 + Send + Sync>| {
        Generator::z_free(name, c, move |_, _, y, _| f(y), |_| 0.0)
    };
    let gen = match *spec {
        GeneratorSpec::Zero => plain("zero", GeneratorConstants::default(), Box::new(|_| 0.0)).with_smooth_in_y(true),
        GeneratorSpec::Linear { mu, shift } => plain(
            "linear",
            GeneratorConstants {
                lipschitz: 0.0,
                monotone_mu: mu.max(0.0),
                growth_m: mu.abs().max(shift.abs()),
                growth_p: 1.0,
            },
            Box::new(move |y| mu * y + shift),
        )
        .with_smooth_in_y(true),
        GeneratorSpec::Cubic { coef, shift } => {
            if coef < 0.0 {
                return Err(ScenarioError::Invalid("cubic coefficient must be non-negative".into()));
            }
            plain(
                "cubic",
                GeneratorConstants {
                    lipschitz: 0.0,
                    monotone_mu: 0.0,
                    growth_m: coef.max(shift.abs()),
                    growth_p: 3.0,
                },
                Box::new(move |y| -coef * y * y * y + shift),
            )
            .with_smooth_in_y(true)
        }
        GeneratorSpec::Abs { scale, shift } => plain(
            "abs",
            GeneratorConstants {
                lipschitz: 0.0,
                monotone_mu: scale.abs(),
                growth_m: scale.abs().max(shift.abs()),
                growth_p: 1.0,
            },
            Box::new(move |y| scale * y.abs() + shift),
        ),
        GeneratorSpec::LipschitzZ { k, shift } => Generator::new(
            "lipschitz_z",
            GeneratorConstants {
                lipschitz: k.abs(),
                monotone_mu: 0.0,
                growth_m: k.abs().max(shift.abs()),
                growth_p: 1.0,
            },
            true,
            move |_, _, _, z: &[f64], _: &[f64]| k * z.iter().map(|x| x * x).sum::<f64>().sqrt() + shift,
            |_: Segment<'_>| 0.0,
        ),
        GeneratorSpec::Ez { vartheta, psi, r } => {
            let p = EzParams::new(vartheta, psi, r)?;
            let range = if c_range.0.is_finite() { c_range } else { (EPS_DOM, 1.0) };
            let (g, log) = ez_generator(p, range, EPS_DOM, build_terminal(terminal, Some(&p))?);
            return Ok((g, Some(log)));
        }
    };
    Ok((gen.with_terminal_fn(build_terminal(terminal, None)?), None))
}

/// Scenario files shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("quadratic_steering", include_str!("../scenarios/quadratic_steering.json")),
    ("delayed_linear", include_str!("../scenarios/delayed_linear.json")),
    ("gbm_linear", include_str!("../scenarios/gbm_linear.json")),
    ("cubic_driver", include_str!("../scenarios/cubic_driver.json")),
    ("ez_demo", include_str!("../scenarios/ez_demo.json")),
];

pub fn bundled(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| ScenarioError::Unknown(name.to_string()))?;
    ScenarioConfig::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_build() {
        for (name, _) in BUNDLED {
            let cfg = bundled(name).unwrap();
            assert_eq!(cfg.name, *name);
            let s = cfg.build().unwrap();
            assert_eq!(s.x0.lag_steps(), s.grid.lag_steps());
        }
        assert!(matches!(bundled("nope"), Err(ScenarioError::Unknown(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = bundled("gbm_linear").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn malformed_configs_are_rejected() {
        assert!(ScenarioConfig::from_json("{").is_err());
        let good = serde_json::to_value(bundled("gbm_linear").unwrap()).unwrap();
        let mut extra = good.clone();
        extra["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ScenarioConfig>(extra).is_err());
        let mut unknown = good.clone();
        unknown["generator"] = serde_json::json!({"kind": "quartic"});
        assert!(serde_json::from_value::<ScenarioConfig>(unknown).is_err());
        let mut bad_grid = bundled("gbm_linear").unwrap();
        bad_grid.grid.delta = 0.015;
        assert!(bad_grid.build().is_err());
        let mut ez_term = bundled("gbm_linear").unwrap();
        ez_term.terminal = TerminalSpec::EzTerminal;
        assert!(ez_term.build().is_err());
    }

    #[test]
    fn registry_formulas() {
        let seg = PathSegment::constant(0.0, 0.1, 2, &[-3.0]);
        let t = build_terminal(&TerminalSpec::Clamp { lo: -1.0, hi: 1.0, shift: 0.5 }, None).unwrap();
        assert_eq!(t(seg.view()), -0.5);
        let (g, log) = build_generator(&GeneratorSpec::Cubic { coef: 2.0, shift: 1.0 }, &TerminalSpec::NegSquare, (0.0, 1.0)).unwrap();
        assert!(log.is_none());
        assert_eq!(g.eval(0.0, seg.view(), 2.0, &[0.0], &[0.0]), -15.0);
        assert_eq!(g.terminal(seg.view()), -9.0);
        let (z, _) = build_generator(&GeneratorSpec::LipschitzZ { k: 0.5, shift: 0.0 }, &TerminalSpec::NegSquare, (0.0, 1.0)).unwrap();
        assert!(z.z_dependent());
        assert_eq!(z.eval(0.0, seg.view(), 0.0, &[-4.0], &[0.0]), 2.0);
        let c = build_coefficients(&CoefficientSpec::DelayedLinear {
            a: 1.0,
            b: 2.0,
            sigma: 0.3,
            control_gain: 4.0,
        });
        let hist = PathSegment::new(0.0, 0.1, 2, 1, vec![5.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.drift_vec(0.0, hist.view(), &[0.5]), vec![1.0 + 10.0 + 2.0]);
    }
}
