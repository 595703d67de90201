//! Euler–Maruyama simulation of the controlled delay equation
//! `dX = b(s, X_s, v) ds + sigma(s, X_s, v) dW` with frozen initial history.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::TimeGrid;
use crate::lattice::PiecewiseControl;
use crate::model::Coefficients;
use crate::rng::BrownianIncrements;
use crate::segment::{sup_norm_distance, PathSegment, Segment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite state on path {path} at forward step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("initial segment does not fit the grid: {0}")]
    InitMismatch(String),
    #[error("increments do not fit the grid: {0}")]
    IncrementMismatch(String),
    #[error("control has dimension {got}, coefficients expect {expected}")]
    ControlDim { expected: usize, got: usize },
    #[error("node {node} is outside 0..{n_nodes} or before the first full window ({lag})")]
    NodeOutOfRange { node: usize, n_nodes: usize, lag: usize },
    #[error("ensemble is empty")]
    Empty,
}

/// Initial history: one segment for all paths or one per path.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    Shared(PathSegment),
    PerPath(Vec<PathSegment>),
}

impl InitialData {
    fn get(&self, path: usize) -> &PathSegment {
        match self {
            InitialData::Shared(s) => s,
            InitialData::PerPath(v) => &v[path],
        }
    }

    fn check(&self, grid: &TimeGrid, dim: usize, n_paths: usize) -> Result<(), SimError> {
        let segs: Vec<&PathSegment> = match self {
            InitialData::Shared(s) => vec![s],
            InitialData::PerPath(v) => {
                if v.len() != n_paths {
                    return Err(SimError::InitMismatch(format!(
                        "{} initial segments for {n_paths} paths",
                        v.len()
                    )));
                }
                v.iter().collect()
            }
        };
        for s in segs {
            if s.lag_steps() != grid.lag_steps() || s.dim() != dim {
                return Err(SimError::InitMismatch(format!(
                    "segment has lag {} and dim {}, grid needs lag {} and dim {dim}",
                    s.lag_steps(),
                    s.dim(),
                    grid.lag_steps()
                )));
            }
            let tol = 1e-9 * grid.step();
            if (s.anchor() - grid.t0()).abs() > tol {
                return Err(SimError::InitMismatch(format!(
                    "segment anchored at {}, grid starts at {}",
                    s.anchor(),
                    grid.t0()
                )));
            }
        }
        Ok(())
    }
}

/// Simulated paths on a [`TimeGrid`], stored as `[path x node x n]`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    states: Vec<f64>,
    increments: BrownianIncrements,
    control: PiecewiseControl,
    seed: u64,
    noisy: bool,
}

/// Simulates `n_paths` paths from a common initial segment.
pub fn simulate(
    coeffs: &Coefficients,
    init: &PathSegment,
    control: &PiecewiseControl,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble, SimError> {
    let inc = BrownianIncrements::generate(seed, n_paths, grid.n_steps(), coeffs.noise_dim(), grid.step());
    simulate_with_increments(coeffs, &InitialData::Shared(init.clone()), control, grid, inc)
}

/// Simulates with caller-supplied increments (common random numbers).
pub fn simulate_with_increments(
    coeffs: &Coefficients,
    init: &InitialData,
    control: &PiecewiseControl,
    grid: &TimeGrid,
    increments: BrownianIncrements,
) -> Result<PathEnsemble, SimError> {
    let n = coeffs.dim();
    let d = coeffs.noise_dim();
    let n_paths = increments.n_paths();
    if n_paths == 0 {
        return Err(SimError::Empty);
    }
    if increments.n_steps() != grid.n_steps()
        || increments.noise_dim() != d
        || (increments.step() - grid.step()).abs() > 1e-12 * grid.step()
    {
        return Err(SimError::IncrementMismatch(format!(
            "{} steps x {} noise at h = {}, grid has {} steps, coefficients {} noise at h = {}",
            increments.n_steps(),
            increments.noise_dim(),
            increments.step(),
            grid.n_steps(),
            d,
            grid.step()
        )));
    }
    init.check(grid, n, n_paths)?;
    for v in control.values() {
        if v.len() != control.dim() {
            return Err(SimError::ControlDim {
                expected: control.dim(),
                got: v.len(),
            });
        }
    }

    let lag = grid.lag_steps();
    let n_nodes = grid.n_nodes();
    let h = grid.step();
    let per_path = n_nodes * n;
    let mut states = vec![0.0; n_paths * per_path];

    let outcomes: Vec<Result<bool, SimError>> = states
        .par_chunks_mut(per_path)
        .enumerate()
        .map(|(p, path)| {
            path[..(lag + 1) * n].copy_from_slice(init.get(p).values());
            let mut drift = vec![0.0; n];
            let mut diff = vec![0.0; n * d];
            let mut noisy = false;
            for j in 0..grid.n_steps() {
                let k = lag + j;
                let t = grid.step_time(j);
                let v = control.at(j);
                let dw = increments.get(p, j);
                let (head, tail) = path.split_at_mut((k + 1) * n);
                let seg = Segment::from_raw(t, h, lag, n, &head[(k - lag) * n..]);
                coeffs.drift(t, seg, v, &mut drift);
                coeffs.diffusion(t, seg, v, &mut diff);
                let x = &head[k * n..];
                let next = &mut tail[..n];
                for i in 0..n {
                    let mut noise = 0.0;
                    for (l, w) in dw.iter().enumerate() {
                        let s = diff[i * d + l];
                        if s != 0.0 && *w != 0.0 {
                            noisy = true;
                        }
                        noise += s * w;
                    }
                    next[i] = x[i] + drift[i] * h + noise;
                    if !next[i].is_finite() {
                        return Err(SimError::NonFinite { path: p, step: j });
                    }
                }
            }
            Ok(noisy)
        })
        .collect();

    let mut noisy = false;
    for o in outcomes {
        noisy |= o?;
    }
    Ok(PathEnsemble {
        grid: *grid,
        n_paths,
        dim: n,
        states,
        seed: increments.seed(),
        increments,
        control: control.clone(),
        noisy,
    })
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { mean, stderr: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Per-node cross-sectional statistics of one state component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeStats {
    pub node: usize,
    pub time: f64,
    pub mean: f64,
    pub variance: f64,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.increments.noise_dim()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn control(&self) -> &PiecewiseControl {
        &self.control
    }

    pub fn increments(&self) -> &BrownianIncrements {
        &self.increments
    }

    /// True when no path ever received a non-zero noise contribution, so
    /// every path is a deterministic function of its initial segment.
    pub fn is_deterministic(&self) -> bool {
        !self.noisy
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// `X(node)` on `path`.
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let off = (path * self.grid.n_nodes() + node) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// The window of `lag_steps + 1` samples ending at `node`.
    pub fn segment_at(&self, path: usize, node: usize) -> Result<Segment<'_>, SimError> {
        let lag = self.grid.lag_steps();
        let n_nodes = self.grid.n_nodes();
        if node < lag || node >= n_nodes || path >= self.n_paths {
            return Err(SimError::NodeOutOfRange { node, n_nodes, lag });
        }
        Ok(self.segment_unchecked(path, node))
    }

    #[inline]
    pub(crate) fn segment_unchecked(&self, path: usize, node: usize) -> Segment<'_> {
        let lag = self.grid.lag_steps();
        let base = path * self.grid.n_nodes();
        Segment::from_raw(
            self.grid.node_time(node),
            self.grid.step(),
            lag,
            self.dim,
            &self.states[(base + node - lag) * self.dim..(base + node + 1) * self.dim],
        )
    }

    /// Segment at forward step `j` (node `start_node + j`).
    #[inline]
    pub fn step_segment(&self, path: usize, j: usize) -> Segment<'_> {
        self.segment_unchecked(path, self.grid.start_node() + j)
    }

    pub fn terminal_segment(&self, path: usize) -> Segment<'_> {
        self.segment_unchecked(path, self.grid.end_node())
    }

    /// Monte Carlo estimate of `E[sup_s ||X_s||_C^{2q}]`, the sup running over all nodes.
    pub fn moment_estimate(&self, q: f64) -> McEstimate {
        let samples: Vec<f64> = (0..self.n_paths)
            .map(|p| {
                let sup = (0..self.grid.n_nodes())
                    .map(|k| self.state(p, k).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .fold(0.0, f64::max);
                sup.powf(2.0 * q)
            })
            .collect();
        McEstimate::from_samples(&samples)
    }

    /// Mean and (population) variance of component `comp` at every node.
    pub fn node_statistics(&self, comp: usize) -> Vec<NodeStats> {
        let n = self.n_paths as f64;
        (0..self.grid.n_nodes())
            .map(|k| {
                let xs = (0..self.n_paths).map(|p| self.state(p, k)[comp]);
                let mean = xs.clone().sum::<f64>() / n;
                let variance = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                NodeStats {
                    node: k,
                    time: self.grid.node_time(k),
                    mean,
                    variance,
                }
            })
            .collect()
    }
}

/// Outcome of [`initial_lipschitz_probe`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzProbe {
    /// `max_pairs max_s (E ||X_s - X'_s||_C^2)^{1/2} / ||gamma - gamma'||_C`.
    pub max_ratio: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Separation of solutions started from nearby segments, under common random numbers.
pub fn initial_lipschitz_probe(
    coeffs: &Coefficients,
    grid: &TimeGrid,
    control: &PiecewiseControl,
    pairs: &[(PathSegment, PathSegment)],
    n_paths: usize,
    seed: u64,
) -> Result<LipschitzProbe, SimError> {
    let inc = BrownianIncrements::generate(seed, n_paths, grid.n_steps(), coeffs.noise_dim(), grid.step());
    let mut report = LipschitzProbe {
        max_ratio: 0.0,
        evaluated: 0,
        skipped: 0,
    };
    for (a, b) in pairs {
        let dist = sup_norm_distance(a.view(), b.view())
            .map_err(|e| SimError::InitMismatch(e.to_string()))?;
        if dist == 0.0 {
            report.skipped += 1;
            continue;
        }
        let ea = simulate_with_increments(coeffs, &InitialData::Shared(a.clone()), control, grid, inc.clone())?;
        let eb = simulate_with_increments(coeffs, &InitialData::Shared(b.clone()), control, grid, inc.clone())?;
        let mut worst: f64 = 0.0;
        for node in grid.start_node()..=grid.end_node() {
            let ms = (0..n_paths)
                .map(|p| {
                    let d = sup_norm_distance(ea.segment_unchecked(p, node), eb.segment_unchecked(p, node))
                        .expect("same grid");
                    d * d
                })
                .sum::<f64>()
                / n_paths as f64;
            worst = worst.max(ms.sqrt());
        }
        report.max_ratio = report.max_ratio.max(worst / dist);
        report.evaluated += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero() -> Coefficients {
        Coefficients::scalar("zero", 0.0, |_, _, _| 0.0, |_, _, _| 0.0)
    }

    fn gbm(a: f64, s: f64) -> Coefficients {
        Coefficients::scalar(
            "gbm",
            a.abs() + s.abs(),
            move |_, g, _| a * g.current()[0],
            move |_, g, _| s * g.current()[0],
        )
    }

    fn v0() -> PiecewiseControl {
        PiecewiseControl::constant(vec![0.0])
    }

    #[test]
    fn frozen_dynamics_keep_the_initial_value() {
        let grid = TimeGrid::new(0.0, 1.0, 0.2, 2).unwrap();
        let init = PathSegment::constant(0.0, grid.step(), 2, &[1.5]);
        let ens = simulate(&zero(), &init, &v0(), &grid, 7, 1).unwrap();
        assert!(ens.states().iter().all(|&x| x == 1.5));
        assert!(ens.is_deterministic());
        let mom = ens.moment_estimate(1.5);
        assert_eq!(mom.mean, 1.5f64.powi(3));
        assert_eq!(mom.stderr, 0.0);
    }

    #[test]
    fn unit_history_grows_linearly_on_first_interval() {
        let grid = TimeGrid::new(0.0, 1.0, 1.0, 20).unwrap();
        let c = Coefficients::scalar("lagged", 1.0, |_, g, _| g.lagged()[0], |_, _, _| 0.0);
        let init = PathSegment::constant(0.0, grid.step(), 20, &[1.0]);
        let ens = simulate(&c, &init, &v0(), &grid, 1, 0).unwrap();
        for k in grid.start_node()..=grid.end_node() {
            let t = grid.node_time(k);
            assert!((ens.state(0, k)[0] - (1.0 + t)).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_views() {
        let grid = TimeGrid::new(0.0, 1.0, 0.2, 2).unwrap();
        let init = PathSegment::new(0.0, 0.1, 2, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let ens = simulate(&zero(), &init, &v0(), &grid, 2, 0).unwrap();
        assert_eq!(ens.segment_at(1, 2).unwrap().values(), init.values());
        assert_eq!(ens.segment_at(0, 12).unwrap().values(), &[0.3, 0.3, 0.3]);
        assert!(matches!(ens.segment_at(0, 1), Err(SimError::NodeOutOfRange { .. })));
        assert!(matches!(ens.segment_at(0, 13), Err(SimError::NodeOutOfRange { .. })));

        let g0 = TimeGrid::with_step(0.0, 1.0, 0.0, 0.25).unwrap();
        let e0 = simulate(&zero(), &PathSegment::constant(0.0, 0.25, 0, &[4.0]), &v0(), &g0, 1, 0).unwrap();
        assert_eq!(e0.segment_at(0, 3).unwrap().values(), &[4.0]);
    }

    #[test]
    fn blow_up_is_reported() {
        let grid = TimeGrid::with_step(0.0, 10.0, 0.0, 1.0).unwrap();
        let c = Coefficients::scalar("explode", 0.0, |_, g, _| g.current()[0].powi(4), |_, _, _| 0.0);
        let init = PathSegment::constant(0.0, 1.0, 0, &[10.0]);
        let err = simulate(&c, &init, &v0(), &grid, 3, 0).unwrap_err();
        assert!(matches!(err, SimError::NonFinite { path: 0, .. }), "{err:?}");
    }

    #[test]
    fn rejects_misanchored_init() {
        let grid = TimeGrid::new(0.0, 1.0, 0.2, 2).unwrap();
        let init = PathSegment::constant(0.5, 0.1, 2, &[1.0]);
        assert!(matches!(
            simulate(&zero(), &init, &v0(), &grid, 1, 0),
            Err(SimError::InitMismatch(_))
        ));
    }

    #[test]
    fn gbm_mean_matches_closed_form() {
        let (a, s, x0, t) = (0.3, 0.2, 1.0, 1.0);
        let grid = TimeGrid::with_step(0.0, t, 0.0, 1.0 / 64.0).unwrap();
        let init = PathSegment::constant(0.0, grid.step(), 0, &[x0]);
        let ens = simulate(&gbm(a, s), &init, &v0(), &grid, 100_000, 5).unwrap();
        let xs: Vec<f64> = (0..ens.n_paths()).map(|p| ens.state(p, grid.end_node())[0]).collect();
        let est = McEstimate::from_samples(&xs);
        // Euler mean is x0 (1 + a h)^N exactly; compare against that and the continuum.
        let euler = x0 * (1.0 + a * grid.step()).powi(grid.n_steps() as i32);
        assert!((est.mean - euler).abs() < 3.0 * est.stderr, "{est:?} vs {euler}");
        assert!((est.mean - x0 * (a * t).exp()).abs() < 3.0 * est.stderr + (euler - x0 * (a * t).exp()).abs());
    }

    #[test]
    fn initial_separation_of_linear_flow() {
        let a = 0.5;
        let grid = TimeGrid::with_step(0.0, 1.0, 0.0, 1e-3).unwrap();
        let lin = Coefficients::scalar("lin", a, move |_, g, _| a * g.current()[0], |_, _, _| 0.0);
        let pairs = vec![
            (PathSegment::constant(0.0, 1e-3, 0, &[1.0]), PathSegment::constant(0.0, 1e-3, 0, &[1.0])),
            (PathSegment::constant(0.0, 1e-3, 0, &[1.0]), PathSegment::constant(0.0, 1e-3, 0, &[1.5])),
        ];
        let r = initial_lipschitz_probe(&lin, &grid, &v0(), &pairs, 4, 0).unwrap();
        assert_eq!(r.skipped, 1);
        assert!((r.max_ratio - a.exp()).abs() < 1e-3, "{}", r.max_ratio);

        let gz = TimeGrid::new(0.0, 1.0, 0.2, 2).unwrap();
        let zp = vec![(
            PathSegment::new(0.0, 0.1, 2, 1, vec![0.0, 2.0, 0.0]).unwrap(),
            PathSegment::constant(0.0, 0.1, 2, &[0.0]),
        )];
        let r0 = initial_lipschitz_probe(&zero(), &gz, &v0(), &zp, 3, 0).unwrap();
        assert_eq!(r0.max_ratio, 1.0);
    }
}
