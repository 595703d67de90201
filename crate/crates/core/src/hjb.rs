//! Hamiltonian of the delayed HJB equation on a finite lag projection,
//! ellipticity audits and viscosity inequality checks.
//!
//! A segment is represented by its values at `k` lag offsets (in grid steps,
//! offset 0 being the current state). Drift and diffusion act only on the
//! current coordinate. With a single offset and no delay this is the
//! classical HJB equation.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Coefficients, Generator};
use crate::segment::{PathSegment, Segment};

const SYMMETRY_TOL: f64 = 1e-12;
const ELLIPTIC_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HjbError {
    #[error("matrix is not symmetric (max |A - A^T| = {0:.3e})")]
    NonSymmetric(f64),
    #[error("generator '{0}' depends on z; the Hamiltonian needs a z-free generator")]
    ZDependent(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("lag offsets must start at 0, increase strictly and stay within {0} steps")]
    BadOffsets(usize),
    #[error("control set is empty")]
    EmptyControls,
}

/// Sampling of a scalar segment at fixed lag offsets and the piecewise-linear
/// rule that maps coordinates back to a segment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    offsets: Vec<usize>,
    lag_steps: usize,
    step: f64,
}

/// Coordinates `(gamma(t - o_1 h), ..., gamma(t - o_k h))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedState {
    pub coords: Vec<f64>,
}

impl Projection {
    pub fn new(offsets: Vec<usize>, lag_steps: usize, step: f64) -> Result<Self, HjbError> {
        let ok = offsets.first() == Some(&0)
            && offsets.windows(2).all(|w| w[0] < w[1])
            && offsets.last().is_some_and(|&o| o <= lag_steps);
        if !ok {
            return Err(HjbError::BadOffsets(lag_steps));
        }
        Ok(Self {
            offsets,
            lag_steps,
            step,
        })
    }

    /// Current value only; with `lag_steps = 0` this is the undelayed case.
    pub fn current_only(lag_steps: usize, step: f64) -> Self {
        Self {
            offsets: vec![0],
            lag_steps,
            step,
        }
    }

    /// Current and fully lagged values.
    pub fn current_and_lagged(lag_steps: usize, step: f64) -> Self {
        if lag_steps == 0 {
            return Self::current_only(0, step);
        }
        Self {
            offsets: vec![0, lag_steps],
            lag_steps,
            step,
        }
    }

    pub fn k(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn lag_steps(&self) -> usize {
        self.lag_steps
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn project(&self, seg: Segment<'_>) -> Result<ProjectedState, HjbError> {
        if seg.dim() != 1 {
            return Err(HjbError::Dimension {
                expected: 1,
                got: seg.dim(),
            });
        }
        if seg.lag_steps() != self.lag_steps {
            return Err(HjbError::Dimension {
                expected: self.lag_steps,
                got: seg.lag_steps(),
            });
        }
        let coords = self
            .offsets
            .iter()
            .map(|&o| seg.point(self.lag_steps - o)[0])
            .collect();
        Ok(ProjectedState { coords })
    }

    /// Segment anchored at `t` that interpolates the coordinates linearly in
    /// the offset and is constant beyond the last offset.
    pub fn embed(&self, t: f64, state: &ProjectedState) -> Result<PathSegment, HjbError> {
        let c = &state.coords;
        if c.len() != self.k() {
            return Err(HjbError::Dimension {
                expected: self.k(),
                got: c.len(),
            });
        }
        let l = self.lag_steps;
        let values = (0..=l)
            .map(|j| {
                let o = l - j;
                match self.offsets.iter().position(|&q| q >= o) {
                    None => c[c.len() - 1],
                    Some(i) if self.offsets[i] == o || i == 0 => c[i],
                    Some(i) => {
                        let (o0, o1) = (self.offsets[i - 1], self.offsets[i]);
                        let w = (o - o0) as f64 / (o1 - o0) as f64;
                        (1.0 - w) * c[i - 1] + w * c[i]
                    }
                }
            })
            .collect();
        Ok(PathSegment::new(t, self.step, l, 1, values).expect("finite coordinates"))
    }
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<(), HjbError> {
    let asym = (a - a.transpose()).amax();
    let scale = 1.0f64.max(a.amax());
    if asym > SYMMETRY_TOL * scale {
        return Err(HjbError::NonSymmetric(asym));
    }
    Ok(())
}

/// `sup_v { <p, b> + 1/2 tr(sigma sigma^T A) + g(t, gamma, r, v) }` over a finite
/// control set.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub coeffs: Coefficients,
    pub generator: Generator,
    pub controls: Vec<Vec<f64>>,
    pub projection: Projection,
}

impl Hamiltonian {
    pub fn new(
        coeffs: Coefficients,
        generator: Generator,
        controls: Vec<Vec<f64>>,
        projection: Projection,
    ) -> Result<Self, HjbError> {
        if generator.z_dependent() {
            return Err(HjbError::ZDependent(generator.name.clone()));
        }
        if coeffs.dim() != 1 {
            return Err(HjbError::Dimension {
                expected: 1,
                got: coeffs.dim(),
            });
        }
        if controls.is_empty() {
            return Err(HjbError::EmptyControls);
        }
        Ok(Self {
            coeffs,
            generator,
            controls,
            projection,
        })
    }

    pub fn with_generator(&self, generator: Generator) -> Result<Self, HjbError> {
        Self::new(
            self.coeffs.clone(),
            generator,
            self.controls.clone(),
            self.projection.clone(),
        )
    }

    /// The affine map for one control; `argmax` is its index.
    fn term(&self, t: f64, seg: Segment<'_>, r: f64, p: &[f64], a: &DMatrix<f64>, v: &[f64]) -> f64 {
        let b = self.coeffs.drift_vec(t, seg, v)[0];
        let s = self.coeffs.diffusion_vec(t, seg, v);
        let ss: f64 = s.iter().map(|x| x * x).sum();
        let z = vec![0.0; self.coeffs.noise_dim()];
        p[0] * b + 0.5 * ss * a[(0, 0)] + self.generator.eval(t, seg, r, &z, v)
    }

    fn validate(&self, p: &[f64], a: &DMatrix<f64>) -> Result<(), HjbError> {
        let k = self.projection.k();
        if p.len() != k {
            return Err(HjbError::Dimension {
                expected: k,
                got: p.len(),
            });
        }
        if a.nrows() != k || a.ncols() != k {
            return Err(HjbError::Dimension {
                expected: k,
                got: a.nrows(),
            });
        }
        check_symmetric(a)
    }

    /// Value and maximising control index (lowest index on ties).
    pub fn eval_with_argmax(
        &self,
        t: f64,
        seg: Segment<'_>,
        r: f64,
        p: &[f64],
        a: &DMatrix<f64>,
    ) -> Result<(f64, usize), HjbError> {
        self.validate(p, a)?;
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, v) in self.controls.iter().enumerate() {
            let h = self.term(t, seg, r, p, a, v);
            if h > best.0 {
                best = (h, i);
            }
        }
        Ok(best)
    }

    pub fn eval(&self, t: f64, seg: Segment<'_>, r: f64, p: &[f64], a: &DMatrix<f64>) -> Result<f64, HjbError> {
        self.eval_with_argmax(t, seg, r, p, a).map(|x| x.0)
    }

    /// Evaluation at projected coordinates.
    pub fn eval_projected(
        &self,
        t: f64,
        x: &ProjectedState,
        r: f64,
        p: &[f64],
        a: &DMatrix<f64>,
    ) -> Result<f64, HjbError> {
        let seg = self.projection.embed(t, x)?;
        self.eval(t, seg.view(), r, p, a)
    }

    /// `sup_v |g'(t, gamma, r, v) - g(t, gamma, r, v)|` for another generator.
    pub fn generator_gap(&self, other: &Generator, t: f64, seg: Segment<'_>, r: f64) -> f64 {
        let z = vec![0.0; self.coeffs.noise_dim()];
        self.controls
            .iter()
            .map(|v| (other.eval(t, seg, r, &z, v) - self.generator.eval(t, seg, r, &z, v)).abs())
            .fold(0.0, f64::max)
    }
}

/// Random inputs handed to the audited map alongside the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticProbe {
    pub index: usize,
    /// Uniform on `[0, 1)`; callers map it to a time.
    pub u: f64,
    pub coords: Vec<f64>,
    pub r: f64,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipticityReport {
    pub probes: usize,
    pub violations: usize,
    /// Largest `H(X) - H(Y)` seen.
    pub max_excess: f64,
}

fn normal_matrix(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Counts probes with `H(..., X) > H(..., Y) + 1e-10` where `Y = X + B^T B`.
/// With `equal` set, `Y = X` is used instead.
pub fn ellipticity_audit(
    k: usize,
    n_probes: usize,
    seed: u64,
    equal: bool,
    h: impl Fn(&EllipticProbe, &DMatrix<f64>) -> f64 + Sync,
) -> EllipticityReport {
    let excess: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let g = normal_matrix(&mut rng, k);
            let x = (&g + g.transpose()) * 0.5;
            let b = normal_matrix(&mut rng, k);
            let y = if equal { x.clone() } else { &x + b.transpose() * &b };
            let probe = EllipticProbe {
                index: i,
                u: rng.gen(),
                coords: (0..k).map(|_| rng.sample(StandardNormal)).collect(),
                r: rng.sample(StandardNormal),
                p: (0..k).map(|_| rng.sample(StandardNormal)).collect(),
            };
            h(&probe, &x) - h(&probe, &y)
        })
        .collect();
    EllipticityReport {
        probes: n_probes,
        violations: excess.iter().filter(|&&e| e > ELLIPTIC_TOL).count(),
        max_excess: excess.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Smooth `phi(t, x)` on projected coordinates with its derivatives.
#[derive(Clone)]
pub struct TestFunction {
    pub phi: ScalarField,
    pub dt: ScalarField,
    pub grad: VectorField,
    pub hess: MatrixField,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TestFunction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeAudit {
    pub points: usize,
    /// Largest `|fd - supplied| / max(1, |supplied|)` over all derivatives.
    pub max_rel_error: f64,
    pub failures: usize,
}

impl TestFunction {
    pub fn new(
        phi: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        hess: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            phi: Arc::new(phi),
            dt: Arc::new(dt),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
        }
    }

    /// `phi + c |x - x0|^2`.
    pub fn plus_quadratic(&self, c: f64, x0: Vec<f64>) -> Self {
        let (phi, dt, grad, hess) = (self.phi.clone(), self.dt.clone(), self.grad.clone(), self.hess.clone());
        let x1 = x0.clone();
        let k = x0.len();
        Self::new(
            move |t, x| phi(t, x) + c * x.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            move |t, x| dt(t, x),
            move |t, x| {
                let mut g = grad(t, x);
                for i in 0..k {
                    g[i] += 2.0 * c * (x[i] - x1[i]);
                }
                g
            },
            move |t, x| hess(t, x) + DMatrix::identity(k, k) * (2.0 * c),
        )
    }

    /// Compares supplied derivatives with central differences at each point.
    pub fn self_audit(&self, points: &[(f64, Vec<f64>)], rel_tol: f64) -> DerivativeAudit {
        let mut max_rel: f64 = 0.0;
        let mut failures = 0;
        for (t, x) in points {
            let k = x.len();
            let mut errs = Vec::new();
            let ht = 1e-5 * (1.0 + t.abs());
            let fd_t = ((self.phi)(t + ht, x) - (self.phi)(t - ht, x)) / (2.0 * ht);
            errs.push((fd_t, (self.dt)(*t, x)));
            let g = (self.grad)(*t, x);
            let hm = (self.hess)(*t, x);
            let shift = |i: usize, d: f64, y: &mut Vec<f64>| y[i] += d;
            for i in 0..k {
                let hi = 1e-5 * (1.0 + x[i].abs());
                let mut up = x.clone();
                let mut dn = x.clone();
                shift(i, hi, &mut up);
                shift(i, -hi, &mut dn);
                errs.push((((self.phi)(*t, &up) - (self.phi)(*t, &dn)) / (2.0 * hi), g[i]));
                for j in 0..k {
                    let hj = 1e-4 * (1.0 + x[j].abs());
                    let hii = 1e-4 * (1.0 + x[i].abs());
                    let eval = |di: f64, dj: f64| {
                        let mut y = x.clone();
                        y[i] += di;
                        y[j] += dj;
                        (self.phi)(*t, &y)
                    };
                    let fd = (eval(hii, hj) - eval(hii, -hj) - eval(-hii, hj) + eval(-hii, -hj)) / (4.0 * hii * hj);
                    errs.push((fd, hm[(i, j)]));
                }
            }
            let worst = errs
                .iter()
                .map(|(fd, s)| (fd - s).abs() / s.abs().max(1.0))
                .fold(0.0, f64::max);
            if worst > rel_tol {
                failures += 1;
            }
            max_rel = max_rel.max(worst);
        }
        DerivativeAudit {
            points: points.len(),
            max_rel_error: max_rel,
            failures,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    /// `phi - u` has a minimum at the point; residual must be `>= -tol`.
    Sub,
    /// `phi - u` has a maximum at the point; residual must be `<= tol`.
    Super,
}

/// Finite neighbourhood on which the extremum of `phi - u` is verified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbourhood {
    pub radius: f64,
    pub time_radius: f64,
    /// Points per axis, centre included when odd.
    pub points: usize,
}

impl Default for Neighbourhood {
    fn default() -> Self {
        Self {
            radius: 0.1,
            time_radius: 0.05,
            points: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ViscosityOutcome {
    Applicable {
        residual: f64,
        pass: bool,
        probes_checked: usize,
    },
    /// `phi - u` is not extremal at the point on the probe neighbourhood.
    Inapplicable {
        witness_t: f64,
        witness_x: Vec<f64>,
        gap: f64,
    },
}

impl ViscosityOutcome {
    pub fn residual(&self) -> Option<f64> {
        match self {
            Self::Applicable { residual, .. } => Some(*residual),
            Self::Inapplicable { .. } => None,
        }
    }
}

fn axis(centre: f64, radius: f64, points: usize) -> Vec<f64> {
    if points <= 1 || radius == 0.0 {
        return vec![centre];
    }
    (0..points)
        .map(|i| centre - radius + 2.0 * radius * i as f64 / (points - 1) as f64)
        .collect()
}

/// `d_t phi + H(t, gamma, phi, D phi, D^2 phi)` at `(t, x)` after checking that
/// `phi - u` is extremal there on the probe neighbourhood (times are clipped to
/// `[t_min, t_max]`).
#[allow(clippy::too_many_arguments)]
pub fn viscosity_inequality_check(
    candidate: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    phi: &TestFunction,
    t: f64,
    x: &ProjectedState,
    side: Side,
    ham: &Hamiltonian,
    hood: &Neighbourhood,
    time_range: (f64, f64),
    tol: f64,
) -> Result<ViscosityOutcome, HjbError> {
    let k = x.coords.len();
    let d = |s: f64, y: &[f64]| (phi.phi)(s, y) - candidate(s, y);
    let d0 = d(t, &x.coords);
    let times: Vec<f64> = axis(t, hood.time_radius, hood.points)
        .into_iter()
        .filter(|s| *s >= time_range.0 && *s <= time_range.1)
        .collect();
    let axes: Vec<Vec<f64>> = x.coords.iter().map(|&c| axis(c, hood.radius, hood.points)).collect();
    let mut idx = vec![0usize; k];
    let mut checked = 0;
    let slack = 1e-12 * (1.0 + d0.abs());
    loop {
        let y: Vec<f64> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
        for &s in &times {
            let gap = d(s, &y) - d0;
            checked += 1;
            let bad = match side {
                Side::Sub => gap < -slack,
                Side::Super => gap > slack,
            };
            if bad {
                return Ok(ViscosityOutcome::Inapplicable {
                    witness_t: s,
                    witness_x: y,
                    gap,
                });
            }
        }
        let mut a = 0;
        while a < k {
            idx[a] += 1;
            if idx[a] < axes[a].len() {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
        if a == k {
            break;
        }
    }
    let r = (phi.phi)(t, &x.coords);
    let h = ham.eval_projected(t, x, r, &(phi.grad)(t, &x.coords), &(phi.hess)(t, &x.coords))?;
    let residual = (phi.dt)(t, &x.coords) + h;
    let pass = match side {
        Side::Sub => residual >= -tol,
        Side::Super => residual <= tol,
    };
    Ok(ViscosityOutcome::Applicable {
        residual,
        pass,
        probes_checked: checked,
    })
}

/// One point `(t, x, r, p, A)` of a Hamiltonian probe lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamProbe {
    pub t: f64,
    pub x: ProjectedState,
    pub r: f64,
    pub p: Vec<f64>,
    #[serde(skip)]
    pub a: DMatrix<f64>,
}

/// Cartesian lattice of times, coordinates, `r`, first-coordinate gradients
/// and `A[0][0]` values; other gradient and Hessian entries are zero.
pub fn ham_probe_lattice(
    times: &[f64],
    coords: &[Vec<f64>],
    rs: &[f64],
    ps: &[f64],
    a00: &[f64],
) -> Vec<HamProbe> {
    let mut out = Vec::new();
    for &t in times {
        for x in coords {
            let k = x.len();
            for &r in rs {
                for &p in ps {
                    for &a in a00 {
                        let mut pv = vec![0.0; k];
                        pv[0] = p;
                        let mut am = DMatrix::zeros(k, k);
                        am[(0, 0)] = a;
                        out.push(HamProbe {
                            t,
                            x: ProjectedState { coords: x.clone() },
                            r,
                            p: pv,
                            a: am,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianRow {
    pub n: usize,
    /// `max |H_n - H|` over the probes.
    pub h_error: f64,
    /// `max sup_v |g_n - g|` over the same probes.
    pub g_error: f64,
    /// Probes where `|H_n - H|` exceeds `sup_v |g_n - g|` beyond rounding.
    pub exceptions: usize,
}

/// Row-wise comparison of `|H_n - H|` with `sup_v |g_n - g|` at every probe.
pub fn hamiltonian_convergence_audit(
    ham: &Hamiltonian,
    family: impl Fn(usize) -> Generator + Sync,
    probes: &[HamProbe],
    schedule: &[usize],
) -> Result<Vec<HamiltonianRow>, HjbError> {
    schedule
        .iter()
        .map(|&n| {
            let hn = ham.with_generator(family(n))?;
            let per: Vec<Result<(f64, f64, bool), HjbError>> = probes
                .par_iter()
                .map(|pr| {
                    let seg = ham.projection.embed(pr.t, &pr.x)?;
                    let h = ham.eval(pr.t, seg.view(), pr.r, &pr.p, &pr.a)?;
                    let h_n = hn.eval(pr.t, seg.view(), pr.r, &pr.p, &pr.a)?;
                    let gap = ham.generator_gap(&hn.generator, pr.t, seg.view(), pr.r);
                    let dh = (h_n - h).abs();
                    let round = 8.0 * f64::EPSILON * (h.abs() + h_n.abs() + gap);
                    Ok((dh, gap, dh > gap + round))
                })
                .collect();
            let mut row = HamiltonianRow {
                n,
                h_error: 0.0,
                g_error: 0.0,
                exceptions: 0,
            };
            for r in per {
                let (dh, gap, bad) = r?;
                row.h_error = row.h_error.max(dh);
                row.g_error = row.g_error.max(gap);
                row.exceptions += bad as usize;
            }
            Ok(row)
        })
        .collect()
}

/// Closed-form heat-equation fixture `u_t + u_xx / 2 = 0` on `[0, T]`:
/// `u = (1 + T - t)^{-1/2} exp(-x^2 / (2 (1 + T - t)))`.
pub fn heat_solution(horizon: f64) -> TestFunction {
    let s = move |t: f64| 1.0 + horizon - t;
    let u = move |t: f64, x: f64| s(t).powf(-0.5) * (-x * x / (2.0 * s(t))).exp();
    TestFunction::new(
        move |t, x| u(t, x[0]),
        move |t, x| {
            let v = s(t);
            u(t, x[0]) * (0.5 / v - x[0] * x[0] / (2.0 * v * v))
        },
        move |t, x| vec![-x[0] / s(t) * u(t, x[0])],
        move |t, x| {
            let v = s(t);
            DMatrix::from_element(1, 1, u(t, x[0]) * (x[0] * x[0] / (v * v) - 1.0 / v))
        },
    )
}

/// `phi - eta (T - t)`, which adds `eta` to every residual.
pub fn with_time_source(phi: &TestFunction, eta: f64, horizon: f64) -> TestFunction {
    let (f, dt, grad, hess) = (phi.phi.clone(), phi.dt.clone(), phi.grad.clone(), phi.hess.clone());
    TestFunction::new(
        move |t, x| f(t, x) - eta * (horizon - t),
        move |t, x| dt(t, x) + eta,
        move |t, x| grad(t, x),
        move |t, x| hess(t, x),
    )
}
