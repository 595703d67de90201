//! Coefficient and generator specifications with declared regularity constants.
//!
//! The constants `L`, `L~`, `mu`, `M`, `p` are supplied by whoever builds the
//! model and are sample-audited here; nothing tries to infer them.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::segment::{sup_norm_distance, PathSegment, Segment};

/// `b(t, gamma, v)` written into an `n`-vector.
pub type DriftFn = Arc<dyn Fn(f64, Segment<'_>, &[f64], &mut [f64]) + Send + Sync>;
/// `sigma(t, gamma, v)` written into an `n x d` row-major matrix.
pub type DiffusionFn = Arc<dyn Fn(f64, Segment<'_>, &[f64], &mut [f64]) + Send + Sync>;
/// `g(t, gamma, y, z, v)`.
pub type DriverFn = Arc<dyn Fn(f64, Segment<'_>, f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// `Phi(gamma)`.
pub type TerminalFn = Arc<dyn Fn(Segment<'_>) -> f64 + Send + Sync>;

/// Drift and diffusion of the controlled delay equation.
#[derive(Clone)]
pub struct Coefficients {
    pub name: String,
    dim: usize,
    noise_dim: usize,
    drift: DriftFn,
    diffusion: DiffusionFn,
    lipschitz: f64,
}

impl fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficients")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl Coefficients {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        lipschitz: f64,
        drift: impl Fn(f64, Segment<'_>, &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(f64, Segment<'_>, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            noise_dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            lipschitz,
        }
    }

    /// Scalar (`n = d = 1`) coefficients from plain closures.
    pub fn scalar(
        name: impl Into<String>,
        lipschitz: f64,
        drift: impl Fn(f64, Segment<'_>, &[f64]) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, Segment<'_>, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            name,
            1,
            1,
            lipschitz,
            move |t, s, v, out| out[0] = drift(t, s, v),
            move |t, s, v, out| out[0] = diffusion(t, s, v),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn drift(&self, t: f64, seg: Segment<'_>, v: &[f64], out: &mut [f64]) {
        (self.drift)(t, seg, v, out)
    }

    pub fn diffusion(&self, t: f64, seg: Segment<'_>, v: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, seg, v, out)
    }

    pub fn drift_vec(&self, t: f64, seg: Segment<'_>, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift(t, seg, v, &mut out);
        out
    }

    pub fn diffusion_vec(&self, t: f64, seg: Segment<'_>, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.diffusion(t, seg, v, &mut out);
        out
    }
}

/// Regularity constants of a generator: Lipschitz in `(gamma, z)`, one-sided
/// Lipschitz (`mu`) in `y`, and polynomial growth `M (1 + |y|^p)` in `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConstants {
    pub lipschitz: f64,
    pub monotone_mu: f64,
    pub growth_m: f64,
    pub growth_p: f64,
}

impl Default for GeneratorConstants {
    fn default() -> Self {
        Self {
            lipschitz: 0.0,
            monotone_mu: 0.0,
            growth_m: 0.0,
            growth_p: 1.0,
        }
    }
}

/// BSDE driver `g` and terminal functional `Phi`.
#[derive(Clone)]
pub struct Generator {
    pub name: String,
    driver: DriverFn,
    terminal: TerminalFn,
    pub constants: GeneratorConstants,
    z_dependent: bool,
    /// Open interval of `y` on which `g` is defined.
    domain: (f64, f64),
    smooth_in_y: bool,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("name", &self.name)
            .field("constants", &self.constants)
            .field("z_dependent", &self.z_dependent)
            .field("domain", &self.domain)
            .field("smooth_in_y", &self.smooth_in_y)
            .finish()
    }
}

impl Generator {
    pub fn new(
        name: impl Into<String>,
        constants: GeneratorConstants,
        z_dependent: bool,
        driver: impl Fn(f64, Segment<'_>, f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(Segment<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            driver: Arc::new(driver),
            terminal: Arc::new(terminal),
            constants,
            z_dependent,
            domain: (f64::NEG_INFINITY, f64::INFINITY),
            smooth_in_y: false,
        }
    }

    /// Driver that depends on `(t, gamma, y, v)` only.
    pub fn z_free(
        name: impl Into<String>,
        constants: GeneratorConstants,
        driver: impl Fn(f64, Segment<'_>, f64, &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(Segment<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            name,
            constants,
            false,
            move |t, s, y, _z, v| driver(t, s, y, v),
            terminal,
        )
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.domain = (lo, hi);
        self
    }

    pub fn with_smooth_in_y(mut self, smooth: bool) -> Self {
        self.smooth_in_y = smooth;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_terminal(
        mut self,
        terminal: impl Fn(Segment<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Arc::new(terminal);
        self
    }

    /// Same driver with a different terminal functional.
    pub fn with_terminal_fn(mut self, terminal: TerminalFn) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn driver_fn(&self) -> DriverFn {
        Arc::clone(&self.driver)
    }

    pub fn terminal_fn(&self) -> TerminalFn {
        Arc::clone(&self.terminal)
    }

    /// Replaces the driver, keeping terminal, domain and flags.
    pub fn map_driver(
        &self,
        name: impl Into<String>,
        constants: GeneratorConstants,
        driver: impl Fn(f64, Segment<'_>, f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            driver: Arc::new(driver),
            terminal: Arc::clone(&self.terminal),
            constants,
            z_dependent: self.z_dependent,
            domain: self.domain,
            smooth_in_y: self.smooth_in_y,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, seg: Segment<'_>, y: f64, z: &[f64], v: &[f64]) -> f64 {
        (self.driver)(t, seg, y, z, v)
    }

    #[inline]
    pub fn terminal(&self, seg: Segment<'_>) -> f64 {
        (self.terminal)(seg)
    }

    pub fn z_dependent(&self) -> bool {
        self.z_dependent
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn smooth_in_y(&self) -> bool {
        self.smooth_in_y
    }

    pub fn in_domain(&self, y: f64) -> bool {
        y > self.domain.0 && y < self.domain.1
    }
}

/// Compact box from which audit probes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeBox {
    pub time: (f64, f64),
    pub state: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
    /// Control values to probe; an empty list probes `v = 0`.
    pub controls: Vec<Vec<f64>>,
}

impl ProbeBox {
    pub fn new(y: (f64, f64)) -> Self {
        Self {
            time: (0.0, 1.0),
            state: (-2.0, 2.0),
            y,
            z: (-1.0, 1.0),
            controls: Vec::new(),
        }
    }

    pub fn with_controls(mut self, controls: Vec<Vec<f64>>) -> Self {
        self.controls = controls;
        self
    }

    pub fn with_state(mut self, lo: f64, hi: f64) -> Self {
        self.state = (lo, hi);
        self
    }

    fn draw_control<R: Rng>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        if self.controls.is_empty() {
            vec![0.0; m]
        } else {
            self.controls[rng.gen_range(0..self.controls.len())].clone()
        }
    }

    fn draw_segment<R: Rng>(
        &self,
        rng: &mut R,
        anchor: f64,
        step: f64,
        lag_steps: usize,
        dim: usize,
    ) -> PathSegment {
        let values = (0..(lag_steps + 1) * dim)
            .map(|_| rng.gen_range(self.state.0..=self.state.1))
            .collect();
        PathSegment::new(anchor, step, lag_steps, dim, values).expect("finite probe")
    }
}

/// Shape of the segments fed to audit probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeShape {
    pub lag_steps: usize,
    pub step: f64,
    pub dim: usize,
    pub noise_dim: usize,
    pub control_dim: usize,
}

impl Default for ProbeShape {
    fn default() -> Self {
        Self {
            lag_steps: 2,
            step: 0.1,
            dim: 1,
            noise_dim: 1,
            control_dim: 1,
        }
    }
}

/// Result of sampling the declared generator assumptions.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GeneratorAudit {
    pub draws: usize,
    pub monotonicity_violations: usize,
    pub growth_violations: usize,
    pub lipschitz_violations: usize,
    pub z_violations: usize,
    /// Largest observed `(y - y')(g(y) - g(y')) / |y - y'|^2`.
    pub observed_mu: f64,
}

impl GeneratorAudit {
    pub fn clean(&self) -> bool {
        self.monotonicity_violations == 0
            && self.growth_violations == 0
            && self.lipschitz_violations == 0
            && self.z_violations == 0
    }
}

const AUDIT_REL_TOL: f64 = 1e-9;

/// Samples the monotonicity, growth, Lipschitz and z-independence assumptions
/// of `gen` on `draws` random points of `probe`. The `y` range is intersected
/// with the generator domain.
pub fn audit_generator(
    gen: &Generator,
    probe: &ProbeBox,
    shape: ProbeShape,
    draws: usize,
    seed: u64,
) -> GeneratorAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = gen.constants;
    let (dlo, dhi) = gen.domain();
    let ylo = probe.y.0.max(dlo);
    let yhi = probe.y.1.min(dhi);
    let draw_y = |rng: &mut ChaCha8Rng| loop {
        let y = rng.gen_range(ylo..=yhi);
        if gen.in_domain(y) {
            return y;
        }
    };
    let zero_in_domain = gen.in_domain(0.0);
    let mut report = GeneratorAudit {
        draws,
        observed_mu: f64::NEG_INFINITY,
        ..Default::default()
    };
    for _ in 0..draws {
        let t = rng.gen_range(probe.time.0..=probe.time.1);
        let seg = probe.draw_segment(&mut rng, t, shape.step, shape.lag_steps, shape.dim);
        let seg2 = probe.draw_segment(&mut rng, t, shape.step, shape.lag_steps, shape.dim);
        let v = probe.draw_control(&mut rng, shape.control_dim);
        let z: Vec<f64> = (0..shape.noise_dim)
            .map(|_| rng.gen_range(probe.z.0..=probe.z.1))
            .collect();
        let z2: Vec<f64> = (0..shape.noise_dim)
            .map(|_| rng.gen_range(probe.z.0..=probe.z.1))
            .collect();
        let y = draw_y(&mut rng);
        let y2 = draw_y(&mut rng);

        let g1 = gen.eval(t, seg.view(), y, &z, &v);
        let g2 = gen.eval(t, seg.view(), y2, &z, &v);
        if y != y2 {
            let dy = y - y2;
            let ratio = dy * (g1 - g2) / (dy * dy);
            report.observed_mu = report.observed_mu.max(ratio);
            if dy * (g1 - g2) > c.monotone_mu * dy * dy + AUDIT_REL_TOL * (1.0 + dy * dy + g1.abs() + g2.abs())
            {
                report.monotonicity_violations += 1;
            }
        }
        if zero_in_domain {
            let g0 = gen.eval(t, seg.view(), 0.0, &z, &v);
            if (g1 - g0).abs() > c.growth_m * (1.0 + y.abs().powf(c.growth_p)) + AUDIT_REL_TOL * (1.0 + g1.abs())
            {
                report.growth_violations += 1;
            }
        }
        let g_other = gen.eval(t, seg2.view(), y, &z2, &v);
        let dgamma = sup_norm_distance(seg.view(), seg2.view()).unwrap_or(0.0);
        let dz = z
            .iter()
            .zip(&z2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dphi = (gen.terminal(seg.view()) - gen.terminal(seg2.view())).abs();
        let bound = |d: f64| c.lipschitz * d * (1.0 + AUDIT_REL_TOL) + AUDIT_REL_TOL;
        if dphi > bound(dgamma) || (g1 - g_other).abs() > bound(dgamma + dz) {
            report.lipschitz_violations += 1;
        }
        if !gen.z_dependent() {
            let g_z = gen.eval(t, seg.view(), y, &z2, &v);
            if g_z != g1 {
                report.z_violations += 1;
            }
        }
    }
    report
}

/// Result of sampling the Lipschitz bound on `(b, sigma)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoefficientAudit {
    pub draws: usize,
    pub violations: usize,
    pub max_ratio: f64,
}

/// Spot-checks `|b - b'| + |sigma - sigma'| <= L (||gamma - gamma'|| + |v - v'|)`
/// with `slack` as relative allowance.
pub fn audit_coefficients(
    coeffs: &Coefficients,
    probe: &ProbeBox,
    shape: ProbeShape,
    draws: usize,
    seed: u64,
    slack: f64,
) -> CoefficientAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = coeffs.dim();
    let mut report = CoefficientAudit {
        draws,
        ..Default::default()
    };
    for _ in 0..draws {
        let t = rng.gen_range(probe.time.0..=probe.time.1);
        let a = probe.draw_segment(&mut rng, t, shape.step, shape.lag_steps, n);
        let b = probe.draw_segment(&mut rng, t, shape.step, shape.lag_steps, n);
        let v = probe.draw_control(&mut rng, shape.control_dim);
        let w = probe.draw_control(&mut rng, shape.control_dim);
        let da = coeffs.drift_vec(t, a.view(), &v);
        let db = coeffs.drift_vec(t, b.view(), &w);
        let sa = coeffs.diffusion_vec(t, a.view(), &v);
        let sb = coeffs.diffusion_vec(t, b.view(), &w);
        let lhs = l2(&da, &db) + l2(&sa, &sb);
        let rhs = sup_norm_distance(a.view(), b.view()).unwrap_or(0.0) + l2(&v, &w);
        if rhs > 0.0 {
            report.max_ratio = report.max_ratio.max(lhs / rhs);
        }
        if lhs > coeffs.lipschitz() * rhs * (1.0 + slack) + 1e-12 {
            report.violations += 1;
        }
    }
    report
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic() -> Generator {
        Generator::z_free(
            "cubic",
            GeneratorConstants {
                lipschitz: 0.0,
                monotone_mu: 0.0,
                growth_m: 1.0,
                growth_p: 3.0,
            },
            |_, _, y, _| -y * y * y,
            |_| 2.0,
        )
    }

    #[test]
    fn cubic_driver_passes_its_declared_constants() {
        let audit = audit_generator(
            &cubic(),
            &ProbeBox::new((-3.0, 3.0)),
            ProbeShape::default(),
            2000,
            1,
        );
        assert!(audit.clean(), "{audit:?}");
        assert!(audit.observed_mu <= 0.0);
    }

    #[test]
    fn understated_mu_is_caught() {
        let g = Generator::z_free(
            "linear",
            GeneratorConstants {
                monotone_mu: 0.5,
                growth_m: 2.0,
                ..Default::default()
            },
            |_, _, y, _| 2.0 * y,
            |_| 0.0,
        );
        let audit = audit_generator(&g, &ProbeBox::new((-1.0, 1.0)), ProbeShape::default(), 200, 3);
        assert!(audit.monotonicity_violations > 0);
        assert!((audit.observed_mu - 2.0).abs() < 1e-9);
    }

    #[test]
    fn hidden_z_dependence_is_caught() {
        let g = Generator::new(
            "cheat",
            GeneratorConstants {
                lipschitz: 1.0,
                ..Default::default()
            },
            false,
            |_, _, _, z, _| z[0],
            |_| 0.0,
        );
        let audit = audit_generator(&g, &ProbeBox::new((-1.0, 1.0)), ProbeShape::default(), 50, 3);
        assert_eq!(audit.z_violations, 50);
    }

    #[test]
    fn lagged_drift_lipschitz_audit() {
        let c = Coefficients::scalar(
            "lagged",
            1.0,
            |_, s, v| 0.5 * s.lagged()[0] + 0.5 * v[0],
            |_, s, _| 0.2 * s.current()[0].sin(),
        );
        let probe = ProbeBox::new((0.0, 0.0)).with_controls(vec![vec![-1.0], vec![1.0]]);
        let audit = audit_coefficients(&c, &probe, ProbeShape::default(), 1000, 9, 0.0);
        assert_eq!(audit.violations, 0);
        assert!(audit.max_ratio <= 1.0);
    }
}
