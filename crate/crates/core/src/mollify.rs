//! Smoothing of generators in `y` by convolution with a bump, truncation of
//! the `y = 0` slice, and uniform-convergence audits on finite probe sets.

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use serde::Serialize;

use crate::model::{Generator, GeneratorConstants};
use crate::segment::PathSegment;

pub const DEFAULT_QUAD_NODES: usize = 64;

/// Unnormalised bump `exp(-1 / (1 - x^2))` on `(-1, 1)`, zero outside.
pub fn bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp()
    }
}

/// Gauss–Legendre discretisation of the unit-mass bump on `[-1, 1]`.
///
/// `rho_n(a) = n rho(n a)`, so the offsets for support parameter `n` are the
/// nodes divided by `n` and the weights do not depend on `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MollifierSpec {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    normaliser: f64,
}

impl Default for MollifierSpec {
    fn default() -> Self {
        Self::new(DEFAULT_QUAD_NODES)
    }
}

impl MollifierSpec {
    /// # Panics
    /// If `quad_nodes == 0`.
    pub fn new(quad_nodes: usize) -> Self {
        let rule = GaussLegendre::new(NonZeroUsize::new(quad_nodes).expect("at least one node"));
        let pairs = rule.as_node_weight_pairs();
        let raw: Vec<f64> = pairs.iter().map(|(x, w)| w * bump(*x)).collect();
        let normaliser: f64 = raw.iter().sum();
        Self {
            nodes: pairs.iter().map(|(x, _)| *x).collect(),
            weights: raw.iter().map(|w| w / normaliser).collect(),
            normaliser,
        }
    }

    pub fn quad_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// `int_{-1}^{1} exp(-1/(1-x^2)) dx` as seen by the rule.
    pub fn normaliser(&self) -> f64 {
        self.normaliser
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Normalised density `rho_n(a)`.
    pub fn density(&self, n: usize, a: f64) -> f64 {
        let n = n as f64;
        n * bump(n * a) / self.normaliser
    }

    /// `(a_j, w_j)` with `a_j` in `(-1/n, 1/n)` and `sum w_j = 1`.
    pub fn offsets(&self, n: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let inv = 1.0 / n as f64;
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (x * inv, *w))
    }

    /// `sum_j w_j |a_j|`, the quadrature value of `int |a| rho_n(a) da`.
    pub fn abs_moment(&self, n: usize) -> f64 {
        self.offsets(n).map(|(a, w)| w * a.abs()).sum()
    }
}

/// `g_n(t, gamma, y, z, v) = sum_j w_j g(t, gamma, y - a_j, z, v)`.
///
/// Keeps `mu` and the `(gamma, z)` Lipschitz constant; the declared growth
/// constant becomes `M (3 + 2^{p-1})`, which bounds the shifted slices for
/// `n >= 1`. The domain shrinks by `1/n` on finite sides.
pub fn mollify(gen: &Generator, n: usize, spec: &MollifierSpec) -> Generator {
    assert!(n >= 1, "support parameter must be positive");
    let inner = gen.driver_fn();
    let offsets: Vec<(f64, f64)> = spec.offsets(n).collect();
    let c = gen.constants;
    let constants = GeneratorConstants {
        growth_m: c.growth_m * (3.0 + 2f64.powf(c.growth_p - 1.0)),
        ..c
    };
    let (lo, hi) = gen.domain();
    let r = 1.0 / n as f64;
    gen.map_driver(format!("{}_mollified_{n}", gen.name), constants, move |t, s, y, z, v| {
        offsets.iter().map(|(a, w)| w * inner(t, s, y - a, z, v)).sum()
    })
    .with_domain(lo + r, hi - r)
    .with_smooth_in_y(true)
}

/// Radial clamp `Pi_m(x) = min(m, |x|) x / |x|`, with `Pi_m(0) = 0`.
pub fn radial_clamp(x: f64, m: f64) -> f64 {
    if x.abs() <= m {
        x
    } else {
        m * x.signum()
    }
}

/// `g_m(t, gamma, y, z, v) = g(..., y, ...) - g(..., 0, ...) + Pi_m(g(..., 0, ...))`.
pub fn truncate(gen: &Generator, m: usize) -> Generator {
    assert!(m >= 1, "truncation level must be positive");
    assert!(gen.in_domain(0.0), "truncation needs y = 0 in the generator domain");
    let inner = gen.driver_fn();
    let mf = m as f64;
    let c = gen.constants;
    let constants = GeneratorConstants {
        lipschitz: 3.0 * c.lipschitz,
        ..c
    };
    gen.map_driver(format!("{}_truncated_{m}", gen.name), constants, move |t, s, y, z, v| {
        let g0 = inner(t, s, 0.0, z, v);
        inner(t, s, y, z, v) - g0 + radial_clamp(g0, mf)
    })
}

/// One audit point `(t, gamma, y, z, v)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub t: f64,
    pub segment: PathSegment,
    pub y: f64,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
}

/// Finite probe lattice of a compact box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSet {
    pub probes: Vec<Probe>,
}

impl ProbeSet {
    /// Cartesian product of times, segments, `y_count` equispaced `y` values
    /// in `[y_lo, y_hi]` and controls; `z` is zero with dimension `noise_dim`.
    pub fn lattice(
        times: &[f64],
        segments: &[PathSegment],
        y_range: (f64, f64),
        y_count: usize,
        controls: &[Vec<f64>],
        noise_dim: usize,
    ) -> Self {
        let ys: Vec<f64> = if y_count <= 1 {
            vec![0.5 * (y_range.0 + y_range.1)]
        } else {
            (0..y_count)
                .map(|i| y_range.0 + (y_range.1 - y_range.0) * i as f64 / (y_count - 1) as f64)
                .collect()
        };
        let mut probes = Vec::new();
        for &t in times {
            for seg in segments {
                for &y in &ys {
                    for v in controls {
                        probes.push(Probe {
                            t,
                            segment: seg.clone().with_anchor(t),
                            y,
                            z: vec![0.0; noise_dim],
                            v: v.clone(),
                        });
                    }
                }
            }
        }
        Self { probes }
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Largest `|approx - reference|` over the probe set and where it occurs.
pub fn sup_error(reference: &Generator, approx: &Generator, probes: &ProbeSet) -> (f64, usize) {
    probes
        .probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let a = approx.eval(p.t, p.segment.view(), p.y, &p.z, &p.v);
            let b = reference.eval(p.t, p.segment.view(), p.y, &p.z, &p.v);
            ((a - b).abs(), i)
        })
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub sup_error: f64,
    pub worst_probe: usize,
}

/// `(n, sup-error)` rows for each `n` in `schedule`.
pub fn convergence_table(
    gen: &Generator,
    family: impl Fn(usize) -> Generator,
    probes: &ProbeSet,
    schedule: &[usize],
) -> Vec<ConvergenceRow> {
    schedule
        .iter()
        .map(|&n| {
            let (err, worst) = sup_error(gen, &family(n), probes);
            ConvergenceRow {
                n,
                sup_error: err,
                worst_probe: worst,
            }
        })
        .collect()
}

/// `1, 2, 4, ..., 1024`.
pub fn dyadic_schedule() -> Vec<usize> {
    (0..=10).map(|k| 1usize << k).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceAudit {
    /// Smallest scheduled `n` with sup-error at most `eps`.
    pub achieved: Option<usize>,
    pub rows: Vec<ConvergenceRow>,
    /// Worst probe of the last row when the schedule ran out.
    pub worst: Option<Probe>,
}

/// Walks the dyadic schedule until the sup-error over `probes` drops to `eps`.
pub fn uniform_convergence_audit(
    gen: &Generator,
    family: impl Fn(usize) -> Generator,
    probes: &ProbeSet,
    eps: f64,
) -> ConvergenceAudit {
    let mut rows = Vec::new();
    for n in dyadic_schedule() {
        let (err, worst) = sup_error(gen, &family(n), probes);
        rows.push(ConvergenceRow {
            n,
            sup_error: err,
            worst_probe: worst,
        });
        if err <= eps {
            return ConvergenceAudit {
                achieved: Some(n),
                rows,
                worst: None,
            };
        }
    }
    let worst = rows.last().map(|r| probes.probes[r.worst_probe].clone());
    ConvergenceAudit {
        achieved: None,
        rows,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{audit_generator, ProbeBox, ProbeShape};
    use proptest::prelude::*;

    fn scalar(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Generator {
        Generator::z_free(
            name,
            GeneratorConstants {
                lipschitz: 0.0,
                monotone_mu: 1.0,
                growth_m: 1.0,
                growth_p: 1.0,
            },
            move |_, _, y, _| f(y),
            |_| 0.0,
        )
    }

    fn y_probes(lo: f64, hi: f64, count: usize) -> ProbeSet {
        ProbeSet::lattice(
            &[0.0],
            &[PathSegment::constant(0.0, 0.1, 0, &[0.0])],
            (lo, hi),
            count,
            &[vec![0.0]],
            1,
        )
    }

    /// Composite Simpson on [-1/n, 1/n] with the exact bump, independent of the GL rule.
    fn simpson_convolution(f: impl Fn(f64) -> f64, y: f64, n: usize) -> f64 {
        let m = 20_000;
        let r = 1.0 / n as f64;
        let hs = 2.0 * r / m as f64;
        let rho = |a: f64| bump(a * n as f64);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..=m {
            let a = -r + i as f64 * hs;
            let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            num += w * rho(a) * f(y - a);
            den += w * rho(a);
        }
        num / den
    }

    #[test]
    fn weights_have_unit_mass() {
        let spec = MollifierSpec::default();
        assert!((spec.weight_sum() - 1.0).abs() < 1e-12);
        assert_eq!(spec.density(4, 0.3), 0.0);
        assert!(spec.density(4, 0.2) > 0.0);
        assert!(spec.offsets(7).all(|(a, _)| a.abs() < 1.0 / 7.0));
    }

    #[test]
    fn linear_generators_are_reproduced() {
        let g = scalar("lin", |y| 2.0 * y - 1.0);
        let spec = MollifierSpec::default();
        for n in [1, 3, 10] {
            let gn = mollify(&g, n, &spec);
            for y in [-2.0, 0.0, 0.7] {
                let seg = PathSegment::constant(0.0, 0.1, 0, &[0.0]);
                let got = gn.eval(0.0, seg.view(), y, &[0.0], &[0.0]);
                assert!((got - (2.0 * y - 1.0)).abs() < 1e-13);
            }
        }
        let audit = uniform_convergence_audit(&g, |n| mollify(&g, n, &spec), &y_probes(-1.0, 1.0, 21), 1e-12);
        assert_eq!(audit.achieved, Some(1));
    }

    #[test]
    fn abs_value_at_origin_equals_first_moment() {
        let spec = MollifierSpec::default();
        let g = scalar("abs", f64::abs);
        for n in [1, 5, 10, 40] {
            let gn = mollify(&g, n, &spec);
            let seg = PathSegment::constant(0.0, 0.1, 0, &[0.0]);
            let at0 = gn.eval(0.0, seg.view(), 0.0, &[0.0], &[0.0]);
            assert!(at0 > 0.0 && at0 <= 1.0 / n as f64);
            let oracle = simpson_convolution(f64::abs, 0.0, n);
            // the kink of |y - a| costs the 64-node rule a few 1e-4 relative
            assert!((at0 - oracle).abs() < 1e-3 / n as f64, "n={n}: {at0} vs {oracle}");
        }
    }

    #[test]
    fn abs_value_sup_error_against_dense_oracle() {
        let spec = MollifierSpec::default();
        let n = 10;
        let gn = mollify(&scalar("abs", f64::abs), n, &spec);
        let seg = PathSegment::constant(0.0, 0.1, 0, &[0.0]);
        let mut worst: f64 = 0.0;
        for i in 0..=400 {
            let y = -1.0 + i as f64 / 200.0;
            let got = gn.eval(0.0, seg.view(), y, &[0.0], &[0.0]);
            let oracle = simpson_convolution(f64::abs, y, n);
            assert!((got - oracle).abs() < 1e-3 / n as f64);
            worst = worst.max((got - y.abs()).abs());
        }
        assert!(worst <= 0.1 + 1e-8);
    }

    #[test]
    fn abs_value_audit_stops_at_first_dyadic_below_eps() {
        let spec = MollifierSpec::default();
        let g = scalar("abs", f64::abs);
        let audit = uniform_convergence_audit(&g, |n| mollify(&g, n, &spec), &y_probes(-1.0, 1.0, 201), 0.05);
        // error is the first absolute moment of rho_n at y = 0, i.e. c / n
        let c = simpson_convolution(f64::abs, 0.0, 1);
        let expected = dyadic_schedule().into_iter().find(|&n| c / n as f64 <= 0.05).unwrap();
        assert_eq!(audit.achieved, Some(expected));
        assert_eq!(expected, 8);
        let loose = uniform_convergence_audit(&g, |n| mollify(&g, n, &spec), &y_probes(-1.0, 1.0, 201), 10.0);
        assert_eq!(loose.achieved, Some(1));
        let never = uniform_convergence_audit(&g, |n| mollify(&g, n, &spec), &y_probes(-1.0, 1.0, 201), 0.0);
        assert!(never.achieved.is_none() && never.worst.is_some());
    }

    #[test]
    fn truncation_examples() {
        let g = scalar("shift", |y| y + 7.0);
        let g3 = truncate(&g, 3);
        let seg = PathSegment::constant(0.0, 0.1, 0, &[0.0]);
        for y in [-1.0, 0.0, 2.5] {
            assert_eq!(g3.eval(0.0, seg.view(), y, &[0.0], &[0.0]), y + 3.0);
        }
        let gneg = truncate(&scalar("neg", |y| y - 9.0), 2);
        assert_eq!(gneg.eval(0.0, seg.view(), 1.0, &[0.0], &[0.0]), -1.0);
        let inactive = truncate(&scalar("small", |y| y.sin() + 0.5), 1);
        for y in [-1.0, 0.3] {
            assert_eq!(inactive.eval(0.0, seg.view(), y, &[0.0], &[0.0]), y.sin() + 0.5);
        }
        assert_eq!(radial_clamp(0.0, 1.0), 0.0);
        assert_eq!(radial_clamp(-9.0, 3.0), -3.0);
    }

    #[test]
    fn monotonicity_survives_smoothing_and_truncation() {
        let g = Generator::z_free(
            "cubic_abs",
            GeneratorConstants {
                lipschitz: 1.0,
                monotone_mu: 0.5,
                growth_m: 2.0,
                growth_p: 3.0,
            },
            |_, s, y, _| -y * y * y + 0.5 * y.abs() + s.current()[0].sin() + 5.0,
            |_| 0.0,
        );
        let spec = MollifierSpec::new(32);
        let probe = ProbeBox::new((-2.0, 2.0));
        for h in [g.clone(), mollify(&g, 4, &spec), truncate(&g, 1), truncate(&mollify(&g, 4, &spec), 2)] {
            let a = audit_generator(&h, &probe, ProbeShape::default(), 1000, 17);
            assert_eq!(a.monotonicity_violations, 0, "{}", h.name);
            assert!(a.clean(), "{}: {a:?}", h.name);
        }
    }

    #[test]
    fn mollified_abs_has_bounded_slope() {
        let spec = MollifierSpec::default();
        let g = scalar("abs", f64::abs);
        let seg = PathSegment::constant(0.0, 0.1, 0, &[0.0]);
        for n in [2, 8, 32] {
            let gn = mollify(&g, n, &spec);
            let e = 1e-6;
            let slope = (0..=200)
                .map(|i| -1.0 + i as f64 / 100.0)
                .map(|y| {
                    (gn.eval(0.0, seg.view(), y + e, &[0.0], &[0.0]) - gn.eval(0.0, seg.view(), y - e, &[0.0], &[0.0])).abs()
                        / (2.0 * e)
                })
                .fold(0.0, f64::max);
            assert!(slope <= 1.0 + 1e-6, "n={n}: {slope}");
            assert!(gn.smooth_in_y());
        }
    }

    proptest! {
        #[test]
        fn truncation_keeps_increments(y in -5.0f64..5.0, shift in -20.0f64..20.0, m in 1usize..6) {
            let g = scalar("aff", move |y| -y * y * y + shift);
            let gm = truncate(&g, m);
            let seg = PathSegment::constant(0.0, 0.1, 0, &[0.0]);
            let inc = |h: &Generator| h.eval(0.0, seg.view(), y, &[0.0], &[0.0]) - h.eval(0.0, seg.view(), 0.0, &[0.0], &[0.0]);
            let (a, b) = (inc(&gm), inc(&g));
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs() + shift.abs()), "{} vs {}", a, b);
            prop_assert!(gm.eval(0.0, seg.view(), 0.0, &[0.0], &[0.0]).abs() <= m as f64);
        }
    }
}
