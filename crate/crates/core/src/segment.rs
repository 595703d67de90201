//! Path segments: the lagged state window `X_s` on `[s - delta, s]`, sampled at grid nodes.
//!
//! [`Segment`] is a borrowed view used inside the hot loops (coefficients are
//! evaluated on windows of the simulated paths without copying);
//! [`PathSegment`] owns its samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("segments have different lag lengths ({0} vs {1})")]
    LagMismatch(usize, usize),
    #[error("segments have different state dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("segments use different grid steps ({0} vs {1})")]
    StepMismatch(f64, f64),
    #[error("anchors {0} and {1} are not separated by a whole number of steps")]
    AnchorMisaligned(f64, f64),
    #[error("expected {expected} samples, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("segment contains a non-finite sample")]
    NonFinite,
}

/// Borrowed window of `lag_steps + 1` samples of an `dim`-vector path, oldest first.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    anchor: f64,
    step: f64,
    lag_steps: usize,
    dim: usize,
    values: &'a [f64],
}

impl<'a> Segment<'a> {
    pub fn new(
        anchor: f64,
        step: f64,
        lag_steps: usize,
        dim: usize,
        values: &'a [f64],
    ) -> Result<Self, SegmentError> {
        let expected = (lag_steps + 1) * dim;
        if values.len() != expected {
            return Err(SegmentError::BadLength {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            anchor,
            step,
            lag_steps,
            dim,
            values,
        })
    }

    /// Unchecked constructor for internal windows whose length is known by construction.
    pub(crate) fn from_raw(
        anchor: f64,
        step: f64,
        lag_steps: usize,
        dim: usize,
        values: &'a [f64],
    ) -> Self {
        debug_assert_eq!(values.len(), (lag_steps + 1) * dim);
        Self {
            anchor,
            step,
            lag_steps,
            dim,
            values,
        }
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn lag_steps(&self) -> usize {
        self.lag_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lag_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    /// Sample `j`, where `j = 0` is time `s - delta` and `j = lag_steps` is `s`.
    pub fn point(&self, j: usize) -> &'a [f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// `gamma(s)`.
    pub fn current(&self) -> &'a [f64] {
        self.point(self.lag_steps)
    }

    /// `gamma(s - delta)`.
    pub fn lagged(&self) -> &'a [f64] {
        self.point(0)
    }

    /// Sample time of point `j`.
    pub fn time_of(&self, j: usize) -> f64 {
        self.anchor - (self.lag_steps - j) as f64 * self.step
    }

    /// Node-wise `max |gamma(r)|`.
    pub fn sup_norm(&self) -> f64 {
        (0..self.len())
            .map(|j| norm(self.point(j)))
            .fold(0.0, f64::max)
    }

    pub fn to_owned(&self) -> PathSegment {
        PathSegment {
            anchor: self.anchor,
            step: self.step,
            lag_steps: self.lag_steps,
            dim: self.dim,
            values: self.values.to_vec(),
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Owned path segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSegment {
    anchor: f64,
    step: f64,
    lag_steps: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PathSegment {
    pub fn new(
        anchor: f64,
        step: f64,
        lag_steps: usize,
        dim: usize,
        values: Vec<f64>,
    ) -> Result<Self, SegmentError> {
        Segment::new(anchor, step, lag_steps, dim, &values)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SegmentError::NonFinite);
        }
        Ok(Self {
            anchor,
            step,
            lag_steps,
            dim,
            values,
        })
    }

    /// Constant history `gamma(r) = value` on the whole window.
    pub fn constant(anchor: f64, step: f64, lag_steps: usize, value: &[f64]) -> Self {
        let values = value
            .iter()
            .copied()
            .cycle()
            .take(value.len() * (lag_steps + 1))
            .collect();
        Self {
            anchor,
            step,
            lag_steps,
            dim: value.len(),
            values,
        }
    }

    /// Scalar history sampled from `f(time)`.
    pub fn from_fn(anchor: f64, step: f64, lag_steps: usize, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=lag_steps)
            .map(|j| f(anchor - (lag_steps - j) as f64 * step))
            .collect();
        Self {
            anchor,
            step,
            lag_steps,
            dim: 1,
            values,
        }
    }

    pub fn view(&self) -> Segment<'_> {
        Segment::from_raw(self.anchor, self.step, self.lag_steps, self.dim, &self.values)
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn lag_steps(&self) -> usize {
        self.lag_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.view().sup_norm()
    }

    /// Re-anchor without touching the samples.
    pub fn with_anchor(mut self, anchor: f64) -> Self {
        self.anchor = anchor;
        self
    }

    /// Adds `by` to every sample.
    pub fn shifted(&self, by: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v += by);
        out
    }
}

/// Sup-norm distance between two segments.
///
/// With a common anchor this is the node-wise max Euclidean distance. With
/// different anchors the time axis runs over the union of both windows and each
/// segment is read with its index clamped to its own window, i.e.
/// `gamma_t((t - delta) v r ^ t)`.
pub fn sup_norm_distance(a: Segment<'_>, b: Segment<'_>) -> Result<f64, SegmentError> {
    if a.lag_steps != b.lag_steps {
        return Err(SegmentError::LagMismatch(a.lag_steps, b.lag_steps));
    }
    if a.dim != b.dim {
        return Err(SegmentError::DimMismatch(a.dim, b.dim));
    }
    let lag = a.lag_steps;
    if a.anchor == b.anchor {
        return Ok((0..=lag)
            .map(|j| dist(a.point(j), b.point(j)))
            .fold(0.0, f64::max));
    }
    if (a.step - b.step).abs() > 1e-12 * a.step.abs().max(b.step.abs()) {
        return Err(SegmentError::StepMismatch(a.step, b.step));
    }
    let (early, late) = if a.anchor < b.anchor { (a, b) } else { (b, a) };
    let ratio = (late.anchor - early.anchor) / early.step;
    let offset = ratio.round();
    if (ratio - offset).abs() > 1e-9 * ratio.abs().max(1.0) {
        return Err(SegmentError::AnchorMisaligned(a.anchor, b.anchor));
    }
    let offset = offset as usize;
    // index i counts grid nodes from early.anchor - delta up to late.anchor
    Ok((0..=lag + offset)
        .map(|i| {
            let ie = i.min(lag);
            let il = i.saturating_sub(offset).min(lag);
            dist(early.point(ie), late.point(il))
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(values: &[f64]) -> PathSegment {
        PathSegment::new(0.0, 0.1, values.len() - 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn identical_segments_are_at_distance_zero() {
        let a = seg(&[0.3, -1.0, 2.0]);
        assert_eq!(sup_norm_distance(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn constant_shift() {
        let a = PathSegment::constant(0.0, 0.1, 4, &[0.0]);
        let b = PathSegment::constant(0.0, 0.1, 4, &[-2.5]);
        assert_eq!(sup_norm_distance(a.view(), b.view()).unwrap(), 2.5);
    }

    #[test]
    fn max_at_last_node() {
        let a = seg(&[0.0, 1.0, 2.0]);
        let b = seg(&[0.0, 1.0, 5.0]);
        assert_eq!(sup_norm_distance(a.view(), b.view()).unwrap(), 3.0);
    }

    #[test]
    fn mismatched_lags_are_rejected() {
        let a = seg(&[0.0, 1.0, 2.0]);
        let b = seg(&[0.0, 1.0]);
        assert_eq!(
            sup_norm_distance(a.view(), b.view()),
            Err(SegmentError::LagMismatch(2, 1))
        );
    }

    #[test]
    fn cross_anchor_distance_uses_clamping() {
        // a lives on [-0.2, 0], b on [-0.1, 0.1]; union grid -0.2..0.1.
        let a = PathSegment::new(0.0, 0.1, 2, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let b = PathSegment::new(0.1, 0.1, 2, 1, vec![2.0, 3.0, 4.0]).unwrap();
        // r = -0.2: a=1, b clamped to 2 -> 1; r=-0.1: 2 vs 2; r=0: 3 vs 3; r=0.1: a clamped 3 vs 4.
        assert!((sup_norm_distance(a.view(), b.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((sup_norm_distance(b.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        let c = PathSegment::new(0.05, 0.1, 2, 1, vec![2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            sup_norm_distance(a.view(), c.view()),
            Err(SegmentError::AnchorMisaligned(..))
        ));
    }

    #[test]
    fn vector_valued_points() {
        let a = PathSegment::new(0.0, 0.1, 1, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.view().current(), &[3.0, 4.0]);
        assert_eq!(a.view().lagged(), &[0.0, 0.0]);
        assert_eq!(a.sup_norm(), 5.0);
        assert!((a.view().time_of(0) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            PathSegment::new(0.0, 0.1, 2, 1, vec![1.0]),
            Err(SegmentError::BadLength { .. })
        ));
        assert_eq!(
            PathSegment::new(0.0, 0.1, 0, 1, vec![f64::NAN]),
            Err(SegmentError::NonFinite)
        );
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            c in prop::collection::vec(-10.0f64..10.0, 6),
        ) {
            let (a, b, c) = (seg(&a), seg(&b), seg(&c));
            let ab = sup_norm_distance(a.view(), b.view()).unwrap();
            let ba = sup_norm_distance(b.view(), a.view()).unwrap();
            let bc = sup_norm_distance(b.view(), c.view()).unwrap();
            let ac = sup_norm_distance(a.view(), c.view()).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab == 0.0, a.values() == b.values());
        }
    }
}
