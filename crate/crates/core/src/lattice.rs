//! Finite families of piecewise-constant controls.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("control lattice has no values")]
    Empty,
    #[error("switch steps must start at 0 and increase strictly, got {0:?}")]
    BadSwitches(Vec<usize>),
    #[error("control value {value:?} has dimension {got}, expected {expected}")]
    DimMismatch {
        value: Vec<f64>,
        expected: usize,
        got: usize,
    },
    #[error("control value {0:?} lies outside the declared bounds")]
    OutOfBounds(Vec<f64>),
    #[error("lattice enumerates {count} controls, over the budget of {budget}")]
    OverBudget { count: u128, budget: usize },
    #[error("control index {0} is out of range")]
    BadIndex(usize),
}

/// A control that is constant between consecutive switch steps.
///
/// Step indices count forward steps from the start of the problem it is used in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseControl {
    switch_steps: Vec<usize>,
    values: Vec<Vec<f64>>,
}

impl PiecewiseControl {
    pub fn constant(value: Vec<f64>) -> Self {
        Self {
            switch_steps: vec![0],
            values: vec![value],
        }
    }

    pub fn new(switch_steps: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self, LatticeError> {
        check_switches(&switch_steps)?;
        if values.len() != switch_steps.len() {
            return Err(LatticeError::BadSwitches(switch_steps));
        }
        Ok(Self {
            switch_steps,
            values,
        })
    }

    /// Control value used on forward step `step`.
    pub fn at(&self, step: usize) -> &[f64] {
        let i = self.switch_steps.partition_point(|&s| s <= step) - 1;
        &self.values[i]
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn switch_steps(&self) -> &[usize] {
        &self.switch_steps
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// The control seen from forward step `offset` on.
    pub fn shifted(&self, offset: usize) -> Self {
        let mut switch_steps = vec![0];
        let mut values = vec![self.at(offset).to_vec()];
        for (s, v) in self.switch_steps.iter().zip(&self.values) {
            if *s > offset {
                switch_steps.push(s - offset);
                values.push(v.clone());
            }
        }
        Self {
            switch_steps,
            values,
        }
    }
}

fn check_switches(switch_steps: &[usize]) -> Result<(), LatticeError> {
    if switch_steps.first() != Some(&0) || switch_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LatticeError::BadSwitches(switch_steps.to_vec()));
    }
    Ok(())
}

/// Values in a finite subset of the compact control set, switchable at fixed steps.
///
/// Control `k` is decoded in mixed radix with the first interval as the most
/// significant digit, so index order is lexicographic in the interval choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLattice {
    values: Vec<Vec<f64>>,
    switch_steps: Vec<usize>,
    bounds: Vec<(f64, f64)>,
}

impl ControlLattice {
    pub fn new(
        values: Vec<Vec<f64>>,
        switch_steps: Vec<usize>,
        bounds: Vec<(f64, f64)>,
    ) -> Result<Self, LatticeError> {
        if values.is_empty() {
            return Err(LatticeError::Empty);
        }
        check_switches(&switch_steps)?;
        let m = bounds.len();
        for v in &values {
            if v.len() != m {
                return Err(LatticeError::DimMismatch {
                    value: v.clone(),
                    expected: m,
                    got: v.len(),
                });
            }
            if v.iter().zip(&bounds).any(|(x, (lo, hi))| !(x >= lo && x <= hi)) {
                return Err(LatticeError::OutOfBounds(v.clone()));
            }
        }
        Ok(Self {
            values,
            switch_steps,
            bounds,
        })
    }

    /// Lattice whose bounding box is the hull of its values.
    pub fn from_values(values: Vec<Vec<f64>>, switch_steps: Vec<usize>) -> Result<Self, LatticeError> {
        let m = values.first().map(Vec::len).ok_or(LatticeError::Empty)?;
        let bounds = (0..m)
            .map(|j| {
                values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let x = v.get(j).copied().unwrap_or(f64::NAN);
                    (lo.min(x), hi.max(x))
                })
            })
            .collect();
        Self::new(values, switch_steps, bounds)
    }

    /// Scalar values held constant over the whole horizon.
    pub fn scalar(values: &[f64]) -> Result<Self, LatticeError> {
        Self::from_values(values.iter().map(|v| vec![*v]).collect(), vec![0])
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn switch_steps(&self) -> &[usize] {
        &self.switch_steps
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn control_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.switch_steps.len()
    }

    /// `|values| ^ |switch_steps|`, saturating.
    pub fn count(&self) -> u128 {
        (self.values.len() as u128)
            .checked_pow(self.switch_steps.len() as u32)
            .unwrap_or(u128::MAX)
    }

    /// Rejects the lattice up front if it enumerates more than `budget` controls.
    pub fn check_budget(&self, budget: usize) -> Result<usize, LatticeError> {
        let count = self.count();
        if count > budget as u128 {
            return Err(LatticeError::OverBudget { count, budget });
        }
        Ok(count as usize)
    }

    /// Per-interval value indices of control `index`.
    pub fn digits(&self, index: usize) -> Result<Vec<usize>, LatticeError> {
        if index as u128 >= self.count() {
            return Err(LatticeError::BadIndex(index));
        }
        let base = self.values.len();
        let mut digits = vec![0; self.switch_steps.len()];
        let mut rest = index;
        for d in digits.iter_mut().rev() {
            *d = rest % base;
            rest /= base;
        }
        Ok(digits)
    }

    pub fn control(&self, index: usize) -> Result<PiecewiseControl, LatticeError> {
        let digits = self.digits(index)?;
        Ok(PiecewiseControl {
            switch_steps: self.switch_steps.clone(),
            values: digits.iter().map(|&d| self.values[d].clone()).collect(),
        })
    }

    pub fn enumerate(&self, budget: usize) -> Result<Vec<PiecewiseControl>, LatticeError> {
        let count = self.check_budget(budget)?;
        (0..count).map(|i| self.control(i)).collect()
    }

    /// Same lattice with an extra switch at `step` (no-op if already present).
    pub fn with_switch(&self, step: usize) -> Self {
        let mut out = self.clone();
        if let Err(pos) = out.switch_steps.binary_search(&step) {
            out.switch_steps.insert(pos, step);
        }
        out
    }

    /// Splits at `step` into the lattice on `[0, step)` and the one on `[step, ..)`,
    /// the latter re-indexed from 0. `step` must be a switch step.
    pub fn split_at(&self, step: usize) -> Option<(Self, Self)> {
        let pos = self.switch_steps.binary_search(&step).ok()?;
        let first = Self {
            switch_steps: self.switch_steps[..pos.max(1)].to_vec(),
            ..self.clone()
        };
        let second = Self {
            switch_steps: self.switch_steps[pos..].iter().map(|s| s - step).collect(),
            ..self.clone()
        };
        Some((first, second))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_lookup() {
        let c = PiecewiseControl::new(vec![0, 3, 5], vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(c.at(0), &[1.0]);
        assert_eq!(c.at(2), &[1.0]);
        assert_eq!(c.at(3), &[2.0]);
        assert_eq!(c.at(100), &[3.0]);
        let s = c.shifted(4);
        assert_eq!(s.switch_steps(), &[0, 1]);
        assert_eq!(s.at(0), &[2.0]);
        assert_eq!(s.at(1), &[3.0]);
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let l = ControlLattice::from_values(vec![vec![0.0], vec![1.0]], vec![0, 5]).unwrap();
        assert_eq!(l.count(), 4);
        let all = l.enumerate(10).unwrap();
        let firsts: Vec<(f64, f64)> = all.iter().map(|c| (c.at(0)[0], c.at(5)[0])).collect();
        assert_eq!(firsts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(
            l.enumerate(3),
            Err(LatticeError::OverBudget { count: 4, budget: 3 })
        ));
    }

    #[test]
    fn validation() {
        assert_eq!(ControlLattice::from_values(vec![], vec![0]), Err(LatticeError::Empty));
        assert!(matches!(
            ControlLattice::new(vec![vec![2.0]], vec![0], vec![(0.0, 1.0)]),
            Err(LatticeError::OutOfBounds(_))
        ));
        assert!(matches!(
            ControlLattice::scalar(&[0.0]).unwrap().with_switch(0).split_at(1),
            None
        ));
        assert!(matches!(
            ControlLattice::from_values(vec![vec![0.0]], vec![1]),
            Err(LatticeError::BadSwitches(_))
        ));
    }

    #[test]
    fn split_round_trip() {
        let l = ControlLattice::scalar(&[0.0, 1.0]).unwrap().with_switch(4);
        let (a, b) = l.split_at(4).unwrap();
        assert_eq!(a.switch_steps(), &[0]);
        assert_eq!(b.switch_steps(), &[0]);
        assert_eq!(a.count() * b.count(), l.count());
    }
}
