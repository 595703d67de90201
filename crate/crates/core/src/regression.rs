//! Least-squares conditional expectations on segment features.
//!
//! Raw variables are the current value and (when the delay is positive) the
//! lagged value of the segment. They are standardised across paths, variables
//! with zero spread are dropped, and monomials up to `degree` are formed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::Segment;

/// Paths per partial Gram block; blocks are summed in index order.
const BLOCK: usize = 1024;
const ZERO_SPREAD: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("design matrix is rank deficient (condition number {condition:.3e} > {limit:.1e})")]
    RankDeficient { condition: f64, limit: f64 },
    #[error("regression needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

/// Feature map on segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasis {
    pub degree: usize,
    pub use_lagged: bool,
}

impl Default for FeatureBasis {
    fn default() -> Self {
        Self {
            degree: 2,
            use_lagged: true,
        }
    }
}

impl FeatureBasis {
    /// Raw (unstandardised) variables of one segment.
    pub fn raw(&self, seg: Segment<'_>, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(seg.current());
        if self.use_lagged && seg.lag_steps() > 0 {
            out.extend_from_slice(seg.lagged());
        }
    }
}

/// Exponent tuples of all monomials in `vars` variables up to total degree `degree`,
/// constant first.
fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut last: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &last {
            let start = m.last().copied().unwrap_or(0);
            for v in start..vars {
                let mut e = m.clone();
                e.push(v);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        last = next;
    }
    out
}

/// A fitted design: standardisation, kept variables and monomial layout.
#[derive(Debug, Clone)]
pub struct Design {
    mean: Vec<f64>,
    scale: Vec<f64>,
    kept: Vec<usize>,
    terms: Vec<Vec<usize>>,
    /// `[sample x term]` row-major.
    rows: Vec<f64>,
    n: usize,
    pub condition: f64,
    solver: DMatrix<f64>,
}

impl Design {
    /// Builds the design on `raw` (`[sample x var]` row-major) and factors it.
    pub fn fit(raw: &[f64], n_vars: usize, degree: usize, limit: f64) -> Result<Self, RegressionError> {
        let n = if n_vars == 0 { 0 } else { raw.len() / n_vars };
        let mut mean = vec![0.0; n_vars];
        let mut scale = vec![0.0; n_vars];
        for v in 0..n_vars {
            let m = (0..n).map(|i| raw[i * n_vars + v]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (raw[i * n_vars + v] - m).powi(2)).sum::<f64>() / n as f64;
            mean[v] = m;
            scale[v] = var.sqrt();
        }
        let kept: Vec<usize> = (0..n_vars)
            .filter(|&v| scale[v] > ZERO_SPREAD * (1.0 + mean[v].abs()))
            .collect();
        let terms = monomials(kept.len(), degree);
        let p = terms.len();
        if n < p {
            return Err(RegressionError::TooFewSamples { needed: p, got: n });
        }
        let mut rows = vec![0.0; n * p];
        rows.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
            let z: Vec<f64> = kept
                .iter()
                .map(|&v| (raw[i * n_vars + v] - mean[v]) / scale[v])
                .collect();
            for (r, t) in row.iter_mut().zip(&terms) {
                *r = t.iter().map(|&k| z[k]).product();
            }
        });
        let gram = gram(&rows, n, p);
        let eig = SymmetricEigen::new(gram);
        let lmax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if lmin > 0.0 { (lmax / lmin).sqrt() } else { f64::INFINITY };
        if !(condition <= limit) {
            return Err(RegressionError::RankDeficient { condition, limit });
        }
        // (X^T X)^{-1} from the eigendecomposition
        let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        let solver = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
        Ok(Self {
            mean,
            scale,
            kept,
            terms,
            rows,
            n,
            condition,
            solver,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn kept_variables(&self) -> &[usize] {
        &self.kept
    }

    pub fn standardisation(&self) -> (&[f64], &[f64]) {
        (&self.mean, &self.scale)
    }

    /// Least-squares coefficients for `target` (one value per sample).
    pub fn coefficients(&self, target: &[f64]) -> Vec<f64> {
        let p = self.terms.len();
        let xty = blocked_sum(self.n, p, |i, acc| {
            let row = &self.rows[i * p..(i + 1) * p];
            for (a, r) in acc.iter_mut().zip(row) {
                *a += r * target[i];
            }
        });
        (&self.solver * DVector::from_vec(xty)).iter().copied().collect()
    }

    /// Fitted values `X beta` for `target`.
    pub fn project(&self, target: &[f64]) -> Vec<f64> {
        let beta = self.coefficients(target);
        let p = beta.len();
        self.rows
            .par_chunks(p)
            .map(|row| row.iter().zip(&beta).map(|(r, b)| r * b).sum())
            .collect()
    }
}

fn blocked_sum(n: usize, width: usize, add: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let blocks: Vec<Vec<f64>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; width];
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                add(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for b in blocks {
        for (t, x) in total.iter_mut().zip(b) {
            *t += x;
        }
    }
    total
}

fn gram(rows: &[f64], n: usize, p: usize) -> DMatrix<f64> {
    let flat = blocked_sum(n, p * p, |i, acc| {
        let row = &rows[i * p..(i + 1) * p];
        for a in 0..p {
            for b in a..p {
                acc[a * p + b] += row[a] * row[b];
            }
        }
    });
    DMatrix::from_fn(p, p, |a, b| if a <= b { flat[a * p + b] } else { flat[b * p + a] })
}
