//! Deviance regularization of weight magnitudes toward their row/column
//! independence expectation.
//!
//! For a matrix `W`, the expected magnitude of entry `(i, j)` is
//! `row_sum_i * col_sum_j / total` computed over `|W|`. The deviance measures
//! how far `|W|` sits from that rank-1 expectation, so minimizing it pushes
//! large magnitudes to concentrate in a few shared rows and columns.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SpurError};
use crate::graph::{ExprGraph, NodeId};
use crate::matrix::Matrix;

/// Guard added under the square root of standardized deviances.
pub const STANDARDIZE_EPS: f64 = 1e-12;

/// Penalty shape applied to the deviation `|W| - E(|W|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DevianceVariant {
    /// Squared standardized deviation (Pearson chi-square per cell).
    Spur,
    /// Absolute standardized deviation.
    L1s,
    /// Absolute raw deviation.
    L1,
    /// Squared raw deviation.
    L2,
}

impl DevianceVariant {
    pub const ALL: [DevianceVariant; 4] = [Self::Spur, Self::L1s, Self::L1, Self::L2];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Spur => "spur",
            Self::L1s => "l1s",
            Self::L1 => "l1",
            Self::L2 => "l2",
        }
    }

    fn standardized(self) -> bool {
        matches!(self, Self::Spur | Self::L1s)
    }

    fn squared(self) -> bool {
        matches!(self, Self::Spur | Self::L2)
    }
}

impl fmt::Display for DevianceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DevianceVariant {
    type Err = SpurError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spur" => Ok(Self::Spur),
            "l1s" => Ok(Self::L1s),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(SpurError::Config(format!("unknown deviance variant `{other}`"))),
        }
    }
}

/// Expected magnitude under row/column independence of `|w|`.
///
/// Returns the zero matrix when `w` is entirely zero.
pub fn expected_magnitude(w: &Matrix) -> Matrix {
    let a = w.abs();
    let total = a.sum();
    if total == 0.0 {
        return Matrix::zeros(w.rows(), w.cols());
    }
    let rows = a.row_sums();
    let cols = a.col_sums();
    Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        rows.data()[i] * cols.data()[j] / total
    })
}

/// Deviance of `w` from its expected magnitude, averaged over the `r*c` entries.
pub fn deviance(w: &Matrix, variant: DevianceVariant) -> f64 {
    let a = w.abs();
    let e = expected_magnitude(w);
    let mut acc = 0.0;
    for (&x, &ex) in a.data().iter().zip(e.data()) {
        let mut d = x - ex;
        if variant.standardized() {
            d /= (ex + STANDARDIZE_EPS).sqrt();
        }
        acc += if variant.squared() { d * d } else { d.abs() };
    }
    acc / w.len() as f64
}

/// Mean deviance over a non-empty set of target matrices.
pub fn regularization_loss<'a, I>(targets: I, variant: DevianceVariant) -> Result<f64>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for w in targets {
        total += deviance(w, variant);
        count += 1;
    }
    if count == 0 {
        return Err(SpurError::Config(
            "regularization needs at least one target matrix".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Components of the combined training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_r: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(l_ce: f64, lambda: f64, l_r: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_ce", l_ce), ("lambda", lambda), ("l_r", l_r)] {
        if !(v >= 0.0) {
            return Err(SpurError::Contract(format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(LossBreakdown {
        l_ce,
        l_r,
        lambda,
        total: l_ce + lambda * l_r,
    })
}

/// Cubic ramp of the regularization strength from 0 up to `lambda_final`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub lambda_final: f64,
    pub t_i: usize,
    pub ramp_steps: usize,
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_final >= 0.0) || !self.lambda_final.is_finite() {
            return Err(SpurError::Config(format!(
                "lambda_final must be finite and non-negative, got {}",
                self.lambda_final
            )));
        }
        if self.ramp_steps == 0 {
            return Err(SpurError::Config("lambda ramp_steps must be positive".into()));
        }
        Ok(())
    }
}

pub fn lambda_at(t: usize, s: &LambdaSchedule) -> f64 {
    if t <= s.t_i {
        return 0.0;
    }
    let p = ((t - s.t_i) as f64 / s.ramp_steps.max(1) as f64).min(1.0);
    let rest = 1.0 - p;
    s.lambda_final * (1.0 - rest * rest * rest)
}

/// Graph form of the expected magnitude; differentiable through `|w|`.
pub fn expected_magnitude_node(g: &mut ExprGraph, w: NodeId) -> Result<NodeId> {
    let a = g.abs(w);
    expected_from_abs(g, a)
}

fn expected_from_abs(g: &mut ExprGraph, a: NodeId) -> Result<NodeId> {
    let rows = g.sum_rows(a);
    let cols = g.sum_cols(a);
    let total = g.sum(a);
    let outer = g.matmul(rows, cols)?;
    g.div_scalar(outer, total)
}

/// Graph form of [`deviance`]. The expectation is differentiated through, not detached.
pub fn deviance_node(g: &mut ExprGraph, w: NodeId, variant: DevianceVariant) -> Result<NodeId> {
    let a = g.abs(w);
    let e = expected_from_abs(g, a)?;
    let mut d = g.sub(a, e)?;
    if variant.standardized() {
        let shifted = g.add_const(e, STANDARDIZE_EPS);
        let den = g.sqrt(shifted);
        d = g.div(d, den)?;
    }
    let pen = if variant.squared() { g.square(d) } else { g.abs(d) };
    Ok(g.mean(pen))
}

/// Graph form of [`regularization_loss`].
pub fn regularization_loss_node(
    g: &mut ExprGraph,
    targets: &[NodeId],
    variant: DevianceVariant,
) -> Result<NodeId> {
    if targets.is_empty() {
        return Err(SpurError::Config(
            "regularization needs at least one target matrix".into(),
        ));
    }
    let mut acc: Option<NodeId> = None;
    for &t in targets {
        let d = deviance_node(g, t, variant)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, d)?,
            None => d,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / targets.len() as f64))
}
