//! Normalized dynamic time warping over action sequences.
//!
//! The accumulated cost uses the anchored boundary `D(0,0) = d(x_0, y_0)`
//! with edge rows/columns running along their single available direction.
//! The normalized distance divides the final cell by `sqrt(nx^2 + ny^2)`.
//!
//! With per-step distances in `[0,1]` the warping path can contain up to
//! `nx + ny - 1` cells, so the normalized ratio can exceed 1 (up to about
//! `sqrt(2)`). The public distance clamps to `[0,1]` and logs when the clamp
//! fires; the raw ratio stays available for oracle tests.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Per-step distance between two action strings, in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDistance {
    /// 0 if the strings are identical, else 1.
    ExactMatch,
    /// 1 minus Jaccard overlap of whitespace token sets.
    TokenJaccard,
}

impl StepDistance {
    pub fn eval(&self, a: &str, b: &str) -> f64 {
        match self {
            StepDistance::ExactMatch => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            StepDistance::TokenJaccard => {
                let ta: BTreeSet<&str> = a.split_whitespace().collect();
                let tb: BTreeSet<&str> = b.split_whitespace().collect();
                let union = ta.union(&tb).count();
                if union == 0 {
                    return 0.0;
                }
                let inter = ta.intersection(&tb).count();
                1.0 - inter as f64 / union as f64
            }
        }
    }
}

/// Accumulated-cost grid; `values[i][j]` is the minimal cost of aligning
/// `x[..=i]` with `y[..=j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwMatrix {
    pub values: Vec<Vec<f64>>,
}

impl DtwMatrix {
    pub fn final_cost(&self) -> f64 {
        *self
            .values
            .last()
            .and_then(|row| row.last())
            .expect("matrix is non-empty by construction")
    }
}

/// Fills the accumulated-cost matrix for two non-empty action sequences.
pub fn dtw_accumulate<S: AsRef<str>>(x: &[S], y: &[S], d: StepDistance) -> Result<DtwMatrix> {
    if x.is_empty() || y.is_empty() {
        return Err(CoreError::EmptySequence);
    }
    let nx = x.len();
    let ny = y.len();
    let mut values = vec![vec![0.0f64; ny]; nx];
    for i in 0..nx {
        for j in 0..ny {
            let cost = d.eval(x[i].as_ref(), y[j].as_ref());
            values[i][j] = cost
                + match (i, j) {
                    (0, 0) => 0.0,
                    (0, _) => values[0][j - 1],
                    (_, 0) => values[i - 1][0],
                    _ => values[i - 1][j].min(values[i][j - 1]).min(values[i - 1][j - 1]),
                };
        }
    }
    Ok(DtwMatrix { values })
}

/// Final-cell cost divided by `sqrt(nx^2 + ny^2)`, before clamping.
pub fn ndtw_raw<S: AsRef<str>>(x: &[S], y: &[S], d: StepDistance) -> Result<f64> {
    let matrix = dtw_accumulate(x, y, d)?;
    let norm = libm::sqrt((x.len() * x.len() + y.len() * y.len()) as f64);
    Ok(matrix.final_cost() / norm)
}

/// Normalized DTW distance, clamped to `[0,1]`.
pub fn ndtw_distance<S: AsRef<str>>(x: &[S], y: &[S], d: StepDistance) -> Result<f64> {
    let raw = ndtw_raw(x, y, d)?;
    if raw > 1.0 {
        log::warn!("nDTW ratio {raw} exceeds 1; clamping");
        return Ok(1.0);
    }
    Ok(raw.max(0.0))
}

/// Convenience wrapper over owned action lists.
pub fn ndtw_actions(x: &[String], y: &[String], d: StepDistance) -> Result<f64> {
    ndtw_distance(x, y, d)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force enumeration of monotone alignment paths, independent of
    //! the DP recurrence.

    use super::StepDistance;

    /// Minimum total cost over all monotone paths from (0,0) to (nx-1, ny-1)
    /// with moves (+1,0), (0,+1), (+1,+1).
    pub fn min_alignment_cost<S: AsRef<str>>(x: &[S], y: &[S], d: StepDistance) -> f64 {
        fn walk<S: AsRef<str>>(x: &[S], y: &[S], i: usize, j: usize, d: StepDistance) -> f64 {
            let here = d.eval(x[i].as_ref(), y[j].as_ref());
            if i == x.len() - 1 && j == y.len() - 1 {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < x.len() {
                best = best.min(walk(x, y, i + 1, j, d));
            }
            if j + 1 < y.len() {
                best = best.min(walk(x, y, i, j + 1, d));
            }
            if i + 1 < x.len() && j + 1 < y.len() {
                best = best.min(walk(x, y, i + 1, j + 1, d));
            }
            here + best
        }
        walk(x, y, 0, 0, d)
    }
}
