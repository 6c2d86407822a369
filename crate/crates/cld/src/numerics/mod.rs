//! Deterministic dense linear algebra and numerically stable primitives.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{derive_seed, DetRng};

use crate::error::{CldError, Result};

/// Norm below which a vector is treated as degenerate for normalization.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit length, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < DEGENERATE_NORM {
        return Err(CldError::DegenerateNorm {
            context: "l2_normalize".to_string(),
            row: 0,
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// In-place row normalization; `context` names the tensor in errors.
pub fn l2_normalize_rows(m: &mut Matrix, context: &str) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        if n < DEGENERATE_NORM {
            return Err(CldError::DegenerateNorm {
                context: context.to_string(),
                row: i,
            });
        }
        for x in row.iter_mut() {
            *x /= n;
        }
    }
    Ok(())
}

/// Cosine similarity clamped to [-1, 1] against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CldError::DimMismatch {
            context: "cosine_similarity".to_string(),
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Err(CldError::DegenerateNorm {
            context: "cosine_similarity".to_string(),
            row: 0,
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// log(sum_i exp(s_i)) with max-shift; never overflows for finite input.
pub fn log_sum_exp(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(CldError::EmptyInput("log_sum_exp"));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    Ok(m + sum.ln())
}
