use serde::{Deserialize, Serialize};

use super::transform::{ScatteringPath, ScatteringVector};
use crate::dsp;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Corpus-level medians for the adaptive log compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub medians: Vec<f64>,
    pub epsilon: f64,
    pub paths: Vec<ScatteringPath>,
}

impl CompressionStats {
    /// Median used for path `i`: zero medians fall back to the smallest positive one.
    fn effective_medians(&self) -> Vec<Option<f64>> {
        let floor = self
            .medians
            .iter()
            .copied()
            .filter(|m| *m > 0.0)
            .fold(f64::INFINITY, f64::min);
        self.medians
            .iter()
            .map(|&m| {
                if m > 0.0 {
                    Some(m)
                } else if floor.is_finite() {
                    Some(floor)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Per-path median across a training collection.
pub fn fit_compression(vectors: &[ScatteringVector], epsilon: f64) -> Result<CompressionStats> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::EmptyInput("no vectors to fit compression on".into()))?;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.paths != first.paths {
            return Err(Error::PathMismatch(format!(
                "vector {i} has a different path list"
            )));
        }
    }
    let d = first.paths.len();
    let mut column = vec![0.0; vectors.len()];
    let medians = (0..d)
        .map(|p| {
            for (slot, v) in column.iter_mut().zip(vectors) {
                *slot = v.values[p];
            }
            dsp::median(&mut column)
        })
        .collect();
    Ok(CompressionStats {
        medians,
        epsilon,
        paths: first.paths.clone(),
    })
}

/// `log(1 + v / (epsilon * median))` elementwise.
pub fn log_compress(v: &ScatteringVector, stats: &CompressionStats) -> Result<ScatteringVector> {
    if v.paths != stats.paths {
        return Err(Error::PathMismatch(
            "vector and compression stats disagree on paths".into(),
        ));
    }
    let values = v
        .values
        .iter()
        .zip(stats.effective_medians())
        .map(|(&x, mu)| match mu {
            Some(mu) => (x / (stats.epsilon * mu)).ln_1p(),
            None => 0.0,
        })
        .collect();
    Ok(ScatteringVector {
        values,
        paths: v.paths.clone(),
        averaging_scale: v.averaging_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(values: &[f64]) -> ScatteringVector {
        ScatteringVector {
            values: values.to_vec(),
            paths: (0..values.len())
                .map(|i| ScatteringPath {
                    order: 1,
                    lambda1: 100.0 * (i + 1) as f64,
                    lambda2: None,
                })
                .collect(),
            averaging_scale: 1.0,
        }
    }

    #[test]
    fn median_of_one_and_three() {
        let single = fit_compression(&[vector(&[3.0, 0.5])], DEFAULT_EPSILON).unwrap();
        assert_eq!(single.medians, vec![3.0, 0.5]);
        let three = fit_compression(
            &[vector(&[1.0]), vector(&[9.0]), vector(&[2.0])],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert_eq!(three.medians, vec![2.0]);
    }

    #[test]
    fn analytic_values() {
        let stats = fit_compression(&[vector(&[2.0, 4.0])], DEFAULT_EPSILON).unwrap();
        let out = log_compress(&vector(&[0.0, 4.0 * DEFAULT_EPSILON]), &stats).unwrap();
        assert_eq!(out.values[0], 0.0);
        assert!((out.values[1] / std::f64::consts::LN_2 - 1.0).abs() < 1e-12);
        let out = log_compress(&vector(&[2.0, 4.0]), &stats).unwrap();
        assert!((out.values[0] / 1001f64.ln() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_median_guard() {
        let zeros = fit_compression(&[vector(&[0.0, 0.0])], DEFAULT_EPSILON).unwrap();
        assert_eq!(zeros.medians, vec![0.0, 0.0]);
        let out = log_compress(&vector(&[5.0, 0.0]), &zeros).unwrap();
        assert_eq!(out.values, vec![0.0, 0.0]);

        let partial = fit_compression(&[vector(&[0.0, 0.5])], DEFAULT_EPSILON).unwrap();
        let out = log_compress(&vector(&[0.5, 0.5]), &partial).unwrap();
        assert_eq!(out.values[0], out.values[1]);
        assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_paths() {
        assert!(fit_compression(&[vector(&[1.0]), vector(&[1.0, 2.0])], 1e-3).is_err());
        assert!(fit_compression(&[], 1e-3).is_err());
        let stats = fit_compression(&[vector(&[1.0])], 1e-3).unwrap();
        assert!(log_compress(&vector(&[1.0, 2.0]), &stats).is_err());
    }
}
