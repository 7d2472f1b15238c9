use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage-segmented box of continuous hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    stage_dims: Vec<usize>,
    bounds: Vec<(f64, f64)>,
}

impl SearchSpace {
    pub fn new(stage_dims: Vec<usize>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if stage_dims.is_empty() || stage_dims.contains(&0) {
            return Err(Error::invalid(
                "every stage needs at least one hyperparameter",
            ));
        }
        let total: usize = stage_dims.iter().sum();
        if total != bounds.len() {
            return Err(Error::invalid(format!(
                "stage dimensions sum to {total} but {} bounds were given",
                bounds.len()
            )));
        }
        if let Some((lo, hi)) = bounds
            .iter()
            .find(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo >= hi)
        {
            return Err(Error::invalid(format!("invalid bound [{lo}, {hi}]")));
        }
        Ok(SearchSpace { stage_dims, bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn stage_dims(&self) -> &[usize] {
        &self.stage_dims
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Coordinates belonging to stage `k` (0-based).
    pub fn stage_range(&self, k: usize) -> Range<usize> {
        let start: usize = self.stage_dims[..k].iter().sum();
        start..start + self.stage_dims[k]
    }

    /// Number of coordinates covered by the first `delta` stages.
    pub fn prefix_len(&self, delta: usize) -> usize {
        self.stage_dims[..delta].iter().sum()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.bounds)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Min-max maps `x` into the unit cube using the space bounds.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.bounds)
            .map(|(v, (lo, hi))| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    }

    pub fn normalize_stage(&self, x: &[f64], k: usize) -> Vec<f64> {
        let r = self.stage_range(k);
        x[r.clone()]
            .iter()
            .zip(&self.bounds[r])
            .map(|(v, (lo, hi))| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.bounds)
            .map(|(u, (lo, hi))| (lo + u * (hi - lo)).clamp(*lo, *hi))
            .collect()
    }
}
