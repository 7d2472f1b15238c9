//! Standard black-box test functions used as synthetic pipeline stages, and
//! the positive cost family attached to each stage.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

/// Benchmark functions, in their usual minimization form unless noted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticFn {
    Branin,
    Hartmann3,
    Beale,
    Ackley3,
    /// Printed without the leading minus, so larger is better.
    Michalewicz2,
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 3]; 4] = [
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
    [3.0, 10.0, 30.0],
    [0.1, 10.0, 35.0],
];
const HARTMANN_P: [[f64; 3]; 4] = [
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
];

impl SyntheticFn {
    pub fn dim(self) -> usize {
        match self {
            SyntheticFn::Branin | SyntheticFn::Beale | SyntheticFn::Michalewicz2 => 2,
            SyntheticFn::Hartmann3 | SyntheticFn::Ackley3 => 3,
        }
    }

    pub fn default_bounds(self) -> Vec<(f64, f64)> {
        match self {
            SyntheticFn::Branin => vec![(-5.0, 10.0), (0.0, 15.0)],
            SyntheticFn::Hartmann3 => vec![(0.0, 1.0); 3],
            SyntheticFn::Beale => vec![(-4.5, 4.5); 2],
            SyntheticFn::Ackley3 => vec![(-32.768, 32.768); 3],
            SyntheticFn::Michalewicz2 => vec![(0.0, PI); 2],
        }
    }

    /// Raw function value as conventionally defined.
    pub fn evaluate(self, x: &[f64]) -> f64 {
        match self {
            SyntheticFn::Branin => branin(x[0], x[1]),
            SyntheticFn::Hartmann3 => hartmann3(x),
            SyntheticFn::Beale => beale(x[0], x[1]),
            SyntheticFn::Ackley3 => ackley(x),
            SyntheticFn::Michalewicz2 => michalewicz(x),
        }
    }

    /// Stage contribution to the maximized pipeline objective.
    pub fn stage_value(self, x: &[f64]) -> f64 {
        match self {
            SyntheticFn::Michalewicz2 => self.evaluate(x),
            _ => -self.evaluate(x),
        }
    }
}

pub fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

pub fn hartmann3(x: &[f64]) -> f64 {
    -(0..4)
        .map(|i| {
            let inner: f64 = (0..3)
                .map(|j| HARTMANN_A[i][j] * (x[j] - HARTMANN_P[i][j]).powi(2))
                .sum();
            HARTMANN_ALPHA[i] * (-inner).exp()
        })
        .sum::<f64>()
}

pub fn beale(x1: f64, x2: f64) -> f64 {
    (1.5 - x1 + x1 * x2).powi(2)
        + (2.25 - x1 + x1 * x2 * x2).powi(2)
        + (2.625 - x1 + x1 * x2.powi(3)).powi(2)
}

pub fn ackley(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let cs = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / n;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cs.exp() + 20.0 + E
}

pub fn michalewicz(x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, v)| v.sin() * ((i as f64 + 1.0) * v * v / PI).sin().powi(20))
        .sum()
}

/// Positive per-stage cost built from cosine, polynomial and logistic
/// terms: `base + cos_amp*cos(s) + poly*mean(z^2) + logistic/(1+exp(-s))`
/// with `s = sum(z)`, floored at `floor`. `z` is the stage input rescaled
/// from its bounds onto `input_range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCost {
    pub base: f64,
    pub cos_amp: f64,
    pub poly: f64,
    pub logistic: f64,
    pub floor: f64,
    pub input_range: (f64, f64),
}

impl Default for SyntheticCost {
    fn default() -> Self {
        SyntheticCost {
            base: 2.0,
            cos_amp: 1.0,
            poly: 0.1,
            logistic: 3.0,
            floor: 0.1,
            input_range: (-2.0, 2.0),
        }
    }
}

impl SyntheticCost {
    pub fn evaluate(&self, x: &[f64], bounds: &[(f64, f64)]) -> f64 {
        let (zlo, zhi) = self.input_range;
        let z: Vec<f64> = x
            .iter()
            .zip(bounds)
            .map(|(v, (lo, hi))| zlo + (v - lo) / (hi - lo) * (zhi - zlo))
            .collect();
        let s: f64 = z.iter().sum();
        let sq = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        let c = self.base
            + self.cos_amp * s.cos()
            + self.poly * sq
            + self.logistic / (1.0 + (-s).exp());
        c.max(self.floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn branin_standard_minimum() {
        assert!((branin(PI, 2.275) - 0.397_887).abs() < 1e-5);
        assert!((branin(-PI, 12.275) - 0.397_887).abs() < 1e-5);
    }

    #[test]
    fn known_optima() {
        assert!(ackley(&[0.0, 0.0, 0.0]).abs() < 1e-12);
        assert!(beale(3.0, 0.5).abs() < 1e-12);
        assert!((hartmann3(&[0.114614, 0.555649, 0.852547]) + 3.86278).abs() < 1e-4);
        assert!((michalewicz(&[2.20, 1.57]) - 1.8013).abs() < 1e-3);
    }

    #[test]
    fn stage_values_are_maximization_form() {
        assert!(SyntheticFn::Branin.stage_value(&[PI, 2.275]) < 0.0);
        assert!(SyntheticFn::Hartmann3.stage_value(&[0.114614, 0.555649, 0.852547]) > 3.86);
        assert!(SyntheticFn::Michalewicz2.stage_value(&[2.20, 1.57]) > 1.8);
    }

    #[test]
    fn costs_positive_on_dense_uniform_sample() {
        let cost = SyntheticCost::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for f in [
            SyntheticFn::Branin,
            SyntheticFn::Hartmann3,
            SyntheticFn::Beale,
            SyntheticFn::Ackley3,
            SyntheticFn::Michalewicz2,
        ] {
            let b = f.default_bounds();
            for _ in 0..10_000 {
                let x: Vec<f64> = b
                    .iter()
                    .map(|(lo, hi)| rng.random_range(*lo..=*hi))
                    .collect();
                let c = cost.evaluate(&x, &b);
                assert!(c > 0.0 && c.is_finite());
            }
        }
    }
}
