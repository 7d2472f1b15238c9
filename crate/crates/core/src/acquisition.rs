//! Acquisition scoring: expected improvement, Monte-Carlo expected inverse
//! cost with memoized stages gated to a fixed epsilon, budget-based cost
//! cooling, and the EEIPU / EIPS / CArBO combinations.

use std::fmt;
use std::str::FromStr;

use libm::erfc;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::PosteriorGaussian;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Acquisition strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Memoization- and cost-aware: EI times cooled expected inverse cost.
    Eeipu,
    /// Plain expected improvement.
    Ei,
    /// EI per unit cost from a single total-cost surrogate.
    Eips,
    /// EIPS with cost cooling.
    Carbo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Eeipu, Method::Ei, Method::Eips, Method::Carbo];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Eeipu => "eeipu",
            Method::Ei => "ei",
            Method::Eips => "eips",
            Method::Carbo => "carbo",
        }
    }

    /// Whether this method draws candidates from cached prefixes.
    pub fn uses_memoization(self) -> bool {
        matches!(self, Method::Eeipu)
    }

    /// Exponent actually applied to the inverse cost given the cooling value.
    pub fn cost_exponent(self, eta: f64) -> f64 {
        match self {
            Method::Eeipu | Method::Carbo => eta,
            Method::Ei => 0.0,
            Method::Eips => 1.0,
        }
    }

    pub fn combine(self, ei: f64, inverse_cost: f64, eta: f64) -> f64 {
        match self {
            Method::Eeipu => eeipu_score(ei, inverse_cost, eta),
            Method::Ei => ei,
            Method::Eips => eips_score(ei, inverse_cost),
            Method::Carbo => carbo_score(ei, inverse_cost, eta),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eeipu" => Ok(Method::Eeipu),
            "ei" => Ok(Method::Ei),
            "eips" => Ok(Method::Eips),
            "carbo" => Ok(Method::Carbo),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Budget bookkeeping in the pipeline's cost currency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetState {
    pub total_budget: f64,
    pub consumed: f64,
    /// Spend already committed when cooling starts (the warmup), so the
    /// first model-guided iteration sees η = 1.
    pub baseline: f64,
}

impl BudgetState {
    pub fn new(total_budget: f64) -> Self {
        BudgetState {
            total_budget,
            consumed: 0.0,
            baseline: 0.0,
        }
    }

    pub fn remaining(&self) -> f64 {
        self.total_budget - self.consumed
    }

    pub fn exhausted(&self) -> bool {
        self.consumed >= self.total_budget
    }

    /// Remaining fraction of the budget left after the baseline, clamped
    /// at zero on overshoot.
    pub fn eta(&self) -> f64 {
        let span = self.total_budget - self.baseline;
        if span <= 0.0 {
            return 0.0;
        }
        (self.remaining() / span).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "factor")]
pub enum EtaSchedule {
    /// eta = remaining / total
    Budget,
    /// eta = 1
    Constant,
    /// eta_t = factor * eta_{t-1}, eta_0 = 1
    ExpDecay(f64),
}

impl EtaSchedule {
    pub const DEFAULT_DECAY: f64 = 0.9;

    pub fn label(&self) -> String {
        match self {
            EtaSchedule::Budget => "budget".into(),
            EtaSchedule::Constant => "constant".into(),
            EtaSchedule::ExpDecay(f) if *f == Self::DEFAULT_DECAY => "exp_decay".into(),
            EtaSchedule::ExpDecay(f) => format!("exp_decay({f})"),
        }
    }
}

impl fmt::Display for EtaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for EtaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "budget" => return Ok(EtaSchedule::Budget),
            "constant" => return Ok(EtaSchedule::Constant),
            "exp_decay" => return Ok(EtaSchedule::ExpDecay(Self::DEFAULT_DECAY)),
            _ => {}
        }
        if let Some(inner) = s
            .strip_prefix("exp_decay(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let f: f64 = inner
                .parse()
                .map_err(|_| Error::Config(format!("bad decay factor in '{s}'")))?;
            if f > 0.0 && f <= 1.0 {
                return Ok(EtaSchedule::ExpDecay(f));
            }
        }
        Err(Error::Config(format!("unknown eta schedule '{s}'")))
    }
}

/// Cooling exponent for the next iteration. `previous` is the value used in
/// the preceding iteration (1.0 before the first one) and only matters for
/// the exponential schedule.
pub fn cooling_eta(budget: &BudgetState, schedule: EtaSchedule, previous: f64) -> f64 {
    match schedule {
        EtaSchedule::Budget => budget.eta(),
        EtaSchedule::Constant => 1.0,
        EtaSchedule::ExpDecay(factor) => factor * previous,
    }
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Closed-form expected improvement for maximization.
pub fn expected_improvement(post: &PosteriorGaussian, f_best: f64) -> f64 {
    let sigma = post.std_dev();
    let gain = post.mean - f_best;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (sigma * (z * norm_cdf(z) + norm_pdf(z))).max(0.0)
}

/// Monte-Carlo cost draws for one candidate. Rows are stages, columns draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    per_stage_samples: Vec<Vec<f64>>,
    delta: usize,
    epsilon: f64,
}

impl CostEstimate {
    /// `unmemoized` holds draws for stages `delta+1..=K` in cost units;
    /// the first `delta` rows are filled with `epsilon`.
    pub fn new(delta: usize, epsilon: f64, unmemoized: Vec<Vec<f64>>) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        let draws = match unmemoized.first() {
            Some(row) => row.len(),
            None if delta > 0 => 1,
            None => return Err(Error::invalid("a cost estimate needs at least one stage")),
        };
        if draws == 0 {
            return Err(Error::invalid("need at least one draw"));
        }
        if unmemoized.iter().any(|r| r.len() != draws) {
            return Err(Error::invalid("ragged cost samples"));
        }
        if unmemoized
            .iter()
            .flatten()
            .any(|c| !(*c > 0.0 && c.is_finite()))
        {
            return Err(Error::invalid("cost draws must be positive and finite"));
        }
        let mut per_stage_samples = vec![vec![epsilon; draws]; delta];
        per_stage_samples.extend(unmemoized);
        Ok(CostEstimate {
            per_stage_samples,
            delta,
            epsilon,
        })
    }

    /// Draws log-normal stage costs from log-cost posteriors for the
    /// unmemoized stages.
    pub fn sample<R: Rng + ?Sized>(
        delta: usize,
        epsilon: f64,
        log_cost_posteriors: &[PosteriorGaussian],
        draws: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = log_cost_posteriors
            .iter()
            .map(|p| {
                crate::gp::sample(p, draws, rng)
                    .into_iter()
                    .map(f64::exp)
                    .collect()
            })
            .collect();
        Self::new(delta, epsilon, rows)
    }

    pub fn stages(&self) -> usize {
        self.per_stage_samples.len()
    }

    pub fn draws(&self) -> usize {
        self.per_stage_samples[0].len()
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn per_stage_samples(&self) -> &[Vec<f64>] {
        &self.per_stage_samples
    }

    /// Total modeled cost of draw `d`.
    pub fn total(&self, d: usize) -> f64 {
        self.per_stage_samples.iter().map(|row| row[d]).sum()
    }
}

/// Sample mean of `1 / total cost` over the draws. The running-mean update
/// keeps a constant cost field exact.
pub fn expected_inverse_cost(est: &CostEstimate) -> Result<f64> {
    let draws = est.draws();
    let mut mean = 0.0;
    for d in 0..draws {
        let total = est.total(d);
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-positive total cost {total}"
            )));
        }
        mean += (1.0 / total - mean) / (d + 1) as f64;
    }
    Ok(mean)
}

/// Shared standard-normal base draws (`draws` rows by `stages` columns).
/// Every candidate in an iteration reuses the same base draws so score
/// differences reflect the candidates rather than Monte-Carlo noise.
#[derive(Debug, Clone)]
pub struct BaseSamples {
    draws: usize,
    stages: usize,
    z: Vec<f64>,
}

impl BaseSamples {
    pub fn new<R: Rng + ?Sized>(draws: usize, stages: usize, rng: &mut R) -> Self {
        let z = (0..draws * stages)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        BaseSamples { draws, stages, z }
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    #[inline]
    pub fn get(&self, draw: usize, stage: usize) -> f64 {
        self.z[draw * self.stages + stage]
    }

    /// Builds the explicit [`CostEstimate`] these base draws induce.
    pub fn cost_estimate(
        &self,
        delta: usize,
        epsilon: f64,
        log_cost_posteriors: &[PosteriorGaussian],
    ) -> Result<CostEstimate> {
        let rows = log_cost_posteriors
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let stage = delta + i;
                let sd = p.std_dev();
                (0..self.draws)
                    .map(|d| (p.mean + sd * self.get(d, stage)).exp())
                    .collect()
            })
            .collect();
        CostEstimate::new(delta, epsilon, rows)
    }

    /// Same value as `expected_inverse_cost(&self.cost_estimate(..))`
    /// without materializing the sample matrix.
    pub fn expected_inverse_cost(
        &self,
        delta: usize,
        epsilon: f64,
        log_cost_posteriors: &[PosteriorGaussian],
    ) -> Result<f64> {
        if delta + log_cost_posteriors.len() > self.stages {
            return Err(Error::invalid("more stages than base samples"));
        }
        let memo = delta as f64 * epsilon;
        let sds: Vec<f64> = log_cost_posteriors.iter().map(|p| p.std_dev()).collect();
        let mut mean = 0.0;
        for d in 0..self.draws {
            let mut total = memo;
            for (i, p) in log_cost_posteriors.iter().enumerate() {
                total += (p.mean + sds[i] * self.get(d, delta + i)).exp();
            }
            if total <= 0.0 || !total.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "non-positive total cost {total}"
                )));
            }
            mean += (1.0 / total - mean) / (d + 1) as f64;
        }
        Ok(mean)
    }
}

/// `ei * inv_cost^eta`, evaluated in log space.
pub fn eeipu_score(ei: f64, inv_cost: f64, eta: f64) -> f64 {
    if ei <= 0.0 {
        return 0.0;
    }
    if eta == 0.0 {
        return ei;
    }
    (ei.ln() + eta * inv_cost.ln()).exp()
}

pub fn eips_score(ei: f64, total_cost_inv: f64) -> f64 {
    ei * total_cost_inv
}

pub fn carbo_score(ei: f64, total_cost_inv: f64, eta: f64) -> f64 {
    eeipu_score(ei, total_cost_inv, eta)
}

/// Per-candidate score breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionScore {
    pub ei: f64,
    pub inverse_cost: f64,
    pub combined: f64,
}
