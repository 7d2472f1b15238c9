//! The budget-constrained optimization loop: seeded warmup, surrogate
//! fitting, prefix-aware candidate generation, scoring, execution and
//! budget/cache bookkeeping.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    cooling_eta, expected_improvement, AcquisitionScore, BaseSamples, BudgetState, EtaSchedule,
    Method,
};
use crate::candidates::{self, Candidate};
use crate::error::{Error, Result};
use crate::gp::{
    ConstantSurrogate, FitOptions, GpModel, KernelParams, PosteriorGaussian, Surrogate,
    TargetTransform,
};
use crate::memo::{OutputStore, PrefixPolicy, PrefixPool};
use crate::pipeline::{self, Observation, PipelineSpec};
use crate::space::SearchSpace;
use crate::trace::{RunTrace, TraceRecord};

/// Auto budget = this multiple of the warmup consumption.
pub const AUTO_BUDGET_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Budget {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// N0
    pub warmup: usize,
    /// M
    pub raw_samples: usize,
    /// D
    pub mc_samples: usize,
    /// r: independent re-draws of the non-prefix coordinates per iteration.
    pub restarts: usize,
    /// Q
    pub cache_size: usize,
    pub epsilon: f64,
    pub eta_schedule: EtaSchedule,
    pub prefix_policy: PrefixPolicy,
    pub budget: Budget,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Eeipu,
            warmup: 10,
            raw_samples: 512,
            mc_samples: 1000,
            restarts: 10,
            cache_size: crate::memo::DEFAULT_CAPACITY,
            epsilon: 0.01,
            eta_schedule: EtaSchedule::Budget,
            prefix_policy: PrefixPolicy::All,
            budget: Budget::Auto,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 2 {
            return Err(Error::Config("warmup needs at least 2 points".into()));
        }
        if self.raw_samples == 0 || self.mc_samples == 0 || self.restarts == 0 {
            return Err(Error::Config(
                "raw samples, MC samples and restarts must be >= 1".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if let Budget::Fixed(b) = self.budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config("budget must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Fitted surrogates for one iteration.
#[derive(Clone)]
pub struct Surrogates {
    pub objective: Arc<dyn Surrogate>,
    pub costs: CostSurrogates,
}

#[derive(Clone)]
pub enum CostSurrogates {
    /// Plain EI needs no cost model.
    None,
    /// One log-cost model per stage, fed the stage's own coordinates.
    PerStage(Vec<Arc<dyn Surrogate>>),
    /// One log-cost model of the whole pipeline on the full configuration.
    Total(Arc<dyn Surrogate>),
}

/// Scores one candidate. Memoized stages contribute `epsilon` to every
/// cost draw; the rest are log-normal draws built from `base`.
#[allow(clippy::too_many_arguments)]
pub fn score_candidate(
    method: Method,
    surrogates: &Surrogates,
    space: &SearchSpace,
    candidate: &Candidate,
    f_best: f64,
    eta: f64,
    epsilon: f64,
    base: &BaseSamples,
) -> Result<AcquisitionScore> {
    let post = surrogates
        .objective
        .predict(&space.normalize(&candidate.x))?;
    let ei = expected_improvement(&post, f_best);
    let inverse_cost = match (&surrogates.costs, method) {
        (_, Method::Ei) | (CostSurrogates::None, _) => 1.0,
        (CostSurrogates::PerStage(models), _) => {
            let delta = if method.uses_memoization() {
                candidate.delta
            } else {
                0
            };
            let posts = (delta..space.stages())
                .map(|k| models[k].predict(&space.normalize_stage(&candidate.x, k)))
                .collect::<Result<Vec<PosteriorGaussian>>>()?;
            base.expected_inverse_cost(delta, epsilon, &posts)?
        }
        (CostSurrogates::Total(model), _) => {
            let p = model.predict(&space.normalize(&candidate.x))?;
            base.expected_inverse_cost(0, epsilon, &[p])?
        }
    };
    Ok(AcquisitionScore {
        ei,
        inverse_cost,
        combined: method.combine(ei, inverse_cost, eta),
    })
}

/// Scores every candidate and returns the index of the best one. Ties go
/// to the earliest candidate.
#[allow(clippy::too_many_arguments)]
pub fn select(
    method: Method,
    surrogates: &Surrogates,
    space: &SearchSpace,
    candidates: &[Candidate],
    f_best: f64,
    eta: f64,
    epsilon: f64,
    base: &BaseSamples,
) -> Result<(usize, AcquisitionScore)> {
    let mut best: Option<(usize, AcquisitionScore)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = score_candidate(method, surrogates, space, c, f_best, eta, epsilon, base)?;
        if best.is_none_or(|(_, b)| s.combined > b.combined) {
            best = Some((i, s));
        }
    }
    best.ok_or_else(|| Error::invalid("no candidates to score"))
}

/// Low-discrepancy warmup design: a Halton sequence with a seeded random
/// shift, mapped into the space bounds.
pub fn warmup_points(space: &SearchSpace, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_3A2B);
    let bases = first_primes(space.dim());
    let shift: Vec<f64> = (0..space.dim()).map(|_| rng.random()).collect();
    (1..=n as u64)
        .map(|i| {
            let u: Vec<f64> = bases
                .iter()
                .zip(&shift)
                .map(|(b, s)| (radical_inverse(i, *b) + s).fract())
                .collect();
            space.denormalize(&u)
        })
        .collect()
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes
            .iter()
            .take_while(|p| *p * *p <= c)
            .all(|p| !c.is_multiple_of(*p))
        {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// What a single optimization step did.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub candidate: Candidate,
    pub score: AcquisitionScore,
    pub observation: Observation,
}

/// Mutable state of one optimization run.
pub struct Optimizer<'a> {
    config: RunConfig,
    spec: &'a PipelineSpec,
    space: SearchSpace,
    pool: PrefixPool,
    store: OutputStore,
    observations: Vec<Observation>,
    budget: BudgetState,
    eta: f64,
    surrogates: Option<Surrogates>,
    objective_params: Option<KernelParams>,
    cost_params: Vec<Option<KernelParams>>,
    trace: RunTrace,
}

impl<'a> Optimizer<'a> {
    pub fn new(config: RunConfig, spec: &'a PipelineSpec, cache_dir: &Path) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let space = spec.space()?;
        let capacity = if config.method.uses_memoization() {
            config.cache_size
        } else {
            0
        };
        let pool = PrefixPool::new(capacity, space.stage_dims().to_vec());
        let store = OutputStore::open(cache_dir)?;
        let k = space.stages();
        Ok(Optimizer {
            config,
            spec,
            space,
            pool,
            store,
            observations: Vec::new(),
            budget: BudgetState::new(f64::INFINITY),
            eta: 1.0,
            surrogates: None,
            objective_params: None,
            cost_params: vec![None; k],
            trace: RunTrace::default(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn pool(&self) -> &PrefixPool {
        &self.pool
    }

    pub fn store(&self) -> &OutputStore {
        &self.store
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn budget(&self) -> BudgetState {
        self.budget
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn into_trace(self) -> RunTrace {
        self.trace
    }

    fn best_y(&self) -> f64 {
        self.observations
            .iter()
            .map(|o| o.y)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn record(
        &mut self,
        obs: &Observation,
        outputs: &[crate::memo::OutputHandle],
        eta: f64,
        score: f64,
    ) -> Result<()> {
        self.budget.consumed += obs.executed_cost();
        self.observations.push(obs.clone());
        if self
            .pool
            .update(&obs.x, obs.y, outputs, self.config.prefix_policy)?
        {
            for h in outputs {
                self.store.annotate(h, obs.y);
            }
        }
        self.store.flush_index()?;
        let best_y = self.best_y();
        self.trace.push(TraceRecord {
            iter: self.observations.len(),
            delta: obs.memo_delta,
            eta,
            consumed: self.budget.consumed,
            y: obs.y,
            best_y,
            score,
            stage_costs: obs.stage_costs.clone(),
            x: obs.x.clone(),
        });
        Ok(())
    }

    /// Evaluates the seeded warmup design and resolves the budget.
    pub fn warmup(&mut self) -> Result<Vec<Observation>> {
        let points = warmup_points(&self.space, self.config.warmup, self.config.seed);
        let mut out = Vec::with_capacity(points.len());
        for x in points {
            let ev = pipeline::run(self.spec, &x, &self.pool, &mut self.store)?;
            self.record(&ev.observation, &ev.outputs, 1.0, f64::NAN)?;
            out.push(ev.observation);
        }
        self.budget.total_budget = match self.config.budget {
            Budget::Auto => AUTO_BUDGET_FACTOR * self.budget.consumed,
            Budget::Fixed(b) => b,
        };
        self.budget.baseline = self.budget.consumed;
        Ok(out)
    }

    fn fit_surrogates(&mut self, iteration: u64) -> Result<Surrogates> {
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(iteration);
        let xs: Vec<Vec<f64>> = self
            .observations
            .iter()
            .map(|o| self.space.normalize(&o.x))
            .collect();
        let ys: Vec<f64> = self.observations.iter().map(|o| o.y).collect();
        let mut opts = FitOptions::new(seed, TargetTransform::Standardize);
        opts.initial = self.objective_params.clone();
        let objective = GpModel::fit(&xs, &ys, &opts)?;
        self.objective_params = Some(objective.params().clone());

        let costs = match self.config.method {
            Method::Ei => CostSurrogates::None,
            Method::Eips | Method::Carbo => {
                let totals: Vec<f64> = self
                    .observations
                    .iter()
                    .map(|o| o.executed_cost())
                    .collect();
                let mut opts = FitOptions::new(seed ^ 0xC057, TargetTransform::LogStandardize);
                opts.initial = self.cost_params[0].clone();
                let m = GpModel::fit(&xs, &totals, &opts)?;
                self.cost_params[0] = Some(m.params().clone());
                CostSurrogates::Total(Arc::new(m))
            }
            Method::Eeipu => {
                let mut models: Vec<Arc<dyn Surrogate>> = Vec::with_capacity(self.space.stages());
                for k in 0..self.space.stages() {
                    // Memoized stages did not run, so they are not training data.
                    let (sx, sc): (Vec<Vec<f64>>, Vec<f64>) = self
                        .observations
                        .iter()
                        .filter(|o| o.stage_executed(k))
                        .map(|o| (self.space.normalize_stage(&o.x, k), o.stage_costs[k]))
                        .unzip();
                    let model: Arc<dyn Surrogate> = match sc.len() {
                        0 => return Err(Error::InsufficientData { needed: 1, got: 0 }),
                        1 => Arc::new(ConstantSurrogate {
                            dim: self.space.stage_dims()[k],
                            posterior: PosteriorGaussian {
                                mean: sc[0].ln(),
                                variance: 0.0,
                            },
                        }),
                        _ => {
                            let mut opts = FitOptions::new(
                                seed ^ (k as u64 + 1) << 20,
                                TargetTransform::LogStandardize,
                            );
                            opts.initial = self.cost_params[k].clone();
                            let m = GpModel::fit(&sx, &sc, &opts)?;
                            self.cost_params[k] = Some(m.params().clone());
                            Arc::new(m)
                        }
                    };
                    models.push(model);
                }
                CostSurrogates::PerStage(models)
            }
        };
        Ok(Surrogates {
            objective: Arc::new(objective),
            costs,
        })
    }

    /// One model-guided iteration.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.observations.len() < self.config.warmup {
            return Err(Error::invalid("step called before warmup"));
        }
        let iteration = self.observations.len() as u64;
        let eta = cooling_eta(&self.budget, self.config.eta_schedule, self.eta);
        self.eta = eta;

        match self.fit_surrogates(iteration) {
            Ok(s) => self.surrogates = Some(s),
            Err(e) => {
                if self.surrogates.is_none() {
                    return Err(e);
                }
                log::warn!(
                    "surrogate fit failed at iteration {iteration} ({e}); reusing previous models"
                );
            }
        }
        let surrogates = self.surrogates.clone().expect("fitted above");

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration);
        let cost_dims = match surrogates.costs {
            CostSurrogates::PerStage(_) => self.space.stages(),
            _ => 1,
        };
        let base = BaseSamples::new(self.config.mc_samples, cost_dims, &mut rng);
        let f_best = self.best_y();

        let mut best: Option<(Candidate, AcquisitionScore)> = None;
        let mut last_batch = Vec::new();
        for _ in 0..self.config.restarts {
            let batch =
                candidates::generate(&self.pool, &self.space, self.config.raw_samples, &mut rng)?;
            let (i, score) = select(
                self.config.method,
                &surrogates,
                &self.space,
                &batch,
                f_best,
                eta,
                self.config.epsilon,
                &base,
            )?;
            if best
                .as_ref()
                .is_none_or(|(_, b)| score.combined > b.combined)
            {
                best = Some((batch[i].clone(), score));
            }
            last_batch = batch;
        }
        let (mut chosen, mut score) = best.expect("restarts >= 1");
        if score.combined <= 0.0 {
            let i = rng.random_range(0..last_batch.len());
            chosen = last_batch.swap_remove(i);
            score = score_candidate(
                self.config.method,
                &surrogates,
                &self.space,
                &chosen,
                f_best,
                eta,
                self.config.epsilon,
                &base,
            )?;
        }

        let ev = pipeline::run(self.spec, &chosen.x, &self.pool, &mut self.store)?;
        self.record(&ev.observation, &ev.outputs, eta, score.combined)?;
        Ok(StepOutcome {
            candidate: chosen,
            score,
            observation: ev.observation,
        })
    }

    /// Warmup, then steps until the budget is spent. The iteration that
    /// crosses the budget completes and is recorded.
    pub fn run(&mut self) -> Result<()> {
        if self.observations.is_empty() {
            self.warmup()?;
        }
        while !self.budget.exhausted() {
            self.step()?;
        }
        Ok(())
    }
}

/// Runs one full optimization and returns its trace. On failure the
/// partial trace is returned alongside the error.
pub fn run(
    config: &RunConfig,
    spec: &PipelineSpec,
    cache_dir: &Path,
) -> std::result::Result<RunTrace, (Error, RunTrace)> {
    let mut opt = match Optimizer::new(config.clone(), spec, cache_dir) {
        Ok(o) => o,
        Err(e) => return Err((e, RunTrace::default())),
    };
    match opt.run() {
        Ok(()) => Ok(opt.into_trace()),
        Err(e) => Err((e, opt.into_trace())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthetic_suite;

    fn quick(method: Method, seed: u64) -> RunConfig {
        RunConfig {
            method,
            warmup: 4,
            raw_samples: 32,
            mc_samples: 50,
            restarts: 2,
            seed,
            ..RunConfig::default()
        }
    }

    #[test]
    fn warmup_points_fill_bounds_and_depend_on_seed() {
        let spec = synthetic_suite("synth3").unwrap();
        let space = spec.space().unwrap();
        let a = warmup_points(&space, 10, 1);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|x| space.contains(x)));
        assert_eq!(a, warmup_points(&space, 10, 1));
        assert_ne!(a, warmup_points(&space, 10, 2));
    }

    #[test]
    fn radical_inverse_base_two() {
        let v: Vec<f64> = (1..=4).map(|i| radical_inverse(i, 2)).collect();
        assert_eq!(v, vec![0.5, 0.25, 0.75, 0.125]);
        assert_eq!(first_primes(5), vec![2, 3, 5, 7, 11]);
    }

    #[test]
    fn warmup_identical_across_methods() {
        let spec = synthetic_suite("synth3").unwrap();
        let mut sets = Vec::new();
        for m in [Method::Eeipu, Method::Ei] {
            let dir = tempfile::tempdir().unwrap();
            let mut opt = Optimizer::new(quick(m, 7), &spec, dir.path()).unwrap();
            sets.push(opt.warmup().unwrap());
        }
        let strip = |v: &[Observation]| -> Vec<(Vec<f64>, f64, Vec<f64>)> {
            v.iter()
                .map(|o| (o.x.clone(), o.y, o.stage_costs.clone()))
                .collect()
        };
        assert_eq!(strip(&sets[0]), strip(&sets[1]));
    }

    #[test]
    fn auto_budget_is_five_times_warmup() {
        let spec = synthetic_suite("synth3").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(Method::Eeipu, 3);
        cfg.warmup = 2;
        let mut opt = Optimizer::new(cfg, &spec, dir.path()).unwrap();
        let obs = opt.warmup().unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].memo_delta, 0);
        let consumed: f64 = obs.iter().map(|o| o.executed_cost()).sum();
        assert!((opt.budget().consumed - consumed).abs() < 1e-12);
        assert!((opt.budget().total_budget - 5.0 * consumed).abs() < 1e-12);
    }

    #[test]
    fn budget_equal_to_warmup_means_no_iterations() {
        let spec = synthetic_suite("synth3").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut probe = Optimizer::new(quick(Method::Ei, 5), &spec, dir.path()).unwrap();
        probe.warmup().unwrap();
        let spent = probe.budget().consumed;

        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(Method::Ei, 5);
        cfg.budget = Budget::Fixed(spent);
        let trace = run(&cfg, &spec, dir.path()).map_err(|(e, _)| e).unwrap();
        assert_eq!(trace.post_warmup_iterations(), 0);
        assert_eq!(trace.records.len(), 4);
    }

    #[test]
    fn run_invariants_hold() {
        let spec = synthetic_suite("synth3").unwrap();
        for method in Method::ALL {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = quick(method, 11);
            cfg.budget = Budget::Fixed(80.0);
            let mut opt = Optimizer::new(cfg, &spec, dir.path()).unwrap();
            opt.run().unwrap();
            let trace = opt.trace();
            let mut running = f64::NEG_INFINITY;
            let mut consumed = 0.0;
            let mut prev_eta = f64::INFINITY;
            for r in &trace.records {
                running = running.max(r.y);
                consumed += r.executed_cost();
                assert_eq!(r.best_y, running);
                assert!((r.consumed - consumed).abs() < 1e-9);
                if !r.is_warmup() {
                    assert!(r.eta <= prev_eta);
                    prev_eta = r.eta;
                }
            }
            assert!(opt.budget().exhausted());
            // Cost training rows per stage equal the number of executions.
            for k in 0..3 {
                let runs = opt
                    .observations()
                    .iter()
                    .filter(|o| o.stage_executed(k))
                    .count();
                let nonzero = opt
                    .observations()
                    .iter()
                    .filter(|o| o.stage_costs[k] > 0.0)
                    .count();
                assert_eq!(runs, nonzero);
            }
        }
    }

    #[test]
    fn memoized_twin_wins_selection() {
        let spec = synthetic_suite("synth3").unwrap();
        let space = spec.space().unwrap();
        let objective: Arc<dyn Surrogate> = Arc::new(ConstantSurrogate {
            dim: 7,
            posterior: PosteriorGaussian {
                mean: 1.0,
                variance: 0.5,
            },
        });
        let stage = |d| -> Arc<dyn Surrogate> {
            Arc::new(ConstantSurrogate {
                dim: d,
                posterior: PosteriorGaussian {
                    mean: 1.0,
                    variance: 0.2,
                },
            })
        };
        let s = Surrogates {
            objective,
            costs: CostSurrogates::PerStage(vec![stage(2), stage(3), stage(2)]),
        };
        let x = vec![0.0, 1.0, 0.5, 0.5, 0.5, 1.0, 1.0];
        let cands = vec![
            Candidate {
                x: x.clone(),
                delta: 0,
                source_prefix: None,
            },
            Candidate {
                x,
                delta: 2,
                source_prefix: Some(0),
            },
        ];
        let base = BaseSamples::new(200, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let (i, _) = select(Method::Eeipu, &s, &space, &cands, 0.0, 0.6, 0.01, &base).unwrap();
        assert_eq!(i, 1);
        let (i, _) = select(Method::Ei, &s, &space, &cands, 0.0, 0.6, 0.01, &base).unwrap();
        assert_eq!(i, 0, "EI ignores cost, first of equal scores wins");
    }
}
