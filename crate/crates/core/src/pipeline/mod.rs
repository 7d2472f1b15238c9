//! K-stage pipelines: definitions, the synthetic benchmark suites, and
//! execution with memoized stage skipping.

pub mod external;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memo::{OutputHandle, OutputStore, PrefixPool};
use crate::space::SearchSpace;

pub use synthetic::{SyntheticCost, SyntheticFn};

/// Default standard deviation of the synthetic objective noise (variance 1e-6).
pub const DEFAULT_NOISE_STD: f64 = 1e-3;
pub const DEFAULT_TIMEOUT_SECS: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostCurrency {
    /// Analytic stage costs, not real time.
    Simulated,
    /// Measured wall-clock seconds.
    Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageKind {
    Synthetic {
        function: SyntheticFn,
        #[serde(default)]
        cost: SyntheticCost,
    },
    External {
        command: String,
        #[serde(default)]
        env: BTreeMap<String, String>,
        #[serde(default)]
        workdir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub dims: usize,
    pub bounds: Vec<(f64, f64)>,
    #[serde(flatten)]
    pub kind: StageKind,
}

impl StageSpec {
    pub fn synthetic(function: SyntheticFn) -> Self {
        StageSpec {
            dims: function.dim(),
            bounds: function.default_bounds(),
            kind: StageKind::Synthetic {
                function,
                cost: SyntheticCost::default(),
            },
        }
    }

    pub fn external(command: impl Into<String>, bounds: Vec<(f64, f64)>) -> Self {
        StageSpec {
            dims: bounds.len(),
            bounds,
            kind: StageKind::External {
                command: command.into(),
                env: BTreeMap::new(),
                workdir: None,
            },
        }
    }
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_STD
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

/// A pipeline definition, as loaded from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    #[serde(default)]
    pub name: String,
    pub cost_currency: CostCurrency,
    pub stages: Vec<StageSpec>,
    /// Standard deviation of the additive objective noise on synthetic
    /// pipelines. The draw is keyed on the configuration.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Per-stage timeout for external commands.
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl PipelineSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PipelineSpec = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("pipeline definition: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("pipeline has no stages".into()));
        }
        let synthetic = self
            .stages
            .iter()
            .filter(|s| matches!(s.kind, StageKind::Synthetic { .. }))
            .count();
        if synthetic != 0 && synthetic != self.stages.len() {
            return Err(Error::Config(
                "cannot mix synthetic and external stages".into(),
            ));
        }
        let expected = if synthetic > 0 {
            CostCurrency::Simulated
        } else {
            CostCurrency::Seconds
        };
        if self.cost_currency != expected {
            return Err(Error::Config(format!(
                "{} pipelines must use the {:?} cost currency",
                if synthetic > 0 {
                    "synthetic"
                } else {
                    "external"
                },
                expected
            )));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.dims == 0 || s.bounds.len() != s.dims {
                return Err(Error::Config(format!(
                    "stage {} declares {} dims but {} bounds",
                    k + 1,
                    s.dims,
                    s.bounds.len()
                )));
            }
            if let StageKind::Synthetic { function, .. } = &s.kind {
                if function.dim() != s.dims {
                    return Err(Error::Config(format!(
                        "stage {}: {:?} takes {} inputs",
                        k + 1,
                        function,
                        function.dim()
                    )));
                }
            }
        }
        if self.noise_std.is_nan()
            || self.noise_std < 0.0
            || self.timeout_secs.is_nan()
            || self.timeout_secs <= 0.0
        {
            return Err(Error::Config(
                "noise_std must be >= 0 and timeout_secs > 0".into(),
            ));
        }
        self.space().map(|_| ())
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn space(&self) -> Result<SearchSpace> {
        SearchSpace::new(
            self.stages.iter().map(|s| s.dims).collect(),
            self.stages
                .iter()
                .flat_map(|s| s.bounds.iter().copied())
                .collect(),
        )
    }

    /// Noise-free objective of a synthetic pipeline: sum of stage values.
    pub fn synthetic_objective(&self, x: &[f64]) -> Option<f64> {
        let mut start = 0;
        let mut total = 0.0;
        for s in &self.stages {
            let StageKind::Synthetic { function, .. } = &s.kind else {
                return None;
            };
            total += function.stage_value(&x[start..start + s.dims]);
            start += s.dims;
        }
        Some(total)
    }
}

/// Built-in benchmark pipelines: `synth3`, `synth5` and `synth10`.
pub fn synthetic_suite(name: &str) -> Result<PipelineSpec> {
    use SyntheticFn::*;
    let functions: Vec<SyntheticFn> = match name {
        "synth3" => vec![Branin, Hartmann3, Michalewicz2],
        "synth5" => vec![Branin, Hartmann3, Michalewicz2, Beale, Ackley3],
        "synth10" => {
            let cycle = [Branin, Hartmann3, Beale, Ackley3, Michalewicz2];
            cycle.iter().chain(cycle.iter()).copied().collect()
        }
        other => {
            return Err(Error::Config(format!(
                "unknown pipeline '{other}' (expected synth3, synth5 or synth10)"
            )))
        }
    };
    Ok(PipelineSpec {
        name: name.to_string(),
        cost_currency: CostCurrency::Simulated,
        stages: functions.into_iter().map(StageSpec::synthetic).collect(),
        noise_std: DEFAULT_NOISE_STD,
        timeout_secs: DEFAULT_TIMEOUT_SECS,
    })
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
    /// Cost charged per stage; zero for stages skipped through the cache.
    pub stage_costs: Vec<f64>,
    pub memo_delta: usize,
    pub wall_time: f64,
}

impl Observation {
    pub fn executed_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn stage_executed(&self, k: usize) -> bool {
        k >= self.memo_delta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub output_handle: Option<OutputHandle>,
    pub cost: f64,
}

/// Result of [`run`]: the observation plus handles to the outputs of
/// stages 1..K-1, ready to be offered to the prefix pool.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub observation: Observation,
    pub outputs: Vec<OutputHandle>,
    pub stages: Vec<StageResult>,
}

/// Runs `x` through the pipeline, resuming after the longest cached prefix
/// in `pool` and storing fresh stage outputs in `store`.
pub fn run(
    spec: &PipelineSpec,
    x: &[f64],
    pool: &PrefixPool,
    store: &mut OutputStore,
) -> Result<Evaluation> {
    let space = spec.space()?;
    if !space.contains(x) {
        return Err(Error::invalid("configuration outside the search space"));
    }
    let k_total = spec.stages();
    let started = Instant::now();

    let hit = pool.lookup(x);
    let mut delta = hit.delta();
    let mut carried: Option<Vec<u8>> = None;
    if let Some(handle) = hit.handle() {
        match store.resolve(handle) {
            Ok(bytes) => carried = Some(bytes),
            Err(e) => {
                log::warn!("cache resolution failed ({e}); running the full pipeline");
                delta = 0;
            }
        }
    }

    let mut stage_costs = vec![0.0; k_total];
    let mut outputs: Vec<OutputHandle> = (0..delta.min(k_total.saturating_sub(1)))
        .map(|k| OutputHandle::for_prefix(k + 1, &x[..space.prefix_len(k + 1)]))
        .collect();
    let mut stages: Vec<StageResult> = outputs
        .iter()
        .map(|h| StageResult {
            output_handle: Some(h.clone()),
            cost: 0.0,
        })
        .collect();
    let mut y = None;

    for k in delta..k_total {
        let params = &x[space.stage_range(k)];
        let last = k + 1 == k_total;
        let (payload, cost) = match &spec.stages[k].kind {
            StageKind::Synthetic { function, cost } => {
                let partial = match &carried {
                    Some(bytes) => decode_partial(bytes)?,
                    None => 0.0,
                };
                let value = partial + function.stage_value(params);
                if last {
                    y = Some(value + keyed_noise(x, spec.noise_std));
                }
                (
                    value.to_le_bytes().to_vec(),
                    cost.evaluate(params, &spec.stages[k].bounds),
                )
            }
            StageKind::External {
                command,
                env,
                workdir,
            } => {
                let input_path = match &carried {
                    Some(bytes) => {
                        let p =
                            external::scratch_path(store.root(), &format!("input_stage_{}", k + 1));
                        write_scratch(&p, bytes)?;
                        Some(p)
                    }
                    None => None,
                };
                let output_path =
                    external::scratch_path(store.root(), &format!("output_stage_{}", k + 1));
                ensure_parent(&output_path)?;
                let stage = external::ExternalStage {
                    stage: k + 1,
                    command,
                    env,
                    workdir: workdir.as_deref(),
                    timeout: Duration::from_secs_f64(spec.timeout_secs),
                };
                let outcome = stage.run(params, input_path.as_deref(), &output_path)?;
                if last {
                    y = Some(external::parse_objective(k + 1, &outcome.stdout)?);
                }
                (outcome.payload, outcome.seconds)
            }
        };
        stage_costs[k] = cost;
        let handle = if last {
            None
        } else {
            let h = store.store_output(k + 1, &x[..space.prefix_len(k + 1)], &payload)?;
            outputs.push(h.clone());
            Some(h)
        };
        stages.push(StageResult {
            output_handle: handle,
            cost,
        });
        carried = Some(payload);
    }

    let y = y.ok_or_else(|| Error::NumericalFailure("pipeline produced no objective".into()))?;
    Ok(Evaluation {
        observation: Observation {
            x: x.to_vec(),
            y,
            stage_costs,
            memo_delta: delta,
            wall_time: started.elapsed().as_secs_f64(),
        },
        outputs,
        stages,
    })
}

fn decode_partial(bytes: &[u8]) -> Result<f64> {
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| Error::NumericalFailure("synthetic stage output must be 8 bytes".into()))?;
    Ok(f64::from_le_bytes(arr))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e)),
        None => Ok(()),
    }
}

fn write_scratch(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

/// Gaussian noise whose draw depends only on the configuration, so a
/// memoized re-evaluation reproduces the same objective.
pub fn keyed_noise(x: &[f64], std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let mut hasher = Sha256::new();
    for v in x {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let z: f64 = ChaCha8Rng::seed_from_u64(seed).sample(StandardNormal);
    std * z
}
