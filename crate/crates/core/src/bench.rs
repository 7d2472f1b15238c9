//! Multi-seed experiments, ablation sweeps and their summaries.
//!
//! Layout of an experiment directory:
//! `trace_<label>_seed<seed>.csv` plus a `.json` sidecar per run,
//! `summary.csv` over all runs and, from [`report`], `curves.csv`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{EtaSchedule, Method};
use crate::error::{Error, Result};
use crate::memo::PrefixPolicy;
use crate::optimizer::{self, Budget, RunConfig, AUTO_BUDGET_FACTOR};
use crate::pipeline::PipelineSpec;
use crate::trace::{fmt_f64, RunTrace};

pub const CACHE_ROOT_ENV: &str = "PIPETUNE_CACHE_ROOT";

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub pipeline: PipelineSpec,
    pub methods: Vec<Method>,
    /// T
    pub repeats: usize,
    pub base_seed: u64,
    /// Method and seed are overwritten per run.
    pub config: RunConfig,
    pub out_dir: PathBuf,
    /// Overrides `PIPETUNE_CACHE_ROOT` and the `<out>/cache` default.
    pub cache_root: Option<PathBuf>,
    pub jobs: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        self.config.validate()?;
        self.pipeline.validate()
    }

    /// The explicit cache root, else `PIPETUNE_CACHE_ROOT`, else
    /// `<out>/cache`.
    pub fn cache_root(&self) -> PathBuf {
        self.cache_root
            .clone()
            .or_else(|| std::env::var_os(CACHE_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeats as u64).map(move |i| self.base_seed.wrapping_add(i))
    }
}

/// JSON sidecar written next to each trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSidecar {
    pub label: String,
    pub pipeline: String,
    pub config: RunConfig,
    pub resolved_budget: f64,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    pub trace: RunTrace,
    pub error: Option<String>,
}

pub fn trace_file_name(label: &str, seed: u64) -> String {
    format!("trace_{label}_seed{seed}.csv")
}

/// Inverse of [`trace_file_name`].
pub fn parse_trace_file_name(name: &str) -> Option<(String, u64)> {
    let stem = name.strip_prefix("trace_")?.strip_suffix(".csv")?;
    let (label, seed) = stem.rsplit_once("_seed")?;
    Some((label.to_string(), seed.parse().ok()?))
}

fn resolved_budget(config: &RunConfig, trace: &RunTrace) -> f64 {
    match config.budget {
        Budget::Fixed(b) => b,
        Budget::Auto => {
            let warm = trace.warmup().last().map_or(0.0, |r| r.consumed);
            AUTO_BUDGET_FACTOR * warm
        }
    }
}

fn run_one(
    pipeline: &PipelineSpec,
    config: RunConfig,
    label: &str,
    out_dir: &Path,
    cache_root: &Path,
) -> Result<RunOutcome> {
    let seed = config.seed;
    let cache = cache_root.join(format!("{label}_seed{seed}"));
    // A fresh cache per run keeps reruns byte-identical.
    if cache.exists() {
        std::fs::remove_dir_all(&cache).map_err(|e| Error::storage(&cache, e))?;
    }
    let (trace, error) = match optimizer::run(&config, pipeline, &cache) {
        Ok(t) => (t, None),
        Err((e, t)) => {
            log::error!("{label} seed {seed} failed: {e}");
            (t, Some(e.to_string()))
        }
    };
    let stages = pipeline.stages();
    let dim = pipeline.stages.iter().map(|s| s.dims).sum();
    let trace_path = out_dir.join(trace_file_name(label, seed));
    trace.save(&trace_path, stages, dim)?;
    let sidecar = RunSidecar {
        label: label.to_string(),
        pipeline: pipeline.name.clone(),
        resolved_budget: resolved_budget(&config, &trace),
        iterations: trace.post_warmup_iterations(),
        config,
        error: error.clone(),
    };
    let json_path = trace_path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Io(e.into()))?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::storage(&json_path, e))?;
    log::info!(
        "{label} seed {seed}: {} iterations, best {:.4}",
        sidecar.iterations,
        trace.best_y()
    );
    Ok(RunOutcome {
        label: label.to_string(),
        seed,
        trace,
        error,
    })
}

/// Runs `(label, config)` jobs, in parallel across runs when `jobs > 1`.
/// Outcomes come back in job order whatever the scheduling.
fn run_jobs(
    pipeline: &PipelineSpec,
    jobs: Vec<(String, RunConfig)>,
    out_dir: &Path,
    cache_root: &Path,
    threads: usize,
) -> Result<Vec<RunOutcome>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let work = |(label, cfg): &(String, RunConfig)| {
        run_one(pipeline, cfg.clone(), label, out_dir, cache_root)
    };
    if threads <= 1 {
        return jobs.iter().map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| jobs.par_iter().map(work).collect())
}

/// Result of a batch of runs. Failed runs keep their partial traces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &RunOutcome> {
        self.runs.iter().filter(|r| r.error.is_some())
    }
}

/// Methods × repeats with seeds `base_seed + i`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let jobs: Vec<(String, RunConfig)> = spec
        .methods
        .iter()
        .flat_map(|m| {
            spec.seeds().map(move |seed| {
                let cfg = RunConfig {
                    method: *m,
                    seed,
                    ..spec.config.clone()
                };
                (m.as_str().to_string(), cfg)
            })
        })
        .collect();
    let runs = run_jobs(
        &spec.pipeline,
        jobs,
        &spec.out_dir,
        &spec.cache_root(),
        spec.jobs,
    )?;
    let summary = summarize_runs(&runs);
    write_summary(&spec.out_dir.join("summary.csv"), &summary)?;
    Ok(ExperimentOutcome { runs, summary })
}

fn summarize_runs(runs: &[RunOutcome]) -> Vec<SummaryRow> {
    let labelled: Vec<(String, u64, RunTrace)> = runs
        .iter()
        .map(|r| (r.label.clone(), r.seed, r.trace.clone()))
        .collect();
    summarize(&labelled)
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub repeats: usize,
    pub mean_best: f64,
    pub se_best: f64,
    pub mean_iterations: f64,
    pub mean_consumed: f64,
    /// Share of best-improving post-warmup iterations that reused a
    /// cached prefix, in percent, pooled over repeats.
    pub memo_improvement_pct: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn standard_error(v: &[f64]) -> f64 {
    sample_std(v) / (v.len() as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Aggregates `(label, seed, trace)` triples into one row per label, in
/// first-seen label order. Pure: the same traces always give the same rows.
pub fn summarize(traces: &[(String, u64, RunTrace)]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunTrace>> = BTreeMap::new();
    for (label, _, t) in traces {
        if !groups.contains_key(label.as_str()) {
            order.push(label);
        }
        groups.entry(label).or_default().push(t);
    }
    order
        .into_iter()
        .map(|label| {
            let ts = &groups[label];
            let best: Vec<f64> = ts.iter().map(|t| t.best_y()).collect();
            let iters: Vec<f64> = ts
                .iter()
                .map(|t| t.post_warmup_iterations() as f64)
                .collect();
            let consumed: Vec<f64> = ts.iter().map(|t| t.consumed()).collect();
            let (memo, total) = ts
                .iter()
                .map(|t| t.improvement_counts())
                .fold((0, 0), |(a, b), (m, n)| (a + m, b + n));
            SummaryRow {
                method: label.to_string(),
                repeats: ts.len(),
                mean_best: mean(&best),
                se_best: standard_error(&best),
                mean_iterations: mean(&iters),
                mean_consumed: mean(&consumed),
                memo_improvement_pct: if total == 0 {
                    0.0
                } else {
                    100.0 * memo as f64 / total as f64
                },
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "method",
    "repeats",
    "mean_best",
    "se_best",
    "mean_iterations",
    "mean_consumed",
    "memo_improvement_pct",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.repeats.to_string(),
            fmt_f64(r.mean_best),
            fmt_f64(r.se_best),
            fmt_f64(r.mean_iterations),
            fmt_f64(r.mean_consumed),
            fmt_f64(r.memo_improvement_pct),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|e| parse_err(format!("column {i}: {e}")))
        };
        rows.push(SummaryRow {
            method: rec.get(0).unwrap_or_default().to_string(),
            repeats: f(1)? as usize,
            mean_best: f(2)?,
            se_best: f(3)?,
            mean_iterations: f(4)?,
            mean_consumed: f(5)?,
            memo_improvement_pct: f(6)?,
        });
    }
    Ok(rows)
}

/// Human-readable summary table.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<22} {:>4} {:>22} {:>10} {:>12} {:>10}\n",
        "method", "T", "best (mean ± s.e.)", "iters", "consumed", "memo %"
    );
    for r in rows {
        s += &format!(
            "{:<22} {:>4} {:>22} {:>10.1} {:>12.2} {:>10.1}\n",
            r.method,
            r.repeats,
            format!("{:.4} ± {:.4}", r.mean_best, r.se_best),
            r.mean_iterations,
            r.mean_consumed,
            r.memo_improvement_pct
        );
    }
    s
}

/// Loads every `trace_*_seed*.csv` in `dir`, sorted by label then seed.
pub fn load_traces(dir: &Path) -> Result<Vec<(String, u64, RunTrace)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::storage(dir, e))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some((label, seed)) = parse_trace_file_name(name) {
            found.push((label, seed, path));
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|(label, seed, path)| Ok((label, seed, RunTrace::load(&path)?)))
        .collect()
}

/// Long-format best-objective-vs-cost curves:
/// `method,seed,iter,cumulative_cost,best_y`.
pub fn write_curves<W: Write>(out: W, traces: &[(String, u64, RunTrace)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "seed", "iter", "cumulative_cost", "best_y"])
        .map_err(csv_err)?;
    for (label, seed, t) in traces {
        for r in &t.records {
            w.write_record([
                label.clone(),
                seed.to_string(),
                r.iter.to_string(),
                fmt_f64(r.consumed),
                fmt_f64(r.best_y),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Re-aggregates a results directory: writes `summary.csv` and
/// `curves.csv` into it and returns the rows.
pub fn report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let traces = load_traces(dir)?;
    if traces.is_empty() {
        return Err(Error::Config(format!("no trace CSVs in {}", dir.display())));
    }
    let rows = summarize(&traces);
    write_summary(&dir.join("summary.csv"), &rows)?;
    let curves = dir.join("curves.csv");
    let f = std::fs::File::create(&curves).map_err(|e| Error::storage(&curves, e))?;
    write_curves(std::io::BufWriter::new(f), &traces)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    CacheSize,
    PrefixPolicy,
    Eta,
    Epsilon,
}

pub const CACHE_SIZE_LEVELS: [usize; 6] = [0, 5, 10, 20, 30, 50];
pub const EPSILON_LEVELS: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];

impl AblationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::CacheSize => "cache_size",
            AblationKind::PrefixPolicy => "prefix_policy",
            AblationKind::Eta => "eta",
            AblationKind::Epsilon => "epsilon",
        }
    }

    /// Default sweep levels as `(label, config)` pairs derived from `base`.
    pub fn levels(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            AblationKind::CacheSize => CACHE_SIZE_LEVELS
                .iter()
                .map(|&q| {
                    (
                        format!("q{q}"),
                        RunConfig {
                            cache_size: q,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            AblationKind::PrefixPolicy => PrefixPolicy::ALL_POLICIES
                .iter()
                .map(|&p| {
                    (
                        p.as_str().to_string(),
                        RunConfig {
                            prefix_policy: p,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            AblationKind::Eta => [
                EtaSchedule::Budget,
                EtaSchedule::Constant,
                EtaSchedule::ExpDecay(EtaSchedule::DEFAULT_DECAY),
            ]
            .iter()
            .map(|&s| {
                let label = match s {
                    EtaSchedule::ExpDecay(_) => "exp_decay".to_string(),
                    other => other.label(),
                };
                (
                    label,
                    RunConfig {
                        eta_schedule: s,
                        ..base.clone()
                    },
                )
            })
            .collect(),
            AblationKind::Epsilon => EPSILON_LEVELS
                .iter()
                .map(|&e| {
                    (
                        format!("eps{e}"),
                        RunConfig {
                            epsilon: e,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cache_size" => Ok(AblationKind::CacheSize),
            "prefix_policy" => Ok(AblationKind::PrefixPolicy),
            "eta" => Ok(AblationKind::Eta),
            "epsilon" => Ok(AblationKind::Epsilon),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected cache_size, prefix_policy, eta or epsilon)"
            ))),
        }
    }
}

/// sqrt(Σ(n_i−1)s_i² / Σ(n_i−1)) / sqrt(n̄), with n̄ the mean group size.
pub fn pooled_standard_error(groups: &[Vec<f64>]) -> f64 {
    let dof: usize = groups.iter().map(|g| g.len().saturating_sub(1)).sum();
    if dof == 0 {
        return 0.0;
    }
    let ss: f64 = groups
        .iter()
        .filter(|g| g.len() > 1)
        .map(|g| (g.len() - 1) as f64 * sample_std(g).powi(2))
        .sum();
    let n_bar = groups.iter().map(Vec::len).sum::<usize>() as f64 / groups.len() as f64;
    (ss / dof as f64).sqrt() / n_bar.sqrt()
}

/// Spread of level means against noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub spread: f64,
    pub pooled_se: f64,
}

impl Sensitivity {
    pub fn from_groups(groups: &[Vec<f64>]) -> Self {
        let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        Sensitivity {
            spread: hi - lo,
            pooled_se: pooled_standard_error(groups),
        }
    }

    /// max−min of level means within two pooled standard errors.
    pub fn insensitive(&self) -> bool {
        self.spread <= 2.0 * self.pooled_se
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub kind: AblationKind,
    /// One summary per level, labelled by level.
    pub levels: Vec<(String, Vec<SummaryRow>)>,
    pub runs: Vec<RunOutcome>,
    pub sensitivity: Sensitivity,
}

/// Runs every level of `kind` for each method and seed of `spec`. Each
/// level gets its own directory `<out>/<kind>/<level>/` with traces and a
/// summary; `<out>/ablation_<kind>.csv` collects the per-level rows.
pub fn run_ablation(kind: AblationKind, spec: &ExperimentSpec) -> Result<AblationOutcome> {
    spec.validate()?;
    let mut levels = Vec::new();
    let mut runs = Vec::new();
    let mut groups = Vec::new();
    for (level, cfg) in kind.levels(&spec.config) {
        let sub = ExperimentSpec {
            config: cfg,
            out_dir: spec.out_dir.join(kind.as_str()).join(&level),
            cache_root: Some(spec.cache_root().join(kind.as_str()).join(&level)),
            ..spec.clone()
        };
        let out = run_experiment(&sub)?;
        groups.push(
            out.runs
                .iter()
                .map(|r| r.trace.best_y())
                .collect::<Vec<_>>(),
        );
        levels.push((level, out.summary));
        runs.extend(out.runs);
    }
    let sensitivity = Sensitivity::from_groups(&groups);
    write_ablation(&spec.out_dir.join(format!("ablation_{kind}.csv")), &levels)?;
    Ok(AblationOutcome {
        kind,
        levels,
        runs,
        sensitivity,
    })
}

fn write_ablation(path: &Path, levels: &[(String, Vec<SummaryRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["level"];
    header.extend(SUMMARY_HEADER);
    w.write_record(&header).map_err(csv_err)?;
    for (level, rows) in levels {
        for r in rows {
            w.write_record([
                level.clone(),
                r.method.clone(),
                r.repeats.to_string(),
                fmt_f64(r.mean_best),
                fmt_f64(r.se_best),
                fmt_f64(r.mean_iterations),
                fmt_f64(r.mean_consumed),
                fmt_f64(r.memo_improvement_pct),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
