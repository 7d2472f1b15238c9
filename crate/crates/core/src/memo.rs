//! Prefix memoization: the pool of cached hyperparameter prefixes drawn
//! from the top-Q observations, and the disk-backed store for stage outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 5;

const MAGIC: &[u8; 4] = b"PTSO";
const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8;
const INDEX_FILE: &str = "index.tsv";

/// Which non-complete prefixes of an observation get cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixPolicy {
    /// Every prefix of length 1..K-1.
    All,
    /// Only the first stage.
    First,
    /// Only the prefix of length ceil(K/2).
    Mean,
}

impl PrefixPolicy {
    pub const ALL_POLICIES: [PrefixPolicy; 3] =
        [PrefixPolicy::First, PrefixPolicy::Mean, PrefixPolicy::All];

    /// Prefix lengths cached for a `stages`-stage pipeline.
    pub fn deltas(self, stages: usize) -> Vec<usize> {
        if stages < 2 {
            return Vec::new();
        }
        match self {
            PrefixPolicy::All => (1..stages).collect(),
            PrefixPolicy::First => vec![1],
            PrefixPolicy::Mean => vec![stages.div_ceil(2).min(stages - 1)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrefixPolicy::All => "all",
            PrefixPolicy::First => "first",
            PrefixPolicy::Mean => "mean",
        }
    }
}

impl fmt::Display for PrefixPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrefixPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(PrefixPolicy::All),
            "first" => Ok(PrefixPolicy::First),
            "mean" => Ok(PrefixPolicy::Mean),
            other => Err(Error::Config(format!("unknown prefix policy '{other}'"))),
        }
    }
}

/// Reference to a stored stage output: the stage (1-based) that produced it
/// and the hex digest of the hyperparameter prefix that keyed it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutputHandle {
    pub stage: usize,
    pub key: String,
}

impl OutputHandle {
    pub fn for_prefix(stage: usize, key_values: &[f64]) -> Self {
        OutputHandle {
            stage,
            key: key_digest(key_values),
        }
    }
}

fn key_digest(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixEntry {
    /// Concatenated hyperparameters of stages 1..=delta.
    pub values: Vec<f64>,
    pub delta: usize,
    pub output_handle: OutputHandle,
    pub source_objective: f64,
    /// Insertion sequence number of the source observation.
    pub source_id: u64,
}

#[derive(Debug, Clone)]
struct Source {
    id: u64,
    objective: f64,
    entries: Vec<PrefixEntry>,
}

/// Outcome of a prefix lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookup<'a> {
    Hit(&'a PrefixEntry),
    /// No cached prefix matches; the candidate starts from the empty prefix.
    Miss,
}

impl<'a> Lookup<'a> {
    pub fn delta(&self) -> usize {
        match self {
            Lookup::Hit(e) => e.delta,
            Lookup::Miss => 0,
        }
    }

    pub fn handle(&self) -> Option<&'a OutputHandle> {
        match self {
            Lookup::Hit(e) => Some(&e.output_handle),
            Lookup::Miss => None,
        }
    }
}

/// Cached prefixes of the top-`capacity` observations by objective. The
/// empty prefix is implicit and always available.
#[derive(Debug, Clone)]
pub struct PrefixPool {
    capacity: usize,
    stage_dims: Vec<usize>,
    sources: Vec<Source>,
    next_id: u64,
    max_evicted: Option<f64>,
}

impl PrefixPool {
    pub fn new(capacity: usize, stage_dims: Vec<usize>) -> Self {
        PrefixPool {
            capacity,
            stage_dims,
            sources: Vec::new(),
            next_id: 0,
            max_evicted: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn stage_dims(&self) -> &[usize] {
        &self.stage_dims
    }

    /// Number of leading coordinates covered by a `delta`-stage prefix.
    pub fn prefix_len(&self, delta: usize) -> usize {
        self.stage_dims[..delta].iter().sum()
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    /// Cached entries, best source first. Excludes the implicit empty prefix.
    pub fn entries(&self) -> impl Iterator<Item = &PrefixEntry> {
        self.sources.iter().flat_map(|s| s.entries.iter())
    }

    pub fn entry_count(&self) -> usize {
        self.sources.iter().map(|s| s.entries.len()).sum()
    }

    /// Source objectives in rank order.
    pub fn source_objectives(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.objective).collect()
    }

    /// Highest objective among sources evicted so far.
    pub fn max_evicted_objective(&self) -> Option<f64> {
        self.max_evicted
    }

    /// Offers a completed observation to the pool. `outputs[k]` is the
    /// handle of stage `k+1`'s output. Returns whether it was admitted.
    pub fn update(
        &mut self,
        x: &[f64],
        objective: f64,
        outputs: &[OutputHandle],
        policy: PrefixPolicy,
    ) -> Result<bool> {
        let k = self.stages();
        if x.len() != self.prefix_len(k) {
            return Err(Error::invalid(format!(
                "observation has {} values, pipeline expects {}",
                x.len(),
                self.prefix_len(k)
            )));
        }
        if outputs.len() + 1 < k {
            return Err(Error::invalid(format!(
                "expected {} stage outputs, got {}",
                k.saturating_sub(1),
                outputs.len()
            )));
        }
        let id = self.next_id;
        self.next_id += 1;
        if self.capacity == 0 || k < 2 {
            return Ok(false);
        }

        let entries = policy
            .deltas(k)
            .into_iter()
            .map(|delta| PrefixEntry {
                values: x[..self.prefix_len(delta)].to_vec(),
                delta,
                output_handle: outputs[delta - 1].clone(),
                source_objective: objective,
                source_id: id,
            })
            .collect();
        self.sources.push(Source {
            id,
            objective,
            entries,
        });
        // Stable: ties keep the earlier insertion ahead.
        self.sources
            .sort_by(|a, b| b.objective.total_cmp(&a.objective).then(a.id.cmp(&b.id)));
        let mut admitted = true;
        while self.sources.len() > self.capacity {
            let evicted = self.sources.pop().expect("non-empty");
            if evicted.id == id {
                admitted = false;
            }
            self.max_evicted = Some(match self.max_evicted {
                Some(m) => m.max(evicted.objective),
                None => evicted.objective,
            });
        }
        Ok(admitted)
    }

    /// Longest cached prefix whose values equal the leading coordinates of
    /// `x` bit for bit.
    pub fn lookup(&self, x: &[f64]) -> Lookup<'_> {
        let mut best: Option<&PrefixEntry> = None;
        for e in self.entries() {
            if e.values.len() > x.len() || best.is_some_and(|b| b.delta >= e.delta) {
                continue;
            }
            let same = e
                .values
                .iter()
                .zip(x)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if same {
                best = Some(e);
            }
        }
        best.map_or(Lookup::Miss, Lookup::Hit)
    }

    /// Distinct cached prefixes in rank order, first occurrence kept.
    pub fn distinct_prefixes(&self) -> Vec<&PrefixEntry> {
        let mut out: Vec<&PrefixEntry> = Vec::new();
        for e in self.entries() {
            let dup = out.iter().any(|o| {
                o.delta == e.delta
                    && o.values
                        .iter()
                        .zip(&e.values)
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            });
            if !dup {
                out.push(e);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct IndexRow {
    delta: usize,
    source_objective: Option<f64>,
}

/// Disk-backed stage-output store laid out as
/// `<root>/stage_<k>/<sha256 hex>.bin` with an `index.tsv` summary.
#[derive(Debug)]
pub struct OutputStore {
    root: PathBuf,
    index: BTreeMap<OutputHandle, IndexRow>,
    index_dirty: bool,
}

impl OutputStore {
    /// Opens (creating if needed) a store and rebuilds its index from the
    /// records present on disk.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::storage(&root, e))?;

        let previous = read_index_objectives(&root.join(INDEX_FILE));
        let mut index = BTreeMap::new();
        let dirs = fs::read_dir(&root).map_err(|e| Error::storage(&root, e))?;
        for dir in dirs {
            let dir = dir.map_err(|e| Error::storage(&root, e))?;
            let name = dir.file_name().to_string_lossy().into_owned();
            let Some(stage) = name
                .strip_prefix("stage_")
                .and_then(|s| s.parse::<usize>().ok())
            else {
                continue;
            };
            let files = fs::read_dir(dir.path()).map_err(|e| Error::storage(dir.path(), e))?;
            for file in files {
                let path = file.map_err(|e| Error::storage(dir.path(), e))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("bin") {
                    continue;
                }
                let Some(key) = path.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                if read_record(&path).is_err() {
                    log::warn!("skipping unreadable cache record {}", path.display());
                    continue;
                }
                let handle = OutputHandle {
                    stage,
                    key: key.to_string(),
                };
                let source_objective = previous.get(&handle).copied();
                index.insert(
                    handle,
                    IndexRow {
                        delta: stage,
                        source_objective,
                    },
                );
            }
        }
        let mut store = OutputStore {
            root,
            index,
            index_dirty: true,
        };
        store.flush_index()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn path_of(&self, handle: &OutputHandle) -> PathBuf {
        self.root
            .join(format!("stage_{}", handle.stage))
            .join(format!("{}.bin", handle.key))
    }

    pub fn contains(&self, handle: &OutputHandle) -> bool {
        self.index.contains_key(handle)
    }

    /// Stores `payload` as the output of `stage` for the given prefix.
    /// Re-storing an existing key is a no-op.
    pub fn store_output(
        &mut self,
        stage: usize,
        key_values: &[f64],
        payload: &[u8],
    ) -> Result<OutputHandle> {
        let handle = OutputHandle::for_prefix(stage, key_values);
        if self.index.contains_key(&handle) {
            return Ok(handle);
        }
        let path = self.path_of(&handle);
        let dir = path.parent().expect("record path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;

        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&[FORMAT_VERSION])?;
            f.write_all(&(payload.len() as u64).to_le_bytes())?;
            f.write_all(payload)?;
            f.flush()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| Error::storage(&path, e))?;

        self.index.insert(
            handle.clone(),
            IndexRow {
                delta: stage,
                source_objective: None,
            },
        );
        self.index_dirty = true;
        Ok(handle)
    }

    pub fn resolve(&self, handle: &OutputHandle) -> Result<Vec<u8>> {
        read_record(&self.path_of(handle))
    }

    /// Records the objective of the observation whose prefix produced
    /// `handle`, keeping the best value seen.
    pub fn annotate(&mut self, handle: &OutputHandle, objective: f64) {
        if let Some(row) = self.index.get_mut(handle) {
            let updated = match row.source_objective {
                Some(prev) if prev >= objective => prev,
                _ => objective,
            };
            if row.source_objective != Some(updated) {
                row.source_objective = Some(updated);
                self.index_dirty = true;
            }
        }
    }

    /// Rewrites `index.tsv` if anything changed since the last flush.
    pub fn flush_index(&mut self) -> Result<()> {
        if !self.index_dirty {
            return Ok(());
        }
        let mut out = String::with_capacity(64 * (self.index.len() + 1));
        out.push_str("stage\thash\tdelta\tsource_objective\n");
        for (h, row) in &self.index {
            let obj = row
                .source_objective
                .map_or_else(|| "nan".to_string(), |v| format!("{v:.16e}"));
            out.push_str(&format!("{}\t{}\t{}\t{}\n", h.stage, h.key, row.delta, obj));
        }
        let path = self.root.join(INDEX_FILE);
        fs::write(&path, out).map_err(|e| Error::storage(&path, e))?;
        self.index_dirty = false;
        Ok(())
    }
}

fn read_record(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    f.read_exact(&mut header)
        .map_err(|e| Error::storage(path, e))?;
    let corrupt = |reason: &str| Error::CorruptRecord {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if &header[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if header[4] != FORMAT_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let len = u64::from_le_bytes(header[5..13].try_into().expect("8 bytes")) as usize;
    let mut payload = Vec::with_capacity(len);
    f.read_to_end(&mut payload)
        .map_err(|e| Error::storage(path, e))?;
    if payload.len() != len {
        return Err(corrupt("length mismatch"));
    }
    Ok(payload)
}

fn read_index_objectives(path: &Path) -> BTreeMap<OutputHandle, f64> {
    let Ok(text) = fs::read_to_string(path) else {
        return BTreeMap::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let mut cols = line.split('\t');
            let stage = cols.next()?.parse().ok()?;
            let key = cols.next()?.to_string();
            let _delta = cols.next()?;
            let obj: f64 = cols.next()?.parse().ok()?;
            (!obj.is_nan()).then_some((OutputHandle { stage, key }, obj))
        })
        .collect()
}
