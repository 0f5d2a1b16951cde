//! Durable execution experience and the chunked collection protocol.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::encoding::{featurize, EncodedTree};
use crate::error::{Error, Result};
use crate::harness::{parallel_compile, parallel_map, Harness, Picker};
use crate::seed;
use crate::sim::{AbstractPlan, CompiledPlan, PlanHash, Query};
use crate::workload::Environment;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub query_id: String,
    pub workload_id: String,
    pub hintset_id: usize,
    pub plan_hash: PlanHash,
    pub asp: AbstractPlan,
    /// Simulated CPU ms.
    pub reward: f64,
    pub chunk_index: u32,
    /// Insertion order within the store.
    pub timestamp: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: u32,
    catalog_digest: String,
}

fn unavailable(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::StoreUnavailable(format!("{}: {e}", path.display()))
}

/// Append-only record store, optionally backed by a JSON-lines file.
#[derive(Debug)]
pub struct ExperienceStore {
    path: Option<PathBuf>,
    catalog_digest: String,
    records: Vec<ExperienceRecord>,
    keys: HashSet<(String, PlanHash)>,
    file: Option<File>,
    /// Lines dropped while loading (duplicates or a torn final line).
    pub dropped_on_load: usize,
}

impl ExperienceStore {
    pub fn in_memory(catalog_digest: &str) -> Self {
        ExperienceStore {
            path: None,
            catalog_digest: catalog_digest.to_string(),
            records: Vec::new(),
            keys: HashSet::new(),
            file: None,
            dropped_on_load: 0,
        }
    }

    /// Opens or creates the store at `path`. Records written under another
    /// hint catalog are refused.
    pub fn open(path: &Path, catalog_digest: &str) -> Result<Self> {
        let mut store = ExperienceStore::in_memory(catalog_digest);
        store.path = Some(path.to_path_buf());
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        if exists {
            store.load(path)?;
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| unavailable(path, e))?;
            }
            let header = Header {
                schema: SCHEMA_VERSION,
                catalog_digest: catalog_digest.to_string(),
            };
            fs::write(path, format!("{}\n", serde_json::to_string(&header)?)).map_err(|e| unavailable(path, e))?;
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| unavailable(path, e))?;
        store.file = Some(file);
        Ok(store)
    }

    fn load(&mut self, path: &Path) -> Result<()> {
        let f = File::open(path).map_err(|e| unavailable(path, e))?;
        let lines: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| unavailable(path, e))?;
        let header: Header = serde_json::from_str(lines.first().map_or("", String::as_str))
            .map_err(|e| unavailable(path, format!("bad header: {e}")))?;
        if header.schema != SCHEMA_VERSION {
            return Err(unavailable(path, format!("unsupported schema {}", header.schema)));
        }
        if header.catalog_digest != self.catalog_digest {
            return Err(Error::DigestMismatch {
                expected: self.catalog_digest.clone(),
                found: header.catalog_digest,
            });
        }
        let n = lines.len();
        for (i, line) in lines.into_iter().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ExperienceRecord>(&line) {
                Ok(rec) => {
                    if !self.keys.insert((rec.query_id.clone(), rec.plan_hash)) {
                        self.dropped_on_load += 1;
                        continue;
                    }
                    self.records.push(rec);
                }
                // A crash mid-append leaves at most one torn final line.
                Err(_) if i + 1 == n => self.dropped_on_load += 1,
                Err(e) => return Err(unavailable(path, format!("line {}: {e}", i + 1))),
            }
        }
        Ok(())
    }

    /// An in-memory copy of the current records.
    pub fn snapshot(&self) -> ExperienceStore {
        ExperienceStore {
            path: None,
            catalog_digest: self.catalog_digest.clone(),
            records: self.records.clone(),
            keys: self.keys.clone(),
            file: None,
            dropped_on_load: 0,
        }
    }

    pub fn catalog_digest(&self) -> &str {
        &self.catalog_digest
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[ExperienceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, query_id: &str, hash: PlanHash) -> bool {
        self.keys.contains(&(query_id.to_string(), hash))
    }

    /// Appends a record unless its (query, plan) pair is already stored.
    /// The timestamp is overwritten with the store's logical clock.
    pub fn insert(&mut self, mut rec: ExperienceRecord) -> Result<bool> {
        if !(rec.reward > 0.0 && rec.reward.is_finite()) {
            return Err(Error::NonPositiveInput(rec.reward));
        }
        if !self.keys.insert((rec.query_id.clone(), rec.plan_hash)) {
            return Ok(false);
        }
        rec.timestamp = self.records.last().map_or(0, |r| r.timestamp + 1);
        if let (Some(f), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            let line = format!("{}\n", serde_json::to_string(&rec)?);
            f.write_all(line.as_bytes()).map_err(|e| unavailable(path, e))?;
        }
        self.records.push(rec);
        Ok(true)
    }

    /// Rewrites the backing file without duplicates or torn lines.
    pub fn compact(&mut self) -> Result<()> {
        let Some(path) = self.path.clone() else { return Ok(()) };
        let tmp = path.with_extension("compact.tmp");
        let mut out = String::new();
        let header = Header {
            schema: SCHEMA_VERSION,
            catalog_digest: self.catalog_digest.clone(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(&tmp, out).map_err(|e| unavailable(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| unavailable(&path, e))?;
        self.file = Some(
            OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| unavailable(&path, e))?,
        );
        self.dropped_on_load = 0;
        Ok(())
    }
}

/// One distinct plan and the hintsets that produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquePlan {
    /// Lowest hintset id producing this plan.
    pub representative: usize,
    pub hintsets: Vec<usize>,
    pub plan: CompiledPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dedup {
    /// Ordered by representative.
    pub uniques: Vec<UniquePlan>,
    /// Every hintset id and the hash of its plan, in id order.
    pub mapping: Vec<(usize, PlanHash)>,
}

pub fn dedupe_plans(mut plans: Vec<(usize, CompiledPlan)>) -> Dedup {
    plans.sort_by_key(|(id, _)| *id);
    let mut by_hash: BTreeMap<PlanHash, usize> = BTreeMap::new();
    let mut uniques: Vec<UniquePlan> = Vec::new();
    let mut mapping = Vec::with_capacity(plans.len());
    for (id, plan) in plans {
        let h = plan.plan_hash();
        mapping.push((id, h));
        match by_hash.get(&h) {
            Some(&u) => uniques[u].hintsets.push(id),
            None => {
                by_hash.insert(h, uniques.len());
                uniques.push(UniquePlan {
                    representative: id,
                    hintsets: vec![id],
                    plan,
                });
            }
        }
    }
    Dedup { uniques, mapping }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChunkMode {
    /// Execute every distinct plan across all hintsets.
    UnbiasedAllHintsets,
    /// Execute only the default plan.
    NoHintOnly,
    /// Execute the current model's pick for a sample of queries.
    SampledRetrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub mode: ChunkMode,
    /// Queries per retrain chunk; 0 means all of them.
    #[serde(default)]
    pub sample_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChunkStats {
    pub queries: usize,
    pub unique_plans: usize,
    pub executions: usize,
    pub timeouts: usize,
    pub inserted: usize,
}

fn record(q: &Query, hintset_id: usize, plan: &CompiledPlan, reward: f64, chunk_index: u32) -> ExperienceRecord {
    ExperienceRecord {
        query_id: q.id.clone(),
        workload_id: q.workload_id.clone(),
        hintset_id,
        plan_hash: plan.plan_hash(),
        asp: plan.asp.clone(),
        reward,
        chunk_index,
        timestamp: 0,
    }
}

/// Runs one collection round and appends the surviving measurements.
pub fn collect_chunk(
    env: &Environment,
    harness: &Harness,
    store: &mut ExperienceStore,
    queries: &[Query],
    policy: ChunkPolicy,
    chunk_index: u32,
    picker: Option<&dyn Picker>,
) -> Result<ChunkStats> {
    if store.catalog_digest() != env.hints.digest() {
        return Err(Error::DigestMismatch {
            expected: env.hints.digest().to_string(),
            found: store.catalog_digest().to_string(),
        });
    }
    let mut stats = ChunkStats::default();
    match policy.mode {
        ChunkMode::UnbiasedAllHintsets => {
            for q in queries {
                let compiler = env.compiler(&q.workload_id)?;
                let dedup = dedupe_plans(parallel_compile(&compiler, q, &env.hints, harness.max_pool)?);
                let results = parallel_map(dedup.uniques.len(), harness.max_pool, |i| {
                    harness.measure(q, &dedup.uniques[i].plan)
                });
                stats.queries += 1;
                stats.unique_plans += dedup.uniques.len();
                stats.executions += results.len();
                for (u, m) in dedup.uniques.iter().zip(results) {
                    match m.reward() {
                        Some(r) => {
                            stats.inserted +=
                                usize::from(store.insert(record(q, u.representative, &u.plan, r, chunk_index))?)
                        }
                        None => stats.timeouts += 1,
                    }
                }
            }
        }
        ChunkMode::NoHintOnly => {
            let base = env
                .hints
                .get(0)
                .ok_or_else(|| Error::Config("empty hint catalog".into()))?;
            for q in queries {
                let plan = env.compiler(&q.workload_id)?.compile(q, base)?;
                stats.queries += 1;
                stats.unique_plans += 1;
                stats.executions += 1;
                match harness.measure(q, &plan).reward() {
                    Some(r) => stats.inserted += usize::from(store.insert(record(q, 0, &plan, r, chunk_index))?),
                    None => stats.timeouts += 1,
                }
            }
        }
        ChunkMode::SampledRetrain => {
            if chunk_index == 0 {
                return Err(Error::Config("the first chunk cannot be a retrain chunk".into()));
            }
            let picker = picker.ok_or_else(|| Error::Config("retrain chunks need a trained model".into()))?;
            let n = if policy.sample_size == 0 {
                queries.len()
            } else {
                policy.sample_size.min(queries.len())
            };
            let mut rng = seed::rng(seed::derive_ints(
                seed::derive(harness.seed, b"chunk-sample"),
                &[u64::from(chunk_index)],
            ));
            let mut picked = index::sample(&mut rng, queries.len(), n).into_vec();
            picked.sort_unstable();
            for i in picked {
                let q = &queries[i];
                let pick = picker.pick(env, q)?;
                let hs = env
                    .hints
                    .get(pick.hintset_id)
                    .ok_or_else(|| Error::Config(format!("hintset {} is not in the catalog", pick.hintset_id)))?;
                let plan = env.compiler(&q.workload_id)?.compile(q, hs)?;
                stats.queries += 1;
                stats.unique_plans += 1;
                stats.executions += 1;
                match harness.measure(q, &plan).reward() {
                    Some(r) => {
                        stats.inserted +=
                            usize::from(store.insert(record(q, pick.hintset_id, &plan, r, chunk_index))?)
                    }
                    None => stats.timeouts += 1,
                }
            }
        }
    }
    Ok(stats)
}

/// Featurized records selected by `include`, shuffled with a seeded rng.
pub fn training_view(
    records: &[ExperienceRecord],
    class: &str,
    include: impl Fn(&ExperienceRecord) -> Result<bool>,
    seed: u64,
) -> Result<Vec<(EncodedTree, f64)>> {
    let mut view = Vec::new();
    for r in records {
        if include(r)? {
            view.push((featurize(&r.asp), r.reward));
        }
    }
    if view.is_empty() {
        return Err(Error::EmptyClass(class.to_string()));
    }
    view.shuffle(&mut seed::rng(seed::derive(seed, class.as_bytes())));
    Ok(view)
}
