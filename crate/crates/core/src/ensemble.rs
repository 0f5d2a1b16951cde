//! Light/Heavy routing, per-class value models and argmin hintset choice.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoding::featurize;
use crate::error::{Error, Result};
use crate::experience::{collect_chunk, training_view, ChunkMode, ChunkPolicy, ExperienceRecord, ExperienceStore};
use crate::harness::{parallel_compile, Harness, Pick, Picker};
use crate::model::{checkpoint, Architecture, LossKind, LossReport, TrainConfig, ValueModel};
use crate::seed;
use crate::sim::{CompiledPlan, PlanHash, Query, WorkloadStats};
use crate::workload::Environment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityClass {
    Light,
    Heavy,
}

impl ComplexityClass {
    pub fn name(self) -> &'static str {
        match self {
            ComplexityClass::Light => "light",
            ComplexityClass::Heavy => "heavy",
        }
    }
}

impl fmt::Display for ComplexityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Heavy iff the largest table reaches the threshold or the data is skewed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierRule {
    pub record_threshold: u64,
    pub skew_overrides: bool,
    /// Shrinks the threshold for down-scaled catalogs.
    pub divisor: f64,
}

impl Default for ClassifierRule {
    fn default() -> Self {
        ClassifierRule {
            record_threshold: 60_000_000,
            skew_overrides: true,
            divisor: 1.0,
        }
    }
}

impl ClassifierRule {
    pub fn threshold(&self) -> f64 {
        self.record_threshold as f64 / self.divisor.max(f64::MIN_POSITIVE)
    }

    pub fn classify(&self, stats: &WorkloadStats) -> ComplexityClass {
        if stats.max_records as f64 >= self.threshold() || (self.skew_overrides && stats.skew_flag) {
            ComplexityClass::Heavy
        } else {
            ComplexityClass::Light
        }
    }
}

/// How queries are assigned to models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Routing {
    /// One model for every workload.
    Single,
    Rule {
        rule: ClassifierRule,
    },
    /// A fixed workload to class table.
    Preset {
        name: String,
        classes: BTreeMap<String, ComplexityClass>,
    },
}

#[derive(Deserialize)]
struct PresetFile {
    name: String,
    classes: BTreeMap<String, ComplexityClass>,
}

const PRESETS: [(&str, &str); 4] = [
    ("e1", include_str!("../config/ensembles/e1.toml")),
    ("e2", include_str!("../config/ensembles/e2.toml")),
    ("e3", include_str!("../config/ensembles/e3.toml")),
    ("e4", include_str!("../config/ensembles/e4.toml")),
];

impl Routing {
    /// Parses a preset table in TOML form.
    pub fn preset_from_toml(text: &str) -> Result<Self> {
        let f: PresetFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Routing::Preset {
            name: f.name,
            classes: f.classes,
        })
    }

    /// `single`, `custom` (the default rule) or one of the shipped presets
    /// `e1`..`e4`.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "single" => Ok(Routing::Single),
            "custom" => Ok(Routing::Rule {
                rule: ClassifierRule::default(),
            }),
            _ => {
                let (_, text) = PRESETS
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Config(format!("unknown ensemble `{name}`")))?;
                Self::preset_from_toml(text)
            }
        }
    }

    pub fn keys(&self) -> Vec<ModelKey> {
        match self {
            Routing::Single => vec![ModelKey::Single],
            _ => vec![
                ModelKey::Class(ComplexityClass::Light),
                ModelKey::Class(ComplexityClass::Heavy),
            ],
        }
    }

    pub fn route(&self, stats: &WorkloadStats) -> Result<ModelKey> {
        match self {
            Routing::Single => Ok(ModelKey::Single),
            Routing::Rule { rule } => Ok(ModelKey::Class(rule.classify(stats))),
            Routing::Preset { classes, .. } => classes
                .get(&stats.workload_id)
                .map(|&c| ModelKey::Class(c))
                .ok_or_else(|| Error::UnknownWorkload(stats.workload_id.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKey {
    Single,
    Class(ComplexityClass),
}

impl ModelKey {
    pub fn name(self) -> &'static str {
        match self {
            ModelKey::Single => "single",
            ModelKey::Class(c) => c.name(),
        }
    }
}

impl FromStr for ModelKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ModelKey::Single),
            "light" => Ok(ModelKey::Class(ComplexityClass::Light)),
            "heavy" => Ok(ModelKey::Class(ComplexityClass::Heavy)),
            other => Err(Error::Config(format!("unknown model key `{other}`"))),
        }
    }
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub arch: Architecture,
    pub loss: LossKind,
    pub train: TrainConfig,
    /// Passes over the training view on first training.
    pub epochs: usize,
    /// Passes after each retrain chunk.
    pub retrain_epochs: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            arch: Architecture::default(),
            loss: LossKind::QError,
            train: TrainConfig::default(),
            epochs: 30,
            retrain_epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub routing: Routing,
    pub models: BTreeMap<ModelKey, ValueModel>,
    pub catalog_digest: String,
    /// Workload statistics by id.
    pub stats: BTreeMap<String, WorkloadStats>,
    pub max_pool: usize,
}

/// The chosen hintset and the predicted reward of every hintset.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub hintset_id: usize,
    pub predictions: Vec<f64>,
    pub model: ModelKey,
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Compiles `query` under every hintset, scores each distinct plan once and
/// returns the argmin hintset with the per-hintset scores.
pub fn select_hintset(
    env: &Environment,
    query: &Query,
    max_pool: usize,
    score: impl Fn(&CompiledPlan) -> Result<f64>,
) -> Result<(usize, Vec<f64>)> {
    let compiler = env.compiler(&query.workload_id)?;
    let plans = parallel_compile(&compiler, query, &env.hints, max_pool)?;
    let mut cache: HashMap<PlanHash, f64> = HashMap::new();
    let mut scores = Vec::with_capacity(plans.len());
    for (_, plan) in &plans {
        let v = match cache.entry(plan.plan_hash()) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => *e.insert(score(plan)?),
        };
        scores.push(v);
    }
    Ok((plans[argmin(&scores)].0, scores))
}

impl EnsembleModel {
    /// Fresh, untrained models for every route.
    pub fn untrained(routing: Routing, settings: &TrainSettings, env: &Environment) -> Self {
        let models = routing
            .keys()
            .into_iter()
            .map(|k| {
                let mut m = ValueModel::new(settings.arch.clone(), settings.loss, model_seed(settings.seed, k));
                m.train = settings.train.clone();
                (k, m)
            })
            .collect();
        EnsembleModel {
            routing,
            models,
            catalog_digest: env.hints.digest().to_string(),
            stats: env.stats().into_iter().map(|s| (s.workload_id.clone(), s)).collect(),
            max_pool: 225,
        }
    }

    /// Registers a workload so its queries can be routed.
    pub fn register(&mut self, stats: WorkloadStats) {
        self.stats.insert(stats.workload_id.clone(), stats);
    }

    pub fn route(&self, workload_id: &str) -> Result<ModelKey> {
        let stats = self
            .stats
            .get(workload_id)
            .ok_or_else(|| Error::UnknownWorkload(workload_id.to_string()))?;
        self.routing.route(stats)
    }

    fn model(&self, key: ModelKey) -> Result<&ValueModel> {
        self.models
            .get(&key)
            .ok_or_else(|| Error::EmptyClass(key.name().to_string()))
    }

    /// Trains every route's model for `epochs` passes over its share of
    /// `records`. Models train concurrently.
    pub fn train(
        &mut self,
        records: &[ExperienceRecord],
        epochs: usize,
        seed: u64,
    ) -> Result<BTreeMap<ModelKey, LossReport>> {
        let mut views = Vec::new();
        for key in self.routing.keys() {
            let view = training_view(records, key.name(), |r| Ok(self.route(&r.workload_id)? == key), seed)?;
            views.push((key, view));
        }
        let mut jobs: Vec<(ModelKey, &mut ValueModel, _)> = Vec::new();
        let mut models: Vec<(&ModelKey, &mut ValueModel)> = self.models.iter_mut().collect();
        for (key, view) in views {
            let pos = models
                .iter()
                .position(|(k, _)| **k == key)
                .ok_or_else(|| Error::EmptyClass(key.name().to_string()))?;
            let (_, m) = models.swap_remove(pos);
            jobs.push((key, m, view));
        }
        let results: Vec<(ModelKey, Result<LossReport>)> = std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|(key, m, view)| s.spawn(move || (key, m.fit(&view, epochs))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        results.into_iter().map(|(k, r)| r.map(|rep| (k, rep))).collect()
    }

    pub fn predict_hintset(&self, env: &Environment, query: &Query) -> Result<Prediction> {
        let key = self.route(&query.workload_id)?;
        let model = self.model(key)?;
        let (hintset_id, predictions) =
            select_hintset(env, query, self.max_pool, |plan| model.predict(&featurize(&plan.asp)))?;
        Ok(Prediction {
            hintset_id,
            predictions,
            model: key,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            routing: self.routing.clone(),
            catalog_digest: self.catalog_digest.clone(),
            models: self.models.keys().map(|k| k.name().to_string()).collect(),
            max_pool: self.max_pool,
        };
        fs::write(dir.join("ensemble.json"), serde_json::to_string_pretty(&manifest)?)?;
        for (k, m) in &self.models {
            checkpoint::save(m, &dir.join(format!("model-{}.bin", k.name())))?;
        }
        let stats: Vec<WorkloadStats> = self.stats.values().cloned().collect();
        write_stats_csv(&stats, &dir.join("stats.csv"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ensemble.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut models = BTreeMap::new();
        for name in &manifest.models {
            let key: ModelKey = name.parse()?;
            models.insert(key, checkpoint::load(&dir.join(format!("model-{name}.bin")))?);
        }
        let stats = read_stats_csv(&dir.join("stats.csv"))?
            .into_iter()
            .map(|s| (s.workload_id.clone(), s))
            .collect();
        Ok(EnsembleModel {
            routing: manifest.routing,
            models,
            catalog_digest: manifest.catalog_digest,
            stats,
            max_pool: manifest.max_pool,
        })
    }
}

impl Picker for EnsembleModel {
    fn pick(&self, env: &Environment, query: &Query) -> Result<Pick> {
        let p = self.predict_hintset(env, query)?;
        Ok(Pick {
            hintset_id: p.hintset_id,
            predicted_reward: p.predictions[p.hintset_id],
            class: p.model.name().to_string(),
        })
    }
}

fn model_seed(seed: u64, key: ModelKey) -> u64 {
    seed::derive(seed, key.name().as_bytes())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    routing: Routing,
    catalog_digest: String,
    models: Vec<String>,
    max_pool: usize,
}

/// Collects the unbiased first chunk for both query lists, then trains one
/// model per class.
pub fn train_ensemble(
    env: &Environment,
    harness: &Harness,
    store: &mut ExperienceStore,
    light_queries: &[Query],
    heavy_queries: &[Query],
    routing: Routing,
    settings: &TrainSettings,
) -> Result<EnsembleModel> {
    for (class, qs) in [("light", light_queries), ("heavy", heavy_queries)] {
        if qs.is_empty() {
            return Err(Error::EmptyClass(class.to_string()));
        }
    }
    let policy = ChunkPolicy {
        mode: ChunkMode::UnbiasedAllHintsets,
        sample_size: 0,
    };
    collect_chunk(env, harness, store, light_queries, policy, 0, None)?;
    collect_chunk(env, harness, store, heavy_queries, policy, 0, None)?;
    let mut ens = EnsembleModel::untrained(routing, settings, env);
    ens.train(store.records(), settings.epochs, settings.seed)?;
    Ok(ens)
}

pub fn write_stats_csv(stats: &[WorkloadStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<WorkloadStats>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|s| s.map_err(Error::from)).collect()
}
