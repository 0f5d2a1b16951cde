//! Experiment configuration and the collect, train, evaluate pipeline.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{ClassifierRule, EnsembleModel, Routing, TrainSettings};
use crate::error::{Error, Result};
use crate::experience::{collect_chunk, ChunkMode, ChunkPolicy, ChunkStats, ExperienceStore};
use crate::harness::{
    evaluate, read_eval_summary, write_eval_rows, write_eval_summary, ArtifactMeta, EvalReport, EvalSummary, Harness,
    MeasurementProtocol, TimeoutPolicy,
};
use crate::hints::{HintCatalog, HintConfig};
use crate::model::{Architecture, LossKind, TrainConfig};
use crate::sim::{CatalogSpec, Query, QueryMix};
use crate::workload::{Environment, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub id: String,
    /// Catalog preset; defaults to `id`.
    #[serde(default)]
    pub preset: Option<String>,
    /// Explicit catalog knobs; overrides the preset.
    #[serde(default)]
    pub spec: Option<CatalogSpec>,
    #[serde(default)]
    pub mix: Option<QueryMix>,
    pub train_queries: usize,
    pub eval_queries: usize,
}

impl WorkloadConfig {
    pub fn new(id: &str, train_queries: usize, eval_queries: usize) -> Self {
        WorkloadConfig {
            id: id.to_string(),
            preset: None,
            spec: None,
            mix: None,
            train_queries,
            eval_queries,
        }
    }

    fn catalog_spec(&self) -> Result<CatalogSpec> {
        if let Some(s) = &self.spec {
            return Ok(s.clone());
        }
        let name = self.preset.as_deref().unwrap_or(&self.id);
        CatalogSpec::preset(name).ok_or_else(|| Error::Config(format!("no catalog preset `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub retrain_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub conv: Vec<usize>,
    pub hidden: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = Architecture::default();
        TrainingConfig {
            epochs: 30,
            retrain_epochs: 10,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            conv: a.conv,
            hidden: a.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Hint catalog file; the built-in catalog when absent.
    pub hint_config: Option<PathBuf>,
    pub loss: LossKind,
    /// `single`, `e1`..`e4` or `custom` (uses `rule`).
    pub ensemble: String,
    pub rule: ClassifierRule,
    pub timeout_ms: f64,
    pub eval_threshold: f64,
    pub max_pool: usize,
    pub measurement: MeasurementProtocol,
    pub first_chunk: ChunkMode,
    pub retrain_chunks: u32,
    /// Queries sampled per retrain chunk; 0 means all training queries.
    pub sample_size: usize,
    pub training: TrainingConfig,
    pub workloads: Vec<WorkloadConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seed: 7,
            hint_config: None,
            loss: LossKind::QError,
            ensemble: "custom".into(),
            rule: ClassifierRule::default(),
            timeout_ms: TimeoutPolicy::default().limit_ms,
            eval_threshold: 0.10,
            max_pool: 225,
            measurement: MeasurementProtocol::default(),
            first_chunk: ChunkMode::UnbiasedAllHintsets,
            retrain_chunks: 3,
            sample_size: 0,
            training: TrainingConfig::default(),
            workloads: vec![
                WorkloadConfig::new("tpch10", 30, 25),
                WorkloadConfig::new("jcch", 30, 25),
                WorkloadConfig::new("tpch1", 30, 25),
                WorkloadConfig::new("tpcds1", 30, 25),
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative hint config paths resolve against the config file.
        if let (Some(h), Some(dir)) = (cfg.hint_config.as_mut(), path.parent()) {
            if h.is_relative() {
                *h = dir.join(&*h);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workloads.is_empty() {
            return Err(Error::Config("at least one workload is required".into()));
        }
        if self.first_chunk == ChunkMode::SampledRetrain {
            return Err(Error::Config("the first chunk cannot be a retrain chunk".into()));
        }
        if !(0.0..1.0).contains(&self.eval_threshold) {
            return Err(Error::Config("eval_threshold must lie in [0, 1)".into()));
        }
        if self.max_pool == 0 {
            return Err(Error::Config("max_pool must be at least 1".into()));
        }
        TimeoutPolicy::new(self.timeout_ms)?;
        self.measurement.validate()?;
        Routing::named(&self.ensemble)?;
        let mut ids: Vec<&str> = self.workloads.iter().map(|w| w.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate workload id".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("configs always serialize");
        let d = Sha256::digest(json.as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn hint_catalog(&self) -> Result<HintCatalog> {
        match &self.hint_config {
            Some(p) => HintCatalog::new(HintConfig::load(p)?),
            None => Ok(HintCatalog::default_catalog()),
        }
    }

    pub fn routing(&self) -> Result<Routing> {
        match Routing::named(&self.ensemble)? {
            Routing::Rule { .. } => Ok(Routing::Rule {
                rule: self.rule.clone(),
            }),
            r => Ok(r),
        }
    }

    pub fn harness(&self) -> Result<Harness> {
        let mut h = Harness::new(self.seed);
        h.timeout = TimeoutPolicy::new(self.timeout_ms)?;
        h.protocol = self.measurement.clone();
        h.max_pool = self.max_pool;
        Ok(h)
    }

    pub fn train_settings(&self) -> TrainSettings {
        let t = &self.training;
        TrainSettings {
            arch: Architecture {
                conv: t.conv.clone(),
                hidden: t.hidden,
                ..Architecture::default()
            },
            loss: self.loss,
            train: TrainConfig {
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                clip_norm: t.clip_norm,
            },
            epochs: t.epochs,
            retrain_epochs: t.retrain_epochs,
            seed: self.seed,
        }
    }

    pub fn meta(&self, catalog_digest: &str) -> ArtifactMeta {
        ArtifactMeta {
            seed: self.seed,
            config_digest: self.digest(),
            catalog_digest: catalog_digest.to_string(),
            label: self.name.clone(),
        }
    }
}

/// Workloads plus disjoint training and evaluation queries.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub env: Environment,
    pub train: Vec<Query>,
    pub eval: Vec<Query>,
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let mut env = Environment::new(cfg.hint_catalog()?);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for wc in &cfg.workloads {
        let mix = wc.mix.clone().unwrap_or_default();
        let w = Workload::generate(&wc.id, wc.catalog_spec()?, mix, cfg.seed)?;
        train.extend(w.queries(0, wc.train_queries, cfg.seed));
        eval.extend(w.queries(wc.train_queries, wc.eval_queries, cfg.seed));
        env.add(w);
    }
    Ok(Corpus { env, train, eval })
}

/// Runs the first chunk, or a retrain chunk when `chunk_index > 0`.
pub fn collect(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    store: &mut ExperienceStore,
    chunk_index: u32,
    model: Option<&EnsembleModel>,
) -> Result<ChunkStats> {
    let harness = cfg.harness()?;
    let policy = if chunk_index == 0 {
        ChunkPolicy {
            mode: cfg.first_chunk,
            sample_size: 0,
        }
    } else {
        ChunkPolicy {
            mode: ChunkMode::SampledRetrain,
            sample_size: cfg.sample_size,
        }
    };
    let picker = model.map(|m| m as &dyn crate::harness::Picker);
    collect_chunk(&corpus.env, &harness, store, &corpus.train, policy, chunk_index, picker)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ensemble: EnsembleModel,
    pub chunks: Vec<ChunkStats>,
    pub report: EvalReport,
}

/// First chunk, initial training, retrain chunks, then evaluation on the
/// held-out queries.
pub fn run_pipeline(cfg: &ExperimentConfig, corpus: &Corpus, store: &mut ExperienceStore) -> Result<RunOutcome> {
    let first = collect(cfg, corpus, store, 0, None)?;
    let mut run = train_and_evaluate(cfg, corpus, store)?;
    run.chunks.insert(0, first);
    Ok(run)
}

/// Everything after the first chunk: initial training, retrain chunks and
/// evaluation.
pub fn train_and_evaluate(cfg: &ExperimentConfig, corpus: &Corpus, store: &mut ExperienceStore) -> Result<RunOutcome> {
    let settings = cfg.train_settings();
    let mut chunks = Vec::new();
    let mut ens = EnsembleModel::untrained(cfg.routing()?, &settings, &corpus.env);
    ens.max_pool = cfg.max_pool;
    ens.train(store.records(), settings.epochs, settings.seed)?;
    for c in 1..=cfg.retrain_chunks {
        chunks.push(collect(cfg, corpus, store, c, Some(&ens))?);
        ens.train(store.records(), settings.retrain_epochs, settings.seed)?;
    }
    let report = evaluate(&ens, &corpus.env, &cfg.harness()?, &corpus.eval, cfg.eval_threshold)?;
    Ok(RunOutcome {
        ensemble: ens,
        chunks,
        report,
    })
}

pub fn write_report(report: &EvalReport, meta: &ArtifactMeta, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let rows = dir.join("eval.csv");
    let summary = dir.join("summary.csv");
    let mut buf = Vec::new();
    write_eval_rows(report, meta, &mut buf)?;
    fs::write(&rows, buf)?;
    let mut buf = Vec::new();
    write_eval_summary(&report.summary, meta, &mut buf)?;
    fs::write(&summary, buf)?;
    Ok((rows, summary))
}

pub fn read_summary(path: &Path) -> Result<(ArtifactMeta, EvalSummary)> {
    let f = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    read_eval_summary(&mut BufReader::new(f))
}

/// Comparison table over several runs' summaries. Refuses runs recorded
/// under different hint catalogs.
pub fn compare_runs(runs: &[(ArtifactMeta, EvalSummary)]) -> Result<String> {
    let Some((first, _)) = runs.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    if let Some((m, _)) = runs.iter().find(|(m, _)| m.catalog_digest != first.catalog_digest) {
        return Err(Error::DigestMismatch {
            expected: first.catalog_digest.clone(),
            found: m.catalog_digest.clone(),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run",
        "seed",
        "config_digest",
        "n",
        "improved_pct",
        "regressed_pct",
        "neutral_pct",
        "no_hint_pct",
        "short_improved_pct",
        "long_improved_pct",
        "short_long_gap",
        "median_qloss",
        "mean_qloss",
        "q90_qloss",
    ])?;
    for (m, s) in runs {
        let f = |v: f64| format!("{v:.6}");
        w.write_record([
            m.label.clone(),
            m.seed.to_string(),
            m.config_digest.clone(),
            s.n.to_string(),
            f(s.improved_pct),
            f(s.regressed_pct),
            f(s.neutral_pct),
            f(s.no_hint_pct),
            f(s.short_improved_pct),
            f(s.long_improved_pct),
            f(s.short_long_gap),
            f(s.median_qloss),
            f(s.mean_qloss),
            f(s.q90_qloss),
        ])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is utf-8");
    let mut out = format!("# catalog_digest={}\n", first.catalog_digest);
    out.push_str(&body);
    Ok(out)
}

/// Describes how to draw a comparison CSV.
pub fn plot_sidecar(csv_name: &str, title: &str, x: &str, series: &[&str]) -> String {
    let v = serde_json::json!({
        "source": csv_name,
        "title": title,
        "kind": "grouped-bar",
        "x": x,
        "series": series,
        "comment_prefix": "#",
    });
    serde_json::to_string_pretty(&v).expect("json values serialize")
}

/// Workloads of the small, medium and large training scopes. The first
/// workload is the evaluation target.
pub const SCOPES: [(&str, &[&str]); 3] = [
    ("S", &["job"]),
    ("M", &["job", "tpcds1", "tpcds10", "stack"]),
    (
        "L",
        &[
            "job",
            "tpcds1",
            "tpcds10",
            "stack",
            "tpch1",
            "tpch10",
            "tpch100",
            "jcch",
            "corporate",
        ],
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ScopeResult {
    pub scope: String,
    pub workloads: usize,
    pub train_queries: usize,
    pub summary: EvalSummary,
}

/// Trains one single model per scope with a fixed total training budget
/// and evaluates each on the same unseen target-workload queries.
pub fn scope_experiment(base: &ExperimentConfig, total_train: usize, eval_queries: usize) -> Result<Vec<ScopeResult>> {
    let mut out = Vec::new();
    for (name, ids) in SCOPES {
        let per = (total_train / ids.len()).max(1);
        let mut cfg = base.clone();
        cfg.name = format!("scope-{name}");
        cfg.ensemble = "single".into();
        cfg.workloads = ids
            .iter()
            .enumerate()
            .map(|(i, id)| WorkloadConfig::new(id, per, if i == 0 { eval_queries } else { 0 }))
            .collect();
        let corpus = build_corpus(&cfg)?;
        let mut store = ExperienceStore::in_memory(corpus.env.hints.digest());
        let run = run_pipeline(&cfg, &corpus, &mut store)?;
        out.push(ScopeResult {
            scope: name.to_string(),
            workloads: ids.len(),
            train_queries: corpus.train.len(),
            summary: run.report.summary,
        });
    }
    Ok(out)
}

pub fn scope_csv(results: &[ScopeResult], meta: &ArtifactMeta) -> Result<String> {
    let mut buf = Vec::new();
    meta.write_header(&mut buf)?;
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "scope",
        "workloads",
        "train_queries",
        "improved_pct",
        "regressed_pct",
        "no_hint_pct",
        "median_qloss",
        "mean_qloss",
        "q90_qloss",
    ])?;
    for r in results {
        let s = &r.summary;
        w.write_record([
            r.scope.clone(),
            r.workloads.to_string(),
            r.train_queries.to_string(),
            format!("{:.6}", s.improved_pct),
            format!("{:.6}", s.regressed_pct),
            format!("{:.6}", s.no_hint_pct),
            format!("{:.6}", s.median_qloss),
            format!("{:.6}", s.mean_qloss),
            format!("{:.6}", s.q90_qloss),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.digest(), ExperimentConfig::from_toml(&text).unwrap().digest());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.ensemble = "e7".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.first_chunk = ChunkMode::SampledRetrain;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn corpus_splits_train_and_eval() {
        let mut cfg = ExperimentConfig::default();
        cfg.workloads = vec![WorkloadConfig::new("tpch1", 3, 2)];
        let c = build_corpus(&cfg).unwrap();
        assert_eq!((c.train.len(), c.eval.len()), (3, 2));
        assert!(c.train.iter().all(|t| c.eval.iter().all(|e| e.id != t.id)));
    }

    #[test]
    fn compare_refuses_mixed_catalogs() {
        let a = (
            ArtifactMeta {
                catalog_digest: "x".into(),
                ..Default::default()
            },
            EvalSummary::default(),
        );
        let mut b = a.clone();
        b.0.catalog_digest = "y".into();
        assert!(compare_runs(&[a.clone(), a.clone()]).is_ok());
        assert!(matches!(compare_runs(&[a, b]), Err(Error::DigestMismatch { .. })));
    }
}
