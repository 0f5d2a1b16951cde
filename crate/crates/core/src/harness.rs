//! Execution mechanics: reward measurement, timeouts, parallel compilation
//! and evaluation reports.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hints::HintCatalog;
use crate::model::loss::{qerror, quantile, EPSILON};
use crate::seed;
use crate::sim::{CompiledPlan, Compiler, Executor, Query, TrueCostModel};
use crate::workload::Environment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementProtocol {
    pub warmups: u32,
    pub measured_runs: u32,
    pub clear_cache_first: bool,
}

impl Default for MeasurementProtocol {
    fn default() -> Self {
        MeasurementProtocol {
            warmups: 3,
            measured_runs: 3,
            clear_cache_first: true,
        }
    }
}

impl MeasurementProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.measured_runs == 0 {
            return Err(Error::Config("measured_runs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Simulated-time limit for a single execution, in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeoutPolicy {
    pub limit_ms: f64,
}

impl Default for TimeoutPolicy {
    fn default() -> Self {
        TimeoutPolicy { limit_ms: 20_000.0 }
    }
}

impl TimeoutPolicy {
    pub fn new(limit_ms: f64) -> Result<Self> {
        if !(limit_ms > 0.0 && limit_ms.is_finite()) {
            return Err(Error::Config(format!("timeout must be positive, got {limit_ms}")));
        }
        Ok(TimeoutPolicy { limit_ms })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    Reward(f64),
    Timeout,
}

impl Measurement {
    pub fn reward(self) -> Option<f64> {
        match self {
            Measurement::Reward(r) => Some(r),
            Measurement::Timeout => None,
        }
    }
}

/// Runs warmups then averages the measured runs. Stops at the first
/// execution that exceeds the limit.
pub fn measure_reward(
    plan: &CompiledPlan,
    executor: &mut Executor,
    protocol: &MeasurementProtocol,
    timeout: &TimeoutPolicy,
    run_seed: u64,
) -> Measurement {
    if protocol.clear_cache_first {
        executor.clear_cache();
    }
    let mut sum = 0.0;
    let total = protocol.warmups + protocol.measured_runs;
    for i in 0..total {
        let t = executor.execute(plan, seed::derive_ints(run_seed, &[u64::from(i)]));
        if t > timeout.limit_ms {
            return Measurement::Timeout;
        }
        if i >= protocol.warmups {
            sum += t;
        }
    }
    Measurement::Reward(sum / f64::from(protocol.measured_runs.max(1)))
}

/// Maps `f` over `0..n` with at most `max_pool` calls in flight. Output is
/// in index order.
pub fn parallel_map<T, F>(n: usize, max_pool: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = max_pool.max(1).min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|v| v.expect("every index was mapped"))
        .collect()
}

/// Compiles `query` under every hintset in the catalog.
pub fn parallel_compile(
    compiler: &Compiler<'_>,
    query: &Query,
    hints: &HintCatalog,
    max_pool: usize,
) -> Result<Vec<(usize, CompiledPlan)>> {
    if max_pool == 0 {
        return Err(Error::Config("max_pool must be at least 1".into()));
    }
    let sets = hints.sets();
    parallel_map(sets.len(), max_pool, |i| {
        compiler.compile(query, &sets[i]).map_err(|e| Error::Compile {
            hintset: sets[i].id,
            source: Box::new(e),
        })
    })
    .into_iter()
    .enumerate()
    .map(|(i, r)| r.map(|p| (sets[i].id, p)))
    .collect()
}

/// Execution settings shared by collection and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harness {
    pub protocol: MeasurementProtocol,
    pub timeout: TimeoutPolicy,
    pub max_pool: usize,
    pub cost_model: TrueCostModel,
    pub seed: u64,
}

impl Harness {
    pub fn new(seed: u64) -> Self {
        Harness {
            protocol: MeasurementProtocol::default(),
            timeout: TimeoutPolicy::default(),
            max_pool: 225,
            cost_model: TrueCostModel::default(),
            seed,
        }
    }

    /// Measures one plan on a fresh simulator instance. Run noise is keyed
    /// by query and plan, so the result does not depend on call order.
    pub fn measure(&self, query: &Query, plan: &CompiledPlan) -> Measurement {
        let mut executor = Executor::new(self.cost_model.clone());
        let run_seed = seed::derive_ints(seed::derive(self.seed, query.id.as_bytes()), &[plan.plan_hash().0]);
        measure_reward(plan, &mut executor, &self.protocol, &self.timeout, run_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Improved,
    Regressed,
    Neutral,
    NoHint,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Improved => "improved",
            Label::Regressed => "regressed",
            Label::Neutral => "neutral",
            Label::NoHint => "no-hint",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "improved" => Ok(Label::Improved),
            "regressed" => Ok(Label::Regressed),
            "neutral" => Ok(Label::Neutral),
            "no-hint" => Ok(Label::NoHint),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

/// Labels one evaluated query. `chosen` is `None` when the chosen plan
/// timed out.
pub fn label(chosen_hintset: usize, no_hint: f64, chosen: Option<f64>, threshold: f64) -> Label {
    if chosen_hintset == 0 {
        return Label::NoHint;
    }
    match chosen {
        None => Label::Regressed,
        Some(c) if c <= (1.0 - threshold) * no_hint => Label::Improved,
        Some(c) if c >= (1.0 + threshold) * no_hint => Label::Regressed,
        Some(_) => Label::Neutral,
    }
}

/// A hintset choice for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Pick {
    pub hintset_id: usize,
    pub predicted_reward: f64,
    /// Name of the model that made the choice.
    pub class: String,
}

/// Anything that chooses a hintset for a query.
pub trait Picker {
    fn pick(&self, env: &Environment, query: &Query) -> Result<Pick>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub query_id: String,
    pub class: String,
    pub no_hint_reward: f64,
    pub no_hint_timed_out: bool,
    pub chosen_hintset: usize,
    pub chosen_reward: f64,
    pub chosen_timed_out: bool,
    pub predicted_reward: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub improved: usize,
    pub regressed: usize,
    pub neutral: usize,
    pub no_hint: usize,
    pub timeouts: usize,
    pub improved_pct: f64,
    pub regressed_pct: f64,
    pub neutral_pct: f64,
    pub no_hint_pct: f64,
    pub short_improved_pct: f64,
    pub long_improved_pct: f64,
    pub short_regressed_pct: f64,
    pub long_regressed_pct: f64,
    /// `|short_improved_pct - long_improved_pct|`.
    pub short_long_gap: f64,
    pub median_qloss: f64,
    pub mean_qloss: f64,
    pub q90_qloss: f64,
    pub total_no_hint_ms: f64,
    pub total_chosen_ms: f64,
}

impl EvalSummary {
    const FIELDS: [&'static str; 20] = [
        "n",
        "improved",
        "regressed",
        "neutral",
        "no_hint",
        "timeouts",
        "improved_pct",
        "regressed_pct",
        "neutral_pct",
        "no_hint_pct",
        "short_improved_pct",
        "long_improved_pct",
        "short_regressed_pct",
        "long_regressed_pct",
        "short_long_gap",
        "median_qloss",
        "mean_qloss",
        "q90_qloss",
        "total_no_hint_ms",
        "total_chosen_ms",
    ];

    fn values(&self) -> [f64; 20] {
        [
            self.n as f64,
            self.improved as f64,
            self.regressed as f64,
            self.neutral as f64,
            self.no_hint as f64,
            self.timeouts as f64,
            self.improved_pct,
            self.regressed_pct,
            self.neutral_pct,
            self.no_hint_pct,
            self.short_improved_pct,
            self.long_improved_pct,
            self.short_regressed_pct,
            self.long_regressed_pct,
            self.short_long_gap,
            self.median_qloss,
            self.mean_qloss,
            self.q90_qloss,
            self.total_no_hint_ms,
            self.total_chosen_ms,
        ]
    }

    fn from_values(v: &[f64; 20]) -> Self {
        EvalSummary {
            n: v[0] as usize,
            improved: v[1] as usize,
            regressed: v[2] as usize,
            neutral: v[3] as usize,
            no_hint: v[4] as usize,
            timeouts: v[5] as usize,
            improved_pct: v[6],
            regressed_pct: v[7],
            neutral_pct: v[8],
            no_hint_pct: v[9],
            short_improved_pct: v[10],
            long_improved_pct: v[11],
            short_regressed_pct: v[12],
            long_regressed_pct: v[13],
            short_long_gap: v[14],
            median_qloss: v[15],
            mean_qloss: v[16],
            q90_qloss: v[17],
            total_no_hint_ms: v[18],
            total_chosen_ms: v[19],
        }
    }

    pub fn from_rows(rows: &[EvalRow]) -> Result<Self> {
        let n = rows.len();
        let pct = |k: usize, of: usize| if of == 0 { 0.0 } else { 100.0 * k as f64 / of as f64 };
        let count = |l: Label| rows.iter().filter(|r| r.label == l).count();
        let mut s = EvalSummary {
            n,
            improved: count(Label::Improved),
            regressed: count(Label::Regressed),
            neutral: count(Label::Neutral),
            no_hint: count(Label::NoHint),
            timeouts: rows.iter().filter(|r| r.chosen_timed_out).count(),
            ..Default::default()
        };
        s.improved_pct = pct(s.improved, n);
        s.regressed_pct = pct(s.regressed, n);
        s.neutral_pct = pct(s.neutral, n);
        s.no_hint_pct = pct(s.no_hint, n);

        let mut nh: Vec<f64> = rows.iter().map(|r| r.no_hint_reward).collect();
        nh.sort_by(f64::total_cmp);
        let median = quantile(&nh, 0.5);
        let (short, long): (Vec<&EvalRow>, Vec<&EvalRow>) = rows.iter().partition(|r| r.no_hint_reward <= median);
        let share = |part: &[&EvalRow], l: Label| pct(part.iter().filter(|r| r.label == l).count(), part.len());
        s.short_improved_pct = share(&short, Label::Improved);
        s.long_improved_pct = share(&long, Label::Improved);
        s.short_regressed_pct = share(&short, Label::Regressed);
        s.long_regressed_pct = share(&long, Label::Regressed);
        s.short_long_gap = (s.short_improved_pct - s.long_improved_pct).abs();

        let mut q = rows
            .iter()
            .map(|r| qerror(r.predicted_reward.max(EPSILON), r.chosen_reward))
            .collect::<Result<Vec<_>>>()?;
        q.sort_by(f64::total_cmp);
        if !q.is_empty() {
            s.mean_qloss = q.iter().sum::<f64>() / q.len() as f64;
        }
        s.median_qloss = quantile(&q, 0.5);
        s.q90_qloss = quantile(&q, 0.9);
        s.total_no_hint_ms = rows.iter().map(|r| r.no_hint_reward).sum();
        s.total_chosen_ms = rows.iter().map(|r| r.chosen_reward).sum();
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

/// Measures the picked hintset and the no-hint plan for every query.
/// Never touches an experience store.
pub fn evaluate(
    picker: &dyn Picker,
    env: &Environment,
    harness: &Harness,
    queries: &[Query],
    threshold: f64,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let pick = picker.pick(env, q)?;
        let compiler = env.compiler(&q.workload_id)?;
        let hs = |id: usize| {
            env.hints
                .get(id)
                .ok_or_else(|| Error::Config(format!("hintset {id} is not in the catalog")))
        };
        let base = compiler.compile(q, hs(0)?)?;
        let limit = harness.timeout.limit_ms;
        let nh = harness.measure(q, &base).reward();
        let chosen = if pick.hintset_id == 0 {
            nh
        } else {
            let plan = compiler.compile(q, hs(pick.hintset_id)?)?;
            harness.measure(q, &plan).reward()
        };
        let no_hint_reward = nh.unwrap_or(limit);
        rows.push(EvalRow {
            query_id: q.id.clone(),
            class: pick.class,
            no_hint_reward,
            no_hint_timed_out: nh.is_none(),
            chosen_hintset: pick.hintset_id,
            chosen_reward: chosen.unwrap_or(limit),
            chosen_timed_out: chosen.is_none(),
            predicted_reward: pick.predicted_reward,
            label: label(pick.hintset_id, no_hint_reward, chosen, threshold),
        });
    }
    let summary = EvalSummary::from_rows(&rows)?;
    Ok(EvalReport { rows, summary })
}

/// Provenance embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub config_digest: String,
    pub catalog_digest: String,
    pub label: String,
}

impl ArtifactMeta {
    pub fn write_header(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# config_digest={}", self.config_digest)?;
        writeln!(w, "# catalog_digest={}", self.catalog_digest)?;
        writeln!(w, "# label={}", self.label)?;
        Ok(())
    }

    /// Reads `# key=value` lines; stops at the first other line.
    pub fn read_header(text: &str) -> Result<Self> {
        let mut m = ArtifactMeta::default();
        for line in text.lines() {
            let Some(kv) = line.strip_prefix("# ") else { break };
            let Some((k, v)) = kv.split_once('=') else { continue };
            match k {
                "seed" => m.seed = v.parse().map_err(|_| Error::Config(format!("bad seed `{v}`")))?,
                "config_digest" => m.config_digest = v.to_string(),
                "catalog_digest" => m.catalog_digest = v.to_string(),
                "label" => m.label = v.to_string(),
                _ => {}
            }
        }
        Ok(m)
    }
}

pub fn write_eval_rows(report: &EvalReport, meta: &ArtifactMeta, w: &mut dyn Write) -> Result<()> {
    meta.write_header(w)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "query_id",
        "class",
        "no_hint_reward",
        "chosen_hintset",
        "chosen_reward",
        "predicted_reward",
        "label",
    ])?;
    for r in &report.rows {
        csv.write_record([
            r.query_id.clone(),
            r.class.clone(),
            format!("{:.6}", r.no_hint_reward),
            r.chosen_hintset.to_string(),
            format!("{:.6}", r.chosen_reward),
            format!("{:.6}", r.predicted_reward),
            r.label.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_eval_summary(summary: &EvalSummary, meta: &ArtifactMeta, w: &mut dyn Write) -> Result<()> {
    meta.write_header(w)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["metric", "value"])?;
    for (k, v) in EvalSummary::FIELDS.iter().zip(summary.values()) {
        csv.write_record([k.to_string(), format!("{v:.6}")])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_eval_summary(r: &mut dyn BufRead) -> Result<(ArtifactMeta, EvalSummary)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let meta = ArtifactMeta::read_header(&text)?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut values = [0.0; 20];
    let mut seen = [false; 20];
    let mut csv = csv::Reader::from_reader(body.as_bytes());
    for rec in csv.records() {
        let rec = rec?;
        let (Some(k), Some(v)) = (rec.get(0), rec.get(1)) else {
            continue;
        };
        if let Some(i) = EvalSummary::FIELDS.iter().position(|f| *f == k) {
            values[i] = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {k}: `{v}`")))?;
            seen[i] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!(
            "summary is missing `{}`",
            EvalSummary::FIELDS[i]
        )));
    }
    Ok((meta, EvalSummary::from_values(&values)))
}
