//! Batch stages: ingest, index, filter, evaluate, check, report.
//!
//! Stages talk only through files under the output directory. Each completed
//! stage leaves a manifest in `manifests/`; a rerun whose inputs hash the same
//! is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checker::{check_answer, CheckConfig, CheckResult};
use crate::corpus::{AmbiguityLabel, CorpusStore, DatasetId, QueryRecord, SchemaMap, SplitFlag};
use crate::filtering::{
    adjudication_kappa, build_ambiguity_subset, difficulty_filter, load_adjudications, load_signals,
    retrieval_independent_filter, run_prefilter, AmbiguityRecord, AmbiguitySource, AmbiguitySubset,
    DifficultyOutcome, FilterConfig, Partition, PrefilterVerdict,
};
use crate::judges::{
    compose_prompt, encode_image, Backend, BackendConfig, BackendKind, PromptConfig, Request, Task,
};
use crate::metrics::{rouge_l, score_short, EmRule};
use crate::reporting::{
    aggregate_runs, ambiguity_delta_report, emit_report, hash_bytes, hash_path, render_claim_table,
    render_cross_modality_table, render_dataset_stats, render_delta_table, render_end_task_table,
    render_mode_table, write_file, RecordOutcome, ReportFormat, ReportKey, RunManifest,
};
use crate::retrieval::{Caps, DistractorSelection, EmbeddingStore, EvidencePack, PackBuilder, RetrievalMode};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("missing {}: run {prior} first", artifact.display())]
    MissingArtifact { artifact: PathBuf, prior: &'static str },
    #[error("{stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Index,
    Filter,
    Evaluate,
    Check,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Index,
        Stage::Filter,
        Stage::Evaluate,
        Stage::Check,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Filter => "filter",
            Stage::Evaluate => "evaluate",
            Stage::Check => "check",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stage(Stage),
    All,
}

impl Command {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            Command::Stage(s) => vec![s],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub dataset: DatasetId,
    pub records: PathBuf,
    #[serde(default)]
    pub schema: SchemaMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Evidence manifest, one EvidenceItem per line.
    pub evidence: PathBuf,
    pub sources: Vec<SourceConfig>,
    /// Difficulty signals for the second filter stage.
    #[serde(default)]
    pub signals: Option<PathBuf>,
    /// Ambiguity adjudication records.
    #[serde(default)]
    pub adjudications: Option<PathBuf>,
    /// Ask the judge backend for CLEAR/AMBIGUOUS pre-filter labels.
    #[serde(default)]
    pub run_prefilter: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_model() -> String {
    "system".into()
}

fn default_modes() -> Vec<RetrievalMode> {
    RetrievalMode::ALL.to_vec()
}

fn default_splits() -> Vec<SplitFlag> {
    vec![SplitFlag::Filtered, SplitFlag::Full]
}

fn default_prompts() -> Vec<String> {
    vec![PromptConfig::default().label()]
}

fn default_inflight() -> usize {
    4
}

fn default_target() -> usize {
    200
}

fn default_judge() -> BackendConfig {
    BackendConfig::of_kind(BackendKind::RuleBased)
}

fn modes_from_names<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<RetrievalMode>, D::Error> {
    Vec::<String>::deserialize(d)?
        .iter()
        .map(|s| RetrievalMode::from_str(s).map_err(serde::de::Error::custom))
        .collect()
}

/// Declarative pipeline settings. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Name of the system under test, used as the report's model column.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_modes", deserialize_with = "modes_from_names")]
    pub modes: Vec<RetrievalMode>,
    #[serde(default = "default_splits")]
    pub splits: Vec<SplitFlag>,
    /// Prompt labels such as `expert1-direct`; `grid` expands to the 12-config grid.
    #[serde(default = "default_prompts")]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default)]
    pub selection: DistractorSelection,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default)]
    pub reference_channel: bool,
    #[serde(default)]
    pub em_rule: EmRule,
    #[serde(default)]
    pub em_rules: BTreeMap<DatasetId, EmRule>,
    #[serde(default = "default_target")]
    pub ambiguity_target: usize,
    pub corpus: CorpusConfig,
    pub embeddings: PathBuf,
    #[serde(default = "default_judge")]
    pub judge: BackendConfig,
    pub system: BackendConfig,
    #[serde(default)]
    pub filter: FilterConfig,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<RetrievalMode>,
    pub split: Option<SplitFlag>,
    pub backend: Option<BackendKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub max_inflight: Option<usize>,
}

impl PipelineConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config {
            path: origin.to_string(),
            message: e.to_string().trim_end().to_string(),
        })
    }

    /// Reads, resolves relative paths, applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, PipelineError> {
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config {
            path: origin.clone(),
            message: e.to_string(),
        })?;
        let mut config = Self::parse(&text, &origin)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        config.resolve_paths(base);
        config.apply(overrides);
        config.validate().map_err(|message| PipelineError::Config { path: origin, message })?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.corpus.evidence);
        for s in &mut self.corpus.sources {
            fix(&mut s.records);
        }
        for p in [&mut self.corpus.signals, &mut self.corpus.adjudications].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.embeddings);
        for b in [&mut self.judge, &mut self.system] {
            for p in [&mut b.cache_dir, &mut b.answers].into_iter().flatten() {
                fix(p);
            }
        }
    }

    /// `--backend` sets the judge kind. Replay also switches a system that
    /// has a recorded cache; rule judges cannot stand in for a system.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.modes = vec![m];
        }
        if let Some(s) = o.split {
            self.splits = vec![s];
        }
        if let Some(kind) = o.backend {
            self.judge.kind = kind;
            if kind == BackendKind::Replay && self.system.cache_dir.is_some() {
                self.system.kind = BackendKind::Replay;
            }
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(n) = o.max_inflight {
            self.max_inflight = n;
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_inflight == 0 {
            return Err("max_inflight must be at least 1".into());
        }
        if self.modes.is_empty() {
            return Err("no retrieval modes selected".into());
        }
        if self.corpus.sources.is_empty() {
            return Err("corpus.sources is empty".into());
        }
        if self.model.trim().is_empty() || self.model.contains(['/', '\\']) {
            return Err(format!("invalid model name {:?}", self.model));
        }
        self.prompt_configs()?;
        self.judge.validate().map_err(|e| format!("judge: {e}"))?;
        self.system.validate().map_err(|e| format!("system: {e}"))?;
        if self.system.kind == BackendKind::RuleBased {
            return Err("system: the rule backend cannot generate answers".into());
        }
        self.filter.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Prompt configurations in config order, duplicates removed.
    pub fn prompt_configs(&self) -> Result<Vec<PromptConfig>, String> {
        let mut out: Vec<PromptConfig> = Vec::new();
        for label in &self.prompts {
            let expanded = if label == "grid" {
                PromptConfig::grid()
            } else {
                vec![PromptConfig::from_str(label)?]
            };
            for p in expanded {
                p.validate()?;
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        if out.is_empty() {
            return Err("no prompt configurations selected".into());
        }
        Ok(out)
    }

    pub fn em_rule_for(&self, dataset: DatasetId) -> EmRule {
        self.em_rules.get(&dataset).copied().unwrap_or(self.em_rule)
    }
}

/// Splits a system response into its short and long answers.
pub fn parse_answer(text: &str) -> Result<(String, String), String> {
    let s = text.find("SHORT:").ok_or("response lacks the SHORT: section")?;
    let l = text[s..]
        .find("LONG:")
        .map(|i| s + i)
        .ok_or("response lacks a LONG: section after SHORT:")?;
    let short = text[s + "SHORT:".len()..l].trim();
    let long = text[l + "LONG:".len()..].trim();
    if short.is_empty() {
        return Err("empty short answer".into());
    }
    Ok((short.to_string(), long.to_string()))
}

/// One generated answer, or why there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerLine {
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long: Option<String>,
    /// `generation_error: ...` or `pack_error: ...`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackLine {
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pack: Option<EvidencePack>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<CheckResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-record outcome of the filter stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLabel {
    pub record_id: String,
    pub dataset: DatasetId,
    pub filtered: bool,
    pub ambiguity_label: AmbiguityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub stage1: Partition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<DifficultyOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

/// Answers for one (mode, prompt) run. Prompts go through `compose_prompt`;
/// unparseable responses become `generation_error` lines.
pub fn generate_answers(
    records: &[&QueryRecord],
    packs: &BTreeMap<String, EvidencePack>,
    prompt: &PromptConfig,
    backend: &dyn Backend,
) -> Vec<AnswerLine> {
    let label = prompt.label();
    records
        .par_iter()
        .map(|r| {
            let fail = |e: String| AnswerLine {
                record_id: r.record_id.clone(),
                short: None,
                long: None,
                error: Some(e),
            };
            let Some(pack) = packs.get(&r.record_id) else {
                return fail("pack_error: no evidence pack".into());
            };
            let text = compose_prompt(prompt, Some(r.dataset_id.domain()), &r.question, pack);
            let mut request = Request::new(Task::Generate, text)
                .input("record_id", r.record_id.clone())
                .input("mode", pack.mode.short_name().to_ascii_lowercase())
                .input("prompt", label.clone());
            if backend.needs_images() {
                for item in &pack.images {
                    match encode_image(&item.item) {
                        Ok(b64) => request.images.push(b64),
                        Err(e) => return fail(format!("generation_error: {e}")),
                    }
                }
            }
            let parsed = backend
                .call(&request)
                .map_err(|e| e.to_string())
                .and_then(|resp| resp.answer.ok_or_else(|| "response has no answer".to_string()))
                .and_then(|a| parse_answer(&a));
            match parsed {
                Ok((short, long)) => AnswerLine {
                    record_id: r.record_id.clone(),
                    short: Some(short),
                    long: Some(long),
                    error: None,
                },
                Err(e) => {
                    log::warn!("generation_error for {}: {e}", r.record_id);
                    fail(format!("generation_error: {e}"))
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

fn mode_dir(mode: RetrievalMode) -> String {
    mode.short_name().to_ascii_lowercase()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), String> {
    let mut body = String::new();
    for row in rows {
        body.push_str(&serde_json::to_string(row).map_err(|e| e.to_string())?);
        body.push('\n');
    }
    write_file(path, &body).map_err(|e| e.to_string())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let body = serde_json::to_string_pretty(value).map_err(|e| e.to_string())? + "\n";
    write_file(path, &body).map_err(|e| e.to_string())
}

fn hash_json(value: &serde_json::Value) -> String {
    hash_bytes(value.to_string().as_bytes())
}

fn opt_hash(path: Option<&PathBuf>) -> String {
    path.map_or_else(|| "none".into(), |p| hash_path(p))
}

/// A recording cache only memoizes its backend; its contents are an input
/// only when replayed.
fn cache_hash(backend: &BackendConfig) -> String {
    if backend.kind == BackendKind::Replay {
        opt_hash(backend.cache_dir.as_ref())
    } else {
        "none".into()
    }
}

fn kind_name(kind: BackendKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// A configured run over one output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Pipeline { config }
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    fn corpus_dir(&self) -> PathBuf {
        self.out("corpus")
    }

    fn index_file(&self) -> PathBuf {
        self.out("index/embeddings.txt")
    }

    fn packs_file(&self, mode: RetrievalMode) -> PathBuf {
        self.out(&format!("packs/{}.jsonl", mode_dir(mode)))
    }

    fn answers_file(&self, mode: RetrievalMode, prompt: &str) -> PathBuf {
        self.out(&format!("answers/{}/{prompt}.jsonl", mode_dir(mode)))
    }

    fn checks_file(&self, mode: RetrievalMode, prompt: &str) -> PathBuf {
        self.out(&format!("checks/{}/{prompt}.jsonl", mode_dir(mode)))
    }

    fn manifest_file(&self, stage: Stage) -> PathBuf {
        self.out(&format!("manifests/{stage}.json"))
    }

    fn stage_output(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Ingest => self.corpus_dir(),
            Stage::Index => self.index_file(),
            Stage::Filter => self.out("filter"),
            Stage::Evaluate => self.out("answers"),
            Stage::Check => self.out("checks"),
            Stage::Report => self.out("reports"),
        }
    }

    fn prompts(&self) -> Vec<PromptConfig> {
        self.config.prompt_configs().expect("validated")
    }

    fn manifest(&self, stage: Stage) -> RunManifest {
        let c = &self.config;
        let prompts: Vec<String> = self.prompts().iter().map(PromptConfig::label).collect();
        let corpus = hash_path(&self.corpus_dir());
        let none = || "none".to_string();
        let judge_cache = cache_hash(&c.judge);
        match stage {
            Stage::Ingest => {
                let mut parts = vec![hash_path(&c.corpus.evidence)];
                parts.extend(c.corpus.sources.iter().map(|s| hash_path(&s.records)));
                RunManifest::new(
                    "ingest",
                    hash_json(&json!(c.corpus)),
                    hash_bytes(parts.join("\n").as_bytes()),
                    none(),
                    none(),
                    vec![],
                    &[],
                )
            }
            Stage::Index => RunManifest::new(
                "index",
                hash_json(&json!(c.embeddings)),
                corpus,
                hash_path(&c.embeddings),
                none(),
                vec![],
                &[],
            ),
            Stage::Filter => RunManifest::new(
                "filter",
                hash_json(&json!({
                    "filter": c.filter,
                    "corpus": c.corpus,
                    "target": c.ambiguity_target,
                    "seed": c.seed,
                    "judge": c.judge,
                })),
                corpus,
                none(),
                judge_cache,
                vec![kind_name(c.judge.kind)],
                &[
                    &opt_hash(c.corpus.signals.as_ref()),
                    &opt_hash(c.corpus.adjudications.as_ref()),
                ],
            ),
            Stage::Evaluate => RunManifest::new(
                "evaluate",
                hash_json(&json!({
                    "modes": c.modes,
                    "prompts": prompts,
                    "caps": c.caps,
                    "selection": c.selection,
                    "seed": c.seed,
                    "system": c.system,
                    "model": c.model,
                })),
                corpus,
                hash_path(&self.index_file()),
                format!(
                    "{}:{}",
                    cache_hash(&c.system),
                    opt_hash(c.system.answers.as_ref())
                ),
                vec![kind_name(c.system.kind)],
                &[],
            ),
            Stage::Check => RunManifest::new(
                "check",
                hash_json(&json!({
                    "modes": c.modes,
                    "prompts": prompts,
                    "reference_channel": c.reference_channel,
                    "judge": c.judge,
                })),
                corpus,
                none(),
                judge_cache,
                vec![kind_name(c.judge.kind)],
                &[&hash_path(&self.out("packs")), &hash_path(&self.out("answers"))],
            ),
            Stage::Report => RunManifest::new(
                "report",
                hash_json(&json!({
                    "modes": c.modes,
                    "prompts": prompts,
                    "splits": c.splits,
                    "model": c.model,
                    "em_rule": c.em_rule,
                    "em_rules": c.em_rules,
                })),
                corpus,
                none(),
                none(),
                vec![],
                &[
                    &hash_path(&self.out("filter")),
                    &hash_path(&self.out("answers")),
                    &hash_path(&self.out("checks")),
                ],
            ),
        }
    }

    /// Runs every stage of `command` in order inside a pool of
    /// `max_inflight` workers.
    pub fn run(&self, command: Command) -> Result<Vec<(Stage, StageStatus)>, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.max_inflight)
            .build()
            .map_err(|e| PipelineError::Config {
                path: "max_inflight".into(),
                message: e.to_string(),
            })?;
        pool.install(|| {
            command
                .stages()
                .into_iter()
                .map(|s| self.run_stage(s).map(|status| (s, status)))
                .collect()
        })
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageStatus, PipelineError> {
        self.check_prerequisites(stage)?;
        let manifest = self.manifest(stage);
        let manifest_path = self.manifest_file(stage);
        let previous: Option<RunManifest> = fs::read_to_string(&manifest_path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        if previous.is_some_and(|p| p.inputs_hash == manifest.inputs_hash) && self.stage_output(stage).exists() {
            log::info!("{stage}: inputs unchanged, skipping");
            return Ok(StageStatus::Skipped);
        }
        log::info!("{stage}: running");
        let fail = |message: String| PipelineError::Stage { stage, message };
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Index => self.index(),
            Stage::Filter => self.filter(),
            Stage::Evaluate => self.evaluate(),
            Stage::Check => self.check(),
            Stage::Report => self.report(),
        }
        .map_err(fail)?;
        write_json(&manifest_path, &manifest).map_err(fail)?;
        Ok(StageStatus::Ran)
    }

    fn require(&self, path: PathBuf, prior: &'static str) -> Result<(), PipelineError> {
        if path.exists() {
            Ok(())
        } else {
            Err(PipelineError::MissingArtifact { artifact: path, prior })
        }
    }

    /// The stage's own inputs are checked before the corpus, so the error
    /// names the nearest missing stage.
    fn check_prerequisites(&self, stage: Stage) -> Result<(), PipelineError> {
        match stage {
            Stage::Evaluate => self.require(self.index_file(), "index")?,
            Stage::Check => {
                for mode in &self.config.modes {
                    self.require(self.packs_file(*mode), "evaluate")?;
                    for p in self.prompts() {
                        self.require(self.answers_file(*mode, &p.label()), "evaluate")?;
                    }
                }
            }
            Stage::Report => {
                for mode in &self.config.modes {
                    for p in self.prompts() {
                        self.require(self.checks_file(*mode, &p.label()), "check")?;
                        self.require(self.answers_file(*mode, &p.label()), "evaluate")?;
                    }
                }
            }
            _ => {}
        }
        if stage != Stage::Ingest {
            self.require(self.corpus_dir(), "ingest")?;
        }
        Ok(())
    }

    /// The ingested corpus with filter-stage labels applied when present.
    pub fn load_corpus(&self) -> Result<CorpusStore, String> {
        let mut store = CorpusStore::open(&self.corpus_dir()).map_err(|e| e.to_string())?;
        let labels = self.out("filter/labels.jsonl");
        if labels.exists() {
            for l in read_jsonl::<RecordLabel>(&labels)? {
                if let Some(r) = store.record_mut(l.dataset, &l.record_id) {
                    if l.filtered {
                        r.split_flags.insert(SplitFlag::Filtered);
                    } else {
                        r.split_flags.remove(&SplitFlag::Filtered);
                    }
                    r.ambiguity_label = l.ambiguity_label;
                }
            }
        }
        Ok(store)
    }

    fn ingest(&self) -> Result<(), String> {
        let c = &self.config.corpus;
        let mut store = CorpusStore::new();
        let mut reports = BTreeMap::new();
        let evidence = store.ingest_evidence(&c.evidence).map_err(|e| e.to_string())?;
        reports.insert("evidence".to_string(), evidence);
        for source in &c.sources {
            let report = store
                .ingest_records(&source.records, source.dataset, &source.schema)
                .map_err(|e| e.to_string())?;
            for r in &report.rejected {
                log::warn!(
                    "{}: line {} rejected: {}",
                    source.records.display(),
                    r.line,
                    r.reason
                );
            }
            reports.insert(source.records.display().to_string(), report);
        }
        if store.record_count() == 0 {
            return Err("no records were accepted".into());
        }
        let dir = self.corpus_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
        }
        store.save(&dir).map_err(|e| e.to_string())?;
        write_json(&self.out("logs/ingest.json"), &reports)
    }

    fn index(&self) -> Result<(), String> {
        let store = EmbeddingStore::build_index(&self.config.embeddings).map_err(|e| e.to_string())?;
        let corpus = self.load_corpus()?;
        let missing = corpus.evidence_map().keys().filter(|id| store.get(id).is_none()).count();
        if missing > 0 {
            log::warn!("{missing} evidence items have no embedding and cannot be distractors");
        }
        write_file(&self.index_file(), &store.to_text()).map_err(|e| e.to_string())
    }

    fn filter(&self) -> Result<(), String> {
        let c = &self.config;
        let corpus = CorpusStore::open(&self.corpus_dir()).map_err(|e| e.to_string())?;
        let records: Vec<&QueryRecord> = corpus.all_records().collect();
        let judge = c.judge.build().map_err(|e| e.to_string())?;

        let stage1 = retrieval_independent_filter(&records, judge.as_ref(), &c.filter);
        let survivors: BTreeSet<&str> = stage1.kept.iter().map(String::as_str).collect();
        let after1: Vec<&QueryRecord> = records
            .iter()
            .copied()
            .filter(|r| survivors.contains(r.record_id.as_str()))
            .collect();
        let stage2 = match &c.corpus.signals {
            Some(path) => {
                let signals = load_signals(path).map_err(|e| e.to_string())?;
                Some(difficulty_filter(&after1, &signals, &c.filter))
            }
            None => {
                log::info!("no difficulty signals configured; skipping the difficulty filter");
                None
            }
        };
        let kept: BTreeSet<&str> = match &stage2 {
            Some(o) => o.kept.iter().map(String::as_str).collect(),
            None => survivors,
        };

        let dir = self.out("filter");
        let mut ambiguity: BTreeMap<String, AmbiguityLabel> = BTreeMap::new();
        let mut verdicts: Vec<PrefilterVerdict> = Vec::new();
        if c.corpus.run_prefilter {
            verdicts = run_prefilter(&records, &corpus, judge.as_ref());
            write_jsonl(&dir.join("prefilter.jsonl"), &verdicts)?;
        }
        let mut kappa = None;
        if let Some(path) = &c.corpus.adjudications {
            let adjudications = load_adjudications(path).map_err(|e| e.to_string())?;
            kappa = adjudication_kappa(&adjudications).ok();
            if !c.corpus.run_prefilter {
                verdicts = verdicts_from_file(&records, &adjudications);
            }
            let subset = build_ambiguity_subset(&records, &verdicts, &adjudications, c.ambiguity_target, c.seed);
            write_json(&dir.join("ambiguity.json"), &subset)?;
            for a in &adjudications {
                let label = a.adjudicated.unwrap_or(a.prefilter_label);
                ambiguity.insert(a.record_id.clone(), label);
            }
        }
        for v in &verdicts {
            ambiguity.entry(v.record_id.clone()).or_insert(v.label);
        }

        let labels: Vec<RecordLabel> = records
            .iter()
            .map(|r| RecordLabel {
                record_id: r.record_id.clone(),
                dataset: r.dataset_id,
                filtered: kept.contains(r.record_id.as_str()),
                ambiguity_label: ambiguity.get(&r.record_id).copied().unwrap_or(r.ambiguity_label),
            })
            .collect();
        write_jsonl(&dir.join("labels.jsonl"), &labels)?;
        write_json(&dir.join("summary.json"), &FilterSummary { stage1, stage2, kappa })
    }

    fn evaluate(&self) -> Result<(), String> {
        let c = &self.config;
        let corpus = self.load_corpus()?;
        let text = fs::read_to_string(self.index_file()).map_err(|e| e.to_string())?;
        let index = EmbeddingStore::parse(&text).map_err(|e| e.to_string())?;
        let mut builder = PackBuilder::new(&index, corpus.evidence_map(), c.caps);
        builder.selection = c.selection;
        let system = c.system.build().map_err(|e| e.to_string())?;
        let records: Vec<&QueryRecord> = corpus.all_records().collect();
        for &mode in &c.modes {
            let lines: Vec<PackLine> = records
                .par_iter()
                .map(|r| match builder.assemble(r, mode, c.seed) {
                    Ok(pack) => PackLine {
                        record_id: r.record_id.clone(),
                        pack: Some(pack),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("pack_error for {} in {}: {e}", r.record_id, mode.short_name());
                        PackLine {
                            record_id: r.record_id.clone(),
                            pack: None,
                            error: Some(e.to_string()),
                        }
                    }
                })
                .collect();
            write_jsonl(&self.packs_file(mode), &lines)?;
            let packs: BTreeMap<String, EvidencePack> = lines
                .into_iter()
                .filter_map(|l| Some((l.record_id, l.pack?)))
                .collect();
            for prompt in self.prompts() {
                let answers = generate_answers(&records, &packs, &prompt, system.as_ref());
                if answers.iter().all(|a| a.error.is_some()) {
                    return Err(format!(
                        "every answer failed for {} {} (first: {})",
                        mode.short_name(),
                        prompt.label(),
                        answers.first().and_then(|a| a.error.clone()).unwrap_or_default()
                    ));
                }
                write_jsonl(&self.answers_file(mode, &prompt.label()), &answers)?;
            }
        }
        Ok(())
    }

    fn check(&self) -> Result<(), String> {
        let c = &self.config;
        let corpus = self.load_corpus()?;
        let by_id: BTreeMap<&str, &QueryRecord> =
            corpus.all_records().map(|r| (r.record_id.as_str(), r)).collect();
        let judge = c.judge.build().map_err(|e| e.to_string())?;
        let check_config = CheckConfig {
            reference_channel: c.reference_channel,
            prompt: PromptConfig::default(),
        };
        for &mode in &c.modes {
            let packs: BTreeMap<String, EvidencePack> = read_jsonl::<PackLine>(&self.packs_file(mode))?
                .into_iter()
                .filter_map(|l| Some((l.record_id, l.pack?)))
                .collect();
            for prompt in self.prompts() {
                let answers: Vec<AnswerLine> = read_jsonl(&self.answers_file(mode, &prompt.label()))?;
                let lines: Vec<CheckLine> = answers
                    .par_iter()
                    .filter_map(|a| {
                        let long = a.long.as_deref()?;
                        let record = by_id.get(a.record_id.as_str())?;
                        let pack = packs.get(&a.record_id)?;
                        let line = match check_answer(record, pack, long, judge.as_ref(), &check_config) {
                            Ok(result) => CheckLine {
                                record_id: a.record_id.clone(),
                                result: Some(result),
                                error: None,
                            },
                            Err(e) => {
                                log::warn!("{e}");
                                CheckLine {
                                    record_id: a.record_id.clone(),
                                    result: None,
                                    error: Some(e.to_string()),
                                }
                            }
                        };
                        Some(line)
                    })
                    .collect();
                write_jsonl(&self.checks_file(mode, &prompt.label()), &lines)?;
            }
        }
        Ok(())
    }

    /// Outcomes for every (split, mode, prompt) in the config, optionally
    /// restricted to a set of record ids.
    fn outcomes(
        &self,
        corpus: &CorpusStore,
        splits: &[SplitFlag],
        only: Option<&BTreeSet<String>>,
    ) -> Result<Vec<RecordOutcome>, String> {
        let c = &self.config;
        let mut out = Vec::new();
        for &mode in &c.modes {
            for prompt in self.prompts() {
                let label = prompt.label();
                let answers: BTreeMap<String, AnswerLine> = read_jsonl::<AnswerLine>(&self.answers_file(mode, &label))?
                    .into_iter()
                    .map(|a| (a.record_id.clone(), a))
                    .collect();
                let checks: BTreeMap<String, CheckLine> = read_jsonl::<CheckLine>(&self.checks_file(mode, &label))?
                    .into_iter()
                    .map(|l| (l.record_id.clone(), l))
                    .collect();
                for &split in splits {
                    for r in corpus.all_records() {
                        if !r.split_flags.contains(&split) || only.is_some_and(|o| !o.contains(&r.record_id)) {
                            continue;
                        }
                        let answer = answers.get(&r.record_id);
                        let short = answer.and_then(|a| a.short.as_deref());
                        let long = answer.and_then(|a| a.long.as_deref());
                        let check = checks.get(&r.record_id);
                        let failure = answer
                            .and_then(|a| a.error.clone())
                            .or_else(|| check.and_then(|l| l.error.clone()))
                            .or_else(|| answer.is_none().then(|| "generation_error: no answer".to_string()));
                        out.push(RecordOutcome {
                            key: ReportKey {
                                dataset: r.dataset_id,
                                model: c.model.clone(),
                                split,
                                mode,
                                prompt: label.clone(),
                            },
                            record_id: r.record_id.clone(),
                            check: check.and_then(|l| l.result.clone()),
                            em: short.map(|s| score_short(s, &r.short_answer, c.em_rule_for(r.dataset_id))),
                            rouge_l: long
                                .filter(|_| !r.long_answer.trim().is_empty())
                                .map(|l| rouge_l(l, &r.long_answer)),
                            failure,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    fn report(&self) -> Result<(), String> {
        let c = &self.config;
        let corpus = self.load_corpus()?;
        let dir = self.out("reports");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
        }
        let cells = aggregate_runs(&self.outcomes(&corpus, &c.splits, None)?);
        emit_report(&cells, &ReportFormat::ALL, &dir).map_err(|e| e.to_string())?;

        let stats = corpus
            .datasets()
            .map(|d| corpus.compute_stats(d))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let tables = [
            ("Datasets", render_dataset_stats(&stats)),
            ("End-task accuracy", render_end_task_table(&cells)),
            ("Accuracy by retrieval mode", render_mode_table(&cells)),
            ("Claim-level diagnostics", render_claim_table(&cells)),
            ("Cross-modality diagnostics", render_cross_modality_table(&cells)),
        ]
        .iter()
        .map(|(title, body)| format!("## {title}\n\n{body}"))
        .collect::<Vec<_>>()
        .join("\n");
        write_file(&dir.join("tables.md"), &tables).map_err(|e| e.to_string())?;

        let subset_path = self.out("filter/ambiguity.json");
        if subset_path.exists() {
            let text = fs::read_to_string(&subset_path).map_err(|e| e.to_string())?;
            let subset: AmbiguitySubset = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            if !subset.ambiguous.is_empty() && !subset.clear.is_empty() {
                let ids = |v: &[String]| v.iter().cloned().collect::<BTreeSet<String>>();
                let full = [SplitFlag::Full];
                let ambiguous =
                    aggregate_runs(&self.outcomes(&corpus, &full, Some(&ids(&subset.ambiguous)))?);
                let clear = aggregate_runs(&self.outcomes(&corpus, &full, Some(&ids(&subset.clear)))?);
                let rows = ambiguity_delta_report(&ambiguous, &clear).map_err(|e| e.to_string())?;
                write_jsonl(&dir.join("ambiguity_delta.jsonl"), &rows)?;
                let table = render_delta_table(&rows);
                write_file(&dir.join("ambiguity_delta.md"), &table).map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }
}

/// Pre-filter verdicts taken from an adjudication file. The source is image
/// conditioned when the record has a gold image.
fn verdicts_from_file(records: &[&QueryRecord], adjudications: &[AmbiguityRecord]) -> Vec<PrefilterVerdict> {
    let by_id: BTreeMap<&str, &QueryRecord> = records.iter().map(|r| (r.record_id.as_str(), *r)).collect();
    adjudications
        .iter()
        .filter_map(|a| {
            let r = by_id.get(a.record_id.as_str())?;
            Some(PrefilterVerdict {
                record_id: a.record_id.clone(),
                source: if r.gold_image_ids.is_empty() {
                    AmbiguitySource::TextOnly
                } else {
                    AmbiguitySource::ImageConditioned
                },
                label: a.prefilter_label,
                rationale: a.prefilter_rationale.clone(),
            })
        })
        .collect()
}

/// Loads the config and runs `command`.
pub fn run(command: Command, config_path: &Path, overrides: &Overrides) -> Result<Vec<(Stage, StageStatus)>, PipelineError> {
    let config = PipelineConfig::load(config_path, overrides)?;
    Pipeline::new(config).run(command)
}
