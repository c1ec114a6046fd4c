//! Non-triviality filtering and ambiguity subset construction.
//!
//! Stage 1 drops questions that leak their answer or that a closed-book
//! probe answers confidently and correctly. Stage 2 drops the easiest
//! fraction of each dataset by a weighted easiness score.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AmbiguityLabel, CorpusStore, DatasetId, Modality, QueryRecord};
use crate::judges::{classify_ambiguity, closed_book_probe, Backend};
use crate::metrics::{exact_match, normalize_answer};

const WEIGHT_TOLERANCE: f64 = 1e-9;
/// Guards `floor(f * n)` against products like 0.1 * 30 = 2.9999999999999996.
const FLOOR_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("label lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label lists are empty")]
    Empty,
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyWeights {
    pub multi_hop: f64,
    pub modality_dependency: f64,
    pub baseline_success: f64,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        DifficultyWeights {
            multi_hop: 0.25,
            modality_dependency: 0.25,
            baseline_success: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub confidence_threshold: f64,
    pub drop_fraction: f64,
    pub difficulty_weights: DifficultyWeights,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            confidence_threshold: 0.9,
            drop_fraction: 0.10,
            difficulty_weights: DifficultyWeights::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let t = self.confidence_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(FilterError::Config(format!("confidence_threshold {t} outside (0, 1]")));
        }
        let f = self.drop_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(FilterError::Config(format!("drop_fraction {f} outside [0, 1)")));
        }
        let w = self.difficulty_weights;
        let parts = [w.multi_hop, w.modality_dependency, w.baseline_success];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(FilterError::Config("difficulty weights must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(FilterError::Config(format!("difficulty weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    VerbatimInQuestion,
    ClosedBook,
    Easiest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub record_id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub kept: Vec<String>,
    pub dropped: Vec<Dropped>,
    /// Records whose probe failed; they are kept.
    pub probe_errors: Vec<String>,
}

/// Normalized answer occurs in the normalized question on word boundaries.
pub fn answer_in_question(question: &str, answer: &str) -> bool {
    let a = normalize_answer(answer);
    !a.is_empty() && format!(" {} ", normalize_answer(question)).contains(&format!(" {a} "))
}

enum Stage1 {
    Keep,
    Drop(DropReason),
    ProbeError,
}

/// Stage 1. Probes run concurrently; output order follows input order.
pub fn retrieval_independent_filter(
    records: &[&QueryRecord],
    backend: &dyn Backend,
    config: &FilterConfig,
) -> Partition {
    let outcomes: Vec<Stage1> = records
        .par_iter()
        .map(|r| {
            if answer_in_question(&r.question, &r.short_answer) {
                return Stage1::Drop(DropReason::VerbatimInQuestion);
            }
            match closed_book_probe(&r.question, backend) {
                Ok(p) if p.confidence > config.confidence_threshold
                    && exact_match(&p.answer, &r.short_answer) == 1 =>
                {
                    Stage1::Drop(DropReason::ClosedBook)
                }
                Ok(_) => Stage1::Keep,
                Err(e) => {
                    log::warn!("probe_error for {}: {e}", r.record_id);
                    Stage1::ProbeError
                }
            }
        })
        .collect();
    let mut out = Partition::default();
    for (r, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Stage1::Keep => out.kept.push(r.record_id.clone()),
            Stage1::ProbeError => {
                out.kept.push(r.record_id.clone());
                out.probe_errors.push(r.record_id.clone());
            }
            Stage1::Drop(reason) => out.dropped.push(Dropped {
                record_id: r.record_id.clone(),
                reason,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultySignals {
    pub multi_hop: u8,
    pub modality_dependency: u8,
    pub baseline_success_rate: f64,
}

impl DifficultySignals {
    pub fn easiness(&self, w: &DifficultyWeights) -> f64 {
        w.baseline_success * self.baseline_success_rate
            + w.multi_hop * (1.0 - f64::from(self.multi_hop))
            + w.modality_dependency * (1.0 - f64::from(self.modality_dependency))
    }

    fn validate(&self) -> Result<(), String> {
        if self.multi_hop > 1 || self.modality_dependency > 1 {
            return Err("multi_hop and modality_dependency must be 0 or 1".into());
        }
        if !(0.0..=1.0).contains(&self.baseline_success_rate) {
            return Err(format!("baseline_success_rate {} outside [0, 1]", self.baseline_success_rate));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SignalLine {
    record_id: String,
    multi_hop: u8,
    modality_dependency: u8,
    baseline_success_rate: f64,
}

fn read_lines(path: &Path) -> Result<String, FilterError> {
    fs::read_to_string(path).map_err(|e| FilterError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, FilterError> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| FilterError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Signals file: one `{record_id, multi_hop, modality_dependency,
/// baseline_success_rate}` object per line.
pub fn load_signals(path: &Path) -> Result<BTreeMap<String, DifficultySignals>, FilterError> {
    let lines: Vec<SignalLine> = parse_jsonl(path)?;
    let mut out = BTreeMap::new();
    for (i, l) in lines.into_iter().enumerate() {
        let s = DifficultySignals {
            multi_hop: l.multi_hop,
            modality_dependency: l.modality_dependency,
            baseline_success_rate: l.baseline_success_rate,
        };
        s.validate().map_err(|message| FilterError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?;
        out.insert(l.record_id, s);
    }
    Ok(out)
}

/// Number dropped from a dataset of `n` records.
pub fn drop_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + FLOOR_EPSILON).floor() as usize
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyOutcome {
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
    pub missing_signal: Vec<String>,
}

/// Stage 2. Per dataset, drops the `floor(f * n)` highest easiness scores
/// (ties to the smaller record id). Records without signals are kept.
pub fn difficulty_filter(
    records: &[&QueryRecord],
    signals: &BTreeMap<String, DifficultySignals>,
    config: &FilterConfig,
) -> DifficultyOutcome {
    let mut by_dataset: BTreeMap<DatasetId, Vec<&QueryRecord>> = BTreeMap::new();
    for r in records {
        by_dataset.entry(r.dataset_id).or_default().push(r);
    }
    let mut out = DifficultyOutcome::default();
    let mut dropped = BTreeSet::new();
    for (_, group) in by_dataset {
        let mut ranked: Vec<(f64, &str)> = Vec::new();
        for r in &group {
            match signals.get(&r.record_id) {
                Some(s) => ranked.push((s.easiness(&config.difficulty_weights), &r.record_id)),
                None => {
                    log::warn!("no difficulty signal for {}; keeping it", r.record_id);
                    out.missing_signal.push(r.record_id.clone());
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let n = drop_count(config.drop_fraction, group.len()).min(ranked.len());
        dropped.extend(ranked[..n].iter().map(|(_, id)| id.to_string()));
    }
    for r in records {
        if dropped.contains(&r.record_id) {
            out.dropped.push(r.record_id.clone());
        } else {
            out.kept.push(r.record_id.clone());
        }
    }
    out
}

/// Cohen's kappa over two parallel label lists.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64, FilterError> {
    if a.len() != b.len() {
        return Err(FilterError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(FilterError::Empty);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut marg_a: BTreeMap<&T, usize> = BTreeMap::new();
    let mut marg_b: BTreeMap<&T, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *marg_a.entry(x).or_default() += 1;
        *marg_b.entry(y).or_default() += 1;
    }
    let p_o = agree / n;
    let p_e: f64 = marg_a
        .iter()
        .map(|(k, ca)| *ca as f64 * marg_b.get(k).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Whether a question was classified with its image or as text only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguitySource {
    TextOnly,
    ImageConditioned,
}

impl AmbiguitySource {
    pub const ALL: [AmbiguitySource; 2] = [AmbiguitySource::TextOnly, AmbiguitySource::ImageConditioned];

    pub fn display_name(self) -> &'static str {
        match self {
            AmbiguitySource::TextOnly => "Text-only",
            AmbiguitySource::ImageConditioned => "Image-conditioned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefilterVerdict {
    pub record_id: String,
    pub source: AmbiguitySource,
    pub label: AmbiguityLabel,
    pub rationale: String,
}

/// Pre-filter pass: records with a gold image are classified with their first
/// gold image, the rest as text only.
pub fn run_prefilter(records: &[&QueryRecord], store: &CorpusStore, backend: &dyn Backend) -> Vec<PrefilterVerdict> {
    records
        .par_iter()
        .map(|r| {
            let image = r
                .gold_image_ids
                .first()
                .and_then(|id| store.evidence(id))
                .filter(|e| e.modality == Modality::Image);
            let verdict = classify_ambiguity(&r.question, image, backend);
            PrefilterVerdict {
                record_id: r.record_id.clone(),
                source: if image.is_some() {
                    AmbiguitySource::ImageConditioned
                } else {
                    AmbiguitySource::TextOnly
                },
                label: verdict.label,
                rationale: verdict.rationale,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguityRecord {
    pub record_id: String,
    #[serde(default)]
    pub prefilter_label: AmbiguityLabel,
    #[serde(default)]
    pub prefilter_rationale: String,
    #[serde(default)]
    pub annotator_a: Option<AmbiguityLabel>,
    #[serde(default)]
    pub annotator_b: Option<AmbiguityLabel>,
    #[serde(default)]
    pub adjudicated: Option<AmbiguityLabel>,
}

impl AmbiguityRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.adjudicated.is_some() && (self.annotator_a.is_none() || self.annotator_b.is_none()) {
            return Err(format!("{}: adjudicated without both annotator labels", self.record_id));
        }
        Ok(())
    }
}

/// Adjudication file: one AmbiguityRecord per line.
pub fn load_adjudications(path: &Path) -> Result<Vec<AmbiguityRecord>, FilterError> {
    let records: Vec<AmbiguityRecord> = parse_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|message| FilterError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?;
    }
    Ok(records)
}

/// Inter-annotator kappa over records that carry both labels.
pub fn adjudication_kappa(records: &[AmbiguityRecord]) -> Result<f64, FilterError> {
    let (a, b): (Vec<AmbiguityLabel>, Vec<AmbiguityLabel>) = records
        .iter()
        .filter_map(|r| Some((r.annotator_a?, r.annotator_b?)))
        .unzip();
    cohen_kappa(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAccounting {
    pub source: AmbiguitySource,
    pub candidates: usize,
    pub marked_ambiguous: usize,
    pub final_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguitySubset {
    pub ambiguous: Vec<String>,
    pub clear: Vec<String>,
    pub accounting: Vec<SourceAccounting>,
}

impl AmbiguitySubset {
    pub fn total(&self) -> SourceAccounting {
        let sum = |f: fn(&SourceAccounting) -> usize| self.accounting.iter().map(f).sum();
        SourceAccounting {
            source: AmbiguitySource::TextOnly,
            candidates: sum(|a| a.candidates),
            marked_ambiguous: sum(|a| a.marked_ambiguous),
            final_count: sum(|a| a.final_count),
        }
    }
}

/// Splits `target` proportionally to `weights` by largest remainder, never
/// exceeding `capacity`. Ties go to the earlier slot. Capacity left unused by
/// one slot is handed to the others in the same way.
pub fn allocate(target: usize, weights: &[usize], capacity: &[usize]) -> Vec<usize> {
    let mut alloc = vec![0usize; weights.len()];
    let mut remaining = target.min(capacity.iter().fold(0usize, |s, c| s.saturating_add(*c)));
    while remaining > 0 {
        let open: Vec<usize> = (0..weights.len())
            .filter(|&i| alloc[i] < capacity[i] && weights[i] > 0)
            .collect();
        let open = if open.is_empty() {
            (0..weights.len()).filter(|&i| alloc[i] < capacity[i]).collect()
        } else {
            open
        };
        let total: usize = open.iter().map(|&i| weights[i].max(1)).sum();
        let mut share = vec![0usize; weights.len()];
        let mut rema: Vec<(u128, usize)> = Vec::new();
        for &i in &open {
            let w = weights[i].max(1) as u128;
            let exact_num = remaining as u128 * w;
            share[i] = (exact_num / total as u128) as usize;
            rema.push((exact_num % total as u128, i));
        }
        let mut leftover = remaining - share.iter().sum::<usize>();
        rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, i) in rema {
            if leftover == 0 {
                break;
            }
            share[i] += 1;
            leftover -= 1;
        }
        let mut placed = 0;
        for &i in &open {
            let take = share[i].min(capacity[i] - alloc[i]);
            alloc[i] += take;
            placed += take;
        }
        if placed == 0 {
            break;
        }
        remaining -= placed;
    }
    alloc
}

fn seeded_sample(mut pool: Vec<String>, n: usize, seed: u64) -> Vec<String> {
    pool.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort();
    pool
}

/// Final ambiguous subset and a matched clear set.
///
/// Per source, the target is split in proportion to pre-filter AMBIGUOUS
/// counts; each share is a seeded sample of adjudicated-AMBIGUOUS items. The
/// clear set is an equal-size seeded sample of CLEAR items (adjudicated CLEAR,
/// or pre-filter CLEAR without adjudication) from the datasets the ambiguous
/// set draws on.
pub fn build_ambiguity_subset(
    records: &[&QueryRecord],
    verdicts: &[PrefilterVerdict],
    adjudications: &[AmbiguityRecord],
    target_size: usize,
    seed: u64,
) -> AmbiguitySubset {
    let adjudicated: BTreeMap<&str, AmbiguityLabel> = adjudications
        .iter()
        .filter_map(|a| Some((a.record_id.as_str(), a.adjudicated?)))
        .collect();
    let dataset_of: BTreeMap<&str, DatasetId> =
        records.iter().map(|r| (r.record_id.as_str(), r.dataset_id)).collect();

    let mut accounting = Vec::new();
    let mut pools = Vec::new();
    for source in AmbiguitySource::ALL {
        let of_source: Vec<&PrefilterVerdict> = verdicts.iter().filter(|v| v.source == source).collect();
        let marked: Vec<&&PrefilterVerdict> =
            of_source.iter().filter(|v| v.label == AmbiguityLabel::Ambiguous).collect();
        let pool: Vec<String> = marked
            .iter()
            .filter(|v| adjudicated.get(v.record_id.as_str()) == Some(&AmbiguityLabel::Ambiguous))
            .map(|v| v.record_id.clone())
            .collect();
        accounting.push(SourceAccounting {
            source,
            candidates: of_source.len(),
            marked_ambiguous: marked.len(),
            final_count: 0,
        });
        pools.push(pool);
    }
    let weights: Vec<usize> = accounting.iter().map(|a| a.marked_ambiguous).collect();
    let capacity: Vec<usize> = pools.iter().map(Vec::len).collect();
    let shares = allocate(target_size, &weights, &capacity);

    let mut ambiguous = Vec::new();
    for (k, (pool, n)) in pools.into_iter().zip(&shares).enumerate() {
        accounting[k].final_count = *n;
        ambiguous.extend(seeded_sample(pool, *n, seed.wrapping_add(k as u64)));
    }
    ambiguous.sort();
    if ambiguous.len() < target_size {
        log::warn!(
            "ambiguity subset has {} items, fewer than the target {target_size}",
            ambiguous.len()
        );
    }

    let datasets: BTreeSet<DatasetId> = ambiguous
        .iter()
        .filter_map(|id| dataset_of.get(id.as_str()).copied())
        .collect();
    let clear_pool: Vec<String> = verdicts
        .iter()
        .filter(|v| {
            let label = adjudicated
                .get(v.record_id.as_str())
                .copied()
                .unwrap_or(v.label);
            label == AmbiguityLabel::Clear
                && dataset_of.get(v.record_id.as_str()).is_some_and(|d| datasets.contains(d))
        })
        .map(|v| v.record_id.clone())
        .collect();
    if clear_pool.len() < ambiguous.len() {
        log::warn!("only {} clear items available for matching", clear_pool.len());
    }
    let clear = seeded_sample(clear_pool, ambiguous.len(), seed.wrapping_add(AmbiguitySource::ALL.len() as u64));
    AmbiguitySubset {
        ambiguous,
        clear,
        accounting,
    }
}
