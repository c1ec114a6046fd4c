//! Normalized query records, the evidence manifest, and per-dataset statistics.
//!
//! A [`CorpusStore`] keeps records by dataset and evidence by id, so one
//! evidence item can back many questions. On disk the store is a directory:
//!
//! ```text
//! <root>/evidence.jsonl            one EvidenceItem per line, sorted by id
//! <root>/records/<dataset>.jsonl   one QueryRecord per line, sorted by record_id
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Unwritable { path: PathBuf, source: io::Error },
    #[error("duplicate record_id {record_id:?} at line {line}")]
    DuplicateRecordId { record_id: String, line: usize },
    #[error("duplicate evidence_id {evidence_id:?} at line {line}")]
    DuplicateEvidenceId { evidence_id: String, line: usize },
    #[error("corrupt store file {path} line {line}: {message}")]
    CorruptStore { path: PathBuf, line: usize, message: String },
    #[error("unknown dataset: {0}")]
    UnknownDataset(String),
}

/// The eight benchmark sources a record can come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    MragBench,
    ChartRag,
    VisualRag,
    Webqa,
    VisragArxiv,
    VisragPlot,
    VisragSlide,
    VisragDoc,
}

impl DatasetId {
    pub const ALL: [DatasetId; 8] = [
        DatasetId::MragBench,
        DatasetId::ChartRag,
        DatasetId::VisualRag,
        DatasetId::Webqa,
        DatasetId::VisragArxiv,
        DatasetId::VisragPlot,
        DatasetId::VisragSlide,
        DatasetId::VisragDoc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::MragBench => "mrag_bench",
            DatasetId::ChartRag => "chart_rag",
            DatasetId::VisualRag => "visual_rag",
            DatasetId::Webqa => "webqa",
            DatasetId::VisragArxiv => "visrag_arxiv",
            DatasetId::VisragPlot => "visrag_plot",
            DatasetId::VisragSlide => "visrag_slide",
            DatasetId::VisragDoc => "visrag_doc",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DatasetId::MragBench => "MRAG-Bench",
            DatasetId::ChartRag => "Chart-RAG",
            DatasetId::VisualRag => "Visual-RAG",
            DatasetId::Webqa => "WebQA",
            DatasetId::VisragArxiv => "VisRAG-Arxiv",
            DatasetId::VisragPlot => "VisRAG-Plot",
            DatasetId::VisragSlide => "VisRAG-Slide",
            DatasetId::VisragDoc => "VisRAG-Doc",
        }
    }

    /// Subject area substituted into the expert prompt.
    pub fn domain(self) -> &'static str {
        match self {
            DatasetId::MragBench => "natural photos",
            DatasetId::ChartRag => "business and science charts",
            DatasetId::VisualRag => "fine-grained natural images",
            DatasetId::Webqa => "open-web images and captions",
            DatasetId::VisragArxiv => "scholarly PDF pages",
            DatasetId::VisragPlot => "technical plots",
            DatasetId::VisragSlide => "slide decks",
            DatasetId::VisragDoc => "scanned manuals and forms",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetId::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownDataset(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityLabel {
    #[default]
    Unlabeled,
    Clear,
    Ambiguous,
}

impl AmbiguityLabel {
    fn parse_loose(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unlabeled" | "" => Some(AmbiguityLabel::Unlabeled),
            "clear" => Some(AmbiguityLabel::Clear),
            "ambiguous" => Some(AmbiguityLabel::Ambiguous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitFlag {
    Filtered,
    Full,
}

fn default_split_flags() -> BTreeSet<SplitFlag> {
    BTreeSet::from([SplitFlag::Full])
}

/// One normalized benchmark item. Evidence is referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub record_id: String,
    pub dataset_id: DatasetId,
    pub question: String,
    pub short_answer: String,
    #[serde(default)]
    pub long_answer: String,
    #[serde(rename = "evidence_imgs")]
    pub gold_image_ids: Vec<String>,
    #[serde(rename = "evidence_txts")]
    pub gold_text_ids: Vec<String>,
    #[serde(default)]
    pub ambiguity_label: AmbiguityLabel,
    #[serde(default = "default_split_flags")]
    pub split_flags: BTreeSet<SplitFlag>,
}

impl QueryRecord {
    /// Record with no gold evidence, unlabeled, in the full split only.
    pub fn new(
        record_id: impl Into<String>,
        dataset_id: DatasetId,
        question: impl Into<String>,
        short_answer: impl Into<String>,
        long_answer: impl Into<String>,
    ) -> Self {
        QueryRecord {
            record_id: record_id.into(),
            dataset_id,
            question: question.into(),
            short_answer: short_answer.into(),
            long_answer: long_answer.into(),
            gold_image_ids: Vec::new(),
            gold_text_ids: Vec::new(),
            ambiguity_label: AmbiguityLabel::Unlabeled,
            split_flags: default_split_flags(),
        }
    }

    pub fn is_filtered(&self) -> bool {
        self.split_flags.contains(&SplitFlag::Filtered)
    }

    pub fn gold_ids(&self) -> impl Iterator<Item = &str> {
        self.gold_image_ids
            .iter()
            .chain(self.gold_text_ids.iter())
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub evidence_id: String,
    pub modality: Modality,
    /// Image file path for images, inline passage text for texts.
    pub content_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_px: Option<u32>,
}

impl EvidenceItem {
    pub fn text(id: impl Into<String>, body: impl Into<String>) -> Self {
        EvidenceItem {
            evidence_id: id.into(),
            modality: Modality::Text,
            content_ref: body.into(),
            caption: None,
            width_px: None,
            height_px: None,
        }
    }

    pub fn image(id: impl Into<String>, path: impl Into<String>, caption: Option<String>) -> Self {
        EvidenceItem {
            evidence_id: id.into(),
            modality: Modality::Image,
            content_ref: path.into(),
            caption,
            width_px: None,
            height_px: None,
        }
    }

    /// Text a string-matching judge can see: the passage, or the image caption.
    pub fn visible_text(&self) -> &str {
        match self.modality {
            Modality::Text => &self.content_ref,
            Modality::Image => self.caption.as_deref().unwrap_or(""),
        }
    }
}

/// Source field names for each canonical field. Defaults are the canonical names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaMap {
    pub record_id: String,
    pub question: String,
    pub short_answer: String,
    pub long_answer: String,
    pub evidence_imgs: String,
    pub evidence_txts: String,
    pub ambiguity_label: String,
    pub split_flags: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        SchemaMap {
            record_id: "record_id".into(),
            question: "question".into(),
            short_answer: "short_answer".into(),
            long_answer: "long_answer".into(),
            evidence_imgs: "evidence_imgs".into(),
            evidence_txts: "evidence_txts".into(),
            ambiguity_label: "ambiguity_label".into(),
            split_flags: "split_flags".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dataset_id: DatasetId,
    pub item_count: usize,
    pub retained_count: usize,
    /// Mean (width, height) over distinct referenced images with stored dimensions.
    pub avg_img_px: Option<(f64, f64)>,
    pub max_q_len: usize,
    pub max_a_len: usize,
    pub avg_q_len: f64,
    pub avg_a_len: f64,
    pub ambiguous_count: usize,
}

/// Whitespace token count; the length unit for every corpus statistic.
pub fn token_len(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStore {
    records: BTreeMap<DatasetId, BTreeMap<String, QueryRecord>>,
    evidence: BTreeMap<String, EvidenceItem>,
}

const EVIDENCE_FILE: &str = "evidence.jsonl";
const RECORDS_DIR: &str = "records";

impl CorpusStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(root: &Path) -> Result<Self, CorpusError> {
        let mut store = CorpusStore::new();
        let evidence_path = root.join(EVIDENCE_FILE);
        if evidence_path.exists() {
            for (line, item) in read_store_lines::<EvidenceItem>(&evidence_path)? {
                if store.evidence.contains_key(&item.evidence_id) {
                    return Err(CorpusError::DuplicateEvidenceId {
                        evidence_id: item.evidence_id,
                        line,
                    });
                }
                store.evidence.insert(item.evidence_id.clone(), item);
            }
        }
        for dataset in DatasetId::ALL {
            let path = root.join(RECORDS_DIR).join(format!("{dataset}.jsonl"));
            if !path.exists() {
                continue;
            }
            let table = store.records.entry(dataset).or_default();
            for (line, record) in read_store_lines::<QueryRecord>(&path)? {
                if record.dataset_id != dataset {
                    return Err(CorpusError::CorruptStore {
                        path: path.clone(),
                        line,
                        message: format!("record belongs to {}", record.dataset_id),
                    });
                }
                table.insert(record.record_id.clone(), record);
            }
        }
        Ok(store)
    }

    pub fn save(&self, root: &Path) -> Result<(), CorpusError> {
        let records_dir = root.join(RECORDS_DIR);
        fs::create_dir_all(&records_dir).map_err(|source| CorpusError::Unwritable {
            path: records_dir.clone(),
            source,
        })?;
        write_jsonl(&root.join(EVIDENCE_FILE), self.evidence.values())?;
        for (dataset, table) in &self.records {
            write_jsonl(&records_dir.join(format!("{dataset}.jsonl")), table.values())?;
        }
        Ok(())
    }

    /// Ingests an evidence manifest. Image paths are resolved against the
    /// manifest's directory and stored as absolute paths.
    pub fn ingest_evidence(&mut self, manifest: &Path) -> Result<IngestReport, CorpusError> {
        let text = fs::read_to_string(manifest).map_err(|source| CorpusError::Unreadable {
            path: manifest.to_path_buf(),
            source,
        })?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut report = IngestReport::default();
        let mut seen = BTreeSet::new();
        let mut staged = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let mut item: EvidenceItem = match serde_json::from_str(raw) {
                Ok(item) => item,
                Err(e) => {
                    report.rejected.push(Rejection {
                        line,
                        record_id: None,
                        reason: format!("malformed evidence line: {e}"),
                    });
                    continue;
                }
            };
            if !seen.insert(item.evidence_id.clone()) {
                return Err(CorpusError::DuplicateEvidenceId {
                    evidence_id: item.evidence_id,
                    line,
                });
            }
            match check_evidence(&mut item, base) {
                Ok(()) => staged.push(item),
                Err(reason) => report.rejected.push(Rejection {
                    line,
                    record_id: Some(item.evidence_id.clone()),
                    reason,
                }),
            }
        }
        report.accepted = staged.len();
        for item in staged {
            self.evidence.insert(item.evidence_id.clone(), item);
        }
        Ok(report)
    }

    /// Ingests a line-delimited source file through `schema_map`. Records that
    /// fail validation are rejected with a reason; re-ingesting the same ids
    /// overwrites. A duplicate id inside one file aborts the whole file.
    pub fn ingest_records(
        &mut self,
        source_file: &Path,
        dataset_id: DatasetId,
        schema_map: &SchemaMap,
    ) -> Result<IngestReport, CorpusError> {
        let text = fs::read_to_string(source_file).map_err(|source| CorpusError::Unreadable {
            path: source_file.to_path_buf(),
            source,
        })?;
        let mut report = IngestReport::default();
        let mut seen = BTreeSet::new();
        let mut staged = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let obj = match serde_json::from_str::<Value>(raw) {
                Ok(Value::Object(obj)) => obj,
                Ok(_) => {
                    report.rejected.push(Rejection {
                        line,
                        record_id: None,
                        reason: "line is not an object".into(),
                    });
                    continue;
                }
                Err(e) => {
                    report.rejected.push(Rejection {
                        line,
                        record_id: None,
                        reason: format!("malformed json: {e}"),
                    });
                    continue;
                }
            };
            let Some(record_id) = obj.get(&schema_map.record_id).and_then(id_string) else {
                report.rejected.push(Rejection {
                    line,
                    record_id: None,
                    reason: "missing record_id".into(),
                });
                continue;
            };
            if !seen.insert(record_id.clone()) {
                return Err(CorpusError::DuplicateRecordId { record_id, line });
            }
            match map_record(&obj, record_id.clone(), dataset_id, schema_map) {
                Ok(record) => match validate_record(&record, self) {
                    Ok(()) => staged.push(record),
                    Err(violations) => report.rejected.push(Rejection {
                        line,
                        record_id: Some(record_id),
                        reason: violations.join("; "),
                    }),
                },
                Err(reason) => report.rejected.push(Rejection {
                    line,
                    record_id: Some(record_id),
                    reason,
                }),
            }
        }
        report.accepted = staged.len();
        let table = self.records.entry(dataset_id).or_default();
        for record in staged {
            table.insert(record.record_id.clone(), record);
        }
        Ok(report)
    }

    pub fn insert_evidence(&mut self, item: EvidenceItem) {
        self.evidence.insert(item.evidence_id.clone(), item);
    }

    /// Inserts a record without validation; used by fixtures and rewrites.
    pub fn insert_record(&mut self, record: QueryRecord) {
        self.records
            .entry(record.dataset_id)
            .or_default()
            .insert(record.record_id.clone(), record);
    }

    pub fn evidence(&self, id: &str) -> Option<&EvidenceItem> {
        self.evidence.get(id)
    }

    pub fn evidence_map(&self) -> &BTreeMap<String, EvidenceItem> {
        &self.evidence
    }

    pub fn datasets(&self) -> impl Iterator<Item = DatasetId> + '_ {
        self.records.keys().copied()
    }

    pub fn records(&self, dataset: DatasetId) -> impl Iterator<Item = &QueryRecord> {
        self.records.get(&dataset).into_iter().flat_map(|t| t.values())
    }

    /// All records in (dataset, record_id) order.
    pub fn all_records(&self) -> impl Iterator<Item = &QueryRecord> {
        self.records.values().flat_map(|t| t.values())
    }

    pub fn record(&self, dataset: DatasetId, record_id: &str) -> Option<&QueryRecord> {
        self.records.get(&dataset)?.get(record_id)
    }

    pub fn record_mut(&mut self, dataset: DatasetId, record_id: &str) -> Option<&mut QueryRecord> {
        self.records.get_mut(&dataset)?.get_mut(record_id)
    }

    pub fn record_count(&self) -> usize {
        self.records.values().map(BTreeMap::len).sum()
    }

    /// Canonical-field export in record_id order, one compact object per line.
    pub fn export_canonical(&self, dataset: DatasetId) -> Result<String, CorpusError> {
        let table = self
            .records
            .get(&dataset)
            .ok_or_else(|| CorpusError::UnknownDataset(dataset.to_string()))?;
        let mut out = String::new();
        for record in table.values() {
            let row = CanonicalRow {
                record_id: &record.record_id,
                question: &record.question,
                short_answer: &record.short_answer,
                long_answer: &record.long_answer,
                evidence_imgs: &record.gold_image_ids,
                evidence_txts: &record.gold_text_ids,
            };
            out.push_str(&serde_json::to_string(&row).expect("canonical row serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn compute_stats(&self, dataset: DatasetId) -> Result<DatasetStats, CorpusError> {
        let table = self
            .records
            .get(&dataset)
            .ok_or_else(|| CorpusError::UnknownDataset(dataset.to_string()))?;
        let n = table.len();
        let q_lens: Vec<usize> = table.values().map(|r| token_len(&r.question)).collect();
        let a_lens: Vec<usize> = table.values().map(|r| token_len(&r.short_answer)).collect();
        let mean = |v: &[usize]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<usize>() as f64 / v.len() as f64
            }
        };

        let images: BTreeSet<&str> = table
            .values()
            .flat_map(|r| r.gold_image_ids.iter().map(String::as_str))
            .collect();
        let dims: Vec<(u32, u32)> = images
            .iter()
            .filter_map(|id| self.evidence.get(*id))
            .filter_map(|e| Some((e.width_px?, e.height_px?)))
            .collect();
        let avg_img_px = (!dims.is_empty()).then(|| {
            let k = dims.len() as f64;
            let w: u64 = dims.iter().map(|d| u64::from(d.0)).sum();
            let h: u64 = dims.iter().map(|d| u64::from(d.1)).sum();
            (w as f64 / k, h as f64 / k)
        });

        Ok(DatasetStats {
            dataset_id: dataset,
            item_count: n,
            retained_count: table.values().filter(|r| r.is_filtered()).count(),
            avg_img_px,
            max_q_len: q_lens.iter().copied().max().unwrap_or(0),
            max_a_len: a_lens.iter().copied().max().unwrap_or(0),
            avg_q_len: mean(&q_lens),
            avg_a_len: mean(&a_lens),
            ambiguous_count: table
                .values()
                .filter(|r| r.ambiguity_label == AmbiguityLabel::Ambiguous)
                .count(),
        })
    }
}

/// Returns every violated record invariant, in a fixed order.
pub fn validate_record(record: &QueryRecord, store: &CorpusStore) -> Result<(), Vec<String>> {
    let mut violations = Vec::new();
    if record.record_id.trim().is_empty() {
        violations.push("record_id empty".to_string());
    }
    if record.question.trim().is_empty() {
        violations.push("question empty".to_string());
    }
    if record.short_answer.trim().is_empty() {
        violations.push("short_answer empty".to_string());
    }
    let expected = [
        (&record.gold_image_ids, Modality::Image),
        (&record.gold_text_ids, Modality::Text),
    ];
    for (ids, modality) in expected {
        for id in ids {
            match store.evidence(id) {
                None => violations.push(format!("unresolved evidence id: {id}")),
                Some(item) if item.modality != modality => violations.push(format!(
                    "evidence id {id} has modality {:?}, expected {:?}",
                    item.modality, modality
                )),
                Some(_) => {}
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Serialize)]
struct CanonicalRow<'a> {
    record_id: &'a str,
    question: &'a str,
    short_answer: &'a str,
    long_answer: &'a str,
    evidence_imgs: &'a [String],
    evidence_txts: &'a [String],
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn map_record(
    obj: &serde_json::Map<String, Value>,
    record_id: String,
    dataset_id: DatasetId,
    map: &SchemaMap,
) -> Result<QueryRecord, String> {
    let text_field = |canonical: &str, source: &str| -> Result<String, String> {
        match obj.get(source) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None => Err(format!("missing {canonical}")),
            Some(_) => Err(format!("{canonical} is not a string")),
        }
    };
    let list_field = |canonical: &str, source: &str| -> Result<Vec<String>, String> {
        match obj.get(source) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| id_string(v).ok_or_else(|| format!("{canonical} holds a non-id value")))
                .collect(),
            Some(Value::Null) | None => Err(format!("missing {canonical}")),
            Some(_) => Err(format!("{canonical} is not a list")),
        }
    };

    let fields = (
        text_field("question", &map.question),
        text_field("short_answer", &map.short_answer),
        text_field("long_answer", &map.long_answer),
        list_field("evidence_imgs", &map.evidence_imgs),
        list_field("evidence_txts", &map.evidence_txts),
    );
    let (question, short_answer, long_answer, gold_image_ids, gold_text_ids) = match fields {
        (Ok(q), Ok(s), Ok(l), Ok(i), Ok(t)) => (q, s, l, i, t),
        (q, s, l, i, t) => {
            let errors: Vec<String> = [q.err(), s.err(), l.err(), i.err(), t.err()]
                .into_iter()
                .flatten()
                .collect();
            return Err(errors.join("; "));
        }
    };

    let ambiguity_label = match obj.get(&map.ambiguity_label) {
        None | Some(Value::Null) => AmbiguityLabel::Unlabeled,
        Some(Value::String(s)) => AmbiguityLabel::parse_loose(s)
            .ok_or_else(|| format!("unknown ambiguity_label {s:?}"))?,
        Some(_) => return Err("ambiguity_label is not a string".into()),
    };
    let split_flags = match obj.get(&map.split_flags) {
        None | Some(Value::Null) => default_split_flags(),
        Some(v) => serde_json::from_value::<BTreeSet<SplitFlag>>(v.clone())
            .map_err(|e| format!("bad split_flags: {e}"))?,
    };

    Ok(QueryRecord {
        record_id,
        dataset_id,
        question,
        short_answer,
        long_answer,
        gold_image_ids,
        gold_text_ids,
        ambiguity_label,
        split_flags,
    })
}

const IMAGE_MAGIC: [&[u8]; 6] = [
    b"\x89PNG\r\n\x1a\n",
    b"\xff\xd8\xff",
    b"GIF87a",
    b"GIF89a",
    b"BM",
    b"RIFF",
];

fn check_evidence(item: &mut EvidenceItem, base: &Path) -> Result<(), String> {
    if item.evidence_id.trim().is_empty() {
        return Err("evidence_id empty".into());
    }
    match item.modality {
        Modality::Text => {
            if item.content_ref.trim().is_empty() {
                return Err("text evidence empty".into());
            }
        }
        Modality::Image => {
            let path = base.join(&item.content_ref);
            let head = fs::read(&path)
                .map_err(|e| format!("image {} unreadable: {e}", path.display()))?;
            if !IMAGE_MAGIC.iter().any(|m| head.starts_with(m)) {
                return Err(format!("{} is not an image file", path.display()));
            }
            let abs = fs::canonicalize(&path).unwrap_or(path);
            item.content_ref = abs.to_string_lossy().into_owned();
            if item.width_px == Some(0) || item.height_px == Some(0) {
                return Err("image dimensions must be positive".into());
            }
        }
    }
    Ok(())
}

fn read_store_lines<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(usize, T)>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, l)| {
            serde_json::from_str(l)
                .map(|v| (idx + 1, v))
                .map_err(|e| CorpusError::CorruptStore {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<(), CorpusError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("store rows serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}
