//! Aggregation of per-record outcomes into report cells, report emission
//! (csv, markdown, jsonl), run manifests and paper-shaped tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checker::CheckResult;
use crate::corpus::{DatasetId, DatasetStats, SplitFlag};
use crate::metrics::{core_metrics, cross_modality_metrics, mean_defined, per_modality_prf};
use crate::retrieval::RetrievalMode;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const UNDEFINED: &str = "—";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no report cells to emit")]
    Empty,
    #[error("no clear counterpart for cell {0}")]
    MissingCounterpart(String),
    #[error("cannot write {path}: {message}")]
    Unwritable { path: PathBuf, message: String },
    #[error("cannot read {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
}

/// Grouping key of one report cell. Ordering is the canonical cell order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReportKey {
    pub dataset: DatasetId,
    pub model: String,
    pub split: SplitFlag,
    pub mode: RetrievalMode,
    pub prompt: String,
}

impl ReportKey {
    fn describe(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}",
            self.dataset,
            self.model,
            split_name(self.split),
            self.mode.short_name(),
            self.prompt
        )
    }
}

fn split_name(split: SplitFlag) -> &'static str {
    match split {
        SplitFlag::Filtered => "filtered",
        SplitFlag::Full => "full",
    }
}

/// Everything known about one record under one key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub key: ReportKey,
    pub record_id: String,
    /// `None` when checking failed or was not run.
    pub check: Option<CheckResult>,
    /// `None` on generation_error.
    pub em: Option<u8>,
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Metric columns, in report order.
pub const METRICS: [&str; 25] = [
    "em",
    "rouge_l",
    "hallucination",
    "faithfulness",
    "contradiction",
    "claim_recall",
    "context_precision",
    "self_knowledge",
    "cr_img",
    "cr_txt",
    "delta_cr",
    "cp_img",
    "cp_txt",
    "delta_cp",
    "vis_hit_at_k",
    "txt_miss_rate",
    "cma",
    "v_hr",
    "d_hr",
    "recall_img",
    "precision_img",
    "f1_img",
    "recall_txt",
    "precision_txt",
    "f1_txt",
];

/// Metrics that are differences and render with a sign.
const SIGNED: [&str; 2] = ["delta_cr", "delta_cp"];

fn header_name(metric: &str) -> &'static str {
    match metric {
        "em" => "EM/Acc",
        "rouge_l" => "ROUGE-L",
        "hallucination" => "Halluc.",
        "faithfulness" => "Faith.",
        "contradiction" => "Contra.",
        "claim_recall" => "Claim R.",
        "context_precision" => "Ctx.Prec.",
        "self_knowledge" => "Self-know.",
        "cr_img" => "CR img",
        "cr_txt" => "CR txt",
        "delta_cr" => "ΔCR",
        "cp_img" => "CP img",
        "cp_txt" => "CP txt",
        "delta_cp" => "ΔCP",
        "vis_hit_at_k" => "VIS-Hit@k",
        "txt_miss_rate" => "TXT-MissRate",
        "cma" => "CMA",
        "v_hr" => "V-HR",
        "d_hr" => "D-HR",
        "recall_img" => "Recall img",
        "precision_img" => "Precision img",
        "f1_img" => "F1 img",
        "recall_txt" => "Recall txt",
        "precision_txt" => "Precision txt",
        "f1_txt" => "F1 txt",
        _ => "?",
    }
}

fn record_metrics(outcome: &RecordOutcome) -> [Option<f64>; METRICS.len()] {
    let mut out = [None; METRICS.len()];
    out[0] = outcome.em.map(f64::from);
    out[1] = outcome.rouge_l;
    let Some(check) = &outcome.check else { return out };
    let core = core_metrics(check);
    let cross = cross_modality_metrics(std::slice::from_ref(check)).expect("one result");
    let prf = per_modality_prf(std::slice::from_ref(check));
    let rest = [
        core.hallucination_rate,
        core.faithfulness,
        core.contradiction_rate,
        core.claim_recall,
        core.context_precision,
        core.self_knowledge,
        cross.cr_img,
        cross.cr_txt,
        cross.delta_cr,
        cross.cp_img,
        cross.cp_txt,
        cross.delta_cp,
        cross.vis_hit_at_k,
        cross.txt_miss_rate,
        cross.cma,
        cross.v_hr,
        cross.d_hr,
        prf.img.recall,
        prf.img.precision,
        prf.img.f1,
        prf.txt.recall,
        prf.txt.precision,
        prf.txt.f1,
    ];
    out[2..].copy_from_slice(&rest);
    out
}

/// Macro-average of one metric: `value` is the mean over the `defined`
/// records where the metric exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetric {
    pub value: Option<f64>,
    pub defined: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub generation_errors: usize,
    pub check_failures: usize,
    pub judging_errors: usize,
    pub unjudgeable_claims: usize,
    pub records_without_gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub schema_version: u32,
    #[serde(flatten)]
    pub key: ReportKey,
    pub records: usize,
    pub metrics: BTreeMap<String, CellMetric>,
    pub excluded: Excluded,
}

impl ReportCell {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).and_then(|m| m.value)
    }
}

/// Groups outcomes by key and macro-averages every metric over the records
/// of each cell, folding in record-id order.
pub fn aggregate_runs(outcomes: &[RecordOutcome]) -> Vec<ReportCell> {
    let mut groups: BTreeMap<&ReportKey, Vec<&RecordOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(&o.key).or_default().push(o);
    }
    groups
        .into_iter()
        .map(|(key, mut members)| {
            members.sort_by(|a, b| a.record_id.cmp(&b.record_id));
            let rows: Vec<_> = members.iter().map(|o| record_metrics(o)).collect();
            let metrics = METRICS
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let column: Vec<Option<f64>> = rows.iter().map(|r| r[k]).collect();
                    let metric = CellMetric {
                        value: mean_defined(column.iter().copied()),
                        defined: column.iter().flatten().count(),
                    };
                    (name.to_string(), metric)
                })
                .collect();
            let mut excluded = Excluded::default();
            for o in &members {
                excluded.generation_errors += usize::from(o.em.is_none());
                match &o.check {
                    Some(c) => {
                        excluded.judging_errors += c.judging_error_count;
                        excluded.unjudgeable_claims += c.unjudgeable.len();
                        excluded.records_without_gold += usize::from(c.gold.is_none());
                    }
                    None => excluded.check_failures += usize::from(o.em.is_some()),
                }
            }
            ReportCell {
                schema_version: REPORT_SCHEMA_VERSION,
                key: key.clone(),
                records: members.len(),
                metrics,
                excluded,
            }
        })
        .collect()
}

/// Percentage with one decimal, no sign; zero never renders as "-0.0".
pub fn pct(value: f64) -> String {
    let s = format!("{:.1}", value * 100.0);
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

fn signed_tenths(tenths: i64) -> String {
    let abs = tenths.unsigned_abs();
    let body = format!("{}.{}", abs / 10, abs % 10);
    match tenths.signum() {
        1 => format!("+{body}"),
        -1 => format!("-{body}"),
        _ => body,
    }
}

/// Signed percentage-point rendering, e.g. "+9.5" or "-5.9".
pub fn signed_pct(value: f64) -> String {
    signed_tenths((value * 1000.0).round() as i64)
}

fn render_metric(name: &str, value: Option<f64>) -> String {
    match value {
        None => UNDEFINED.to_string(),
        Some(v) if SIGNED.contains(&name) => signed_pct(v),
        Some(v) => pct(v),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Jsonl,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Jsonl];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Markdown => "report.md",
            ReportFormat::Jsonl => "report.jsonl",
        }
    }
}

const EXCLUDED_COLUMNS: [&str; 5] = [
    "generation_errors",
    "check_failures",
    "judging_errors",
    "unjudgeable_claims",
    "records_without_gold",
];

fn excluded_values(e: &Excluded) -> [usize; 5] {
    [
        e.generation_errors,
        e.check_failures,
        e.judging_errors,
        e.unjudgeable_claims,
        e.records_without_gold,
    ]
}

/// CSV with raw fractions; an undefined metric is an empty field.
pub fn render_csv(cells: &[ReportCell]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset", "model", "split", "mode", "prompt", "records"];
    header.extend(METRICS);
    header.extend(EXCLUDED_COLUMNS);
    w.write_record(&header).expect("in-memory csv");
    for c in cells {
        let mut row = vec![
            c.key.dataset.to_string(),
            c.key.model.clone(),
            split_name(c.key.split).to_string(),
            c.key.mode.short_name().to_string(),
            c.key.prompt.clone(),
            c.records.to_string(),
        ];
        row.extend(METRICS.iter().map(|m| c.value(m).map(|v| v.to_string()).unwrap_or_default()));
        row.extend(excluded_values(&c.excluded).iter().map(|v| v.to_string()));
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub const FOOTER: &str = "\
Notes:
- Percentages are macro-averages over the records of each cell; undefined values (—) are left out of the mean, and per-metric defined counts are in report.jsonl.
- EM: both sides lowercased, punctuation removed, whitespace collapsed, one leading article (a, an, the) dropped; numbers are compared as text.
- Per-modality recall, precision and F1 are reconstructed definitions.
- CP img, CP txt, VIS-Hit@k and TXT-MissRate divide by the retrieval caps K_img and K_txt.
";

pub fn render_markdown(cells: &[ReportCell]) -> String {
    let mut out = String::from("| Dataset | Model | Split | Mode | Prompt | N |");
    for m in METRICS {
        let _ = write!(out, " {} |", header_name(m));
    }
    out.push_str(" Excluded (gen/check/judge/claims/gold) |\n|");
    for _ in 0..METRICS.len() + 7 {
        out.push_str("---|");
    }
    out.push('\n');
    for c in cells {
        let _ = write!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            c.key.dataset.display_name(),
            c.key.model,
            split_name(c.key.split),
            c.key.mode.short_name(),
            c.key.prompt,
            c.records
        );
        for m in METRICS {
            let rendered = render_metric(m, c.value(m));
            let cell = if rendered == UNDEFINED || SIGNED.contains(&m) {
                rendered
            } else {
                format!("{rendered}%")
            };
            let _ = write!(out, " {cell} |");
        }
        let ex = excluded_values(&c.excluded).map(|v| v.to_string()).join("/");
        let _ = writeln!(out, " {ex} |");
    }
    out.push('\n');
    out.push_str(FOOTER);
    out
}

pub fn render_jsonl(cells: &[ReportCell]) -> String {
    let mut out = String::new();
    for c in cells {
        out.push_str(&serde_json::to_string(c).expect("cells serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<ReportCell>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn read_report(path: &Path) -> Result<Vec<ReportCell>, ReportError> {
    let unreadable = |message: String| ReportError::Unreadable {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
    parse_jsonl(&text).map_err(|e| unreadable(e.to_string()))
}

pub(crate) fn write_file(path: &Path, body: &str) -> Result<(), ReportError> {
    let unwritable = |e: std::io::Error| ReportError::Unwritable {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(unwritable)?;
    }
    fs::write(path, body).map_err(unwritable)
}

/// Writes one file per requested format into `dir`.
pub fn emit_report(cells: &[ReportCell], formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if cells.is_empty() {
        return Err(ReportError::Empty);
    }
    let formats: BTreeSet<ReportFormat> = formats.iter().copied().collect();
    let mut written = Vec::new();
    for format in formats {
        let body = match format {
            ReportFormat::Csv => render_csv(cells),
            ReportFormat::Markdown => render_markdown(cells),
            ReportFormat::Jsonl => render_jsonl(cells),
        };
        let path = dir.join(format.file_name());
        write_file(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

/// Metrics compared between the ambiguous and the clear subset.
pub const DELTA_METRICS: [&str; 4] = ["em", "hallucination", "claim_recall", "context_precision"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub key: ReportKey,
    pub clear: [Option<f64>; 4],
    pub ambiguous: [Option<f64>; 4],
    /// Ambiguous minus clear, in tenths of a percentage point, computed from
    /// the one-decimal displayed values so the row is internally consistent.
    pub delta_tenths: [Option<i64>; 4],
    pub clear_records: usize,
    pub ambiguous_records: usize,
}

fn tenths(v: f64) -> i64 {
    (v * 1000.0).round() as i64
}

/// Row-wise ambiguous-minus-clear differences, matching cells by key.
pub fn ambiguity_delta_report(ambiguous: &[ReportCell], clear: &[ReportCell]) -> Result<Vec<DeltaRow>, ReportError> {
    let clear_by_key: BTreeMap<&ReportKey, &ReportCell> = clear.iter().map(|c| (&c.key, c)).collect();
    let mut rows = Vec::new();
    for a in ambiguous {
        let c = clear_by_key
            .get(&a.key)
            .ok_or_else(|| ReportError::MissingCounterpart(a.key.describe()))?;
        let pick = |cell: &ReportCell| DELTA_METRICS.map(|m| cell.value(m));
        let (cv, av) = (pick(c), pick(a));
        let delta: [Option<i64>; 4] =
            std::array::from_fn(|k| Some(tenths(av[k]?) - tenths(cv[k]?)));
        rows.push(DeltaRow {
            key: a.key.clone(),
            clear: cv,
            ambiguous: av,
            delta_tenths: delta,
            clear_records: c.records,
            ambiguous_records: a.records,
        });
    }
    rows.sort_by(|x, y| x.key.cmp(&y.key));
    Ok(rows)
}

pub fn render_delta_value(tenths: Option<i64>) -> String {
    tenths.map_or(UNDEFINED.to_string(), signed_tenths)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or(UNDEFINED.to_string(), pct)
}

/// Clear / Ambiguous / Δ rows per key.
pub fn render_delta_table(rows: &[DeltaRow]) -> String {
    let mut out = String::new();
    for row in rows {
        let _ = writeln!(out, "**{}**\n", row.key.describe());
        out.push_str("| | EM/Acc | Halluc. | Claim Recall | Ctx. Prec. |\n|---|---|---|---|---|\n");
        let line = |label: String, vals: Vec<String>| format!("| {label} | {} |\n", vals.join(" | "));
        out.push_str(&line(format!("Clear ({})", row.clear_records), row.clear.iter().map(|v| opt_pct(*v)).collect()));
        out.push_str(&line(
            format!("Ambiguous ({})", row.ambiguous_records),
            row.ambiguous.iter().map(|v| opt_pct(*v)).collect(),
        ));
        out.push_str(&line(
            "Δ (Ambig − Clear)".into(),
            row.delta_tenths.iter().map(|v| render_delta_value(*v)).collect(),
        ));
        out.push('\n');
    }
    out
}

fn trim_decimal(v: f64) -> String {
    let s = format!("{v:.1}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// Dataset statistics table.
pub fn render_dataset_stats(stats: &[DatasetStats]) -> String {
    let mut out = String::from(
        "| Dataset | Domain | Two-way filter | Avg. Img (px) | Max Q | Max A | Avg Q | Avg A | Ambig.# |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for s in stats {
        let img = s
            .avg_img_px
            .map_or(UNDEFINED.to_string(), |(w, h)| format!("{}×{}", w.round(), h.round()));
        let _ = writeln!(
            out,
            "| {} | {} | {}/{} | {img} | {} | {} | {} | {} | {}/{} |",
            s.dataset_id.display_name(),
            s.dataset_id.domain(),
            s.retained_count,
            s.item_count,
            s.max_q_len,
            s.max_a_len,
            trim_decimal(s.avg_q_len),
            trim_decimal(s.avg_a_len),
            s.ambiguous_count,
            s.item_count
        );
    }
    out
}

/// Pivots one metric: rows and columns are labelled by the given functions;
/// columns keep first-seen order after sorting by `col_order`.
fn pivot<R: Ord + Clone, C: Ord + Clone>(
    cells: &[ReportCell],
    metric: &str,
    row: impl Fn(&ReportKey) -> R,
    col: impl Fn(&ReportKey) -> C,
    row_label: impl Fn(&R) -> Vec<String>,
    col_label: impl Fn(&C) -> String,
    row_header: &[&str],
) -> String {
    let rows: BTreeSet<R> = cells.iter().map(|c| row(&c.key)).collect();
    let cols: BTreeSet<C> = cells.iter().map(|c| col(&c.key)).collect();
    let mut value: BTreeMap<(R, C), Option<f64>> = BTreeMap::new();
    for c in cells {
        value.insert((row(&c.key), col(&c.key)), c.value(metric));
    }
    let mut out = format!("| {} |", row_header.join(" | "));
    for c in &cols {
        let _ = write!(out, " {} |", col_label(c));
    }
    out.push_str("\n|");
    for _ in 0..row_header.len() + cols.len() {
        out.push_str("---|");
    }
    out.push('\n');
    for r in &rows {
        let _ = write!(out, "| {} |", row_label(r).join(" | "));
        for c in &cols {
            let v = value.get(&(r.clone(), c.clone())).copied().flatten();
            let _ = write!(out, " {} |", opt_pct(v));
        }
        out.push('\n');
    }
    out
}

/// EM/Acc by dataset, with a Filt/Full column pair per model.
pub fn render_end_task_table(cells: &[ReportCell]) -> String {
    pivot(
        cells,
        "em",
        |k| (k.dataset, k.mode, k.prompt.clone()),
        |k| (k.model.clone(), k.split),
        |(d, m, p)| vec![d.display_name().into(), m.short_name().into(), p.clone()],
        |(model, split)| {
            let s = match split {
                SplitFlag::Filtered => "Filt",
                SplitFlag::Full => "Full",
            };
            format!("{model} {s}")
        },
        &["Dataset", "Mode", "Prompt"],
    )
}

/// EM/Acc by dataset, with DO/GPD/GO columns per model.
pub fn render_mode_table(cells: &[ReportCell]) -> String {
    let mode_rank = |m: RetrievalMode| match m {
        RetrievalMode::DistractorsOnly => 0,
        RetrievalMode::GtPlusDistractors => 1,
        RetrievalMode::GtOnly => 2,
    };
    pivot(
        cells,
        "em",
        |k| (k.dataset, k.split, k.prompt.clone()),
        |k| (k.model.clone(), mode_rank(k.mode), k.mode),
        |(d, s, p)| vec![d.display_name().into(), split_name(*s).into(), p.clone()],
        |(model, _, mode)| format!("{model} {}", mode.short_name()),
        &["Dataset", "Split", "Prompt"],
    )
}

fn pair(c: &ReportCell, a: &str, b: &str) -> String {
    format!("{}/{}", opt_pct(c.value(a)), opt_pct(c.value(b)))
}

/// Claim-level diagnostics per cell, with per-modality pairs as img/txt.
pub fn render_claim_table(cells: &[ReportCell]) -> String {
    let mut out = String::from(
        "| Dataset | Model | Split | Mode | Prompt | Recall (img/txt) | Precision (img/txt) | F1 (img/txt) | \
         Halluc. | Faith. | Self-know. | Claim R. (img/txt) | Ctx.Prec. (img/txt) |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for c in cells {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            c.key.dataset.display_name(),
            c.key.model,
            split_name(c.key.split),
            c.key.mode.short_name(),
            c.key.prompt,
            pair(c, "recall_img", "recall_txt"),
            pair(c, "precision_img", "precision_txt"),
            pair(c, "f1_img", "f1_txt"),
            opt_pct(c.value("hallucination")),
            opt_pct(c.value("faithfulness")),
            opt_pct(c.value("self_knowledge")),
            pair(c, "cr_img", "cr_txt"),
            pair(c, "cp_img", "cp_txt"),
        );
    }
    out.push_str("\nPer-modality recall, precision and F1 are reconstructed definitions.\n");
    out
}

/// Cross-modality diagnostics per cell.
pub fn render_cross_modality_table(cells: &[ReportCell]) -> String {
    let mut out = String::from(
        "| Dataset | Model | Split | Mode | Prompt | ΔCR | ΔCP | VIS-Hit@k | TXT-MissRate | CMA | V-HR | D-HR |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for c in cells {
        let _ = write!(
            out,
            "| {} | {} | {} | {} | {} |",
            c.key.dataset.display_name(),
            c.key.model,
            split_name(c.key.split),
            c.key.mode.short_name(),
            c.key.prompt
        );
        for m in ["delta_cr", "delta_cp", "vis_hit_at_k", "txt_miss_rate", "cma", "v_hr", "d_hr"] {
            let _ = write!(out, " {} |", render_metric(m, c.value(m)));
        }
        out.push('\n');
    }
    out
}

/// Provenance of one stage run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub embeddings_hash: String,
    pub cache_hash: String,
    pub backend_kinds: Vec<String>,
    /// Digest over every field above; equal digests mean the stage can be skipped.
    pub inputs_hash: String,
    pub timestamp: u64,
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stage: &str,
        config_hash: String,
        corpus_hash: String,
        embeddings_hash: String,
        cache_hash: String,
        backend_kinds: Vec<String>,
        upstream: &[&str],
    ) -> Self {
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let mut h = Sha256::new();
        for part in [stage, &tool_version, &config_hash, &corpus_hash, &embeddings_hash, &cache_hash] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for part in backend_kinds.iter().map(String::as_str).chain(upstream.iter().copied()) {
            h.update(part.as_bytes());
            h.update([0]);
        }
        RunManifest {
            schema_version: REPORT_SCHEMA_VERSION,
            stage: stage.to_string(),
            tool_version,
            config_hash,
            corpus_hash,
            embeddings_hash,
            cache_hash,
            backend_kinds,
            inputs_hash: hex::encode(h.finalize()),
            timestamp: timestamp(),
        }
    }
}

/// `SOURCE_DATE_EPOCH` when set, else the current Unix time.
pub fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file, or of every file under a directory (relative paths and
/// contents, in sorted order). A missing path hashes as "absent".
pub fn hash_path(path: &Path) -> String {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) {
        let Ok(rd) = fs::read_dir(dir) else { return };
        for entry in rd.flatten() {
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.push((rel, p));
            }
        }
    }
    if path.is_file() {
        return fs::read(path).map_or_else(|_| "absent".into(), |b| hash_bytes(&b));
    }
    if !path.is_dir() {
        return "absent".into();
    }
    let mut files = Vec::new();
    walk(path, path, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(&p).unwrap_or_default());
        h.update([0]);
    }
    hex::encode(h.finalize())
}
