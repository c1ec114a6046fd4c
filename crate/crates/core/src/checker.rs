//! Claim-level checking of one generated answer: extract claims, judge every
//! (claim, evidence) pair, aggregate per claim, mark used evidence and match
//! gold claims.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EvidenceItem, QueryRecord};
use crate::judges::{extract_claims, judge_entailment, Backend, Judgment, Label, PromptConfig};
use crate::retrieval::{Caps, EvidencePack, RetrievalMode};

pub const CHECK_SCHEMA_VERSION: u32 = 1;

/// Evidence id used for the reference pseudo-evidence item.
pub const REFERENCE_ID: &str = "__reference__";
const GENERATED_ID: &str = "__generated__";

/// One (claim, evidence) outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Judged(Judgment),
    Errored(String),
}

impl Cell {
    pub fn label(&self) -> Option<Label> {
        match self {
            Cell::Judged(j) => Some(j.value),
            Cell::Errored(_) => None,
        }
    }

    pub fn of(label: Label) -> Self {
        Cell::Judged(Judgment::new(label))
    }
}

/// Stage 2 output. Rows are claims; columns are pack images and texts in pack
/// order. `reference` holds one optional extra column for the gold long answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentMatrix {
    pub claims: Vec<String>,
    pub image_ids: Vec<String>,
    pub text_ids: Vec<String>,
    pub image_cells: Vec<Vec<Cell>>,
    pub text_cells: Vec<Vec<Cell>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<Cell>>,
}

impl JudgmentMatrix {
    pub fn image_judgments(&self, claim: usize) -> Vec<Label> {
        self.image_cells[claim].iter().filter_map(Cell::label).collect()
    }

    pub fn text_judgments(&self, claim: usize) -> Vec<Label> {
        self.text_cells[claim].iter().filter_map(Cell::label).collect()
    }

    pub fn reference_judgment(&self, claim: usize) -> Option<Label> {
        self.reference.as_ref().and_then(|r| r[claim].label())
    }

    pub fn error_count(&self) -> usize {
        let grid = self
            .image_cells
            .iter()
            .chain(&self.text_cells)
            .flatten()
            .chain(self.reference.iter().flatten());
        grid.filter(|c| matches!(c, Cell::Errored(_))).count()
    }

    fn check_shape(&self) {
        let n = self.claims.len();
        assert_eq!(self.image_cells.len(), n, "image rows");
        assert_eq!(self.text_cells.len(), n, "text rows");
        assert!(self.image_cells.iter().all(|r| r.len() == self.image_ids.len()));
        assert!(self.text_cells.iter().all(|r| r.len() == self.text_ids.len()));
        if let Some(r) = &self.reference {
            assert_eq!(r.len(), n, "reference rows");
        }
    }
}

/// Precedence rule over the union of both multisets: Entailment if any,
/// else Contradiction if any, else Neutral. `None` when both are empty.
pub fn aggregate_label(image: &[Label], text: &[Label]) -> Option<Label> {
    let all = || image.iter().chain(text);
    if all().next().is_none() {
        None
    } else if all().any(|l| *l == Label::Entailment) {
        Some(Label::Entailment)
    } else if all().any(|l| *l == Label::Contradiction) {
        Some(Label::Contradiction)
    } else {
        Some(Label::Neutral)
    }
}

/// (s_img, s_txt): some image / some text judgment is Entailment.
pub fn derive_flags(matrix: &JudgmentMatrix, claim: usize) -> (bool, bool) {
    (
        matrix.image_judgments(claim).contains(&Label::Entailment),
        matrix.text_judgments(claim).contains(&Label::Entailment),
    )
}

/// Evidence ids whose column holds at least one Entailment.
pub fn mark_used(matrix: &JudgmentMatrix) -> BTreeSet<String> {
    let mut used = BTreeSet::new();
    let columns = [
        (&matrix.image_ids, &matrix.image_cells),
        (&matrix.text_ids, &matrix.text_cells),
    ];
    for (ids, rows) in columns {
        for (col, id) in ids.iter().enumerate() {
            if rows.iter().any(|row| row[col].label() == Some(Label::Entailment)) {
                used.insert(id.clone());
            }
        }
    }
    used
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    pub index: usize,
    pub claim: String,
    pub label: Label,
    pub s_img: bool,
    pub s_txt: bool,
    /// Entailed by the reference column while the reference channel is on.
    pub reference_entailed: bool,
    pub entailing_evidence_ids: BTreeSet<String>,
    /// Whether the reference long answer entails this claim. `None` without a
    /// reference or when that judgment failed.
    pub matches_gold: Option<bool>,
}

/// Stage 3 over a finished matrix. Claims with no settled judgment come back
/// in the second list (by index).
pub fn verdicts(matrix: &JudgmentMatrix, reference_channel: bool) -> (Vec<ClaimVerdict>, Vec<usize>) {
    matrix.check_shape();
    let mut out = Vec::new();
    let mut unjudgeable = Vec::new();
    for (i, claim) in matrix.claims.iter().enumerate() {
        let mut text = matrix.text_judgments(i);
        let reference = matrix.reference_judgment(i);
        let reference_entailed = reference_channel && reference == Some(Label::Entailment);
        if reference_channel {
            text.extend(reference);
        }
        let Some(label) = aggregate_label(&matrix.image_judgments(i), &text) else {
            unjudgeable.push(i);
            continue;
        };
        let (s_img, s_txt) = derive_flags(matrix, i);
        let mut entailing = BTreeSet::new();
        for (ids, rows) in [
            (&matrix.image_ids, &matrix.image_cells),
            (&matrix.text_ids, &matrix.text_cells),
        ] {
            for (id, cell) in ids.iter().zip(&rows[i]) {
                if cell.label() == Some(Label::Entailment) {
                    entailing.insert(id.clone());
                }
            }
        }
        out.push(ClaimVerdict {
            index: i,
            claim: claim.clone(),
            label,
            s_img,
            s_txt,
            reference_entailed,
            entailing_evidence_ids: entailing,
            matches_gold: reference.map(|l| l == Label::Entailment),
        });
    }
    (out, unjudgeable)
}

/// One mined gold claim: whether the generated answer entails it, and whether
/// pack images / texts entail it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldCheck {
    pub claim: String,
    pub matched: bool,
    pub s_img: bool,
    pub s_txt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub schema_version: u32,
    pub record_id: String,
    pub mode: RetrievalMode,
    pub matrix: JudgmentMatrix,
    pub verdicts: Vec<ClaimVerdict>,
    pub unjudgeable: Vec<usize>,
    pub used_evidence_ids: BTreeSet<String>,
    pub caps: Caps,
    /// `None` when the record is excluded from claim recall.
    pub gold: Option<Vec<GoldCheck>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_excluded: Option<String>,
    pub judging_error_count: usize,
}

impl CheckResult {
    pub fn image_ids(&self) -> &[String] {
        &self.matrix.image_ids
    }

    pub fn text_ids(&self) -> &[String] {
        &self.matrix.text_ids
    }

    pub fn evidence_count(&self) -> usize {
        self.matrix.image_ids.len() + self.matrix.text_ids.len()
    }

    pub fn used_images(&self) -> usize {
        self.matrix.image_ids.iter().filter(|id| self.used_evidence_ids.contains(*id)).count()
    }

    pub fn used_texts(&self) -> usize {
        self.matrix.text_ids.iter().filter(|id| self.used_evidence_ids.contains(*id)).count()
    }

    pub fn gold_matches(&self) -> Option<Vec<bool>> {
        self.gold.as_ref().map(|g| g.iter().map(|c| c.matched).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Judge claims against the gold long answer as an extra pseudo-evidence
    /// item that may make a claim Entailment. Off by default.
    pub reference_channel: bool,
    pub prompt: PromptConfig,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CheckError {
    #[error("check_failed for {record_id}: all {attempted} judgments errored (first: {first})")]
    CheckFailed {
        record_id: String,
        attempted: usize,
        first: String,
    },
    #[error("pack for {pack} does not belong to record {record}")]
    PackMismatch { record: String, pack: String },
}

fn judge_cell(claim: &str, evidence: &EvidenceItem, backend: &dyn Backend, prompt: &PromptConfig) -> Cell {
    match judge_entailment(claim, evidence, backend, prompt) {
        Ok(j) => Cell::Judged(j),
        Err(e) => {
            log::debug!("judging error on {}: {e}", evidence.evidence_id);
            Cell::Errored(e.to_string())
        }
    }
}

/// Judges every claim against every item, concurrently, keeping row order.
fn judge_grid(
    claims: &[String],
    items: &[&EvidenceItem],
    backend: &dyn Backend,
    prompt: &PromptConfig,
) -> Vec<Vec<Cell>> {
    let pairs: Vec<(usize, usize)> = (0..claims.len())
        .flat_map(|c| (0..items.len()).map(move |e| (c, e)))
        .collect();
    let cells: Vec<Cell> = pairs
        .par_iter()
        .map(|&(c, e)| judge_cell(&claims[c], items[e], backend, prompt))
        .collect();
    let width = items.len();
    let mut rows = Vec::with_capacity(claims.len());
    let mut it = cells.into_iter();
    for _ in 0..claims.len() {
        rows.push(it.by_ref().take(width).collect());
    }
    rows
}

/// Each gold claim mined from the reference, judged against the whole
/// generated answer. An empty generated answer matches nothing.
pub fn match_gold_claims(
    gold_long_answer: &str,
    generated_long_answer: &str,
    backend: &dyn Backend,
    prompt: &PromptConfig,
) -> Result<Vec<bool>, String> {
    if gold_long_answer.trim().is_empty() {
        return Err("gold long answer is empty".into());
    }
    let gold = extract_claims(gold_long_answer, backend);
    let generated = EvidenceItem::text(GENERATED_ID, generated_long_answer);
    gold_matches(&gold, &generated, backend, prompt)
}

fn gold_matches(
    gold: &[String],
    generated: &EvidenceItem,
    backend: &dyn Backend,
    prompt: &PromptConfig,
) -> Result<Vec<bool>, String> {
    if generated.content_ref.trim().is_empty() {
        return Ok(vec![false; gold.len()]);
    }
    gold.par_iter()
        .map(|g| match judge_cell(g, generated, backend, prompt) {
            Cell::Judged(j) => Ok(j.value == Label::Entailment),
            Cell::Errored(e) => Err(e),
        })
        .collect()
}

fn any_entailed(row: &[Cell]) -> bool {
    row.iter().any(|c| c.label() == Some(Label::Entailment))
}

/// Runs claim extraction, judging and aggregation for one record.
pub fn check_answer(
    record: &QueryRecord,
    pack: &EvidencePack,
    generated_long: &str,
    backend: &dyn Backend,
    config: &CheckConfig,
) -> Result<CheckResult, CheckError> {
    if pack.record_id != record.record_id {
        return Err(CheckError::PackMismatch {
            record: record.record_id.clone(),
            pack: pack.record_id.clone(),
        });
    }
    let prompt = &config.prompt;
    let claims = extract_claims(generated_long, backend);
    let images: Vec<&EvidenceItem> = pack.images.iter().map(|p| &p.item).collect();
    let texts: Vec<&EvidenceItem> = pack.texts.iter().map(|p| &p.item).collect();
    let has_reference = !record.long_answer.trim().is_empty();
    let reference_item = EvidenceItem::text(REFERENCE_ID, record.long_answer.clone());

    let matrix = JudgmentMatrix {
        image_cells: judge_grid(&claims, &images, backend, prompt),
        text_cells: judge_grid(&claims, &texts, backend, prompt),
        reference: has_reference.then(|| {
            judge_grid(&claims, &[&reference_item], backend, prompt)
                .into_iter()
                .map(|mut row| row.remove(0))
                .collect()
        }),
        image_ids: images.iter().map(|i| i.evidence_id.clone()).collect(),
        text_ids: texts.iter().map(|i| i.evidence_id.clone()).collect(),
        claims,
    };

    let (gold, gold_excluded, gold_errors, gold_attempted) = if has_reference {
        let gold_claims = extract_claims(&record.long_answer, backend);
        let generated = EvidenceItem::text(GENERATED_ID, generated_long);
        let img_rows = judge_grid(&gold_claims, &images, backend, prompt);
        let txt_rows = judge_grid(&gold_claims, &texts, backend, prompt);
        let attempted = gold_claims.len() * (images.len() + texts.len() + 1);
        let errors = img_rows.iter().chain(&txt_rows).flatten().filter(|c| matches!(c, Cell::Errored(_))).count();
        match gold_matches(&gold_claims, &generated, backend, prompt) {
            Ok(matched) => {
                let checks = gold_claims
                    .into_iter()
                    .zip(matched)
                    .zip(img_rows.iter().zip(&txt_rows))
                    .map(|((claim, matched), (img, txt))| GoldCheck {
                        claim,
                        matched,
                        s_img: any_entailed(img),
                        s_txt: any_entailed(txt),
                    })
                    .collect();
                (Some(checks), None, errors, attempted)
            }
            Err(e) => {
                log::warn!("record {} excluded from claim recall: {e}", record.record_id);
                (None, Some(format!("gold matching failed: {e}")), errors + 1, attempted)
            }
        }
    } else {
        log::warn!("record {} has no gold long answer; claim recall undefined", record.record_id);
        (None, Some("gold long answer is empty".to_string()), 0, 0)
    };

    let matrix_cells = matrix.claims.len() * (matrix.image_ids.len() + matrix.text_ids.len())
        + matrix.reference.as_ref().map_or(0, Vec::len);
    let matrix_errors = matrix.error_count();
    let attempted = matrix_cells + gold_attempted;
    let errors = matrix_errors + gold_errors;
    if attempted > 0 && errors >= attempted {
        let first = first_error(&matrix).unwrap_or_else(|| "gold judging failed".into());
        return Err(CheckError::CheckFailed {
            record_id: record.record_id.clone(),
            attempted,
            first,
        });
    }
    if matrix_errors > 0 {
        log::warn!("record {}: {matrix_errors} judging errors excluded", record.record_id);
    }

    let (verdicts, unjudgeable) = verdicts(&matrix, config.reference_channel);
    Ok(CheckResult {
        schema_version: CHECK_SCHEMA_VERSION,
        record_id: record.record_id.clone(),
        mode: pack.mode,
        used_evidence_ids: mark_used(&matrix),
        matrix,
        verdicts,
        unjudgeable,
        caps: pack.caps,
        gold,
        gold_excluded,
        judging_error_count: matrix_errors,
    })
}

fn first_error(matrix: &JudgmentMatrix) -> Option<String> {
    matrix
        .image_cells
        .iter()
        .chain(&matrix.text_cells)
        .flatten()
        .chain(matrix.reference.iter().flatten())
        .find_map(|c| match c {
            Cell::Errored(e) => Some(e.clone()),
            Cell::Judged(_) => None,
        })
}
