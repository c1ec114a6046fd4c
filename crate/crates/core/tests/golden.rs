//! Bit-exact golden files for a hand-traced check and the report rendered
//! from it. Set UPDATE_GOLDEN=1 to rewrite them after a reviewed change.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use claimcheck::checker::{check_answer, CheckConfig, CheckResult, ClaimVerdict, JudgmentMatrix, Cell, CHECK_SCHEMA_VERSION};
use claimcheck::corpus::{DatasetId, EvidenceItem, QueryRecord, SplitFlag};
use claimcheck::judges::Label::{self, Contradiction as C, Entailment as E, Neutral as N};
use claimcheck::reporting::{aggregate_runs, render_csv, render_jsonl, render_markdown, RecordOutcome, ReportKey};
use claimcheck::retrieval::{Caps, EvidencePack, PackedItem, Provenance, RetrievalMode};
use common::{fixture, ScriptedBackend};

const ANSWER: &str = "The tower is red. It opened to visitors. It is made of glass.";
const CLAIMS: [&str; 3] = ["The tower is red.", "It opened to visitors.", "It is made of glass."];
const EVIDENCE: [&str; 4] = ["img-a", "img-b", "txt-a", "txt-b"];
const SCRIPT: [[Label; 4]; 3] = [[E, N, N, N], [N, N, E, C], [C, N, N, N]];

fn packed(item: EvidenceItem, provenance: Provenance) -> PackedItem {
    PackedItem {
        item,
        provenance,
        score: None,
    }
}

fn inputs() -> (QueryRecord, EvidencePack) {
    let mut record = QueryRecord::new("golden-1", DatasetId::Webqa, "Describe the tower.", "red", "");
    record.gold_image_ids = vec!["img-a".into()];
    record.gold_text_ids = vec!["txt-a".into()];
    let pack = EvidencePack {
        record_id: "golden-1".into(),
        mode: RetrievalMode::GtPlusDistractors,
        images: vec![
            packed(EvidenceItem::image("img-a", "img-a.png", None), Provenance::Gold),
            packed(EvidenceItem::image("img-b", "img-b.png", None), Provenance::Distractor),
        ],
        texts: vec![
            packed(EvidenceItem::text("txt-a", "A tower."), Provenance::Gold),
            packed(EvidenceItem::text("txt-b", "A bridge."), Provenance::Distractor),
        ],
        caps: Caps { k_img: 2, k_txt: 2 },
        sampling_seed: 0,
    };
    (record, pack)
}

/// Stages 1 to 3 worked by hand from SCRIPT.
fn hand_trace() -> CheckResult {
    let cells = |cols: std::ops::Range<usize>| -> Vec<Vec<Cell>> {
        SCRIPT.iter().map(|row| row[cols.clone()].iter().map(|l| Cell::of(*l)).collect()).collect()
    };
    let verdict = |index: usize, label, s_img, s_txt, ids: &[&str]| ClaimVerdict {
        index,
        claim: CLAIMS[index].into(),
        label,
        s_img,
        s_txt,
        reference_entailed: false,
        entailing_evidence_ids: ids.iter().map(|s| s.to_string()).collect(),
        matches_gold: None,
    };
    CheckResult {
        schema_version: CHECK_SCHEMA_VERSION,
        record_id: "golden-1".into(),
        mode: RetrievalMode::GtPlusDistractors,
        matrix: JudgmentMatrix {
            claims: CLAIMS.iter().map(|s| s.to_string()).collect(),
            image_ids: vec!["img-a".into(), "img-b".into()],
            text_ids: vec!["txt-a".into(), "txt-b".into()],
            image_cells: cells(0..2),
            text_cells: cells(2..4),
            reference: None,
        },
        verdicts: vec![
            // img-a entails.
            verdict(0, E, true, false, &["img-a"]),
            // txt-a entails; txt-b's contradiction loses to it.
            verdict(1, E, false, true, &["txt-a"]),
            // Only img-a contradicts.
            verdict(2, C, false, false, &[]),
        ],
        unjudgeable: Vec::new(),
        used_evidence_ids: BTreeSet::from(["img-a".to_string(), "txt-a".to_string()]),
        caps: Caps { k_img: 2, k_txt: 2 },
        gold: None,
        gold_excluded: Some("gold long answer is empty".into()),
        judging_error_count: 0,
    }
}

fn scripted() -> ScriptedBackend {
    let mut backend = ScriptedBackend::default();
    for (claim, row) in CLAIMS.iter().zip(SCRIPT) {
        for (id, label) in EVIDENCE.iter().zip(row) {
            backend = backend.label(claim, id, label);
        }
    }
    backend
}

fn check_golden(name: &str, actual: &str) {
    let path = fixture("golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", display(&path)));
    assert_eq!(actual, expected, "{} differs", display(&path));
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn checked() -> CheckResult {
    let (record, pack) = inputs();
    check_answer(&record, &pack, ANSWER, &scripted(), &CheckConfig::default()).unwrap()
}

#[test]
fn check_equals_hand_trace() {
    let got = checked();
    assert_eq!(got, hand_trace());
    check_golden("check_3x2x2.json", &(serde_json::to_string(&got).unwrap() + "\n"));
}

#[test]
fn report_is_byte_identical() {
    let key = ReportKey {
        dataset: DatasetId::Webqa,
        model: "golden".into(),
        split: SplitFlag::Full,
        mode: RetrievalMode::GtPlusDistractors,
        prompt: "expert1-direct".into(),
    };
    let outcomes = [
        RecordOutcome {
            key: key.clone(),
            record_id: "golden-1".into(),
            check: Some(checked()),
            em: Some(1),
            rouge_l: Some(0.5),
            failure: None,
        },
        RecordOutcome {
            key,
            record_id: "golden-2".into(),
            check: None,
            em: None,
            rouge_l: None,
            failure: Some("generation_error".into()),
        },
    ];
    let cells = aggregate_runs(&outcomes);
    check_golden("report.csv", &render_csv(&cells));
    check_golden("report.md", &render_markdown(&cells));
    check_golden("report.jsonl", &render_jsonl(&cells));
}
