//! Judge behaviour replayed from a recorded response cache.
//!
//! The fixtures under tests/fixtures/replay were produced once by
//! `cargo test --test replay -- --ignored record_fixtures`, which routes a
//! scripted reference backend through a RecordingBackend.

mod common;

use std::path::PathBuf;
use std::sync::Arc;

use claimcheck::checker::match_gold_claims;
use claimcheck::corpus::{AmbiguityLabel, EvidenceItem};
use claimcheck::judges::{
    classify_ambiguity, closed_book_probe, extract_claims, judge_entailment, rewrite, Backend, JudgeError, Label,
    PromptConfig, RecordingBackend, ReplayBackend, Response, ResponseCache, RewriteKind, Task, INCONCLUSIVE,
};
use claimcheck::retrieval::{Caps, EvidencePack, PackedItem, Provenance, RetrievalMode};
use common::{fixture, ScriptedBackend};
use serde_json::json;

const SPLIT_SENTENCE: &str = "Revenue rose 5% while costs fell 2%.";
const GOLD_LONG: &str = "The marmot is large. It lives in burrows. It whistles when alarmed.";
const GENERATED: &str = "The marmot is large and whistles when alarmed.";

fn replay_dir() -> PathBuf {
    fixture("replay")
}

fn reference_backend() -> ScriptedBackend {
    let answer = |a: &str, c: serde_json::Value| Response {
        answer: Some(a.into()),
        confidence: Some(c),
        ..Default::default()
    };
    let label = |l: &str, why: &str| Response {
        label: Some(l.into()),
        rationale: Some(why.into()),
        ..Default::default()
    };
    let rewritten = |a: &str| Response {
        answer: Some(a.into()),
        ..Default::default()
    };
    ScriptedBackend::default()
        .with(Task::ClosedBook, "What is the capital of France?", answer("Paris", json!(0.97)))
        .with(Task::ClosedBook, "Who painted the ceiling?", answer("Michelangelo", json!("high")))
        .with(Task::ClassifyAmbiguity, "When did it peak?", label("AMBIGUOUS", "No referent for it."))
        .with(Task::ClassifyAmbiguity, "What is 2+2?", label("CLEAR", "Arithmetic with one answer."))
        .with(Task::RewriteQuery, "When did it peak?", rewritten("When did the 2019 revenue curve peak?"))
        .with(Task::RewriteAnswer, "What does the chart show?", rewritten(INCONCLUSIVE))
        .with(
            Task::SplitClaims,
            SPLIT_SENTENCE,
            Response {
                claims: Some(vec!["Revenue rose 5%.".into(), "Costs fell 2%.".into()]),
                ..Default::default()
            },
        )
        .label("The bridge is open.", "txt-1", Label::Contradiction)
        .label("The marmot is large.", "__generated__", Label::Entailment)
        .label("It lives in burrows.", "__generated__", Label::Neutral)
        .label("It whistles when alarmed.", "__generated__", Label::Entailment)
}

fn pack() -> EvidencePack {
    EvidencePack {
        record_id: "r1".into(),
        mode: RetrievalMode::GtOnly,
        images: Vec::new(),
        texts: vec![PackedItem {
            item: EvidenceItem::text("txt-1", "Revenue by year."),
            provenance: Provenance::Gold,
            score: None,
        }],
        caps: Caps::default(),
        sampling_seed: 0,
    }
}

struct Outcomes {
    probe: Result<(String, f64), JudgeError>,
    probe_bad_confidence: Result<(String, f64), JudgeError>,
    ambiguous: AmbiguityLabel,
    clear: AmbiguityLabel,
    query: (String, bool),
    answer: (String, bool),
    split: Vec<String>,
    verdict: Result<Label, JudgeError>,
    gold: Result<Vec<bool>, String>,
}

fn run_scenarios(backend: &dyn Backend) -> Outcomes {
    let prompt = PromptConfig::default();
    let probe = |q: &str| closed_book_probe(q, backend).map(|p| (p.answer, p.confidence));
    let query = rewrite(RewriteKind::Query, "When did it peak?", &pack(), "When did it peak?", backend).unwrap();
    let answer = rewrite(RewriteKind::Answer, "What does the chart show?", &pack(), "It rose.", backend).unwrap();
    Outcomes {
        probe: probe("What is the capital of France?"),
        probe_bad_confidence: probe("Who painted the ceiling?"),
        ambiguous: classify_ambiguity("When did it peak?", None, backend).label,
        clear: classify_ambiguity("What is 2+2?", None, backend).label,
        query: (query.text, query.rewritten),
        answer: (answer.text, answer.rewritten),
        split: extract_claims(SPLIT_SENTENCE, backend),
        verdict: judge_entailment("The bridge is open.", &EvidenceItem::text("txt-1", "The bridge is closed."), backend, &prompt)
            .map(|j| j.value),
        gold: match_gold_claims(GOLD_LONG, GENERATED, backend, &prompt),
    }
}

fn replayed() -> Outcomes {
    let cache = ResponseCache::new(replay_dir()).unwrap();
    run_scenarios(&ReplayBackend::new(cache, false))
}

#[test]
#[ignore = "rewrites the shipped replay fixtures"]
fn record_fixtures() {
    let dir = replay_dir();
    let _ = std::fs::remove_dir_all(&dir);
    let recorder = RecordingBackend::new(ResponseCache::new(dir).unwrap(), Arc::new(reference_backend()));
    let out = run_scenarios(&recorder);
    assert_eq!(out.split.len(), 2);
}

#[test]
fn probe_replays_recorded_pair() {
    assert_eq!(replayed().probe.unwrap(), ("Paris".to_string(), 0.97));
}

#[test]
fn non_numeric_confidence_is_a_probe_error() {
    assert!(matches!(replayed().probe_bad_confidence, Err(JudgeError::Malformed(_))));
}

#[test]
fn ambiguity_verdicts_replay() {
    let out = replayed();
    assert_eq!(out.ambiguous, AmbiguityLabel::Ambiguous);
    assert_eq!(out.clear, AmbiguityLabel::Clear);
}

#[test]
fn rewrites_replay() {
    let out = replayed();
    assert_eq!(out.query, ("When did the 2019 revenue curve peak?".to_string(), true));
    assert_eq!(out.answer, (INCONCLUSIVE.to_string(), true));
}

#[test]
fn compound_comparison_splits_per_recorded_fixture() {
    assert_eq!(replayed().split, ["Revenue rose 5%.", "Costs fell 2%."]);
}

#[test]
fn recorded_contradiction_replays_without_inner_backend() {
    assert_eq!(replayed().verdict.unwrap(), Label::Contradiction);
}

#[test]
fn gold_matches_follow_recorded_verdicts() {
    assert_eq!(replayed().gold.unwrap(), [true, false, true]);
}

#[test]
fn novel_request_is_missing_fixture() {
    let cache = ResponseCache::new(replay_dir()).unwrap();
    let err = closed_book_probe("An unrecorded question?", &ReplayBackend::new(cache, false)).unwrap_err();
    assert!(err.to_string().starts_with("missing_fixture"), "{err}");
}
