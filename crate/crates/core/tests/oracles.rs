//! Library results against independent recounts, plus property tests.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use claimcheck::checker::{mark_used, verdicts, Cell, CheckResult, GoldCheck};
use claimcheck::corpus::{token_len, CorpusStore, DatasetId, EvidenceItem, QueryRecord, SplitFlag};
use claimcheck::filtering::{cohen_kappa, difficulty_filter, DifficultySignals, FilterConfig};
use claimcheck::judges::Label::{self, Contradiction as C, Entailment as E, Neutral as N};
use claimcheck::metrics::{core_metrics, cross_modality_metrics, per_modality_prf, rouge_l};
use claimcheck::retrieval::{assemble_evidence, Caps, EmbeddingStore, RetrievalMode};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn result_from(matrix: claimcheck::checker::JudgmentMatrix, caps: Caps, gold: Option<Vec<GoldCheck>>) -> CheckResult {
    let (v, unjudgeable) = verdicts(&matrix, false);
    CheckResult {
        schema_version: claimcheck::checker::CHECK_SCHEMA_VERSION,
        record_id: "r".into(),
        mode: RetrievalMode::GtPlusDistractors,
        used_evidence_ids: mark_used(&matrix),
        judging_error_count: 0,
        matrix,
        verdicts: v,
        unjudgeable,
        caps,
        gold_excluded: None,
        gold,
    }
}

#[test]
fn claim_rates_from_labels() {
    // One text column; labels E, N, N, C.
    let m = matrix_from_labels(vec![vec![]; 4], vec![vec![E], vec![N], vec![N], vec![C]]);
    let got = core_metrics(&result_from(m, Caps::default(), None));
    assert_eq!(got.hallucination_rate, Some(0.5));
    assert_eq!(got.faithfulness, Some(0.25));
    assert_eq!(got.contradiction_rate, Some(0.25));
}

#[test]
fn context_precision_example() {
    // 6 items; the first image and the second text are used.
    let m = matrix_from_labels(vec![vec![E, N, N]], vec![vec![N, E, N]]);
    let r = result_from(m, Caps { k_img: 3, k_txt: 3 }, None);
    assert_eq!(core_metrics(&r).context_precision, Some(1.0 / 3.0));
}

#[test]
fn coverage_example() {
    // 3 images, one entailing; 3 texts, none entailing.
    let m = matrix_from_labels(vec![vec![E, N, N]], vec![vec![N, N, N]]);
    let x = cross_modality_metrics(&[result_from(m, Caps { k_img: 3, k_txt: 3 }, None)]).unwrap();
    assert_eq!(x.vis_hit_at_k, Some(1.0 / 3.0));
    assert_eq!(x.txt_miss_rate, Some(1.0));
}

#[test]
fn cma_example() {
    let m = matrix_from_labels(vec![vec![E], vec![E], vec![N]], vec![vec![E], vec![N], vec![N]]);
    let x = cross_modality_metrics(&[result_from(m, Caps::default(), None)]).unwrap();
    assert_eq!(x.cma, Some(0.5));
}

#[test]
fn per_modality_edge_cases() {
    let gold = vec![GoldCheck {
        claim: "g".into(),
        matched: true,
        s_img: true,
        s_txt: false,
    }];
    let mut m = matrix_from_labels(vec![vec![E], vec![E]], vec![vec![N], vec![N]]);
    m.reference = Some(vec![Cell::of(E), Cell::of(E)]);
    let prf = per_modality_prf(&[result_from(m, Caps::default(), Some(gold))]);
    assert_eq!(prf.img.precision, Some(1.0));
    assert_eq!((prf.txt.precision, prf.txt.recall, prf.txt.f1), (None, Some(0.0), None));
}

#[test]
fn two_hundred_random_results_match_recount() {
    let mut rng = rng(200);
    let results: Vec<CheckResult> = (0..200).map(|i| random_check_result(&mut rng, i, false)).collect();
    for r in &results {
        let got = core_metrics(r);
        let want = oracle_core(r, false);
        assert!(close(got.hallucination_rate, want["hallucination"]));
        assert!(close(got.faithfulness, want["faithfulness"]));
        assert!(close(got.contradiction_rate, want["contradiction"]));
        assert!(close(got.claim_recall, want["claim_recall"]));
        assert!(close(got.context_precision, want["context_precision"]));
    }
    let prf = per_modality_prf(&results);
    let want = oracle_pooled(&results, false);
    assert!(close(prf.img.f1, want["f1_img"]) && close(prf.txt.f1, want["f1_txt"]));
}

#[test]
fn fifty_vectors_match_exhaustive_sort() {
    let mut rng = rng(50);
    let pairs: Vec<(String, Vec<f64>)> =
        (0..50).map(|i| (format!("v{i:02}"), (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
    let store = EmbeddingStore::from_pairs(8, pairs.clone()).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n(a) * n(b))
    };
    for (qid, qv) in &pairs {
        let mut all: Vec<(f64, &String)> =
            pairs.iter().filter(|(id, _)| id != qid).map(|(id, v)| (cos(qv, v), id)).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let got = store.similar_items(qid, 10, &BTreeSet::new()).unwrap();
        let want: Vec<&String> = all.iter().take(10).map(|p| p.1).collect();
        assert_eq!(got.iter().map(|h| &h.0).collect::<Vec<_>>(), want);
        for (h, w) in got.iter().zip(&all) {
            assert!((h.1 - w.0).abs() < 1e-12);
        }
    }
}

#[test]
fn gpd_adds_two_most_similar_images() {
    let mut rng = rng(20);
    let mut catalog = BTreeMap::new();
    let mut pairs = Vec::new();
    for i in 0..20 {
        let id = format!("img{i:02}");
        catalog.insert(id.clone(), EvidenceItem::image(&id, "/dev/null", None));
        pairs.push((id, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()));
    }
    let store = EmbeddingStore::from_pairs(4, pairs.clone()).unwrap();
    let mut record = QueryRecord::new("r", DatasetId::MragBench, "q", "a", "");
    record.gold_image_ids = vec!["img07".into()];
    let pack = assemble_evidence(&record, RetrievalMode::GtPlusDistractors, &store, &catalog, Caps { k_img: 3, k_txt: 0 }, 0)
        .unwrap();
    let gold_v = &pairs[7].1;
    let mut ranked: Vec<(f64, &String)> = pairs
        .iter()
        .filter(|(id, _)| id != "img07")
        .map(|(id, v)| {
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (gold_v.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (n(gold_v) * n(v)), id)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    assert_eq!(pack.image_ids(), ["img07", ranked[0].1.as_str(), ranked[1].1.as_str()]);
}

#[test]
fn kept_set_matches_sort_and_slice() {
    let mut rng = rng(100);
    let mut records = Vec::new();
    let mut signals = BTreeMap::new();
    for i in 0..100 {
        let id = format!("s{i:03}");
        records.push(QueryRecord::new(id.clone(), DatasetId::ChartRag, "q", "a", ""));
        signals.insert(
            id,
            DifficultySignals {
                multi_hop: rng.gen_range(0..=1),
                modality_dependency: rng.gen_range(0..=1),
                baseline_success_rate: rng.gen_range(0.0..1.0),
            },
        );
    }
    let refs: Vec<&QueryRecord> = records.iter().collect();
    let out = difficulty_filter(&refs, &signals, &FilterConfig::default());
    let score = |s: &DifficultySignals| {
        0.5 * s.baseline_success_rate + 0.25 * (1 - s.multi_hop) as f64 + 0.25 * (1 - s.modality_dependency) as f64
    };
    let mut order: Vec<(&String, f64)> = signals.iter().map(|(id, s)| (id, score(s))).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let want_dropped: BTreeSet<&String> = order[..10].iter().map(|p| p.0).collect();
    let want_kept: Vec<&String> = records.iter().map(|r| &r.record_id).filter(|id| !want_dropped.contains(id)).collect();
    assert_eq!(out.kept.iter().collect::<Vec<_>>(), want_kept);
}

#[test]
fn ten_record_stats_match_tally() {
    let questions = [
        "What is shown?",
        "Which year had the highest value?",
        "Who is on the left?",
        "How many bars are there?",
        "Name the bird.",
        "What colour is the roof in the photo?",
        "Where was it taken?",
        "Is the line rising?",
        "What does the label say?",
        "Which region grew fastest after 2010?",
    ];
    let answers = ["a cat", "2019", "Ada", "7", "heron", "red", "Oslo", "yes", "exit only", "the north east"];
    let mut store = CorpusStore::new();
    for (i, (q, a)) in questions.iter().zip(answers).enumerate() {
        let mut r = QueryRecord::new(format!("t{i}"), DatasetId::ChartRag, *q, a, "");
        if i % 3 == 0 {
            r.split_flags.insert(SplitFlag::Filtered);
        }
        store.insert_record(r);
    }
    let stats = store.compute_stats(DatasetId::ChartRag).unwrap();
    // Tally by hand-counted whitespace tokens.
    let q_tokens = [3, 6, 5, 5, 3, 8, 4, 4, 5, 6];
    let a_tokens = [2, 1, 1, 1, 1, 1, 1, 1, 2, 3];
    assert_eq!(q_tokens.to_vec(), questions.map(token_len).to_vec());
    assert_eq!(stats.item_count, 10);
    assert_eq!(stats.retained_count, 4);
    assert_eq!(stats.max_q_len, 8);
    assert_eq!(stats.max_a_len, 3);
    assert_eq!(stats.avg_q_len, 49.0 / 10.0);
    assert_eq!(stats.avg_a_len, a_tokens.iter().sum::<usize>() as f64 / 10.0);
}

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(E), Just(N), Just(C)]
}

proptest! {
    #[test]
    fn adding_an_entailment_forces_entailment(
        img in prop::collection::vec(label(), 0..4),
        txt in prop::collection::vec(label(), 0..4),
        at_image in any::<bool>(),
    ) {
        let (mut img, mut txt) = (img, txt);
        if at_image { img.push(E) } else { txt.push(E) }
        let (ni, nt) = (img.len(), txt.len());
        let m = matrix_from_labels(vec![img], vec![txt]);
        prop_assume!(ni > 0 || nt > 0);
        let (v, _) = verdicts(&m, false);
        prop_assert_eq!(v[0].label, E);
    }

    #[test]
    fn verdicts_match_literal_rule(
        rows in prop::collection::vec((prop::collection::vec(label(), 3), prop::collection::vec(label(), 2)), 1..6),
    ) {
        let (img, txt): (Vec<_>, Vec<_>) = rows.iter().cloned().unzip();
        let m = matrix_from_labels(img, txt);
        let (v, _) = verdicts(&m, false);
        for (verdict, (i, t)) in v.iter().zip(&rows) {
            let all: Vec<Label> = i.iter().chain(t).copied().collect();
            prop_assert_eq!(Some(verdict.label), oracle_label(&all));
        }
    }

    #[test]
    fn rouge_is_bounded_and_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_sentence(&mut r, 10), random_sentence(&mut r, 10));
        let f = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - rouge_l(&b, &a)).abs() <= TOL);
        prop_assert!((f - oracle_rouge_l(&a, &b)).abs() <= TOL);
    }

    #[test]
    fn kappa_of_identical_lists_is_one(labels in prop::collection::vec(0u8..3, 1..40)) {
        prop_assert_eq!(cohen_kappa(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn used_set_is_within_pack_and_metrics_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let result = random_check_result(&mut r, 0, seed % 2 == 0);
        let pack: BTreeSet<&str> = result.matrix.image_ids.iter().chain(&result.matrix.text_ids).map(String::as_str).collect();
        prop_assert!(result.used_evidence_ids.iter().all(|id| pack.contains(id.as_str())));
        let m = core_metrics(&result);
        for v in [m.hallucination_rate, m.faithfulness, m.contradiction_rate, m.claim_recall, m.context_precision, m.self_knowledge].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
