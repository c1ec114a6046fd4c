//! Published figures reproduced from fixtures built to match them.

mod common;

use claimcheck::checker::{match_gold_claims, CheckConfig};
use claimcheck::corpus::{AmbiguityLabel, CorpusStore, DatasetId, QueryRecord, SplitFlag};
use claimcheck::filtering::{adjudication_kappa, build_ambiguity_subset, load_adjudications, AmbiguitySource};
use claimcheck::judges::RuleBackend;
use claimcheck::reporting::{
    ambiguity_delta_report, read_report, render_dataset_stats, render_delta_table, render_markdown, ReportCell,
};
use common::{fixture, table7_fixture};

#[test]
fn table7_accounting() {
    let fx = table7_fixture();
    let records: Vec<&QueryRecord> = fx.records.iter().collect();
    let subset = build_ambiguity_subset(&records, &fx.verdicts, &fx.adjudications, 200, 3);
    let rows: Vec<(AmbiguitySource, usize, usize, usize)> = subset
        .accounting
        .iter()
        .map(|a| (a.source, a.candidates, a.marked_ambiguous, a.final_count))
        .collect();
    assert_eq!(
        rows,
        [
            (AmbiguitySource::TextOnly, 26_120, 13_823, 184),
            (AmbiguitySource::ImageConditioned, 4_557, 1_224, 16),
        ]
    );
    let total = subset.total();
    assert_eq!((total.candidates, total.marked_ambiguous, total.final_count), (30_677, 15_047, 200));
    assert_eq!(subset.clear.len(), 200);
}

#[test]
fn clear_set_is_seed_stable() {
    let fx = table7_fixture();
    let records: Vec<&QueryRecord> = fx.records.iter().collect();
    let a = build_ambiguity_subset(&records, &fx.verdicts, &fx.adjudications, 200, 11);
    let b = build_ambiguity_subset(&records, &fx.verdicts, &fx.adjudications, 200, 11);
    assert_eq!(a, b);
    let c = build_ambiguity_subset(&records, &fx.verdicts, &fx.adjudications, 200, 12);
    assert_ne!(a.clear, c.clear);
}

#[test]
fn annotator_kappa() {
    let records = load_adjudications(&fixture("adjudication_kappa.jsonl")).unwrap();
    assert_eq!(records.len(), 200);
    // p_o = 174/200, p_e = 0.5 from balanced marginals.
    assert!((adjudication_kappa(&records).unwrap() - 0.74).abs() < 1e-12);
}

#[test]
fn table8_deltas() {
    let clear = read_report(&fixture("table8_clear.jsonl")).unwrap();
    let ambiguous = read_report(&fixture("table8_ambiguous.jsonl")).unwrap();
    let rows = ambiguity_delta_report(&ambiguous, &clear).unwrap();
    assert_eq!(rows[0].delta_tenths, [Some(-59), Some(95), Some(-33), Some(-16)]);
    let table = render_delta_table(&rows);
    assert!(table.contains("| Clear (200) | 23.5 | 49.2 | 12.4 | 14.1 |"), "{table}");
    assert!(table.contains("| Ambiguous (200) | 17.6 | 58.7 | 9.1 | 12.5 |"), "{table}");
    assert!(table.contains("| -5.9 | +9.5 | -3.3 | -1.6 |"), "{table}");
}

#[test]
fn aggregate_renders_as_percentage() {
    let mut cell: ReportCell = read_report(&fixture("table8_clear.jsonl")).unwrap().remove(0);
    cell.metrics.get_mut("em").unwrap().value = Some(0.224);
    let md = render_markdown(&[cell]);
    assert!(md.contains("| 22.4% |"), "{md}");
}

#[test]
fn mrag_bench_statistics_row() {
    let mut store = CorpusStore::new();
    for i in 0..1353 {
        let mut r = QueryRecord::new(format!("mrag-{i:04}"), DatasetId::MragBench, "Which animal is shown?", "marmot", "");
        if i < 845 {
            r.split_flags.insert(SplitFlag::Filtered);
        }
        if i >= 600 {
            r.ambiguity_label = AmbiguityLabel::Ambiguous;
        }
        store.insert_record(r);
    }
    let stats = store.compute_stats(DatasetId::MragBench).unwrap();
    assert_eq!((stats.item_count, stats.retained_count, stats.ambiguous_count), (1353, 845, 753));
    let table = render_dataset_stats(&[stats]);
    assert!(table.contains("| 845/1353 |"), "{table}");
    assert!(table.contains("| 753/1353 |"), "{table}");
}

#[test]
fn marmot_gold_claim_is_unmatched() {
    let gold = "Marmots are large ground squirrels. They live in high-altitude environments.";
    let generated = "Marmots are large ground squirrels. They whistle to warn each other.";
    let matched = match_gold_claims(gold, generated, &RuleBackend::default(), &CheckConfig::default().prompt).unwrap();
    assert_eq!(matched, [true, false]);
}
