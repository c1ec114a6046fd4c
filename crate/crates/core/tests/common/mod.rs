//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use claimcheck::checker::{mark_used, verdicts, Cell, CheckResult, GoldCheck, JudgmentMatrix, CHECK_SCHEMA_VERSION};
use claimcheck::corpus::{AmbiguityLabel, DatasetId, QueryRecord};
use claimcheck::filtering::{AmbiguityRecord, AmbiguitySource, PrefilterVerdict};
use claimcheck::judges::{Backend, BackendError, BackendKind, Label, Request, Response, Task};
use claimcheck::retrieval::{Caps, RetrievalMode};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= TOL,
        _ => false,
    }
}

// ---------------------------------------------------------------- precedence

/// Stage-3 rule read literally: "Entailment if any judgment is Entailment,
/// else Contradiction if any is Contradiction, else Neutral".
pub fn oracle_label(labels: &[Label]) -> Option<Label> {
    if labels.is_empty() {
        return None;
    }
    let mut saw_e = false;
    let mut saw_c = false;
    for l in labels {
        match l {
            Label::Entailment => saw_e = true,
            Label::Contradiction => saw_c = true,
            Label::Neutral => {}
        }
    }
    Some(if saw_e {
        Label::Entailment
    } else if saw_c {
        Label::Contradiction
    } else {
        Label::Neutral
    })
}

/// Every assignment of 3 labels to each of `width` cells, as base-3 digits.
pub fn all_rows(width: u32) -> impl Iterator<Item = Vec<Label>> {
    (0..3usize.pow(width)).map(move |mut code| {
        (0..width)
            .map(|_| {
                let l = Label::ALL[code % 3];
                code /= 3;
                l
            })
            .collect()
    })
}

pub fn matrix_from_labels(img: Vec<Vec<Label>>, txt: Vec<Vec<Label>>) -> JudgmentMatrix {
    let ni = img.first().map_or(0, Vec::len);
    let nt = txt.first().map_or(0, Vec::len);
    JudgmentMatrix {
        claims: (0..img.len()).map(|i| format!("claim {i}")).collect(),
        image_ids: (0..ni).map(|i| format!("img{i}")).collect(),
        text_ids: (0..nt).map(|i| format!("txt{i}")).collect(),
        image_cells: img.into_iter().map(|r| r.into_iter().map(Cell::of).collect()).collect(),
        text_cells: txt.into_iter().map(|r| r.into_iter().map(Cell::of).collect()).collect(),
        reference: None,
    }
}

// ---------------------------------------------------------------- random results

pub const FUZZ_CAPS: Caps = Caps { k_img: 3, k_txt: 3 };

fn random_cell(rng: &mut ChaCha8Rng) -> Cell {
    if rng.gen_bool(0.08) {
        Cell::Errored("timeout".into())
    } else {
        Cell::of(Label::ALL[rng.gen_range(0..3)])
    }
}

/// A CheckResult with up to 10 claims and up to 6 evidence items (at most 3
/// per modality), built through the library's Stage-3 functions from a random
/// judgment matrix with some errored cells.
pub fn random_check_result(rng: &mut ChaCha8Rng, id: usize, reference_channel: bool) -> CheckResult {
    let n = rng.gen_range(0..=10);
    let ni = rng.gen_range(0..=3);
    let nt = rng.gen_range(0..=3);
    let row = |rng: &mut ChaCha8Rng, w: usize| (0..w).map(|_| random_cell(rng)).collect::<Vec<_>>();
    let image_cells = (0..n).map(|_| row(rng, ni)).collect();
    let text_cells = (0..n).map(|_| row(rng, nt)).collect();
    let reference = rng.gen_bool(0.7).then(|| (0..n).map(|_| random_cell(rng)).collect());
    let matrix = JudgmentMatrix {
        claims: (0..n).map(|i| format!("c{i}")).collect(),
        image_ids: (0..ni).map(|i| format!("r{id}-img{i}")).collect(),
        text_ids: (0..nt).map(|i| format!("r{id}-txt{i}")).collect(),
        image_cells,
        text_cells,
        reference,
    };
    let gold = rng.gen_bool(0.8).then(|| {
        (0..rng.gen_range(0..=5))
            .map(|g| GoldCheck {
                claim: format!("g{g}"),
                matched: rng.gen_bool(0.5),
                s_img: rng.gen_bool(0.4),
                s_txt: rng.gen_bool(0.4),
            })
            .collect()
    });
    let (verdicts, unjudgeable) = verdicts(&matrix, reference_channel);
    CheckResult {
        schema_version: CHECK_SCHEMA_VERSION,
        record_id: format!("r{id}"),
        mode: RetrievalMode::GtPlusDistractors,
        used_evidence_ids: mark_used(&matrix),
        judging_error_count: matrix.error_count(),
        matrix,
        verdicts,
        unjudgeable,
        caps: FUZZ_CAPS,
        gold_excluded: None,
        gold,
    }
}

fn frac(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// What a claim row settles to, recounted from the raw cells.
struct RowFacts {
    label: Option<Label>,
    img_e: bool,
    txt_e: bool,
    reference: Option<Label>,
}

fn row_facts(m: &JudgmentMatrix, i: usize, reference_channel: bool) -> RowFacts {
    let img: Vec<Label> = m.image_cells[i].iter().filter_map(Cell::label).collect();
    let txt: Vec<Label> = m.text_cells[i].iter().filter_map(Cell::label).collect();
    let reference = m.reference.as_ref().and_then(|r| r[i].label());
    let mut all = img.clone();
    all.extend(&txt);
    if reference_channel {
        all.extend(reference);
    }
    RowFacts {
        label: oracle_label(&all),
        img_e: img.contains(&Label::Entailment),
        txt_e: txt.contains(&Label::Entailment),
        reference,
    }
}

/// Brute-force recount of every per-record metric, from the matrix and gold
/// checks only.
pub fn oracle_core(r: &CheckResult, reference_channel: bool) -> BTreeMap<&'static str, Option<f64>> {
    let m = &r.matrix;
    let rows: Vec<RowFacts> = (0..m.claims.len()).map(|i| row_facts(m, i, reference_channel)).collect();
    let judged: Vec<&RowFacts> = rows.iter().filter(|f| f.label.is_some()).collect();
    let count = |l: Label| judged.iter().filter(|f| f.label == Some(l)).count();
    let e = count(Label::Entailment);
    let e_without_pack = judged
        .iter()
        .filter(|f| f.label == Some(Label::Entailment) && !f.img_e && !f.txt_e)
        .count();
    let mut used = 0;
    for col in 0..m.image_ids.len() {
        used += usize::from((0..m.claims.len()).any(|i| m.image_cells[i][col] == Cell::of(Label::Entailment)));
    }
    for col in 0..m.text_ids.len() {
        used += usize::from((0..m.claims.len()).any(|i| m.text_cells[i][col] == Cell::of(Label::Entailment)));
    }
    let mut out = BTreeMap::new();
    out.insert("hallucination", frac(count(Label::Neutral), judged.len()));
    out.insert("faithfulness", frac(e, judged.len()));
    out.insert("contradiction", frac(count(Label::Contradiction), judged.len()));
    out.insert(
        "claim_recall",
        r.gold.as_ref().and_then(|g| frac(g.iter().filter(|c| c.matched).count(), g.len())),
    );
    out.insert("context_precision", frac(used, m.image_ids.len() + m.text_ids.len()));
    out.insert("self_knowledge", frac(e_without_pack, e));
    out
}

/// Brute-force recount of the pooled cross-modality and per-modality values.
pub fn oracle_pooled(results: &[CheckResult], reference_channel: bool) -> BTreeMap<&'static str, Option<f64>> {
    let mut g_total = 0;
    let (mut g_img, mut g_txt, mut g_img_any, mut g_txt_any) = (0, 0, 0, 0);
    let (mut used_img, mut used_txt, mut slots_img, mut slots_txt) = (0, 0, 0, 0);
    let (mut both, mut either, mut neutral, mut n_img, mut n_txt) = (0, 0, 0, 0, 0);
    let (mut flag_img, mut flag_txt, mut hit_img, mut hit_txt) = (0, 0, 0, 0);
    for r in results {
        let m = &r.matrix;
        slots_img += r.caps.k_img;
        slots_txt += r.caps.k_txt;
        for col in 0..m.image_ids.len() {
            used_img += usize::from(m.image_cells.iter().any(|row| row[col] == Cell::of(Label::Entailment)));
        }
        for col in 0..m.text_ids.len() {
            used_txt += usize::from(m.text_cells.iter().any(|row| row[col] == Cell::of(Label::Entailment)));
        }
        if let Some(gold) = &r.gold {
            for g in gold {
                g_total += 1;
                g_img += usize::from(g.matched && g.s_img);
                g_txt += usize::from(g.matched && g.s_txt);
                g_img_any += usize::from(g.s_img);
                g_txt_any += usize::from(g.s_txt);
            }
        }
        for i in 0..m.claims.len() {
            let f = row_facts(m, i, reference_channel);
            let Some(label) = f.label else { continue };
            both += usize::from(f.img_e && f.txt_e);
            either += usize::from(f.img_e || f.txt_e);
            if label == Label::Neutral {
                neutral += 1;
                n_img += usize::from(f.img_e);
                n_txt += usize::from(f.txt_e);
            }
            if r.gold.is_some() {
                let hit = f.reference == Some(Label::Entailment);
                if f.img_e {
                    flag_img += 1;
                    hit_img += usize::from(hit);
                }
                if f.txt_e {
                    flag_txt += 1;
                    hit_txt += usize::from(hit);
                }
            }
        }
    }
    let sub = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(x, y)| x - y);
    let f1 = |r: Option<f64>, p: Option<f64>| {
        let (r, p) = (r?, p?);
        Some(if r + p == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
    };
    let cr_img = frac(g_img, g_total);
    let cr_txt = frac(g_txt, g_total);
    let cp_img = frac(used_img, slots_img);
    let cp_txt = frac(used_txt, slots_txt);
    let (rec_img, rec_txt) = (frac(g_img_any, g_total), frac(g_txt_any, g_total));
    let (prec_img, prec_txt) = (frac(hit_img, flag_img), frac(hit_txt, flag_txt));
    let mut out = BTreeMap::new();
    out.insert("cr_img", cr_img);
    out.insert("cr_txt", cr_txt);
    out.insert("delta_cr", sub(cr_img, cr_txt));
    out.insert("cp_img", cp_img);
    out.insert("cp_txt", cp_txt);
    out.insert("delta_cp", sub(cp_img, cp_txt));
    out.insert("vis_hit_at_k", cp_img);
    out.insert("txt_miss_rate", cp_txt.map(|c| 1.0 - c));
    out.insert("cma", frac(both, either));
    out.insert("v_hr", frac(n_img, neutral));
    out.insert("d_hr", frac(n_txt, neutral));
    out.insert("recall_img", rec_img);
    out.insert("precision_img", prec_img);
    out.insert("f1_img", f1(rec_img, prec_img));
    out.insert("recall_txt", rec_txt);
    out.insert("precision_txt", prec_txt);
    out.insert("f1_txt", f1(rec_txt, prec_txt));
    out
}

// ---------------------------------------------------------------- text oracles

/// LCS by memoized recursion over suffixes, a different formulation from the
/// library's rolling table.
pub fn oracle_lcs(a: &[&str], b: &[&str]) -> usize {
    fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

pub fn oracle_rouge_l(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let lcs = oracle_lcs(&p, &r);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    const WORDS: [&str; 8] = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Kappa from an explicit k-by-k contingency table.
pub fn oracle_kappa(a: &[usize], b: &[usize], k: usize) -> f64 {
    let mut table = vec![vec![0usize; k]; k];
    for (x, y) in a.iter().zip(b) {
        table[*x][*y] += 1;
    }
    let n = a.len() as f64;
    let diag: usize = (0..k).map(|i| table[i][i]).sum();
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let p_o = diag as f64 / n;
    let p_e: f64 = (0..k).map(|i| (rows[i] as f64 / n) * (cols[i] as f64 / n)).sum();
    if p_e == 1.0 {
        1.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    }
}

// ---------------------------------------------------------------- backends

/// Scripted responses keyed by task and a task-specific input; counts calls.
/// Entailment is keyed by "claim|evidence_id", splitting by sentence, every
/// other task by question.
#[derive(Default)]
pub struct ScriptedBackend {
    pub responses: BTreeMap<(Task, String), Response>,
    pub calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn script(key: &Request) -> String {
        match key.task {
            Task::Entailment => format!("{}|{}", key.get("claim").unwrap_or(""), key.get("evidence_id").unwrap_or("")),
            Task::SplitClaims => key.get("sentence").unwrap_or("").to_string(),
            _ => key.get("question").unwrap_or("").to_string(),
        }
    }

    pub fn with(mut self, task: Task, key: &str, response: Response) -> Self {
        self.responses.insert((task, key.to_string()), response);
        self
    }

    pub fn label(self, claim: &str, evidence_id: &str, label: Label) -> Self {
        self.with(
            Task::Entailment,
            &format!("{claim}|{evidence_id}"),
            Response {
                label: Some(label.as_str().to_string()),
                ..Default::default()
            },
        )
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(&(request.task, Self::script(request)))
            .cloned()
            .ok_or(BackendError::Unsupported(request.task))
    }
}

// ---------------------------------------------------------------- ambiguity fixture

pub struct AmbiguityFixture {
    pub records: Vec<QueryRecord>,
    pub verdicts: Vec<PrefilterVerdict>,
    pub adjudications: Vec<AmbiguityRecord>,
}

/// Candidate and marked counts of the published construction table: 26,120
/// text-only candidates (13,823 marked) and 4,557 image-conditioned
/// candidates (1,224 marked). Every other marked item is adjudicated
/// AMBIGUOUS, the rest CLEAR.
pub fn table7_fixture() -> AmbiguityFixture {
    let mut fx = AmbiguityFixture {
        records: Vec::new(),
        verdicts: Vec::new(),
        adjudications: Vec::new(),
    };
    let sources = [
        (AmbiguitySource::TextOnly, DatasetId::Webqa, 26_120, 13_823),
        (AmbiguitySource::ImageConditioned, DatasetId::MragBench, 4_557, 1_224),
    ];
    for (source, dataset, candidates, marked) in sources {
        for i in 0..candidates {
            let id = format!("{}-{i:05}", dataset.as_str());
            let mut r = QueryRecord::new(id.clone(), dataset, format!("question {i}"), "a", "");
            if source == AmbiguitySource::ImageConditioned {
                r.gold_image_ids.push(format!("{id}-img"));
            }
            fx.records.push(r);
            let is_marked = i < marked;
            fx.verdicts.push(PrefilterVerdict {
                record_id: id.clone(),
                source,
                label: if is_marked { AmbiguityLabel::Ambiguous } else { AmbiguityLabel::Clear },
                rationale: String::new(),
            });
            if is_marked {
                let label = if i % 2 == 0 { AmbiguityLabel::Ambiguous } else { AmbiguityLabel::Clear };
                fx.adjudications.push(AmbiguityRecord {
                    record_id: id,
                    prefilter_label: AmbiguityLabel::Ambiguous,
                    prefilter_rationale: String::new(),
                    annotator_a: Some(label),
                    annotator_b: Some(label),
                    adjudicated: Some(label),
                });
            }
        }
    }
    fx
}

// ---------------------------------------------------------------- CLI

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_claimcheck"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

/// Copies the shipped demo corpus (inputs only) into `dest`.
pub fn copy_demo(dest: &Path) {
    let src = repo_root().join("demo");
    copy_dir(&src, dest, &["out", "cache"]);
}

fn copy_dir(src: &Path, dest: &Path, skip: &[&str]) {
    fs::create_dir_all(dest).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        if skip.iter().any(|s| name == *s) {
            continue;
        }
        let to = dest.join(&name);
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &to, &[]);
        } else {
            fs::copy(entry.path(), &to).unwrap();
        }
    }
}

/// Relative path to contents, for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn id_set<'a>(ids: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    ids.into_iter().map(str::to_string).collect()
}
