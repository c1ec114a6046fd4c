//! Claim-level metrics, cross-modality diagnostics, EM and ROUGE-L.
//!
//! Undefined values (zero denominators) are `None` and stay `None` through
//! averaging; they are never coerced to 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::CheckResult;
use crate::judges::Label;
use crate::retrieval::Caps;

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Mean of the defined values; `None` if none are defined.
pub fn mean_defined<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ratio(1, n).map(|inv| sum * inv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub claim_count: usize,
    pub unjudgeable_count: usize,
    pub hallucination_rate: Option<f64>,
    pub faithfulness: Option<f64>,
    pub contradiction_rate: Option<f64>,
    pub claim_recall: Option<f64>,
    pub context_precision: Option<f64>,
    pub self_knowledge: Option<f64>,
    pub gold_claim_count: usize,
}

pub fn core_metrics(result: &CheckResult) -> CoreMetrics {
    let count = |label: Label| result.verdicts.iter().filter(|v| v.label == label).count();
    let n = result.verdicts.len();
    let entailed = count(Label::Entailment);
    let unsupported = result
        .verdicts
        .iter()
        .filter(|v| v.label == Label::Entailment && v.entailing_evidence_ids.is_empty())
        .count();
    let gold = result.gold.as_deref();
    let gold_count = gold.map_or(0, <[_]>::len);
    CoreMetrics {
        claim_count: n,
        unjudgeable_count: result.unjudgeable.len(),
        hallucination_rate: ratio(count(Label::Neutral), n),
        faithfulness: ratio(entailed, n),
        contradiction_rate: ratio(count(Label::Contradiction), n),
        claim_recall: gold.and_then(|g| ratio(g.iter().filter(|c| c.matched).count(), g.len())),
        context_precision: ratio(result.used_evidence_ids.len(), result.evidence_count()),
        self_knowledge: ratio(unsupported, entailed),
        gold_claim_count: gold_count,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalityReport {
    pub cr_img: Option<f64>,
    pub cr_txt: Option<f64>,
    pub delta_cr: Option<f64>,
    pub cp_img: Option<f64>,
    pub cp_txt: Option<f64>,
    pub delta_cp: Option<f64>,
    pub vis_hit_at_k: Option<f64>,
    pub txt_miss_rate: Option<f64>,
    pub cma: Option<f64>,
    pub v_hr: Option<f64>,
    pub d_hr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no check results to aggregate")]
    Empty,
    #[error("check results disagree on retrieval caps: {0:?} vs {1:?}")]
    CapsMismatch(Caps, Caps),
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Cross-modality diagnostics pooled over `results`. Per-modality coverage
/// denominators are the caps `K_img` / `K_txt` per result.
pub fn cross_modality_metrics(results: &[CheckResult]) -> Result<CrossModalityReport, MetricsError> {
    let first = results.first().ok_or(MetricsError::Empty)?;
    let caps = first.caps;
    if let Some(other) = results.iter().find(|r| r.caps != caps) {
        return Err(MetricsError::CapsMismatch(caps, other.caps));
    }
    let mut gold_total = 0;
    let (mut gold_img, mut gold_txt) = (0, 0);
    let (mut used_img, mut used_txt) = (0, 0);
    let (mut both, mut either) = (0, 0);
    let (mut neutral, mut neutral_img, mut neutral_txt) = (0, 0, 0);
    for r in results {
        if let Some(gold) = &r.gold {
            gold_total += gold.len();
            gold_img += gold.iter().filter(|g| g.matched && g.s_img).count();
            gold_txt += gold.iter().filter(|g| g.matched && g.s_txt).count();
        }
        used_img += r.used_images();
        used_txt += r.used_texts();
        for v in &r.verdicts {
            both += usize::from(v.s_img && v.s_txt);
            either += usize::from(v.s_img || v.s_txt);
            if v.label == Label::Neutral {
                neutral += 1;
                neutral_img += usize::from(v.s_img);
                neutral_txt += usize::from(v.s_txt);
            }
        }
    }
    let k_img = caps.k_img * results.len();
    let k_txt = caps.k_txt * results.len();
    let cr_img = ratio(gold_img, gold_total);
    let cr_txt = ratio(gold_txt, gold_total);
    let cp_img = ratio(used_img, k_img);
    let cp_txt = ratio(used_txt, k_txt);
    Ok(CrossModalityReport {
        cr_img,
        cr_txt,
        delta_cr: diff(cr_img, cr_txt),
        cp_img,
        cp_txt,
        delta_cp: diff(cp_img, cp_txt),
        vis_hit_at_k: cp_img,
        txt_miss_rate: cp_txt.map(|c| 1.0 - c),
        cma: ratio(both, either),
        v_hr: ratio(neutral_img, neutral),
        d_hr: ratio(neutral_txt, neutral),
    })
}

/// How short answers are scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmRule {
    /// Normalized strings equal.
    #[default]
    StrictEm,
    /// Normalized gold occurs in normalized prediction on word boundaries.
    Containment,
}

/// Lowercase, drop punctuation, collapse whitespace, drop one leading
/// article (a, an, the). Numbers are not coerced ("42" differs from "42.0").
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    let mut tokens: Vec<&str> = cleaned.split_whitespace().collect();
    if tokens.len() > 1 && matches!(tokens[0], "a" | "an" | "the") {
        tokens.remove(0);
    }
    tokens.join(" ")
}

pub fn exact_match(predicted: &str, gold: &str) -> u8 {
    score_short(predicted, gold, EmRule::StrictEm)
}

pub fn score_short(predicted: &str, gold: &str, rule: EmRule) -> u8 {
    let p = normalize_answer(predicted);
    let g = normalize_answer(gold);
    if g.is_empty() {
        return 0;
    }
    let hit = match rule {
        EmRule::StrictEm => p == g,
        EmRule::Containment => format!(" {p} ").contains(&format!(" {g} ")),
    };
    u8::from(hit)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over whitespace tokens.
pub fn rouge_l(predicted: &str, reference: &str) -> f64 {
    let p: Vec<&str> = predicted.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / p.len() as f64;
    let recall = lcs / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndTaskItem {
    pub predicted_short: String,
    pub gold_short: String,
    pub predicted_long: String,
    pub gold_long: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndTaskScores {
    pub em: Vec<u8>,
    pub em_mean: Option<f64>,
    pub rouge_l: Vec<f64>,
    pub rouge_l_f: Option<f64>,
}

pub fn end_task_scores(items: &[EndTaskItem], rule: EmRule) -> EndTaskScores {
    let em: Vec<u8> = items
        .iter()
        .map(|i| score_short(&i.predicted_short, &i.gold_short, rule))
        .collect();
    let rouge: Vec<f64> = items
        .iter()
        .map(|i| rouge_l(&i.predicted_long, &i.gold_long))
        .collect();
    EndTaskScores {
        em_mean: mean_defined(em.iter().map(|&e| Some(f64::from(e)))),
        rouge_l_f: mean_defined(rouge.iter().copied().map(Some)),
        em,
        rouge_l: rouge,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

impl Prf {
    fn new(recall: Option<f64>, precision: Option<f64>) -> Self {
        let f1 = match (recall, precision) {
            (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Prf { recall, precision, f1 }
    }
}

/// Reconstructed per-modality recall/precision/F1. Recall: gold claims whose
/// modality flag is set over |G|. Precision: answer claims with the flag that
/// the reference entails, over answer claims with the flag. Results without a
/// gold set are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerModalityPrf {
    pub img: Prf,
    pub txt: Prf,
}

pub fn per_modality_prf(results: &[CheckResult]) -> PerModalityPrf {
    let mut gold_total = 0;
    let (mut gold_img, mut gold_txt) = (0, 0);
    let (mut flag_img, mut flag_txt) = (0, 0);
    let (mut hit_img, mut hit_txt) = (0, 0);
    for r in results {
        let Some(gold) = &r.gold else { continue };
        gold_total += gold.len();
        gold_img += gold.iter().filter(|g| g.s_img).count();
        gold_txt += gold.iter().filter(|g| g.s_txt).count();
        for v in &r.verdicts {
            let matched = v.matches_gold == Some(true);
            if v.s_img {
                flag_img += 1;
                hit_img += usize::from(matched);
            }
            if v.s_txt {
                flag_txt += 1;
                hit_txt += usize::from(matched);
            }
        }
    }
    PerModalityPrf {
        img: Prf::new(ratio(gold_img, gold_total), ratio(hit_img, flag_img)),
        txt: Prf::new(ratio(gold_txt, gold_total), ratio(hit_txt, flag_txt)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("The Eiffel Tower", "eiffel tower"), 1);
        assert_eq!(exact_match("42", "42.0"), 0);
        assert_eq!(exact_match("", "x"), 0);
        assert_eq!(exact_match("Mars!", "mars"), 1);
        assert_eq!(score_short("It is the Eiffel Tower.", "Eiffel Tower", EmRule::Containment), 1);
        assert_eq!(score_short("Eiffel Towers", "Eiffel Tower", EmRule::Containment), 0);
    }

    #[test]
    fn lone_article_survives() {
        assert_eq!(normalize_answer("A"), "a");
        assert_eq!(normalize_answer("  The   Big  Dog "), "big dog");
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_l("a b c", "d e f"), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
        // LCS 2 ("a c"), P = 2/3, R = 2/2.
        assert!((rouge_l("a b c", "a c") - 0.8).abs() < 1e-12);
    }

    #[test]
    fn prf_edge_cases() {
        assert_eq!(Prf::new(Some(0.0), None).f1, None);
        assert_eq!(Prf::new(Some(0.0), Some(0.0)).f1, Some(0.0));
        assert_eq!(Prf::new(Some(1.0), Some(0.5)).f1, Some(2.0 / 3.0));
    }

    #[test]
    fn mean_skips_undefined() {
        assert_eq!(mean_defined([Some(1.0), None, Some(0.0)]), Some(0.5));
        assert_eq!(mean_defined([None, None]), None);
    }
}
