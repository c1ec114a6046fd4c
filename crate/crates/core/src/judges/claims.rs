//! Claim extraction: a heuristic sentence/clause splitter, with compound
//! numeric comparisons handed to the backend splitter.
//!
//! Heuristic boundaries are sentence ends (`.`, `!`, `?` followed by
//! whitespace or end of text), `; `, and `, and|but|or|yet|so ` when both
//! sides hold at least three words and the left side has no earlier comma
//! (which would suggest a list rather than two clauses). The heuristic pass
//! only cuts the text; it never adds or drops non-whitespace characters.

use super::{prompt, Backend, BackendError, JudgeError, Request, Task};

const CONJUNCTIONS: [&str; 5] = ["and", "but", "or", "yet", "so"];
const COMPARISON_CUES: [&str; 6] = ["while", "whereas", "than", "versus", "vs", "compared"];
const MIN_CLAUSE_WORDS: usize = 3;

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

/// Splits text into trimmed, non-empty sentences.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !is_terminal(c) {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, d)) = chars.peek() {
            if is_closer(d) {
                end = j + d.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        let at_boundary = text[end..].chars().next().is_none_or(char::is_whitespace);
        if at_boundary {
            let piece = text[start..end].trim();
            if !piece.is_empty() {
                out.push(piece);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Splits one sentence at clause-joining boundaries.
fn split_clauses(sentence: &str) -> Vec<&str> {
    let lower = sentence.to_ascii_lowercase();
    let mut cuts = Vec::new();
    let mut seg_start = 0;
    for (i, c) in sentence.char_indices() {
        if c != ',' && c != ';' {
            continue;
        }
        let rest = &lower[i + 1..];
        if !rest.starts_with(' ') {
            continue;
        }
        let left = &sentence[seg_start..i + 1];
        let right = &sentence[i + 2..];
        let ok = if c == ';' {
            word_count(left) >= MIN_CLAUSE_WORDS && word_count(right) >= MIN_CLAUSE_WORDS
        } else {
            let joins = CONJUNCTIONS.iter().any(|conj| {
                rest[1..].starts_with(conj) && rest[1 + conj.len()..].starts_with(' ')
            });
            joins
                && word_count(left) >= MIN_CLAUSE_WORDS
                && !left[..left.len() - 1].contains(',')
                && word_count(right) > MIN_CLAUSE_WORDS
        };
        if ok {
            cuts.push(i + 2);
            seg_start = i + 2;
        }
    }
    let mut pieces = Vec::with_capacity(cuts.len() + 1);
    let mut prev = 0;
    for cut in cuts {
        pieces.push(sentence[prev..cut].trim());
        prev = cut;
    }
    pieces.push(sentence[prev..].trim());
    pieces.retain(|p| !p.is_empty());
    pieces
}

/// Heuristic pass alone.
pub fn heuristic_claims(text: &str) -> Vec<&str> {
    split_sentences(text)
        .into_iter()
        .flat_map(split_clauses)
        .collect()
}

/// A sentence with two or more numbers and a comparison cue word.
pub fn is_numeric_comparison(sentence: &str) -> bool {
    let numbers = sentence
        .split_whitespace()
        .filter(|t| t.chars().any(|c| c.is_ascii_digit()))
        .count();
    let cue = sentence
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| COMPARISON_CUES.iter().any(|cue| w.eq_ignore_ascii_case(cue)));
    numbers >= 2 && cue
}

fn backend_split(sentence: &str, backend: &dyn Backend) -> Result<Vec<String>, JudgeError> {
    let request = Request::new(Task::SplitClaims, prompt::split_prompt(sentence)).input("sentence", sentence);
    let response = backend.call(&request)?;
    let claims: Vec<String> = response
        .claims
        .unwrap_or_default()
        .into_iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    if claims.is_empty() {
        return Err(JudgeError::Malformed("splitter returned no claims".into()));
    }
    Ok(claims)
}

/// Ordered atomic claims of a long answer. Backend failures on compound
/// comparisons fall back to the heuristic split of that sentence.
pub fn extract_claims(long_answer: &str, backend: &dyn Backend) -> Vec<String> {
    let mut claims = Vec::new();
    for sentence in split_sentences(long_answer) {
        if is_numeric_comparison(sentence) {
            match backend_split(sentence, backend) {
                Ok(parts) => {
                    claims.extend(parts);
                    continue;
                }
                Err(JudgeError::Backend(BackendError::Unsupported(_))) => {}
                Err(e) => log::warn!("claim splitter failed, using heuristic split: {e}"),
            }
        }
        claims.extend(split_clauses(sentence).into_iter().map(str::to_string));
    }
    claims
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judges::RuleBackend;
    use proptest::prelude::*;

    #[test]
    fn splits_sentences() {
        let rule = RuleBackend::default();
        assert_eq!(
            extract_claims("The marmot is large. It lives in burrows.", &rule),
            ["The marmot is large.", "It lives in burrows."]
        );
        assert!(extract_claims("", &rule).is_empty());
        assert!(extract_claims("   \n ", &rule).is_empty());
    }

    #[test]
    fn decimals_and_closers_stay_together() {
        assert_eq!(
            split_sentences("It rose 3.5 points (\"a lot.\") Then it fell!"),
            ["It rose 3.5 points (\"a lot.\")", "Then it fell!"]
        );
    }

    #[test]
    fn splits_finite_clause_conjunctions() {
        assert_eq!(
            heuristic_claims("The marmot is a rodent, and it lives in high mountains."),
            ["The marmot is a rodent,", "and it lives in high mountains."]
        );
        assert_eq!(
            heuristic_claims("The chart shows revenue; costs are not shown here."),
            ["The chart shows revenue;", "costs are not shown here."]
        );
    }

    #[test]
    fn lists_are_not_split() {
        assert_eq!(
            heuristic_claims("It visits Paris, London, and Rome every year."),
            ["It visits Paris, London, and Rome every year."]
        );
        assert_eq!(heuristic_claims("Cats, and dogs."), ["Cats, and dogs."]);
    }

    #[test]
    fn numeric_comparison_detection() {
        assert!(is_numeric_comparison("Revenue rose 5% while costs fell 2%."));
        assert!(!is_numeric_comparison("Revenue rose 5% in 2019."));
        assert!(!is_numeric_comparison("Revenue rose while costs fell."));
    }

    #[test]
    fn unsupported_splitter_keeps_heuristic_output() {
        let rule = RuleBackend::default();
        assert_eq!(
            extract_claims("Revenue rose 5% while costs fell 2%.", &rule),
            ["Revenue rose 5% while costs fell 2%."]
        );
    }

    fn strip_ws(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn heuristic_preserves_non_whitespace(text in "[a-zA-Z0-9 ,;.!?'\"()]{0,120}") {
            let claims = heuristic_claims(&text);
            prop_assert_eq!(strip_ws(&claims.concat()), strip_ws(&text));
            prop_assert!(claims.iter().all(|c| !c.trim().is_empty()));
        }

        #[test]
        fn sentence_words_preserved(words in proptest::collection::vec("[a-z]{1,8}(, and|;|\\.|!|\\?)?", 0..30)) {
            let text = words.join(" ");
            let rule = RuleBackend::default();
            let claims = extract_claims(&text, &rule);
            prop_assert_eq!(strip_ws(&claims.concat()), strip_ws(&text));
        }
    }
}
