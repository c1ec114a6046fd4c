//! Three-way entailment judging and the other model-backed tasks (claim
//! splitting, closed-book probing, ambiguity classification, rewrites).
//!
//! Every task goes through a [`Backend`]: a remote HTTP endpoint, the
//! rule-based offline judge, a canned answer file, or a record/replay cache.
//! The rule-based judge decides by normalized substring matching. It exists so
//! the pipeline runs offline and is a test oracle, not a model of entailment.

mod backend;
mod cache;
mod claims;
mod prompt;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    Backend, BackendConfig, BackendKind, CannedBackend, RecordingBackend, RemoteBackend,
    ReplayBackend, RuleBackend, DEFAULT_NEGATIONS,
};
pub use cache::{cache_key, cached_call, canonical_json, CacheMode, CachedExchange, ResponseCache};
pub use claims::{extract_claims, heuristic_claims, is_numeric_comparison, split_sentences};
pub use prompt::{
    compose_prompt, ContextOrder, ExampleStyle, InitStyle, PromptConfig, Reasoning,
};

use crate::corpus::{AmbiguityLabel, EvidenceItem, Modality};
use crate::retrieval::EvidencePack;

/// The verdict for one (claim, evidence) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "Entailment",
            Label::Neutral => "Neutral",
            Label::Contradiction => "Contradiction",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Ok(Label::Entailment),
            "neutral" => Ok(Label::Neutral),
            "contradiction" => Ok(Label::Contradiction),
            other => Err(format!("not a three-way label: {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub value: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl Judgment {
    pub fn new(value: Label) -> Self {
        Judgment {
            value,
            rationale: None,
        }
    }
}

/// What a request asks the backend to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Entailment,
    SplitClaims,
    ClosedBook,
    ClassifyAmbiguity,
    RewriteAnswer,
    RewriteQuery,
    Generate,
}

/// Wire request. `inputs` carries the structured fields the prompt was built
/// from, so offline backends need not parse prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub task: Task,
    pub prompt: String,
    #[serde(default)]
    pub images: Vec<String>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub inputs: std::collections::BTreeMap<String, String>,
}

impl Request {
    pub fn new(task: Task, prompt: String) -> Self {
        Request {
            task,
            prompt,
            images: Vec::new(),
            temperature: 0.0,
            inputs: Default::default(),
        }
    }

    pub fn input(mut self, key: &str, value: impl Into<String>) -> Self {
        self.inputs.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.inputs.get(key).map(String::as_str)
    }
}

/// Wire response. Which fields are set depends on the task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    /// Kept raw so a non-numeric confidence can be reported as malformed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<Vec<String>>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend does not support task {0:?}")]
    Unsupported(Task),
    #[error("missing_fixture: no cached response for request {hash}")]
    MissingFixture { hash: String },
    #[error("cache io: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum JudgeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("claim is empty")]
    EmptyClaim,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("answer rewrite needs a non-empty evidence pack")]
    EmptyPack,
    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type SharedBackend = Arc<dyn Backend>;

/// Base64 of an image file, for transmission to a remote judge.
pub fn encode_image(item: &EvidenceItem) -> Result<String, JudgeError> {
    let bytes = fs::read(&item.content_ref).map_err(|e| JudgeError::Image {
        path: PathBuf::from(&item.content_ref),
        message: e.to_string(),
    })?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn attach_image(
    mut request: Request,
    item: &EvidenceItem,
    backend: &dyn Backend,
) -> Result<Request, JudgeError> {
    if item.modality == Modality::Image && backend.needs_images() {
        request.images.push(encode_image(item)?);
    }
    Ok(request)
}

/// Builds the entailment request for one (claim, evidence) pair.
pub fn entailment_request(
    claim: &str,
    evidence: &EvidenceItem,
    prompt: &PromptConfig,
    backend: &dyn Backend,
) -> Result<Request, JudgeError> {
    let text = prompt::entailment_prompt(claim, evidence, prompt.include_doc_ids);
    let request = Request::new(Task::Entailment, text)
        .input("claim", claim)
        .input("evidence_id", evidence.evidence_id.clone())
        .input(
            "modality",
            match evidence.modality {
                Modality::Image => "image",
                Modality::Text => "text",
            },
        )
        .input("evidence", evidence.visible_text());
    attach_image(request, evidence, backend)
}

/// Judges one (claim, evidence) pair. Image evidence is sent as the image
/// itself to backends that take images; no caption is synthesized.
pub fn judge_entailment(
    claim: &str,
    evidence: &EvidenceItem,
    backend: &dyn Backend,
    prompt: &PromptConfig,
) -> Result<Judgment, JudgeError> {
    if claim.trim().is_empty() {
        return Err(JudgeError::EmptyClaim);
    }
    let request = entailment_request(claim, evidence, prompt, backend)?;
    let response = backend.call(&request)?;
    let raw = response
        .label
        .ok_or_else(|| JudgeError::Malformed("response has no label".into()))?;
    let value = raw.parse::<Label>().map_err(JudgeError::Malformed)?;
    Ok(Judgment {
        value,
        rationale: response.rationale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeAnswer {
    pub answer: String,
    pub confidence: f64,
}

/// Asks the backend to answer without evidence. A confidence that is not a
/// number in [0, 1] is a malformed response.
pub fn closed_book_probe(question: &str, backend: &dyn Backend) -> Result<ProbeAnswer, JudgeError> {
    if question.trim().is_empty() {
        return Err(JudgeError::EmptyQuestion);
    }
    let request = Request::new(Task::ClosedBook, prompt::closed_book_prompt(question))
        .input("question", question);
    let response = backend.call(&request)?;
    let answer = response
        .answer
        .ok_or_else(|| JudgeError::Malformed("response has no answer".into()))?;
    let confidence = match response.confidence {
        Some(serde_json::Value::Number(n)) => n
            .as_f64()
            .filter(|c| (0.0..=1.0).contains(c))
            .ok_or_else(|| JudgeError::Malformed(format!("confidence {n} outside [0, 1]")))?,
        Some(other) => {
            return Err(JudgeError::Malformed(format!(
                "confidence is not a number: {other}"
            )))
        }
        None => return Err(JudgeError::Malformed("response has no confidence".into())),
    };
    Ok(ProbeAnswer { answer, confidence })
}

pub const RATIONALE_WORD_CAP: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguityVerdict {
    pub label: AmbiguityLabel,
    pub rationale: String,
}

/// First `cap` whitespace tokens, single-space joined.
pub fn truncate_words(text: &str, cap: usize) -> String {
    text.split_whitespace().take(cap).collect::<Vec<_>>().join(" ")
}

/// CLEAR/AMBIGUOUS pre-filter. Image-conditioned and text-only questions use
/// different templates. Any backend failure yields `Unlabeled`.
pub fn classify_ambiguity(
    question: &str,
    image: Option<&EvidenceItem>,
    backend: &dyn Backend,
) -> AmbiguityVerdict {
    let unlabeled = |why: String| {
        log::warn!("ambiguity classification failed: {why}");
        AmbiguityVerdict {
            label: AmbiguityLabel::Unlabeled,
            rationale: String::new(),
        }
    };
    if question.trim().is_empty() {
        return unlabeled("question is empty".into());
    }
    let mut request = Request::new(
        Task::ClassifyAmbiguity,
        prompt::ambiguity_prompt(question, image.is_some()),
    )
    .input("question", question)
    .input("variant", if image.is_some() { "image" } else { "text" });
    if let Some(img) = image {
        request = request.input("image_id", img.evidence_id.clone());
        request = match attach_image(request, img, backend) {
            Ok(r) => r,
            Err(e) => return unlabeled(e.to_string()),
        };
    }
    let response = match backend.call(&request) {
        Ok(r) => r,
        Err(e) => return unlabeled(e.to_string()),
    };
    let label = match response.label.as_deref().map(str::trim) {
        Some(l) if l.eq_ignore_ascii_case("CLEAR") => AmbiguityLabel::Clear,
        Some(l) if l.eq_ignore_ascii_case("AMBIGUOUS") => AmbiguityLabel::Ambiguous,
        other => return unlabeled(format!("unexpected label {other:?}")),
    };
    AmbiguityVerdict {
        label,
        rationale: truncate_words(response.rationale.as_deref().unwrap_or(""), RATIONALE_WORD_CAP),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteKind {
    Answer,
    Query,
}

pub const INCONCLUSIVE: &str = "Evidence inconclusive.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub text: String,
    pub rewritten: bool,
}

/// Evidence-grounded answer rewrite or query disambiguation. On backend
/// failure the original text comes back with `rewritten = false`.
pub fn rewrite(
    kind: RewriteKind,
    question: &str,
    pack: &EvidencePack,
    original: &str,
    backend: &dyn Backend,
) -> Result<RewriteOutcome, JudgeError> {
    if kind == RewriteKind::Answer && pack.is_empty() {
        return Err(JudgeError::EmptyPack);
    }
    let fallback = |why: String| {
        log::warn!("rewrite failed, keeping original: {why}");
        Ok(RewriteOutcome {
            text: original.to_string(),
            rewritten: false,
        })
    };
    let (task, text) = match kind {
        RewriteKind::Answer => (
            Task::RewriteAnswer,
            prompt::rewrite_answer_prompt(question, pack, original),
        ),
        RewriteKind::Query => (Task::RewriteQuery, prompt::rewrite_query_prompt(question, pack)),
    };
    let mut request = Request::new(task, text)
        .input("question", question)
        .input("original", original)
        .input("record_id", pack.record_id.clone());
    for p in &pack.images {
        request = match attach_image(request, &p.item, backend) {
            Ok(r) => r,
            Err(e) => return fallback(e.to_string()),
        };
    }
    let answer = match backend.call(&request) {
        Ok(Response {
            answer: Some(a), ..
        }) if !a.trim().is_empty() => a,
        Ok(_) => return fallback("response has no answer".into()),
        Err(e) => return fallback(e.to_string()),
    };
    let text = match kind {
        RewriteKind::Answer if answer.trim() == INCONCLUSIVE => INCONCLUSIVE.to_string(),
        RewriteKind::Answer => answer.trim().to_string(),
        RewriteKind::Query => first_question(&answer),
    };
    Ok(RewriteOutcome {
        text,
        rewritten: true,
    })
}

/// Keeps the first sentence of a rewritten query.
fn first_question(text: &str) -> String {
    split_sentences(text)
        .into_iter()
        .next()
        .unwrap_or(text.trim())
        .to_string()
}
