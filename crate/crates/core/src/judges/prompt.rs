//! Prompt configuration grid and prompt text builders.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{EvidenceItem, Modality};
use crate::retrieval::EvidencePack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStyle {
    Plain,
    Expert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleStyle {
    /// `Q: / A:` pairs.
    Ex1,
    /// Question, brief explanation, final answer.
    Ex3,
    /// `User: / Assistant:` dialog turns.
    Ex6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reasoning {
    Direct,
    RetrieveThenReason,
    Structured,
    PlanExecute,
    Verify,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextOrder {
    ImgFirst,
    TxtFirst,
}

impl Reasoning {
    pub const ALL: [Reasoning; 6] = [
        Reasoning::Direct,
        Reasoning::RetrieveThenReason,
        Reasoning::Structured,
        Reasoning::PlanExecute,
        Reasoning::Verify,
        Reasoning::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reasoning::Direct => "direct",
            Reasoning::RetrieveThenReason => "retrieve_then_reason",
            Reasoning::Structured => "structured",
            Reasoning::PlanExecute => "plan_execute",
            Reasoning::Verify => "verify",
            Reasoning::None => "none",
        }
    }

    fn block(self) -> Option<&'static str> {
        match self {
            Reasoning::Direct => Some("Answer directly without explaining your reasoning."),
            Reasoning::RetrieveThenReason => Some(
                "First list which retrieved snippets/images you will use (by Doc/Image IDs). \
                 Then reason step by step using them, and finally give the answer.",
            ),
            Reasoning::Structured => Some(
                "Follow this structure: 1) Question understanding 2) Relevant sources \
                 (IDs or short quotes) 3) Reasoning 4) Final Answer",
            ),
            Reasoning::PlanExecute => Some(
                "Outline a short plan first (bullet points). After the plan, execute it and \
                 derive the final answer.",
            ),
            Reasoning::Verify => Some(
                "Propose an initial answer. Then self-check it briefly. If it passes, output \
                 the final answer prefixed with \"FINAL:\".",
            ),
            Reasoning::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub init_style: InitStyle,
    pub example_style: ExampleStyle,
    pub reasoning: Reasoning,
    pub context_order: ContextOrder,
    pub include_doc_ids: bool,
    pub max_examples: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            init_style: InitStyle::Expert,
            example_style: ExampleStyle::Ex3,
            reasoning: Reasoning::Direct,
            context_order: ContextOrder::ImgFirst,
            include_doc_ids: false,
            max_examples: 0,
        }
    }
}

pub const ALLOWED_MAX_EXAMPLES: [usize; 2] = [0, 5];

impl PromptConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !ALLOWED_MAX_EXAMPLES.contains(&self.max_examples) {
            return Err(format!(
                "max_examples must be 0 or 5, got {}",
                self.max_examples
            ));
        }
        Ok(())
    }

    /// `expert1` … `plain3`, from init style and example style.
    pub fn nickname(&self) -> String {
        let init = match self.init_style {
            InitStyle::Expert => "expert",
            InitStyle::Plain => "plain",
        };
        let n = match self.example_style {
            ExampleStyle::Ex1 => 1,
            ExampleStyle::Ex3 => 2,
            ExampleStyle::Ex6 => 3,
        };
        format!("{init}{n}")
    }

    /// Unique label for reports: nickname, reasoning, then any non-default
    /// packaging options.
    pub fn label(&self) -> String {
        let mut label = format!("{}-{}", self.nickname(), self.reasoning.as_str());
        if self.context_order == ContextOrder::TxtFirst {
            label.push_str("-txt_first");
        }
        if self.include_doc_ids {
            label.push_str("-ids");
        }
        if self.max_examples > 0 {
            label.push_str(&format!("-k{}", self.max_examples));
        }
        label
    }

    /// The 12-way sweep: six nicknames by {direct, retrieve_then_reason}, with
    /// images first, ids hidden and no exemplars.
    pub fn grid() -> Vec<PromptConfig> {
        let mut out = Vec::with_capacity(12);
        for init_style in [InitStyle::Expert, InitStyle::Plain] {
            for example_style in [ExampleStyle::Ex1, ExampleStyle::Ex3, ExampleStyle::Ex6] {
                for reasoning in [Reasoning::Direct, Reasoning::RetrieveThenReason] {
                    out.push(PromptConfig {
                        init_style,
                        example_style,
                        reasoning,
                        ..PromptConfig::default()
                    });
                }
            }
        }
        out
    }
}

impl fmt::Display for PromptConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for PromptConfig {
    type Err = String;

    /// Parses a `label()` string back into a config.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('-');
        let nick = parts.next().unwrap_or_default();
        let (init, n) = if let Some(n) = nick.strip_prefix("expert") {
            (InitStyle::Expert, n)
        } else if let Some(n) = nick.strip_prefix("plain") {
            (InitStyle::Plain, n)
        } else {
            return Err(format!("unknown prompt nickname {nick:?}"));
        };
        let example_style = match n {
            "1" => ExampleStyle::Ex1,
            "2" => ExampleStyle::Ex3,
            "3" => ExampleStyle::Ex6,
            _ => return Err(format!("unknown prompt nickname {nick:?}")),
        };
        let mut config = PromptConfig {
            init_style: init,
            example_style,
            ..PromptConfig::default()
        };
        for part in parts {
            if let Some(r) = Reasoning::ALL.iter().find(|r| r.as_str() == part) {
                config.reasoning = *r;
            } else if part == "txt_first" {
                config.context_order = ContextOrder::TxtFirst;
            } else if part == "ids" {
                config.include_doc_ids = true;
            } else if let Some(k) = part.strip_prefix('k').and_then(|k| k.parse().ok()) {
                config.max_examples = k;
            } else {
                return Err(format!("unknown prompt option {part:?} in {s:?}"));
            }
        }
        config.validate()?;
        Ok(config)
    }
}

const PLAIN_INIT: &str = "Please read the following question and retrieve the relevant \
document(s)/image(s) to produce the best possible answer.";

fn expert_init(domain: &str) -> String {
    format!(
        "You are an expert in {domain}. Analyze the question carefully, think step-by-step \
         about which sources to use, and present your answer clearly at the end."
    )
}

const ANSWER_FORMAT: &str = "Give the short answer on a line starting with \"SHORT:\", then the \
long answer on a line starting with \"LONG:\".";

/// Illustrative exemplars: (question, explanation, answer).
const EXEMPLARS: [(&str, &str, &str); 5] = [
    (
        "Which planet is known as the red planet?",
        "Iron oxide on its surface gives it a reddish color.",
        "Mars",
    ),
    (
        "In which year did the line chart reach its maximum?",
        "The highest point of the line is above the 2015 tick.",
        "2015",
    ),
    (
        "What animal is shown grazing in the photo?",
        "The animal has a woolly coat and curved horns.",
        "A sheep",
    ),
    (
        "Which country has the larger bar for exports?",
        "The bar labelled Chile is taller than the one labelled Peru.",
        "Chile",
    ),
    (
        "What material is the bridge in the picture made of?",
        "The arches are built from visible stone blocks.",
        "Stone",
    ),
];

fn render_exemplar(style: ExampleStyle, q: &str, why: &str, ans: &str) -> String {
    match style {
        ExampleStyle::Ex1 => format!("Q: {q}\nA: {ans}"),
        ExampleStyle::Ex3 => format!("Question: {q}\nExplanation: {why}\nFinal Answer: {ans}"),
        ExampleStyle::Ex6 => format!("User: {q}\nAssistant: {ans}"),
    }
}

fn exemplar_block(style: ExampleStyle, count: usize) -> String {
    let mut block = format!(
        "Example format:\n{}",
        render_exemplar(style, "<question>", "<brief explanation>", "<answer>")
    );
    for (q, why, ans) in EXEMPLARS.iter().take(count) {
        block.push_str("\n\n");
        block.push_str(&render_exemplar(style, q, why, ans));
    }
    block
}

fn evidence_tag(item: &EvidenceItem, include_ids: bool) -> String {
    let kind = match item.modality {
        Modality::Image => "Image",
        Modality::Text => "Doc",
    };
    if include_ids {
        format!("[{kind} {}]", item.evidence_id)
    } else {
        format!("[{kind}]")
    }
}

fn evidence_line(item: &EvidenceItem, include_ids: bool) -> String {
    let tag = evidence_tag(item, include_ids);
    match item.modality {
        Modality::Image => format!("{tag} <image>"),
        Modality::Text => format!("{tag} {}", item.content_ref),
    }
}

fn evidence_block(pack: &EvidencePack, order: ContextOrder, include_ids: bool) -> String {
    let images = pack.images.iter().map(|p| &p.item);
    let texts = pack.texts.iter().map(|p| &p.item);
    let items: Vec<&EvidenceItem> = match order {
        ContextOrder::ImgFirst => images.chain(texts).collect(),
        ContextOrder::TxtFirst => texts.chain(images).collect(),
    };
    let lines: Vec<String> = items.iter().map(|i| evidence_line(i, include_ids)).collect();
    format!("Evidence:\n{}", lines.join("\n"))
}

/// Generation prompt: init block, answer format, exemplars, evidence,
/// reasoning block, question. `domain` fills the expert template.
pub fn compose_prompt(
    config: &PromptConfig,
    domain: Option<&str>,
    question: &str,
    pack: &EvidencePack,
) -> String {
    let mut sections = vec![
        match config.init_style {
            InitStyle::Plain => PLAIN_INIT.to_string(),
            InitStyle::Expert => expert_init(domain.unwrap_or("general knowledge")),
        },
        ANSWER_FORMAT.to_string(),
        exemplar_block(config.example_style, config.max_examples),
    ];
    if !pack.is_empty() {
        sections.push(evidence_block(pack, config.context_order, config.include_doc_ids));
    }
    if let Some(block) = config.reasoning.block() {
        sections.push(block.to_string());
    }
    sections.push(format!("Question: {question}\nAnswer:"));
    sections.join("\n\n")
}

pub(crate) fn entailment_prompt(claim: &str, evidence: &EvidenceItem, include_ids: bool) -> String {
    let body = match evidence.modality {
        Modality::Image => "(the attached image)".to_string(),
        Modality::Text => evidence.content_ref.clone(),
    };
    format!(
        "Decide whether the evidence entails the claim, contradicts it, or neither. \
         Reply with exactly one label: Entailment, Neutral, or Contradiction.\n\n\
         Evidence {}: {body}\nClaim: {claim}\nLabel:",
        evidence_tag(evidence, include_ids)
    )
}

pub(crate) fn split_prompt(sentence: &str) -> String {
    format!(
        "Split the sentence into minimal claims that can each be verified on their own, \
         one per comparison. Reply with a JSON array of strings.\n\nSentence: {sentence}\nClaims:"
    )
}

pub(crate) fn closed_book_prompt(question: &str) -> String {
    format!(
        "Answer the question from your own knowledge, without any documents. Reply as JSON \
         with fields \"answer\" (short text) and \"confidence\" (a number between 0 and 1).\n\n\
         Question: {question}\nAnswer:"
    )
}

pub(crate) fn ambiguity_prompt(question: &str, has_image: bool) -> String {
    let lead = if has_image {
        "The question below is asked about the attached image. Judge whether, given the image, \
         the question has a single clear interpretation or is ambiguous (missing referent, \
         time frame or unit)."
    } else {
        "The question below is asked without any image or document. Judge whether it has a \
         single clear interpretation or is ambiguous (missing referent, time frame or unit)."
    };
    format!(
        "{lead} Output CLEAR or AMBIGUOUS, then a short rationale of at most 30 words.\n\n\
         Question: {question}\nVerdict:"
    )
}

pub(crate) fn rewrite_answer_prompt(question: &str, pack: &EvidencePack, original: &str) -> String {
    format!(
        "Using only the evidence below, rewrite the answer into a concise answer the evidence \
         supports. If the evidence does not settle the question, reply exactly \
         \"Evidence inconclusive.\"\n\n{}\n\nQuestion: {question}\nOriginal answer: {original}\n\
         Rewritten answer:",
        evidence_block(pack, ContextOrder::ImgFirst, true)
    )
}

pub(crate) fn rewrite_query_prompt(question: &str, pack: &EvidencePack) -> String {
    format!(
        "Rewrite the question as one precise question that the evidence below answers. Reply \
         with the rewritten question only.\n\n{}\n\nQuestion: {question}\nRewritten question:",
        evidence_block(pack, ContextOrder::ImgFirst, true)
    )
}
