//! Exact cosine search over precomputed embeddings and evidence-pack assembly
//! under the three retrieval modes.
//!
//! Embedding file format:
//!
//! ```text
//! dim=<D>
//! <id>\t<f1> <f2> ... <fD>
//! ```
//!
//! Components may be separated by tabs or spaces. Vectors are renormalized to
//! unit length on load, so cosine similarity reduces to a dot product.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{EvidenceItem, Modality, QueryRecord};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected header `dim=<D>`")]
    MalformedHeader { line: usize },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("dimension mismatch at id={id}: expected {expected}, found {found}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite component at id={id}")]
    NonFinite { id: String },
    #[error("zero vector at id={id}")]
    ZeroVector { id: String },
    #[error("duplicate embedding id={id}")]
    DuplicateId { id: String },
    #[error("unknown query id: {0}")]
    UnknownQuery(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("gold evidence {id} of record {record_id} is not in the evidence catalog")]
    UnresolvedGold { record_id: String, id: String },
    #[error("record {record_id}: no non-gold {modality:?} candidates for distractors_only")]
    NoDistractors {
        record_id: String,
        modality: Modality,
    },
}

/// Immutable map from evidence id to a unit-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn from_pairs(
        dimension: usize,
        pairs: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, RetrievalError> {
        let mut entries = BTreeMap::new();
        for (id, v) in pairs {
            if v.len() != dimension {
                return Err(RetrievalError::DimensionMismatch {
                    id,
                    expected: dimension,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite { id });
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(RetrievalError::ZeroVector { id });
            }
            if entries.contains_key(&id) {
                return Err(RetrievalError::DuplicateId { id });
            }
            entries.insert(id, v.iter().map(|x| x / norm).collect());
        }
        Ok(EmbeddingStore { dimension, entries })
    }

    /// Loads an embedding file.
    pub fn build_index(path: &Path) -> Result<Self, RetrievalError> {
        let text = fs::read_to_string(path).map_err(|source| RetrievalError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, RetrievalError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines
            .next()
            .ok_or(RetrievalError::MalformedHeader { line: 1 })?;
        let dimension = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or(RetrievalError::MalformedHeader { line: hline + 1 })?;

        let mut pairs = Vec::new();
        for (idx, line) in lines {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| RetrievalError::MalformedLine {
                    line: idx + 1,
                    message: "expected `<id>\\t<floats>`".into(),
                })?;
            let values = rest
                .split_whitespace()
                .map(|tok| {
                    f64::from_str(tok).map_err(|_| RetrievalError::MalformedLine {
                        line: idx + 1,
                        message: format!("bad float {tok:?}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            pairs.push((id.trim().to_string(), values));
        }
        Self::from_pairs(dimension, pairs)
    }

    /// Serializes the (normalized) store in the embedding file format.
    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dimension);
        for (id, v) in &self.entries {
            out.push_str(id);
            out.push('\t');
            let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Ranked neighbours of a stored item, excluding the item itself and `exclude`.
    pub fn similar_items(
        &self,
        query_id: &str,
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<(String, f64)>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let query = self
            .entries
            .get(query_id)
            .ok_or_else(|| RetrievalError::UnknownQuery(query_id.to_string()))?;
        Ok(self.rank_by_vector(query, k, |id| id != query_id && !exclude.contains(id)))
    }

    /// Cosine ranking of every entry accepted by `keep`, descending, ties by
    /// ascending id. A zero query scores every entry 0.
    pub fn rank_by_vector(
        &self,
        query: &[f64],
        k: usize,
        keep: impl Fn(&str) -> bool,
    ) -> Vec<(String, f64)> {
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(&str, f64)> = self
            .entries
            .iter()
            .filter(|(id, _)| keep(id))
            .map(|(id, v)| {
                let score = if qnorm == 0.0 {
                    0.0
                } else {
                    (dot(query, v) / qnorm).clamp(-1.0, 1.0)
                };
                (id.as_str(), score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        scored
            .into_iter()
            .take(k)
            .map(|(id, s)| (id.to_string(), s))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    GtOnly,
    GtPlusDistractors,
    DistractorsOnly,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [
        RetrievalMode::GtOnly,
        RetrievalMode::GtPlusDistractors,
        RetrievalMode::DistractorsOnly,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            RetrievalMode::GtOnly => "GO",
            RetrievalMode::GtPlusDistractors => "GPD",
            RetrievalMode::DistractorsOnly => "DO",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "go" | "gt_only" => Ok(RetrievalMode::GtOnly),
            "gpd" | "gt_plus_distractors" => Ok(RetrievalMode::GtPlusDistractors),
            "do" | "distractors_only" => Ok(RetrievalMode::DistractorsOnly),
            other => Err(format!("unknown retrieval mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gold,
    Distractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    pub k_img: usize,
    pub k_txt: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps { k_img: 3, k_txt: 3 }
    }
}

impl Caps {
    pub fn for_modality(self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.k_img,
            Modality::Text => self.k_txt,
        }
    }
}

/// How distractor slots are filled once candidates are ranked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorSelection {
    /// The n most similar non-gold items.
    #[default]
    TopK,
    /// n items drawn uniformly from the 2n most similar, seeded.
    SampleTop2k,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedItem {
    pub item: EvidenceItem,
    pub provenance: Provenance,
    /// Cosine similarity to the mining query; gold items carry none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePack {
    pub record_id: String,
    pub mode: RetrievalMode,
    pub images: Vec<PackedItem>,
    pub texts: Vec<PackedItem>,
    pub caps: Caps,
    pub sampling_seed: u64,
}

impl EvidencePack {
    pub fn items(&self) -> impl Iterator<Item = &PackedItem> {
        self.images.iter().chain(self.texts.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items().map(|p| p.item.evidence_id.as_str())
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|p| p.item.evidence_id.clone()).collect()
    }

    pub fn text_ids(&self) -> Vec<String> {
        self.texts.iter().map(|p| p.item.evidence_id.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty() && self.texts.is_empty()
    }
}

/// Assembles packs for records against one embedding store and evidence catalog.
#[derive(Debug, Clone, Copy)]
pub struct PackBuilder<'a> {
    pub store: &'a EmbeddingStore,
    pub catalog: &'a BTreeMap<String, EvidenceItem>,
    pub caps: Caps,
    pub selection: DistractorSelection,
}

impl<'a> PackBuilder<'a> {
    pub fn new(
        store: &'a EmbeddingStore,
        catalog: &'a BTreeMap<String, EvidenceItem>,
        caps: Caps,
    ) -> Self {
        PackBuilder {
            store,
            catalog,
            caps,
            selection: DistractorSelection::TopK,
        }
    }

    pub fn assemble(
        &self,
        record: &QueryRecord,
        mode: RetrievalMode,
        seed: u64,
    ) -> Result<EvidencePack, RetrievalError> {
        let images = self.fill(record, Modality::Image, mode, seed)?;
        let texts = self.fill(record, Modality::Text, mode, seed)?;
        let pack = EvidencePack {
            record_id: record.record_id.clone(),
            mode,
            images,
            texts,
            caps: self.caps,
            sampling_seed: seed,
        };
        if mode == RetrievalMode::DistractorsOnly && pack.is_empty() {
            let modality = if record.gold_image_ids.is_empty() {
                Modality::Text
            } else {
                Modality::Image
            };
            return Err(RetrievalError::NoDistractors {
                record_id: record.record_id.clone(),
                modality,
            });
        }
        Ok(pack)
    }

    fn fill(
        &self,
        record: &QueryRecord,
        modality: Modality,
        mode: RetrievalMode,
        seed: u64,
    ) -> Result<Vec<PackedItem>, RetrievalError> {
        let cap = self.caps.for_modality(modality);
        let gold_ids = match modality {
            Modality::Image => &record.gold_image_ids,
            Modality::Text => &record.gold_text_ids,
        };
        let gold: Vec<PackedItem> = gold_ids
            .iter()
            .map(|id| {
                self.catalog
                    .get(id)
                    .map(|item| PackedItem {
                        item: item.clone(),
                        provenance: Provenance::Gold,
                        score: None,
                    })
                    .ok_or_else(|| RetrievalError::UnresolvedGold {
                        record_id: record.record_id.clone(),
                        id: id.clone(),
                    })
            })
            .collect::<Result<_, _>>()?;

        let mut out: Vec<PackedItem> = match mode {
            RetrievalMode::DistractorsOnly => Vec::new(),
            _ => gold.into_iter().take(cap).collect(),
        };
        if mode == RetrievalMode::GtOnly {
            return Ok(out);
        }
        let slots = cap - out.len();
        if slots == 0 {
            return Ok(out);
        }
        let distractors = self.mine(record, modality, slots, seed);
        if mode == RetrievalMode::DistractorsOnly && distractors.is_empty() && !gold_ids.is_empty() {
            return Err(RetrievalError::NoDistractors {
                record_id: record.record_id.clone(),
                modality,
            });
        }
        out.extend(distractors.into_iter().map(|(id, score)| PackedItem {
            item: self.catalog[&id].clone(),
            provenance: Provenance::Distractor,
            score: Some(score),
        }));
        Ok(out)
    }

    /// Ranked non-gold candidates of one modality, nearest to the gold centroid.
    fn mine(
        &self,
        record: &QueryRecord,
        modality: Modality,
        n: usize,
        seed: u64,
    ) -> Vec<(String, f64)> {
        let Some(query) = mining_query(self.store, record, modality) else {
            return Vec::new();
        };
        let gold: BTreeSet<&str> = record.gold_ids().collect();
        let keep = |id: &str| {
            !gold.contains(id)
                && self
                    .catalog
                    .get(id)
                    .is_some_and(|item| item.modality == modality)
        };
        match self.selection {
            DistractorSelection::TopK => self.store.rank_by_vector(&query, n, keep),
            DistractorSelection::SampleTop2k => {
                let pool = self.store.rank_by_vector(&query, 2 * n, keep);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &record.record_id, modality));
                let mut picked: Vec<usize> = (0..pool.len()).collect();
                picked.shuffle(&mut rng);
                picked.truncate(n);
                picked.sort_unstable();
                picked.into_iter().map(|i| pool[i].clone()).collect()
            }
        }
    }
}

/// The vector distractors are mined against: the centroid of the record's gold
/// embeddings in `modality`, falling back to the centroid of all its gold
/// embeddings when that modality has none.
pub fn mining_query(
    store: &EmbeddingStore,
    record: &QueryRecord,
    modality: Modality,
) -> Option<Vec<f64>> {
    let same: Vec<&[f64]> = match modality {
        Modality::Image => &record.gold_image_ids,
        Modality::Text => &record.gold_text_ids,
    }
    .iter()
    .filter_map(|id| store.get(id))
    .collect();
    let vectors = if same.is_empty() {
        record.gold_ids().filter_map(|id| store.get(id)).collect()
    } else {
        same
    };
    if vectors.is_empty() {
        return None;
    }
    let mut centroid = vec![0.0; store.dimension()];
    for v in &vectors {
        for (c, x) in centroid.iter_mut().zip(v.iter()) {
            *c += x;
        }
    }
    let k = vectors.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= k);
    Some(centroid)
}

fn derive_seed(seed: u64, record_id: &str, modality: Modality) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(record_id.as_bytes());
    h.update([modality as u8]);
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Top-k pack assembly with default selection.
pub fn assemble_evidence(
    record: &QueryRecord,
    mode: RetrievalMode,
    store: &EmbeddingStore,
    catalog: &BTreeMap<String, EvidenceItem>,
    caps: Caps,
    seed: u64,
) -> Result<EvidencePack, RetrievalError> {
    PackBuilder::new(store, catalog, caps).assemble(record, mode, seed)
}
