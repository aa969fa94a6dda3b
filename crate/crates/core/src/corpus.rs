//! Document data model, vocabulary, knowledge annotation, JSONL I/O, and
//! seeded synthetic corpus generators.
//!
//! A product document is a category label plus an ordered list of aspect
//! sections; each aspect carries a token description, a short token summary,
//! and knowledge spans marking KB-attribute and unique-selling-proposition
//! phrases. Corpora are pre-tokenized: files hold token lists, not raw text.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const BOS: usize = 5;
pub const EOS: usize = 6;
pub const NUM_SPECIALS: usize = 7;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] =
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"];

/// Token ↔ id mapping with the seven fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from token frequency counts. Non-special tokens
    /// are ordered by (frequency desc, token asc) for determinism; tokens
    /// below `min_freq` and tokens spelled like a special are dropped.
    pub fn from_counts(counts: &HashMap<String, usize>, min_freq: usize) -> Result<Self> {
        if min_freq < 1 {
            return Err(Error::invalid("min_freq must be at least 1".to_string()));
        }
        let mut entries: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(entries.into_iter().map(|(t, _)| t.clone()));
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { id_to_token, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token; unknown tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for t in &self.id_to_token {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut id_to_token = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i < NUM_SPECIALS && line != SPECIAL_TOKENS[i] {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected special token {} at id {i}", SPECIAL_TOKENS[i]),
                });
            }
            id_to_token.push(line);
        }
        if id_to_token.len() < NUM_SPECIALS {
            return Err(Error::invalid("vocab file is missing special tokens".to_string()));
        }
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { id_to_token, token_to_id })
    }
}

/// Builds the vocabulary over every description and summary token of the
/// corpus.
pub fn build_vocab(corpus: &[ProductDocument], min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus".to_string()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for aspect in &doc.aspects {
            for t in aspect.description.iter().chain(&aspect.summary) {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
    }
    Vocab::from_counts(&counts, min_freq)
}

/// Kind of knowledge annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    KbAttribute,
    Usp,
}

/// Half-open token span within one aspect description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeSpan {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

/// One facet of a product: description tokens, summary tokens, knowledge
/// spans, and (for the KB-completion task) optional per-token BIO labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AspectSection {
    pub description: Vec<String>,
    pub summary: Vec<String>,
    pub spans: Vec<KnowledgeSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bio_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductDocument {
    pub id: String,
    pub category: usize,
    pub aspects: Vec<AspectSection>,
}

impl ProductDocument {
    /// Total content tokens across aspect descriptions (no `[CLS]`).
    pub fn content_len(&self) -> usize {
        self.aspects.iter().map(|a| a.description.len()).sum()
    }

    /// Structural invariants: non-empty aspects and descriptions/summaries,
    /// spans in bounds and pairwise disjoint, labels (when present) aligned.
    pub fn validate(&self) -> Result<()> {
        if self.aspects.is_empty() {
            return Err(Error::invalid(format!("document {}: no aspects", self.id)));
        }
        for (ai, aspect) in self.aspects.iter().enumerate() {
            if aspect.description.is_empty() {
                return Err(Error::invalid(format!(
                    "document {} aspect {ai}: empty description",
                    self.id
                )));
            }
            if aspect.summary.is_empty() {
                return Err(Error::invalid(format!(
                    "document {} aspect {ai}: empty summary",
                    self.id
                )));
            }
            let mut spans = aspect.spans.clone();
            spans.sort_by_key(|s| s.start);
            for (si, s) in spans.iter().enumerate() {
                if s.start >= s.end || s.end > aspect.description.len() {
                    return Err(Error::invalid(format!(
                        "document {} aspect {ai}: span {}..{} out of bounds (len {})",
                        self.id,
                        s.start,
                        s.end,
                        aspect.description.len()
                    )));
                }
                if si > 0 && spans[si - 1].end > s.start {
                    return Err(Error::invalid(format!(
                        "document {} aspect {ai}: overlapping spans",
                        self.id
                    )));
                }
            }
            if let Some(labels) = &aspect.bio_labels {
                if labels.len() != aspect.description.len() {
                    return Err(Error::invalid(format!(
                        "document {} aspect {ai}: {} bio labels for {} tokens",
                        self.id,
                        labels.len(),
                        aspect.description.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A document flattened to model input: `[CLS]` plus concatenated aspect
/// descriptions, with aligned boundary labels and a knowledge mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatDocument {
    pub tokens: Vec<usize>,
    /// 1 exactly at the first token of each aspect; `[CLS]` gets 0.
    pub boundary_labels: Vec<u8>,
    /// True exactly inside knowledge spans; `[CLS]` gets false.
    pub knowledge_mask: Vec<bool>,
    pub category: usize,
    /// Half-open aspect ranges in flattened-token coordinates.
    pub aspect_offsets: Vec<(usize, usize)>,
}

impl FlatDocument {
    /// Content tokens, excluding the leading `[CLS]`.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Content positions (1-based within `tokens`) marked as knowledge.
    pub fn knowledge_positions(&self) -> Vec<usize> {
        (1..self.tokens.len()).filter(|&p| self.knowledge_mask[p]).collect()
    }
}

/// Flattens a document against a vocabulary. Fails when the flattened
/// content would not leave room for `[CLS]` within `max_len`.
pub fn flatten(doc: &ProductDocument, vocab: &Vocab, max_len: usize) -> Result<FlatDocument> {
    doc.validate()?;
    let content = doc.content_len();
    if content > max_len - 1 {
        return Err(Error::invalid(format!(
            "document {}: flattened length {content} exceeds max_len - 1 = {}",
            doc.id,
            max_len - 1
        )));
    }
    let mut tokens = Vec::with_capacity(content + 1);
    let mut boundary = Vec::with_capacity(content + 1);
    let mut mask = Vec::with_capacity(content + 1);
    let mut offsets = Vec::with_capacity(doc.aspects.len());
    tokens.push(CLS);
    boundary.push(0u8);
    mask.push(false);
    for aspect in &doc.aspects {
        let start = tokens.len();
        for (ti, t) in aspect.description.iter().enumerate() {
            tokens.push(vocab.id(t));
            boundary.push(u8::from(ti == 0));
            mask.push(aspect.spans.iter().any(|s| s.start <= ti && ti < s.end));
        }
        offsets.push((start, tokens.len()));
    }
    Ok(FlatDocument {
        tokens,
        boundary_labels: boundary,
        knowledge_mask: mask,
        category: doc.category,
        aspect_offsets: offsets,
    })
}

// ── JSONL I/O ───────────────────────────────────────────────────────

pub fn save_corpus(path: &Path, corpus: &[ProductDocument]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for doc in corpus {
        serde_json::to_writer(&mut w, doc)
            .map_err(|e| Error::invalid(format!("serializing {}: {e}", doc.id)))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<ProductDocument>> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: ProductDocument = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        doc.validate()?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::invalid("empty corpus".to_string()));
    }
    Ok(docs)
}

/// A (source, target) pair for sequence-to-sequence fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SumPair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// A multi-turn dialogue with its gold response and optional negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub turns: Vec<Vec<String>>,
    pub response: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<Vec<String>>,
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?,
        );
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("empty file: {}", path.display())));
    }
    Ok(out)
}

fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_sum_pairs(path: &Path) -> Result<Vec<SumPair>> {
    load_jsonl(path)
}

pub fn save_sum_pairs(path: &Path, pairs: &[SumPair]) -> Result<()> {
    save_jsonl(path, pairs)
}

pub fn load_dialogues(path: &Path) -> Result<Vec<DialogueRecord>> {
    load_jsonl(path)
}

pub fn save_dialogues(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    save_jsonl(path, records)
}

// ── synthetic generation ────────────────────────────────────────────

/// Shape of the synthetic pre-training corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenProfile {
    pub aspects_min: usize,
    pub aspects_max: usize,
    pub desc_min: usize,
    pub desc_max: usize,
    pub summary_max: usize,
    pub kb_spans_max: usize,
    pub usp_spans_max: usize,
    /// Hard cap on flattened content tokens per document.
    pub max_content_tokens: usize,
    /// Distinct filler words available per category.
    pub category_lexicon: usize,
}

impl GenProfile {
    /// Documents sized for the full 512-token context: 8–12 aspects.
    pub fn full() -> Self {
        GenProfile {
            aspects_min: 8,
            aspects_max: 12,
            desc_min: 8,
            desc_max: 40,
            summary_max: 8,
            kb_spans_max: 3,
            usp_spans_max: 2,
            max_content_tokens: 511,
            category_lexicon: 12,
        }
    }

    /// Small documents that fit the 128-token desk context.
    pub fn desk() -> Self {
        GenProfile {
            aspects_min: 2,
            aspects_max: 4,
            desc_min: 8,
            desc_max: 16,
            summary_max: 6,
            kb_spans_max: 2,
            usp_spans_max: 1,
            max_content_tokens: 127,
            category_lexicon: 8,
        }
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "de", "fi", "go", "hu", "ka", "le", "mi", "no", "pu", "ra", "se", "ti", "vo", "zu",
    "chal", "dor", "mex", "rin", "tal",
];

const GLUE: [&str; 16] = [
    "the", "with", "a", "for", "and", "this", "offers", "features", "built", "to", "in", "its",
    "gives", "makes", "of", "every",
];

const SUMMARY_GLUE: [&str; 6] =
    ["featuring", "highlight", "overall", "notably", "includes", "plus"];

const ATTRIBUTES: [&str; 8] =
    ["material", "color", "size", "weight", "finish", "battery", "fabric", "origin"];

const ATTRIBUTE_VALUES: [[&str; 6]; 8] = [
    ["cotton", "copper", "walnut", "ceramic", "nylon", "bamboo"],
    ["crimson", "azure", "ivory", "charcoal", "amber", "yellow"],
    ["compact", "oversize", "medium", "slim", "wide", "tall"],
    ["feather", "light", "solid", "hefty", "balanced", "dense"],
    ["matte", "glossy", "brushed", "polished", "satin", "textured"],
    ["endurance", "rapid", "allday", "quickcharge", "standby", "cell"],
    ["linen", "fleece", "denim", "canvas", "mesh", "twill"],
    ["coastal", "alpine", "urban", "nordic", "island", "valley"],
];

const USP_WORDS: [&str; 12] = [
    "crystal", "clear", "ultra", "quiet", "seamless", "instant", "effortless", "premium",
    "signature", "precision", "adaptive", "enduring",
];

/// Deterministic pseudo-word for filler slot `j` of category `k`.
fn category_word(k: usize, j: usize) -> String {
    let a = SYLLABLES[(k * 7 + j * 3) % SYLLABLES.len()];
    let b = SYLLABLES[(k * 11 + j * 5 + 4) % SYLLABLES.len()];
    format!("{a}{b}{k}")
}

fn build_aspect(category: usize, profile: &GenProfile, rng: &mut ChaCha8Rng) -> AspectSection {
    let n_kb = rng.gen_range(1..=profile.kb_spans_max.max(1));
    let n_usp = rng.gen_range(0..=profile.usp_spans_max);

    // phrase list: KB phrases are (attribute, value) pairs; USP phrases are
    // short slogans whose tokens reappear in the summary. Values and slogans
    // are drawn from a category-conditioned sliver of each lexicon, so the
    // knowledge tokens correlate with the surrounding category words.
    let mut phrases: Vec<(SpanKind, Vec<String>)> = Vec::new();
    for _ in 0..n_kb {
        let ai = rng.gen_range(0..ATTRIBUTES.len());
        let v = ATTRIBUTE_VALUES[ai][(category * 3 + rng.gen_range(0..2)) % 6];
        phrases.push((SpanKind::KbAttribute, vec![ATTRIBUTES[ai].to_string(), v.to_string()]));
    }
    let mut usp_tokens: Vec<String> = Vec::new();
    for _ in 0..n_usp {
        let i = (category * 5 + rng.gen_range(0..2)) % USP_WORDS.len();
        let j = (category * 7 + rng.gen_range(0..2)) % USP_WORDS.len();
        let phrase = vec![USP_WORDS[i].to_string(), USP_WORDS[j].to_string()];
        usp_tokens.extend(phrase.iter().cloned());
        phrases.push((SpanKind::Usp, phrase));
    }
    phrases.shuffle(rng);

    let phrase_total: usize = phrases.iter().map(|(_, p)| p.len()).sum();
    let desc_len = rng
        .gen_range(profile.desc_min..=profile.desc_max)
        .max(phrase_total + phrases.len() + 1);
    let mut filler_budget = desc_len - phrase_total;

    let mut description: Vec<String> = Vec::with_capacity(desc_len);
    let mut spans = Vec::new();
    let filler = |rng: &mut ChaCha8Rng, out: &mut Vec<String>, n: usize| {
        for _ in 0..n {
            if rng.gen_bool(0.5) {
                out.push(category_word(category, rng.gen_range(0..profile.category_lexicon)));
            } else {
                out.push(GLUE[rng.gen_range(0..GLUE.len())].to_string());
            }
        }
    };
    for (kind, phrase) in &phrases {
        let lead = if filler_budget > 1 { rng.gen_range(1..=filler_budget / 2 + 1) } else { 1 }
            .min(filler_budget);
        filler(rng, &mut description, lead);
        filler_budget -= lead;
        let start = description.len();
        description.extend(phrase.iter().cloned());
        spans.push(KnowledgeSpan { start, end: description.len(), kind: *kind });
    }
    filler(rng, &mut description, filler_budget);

    // summary: template glue plus the aspect's USP tokens (and a KB value as
    // backup when no USP was drawn), capped below the description length
    let cap = profile.summary_max.min(description.len() - 1).max(1);
    let mut summary = vec![SUMMARY_GLUE[rng.gen_range(0..SUMMARY_GLUE.len())].to_string()];
    for t in &usp_tokens {
        if summary.len() >= cap {
            break;
        }
        summary.push(t.clone());
    }
    if summary.len() < 2 && cap >= 2 {
        if let Some((_, phrase)) = phrases.iter().find(|(k, _)| *k == SpanKind::KbAttribute) {
            summary.push(phrase[1].clone());
        }
    }
    AspectSection { description, summary, spans, bio_labels: None }
}

/// Generates a seeded synthetic corpus. Categories are assigned round-robin,
/// so every category in `[0, n_categories)` appears once
/// `n_docs >= n_categories`.
pub fn generate_synthetic(
    seed: u64,
    n_docs: usize,
    n_categories: usize,
    profile: &GenProfile,
) -> Result<Vec<ProductDocument>> {
    if n_docs == 0 {
        return Err(Error::invalid("n_docs must be at least 1".to_string()));
    }
    if n_categories == 0 {
        return Err(Error::invalid("n_categories must be at least 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let category = i % n_categories;
        let n_aspects = rng.gen_range(profile.aspects_min..=profile.aspects_max);
        let mut aspects = Vec::with_capacity(n_aspects);
        let mut total = 0usize;
        for _ in 0..n_aspects {
            let aspect = build_aspect(category, profile, &mut rng);
            if total + aspect.description.len() > profile.max_content_tokens
                && aspects.len() >= profile.aspects_min.min(2)
            {
                break;
            }
            total += aspect.description.len();
            aspects.push(aspect);
        }
        let doc = ProductDocument { id: format!("doc-{i:06}"), category, aspects };
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

// ── synthetic task datasets ─────────────────────────────────────────

/// Attribute types used by the templated KB-completion dataset.
pub fn kbc_attributes() -> Vec<String> {
    ATTRIBUTES.iter().map(|s| s.to_string()).collect()
}

const KBC_NOUNS: [&str; 8] =
    ["collar", "sleeve", "panel", "handle", "strap", "casing", "lining", "frame"];

/// Attribute values for the templated tagging corpus. Value vocabularies are
/// disjoint across attributes, so the token → label mapping is unambiguous
/// and high F1 is attainable.
fn kbc_value(attr_idx: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let single = ATTRIBUTE_VALUES[attr_idx][rng.gen_range(0..6)].to_string();
    let modifiers = ["bright", "deep", "soft", "pale"];
    if rng.gen_bool(0.5) {
        vec![modifiers[rng.gen_range(0..4)].to_string(), single]
    } else {
        vec![single]
    }
}

/// Templated attribute-tagging corpus: each document is one aspect whose
/// `bio_labels` mark attribute-value phrases. The pattern behind
/// "A bright yellow collar" (determiner, modifier + color value, noun) is a
/// core template.
pub fn generate_kbc_corpus(seed: u64, n_docs: usize) -> Result<Vec<ProductDocument>> {
    if n_docs == 0 {
        return Err(Error::invalid("n_docs must be at least 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let mut description: Vec<String> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        let mut spans = Vec::new();
        let n_phrases = rng.gen_range(1..=2);
        description.push("A".to_string());
        labels.push("O".to_string());
        for _ in 0..n_phrases {
            let ai = rng.gen_range(0..ATTRIBUTES.len());
            let value = kbc_value(ai, &mut rng);
            let start = description.len();
            for (vi, v) in value.iter().enumerate() {
                description.push(v.clone());
                labels.push(format!(
                    "{}-{}",
                    ATTRIBUTES[ai],
                    if vi == 0 { "B" } else { "I" }
                ));
            }
            spans.push(KnowledgeSpan {
                start,
                end: description.len(),
                kind: SpanKind::KbAttribute,
            });
            description.push(KBC_NOUNS[rng.gen_range(0..KBC_NOUNS.len())].to_string());
            labels.push("O".to_string());
            if rng.gen_bool(0.6) {
                description.push(GLUE[rng.gen_range(0..GLUE.len())].to_string());
                labels.push("O".to_string());
            }
        }
        let summary = vec!["item".to_string()];
        docs.push(ProductDocument {
            id: format!("kbc-{i:06}"),
            category: 0,
            aspects: vec![AspectSection {
                description,
                summary,
                spans,
                bio_labels: Some(labels),
            }],
        });
    }
    Ok(docs)
}

/// Summarization pairs derived from the synthetic document generator: the
/// source is an aspect description, the target its summary.
pub fn generate_sum_pairs(seed: u64, n_pairs: usize) -> Result<Vec<SumPair>> {
    let profile = GenProfile::desk();
    let docs = generate_synthetic(seed, n_pairs, 40, &profile)?;
    Ok(docs
        .iter()
        .enumerate()
        .map(|(i, d)| SumPair {
            id: Some(format!("sum-{i:06}")),
            source: d.aspects[0].description.clone(),
            target: d.aspects[0].summary.clone(),
        })
        .collect())
}

const DIALOGUE_FILLER: [&str; 10] = [
    "hello", "please", "about", "order", "asking", "thanks", "checking", "item", "status", "help",
];

/// Number of distinct topic markers in the synthetic dialogue set.
pub const DIALOGUE_MARKERS: usize = 12;

fn dialogue_marker(m: usize) -> String {
    format!("topic{m}")
}

/// Separable multi-turn dialogues: the gold response opens with the same
/// topic marker that appears in the context; negatives carry other markers.
pub fn generate_dialogues(
    seed: u64,
    n_examples: usize,
    n_negatives: usize,
) -> Result<Vec<DialogueRecord>> {
    if n_negatives + 1 > DIALOGUE_MARKERS {
        return Err(Error::invalid(format!(
            "at most {} negatives supported",
            DIALOGUE_MARKERS - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let marker = rng.gen_range(0..DIALOGUE_MARKERS);
        let n_turns = rng.gen_range(1..=2);
        let mut turns = Vec::with_capacity(n_turns);
        for t in 0..n_turns {
            let mut turn: Vec<String> =
                (0..rng.gen_range(2..=4)).map(|_| random_filler(&mut rng)).collect();
            if t == n_turns - 1 {
                turn.insert(0, dialogue_marker(marker));
            }
            turns.push(turn);
        }
        let mut response = vec![dialogue_marker(marker)];
        response.extend((0..rng.gen_range(1..=3)).map(|_| random_filler(&mut rng)));
        let mut others: Vec<usize> = (0..DIALOGUE_MARKERS).filter(|&m| m != marker).collect();
        others.shuffle(&mut rng);
        let negatives = others[..n_negatives]
            .iter()
            .map(|&m| {
                let mut neg = vec![dialogue_marker(m)];
                neg.extend((0..rng.gen_range(1..=3)).map(|_| random_filler(&mut rng)));
                neg
            })
            .collect();
        out.push(DialogueRecord { turns, response, negatives });
    }
    Ok(out)
}

fn random_filler(rng: &mut ChaCha8Rng) -> String {
    DIALOGUE_FILLER[rng.gen_range(0..DIALOGUE_FILLER.len())].to_string()
}
