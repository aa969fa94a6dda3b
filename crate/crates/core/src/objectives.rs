//! The five self-supervised pre-training objectives: knowledge-aware masked
//! language modeling (kmlm), knowledge-aware masked span reconstruction
//! (kms2s), aspect-boundary detection (peabd), category classification
//! (pecc), and aspect-summary generation (peasg).
//!
//! Masking prioritizes knowledge tokens. Token-level masking selects 15% of
//! content tokens, preferring knowledge positions and topping up with random
//! ones; span masking covers 30% of the content with the contiguous window
//! that spans the most knowledge tokens. All losses are mean negative
//! log-likelihood per target, so the joint total is a plain sum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    flatten, AspectSection, FlatDocument, ProductDocument, Vocab, BOS, CLS, EOS, MASK,
    NUM_SPECIALS,
};
use crate::error::{Error, Result};
use crate::model::{apply_head, decode, encode, no_pads, ModelBinding, ModelConfig};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Objective {
    Kmlm,
    Kms2s,
    Peabd,
    Pecc,
    Peasg,
}

pub const ALL_OBJECTIVES: [Objective; 5] =
    [Objective::Kmlm, Objective::Kms2s, Objective::Peabd, Objective::Pecc, Objective::Peasg];

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Kmlm => "kmlm",
            Objective::Kms2s => "kms2s",
            Objective::Peabd => "peabd",
            Objective::Pecc => "pecc",
            Objective::Peasg => "peasg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kmlm" => Ok(Objective::Kmlm),
            "kms2s" => Ok(Objective::Kms2s),
            "peabd" => Ok(Objective::Peabd),
            "pecc" => Ok(Objective::Pecc),
            "peasg" => Ok(Objective::Peasg),
            other => Err(Error::invalid(format!("unknown objective: {other}"))),
        }
    }
}

/// The set of enabled objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveSet {
    bits: u8,
}

impl ObjectiveSet {
    pub fn all() -> Self {
        ObjectiveSet { bits: 0b11111 }
    }

    pub fn empty() -> Self {
        ObjectiveSet { bits: 0 }
    }

    pub fn single(obj: Objective) -> Self {
        ObjectiveSet::empty().with(obj)
    }

    pub fn with(mut self, obj: Objective) -> Self {
        self.bits |= 1 << obj as u8;
        self
    }

    pub fn without(mut self, obj: Objective) -> Self {
        self.bits &= !(1 << obj as u8);
        self
    }

    pub fn contains(&self, obj: Objective) -> bool {
        self.bits & (1 << obj as u8) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Objective> + '_ {
        ALL_OBJECTIVES.into_iter().filter(|o| self.contains(*o))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.iter().map(|o| o.name()).collect()
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut set = ObjectiveSet::empty();
        for n in names {
            set = set.with(Objective::parse(n.as_ref())?);
        }
        Ok(set)
    }
}

impl Serialize for ObjectiveSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ObjectiveSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        ObjectiveSet::from_names(&names).map_err(serde::de::Error::custom)
    }
}

// ── masking ─────────────────────────────────────────────────────────

/// Tokens to mask for token-level masking: 15% of the content length,
/// rounded half-up, never less than 1.
pub fn mask_budget(content_len: usize) -> usize {
    ((15 * content_len + 50) / 100).max(1)
}

/// Span length for span masking: 30% of the content length, rounded
/// half-up, never less than 1.
pub fn span_budget(content_len: usize) -> usize {
    ((30 * content_len + 50) / 100).max(1)
}

/// A corrupted input with its reconstruction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskedInstance {
    /// Token-level masking: `targets` holds (position, original id) pairs,
    /// sorted by position, all within content (never `[CLS]`).
    Kmlm { corrupted: Vec<usize>, targets: Vec<(usize, usize)> },
    /// Span masking: positions `u..=v` of `corrupted` hold `[MASK]`;
    /// `decoder_input` is the right-shifted gold span behind `[BOS]`.
    Kms2s {
        corrupted: Vec<usize>,
        u: usize,
        v: usize,
        decoder_input: Vec<usize>,
        targets: Vec<usize>,
    },
}

/// Builds a token-level masked instance. Selection prioritizes knowledge
/// positions: when they exceed the budget, a uniform subset of them is
/// taken; otherwise all of them plus uniform random non-knowledge positions
/// fill the budget. Each selected position is independently replaced with
/// `[MASK]` (80%), a random non-special token (10%), or kept (10%).
pub fn kmlm_mask(flat: &FlatDocument, vocab_size: usize, rng: &mut ChaCha8Rng) -> MaskedInstance {
    let m = flat.content_len();
    let budget = mask_budget(m);
    let knowledge = flat.knowledge_positions();
    let mut selected: Vec<usize> = if knowledge.len() >= budget {
        rand::seq::index::sample(rng, knowledge.len(), budget)
            .into_iter()
            .map(|i| knowledge[i])
            .collect()
    } else {
        let other: Vec<usize> =
            (1..flat.tokens.len()).filter(|&p| !flat.knowledge_mask[p]).collect();
        let extra = budget - knowledge.len();
        let mut sel = knowledge.clone();
        sel.extend(rand::seq::index::sample(rng, other.len(), extra).into_iter().map(|i| other[i]));
        sel
    };
    selected.sort_unstable();

    let mut corrupted = flat.tokens.clone();
    let mut targets = Vec::with_capacity(selected.len());
    for &pos in &selected {
        let original = flat.tokens[pos];
        targets.push((pos, original));
        let draw: f64 = rng.gen();
        corrupted[pos] = if draw < 0.8 {
            MASK
        } else if draw < 0.9 && vocab_size > NUM_SPECIALS {
            rng.gen_range(NUM_SPECIALS..vocab_size)
        } else if draw < 0.9 {
            MASK
        } else {
            original
        };
    }
    MaskedInstance::Kmlm { corrupted, targets }
}

/// Knowledge coverage of every content window of length `len`, indexed by
/// start position minus one (starts are 1-based, `[CLS]` excluded).
fn window_coverage(flat: &FlatDocument, len: usize) -> Vec<usize> {
    let m = flat.content_len();
    let mut prefix = vec![0usize; flat.tokens.len() + 1];
    for p in 1..flat.tokens.len() {
        prefix[p + 1] = prefix[p] + usize::from(flat.knowledge_mask[p]);
    }
    (1..=m - len + 1).map(|u| prefix[u + len] - prefix[u]).collect()
}

/// Builds a span-masked instance. Among all content windows of the budgeted
/// length, picks one with maximal knowledge coverage, breaking ties
/// uniformly at random.
pub fn kms2s_mask(flat: &FlatDocument, rng: &mut ChaCha8Rng) -> MaskedInstance {
    let m = flat.content_len();
    let len = span_budget(m);
    let coverage = window_coverage(flat, len);
    let best = *coverage.iter().max().expect("at least one window");
    let ties: Vec<usize> =
        coverage.iter().enumerate().filter(|(_, &c)| c == best).map(|(i, _)| i + 1).collect();
    let u = ties[rng.gen_range(0..ties.len())];
    let v = u + len - 1;

    let mut corrupted = flat.tokens.clone();
    let targets: Vec<usize> = flat.tokens[u..=v].to_vec();
    for slot in corrupted.iter_mut().take(v + 1).skip(u) {
        *slot = MASK;
    }
    let mut decoder_input = Vec::with_capacity(len);
    decoder_input.push(BOS);
    decoder_input.extend_from_slice(&targets[..len - 1]);
    MaskedInstance::Kms2s { corrupted, u, v, decoder_input, targets }
}

// ── losses ──────────────────────────────────────────────────────────

/// Mean NLL of the original tokens at masked positions, predicted from the
/// corrupted sequence through the encoder and the tied projection.
pub fn kmlm_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    instance: &MaskedInstance,
) -> Result<Var> {
    let MaskedInstance::Kmlm { corrupted, targets } = instance else {
        return Err(Error::invalid("kmlm_loss: expected a token-masked instance".to_string()));
    };
    if targets.is_empty() {
        return Err(Error::invalid("kmlm_loss: no targets".to_string()));
    }
    let h = encode(tape, binding, cfg, corrupted, &no_pads(corrupted.len()), &mut None)?;
    let positions: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    let rows = tape.gather_rows(h, &positions)?;
    let logits = tape.matmul_nt(rows, binding.tok_embed)?;
    let ids: Vec<usize> = targets.iter().map(|&(_, t)| t).collect();
    tape.cross_entropy_logits(logits, &ids)
}

/// Mean NLL of the masked span under teacher forcing: the encoder sees the
/// corrupted sequence, the decoder the right-shifted gold span.
pub fn kms2s_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    instance: &MaskedInstance,
) -> Result<Var> {
    let MaskedInstance::Kms2s { corrupted, decoder_input, targets, .. } = instance else {
        return Err(Error::invalid("kms2s_loss: expected a span-masked instance".to_string()));
    };
    if targets.is_empty() {
        return Err(Error::invalid("kms2s_loss: empty span".to_string()));
    }
    let h = encode(tape, binding, cfg, corrupted, &no_pads(corrupted.len()), &mut None)?;
    let logits =
        decode(tape, binding, cfg, h, &no_pads(corrupted.len()), decoder_input, &mut None)?;
    tape.cross_entropy_logits(logits, targets)
}

/// Token-level two-class cross-entropy of the boundary head over content
/// positions of already-computed encoder states.
pub fn peabd_from_states(
    tape: &mut Tape,
    binding: &ModelBinding,
    enc_states: Var,
    flat: &FlatDocument,
) -> Result<Var> {
    let content = tape.slice_rows(enc_states, 1, flat.tokens.len())?;
    let logits = apply_head(tape, &binding.boundary, content)?;
    let labels: Vec<usize> = flat.boundary_labels[1..].iter().map(|&b| b as usize).collect();
    tape.cross_entropy_logits(logits, &labels)
}

pub fn peabd_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    flat: &FlatDocument,
) -> Result<Var> {
    let h = encode(tape, binding, cfg, &flat.tokens, &no_pads(flat.tokens.len()), &mut None)?;
    peabd_from_states(tape, binding, h, flat)
}

/// Category cross-entropy from the `[CLS]` state.
pub fn pecc_from_states(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    enc_states: Var,
    category: usize,
) -> Result<Var> {
    if category >= cfg.n_categories {
        return Err(Error::invalid(format!(
            "category {category} out of range ({} categories)",
            cfg.n_categories
        )));
    }
    let cls = tape.slice_rows(enc_states, 0, 1)?;
    let logits = apply_head(tape, &binding.category, cls)?;
    tape.cross_entropy_logits(logits, &[category])
}

pub fn pecc_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    flat: &FlatDocument,
) -> Result<Var> {
    let h = encode(tape, binding, cfg, &flat.tokens, &no_pads(flat.tokens.len()), &mut None)?;
    pecc_from_states(tape, binding, cfg, h, flat.category)
}

/// Encoder input, decoder input, and decoder targets for summary
/// generation: `[CLS]`+description → `[BOS]`+summary ⇒ summary+`[EOS]`.
pub fn peasg_io(aspect: &AspectSection, vocab: &Vocab) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut enc_in = vec![CLS];
    enc_in.extend(vocab.ids(&aspect.description));
    let summary = vocab.ids(&aspect.summary);
    let mut dec_in = vec![BOS];
    dec_in.extend_from_slice(&summary);
    let mut targets = summary;
    targets.push(EOS);
    (enc_in, dec_in, targets)
}

/// Teacher-forced mean NLL of an aspect summary given its description.
pub fn peasg_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    aspect: &AspectSection,
    vocab: &Vocab,
) -> Result<Var> {
    if aspect.description.is_empty() || aspect.summary.is_empty() {
        return Err(Error::invalid(
            "peasg_loss: aspect needs a non-empty description and summary".to_string(),
        ));
    }
    let (enc_in, dec_in, targets) = peasg_io(aspect, vocab);
    seq2seq_nll(tape, binding, cfg, &enc_in, &dec_in, &targets)
}

/// Shared teacher-forcing path: encode the source, decode the shifted
/// target, and average the NLL.
pub fn seq2seq_nll(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    enc_in: &[usize],
    dec_in: &[usize],
    targets: &[usize],
) -> Result<Var> {
    let h = encode(tape, binding, cfg, enc_in, &no_pads(enc_in.len()), &mut None)?;
    let logits = decode(tape, binding, cfg, h, &no_pads(enc_in.len()), dec_in, &mut None)?;
    tape.cross_entropy_logits(logits, targets)
}

// ── joint loss ──────────────────────────────────────────────────────

/// Per-objective loss values (mean NLL, nats) and their sum. Disabled
/// objectives are absent, not zero. `nll_sum` and `target_tokens` carry the
/// token-weighted aggregate so a per-token figure across objectives can be
/// derived.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub kmlm: Option<f64>,
    pub kms2s: Option<f64>,
    pub peabd: Option<f64>,
    pub pecc: Option<f64>,
    pub peasg: Option<f64>,
    pub total: f64,
    /// Summed (not averaged) NLL over every target token of every enabled
    /// objective.
    pub nll_sum: f64,
    /// Total target tokens across enabled objectives.
    pub target_tokens: usize,
}

impl LossBreakdown {
    pub fn component(&self, obj: Objective) -> Option<f64> {
        match obj {
            Objective::Kmlm => self.kmlm,
            Objective::Kms2s => self.kms2s,
            Objective::Peabd => self.peabd,
            Objective::Pecc => self.pecc,
            Objective::Peasg => self.peasg,
        }
    }

    pub fn component_sum(&self) -> f64 {
        [self.kmlm, self.kms2s, self.peabd, self.pecc, self.peasg].iter().flatten().sum()
    }

    /// Aggregate NLL per target token across enabled objectives.
    pub fn per_token(&self) -> f64 {
        if self.target_tokens == 0 {
            0.0
        } else {
            self.nll_sum / self.target_tokens as f64
        }
    }
}

/// Everything `joint_loss` derives from one document before touching the
/// model. Construction consumes randomness; the loss itself does not.
#[derive(Debug, Clone)]
pub struct JointParts {
    pub flat: FlatDocument,
    pub kmlm: Option<MaskedInstance>,
    pub kms2s: Option<MaskedInstance>,
    /// (encoder input, decoder input, targets) of the chosen aspect.
    pub peasg: Option<(Vec<usize>, Vec<usize>, Vec<usize>)>,
}

/// Draws the per-document instances for every enabled objective. The rng is
/// consumed in a fixed order: kmlm, kms2s, peasg aspect choice.
pub fn build_joint_parts(
    doc: &ProductDocument,
    vocab: &Vocab,
    cfg: &ModelConfig,
    enabled: &ObjectiveSet,
    rng: &mut ChaCha8Rng,
) -> Result<JointParts> {
    if enabled.is_empty() {
        return Err(Error::invalid("no objectives enabled".to_string()));
    }
    let flat = flatten(doc, vocab, cfg.max_len)?;
    let kmlm = enabled.contains(Objective::Kmlm).then(|| kmlm_mask(&flat, cfg.vocab_size, rng));
    let kms2s = enabled.contains(Objective::Kms2s).then(|| kms2s_mask(&flat, rng));
    let peasg = if enabled.contains(Objective::Peasg) {
        let aspect = &doc.aspects[rng.gen_range(0..doc.aspects.len())];
        Some(peasg_io(aspect, vocab))
    } else {
        None
    };
    Ok(JointParts { flat, kmlm, kms2s, peasg })
}

/// Computes every enabled loss from prepared parts. The clean-document
/// encoder forward is shared between the boundary and category objectives.
pub fn joint_loss_from_parts(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    parts: &JointParts,
    enabled: &ObjectiveSet,
) -> Result<(LossBreakdown, Var)> {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, total: &mut Option<Var>, v: Var, n_targets: usize| {
        breakdown.nll_sum += tape.scalar_value(v) * n_targets as f64;
        breakdown.target_tokens += n_targets;
        *total = Some(match *total {
            None => v,
            Some(t) => tape.add(t, v).expect("scalar add"),
        });
        tape.scalar_value(v)
    };

    if let Some(instance) = &parts.kmlm {
        let MaskedInstance::Kmlm { targets, .. } = instance else {
            return Err(Error::invalid("joint parts: wrong kmlm variant".to_string()));
        };
        let l = kmlm_loss(tape, binding, cfg, instance)?;
        breakdown.kmlm = Some(push(tape, &mut total, l, targets.len()));
    }
    if let Some(instance) = &parts.kms2s {
        let MaskedInstance::Kms2s { targets, .. } = instance else {
            return Err(Error::invalid("joint parts: wrong kms2s variant".to_string()));
        };
        let l = kms2s_loss(tape, binding, cfg, instance)?;
        breakdown.kms2s = Some(push(tape, &mut total, l, targets.len()));
    }
    if enabled.contains(Objective::Peabd) || enabled.contains(Objective::Pecc) {
        let flat = &parts.flat;
        let h = encode(tape, binding, cfg, &flat.tokens, &no_pads(flat.tokens.len()), &mut None)?;
        if enabled.contains(Objective::Peabd) {
            let l = peabd_from_states(tape, binding, h, flat)?;
            breakdown.peabd = Some(push(tape, &mut total, l, flat.content_len()));
        }
        if enabled.contains(Objective::Pecc) {
            let l = pecc_from_states(tape, binding, cfg, h, flat.category)?;
            breakdown.pecc = Some(push(tape, &mut total, l, 1));
        }
    }
    if let Some((enc_in, dec_in, targets)) = &parts.peasg {
        let l = seq2seq_nll(tape, binding, cfg, enc_in, dec_in, targets)?;
        breakdown.peasg = Some(push(tape, &mut total, l, targets.len()));
    }
    let total = total.ok_or_else(|| Error::invalid("no objectives enabled".to_string()))?;
    // summed in f64 so the breakdown is exact even when the tape quantizes
    breakdown.total = breakdown.component_sum();
    Ok((breakdown, total))
}

/// One-document joint loss: builds instances with `rng`, then sums every
/// enabled per-objective loss.
pub fn joint_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    doc: &ProductDocument,
    vocab: &Vocab,
    enabled: &ObjectiveSet,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Var)> {
    let parts = build_joint_parts(doc, vocab, cfg, enabled, rng)?;
    joint_loss_from_parts(tape, binding, cfg, &parts, enabled)
}
