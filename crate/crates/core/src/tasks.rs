//! Downstream tasks: attribute-value tagging (BIO), abstractive
//! summarization, and multi-turn dialogue in retrieval and generative form.
//!
//! Fine-tuning reuses the pre-training optimizer and schedule machinery;
//! inference (tagging, beam search, ranking) is pure given a model and its
//! inputs.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueRecord, ProductDocument, SumPair, Vocab, BOS, CLS, EOS, SEP};
use crate::error::{Error, Result};
use crate::model::{
    apply_head, decode, encode, no_pads, ModelBinding, TransformerModel,
};
use crate::objectives::seq2seq_nll;
use crate::tensor::{Tape, Var};
use crate::train::{lr_at, AdamConfig, OptimizerState, Schedule};

// ── BIO labels ──────────────────────────────────────────────────────

/// Label inventory for BIO tagging: `O` at id 0, then `{attr}-B`/`{attr}-I`
/// per attribute type in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioLabelSet {
    attributes: Vec<String>,
    labels: Vec<String>,
    ids: HashMap<String, usize>,
}

impl BioLabelSet {
    pub fn new(mut attributes: Vec<String>) -> Self {
        attributes.sort();
        attributes.dedup();
        let mut labels = vec!["O".to_string()];
        for a in &attributes {
            labels.push(format!("{a}-B"));
            labels.push(format!("{a}-I"));
        }
        let ids = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        BioLabelSet { attributes, labels, ids }
    }

    /// Collects attribute types from every label string in a training set.
    pub fn from_corpus(docs: &[ProductDocument]) -> Result<Self> {
        let mut attrs = Vec::new();
        for doc in docs {
            for aspect in &doc.aspects {
                let Some(labels) = &aspect.bio_labels else {
                    return Err(Error::invalid(format!(
                        "document {}: missing bio_labels",
                        doc.id
                    )));
                };
                for l in labels {
                    if l == "O" {
                        continue;
                    }
                    match l.rsplit_once('-') {
                        Some((attr, "B" | "I")) => attrs.push(attr.to_string()),
                        _ => {
                            return Err(Error::invalid(format!(
                                "document {}: malformed BIO label {l}",
                                doc.id
                            )))
                        }
                    }
                }
            }
        }
        if attrs.is_empty() {
            return Err(Error::invalid("no attribute labels in training set".to_string()));
        }
        Ok(BioLabelSet::new(attrs))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.ids
            .get(label)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown BIO label {label}")))
    }
}

/// A decoded attribute-value span (half-open token indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSpan {
    pub attribute: String,
    pub start: usize,
    pub end: usize,
    pub value: Vec<String>,
}

/// Decodes a BIO label sequence into spans. Maximal `B I*` runs of one
/// attribute become spans; an `I` without a compatible predecessor opens a
/// new span of its attribute.
pub fn decode_bio(labels: &[String], tokens: &[String]) -> Vec<AttributeSpan> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    let close = |open: &mut Option<(String, usize)>, end: usize, spans: &mut Vec<AttributeSpan>| {
        if let Some((attribute, start)) = open.take() {
            spans.push(AttributeSpan {
                attribute,
                start,
                end,
                value: tokens[start..end].to_vec(),
            });
        }
    };
    for (i, label) in labels.iter().enumerate() {
        match label.rsplit_once('-') {
            Some((attr, "B")) => {
                close(&mut open, i, &mut spans);
                open = Some((attr.to_string(), i));
            }
            Some((attr, "I")) => match &open {
                Some((cur, _)) if cur == attr => {}
                _ => {
                    close(&mut open, i, &mut spans);
                    open = Some((attr.to_string(), i));
                }
            },
            _ => close(&mut open, i, &mut spans),
        }
    }
    close(&mut open, labels.len(), &mut spans);
    spans
}

/// Writes non-overlapping spans back into a BIO label sequence.
pub fn encode_bio(spans: &[AttributeSpan], len: usize) -> Result<Vec<String>> {
    let mut labels = vec!["O".to_string(); len];
    let mut sorted: Vec<&AttributeSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    for w in sorted.windows(2) {
        if w[0].end > w[1].start {
            return Err(Error::invalid("overlapping spans".to_string()));
        }
    }
    for s in sorted {
        if s.start >= s.end || s.end > len {
            return Err(Error::invalid(format!("span {}..{} out of bounds", s.start, s.end)));
        }
        labels[s.start] = format!("{}-B", s.attribute);
        for slot in labels.iter_mut().take(s.end).skip(s.start + 1) {
            *slot = format!("{}-I", s.attribute);
        }
    }
    Ok(labels)
}

// ── shared fine-tuning loop ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub schedule: Schedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Tagging fine-tunes the encoder only unless this is set.
    #[serde(default)]
    pub unfreeze_decoder: bool,
}

/// Runs the step loop over examples prepared by `loss_fn`, which receives
/// (tape, binding, example index, per-step rng) and returns the scalar loss.
fn finetune_loop<F>(
    model: &mut TransformerModel,
    n_examples: usize,
    cfg: &FinetuneConfig,
    trainable: &dyn Fn(&str) -> bool,
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &ModelBinding, usize, &mut ChaCha8Rng) -> Result<Var>,
{
    if n_examples == 0 {
        return Err(Error::invalid("empty training set".to_string()));
    }
    cfg.schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.adam.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut losses = Vec::with_capacity(cfg.schedule.total_steps as usize);
    for step in 0..cfg.schedule.total_steps {
        if cursor >= order.len() {
            order = (0..n_examples).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let example = order[cursor];
        cursor += 1;
        let step_seed: u64 = rng.gen();
        let mut step_rng = ChaCha8Rng::seed_from_u64(step_seed);

        let lr = lr_at(step + 1, &cfg.schedule, cfg.adam.peak_lr)?;
        let mut tape = Tape::new(model.precision);
        let binding = model.bind(&mut tape);
        let loss = loss_fn(&mut tape, &binding, example, &mut step_rng)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { step: step as usize });
        }
        tape.backward(loss)?;
        model.absorb_grads(&tape, &binding);
        opt.step(model, lr, trainable)?;
        model.zero_grads();
        losses.push(value);
    }
    Ok(losses)
}

// ── attribute tagging ───────────────────────────────────────────────

/// Flattened tagging example: `[CLS]`-prefixed token ids and one label id
/// per content token.
fn tagging_example(
    doc: &ProductDocument,
    vocab: &Vocab,
    labels: &BioLabelSet,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ids = vec![CLS];
    let mut label_ids = Vec::new();
    for aspect in &doc.aspects {
        let Some(bio) = &aspect.bio_labels else {
            return Err(Error::invalid(format!("document {}: missing bio_labels", doc.id)));
        };
        if bio.len() != aspect.description.len() {
            return Err(Error::invalid(format!(
                "document {}: {} labels for {} tokens",
                doc.id,
                bio.len(),
                aspect.description.len()
            )));
        }
        ids.extend(vocab.ids(&aspect.description));
        for l in bio {
            label_ids.push(labels.id(l).map_err(|e| {
                Error::invalid(format!("document {}: {e}", doc.id))
            })?);
        }
    }
    Ok((ids, label_ids))
}

fn tagging_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    model_cfg: &crate::model::ModelConfig,
    ids: &[usize],
    label_ids: &[usize],
) -> Result<Var> {
    let head = binding
        .tagging
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no tagging head".to_string()))?;
    let h = encode(tape, binding, model_cfg, ids, &no_pads(ids.len()), &mut None)?;
    let content = tape.slice_rows(h, 1, ids.len())?;
    let logits = apply_head(tape, head, content)?;
    tape.cross_entropy_logits(logits, label_ids)
}

/// Fine-tunes the encoder plus a fresh tagging head with token-level
/// cross-entropy. The label inventory is derived from the training set.
pub fn finetune_tagger(
    model: &mut TransformerModel,
    train: &[ProductDocument],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<(BioLabelSet, Vec<f64>)> {
    let labels = BioLabelSet::from_corpus(train)?;
    model.attach_tagging_head(labels.len(), cfg.seed);
    let examples: Vec<(Vec<usize>, Vec<usize>)> =
        train.iter().map(|d| tagging_example(d, vocab, &labels)).collect::<Result<_>>()?;
    let model_cfg = model.config.clone();
    let unfreeze = cfg.unfreeze_decoder;
    let losses = finetune_loop(
        model,
        examples.len(),
        cfg,
        &move |name: &str| unfreeze || !name.starts_with("dec."),
        |tape, binding, i, _| {
            let (ids, label_ids) = &examples[i];
            tagging_loss(tape, binding, &model_cfg, ids, label_ids)
        },
    )?;
    Ok((labels, losses))
}

/// Predicts one label per content token: argmax over the tagging head,
/// ties broken by the lowest label id. `[CLS]` gets no label.
pub fn tag(
    model: &TransformerModel,
    labels: &BioLabelSet,
    tokens: &[String],
    vocab: &Vocab,
) -> Result<Vec<String>> {
    let head = model
        .params
        .tagging
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no tagging head".to_string()))?;
    if head.w.shape()[1] != labels.len() {
        return Err(Error::shape(format!(
            "tagging head has {} outputs but the label set has {}",
            head.w.shape()[1],
            labels.len()
        )));
    }
    let mut ids = vec![CLS];
    ids.extend(vocab.ids(tokens));
    let h = model.encode_states(&ids, &no_pads(ids.len()))?;
    let d = model.config.d_model;
    let n = labels.len();
    let mut out = Vec::with_capacity(tokens.len());
    for row in 1..ids.len() {
        let state = &h.data()[row * d..(row + 1) * d];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for l in 0..n {
            let mut score = head.b.data()[l];
            for (j, &s) in state.iter().enumerate() {
                score += s * head.w.data()[j * n + l];
            }
            if score > best_score {
                best_score = score;
                best = l;
            }
        }
        out.push(labels.label(best).to_string());
    }
    Ok(out)
}

// ── sequence-to-sequence fine-tuning ────────────────────────────────

/// Teacher-forced fine-tuning on (source, target) pairs: `[CLS]`+source →
/// `[BOS]`+target ⇒ target+`[EOS]`.
pub fn finetune_seq2seq(
    model: &mut TransformerModel,
    pairs: &[SumPair],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>> {
    for (i, p) in pairs.iter().enumerate() {
        if p.target.is_empty() {
            return Err(Error::invalid(format!(
                "pair {}: empty target",
                p.id.clone().unwrap_or_else(|| i.to_string())
            )));
        }
        if p.source.is_empty() {
            return Err(Error::invalid(format!(
                "pair {}: empty source",
                p.id.clone().unwrap_or_else(|| i.to_string())
            )));
        }
    }
    let io: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = pairs
        .iter()
        .map(|p| {
            let mut enc_in = vec![CLS];
            enc_in.extend(vocab.ids(&p.source));
            let tgt = vocab.ids(&p.target);
            let mut dec_in = vec![BOS];
            dec_in.extend_from_slice(&tgt);
            let mut targets = tgt;
            targets.push(EOS);
            (enc_in, dec_in, targets)
        })
        .collect();
    let model_cfg = model.config.clone();
    finetune_loop(model, io.len(), cfg, &|_| true, |tape, binding, i, _| {
        let (enc_in, dec_in, targets) = &io[i];
        seq2seq_nll(tape, binding, &model_cfg, enc_in, dec_in, targets)
    })
}

// ── beam search ─────────────────────────────────────────────────────

/// Anything that yields next-token log-probabilities for a decoder prefix.
/// The prefix always starts with the begin-of-sequence token.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum generated tokens (excluding `[BOS]`).
    pub max_len: usize,
    /// Hypothesis score: sum of log-probs divided by length^penalty.
    pub length_penalty: f64,
    pub bos: usize,
    pub eos: usize,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        BeamConfig { beam_size, max_len, length_penalty: 1.0, bos: BOS, eos: EOS }
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    sum_logp: f64,
    finish_step: usize,
}

impl Hypothesis {
    /// Generated length, excluding `[BOS]`.
    fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    fn score(&self, penalty: f64) -> f64 {
        self.sum_logp / (self.len() as f64).powf(penalty)
    }
}

/// Compares finished hypotheses: higher score first, then earlier
/// finishing, then lexicographically smaller token sequence.
fn better(a: &Hypothesis, b: &Hypothesis, penalty: f64) -> bool {
    let (sa, sb) = (a.score(penalty), b.score(penalty));
    if sa != sb {
        return sa > sb;
    }
    if a.finish_step != b.finish_step {
        return a.finish_step < b.finish_step;
    }
    a.tokens < b.tokens
}

/// Length-normalized beam search from `[BOS]` until `[EOS]` or `max_len`.
/// Returns the generated ids (no `[BOS]`; `[EOS]` kept when the hypothesis
/// finished). Candidate expansions tie-break on token id, so `beam_size = 1`
/// is exactly greedy decoding.
pub fn beam_search_scored(
    scorer: &mut dyn NextTokenScorer,
    cfg: &BeamConfig,
) -> Result<Vec<usize>> {
    if cfg.beam_size == 0 {
        return Err(Error::invalid("beam size must be at least 1".to_string()));
    }
    if cfg.max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1".to_string()));
    }
    let mut live = vec![Hypothesis { tokens: vec![cfg.bos], sum_logp: 0.0, finish_step: 0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        // (sum_logp, token, hyp index)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let logp = scorer.log_probs(&hyp.tokens)?;
            if logp.len() != scorer.vocab_size() {
                return Err(Error::shape(format!(
                    "scorer returned {} log-probs for vocab {}",
                    logp.len(),
                    scorer.vocab_size()
                )));
            }
            for (tok, &lp) in logp.iter().enumerate() {
                candidates.push((hyp.sum_logp + lp, tok, hi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam_size);
        for &(sum, tok, hi) in candidates.iter().take(cfg.beam_size) {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis { tokens, sum_logp: sum, finish_step: step + 1 };
            if tok == cfg.eos {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    let best = pool
        .iter()
        .fold(None::<&Hypothesis>, |acc, h| match acc {
            Some(b) if !better(h, b, cfg.length_penalty) => Some(b),
            _ => Some(h),
        })
        .ok_or_else(|| Error::invalid("beam search produced no hypotheses".to_string()))?;
    Ok(best.tokens[1..].to_vec())
}

/// Model-backed scorer: binds the model and encodes the source once, then
/// replays decoder forwards against a tape watermark.
pub struct ModelScorer<'a> {
    model: &'a TransformerModel,
    tape: Tape,
    binding: ModelBinding,
    enc: Var,
    enc_pad: Vec<bool>,
    mark: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TransformerModel, source: &[usize]) -> Result<Self> {
        let mut tape = Tape::new(model.precision);
        let binding = model.bind(&mut tape);
        let enc_pad = no_pads(source.len());
        let enc = encode(&mut tape, &binding, &model.config, source, &enc_pad, &mut None)?;
        let mark = tape.watermark();
        Ok(ModelScorer { model, tape, binding, enc, enc_pad, mark })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.tape.reset_to(self.mark);
        let logits = decode(
            &mut self.tape,
            &self.binding,
            &self.model.config,
            self.enc,
            &self.enc_pad,
            prefix,
            &mut None,
        )?;
        let v = self.model.config.vocab_size;
        let all = self.tape.value(logits);
        let row = &all[(prefix.len() - 1) * v..prefix.len() * v];
        Ok(log_softmax(row))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Beam search over the model for an encoded source sequence.
pub fn beam_search(
    model: &TransformerModel,
    source: &[usize],
    cfg: &BeamConfig,
) -> Result<Vec<usize>> {
    let mut scorer = ModelScorer::new(model, source)?;
    beam_search_scored(&mut scorer, cfg)
}

/// Generated ids as tokens with the trailing `[EOS]` removed.
pub fn ids_to_output(ids: &[usize], vocab: &Vocab, eos: usize) -> Vec<String> {
    let end = ids.iter().position(|&t| t == eos).unwrap_or(ids.len());
    vocab.tokens(&ids[..end])
}

// ── dialogue ────────────────────────────────────────────────────────

/// Encodes a multi-turn context as `[CLS] turn₁ [SEP] … turnₙ [SEP]`, with
/// the response (and a final `[SEP]`) appended for retrieval scoring. Turns
/// are dropped oldest-first to fit `max_len`; the most recent turn survives
/// intact whenever it fits at all, otherwise only its trailing tokens are
/// kept.
pub fn encode_dialogue(
    turns: &[Vec<String>],
    response: Option<&[String]>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<usize>> {
    if turns.is_empty() {
        return Err(Error::invalid("dialogue needs at least one turn".to_string()));
    }
    let tail: usize = match response {
        Some(r) => r.len() + 1,
        None => 0,
    };
    let budget = max_len.saturating_sub(1 + tail);
    let turn_cost = |t: &Vec<String>| t.len() + 1; // tokens plus [SEP]
    let mut start = 0usize;
    let mut used: usize = turns.iter().map(turn_cost).sum();
    while start + 1 < turns.len() && used > budget {
        used -= turn_cost(&turns[start]);
        start += 1;
    }
    let mut ids = vec![CLS];
    for (i, turn) in turns[start..].iter().enumerate() {
        if start + i == turns.len() - 1 && used > budget {
            // a lone oversized turn keeps its most recent tokens
            let keep = budget.saturating_sub(1);
            let from = turn.len().saturating_sub(keep);
            ids.extend(vocab.ids(&turn[from..]));
        } else {
            ids.extend(vocab.ids(turn));
        }
        ids.push(SEP);
    }
    if let Some(r) = response {
        ids.extend(vocab.ids(r));
        ids.push(SEP);
    }
    if ids.len() > max_len {
        return Err(Error::invalid(format!(
            "encoded dialogue length {} exceeds max_len {max_len}",
            ids.len()
        )));
    }
    Ok(ids)
}

fn retrieval_pair_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    model_cfg: &crate::model::ModelConfig,
    ids: &[usize],
    label: usize,
) -> Result<Var> {
    let h = encode(tape, binding, model_cfg, ids, &no_pads(ids.len()), &mut None)?;
    let cls = tape.slice_rows(h, 0, 1)?;
    let logits = apply_head(tape, &binding.retrieval, cls)?;
    tape.cross_entropy_logits(logits, &[label])
}

/// Fine-tunes the retrieval head with binary cross-entropy: each step pairs
/// the gold response (label 1) with one sampled negative (label 0).
pub fn finetune_retrieval(
    model: &mut TransformerModel,
    dialogues: &[DialogueRecord],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>> {
    for (i, d) in dialogues.iter().enumerate() {
        if d.negatives.is_empty() {
            return Err(Error::invalid(format!("dialogue {i}: no negatives")));
        }
    }
    let model_cfg = model.config.clone();
    let max_len = model_cfg.max_len;
    let dialogues = dialogues.to_vec();
    finetune_loop(model, dialogues.len(), cfg, &|_| true, |tape, binding, i, rng| {
        let d = &dialogues[i];
        let pos = encode_dialogue(&d.turns, Some(&d.response), vocab, max_len)?;
        let neg_idx = rng.gen_range(0..d.negatives.len());
        let neg = encode_dialogue(&d.turns, Some(&d.negatives[neg_idx]), vocab, max_len)?;
        let l_pos = retrieval_pair_loss(tape, binding, &model_cfg, &pos, 1)?;
        let l_neg = retrieval_pair_loss(tape, binding, &model_cfg, &neg, 0)?;
        let sum = tape.add(l_pos, l_neg)?;
        Ok(tape.scale(sum, 0.5))
    })
}

/// Match probability for a (context, response) pair, in [0, 1].
pub fn retrieval_score(
    model: &TransformerModel,
    turns: &[Vec<String>],
    response: &[String],
    vocab: &Vocab,
) -> Result<f64> {
    let ids = encode_dialogue(turns, Some(response), vocab, model.config.max_len)?;
    let h = model.encode_states(&ids, &no_pads(ids.len()))?;
    let d = model.config.d_model;
    let cls = &h.data()[..d];
    let head = &model.params.retrieval;
    let mut logits = [head.b.data()[0], head.b.data()[1]];
    for (j, &s) in cls.iter().enumerate() {
        logits[0] += s * head.w.data()[j * 2];
        logits[1] += s * head.w.data()[j * 2 + 1];
    }
    let lp = log_softmax(&logits);
    Ok(lp[1].exp())
}

/// Candidate indices sorted by score descending; ties keep candidate order.
pub fn rank_candidates(
    model: &TransformerModel,
    turns: &[Vec<String>],
    candidates: &[Vec<String>],
    vocab: &Vocab,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to rank".to_string()));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        scored.push((i, retrieval_score(model, turns, c, vocab)?));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Converts a dialogue to a (source, target) pair for generative
/// fine-tuning: the source is the turns joined by literal `[SEP]` tokens
/// (oldest turns dropped to fit the context), the target is the response.
pub fn dialogue_to_pair(record: &DialogueRecord, max_len: usize) -> Result<SumPair> {
    if record.turns.is_empty() {
        return Err(Error::invalid("dialogue needs at least one turn".to_string()));
    }
    if record.response.is_empty() {
        return Err(Error::invalid("dialogue has an empty response".to_string()));
    }
    let budget = max_len.saturating_sub(1);
    let turn_cost = |t: &Vec<String>| t.len() + 1;
    let mut start = 0usize;
    let mut used: usize = record.turns.iter().map(turn_cost).sum();
    while start + 1 < record.turns.len() && used > budget {
        used -= turn_cost(&record.turns[start]);
        start += 1;
    }
    let mut source = Vec::new();
    for turn in &record.turns[start..] {
        source.extend(turn.iter().cloned());
        source.push("[SEP]".to_string());
    }
    if source.len() > budget {
        let from = source.len() - budget;
        source = source[from..].to_vec();
    }
    Ok(SumPair { id: None, source, target: record.response.clone() })
}

/// Generates a response to a multi-turn context with beam search.
pub fn generate_response(
    model: &TransformerModel,
    turns: &[Vec<String>],
    vocab: &Vocab,
    cfg: &BeamConfig,
) -> Result<Vec<String>> {
    let source = encode_dialogue(turns, None, vocab, model.config.max_len)?;
    let ids = beam_search(model, &source, cfg)?;
    Ok(ids_to_output(&ids, vocab, cfg.eos))
}
