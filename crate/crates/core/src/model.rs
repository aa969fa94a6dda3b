//! Encoder-decoder transformer with task heads.
//!
//! Post-norm blocks (residual add then layer norm), GELU feed-forward,
//! learned absolute position embeddings, and an output projection tied to
//! the token embedding. Task heads (aspect-boundary, category, retrieval,
//! and an optional tagging head attached at fine-tune time) read encoder
//! states.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub n_categories: usize,
}

/// Classes of the aspect-boundary head (start-of-aspect vs not).
pub const N_BOUNDARY_LABELS: usize = 2;

impl ModelConfig {
    /// Reduced configuration used for CPU-scale runs: 2+2 layers, d=64,
    /// 4 heads, 128-token context.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_len: 128,
            dropout_p: 0.0,
            n_categories: 40,
        }
    }

    /// Full-size configuration: 6+6 layers, d=768, 12 heads, 512-token
    /// context.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 768,
            n_heads: 12,
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_ff: 3072,
            max_len: 512,
            dropout_p: 0.1,
            n_categories: 40,
        }
    }

    /// Very small configuration for fast tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_len: 32,
            dropout_p: 0.0,
            n_categories: 8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.d_ff == 0
            || self.n_categories == 0
        {
            return Err(Error::invalid("model config: all sizes must be positive".to_string()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("model config: max_len must be at least 2".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!(
                "model config: dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

// ── parameter tree ──────────────────────────────────────────────────
//
// The tree is generic over the leaf type so the same structure holds owned
// tensors (the model) and tape handles (a binding).

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<T> {
    pub attn: AttentionParams<T>,
    pub ln1: Norm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub ln2: Norm<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer<T> {
    pub self_attn: AttentionParams<T>,
    pub ln1: Norm<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln2: Norm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub ln3: Norm<T>,
}

#[derive(Debug, Clone)]
pub struct Params<T> {
    pub tok_embed: T,
    pub pos_embed: T,
    pub enc: Vec<EncoderLayer<T>>,
    pub dec: Vec<DecoderLayer<T>>,
    pub boundary: Linear<T>,
    pub category: Linear<T>,
    pub retrieval: Linear<T>,
    pub tagging: Option<Linear<T>>,
}

/// Tape handles for every parameter, in the model's traversal order.
pub type ModelBinding = Params<Var>;

impl<T> Params<T> {
    /// Visits every parameter with its manifest name, in a fixed traversal
    /// order.
    pub fn for_each(&self, mut f: impl FnMut(String, &T)) {
        self.walk(&mut |name, t| f(name, t));
    }

    fn walk(&self, f: &mut impl FnMut(String, &T)) {
        f("tok_embed.weight".to_string(), &self.tok_embed);
        f("pos_embed.weight".to_string(), &self.pos_embed);
        for (i, layer) in self.enc.iter().enumerate() {
            walk_attn(f, &format!("enc.{i}.attn"), &layer.attn);
            walk_norm(f, &format!("enc.{i}.ln1"), &layer.ln1);
            walk_linear(f, &format!("enc.{i}.ff1"), &layer.ff1);
            walk_linear(f, &format!("enc.{i}.ff2"), &layer.ff2);
            walk_norm(f, &format!("enc.{i}.ln2"), &layer.ln2);
        }
        for (i, layer) in self.dec.iter().enumerate() {
            walk_attn(f, &format!("dec.{i}.self_attn"), &layer.self_attn);
            walk_norm(f, &format!("dec.{i}.ln1"), &layer.ln1);
            walk_attn(f, &format!("dec.{i}.cross_attn"), &layer.cross_attn);
            walk_norm(f, &format!("dec.{i}.ln2"), &layer.ln2);
            walk_linear(f, &format!("dec.{i}.ff1"), &layer.ff1);
            walk_linear(f, &format!("dec.{i}.ff2"), &layer.ff2);
            walk_norm(f, &format!("dec.{i}.ln3"), &layer.ln3);
        }
        walk_linear(f, "head.boundary", &self.boundary);
        walk_linear(f, "head.category", &self.category);
        walk_linear(f, "head.retrieval", &self.retrieval);
        if let Some(tagging) = &self.tagging {
            walk_linear(f, "head.tagging", tagging);
        }
    }

    /// Maps the tree onto a new leaf type, preserving traversal order.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Params<U> {
        fn map_linear<T, U>(f: &mut impl FnMut(&T) -> U, l: &Linear<T>) -> Linear<U> {
            Linear { w: f(&l.w), b: f(&l.b) }
        }
        fn map_norm<T, U>(f: &mut impl FnMut(&T) -> U, n: &Norm<T>) -> Norm<U> {
            Norm { gain: f(&n.gain), bias: f(&n.bias) }
        }
        fn map_attn<T, U>(f: &mut impl FnMut(&T) -> U, a: &AttentionParams<T>) -> AttentionParams<U> {
            AttentionParams {
                q: map_linear(f, &a.q),
                k: map_linear(f, &a.k),
                v: map_linear(f, &a.v),
                o: map_linear(f, &a.o),
            }
        }
        Params {
            tok_embed: f(&self.tok_embed),
            pos_embed: f(&self.pos_embed),
            enc: self
                .enc
                .iter()
                .map(|l| EncoderLayer {
                    attn: map_attn(f, &l.attn),
                    ln1: map_norm(f, &l.ln1),
                    ff1: map_linear(f, &l.ff1),
                    ff2: map_linear(f, &l.ff2),
                    ln2: map_norm(f, &l.ln2),
                })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|l| DecoderLayer {
                    self_attn: map_attn(f, &l.self_attn),
                    ln1: map_norm(f, &l.ln1),
                    cross_attn: map_attn(f, &l.cross_attn),
                    ln2: map_norm(f, &l.ln2),
                    ff1: map_linear(f, &l.ff1),
                    ff2: map_linear(f, &l.ff2),
                    ln3: map_norm(f, &l.ln3),
                })
                .collect(),
            boundary: map_linear(f, &self.boundary),
            category: map_linear(f, &self.category),
            retrieval: map_linear(f, &self.retrieval),
            tagging: self.tagging.as_ref().map(|t| map_linear(f, t)),
        }
    }
}

fn walk_linear<T>(f: &mut impl FnMut(String, &T), prefix: &str, l: &Linear<T>) {
    f(format!("{prefix}.weight"), &l.w);
    f(format!("{prefix}.bias"), &l.b);
}

fn walk_norm<T>(f: &mut impl FnMut(String, &T), prefix: &str, n: &Norm<T>) {
    f(format!("{prefix}.gain"), &n.gain);
    f(format!("{prefix}.bias"), &n.bias);
}

fn walk_attn<T>(f: &mut impl FnMut(String, &T), prefix: &str, a: &AttentionParams<T>) {
    walk_linear(f, &format!("{prefix}.q"), &a.q);
    walk_linear(f, &format!("{prefix}.k"), &a.k);
    walk_linear(f, &format!("{prefix}.v"), &a.v);
    walk_linear(f, &format!("{prefix}.o"), &a.o);
}

/// Parameters excluded from weight decay: biases and layer-norm gains.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

// ── the model ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub precision: Precision,
    pub params: Params<Tensor>,
}

enum Init {
    Zeroed,
    Seeded(u64),
}

impl TransformerModel {
    /// All parameters zero (layer-norm gains included). Produces exactly
    /// uniform logits everywhere; useful for loss calibration, useless for
    /// training.
    pub fn zeroed(config: ModelConfig, precision: Precision) -> Result<Self> {
        Self::build(config, precision, Init::Zeroed)
    }

    /// Normal(0, 0.02²) weights, zero biases, unit layer-norm gains.
    pub fn seeded(config: ModelConfig, precision: Precision, seed: u64) -> Result<Self> {
        Self::build(config, precision, Init::Seeded(seed))
    }

    fn build(config: ModelConfig, precision: Precision, init: Init) -> Result<Self> {
        config.validate()?;
        let zero_gains = matches!(init, Init::Zeroed);
        let mut rng = match init {
            Init::Zeroed => None,
            Init::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let d = config.d_model;
        let mut weight = |rows: usize, cols: usize| -> Tensor {
            let n = rows * cols;
            let data = match &mut rng {
                None => vec![0.0; n],
                Some(rng) => (0..n).map(|_| normal(rng) * 0.02).collect(),
            };
            let mut t = Tensor::new(vec![rows, cols], data).unwrap();
            if precision == Precision::F32 {
                t.round_to_f32();
            }
            t
        };
        let linear = |weight: &mut dyn FnMut(usize, usize) -> Tensor, inp: usize, out: usize| {
            Linear { w: weight(inp, out), b: Tensor::zeros(vec![out]) }
        };
        let norm = |n: usize| Norm {
            gain: if zero_gains {
                Tensor::zeros(vec![n])
            } else {
                Tensor::new(vec![n], vec![1.0; n]).unwrap()
            },
            bias: Tensor::zeros(vec![n]),
        };
        let attn = |weight: &mut dyn FnMut(usize, usize) -> Tensor| AttentionParams {
            q: linear(weight, d, d),
            k: linear(weight, d, d),
            v: linear(weight, d, d),
            o: linear(weight, d, d),
        };
        let params = Params {
            tok_embed: weight(config.vocab_size, d),
            pos_embed: weight(config.max_len, d),
            enc: (0..config.n_enc_layers)
                .map(|_| EncoderLayer {
                    attn: attn(&mut weight),
                    ln1: norm(d),
                    ff1: linear(&mut weight, d, config.d_ff),
                    ff2: linear(&mut weight, config.d_ff, d),
                    ln2: norm(d),
                })
                .collect(),
            dec: (0..config.n_dec_layers)
                .map(|_| DecoderLayer {
                    self_attn: attn(&mut weight),
                    ln1: norm(d),
                    cross_attn: attn(&mut weight),
                    ln2: norm(d),
                    ff1: linear(&mut weight, d, config.d_ff),
                    ff2: linear(&mut weight, config.d_ff, d),
                    ln3: norm(d),
                })
                .collect(),
            boundary: linear(&mut weight, d, N_BOUNDARY_LABELS),
            category: linear(&mut weight, d, config.n_categories),
            retrieval: linear(&mut weight, d, 2),
            tagging: None,
        };
        Ok(TransformerModel { config, precision, params })
    }

    /// Attaches (or replaces) the tagging head with `n_labels` outputs.
    pub fn attach_tagging_head(&mut self, n_labels: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.d_model * n_labels;
        let mut w = Tensor::new(
            vec![self.config.d_model, n_labels],
            (0..n).map(|_| normal(&mut rng) * 0.02).collect(),
        )
        .unwrap();
        if self.precision == Precision::F32 {
            w.round_to_f32();
        }
        self.params.tagging = Some(Linear { w, b: Tensor::zeros(vec![n_labels]) });
    }

    pub fn n_tagging_labels(&self) -> Option<usize> {
        self.params.tagging.as_ref().map(|t| t.w.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.params.for_each(|_, t| n += t.numel());
        n
    }

    /// Named parameters in traversal order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.params.for_each(|name, t| out.push((name, t.clone())));
        out
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        self.params.map(&mut |t| tape.leaf(t.clone()))
    }

    /// Rebuilds a binding from leaves created in traversal order (the order
    /// of [`TransformerModel::named_params`]).
    pub fn binding_from_slice(&self, vars: &[Var]) -> ModelBinding {
        let mut i = 0;
        self.params.map(&mut |_| {
            let v = vars[i];
            i += 1;
            v
        })
    }

    /// Adds the tape gradients of `binding` onto the model's own gradient
    /// buffers.
    pub fn absorb_grads(&mut self, tape: &Tape, binding: &ModelBinding) {
        let mut vars = Vec::new();
        binding.for_each(|_, &v| vars.push(v));
        let mut i = 0;
        self.params = self.params.map(&mut |t: &Tensor| {
            let mut t = t.clone();
            if let Some(g) = tape.grad(vars[i]) {
                t.accumulate_grad(g);
            }
            i += 1;
            t
        });
    }

    pub fn zero_grads(&mut self) {
        self.params = self.params.map(&mut |t: &Tensor| {
            let mut t = t.clone();
            t.zero_grad();
            t
        });
    }

    /// Encoder forward outside any training tape; returns detached states.
    pub fn encode_states(&self, tokens: &[usize], pad_mask: &[bool]) -> Result<Tensor> {
        let mut tape = Tape::new(self.precision);
        let binding = self.bind(&mut tape);
        let h = encode(&mut tape, &binding, &self.config, tokens, pad_mask, &mut None)?;
        Tensor::new(tape.shape_of(h).to_vec(), tape.value(h).to_vec())
    }

    /// Decoder forward over detached encoder states; returns `[T×V]` logits.
    pub fn decode_logits(
        &self,
        enc_states: &Tensor,
        enc_pad: &[bool],
        dec_tokens: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::new(self.precision);
        let binding = self.bind(&mut tape);
        let enc = tape.constant(enc_states.clone());
        let logits =
            decode(&mut tape, &binding, &self.config, enc, enc_pad, dec_tokens, &mut None)?;
        Tensor::new(tape.shape_of(logits).to_vec(), tape.value(logits).to_vec())
    }
}

/// State of the `[CLS]` position: row 0 of the encoder output.
pub fn cls_state(enc_output: &Tensor) -> Result<Tensor> {
    let (_, d) = enc_output.dims2()?;
    Tensor::new(vec![d], enc_output.data()[..d].to_vec())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub type DropRng<'a> = Option<&'a mut ChaCha8Rng>;

fn maybe_dropout(tape: &mut Tape, v: Var, p: f64, rng: &mut DropRng) -> Var {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(v, p, *r),
        _ => v,
    }
}

/// Additive attention mask: 0 where attending is allowed, −∞ where not.
/// Rows are query positions, columns key positions.
fn attention_mask(q_len: usize, k_len: usize, key_pad: &[bool], causal: bool) -> Result<Tensor> {
    let mut data = vec![0.0; q_len * k_len];
    for qi in 0..q_len {
        let mut open = 0usize;
        for ki in 0..k_len {
            let blocked = key_pad[ki] || (causal && ki > qi);
            if blocked {
                data[qi * k_len + ki] = f64::NEG_INFINITY;
            } else {
                open += 1;
            }
        }
        if open == 0 {
            return Err(Error::invalid(format!(
                "attention: every key position is masked for query {qi}"
            )));
        }
    }
    Tensor::new(vec![q_len, k_len], data)
}

/// Multi-head scaled dot-product attention.
pub fn attention(
    tape: &mut Tape,
    params: &AttentionParams<Var>,
    cfg: &ModelConfig,
    queries: Var,
    keys_values: Var,
    mask: &Tensor,
    rng: &mut DropRng,
) -> Result<Var> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(queries, params.q.w)?;
    let q = tape.add_bias(q, params.q.b)?;
    let k = tape.matmul(keys_values, params.k.w)?;
    let k = tape.add_bias(k, params.k.b)?;
    let v = tape.matmul(keys_values, params.v.w)?;
    let v = tape.add_bias(v, params.v.b)?;
    let mask_var = tape.constant(mask.clone());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask_var)?;
        let probs = tape.softmax(scores, 1)?;
        let probs = maybe_dropout(tape, probs, cfg.dropout_p, rng);
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, params.o.w)?;
    tape.add_bias(out, params.o.b)
}

fn embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    tok_embed: Var,
    pos_embed: Var,
    tokens: &[usize],
    rng: &mut DropRng,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence".to_string()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocab size {}",
            cfg.vocab_size
        )));
    }
    let emb = tape.gather_rows(tok_embed, tokens)?;
    let emb = tape.scale(emb, (cfg.d_model as f64).sqrt());
    let pos = tape.slice_rows(pos_embed, 0, tokens.len())?;
    let x = tape.add(emb, pos)?;
    Ok(maybe_dropout(tape, x, cfg.dropout_p, rng))
}

fn feed_forward(tape: &mut Tape, ff1: &Linear<Var>, ff2: &Linear<Var>, x: Var) -> Result<Var> {
    let h = tape.matmul(x, ff1.w)?;
    let h = tape.add_bias(h, ff1.b)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, ff2.w)?;
    tape.add_bias(h, ff2.b)
}

pub const LN_EPS: f64 = 1e-5;

/// Encoder forward: one state per input position. Pad positions receive no
/// attention from non-pad positions.
pub fn encode(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    tokens: &[usize],
    pad_mask: &[bool],
    rng: &mut DropRng,
) -> Result<Var> {
    if pad_mask.len() != tokens.len() {
        return Err(Error::invalid(format!(
            "pad mask length {} does not match {} tokens",
            pad_mask.len(),
            tokens.len()
        )));
    }
    let mut x = embed(tape, cfg, binding.tok_embed, binding.pos_embed, tokens, rng)?;
    let mask = attention_mask(tokens.len(), tokens.len(), pad_mask, false)?;
    for layer in &binding.enc {
        let attn_out = attention(tape, &layer.attn, cfg, x, x, &mask, rng)?;
        let attn_out = maybe_dropout(tape, attn_out, cfg.dropout_p, rng);
        let res = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm(res, layer.ln1.gain, layer.ln1.bias, LN_EPS)?;
        let ff = feed_forward(tape, &layer.ff1, &layer.ff2, x1)?;
        let ff = maybe_dropout(tape, ff, cfg.dropout_p, rng);
        let res = tape.add(x1, ff)?;
        x = tape.layer_norm(res, layer.ln2.gain, layer.ln2.bias, LN_EPS)?;
    }
    Ok(x)
}

/// Decoder forward with causal self-attention and cross-attention over
/// encoder states; returns `[T×V]` logits through the tied projection.
pub fn decode(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    enc_states: Var,
    enc_pad: &[bool],
    dec_tokens: &[usize],
    rng: &mut DropRng,
) -> Result<Var> {
    let h = decode_states(tape, binding, cfg, enc_states, enc_pad, dec_tokens, rng)?;
    tape.matmul_nt(h, binding.tok_embed)
}

/// Decoder forward stopping before the vocabulary projection.
pub fn decode_states(
    tape: &mut Tape,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    enc_states: Var,
    enc_pad: &[bool],
    dec_tokens: &[usize],
    rng: &mut DropRng,
) -> Result<Var> {
    let enc_len = tape.shape_of(enc_states)[0];
    if enc_pad.len() != enc_len {
        return Err(Error::invalid(format!(
            "encoder pad mask length {} does not match {} encoder states",
            enc_pad.len(),
            enc_len
        )));
    }
    let t_len = dec_tokens.len();
    let mut x = embed(tape, cfg, binding.tok_embed, binding.pos_embed, dec_tokens, rng)?;
    let self_mask = attention_mask(t_len, t_len, &vec![false; t_len], true)?;
    let cross_mask = attention_mask(t_len, enc_len, enc_pad, false)?;
    for layer in &binding.dec {
        let attn_out = attention(tape, &layer.self_attn, cfg, x, x, &self_mask, rng)?;
        let attn_out = maybe_dropout(tape, attn_out, cfg.dropout_p, rng);
        let res = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm(res, layer.ln1.gain, layer.ln1.bias, LN_EPS)?;

        let cross_out = attention(tape, &layer.cross_attn, cfg, x1, enc_states, &cross_mask, rng)?;
        let cross_out = maybe_dropout(tape, cross_out, cfg.dropout_p, rng);
        let res = tape.add(x1, cross_out)?;
        let x2 = tape.layer_norm(res, layer.ln2.gain, layer.ln2.bias, LN_EPS)?;

        let ff = feed_forward(tape, &layer.ff1, &layer.ff2, x2)?;
        let ff = maybe_dropout(tape, ff, cfg.dropout_p, rng);
        let res = tape.add(x2, ff)?;
        x = tape.layer_norm(res, layer.ln3.gain, layer.ln3.bias, LN_EPS)?;
    }
    Ok(x)
}

/// Applies a head to (a slice of) encoder or decoder states.
pub fn apply_head(tape: &mut Tape, head: &Linear<Var>, states: Var) -> Result<Var> {
    let logits = tape.matmul(states, head.w)?;
    tape.add_bias(logits, head.b)
}

/// All-false pad mask of the given length.
pub fn no_pads(len: usize) -> Vec<bool> {
    vec![false; len]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};

    fn seeded_tiny() -> TransformerModel {
        TransformerModel::seeded(ModelConfig::tiny(20), Precision::F64, 7).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(100);
        cfg.validate().unwrap();
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(100);
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(100);
        cfg.max_len = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig::desk(200);
        let model = TransformerModel::seeded(cfg.clone(), Precision::F32, 1).unwrap();
        let d = cfg.d_model;
        let attn = 4 * (d * d + d);
        let ln = 2 * d;
        let ff = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
        let enc_layer = attn + ln + ff + ln;
        let dec_layer = attn + ln + attn + ln + ff + ln;
        let heads = (d * 2 + 2) + (d * cfg.n_categories + cfg.n_categories) + (d * 2 + 2);
        let expected = cfg.vocab_size * d
            + cfg.max_len * d
            + cfg.n_enc_layers * enc_layer
            + cfg.n_dec_layers * dec_layer
            + heads;
        assert_eq!(model.param_count(), expected);
        // pure function of config
        let again = TransformerModel::seeded(cfg, Precision::F32, 99).unwrap();
        assert_eq!(model.param_count(), again.param_count());
    }

    #[test]
    fn manifest_names_unique() {
        let model = seeded_tiny();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let model = seeded_tiny();
        let tokens = [2usize, 8, 9, 10, 11];
        let h1 = model.encode_states(&tokens, &no_pads(5)).unwrap();
        assert_eq!(h1.shape(), &[5, model.config.d_model]);
        let h2 = model.encode_states(&tokens, &no_pads(5)).unwrap();
        assert_eq!(h1.data(), h2.data());
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let model = seeded_tiny();
        let long: Vec<usize> = vec![3; model.config.max_len + 1];
        assert!(model.encode_states(&long, &no_pads(long.len())).is_err());
        assert!(model.encode_states(&[2, 25], &no_pads(2)).is_err());
    }

    #[test]
    fn pad_positions_do_not_disturb_content_states() {
        let model = seeded_tiny();
        let tokens = [2usize, 8, 9, 10];
        let h = model.encode_states(&tokens, &no_pads(4)).unwrap();

        let mut padded = tokens.to_vec();
        padded.extend([crate::corpus::PAD; 3]);
        let mut pad_mask = no_pads(4);
        pad_mask.extend([true; 3]);
        let hp = model.encode_states(&padded, &pad_mask).unwrap();

        let d = model.config.d_model;
        for i in 0..4 * d {
            assert!(
                (h.data()[i] - hp.data()[i]).abs() < 1e-12,
                "state {i} differs: {} vs {}",
                h.data()[i],
                hp.data()[i]
            );
        }
    }

    #[test]
    fn decoder_prefix_invariance() {
        let model = seeded_tiny();
        let src = [2usize, 8, 9, 10, 11];
        let enc = model.encode_states(&src, &no_pads(5)).unwrap();
        let full = model.decode_logits(&enc, &no_pads(5), &[5, 12, 13, 14]).unwrap();
        let prefix = model.decode_logits(&enc, &no_pads(5), &[5, 12]).unwrap();
        assert_eq!(full.shape(), &[4, 20]);
        let v = model.config.vocab_size;
        for i in 0..2 * v {
            assert!(
                (full.data()[i] - prefix.data()[i]).abs() < 1e-12,
                "prefix logits differ at {i}"
            );
        }
    }

    #[test]
    fn causal_mask_blocks_future_exactly() {
        let mask = attention_mask(3, 3, &[false; 3], true).unwrap();
        assert_eq!(mask.data()[1], f64::NEG_INFINITY);
        assert_eq!(mask.data()[2], f64::NEG_INFINITY);
        assert_eq!(mask.data()[5], f64::NEG_INFINITY);
        assert_eq!(mask.data()[0], 0.0);

        // reproduce one decoder head's attention weights: everything above
        // the diagonal must be exactly zero, and the first row degenerates
        // to weight 1 on itself
        let model = seeded_tiny();
        let cfg = &model.config;
        let mut tape = Tape::new(Precision::F64);
        let binding = model.bind(&mut tape);
        let x = embed(&mut tape, cfg, binding.tok_embed, binding.pos_embed, &[5, 9, 10], &mut None)
            .unwrap();
        let q = tape.matmul(x, binding.dec[0].self_attn.q.w).unwrap();
        let q = tape.add_bias(q, binding.dec[0].self_attn.q.b).unwrap();
        let k = tape.matmul(x, binding.dec[0].self_attn.k.w).unwrap();
        let k = tape.add_bias(k, binding.dec[0].self_attn.k.b).unwrap();
        let dh = cfg.head_dim();
        let qh = tape.slice_cols(q, 0, dh).unwrap();
        let kh = tape.slice_cols(k, 0, dh).unwrap();
        let scores = tape.matmul_nt(qh, kh).unwrap();
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let mask = attention_mask(3, 3, &[false; 3], true).unwrap();
        let mask_var = tape.constant(mask);
        let scores = tape.add(scores, mask_var).unwrap();
        let probs = tape.softmax(scores, 1).unwrap();
        let p = tape.value(probs);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[5], 0.0);
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn attention_uniform_weights_for_identical_keys() {
        let model = seeded_tiny();
        let cfg = model.config.clone();
        let mut tape = Tape::new(Precision::F64);
        let binding = model.bind(&mut tape);
        // identical rows → identical keys → uniform attention
        let row: Vec<f64> = (0..cfg.d_model).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let x = tape.leaf(Tensor::new(vec![4, cfg.d_model], data).unwrap());
        let q = tape.matmul(x, binding.enc[0].attn.q.w).unwrap();
        let q = tape.add_bias(q, binding.enc[0].attn.q.b).unwrap();
        let k = tape.matmul(x, binding.enc[0].attn.k.w).unwrap();
        let k = tape.add_bias(k, binding.enc[0].attn.k.b).unwrap();
        let dh = cfg.head_dim();
        let qh = tape.slice_cols(q, 0, dh).unwrap();
        let kh = tape.slice_cols(k, 0, dh).unwrap();
        let scores = tape.matmul_nt(qh, kh).unwrap();
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let mv = tape.constant(attention_mask(4, 4, &[false; 4], false).unwrap());
        let scores = tape.add(scores, mv).unwrap();
        let probs = tape.softmax(scores, 1).unwrap();
        for &p in tape.value(probs) {
            assert!((p - 0.25).abs() < 1e-9, "{p}");
        }
        for r in 0..4 {
            let sum: f64 = tape.value(probs)[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn all_masked_row_is_rejected() {
        assert!(attention_mask(2, 2, &[true, true], false).is_err());
    }

    #[test]
    fn cls_state_is_row_zero() {
        let model = seeded_tiny();
        let h = model.encode_states(&[2, 8, 9], &no_pads(3)).unwrap();
        let cls = cls_state(&h).unwrap();
        assert_eq!(cls.shape(), &[model.config.d_model]);
        assert_eq!(cls.data(), &h.data()[..model.config.d_model]);
        // perturbing a non-CLS token changes the CLS state
        let h2 = model.encode_states(&[2, 8, 12], &no_pads(3)).unwrap();
        let cls2 = cls_state(&h2).unwrap();
        assert_ne!(cls.data(), cls2.data());
    }

    #[test]
    fn weight_tying_projection_follows_embedding() {
        let mut model = seeded_tiny();
        let src = [2usize, 8, 9];
        let enc = model.encode_states(&src, &no_pads(3)).unwrap();
        let before = model.decode_logits(&enc, &no_pads(3), &[5, 12]).unwrap();
        // bump embedding row 17 (absent from both sequences); its logit
        // column must move because the projection is the same matrix
        let d = model.config.d_model;
        model.params.tok_embed.data_mut()[17 * d] += 1.0;
        let enc2 = model.encode_states(&src, &no_pads(3)).unwrap();
        let after = model.decode_logits(&enc2, &no_pads(3), &[5, 12]).unwrap();
        assert_ne!(before.data()[17], after.data()[17]);
    }

    #[test]
    fn dropout_zero_means_train_eval_agree() {
        let model = seeded_tiny();
        let tokens = [2usize, 8, 9, 10];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new(Precision::F64);
        let binding = model.bind(&mut tape);
        let h_train =
            encode(&mut tape, &binding, &model.config, &tokens, &no_pads(4), &mut Some(&mut rng))
                .unwrap();
        let h_eval = model.encode_states(&tokens, &no_pads(4)).unwrap();
        assert_eq!(tape.value(h_train), h_eval.data());
    }

    #[test]
    fn full_model_joint_graph_passes_grad_check() {
        // encoder + decoder + two heads on a tiny config
        let model = seeded_tiny();
        let cfg = model.config.clone();
        let mut params = model.named_params();
        let src = vec![2usize, 8, 9, 10, 11, 12];
        let dec = vec![5usize, 13, 14];
        let dec_targets = vec![13usize, 14, 6];
        let f = |tape: &mut Tape, vars: &[Var]| {
            let b = model.binding_from_slice(vars);
            let enc = encode(tape, &b, &cfg, &src, &no_pads(src.len()), &mut None)?;
            let logits = decode(tape, &b, &cfg, enc, &no_pads(src.len()), &dec, &mut None)?;
            let l_dec = tape.cross_entropy_logits(logits, &dec_targets)?;
            let content = tape.slice_rows(enc, 1, src.len())?;
            let blogits = apply_head(tape, &b.boundary, content)?;
            let l_b = tape.cross_entropy_logits(blogits, &[1, 0, 0, 1, 0])?;
            let cls = tape.slice_rows(enc, 0, 1)?;
            let clogits = apply_head(tape, &b.category, cls)?;
            let l_c = tape.cross_entropy_logits(clogits, &[3])?;
            let s = tape.add(l_dec, l_b)?;
            tape.add(s, l_c)
        };
        let gc = GradCheckConfig { max_coords_per_tensor: 24, ..Default::default() };
        let report = grad_check(&mut params, f, &gc).unwrap();
        assert!(report.pass(), "{report}");
    }
}
