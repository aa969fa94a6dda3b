//! Optimizer, learning-rate schedule, pre-training loop, and checkpoint
//! persistence.
//!
//! Training is one optimizer update per step over a seeded shuffled document
//! stream, with optional gradient accumulation across micro-batches. The
//! checkpoint format is a fixed little-endian binary layout that round-trips
//! byte-exactly.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProductDocument, Vocab};
use crate::error::{Error, Result};
use crate::model::{decays, ModelConfig, TransformerModel};
use crate::objectives::{joint_loss, LossBreakdown, Objective, ObjectiveSet};
use crate::tensor::{Precision, Tape};

// ── optimizer ───────────────────────────────────────────────────────

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01, peak_lr: 5e-4 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState { config, t: 0, moments: BTreeMap::new() }
    }

    /// One bias-corrected Adam update over every parameter whose name passes
    /// `trainable`. Weight decay is decoupled (applied to the parameter
    /// directly, never through the moments) and skips biases and layer-norm
    /// gains. Parameters without a gradient buffer see a zero gradient.
    pub fn step(
        &mut self,
        model: &mut TransformerModel,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let cfg = self.config.clone();
        let quantize = model.precision == Precision::F32;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let moments = &mut self.moments;
        let mut failure: Option<Error> = None;
        let mut names: Vec<String> = Vec::new();
        model.params.for_each(|name, _| names.push(name));
        let mut idx = 0usize;
        model.params = model.params.map(&mut |p: &crate::tensor::Tensor| {
            let name = &names[idx];
            idx += 1;
            let mut p = p.clone();
            if failure.is_some() || !trainable(name) {
                return p;
            }
            let n = p.numel();
            let (m, v) = moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                failure = Some(Error::shape(format!(
                    "optimizer: moment length {} does not match parameter {name} ({n})",
                    m.len()
                )));
                return p;
            }
            let grad: Vec<f64> = p.grad.clone().unwrap_or_else(|| vec![0.0; n]);
            let decay = if decays(name) { cfg.weight_decay } else { 0.0 };
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let old = data[i];
                data[i] = old - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * decay * old;
            }
            if quantize {
                p.round_to_f32();
                for x in m.iter_mut().chain(v.iter_mut()) {
                    *x = *x as f32 as f64;
                }
            }
            p
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn moment_for(&self, name: &str) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.moments.get(name)
    }
}

// ── schedule ────────────────────────────────────────────────────────

/// Linear warmup to the peak learning rate, then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Schedule { warmup_steps, total_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::invalid(format!(
                "schedule: need 0 < warmup_steps < total_steps, got {} / {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`: `peak · min(step/warmup, (total−step)/(total−warmup))`.
pub fn lr_at(step: u64, schedule: &Schedule, peak_lr: f64) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond total_steps {}",
            schedule.total_steps
        )));
    }
    let warm = step as f64 / schedule.warmup_steps as f64;
    let decay = (schedule.total_steps - step) as f64
        / (schedule.total_steps - schedule.warmup_steps) as f64;
    Ok(peak_lr * warm.min(decay))
}

// ── pre-training loop ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub objectives: ObjectiveSet,
    pub seed: u64,
    #[serde(default = "default_accum")]
    pub accum_steps: usize,
}

fn default_accum() -> usize {
    1
}

/// One optimizer step of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// Documents dropped because they exceed the model context.
    pub skipped_docs: usize,
    pub final_rng: RngState,
    pub optimizer: OptimizerState,
}

/// Pre-trains `model` in place over the corpus and returns the loss trace.
/// Deterministic given the seed: document order, masking, and every update
/// depend only on (corpus, config, seed).
pub fn pretrain(
    model: &mut TransformerModel,
    corpus: &[ProductDocument],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus".to_string()));
    }
    if cfg.objectives.is_empty() {
        return Err(Error::invalid("no objectives enabled".to_string()));
    }
    if cfg.accum_steps == 0 {
        return Err(Error::invalid("accum_steps must be at least 1".to_string()));
    }
    cfg.schedule.validate()?;

    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].content_len() <= model.config.max_len - 1)
        .collect();
    let skipped_docs = corpus.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::invalid(format!(
            "all {} documents exceed max_len {}",
            corpus.len(),
            model.config.max_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.adam.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut trace = Vec::with_capacity(cfg.schedule.total_steps as usize);

    for step in 0..cfg.schedule.total_steps {
        let lr = lr_at(step + 1, &cfg.schedule, cfg.adam.peak_lr)?;
        let mut mean = LossBreakdown::default();
        for _ in 0..cfg.accum_steps {
            if cursor >= order.len() {
                order = usable.clone();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let doc = &corpus[order[cursor]];
            cursor += 1;
            let doc_seed: u64 = rng.gen();
            let mut doc_rng = ChaCha8Rng::seed_from_u64(doc_seed);

            let mut tape = Tape::new(model.precision);
            let binding = model.bind(&mut tape);
            let (breakdown, total) = joint_loss(
                &mut tape,
                &binding,
                &model.config,
                doc,
                vocab,
                &cfg.objectives,
                &mut doc_rng,
            )?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite { step: step as usize });
            }
            let scaled = tape.scale(total, 1.0 / cfg.accum_steps as f64);
            tape.backward(scaled)?;
            model.absorb_grads(&tape, &binding);
            accumulate_mean(&mut mean, &breakdown, cfg.accum_steps as f64);
        }
        opt.step(model, lr, &|_| true)?;
        model.zero_grads();
        trace.push(TraceRow { step, lr, loss: mean });
    }

    Ok(TrainReport { trace, skipped_docs, final_rng: RngState::capture(&rng), optimizer: opt })
}

fn accumulate_mean(mean: &mut LossBreakdown, sample: &LossBreakdown, denom: f64) {
    let add = |slot: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *slot = Some(slot.unwrap_or(0.0) + v / denom);
        }
    };
    add(&mut mean.kmlm, sample.kmlm);
    add(&mut mean.kms2s, sample.kms2s);
    add(&mut mean.peabd, sample.peabd);
    add(&mut mean.pecc, sample.pecc);
    add(&mut mean.peasg, sample.peasg);
    mean.total += sample.total / denom;
    // token-weighted aggregates stay as sums over the micro-batch
    mean.nll_sum += sample.nll_sum;
    mean.target_tokens += sample.target_tokens;
}

/// Writes the loss trace: `step,lr,kmlm,kms2s,peabd,pecc,peasg,total`,
/// with empty fields for disabled objectives.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,lr,kmlm,kms2s,peabd,pecc,peasg,total\n");
    for row in trace {
        let field = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.step,
            row.lr,
            field(row.loss.kmlm),
            field(row.loss.kms2s),
            field(row.loss.peabd),
            field(row.loss.pecc),
            field(row.loss.peasg),
            row.loss.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── rng state ───────────────────────────────────────────────────────

/// Serializable snapshot of a ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn fresh(seed: u64) -> Self {
        RngState::capture(&ChaCha8Rng::seed_from_u64(seed))
    }
}

// ── checkpoints ─────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"KPLG";
const VERSION: u32 = 1;

/// A persisted model: config, parameters, optional optimizer state, rng
/// position, and step counter. Parameter values are 32-bit floats.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub rng: RngState,
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f32_slice(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f32(x as f32);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("blob length mismatch reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid utf-8 in {what}")))
    }
    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(4 * n, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = ByteWriter { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(VERSION);
    let cfg = &ckpt.model.config;
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.n_enc_layers,
        cfg.n_dec_layers,
        cfg.d_ff,
        cfg.max_len,
        cfg.n_categories,
        crate::model::N_BOUNDARY_LABELS,
        ckpt.model.n_tagging_labels().unwrap_or(0),
    ] {
        w.u32(v as u32);
    }
    w.f32(cfg.dropout_p as f32);
    w.u64(ckpt.step);
    w.bytes(&ckpt.rng.seed);
    w.u128(ckpt.rng.word_pos);
    w.u64(ckpt.rng.stream);

    // manifest sorted by name, then blobs in manifest order
    let mut params = ckpt.model.named_params();
    params.sort_by(|a, b| a.0.cmp(&b.0));
    w.u32(params.len() as u32);
    for (name, t) in &params {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
    }
    for (_, t) in &params {
        w.f32_slice(t.data());
    }

    match &ckpt.optimizer {
        None => w.buf.push(0u8),
        Some(opt) => {
            w.buf.push(1u8);
            w.f64(opt.config.beta1);
            w.f64(opt.config.beta2);
            w.f64(opt.config.eps);
            w.f64(opt.config.weight_decay);
            w.f64(opt.config.peak_lr);
            w.u64(opt.t);
            for (name, t) in &params {
                match opt.moment_for(name) {
                    Some((m, v)) => {
                        w.f32_slice(m);
                        w.f32_slice(v);
                    }
                    None => {
                        w.f32_slice(&vec![0.0; t.numel()]);
                        w.f32_slice(&vec![0.0; t.numel()]);
                    }
                }
            }
        }
    }

    std::fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".to_string()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 10];
    for d in dims.iter_mut() {
        *d = r.u32("config")? as usize;
    }
    let dropout_p = r.f32("config")? as f64;
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_enc_layers: dims[3],
        n_dec_layers: dims[4],
        d_ff: dims[5],
        max_len: dims[6],
        n_categories: dims[7],
        dropout_p,
    };
    if dims[8] != crate::model::N_BOUNDARY_LABELS {
        return Err(Error::Checkpoint(format!("unexpected boundary label count {}", dims[8])));
    }
    let n_tagging = dims[9];
    let step = r.u64("step")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let word_pos = r.u128("rng position")?;
    let stream = r.u64("rng stream")?;
    let rng = RngState { seed, word_pos, stream };

    let n_params = r.u32("manifest")? as usize;
    let mut manifest = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str("manifest name")?;
        let ndim = r.u32("manifest dims")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("manifest dims")? as usize);
        }
        manifest.push((name, shape));
    }
    for w in manifest.windows(2) {
        if w[0].0 >= w[1].0 {
            return Err(Error::Checkpoint(format!(
                "manifest not sorted: {} before {}",
                w[0].0, w[1].0
            )));
        }
    }

    let mut blobs: BTreeMap<String, crate::tensor::Tensor> = BTreeMap::new();
    for (name, shape) in &manifest {
        let numel: usize = shape.iter().product();
        let data = r.f32_vec(numel, name)?;
        blobs.insert(
            name.clone(),
            crate::tensor::Tensor::new(shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?,
        );
    }

    let mut model = TransformerModel::zeroed(config, Precision::F32)?;
    if n_tagging > 0 {
        model.attach_tagging_head(n_tagging, 0);
    }
    // fill by name, verifying the manifest matches the architecture
    let mut missing: Option<String> = None;
    let mut names = Vec::new();
    model.params.for_each(|name, _| names.push(name));
    let mut idx = 0usize;
    model.params = model.params.map(&mut |t: &crate::tensor::Tensor| {
        let name = &names[idx];
        idx += 1;
        match blobs.remove(name) {
            Some(loaded) => {
                if loaded.shape() != t.shape() {
                    missing = Some(format!(
                        "parameter {name}: shape {:?} does not match architecture {:?}",
                        loaded.shape(),
                        t.shape()
                    ));
                    t.clone()
                } else {
                    loaded
                }
            }
            None => {
                missing = Some(format!("parameter {name} missing from checkpoint"));
                t.clone()
            }
        }
    });
    if let Some(msg) = missing {
        return Err(Error::Checkpoint(msg));
    }
    if let Some((name, _)) = blobs.into_iter().next() {
        return Err(Error::Checkpoint(format!("unknown parameter {name} in checkpoint")));
    }

    let opt_flag = r.take(1, "optimizer flag")?[0];
    let optimizer = if opt_flag == 1 {
        let config = AdamConfig {
            beta1: r.f64("adam")?,
            beta2: r.f64("adam")?,
            eps: r.f64("adam")?,
            weight_decay: r.f64("adam")?,
            peak_lr: r.f64("adam")?,
        };
        let t = r.u64("adam step")?;
        let mut moments = BTreeMap::new();
        for (name, shape) in &manifest {
            let numel: usize = shape.iter().product();
            let m = r.f32_vec(numel, "first moment")?;
            let v = r.f32_vec(numel, "second moment")?;
            moments.insert(name.clone(), (m, v));
        }
        Some(OptimizerState { config, t, moments })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "blob length mismatch: {} trailing bytes",
            buf.len() - r.pos
        )));
    }

    Ok(Checkpoint { model, optimizer, step, rng })
}

/// Objective set for a single-objective-disabled ablation run.
pub fn ablation_without(obj: Objective) -> ObjectiveSet {
    ObjectiveSet::all().without(obj)
}
