//! Command-line driver: reproducible corpus generation, pre-training,
//! fine-tuning, evaluation, generation, and gradient checking.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, or files),
//! 2 runtime failure (non-finite loss). Every artifact except `run.log` is
//! byte-reproducible from (flags, config, seed).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use kplug_core::corpus::{
    self, build_vocab, generate_dialogues, generate_kbc_corpus, generate_sum_pairs,
    generate_synthetic, load_corpus, load_dialogues, load_sum_pairs, save_corpus,
    save_dialogues, save_sum_pairs, DialogueRecord, GenProfile, SumPair, Vocab, CLS,
};
use kplug_core::error::Error;
use kplug_core::metrics::{
    bleu_corpus, gold_position, recall_at_k, rouge_l, rouge_n, span_prf, write_report,
};
use kplug_core::model::{ModelConfig, TransformerModel};
use kplug_core::objectives::{joint_loss_from_parts, build_joint_parts, ObjectiveSet};
use kplug_core::tasks::{
    beam_search, decode_bio, dialogue_to_pair, encode_dialogue, finetune_retrieval,
    finetune_seq2seq, finetune_tagger, ids_to_output, rank_candidates, tag, BeamConfig,
    BioLabelSet, FinetuneConfig,
};
use kplug_core::tensor::{grad_check, GradCheckConfig, Precision};
use kplug_core::train::{
    load_checkpoint, pretrain, save_checkpoint, write_trace_csv, AdamConfig, Checkpoint,
    RngState, Schedule, TrainConfig,
};

#[derive(Parser)]
#[command(name = "kplug", version, about = "Knowledge-injected encoder-decoder pre-training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GenTask {
    Pretrain,
    Kbc,
    Sum,
    Dialog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FtTask {
    Kbc,
    Sum,
    DialogRet,
    DialogGen,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic corpus (or task dataset) plus vocabulary.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_docs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        n_categories: usize,
        #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
        profile: ProfileArg,
        #[arg(long, value_enum, default_value_t = GenTask::Pretrain)]
        task: GenTask,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        /// Negatives per dialogue example (dialog task only).
        #[arg(long, default_value_t = 9)]
        n_negatives: usize,
    },
    /// Pre-train over a corpus with the enabled objectives.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        warmup_steps: Option<u64>,
        /// Comma-separated subset of kmlm,kms2s,peabd,pecc,peasg.
        #[arg(long)]
        objectives: Option<String>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        accum_steps: Option<usize>,
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long)]
        n_categories: Option<usize>,
    },
    /// Fine-tune a checkpoint on a downstream task.
    Finetune {
        #[arg(long, value_enum)]
        task: FtTask,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        warmup_steps: Option<u64>,
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long)]
        unfreeze_decoder: bool,
    },
    /// Evaluate a checkpoint on task data and write a metrics report.
    Eval {
        #[arg(long, value_enum)]
        task: FtTask,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attribute list written by kbc fine-tuning (defaults to
        /// attributes.txt next to the checkpoint).
        #[arg(long)]
        attributes: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 1.0)]
        length_penalty: f64,
        #[arg(long, default_value_t = 24)]
        gen_max_len: usize,
    },
    /// Generate outputs for a JSONL input with beam search.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 1.0)]
        length_penalty: f64,
        #[arg(long, default_value_t = 24)]
        gen_max_len: usize,
    },
    /// Check analytic gradients of the joint loss against finite differences.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        coords: usize,
    },
}

// ── run configuration ───────────────────────────────────────────────

/// Merged run configuration. Files use JSON with exactly these keys;
/// unknown keys are rejected. Command-line flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    preset: Option<String>,
    model: Option<ModelConfig>,
    warmup_steps: Option<u64>,
    total_steps: Option<u64>,
    enabled_objectives: Option<ObjectiveSet>,
    seed: Option<u64>,
    corpus: Option<PathBuf>,
    vocab: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    beam_size: Option<usize>,
    length_penalty: Option<f64>,
    gen_max_len: Option<usize>,
    accum_steps: Option<usize>,
    min_freq: Option<usize>,
    peak_lr: Option<f64>,
    weight_decay: Option<f64>,
    dropout_p: Option<f64>,
    n_categories: Option<usize>,
    unfreeze_decoder: Option<bool>,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))
    }

    fn schedule(&self) -> Result<Schedule, Error> {
        let total = self
            .total_steps
            .ok_or_else(|| Error::Invalid("total_steps is required".to_string()))?;
        let warmup = self.warmup_steps.unwrap_or_else(|| 10_000.min((total / 10).max(1)));
        Schedule::new(warmup, total)
    }

    fn adam(&self) -> AdamConfig {
        let mut adam = AdamConfig::default();
        if let Some(lr) = self.peak_lr {
            adam.peak_lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            adam.weight_decay = wd;
        }
        adam
    }

    fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, Error> {
        let mut cfg = match (&self.model, self.preset.as_deref()) {
            (Some(explicit), _) => {
                let mut c = explicit.clone();
                c.vocab_size = vocab_size;
                c
            }
            (None, Some("full")) => ModelConfig::full(vocab_size),
            (None, Some("tiny")) => ModelConfig::tiny(vocab_size),
            (None, Some("desk") | None) => ModelConfig::desk(vocab_size),
            (None, Some(other)) => {
                return Err(Error::Invalid(format!(
                    "unknown preset {other} (expected desk, full, or tiny)"
                )))
            }
        };
        if let Some(p) = self.dropout_p {
            cfg.dropout_p = p;
        }
        if let Some(n) = self.n_categories {
            cfg.n_categories = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn required_path(&self, field: &str) -> Result<PathBuf, Error> {
        let v = match field {
            "corpus" => &self.corpus,
            "vocab" => &self.vocab,
            "checkpoint" => &self.checkpoint,
            "data" => &self.data,
            "out" => &self.out,
            _ => unreachable!(),
        };
        v.clone().ok_or_else(|| Error::Invalid(format!("{field} path is required")))
    }

    /// Writes the fully-resolved configuration so the run can be repeated
    /// with `--config <out>/config.json`.
    fn echo(&self, out: &Path) -> Result<(), Error> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(out.join("config.json"), json + "\n")?;
        Ok(())
    }
}

fn exists(path: &Path) -> Result<(), Error> {
    if !path.exists() {
        return Err(Error::Invalid(format!("missing file: {}", path.display())));
    }
    Ok(())
}

/// Timestamps are quarantined here; every other artifact is deterministic.
fn log_line(out: &Path, msg: &str) {
    if let Ok(mut f) =
        std::fs::OpenOptions::new().create(true).append(true).open(out.join("run.log"))
    {
        let _ = writeln!(f, "[{}] {msg}", chrono::Utc::now().to_rfc3339());
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; keep usage problems at exit 1
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::NonFinite { .. } => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenCorpus { seed, n_docs, out, n_categories, profile, task, min_freq, n_negatives } => {
            cmd_gen_corpus(seed, n_docs, &out, n_categories, profile, task, min_freq, n_negatives)
        }
        Cmd::Pretrain {
            config,
            corpus,
            vocab,
            out,
            seed,
            total_steps,
            warmup_steps,
            objectives,
            preset,
            accum_steps,
            peak_lr,
            n_categories,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            override_opt(&mut cfg.corpus, corpus);
            override_opt(&mut cfg.vocab, vocab);
            override_opt(&mut cfg.out, out);
            override_opt(&mut cfg.seed, seed);
            override_opt(&mut cfg.total_steps, total_steps);
            override_opt(&mut cfg.warmup_steps, warmup_steps);
            override_opt(&mut cfg.preset, preset);
            override_opt(&mut cfg.accum_steps, accum_steps);
            override_opt(&mut cfg.peak_lr, peak_lr);
            override_opt(&mut cfg.n_categories, n_categories);
            if let Some(list) = objectives {
                let names: Vec<&str> = list.split(',').map(|s| s.trim()).collect();
                cfg.enabled_objectives = Some(ObjectiveSet::from_names(&names)?);
            }
            cmd_pretrain(cfg)
        }
        Cmd::Finetune {
            task,
            config,
            checkpoint,
            data,
            vocab,
            out,
            seed,
            total_steps,
            warmup_steps,
            peak_lr,
            unfreeze_decoder,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            override_opt(&mut cfg.checkpoint, checkpoint);
            override_opt(&mut cfg.data, data);
            override_opt(&mut cfg.vocab, vocab);
            override_opt(&mut cfg.out, out);
            override_opt(&mut cfg.seed, seed);
            override_opt(&mut cfg.total_steps, total_steps);
            override_opt(&mut cfg.warmup_steps, warmup_steps);
            override_opt(&mut cfg.peak_lr, peak_lr);
            if unfreeze_decoder {
                cfg.unfreeze_decoder = Some(true);
            }
            cmd_finetune(task, cfg)
        }
        Cmd::Eval {
            task,
            checkpoint,
            data,
            vocab,
            out,
            attributes,
            beam,
            length_penalty,
            gen_max_len,
        } => cmd_eval(task, &checkpoint, &data, &vocab, &out, attributes, beam, length_penalty, gen_max_len),
        Cmd::Generate { checkpoint, input, vocab, out, beam, length_penalty, gen_max_len } => {
            cmd_generate(&checkpoint, &input, &vocab, &out, beam, length_penalty, gen_max_len)
        }
        Cmd::Gradcheck { preset, seed, coords } => cmd_gradcheck(&preset, seed, coords),
    }
}

fn override_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

// ── gen-corpus ──────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_gen_corpus(
    seed: u64,
    n_docs: usize,
    out: &Path,
    n_categories: usize,
    profile: ProfileArg,
    task: GenTask,
    min_freq: usize,
    n_negatives: usize,
) -> Result<(), Error> {
    if n_docs == 0 {
        return Err(Error::Invalid("--n-docs must be at least 1".to_string()));
    }
    std::fs::create_dir_all(out)?;
    let profile = match profile {
        ProfileArg::Desk => GenProfile::desk(),
        ProfileArg::Full => GenProfile::full(),
    };
    match task {
        GenTask::Pretrain => {
            let docs = generate_synthetic(seed, n_docs, n_categories, &profile)?;
            save_corpus(&out.join("corpus.jsonl"), &docs)?;
            build_vocab(&docs, min_freq)?.save(&out.join("vocab.txt"))?;
            println!("wrote {} documents to {}", docs.len(), out.display());
        }
        GenTask::Kbc => {
            let docs = generate_kbc_corpus(seed, n_docs)?;
            save_corpus(&out.join("kbc.jsonl"), &docs)?;
            build_vocab(&docs, min_freq)?.save(&out.join("vocab.txt"))?;
            println!("wrote {} tagging documents to {}", docs.len(), out.display());
        }
        GenTask::Sum => {
            let pairs = generate_sum_pairs(seed, n_docs)?;
            save_sum_pairs(&out.join("pairs.jsonl"), &pairs)?;
            let docs = generate_synthetic(seed, n_docs, n_categories, &GenProfile::desk())?;
            build_vocab(&docs, min_freq)?.save(&out.join("vocab.txt"))?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        GenTask::Dialog => {
            let records = generate_dialogues(seed, n_docs, n_negatives)?;
            save_dialogues(&out.join("dialogues.jsonl"), &records)?;
            dialogue_vocab(&records, min_freq)?.save(&out.join("vocab.txt"))?;
            println!("wrote {} dialogues to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn dialogue_vocab(records: &[DialogueRecord], min_freq: usize) -> Result<Vocab, Error> {
    let mut counts = std::collections::HashMap::new();
    for r in records {
        for t in r.turns.iter().flatten().chain(&r.response) {
            *counts.entry(t.clone()).or_insert(0usize) += 1;
        }
        for t in r.negatives.iter().flatten() {
            *counts.entry(t.clone()).or_insert(0usize) += 1;
        }
    }
    Vocab::from_counts(&counts, min_freq)
}

// ── pretrain ────────────────────────────────────────────────────────

fn cmd_pretrain(mut cfg: RunConfig) -> Result<(), Error> {
    let out = cfg.required_path("out")?;
    std::fs::create_dir_all(&out)?;
    let corpus_path = cfg.required_path("corpus")?;
    exists(&corpus_path)?;
    let docs = load_corpus(&corpus_path)?;
    let vocab = match &cfg.vocab {
        Some(p) => {
            exists(p)?;
            Vocab::load(p)?
        }
        None => {
            let v = build_vocab(&docs, cfg.min_freq.unwrap_or(1))?;
            let path = out.join("vocab.txt");
            v.save(&path)?;
            cfg.vocab = Some(path);
            v
        }
    };
    let seed = cfg.seed.unwrap_or(0);
    cfg.seed = Some(seed);
    let schedule = cfg.schedule()?;
    cfg.warmup_steps = Some(schedule.warmup_steps);
    let objectives = cfg.enabled_objectives.unwrap_or_else(ObjectiveSet::all);
    cfg.enabled_objectives = Some(objectives);
    let model_cfg = cfg.model_config(vocab.len())?;
    cfg.model = Some(model_cfg.clone());
    let train_cfg = TrainConfig {
        schedule,
        adam: cfg.adam(),
        objectives,
        seed,
        accum_steps: cfg.accum_steps.unwrap_or(1),
    };

    cfg.echo(&out)?;
    log_line(&out, &format!("pretrain started: {} docs, {} steps", docs.len(), schedule.total_steps));

    let mut model = TransformerModel::seeded(model_cfg, Precision::F32, seed)?;
    let report = pretrain(&mut model, &docs, &vocab, &train_cfg)?;
    write_trace_csv(&out.join("trace.csv"), &report.trace)?;
    let ckpt = Checkpoint {
        model,
        optimizer: Some(report.optimizer),
        step: schedule.total_steps,
        rng: report.final_rng,
    };
    save_checkpoint(&out.join("checkpoint.ckpt"), &ckpt)?;
    log_line(&out, &format!("pretrain finished ({} documents skipped)", report.skipped_docs));
    let last = report.trace.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    println!("pretrained {} steps; final total loss {last:.4}", schedule.total_steps);
    Ok(())
}

// ── finetune ────────────────────────────────────────────────────────

fn cmd_finetune(task: FtTask, mut cfg: RunConfig) -> Result<(), Error> {
    let out = cfg.required_path("out")?;
    std::fs::create_dir_all(&out)?;
    let ckpt_path = cfg.required_path("checkpoint")?;
    exists(&ckpt_path)?;
    let data_path = cfg.required_path("data")?;
    exists(&data_path)?;
    let vocab_path = cfg.required_path("vocab")?;
    exists(&vocab_path)?;
    let vocab = Vocab::load(&vocab_path)?;
    let seed = cfg.seed.unwrap_or(0);
    cfg.seed = Some(seed);
    let schedule = cfg.schedule()?;
    cfg.warmup_steps = Some(schedule.warmup_steps);
    let ft = FinetuneConfig {
        schedule,
        adam: cfg.adam(),
        seed,
        unfreeze_decoder: cfg.unfreeze_decoder.unwrap_or(false),
    };
    cfg.echo(&out)?;
    log_line(&out, &format!("finetune {task:?} started"));

    let mut model = load_checkpoint(&ckpt_path)?.model;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Invalid(format!(
            "checkpoint vocab size {} does not match vocabulary {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }

    let losses = match task {
        FtTask::Kbc => {
            let docs = load_corpus(&data_path)?;
            let (labels, losses) = finetune_tagger(&mut model, &docs, &vocab, &ft)?;
            let mut text = String::new();
            for a in labels.attributes() {
                text.push_str(a);
                text.push('\n');
            }
            std::fs::write(out.join("attributes.txt"), text)?;
            losses
        }
        FtTask::Sum => {
            let pairs = load_sum_pairs(&data_path)?;
            finetune_seq2seq(&mut model, &pairs, &vocab, &ft)?
        }
        FtTask::DialogRet => {
            let records = load_dialogues(&data_path)?;
            finetune_retrieval(&mut model, &records, &vocab, &ft)?
        }
        FtTask::DialogGen => {
            let records = load_dialogues(&data_path)?;
            let pairs: Vec<SumPair> = records
                .iter()
                .map(|r| dialogue_to_pair(r, model.config.max_len))
                .collect::<Result<_, _>>()?;
            finetune_seq2seq(&mut model, &pairs, &vocab, &ft)?
        }
    };

    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(out.join("losses.csv"), csv)?;
    let ckpt = Checkpoint {
        model,
        optimizer: None,
        step: schedule.total_steps,
        rng: RngState::fresh(seed),
    };
    save_checkpoint(&out.join("checkpoint.ckpt"), &ckpt)?;
    log_line(&out, "finetune finished");
    println!(
        "fine-tuned {} steps; final loss {:.4}",
        schedule.total_steps,
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    task: FtTask,
    checkpoint: &Path,
    data: &Path,
    vocab_path: &Path,
    out: &Path,
    attributes: Option<PathBuf>,
    beam: usize,
    length_penalty: f64,
    gen_max_len: usize,
) -> Result<(), Error> {
    exists(checkpoint)?;
    exists(data)?;
    exists(vocab_path)?;
    std::fs::create_dir_all(out)?;
    let vocab = Vocab::load(vocab_path)?;
    let model = load_checkpoint(checkpoint)?.model;
    log_line(out, &format!("eval {task:?} started"));

    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_example: Vec<(String, BTreeMap<String, f64>)> = Vec::new();

    match task {
        FtTask::Kbc => {
            let attrs_path =
                attributes.unwrap_or_else(|| checkpoint.parent().unwrap().join("attributes.txt"));
            exists(&attrs_path)?;
            let attrs: Vec<String> = std::fs::read_to_string(&attrs_path)?
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| l.to_string())
                .collect();
            let labels = BioLabelSet::new(attrs);
            let docs = load_corpus(data)?;
            let mut predicted = Vec::new();
            let mut gold = Vec::new();
            let mut exact = 0usize;
            for doc in &docs {
                let tokens: Vec<String> =
                    doc.aspects.iter().flat_map(|a| a.description.clone()).collect();
                let gold_labels: Vec<String> = doc
                    .aspects
                    .iter()
                    .flat_map(|a| {
                        a.bio_labels.clone().ok_or_else(|| {
                            Error::Invalid(format!("document {}: missing bio_labels", doc.id))
                        })
                    })
                    .flatten()
                    .collect();
                if gold_labels.len() != tokens.len() {
                    return Err(Error::Invalid(format!(
                        "document {}: missing or misaligned bio_labels",
                        doc.id
                    )));
                }
                let pred_labels = tag(&model, &labels, &tokens, &vocab)?;
                let is_exact = pred_labels == gold_labels;
                exact += usize::from(is_exact);
                let p = decode_bio(&pred_labels, &tokens);
                let g = decode_bio(&gold_labels, &tokens);
                let prf = span_prf(std::slice::from_ref(&p), std::slice::from_ref(&g));
                let mut row = BTreeMap::new();
                row.insert("span_f1".to_string(), prf.f1);
                row.insert("exact_match".to_string(), f64::from(u8::from(is_exact)));
                per_example.push((doc.id.clone(), row));
                predicted.push(p);
                gold.push(g);
            }
            let prf = span_prf(&predicted, &gold);
            metrics.insert("span_precision".to_string(), prf.precision);
            metrics.insert("span_recall".to_string(), prf.recall);
            metrics.insert("span_f1".to_string(), prf.f1);
            metrics.insert("sequence_accuracy".to_string(), exact as f64 / docs.len() as f64);
        }
        FtTask::Sum | FtTask::DialogGen => {
            let beam_cfg = BeamConfig {
                beam_size: beam,
                max_len: gen_max_len,
                length_penalty,
                ..BeamConfig::new(beam, gen_max_len)
            };
            let pairs: Vec<SumPair> = if task == FtTask::Sum {
                load_sum_pairs(data)?
            } else {
                load_dialogues(data)?
                    .iter()
                    .map(|r| dialogue_to_pair(r, model.config.max_len))
                    .collect::<Result<_, _>>()?
            };
            let mut outputs = Vec::with_capacity(pairs.len());
            let mut targets = Vec::with_capacity(pairs.len());
            for (i, pair) in pairs.iter().enumerate() {
                let mut src = vec![CLS];
                src.extend(vocab.ids(&pair.source));
                let ids = beam_search(&model, &src, &beam_cfg)?;
                let output = ids_to_output(&ids, &vocab, beam_cfg.eos);
                let id = pair.id.clone().unwrap_or_else(|| format!("ex{i}"));
                let r1 = rouge_n(&output, &pair.target, 1);
                let r2 = rouge_n(&output, &pair.target, 2);
                let rl = rouge_l(&output, &pair.target);
                let mut row = BTreeMap::new();
                row.insert("rouge1_f1".to_string(), r1.f1);
                row.insert("rouge2_f1".to_string(), r2.f1);
                row.insert("rougeL_f1".to_string(), rl.f1);
                per_example.push((id, row));
                outputs.push(output);
                targets.push(pair.target.clone());
            }
            let mean = |key: &str| {
                per_example.iter().map(|(_, r)| r[key]).sum::<f64>() / per_example.len() as f64
            };
            metrics.insert("rouge1_f1".to_string(), mean("rouge1_f1"));
            metrics.insert("rouge2_f1".to_string(), mean("rouge2_f1"));
            metrics.insert("rougeL_f1".to_string(), mean("rougeL_f1"));
            // corpus-level BLEU with add-one smoothing for orders ≥ 2
            metrics.insert("bleu4-smooth1".to_string(), bleu_corpus(&outputs, &targets, 4));
        }
        FtTask::DialogRet => {
            let records = load_dialogues(data)?;
            let mut positions = Vec::with_capacity(records.len());
            let mut n_candidates: Option<usize> = None;
            for (i, r) in records.iter().enumerate() {
                if r.negatives.is_empty() {
                    return Err(Error::Invalid(format!("dialogue {i}: no negatives")));
                }
                let mut candidates = vec![r.response.clone()];
                candidates.extend(r.negatives.iter().cloned());
                match n_candidates {
                    None => n_candidates = Some(candidates.len()),
                    Some(n) if n != candidates.len() => {
                        return Err(Error::Invalid(format!(
                            "dialogue {i}: {} candidates, expected {n}",
                            candidates.len()
                        )))
                    }
                    _ => {}
                }
                let ranking = rank_candidates(&model, &r.turns, &candidates, &vocab)?;
                let pos = gold_position(&ranking, 0).expect("gold candidate present");
                let mut row = BTreeMap::new();
                row.insert("gold_rank".to_string(), pos as f64);
                per_example.push((format!("ex{i}"), row));
                positions.push(pos);
            }
            let n = n_candidates.unwrap_or(0);
            for k in [1usize, 2, 5] {
                if k <= n {
                    metrics.insert(format!("r{n}_at_{k}"), recall_at_k(&positions, n, k)?);
                }
            }
        }
    }

    write_report(out, &metrics, &per_example)?;
    log_line(out, "eval finished");
    for (k, v) in &metrics {
        println!("{k}: {v:.4}");
    }
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────

fn cmd_generate(
    checkpoint: &Path,
    input: &Path,
    vocab_path: &Path,
    out: &Path,
    beam: usize,
    length_penalty: f64,
    gen_max_len: usize,
) -> Result<(), Error> {
    exists(checkpoint)?;
    exists(input)?;
    exists(vocab_path)?;
    std::fs::create_dir_all(out)?;
    let vocab = Vocab::load(vocab_path)?;
    let model = load_checkpoint(checkpoint)?.model;
    let beam_cfg = BeamConfig {
        beam_size: beam,
        max_len: gen_max_len,
        length_penalty,
        ..BeamConfig::new(beam, gen_max_len)
    };

    #[derive(Serialize)]
    struct OutputRow {
        id: String,
        output: Vec<String>,
    }

    let text = std::fs::read_to_string(input)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let (id, source_ids) = if value.get("turns").is_some() {
            let record: DialogueRecord = serde_json::from_value(value)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            let ids = encode_dialogue(&record.turns, None, &vocab, model.config.max_len)?;
            (format!("ex{i}"), ids)
        } else {
            let pair: SumPair = serde_json::from_value(value)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            let mut ids = vec![CLS];
            ids.extend(vocab.ids(&pair.source));
            (pair.id.unwrap_or_else(|| format!("ex{i}")), ids)
        };
        let generated = beam_search(&model, &source_ids, &beam_cfg)?;
        rows.push(OutputRow { id, output: ids_to_output(&generated, &vocab, beam_cfg.eos) });
    }
    if rows.is_empty() {
        return Err(Error::Invalid(format!("empty input: {}", input.display())));
    }
    let mut text = String::new();
    for row in &rows {
        text.push_str(&serde_json::to_string(row).map_err(|e| Error::Invalid(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(out.join("generations.jsonl"), text)?;
    println!("wrote {} generations to {}", rows.len(), out.join("generations.jsonl").display());
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

/// Deterministic fixture: a 200-token vocabulary and one annotated document.
fn gradcheck_fixture() -> (Vocab, corpus::ProductDocument) {
    let mut counts = std::collections::HashMap::new();
    for i in 0..193 {
        counts.insert(format!("w{i:03}"), 1000 - i);
    }
    let vocab = Vocab::from_counts(&counts, 1).expect("fixture vocab");
    let word = |i: usize| format!("w{i:03}");
    let doc = corpus::ProductDocument {
        id: "gradcheck".to_string(),
        category: 3,
        aspects: vec![
            corpus::AspectSection {
                description: (0..5).map(word).collect(),
                summary: vec![word(1), word(4)],
                spans: vec![corpus::KnowledgeSpan {
                    start: 1,
                    end: 3,
                    kind: corpus::SpanKind::KbAttribute,
                }],
                bio_labels: None,
            },
            corpus::AspectSection {
                description: (20..24).map(word).collect(),
                summary: vec![word(21), word(23)],
                spans: vec![corpus::KnowledgeSpan {
                    start: 2,
                    end: 4,
                    kind: corpus::SpanKind::Usp,
                }],
                bio_labels: None,
            },
        ],
    };
    (vocab, doc)
}

fn cmd_gradcheck(preset: &str, seed: u64, coords: usize) -> Result<(), Error> {
    let (vocab, doc) = gradcheck_fixture();
    let model_cfg = match preset {
        "desk" => ModelConfig::desk(vocab.len()),
        "tiny" => ModelConfig::tiny(vocab.len()),
        other => return Err(Error::Invalid(format!("unknown preset {other}"))),
    };
    let model = TransformerModel::seeded(model_cfg.clone(), Precision::F64, seed)?;
    let enabled = ObjectiveSet::all();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x9e3779b9);
    let parts = build_joint_parts(&doc, &vocab, &model_cfg, &enabled, &mut rng)?;

    let mut params = model.named_params();
    let gc = GradCheckConfig { max_coords_per_tensor: coords, seed, ..Default::default() };
    let start = std::time::Instant::now();
    let report = grad_check(
        &mut params,
        |tape, vars| {
            let binding = model.binding_from_slice(vars);
            let (_, total) = joint_loss_from_parts(tape, &binding, &model_cfg, &parts, &enabled)?;
            Ok(total)
        },
        &gc,
    )?;
    println!("{report}");
    println!(
        "gradcheck {}: {} tensors, max rel err {:.3e}, {:.1}s: {}",
        preset,
        report.tensors.len(),
        report.max_rel_err,
        start.elapsed().as_secs_f64(),
        if report.pass() { "PASS" } else { "FAIL" }
    );
    if report.pass() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("gradient check failed: max rel err {:.3e}", report.max_rel_err)))
    }
}
