//! Evaluation metrics: span precision/recall/F1, ROUGE-1/2/L, BLEU, and
//! recall-at-k for response ranking.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::AttributeSpan;

/// Precision, recall, and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, n_predicted: usize, n_gold: usize) -> Prf {
        let precision = if n_predicted == 0 { 0.0 } else { tp as f64 / n_predicted as f64 };
        let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
        Prf::from_pr(precision, recall)
    }

    pub fn from_pr(precision: f64, recall: f64) -> Prf {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }

    pub fn zero() -> Prf {
        Prf { precision: 0.0, recall: 0.0, f1: 0.0 }
    }
}

/// Micro-averaged span match over a corpus. Spans match on exact
/// (attribute, start, end) equality.
pub fn span_prf(predicted: &[Vec<AttributeSpan>], gold: &[Vec<AttributeSpan>]) -> Prf {
    let key = |s: &AttributeSpan| (s.attribute.clone(), s.start, s.end);
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        n_pred += p.len();
        n_gold += g.len();
        let gold_keys: std::collections::HashSet<_> = g.iter().map(&key).collect();
        tp += p.iter().filter(|s| gold_keys.contains(&key(s))).count();
    }
    Prf::from_counts(tp, n_pred, n_gold)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap F1. A side with fewer than `n` tokens contributes
/// zero n-grams, which zeroes the corresponding precision or recall.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Prf {
    assert!(n >= 1, "n-gram order must be positive");
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let total_c: usize = c.values().sum();
    let total_r: usize = r.values().sum();
    let overlap: usize =
        c.iter().map(|(gram, &count)| count.min(r.get(gram).copied().unwrap_or(0))).sum();
    let precision = if total_c == 0 { 0.0 } else { overlap as f64 / total_c as f64 };
    let recall = if total_r == 0 { 0.0 } else { overlap as f64 / total_r as f64 };
    Prf::from_pr(precision, recall)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::zero();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    Prf::from_pr(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

/// Mean of per-example ROUGE scores over a corpus.
pub fn rouge_n_corpus(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Prf {
    mean_prf(candidates.iter().zip(references).map(|(c, r)| rouge_n(c, r, n)))
}

pub fn rouge_l_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Prf {
    mean_prf(candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)))
}

fn mean_prf(scores: impl Iterator<Item = Prf>) -> Prf {
    let mut acc = Prf::zero();
    let mut count = 0usize;
    for s in scores {
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
        count += 1;
    }
    if count == 0 {
        return Prf::zero();
    }
    Prf {
        precision: acc.precision / count as f64,
        recall: acc.recall / count as f64,
        f1: acc.f1 / count as f64,
    }
}

/// Corpus-level BLEU: clipped n-gram counts summed over all pairs, geometric
/// mean of the order precisions, brevity penalty from corpus lengths.
/// Orders n ≥ 2 with a zero clipped count are add-one smoothed
/// ((c+1)/(t+1)); an order with no candidate n-grams at all contributes a
/// neutral factor, which keeps `bleu(c, c) = 1` for short sequences.
pub fn bleu_corpus(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> f64 {
    assert_eq!(candidates.len(), references.len());
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += cc.values().sum::<usize>();
            clipped[n - 1] +=
                cc.iter().map(|(g, &count)| count.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (c, t) = (clipped[n - 1], totals[n - 1]);
        let p = if t == 0 {
            1.0
        } else if c == 0 {
            if n == 1 {
                return 0.0;
            }
            (c as f64 + 1.0) / (t as f64 + 1.0)
        } else {
            c as f64 / t as f64
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / max_n as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    geo * bp
}

/// Sentence-level BLEU of one pair (a corpus of one).
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize) -> f64 {
    bleu_corpus(&[candidate.to_vec()], &[reference.to_vec()], max_n)
}

/// Fraction of examples whose gold candidate ranks in the top `k`.
/// `gold_positions[i]` is the 0-based rank of the gold response among `n`
/// candidates for example `i`.
pub fn recall_at_k(gold_positions: &[usize], n: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("recall@k: k={k} outside 1..={n}")));
    }
    if let Some(&bad) = gold_positions.iter().find(|&&p| p >= n) {
        return Err(Error::invalid(format!("recall@k: gold position {bad} with only {n} candidates")));
    }
    if gold_positions.is_empty() {
        return Err(Error::invalid("recall@k: no examples".to_string()));
    }
    let hits = gold_positions.iter().filter(|&&p| p < k).count();
    Ok(hits as f64 / gold_positions.len() as f64)
}

/// Position of `gold_index` inside a ranking permutation.
pub fn gold_position(ranking: &[usize], gold_index: usize) -> Option<usize> {
    ranking.iter().position(|&c| c == gold_index)
}

/// Writes `metrics.json` (sorted keys) and `per_example.csv` under `dir`.
pub fn write_report(
    dir: &Path,
    metrics: &BTreeMap<String, f64>,
    per_example: &[(String, BTreeMap<String, f64>)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(metrics).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(dir.join("metrics.json"), json + "\n")?;

    let mut columns: Vec<&String> = Vec::new();
    if let Some((_, first)) = per_example.first() {
        columns = first.keys().collect();
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("per_example.csv"))?);
    write!(w, "id")?;
    for c in &columns {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    for (id, values) in per_example {
        write!(w, "{id}")?;
        for c in &columns {
            write!(w, ",{}", values.get(*c).copied().unwrap_or(f64::NAN))?;
        }
        writeln!(w)?;
    }
    Ok(())
}
