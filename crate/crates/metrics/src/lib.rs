//! Corpus-level text generation metrics for single-reference evaluation:
//! BLEU-1..4 without smoothing, ROUGE-L F1, and an exact-match-only METEOR
//! variant (`meteor_lite`) that skips stemming and synonym stages.
//!
//! ```
//! use mscl_metrics::{evaluate_corpus, EvalPair};
//!
//! let pairs = vec![EvalPair::from_text("the heart is normal", "the heart is normal")];
//! let report = evaluate_corpus(&pairs).unwrap();
//! assert_eq!(report.bleu4, 1.0);
//! assert_eq!(report.rouge_l, 1.0);
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be in 1..=4, got {0}")]
    Order(usize),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Lowercases and splits on whitespace, emitting each ASCII punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, reference: Vec<String>) -> Self {
        Self { candidate, reference }
    }

    pub fn from_text(candidate: &str, reference: &str) -> Self {
        Self::new(tokenize(candidate), tokenize(reference))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(MetricsError::Order(max_n));
    }
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for pair in pairs {
        cand_len += pair.candidate.len();
        ref_len += pair.reference.len();
        for n in 1..=max_n {
            let refs = ngram_counts(&pair.reference, n);
            for (gram, count) in ngram_counts(&pair.candidate, n) {
                matched[n - 1] += count.min(refs.get(gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok((bp * (log_sum / max_n as f64).exp()).min(1.0))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
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

pub fn rouge_l_pair(pair: &EvalPair) -> f64 {
    let lcs = lcs_len(&pair.candidate, &pair.reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pair.candidate.len() as f64;
    let r = lcs as f64 / pair.reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean per-pair ROUGE-L F1.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    mean(pairs, rouge_l_pair)
}

/// Exact-match METEOR for one pair.
pub fn meteor_lite_pair(pair: &EvalPair) -> f64 {
    let mut used = vec![false; pair.reference.len()];
    // reference index aligned to each matched candidate token, in candidate order
    let mut alignment = Vec::new();
    for tok in &pair.candidate {
        if let Some(j) = (0..pair.reference.len()).find(|&j| !used[j] && pair.reference[j] == *tok) {
            used[j] = true;
            alignment.push(j);
        } else {
            alignment.push(usize::MAX);
        }
    }
    let matches = alignment.iter().filter(|&&j| j != usize::MAX).count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for &j in &alignment {
        if j == usize::MAX {
            prev = None;
            continue;
        }
        if prev.is_none_or(|p| p + 1 != j) {
            chunks += 1;
        }
        prev = Some(j);
    }
    let p = matches as f64 / pair.candidate.len() as f64;
    let r = matches as f64 / pair.reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite(pairs: &[EvalPair]) -> Result<f64> {
    mean(pairs, meteor_lite_pair)
}

fn mean(pairs: &[EvalPair], f: fn(&EvalPair) -> f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(pairs.iter().map(f).sum::<f64>() / pairs.len() as f64)
}

pub fn evaluate_corpus(pairs: &[EvalPair]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(pairs, 1)?,
        bleu2: bleu(pairs, 2)?,
        bleu3: bleu(pairs, 3)?,
        bleu4: bleu(pairs, 4)?,
        rouge_l: rouge_l(pairs)?,
        meteor: meteor_lite(pairs)?,
    })
}

/// One line of a generation output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub candidate: String,
    pub reference: String,
}

impl GenerationRecord {
    pub fn to_pair(&self) -> EvalPair {
        EvalPair::from_text(&self.candidate, &self.reference)
    }
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let io = |e: std::io::Error| MetricsError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn evaluate_file(path: &Path) -> Result<MetricReport> {
    let pairs: Vec<EvalPair> = read_generations(path)?.iter().map(GenerationRecord::to_pair).collect();
    evaluate_corpus(&pairs)
}
