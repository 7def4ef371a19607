//! Studies, tokenization, vocabulary, splitting and JSONL manifests.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use mscl_metrics::tokenize;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Per-topic finding state, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicState {
    Positive,
    Negative,
    Uncertain,
    Unmentioned,
}

impl TopicState {
    pub const ALL: [TopicState; 4] = [
        TopicState::Positive,
        TopicState::Negative,
        TopicState::Uncertain,
        TopicState::Unmentioned,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TopicState::Positive => "positive",
            TopicState::Negative => "negative",
            TopicState::Uncertain => "uncertain",
            TopicState::Unmentioned => "unmentioned",
        }
    }

    /// Positive and uncertain findings both count as abnormal.
    pub fn is_abnormal(self) -> bool {
        matches!(self, TopicState::Positive | TopicState::Uncertain)
    }
}

impl fmt::Display for TopicState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopicState {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown topic state `{s}`"))
    }
}

/// One manifest line. Image paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub id: String,
    pub images: Vec<PathBuf>,
    pub indication: String,
    pub report: String,
    pub topic_states: Vec<TopicState>,
}

impl Study {
    /// Bitmask of abnormal topics; the contrastive label.
    pub fn abnormal_set(&self) -> u64 {
        self.topic_states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_abnormal())
            .fold(0, |acc, (i, _)| acc | 1 << i)
    }
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens with at least `min_freq` occurrences, ordered by count
    /// descending then lexicographically, after the four specials.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(CoreError::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        if min_freq == 0 {
            return Err(CoreError::Input("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(t, _)| t))
                .collect(),
        ))
    }

    /// Rebuilds a vocabulary from its full token list, specials included.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Tokens up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

/// Seeded shuffle, then 70% / 10% / remainder.
pub fn split_dataset<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.len() < 10 {
        return Err(CoreError::Input(format!(
            "need at least 10 studies to split, got {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = items.len() * 7 / 10;
    let n_val = items.len() / 10;
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    id: String,
    images: Vec<PathBuf>,
    indication: String,
    report: String,
    topic_states: Vec<String>,
}

/// Parses a JSONL manifest, checking that every image exists and every state
/// is one of the first `states` classes.
pub fn load_dataset(manifest: &Path, topics: usize, states: usize) -> Result<Vec<Study>> {
    let text = fs::read_to_string(manifest).map_err(|e| CoreError::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| CoreError::Schema {
            path: manifest.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawStudy = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if raw.images.is_empty() {
            return Err(schema(format!("study `{}` has no images", raw.id)));
        }
        if raw.topic_states.len() != topics {
            return Err(schema(format!(
                "study `{}` has {} topic states, expected {topics}",
                raw.id,
                raw.topic_states.len()
            )));
        }
        let mut topic_states = Vec::with_capacity(topics);
        for s in &raw.topic_states {
            let state: TopicState = s.parse().map_err(schema)?;
            if state.index() >= states {
                return Err(schema(format!("state `{s}` is outside the {states} configured states")));
            }
            topic_states.push(state);
        }
        for img in &raw.images {
            let full = root.join(img);
            if !full.is_file() {
                return Err(CoreError::io(&full, "image file not found"));
            }
        }
        out.push(Study {
            id: raw.id,
            images: raw.images,
            indication: raw.indication,
            report: raw.report,
            topic_states,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, studies: &[Study]) -> Result<()> {
    let mut text = String::new();
    for s in studies {
        text.push_str(&serde_json::to_string(s).expect("study serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("No acute disease."), ["no", "acute", "disease", "."]);
        assert!(tokenize("").is_empty());
        let ts = tokenize("the heart , is normal .");
        assert_eq!(tokenize(&detokenize(&ts)), ts);
    }

    #[test]
    fn vocab_threshold_and_order() {
        let v = Vocabulary::build(&["a a b"], 2).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<bos>", "<eos>", "<unk>", "a"]);
        assert_eq!(v.id("b"), UNK);
        let all = Vocabulary::build(&["b a a c"], 1).unwrap();
        assert_eq!(&all.tokens()[4..], ["a", "b", "c"]);
        assert_eq!(Vocabulary::build(&["c a b a"], 1).unwrap(), all);
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(&["x y"], 1).unwrap();
        let ids = [BOS, v.id("x"), PAD, v.id("y"), EOS, v.id("x")];
        assert_eq!(v.decode(&ids), ["x", "y"]);
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b, c) = split_dataset(&items, 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        assert_eq!(split_dataset(&items, 1).unwrap(), (a, b, c));
        assert!(split_dataset(&items[..9], 1).is_err());
    }

    #[test]
    fn state_strings() {
        for s in TopicState::ALL {
            assert_eq!(s.as_str().parse::<TopicState>().unwrap(), s);
            assert_eq!(TopicState::from_index(s.index()), Some(s));
        }
        assert!("maybe".parse::<TopicState>().is_err());
    }
}
