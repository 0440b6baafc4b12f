use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ReportRecord;
use crate::error::{HistGenError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_FREQ: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 100;

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, usize>,
    token_of: Vec<String>,
    min_freq: usize,
}

/// Encoded report: `BOS ids… EOS` followed by `PAD` up to the length budget.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    /// Token count excluding padding.
    pub fn len(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The sequence without trailing padding.
    pub fn unpadded(&self) -> &[usize] {
        let end = self
            .ids
            .iter()
            .rposition(|&i| i != PAD)
            .map_or(0, |p| p + 1);
        &self.ids[..end]
    }
}

impl Vocabulary {
    /// Frequency-descending, then lexicographic id assignment after the four
    /// special tokens. Tokens seen fewer than `min_freq` times are left out
    /// and encode as `UNK`.
    pub fn build(corpus: &[ReportRecord], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(HistGenError::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for r in corpus {
            for t in tokenize(&r.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let token_of: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(token_of, min_freq))
    }

    fn from_tokens(token_of: Vec<String>, min_freq: usize) -> Self {
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_of,
            token_of,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(HistGenError::invalid(format!("max_len {max_len} < 3")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(
            tokenize(text)
                .iter()
                .take(max_len - 2)
                .map(|t| self.id(t).unwrap_or(UNK)),
        );
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids })
    }

    /// Tokens up to the first `EOS`, specials dropped, single-space joined.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        Ok(self.decode_tokens(&seq.ids)?.join(" "))
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            if id >= self.len() {
                return Err(HistGenError::invalid(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.len()
                )));
            }
            if id == EOS {
                break;
            }
            if id > UNK {
                out.push(self.token_of[id].clone());
            }
        }
        Ok(out)
    }

    /// `token → id` map, the on-disk form.
    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.id_of.iter().map(|(t, &i)| (t.clone(), i)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut token_of = vec![String::new(); map.len()];
        let mut filled = vec![false; map.len()];
        for (t, &i) in map {
            if i >= map.len() || filled[i] {
                return Err(HistGenError::invalid(format!(
                    "vocabulary ids are not a permutation of 0..{}",
                    map.len()
                )));
            }
            token_of[i] = t.clone();
            filled[i] = true;
        }
        if token_of.len() < SPECIALS.len() || token_of[..4] != SPECIALS {
            return Err(HistGenError::invalid("vocabulary specials must occupy ids 0-3"));
        }
        Ok(Self::from_tokens(token_of, 1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, &self.to_map())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HistGenError::io(path, e))?;
        Self::from_map(&serde_json::from_str(&text)?)
    }
}
