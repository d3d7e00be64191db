use std::collections::{BTreeMap, HashMap};

use super::{tokenize_events, EventSequence, EOS_TOKEN, NULL_TOKEN, SEP_TOKEN};
use crate::error::{Error, Result};

/// Token <-> id table. Reserved tokens occupy the lowest ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const START: u32 = 2;
    pub const EOS: u32 = 3;
    pub const NULL: u32 = 4;
    pub const SEP: u32 = 5;

    pub const RESERVED: [&'static str; 6] =
        ["<pad>", "<unk>", "<s>", EOS_TOKEN, NULL_TOKEN, SEP_TOKEN];

    /// Builds from `(token, count)` pairs, keeping the `max_size -
    /// RESERVED.len()` most frequent tokens with ties broken
    /// lexicographically.
    pub fn from_counts<I>(counts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (String, usize)>,
    {
        if max_size <= Self::RESERVED.len() {
            return Err(Error::Invalid(format!(
                "vocabulary max_size {max_size} must exceed the {} reserved tokens",
                Self::RESERVED.len()
            )));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !Self::RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - Self::RESERVED.len());

        let tokens: Vec<String> = Self::RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Rebuilds from an id-ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
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

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn decode(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(Self::RESERVED[Self::UNK as usize], String::as_str)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < Self::RESERVED.len()
    }

    /// Flat token ids for `seq` with EOS appended.
    pub fn encode_sequence(&self, seq: &EventSequence) -> Result<Vec<u32>> {
        let mut ids = self.encode_words(seq)?;
        ids.push(Self::EOS);
        Ok(ids)
    }

    /// Flat token ids for `seq` without EOS, the form models consume.
    pub fn encode_words(&self, seq: &EventSequence) -> Result<Vec<u32>> {
        Ok(tokenize_events(seq)?
            .into_iter()
            .map(|t| self.encode(t))
            .collect())
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.decode(i)).collect()
    }
}

/// Counts flat tokens across `corpus` and keeps the most frequent ones.
pub fn build_vocabulary(corpus: &[EventSequence], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for seq in corpus {
        for tok in tokenize_events(seq)? {
            *counts.entry(tok.to_string()).or_default() += 1;
        }
    }
    Vocabulary::from_counts(counts, max_size)
}
