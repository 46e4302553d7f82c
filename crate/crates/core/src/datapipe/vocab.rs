use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Interior caption length cap (tokens between BOS and EOS).
pub const MAX_CAPTION_TOKENS: usize = 16;

/// Word ↔ id mapping. Ids 0..4 are the specials; retained words follow in
/// order of descending corpus count, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

/// An encoded caption and whether it was cut to the length cap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedCaption {
    /// `BOS, interior…, EOS`.
    pub ids: Vec<usize>,
    pub truncated: bool,
}

impl Vocabulary {
    /// Keeps every word seen at least `min_count` times.
    pub fn build<'a, I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut sentences = 0usize;
        for sentence in corpus {
            sentences += 1;
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        if sentences == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_count && !SPECIAL_TOKENS.contains(&tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps words to ids (unknown → UNK), keeps the first `max_tokens`, and
    /// frames with BOS/EOS.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], max_tokens: usize) -> EncodedCaption {
        let truncated = words.len() > max_tokens;
        let mut ids = Vec::with_capacity(words.len().min(max_tokens) + 2);
        ids.push(BOS);
        ids.extend(words.iter().take(max_tokens).map(|w| self.id(w.as_ref())));
        ids.push(EOS);
        EncodedCaption { ids, truncated }
    }

    /// Words for ids, skipping BOS/PAD and stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .filter(|&i| i != BOS && i != PAD)
            .take_while(|&i| i != EOS)
            .map(|i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// `{token: id}` JSON object (keys sorted).
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        Ok(serde_json::to_string_pretty(&map)? + "\n")
    }

    pub fn from_json(text: &str, min_count: usize) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (tok, id) in map {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| Error::Data(format!("vocabulary id {id} is not dense")))?;
            if slot.replace(tok).is_some() {
                return Err(Error::Data(format!("vocabulary id {id} assigned twice")));
            }
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Data("vocabulary ids are not dense".into()))?;
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self::from_tokens(tokens, min_count))
    }
}
