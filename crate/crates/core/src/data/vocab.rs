//! Corpus-built vocabulary and fixed-length tokenization.
//!
//! Tokens are maximal runs of alphanumeric characters after lowercasing;
//! whitespace and punctuation act as separators. Ids are dense with
//! reserved PAD=0 and UNK=1, assigned by descending frequency and then
//! lexicographically, so a given corpus always yields the same table.

use std::collections::HashMap;

use super::Corpus;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id-ordered token list, the checkpointable form.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err("vocab token list must start with <pad>, <unk>".into());
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            tokens,
        })
    }
}

/// Lowercase and split into alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Build the vocabulary from every resolved text in the corpus. Tokens
/// seen fewer than `min_freq` times map to UNK.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocab {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for record in &corpus.records {
        if let Some(text) = &record.text {
            for token in tokenize(text) {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(_, count)| *count >= min_freq.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(entries.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens).expect("reserved tokens are in place")
}

/// Ids and mask, both exactly `max_len` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
}

/// Map the first `max_len` tokens to ids (UNK for unknown words) and
/// right-pad with PAD; the mask is 1 on real tokens, 0 on padding.
pub fn tokenize_pad(text: &str, vocab: &Vocab, max_len: usize) -> TokenizedText {
    let mut ids = Vec::with_capacity(max_len);
    let mut mask = Vec::with_capacity(max_len);
    for token in tokenize(text).into_iter().take(max_len) {
        ids.push(vocab.id(&token));
        mask.push(1);
    }
    while ids.len() < max_len {
        ids.push(PAD_ID);
        mask.push(0);
    }
    TokenizedText { ids, mask }
}
