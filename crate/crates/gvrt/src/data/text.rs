//! Tokenization: lowercase whitespace split, reserved ids, deterministic
//! frequency-ordered vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids preceding real tokens.
pub const RESERVED: usize = 4;

/// Token table with reserved PAD/BOS/EOS/UNK ids. Construction is a pure
/// function of the corpus multiset: tokens with frequency >= `min_freq` get
/// ids `4..V` ordered by descending frequency, ties broken lexicographically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Lowercase whitespace tokenization used everywhere text enters the system.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(|t| t.to_lowercase()).collect()
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for tok in tokenize(sentence.as_ref()) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// BOS + token ids (UNK for unknown words) + EOS.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(sentence).iter().map(|t| self.id_of(t)));
        ids.push(EOS);
        ids
    }

    /// Space-joined tokens, reserved ids dropped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= RESERVED && t < self.size())
            .map(|&t| self.id_to_token[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}
