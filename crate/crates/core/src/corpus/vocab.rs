use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const BOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<mask>", "<bos>", "<unk>"];

/// Dense token ids with four fixed special entries at the front.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when it is out of vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds a vocabulary from its full token list, specials included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::config("vocabulary", "missing the special tokens"));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::config("vocabulary", "duplicate tokens"));
        }
        Ok(Self { tokens, index })
    }
}

/// Keeps the most frequent tokens (ties broken lexicographically) up to `max_size`
/// entries including the four specials.
pub fn build_vocabulary<'a, I, S>(streams: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    if max_size < SPECIALS.len() + 1 {
        return Err(Error::config(
            "vocab_size",
            format!("{max_size} leaves no room beyond the {} specials", SPECIALS.len()),
        ));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut seen_any = false;
    for stream in streams {
        for tok in stream {
            seen_any = true;
            let tok = tok.as_ref();
            if !SPECIALS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if !seen_any {
        return Err(Error::Empty("token stream"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens: Vec<String> = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(
            ranked
                .into_iter()
                .take(max_size - SPECIALS.len())
                .map(|(t, _)| t.to_string()),
        )
        .collect();
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary { tokens, index })
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "for", "with", "from",
    "by", "into", "onto", "then", "is", "are", "was", "were", "be", "it", "its", "his", "her",
    "their", "he", "she", "they", "this", "that", "there", "as", "up", "down", "out", "again",
];

/// Fallback importance flags for corpora without annotations: non-stopwords are important.
pub fn stopword_importance<S: AsRef<str>>(tokens: &[S]) -> Vec<bool> {
    tokens
        .iter()
        .map(|t| !STOPWORDS.contains(&t.as_ref().to_lowercase().as_str()))
        .collect()
}
