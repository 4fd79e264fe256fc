use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Surface forms of the reserved ids, in id order.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Splits caption text into tokens. Every text path in the crate goes through
/// here, so a different segmenter only needs to change this function.
pub fn split_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Bidirectional token/id map. Ids are dense in `[0, len)` and the four
/// special tokens always occupy ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized captions.
    ///
    /// Tokens seen at least `min_freq` times get ids in order of descending
    /// frequency, ties broken lexicographically, so the result does not depend
    /// on caption order. Tokens spelled like a special token are never added.
    pub fn build<S: AsRef<str>>(raw_captions: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if raw_captions.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for caption in raw_captions {
            for tok in caption {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|(tok, n)| *n >= min_freq && !SPECIAL_TOKENS.contains(tok)).collect();
        kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let tokens =
            SPECIAL_TOKENS.iter().copied().chain(kept.into_iter().map(|(t, _)| t)).map(str::to_owned).collect();
        Self::from_tokens(tokens)
    }

    /// Builds from whitespace-delimited caption texts.
    pub fn build_from_texts<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Self> {
        let captions: Vec<Vec<&str>> = texts.iter().map(|t| split_tokens(t.as_ref()).collect()).collect();
        Self::build(&captions, min_freq)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < NUM_SPECIAL || id_to_token[..NUM_SPECIAL].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::Malformed("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate().skip(NUM_SPECIAL) {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Malformed(format!("invalid token {tok:?} at id {id}")));
            }
            if token_to_id.insert(tok.clone(), id as u32).is_some() || SPECIAL_TOKENS.contains(&tok.as_str()) {
                return Err(Error::Malformed(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { token_to_id, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    /// Always false: the special tokens are always present.
    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of a regular token. Special surface forms are not looked up.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Maps text to `[BOS, ids.., EOS]`, unknown tokens to `UNK`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(split_tokens(text).map(|t| self.id(t).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Inverse of [`tokenize`](Self::tokenize): drops BOS/EOS/PAD and joins
    /// the rest with single spaces.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::UnknownId(id))?;
            if !matches!(id, PAD | BOS | EOS) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line, in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}
