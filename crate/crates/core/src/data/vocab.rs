use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const MASK: TokenId = 2;

pub const PAD_TOKEN: &str = "[PAD]";
pub const EOS_TOKEN: &str = "[EOS]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Characters split off words as standalone tokens and re-attached to the
/// preceding word on detokenization.
const PUNCT: [char; 3] = [':', '?', ','];

/// Word-level vocabulary with a noun flag per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    noun: Vec<bool>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    nouns: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary: reserved tokens first, then `nouns`, then `words`.
    pub fn new<S: AsRef<str>>(nouns: &[S], words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = vec![PAD_TOKEN.into(), EOS_TOKEN.into(), MASK_TOKEN.into()];
        let mut noun = vec![false; 3];
        for n in nouns {
            tokens.push(n.as_ref().to_string());
            noun.push(true);
        }
        for w in words {
            tokens.push(w.as_ref().to_string());
            noun.push(false);
        }
        Self::from_parts(tokens, noun)
    }

    fn from_parts(tokens: Vec<String>, noun: Vec<bool>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[PAD] != PAD_TOKEN
            || tokens[EOS] != EOS_TOKEN
            || tokens[MASK] != MASK_TOKEN
        {
            return Err(Error::InvalidVocabulary(
                "reserved tokens must occupy ids 0..3 as [PAD], [EOS], [MASK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!("token {t:?} is empty or contains whitespace")));
            }
            if t.chars().count() > 1 && t.chars().any(|c| PUNCT.contains(&c)) {
                return Err(Error::InvalidVocabulary(format!("token {t:?} embeds punctuation")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, noun, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_noun(&self, id: TokenId) -> bool {
        self.noun.get(id).copied().unwrap_or(false)
    }

    pub fn noun_ids(&self) -> Vec<TokenId> {
        (0..self.len()).filter(|&i| self.noun[i]).collect()
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= MASK
    }

    /// Splits on whitespace, separates `:`, `?` and `,`, and maps each piece
    /// to its id. Every unknown piece is reported at once.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        let mut missing = Vec::new();
        for piece in split_words(text) {
            match self.id(piece) {
                Some(id) => ids.push(id),
                None => missing.push(piece.to_string()),
            }
        }
        if missing.is_empty() {
            Ok(ids)
        } else {
            Err(Error::OutOfVocabulary(missing))
        }
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id)?;
            let attach = t.len() == 1 && t.chars().all(|c| PUNCT.contains(&c));
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(t);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            nouns: (0..self.len())
                .filter(|&i| self.noun[i])
                .map(|i| self.tokens[i].clone())
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })?;
        Self::from_json_parts(file.tokens, &file.nouns)
    }

    pub(crate) fn from_json_parts(tokens: Vec<String>, nouns: &[String]) -> Result<Self> {
        let noun: Vec<bool> = tokens.iter().map(|t| nouns.contains(t)).collect();
        let v = Self::from_parts(tokens, noun)?;
        if let Some(bad) = nouns.iter().find(|n| v.id(n).is_none()) {
            return Err(Error::InvalidVocabulary(format!("noun {bad:?} is not a token")));
        }
        Ok(v)
    }

    pub(crate) fn noun_words(&self) -> Vec<String> {
        self.noun_ids().into_iter().map(|i| self.tokens[i].clone()).collect()
    }
}

fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        while let Some(c) = rest.chars().next().filter(|c| PUNCT.contains(c)) {
            out.push(&rest[..c.len_utf8()]);
            rest = &rest[c.len_utf8()..];
        }
        let mut tail = Vec::new();
        while let Some(c) = rest.chars().next_back().filter(|c| PUNCT.contains(c)) {
            let at = rest.len() - c.len_utf8();
            tail.push(&rest[at..]);
            rest = &rest[..at];
        }
        if !rest.is_empty() {
            out.push(rest);
        }
        out.extend(tail.into_iter().rev());
    }
    out
}
