use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const SEP_TOKEN: &str = "[SEP]";

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[MASK]", SEP_TOKEN];

/// Lowercased word-level vocabulary with reserved ids for PAD (0), UNK,
/// MASK and SEP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

/// Split into lowercase alphanumeric words; a literal `[SEP]` survives as one token.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == SEP_TOKEN {
            out.push(SEP_TOKEN.to_string());
            continue;
        }
        out.extend(
            chunk
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase),
        );
    }
    out
}

impl Vocabulary {
    /// Keep the `max_tokens` most frequent words (ties broken alphabetically).
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>, max_tokens: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in words(t) {
                if w != SEP_TOKEN {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().take(max_tokens).map(|(w, _)| w));
        Self::from(id_to_token)
    }

    /// Vocabulary with explicit ids. Ids below 4 are reserved; gaps are
    /// filled with `[unusedN]` placeholders.
    pub fn from_map(map: &HashMap<String, u32>) -> Result<Self> {
        let max = map.values().copied().max().unwrap_or(SEP_ID).max(SEP_ID);
        let mut id_to_token: Vec<Option<String>> = vec![None; max as usize + 1];
        for (i, r) in RESERVED.iter().enumerate() {
            id_to_token[i] = Some(r.to_string());
        }
        for (tok, &id) in map {
            if id <= SEP_ID {
                return Err(Error::Config(format!("token `{tok}` uses reserved id {id}")));
            }
            if id_to_token[id as usize].is_some() {
                return Err(Error::Config(format!("id {id} assigned twice")));
            }
            id_to_token[id as usize] = Some(tok.to_lowercase());
        }
        let filled: Vec<String> = id_to_token
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.unwrap_or_else(|| format!("[unused{i}]")))
            .collect();
        Ok(Self::from(filled))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }
}

/// One tokenized sequence of fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRow {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

/// Lowercase, split, map with UNK fallback, then truncate or right-pad with
/// PAD to exactly `len` positions.
pub fn tokenize(text: &str, vocab: &Vocabulary, len: usize) -> TokenRow {
    let mut ids: Vec<u32> = words(text).iter().map(|w| vocab.id(w)).take(len).collect();
    let real = ids.len();
    ids.resize(len, PAD_ID);
    let mut mask = vec![1u8; real];
    mask.resize(len, 0);
    TokenRow { ids, mask }
}

/// `[batch, len]` ids with the matching attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<u8>>,
    pub len: usize,
}

impl TokenBatch {
    pub fn from_rows(rows: Vec<TokenRow>) -> Result<Self> {
        let len = rows
            .first()
            .map(|r| r.ids.len())
            .ok_or_else(|| Error::dim("token_batch", "empty batch"))?;
        if len == 0 {
            return Err(Error::dim("token_batch", "zero-length rows"));
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for r in rows {
            if r.ids.len() != len || r.mask.len() != len {
                return Err(Error::dim("token_batch", "rows of unequal length"));
            }
            ids.push(r.ids);
            mask.push(r.mask);
        }
        Ok(Self { ids, mask, len })
    }

    pub fn encode<'a>(texts: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary, len: usize) -> Result<Self> {
        Self::from_rows(texts.into_iter().map(|t| tokenize(t, vocab, len)).collect())
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }
}
