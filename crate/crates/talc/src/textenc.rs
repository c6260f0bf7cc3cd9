//! Tokenization and embedding of scene descriptions.
//!
//! A lowercase word-level tokenizer feeds a learned token-embedding table
//! plus learned positional offsets, producing an `s x d` embedding matrix per
//! caption together with a validity mask. Cross-attention later uses these
//! matrices as key/value banks; padded positions are masked out there. Three
//! ids are reserved: PAD=0, UNK=1, and NULL=2, the learned empty-caption row
//! used as the unconditional branch for classifier-free guidance.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use crate::error::{Result, TalcError};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NULL_ID: usize = 2;
pub const RESERVED_TOKENS: usize = 3;

/// Lowercase alphanumeric word splitter. Total: every string tokenizes.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Dense token -> id map over a corpus, stable under file round-trips.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from corpus text; ids are assigned in sorted token order so the
    /// same corpus always yields the same table.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut words: Vec<String> = corpus.into_iter().flat_map(|s| tokenize(s)).collect();
        words.sort();
        words.dedup();
        let mut token_to_id = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            token_to_id.insert(w.clone(), RESERVED_TOKENS + i);
        }
        Vocabulary {
            token_to_id,
            id_to_token: words,
        }
    }

    /// Total id space including the reserved ids.
    pub fn size(&self) -> usize {
        RESERVED_TOKENS + self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn encode_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_of(t)).collect()
    }

    /// One token per line; line number = id - reserved offset.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Vocabulary> {
        let mut token_to_id = BTreeMap::new();
        let mut id_to_token = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() {
                return Err(TalcError::Format(format!(
                    "vocabulary line {} is empty",
                    i + 1
                )));
            }
            if token_to_id
                .insert(tok.to_string(), RESERVED_TOKENS + i)
                .is_some()
            {
                return Err(TalcError::Format(format!(
                    "vocabulary token {tok:?} repeated"
                )));
            }
            id_to_token.push(tok.to_string());
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        Vocabulary::from_file_string(&std::fs::read_to_string(path)?)
    }

    /// FNV-1a over the file representation; stored in checkpoint headers to
    /// detect checkpoint/vocabulary mismatches.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_file_string().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Learned embedding parameters: a `V x d` token table and an `s x d`
/// positional table.
#[derive(Debug, Clone)]
pub struct TextEncParams {
    pub token_table: Tensor,
    pub pos_table: Tensor,
    /// Fixed caption length s (tokens are truncated/padded to this).
    pub max_tokens: usize,
    pub dim: usize,
}

impl TextEncParams {
    pub fn init(vocab_size: usize, max_tokens: usize, dim: usize, rng: &mut Rng) -> Self {
        let scale = 0.1;
        let token_data: Vec<f64> = rng
            .fill_normal(vocab_size * dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let pos_data: Vec<f64> = rng
            .fill_normal(max_tokens * dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        TextEncParams {
            token_table: Tensor::param(vec![vocab_size, dim], token_data).unwrap(),
            pos_table: Tensor::param(vec![max_tokens, dim], pos_data).unwrap(),
            max_tokens,
            dim,
        }
    }
}

/// An encoded caption: `s x d` token embeddings plus a mask marking real
/// tokens. Masked (PAD) positions never receive attention weight.
#[derive(Debug, Clone)]
pub struct CaptionEmbedding {
    pub tokens: Tensor,
    pub mask: Vec<bool>,
    /// True for the reserved empty-caption embedding.
    pub is_null: bool,
}

/// Encode a caption into an embedding matrix. Unknown words map to UNK. Pass
/// `null` to request the reserved empty-caption embedding instead of text.
pub fn encode_caption(
    text: &str,
    null: bool,
    vocab: &Vocabulary,
    params: &TextEncParams,
) -> Result<CaptionEmbedding> {
    let ids: Vec<usize> = if null {
        vec![NULL_ID]
    } else {
        let ids = vocab.encode_ids(text);
        if ids.is_empty() {
            return Err(TalcError::Usage(
                "cannot encode an empty caption (use the null embedding)".into(),
            ));
        }
        ids
    };
    let s = params.max_tokens;
    let k = ids.len().min(s);
    let real = params
        .token_table
        .gather_rows(&ids[..k])?
        .add(&params.pos_table.slice_rows(0, k)?)?;
    let tokens = if k < s {
        let pad = Tensor::zeros(vec![s - k, params.dim]);
        Tensor::concat_rows(&[&real, &pad])?
    } else {
        real
    };
    let mut mask = vec![false; s];
    mask[..k].iter_mut().for_each(|m| *m = true);
    Ok(CaptionEmbedding {
        tokens,
        mask,
        is_null: null,
    })
}

/// Per-frame conditioning: each of the L frames references one caption
/// embedding (the key/value bank its spatial features attend to).
#[derive(Debug, Clone)]
pub struct FrameConditioning {
    pub per_frame: Vec<Rc<CaptionEmbedding>>,
}

impl FrameConditioning {
    pub fn frames(&self) -> usize {
        self.per_frame.len()
    }
}

/// Repeat one caption embedding across all L frames.
pub fn repeat_conditioning(emb: Rc<CaptionEmbedding>, frames: usize) -> Result<FrameConditioning> {
    if frames == 0 {
        return Err(TalcError::Usage(
            "repeat_conditioning: need at least one frame".into(),
        ));
    }
    Ok(FrameConditioning {
        per_frame: vec![emb; frames],
    })
}
