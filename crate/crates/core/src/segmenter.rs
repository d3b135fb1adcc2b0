//! Byte-level tokenizer and sentence-aware segmentation into runs of at most
//! `S` tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const SEP: TokenId = 259;

/// Number of ids the tokenizer can produce: 256 bytes plus four specials.
pub const TOKENIZER_VOCAB: usize = 260;

/// One token per byte; ids 256..260 are reserved for specials.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        text.iter().map(|&b| TokenId::from(b)).collect()
    }

    pub fn encode_str(&self, text: &str) -> Vec<TokenId> {
        self.encode(text.as_bytes())
    }

    /// Byte tokens map back to their byte; special ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }

    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }

    pub fn is_special(id: TokenId) -> bool {
        (256..TOKENIZER_VOCAB as TokenId).contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub max_segment_tokens: usize,
    pub boundary_chars: Vec<u8>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            max_segment_tokens: 20,
            boundary_chars: vec![b'.', b'!', b'?', b'\n'],
        }
    }
}

impl SegmentationConfig {
    pub fn with_max_tokens(max_segment_tokens: usize) -> Self {
        Self {
            max_segment_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_segment_tokens < 2 {
            return Err(Error::Config(format!(
                "max_segment_tokens must be at least 2, got {}",
                self.max_segment_tokens
            )));
        }
        Ok(())
    }

    fn is_boundary(&self, id: TokenId) -> bool {
        id < 256 && self.boundary_chars.contains(&(id as u8))
    }
}

/// A run of consecutive context tokens. `origin_span` is the half-open token
/// range in the source sequence, which for byte tokens is also the byte range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub token_ids: Vec<TokenId>,
    pub origin_span: (usize, usize),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Splits after every boundary byte (punctuation attaches to the sentence it
/// ends); any sentence longer than `S` is hard-split into chunks of exactly
/// `S`, the last chunk possibly shorter. Whitespace following a boundary byte
/// opens the next segment.
pub fn segment(token_ids: &[TokenId], cfg: &SegmentationConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    if token_ids.is_empty() {
        return Err(Error::input("cannot segment an empty token sequence"));
    }
    let cap = cfg.max_segment_tokens;

    let mut segments = Vec::new();
    let mut emit = |s: usize, e: usize| {
        let mut s = s;
        while s < e {
            let end = (s + cap).min(e);
            segments.push(Segment {
                token_ids: token_ids[s..end].to_vec(),
                origin_span: (s, end),
            });
            s = end;
        }
    };
    let mut start = 0;
    for (i, &id) in token_ids.iter().enumerate() {
        if cfg.is_boundary(id) {
            emit(start, i + 1);
            start = i + 1;
        }
    }
    emit(start, token_ids.len());
    Ok(segments)
}
