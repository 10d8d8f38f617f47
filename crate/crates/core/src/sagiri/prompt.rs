//! Hashed-vocabulary prompt embedding.
//!
//! Text is lowercased and split on whitespace; each token hashes into rows
//! `1..vocab` of a learned table. Row 0 is the null embedding used for empty
//! prompts and for padding.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{name_hash, Init, Vb};

pub const NULL_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// Token ids, padded with [`NULL_TOKEN`] to the encoder's length.
    pub tokens: Vec<u32>,
    pub pooled: Vec<f32>,
}

pub fn tokenize(text: &str, vocab: usize, max_tokens: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = text
        .to_lowercase()
        .split_whitespace()
        .take(max_tokens)
        .map(|tok| 1 + (name_hash(tok) % (vocab as u64 - 1)) as u32)
        .collect();
    ids.resize(max_tokens, NULL_TOKEN);
    ids
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    table: Tensor,
    vocab: usize,
    max_tokens: usize,
}

impl PromptEncoder {
    pub fn new(vb: &Vb, vocab: usize, dim: usize, max_tokens: usize) -> Result<Self> {
        if vocab < 2 || max_tokens == 0 {
            return Err(Error::InvalidConfig("prompt vocab must be >= 2 and max_tokens >= 1".into()));
        }
        Ok(Self {
            table: vb.get("embedding", &[vocab, dim], Init::Normal(1.0))?,
            vocab,
            max_tokens,
        })
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.vocab, self.max_tokens)
    }

    /// Token embeddings `(B, max_tokens, dim)` for a batch of prompts.
    pub fn context(&self, prompts: &[&str]) -> Result<Tensor> {
        let ids: Vec<u32> = prompts.iter().flat_map(|p| self.tokenize(p)).collect();
        let idx = Tensor::from_vec(ids, prompts.len() * self.max_tokens, self.table.device())?;
        let dim = self.table.dim(1)?;
        Ok(self
            .table
            .index_select(&idx, 0)?
            .reshape((prompts.len(), self.max_tokens, dim))?)
    }

    /// Mean of the token embeddings of the words present; the null row for "".
    pub fn embed(&self, text: &str) -> Result<PromptEmbedding> {
        let tokens = self.tokenize(text);
        let used: Vec<u32> = tokens.iter().copied().filter(|&t| t != NULL_TOKEN).collect();
        let used = if used.is_empty() { vec![NULL_TOKEN] } else { used };
        let n = used.len();
        let idx = Tensor::from_vec(used, n, self.table.device())?;
        let pooled = self
            .table
            .index_select(&idx, 0)?
            .mean(D::Minus2)?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?;
        Ok(PromptEmbedding { tokens, pooled })
    }

    pub fn null_embedding(&self) -> Result<Vec<f32>> {
        Ok(self.table.get(0)?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?)
    }
}
