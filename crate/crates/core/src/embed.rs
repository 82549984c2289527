//! Text embedders.
//!
//! The default is a signed feature-hashing bag of tokens: every lowercase
//! alphanumeric token is hashed with 64-bit FNV-1a (seed bytes first, then the
//! token bytes); the hash modulo `dim` picks a bucket and the top bit picks
//! the sign. The bucket vector is scaled to unit length. Equal texts embed
//! identically, texts sharing tokens have positive cosine, and the empty text
//! embeds to the zero vector.

use crate::math::l2_normalize;

pub const DEFAULT_EMBED_DIM: usize = 256;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM, seed: 0 }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(chunks: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for chunk in chunks {
        for &b in *chunk {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl HashEmbedder {
    /// `dim` must be at least 1.
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let seed = self.seed.to_le_bytes();
        for token in tokenize(text) {
            let h = fnv1a(&[&seed, token.as_bytes()]);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        l2_normalize(&mut v);
        v
    }
}
