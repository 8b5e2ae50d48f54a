//! Synthetic multimodal-like streams with planted token importance.
//!
//! Sequences alternate text-like and image-like spans. Text-like tokens are
//! always informative. Within each sequence's image-like positions, a fixed
//! fraction are redundant: near-duplicates drawn from a tiny pool of
//! background archetype ids that carry no information about the target. The
//! prediction target at every position is a fixed permutation image of the
//! most recent informative token's id, so informative tokens fully determine
//! their own target while redundant tokens' targets are unknowable from the
//! token alone. That makes learned importance directly auditable.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Background archetype ids reserved for redundant tokens.
pub const BACKGROUND_IDS: usize = 3;
/// Alternating span width within a sequence.
pub const SPAN_LEN: usize = 4;
/// Smallest vocabulary leaving a meaningful informative pool.
pub const MIN_VOCAB: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    TextLike,
    ImageLike,
}

#[derive(Clone, Copy, Debug)]
pub struct Token {
    pub id: usize,
    pub modality: Modality,
    pub informative: bool,
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub tokens: Vec<Token>,
    /// Next-token prediction target per position.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticStream {
    pub sequences: Vec<Sequence>,
    pub vocab: usize,
    pub redundancy: f64,
    /// Permutation over informative ids defining the targets.
    pub perm: Vec<usize>,
}

impl SyntheticStream {
    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Flatten a subset of sequences into parallel id/target/token lists.
    pub fn flatten(&self, seq_indices: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<Token>) {
        let mut ids = Vec::new();
        let mut targets = Vec::new();
        let mut tokens = Vec::new();
        for &si in seq_indices {
            let s = &self.sequences[si];
            for (tok, &tgt) in s.tokens.iter().zip(s.targets.iter()) {
                ids.push(tok.id);
                targets.push(tgt);
                tokens.push(*tok);
            }
        }
        (ids, targets, tokens)
    }
}

/// Generate a deterministic stream. `redundancy` is the exact fraction of
/// each sequence's image-like tokens drawn as background near-duplicates.
pub fn generate(
    seed: u64,
    n_sequences: usize,
    seq_len: usize,
    vocab: usize,
    redundancy: f64,
) -> Result<SyntheticStream> {
    if vocab < MIN_VOCAB {
        return Err(Error::Config(format!(
            "vocabulary of {vocab} is too small; need at least {MIN_VOCAB}"
        )));
    }
    if seq_len < 4 {
        return Err(Error::Config(format!("seq_len must be >= 4, got {seq_len}")));
    }
    if !(0.0..1.0).contains(&redundancy) {
        return Err(Error::Config(format!(
            "redundancy must be in [0,1), got {redundancy}"
        )));
    }

    let informative_pool: Vec<usize> = (BACKGROUND_IDS..vocab).collect();
    let rng = Rng::new(seed);

    // fixed target map: informative id -> permuted informative id
    let mut perm_rng = rng.derive(1);
    let mut perm = informative_pool.clone();
    perm_rng.shuffle(&mut perm);
    let target_of = |id: usize| perm[id - BACKGROUND_IDS];

    let mut seq_rng = rng.derive(2);
    let mut sequences = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        // modality layout: alternating spans, text-like first so the
        // leading token is always informative
        let modality: Vec<Modality> = (0..seq_len)
            .map(|t| {
                if (t / SPAN_LEN) % 2 == 0 {
                    Modality::TextLike
                } else {
                    Modality::ImageLike
                }
            })
            .collect();

        // choose exactly floor(redundancy * n_imagelike) redundant positions
        let mut image_positions: Vec<usize> = (0..seq_len)
            .filter(|&t| modality[t] == Modality::ImageLike)
            .collect();
        let n_redundant = (redundancy * image_positions.len() as f64).floor() as usize;
        seq_rng.shuffle(&mut image_positions);
        let redundant: Vec<usize> = image_positions[..n_redundant].to_vec();

        let mut tokens = Vec::with_capacity(seq_len);
        let mut targets = Vec::with_capacity(seq_len);
        let mut last_informative_id = 0usize;
        for (t, &m) in modality.iter().enumerate() {
            let is_redundant = redundant.contains(&t);
            let id = if is_redundant {
                seq_rng.below(BACKGROUND_IDS)
            } else {
                informative_pool[seq_rng.below(informative_pool.len())]
            };
            if !is_redundant {
                last_informative_id = id;
            }
            tokens.push(Token {
                id,
                modality: m,
                informative: !is_redundant,
            });
            targets.push(target_of(last_informative_id));
        }
        sequences.push(Sequence { tokens, targets });
    }

    Ok(SyntheticStream {
        sequences,
        vocab,
        redundancy,
        perm,
    })
}
