//! Per-step seeds from a sliding context window and the watermark key.
//!
//! Everything here is part of the on-disk compatibility contract: the mixer
//! constants, the domain salts and the warm-up sentinel. Changing any of them
//! invalidates all previously watermarked text.
//!
//! The mixer is the SplitMix64 finalizer (Stafford's "Mix13" variant):
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! A window `(x_{t-c}, .., x_{t-1})` is absorbed left to right:
//! `h_0 = mix(key ^ SEED_DOMAIN)`, `h_{i+1} = mix((h_i + GOLDEN) ^ x_i)`.
//! The seed is `h_c`. The candidate token never enters its own seed.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::types::TokenId;

/// Fractional part of the golden ratio, `floor(2^64 / phi)`.
pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
pub const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
pub const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

pub const SEED_DOMAIN: u64 = 0x5345_4544_5F57_494E; // "SEED_WIN"
pub const POSITION_SALT: u64 = 0x504F_5349_5449_4F4E; // "POSITION"

/// Fills the window when fewer than `c` tokens precede the current step.
pub const PAD_SENTINEL: u32 = u32::MAX;

#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

#[inline(always)]
pub(crate) fn absorb(state: u64, word: u64) -> u64 {
    mix64(state.wrapping_add(GOLDEN) ^ word)
}

/// A per-step pseudo-random seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedValue(pub u64);

/// The `c` tokens to the left of the current step, padded on the left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    tokens: Vec<u32>,
}

impl ContextWindow {
    pub fn new(tokens: Vec<u32>) -> Self {
        assert!(!tokens.is_empty(), "window size must be positive");
        ContextWindow { tokens }
    }

    /// The window preceding `history[len]`, i.e. built from the last `c`
    /// entries of `history`.
    pub fn preceding(history: &[TokenId], c: usize) -> Self {
        assert!(c > 0, "window size must be positive");
        let mut tokens = Vec::with_capacity(c);
        let have = history.len().min(c);
        tokens.resize(c - have, PAD_SENTINEL);
        tokens.extend(history[history.len() - have..].iter().map(|t| t.0));
        ContextWindow { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }
}

pub fn derive_seed(window: &ContextWindow, key: u64) -> SeedValue {
    SeedValue(seed_from_slice(&window.tokens, key))
}

#[inline]
fn seed_from_slice(tokens: &[u32], key: u64) -> u64 {
    tokens
        .iter()
        .fold(mix64(key ^ SEED_DOMAIN), |h, &t| absorb(h, t as u64))
}

/// Seed for step `t` of `tokens` without allocating a window.
#[inline]
pub fn seed_at(tokens: &[TokenId], t: usize, c: usize, key: u64) -> SeedValue {
    let mut h = mix64(key ^ SEED_DOMAIN);
    for i in 0..c {
        let token = (t + i).checked_sub(c).map_or(PAD_SENTINEL, |j| tokens[j].0);
        h = absorb(h, token as u64);
    }
    SeedValue(h)
}

/// Message position in `0..symbol_count` carried by the step with this seed.
pub fn assign_position(seed: SeedValue, key: u64, symbol_count: usize) -> usize {
    assert!(symbol_count > 0, "symbol count must be positive");
    let h = absorb(mix64(seed.0 ^ POSITION_SALT), key);
    (h % symbol_count as u64) as usize
}

/// True when `current` has already been used in this sequence. The caller
/// inserts `current` into `seen` afterwards.
pub fn seed_history_mask(seen: &HashSet<SeedValue>, current: SeedValue) -> bool {
    seen.contains(&current)
}
