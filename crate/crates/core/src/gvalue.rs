//! Pseudo-random binary g-values and their complementary counterparts.
//!
//! For a (seed, group, family) triple we derive one 64-bit key per block of
//! 64 layers. The g-value of token `x` at layer `l` (1-based) is bit
//! `(l - 1) % 64` of `mix64(block_key ^ (x + 1) * GOLDEN)` for block
//! `(l - 1) / 64`. A vocabulary-wide table for 64 layers therefore costs one
//! mixer call per token.
//!
//! Block keys: `mix64(seed ^ family_key)` where
//! `family_key = absorb(mix64(key ^ GROUP_DOMAIN), group * GROUP_STRIDE ^ tag)`,
//! further absorbed with the block index for blocks past the first. The base
//! family has tag 0; the complementary family reuses the base bits inverted.

use crate::keying::{absorb, mix64, SeedValue, GOLDEN};
use crate::types::{SecondFamily, TokenId, WatermarkConfig};

pub const GROUP_DOMAIN: u64 = 0x4756_414C_5545_5321; // "GVALUES!"
pub const GROUP_STRIDE: u64 = 0x0100_0000_0000_0001;
/// Variant tag of the independently keyed family used in the
/// "without complementary" ablation.
pub const RANDOM_FAMILY_TAG: u64 = 0x5241_4E44; // "RAND"

const BITS_PER_BLOCK: usize = 64;

/// Which of a group's two families a score refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// `g_j`, encodes bit value 0.
    Base,
    /// `1 - g_j`, encodes bit value 1.
    Complement,
    /// An independent family keyed by a variant tag.
    Independent(u64),
}

impl Family {
    /// The family encoding bit value 1 under `second`.
    pub fn for_one(second: SecondFamily) -> Family {
        match second {
            SecondFamily::Complementary => Family::Complement,
            SecondFamily::RandomIndependent => Family::Independent(RANDOM_FAMILY_TAG),
        }
    }

    /// The family selected for `bit`.
    pub fn for_bit(bit: u8, second: SecondFamily) -> Family {
        if bit == 0 {
            Family::Base
        } else {
            Family::for_one(second)
        }
    }
}

/// `k` groups of `m`-layer binary g-value families under one key.
#[derive(Debug, Clone)]
pub struct GValueFamilySet {
    key: u64,
    groups_k: usize,
    layers_m: usize,
}

impl GValueFamilySet {
    pub fn new(key: u64, groups_k: usize, layers_m: usize) -> Self {
        assert!(groups_k > 0 && layers_m > 0);
        GValueFamilySet {
            key,
            groups_k,
            layers_m,
        }
    }

    pub fn from_config(cfg: &WatermarkConfig) -> Self {
        Self::new(cfg.key, cfg.groups_k, cfg.layers_m)
    }

    pub fn groups(&self) -> usize {
        self.groups_k
    }

    pub fn layers(&self) -> usize {
        self.layers_m
    }

    fn blocks(&self) -> usize {
        self.layers_m.div_ceil(BITS_PER_BLOCK)
    }

    /// Keys for `group` (0-based) at this seed. `Complement` shares the base keys.
    pub fn family_keys(&self, seed: SeedValue, group: usize, family: Family) -> FamilyKeys {
        assert!(group < self.groups_k, "group {group} out of range");
        let tag = match family {
            Family::Base | Family::Complement => 0,
            Family::Independent(tag) => tag,
        };
        let family_key = absorb(
            mix64(self.key ^ GROUP_DOMAIN),
            (group as u64).wrapping_mul(GROUP_STRIDE) ^ tag,
        );
        let first = mix64(seed.0 ^ family_key);
        let blocks = (0..self.blocks())
            .map(|b| {
                if b == 0 {
                    first
                } else {
                    absorb(first, b as u64)
                }
            })
            .collect();
        FamilyKeys {
            blocks,
            layers_m: self.layers_m,
            invert: family == Family::Complement,
        }
    }

    /// `g_l(token, seed)` for 1-based `layer` and `group`.
    pub fn g(&self, token: TokenId, seed: SeedValue, layer: usize, group: usize) -> u8 {
        self.check_indices(layer, group);
        self.family_keys(seed, group - 1, Family::Base)
            .bit(token, layer - 1)
    }

    /// `1 - g(token, seed, layer, group)`.
    pub fn g_complement(&self, token: TokenId, seed: SeedValue, layer: usize, group: usize) -> u8 {
        self.check_indices(layer, group);
        self.family_keys(seed, group - 1, Family::Complement)
            .bit(token, layer - 1)
    }

    /// An independent Bernoulli(0.5) family distinguished by `variant_tag` (non-zero).
    pub fn random_independent_g(
        &self,
        token: TokenId,
        seed: SeedValue,
        layer: usize,
        group: usize,
        variant_tag: u64,
    ) -> u8 {
        assert!(variant_tag != 0, "tag 0 is the base family");
        self.check_indices(layer, group);
        self.family_keys(seed, group - 1, Family::Independent(variant_tag))
            .bit(token, layer - 1)
    }

    fn check_indices(&self, layer: usize, group: usize) {
        assert!(
            (1..=self.layers_m).contains(&layer),
            "layer {layer} outside 1..={}",
            self.layers_m
        );
        assert!(
            (1..=self.groups_k).contains(&group),
            "group {group} outside 1..={}",
            self.groups_k
        );
    }
}

/// Block keys of one family at one seed.
#[derive(Debug, Clone)]
pub struct FamilyKeys {
    blocks: Vec<u64>,
    layers_m: usize,
    invert: bool,
}

impl FamilyKeys {
    #[inline(always)]
    fn raw_word(&self, token: TokenId, block: usize) -> u64 {
        mix64(self.blocks[block] ^ (token.0 as u64 + 1).wrapping_mul(GOLDEN))
    }

    #[inline]
    fn block_mask(&self, block: usize) -> u64 {
        let remaining = self.layers_m - block * BITS_PER_BLOCK;
        if remaining >= BITS_PER_BLOCK {
            u64::MAX
        } else {
            (1u64 << remaining) - 1
        }
    }

    /// Layer bits of `token` for `block`, bit `i` is layer `64 * block + i` (0-based).
    #[inline]
    pub fn word(&self, token: TokenId, block: usize) -> u64 {
        let w = self.raw_word(token, block);
        let w = if self.invert { !w } else { w };
        w & self.block_mask(block)
    }

    /// g-value of `token` at 0-based `layer`.
    #[inline]
    pub fn bit(&self, token: TokenId, layer: usize) -> u8 {
        ((self.word(token, layer / BITS_PER_BLOCK) >> (layer % BITS_PER_BLOCK)) & 1) as u8
    }

    /// Number of layers at which `token` scores 1.
    #[inline]
    pub fn ones(&self, token: TokenId) -> u32 {
        (0..self.blocks.len())
            .map(|b| self.word(token, b).count_ones())
            .sum()
    }

    pub fn layers(&self) -> usize {
        self.layers_m
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Per-layer g-bits over the vocabulary.
    pub fn table(&self, vocab: usize) -> GTable {
        let blocks = self.blocks.len();
        let mut words = Vec::with_capacity(vocab * blocks);
        for x in 0..vocab as u32 {
            for b in 0..blocks {
                words.push(self.word(TokenId(x), b));
            }
        }
        GTable {
            words,
            blocks,
            layers_m: self.layers_m,
        }
    }
}

/// Dense g-bits for every (token, layer) of one family at one seed.
#[derive(Debug, Clone)]
pub struct GTable {
    words: Vec<u64>,
    blocks: usize,
    layers_m: usize,
}

impl GTable {
    pub fn vocab_size(&self) -> usize {
        self.words.len() / self.blocks
    }

    pub fn layers(&self) -> usize {
        self.layers_m
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Packed bits, `blocks` words per token.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline(always)]
    pub fn bit(&self, token: usize, layer: usize) -> bool {
        (self.words[token * self.blocks + layer / BITS_PER_BLOCK] >> (layer % BITS_PER_BLOCK)) & 1
            == 1
    }

    /// The table of the complementary family.
    pub fn complement(&self) -> GTable {
        let mut words = self.words.clone();
        for (i, w) in words.iter_mut().enumerate() {
            let block = i % self.blocks;
            let remaining = self.layers_m - block * BITS_PER_BLOCK;
            let mask = if remaining >= BITS_PER_BLOCK {
                u64::MAX
            } else {
                (1u64 << remaining) - 1
            };
            *w = !*w & mask;
        }
        GTable {
            words,
            blocks: self.blocks,
            layers_m: self.layers_m,
        }
    }

    /// Bits of one layer as a vector over the vocabulary.
    pub fn layer(&self, layer: usize) -> Vec<bool> {
        (0..self.vocab_size()).map(|x| self.bit(x, layer)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set() -> GValueFamilySet {
        GValueFamilySet::new(0xC0FFEE, 2, 30)
    }

    fn seeds(n: usize, stream: u64) -> Vec<SeedValue> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        (0..n).map(|_| SeedValue(rng.random())).collect()
    }

    fn correlation(a: &[u8], b: &[u8]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mut cov = 0.0;
        let (mut va, mut vb) = (0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            cov += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        cov / (va * vb).sqrt()
    }

    #[test]
    fn deterministic() {
        let s = set();
        let seed = SeedValue(12345);
        for layer in 1..=30 {
            assert_eq!(
                s.g(TokenId(7), seed, layer, 1),
                s.g(TokenId(7), seed, layer, 1)
            );
            assert_eq!(
                s.random_independent_g(TokenId(7), seed, layer, 2, RANDOM_FAMILY_TAG),
                s.random_independent_g(TokenId(7), seed, layer, 2, RANDOM_FAMILY_TAG)
            );
        }
    }

    #[test]
    fn complement_is_pointwise() {
        let s = set();
        let seed = SeedValue(99);
        for token in 0..16 {
            for layer in 1..=30 {
                for group in 1..=2 {
                    let g = s.g(TokenId(token), seed, layer, group);
                    let gc = s.g_complement(TokenId(token), seed, layer, group);
                    assert_eq!(g + gc, 1);
                }
            }
        }
    }

    #[test]
    fn bernoulli_half() {
        let s = set();
        for (layer, group) in [(1, 1), (30, 2)] {
            let ones: u64 = seeds(1_000_000, 5)
                .into_iter()
                .map(|r| s.g(TokenId(3), r, layer, group) as u64)
                .sum();
            let mean = ones as f64 / 1e6;
            assert!((0.4985..=0.5015).contains(&mean), "mean {mean}");
        }
        let ones: u64 = seeds(1_000_000, 6)
            .into_iter()
            .map(|r| s.random_independent_g(TokenId(3), r, 4, 1, RANDOM_FAMILY_TAG) as u64)
            .sum();
        let mean = ones as f64 / 1e6;
        assert!((0.4985..=0.5015).contains(&mean), "mean {mean}");
    }

    #[test]
    fn layers_groups_and_variants_uncorrelated() {
        let s = set();
        let rs = seeds(100_000, 7);
        let t = TokenId(11);
        let l1: Vec<u8> = rs.iter().map(|&r| s.g(t, r, 1, 1)).collect();
        let l2: Vec<u8> = rs.iter().map(|&r| s.g(t, r, 2, 1)).collect();
        let g2: Vec<u8> = rs.iter().map(|&r| s.g(t, r, 1, 2)).collect();
        let rnd: Vec<u8> = rs
            .iter()
            .map(|&r| s.random_independent_g(t, r, 1, 1, RANDOM_FAMILY_TAG))
            .collect();
        assert!(correlation(&l1, &l2).abs() < 0.01);
        assert!(correlation(&l1, &g2).abs() < 0.01);
        assert!(correlation(&l1, &rnd).abs() < 0.01);

        let comp: Vec<u8> = rs.iter().map(|&r| s.g_complement(t, r, 1, 1)).collect();
        assert_eq!(correlation(&l1, &comp), -1.0);
    }

    #[test]
    fn table_matches_pointwise_api() {
        let s = GValueFamilySet::new(3, 1, 70);
        let seed = SeedValue(0xABC);
        let keys = s.family_keys(seed, 0, Family::Base);
        let table = keys.table(20);
        let comp = table.complement();
        let comp_keys = s.family_keys(seed, 0, Family::Complement);
        for x in 0..20u32 {
            let mut ones = 0;
            for layer in 0..70 {
                let g = s.g(TokenId(x), seed, layer + 1, 1);
                ones += g as u32;
                assert_eq!(table.bit(x as usize, layer), g == 1);
                assert_eq!(comp.bit(x as usize, layer), g == 0);
                assert_eq!(comp_keys.bit(TokenId(x), layer), 1 - g);
            }
            assert_eq!(keys.ones(TokenId(x)), ones);
            assert_eq!(comp_keys.ones(TokenId(x)), 70 - ones);
        }
    }

    #[test]
    #[should_panic]
    fn layer_zero_rejected() {
        set().g(TokenId(0), SeedValue(0), 0, 1);
    }
}
