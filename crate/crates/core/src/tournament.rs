//! Tournament sampling over binary g-values.
//!
//! [`vectorized_multi_layer`] is the production path: the exact law of the
//! tournament winner in `O(m * |V|)`. [`tournament_sample`] runs the literal
//! elimination over `N^m` i.i.d. candidates and exists to check it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gvalue::GTable;
use crate::types::{ProbabilityDistribution, TokenId};

/// Largest candidate pool the literal oracle will build.
pub const ORACLE_MAX_CANDIDATES: usize = 1 << 20;

/// Layer-wise g-bits already specialized to one seed, group and message bit.
#[derive(Debug, Clone)]
pub struct TournamentSpec {
    /// `layers[l][x]` is the g-value of token `x` at layer `l + 1`.
    pub layers: Vec<Vec<bool>>,
    pub leaves_n: usize,
}

impl TournamentSpec {
    pub fn new(layers: Vec<Vec<bool>>, leaves_n: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "tournament needs at least one layer".into(),
            ));
        }
        if leaves_n < 2 {
            return Err(Error::InvalidConfig(format!(
                "tournament needs at least 2 leaves per match, got {leaves_n}"
            )));
        }
        let vocab = layers[0].len();
        if let Some(bad) = layers.iter().find(|l| l.len() != vocab) {
            return Err(Error::VectorLength {
                expected: vocab,
                actual: bad.len(),
            });
        }
        Ok(TournamentSpec { layers, leaves_n })
    }

    pub fn layers_m(&self) -> usize {
        self.layers.len()
    }

    /// `N^m`, or `None` past the oracle guard.
    pub fn candidate_count(&self) -> Option<usize> {
        let mut total = 1usize;
        for _ in 0..self.layers.len() {
            total = total.checked_mul(self.leaves_n)?;
            if total > ORACLE_MAX_CANDIDATES {
                return None;
            }
        }
        Some(total)
    }
}

/// Repeated literal tournaments over one distribution.
pub struct TournamentOracle<'a> {
    spec: &'a TournamentSpec,
    cumulative: Vec<f64>,
    candidates: usize,
    pool: Vec<u32>,
    winners: Vec<usize>,
}

impl<'a> TournamentOracle<'a> {
    pub fn new(dist: &ProbabilityDistribution, spec: &'a TournamentSpec) -> Result<Self> {
        if spec.layers[0].len() != dist.vocab_size() {
            return Err(Error::VectorLength {
                expected: dist.vocab_size(),
                actual: spec.layers[0].len(),
            });
        }
        let candidates = spec.candidate_count().ok_or(Error::TournamentTooLarge {
            leaves: spec.leaves_n,
            layers: spec.layers_m(),
        })?;
        let mut acc = 0.0;
        let cumulative = dist
            .probs()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(TournamentOracle {
            spec,
            cumulative,
            candidates,
            pool: Vec::with_capacity(candidates),
            winners: Vec::with_capacity(spec.leaves_n),
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        // First index whose cumulative mass exceeds u; it always has positive mass.
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.cumulative.len() - 1) as u32
    }

    /// One full elimination: `N^m` draws, then `m` rounds of `N`-way matches.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> TokenId {
        self.pool.clear();
        for _ in 0..self.candidates {
            let x = self.draw(rng);
            self.pool.push(x);
        }
        let n = self.spec.leaves_n;
        let mut len = self.candidates;
        for layer in &self.spec.layers {
            let groups = len / n;
            for j in 0..groups {
                let group = &self.pool[j * n..(j + 1) * n];
                let best = group.iter().map(|&y| layer[y as usize]).max().unwrap();
                self.winners.clear();
                self.winners
                    .extend((0..n).filter(|&i| layer[group[i] as usize] == best));
                let pick = self.winners[rng.random_range(0..self.winners.len())];
                self.pool[j] = group[pick];
            }
            len = groups;
        }
        debug_assert_eq!(len, 1);
        TokenId(self.pool[0])
    }
}

/// Literal tournament with ties broken uniformly over the tied list.
pub fn tournament_sample(
    dist: &ProbabilityDistribution,
    spec: &TournamentSpec,
    rng_seed: u64,
) -> Result<TokenId> {
    let mut oracle = TournamentOracle::new(dist, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(oracle.sample(&mut rng))
}

/// Rescaling factors of one binary layer, indexed by g-value.
///
/// `q(x) = p(x) * p0^(N-1)` when `g(x) = 0` and
/// `q(x) = p(x) * (1 - p0^N) / (1 - p0)` when `g(x) = 1`, with `p0` the mass on
/// `g = 0`. The second factor is evaluated as the geometric sum
/// `1 + p0 + .. + p0^(N-1)`, which stays accurate when `1 - p0` is tiny and is
/// finite when no mass has `g = 1`.
fn layer_factors(mass: [f64; 2], leaves_n: usize) -> [f64; 2] {
    let total = mass[0] + mass[1];
    let p0 = if total > 0.0 { mass[0] / total } else { 0.0 };
    let mut factor0 = 1.0;
    let mut factor1 = 0.0;
    for _ in 0..leaves_n - 1 {
        factor1 += factor0;
        factor0 *= p0;
    }
    // factor0 = p0^(N-1), factor1 = sum_{i<N-1} p0^i; one more term completes it.
    factor1 += factor0;
    [factor0, factor1]
}

/// Applies `layers` tournament layers in place. `words` holds `blocks` packed
/// words per token; bit `l % 64` of word `l / 64` is the g-value at layer `l`.
/// Each rescaling pass also accumulates the next layer's masses.
fn run_layers(probs: &mut [f64], words: &[u64], blocks: usize, layers: usize, leaves_n: usize) {
    debug_assert_eq!(words.len(), probs.len() * blocks);
    if layers == 0 {
        return;
    }
    let bit = |w: &[u64], l: usize| ((w[l / 64] >> (l % 64)) & 1) as usize;
    let mut sums = [0.0; 2];
    for (&p, w) in probs.iter().zip(words.chunks_exact(blocks)) {
        sums[bit(w, 0)] += p;
    }
    for l in 0..layers {
        let factors = layer_factors(sums, leaves_n);
        let next = l + 1 < layers;
        sums = [0.0; 2];
        for (p, w) in probs.iter_mut().zip(words.chunks_exact(blocks)) {
            let v = *p * factors[bit(w, l)];
            // Losers of many layers underflow; subnormal arithmetic is slow,
            // and mass below 1e-308 is irrelevant after normalization.
            let v = if v < f64::MIN_POSITIVE { 0.0 } else { v };
            *p = v;
            if next {
                sums[bit(w, l + 1)] += v;
            }
        }
    }
}

/// Packs `layers[l][x]` into per-token words.
fn pack(layers: &[Vec<bool>]) -> (Vec<u64>, usize) {
    let vocab = layers.first().map_or(0, Vec::len);
    let blocks = layers.len().div_ceil(64).max(1);
    let mut words = vec![0u64; vocab * blocks];
    for (l, layer) in layers.iter().enumerate() {
        for (x, &b) in layer.iter().enumerate() {
            words[x * blocks + l / 64] |= (b as u64) << (l % 64);
        }
    }
    (words, blocks)
}

fn check_len(dist: &ProbabilityDistribution, len: usize) -> Result<()> {
    if dist.vocab_size() != len {
        return Err(Error::VectorLength {
            expected: dist.vocab_size(),
            actual: len,
        });
    }
    Ok(())
}

pub fn vectorized_single_layer(
    dist: &ProbabilityDistribution,
    g_bits: &[bool],
    leaves_n: usize,
) -> Result<ProbabilityDistribution> {
    check_len(dist, g_bits.len())?;
    if leaves_n < 2 {
        return Err(Error::InvalidConfig("leaves_n must be at least 2".into()));
    }
    let mut probs = dist.probs().to_vec();
    let (words, blocks) = pack(std::slice::from_ref(&g_bits.to_vec()));
    run_layers(&mut probs, &words, blocks, 1, leaves_n);
    Ok(ProbabilityDistribution::from_vec_unchecked(probs))
}

pub fn vectorized_multi_layer(
    dist: &ProbabilityDistribution,
    g_per_layer: &[Vec<bool>],
    leaves_n: usize,
) -> Result<ProbabilityDistribution> {
    if g_per_layer.is_empty() {
        return Err(Error::InvalidConfig("at least one layer required".into()));
    }
    if leaves_n < 2 {
        return Err(Error::InvalidConfig("leaves_n must be at least 2".into()));
    }
    for layer in g_per_layer {
        check_len(dist, layer.len())?;
    }
    let mut probs = dist.probs().to_vec();
    let (words, blocks) = pack(g_per_layer);
    run_layers(&mut probs, &words, blocks, g_per_layer.len(), leaves_n);
    Ok(ProbabilityDistribution::from_vec_unchecked(probs))
}

/// [`vectorized_multi_layer`] reading bits straight from a [`GTable`].
pub fn vectorized_table(
    dist: &ProbabilityDistribution,
    table: &GTable,
    leaves_n: usize,
) -> ProbabilityDistribution {
    assert_eq!(dist.vocab_size(), table.vocab_size());
    assert!(leaves_n >= 2);
    let mut probs = dist.probs().to_vec();
    run_layers(
        &mut probs,
        table.words(),
        table.blocks(),
        table.layers(),
        leaves_n,
    );
    ProbabilityDistribution::from_vec_unchecked(probs)
}
