//! Message embedding: seed, position and symbol per step, then the
//! watermarked next-token distribution and the emitted token.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gvalue::{Family, GValueFamilySet};
use crate::keying::{absorb, assign_position, mix64, seed_at, seed_history_mask, SeedValue};
use crate::tournament::vectorized_table;
use crate::types::{
    bits_to_symbols, entropy, normalize, BitMessage, GValueMode, LambdaMode,
    ProbabilityDistribution, SymbolMessage, TokenId, TokenSequence, WatermarkConfig,
};

/// Anything that can propose a next-token distribution from a token history.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, history: &[TokenId]) -> Result<ProbabilityDistribution>;

    /// Generation stops after this token is emitted.
    fn end_token(&self) -> Option<TokenId> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub max_new_tokens: usize,
    /// The end token is suppressed until this many tokens have been generated.
    pub min_new_tokens: usize,
    /// 0 disables the filter.
    pub no_repeat_ngram: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            max_new_tokens: 256,
            min_new_tokens: 64,
            no_repeat_ngram: 4,
        }
    }
}

/// What happened at one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub seed: SeedValue,
    pub position: usize,
    /// The `k`-bit symbol targeted at this step.
    pub symbol: u32,
    /// Entropy of the base distribution, nats.
    pub entropy: f64,
    pub lambda: f64,
    pub token: TokenId,
    /// Repeated seed in non-distortionary mode; sampled from the base model.
    pub masked: bool,
    /// KL(watermarked || base) at this step, nats.
    pub kl: f64,
}

pub fn lambda_factor(dist: &ProbabilityDistribution, cfg: &WatermarkConfig) -> f64 {
    match cfg.lambda_mode {
        LambdaMode::Entropy => cfg.alpha * cfg.activation.apply(entropy(dist)),
        LambdaMode::Fixed(v) => v,
    }
}

/// Binary step: the `m`-layer tournament under `g` for bit 0 or under the
/// second family (normally `1 - g`) for bit 1.
pub fn embed_step_k1(
    dist: &ProbabilityDistribution,
    seed: SeedValue,
    bit: u8,
    cfg: &WatermarkConfig,
) -> ProbabilityDistribution {
    let families = GValueFamilySet::new(cfg.key, 1, cfg.layers_m);
    let family = Family::for_bit(bit, cfg.second_family);
    let table = families
        .family_keys(seed, 0, family)
        .table(dist.vocab_size());
    vectorized_table(dist, &table, cfg.leaves_n)
}

/// Unnormalized `k`-group scores
/// `sum_j [b_j qbar_j + (1 - b_j) q_j] - lambda * sum_j [b_j q_j + (1 - b_j) qbar_j]`.
///
/// `components[j] = (q_j, qbar_j)`; `symbol_bits[j]` is `b_j`.
pub fn combine_k_scores(
    components: &[(ProbabilityDistribution, ProbabilityDistribution)],
    symbol_bits: &[u8],
    lambda: f64,
) -> Result<Vec<f64>> {
    if components.len() != symbol_bits.len() {
        return Err(Error::VectorLength {
            expected: components.len(),
            actual: symbol_bits.len(),
        });
    }
    let Some((first, _)) = components.first() else {
        return Err(Error::Empty);
    };
    let vocab = first.vocab_size();
    let mut scores = vec![0.0; vocab];
    for ((q, q_bar), &bit) in components.iter().zip(symbol_bits) {
        for d in [q, q_bar] {
            if d.vocab_size() != vocab {
                return Err(Error::VectorLength {
                    expected: vocab,
                    actual: d.vocab_size(),
                });
            }
        }
        let (favored, opposed) = if bit == 0 { (q, q_bar) } else { (q_bar, q) };
        for ((s, &f), &o) in scores.iter_mut().zip(favored.probs()).zip(opposed.probs()) {
            *s += f - lambda * o;
        }
    }
    Ok(scores)
}

/// Watermarked distribution for one step targeting `symbol`.
///
/// `k = 1` follows the plain binary tournament; `k >= 2` combines the `2k`
/// component tournaments and normalizes. Returns the distribution and `lambda`.
pub fn watermark_step(
    base: &ProbabilityDistribution,
    seed: SeedValue,
    symbol: u32,
    cfg: &WatermarkConfig,
    families: &GValueFamilySet,
) -> Result<(ProbabilityDistribution, f64)> {
    let k = cfg.groups_k;
    let lambda = lambda_factor(base, cfg);
    if k == 1 {
        return Ok((embed_step_k1(base, seed, symbol as u8 & 1, cfg), lambda));
    }
    let vocab = base.vocab_size();
    let second = Family::for_one(cfg.second_family);
    let mut components = Vec::with_capacity(k);
    let mut bits = Vec::with_capacity(k);
    for j in 0..k {
        let base_table = families.family_keys(seed, j, Family::Base).table(vocab);
        let second_table = match second {
            Family::Complement => base_table.complement(),
            other => families.family_keys(seed, j, other).table(vocab),
        };
        let q = vectorized_table(base, &base_table, cfg.leaves_n);
        let q_bar = vectorized_table(base, &second_table, cfg.leaves_n);
        components.push((q, q_bar));
        bits.push(((symbol >> (k - 1 - j)) & 1) as u8);
    }
    let scores = combine_k_scores(&components, &bits, lambda)?;
    Ok((
        normalize_on_support(base, &scores, cfg.score_floor_eps)?,
        lambda,
    ))
}

/// Clamps scores to `floor` and normalizes, keeping tokens the base model
/// rules out at exactly zero.
fn normalize_on_support(
    base: &ProbabilityDistribution,
    scores: &[f64],
    floor: f64,
) -> Result<ProbabilityDistribution> {
    let dist = normalize(scores, floor)?;
    if base.probs().iter().all(|&p| p > 0.0) {
        return Ok(dist);
    }
    let mut probs = dist.into_vec();
    for (q, &p) in probs.iter_mut().zip(base.probs()) {
        if p == 0.0 {
            *q = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    for q in &mut probs {
        *q /= total;
    }
    Ok(ProbabilityDistribution::from_vec_unchecked(probs))
}

/// Zeroes tokens that would complete an `n`-gram already present in `history`.
/// Falls back to `dist` unchanged if nothing would survive.
pub fn no_repeat_ngram_filter(
    history: &[TokenId],
    dist: &ProbabilityDistribution,
    n: usize,
) -> ProbabilityDistribution {
    if n == 0 || history.len() + 1 < n {
        return dist.clone();
    }
    let prefix = &history[history.len() + 1 - n..];
    let mut banned = HashSet::new();
    for window in history.windows(n) {
        if &window[..n - 1] == prefix {
            banned.insert(window[n - 1]);
        }
    }
    if banned.is_empty() {
        return dist.clone();
    }
    let mut probs = dist.probs().to_vec();
    for t in &banned {
        probs[t.index()] = 0.0;
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return dist.clone();
    }
    for p in &mut probs {
        *p /= total;
    }
    ProbabilityDistribution::from_vec_unchecked(probs)
}

fn suppress_token(dist: ProbabilityDistribution, token: TokenId) -> ProbabilityDistribution {
    let p = dist.prob(token);
    if p == 0.0 || p >= 1.0 {
        return dist;
    }
    let mut probs = dist.into_vec();
    probs[token.index()] = 0.0;
    let total = 1.0 - p;
    for q in &mut probs {
        *q /= total;
    }
    ProbabilityDistribution::from_vec_unchecked(probs)
}

const STEP_DOMAIN: u64 = 0x5354_4550_5F52_4E47; // "STEP_RNG"

/// The uniform variate used to sample step `t` of a generation with `rng_seed`.
pub fn step_uniform(rng_seed: u64, t: usize) -> f64 {
    let h = absorb(mix64(rng_seed ^ STEP_DOMAIN), t as u64);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn base_distribution(
    lm: &dyn LanguageModel,
    history: &[TokenId],
    generated: usize,
    opts: &GenerationOptions,
) -> Result<ProbabilityDistribution> {
    let dist = lm.next_distribution(history)?;
    if dist.vocab_size() != lm.vocab_size() {
        return Err(Error::Model(format!(
            "model returned {} probabilities for a vocabulary of {}",
            dist.vocab_size(),
            lm.vocab_size()
        )));
    }
    let mut dist = no_repeat_ngram_filter(history, &dist, opts.no_repeat_ngram);
    if let Some(end) = lm.end_token() {
        if generated < opts.min_new_tokens {
            dist = suppress_token(dist, end);
        }
    }
    Ok(dist)
}

/// Autoregressive watermarked generation of `msg` after `prompt`.
pub fn embed_sequence(
    lm: &dyn LanguageModel,
    prompt: &TokenSequence,
    msg: &BitMessage,
    cfg: &WatermarkConfig,
    opts: &GenerationOptions,
    rng_seed: u64,
) -> Result<(TokenSequence, Vec<StepTrace>)> {
    cfg.validate()?;
    if msg.len() != cfg.message_bits_b {
        return Err(Error::InvalidConfig(format!(
            "message has {} bits, config expects {}",
            msg.len(),
            cfg.message_bits_b
        )));
    }
    let symbols: SymbolMessage = bits_to_symbols(msg, cfg.groups_k)?;
    let families = GValueFamilySet::from_config(cfg);
    let symbol_count = cfg.symbol_count();

    let mut tokens = prompt.tokens.clone();
    let mut traces = Vec::with_capacity(opts.max_new_tokens);
    let mut seen = HashSet::new();
    for t in 0..opts.max_new_tokens {
        let base = base_distribution(lm, &tokens, t, opts)?;
        let seed = seed_at(&tokens, tokens.len(), cfg.window_c, cfg.key);
        let masked =
            cfg.gvalue_mode == GValueMode::NonDistortionary && seed_history_mask(&seen, seed);
        seen.insert(seed);
        let position = assign_position(seed, cfg.key, symbol_count);
        let symbol = symbols.symbols()[position];
        let h = entropy(&base);
        let (dist, lambda, kl) = if masked {
            (base.clone(), 0.0, 0.0)
        } else {
            let (dist, lambda) = watermark_step(&base, seed, symbol, cfg, &families)?;
            let kl = dist.kl_divergence(&base);
            (dist, lambda, kl)
        };
        let token = dist.sample_with(step_uniform(rng_seed, t));
        tokens.push(token);
        traces.push(StepTrace {
            step: t,
            seed,
            position,
            symbol,
            entropy: h,
            lambda,
            token,
            masked,
            kl,
        });
        if lm.end_token() == Some(token) {
            break;
        }
    }
    let seq = TokenSequence::new(tokens, prompt.tokens.len())?;
    Ok((seq, traces))
}

/// Plain sampling with the same per-step variates as [`embed_sequence`].
/// Returns the sequence and the entropy of each step's distribution.
pub fn generate_unwatermarked(
    lm: &dyn LanguageModel,
    prompt: &TokenSequence,
    opts: &GenerationOptions,
    rng_seed: u64,
) -> Result<(TokenSequence, Vec<f64>)> {
    let mut tokens = prompt.tokens.clone();
    let mut entropies = Vec::with_capacity(opts.max_new_tokens);
    for t in 0..opts.max_new_tokens {
        let base = base_distribution(lm, &tokens, t, opts)?;
        entropies.push(entropy(&base));
        let token = base.sample_with(step_uniform(rng_seed, t));
        tokens.push(token);
        if lm.end_token() == Some(token) {
            break;
        }
    }
    Ok((TokenSequence::new(tokens, prompt.tokens.len())?, entropies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gvalue::GTable;
    use crate::tournament::vectorized_multi_layer;
    use crate::types::Activation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(p.to_vec()).unwrap()
    }

    struct Fixed(ProbabilityDistribution);

    impl LanguageModel for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.vocab_size()
        }
        fn next_distribution(&self, _: &[TokenId]) -> Result<ProbabilityDistribution> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn lambda_examples() {
        let cfg = WatermarkConfig::default();
        let one_hot = ProbabilityDistribution::one_hot(3, TokenId(1));
        assert_eq!(lambda_factor(&one_hot, &cfg), 0.0);
        // tanh(ln 2) = 3/5 exactly.
        let l2 = lambda_factor(&ProbabilityDistribution::uniform(2), &cfg);
        assert!((l2 - 0.72).abs() < 1e-12, "{l2}");
        // tanh(ln 4) = 15/17.
        let l4 = lambda_factor(&ProbabilityDistribution::uniform(4), &cfg);
        assert!((l4 - 1.2 * 15.0 / 17.0).abs() < 1e-12, "{l4}");
        assert!((l4 - 1.0588).abs() < 1e-4);

        let relu = WatermarkConfig {
            activation: Activation::Relu,
            ..cfg.clone()
        };
        assert!(
            (lambda_factor(&ProbabilityDistribution::uniform(4), &relu) - 1.2 * 4f64.ln()).abs()
                < 1e-12
        );
        let fixed = WatermarkConfig {
            lambda_mode: LambdaMode::Fixed(1.0),
            ..cfg
        };
        assert_eq!(
            lambda_factor(&ProbabilityDistribution::uniform(4), &fixed),
            1.0
        );
    }

    #[test]
    fn combine_examples() {
        let comps = vec![
            (dist(&[0.7, 0.3]), dist(&[0.3, 0.7])),
            (dist(&[0.6, 0.4]), dist(&[0.4, 0.6])),
        ];
        let s = combine_k_scores(&comps, &[0, 0], 0.5).unwrap();
        assert!((s[0] - 0.95).abs() < 1e-12 && (s[1] - 0.05).abs() < 1e-12);
        let n = normalize(&s, 1e-12).unwrap();
        assert!((n.probs()[0] - 0.95).abs() < 1e-12);

        let s = combine_k_scores(&comps, &[1, 1], 0.5).unwrap();
        assert!((s[0] - 0.05).abs() < 1e-12 && (s[1] - 0.95).abs() < 1e-12);

        let s = combine_k_scores(&comps, &[0, 1], 0.0).unwrap();
        assert!((s[0] - 1.1).abs() < 1e-12 && (s[1] - 0.9).abs() < 1e-12);

        assert!(combine_k_scores(&comps, &[0], 0.5).is_err());
        let bad = vec![(dist(&[0.5, 0.5]), dist(&[0.2, 0.3, 0.5]))];
        assert!(combine_k_scores(&bad, &[0], 0.5).is_err());
    }

    #[test]
    fn k1_step_uses_complementary_family() {
        let cfg = WatermarkConfig {
            layers_m: 1,
            ..WatermarkConfig::default()
        };
        let families = GValueFamilySet::new(cfg.key, 1, 1);
        // Find a seed where token 0 has g = 1 and token 1 has g = 0.
        let seed = (0..)
            .map(SeedValue)
            .find(|&s| families.g(TokenId(0), s, 1, 1) == 1 && families.g(TokenId(1), s, 1, 1) == 0)
            .unwrap();
        let p = dist(&[0.6, 0.4]);
        let q0 = embed_step_k1(&p, seed, 0, &cfg);
        assert!((q0.probs()[0] - 0.84).abs() < 1e-12);
        let q1 = embed_step_k1(&p, seed, 1, &cfg);
        assert!((q1.probs()[0] - 0.36).abs() < 1e-12);
        assert!((q1.probs()[1] - 0.64).abs() < 1e-12);

        let one_hot = ProbabilityDistribution::one_hot(4, TokenId(2));
        for bit in 0..2 {
            assert_eq!(embed_step_k1(&one_hot, seed, bit, &cfg), one_hot);
        }
    }

    #[test]
    fn k1_step_raises_mean_g() {
        let cfg = WatermarkConfig::default();
        let families = GValueFamilySet::new(cfg.key, 1, cfg.layers_m);
        let p = ProbabilityDistribution::uniform(100);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let seed = SeedValue(rng.random());
            let q = embed_step_k1(&p, seed, 0, &cfg);
            let x = q.sample_with(rng.random());
            let keys = families.family_keys(seed, 0, Family::Base);
            total += keys.ones(x) as f64 / cfg.layers_m as f64;
        }
        let mean = total / trials as f64;
        // Null sd of the mean over 10^4 tokens of 30 fair bits is ~0.0009.
        assert!(
            mean > 0.5 + 3.0 * (0.25 / (30.0 * trials as f64)).sqrt(),
            "{mean}"
        );
        assert!(mean > 0.6, "{mean}");
    }

    #[test]
    fn k1_matches_single_group_combination_without_subtraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let p = normalize(&raw, 1e-12).unwrap();
            let seed = SeedValue(rng.random());
            let cfg = WatermarkConfig {
                layers_m: 8,
                ..WatermarkConfig::default()
            };
            let families = GValueFamilySet::new(cfg.key, 1, 8);
            let table: GTable = families.family_keys(seed, 0, Family::Base).table(20);
            let q = vectorized_table(&p, &table, 2);
            let q_bar = vectorized_table(&p, &table.complement(), 2);
            for bit in 0..2u8 {
                let s = combine_k_scores(&[(q.clone(), q_bar.clone())], &[bit], 0.0).unwrap();
                let combined = normalize(&s, 1e-12).unwrap();
                let direct = embed_step_k1(&p, seed, bit, &cfg);
                for (a, b) in combined.probs().iter().zip(direct.probs()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn table_path_matches_layer_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let families = GValueFamilySet::new(1, 1, 5);
        let p = normalize(
            &(0..30).map(|_| rng.random::<f64>()).collect::<Vec<_>>(),
            1e-12,
        )
        .unwrap();
        let table = families
            .family_keys(SeedValue(77), 0, Family::Base)
            .table(30);
        let layers: Vec<Vec<bool>> = (0..5).map(|l| table.layer(l)).collect();
        let a = vectorized_table(&p, &table, 3);
        let b = vectorized_multi_layer(&p, &layers, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ngram_filter() {
        let p = ProbabilityDistribution::uniform(4);
        assert_eq!(no_repeat_ngram_filter(&[TokenId(0), TokenId(1)], &p, 0), p);
        // history a b a: bigram (a, b) exists, so b is banned after a.
        let h = [TokenId(0), TokenId(1), TokenId(0)];
        let q = no_repeat_ngram_filter(&h, &p, 2);
        assert_eq!(q.probs()[1], 0.0);
        for x in [0, 2, 3] {
            assert!((q.probs()[x] - 1.0 / 3.0).abs() < 1e-15);
        }
        // Everything banned: fall back.
        let only = ProbabilityDistribution::one_hot(4, TokenId(1));
        assert_eq!(no_repeat_ngram_filter(&h, &only, 2), only);
        // Too little history.
        assert_eq!(no_repeat_ngram_filter(&h, &p, 5), p);
    }

    #[test]
    fn one_hot_model_gives_greedy_text() {
        let lm = Fixed(ProbabilityDistribution::one_hot(10, TokenId(4)));
        let cfg = WatermarkConfig::default();
        let opts = GenerationOptions {
            max_new_tokens: 20,
            min_new_tokens: 0,
            no_repeat_ngram: 0,
        };
        let prompt = TokenSequence::new(vec![TokenId(1)], 1).unwrap();
        let msg = BitMessage::random(16, &mut ChaCha8Rng::seed_from_u64(1));
        let (seq, traces) = embed_sequence(&lm, &prompt, &msg, &cfg, &opts, 9).unwrap();
        assert!(seq.generated().iter().all(|&t| t == TokenId(4)));
        assert!(traces.iter().all(|t| t.entropy == 0.0 && t.lambda == 0.0));
    }

    #[test]
    fn zero_alpha_reduces_to_plain_sum() {
        let cfg = WatermarkConfig {
            groups_k: 2,
            alpha: 0.0,
            layers_m: 6,
            ..WatermarkConfig::default()
        };
        let families = GValueFamilySet::from_config(&cfg);
        let p = ProbabilityDistribution::uniform(50);
        let seed = SeedValue(31337);
        let (d, lambda) = watermark_step(&p, seed, 0b10, &cfg, &families).unwrap();
        assert_eq!(lambda, 0.0);
        let t0 = families.family_keys(seed, 0, Family::Base).table(50);
        let t1 = families.family_keys(seed, 1, Family::Base).table(50);
        let q0_bar = vectorized_table(&p, &t0.complement(), 2);
        let q1 = vectorized_table(&p, &t1, 2);
        let sum: Vec<f64> = q0_bar
            .probs()
            .iter()
            .zip(q1.probs())
            .map(|(a, b)| a + b)
            .collect();
        let expected = normalize(&sum, 1e-12).unwrap();
        for (a, b) in d.probs().iter().zip(expected.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_distortionary_masks_repeated_seeds() {
        // A two-token model cycling deterministically repeats its windows.
        struct Alternate;
        impl LanguageModel for Alternate {
            fn vocab_size(&self) -> usize {
                2
            }
            fn next_distribution(&self, h: &[TokenId]) -> Result<ProbabilityDistribution> {
                let last = h.last().map_or(0, |t| t.0);
                Ok(ProbabilityDistribution::one_hot(2, TokenId(1 - last)))
            }
        }
        let cfg = WatermarkConfig {
            gvalue_mode: GValueMode::NonDistortionary,
            ..WatermarkConfig::default()
        };
        let opts = GenerationOptions {
            max_new_tokens: 12,
            min_new_tokens: 0,
            no_repeat_ngram: 0,
        };
        let prompt = TokenSequence::new(vec![TokenId(0)], 1).unwrap();
        let msg = BitMessage::random(16, &mut ChaCha8Rng::seed_from_u64(2));
        let (_, traces) = embed_sequence(&Alternate, &prompt, &msg, &cfg, &opts, 3).unwrap();
        let mut seen = HashSet::new();
        for t in &traces {
            assert_eq!(t.masked, !seen.insert(t.seed));
        }
        assert!(traces.iter().filter(|t| t.masked).count() >= 8);
    }

    #[test]
    fn rejects_wrong_message_length() {
        let lm = Fixed(ProbabilityDistribution::uniform(5));
        let cfg = WatermarkConfig::default();
        let prompt = TokenSequence::new(vec![TokenId(0)], 1).unwrap();
        let msg = BitMessage::random(8, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(
            embed_sequence(&lm, &prompt, &msg, &cfg, &GenerationOptions::default(), 0).is_err()
        );
    }

    #[test]
    fn generation_is_reproducible() {
        let lm = Fixed(ProbabilityDistribution::uniform(200));
        let cfg = WatermarkConfig {
            groups_k: 2,
            ..WatermarkConfig::default()
        };
        let opts = GenerationOptions {
            max_new_tokens: 40,
            ..GenerationOptions::default()
        };
        let prompt = TokenSequence::new(vec![TokenId(3), TokenId(4)], 2).unwrap();
        let msg = BitMessage::random(16, &mut ChaCha8Rng::seed_from_u64(5));
        let a = embed_sequence(&lm, &prompt, &msg, &cfg, &opts, 77).unwrap();
        let b = embed_sequence(&lm, &prompt, &msg, &cfg, &opts, 77).unwrap();
        assert_eq!(a, b);
        for t in &a.1 {
            assert!(t.kl >= 0.0 && t.kl.is_finite());
        }
    }

    #[test]
    fn watermark_stays_on_base_support() {
        let cfg = WatermarkConfig {
            groups_k: 2,
            ..WatermarkConfig::default()
        };
        let families = GValueFamilySet::from_config(&cfg);
        let mut probs = vec![0.0; 100];
        for p in probs.iter_mut().skip(10) {
            *p = 1.0 / 90.0;
        }
        let base = ProbabilityDistribution::new(probs).unwrap();
        for symbol in 0..4 {
            let (q, _) =
                watermark_step(&base, SeedValue(symbol as u64 + 7), symbol, &cfg, &families)
                    .unwrap();
            assert!(q.probs()[..10].iter().all(|&x| x == 0.0));
            assert!(q.kl_divergence(&base).is_finite());
        }
    }

    proptest! {
        #[test]
        fn complement_swap_symmetry(
            raw in prop::collection::vec(0.01f64..1.0, 3 * 8),
            bits in prop::collection::vec(0u8..2, 3),
            lambda in 0.0f64..2.0,
        ) {
            let comps: Vec<_> = raw
                .chunks(8)
                .map(|c| {
                    let a = normalize(&c[..4], 1e-12).unwrap();
                    let b = normalize(&c[4..], 1e-12).unwrap();
                    (a, b)
                })
                .collect();
            let swapped: Vec<_> = comps.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
            let flipped: Vec<u8> = bits.iter().map(|b| 1 - b).collect();
            let x = combine_k_scores(&comps, &bits, lambda).unwrap();
            let y = combine_k_scores(&swapped, &flipped, lambda).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn watermarked_step_is_a_distribution(
            raw in prop::collection::vec(0.0f64..1.0, 2..60),
            seed in any::<u64>(),
            symbol in 0u32..4,
        ) {
            let p = normalize(&raw, 1e-12).unwrap();
            let cfg = WatermarkConfig { groups_k: 2, message_bits_b: 8, ..WatermarkConfig::default() };
            let families = GValueFamilySet::from_config(&cfg);
            let (q, _) = watermark_step(&p, SeedValue(seed), symbol, &cfg, &families).unwrap();
            prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(q.probs().iter().all(|&x| x >= 0.0));
        }
    }
}
