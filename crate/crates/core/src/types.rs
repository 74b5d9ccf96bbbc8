//! Domain types shared by every stage of the pipeline, plus the small numeric
//! helpers (clamped normalization, entropy, bit/symbol packing) they need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a [`ProbabilityDistribution`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

/// A normalized probability vector indexed by [`TokenId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityDistribution {
    probs: Vec<f64>,
}

impl ProbabilityDistribution {
    /// Validates non-negativity, finiteness and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty);
        }
        let mut total = 0.0;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index, value });
            }
            if value < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "negative probability {value} at index {index}"
                )));
            }
            total += value;
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "total mass {total} differs from 1"
            )));
        }
        Ok(ProbabilityDistribution { probs })
    }

    /// Skips validation. Callers guarantee the invariants by construction.
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        debug_assert!(
            (probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6,
            "mass drifted: {}",
            probs.iter().sum::<f64>()
        );
        ProbabilityDistribution { probs }
    }

    pub fn uniform(vocab: usize) -> Self {
        assert!(vocab > 0);
        ProbabilityDistribution {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn one_hot(vocab: usize, token: TokenId) -> Self {
        assert!(token.index() < vocab);
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        ProbabilityDistribution { probs }
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// Inverse-CDF draw from a uniform `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return TokenId(i as u32);
                }
            }
        }
        // Rounding left `u` just above the accumulated mass.
        TokenId(last_positive as u32)
    }

    pub fn total_variation(&self, other: &ProbabilityDistribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// KL(self || base) in nats. Infinite when `self` puts mass where `base` has none.
    pub fn kl_divergence(&self, base: &ProbabilityDistribution) -> f64 {
        let mut kl = 0.0;
        for (&q, &p) in self.probs.iter().zip(&base.probs) {
            if q > 0.0 {
                if p == 0.0 {
                    return f64::INFINITY;
                }
                // q/p overflows when p is subnormal
                kl += q * (q.ln() - p.ln());
            }
        }
        kl.max(0.0)
    }
}

/// Clamps every score to at least `floor` and rescales to unit mass.
///
/// This is softmax applied to the logarithm of the clamped scores, written in
/// its proportional form.
pub fn normalize(raw_scores: &[f64], floor: f64) -> Result<ProbabilityDistribution> {
    if raw_scores.is_empty() {
        return Err(Error::Empty);
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "score floor must be positive, got {floor}"
        )));
    }
    let mut clamped = Vec::with_capacity(raw_scores.len());
    let mut total = 0.0;
    for (index, &value) in raw_scores.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index, value });
        }
        let v = value.max(floor);
        total += v;
        clamped.push(v);
    }
    for v in &mut clamped {
        *v /= total;
    }
    Ok(ProbabilityDistribution::from_vec_unchecked(clamped))
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(dist: &ProbabilityDistribution) -> f64 {
    let h: f64 = dist
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// An ordered payload of bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(index) = bits.iter().position(|&b| b > 1) {
            return Err(Error::InvalidConfig(format!(
                "bit {index} has value {}, expected 0 or 1",
                bits[index]
            )));
        }
        Ok(BitMessage { bits })
    }

    /// Parses a string of `'0'`/`'1'` characters.
    pub fn parse(text: &str) -> Result<Self> {
        let bits = text
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::InvalidConfig(format!(
                    "unexpected character {other:?} in bit string"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        BitMessage::new(bits)
    }

    pub fn random<R: rand::Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        assert!(len > 0);
        BitMessage {
            bits: (0..len).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    #[inline]
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> BitMessage {
        BitMessage {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }
}

impl std::fmt::Display for BitMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// A bit message regrouped into `2^k`-ary symbols, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolMessage {
    symbols: Vec<u32>,
    bits_per_symbol: usize,
}

impl SymbolMessage {
    pub fn new(symbols: Vec<u32>, bits_per_symbol: usize) -> Result<Self> {
        if bits_per_symbol == 0 || bits_per_symbol > 16 {
            return Err(Error::InvalidConfig(format!(
                "bits per symbol must be in 1..=16, got {bits_per_symbol}"
            )));
        }
        let limit = 1u32 << bits_per_symbol;
        if let Some(s) = symbols.iter().find(|&&s| s >= limit) {
            return Err(Error::InvalidConfig(format!(
                "symbol {s} does not fit in {bits_per_symbol} bits"
            )));
        }
        Ok(SymbolMessage {
            symbols,
            bits_per_symbol,
        })
    }

    #[inline]
    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    #[inline]
    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Bit `j` (0-based, most significant first) of symbol `position`.
    #[inline]
    pub fn bit(&self, position: usize, j: usize) -> u8 {
        ((self.symbols[position] >> (self.bits_per_symbol - 1 - j)) & 1) as u8
    }
}

pub fn bits_to_symbols(msg: &BitMessage, k: usize) -> Result<SymbolMessage> {
    if k == 0 || k > 16 {
        return Err(Error::InvalidConfig(format!(
            "bits per symbol must be in 1..=16, got {k}"
        )));
    }
    if !msg.len().is_multiple_of(k) {
        return Err(Error::LengthMismatch {
            bits: msg.len(),
            multiple: k,
        });
    }
    let symbols = msg
        .bits()
        .chunks(k)
        .map(|chunk| chunk.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32))
        .collect();
    Ok(SymbolMessage {
        symbols,
        bits_per_symbol: k,
    })
}

pub fn symbols_to_bits(msg: &SymbolMessage) -> BitMessage {
    let k = msg.bits_per_symbol;
    let bits = msg
        .symbols
        .iter()
        .flat_map(|&s| (0..k).map(move |j| ((s >> (k - 1 - j)) & 1) as u8))
        .collect();
    BitMessage { bits }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GValueMode {
    /// Every step is watermarked, including steps whose seed already occurred.
    Distortionary,
    /// Steps that repeat an earlier seed are sampled from the base model.
    NonDistortionary,
}

/// How the subtraction strength is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaMode {
    /// `alpha * activation(entropy)`.
    Entropy,
    /// A constant, ignoring entropy. `Fixed(0.0)` disables the subtraction.
    Fixed(f64),
}

/// The family that encodes bit value 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondFamily {
    /// `1 - g` at every layer.
    Complementary,
    /// An independently keyed family; used only for ablations.
    RandomIndependent,
}

fn default_lambda_mode() -> LambdaMode {
    LambdaMode::Entropy
}

fn default_second_family() -> SecondFamily {
    SecondFamily::Complementary
}

/// All embedding and decoding hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkConfig {
    pub key: u64,
    pub window_c: usize,
    pub layers_m: usize,
    pub leaves_n: usize,
    pub groups_k: usize,
    pub alpha: f64,
    pub activation: Activation,
    pub message_bits_b: usize,
    pub gvalue_mode: GValueMode,
    pub score_floor_eps: f64,
    #[serde(default = "default_lambda_mode")]
    pub lambda_mode: LambdaMode,
    #[serde(default = "default_second_family")]
    pub second_family: SecondFamily,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig {
            key: 0x5EED_CAFE_F00D_D00D,
            window_c: 2,
            layers_m: 30,
            leaves_n: 2,
            groups_k: 1,
            alpha: 1.2,
            activation: Activation::Tanh,
            message_bits_b: 16,
            gvalue_mode: GValueMode::Distortionary,
            score_floor_eps: 1e-12,
            lambda_mode: LambdaMode::Entropy,
            second_family: SecondFamily::Complementary,
        }
    }
}

impl WatermarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.window_c == 0 {
            return bad("window_c must be positive".into());
        }
        if self.layers_m == 0 {
            return bad("layers_m must be positive".into());
        }
        if self.leaves_n < 2 {
            return bad(format!(
                "leaves_n must be at least 2, got {}",
                self.leaves_n
            ));
        }
        if self.groups_k == 0 || self.groups_k > 16 {
            return bad(format!("groups_k must be in 1..=16, got {}", self.groups_k));
        }
        if self.message_bits_b == 0 {
            return bad("message_bits_b must be positive".into());
        }
        if !self.message_bits_b.is_multiple_of(self.groups_k) {
            return Err(Error::LengthMismatch {
                bits: self.message_bits_b,
                multiple: self.groups_k,
            });
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.score_floor_eps > 0.0 && self.score_floor_eps.is_finite()) {
            return bad("score_floor_eps must be positive".into());
        }
        if let LambdaMode::Fixed(v) = self.lambda_mode {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("fixed lambda must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Number of `2^k`-ary symbols, `B = b / k`.
    pub fn symbol_count(&self) -> usize {
        self.message_bits_b / self.groups_k
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A prompt followed by generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::InvalidConfig(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        Ok(TokenSequence { tokens, prompt_len })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
