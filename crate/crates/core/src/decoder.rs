//! Message recovery and detection statistics.
//!
//! Decoding recomputes each generated token's seed and message position,
//! averages its g-values per (position, group), and reads each bit off the
//! comparison between the two families' averages.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gvalue::{Family, GValueFamilySet};
use crate::keying::{assign_position, seed_at, SeedValue};
use crate::types::{
    symbols_to_bits, BitMessage, GValueMode, SecondFamily, SymbolMessage, TokenId, TokenSequence,
    WatermarkConfig,
};

pub const REPORT_SCHEMA: &str = "worldcup.detection.v1";

/// A generated token that contributes evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoredToken {
    pub index: usize,
    pub token: TokenId,
    pub seed: SeedValue,
    pub position: usize,
}

/// Recomputes seeds and positions for the generated part of `text`.
///
/// A repeated `(seed, token)` pair carries no new evidence and is skipped. In
/// non-distortionary mode every repeated seed is skipped, matching the
/// embedder, which samples those steps from the base model.
pub fn scored_tokens(text: &TokenSequence, cfg: &WatermarkConfig) -> Vec<ScoredToken> {
    let b = cfg.symbol_count();
    let mut seen_pairs = HashSet::new();
    let mut seen_seeds = HashSet::new();
    let mut out = Vec::with_capacity(text.len() - text.prompt_len);
    for t in text.prompt_len..text.len() {
        let token = text.tokens[t];
        let seed = seed_at(&text.tokens, t, cfg.window_c, cfg.key);
        let fresh_seed = seen_seeds.insert(seed);
        if cfg.gvalue_mode == GValueMode::NonDistortionary && !fresh_seed {
            continue;
        }
        if !seen_pairs.insert((seed, token)) {
            continue;
        }
        out.push(ScoredToken {
            index: t,
            token,
            seed,
            position: assign_position(seed, cfg.key, b),
        });
    }
    out
}

/// Per-position, per-group g-value sums.
///
/// Sums are kept as integers so both families' means and the token counts
/// stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGroupScores {
    positions: usize,
    groups_k: usize,
    layers_m: usize,
    second: SecondFamily,
    ones: Vec<u64>,
    second_ones: Vec<u64>,
    counts: Vec<u64>,
}

impl PositionGroupScores {
    pub fn empty(positions: usize, groups_k: usize, layers_m: usize, second: SecondFamily) -> Self {
        PositionGroupScores {
            positions,
            groups_k,
            layers_m,
            second,
            ones: vec![0; positions * groups_k],
            second_ones: vec![0; positions * groups_k],
            counts: vec![0; positions],
        }
    }

    fn add(&mut self, position: usize, group: usize, ones: u32, second_ones: u32) {
        let i = position * self.groups_k + group;
        self.ones[i] += ones as u64;
        self.second_ones[i] += second_ones as u64;
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn groups(&self) -> usize {
        self.groups_k
    }

    pub fn layers(&self) -> usize {
        self.layers_m
    }

    /// Tokens assigned to `position`.
    pub fn count(&self, position: usize) -> u64 {
        self.counts[position]
    }

    pub fn total_tokens(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sum of base-family g-values at `(position, group)`, 0-based.
    pub fn ones(&self, position: usize, group: usize) -> u64 {
        self.ones[position * self.groups_k + group]
    }

    /// Sum of the bit-1 family's g-values at `(position, group)`.
    pub fn second_ones(&self, position: usize, group: usize) -> u64 {
        self.second_ones[position * self.groups_k + group]
    }

    fn trials(&self, position: usize) -> u64 {
        self.counts[position] * self.layers_m as u64
    }

    /// Mean base-family score; `None` when no token landed on `position`.
    pub fn s(&self, position: usize, group: usize) -> Option<f64> {
        let n = self.trials(position);
        (n > 0).then(|| self.ones(position, group) as f64 / n as f64)
    }

    /// Mean score of the family encoding bit 1.
    pub fn s_bar(&self, position: usize, group: usize) -> Option<f64> {
        let n = self.trials(position);
        (n > 0).then(|| self.second_ones(position, group) as f64 / n as f64)
    }

    pub fn coverage(&self) -> f64 {
        if self.positions == 0 {
            return 0.0;
        }
        self.counts.iter().filter(|&&c| c > 0).count() as f64 / self.positions as f64
    }
}

pub fn score_positions(text: &TokenSequence, cfg: &WatermarkConfig) -> PositionGroupScores {
    score_tokens(&scored_tokens(text, cfg), cfg)
}

fn second_ones(
    families: &GValueFamilySet,
    seed: SeedValue,
    group: usize,
    token: TokenId,
    base_ones: u32,
    second: SecondFamily,
) -> u32 {
    match Family::for_one(second) {
        Family::Complement => families.layers() as u32 - base_ones,
        other => families.family_keys(seed, group, other).ones(token),
    }
}

pub fn score_tokens(tokens: &[ScoredToken], cfg: &WatermarkConfig) -> PositionGroupScores {
    let families = GValueFamilySet::from_config(cfg);
    let mut scores = PositionGroupScores::empty(
        cfg.symbol_count(),
        cfg.groups_k,
        cfg.layers_m,
        cfg.second_family,
    );
    for st in tokens {
        scores.counts[st.position] += 1;
        for j in 0..cfg.groups_k {
            let ones = families
                .family_keys(st.seed, j, Family::Base)
                .ones(st.token);
            let other = second_ones(&families, st.seed, j, st.token, ones, cfg.second_family);
            scores.add(st.position, j, ones, other);
        }
    }
    scores
}

/// Bit `j` of symbol `p` is 1 iff `s_j < s̄_j`; ties and empty positions give 0.
pub fn decode_confidence(scores: &PositionGroupScores) -> SymbolMessage {
    let k = scores.groups_k;
    let symbols = (0..scores.positions)
        .map(|p| {
            (0..k).fold(0u32, |acc, j| {
                let bit = scores.ones(p, j) < scores.second_ones(p, j);
                (acc << 1) | bit as u32
            })
        })
        .collect();
    SymbolMessage::new(symbols, k).expect("symbols fit in k bits")
}

/// Hard per-token votes: `M[p][s]` counts tokens at `p` whose selected-family
/// g-sum is maximal for symbol `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountingMatrix {
    pub symbols: usize,
    pub rows: Vec<Vec<u64>>,
}

impl CountingMatrix {
    /// Majority symbol per row; ties go to the smaller symbol.
    pub fn argmax(&self) -> Vec<u32> {
        self.rows
            .iter()
            .map(|row| {
                let mut best = 0;
                for (s, &c) in row.iter().enumerate() {
                    if c > row[best] {
                        best = s;
                    }
                }
                best as u32
            })
            .collect()
    }
}

pub fn counting_matrix(text: &TokenSequence, cfg: &WatermarkConfig) -> CountingMatrix {
    let k = cfg.groups_k;
    let families = GValueFamilySet::from_config(cfg);
    let mut rows = vec![vec![0u64; 1 << k]; cfg.symbol_count()];
    for st in scored_tokens(text, cfg) {
        // The symbol score is a sum of independent per-group choices, so the
        // maximizer picks each bit separately; ties keep bit 0, which yields
        // the smallest maximizing symbol.
        let mut symbol = 0usize;
        for j in 0..k {
            let ones = families
                .family_keys(st.seed, j, Family::Base)
                .ones(st.token);
            let other = second_ones(&families, st.seed, j, st.token, ones, cfg.second_family);
            symbol = (symbol << 1) | (other > ones) as usize;
        }
        rows[st.position][symbol] += 1;
    }
    CountingMatrix {
        symbols: 1 << k,
        rows,
    }
}

pub fn decode_counting(text: &TokenSequence, cfg: &WatermarkConfig) -> SymbolMessage {
    let m = counting_matrix(text, cfg);
    SymbolMessage::new(m.argmax(), cfg.groups_k).expect("symbols fit in k bits")
}

/// Group-1 evidence at one position, oriented by `expected` when given.
fn signed_parts(
    scores: &PositionGroupScores,
    expected: Option<&SymbolMessage>,
    p: usize,
) -> (f64, f64) {
    let trials = scores.trials(p) as f64;
    let ones = scores.ones(p, 0) as f64;
    let flip = expected.is_some_and(|msg| msg.bit(p, 0) == 1);
    let d = 2.0 * ones - trials;
    (if flip { -d } else { d }, trials)
}

/// Per-position signed statistic `(2 G_p - m n_p) / sqrt(m n_p)`; 0 when empty.
pub fn position_z(scores: &PositionGroupScores, expected: Option<&SymbolMessage>) -> Vec<f64> {
    (0..scores.positions)
        .map(|p| {
            let (d, trials) = signed_parts(scores, expected, p);
            if trials > 0.0 {
                d / trials.sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

/// `sqrt(m T) * mean(2g - 1)` over group 1. With `expected`, positions whose
/// first bit is 1 are scored on the complement so the statistic rewards the
/// message actually embedded. Without it the raw g-values are used, which
/// keeps the statistic standard normal on unwatermarked text.
pub fn z_signed(scores: &PositionGroupScores, expected: Option<&SymbolMessage>) -> f64 {
    let (d, trials) = (0..scores.positions)
        .map(|p| signed_parts(scores, expected, p))
        .fold((0.0, 0.0), |(a, b), (d, t)| (a + d, b + t));
    if trials > 0.0 {
        d / trials.sqrt()
    } else {
        0.0
    }
}

const HALF_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Blind statistic over the margins `|s - 0.5|` of every occupied cell, each
/// standardized by the half-normal moments of its null distribution.
pub fn z_folded(scores: &PositionGroupScores) -> f64 {
    let sd_factor = (1.0 - 2.0 / PI).sqrt();
    let mut total = 0.0;
    let mut cells = 0usize;
    for p in 0..scores.positions {
        let trials = scores.trials(p);
        if trials == 0 {
            continue;
        }
        let sigma = 0.5 / (trials as f64).sqrt();
        for j in 0..scores.groups_k {
            let u = (scores.ones(p, j) as f64 / trials as f64 - 0.5).abs();
            total += (u - sigma * HALF_NORMAL_MEAN) / (sigma * sd_factor);
            cells += 1;
        }
    }
    if cells == 0 {
        0.0
    } else {
        total / (cells as f64).sqrt()
    }
}

/// Non-increasing per-layer weights, linear from `tau` to `mu`, scaled to sum to `m`.
pub fn layer_weights(m: usize, tau: f64, mu: f64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidConfig("layer count must be positive".into()));
    }
    if m == 1 {
        if tau != mu {
            return Err(Error::InvalidConfig(
                "a single layer cannot carry distinct weights".into(),
            ));
        }
        return Ok(vec![1.0]);
    }
    if !(tau.is_finite() && mu.is_finite() && tau >= mu && mu >= 0.0 && tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "layer weights need tau >= mu >= 0, got tau = {tau}, mu = {mu}"
        )));
    }
    let raw: Vec<f64> = (0..m)
        .map(|l| tau - l as f64 * (tau - mu) / (m - 1) as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w * m as f64 / total).collect())
}

/// Mean score of the families selected by the decoded message, with layer
/// weights. Each token contributes the weighted average of its `m` g-values
/// under the family its position's decoded bit selects, averaged over groups.
/// `tau == mu` gives the plain mean.
pub fn weighted_mean_score(
    text: &TokenSequence,
    cfg: &WatermarkConfig,
    tau: f64,
    mu: f64,
) -> Result<f64> {
    let weights = layer_weights(cfg.layers_m, tau, mu)?;
    let tokens = scored_tokens(text, cfg);
    let decoded = decode_confidence(&score_tokens(&tokens, cfg));
    Ok(weighted_mean_with(&tokens, &decoded, cfg, &weights))
}

fn weighted_mean_with(
    tokens: &[ScoredToken],
    decoded: &SymbolMessage,
    cfg: &WatermarkConfig,
    weights: &[f64],
) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let families = GValueFamilySet::from_config(cfg);
    let m = cfg.layers_m as f64;
    let mut total = 0.0;
    for st in tokens {
        for j in 0..cfg.groups_k {
            let family = Family::for_bit(decoded.bit(st.position, j), cfg.second_family);
            let keys = families.family_keys(st.seed, j, family);
            let s: f64 = weights
                .iter()
                .enumerate()
                .filter(|&(l, _)| keys.bit(st.token, l) == 1)
                .map(|(_, w)| w)
                .sum();
            total += s / m;
        }
    }
    total / (tokens.len() * cfg.groups_k) as f64
}

/// Default layer-weight endpoints of the weighted detector.
pub const WEIGHT_TAU: f64 = 10.0;
pub const WEIGHT_MU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema: String,
    /// Decoded payload as a `0`/`1` string.
    pub message: String,
    pub symbols: Vec<u32>,
    pub tokens_scored: u64,
    pub position_counts: Vec<u64>,
    pub position_z: Vec<f64>,
    pub z_signed: f64,
    pub z_folded: f64,
    pub mean_score: f64,
    pub weighted_mean_score: f64,
    pub coverage: f64,
    /// `|s - 0.5|` per position and group; 0 for empty positions.
    pub margins: Vec<Vec<f64>>,
}

impl DetectionReport {
    pub fn decoded(&self) -> BitMessage {
        BitMessage::parse(&self.message).expect("report holds a valid message")
    }
}

/// Decodes the message and computes every detection statistic. `expected`
/// orients the signed statistic; without it the raw g-values are used.
pub fn detect(
    text: &TokenSequence,
    cfg: &WatermarkConfig,
    expected: Option<&BitMessage>,
) -> Result<DetectionReport> {
    cfg.validate()?;
    let expected = expected
        .map(|msg| {
            if msg.len() != cfg.message_bits_b {
                return Err(Error::VectorLength {
                    expected: cfg.message_bits_b,
                    actual: msg.len(),
                });
            }
            crate::types::bits_to_symbols(msg, cfg.groups_k)
        })
        .transpose()?;
    let tokens = scored_tokens(text, cfg);
    let scores = score_tokens(&tokens, cfg);
    let symbols = decode_confidence(&scores);
    let plain = vec![1.0; cfg.layers_m];
    let weights =
        layer_weights(cfg.layers_m, WEIGHT_TAU, WEIGHT_MU).unwrap_or_else(|_| plain.clone());
    let margins = (0..scores.positions)
        .map(|p| {
            (0..scores.groups_k)
                .map(|j| scores.s(p, j).map_or(0.0, |s| (s - 0.5).abs()))
                .collect()
        })
        .collect();
    Ok(DetectionReport {
        schema: REPORT_SCHEMA.into(),
        message: symbols_to_bits(&symbols).to_string(),
        tokens_scored: scores.total_tokens(),
        position_counts: scores.counts.clone(),
        position_z: position_z(&scores, expected.as_ref()),
        z_signed: z_signed(&scores, expected.as_ref()),
        z_folded: z_folded(&scores),
        mean_score: weighted_mean_with(&tokens, &symbols, cfg, &plain),
        weighted_mean_score: weighted_mean_with(&tokens, &symbols, cfg, &weights),
        coverage: scores.coverage(),
        margins,
        symbols: symbols.symbols().to_vec(),
    })
}

/// Hamming(7,4) per nibble, codeword layout `p1 p2 d1 p4 d2 d3 d4`.
pub fn hamming_encode(msg: &BitMessage) -> Result<BitMessage> {
    if !msg.len().is_multiple_of(4) {
        return Err(Error::LengthMismatch {
            bits: msg.len(),
            multiple: 4,
        });
    }
    let mut out = Vec::with_capacity(msg.len() / 4 * 7);
    for d in msg.bits().chunks(4) {
        let (d1, d2, d3, d4) = (d[0], d[1], d[2], d[3]);
        out.extend_from_slice(&[d1 ^ d2 ^ d4, d1 ^ d3 ^ d4, d1, d2 ^ d3 ^ d4, d2, d3, d4]);
    }
    BitMessage::new(out)
}

/// Corrects up to one flipped bit per 7-bit block.
pub fn hamming_decode(code: &BitMessage) -> Result<BitMessage> {
    if !code.len().is_multiple_of(7) {
        return Err(Error::LengthMismatch {
            bits: code.len(),
            multiple: 7,
        });
    }
    let mut out = Vec::with_capacity(code.len() / 7 * 4);
    for block in code.bits().chunks(7) {
        let mut c = [0u8; 7];
        c.copy_from_slice(block);
        // Bit i of the syndrome checks the 1-based positions with bit i set.
        let syndrome = (1..=7usize)
            .filter(|&pos| c[pos - 1] == 1)
            .fold(0usize, |s, pos| s ^ pos);
        if syndrome != 0 {
            c[syndrome - 1] ^= 1;
        }
        out.extend_from_slice(&[c[2], c[4], c[5], c[6]]);
    }
    BitMessage::new(out)
}
