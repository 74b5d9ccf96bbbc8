//! Order-1 Markov language models with Dirichlet rows, used as stand-ins for
//! a real LM. The concentration controls how peaked each row is.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::{generate_unwatermarked, GenerationOptions, LanguageModel};
use crate::error::{Error, Result};
use crate::keying::mix64;
use crate::types::{ProbabilityDistribution, TokenId, TokenSequence};

pub const MODEL_SCHEMA: &str = "worldcup.toylm.v1";

/// Context used when the history is empty.
pub const START_TOKEN: TokenId = TokenId(0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowKind {
    Dirichlet { concentration: f64 },
    Uniform,
}

#[derive(Debug, Clone)]
pub struct MarkovModel {
    vocab: usize,
    kind: RowKind,
    model_seed: u64,
    temperature: f64,
    rows: Vec<ProbabilityDistribution>,
}

/// Softmax of `logits / temperature`, skipping `-inf` entries.
fn softmax(logits: &[f64], temperature: f64) -> ProbabilityDistribution {
    let max = logits
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&x| {
            if x.is_finite() {
                ((x - max) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    ProbabilityDistribution::from_vec_unchecked(probs)
}

/// Log of a symmetric Dirichlet draw. Uses `Gamma(a) = Gamma(a + 1) * U^(1/a)`
/// in log space so tiny concentrations do not underflow to zero rows.
fn dirichlet_logits<R: Rng>(vocab: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration + 1.0, 1.0).expect("shape is positive");
    (0..vocab)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / concentration
        })
        .collect()
}

pub fn build_markov(vocab: usize, concentration: f64, model_seed: u64) -> Result<MarkovModel> {
    if vocab < 2 {
        return Err(Error::InvalidConfig(format!(
            "vocabulary must have at least 2 tokens, got {vocab}"
        )));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let mut model = MarkovModel {
        vocab,
        kind: RowKind::Dirichlet { concentration },
        model_seed,
        temperature: 1.0,
        rows: Vec::new(),
    };
    model.rows = model.raw_rows();
    Ok(model)
}

impl MarkovModel {
    /// Every row uniform: maximal entropy `ln(vocab)` at every step.
    pub fn uniform(vocab: usize) -> Result<MarkovModel> {
        if vocab < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary must have at least 2 tokens, got {vocab}"
            )));
        }
        Ok(MarkovModel {
            vocab,
            kind: RowKind::Uniform,
            model_seed: 0,
            temperature: 1.0,
            rows: vec![ProbabilityDistribution::uniform(vocab); vocab],
        })
    }

    fn raw_logits(&self) -> Vec<Vec<f64>> {
        match self.kind {
            RowKind::Uniform => vec![vec![0.0; self.vocab]; self.vocab],
            RowKind::Dirichlet { concentration } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.model_seed));
                (0..self.vocab)
                    .map(|_| dirichlet_logits(self.vocab, concentration, &mut rng))
                    .collect()
            }
        }
    }

    fn raw_rows(&self) -> Vec<ProbabilityDistribution> {
        self.raw_logits()
            .iter()
            .map(|l| softmax(l, self.temperature))
            .collect()
    }

    /// Same rows tempered as `p^(1/T)`, renormalized.
    pub fn with_temperature(&self, temperature: f64) -> Result<MarkovModel> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut model = MarkovModel {
            temperature,
            rows: Vec::new(),
            ..self.clone()
        };
        model.rows = model.raw_rows();
        Ok(model)
    }

    pub fn kind(&self) -> RowKind {
        self.kind
    }

    pub fn model_seed(&self) -> u64 {
        self.model_seed
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Transition row for context token `token`.
    pub fn row(&self, token: TokenId) -> &ProbabilityDistribution {
        &self.rows[token.index()]
    }

    /// Hex SHA-256 over all row probabilities (little-endian bytes).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.rows {
            for p in row.probs() {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes the model parameters and a digest of the rows. Rows are rebuilt
    /// from the parameters on load and checked against the digest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            schema: MODEL_SCHEMA.into(),
            vocab: self.vocab,
            kind: self.kind,
            model_seed: self.model_seed,
            temperature: self.temperature,
            digest: self.digest(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MarkovModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let model = file.build()?;
        if model.digest() != file.digest {
            return Err(Error::Model(format!(
                "{}: rebuilt rows do not match the stored digest",
                path.display()
            )));
        }
        Ok(model)
    }
}

/// On-disk form of a [`MarkovModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    pub vocab: usize,
    pub kind: RowKind,
    pub model_seed: u64,
    pub temperature: f64,
    pub digest: String,
}

impl ModelFile {
    pub fn build(&self) -> Result<MarkovModel> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::Schema {
                expected: MODEL_SCHEMA.into(),
                found: self.schema.clone(),
            });
        }
        let model = match self.kind {
            RowKind::Uniform => MarkovModel::uniform(self.vocab)?,
            RowKind::Dirichlet { concentration } => {
                build_markov(self.vocab, concentration, self.model_seed)?
            }
        };
        if self.temperature == 1.0 {
            Ok(model)
        } else {
            model.with_temperature(self.temperature)
        }
    }
}

impl LanguageModel for MarkovModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_distribution(&self, history: &[TokenId]) -> Result<ProbabilityDistribution> {
        let last = history.last().copied().unwrap_or(START_TOKEN);
        if last.index() >= self.vocab {
            return Err(Error::Model(format!(
                "token {} outside vocabulary of {}",
                last.0, self.vocab
            )));
        }
        Ok(self.rows[last.index()].clone())
    }
}

/// Random prompt of `len` tokens.
pub fn random_prompt<R: Rng>(vocab: usize, len: usize, rng: &mut R) -> TokenSequence {
    let tokens = (0..len)
        .map(|_| TokenId(rng.random_range(0..vocab as u32)))
        .collect();
    TokenSequence::new(tokens, len).expect("prompt length fits")
}

/// Average entropy of the model's next-token distributions over the steps of
/// `n_sequences` unwatermarked generations.
pub fn mean_step_entropy(
    model: &dyn LanguageModel,
    opts: &GenerationOptions,
    n_sequences: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut steps) = (0.0, 0usize);
    for _ in 0..n_sequences {
        let prompt = random_prompt(model.vocab_size(), 4, &mut rng);
        let (_, entropies) = generate_unwatermarked(model, &prompt, opts, rng.random())?;
        steps += entropies.len();
        total += entropies.iter().sum::<f64>();
    }
    if steps == 0 {
        return Err(Error::Empty);
    }
    Ok(total / steps as f64)
}
