//! Experiment orchestration and metrics: paired watermarked/unwatermarked
//! generation, attacks, decoding with every detector, and CSV/JSONL output.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{filler_needed, AttackKind, AttackSpec};
use crate::decoder::{decode_counting, detect, hamming_decode, hamming_encode, DetectionReport};
use crate::embedder::{embed_sequence, generate_unwatermarked, GenerationOptions};
use crate::error::{Error, Result};
use crate::keying::{absorb, mix64, seed_at};
use crate::toylm::{build_markov, random_prompt, MarkovModel, RowKind};
use crate::types::{
    symbols_to_bits, BitMessage, LambdaMode, SecondFamily, TokenSequence, WatermarkConfig,
};

pub const EXPERIMENT_SCHEMA: &str = "worldcup.experiment.v1";
pub const METRICS_SCHEMA: &str = "worldcup.metrics.v1";
pub const SEQUENCE_SCHEMA: &str = "worldcup.sequence.v1";
pub const CALIBRATION_SCHEMA: &str = "worldcup.calibration.v1";

const HARNESS_DOMAIN: u64 = 0x4841_524E_4553_5321; // "HARNESS!"

/// Deterministic sub-seed from a path of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(HARNESS_DOMAIN), |h, &p| absorb(h, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSpec {
    pub vocab: usize,
    pub rows: RowKind,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LmSpec {
    fn default() -> Self {
        LmSpec {
            vocab: 1000,
            rows: RowKind::Dirichlet { concentration: 1.0 },
            model_seed: 1,
            temperature: 1.0,
        }
    }
}

impl LmSpec {
    pub fn build(&self) -> Result<MarkovModel> {
        let model = match self.rows {
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

/// Score used to separate watermarked from unwatermarked text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    /// Blind folded z over all position/group cells.
    Folded,
    /// Signed z oriented by the embedded message (verification setting).
    Signed,
    /// Mean g-value under the decoded message's families.
    Mean,
    /// Same with linearly decreasing layer weights.
    Weighted,
}

impl Detector {
    pub fn name(self) -> &'static str {
        match self {
            Detector::Folded => "folded",
            Detector::Signed => "signed",
            Detector::Mean => "mean",
            Detector::Weighted => "weighted",
        }
    }

    pub fn score(self, report: &DetectionReport) -> f64 {
        match self {
            Detector::Folded => report.z_folded,
            Detector::Signed => report.z_signed,
            Detector::Mean => report.mean_score,
            Detector::Weighted => report.weighted_mean_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema: String,
    pub watermark: WatermarkConfig,
    pub lm: LmSpec,
    /// Payload lengths to sweep; each overrides `watermark.message_bits_b`.
    pub message_bits: Vec<usize>,
    pub max_new_tokens: Vec<usize>,
    pub min_new_tokens: usize,
    pub no_repeat_ngram: usize,
    pub prompt_len: usize,
    pub sequences_per_cell: usize,
    /// Evaluated in addition to the unattacked text.
    pub attacks: Vec<AttackSpec>,
    pub detectors: Vec<Detector>,
    /// Embed Hamming(7,4) codewords and report the corrected ME rate too.
    pub ecc: bool,
    pub seed: u64,
    /// Fill the timing columns. Off by default because timings differ
    /// between runs.
    pub measure_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: EXPERIMENT_SCHEMA.into(),
            watermark: WatermarkConfig::default(),
            lm: LmSpec::default(),
            message_bits: vec![16, 24, 32, 48],
            max_new_tokens: vec![128, 256],
            min_new_tokens: 64,
            no_repeat_ngram: 4,
            prompt_len: 8,
            sequences_per_cell: 50,
            attacks: Vec::new(),
            detectors: vec![Detector::Folded, Detector::Mean],
            ecc: true,
            seed: 0,
            measure_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(Error::Schema {
                expected: EXPERIMENT_SCHEMA.into(),
                found: self.schema.clone(),
            });
        }
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.message_bits.is_empty()
            || self.max_new_tokens.is_empty()
            || self.detectors.is_empty()
        {
            return bad("message_bits, max_new_tokens and detectors must be non-empty");
        }
        if self.sequences_per_cell == 0 {
            return bad("sequences_per_cell must be at least 1");
        }
        if self.max_new_tokens.contains(&0) {
            return bad("max_new_tokens entries must be positive");
        }
        if self.ecc && self.message_bits.iter().any(|&b| b < 7) {
            return bad("error correction needs at least 7 message bits");
        }
        for &b in &self.message_bits {
            WatermarkConfig {
                message_bits_b: b,
                ..self.watermark.clone()
            }
            .validate()?;
        }
        for a in &self.attacks {
            a.validate()?;
        }
        Ok(())
    }

    pub fn generation(&self, max_new_tokens: usize) -> GenerationOptions {
        GenerationOptions {
            max_new_tokens,
            min_new_tokens: self.min_new_tokens.min(max_new_tokens),
            no_repeat_ngram: self.no_repeat_ngram,
        }
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: String,
    pub watermark: WatermarkConfig,
    pub message_bits: usize,
    pub max_new_tokens: usize,
}

impl Cell {
    pub fn new(
        variant: &str,
        watermark: &WatermarkConfig,
        message_bits: usize,
        max_new_tokens: usize,
    ) -> Self {
        Cell {
            variant: variant.into(),
            watermark: WatermarkConfig {
                message_bits_b: message_bits,
                ..watermark.clone()
            },
            message_bits,
            max_new_tokens,
        }
    }

    pub fn key(&self) -> String {
        format!(
            "{}/b{}/t{}",
            self.variant, self.message_bits, self.max_new_tokens
        )
    }
}

/// A sequence as written to `sequences.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub schema: String,
    #[serde(default)]
    pub cell: String,
    #[serde(default)]
    pub index: usize,
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub watermarked: bool,
    /// Embedded payload as a `0`/`1` string; `None` for plain text.
    pub message_bits: Option<String>,
    pub cfg_digest: String,
    /// Seed of each generated step.
    pub seeds: Vec<u64>,
}

impl SequenceRecord {
    pub fn new(
        cell: &str,
        index: usize,
        seq: &TokenSequence,
        message: Option<&BitMessage>,
        cfg: &WatermarkConfig,
    ) -> Self {
        SequenceRecord {
            schema: SEQUENCE_SCHEMA.into(),
            cell: cell.into(),
            index,
            tokens: seq.tokens.iter().map(|t| t.0).collect(),
            prompt_len: seq.prompt_len,
            watermarked: message.is_some(),
            message_bits: message.map(|m| m.to_string()),
            cfg_digest: cfg.digest(),
            seeds: (seq.prompt_len..seq.len())
                .map(|t| seed_at(&seq.tokens, t, cfg.window_c, cfg.key).0)
                .collect(),
        }
    }

    pub fn sequence(&self) -> Result<TokenSequence> {
        if self.schema != SEQUENCE_SCHEMA {
            return Err(Error::Schema {
                expected: SEQUENCE_SCHEMA.into(),
                found: self.schema.clone(),
            });
        }
        TokenSequence::new(
            self.tokens.iter().copied().map(Into::into).collect(),
            self.prompt_len,
        )
    }

    pub fn message(&self) -> Result<Option<BitMessage>> {
        self.message_bits
            .as_deref()
            .map(BitMessage::parse)
            .transpose()
    }
}

/// The payload embedded for one sequence. With error correction the channel
/// message is Hamming-coded `payload` padded with random bits to `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedMessage {
    pub channel: BitMessage,
    pub payload: Option<BitMessage>,
}

pub fn plan_message(bits: usize, ecc: bool, rng: &mut ChaCha8Rng) -> Result<PlannedMessage> {
    if !ecc {
        return Ok(PlannedMessage {
            channel: BitMessage::random(bits, rng),
            payload: None,
        });
    }
    let blocks = bits / 7;
    let payload = BitMessage::random(4 * blocks, rng);
    let mut channel = hamming_encode(&payload)?.bits().to_vec();
    channel.extend(BitMessage::random(bits - 7 * blocks, rng).bits());
    Ok(PlannedMessage {
        channel: BitMessage::new(channel)?,
        payload: Some(payload),
    })
}

/// Exact recovery of the payload after Hamming decoding the coded prefix.
pub fn ecc_exact(decoded: &BitMessage, payload: &BitMessage) -> Result<bool> {
    let coded = BitMessage::new(decoded.bits()[..payload.len() / 4 * 7].to_vec())?;
    Ok(&hamming_decode(&coded)? == payload)
}

/// Decoding results on one (possibly attacked) watermarked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub scores: Vec<f64>,
    pub bit_accuracy: f64,
    pub bit_accuracy_counting: f64,
    pub exact: bool,
    pub exact_ecc: Option<bool>,
    pub z_folded: f64,
}

/// Everything measured for one paired sequence of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutcome {
    pub watermarked: SequenceRecord,
    pub plain: SequenceRecord,
    pub mean_entropy: f64,
    pub mean_kl: f64,
    /// Detector scores of the unwatermarked partner.
    pub negative_scores: Vec<f64>,
    /// Index 0 is the unattacked text, then the configured attacks in order.
    pub attacks: Vec<AttackOutcome>,
    pub encode_ms_per_token: Option<f64>,
    pub decode_ms: Option<f64>,
}

fn evaluate(
    text: &TokenSequence,
    cell: &Cell,
    message: &PlannedMessage,
    detectors: &[Detector],
) -> Result<AttackOutcome> {
    let report = detect(text, &cell.watermark, Some(&message.channel))?;
    let decoded = report.decoded();
    let counting = symbols_to_bits(&decode_counting(text, &cell.watermark));
    Ok(AttackOutcome {
        scores: detectors.iter().map(|d| d.score(&report)).collect(),
        bit_accuracy: bit_accuracy(&message.channel, &decoded)?,
        bit_accuracy_counting: bit_accuracy(&message.channel, &counting)?,
        exact: decoded == message.channel,
        exact_ecc: message
            .payload
            .as_ref()
            .map(|p| ecc_exact(&decoded, p))
            .transpose()?,
        z_folded: report.z_folded,
    })
}

/// Generates, attacks and decodes sequence `index` of `cell`.
///
/// Prompts, messages and sampling seeds depend only on the experiment seed,
/// the payload length, the sequence length and `index`, so cells that differ
/// only in the watermark configuration are paired sequence by sequence.
pub fn evaluate_sequence(
    cfg: &ExperimentConfig,
    lm: &MarkovModel,
    cell: &Cell,
    index: usize,
) -> Result<SequenceOutcome> {
    let base = derive_seed(&[
        cfg.seed,
        cell.message_bits as u64,
        cell.max_new_tokens as u64,
        index as u64,
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[base, 1]));
    let message = plan_message(cell.message_bits, cfg.ecc, &mut rng)?;
    let prompt = random_prompt(cfg.lm.vocab, cfg.prompt_len, &mut rng);
    let gen_seed = derive_seed(&[base, 2]);
    let opts = cfg.generation(cell.max_new_tokens);

    let start = Instant::now();
    let (wm, traces) = embed_sequence(
        lm,
        &prompt,
        &message.channel,
        &cell.watermark,
        &opts,
        gen_seed,
    )?;
    let encode_ms = start.elapsed().as_secs_f64() * 1e3 / traces.len().max(1) as f64;
    let (plain, _) = generate_unwatermarked(lm, &prompt, &opts, gen_seed)?;

    let start = Instant::now();
    let unattacked = evaluate(&wm, cell, &message, &cfg.detectors)?;
    let decode_ms = start.elapsed().as_secs_f64() * 1e3;

    let negative = detect(&plain, &cell.watermark, Some(&message.channel))?;
    let mut attacks = vec![unattacked];
    for (a, spec) in cfg.attacks.iter().enumerate() {
        let filler = if spec.kind == AttackKind::CopyPaste {
            let needed = filler_needed(wm.len() - wm.prompt_len, spec.ratio);
            let filler_opts = GenerationOptions {
                max_new_tokens: needed,
                min_new_tokens: needed,
                ..opts.clone()
            };
            generate_unwatermarked(lm, &prompt, &filler_opts, derive_seed(&[base, 3]))?.0
        } else {
            TokenSequence::new(Vec::new(), 0)?
        };
        let attacked = spec.apply(
            &wm,
            cfg.lm.vocab,
            &filler,
            derive_seed(&[base, 4, a as u64]),
        )?;
        attacks.push(evaluate(&attacked, cell, &message, &cfg.detectors)?);
    }

    let steps = traces.len().max(1) as f64;
    Ok(SequenceOutcome {
        watermarked: SequenceRecord::new(
            &cell.key(),
            index,
            &wm,
            Some(&message.channel),
            &cell.watermark,
        ),
        plain: SequenceRecord::new(&cell.key(), index, &plain, None, &cell.watermark),
        mean_entropy: traces.iter().map(|t| t.entropy).sum::<f64>() / steps,
        mean_kl: traces.iter().map(|t| t.kl).sum::<f64>() / steps,
        negative_scores: cfg.detectors.iter().map(|d| d.score(&negative)).collect(),
        attacks,
        encode_ms_per_token: cfg.measure_timing.then_some(encode_ms),
        decode_ms: cfg.measure_timing.then_some(decode_ms),
    })
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    lm: &MarkovModel,
    cell: &Cell,
) -> Result<Vec<SequenceOutcome>> {
    cell.watermark.validate()?;
    (0..cfg.sequences_per_cell)
        .into_par_iter()
        .map(|i| evaluate_sequence(cfg, lm, cell, i))
        .collect()
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema: String,
    pub variant: String,
    pub message_bits: usize,
    pub max_new_tokens: usize,
    pub groups_k: usize,
    pub layers_m: usize,
    pub leaves_n: usize,
    pub window_c: usize,
    pub attack: String,
    pub detector: String,
    pub sequences: usize,
    pub auc: f64,
    pub best_f1: f64,
    pub bit_accuracy: f64,
    pub bit_accuracy_counting: f64,
    pub me_rate: f64,
    pub me_rate_ecc: Option<f64>,
    pub mean_abs_z: f64,
    pub mean_entropy: f64,
    pub mean_kl: f64,
    pub encode_ms_per_token: Option<f64>,
    pub decode_ms_per_sequence: Option<f64>,
}

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &[&str] = &[
    "schema",
    "variant",
    "message_bits",
    "max_new_tokens",
    "groups_k",
    "layers_m",
    "leaves_n",
    "window_c",
    "attack",
    "detector",
    "sequences",
    "auc",
    "best_f1",
    "bit_accuracy",
    "bit_accuracy_counting",
    "me_rate",
    "me_rate_ecc",
    "mean_abs_z",
    "mean_entropy",
    "mean_kl",
    "encode_ms_per_token",
    "decode_ms_per_sequence",
];

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

pub fn cell_rows(
    cfg: &ExperimentConfig,
    cell: &Cell,
    outcomes: &[SequenceOutcome],
) -> Result<Vec<MetricsRow>> {
    let mut labels = vec!["none".to_string()];
    labels.extend(cfg.attacks.iter().map(AttackSpec::label));
    let encode = median(
        outcomes
            .iter()
            .filter_map(|o| o.encode_ms_per_token)
            .collect(),
    );
    let decode = median(outcomes.iter().filter_map(|o| o.decode_ms).collect());
    let mut rows = Vec::new();
    for (a, label) in labels.iter().enumerate() {
        let results: Vec<&AttackOutcome> = outcomes.iter().map(|o| &o.attacks[a]).collect();
        let n = results.len() as f64;
        for (d, detector) in cfg.detectors.iter().enumerate() {
            let pos: Vec<f64> = results.iter().map(|r| r.scores[d]).collect();
            let neg: Vec<f64> = outcomes.iter().map(|o| o.negative_scores[d]).collect();
            rows.push(MetricsRow {
                schema: METRICS_SCHEMA.into(),
                variant: cell.variant.clone(),
                message_bits: cell.message_bits,
                max_new_tokens: cell.max_new_tokens,
                groups_k: cell.watermark.groups_k,
                layers_m: cell.watermark.layers_m,
                leaves_n: cell.watermark.leaves_n,
                window_c: cell.watermark.window_c,
                attack: label.clone(),
                detector: detector.name().into(),
                sequences: results.len(),
                auc: compute_auc(&pos, &neg)?,
                best_f1: compute_best_f1(&pos, &neg)?,
                bit_accuracy: mean(results.iter().map(|r| r.bit_accuracy)),
                bit_accuracy_counting: mean(results.iter().map(|r| r.bit_accuracy_counting)),
                me_rate: results.iter().filter(|r| r.exact).count() as f64 / n,
                me_rate_ecc: cfg.ecc.then(|| {
                    results.iter().filter(|r| r.exact_ecc == Some(true)).count() as f64 / n
                }),
                mean_abs_z: mean(results.iter().map(|r| r.z_folded.abs())),
                mean_entropy: mean(outcomes.iter().map(|o| o.mean_entropy)),
                mean_kl: mean(outcomes.iter().map(|o| o.mean_kl)),
                encode_ms_per_token: encode,
                decode_ms_per_sequence: decode,
            });
        }
    }
    Ok(rows)
}

/// Rows and raw sequences of a benchmark run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkOutput {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<SequenceRecord>,
}

impl BenchmarkOutput {
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_sequences(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::json(path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `metrics.csv` and `sequences.jsonl` into `dir`, creating it.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_metrics(&dir.join("metrics.csv"))?;
        self.write_sequences(&dir.join("sequences.jsonl"))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(path, e))
}

/// Runs `cells` in order; outputs are merged by cell position, not by
/// completion order.
pub fn run_cells(cfg: &ExperimentConfig, cells: &[Cell]) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    let lm = cfg.lm.build()?;
    let per_cell: Vec<(Vec<MetricsRow>, Vec<SequenceRecord>)> = cells
        .par_iter()
        .map(|cell| {
            let outcomes = run_cell(cfg, &lm, cell)?;
            let rows = cell_rows(cfg, cell, &outcomes)?;
            let records = outcomes
                .into_iter()
                .flat_map(|o| [o.watermarked, o.plain])
                .collect();
            Ok((rows, records))
        })
        .collect::<Result<_>>()?;
    let mut out = BenchmarkOutput::default();
    for (rows, records) in per_cell {
        out.rows.extend(rows);
        out.records.extend(records);
    }
    Ok(out)
}

/// Every (payload length, sequence length) cell of the configured watermark.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    let cells: Vec<Cell> = cfg
        .message_bits
        .iter()
        .flat_map(|&b| {
            cfg.max_new_tokens
                .iter()
                .map(move |&t| Cell::new("main", &cfg.watermark, b, t))
        })
        .collect();
    run_cells(cfg, &cells)
}

/// A named change to the watermark configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Full,
    /// Fixed `lambda = 1` instead of the entropy-scaled factor.
    NoEntropy,
    /// `lambda = 0`: no subtraction of the opposing family.
    NoMinus,
    /// An independent random family instead of the complement.
    NoComplementary,
    Groups(usize),
    Layers(usize),
    Leaves(usize),
    Window(usize),
}

impl Variant {
    /// The default ablation grid.
    pub fn grid() -> Vec<Variant> {
        let mut v = vec![
            Variant::Full,
            Variant::NoEntropy,
            Variant::NoMinus,
            Variant::NoComplementary,
        ];
        v.extend([1, 2, 4].map(Variant::Groups));
        v.extend([5, 10, 20, 30, 50].map(Variant::Layers));
        v.extend([2, 3, 4].map(Variant::Leaves));
        v.extend([1, 2, 3, 4].map(Variant::Window));
        v
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoEntropy => "no-entropy".into(),
            Variant::NoMinus => "no-minus".into(),
            Variant::NoComplementary => "no-complementary".into(),
            Variant::Groups(k) => format!("k={k}"),
            Variant::Layers(m) => format!("m={m}"),
            Variant::Leaves(n) => format!("n={n}"),
            Variant::Window(c) => format!("c={c}"),
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let bad = || Error::InvalidConfig(format!("unknown variant {s:?}"));
        Ok(match s {
            "full" => Variant::Full,
            "no-entropy" => Variant::NoEntropy,
            "no-minus" => Variant::NoMinus,
            "no-complementary" => Variant::NoComplementary,
            _ => {
                let (name, value) = s.split_once('=').ok_or_else(bad)?;
                let value: usize = value.parse().map_err(|_| bad())?;
                match name {
                    "k" => Variant::Groups(value),
                    "m" => Variant::Layers(value),
                    "n" => Variant::Leaves(value),
                    "c" => Variant::Window(value),
                    _ => return Err(bad()),
                }
            }
        })
    }

    pub fn apply(&self, base: &WatermarkConfig) -> WatermarkConfig {
        let mut cfg = base.clone();
        match *self {
            Variant::Full => {}
            Variant::NoEntropy => cfg.lambda_mode = LambdaMode::Fixed(1.0),
            Variant::NoMinus => cfg.lambda_mode = LambdaMode::Fixed(0.0),
            Variant::NoComplementary => cfg.second_family = SecondFamily::RandomIndependent,
            Variant::Groups(k) => cfg.groups_k = k,
            Variant::Layers(m) => cfg.layers_m = m,
            Variant::Leaves(n) => cfg.leaves_n = n,
            Variant::Window(c) => cfg.window_c = c,
        }
        cfg
    }
}

/// Runs each variant on every (payload, length) cell. Sequences are paired
/// across variants.
pub fn sweep_ablations(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<BenchmarkOutput> {
    let mut cells = Vec::new();
    for v in variants {
        let wm = v.apply(&cfg.watermark);
        for &b in &cfg.message_bits {
            for &t in &cfg.max_new_tokens {
                cells.push(Cell::new(&v.name(), &wm, b, t));
            }
        }
    }
    run_cells(cfg, &cells)
}

/// Summary of one statistic over unwatermarked text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub mean: f64,
    pub variance: f64,
    pub q50: f64,
    pub q95: f64,
    pub q99: f64,
    pub q999: f64,
    /// Fraction of sequences with a statistic above 4.
    pub tail_above_4: f64,
    pub pass: bool,
}

impl NullSummary {
    fn new(mut xs: Vec<f64>, mean_band: f64, var_band: (f64, f64), tail_max: Option<f64>) -> Self {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let tail = xs.iter().filter(|&&x| x > 4.0).count() as f64 / n;
        xs.sort_by(f64::total_cmp);
        let q = |p: f64| xs[((p * n).ceil() as usize).clamp(1, xs.len()) - 1];
        NullSummary {
            mean: m,
            variance: var,
            q50: q(0.5),
            q95: q(0.95),
            q99: q(0.99),
            q999: q(0.999),
            tail_above_4: tail,
            pass: m.abs() <= mean_band
                && (var_band.0..=var_band.1).contains(&var)
                && tail_max.is_none_or(|t| tail <= t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema: String,
    pub sequences: usize,
    pub message_bits: usize,
    pub max_new_tokens: usize,
    pub z_signed: NullSummary,
    pub z_folded: NullSummary,
}

/// Null distribution of both z statistics over `n_sequences` unwatermarked
/// generations at the first configured payload and sequence length.
///
/// Bands: signed mean within 0.1, variance in [0.85, 1.15], P(z > 4) at most
/// 1e-3; folded mean within 0.15, variance in [0.8, 1.2].
pub fn calibrate_null(cfg: &ExperimentConfig, n_sequences: usize) -> Result<CalibrationReport> {
    cfg.validate()?;
    if n_sequences < 100 {
        return Err(Error::InvalidConfig(
            "calibration needs at least 100 sequences".into(),
        ));
    }
    let lm = cfg.lm.build()?;
    let bits = cfg.message_bits[0];
    let len = cfg.max_new_tokens[0];
    let wm = WatermarkConfig {
        message_bits_b: bits,
        ..cfg.watermark.clone()
    };
    let opts = cfg.generation(len);
    let z: Vec<(f64, f64)> = (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let base = derive_seed(&[cfg.seed, bits as u64, len as u64, i as u64, 0xCA11]);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[base, 1]));
            let prompt = random_prompt(cfg.lm.vocab, cfg.prompt_len, &mut rng);
            let (plain, _) = generate_unwatermarked(&lm, &prompt, &opts, derive_seed(&[base, 2]))?;
            let report = detect(&plain, &wm, None)?;
            Ok((report.z_signed, report.z_folded))
        })
        .collect::<Result<_>>()?;
    Ok(CalibrationReport {
        schema: CALIBRATION_SCHEMA.into(),
        sequences: n_sequences,
        message_bits: bits,
        max_new_tokens: len,
        z_signed: NullSummary::new(
            z.iter().map(|p| p.0).collect(),
            0.1,
            (0.85, 1.15),
            Some(1e-3),
        ),
        z_folded: NullSummary::new(z.iter().map(|p| p.1).collect(), 0.15, (0.8, 1.2), None),
    })
}

/// Area under the ROC curve: `P(pos > neg) + 0.5 P(pos = neg)`.
pub fn compute_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut neg = neg.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// Best F1 of `score >= threshold` over every distinct score as threshold.
pub fn compute_best_f1(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    // Descending; lowering the threshold past a block of equal scores admits
    // the whole block.
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let p = pos.len() as f64;
    let (mut tp, mut fp, mut best) = (0.0, 0.0, 0.0f64);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        best = best.max(2.0 * tp / (2.0 * tp + fp + (p - tp)));
    }
    Ok(best)
}

pub fn bit_accuracy(truth: &BitMessage, decoded: &BitMessage) -> Result<f64> {
    if truth.len() != decoded.len() {
        return Err(Error::VectorLength {
            expected: truth.len(),
            actual: decoded.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty);
    }
    let same = truth
        .bits()
        .iter()
        .zip(decoded.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / truth.len() as f64)
}

/// Fraction of pairs recovered exactly.
pub fn me_rate(pairs: &[(BitMessage, BitMessage)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty);
    }
    let mut exact = 0;
    for (t, d) in pairs {
        if bit_accuracy(t, d)? == 1.0 {
            exact += 1;
        }
    }
    Ok(exact as f64 / pairs.len() as f64)
}
