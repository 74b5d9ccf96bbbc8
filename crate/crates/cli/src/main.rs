use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use worldcup::attacks::{AttackKind, AttackSpec};
use worldcup::decoder::{decode_counting, detect};
use worldcup::embedder::{embed_sequence, generate_unwatermarked};
use worldcup::harness::{
    bit_accuracy, calibrate_null, derive_seed, run_benchmark, sweep_ablations, ExperimentConfig,
    SequenceRecord, Variant,
};
use worldcup::toylm::{random_prompt, RowKind};
use worldcup::types::{symbols_to_bits, BitMessage, TokenSequence, WatermarkConfig};

#[derive(Parser)]
#[command(
    name = "worldcup",
    version,
    about = "Multi-bit watermarking for token sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a starter experiment config with a fresh secret key.
    Keygen {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Derive the key from this seed instead of the OS generator.
        #[arg(long)]
        from_seed: Option<u64>,
    },
    /// Generate watermarked (or plain) sequences from the toy LM.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Payload as a 0/1 string; random per sequence when omitted.
        #[arg(long)]
        message: Option<String>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Generate without a watermark.
        #[arg(long)]
        plain: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover the payload of each sequence.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full detection report for each sequence.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply an edit attack to each sequence.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 1)]
        segments: usize,
        #[arg(long, default_value_t = 0)]
        attack_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the benchmark sweep; writes metrics.csv and sequences.jsonl.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Null distribution of the z statistics on unwatermarked text.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ablation variants over the sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants, e.g. full,no-minus,k=2,m=10.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Delete,
    Substitute,
    CopyPaste,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Delete => AttackKind::Delete,
            KindArg::Substitute => AttackKind::Substitute,
            KindArg::CopyPaste => AttackKind::CopyPaste,
        }
    }
}

/// Config file plus overrides shared by every command.
#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    key: Option<u64>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    leaves: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    no_ecc: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let wm = &mut cfg.watermark;
        set(&mut cfg.seed, self.seed);
        set(&mut wm.key, self.key);
        set(&mut wm.groups_k, self.groups);
        set(&mut wm.layers_m, self.layers);
        set(&mut wm.leaves_n, self.leaves);
        set(&mut wm.window_c, self.window);
        set(&mut wm.alpha, self.alpha);
        set(&mut cfg.message_bits, self.bits.clone());
        set(&mut cfg.max_new_tokens, self.tokens.clone());
        set(&mut cfg.sequences_per_cell, self.sequences);
        set(&mut cfg.lm.vocab, self.vocab);
        if let Some(c) = self.concentration {
            cfg.lm.rows = RowKind::Dirichlet { concentration: c };
        }
        if self.no_ecc {
            cfg.ecc = false;
        }
        cfg.watermark.message_bits_b = cfg.message_bits[0];
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_records(path: &Path) -> Result<Vec<SequenceRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SequenceRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: bad sequence record", path.display(), i + 1))?;
        records.push(r);
    }
    Ok(records)
}

fn write_json_lines<T: Serialize>(out: &mut dyn Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Watermark config for a record: its own payload length when it has one.
fn record_config(cfg: &ExperimentConfig, r: &SequenceRecord) -> WatermarkConfig {
    let bits = r
        .message_bits
        .as_ref()
        .map_or(cfg.message_bits[0], String::len);
    WatermarkConfig {
        message_bits_b: bits,
        ..cfg.watermark.clone()
    }
}

#[derive(Serialize)]
struct DecodeLine {
    index: usize,
    message: String,
    counting: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bit_accuracy: Option<f64>,
}

fn embed(
    common: &Common,
    message: Option<&str>,
    count: usize,
    plain: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = common.load()?;
    let fixed = message.map(BitMessage::parse).transpose()?;
    if let Some(m) = &fixed {
        cfg.watermark.message_bits_b = m.len();
        cfg.watermark.validate()?;
    }
    let lm = cfg.lm.build()?;
    let len = cfg.max_new_tokens[0];
    let opts = cfg.generation(len);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let base = derive_seed(&[cfg.seed, 0xE3BE, i as u64]);
        let mut rng = StdRng::seed_from_u64(derive_seed(&[base, 1]));
        let prompt = random_prompt(cfg.lm.vocab, cfg.prompt_len, &mut rng);
        let gen_seed = derive_seed(&[base, 2]);
        let record = if plain {
            let (seq, _) = generate_unwatermarked(&lm, &prompt, &opts, gen_seed)?;
            SequenceRecord::new("embed", i, &seq, None, &cfg.watermark)
        } else {
            let msg = match &fixed {
                Some(m) => m.clone(),
                None => BitMessage::random(cfg.watermark.message_bits_b, &mut rng),
            };
            let (seq, _) = embed_sequence(&lm, &prompt, &msg, &cfg.watermark, &opts, gen_seed)?;
            SequenceRecord::new("embed", i, &seq, Some(&msg), &cfg.watermark)
        };
        records.push(record);
    }
    write_json_lines(&mut *output(out)?, &records)
}

fn decode(common: &Common, input: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let mut lines = Vec::new();
    for r in read_records(input)? {
        let wm = record_config(&cfg, &r);
        let text = r.sequence()?;
        let expected = r.message()?;
        let report = detect(&text, &wm, expected.as_ref().map(|m| m as &BitMessage))?;
        let decoded = report.decoded();
        let counting = symbols_to_bits(&decode_counting(&text, &wm));
        lines.push(DecodeLine {
            index: r.index,
            message: decoded.to_string(),
            counting: counting.to_string(),
            bit_accuracy: expected
                .as_ref()
                .map(|m| bit_accuracy(m, &decoded))
                .transpose()?,
            expected: r.message_bits.clone(),
        });
    }
    write_json_lines(&mut *output(out)?, &lines)
}

fn detect_cmd(common: &Common, input: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let mut reports = Vec::new();
    for r in read_records(input)? {
        let wm = record_config(&cfg, &r);
        reports.push(detect(&r.sequence()?, &wm, None)?);
    }
    write_json_lines(&mut *output(out)?, &reports)
}

fn attack(common: &Common, input: &Path, spec: &AttackSpec, out: Option<&Path>) -> Result<()> {
    spec.validate()?;
    let cfg = common.load()?;
    let lm = cfg.lm.build()?;
    let mut attacked = Vec::new();
    for r in read_records(input)? {
        let wm = record_config(&cfg, &r);
        let text = r.sequence()?;
        let base = derive_seed(&[cfg.seed, 0xA77A, r.index as u64]);
        let filler = if spec.kind == AttackKind::CopyPaste {
            let needed = worldcup::attacks::filler_needed(text.len() - text.prompt_len, spec.ratio);
            let prompt =
                TokenSequence::new(text.tokens[..text.prompt_len].to_vec(), text.prompt_len)?;
            let mut opts = cfg.generation(needed);
            opts.min_new_tokens = needed;
            generate_unwatermarked(&lm, &prompt, &opts, derive_seed(&[base, 3]))?.0
        } else {
            TokenSequence::new(Vec::new(), 0)?
        };
        let seq = spec.apply(&text, cfg.lm.vocab, &filler, base)?;
        let mut rec = SequenceRecord::new(&r.cell, r.index, &seq, r.message()?.as_ref(), &wm);
        rec.cell = format!("{}+{}", r.cell, spec.label());
        attacked.push(rec);
    }
    write_json_lines(&mut *output(out)?, &attacked)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Keygen { out, from_seed } => {
            let key = match from_seed {
                Some(s) => derive_seed(&[s, 0x4B45]),
                None => rand::rng().random(),
            };
            let mut cfg = ExperimentConfig::default();
            cfg.watermark.key = key;
            let mut w = output(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &cfg)?;
            writeln!(w)?;
            w.flush()?;
        }
        Command::Embed {
            common,
            message,
            count,
            plain,
            out,
        } => {
            if plain && message.is_some() {
                bail!("--plain and --message are mutually exclusive");
            }
            embed(&common, message.as_deref(), count, plain, out.as_deref())?
        }
        Command::Decode { common, input, out } => decode(&common, &input, out.as_deref())?,
        Command::Detect { common, input, out } => detect_cmd(&common, &input, out.as_deref())?,
        Command::Attack {
            common,
            input,
            kind,
            ratio,
            segments,
            attack_seed,
            out,
        } => {
            let spec = AttackSpec {
                kind: kind.into(),
                ratio,
                segments,
                seed: attack_seed,
            };
            attack(&common, &input, &spec, out.as_deref())?
        }
        Command::Bench { common, out } => {
            let cfg = common.load()?;
            run_benchmark(&cfg)?.write_to(&out)?;
        }
        Command::Calibrate { common, n, out } => {
            let cfg = common.load()?;
            let report = calibrate_null(&cfg, n)?;
            let mut w = output(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            w.flush()?;
        }
        Command::Ablate {
            common,
            variants,
            out,
        } => {
            let cfg = common.load()?;
            let variants = if variants.is_empty() {
                Variant::grid()
            } else {
                variants
                    .iter()
                    .map(|v| Variant::parse(v))
                    .collect::<worldcup::Result<Vec<_>>>()?
            };
            sweep_ablations(&cfg, &variants)?.write_to(&out)?;
        }
    }
    Ok(())
}
