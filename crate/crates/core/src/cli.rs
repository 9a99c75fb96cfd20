//! Command-line driver: configuration loading, subcommands and artifact
//! writing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::artifact::{jsonl_with_header, sha256_hex, write_atomic, ArtifactHeader, CODE_VERSION};
use crate::corpus::{corpus_stats, corpus_to_string, parse_corpus, synth_corpus, word_tokens, Dialogue, StructureRule, SynthSpec};
use crate::inference::{
    real_world_step, split_continuation, DecodeOptions, generate_response, predict_structure, GenerationResult,
};
use crate::metrics::{precision_at_1, EvalReport, SlotPrecision};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, ModelParams};
use crate::structuralizer::{structuralize_dialogue, ResponseStructure, Role};
use crate::tokenizer::{build_vocab, Vocab, DEFAULT_MMAX, DEFAULT_NMAX};
use crate::training::{masking_sweep, render_sweep, train, Phase, SweepSetup, TrainConfig, TrainData};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub nmax: usize,
    pub mmax: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            nmax: DEFAULT_NMAX,
            mmax: DEFAULT_MMAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub p_values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            p_values: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Everything a run needs. Loaded from TOML, then `--set` overrides, then
/// subcommand flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the synth, init and training seeds.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub post: TrainConfig,
    pub fine: TrainConfig,
    pub decode: DecodeOptions,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            paths: Paths::default(),
            synth: SynthSpec::default(),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            post: TrainConfig::default(),
            fine: TrainConfig {
                phase: Phase::Fine,
                ..TrainConfig::default()
            },
            decode: DecodeOptions::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> anyhow::Result<()> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| anyhow!("empty key in {key:?}"))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("{p} in {key:?} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text and apply `key=value` overrides (dotted keys).
    pub fn load(text: Option<&str>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).context("parsing configuration")?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not KEY=VALUE"))?;
            set_dotted(&mut table, k.trim(), v.trim())?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(s) = cfg.seed {
            cfg.synth.seed = s;
            cfg.model.init_seed = s;
            cfg.post.seed = s;
            cfg.fine.seed = s;
        }
        cfg.post.phase = Phase::Post;
        cfg.fine.phase = Phase::Fine;
        Ok(cfg)
    }

    /// Digest of the configuration, paths excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mpcgen", version, about = "Structure-aware response generation for multi-party dialogue")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "MPCGEN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set post.p=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for synthesis, initialization and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reject invalid corpus records instead of skipping them.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint to start from (otherwise fresh initialization).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Where to write the best checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-curve records (default: `<out>.loss.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub enforce_consistency: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rule: Option<StructureRule>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Corpus statistics.
    Stats {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the vocabulary listing.
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_freq: Option<usize>,
        #[arg(long)]
        nmax: Option<usize>,
        #[arg(long)]
        mmax: Option<usize>,
    },
    /// Encoder post-training with structure masking.
    PostTrain(TrainArgs),
    /// Response-generation fine-tuning.
    FineTune(TrainArgs),
    /// Generate responses into a predictions file.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Hide the response target and addressee and predict them.
        #[arg(long)]
        mask_structure: bool,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Predict masked response-slot structure with confidences.
    PredictStructure {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Real-world loop: predict structure and generate turn after turn.
    Loop {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score a predictions file against a gold corpus.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masking-rate sweep: none plus each p.
    SweepP {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
    },
}

/// One predicted slot in a predictions record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSlot {
    pub value: Option<usize>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub response_text: String,
    /// Keys `target_index`, `speaker`, `addressee` for slots that were masked.
    pub predicted_structure: BTreeMap<String, PredictedSlot>,
}

fn slot_name(role: Role) -> Option<&'static str> {
    match role {
        Role::RespTgtIdx => Some("target_index"),
        Role::RespSpk => Some("speaker"),
        Role::RespAdr => Some("addressee"),
        _ => None,
    }
}

impl PredictionRecord {
    pub fn new(d: &Dialogue, g: &GenerationResult) -> Self {
        PredictionRecord {
            dialogue_id: d.id.clone(),
            response_text: g.text.clone(),
            predicted_structure: g
                .predicted
                .iter()
                .filter_map(|p| {
                    slot_name(p.role).map(|k| {
                        (
                            k.to_string(),
                            PredictedSlot {
                                value: p.value,
                                confidence: p.confidence,
                            },
                        )
                    })
                })
                .collect(),
        }
    }
}

fn need(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("--{name} is required (or set paths.{name} in the configuration)"))
}

fn read_corpus(path: &Path, strict: bool) -> anyhow::Result<Vec<Dialogue>> {
    let parsed = parse_corpus(path, strict)?;
    if parsed.skipped > 0 {
        eprintln!("{}: skipped {} invalid records", path.display(), parsed.skipped);
    }
    Ok(parsed.dialogues)
}

fn read_vocab(path: &Path) -> anyhow::Result<Vocab> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Vocab::from_text(&text)?)
}

fn load_model(path: &Path, vocab: &Vocab) -> anyhow::Result<ModelParams<f32>> {
    let ck = load_checkpoint::<f32>(path, Some(&vocab.digest())).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.params)
}

fn decode_options(base: DecodeOptions, args: &DecodeArgs) -> anyhow::Result<DecodeOptions> {
    let opts = DecodeOptions {
        beam_size: args.beam.unwrap_or(base.beam_size),
        max_len: args.max_len.unwrap_or(base.max_len),
        enforce_consistency: base.enforce_consistency || args.enforce_consistency,
    };
    opts.validate()?;
    Ok(opts)
}

fn default_structure(d: &Dialogue, mask: bool) -> ResponseStructure {
    match &d.response {
        Some(r) if mask => ResponseStructure::speaker_only(r.speaker),
        Some(r) => ResponseStructure::from_utterance(r),
        None => ResponseStructure::default(),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(text.as_deref(), &overrides)?;
    let digest = cfg.digest();
    let strict = cli.strict;

    match cli.command {
        Command::Synth { out, rule, count } => {
            let mut spec = cfg.synth.clone();
            if let Some(r) = rule {
                spec.structure_rule = r;
            }
            if let Some(c) = count {
                spec.dialogue_count = c;
            }
            let corpus = synth_corpus(&spec)?;
            let header = ArtifactHeader::new("corpus", &digest, spec.seed);
            let mut text = serde_json::to_string(&serde_json::json!({ "header": header }))?;
            text.push('\n');
            text.push_str(&corpus_to_string(&corpus));
            write_atomic(&out, text.as_bytes())?;
        }
        Command::Stats { corpus, out } => {
            let path = need(corpus, &cfg.paths.corpus, "corpus")?;
            let stats = corpus_stats(&read_corpus(&path, strict)?)?;
            match out {
                Some(out) => {
                    let header = ArtifactHeader::new("stats", &digest, cfg.synth.seed);
                    write_atomic(&out, jsonl_with_header(&header, &[stats])?.as_bytes())?;
                }
                None => println!("{}", serde_json::to_string_pretty(&stats)?),
            }
        }
        Command::BuildVocab {
            corpus,
            out,
            min_freq,
            nmax,
            mmax,
        } => {
            let path = need(corpus, &cfg.paths.corpus, "corpus")?;
            let corpus = read_corpus(&path, strict)?;
            let vocab = build_vocab(
                &corpus,
                min_freq.unwrap_or(cfg.vocab.min_freq),
                nmax.unwrap_or(cfg.vocab.nmax),
                mmax.unwrap_or(cfg.vocab.mmax),
            )?;
            let listing = vocab.to_text();
            let (first, rest) = listing.split_once('\n').expect("vocab header line");
            let text = format!("{first}\tconfig={digest}\tseed={}\tversion={CODE_VERSION}\n{rest}", cfg.synth.seed);
            write_atomic(&out, text.as_bytes())?;
            eprintln!("vocabulary: {} ids ({} base)", vocab.size(), vocab.base_size());
        }
        Command::PostTrain(args) => run_train(&cfg, &digest, Phase::Post, args, strict)?,
        Command::FineTune(args) => run_train(&cfg, &digest, Phase::Fine, args, strict)?,
        Command::Generate {
            model,
            out,
            mask_structure,
            decode,
        } => {
            let vocab = read_vocab(&need(model.vocab, &cfg.paths.vocab, "vocab")?)?;
            let params = load_model(&model.checkpoint, &vocab)?;
            let corpus = read_corpus(&need(model.corpus, &cfg.paths.corpus, "corpus")?, strict)?;
            let opts = decode_options(cfg.decode, &decode)?;
            let records = corpus
                .iter()
                .map(|d| {
                    let g = generate_response(&params, &vocab, d, default_structure(d, mask_structure), &opts)?;
                    Ok(PredictionRecord::new(d, &g))
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let header = ArtifactHeader::new("predictions", &digest, cfg.fine.seed);
            write_atomic(&out, jsonl_with_header(&header, &records)?.as_bytes())?;
        }
        Command::PredictStructure { model, out } => {
            let vocab = read_vocab(&need(model.vocab, &cfg.paths.vocab, "vocab")?)?;
            let params = load_model(&model.checkpoint, &vocab)?;
            let corpus = read_corpus(&need(model.corpus, &cfg.paths.corpus, "corpus")?, strict)?;
            let mut records = Vec::with_capacity(corpus.len());
            let (mut pred, mut gold) = (BTreeMap::<&str, Vec<Option<usize>>>::new(), BTreeMap::<&str, Vec<Option<usize>>>::new());
            for d in &corpus {
                let s = structuralize_dialogue(d, default_structure(d, true), &vocab)?;
                let slots = predict_structure(&params, &vocab, &s)?;
                let mut trace = Vec::new();
                for p in &slots {
                    let gold_value = d.response.as_ref().and_then(|r| match p.role {
                        Role::RespTgtIdx => r.target_index,
                        Role::RespAdr => r.addressee,
                        _ => None,
                    });
                    if let (Some(name), Some(g)) = (slot_name(p.role), gold_value) {
                        pred.entry(name).or_default().push(p.value);
                        gold.entry(name).or_default().push(Some(g));
                    }
                    trace.push(serde_json::json!({
                        "owner": p.owner,
                        "role": p.role,
                        "value": p.value,
                        "confidence": p.confidence,
                        "gold": gold_value,
                    }));
                }
                records.push(serde_json::json!({ "dialogue_id": d.id, "slots": trace }));
            }
            for (name, p) in &pred {
                let precision = precision_at_1(p, &gold[name])?;
                records.push(serde_json::json!({ "summary": name, "count": p.len(), "precision": precision }));
            }
            let header = ArtifactHeader::new("structure-predictions", &digest, cfg.post.seed);
            write_atomic(&out, jsonl_with_header(&header, &records)?.as_bytes())?;
        }
        Command::Loop {
            model,
            out,
            steps,
            decode,
        } => {
            let vocab = read_vocab(&need(model.vocab, &cfg.paths.vocab, "vocab")?)?;
            let params = load_model(&model.checkpoint, &vocab)?;
            let corpus = read_corpus(&need(model.corpus, &cfg.paths.corpus, "corpus")?, strict)?;
            let opts = decode_options(cfg.decode, &decode)?;
            let mut records = Vec::new();
            let (mut pt, mut gt, mut pa, mut ga) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let (mut checked, mut consistent) = (0usize, 0usize);
            for d in &corpus {
                let Some((mut history, tail)) = split_continuation(d, steps) else { continue };
                for (k, u) in tail.iter().enumerate() {
                    let step = real_world_step(&params, &vocab, &history, u.speaker, &opts)?;
                    let s = step.result.structure;
                    if let Some(c) = step.consistent {
                        checked += 1;
                        consistent += usize::from(c);
                    }
                    pt.push(s.target.value());
                    gt.push(u.target_index);
                    pa.push(s.addressee.value());
                    ga.push(u.addressee);
                    records.push(serde_json::json!({
                        "dialogue_id": d.id,
                        "step": k + 1,
                        "index": step.history.len(),
                        "speaker": u.speaker,
                        "target_index": s.target.value(),
                        "addressee": s.addressee.value(),
                        "gold_target_index": u.target_index,
                        "gold_addressee": u.addressee,
                        "consistent": step.consistent,
                        "text": step.result.text,
                    }));
                    history = step.history;
                }
            }
            if pt.is_empty() {
                bail!("no dialogue is longer than {steps} utterances");
            }
            records.push(serde_json::json!({
                "summary": "loop",
                "steps": pt.len(),
                "target_precision": precision_at_1(&pt, &gt)?,
                "addressee_precision": precision_at_1(&pa, &ga)?,
                "consistency_rate": if checked == 0 { 0.0 } else { consistent as f64 / checked as f64 },
            }));
            let header = ArtifactHeader::new("loop", &digest, cfg.fine.seed);
            write_atomic(&out, jsonl_with_header(&header, &records)?.as_bytes())?;
        }
        Command::Evaluate { predictions, gold, out } => {
            let gold = read_corpus(&need(gold, &cfg.paths.test, "gold")?, strict)?;
            let text = std::fs::read_to_string(&predictions).with_context(|| format!("reading {}", predictions.display()))?;
            let by_id: BTreeMap<&str, &Dialogue> = gold.iter().map(|d| (d.id.as_str(), d)).collect();
            let (mut cands, mut refs) = (Vec::new(), Vec::new());
            let mut slots: BTreeMap<String, (Vec<Option<usize>>, Vec<Option<usize>>)> = BTreeMap::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() || line.starts_with("{\"header\"") {
                    continue;
                }
                let rec: PredictionRecord =
                    serde_json::from_str(line).with_context(|| format!("{}:{}", predictions.display(), i + 1))?;
                let d = by_id
                    .get(rec.dialogue_id.as_str())
                    .ok_or_else(|| anyhow!("prediction for unknown dialogue {:?}", rec.dialogue_id))?;
                let r = d
                    .response
                    .as_ref()
                    .ok_or_else(|| anyhow!("dialogue {:?} has no gold response", rec.dialogue_id))?;
                cands.push(word_tokens(&rec.response_text));
                refs.push(r.tokens.clone());
                for (name, slot) in &rec.predicted_structure {
                    let g = match name.as_str() {
                        "target_index" => r.target_index,
                        "addressee" => r.addressee,
                        "speaker" => Some(r.speaker),
                        _ => None,
                    };
                    if let Some(g) = g {
                        let e = slots.entry(name.clone()).or_default();
                        e.0.push(slot.value);
                        e.1.push(Some(g));
                    }
                }
            }
            let mut report = EvalReport::from_pairs(&cands, &refs)?;
            for (slot, (p, g)) in slots {
                report.structure.push(SlotPrecision {
                    precision: precision_at_1(&p, &g)?,
                    count: p.len(),
                    slot,
                });
            }
            let header = ArtifactHeader::new("eval-report", &digest, cfg.fine.seed);
            write_atomic(&out, jsonl_with_header(&header, &report.records())?.as_bytes())?;
            print!("{}", report.render_table());
        }
        Command::SweepP {
            corpus,
            valid,
            test,
            vocab,
            out,
            p,
        } => {
            let vocab = read_vocab(&need(vocab, &cfg.paths.vocab, "vocab")?)?;
            let train_set = read_corpus(&need(corpus, &cfg.paths.corpus, "corpus")?, strict)?;
            let test_set = read_corpus(&need(test, &cfg.paths.test, "test")?, strict)?;
            let valid_set = valid
                .or_else(|| cfg.paths.valid.clone())
                .map(|v| read_corpus(&v, strict))
                .transpose()?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = vocab.size();
            let setup = SweepSetup {
                vocab: &vocab,
                train: &train_set,
                valid: valid_set.as_deref(),
                test: &test_set,
                post: cfg.post.clone(),
                fine: cfg.fine.clone(),
                decode: cfg.decode,
            };
            let p_values = p.unwrap_or_else(|| cfg.sweep.p_values.clone());
            let rows = masking_sweep(&|| ModelParams::init(&model_cfg), &setup, &p_values)?;
            let header = ArtifactHeader::new("sweep", &digest, cfg.post.seed);
            write_atomic(&out, jsonl_with_header(&header, &rows)?.as_bytes())?;
            print!("{}", render_sweep(&rows));
        }
    }
    Ok(())
}

fn run_train(cfg: &RunConfig, digest: &str, phase: Phase, args: TrainArgs, strict: bool) -> anyhow::Result<()> {
    let vocab = read_vocab(&need(args.vocab, &cfg.paths.vocab, "vocab")?)?;
    let corpus = read_corpus(&need(args.corpus, &cfg.paths.corpus, "corpus")?, strict)?;
    let valid = args
        .valid
        .or_else(|| cfg.paths.valid.clone())
        .map(|v| read_corpus(&v, strict))
        .transpose()?;

    let mut tc: TrainConfig = match phase {
        Phase::Post => cfg.post.clone(),
        Phase::Fine => cfg.fine.clone(),
    };
    tc.phase = phase;
    if let Some(p) = args.p {
        tc.p = p;
    }
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = args.lr {
        tc.lr = lr;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    if let Some(g) = args.grad_accum {
        tc.grad_accum = g;
    }

    let mut params = match &args.init {
        Some(path) => load_model(path, &vocab)?,
        None => ModelParams::init(&ModelConfig {
            vocab_size: vocab.size(),
            ..cfg.model.clone()
        })?,
    };
    let data = TrainData::prepare(phase, &corpus, &vocab)?;
    let valid_data = valid.as_ref().map(|v| TrainData::prepare(phase, v, &vocab)).transpose()?;
    let phase_name = match phase {
        Phase::Post => "post",
        Phase::Fine => "fine",
    };
    let meta = |epoch| CheckpointMeta {
        vocab_digest: vocab.digest(),
        config_digest: digest.to_string(),
        seed: tc.seed,
        phase: phase_name.to_string(),
        epoch,
    };
    let out = args.out.clone();
    let mut hook = |epoch: usize, p: &ModelParams<f32>| {
        let mut path = out.clone().into_os_string();
        path.push(format!(".epoch{epoch}"));
        save_checkpoint(PathBuf::from(path), p, &meta(epoch))
    };
    let outcome = train(&mut params, &vocab, &data, valid_data.as_ref(), &tc, Some(&mut hook))?;
    save_checkpoint(&args.out, &outcome.best, &meta(outcome.best_epoch))?;

    let log = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".loss.jsonl");
        PathBuf::from(p)
    });
    let header = ArtifactHeader::new(&format!("{phase_name}-loss"), digest, tc.seed);
    write_atomic(&log, jsonl_with_header(&header, &outcome.history)?.as_bytes())?;
    if let Some(last) = outcome.history.last() {
        eprintln!(
            "{phase_name}: {} epochs, {} steps, final loss {:.4}, accuracy {:.3}, best epoch {}",
            outcome.history.len(),
            outcome.steps,
            last.train_loss,
            last.train_accuracy,
            outcome.best_epoch
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::load(
            Some("[post]\np = 0.5\n[model]\nd_model = 32\n"),
            &["post.epochs=3".into(), "decode.beam_size=2".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.post.p, 0.5);
        assert_eq!(cfg.post.epochs, 3);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.decode.beam_size, 2);
        assert_eq!((cfg.synth.seed, cfg.fine.seed), (9, 9));
        assert_eq!(cfg.fine.phase, Phase::Fine);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(Some("[post]\nbogus = 1\n"), &[]).is_err());
        assert!(RunConfig::load(None, &["nosuchsection.x=1".into()]).is_err());
    }

    #[test]
    fn digest_ignores_paths() {
        let a = RunConfig::load(Some("[paths]\ncorpus = \"a.jsonl\"\n"), &[]).unwrap();
        let b = RunConfig::load(None, &[]).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig::load(None, &["post.lr=0.1".into()]).unwrap();
        assert_ne!(a.digest(), c.digest());
    }
}
