//! Multi-party conversation data model, canonical corpus I/O and synthetic
//! corpus generation.
//!
//! A corpus file holds one dialogue per line as a JSON object:
//!
//! ```text
//! {"id":"d1","speakers":["alice","bob"],
//!  "utterances":[{"speaker":1,"text":"hi"},{"speaker":2,"text":"hey","target":1,"addressee":1}],
//!  "response":{"speaker":1,"text":"how are you","target":2,"addressee":2}}
//! ```
//!
//! Speaker ordinals and utterance indices are 1-based. Speaker ordinals are
//! assigned by order of first appearance within the dialogue.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased whitespace tokenization shared by the vocabulary and the metrics.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: usize,
    pub target_index: Option<usize>,
    pub addressee: Option<usize>,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(
        index: usize,
        speaker: usize,
        target_index: Option<usize>,
        addressee: Option<usize>,
        text: impl Into<String>,
    ) -> Self {
        let text = text.into();
        let tokens = word_tokens(&text);
        Utterance {
            index,
            speaker,
            target_index,
            addressee,
            text,
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    /// Speaker labels; ordinal `k` is `speakers[k - 1]`.
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
    /// Gold final response, indexed `n + 1`.
    pub response: Option<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers.len()
    }

    /// Speaker ordinal of utterance `index` (1-based).
    pub fn speaker_of(&self, index: usize) -> Option<usize> {
        self.utterances.get(index.checked_sub(1)?).map(|u| u.speaker)
    }
}

/// Result of checking a dialogue's soft invariant: addressee equals the
/// speaker of the target utterance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Consistency {
    pub checked: usize,
    pub consistent: usize,
}

impl Consistency {
    pub fn is_consistent(&self) -> bool {
        self.checked == self.consistent
    }

    pub fn merge(&mut self, other: Consistency) {
        self.checked += other.checked;
        self.consistent += other.consistent;
    }
}

/// Check the hard invariants of a dialogue and report gold consistency.
pub fn validate_dialogue(d: &Dialogue) -> Result<Consistency> {
    if d.utterances.is_empty() {
        return Err(Error::InvalidDialogue("dialogue has no utterances".into()));
    }
    let m = d.speakers.len();
    let mut introduced = 0usize;
    let mut check_speaker = |u: &Utterance| -> Result<()> {
        if u.speaker == 0 {
            return Err(Error::InvalidDialogue(format!(
                "utterance {}: speaker ordinal must be >= 1",
                u.index
            )));
        }
        if u.speaker > introduced + 1 {
            return Err(Error::InvalidDialogue(format!(
                "utterance {}: speaker ordinal gap ({} introduced before {} appears)",
                u.index, introduced, u.speaker
            )));
        }
        introduced = introduced.max(u.speaker);
        if u.speaker > m {
            return Err(Error::InvalidDialogue(format!(
                "utterance {}: speaker {} has no label ({} labels)",
                u.index, u.speaker, m
            )));
        }
        Ok(())
    };

    for (pos, u) in d.utterances.iter().enumerate() {
        if u.index != pos + 1 {
            return Err(Error::InvalidDialogue(format!(
                "utterance at position {} has index {}",
                pos + 1,
                u.index
            )));
        }
        check_speaker(u)?;
        check_slots(u, m)?;
        if pos == 0 && (u.target_index.is_some() || u.addressee.is_some()) {
            return Err(Error::InvalidDialogue(
                "first utterance cannot have a target or addressee".into(),
            ));
        }
    }
    if let Some(r) = &d.response {
        if r.index != d.utterances.len() + 1 {
            return Err(Error::InvalidDialogue(format!(
                "response index {} should be {}",
                r.index,
                d.utterances.len() + 1
            )));
        }
        check_speaker(r)?;
        check_slots(r, m)?;
    }

    let mut report = Consistency::default();
    for u in d.utterances.iter().chain(d.response.iter()) {
        if let (Some(t), Some(a)) = (u.target_index, u.addressee) {
            report.checked += 1;
            if d.speaker_of(t) == Some(a) {
                report.consistent += 1;
            }
        }
    }
    Ok(report)
}

fn check_slots(u: &Utterance, m: usize) -> Result<()> {
    if let Some(t) = u.target_index {
        if t == 0 || t >= u.index {
            return Err(Error::InvalidDialogue(format!(
                "utterance {}: target index {} must be in 1..{}",
                u.index, t, u.index
            )));
        }
    }
    if let Some(a) = u.addressee {
        if a == 0 || a > m {
            return Err(Error::InvalidDialogue(format!(
                "utterance {}: addressee {} must be in 1..={}",
                u.index, a, m
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UtteranceRecord {
    speaker: usize,
    #[serde(default)]
    text: String,
    #[serde(default)]
    target: Option<usize>,
    #[serde(default)]
    addressee: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DialogueRecord {
    #[serde(default)]
    id: Option<String>,
    speakers: Vec<String>,
    utterances: Vec<UtteranceRecord>,
    #[serde(default)]
    response: Option<UtteranceRecord>,
}

impl UtteranceRecord {
    fn from_utterance(u: &Utterance) -> Self {
        UtteranceRecord {
            speaker: u.speaker,
            text: u.text.clone(),
            target: u.target_index,
            addressee: u.addressee,
        }
    }

    fn into_utterance(self, index: usize) -> Utterance {
        Utterance::new(index, self.speaker, self.target, self.addressee, self.text)
    }
}

/// Serialize a dialogue as one canonical record line (no trailing newline).
pub fn dialogue_to_line(d: &Dialogue) -> String {
    let record = DialogueRecord {
        id: Some(d.id.clone()),
        speakers: d.speakers.clone(),
        utterances: d
            .utterances
            .iter()
            .map(UtteranceRecord::from_utterance)
            .collect(),
        response: d.response.as_ref().map(UtteranceRecord::from_utterance),
    };
    serde_json::to_string(&record).expect("dialogue record serializes")
}

/// Parse one canonical record. `line` is used for the default id and errors.
pub fn dialogue_from_line(text: &str, line: usize) -> Result<Dialogue> {
    let record: DialogueRecord =
        serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
            line,
            message: e.to_string(),
        })?;
    let n = record.utterances.len();
    let dialogue = Dialogue {
        id: record.id.unwrap_or_else(|| line.to_string()),
        speakers: record.speakers,
        utterances: record
            .utterances
            .into_iter()
            .enumerate()
            .map(|(i, u)| u.into_utterance(i + 1))
            .collect(),
        response: record.response.map(|r| r.into_utterance(n + 1)),
    };
    Ok(dialogue)
}

pub fn corpus_to_string(corpus: &[Dialogue]) -> String {
    let mut out = String::new();
    for d in corpus {
        out.push_str(&dialogue_to_line(d));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub dialogues: Vec<Dialogue>,
    /// Records rejected in lenient mode.
    pub skipped: usize,
    pub consistency: Consistency,
}

pub fn parse_corpus_str(text: &str, strict: bool) -> Result<ParsedCorpus> {
    let mut parsed = ParsedCorpus::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        // blank lines and a provenance header are not records
        if raw.trim().is_empty() || raw.starts_with("{\"header\"") {
            continue;
        }
        let checked = dialogue_from_line(raw, line).and_then(|d| {
            validate_dialogue(&d)
                .map(|c| (d, c))
                .map_err(|e| match e {
                    Error::InvalidDialogue(reason) => Error::InvalidRecord { line, reason },
                    other => other,
                })
        });
        match checked {
            Ok((d, c)) => {
                parsed.consistency.merge(c);
                parsed.dialogues.push(d);
            }
            Err(e) if strict => return Err(e),
            Err(e) => {
                log_skip(&e);
                parsed.skipped += 1;
            }
        }
    }
    Ok(parsed)
}

fn log_skip(e: &Error) {
    if std::env::var_os("MPCGEN_QUIET").is_none() {
        eprintln!("warning: skipping record: {e}");
    }
}

/// Read a canonical corpus file. In lenient mode invalid records are
/// skipped and counted; in strict mode the first one is an error.
pub fn parse_corpus(path: impl AsRef<Path>, strict: bool) -> Result<ParsedCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_corpus_str(&text, strict)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureRule {
    /// Every utterance replies to the one before it.
    Last,
    /// Each utterance opens with an `@spk<k>` cue naming its addressee and
    /// replies to that speaker's most recent utterance.
    Cued,
}

impl std::str::FromStr for StructureRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(StructureRule::Last),
            "cued" => Ok(StructureRule::Cued),
            other => Err(Error::Config(format!("unknown structure rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dialogue_count: usize,
    /// Inclusive range of context utterance counts.
    pub n_range: (usize, usize),
    /// Inclusive range of participant pool sizes.
    pub speaker_range: (usize, usize),
    /// Number of filler words `w0..w{vocab_size-1}`.
    pub vocab_size: usize,
    /// Inclusive range of filler words per utterance.
    pub text_len: (usize, usize),
    pub structure_rule: StructureRule,
    /// Attach a gold response (utterance `n + 1`) to every dialogue.
    pub with_response: bool,
    /// In `cued` corpora, probability that a speaker answers whoever last
    /// addressed them.
    pub reply_bias: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dialogue_count: 100,
            n_range: (3, 6),
            speaker_range: (2, 4),
            vocab_size: 40,
            text_len: (2, 5),
            structure_rule: StructureRule::Cued,
            with_response: true,
            reply_bias: 0.8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_range.0 == 0 || self.n_range.0 > self.n_range.1 {
            return bad("n_range must be a nonempty range starting at 1 or more");
        }
        if self.speaker_range.0 < 2 || self.speaker_range.0 > self.speaker_range.1 {
            return bad("speaker_range must be a nonempty range starting at 2 or more");
        }
        if self.text_len.0 > self.text_len.1 {
            return bad("text_len must be a nonempty range");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.reply_bias) {
            return bad("reply_bias must be in [0, 1]");
        }
        Ok(())
    }
}

/// Generate a deterministic synthetic corpus with known structure.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<Dialogue>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.dialogue_count)
        .map(|k| Ok(synth_dialogue(spec, &mut rng, format!("synth-{}", k + 1))))
        .collect()
}

fn synth_dialogue(spec: &SynthSpec, rng: &mut ChaCha8Rng, id: String) -> Dialogue {
    let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
    let pool = rng.random_range(spec.speaker_range.0..=spec.speaker_range.1);
    let total = if spec.with_response { n + 1 } else { n };

    let mut utts: Vec<Utterance> = Vec::with_capacity(total);
    let mut introduced = 0usize;
    for index in 1..=total {
        let speaker = if index == 1 {
            1
        } else {
            pick_speaker(spec, rng, &utts, pool, introduced)
        };
        introduced = introduced.max(speaker);

        let (target, addressee) = if index == 1 {
            (None, None)
        } else {
            match spec.structure_rule {
                StructureRule::Last => (Some(index - 1), Some(utts[index - 2].speaker)),
                StructureRule::Cued => {
                    let a = pick_addressee(spec, rng, &utts, speaker);
                    let t = utts.iter().rev().find(|u| u.speaker == a).map(|u| u.index);
                    (t, Some(a))
                }
            }
        };

        let mut words = Vec::new();
        if let (StructureRule::Cued, Some(a)) = (spec.structure_rule, addressee) {
            words.push(format!("@spk{a}"));
        }
        let len = rng.random_range(spec.text_len.0..=spec.text_len.1);
        for _ in 0..len {
            words.push(format!("w{}", rng.random_range(0..spec.vocab_size)));
        }
        utts.push(Utterance::new(index, speaker, target, addressee, words.join(" ")));
    }

    let response = if spec.with_response { utts.pop() } else { None };
    Dialogue {
        id,
        speakers: (1..=introduced).map(|k| format!("speaker{k}")).collect(),
        utterances: utts,
        response,
    }
}

fn pick_speaker(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    utts: &[Utterance],
    pool: usize,
    introduced: usize,
) -> usize {
    let prev = utts.last().expect("at least one utterance");
    if spec.structure_rule == StructureRule::Cued && rng.random_bool(0.5) {
        if let Some(a) = prev.addressee {
            return a;
        }
    }
    loop {
        let k = rng.random_range(1..=pool);
        let k = if k > introduced { introduced + 1 } else { k };
        if k != prev.speaker {
            return k;
        }
    }
}

fn pick_addressee(spec: &SynthSpec, rng: &mut ChaCha8Rng, utts: &[Utterance], speaker: usize) -> usize {
    let mention = utts
        .iter()
        .rev()
        .find(|u| u.addressee == Some(speaker) && u.speaker != speaker);
    if let Some(m) = mention {
        if rng.random_bool(spec.reply_bias) {
            return m.speaker;
        }
    }
    let mut others: Vec<usize> = utts
        .iter()
        .map(|u| u.speaker)
        .filter(|&s| s != speaker)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    others.sort_unstable();
    others[rng.random_range(0..others.len())]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogue_count: usize,
    pub utterance_count: usize,
    pub mean_utterances: f64,
    pub mean_speakers: f64,
    /// Fraction of context utterances lacking a target or an addressee.
    pub missing_structure_fraction: f64,
    pub responses: usize,
    /// Fraction of fully annotated utterances whose addressee is the
    /// speaker of their target.
    pub gold_consistency: f64,
}

pub fn corpus_stats(corpus: &[Dialogue]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dialogues = corpus.len();
    let utterances: usize = corpus.iter().map(Dialogue::len).sum();
    let speakers: usize = corpus.iter().map(Dialogue::speaker_count).sum();
    let missing = corpus
        .iter()
        .flat_map(|d| d.utterances.iter())
        .filter(|u| u.target_index.is_none() || u.addressee.is_none())
        .count();
    let mut consistency = Consistency::default();
    for d in corpus {
        consistency.merge(validate_dialogue(d)?);
    }
    Ok(CorpusStats {
        dialogue_count: dialogues,
        utterance_count: utterances,
        mean_utterances: utterances as f64 / dialogues as f64,
        mean_speakers: speakers as f64 / dialogues as f64,
        missing_structure_fraction: missing as f64 / utterances as f64,
        responses: corpus.iter().filter(|d| d.response.is_some()).count(),
        gold_consistency: if consistency.checked == 0 {
            1.0
        } else {
            consistency.consistent as f64 / consistency.checked as f64
        },
    })
}
