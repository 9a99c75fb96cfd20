//! Structure prediction from encoder logits, response decoding, and the
//! accumulating real-world loop.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{validate_dialogue, Dialogue, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{precision_at_1, EvalReport};
use crate::model::{decoder_forward, encoder_forward, encoder_logits, log_softmax_rows, ModelParams, Scalar};
use crate::structuralizer::{structuralize_dialogue, ResponseStructure, Role, SequenceInput, SlotValue};
use crate::tokenizer::{StructureToken, Vocab, BOS, EOS};

pub const DEFAULT_MAX_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    /// 1 is greedy; larger values run a length-normalized beam (at most 5).
    pub beam_size: usize,
    pub max_len: usize,
    /// Force a predicted addressee to the speaker of the predicted target.
    pub enforce_consistency: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_size: 1,
            max_len: DEFAULT_MAX_LEN,
            enforce_consistency: false,
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.beam_size) {
            return Err(Error::Config(format!("beam size {} not in 1..=5", self.beam_size)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Prediction for one masked position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub position: usize,
    /// Utterance ordinal owning the slot (`n + 1` for the response).
    pub owner: usize,
    pub role: Role,
    /// Predicted ordinal; `None` for the explicit None token.
    pub value: Option<usize>,
    /// Softmax probability of the choice within the candidate set.
    pub confidence: f64,
    #[serde(skip)]
    pub token_id: usize,
}

fn speaker_at(s: &SequenceInput, vocab: &Vocab, owner: usize) -> Option<usize> {
    let pos = s.position_of(owner, if owner > s.utterances { Role::RespSpk } else { Role::Spk })?;
    match vocab.structure_token(s.ids[pos]) {
        Some(StructureToken::Spk(k)) => Some(k),
        _ => None,
    }
}

/// Legal tokens for a masked position, most preferred first: recent
/// utterances before older ones, recently active speakers before others,
/// None last.
fn candidates(s: &SequenceInput, vocab: &Vocab, position: usize) -> Vec<StructureToken> {
    let role = s.roles[position];
    let owner = s.slot_owner(position);
    let n = s.utterances;
    match role {
        Role::OwnIdx | Role::RespOwnIdx => (1..=(n + 1).min(vocab.nmax())).rev().map(StructureToken::Idx).collect(),
        Role::TgtIdx | Role::RespTgtIdx => (1..owner)
            .rev()
            .map(StructureToken::Idx)
            .chain(std::iter::once(StructureToken::IdxNone))
            .collect(),
        _ => {
            let m = s.speakers.min(vocab.mmax());
            let mut order: Vec<usize> = Vec::with_capacity(m);
            for u in (1..owner).rev() {
                if let Some(k) = speaker_at(s, vocab, u) {
                    if k <= m && !order.contains(&k) {
                        order.push(k);
                    }
                }
            }
            let rest: Vec<usize> = (1..=m).filter(|k| !order.contains(k)).collect();
            order.extend(rest);
            let mut out: Vec<StructureToken> = order.into_iter().map(StructureToken::Spk).collect();
            if matches!(role, Role::Adr | Role::RespAdr) {
                out.push(StructureToken::SpkNone);
            }
            out
        }
    }
}

fn ordinal(t: StructureToken) -> Option<usize> {
    match t {
        StructureToken::Idx(k) | StructureToken::Spk(k) => Some(k),
        _ => None,
    }
}

/// Argmax over the legal candidates of every masked position, from one
/// encoder pass.
pub fn predict_structure<T: Scalar>(params: &ModelParams<T>, vocab: &Vocab, s: &SequenceInput) -> Result<Vec<SlotPrediction>> {
    if s.mask_targets.is_empty() {
        return Err(Error::NothingMasked);
    }
    let enc = encoder_forward(params, &[&s.ids], None)?;
    let logits = encoder_logits(params, &enc.hidden);
    let mut positions: Vec<usize> = s.mask_targets.iter().map(|m| m.position).collect();
    positions.sort_unstable();
    positions
        .into_iter()
        .map(|position| {
            let cands = candidates(s, vocab, position);
            let ids = cands
                .iter()
                .map(|&t| vocab.structure_token_id(t))
                .collect::<Result<Vec<_>>>()?;
            let row = logits.row(position);
            let scores: Vec<f64> = ids.iter().map(|&id| row[id].to_f64().unwrap_or(f64::NAN)).collect();
            let mut best = 0;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = i;
                }
            }
            let z: f64 = scores.iter().map(|v| (v - scores[best]).exp()).sum();
            Ok(SlotPrediction {
                position,
                owner: s.slot_owner(position),
                role: s.roles[position],
                value: ordinal(cands[best]),
                confidence: 1.0 / z,
                token_id: ids[best],
            })
        })
        .collect()
}

/// Fill every masked position with its prediction. With `enforce`, a
/// predicted addressee becomes the speaker of its utterance's target when
/// that target is an utterance.
pub fn resolve_structure<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    s: &SequenceInput,
    enforce: bool,
) -> Result<(SequenceInput, Vec<SlotPrediction>)> {
    let mut preds = predict_structure(params, vocab, s)?;
    let mut out = s.clone();
    out.mask_targets.clear();
    for p in &preds {
        out.ids[p.position] = p.token_id;
    }
    if enforce {
        for p in preds.iter_mut().filter(|p| matches!(p.role, Role::Adr | Role::RespAdr)) {
            let tgt_role = if p.role == Role::Adr { Role::TgtIdx } else { Role::RespTgtIdx };
            let Some(tpos) = out.position_of(p.owner, tgt_role) else { continue };
            let Some(StructureToken::Idx(t)) = vocab.structure_token(out.ids[tpos]) else { continue };
            if let Some(k) = speaker_at(&out, vocab, t) {
                let id = vocab.structure_token_id(StructureToken::Spk(k))?;
                out.ids[p.position] = id;
                p.value = Some(k);
                p.token_id = id;
            }
        }
    }
    Ok((out, preds))
}

/// Response-slot fields as currently written in the sequence.
pub fn response_slot(s: &SequenceInput, vocab: &Vocab) -> ResponseStructure {
    let owner = s.utterances + 1;
    let read = |role| {
        let Some(pos) = s.position_of(owner, role) else {
            return SlotValue::Masked;
        };
        match vocab.structure_token(s.ids[pos]) {
            Some(StructureToken::Idx(k) | StructureToken::Spk(k)) => SlotValue::Value(k),
            Some(StructureToken::IdxNone | StructureToken::SpkNone) => SlotValue::Empty,
            _ => SlotValue::Masked,
        }
    };
    ResponseStructure {
        target: read(Role::RespTgtIdx),
        speaker: read(Role::RespSpk),
        addressee: read(Role::RespAdr),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids without the terminating EOS.
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub text: String,
    /// Whether decoding ended on EOS rather than the length cap.
    pub finished: bool,
    pub predicted: Vec<SlotPrediction>,
    /// Response structure the decoder was conditioned on.
    pub structure: ResponseStructure,
}

impl GenerationResult {
    /// Predicted response-slot fields, keyed by slot name.
    pub fn predicted_response_slots(&self) -> BTreeMap<&'static str, Option<usize>> {
        self.predicted
            .iter()
            .filter_map(|p| {
                let name = match p.role {
                    Role::RespTgtIdx => "target_index",
                    Role::RespSpk => "speaker",
                    Role::RespAdr => "addressee",
                    _ => return None,
                };
                Some((name, p.value))
            })
            .collect()
    }
}

fn allowed_tokens(vocab: &Vocab) -> Vec<usize> {
    std::iter::once(EOS).chain(4..vocab.base_size()).collect()
}

fn next_log_probs<T: Scalar>(
    params: &ModelParams<T>,
    enc: &crate::model::EncoderCache<T>,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let dec = decoder_forward(params, &enc.hidden, &enc.segments, &[prefix], None)?;
    let last = dec.logits.nrows() - 1;
    let row = dec.logits.slice(ndarray::s![last..=last, ..]).to_owned();
    Ok(log_softmax_rows(&row).row(0).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
}

/// Decode a response for an already resolved input sequence.
/// Returns the generated ids (EOS included when produced).
pub fn decode<T: Scalar>(params: &ModelParams<T>, vocab: &Vocab, input: &[usize], opts: &DecodeOptions) -> Result<Vec<usize>> {
    opts.validate()?;
    let enc = encoder_forward(params, &[input], None)?;
    let allowed = allowed_tokens(vocab);
    if opts.beam_size == 1 {
        let mut prefix = vec![BOS];
        for _ in 0..opts.max_len {
            let lp = next_log_probs(params, &enc, &prefix)?;
            let mut best = allowed[0];
            for &id in &allowed {
                if lp[id] > lp[best] {
                    best = id;
                }
            }
            prefix.push(best);
            if best == EOS {
                break;
            }
        }
        return Ok(prefix[1..].to_vec());
    }

    struct Hyp {
        tokens: Vec<usize>,
        logp: f64,
        done: bool,
    }
    let score = |h: &Hyp| h.logp / h.tokens.len().max(1) as f64;
    let k = opts.beam_size;
    let mut beam = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        done: false,
    }];
    for _ in 0..opts.max_len {
        if beam.iter().all(|h| h.done) {
            break;
        }
        let mut next = Vec::new();
        for h in beam {
            if h.done {
                next.push(h);
                continue;
            }
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&h.tokens);
            let lp = next_log_probs(params, &enc, &prefix)?;
            let mut ranked: Vec<usize> = allowed.clone();
            ranked.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &id in ranked.iter().take(k) {
                let mut tokens = h.tokens.clone();
                tokens.push(id);
                next.push(Hyp {
                    tokens,
                    logp: h.logp + lp[id],
                    done: id == EOS,
                });
            }
        }
        next.sort_by(|a, b| score(b).total_cmp(&score(a)));
        next.truncate(k);
        beam = next;
    }
    let best = beam
        .into_iter()
        .reduce(|a, b| if score(&b) > score(&a) { b } else { a })
        .expect("beam is never empty");
    Ok(best.tokens)
}

/// Resolve masked slots, re-encode the filled sequence, and decode.
pub fn generate_response<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    dialogue: &Dialogue,
    structure: ResponseStructure,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    let s = structuralize_dialogue(dialogue, structure, vocab)?;
    let (resolved, predicted) = if s.mask_targets.is_empty() {
        (s, Vec::new())
    } else {
        resolve_structure(params, vocab, &s, opts.enforce_consistency)?
    };
    let mut ids = decode(params, vocab, &resolved.ids, opts)?;
    let finished = ids.last() == Some(&EOS);
    if finished {
        ids.pop();
    }
    let text = vocab.decode(&ids);
    let tokens = text.split_whitespace().map(String::from).collect();
    Ok(GenerationResult {
        ids,
        tokens,
        text,
        finished,
        predicted,
        structure: response_slot(&resolved, vocab),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopStep {
    pub result: GenerationResult,
    pub history: Dialogue,
    /// Predicted addressee equals the speaker of the predicted target; `None`
    /// when either is empty.
    pub consistent: Option<bool>,
}

/// Predict the next response's target and addressee for `next_speaker`,
/// generate it, and append it to the history.
pub fn real_world_step<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    history: &Dialogue,
    next_speaker: usize,
    opts: &DecodeOptions,
) -> Result<LoopStep> {
    let m = history.speaker_count();
    if next_speaker == 0 || next_speaker > m + 1 {
        return Err(Error::InvalidDialogue(format!(
            "next speaker {next_speaker} must be in 1..={}",
            m + 1
        )));
    }
    let mut context = history.clone();
    context.response = None;
    let result = generate_response(params, vocab, &context, ResponseStructure::speaker_only(next_speaker), opts)?;
    let target = result.structure.target.value();
    let addressee = result.structure.addressee.value();
    let consistent = match (target, addressee) {
        (Some(t), Some(a)) => Some(context.speaker_of(t) == Some(a)),
        _ => None,
    };
    let index = context.len() + 1;
    if next_speaker == m + 1 {
        context.speakers.push(format!("speaker{next_speaker}"));
    }
    context
        .utterances
        .push(Utterance::new(index, next_speaker, target, addressee, result.text.clone()));
    Ok(LoopStep {
        result,
        history: context,
        consistent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureSlot {
    Target,
    Addressee,
}

impl StructureSlot {
    fn role(self) -> Role {
        match self {
            StructureSlot::Target => Role::TgtIdx,
            StructureSlot::Addressee => Role::Adr,
        }
    }

    fn gold(self, u: &Utterance) -> Option<usize> {
        match self {
            StructureSlot::Target => u.target_index,
            StructureSlot::Addressee => u.addressee,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureSlot::Target => "target",
            StructureSlot::Addressee => "addressee",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEval {
    pub slot: StructureSlot,
    pub predictions: Vec<Option<usize>>,
    pub gold: Vec<Option<usize>>,
    pub precision: f64,
}

/// Mask one slot of one context utterance at a time (everything else gold)
/// and score the restricted argmax against the gold ordinal. Utterances
/// whose gold value is missing are skipped.
pub fn evaluate_structure<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    slot: StructureSlot,
) -> Result<StructureEval> {
    let mut predictions = Vec::new();
    let mut gold = Vec::new();
    for d in dialogues {
        let base = structuralize_dialogue(d, ResponseStructure::gold(d), vocab)?;
        for u in d.utterances.iter().skip(1) {
            let Some(g) = slot.gold(u) else { continue };
            let Some(pos) = base.position_of(u.index, slot.role()) else { continue };
            let mut s = base.clone();
            s.mask_position(pos, vocab)?;
            let pred = predict_structure(params, vocab, &s)?
                .into_iter()
                .find(|p| p.position == pos)
                .expect("masked position is predicted");
            predictions.push(pred.value);
            gold.push(Some(g));
        }
    }
    let precision = precision_at_1(&predictions, &gold)?;
    Ok(StructureEval {
        slot,
        predictions,
        gold,
        precision,
    })
}

/// Generation metrics against gold responses, decoding with the gold
/// response structure.
pub fn evaluate_generation<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for d in dialogues {
        let Some(r) = &d.response else { continue };
        let out = generate_response(params, vocab, d, ResponseStructure::from_utterance(r), opts)?;
        candidates.push(out.tokens);
        references.push(r.tokens.clone());
    }
    EvalReport::from_pairs(&candidates, &references)
}

/// Split a dialogue (response included) into a context and the last `steps`
/// gold utterances. `None` when it is too short to leave a context.
pub fn split_continuation(d: &Dialogue, steps: usize) -> Option<(Dialogue, Vec<Utterance>)> {
    let mut all = d.utterances.clone();
    all.extend(d.response.clone());
    if all.len() <= steps {
        return None;
    }
    let tail = all.split_off(all.len() - steps);
    let m = all.iter().map(|u| u.speaker).max().unwrap_or(0);
    Some((
        Dialogue {
            id: d.id.clone(),
            speakers: d.speakers[..m].to_vec(),
            utterances: all,
            response: None,
        },
        tail,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopEval {
    pub loops: usize,
    pub slots: usize,
    pub target_precision: f64,
    pub addressee_precision: f64,
    /// Fraction of steps whose predicted addressee matches the speaker of the
    /// predicted target, among steps where both are present.
    pub consistency_rate: f64,
    /// Every accumulated history kept contiguous indices and valid ordinals.
    pub well_formed: bool,
}

/// Run the accumulation loop over the last `steps` utterances of each
/// dialogue, feeding the gold next speaker, and score predicted target and
/// addressee against the gold continuation.
pub fn evaluate_loop<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    steps: usize,
    opts: &DecodeOptions,
) -> Result<LoopEval> {
    let mut pred = (Vec::new(), Vec::new());
    let mut gold = (Vec::new(), Vec::new());
    let (mut checked, mut consistent) = (0usize, 0usize);
    let mut well_formed = true;
    let mut loops = 0;
    for d in dialogues {
        let Some((mut history, tail)) = split_continuation(d, steps) else { continue };
        loops += 1;
        let start = history.len();
        for u in &tail {
            let step = real_world_step(params, vocab, &history, u.speaker, opts)?;
            if let Some(c) = step.consistent {
                checked += 1;
                consistent += usize::from(c);
            }
            pred.0.push(step.result.structure.target.value());
            pred.1.push(step.result.structure.addressee.value());
            gold.0.push(u.target_index);
            gold.1.push(u.addressee);
            history = step.history;
            well_formed &= validate_dialogue(&history).is_ok();
        }
        well_formed &= history.len() == start + tail.len()
            && history.utterances.iter().enumerate().all(|(i, u)| u.index == i + 1);
    }
    Ok(LoopEval {
        loops,
        slots: gold.0.len(),
        target_precision: precision_at_1(&pred.0, &gold.0)?,
        addressee_precision: precision_at_1(&pred.1, &gold.1)?,
        consistency_rate: if checked == 0 { 0.0 } else { consistent as f64 / checked as f64 },
        well_formed,
    })
}

/// Constant predictor: the most frequent target label and the most frequent
/// addressee label over every slot that can be scored (utterances 2 and on,
/// responses included). `None` counts as a label; ties go to the smaller one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MajorityBaseline {
    pub target: Option<usize>,
    pub addressee: Option<usize>,
}

impl MajorityBaseline {
    pub fn fit(corpus: &[Dialogue]) -> Result<Self> {
        let mut targets: HashMap<Option<usize>, usize> = HashMap::new();
        let mut addressees: HashMap<Option<usize>, usize> = HashMap::new();
        for u in corpus.iter().flat_map(|d| d.utterances.iter().chain(&d.response)) {
            if u.index >= 2 {
                *targets.entry(u.target_index).or_default() += 1;
                *addressees.entry(u.addressee).or_default() += 1;
            }
        }
        let mode = |m: HashMap<Option<usize>, usize>| {
            m.into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .ok_or(Error::EmptyCorpus)
        };
        Ok(MajorityBaseline {
            target: mode(targets)?,
            addressee: mode(addressees)?,
        })
    }

    /// Precision@1 (target, addressee) of the constant predictions over the
    /// same continuation slots [`evaluate_loop`] scores.
    pub fn loop_precision(&self, dialogues: &[Dialogue], steps: usize) -> Result<(f64, f64)> {
        let mut gold = (Vec::new(), Vec::new());
        for d in dialogues {
            let Some((_, tail)) = split_continuation(d, steps) else { continue };
            for u in tail {
                gold.0.push(u.target_index);
                gold.1.push(u.addressee);
            }
        }
        let t = vec![self.target; gold.0.len()];
        let a = vec![self.addressee; gold.1.len()];
        Ok((precision_at_1(&t, &gold.0)?, precision_at_1(&a, &gold.1)?))
    }
}
