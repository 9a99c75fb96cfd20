//! Flattens a dialogue into a sequence-structured token sequence and applies
//! structure masking.
//!
//! Each context utterance `i` becomes
//! `[IDX_i] [IDX_target] [SPK_speaker] [SPK_addressee] tok_1 tok_2 ...`
//! and the dialogue ends with a response slot
//! `[IDX_n+1] [IDX_t] [SPK_s] [SPK_a]` that never carries utterance tokens.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Utterance};
use crate::error::{Error, Result};
use crate::tokenizer::{StructureToken, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    OwnIdx,
    TgtIdx,
    Spk,
    Adr,
    Utt,
    RespOwnIdx,
    RespTgtIdx,
    RespSpk,
    RespAdr,
}

impl Role {
    pub fn is_structure(self) -> bool {
        self != Role::Utt
    }

    pub fn is_index_kind(self) -> bool {
        matches!(
            self,
            Role::OwnIdx | Role::TgtIdx | Role::RespOwnIdx | Role::RespTgtIdx
        )
    }

    pub fn is_response(self) -> bool {
        matches!(
            self,
            Role::RespOwnIdx | Role::RespTgtIdx | Role::RespSpk | Role::RespAdr
        )
    }

    fn mask_token(self) -> StructureToken {
        if self.is_index_kind() {
            StructureToken::MaskIdx
        } else {
            StructureToken::MaskSpk
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskTarget {
    pub position: usize,
    /// `None` when the gold value was never known.
    pub original: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceInput {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
    pub mask_targets: Vec<MaskTarget>,
    /// Context utterance count `n`; the response slot is `n + 1`.
    pub utterances: usize,
    /// Speakers known to the sequence, including a newly joining responder.
    pub speakers: usize,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.mask_targets.iter().any(|m| m.position == position)
    }

    /// Reverse the recorded masks whose originals are known.
    pub fn restored(&self) -> SequenceInput {
        let mut out = self.clone();
        out.mask_targets.retain(|m| m.original.is_none());
        for m in &self.mask_targets {
            if let Some(id) = m.original {
                out.ids[m.position] = id;
            }
        }
        out
    }

    /// 1-based utterance ordinal that owns `position` (`n + 1` for the
    /// response slot).
    pub fn slot_owner(&self, position: usize) -> usize {
        self.roles[..=position]
            .iter()
            .filter(|r| matches!(r, Role::OwnIdx | Role::RespOwnIdx))
            .count()
    }

    pub fn position_of(&self, owner: usize, role: Role) -> Option<usize> {
        let mut seen = 0;
        for (p, &r) in self.roles.iter().enumerate() {
            if matches!(r, Role::OwnIdx | Role::RespOwnIdx) {
                seen += 1;
            }
            if seen == owner && r == role {
                return Some(p);
            }
        }
        None
    }

    /// Replace one position with its role's mask token.
    pub fn mask_position(&mut self, position: usize, vocab: &Vocab) -> Result<()> {
        let role = self.roles[position];
        if !role.is_structure() {
            return Err(Error::InvalidDialogue(format!(
                "position {position} holds an utterance token"
            )));
        }
        if self.is_masked(position) {
            return Ok(());
        }
        let original = self.ids[position];
        self.ids[position] = vocab.structure_token_id(role.mask_token())?;
        self.mask_targets.push(MaskTarget {
            position,
            original: Some(original),
        });
        Ok(())
    }

    /// Bracketed rendering, one utterance template per line.
    pub fn render(&self, vocab: &Vocab) -> String {
        let mut lines: Vec<Vec<String>> = Vec::new();
        for (&id, &role) in self.ids.iter().zip(&self.roles) {
            if matches!(role, Role::OwnIdx | Role::RespOwnIdx) {
                lines.push(Vec::new());
            }
            if let Some(line) = lines.last_mut() {
                line.push(vocab.token_str(id));
            }
        }
        let mut out = String::new();
        for line in lines {
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// A response-slot field: unknown (masked), explicitly empty (`None` token),
/// or a concrete ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotValue {
    #[default]
    Masked,
    Empty,
    Value(usize),
}

impl SlotValue {
    pub fn value(self) -> Option<usize> {
        match self {
            SlotValue::Value(v) => Some(v),
            _ => None,
        }
    }

    /// Known gold fields become values; missing gold becomes a mask.
    pub fn from_gold(v: Option<usize>) -> Self {
        v.map_or(SlotValue::Masked, SlotValue::Value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResponseStructure {
    pub target: SlotValue,
    pub speaker: SlotValue,
    pub addressee: SlotValue,
}

impl ResponseStructure {
    pub fn from_utterance(u: &Utterance) -> Self {
        ResponseStructure {
            target: SlotValue::from_gold(u.target_index),
            speaker: SlotValue::Value(u.speaker),
            addressee: SlotValue::from_gold(u.addressee),
        }
    }

    /// Gold structure of the dialogue's response, or fully masked.
    pub fn gold(d: &Dialogue) -> Self {
        d.response
            .as_ref()
            .map(Self::from_utterance)
            .unwrap_or_default()
    }

    /// Speaker known, target and addressee hidden.
    pub fn speaker_only(speaker: usize) -> Self {
        ResponseStructure {
            speaker: SlotValue::Value(speaker),
            ..Default::default()
        }
    }
}

/// Template for one context utterance.
pub fn structuralize_utterance(u: &Utterance, vocab: &Vocab) -> Result<(Vec<usize>, Vec<Role>)> {
    let mut ids = vec![
        vocab.structure_token_id(StructureToken::Idx(u.index))?,
        vocab.structure_token_id(u.target_index.map_or(StructureToken::IdxNone, StructureToken::Idx))?,
        vocab.structure_token_id(StructureToken::Spk(u.speaker))?,
        vocab.structure_token_id(u.addressee.map_or(StructureToken::SpkNone, StructureToken::Spk))?,
    ];
    let mut roles = vec![Role::OwnIdx, Role::TgtIdx, Role::Spk, Role::Adr];
    let words = vocab.encode_tokens(&u.tokens);
    roles.extend(std::iter::repeat_n(Role::Utt, words.len()));
    ids.extend(words);
    Ok((ids, roles))
}

pub fn structuralize_dialogue(
    d: &Dialogue,
    response: ResponseStructure,
    vocab: &Vocab,
) -> Result<SequenceInput> {
    let n = d.len();
    let mut speakers = d.speaker_count();
    if let SlotValue::Value(t) = response.target {
        if t == 0 || t > n {
            return Err(Error::InvalidDialogue(format!(
                "response target {t} must be in 1..={n}"
            )));
        }
    }
    if let SlotValue::Value(s) = response.speaker {
        if s == 0 || s > speakers + 1 {
            return Err(Error::InvalidDialogue(format!(
                "response speaker {s} must be in 1..={}",
                speakers + 1
            )));
        }
        speakers = speakers.max(s);
    }
    if let SlotValue::Value(a) = response.addressee {
        if a == 0 || a > speakers {
            return Err(Error::InvalidDialogue(format!(
                "response addressee {a} must be in 1..={speakers}"
            )));
        }
    }

    let mut seq = SequenceInput {
        ids: Vec::new(),
        roles: Vec::new(),
        mask_targets: Vec::new(),
        utterances: n,
        speakers,
    };
    for u in &d.utterances {
        let (ids, roles) = structuralize_utterance(u, vocab)?;
        seq.ids.extend(ids);
        seq.roles.extend(roles);
    }

    seq.ids.push(vocab.structure_token_id(StructureToken::Idx(n + 1))?);
    seq.roles.push(Role::RespOwnIdx);
    let slots = [
        (Role::RespTgtIdx, response.target, StructureToken::Idx as fn(usize) -> StructureToken, StructureToken::IdxNone),
        (Role::RespSpk, response.speaker, StructureToken::Spk, StructureToken::SpkNone),
        (Role::RespAdr, response.addressee, StructureToken::Spk, StructureToken::SpkNone),
    ];
    for (role, value, make, none) in slots {
        let position = seq.ids.len();
        let token = match value {
            SlotValue::Value(k) => make(k),
            SlotValue::Empty => none,
            SlotValue::Masked => {
                seq.mask_targets.push(MaskTarget {
                    position,
                    original: None,
                });
                role.mask_token()
            }
        };
        seq.ids.push(vocab.structure_token_id(token)?);
        seq.roles.push(role);
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub p: f64,
    pub scope: BTreeSet<Role>,
    pub seed: u64,
}

impl MaskSpec {
    /// Target and addressee slots, in context and in the response slot.
    pub fn default_scope() -> BTreeSet<Role> {
        [Role::TgtIdx, Role::Adr, Role::RespTgtIdx, Role::RespAdr]
            .into_iter()
            .collect()
    }

    pub fn new(p: f64, seed: u64) -> Self {
        MaskSpec {
            p,
            scope: Self::default_scope(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("masking probability {} not in [0, 1]", self.p)));
        }
        if self.p > 0.0 && self.scope.is_empty() {
            return Err(Error::Config("masking scope is empty".into()));
        }
        if self.scope.contains(&Role::Utt) {
            return Err(Error::Config("utterance tokens cannot be masked".into()));
        }
        Ok(())
    }
}

/// Independently mask each in-scope structure position with probability
/// `p`. Positions that are already masked are left alone.
pub fn apply_masking(s: &SequenceInput, spec: &MaskSpec, vocab: &Vocab) -> Result<SequenceInput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = s.clone();
    for position in 0..s.len() {
        let role = s.roles[position];
        if !spec.scope.contains(&role) || s.is_masked(position) {
            continue;
        }
        if rng.random::<f64>() < spec.p {
            out.mask_position(position, vocab)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;

    fn dialogue() -> Dialogue {
        Dialogue {
            id: "t".into(),
            speakers: vec!["a".into(), "b".into()],
            utterances: vec![
                Utterance::new(1, 1, None, None, "hello there"),
                Utterance::new(2, 2, Some(1), Some(1), "hi"),
            ],
            response: None,
        }
    }

    fn vocab() -> Vocab {
        build_vocab(&[dialogue()], 1, 8, 4).unwrap()
    }

    fn render_ids(v: &Vocab, ids: &[usize]) -> String {
        ids.iter().map(|&i| v.token_str(i)).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn utterance_template_order() {
        let v = vocab();
        let u = Utterance::new(2, 2, Some(1), Some(1), "hi");
        let (ids, roles) = structuralize_utterance(&u, &v).unwrap();
        assert_eq!(render_ids(&v, &ids), "[IDX_2] [IDX_1] [SPK_2] [SPK_1] hi");
        assert_eq!(roles, vec![Role::OwnIdx, Role::TgtIdx, Role::Spk, Role::Adr, Role::Utt]);
    }

    #[test]
    fn first_utterance_uses_none_tokens() {
        let v = vocab();
        let u = Utterance::new(1, 1, None, None, "");
        let (ids, roles) = structuralize_utterance(&u, &v).unwrap();
        assert_eq!(render_ids(&v, &ids), "[IDX_1] [IDX_None] [SPK_1] [SPK_None]");
        assert_eq!(roles.len(), 4);
    }

    #[test]
    fn full_response_slot() {
        let v = vocab();
        let rs = ResponseStructure {
            target: SlotValue::Value(2),
            speaker: SlotValue::Value(1),
            addressee: SlotValue::Value(2),
        };
        let s = structuralize_dialogue(&dialogue(), rs, &v).unwrap();
        assert_eq!(
            s.render(&v),
            "[IDX_1] [IDX_None] [SPK_1] [SPK_None] hello there\n\
             [IDX_2] [IDX_1] [SPK_2] [SPK_1] hi\n\
             [IDX_3] [IDX_2] [SPK_1] [SPK_2]\n"
        );
        assert!(s.mask_targets.is_empty());
    }

    #[test]
    fn missing_response_fields_are_masked() {
        let v = vocab();
        let s = structuralize_dialogue(&dialogue(), ResponseStructure::speaker_only(1), &v).unwrap();
        let tail = render_ids(&v, &s.ids[s.len() - 4..]);
        assert_eq!(tail, "[IDX_3] [Mask_IDX] [SPK_1] [Mask_SPK]");
        assert_eq!(s.mask_targets.len(), 2);
        assert!(s.mask_targets.iter().all(|m| m.original.is_none()));
    }

    #[test]
    fn length_arithmetic() {
        let v = vocab();
        let d = Dialogue {
            utterances: vec![Utterance::new(1, 1, None, None, "hello there")],
            ..dialogue()
        };
        let s = structuralize_dialogue(&d, ResponseStructure::speaker_only(2), &v).unwrap();
        assert_eq!(s.len(), 4 + 2 + 4);
    }

    #[test]
    fn response_target_out_of_range() {
        let v = vocab();
        let rs = ResponseStructure {
            target: SlotValue::Value(3),
            ..ResponseStructure::speaker_only(1)
        };
        assert!(structuralize_dialogue(&dialogue(), rs, &v).is_err());
    }

    #[test]
    fn masking_extremes() {
        let v = vocab();
        let s = structuralize_dialogue(&dialogue(), ResponseStructure::speaker_only(1), &v).unwrap();
        let same = apply_masking(&s, &MaskSpec::new(0.0, 1), &v).unwrap();
        assert_eq!(same, s);

        let spec = MaskSpec {
            p: 1.0,
            scope: [Role::TgtIdx, Role::Adr].into_iter().collect(),
            seed: 1,
        };
        let all = apply_masking(&s, &spec, &v).unwrap();
        let mask_idx = v.structure_token_id(StructureToken::MaskIdx).unwrap();
        let mask_spk = v.structure_token_id(StructureToken::MaskSpk).unwrap();
        for (p, &r) in all.roles.iter().enumerate() {
            match r {
                Role::TgtIdx => assert_eq!(all.ids[p], mask_idx),
                Role::Adr => assert_eq!(all.ids[p], mask_spk),
                _ => {}
            }
        }
        assert_eq!(all.mask_targets.len(), s.mask_targets.len() + 4);
        assert_eq!(all.restored().ids, s.ids);
    }

    #[test]
    fn utterance_tokens_cannot_be_in_scope() {
        let spec = MaskSpec {
            p: 0.5,
            scope: [Role::Utt].into_iter().collect(),
            seed: 0,
        };
        assert!(spec.validate().is_err());
        let empty = MaskSpec {
            p: 0.5,
            scope: BTreeSet::new(),
            seed: 0,
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn slot_owner_and_positions() {
        let v = vocab();
        let s = structuralize_dialogue(&dialogue(), ResponseStructure::speaker_only(1), &v).unwrap();
        assert_eq!(s.slot_owner(0), 1);
        assert_eq!(s.slot_owner(7), 2);
        assert_eq!(s.position_of(2, Role::Adr), Some(9));
        assert_eq!(s.position_of(3, Role::RespTgtIdx), Some(s.len() - 3));
    }
}
