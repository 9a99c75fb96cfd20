//! Word-level vocabulary with an appended block of structure tokens.
//!
//! Id layout: `[<pad>, <bos>, <eos>, <unk>]`, then base words ordered by
//! descending frequency (ties broken lexicographically), then the structure
//! block `[IDX_1..IDX_Nmax] [IDX_None] [SPK_1..SPK_Mmax] [SPK_None]
//! [Mask_IDX] [Mask_SPK]`.

use std::collections::HashMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::corpus::{word_tokens, Dialogue};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_NMAX: usize = 50;
pub const DEFAULT_MMAX: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureToken {
    Idx(usize),
    IdxNone,
    Spk(usize),
    SpkNone,
    MaskIdx,
    MaskSpk,
}

impl StructureToken {
    /// True for the index family (`IDX_k`, `IDX_None`, `Mask_IDX`).
    pub fn is_index_kind(self) -> bool {
        matches!(
            self,
            StructureToken::Idx(_) | StructureToken::IdxNone | StructureToken::MaskIdx
        )
    }

    pub fn is_mask(self) -> bool {
        matches!(self, StructureToken::MaskIdx | StructureToken::MaskSpk)
    }

    fn annotation(self) -> String {
        match self {
            StructureToken::Idx(k) => format!("idx:{k}"),
            StructureToken::IdxNone => "idx:none".into(),
            StructureToken::Spk(k) => format!("spk:{k}"),
            StructureToken::SpkNone => "spk:none".into(),
            StructureToken::MaskIdx => "mask:idx".into(),
            StructureToken::MaskSpk => "mask:spk".into(),
        }
    }

    fn parse_annotation(s: &str) -> Option<Self> {
        let (kind, arg) = s.split_once(':')?;
        match (kind, arg) {
            ("idx", "none") => Some(StructureToken::IdxNone),
            ("spk", "none") => Some(StructureToken::SpkNone),
            ("mask", "idx") => Some(StructureToken::MaskIdx),
            ("mask", "spk") => Some(StructureToken::MaskSpk),
            ("idx", k) => k.parse().ok().map(StructureToken::Idx),
            ("spk", k) => k.parse().ok().map(StructureToken::Spk),
            _ => None,
        }
    }
}

impl fmt::Display for StructureToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructureToken::Idx(k) => write!(f, "[IDX_{k}]"),
            StructureToken::IdxNone => write!(f, "[IDX_None]"),
            StructureToken::Spk(k) => write!(f, "[SPK_{k}]"),
            StructureToken::SpkNone => write!(f, "[SPK_None]"),
            StructureToken::MaskIdx => write!(f, "[Mask_IDX]"),
            StructureToken::MaskSpk => write!(f, "[Mask_SPK]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Specials followed by base words; position is the id.
    words: Vec<String>,
    lookup: HashMap<String, usize>,
    nmax: usize,
    mmax: usize,
}

impl Vocab {
    fn from_words(base: Vec<String>, nmax: usize, mmax: usize) -> Self {
        let words: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(base)
            .collect();
        let lookup = words
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab {
            words,
            lookup,
            nmax,
            mmax,
        }
    }

    /// Base block size including the four specials.
    pub fn base_size(&self) -> usize {
        self.words.len()
    }

    pub fn nmax(&self) -> usize {
        self.nmax
    }

    pub fn mmax(&self) -> usize {
        self.mmax
    }

    pub fn structure_block_size(&self) -> usize {
        self.nmax + 1 + self.mmax + 1 + 2
    }

    pub fn size(&self) -> usize {
        self.base_size() + self.structure_block_size()
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.lookup.get(word).copied()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        word_tokens(text)
            .iter()
            .map(|w| self.word_id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|w| self.word_id(&w.to_lowercase()).unwrap_or(UNK))
            .collect()
    }

    /// Joins base words; specials and structure tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIALS.len() && id < self.base_size())
            .map(|&id| self.words[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn structure_token_id(&self, token: StructureToken) -> Result<usize> {
        let base = self.base_size();
        let spk_start = base + self.nmax + 1;
        let id = match token {
            StructureToken::Idx(k) => {
                if k == 0 || k > self.nmax {
                    return Err(Error::OrdinalOutOfRange {
                        kind: "IDX",
                        ordinal: k,
                        max: self.nmax,
                    });
                }
                base + k - 1
            }
            StructureToken::IdxNone => base + self.nmax,
            StructureToken::Spk(k) => {
                if k == 0 || k > self.mmax {
                    return Err(Error::OrdinalOutOfRange {
                        kind: "SPK",
                        ordinal: k,
                        max: self.mmax,
                    });
                }
                spk_start + k - 1
            }
            StructureToken::SpkNone => spk_start + self.mmax,
            StructureToken::MaskIdx => spk_start + self.mmax + 1,
            StructureToken::MaskSpk => spk_start + self.mmax + 2,
        };
        Ok(id)
    }

    /// Inverse of [`Vocab::structure_token_id`].
    pub fn structure_token(&self, id: usize) -> Option<StructureToken> {
        let base = self.base_size();
        if id < base {
            return None;
        }
        let off = id - base;
        let nm = self.nmax;
        let mm = self.mmax;
        Some(match off {
            o if o < nm => StructureToken::Idx(o + 1),
            o if o == nm => StructureToken::IdxNone,
            o if o < nm + 1 + mm => StructureToken::Spk(o - nm),
            o if o == nm + 1 + mm => StructureToken::SpkNone,
            o if o == nm + 2 + mm => StructureToken::MaskIdx,
            o if o == nm + 3 + mm => StructureToken::MaskSpk,
            _ => return None,
        })
    }

    /// Human-readable form of any id.
    pub fn token_str(&self, id: usize) -> String {
        match self.structure_token(id) {
            Some(t) => t.to_string(),
            None => self
                .words
                .get(id)
                .cloned()
                .unwrap_or_else(|| format!("<id{id}>")),
        }
    }

    /// `token<TAB>id` listing; structure lines carry a third kind column.
    pub fn to_text(&self) -> String {
        let mut out = format!("#vocab\tnmax={}\tmmax={}\n", self.nmax, self.mmax);
        for (id, w) in self.words.iter().enumerate() {
            if id < SPECIALS.len() {
                out.push_str(&format!("{w}\t{id}\tspecial\n"));
            } else {
                out.push_str(&format!("{w}\t{id}\n"));
            }
        }
        for id in self.base_size()..self.size() {
            let t = self.structure_token(id).expect("id in structure block");
            out.push_str(&format!("{t}\t{id}\t{}\n", t.annotation()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Vocab(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("#vocab") {
            return Err(bad("missing #vocab header".into()));
        }
        let mut param = |name: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(name))
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad header field {name}")))
        };
        let nmax = param("nmax")?;
        let mmax = param("mmax")?;

        let mut base = Vec::new();
        let mut structure = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let id: usize = cols
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("line {}: bad id", i + 2)))?;
            match cols.get(2) {
                None => base.push((id, cols[0].to_string())),
                Some(&"special") => {
                    if SPECIALS.get(id) != Some(&cols[0]) {
                        return Err(bad(format!("line {}: unexpected special", i + 2)));
                    }
                }
                Some(ann) => {
                    let t = StructureToken::parse_annotation(ann)
                        .ok_or_else(|| bad(format!("line {}: bad annotation", i + 2)))?;
                    structure.push((id, t));
                }
            }
        }
        for (k, (id, _)) in base.iter().enumerate() {
            if *id != k + SPECIALS.len() {
                return Err(bad(format!("base ids not contiguous at {id}")));
            }
        }
        let vocab = Vocab::from_words(base.into_iter().map(|(_, w)| w).collect(), nmax, mmax);
        if structure.len() != vocab.structure_block_size() {
            return Err(bad("structure block size mismatch".into()));
        }
        for (id, t) in structure {
            if vocab.structure_token_id(t)? != id {
                return Err(bad(format!("structure token {t} has unexpected id {id}")));
            }
        }
        Ok(vocab)
    }

    /// Hex SHA-256 of the serialized listing; checkpoints record it.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Build the base vocabulary from context and response text and append the
/// structure block. Dialogues (plus their response slot) must fit in `nmax`
/// indices and `mmax` speakers.
pub fn build_vocab(corpus: &[Dialogue], min_freq: usize, nmax: usize, mmax: usize) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in corpus {
        let slots = d.len() + 1;
        if slots > nmax {
            return Err(Error::OrdinalOutOfRange {
                kind: "IDX",
                ordinal: slots,
                max: nmax,
            });
        }
        let speakers = d
            .speaker_count()
            .max(d.response.as_ref().map_or(0, |r| r.speaker));
        if speakers > mmax {
            return Err(Error::OrdinalOutOfRange {
                kind: "SPK",
                ordinal: speakers,
                max: mmax,
            });
        }
        for u in d.utterances.iter().chain(d.response.iter()) {
            for w in &u.tokens {
                *counts.entry(w.clone()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq && !SPECIALS.contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocab::from_words(
        kept.into_iter().map(|(w, _)| w).collect(),
        nmax,
        mmax,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn one(text: &str) -> Vec<Dialogue> {
        vec![Dialogue {
            id: "x".into(),
            speakers: vec!["a".into()],
            utterances: vec![Utterance::new(1, 1, None, None, text)],
            response: None,
        }]
    }

    #[test]
    fn frequency_cutoff() {
        let v = build_vocab(&one("hi hi bob"), 2, 5, 3).unwrap();
        assert!(v.word_id("hi").is_some());
        assert!(v.word_id("bob").is_none());
    }

    #[test]
    fn structure_block_arithmetic() {
        let v = build_vocab(&one("hi"), 1, 5, 3).unwrap();
        assert_eq!(v.structure_block_size(), 12);
        assert_eq!(v.size(), v.base_size() + 12);
        assert_eq!(v.structure_token_id(StructureToken::Idx(1)).unwrap(), v.base_size());
        let spk3 = v.structure_token_id(StructureToken::Spk(3)).unwrap();
        assert_eq!(v.structure_token_id(StructureToken::SpkNone).unwrap(), spk3 + 1);
        assert!(v.structure_token_id(StructureToken::Idx(6)).is_err());
        assert!(v.structure_token_id(StructureToken::Spk(0)).is_err());
    }

    #[test]
    fn deterministic_ids() {
        let c = one("b a c a b d");
        assert_eq!(build_vocab(&c, 1, 5, 3).unwrap(), build_vocab(&c, 1, 5, 3).unwrap());
        let v = build_vocab(&c, 1, 5, 3).unwrap();
        assert_eq!(v.word_id("a"), Some(4));
        assert_eq!(v.word_id("b"), Some(5));
    }

    #[test]
    fn free_text_never_yields_structure_ids() {
        let v = build_vocab(&one("hi"), 1, 5, 3).unwrap();
        assert_eq!(v.encode_text("hi"), vec![v.word_id("hi").unwrap()]);
        assert_eq!(v.encode_text("zebra"), vec![UNK]);
        assert_eq!(v.encode_text("[IDX_1] <eos>"), vec![UNK, UNK]);
    }

    #[test]
    fn special_words_in_corpus_stay_unknown() {
        let v = build_vocab(&one("<eos> <eos> ok"), 1, 5, 3).unwrap();
        assert_eq!(v.encode_text("<eos>"), vec![UNK]);
    }

    #[test]
    fn oversized_dialogue_rejected() {
        let c = one("hi");
        assert!(build_vocab(&c, 1, 1, 3).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let v = build_vocab(&one("the cat sat on the mat"), 1, 7, 4).unwrap();
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.digest(), v.digest());
    }

    #[test]
    fn inverse_lookup() {
        let v = build_vocab(&one("x"), 1, 6, 4).unwrap();
        let mut all = vec![
            StructureToken::IdxNone,
            StructureToken::SpkNone,
            StructureToken::MaskIdx,
            StructureToken::MaskSpk,
        ];
        all.extend((1..=6).map(StructureToken::Idx));
        all.extend((1..=4).map(StructureToken::Spk));
        let mut ids: Vec<usize> = all.iter().map(|&t| v.structure_token_id(t).unwrap()).collect();
        for (&t, &id) in all.iter().zip(&ids) {
            assert_eq!(v.structure_token(id), Some(t));
        }
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), v.structure_block_size());
        assert_eq!(*ids.last().unwrap(), v.size() - 1);
    }
}
