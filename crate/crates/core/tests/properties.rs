use std::collections::BTreeSet;

use mpcgen::corpus::{dialogue_from_line, dialogue_to_line, validate_dialogue, Dialogue, Utterance};
use mpcgen::metrics::{bleu_n, meteor_lite, precision_at_1, rouge_l};
use mpcgen::structuralizer::{apply_masking, structuralize_dialogue, MaskSpec, ResponseStructure, Role};
use mpcgen::tokenizer::{build_vocab, StructureToken, Vocab};
use proptest::prelude::*;

/// Valid dialogues: speakers introduced in order, targets strictly earlier,
/// structure present or absent.
fn arb_dialogue() -> impl Strategy<Value = Dialogue> {
    (1usize..7, any::<u64>(), any::<bool>()).prop_map(|(n, bits, with_response)| {
        let mut seed = bits;
        let mut next = |m: usize| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as usize) % m
        };
        let mut utts: Vec<Utterance> = Vec::new();
        let mut m = 0;
        let total = n + usize::from(with_response);
        for index in 1..=total {
            let speaker = (next(m + 1) + 1).min(m + 1);
            m = m.max(speaker);
            let (target, addressee) = if index == 1 {
                (None, None)
            } else {
                let t = (next(3) > 0).then(|| next(index - 1) + 1);
                let a = (next(3) > 0).then(|| next(m) + 1);
                (t, a)
            };
            let words: Vec<String> = (0..next(4)).map(|_| format!("w{}", next(9))).collect();
            utts.push(Utterance::new(index, speaker, target, addressee, words.join(" ")));
        }
        let response = if with_response { utts.pop() } else { None };
        Dialogue {
            id: format!("d{bits}"),
            speakers: (1..=m).map(|k| format!("s{k}")).collect(),
            utterances: utts,
            response,
        }
    })
}

fn vocab_for(d: &Dialogue) -> Vocab {
    build_vocab(std::slice::from_ref(d), 1, 10, 8).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn corpus_line_round_trip(d in arb_dialogue()) {
        validate_dialogue(&d).unwrap();
        let back = dialogue_from_line(&dialogue_to_line(&d), 1).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn unmasking_restores_input(d in arb_dialogue(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let vocab = vocab_for(&d);
        let s = structuralize_dialogue(&d, ResponseStructure::gold(&d), &vocab).unwrap();
        let spec = MaskSpec {
            p,
            scope: [Role::OwnIdx, Role::TgtIdx, Role::Spk, Role::Adr, Role::RespTgtIdx, Role::RespAdr].into_iter().collect(),
            seed,
        };
        let masked = apply_masking(&s, &spec, &vocab).unwrap();
        prop_assert_eq!(masked.restored(), s.restored());
        prop_assert_eq!(masked.ids.len(), s.ids.len());
    }

    #[test]
    fn sequence_length_and_role_kinds(d in arb_dialogue()) {
        let vocab = vocab_for(&d);
        let s = structuralize_dialogue(&d, ResponseStructure::gold(&d), &vocab).unwrap();
        let expected: usize = d.utterances.iter().map(|u| 4 + u.tokens.len()).sum::<usize>() + 4;
        prop_assert_eq!(s.len(), expected);
        for (&id, &role) in s.ids.iter().zip(&s.roles) {
            match vocab.structure_token(id) {
                Some(t) if role.is_structure() => {
                    let idx_kind = matches!(t, StructureToken::Idx(_) | StructureToken::IdxNone | StructureToken::MaskIdx);
                    prop_assert_eq!(idx_kind, role.is_index_kind());
                }
                None => prop_assert_eq!(role, Role::Utt),
                Some(_) => prop_assert!(false, "structure token in an utterance position"),
            }
        }
    }

    #[test]
    fn structure_token_inverse(nmax in 1usize..40, mmax in 1usize..12, k in 1usize..40, j in 1usize..12) {
        let d = Dialogue {
            id: "x".into(),
            speakers: vec!["a".into()],
            utterances: vec![Utterance::new(1, 1, None, None, "hello there")],
            response: None,
        };
        let vocab = build_vocab(&[d], 1, nmax.max(2), mmax).unwrap();
        let mut tokens = vec![StructureToken::IdxNone, StructureToken::SpkNone, StructureToken::MaskIdx, StructureToken::MaskSpk];
        if k <= vocab.nmax() { tokens.push(StructureToken::Idx(k)); }
        if j <= mmax { tokens.push(StructureToken::Spk(j)); }
        let mut seen = BTreeSet::new();
        for t in tokens {
            let id = vocab.structure_token_id(t).unwrap();
            prop_assert!(id >= vocab.base_size() && id < vocab.size());
            prop_assert_eq!(vocab.structure_token(id), Some(t));
            prop_assert!(seen.insert(id));
        }
        prop_assert!(vocab.structure_token_id(StructureToken::Idx(vocab.nmax() + 1)).is_err());
        prop_assert!(vocab.structure_token_id(StructureToken::Spk(mmax + 1)).is_err());
    }

    #[test]
    fn metrics_permutation_invariant(pairs in prop::collection::vec(
        (prop::collection::vec(0u8..6, 0..7), prop::collection::vec(0u8..6, 1..7)), 1..8), rot in 0usize..8) {
        let to_words = |v: &Vec<u8>| v.iter().map(|x| format!("t{x}")).collect::<Vec<_>>();
        let c: Vec<Vec<String>> = pairs.iter().map(|p| to_words(&p.0)).collect();
        let r: Vec<Vec<String>> = pairs.iter().map(|p| to_words(&p.1)).collect();
        let k = rot % c.len();
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        for n in 1..=4 {
            let a = bleu_n(&c, &r, n, false).unwrap();
            let b = bleu_n(&c2, &r2, n, false).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&c, &r).unwrap() - rouge_l(&c2, &r2).unwrap()).abs() < 1e-12);
        prop_assert!((meteor_lite(&c, &r).unwrap() - meteor_lite(&c2, &r2).unwrap()).abs() < 1e-12);
        let g: Vec<usize> = pairs.iter().map(|p| p.1.len()).collect();
        let mut g2 = g.clone();
        g2.rotate_left(k);
        prop_assert_eq!(precision_at_1(&g, &g).unwrap(), 1.0);
        prop_assert_eq!(precision_at_1(&g2, &g2).unwrap(), 1.0);
    }

    #[test]
    fn bleu_self_is_one_and_appending_matches_helps(tokens in prop::collection::vec(0u8..20, 4..12), cut in 1usize..4) {
        let words: Vec<String> = tokens.iter().map(|x| format!("t{x}")).collect();
        for n in 1..=4 {
            prop_assert!((bleu_n(&[words.clone()], &[words.clone()], n, false).unwrap() - 1.0).abs() < 1e-12);
        }
        // a too-short candidate made of reference tokens
        let short: Vec<String> = words[..words.len() - cut].to_vec();
        let longer: Vec<String> = words[..words.len() - cut + 1].to_vec();
        let a = bleu_n(&[short], &[words.clone()], 1, false).unwrap();
        let b = bleu_n(&[longer], &[words], 1, false).unwrap();
        prop_assert!(b >= a);
    }
}
