#![allow(dead_code)]

use mpcgen::corpus::{Dialogue, Utterance};
use mpcgen::model::{ModelConfig, ModelParams};
use mpcgen::structuralizer::{apply_masking, structuralize_dialogue, MaskSpec, ResponseStructure, Role, SequenceInput};
use mpcgen::tokenizer::{build_vocab, Vocab};
use mpcgen::training::{
    fine_tune_loss, fine_tune_loss_and_grad, post_train_loss, post_train_loss_and_grad, prepare_fine, FineExample,
    PostLossOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dialogue(id: &str, speakers: &[&str], utts: &[(usize, Option<usize>, Option<usize>, &str)], response: Option<(usize, Option<usize>, Option<usize>, &str)>) -> Dialogue {
    let n = utts.len();
    Dialogue {
        id: id.into(),
        speakers: speakers.iter().map(|s| s.to_string()).collect(),
        utterances: utts
            .iter()
            .enumerate()
            .map(|(i, &(s, t, a, text))| Utterance::new(i + 1, s, t, a, text))
            .collect(),
        response: response.map(|(s, t, a, text)| Utterance::new(n + 1, s, t, a, text)),
    }
}

/// Two-utterance corpus whose vocabulary has exactly 20 ids
/// (4 specials + 7 words + a 9-token structure block).
pub fn tiny_corpus() -> Vec<Dialogue> {
    vec![
        dialogue(
            "g1",
            &["a", "b"],
            &[(1, None, None, "w0 w1 w2"), (2, Some(1), Some(1), "w3 w4 w0")],
            Some((1, Some(2), Some(2), "w5 w6 w1")),
        ),
        dialogue(
            "g2",
            &["a", "b"],
            &[(1, None, None, "w2 w5"), (2, Some(1), Some(1), "w6 w3")],
            Some((1, Some(2), Some(2), "w4 w0")),
        ),
    ]
}

pub fn tiny_vocab() -> Vocab {
    build_vocab(&tiny_corpus(), 1, 3, 2).unwrap()
}

pub fn tiny_model(vocab: &Vocab, seed: u64) -> ModelParams<f64> {
    ModelParams::init(&ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ffn_dim: 16,
        max_positions: 32,
        vocab_size: vocab.size(),
        dropout: 0.0,
        init_seed: seed,
    })
    .unwrap()
}

pub fn tiny_post_batch(vocab: &Vocab) -> Vec<SequenceInput> {
    let scope: std::collections::BTreeSet<Role> = [Role::OwnIdx, Role::TgtIdx, Role::Spk, Role::Adr, Role::RespTgtIdx, Role::RespAdr]
        .into_iter()
        .collect();
    tiny_corpus()
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let s = structuralize_dialogue(d, ResponseStructure::gold(d), vocab).unwrap();
            apply_masking(&s, &MaskSpec { p: 0.5, scope: scope.clone(), seed: 11 + i as u64 }, vocab).unwrap()
        })
        .collect()
}

pub fn tiny_fine_batch(vocab: &Vocab) -> Vec<FineExample> {
    prepare_fine(&tiny_corpus(), vocab).unwrap()
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps analytically-zero
/// gradients (e.g. key biases) from dividing rounding noise by zero.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Compare analytic gradients of a mean loss against central differences
/// on at least `min_samples` parameters, covering every tensor.
pub fn gradient_check(
    params: &ModelParams<f64>,
    loss: &dyn Fn(&ModelParams<f64>) -> f64,
    analytic: &ModelParams<f64>,
    min_samples: usize,
    seed: u64,
) -> GradReport {
    let h = 1e-5;
    let shapes: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (ti, (_, len)) in shapes.iter().enumerate() {
        for _ in 0..(*len).min(3) {
            picks.push((ti, rng.random_range(0..*len)));
        }
    }
    let total: usize = shapes.iter().map(|s| s.1).sum();
    while picks.len() < min_samples {
        let mut k = rng.random_range(0..total);
        let mut ti = 0;
        while k >= shapes[ti].1 {
            k -= shapes[ti].1;
            ti += 1;
        }
        picks.push((ti, k));
    }
    let grads = analytic.tensors();
    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let mut work = params.clone();
    for (ti, k) in picks {
        let orig = params.tensors()[ti].data[k];
        work.tensors_mut()[ti][k] = orig + h;
        let up = loss(&work);
        work.tensors_mut()[ti][k] = orig - h;
        let down = loss(&work);
        work.tensors_mut()[ti][k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = grads[ti].data[k];
        let rel = rel_error(a, numeric);
        report.checked += 1;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = format!("{}[{k}]: analytic {a:e} numeric {numeric:e}", shapes[ti].0);
        }
    }
    report
}

pub fn check_post_gradients(min_samples: usize) -> GradReport {
    let vocab = tiny_vocab();
    let params = tiny_model(&vocab, 5);
    let batch = tiny_post_batch(&vocab);
    let opts = PostLossOptions::default();
    let mut g = params.zeros_like();
    let stats = post_train_loss_and_grad(&params, &batch, opts, &mut g, None).unwrap();
    g.add_scaled(&g.clone(), 1.0 / stats.count as f64 - 1.0);
    gradient_check(&params, &|p| post_train_loss(p, &batch, opts).unwrap(), &g, min_samples, 1)
}

pub fn check_fine_gradients(min_samples: usize) -> GradReport {
    let vocab = tiny_vocab();
    let params = tiny_model(&vocab, 6);
    let batch = tiny_fine_batch(&vocab);
    let mut g = params.zeros_like();
    let stats = fine_tune_loss_and_grad(&params, &batch, &mut g, None).unwrap();
    g.add_scaled(&g.clone(), 1.0 / stats.count as f64 - 1.0);
    gradient_check(&params, &|p| fine_tune_loss(p, &batch).unwrap(), &g, min_samples, 2)
}
