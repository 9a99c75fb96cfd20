//! Post-training and fine-tuning objectives, the optimizer, the training
//! loop and the masking-rate sweep.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::inference::{evaluate_generation, evaluate_structure, DecodeOptions, StructureSlot};
use crate::model::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, encoder_head_backward,
    encoder_logits, softmax_rows, ModelParams, Scalar,
};
use crate::structuralizer::{apply_masking, structuralize_dialogue, MaskSpec, ResponseStructure, Role, SequenceInput};
use crate::tokenizer::{Vocab, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Post,
    Fine,
}

/// Summed cross-entropy over counted positions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub sum: f64,
    pub count: usize,
    pub correct: usize,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }

    pub fn merge(&mut self, o: LossStats) {
        self.sum += o.sum;
        self.count += o.count;
        self.correct += o.correct;
    }
}

/// Cross-entropy of `logits` rows against target ids. Returns the summed
/// loss and the gradient of that sum.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[(usize, usize)]) -> (LossStats, Array2<T>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut stats = LossStats::default();
    if targets.is_empty() {
        return (stats, grad);
    }
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let picked = logits.select(ndarray::Axis(0), &rows);
    let probs = softmax_rows(&picked);
    for (k, &(row, target)) in targets.iter().enumerate() {
        let p = probs.row(k);
        let pt = p[target].to_f64().unwrap_or(f64::NAN);
        stats.sum -= pt.max(f64::MIN_POSITIVE).ln();
        stats.count += 1;
        let argmax = logits
            .row(row)
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if argmax == target {
            stats.correct += 1;
        }
        let mut g = grad.row_mut(row);
        g += &p;
        g[target] -= T::one();
    }
    (stats, grad)
}

/// Positions scored by the post-training loss with their original ids:
/// masked structure positions with a known original, plus every utterance
/// token. With `all_positions`, every position with a known original.
pub fn post_train_targets(s: &SequenceInput, all_positions: bool) -> Vec<(usize, usize)> {
    let restored = s.restored();
    let unknown: BTreeSet<usize> = s
        .mask_targets
        .iter()
        .filter(|m| m.original.is_none())
        .map(|m| m.position)
        .collect();
    let masked: BTreeSet<usize> = s
        .mask_targets
        .iter()
        .filter(|m| m.original.is_some())
        .map(|m| m.position)
        .collect();
    (0..s.len())
        .filter(|p| !unknown.contains(p))
        .filter(|p| all_positions || masked.contains(p) || s.roles[*p] == Role::Utt)
        .map(|p| (p, restored.ids[p]))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostLossOptions {
    pub all_positions: bool,
}

/// Summed post-training loss over a batch and the gradient of the sum.
pub fn post_train_loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[SequenceInput],
    opts: PostLossOptions,
    grads: &mut ModelParams<T>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossStats> {
    let seqs: Vec<&[usize]> = batch.iter().map(|s| s.ids.as_slice()).collect();
    let enc = encoder_forward(params, &seqs, rng)?;
    let logits = encoder_logits(params, &enc.hidden);
    let mut targets = Vec::new();
    for (s, seg) in batch.iter().zip(&enc.segments) {
        targets.extend(
            post_train_targets(s, opts.all_positions)
                .into_iter()
                .map(|(p, id)| (seg.start + p, id)),
        );
    }
    let (stats, dlogits) = cross_entropy(&logits, &targets);
    if stats.count > 0 {
        let dh = encoder_head_backward(params, grads, &enc.hidden, &dlogits);
        encoder_backward(params, grads, &enc, &dh);
    }
    Ok(stats)
}

/// Mean post-training loss over the counted positions of a batch.
pub fn post_train_loss<T: Scalar>(params: &ModelParams<T>, batch: &[SequenceInput], opts: PostLossOptions) -> Result<f64> {
    let seqs: Vec<&[usize]> = batch.iter().map(|s| s.ids.as_slice()).collect();
    let enc = encoder_forward(params, &seqs, None)?;
    let logits = encoder_logits(params, &enc.hidden);
    let mut targets = Vec::new();
    for (s, seg) in batch.iter().zip(&enc.segments) {
        targets.extend(
            post_train_targets(s, opts.all_positions)
                .into_iter()
                .map(|(p, id)| (seg.start + p, id)),
        );
    }
    let (stats, _) = cross_entropy(&logits, &targets);
    if stats.count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(stats.mean())
}

/// A structured input paired with its gold response ids (ending in EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineExample {
    pub input: SequenceInput,
    pub response: Vec<usize>,
}

fn teacher_forced(batch: &[FineExample]) -> Result<Vec<Vec<usize>>> {
    batch
        .iter()
        .map(|ex| {
            if ex.response.is_empty() {
                return Err(Error::InvalidDialogue("empty gold response".into()));
            }
            let mut prefix = Vec::with_capacity(ex.response.len());
            prefix.push(BOS);
            prefix.extend_from_slice(&ex.response[..ex.response.len() - 1]);
            Ok(prefix)
        })
        .collect()
}

fn fine_forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[FineExample],
    grads: Option<&mut ModelParams<T>>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossStats> {
    let prefixes = teacher_forced(batch)?;
    let seqs: Vec<&[usize]> = batch.iter().map(|ex| ex.input.ids.as_slice()).collect();
    let prefix_refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
    let enc = encoder_forward(params, &seqs, rng.as_deref_mut())?;
    let dec = decoder_forward(params, &enc.hidden, &enc.segments, &prefix_refs, rng)?;
    let mut targets = Vec::new();
    for (ex, seg) in batch.iter().zip(&dec.segments) {
        targets.extend(ex.response.iter().enumerate().map(|(i, &id)| (seg.start + i, id)));
    }
    let (stats, dlogits) = cross_entropy(&dec.logits, &targets);
    if let Some(grads) = grads {
        let denc = decoder_backward(params, grads, &dec, enc.hidden.nrows(), &dlogits);
        encoder_backward(params, grads, &enc, &denc);
    }
    Ok(stats)
}

/// Summed teacher-forced response loss and the gradient of the sum.
pub fn fine_tune_loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[FineExample],
    grads: &mut ModelParams<T>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossStats> {
    fine_forward(params, batch, Some(grads), rng)
}

/// Mean teacher-forced loss per response token.
pub fn fine_tune_loss<T: Scalar>(params: &ModelParams<T>, batch: &[FineExample]) -> Result<f64> {
    let stats = fine_forward(params, batch, None, None)?;
    if stats.count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(stats.mean())
}

/// Loss and token accuracy over a data set, in batches.
pub fn evaluate_fine<T: Scalar>(params: &ModelParams<T>, data: &[FineExample], batch_size: usize) -> Result<LossStats> {
    let mut total = LossStats::default();
    for chunk in data.chunks(batch_size.max(1)) {
        total.merge(fine_forward(params, chunk, None, None)?);
    }
    Ok(total)
}

pub fn evaluate_post<T: Scalar>(
    params: &ModelParams<T>,
    data: &[SequenceInput],
    opts: PostLossOptions,
    batch_size: usize,
) -> Result<LossStats> {
    let mut total = LossStats::default();
    let mut scratch = params.zeros_like();
    for chunk in data.chunks(batch_size.max(1)) {
        // gradients are discarded; the forward path is shared
        total.merge(post_train_loss_and_grad(params, chunk, opts, &mut scratch, None)?);
    }
    Ok(total)
}

/// Structured inputs with the gold response slot, for post-training.
pub fn prepare_post(corpus: &[Dialogue], vocab: &Vocab) -> Result<Vec<SequenceInput>> {
    corpus
        .iter()
        .map(|d| structuralize_dialogue(d, ResponseStructure::gold(d), vocab))
        .collect()
}

/// Input/response pairs for fine-tuning; dialogues without a response are
/// skipped.
pub fn prepare_fine(corpus: &[Dialogue], vocab: &Vocab) -> Result<Vec<FineExample>> {
    corpus
        .iter()
        .filter_map(|d| d.response.as_ref().map(|r| (d, r)))
        .map(|(d, r)| {
            let input = structuralize_dialogue(d, ResponseStructure::from_utterance(r), vocab)?;
            let mut response = vocab.encode_tokens(&r.tokens);
            response.push(EOS);
            Ok(FineExample { input, response })
        })
        .collect()
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: ModelParams<T>,
    v: ModelParams<T>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ModelParams<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) {
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.t));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t));
        let lr_t = T::of(lr);
        let decay = T::of(lr * self.weight_decay);
        let eps = T::of(self.eps);
        let grads = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = *p - lr_t * update - decay * *p;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Structure masking probability (post phase).
    pub p: f64,
    pub mask_scope: BTreeSet<Role>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `0` (or absent) disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Score every position with a known original, not only masked
    /// structure and utterance tokens.
    pub loss_all_positions: bool,
    /// Invoke the checkpoint hook every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub shuffle: bool,
    /// Stop once the epoch's training token accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Post,
            p: 0.25,
            mask_scope: MaskSpec::default_scope(),
            lr: 3e-4,
            epochs: 10,
            batch_size: 8,
            grad_accum: 2,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
            loss_all_positions: false,
            checkpoint_every: 0,
            shuffle: true,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.p) {
            return bad("p must be in [0, 1]");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if !(self.lr >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.max_grad_norm.is_some_and(|m| !(m >= 0.0)) {
            return bad("max_grad_norm must be non-negative");
        }
        if self.phase == Phase::Post {
            MaskSpec {
                p: self.p,
                scope: self.mask_scope.clone(),
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }

    fn post_opts(&self) -> PostLossOptions {
        PostLossOptions {
            all_positions: self.loss_all_positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: Option<f64>,
    pub valid_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Parameters with the lowest validation loss (the final parameters when
    /// no validation set is given).
    pub best: ModelParams<T>,
    pub steps: usize,
}

/// Data for one phase.
#[derive(Debug, Clone)]
pub enum TrainData {
    Post(Vec<SequenceInput>),
    Fine(Vec<FineExample>),
}

impl TrainData {
    pub fn prepare(phase: Phase, corpus: &[Dialogue], vocab: &Vocab) -> Result<Self> {
        Ok(match phase {
            Phase::Post => TrainData::Post(prepare_post(corpus, vocab)?),
            Phase::Fine => TrainData::Fine(prepare_fine(corpus, vocab)?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Post(v) => v.len(),
            TrainData::Fine(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mix a base seed with indices into an independent stream seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub type CheckpointHook<'a, T> = dyn FnMut(usize, &ModelParams<T>) -> Result<()> + 'a;

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    vocab: &'a Vocab,
}

impl Trainer<'_> {
    fn mask_spec(&self, epoch: usize, index: usize) -> MaskSpec {
        MaskSpec {
            p: self.cfg.p,
            scope: self.cfg.mask_scope.clone(),
            seed: derive_seed(self.cfg.seed, epoch as u64, index as u64),
        }
    }

    fn batch_stats<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        data: &TrainData,
        indices: &[usize],
        epoch: usize,
        grads: &mut ModelParams<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossStats> {
        match data {
            TrainData::Post(items) => {
                let batch = indices
                    .iter()
                    .map(|&i| apply_masking(&items[i], &self.mask_spec(epoch, i), self.vocab))
                    .collect::<Result<Vec<_>>>()?;
                post_train_loss_and_grad(params, &batch, self.cfg.post_opts(), grads, rng)
            }
            TrainData::Fine(items) => {
                let batch: Vec<FineExample> = indices.iter().map(|&i| items[i].clone()).collect();
                fine_tune_loss_and_grad(params, &batch, grads, rng)
            }
        }
    }

    fn validation<T: Scalar>(&self, params: &ModelParams<T>, data: &TrainData) -> Result<LossStats> {
        match data {
            TrainData::Post(items) => {
                // fixed masks so epochs are comparable
                let masked = items
                    .iter()
                    .enumerate()
                    .map(|(i, s)| apply_masking(s, &self.mask_spec(usize::MAX, i), self.vocab))
                    .collect::<Result<Vec<_>>>()?;
                evaluate_post(params, &masked, self.cfg.post_opts(), self.cfg.batch_size)
            }
            TrainData::Fine(items) => evaluate_fine(params, items, self.cfg.batch_size),
        }
    }
}

fn clip_gradients<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for t in grads.tensors_mut() {
            for g in t.iter_mut() {
                *g *= scale;
            }
        }
    }
}

/// Train `params` in place. Linear decay from `cfg.lr` to zero over all
/// optimizer steps; each step averages gradients over every counted
/// position of `batch_size * grad_accum` examples.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    vocab: &Vocab,
    train_data: &TrainData,
    valid_data: Option<&TrainData>,
    cfg: &TrainConfig,
    mut on_checkpoint: Option<&mut CheckpointHook<'_, T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let trainer = Trainer { cfg, vocab };
    let n = train_data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.grad_accum);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;

    let mut opt = AdamW::new(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut grads = params.zeros_like();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut step = 0usize;
    let mut lr = cfg.lr;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
            order.shuffle(&mut rng);
        }
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut epoch_stats = LossStats::default();
        for group in batches.chunks(cfg.grad_accum) {
            for g in grads.tensors_mut() {
                g.fill(T::zero());
            }
            let mut step_stats = LossStats::default();
            for batch in group {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0xD80F, step as u64, epoch as u64));
                let rng = (params.config.dropout > 0.0).then_some(&mut drop_rng);
                step_stats.merge(trainer.batch_stats(params, train_data, batch, epoch, &mut grads, rng)?);
            }
            if step_stats.count == 0 {
                continue;
            }
            if !step_stats.sum.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: step_stats.mean(),
                });
            }
            let inv = T::of(1.0 / step_stats.count as f64);
            for g in grads.tensors_mut() {
                for x in g.iter_mut() {
                    *x *= inv;
                }
            }
            if let Some(max) = cfg.max_grad_norm.filter(|&m| m > 0.0) {
                clip_gradients(&mut grads, max);
            }
            lr = cfg.lr * (1.0 - step as f64 / total_steps);
            opt.step(params, &grads, lr);
            step += 1;
            epoch_stats.merge(step_stats);
        }
        if !params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            });
        }

        let valid = valid_data.map(|v| trainer.validation(params, v)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_stats.mean(),
            train_accuracy: epoch_stats.accuracy(),
            valid_loss: valid.map(|v| v.mean()),
            valid_accuracy: valid.map(|v| v.accuracy()),
            lr,
        };
        let selection = record.valid_loss.unwrap_or(f64::NEG_INFINITY);
        if valid.is_none() || selection < best_loss {
            best_loss = selection;
            best_epoch = epoch;
            best = params.clone();
        }
        let reached = cfg
            .stop_at_accuracy
            .is_some_and(|target| record.train_accuracy >= target);
        history.push(record);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            if let Some(hook) = on_checkpoint.as_deref_mut() {
                hook(epoch, params)?;
            }
        }
        if reached {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
        steps: step,
    })
}

/// One row of the masking-rate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: String,
    pub p: Option<f64>,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub target_precision: f64,
    pub addressee_precision: f64,
}

pub struct SweepSetup<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [Dialogue],
    pub valid: Option<&'a [Dialogue]>,
    pub test: &'a [Dialogue],
    pub post: TrainConfig,
    pub fine: TrainConfig,
    pub decode: DecodeOptions,
}

/// For a no-post-training arm and each `p`: post-train (skipped for the
/// baseline), fine-tune, and evaluate generation and structure prediction on
/// the test set.
pub fn masking_sweep(
    factory: &dyn Fn() -> Result<ModelParams<f32>>,
    setup: &SweepSetup<'_>,
    p_values: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("masking probability {bad} not in [0, 1]")));
    }
    let vocab = setup.vocab;
    let post_train = TrainData::prepare(Phase::Post, setup.train, vocab)?;
    let post_valid = setup.valid.map(|v| TrainData::prepare(Phase::Post, v, vocab)).transpose()?;
    let fine_train = TrainData::prepare(Phase::Fine, setup.train, vocab)?;
    let fine_valid = setup.valid.map(|v| TrainData::prepare(Phase::Fine, v, vocab)).transpose()?;

    let arms: Vec<Option<f64>> = std::iter::once(None).chain(p_values.iter().copied().map(Some)).collect();
    let mut rows = Vec::with_capacity(arms.len());
    for p in arms {
        let mut params = factory()?;
        if let Some(p) = p {
            let cfg = TrainConfig {
                phase: Phase::Post,
                p,
                ..setup.post.clone()
            };
            let out = train(&mut params, vocab, &post_train, post_valid.as_ref(), &cfg, None)?;
            params = out.best;
        }
        let cfg = TrainConfig {
            phase: Phase::Fine,
            ..setup.fine.clone()
        };
        let out = train(&mut params, vocab, &fine_train, fine_valid.as_ref(), &cfg, None)?;
        let params = out.best;

        let generation = evaluate_generation(&params, vocab, setup.test, &setup.decode)?;
        let target = evaluate_structure(&params, vocab, setup.test, StructureSlot::Target)?;
        let addressee = evaluate_structure(&params, vocab, setup.test, StructureSlot::Addressee)?;
        rows.push(SweepRow {
            arm: match p {
                None => "w/o post-training".to_string(),
                Some(p) => format!("p={:.0}%", p * 100.0),
            },
            p,
            bleu: generation.bleu,
            meteor: generation.meteor,
            rouge_l: generation.rouge_l,
            target_precision: target.precision,
            addressee_precision: addressee.precision,
        });
    }
    Ok(rows)
}

/// Plain-text rendering of sweep rows, scores as percentages.
pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:<20} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "arm", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "P@1tgt", "P@1adr"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
            r.arm,
            r.bleu[0] * 100.0,
            r.bleu[1] * 100.0,
            r.bleu[2] * 100.0,
            r.bleu[3] * 100.0,
            r.meteor * 100.0,
            r.rouge_l * 100.0,
            r.target_precision * 100.0,
            r.addressee_precision * 100.0
        ));
    }
    out
}
