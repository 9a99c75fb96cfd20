use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    attention_backward, attention_forward, ffn_backward, ffn_forward, layer_norm_backward,
    layer_norm_forward, AttnCache, Dropout, FfnCache, LnCache,
};
use super::{ModelParams, Scalar};
use crate::error::{Error, Result};

struct EncLayerCache<T> {
    ln_attn: LnCache<T>,
    attn: AttnCache<T>,
    drop_attn: Dropout<T>,
    ln_ffn: LnCache<T>,
    ffn: FfnCache<T>,
    drop_ffn: Dropout<T>,
}

struct DecLayerCache<T> {
    ln_self: LnCache<T>,
    self_attn: AttnCache<T>,
    drop_self: Dropout<T>,
    ln_cross: LnCache<T>,
    cross_attn: AttnCache<T>,
    drop_cross: Dropout<T>,
    ln_ffn: LnCache<T>,
    ffn: FfnCache<T>,
    drop_ffn: Dropout<T>,
}

/// Forward state of the encoder over a packed batch.
pub struct EncoderCache<T> {
    ids: Vec<usize>,
    positions: Vec<usize>,
    /// Row range of each input sequence in `hidden`.
    pub segments: Vec<Range<usize>>,
    embed_drop: Dropout<T>,
    layers: Vec<EncLayerCache<T>>,
    norm: LnCache<T>,
    pub hidden: Array2<T>,
}

/// Forward state of the decoder; `logits` has one row per prefix position.
pub struct DecoderCache<T> {
    ids: Vec<usize>,
    positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    embed_drop: Dropout<T>,
    layers: Vec<DecLayerCache<T>>,
    norm: LnCache<T>,
    hidden: Array2<T>,
    pub logits: Array2<T>,
}

fn pack(seqs: &[&[usize]], vocab: usize, max_len: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<Range<usize>>)> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(Error::InvalidDialogue("empty input sequence".into()));
        }
        if s.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max: max_len,
            });
        }
        if let Some(&bad) = s.iter().find(|&&id| id >= vocab) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let start = ids.len();
        ids.extend_from_slice(s);
        positions.extend(0..s.len());
        segments.push(start..ids.len());
    }
    Ok((ids, positions, segments))
}

fn embed_rows<T: Scalar>(p: &ModelParams<T>, pos_table: &Array2<T>, ids: &[usize], positions: &[usize]) -> Array2<T> {
    let d = p.config.d_model;
    let mut x = Array2::zeros((ids.len(), d));
    for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
        let mut row = x.row_mut(r);
        row.assign(&p.embed.row(id));
        row += &pos_table.row(pos);
    }
    x
}

fn scatter_rows<T: Scalar>(dst: &mut Array2<T>, rows: &[usize], src: &Array2<T>) {
    for (r, &id) in rows.iter().enumerate() {
        let mut row = dst.row_mut(id);
        row += &src.row(r);
    }
}

/// Bidirectional encoder over a batch of token sequences. Dropout is applied
/// only when `rng` is given and the configured rate is positive.
pub fn encoder_forward<T: Scalar>(
    p: &ModelParams<T>,
    seqs: &[&[usize]],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderCache<T>> {
    let cfg = &p.config;
    let (ids, positions, segments) = pack(seqs, cfg.vocab_size, cfg.max_positions)?;
    let mut x = embed_rows(p, &p.enc_pos, &ids, &positions);
    let embed_drop = Dropout::apply(&mut x, cfg.dropout, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(p.encoder.len());
    for l in &p.encoder {
        let (n, ln_attn) = layer_norm_forward(&l.ln_attn, &x);
        let (mut a, attn) = attention_forward(&l.attn, n, None, &segments, &segments, cfg.n_heads, false);
        let drop_attn = Dropout::apply(&mut a, cfg.dropout, rng.as_deref_mut());
        x += &a;
        let (n, ln_ffn) = layer_norm_forward(&l.ln_ffn, &x);
        let (mut f, ffn) = ffn_forward(&l.ffn, n);
        let drop_ffn = Dropout::apply(&mut f, cfg.dropout, rng.as_deref_mut());
        x += &f;
        layers.push(EncLayerCache {
            ln_attn,
            attn,
            drop_attn,
            ln_ffn,
            ffn,
            drop_ffn,
        });
    }
    let (hidden, norm) = layer_norm_forward(&p.enc_norm, &x);
    Ok(EncoderCache {
        ids,
        positions,
        segments,
        embed_drop,
        layers,
        norm,
        hidden,
    })
}

/// Encoder LM head through the shared embedding: `hidden . embed^T`.
pub fn encoder_logits<T: Scalar>(p: &ModelParams<T>, hidden: &Array2<T>) -> Array2<T> {
    hidden.dot(&p.embed.t())
}

/// Backward through the shared head; returns the hidden-state gradient.
pub fn encoder_head_backward<T: Scalar>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    hidden: &Array2<T>,
    dlogits: &Array2<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &dlogits.t(), hidden, T::one(), &mut g.embed);
    dlogits.dot(&p.embed)
}

pub fn encoder_backward<T: Scalar>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    c: &EncoderCache<T>,
    dhidden: &Array2<T>,
) {
    let mut dx = layer_norm_backward(&p.enc_norm, &mut g.enc_norm, &c.norm, dhidden);
    for ((l, gl), lc) in p.encoder.iter().zip(g.encoder.iter_mut()).zip(&c.layers).rev() {
        let mut df = dx.clone();
        lc.drop_ffn.backward(&mut df);
        let dn = ffn_backward(&l.ffn, &mut gl.ffn, &lc.ffn, &df);
        dx += &layer_norm_backward(&l.ln_ffn, &mut gl.ln_ffn, &lc.ln_ffn, &dn);

        let mut da = dx.clone();
        lc.drop_attn.backward(&mut da);
        let (dn, _) = attention_backward(&l.attn, &mut gl.attn, &lc.attn, &da);
        dx += &layer_norm_backward(&l.ln_attn, &mut gl.ln_attn, &lc.ln_attn, &dn);
    }
    c.embed_drop.backward(&mut dx);
    scatter_rows(&mut g.embed, &c.ids, &dx);
    scatter_rows(&mut g.enc_pos, &c.positions, &dx);
}

/// Causal decoder with cross-attention. Prefix `i` attends to encoder
/// segment `i`; logits come from the shared embedding.
pub fn decoder_forward<T: Scalar>(
    p: &ModelParams<T>,
    enc_hidden: &Array2<T>,
    enc_segments: &[Range<usize>],
    prefixes: &[&[usize]],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<DecoderCache<T>> {
    let cfg = &p.config;
    if prefixes.len() != enc_segments.len() {
        return Err(Error::Config(format!(
            "{} decoder prefixes for {} encoder sequences",
            prefixes.len(),
            enc_segments.len()
        )));
    }
    let (ids, positions, segments) = pack(prefixes, cfg.vocab_size, cfg.max_positions)?;
    let mut x = embed_rows(p, &p.dec_pos, &ids, &positions);
    let embed_drop = Dropout::apply(&mut x, cfg.dropout, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(p.decoder.len());
    for l in &p.decoder {
        let (n, ln_self) = layer_norm_forward(&l.ln_self, &x);
        let (mut a, self_attn) = attention_forward(&l.self_attn, n, None, &segments, &segments, cfg.n_heads, true);
        let drop_self = Dropout::apply(&mut a, cfg.dropout, rng.as_deref_mut());
        x += &a;
        let (n, ln_cross) = layer_norm_forward(&l.ln_cross, &x);
        let (mut a, cross_attn) = attention_forward(
            &l.cross_attn,
            n,
            Some(enc_hidden),
            &segments,
            enc_segments,
            cfg.n_heads,
            false,
        );
        let drop_cross = Dropout::apply(&mut a, cfg.dropout, rng.as_deref_mut());
        x += &a;
        let (n, ln_ffn) = layer_norm_forward(&l.ln_ffn, &x);
        let (mut f, ffn) = ffn_forward(&l.ffn, n);
        let drop_ffn = Dropout::apply(&mut f, cfg.dropout, rng.as_deref_mut());
        x += &f;
        layers.push(DecLayerCache {
            ln_self,
            self_attn,
            drop_self,
            ln_cross,
            cross_attn,
            drop_cross,
            ln_ffn,
            ffn,
            drop_ffn,
        });
    }
    let (hidden, norm) = layer_norm_forward(&p.dec_norm, &x);
    let logits = hidden.dot(&p.embed.t());
    Ok(DecoderCache {
        ids,
        positions,
        segments,
        embed_drop,
        layers,
        norm,
        hidden,
        logits,
    })
}

/// Backward from decoder logits; returns the gradient with respect to the
/// encoder hidden states.
pub fn decoder_backward<T: Scalar>(
    p: &ModelParams<T>,
    g: &mut ModelParams<T>,
    c: &DecoderCache<T>,
    enc_rows: usize,
    dlogits: &Array2<T>,
) -> Array2<T> {
    let dhidden = encoder_head_backward(p, g, &c.hidden, dlogits);
    let mut dx = layer_norm_backward(&p.dec_norm, &mut g.dec_norm, &c.norm, &dhidden);
    let mut denc = Array2::zeros((enc_rows, p.config.d_model));
    for ((l, gl), lc) in p.decoder.iter().zip(g.decoder.iter_mut()).zip(&c.layers).rev() {
        let mut df = dx.clone();
        lc.drop_ffn.backward(&mut df);
        let dn = ffn_backward(&l.ffn, &mut gl.ffn, &lc.ffn, &df);
        dx += &layer_norm_backward(&l.ln_ffn, &mut gl.ln_ffn, &lc.ln_ffn, &dn);

        let mut da = dx.clone();
        lc.drop_cross.backward(&mut da);
        let (dn, dkv) = attention_backward(&l.cross_attn, &mut gl.cross_attn, &lc.cross_attn, &da);
        dx += &layer_norm_backward(&l.ln_cross, &mut gl.ln_cross, &lc.ln_cross, &dn);
        if let Some(dkv) = dkv {
            denc += &dkv;
        }

        let mut da = dx.clone();
        lc.drop_self.backward(&mut da);
        let (dn, _) = attention_backward(&l.self_attn, &mut gl.self_attn, &lc.self_attn, &da);
        dx += &layer_norm_backward(&l.ln_self, &mut gl.ln_self, &lc.ln_self, &dn);
    }
    c.embed_drop.backward(&mut dx);
    scatter_rows(&mut g.embed, &c.ids, &dx);
    scatter_rows(&mut g.dec_pos, &c.positions, &dx);
    denc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{softmax_rows, ModelConfig};

    fn tiny() -> ModelParams<f64> {
        ModelParams::init(&ModelConfig {
            d_model: 16,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 24,
            max_positions: 16,
            vocab_size: 30,
            dropout: 0.0,
            init_seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn encoder_shapes() {
        let p = tiny();
        let c = encoder_forward(&p, &[&[4, 5, 6, 7, 8]], None).unwrap();
        assert_eq!(c.hidden.dim(), (5, 16));
        assert_eq!(encoder_logits(&p, &c.hidden).dim(), (5, 30));
        assert!(c.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_is_bidirectional() {
        let p = tiny();
        let a = encoder_forward(&p, &[&[4, 5, 6, 7, 8]], None).unwrap();
        let b = encoder_forward(&p, &[&[4, 5, 6, 7, 9]], None).unwrap();
        let la = encoder_logits(&p, &a.hidden);
        let lb = encoder_logits(&p, &b.hidden);
        let diff: f64 = la.row(0).iter().zip(lb.row(0)).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn packed_batch_matches_single() {
        let p = tiny();
        let both = encoder_forward(&p, &[&[4, 5, 6], &[7, 8, 9, 10]], None).unwrap();
        let one = encoder_forward(&p, &[&[7, 8, 9, 10]], None).unwrap();
        let packed = both.hidden.slice(ndarray::s![3..7, ..]);
        for (x, y) in packed.iter().zip(one.hidden.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let p = tiny();
        let enc = encoder_forward(&p, &[&[4, 5, 6]], None).unwrap();
        let short = decoder_forward(&p, &enc.hidden, &enc.segments, &[&[1, 7]], None).unwrap();
        let long = decoder_forward(&p, &enc.hidden, &enc.segments, &[&[1, 7, 9, 11]], None).unwrap();
        assert_eq!(short.logits.nrows(), 2);
        for r in 0..2 {
            for (x, y) in short.logits.row(r).iter().zip(long.logits.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let bos = decoder_forward(&p, &enc.hidden, &enc.segments, &[&[1]], None).unwrap();
        assert_eq!(bos.logits.nrows(), 1);
        let probs = softmax_rows(&long.logits);
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_cross_attention_ignores_encoder() {
        let mut p = tiny();
        for l in &mut p.decoder {
            l.cross_attn.o.w.fill(0.0);
            l.cross_attn.o.b.fill(0.0);
        }
        let e1 = encoder_forward(&p, &[&[4, 5, 6]], None).unwrap();
        let e2 = encoder_forward(&p, &[&[9, 12, 3, 3]], None).unwrap();
        let d1 = decoder_forward(&p, &e1.hidden, &e1.segments, &[&[1, 7, 8]], None).unwrap();
        let d2 = decoder_forward(&p, &e2.hidden, &e2.segments, &[&[1, 7, 8]], None).unwrap();
        for (x, y) in d1.logits.iter().zip(d2.logits.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn too_long_sequence_is_an_error() {
        let p = tiny();
        let long: Vec<usize> = (0..17).map(|i| i % 30).collect();
        assert!(matches!(
            encoder_forward(&p, &[&long], None),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }
}
