//! Desk-scale transformer encoder-decoder.
//!
//! One matrix `embed` (vocab x d_model) serves as the encoder and decoder
//! input embedding and as both output heads (`logits = hidden . embed^T`).

mod checkpoint;
mod layers;
mod network;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use layers::{log_softmax_rows, softmax_rows};
pub use network::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, encoder_head_backward,
    encoder_logits, DecoderCache, EncoderCache,
};

/// Floating-point element type of a model.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + Default
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 512,
            max_positions: 512,
            vocab_size: 0,
            dropout: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return bad("vocab_size, ffn_dim and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln_attn: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub ln_self: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub ln_cross: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// Shared token embedding and LM head.
    pub embed: Array2<T>,
    pub enc_pos: Array2<T>,
    pub dec_pos: Array2<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: LayerNorm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub dec_norm: LayerNorm<T>,
}

/// Named view of one parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let normal = Normal::new(0.0, std).expect("valid std");
        Array2::from_shape_simple_fn((rows, cols), || T::of(normal.sample(&mut self.rng)))
    }

    fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize, scale: f64) -> Linear<T> {
        Linear {
            w: self.matrix(fan_in, fan_out, scale / (fan_in as f64).sqrt()),
            b: Array1::zeros(fan_out),
        }
    }

    fn attention<T: Scalar>(&mut self, d: usize, out_scale: f64) -> Attention<T> {
        Attention {
            q: self.linear(d, d, 1.0),
            k: self.linear(d, d, 1.0),
            v: self.linear(d, d, 1.0),
            o: self.linear(d, d, out_scale),
        }
    }

    fn ffn<T: Scalar>(&mut self, d: usize, hidden: usize, out_scale: f64) -> FeedForward<T> {
        FeedForward {
            up: self.linear(d, hidden, 1.0),
            down: self.linear(hidden, d, out_scale),
        }
    }
}

fn layer_norm<T: Scalar>(d: usize) -> LayerNorm<T> {
    LayerNorm {
        gamma: Array1::ones(d),
        beta: Array1::zeros(d),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialization, a pure function of the config (including
    /// `init_seed`). Structure-token rows of `embed` are drawn from the same
    /// distribution as every other row.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let row_std = 1.0 / (d as f64).sqrt();
        let depth = (config.n_enc_layers + config.n_dec_layers).max(1) as f64;
        let out_scale = 1.0 / (2.0 * depth).sqrt();

        let embed = init.matrix(config.vocab_size, d, row_std);
        let enc_pos = init.matrix(config.max_positions, d, row_std);
        let dec_pos = init.matrix(config.max_positions, d, row_std);
        let encoder = (0..config.n_enc_layers)
            .map(|_| EncoderLayer {
                ln_attn: layer_norm(d),
                attn: init.attention(d, out_scale),
                ln_ffn: layer_norm(d),
                ffn: init.ffn(d, config.ffn_dim, out_scale),
            })
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|_| DecoderLayer {
                ln_self: layer_norm(d),
                self_attn: init.attention(d, out_scale),
                ln_cross: layer_norm(d),
                cross_attn: init.attention(d, out_scale),
                ln_ffn: layer_norm(d),
                ffn: init.ffn(d, config.ffn_dim, out_scale),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            embed,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm: layer_norm(d),
            decoder,
            dec_norm: layer_norm(d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        push2(&mut out, "embed".into(), &self.embed);
        push2(&mut out, "enc.pos".into(), &self.enc_pos);
        push2(&mut out, "dec.pos".into(), &self.dec_pos);
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("enc.{i}");
            push_ln(&mut out, &format!("{p}.ln_attn"), &l.ln_attn);
            push_attn(&mut out, &format!("{p}.attn"), &l.attn);
            push_ln(&mut out, &format!("{p}.ln_ffn"), &l.ln_ffn);
            push_linear(&mut out, &format!("{p}.ffn.up"), &l.ffn.up);
            push_linear(&mut out, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        push_ln(&mut out, "enc.norm", &self.enc_norm);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("dec.{i}");
            push_ln(&mut out, &format!("{p}.ln_self"), &l.ln_self);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_ln(&mut out, &format!("{p}.ln_cross"), &l.ln_cross);
            push_attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            push_ln(&mut out, &format!("{p}.ln_ffn"), &l.ln_ffn);
            push_linear(&mut out, &format!("{p}.ffn.up"), &l.ffn.up);
            push_linear(&mut out, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        push_ln(&mut out, "dec.norm", &self.dec_norm);
        out
    }

    /// Mutable slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        fn s<'a, T, D: ndarray::Dimension>(a: &'a mut ndarray::Array<T, D>) -> &'a mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out: Vec<&mut [T]> = vec![s(&mut self.embed), s(&mut self.enc_pos), s(&mut self.dec_pos)];
        fn lin<'a, T>(out: &mut Vec<&'a mut [T]>, l: &'a mut Linear<T>) {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        fn ln<'a, T>(out: &mut Vec<&'a mut [T]>, l: &'a mut LayerNorm<T>) {
            out.push(l.gamma.as_slice_mut().expect("standard layout"));
            out.push(l.beta.as_slice_mut().expect("standard layout"));
        }
        fn attn<'a, T>(out: &mut Vec<&'a mut [T]>, a: &'a mut Attention<T>) {
            lin(out, &mut a.q);
            lin(out, &mut a.k);
            lin(out, &mut a.v);
            lin(out, &mut a.o);
        }
        for l in &mut self.encoder {
            ln(&mut out, &mut l.ln_attn);
            attn(&mut out, &mut l.attn);
            ln(&mut out, &mut l.ln_ffn);
            lin(&mut out, &mut l.ffn.up);
            lin(&mut out, &mut l.ffn.down);
        }
        ln(&mut out, &mut self.enc_norm);
        for l in &mut self.decoder {
            ln(&mut out, &mut l.ln_self);
            attn(&mut out, &mut l.self_attn);
            ln(&mut out, &mut l.ln_cross);
            attn(&mut out, &mut l.cross_attn);
            ln(&mut out, &mut l.ln_ffn);
            lin(&mut out, &mut l.ffn.up);
            lin(&mut out, &mut l.ffn.down);
        }
        ln(&mut out, &mut self.dec_norm);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum()
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(&ModelConfig {
            init_seed: 0,
            ..self.config.clone()
        })
        .expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d = U::of(s.to_f64().unwrap_or(f64::NAN));
            }
        }
        out.config = self.config.clone();
        out
    }
}

fn push2<'a, T>(out: &mut Vec<TensorRef<'a, T>>, name: String, a: &'a Array2<T>) {
    out.push(TensorRef {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    });
}

fn push1<'a, T>(out: &mut Vec<TensorRef<'a, T>>, name: String, a: &'a Array1<T>) {
    out.push(TensorRef {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    });
}

fn push_linear<'a, T>(out: &mut Vec<TensorRef<'a, T>>, name: &str, l: &'a Linear<T>) {
    push2(out, format!("{name}.w"), &l.w);
    push1(out, format!("{name}.b"), &l.b);
}

fn push_ln<'a, T>(out: &mut Vec<TensorRef<'a, T>>, name: &str, l: &'a LayerNorm<T>) {
    push1(out, format!("{name}.gamma"), &l.gamma);
    push1(out, format!("{name}.beta"), &l.beta);
}

fn push_attn<'a, T>(out: &mut Vec<TensorRef<'a, T>>, name: &str, a: &'a Attention<T>) {
    push_linear(out, &format!("{name}.q"), &a.q);
    push_linear(out, &format!("{name}.k"), &a.k);
    push_linear(out, &format!("{name}.v"), &a.v);
    push_linear(out, &format!("{name}.o"), &a.o);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 32,
            max_positions: 32,
            vocab_size: 100,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f32>::init(&cfg()).unwrap();
        let b = ModelParams::<f32>::init(&cfg()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(&ModelConfig {
            init_seed: 1,
            ..cfg()
        })
        .unwrap();
        assert_ne!(a.embed, c.embed);
    }

    #[test]
    fn embedding_shape_and_finiteness() {
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        assert_eq!(p.embed.dim(), (100, 16));
        assert!(p.all_finite());
    }

    #[test]
    fn single_embedding_storage() {
        let p = ModelParams::<f64>::init(&cfg()).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        let vocab_sized: Vec<_> = p
            .tensors()
            .into_iter()
            .filter(|t| t.shape.first() == Some(&100))
            .map(|t| t.name)
            .collect();
        assert_eq!(vocab_sized, vec!["embed".to_string()]);
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut q = p.clone();
        assert_eq!(q.tensors_mut().len(), names.len());
    }

    #[test]
    fn rejects_bad_head_split() {
        let bad = ModelConfig {
            n_heads: 3,
            ..cfg()
        };
        assert!(ModelParams::<f32>::init(&bad).is_err());
    }
}
