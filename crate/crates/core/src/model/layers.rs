use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Attention, FeedForward, LayerNorm, Linear, Scalar};

const LN_EPS: f64 = 1e-5;

pub(crate) fn linear_forward<T: Scalar>(l: &Linear<T>, x: &ArrayView2<T>) -> Array2<T> {
    let mut y = x.dot(&l.w);
    y += &l.b;
    y
}

/// Accumulates weight gradients and returns the input gradient.
pub(crate) fn linear_backward<T: Scalar>(
    l: &Linear<T>,
    g: &mut Linear<T>,
    x: &ArrayView2<T>,
    dy: &ArrayView2<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut g.w);
    g.b += &dy.sum_axis(Axis(0));
    dy.dot(&l.w.t())
}

pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(ln: &LayerNorm<T>, x: &Array2<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *is = inv;
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    ln: &LayerNorm<T>,
    g: &mut LayerNorm<T>,
    c: &LnCache<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let d = T::of(dy.ncols() as f64);
    let mut dx = dy * &ln.gamma;
    for ((mut row, xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(c.xhat.rows())
        .zip(c.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|v, &h| *v = inv * (*v - mean_g - h * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub(crate) struct FfnCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

pub(crate) fn ffn_forward<T: Scalar>(f: &FeedForward<T>, x: Array2<T>) -> (Array2<T>, FfnCache<T>) {
    let pre = linear_forward(&f.up, &x.view());
    let act = pre.mapv(gelu);
    let y = linear_forward(&f.down, &act.view());
    (y, FfnCache { x, pre, act })
}

pub(crate) fn ffn_backward<T: Scalar>(
    f: &FeedForward<T>,
    g: &mut FeedForward<T>,
    c: &FfnCache<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    let mut dact = linear_backward(&f.down, &mut g.down, &c.act.view(), &dy.view());
    Zip::from(&mut dact).and(&c.pre).for_each(|d, &p| *d *= gelu_grad(p));
    linear_backward(&f.up, &mut g.up, &c.x.view(), &dact.view())
}

/// Row-wise softmax.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub(crate) struct AttnCache<T> {
    xq: Array2<T>,
    xkv: Option<Array2<T>>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    q_segs: Vec<Range<usize>>,
    k_segs: Vec<Range<usize>>,
    heads: usize,
}

/// Multi-head attention over packed rows. Query segment `i` attends to key
/// segment `i`. `xkv = None` means self-attention.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Scalar>(
    a: &Attention<T>,
    xq: Array2<T>,
    xkv: Option<&Array2<T>>,
    q_segs: &[Range<usize>],
    k_segs: &[Range<usize>],
    heads: usize,
    causal: bool,
) -> (Array2<T>, AttnCache<T>) {
    let kv_src = xkv.unwrap_or(&xq);
    let q = linear_forward(&a.q, &xq.view());
    let k = linear_forward(&a.k, &kv_src.view());
    let v = linear_forward(&a.v, &kv_src.view());
    let d = q.ncols();
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(q_segs.len() * heads);
    for (qs, ks) in q_segs.iter().zip(k_segs) {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qs.clone(), cols.clone()]);
            let kh = k.slice(s![ks.clone(), cols.clone()]);
            let vh = v.slice(s![ks.clone(), cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            if causal {
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    row.slice_mut(s![i + 1..]).fill(T::neg_infinity());
                }
            }
            let p = softmax_rows(&scores);
            ctx.slice_mut(s![qs.clone(), cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    let out = linear_forward(&a.o, &ctx.view());
    let cache = AttnCache {
        xq,
        xkv: xkv.cloned(),
        q,
        k,
        v,
        probs,
        ctx,
        q_segs: q_segs.to_vec(),
        k_segs: k_segs.to_vec(),
        heads,
    };
    (out, cache)
}

/// Returns `(d xq, d xkv)`; for self-attention the second is `None` and
/// already folded into the first.
pub(crate) fn attention_backward<T: Scalar>(
    a: &Attention<T>,
    g: &mut Attention<T>,
    c: &AttnCache<T>,
    dout: &Array2<T>,
) -> (Array2<T>, Option<Array2<T>>) {
    let dctx = linear_backward(&a.o, &mut g.o, &c.ctx.view(), &dout.view());
    let d = c.q.ncols();
    let dh = d / c.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    let mut pi = 0;
    for (qs, ks) in c.q_segs.iter().zip(&c.k_segs) {
        for h in 0..c.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &c.probs[pi];
            pi += 1;
            let qh = c.q.slice(s![qs.clone(), cols.clone()]);
            let kh = c.k.slice(s![ks.clone(), cols.clone()]);
            let vh = c.v.slice(s![ks.clone(), cols.clone()]);
            let dctx_h = dctx.slice(s![qs.clone(), cols.clone()]);
            let dp = dctx_h.dot(&vh.t());
            let mut dv_h = dv.slice_mut(s![ks.clone(), cols.clone()]);
            general_mat_mul(T::one(), &p.t(), &dctx_h, T::one(), &mut dv_h);
            let mut ds = dp;
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|x, &pv| *x = pv * (*x - dot) * scale);
            }
            let mut dq_h = dq.slice_mut(s![qs.clone(), cols.clone()]);
            general_mat_mul(T::one(), &ds, &kh, T::one(), &mut dq_h);
            let mut dk_h = dk.slice_mut(s![ks.clone(), cols]);
            general_mat_mul(T::one(), &ds.t(), &qh, T::one(), &mut dk_h);
        }
    }
    let mut dxq = linear_backward(&a.q, &mut g.q, &c.xq.view(), &dq.view());
    let kv_src = c.xkv.as_ref().unwrap_or(&c.xq);
    let mut dxkv = linear_backward(&a.k, &mut g.k, &kv_src.view(), &dk.view());
    dxkv += &linear_backward(&a.v, &mut g.v, &kv_src.view(), &dv.view());
    if c.xkv.is_some() {
        (dxq, Some(dxkv))
    } else {
        dxq += &dxkv;
        (dxq, None)
    }
}

/// Inverted dropout; `None` mask means identity.
pub(crate) struct Dropout<T> {
    mask: Option<Array2<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub(crate) fn apply(x: &mut Array2<T>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Self {
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - rate));
                let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                    if rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                });
                *x *= &mask;
                Dropout { mask: Some(mask) }
            }
            _ => Dropout { mask: None },
        }
    }

    pub(crate) fn backward(&self, dy: &mut Array2<T>) {
        if let Some(m) = &self.mask {
            *dy *= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Array2::from_shape_fn((4, 7), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin() * 5.0);
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let lp = log_softmax_rows(&x);
        for (a, b) in lp.iter().zip(p.iter()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_output_is_normalized() {
        let ln = LayerNorm {
            gamma: Array1::ones(5),
            beta: Array1::zeros(5),
        };
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i + 2 * j) as f64 * 1.5 - 3.0);
        let (y, _) = layer_norm_forward(&ln, &x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-9);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
