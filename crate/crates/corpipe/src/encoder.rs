//! Compact trainable token encoder: embedding table, sinusoidal position
//! signal, and a stack of residual self-attention + feed-forward blocks.
//! A desk-scale stand-in for a pretrained encoder — one dense vector of
//! dimension D per token, with hand-written backprop so the whole model
//! can be finite-difference checked.
//!
//! No layer normalization: keeping the block purely affine-plus-ReLU makes
//! the gradients short and the optimizer behaviour easy to reason about at
//! these sizes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub w1: Array2<F>, // D -> 4D
    pub b1: Array1<F>,
    pub w2: Array2<F>, // 4D -> D
    pub b2: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub embedding: Array2<F>, // vocab x D
    pub layers: Vec<LayerParams<F>>,
}

pub(crate) fn init_matrix<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    // Small-scale normal init; Box-Muller keeps us off extra dependencies.
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        <F as Scalar>::from_f64(0.02 * z)
    })
}

impl<F: Scalar> EncoderParams<F> {
    pub fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let embedding = init_matrix(&mut rng, cfg.vocab_size, d);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: init_matrix(&mut rng, d, d),
                wk: init_matrix(&mut rng, d, d),
                wv: init_matrix(&mut rng, d, d),
                wo: init_matrix(&mut rng, d, d),
                w1: init_matrix(&mut rng, d, 4 * d),
                b1: Array1::zeros(4 * d),
                w2: init_matrix(&mut rng, 4 * d, d),
                b2: Array1::zeros(d),
            })
            .collect();
        EncoderParams { embedding, layers }
    }

    pub fn dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: Array2::zeros(l.wq.raw_dim()),
                    wk: Array2::zeros(l.wk.raw_dim()),
                    wv: Array2::zeros(l.wv.raw_dim()),
                    wo: Array2::zeros(l.wo.raw_dim()),
                    w1: Array2::zeros(l.w1.raw_dim()),
                    b1: Array1::zeros(l.b1.raw_dim()),
                    w2: Array2::zeros(l.w2.raw_dim()),
                    b2: Array1::zeros(l.b2.raw_dim()),
                })
                .collect(),
        }
    }
}

/// Fixed sinusoidal position signal, `len x dim`.
pub fn position_signal<F: Scalar>(len: usize, dim: usize) -> Array2<F> {
    Array2::from_shape_fn((len, dim), |(t, i)| {
        let rate = 10_000f64.powf(2.0 * (i / 2) as f64 / dim as f64);
        let angle = t as f64 / rate;
        <F as Scalar>::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

struct LayerCache<F> {
    x: Array2<F>,       // block input
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>,    // softmax weights, T x T
    ctx: Array2<F>,     // attn . v
    x1: Array2<F>,      // after attention residual
    h_pre: Array2<F>,   // pre-ReLU hidden
}

pub struct EncoderCache<F> {
    ids: Vec<usize>,
    layers: Vec<LayerCache<F>>,
}

fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// Encode a token id sequence into one vector per token.
pub fn encoder_forward<F: Scalar>(
    params: &EncoderParams<F>,
    ids: &[usize],
) -> (Array2<F>, EncoderCache<F>) {
    let d = params.dim();
    let t = ids.len();
    let mut x = Array2::zeros((t, d));
    for (row, &id) in ids.iter().enumerate() {
        x.row_mut(row).assign(&params.embedding.row(id));
    }
    x = x + position_signal::<F>(t, d);
    let scale = F::one() / F::from_usize_(d).sqrt();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let q = x.dot(&layer.wq);
        let k = x.dot(&layer.wk);
        let v = x.dot(&layer.wv);
        let mut attn = q.dot(&k.t()).mapv(|s| s * scale);
        softmax_rows(&mut attn);
        let ctx = attn.dot(&v);
        let x1 = &x + &ctx.dot(&layer.wo);
        let h_pre = x1.dot(&layer.w1) + &layer.b1;
        let h = h_pre.mapv(|z| z.max(F::zero()));
        let x2 = &x1 + &(h.dot(&layer.w2) + &layer.b2);
        caches.push(LayerCache {
            x,
            q,
            k,
            v,
            attn,
            ctx,
            x1,
            h_pre,
        });
        x = x2;
    }
    (
        x,
        EncoderCache {
            ids: ids.to_vec(),
            layers: caches,
        },
    )
}

/// Backprop `d_out` (gradient of the loss in the encoder output) through
/// the stack, accumulating parameter gradients into `grads`.
pub fn encoder_backward<F: Scalar>(
    params: &EncoderParams<F>,
    cache: &EncoderCache<F>,
    d_out: ArrayView2<F>,
    grads: &mut EncoderParams<F>,
) {
    let d = params.dim();
    let scale = F::one() / F::from_usize_(d).sqrt();
    let mut dx = d_out.to_owned();
    for (layer, lc, lg) in itertools_rev(&params.layers, &cache.layers, &mut grads.layers) {
        // Feed-forward block: x2 = x1 + relu(x1 w1 + b1) w2 + b2.
        let h = lc.h_pre.mapv(|z| z.max(F::zero()));
        let dh = dx.dot(&layer.w2.t());
        let dh_pre = &dh * &lc.h_pre.mapv(|z| if z > F::zero() { F::one() } else { F::zero() });
        *lg.w2 += &h.t().dot(&dx);
        *lg.b2 += &dx.sum_axis(Axis(0));
        *lg.w1 += &lc.x1.t().dot(&dh_pre);
        *lg.b1 += &dh_pre.sum_axis(Axis(0));
        let mut dx1 = dx + dh_pre.dot(&layer.w1.t());
        // Attention block: x1 = x + (attn v) wo.
        let d_attn_out = dx1.clone();
        *lg.wo += &lc.ctx.t().dot(&d_attn_out);
        let dctx = d_attn_out.dot(&layer.wo.t());
        let d_attn = dctx.dot(&lc.v.t());
        let dv = lc.attn.t().dot(&dctx);
        // Softmax rows: ds_ij = a_ij (da_ij - sum_k a_ik da_ik).
        let mut dscores = Array2::zeros(lc.attn.raw_dim());
        for i in 0..lc.attn.nrows() {
            let a = lc.attn.row(i);
            let da = d_attn.row(i);
            let dot = a.iter().zip(da.iter()).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
            for j in 0..a.len() {
                dscores[(i, j)] = a[j] * (da[j] - dot);
            }
        }
        dscores.mapv_inplace(|s| s * scale);
        let dq = dscores.dot(&lc.k);
        let dk = dscores.t().dot(&lc.q);
        *lg.wq += &lc.x.t().dot(&dq);
        *lg.wk += &lc.x.t().dot(&dk);
        *lg.wv += &lc.x.t().dot(&dv);
        dx1 = dx1 + dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        dx = dx1;
    }
    for (row, &id) in cache.ids.iter().enumerate() {
        let mut g = grads.embedding.row_mut(id);
        g += &dx.row(row);
    }
}

// Zip params, caches and grads back-to-front without fighting the borrow
// checker inside the loop.
struct LayerGrads<'a, F> {
    wq: &'a mut Array2<F>,
    wk: &'a mut Array2<F>,
    wv: &'a mut Array2<F>,
    wo: &'a mut Array2<F>,
    w1: &'a mut Array2<F>,
    b1: &'a mut Array1<F>,
    w2: &'a mut Array2<F>,
    b2: &'a mut Array1<F>,
}

fn itertools_rev<'a, F>(
    layers: &'a [LayerParams<F>],
    caches: &'a [LayerCache<F>],
    grads: &'a mut [LayerParams<F>],
) -> impl Iterator<Item = (&'a LayerParams<F>, &'a LayerCache<F>, LayerGrads<'a, F>)> {
    layers
        .iter()
        .zip(caches.iter())
        .zip(grads.iter_mut())
        .map(|((l, c), g)| {
            (
                l,
                c,
                LayerGrads {
                    wq: &mut g.wq,
                    wk: &mut g.wk,
                    wv: &mut g.wv,
                    wo: &mut g.wo,
                    w1: &mut g.w1,
                    b1: &mut g.b1,
                    w2: &mut g.w2,
                    b2: &mut g.b2,
                },
            )
        })
        .rev()
}
