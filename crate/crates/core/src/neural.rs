//! Task-conditioned autoregressive decoder over the 18-token rule vocabulary.
//!
//! A small transformer decoder implemented directly on `ndarray`: token
//! embeddings plus learnable positional encodings plus a projected task
//! vector broadcast over the sequence, a stack of pre-norm decoder layers
//! (causal multi-head self-attention, then a position-wise feedforward), and
//! a linear output head. There is no cross-attention; the decoder attends
//! only to itself.
//!
//! Training minimizes next-token cross-entropy with teacher forcing, using
//! Adam with global gradient-norm clipping. The backward pass is written by
//! hand and verified against central finite differences (see
//! [`gradient_check`]); the whole module is generic over `f32` (production)
//! and `f64` (gradient checking).
//!
//! Gradient accumulation over a batch folds per-item gradients in item
//! order, so parallel evaluation is bit-identical to a serial pass and
//! training is deterministic given the seed.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EliteDataset, D_TASK};
use crate::expr::{Token, VOCAB_SIZE};
use crate::seeds::{self, domain};

const LN_EPS: f64 = 1e-5;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Window width for parallel per-item gradient computation; folding stays in
/// item order, so the window size never changes the result.
const GRAD_WINDOW: usize = 8;

/// Float type the model runs at.
pub trait Scalar:
    ndarray::LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unrecognized model file header")]
    FormatVersionMismatch,
    #[error("model file shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub vocab: usize,
    pub max_len: usize,
    pub d_task: usize,
    pub d_ff: usize,
}

impl Default for TransformerConfig {
    fn default() -> TransformerConfig {
        TransformerConfig {
            d_model: 256,
            heads: 4,
            layers: 4,
            dropout: 0.1,
            vocab: VOCAB_SIZE,
            max_len: 513,
            d_task: D_TASK,
            d_ff: 1024,
        }
    }
}

impl TransformerConfig {
    /// Small model for fast experiments.
    pub fn small(d_model: usize, heads: usize, layers: usize) -> TransformerConfig {
        TransformerConfig {
            d_model,
            heads,
            layers,
            d_ff: 4 * d_model,
            ..TransformerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(NeuralError::InvalidConfig(format!(
                "model dimension {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab != VOCAB_SIZE {
            return Err(NeuralError::InvalidConfig(format!(
                "vocabulary must be {VOCAB_SIZE}, got {}",
                self.vocab
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NeuralError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One decoder layer's weights. Linear maps apply as `x . W^T` with `W`
/// shaped `(out, in)`; attention projections carry no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub ff1_w: Array2<F>,
    pub ff1_b: Array1<F>,
    pub ff2_w: Array2<F>,
    pub ff2_b: Array1<F>,
}

/// All model weights plus the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<F> {
    pub config: TransformerConfig,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub task_w: Array2<F>,
    pub task_b: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

/// Name, flat offset, and length of one parameter group.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl<F: Scalar> TransformerParams<F> {
    pub fn zeros(config: &TransformerConfig) -> TransformerParams<F> {
        let d = config.d_model;
        let layer = || LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            ff1_w: Array2::zeros((config.d_ff, d)),
            ff1_b: Array1::zeros(config.d_ff),
            ff2_w: Array2::zeros((d, config.d_ff)),
            ff2_b: Array1::zeros(config.d_ff.min(usize::MAX)), // replaced below
        };
        let mut layers: Vec<LayerParams<F>> = (0..config.layers).map(|_| layer()).collect();
        for l in &mut layers {
            l.ff2_b = Array1::zeros(d);
        }
        TransformerParams {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            task_w: Array2::zeros((d, config.d_task)),
            task_b: Array1::zeros(d),
            layers,
            w_out: Array2::zeros((config.vocab, d)),
            b_out: Array1::zeros(config.vocab),
        }
    }

    /// Gaussian init with the given standard deviation for weight matrices
    /// and embeddings; biases zero, layer-norm gains one.
    pub fn init(config: &TransformerConfig, rng: &mut ChaCha8Rng, std: f64) -> TransformerParams<F> {
        let mut p = TransformerParams::zeros(config);
        let mut fill = |a: &mut Array2<F>| {
            for v in a.iter_mut() {
                *v = sc(normal_sample(rng) * std);
            }
        };
        fill(&mut p.tok_emb);
        fill(&mut p.pos_emb);
        fill(&mut p.task_w);
        fill(&mut p.w_out);
        for l in &mut p.layers {
            fill(&mut l.wq);
            fill(&mut l.wk);
            fill(&mut l.wv);
            fill(&mut l.wo);
            fill(&mut l.ff1_w);
            fill(&mut l.ff2_w);
            l.ln1_g.fill(F::one());
            l.ln2_g.fill(F::one());
        }
        p
    }

    /// Visits every parameter tensor as a flat slice, in the serialization
    /// order: embeddings, task projection, per-layer groups, output head.
    fn for_each_group(&self, mut f: impl FnMut(String, &[F])) {
        f("tok_emb".into(), self.tok_emb.as_slice().unwrap());
        f("pos_emb".into(), self.pos_emb.as_slice().unwrap());
        f("task_w".into(), self.task_w.as_slice().unwrap());
        f("task_b".into(), self.task_b.as_slice().unwrap());
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layer{i}.ln1_g"), l.ln1_g.as_slice().unwrap());
            f(format!("layer{i}.ln1_b"), l.ln1_b.as_slice().unwrap());
            f(format!("layer{i}.wq"), l.wq.as_slice().unwrap());
            f(format!("layer{i}.wk"), l.wk.as_slice().unwrap());
            f(format!("layer{i}.wv"), l.wv.as_slice().unwrap());
            f(format!("layer{i}.wo"), l.wo.as_slice().unwrap());
            f(format!("layer{i}.ln2_g"), l.ln2_g.as_slice().unwrap());
            f(format!("layer{i}.ln2_b"), l.ln2_b.as_slice().unwrap());
            f(format!("layer{i}.ff1_w"), l.ff1_w.as_slice().unwrap());
            f(format!("layer{i}.ff1_b"), l.ff1_b.as_slice().unwrap());
            f(format!("layer{i}.ff2_w"), l.ff2_w.as_slice().unwrap());
            f(format!("layer{i}.ff2_b"), l.ff2_b.as_slice().unwrap());
        }
        f("w_out".into(), self.w_out.as_slice().unwrap());
        f("b_out".into(), self.b_out.as_slice().unwrap());
    }

    pub fn layout(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::new();
        let mut offset = 0;
        self.for_each_group(|name, slice| {
            groups.push(ParamGroup {
                name,
                offset,
                len: slice.len(),
            });
            offset += slice.len();
        });
        groups
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_group(|_, s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<F> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.for_each_group(|_, s| flat.extend_from_slice(s));
        flat
    }

    pub fn from_flat(config: &TransformerConfig, flat: &[F]) -> Result<TransformerParams<F>, NeuralError> {
        let mut p = TransformerParams::zeros(config);
        if flat.len() != p.num_params() {
            return Err(NeuralError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                p.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut take = |a: &mut [F]| {
            a.copy_from_slice(&flat[offset..offset + a.len()]);
            offset += a.len();
        };
        take(p.tok_emb.as_slice_mut().unwrap());
        take(p.pos_emb.as_slice_mut().unwrap());
        take(p.task_w.as_slice_mut().unwrap());
        take(p.task_b.as_slice_mut().unwrap());
        for l in &mut p.layers {
            take(l.ln1_g.as_slice_mut().unwrap());
            take(l.ln1_b.as_slice_mut().unwrap());
            take(l.wq.as_slice_mut().unwrap());
            take(l.wk.as_slice_mut().unwrap());
            take(l.wv.as_slice_mut().unwrap());
            take(l.wo.as_slice_mut().unwrap());
            take(l.ln2_g.as_slice_mut().unwrap());
            take(l.ln2_b.as_slice_mut().unwrap());
            take(l.ff1_w.as_slice_mut().unwrap());
            take(l.ff1_b.as_slice_mut().unwrap());
            take(l.ff2_w.as_slice_mut().unwrap());
            take(l.ff2_b.as_slice_mut().unwrap());
        }
        take(p.w_out.as_slice_mut().unwrap());
        take(p.b_out.as_slice_mut().unwrap());
        Ok(p)
    }

    /// Elementwise accumulate, used for gradient folding.
    pub fn add_in_place(&mut self, other: &TransformerParams<F>) {
        self.tok_emb += &other.tok_emb;
        self.pos_emb += &other.pos_emb;
        self.task_w += &other.task_w;
        self.task_b += &other.task_b;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.ln1_g += &b.ln1_g;
            a.ln1_b += &b.ln1_b;
            a.wq += &b.wq;
            a.wk += &b.wk;
            a.wv += &b.wv;
            a.wo += &b.wo;
            a.ln2_g += &b.ln2_g;
            a.ln2_b += &b.ln2_b;
            a.ff1_w += &b.ff1_w;
            a.ff1_b += &b.ff1_b;
            a.ff2_w += &b.ff2_w;
            a.ff2_b += &b.ff2_b;
        }
        self.w_out += &other.w_out;
        self.b_out += &other.b_out;
    }

    /// Precision conversion (used by the gradient checker).
    pub fn cast<G: Scalar>(&self) -> TransformerParams<G> {
        let flat: Vec<G> = self
            .to_flat()
            .iter()
            .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
            .collect();
        TransformerParams::from_flat(&self.config, &flat).expect("same layout")
    }
}

/// Box-Muller standard normal draw.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn embed_task<F: Scalar>(params: &TransformerParams<F>, e_task: &[f64; D_TASK]) -> Array1<F> {
    let e: Array1<F> = Array1::from_iter(e_task.iter().map(|&v| sc::<F>(v)));
    params.task_w.dot(&e) + &params.task_b
}

/// Row-wise layer norm; returns (output, xhat, inv_std).
fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    g: &Array1<F>,
    b: &Array1<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    let dinv = sc::<F>(1.0 / cols as f64);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() * dinv;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * dinv;
        let is = F::one() / (var + sc::<F>(LN_EPS)).sqrt();
        inv_std[i] = is;
        for j in 0..cols {
            let xh = (x[[i, j]] - mean) * is;
            xhat[[i, j]] = xh;
            out[[i, j]] = xh * g[j] + b[j];
        }
    }
    (out, xhat, inv_std)
}

/// Backward through layer norm. Returns (dx, dg, db).
fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    inv_std: &Array1<F>,
    g: &Array1<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (rows, cols) = dy.dim();
    let mut dx = Array2::zeros((rows, cols));
    let dg = (dy * xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dinv = sc::<F>(1.0 / cols as f64);
    for i in 0..rows {
        let mut mean_h = F::zero();
        let mut mean_hx = F::zero();
        for j in 0..cols {
            let h = dy[[i, j]] * g[j];
            mean_h = mean_h + h;
            mean_hx = mean_hx + h * xhat[[i, j]];
        }
        mean_h = mean_h * dinv;
        mean_hx = mean_hx * dinv;
        for j in 0..cols {
            let h = dy[[i, j]] * g[j];
            dx[[i, j]] = inv_std[i] * (h - mean_h - xhat[[i, j]] * mean_hx);
        }
    }
    (dx, dg, db)
}

/// Causal row softmax: row `i` normalizes over columns `0..=i`; later columns
/// are exactly zero.
fn causal_softmax<F: Scalar>(scores: &Array2<F>) -> Array2<F> {
    let n = scores.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let mut maxv = scores[[i, 0]];
        for j in 1..=i {
            if scores[[i, j]] > maxv {
                maxv = scores[[i, j]];
            }
        }
        let mut sum = F::zero();
        for j in 0..=i {
            let e = (scores[[i, j]] - maxv).exp();
            out[[i, j]] = e;
            sum = sum + e;
        }
        for j in 0..=i {
            out[[i, j]] = out[[i, j]] / sum;
        }
    }
    out
}

struct LayerCache<F> {
    n1: Array2<F>,
    xhat1: Array2<F>,
    inv_std1: Array1<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Vec<Array2<F>>,
    heads_out: Array2<F>,
    drop1: Option<Array2<F>>,
    n2: Array2<F>,
    xhat2: Array2<F>,
    inv_std2: Array1<F>,
    ff1_pre: Array2<F>,
    ff1_act: Array2<F>,
    drop2: Option<Array2<F>>,
}

struct ForwardCache<F> {
    ids: Vec<usize>,
    layers: Vec<LayerCache<F>>,
    x_final: Array2<F>,
}

/// Dropout configuration for one forward pass.
enum DropoutMode<'a> {
    Off,
    On { p: f64, rng: &'a mut ChaCha8Rng },
}

fn dropout_mask<F: Scalar>(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    let keep = 1.0 / (1.0 - p);
    let mut mask = Array2::zeros(shape);
    for v in mask.iter_mut() {
        *v = if rng.random::<f64>() < p {
            F::zero()
        } else {
            sc(keep)
        };
    }
    mask
}

fn forward_cached<F: Scalar>(
    params: &TransformerParams<F>,
    tokens: &[Token],
    e_task: &[f64; D_TASK],
    mut dropout: DropoutMode,
) -> Result<(Array2<F>, ForwardCache<F>), NeuralError> {
    let cfg = &params.config;
    let len = tokens.len();
    if len > cfg.max_len {
        return Err(NeuralError::SequenceTooLong {
            len,
            max: cfg.max_len,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|t| t.id() as usize).collect();
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dk = d / heads;
    let scale = sc::<F>(1.0 / (dk as f64).sqrt());

    let c = embed_task(params, e_task);
    let mut x = Array2::zeros((len, d));
    for (i, &id) in ids.iter().enumerate() {
        let row = &params.tok_emb.row(id) + &params.pos_emb.row(i) + &c;
        x.row_mut(i).assign(&row);
    }

    let mut caches = Vec::with_capacity(cfg.layers);
    for layer in &params.layers {
        let (n1, xhat1, inv_std1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
        let q = n1.dot(&layer.wq.t());
        let k = n1.dot(&layer.wk.t());
        let v = n1.dot(&layer.wv.t());

        let mut heads_out = Array2::zeros((len, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let a = causal_softmax(&scores);
            let oh = a.dot(&vh);
            heads_out.slice_mut(cols).assign(&oh);
            attn.push(a);
        }
        let proj = heads_out.dot(&layer.wo.t());
        let (proj_dropped, drop1) = match dropout {
            DropoutMode::On { p, ref mut rng } if p > 0.0 => {
                let mask = dropout_mask::<F>((len, d), p, rng);
                (&proj * &mask, Some(mask))
            }
            _ => (proj.clone(), None),
        };
        let x_mid = &x + &proj_dropped;

        let (n2, xhat2, inv_std2) = layer_norm(&x_mid, &layer.ln2_g, &layer.ln2_b);
        let ff1_pre = n2.dot(&layer.ff1_w.t()) + &layer.ff1_b;
        let ff1_act = ff1_pre.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let ff2 = ff1_act.dot(&layer.ff2_w.t()) + &layer.ff2_b;
        let (ff2_dropped, drop2) = match dropout {
            DropoutMode::On { p, ref mut rng } if p > 0.0 => {
                let mask = dropout_mask::<F>((len, d), p, rng);
                (&ff2 * &mask, Some(mask))
            }
            _ => (ff2.clone(), None),
        };
        x = &x_mid + &ff2_dropped;

        caches.push(LayerCache {
            n1,
            xhat1,
            inv_std1,
            q,
            k,
            v,
            attn,
            heads_out,
            drop1,
            n2,
            xhat2,
            inv_std2,
            ff1_pre,
            ff1_act,
            drop2,
        });
    }

    let logits = x.dot(&params.w_out.t()) + &params.b_out;
    Ok((
        logits,
        ForwardCache {
            ids,
            layers: caches,
            x_final: x,
        },
    ))
}

/// Inference-mode forward pass: logits for every position, shape `L x R`.
pub fn forward<F: Scalar>(
    params: &TransformerParams<F>,
    tokens: &[Token],
    e_task: &[f64; D_TASK],
) -> Result<Array2<F>, NeuralError> {
    forward_cached(params, tokens, e_task, DropoutMode::Off).map(|(logits, _)| logits)
}

/// Logits for the next token after `prefix` (inference mode): the last row
/// of [`forward`].
pub fn next_token_logits<F: Scalar>(
    params: &TransformerParams<F>,
    prefix: &[Token],
    e_task: &[f64; D_TASK],
) -> Result<Array1<F>, NeuralError> {
    let logits = forward(params, prefix, e_task)?;
    Ok(logits.row(logits.nrows() - 1).to_owned())
}

/// Attention matrices per layer and head (inference mode), for diagnostics.
pub fn attention_weights<F: Scalar>(
    params: &TransformerParams<F>,
    tokens: &[Token],
    e_task: &[f64; D_TASK],
) -> Result<Vec<Vec<Array2<F>>>, NeuralError> {
    let (_, cache) = forward_cached(params, tokens, e_task, DropoutMode::Off)?;
    Ok(cache.layers.into_iter().map(|l| l.attn).collect())
}

/// Mean negative log-likelihood of `targets` under `logits` rows; row `i`
/// scores `targets[i]` (teacher forcing: targets are the inputs shifted one
/// left). `targets.len()` may be shorter than the number of rows, in which
/// case trailing rows are ignored.
pub fn loss<F: Scalar>(logits: &Array2<F>, targets: &[Token]) -> f64 {
    assert!(targets.len() <= logits.nrows());
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let row = logits.row(i);
        total += nll_row(&row.to_owned(), t.id() as usize);
    }
    total / targets.len() as f64
}

fn nll_row<F: Scalar>(row: &Array1<F>, target: usize) -> f64 {
    let maxv = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = 0.0f64;
    for &v in row {
        sum += (v - maxv).to_f64().unwrap().exp();
    }
    sum.ln() - (row[target] - maxv).to_f64().unwrap()
}

/// Softmax of one logits row in f64 space.
pub fn softmax_row<F: Scalar>(row: &Array1<F>) -> Vec<f64> {
    let maxv = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| (v - maxv).to_f64().unwrap().exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Backward pass for one item. `dlogits` must already carry any loss
/// normalization and padding mask.
fn backward<F: Scalar>(
    params: &TransformerParams<F>,
    e_task: &[f64; D_TASK],
    cache: &ForwardCache<F>,
    dlogits: &Array2<F>,
) -> TransformerParams<F> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dk = d / heads;
    let scale = sc::<F>(1.0 / (dk as f64).sqrt());
    let len = cache.ids.len();

    let mut grads = TransformerParams::zeros(cfg);

    // Output head.
    grads.w_out = dlogits.t().dot(&cache.x_final);
    grads.b_out = dlogits.sum_axis(Axis(0));
    let mut dx = dlogits.dot(&params.w_out);

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // Feedforward sublayer: x = x_mid + dropout(ff2(n2)).
        let dff2 = match &lc.drop2 {
            Some(mask) => &dx * mask,
            None => dx.clone(),
        };
        lg.ff2_w = dff2.t().dot(&lc.ff1_act);
        lg.ff2_b = dff2.sum_axis(Axis(0));
        let dff1_act = dff2.dot(&layer.ff2_w);
        let dff1_pre = ndarray::Zip::from(&dff1_act)
            .and(&lc.ff1_pre)
            .map_collect(|&g, &p| if p > F::zero() { g } else { F::zero() });
        lg.ff1_w = dff1_pre.t().dot(&lc.n2);
        lg.ff1_b = dff1_pre.sum_axis(Axis(0));
        let dn2 = dff1_pre.dot(&layer.ff1_w);
        let (dx_mid_ln, dg2, db2) = layer_norm_backward(&dn2, &lc.xhat2, &lc.inv_std2, &layer.ln2_g);
        lg.ln2_g = dg2;
        lg.ln2_b = db2;
        let dx_mid = &dx + &dx_mid_ln;

        // Attention sublayer: x_mid = x_in + dropout(wo(heads(n1))).
        let dproj = match &lc.drop1 {
            Some(mask) => &dx_mid * mask,
            None => dx_mid.clone(),
        };
        lg.wo = dproj.t().dot(&lc.heads_out);
        let dheads = dproj.dot(&layer.wo);

        let mut dq = Array2::zeros((len, d));
        let mut dkm = Array2::zeros((len, d));
        let mut dv = Array2::zeros((len, d));
        for h in 0..heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let a = &lc.attn[h];
            let doh = dheads.slice(cols);
            let vh = lc.v.slice(cols);
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);

            let dvh = a.t().dot(&doh);
            let da = doh.dot(&vh.t());
            // Softmax backward per causal row: ds = a * (da - sum(da * a)).
            let mut ds = Array2::zeros((len, len));
            for i in 0..len {
                let mut dot = F::zero();
                for j in 0..=i {
                    dot = dot + da[[i, j]] * a[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
                }
            }
            let dqh = ds.dot(&kh) * scale;
            let dkh = ds.t().dot(&qh) * scale;
            dq.slice_mut(cols).assign(&dqh);
            dkm.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }

        lg.wq = dq.t().dot(&lc.n1);
        lg.wk = dkm.t().dot(&lc.n1);
        lg.wv = dv.t().dot(&lc.n1);
        let dn1 = dq.dot(&layer.wq) + dkm.dot(&layer.wk) + dv.dot(&layer.wv);
        let (dx_in_ln, dg1, db1) = layer_norm_backward(&dn1, &lc.xhat1, &lc.inv_std1, &layer.ln1_g);
        lg.ln1_g = dg1;
        lg.ln1_b = db1;
        dx = &dx_mid + &dx_in_ln;
    }

    // Input embeddings: token rows scatter-add, positions align, task vector
    // broadcast over positions.
    for (i, &id) in cache.ids.iter().enumerate() {
        let mut row = grads.tok_emb.row_mut(id);
        row += &dx.row(i);
        let mut prow = grads.pos_emb.row_mut(i);
        prow += &dx.row(i);
    }
    let dc = dx.sum_axis(Axis(0));
    grads.task_b = dc.clone();
    let e: Array1<F> = Array1::from_iter(e_task.iter().map(|&v| sc::<F>(v)));
    for r in 0..d {
        for c in 0..cfg.d_task {
            grads.task_w[[r, c]] = dc[r] * e[c];
        }
    }
    grads
}

/// Per-item training pass: forward with dropout, cross-entropy over the
/// first `true_len - 1` positions, backward. Returns (summed NLL, number of
/// scored positions, gradients scaled by `grad_scale`).
#[allow(clippy::too_many_arguments)]
fn item_loss_and_grad<F: Scalar>(
    params: &TransformerParams<F>,
    tokens: &[Token],
    true_len: usize,
    e_task: &[f64; D_TASK],
    dropout_p: f64,
    dropout_seed: u64,
    grad_scale: f64,
) -> (f64, usize, TransformerParams<F>) {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mode = if dropout_p > 0.0 {
        DropoutMode::On {
            p: dropout_p,
            rng: &mut rng,
        }
    } else {
        DropoutMode::Off
    };
    let (logits, cache) = forward_cached(params, tokens, e_task, mode).expect("length checked");
    let positions = true_len - 1;
    let mut dlogits: Array2<F> = Array2::zeros(logits.dim());
    let mut nll_sum = 0.0;
    for i in 0..positions {
        let target = tokens[i + 1].id() as usize;
        let row = logits.row(i).to_owned();
        nll_sum += nll_row(&row, target);
        let probs = softmax_row(&row);
        for (j, &p) in probs.iter().enumerate() {
            let delta = if j == target { p - 1.0 } else { p };
            dlogits[[i, j]] = sc(delta * grad_scale);
        }
    }
    let grads = backward(params, e_task, &cache, &dlogits);
    (nll_sum, positions, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Run the finite-difference gradient check before training.
    pub check_gradients: bool,
    /// Stop once the epoch mean loss falls below this fraction of the first
    /// epoch's loss.
    pub early_stop_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            grad_clip: 1.0,
            check_gradients: false,
            early_stop_ratio: None,
        }
    }
}

/// Adam with moments kept in f64 regardless of the model precision.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step<F: Scalar>(&mut self, params: &mut Vec<F>, grads: &[f64]) {
        self.t += 1;
        let b1c = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2c = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            let p = params[i].to_f64().unwrap() - self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            params[i] = sc(p);
        }
    }
}

/// Trains a model on one rule corpus. Sequences are padded to the batch
/// maximum with `END`; padded positions are masked out of the loss. Returns
/// the trained parameters and per-epoch mean loss.
pub fn train<F: Scalar>(
    ds: &EliteDataset,
    mcfg: &TransformerConfig,
    tcfg: &TrainConfig,
) -> Result<(TransformerParams<F>, Vec<f64>), NeuralError> {
    mcfg.validate()?;
    if ds.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    for r in &ds.records {
        if r.tokens.len() > mcfg.max_len {
            return Err(NeuralError::SequenceTooLong {
                len: r.tokens.len(),
                max: mcfg.max_len,
            });
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::derive(tcfg.seed, domain::TRAIN, 0));
    let mut params: TransformerParams<F> = TransformerParams::init(mcfg, &mut init_rng, 0.02);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), tcfg.learning_rate);

    let n = ds.records.len();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(tcfg.seed, domain::TRAIN, 1 + epoch as u64));
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_nll = 0.0;
        let mut epoch_positions = 0usize;
        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let pad_len = batch
                .iter()
                .map(|&i| ds.records[i].tokens.len())
                .max()
                .unwrap();
            let total_positions: usize = batch
                .iter()
                .map(|&i| ds.records[i].tokens.len() - 1)
                .sum();
            let grad_scale = 1.0 / total_positions as f64;

            let items: Vec<(Vec<Token>, usize, [f64; D_TASK], u64)> = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let r = &ds.records[i];
                    let mut toks = r.tokens.clone();
                    toks.resize(pad_len, Token::End);
                    let dropout_seed = seeds::derive(
                        tcfg.seed,
                        domain::TRAIN,
                        0x1000_0000_0000
                            | ((epoch as u64) << 28)
                            | ((batch_idx as u64) << 12)
                            | slot as u64,
                    );
                    (toks, r.tokens.len(), r.embedding, dropout_seed)
                })
                .collect();

            // Per-item gradients in parallel windows, folded in item order so
            // the sum is independent of thread count.
            let mut batch_grads: Option<TransformerParams<F>> = None;
            for window in items.chunks(GRAD_WINDOW) {
                let results: Vec<(f64, usize, TransformerParams<F>)> = window
                    .par_iter()
                    .map(|(toks, true_len, emb, dseed)| {
                        item_loss_and_grad(
                            &params, toks, *true_len, emb, mcfg.dropout, *dseed, grad_scale,
                        )
                    })
                    .collect();
                for (nll, positions, g) in results {
                    epoch_nll += nll;
                    epoch_positions += positions;
                    match &mut batch_grads {
                        None => batch_grads = Some(g),
                        Some(acc) => acc.add_in_place(&g),
                    }
                }
            }
            let grads = batch_grads.expect("nonempty batch");

            // Clip by global norm, then Adam (both in f64).
            let gflat: Vec<f64> = grads.to_flat().iter().map(|v| v.to_f64().unwrap()).collect();
            let norm: f64 = gflat.iter().map(|g| g * g).sum::<f64>().sqrt();
            let scale = if norm > tcfg.grad_clip && norm > 0.0 {
                tcfg.grad_clip / norm
            } else {
                1.0
            };
            let clipped: Vec<f64> = gflat.iter().map(|g| g * scale).collect();
            adam.step(&mut flat, &clipped);
            params = TransformerParams::from_flat(mcfg, &flat)?;
        }

        let mean_loss = epoch_nll / epoch_positions as f64;
        history.push(mean_loss);
        log::debug!("epoch {epoch}: mean loss {mean_loss:.4}");
        if let Some(ratio) = tcfg.early_stop_ratio {
            if mean_loss <= history[0] * ratio {
                break;
            }
        }
    }
    Ok((params, history))
}

/// Relative error between analytic and central-difference gradients, per
/// parameter group: `|ga - gn| / max(|ga|, |gn|, 1e-12)` in the L2 sense.
/// Runs in the precision of `F` with dropout off.
pub fn gradient_check<F: Scalar>(
    mcfg: &TransformerConfig,
    batch: &[(Vec<Token>, [f64; D_TASK])],
    seed: u64,
) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: TransformerParams<F> = TransformerParams::init(mcfg, &mut rng, 0.1);

    let batch_loss = |p: &TransformerParams<F>| -> f64 {
        let mut total = 0.0;
        let mut positions = 0usize;
        for (tokens, emb) in batch {
            let logits = forward(p, tokens, emb).expect("sequence fits");
            for i in 0..tokens.len() - 1 {
                total += nll_row(&logits.row(i).to_owned(), tokens[i + 1].id() as usize);
                positions += 1;
            }
        }
        total / positions as f64
    };

    // Analytic gradients over the same mean-NLL objective.
    let total_positions: usize = batch.iter().map(|(t, _)| t.len() - 1).sum();
    let mut analytic = TransformerParams::<F>::zeros(mcfg);
    for (tokens, emb) in batch {
        let (_, _, g) = item_loss_and_grad(
            &params,
            tokens,
            tokens.len(),
            emb,
            0.0,
            0,
            1.0 / total_positions as f64,
        );
        analytic.add_in_place(&g);
    }
    let ga = analytic.to_flat();

    let h = 1e-5;
    let mut flat = params.to_flat();
    let mut gn = vec![0.0f64; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + sc(h);
        let plus = batch_loss(&TransformerParams::from_flat(mcfg, &flat).unwrap());
        flat[i] = orig - sc(h);
        let minus = batch_loss(&TransformerParams::from_flat(mcfg, &flat).unwrap());
        flat[i] = orig;
        gn[i] = (plus - minus) / (2.0 * h);
    }

    params
        .layout()
        .into_iter()
        .map(|g| {
            let mut diff = 0.0f64;
            let mut na = 0.0f64;
            let mut nn = 0.0f64;
            for i in g.offset..g.offset + g.len {
                let a = ga[i].to_f64().unwrap();
                let n = gn[i];
                diff += (a - n) * (a - n);
                na += a * a;
                nn += n * n;
            }
            let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12);
            (g.name, rel)
        })
        .collect()
}

const MODEL_MAGIC: &[u8; 4] = b"TGPM";
const MODEL_VERSION: u32 = 1;

/// Binary model format: magic `TGPM`, version, config block, then all weight
/// groups as little-endian f32 in layout order.
pub fn save_params(params: &TransformerParams<f32>, path: &Path) -> Result<(), NeuralError> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [
        cfg.d_model as u32,
        cfg.heads as u32,
        cfg.layers as u32,
        cfg.vocab as u32,
        cfg.max_len as u32,
        cfg.d_task as u32,
        cfg.d_ff as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(cfg.dropout as f32).to_le_bytes());
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<TransformerParams<f32>, NeuralError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 || &bytes[0..4] != MODEL_MAGIC {
        return Err(NeuralError::FormatVersionMismatch);
    }
    let read_u32 = |off: usize| -> u32 { u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) };
    if read_u32(4) != MODEL_VERSION {
        return Err(NeuralError::FormatVersionMismatch);
    }
    if bytes.len() < 8 + 7 * 4 + 4 {
        return Err(NeuralError::ShapeMismatch("truncated config block".into()));
    }
    let cfg = TransformerConfig {
        d_model: read_u32(8) as usize,
        heads: read_u32(12) as usize,
        layers: read_u32(16) as usize,
        vocab: read_u32(20) as usize,
        max_len: read_u32(24) as usize,
        d_task: read_u32(28) as usize,
        d_ff: read_u32(32) as usize,
        dropout: f32::from_le_bytes(bytes[36..40].try_into().unwrap()) as f64,
    };
    cfg.validate().map_err(|_| NeuralError::FormatVersionMismatch)?;
    let expected = TransformerParams::<f32>::zeros(&cfg).num_params();
    let body = &bytes[40..];
    if body.len() != expected * 4 {
        return Err(NeuralError::ShapeMismatch(format!(
            "expected {} weight bytes, found {}",
            expected * 4,
            body.len()
        )));
    }
    let flat: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TransformerParams::from_flat(&cfg, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{task_embedding, EliteRecord, RuleKind};
    use crate::expr::ExprTree;
    use crate::sim::{Objective, TaskSpec};

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            d_model: 16,
            heads: 2,
            layers: 2,
            dropout: 0.0,
            max_len: 16,
            d_ff: 32,
            ..TransformerConfig::default()
        }
    }

    fn seq(ids: &[u16]) -> Vec<Token> {
        ids.iter().map(|&i| Token::from_id(i).unwrap()).collect()
    }

    fn embedding() -> [f64; D_TASK] {
        task_embedding(&TaskSpec::new(Objective::Fmean, 0.85, 8))
    }

    #[test]
    fn forward_shape_matches_sequence() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params: TransformerParams<f32> = TransformerParams::init(&cfg, &mut rng, 0.02);
        // START - TIS PT (5 tokens).
        let tokens = seq(&[0, 3, 17, 11, 1]);
        let logits = forward(&params, &tokens, &embedding()).unwrap();
        assert_eq!(logits.dim(), (5, 18));
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let cfg = tiny_cfg();
        let params: TransformerParams<f32> = TransformerParams::zeros(&cfg);
        let tokens = seq(&[0, 11, 1]);
        let logits = forward(&params, &tokens, &embedding()).unwrap();
        for i in 0..logits.nrows() {
            let probs = softmax_row(&logits.row(i).to_owned());
            for p in probs {
                assert!((p - 1.0 / 18.0).abs() < 1e-6);
            }
        }
        // Uniform rows mean loss = ln 18.
        let targets = &tokens[1..];
        assert!((loss(&logits, targets) - 18.0f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn sequence_too_long_is_rejected() {
        let cfg = tiny_cfg();
        let params: TransformerParams<f32> = TransformerParams::zeros(&cfg);
        let tokens: Vec<Token> = std::iter::repeat(Token::Pt).take(17).collect();
        assert!(matches!(
            forward(&params, &tokens, &embedding()),
            Err(NeuralError::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn causality_later_tokens_do_not_affect_earlier_logits() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: TransformerParams<f32> = TransformerParams::init(&cfg, &mut rng, 0.05);
        let a = seq(&[0, 2, 11, 14, 1]);
        let mut b = a.clone();
        b[3] = Token::Wiq; // differs at position 3
        let la = forward(&params, &a, &embedding()).unwrap();
        let lb = forward(&params, &b, &embedding()).unwrap();
        for i in 0..3 {
            for j in 0..18 {
                assert_eq!(la[[i, j]], lb[[i, j]], "row {i} col {j}");
            }
        }
        assert_ne!(la.row(3), lb.row(3));
    }

    #[test]
    fn next_token_logits_equals_last_forward_row() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: TransformerParams<f32> = TransformerParams::init(&cfg, &mut rng, 0.05);
        let prefix = seq(&[0, 4, 11]);
        let row = next_token_logits(&params, &prefix, &embedding()).unwrap();
        let full = forward(&params, &prefix, &embedding()).unwrap();
        assert_eq!(row, full.row(2).to_owned());
        // Deterministic in inference mode.
        let again = next_token_logits(&params, &prefix, &embedding()).unwrap();
        assert_eq!(row, again);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: TransformerParams<f64> = TransformerParams::init(&cfg, &mut rng, 0.1);
        let tokens = seq(&[0, 2, 11, 14, 1]);
        let attn = attention_weights(&params, &tokens, &embedding()).unwrap();
        assert_eq!(attn.len(), 2);
        for layer in attn {
            assert_eq!(layer.len(), 2);
            for a in layer {
                for i in 0..a.nrows() {
                    let sum: f64 = a.row(i).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    // Causal: strictly-upper entries are exactly zero.
                    for j in i + 1..a.ncols() {
                        assert_eq!(a[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_check_tiny_config() {
        let cfg = tiny_cfg();
        let batch = vec![
            (seq(&[0, 3, 17, 11, 1]), embedding()),
            (
                seq(&[0, 4, 7, 11, 14, 8, 1]),
                task_embedding(&TaskSpec::new(Objective::Tmean, 0.95, 10)),
            ),
        ];
        let report = gradient_check::<f64>(&cfg, &batch, 42);
        for (name, rel) in &report {
            assert!(rel < &1e-3, "group {name} relative error {rel}");
        }
    }

    #[test]
    fn params_flat_round_trip_and_layout() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params: TransformerParams<f32> = TransformerParams::init(&cfg, &mut rng, 0.02);
        let flat = params.to_flat();
        let back = TransformerParams::from_flat(&cfg, &flat).unwrap();
        assert_eq!(params, back);
        let layout = params.layout();
        let total: usize = layout.iter().map(|g| g.len).sum();
        assert_eq!(total, flat.len());
        assert_eq!(layout.last().unwrap().name, "b_out");
    }

    #[test]
    fn save_load_round_trip_bit_identical() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params: TransformerParams<f32> = TransformerParams::init(&cfg, &mut rng, 0.02);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tgpm");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(params, loaded);
        let tokens = seq(&[0, 5, 9, 8, 1]);
        let a = forward(&params, &tokens, &embedding()).unwrap();
        let b = forward(&loaded, &tokens, &embedding()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tgpm");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_params(&path),
            Err(NeuralError::FormatVersionMismatch)
        ));
        // Valid header but truncated weights.
        let cfg = tiny_cfg();
        let params: TransformerParams<f32> = TransformerParams::zeros(&cfg);
        let full = dir.path().join("full.tgpm");
        save_params(&params, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let trunc = dir.path().join("trunc.tgpm");
        std::fs::write(&trunc, &bytes[..bytes.len() - 12]).unwrap();
        assert!(matches!(
            load_params(&trunc),
            Err(NeuralError::ShapeMismatch(_))
        ));
    }

    fn toy_dataset(n: usize) -> EliteDataset {
        let task_a = TaskSpec::new(Objective::Fmean, 0.85, 8);
        let task_b = TaskSpec::new(Objective::Tmean, 0.95, 10);
        let bodies: [&[u16]; 4] = [
            &[3, 17, 11],        // - TIS PT
            &[4, 7, 11, 14, 8],  // * min PT WKR NIQ
            &[11],               // PT
            &[2, 9, 10],         // + WIQ MWT
        ];
        let records = (0..n)
            .map(|i| {
                let task = if i % 2 == 0 { &task_a } else { &task_b };
                let mut tokens = vec![Token::Start];
                tokens.extend(seq(bodies[i % bodies.len()].as_ref()));
                tokens.push(Token::End);
                EliteRecord {
                    rule_kind: RuleKind::Sequencing,
                    tokens,
                    task_id: task.id(),
                    embedding: task_embedding(task),
                    fitness: i as f64,
                    generation: 0,
                    run: 0,
                }
            })
            .collect();
        EliteDataset::new(records)
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = TransformerConfig {
            d_model: 32,
            heads: 2,
            layers: 2,
            dropout: 0.1,
            max_len: 16,
            d_ff: 64,
            ..TransformerConfig::default()
        };
        let ds = toy_dataset(64);
        let tcfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, hist_a) = train::<f32>(&ds, &cfg, &tcfg).unwrap();
        let (_, hist_b) = train::<f32>(&ds, &cfg, &tcfg).unwrap();
        assert_eq!(hist_a, hist_b);
        // Near-zero init puts the first epoch close to ln 18.
        assert!((hist_a[0] - 18.0f64.ln()).abs() < 0.35, "start {}", hist_a[0]);
        assert!(
            hist_a.last().unwrap() < &(hist_a[0] * 0.6),
            "no convergence: {hist_a:?}"
        );
    }

    #[test]
    fn training_rejects_empty_dataset() {
        let cfg = tiny_cfg();
        let ds = EliteDataset::new(Vec::new());
        assert!(matches!(
            train::<f32>(&ds, &cfg, &TrainConfig::default()),
            Err(NeuralError::EmptyDataset)
        ));
    }

    #[test]
    fn task_conditioning_separates_disjoint_corpora() {
        // Task A elites are all "PT", task B elites are all "WIQ": after
        // training, the first-slot distribution must depend on the task
        // embedding.
        let task_a = TaskSpec::new(Objective::Fmean, 0.85, 8);
        let task_b = TaskSpec::new(Objective::Tmean, 0.95, 10);
        let mk = |task: &TaskSpec, t: Token, i: usize| EliteRecord {
            rule_kind: RuleKind::Sequencing,
            tokens: ExprTree::leaf(t).to_prefix_tokens(),
            task_id: task.id(),
            embedding: task_embedding(task),
            fitness: i as f64,
            generation: 0,
            run: 0,
        };
        let mut records = Vec::new();
        for i in 0..32 {
            records.push(mk(&task_a, Token::Pt, i));
            records.push(mk(&task_b, Token::Wiq, i));
        }
        let ds = EliteDataset::new(records);
        let cfg = TransformerConfig {
            d_model: 32,
            heads: 2,
            layers: 2,
            dropout: 0.0,
            max_len: 8,
            d_ff: 64,
            ..TransformerConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let (params, _) = train::<f32>(&ds, &cfg, &tcfg).unwrap();
        let pa = softmax_row(
            &next_token_logits(&params, &[Token::Start], &task_embedding(&task_a)).unwrap(),
        );
        let pb = softmax_row(
            &next_token_logits(&params, &[Token::Start], &task_embedding(&task_b)).unwrap(),
        );
        let tv: f64 = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv > 0.05, "total variation {tv}");
        // And each task leans toward its own terminal.
        assert!(pa[Token::Pt.id() as usize] > pb[Token::Pt.id() as usize]);
        assert!(pb[Token::Wiq.id() as usize] > pa[Token::Wiq.id() as usize]);
    }
}
