//! Transformer encoder with attention restricted to overlapping sliding
//! windows.
//!
//! Token embeddings plus a fixed global sinusoidal position table feed
//! pre-norm blocks (x + Attn(LN(x)), then x + FF(LN(x)), GELU activation)
//! that run independently over each window slice. Score matrices are at most
//! window x window regardless of sequence length; overlap between adjacent
//! windows is what carries information across window boundaries. The
//! document vector is the mean of per-window token means.
//!
//! The backward pass is hand-derived and checked against central finite
//! differences in the test suites.

use thiserror::Error;

use crate::math::{gelu, gelu_prime, softmax_rows, Mat};
use crate::rng::Rng;
use crate::tensor_io::{write_tensor, NamedTensor, TensorReader, WireError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Window size W in tokens.
    pub window: usize,
    /// Stride Sr in tokens; strictly less than the window so neighbours overlap.
    pub stride: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_dim: 128,
            max_len: 2048,
            window: 128,
            stride: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.stride >= self.window || self.stride == 0 || self.window == 0 {
            return Err(EncoderError::InvalidConfig(
                "need 0 < stride < window".into(),
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::InvalidConfig(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.vocab_size == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(EncoderError::InvalidConfig(
                "vocab_size, ff_dim and max_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("checkpoint error: {0}")]
    Format(String),
}

impl From<WireError> for EncoderError {
    fn from(e: WireError) -> Self {
        EncoderError::Format(e.to_string())
    }
}

/// Window start offsets covering [0, seq_len).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    pub starts: Vec<usize>,
    pub window: usize,
    pub seq_len: usize,
}

impl WindowLayout {
    /// Span of window `w` as [start, end).
    pub fn span(&self, w: usize) -> (usize, usize) {
        let start = self.starts[w];
        (start, (start + self.window).min(self.seq_len))
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Starts form the arithmetic progression 0, Sr, 2*Sr, ... up to the first
/// start whose window reaches seq_len; a short input yields one window.
pub fn window_layout(seq_len: usize, window: usize, stride: usize) -> Result<WindowLayout, EncoderError> {
    if stride >= window || stride == 0 || window == 0 {
        return Err(EncoderError::InvalidConfig("need 0 < stride < window".into()));
    }
    if seq_len < 1 {
        return Err(EncoderError::InvalidConfig("seq_len must be >= 1".into()));
    }
    let starts = if seq_len <= window {
        vec![0]
    } else {
        let last = (seq_len - window).div_ceil(stride);
        (0..=last).map(|k| k * stride).collect()
    };
    Ok(WindowLayout {
        starts,
        window,
        seq_len,
    })
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Mat,
    /// Fixed sinusoidal table, max_len x d_model; derived from the config,
    /// never trained, never serialized.
    pub pos_table: Mat,
    pub layers: Vec<LayerParams>,
}

/// Standard sinusoidal position table.
pub fn sinusoidal_table(max_len: usize, d_model: usize) -> Mat {
    Mat::from_fn(max_len, d_model, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.range_f64(-bound, bound);
    }
    m
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d = cfg.d_model;
        // Token rows at +-0.5 keep token identity visible next to the
        // unit-amplitude position table.
        let mut token_embedding = Mat::zeros(cfg.vocab_size, d);
        for v in token_embedding.as_mut_slice() {
            *v = rng.range_f64(-0.5, 0.5);
        }
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: xavier(d, d, &mut rng),
                bq: vec![0.0; d],
                wk: xavier(d, d, &mut rng),
                bk: vec![0.0; d],
                wv: xavier(d, d, &mut rng),
                bv: vec![0.0; d],
                wo: xavier(d, d, &mut rng),
                bo: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w1: xavier(d, cfg.ff_dim, &mut rng),
                b1: vec![0.0; cfg.ff_dim],
                w2: xavier(cfg.ff_dim, d, &mut rng),
                b2: vec![0.0; d],
            })
            .collect();
        Ok(EncoderParams {
            token_embedding,
            pos_table: sinusoidal_table(cfg.max_len, d),
            layers,
        })
    }

    /// Trainable tensors in the fixed checkpoint order.
    pub fn tensor_views(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        out.push((
            "token_embedding".into(),
            vec![self.token_embedding.rows(), self.token_embedding.cols()],
            self.token_embedding.as_slice(),
        ));
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layer{i}.{name}");
            out.push((p("ln1.gain"), vec![l.ln1_gain.len()], &l.ln1_gain));
            out.push((p("ln1.bias"), vec![l.ln1_bias.len()], &l.ln1_bias));
            out.push((p("attn.wq"), vec![l.wq.rows(), l.wq.cols()], l.wq.as_slice()));
            out.push((p("attn.bq"), vec![l.bq.len()], &l.bq));
            out.push((p("attn.wk"), vec![l.wk.rows(), l.wk.cols()], l.wk.as_slice()));
            out.push((p("attn.bk"), vec![l.bk.len()], &l.bk));
            out.push((p("attn.wv"), vec![l.wv.rows(), l.wv.cols()], l.wv.as_slice()));
            out.push((p("attn.bv"), vec![l.bv.len()], &l.bv));
            out.push((p("attn.wo"), vec![l.wo.rows(), l.wo.cols()], l.wo.as_slice()));
            out.push((p("attn.bo"), vec![l.bo.len()], &l.bo));
            out.push((p("ln2.gain"), vec![l.ln2_gain.len()], &l.ln2_gain));
            out.push((p("ln2.bias"), vec![l.ln2_bias.len()], &l.ln2_bias));
            out.push((p("ff.w1"), vec![l.w1.rows(), l.w1.cols()], l.w1.as_slice()));
            out.push((p("ff.b1"), vec![l.b1.len()], &l.b1));
            out.push((p("ff.w2"), vec![l.w2.rows(), l.w2.cols()], l.w2.as_slice()));
            out.push((p("ff.b2"), vec![l.b2.len()], &l.b2));
        }
        out
    }

    /// Mutable slices over the trainable tensors, in the same fixed order.
    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.token_embedding.as_mut_slice());
        for l in self.layers.iter_mut() {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(l.wq.as_mut_slice());
            out.push(&mut l.bq);
            out.push(l.wk.as_mut_slice());
            out.push(&mut l.bk);
            out.push(l.wv.as_mut_slice());
            out.push(&mut l.bv);
            out.push(l.wo.as_mut_slice());
            out.push(&mut l.bo);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(l.w1.as_mut_slice());
            out.push(&mut l.b1);
            out.push(l.w2.as_mut_slice());
            out.push(&mut l.b2);
        }
        out
    }

    pub fn tensor_shapes(&self) -> Vec<usize> {
        self.tensor_views().iter().map(|(_, _, s)| s.len()).collect()
    }
}

/// Gradient accumulator mirroring [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub token_embedding: Mat,
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        EncoderGrads {
            token_embedding: Mat::zeros(cfg.vocab_size, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerGrads {
                    ln1_gain: vec![0.0; d],
                    ln1_bias: vec![0.0; d],
                    wq: Mat::zeros(d, d),
                    bq: vec![0.0; d],
                    wk: Mat::zeros(d, d),
                    bk: vec![0.0; d],
                    wv: Mat::zeros(d, d),
                    bv: vec![0.0; d],
                    wo: Mat::zeros(d, d),
                    bo: vec![0.0; d],
                    ln2_gain: vec![0.0; d],
                    ln2_bias: vec![0.0; d],
                    w1: Mat::zeros(d, cfg.ff_dim),
                    b1: vec![0.0; cfg.ff_dim],
                    w2: Mat::zeros(cfg.ff_dim, d),
                    b2: vec![0.0; d],
                })
                .collect(),
        }
    }

    /// Slices in the same fixed order as the parameter tensors.
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.push(self.token_embedding.as_slice());
        for l in &self.layers {
            out.push(&l.ln1_gain);
            out.push(&l.ln1_bias);
            out.push(l.wq.as_slice());
            out.push(&l.bq);
            out.push(l.wk.as_slice());
            out.push(&l.bk);
            out.push(l.wv.as_slice());
            out.push(&l.bv);
            out.push(l.wo.as_slice());
            out.push(&l.bo);
            out.push(&l.ln2_gain);
            out.push(&l.ln2_bias);
            out.push(l.w1.as_slice());
            out.push(&l.b1);
            out.push(l.w2.as_slice());
            out.push(&l.b2);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.tensor_slices_mut_internal() {
            for v in s {
                *v *= factor;
            }
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        let theirs = other.tensor_slices();
        for (mine, that) in self.tensor_slices_mut_internal().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(that) {
                *a += b;
            }
        }
    }

    fn tensor_slices_mut_internal(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.token_embedding.as_mut_slice());
        for l in self.layers.iter_mut() {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(l.wq.as_mut_slice());
            out.push(&mut l.bq);
            out.push(l.wk.as_mut_slice());
            out.push(&mut l.bk);
            out.push(l.wv.as_mut_slice());
            out.push(&mut l.bv);
            out.push(l.wo.as_mut_slice());
            out.push(&mut l.bo);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(l.w1.as_mut_slice());
            out.push(&mut l.b1);
            out.push(l.w2.as_mut_slice());
            out.push(&mut l.b2);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over full matrices: softmax(Q Kt / sqrt(dk)) V.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    assert_eq!(q.cols(), k.cols());
    assert_eq!(k.rows(), v.rows());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_nt(k);
    for s in scores.as_mut_slice() {
        *s *= scale;
    }
    softmax_rows(&mut scores);
    scores.matmul(v)
}

struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, LayerNormCache) {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    for (r, inv_slot) in inv_std.iter_mut().enumerate() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        *inv_slot = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat.set(r, j, xh);
            out.set(r, j, gain[j] * xh + bias[j]);
        }
    }
    (
        out,
        LayerNormCache {
            xhat,
            inv_std,
        },
    )
}

fn layer_norm_backward(
    dy: &Mat,
    cache: &LayerNormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Mat {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Mat::zeros(n, d);
    for r in 0..n {
        let dy_row = dy.row(r);
        let xhat_row = cache.xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dy_row[j] * xhat_row[j];
            dbias[j] += dy_row[j];
            let dxh = dy_row[j] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat_row[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = cache.inv_std[r];
        for j in 0..d {
            let dxh = dy_row[j] * gain[j];
            dx.set(r, j, inv * (dxh - mean_dxhat - xhat_row[j] * mean_dxhat_xhat));
        }
    }
    dx
}

struct LayerCache {
    ln1: LayerNormCache,
    xn1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Row-softmax attention matrix per head.
    probs: Vec<Mat>,
    ctx: Mat,
    attn_mask: Option<Mat>,
    ln2: LayerNormCache,
    xn2: Mat,
    h1: Mat,
    g: Mat,
    ff_mask: Option<Mat>,
}

struct WindowCache {
    layers: Vec<LayerCache>,
}

/// Per-sequence forward state kept for the backward pass.
pub struct EncoderActivations {
    layout: WindowLayout,
    windows: Vec<WindowCache>,
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Mat {
    let keep_scale = 1.0 / (1.0 - p);
    Mat::from_fn(rows, cols, |_, _| {
        if rng.next_f64() < p {
            0.0
        } else {
            keep_scale
        }
    })
}

fn apply_mask(m: &mut Mat, mask: &Mat) {
    for (v, &s) in m.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *v *= s;
    }
}

fn block_forward(
    x: Mat,
    layer: &LayerParams,
    cfg: &EncoderConfig,
    mut dropout_rng: Option<&mut Rng>,
) -> (Mat, LayerCache) {
    let n = x.rows();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dk = d / heads;
    debug_assert!(n <= cfg.window, "attention span exceeds window");

    let (xn1, ln1) = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias);
    let mut q = xn1.matmul(&layer.wq);
    q.add_row_vec(&layer.bq);
    let mut k = xn1.matmul(&layer.wk);
    k.add_row_vec(&layer.bk);
    let mut v = xn1.matmul(&layer.wv);
    v.add_row_vec(&layer.bv);

    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = Vec::with_capacity(heads);
    let mut ctx = Mat::zeros(n, d);
    for h in 0..heads {
        let (c0, c1) = (h * dk, (h + 1) * dk);
        let qh = q.col_block(c0, c1);
        let kh = k.col_block(c0, c1);
        let vh = v.col_block(c0, c1);
        let mut s = qh.matmul_nt(&kh);
        for val in s.as_mut_slice() {
            *val *= scale;
        }
        softmax_rows(&mut s);
        let ctx_h = s.matmul(&vh);
        for r in 0..n {
            ctx.row_mut(r)[c0..c1].copy_from_slice(ctx_h.row(r));
        }
        probs.push(s);
    }

    let mut a = ctx.matmul(&layer.wo);
    a.add_row_vec(&layer.bo);
    let attn_mask = match dropout_rng.as_deref_mut() {
        Some(rng) if cfg.dropout > 0.0 => {
            let mask = dropout_mask(n, d, cfg.dropout, rng);
            apply_mask(&mut a, &mask);
            Some(mask)
        }
        _ => None,
    };

    let mut res1 = x;
    res1.add_scaled(&a, 1.0);

    let (xn2, ln2) = layer_norm(&res1, &layer.ln2_gain, &layer.ln2_bias);
    let mut h1 = xn2.matmul(&layer.w1);
    h1.add_row_vec(&layer.b1);
    let g = Mat::from_fn(n, cfg.ff_dim, |r, c| gelu(h1.get(r, c)));
    let mut f = g.matmul(&layer.w2);
    f.add_row_vec(&layer.b2);
    let ff_mask = match dropout_rng {
        Some(rng) if cfg.dropout > 0.0 => {
            let mask = dropout_mask(n, d, cfg.dropout, rng);
            apply_mask(&mut f, &mask);
            Some(mask)
        }
        _ => None,
    };

    let mut out = res1;
    out.add_scaled(&f, 1.0);

    (
        out,
        LayerCache {
            ln1,
            xn1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln2,
            xn2,
            h1,
            g,
            ff_mask,
        },
    )
}

fn embed_window(
    params: &EncoderParams,
    token_ids: &[usize],
    start: usize,
    end: usize,
    d: usize,
) -> Mat {
    let mut x = Mat::zeros(end - start, d);
    for (r, abs) in (start..end).enumerate() {
        let row = x.row_mut(r);
        row.copy_from_slice(params.token_embedding.row(token_ids[abs]));
        for (v, &p) in row.iter_mut().zip(params.pos_table.row(abs)) {
            *v += p;
        }
    }
    x
}

fn check_input(cfg: &EncoderConfig, token_ids: &[usize]) -> Result<(), EncoderError> {
    if token_ids.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    if token_ids.len() > cfg.max_len {
        return Err(EncoderError::SequenceTooLong {
            len: token_ids.len(),
            max: cfg.max_len,
        });
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(EncoderError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Inference forward pass: one hidden-state matrix per window, dropout off.
pub fn encode(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    token_ids: &[usize],
) -> Result<Vec<Mat>, EncoderError> {
    check_input(cfg, token_ids)?;
    let layout = window_layout(token_ids.len(), cfg.window, cfg.stride)?;
    let mut hiddens = Vec::with_capacity(layout.len());
    for w in 0..layout.len() {
        let (start, end) = layout.span(w);
        let mut x = embed_window(params, token_ids, start, end, cfg.d_model);
        for layer in &params.layers {
            let (out, _) = block_forward(x, layer, cfg, None);
            x = out;
        }
        hiddens.push(x);
    }
    Ok(hiddens)
}

/// Training forward pass: hidden states plus the caches backward needs.
/// Dropout is applied only when a generator is supplied and cfg.dropout > 0.
pub fn encode_train(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(Vec<Mat>, EncoderActivations), EncoderError> {
    check_input(cfg, token_ids)?;
    let layout = window_layout(token_ids.len(), cfg.window, cfg.stride)?;
    let mut hiddens = Vec::with_capacity(layout.len());
    let mut windows = Vec::with_capacity(layout.len());
    for w in 0..layout.len() {
        let (start, end) = layout.span(w);
        let mut x = embed_window(params, token_ids, start, end, cfg.d_model);
        let mut layer_caches = Vec::with_capacity(cfg.n_layers);
        for layer in &params.layers {
            let (out, cache) = block_forward(x, layer, cfg, dropout_rng.as_deref_mut());
            layer_caches.push(cache);
            x = out;
        }
        hiddens.push(x);
        windows.push(WindowCache {
            layers: layer_caches,
        });
    }
    Ok((
        hiddens,
        EncoderActivations {
            layout,
            windows,
        },
    ))
}

/// Mean of token rows within each window, then mean across windows.
pub fn pool_global(window_hiddens: &[Mat]) -> Vec<f64> {
    assert!(!window_hiddens.is_empty());
    let d = window_hiddens[0].cols();
    let mut acc = vec![0.0; d];
    for h in window_hiddens {
        for (a, v) in acc.iter_mut().zip(h.mean_rows()) {
            *a += v;
        }
    }
    let inv = 1.0 / window_hiddens.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Gradient of [`pool_global`] with respect to each window's hidden matrix.
pub fn pool_global_backward(d_pooled: &[f64], window_hiddens: &[Mat]) -> Vec<Mat> {
    let n_windows = window_hiddens.len() as f64;
    window_hiddens
        .iter()
        .map(|h| {
            let scale = 1.0 / (n_windows * h.rows() as f64);
            Mat::from_fn(h.rows(), h.cols(), |_, c| d_pooled[c] * scale)
        })
        .collect()
}

fn block_backward(
    d_out: &Mat,
    layer: &LayerParams,
    grads: &mut LayerGrads,
    cache: &LayerCache,
    cfg: &EncoderConfig,
) -> Mat {
    let n = d_out.rows();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dk = d / heads;

    // out = res1 + dropout(FF(LN2(res1)))
    let mut d_f = d_out.clone();
    if let Some(mask) = &cache.ff_mask {
        apply_mask(&mut d_f, mask);
    }
    grads.w2.add_scaled(&cache.g.matmul_tn(&d_f), 1.0);
    for r in 0..n {
        for (b, v) in grads.b2.iter_mut().zip(d_f.row(r)) {
            *b += v;
        }
    }
    let d_g = d_f.matmul_nt(&layer.w2);
    let d_h1 = Mat::from_fn(n, cfg.ff_dim, |r, c| d_g.get(r, c) * gelu_prime(cache.h1.get(r, c)));
    grads.w1.add_scaled(&cache.xn2.matmul_tn(&d_h1), 1.0);
    for r in 0..n {
        for (b, v) in grads.b1.iter_mut().zip(d_h1.row(r)) {
            *b += v;
        }
    }
    let d_xn2 = d_h1.matmul_nt(&layer.w1);
    let mut d_res1 = layer_norm_backward(
        &d_xn2,
        &cache.ln2,
        &layer.ln2_gain,
        &mut grads.ln2_gain,
        &mut grads.ln2_bias,
    );
    d_res1.add_scaled(d_out, 1.0);

    // res1 = x_in + dropout(Wo ctx + bo)
    let mut d_a = d_res1.clone();
    if let Some(mask) = &cache.attn_mask {
        apply_mask(&mut d_a, mask);
    }
    grads.wo.add_scaled(&cache.ctx.matmul_tn(&d_a), 1.0);
    for r in 0..n {
        for (b, v) in grads.bo.iter_mut().zip(d_a.row(r)) {
            *b += v;
        }
    }
    let d_ctx = d_a.matmul_nt(&layer.wo);

    let scale = 1.0 / (dk as f64).sqrt();
    let mut d_q = Mat::zeros(n, d);
    let mut d_k = Mat::zeros(n, d);
    let mut d_v = Mat::zeros(n, d);
    for h in 0..heads {
        let (c0, c1) = (h * dk, (h + 1) * dk);
        let d_ctx_h = d_ctx.col_block(c0, c1);
        let p = &cache.probs[h];
        let kh = cache.k.col_block(c0, c1);
        let qh = cache.q.col_block(c0, c1);
        let vh = cache.v.col_block(c0, c1);

        let d_vh = p.matmul_tn(&d_ctx_h);
        let d_p = d_ctx_h.matmul_nt(&vh);
        // Softmax backward, row-wise: ds = p .* (dp - sum(dp .* p)).
        let mut d_s = Mat::zeros(n, p.cols());
        for r in 0..n {
            let p_row = p.row(r);
            let dp_row = d_p.row(r);
            let inner: f64 = p_row.iter().zip(dp_row).map(|(a, b)| a * b).sum();
            for c in 0..p.cols() {
                d_s.set(r, c, p_row[c] * (dp_row[c] - inner));
            }
        }
        for val in d_s.as_mut_slice() {
            *val *= scale;
        }
        let d_qh = d_s.matmul(&kh);
        let d_kh = d_s.matmul_tn(&qh);
        for r in 0..n {
            d_q.row_mut(r)[c0..c1].copy_from_slice(d_qh.row(r));
            d_k.row_mut(r)[c0..c1].copy_from_slice(d_kh.row(r));
            d_v.row_mut(r)[c0..c1].copy_from_slice(d_vh.row(r));
        }
    }

    grads.wq.add_scaled(&cache.xn1.matmul_tn(&d_q), 1.0);
    grads.wk.add_scaled(&cache.xn1.matmul_tn(&d_k), 1.0);
    grads.wv.add_scaled(&cache.xn1.matmul_tn(&d_v), 1.0);
    for r in 0..n {
        for (b, v) in grads.bq.iter_mut().zip(d_q.row(r)) {
            *b += v;
        }
        for (b, v) in grads.bk.iter_mut().zip(d_k.row(r)) {
            *b += v;
        }
        for (b, v) in grads.bv.iter_mut().zip(d_v.row(r)) {
            *b += v;
        }
    }
    let mut d_xn1 = d_q.matmul_nt(&layer.wq);
    d_xn1.add_scaled(&d_k.matmul_nt(&layer.wk), 1.0);
    d_xn1.add_scaled(&d_v.matmul_nt(&layer.wv), 1.0);
    let mut d_x = layer_norm_backward(
        &d_xn1,
        &cache.ln1,
        &layer.ln1_gain,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    );
    d_x.add_scaled(&d_res1, 1.0);
    d_x
}

/// Backpropagate per-window output gradients through every block down to the
/// token embedding, accumulating into `grads`.
pub fn encoder_backward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    token_ids: &[usize],
    acts: &EncoderActivations,
    d_hiddens: &[Mat],
    grads: &mut EncoderGrads,
) {
    assert_eq!(d_hiddens.len(), acts.windows.len());
    for (w, window) in acts.windows.iter().enumerate() {
        let (start, end) = acts.layout.span(w);
        let mut d_x = d_hiddens[w].clone();
        for li in (0..params.layers.len()).rev() {
            d_x = block_backward(
                &d_x,
                &params.layers[li],
                &mut grads.layers[li],
                &window.layers[li],
                cfg,
            );
        }
        // Embedding rows: positions are fixed, token rows accumulate.
        for (r, abs) in (start..end).enumerate() {
            let id = token_ids[abs];
            for (g, v) in grads.token_embedding.row_mut(id).iter_mut().zip(d_x.row(r)) {
                *g += v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint (SWAE)
// ---------------------------------------------------------------------------

const SWAE_MAGIC: &[u8; 4] = b"SWAE";
const SWAE_VERSION: u32 = 1;

fn config_block(cfg: &EncoderConfig) -> String {
    format!(
        "vocab_size = {}\nd_model = {}\nn_heads = {}\nn_layers = {}\nff_dim = {}\nmax_len = {}\nwindow = {}\nstride = {}\ndropout = {}\n",
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.ff_dim,
        cfg.max_len,
        cfg.window,
        cfg.stride,
        cfg.dropout
    )
}

fn parse_config_block(text: &str) -> Result<EncoderConfig, EncoderError> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<String, EncoderError> {
        map.get(k)
            .cloned()
            .ok_or_else(|| EncoderError::Format(format!("missing config key {k}")))
    };
    let geti = |k: &str| -> Result<usize, EncoderError> {
        get(k)?
            .parse()
            .map_err(|_| EncoderError::Format(format!("bad config value for {k}")))
    };
    Ok(EncoderConfig {
        vocab_size: geti("vocab_size")?,
        d_model: geti("d_model")?,
        n_heads: geti("n_heads")?,
        n_layers: geti("n_layers")?,
        ff_dim: geti("ff_dim")?,
        max_len: geti("max_len")?,
        window: geti("window")?,
        stride: geti("stride")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| EncoderError::Format("bad dropout".into()))?,
    })
}

/// Serialize config and trainable tensors. The position table is derived
/// from the config and not stored.
pub fn save_encoder(params: &EncoderParams, cfg: &EncoderConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SWAE_MAGIC);
    out.extend_from_slice(&SWAE_VERSION.to_le_bytes());
    let cfg_text = config_block(cfg);
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    for (name, dims, data) in params.tensor_views() {
        write_tensor(&mut out, &NamedTensor::new(name, dims, data.to_vec()));
    }
    out
}

pub fn load_encoder(bytes: &[u8]) -> Result<(EncoderParams, EncoderConfig), EncoderError> {
    if bytes.len() < 12 || &bytes[0..4] != SWAE_MAGIC {
        return Err(EncoderError::Format("bad SWAE magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SWAE_VERSION {
        return Err(EncoderError::Format(format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + cfg_len {
        return Err(EncoderError::Format("truncated config block".into()));
    }
    let cfg_text = std::str::from_utf8(&bytes[12..12 + cfg_len])
        .map_err(|_| EncoderError::Format("config block not UTF-8".into()))?;
    let cfg = parse_config_block(cfg_text)?;
    cfg.validate()?;

    let tensors = TensorReader::new(&bytes[12 + cfg_len..]).read_all()?;
    let mut params = EncoderParams::init(&cfg, 0)?;
    let expected = params.tensor_views();
    if tensors.len() != expected.len() {
        return Err(EncoderError::Format(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for (t, (name, dims, data)) in tensors.iter().zip(&expected) {
        if &t.name != name || &t.dims != dims {
            return Err(EncoderError::Format(format!(
                "tensor mismatch: found {}{:?}, expected {}{:?}",
                t.name, t.dims, name, dims
            )));
        }
        debug_assert_eq!(t.data.len(), data.len());
    }
    for (slice, t) in params.tensor_slices_mut().into_iter().zip(&tensors) {
        slice.copy_from_slice(&t.data);
    }
    Ok((params, cfg))
}
