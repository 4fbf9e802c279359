//! Feature fusion, the binary classification head, and the end-to-end
//! training loop.
//!
//! A document is represented twice: `e_enc` from the windowed-attention
//! encoder and `e_ft` from the subword embedder. They fuse as
//! `lambda * e_enc + (1 - lambda) * P(e_ft)` where the linear projection `P`
//! exists only when the two dimensions differ. A two-layer head (GELU hidden,
//! sigmoid output) produces the webshell probability, trained with binary
//! cross-entropy and AdamW. The embedder is frozen; gradients flow through
//! the head, the projection, and (scaled by lambda) the encoder.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::embed::{self, EmbedError, EmbeddingModel};
use crate::encoder::{
    encode, encode_train, encoder_backward, load_encoder, pool_global, pool_global_backward,
    save_encoder, EncoderConfig, EncoderError, EncoderGrads, EncoderParams,
};
use crate::math::{axpy, dot, gelu, gelu_prime, sigmoid, Mat};
use crate::optim::{AdamWHyper, AdamWState};
use crate::rng::Rng;
use crate::tensor_io::{write_tensor, NamedTensor, TensorReader, WireError};
use crate::tokens::{Label, TokenSequence};

const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClassifierError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("unlabeled sample {0}")]
    MissingLabel(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid lambda {0}; must be in [0, 1]")]
    InvalidLambda(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<WireError> for ClassifierError {
    fn from(e: WireError) -> Self {
        ClassifierError::Checkpoint(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub lambda: f64,
    pub d_fused: usize,
    /// embed_dim x d_fused, present iff the embedder dimension differs from
    /// the encoder dimension. Learned alongside the head.
    pub projection: Option<Mat>,
}

impl FusionConfig {
    pub fn new(lambda: f64, d_fused: usize, embed_dim: usize, rng: &mut Rng) -> Result<Self, ClassifierError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ClassifierError::InvalidLambda(lambda));
        }
        let projection = if embed_dim == d_fused {
            None
        } else {
            let bound = (6.0 / (embed_dim + d_fused) as f64).sqrt();
            Some(Mat::from_fn(embed_dim, d_fused, |_, _| {
                rng.range_f64(-bound, bound)
            }))
        };
        Ok(FusionConfig {
            lambda,
            d_fused,
            projection,
        })
    }
}

fn project(p: &Mat, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.cols()];
    for (i, &vi) in v.iter().enumerate() {
        axpy(&mut out, vi, p.row(i));
    }
    out
}

/// lambda * e_enc + (1 - lambda) * P(e_ft), elementwise.
pub fn fuse(e_enc: &[f64], e_ft: &[f64], cfg: &FusionConfig) -> Result<Vec<f64>, ClassifierError> {
    if e_enc.len() != cfg.d_fused {
        return Err(ClassifierError::DimMismatch(format!(
            "encoder vector has dim {}, fusion expects {}",
            e_enc.len(),
            cfg.d_fused
        )));
    }
    let ft = match &cfg.projection {
        Some(p) => {
            if e_ft.len() != p.rows() {
                return Err(ClassifierError::DimMismatch(format!(
                    "embedder vector has dim {}, projection expects {}",
                    e_ft.len(),
                    p.rows()
                )));
            }
            project(p, e_ft)
        }
        None => {
            if e_ft.len() != cfg.d_fused {
                return Err(ClassifierError::DimMismatch(format!(
                    "embedder vector has dim {}, fusion expects {}",
                    e_ft.len(),
                    cfg.d_fused
                )));
            }
            e_ft.to_vec()
        }
    };
    Ok(e_enc
        .iter()
        .zip(&ft)
        .map(|(&a, &b)| cfg.lambda * a + (1.0 - cfg.lambda) * b)
        .collect())
}

/// Binary cross-entropy with the probability clamped into
/// [BCE_EPS, 1 - BCE_EPS].
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    match y {
        0 => -(1.0 - p).ln(),
        _ => -p.ln(),
    }
}

// ---------------------------------------------------------------------------
// Classification head
// ---------------------------------------------------------------------------

/// Two fully connected layers: GELU hidden, sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

pub struct HeadCache {
    z1: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ClassifierHead {
    pub fn init(d_fused: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (d_fused + hidden) as f64).sqrt();
        let out_bound = (6.0 / (hidden + 1) as f64).sqrt();
        ClassifierHead {
            w1: Mat::from_fn(d_fused, hidden, |_, _| rng.range_f64(-bound, bound)),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| rng.range_f64(-out_bound, out_bound)).collect(),
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn forward(&self, x: &[f64]) -> (f64, HeadCache) {
        let mut z1 = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            axpy(&mut z1, xi, self.w1.row(i));
        }
        let g: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
        let logit = dot(&g, &self.w2) + self.b2;
        (sigmoid(logit), HeadCache { z1, g })
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        self.forward(x).0
    }

    /// Backprop from d(loss)/d(logit); accumulates parameter gradients and
    /// returns d(loss)/d(input).
    pub fn backward(
        &self,
        x: &[f64],
        cache: &HeadCache,
        d_logit: f64,
        grads: &mut HeadGrads,
    ) -> Vec<f64> {
        grads.b2 += d_logit;
        for (gw, &gv) in grads.w2.iter_mut().zip(&cache.g) {
            *gw += d_logit * gv;
        }
        let d_z1: Vec<f64> = cache
            .z1
            .iter()
            .zip(&self.w2)
            .map(|(&z, &w)| d_logit * w * gelu_prime(z))
            .collect();
        for (i, &xi) in x.iter().enumerate() {
            axpy(grads.w1.row_mut(i), xi, &d_z1);
        }
        for (b, &d) in grads.b1.iter_mut().zip(&d_z1) {
            *b += d;
        }
        let mut d_x = vec![0.0; x.len()];
        for (i, dx) in d_x.iter_mut().enumerate() {
            *dx = dot(self.w1.row(i), &d_z1);
        }
        d_x
    }

    fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            w1: Mat::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Trained model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub embed: EmbeddingModel,
    pub enc_cfg: EncoderConfig,
    pub enc_params: EncoderParams,
    pub head: ClassifierHead,
    pub fusion: FusionConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub prob: f64,
    pub label: Label,
}

impl TrainedModel {
    /// Encoder ids: embedder vocabulary order, with the final id reserved for
    /// out-of-vocabulary tokens.
    pub fn token_ids(&self, tokens: &[String]) -> Vec<usize> {
        let unk = self.embed.vocab.len();
        tokens
            .iter()
            .map(|t| self.embed.vocab.id(t).unwrap_or(unk))
            .collect()
    }

    fn truncate_ids(&self, mut ids: Vec<usize>) -> Vec<usize> {
        ids.truncate(self.enc_cfg.max_len);
        ids
    }

    /// Deterministic forward pass (dropout off); hard label at 0.5.
    pub fn predict(&self, tokens: &[String]) -> Result<Prediction, ClassifierError> {
        if tokens.is_empty() {
            return Err(ClassifierError::EmptySequence);
        }
        let e_ft = self.embed.doc_vector(tokens)?;
        let ids = self.truncate_ids(self.token_ids(tokens));
        let hiddens = encode(&self.enc_params, &self.enc_cfg, &ids)?;
        let e_enc = pool_global(&hiddens);
        let fused = fuse(&e_enc, &e_ft, &self.fusion)?;
        let prob = self.head.prob(&fused);
        Ok(Prediction {
            prob,
            label: if prob >= 0.5 {
                Label::Webshell
            } else {
                Label::Benign
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub head_hidden: usize,
    pub lambda: f64,
    pub adamw: AdamWHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch: 16,
            seed: 42,
            head_hidden: 32,
            lambda: 0.7,
            adamw: AdamWHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
}

/// `epoch,train_loss,val_acc,val_f1` rows.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc,val_f1\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            h.epoch, h.train_loss, h.val_accuracy, h.val_f1
        ));
    }
    out
}

struct SampleGrads {
    loss: f64,
    enc: EncoderGrads,
    head: HeadGrads,
    proj: Option<Mat>,
}

struct PreparedSample {
    ids: Vec<usize>,
    e_ft: Vec<f64>,
    y: u8,
}

fn check_labels(samples: &[TokenSequence]) -> Result<(), ClassifierError> {
    if samples.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut seen = [false, false];
    for s in samples {
        match s.label {
            Some(l) => seen[l.as_int() as usize] = true,
            None => return Err(ClassifierError::MissingLabel(s.source_id.clone())),
        }
    }
    if !(seen[0] && seen[1]) {
        return Err(ClassifierError::SingleClassDataset);
    }
    Ok(())
}

/// Joint training of encoder, head and optional projection over a frozen
/// embedder. Per-sample forward/backward runs in parallel within a batch;
/// gradients reduce in sample order, so results do not depend on the thread
/// count. Fixed seeds give identical histories and parameters.
pub fn train(
    train_set: &[TokenSequence],
    val_set: &[TokenSequence],
    embed_model: &EmbeddingModel,
    base_enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochStats>), ClassifierError> {
    check_labels(train_set)?;
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(ClassifierError::InvalidLambda(cfg.lambda));
    }

    let enc_cfg = EncoderConfig {
        vocab_size: embed_model.vocab.len() + 1, // + out-of-vocabulary id
        ..*base_enc_cfg
    };
    enc_cfg.validate()?;

    let enc_params = EncoderParams::init(&enc_cfg, cfg.seed)?;
    let mut head_rng = Rng::new(cfg.seed).derive(0x4ead);
    let head = ClassifierHead::init(enc_cfg.d_model, cfg.head_hidden, &mut head_rng);
    let mut proj_rng = Rng::new(cfg.seed).derive(0x9407);
    let fusion = FusionConfig::new(
        cfg.lambda,
        enc_cfg.d_model,
        embed_model.config.dim,
        &mut proj_rng,
    )?;

    let mut model = TrainedModel {
        embed: embed_model.clone(),
        enc_cfg,
        enc_params,
        head,
        fusion,
    };

    // Frozen embedder outputs and encoder ids, computed once.
    let prepared: Vec<PreparedSample> = train_set
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                ids: model.truncate_ids(model.token_ids(&s.tokens)),
                e_ft: model.embed.doc_vector(&s.tokens)?,
                y: s.label.expect("checked").as_int(),
            })
        })
        .collect::<Result<_, ClassifierError>>()?;
    if prepared.iter().any(|p| p.ids.is_empty()) {
        return Err(ClassifierError::EmptySequence);
    }

    let mut shapes: Vec<usize> = model.enc_params.tensor_shapes();
    shapes.push(model.head.w1.as_slice().len());
    shapes.push(model.head.b1.len());
    shapes.push(model.head.w2.len());
    shapes.push(1);
    if let Some(p) = &model.fusion.projection {
        shapes.push(p.as_slice().len());
    }
    let mut opt = AdamWState::new(&shapes, cfg.adamw);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = Rng::new(cfg.seed).derive(0xe90c ^ epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch.max(1)).enumerate() {
            let sample_grads: Vec<SampleGrads> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let sample = &prepared[idx];
                    let salt = (epoch as u64) << 40 | (batch_no as u64) << 16 | k as u64;
                    let mut dropout_rng = Rng::new(cfg.seed).derive(0xd40b ^ salt);
                    sample_backward(&model, sample, Some(&mut dropout_rng))
                })
                .collect::<Result<_, ClassifierError>>()?;

            // Deterministic fixed-order reduction.
            let scale = 1.0 / batch.len() as f64;
            let mut enc_acc = EncoderGrads::zeros(&model.enc_cfg);
            let mut head_acc = model.head.zero_grads();
            let mut proj_acc = model
                .fusion
                .projection
                .as_ref()
                .map(|p| Mat::zeros(p.rows(), p.cols()));
            for sg in &sample_grads {
                loss_sum += sg.loss;
                enc_acc.add(&sg.enc);
                head_acc.w1.add_scaled(&sg.head.w1, 1.0);
                for (a, b) in head_acc.b1.iter_mut().zip(&sg.head.b1) {
                    *a += b;
                }
                for (a, b) in head_acc.w2.iter_mut().zip(&sg.head.w2) {
                    *a += b;
                }
                head_acc.b2 += sg.head.b2;
                if let (Some(acc), Some(g)) = (proj_acc.as_mut(), sg.proj.as_ref()) {
                    acc.add_scaled(g, 1.0);
                }
            }
            enc_acc.scale(scale);
            head_acc.w1.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            head_acc.b1.iter_mut().for_each(|v| *v *= scale);
            head_acc.w2.iter_mut().for_each(|v| *v *= scale);
            head_acc.b2 *= scale;
            if let Some(acc) = proj_acc.as_mut() {
                acc.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            }

            let mut grad_refs: Vec<&[f64]> = enc_acc.tensor_slices();
            grad_refs.push(head_acc.w1.as_slice());
            grad_refs.push(&head_acc.b1);
            grad_refs.push(&head_acc.w2);
            grad_refs.push(std::slice::from_ref(&head_acc.b2));
            if let Some(acc) = proj_acc.as_ref() {
                grad_refs.push(acc.as_slice());
            }

            let mut param_refs: Vec<&mut [f64]> = model.enc_params.tensor_slices_mut();
            param_refs.push(model.head.w1.as_mut_slice());
            param_refs.push(&mut model.head.b1);
            param_refs.push(&mut model.head.w2);
            param_refs.push(std::slice::from_mut(&mut model.head.b2));
            if let Some(p) = model.fusion.projection.as_mut() {
                param_refs.push(p.as_mut_slice());
            }
            opt.step(&mut param_refs, &grad_refs);
        }

        let val_metrics = evaluate(&model, val_set)?;
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / prepared.len() as f64,
            val_accuracy: val_metrics.0,
            val_f1: val_metrics.1,
        });
    }

    Ok((model, history))
}

fn sample_backward(
    model: &TrainedModel,
    sample: &PreparedSample,
    dropout_rng: Option<&mut Rng>,
) -> Result<SampleGrads, ClassifierError> {
    let (hiddens, acts) = encode_train(&model.enc_params, &model.enc_cfg, &sample.ids, dropout_rng)?;
    let e_enc = pool_global(&hiddens);
    let fused = fuse(&e_enc, &sample.e_ft, &model.fusion)?;
    let (p, cache) = model.head.forward(&fused);
    let loss = bce_loss(p, sample.y);
    let d_logit = p - sample.y as f64;

    let mut head_grads = model.head.zero_grads();
    let d_fused = model.head.backward(&fused, &cache, d_logit, &mut head_grads);

    let lambda = model.fusion.lambda;
    let d_enc_vec: Vec<f64> = d_fused.iter().map(|&v| v * lambda).collect();
    let proj_grads = model.fusion.projection.as_ref().map(|p_mat| {
        let mut g = Mat::zeros(p_mat.rows(), p_mat.cols());
        for (i, &fi) in sample.e_ft.iter().enumerate() {
            axpy(g.row_mut(i), (1.0 - lambda) * fi, &d_fused);
        }
        g
    });

    let d_hiddens = pool_global_backward(&d_enc_vec, &hiddens);
    let mut enc_grads = EncoderGrads::zeros(&model.enc_cfg);
    encoder_backward(
        &model.enc_params,
        &model.enc_cfg,
        &sample.ids,
        &acts,
        &d_hiddens,
        &mut enc_grads,
    );

    Ok(SampleGrads {
        loss,
        enc: enc_grads,
        head: head_grads,
        proj: proj_grads,
    })
}

/// (accuracy, f1) over a labeled set; positive class is Webshell.
fn evaluate(model: &TrainedModel, samples: &[TokenSequence]) -> Result<(f64, f64), ClassifierError> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let preds: Vec<(Label, Label)> = samples
        .par_iter()
        .map(|s| {
            let p = model.predict(&s.tokens)?;
            Ok((p.label, s.label.expect("labeled")))
        })
        .collect::<Result<_, ClassifierError>>()?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (pred, truth) in preds {
        match (pred, truth) {
            (Label::Webshell, Label::Webshell) => tp += 1,
            (Label::Webshell, Label::Benign) => fp += 1,
            (Label::Benign, Label::Benign) => tn += 1,
            (Label::Benign, Label::Webshell) => fneg += 1,
        }
    }
    let total = (tp + fp + tn + fneg) as f64;
    let acc = (tp + tn) as f64 / total;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((acc, f1))
}

// ---------------------------------------------------------------------------
// Lambda grid search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaResult {
    pub lambda: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
}

/// Train one model per candidate (identical seeds and configs) and pick the
/// lambda with the best validation F1; ties break toward the larger lambda.
pub fn grid_search_lambda(
    candidates: &[f64],
    train_set: &[TokenSequence],
    val_set: &[TokenSequence],
    embed_model: &EmbeddingModel,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<LambdaResult>), ClassifierError> {
    if candidates.is_empty() {
        return Err(ClassifierError::InvalidLambda(f64::NAN));
    }
    let mut grid: Vec<f64> = Vec::new();
    for &c in candidates {
        if !(0.0..=1.0).contains(&c) {
            return Err(ClassifierError::InvalidLambda(c));
        }
        if !grid.contains(&c) {
            grid.push(c);
        }
    }
    let mut results = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let run_cfg = TrainConfig { lambda, ..*cfg };
        let (model, _history) = train(train_set, val_set, embed_model, enc_cfg, &run_cfg)?;
        let (acc, f1) = evaluate(&model, val_set)?;
        results.push(LambdaResult {
            lambda,
            val_accuracy: acc,
            val_f1: f1,
        });
    }
    let best = results
        .iter()
        .fold(None::<&LambdaResult>, |best, r| match best {
            None => Some(r),
            Some(b) if r.val_f1 > b.val_f1 || (r.val_f1 == b.val_f1 && r.lambda > b.lambda) => {
                Some(r)
            }
            Some(b) => Some(b),
        })
        .expect("nonempty grid");
    Ok((best.lambda, results))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const EMBED_VEC_FILE: &str = "embed.vec";
const EMBED_BUCKET_FILE: &str = "embed.ftbk";
const ENCODER_FILE: &str = "encoder.swae";
const HEAD_FILE: &str = "head.bin";
const MODEL_CONF_FILE: &str = "model.conf";

fn head_tensor_bytes(head: &ClassifierHead, projection: Option<&Mat>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(
        &mut out,
        &NamedTensor::new(
            "head.w1",
            vec![head.w1.rows(), head.w1.cols()],
            head.w1.as_slice().to_vec(),
        ),
    );
    write_tensor(
        &mut out,
        &NamedTensor::new("head.b1", vec![head.b1.len()], head.b1.clone()),
    );
    write_tensor(
        &mut out,
        &NamedTensor::new("head.w2", vec![head.w2.len()], head.w2.clone()),
    );
    write_tensor(&mut out, &NamedTensor::new("head.b2", vec![1], vec![head.b2]));
    if let Some(p) = projection {
        write_tensor(
            &mut out,
            &NamedTensor::new("proj.w", vec![p.rows(), p.cols()], p.as_slice().to_vec()),
        );
    }
    out
}

impl TrainedModel {
    /// Write the model bundle into a directory: embedder table and bucket
    /// sidecar, encoder checkpoint, head tensors, and a small key=value
    /// config with what the blobs cannot carry.
    pub fn save_to_dir(&self, dir: &Path) -> Result<(), ClassifierError> {
        let io = |e: std::io::Error| ClassifierError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join(EMBED_VEC_FILE), embed::save_vec(&self.embed)).map_err(io)?;
        std::fs::write(dir.join(EMBED_BUCKET_FILE), embed::save_buckets(&self.embed)).map_err(io)?;
        std::fs::write(
            dir.join(ENCODER_FILE),
            save_encoder(&self.enc_params, &self.enc_cfg),
        )
        .map_err(io)?;
        std::fs::write(
            dir.join(HEAD_FILE),
            head_tensor_bytes(&self.head, self.fusion.projection.as_ref()),
        )
        .map_err(io)?;
        let conf = format!(
            "fusion.lambda = {}\nembed.minn = {}\nembed.maxn = {}\n",
            self.fusion.lambda, self.embed.config.minn, self.embed.config.maxn
        );
        std::fs::write(dir.join(MODEL_CONF_FILE), conf).map_err(io)?;
        Ok(())
    }

    pub fn load_from_dir(dir: &Path) -> Result<Self, ClassifierError> {
        let io = |e: std::io::Error| ClassifierError::Io(e.to_string());
        let conf_text = std::fs::read_to_string(dir.join(MODEL_CONF_FILE)).map_err(io)?;
        let mut lambda = None;
        let mut minn = None;
        let mut maxn = None;
        for line in conf_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "fusion.lambda" => lambda = v.parse::<f64>().ok(),
                    "embed.minn" => minn = v.parse::<usize>().ok(),
                    "embed.maxn" => maxn = v.parse::<usize>().ok(),
                    _ => {}
                }
            }
        }
        let (lambda, minn, maxn) = match (lambda, minn, maxn) {
            (Some(l), Some(a), Some(b)) => (l, a, b),
            _ => return Err(ClassifierError::Checkpoint("incomplete model.conf".into())),
        };

        let vec_text = std::fs::read_to_string(dir.join(EMBED_VEC_FILE)).map_err(io)?;
        let bucket_bytes = std::fs::read(dir.join(EMBED_BUCKET_FILE)).map_err(io)?;
        let embed_cfg = crate::embed::SubwordConfig {
            minn,
            maxn,
            ..Default::default()
        };
        let embed = embed::assemble_model(
            embed::load_vec(&vec_text).map_err(ClassifierError::Embed)?,
            embed::load_buckets(&bucket_bytes).map_err(ClassifierError::Embed)?,
            embed_cfg,
        )?;

        let enc_bytes = std::fs::read(dir.join(ENCODER_FILE)).map_err(io)?;
        let (enc_params, enc_cfg) = load_encoder(&enc_bytes)?;

        let head_bytes = std::fs::read(dir.join(HEAD_FILE)).map_err(io)?;
        let tensors = TensorReader::new(&head_bytes).read_all()?;
        let find = |name: &str| -> Result<&NamedTensor, ClassifierError> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| ClassifierError::Checkpoint(format!("missing tensor {name}")))
        };
        let w1_t = find("head.w1")?;
        let mut w1 = Mat::zeros(w1_t.dims[0], w1_t.dims[1]);
        w1.as_mut_slice().copy_from_slice(&w1_t.data);
        let head = ClassifierHead {
            w1,
            b1: find("head.b1")?.data.clone(),
            w2: find("head.w2")?.data.clone(),
            b2: find("head.b2")?.data[0],
        };
        let projection = tensors.iter().find(|t| t.name == "proj.w").map(|t| {
            let mut p = Mat::zeros(t.dims[0], t.dims[1]);
            p.as_mut_slice().copy_from_slice(&t.data);
            p
        });
        let fusion = FusionConfig {
            lambda,
            d_fused: enc_cfg.d_model,
            projection,
        };
        Ok(TrainedModel {
            embed,
            enc_cfg,
            enc_params,
            head,
            fusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::TokenMode;

    fn toy_enc_cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 1, // overwritten by train
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ff_dim: 16,
            max_len: 64,
            window: 6,
            stride: 3,
            dropout: 0.0,
        }
    }

    fn labeled(tokens: &[&str], label: Label, id: &str) -> TokenSequence {
        TokenSequence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            label: Some(label),
            source_id: id.into(),
            mode: TokenMode::Odt,
        }
    }

    fn toy_dataset() -> (Vec<TokenSequence>, Vec<TokenSequence>) {
        let mut train = Vec::new();
        for i in 0..12 {
            train.push(labeled(
                &["ECHO", "hello", "ASSIGN", "<var>", "title"],
                Label::Benign,
                &format!("b{i}"),
            ));
            train.push(labeled(
                &["INIT_FCALL", "system", "SEND_VAL", "<str:H>", "DO_ICALL"],
                Label::Webshell,
                &format!("w{i}"),
            ));
        }
        let val = vec![
            labeled(&["ECHO", "hello", "ECHO", "title"], Label::Benign, "vb"),
            labeled(
                &["INIT_FCALL", "system", "SEND_VAL", "<str:H>"],
                Label::Webshell,
                "vw",
            ),
        ];
        (train, val)
    }

    fn toy_embed(train: &[TokenSequence]) -> EmbeddingModel {
        let cfg = crate::embed::SubwordConfig {
            dim: 8,
            buckets: 500,
            epochs: 2,
            ..Default::default()
        };
        crate::embed::train_skipgram(train, &cfg).unwrap().0
    }

    #[test]
    fn fuse_endpoints_exact() {
        let e = vec![1.0, 2.0, 3.0];
        let f = vec![-4.0, 5.0, -6.0];
        let cfg = FusionConfig {
            lambda: 1.0,
            d_fused: 3,
            projection: None,
        };
        assert_eq!(fuse(&e, &f, &cfg).unwrap(), e);
        let cfg = FusionConfig {
            lambda: 0.0,
            d_fused: 3,
            projection: None,
        };
        assert_eq!(fuse(&e, &f, &cfg).unwrap(), f);
    }

    #[test]
    fn fuse_weighted_example() {
        let cfg = FusionConfig {
            lambda: 0.7,
            d_fused: 2,
            projection: None,
        };
        let out = fuse(&[1.0, 0.0], &[0.0, 1.0], &cfg).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-15);
        assert!((out[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fuse_linearity() {
        let cfg = FusionConfig {
            lambda: 0.3,
            d_fused: 3,
            projection: None,
        };
        let a = vec![0.5, -1.5, 2.0];
        let b = vec![3.0, 0.25, -0.75];
        let ab = fuse(&a, &b, &cfg).unwrap();
        let ba = fuse(&b, &a, &cfg).unwrap();
        for i in 0..3 {
            assert!((ab[i] + ba[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_dim_mismatch() {
        let cfg = FusionConfig {
            lambda: 0.5,
            d_fused: 3,
            projection: None,
        };
        assert!(matches!(
            fuse(&[1.0, 2.0], &[1.0, 2.0, 3.0], &cfg),
            Err(ClassifierError::DimMismatch(_))
        ));
        assert!(matches!(
            fuse(&[1.0, 2.0, 3.0], &[1.0, 2.0], &cfg),
            Err(ClassifierError::DimMismatch(_))
        ));
    }

    #[test]
    fn fuse_projection_aligns_dims() {
        let mut rng = Rng::new(3);
        let cfg = FusionConfig::new(0.5, 2, 4, &mut rng).unwrap();
        assert!(cfg.projection.is_some());
        let out = fuse(&[1.0, 1.0], &[0.5, -0.5, 0.25, 0.0], &cfg).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        let at_one = bce_loss(1.0, 1);
        assert!(at_one > 0.0 && at_one < 2e-7, "clamp keeps it positive: {at_one}");
        assert!((bce_loss(0.9, 0) - std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn bce_decreases_toward_target() {
        let mut prev = bce_loss(0.01, 1);
        for i in 2..100 {
            let p = i as f64 / 100.0;
            let l = bce_loss(p, 1);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn zero_final_layer_gives_half() {
        let mut rng = Rng::new(5);
        let mut head = ClassifierHead::init(4, 8, &mut rng);
        head.w2.iter_mut().for_each(|w| *w = 0.0);
        head.b2 = 0.0;
        assert_eq!(head.prob(&[0.3, -0.7, 1.1, 0.0]), 0.5);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let mut head = ClassifierHead::init(4, 6, &mut rng);
        // Nonzero output layer so gradients reach w1.
        for (i, w) in head.w2.iter_mut().enumerate() {
            *w = 0.3 - 0.1 * i as f64;
        }
        head.b2 = 0.2;
        let x = [0.4, -1.2, 0.9, 0.1];
        let y = 1u8;

        let loss_of = |head: &ClassifierHead| bce_loss(head.prob(&x), y);

        let (p, cache) = head.forward(&x);
        let mut grads = head.zero_grads();
        let d_x = head.backward(&x, &cache, p - y as f64, &mut grads);

        let h = 1e-5;
        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "{what}: {analytic} vs {fd}"
            );
        };
        for i in 0..head.w1.rows() {
            for j in 0..head.w1.cols() {
                let mut plus = head.clone();
                plus.w1.set(i, j, head.w1.get(i, j) + h);
                let mut minus = head.clone();
                minus.w1.set(i, j, head.w1.get(i, j) - h);
                check(
                    grads.w1.get(i, j),
                    (loss_of(&plus) - loss_of(&minus)) / (2.0 * h),
                    "w1",
                );
            }
        }
        for j in 0..head.w2.len() {
            let mut plus = head.clone();
            plus.w2[j] += h;
            let mut minus = head.clone();
            minus.w2[j] -= h;
            check(
                grads.w2[j],
                (loss_of(&plus) - loss_of(&minus)) / (2.0 * h),
                "w2",
            );
        }
        {
            let mut plus = head.clone();
            plus.b2 += h;
            let mut minus = head.clone();
            minus.b2 -= h;
            check(grads.b2, (loss_of(&plus) - loss_of(&minus)) / (2.0 * h), "b2");
        }
        // Input gradient via perturbing x.
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            check(
                d_x[i],
                (bce_loss(head.prob(&xp), y) - bce_loss(head.prob(&xm), y)) / (2.0 * h),
                "x",
            );
        }
    }

    #[test]
    fn train_rejects_degenerate_datasets() {
        let (train_set, val) = toy_dataset();
        let embed = toy_embed(&train_set);
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert_eq!(
            train(&[], &val, &embed, &toy_enc_cfg(), &cfg).unwrap_err(),
            ClassifierError::EmptyDataset
        );
        let single: Vec<TokenSequence> = train_set
            .iter()
            .filter(|s| s.label == Some(Label::Benign))
            .cloned()
            .collect();
        assert_eq!(
            train(&single, &val, &embed, &toy_enc_cfg(), &cfg).unwrap_err(),
            ClassifierError::SingleClassDataset
        );
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (train_set, val) = toy_dataset();
        let embed = toy_embed(&train_set);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 11,
            ..Default::default()
        };
        let (m1, history) = train(&train_set, &val, &embed, &toy_enc_cfg(), &cfg).unwrap();
        assert!(history.is_empty());
        let (m2, _) = train(&train_set, &val, &embed, &toy_enc_cfg(), &cfg).unwrap();
        assert_eq!(m1.enc_params, m2.enc_params);
        assert_eq!(m1.head, m2.head);
    }

    #[test]
    fn training_learns_toy_separation_and_is_deterministic() {
        let (train_set, val) = toy_dataset();
        let embed = toy_embed(&train_set);
        let cfg = TrainConfig {
            epochs: 4,
            batch: 8,
            seed: 42,
            head_hidden: 8,
            lambda: 0.7,
            adamw: AdamWHyper {
                lr: 5e-3,
                ..Default::default()
            },
        };
        let (model, history) = train(&train_set, &val, &embed, &toy_enc_cfg(), &cfg).unwrap();
        assert_eq!(history.len(), 4);
        assert!(history.last().unwrap().train_loss < history[0].train_loss);
        assert!(history.iter().all(|h| h.train_loss.is_finite()));

        let (model2, history2) = train(&train_set, &val, &embed, &toy_enc_cfg(), &cfg).unwrap();
        assert_eq!(history, history2);
        assert_eq!(model.enc_params, model2.enc_params);
        assert_eq!(model.head, model2.head);

        // Deterministic prediction.
        let p1 = model.predict(&train_set[0].tokens).unwrap();
        let p2 = model.predict(&train_set[0].tokens).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn predict_rejects_empty() {
        let (train_set, val) = toy_dataset();
        let embed = toy_embed(&train_set);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (model, _) = train(&train_set, &val, &embed, &toy_enc_cfg(), &cfg).unwrap();
        assert_eq!(
            model.predict(&[]).unwrap_err(),
            ClassifierError::EmptySequence
        );
    }

    #[test]
    fn grid_search_dedups_and_reports() {
        let (train_set, val) = toy_dataset();
        let embed = toy_embed(&train_set);
        let cfg = TrainConfig {
            epochs: 1,
            batch: 8,
            head_hidden: 4,
            ..Default::default()
        };
        let (best, table) = grid_search_lambda(
            &[0.5, 0.5, 1.0],
            &train_set,
            &val,
            &embed,
            &toy_enc_cfg(),
            &cfg,
        )
        .unwrap();
        assert_eq!(table.len(), 2);
        assert!(table.iter().any(|r| r.lambda == best));
        assert!(grid_search_lambda(&[1.5], &train_set, &val, &embed, &toy_enc_cfg(), &cfg).is_err());
    }

    #[test]
    fn model_dir_round_trip() {
        let (train_set, val) = toy_dataset();
        let embed = toy_embed(&train_set);
        let cfg = TrainConfig {
            epochs: 1,
            batch: 8,
            head_hidden: 4,
            ..Default::default()
        };
        let (model, _) = train(&train_set, &val, &embed, &toy_enc_cfg(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save_to_dir(dir.path()).unwrap();
        let loaded = TrainedModel::load_from_dir(dir.path()).unwrap();
        // Predictions agree at f32 checkpoint precision.
        for s in &val {
            let a = model.predict(&s.tokens).unwrap();
            let b = loaded.predict(&s.tokens).unwrap();
            assert!((a.prob - b.prob).abs() < 1e-4, "{} vs {}", a.prob, b.prob);
        }
        // Saving twice is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        model.save_to_dir(dir2.path()).unwrap();
        for f in [EMBED_VEC_FILE, EMBED_BUCKET_FILE, ENCODER_FILE, HEAD_FILE, MODEL_CONF_FILE] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs");
        }
    }
}
