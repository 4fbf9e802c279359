//! Subword skip-gram token embeddings with negative sampling.
//!
//! A token's vector is the mean of its vocabulary row (when in vocabulary)
//! and the rows of its hashed character n-gram buckets, so unseen tokens
//! still embed through their n-grams. Document vectors are unweighted means
//! over token vectors.
//!
//! Persistence: a `.vec` text table for vocabulary vectors (`<count> <dim>`
//! header, one `token v1 .. vdim` line each, 6 decimal places) plus an
//! `FTBK` binary sidecar for the n-gram bucket table (16-byte header: magic,
//! u32 buckets, u32 dim, u32 reserved; then little-endian f32, row-major).

use std::collections::HashMap;

use thiserror::Error;

use crate::math::{axpy, dot, log_sigmoid, sigmoid, Mat};
use crate::rng::Rng;
use crate::tokens::TokenSequence;

// Salt separating the SGD sampling stream from the init stream.
const TRAIN_STREAM_SALT: u64 = 0x5eed_0f7e_4a11_d7a3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubwordConfig {
    pub minn: usize,
    pub maxn: usize,
    pub buckets: usize,
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SubwordConfig {
    fn default() -> Self {
        SubwordConfig {
            minn: 3,
            maxn: 5,
            buckets: 100_000,
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.05,
            seed: 42,
        }
    }
}

impl SubwordConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.minn < 2 || self.minn > self.maxn {
            return Err(EmbedError::InvalidConfig("need 2 <= minn <= maxn".into()));
        }
        if self.buckets < 1 || self.dim < 1 {
            return Err(EmbedError::InvalidConfig(
                "buckets and dim must be >= 1".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(EmbedError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbedError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
}

/// Token vocabulary in first-seen corpus order, with frequency counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_corpus<'a>(sequences: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut vocab = Vocab::default();
        for seq in sequences {
            for tok in &seq.tokens {
                vocab.add(tok);
            }
        }
        vocab
    }

    pub fn add(&mut self, token: &str) {
        match self.index.get(token) {
            Some(&i) => self.counts[i] += 1,
            None => {
                self.index.insert(token.to_string(), self.tokens.len());
                self.tokens.push(token.to_string());
                self.counts.push(1);
            }
        }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub vocab: Vocab,
    /// (vocab_size + buckets) x dim; bucket rows follow the vocabulary rows.
    pub input_vectors: Mat,
    /// vocab_size x dim context vectors; only used during training.
    pub output_vectors: Mat,
    pub config: SubwordConfig,
}

/// Character n-grams of the `<`-`>` wrapped token, ordered by position then
/// length, plus the wrapped token itself when its length falls outside
/// [minn, maxn] (inside that range the enumeration already produced it).
pub fn char_ngrams(token: &str, minn: usize, maxn: usize) -> Vec<String> {
    let wrapped: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let n = wrapped.len();
    let mut out = Vec::new();
    for pos in 0..n {
        for len in minn..=maxn {
            if pos + len <= n {
                out.push(wrapped[pos..pos + len].iter().collect());
            }
        }
    }
    if !(minn <= n && n <= maxn) {
        out.push(wrapped.iter().collect());
    }
    out
}

/// FNV-1a (32-bit) over the n-gram's UTF-8 bytes, reduced mod `buckets`.
pub fn hash_ngram(ngram: &str, buckets: usize) -> usize {
    const FNV_OFFSET: u32 = 2_166_136_261;
    const FNV_PRIME: u32 = 16_777_619;
    let mut h = FNV_OFFSET;
    for &b in ngram.as_bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h as usize) % buckets
}

impl EmbeddingModel {
    /// Freshly initialized model: input rows uniform in [-1/dim, 1/dim] from
    /// the seeded generator, output rows zero. Zero output vectors make the
    /// loss of the first training pair exactly (1 + negatives) * ln 2.
    pub fn init(vocab: Vocab, config: SubwordConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let rows = vocab.len() + config.buckets;
        let mut rng = Rng::new(config.seed);
        let bound = 1.0 / config.dim as f64;
        let mut input = Mat::zeros(rows, config.dim);
        for v in input.as_mut_slice() {
            *v = rng.range_f64(-bound, bound);
        }
        let output = Mat::zeros(vocab.len(), config.dim);
        Ok(EmbeddingModel {
            vocab,
            input_vectors: input,
            output_vectors: output,
            config,
        })
    }

    /// Row indices contributing to a token's vector: the vocab row when the
    /// token is known, plus its hashed n-gram buckets.
    pub fn row_ids(&self, token: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        if let Some(v) = self.vocab.id(token) {
            ids.push(v);
        }
        if !token.is_empty() {
            let base = self.vocab.len();
            for gram in char_ngrams(token, self.config.minn, self.config.maxn) {
                ids.push(base + hash_ngram(&gram, self.config.buckets));
            }
        }
        ids
    }

    /// Mean of the contributing rows; total (the empty string, which has no
    /// rows, maps to the zero vector).
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        mean_of_rows(&self.input_vectors, &self.row_ids(token), self.config.dim)
    }

    /// Unweighted mean of token vectors.
    pub fn doc_vector(&self, tokens: &[String]) -> Result<Vec<f64>, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptySequence);
        }
        let mut acc = vec![0.0; self.config.dim];
        for tok in tokens {
            axpy(&mut acc, 1.0, &self.token_vector(tok));
        }
        let inv = 1.0 / tokens.len() as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }
}

fn mean_of_rows(m: &Mat, ids: &[usize], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    if ids.is_empty() {
        return acc;
    }
    for &id in ids {
        axpy(&mut acc, 1.0, m.row(id));
    }
    let inv = 1.0 / ids.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    acc
}

/// (loss, dLoss/dHidden, per-output-row gradients) for one update.
#[cfg(test)]
type PairGradients = (f64, Vec<f64>, Vec<(usize, Vec<f64>)>);

/// Gradients for one (center, context, negatives) update. The hidden state
/// is the mean of the center rows, so each center row receives
/// dLoss/dHidden / center_rows.len(). Reference form of the buffered update
/// inside `train_skipgram`; the finite-difference test pins it.
#[cfg(test)]
fn pair_gradients(
    input: &Mat,
    output: &Mat,
    center_rows: &[usize],
    ctx: usize,
    negatives: &[usize],
    dim: usize,
) -> PairGradients {
    let h = mean_of_rows(input, center_rows, dim);
    let mut grad_h = vec![0.0; dim];
    let mut out_grads = Vec::with_capacity(1 + negatives.len());
    let mut loss = 0.0;

    let score = dot(output.row(ctx), &h);
    loss -= log_sigmoid(score);
    let g = sigmoid(score) - 1.0;
    axpy(&mut grad_h, g, output.row(ctx));
    out_grads.push((ctx, h.iter().map(|&x| g * x).collect()));

    for &neg in negatives {
        let score = dot(output.row(neg), &h);
        loss -= log_sigmoid(-score);
        let g = sigmoid(score);
        axpy(&mut grad_h, g, output.row(neg));
        out_grads.push((neg, h.iter().map(|&x| g * x).collect()));
    }

    (loss, grad_h, out_grads)
}

/// Cumulative unigram^0.75 table for negative sampling.
struct NegativeTable {
    cumulative: Vec<f64>,
    total: f64,
}

impl NegativeTable {
    fn new(vocab: &Vocab) -> Self {
        let mut cumulative = Vec::with_capacity(vocab.len());
        let mut total = 0.0;
        for id in 0..vocab.len() {
            total += (vocab.count(id) as f64).powf(0.75);
            cumulative.push(total);
        }
        NegativeTable { cumulative, total }
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        let x = rng.next_f64() * self.total;
        self.cumulative
            .partition_point(|&c| c <= x)
            .min(self.cumulative.len() - 1)
    }

    /// Draw a negative different from `target`, giving up after a bounded
    /// number of attempts (relevant only for near-degenerate vocabularies).
    fn sample_not(&self, rng: &mut Rng, target: usize) -> Option<usize> {
        for _ in 0..100 {
            let s = self.sample(rng);
            if s != target {
                return Some(s);
            }
        }
        None
    }
}

/// Skip-gram training with negative sampling, returning the model and the
/// mean per-pair objective of each epoch. The learning rate decays linearly
/// to zero over all scheduled center positions; a fixed seed makes the
/// result bit-reproducible.
pub fn train_skipgram(
    corpus: &[TokenSequence],
    config: &SubwordConfig,
) -> Result<(EmbeddingModel, Vec<f64>), EmbedError> {
    config.validate()?;
    if corpus.is_empty() || corpus.iter().all(|s| s.tokens.is_empty()) {
        return Err(EmbedError::EmptyCorpus);
    }
    let vocab = Vocab::from_corpus(corpus);
    let mut model = EmbeddingModel::init(vocab, *config)?;

    let token_ids: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.tokens.iter().map(|t| model.vocab.id(t).unwrap()).collect())
        .collect();
    let row_sets: Vec<Vec<usize>> = model
        .vocab
        .tokens()
        .iter()
        .map(|t| model.row_ids(t))
        .collect();

    let table = NegativeTable::new(&model.vocab);
    let total_centers: u64 =
        config.epochs as u64 * corpus.iter().map(|s| s.tokens.len() as u64).sum::<u64>();
    let mut processed: u64 = 0;
    let mut rng = Rng::new(config.seed ^ TRAIN_STREAM_SALT);

    let mut epoch_losses = Vec::with_capacity(config.epochs);

    // Reused buffers; the inner loop is allocation-free.
    let dim = config.dim;
    let mut hidden = vec![0.0; dim];
    let mut grad_h = vec![0.0; dim];
    let mut targets: Vec<(usize, f64)> = Vec::with_capacity(1 + config.negatives);

    for _epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut pair_count: u64 = 0;
        for (seq, ids) in corpus.iter().zip(&token_ids) {
            let len = seq.tokens.len();
            for center in 0..len {
                let lr = config.lr * (1.0 - processed as f64 / total_centers as f64);
                processed += 1;
                let center_rows = &row_sets[ids[center]];
                if center_rows.is_empty() {
                    continue;
                }
                let lo = center.saturating_sub(config.window);
                let hi = (center + config.window).min(len - 1);
                for (ctx_pos, &ctx) in ids.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == center {
                        continue;
                    }

                    hidden.fill(0.0);
                    for &row in center_rows {
                        axpy(&mut hidden, 1.0, model.input_vectors.row(row));
                    }
                    let inv = 1.0 / center_rows.len() as f64;
                    hidden.iter_mut().for_each(|v| *v *= inv);

                    // Per-row logistic coefficients against the old output
                    // rows, then the two-sided update.
                    grad_h.fill(0.0);
                    targets.clear();
                    let score = dot(model.output_vectors.row(ctx), &hidden);
                    loss_sum -= log_sigmoid(score);
                    let g = sigmoid(score) - 1.0;
                    axpy(&mut grad_h, g, model.output_vectors.row(ctx));
                    targets.push((ctx, g));
                    for _ in 0..config.negatives {
                        let Some(neg) = table.sample_not(&mut rng, ctx) else {
                            continue;
                        };
                        let score = dot(model.output_vectors.row(neg), &hidden);
                        loss_sum -= log_sigmoid(-score);
                        let g = sigmoid(score);
                        axpy(&mut grad_h, g, model.output_vectors.row(neg));
                        targets.push((neg, g));
                    }
                    pair_count += 1;

                    for &(row, g) in &targets {
                        axpy(model.output_vectors.row_mut(row), -lr * g, &hidden);
                    }
                    let scale = -lr / center_rows.len() as f64;
                    for &row in center_rows {
                        axpy(model.input_vectors.row_mut(row), scale, &grad_h);
                    }
                }
            }
        }
        epoch_losses.push(if pair_count == 0 {
            0.0
        } else {
            loss_sum / pair_count as f64
        });
    }

    Ok((model, epoch_losses))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// `.vec` text table of vocabulary vectors.
pub fn save_vec(model: &EmbeddingModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", model.vocab.len(), model.config.dim));
    for id in 0..model.vocab.len() {
        out.push_str(model.vocab.token(id));
        for v in model.input_vectors.row(id) {
            out.push_str(&format!(" {v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Parsed `.vec` content: vocabulary tokens with their vectors, in file order.
pub struct VecTable {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

pub fn load_vec(text: &str) -> Result<VecTable, EmbedError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| EmbedError::Format("empty .vec".into()))?;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EmbedError::Format("bad .vec header".into()))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EmbedError::Format("bad .vec header".into()))?;
    let mut entries = Vec::with_capacity(count);
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields
            .next()
            .ok_or_else(|| EmbedError::Format("empty .vec row".into()))?
            .to_string();
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EmbedError::Format(format!("bad .vec value: {e}")))?;
        if values.len() != dim {
            return Err(EmbedError::Format(format!(
                "row arity {} does not match dim {}",
                values.len(),
                dim
            )));
        }
        entries.push((token, values));
    }
    if entries.len() != count {
        return Err(EmbedError::Format(format!(
            "header count {} does not match {} rows",
            count,
            entries.len()
        )));
    }
    Ok(VecTable { dim, entries })
}

const FTBK_MAGIC: &[u8; 4] = b"FTBK";

/// Bucket sidecar bytes: 16-byte header then the bucket rows as f32 LE.
pub fn save_buckets(model: &EmbeddingModel) -> Vec<u8> {
    let buckets = model.config.buckets;
    let dim = model.config.dim;
    let mut out = Vec::with_capacity(16 + buckets * dim * 4);
    out.extend_from_slice(FTBK_MAGIC);
    out.extend_from_slice(&(buckets as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    let base = model.vocab.len();
    for row in 0..buckets {
        for &v in model.input_vectors.row(base + row) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub struct BucketTable {
    pub buckets: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

pub fn load_buckets(bytes: &[u8]) -> Result<BucketTable, EmbedError> {
    if bytes.len() < 16 || &bytes[0..4] != FTBK_MAGIC {
        return Err(EmbedError::Format("bad FTBK header".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let buckets = u32_at(4);
    let dim = u32_at(8);
    let expected = buckets
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(EmbedError::Format(format!(
            "FTBK payload {} bytes, expected {}",
            bytes.len(),
            expected
        )));
    }
    let mut values = Vec::with_capacity(buckets * dim);
    for chunk in bytes[16..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(BucketTable {
        buckets,
        dim,
        values,
    })
}

/// Rebuild an inference-capable model from `.vec` text and FTBK bytes.
/// Frequency counts and output vectors are not persisted; the result embeds
/// tokens but cannot resume training.
pub fn assemble_model(
    vec_table: VecTable,
    bucket_table: BucketTable,
    mut config: SubwordConfig,
) -> Result<EmbeddingModel, EmbedError> {
    if vec_table.dim != bucket_table.dim {
        return Err(EmbedError::Format("vec/bucket dim mismatch".into()));
    }
    config.dim = vec_table.dim;
    config.buckets = bucket_table.buckets;
    let mut vocab = Vocab::default();
    let vocab_size = vec_table.entries.len();
    let mut input = Mat::zeros(vocab_size + bucket_table.buckets, vec_table.dim);
    for (i, (token, values)) in vec_table.entries.into_iter().enumerate() {
        vocab.add(&token);
        if vocab.len() != i + 1 {
            return Err(EmbedError::Format(format!(
                "duplicate token {token:?} in .vec"
            )));
        }
        input.row_mut(i).copy_from_slice(&values);
    }
    for (i, &v) in bucket_table.values.iter().enumerate() {
        input.as_mut_slice()[vocab_size * vec_table.dim + i] = v as f64;
    }
    let output = Mat::zeros(vocab_size, vec_table.dim);
    Ok(EmbeddingModel {
        vocab,
        input_vectors: input,
        output_vectors: output,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::TokenMode;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            label: None,
            source_id: "test".into(),
            mode: TokenMode::Odt,
        }
    }

    fn tiny_config() -> SubwordConfig {
        SubwordConfig {
            minn: 3,
            maxn: 3,
            buckets: 1000,
            dim: 8,
            window: 2,
            negatives: 2,
            epochs: 5,
            lr: 0.05,
            seed: 7,
        }
    }

    #[test]
    fn ngrams_eval() {
        assert_eq!(
            char_ngrams("eval", 3, 3),
            vec!["<ev", "eva", "val", "al>", "<eval>"]
        );
    }

    #[test]
    fn ngrams_short_token() {
        assert_eq!(char_ngrams("ab", 3, 3), vec!["<ab", "ab>", "<ab>"]);
    }

    #[test]
    fn ngrams_wrapped_only_when_nothing_fits() {
        // minn exceeds wrapped length: only the wrapped token remains.
        assert_eq!(char_ngrams("ab", 5, 5), vec!["<ab>"]);
    }

    #[test]
    fn ngrams_no_duplicate_full_token() {
        // Wrapped length 4 falls inside [3, 4]; the enumeration already
        // includes "<ab>", so it is not appended again.
        let grams = char_ngrams("ab", 3, 4);
        assert_eq!(grams, vec!["<ab", "<ab>", "ab>"]);
    }

    #[test]
    fn fnv1a_reference_values() {
        // Independent reference: FNV-1a("abc") = 0x1a47e90b, basis 2166136261.
        assert_eq!(hash_ngram("abc", 1 << 32), 0x1a47e90b);
        assert_eq!(hash_ngram("", 1 << 32), 2_166_136_261);
        assert_eq!(hash_ngram("anything", 1), 0);
        assert_eq!(hash_ngram("zzz", 1), 0);
    }

    #[test]
    fn token_vector_zero_rows_gives_zero() {
        let model = EmbeddingModel::init(Vocab::default(), tiny_config()).unwrap();
        // A model whose relevant rows are zeroed: zero out everything.
        let mut model = model;
        model.input_vectors.fill(0.0);
        let v = model.token_vector("eval");
        assert!(v.iter().all(|&x| x == 0.0));
        // The empty string has no vocab row and no n-grams.
        assert_eq!(model.token_vector(""), vec![0.0; 8]);
    }

    #[test]
    fn token_vector_is_mean_of_rows() {
        let mut vocab = Vocab::default();
        vocab.add("a");
        let cfg = SubwordConfig {
            buckets: 4,
            dim: 2,
            minn: 2,
            maxn: 2,
            ..tiny_config()
        };
        let mut model = EmbeddingModel::init(vocab, cfg).unwrap();
        model.input_vectors.fill(0.0);
        // "a" contributes its vocab row plus n-grams "<a", "a>" (wrapped "<a>"
        // has length 3, outside [2,2], so it is appended as well).
        let ids = model.row_ids("a");
        assert_eq!(ids.len(), 4);
        for (i, &id) in ids.iter().enumerate() {
            model.input_vectors.row_mut(id)[0] += (i + 1) as f64; // may collide; accumulate
        }
        let expected0: f64 = model.row_ids("a").iter().map(|&id| model.input_vectors.row(id)[0]).sum::<f64>() / 4.0;
        let v = model.token_vector("a");
        assert!((v[0] - expected0).abs() < 1e-12);
    }

    #[test]
    fn oov_token_same_surface_same_vector() {
        let corpus = vec![seq(&["alpha", "beta"]); 4];
        let (model, _) = train_skipgram(&corpus, &tiny_config()).unwrap();
        // An out-of-vocabulary token uses n-gram buckets only; hashing is
        // deterministic, so the same surface form always lands on the same rows.
        let a = model.token_vector("gamma");
        let b = model.token_vector("gamma");
        assert_eq!(a, b);
    }

    #[test]
    fn init_loss_is_ln2_per_prediction() {
        let mut vocab = Vocab::default();
        vocab.add("a");
        vocab.add("b");
        let model = EmbeddingModel::init(vocab, tiny_config()).unwrap();
        let rows = model.row_ids("a");
        let (loss, _, _) = pair_gradients(
            &model.input_vectors,
            &model.output_vectors,
            &rows,
            1,
            &[0, 0],
            model.config.dim,
        );
        let expected = 3.0 * std::f64::consts::LN_2;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn repeated_pair_scores_high_after_training() {
        let corpus: Vec<TokenSequence> = (0..500).map(|_| seq(&["A", "B"])).collect();
        let (model, losses) = train_skipgram(&corpus, &tiny_config()).unwrap();
        let h = model.token_vector("A");
        let b = model.vocab.id("B").unwrap();
        let score = sigmoid(dot(model.output_vectors.row(b), &h));
        assert!(score > 0.9, "score {score}");
        assert!(losses[4] < std::f64::consts::LN_2, "loss {:?}", losses);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses[4] < losses[0]);
    }

    #[test]
    fn doc_vector_mean_identities() {
        let corpus = vec![seq(&["alpha", "beta", "gamma"])];
        let (model, _) = train_skipgram(&corpus, &tiny_config()).unwrap();
        // Mean of one token is that token's vector.
        let single = model.doc_vector(&["alpha".to_string()]).unwrap();
        assert_eq!(single, model.token_vector("alpha"));
        // Permutations pool identically.
        let fwd = model
            .doc_vector(&["alpha".to_string(), "beta".to_string(), "gamma".to_string()])
            .unwrap();
        let rev = model
            .doc_vector(&["gamma".to_string(), "beta".to_string(), "alpha".to_string()])
            .unwrap();
        for (a, b) in fwd.iter().zip(&rev) {
            assert!((a - b).abs() < 1e-12);
        }
        // Opposite vectors cancel: force two tokens onto opposite rows.
        let mut rigged = model.clone();
        rigged.input_vectors.fill(0.0);
        let a_rows = rigged.row_ids("alpha");
        let b_rows = rigged.row_ids("beta");
        for &r in &a_rows {
            rigged.input_vectors.row_mut(r)[0] += 1.0;
        }
        for &r in &b_rows {
            rigged.input_vectors.row_mut(r)[0] -= 1.0;
        }
        // token vectors are now +k and -k in dim 0 for some shared magnitude
        let va = rigged.token_vector("alpha");
        let vb = rigged.token_vector("beta");
        assert!((va[0] + vb[0]).abs() < 1e-12);
        let doc = rigged
            .doc_vector(&["alpha".to_string(), "beta".to_string()])
            .unwrap();
        assert!(doc[0].abs() < 1e-12);
        assert_eq!(
            rigged.doc_vector(&[]).unwrap_err(),
            EmbedError::EmptySequence
        );
    }

    #[test]
    fn zero_epochs_equals_init() {
        let corpus = vec![seq(&["x", "y", "z"])];
        let cfg = SubwordConfig {
            epochs: 0,
            ..tiny_config()
        };
        let (trained, losses) = train_skipgram(&corpus, &cfg).unwrap();
        assert!(losses.is_empty());
        let fresh = EmbeddingModel::init(Vocab::from_corpus(&corpus), cfg).unwrap();
        assert_eq!(trained.input_vectors, fresh.input_vectors);
        assert_eq!(trained.output_vectors, fresh.output_vectors);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec![seq(&["a", "b", "c", "a", "b"]), seq(&["c", "c", "a"])];
        let (m1, l1) = train_skipgram(&corpus, &tiny_config()).unwrap();
        let (m2, l2) = train_skipgram(&corpus, &tiny_config()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.input_vectors, m2.input_vectors);
        assert_eq!(m1.output_vectors, m2.output_vectors);
        assert_eq!(save_vec(&m1), save_vec(&m2));
        assert_eq!(save_buckets(&m1), save_buckets(&m2));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert_eq!(
            train_skipgram(&[], &tiny_config()).unwrap_err(),
            EmbedError::EmptyCorpus
        );
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // index loops mirror the math
    fn skipgram_gradients_match_finite_differences() {
        let mut vocab = Vocab::default();
        vocab.add("aa");
        vocab.add("bb");
        let cfg = SubwordConfig {
            buckets: 16,
            dim: 2,
            minn: 2,
            maxn: 2,
            seed: 11,
            ..tiny_config()
        };
        let mut model = EmbeddingModel::init(vocab, cfg).unwrap();
        // Give output rows nonzero values so gradients are informative.
        let mut r = Rng::new(99);
        for v in model.output_vectors.as_mut_slice() {
            *v = r.range_f64(-0.5, 0.5);
        }
        let center_rows = model.row_ids("aa");
        let ctx = 1;
        let negs = [0usize];
        let dim = cfg.dim;

        let loss_fn = |input: &Mat, output: &Mat| {
            pair_gradients(input, output, &center_rows, ctx, &negs, dim).0
        };
        let (_, grad_h, out_grads) = pair_gradients(
            &model.input_vectors,
            &model.output_vectors,
            &center_rows,
            ctx,
            &negs,
            dim,
        );

        let h = 1e-5;
        // Input rows: analytic gradient of row r is grad_h / n_rows.
        let n_rows = center_rows.len() as f64;
        for &row in &center_rows {
            for d in 0..dim {
                let mut plus = model.input_vectors.clone();
                plus.row_mut(row)[d] += h;
                let mut minus = model.input_vectors.clone();
                minus.row_mut(row)[d] -= h;
                let fd =
                    (loss_fn(&plus, &model.output_vectors) - loss_fn(&minus, &model.output_vectors))
                        / (2.0 * h);
                // Duplicate bucket collisions would double-count; row_ids for a
                // 2-char token are distinct here.
                let analytic = grad_h[d] / n_rows;
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "input row {row} dim {d}: {analytic} vs {fd}"
                );
            }
        }
        // Output rows.
        for (row, g) in &out_grads {
            for d in 0..dim {
                let mut plus = model.output_vectors.clone();
                plus.row_mut(*row)[d] += h;
                let mut minus = model.output_vectors.clone();
                minus.row_mut(*row)[d] -= h;
                let fd = (loss_fn(&model.input_vectors, &plus)
                    - loss_fn(&model.input_vectors, &minus))
                    / (2.0 * h);
                let denom: f64 = g[d].abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((g[d] - fd) / denom).abs() < 1e-4,
                    "output row {row} dim {d}: {} vs {fd}",
                    g[d]
                );
            }
        }
    }

    #[test]
    fn vec_round_trip_within_1e6() {
        let corpus = vec![seq(&["tok1", "tok2", "tok3"])];
        let cfg = SubwordConfig {
            buckets: 64,
            ..tiny_config()
        };
        let (model, _) = train_skipgram(&corpus, &cfg).unwrap();
        let text = save_vec(&model);
        assert_eq!(text.lines().count(), 1 + model.vocab.len());
        let table = load_vec(&text).unwrap();
        assert_eq!(table.dim, cfg.dim);
        for (i, (token, values)) in table.entries.iter().enumerate() {
            assert_eq!(token, model.vocab.token(i));
            for (a, b) in values.iter().zip(model.input_vectors.row(i)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
        let buckets = save_buckets(&model);
        let restored = assemble_model(table, load_buckets(&buckets).unwrap(), cfg).unwrap();
        // Token vectors survive the f32 sidecar round trip approximately.
        for tok in ["tok1", "unseen"] {
            let a = model.token_vector(tok);
            let b = restored.token_vector(tok);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6, "{tok}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn vec_arity_mismatch_rejected() {
        let text = "2 3\na 0.1 0.2 0.3\nb 0.1 0.2 0.3 0.4\n";
        assert!(matches!(load_vec(text), Err(EmbedError::Format(_))));
    }

    #[test]
    fn bucket_header_rejected_on_bad_magic() {
        assert!(load_buckets(b"NOPE").is_err());
        assert!(load_buckets(b"FTBK\x01\x00\x00\x00\x02\x00\x00\x00\x00\x00\x00\x00").is_err());
    }
}
