//! Dataset splitting, classification metrics, the synthetic corpus
//! generator, and the token-mode ablation runner.
//!
//! The generator builds benign dumps from ordinary script statements (echo,
//! assign, concat, function calls, includes) and malicious dumps by
//! inserting attack motifs (decode-and-execute chains around Base64
//! payloads) at random positions inside otherwise benign streams. Both
//! classes draw on the same opcode vocabulary, so opcode-only token
//! sequences carry little class signal; the discriminative content lives in
//! the operands (callable names, high-entropy payload placeholders).

use thiserror::Error;

use crate::classifier::{self, ClassifierError, EpochStats, TrainConfig, TrainedModel};
use crate::embed::{train_skipgram, EmbedError, SubwordConfig};
use crate::encoder::EncoderConfig;
use crate::opdump::{FunctionUnit, OpLine, OpcodeDump, Operand, OperandKind, MAIN_FN};
use crate::rng::Rng;
use crate::tokens::{
    extract_sequence, DecodePolicy, FilterRules, Label, NormalizePolicy, TokenError, TokenMode,
    TokenSequence,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum HarnessError {
    #[error("too few samples ({0}); need at least 3")]
    TooFewSamples(usize),
    #[error("prediction/truth length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("stratified split requires both classes")]
    MissingClass,
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Confusion counts and derived ratios; positive class is Webshell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let total = (tp + fp + tn + fn_) as f64;
        let accuracy = if total == 0.0 {
            0.0
        } else {
            (tp + tn) as f64 / total
        };
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            tn,
            fn_,
            accuracy,
            precision,
            recall,
            f1,
        }
    }
}

pub fn compute_metrics(predicted: &[Label], truth: &[Label]) -> Result<Metrics, HarnessError> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(HarnessError::LengthMismatch(predicted.len(), truth.len()));
    }
    let mut counts = [0usize; 4]; // tp, fp, tn, fn
    for (&p, &t) in predicted.iter().zip(truth) {
        let slot = match (p, t) {
            (Label::Webshell, Label::Webshell) => 0,
            (Label::Webshell, Label::Benign) => 1,
            (Label::Benign, Label::Benign) => 2,
            (Label::Benign, Label::Webshell) => 3,
        };
        counts[slot] += 1;
    }
    Ok(Metrics::from_counts(counts[0], counts[1], counts[2], counts[3]))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: (0.8, 0.1, 0.1),
            seed: 42,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let (a, b, c) = self.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(HarnessError::InvalidSpec("ratios must be positive".into()));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(HarnessError::InvalidSpec(format!(
                "ratios sum to {}, expected 1",
                a + b + c
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Floor each share, then the split with the largest ratio absorbs the
/// remainder (earliest wins ties).
fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let raw = [ratios.0, ratios.1, ratios.2];
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(raw) {
        *s = (r * n as f64).floor() as usize;
    }
    let assigned: usize = sizes.iter().sum();
    let largest = (0..3)
        .max_by(|&i, &j| raw[i].partial_cmp(&raw[j]).unwrap().then(j.cmp(&i)))
        .unwrap();
    sizes[largest] += n - assigned;
    (sizes[0], sizes[1], sizes[2])
}

/// Deterministic seeded shuffle, then partition. Stratified mode applies the
/// size rule per class, keeping class ratios within one sample per split.
pub fn split_dataset<T>(
    samples: Vec<T>,
    spec: &SplitSpec,
    label_of: impl Fn(&T) -> Option<Label>,
) -> Result<Split<T>, HarnessError> {
    spec.validate()?;
    let n = samples.len();
    if n < 3 {
        return Err(HarnessError::TooFewSamples(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut order);

    let partitions: Vec<Vec<usize>> = if spec.stratified {
        let mut benign = Vec::new();
        let mut shells = Vec::new();
        for &i in &order {
            match label_of(&samples[i]) {
                Some(Label::Benign) => benign.push(i),
                Some(Label::Webshell) => shells.push(i),
                None => return Err(HarnessError::MissingClass),
            }
        }
        if benign.is_empty() || shells.is_empty() {
            return Err(HarnessError::MissingClass);
        }
        let mut parts = vec![Vec::new(), Vec::new(), Vec::new()];
        for class in [benign, shells] {
            let (a, b, _c) = split_sizes(class.len(), spec.ratios);
            parts[0].extend_from_slice(&class[..a]);
            parts[1].extend_from_slice(&class[a..a + b]);
            parts[2].extend_from_slice(&class[a + b..]);
        }
        parts
    } else {
        let (a, b, _c) = split_sizes(n, spec.ratios);
        vec![
            order[..a].to_vec(),
            order[a..a + b].to_vec(),
            order[a + b..].to_vec(),
        ]
    };

    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut take = |idxs: &[usize]| -> Vec<T> {
        idxs.iter()
            .map(|&i| slots[i].take().expect("disjoint partitions"))
            .collect()
    };
    Ok(Split {
        train: take(&partitions[0]),
        val: take(&partitions[1]),
        test: take(&partitions[2]),
    })
}

// ---------------------------------------------------------------------------
// Synthetic corpus generator
// ---------------------------------------------------------------------------

const WORDS: &[&str] = &[
    "home", "title", "user", "page", "content", "footer", "header", "menu", "link", "image",
    "table", "row", "column", "value", "name", "email", "date", "time", "count", "total",
    "price", "item", "cart", "order", "status", "message", "error", "notice", "label", "field",
    "form", "input", "button", "submit", "search", "result", "list", "entry", "post", "comment",
    "author", "category", "tag", "archive", "profile", "session", "login", "logout", "welcome",
    "settings", "options", "theme", "style", "width", "height", "color", "border", "margin",
    "padding", "visible", "hidden", "active", "default",
];

const BENIGN_FNS: &[&str] = &[
    "strlen",
    "htmlspecialchars",
    "trim",
    "strtolower",
    "date",
    "implode",
    "explode",
    "sprintf",
    "str_replace",
    "count",
    "file_exists",
    "json_encode",
    "array_merge",
    "number_format",
    "ucfirst",
    "nl2br",
];

const INCLUDE_FILES: &[&str] = &[
    "header.php",
    "footer.php",
    "config.php",
    "functions.php",
    "db.php",
];

const SHELL_FNS: &[&str] = &["system", "exec", "shell_exec", "passthru"];

fn cs(s: impl Into<String>) -> Operand {
    Operand::const_string(s)
}

fn cvar(n: u32) -> Operand {
    Operand {
        kind: OperandKind::CompiledVar,
        raw: format!("!{n}"),
    }
}

fn tvar(n: u32) -> Operand {
    Operand {
        kind: OperandKind::TempVar,
        raw: format!("~{n}"),
    }
}

struct StmtBuilder {
    ops: Vec<(String, Vec<Operand>, Option<Operand>)>,
}

impl StmtBuilder {
    fn new() -> Self {
        StmtBuilder { ops: Vec::new() }
    }

    fn op(mut self, opcode: &str, operands: Vec<Operand>, result: Option<Operand>) -> Self {
        self.ops.push((opcode.to_string(), operands, result));
        self
    }
}

struct Gen {
    rng: Rng,
    next_cv: u32,
    next_tv: u32,
}

impl Gen {
    fn new(rng: Rng) -> Self {
        Gen {
            rng,
            next_cv: 0,
            next_tv: 0,
        }
    }

    fn word(&mut self) -> String {
        self.rng.pick(WORDS).to_string()
    }

    fn phrase(&mut self, n: usize) -> String {
        (0..n)
            .map(|_| self.rng.pick(WORDS).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn cv(&mut self) -> u32 {
        let v = self.next_cv % 10;
        self.next_cv += 1;
        v
    }

    fn tv(&mut self) -> u32 {
        let v = self.next_tv;
        self.next_tv += 1;
        v
    }

    /// Random printable payload, Base64-encoded. Decoded length > 64 chars of
    /// near-uniform printable ASCII, so it detects as Base64 and normalizes
    /// to the high-entropy placeholder.
    fn payload(&mut self) -> String {
        use base64::engine::general_purpose::STANDARD;
        use base64::Engine;
        let len = self.rng.range_usize(66, 150);
        let bytes: Vec<u8> = (0..len)
            .map(|_| 0x21 + self.rng.below(0x5e) as u8) // '!'..='~'
            .collect();
        STANDARD.encode(bytes)
    }

    fn benign_statement(&mut self) -> StmtBuilder {
        let roll = self.rng.next_f64();
        if roll < 0.18 {
            // echo, occasionally a long low-key sentence
            let text = if self.rng.chance(0.08) {
                self.phrase(14)
            } else {
                let n = self.rng.range_usize(1, 3);
                self.phrase(n)
            };
            StmtBuilder::new().op("ECHO", vec![cs(text)], None)
        } else if roll < 0.34 {
            StmtBuilder::new().op("ASSIGN", vec![cvar(self.cv()), cs(self.word())], None)
        } else if roll < 0.40 {
            let n = self.rng.range_usize(0, 9999).to_string();
            StmtBuilder::new().op("ASSIGN", vec![cvar(self.cv()), Operand::number(n)], None)
        } else if roll < 0.52 {
            let t = self.tv();
            StmtBuilder::new()
                .op(
                    "CONCAT",
                    vec![cvar(self.cv()), cs(self.word())],
                    Some(tvar(t)),
                )
                .op("ECHO", vec![tvar(t)], None)
        } else if roll < 0.74 {
            // plain builtin call
            let t = self.tv();
            let mut b = StmtBuilder::new().op(
                "INIT_FCALL",
                vec![cs(self.rng.pick(BENIGN_FNS).to_string())],
                None,
            );
            let args = self.rng.range_usize(1, 2);
            for _ in 0..args {
                if self.rng.chance(0.5) {
                    b = b.op("SEND_VAL", vec![cs(self.word())], None);
                } else {
                    b = b.op("SEND_VAR", vec![cvar(self.cv())], None);
                }
            }
            b.op("DO_ICALL", vec![], Some(tvar(t)))
        } else if roll < 0.82 {
            // dynamic call through a variable holding a callable name
            let v = self.cv();
            let t = self.tv();
            StmtBuilder::new()
                .op(
                    "ASSIGN",
                    vec![cvar(v), cs(self.rng.pick(BENIGN_FNS).to_string())],
                    None,
                )
                .op("INIT_DYNAMIC_CALL", vec![cvar(v)], None)
                .op("SEND_VAL", vec![cs(self.word())], None)
                .op("DO_FCALL", vec![], Some(tvar(t)))
        } else if roll < 0.88 {
            // late-bound user function
            let t = self.tv();
            StmtBuilder::new()
                .op(
                    "INIT_FCALL_BY_NAME",
                    vec![cs(format!("{}_{}", self.word(), self.word()))],
                    None,
                )
                .op("SEND_VAL", vec![cs(self.word())], None)
                .op("DO_FCALL", vec![], Some(tvar(t)))
        } else if roll < 0.92 {
            StmtBuilder::new().op(
                "INCLUDE_OR_EVAL",
                vec![cs(self.rng.pick(INCLUDE_FILES).to_string())],
                None,
            )
        } else if roll < 0.97 {
            let t1 = self.tv();
            let t2 = self.tv();
            StmtBuilder::new()
                .op("ROPE_INIT", vec![cs(self.word())], Some(tvar(t1)))
                .op("ROPE_ADD", vec![tvar(t1), cs(self.word())], Some(tvar(t1)))
                .op("ROPE_END", vec![tvar(t1), cs(self.word())], Some(tvar(t2)))
        } else {
            let t = self.tv();
            StmtBuilder::new()
                .op("FETCH_R", vec![cs(self.word())], Some(tvar(t)))
                .op("ECHO", vec![tvar(t)], None)
        }
    }

    fn malicious_motif(&mut self) -> StmtBuilder {
        let payload = self.payload();
        match self.rng.below(4) {
            0 => {
                // stash payload, decode, execute result as a callable
                let v = self.cv();
                let t = self.tv();
                let u = self.tv();
                StmtBuilder::new()
                    .op("ASSIGN", vec![cvar(v), cs(payload)], None)
                    .op("INIT_FCALL", vec![cs("base64_decode")], None)
                    .op("SEND_VAR", vec![cvar(v)], None)
                    .op("DO_ICALL", vec![], Some(tvar(t)))
                    .op("INIT_DYNAMIC_CALL", vec![tvar(t)], None)
                    .op("SEND_VAR", vec![cvar(self.cv())], None)
                    .op("DO_FCALL", vec![], Some(tvar(u)))
            }
            1 => {
                // decode straight into an eval-style include
                let t = self.tv();
                StmtBuilder::new()
                    .op("INIT_FCALL", vec![cs("base64_decode")], None)
                    .op("SEND_VAL", vec![cs(payload)], None)
                    .op("DO_ICALL", vec![], Some(tvar(t)))
                    .op("INCLUDE_OR_EVAL", vec![tvar(t)], None)
            }
            2 => {
                let t = self.tv();
                StmtBuilder::new()
                    .op(
                        "INIT_FCALL",
                        vec![cs(self.rng.pick(SHELL_FNS).to_string())],
                        None,
                    )
                    .op("SEND_VAL", vec![cs(payload)], None)
                    .op("DO_ICALL", vec![], Some(tvar(t)))
            }
            _ => {
                let t = self.tv();
                StmtBuilder::new()
                    .op("INIT_FCALL_BY_NAME", vec![cs("assert")], None)
                    .op("SEND_VAL", vec![cs(payload)], None)
                    .op("DO_FCALL", vec![], Some(tvar(t)))
            }
        }
    }

    /// Target instruction count, log-uniform in [20, 400].
    fn target_len(&mut self) -> usize {
        let u = self.rng.next_f64();
        (20.0 * (400.0f64 / 20.0).powf(u)).round() as usize
    }
}

fn assemble(statements: Vec<StmtBuilder>) -> OpcodeDump {
    let mut ops = Vec::new();
    let mut op_index = 0u32;
    for (stmt_no, stmt) in statements.into_iter().enumerate() {
        let src_line = stmt_no as u32 + 1;
        for (opcode, operands, result) in stmt.ops {
            ops.push(OpLine {
                src_line,
                op_index,
                opcode,
                operands,
                result,
            });
            op_index += 1;
        }
    }
    OpcodeDump {
        version: 1,
        functions: vec![FunctionUnit {
            name: MAIN_FN.to_string(),
            ops,
        }],
    }
}

fn gen_one(seed: u64, class: Label, index: usize) -> OpcodeDump {
    let tag = ((class.as_int() as u64) << 32) | index as u64;
    let mut g = Gen::new(Rng::new(seed).derive(tag));
    let target = g.target_len();
    let mut statements = Vec::new();
    let mut op_count = 0usize;
    while op_count < target {
        let stmt = g.benign_statement();
        op_count += stmt.ops.len();
        statements.push(stmt);
    }
    if class == Label::Webshell {
        let motifs = 1 + target / 90;
        for _ in 0..motifs {
            let motif = g.malicious_motif();
            let pos = g.rng.below(statements.len() + 1);
            statements.insert(pos, motif);
        }
    }
    assemble(statements)
}

/// Deterministic synthetic corpus: benign dumps first, then malicious, each
/// derived independently from (seed, class, index).
pub fn gen_corpus(seed: u64, n_benign: usize, n_malicious: usize) -> Vec<(OpcodeDump, Label)> {
    let mut out = Vec::with_capacity(n_benign + n_malicious);
    for i in 0..n_benign {
        out.push((gen_one(seed, Label::Benign, i), Label::Benign));
    }
    for i in 0..n_malicious {
        out.push((gen_one(seed, Label::Webshell, i), Label::Webshell));
    }
    out
}

// ---------------------------------------------------------------------------
// Pipeline and ablation
// ---------------------------------------------------------------------------

/// Everything the corpus-to-metrics pipeline needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub filter: FilterRules,
    pub decode: DecodePolicy,
    pub normalize: NormalizePolicy,
    pub split: SplitSpec,
    pub embed: SubwordConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            filter: FilterRules::default(),
            decode: DecodePolicy::default(),
            normalize: NormalizePolicy::default(),
            split: SplitSpec::default(),
            embed: SubwordConfig::default(),
            encoder: EncoderConfig::with_vocab(1),
            train: TrainConfig::default(),
        }
    }
}

pub struct PipelineOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochStats>,
    pub embed_losses: Vec<f64>,
    pub test_metrics: Metrics,
    pub counts: (usize, usize, usize),
}

/// Extract token sequences for `mode`, split, train the embedder on the
/// train split, train the classifier, and score the held-out test split.
pub fn run_pipeline(
    corpus: &[(OpcodeDump, Label)],
    mode: TokenMode,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    let sequences = extract_corpus(corpus, mode, cfg)?;
    run_pipeline_sequences(sequences, cfg)
}

/// Extraction half of [`run_pipeline`]; files whose instructions are all
/// filtered away are dropped.
pub fn extract_corpus(
    corpus: &[(OpcodeDump, Label)],
    mode: TokenMode,
    cfg: &PipelineConfig,
) -> Result<Vec<TokenSequence>, PipelineError> {
    let mut sequences = Vec::with_capacity(corpus.len());
    for (i, (dump, label)) in corpus.iter().enumerate() {
        match extract_sequence(
            dump,
            &cfg.filter,
            &cfg.decode,
            &cfg.normalize,
            mode,
            format!("doc{i:05}"),
            Some(*label),
        ) {
            Ok(seq) => sequences.push(seq),
            Err(TokenError::EmptySequence) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(sequences)
}

/// Training half of [`run_pipeline`], starting from extracted sequences.
pub fn run_pipeline_sequences(
    sequences: Vec<TokenSequence>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    let split = split_dataset(sequences, &cfg.split, |s| s.label)?;
    let counts = (split.train.len(), split.val.len(), split.test.len());

    let (embed_model, embed_losses) = train_skipgram(&split.train, &cfg.embed)?;
    let (model, history) =
        classifier::train(&split.train, &split.val, &embed_model, &cfg.encoder, &cfg.train)?;

    let test_metrics = score(&model, &split.test)?;
    Ok(PipelineOutcome {
        model,
        history,
        embed_losses,
        test_metrics,
        counts,
    })
}

/// Predict every sample and compare against its label.
pub fn score(model: &TrainedModel, samples: &[TokenSequence]) -> Result<Metrics, PipelineError> {
    let mut predicted = Vec::with_capacity(samples.len());
    let mut truth = Vec::with_capacity(samples.len());
    for s in samples {
        predicted.push(model.predict(&s.tokens)?.label);
        truth.push(
            s.label
                .ok_or_else(|| ClassifierError::MissingLabel(s.source_id.clone()))?,
        );
    }
    Ok(compute_metrics(&predicted, &truth)?)
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub mode_a: TokenMode,
    pub metrics_a: Metrics,
    pub mode_b: TokenMode,
    pub metrics_b: Metrics,
    pub accuracy_delta: f64,
    /// Set when the two "modes" were the same configuration.
    pub identical_modes: bool,
}

/// Train two models identical except for the extraction mode and report both
/// metric sets. Identical modes short-circuit into a zero delta plus a
/// warning flag.
pub fn run_ablation(
    corpus: &[(OpcodeDump, Label)],
    cfg: &PipelineConfig,
    mode_a: TokenMode,
    mode_b: TokenMode,
) -> Result<AblationReport, PipelineError> {
    let outcome_a = run_pipeline(corpus, mode_a, cfg)?;
    let metrics_b = if mode_a == mode_b {
        outcome_a.test_metrics
    } else {
        run_pipeline(corpus, mode_b, cfg)?.test_metrics
    };
    let metrics_a = outcome_a.test_metrics;
    Ok(AblationReport {
        mode_a,
        metrics_a,
        mode_b,
        metrics_b,
        accuracy_delta: metrics_a.accuracy - metrics_b.accuracy,
        identical_modes: mode_a == mode_b,
    })
}

/// `mode,accuracy,precision,recall,f1` rows for a report.
pub fn ablation_csv(report: &AblationReport) -> String {
    let row = |mode: TokenMode, m: &Metrics| {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            mode.as_str(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        )
    };
    let mut out = String::from("mode,accuracy,precision,recall,f1\n");
    out.push_str(&row(report.mode_a, &report.metrics_a));
    out.push_str(&row(report.mode_b, &report.metrics_b));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opdump::serialize_dump;
    use crate::tokens::detect_encoding;

    #[test]
    fn metrics_arithmetic() {
        let m = Metrics::from_counts(8, 2, 8, 2);
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.precision, 0.8);
        assert_eq!(m.recall, 0.8);
        assert!((m.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn metrics_perfect_and_degenerate() {
        let preds = vec![Label::Webshell, Label::Benign, Label::Webshell];
        let m = compute_metrics(&preds, &preds).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        // No true positives: precision, recall, f1 all zero.
        let m = Metrics::from_counts(0, 3, 5, 2);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn metrics_match_brute_force_recount() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let n = rng.range_usize(1, 60);
            let pred: Vec<Label> = (0..n)
                .map(|_| if rng.chance(0.5) { Label::Webshell } else { Label::Benign })
                .collect();
            let truth: Vec<Label> = (0..n)
                .map(|_| if rng.chance(0.5) { Label::Webshell } else { Label::Benign })
                .collect();
            let m = compute_metrics(&pred, &truth).unwrap();
            // Independent recount.
            let tp = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == Label::Webshell && **t == Label::Webshell)
                .count();
            let fp = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == Label::Webshell && **t == Label::Benign)
                .count();
            let tn = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == Label::Benign && **t == Label::Benign)
                .count();
            let fn_ = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == Label::Benign && **t == Label::Webshell)
                .count();
            assert_eq!((m.tp, m.fp, m.tn, m.fn_), (tp, fp, tn, fn_));
            assert_eq!(m.tp + m.fp + m.tn + m.fn_, n);
        }
    }

    #[test]
    fn metrics_length_mismatch() {
        assert!(compute_metrics(&[Label::Benign], &[]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)), (8, 1, 1));
        assert_eq!(split_sizes(6, (0.5, 0.25, 0.25)), (4, 1, 1));
        assert_eq!(split_sizes(3, (0.8, 0.1, 0.1)), (3, 0, 0));
    }

    fn labeled_items(n_benign: usize, n_shell: usize) -> Vec<(usize, Label)> {
        let mut v: Vec<(usize, Label)> = (0..n_benign).map(|i| (i, Label::Benign)).collect();
        v.extend((0..n_shell).map(|i| (n_benign + i, Label::Webshell)));
        v
    }

    #[test]
    fn split_deterministic_disjoint_exhaustive() {
        let spec = SplitSpec::default();
        let items = labeled_items(40, 40);
        let s1 = split_dataset(items.clone(), &spec, |x| Some(x.1)).unwrap();
        let s2 = split_dataset(items.clone(), &spec, |x| Some(x.1)).unwrap();
        assert_eq!(s1, s2);
        let mut all: Vec<usize> = s1
            .train
            .iter()
            .chain(&s1.val)
            .chain(&s1.test)
            .map(|x| x.0)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..80).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_six_six_quarter_split() {
        let spec = SplitSpec {
            ratios: (0.5, 0.25, 0.25),
            seed: 9,
            stratified: true,
        };
        let s = split_dataset(labeled_items(6, 6), &spec, |x| Some(x.1)).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let benign = part.iter().filter(|x| x.1 == Label::Benign).count();
            let shell = part.iter().filter(|x| x.1 == Label::Webshell).count();
            assert_eq!(benign, shell, "unbalanced part");
        }
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn split_guards() {
        let spec = SplitSpec::default();
        assert_eq!(
            split_dataset(labeled_items(1, 1), &spec, |x| Some(x.1)).unwrap_err(),
            HarnessError::TooFewSamples(2)
        );
        assert_eq!(
            split_dataset(labeled_items(5, 0), &spec, |x| Some(x.1)).unwrap_err(),
            HarnessError::MissingClass
        );
        let bad = SplitSpec {
            ratios: (0.5, 0.5, 0.5),
            ..spec
        };
        assert!(split_dataset(labeled_items(5, 5), &bad, |x| Some(x.1)).is_err());
    }

    #[test]
    fn gen_corpus_is_deterministic() {
        let a = gen_corpus(7, 3, 3);
        let b = gen_corpus(7, 3, 3);
        assert_eq!(a.len(), 6);
        for ((da, la), (db, lb)) in a.iter().zip(&b) {
            assert_eq!(la, lb);
            assert_eq!(serialize_dump(da), serialize_dump(db));
        }
    }

    #[test]
    fn gen_corpus_counts_and_validity() {
        let corpus = gen_corpus(42, 5, 4);
        assert_eq!(
            corpus.iter().filter(|(_, l)| *l == Label::Benign).count(),
            5
        );
        assert_eq!(
            corpus.iter().filter(|(_, l)| *l == Label::Webshell).count(),
            4
        );
        for (dump, _) in &corpus {
            assert!(dump.validate().is_ok());
            let n = dump.op_count();
            assert!(n >= 20, "dump too short: {n}");
        }
    }

    #[test]
    fn every_malicious_dump_has_base64_operand() {
        let policy = DecodePolicy::default();
        let corpus = gen_corpus(13, 2, 20);
        for (dump, label) in &corpus {
            if *label != Label::Webshell {
                continue;
            }
            let found = dump.all_ops().any(|op| {
                op.operands.iter().any(|o| {
                    o.kind == OperandKind::ConstString
                        && detect_encoding(&o.raw, &policy) == crate::tokens::Encoding::Base64
                })
            });
            assert!(found, "malicious dump without base64 payload");
        }
    }

    #[test]
    fn benign_long_strings_never_bucket_high() {
        let np = NormalizePolicy::default();
        let dp = DecodePolicy::default();
        let corpus = gen_corpus(99, 30, 0);
        for (dump, _) in &corpus {
            for op in dump.all_ops() {
                for operand in &op.operands {
                    if operand.kind == OperandKind::ConstString {
                        if let Some(tok) =
                            crate::tokens::normalize_operand(operand, &dp, &np)
                        {
                            assert_ne!(tok, "<str:H>", "benign operand bucketed high: {:?}", operand.raw);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn class_opcode_distributions_overlap_at_default_scale() {
        // Overlap = 1 - total variation distance between the two classes'
        // opcode unigram distributions; the generator is built so opcode-only
        // sequences carry little signal.
        let corpus = gen_corpus(42, 500, 500);
        let mut counts: [std::collections::HashMap<&str, f64>; 2] = Default::default();
        let mut totals = [0.0f64; 2];
        for (dump, label) in &corpus {
            let slot = label.as_int() as usize;
            for op in dump.all_ops() {
                *counts[slot].entry(op.opcode.as_str()).or_insert(0.0) += 1.0;
                totals[slot] += 1.0;
            }
        }
        let mut tv = 0.0;
        let keys: std::collections::HashSet<&str> =
            counts[0].keys().chain(counts[1].keys()).copied().collect();
        for k in keys {
            let p = counts[0].get(k).copied().unwrap_or(0.0) / totals[0];
            let q = counts[1].get(k).copied().unwrap_or(0.0) / totals[1];
            tv += (p - q).abs();
        }
        tv /= 2.0;
        assert!(
            1.0 - tv >= 0.8,
            "opcode distribution overlap {:.3} below 0.8",
            1.0 - tv
        );
    }

    #[test]
    fn ablation_empty_corpus_propagates_error() {
        let cfg = tiny_pipeline_config();
        let err = run_ablation(&[], &cfg, TokenMode::Odt, TokenMode::Ost).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Harness(HarnessError::TooFewSamples(0))
        ));
    }

    #[test]
    fn ablation_identical_modes_warns_with_zero_delta() {
        let corpus = gen_corpus(3, 12, 12);
        let cfg = tiny_pipeline_config();
        let report = run_ablation(&corpus, &cfg, TokenMode::Ost, TokenMode::Ost).unwrap();
        assert!(report.identical_modes);
        assert_eq!(report.accuracy_delta, 0.0);
    }

    fn tiny_pipeline_config() -> PipelineConfig {
        PipelineConfig {
            embed: SubwordConfig {
                dim: 8,
                buckets: 512,
                epochs: 1,
                ..Default::default()
            },
            encoder: EncoderConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                ff_dim: 16,
                window: 16,
                stride: 8,
                dropout: 0.0,
                ..EncoderConfig::with_vocab(1)
            },
            train: TrainConfig {
                epochs: 1,
                batch: 8,
                head_hidden: 8,
                ..Default::default()
            },
            split: SplitSpec {
                ratios: (0.6, 0.2, 0.2),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_smoke() {
        let corpus = gen_corpus(5, 15, 15);
        let cfg = tiny_pipeline_config();
        let out = run_pipeline(&corpus, TokenMode::Odt, &cfg).unwrap();
        assert_eq!(out.counts.0 + out.counts.1 + out.counts.2, 30);
        assert_eq!(out.history.len(), 1);
        assert!(out.test_metrics.accuracy >= 0.0);
        let total = out.test_metrics.tp + out.test_metrics.fp + out.test_metrics.tn + out.test_metrics.fn_;
        assert_eq!(total, out.counts.2);
    }

    #[test]
    fn ablation_csv_shape() {
        let m = Metrics::from_counts(3, 1, 4, 2);
        let report = AblationReport {
            mode_a: TokenMode::Odt,
            metrics_a: m,
            mode_b: TokenMode::Ost,
            metrics_b: m,
            accuracy_delta: 0.0,
            identical_modes: false,
        };
        let csv = ablation_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "mode,accuracy,precision,recall,f1");
        assert!(lines[1].starts_with("odt,"));
        assert!(lines[2].starts_with("ost,"));
    }
}
