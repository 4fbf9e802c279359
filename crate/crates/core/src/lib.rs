//! Detection pipeline for PHP webshells operating on opcode dumps.
//!
//! The pipeline: parse an opcode dump ([`opdump`]), extract a token sequence
//! with deobfuscating operand decoding ([`tokens`]), embed it with a subword
//! skip-gram model ([`embed`]) and a sliding-window-attention encoder
//! ([`encoder`]), fuse the two document vectors and classify
//! ([`classifier`]). [`harness`] supplies dataset splitting, metrics, a
//! synthetic corpus generator and the token-mode ablation runner; [`config`]
//! holds the flat key=value run configuration.

pub mod config;
pub mod embed;
pub mod encoder;
pub mod classifier;
pub mod harness;
pub mod math;
pub mod opdump;
pub mod optim;
pub mod rng;
pub mod tensor_io;
pub mod tokens;

pub use classifier::{ClassifierError, Prediction, TrainConfig, TrainedModel};
pub use config::{ConfigError, RunConfig};
pub use embed::{EmbedError, EmbeddingModel, SubwordConfig};
pub use encoder::{EncoderConfig, EncoderError, EncoderParams, WindowLayout};
pub use harness::{
    gen_corpus, run_ablation, run_pipeline, AblationReport, HarnessError, Metrics,
    PipelineConfig, PipelineError, SplitSpec,
};
pub use opdump::{import_vld, parse_dump, serialize_dump, FormatError, OpcodeDump};
pub use optim::{AdamWHyper, AdamWState};
pub use tokens::{
    extract_sequence, DecodePolicy, FilterRules, Label, NormalizePolicy, TokenError, TokenMode,
    TokenSequence,
};
