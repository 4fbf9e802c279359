//! Turns an [`OpcodeDump`] into a token sequence: keep the instructions that
//! matter, decode URL/Base64-obfuscated operands, normalize, tokenize.
//!
//! Two modes: `Odt` emits opcode names plus normalized operand tokens, `Ost`
//! emits opcode names only.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opdump::{OpLine, OpcodeDump, OperandKind, Operand};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Benign,
    Webshell,
}

impl Label {
    pub fn as_int(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Webshell => 1,
        }
    }

    pub fn from_int(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Webshell),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenMode {
    Odt,
    Ost,
}

impl TokenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenMode::Odt => "odt",
            TokenMode::Ost => "ost",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "odt" => Some(TokenMode::Odt),
            "ost" => Some(TokenMode::Ost),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub label: Option<Label>,
    pub source_id: String,
    pub mode: TokenMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultPolicy {
    KeepUnknown,
    DropUnknown,
}

/// Which instructions survive filtering.
#[derive(Debug, Clone)]
pub struct FilterRules {
    pub keep: HashSet<String>,
    pub drop: HashSet<String>,
    pub default_policy: DefaultPolicy,
}

/// Call, eval and string-assembly opcodes carry the attack surface; the drop
/// set is debug padding the Zend engine emits around statements.
pub const DEFAULT_KEEP: &[&str] = &[
    "INCLUDE_OR_EVAL",
    "INIT_FCALL",
    "INIT_FCALL_BY_NAME",
    "INIT_DYNAMIC_CALL",
    "DO_FCALL",
    "DO_ICALL",
    "DO_UCALL",
    "SEND_VAL",
    "SEND_VAR",
    "CONCAT",
    "FAST_CONCAT",
    "ROPE_INIT",
    "ROPE_ADD",
    "ROPE_END",
    "ASSIGN",
    "ASSIGN_DIM",
    "ECHO",
    "EXIT",
    "FETCH_R",
    "FETCH_W",
    "FETCH_DIM_R",
    "BEGIN_SILENCE",
];

pub const DEFAULT_DROP: &[&str] = &[
    "NOP",
    "EXT_STMT",
    "EXT_NOP",
    "EXT_FCALL_BEGIN",
    "EXT_FCALL_END",
    "TICKS",
];

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            keep: DEFAULT_KEEP.iter().map(|s| s.to_string()).collect(),
            drop: DEFAULT_DROP.iter().map(|s| s.to_string()).collect(),
            default_policy: DefaultPolicy::KeepUnknown,
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<(), TokenError> {
        if self.keep.intersection(&self.drop).next().is_some() {
            return Err(TokenError::InvalidRules(
                "keep and drop sets overlap".into(),
            ));
        }
        Ok(())
    }

    fn retains(&self, opcode: &str) -> bool {
        if self.keep.contains(opcode) {
            return true;
        }
        if self.drop.contains(opcode) {
            return false;
        }
        self.default_policy == DefaultPolicy::KeepUnknown
    }
}

/// Limits for the recursive operand decoder. Short strings like "cash" are
/// valid Base64 by charset alone but decode to garbage; the length floor and
/// the printable gate suppress those false decodes.
#[derive(Debug, Clone, Copy)]
pub struct DecodePolicy {
    pub max_depth: usize,
    pub min_b64_len: usize,
    pub printable_ratio: f64,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        DecodePolicy {
            max_depth: 3,
            min_b64_len: 8,
            printable_ratio: 0.9,
        }
    }
}

impl DecodePolicy {
    pub fn validate(&self) -> Result<(), TokenError> {
        if self.max_depth < 1 || self.min_b64_len < 1 {
            return Err(TokenError::InvalidRules("decode limits must be >= 1".into()));
        }
        if !(self.printable_ratio > 0.0 && self.printable_ratio <= 1.0) {
            return Err(TokenError::InvalidRules(
                "printable_ratio must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Normalization cutoffs: operands longer than `max_token_len` collapse into
/// an entropy-bucket placeholder. Long high-entropy blobs are signal even
/// when undecodable.
#[derive(Debug, Clone, Copy)]
pub struct NormalizePolicy {
    pub max_token_len: usize,
    pub entropy_high: f64,
    pub entropy_low: f64,
}

impl Default for NormalizePolicy {
    fn default() -> Self {
        NormalizePolicy {
            max_token_len: 64,
            entropy_high: 5.0,
            entropy_low: 3.0,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TokenError {
    #[error("empty input")]
    EmptyInput,
    #[error("no instructions survived filtering")]
    EmptySequence,
    #[error("invalid rules: {0}")]
    InvalidRules(String),
    #[error("bad jsonl record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Base64,
    UrlEncoded,
    Plain,
}

/// Retained instructions across all functions, dump order preserved.
pub fn filter_ops<'a>(dump: &'a OpcodeDump, rules: &FilterRules) -> Vec<&'a OpLine> {
    dump.all_ops().filter(|op| rules.retains(&op.opcode)).collect()
}

fn is_printable_byte(b: u8) -> bool {
    (0x20..=0x7e).contains(&b) || b == b'\t' || b == b'\n' || b == b'\r'
}

fn is_b64_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'+' || b == b'/'
}

/// Count of `%XX` escapes if every `%` begins one, else None.
fn percent_escapes(s: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut count = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            if i + 2 >= bytes.len()
                || !bytes[i + 1].is_ascii_hexdigit()
                || !bytes[i + 2].is_ascii_hexdigit()
            {
                return None;
            }
            count += 1;
            i += 3;
        } else {
            i += 1;
        }
    }
    Some(count)
}

fn looks_like_b64(s: &str, policy: &DecodePolicy) -> bool {
    if s.len() < policy.min_b64_len || !s.len().is_multiple_of(4) {
        return false;
    }
    let body = s.trim_end_matches('=');
    if s.len() - body.len() > 2 {
        return false;
    }
    !body.is_empty() && body.bytes().all(is_b64_char)
}

fn decode_b64_printable(s: &str, policy: &DecodePolicy) -> Option<Vec<u8>> {
    let bytes = B64.decode(s.as_bytes()).ok()?;
    if bytes.is_empty() {
        return None;
    }
    let printable = bytes.iter().filter(|&&b| is_printable_byte(b)).count();
    if (printable as f64) / (bytes.len() as f64) >= policy.printable_ratio {
        Some(bytes)
    } else {
        None
    }
}

/// Classify a string as URL-encoded, decodable Base64, or plain text.
pub fn detect_encoding(s: &str, policy: &DecodePolicy) -> Encoding {
    if matches!(percent_escapes(s), Some(n) if n >= 1) {
        return Encoding::UrlEncoded;
    }
    if looks_like_b64(s, policy) && decode_b64_printable(s, policy).is_some() {
        return Encoding::Base64;
    }
    Encoding::Plain
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).unwrap_or("");
            if let Ok(b) = u8::from_str_radix(hex, 16) {
                out.push(b);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Recursively decode until the text reads as plain, at most `max_depth`
/// layers. Returns the final text and the number of decode steps taken.
pub fn decode_operand_traced(s: &str, policy: &DecodePolicy) -> (String, usize) {
    let mut cur = s.to_string();
    let mut depth = 0;
    while depth < policy.max_depth {
        match detect_encoding(&cur, policy) {
            Encoding::Plain => break,
            Encoding::UrlEncoded => {
                cur = percent_decode(&cur);
                depth += 1;
            }
            Encoding::Base64 => {
                match decode_b64_printable(&cur, policy) {
                    Some(bytes) => {
                        cur = String::from_utf8_lossy(&bytes).into_owned();
                        depth += 1;
                    }
                    None => break,
                }
            }
        }
    }
    (cur, depth)
}

pub fn decode_operand(s: &str, policy: &DecodePolicy) -> String {
    decode_operand_traced(s, policy).0
}

/// Shannon entropy in bits per character over character frequencies.
pub fn shannon_entropy(s: &str) -> Result<f64, TokenError> {
    if s.is_empty() {
        return Err(TokenError::EmptyInput);
    }
    let mut counts: HashMap<char, usize> = HashMap::new();
    let mut total = 0usize;
    for c in s.chars() {
        *counts.entry(c).or_insert(0) += 1;
        total += 1;
    }
    let total = total as f64;
    let h = counts
        .values()
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Normalized token for one operand, or None for slots that carry no signal.
pub fn normalize_operand(
    op: &Operand,
    decode: &DecodePolicy,
    norm: &NormalizePolicy,
) -> Option<String> {
    match op.kind {
        OperandKind::Unused => None,
        OperandKind::ConstNumber => Some("<num>".to_string()),
        OperandKind::CompiledVar | OperandKind::TempVar | OperandKind::Var => {
            Some("<var>".to_string())
        }
        OperandKind::Name | OperandKind::ConstString => {
            let decoded = decode_operand(&op.raw, decode);
            if decoded.is_empty() {
                return None;
            }
            if decoded.chars().count() > norm.max_token_len {
                let h = shannon_entropy(&decoded).unwrap_or(0.0);
                let bucket = if h > norm.entropy_high {
                    'H'
                } else if h < norm.entropy_low {
                    'L'
                } else {
                    'M'
                };
                return Some(format!("<str:{bucket}>"));
            }
            // Whitespace maps to '_' so tokens stay one-field in the
            // space-delimited vector format.
            let cleaned: String = decoded
                .to_lowercase()
                .chars()
                .map(|c| if c.is_whitespace() { '_' } else { c })
                .collect();
            Some(cleaned)
        }
    }
}

/// Full extraction: filter, then per instruction emit the opcode token and,
/// in Odt mode, every present normalized operand token. Result operands are
/// synthetic temporaries and are excluded.
pub fn extract_sequence(
    dump: &OpcodeDump,
    rules: &FilterRules,
    decode: &DecodePolicy,
    norm: &NormalizePolicy,
    mode: TokenMode,
    source_id: impl Into<String>,
    label: Option<Label>,
) -> Result<TokenSequence, TokenError> {
    let kept = filter_ops(dump, rules);
    if kept.is_empty() {
        return Err(TokenError::EmptySequence);
    }
    let mut tokens = Vec::with_capacity(kept.len() * 2);
    for op in kept {
        tokens.push(op.opcode.clone());
        if mode == TokenMode::Odt {
            for operand in &op.operands {
                if let Some(tok) = normalize_operand(operand, decode, norm) {
                    tokens.push(tok);
                }
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        label,
        source_id: source_id.into(),
        mode,
    })
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    source_id: String,
    label: Option<u8>,
    mode: String,
    tokens: Vec<String>,
}

pub fn to_jsonl_line(seq: &TokenSequence) -> String {
    let rec = JsonlRecord {
        source_id: seq.source_id.clone(),
        label: seq.label.map(Label::as_int),
        mode: seq.mode.as_str().to_string(),
        tokens: seq.tokens.clone(),
    };
    serde_json::to_string(&rec).expect("jsonl record serializes")
}

pub fn from_jsonl_line(line: &str) -> Result<TokenSequence, TokenError> {
    let rec: JsonlRecord =
        serde_json::from_str(line).map_err(|e| TokenError::BadRecord(e.to_string()))?;
    let mode = TokenMode::parse(&rec.mode)
        .ok_or_else(|| TokenError::BadRecord(format!("unknown mode {:?}", rec.mode)))?;
    let label = match rec.label {
        None => None,
        Some(v) => Some(
            Label::from_int(v).ok_or_else(|| TokenError::BadRecord(format!("bad label {v}")))?,
        ),
    };
    Ok(TokenSequence {
        tokens: rec.tokens,
        label,
        source_id: rec.source_id,
        mode,
    })
}

pub fn write_jsonl<W: Write>(seqs: &[TokenSequence], mut w: W) -> std::io::Result<()> {
    for seq in seqs {
        writeln!(w, "{}", to_jsonl_line(seq))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TokenSequence>, TokenError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| TokenError::BadRecord(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_jsonl_line(&line)?);
    }
    Ok(out)
}
