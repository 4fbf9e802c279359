//! The canonical opcode-dump text format ("ODUMP v1") and a best-effort
//! importer for VLD-style opcode tables.
//!
//! Format, bit-exact:
//!
//! ```text
//! #odump 1
//! fn (main)
//! <src_line>\t<op_index>\t<OPCODE>\t<op1>|<op2>\t<result>
//! ```
//!
//! One record per instruction, `\n` line endings, UTF-8. The operand field
//! joins 0-2 operand tokens with `|`; an empty token is an explicit unused
//! slot. String constants are single-quoted with `\t`, `\n` and `\\` escapes;
//! quote and pipe characters are not representable inside tokens (the format
//! is line- and field-oriented and keeps no other escaping). The `(main)`
//! function is always emitted first.

use std::fmt;

use thiserror::Error;

/// Surface syntax decides the operand kind: `!` compiled variable, `~`
/// temporary, `$` variable, single quotes string constant, numeric literal
/// constant number, empty unused, anything else a bare name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperandKind {
    ConstString,
    ConstNumber,
    CompiledVar,
    TempVar,
    Var,
    Name,
    Unused,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operand {
    pub kind: OperandKind,
    /// Text exactly as written in the dump; quotes stripped for ConstString,
    /// prefix sigil kept for variables.
    pub raw: String,
}

impl Operand {
    pub fn const_string(s: impl Into<String>) -> Self {
        Operand {
            kind: OperandKind::ConstString,
            raw: s.into(),
        }
    }

    pub fn name(s: impl Into<String>) -> Self {
        Operand {
            kind: OperandKind::Name,
            raw: s.into(),
        }
    }

    pub fn number(s: impl Into<String>) -> Self {
        Operand {
            kind: OperandKind::ConstNumber,
            raw: s.into(),
        }
    }

    pub fn unused() -> Self {
        Operand {
            kind: OperandKind::Unused,
            raw: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpLine {
    pub src_line: u32,
    pub op_index: u32,
    pub opcode: String,
    pub operands: Vec<Operand>,
    pub result: Option<Operand>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionUnit {
    pub name: String,
    pub ops: Vec<OpLine>,
}

pub const MAIN_FN: &str = "(main)";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpcodeDump {
    pub version: u32,
    pub functions: Vec<FunctionUnit>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line {line_no}: {reason}")]
pub struct FormatError {
    pub line_no: usize,
    pub reason: String,
}

impl FormatError {
    fn new(line_no: usize, reason: impl Into<String>) -> Self {
        FormatError {
            line_no,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid dump: {0}")]
pub struct InvalidDump(pub String);

fn is_opcode_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_uppercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

fn is_numeric_literal(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    if body.is_empty() {
        return false;
    }
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int_part, frac_part) = match mantissa.find('.') {
        Some(i) => (&mantissa[..i], Some(&mantissa[i + 1..])),
        None => (mantissa, None),
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int_part) {
        return false;
    }
    if let Some(f) = frac_part {
        if !digits(f) {
            return false;
        }
    }
    if let Some(e) = exponent {
        let e = e.strip_prefix(['+', '-']).unwrap_or(e);
        if !digits(e) {
            return false;
        }
    }
    true
}

fn escape_const(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

fn unescape_const(s: &str, line_no: usize) -> Result<String, FormatError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                other => {
                    return Err(FormatError::new(
                        line_no,
                        format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default()),
                    ))
                }
            }
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

fn parse_token(tok: &str, line_no: usize) -> Result<Operand, FormatError> {
    if tok.is_empty() {
        return Ok(Operand::unused());
    }
    if let Some(rest) = tok.strip_prefix('\'') {
        let inner = rest
            .strip_suffix('\'')
            .ok_or_else(|| FormatError::new(line_no, "unterminated string constant"))?;
        if inner.contains('\'') {
            return Err(FormatError::new(line_no, "quote inside string constant"));
        }
        return Ok(Operand::const_string(unescape_const(inner, line_no)?));
    }
    if tok.contains('\'') {
        return Err(FormatError::new(line_no, "stray quote in operand"));
    }
    let kind = match tok.as_bytes()[0] {
        b'!' => OperandKind::CompiledVar,
        b'~' => OperandKind::TempVar,
        b'$' => OperandKind::Var,
        _ if is_numeric_literal(tok) => OperandKind::ConstNumber,
        _ => OperandKind::Name,
    };
    Ok(Operand {
        kind,
        raw: tok.to_string(),
    })
}

fn serialize_token(op: &Operand) -> String {
    match op.kind {
        OperandKind::ConstString => escape_const(&op.raw),
        OperandKind::Unused => String::new(),
        _ => op.raw.clone(),
    }
}

/// Parse canonical ODUMP v1 text. Total: any input yields either a valid
/// dump or a [`FormatError`].
pub fn parse_dump(text: &str) -> Result<OpcodeDump, FormatError> {
    let mut lines = text.split('\n').enumerate().peekable();

    let (_, header) = lines
        .next()
        .filter(|(_, l)| !l.is_empty() || text.contains('\n'))
        .ok_or_else(|| FormatError::new(1, "missing header"))?;
    if header.is_empty() {
        return Err(FormatError::new(1, "missing header"));
    }
    let version = header
        .strip_prefix("#odump ")
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| FormatError::new(1, "missing header"))?;
    if version != 1 {
        return Err(FormatError::new(1, format!("unsupported version {version}")));
    }

    let mut functions: Vec<FunctionUnit> = Vec::new();
    let mut seen_main = false;

    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            // Only legal as the trailing segment after the final newline.
            continue;
        }
        if let Some(name) = line.strip_prefix("fn ") {
            if name.is_empty() {
                return Err(FormatError::new(line_no, "empty function name"));
            }
            if name == MAIN_FN {
                if seen_main {
                    return Err(FormatError::new(line_no, "duplicate (main)"));
                }
                seen_main = true;
            }
            if let Some(prev) = functions.last() {
                if prev.ops.is_empty() {
                    return Err(FormatError::new(line_no, "function without instructions"));
                }
            }
            functions.push(FunctionUnit {
                name: name.to_string(),
                ops: Vec::new(),
            });
            continue;
        }

        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(FormatError::new(
                line_no,
                format!("malformed record: expected 5 fields, got {}", fields.len()),
            ));
        }
        let src_line: u32 = fields[0]
            .parse()
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| FormatError::new(line_no, "bad source line number"))?;
        let op_index: u32 = fields[1]
            .parse()
            .map_err(|_| FormatError::new(line_no, "bad op index"))?;
        if !is_opcode_name(fields[2]) {
            return Err(FormatError::new(line_no, "bad opcode name"));
        }
        let operands = if fields[3].is_empty() {
            Vec::new()
        } else {
            let toks: Vec<&str> = fields[3].split('|').collect();
            if toks.len() > 2 {
                return Err(FormatError::new(line_no, "more than two operands"));
            }
            toks.iter()
                .map(|t| parse_token(t, line_no))
                .collect::<Result<Vec<_>, _>>()?
        };
        let result = if fields[4].is_empty() {
            None
        } else {
            Some(parse_token(fields[4], line_no)?)
        };

        let func = functions
            .last_mut()
            .ok_or_else(|| FormatError::new(line_no, "instruction before any function"))?;
        if let Some(prev) = func.ops.last() {
            if op_index <= prev.op_index {
                return Err(FormatError::new(line_no, "non-monotonic op_index"));
            }
        }
        func.ops.push(OpLine {
            src_line,
            op_index,
            opcode: fields[2].to_string(),
            operands,
            result,
        });
    }

    if let Some(last) = functions.last() {
        if last.ops.is_empty() {
            return Err(FormatError::new(0, "function without instructions"));
        }
    }
    if functions.is_empty() {
        return Err(FormatError::new(0, "no functions"));
    }
    if !seen_main {
        return Err(FormatError::new(0, "missing (main)"));
    }
    // Canonical order puts (main) first.
    if functions[0].name != MAIN_FN {
        let pos = functions.iter().position(|f| f.name == MAIN_FN).unwrap();
        let main = functions.remove(pos);
        functions.insert(0, main);
    }

    Ok(OpcodeDump {
        version,
        functions,
    })
}

/// Serialize to canonical ODUMP v1 text. The dump is expected to satisfy its
/// invariants (see [`OpcodeDump::validate`]); `parse_dump(serialize_dump(d))`
/// then equals `d`.
pub fn serialize_dump(dump: &OpcodeDump) -> String {
    debug_assert!(dump.validate().is_ok(), "serializing invalid dump");
    let mut out = String::new();
    out.push_str(&format!("#odump {}\n", dump.version));
    for func in &dump.functions {
        out.push_str("fn ");
        out.push_str(&func.name);
        out.push('\n');
        for op in &func.ops {
            let operand_field = op
                .operands
                .iter()
                .map(serialize_token)
                .collect::<Vec<_>>()
                .join("|");
            let result_field = op.result.as_ref().map(serialize_token).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                op.src_line, op.op_index, op.opcode, operand_field, result_field
            ));
        }
    }
    out
}

impl OpcodeDump {
    /// Structural invariants backing the round-trip guarantee.
    pub fn validate(&self) -> Result<(), InvalidDump> {
        if self.functions.is_empty() {
            return Err(InvalidDump("no functions".into()));
        }
        let mains = self.functions.iter().filter(|f| f.name == MAIN_FN).count();
        if mains != 1 {
            return Err(InvalidDump(format!("expected exactly one (main), found {mains}")));
        }
        if self.functions[0].name != MAIN_FN {
            return Err(InvalidDump("(main) must come first".into()));
        }
        for func in &self.functions {
            if func.name.is_empty() || func.name.contains(['\t', '\n']) {
                return Err(InvalidDump("bad function name".into()));
            }
            if func.ops.is_empty() {
                return Err(InvalidDump(format!("function {} has no instructions", func.name)));
            }
            let mut prev: Option<u32> = None;
            for op in &func.ops {
                if op.src_line < 1 {
                    return Err(InvalidDump("source line must be positive".into()));
                }
                if let Some(p) = prev {
                    if op.op_index <= p {
                        return Err(InvalidDump("op_index not strictly increasing".into()));
                    }
                }
                prev = Some(op.op_index);
                if !is_opcode_name(&op.opcode) {
                    return Err(InvalidDump(format!("bad opcode name {:?}", op.opcode)));
                }
                if op.operands.len() > 2 {
                    return Err(InvalidDump("more than two operands".into()));
                }
                // A lone unused slot serializes to an empty field, identical
                // to "no operands"; the canonical form is the empty list.
                if op.operands.len() == 1 && op.operands[0].kind == OperandKind::Unused {
                    return Err(InvalidDump("lone unused operand".into()));
                }
                for operand in op.operands.iter().chain(op.result.iter()) {
                    validate_operand(operand)?;
                }
            }
        }
        Ok(())
    }

    /// All instructions of all functions, in dump order.
    pub fn all_ops(&self) -> impl Iterator<Item = &OpLine> {
        self.functions.iter().flat_map(|f| f.ops.iter())
    }

    pub fn op_count(&self) -> usize {
        self.functions.iter().map(|f| f.ops.len()).sum()
    }
}

fn validate_operand(op: &Operand) -> Result<(), InvalidDump> {
    match op.kind {
        OperandKind::Unused => {
            if !op.raw.is_empty() {
                return Err(InvalidDump("unused operand with text".into()));
            }
        }
        OperandKind::ConstString => {
            if op.raw.contains(['\'', '|']) {
                return Err(InvalidDump("string constant contains quote or pipe".into()));
            }
        }
        OperandKind::ConstNumber => {
            if !is_numeric_literal(&op.raw) {
                return Err(InvalidDump(format!("bad numeric literal {:?}", op.raw)));
            }
        }
        OperandKind::CompiledVar | OperandKind::TempVar | OperandKind::Var => {
            let sigil = match op.kind {
                OperandKind::CompiledVar => '!',
                OperandKind::TempVar => '~',
                _ => '$',
            };
            if !op.raw.starts_with(sigil) || op.raw.len() < 2 {
                return Err(InvalidDump(format!("bad variable token {:?}", op.raw)));
            }
            if op.raw.contains(['\'', '|', '\t', '\n']) {
                return Err(InvalidDump("variable token contains reserved char".into()));
            }
        }
        OperandKind::Name => {
            if op.raw.is_empty()
                || op.raw.contains(['\'', '|', '\t', '\n'])
                || matches!(op.raw.as_bytes()[0], b'!' | b'~' | b'$')
                || is_numeric_literal(&op.raw)
            {
                return Err(InvalidDump(format!("bad name token {:?}", op.raw)));
            }
        }
    }
    Ok(())
}

impl fmt::Display for OpcodeDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_dump(self))
    }
}

// ---------------------------------------------------------------------------
// VLD import
// ---------------------------------------------------------------------------

/// Call-site initializers whose quoted VLD operand is a function/class name
/// rather than a string constant.
const CALL_INIT_OPCODES: &[&str] = &[
    "INIT_FCALL",
    "INIT_FCALL_BY_NAME",
    "INIT_NS_FCALL_BY_NAME",
    "INIT_DYNAMIC_CALL",
    "INIT_METHOD_CALL",
    "INIT_STATIC_METHOD_CALL",
    "INIT_USER_CALL",
    "NEW",
];

struct VldColumns {
    op: usize,
    after_op: usize,
    ret: usize,
    operands: usize,
}

fn find_vld_columns(line: &str) -> Option<VldColumns> {
    // Header looks like: "line  #* E I O op  fetch  ext  return  operands"
    let op = line.find(" op ")? + 1;
    let operands = line.rfind("operands")?;
    let ret = line.rfind(" return ").map(|i| i + 1)?;
    let after_op = ["fetch", "ext"]
        .iter()
        .filter_map(|c| line.find(c))
        .min()
        .unwrap_or(ret);
    Some(VldColumns {
        op,
        after_op,
        ret,
        operands,
    })
}

fn slice_cols(line: &str, from: usize, to: usize) -> &str {
    let len = line.len();
    let from = from.min(len);
    let to = to.min(len).max(from);
    // VLD output is ASCII-aligned; fall back to the full tail on boundary issues.
    line.get(from..to).unwrap_or("")
}

fn sanitize_vld_text(s: &str) -> String {
    s.chars()
        .map(|c| if c == '\'' || c == '|' { '_' } else { c })
        .collect()
}

fn vld_operand(tok: &str, opcode: &str) -> Option<Operand> {
    let tok = tok.trim();
    if tok.is_empty() {
        return None;
    }
    if tok.starts_with('\'') {
        let inner = tok.trim_matches('\'');
        let text = sanitize_vld_text(inner);
        if CALL_INIT_OPCODES.contains(&opcode) && !text.is_empty() {
            let name = text.replace(['\t', '\n', ' '], "_");
            return Some(Operand::name(name));
        }
        return Some(Operand::const_string(text));
    }
    let op = match tok.as_bytes()[0] {
        b'!' => Operand {
            kind: OperandKind::CompiledVar,
            raw: sanitize_vld_text(tok),
        },
        b'~' => Operand {
            kind: OperandKind::TempVar,
            raw: sanitize_vld_text(tok),
        },
        b'$' => Operand {
            kind: OperandKind::Var,
            raw: sanitize_vld_text(tok),
        },
        _ if is_numeric_literal(tok) => Operand::number(tok),
        _ => {
            let name = sanitize_vld_text(tok).replace(['\t', '\n', ' '], "_");
            Operand::name(name)
        }
    };
    Some(op)
}

fn is_var_like(tok: &str) -> bool {
    matches!(tok.as_bytes().first(), Some(b'!' | b'~' | b'$')) && tok.len() >= 2
}

/// Best-effort import of VLD-style opcode tables. Extended flag columns are
/// dropped; characters the canonical format cannot carry are replaced.
pub fn import_vld(text: &str) -> Result<OpcodeDump, FormatError> {
    let mut cols: Option<VldColumns> = None;
    let mut ops: Vec<OpLine> = Vec::new();
    let mut last_src_line: u32 = 1;
    let mut next_index: u32 = 0;

    for raw_line in text.lines() {
        let line = raw_line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if cols.is_none() {
            if let Some(c) = find_vld_columns(line) {
                cols = Some(c);
                continue;
            }
        }
        let trimmed = line.trim_start();
        if trimmed.starts_with('-') || trimmed.starts_with("line ") {
            continue; // separator / repeated header
        }

        let parsed = match &cols {
            Some(c) => parse_vld_row_columns(line, c, last_src_line),
            None => parse_vld_row_tokens(line, last_src_line),
        };
        let Some((src_line, opcode, operands, result)) = parsed else {
            continue;
        };
        last_src_line = src_line;
        // VLD op numbers restart per function; we re-number into a single
        // monotonically increasing stream.
        ops.push(OpLine {
            src_line,
            op_index: next_index,
            opcode,
            operands,
            result,
        });
        next_index += 1;
    }

    if ops.is_empty() {
        return Err(FormatError::new(0, "no instruction rows recovered"));
    }
    Ok(OpcodeDump {
        version: 1,
        functions: vec![FunctionUnit {
            name: MAIN_FN.to_string(),
            ops,
        }],
    })
}

type VldRow = (u32, String, Vec<Operand>, Option<Operand>);

fn parse_vld_row_columns(line: &str, cols: &VldColumns, last_line: u32) -> Option<VldRow> {
    let opcode = slice_cols(line, cols.op, cols.after_op).trim().to_string();
    if !is_opcode_name(&opcode) {
        return None;
    }
    let head: Vec<&str> = slice_cols(line, 0, cols.op).split_whitespace().collect();
    let numbers: Vec<u32> = head.iter().filter_map(|t| t.parse().ok()).collect();
    let src_line = if numbers.len() >= 2 { numbers[0].max(1) } else { last_line };

    let ret_text = slice_cols(line, cols.ret, cols.operands).trim();
    let result = if ret_text.is_empty() {
        None
    } else {
        vld_operand(ret_text, &opcode)
    };
    let operands = split_vld_operands(slice_cols(line, cols.operands, usize::MAX), &opcode);
    Some((src_line, opcode, operands, result))
}

fn parse_vld_row_tokens(line: &str, last_line: u32) -> Option<VldRow> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    // Single uppercase letters are VLD flag markers (E, I, O), not opcodes.
    let op_pos = tokens
        .iter()
        .position(|t| t.len() >= 2 && is_opcode_name(t))?;
    let head = &tokens[..op_pos];
    let numbers: Vec<u32> = head.iter().filter_map(|t| t.parse().ok()).collect();
    if numbers.is_empty() {
        return None; // not an instruction row
    }
    let src_line = if numbers.len() >= 2 { numbers[0].max(1) } else { last_line };
    // Flag markers between the numbers and the opcode are single chars (E > I O *).
    if head
        .iter()
        .any(|t| t.parse::<u32>().is_err() && !matches!(*t, "E" | ">" | "<" | "I" | "O" | "*" | "E>"))
    {
        return None;
    }
    let opcode = tokens[op_pos].to_string();
    let mut rest = tokens[op_pos + 1..].join(" ");
    let mut result = None;
    // A leading variable token followed by more text is the return column.
    if let Some((first, tail)) = rest.split_once(' ') {
        if is_var_like(first) {
            result = vld_operand(first, &opcode);
            rest = tail.to_string();
        }
    }
    let operands = split_vld_operands(&rest, &opcode);
    Some((src_line, opcode, operands, result))
}

fn split_vld_operands(text: &str, opcode: &str) -> Vec<Operand> {
    text.trim()
        .split(',')
        .filter_map(|t| vld_operand(t, opcode))
        .take(2)
        .collect()
}
