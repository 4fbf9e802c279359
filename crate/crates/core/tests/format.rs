//! Format-level properties: fixture round-trips, VLD import mapping, and the
//! parse/serialize identity over randomly generated dumps.

use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;

use opshield_core::opdump::{
    import_vld, parse_dump, serialize_dump, FunctionUnit, OpLine, OpcodeDump, Operand,
    OperandKind, MAIN_FN,
};
use opshield_core::tokens::{
    extract_sequence, DecodePolicy, FilterRules, NormalizePolicy, TokenMode,
};

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name);
    fs::read_to_string(path).expect("fixture readable")
}

#[test]
fn eval_b64_fixture_round_trips_byte_identical() {
    let text = fixture("eval_b64.odump");
    assert_eq!(text.lines().count(), 12);
    let dump = parse_dump(&text).unwrap();
    assert!(dump.validate().is_ok());
    assert_eq!(serialize_dump(&dump), text);
}

#[test]
fn eval_b64_fixture_extracts_expected_tokens() {
    let dump = parse_dump(&fixture("eval_b64.odump")).unwrap();
    let seq = extract_sequence(
        &dump,
        &FilterRules::default(),
        &DecodePolicy::default(),
        &NormalizePolicy::default(),
        TokenMode::Odt,
        "eval_b64",
        None,
    )
    .unwrap();
    let expected = vec![
        "ASSIGN",
        "<var>",
        "eval",
        "INIT_FCALL",
        "base64_decode",
        "SEND_VAL",
        "<var>",
        "DO_ICALL",
        "INIT_DYNAMIC_CALL",
        "<var>",
        "SEND_VAL",
        "phpinfo()",
        "DO_FCALL",
        "ECHO",
        "<var>",
        "EXIT",
        "<num>",
        "RETURN",
        "<num>",
    ];
    assert_eq!(seq.tokens, expected);

    let ost = extract_sequence(
        &dump,
        &FilterRules::default(),
        &DecodePolicy::default(),
        &NormalizePolicy::default(),
        TokenMode::Ost,
        "eval_b64",
        None,
    )
    .unwrap();
    assert!(ost.tokens.iter().all(|t| t.chars().all(|c| c.is_ascii_uppercase()
        || c.is_ascii_digit()
        || c == '_')));
}

#[test]
fn vld_fixture_imports_and_canonicalizes() {
    let dump = import_vld(&fixture("vld_hello.txt")).unwrap();
    assert!(dump.validate().is_ok());
    let ops = &dump.functions[0].ops;
    assert_eq!(ops.len(), 4);
    assert_eq!(ops[0].src_line, 2);
    assert_eq!(ops[0].op_index, 0);
    assert_eq!(ops[0].opcode, "INIT_FCALL");
    assert_eq!(ops[0].operands, vec![Operand::name("phpinfo")]);
    assert_eq!(ops[1].opcode, "DO_ICALL");
    assert_eq!(ops[1].src_line, 2);
    assert_eq!(ops[1].result.as_ref().unwrap().raw, "$1");
    assert_eq!(ops[2].opcode, "ECHO");
    assert_eq!(ops[2].operands, vec![Operand::const_string("hello")]);
    assert_eq!(ops[3].opcode, "RETURN");

    // The canonical serialization of an import parses back to the same dump.
    let text = serialize_dump(&dump);
    assert_eq!(parse_dump(&text).unwrap(), dump);
}

// ---------------------------------------------------------------------------
// Random dump generation
// ---------------------------------------------------------------------------

fn arb_const_string() -> impl Strategy<Value = Operand> {
    proptest::collection::vec(
        prop_oneof![
            proptest::char::range('a', 'z'),
            proptest::char::range('A', 'Z'),
            proptest::char::range('0', '9'),
            Just(' '),
            Just('\t'),
            Just('\n'),
            Just('\\'),
            Just('='),
            Just('%'),
            Just('+'),
            Just('/'),
            Just('.'),
        ],
        0..24,
    )
    .prop_map(|chars| Operand::const_string(chars.into_iter().collect::<String>()))
}

fn arb_operand() -> impl Strategy<Value = Operand> {
    prop_oneof![
        arb_const_string(),
        "[a-z_][a-z0-9_.]{0,10}".prop_map(Operand::name),
        (0u32..100_000).prop_map(|n| Operand::number(n.to_string())),
        (0u32..1000, 0u32..1000).prop_map(|(a, b)| Operand::number(format!("{a}.{b}"))),
        (0u32..64).prop_map(|n| Operand {
            kind: OperandKind::CompiledVar,
            raw: format!("!{n}"),
        }),
        (0u32..64).prop_map(|n| Operand {
            kind: OperandKind::TempVar,
            raw: format!("~{n}"),
        }),
        (0u32..64).prop_map(|n| Operand {
            kind: OperandKind::Var,
            raw: format!("${n}"),
        }),
        Just(Operand::unused()),
    ]
}

fn arb_opline() -> impl Strategy<Value = OpLine> {
    (
        1u32..500,
        "[A-Z][A-Z0-9_]{0,12}",
        proptest::collection::vec(arb_operand(), 0..=2).prop_map(|ops| {
            // A lone unused slot is not canonical; see OpcodeDump::validate.
            if ops.len() == 1 && ops[0].kind == OperandKind::Unused {
                Vec::new()
            } else {
                ops
            }
        }),
        proptest::option::of((0u32..64).prop_map(|n| Operand {
            kind: OperandKind::TempVar,
            raw: format!("~{n}"),
        })),
    )
        .prop_map(|(src_line, opcode, operands, result)| OpLine {
            src_line,
            op_index: 0, // renumbered below
            opcode,
            operands,
            result,
        })
}

fn arb_function(name: String) -> impl Strategy<Value = FunctionUnit> {
    proptest::collection::vec(arb_opline(), 1..12).prop_map(move |mut ops| {
        for (i, op) in ops.iter_mut().enumerate() {
            op.op_index = (i as u32) * 2; // strictly increasing, with gaps
        }
        FunctionUnit {
            name: name.clone(),
            ops,
        }
    })
}

prop_compose! {
    fn arb_dump()(
        main in arb_function(MAIN_FN.to_string()),
        extras in proptest::collection::vec("[a-z][a-z0-9_]{0,8}", 0..3),
    )(
        extra_fns in extras
            .into_iter()
            .map(arb_function)
            .collect::<Vec<_>>(),
        main in Just(main),
    ) -> OpcodeDump {
        let mut functions = vec![main];
        functions.extend(extra_fns);
        OpcodeDump { version: 1, functions }
    }
}

proptest! {
    #[test]
    fn parse_serialize_identity(dump in arb_dump()) {
        prop_assert!(dump.validate().is_ok(), "generator must produce valid dumps");
        let text = serialize_dump(&dump);
        let reparsed = parse_dump(&text).unwrap();
        prop_assert_eq!(reparsed, dump);
    }

    #[test]
    fn parser_total_on_line_noise(lines in proptest::collection::vec(".{0,40}", 0..12)) {
        // Ok or FormatError, never a panic.
        let _ = parse_dump(&lines.join("\n"));
    }

    #[test]
    fn parser_total_on_mutated_fixture(pos in 0usize..100, c in proptest::char::any()) {
        let mut text = fixture("eval_b64.odump");
        if let Some((idx, _)) = text.char_indices().nth(pos % text.chars().count()) {
            text.insert(idx, c);
        }
        let _ = parse_dump(&text);
    }
}
