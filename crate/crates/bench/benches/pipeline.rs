use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use opshield_core::embed::{train_skipgram, SubwordConfig};
use opshield_core::encoder::{encode, window_layout, EncoderConfig, EncoderParams};
use opshield_core::harness::gen_corpus;
use opshield_core::opdump::{parse_dump, serialize_dump};
use opshield_core::tokens::{
    decode_operand, extract_sequence, DecodePolicy, FilterRules, NormalizePolicy, TokenMode,
};

fn bench_parse(c: &mut Criterion) {
    let (dump, _) = &gen_corpus(1, 1, 0)[0];
    let text = serialize_dump(dump);
    c.bench_function("parse_dump", |b| {
        b.iter(|| parse_dump(black_box(&text)).unwrap())
    });
    c.bench_function("serialize_dump", |b| b.iter(|| serialize_dump(black_box(dump))));
}

fn bench_extract(c: &mut Criterion) {
    let (dump, _) = &gen_corpus(2, 0, 1)[0];
    let rules = FilterRules::default();
    let decode = DecodePolicy::default();
    let norm = NormalizePolicy::default();
    c.bench_function("extract_odt", |b| {
        b.iter(|| {
            extract_sequence(
                black_box(dump),
                &rules,
                &decode,
                &norm,
                TokenMode::Odt,
                "bench",
                None,
            )
            .unwrap()
        })
    });
    let payload = "WlhaaGJBPT0=";
    c.bench_function("decode_operand_two_level", |b| {
        b.iter(|| decode_operand(black_box(payload), &decode))
    });
}

fn bench_encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::with_vocab(256);
    let params = EncoderParams::init(&cfg, 7).unwrap();
    let ids: Vec<usize> = (0..512).map(|i| (i * 31) % 256).collect();
    c.bench_function("encode_512_tokens_windowed", |b| {
        b.iter(|| encode(black_box(&params), &cfg, black_box(&ids)).unwrap())
    });
    c.bench_function("window_layout_4096", |b| {
        b.iter(|| window_layout(black_box(4096), 128, 64).unwrap())
    });
}

fn bench_embed(c: &mut Criterion) {
    let corpus: Vec<_> = gen_corpus(3, 8, 8)
        .iter()
        .map(|(dump, label)| {
            extract_sequence(
                dump,
                &FilterRules::default(),
                &DecodePolicy::default(),
                &NormalizePolicy::default(),
                TokenMode::Odt,
                "bench",
                Some(*label),
            )
            .unwrap()
        })
        .collect();
    let cfg = SubwordConfig {
        dim: 32,
        buckets: 10_000,
        epochs: 1,
        ..Default::default()
    };
    c.bench_function("train_skipgram_small", |b| {
        b.iter_batched(
            || corpus.clone(),
            |corpus| train_skipgram(black_box(&corpus), &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, bench_parse, bench_extract, bench_encoder, bench_embed);
criterion_main!(benches);
