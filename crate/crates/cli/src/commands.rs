//! Subcommand implementations. Every model-producing command prints one
//! machine-parseable `RESULT key=value ...` line last.

use std::path::Path;

use anyhow::{anyhow, Context, Result};

use opshield_core::classifier::{history_csv, TrainedModel};
use opshield_core::config::RunConfig;
use opshield_core::embed::{save_buckets, save_vec, train_skipgram};
use opshield_core::harness::{
    ablation_csv, gen_corpus, run_ablation, run_pipeline_sequences, score, split_dataset,
    AblationReport, Metrics,
};
use opshield_core::opdump::{import_vld, parse_dump, serialize_dump};
use opshield_core::tokens::{extract_sequence, to_jsonl_line, Label, TokenError, TokenMode, TokenSequence};

use crate::corpus_io::{read_corpus_dir, write_corpus_dir, CorpusEntry};
use crate::{DataError, UsageError, EXIT_DATA, EXIT_OK};

fn data_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(DataError(msg.into()))
}

fn usage_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

// ---------------------------------------------------------------------------
// parse
// ---------------------------------------------------------------------------

pub fn cmd_parse(inputs: &[std::path::PathBuf], vld: bool, output: Option<&Path>) -> Result<u8> {
    use rayon::prelude::*;
    if inputs.is_empty() {
        return Err(usage_err("parse: no input files"));
    }
    if let Some(dir) = output {
        std::fs::create_dir_all(dir)?;
    }
    // Files are independent; results come back in input order.
    let results: Vec<Result<String, String>> = inputs
        .par_iter()
        .map(|input| {
            let text = std::fs::read_to_string(input)
                .map_err(|e| format!("{}: {e}", input.display()))?;
            let parsed = if vld { import_vld(&text) } else { parse_dump(&text) };
            parsed
                .map(|d| serialize_dump(&d))
                .map_err(|e| format!("{}: {e}", input.display()))
        })
        .collect();

    let mut failures = 0usize;
    for (input, result) in inputs.iter().zip(results) {
        match result {
            Ok(canonical) => match output {
                Some(dir) => {
                    let stem = input
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("dump");
                    std::fs::write(dir.join(format!("{stem}.odump")), canonical)?;
                }
                None => print!("{canonical}"),
            },
            Err(msg) => {
                eprintln!("{msg}");
                failures += 1;
            }
        }
    }
    Ok(if failures > 0 { EXIT_DATA } else { EXIT_OK })
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

pub fn cmd_extract(
    cfg: &RunConfig,
    dumps: &[std::path::PathBuf],
    mode: Option<&str>,
    output: Option<&Path>,
) -> Result<u8> {
    if dumps.is_empty() {
        return Err(usage_err("extract: no input files"));
    }
    use rayon::prelude::*;
    let mode = match mode {
        Some(m) => TokenMode::parse(m).ok_or_else(|| usage_err(format!("unknown mode {m:?}")))?,
        None => cfg.mode,
    };
    let p = &cfg.pipeline;
    enum Extracted {
        Line(String),
        Skipped(String),
    }
    let results: Vec<Result<Extracted, anyhow::Error>> = dumps
        .par_iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))?;
            let dump =
                parse_dump(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
            let source_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dump")
                .to_string();
            match extract_sequence(&dump, &p.filter, &p.decode, &p.normalize, mode, source_id, None)
            {
                Ok(seq) => Ok(Extracted::Line(to_jsonl_line(&seq))),
                Err(TokenError::EmptySequence) => Ok(Extracted::Skipped(format!(
                    "{}: all instructions filtered, skipping",
                    path.display()
                ))),
                Err(e) => Err(data_err(format!("{}: {e}", path.display()))),
            }
        })
        .collect();
    let mut lines = Vec::new();
    let mut skipped = 0usize;
    for result in results {
        match result? {
            Extracted::Line(line) => lines.push(line),
            Extracted::Skipped(msg) => {
                eprintln!("{msg}");
                skipped += 1;
            }
        }
    }
    if lines.is_empty() {
        return Err(data_err(format!("all {skipped} inputs were skipped")));
    }
    let body = lines.join("\n") + "\n";
    match output {
        Some(path) => std::fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// shared corpus -> sequences
// ---------------------------------------------------------------------------

fn extract_entries(
    cfg: &RunConfig,
    entries: &[CorpusEntry],
    mode: TokenMode,
) -> Result<Vec<TokenSequence>> {
    let p = &cfg.pipeline;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        match extract_sequence(
            &e.dump,
            &p.filter,
            &p.decode,
            &p.normalize,
            mode,
            e.source_id.clone(),
            Some(e.label),
        ) {
            Ok(seq) => out.push(seq),
            Err(TokenError::EmptySequence) => {
                eprintln!("{}: all instructions filtered, skipping", e.source_id);
            }
            Err(e2) => return Err(data_err(format!("{}: {e2}", e.source_id))),
        }
    }
    if out.is_empty() {
        return Err(data_err("no usable samples in corpus"));
    }
    Ok(out)
}

fn load_sequences(cfg: &RunConfig, corpus: &Path) -> Result<Vec<TokenSequence>> {
    if corpus.is_file() && corpus.extension().is_some_and(|e| e == "jsonl") {
        let file = std::fs::File::open(corpus)
            .with_context(|| format!("cannot open {}", corpus.display()))?;
        let seqs = opshield_core::tokens::read_jsonl(std::io::BufReader::new(file))
            .map_err(|e| data_err(e.to_string()))?;
        if seqs.is_empty() {
            return Err(data_err("empty jsonl corpus"));
        }
        return Ok(seqs);
    }
    let entries = read_corpus_dir(corpus).map_err(|e| data_err(e.to_string()))?;
    extract_entries(cfg, &entries, cfg.mode)
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

pub fn cmd_embed(cfg: &RunConfig, corpus: &Path, output: &Path) -> Result<u8> {
    let sequences = load_sequences(cfg, corpus)?;
    let (model, losses) =
        train_skipgram(&sequences, &cfg.pipeline.embed).map_err(|e| data_err(e.to_string()))?;
    std::fs::create_dir_all(output)?;
    std::fs::write(output.join("embed.vec"), save_vec(&model))?;
    std::fs::write(output.join("embed.ftbk"), save_buckets(&model))?;
    println!(
        "RESULT vocab={} dim={} epochs={} loss={:.6}",
        model.vocab.len(),
        model.config.dim,
        losses.len(),
        losses.last().copied().unwrap_or(0.0)
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(cfg: &RunConfig, corpus: &Path, output: &Path) -> Result<u8> {
    let entries = read_corpus_dir(corpus).map_err(|e| data_err(e.to_string()))?;
    let sequences = extract_entries(cfg, &entries, cfg.mode)?;
    let outcome = run_pipeline_sequences(sequences, &cfg.pipeline)
        .map_err(|e| data_err(e.to_string()))?;

    outcome
        .model
        .save_to_dir(output)
        .map_err(|e| anyhow!("saving model: {e}"))?;
    std::fs::write(output.join("manifest.conf"), cfg.to_text())?;
    std::fs::write(output.join("history.csv"), history_csv(&outcome.history))?;

    let last = outcome.history.last();
    println!(
        "RESULT train={} val={} test={} epochs={} train_loss={:.6} val_acc={:.6} val_f1={:.6}",
        outcome.counts.0,
        outcome.counts.1,
        outcome.counts.2,
        outcome.history.len(),
        last.map_or(f64::NAN, |h| h.train_loss),
        last.map_or(f64::NAN, |h| h.val_accuracy),
        last.map_or(f64::NAN, |h| h.val_f1),
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn metrics_line(prefix: &str, m: &Metrics) -> String {
    format!(
        "{prefix}acc={:.6} precision={:.6} recall={:.6} f1={:.6} tp={} fp={} tn={} fn={}",
        m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_
    )
}

pub fn cmd_eval(cfg: &RunConfig, model_dir: &Path, corpus: &Path) -> Result<u8> {
    let model =
        TrainedModel::load_from_dir(model_dir).map_err(|e| data_err(format!("loading model: {e}")))?;
    let entries = read_corpus_dir(corpus).map_err(|e| data_err(e.to_string()))?;
    let sequences = extract_entries(cfg, &entries, cfg.mode)?;
    let split = split_dataset(sequences, &cfg.pipeline.split, |s| s.label)
        .map_err(|e| data_err(e.to_string()))?;
    let metrics = score(&model, &split.test).map_err(|e| data_err(e.to_string()))?;
    println!("test split: {} samples", split.test.len());
    println!("RESULT {}", metrics_line("", &metrics));
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub fn cmd_predict(cfg: &RunConfig, model_dir: &Path, input: &Path) -> Result<u8> {
    let model =
        TrainedModel::load_from_dir(model_dir).map_err(|e| data_err(format!("loading model: {e}")))?;
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("cannot read {}", input.display()))?;
    let dump = parse_dump(&text).map_err(|e| data_err(format!("{}: {e}", input.display())))?;
    let p = &cfg.pipeline;
    let seq = extract_sequence(
        &dump,
        &p.filter,
        &p.decode,
        &p.normalize,
        cfg.mode,
        input.display().to_string(),
        None,
    )
    .map_err(|e| data_err(e.to_string()))?;
    let pred = model
        .predict(&seq.tokens)
        .map_err(|e| data_err(e.to_string()))?;
    println!(
        "RESULT prob={:.6} label={}",
        pred.prob,
        match pred.label {
            Label::Webshell => "webshell",
            Label::Benign => "benign",
        }
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(cfg: &RunConfig, benign: usize, malicious: usize, output: &Path) -> Result<u8> {
    if benign == 0 || malicious == 0 {
        return Err(usage_err("gen: --benign and --malicious must be >= 1"));
    }
    let corpus = gen_corpus(cfg.pipeline.split.seed, benign, malicious);
    write_corpus_dir(output, &corpus)?;
    println!(
        "RESULT files={} benign={} malicious={} seed={}",
        corpus.len(),
        benign,
        malicious,
        cfg.pipeline.split.seed
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

fn print_ablation_table(report: &AblationReport) {
    println!(
        "{:<6} {:>9} {:>10} {:>8} {:>9}",
        "mode", "accuracy", "precision", "recall", "f1"
    );
    for (mode, m) in [
        (report.mode_a, &report.metrics_a),
        (report.mode_b, &report.metrics_b),
    ] {
        println!(
            "{:<6} {:>9.4} {:>10.4} {:>8.4} {:>9.4}",
            mode.as_str(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        );
    }
    println!("accuracy delta ({} - {}): {:+.4}", report.mode_a.as_str(), report.mode_b.as_str(), report.accuracy_delta);
    if report.identical_modes {
        eprintln!("warning: both ablation arms use the same token mode");
    }
}

pub fn cmd_ablate(cfg: &RunConfig, corpus: &Path, output: Option<&Path>) -> Result<u8> {
    let entries = read_corpus_dir(corpus).map_err(|e| data_err(e.to_string()))?;
    let dumps: Vec<_> = entries.into_iter().map(|e| (e.dump, e.label)).collect();
    let report = run_ablation(&dumps, &cfg.pipeline, TokenMode::Odt, TokenMode::Ost)
        .map_err(|e| data_err(e.to_string()))?;
    print_ablation_table(&report);
    let csv = ablation_csv(&report);
    match output {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    println!(
        "RESULT odt_acc={:.6} ost_acc={:.6} delta={:.6} odt_f1={:.6} ost_f1={:.6}",
        report.metrics_a.accuracy,
        report.metrics_b.accuracy,
        report.accuracy_delta,
        report.metrics_a.f1,
        report.metrics_b.f1
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// lambda
// ---------------------------------------------------------------------------

pub fn cmd_lambda(cfg: &RunConfig, corpus: &Path, grid: &str) -> Result<u8> {
    let candidates: Vec<f64> = grid
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage_err(format!("bad --grid: {e}")))?;
    if candidates.is_empty() {
        return Err(usage_err("empty --grid"));
    }

    let entries = read_corpus_dir(corpus).map_err(|e| data_err(e.to_string()))?;
    let sequences = extract_entries(cfg, &entries, cfg.mode)?;
    let split = split_dataset(sequences, &cfg.pipeline.split, |s| s.label)
        .map_err(|e| data_err(e.to_string()))?;
    let (embed_model, _) = train_skipgram(&split.train, &cfg.pipeline.embed)
        .map_err(|e| data_err(e.to_string()))?;
    let (best, table) = opshield_core::classifier::grid_search_lambda(
        &candidates,
        &split.train,
        &split.val,
        &embed_model,
        &cfg.pipeline.encoder,
        &cfg.pipeline.train,
    )
    .map_err(|e| data_err(e.to_string()))?;

    println!("{:<8} {:>9} {:>9}", "lambda", "val_acc", "val_f1");
    for row in &table {
        println!(
            "{:<8} {:>9.4} {:>9.4}",
            row.lambda, row.val_accuracy, row.val_f1
        );
    }
    let best_row = table.iter().find(|r| r.lambda == best).expect("best in table");
    println!(
        "RESULT best_lambda={} best_f1={:.6} best_acc={:.6} candidates={}",
        best, best_row.val_f1, best_row.val_accuracy, table.len()
    );
    Ok(EXIT_OK)
}
