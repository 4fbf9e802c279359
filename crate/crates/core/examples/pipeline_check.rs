// Scratch driver for pipeline timing/accuracy experiments.
use std::time::Instant;

use opshield_core::harness::{gen_corpus, run_pipeline, PipelineConfig};
use opshield_core::tokens::TokenMode;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let mode = match args.get(2).map(|s| s.as_str()) {
        Some("ost") => TokenMode::Ost,
        _ => TokenMode::Odt,
    };

    let t0 = Instant::now();
    let corpus = gen_corpus(42, n, n);
    let total_ops: usize = corpus.iter().map(|(d, _)| d.op_count()).sum();
    println!(
        "gen: {} dumps, {} ops total, {:.2}s",
        corpus.len(),
        total_ops,
        t0.elapsed().as_secs_f64()
    );

    let cfg = PipelineConfig::default();
    let t1 = Instant::now();
    let out = run_pipeline(&corpus, mode, &cfg).expect("pipeline");
    println!(
        "pipeline ({}): {:.1}s  splits {:?}",
        mode.as_str(),
        t1.elapsed().as_secs_f64(),
        out.counts
    );
    println!("embed losses: {:?}", out.embed_losses);
    for h in &out.history {
        println!(
            "epoch {}: loss {:.4} val_acc {:.4} val_f1 {:.4}",
            h.epoch, h.train_loss, h.val_accuracy, h.val_f1
        );
    }
    let m = out.test_metrics;
    println!(
        "test: acc {:.4} prec {:.4} rec {:.4} f1 {:.4} (tp {} fp {} tn {} fn {})",
        m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_
    );
}
