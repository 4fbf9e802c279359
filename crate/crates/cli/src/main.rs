//! `opshield`: one binary exposing the detection pipeline end to end.
//!
//! Exit codes: 0 success, 2 partial or data failure, 64 usage error,
//! 70 internal error.

mod commands;
mod corpus_io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opshield_core::config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_INTERNAL: u8 = 70;

#[derive(Parser)]
#[command(name = "opshield", version, about = "PHP opcode webshell detection pipeline")]
struct Cli {
    /// Config file (flat key = value); falls back to $OPSHIELD_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set encoder.window=64 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Seed override applied to embedding, training and split seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-file and per-batch parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse dumps (or VLD tables with --vld) into canonical form.
    Parse {
        /// Input files.
        inputs: Vec<PathBuf>,
        /// Treat inputs as VLD opcode tables.
        #[arg(long)]
        vld: bool,
        /// Directory for canonical .odump files; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Extract token sequences as JSON lines.
    Extract {
        /// Canonical .odump files.
        dumps: Vec<PathBuf>,
        /// Token mode.
        #[arg(long, value_parser = ["odt", "ost"])]
        mode: Option<String>,
        /// Output path; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train the subword embedder alone.
    Embed {
        /// Corpus directory (.odump files + labels.csv) or a .jsonl file.
        corpus: PathBuf,
        /// Output directory for embed.vec and embed.ftbk.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the full classifier on a labeled corpus directory.
    Train {
        corpus: PathBuf,
        /// Model output directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate a trained model on the corpus' held-out test split.
    Eval { model: PathBuf, corpus: PathBuf },
    /// Classify one opcode dump.
    Predict { model: PathBuf, input: PathBuf },
    /// Generate a synthetic labeled corpus.
    Gen {
        #[arg(long)]
        benign: usize,
        #[arg(long)]
        malicious: usize,
        /// Output directory for .odump files and labels.csv.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare token modes: train once per mode, report both metric sets.
    Ablate {
        corpus: PathBuf,
        /// Where to write the CSV report (also printed as a table).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Grid-search the fusion weight on the validation split.
    Lambda {
        corpus: PathBuf,
        /// Comma-separated candidate values, e.g. 0,0.5,1.
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        grid: String,
    },
}

fn load_config(cli: &Cli, extra_base: Option<&PathBuf>) -> anyhow::Result<RunConfig> {
    // Precedence: model manifest (for eval/predict) < config file < --set < --seed.
    let mut cfg = RunConfig::default();
    if let Some(base) = extra_base {
        let text = std::fs::read_to_string(base)
            .map_err(|e| anyhow::anyhow!("cannot read manifest {}: {e}", base.display()))?;
        cfg = RunConfig::from_text(&text)?;
    }
    let file = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("OPSHIELD_CONFIG").map(PathBuf::from));
    if let Some(path) = file {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        if extra_base.is_some() {
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow::anyhow!("config line {}: expected key = value", i + 1))?;
                cfg.set(k.trim(), v.trim())?;
            }
        } else {
            cfg = RunConfig::from_text(&text)?;
        }
    }
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {pair:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed_everywhere(seed);
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = Some(jobs);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Errors that reflect bad user input or data rather than internal faults.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let manifest_base = match &cli.command {
        Command::Eval { model, .. } | Command::Predict { model, .. } => {
            let m = model.join("manifest.conf");
            m.exists().then_some(m)
        }
        _ => None,
    };
    let cfg = load_config(&cli, manifest_base.as_ref()).map_err(|e| {
        anyhow::Error::new(UsageError(format!("{e}")))
    })?;

    if let Some(jobs) = cfg.jobs {
        // Ignore failure: the global pool may already exist in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }

    match cli.command {
        Command::Parse {
            inputs,
            vld,
            output,
        } => commands::cmd_parse(&inputs, vld, output.as_deref()),
        Command::Extract {
            dumps,
            mode,
            output,
        } => commands::cmd_extract(&cfg, &dumps, mode.as_deref(), output.as_deref()),
        Command::Embed { corpus, output } => commands::cmd_embed(&cfg, &corpus, &output),
        Command::Train { corpus, output } => commands::cmd_train(&cfg, &corpus, &output),
        Command::Eval { model, corpus } => commands::cmd_eval(&cfg, &model, &corpus),
        Command::Predict { model, input } => commands::cmd_predict(&cfg, &model, &input),
        Command::Gen {
            benign,
            malicious,
            output,
        } => commands::cmd_gen(&cfg, benign, malicious, &output),
        Command::Ablate { corpus, output } => {
            commands::cmd_ablate(&cfg, &corpus, output.as_deref())
        }
        Command::Lambda { corpus, grid } => commands::cmd_lambda(&cfg, &corpus, &grid),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else if e.downcast_ref::<DataError>().is_some() {
                EXIT_DATA
            } else {
                EXIT_INTERNAL
            };
            ExitCode::from(code)
        }
    }
}
