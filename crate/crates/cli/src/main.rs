use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use paracnn::corpus::SyntheticConfig;
use paracnn::decode::PenaltyScope;
use paracnn_cli::{
    eval_files, format_table, generate, gradcheck, make_corpus, render, scores_json, train, CorpusOptions,
    GenerateOptions, OutputFormat, RunConfig,
};

#[derive(Parser)]
#[command(name = "paracnn", version, about = "Convolutional image paragraph generator")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Paragraph,
    Sentence,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene corpus: features, manifest and splits.
    MakeCorpus {
        #[arg(long, env = "PARACNN_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 3)]
        grid: usize,
        #[arg(long, default_value_t = 2)]
        min_objects: usize,
        #[arg(long, default_value_t = 6)]
        max_objects: usize,
        #[arg(long, default_value_t = 60)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config field, e.g. `--set train.epochs=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Decode paragraphs for feature files with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose feature files to decode, in order.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Individual PFV1 feature files.
        #[arg(long)]
        features: Vec<PathBuf>,
        #[arg(long, conflicts_with = "adaptive")]
        sentences: Option<usize>,
        /// Let the sentence-count predictor choose, clamped to [min, max].
        #[arg(long, requires_all = ["min", "max"])]
        adaptive: bool,
        #[arg(long)]
        min: Option<usize>,
        #[arg(long)]
        max: Option<usize>,
        #[arg(long)]
        rep_penalty: Option<f64>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        block_trigrams: Option<bool>,
        #[arg(long, value_enum)]
        penalty_scope: Option<Scope>,
        #[arg(long)]
        max_words: Option<usize>,
        /// Vocabulary JSON that must match the checkpoint's.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against manifest references.
    Eval {
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the raw scores as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a tiny model.
    Gradcheck {
        #[arg(long, env = "PARACNN_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::MakeCorpus {
            seed,
            size,
            out,
            force,
            grid,
            min_objects,
            max_objects,
            vocab_size,
            noise,
        } => {
            let s = make_corpus(&CorpusOptions {
                seed,
                size,
                out: out.clone(),
                force,
                synthetic: SyntheticConfig {
                    grid,
                    min_objects,
                    max_objects,
                    vocab_size,
                    noise,
                },
            })?;
            println!("wrote {} ({} train, {} val, {} test)", out.display(), s.train, s.val, s.test);
        }
        Command::Train {
            config,
            overrides,
            resume,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let outcome = train(&cfg, resume)?;
            let last = outcome.last();
            println!(
                "trained {} epochs into {}; final ce_fwd {:.4}",
                last.epoch,
                outcome.out_dir.display(),
                last.ce_fwd
            );
        }
        Command::Generate {
            checkpoint,
            manifest,
            features,
            sentences,
            adaptive,
            min,
            max,
            rep_penalty,
            block_trigrams,
            penalty_scope,
            max_words,
            vocab,
            format,
            out,
        } => {
            let format = match format {
                Format::Text => OutputFormat::Text,
                Format::Jsonl => OutputFormat::Jsonl,
            };
            let opts = GenerateOptions {
                checkpoint,
                manifest,
                features,
                sentences,
                adaptive: if adaptive { min.zip(max) } else { None },
                rep_penalty,
                block_trigrams,
                penalty_scope: penalty_scope.map(|s| match s {
                    Scope::Paragraph => PenaltyScope::Paragraph,
                    Scope::Sentence => PenaltyScope::Sentence,
                }),
                max_words,
                vocab,
                format,
            };
            let text = render(&generate(&opts)?, format)?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Eval {
            hypotheses,
            manifest,
            json,
        } => {
            let scores = eval_files(&hypotheses, &manifest)?;
            print!("{}", format_table(&scores));
            let j = scores_json(&scores).to_string();
            println!("{j}");
            if let Some(p) = json {
                std::fs::write(&p, j + "\n").with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Gradcheck { seed, inject_fault } => {
            let report = gradcheck(seed, inject_fault)?;
            print!("{}", report.render());
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
