use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use sctok::guide::WindowMode;
use sctok::objective::{TrainConfig, Variant};
use sctok::shell::{cmd_align, cmd_corpus, cmd_decode, cmd_encode, cmd_eval, cmd_train, CorpusSpec, RunConfig};

#[derive(Parser)]
#[command(name = "sctok", version, about = "Speech codec with semantic and contextual guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        config: PathBuf,
        /// Override the config's variant (baseline, fusion, distill, context-align).
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Tokenize a 16-bit mono WAV with a trained checkpoint.
    Encode {
        wav: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Semantic and contextual embedding files for fusion-trained models.
        #[arg(long, requires = "contextual")]
        semantic: Option<PathBuf>,
        #[arg(long, requires = "semantic")]
        contextual: Option<PathBuf>,
    },
    /// Reconstruct a WAV from a token file.
    Decode {
        tokens: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Align contextual rows to projected token rows and print the report.
    Align {
        embeddings: PathBuf,
        token_embeddings: PathBuf,
        #[arg(long, default_value = "dynamic")]
        mode: WindowMode,
        /// Window width; defaults to floor(T' / n).
        #[arg(long)]
        window: Option<usize>,
    },
    /// Compare a test WAV against a reference.
    Eval {
        reference: PathBuf,
        test: PathBuf,
        /// Token file whose code usage entropy is reported.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Write a synthetic tone corpus with matching guidance embeddings.
    Corpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0.5)]
        duration: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, variant, steps, seed, resume } => {
            let mut run = RunConfig::load(&config)
                .with_context(|| format!("{} (variants: baseline, fusion, distill, context-align)", config.display()))?;
            run.variant = variant.unwrap_or(run.variant);
            run.steps = steps.unwrap_or(run.steps);
            run.seed = seed.unwrap_or(run.seed);
            if resume.is_some() {
                run.resume = resume;
            }
            let summary = cmd_train(&run)?;
            let last = summary.rows.last().map_or(f64::NAN, |b| b.total);
            println!(
                "trained {} to step {}; last total {last:.6}; checkpoint {}; log {}",
                run.variant,
                summary.state.step,
                run.checkpoint.display(),
                run.log.display()
            );
        }
        Command::Encode { wav, checkpoint, out, semantic, contextual } => {
            let guidance = semantic.as_deref().zip(contextual.as_deref());
            let t = cmd_encode(&wav, &checkpoint, &out, guidance)?;
            println!("{} layers x {} frames -> {}", t.layers(), t.frames(), out.display());
        }
        Command::Decode { tokens, checkpoint, out } => {
            let x = cmd_decode(&tokens, &checkpoint, &out)?;
            println!("{} samples -> {}", x.len(), out.display());
        }
        Command::Align { embeddings, token_embeddings, mode, window } => {
            let (_, report) = cmd_align(&embeddings, &token_embeddings, mode, window)?;
            print!("{report}");
        }
        Command::Eval { reference, test, tokens } => {
            print!("{}", cmd_eval(&reference, &test, tokens.as_deref())?);
        }
        Command::Corpus { dir, seed, count, duration } => {
            let desk = TrainConfig::desk(Variant::Baseline);
            let spec = CorpusSpec {
                seed,
                count,
                duration_secs: duration,
                sample_rate: desk.codec.sample_rate_hz,
                guide_dim: desk.guide_dim,
                hop: desk.codec.hop(),
            };
            let names = cmd_corpus(&dir, &spec)?;
            println!("{} clips -> {}", names.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
