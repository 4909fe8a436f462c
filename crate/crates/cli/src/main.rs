//! `pmuse`: train, evaluate, query and serve the masked color model.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 runtime failure.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pmuse", version, about = "Text-aware color palette recommendation", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        data: String,
        #[arg(long)]
        val: String,
        /// JSON file with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: String,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Accuracy@1 and distribution@1 on a corpus.
    Evaluate {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: String,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        mask_count: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the frequency table of correct codes as CSV.
        #[arg(long)]
        csv: Option<String>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Recommend colors for masked slots of one document.
    Recommend {
        #[command(flatten)]
        target: Target,
        /// JSONL file holding the document.
        #[arg(long)]
        doc: String,
        /// Slots to mask, e.g. `image:0,text:2`.
        #[arg(long)]
        mask: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Generate a palette from phrases.
    Generate {
        #[command(flatten)]
        target: Target,
        /// Phrases separated by `;`.
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        length: usize,
        /// Keep duplicate colors.
        #[arg(long)]
        no_pp: bool,
    },
    /// Quantized palette of a pixel list.
    ExtractPalette {
        /// File of `#rrggbb` values separated by whitespace or commas.
        #[arg(long)]
        pixels: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic corpus as JSONL.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
        /// Single-palette documents for generation.
        #[arg(long)]
        pat: bool,
    },
    /// Serve the HTTP API. `PMUSE_ADDR` overrides `--addr`.
    Serve {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        addr: Option<String>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Embedding store file; defaults to the checkpoint's hash provider.
    #[arg(long)]
    embeddings: Option<String>,
}

/// Where recommend/generate run: a local checkpoint or a running server.
#[derive(Debug, Args)]
struct Target {
    #[arg(long, required_unless_present = "server", conflicts_with = "server")]
    ckpt: Option<String>,
    /// Base URL of a running service, e.g. `http://127.0.0.1:8080`.
    #[arg(long)]
    server: Option<String>,
    #[command(flatten)]
    embed: EmbedArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
