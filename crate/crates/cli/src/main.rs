//! `hgmamba` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime or numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hgmamba", version, about = "Multimodal ncRNA classifier")]
struct Cli {
    /// Worker threads for batched evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    GenData {
        /// Synthetic spec (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `checkpoint.hgmb` and `metrics.csv` under `--out`.
    Train {
        /// Model configuration (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of seq,str,exp; overrides `[data] modalities`.
        #[arg(long)]
        modalities: Option<String>,
    },
    /// Evaluate the best parameters of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
    },
    /// Finite-difference gradient check of each module.
    Gradcheck {
        /// `all` or one of cpkan, msgraph, mkcl, fusion, head.
        #[arg(long, default_value = "all")]
        module: String,
        /// Negate matmul input gradients before checking.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Write per-record embeddings of one stage as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// seq, str, exp or fused.
        #[arg(long)]
        stage: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write structure attention weights per record, layer, head and edge as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenData { spec, out } => commands::gen_data(spec.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            modalities,
        } => commands::train(config.as_deref(), &data, &out, modalities.as_deref()),
        Command::Eval { checkpoint, data, split } => commands::eval(&checkpoint, &data, split),
        Command::Gradcheck {
            module,
            inject_sign_flip,
        } => commands::gradcheck(&module, inject_sign_flip),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            stage,
            out,
        } => commands::export_embeddings(&checkpoint, &data, &stage, &out),
        Command::ExportAttention { checkpoint, data, out } => commands::export_attention(&checkpoint, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
