use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdepth::avlfe::AvlfeMode;
use rdepth::cli::{self, Overrides};
use rdepth::depthnet::DecoderVariant;
use rdepth::synthdata::Split;
use rdepth::train::EvalMode;

#[derive(Parser)]
#[command(
    name = "rdepth",
    about = "Depth estimation by feature restoration: staged training, inference, and diagnostics on synthetic scenes"
)]
struct Cli {
    /// JSON experiment config; flags override file keys
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reverse strides at inference
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, value_enum)]
    decoder: Option<DecoderVariant>,
    #[arg(long, global = true, value_enum)]
    avlfe: Option<AvlfeMode>,
    /// Subtract the full predicted degradation every reverse stride
    #[arg(long, global = true)]
    literal_eq9: bool,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset
    GenData,
    /// Stage A: train encoder, decoder block, tail, and bins head
    Pretrain,
    /// Stage B: train the restoration nets and decoder block, rest frozen
    TrainDiffusion,
    /// Stage C: train the auxiliary-view enhancement (compatible or full)
    TrainAvlfe,
    /// Depth maps and restoration traces for the test split
    Infer {
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
    },
    /// Metric CSVs (aggregate, range buckets, per image)
    Eval {
        #[arg(long, value_enum, default_value = "diffusion")]
        mode: EvalMode,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
    },
    /// Per-image, per-level feature optimization curves
    Featopt,
    /// Deviation of the reverse process from the optimized feature proxy
    Deviation {
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
    },
    /// Paired one-sided t-test between two per-image error CSVs
    Ttest {
        #[arg(long, value_name = "PATH")]
        a: PathBuf,
        #[arg(long, value_name = "PATH")]
        b: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let ov = Overrides {
        config: args.config,
        seed: args.seed,
        steps: args.steps,
        decoder: args.decoder,
        avlfe: args.avlfe,
        literal_eq9: args.literal_eq9,
        out: args.out,
    };
    let cfg = match cli::resolve_config(&ov) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match args.command {
        Command::GenData => cli::cmd_gen_data(&cfg),
        Command::Pretrain => cli::cmd_pretrain(&cfg),
        Command::TrainDiffusion => cli::cmd_train_diffusion(&cfg),
        Command::TrainAvlfe => cli::cmd_train_avlfe(&cfg),
        Command::Infer { ckpt } => cli::cmd_infer(&cfg, ckpt),
        Command::Eval { mode, split, ckpt } => cli::cmd_eval(&cfg, mode, split, ckpt),
        Command::Featopt => cli::cmd_featopt(&cfg),
        Command::Deviation { ckpt } => cli::cmd_deviation(&cfg, ckpt),
        Command::Ttest { a, b } => cli::cmd_ttest(&cfg, &a, &b),
    };
    match result {
        Ok(manifest) => {
            println!(
                "{}: wrote {} file(s) under {}",
                manifest.command,
                manifest.files.len(),
                cfg.out_dir
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
