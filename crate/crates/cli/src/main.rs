//! `sslvit` command-line entry point. Reports go to stdout as one line of
//! JSON; logs go to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sslvit::retrieval::LossKind;

#[derive(Parser)]
#[command(name = "sslvit", version, about = "Self-distilled ViT pretraining, few-shot and retrieval evaluation")]
struct Cli {
    /// Worker threads [env: SSLVIT_THREADS, default 1].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic class-conditional image dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-distillation pretraining; writes the teacher checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log path [default: <out>.log.json].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embed every image of a dataset with a checkpoint.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the retrieval projection instead of the backbone class token.
        #[arg(long)]
        retrieval_head: bool,
    },
    /// Few-shot evaluation with distribution calibration.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base_emb: PathBuf,
        #[arg(long)]
        novel_emb: PathBuf,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Metric-learning fine-tuning and Recall@K evaluation.
    Retrieval {
        #[command(subcommand)]
        action: RetrievalAction,
    },
}

#[derive(Subcommand)]
enum RetrievalAction {
    /// Fine-tune a teacher checkpoint with a metric loss.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset for the reported Recall@K [default: the training data].
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// margin, proxy-nca or multi-similarity.
        #[arg(long)]
        loss: Option<LossKind>,
        /// Comma-separated Recall@K cutoffs.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Recall@K of a checkpoint; backbone-only checkpoints use the
    /// normalized class token.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let result = commands::thread_count(cli.threads).and_then(|n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| commands::CliError::Runtime(e.to_string()))?;
        run(cli.command)
    });
    match result {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<serde_json::Value, commands::CliError> {
    match command {
        Command::Synth { common, out } => commands::synth(&common, &out),
        Command::Pretrain { common, data, out, log } => commands::pretrain(&common, &data, &out, log.as_deref()),
        Command::Embed {
            model,
            data,
            out,
            retrieval_head,
        } => commands::embed(&model, &data, &out, retrieval_head),
        Command::Fewshot {
            common,
            base_emb,
            novel_emb,
            way,
            shot,
            tasks,
        } => commands::fewshot(&common, &base_emb, &novel_emb, way, shot, tasks),
        Command::Retrieval { action } => match action {
            RetrievalAction::Train {
                common,
                model,
                data,
                out,
                eval_data,
                loss,
                k,
            } => commands::retrieval_train(&common, &model, &data, &out, eval_data.as_deref(), loss, k),
            RetrievalAction::Eval { config, model, data, k } => {
                commands::retrieval_eval(config.as_deref(), &model, &data, k)
            }
        },
    }
}
