use std::path::PathBuf;
use std::process::ExitCode;

use bsnpp_cli::commands;
use bsnpp_cli::{CliResult, Layout, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bsnpp", version, about = "Temporal action proposal pipeline on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// desk, paper-activitynet or paper-thumos.
    #[arg(long, global = true)]
    preset: Option<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Worker threads for training (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    GenData,
    /// Train and write a checkpoint plus the loss log.
    Train {
        /// Dataset directory (default: <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from <out>/model/checkpoint.bsnc.
        #[arg(long)]
        resume: bool,
    },
    /// Write per-video proposal files.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score proposals against annotations.
    Eval {
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Run gen-data, train, infer and eval in sequence.
    Report,
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::resolve(cli.preset.as_deref(), cli.config.as_deref(), cli.seed, cli.threads)?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::GenData => {
            let files = commands::gen_data(&cfg, &layout, None)?;
            println!("gen-data: {} files in {}", files.len(), layout.data_dir().display());
        }
        Command::Train { data, resume } => {
            let data = data.unwrap_or_else(|| layout.data_dir());
            let s = commands::train(&cfg, &layout, &data, resume)?;
            let loss = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
            println!("train: {} steps, loss {} -> {}, checkpoint {}", s.steps, loss(s.first_loss), loss(s.last_loss), s.checkpoint.display());
        }
        Command::Infer { checkpoint, data } => {
            let ckpt = checkpoint.unwrap_or_else(|| layout.checkpoint());
            let data = data.unwrap_or_else(|| layout.data_dir());
            let files = commands::infer(&cfg, &layout, &ckpt, &data, None)?;
            println!("infer: {} proposal files in {}", files.len(), layout.proposals_dir().display());
        }
        Command::Eval { proposals, annotations } => {
            let proposals = proposals.unwrap_or_else(|| layout.proposals_dir());
            let annotations = annotations.unwrap_or_else(|| layout.data_dir().join("annotations"));
            let s = commands::eval(&cfg, &layout, &proposals, &annotations, None)?;
            print_eval(&s);
        }
        Command::Report => print_eval(&commands::report(&cfg, &layout)?),
    }
    Ok(())
}

fn print_eval(s: &commands::EvalSummary) {
    let ar = |an| s.curve.ar_at(an).map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("eval: AR@1 {} AR@10 {} AR@100 {} AUC {:.2} avg mAP {:.4}", ar(1), ar(10), ar(100), s.auc, s.map.average);
    println!("report: {}", s.json.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
