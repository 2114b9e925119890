use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qbe_core::config::RunConfig;
use qbe_core::pipeline;
use qbe_core::Result;

/// Query-by-example spoken term detection pipeline.
#[derive(Parser, Debug)]
#[command(name = "qbe", version)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into `corpus_dir`.
    GenCorpus,
    /// Train monolingual and multilingual bottleneck networks.
    TrainBnf,
    /// Extract bottleneck features with the model named by `features`.
    Extract,
    /// Subsequence DTW search; writes scores_dtw_<features>.tsv.
    SearchDtw,
    /// Train the CNN matcher on `features`.
    TrainCnn,
    /// Score with the CNN matcher; writes scores_cnn.tsv.
    SearchCnn,
    /// Train extractor and matcher jointly (`matcher_frozen=true` tunes only the extractor).
    TrainE2e,
    /// Score with the jointly trained model; writes scores_e2e.tsv.
    SearchE2e,
    /// Compute min_cnxe and mtwv of a score file, with DET CSV and SVG.
    Eval,
    /// Run every stage in order and print a summary table.
    Run {
        /// Also tune an extractor through the frozen matcher and search it with DTW.
        #[arg(long)]
        finetune: bool,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::GenCorpus => pipeline::cmd_gen_corpus(&cfg)?,
        Command::TrainBnf => {
            for (name, h) in pipeline::cmd_train_bnf(&cfg)? {
                let acc = h.dev_accuracy.last().copied().unwrap_or(f64::NAN);
                println!("bnf_{name}: dev_accuracy = {acc:.4}");
            }
        }
        Command::Extract => pipeline::cmd_extract(&cfg)?,
        Command::SearchDtw => println!("{}", pipeline::cmd_search_dtw(&cfg)?.display()),
        Command::TrainCnn => {
            let h = pipeline::cmd_train_cnn(&cfg)?;
            println!("cnn: best_epoch = {}, dev_loss = {:.6}", h.best_epoch, h.dev_loss[h.best_epoch]);
        }
        Command::SearchCnn => println!("{}", pipeline::cmd_search_cnn(&cfg)?.display()),
        Command::TrainE2e => {
            let h = pipeline::cmd_train_e2e(&cfg)?;
            println!("e2e: best_epoch = {}, dev_loss = {:.6}", h.best_epoch, h.dev_loss[h.best_epoch]);
        }
        Command::SearchE2e => println!("{}", pipeline::cmd_search_e2e(&cfg)?.display()),
        Command::Eval => print!("{}", pipeline::cmd_eval(&cfg)?.to_text()),
        Command::Run { finetune } => print!("{}", pipeline::run_experiment(&cfg, finetune)?.summary()),
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
