use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use must::config::RunConfig;
use must::pipeline::Pipeline;
use must::Result;

#[derive(Parser, Debug)]
#[command(
    name = "must",
    version,
    about = "Multi-scale temporal phase recognition pipeline"
)]
struct Cli {
    /// Root directory; every artifact path is relative to it.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Flat `key = value` config file, applied before any --set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set tcm.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// offline or online
    #[arg(long, global = true)]
    mode: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic videos and annotations.
    Generate,
    /// Train the frame encoder on the training split.
    TrainMtfe,
    /// Embed every frame with the frozen frame encoder.
    Extract,
    /// Train the temporal consistency module on stored embeddings.
    TrainTcm,
    /// Predict phases for the held-out videos.
    Infer,
    /// Score predictions against the annotations.
    Eval,
    /// Draw ground truth and prediction ribbons as SVG.
    Ribbon {
        /// Output file, relative to the workdir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order.
    All,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(mode) = &cli.mode {
        cfg.set("mode", mode)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    let pipe = Pipeline::new(&cli.workdir, cfg)?;
    match &cli.command {
        Command::Generate => pipe.generate()?,
        Command::TrainMtfe => {
            let log = pipe.train_mtfe()?;
            if let Some(last) = log.epochs.last() {
                info!(
                    "mtfe final epoch loss {:.4} accuracy {:.4}",
                    last.loss, last.accuracy
                );
            }
        }
        Command::Extract => pipe.extract()?,
        Command::TrainTcm => {
            let log = pipe.train_tcm()?;
            if let Some(last) = log.epochs.last() {
                info!(
                    "tcm final epoch loss {:.4} accuracy {:.4}",
                    last.loss, last.accuracy
                );
            }
        }
        Command::Infer => {
            let tl = pipe.infer()?;
            info!("predicted {} videos", tl.len());
        }
        Command::Eval => {
            let (tcm, mtfe) = pipe.eval()?;
            println!("TCM\n{}\nMTFE head\n{}", tcm.to_table(), mtfe.to_table());
        }
        Command::Ribbon { out } => {
            let out = out.as_ref().map(|p| cli.workdir.join(p));
            let path = pipe.ribbon(out.as_deref())?;
            println!("{}", path.display());
        }
        Command::All => {
            let summary = pipe.run_all()?;
            println!(
                "TCM\n{}\nMTFE head\n{}",
                summary.tcm.to_table(),
                summary.mtfe.to_table()
            );
        }
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
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
