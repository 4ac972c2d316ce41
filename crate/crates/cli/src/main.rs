mod data;
mod eval;
mod latent;
mod train;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "gatedgan", version, about = "Train, evaluate, edit and serve gated style-based generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair on a dataset.
    Train(train::TrainArgs),
    /// FID, noise ablations and noise sensitivity.
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    /// PCA bases, projection and style-mixing grids.
    #[command(subcommand)]
    Latent(latent::LatentCommand),
    /// Dataset acquisition and preparation.
    #[command(subcommand)]
    Data(data::DataCommand),
    /// Run the HTTP inference service.
    Serve {
        /// TOML configuration; `GATEDGAN_*` variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Train(a) => train::run(a),
        Command::Eval(c) => eval::run(c),
        Command::Latent(c) => latent::run(c),
        Command::Data(c) => data::run(c),
        Command::Serve { config } => {
            let cfg = gatedgan_service::ServiceConfig::load(config.as_deref())?;
            tokio::runtime::Runtime::new()?.block_on(gatedgan_service::serve(cfg))?;
            Ok(())
        }
    }
}

/// Writes `text` to `path`, or stdout when absent.
pub(crate) fn emit(path: Option<&std::path::Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Parses `1,2,5-7` into seeds.
pub(crate) fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (
                    a.parse().map_err(|_| format!("bad seed '{a}'"))?,
                    b.parse().map_err(|_| format!("bad seed '{b}'"))?,
                );
                if a > b {
                    return Err(format!("empty seed range {part}"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad seed '{part}'"))?),
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}
