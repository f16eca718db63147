//! `dnd`: command-line driver for dataset generation, tokenizer and
//! transformer training, sampling, evaluation and ICR tables.
//!
//! Every command resolves the run configuration (file, `--set` overrides,
//! `DND_SEED`), prints it as TOML, then runs. Invalid configuration exits
//! with status 2 and a one-line diagnostic; other failures exit with 1.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dnd_core::codec::{icr, icr_bits};
use dnd_core::config::{Paths, RunConfig, SEED_ENV};
use dnd_core::pipeline;
use dnd_core::Error;

#[derive(Debug, Parser)]
#[command(name = "dnd", version, about = "Depth-wise autoregressive image generation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Place every artifact under this directory (overrides [paths]).
    #[arg(long, global = true)]
    root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Datagen,
    /// Train the residual-quantized tokenizer.
    TrainTokenizer,
    /// Tokenize the dataset (cached) and train the transformer.
    TrainAr,
    /// Generate images and code grids.
    Sample {
        /// Number of images; image i uses seed + i.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Class condition; omit for unconditional sampling.
        #[arg(long)]
        class: Option<u32>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Write report.csv and report.txt.
    Eval,
    /// Print information compression ratios.
    Icr {
        /// Quantized latent as `N,f,d`; repeatable.
        #[arg(long = "code", value_name = "N,F,D")]
        codes: Vec<String>,
        /// Continuous latent as `bits,f` (bits per position); repeatable.
        #[arg(long = "bits", value_name = "BITS,F")]
        bits: Vec<String>,
    },
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig, Error> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut sets = common.sets.clone();
    if let Command::Sample { count, class, cfg_scale, temperature, top_k, .. } = command {
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("sample.{k}={v}"));
            }
        };
        push("count", count.map(|v| v.to_string()));
        push("class", class.map(|v| v.to_string()));
        push("cfg_scale", cfg_scale.map(|v| format!("{v:?}")));
        push("temperature", temperature.map(|v| format!("{v:?}")));
        push("top_k", top_k.map(|v| v.to_string()));
    }
    let mut cfg = RunConfig::from_toml_with_overrides(&text, &sets)?;
    if let Some(root) = &common.root {
        cfg.paths = Paths::under(root);
    }
    let mut cfg = cfg.resolve_env()?;
    // --seed outranks the config's seeds but not DND_SEED
    if let Command::Sample { seed: Some(s), .. } = command {
        if std::env::var_os(SEED_ENV).is_none() {
            cfg.sample.seed = *s;
        }
    }
    Ok(cfg)
}

fn parse_list<const K: usize>(raw: &str) -> anyhow::Result<[f64; K]> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("{raw:?} is not a comma-separated list of numbers"))?;
    parts.try_into().map_err(|_| anyhow::anyhow!("{raw:?} must have {K} fields"))
}

fn icr_table(codes: &[String], bits: &[String]) -> anyhow::Result<()> {
    let default_codes = ["8192,16,1", "8192,16,2", "8192,16,4", "16384,16,1", "8192,8,1", "128,4,2"].map(String::from);
    let default_bits = ["128,8".to_string()];
    let (codes, bits) = if codes.is_empty() && bits.is_empty() {
        (&default_codes[..], &default_bits[..])
    } else {
        (codes, bits)
    };
    println!("{:<28} {:>10}", "latent", "ICR");
    for raw in codes {
        let [n, f, d] = parse_list::<3>(raw)?;
        let ratio = icr(n as u64, f as u32, d as u32)?;
        println!("{:<28} {:>9.2}%", format!("N={n} f={f} d={d}"), ratio * 100.0);
    }
    for raw in bits {
        let [b, f] = parse_list::<2>(raw)?;
        let ratio = icr_bits(b, f as u32)?;
        println!("{:<28} {:>9.2}%", format!("continuous {b} bits f={f}"), ratio * 100.0);
    }
    Ok(())
}

fn run(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    match &cli.command {
        Command::Datagen => {
            let m = pipeline::run_datagen(cfg)?;
            eprintln!("wrote {} train + {} val images to {}", m.train, m.val, cfg.paths.dataset.display());
        }
        Command::TrainTokenizer => {
            pipeline::run_train_tokenizer(cfg, |e| {
                eprintln!("epoch {}: recon_l2 {:.5} commitment {:.5} usage {:?}", e.epoch, e.recon_l2, e.commitment, e.usage);
            })?;
            eprintln!("saved {}", cfg.paths.tokenizer.display());
        }
        Command::TrainAr => {
            pipeline::run_train_ar(cfg, |epoch, losses| {
                eprintln!("epoch {epoch}: per-depth CE {losses:.4?}");
            })?;
            eprintln!("saved {}", cfg.paths.model.display());
        }
        Command::Sample { .. } => {
            let paths = pipeline::run_sample(cfg)?;
            eprintln!("wrote {} samples to {}", paths.len(), cfg.paths.samples.display());
        }
        Command::Eval => {
            let report = pipeline::run_eval(cfg)?;
            print!("{}", report.to_text());
        }
        Command::Icr { codes, bits } => icr_table(codes, bits)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli.common, &cli.command) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return ExitCode::from(2);
        }
    };
    println!("# resolved configuration\n{}", cfg.to_toml());
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their cause in the message
            let (code, msg) = match e.downcast_ref::<Error>() {
                Some(err @ (Error::Config(_) | Error::InvalidArgument(_))) => (2, err.to_string()),
                Some(err) => (1, err.to_string()),
                None => (1, format!("{e:#}")),
            };
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
