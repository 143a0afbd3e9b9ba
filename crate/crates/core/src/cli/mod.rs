//! Command-line front end.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Result;

pub use config::{load_config, parse_config, RunConfig};
pub use pipeline::Interleave;

#[derive(Parser, Debug)]
#[command(name = "specvit", version, about = "Hyperspectral classification with a LoRA window-attention transformer")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (run root for `train`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InterleaveArg {
    Bip,
    Bsq,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cube and label map.
    Synth,
    /// Convert a raw little-endian f32 stream to a cube file.
    Convert {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        bands: usize,
        #[arg(long, value_enum, default_value = "bip")]
        interleave: InterleaveArg,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit PCA whitening and write the model and the whitened cube.
    Preprocess,
    /// Train, evaluate and write a run directory.
    Train,
    /// Recompute test metrics of a run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write a PPM classification map of a run's scene.
    Map {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `map.ppm` inside the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the parameter report.
    Report,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        if let Some(s) = cfg.data.synth.as_mut() {
            s.seed = seed;
        }
        cfg.split.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out.dir = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = cfg.out.dir.clone();
    match cli.command {
        Command::Synth => {
            let (c, l) = pipeline::run_synth(&cfg, &out)?;
            println!("cube={}\nlabels={}", c.display(), l.display());
        }
        Command::Convert {
            raw,
            height,
            width,
            bands,
            interleave,
            output,
        } => {
            let il = match interleave {
                InterleaveArg::Bip => Interleave::Bip,
                InterleaveArg::Bsq => Interleave::Bsq,
            };
            pipeline::run_convert(&raw, (height, width, bands), il, &output)?;
            println!("cube={}", output.display());
        }
        Command::Preprocess => {
            let pca = pipeline::run_preprocess(&cfg, &out)?;
            println!("components={}\nbands={}", pca.k(), pca.bands());
            for (j, ev) in pca.eigenvalues().iter().enumerate() {
                println!("eigenvalue_{}={ev}", j + 1);
            }
        }
        Command::Train => {
            let run = pipeline::run_train(&cfg)?;
            println!("run={}", run.dir.display());
            println!("oa={}\naa={}\nkappa={}", run.metrics.oa, run.metrics.aa, run.metrics.kappa);
        }
        Command::Eval { run } => {
            let m = pipeline::run_eval(&run)?;
            print!("{}", m.to_csv());
        }
        Command::Map { run, output } => {
            let output = output.unwrap_or_else(|| run.join("map.ppm"));
            let map = pipeline::run_map(&run, &output)?;
            println!("map={}\nheight={}\nwidth={}", output.display(), map.height(), map.width());
        }
        Command::Report => print!("{}", pipeline::run_report(&cfg)?.to_text()),
    }
    Ok(())
}

/// Runs one command; returns 0 on success, 1 on runtime failure and 2 on
/// usage errors.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
