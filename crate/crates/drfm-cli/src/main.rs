//! `drfm` — train, sample, denoise, verify, and inspect diffusion random
//! feature models from the command line.
//!
//! Configuration resolves in order: built-in defaults, `--preset`, the
//! `--config` file, then individual flags; the winning values are echoed to
//! `run.cfg` in the output directory. Exit codes: 0 success, 1 usage or
//! config error, 2 data error, 3 numerical failure.

mod config;
mod ops;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use drfm::{Error, Result};

#[derive(Parser)]
#[command(name = "drfm", version, about = "Diffusion random feature models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config-bearing flags shared by the subcommands; any flag given here
/// overrides the config file, which overrides the preset and the defaults.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Config file of key=value lines (# comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file: desk, paper-mnist, paper-audio.
    #[arg(long)]
    preset: Option<String>,
    /// First noise level beta_1.
    #[arg(long)]
    beta_start: Option<f64>,
    /// Last noise level beta_K.
    #[arg(long)]
    beta_end: Option<f64>,
    /// Number of diffusion timesteps K.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of random features N.
    #[arg(long)]
    features: Option<usize>,
    /// Model mode: drfm, nn, or rf.
    #[arg(long)]
    mode: Option<String>,
    /// Feature frequency scale sigma for rho (default: 1/sqrt(d)).
    #[arg(long)]
    rho_sigma: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size (default: full batch).
    #[arg(long)]
    batch: Option<usize>,
    /// Loss weighting: unweighted or ddpm.
    #[arg(long)]
    weighting: Option<String>,
    /// Root seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep an interim checkpoint every this many epochs (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// How many samples to generate.
    #[arg(long)]
    count: Option<usize>,
    /// Sampler variant: standard or paper-literal.
    #[arg(long)]
    variant: Option<String>,
    /// Reverse-step noise scale for variant=standard: beta-sqrt, posterior-sqrt, or zero.
    #[arg(long)]
    noise_rule: Option<String>,
    /// Corruption level sigma for denoise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Window length when chunking raw audio into training rows.
    #[arg(long)]
    chunk: Option<usize>,
    /// Keep only examples with this label (needs --labels).
    #[arg(long)]
    class: Option<u8>,
    /// Keep at most this many examples.
    #[arg(long)]
    limit: Option<usize>,
    /// Training data: IDX images (*-ubyte), a .wav waveform, or a .pgm image.
    #[arg(long)]
    data: Option<PathBuf>,
    /// IDX label file paired with --data.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory (default: out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a noise predictor; writes model.ckpt, loss.tsv, and run.cfg.
    Train(Overrides),
    /// Generate samples from a checkpoint as PGM or WAV files.
    Sample {
        /// Trained model checkpoint (expects a .meta sidecar).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output format, must match the checkpoint's data kind: pgm or wav.
        #[arg(long)]
        format: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Denoise an input file through the reverse chain from the matched level.
    Denoise {
        /// Trained model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file (.pgm or .wav).
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth file for the MSE report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Treat the input as already corrupted at --noise-sigma.
        #[arg(long)]
        pre_corrupted: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run verification suites; exit 0 iff every hard gate passes.
    Verify {
        /// gradients, dsm, lemma1, lemma2, forward-kl, gaussian-e2e, or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the beta/alpha/alpha_bar/posterior_beta table as TSV.
    Schedule(Overrides),
}

fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &o.preset {
        cfg.apply_preset(p)?;
    }
    if let Some(path) = &o.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = o.beta_start {
        cfg.beta_start = v;
    }
    if let Some(v) = o.beta_end {
        cfg.beta_end = v;
    }
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.features {
        cfg.features = v;
    }
    if let Some(v) = &o.mode {
        cfg.mode = v.parse()?;
    }
    if let Some(v) = o.rho_sigma {
        cfg.rho_sigma = Some(v);
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch {
        cfg.batch = Some(v);
    }
    if let Some(v) = &o.weighting {
        cfg.weighting = v.parse()?;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = o.count {
        cfg.count = v;
    }
    if let Some(v) = &o.variant {
        cfg.apply_kv("variant", v)?;
    }
    if let Some(v) = &o.noise_rule {
        cfg.noise_rule = v.parse()?;
    }
    if let Some(v) = o.noise_sigma {
        cfg.noise_sigma = Some(v);
    }
    if let Some(v) = o.chunk {
        cfg.chunk = v;
    }
    if let Some(v) = o.class {
        cfg.class = Some(v);
    }
    if let Some(v) = o.limit {
        cfg.limit = Some(v);
    }
    if let Some(v) = &o.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &o.labels {
        cfg.labels = Some(v.clone());
    }
    if let Some(v) = &o.out_dir {
        cfg.out_dir = v.clone();
    }
    Ok(cfg)
}

/// Cap the rayon pool when DRFM_THREADS is set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DRFM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("DRFM_THREADS={raw}: expected a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.cmd {
        Cmd::Train(o) => ops::cmd_train(resolve(&o)?),
        Cmd::Sample { checkpoint, format, overrides } => {
            ops::cmd_sample(resolve(&overrides)?, &checkpoint, format.as_deref())
        }
        Cmd::Denoise { checkpoint, input, truth, pre_corrupted, overrides } => ops::cmd_denoise(
            resolve(&overrides)?,
            ops::DenoiseArgs {
                checkpoint: &checkpoint,
                input: &input,
                truth: truth.as_deref(),
                pre_corrupted,
            },
        ),
        Cmd::Verify { suite, overrides } => ops::cmd_verify(resolve(&overrides)?, &suite),
        Cmd::Schedule(o) => ops::cmd_schedule(resolve(&o)?),
    }
}

/// 0 success, 1 usage/config, 2 data, 3 numerical.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::TimestepOutOfRange { .. } => 1,
        Error::Io { .. } | Error::Format { .. } | Error::DimensionMismatch(_) => 2,
        Error::NonFinite(_) | Error::GateFailed(_) => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
