//! The five subcommand bodies. Each resolves its [`RunConfig`], echoes it to
//! `run.cfg` in the output directory, then delegates the real work to the
//! library; everything printed to stdout is a deterministic `key=value` line.

use std::path::{Path, PathBuf};

use drfm::data_io::{
    load_idx_images, load_wav, read_checkpoint, read_pgm, write_checkpoint, write_pgm, write_wav,
    DataKind, Dataset,
};
use drfm::model::RhoSpec;
use drfm::training::{self, write_loss_trace, TrainConfig};
use drfm::verify::{self, GaussianSpec, LemmaExperimentConfig, Report};
use drfm::{sampler, Checkpoint, Error, Mat, Result, VarianceSchedule};

use crate::config::RunConfig;

// ---------------------------------------------------------------------------
// Checkpoint kind sidecar: the checkpoint format itself is pure model state,
// so the CLI records what the training data was next to it.

fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn write_meta(checkpoint: &Path, kind: DataKind) -> Result<()> {
    let text = match kind {
        DataKind::Image { height, width } => {
            format!("kind=image\nheight={height}\nwidth={width}\n")
        }
        DataKind::Audio { sample_rate } => format!("kind=audio\nsample_rate={sample_rate}\n"),
    };
    let path = meta_path(checkpoint);
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_meta(checkpoint: &Path) -> Result<DataKind> {
    let path = meta_path(checkpoint);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut kind = None;
    let mut height = None;
    let mut width = None;
    let mut rate = None;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match k {
            "kind" => kind = Some(v.to_string()),
            "height" => height = v.parse::<usize>().ok(),
            "width" => width = v.parse::<usize>().ok(),
            "sample_rate" => rate = v.parse::<u32>().ok(),
            _ => {}
        }
    }
    match kind.as_deref() {
        Some("image") => match (height, width) {
            (Some(height), Some(width)) => Ok(DataKind::Image { height, width }),
            _ => Err(Error::format(
                path.display().to_string(),
                "image metadata needs height and width",
            )),
        },
        Some("audio") => rate.map(|sample_rate| DataKind::Audio { sample_rate }).ok_or_else(
            || Error::format(path.display().to_string(), "audio metadata needs sample_rate"),
        ),
        _ => Err(Error::format(
            path.display().to_string(),
            "metadata needs kind=image or kind=audio",
        )),
    }
}

// ---------------------------------------------------------------------------
// Data loading by extension.

fn load_dataset(cfg: &RunConfig, data: &Path) -> Result<Dataset> {
    let name = data.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    if name.contains("idx") || name.ends_with("-ubyte") || name.ends_with(".ubyte") {
        return load_idx_images(data, cfg.labels.as_deref(), cfg.class, cfg.limit);
    }
    match data.extension().and_then(|s| s.to_str()) {
        Some("wav") => {
            let raw = load_wav(data)?;
            chunk_audio(raw, cfg.chunk, cfg.limit)
        }
        Some("pgm") => {
            let (v, height, width) = read_pgm(data)?;
            Dataset::new(
                Mat::from_vec(1, v.len(), v),
                DataKind::Image { height, width },
                None,
                format!("{} (single image)", data.display()),
            )
        }
        _ => Err(Error::format(
            data.display().to_string(),
            "unsupported data format (expected IDX *-ubyte, .pgm, or .wav)",
        )),
    }
}

/// Cut a 1-row waveform dataset into `chunk`-sample training rows,
/// dropping the incomplete tail.
fn chunk_audio(raw: Dataset, chunk: usize, limit: Option<usize>) -> Result<Dataset> {
    if chunk == 0 {
        return Err(Error::InvalidConfig("chunk must be >= 1".into()));
    }
    let samples = raw.examples.as_slice();
    let mut rows = samples.len() / chunk;
    if rows == 0 {
        return Err(Error::InvalidConfig(format!(
            "waveform has {} samples, shorter than one chunk of {chunk}",
            samples.len()
        )));
    }
    if let Some(l) = limit {
        if l == 0 {
            return Err(Error::InvalidConfig("limit must be >= 1".into()));
        }
        rows = rows.min(l);
    }
    let mat = Mat::from_vec(rows, chunk, samples[..rows * chunk].to_vec());
    Dataset::new(
        mat,
        raw.kind,
        None,
        format!("{} (chunked into {rows} x {chunk})", raw.provenance),
    )
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(cfg: RunConfig) -> Result<()> {
    cfg.write_echo()?;
    let Some(data) = cfg.data.clone() else {
        return Err(Error::InvalidConfig("--data is required for train".into()));
    };
    let dataset = load_dataset(&cfg, &data)?;
    let schedule = cfg.schedule()?;
    let rho = cfg
        .rho_sigma
        .map(RhoSpec::new)
        .unwrap_or_else(|| RhoSpec::default_for_dim(dataset.dim()));

    let mut tc = TrainConfig::new(cfg.mode, cfg.features, cfg.epochs, cfg.seed);
    tc.learning_rate = cfg.lr;
    tc.batch = cfg.batch;
    tc.loss_weighting = cfg.weighting;
    tc.checkpoint_every = cfg.checkpoint_every;

    println!("examples={} dim={}", dataset.len(), dataset.dim());
    let run = training::train(&dataset, &tc, &schedule, rho)?;

    let ckpt_path = cfg.out_dir.join("model.ckpt");
    write_checkpoint(&run.checkpoint, &ckpt_path)?;
    write_meta(&ckpt_path, dataset.kind)?;
    for (epoch, snap) in &run.snapshots {
        let p = cfg.out_dir.join(format!("model_epoch{epoch}.ckpt"));
        write_checkpoint(snap, &p)?;
        write_meta(&p, dataset.kind)?;
    }
    let loss_path = cfg.out_dir.join("loss.tsv");
    write_loss_trace(&run.loss_trace, &loss_path)?;

    println!("checkpoint={}", ckpt_path.display());
    println!("loss_trace={}", loss_path.display());
    println!("final_loss={}", run.loss_trace.last().expect("epochs >= 1"));
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

pub fn cmd_sample(cfg: RunConfig, checkpoint: &Path, format: Option<&str>) -> Result<()> {
    cfg.write_echo()?;
    if cfg.count == 0 {
        return Err(Error::InvalidConfig("--count must be >= 1".into()));
    }
    let cp = read_checkpoint(checkpoint)?;
    let kind = read_meta(checkpoint)?;
    validate_kind(&cp, kind, checkpoint)?;
    if let Some(f) = format {
        let want = match kind {
            DataKind::Image { .. } => "pgm",
            DataKind::Audio { .. } => "wav",
        };
        if f != want {
            return Err(Error::InvalidConfig(format!(
                "--format {f} does not match the checkpoint's data kind ({want})"
            )));
        }
    }
    let variant = cfg.sampler_variant()?;
    let samples = sampler::sample(&cp, cfg.count, cfg.seed, variant)?;

    for i in 0..cfg.count {
        let row = samples.row(i);
        let path = match kind {
            DataKind::Image { height, width } => {
                let p = cfg.out_dir.join(format!("sample_{i:03}.pgm"));
                write_pgm(row, height, width, &p)?;
                p
            }
            DataKind::Audio { sample_rate } => {
                let p = cfg.out_dir.join(format!("sample_{i:03}.wav"));
                write_wav(row, sample_rate, &p)?;
                p
            }
        };
        println!("wrote={}", path.display());
    }
    let meta = format!(
        "seed={} variant={} noise_rule={} count={} kind={}\n",
        cfg.seed,
        cfg.variant,
        cfg.noise_rule,
        cfg.count,
        kind_str(kind),
    );
    let meta_file = cfg.out_dir.join("samples.meta");
    std::fs::write(&meta_file, meta).map_err(|e| Error::io(meta_file.display().to_string(), e))?;
    println!("meta={}", meta_file.display());
    Ok(())
}

fn kind_str(kind: DataKind) -> String {
    match kind {
        DataKind::Image { height, width } => format!("image:{height}x{width}"),
        DataKind::Audio { sample_rate } => format!("audio:{sample_rate}"),
    }
}

fn validate_kind(cp: &Checkpoint, kind: DataKind, checkpoint: &Path) -> Result<()> {
    if let DataKind::Image { height, width } = kind {
        if height * width != cp.input_dim() {
            return Err(Error::format(
                meta_path(checkpoint).display().to_string(),
                format!(
                    "metadata says {height}x{width} but the checkpoint dimension is {}",
                    cp.input_dim()
                ),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// denoise

pub struct DenoiseArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub truth: Option<&'a Path>,
    pub pre_corrupted: bool,
}

pub fn cmd_denoise(cfg: RunConfig, args: DenoiseArgs<'_>) -> Result<()> {
    cfg.write_echo()?;
    let Some(sigma) = cfg.noise_sigma else {
        return Err(Error::InvalidConfig("--noise-sigma is required for denoise".into()));
    };
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "--noise-sigma {sigma} must be positive and finite"
        )));
    }
    let cp = read_checkpoint(args.checkpoint)?;
    let d = cp.input_dim();

    // The input supplies its own geometry; the sidecar, when present, must
    // agree on the data kind.
    let (rows, kind) = load_rows(args.input, d)?;
    if let Ok(meta_kind) = read_meta(args.checkpoint) {
        let mismatch = !matches!(
            (meta_kind, kind),
            (DataKind::Image { .. }, DataKind::Image { .. })
                | (DataKind::Audio { .. }, DataKind::Audio { .. })
        );
        if mismatch {
            return Err(Error::format(
                args.input.display().to_string(),
                format!(
                    "input kind ({}) does not match the checkpoint's data kind ({})",
                    kind_str(kind),
                    kind_str(read_meta(args.checkpoint)?)
                ),
            ));
        }
    }

    let truth_rows = match args.truth {
        Some(t) => {
            let (tr, _) = load_rows(t, d)?;
            if tr.rows() != rows.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "truth has {} rows but the input has {}",
                    tr.rows(),
                    rows.rows()
                )));
            }
            Some(tr)
        }
        // When the tool corrupts internally, the clean input is the truth.
        None if !args.pre_corrupted => Some(rows.clone()),
        None => None,
    };

    let variant = cfg.sampler_variant()?;
    let mut corrupted = rows.clone();
    if !args.pre_corrupted {
        let mut r = drfm::rng::stream(cfg.seed, &[drfm::rng::purpose::NOISE, 0]);
        let mut g = vec![0.0; corrupted.as_slice().len()];
        drfm::rng::fill_standard_normal(&mut r, &mut g);
        for (v, n) in corrupted.as_mut_slice().iter_mut().zip(&g) {
            *v += sigma * n;
        }
    }

    let mut cleaned = Mat::zeros(rows.rows(), d);
    let mut k_used = 0;
    for i in 0..rows.rows() {
        let (x0, k) = sampler::denoise_corrupted(&cp, corrupted.row(i), sigma, cfg.seed, variant)?;
        cleaned.row_mut(i).copy_from_slice(&x0);
        k_used = k;
    }
    println!("entry_timestep={k_used}");

    if let Some(truth) = &truth_rows {
        let mse = |a: &Mat, b: &Mat| -> f64 {
            let n = a.as_slice().len() as f64;
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<f64>()
                / n
        };
        println!("input_mse={}", mse(&corrupted, truth));
        println!("output_mse={}", mse(&cleaned, truth));
    }

    let out = write_rows(&cfg.out_dir, "denoised", &cleaned, kind)?;
    println!("wrote={}", out.display());
    if !args.pre_corrupted {
        let noisy = write_rows(&cfg.out_dir, "corrupted", &corrupted, kind)?;
        println!("wrote={}", noisy.display());
    }
    Ok(())
}

/// Read an input file as rows of the checkpoint dimension `d`: a PGM is one
/// row (its geometry must multiply out to `d`), a WAV is cut into `d`-sample
/// windows (incomplete tail dropped).
fn load_rows(path: &Path, d: usize) -> Result<(Mat, DataKind)> {
    match path.extension().and_then(|s| s.to_str()) {
        Some("pgm") => {
            let (v, height, width) = read_pgm(path)?;
            if height * width != d {
                return Err(Error::DimensionMismatch(format!(
                    "{}: image is {height}x{width} = {} values but the checkpoint expects {d}",
                    path.display(),
                    height * width
                )));
            }
            Ok((Mat::from_vec(1, d, v), DataKind::Image { height, width }))
        }
        Some("wav") => {
            let raw = load_wav(path)?;
            let kind = raw.kind;
            let ds = chunk_audio(raw, d, None)?;
            Ok((ds.examples, kind))
        }
        _ => Err(Error::format(
            path.display().to_string(),
            "unsupported input format (expected .pgm or .wav)",
        )),
    }
}

fn write_rows(out_dir: &Path, stem: &str, rows: &Mat, kind: DataKind) -> Result<PathBuf> {
    match kind {
        DataKind::Image { height, width } => {
            let p = out_dir.join(format!("{stem}.pgm"));
            write_pgm(rows.row(0), height, width, &p)?;
            Ok(p)
        }
        DataKind::Audio { sample_rate } => {
            let p = out_dir.join(format!("{stem}.wav"));
            write_wav(rows.as_slice(), sample_rate, &p)?;
            Ok(p)
        }
    }
}

// ---------------------------------------------------------------------------
// verify

/// Fixed desk-scale experiment sizes: small enough to run in seconds, large
/// enough that every gate has real margin. The seed comes from the config.
mod suite {
    pub const GRAD_TRIALS: usize = 20;
    pub const GRAD_TOL: f64 = 1e-5;
    pub const DSM_TRIALS: usize = 50;
    pub const LEMMA1_TRIALS: usize = 50;
    pub const KL_MC_DRAWS: usize = 20_000;
    pub const E2E_FEATURES: usize = 256;
    pub const E2E_EPOCHS: usize = 1500;
    pub const E2E_SAMPLES: usize = 2000;
}

pub fn cmd_verify(cfg: RunConfig, suite_name: &str) -> Result<()> {
    cfg.write_echo()?;
    let seed = cfg.seed;
    let known = ["gradients", "dsm", "lemma1", "lemma2", "forward-kl", "gaussian-e2e", "all"];
    if !known.contains(&suite_name) {
        return Err(Error::InvalidConfig(format!(
            "unknown suite '{suite_name}' (expected one of {})",
            known.join(", ")
        )));
    }
    let all = suite_name == "all";
    let mut report = Report::new();

    if all || suite_name == "gradients" {
        use drfm::ModelMode::*;
        report.merge(verify::check_gradients(
            &[Drfm, Nn, Rf],
            suite::GRAD_TRIALS,
            suite::GRAD_TOL,
            seed,
        )?);
    }
    if all || suite_name == "dsm" {
        report.merge(verify::check_dsm_equivalence(suite::DSM_TRIALS, seed)?);
    }
    if all || suite_name == "lemma1" {
        report.merge(verify::check_lemma1(suite::LEMMA1_TRIALS, seed)?);
    }
    if all || suite_name == "lemma2" {
        let config = LemmaExperimentConfig { seed, ..LemmaExperimentConfig::default() };
        report.merge(verify::check_lemma2_scaling(&config)?);
    }
    if all || suite_name == "forward-kl" {
        let spec = GaussianSpec::new(vec![3.0, 0.0], identity(2))?;
        let schedule = cfg.schedule()?;
        report.merge(verify::check_forward_convergence(
            &spec,
            &schedule,
            suite::KL_MC_DRAWS,
            seed,
        )?);
    }
    if all || suite_name == "gaussian-e2e" {
        report.merge(verify::end_to_end_gaussian(
            &GaussianSpec::standard(2),
            suite::E2E_FEATURES,
            suite::E2E_EPOCHS,
            suite::E2E_SAMPLES,
            seed,
        )?);
    }

    print!("{}", report.render());
    let report_path = cfg.out_dir.join("report.txt");
    std::fs::write(&report_path, report.render())
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;

    if report.is_pass() {
        println!("verify=pass");
        Ok(())
    } else {
        println!("verify=fail");
        Err(Error::GateFailed(format!(
            "{} gate(s) failed: {}",
            report.failed_gates().len(),
            report.failed_gates().join(", ")
        )))
    }
}

fn identity(d: usize) -> Mat {
    let mut m = Mat::zeros(d, d);
    for i in 0..d {
        m.set(i, i, 1.0);
    }
    m
}

// ---------------------------------------------------------------------------
// schedule

pub fn cmd_schedule(cfg: RunConfig) -> Result<()> {
    let schedule: VarianceSchedule = cfg.schedule()?;
    let mut out = String::new();
    out.push_str(&format!(
        "# beta_start={} beta_end={} steps={}\n",
        cfg.beta_start, cfg.beta_end, cfg.steps
    ));
    out.push_str("k\tbeta\talpha\talpha_bar\tposterior_beta\n");
    for k in 1..=schedule.k_steps() {
        out.push_str(&format!(
            "{k}\t{}\t{}\t{}\t{}\n",
            schedule.beta(k)?,
            schedule.alpha(k)?,
            schedule.alpha_bar(k)?,
            schedule.posterior_variance(k)?,
        ));
    }
    print!("{out}");
    Ok(())
}
