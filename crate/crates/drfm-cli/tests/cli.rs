//! End-to-end tests of the `drfm` binary: every subcommand, the config
//! resolution order, the documented exit codes, and byte-level determinism
//! of the artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drfm::data_io::{write_idx_images, write_idx_labels, write_pgm, write_wav};
use drfm::{sampler, VarianceSchedule};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_drfm")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Grab `key=value` from a stdout dump.
fn field(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= line in:\n{out}"))
        .to_string()
}

/// A small one-class corpus of blurry discs, written through the library's
/// bit-exact IDX writers.
fn write_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let (n, h, w) = (40usize, 8usize, 8usize);
    let mut pixels = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let amp = 120.0 + (i as f64 * 17.0) % 100.0;
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - 3.5).powi(2) + (c as f64 - 3.5).powi(2);
                pixels.push((amp * (-d2 / 6.0).exp()).min(255.0) as u8);
            }
        }
    }
    let images = dir.join("train.idx3-ubyte");
    let labels = dir.join("train.idx1-ubyte");
    write_idx_images(&pixels, n, h, w, &images).unwrap();
    write_idx_labels(&vec![3u8; n], &labels).unwrap();
    (images, labels)
}

const TINY_TRAIN: &[&str] = &[
    "train",
    "--data",
    "train.idx3-ubyte",
    "--labels",
    "train.idx1-ubyte",
    "--class",
    "3",
    "--features",
    "32",
    "--epochs",
    "60",
    "--steps",
    "8",
    "--beta-start",
    "0.001",
    "--beta-end",
    "0.1",
    "--lr",
    "0.005",
    "--seed",
    "1",
];

#[test]
fn schedule_table_matches_the_library_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["schedule", "--steps", "10", "--beta-start", "0.001", "--beta-end", "0.1"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let schedule = VarianceSchedule::linear(0.001, 0.1, 10).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.starts_with('k')).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        let k = i + 1;
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[0].parse::<usize>().unwrap(), k);
        // Shortest-round-trip printing means parsing back is bit-exact.
        assert_eq!(cols[1].parse::<f64>().unwrap(), schedule.beta(k).unwrap());
        assert_eq!(cols[2].parse::<f64>().unwrap(), schedule.alpha(k).unwrap());
        assert_eq!(cols[3].parse::<f64>().unwrap(), schedule.alpha_bar(k).unwrap());
        assert_eq!(cols[4].parse::<f64>().unwrap(), schedule.posterior_variance(k).unwrap());
    }
}

#[test]
fn train_sample_denoise_round_trip_with_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());

    // Train.
    let mut args = TINY_TRAIN.to_vec();
    args.extend_from_slice(&["--out-dir", "t"]);
    let out = run(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(field(&text, "examples"), "40 dim=64");
    let final_loss: f64 = field(&text, "final_loss").parse().unwrap();
    assert!(final_loss.is_finite() && final_loss > 0.0);
    for f in ["model.ckpt", "model.ckpt.meta", "loss.tsv", "run.cfg"] {
        assert!(dir.path().join("t").join(f).exists(), "missing {f}");
    }
    let meta = std::fs::read_to_string(dir.path().join("t/model.ckpt.meta")).unwrap();
    assert!(meta.contains("kind=image") && meta.contains("height=8"), "{meta}");

    // Sample twice with the same seed: byte-identical files.
    for out_dir in ["s1", "s2"] {
        let out = run(
            dir.path(),
            &["sample", "--checkpoint", "t/model.ckpt", "--count", "3", "--seed", "9",
              "--out-dir", out_dir],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for f in ["sample_000.pgm", "sample_001.pgm", "sample_002.pgm", "samples.meta"] {
        let a = std::fs::read(dir.path().join("s1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("s2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let meta = std::fs::read_to_string(dir.path().join("s1/samples.meta")).unwrap();
    assert!(meta.contains("seed=9") && meta.contains("variant=standard"), "{meta}");

    // A different seed changes the samples.
    let out = run(
        dir.path(),
        &["sample", "--checkpoint", "t/model.ckpt", "--count", "3", "--seed", "10",
          "--out-dir", "s3"],
    );
    assert_eq!(code(&out), 0);
    assert_ne!(
        std::fs::read(dir.path().join("s1/sample_000.pgm")).unwrap(),
        std::fs::read(dir.path().join("s3/sample_000.pgm")).unwrap()
    );

    // Denoise with internal corruption: the entry timestep must equal the
    // library's matched level, and both MSE lines are present.
    let clean: Vec<f64> = (0..64)
        .map(|i| {
            let (r, c) = (i / 8, i % 8);
            let d2 = (r as f64 - 3.5).powi(2) + (c as f64 - 3.5).powi(2);
            2.0 * (170.0 * (-d2 / 6.0).exp()).min(255.0) / 255.0 - 1.0
        })
        .collect();
    write_pgm(&clean, 8, 8, &dir.path().join("clean.pgm")).unwrap();
    let out = run(
        dir.path(),
        &["denoise", "--checkpoint", "t/model.ckpt", "--input", "clean.pgm",
          "--noise-sigma", "0.2", "--seed", "4", "--out-dir", "d"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let schedule = VarianceSchedule::linear(0.001, 0.1, 8).unwrap();
    let want_k = sampler::match_noise_level(0.2, &schedule).unwrap();
    assert_eq!(field(&text, "entry_timestep").parse::<usize>().unwrap(), want_k);
    let input_mse: f64 = field(&text, "input_mse").parse().unwrap();
    let output_mse: f64 = field(&text, "output_mse").parse().unwrap();
    assert!(input_mse > 0.0 && output_mse.is_finite());
    assert!(dir.path().join("d/denoised.pgm").exists());
    assert!(dir.path().join("d/corrupted.pgm").exists());

    // Pre-corrupted input with explicit truth: no fresh corruption applied,
    // so input_mse is exactly the corruption we wrote.
    let out = run(
        dir.path(),
        &["denoise", "--checkpoint", "t/model.ckpt", "--input", "d/corrupted.pgm",
          "--truth", "clean.pgm", "--pre-corrupted", "--noise-sigma", "0.2",
          "--seed", "4", "--out-dir", "d2"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text2 = stdout(&out);
    assert!(field(&text2, "input_mse").parse::<f64>().unwrap() > 0.0);
    assert!(!dir.path().join("d2/corrupted.pgm").exists());
}

#[test]
fn audio_lane_trains_samples_and_denoises_wav() {
    let dir = tempfile::tempdir().unwrap();
    // 1024 samples of a two-tone waveform, chunked into 32-sample rows.
    let wave: Vec<f64> = (0..1024)
        .map(|i| {
            let t = i as f64;
            0.5 * (t * 0.2).sin() + 0.3 * (t * 0.05).sin()
        })
        .collect();
    write_wav(&wave, 8000, &dir.path().join("tone.wav")).unwrap();

    let out = run(
        dir.path(),
        &["train", "--data", "tone.wav", "--chunk", "32", "--features", "24",
          "--epochs", "40", "--steps", "6", "--beta-start", "0.001", "--beta-end", "0.1",
          "--seed", "2", "--out-dir", "t"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(field(&stdout(&out), "examples"), "32 dim=32");
    let meta = std::fs::read_to_string(dir.path().join("t/model.ckpt.meta")).unwrap();
    assert!(meta.contains("kind=audio") && meta.contains("sample_rate=8000"), "{meta}");

    let out = run(
        dir.path(),
        &["sample", "--checkpoint", "t/model.ckpt", "--count", "2", "--seed", "3",
          "--out-dir", "s"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("s/sample_000.wav").exists());
    assert!(dir.path().join("s/sample_001.wav").exists());

    // Asking an audio checkpoint for PGM output is a kind mismatch.
    let out = run(
        dir.path(),
        &["sample", "--checkpoint", "t/model.ckpt", "--format", "pgm", "--out-dir", "sx"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));

    let out = run(
        dir.path(),
        &["denoise", "--checkpoint", "t/model.ckpt", "--input", "tone.wav",
          "--noise-sigma", "0.1", "--seed", "5", "--out-dir", "d"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("d/denoised.wav").exists());
}

#[test]
fn config_resolution_order_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    std::fs::write(
        dir.path().join("run_in.cfg"),
        "# comment\nepochs=5\nfeatures=16\nsteps=4\nbeta_end=0.1 # inline\n",
    )
    .unwrap();

    // Flags override the file: --epochs 7 wins, file's features=16 stays.
    let out = run(
        dir.path(),
        &["train", "--config", "run_in.cfg", "--epochs", "7", "--data", "train.idx3-ubyte",
          "--out-dir", "t"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echo = std::fs::read_to_string(dir.path().join("t/run.cfg")).unwrap();
    assert!(echo.contains("epochs=7\n"), "{echo}");
    assert!(echo.contains("features=16\n"), "{echo}");
    assert!(echo.contains("steps=4\n"), "{echo}");

    // Unknown config key: exit 1, message names the key and the line.
    std::fs::write(dir.path().join("bad.cfg"), "zzz=1\n").unwrap();
    let out = run(dir.path(), &["train", "--config", "bad.cfg", "--data", "train.idx3-ubyte"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("zzz"), "{}", stderr(&out));

    // Unknown flag: usage error, exit 1.
    let out = run(dir.path(), &["train", "--zzz", "1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn presets_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Missing --data: config error naming the flag; run.cfg still echoed.
    let out = run(dir.path(), &["train", "--preset", "paper-mnist", "--out-dir", "p"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--data"), "{}", stderr(&out));
    let echo = std::fs::read_to_string(dir.path().join("p/run.cfg")).unwrap();
    assert!(echo.contains("features=80000\n"), "{echo}");
    assert!(echo.contains("epochs=30000\n"), "{echo}");
    assert!(echo.contains("steps=100\n"), "{echo}");

    let out = run(dir.path(), &["train", "--preset", "paper-audio", "--out-dir", "pa"]);
    assert_eq!(code(&out), 1);
    let echo = std::fs::read_to_string(dir.path().join("pa/run.cfg")).unwrap();
    assert!(echo.contains("features=15000\n"), "{echo}");

    // Unknown preset: exit 1.
    let out = run(dir.path(), &["train", "--preset", "paper-video"]);
    assert_eq!(code(&out), 1);

    // Nonexistent data file: data error, exit 2.
    let out = run(
        dir.path(),
        &["train", "--data", "missing.idx3-ubyte", "--out-dir", "m"],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    // Unreadable checkpoint: exit 2.
    let out = run(dir.path(), &["sample", "--checkpoint", "missing.ckpt"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn verify_suites_exit_zero_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify", "--suite", "dsm", "--seed", "7", "--out-dir", "v"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let max_rel: f64 = field(&text, "check.dsm.max_rel_diff").parse().unwrap();
    assert!(max_rel < 1e-12, "{max_rel}");
    assert_eq!(field(&text, "verify"), "pass");
    // The report file carries the same lines.
    let report = std::fs::read_to_string(dir.path().join("v/report.txt")).unwrap();
    assert!(text.starts_with(&report));

    // Determinism: identical stdout for identical seeds.
    let a = run(dir.path(), &["verify", "--suite", "lemma1", "--seed", "7", "--out-dir", "va"]);
    let b = run(dir.path(), &["verify", "--suite", "lemma1", "--seed", "7", "--out-dir", "vb"]);
    assert_eq!(code(&a), 0);
    assert_eq!(stdout(&a), stdout(&b));

    // Unknown suite: exit 1.
    let out = run(dir.path(), &["verify", "--suite", "everything"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("everything"), "{}", stderr(&out));
}

#[test]
fn drfm_threads_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .current_dir(dir.path())
        .env("DRFM_THREADS", "zero")
        .args(["schedule", "--steps", "3", "--beta-start", "0.001", "--beta-end", "0.01"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("DRFM_THREADS"), "{}", stderr(&out));

    let out = Command::new(bin())
        .current_dir(dir.path())
        .env("DRFM_THREADS", "1")
        .args(["schedule", "--steps", "3", "--beta-start", "0.001", "--beta-end", "0.01"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}
