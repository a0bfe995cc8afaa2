//! Bit-exact readers and writers: IDX image/label files, WAV PCM16, binary
//! PGM, and the checkpoint format.
//!
//! Every reader parses from an in-memory buffer through a cursor that tracks
//! byte offsets, so malformed input is rejected with a diagnostic naming the
//! first offending offset, and no partially-filled value escapes a failed
//! parse. Normalization maps are exact inverses over their integer domains
//! (all 256 pixel values, all 65536 PCM values).

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{ModelMode, RandomFeatures, TrainableParams};
use crate::schedule::VarianceSchedule;

// ---------------------------------------------------------------------------
// Dataset

/// What the flattened example vectors are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Image { height: usize, width: usize },
    Audio { sample_rate: u32 },
}

/// Training examples, one flattened example per row, entries in [-1, 1].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Mat,
    pub kind: DataKind,
    pub labels: Option<Vec<u8>>,
    /// Source path plus filter description, for run logs.
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        examples: Mat,
        kind: DataKind,
        labels: Option<Vec<u8>>,
        provenance: String,
    ) -> Result<Self> {
        if examples.rows() == 0 {
            return Err(Error::InvalidConfig(format!(
                "dataset has zero examples ({provenance})"
            )));
        }
        if let DataKind::Image { height, width } = kind {
            if height * width != examples.cols() {
                return Err(Error::DimensionMismatch(format!(
                    "image {height}x{width} != example dim {}",
                    examples.cols()
                )));
            }
        }
        if let Some(ls) = &labels {
            if ls.len() != examples.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels vs {} examples",
                    ls.len(),
                    examples.rows()
                )));
            }
        }
        for (i, &v) in examples.as_slice().iter().enumerate() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "example entry {i} = {v} outside [-1, 1] ({provenance})"
                )));
            }
        }
        Ok(Dataset {
            examples,
            kind,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.cols()
    }
}

// ---------------------------------------------------------------------------
// Normalization maps (exact inverses on the integer domains)

/// Pixel byte to [-1, 1]: `2u/255 - 1`.
pub fn normalize_pixel(u: u8) -> f64 {
    2.0 * (u as f64) / 255.0 - 1.0
}

/// Inverse of [`normalize_pixel`]: `round(clamp((v+1)/2, 0, 1) * 255)`,
/// rounding half away from zero (half-up on this nonnegative range).
pub fn denormalize_pixel(v: f64) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PCM16 sample to [-1, 1): `s / 32768` (exact in f64).
pub fn normalize_pcm(s: i16) -> f64 {
    (s as f64) / 32768.0
}

/// Inverse of [`normalize_pcm`] on its range; clamps the open end.
pub fn denormalize_pcm(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

// ---------------------------------------------------------------------------
// Cursor

/// Byte reader that reports offsets in parse errors.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], path: &'a str) -> Self {
        Cursor { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64_array_le(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = self.take(8 * n)?;
        let out: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for (i, v) in out.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::format(
                    self.path,
                    format!(
                        "non-finite {what}[{i}] = {v} at byte offset {}",
                        start + 8 * i
                    ),
                ));
            }
        }
        Ok(out)
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "{} trailing bytes at offset {}",
                    self.buf.len() - self.pos,
                    self.pos
                ),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// IDX

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load IDX images (optionally with labels, class filter, and row limit)
/// into a normalized image [`Dataset`].
///
/// `class_id` requires `labels_path`. Filtering happens before `limit`.
pub fn load_idx_images(
    images_path: &Path,
    labels_path: Option<&Path>,
    class_id: Option<u8>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let path_str = images_path.display().to_string();
    let buf = read_file(images_path)?;
    let mut cur = Cursor::new(&buf, &path_str);
    let magic = cur.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            &path_str,
            format!("bad IDX image magic {magic:#010x} at byte offset 0 (want {IDX_IMAGES_MAGIC:#010x})"),
        ));
    }
    let n = cur.u32_be()? as usize;
    let height = cur.u32_be()? as usize;
    let width = cur.u32_be()? as usize;
    let pixels = cur.take(n * height * width)?;
    cur.expect_end()?;

    let labels = match labels_path {
        Some(lp) => Some(load_idx_labels(lp, n)?),
        None => None,
    };
    if class_id.is_some() && labels.is_none() {
        return Err(Error::InvalidConfig(
            "class filter requires a labels file".into(),
        ));
    }

    let d = height * width;
    let keep: Vec<usize> = match (class_id, &labels) {
        (Some(c), Some(ls)) => (0..n).filter(|&i| ls[i] == c).collect(),
        _ => (0..n).collect(),
    };
    if keep.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "class {} has zero examples in {path_str}",
            class_id.unwrap()
        )));
    }
    let keep = match limit {
        Some(l) => keep.into_iter().take(l).collect(),
        None => keep,
    };

    let mut data = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        data.extend(pixels[i * d..(i + 1) * d].iter().map(|&u| normalize_pixel(u)));
    }
    let kept_labels = labels.map(|ls| keep.iter().map(|&i| ls[i]).collect());
    let provenance = format!(
        "{path_str} (class={}, limit={}, kept {} of {n})",
        class_id.map_or("all".into(), |c| c.to_string()),
        limit.map_or("none".into(), |l| l.to_string()),
        keep.len(),
    );
    Dataset::new(
        Mat::from_vec(keep.len(), d, data),
        DataKind::Image { height, width },
        kept_labels,
        provenance,
    )
}

fn load_idx_labels(path: &Path, expected_n: usize) -> Result<Vec<u8>> {
    let path_str = path.display().to_string();
    let buf = read_file(path)?;
    let mut cur = Cursor::new(&buf, &path_str);
    let magic = cur.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            &path_str,
            format!("bad IDX label magic {magic:#010x} at byte offset 0 (want {IDX_LABELS_MAGIC:#010x})"),
        ));
    }
    let n = cur.u32_be()? as usize;
    if n != expected_n {
        return Err(Error::format(
            &path_str,
            format!("label/image count mismatch: {n} labels vs {expected_n} images"),
        ));
    }
    let labels = cur.take(n)?.to_vec();
    cur.expect_end()?;
    Ok(labels)
}

/// Write an IDX image file (`n` images of `height x width` raw bytes).
pub fn write_idx_images(
    pixels: &[u8],
    n: usize,
    height: usize,
    width: usize,
    path: &Path,
) -> Result<()> {
    if pixels.len() != n * height * width {
        return Err(Error::DimensionMismatch(format!(
            "{} pixel bytes vs {n} x {height} x {width}",
            pixels.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(n as u32).to_be_bytes());
    buf.extend_from_slice(&(height as u32).to_be_bytes());
    buf.extend_from_slice(&(width as u32).to_be_bytes());
    buf.extend_from_slice(pixels);
    write_file(path, &buf)
}

/// Write an IDX label file.
pub fn write_idx_labels(labels: &[u8], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    write_file(path, &buf)
}

// ---------------------------------------------------------------------------
// WAV (PCM16)

/// Load a PCM16 WAV file as a single whole-signal example.
///
/// Mono is read as-is; stereo is averaged to mono. Anything that is not
/// 16-bit integer PCM is rejected with the offending format tag.
pub fn load_wav(path: &Path) -> Result<Dataset> {
    let path_str = path.display().to_string();
    let buf = read_file(path)?;
    let mut cur = Cursor::new(&buf, &path_str);
    if cur.take(4)? != b"RIFF" {
        return Err(Error::format(&path_str, "missing RIFF tag at byte offset 0"));
    }
    let _riff_size = cur.u32_le()?;
    if cur.take(4)? != b"WAVE" {
        return Err(Error::format(&path_str, "missing WAVE tag at byte offset 8"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while cur.pos < buf.len() {
        let id_off = cur.pos;
        let id: [u8; 4] = cur.take(4)?.try_into().unwrap();
        let size = cur.u32_le()? as usize;
        let body = cur.take(size)?;
        if size % 2 == 1 && cur.pos < buf.len() {
            let _pad = cur.take(1)?;
        }
        match &id {
            b"fmt " => {
                let mut f = Cursor::new(body, &path_str);
                let tag = f.u16_le()?;
                let channels = f.u16_le()?;
                let rate = f.u32_le()?;
                let _byte_rate = f.u32_le()?;
                let _block_align = f.u16_le()?;
                let bits = f.u16_le()?;
                if tag != 1 {
                    return Err(Error::format(
                        &path_str,
                        format!("unsupported WAV format tag {tag} at byte offset {} (only PCM = 1)", id_off + 8),
                    ));
                }
                if bits != 16 {
                    return Err(Error::format(
                        &path_str,
                        format!("unsupported bit depth {bits} (only 16-bit PCM)"),
                    ));
                }
                if channels == 0 || channels > 2 {
                    return Err(Error::format(
                        &path_str,
                        format!("unsupported channel count {channels} (mono or stereo)"),
                    ));
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, cue, ...
        }
    }
    let (_, channels, rate, _) =
        fmt.ok_or_else(|| Error::format(&path_str, "no fmt chunk found"))?;
    let data = data.ok_or_else(|| Error::format(&path_str, "no data chunk found"))?;
    if data.len() % (2 * channels as usize) != 0 {
        return Err(Error::format(
            &path_str,
            format!("data chunk size {} not a multiple of the frame size", data.len()),
        ));
    }
    let frames = data.len() / (2 * channels as usize);
    if frames == 0 {
        return Err(Error::format(&path_str, "empty data chunk"));
    }
    let mut samples = Vec::with_capacity(frames);
    match channels {
        1 => {
            for c in data.chunks_exact(2) {
                samples.push(normalize_pcm(i16::from_le_bytes(c.try_into().unwrap())));
            }
        }
        _ => {
            for c in data.chunks_exact(4) {
                let l = i16::from_le_bytes(c[0..2].try_into().unwrap()) as f64;
                let r = i16::from_le_bytes(c[2..4].try_into().unwrap()) as f64;
                samples.push((l + r) / 2.0 / 32768.0);
            }
        }
    }
    let provenance = format!("{path_str} ({frames} frames @ {rate} Hz, {channels} ch)");
    Dataset::new(
        Mat::from_vec(1, frames, samples),
        DataKind::Audio { sample_rate: rate },
        None,
        provenance,
    )
}

/// Write a mono PCM16 WAV file from normalized samples.
pub fn write_wav(samples: &[f64], sample_rate: u32, path: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty sample vector".into()));
    }
    let data_len = 2 * samples.len();
    let mut buf = Vec::with_capacity(44 + data_len);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in samples {
        buf.extend_from_slice(&denormalize_pcm(v).to_le_bytes());
    }
    write_file(path, &buf)
}

// ---------------------------------------------------------------------------
// PGM (binary, P5)

/// Write a binary PGM: `P5`, dimensions, maxval 255, then one byte per pixel
/// via [`denormalize_pixel`].
pub fn write_pgm(v: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if v.len() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "vector len {} vs {height}x{width}",
            v.len()
        )));
    }
    let mut buf = Vec::with_capacity(32 + v.len());
    write!(&mut buf, "P5\n{width} {height}\n255\n").unwrap();
    buf.extend(v.iter().map(|&x| denormalize_pixel(x)));
    write_file(path, &buf)
}

/// Read a binary PGM back to normalized values plus its dimensions.
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let path_str = path.display().to_string();
    let buf = read_file(path)?;
    let mut cur = Cursor::new(&buf, &path_str);
    if cur.take(2)? != b"P5" {
        return Err(Error::format(&path_str, "not a binary PGM (want P5) at byte offset 0"));
    }
    let width = pgm_field(&mut cur)?;
    let height = pgm_field(&mut cur)?;
    let maxval = pgm_field(&mut cur)?;
    if maxval != 255 {
        return Err(Error::format(
            &path_str,
            format!("unsupported maxval {maxval} (only 255)"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let sep = cur.u8()?;
    if !sep.is_ascii_whitespace() {
        return Err(Error::format(
            &path_str,
            format!("expected whitespace before raster at offset {}", cur.pos - 1),
        ));
    }
    let raster = cur.take(height * width)?;
    cur.expect_end()?;
    Ok((
        raster.iter().map(|&u| normalize_pixel(u)).collect(),
        height,
        width,
    ))
}

/// One ASCII integer field, skipping whitespace and `#` comments.
fn pgm_field(cur: &mut Cursor) -> Result<usize> {
    loop {
        let b = cur.u8()?;
        if b == b'#' {
            while cur.u8()? != b'\n' {}
        } else if b.is_ascii_whitespace() {
            continue;
        } else if b.is_ascii_digit() {
            let mut v = (b - b'0') as usize;
            loop {
                if cur.pos >= cur.buf.len() {
                    break;
                }
                let c = cur.buf[cur.pos];
                if c.is_ascii_digit() {
                    v = v * 10 + (c - b'0') as usize;
                    cur.pos += 1;
                } else {
                    break;
                }
            }
            return Ok(v);
        } else {
            return Err(Error::format(
                cur.path,
                format!("unexpected byte {b:#04x} in PGM header at offset {}", cur.pos - 1),
            ));
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint

const CHECKPOINT_MAGIC: &[u8; 4] = b"DRFM";
const CHECKPOINT_VERSION: u32 = 1;

/// Complete trained state: mode, schedule betas, features, parameters, the
/// root seed, and how many epochs produced it.
///
/// `weights` is stored feature-major (`N x d`) like [`RandomFeatures`]; the
/// file layout is the conceptual `d x N` row-major matrix (exact transpose).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: ModelMode,
    pub betas: Vec<f64>,
    pub weights: Mat,
    pub phases: Vec<f64>,
    pub theta1: Mat,
    pub theta2: Mat,
    pub seed: u64,
    pub epochs: u64,
}

impl Checkpoint {
    pub fn from_state(
        mode: ModelMode,
        schedule: &VarianceSchedule,
        features: &RandomFeatures,
        params: &TrainableParams,
        seed: u64,
        epochs: u64,
    ) -> Self {
        Checkpoint {
            mode,
            betas: schedule.betas().to_vec(),
            weights: features.weights().clone(),
            phases: features.phases().to_vec(),
            theta1: params.theta1.clone(),
            theta2: params.theta2.clone(),
            seed,
            epochs,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_features(&self) -> usize {
        self.weights.rows()
    }

    pub fn k_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::from_betas(self.betas.clone())
    }

    pub fn features(&self) -> Result<RandomFeatures> {
        RandomFeatures::from_parts(self.weights.clone(), self.phases.clone(), self.seed)
    }

    pub fn params(&self) -> Result<TrainableParams> {
        TrainableParams::from_parts(self.theta1.clone(), self.theta2.clone())
    }
}

/// Serialize: magic `DRFM`, u32 version, u8 mode, u32 d/N/K, u64 seed, u64
/// epochs, then little-endian f64 arrays `betas[K]`, `W[d x N]`, `b[N]`,
/// `theta1[K x N]`, `theta2[N x d]`.
pub fn write_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let d = cp.input_dim();
    let n = cp.n_features();
    let k = cp.k_steps();
    if cp.phases.len() != n
        || cp.theta1.rows() != k
        || cp.theta1.cols() != n
        || cp.theta2.rows() != n
        || cp.theta2.cols() != d
    {
        return Err(Error::DimensionMismatch(format!(
            "inconsistent checkpoint shapes (d={d}, N={n}, K={k})"
        )));
    }
    let floats = k + d * n + n + k * n + n * d;
    let mut buf = Vec::with_capacity(37 + 8 * floats);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(cp.mode.code());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&cp.seed.to_le_bytes());
    buf.extend_from_slice(&cp.epochs.to_le_bytes());
    let mut put = |vals: &[f64]| {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&cp.betas);
    // File orientation is the conceptual d x N matrix.
    put(cp.weights.transposed().as_slice());
    put(&cp.phases);
    put(cp.theta1.as_slice());
    put(cp.theta2.as_slice());
    write_file(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path_str = path.display().to_string();
    let buf = read_file(path)?;
    let mut cur = Cursor::new(&buf, &path_str);
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            &path_str,
            format!("bad checkpoint magic {magic:?} at byte offset 0"),
        ));
    }
    let version = cur.u32_le()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path_str,
            format!("unsupported checkpoint version {version} at byte offset 4"),
        ));
    }
    let mode = ModelMode::from_code(cur.u8()?)
        .map_err(|_| Error::format(&path_str, "unknown mode code at byte offset 8"))?;
    let d = cur.u32_le()? as usize;
    let n = cur.u32_le()? as usize;
    let k = cur.u32_le()? as usize;
    if d == 0 || n == 0 || k == 0 {
        return Err(Error::format(
            &path_str,
            format!("degenerate dims d={d}, N={n}, K={k} at byte offset 9"),
        ));
    }
    let seed = cur.u64_le()?;
    let epochs = cur.u64_le()?;
    let betas = cur.f64_array_le(k, "betas")?;
    let w_file = cur.f64_array_le(d * n, "W")?;
    let phases = cur.f64_array_le(n, "b")?;
    let theta1 = cur.f64_array_le(k * n, "theta1")?;
    let theta2 = cur.f64_array_le(n * d, "theta2")?;
    cur.expect_end()?;
    Ok(Checkpoint {
        mode,
        betas,
        // File stores d x N; internal layout is feature-major N x d.
        weights: Mat::from_vec(d, n, w_file).transposed(),
        phases,
        theta1: Mat::from_vec(k, n, theta1),
        theta2: Mat::from_vec(n, d, theta2),
        seed,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RhoSpec;
    use crate::rng;
    use tempfile::tempdir;

    #[test]
    fn normalization_round_trips_exhaustively() {
        for u in 0u8..=255 {
            let v = normalize_pixel(u);
            assert!((-1.0..=1.0).contains(&v));
            assert_eq!(denormalize_pixel(v), u, "pixel {u}");
        }
        for s in i16::MIN..=i16::MAX {
            let v = normalize_pcm(s);
            assert!((-1.0..1.0).contains(&v));
            assert_eq!(denormalize_pcm(v), s, "pcm {s}");
        }
    }

    #[test]
    fn pixel_map_endpoints_and_midpoint() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert!((normalize_pixel(128) - 0.00392).abs() < 1e-4);
        assert_eq!(denormalize_pixel(-1.0), 0);
        assert_eq!(denormalize_pixel(1.0), 255);
        // v = 0 -> round(127.5) = 128 (half-up).
        assert_eq!(denormalize_pixel(0.0), 128);
        // Out-of-range values clamp.
        assert_eq!(denormalize_pixel(-3.0), 0);
        assert_eq!(denormalize_pixel(3.0), 255);
    }

    #[test]
    fn pcm_map_endpoints() {
        assert_eq!(normalize_pcm(-32768), -1.0);
        assert_eq!(normalize_pcm(0), 0.0);
        assert_eq!(normalize_pcm(16384), 0.5);
        assert_eq!(denormalize_pcm(1.0), 32767); // open end clamps
        assert_eq!(denormalize_pcm(-1.0), -32768);
    }

    fn tiny_idx_pair(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // 4 images of 2x2: pixel value = 10*i + p, labels [7, 3, 7, 0].
        let mut pixels = Vec::new();
        for i in 0..4u8 {
            for p in 0..4u8 {
                pixels.push(10 * i + p);
            }
        }
        let ip = dir.join("imgs.idx3-ubyte");
        let lp = dir.join("lbls.idx1-ubyte");
        write_idx_images(&pixels, 4, 2, 2, &ip).unwrap();
        write_idx_labels(&[7, 3, 7, 0], &lp).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip_with_class_filter_and_limit() {
        let dir = tempdir().unwrap();
        let (ip, lp) = tiny_idx_pair(dir.path());

        let all = load_idx_images(&ip, Some(&lp), None, None).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all.dim(), 4);
        assert_eq!(all.kind, DataKind::Image { height: 2, width: 2 });
        assert_eq!(all.labels.as_deref(), Some(&[7, 3, 7, 0][..]));
        assert_eq!(all.examples.at(1, 2), normalize_pixel(12));

        let sevens = load_idx_images(&ip, Some(&lp), Some(7), None).unwrap();
        assert_eq!(sevens.len(), 2);
        assert_eq!(sevens.examples.at(1, 0), normalize_pixel(20));
        assert_eq!(sevens.labels.as_deref(), Some(&[7, 7][..]));

        let first = load_idx_images(&ip, Some(&lp), Some(7), Some(1)).unwrap();
        assert_eq!(first.len(), 1);
        assert_eq!(first.examples.at(0, 3), normalize_pixel(3));

        // No labels: plain load.
        let unlabeled = load_idx_images(&ip, None, None, Some(3)).unwrap();
        assert_eq!(unlabeled.len(), 3);
        assert!(unlabeled.labels.is_none());
    }

    #[test]
    fn idx_error_cases_name_offsets() {
        let dir = tempdir().unwrap();
        let (ip, lp) = tiny_idx_pair(dir.path());

        // Bad magic.
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[2] = 0x09;
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, &bytes).unwrap();
        let msg = load_idx_images(&bad, None, None, None).unwrap_err().to_string();
        assert!(msg.contains("magic") && msg.contains("offset 0"), "{msg}");

        // Truncated payload.
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
        let msg = load_idx_images(&bad, None, None, None).unwrap_err().to_string();
        assert!(msg.contains("truncated") && msg.contains("offset"), "{msg}");

        // Count mismatch (labels for 3 images).
        let lp3 = dir.path().join("three.idx");
        write_idx_labels(&[1, 2, 3], &lp3).unwrap();
        let msg = load_idx_images(&ip, Some(&lp3), None, None).unwrap_err().to_string();
        assert!(msg.contains("mismatch"), "{msg}");

        // Class with zero examples.
        let msg = load_idx_images(&ip, Some(&lp), Some(9), None).unwrap_err().to_string();
        assert!(msg.contains("zero examples"), "{msg}");

        // Class filter without labels.
        assert!(load_idx_images(&ip, None, Some(7), None).is_err());

        // Trailing garbage.
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.push(0);
        std::fs::write(&bad, &bytes).unwrap();
        let msg = load_idx_images(&bad, None, None, None).unwrap_err().to_string();
        assert!(msg.contains("trailing"), "{msg}");
    }

    #[test]
    fn wav_mono_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("tone.wav");
        let mut r = rng::stream(3, &[rng::purpose::VERIFY, 80]);
        let samples: Vec<f64> = (0..5560)
            .map(|i| {
                // Mix of a tone and noise, clamped into range.
                let t = i as f64 / 100.0;
                ((t * 2.0).sin() * 0.7
                    + 0.1 * rng::standard_normal_vec(&mut r, 1)[0])
                    .clamp(-1.0, 0.999)
            })
            .collect();
        write_wav(&samples, 16000, &p).unwrap();
        let ds = load_wav(&p).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dim(), 5560);
        assert_eq!(ds.kind, DataKind::Audio { sample_rate: 16000 });

        // write(load(f)) reproduces the PCM payload bit-exactly.
        let p2 = dir.path().join("tone2.wav");
        write_wav(ds.examples.row(0), 16000, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wav_stereo_averages_and_bad_formats_reject() {
        let dir = tempdir().unwrap();
        // Hand-build a stereo file with frames (100, 200) and (-300, 500).
        let mut buf = Vec::new();
        buf.extend_from_slice(b"RIFF");
        buf.extend_from_slice(&(36u32 + 8).to_le_bytes());
        buf.extend_from_slice(b"WAVE");
        buf.extend_from_slice(b"fmt ");
        buf.extend_from_slice(&16u32.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&2u16.to_le_bytes()); // stereo
        buf.extend_from_slice(&8000u32.to_le_bytes());
        buf.extend_from_slice(&32000u32.to_le_bytes());
        buf.extend_from_slice(&4u16.to_le_bytes());
        buf.extend_from_slice(&16u16.to_le_bytes());
        buf.extend_from_slice(b"data");
        buf.extend_from_slice(&8u32.to_le_bytes());
        for s in [100i16, 200, -300, 500] {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        let p = dir.path().join("stereo.wav");
        std::fs::write(&p, &buf).unwrap();
        let ds = load_wav(&p).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.examples.at(0, 0), 150.0 / 32768.0);
        assert_eq!(ds.examples.at(0, 1), 100.0 / 32768.0);

        // IEEE-float format tag (3) is rejected, naming the tag.
        let mut float_buf = buf.clone();
        float_buf[20] = 3;
        std::fs::write(&p, &float_buf).unwrap();
        let msg = load_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("format tag 3"), "{msg}");

        // 8-bit rejected.
        let mut eight = buf.clone();
        eight[34] = 8;
        std::fs::write(&p, &eight).unwrap();
        let msg = load_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("bit depth 8"), "{msg}");

        // Not RIFF at all.
        std::fs::write(&p, b"OggS....").unwrap();
        let msg = load_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("RIFF") && msg.contains("offset 0"), "{msg}");
    }

    #[test]
    fn pgm_write_read_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("img.pgm");
        // All -1 -> all zero bytes; all +1 -> all 255.
        write_pgm(&[-1.0; 6], 2, 3, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..9], b"P5\n3 2\n25");
        assert!(bytes.ends_with(&[0, 0, 0, 0, 0, 0]));
        write_pgm(&[1.0; 6], 2, 3, &p).unwrap();
        assert!(std::fs::read(&p).unwrap().ends_with(&[255; 6]));

        // Round trip through read_pgm hits every byte exactly.
        let v: Vec<f64> = (0..28 * 28).map(|i| normalize_pixel((i % 256) as u8)).collect();
        write_pgm(&v, 28, 28, &p).unwrap();
        let (back, h, w) = read_pgm(&p).unwrap();
        assert_eq!((h, w), (28, 28));
        assert_eq!(back, v);

        // Dimension mismatch.
        assert!(write_pgm(&[0.0; 5], 2, 3, &p).is_err());

        // Comments in the header are legal.
        std::fs::write(&p, b"P5\n# a comment\n2 1\n255\n\x00\xff").unwrap();
        let (vals, h, w) = read_pgm(&p).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(vals, vec![-1.0, 1.0]);

        // Wrong maxval rejected.
        std::fs::write(&p, b"P5\n2 1\n65535\n\x00\x00\x00\x00").unwrap();
        assert!(read_pgm(&p).unwrap_err().to_string().contains("maxval"));
    }

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let s = VarianceSchedule::linear(0.001, 0.05, 7).unwrap();
        let f = RandomFeatures::init(3, 5, RhoSpec::new(0.7), seed).unwrap();
        let mut params = TrainableParams::init(ModelMode::Drfm, 7, 5, 3, seed);
        let mut r = rng::stream(seed, &[rng::purpose::VERIFY, 81]);
        rng::fill_standard_normal(&mut r, params.theta2.as_mut_slice());
        Checkpoint::from_state(ModelMode::Nn, &s, &f, &params, seed, 321)
    }

    #[test]
    fn checkpoint_round_trip_and_size_formula() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.drfm");
        let cp = sample_checkpoint(17);
        write_checkpoint(&cp, &p).unwrap();

        let (d, n, k) = (3usize, 5usize, 7usize);
        let want = 4 + 4 + 1 + 4 + 4 + 4 + 8 + 8 + 8 * (k + d * n + n + k * n + n * d);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), want as u64);

        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back, cp); // field-for-field bit equality

        // Reconstructed pieces agree with the originals.
        let sched = back.schedule().unwrap();
        assert_eq!(sched.betas(), &cp.betas[..]);
        let feats = back.features().unwrap();
        assert_eq!(feats.weights(), &cp.weights);
        assert!(feats.rho_spec.is_none());
    }

    #[test]
    fn checkpoint_mutations_are_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("model.drfm");
        let cp = sample_checkpoint(29);
        write_checkpoint(&cp, &p).unwrap();
        let clean = std::fs::read(&p).unwrap();

        // Magic flip -> hard error at offset 0.
        let mut bytes = clean.clone();
        bytes[1] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        let msg = read_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains("magic"), "{msg}");

        // Version flip -> hard error.
        let mut bytes = clean.clone();
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_checkpoint(&p).unwrap_err().to_string().contains("version 9"));

        // Truncation -> error naming the shortfall.
        std::fs::write(&p, &clean[..clean.len() - 8]).unwrap();
        let msg = read_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains("truncated"), "{msg}");

        // Exponent-byte corruption producing inf/nan -> NonFinite error.
        let mut bytes = clean.clone();
        let betas_off = 37;
        bytes[betas_off + 6] = 0xf0;
        bytes[betas_off + 7] = 0x7f;
        std::fs::write(&p, &bytes).unwrap();
        let msg = read_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains("non-finite") && msg.contains("betas[0]"), "{msg}");

        // Mantissa-byte flip parses fine but the equality test catches it.
        let mut bytes = clean.clone();
        bytes[betas_off + 1] ^= 0x01;
        std::fs::write(&p, &bytes).unwrap();
        let tweaked = read_checkpoint(&p).unwrap();
        assert_ne!(tweaked, cp);

        // Trailing garbage rejected.
        let mut bytes = clean.clone();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_checkpoint(&p).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn dataset_validates_range_and_shapes() {
        let m = Mat::from_vec(1, 4, vec![0.0, 0.5, -1.0, 1.0]);
        assert!(Dataset::new(m.clone(), DataKind::Image { height: 2, width: 2 }, None, "t".into()).is_ok());
        assert!(Dataset::new(m.clone(), DataKind::Image { height: 2, width: 3 }, None, "t".into()).is_err());
        assert!(Dataset::new(m.clone(), DataKind::Audio { sample_rate: 1 }, Some(vec![1, 2]), "t".into()).is_err());
        let bad = Mat::from_vec(1, 2, vec![0.0, 1.5]);
        assert!(Dataset::new(bad, DataKind::Audio { sample_rate: 1 }, None, "t".into()).is_err());
        let empty = Mat::zeros(0, 3);
        assert!(Dataset::new(empty, DataKind::Audio { sample_rate: 1 }, None, "t".into()).is_err());
    }
}
