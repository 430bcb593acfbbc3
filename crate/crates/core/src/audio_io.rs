//! WAV loading, resampling, segmentation, manifests and time-ordered splits.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 16_000;
pub const SEGMENT_SECONDS: f64 = 5.0;
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// Taps per polyphase branch when upsampling; downsampling widens the
/// kernel by the rate ratio to keep the same transition band in output
/// terms.
const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 8.6;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
    pub class_label: usize,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>, class_label: usize) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("audio buffer is empty"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
            class_label,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
    pub start_offset_s: f64,
    pub class_label: usize,
}

/// Reads a PCM (integer) or IEEE-float WAV file, averaging channels to mono
/// and scaling integer samples by `2^(bits-1)`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::UnsupportedEncoding(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedEncoding(format!("{}: zero channels", path.display())));
    }
    let unsupported = |e: hound::Error| Error::UnsupportedEncoding(format!("{}: {e}", path.display()));
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(unsupported)?,
        (hound::SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(unsupported)?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    let samples: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AudioBuffer::new(samples, spec.sample_rate, source_id, 0)
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("wav", other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited rational resampling with a Kaiser-windowed sinc, evaluated
/// as a polyphase filter bank. Returns the input unchanged when the rates
/// already agree.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if buf.sample_rate == target_rate {
        return Ok(buf.clone());
    }
    let g = gcd(buf.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g; // L
    let down = buf.sample_rate as u64 / g; // M
    let n_in = buf.samples.len() as u64;
    let n_out = ((2 * n_in * up + down) / (2 * down)) as usize;

    // Cutoff in cycles per input sample, and kernel half-width in input samples.
    let ratio = up as f64 / down as f64;
    let fc = 0.5 * ratio.min(1.0);
    let half = ((TAPS_PER_PHASE / 2) as f64 / ratio.min(1.0)).ceil() as i64;
    let i0_beta = bessel_i0(KAISER_BETA);

    // One branch per output phase; phase p sits p/L input samples after a
    // whole input index.
    let bank: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps: Vec<f64> = (-half + 1..=half)
                .map(|k| {
                    let d = frac - k as f64; // distance from tap k to output instant
                    let r = d / half as f64;
                    if r.abs() >= 1.0 {
                        return 0.0;
                    }
                    let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                    2.0 * fc * sinc(2.0 * fc * d) * w
                })
                .collect();
            let s: f64 = taps.iter().sum();
            for t in &mut taps {
                *t /= s;
            }
            taps
        })
        .collect();

    let x = &buf.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let taps = &bank[(pos % up) as usize];
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let idx = base + (j as i64 - half + 1);
            if idx >= 0 && (idx as u64) < n_in {
                acc += h * x[idx as usize];
            }
        }
        out.push(acc);
    }
    if out.is_empty() {
        return Err(Error::invalid("resampled buffer would be empty"));
    }
    Ok(AudioBuffer {
        samples: out,
        sample_rate: target_rate,
        source_id: buf.source_id.clone(),
        class_label: buf.class_label,
    })
}

/// Consecutive non-overlapping segments; the trailing remainder is dropped.
pub fn segment(buf: &AudioBuffer, seconds: f64) -> Result<Vec<AudioSegment>> {
    if !(seconds > 0.0) {
        return Err(Error::invalid("segment length must be positive"));
    }
    let len = (seconds * buf.sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::invalid("segment shorter than one sample"));
    }
    Ok(buf
        .samples
        .chunks_exact(len)
        .enumerate()
        .map(|(i, chunk)| AudioSegment {
            samples: chunk.to_vec(),
            sample_rate: buf.sample_rate,
            source_id: buf.source_id.clone(),
            start_offset_s: (i * len) as f64 / buf.sample_rate as f64,
            class_label: buf.class_label,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEntry {
    /// Index into the segment list given to [`split_by_time`].
    pub segment: usize,
    pub source_id: String,
    pub start_offset_s: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitManifest {
    pub entries: Vec<SplitEntry>,
    pub warnings: Vec<String>,
}

impl SplitManifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.segment)
            .collect()
    }
}

/// Per source recording, the first 70% of its timeline goes to train, the
/// next 15% to validation and the remainder to test. Sources with fewer
/// than three segments go wholly to train, with a warning.
pub fn split_by_time(segments: &[AudioSegment]) -> SplitManifest {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_source.entry(s.source_id.as_str()).or_default().push(i);
    }
    let mut manifest = SplitManifest::default();
    for (source, mut idx) in by_source {
        idx.sort_by(|&a, &b| segments[a].start_offset_s.total_cmp(&segments[b].start_offset_s));
        let n = idx.len();
        let (n_train, n_val) = if n < 3 {
            manifest.warnings.push(format!(
                "source {source:?} has {n} segment(s); all assigned to train"
            ));
            (n, 0)
        } else {
            let t = (n as f64 * SPLIT_FRACTIONS.0 + 1e-9).floor() as usize;
            let v = (n as f64 * SPLIT_FRACTIONS.1 + 1e-9).floor() as usize;
            (t, v)
        };
        for (rank, &i) in idx.iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            manifest.entries.push(SplitEntry {
                segment: i,
                source_id: source.to_string(),
                start_offset_s: segments[i].start_offset_s,
                split,
            });
        }
    }
    manifest.entries.sort_by_key(|e| e.segment);
    manifest
}

/// One row of the input manifest (`path,label,class_name`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
}

/// One row of a split manifest: a segment of a source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
    pub split: Split,
    pub start_offset_s: f64,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative audio paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows: Vec<ManifestEntry> = read_rows(path)?;
    for r in &mut rows {
        r.path = resolve(base, &r.path);
    }
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestEntry]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

pub fn read_split_manifest(path: impl AsRef<Path>) -> Result<Vec<SplitRecord>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows: Vec<SplitRecord> = read_rows(path)?;
    for r in &mut rows {
        r.path = resolve(base, &r.path);
    }
    Ok(rows)
}

pub fn write_split_manifest(path: impl AsRef<Path>, rows: &[SplitRecord]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

/// Loads every manifest file at 16 kHz, cuts 5 s segments and assigns the
/// time-ordered split. Returns the segments and one split record per
/// segment.
pub fn prepare_manifest(entries: &[ManifestEntry]) -> Result<(Vec<AudioSegment>, Vec<SplitRecord>, Vec<String>)> {
    let mut segments = Vec::new();
    let mut origin = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let mut buf = load_wav(&e.path)?;
        buf.class_label = e.label;
        buf.source_id = e.path.to_string_lossy().into_owned();
        let buf = resample(&buf, TARGET_RATE)?;
        for s in segment(&buf, SEGMENT_SECONDS)? {
            segments.push(s);
            origin.push(i);
        }
    }
    let manifest = split_by_time(&segments);
    let records = manifest
        .entries
        .iter()
        .map(|en| {
            let e = &entries[origin[en.segment]];
            SplitRecord {
                path: e.path.clone(),
                label: e.label,
                class_name: e.class_name.clone(),
                split: en.split,
                start_offset_s: en.start_offset_s,
            }
        })
        .collect();
    Ok((segments, records, manifest.warnings))
}

/// Loads the segments listed in a split manifest (each row names a file
/// and a start offset), resampling to 16 kHz.
pub fn load_split_segments(records: &[SplitRecord]) -> Result<Vec<AudioSegment>> {
    let mut cache: BTreeMap<PathBuf, AudioBuffer> = BTreeMap::new();
    let len = (SEGMENT_SECONDS * TARGET_RATE as f64) as usize;
    records
        .iter()
        .map(|r| {
            if !cache.contains_key(&r.path) {
                let buf = resample(&load_wav(&r.path)?, TARGET_RATE)?;
                cache.insert(r.path.clone(), buf);
            }
            let buf = &cache[&r.path];
            let start = (r.start_offset_s * TARGET_RATE as f64).round() as usize;
            if start + len > buf.samples.len() {
                return Err(Error::invalid(format!(
                    "{}: segment at {} s runs past the end of the file",
                    r.path.display(),
                    r.start_offset_s
                )));
            }
            Ok(AudioSegment {
                samples: buf.samples[start..start + len].to_vec(),
                sample_rate: TARGET_RATE,
                source_id: r.path.to_string_lossy().into_owned(),
                start_offset_s: r.start_offset_s,
                class_label: r.label,
            })
        })
        .collect()
}

/// True when the CSV header names a `split` column.
pub fn is_split_manifest(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    Ok(rdr.headers()?.iter().any(|h| h == "split"))
}

/// Segments and split records from either kind of manifest: a split
/// manifest is taken as written, a plain one is segmented and split by time.
pub fn load_any_manifest(path: impl AsRef<Path>) -> Result<(Vec<AudioSegment>, Vec<SplitRecord>, Vec<String>)> {
    let path = path.as_ref();
    if is_split_manifest(path)? {
        let records = read_split_manifest(path)?;
        let segments = load_split_segments(&records)?;
        Ok((segments, records, Vec::new()))
    } else {
        prepare_manifest(&read_manifest(path)?)
    }
}

/// Class names indexed by label; labels without a name get `class{i}`.
pub fn class_names(records: &[SplitRecord]) -> Vec<String> {
    let n = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let mut names: Vec<String> = (0..n).map(|i| format!("class{i}")).collect();
    for r in records {
        if !r.class_name.is_empty() {
            names[r.label] = r.class_name.clone();
        }
    }
    names
}
