//! Log-Mel spectrograms and the MFCC / STFT variants, normalization,
//! SpecAugment masking and the binary feature cache.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
pub const N_FRAMES: usize = 512;
pub const PREEMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const N_MFCC: usize = 20;
pub const FREQ_MASK: usize = 24;
pub const TIME_MASK: usize = 96;

/// Row-major real matrix; rows are time frames for every spectrogram here.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

pub fn preemphasis(x: &[f64], alpha: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
    }
    for w in x.windows(2) {
        y.push(w[1] - alpha * w[0]);
    }
    y
}

/// Periodic Hann window: `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn n_frames(len: usize, frame: usize, hop: usize) -> usize {
    if len < frame {
        0
    } else {
        1 + (len - frame) / hop
    }
}

/// Slices `y` into overlapping frames and applies the periodic Hann window.
pub fn frame_and_window(y: &[f64], frame: usize, hop: usize) -> Result<Grid> {
    if frame == 0 || hop == 0 {
        return Err(Error::invalid("frame and hop must be positive"));
    }
    if y.len() < frame {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {frame}-sample frame",
            y.len()
        )));
    }
    let window = hann_periodic(frame);
    let n = n_frames(y.len(), frame, hop);
    let mut data = Vec::with_capacity(n * frame);
    for t in 0..n {
        let seg = &y[t * hop..t * hop + frame];
        data.extend(seg.iter().zip(&window).map(|(a, w)| a * w));
    }
    Grid::new(n, frame, data)
}

/// `|FFT|^2` of each zero-padded frame, non-negative frequencies only.
pub fn power_spectrum(frames: &Grid, n_fft: usize) -> Result<Grid> {
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    power_spectrum_with(frames, n_fft, fft.as_ref())
}

fn power_spectrum_with(frames: &Grid, n_fft: usize, fft: &dyn Fft<f64>) -> Result<Grid> {
    if frames.cols > n_fft {
        return Err(Error::invalid(format!("frame of {} exceeds n_fft {n_fft}", frames.cols)));
    }
    let bins = n_fft / 2 + 1;
    let mut out = Grid::zeros(frames.rows, bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames.rows {
        for (b, v) in buf.iter_mut().enumerate() {
            *v = Complex::new(if b < frames.cols { frames.get(t, b) } else { 0.0 }, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in out.row_mut(t).iter_mut().zip(&buf) {
            *o = c.norm_sqr();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_mels][n_fft/2 + 1]`
    pub weights: Grid,
    /// Band edges/centers as fractional FFT-bin positions; band `m` (0-based)
    /// spans `points[m]..points[m + 2]` and peaks at `points[m + 1]`.
    pub points: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.rows
    }

    /// Fractional FFT bin at which band `m` peaks.
    pub fn center(&self, m: usize) -> f64 {
        self.points[m + 1]
    }
}

/// Triangular filters whose centers are equally spaced on the mel scale
/// between 0 Hz and Nyquist. Centers stay at their exact (fractional) bin
/// positions; each triangle is sampled at the integer FFT bins.
pub fn build_mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<MelFilterbank> {
    if n_mels == 0 || n_fft < 2 || sample_rate == 0 {
        return Err(Error::invalid("filterbank needs n_mels, n_fft and rate > 0"));
    }
    let bins = n_fft / 2 + 1;
    if n_mels + 2 > bins {
        return Err(Error::invalid(format!(
            "{n_mels} mel bands do not fit in {bins} FFT bins"
        )));
    }
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64) * n_fft as f64 / sample_rate as f64)
        .collect();
    let mut weights = Grid::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
        for (k, w) in weights.row_mut(m).iter_mut().enumerate() {
            let k = k as f64;
            *w = if k > lo && k <= c {
                (k - lo) / (c - lo)
            } else if k > c && k < hi {
                (hi - k) / (hi - c)
            } else {
                0.0
            };
        }
    }
    Ok(MelFilterbank { weights, points })
}

/// `ln(max(sum_k F_m(k) X_t(k), floor))`
pub fn log_mel(power: &Grid, fb: &MelFilterbank) -> Result<Grid> {
    if power.cols != fb.weights.cols {
        return Err(Error::shape(format!(
            "power spectrum has {} bins, filterbank expects {}",
            power.cols, fb.weights.cols
        )));
    }
    let mut out = Grid::zeros(power.rows, fb.n_mels());
    for t in 0..power.rows {
        let p = power.row(t);
        for m in 0..fb.n_mels() {
            let e: f64 = fb.weights.row(m).iter().zip(p).map(|(w, x)| w * x).sum();
            out.data[t * fb.n_mels() + m] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Appends floor-valued rows until the grid has `target` rows.
pub fn pad_time(spec: &Grid, target: usize) -> Result<Grid> {
    if spec.rows > target {
        return Err(Error::shape(format!(
            "{} frames exceed the padded length {target}",
            spec.rows
        )));
    }
    let mut data = spec.data.clone();
    data.resize(target * spec.cols, LOG_FLOOR.ln());
    Grid::new(target, spec.cols, data)
}

/// Which time-frequency representation feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    #[default]
    Mel,
    Mfcc,
    Stft,
}

impl FeatureKind {
    pub fn n_bins(self) -> usize {
        match self {
            FeatureKind::Mel => N_MELS,
            FeatureKind::Mfcc => N_MFCC,
            FeatureKind::Stft => N_FFT / 2 + 1,
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(FeatureKind::Mel),
            "mfcc" => Ok(FeatureKind::Mfcc),
            "stft" => Ok(FeatureKind::Stft),
            other => Err(Error::invalid(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// Reusable extractor holding the window, filterbank and FFT plan.
pub struct FeatureExtractor {
    kind: FeatureKind,
    fb: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(kind: FeatureKind) -> Result<Self> {
        Ok(Self {
            kind,
            fb: build_mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE)?,
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.fb
    }

    /// Unpadded log-Mel spectrogram of 16 kHz samples.
    pub fn log_mel(&self, samples: &[f64]) -> Result<Grid> {
        let power = self.power(samples)?;
        log_mel(&power, &self.fb)
    }

    fn power(&self, samples: &[f64]) -> Result<Grid> {
        let y = preemphasis(samples, PREEMPHASIS);
        let frames = frame_and_window(&y, FRAME_LEN, HOP)?;
        power_spectrum_with(&frames, N_FFT, self.fft.as_ref())
    }

    /// Padded `[512][bins]` feature grid for one segment.
    pub fn extract(&self, samples: &[f64]) -> Result<Grid> {
        match self.kind {
            FeatureKind::Mel => pad_time(&self.log_mel(samples)?, N_FRAMES),
            FeatureKind::Mfcc => mfcc(&pad_time(&self.log_mel(samples)?, N_FRAMES)?, N_MFCC),
            FeatureKind::Stft => {
                let mut p = self.power(samples)?;
                for v in &mut p.data {
                    *v = v.max(LOG_FLOOR).ln();
                }
                pad_time(&p, N_FRAMES)
            }
        }
    }
}

/// Full default pipeline: one 5 s, 16 kHz segment to a 512x128 log-Mel grid.
pub fn mel_spectrogram(samples: &[f64]) -> Result<Grid> {
    FeatureExtractor::new(FeatureKind::Mel)?.extract(samples)
}

/// Orthonormal DCT-II along each row, keeping the first `n_coeff` terms.
pub fn mfcc(spec: &Grid, n_coeff: usize) -> Result<Grid> {
    let n = spec.cols;
    if n_coeff == 0 || n_coeff > n {
        return Err(Error::invalid(format!("n_coeff must be in 1..={n}, got {n_coeff}")));
    }
    let basis: Vec<f64> = (0..n_coeff)
        .flat_map(|k| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n).map(move |j| s * (PI * k as f64 * (2 * j + 1) as f64 / (2 * n) as f64).cos())
        })
        .collect();
    let mut out = Grid::zeros(spec.rows, n_coeff);
    for t in 0..spec.rows {
        let row = spec.row(t);
        for k in 0..n_coeff {
            out.data[t * n_coeff + k] = basis[k * n..(k + 1) * n].iter().zip(row).map(|(b, x)| b * x).sum();
        }
    }
    Ok(out)
}

/// Global scalar normalization statistics from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

impl FeatureStats {
    /// Single pass over every value (pairwise-merged running moments).
    pub fn from_values<'a, T: Copy + Into<f64> + 'a>(chunks: impl IntoIterator<Item = &'a [T]>) -> Result<Self> {
        let (mut n, mut mean, mut m2) = (0f64, 0f64, 0f64);
        for chunk in chunks {
            if chunk.is_empty() {
                continue;
            }
            let cn = chunk.len() as f64;
            let cmean = chunk.iter().map(|&v| v.into()).sum::<f64>() / cn;
            let cm2: f64 = chunk.iter().map(|&v| (v.into() - cmean).powi(2)).sum();
            let total = n + cn;
            let delta = cmean - mean;
            mean += delta * cn / total;
            m2 += cm2 + delta * delta * n * cn / total;
            n = total;
        }
        if n == 0.0 {
            return Err(Error::Degenerate("no values to compute feature statistics".into()));
        }
        let std = (m2 / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate("feature standard deviation is zero".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a Grid>) -> Result<Self> {
        Self::from_values(grids.into_iter().map(|g| g.data.as_slice()))
    }

    pub fn apply<T: Float>(&self, values: &mut [T]) {
        let mean = T::from(self.mean).unwrap();
        let inv = T::from(1.0 / self.std).unwrap();
        for v in values {
            *v = (*v - mean) * inv;
        }
    }
}

pub fn normalize(spec: &Grid, stats: &FeatureStats) -> Result<Grid> {
    if !(stats.std > 0.0) || !stats.std.is_finite() {
        return Err(Error::Degenerate(format!("normalization std {}", stats.std)));
    }
    let data = spec.data.iter().map(|v| (v - stats.mean) / stats.std).collect();
    Grid::new(spec.rows, spec.cols, data)
}

/// One frequency band and one time band, each `(start, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentMasks {
    pub freq: (usize, usize),
    pub time: (usize, usize),
}

impl AugmentMasks {
    /// Widths uniform on `[0, max]`, starts uniform over the valid range.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, f_mask: usize, t_mask: usize) -> Self {
        let fw = rng.gen_range(0..=f_mask.min(cols));
        let f0 = rng.gen_range(0..=cols - fw);
        let tw = rng.gen_range(0..=t_mask.min(rows));
        let t0 = rng.gen_range(0..=rows - tw);
        Self {
            freq: (f0, fw),
            time: (t0, tw),
        }
    }

    /// Fills both bands of a row-major `[rows][cols]` grid with its mean.
    pub fn apply<T: Float + std::iter::Sum>(&self, data: &mut [T], rows: usize, cols: usize) {
        debug_assert_eq!(data.len(), rows * cols);
        let fill = data.iter().copied().sum::<T>() / T::from(data.len().max(1)).unwrap();
        let (f0, fw) = self.freq;
        let (t0, tw) = self.time;
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            if r >= t0 && r < t0 + tw {
                row.fill(fill);
            } else {
                row[f0..f0 + fw].fill(fill);
            }
        }
    }
}

/// SpecAugment with one frequency and one time mask (training only).
pub fn spec_augment<R: Rng + ?Sized>(spec: &Grid, f_mask: usize, t_mask: usize, rng: &mut R) -> (Grid, AugmentMasks) {
    let masks = AugmentMasks::sample(rng, spec.rows, spec.cols, f_mask, t_mask);
    let mut out = spec.clone();
    masks.apply(&mut out.data, spec.rows, spec.cols);
    (out, masks)
}

const CACHE_MAGIC: &[u8; 4] = b"MELF";
const CACHE_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_cache(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(15 + 4 * grid.data.len());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(grid.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(grid.cols as u32).to_le_bytes());
    bytes.push(DTYPE_F32);
    for &v in &grid.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 15 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format("feature cache", "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(Error::format("feature cache", format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if bytes[14] != DTYPE_F32 {
        return Err(Error::format("feature cache", format!("unknown dtype tag {}", bytes[14])));
    }
    let payload = &bytes[15..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::format(
            "feature cache",
            format!("expected {} payload bytes, found {}", rows * cols * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Grid::new(rows, cols, data)
}
