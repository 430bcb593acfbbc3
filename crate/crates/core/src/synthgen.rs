//! Deterministic synthetic ship noise: tonal lines over AR(2)-shaped
//! Gaussian broadband noise, amplitude-modulated at a propeller rate.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{write_manifest, write_split_manifest, write_wav, AudioSegment, ManifestEntry, Split, SplitRecord, SPLIT_FRACTIONS};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const SECONDS: f64 = 5.0;
/// Peak amplitude after normalization.
pub const PEAK: f64 = 0.5;
/// Jitter of the default preset.
pub const DEFAULT_JITTER: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub tonal_hz: Vec<f64>,
    pub tonal_amp: Vec<f64>,
    pub mod_rate_hz: f64,
    pub mod_depth: f64,
    /// AR(2) pole radius in `[0, 1)`.
    pub ar_radius: f64,
    /// AR(2) pole angle in radians, `[0, pi]`.
    pub ar_angle: f64,
    /// Tonal-to-broadband power ratio; `+inf` disables the noise.
    pub snr_db: f64,
    /// Relative per-sample jitter of tonal frequencies and modulation rate.
    #[serde(default)]
    pub jitter: f64,
}

impl ClassSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.tonal_hz.len() != self.tonal_amp.len() {
            return Err(Error::invalid(format!("{}: {} tonals with {} amplitudes", self.name, self.tonal_hz.len(), self.tonal_amp.len())));
        }
        if let Some(f) = self.tonal_hz.iter().find(|&&f| !(f > 0.0 && f * (1.0 + self.jitter) < nyquist)) {
            return Err(Error::invalid(format!("{}: tonal {f} Hz not below Nyquist", self.name)));
        }
        if !(0.0..=1.0).contains(&self.mod_depth) {
            return Err(Error::invalid(format!("{}: mod_depth {} outside [0, 1]", self.name, self.mod_depth)));
        }
        if !(0.0..1.0).contains(&self.ar_radius) || !(0.0..=PI).contains(&self.ar_angle) {
            return Err(Error::invalid(format!("{}: unstable or out-of-range AR pole", self.name)));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::invalid(format!("{}: jitter {} outside [0, 0.5)", self.name, self.jitter)));
        }
        if self.snr_db.is_nan() || self.mod_rate_hz < 0.0 {
            return Err(Error::invalid(format!("{}: bad snr or modulation rate", self.name)));
        }
        if self.tonal_hz.is_empty() && self.snr_db == f64::INFINITY {
            return Err(Error::invalid(format!("{}: no tonals and no noise", self.name)));
        }
        Ok(())
    }
}

/// Four classes differing in line sets, modulation rate and broadband
/// shape.
pub fn default_preset() -> Vec<ClassSpec> {
    let class = |name: &str, tonal_hz: &[f64], mod_rate_hz: f64, ar_radius: f64, ar_angle: f64| ClassSpec {
        name: name.into(),
        tonal_hz: tonal_hz.to_vec(),
        tonal_amp: tonal_hz.iter().enumerate().map(|(i, _)| 1.0 / (1.0 + i as f64 * 0.5)).collect(),
        mod_rate_hz,
        mod_depth: 0.5,
        ar_radius,
        ar_angle,
        snr_db: 10.0,
        jitter: DEFAULT_JITTER,
    };
    vec![
        class("cargo", &[60.0, 120.0, 180.0], 4.0, 0.9, 0.05 * PI),
        class("tanker", &[100.0, 300.0], 7.0, 0.8, 0.25 * PI),
        class("passenger", &[250.0, 500.0, 750.0], 10.0, 0.85, 0.5 * PI),
        class("tug", &[400.0], 13.0, 0.7, 0.75 * PI),
    ]
}

pub fn preset(name: &str) -> Result<Vec<ClassSpec>> {
    match name {
        "default" => Ok(default_preset()),
        other => Err(Error::invalid(format!("unknown preset {other:?}"))),
    }
}

/// Parameters of one draw, fixed before synthesis.
struct Draw {
    tonal_hz: Vec<f64>,
    phases: Vec<f64>,
    mod_rate_hz: f64,
    mod_phase: f64,
}

/// Tonals with random phases plus AR-filtered noise at the target SNR,
/// the sum multiplied by `1 + depth * sin(2 pi rate t)` and scaled to
/// peak [`PEAK`]. Frequencies and rate get the class's seeded jitter.
pub fn gen_sample(spec: &ClassSpec, seconds: f64, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    spec.validate(sample_rate)?;
    let n = (seconds * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::invalid("zero-length sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + spec.jitter * rng.gen_range(-1.0..=1.0);
    let draw = Draw {
        tonal_hz: spec.tonal_hz.iter().map(|f| f * jitter(&mut rng)).collect(),
        phases: spec.tonal_hz.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect(),
        mod_rate_hz: spec.mod_rate_hz * jitter(&mut rng),
        mod_phase: rng.gen_range(0.0..2.0 * PI),
    };
    let sr = sample_rate as f64;
    let tonal: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            draw.tonal_hz
                .iter()
                .zip(&spec.tonal_amp)
                .zip(&draw.phases)
                .map(|((f, a), p)| a * (2.0 * PI * f * t + p).sin())
                .sum()
        })
        .collect();
    let mut x = tonal;
    if spec.snr_db.is_finite() {
        let noise = ar2_noise(n, spec.ar_radius, spec.ar_angle, &mut rng);
        let p_noise = mean_square(&noise);
        let gain = if spec.tonal_hz.is_empty() {
            1.0
        } else {
            (mean_square(&x) / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt()
        };
        for (v, e) in x.iter_mut().zip(&noise) {
            *v += gain * e;
        }
    }
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        *v *= 1.0 + spec.mod_depth * (2.0 * PI * draw.mod_rate_hz * t + draw.mod_phase).sin();
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= s);
    }
    Ok(x)
}

/// White Gaussian noise through `1 / (1 - 2 r cos(a) z^-1 + r^2 z^-2)`,
/// after a burn-in of 1000 samples.
fn ar2_noise(n: usize, r: f64, angle: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (a1, a2) = (2.0 * r * angle.cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    let burn = 1000;
    let mut out = Vec::with_capacity(n);
    for i in 0..n + burn {
        let e: f64 = rng.sample(StandardNormal);
        let y = e + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        if i >= burn {
            out.push(y);
        }
    }
    out
}

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Per-class sample counts of each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 70/15/15, rounded down for train and val.
    pub fn from_fractions(n: usize) -> Self {
        let train = (n as f64 * SPLIT_FRACTIONS.0 + 1e-9).floor() as usize;
        let val = (n as f64 * SPLIT_FRACTIONS.1 + 1e-9).floor() as usize;
        Self {
            train,
            val,
            test: n - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Seed of sample `index` of class `class` under `master`.
pub fn sample_seed(master: u64, class: usize, index: usize) -> u64 {
    // SplitMix64 finalizer over the packed coordinates
    let mut z = master ^ ((class as u64) << 40) ^ index as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest: PathBuf,
    pub split_manifest: PathBuf,
    pub rows: Vec<SplitRecord>,
    pub separation: Separation,
}

/// Class separation of the log-Mel band profiles (time-averaged, 128-d).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Separation {
    /// Smallest Euclidean distance between two class means.
    pub min_between: f64,
    /// Largest within-class standard deviation (root mean squared distance
    /// of a class's profiles to their mean).
    pub max_within: f64,
}

impl Separation {
    pub fn is_separated(&self) -> bool {
        self.min_between > self.max_within
    }
}

/// Writes `counts.total()` WAV files per class into `dir`, with
/// `manifest.csv` (`path,label,class_name`) and `split_manifest.csv`. Sample
/// `i` of each class goes to train, then val, then test in index order.
pub fn gen_dataset(specs: &[ClassSpec], counts: SplitCounts, seed: u64, dir: impl AsRef<Path>) -> Result<GeneratedDataset> {
    let dir = dir.as_ref();
    if specs.is_empty() || counts.total() == 0 {
        return Err(Error::invalid("need at least one class and one sample"));
    }
    for s in specs {
        s.validate(SAMPLE_RATE)?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|c| (0..counts.total()).map(move |i| (c, i))).collect();
    let fx = FeatureExtractor::new(crate::features::FeatureKind::Mel)?;
    let rendered = jobs
        .par_iter()
        .map(|&(c, i)| {
            let x = gen_sample(&specs[c], SECONDS, SAMPLE_RATE, sample_seed(seed, c, i))?;
            let name = format!("{}_{i:04}.wav", specs[c].name);
            write_wav(dir.join(&name), &x, SAMPLE_RATE)?;
            let mel = fx.log_mel(&x)?;
            let profile: Vec<f64> = (0..mel.cols).map(|m| (0..mel.rows).map(|t| mel.get(t, m)).sum::<f64>() / mel.rows as f64).collect();
            Ok((name, profile))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(jobs.len());
    let mut rows = Vec::with_capacity(jobs.len());
    for (&(c, i), (name, _)) in jobs.iter().zip(&rendered) {
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            label: c,
            class_name: specs[c].name.clone(),
        });
        rows.push(SplitRecord {
            path: PathBuf::from(name),
            label: c,
            class_name: specs[c].name.clone(),
            split: counts.split_of(i),
            start_offset_s: 0.0,
        });
    }
    let manifest = dir.join("manifest.csv");
    let split_manifest = dir.join("split_manifest.csv");
    write_manifest(&manifest, &entries)?;
    write_split_manifest(&split_manifest, &rows)?;
    let profiles: Vec<Vec<&[f64]>> = (0..specs.len())
        .map(|c| rendered[c * counts.total()..(c + 1) * counts.total()].iter().map(|(_, p)| p.as_slice()).collect())
        .collect();
    let separation = separation(&profiles);
    if !separation.is_separated() {
        log::warn!(
            "class profiles overlap: nearest class means {:.3} apart, within-class spread up to {:.3}",
            separation.min_between,
            separation.max_within
        );
    }
    for r in &mut rows {
        r.path = dir.join(&r.path);
    }
    Ok(GeneratedDataset {
        manifest,
        split_manifest,
        rows,
        separation,
    })
}

fn separation(classes: &[Vec<&[f64]>]) -> Separation {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let means: Vec<Vec<f64>> = classes
        .iter()
        .map(|ps| {
            let d = ps[0].len();
            (0..d).map(|j| ps.iter().map(|p| p[j]).sum::<f64>() / ps.len() as f64).collect()
        })
        .collect();
    let max_within = classes
        .iter()
        .zip(&means)
        .map(|(ps, m)| (ps.iter().map(|p| dist(p, m).powi(2)).sum::<f64>() / ps.len() as f64).sqrt())
        .fold(0.0, f64::max);
    let mut min_between = f64::INFINITY;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            min_between = min_between.min(dist(&means[a], &means[b]));
        }
    }
    Separation { min_between, max_within }
}

/// A generated sample as an in-memory 16 kHz segment.
pub fn gen_segment(spec: &ClassSpec, label: usize, seed: u64) -> Result<AudioSegment> {
    Ok(AudioSegment {
        samples: gen_sample(spec, SECONDS, SAMPLE_RATE, seed)?,
        sample_rate: SAMPLE_RATE,
        source_id: format!("{}#{seed}", spec.name),
        start_offset_s: 0.0,
        class_label: label,
    })
}
