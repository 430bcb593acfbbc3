//! Higher-order-statistics tests on short windows: sample cumulants, a
//! direct bispectrum estimator, the bicoherence Gaussianity test and the
//! interquartile-range linearity check.
//!
//! Normalization: with unnormalized record FFTs `X_r`, the estimator uses
//! `P(j) = sum_r |X_r(j)|^2 / (R M)` and
//! `B(j,k) = sum_r X_r(j) X_r(k) conj(X_r(j+k)) / (R M)`. For a Gaussian
//! process `|B|^2` then has mean `(M / R) P(j) P(k) P(j+k)`, so
//! `s = |B|^2 / (P P P * M / R)` is unit-mean exponential and `2s` is
//! chi-square with two degrees of freedom (the diagonal `j == k` carries an
//! extra factor of two). Non-Gaussian linear processes give the same
//! non-centrality at every bifrequency.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::special::{chi2_sf, noncentral_chi2_quantile, sample_quantile};

pub const RECORD_LEN: usize = 128;
pub const MIN_RECORDS: usize = 8;
pub const PFA_LEVEL: f64 = 0.05;
pub const WINDOW_S: f64 = 0.5;
/// `|est_iqr / theo_iqr - 1|` below this counts as linear.
pub const LINEARITY_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulantSet {
    /// Raw moments `E[x^k]`, k = 1..4.
    pub moments: [f64; 4],
    /// Cumulants `c_1..c_4`.
    pub cumulants: [f64; 4],
    /// The variance is zero (constant input).
    pub degenerate: bool,
}

pub fn sample_cumulants(x: &[f64]) -> Result<CumulantSet> {
    if x.len() < 16 {
        return Err(Error::invalid(format!("need at least 16 samples, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mut m = [0.0; 4];
    for &v in x {
        let mut p = 1.0;
        for mk in &mut m {
            p *= v;
            *mk += p;
        }
    }
    for mk in &mut m {
        *mk /= n;
    }
    let [m1, m2, m3, m4] = m;
    let c2 = m2 - m1 * m1;
    let c = [
        m1,
        c2,
        m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3),
        m4 - 4.0 * m3 * m1 - 3.0 * m2 * m2 + 12.0 * m2 * m1 * m1 - 6.0 * m1.powi(4),
    ];
    let degenerate = c2 <= f64::EPSILON * m2.abs().max(f64::MIN_POSITIVE);
    Ok(CumulantSet {
        moments: m,
        cumulants: c,
        degenerate,
    })
}

/// One principal-domain bifrequency `(j, k)`, `1 <= k <= j`, `j + k < M/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BispectrumPoint {
    pub j: usize,
    pub k: usize,
    pub value: Complex<f64>,
}

#[derive(Debug, Clone)]
pub struct BispectrumEstimate {
    pub points: Vec<BispectrumPoint>,
    /// Record-averaged power spectrum, `M` bins.
    pub power: Vec<f64>,
    pub n_records: usize,
    pub record_len: usize,
}

impl BispectrumEstimate {
    /// Looks up `B(j, k)` for either ordering of the pair.
    pub fn get(&self, j: usize, k: usize) -> Option<Complex<f64>> {
        let (j, k) = if j >= k { (j, k) } else { (k, j) };
        self.points.iter().find(|p| p.j == j && p.k == k).map(|p| p.value)
    }

    /// Normalized squared bicoherence `s(j,k)` for every principal point
    /// whose three power bins are non-zero.
    pub fn bicoherence(&self) -> Vec<(usize, usize, f64)> {
        let scale = self.record_len as f64 / self.n_records as f64;
        let p = &self.power;
        self.points
            .iter()
            .filter_map(|pt| {
                let mut denom = p[pt.j] * p[pt.k] * p[pt.j + pt.k] * scale;
                if pt.j == pt.k {
                    denom *= 2.0;
                }
                (denom > 0.0).then(|| (pt.j, pt.k, pt.value.norm_sqr() / denom))
            })
            .collect()
    }
}

/// Direct FFT estimator over non-overlapping, individually demeaned records.
pub fn estimate_bispectrum(x: &[f64], record_len: usize) -> Result<BispectrumEstimate> {
    if record_len < 8 {
        return Err(Error::invalid("record length must be at least 8"));
    }
    let r = x.len() / record_len;
    if r < MIN_RECORDS {
        return Err(Error::invalid(format!(
            "{} samples give {r} records of {record_len}; need {MIN_RECORDS}",
            x.len()
        )));
    }
    let m = record_len;
    let half = m / 2;
    let fft = FftPlanner::new().plan_fft_forward(m);
    let mut power = vec![0.0; m];
    let pairs: Vec<(usize, usize)> = (1..half)
        .flat_map(|j| (1..=j).filter(move |&k| j + k < half).map(move |k| (j, k)))
        .collect();
    let mut acc = vec![Complex::new(0.0, 0.0); pairs.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for rec in x[..r * m].chunks_exact(m) {
        let mean = rec.iter().sum::<f64>() / m as f64;
        for (b, &v) in buf.iter_mut().zip(rec) {
            *b = Complex::new(v - mean, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p += b.norm_sqr();
        }
        for (a, &(j, k)) in acc.iter_mut().zip(&pairs) {
            *a += buf[j] * buf[k] * buf[j + k].conj();
        }
    }
    let norm = (r * m) as f64;
    for p in &mut power {
        *p /= norm;
    }
    if power.iter().all(|&p| p == 0.0) {
        return Err(Error::Degenerate("signal has no power after demeaning".into()));
    }
    let points = pairs
        .into_iter()
        .zip(acc)
        .map(|((j, k), v)| BispectrumPoint { j, k, value: v / norm })
        .collect();
    Ok(BispectrumEstimate {
        points,
        power,
        n_records: r,
        record_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Decision {
    /// Null hypothesis (Gaussian) accepted.
    AcceptH0,
    AcceptH1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianityTest {
    pub statistic: f64,
    pub dof: usize,
    pub pfa: f64,
    pub decision: Decision,
}

/// `S = 2 sum s(j,k) ~ chi2(2P)` under the Gaussian null.
pub fn gaussianity_pfa(b: &BispectrumEstimate) -> Result<GaussianityTest> {
    let s = b.bicoherence();
    if s.is_empty() {
        return Err(Error::Degenerate("no bifrequency with non-zero power".into()));
    }
    let statistic: f64 = 2.0 * s.iter().map(|t| t.2).sum::<f64>();
    let dof = 2 * s.len();
    Ok(gaussianity_from_statistic(statistic, dof))
}

pub fn gaussianity_from_statistic(statistic: f64, dof: usize) -> GaussianityTest {
    let pfa = if statistic <= 0.0 { 1.0 } else { chi2_sf(statistic, dof as f64).clamp(0.0, 1.0) };
    GaussianityTest {
        statistic,
        dof,
        pfa,
        decision: if pfa >= PFA_LEVEL { Decision::AcceptH0 } else { Decision::AcceptH1 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearityTest {
    /// Estimated non-centrality of the `2s` values.
    pub lambda: f64,
    pub est_iqr: f64,
    pub theo_iqr: f64,
}

impl LinearityTest {
    pub fn ratio(&self) -> f64 {
        self.est_iqr / self.theo_iqr
    }

    pub fn is_linear(&self, tolerance: f64) -> bool {
        (self.ratio() - 1.0).abs() < tolerance
    }
}

/// Interquartile range of a non-central `chi2(2, lambda)`.
pub fn noncentral_iqr(lambda: f64) -> f64 {
    noncentral_chi2_quantile(0.75, 2.0, lambda) - noncentral_chi2_quantile(0.25, 2.0, lambda)
}

/// Compares the sample IQR of `2s` against the IQR implied by a single
/// non-centrality `lambda = max(mean(2s) - 2, 0)`.
pub fn linearity_iqr(b: &BispectrumEstimate) -> Result<LinearityTest> {
    let mut two_s: Vec<f64> = b.bicoherence().into_iter().map(|t| 2.0 * t.2).collect();
    if two_s.len() < 4 {
        return Err(Error::Degenerate("too few bifrequencies for an IQR".into()));
    }
    two_s.sort_by(f64::total_cmp);
    let mean = two_s.iter().sum::<f64>() / two_s.len() as f64;
    let lambda = (mean - 2.0).max(0.0);
    let est_iqr = sample_quantile(&two_s, 0.75) - sample_quantile(&two_s, 0.25);
    Ok(LinearityTest {
        lambda,
        est_iqr,
        theo_iqr: noncentral_iqr(lambda),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HinichResult {
    pub window_index: usize,
    pub pfa: f64,
    pub statistic: f64,
    pub dof: usize,
    pub est_iqr: f64,
    pub theo_iqr: f64,
    pub gaussian_decision: bool,
    pub linear_decision: bool,
}

fn test_window(index: usize, x: &[f64], tolerance: f64) -> Result<HinichResult> {
    let b = estimate_bispectrum(x, RECORD_LEN)?;
    let g = gaussianity_pfa(&b)?;
    let l = linearity_iqr(&b)?;
    Ok(HinichResult {
        window_index: index,
        pfa: g.pfa,
        statistic: g.statistic,
        dof: g.dof,
        est_iqr: l.est_iqr,
        theo_iqr: l.theo_iqr,
        gaussian_decision: g.decision == Decision::AcceptH0,
        linear_decision: l.is_linear(tolerance),
    })
}

/// Tests consecutive non-overlapping windows of `window_s` seconds, one
/// result per window. A silent window cannot reject Gaussianity; it is
/// reported with `pfa = 1`, zero degrees of freedom and NaN IQRs.
pub fn batch_test(samples: &[f64], sample_rate: u32, window_s: f64) -> Result<Vec<HinichResult>> {
    batch_test_with(samples, sample_rate, window_s, LINEARITY_TOLERANCE)
}

pub fn batch_test_with(samples: &[f64], sample_rate: u32, window_s: f64, tolerance: f64) -> Result<Vec<HinichResult>> {
    if !(window_s > 0.0) || sample_rate == 0 {
        return Err(Error::invalid("window length and sample rate must be positive"));
    }
    let len = (window_s * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::invalid("window shorter than one sample"));
    }
    let mut out = Vec::new();
    for (i, w) in samples.chunks_exact(len).enumerate() {
        match test_window(i, w, tolerance) {
            Ok(r) => out.push(r),
            Err(Error::Degenerate(_)) => out.push(HinichResult {
                window_index: i,
                pfa: 1.0,
                statistic: 0.0,
                dof: 0,
                est_iqr: f64::NAN,
                theo_iqr: f64::NAN,
                gaussian_decision: true,
                linear_decision: true,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn write_results_csv(path: impl AsRef<Path>, results: &[HinichResult]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
