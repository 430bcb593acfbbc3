use melgraph::audio_io::{load_split_segments, load_wav, read_manifest, read_split_manifest, Split};
use melgraph::synthgen::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[..x.len() / 2].iter().map(|c| c.norm()).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

fn pure(hz: f64) -> ClassSpec {
    ClassSpec {
        name: "tone".into(),
        tonal_hz: vec![hz],
        tonal_amp: vec![1.0],
        mod_rate_hz: 0.0,
        mod_depth: 0.0,
        ar_radius: 0.5,
        ar_angle: 0.0,
        snr_db: f64::INFINITY,
        jitter: 0.0,
    }
}

#[test]
fn same_seed_same_samples() {
    for spec in default_preset() {
        let a = gen_sample(&spec, 1.0, SAMPLE_RATE, 42).unwrap();
        let b = gen_sample(&spec, 1.0, SAMPLE_RATE, 42).unwrap();
        let c = gen_sample(&spec, 1.0, SAMPLE_RATE, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 1.0 && (peak - PEAK).abs() < 1e-12);
    }
}

#[test]
fn lone_tonal_peaks_at_its_frequency() {
    // 1 s at 16 kHz gives 1 Hz bins
    let x = gen_sample(&pure(500.0), 1.0, SAMPLE_RATE, 7).unwrap();
    let k = argmax(&magnitude_spectrum(&x));
    assert!(k.abs_diff(500) <= 1, "peak bin {k}");

    let jittered = ClassSpec { jitter: DEFAULT_JITTER, ..pure(500.0) };
    let x = gen_sample(&jittered, 1.0, SAMPLE_RATE, 7).unwrap();
    let k = argmax(&magnitude_spectrum(&x));
    assert!((k as f64 - 500.0).abs() <= 500.0 * DEFAULT_JITTER + 1.0, "peak bin {k}");
}

#[test]
fn full_modulation_shows_in_the_envelope() {
    let spec = ClassSpec {
        mod_rate_hz: 5.0,
        mod_depth: 1.0,
        ..pure(1000.0)
    };
    let secs = 4.0;
    let x = gen_sample(&spec, secs, SAMPLE_RATE, 3).unwrap();
    // rectify, then a 10 ms moving average, then decimate to 100 Hz
    let rect: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let win = 160;
    let env: Vec<f64> = rect.chunks(win).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    let centered: Vec<f64> = env.iter().map(|v| v - mean).collect();
    let spec_env = magnitude_spectrum(&centered);
    let k = argmax(&spec_env[1..]) + 1;
    let hz = k as f64 / secs;
    assert!((hz - 5.0).abs() <= 1.0 / secs, "envelope peak {hz} Hz");
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        ClassSpec { tonal_hz: vec![9000.0], ..pure(1.0) },
        ClassSpec { mod_depth: 1.5, ..pure(100.0) },
        ClassSpec { ar_radius: 1.0, ..pure(100.0) },
        ClassSpec { tonal_amp: vec![], ..pure(100.0) },
        ClassSpec { tonal_hz: vec![], tonal_amp: vec![], ..pure(100.0) },
    ];
    for s in bad {
        assert!(gen_sample(&s, 1.0, SAMPLE_RATE, 0).is_err(), "{s:?}");
    }
    assert!(preset("nope").is_err());
}

#[test]
fn split_counts_from_fractions() {
    let c = SplitCounts::from_fractions(70);
    assert_eq!((c.train, c.val, c.test), (49, 10, 11));
    let c = SplitCounts::from_fractions(20);
    assert_eq!((c.train, c.val, c.test), (14, 3, 3));
}

#[test]
fn dataset_layout_balance_and_reproducibility() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let counts = SplitCounts { train: 3, val: 1, test: 1 };
    let a = gen_dataset(&default_preset(), counts, 99, dir_a.path()).unwrap();
    let b = gen_dataset(&default_preset(), counts, 99, dir_b.path()).unwrap();

    let manifest = read_manifest(&a.manifest).unwrap();
    assert_eq!(manifest.len(), 20);
    for c in 0..4 {
        assert_eq!(manifest.iter().filter(|e| e.label == c).count(), 5);
    }
    for e in &manifest {
        let name = e.path.file_name().unwrap();
        let fa = std::fs::read(&e.path).unwrap();
        let fb = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(fa, fb, "{name:?} differs between runs");
        let buf = load_wav(&e.path).unwrap();
        assert_eq!(buf.sample_rate, SAMPLE_RATE);
        assert_eq!(buf.samples.len(), 80_000);
        assert!(buf.samples.iter().all(|v| v.abs() <= 1.0));
    }
    assert_eq!(
        std::fs::read(&a.split_manifest).unwrap(),
        std::fs::read(&b.split_manifest).unwrap()
    );

    let rows = read_split_manifest(&a.split_manifest).unwrap();
    for c in 0..4 {
        let count = |s: Split| rows.iter().filter(|r| r.label == c && r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (3, 1, 1));
    }
    let segs = load_split_segments(&rows).unwrap();
    assert_eq!(segs.len(), 20);
    assert!(a.separation.is_separated(), "{:?}", a.separation);
}
