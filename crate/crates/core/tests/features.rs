use std::f64::consts::PI;

use melgraph::features::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rows: usize, cols: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap()
}

#[test]
fn preemphasis_examples() {
    let y = preemphasis(&[1.0, 1.0, 1.0], 0.97);
    assert_eq!(y[0], 1.0);
    assert!((y[1] - 0.03).abs() < 1e-15 && (y[2] - 0.03).abs() < 1e-15);
    let x = [0.3, -0.2, 0.9];
    assert_eq!(preemphasis(&x, 0.0), x.to_vec());
    assert_eq!(preemphasis(&[1.0, 0.0, 0.0], 0.97), vec![1.0, -0.97, 0.0]);
}

#[test]
fn framing_counts_and_window() {
    let y = vec![1.0; 80_000];
    let f = frame_and_window(&y, 400, 160).unwrap();
    assert_eq!(f.rows, 498);
    let w = hann_periodic(400);
    assert_eq!(w[0], 0.0);
    assert!((w[200] - 1.0).abs() < 1e-15);
    for t in [0, 17, 497] {
        assert_eq!(f.row(t), &w[..]);
    }
    assert_eq!(frame_and_window(&vec![0.5; 400], 400, 160).unwrap().rows, 1);
    assert!(frame_and_window(&vec![0.5; 399], 400, 160).is_err());
}

#[test]
fn power_spectrum_examples() {
    let zero = Grid::zeros(2, 400);
    assert!(power_spectrum(&zero, 512).unwrap().data.iter().all(|&v| v == 0.0));

    let mut imp = Grid::zeros(1, 400);
    imp.data[0] = 1.0;
    let p = power_spectrum(&imp, 512).unwrap();
    assert_eq!(p.cols, 257);
    assert!(p.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));

    let frames = frame_and_window(&random_grid(1, 2000, 3).data, 400, 160).unwrap();
    let p = power_spectrum(&frames, 512).unwrap();
    for t in 0..frames.rows {
        let time: f64 = frames.row(t).iter().map(|v| v * v).sum();
        let freq: f64 = p
            .row(t)
            .iter()
            .enumerate()
            .map(|(k, v)| if k == 0 || k == 256 { *v } else { 2.0 * v })
            .sum();
        assert!((freq - 512.0 * time).abs() <= 1e-9 * freq);
    }
}

#[test]
fn filterbank_rows_follow_triangle_formula() {
    let fb = build_mel_filterbank(128, 512, 16_000).unwrap();
    assert_eq!((fb.weights.rows, fb.weights.cols), (128, 257));
    let f = |i: usize| fb.points[i];
    for m in 1..=128 {
        for k in 0..257 {
            let k_f = k as f64;
            let expected = if k_f < f(m - 1) || k_f >= f(m + 1) {
                0.0
            } else if k_f <= f(m) {
                (k_f - f(m - 1)) / (f(m) - f(m - 1))
            } else {
                (f(m + 1) - k_f) / (f(m + 1) - f(m))
            };
            let w = fb.weights.get(m - 1, k);
            assert!((w - expected).abs() < 1e-12, "m={m} k={k}: {w} vs {expected}");
            assert!((0.0..=1.0).contains(&w));
        }
    }
}

#[test]
fn filterbank_peaks_and_mel_spacing() {
    let fb = build_mel_filterbank(128, 512, 16_000).unwrap();
    let mel = |bin: f64| 2595.0 * (1.0 + bin * 16_000.0 / 512.0 / 700.0).log10();
    let step = mel(fb.points[1]) - mel(fb.points[0]);
    assert!((step - mel(256.0) / 129.0).abs() < 1e-9);
    for i in 1..fb.points.len() {
        assert!(fb.points[i] > fb.points[i - 1]);
        assert!((mel(fb.points[i]) - mel(fb.points[i - 1]) - step).abs() < 1e-9);
    }
    assert!(fb.points[0].abs() < 1e-12 && (fb.points[129] - 256.0).abs() < 1e-9);
    for m in 0..128 {
        let row = fb.weights.row(m);
        let nearest = fb.center(m).round() as usize;
        if row.iter().all(|&w| w == 0.0) {
            // band narrower than one bin and falling between bins
            assert!(fb.points[m + 2] - fb.points[m] <= 2.0);
            continue;
        }
        let (argmax, peak) = row.iter().enumerate().fold((0, -1.0), |a, (k, &w)| if w > a.1 { (k, w) } else { a });
        assert!((argmax as f64 - fb.center(m)).abs() <= 1.0, "m={m}");
        if (nearest as f64 - fb.center(m)).abs() < 1e-9 {
            assert!((peak - 1.0).abs() < 1e-12);
        }
    }
    // the nearest bin is at most half a bin from the apex
    for m in 0..128 {
        let c = fb.center(m);
        let nearest = c.round();
        let slope_width = if nearest <= c { c - fb.points[m] } else { fb.points[m + 2] - c };
        if slope_width >= 0.5 {
            let w = fb.weights.get(m, nearest as usize);
            assert!((w - (1.0 - (c - nearest).abs() / slope_width)).abs() < 1e-12);
        }
    }
}

#[test]
fn filterbank_rejects_too_many_bands() {
    assert!(build_mel_filterbank(256, 512, 16_000).is_err());
    assert!(build_mel_filterbank(0, 512, 16_000).is_err());
}

#[test]
fn log_mel_floor_and_scaling() {
    let fb = build_mel_filterbank(128, 512, 16_000).unwrap();
    let zero = Grid::zeros(3, 257);
    let m = log_mel(&zero, &fb).unwrap();
    assert!(m.data.iter().all(|&v| v == LOG_FLOOR.ln()));

    let p = Grid::new(2, 257, (0..514).map(|i| 1.0 + (i % 7) as f64).collect()).unwrap();
    let p2 = Grid::new(2, 257, p.data.iter().map(|v| 2.0 * v).collect()).unwrap();
    let (a, b) = (log_mel(&p, &fb).unwrap(), log_mel(&p2, &fb).unwrap());
    for (x, y) in a.data.iter().zip(&b.data) {
        if *x > LOG_FLOOR.ln() {
            assert!((y - x - 2f64.ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn tone_lands_in_nearest_band() {
    let ex = FeatureExtractor::new(FeatureKind::Mel).unwrap();
    let fb = ex.filterbank();
    let x: Vec<f64> = (0..16_000).map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin()).collect();
    let spec = ex.log_mel(&x).unwrap();
    let target_bin = 1000.0 * 512.0 / 16_000.0;
    let nearest = (0..128)
        .min_by(|&a, &b| (fb.center(a) - target_bin).abs().total_cmp(&(fb.center(b) - target_bin).abs()))
        .unwrap();
    let row = spec.row(spec.rows / 2);
    let argmax = (0..128).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(argmax, nearest);
}

#[test]
fn pad_time_examples() {
    let g = random_grid(498, 128, 1);
    let p = pad_time(&g, 512).unwrap();
    assert_eq!(p.rows, 512);
    assert_eq!(&p.data[..498 * 128], &g.data[..]);
    assert!(p.data[498 * 128..].iter().all(|&v| v == LOG_FLOOR.ln()));
    let full = random_grid(512, 128, 2);
    assert_eq!(pad_time(&full, 512).unwrap(), full);
    assert!(pad_time(&random_grid(513, 4, 3), 512).is_err());
}

#[test]
fn full_pipeline_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..80_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let m = mel_spectrogram(&x).unwrap();
    assert_eq!((m.rows, m.cols), (512, 128));
    assert!(m.data.iter().all(|v| v.is_finite()));
    for (kind, cols) in [(FeatureKind::Mfcc, 20), (FeatureKind::Stft, 257)] {
        let g = FeatureExtractor::new(kind).unwrap().extract(&x).unwrap();
        assert_eq!((g.rows, g.cols), (512, cols));
    }
}

#[test]
fn normalize_examples() {
    let g = random_grid(10, 6, 4);
    let stats = FeatureStats { mean: 1.5, std: 2.0 };
    let flat = Grid::new(2, 2, vec![1.5; 4]).unwrap();
    assert!(normalize(&flat, &stats).unwrap().data.iter().all(|&v| v == 0.0));

    let own = FeatureStats::from_grids([&g]).unwrap();
    let n = normalize(&g, &own).unwrap();
    let mean = n.mean();
    let var = n.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.data.len() as f64;
    assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
    assert!(normalize(&g, &FeatureStats { mean: 0.0, std: 0.0 }).is_err());
    assert!(FeatureStats::from_grids([&flat]).is_err());
}

#[test]
fn stats_merge_matches_direct_moments() {
    let grids: Vec<Grid> = (0..5).map(|s| random_grid(7 + s as usize, 3, s)).collect();
    let stats = FeatureStats::from_grids(grids.iter()).unwrap();
    let all: Vec<f64> = grids.iter().flat_map(|g| g.data.clone()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    assert!((stats.mean - mean).abs() < 1e-12 && (stats.std - std).abs() < 1e-12);
}

#[test]
fn spec_augment_examples() {
    let g = random_grid(512, 128, 9);
    let mut none = g.clone();
    AugmentMasks { freq: (10, 0), time: (3, 0) }.apply(&mut none.data, 512, 128);
    assert_eq!(none, g);

    let mut r1 = ChaCha8Rng::seed_from_u64(42);
    let mut r2 = ChaCha8Rng::seed_from_u64(42);
    assert_eq!(spec_augment(&g, 24, 96, &mut r1), spec_augment(&g, 24, 96, &mut r2));

    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, masks) = spec_augment(&g, 24, 96, &mut rng);
        let (fw, tw) = (masks.freq.1, masks.time.1);
        assert!(fw <= 24 && tw <= 96);
        let changed = out.data.iter().zip(&g.data).filter(|(a, b)| a != b).count();
        assert_eq!(changed, fw * 512 + tw * 128 - fw * tw);
        let fill = g.mean();
        for r in 0..512 {
            for c in 0..128 {
                let in_mask = (c >= masks.freq.0 && c < masks.freq.0 + fw) || (r >= masks.time.0 && r < masks.time.0 + tw);
                if in_mask {
                    assert!((out.get(r, c) - fill).abs() < 1e-12);
                } else {
                    assert_eq!(out.get(r, c), g.get(r, c));
                }
            }
        }
    }
}

#[test]
fn mfcc_examples() {
    let c = Grid::new(2, 128, vec![0.7; 256]).unwrap();
    let m = mfcc(&c, 20).unwrap();
    assert!((m.get(0, 0) - 0.7 * 128f64.sqrt()).abs() < 1e-9);
    assert!(m.row(1)[1..].iter().all(|v| v.abs() < 1e-9));

    let g = random_grid(3, 128, 11);
    let full = mfcc(&g, 128).unwrap();
    // inverse of the orthonormal DCT-II is its transpose (DCT-III)
    for t in 0..3 {
        for j in 0..128 {
            let mut x = 0.0;
            for k in 0..128 {
                let s = if k == 0 { (1.0f64 / 128.0).sqrt() } else { (2.0f64 / 128.0).sqrt() };
                x += s * full.get(t, k) * (PI * k as f64 * (2 * j + 1) as f64 / 256.0).cos();
            }
            assert!((x - g.get(t, j)).abs() < 1e-9);
        }
    }
    assert!(mfcc(&g, 129).is_err());
}

#[test]
fn cache_round_trip_and_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.melf");
    let g = random_grid(512, 128, 12);
    write_cache(&p, &g).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"MELF");
    assert_eq!(bytes.len(), 15 + 512 * 128 * 4);
    let back = read_cache(&p).unwrap();
    assert_eq!((back.rows, back.cols), (512, 128));
    for (a, b) in back.data.iter().zip(&g.data) {
        assert_eq!(*a, *b as f32 as f64);
    }
    std::fs::write(&p, b"NOPE").unwrap();
    assert!(read_cache(&p).is_err());
    std::fs::write(&p, &bytes[..100]).unwrap();
    assert!(read_cache(&p).is_err());
}

proptest! {
    #[test]
    fn log_mel_is_monotone(seed in 0u64..300, bin in 0usize..257, bump in 0.0f64..100.0) {
        let fb = build_mel_filterbank(128, 512, 16_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Grid::new(1, 257, (0..257).map(|_| rng.gen_range(0.0..10.0)).collect()).unwrap();
        let mut q = p.clone();
        q.data[bin] += bump;
        let (a, b) = (log_mel(&p, &fb).unwrap(), log_mel(&q, &fb).unwrap());
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn augment_touches_only_mask_bands(seed in 0u64..1000, rows in 1usize..40, cols in 1usize..30) {
        let g = random_grid(rows, cols, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, m) = spec_augment(&g, 5, 9, &mut rng);
        for r in 0..rows {
            for c in 0..cols {
                let inside = (c >= m.freq.0 && c < m.freq.0 + m.freq.1) || (r >= m.time.0 && r < m.time.0 + m.time.1);
                if !inside {
                    prop_assert_eq!(out.get(r, c), g.get(r, c));
                }
            }
        }
    }
}
