//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p melgraph --test acceptance` runs everything; append
//! criterion numbers after `--` to run a subset (`-- 1 2 5`).

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use melgraph::audio_io::load_split_segments;
use melgraph::checkpoint::{load_model, save_model, CheckpointMeta};
use melgraph::evaluation::*;
use melgraph::features::{mel_spectrogram, FeatureStats, N_FRAMES, N_MELS};
use melgraph::hinich::{batch_test, estimate_bispectrum, gaussianity_pfa, RECORD_LEN};
use melgraph::model::*;
use melgraph::synthgen::{default_preset, gen_dataset, gen_sample, SplitCounts, SAMPLE_RATE};
use melgraph::tensor::{primitive_suite, Tensor};
use melgraph::training::{accuracy, fit, predict, prepare_splits, Dataset, FitOutcome, SplitData, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() <= limit_s {
        Ok(())
    } else {
        Err(format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
    }
}

// ---------------------------------------------------------------- 1

fn shape_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig::default();
    let model: Model<f32> = Model::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
    let audio = gen_sample(&default_preset()[0], 5.0, SAMPLE_RATE, 1).map_err(|e| e.to_string())?;

    let t = Instant::now();
    let spec = mel_spectrogram(&audio).map_err(|e| e.to_string())?;
    let stats = FeatureStats::from_grids([&spec]).map_err(|e| e.to_string())?;
    let mut x = spec.to_f32();
    stats.apply(&mut x);
    let input = Tensor::new(&[1, 1, spec.rows, spec.cols], x).map_err(|e| e.to_string())?;
    let (logits, trace) = model.infer(&input, &ForwardOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();

    let got = [
        vec![spec.rows, spec.cols],
        trace.stem_shapes.last().cloned().unwrap_or_default()[1..].to_vec(),
        trace.node_shape[1..].to_vec(),
        trace.head_hidden_shape[1..].to_vec(),
        logits.shape()[1..].to_vec(),
    ];
    let want = [vec![512, 128], vec![96, 32, 8], vec![256, 96], vec![512, 1, 1], vec![cfg.n_classes]];
    let detail = format!("feature {:?} stem {:?} nodes {:?} head {:?} logits {:?} in {:.3} s", got[0], got[1], got[2], got[3], got[4], elapsed.as_secs_f64());
    if got != want {
        return Err(format!("{detail}; expected {want:?}"));
    }
    within(elapsed, 1.0).map_err(|e| format!("{detail}; {e}"))?;
    check(logits.all_finite(), detail)
}

// ---------------------------------------------------------------- 2

fn parameter_count() -> Verdict {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2)).map_err(|e| e.to_string())?;
    let counted = param_count(model.params());
    let planned = cfg.param_count();
    within(t.elapsed(), 1.0)?;
    let dev = counted as f64 / 2.05e6 - 1.0;
    check(
        counted == planned && dev.abs() <= 0.05,
        format!("{counted} trainable parameters ({:+.2}% vs 2.05M), layout count {planned}", dev * 100.0),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_verification() -> Verdict {
    let t = Instant::now();
    let prims = primitive_suite(3, 1e-5).map_err(|e| e.to_string())?;
    let prim_max = prims.iter().map(|p| p.report.max_rel_error).fold(0.0, f64::max);
    let empty: Vec<&str> = prims.iter().filter(|p| p.report.checked == 0).map(|p| p.name.as_str()).collect();

    let cfg = ModelConfig::scaled(32, 2, 4, 4);
    let m = check_model_gradients(&cfg, 2, 4, 3, 1e-5).map_err(|e| e.to_string())?;
    let starved: Vec<&str> = m
        .names
        .iter()
        .enumerate()
        .filter(|(i, _)| !m.report.probes.iter().any(|p| p.0 == *i))
        .map(|(_, n)| n.as_str())
        .collect();
    within(t.elapsed(), 300.0)?;
    let detail = format!(
        "{} primitives max {prim_max:.2e}; model dim 32 L 2 H 4 N {}: {} probes over {} tensors, {} kink skips, max {:.2e}",
        prims.len(),
        cfg.n_nodes(),
        m.report.checked,
        m.names.len(),
        m.report.kinks_skipped,
        m.report.max_rel_error
    );
    if !empty.is_empty() || !starved.is_empty() {
        return Err(format!("{detail}; unchecked: {empty:?} {starved:?}"));
    }
    check(prim_max < 1e-4 && m.report.max_rel_error < 1e-4 && cfg.n_nodes() == 256, detail)
}

// ---------------------------------------------------------------- 4

fn brute_force_knn(x: &[f64], n: usize, d: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((0..d).map(|f| (x[i * d + f] - x[j * d + f]).powi(2)).sum::<f64>(), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|p| p.1).collect()
        })
        .collect()
}

fn knn_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (256, 96);
    let mut dup_sets = 0;
    for set in 0..100 {
        let mut x: Vec<f64> = match set % 4 {
            // coarse grid: many exactly equal distances
            3 => (0..n * d).map(|_| rng.gen_range(-2i32..=2) as f64).collect(),
            _ => (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        if set % 2 == 0 {
            dup_sets += 1;
            for _ in 0..32 {
                let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
                let row = x[a * d..(a + 1) * d].to_vec();
                x[b * d..(b + 1) * d].copy_from_slice(&row);
            }
        }
        for k in [1, 2, 4, 8] {
            let g = knn_graph(&x, n, d, k).map_err(|e| e.to_string())?;
            let oracle = brute_force_knn(&x, n, d, k);
            if let Some(i) = (0..n).find(|&i| g.neighbors_of(i) != &oracle[i][..]) {
                return Err(format!("set {set} K {k} node {i}: {:?} vs oracle {:?}", g.neighbors_of(i), oracle[i]));
            }
        }
    }
    within(t.elapsed(), 60.0)?;
    Ok(format!("100 sets of 256x96 at K 1, 2, 4, 8 identical to brute force ({dup_sets} with duplicated rows, 25 on an integer grid)"))
}

// ---------------------------------------------------------------- 5

fn k_schedule_check() -> Verdict {
    let k = k_schedule(8);
    let from_cfg = ModelConfig::default().k_schedule;
    check(
        k == [2, 2, 3, 4, 5, 6, 7, 8] && k[3] == 4 && k[7] == 8 && from_cfg == k,
        format!("schedule {k:?}, default config {from_cfg:?}"),
    )
}

// ---------------------------------------------------------------- shared synthetic benchmark

const DATA_SEED: u64 = 2024;

fn benchmark() -> &'static SplitData {
    static DATA: OnceLock<SplitData> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let counts = SplitCounts { train: 50, val: 10, test: 10 };
        let ds = gen_dataset(&default_preset(), counts, DATA_SEED, dir.path()).expect("synthetic dataset");
        let segments = load_split_segments(&ds.rows).expect("segments");
        prepare_splits(&segments, &ds.rows, Default::default()).expect("features")
    })
}

fn small_model(use_encoder: bool, use_gnn: bool, use_ffn: bool) -> ModelConfig {
    let mut cfg = ModelConfig::scaled(32, 4, 4, 4);
    cfg.k_schedule = vec![2, 3, 5, 8];
    cfg.use_encoder = use_encoder;
    cfg.use_gnn = use_gnn;
    cfg.use_ffn = use_ffn;
    cfg
}

fn train_run(cfg: &ModelConfig, epochs: usize, seed: u64) -> Result<FitOutcome<f32>, String> {
    let data = benchmark();
    let tc = TrainConfig {
        batch_size: 16,
        seed,
        ..TrainConfig::short(epochs)
    };
    let model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    fit(model, &data.train, &data.val, &tc, |_, _| Ok(())).map_err(|e| e.to_string())
}

fn test_confusion(model: &Model<f32>, data: &Dataset) -> Result<ConfusionMatrix, String> {
    let pred = predict(model, data, 32).map_err(|e| e.to_string())?;
    confusion(&data.labels, &pred, model.config().n_classes).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 6

fn synthetic_end_to_end() -> Verdict {
    let t = Instant::now();
    let data = benchmark();
    let out = train_run(&small_model(true, true, true), 60, 6)?;
    let train_oa = accuracy(&predict(&out.best, &data.train, 32).map_err(|e| e.to_string())?, &data.train.labels);
    let cm = test_confusion(&out.best, &data.test)?;
    let (test_oa, k) = (oa(&cm), kappa(&cm).value);
    within(t.elapsed(), 1800.0)?;
    check(
        train_oa >= 0.95 && test_oa >= 0.80 && k > 0.7,
        format!(
            "best epoch {} of 60: train OA {train_oa:.3}, test OA {test_oa:.3}, kappa {k:.3} on {} test items ({:.0} s)",
            out.best_epoch,
            data.test.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7

const ABLATION_EPOCHS: usize = 10;

fn ablation_direction() -> Verdict {
    let t = Instant::now();
    let data = benchmark();
    let variants = [
        ("full", small_model(true, true, true)),
        ("no encoder", small_model(false, true, true)),
        ("no GNN", small_model(true, false, true)),
        ("no FFN", small_model(true, true, false)),
    ];
    let mut means = Vec::new();
    for (name, cfg) in &variants {
        let mut oas = Vec::new();
        for seed in [71, 72, 73] {
            let run = Instant::now();
            let out = train_run(cfg, ABLATION_EPOCHS, seed)?;
            oas.push(oa(&test_confusion(&out.best, &data.test)?));
            eprintln!("  ablation {name} seed {seed}: test OA {:.3} ({:.0} s)", oas[oas.len() - 1], run.elapsed().as_secs_f64());
        }
        means.push((*name, oas.iter().sum::<f64>() / oas.len() as f64));
    }
    within(t.elapsed(), 7200.0)?;
    let full = means[0].1;
    let table: Vec<String> = means.iter().map(|(n, m)| format!("{n} {m:.3}")).collect();
    check(
        means[1..].iter().all(|(_, m)| full >= m - 0.02),
        format!("mean test OA over 3 seeds, {ABLATION_EPOCHS} epochs: {}", table.join(", ")),
    )
}

// ---------------------------------------------------------------- 8

fn white(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Sinusoids at record bins `j`, `k` and `j + k` with coupled phases.
fn phase_coupled(n: usize, j: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p1, p2): (f64, f64) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let (f1, f2) = (j as f64 / RECORD_LEN as f64, k as f64 / RECORD_LEN as f64);
    (0..n)
        .map(|t| {
            let t = t as f64;
            let e: f64 = rng.sample(StandardNormal);
            (2.0 * PI * f1 * t + p1).cos() + (2.0 * PI * f2 * t + p2).cos() + (2.0 * PI * (f1 + f2) * t + p1 + p2).cos() + 0.1 * e
        })
        .collect()
}

fn hinich_level_power() -> Verdict {
    let t = Instant::now();
    let window = 8000; // 0.5 s at 16 kHz
    let long = 256 * RECORD_LEN;
    let pfa = |x: &[f64]| -> Result<f64, String> {
        let b = estimate_bispectrum(x, RECORD_LEN).map_err(|e| e.to_string())?;
        Ok(gaussianity_pfa(&b).map_err(|e| e.to_string())?.pfa)
    };
    let (mut keep, mut keep_long, mut reject) = (0, 0, 0);
    for trial in 0..100 {
        keep += (pfa(&white(window, 800 + trial))? >= 0.05) as usize;
        keep_long += (pfa(&white(long, 900 + trial))? >= 0.05) as usize;
        reject += (pfa(&phase_coupled(long, 20, 12, 1000 + trial))? < 0.01) as usize;
    }
    let audio = gen_sample(&default_preset()[1], 20.0, SAMPLE_RATE, 8).map_err(|e| e.to_string())?;
    let rows = batch_test(&audio, SAMPLE_RATE, 0.5).map_err(|e| e.to_string())?.len();
    within(t.elapsed(), 120.0)?;
    check(
        keep >= 90 && keep_long >= 90 && reject >= 95 && rows == 40,
        format!(
            "white noise kept at PFA >= 0.05: {keep}/100 (0.5 s), {keep_long}/100 ({long} samples); coupled rejected at PFA < 0.01: {reject}/100 ({long} samples); 20 s file -> {rows} rows"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn metric_oracles() -> Verdict {
    let t = Instant::now();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![3, 7]]).map_err(|e| e.to_string())?;
    let hand = [
        ("OA", oa(&cm), 0.75),
        ("AA", aa(&cm).value, 0.75),
        ("kappa", kappa(&cm).value, 0.5),
        ("F1", f1(&cm).value, (16.0 / 21.0 + 14.0 / 19.0) / 2.0),
    ];
    if let Some((name, got, want)) = hand.iter().find(|(_, g, w)| !close(*g, *w)) {
        return Err(format!("{name} of [[8,2],[3,7]] = {got}, expected {want}"));
    }
    let diag = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 4]]).map_err(|e| e.to_string())?;
    if ![oa(&diag), aa(&diag).value, kappa(&diag).value, f1(&diag).value].iter().all(|&v| close(v, 1.0)) {
        return Err("diagonal matrix does not score 1".into());
    }
    let swap = confusion(&[0, 1], &[1, 0], 2).map_err(|e| e.to_string())?;
    if swap.rows() != vec![vec![0, 1], vec![1, 0]] {
        return Err(format!("confusion([0,1],[1,0]) = {:?}", swap.rows()));
    }
    let one_col = ConfusionMatrix::from_rows(&[vec![5, 0], vec![5, 0]]).map_err(|e| e.to_string())?;
    if !close(kappa(&one_col).value, 0.0) {
        return Err("single predicted column should give kappa 0".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..1000 {
        let c = rng.gen_range(2..8);
        let n = rng.gen_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..c) })
            .collect();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let a = confusion(&truth, &pred, c).map_err(|e| e.to_string())?;
        let pt: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        let pp: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let b = confusion(&pt, &pp, c).map_err(|e| e.to_string())?;
        let ma = [oa(&a), aa(&a).value, kappa(&a).value, f1(&a).value];
        let mb = [oa(&b), aa(&b).value, kappa(&b).value, f1(&b).value];
        if ma.iter().zip(&mb).any(|(x, y)| !close(*x, *y)) {
            return Err(format!("trial {trial}: {ma:?} vs permuted {mb:?}"));
        }
        if !(0.0..=1.0).contains(&ma[0]) || !(-1.0..=1.0).contains(&ma[2]) {
            return Err(format!("trial {trial}: metric out of range {ma:?}"));
        }
    }
    within(t.elapsed(), 60.0)?;
    Ok("hand-computed OA/AA/kappa/F1 match to 1e-12; 1000 random matrices invariant under joint label permutation".into())
}

// ---------------------------------------------------------------- 10

fn determinism_and_persistence() -> Verdict {
    let t = Instant::now();
    let data = benchmark();
    let cfg = small_model(true, true, true);
    let a = train_run(&cfg, 4, 10)?;
    let b = train_run(&cfg, 4, 10)?;
    let mut worst: f64 = 0.0;
    for (x, y) in a.history.iter().zip(&b.history) {
        for (u, v) in [(x.train_loss, y.train_loss), (x.train_oa, y.train_oa), (x.val_oa, y.val_oa), (x.lr, y.lr)] {
            worst = worst.max((u - v).abs());
        }
    }
    if a.history.len() != b.history.len() || worst > 1e-6 {
        return Err(format!("reruns differ by {worst:e}"));
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("best.gtck");
    let meta = CheckpointMeta {
        feature_stats: Some(data.stats),
        ..CheckpointMeta::new(cfg.clone())
    };
    save_model(&path, &a.best, meta).map_err(|e| e.to_string())?;
    let (loaded, _) = load_model(&path).map_err(|e| e.to_string())?;
    let before = oa(&test_confusion(&a.best, &data.test)?);
    let after = oa(&test_confusion(&loaded, &data.test)?);
    let size = std::fs::metadata(Path::new(&path)).map_err(|e| e.to_string())?.len();
    within(t.elapsed(), 600.0)?;
    check(
        before.to_bits() == after.to_bits() && loaded == a.best,
        format!("4-epoch reruns agree within {worst:e}; test OA {before} before and {after} after a {size}-byte checkpoint round trip"),
    )
}

// ---------------------------------------------------------------- 11

fn interpretability_exports() -> Verdict {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(11)).map_err(|e| e.to_string())?;
    let audio = gen_sample(&default_preset()[3], 5.0, SAMPLE_RATE, 11).map_err(|e| e.to_string())?;
    let spec = mel_spectrogram(&audio).map_err(|e| e.to_string())?;
    let stats = FeatureStats::from_grids([&spec]).map_err(|e| e.to_string())?;
    let mut x = spec.to_f32();
    stats.apply(&mut x);
    assert_eq!(x.len(), N_FRAMES * N_MELS);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for block in [1, cfg.blocks] {
        let maps = model.export_attention(&x, block).map_err(|e| e.to_string())?;
        if maps.len() != cfg.heads {
            return Err(format!("block {block}: {} heads exported", maps.len()));
        }
        let paths = write_attention_csv(dir.path().join(format!("b{block}")), &maps).map_err(|e| e.to_string())?;
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(|e| e.to_string())?;
            for line in text.lines() {
                let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    let n = cfg.n_nodes();
    for (l, &k) in cfg.k_schedule.iter().enumerate() {
        let edges = model.export_graph_edges(&x, l + 1).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("graph{}.csv", l + 1));
        write_graph_csv(&path, &edges).map_err(|e| e.to_string())?;
        let rows = std::fs::read_to_string(&path).map_err(|e| e.to_string())?.lines().count() - 1;
        let mut per_center = vec![0usize; n];
        for e in &edges {
            per_center[e.center_t * cfg.grid().1 + e.center_f] += 1;
        }
        if rows != n * k || per_center.iter().any(|&c| c != k) || edges.iter().any(|e| e.k != k) {
            return Err(format!("block {}: {rows} edges for K = {k}", l + 1));
        }
    }
    within(t.elapsed(), 60.0)?;
    check(
        worst <= 1e-5,
        format!(
            "{} heads at blocks 1 and {}: worst row-sum error {worst:.1e}; graph edges per node equal {:?}",
            cfg.heads, cfg.blocks, cfg.k_schedule
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("shape contract", shape_contract),
        ("parameter count", parameter_count),
        ("gradient verification", gradient_verification),
        ("KNN oracle equivalence", knn_oracle),
        ("K schedule", k_schedule_check),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("ablation direction", ablation_direction),
        ("Hinich level and power", hinich_level_power),
        ("metric oracles", metric_oracles),
        ("determinism and persistence", determinism_and_persistence),
        ("interpretability exports", interpretability_exports),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
