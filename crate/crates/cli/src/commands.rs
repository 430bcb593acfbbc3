use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use melgraph::audio_io::{self, class_names, load_any_manifest, Split};
use melgraph::checkpoint::{load_model, save_model, CheckpointMeta};
use melgraph::evaluation::{confusion, MetricsReport};
use melgraph::features::{write_cache, FeatureExtractor, FeatureKind, FeatureStats, Grid};
use melgraph::model::{self, check_model_gradients, write_attention_csv, write_graph_csv, Model, ModelConfig};
use melgraph::synthgen::{self, ClassSpec, SplitCounts};
use melgraph::tensor::primitive_suite;
use melgraph::training::{self, Dataset, TrainConfig};
use melgraph::{hinich as hn, synthgen::gen_dataset};

use crate::config::RunConfig;
use crate::{CliError, Common};

type Res = Result<(), CliError>;

const RESOLVED: &str = "config.resolved";

/// Defaults, then the config file, then flags.
fn resolve(defaults: &[(&str, &str)], common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::new(defaults);
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    if common.seed.is_some() {
        cfg.set_opt("seed", common.seed)?;
    }
    for (k, v) in flags {
        cfg.set_opt(k, v.clone())?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Res {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// `out.csv` gets its resolved config at `out.csv.config`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn must_exist(path: &Path) -> Res {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn parse_kind(cfg: &RunConfig, key: &str) -> Result<FeatureKind, CliError> {
    cfg.raw(key).parse().map_err(|e: melgraph::Error| CliError::Usage(e.to_string()))
}

pub fn featurize(manifest: &Path, out: &Path, kind: Option<String>, common: &Common) -> Res {
    must_exist(manifest)?;
    let cfg = resolve(&[("kind", "mel")], common, &[("kind", kind)])?;
    let kind = parse_kind(&cfg, "kind")?;
    let (segments, records, warnings) = load_any_manifest(manifest)?;
    for w in warnings {
        warn!("{w}");
    }
    let grids = training::extract_features(&segments, kind)?;
    let train: Vec<&Grid> = records
        .iter()
        .zip(&grids)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(_, g)| g)
        .collect();
    if train.is_empty() {
        return Err(CliError::Data("manifest has no training segments".into()));
    }
    let stats = FeatureStats::from_grids(train)?;

    let feat_dir = out.join("features");
    create_dir(&feat_dir)?;
    #[derive(Serialize)]
    struct IndexRow<'a> {
        file: String,
        path: &'a Path,
        label: usize,
        class_name: &'a str,
        split: Split,
        start_offset_s: f64,
    }
    let mut w = csv::Writer::from_path(out.join("index.csv")).map_err(|e| CliError::Data(e.to_string()))?;
    for (i, (r, g)) in records.iter().zip(&grids).enumerate() {
        let file = format!("features/{i:05}.feat");
        write_cache(out.join(&file), g)?;
        w.serialize(IndexRow {
            file,
            path: &r.path,
            label: r.label,
            class_name: &r.class_name,
            split: r.split,
            start_offset_s: r.start_offset_s,
        })
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    write_json(&out.join("stats.json"), &stats)?;
    cfg.write(&out.join(RESOLVED))?;
    info!("cached {} {kind:?} grids in {}", grids.len(), out.display());
    Ok(())
}

pub fn hinich(wav: &Path, out: &Path, window_s: Option<f64>, common: &Common) -> Res {
    must_exist(wav)?;
    let cfg = resolve(
        &[("window_s", "0.5"), ("linearity_tolerance", "0.5")],
        common,
        &[("window_s", window_s.map(|v| v.to_string()))],
    )?;
    let window_s: f64 = cfg.get("window_s")?;
    let tol: f64 = cfg.get("linearity_tolerance")?;
    if !(window_s > 0.0) || !(tol > 0.0) {
        return Err(CliError::Usage("window_s and linearity_tolerance must be positive".into()));
    }
    let buf = audio_io::load_wav(wav)?;
    let results = hn::batch_test_with(&buf.samples, buf.sample_rate, window_s, tol)?;
    hn::write_results_csv(out, &results)?;
    cfg.write(&sidecar(out))?;
    let gaussian = results.iter().filter(|r| r.gaussian_decision).count();
    info!("{} windows, {gaussian} consistent with Gaussianity", results.len());
    Ok(())
}

fn load_specs(preset: &str) -> Result<Vec<ClassSpec>, CliError> {
    if preset.ends_with(".json") {
        let path = Path::new(preset);
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{preset}: {e}")))
    } else {
        synthgen::preset(preset).map_err(|e| CliError::Usage(e.to_string()))
    }
}

pub fn synth(out: &Path, preset: Option<String>, n_per_class: Option<usize>, common: &Common) -> Res {
    let cfg = resolve(
        &[("preset", "default"), ("n_per_class", "70"), ("counts", "auto"), ("seed", "0")],
        common,
        &[("preset", preset), ("n_per_class", n_per_class.map(|n| n.to_string()))],
    )?;
    let specs = load_specs(cfg.raw("preset"))?;
    let counts = if cfg.raw("counts") == "auto" {
        SplitCounts::from_fractions(cfg.get("n_per_class")?)
    } else {
        match cfg.get_list::<usize>("counts")?[..] {
            [train, val, test] => SplitCounts { train, val, test },
            _ => return Err(CliError::Usage("counts must be train,val,test".into())),
        }
    };
    if counts.total() == 0 {
        return Err(CliError::Usage("no samples requested".into()));
    }
    create_dir(out)?;
    let ds = gen_dataset(&specs, counts, cfg.get("seed")?, out)?;
    cfg.write(&out.join(RESOLVED))?;
    info!(
        "{} files in {}; class separation {:.2} between vs {:.2} within",
        ds.rows.len(),
        out.display(),
        ds.separation.min_between,
        ds.separation.max_within
    );
    Ok(())
}

const TRAIN_KEYS: &[(&str, &str)] = &[
    ("preset", "shipsear"),
    ("seed", "0"),
    ("features.kind", "mel"),
    ("model.dim", "auto"),
    ("model.blocks", "auto"),
    ("model.heads", "auto"),
    ("model.k_schedule", "auto"),
    ("model.head_hidden", "512"),
    ("model.use_encoder", "true"),
    ("model.use_gnn", "true"),
    ("model.use_ffn", "true"),
    ("train.lr", "auto"),
    ("train.decay_epoch", "auto"),
    ("train.decay_factor", "auto"),
    ("train.batch_size", "auto"),
    ("train.epochs", "auto"),
    ("train.augment", "true"),
];

/// Fills every `auto` key from the preset, leaving concrete values only.
fn resolve_train(cfg: &mut RunConfig) -> Res {
    let (dim, blocks, heads, k, mut tc): (usize, usize, usize, Option<Vec<usize>>, TrainConfig) = match cfg.raw("preset") {
        "shipsear" => (96, 8, 8, None, TrainConfig::shipsear()),
        "deepship" => (96, 8, 8, None, TrainConfig::deepship()),
        "small" => (32, 4, 4, Some(vec![2, 3, 5, 8]), TrainConfig { batch_size: 16, ..TrainConfig::short(60) }),
        other => return Err(CliError::Usage(format!("unknown training preset {other:?}"))),
    };
    let auto = |cfg: &RunConfig, key: &str| cfg.raw(key) == "auto";
    if !auto(cfg, "train.epochs") {
        let epochs: usize = cfg.get("train.epochs")?;
        if epochs != tc.epochs {
            tc = TrainConfig { batch_size: tc.batch_size, ..TrainConfig::short(epochs) };
        }
    }
    let fill = |cfg: &mut RunConfig, key: &str, v: String| -> Res {
        if auto(cfg, key) {
            cfg.set(key, v)?;
        }
        Ok(())
    };
    fill(cfg, "model.dim", dim.to_string())?;
    let same_depth = auto(cfg, "model.blocks") || cfg.get::<usize>("model.blocks")? == blocks;
    fill(cfg, "model.blocks", blocks.to_string())?;
    fill(cfg, "model.heads", heads.to_string())?;
    let blocks: usize = cfg.get("model.blocks")?;
    let ks = match k {
        Some(k) if same_depth => k,
        _ => model::k_schedule(blocks),
    };
    let list = ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
    fill(cfg, "model.k_schedule", list)?;
    fill(cfg, "train.lr", tc.lr0.to_string())?;
    fill(cfg, "train.decay_epoch", tc.decay_epoch.to_string())?;
    fill(cfg, "train.decay_factor", tc.decay_factor.to_string())?;
    fill(cfg, "train.batch_size", tc.batch_size.to_string())?;
    fill(cfg, "train.epochs", tc.epochs.to_string())
}

fn model_config(cfg: &RunConfig, n_classes: usize, kind: FeatureKind) -> Result<ModelConfig, CliError> {
    let mut m = ModelConfig::scaled(cfg.get("model.dim")?, cfg.get("model.blocks")?, cfg.get("model.heads")?, n_classes);
    m.k_schedule = cfg.get_list("model.k_schedule")?;
    m.head_hidden = cfg.get("model.head_hidden")?;
    m.use_encoder = cfg.get("model.use_encoder")?;
    m.use_gnn = cfg.get("model.use_gnn")?;
    m.use_ffn = cfg.get("model.use_ffn")?;
    m.input_bins = kind.n_bins();
    m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(m)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let tc = TrainConfig {
        lr0: cfg.get("train.lr")?,
        decay_epoch: cfg.get("train.decay_epoch")?,
        decay_factor: cfg.get("train.decay_factor")?,
        batch_size: cfg.get("train.batch_size")?,
        epochs: cfg.get("train.epochs")?,
        seed: cfg.get("seed")?,
        augment: cfg.get("train.augment")?,
        ..TrainConfig::shipsear()
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(tc)
}

pub fn train(manifest: &Path, out: &Path, preset: Option<String>, epochs: Option<usize>, common: &Common) -> Res {
    must_exist(manifest)?;
    let mut cfg = resolve(
        TRAIN_KEYS,
        common,
        &[("preset", preset), ("train.epochs", epochs.map(|e| e.to_string()))],
    )?;
    resolve_train(&mut cfg)?;
    let kind = parse_kind(&cfg, "features.kind")?;
    let tc = train_config(&cfg)?;

    let (segments, records, warnings) = load_any_manifest(manifest)?;
    for w in warnings {
        warn!("{w}");
    }
    let names = class_names(&records);
    if names.len() < 2 {
        return Err(CliError::Data("manifest needs at least two classes".into()));
    }
    let mcfg = model_config(&cfg, names.len(), kind)?;
    create_dir(out)?;
    cfg.write(&out.join(RESOLVED))?;
    audio_io::write_split_manifest(out.join("split_manifest.csv"), &records)?;
    let data = training::prepare_splits(&segments, &records, kind)?;
    info!(
        "{} train / {} val / {} test segments, {} classes, {} parameters",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        names.len(),
        mcfg.param_count()
    );

    let hash = cfg.hash();
    let meta = |epoch: usize, val_oa: f64| CheckpointMeta {
        feature_kind: kind,
        feature_stats: Some(data.stats),
        class_names: names.clone(),
        epoch,
        val_oa: val_oa.is_finite().then_some(val_oa),
        config_hash: hash.clone(),
        seed: tc.seed,
        ..CheckpointMeta::new(mcfg.clone())
    };
    let model: Model<f32> = Model::new(mcfg.clone(), &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let best_path = out.join("best.gtck");
    let outcome = training::fit(model, &data.train, &data.val, &tc, |rec, best| {
        info!(
            "epoch {:>3} lr {:.2e} loss {:.4} train {:.3} val {:.3}",
            rec.epoch, rec.lr, rec.train_loss, rec.train_oa, rec.val_oa
        );
        if let Some(m) = best {
            save_model(&best_path, m, meta(rec.epoch, rec.val_oa))?;
        }
        Ok(())
    })?;
    save_model(out.join("last.gtck"), &outcome.last, meta(tc.epochs, f64::NAN))?;
    training::write_history_csv(out.join("history.csv"), &outcome.history)?;

    #[derive(Serialize)]
    struct Summary {
        best_epoch: usize,
        best_val_oa: Option<f64>,
        epochs: usize,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        param_count: usize,
        config_hash: String,
        seed: u64,
    }
    write_json(
        &out.join("summary.json"),
        &Summary {
            best_epoch: outcome.best_epoch,
            best_val_oa: outcome.best_val_oa.is_finite().then_some(outcome.best_val_oa),
            epochs: tc.epochs,
            n_train: data.train.len(),
            n_val: data.val.len(),
            n_test: data.test.len(),
            param_count: mcfg.param_count(),
            config_hash: hash,
            seed: tc.seed,
        },
    )?;
    info!("best epoch {} (val OA {:.3})", outcome.best_epoch, outcome.best_val_oa);
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split {other:?}"))),
    }
}

fn checkpoint_stats(meta: &CheckpointMeta) -> Result<FeatureStats, CliError> {
    meta.feature_stats
        .ok_or_else(|| CliError::Data("checkpoint carries no feature statistics".into()))
}

pub fn eval(checkpoint: &Path, manifest: &Path, out: &Path, split: Option<String>, common: &Common) -> Res {
    must_exist(checkpoint)?;
    must_exist(manifest)?;
    let cfg = resolve(&[("split", "test"), ("batch_size", "32")], common, &[("split", split)])?;
    let split = parse_split(cfg.raw("split"))?;
    let batch: usize = cfg.get("batch_size")?;
    if batch == 0 {
        return Err(CliError::Usage("batch_size must be positive".into()));
    }
    let (model, meta) = load_model(checkpoint)?;
    let stats = checkpoint_stats(&meta)?;
    let (segments, records, _) = load_any_manifest(manifest)?;
    let data = training::split_dataset(&segments, &records, split, meta.feature_kind, &stats)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("no {} segments in {}", split.as_str(), manifest.display())));
    }
    let c = model.config().n_classes;
    let pred = training::predict(&model, &data, batch)?;
    let cm = confusion(&data.labels, &pred, c)?;
    let report = MetricsReport::from_confusion(&cm, meta.config_hash.clone(), meta.seed);
    write_json(out, &report)?;
    cfg.write(&sidecar(out))?;
    info!("{} {}: OA {:.4} kappa {:.4}", split.as_str(), report.n, report.oa, report.kappa);
    Ok(())
}

/// Normalized 5 s segments of one file, as the checkpoint expects them.
fn file_dataset(wav: &Path, meta: &CheckpointMeta) -> Result<(Dataset, Vec<f64>), CliError> {
    let stats = checkpoint_stats(meta)?;
    let buf = audio_io::resample(&audio_io::load_wav(wav)?, audio_io::TARGET_RATE)?;
    let segs = audio_io::segment(&buf, audio_io::SEGMENT_SECONDS)?;
    if segs.is_empty() {
        return Err(CliError::Data(format!("{} is shorter than one segment", wav.display())));
    }
    let fx = FeatureExtractor::new(meta.feature_kind)?;
    let grids = segs.iter().map(|s| fx.extract(&s.samples)).collect::<melgraph::Result<Vec<_>>>()?;
    let data = Dataset::from_grids(&grids, vec![0; grids.len()], &stats)?;
    Ok((data, segs.iter().map(|s| s.start_offset_s).collect()))
}

pub fn predict(wav: &Path, checkpoint: &Path, out: Option<&Path>, common: &Common) -> Res {
    must_exist(wav)?;
    must_exist(checkpoint)?;
    let cfg = resolve(&[("batch_size", "32")], common, &[])?;
    let batch: usize = cfg.get("batch_size")?;
    if batch == 0 {
        return Err(CliError::Usage("batch_size must be positive".into()));
    }
    let (model, meta) = load_model(checkpoint)?;
    let (data, starts) = file_dataset(wav, &meta)?;
    let probs = training::predict_proba(&model, &data, batch)?;
    let c = model.config().n_classes;
    let name = |i: usize| meta.class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));

    let mut text = String::from("segment,start_s,predicted,class_name");
    for i in 0..c {
        text.push_str(&format!(",p_{}", name(i)));
    }
    text.push('\n');
    for (s, p) in probs.iter().enumerate() {
        let best = (0..c).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap_or(0);
        text.push_str(&format!("{s},{},{best},{}", starts[s], name(best)));
        for v in p {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    match out {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| CliError::io(path, e))?;
            cfg.write(&sidecar(path))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct GradReport {
    tolerance: f64,
    passed: bool,
    max_rel_error: f64,
    primitives: Vec<(String, f64, usize)>,
    model: String,
    model_params: Vec<(String, f64)>,
    model_probes: usize,
    model_kinks_skipped: usize,
}

pub fn gradcheck(preset: Option<String>, out: Option<&Path>, common: &Common) -> Res {
    let cfg = resolve(
        &[
            ("preset", "default"),
            ("eps", "1e-5"),
            ("tolerance", "1e-4"),
            ("per_param", "2"),
            ("batch", "2"),
            ("seed", "7"),
        ],
        common,
        &[("preset", preset)],
    )?;
    let mcfg = match cfg.raw("preset") {
        // 512x128 input, 32x8 = 256 nodes
        "default" => ModelConfig::scaled(32, 2, 4, 4),
        "tiny" => {
            let mut m = ModelConfig::scaled(16, 2, 2, 3);
            m.input_frames = 64;
            m.input_bins = 32;
            m.head_hidden = 16;
            m.k_schedule = vec![2, 3];
            m
        }
        other => return Err(CliError::Usage(format!("unknown gradcheck preset {other:?}"))),
    };
    let eps: f64 = cfg.get("eps")?;
    let tol: f64 = cfg.get("tolerance")?;
    let seed: u64 = cfg.get("seed")?;
    if !(eps > 0.0) || !(tol > 0.0) {
        return Err(CliError::Usage("eps and tolerance must be positive".into()));
    }

    let prims = primitive_suite(seed, eps)?;
    for p in &prims {
        println!("{:<20} {:>10.3e}  ({} coords)", p.name, p.report.max_rel_error, p.report.checked);
    }
    let m = check_model_gradients(&mcfg, cfg.get("batch")?, cfg.get("per_param")?, seed, eps)?;
    for (name, e) in m.per_param() {
        println!("{name:<32} {e:>10.3e}");
    }
    let prim_max = prims.iter().map(|p| p.report.max_rel_error).fold(0.0, f64::max);
    let max = prim_max.max(m.report.max_rel_error);
    let passed = max < tol && prims.iter().all(|p| p.report.checked > 0) && m.report.checked > 0;
    let label = format!(
        "dim {} blocks {} heads {} nodes {}",
        mcfg.dim,
        mcfg.blocks,
        mcfg.heads,
        mcfg.n_nodes()
    );
    println!(
        "model ({label}): {} probes, {} skipped at kinks, max {:.3e}",
        m.report.checked, m.report.kinks_skipped, m.report.max_rel_error
    );
    println!("max relative error {max:.3e} (tolerance {tol:e}): {}", if passed { "PASS" } else { "FAIL" });
    if let Some(path) = out {
        let report = GradReport {
            tolerance: tol,
            passed,
            max_rel_error: max,
            primitives: prims.iter().map(|p| (p.name.clone(), p.report.max_rel_error, p.report.checked)).collect(),
            model: label,
            model_params: m.per_param().map(|(n, e)| (n.to_string(), e)).collect(),
            model_probes: m.report.checked,
            model_kinks_skipped: m.report.kinks_skipped,
        };
        write_json(path, &report)?;
        cfg.write(&sidecar(path))?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("max relative error {max:.3e} >= {tol:e}")))
    }
}

pub fn export(wav: &Path, checkpoint: &Path, out: &Path, kind: Option<String>, block: Option<usize>, common: &Common) -> Res {
    must_exist(wav)?;
    must_exist(checkpoint)?;
    let cfg = resolve(
        &[("kind", "attention"), ("block", "1"), ("segment", "0"), ("center", "all")],
        common,
        &[("kind", kind), ("block", block.map(|b| b.to_string()))],
    )?;
    let (model, meta) = load_model(checkpoint)?;
    let mc = model.config().clone();
    let block: usize = cfg.get("block")?;
    if block == 0 || block > mc.blocks {
        return Err(CliError::Usage(format!("block must be in 1..={}", mc.blocks)));
    }
    let (data, _) = file_dataset(wav, &meta)?;
    let seg: usize = cfg.get("segment")?;
    let spec = data
        .items
        .get(seg)
        .ok_or_else(|| CliError::Usage(format!("segment {seg} out of range ({} segments)", data.len())))?;
    create_dir(out)?;
    match cfg.raw("kind") {
        "attention" => {
            if !mc.use_encoder {
                return Err(CliError::Usage("model has no attention encoder".into()));
            }
            let maps = model.export_attention(spec, block)?;
            let paths = write_attention_csv(out, &maps)?;
            info!("{} attention maps for block {block} in {}", paths.len(), out.display());
        }
        "graph" => {
            if !mc.use_gnn {
                return Err(CliError::Usage("model has no graph layers".into()));
            }
            let edges = match cfg.raw("center") {
                "all" => model.export_graph_edges(spec, block)?,
                _ => model.export_graph(spec, block, cfg.get("center")?)?,
            };
            let path = out.join(format!("graph_block{block}.csv"));
            write_graph_csv(&path, &edges)?;
            info!("{} edges (K = {}) in {}", edges.len(), mc.k_schedule[block - 1], path.display());
        }
        other => return Err(CliError::Usage(format!("unknown export kind {other:?}"))),
    }
    cfg.write(&out.join(RESOLVED))
}
