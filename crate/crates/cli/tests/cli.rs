use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use melgraph::audio_io::write_wav;
use melgraph::synthgen::{default_preset, gen_sample, SAMPLE_RATE};

fn melgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melgraph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run melgraph")
}

fn ok(args: &[&str]) -> Output {
    let out = melgraph(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    melgraph(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn tone_file(dir: &Path, seconds: f64) -> PathBuf {
    let path = dir.join(format!("tone_{seconds}.wav"));
    let x = gen_sample(&default_preset()[2], seconds, SAMPLE_RATE, 11).unwrap();
    write_wav(&path, &x, SAMPLE_RATE).unwrap();
    path
}

/// 4 classes x (4 train, 1 val, 2 test) and a 3-epoch small model.
fn trained(dir: &Path, seed: &str, name: &str) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    if !data.join("split_manifest.csv").exists() {
        let cfg = dir.join("synth.cfg");
        std::fs::write(&cfg, "counts = 4, 1, 2\nseed = 21\n").unwrap();
        ok(&["synth", "--out", s(&data), "--config", s(&cfg)]);
    }
    let run = dir.join(name);
    let cfg = dir.join("train.cfg");
    std::fs::write(&cfg, "model.dim = 16\nmodel.heads = 2\nmodel.head_hidden = 32\ntrain.batch_size = 8\n").unwrap();
    ok(&[
        "train",
        "--manifest",
        s(&data.join("split_manifest.csv")),
        "--out",
        s(&run),
        "--preset",
        "small",
        "--epochs",
        "3",
        "--seed",
        seed,
        "--config",
        s(&cfg),
    ]);
    (data.join("split_manifest.csv"), run)
}

#[test]
fn hinich_on_twenty_seconds_gives_forty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone_file(dir.path(), 20.0);
    let out = dir.path().join("h.csv");
    ok(&["hinich", s(&wav), "--out", s(&out)]);
    let (header, rows) = read_csv(&out);
    assert_eq!(
        header.join(","),
        "window_index,pfa,statistic,dof,est_iqr,theo_iqr,gaussian_decision,linear_decision"
    );
    assert_eq!(rows.len(), 40);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        let pfa: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&pfa));
    }
    let resolved = std::fs::read_to_string(dir.path().join("h.csv.config")).unwrap();
    assert!(resolved.contains("window_s = 0.5"), "{resolved}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone_file(dir.path(), 4.0);
    let cfg = dir.path().join("h.cfg");
    std::fs::write(&cfg, "# one window per second\nwindow_s = 1.0\n").unwrap();
    let out = dir.path().join("h.csv");
    ok(&["hinich", s(&wav), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(read_csv(&out).1.len(), 4);
    ok(&["hinich", s(&wav), "--out", s(&out), "--config", s(&cfg), "--window-s", "0.25"]);
    assert_eq!(read_csv(&out).1.len(), 16);
    let resolved = std::fs::read_to_string(dir.path().join("h.csv.config")).unwrap();
    assert!(resolved.contains("window_s = 0.25"), "{resolved}");
}

#[test]
fn synth_is_reproducible_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--n-per-class", "3", "--seed", "5"]);
    }
    let (_, rows) = read_csv(&a.join("manifest.csv"));
    assert_eq!(rows.len(), 12);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        if n == "manifest.csv" || n == "split_manifest.csv" {
            continue; // absolute paths differ by directory
        }
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn train_eval_predict_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, run) = trained(dir.path(), "4", "run");
    for f in ["best.gtck", "last.gtck", "history.csv", "summary.json", "config.resolved", "split_manifest.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(read_csv(&run.join("history.csv")).1.len(), 3);

    // same seed, identical history and weights
    let (_, again) = trained(dir.path(), "4", "again");
    for f in ["history.csv", "best.gtck", "last.gtck"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let metrics = dir.path().join("m.json");
    ok(&["eval", "--checkpoint", s(&run.join("best.gtck")), "--manifest", s(&manifest), "--out", s(&metrics)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    for key in ["oa", "aa", "kappa", "f1", "per_class", "n", "config_hash", "seed"] {
        assert!(m.get(key).is_some(), "{key} missing from {m}");
    }
    assert_eq!(m["n"], 8);
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    // relabel the test rows with the model's own predictions: OA must be 1
    let (header, rows) = read_csv(&manifest);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    // next to the original so relative audio paths still resolve
    let data = manifest.parent().unwrap();
    let mut relabeled = csv::Writer::from_path(data.join("relabeled.csv")).unwrap();
    relabeled.write_record(&header).unwrap();
    for mut r in rows {
        if r[col("split")] == "test" {
            let pred = dir.path().join("p.csv");
            let wav = data.join(&r[col("path")]);
            ok(&["predict", s(&wav), "--checkpoint", s(&run.join("best.gtck")), "--out", s(&pred)]);
            let (_, p) = read_csv(&pred);
            r[col("label")] = p[0][2].clone();
        }
        relabeled.write_record(&r).unwrap();
    }
    relabeled.flush().unwrap();
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.gtck")),
        "--manifest",
        s(&data.join("relabeled.csv")),
        "--out",
        s(&metrics),
    ]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["oa"], 1.0);

    // probabilities of every segment of a 15 s file sum to one
    let wav = tone_file(dir.path(), 15.0);
    let out = ok(&["predict", s(&wav), "--checkpoint", s(&run.join("best.gtck"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("segment,start_s,predicted,class_name,p_cargo"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let p: f64 = r.split(',').skip(4).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-6, "{r}");
    }

    let exp = dir.path().join("exp");
    ok(&["export", s(&wav), "--checkpoint", s(&run.join("best.gtck")), "--out", s(&exp), "--block", "4"]);
    let heads: Vec<_> = (1..=2).map(|h| exp.join(format!("head{h}.csv"))).collect();
    for h in &heads {
        let text = std::fs::read_to_string(h).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 256);
        for r in rows {
            let sum: f64 = r.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }
    for (block, k) in [(1, 2), (4, 8)] {
        let b = block.to_string();
        ok(&["export", s(&wav), "--checkpoint", s(&run.join("best.gtck")), "--out", s(&exp), "--kind", "graph", "--block", &b]);
        let (_, edges) = read_csv(&exp.join(format!("graph_block{block}.csv")));
        assert_eq!(edges.len(), 256 * k);
        assert!(edges.iter().all(|e| e[5] == k.to_string()));
    }
}

#[test]
fn gradcheck_tiny_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    ok(&["gradcheck", "--preset", "tiny", "--out", s(&out)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let wav = tone_file(dir.path(), 1.0);
    let out = dir.path().join("h.csv");
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["hinich", s(&wav), "--out", s(&out), "--window-s", "abc"]), 1);
    assert_eq!(code(&["hinich", s(&wav), "--out", s(&out), "--window-s", "-1"]), 1);
    assert_eq!(code(&["hinich", s(&dir.path().join("missing.wav")), "--out", s(&out)]), 1);
    assert_eq!(code(&["gradcheck", "--preset", "huge"]), 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.width = 3\n").unwrap();
    assert_eq!(code(&["hinich", s(&wav), "--out", s(&out), "--config", s(&cfg)]), 1);
    assert_eq!(code(&["--help"]), 0);

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav file").unwrap();
    assert_eq!(code(&["hinich", s(&junk), "--out", s(&out)]), 2);
    let ck = dir.path().join("junk.gtck");
    std::fs::write(&ck, b"GTCK").unwrap();
    assert_eq!(code(&["predict", s(&wav), "--checkpoint", s(&ck)]), 2);

    let status = Command::new(env!("CARGO_BIN_EXE_melgraph"))
        .args(["hinich", s(&wav), "--out", s(&out)])
        .env("MELGRAPH_THREADS", "zero")
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    let status = Command::new(env!("CARGO_BIN_EXE_melgraph"))
        .args(["hinich", s(&wav), "--out", s(&out)])
        .env("MELGRAPH_THREADS", "2")
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
}
