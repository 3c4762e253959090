use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shufflefac::frontend::write_wav;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shufflefac"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Two tones per class, `seconds` long at 16 kHz.
fn tone(label: usize, variant: usize, seconds: usize) -> Vec<f64> {
    let base = [300.0, 1000.0, 2500.0, 5000.0][label] * (1.0 + 0.03 * variant as f64);
    (0..16_000 * seconds)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            0.2 * (2.0 * PI * base * t).sin() + 0.1 * (2.0 * PI * base * 1.2 * t + 0.5).sin()
        })
        .collect()
}

/// Eight recordings per class, 6 s each, plus a manifest.
fn corpus(dir: &Path) -> String {
    let mut csv = String::from("path,label,recording_id\n");
    for label in 0..4 {
        for v in 0..8 {
            let name = format!("c{label}_{v}.wav");
            write_wav(dir.join(&name), &tone(label, v, 6), 16_000).unwrap();
            csv.push_str(&format!("{name},{label},rec{label}{v}\n"));
        }
    }
    let path = dir.join("all.csv");
    fs::write(&path, csv).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn summary_prints_stage_shapes() {
    let out = ok(&["summary", "--gamma", "16"]);
    for shape in ["16x64x12", "32x32x6", "64x16x6", "128x8x6", "128x1x6"] {
        assert!(out.contains(shape), "{shape} missing from\n{out}");
    }
    assert!(out.contains("total params"));
}

#[test]
fn count_json_has_both_totals() {
    let out = ok(&["count", "--gamma", "16", "--kernel-first", "3", "--kernel-dw", "3", "--json", "-"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["total_params"], 34383);
    assert!(v["total_params_excl_bias_bn"].as_u64().unwrap() < 34383);
    assert!(v["total_macs"].as_u64().unwrap() > 0);
    assert!(!v["entries"].as_array().unwrap().is_empty());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["summary", "--gamma", "6"]).status.code(), Some(1));
    assert_eq!(run(&["summary", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["profile", "--runs", "0"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.sfac");
    fs::write(&bad, b"SFAC garbage").unwrap();
    let wav = dir.path().join("a.wav");
    write_wav(&wav, &tone(0, 0, 3), 16_000).unwrap();
    let o = run(&["classify", "--model", bad.to_str().unwrap(), "--wav", wav.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--model"));

    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "file,class\nx.wav,0\n").unwrap();
    let o = run(&["split", "--manifest", manifest.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn split_features_train_eval_classify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let all = corpus(d);
    let splits = d.join("splits");
    let s = splits.to_str().unwrap();

    let out = ok(&["--seed", "3", "split", "--manifest", &all, "--out-dir", s]);
    assert!(out.contains("train"));
    let first = fs::read_to_string(splits.join("train.csv")).unwrap();
    ok(&["--seed", "3", "split", "--manifest", &all, "--out-dir", s]);
    assert_eq!(first, fs::read_to_string(splits.join("train.csv")).unwrap());

    let feats = d.join("feats");
    ok(&["features", "--manifest", &all, "--out-dir", feats.to_str().unwrap()]);
    let fm = feats.join("manifest.csv");
    assert_eq!(fs::read_to_string(&fm).unwrap().lines().count(), 33);

    let model = d.join("m.sfac");
    let log = d.join("log.csv");
    let train_args = |out: &Path, log: &Path| {
        vec![
            "--seed".to_string(),
            "1".into(),
            "train".into(),
            "--manifest".into(),
            fm.to_str().unwrap().into(),
            "--gamma".into(),
            "4".into(),
            "--epochs".into(),
            "25".into(),
            "--batch-size".into(),
            "16".into(),
            "--lr".into(),
            "0.01".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--log".into(),
            log.to_str().unwrap().into(),
        ]
    };
    let a: Vec<String> = train_args(&model, &log);
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let log_text = fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("epoch,train_loss,val_loss,val_acc,val_macro_f1"));
    assert_eq!(log_text.lines().count(), 26);

    // same seed, same first-epoch loss
    let log2 = d.join("log2.csv");
    let b: Vec<String> = train_args(&d.join("m2.sfac"), &log2);
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    let epoch1 = |p: &Path| fs::read_to_string(p).unwrap().lines().nth(1).unwrap().to_string();
    assert_eq!(epoch1(&log), epoch1(&log2));

    let m = model.to_str().unwrap();
    let eval = ok(&["eval", "--model", m, "--manifest", fm.to_str().unwrap(), "--json", "-"]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["metrics"]["accuracy"].as_f64().unwrap() >= 0.9, "{v}");
    assert_eq!(v["predictions"].as_array().unwrap().len(), 64);

    let wav = d.join("c2_1.wav");
    let lines = ok(&["classify", "--model", m, "--wav", wav.to_str().unwrap()]);
    let rows: Vec<Vec<&str>> = lines.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 6);
        assert_eq!(r[0], i.to_string());
        assert_eq!(r[1], "2");
        assert!(r[2..].iter().all(|x| x.parse::<f64>().is_ok()));
    }

    let summary = ok(&["summary", "--model", m]);
    assert!(summary.contains("4x64x12"));
}

#[test]
fn profile_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("p.json");
    let out = ok(&[
        "profile", "--gamma", "8", "--runs", "5", "--warmup", "1", "--power-watts", "12", "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.contains("P_cpu = 12 W"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["runs"], 5);
    assert_eq!(v["latencies_ms"].as_array().unwrap().len(), 5);
    assert_eq!(v["energy"]["p_cpu_watts"], 12.0);
    assert_eq!(v["end_to_end"], false);

    let wav = dir.path().join("t.wav");
    write_wav(&wav, &tone(1, 0, 3), 16_000).unwrap();
    let out = ok(&[
        "profile", "--gamma", "8", "--runs", "3", "--warmup", "0", "--end-to-end", "--wav",
        wav.to_str().unwrap(), "--json", "-",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["end_to_end"], true);
    assert!(v["ops"].as_array().unwrap().iter().any(|o| o["name"] == "log_mel"));
}

#[test]
fn features_from_wav_list() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("long.wav");
    write_wav(&wav, &tone(3, 0, 7), 16_000).unwrap();
    let out_dir = dir.path().join("f");
    ok(&["features", "--wav", wav.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    let t = shufflefac::sft::read(out_dir.join("long.sft")).unwrap();
    assert_eq!(t.shape(), [2, 1, 128, 24]);
}
