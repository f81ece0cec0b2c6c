use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccreid::checkpoint::Checkpoint;
use ccreid::config::RunConfig;
use ccreid::dataset::load_manifest;
use ccreid::model::Ablation;

fn ccreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccreid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ccreid(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ccreid(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 4-identity 32×32 dataset plus a tiny-model config pointing at it.
fn tiny_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&[
        "synth", "--ids", "4", "--clothes", "2", "--per", "3", "--height", "32", "--width", "32",
        "--gallery-per-id", "1", "--out", s(&data),
    ]);
    let mut cfg = RunConfig::default();
    cfg.dataset.manifest = s(&data.join("manifest.json")).to_string();
    cfg.backbone.input_size = [32, 32];
    cfg.backbone.hidden_channels = [4, 6, 8];
    cfg.backbone.out_channels = 8;
    cfg.cdn.capsule_channels = 2;
    cfg.cdn.attribute_capsules = 4;
    cfg.psa.hidden_channels = 4;
    cfg.trainer.epochs = 3;
    cfg.trainer.p = 2;
    cfg.trainer.k = 2;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    (data, path)
}

#[test]
fn help_matches_golden_file() {
    let help = ok(&["--help"]);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &help).unwrap();
    }
    assert_eq!(help, fs::read_to_string(&golden).unwrap());
    for (key, value) in RunConfig::documented_defaults() {
        assert!(help.contains(&format!("  {key} = {value}\n")), "{key} missing from --help");
    }
}

#[test]
fn synth_writes_a_valid_dataset_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&["synth", "--ids", "8", "--clothes", "2", "--per", "16", "--seed", "7", "--out", s(&a)]);
    let m = load_manifest(a.join("manifest.json")).unwrap();
    assert_eq!(m.records.len(), 256);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 256);
    assert_eq!(code(&["synth", "--out", s(&a)]), 2);

    let b = dir.path().join("b");
    ok(&["synth", "--ids", "8", "--clothes", "2", "--per", "16", "--seed", "7", "--out", s(&b)]);
    for sub in ["images", "parts"] {
        for entry in fs::read_dir(a.join(sub)).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.join(sub).join(&name)).unwrap(), fs::read(b.join(sub).join(&name)).unwrap());
        }
    }
    let ma = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("manifest.json")).unwrap());
    ok(&["synth", "--ids", "2", "--per", "1", "--force", "--out", s(&a)]);
}

#[test]
fn train_applies_flags_over_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_setup(dir.path());
    let run = dir.path().join("run");
    let out = ok(&["train", "--config", s(&cfg), "--ablation", "mgr", "--epochs", "2", "--out", s(&run)]);
    let ck = Checkpoint::load(&run.join("checkpoint.ckpt")).unwrap();
    assert_eq!(ck.config.trainer.ablation, Ablation::MGR);
    assert_eq!(ck.config.trainer.epochs, 2);
    assert_eq!(ck.epoch, 2);
    assert!(out.contains(&ck.fingerprint()));
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(saved.fingerprint(), ck.fingerprint());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), ck.step);

    // a finished run is resumed as a no-op; a different config is refused
    let again = ["train", "--config", s(&cfg), "--ablation", "mgr", "--epochs", "2", "--out", s(&run)];
    ok(&again);
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap(), log);
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&run)]), 2);

    assert_eq!(code(&["train", "--config", s(&dir.path().join("missing.json")), "--out", s(&run)]), 2);
    assert_eq!(code(&["train", "--config", s(&cfg), "--trainer.epochs=0", "--out", s(&run)]), 2);
    assert_eq!(code(&["train", "--config", s(&cfg), "--trainer.nope=1", "--out", s(&run)]), 2);
}

#[test]
fn same_seed_gives_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&b)]);
    for f in ["checkpoint.ckpt", "train_log.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn eval_reports_metrics_and_filtering() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_setup(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--epochs", "1", "--ablation", "mgr,cdn", "--out", s(&run)]);
    let ck = run.join("checkpoint.ckpt");

    let report = dir.path().join("report.json");
    let text = ok(&["eval", "--checkpoint", s(&ck), "--report", s(&report)]);
    assert!(text.contains("rank-1"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["mAP", "rank1", "rank5", "rank10", "dropped_queries", "filtered_gallery_entries"] {
        assert!(json.get(key).is_some(), "{key} missing");
    }
    let cc = dir.path().join("cc.json");
    ok(&["eval", "--checkpoint", s(&ck), "--cloth-change-only", "--report", s(&cc)]);
    let json_cc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cc).unwrap()).unwrap();
    assert_eq!(json_cc["protocol"]["cloth_change_only"], true);

    // descriptor files give the same numbers as evaluating the checkpoint directly
    let (q, g) = (dir.path().join("q.desc"), dir.path().join("g.desc"));
    ok(&["extract", "--checkpoint", s(&ck), "--split", "query", "--out", s(&q)]);
    ok(&["extract", "--checkpoint", s(&ck), "--split", "gallery", "--out", s(&g)]);
    let via_files = dir.path().join("files.json");
    ok(&["eval", "--query", s(&q), "--gallery", s(&g), "--report", s(&via_files)]);
    let json_files: serde_json::Value = serde_json::from_str(&fs::read_to_string(&via_files).unwrap()).unwrap();
    assert_eq!(json_files["mAP"], json["mAP"]);

    assert_eq!(code(&["eval", "--checkpoint", s(&dir.path().join("nope.ckpt"))]), 2);
    assert_eq!(code(&["eval"]), 2);
    // a checkpoint whose config disagrees with its parameters
    let mut broken = Checkpoint::load(&ck).unwrap();
    broken.config.cdn.attribute_capsules = 5;
    let bad = dir.path().join("bad.ckpt");
    broken.save(&bad).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&bad)]), 2);
}

#[test]
fn ablate_writes_a_four_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_setup(dir.path());
    let out = dir.path().join("ablate");
    let table = ok(&["ablate", "--config", s(&cfg), "--epochs", "1", "--cloth-change-only", "--out", s(&out)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    for (line, name) in lines[1..].iter().zip(["baseline", "mgr", "mgr+cdn", "mgr+cdn+psa"]) {
        assert!(line.starts_with(name), "{line}");
    }
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let enabled: Vec<u64> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| ["mgr", "cdn", "psa"].iter().filter(|k| r[**k] == true).count() as u64)
        .collect();
    assert_eq!(enabled, [0, 1, 2, 3]);
    assert_eq!(fs::read_to_string(out.join("ablation.txt")).unwrap(), table);
}
