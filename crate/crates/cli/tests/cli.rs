use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
name = "tiny"
seed = 3

[model]
preset = "default_cnn"
channels = [2, 4]
kernel = 3

[dataset]
source = "synthetic"
per_class = 8
test_per_class = 4
classes = 4
dims = [1, 28, 28]

[watermark]
n_keys = 2
max_hardening_steps = 20

[training]
epochs = 1
batch_size = 16

[[attack]]
kind = "fine_tune"
epochs = 1
lr_factor = 0.1

[[attack]]
kind = "prune"
levels = [0.0, 0.5]

[[attack]]
kind = "erase"
keys = "random"
secrets = "noise"
steps = 2
"#;

fn inkwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inkwm")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path) -> Output {
    let o = inkwm(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "-q"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
}

#[test]
fn unknown_config_key_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", &TINY.replace("[training]", "[training]\nlearning_rate = 0.1"));
    let out = tmp.path().join("out");
    let o = inkwm(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!out.exists());
}

#[test]
fn manifest_lists_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("out");
    run(&cfg, &out);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<String> = manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let mut found = Vec::new();
    walk(&out, &out, &mut found);
    found.sort();
    assert_eq!(listed, found);
    for f in ["metrics.json", "model.ckpt", "model.json", "keys.txt", "baseline.ckpt", "extraction/key_00.pgm", "attacks/01_prune/curve.csv"] {
        assert!(found.iter().any(|x| x == f), "{f} missing");
    }
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    for phase in ["data_s", "harden_s", "train_s", "extract_s", "attacks_s", "total_s"] {
        assert!(manifest["timings"][phase].is_number(), "{phase}");
    }
}

#[test]
fn same_seed_same_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a);
    run(&cfg, &b);
    let read = |d: &Path| std::fs::read(d.join("metrics.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());

    let c = tmp.path().join("c");
    let o = inkwm(&["run", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "4", "-q"]);
    assert!(o.status.success());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn extract_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("run");
    run(&cfg, &out);
    let ex = tmp.path().join("ex");
    let o = inkwm(&[
        "extract",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
        "--keys",
        out.join("keys.txt").to_str().unwrap(),
        "--out",
        ex.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    let a = metrics["extraction"]["mean_ssim"].as_f64().unwrap();
    let b = summary["report"]["mean_ssim"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");

    let v = inkwm(&[
        "verify",
        "--images",
        ex.join("key_00.pgm").to_str().unwrap(),
        "--secrets",
        ex.join("key_00.pgm").to_str().unwrap(),
    ]);
    assert!(v.status.success());
    let report: Value = serde_json::from_slice(&v.stdout).unwrap();
    assert!((report["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn extract_without_keys_file_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("run");
    run(&cfg, &out);
    let ex = tmp.path().join("ex");
    let o = inkwm(&[
        "extract",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
        "--keys",
        tmp.path().join("missing.txt").to_str().unwrap(),
        "--out",
        ex.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("extract failed"));
    assert!(!ex.exists());
}

#[test]
fn zero_length_payload_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dotcode = TINY.replace("n_keys = 2", "secret = \"dotcode\"\npayload_bits = 0");
    let cfg = write_config(tmp.path(), "zero.toml", &dotcode);
    let o = inkwm(&["capacity", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(tmp.path().join("empty.bin"), b"").unwrap();
    let from_file = TINY.replace("n_keys = 2", "secret = \"dotcode\"\npayload_file = \"empty.bin\"");
    let cfg = write_config(tmp.path(), "empty.toml", &from_file);
    let o = inkwm(&["capacity", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("is empty"));
}

#[test]
fn capacity_reports_both_bit_error_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("n_keys = 2", "secret = \"dotcode\"\npayload_bits = 16\nbits_per_image = 16\necc = \"hamming74\"");
    let cfg = write_config(tmp.path(), "cap.toml", &text);
    let out = tmp.path().join("cap");
    let o = inkwm(&["capacity", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "-q"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("capacity.json")).unwrap()).unwrap();
    assert_eq!(rep["data_bits"], 16);
    assert_eq!(rep["code_bits"], 28);
    assert_eq!(rep["images"], 2);
    for k in ["after_training", "after_fine_tuning"] {
        let raw = rep[k]["raw"].as_f64().unwrap();
        let ecc = rep[k]["ecc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&raw) && (0.0..=1.0).contains(&ecc));
    }
}

#[test]
fn attack_subcommand_reuses_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("run");
    run(&cfg, &out);
    let att = tmp.path().join("att");
    let o = inkwm(&["attack", "--config", cfg.to_str().unwrap(), "--from", out.to_str().unwrap(), "--out", att.to_str().unwrap(), "-q"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(att.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.as_array().unwrap().len(), 3);
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        let cfg = inkwm_cli::ExperimentConfig::from_toml(&text, &dir).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(cfg.name, p.file_stem().unwrap().to_str().unwrap());
        n += 1;
    }
    assert!(n >= 14);
}
