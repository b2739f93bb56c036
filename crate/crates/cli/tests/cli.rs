use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ual(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ual")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ual(args);
    assert!(
        out.status.success(),
        "ual {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Small dataset plus a briefly trained model.
fn fixture(rho: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    let data = p(dir.path(), "data");
    ok(&["gen-data", "--out", &data, "--num-identities", "12", "--samples-per-identity", "8", "--d-in", "8", "--num-cameras", "2"]);
    ok(&[
        "train",
        "--data",
        &p(&dir.path().join("data"), "train.txt"),
        "--out",
        &p(dir.path(), "model.txt"),
        "--rho",
        rho,
        "--set",
        "epochs=2",
        "--set",
        "p=4",
        "--set",
        "iterations_per_epoch=5",
    ]);
    dir
}

#[test]
fn gen_data_writes_versioned_files() {
    let dir = TempDir::new().unwrap();
    let data = p(dir.path(), "d");
    ok(&["gen-data", "--out", &data, "--num-identities", "6", "--samples-per-identity", "4", "--num-cameras", "2"]);
    for name in ["train.txt", "query.txt", "query_corrupted.txt", "gallery.txt", "ood_shifted.txt", "ood_far.txt"] {
        let text = fs::read_to_string(dir.path().join("d").join(name)).unwrap();
        assert!(text.starts_with("ual-dataset v1"), "{name}");
    }
}

#[test]
fn zero_corruption_probability_leaves_queries_clean() {
    let dir = TempDir::new().unwrap();
    let data = p(dir.path(), "d");
    ok(&["gen-data", "--out", &data, "--num-identities", "8", "--samples-per-identity", "4", "--num-cameras", "2", "--corrupt-prob", "0"]);
    let clean = fs::read_to_string(dir.path().join("d/query.txt")).unwrap();
    let corrupted = fs::read_to_string(dir.path().join("d/query_corrupted.txt")).unwrap();
    assert_eq!(clean, corrupted);
}

#[test]
fn reruns_are_byte_identical() {
    let a = fixture("0.7");
    let b = fixture("0.7");
    for name in ["data/train.txt", "data/query_corrupted.txt", "model.txt"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let search = |d: &TempDir| {
        ok(&[
            "search",
            "--model",
            &p(d.path(), "model.txt"),
            "--query",
            &p(d.path(), "data/query.txt"),
            "--gallery",
            &p(d.path(), "data/gallery.txt"),
        ])
    };
    assert_eq!(search(&a), search(&b));
}

#[test]
fn missing_model_exits_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let out = ual(&[
        "embed",
        "--model",
        &p(dir.path(), "absent.txt"),
        "--data",
        &p(dir.path(), "absent.txt"),
        "--out",
        &p(dir.path(), "e.txt"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.txt"));
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    assert_eq!(ual(&["search", "--bogus"]).status.code(), Some(2));
}

#[test]
fn resolved_command_is_printed() {
    let dir = TempDir::new().unwrap();
    let out = ual(&["init-config", "--out", &p(dir.path(), "c.txt")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("# resolved: ual init-config"));
    let cfg = fs::read_to_string(dir.path().join("c.txt")).unwrap();
    let rho = cfg.lines().find_map(|l| l.strip_prefix("rho = ")).unwrap();
    assert_eq!(rho.parse::<f64>().unwrap(), 0.7);
}

#[test]
fn ood_probe_repeats_values_for_the_same_dataset() {
    let dir = fixture("0.7");
    let train = p(dir.path(), "data/train.txt");
    let out = ok(&["probe-ood", "--model", &p(dir.path(), "model.txt"), "--datasets", &format!("{train},{train}")]);
    let values: Vec<&str> = out.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(values.len(), 2);
    assert_eq!(values[0], values[1]);
}

#[test]
fn full_keep_probability_gives_zero_model_uncertainty() {
    let dir = fixture("1");
    let emb = p(dir.path(), "emb.txt");
    ok(&["embed", "--model", &p(dir.path(), "model.txt"), "--data", &p(dir.path(), "data/gallery.txt"), "--out", &emb]);
    let out = fs::read_to_string(&emb).unwrap();
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let m: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(m, 0.0);
    }
}

#[test]
fn noise_probe_echoes_requested_etas() {
    let dir = fixture("0.7");
    let out = ok(&[
        "probe-noise",
        "--model",
        &p(dir.path(), "model.txt"),
        "--data",
        &p(dir.path(), "data/query.txt"),
        "--etas",
        "0,1.5,3",
    ]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("eta,mean_sigma2_d,q25,median,q75"));
    let etas: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(etas, vec![0.0, 1.5, 3.0]);
}

#[test]
fn analysis_commands_produce_output() {
    let dir = fixture("0.7");
    let model = p(dir.path(), "model.txt");
    let query = p(dir.path(), "data/query_corrupted.txt");
    let gallery = p(dir.path(), "data/gallery.txt");
    let sweep = ok(&["gate-sweep", "--model", &model, "--query", &query, "--gallery", &gallery, "--alpha-grid", "0,0.5"]);
    assert_eq!(sweep.lines().count(), 3);
    for fusion in ["reliability", "uniform"] {
        let mq = ok(&["multi-query", "--model", &model, "--query", &query, "--gallery", &gallery, "--fusion", fusion]);
        assert!(mq.contains("mAP") || mq.contains("map"), "{mq}");
    }
    let change = ok(&["probe-model-change", "--model", &model, "--data", &p(dir.path(), "data/train.txt"), "--etas", "0,2"]);
    assert_eq!(change.lines().next(), Some("eta,mean_param_change"));
    assert_eq!(change.lines().count(), 3);
}
