use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pqf::finetune::conv_net;
use pqf::tensor_io::{load_checkpoint, save_checkpoint};

fn pqf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pqf")).args(args).env_remove("PQF_SEED").output().unwrap()
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name).to_string_lossy().into_owned()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8(bytes.to_vec()).unwrap()
}

#[test]
fn report_resnet18_ends_with_total_mb() {
    let out = pqf(&["report", &data("resnet18.arch"), "--regime", "small", "--k", "256"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout).lines().last(), Some("total_MB 1.54"));
    assert!(text(&out.stderr).lines().any(|l| l.starts_with("manifest {")));
}

#[test]
fn report_csv_has_header_and_totals() {
    let out = pqf(&["report", &data("resnet18.arch"), "--csv"]);
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("name,"));
    assert!(stdout.contains("total_bits"));
}

#[test]
fn groups_counts() {
    for (arch, n) in [("resnet18.arch", 12), ("resnet50.arch", 37)] {
        let out = pqf(&["groups", &data(arch)]);
        assert_eq!(out.status.code(), Some(0));
        let listed = pqf::graph::parse_groups(&text(&out.stdout)).unwrap();
        assert_eq!(listed.len(), n);
    }
}

#[test]
fn no_arguments_is_usage_error() {
    let out = pqf(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn bad_flag_value_is_usage_error() {
    let out = pqf(&["report", &data("resnet18.arch"), "--regime", "huge"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_is_data_error_with_record() {
    let out = pqf(&["groups", "/nonexistent/model.arch"]);
    assert_eq!(out.status.code(), Some(2));
    let line = text(&out.stderr).lines().find(|l| l.starts_with("error ")).unwrap().to_string();
    let (kind, message) = line.strip_prefix("error kind=").unwrap().split_once(" message=").unwrap();
    assert!(!kind.is_empty() && !kind.contains(' '));
    assert!(serde_json::from_str::<String>(message).is_ok());
}

fn toy_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("toy.pqfn");
    save_checkpoint(&conv_net(2, 4, 8, 4, 1).to_checkpoint(), &path).unwrap();
    path
}

#[test]
fn compress_decompress_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let run = |name: &str, seed: &str| {
        let out_path = dir.path().join(name);
        let manifest = dir.path().join(format!("{name}.json"));
        let out = pqf(&[
            "--seed", seed, "--manifest", manifest.to_str().unwrap(), "compress", ckpt.to_str().unwrap(),
            "--compress-first", "--k", "4", "--k-fc", "4", "--src-iters", "30", "--perm-iters", "50", "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
        (std::fs::read(&out_path).unwrap(), m)
    };
    let (a, ma) = run("a.pqfc", "7");
    let (b, mb) = run("b.pqfc", "7");
    assert_eq!(a, b);
    assert_eq!(ma["seed"], 7);
    assert_eq!(ma["layer_errors"], mb["layer_errors"]);

    let restored = dir.path().join("restored.pqfn");
    let out = pqf(&["decompress", dir.path().join("a.pqfc").to_str().unwrap(), "--out", restored.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let original = load_checkpoint(&ckpt).unwrap();
    let back = load_checkpoint(&restored).unwrap();
    assert_eq!(original.layers, back.layers);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    let out = Command::new(env!("CARGO_BIN_EXE_pqf"))
        .args(["--manifest", manifest.to_str().unwrap(), "groups", &data("resnet18.arch")])
        .env("PQF_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["seed"], 42);
}

#[test]
fn bench_csv_rows() {
    let out = pqf(&["bench", "--seeds", "2", "--rows", "8", "--cols", "32", "--k", "4", "--src-iters", "10", "--perm-iters", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("method,seed,E_t,rd_bound,wall_ms"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn eval_emits_trace_and_summary() {
    let out = pqf(&["eval", "--toy", "mlp", "--epochs", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).lines().count() >= 3);
    assert!(text(&out.stderr).lines().any(|l| l.starts_with("summary {")));
}
