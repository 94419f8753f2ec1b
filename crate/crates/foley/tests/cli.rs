use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use foley::caft::Caft;
use foley::checkpoint::load_checkpoint;

fn foley(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foley"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn foley")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = foley(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    foley(dir, args).status.code().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("timing.json") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const DATA: &[&str] = &["gen-data", "--out", "data", "--n", "24", "--conflict-ratio", "0.5", "--seed", "5"];
const BACKBONE: &[&str] = &["train", "--phase", "backbone", "--data", "data", "--steps", "3", "--out", "bb.caft"];
const ADAPTER: &[&str] = &[
    "train", "--phase", "adapter", "--data", "data", "--backbone", "bb.caft", "--steps", "2", "--out", "ad.caft",
];

fn pipeline(dir: &Path) {
    ok(dir, DATA);
    ok(dir, BACKBONE);
    ok(dir, ADAPTER);
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(a.path(), "1"), (b.path(), "3")] {
        for args in [DATA, BACKBONE, ADAPTER] {
            let o = Command::new(env!("CARGO_BIN_EXE_foley"))
                .current_dir(dir)
                .env("FOLEY_ADAPTER_THREADS", threads)
                .args(args)
                .output()
                .unwrap();
            assert!(o.status.success());
        }
    }
    assert_eq!(fs::read(a.path().join("ad.caft")).unwrap(), fs::read(b.path().join("ad.caft")).unwrap());
    let o = Command::new(env!("CARGO_BIN_EXE_foley"))
        .current_dir(a.path())
        .env("FOLEY_ADAPTER_THREADS", "zero")
        .args(DATA)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn adapter_checkpoint_records_the_frozen_backbone() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    let bb = load_checkpoint(&d.path().join("bb.caft")).unwrap();
    let ad = load_checkpoint(&d.path().join("ad.caft")).unwrap();
    assert_eq!(bb.checkpoint.backbone_fingerprint, ad.checkpoint.backbone_fingerprint);
    let restored = ad.checkpoint.restore().unwrap();
    assert_eq!(restored.backbone.fingerprint(), bb.checkpoint.backbone_fingerprint);
    assert!(restored.adapter.is_some());
    assert_eq!(ad.run_config["command"], "train");
    assert_eq!(ad.run_config["paths"]["backbone"], "bb.caft");
    let timing: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("ad.caft.timing.json")).unwrap()).unwrap();
    assert_eq!(timing["steps"], 2);
    let csv = fs::read_to_string(d.path().join("bb.caft.loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss,grad_norm"), "{csv}");
}

#[test]
fn generate_and_eval_write_their_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    ok(p, &["generate", "--ckpt", "ad.caft", "--scene-file", "data/scenes/000000.caft", "--steps", "3", "--out", "g/z.caft"]);
    let z = Caft::read(&p.join("g/z.caft")).unwrap();
    assert_eq!(z.get("latent").unwrap().shape(), &[216, 8]);
    let side: serde_json::Value = serde_json::from_slice(&fs::read(p.join("g/z.caft.json")).unwrap()).unwrap();
    assert_eq!(side["steps"], 3);
    assert_eq!(side["run_config"]["command"], "generate");

    ok(p, &["eval", "--ckpt", "ad.caft", "--data", "data", "--mode", "disentangle", "--steps", "3", "--limit", "2", "--out", "e1"]);
    let rec = fs::read_to_string(p.join("e1/records.csv")).unwrap();
    assert_eq!(rec.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("e1/report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"]["scenes"], 2);
    assert!(report["run_config"]["config"]["seed"].is_u64());

    ok(p, &["eval", "--ckpt", "bb.caft", "--data", "data", "--mode", "aligned", "--baseline", "--steps", "2", "--limit", "2", "--out", "e2"]);
    ok(p, &["eval", "--ckpt", "ad.caft", "--data", "data", "--mode", "alpha-sweep", "--alphas", "0,1", "--steps", "2", "--limit", "2", "--out", "e3"]);
    let sweep = fs::read_to_string(p.join("e3/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "alpha,acc,mean_offset,frechet,clap");
    assert_eq!(sweep.lines().count(), 3);
    assert!(fs::read_to_string(p.join("e3/sweep.svg")).unwrap().contains("<svg"));
    assert!(p.join("e3/sweep.json").exists());
}

#[test]
fn bad_arguments_exit_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let o = foley(p, &["gen-data", "--out", "x", "--n", "4", "--conflict-ratio", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[0, 1]"));
    assert_eq!(code(p, &["gen-data", "--out", "x", "--n", "4", "--conflict-ratio", "-0.1"]), 2);
    assert_eq!(code(p, &["frobnicate"]), 2);
    pipeline(p);
    assert_eq!(code(p, &["train", "--phase", "adapter", "--data", "data", "--steps", "1", "--out", "a.caft"]), 2);
    assert_eq!(code(p, &["eval", "--ckpt", "ad.caft", "--data", "data", "--mode", "bogus", "--out", "e"]), 2);
    let gen = ["generate", "--ckpt", "ad.caft", "--scene-file", "data/scenes/000000.caft", "--out", "z.caft"];
    assert_eq!(code(p, &[&gen[..], &["--text-class", "12"]].concat()), 2);
    assert_eq!(code(p, &[&gen[..], &["--gamma", "-1"]].concat()), 2);
    fs::write(p.join("cfg.json"), r#"{"synth": {"no_such_key": 1}}"#).unwrap();
    assert_eq!(code(p, &["--config", "cfg.json", "gen-data", "--out", "y", "--n", "2"]), 2);
}

#[test]
fn damaged_files_exit_with_code_three() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    let eval = ["eval", "--ckpt", "ad.caft", "--data", "data", "--steps", "1", "--limit", "1", "--out", "e"];
    let mut bytes = fs::read(p.join("ad.caft")).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 0x10;
    fs::write(p.join("ad.caft"), &bytes).unwrap();
    let o = foley(p, &eval);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ad.caft"));

    // version field follows the four magic bytes
    let mut bytes = fs::read(p.join("bb.caft")).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    fs::write(p.join("ad.caft"), &bytes).unwrap();
    let o = foley(p, &eval);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("99"));

    assert_eq!(code(p, &["eval", "--ckpt", "missing.caft", "--data", "data", "--out", "e"]), 3);
    fs::write(p.join("data/scenes/000003.caft"), b"CAFT").unwrap();
    assert_eq!(code(p, &["eval", "--ckpt", "bb.caft", "--data", "data", "--out", "e"]), 3);
}
