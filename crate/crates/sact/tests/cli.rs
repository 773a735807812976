use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sact(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sact")).args(args).current_dir(cwd).output().unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(read_tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let none = sact(&[], dir.path());
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(sact(&["train", "--frobnicate"], dir.path()).status.code(), Some(2));
    let missing = sact(&["train", "--data", "d", "--out", "o", "--config", "absent.json"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(sact(&["gradcheck", "--variant", "sideways"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = sact(&["eval", "--checkpoint", "nowhere", "--data", "nothing"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no such file"));
}

#[test]
fn gradcheck_separated_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = sact(&["gradcheck", "--variant", "separated"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = sact(&["generate-data", "--out", "data", "--num-clips", "8", "--frames", "40", "--seed", "1"], d);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    fs::write(
        d.join("c.json"),
        r#"{"appearance_dim": 32, "motion_dim": 32, "num_heads": 2, "decoder_heads": 2, "epochs": 2, "learning_rate": 0.001}"#,
    )
    .unwrap();
    for out in ["a", "b"] {
        let r = sact(&["train", "--data", "data", "--out", out, "--config", "c.json", "--seed", "7"], d);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let (a, b) = (read_tree(&d.join("a")), read_tree(&d.join("b")));
    assert!(a.iter().any(|(n, _)| n == "manifest.json"));
    assert!(a.iter().any(|(n, _)| n == "metrics.json"));
    assert_eq!(a, b);

    let eval = sact(&["eval", "--checkpoint", "a", "--data", "data"], d);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    for line in String::from_utf8(eval.stdout).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["clip_id", "score", "start", "end"] {
            assert!(v.get(key).is_some(), "{line}");
        }
    }
    assert!(d.join("a/eval-val.json").is_file());

    let gen = sact(&["generate", "--checkpoint", "a", "--data", "data", "--split", "test"], d);
    assert!(gen.status.success());
    for line in String::from_utf8(gen.stdout).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["segment"].as_array().unwrap().len(), 2);
        assert!(v["caption"].is_string());
    }

    let gates = sact(&["analyze-gates", "--checkpoint", "a", "--data", "data"], d);
    assert!(gates.status.success());
    let text = String::from_utf8(gates.stdout).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let frames = first["gates"][0].as_array().unwrap();
    assert_eq!(frames.len(), 40);
    assert_eq!(frames[5]["frame_index"], 5);
    assert!(frames[5]["kept"].is_boolean());
    assert!(first["attention_entropy"].as_array().unwrap().iter().all(|h| h.as_f64().unwrap() >= 0.0));
}
