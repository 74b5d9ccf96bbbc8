use std::path::Path;
use std::process::{Command, Output};

fn worldcup(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_worldcup"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn worldcup");
    assert!(
        out.status.success(),
        "worldcup {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn keygen_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    worldcup(
        &["keygen", "--from-seed", "7", "--out", "a.json"],
        dir.path(),
    );
    worldcup(
        &["keygen", "--from-seed", "7", "--out", "b.json"],
        dir.path(),
    );
    worldcup(
        &["keygen", "--from-seed", "8", "--out", "c.json"],
        dir.path(),
    );
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
    let cfg: serde_json::Value = serde_json::from_str(&read("a.json")).unwrap();
    assert_eq!(cfg["schema"], "worldcup.experiment.v1");
}

#[test]
fn embed_decode_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let msg = "1011001110001101";
    worldcup(
        &[
            "embed",
            "--message",
            msg,
            "--tokens",
            "200",
            "--count",
            "2",
            "--out",
            "wm.jsonl",
        ],
        dir.path(),
    );
    let records = json_lines(&dir.path().join("wm.jsonl"));
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r["schema"], "worldcup.sequence.v1");
        assert_eq!(r["watermarked"], true);
        assert_eq!(r["message_bits"], msg);
        let generated =
            r["tokens"].as_array().unwrap().len() - r["prompt_len"].as_u64().unwrap() as usize;
        assert_eq!(r["seeds"].as_array().unwrap().len(), generated);
    }
    let out = worldcup(&["decode", "--input", "wm.jsonl"], dir.path());
    for line in String::from_utf8(out.stdout).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["message"], msg);
        assert_eq!(v["bit_accuracy"], 1.0);
    }
}

#[test]
fn detect_separates_plain_from_watermarked() {
    let dir = tempfile::tempdir().unwrap();
    worldcup(
        &[
            "embed", "--bits", "16", "--tokens", "128", "--out", "wm.jsonl",
        ],
        dir.path(),
    );
    worldcup(
        &[
            "embed",
            "--plain",
            "--bits",
            "16",
            "--tokens",
            "128",
            "--out",
            "plain.jsonl",
        ],
        dir.path(),
    );
    worldcup(
        &[
            "detect", "--bits", "16", "--input", "wm.jsonl", "--out", "wm.det",
        ],
        dir.path(),
    );
    worldcup(
        &[
            "detect",
            "--bits",
            "16",
            "--input",
            "plain.jsonl",
            "--out",
            "plain.det",
        ],
        dir.path(),
    );
    let z = |f: &str| {
        json_lines(&dir.path().join(f))[0]["z_folded"]
            .as_f64()
            .unwrap()
    };
    assert!(z("wm.det") > 6.0, "watermarked z {}", z("wm.det"));
    assert!(z("plain.det") < 4.0, "plain z {}", z("plain.det"));
}

#[test]
fn attack_rewrites_generated_part_only() {
    let dir = tempfile::tempdir().unwrap();
    worldcup(
        &[
            "embed", "--bits", "16", "--tokens", "100", "--out", "wm.jsonl",
        ],
        dir.path(),
    );
    worldcup(
        &[
            "attack",
            "--bits",
            "16",
            "--input",
            "wm.jsonl",
            "--kind",
            "delete",
            "--ratio",
            "0.2",
            "--out",
            "del.jsonl",
        ],
        dir.path(),
    );
    worldcup(
        &[
            "attack",
            "--bits",
            "16",
            "--input",
            "wm.jsonl",
            "--kind",
            "copy-paste",
            "--ratio",
            "0.3",
            "--segments",
            "3",
            "--out",
            "cp.jsonl",
        ],
        dir.path(),
    );
    let orig = &json_lines(&dir.path().join("wm.jsonl"))[0];
    let del = &json_lines(&dir.path().join("del.jsonl"))[0];
    let cp = &json_lines(&dir.path().join("cp.jsonl"))[0];
    let len = |v: &serde_json::Value| v["tokens"].as_array().unwrap().len();
    let prompt = orig["prompt_len"].as_u64().unwrap() as usize;
    assert_eq!(len(del), prompt + 80);
    assert_eq!(
        orig["tokens"].as_array().unwrap()[..prompt],
        del["tokens"].as_array().unwrap()[..prompt]
    );
    assert!(len(cp) > len(orig));
    assert_eq!(del["message_bits"], orig["message_bits"]);
    assert!(del["cell"].as_str().unwrap().ends_with("+delete-0.2"));
}

#[test]
fn bench_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "bench",
            "--bits",
            "16",
            "--tokens",
            "64",
            "--sequences",
            "4",
            "--out",
            out,
        ]
    };
    worldcup(&args("run1"), dir.path());
    worldcup(&args("run2"), dir.path());
    for f in ["metrics.csv", "sequences.jsonl"] {
        let a = std::fs::read(dir.path().join("run1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("run2").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
    let csv = std::fs::read_to_string(dir.path().join("run1/metrics.csv")).unwrap();
    assert!(csv.starts_with("schema,variant,message_bits,max_new_tokens,"));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    worldcup(
        &["keygen", "--from-seed", "1", "--out", "cfg.json"],
        dir.path(),
    );
    worldcup(
        &[
            "ablate",
            "--config",
            "cfg.json",
            "--bits",
            "16",
            "--tokens",
            "48",
            "--sequences",
            "2",
            "--variants",
            "full,k=2,m=5",
            "--out",
            "ab",
        ],
        dir.path(),
    );
    let csv = std::fs::read_to_string(dir.path().join("ab/metrics.csv")).unwrap();
    for v in ["full", "k=2", "m=5"] {
        assert!(
            csv.lines().any(|l| l.split(',').nth(1) == Some(v)),
            "missing {v}"
        );
    }
}

#[test]
fn calibrate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    worldcup(
        &[
            "calibrate",
            "--bits",
            "16",
            "--tokens",
            "64",
            "--n",
            "100",
            "--out",
            "cal.json",
        ],
        dir.path(),
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cal.json")).unwrap())
            .unwrap();
    assert_eq!(v["schema"], "worldcup.calibration.v1");
    assert_eq!(v["sequences"], 100);
    assert!(v["z_signed"]["variance"].as_f64().unwrap() > 0.0);
}

#[test]
fn invalid_input_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_worldcup"))
        .args(["decode", "--input", "missing.jsonl"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    let out = Command::new(env!("CARGO_BIN_EXE_worldcup"))
        .args(["embed", "--groups", "3", "--bits", "16"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
