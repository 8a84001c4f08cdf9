use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "epochs=1",
    "batch_size=4",
    "model_dim=8",
    "state_dim=4",
    "ffn_hidden=8",
    "score_hidden=8",
    "d_pair=4",
    "c0=2",
    "cnn_channels=2",
];

fn tessef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tessef"))
        .args(args)
        .env_remove("TESSEF_SEED")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gen_small(dir: &Path) {
    let d = dir.to_str().unwrap();
    let out = tessef(&[
        "gen-data", "--out", d, "--set", "n_train=8", "--set", "n_val=3", "--set", "n_test=3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_tiny(data: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap()];
    for s in TINY.iter().chain(extra) {
        args.push("--set");
        args.push(s);
    }
    let out = tessef(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn f1s(json: &[u8]) -> Vec<f64> {
    let v: serde_json::Value = serde_json::from_slice(json).unwrap();
    let mut out = Vec::new();
    for family in ["segment", "event"] {
        for (_, scores) in v[family].as_object().unwrap() {
            out.push(scores["f1"].as_f64().unwrap());
        }
    }
    out
}

#[test]
fn verify_succeeds() {
    let out = tessef(&["verify"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 6);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn eval_self_comparison_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let csv = dir.path().join("test/00013.csv");
    let c = csv.to_str().unwrap();
    let out = tessef(&["eval", "--ref", c, "--pred", c]);
    assert_eq!(code(&out), 0);
    assert!(f1s(&out.stdout).iter().all(|&f| f == 1.0 || f == 0.0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["event"]["micro"]["f1"], 1.0);
    assert_eq!(v["segment"]["micro"]["f1"], 1.0);

    let t = dir.path().join("test");
    let out = tessef(&["eval", "--ref", t.to_str().unwrap(), "--pred", t.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for family in ["segment", "event"] {
        for key in ["precision", "recall", "f1"] {
            assert_eq!(v[family]["micro"][key], 1.0);
        }
    }
}

#[test]
fn exit_codes() {
    assert_eq!(code(&tessef(&["frobnicate"])), 1);
    assert_eq!(code(&tessef(&["gen-data"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = tessef(&["gen-data", "--out", d, "--set", "colour=blue"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().filter(|l| l.starts_with("error ")).count(), 1);
    assert!(err.contains("error kind=usage"));

    let missing = dir.path().join("nope.csv");
    let m = missing.to_str().unwrap();
    assert_eq!(code(&tessef(&["eval", "--ref", m, "--pred", m])), 2);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "start,end,label\n0,1,filler\n").unwrap();
    let b = bad.to_str().unwrap();
    let out = tessef(&["eval", "--ref", b, "--pred", b]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=data"));
}

#[test]
fn corrupt_features_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    train_tiny(dir.path(), &ckpt, &[]);
    let bad = dir.path().join("broken.fseq");
    std::fs::write(&bad, b"FSEQ\x01\x00\x00\x00").unwrap();
    let out = tessef(&[
        "decode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("dec").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seed_override_changes_the_corpus() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_small(a.path());
    let out = Command::new(env!("CARGO_BIN_EXE_tessef"))
        .args(["gen-data", "--out", b.path().to_str().unwrap()])
        .args(["--set", "n_train=8", "--set", "n_val=3", "--set", "n_test=3"])
        .env("TESSEF_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stderr).unwrap().contains("seed = 7"));
    assert_ne!(read_dir_bytes(&a.path().join("train")), read_dir_bytes(&b.path().join("train")));
}

#[test]
fn pipeline_is_deterministic_and_consistent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_small(a.path());
    gen_small(b.path());
    for split in ["train", "val", "test"] {
        assert_eq!(read_dir_bytes(&a.path().join(split)), read_dir_bytes(&b.path().join(split)));
    }
    for head in ["semicrf", "framewise"] {
        let set = format!("head={head}");
        let mut runs = Vec::new();
        for dir in [a.path(), b.path()] {
            let ckpt = dir.join(format!("{head}.ckpt"));
            let trained = train_tiny(dir, &ckpt, &[&set]);
            let dec = dir.join(format!("dec_{head}"));
            let out = tessef(&[
                "decode",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--input",
                dir.join("test").to_str().unwrap(),
                "--out",
                dec.to_str().unwrap(),
            ]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
            for (_, bytes) in read_dir_bytes(&dec) {
                tessef::formats::decode_annotations(&bytes).unwrap();
            }
            let eval = tessef(&[
                "eval",
                "--ref",
                dir.join("test").to_str().unwrap(),
                "--pred",
                dec.to_str().unwrap(),
            ]);
            assert_eq!(code(&eval), 0);
            // Decoding then scoring reproduces the metrics reported by train.
            assert_eq!(eval.stdout, trained.stdout);
            runs.push((std::fs::read(&ckpt).unwrap(), read_dir_bytes(&dec), eval.stdout));
        }
        assert!(runs[0] == runs[1], "{head} pipeline differs between identical runs");
    }
}

#[test]
fn sweep_threshold_emits_curve() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let ckpt = dir.path().join("fw.ckpt");
    train_tiny(dir.path(), &ckpt, &["head=framewise"]);
    let out = tessef(&[
        "sweep-threshold",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        dir.path().join("val").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("threshold,"));
    assert_eq!(lines.len(), 20);
    assert!(lines[1].starts_with("0.05,"));
    assert!(lines[19].starts_with("0.95,"));

    let crf = dir.path().join("crf.ckpt");
    train_tiny(dir.path(), &crf, &[]);
    let out = tessef(&[
        "sweep-threshold",
        "--checkpoint",
        crf.to_str().unwrap(),
        "--data",
        dir.path().join("val").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}
