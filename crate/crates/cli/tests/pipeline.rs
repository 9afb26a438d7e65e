use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 1
threads = 1

[data]
train = "data/train.txt"
valid = "data/valid.txt"
test = "data/test.txt"
profile = "raw"

[synth]
dir = "data"
tokens = 6000

[mine]
f = 40
L_max = 8

[crf]
C = 50.0
max_iter = 200

[lm]
composition = "sum"
d_LM = 12
metrics = "work/metrics.csv"

[train]
bptt = 10
batch = 4
epochs = 2
"#;

fn patlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patlm"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = patlm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn run_pipeline(dir: &Path) {
    for stage in ["synth", "mine", "train-crf", "build-automaton", "encode", "train-lm", "eval-lm", "diag-gates"] {
        ok(dir, &[stage]);
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for sub in ["data", "work"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            out.push(Path::new(sub).join(e.unwrap().file_name()));
        }
    }
    out.sort();
    out
}

/// Metrics rows without the wall-clock column.
fn metrics_without_time(dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("work/metrics.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let skip = header.iter().position(|h| *h == "wall_seconds").unwrap();
    text.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, v)| v)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect()
}

#[test]
fn synth_pipeline_is_deterministic() {
    let a = setup();
    let b = setup();
    run_pipeline(a.path());
    run_pipeline(b.path());

    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    for expected in [
        "data/train.txt.manifest.toml",
        "work/candidates.tsv.manifest.toml",
        "work/pattern_table.tsv.manifest.toml",
        "work/automaton.txt.manifest.toml",
        "work/patterns.train.json.manifest.toml",
        "work/model.ckpt.manifest.toml",
        "work/gates.csv",
        "work/eval.json",
    ] {
        assert!(names.contains(&PathBuf::from(expected)), "missing {expected}");
    }
    for name in &names {
        if name.ends_with("metrics.csv") {
            continue;
        }
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{} differs between runs", name.display());
    }
    assert_eq!(metrics_without_time(a.path()), metrics_without_time(b.path()));

    let m: toml::Table = std::fs::read_to_string(a.path().join("work/pattern_table.tsv.manifest.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let scalars = m["scalars"].as_table().unwrap();
    assert!(scalars["selected"].as_integer().unwrap() > 0);
    assert!(scalars["selected"].as_integer() <= scalars["candidates"].as_integer());
    assert_eq!(scalars["C"].as_float(), Some(50.0));
    let inputs = m["inputs"].as_array().unwrap();
    let candidates = inputs
        .iter()
        .find(|i| i["path"].as_str() == Some("work/candidates.tsv"))
        .unwrap();
    assert_eq!(candidates["manifest"].as_str(), Some("work/candidates.tsv.manifest.toml"));

    let m: toml::Table = std::fs::read_to_string(a.path().join("work/patterns.train.json.manifest.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(m["scalars"]["n"].as_integer().unwrap() > 0);
    assert!(m["scalars"]["states"].as_integer().unwrap() > 1);
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();

    let out = patlm(d, &["mine"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error code=3 kind=input_missing"), "{err}");

    let out = patlm(d, &["synth", "--set", "synth.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error code=2 kind=config"));

    let out = patlm(d, &["synth", "--set", "synth.function_words=2"]);
    assert_eq!(out.status.code(), Some(2));

    ok(d, &["synth"]);
    ok(d, &["mine"]);
    std::fs::write(d.join("data/train.txt"), "tampered text\n").unwrap();
    let out = patlm(d, &["mine"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("kind=checksum_mismatch"));

    ok(d, &["synth"]);
    for stage in ["mine", "train-crf", "build-automaton", "encode"] {
        ok(d, &[stage]);
    }
    let out = patlm(d, &["train-lm", "--set", "train.lr=1e38", "--set", "train.clip=1e30"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error code=4 kind=non_finite"));
    assert!(d.join("work/model.ckpt").exists());
}

#[test]
fn character_baseline_needs_no_automaton() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth"]);
    let chars = ["--set", "encode.kind=chars", "--set", "encode.prefix=work/chars"];
    ok(d, &[&["encode"][..], &chars].concat());
    let lm = [
        &chars[..],
        &["--set", "lm.composition=cnn", "--set", "lm.cnn_widths=[1,2]", "--set", "lm.cnn_depths=[3,4]"],
    ]
    .concat();
    ok(d, &[&["train-lm"][..], &lm].concat());
    ok(d, &[&["eval-lm"][..], &lm].concat());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("work/eval.json")).unwrap()).unwrap();
    assert!(report["perplexity"].as_f64().unwrap() > 1.0);
    assert!(report["params"]["modules"]["conv"].as_u64().unwrap() > 0);
}
