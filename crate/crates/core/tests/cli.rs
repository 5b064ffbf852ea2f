use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rankadapt::datastore::{read_any, AnyEmbeddingFile};
use rankadapt::train::EvalReport;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankadapt"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cli(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"
lr = 1e-3
steps = 12
batch_size = 8
seed = 3

[adapter]
t_prime = 2
d_prime = 8
num_encoder_blocks = 1
relational_tokens = 2
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    config: std::path::PathBuf,
    root: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("d.rkad");
    let config = root.join("c.toml");
    fs::write(&config, CONFIG).unwrap();
    ok(&[
        "gen-synthetic",
        "--out",
        s(&data),
        "--n",
        "50",
        "--p",
        "4",
        "--d",
        "8",
        "--queries",
        "2",
        "--seed",
        "1",
    ]);
    Fixture {
        _dir: dir,
        data,
        config,
        root,
    }
}

#[test]
fn gen_synthetic_writes_a_valid_file() {
    let f = fixture();
    match read_any(&f.data).unwrap() {
        AnyEmbeddingFile::F32(file) => {
            assert_eq!(file.items.len(), 50);
            assert_eq!(file.queries.len(), 2);
            assert_eq!((file.dims.p, file.dims.d), (4, 8));
        }
        AnyEmbeddingFile::F64(_) => panic!("default precision is f32"),
    }
    let out = f.root.join("pc.rkad");
    ok(&[
        "gen-synthetic",
        "--out",
        s(&out),
        "--kind",
        "pairwise_contrast",
        "--n",
        "10",
        "--precision",
        "f64",
    ]);
    assert!(matches!(read_any(&out).unwrap(), AnyEmbeddingFile::F64(_)));
}

#[test]
fn train_evaluate_rank_end_to_end() {
    let f = fixture();
    let ckpt = f.root.join("m.rkck");
    let log = f.root.join("log.jsonl");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--ckpt",
        s(&ckpt),
        "--log",
        s(&log),
    ]);
    let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 12);
    let first: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(first["step"], 1);
    assert!(first["l_reg"].is_number() && first["l_rank"].is_number() && first["total"].is_number());

    // A second identical run reproduces the log byte for byte.
    let log2 = f.root.join("log2.jsonl");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--ckpt",
        s(&f.root.join("m2.rkck")),
        "--log",
        s(&log2),
    ]);
    assert_eq!(fs::read(&log).unwrap(), fs::read(&log2).unwrap());

    let report = ok(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&f.data)]);
    let parsed: EvalReport = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed.pooled.n_items, 5);
    assert_eq!(report, ok(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&f.data)]));
    let val = ok(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&f.data), "--split", "val"]);
    assert!(val.contains("\"split\": \"val\""));

    let ranked = ok(&["rank", "--ckpt", s(&ckpt), "--data", s(&f.data), "--query", "0"]);
    let scores: Vec<f64> = ranked
        .lines()
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 25);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let top = ok(&[
        "rank",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--query",
        "0",
        "--top",
        "3",
    ]);
    assert_eq!(top.lines().count(), 3);
}

#[test]
fn flags_override_the_config() {
    let f = fixture();
    let ckpt = f.root.join("m.rkck");
    let out = ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--ckpt",
        s(&ckpt),
        "--steps",
        "3",
        "--seed",
        "5",
        "--alpha",
        "0.5",
        "--pairs",
        "sampled:4",
        "--sum-rank",
        "--ablate",
        "merged",
        "--m-tokens",
        "3",
        "--precision",
        "f64",
    ]);
    assert_eq!(out.lines().filter(|l| l.starts_with('{')).count(), 3);
    let report = ok(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&f.data)]);
    assert!(report.contains("\"pooled\""));
}

#[test]
fn ablate_emits_the_variant_table() {
    let f = fixture();
    let json = f.root.join("ab.json");
    let out = ok(&[
        "ablate",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--steps",
        "2",
        "--out",
        s(&json),
    ]);
    for v in ["regression-only", "rank-head", "full"] {
        assert!(out.lines().any(|l| l.starts_with(v)), "{v} missing from\n{out}");
    }
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("max relative error"));
}

#[test]
fn errors_map_to_category_exit_codes() {
    let f = fixture();
    let ckpt = f.root.join("m.rkck");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--ckpt",
        s(&ckpt),
        "--steps",
        "1",
    ]);

    // usage
    assert_eq!(code(&["train"]), 2);
    assert_eq!(
        code(&["train", "--data", s(&f.data), "--ckpt", s(&ckpt), "--pairs", "some"]),
        2
    );
    // configuration
    let bad = f.root.join("bad.toml");
    fs::write(&bad, "lr = -1.0\n").unwrap();
    assert_eq!(
        code(&["train", "--config", s(&bad), "--data", s(&f.data), "--ckpt", s(&ckpt)]),
        3
    );
    fs::write(&bad, "learning_rate = 1.0\n").unwrap();
    assert_eq!(
        code(&["train", "--config", s(&bad), "--data", s(&f.data), "--ckpt", s(&ckpt)]),
        3
    );
    assert_eq!(code(&["gradcheck", "--ablate", "merged+concat"]), 3);
    // data
    let corrupt = f.root.join("corrupt.rkad");
    let mut bytes = fs::read(&f.data).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    fs::write(&corrupt, &bytes).unwrap();
    assert_eq!(code(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&corrupt)]), 4);
    assert_eq!(
        code(&["rank", "--ckpt", s(&ckpt), "--data", s(&f.data), "--query", "42"]),
        4
    );
    // checkpoint
    assert_eq!(code(&["evaluate", "--ckpt", s(&f.data), "--data", s(&f.data)]), 5);
    // io
    let missing = f.root.join("missing.rkad");
    assert_eq!(code(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&missing)]), 7);

    let out = cli(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&corrupt)]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn non_finite_training_exits_with_numerical_code() {
    let f = fixture();
    let ckpt = f.root.join("m.rkck");
    let out = cli(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--ckpt",
        s(&ckpt),
        "--lr",
        "1e30",
        "--steps",
        "50",
    ]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(ckpt.exists());
}
