use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn csattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csattn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Writes q/k/v dumps with `n` prefill plus `steps` decode rows.
fn synth(dir: &Path, n: usize, d: usize, steps: usize) {
    let o = csattn(&[
        "synth",
        "--synthetic",
        &n.to_string(),
        &d.to_string(),
        "4",
        "--steps",
        &steps.to_string(),
        "-o",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn build(dir: &Path, n: usize, extra: &[&str]) -> String {
    let out = p(dir, "index.csat");
    let (q, k, v) = (p(dir, "q.bin"), p(dir, "k.bin"), p(dir, "v.bin"));
    let n = n.to_string();
    let mut args = vec![
        "build",
        "--queries",
        &q,
        "--keys",
        &k,
        "--values",
        &v,
        "--prefill",
        &n,
        "--m",
        "4",
        "--centroids",
        "8",
        "-o",
        &out,
    ];
    args.extend_from_slice(extra);
    let o = csattn(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn decode(dir: &Path, index: &str, extra: &[&str]) -> Output {
    let (q, k, v) = (p(dir, "q.bin"), p(dir, "k.bin"), p(dir, "v.bin"));
    let mut args = vec![
        "decode",
        "--index",
        index,
        "--queries",
        &q,
        "--keys",
        &k,
        "--values",
        &v,
    ];
    args.extend_from_slice(extra);
    csattn(&args)
}

fn rows(text: &str) -> Vec<Vec<&str>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect()
}

#[test]
fn build_inspect_decode_round_trip() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 256, 16, 16);
    let index = build(dir.path(), 256, &[]);
    let built = stdout(&csattn(&["inspect", &index]));
    assert!(built.contains("L          52"), "{built}");
    assert!(built.contains("prefill    256"));
    assert!(built.contains("storage    16-bit"));
    assert!(built.contains("lists full"));

    let o = decode(dir.path(), &index, &["--steps", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("# rho=0.05 period=1 window=32 tau=1"), "{text}");
    assert!(text.contains("# steps=16 searches=16"));
    let table = rows(&text);
    assert_eq!(table.len(), 16);
    assert_eq!(table[0][1], "256");
    assert_eq!(table[15][1], "271");
}

#[test]
fn full_keep_oracle_columns_are_exact() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 128, 16, 8);
    let index = build(dir.path(), 128, &["--score-bits", "32"]);
    let o = decode(dir.path(), &index, &["--steps", "8", "--rho", "1", "--oracle"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let header = text.lines().find(|l| l.starts_with("step")).unwrap();
    assert!(header.ends_with("recall_at_k\toutput_error"));
    for row in rows(&text) {
        assert_eq!(row[2], row[1], "keep equals context");
        assert_eq!(row[row.len() - 2], "1.000000");
        assert!(row[row.len() - 1].parse::<f64>().unwrap() <= 1e-6);
    }
}

#[test]
fn period_four_searches_twice_in_eight_steps() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 128, 16, 8);
    let index = build(dir.path(), 128, &[]);
    let o = decode(dir.path(), &index, &["--steps", "8", "--schedule", "0.15-step-4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("rho=0.15 period=4"));
    assert!(text.contains("# steps=8 searches=2"));
    let searched: Vec<&str> = rows(&text).iter().map(|r| r[3]).collect();
    assert_eq!(searched, ["1", "0", "0", "0", "1", "0", "0", "0"]);
}

#[test]
fn decode_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 128, 16, 12);
    let index = build(dir.path(), 128, &[]);
    let a = decode(dir.path(), &index, &["--steps", "12", "--oracle"]);
    let b = decode(dir.path(), &index, &["--steps", "12", "--oracle"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn mismatched_dimension_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 128, 16, 8);
    let index = build(dir.path(), 128, &[]);
    let other = TempDir::new().unwrap();
    synth(other.path(), 128, 8, 8);
    let o = decode(other.path(), &index, &["--steps", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_index_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 64, 8, 0);
    let index = build(dir.path(), 64, &[]);
    let mut bytes = std::fs::read(&index).unwrap();
    bytes[0] = b'X';
    std::fs::write(&index, &bytes).unwrap();
    let o = csattn(&["inspect", &index]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    let missing = p(dir.path(), "absent.csat");
    assert_eq!(csattn(&["inspect", &missing]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(csattn(&["decode"]).status.code(), Some(1));
    assert_eq!(csattn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        csattn(&[
            "decode",
            "--index",
            "x",
            "--steps",
            "1",
            "--rho",
            "0.1",
            "--schedule",
            "0.05-step-1"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(csattn(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let grid = p(dir.path(), "grid.toml");
    std::fs::write(
        &grid,
        "steps = 4\nseeds = [0]\n[base]\nm = 4\ncentroids = 8\n[axes]\nalpha = [0.1, 0.2, 0.4]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = csattn(&[
        "sweep",
        "--grid",
        &grid,
        "--synthetic",
        "256",
        "16",
        "4",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = std::fs::read_to_string(out.join("results.tsv")).unwrap();
    assert_eq!(rows(&results).len(), 3);
    let series = std::fs::read_to_string(out.join("mean_recall.tsv")).unwrap();
    assert_eq!(series.lines().count(), 4);
}

#[test]
fn sweep_edge_cases() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let empty = p(dir.path(), "empty.toml");
    std::fs::write(&empty, "steps = 4\nseeds = [0]\n").unwrap();
    let o = csattn(&[
        "sweep",
        "--grid",
        &empty,
        "--synthetic",
        "64",
        "8",
        "2",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = std::fs::read_to_string(out.join("results.tsv")).unwrap();
    assert_eq!(results.lines().count(), 1);
    assert!(results.starts_with("id\tm\t"));

    let zero = p(dir.path(), "zero.toml");
    std::fs::write(
        &zero,
        "steps = 4\nseeds = [0]\n[base]\nm = 2\ncentroids = 4\n[axes]\nrho = [0.0, 0.1]\n",
    )
    .unwrap();
    let o = csattn(&[
        "sweep",
        "--grid",
        &zero,
        "--synthetic",
        "64",
        "8",
        "2",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = std::fs::read_to_string(out.join("results.tsv")).unwrap();
    assert!(results.lines().next().unwrap().starts_with("# skipped"));
    assert_eq!(rows(&results).len(), 1);
}
