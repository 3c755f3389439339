use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn verigrag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_verigrag")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = verigrag(dir, args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["toy-corpus", "--out", "corpus", "--n", "16"]);
    ok(d, &["extract", "--in", "corpus", "--out", "graphs.jsonl", "--manifest", "manifest.json"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    let n = manifest["num_graphs"].as_u64().unwrap();
    assert!(n >= 8);
    assert_eq!(fs::read_to_string(d.join("pairs.jsonl")).unwrap().lines().count() as u64, n);

    ok(d, &["dedup", "--in", "graphs.jsonl", "--out", "dedup.jsonl", "--threshold", "0.8"]);
    assert!(fs::read_to_string(d.join("dedup.jsonl")).unwrap().lines().count() as u64 <= n);

    let gnn = write_config(d, "gnn.json", r#"{"train": {"epochs": 2, "batch_size": 8}}"#);
    ok(d, &["train-gnn", "--graphs", "graphs.jsonl", "--config", &gnn, "--out", "gnn.ckpt"]);
    ok(d, &["embed", "--graphs", "graphs.jsonl", "--ckpt", "gnn.ckpt", "--out", "embeddings.f32"]);
    assert!(d.join("embeddings.f32.ids.json").exists());

    let ret = write_config(d, "ret.json", r#"{"train": {"epochs": 1, "batch_size": 8}}"#);
    let common = ["--pairs", "pairs.jsonl", "--embeddings", "embeddings.f32", "--config", ret.as_str()];
    ok(d, &[&["train-retriever", "--mode", "teacher", "--out", "teacher.ckpt"][..], &common].concat());
    ok(d, &[&["train-retriever", "--mode", "student", "--teacher", "teacher.ckpt", "--out", "student.ckpt"][..], &common].concat());
    ok(d, &["index", "build", "--embeddings", "embeddings.f32", "--student", "student.ckpt", "--out", "index.bin"]);
    let hits = ok(d, &["index", "query", "--index", "index.bin", "--query", "a counter", "--k", "3"]);
    assert_eq!(String::from_utf8(hits.stdout).unwrap().lines().count(), 3);

    let lm = write_config(d, "lm.json", r#"{"model": {"layers": 1}, "train": {"epochs": 1}}"#);
    ok(d, &["train-lm", "--pairs", "pairs.jsonl", "--config", &lm, "--out", "lm.ckpt"]);
    let s1 = write_config(d, "s1.json", r#"{"train": {"epochs": 1}}"#);
    ok(d, &["train-veriformer", "--stage", "1", "--pairs", "pairs.jsonl", "--graphs", "graphs.jsonl", "--gnn", "gnn.ckpt", "--config", &s1, "--out", "vf1.ckpt"]);
    let s2 = write_config(d, "s2.json", r#"{"train": {"epochs": 1}}"#);
    ok(
        d,
        &[
            "train-veriformer", "--stage", "2", "--pairs", "pairs.jsonl", "--embeddings", "embeddings.f32", "--vf1", "vf1.ckpt", "--lm",
            "lm.ckpt", "--alpha", "0.1", "--config", &s2, "--out", "vf2.ckpt",
        ],
    );

    fs::write(d.join("desc.txt"), "A register that loads d on every clock edge.").unwrap();
    ok(d, &["generate", "--desc-file", "desc.txt", "--n", "3", "--max-new-tokens", "8", "--out", "samples.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("samples.jsonl")).unwrap().lines().count(), 3);

    let task = d.join("bench/reg");
    fs::create_dir_all(&task).unwrap();
    fs::write(task.join("description.txt"), "A register.").unwrap();
    fs::write(task.join("check_syntax.cmd"), "test -s {code_file}").unwrap();
    fs::write(task.join("check_function.cmd"), "false {code_file}").unwrap();
    fs::write(task.join("meta.json"), r#"{"timeout_s": 5}"#).unwrap();
    ok(d, &["eval", "--benchmark", "bench", "--n", "4", "--k", "1,2", "--max-new-tokens", "8", "--out", "report.json"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["metrics"]["function"]["pass@2"], 0.0);
}

#[test]
fn bundled_checkers_report_through_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let reference = "module ff(input clk, input d, output reg q);\n  always @(posedge clk) q <= d;\nendmodule\n";
    fs::write(d.join("ref.v"), reference).unwrap();
    fs::write(d.join("same.v"), reference.replace("ff", "ff2")).unwrap();
    fs::write(d.join("wrong.v"), reference.replace("q <= d", "q <= ~d")).unwrap();
    fs::write(d.join("broken.v"), "module ff(; endmodule").unwrap();
    assert!(verigrag(d, &["check-syntax", "same.v"]).status.success());
    assert!(!verigrag(d, &["check-syntax", "broken.v"]).status.success());
    assert!(verigrag(d, &["check-function", "--reference", "ref.v", "same.v"]).status.success());
    assert!(!verigrag(d, &["check-function", "--reference", "ref.v", "wrong.v"]).status.success());
}

#[test]
fn bad_inputs_exit_with_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = verigrag(d, &["embed", "--graphs", "missing.jsonl", "--ckpt", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(d.join("cfg.json"), r#"{"train": {"epoch": 1}}"#).unwrap();
    fs::write(d.join("g.jsonl"), "").unwrap();
    let out = verigrag(d, &["train-gnn", "--graphs", "g.jsonl", "--config", "cfg.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}
