use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuseformer"))
        .args(args)
        .output()
        .expect("spawn fuseformer")
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn tiny_config(dir: &Path, data: &str) -> String {
    let p = dir.join("run.json");
    let text = format!(
        r#"{{"model":{{"n_enc":1,"n_dec":1,"d_model":8,"n_heads":2,"d_ff":16,"vocab":12,"max_len":8}},
            "train":{{"lr":0.01,"seed":3,"batch_tokens":32,"steps":6,"log_every":2,"p_drop":0.1,"alpha":0.1}},
            "data":{data}}}"#
    );
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn plan_small_attention_backward() {
    let out = run(&["plan", "--attn-bwd", "1", "4", "2", "1", "--json"]);
    assert!(out.status.success());
    let r = &lines(&out)[0];
    assert_eq!(r["peak"], 48);
    assert_eq!(r["naive"], 76);
    assert_eq!(r["safe"], true);
}

#[test]
fn plan_large_attention_backward_with_diagram() {
    let out = run(&["plan", "--attn-bwd", "8", "256", "32", "4"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("peak 393216 elements, naive 622592 elements"));
    let r = lines(&out).pop().unwrap();
    assert_eq!(r["peak"], 393216);
    assert_eq!(r["naive"], 622592);
}

#[test]
fn plan_lifetime_file_shares_disjoint_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.json");
    std::fs::write(
        &p,
        r#"[{"id":0,"size":10,"first":0,"last":1},{"id":1,"size":6,"first":2,"last":3}]"#,
    )
    .unwrap();
    let out = run(&["plan", "--lifetimes", p.to_str().unwrap(), "--json"]);
    assert!(out.status.success());
    let r = &lines(&out)[0];
    assert_eq!(r["peak"], 10);
    assert_eq!(r["blocks"].as_array().unwrap().len(), 1);
}

#[test]
fn plan_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.json");
    std::fs::write(&p, "[{\"id\":0}").unwrap();
    assert_eq!(
        run(&["plan", "--lifetimes", p.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["plan", "--json"]).status.code(), Some(1));
}

#[test]
fn zero_steps_is_a_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"task":"copy"}"#);
    let out = run(&["train", "--config", &cfg, "--steps", "0"]);
    assert!(out.status.success());
    let recs = lines(&out);
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["event"], "config");
    assert!(recs[0]["arena_capacity"].as_u64().unwrap() > 0);
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"task":"reverse"}"#);
    let a = run(&["train", "--config", &cfg, "--no-timing", "--threads", "1"]);
    let b = run(&["train", "--config", &cfg, "--no-timing", "--threads", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let recs = lines(&a);
    let train: Vec<&Value> = recs.iter().filter(|r| r["event"] == "train").collect();
    assert_eq!(train.len(), 3);
    for r in train {
        assert!(r["loss"].as_f64().unwrap().is_finite());
        assert!(r.get("tokens_per_sec").is_none());
        assert!(r["arena_high_water"].as_u64() <= r["arena_capacity"].as_u64());
    }
}

#[test]
fn resume_continues_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"task":"copy"}"#);
    let ck = dir.path().join("half.lsf2");
    let ck = ck.to_str().unwrap();
    let full = run(&["train", "--config", &cfg, "--no-timing"]);
    let first = run(&[
        "train",
        "--config",
        &cfg,
        "--no-timing",
        "--steps",
        "4",
        "--checkpoint",
        ck,
    ]);
    assert!(first.status.success());
    let rest = run(&["train", "--config", &cfg, "--no-timing", "--resume", ck]);
    assert!(rest.status.success());
    let train = |o: &Output| -> Vec<Value> {
        lines(o)
            .into_iter()
            .filter(|r| r["event"] == "train")
            .map(|mut r| {
                // A running maximum since process start.
                r.as_object_mut().unwrap().remove("arena_high_water");
                r
            })
            .collect()
    };
    let mut joined = train(&first);
    joined.extend(train(&rest));
    assert_eq!(joined, train(&full));
}

#[test]
fn export_summarises_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"task":"copy"}"#);
    let ck = dir.path().join("c.lsf2");
    let ck = ck.to_str().unwrap();
    assert!(run(&[
        "train",
        "--config",
        &cfg,
        "--steps",
        "2",
        "--checkpoint",
        ck
    ])
    .status
    .success());
    let bytes = std::fs::read(ck).unwrap();
    assert_eq!(&bytes[..4], b"LSF2");
    let out = run(&["export", "--checkpoint", ck]);
    assert!(out.status.success());
    let r = &lines(&out)[0];
    assert_eq!(r["format"], "LSF2");
    assert_eq!(r["step"], 2);
    let tensors = r["tensors"].as_array().unwrap();
    assert!(tensors.iter().any(|t| t["dtype"] == "f16"));
    assert!(tensors.iter().any(|t| t["dtype"] == "f32"));
    assert_eq!(
        run(&["export", "--checkpoint", &cfg]).status.code(),
        Some(1)
    );
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(
        &p,
        r#"{"model":{"n_enc":1,"n_dec":1,"d_model":10,"n_heads":3,"d_ff":16,"vocab":12,"max_len":8},
            "train":{"lr":0.01,"batch_tokens":32,"steps":2},"data":{"task":"copy"}}"#,
    )
    .unwrap();
    assert_eq!(
        run(&["train", "--config", p.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["train", "--config", "/nonexistent/run.json"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn bad_token_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("tokens.txt");
    std::fs::write(&tokens, "3 4 5\n5 4 3\n3 x 5\n5 4 3\n").unwrap();
    let data = format!(r#"{{"task":"file","path":"{}"}}"#, tokens.display());
    let cfg = tiny_config(dir.path(), &data);
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    std::fs::write(&tokens, "3 4 5\n5 4 12\n").unwrap();
    assert_eq!(run(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let ok = run(&["gradcheck", "--instances", "5", "--seed", "7"]);
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let reports = lines(&ok);
    assert_eq!(reports.last().unwrap()["op"], "model");
    assert!(reports.iter().all(|r| r["pass"] == true));

    let bad = run(&[
        "gradcheck",
        "--instances",
        "5",
        "--ops-only",
        "--inject-fault",
        "layernorm_backward",
    ]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("layernorm_backward"));
    assert_eq!(
        run(&["gradcheck", "--inject-fault", "nope"]).status.code(),
        Some(1)
    );
}

#[test]
fn bench_json_has_one_entry_per_op_and_pool() {
    let out = run(&[
        "bench",
        "--json",
        "--threads",
        "2",
        "--batch",
        "2",
        "--len",
        "8",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "32",
        "--vocab",
        "40",
        "--warmup",
        "1",
        "--runs",
        "2",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with('{')));
    let entries = lines(&out);
    assert_eq!(entries.len(), 12);
    assert!(entries.iter().all(|e| e["parity"] == true));
    assert_eq!(entries[0]["threads"], 1);
    assert_eq!(entries[6]["threads"], 2);
}
