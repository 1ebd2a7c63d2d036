use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use focusgate::synth::{cluster_of, gen_attention_trace, gen_feature_dump};
use focusgate::trace_io::{write_trace, AttentionTrace, FeatureDump, Storage, TraceFile, TraceHeader};
use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focusgate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap()
}

fn write_spec(dir: &Path, spec: Value) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    path
}

fn golden(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "core", "tests", "data", "golden", name].iter().collect()
}

#[test]
fn phases_match_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        json!({"name": "p", "kind": "phase", "L": 24, "H": 4, "N_total": 33, "boundary": 9, "K_true": 7, "seed": 5}),
    );
    let fx = dir.path().join("fx");
    assert_eq!(run(&["synth", p(&spec), "--out-dir", p(&fx)]).status.code(), Some(0));
    let sidecar = read_json(fx.join("p.json"));

    let out = dir.path().join("out");
    let o = run(&["phases", p(&fx.join("p.pats")), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let phases = read_json(out.join("phases.json"));
    assert_eq!(phases["outcome"], "detected");
    assert_eq!(phases["l_start"], sidecar["ground_truth"]["l_start"]);
    assert_eq!(phases["l_end"], 9 + 7 - 1);
    for key in ["baseline_mean", "baseline_std", "lambda", "threshold"] {
        assert!(phases[key].is_number(), "{key}");
    }
    let csv = std::fs::read_to_string(out.join("profile.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "layer,R,delta_R,phase");
    assert_eq!(csv.lines().count(), 25);

    let wide = dir.path().join("wide");
    run(&["phases", p(&fx.join("p.pats")), "--out-dir", p(&wide), "--window-frac", "0.40"]);
    assert_eq!(read_json(wide.join("phases.json"))["l_end"], 9 + 10 - 1);
}

#[test]
fn flat_profile_exits_with_no_focus() {
    let dir = tempfile::tempdir().unwrap();
    let one = gen_attention_trace(vec![0], 2, 9, true, 1.0, 1).unwrap();
    let data: Vec<f32> = (0..12).flat_map(|_| one.data().to_vec()).collect();
    let header = TraceHeader::vision("m", (0..12).collect(), 2, 9, true, Storage::Full);
    let path = dir.path().join("flat.pats");
    write_trace(&path, &AttentionTrace::new(header, data).unwrap().into()).unwrap();
    let o = run(&["phases", p(&path), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let diag: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(diag["outcome"], "no_focus_detected");
}

#[test]
fn malformed_trace_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.pats");
    std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    let o = run(&["phases", p(&path), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(65));
    assert_eq!(stderr_json(&o)["error"], "BadMagic");
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&["phases", "--bogus"]).status.code(), Some(64));
    assert_eq!(stderr_json(&run(&["nope"]))["error"], "Usage");
    let o = run(&["phases", "/nonexistent/x.pats", "--out-dir", "/tmp/x", "--window-frac", "lots"]);
    assert_eq!(o.status.code(), Some(64));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn llava_shaped_selection() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen_attention_trace((7..=11).collect(), 2, 577, true, 1.0, 3).unwrap();
    let trace_path = dir.path().join("attn.pats");
    write_trace(&trace_path, &TraceFile::from(trace.clone())).unwrap();
    let feats = gen_feature_dump(576, 64, 16, 0.5, 4).unwrap();
    let header = TraceHeader::features("llava-1.5", 11, 577, true, 64);
    let feats = FeatureDump::new(header, feats.data().to_vec()).unwrap();
    let feat_path = dir.path().join("feat.pats");
    write_trace(&feat_path, &feats.into()).unwrap();

    let out = dir.path().join("sel");
    let o = run(&[
        "select", p(&trace_path), p(&feat_path), "--model", "llava-1.5", "--ratio", "0.60", "--out-dir", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = read_json(out.join("mask.json"));
    let retained = mask["retained"].as_array().unwrap();
    assert_eq!(retained.len(), 231);
    assert_eq!(retained[0], 0);
    assert_eq!(mask["fill"], "-inf");
    assert_eq!(mask["n_total"], 577);
    assert_eq!(mask["target_layers"], json!([12, 13, 14, 15, 16, 17, 18]));
    let sel = read_json(out.join("selection.json"));
    assert_eq!(sel["K_selected"], 230);
    assert_eq!(sel["config_echo"]["plan"]["resolved_from"]["ratio"], "flag");
    assert_eq!(sel["config_echo"]["plan"]["resolved_from"]["source_layers"], "profile");

    // same inputs, same bytes
    let again = dir.path().join("sel2");
    run(&[
        "select", p(&trace_path), p(&feat_path), "--model", "llava-1.5", "--ratio", "0.60", "--out-dir", p(&again),
    ]);
    assert_eq!(
        std::fs::read(out.join("mask.json")).unwrap(),
        std::fs::read(again.join("mask.json")).unwrap()
    );

    let wrong = run(&[
        "select", p(&trace_path), p(&feat_path), "--model", "llava-1.5", "--feature-layer", "10", "--out-dir", p(&again),
    ]);
    assert_eq!(wrong.status.code(), Some(64));
}

/// Attention whose importance favours cluster 0 of a 4-cluster feature dump.
fn skewed_trace(n_total: usize) -> AttentionTrace {
    let weights: Vec<f32> = (0..n_total)
        .map(|j| match j {
            0 => 1.0,
            _ if cluster_of(j - 1, 4) == 0 => 3.0 + j as f32 * 0.01,
            _ => 1.0 + j as f32 * 0.001,
        })
        .collect();
    let total: f32 = weights.iter().sum();
    let row: Vec<f32> = weights.iter().map(|w| w / total).collect();
    let data: Vec<f32> = (0..n_total).flat_map(|_| row.clone()).collect();
    let header = TraceHeader::vision("toy", vec![0], 1, n_total, true, Storage::Full);
    AttentionTrace::new(header, data).unwrap()
}

#[test]
fn dpp_spans_more_clusters_than_topk() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("a.pats");
    write_trace(&trace_path, &skewed_trace(33).into()).unwrap();
    let feat_path = dir.path().join("f.pats");
    write_trace(&feat_path, &gen_feature_dump(32, 32, 4, 0.2, 8).unwrap().into()).unwrap();

    let clusters = |method: &str| -> usize {
        let out = dir.path().join(method);
        let o = run(&[
            "select", p(&trace_path), p(&feat_path), "--out-dir", p(&out), "--method", method,
            "--ratio", "0.125", "--ratio-means-retained",
            "--source-layers", "0", "--feature-layer", "0", "--target-layers", "0",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let sel = read_json(out.join("selection.json"));
        let mut c: Vec<usize> = sel["selected"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| cluster_of(v.as_u64().unwrap() as usize, 4))
            .collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    let (topk, dpp) = (clusters("topk"), clusters("dpp"));
    assert_eq!(topk, 1);
    assert!(dpp > topk);
}

#[test]
fn logit_shift_mode_writes_group_and_delta() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("a.pats");
    write_trace(&trace_path, &skewed_trace(33).into()).unwrap();
    let feat_path = dir.path().join("f.pats");
    write_trace(&feat_path, &gen_feature_dump(32, 32, 4, 0.2, 8).unwrap().into()).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "select", p(&trace_path), p(&feat_path), "--out-dir", p(&out), "--ratio", "0.5",
        "--source-layers", "0", "--feature-layer", "0", "--target-layers", "3,4",
        "--mode", "logit-shift", "--delta", "-3.0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = read_json(out.join("mask.json"));
    assert_eq!(mask["mode"], "logit_shift");
    assert_eq!(mask["delta"], -3.0);
    assert_eq!(mask["group"].as_array().unwrap().len(), 16);
    assert_eq!(mask["retained"].as_array().unwrap().len(), 33);
}

#[test]
fn var_planted_effect_and_usage() {
    let dir = tempfile::tempdir().unwrap();
    let mut specs = Vec::new();
    for (side, target) in [("a", 0.55), ("b", 0.45)] {
        for i in 0..30 {
            specs.push(json!({
                "name": format!("{side}{i:02}"), "kind": "decoder", "T": 50, "L": 2, "H": 2,
                "context_len": 30, "visual_span": [2, 20], "target_var": target, "noise": 0.1,
            }));
        }
    }
    let spec = write_spec(dir.path(), Value::Array(specs));
    let fx = dir.path().join("fx");
    assert_eq!(run(&["synth", p(&spec), "--out-dir", p(&fx), "--seed", "17"]).status.code(), Some(0));
    let side = |s: &str| -> Vec<String> {
        (0..30).map(|i| fx.join(format!("{s}{i:02}.pats")).to_str().unwrap().to_string()).collect()
    };
    let (a, b) = (side("a"), side("b"));
    let out = dir.path().join("var");
    let mut args = vec!["var", "--out-dir", p(&out), "--a"];
    args.extend(a.iter().map(String::as_str));
    args.push("--b");
    args.extend(b.iter().map(String::as_str));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(out.join("report.json"));
    assert_eq!(report["comparison"]["direction"], "a>b");
    assert!(report["comparison"]["p_value"].as_f64().unwrap() < 1e-3);
    let grid = std::fs::read_to_string(out.join("grid_a.csv")).unwrap();
    assert_eq!(grid.lines().next().unwrap(), "layer,head,mean_var");
    assert_eq!(grid.lines().count(), 5);

    let o = run(&["var", "--out-dir", p(&out), "--a", &a[0], "--b", &b[0], &b[1]]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn metrics_golden_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = run(&[
        "metrics", p(&golden("captions.jsonl")), p(&golden("annotations.json")),
        "--lexicon", p(&golden("lexicon.json")), "--out-dir", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(out.join("metrics.json"));
    let want = read_json(golden("expected.json"));
    for key in ["chair_s", "chair_i", "f1", "precision", "recall"] {
        assert_eq!(m[key]["exact"], want[key], "{key}");
    }
    let rows = std::fs::read_to_string(out.join("per_image.csv")).unwrap();
    assert_eq!(rows.lines().count(), 11);

    let amber = dir.path().join("a");
    run(&[
        "metrics", p(&golden("captions.jsonl")), p(&golden("annotations.json")),
        "--lexicon", p(&golden("lexicon.json")), "--suite", "amber", "--out-dir", p(&amber),
    ]);
    let m = read_json(amber.join("metrics.json"));
    for key in ["cover", "hal", "cog"] {
        assert_eq!(m[key]["exact"], want[key], "{key}");
    }
    assert_eq!(m["cog_formula"], "reconstructed-v1");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = run(&["metrics", p(&empty), p(&golden("annotations.json")), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(64));

    let stray = dir.path().join("stray.jsonl");
    std::fs::write(&stray, "{\"image_id\": \"zzz\", \"caption\": \"a dog\"}\n").unwrap();
    let o = run(&["metrics", p(&stray), p(&golden("annotations.json")), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(65));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("zzz"));
}

#[test]
fn synth_is_deterministic_and_batches() {
    let dir = tempfile::tempdir().unwrap();
    let one = json!({"kind": "phase", "L": 12, "H": 2, "N_total": 17, "boundary": 4, "K_true": 4});
    let spec = write_spec(dir.path(), one.clone());
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    run(&["synth", p(&spec), "--out-dir", p(&x), "--seed", "3"]);
    run(&["synth", p(&spec), "--out-dir", p(&y), "--seed", "3"]);
    let name = "fixture_0000.pats";
    assert_eq!(std::fs::read(x.join(name)).unwrap(), std::fs::read(y.join(name)).unwrap());

    let batch: Vec<Value> = (0..100)
        .map(|i| json!({"kind": "features", "N": 6, "C": 3, "cluster_count": 2, "seed": i}))
        .collect();
    let spec = write_spec(dir.path(), Value::Array(batch));
    let out = dir.path().join("batch");
    assert_eq!(run(&["synth", p(&spec), "--out-dir", p(&out)]).status.code(), Some(0));
    let count = |ext: &str| {
        std::fs::read_dir(&out)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == ext)
            .count()
    };
    assert_eq!((count("pats"), count("json")), (100, 100));

    let bad = write_spec(dir.path(), json!({"kind": "phase", "L": 12, "H": 2, "N_total": 17, "boundary": 0, "K_true": 4}));
    assert_eq!(run(&["synth", p(&bad), "--out-dir", p(&out)]).status.code(), Some(64));
    let bad = write_spec(dir.path(), json!({"kind": "unknown"}));
    assert_eq!(run(&["synth", p(&bad), "--out-dir", p(&out)]).status.code(), Some(64));
}
