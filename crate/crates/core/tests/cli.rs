use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tgc");
const GRAPH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/graphs/matmul_relu.json");

fn tgc(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn compile_prints_requested_dumps() {
    let o = tgc(&["compile", GRAPH, "--dump-graph", "fusion", "--dump-tir", "shrunk", "--dump-params"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("fused op0 MatMul"), "{s}");
    assert!(s.contains("brgemm_f32"), "{s}");
    assert!(s.contains("\"mb\": 16"), "{s}");
}

#[test]
fn run_checks_against_reference() {
    let o = tgc(&["run", GRAPH, "--random-seed", "3", "--check-oracle", "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"), "{}", stdout(&o));
}

#[test]
fn run_generated_int8_workload() {
    let o = tgc(&["run", "--workload", "MLP-1", "--precision", "int8", "--random-seed", "1", "--check-oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max_u8_diff=0"), "{}", stdout(&o));
}

#[test]
fn values_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.json");
    let out_s = out.to_str().unwrap();
    let o = tgc(&["run", GRAPH, "--random-seed", "5", "--output", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let values = tgc::value::parse_values(&text).unwrap();
    assert_eq!(values.len(), 1);
    let v = values.values().next().unwrap();
    assert_eq!(v.shape, vec![20, 40]);
    assert!(v.as_f32().unwrap().iter().all(|x| *x >= 0.0));
}

#[test]
fn inputs_file_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("in.json");
    std::fs::write(&bad, r#"[{"id":0,"shape":[20,47],"dtype":"f32","data":[]}]"#).unwrap();
    let o = tgc(&["run", GRAPH, "--inputs", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn malformed_graph_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    std::fs::write(&g, "{\"tensors\": [").unwrap();
    let o = tgc(&["compile", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());
    let missing = tgc(&["compile", "/nonexistent/graph.json"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(tgc(&[]).status.code(), Some(2));
    assert_eq!(tgc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tgc(&["bench", "--repeats", "3"]).status.code(), Some(2));
    assert_eq!(tgc(&["run", "--workload", "NOPE"]).status.code(), Some(2));
}

#[test]
fn bench_emits_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.json");
    let o = tgc(&["bench", "--workload", "MLP-1", "--precision", "f32", "--batch", "32", "--scale-factor", "8", "--json", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("fused/unfused"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let r = &v[0];
    assert_eq!(r["repeats"], 10);
    assert_eq!(r["variants"].as_array().unwrap().len(), 4);
    assert!(r["speedups"]["fused/unfused"].as_f64().unwrap() > 0.0);
}

#[test]
fn dump_lists_every_stage() {
    let o = tgc(&["dump", GRAPH]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    for stage in ["lowered", "merged", "shrunk", "fusion"] {
        assert!(s.contains(stage), "missing {stage}");
    }
}
