mod common;

use std::path::PathBuf;
use std::process::{Command, Output};

use common::*;
use ftl::graph::{parse_network, to_model_text};
use proptest::prelude::*;
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn ftl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftl")).current_dir(root()).args(args).output().unwrap()
}

fn vit_args<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--model", "models/vit_mlp.net", "--hw", "hw/siracusa_like.hw"];
    v.extend_from_slice(extra);
    v
}

fn json(args: &[&str]) -> Value {
    let out = ftl(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn csv_reductions_recompute_from_the_raw_columns() {
    for engine in ["cluster", "npu"] {
        let out = ftl(&vit_args("compare", &["--format", "csv", "--engine", engine]));
        assert!(out.status.success());
        let mut r = csv::Reader::from_reader(&out.stdout[..]);
        let head = r.headers().unwrap().clone();
        assert_eq!(head.iter().collect::<Vec<_>>(), ftl::report::CSV_COLUMNS);
        let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!((&rows[0][0], &rows[1][0]), ("baseline", "fused"));
        let col = |row: &csv::StringRecord, name: &str| -> f64 {
            row[head.iter().position(|h| h == name).unwrap()].parse().unwrap()
        };
        let pct = |name: &str| {
            let (b, f) = (col(&rows[0], name), col(&rows[1], name));
            format!("{:.2}", (b - f) / b * 100.0)
        };
        let idx = |name: &str| head.iter().position(|h| h == name).unwrap();
        assert_eq!(rows[1][idx("runtime_reduction_pct")], pct("total_cycles"));
        assert_eq!(rows[1][idx("transfer_reduction_pct")], pct("dma_transfers"));
        assert_eq!(&rows[0][idx("runtime_reduction_pct")], "0.00");
        assert_eq!(col(&rows[0], "spills"), 1.0);
    }
}

#[test]
fn json_matches_csv() {
    let doc = json(&vit_args("compare", &["--format", "json"]));
    assert_eq!(doc["schema_version"], ftl::report::SCHEMA_VERSION);
    let out = ftl(&vit_args("compare", &["--format", "csv"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let base: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(doc["baseline"]["total_cycles"].to_string(), base[2]);
    assert_eq!(doc["baseline"]["dma_transfer_count"].to_string(), base[3]);
    assert_eq!(doc["baseline"]["spills"][0]["tensor"], "h");
}

#[test]
fn unfused_plan_has_one_group_per_layer() {
    let doc = json(&vit_args("plan", &["--fuse", "none", "--format", "json"]));
    let names: Vec<&str> = doc["groups"].as_array().unwrap().iter().map(|g| g["group"].as_str().unwrap()).collect();
    assert_eq!(names, ["mlp_fc1", "mlp_gelu"]);
    let fused = json(&vit_args("plan", &["--format", "json"]));
    assert_eq!(fused["groups"].as_array().unwrap().len(), 1);
}

#[test]
fn dump_lists_bindings_only_for_fused_groups() {
    let doc = json(&vit_args("dump-constraints", &["--format", "json"]));
    let b = &doc["groups"][0]["bindings"];
    assert_eq!(b[0], serde_json::json!(["mlp_fc1:h.M", "mlp_gelu:h.M"]));
    assert_eq!(b.as_array().unwrap().len(), 2);
    let none = json(&vit_args("dump-constraints", &["--format", "json", "--fuse", "none"]));
    for g in none["groups"].as_array().unwrap() {
        assert!(g["bindings"].as_array().unwrap().is_empty());
    }
    let table = ftl(&vit_args("dump-constraints", &[]));
    let table = String::from_utf8(table.stdout).unwrap();
    assert!(table.contains("mlp_fc1:h.N ≡ mlp_gelu:h.N"));
    assert!(table.contains("[kernel-policy] mlp_fc1:x.K == 768"));
}

#[test]
fn output_flag_writes_the_file() {
    let dir = std::env::temp_dir().join(format!("ftl-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cmp.csv");
    let out = ftl(&vit_args("compare", &["--format", "csv", "-o", path.to_str().unwrap()]));
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let direct = ftl(&vit_args("compare", &["--format", "csv"])).stdout;
    assert_eq!(std::fs::read(&path).unwrap(), direct);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn sequential_and_parallel_agree() {
    let a = ftl(&vit_args("compare", &["--format", "json"])).stdout;
    let b = ftl(&vit_args("compare", &["--format", "json", "--sequential"])).stdout;
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    let missing = ftl(&["compare", "--model", "models/nope.net", "--hw", "hw/siracusa_like.hw"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.net"));

    let bad_chain = ftl(&vit_args("plan", &["--fuse", "mlp_gelu,mlp_fc1"]));
    assert_eq!(bad_chain.status.code(), Some(2));

    let dir = std::env::temp_dir().join(format!("ftl-cli-hw-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let hw = dir.join("tiny.hw");
    let tiny_l1 = SIRACUSA.replace("capacity = 262144", "capacity = 64");
    assert_ne!(tiny_l1, SIRACUSA, "L1 capacity line moved");
    std::fs::write(&hw, tiny_l1).unwrap();
    let tiny = ftl(&["plan", "--model", "models/vit_mlp.net", "--hw", hw.to_str().unwrap()]);
    assert_eq!(tiny.status.code(), Some(2), "{}", String::from_utf8_lossy(&tiny.stderr));
    std::fs::remove_dir_all(dir).unwrap();
}

proptest! {
    #[test]
    fn model_text_round_trips(g in graph_strategy()) {
        let text = to_model_text(&g);
        let again = parse_network(&text).unwrap();
        prop_assert_eq!(&again, &g);
        prop_assert_eq!(to_model_text(&again), text);
    }
}
