use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cgforge::arrayio::{read_array, write_array};
use cgforge::engine::{Engine, EngineConfig};
use cgforge::random::batch;
use cgforge::tpspec::{example_problem, ProblemSpec};

const EXAMPLE: &str = r#"{"x":"32x2e + 32x1e","y":"1x3e + 1x1e","z":"32x5e + 16x2e + 32x3e","instructions":[[1,1,1,"B"],[1,2,2,"C"],[1,2,3,"C"]]}"#;
const SCALAR: &str = r#"{"x":"1x0e","y":"1x0e","z":"1x0e","instructions":[[1,1,1,"B"]]}"#;

fn cgforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgforge"))
        .args(args)
        .env_remove("CGFORGE_WORKERS")
        .output()
        .unwrap()
}

fn spec_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn compile_writes_ir_and_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let out = dir.path().join("out");
    let o = cgforge(&["compile", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--emit-schedule"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ir: Vec<_> = std::fs::read_dir(out.join("ir")).unwrap().collect();
    assert_eq!(ir.len(), 3);
    let schedule: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("schedule.json")).unwrap()).unwrap();
    assert_eq!(schedule["schedule"]["strategy"], "single_phase");
    let traffic: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("traffic.json")).unwrap()).unwrap();
    assert_eq!(traffic["scheduled"]["stores_words"], 656);
    assert!(stdout(&o).contains("\"weight_map\""));
}

#[test]
fn compile_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let read = |sub: &str| {
        let out = dir.path().join(sub);
        let o = cgforge(&["compile", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--budget", "1642"]);
        assert_eq!(o.status.code(), Some(0));
        let mut files: Vec<_> = std::fs::read_dir(out.join("ir")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let mut all = std::fs::read_to_string(out.join("schedule.json")).unwrap();
        for f in files {
            all.push_str(&std::fs::read_to_string(f).unwrap());
        }
        all
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn malformed_irreps_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", r#"{"x":"32x2q","y":"1x0e","z":"1x0e","instructions":[]}"#);
    let o = cgforge(&["compile", "--spec", spec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32x2q"));
}

#[test]
fn small_budget_exit_3_names_subkernel() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let o = cgforge(&["compile", "--spec", spec.to_str().unwrap(), "--budget", "1000", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("subkernel 2"));
}

#[test]
fn violations_printed_one_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(
        dir.path(),
        "p.json",
        r#"{"x":"1x1e","y":"1x1e","z":"1x3e","instructions":[[1,1,1,"B"],[2,1,1,"C"]]}"#,
    );
    let o = cgforge(&["compile", "--spec", spec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 2, "{err}");
    assert!(lines[0].contains("instruction 1") && lines[0].contains("triangle"));
    assert!(lines[1].starts_with("instruction 2"));
}

#[test]
fn verify_scalar_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", SCALAR);
    let o = cgforge(&["verify", "--spec", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let suites: Vec<&str> = text.lines().filter(|l| l.contains("max_error")).collect();
    assert_eq!(suites.len(), 6);
    for line in suites {
        assert!(line.contains("max_error=0.000e0") && line.ends_with("PASS"), "{line}");
    }
}

#[test]
fn verify_example_both_dtypes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    for dtype in ["fp64", "fp32"] {
        let o = cgforge(&["verify", "--spec", spec.to_str().unwrap(), "--dtype", dtype, "--budget", "1415"]);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        assert!(stdout(&o).contains("6 of 6 suites passed"));
    }
}

#[test]
fn corrupted_cg_fails_equivariance() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let o = cgforge(&["verify", "--spec", spec.to_str().unwrap(), "--corrupt-cg"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("equivariance")).unwrap();
    assert!(line.ends_with("FAIL"), "{line}");
}

#[test]
fn bench_batch_zero_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let o = cgforge(&["bench", "--spec", spec.to_str().unwrap(), "--batch", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "op,dtype,batch,wall_ns,flops,loads,stores,ai,gflops_per_s\n");
}

fn counter_columns(csv: &str) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{},{},{},{},{},{}", f[0], f[1], f[2], f[4], f[5], f[6])
        })
        .collect()
}

#[test]
fn bench_counters_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = cgforge(&[
            "bench", "--spec", spec.to_str().unwrap(), "--batch", "16", "--seed", "3", "--workers", "2", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read_to_string(out.join("bench.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.lines().count(), 4);
    assert_eq!(counter_columns(&a), counter_columns(&b));
    let fp32 = cgforge(&["bench", "--spec", spec.to_str().unwrap(), "--batch", "4", "--dtype", "fp32"]);
    assert!(stdout(&fp32).lines().nth(1).unwrap().starts_with("forward,fp32,4,"));
}

#[test]
fn bench_rejects_too_few_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let o = cgforge(&["bench", "--spec", spec.to_str().unwrap(), "--iters", "3"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn fused_conv_stores_fewer_words_on_lattice() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", SCALAR);
    let stores = |mode: &str| -> Vec<u64> {
        let o = cgforge(&["bench", "--spec", spec.to_str().unwrap(), "--mode", mode, "--workers", "2", "--batch", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o).lines().skip(1).map(|l| l.split(',').nth(6).unwrap().parse().unwrap()).collect()
    };
    let fused = stores("fused-det");
    let unfused = stores("unfused");
    assert_eq!(fused.len(), 2);
    assert!(fused[0] < unfused[0], "{fused:?} {unfused:?}");
    assert_eq!(stores("fused-atomic").len(), 2);
}

#[test]
fn workers_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", SCALAR);
    let o = Command::new(env!("CARGO_BIN_EXE_cgforge"))
        .args(["bench", "--spec", spec.to_str().unwrap(), "--batch", "4"])
        .env("CGFORGE_WORKERS", "3")
        .output()
        .unwrap();
    assert!(stderr(&o).contains("(3 workers"), "{}", stderr(&o));
}

#[test]
fn run_reads_and_writes_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_file(dir.path(), "p.json", EXAMPLE);
    let p = ProblemSpec::from_json(EXAMPLE).unwrap().validate().unwrap();
    assert_eq!(p.dim_x(), example_problem().validate().unwrap().dim_x());
    let rows = 5;
    let (x, y, w) = batch(&p, rows, 9);
    let path = |n: &str| dir.path().join(n);
    write_array(&path("x.bin"), rows, p.dim_x(), &x).unwrap();
    write_array(&path("y.bin"), rows, p.dim_y(), &y).unwrap();
    write_array(&path("w.bin"), rows, p.total_weights, &w).unwrap();
    let out = path("out");
    let o = cgforge(&[
        "run",
        "--spec",
        spec.to_str().unwrap(),
        "--x",
        path("x.bin").to_str().unwrap(),
        "--y",
        path("y.bin").to_str().unwrap(),
        "--w",
        path("w.bin").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (meta, z) = read_array::<f64>(&out.join("z.bin")).unwrap();
    assert_eq!((meta.rows, meta.cols), (rows, p.dim_z()));
    let want = Engine::<f64>::compile(&p, 4096, EngineConfig::default()).unwrap().forward(rows, &x, &y, &w).unwrap().z;
    assert_eq!(z, want);

    let bad = cgforge(&[
        "run",
        "--spec",
        spec.to_str().unwrap(),
        "--x",
        path("y.bin").to_str().unwrap(),
        "--y",
        path("y.bin").to_str().unwrap(),
        "--w",
        path("w.bin").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("columns"));
}
