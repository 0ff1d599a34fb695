//! Exit criteria. Each test prints one `criterion N: PASS|FAIL` line.
//! Tests share a lock so timings are not disturbed by each other.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use cgforge::conv::{synthetic_lattice, unfused_forward, Conv, ConvMode, LOGICAL_WARPS};
use cgforge::engine::{Engine, EngineConfig};
use cgforge::irreps::rep_matrix;
use cgforge::kernelgen::{flop_count, gen_forward, DEFAULT_LANE_WIDTH};
use cgforge::oracle::{dense_backward, dense_forward, fd_jvp, rel_error, DenseTP};
use cgforge::random::{batch, cast, random_problem, random_rotation, rng, unit_rms, ProblemShape};
use cgforge::scheduler::{build_schedule, split_multiplicities, working_set, Strategy};
use cgforge::tpspec::{example_problem, KernelKind, ProblemSpec, ValidatedProblem};
use nalgebra::DVector;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: &str, pass: bool, detail: String) {
    let line = format!("criterion {criterion}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn split(p: &ValidatedProblem) -> ValidatedProblem {
    split_multiplicities(p, p.lane_width.unwrap_or(DEFAULT_LANE_WIDTH))
}

fn min_budget(p: &ValidatedProblem) -> usize {
    split(p).subkernels.iter().map(working_set).max().unwrap_or(1)
}

fn engine<T: cgforge::real::Real>(p: &ValidatedProblem, budget: usize, workers: usize) -> Engine<T> {
    let cfg = EngineConfig {
        workers,
        ..EngineConfig::default()
    };
    Engine::compile(p, budget.max(min_budget(p)), cfg).unwrap()
}

/// Random problems (l <= 4, multiplicities <= 64, mixed kinds) small enough
/// for the dense oracle, plus the number rejected for size.
fn oracle_problems(count: usize, seed: u64) -> (Vec<ValidatedProblem>, usize) {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut rejected = 0;
    while out.len() < count {
        let p = random_problem(&mut r, ProblemShape::default()).validate().unwrap();
        if DenseTP::new(&p).is_ok() {
            out.push(p);
        } else {
            rejected += 1;
        }
    }
    (out, rejected)
}

fn budget_for(i: usize, p: &ValidatedProblem) -> usize {
    match i % 3 {
        0 => 1 << 30,
        1 => 4096,
        _ => min_budget(p),
    }
}

#[test]
fn criterion_1_oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let (problems, rejected) = oracle_problems(200, 1001);
    let kinds: Vec<KernelKind> = problems.iter().flat_map(|p| p.instructions.iter().map(|i| i.kind)).collect();
    assert!(kinds.contains(&KernelKind::B) && kinds.contains(&KernelKind::C));
    let rows = 2;
    let mut worst = 0.0f64;
    for (i, p) in problems.iter().enumerate() {
        let (x, y, w) = batch(p, rows, i as u64);
        let z = engine::<f64>(p, budget_for(i, p), 1).forward(rows, &x, &y, &w).unwrap().z;
        worst = worst.max(rel_error(&z, &dense_forward(p, rows, &x, &y, &w).unwrap()));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-13 && elapsed < Duration::from_secs(300);
    report(
        "1",
        pass,
        format!("200 problems, {rejected} oversized draws skipped, max rel {worst:.2e}, {:.1}s", elapsed.as_secs_f64())
    );
}

#[test]
fn criterion_2_equivariance() {
    let _g = serial();
    let mut r = rng(2002);
    let mut worst = 0.0f64;
    let mut improper = 0;
    for i in 0..50 {
        let p = random_problem(&mut r, ProblemShape::default()).validate().unwrap();
        let g = random_rotation(&mut r, i % 2 == 1);
        improper += usize::from(g.improper);
        let e = engine::<f64>(&p, 4096, 1);
        let (x, y, w) = batch(&p, 1, i);
        let rot = |ir, v: &[f64]| (rep_matrix(ir, &g) * DVector::from_column_slice(v)).as_slice().to_vec();
        let lhs = e.forward(1, &rot(&p.x, &x), &rot(&p.y, &y), &w).unwrap().z;
        let rhs = rot(&p.z, &e.forward(1, &x, &y, &w).unwrap().z);
        worst = worst.max(rel_error(&lhs, &rhs));
    }
    report("2", worst <= 1e-10, format!("50 pairs, {improper} improper, max rel {worst:.2e}"));
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Central differences of `f` along every `stride`-th unit direction.
fn fd_probe(f: &dyn Fn(&[f64]) -> f64, at: &[f64], stride: usize) -> Vec<f64> {
    (0..at.len())
        .step_by(stride)
        .map(|i| {
            let mut d = vec![0.0; at.len()];
            d[i] = 1.0;
            fd_jvp(|v| vec![f(v)], at, &d, 1e-5)[0]
        })
        .collect()
}

fn strided(v: &[f64], len: usize, stride: usize) -> Vec<f64> {
    v.iter().take(len).step_by(stride).copied().collect()
}

fn stride(n: usize) -> usize {
    n.div_ceil(48).max(1)
}

#[test]
fn criterion_3_gradients() {
    let _g = serial();
    let (problems, _) = oracle_problems(20, 3003);
    let rows = 2;
    let (mut fd_worst, mut dense_worst) = (0.0f64, 0.0f64);
    for (i, p) in problems.iter().enumerate() {
        let e = engine::<f64>(p, budget_for(i, p), 1);
        let (x, y, w) = batch(p, rows, i as u64);
        let gz = unit_rms(&mut rng(i as u64 + 500), rows * p.dim_z());
        let b = e.backward(rows, &x, &y, &w, &gz).unwrap();
        let (gx, gy, gw) = dense_backward(p, rows, &x, &y, &w, &gz).unwrap();
        dense_worst = dense_worst
            .max(rel_error(&b.gx, &gx))
            .max(rel_error(&b.gy, &gy))
            .max(rel_error(&b.gw, &gw));
        let loss = |x: &[f64], y: &[f64], w: &[f64]| dot(&e.forward(rows, x, y, w).unwrap().z, &gz);
        let sx = stride(x.len());
        let sy = stride(y.len());
        let sw = stride(w.len());
        fd_worst = fd_worst
            .max(rel_error(&strided(&b.gx, x.len(), sx), &fd_probe(&|v| loss(v, &y, &w), &x, sx)))
            .max(rel_error(&strided(&b.gy, y.len(), sy), &fd_probe(&|v| loss(&x, v, &w), &y, sy)))
            .max(rel_error(&strided(&b.gw, w.len(), sw), &fd_probe(&|v| loss(&x, &y, v), &w, sw)));
    }
    let pass = fd_worst <= 1e-6 && dense_worst <= 1e-12;
    report("3", pass, format!("20 problems, fd rel {fd_worst:.2e}, dense rel {dense_worst:.2e}"));
}

#[test]
fn criterion_4_double_backward() {
    let _g = serial();
    let (problems, _) = oracle_problems(10, 4004);
    let rows = 2;
    let (mut fd_worst, mut fused_worst) = (0.0f64, 0.0f64);
    for (i, p) in problems.iter().enumerate() {
        let e = engine::<f64>(p, budget_for(i, p), 2);
        let mut r = rng(i as u64 + 900);
        let (x, y, w) = batch(p, rows, i as u64);
        let gz = unit_rms(&mut r, rows * p.dim_z());
        let da = unit_rms(&mut r, rows * p.dim_x());
        let db = unit_rms(&mut r, rows * p.dim_y());
        let dc = unit_rms(&mut r, rows * p.total_weights);
        let fused = e.double_backward(rows, &x, &y, &w, &gz, &da, &db, &dc).unwrap();
        let lit = e.double_backward_literal(rows, &x, &y, &w, &gz, &da, &db, &dc).unwrap();
        fused_worst = fused_worst
            .max(rel_error(&fused.dx, &lit.dx))
            .max(rel_error(&fused.dy, &lit.dy))
            .max(rel_error(&fused.dw, &lit.dw))
            .max(rel_error(&fused.dgz, &lit.dgz));
        let loss = |x: &[f64], y: &[f64], w: &[f64], gz: &[f64]| {
            let b = e.backward(rows, x, y, w, gz).unwrap();
            dot(&da, &b.gx) + dot(&db, &b.gy) + dot(&dc, &b.gw)
        };
        let (sx, sy, sw, sz) = (stride(x.len()), stride(y.len()), stride(w.len()), stride(gz.len()));
        fd_worst = fd_worst
            .max(rel_error(&strided(&lit.dx, x.len(), sx), &fd_probe(&|v| loss(v, &y, &w, &gz), &x, sx)))
            .max(rel_error(&strided(&lit.dy, y.len(), sy), &fd_probe(&|v| loss(&x, v, &w, &gz), &y, sy)))
            .max(rel_error(&strided(&lit.dw, w.len(), sw), &fd_probe(&|v| loss(&x, &y, v, &gz), &w, sw)))
            .max(rel_error(&strided(&lit.dgz, gz.len(), sz), &fd_probe(&|v| loss(&x, &y, &w, v), &gz, sz)));
    }
    let pass = fd_worst <= 1e-5 && fused_worst <= 1e-13;
    report("4", pass, format!("10 problems, fd rel {fd_worst:.2e}, fused vs seven-call rel {fused_worst:.2e}"));
}

/// Budgets between the minimum and the single-phase size, tagged by strategy.
fn strategy_budgets(p: &ValidatedProblem) -> Vec<(usize, Strategy)> {
    let s = split(p);
    let lo = min_budget(p);
    let hi = (s.dim_x() + s.dim_y() + s.dim_z() + s.total_weights) * 2;
    let steps = 200;
    let mut seen: Vec<(usize, Strategy)> = Vec::new();
    for k in 0..=steps {
        let budget = lo + (hi - lo) * k / steps;
        let strategy = build_schedule(&s, budget).unwrap().strategy;
        if seen.iter().filter(|(_, st)| *st == strategy).count() < 2 && !seen.iter().any(|(b, _)| *b == budget) {
            seen.push((budget, strategy));
        }
    }
    seen
}

#[test]
fn criterion_5_scheduling() {
    let _g = serial();
    let mut r = rng(5005);
    let mut problems = vec![example_problem().validate().unwrap()];
    while problems.len() < 8 {
        let p = random_problem(&mut r, ProblemShape::default()).validate().unwrap();
        let strategies: Vec<Strategy> = strategy_budgets(&p).iter().map(|b| b.1).collect();
        if strategies.contains(&Strategy::StreamZ) && strategies.contains(&Strategy::Greedy) {
            problems.push(p);
        }
    }
    let rows = 4;
    let mut ok = true;
    let (mut stream_runs, mut greedy_runs, mut worst) = (0, 0, 0.0f64);
    for (i, p) in problems.iter().enumerate() {
        let budgets = strategy_budgets(p);
        let (x, y, w) = batch(p, rows, i as u64);
        let reference = engine::<f64>(p, 1 << 30, 1).forward(rows, &x, &y, &w).unwrap().z;
        ok &= budgets.len() >= 3;
        ok &= budgets.iter().any(|b| b.1 == Strategy::StreamZ) && budgets.iter().any(|b| b.1 == Strategy::Greedy);
        for &(budget, strategy) in &budgets {
            let e = engine::<f64>(p, budget, 2);
            assert_eq!(e.schedule().strategy, strategy);
            let out = e.forward(rows, &x, &y, &w).unwrap();
            worst = worst.max(rel_error(&out.z, &reference));
            match strategy {
                Strategy::StreamZ => {
                    stream_runs += 1;
                    ok &= out.counters.stores == (rows * p.dim_z()) as u64;
                }
                Strategy::Greedy => greedy_runs += 1,
                Strategy::SinglePhase => {}
            }
        }
    }
    let pass = ok && worst <= 1e-13;
    report(
        "5",
        pass,
        format!(
            "{} problems, {stream_runs} streamed and {greedy_runs} greedy schedules, stores exact, max replay rel {worst:.2e}",
            problems.len()
        )
    );
}

fn lattice_problem() -> ValidatedProblem {
    ProblemSpec {
        x: "4x0e + 4x1o".into(),
        y: "1x0e + 1x1o".into(),
        z: "4x0e + 4x1o + 4x1e".into(),
        instructions: vec![
            (1, 1, 1, KernelKind::B),
            (1, 2, 2, KernelKind::B),
            (2, 1, 2, KernelKind::C),
            (2, 2, 1, KernelKind::C),
            (2, 2, 3, KernelKind::B),
        ],
    }
    .validate()
    .unwrap()
}

#[test]
fn criterion_6_fused_convolution() {
    let _g = serial();
    let p = lattice_problem();
    let (_, g) = synthetic_lattice();
    let (n, m) = (g.node_count, g.edge_count());
    let (x, _, _) = batch(&p, n, 61);
    let (_, y, w) = batch(&p, m, 62);
    let budget = min_budget(&p);
    let mut conv = Conv::<f64>::compile(&p, budget, 1).unwrap();
    let phases = conv.schedule().phases.len();
    let base = conv.forward(&g, &x, &y, &w, ConvMode::Deterministic).unwrap();
    let mut bitwise = true;
    for workers in [2, 8] {
        conv.set_workers(workers);
        bitwise &= conv.forward(&g, &x, &y, &w, ConvMode::Deterministic).unwrap().z == base.z;
    }
    let reference = unfused_forward(&engine::<f64>(&p, 4096, 1), &g, &x, &y, &w).unwrap();
    let err = rel_error(&base.z, &reference.z);
    let writes = base.counters.node_writes;
    let per_phase_bound = (n + LOGICAL_WARPS) as u64 * p.z.len() as u64;
    let pass = err <= 1e-13
        && bitwise
        && m > n
        && writes < reference.counters.node_writes
        && writes <= phases as u64 * per_phase_bound;
    report(
        "6",
        pass,
        format!(
            "{n} nodes, {m} edges, {phases} phases, rel {err:.2e}, bitwise {bitwise}, node writes {writes} vs {}",
            reference.counters.node_writes
        )
    );
}

#[test]
fn criterion_7_sparsity() {
    let _g = serial();
    let p = ProblemSpec {
        x: "16x4e + 8x2e".into(),
        y: "1x4e".into(),
        z: "16x4e + 8x4e".into(),
        instructions: vec![
            (1, 1, 1, KernelKind::B),
            (1, 1, 2, KernelKind::C),
            (2, 1, 2, KernelKind::C),
        ],
    }
    .validate()
    .unwrap();
    let rows = 3;
    let (x, y, w) = batch(&p, rows, 7);
    let cfg = EngineConfig {
        workers: 1,
        instrument: true,
        ..EngineConfig::default()
    };
    let e = Engine::<f64>::compile(&p, 4096, cfg).unwrap();
    let counted = e.forward(rows, &x, &y, &w).unwrap().counters.instrumented_flops.unwrap();
    let lw = e.schedule().lane_width;
    let model: u64 = e.problem().subkernels.iter().map(|sk| flop_count(&gen_forward(sk, lw))).sum::<u64>() * rows as u64;
    let dense = DenseTP::new(&p).unwrap().flops_per_row() * rows as u64;
    let ratio = counted as f64 / dense as f64;
    let pass = counted == model && ratio < 0.25;
    report("7", pass, format!("instrumented {counted}, model {model}, dense {dense}, ratio {ratio:.4}"));
}

/// Channel-wise products of scalar to l=2 features with l <= 3 edge
/// harmonics, kernel B only.
fn mace_problem() -> ValidatedProblem {
    let paths = [
        (1, 1, 1),
        (1, 2, 2),
        (1, 3, 3),
        (2, 1, 2),
        (2, 2, 1),
        (2, 2, 3),
        (2, 3, 2),
        (2, 4, 3),
        (3, 1, 3),
        (3, 2, 2),
        (3, 3, 1),
        (3, 3, 3),
        (3, 4, 4),
    ];
    ProblemSpec {
        x: "32x0e + 32x1o + 32x2e".into(),
        y: "1x0e + 1x1o + 1x2e + 1x3o".into(),
        z: "32x0e + 32x1o + 32x2e + 32x3o".into(),
        instructions: paths.iter().map(|&(a, b, c)| (a, b, c, KernelKind::B)).collect(),
    }
    .validate()
    .unwrap()
}

const PERF_ROWS: usize = 50_000;
const DENSE_SAMPLE_ROWS: usize = 64;

struct PerfRun {
    engine_8: Duration,
    engine_1: Duration,
    dense_extrapolated: Duration,
    total: Duration,
}

fn perf_run() -> PerfRun {
    let start = Instant::now();
    let p = mace_problem();
    let (x, y, w) = batch(&p, PERF_ROWS, 8);
    let time = |workers: usize| {
        let e = engine::<f64>(&p, 4096, workers);
        e.forward(64, &x[..64 * p.dim_x()], &y[..64 * p.dim_y()], &w[..64 * p.total_weights]).unwrap();
        let t = Instant::now();
        let z = e.forward(PERF_ROWS, &x, &y, &w).unwrap().z;
        let elapsed = t.elapsed();
        (elapsed, z)
    };
    let (engine_8, z8) = time(8);
    let (engine_1, z1) = time(1);
    assert_eq!(z8, z1);
    drop((z8, z1));
    let k = DENSE_SAMPLE_ROWS;
    let t = Instant::now();
    let zd = dense_forward(&p, k, &x[..k * p.dim_x()], &y[..k * p.dim_y()], &w[..k * p.total_weights]).unwrap();
    let dense_sample = t.elapsed();
    let ze = engine::<f64>(&p, 4096, 1)
        .forward(k, &x[..k * p.dim_x()], &y[..k * p.dim_y()], &w[..k * p.total_weights])
        .unwrap()
        .z;
    assert!(rel_error(&ze, &zd) <= 1e-13);
    PerfRun {
        engine_8,
        engine_1,
        dense_extrapolated: dense_sample.mul_f64(PERF_ROWS as f64 / k as f64),
        total: start.elapsed(),
    }
}

#[test]
fn criterion_8a_speedup_over_dense() {
    let _g = serial();
    let r = perf_run();
    let speedup = r.dense_extrapolated.as_secs_f64() / r.engine_8.as_secs_f64();
    let pass = speedup >= 10.0 && r.total < Duration::from_secs(120);
    report(
        "8a",
        pass,
        format!(
            "8 workers {:.2}s, dense {:.1}s extrapolated from {DENSE_SAMPLE_ROWS} rows, speedup {speedup:.1}x, run {:.1}s",
            r.engine_8.as_secs_f64(),
            r.dense_extrapolated.as_secs_f64(),
            r.total.as_secs_f64()
        )
    );
}

#[test]
fn criterion_8b_parallel_speedup() {
    let _g = serial();
    let r = perf_run();
    let speedup = r.engine_1.as_secs_f64() / r.engine_8.as_secs_f64();
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pass = speedup >= 3.0 && r.total < Duration::from_secs(120);
    report(
        "8b",
        pass,
        format!(
            "1 worker {:.2}s, 8 workers {:.2}s, speedup {speedup:.2}x on {cpus} available CPUs",
            r.engine_1.as_secs_f64(),
            r.engine_8.as_secs_f64()
        )
    );
}

#[test]
fn criterion_9_precision() {
    let _g = serial();
    let (problems, _) = oracle_problems(200, 1001);
    let rows = 2;
    let mut worst = 0.0f64;
    for (i, p) in problems.iter().enumerate() {
        let (x, y, w) = batch(p, rows, i as u64);
        let z64 = engine::<f64>(p, budget_for(i, p), 1).forward(rows, &x, &y, &w).unwrap().z;
        let z32 = engine::<f32>(p, budget_for(i, p), 1)
            .forward(rows, &cast::<f32>(&x), &cast::<f32>(&y), &cast::<f32>(&w))
            .unwrap()
            .z;
        let z32: Vec<f64> = z32.iter().map(|&v| v as f64).collect();
        worst = worst.max(rel_error(&z32, &z64));
    }
    report("9", worst <= 1e-4, format!("200 problems, max rel {worst:.2e}"));
}
