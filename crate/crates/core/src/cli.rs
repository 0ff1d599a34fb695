//! `cgforge` command line: compile, verify, bench and run.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::arrayio::{read_array, write_array};
use crate::conv::{
    load_xyz, radius_graph, synthetic_lattice, transpose_permutation, unfused_backward, unfused_forward, Conv,
    ConvCounters, ConvMode, GraphCSR,
};
use crate::engine::{Counters, Engine, EngineConfig};
use crate::error::ScheduleError;
use crate::kernelgen::{emit_text, gen_forward, DEFAULT_LANE_WIDTH};
use crate::random::{batch, cast, rng, unit_rms};
use crate::real::Real;
use crate::scheduler::{build_schedule, naive_traffic, split_multiplicities, DEFAULT_BUDGET_WORDS};
use crate::tpspec::{ProblemSpec, SpecError, ValidatedProblem};
use crate::verify::{run_suites, VerifyConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IRREPS: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

pub const CSV_HEADER: &str = "op,dtype,batch,wall_ns,flops,loads,stores,ai,gflops_per_s";

#[derive(Parser)]
#[command(name = "cgforge", version, about = "Sparse Clebsch-Gordan tensor product compiler and runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schedule a problem and write the schedule, kernel IR and traffic report.
    Compile(CompileArgs),
    /// Check the engine against the oracles.
    Verify(VerifyArgs),
    /// Time forward, backward and double backward, or graph convolution.
    Bench(BenchArgs),
    /// Forward pass on arrays read from disk.
    Run(RunArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dtype {
    Fp32,
    Fp64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Unfused,
    FusedDet,
    FusedAtomic,
}

#[derive(Args)]
struct ProblemArgs {
    /// Problem JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Scratch budget in words per worker.
    #[arg(long, default_value_t = DEFAULT_BUDGET_WORDS)]
    budget: usize,
}

#[derive(Args)]
struct CompileArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Output directory.
    #[arg(long, default_value = "cgforge-out")]
    out: PathBuf,
    /// Also print the schedule JSON.
    #[arg(long)]
    emit_schedule: bool,
    /// Also print the kernel IR.
    #[arg(long)]
    emit_ir: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, value_enum, default_value_t = Dtype::Fp64)]
    dtype: Dtype,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "CGFORGE_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    #[arg(long, hide = true)]
    corrupt_cg: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Dtype::Fp64)]
    dtype: Dtype,
    #[arg(long, env = "CGFORGE_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Benchmark graph convolution instead of the plain tensor product.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// XYZ geometry for convolution (default: the synthetic carbon lattice).
    #[arg(long)]
    xyz: Option<PathBuf>,
    /// Radius-graph cutoff for `--xyz`.
    #[arg(long, default_value_t = 5.0)]
    cutoff: f64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    warmup: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(5..))]
    iters: u64,
    /// Write `bench.csv` here instead of printing the CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, value_enum, default_value_t = Dtype::Fp64)]
    dtype: Dtype,
    #[arg(long, env = "CGFORGE_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    w: PathBuf,
    /// Output directory for `z.bin`.
    #[arg(long, default_value = "cgforge-out")]
    out: PathBuf,
}

/// Error carrying the process exit code.
struct Failure {
    code: i32,
    message: String,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure {
            code: EXIT_FAILURE,
            message: format!("{e:#}"),
        }
    }
}

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        let code = match e {
            SpecError::Irreps { .. } => EXIT_IRREPS,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ScheduleError> for Failure {
    fn from(e: ScheduleError) -> Self {
        let code = match e {
            ScheduleError::BudgetTooSmall { .. } => EXIT_BUDGET,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn default_workers(flag: Option<u64>) -> usize {
    flag.map(|w| w as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_problem(path: &Path) -> Result<ValidatedProblem, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ProblemSpec::from_json(&text)?.validate()?)
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Compile(a) => compile(a, out),
        Command::Verify(a) => verify(a, out),
        Command::Bench(a) => bench(a, out, err),
        Command::Run(a) => run_forward(a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn io(e: std::io::Error) -> Failure {
    anyhow::Error::from(e).into()
}

fn compile(a: CompileArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let p = load_problem(&a.problem.spec)?;
    let lw = p.lane_width.unwrap_or(DEFAULT_LANE_WIDTH);
    let split = split_multiplicities(&p, lw);
    let s = build_schedule(&split, a.problem.budget)?;
    let ir_dir = a.out.join("ir");
    fs::create_dir_all(&ir_dir).with_context(|| format!("creating {}", ir_dir.display()))?;
    let schedule_json = s.to_json(&split);
    fs::write(a.out.join("schedule.json"), &schedule_json).map_err(io)?;
    for (n, sk) in split.subkernels.iter().enumerate() {
        let b = &sk.block;
        let text = emit_text(&gen_forward(sk, lw));
        let name = format!("sk{n:03}_{}_{}-{}-{}.fwd.ir", sk.kind, b.l1, b.l2, b.l3);
        fs::write(ir_dir.join(&name), &text).map_err(io)?;
        if a.emit_ir {
            writeln!(out, "# {name}\n{text}").map_err(io)?;
        }
    }
    #[derive(Serialize)]
    struct Report {
        strategy: crate::scheduler::Strategy,
        phases: usize,
        scratch_words: usize,
        budget_words: usize,
        scheduled: crate::scheduler::TrafficReport,
        naive: crate::scheduler::TrafficReport,
    }
    let report = Report {
        strategy: s.strategy,
        phases: s.phases.len(),
        scratch_words: s.scratch_words,
        budget_words: s.budget_words,
        scheduled: s.traffic,
        naive: naive_traffic(&split),
    };
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(a.out.join("traffic.json"), &report_json).map_err(io)?;
    if a.emit_schedule {
        writeln!(out, "{schedule_json}").map_err(io)?;
    }
    writeln!(
        out,
        "{} subkernels, strategy {:?}, {} phases, scratch {} words\nper row: loads {} stores {} flops {} intensity {:.3} flop/byte",
        split.subkernels.len(),
        s.strategy,
        s.phases.len(),
        s.scratch_words,
        s.traffic.loads_words,
        s.traffic.stores_words,
        s.traffic.flops,
        s.traffic.arithmetic_intensity
    )
    .map_err(io)?;
    writeln!(out, "wrote {}", a.out.display()).map_err(io)?;
    Ok(0)
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let p = load_problem(&a.problem.spec)?;
    let cfg = VerifyConfig {
        rows: a.batch,
        seed: a.seed,
        budget_words: a.problem.budget,
        workers: default_workers(a.workers),
        corrupt_cg: a.corrupt_cg,
    };
    let suites = match a.dtype {
        Dtype::Fp64 => run_suites::<f64>(&p, &cfg)?,
        Dtype::Fp32 => run_suites::<f32>(&p, &cfg)?,
    };
    for s in &suites {
        writeln!(out, "{}", s.line()).map_err(io)?;
    }
    let failed = suites.iter().filter(|s| !s.passed).count();
    writeln!(out, "{} of {} suites passed", suites.len() - failed, suites.len()).map_err(io)?;
    Ok(if failed == 0 { 0 } else { EXIT_FAILURE })
}

struct Row {
    op: &'static str,
    batch: usize,
    wall_ns: u128,
    flops: u64,
    loads: u64,
    stores: u64,
}

impl Row {
    fn csv(&self, dtype: &str, word_bytes: usize) -> String {
        let bytes = ((self.loads + self.stores) * word_bytes as u64) as f64;
        let ai = if bytes > 0.0 { self.flops as f64 / bytes } else { 0.0 };
        let gflops = if self.wall_ns > 0 {
            self.flops as f64 / self.wall_ns as f64
        } else {
            0.0
        };
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            self.op, dtype, self.batch, self.wall_ns, self.flops, self.loads, self.stores, ai, gflops
        )
    }
}

/// Median wall time of `iters` runs after `warmup` runs; the closure returns
/// the run's counters, which must not vary.
fn time<C: PartialEq + std::fmt::Debug>(warmup: u64, iters: u64, mut f: impl FnMut() -> C) -> (u128, C) {
    for _ in 0..warmup {
        f();
    }
    let mut times = Vec::with_capacity(iters as usize);
    let mut last = None;
    for _ in 0..iters {
        let t = Instant::now();
        let c = f();
        times.push(t.elapsed().as_nanos());
        if let Some(prev) = &last {
            assert_eq!(prev, &c, "counters changed between runs");
        }
        last = Some(c);
    }
    times.sort_unstable();
    (times[times.len() / 2], last.expect("at least one iteration"))
}

fn tp_row(op: &'static str, batch: usize, (wall_ns, c): (u128, Counters)) -> Row {
    Row {
        op,
        batch,
        wall_ns,
        flops: c.flops,
        loads: c.loads,
        stores: c.stores,
    }
}

fn conv_row(op: &'static str, batch: usize, (wall_ns, c): (u128, ConvCounters)) -> Row {
    Row {
        op,
        batch,
        wall_ns,
        flops: c.flops,
        loads: c.loads,
        stores: c.stores,
    }
}

fn bench_tp<T: Real>(p: &ValidatedProblem, a: &BenchArgs, workers: usize) -> Result<Vec<Row>, Failure> {
    let cfg = EngineConfig {
        workers,
        ..EngineConfig::default()
    };
    let e = Engine::<T>::compile(p, a.problem.budget, cfg)?;
    let rows = a.batch;
    let (x, y, w) = batch(p, rows, a.seed);
    let mut r = rng(a.seed ^ 0xb);
    let gz = cast::<T>(&unit_rms(&mut r, rows * p.dim_z()));
    let da = cast::<T>(&unit_rms(&mut r, rows * p.dim_x()));
    let db = cast::<T>(&unit_rms(&mut r, rows * p.dim_y()));
    let dc = cast::<T>(&unit_rms(&mut r, rows * p.total_weights));
    let (x, y, w) = (cast::<T>(&x), cast::<T>(&y), cast::<T>(&w));
    let (wu, it) = (a.warmup, a.iters);
    Ok(vec![
        tp_row("forward", rows, time(wu, it, || e.forward(rows, &x, &y, &w).expect("shapes").counters)),
        tp_row("backward", rows, time(wu, it, || e.backward(rows, &x, &y, &w, &gz).expect("shapes").counters)),
        tp_row(
            "double_backward",
            rows,
            time(wu, it, || {
                e.double_backward(rows, &x, &y, &w, &gz, &da, &db, &dc).expect("shapes").counters
            }),
        ),
    ])
}

fn bench_conv<T: Real>(p: &ValidatedProblem, a: &BenchArgs, mode: Mode, g: &GraphCSR, workers: usize) -> Result<Vec<Row>, Failure> {
    let mut r = rng(a.seed);
    let m = g.edges.len();
    let x = cast::<T>(&unit_rms(&mut r, g.node_count * p.dim_x()));
    let y = cast::<T>(&unit_rms(&mut r, m * p.dim_y()));
    let w = cast::<T>(&unit_rms(&mut r, m * p.total_weights));
    let gz = cast::<T>(&unit_rms(&mut r, g.node_count * p.dim_z()));
    let (wu, it) = (a.warmup, a.iters);
    let conv_err = |e: crate::error::ConvError| Failure::from(anyhow::Error::from(e));
    let rows = match mode {
        Mode::Unfused => {
            let cfg = EngineConfig {
                workers,
                ..EngineConfig::default()
            };
            let e = Engine::<T>::compile(p, a.problem.budget, cfg)?;
            unfused_forward(&e, g, &x, &y, &w).map_err(conv_err)?;
            vec![
                conv_row("conv_forward_unfused", m, time(wu, it, || unfused_forward(&e, g, &x, &y, &w).expect("checked").counters)),
                conv_row(
                    "conv_backward_unfused",
                    m,
                    time(wu, it, || unfused_backward(&e, g, &x, &y, &w, &gz).expect("checked").counters),
                ),
            ]
        }
        Mode::FusedDet | Mode::FusedAtomic => {
            let (cm, fwd, bwd) = if mode == Mode::FusedDet {
                (ConvMode::Deterministic, "conv_forward_fused_det", "conv_backward_fused_det")
            } else {
                (ConvMode::Atomic, "conv_forward_fused_atomic", "conv_backward_fused_atomic")
            };
            let c = Conv::<T>::compile(p, a.problem.budget, workers)?;
            let perm = transpose_permutation(g);
            c.forward(g, &x, &y, &w, cm).map_err(conv_err)?;
            vec![
                conv_row(fwd, m, time(wu, it, || c.forward(g, &x, &y, &w, cm).expect("checked").counters)),
                conv_row(bwd, m, time(wu, it, || c.backward(g, &perm, &x, &y, &w, &gz, cm).expect("checked").counters)),
            ]
        }
    };
    Ok(rows)
}

fn bench(a: BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let p = load_problem(&a.problem.spec)?;
    let workers = default_workers(a.workers);
    let dtype = match a.dtype {
        Dtype::Fp64 => f64::DTYPE,
        Dtype::Fp32 => f32::DTYPE,
    };
    let word = match a.dtype {
        Dtype::Fp64 => 8,
        Dtype::Fp32 => 4,
    };
    let rows = if a.batch == 0 {
        Vec::new()
    } else {
        match a.mode {
            None => match a.dtype {
                Dtype::Fp64 => bench_tp::<f64>(&p, &a, workers)?,
                Dtype::Fp32 => bench_tp::<f32>(&p, &a, workers)?,
            },
            Some(mode) => {
                let g = match &a.xyz {
                    Some(path) => {
                        if a.cutoff <= 0.0 {
                            return Err(anyhow!("cutoff must be positive").into());
                        }
                        let geo = load_xyz(path).map_err(anyhow::Error::from)?;
                        radius_graph(&geo, a.cutoff)
                    }
                    None => synthetic_lattice().1,
                };
                match a.dtype {
                    Dtype::Fp64 => bench_conv::<f64>(&p, &a, mode, &g, workers)?,
                    Dtype::Fp32 => bench_conv::<f32>(&p, &a, mode, &g, workers)?,
                }
            }
        }
    };
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv(dtype, word));
        csv.push('\n');
    }
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("bench.csv"), &csv).map_err(io)?;
        }
        None => write!(out, "{csv}").map_err(io)?,
    }
    for row in &rows {
        writeln!(
            err,
            "{:<28} {:>12.3} ms  {:>8.3} GFLOP/s  ({} worker{}, {})",
            row.op,
            row.wall_ns as f64 / 1e6,
            if row.wall_ns > 0 { row.flops as f64 / row.wall_ns as f64 } else { 0.0 },
            workers,
            if workers == 1 { "" } else { "s" },
            dtype
        )
        .map_err(io)?;
    }
    Ok(0)
}

fn run_typed<T: Real>(p: &ValidatedProblem, a: &RunArgs, workers: usize) -> Result<(), Failure> {
    let read = |path: &Path, cols: usize, name: &str| -> Result<(usize, Vec<T>), Failure> {
        let (meta, data) = read_array::<T>(path).with_context(|| format!("reading {}", path.display()))?;
        if meta.cols != cols {
            return Err(anyhow!("{name} has {} columns, expected {cols}", meta.cols).into());
        }
        Ok((meta.rows, data))
    };
    let (rows, x) = read(&a.x, p.dim_x(), "x")?;
    let (ry, y) = read(&a.y, p.dim_y(), "y")?;
    let (rw, w) = read(&a.w, p.total_weights, "w")?;
    if ry != rows || rw != rows {
        return Err(anyhow!("row counts differ: x {rows}, y {ry}, w {rw}").into());
    }
    let cfg = EngineConfig {
        workers,
        ..EngineConfig::default()
    };
    let e = Engine::<T>::compile(p, a.problem.budget, cfg)?;
    let z = e.forward(rows, &x, &y, &w).map_err(anyhow::Error::from)?.z;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_array(&a.out.join("z.bin"), rows, p.dim_z(), &z).map_err(anyhow::Error::from)?;
    Ok(())
}

fn run_forward(a: RunArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let p = load_problem(&a.problem.spec)?;
    let workers = default_workers(a.workers);
    match a.dtype {
        Dtype::Fp64 => run_typed::<f64>(&p, &a, workers)?,
        Dtype::Fp32 => run_typed::<f32>(&p, &a, workers)?,
    }
    writeln!(out, "wrote {}", a.out.join("z.bin").display()).map_err(io)?;
    Ok(0)
}
