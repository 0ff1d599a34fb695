//! Batched execution of a schedule over independent rows.
//!
//! Each row runs the schedule's phases in order: ranges are copied from the
//! row's global arrays into the worker's scratch, kernels run against scratch
//! addresses, and finished z ranges are copied back. Workers own contiguous
//! row ranges, so results never depend on the worker count.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{EngineError, ScheduleError, ShapeError};
use crate::kernelgen::{
    eliminate_redundant_loads, execute, flop_count, gen_backward, gen_forward, specialize, Bindings, CountingTally,
    ExecCtx, KernelIR, NoTally, Operand, SpecializedKernel,
};
use crate::real::Real;
use crate::scheduler::{build_schedule, problem_fingerprint, split_multiplicities, Schedule, Space};
use crate::tpspec::ValidatedProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Interpreted,
    Specialized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub workers: usize,
    pub mode: ExecMode,
    /// Count every executed FLOP (forces the interpreter).
    pub instrument: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            mode: ExecMode::Specialized,
            instrument: false,
        }
    }
}

/// Totals over the batch. Loads and stores are global-memory words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub loads: u64,
    pub stores: u64,
    /// Model count from the generated kernels.
    pub flops: u64,
    /// Present when the run was instrumented.
    pub instrumented_flops: Option<u64>,
}

impl Counters {
    pub fn add(&mut self, other: &Counters) {
        self.loads += other.loads;
        self.stores += other.stores;
        self.flops += other.flops;
        self.instrumented_flops = match (self.instrumented_flops, other.instrumented_flops) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
    }
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub z: Vec<T>,
    pub counters: Counters,
}

#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub gx: Vec<T>,
    pub gy: Vec<T>,
    pub gw: Vec<T>,
    pub counters: Counters,
}

#[derive(Debug, Clone)]
pub struct DoubleBackward<T> {
    pub dx: Vec<T>,
    pub dy: Vec<T>,
    pub dw: Vec<T>,
    pub dgz: Vec<T>,
    pub counters: Counters,
}

#[derive(Debug, Clone, Copy)]
struct Load {
    input: usize,
    offset: usize,
    len: usize,
    addr: usize,
    mapped: bool,
}

#[derive(Debug, Clone, Copy)]
struct Store {
    output: usize,
    addr: usize,
    offset: usize,
    len: usize,
    mapped: bool,
}

struct Step<T: Real> {
    ir: Arc<KernelIR>,
    bind: Bindings,
    fast: SpecializedKernel<T>,
}

struct PhaseProgram<T: Real> {
    loads: Vec<Load>,
    zero: Vec<(usize, usize)>,
    steps: Vec<Step<T>>,
    stores: Vec<Store>,
}

/// A fully bound per-row procedure.
struct Program<T: Real> {
    scratch_words: usize,
    row_zero: Vec<(usize, usize)>,
    phases: Vec<PhaseProgram<T>>,
    row_stores: Vec<Store>,
    /// `(output, offset, len)` spans written as zeros.
    zero_fill: Vec<(usize, usize, usize)>,
    loads_per_row: u64,
    stores_per_row: u64,
    flops_per_row: u64,
}

/// Kernel invocation before binding to concrete scratch addresses.
struct RawStep {
    ir: Arc<KernelIR>,
    bind: Bindings,
}

struct RawPhase {
    loads: Vec<Load>,
    zero: Vec<(usize, usize)>,
    steps: Vec<RawStep>,
    stores: Vec<Store>,
}

impl<T: Real> Program<T> {
    fn build(
        scratch_words: usize,
        row_zero: Vec<(usize, usize)>,
        raw: Vec<RawPhase>,
        row_stores: Vec<Store>,
        zero_fill: Vec<(usize, usize, usize)>,
    ) -> Self {
        // Register reuse across the whole per-row kernel sequence.
        let kernels: Vec<Arc<KernelIR>> = raw.iter().flat_map(|ph| ph.steps.iter().map(|s| s.ir.clone())).collect();
        let binds: Vec<Bindings> = raw.iter().flat_map(|ph| ph.steps.iter().map(|s| s.bind)).collect();
        let flops_per_row = kernels.iter().map(|k| flop_count(k)).sum();
        let mut lean = eliminate_redundant_loads(&kernels, &binds).into_iter();
        let mut loads_per_row = 0u64;
        let mut stores_per_row = 0u64;
        let phases = raw
            .into_iter()
            .map(|ph| {
                loads_per_row += ph.loads.iter().map(|l| l.len as u64).sum::<u64>();
                stores_per_row += ph.stores.iter().map(|s| s.len as u64).sum::<u64>();
                let steps = ph
                    .steps
                    .into_iter()
                    .map(|s| {
                        let ir = lean.next().expect("one kernel per step");
                        let fast = specialize::<T>(&ir, s.bind);
                        Step { ir, bind: s.bind, fast }
                    })
                    .collect();
                PhaseProgram {
                    loads: ph.loads,
                    zero: ph.zero,
                    steps,
                    stores: ph.stores,
                }
            })
            .collect();
        stores_per_row += row_stores.iter().map(|s| s.len as u64).sum::<u64>();
        stores_per_row += zero_fill.iter().map(|z| z.2 as u64).sum::<u64>();
        Self {
            scratch_words,
            row_zero,
            phases,
            row_stores,
            zero_fill,
            loads_per_row,
            stores_per_row,
            flops_per_row,
        }
    }
}

/// Per-worker buffers.
struct Workspace<T> {
    scratch: Vec<T>,
    regs: Vec<T>,
    temp: Vec<T>,
}

pub struct Engine<T: Real> {
    problem: ValidatedProblem,
    schedule: Schedule,
    config: EngineConfig,
    regs_words: usize,
    temp_words: usize,
    forward: Program<T>,
    backward: Program<T>,
    double_fwd: Program<T>,
    double_bwd: Program<T>,
}

// Input/output slot numbers used by the programs.
const IN_X: usize = 0;
const IN_Y: usize = 1;
const IN_W: usize = 2;
const IN_GZ: usize = 3;
const IN_DA: usize = 4;
const IN_DB: usize = 5;
const IN_DC: usize = 6;
const OUT_Z: usize = 0;
const OUT_GX: usize = 0;
const OUT_GY: usize = 1;
const OUT_GW: usize = 2;

impl<T: Real> Engine<T> {
    /// `p` must be the split problem the schedule was built for.
    pub fn new(p: &ValidatedProblem, schedule: &Schedule, config: EngineConfig) -> Result<Self, EngineError> {
        if schedule.fingerprint != problem_fingerprint(p) || schedule.footprints.len() != p.subkernels.len() {
            return Err(EngineError::ScheduleMismatch);
        }
        let lw = schedule.lane_width;
        let fwd_ir: Vec<Arc<KernelIR>> = p.subkernels.iter().map(|sk| Arc::new(gen_forward(sk, lw))).collect();
        let bwd_ir: Vec<Arc<KernelIR>> = p.subkernels.iter().map(|sk| Arc::new(gen_backward(sk, lw))).collect();
        let regs_words = bwd_ir.iter().map(|k| k.reg_count).max().unwrap_or(0) * lw;
        let tile = p.subkernels.iter().map(|sk| sk.x_rows * sk.z_dim()).max().unwrap_or(0);
        let b = Builder {
            p,
            s: schedule,
            fwd_ir: &fwd_ir,
            bwd_ir: &bwd_ir,
            tile,
        };
        Ok(Self {
            forward: b.forward(),
            backward: b.backward(),
            double_fwd: b.double_forward(),
            double_bwd: b.double_backward(),
            problem: p.clone(),
            schedule: schedule.clone(),
            config,
            regs_words,
            temp_words: 2 * tile,
        })
    }

    /// Splits `p` to the default lane width and schedules it under `budget_words`.
    pub fn compile(p: &ValidatedProblem, budget_words: usize, config: EngineConfig) -> Result<Self, ScheduleError> {
        let lw = p.lane_width.unwrap_or(crate::kernelgen::DEFAULT_LANE_WIDTH);
        let split = split_multiplicities(p, lw);
        let s = build_schedule(&split, budget_words)?;
        Ok(Self::new(&split, &s, config).expect("schedule built for this problem"))
    }

    pub fn problem(&self) -> &ValidatedProblem {
        &self.problem
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    pub fn set_config(&mut self, config: EngineConfig) {
        self.config = config;
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let p = &self.problem;
        (p.dim_x(), p.dim_y(), p.dim_z(), p.total_weights)
    }

    /// `z[b] = TP(x[b], y[b], W[b])` for every row.
    pub fn forward(&self, rows: usize, x: &[T], y: &[T], w: &[T]) -> Result<Forward<T>, EngineError> {
        let (dx, dy, dz, nw) = self.dims();
        check("x", x, rows, dx)?;
        check("y", y, rows, dy)?;
        check("w", w, rows, nw)?;
        let mut z = vec![T::zero(); rows * dz];
        let counters = self.run(&self.forward, rows, &[(x, dx), (y, dy), (w, nw)], &mut [(&mut z, dz)]);
        Ok(Forward { z, counters })
    }

    /// Gradients of `<g_z, z>` with respect to x, y and W.
    pub fn backward(&self, rows: usize, x: &[T], y: &[T], w: &[T], gz: &[T]) -> Result<Backward<T>, EngineError> {
        let (dx, dy, dz, nw) = self.dims();
        check("x", x, rows, dx)?;
        check("y", y, rows, dy)?;
        check("w", w, rows, nw)?;
        check("g_z", gz, rows, dz)?;
        let mut gx = vec![T::zero(); rows * dx];
        let mut gy = vec![T::zero(); rows * dy];
        let mut gw = vec![T::zero(); rows * nw];
        let counters = self.run(
            &self.backward,
            rows,
            &[(x, dx), (y, dy), (w, nw), (gz, dz)],
            &mut [(&mut gx, dx), (&mut gy, dy), (&mut gw, nw)],
        );
        Ok(Backward { gx, gy, gw, counters })
    }

    /// Double backward from two fused passes: the three forward-type
    /// dispatches share one pass, the four backward-type ones another.
    #[allow(clippy::too_many_arguments)]
    pub fn double_backward(
        &self,
        rows: usize,
        x: &[T],
        y: &[T],
        w: &[T],
        gz: &[T],
        da: &[T],
        db: &[T],
        dc: &[T],
    ) -> Result<DoubleBackward<T>, EngineError> {
        let (dx, dy, dz, nw) = self.dims();
        check("x", x, rows, dx)?;
        check("y", y, rows, dy)?;
        check("w", w, rows, nw)?;
        check("g_z", gz, rows, dz)?;
        check("dL/da", da, rows, dx)?;
        check("dL/db", db, rows, dy)?;
        check("dL/dC", dc, rows, nw)?;
        let inputs = [(x, dx), (y, dy), (w, nw), (gz, dz), (da, dx), (db, dy), (dc, nw)];
        let mut dgz = vec![T::zero(); rows * dz];
        let mut counters = self.run(&self.double_fwd, rows, &inputs, &mut [(&mut dgz, dz)]);
        let mut ddx = vec![T::zero(); rows * dx];
        let mut ddy = vec![T::zero(); rows * dy];
        let mut ddw = vec![T::zero(); rows * nw];
        let c2 = self.run(
            &self.double_bwd,
            rows,
            &inputs,
            &mut [(&mut ddx, dx), (&mut ddy, dy), (&mut ddw, nw)],
        );
        counters.add(&c2);
        Ok(DoubleBackward {
            dx: ddx,
            dy: ddy,
            dw: ddw,
            dgz,
            counters,
        })
    }

    /// Double backward as seven separate forward/backward calls.
    #[allow(clippy::too_many_arguments)]
    pub fn double_backward_literal(
        &self,
        rows: usize,
        x: &[T],
        y: &[T],
        w: &[T],
        gz: &[T],
        da: &[T],
        db: &[T],
        dc: &[T],
    ) -> Result<DoubleBackward<T>, EngineError> {
        let (dx, dy, _, nw) = self.dims();
        check("dL/da", da, rows, dx)?;
        check("dL/db", db, rows, dy)?;
        check("dL/dC", dc, rows, nw)?;
        let op1 = self.backward(rows, da, db, w, gz)?;
        let op2 = self.backward(rows, x, y, dc, gz)?;
        let op3 = self.forward(rows, da, y, w)?;
        let op4 = self.backward(rows, da, y, w, gz)?;
        let op5 = self.backward(rows, x, db, w, gz)?;
        let op6 = self.forward(rows, x, db, w)?;
        let op7 = self.forward(rows, x, y, dc)?;
        let sum = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&p, &q)| p + q).collect::<Vec<T>>();
        let mut counters = Counters::default();
        for c in [
            &op1.counters,
            &op2.counters,
            &op3.counters,
            &op4.counters,
            &op5.counters,
            &op6.counters,
            &op7.counters,
        ] {
            counters.add(c);
        }
        Ok(DoubleBackward {
            dx: sum(&op1.gx, &op2.gx),
            dy: sum(&op1.gy, &op2.gy),
            dw: sum(&op4.gw, &op5.gw),
            dgz: sum(&sum(&op3.z, &op6.z), &op7.z),
            counters,
        })
    }

    fn workspace(&self, prog: &Program<T>) -> Workspace<T> {
        Workspace {
            scratch: vec![T::zero(); prog.scratch_words],
            regs: vec![T::zero(); self.regs_words],
            temp: vec![T::zero(); self.temp_words],
        }
    }

    fn run(&self, prog: &Program<T>, rows: usize, inputs: &[(&[T], usize)], outputs: &mut [(&mut [T], usize)]) -> Counters {
        let workers = self.config.workers.max(1).min(rows.max(1));
        let bounds: Vec<usize> = (0..=workers).map(|k| k * rows / workers).collect();
        // Per-worker output chunks.
        let out_cols: Vec<usize> = outputs.iter().map(|o| o.1).collect();
        let mut chunks: Vec<Vec<&mut [T]>> = (0..workers).map(|_| Vec::new()).collect();
        for (out, cols) in outputs.iter_mut() {
            let mut rest: &mut [T] = out;
            for k in 0..workers {
                let (head, tail) = rest.split_at_mut((bounds[k + 1] - bounds[k]) * *cols);
                chunks[k].push(head);
                rest = tail;
            }
        }
        let instrument = self.config.instrument;
        let interpret = instrument || self.config.mode == ExecMode::Interpreted;
        let tallies: Vec<u64> = if workers == 1 {
            let chunk = chunks.pop().expect("one worker");
            vec![self.run_rows(prog, 0, rows, inputs, chunk, &out_cols, interpret, instrument)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunks
                    .into_iter()
                    .enumerate()
                    .map(|(k, chunk)| {
                        let (lo, hi) = (bounds[k], bounds[k + 1]);
                        let out_cols = &out_cols;
                        scope.spawn(move || self.run_rows(prog, lo, hi, inputs, chunk, out_cols, interpret, instrument))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let rows = rows as u64;
        Counters {
            loads: prog.loads_per_row * rows,
            stores: prog.stores_per_row * rows,
            flops: prog.flops_per_row * rows,
            instrumented_flops: instrument.then(|| tallies.iter().sum()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_rows(
        &self,
        prog: &Program<T>,
        lo: usize,
        hi: usize,
        inputs: &[(&[T], usize)],
        mut outputs: Vec<&mut [T]>,
        out_cols: &[usize],
        interpret: bool,
        instrument: bool,
    ) -> u64 {
        let mut ws = self.workspace(prog);
        let mut tally = CountingTally::default();
        let map = self.problem.weight_map.as_deref();
        for row in lo..hi {
            let local = row - lo;
            let input = |i: usize| {
                let (data, cols) = inputs[i];
                &data[row * cols..(row + 1) * cols]
            };
            for &(addr, len) in &prog.row_zero {
                ws.scratch[addr..addr + len].fill(T::zero());
            }
            for ph in &prog.phases {
                for l in &ph.loads {
                    let src = input(l.input);
                    let dst = &mut ws.scratch[l.addr..l.addr + l.len];
                    match (l.mapped, map) {
                        (true, Some(m)) => {
                            for (d, &c) in dst.iter_mut().zip(&m[l.offset..l.offset + l.len]) {
                                *d = src[c];
                            }
                        }
                        _ => dst.copy_from_slice(&src[l.offset..l.offset + l.len]),
                    }
                }
                for &(addr, len) in &ph.zero {
                    ws.scratch[addr..addr + len].fill(T::zero());
                }
                for step in &ph.steps {
                    if interpret {
                        let mut ctx = ExecCtx {
                            regs: &mut ws.regs,
                            scratch: &mut ws.scratch,
                            temp: &mut ws.temp,
                            bind: step.bind,
                        };
                        if instrument {
                            execute(&step.ir, &mut ctx, &mut tally);
                        } else {
                            execute(&step.ir, &mut ctx, &mut NoTally);
                        }
                    } else {
                        step.fast.run(&mut ws.regs, &mut ws.scratch, &mut ws.temp);
                    }
                }
                for s in &ph.stores {
                    store(s, &ws.scratch, &mut outputs, out_cols, local, map);
                }
            }
            for s in &prog.row_stores {
                store(s, &ws.scratch, &mut outputs, out_cols, local, map);
            }
            for &(o, offset, len) in &prog.zero_fill {
                let base = local * out_cols[o] + offset;
                outputs[o][base..base + len].fill(T::zero());
            }
        }
        tally.flops()
    }
}

fn store<T: Real>(s: &Store, scratch: &[T], outputs: &mut [&mut [T]], cols: &[usize], local: usize, map: Option<&[usize]>) {
    let row = &mut outputs[s.output][local * cols[s.output]..(local + 1) * cols[s.output]];
    let src = &scratch[s.addr..s.addr + s.len];
    match (s.mapped, map) {
        (true, Some(m)) => {
            for (&v, &c) in src.iter().zip(&m[s.offset..s.offset + s.len]) {
                row[c] = v;
            }
        }
        _ => row[s.offset..s.offset + s.len].copy_from_slice(src),
    }
}

pub(crate) fn check<T>(name: &'static str, data: &[T], rows: usize, cols: usize) -> Result<(), ShapeError> {
    if data.len() == rows * cols {
        return Ok(());
    }
    let (got_rows, got_cols) = if cols > 0 && data.len() % cols == 0 {
        (data.len() / cols, cols)
    } else {
        (1, data.len())
    };
    Err(ShapeError {
        name,
        expected_rows: rows,
        expected_cols: cols,
        rows: got_rows,
        cols: got_cols,
    })
}

/// Lowers a schedule into the four per-row programs.
struct Builder<'a> {
    p: &'a ValidatedProblem,
    s: &'a Schedule,
    fwd_ir: &'a [Arc<KernelIR>],
    bwd_ir: &'a [Arc<KernelIR>],
    tile: usize,
}

/// Gradient accumulation regions for x, y and W.
#[derive(Clone, Copy)]
struct GradRegion {
    gx: usize,
    gy: usize,
    gw: usize,
}

impl Builder<'_> {
    fn mapped(&self, space: Space) -> bool {
        space == Space::W && self.p.weight_map.is_some()
    }

    fn input_for(space: Space, primary: bool) -> usize {
        match (space, primary) {
            (Space::X, true) => IN_X,
            (Space::Y, true) => IN_Y,
            (Space::W, true) => IN_W,
            (Space::X, false) => IN_DA,
            (Space::Y, false) => IN_DB,
            (Space::W, false) => IN_DC,
            (Space::Z, _) => IN_GZ,
        }
    }

    /// Loads for a phase's non-z ranges; `shadow` adds the secondary inputs at
    /// `addr + scratch_words`.
    fn operand_loads(&self, ids: &[usize], shadow: bool) -> Vec<Load> {
        let mut out = Vec::new();
        for &r in ids {
            let range = self.s.ranges[r];
            if range.space == Space::Z {
                continue;
            }
            out.push(Load {
                input: Self::input_for(range.space, true),
                offset: range.offset,
                len: range.len,
                addr: range.addr,
                mapped: self.mapped(range.space),
            });
            if shadow {
                out.push(Load {
                    input: Self::input_for(range.space, false),
                    offset: range.offset,
                    len: range.len,
                    addr: range.addr + self.s.scratch_words,
                    mapped: self.mapped(range.space),
                });
            }
        }
        out
    }

    fn z_spans(&self, ids: &[usize]) -> Vec<(usize, usize)> {
        ids.iter().map(|&r| (self.s.ranges[r].addr, self.s.ranges[r].len)).collect()
    }

    fn z_stores(&self, ids: &[usize]) -> Vec<Store> {
        ids.iter()
            .map(|&r| {
                let range = self.s.ranges[r];
                Store {
                    output: OUT_Z,
                    addr: range.addr,
                    offset: range.offset,
                    len: range.len,
                    mapped: false,
                }
            })
            .collect()
    }

    fn zero_fill(&self) -> Vec<(usize, usize, usize)> {
        self.s.zero_fill.iter().map(|&(o, n)| (OUT_Z, o, n)).collect()
    }

    /// Base forward binding; `alt` selects which of x, y, W comes from the
    /// secondary copy.
    fn bind_fwd(&self, n: usize, alt: Option<Space>) -> Bindings {
        let fp = self.s.footprints[n];
        let shadow = self.s.scratch_words;
        let at = |space: Space, r: usize| self.s.ranges[r].addr + if alt == Some(space) { shadow } else { 0 };
        Bindings::new()
            .bind(Operand::X, at(Space::X, fp.x))
            .bind(Operand::Y, at(Space::Y, fp.y))
            .bind(Operand::W, at(Space::W, fp.w))
            .bind(Operand::Z, self.s.ranges[fp.z].addr)
            .bind(Operand::GZ, self.s.ranges[fp.z].addr)
            .bind(Operand::ZPrime, 0)
            .bind(Operand::GZPrime, self.tile)
    }

    fn bind_grads(&self, n: usize, b: Bindings, gxy: GradRegion, gw: GradRegion) -> Bindings {
        let sk = &self.p.subkernels[n];
        b.bind(Operand::GX, gxy.gx + sk.x_offset)
            .bind(Operand::GY, gxy.gy + sk.y_offset)
            .bind(Operand::GW, gw.gw + sk.w_offset)
    }

    fn region(&self, base: usize) -> GradRegion {
        GradRegion {
            gx: base,
            gy: base + self.p.dim_x(),
            gw: base + self.p.dim_x() + self.p.dim_y(),
        }
    }

    fn region_words(&self) -> usize {
        self.p.dim_x() + self.p.dim_y() + self.p.total_weights
    }

    fn grad_stores(&self, g: GradRegion) -> Vec<Store> {
        let mut out = Vec::new();
        for (output, addr, len, mapped) in [
            (OUT_GX, g.gx, self.p.dim_x(), false),
            (OUT_GY, g.gy, self.p.dim_y(), false),
            (OUT_GW, g.gw, self.p.total_weights, self.p.weight_map.is_some()),
        ] {
            if len > 0 {
                out.push(Store {
                    output,
                    addr,
                    offset: 0,
                    len,
                    mapped,
                });
            }
        }
        out
    }

    fn forward<T: Real>(&self) -> Program<T> {
        let raw = self
            .s
            .phases
            .iter()
            .map(|ph| RawPhase {
                loads: self.operand_loads(&ph.loads, false),
                zero: self.z_spans(&ph.z_init),
                steps: ph
                    .subkernels
                    .iter()
                    .map(|&n| RawStep {
                        ir: self.fwd_ir[n].clone(),
                        bind: self.bind_fwd(n, None),
                    })
                    .collect(),
                stores: self.z_stores(&ph.stores),
            })
            .collect();
        Program::build(self.s.scratch_words, Vec::new(), raw, Vec::new(), self.zero_fill())
    }

    /// Loads of g_z into the z ranges a phase opens.
    fn gz_loads(&self, ids: &[usize]) -> Vec<Load> {
        ids.iter()
            .map(|&r| {
                let range = self.s.ranges[r];
                Load {
                    input: IN_GZ,
                    offset: range.offset,
                    len: range.len,
                    addr: range.addr,
                    mapped: false,
                }
            })
            .collect()
    }

    fn backward<T: Real>(&self) -> Program<T> {
        let g = self.region(self.s.scratch_words);
        let raw = self
            .s
            .phases
            .iter()
            .map(|ph| {
                let mut loads = self.operand_loads(&ph.loads, false);
                loads.extend(self.gz_loads(&ph.z_init));
                RawPhase {
                    loads,
                    zero: Vec::new(),
                    steps: ph
                        .subkernels
                        .iter()
                        .map(|&n| RawStep {
                            ir: self.bwd_ir[n].clone(),
                            bind: self.bind_grads(n, self.bind_fwd(n, None), g, g),
                        })
                        .collect(),
                    stores: Vec::new(),
                }
            })
            .collect();
        Program::build(
            self.s.scratch_words + self.region_words(),
            vec![(g.gx, self.region_words())],
            raw,
            self.grad_stores(g),
            Vec::new(),
        )
    }

    /// `op3 + op6 + op7` accumulated into one z tile per subkernel.
    fn double_forward<T: Real>(&self) -> Program<T> {
        let raw = self
            .s
            .phases
            .iter()
            .map(|ph| RawPhase {
                loads: self.operand_loads(&ph.loads, true),
                zero: self.z_spans(&ph.z_init),
                steps: ph
                    .subkernels
                    .iter()
                    .flat_map(|&n| {
                        [Space::X, Space::Y, Space::W].map(|alt| RawStep {
                            ir: self.fwd_ir[n].clone(),
                            bind: self.bind_fwd(n, Some(alt)),
                        })
                    })
                    .collect(),
                stores: self.z_stores(&ph.stores),
            })
            .collect();
        Program::build(2 * self.s.scratch_words, Vec::new(), raw, Vec::new(), self.zero_fill())
    }

    /// `op1, op2` feed the x and y gradients, `op4, op5` the W gradient; the
    /// unused outputs of each dispatch land in a discard region.
    fn double_backward<T: Real>(&self) -> Program<T> {
        let base = 2 * self.s.scratch_words;
        let g = self.region(base);
        let discard = self.region(base + self.region_words());
        let raw = self
            .s
            .phases
            .iter()
            .map(|ph| {
                let mut loads = self.operand_loads(&ph.loads, true);
                loads.extend(self.gz_loads(&ph.z_init));
                let steps = ph
                    .subkernels
                    .iter()
                    .flat_map(|&n| {
                        let shadow = self.s.scratch_words;
                        let fp = self.s.footprints[n];
                        let (ax, ay) = (self.s.ranges[fp.x].addr, self.s.ranges[fp.y].addr);
                        let base = self.bind_fwd(n, None);
                        // op1: (dL/da, dL/db, W); op2: (x, y, dL/dC)
                        let op1 = base.bind(Operand::X, ax + shadow).bind(Operand::Y, ay + shadow);
                        let op2 = self.bind_fwd(n, Some(Space::W));
                        // op4: (dL/da, y, W); op5: (x, dL/db, W)
                        let op4 = self.bind_fwd(n, Some(Space::X));
                        let op5 = self.bind_fwd(n, Some(Space::Y));
                        [
                            self.bind_grads(n, op1, g, discard),
                            self.bind_grads(n, op2, g, discard),
                            self.bind_grads(n, op4, discard, g),
                            self.bind_grads(n, op5, discard, g),
                        ]
                        .map(|bind| RawStep {
                            ir: self.bwd_ir[n].clone(),
                            bind,
                        })
                    })
                    .collect();
                RawPhase {
                    loads,
                    zero: Vec::new(),
                    steps,
                    stores: Vec::new(),
                }
            })
            .collect();
        Program::build(
            base + 2 * self.region_words(),
            vec![(g.gx, 2 * self.region_words())],
            raw,
            self.grad_stores(g),
            Vec::new(),
        )
    }
}

/// One-shot forward with a default single-worker engine.
pub fn tp_forward<T: Real>(p: &ValidatedProblem, s: &Schedule, rows: usize, x: &[T], y: &[T], w: &[T]) -> Result<Vec<T>, EngineError> {
    Ok(Engine::<T>::new(p, s, EngineConfig::default())?.forward(rows, x, y, w)?.z)
}

/// One-shot backward; returns `(g_x, g_y, g_w)`.
pub fn tp_backward<T: Real>(
    p: &ValidatedProblem,
    s: &Schedule,
    rows: usize,
    x: &[T],
    y: &[T],
    w: &[T],
    gz: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>), EngineError> {
    let b = Engine::<T>::new(p, s, EngineConfig::default())?.backward(rows, x, y, w, gz)?;
    Ok((b.gx, b.gy, b.gw))
}
