//! Unrolled kernel IR for the B and C subkernels.
//!
//! Every kernel is a single SIMT instruction stream: each op runs on all active
//! lanes (lane `t` owns x row `t`). The sparse contraction is fully unrolled,
//! one `fma` per nonzero CG coefficient, with the coefficient baked in as an
//! immediate. Lanes at or above `active` are masked off.
//!
//! Register file: `regs[slot * lane_width + lane]`. Operand slots (`x`, `y`,
//! `g`) must be loaded before use. Accumulator slots listed in
//! [`KernelIR::accumulators`] are zero on kernel entry.
//!
//! FLOP accounting, per executing lane unless noted:
//!
//! | op | FLOPs |
//! |----|-------|
//! | `fma` | 3 |
//! | `scale` (width `w`) | `w` |
//! | `accumulate` (width `w`) | `w` |
//! | `dot` (width `w`) | `2w` |
//! | `reduce_lanes` over `L` lanes (width `w`, whole warp) | `w (L - 1)` |
//! | `matmul_small` `m x n x k` (whole warp) | `2 m n k` |
//! | `load`, `store` | 0 |
//!
//! A kind-B forward kernel therefore costs `b (3 nnz + 2 (2 l_z + 1))`: the
//! diagonal scale and the accumulate into `Z` together make up the
//! `Z[t,:] += W[t,t] z_reg` update.

mod exec;
mod specialize;

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::cg::CgBlock;
use crate::tpspec::{KernelKind, Subkernel};

pub use exec::{execute, Bindings, CountingTally, ExecCtx, NoTally, Tally};
pub use specialize::{specialize, SpecializedKernel};

pub const DEFAULT_LANE_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum IrKind {
    BFwd,
    CFwd,
    BBwd,
    CBwd,
}

impl IrKind {
    pub fn name(self) -> &'static str {
        match self {
            IrKind::BFwd => "B_fwd",
            IrKind::CFwd => "C_fwd",
            IrKind::BBwd => "B_bwd",
            IrKind::CBwd => "C_bwd",
        }
    }

    pub fn is_backward(self) -> bool {
        matches!(self, IrKind::BBwd | IrKind::CBwd)
    }
}

/// Operand tiles a kernel addresses; bound to concrete buffers at execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    X,
    Y,
    W,
    Z,
    GZ,
    GX,
    GY,
    GW,
    /// Warp-local `b' x (2 l_z + 1)` tile.
    ZPrime,
    /// Warp-local `b' x (2 l_z + 1)` tile.
    GZPrime,
}

impl Operand {
    pub const COUNT: usize = 10;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_temp(self) -> bool {
        matches!(self, Operand::ZPrime | Operand::GZPrime)
    }

    fn name(self) -> &'static str {
        match self {
            Operand::X => "X",
            Operand::Y => "y",
            Operand::W => "W",
            Operand::Z => "Z",
            Operand::GZ => "G_Z",
            Operand::GX => "G_X",
            Operand::GY => "g_y",
            Operand::GW => "G_W",
            Operand::ZPrime => "Z'",
            Operand::GZPrime => "G_Z'",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegRange {
    pub start: u16,
    pub len: u16,
}

impl RegRange {
    pub fn new(start: usize, len: usize) -> Self {
        Self {
            start: start as u16,
            len: len as u16,
        }
    }

    pub fn slots(self) -> std::ops::Range<usize> {
        self.start as usize..(self.start + self.len) as usize
    }
}

/// One register-block load: per-lane rows of a tile (row stride = `regs.len`)
/// or a broadcast vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadSpec {
    pub regs: RegRange,
    pub src: Operand,
    pub per_lane: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneSet {
    Active,
    /// Lane 0 only; the destination is a vector, not a per-lane row.
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatmulKind {
    /// `Z[r,:] += sum_c W[r,c] Z'[c,:]`, `m = b`, `n = b'`.
    ZFromPrime,
    /// `G_Z'[c,:] = sum_r W[r,c] G_Z[r,:]`, `m = b'`, `n = b`.
    GzPrimeFromGz,
    /// `G_W[r,c] += sum_k G_Z[r,k] Z'[c,k]`, `m = b`, `n = b'`.
    GwFromGzPrime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Load(Vec<LoadSpec>),
    /// `regs[dst] += v * regs[a] * regs[b]`
    Fma { dst: u16, v: f64, a: u16, b: u16 },
    /// `regs[r] *= W[t]` (diagonal weights)
    Scale { regs: RegRange },
    /// `dst[t, :] += regs`, or `dst[:] += regs` from lane 0.
    Accumulate {
        src: RegRange,
        dst: Operand,
        lanes: LaneSet,
    },
    /// `dst[t, :] = regs`
    Store { src: RegRange, dst: Operand },
    /// `regs(lane 0) = sum over active lanes of regs`
    ReduceLanes { regs: RegRange },
    /// `G_W[t] += sum_k G_Z[t, k] * regs[k]`
    Dot { regs: RegRange },
    MatmulSmall {
        kind: MatmulKind,
        m: u16,
        n: u16,
        k: u16,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelIR {
    pub kind: IrKind,
    pub lane_width: usize,
    /// `b'`: x rows, one per active lane.
    pub active: usize,
    /// `b`: z rows.
    pub z_rows: usize,
    pub l: (u32, u32, u32),
    pub nnz: usize,
    pub reg_count: usize,
    pub accumulators: Vec<RegRange>,
    pub ops: Vec<Op>,
}

impl KernelIR {
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            2 * self.l.0 as usize + 1,
            2 * self.l.1 as usize + 1,
            2 * self.l.2 as usize + 1,
        )
    }

    /// Words of the warp-local temporary tiles this kernel touches.
    pub fn temp_words(&self) -> usize {
        match self.kind {
            IrKind::BFwd | IrKind::BBwd => 0,
            IrKind::CFwd => self.active * self.dims().2,
            IrKind::CBwd => 2 * self.active * self.dims().2,
        }
    }

    pub fn count_ops(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.ops.iter().filter(|op| pred(op)).count()
    }
}

struct Layout {
    x: RegRange,
    y: RegRange,
    z: RegRange,
    gx: RegRange,
    gy: RegRange,
    g: RegRange,
    count: usize,
}

fn layout(block: &CgBlock, backward: bool) -> Layout {
    let (dx, dy, dz) = block.dims();
    let x = RegRange::new(0, dx);
    let y = RegRange::new(dx, dy);
    let z = RegRange::new(dx + dy, dz);
    let base = dx + dy + dz;
    if backward {
        Layout {
            x,
            y,
            z,
            gx: RegRange::new(base, dx),
            gy: RegRange::new(base + dx, dy),
            g: RegRange::new(base + dx + dy, dz),
            count: base + dx + dy + dz,
        }
    } else {
        let empty = RegRange::new(base, 0);
        Layout {
            x,
            y,
            z,
            gx: empty,
            gy: empty,
            g: empty,
            count: base,
        }
    }
}

fn reg(r: RegRange, offset: u16) -> u16 {
    debug_assert!(offset < r.len);
    r.start + offset
}

fn check_lanes(sk: &Subkernel, lane_width: usize) {
    assert!(
        sk.x_rows <= lane_width && sk.z_rows <= lane_width,
        "subkernel with b'={} b={} exceeds lane width {lane_width}; split multiplicities first",
        sk.x_rows,
        sk.z_rows
    );
}

/// Forward kernel: per-lane sparse contraction, then the diagonal scale (B) or
/// the small dense matmul with `W` (C).
pub fn gen_forward(sk: &Subkernel, lane_width: usize) -> KernelIR {
    check_lanes(sk, lane_width);
    let block = &sk.block;
    let lay = layout(block, false);
    let mut ops = vec![Op::Load(vec![
        LoadSpec {
            regs: lay.x,
            src: Operand::X,
            per_lane: true,
        },
        LoadSpec {
            regs: lay.y,
            src: Operand::Y,
            per_lane: false,
        },
    ])];
    for e in &block.entries {
        ops.push(Op::Fma {
            dst: reg(lay.z, e.k),
            v: e.v,
            a: reg(lay.x, e.i),
            b: reg(lay.y, e.j),
        });
    }
    let kind = match sk.kind {
        KernelKind::B => {
            ops.push(Op::Scale { regs: lay.z });
            ops.push(Op::Accumulate {
                src: lay.z,
                dst: Operand::Z,
                lanes: LaneSet::Active,
            });
            IrKind::BFwd
        }
        KernelKind::C => {
            ops.push(Op::Store {
                src: lay.z,
                dst: Operand::ZPrime,
            });
            ops.push(Op::MatmulSmall {
                kind: MatmulKind::ZFromPrime,
                m: sk.z_rows as u16,
                n: sk.x_rows as u16,
                k: lay.z.len,
            });
            IrKind::CFwd
        }
    };
    KernelIR {
        kind,
        lane_width,
        active: sk.x_rows,
        z_rows: sk.z_rows,
        l: (block.l1, block.l2, block.l3),
        nnz: block.nnz(),
        reg_count: lay.count,
        accumulators: vec![lay.z],
        ops,
    }
}

/// Backward kernel computing the x, y and W gradients in one pass. The
/// forward partial `z'` is recomputed in registers.
pub fn gen_backward(sk: &Subkernel, lane_width: usize) -> KernelIR {
    check_lanes(sk, lane_width);
    let block = &sk.block;
    let lay = layout(block, true);
    let mut ops = Vec::new();
    let g_src = match sk.kind {
        KernelKind::B => Operand::GZ,
        KernelKind::C => {
            ops.push(Op::MatmulSmall {
                kind: MatmulKind::GzPrimeFromGz,
                m: sk.x_rows as u16,
                n: sk.z_rows as u16,
                k: lay.z.len,
            });
            Operand::GZPrime
        }
    };
    ops.push(Op::Load(vec![
        LoadSpec {
            regs: lay.x,
            src: Operand::X,
            per_lane: true,
        },
        LoadSpec {
            regs: lay.y,
            src: Operand::Y,
            per_lane: false,
        },
        LoadSpec {
            regs: lay.g,
            src: g_src,
            per_lane: true,
        },
    ]));
    if sk.kind == KernelKind::B {
        ops.push(Op::Scale { regs: lay.g });
    }
    for e in &block.entries {
        let (i, j, k) = (e.i, e.j, e.k);
        ops.push(Op::Fma {
            dst: reg(lay.gx, i),
            v: e.v,
            a: reg(lay.y, j),
            b: reg(lay.g, k),
        });
        ops.push(Op::Fma {
            dst: reg(lay.gy, j),
            v: e.v,
            a: reg(lay.x, i),
            b: reg(lay.g, k),
        });
        ops.push(Op::Fma {
            dst: reg(lay.z, k),
            v: e.v,
            a: reg(lay.x, i),
            b: reg(lay.y, j),
        });
    }
    ops.push(Op::ReduceLanes { regs: lay.gy });
    ops.push(Op::Accumulate {
        src: lay.gy,
        dst: Operand::GY,
        lanes: LaneSet::First,
    });
    ops.push(Op::Accumulate {
        src: lay.gx,
        dst: Operand::GX,
        lanes: LaneSet::Active,
    });
    let kind = match sk.kind {
        KernelKind::B => {
            ops.push(Op::Dot { regs: lay.z });
            IrKind::BBwd
        }
        KernelKind::C => {
            ops.push(Op::Store {
                src: lay.z,
                dst: Operand::ZPrime,
            });
            ops.push(Op::MatmulSmall {
                kind: MatmulKind::GwFromGzPrime,
                m: sk.z_rows as u16,
                n: sk.x_rows as u16,
                k: lay.z.len,
            });
            IrKind::CBwd
        }
    };
    KernelIR {
        kind,
        lane_width,
        active: sk.x_rows,
        z_rows: sk.z_rows,
        l: (block.l1, block.l2, block.l3),
        nnz: block.nnz(),
        reg_count: lay.count,
        accumulators: vec![lay.z, lay.gx, lay.gy],
        ops,
    }
}

/// Exact FLOP count of one kernel invocation (one batch row).
pub fn flop_count(ir: &KernelIR) -> u64 {
    let lanes = ir.active as u64;
    ir.ops
        .iter()
        .map(|op| match *op {
            Op::Load(_) | Op::Store { .. } => 0,
            Op::Fma { .. } => 3 * lanes,
            Op::Scale { regs } => regs.len as u64 * lanes,
            Op::Accumulate { src, lanes: set, .. } => {
                src.len as u64
                    * match set {
                        LaneSet::Active => lanes,
                        LaneSet::First => 1,
                    }
            }
            Op::ReduceLanes { regs } => regs.len as u64 * lanes.saturating_sub(1),
            Op::Dot { regs } => 2 * regs.len as u64 * lanes,
            Op::MatmulSmall { m, n, k, .. } => 2 * m as u64 * n as u64 * k as u64,
        })
        .sum()
}

fn fmt_regs(r: RegRange) -> String {
    if r.len == 1 {
        format!("r{}", r.start)
    } else {
        format!("r{}..r{}", r.start, r.start + r.len - 1)
    }
}

/// Deterministic line-per-op listing. A header comment line precedes the ops.
pub fn emit_text(ir: &KernelIR) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {} l=({},{},{}) lanes={} active=0..{} b={} nnz={} regs={}",
        ir.kind.name(),
        ir.l.0,
        ir.l.1,
        ir.l.2,
        ir.lane_width,
        ir.active,
        ir.z_rows,
        ir.nnz,
        ir.reg_count
    );
    for op in &ir.ops {
        match op {
            Op::Load(specs) => {
                let parts: Vec<String> = specs
                    .iter()
                    .map(|s| {
                        let src = if s.per_lane {
                            format!("{}[t]", s.src.name())
                        } else {
                            s.src.name().to_string()
                        };
                        format!("{} <- {}", fmt_regs(s.regs), src)
                    })
                    .collect();
                let _ = writeln!(out, "load {}", parts.join(", "));
            }
            Op::Fma { dst, v, a, b } => {
                let _ = writeln!(out, "fma r{dst}, {v:+.17e}, r{a}, r{b}");
            }
            Op::Scale { regs } => {
                let _ = writeln!(out, "scale {}, W[t,t]", fmt_regs(*regs));
            }
            Op::Accumulate { src, dst, lanes } => {
                let target = match lanes {
                    LaneSet::Active => format!("{}[t]", dst.name()),
                    LaneSet::First => format!("{} (lane 0)", dst.name()),
                };
                let _ = writeln!(out, "accumulate {} += {}", target, fmt_regs(*src));
            }
            Op::Store { src, dst } => {
                let _ = writeln!(out, "store {}[t] = {}", dst.name(), fmt_regs(*src));
            }
            Op::ReduceLanes { regs } => {
                let _ = writeln!(out, "reduce_lanes {}", fmt_regs(*regs));
            }
            Op::Dot { regs } => {
                let _ = writeln!(out, "dot G_W[t,t] += G_Z[t] . {}", fmt_regs(*regs));
            }
            Op::MatmulSmall { kind, m, n, k } => {
                let what = match kind {
                    MatmulKind::ZFromPrime => "Z += W * Z'",
                    MatmulKind::GzPrimeFromGz => "G_Z' = W^T * G_Z",
                    MatmulKind::GwFromGzPrime => "G_W += G_Z * Z'^T",
                };
                let _ = writeln!(out, "matmul_small {what} [{m}x{n} by {n}x{k}]");
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("op {op}: {reason}")]
pub struct TypeError {
    pub op: usize,
    pub reason: String,
}

/// Read-before-write, bounds, and ordering checks.
pub fn typecheck(ir: &KernelIR) -> Result<(), TypeError> {
    let err = |op: usize, reason: String| Err(TypeError { op, reason });
    let n = ir.reg_count;
    let mut init = vec![false; n];
    let mut committed = vec![false; n];
    for r in &ir.accumulators {
        for s in r.slots() {
            if s >= n {
                return err(0, format!("accumulator slot r{s} out of bounds"));
            }
            init[s] = true;
        }
    }
    let (dx, dy, dz) = ir.dims();
    let mut temp_written = [false; Operand::COUNT];
    let in_bounds = |r: RegRange| (r.start + r.len) as usize <= n;

    for (pc, op) in ir.ops.iter().enumerate() {
        let read = |init: &Vec<bool>, slots: std::ops::Range<usize>| slots.clone().all(|s| init[s]);
        match op {
            Op::Load(specs) => {
                for s in specs {
                    if !in_bounds(s.regs) {
                        return err(pc, "load range out of bounds".into());
                    }
                    let width = match s.src {
                        Operand::X => dx,
                        Operand::Y => dy,
                        Operand::GZ | Operand::GZPrime => dz,
                        other => return err(pc, format!("cannot load from {other:?}")),
                    };
                    if s.regs.len as usize != width {
                        return err(pc, format!("load width {} != operand width {width}", s.regs.len));
                    }
                    if s.src.is_temp() && !temp_written[s.src.index()] {
                        return err(pc, format!("{:?} read before written", s.src));
                    }
                    for slot in s.regs.slots() {
                        init[slot] = true;
                    }
                }
            }
            Op::Fma { dst, a, b, .. } => {
                for r in [*dst, *a, *b] {
                    if r as usize >= n {
                        return err(pc, format!("r{r} out of bounds"));
                    }
                }
                if !init[*a as usize] || !init[*b as usize] || !init[*dst as usize] {
                    return err(pc, "fma reads an unwritten slot".into());
                }
                if committed[*dst as usize] {
                    return err(pc, format!("r{dst} written after it was stored"));
                }
            }
            Op::Scale { regs } => {
                if !in_bounds(*regs) || !read(&init, regs.slots()) {
                    return err(pc, "scale of unwritten or out-of-bounds slots".into());
                }
            }
            Op::ReduceLanes { regs } => {
                if !in_bounds(*regs) || !read(&init, regs.slots()) {
                    return err(pc, "reduce of unwritten or out-of-bounds slots".into());
                }
            }
            Op::Accumulate { src, .. } | Op::Store { src, .. } | Op::Dot { regs: src } => {
                if !in_bounds(*src) || !read(&init, src.slots()) {
                    return err(pc, "store of unwritten or out-of-bounds slots".into());
                }
                for s in src.slots() {
                    committed[s] = true;
                }
                if let Op::Store { dst, .. } = op {
                    if !dst.is_temp() {
                        return err(pc, format!("store target {dst:?} is not a warp tile"));
                    }
                    temp_written[dst.index()] = true;
                }
            }
            Op::MatmulSmall { kind, .. } => match kind {
                MatmulKind::ZFromPrime | MatmulKind::GwFromGzPrime => {
                    if !temp_written[Operand::ZPrime.index()] {
                        return err(pc, "matmul reads Z' before it is stored".into());
                    }
                }
                MatmulKind::GzPrimeFromGz => temp_written[Operand::GZPrime.index()] = true,
            },
        }
    }
    Ok(())
}

/// Drops loads of register blocks that already hold the same data because the
/// previous kernel in the sequence loaded them from the same binding.
///
/// `bindings[n]` is the binding of `kernels[n]`. Registers persist across the
/// sequence; accumulators are still zeroed at every kernel entry.
pub fn eliminate_redundant_loads(kernels: &[Arc<KernelIR>], bindings: &[Bindings]) -> Vec<Arc<KernelIR>> {
    let mut out = Vec::with_capacity(kernels.len());
    // (regs, operand binding, per_lane, active lanes) currently held
    let mut live: Vec<(RegRange, usize, bool, usize)> = Vec::new();
    for (ir, bind) in kernels.iter().zip(bindings) {
        let mut rewritten: Option<KernelIR> = None;
        let mut now_live = Vec::new();
        for (pc, op) in ir.ops.iter().enumerate() {
            if let Op::Load(specs) = op {
                let mut kept = Vec::new();
                for s in specs {
                    let key = (s.regs, bind.offset(s.src), s.per_lane, ir.active);
                    let reusable = !s.src.is_temp()
                        && matches!(s.src, Operand::X | Operand::Y)
                        && live.contains(&key);
                    if !reusable {
                        kept.push(*s);
                    }
                    if matches!(s.src, Operand::X | Operand::Y) {
                        now_live.push(key);
                    }
                }
                if kept.len() != specs.len() {
                    let ir2 = rewritten.get_or_insert_with(|| (**ir).clone());
                    ir2.ops[pc] = Op::Load(kept);
                }
            }
        }
        // Accumulator zeroing clobbers overlapping operand registers.
        now_live.retain(|(r, ..)| {
            !ir.accumulators
                .iter()
                .any(|a| a.start < r.start + r.len && r.start < a.start + a.len)
        });
        live = now_live;
        out.push(match rewritten {
            Some(k) => Arc::new(k),
            None => Arc::clone(ir),
        });
    }
    out
}
