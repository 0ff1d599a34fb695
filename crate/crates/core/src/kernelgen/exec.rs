//! Reference interpreter for [`KernelIR`].

use super::{KernelIR, LaneSet, MatmulKind, Op, Operand};
use crate::real::Real;

/// Offsets of each operand tile. Temporary tiles (`Z'`, `G_Z'`) index the
/// warp-local temp buffer; everything else indexes the scratch buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Bindings {
    offsets: [usize; Operand::COUNT],
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, op: Operand, offset: usize) -> Self {
        self.offsets[op.index()] = offset;
        self
    }

    pub fn set(&mut self, op: Operand, offset: usize) {
        self.offsets[op.index()] = offset;
    }

    #[inline(always)]
    pub fn offset(&self, op: Operand) -> usize {
        self.offsets[op.index()]
    }
}

/// Operation counter hooks. [`NoTally`] compiles away.
pub trait Tally {
    fn muls(&mut self, n: u64);
    fn adds(&mut self, n: u64);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoTally;

impl Tally for NoTally {
    #[inline(always)]
    fn muls(&mut self, _: u64) {}
    #[inline(always)]
    fn adds(&mut self, _: u64) {}
}

/// Counts every floating-point multiply and add the interpreter performs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CountingTally {
    pub muls: u64,
    pub adds: u64,
}

impl CountingTally {
    pub fn flops(&self) -> u64 {
        self.muls + self.adds
    }
}

impl Tally for CountingTally {
    #[inline(always)]
    fn muls(&mut self, n: u64) {
        self.muls += n;
    }
    #[inline(always)]
    fn adds(&mut self, n: u64) {
        self.adds += n;
    }
}

pub struct ExecCtx<'a, T> {
    /// `reg_count * lane_width` slots, slot-major.
    pub regs: &'a mut [T],
    pub scratch: &'a mut [T],
    pub temp: &'a mut [T],
    pub bind: Bindings,
}

/// Zeroes the kernel's accumulator registers on all lanes.
pub(crate) fn zero_accumulators<T: Real>(ir: &KernelIR, regs: &mut [T]) {
    let lw = ir.lane_width;
    for r in &ir.accumulators {
        regs[r.start as usize * lw..(r.start + r.len) as usize * lw].fill(T::zero());
    }
}

/// Runs one kernel invocation. Accumulators are zeroed first; operand
/// registers are whatever the caller left in `ctx.regs` unless loaded.
pub fn execute<T: Real, C: Tally>(ir: &KernelIR, ctx: &mut ExecCtx<'_, T>, tally: &mut C) {
    let lw = ir.lane_width;
    let active = ir.active;
    let (_, _, dz) = ir.dims();
    zero_accumulators(ir, ctx.regs);
    let bind = ctx.bind;
    for op in &ir.ops {
        match *op {
            Op::Load(ref specs) => {
                for s in specs {
                    let base = bind.offset(s.src);
                    let src: &[T] = if s.src.is_temp() { ctx.temp } else { ctx.scratch };
                    let width = s.regs.len as usize;
                    for c in 0..width {
                        let slot = (s.regs.start as usize + c) * lw;
                        for t in 0..active {
                            let at = if s.per_lane { base + t * width + c } else { base + c };
                            ctx.regs[slot + t] = src[at];
                        }
                    }
                }
            }
            Op::Fma { dst, v, a, b } => {
                let v = T::from_f64(v);
                let (d, a, b) = (dst as usize * lw, a as usize * lw, b as usize * lw);
                for t in 0..active {
                    let prod = v * ctx.regs[a + t] * ctx.regs[b + t];
                    ctx.regs[d + t] += prod;
                    tally.muls(2);
                    tally.adds(1);
                }
            }
            Op::Scale { regs } => {
                let w = bind.offset(Operand::W);
                for slot in regs.slots() {
                    for t in 0..active {
                        let wt = ctx.scratch[w + t];
                        ctx.regs[slot * lw + t] *= wt;
                        tally.muls(1);
                    }
                }
            }
            Op::Accumulate { src, dst, lanes } => {
                let base = bind.offset(dst);
                let width = src.len as usize;
                let n = match lanes {
                    LaneSet::Active => active,
                    LaneSet::First => 1,
                };
                for t in 0..n {
                    let row = match lanes {
                        LaneSet::Active => base + t * width,
                        LaneSet::First => base,
                    };
                    for c in 0..width {
                        ctx.scratch[row + c] += ctx.regs[(src.start as usize + c) * lw + t];
                        tally.adds(1);
                    }
                }
            }
            Op::Store { src, dst } => {
                let base = bind.offset(dst);
                let width = src.len as usize;
                for t in 0..active {
                    for c in 0..width {
                        ctx.temp[base + t * width + c] = ctx.regs[(src.start as usize + c) * lw + t];
                    }
                }
            }
            Op::ReduceLanes { regs } => {
                for slot in regs.slots() {
                    let mut acc = ctx.regs[slot * lw];
                    for t in 1..active {
                        acc += ctx.regs[slot * lw + t];
                        tally.adds(1);
                    }
                    ctx.regs[slot * lw] = acc;
                }
            }
            Op::Dot { regs } => {
                let (gz, gw) = (bind.offset(Operand::GZ), bind.offset(Operand::GW));
                let width = regs.len as usize;
                for t in 0..active {
                    let mut acc = ctx.scratch[gw + t];
                    for c in 0..width {
                        acc += ctx.scratch[gz + t * width + c] * ctx.regs[(regs.start as usize + c) * lw + t];
                        tally.muls(1);
                        tally.adds(1);
                    }
                    ctx.scratch[gw + t] = acc;
                }
            }
            Op::MatmulSmall { kind, m, n, k } => {
                let (m, n, k) = (m as usize, n as usize, k as usize);
                debug_assert_eq!(k, dz);
                let w = bind.offset(Operand::W);
                match kind {
                    MatmulKind::ZFromPrime => {
                        // W is m x n (b x b'), Z' is n x k
                        let (z, zp) = (bind.offset(Operand::Z), bind.offset(Operand::ZPrime));
                        for r in 0..m {
                            for kk in 0..k {
                                let mut acc = ctx.scratch[z + r * k + kk];
                                for c in 0..n {
                                    acc += ctx.scratch[w + r * n + c] * ctx.temp[zp + c * k + kk];
                                    tally.muls(1);
                                    tally.adds(1);
                                }
                                ctx.scratch[z + r * k + kk] = acc;
                            }
                        }
                    }
                    MatmulKind::GzPrimeFromGz => {
                        // W is n x m (b x b'), G_Z is n x k, output m x k
                        let (gz, gzp) = (bind.offset(Operand::GZ), bind.offset(Operand::GZPrime));
                        for c in 0..m {
                            for kk in 0..k {
                                let mut acc = T::zero();
                                for r in 0..n {
                                    acc += ctx.scratch[w + r * m + c] * ctx.scratch[gz + r * k + kk];
                                    tally.muls(1);
                                    tally.adds(1);
                                }
                                ctx.temp[gzp + c * k + kk] = acc;
                            }
                        }
                    }
                    MatmulKind::GwFromGzPrime => {
                        // G_W is m x n (b x b'), G_Z is m x k, Z' is n x k
                        let (gz, gw, zp) = (
                            bind.offset(Operand::GZ),
                            bind.offset(Operand::GW),
                            bind.offset(Operand::ZPrime),
                        );
                        for r in 0..m {
                            for c in 0..n {
                                let mut acc = ctx.scratch[gw + r * n + c];
                                for kk in 0..k {
                                    acc += ctx.scratch[gz + r * k + kk] * ctx.temp[zp + c * k + kk];
                                    tally.muls(1);
                                    tally.adds(1);
                                }
                                ctx.scratch[gw + r * n + c] = acc;
                            }
                        }
                    }
                }
            }
        }
    }
}
