//! Pre-binds a kernel's instruction stream into closures with all offsets and
//! coefficients resolved. Runs of consecutive `fma` ops collapse into one unit.
//! Arithmetic order per lane matches the interpreter exactly, so results agree
//! bitwise.

use super::exec::zero_accumulators;
use super::{Bindings, KernelIR, LaneSet, MatmulKind, Op, Operand};
use crate::real::Real;

type Unit<T> = Box<dyn Fn(&mut [T], &mut [T], &mut [T]) + Send + Sync>;

pub struct SpecializedKernel<T: Real> {
    ir_accumulators: KernelIR,
    units: Vec<Unit<T>>,
}

impl<T: Real> SpecializedKernel<T> {
    /// `regs`, `scratch`, `temp` as in [`super::ExecCtx`].
    #[inline]
    pub fn run(&self, regs: &mut [T], scratch: &mut [T], temp: &mut [T]) {
        zero_accumulators(&self.ir_accumulators, regs);
        for u in &self.units {
            u(regs, scratch, temp);
        }
    }
}

type FmaEntry<T> = (usize, usize, usize, T);

fn flush_fma<T: Real>(run: &mut Vec<FmaEntry<T>>, units: &mut Vec<Unit<T>>, active: usize) {
    if run.is_empty() {
        return;
    }
    let entries = std::mem::take(run);
    units.push(Box::new(move |regs: &mut [T], _: &mut [T], _: &mut [T]| {
        for &(d, a, b, v) in &entries {
            for t in 0..active {
                let prod = v * regs[a + t] * regs[b + t];
                regs[d + t] += prod;
            }
        }
    }));
}

pub fn specialize<T: Real>(ir: &KernelIR, bind: Bindings) -> SpecializedKernel<T> {
    let lw = ir.lane_width;
    let active = ir.active;
    let mut units: Vec<Unit<T>> = Vec::new();
    let mut fma_run: Vec<FmaEntry<T>> = Vec::new();


    for op in &ir.ops {
        if let Op::Fma { dst, v, a, b } = *op {
            fma_run.push((dst as usize * lw, a as usize * lw, b as usize * lw, T::from_f64(v)));
            continue;
        }
        flush_fma(&mut fma_run, &mut units, active);
        units.push(match *op {
            Op::Fma { .. } => unreachable!(),
            Op::Load(ref specs) => {
                let plan: Vec<(usize, usize, usize, bool, bool)> = specs
                    .iter()
                    .map(|s| {
                        (
                            s.regs.start as usize * lw,
                            s.regs.len as usize,
                            bind.offset(s.src),
                            s.per_lane,
                            s.src.is_temp(),
                        )
                    })
                    .collect();
                Box::new(move |regs: &mut [T], scratch: &mut [T], temp: &mut [T]| {
                    for &(slot0, width, base, per_lane, is_temp) in &plan {
                        let src: &[T] = if is_temp { temp } else { scratch };
                        for c in 0..width {
                            let slot = slot0 + c * lw;
                            if per_lane {
                                for t in 0..active {
                                    regs[slot + t] = src[base + t * width + c];
                                }
                            } else {
                                let v = src[base + c];
                                regs[slot..slot + active].fill(v);
                            }
                        }
                    }
                })
            }
            Op::Scale { regs: r } => {
                let (slot0, width, w) = (r.start as usize * lw, r.len as usize, bind.offset(Operand::W));
                Box::new(move |regs: &mut [T], scratch: &mut [T], _: &mut [T]| {
                    for c in 0..width {
                        let slot = slot0 + c * lw;
                        for t in 0..active {
                            let wt = scratch[w + t];
                            regs[slot + t] *= wt;
                        }
                    }
                })
            }
            Op::Accumulate { src, dst, lanes } => {
                let (slot0, width, base) = (src.start as usize * lw, src.len as usize, bind.offset(dst));
                let per_lane = lanes == LaneSet::Active;
                Box::new(move |regs: &mut [T], scratch: &mut [T], _: &mut [T]| {
                    let n = if per_lane { active } else { 1 };
                    for t in 0..n {
                        let row = if per_lane { base + t * width } else { base };
                        for c in 0..width {
                            scratch[row + c] += regs[slot0 + c * lw + t];
                        }
                    }
                })
            }
            Op::Store { src, dst } => {
                let (slot0, width, base) = (src.start as usize * lw, src.len as usize, bind.offset(dst));
                Box::new(move |regs: &mut [T], _: &mut [T], temp: &mut [T]| {
                    for t in 0..active {
                        for c in 0..width {
                            temp[base + t * width + c] = regs[slot0 + c * lw + t];
                        }
                    }
                })
            }
            Op::ReduceLanes { regs: r } => {
                let (slot0, width) = (r.start as usize * lw, r.len as usize);
                Box::new(move |regs: &mut [T], _: &mut [T], _: &mut [T]| {
                    for c in 0..width {
                        let slot = slot0 + c * lw;
                        let mut acc = regs[slot];
                        for t in 1..active {
                            acc += regs[slot + t];
                        }
                        regs[slot] = acc;
                    }
                })
            }
            Op::Dot { regs: r } => {
                let (slot0, width) = (r.start as usize * lw, r.len as usize);
                let (gz, gw) = (bind.offset(Operand::GZ), bind.offset(Operand::GW));
                Box::new(move |regs: &mut [T], scratch: &mut [T], _: &mut [T]| {
                    for t in 0..active {
                        let mut acc = scratch[gw + t];
                        for c in 0..width {
                            acc += scratch[gz + t * width + c] * regs[slot0 + c * lw + t];
                        }
                        scratch[gw + t] = acc;
                    }
                })
            }
            Op::MatmulSmall { kind, m, n, k } => {
                let (m, n, k) = (m as usize, n as usize, k as usize);
                let w = bind.offset(Operand::W);
                match kind {
                    MatmulKind::ZFromPrime => {
                        let (z, zp) = (bind.offset(Operand::Z), bind.offset(Operand::ZPrime));
                        Box::new(move |_: &mut [T], scratch: &mut [T], temp: &mut [T]| {
                            for r in 0..m {
                                for kk in 0..k {
                                    let mut acc = scratch[z + r * k + kk];
                                    for c in 0..n {
                                        acc += scratch[w + r * n + c] * temp[zp + c * k + kk];
                                    }
                                    scratch[z + r * k + kk] = acc;
                                }
                            }
                        })
                    }
                    MatmulKind::GzPrimeFromGz => {
                        let (gz, gzp) = (bind.offset(Operand::GZ), bind.offset(Operand::GZPrime));
                        Box::new(move |_: &mut [T], scratch: &mut [T], temp: &mut [T]| {
                            for c in 0..m {
                                for kk in 0..k {
                                    let mut acc = T::zero();
                                    for r in 0..n {
                                        acc += scratch[w + r * m + c] * scratch[gz + r * k + kk];
                                    }
                                    temp[gzp + c * k + kk] = acc;
                                }
                            }
                        })
                    }
                    MatmulKind::GwFromGzPrime => {
                        let (gz, gw, zp) = (
                            bind.offset(Operand::GZ),
                            bind.offset(Operand::GW),
                            bind.offset(Operand::ZPrime),
                        );
                        Box::new(move |_: &mut [T], scratch: &mut [T], temp: &mut [T]| {
                            for r in 0..m {
                                for c in 0..n {
                                    let mut acc = scratch[gw + r * n + c];
                                    for kk in 0..k {
                                        acc += scratch[gz + r * k + kk] * temp[zp + c * k + kk];
                                    }
                                    scratch[gw + r * n + c] = acc;
                                }
                            }
                        })
                    }
                }
            }
        });
    }
    flush_fma(&mut fma_run, &mut units, active);

    SpecializedKernel {
        ir_accumulators: KernelIR {
            ops: Vec::new(),
            ..ir.clone()
        },
        units,
    }
}
