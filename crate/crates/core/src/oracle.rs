//! Reference implementations. Slow on purpose and kept simple enough to audit.
//!
//! The dense path materializes the full coefficient tensor `P` (pre-weight
//! layout: one `b' x (2 l_z + 1)` block per instruction) and the expanded
//! weight matrix with explicit zeros, then evaluates
//! `z[k'] = sum_k (sum_i sum_j P[k,i,j] x[i] y[j]) W[k,k']`, k-major.
//! All weights use the caller layout of the original instructions.

use crate::cg::cg_block;
use crate::engine::check;
use crate::error::OracleError;
use crate::tpspec::{KernelKind, ValidatedProblem};

/// Upper bound on materialized entries (`P` plus expanded `W`).
pub const DENSE_LIMIT: usize = 10_000_000;

#[derive(Debug, Clone, Copy)]
struct Placement {
    kind: KernelKind,
    /// First pre-weight index of the block.
    zp: usize,
    x_rows: usize,
    z_rows: usize,
    z_offset: usize,
    dz: usize,
    w_offset: usize,
}

/// Dense `P` (k-major: `p[(k * dim_x + i) * dim_y + j]`) plus the weight
/// expansion pattern.
pub struct DenseTP {
    pub dim_x: usize,
    pub dim_y: usize,
    /// Pre-weight dimension.
    pub dim_k: usize,
    pub dim_z: usize,
    pub total_weights: usize,
    pub p: Vec<f64>,
    blocks: Vec<Placement>,
}

impl DenseTP {
    pub fn new(prob: &ValidatedProblem) -> Result<Self, OracleError> {
        let (xs, ys, zs) = (prob.x.segments(), prob.y.segments(), prob.z.segments());
        let (dim_x, dim_y, dim_z) = (prob.dim_x(), prob.dim_y(), prob.dim_z());
        let weights = prob.instruction_weights();
        let mut blocks = Vec::new();
        let mut dim_k = 0;
        for (n, ins) in prob.instructions.iter().enumerate() {
            let (sx, sz) = (xs[ins.x_seg - 1], zs[ins.z_seg - 1]);
            let dz = sz.ir.dim();
            blocks.push(Placement {
                kind: ins.kind,
                zp: dim_k,
                x_rows: sx.mul,
                z_rows: sz.mul,
                z_offset: sz.offset,
                dz,
                w_offset: weights[n].0,
            });
            dim_k += sx.mul * dz;
        }
        let entries = dim_k * dim_x * dim_y + dim_k * dim_z;
        if entries > DENSE_LIMIT {
            return Err(OracleError::TooLarge {
                entries,
                limit: DENSE_LIMIT,
            });
        }
        let mut p = vec![0.0; dim_k * dim_x * dim_y];
        for (ins, b) in prob.instructions.iter().zip(&blocks) {
            let (sx, sy, sz) = (xs[ins.x_seg - 1], ys[ins.y_seg - 1], zs[ins.z_seg - 1]);
            let cg = cg_block(sx.ir.l, sy.ir.l, sz.ir.l).expect("validated triangle");
            let dx = sx.ir.dim();
            for c in 0..sx.mul {
                for e in &cg.entries {
                    let k = b.zp + c * b.dz + e.k as usize;
                    let i = sx.offset + c * dx + e.i as usize;
                    let j = sy.offset + e.j as usize;
                    p[(k * dim_x + i) * dim_y + j] = e.v;
                }
            }
        }
        Ok(Self {
            dim_x,
            dim_y,
            dim_k,
            dim_z,
            total_weights: prob.total_weights,
            p,
            blocks,
        })
    }

    /// Expanded weight matrix, `dim_k x dim_z` row-major, explicit zeros.
    pub fn expand_weights(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_k * self.dim_z];
        for b in &self.blocks {
            for r in 0..b.z_rows {
                for c in 0..b.x_rows {
                    let v = match b.kind {
                        KernelKind::B if r == c => w[b.w_offset + r],
                        KernelKind::B => continue,
                        KernelKind::C => w[b.w_offset + r * b.x_rows + c],
                    };
                    for kk in 0..b.dz {
                        let k = b.zp + c * b.dz + kk;
                        out[k * self.dim_z + b.z_offset + r * b.dz + kk] = v;
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`expand_weights`](Self::expand_weights) for a gradient:
    /// sums the expanded entries belonging to each compressed weight.
    pub fn compress_weights(&self, full: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total_weights];
        for b in &self.blocks {
            for r in 0..b.z_rows {
                for c in 0..b.x_rows {
                    let slot = match b.kind {
                        KernelKind::B if r == c => b.w_offset + r,
                        KernelKind::B => continue,
                        KernelKind::C => b.w_offset + r * b.x_rows + c,
                    };
                    for kk in 0..b.dz {
                        let k = b.zp + c * b.dz + kk;
                        out[slot] += full[k * self.dim_z + b.z_offset + r * b.dz + kk];
                    }
                }
            }
        }
        out
    }

    /// `t[k] = sum_i sum_j P[k,i,j] x[i] y[j]`
    fn contract(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.dim_k];
        for (k, tk) in t.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..self.dim_x {
                for j in 0..self.dim_y {
                    acc += self.p[(k * self.dim_x + i) * self.dim_y + j] * x[i] * y[j];
                }
            }
            *tk = acc;
        }
        t
    }

    pub fn forward_row(&self, x: &[f64], y: &[f64], w: &[f64]) -> Vec<f64> {
        let t = self.contract(x, y);
        let wf = self.expand_weights(w);
        (0..self.dim_z)
            .map(|kp| {
                let mut acc = 0.0;
                for (k, tk) in t.iter().enumerate() {
                    acc += tk * wf[k * self.dim_z + kp];
                }
                acc
            })
            .collect()
    }

    /// Analytic gradients of `<g_z, z>`: `(g_x, g_y, g_w)`.
    pub fn backward_row(&self, x: &[f64], y: &[f64], w: &[f64], gz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let wf = self.expand_weights(w);
        // g_t[k] = sum_k' W[k,k'] g_z[k']
        let gt: Vec<f64> = (0..self.dim_k)
            .map(|k| (0..self.dim_z).map(|kp| wf[k * self.dim_z + kp] * gz[kp]).sum())
            .collect();
        let mut gx = vec![0.0; self.dim_x];
        let mut gy = vec![0.0; self.dim_y];
        for (k, g) in gt.iter().enumerate() {
            for i in 0..self.dim_x {
                for j in 0..self.dim_y {
                    let v = self.p[(k * self.dim_x + i) * self.dim_y + j] * g;
                    gx[i] += v * y[j];
                    gy[j] += v * x[i];
                }
            }
        }
        let t = self.contract(x, y);
        let mut gfull = vec![0.0; self.dim_k * self.dim_z];
        for k in 0..self.dim_k {
            for kp in 0..self.dim_z {
                gfull[k * self.dim_z + kp] = t[k] * gz[kp];
            }
        }
        (gx, gy, self.compress_weights(&gfull))
    }

    /// FLOPs of one dense row: 3 per `P` entry, 2 per expanded `W` entry.
    pub fn flops_per_row(&self) -> u64 {
        (3 * self.dim_k * self.dim_x * self.dim_y + 2 * self.dim_k * self.dim_z) as u64
    }
}

fn shapes(p: &ValidatedProblem, rows: usize, x: &[f64], y: &[f64], w: &[f64]) -> Result<(), OracleError> {
    check("x", x, rows, p.dim_x())?;
    check("y", y, rows, p.dim_y())?;
    check("w", w, rows, p.total_weights)?;
    Ok(())
}

/// Dense reference forward over a batch.
pub fn dense_forward(p: &ValidatedProblem, rows: usize, x: &[f64], y: &[f64], w: &[f64]) -> Result<Vec<f64>, OracleError> {
    shapes(p, rows, x, y, w)?;
    let d = DenseTP::new(p)?;
    let (dx, dy, nw) = (d.dim_x, d.dim_y, d.total_weights);
    Ok((0..rows)
        .flat_map(|r| {
            d.forward_row(
                &x[r * dx..(r + 1) * dx],
                &y[r * dy..(r + 1) * dy],
                &w[r * nw..(r + 1) * nw],
            )
        })
        .collect())
}

/// Dense analytic gradients over a batch: `(g_x, g_y, g_w)`.
pub fn dense_backward(
    p: &ValidatedProblem,
    rows: usize,
    x: &[f64],
    y: &[f64],
    w: &[f64],
    gz: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), OracleError> {
    shapes(p, rows, x, y, w)?;
    check("g_z", gz, rows, p.dim_z())?;
    let d = DenseTP::new(p)?;
    let (dx, dy, dz, nw) = (d.dim_x, d.dim_y, d.dim_z, d.total_weights);
    let (mut gx, mut gy, mut gw) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..rows {
        let (a, b, c) = d.backward_row(
            &x[r * dx..(r + 1) * dx],
            &y[r * dy..(r + 1) * dy],
            &w[r * nw..(r + 1) * nw],
            &gz[r * dz..(r + 1) * dz],
        );
        gx.extend(a);
        gy.extend(b);
        gw.extend(c);
    }
    Ok((gx, gy, gw))
}

/// Second reference: a direct loop nest over instructions and CG blocks with
/// no materialization. Terms are summed in the same order as the dense path,
/// so nonzero results agree exactly.
pub fn loop_forward(p: &ValidatedProblem, rows: usize, x: &[f64], y: &[f64], w: &[f64]) -> Result<Vec<f64>, OracleError> {
    shapes(p, rows, x, y, w)?;
    let (xs, ys, zs) = (p.x.segments(), p.y.segments(), p.z.segments());
    let weights = p.instruction_weights();
    let (dx_all, dy_all, dz_all, nw) = (p.dim_x(), p.dim_y(), p.dim_z(), p.total_weights);
    let mut z = vec![0.0; rows * dz_all];
    for row in 0..rows {
        let xr = &x[row * dx_all..(row + 1) * dx_all];
        let yr = &y[row * dy_all..(row + 1) * dy_all];
        let wr = &w[row * nw..(row + 1) * nw];
        let zr = &mut z[row * dz_all..(row + 1) * dz_all];
        for (zi, sz) in zs.iter().enumerate() {
            let dz = sz.ir.dim();
            for r in 0..sz.mul {
                for kk in 0..dz {
                    let mut acc = 0.0;
                    for (n, ins) in p.instructions.iter().enumerate() {
                        if ins.z_seg != zi + 1 {
                            continue;
                        }
                        let (sx, sy) = (xs[ins.x_seg - 1], ys[ins.y_seg - 1]);
                        let (d1, d2) = (sx.ir.dim(), sy.ir.dim());
                        let dense = cg_block(sx.ir.l, sy.ir.l, sz.ir.l).expect("validated").to_dense();
                        for c in 0..sx.mul {
                            let wv = match ins.kind {
                                KernelKind::B if r == c => wr[weights[n].0 + r],
                                KernelKind::B => continue,
                                KernelKind::C => wr[weights[n].0 + r * sx.mul + c],
                            };
                            let mut t = 0.0;
                            for i in 0..d1 {
                                for j in 0..d2 {
                                    let v = dense[(i * d2 + j) * dz + kk];
                                    if v != 0.0 {
                                        t += v * xr[sx.offset + c * d1 + i] * yr[sy.offset + j];
                                    }
                                }
                            }
                            acc += t * wv;
                        }
                    }
                    zr[sz.offset + r * dz + kk] = acc;
                }
            }
        }
    }
    Ok(z)
}

/// Central-difference Jacobian-vector product `(f(p + h e) - f(p - h e)) / 2h`.
pub fn fd_jvp(f: impl Fn(&[f64]) -> Vec<f64>, point: &[f64], dir: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let shift = |s: f64| -> Vec<f64> { point.iter().zip(dir).map(|(p, d)| p + s * h * d).collect() };
    let (plus, minus) = (f(&shift(1.0)), f(&shift(-1.0)));
    plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// One [`fd_jvp`] per probed direction.
pub fn fd_gradient(f: impl Fn(&[f64]) -> Vec<f64>, point: &[f64], h: f64, directions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    directions.iter().map(|d| fd_jvp(&f, point, d, h)).collect()
}

/// Unit directions `e_0 .. e_{n-1}`.
pub fn unit_directions(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect()
}

/// `max |a - b| / max(max |b|, tiny)`
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
