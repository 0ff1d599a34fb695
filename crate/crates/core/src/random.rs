//! Seeded generators for inputs, problems and rotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::irreps::{Irrep, Irreps, MulIrrep, Parity, Rotation};
use crate::real::Real;
use crate::tpspec::{KernelKind, ProblemSpec, ValidatedProblem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal entries rescaled so the sample RMS is exactly one.
pub fn unit_rms(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let rms = (v.iter().map(|a| a * a).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|a| *a /= rms);
    }
    v
}

pub fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&a| T::from_f64(a)).collect()
}

/// Batch inputs `(x, y, w)` for `rows` rows, in that draw order.
pub fn batch(p: &ValidatedProblem, rows: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let x = unit_rms(&mut r, rows * p.dim_x());
    let y = unit_rms(&mut r, rows * p.dim_y());
    let w = unit_rms(&mut r, rows * p.total_weights);
    (x, y, w)
}

#[derive(Debug, Clone, Copy)]
pub struct ProblemShape {
    pub lmax: u32,
    pub max_mul: usize,
    pub max_segments: usize,
    pub max_instructions: usize,
}

impl Default for ProblemShape {
    fn default() -> Self {
        Self {
            lmax: 4,
            max_mul: 64,
            max_segments: 3,
            max_instructions: 4,
        }
    }
}

fn parity(rng: &mut impl Rng) -> Parity {
    if rng.random_bool(0.5) {
        Parity::Even
    } else {
        Parity::Odd
    }
}

/// A random valid problem: mixed B/C instructions, y multiplicity 1, z
/// segments sometimes shared by several instructions and sometimes unwritten.
pub fn random_problem(rng: &mut impl Rng, shape: ProblemShape) -> ProblemSpec {
    let nx = rng.random_range(1..=shape.max_segments);
    let ny = rng.random_range(1..=shape.max_segments);
    let x: Vec<MulIrrep> = (0..nx)
        .map(|_| MulIrrep {
            mul: rng.random_range(1..=shape.max_mul),
            ir: Irrep::new(rng.random_range(0..=shape.lmax), parity(rng)),
        })
        .collect();
    let y: Vec<MulIrrep> = (0..ny)
        .map(|_| MulIrrep {
            mul: 1,
            ir: Irrep::new(rng.random_range(0..=shape.lmax), parity(rng)),
        })
        .collect();
    let mut z: Vec<MulIrrep> = Vec::new();
    let mut instructions = Vec::new();
    for _ in 0..rng.random_range(1..=shape.max_instructions) {
        let xs = rng.random_range(0..nx);
        let ys = rng.random_range(0..ny);
        let (lx, ly) = (x[xs].ir.l, y[ys].ir.l);
        let lz = rng.random_range(lx.abs_diff(ly)..=(lx + ly).min(shape.lmax));
        let ir = Irrep::new(lz, x[xs].ir.parity.product(y[ys].ir.parity));
        let kind = if rng.random_bool(0.5) { KernelKind::B } else { KernelKind::C };
        let shared = z
            .iter()
            .position(|b| b.ir == ir && (kind == KernelKind::C || b.mul == x[xs].mul))
            .filter(|_| rng.random_bool(0.4));
        let zs = match shared {
            Some(i) => i,
            None => {
                let mul = match kind {
                    KernelKind::B => x[xs].mul,
                    KernelKind::C => rng.random_range(1..=shape.max_mul),
                };
                z.push(MulIrrep { mul, ir });
                z.len() - 1
            }
        };
        instructions.push((xs + 1, ys + 1, zs + 1, kind));
    }
    if rng.random_bool(0.2) {
        z.push(MulIrrep {
            mul: rng.random_range(1..=4),
            ir: Irrep::new(rng.random_range(0..=shape.lmax), parity(rng)),
        });
    }
    ProblemSpec {
        x: Irreps::new(x).to_string(),
        y: Irreps::new(y).to_string(),
        z: Irreps::new(z).to_string(),
        instructions,
    }
}

/// Haar-uniform proper rotation, optionally composed with inversion.
pub fn random_rotation(rng: &mut impl Rng, improper: bool) -> Rotation {
    let tau = std::f64::consts::TAU;
    let alpha = rng.random_range(0.0..tau);
    let beta = rng.random_range(-1.0f64..1.0).acos();
    let gamma = rng.random_range(0.0..tau);
    Rotation::new(alpha, beta, gamma).with_inversion(improper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_rms_is_exact() {
        let v = unit_rms(&mut rng(1), 1000);
        let rms = (v.iter().map(|a| a * a).sum::<f64>() / 1000.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        assert_eq!(v, unit_rms(&mut rng(1), 1000));
    }

    #[test]
    fn random_problems_validate() {
        let mut r = rng(9);
        for _ in 0..200 {
            let spec = random_problem(&mut r, ProblemShape::default());
            spec.validate().unwrap_or_else(|e| panic!("{spec:?}: {e}"));
        }
    }
}
