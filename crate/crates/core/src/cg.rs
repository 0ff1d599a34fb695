//! Real Clebsch-Gordan coefficient blocks.
//!
//! A block for `(l1, l2, l3)` is the complex Condon-Shortley coupling tensor
//! moved into the real basis of [`crate::irreps::real_basis_matrix`] on all three
//! modes. Blocks are normalized so that every output component `k` has a unit
//! norm slice: `sum_ij P[i,j,k] P[i,j,k'] = delta(k, k')`.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, RwLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::CgError;
use crate::irreps::{factorial, real_basis_matrix, IMAG_TOLERANCE};

/// Magnitude at or below which a coefficient is treated as a structural zero.
pub const ZERO_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgEntry {
    pub i: u16,
    pub j: u16,
    pub k: u16,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgBlock {
    pub l1: u32,
    pub l2: u32,
    pub l3: u32,
    /// Sorted by `(k, i, j)`.
    pub entries: Vec<CgEntry>,
}

impl CgBlock {
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            2 * self.l1 as usize + 1,
            2 * self.l2 as usize + 1,
            2 * self.l3 as usize + 1,
        )
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Dense `[i][j][k]` copy, mostly for tests and the dense oracle.
    pub fn to_dense(&self) -> Vec<f64> {
        let (d1, d2, d3) = self.dims();
        let mut out = vec![0.0; d1 * d2 * d3];
        for e in &self.entries {
            out[(e.i as usize * d2 + e.j as usize) * d3 + e.k as usize] = e.v;
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "l1": self.l1,
            "l2": self.l2,
            "l3": self.l3,
            "entries": self.entries.iter().map(|e| serde_json::json!([e.i, e.j, e.k, e.v])).collect::<Vec<_>>(),
        })
    }
}

pub fn triangle_ok(l1: u32, l2: u32, l3: u32) -> bool {
    l1.abs_diff(l2) <= l3 && l3 <= l1 + l2
}

/// `<l1 m1 l2 m2 | l3 m3>` by the Racah formula.
pub fn complex_cg(l1: u32, l2: u32, l3: u32, m1: i64, m2: i64, m3: i64) -> Result<f64, CgError> {
    if !triangle_ok(l1, l2, l3) {
        return Err(CgError::Triangle { l1, l2, l3 });
    }
    for (l, m) in [(l1, m1), (l2, m2), (l3, m3)] {
        if m.unsigned_abs() > l as u64 {
            return Err(CgError::ProjectionOutOfRange { l, m });
        }
    }
    if m1 + m2 != m3 {
        return Ok(0.0);
    }
    let (j1, j2, j3) = (l1 as i64, l2 as i64, l3 as i64);
    let f = factorial;
    let norm = ((2 * j3 + 1) as f64 * f(j3 + j1 - j2) * f(j3 - j1 + j2) * f(j1 + j2 - j3)
        / f(j1 + j2 + j3 + 1))
    .sqrt();
    let prod = (f(j3 + m3) * f(j3 - m3) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)).sqrt();
    let k_min = 0.max(j2 - j3 - m1).max(j1 - j3 + m2);
    let k_max = (j1 + j2 - j3).min(j1 - m1).min(j2 + m2);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign
            / (f(k)
                * f(j1 + j2 - j3 - k)
                * f(j1 - m1 - k)
                * f(j2 + m2 - k)
                * f(j3 - j2 + m1 + k)
                * f(j3 - j1 - m2 + k));
    }
    Ok(norm * prod * sum)
}

fn build_block(l1: u32, l2: u32, l3: u32) -> CgBlock {
    let (d1, d2, d3) = (
        2 * l1 as usize + 1,
        2 * l2 as usize + 1,
        2 * l3 as usize + 1,
    );
    let (u1, u2, u3) = (real_basis_matrix(l1), real_basis_matrix(l2), real_basis_matrix(l3));
    let (li1, li2, li3) = (l1 as i64, l2 as i64, l3 as i64);

    // Nonzero complex couplings only: m3 = m1 + m2.
    let mut couplings = Vec::new();
    for m1 in -li1..=li1 {
        for m2 in -li2..=li2 {
            let m3 = m1 + m2;
            if m3.abs() > li3 {
                continue;
            }
            let c = complex_cg(l1, l2, l3, m1, m2, m3).expect("triangle checked by caller");
            if c != 0.0 {
                couplings.push(((m1 + li1) as usize, (m2 + li2) as usize, (m3 + li3) as usize, c));
            }
        }
    }

    // x_c = U^dagger x_r on the inputs, z_r = U z_c on the output.
    let mut dense = vec![Complex64::new(0.0, 0.0); d1 * d2 * d3];
    for k in 0..d3 {
        for i in 0..d1 {
            for j in 0..d2 {
                let mut acc = Complex64::new(0.0, 0.0);
                for &(a, b, c, v) in &couplings {
                    let w = u1[(i, a)].conj() * u2[(j, b)].conj() * u3[(k, c)];
                    if w.re != 0.0 || w.im != 0.0 {
                        acc += w * v;
                    }
                }
                dense[(i * d2 + j) * d3 + k] = acc;
            }
        }
    }

    // Global phase: first entry (in (k, i, j) order) of maximal magnitude becomes real positive.
    let max_abs = dense.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut pivot = Complex64::new(1.0, 0.0);
    'search: for k in 0..d3 {
        for i in 0..d1 {
            for j in 0..d2 {
                let c = dense[(i * d2 + j) * d3 + k];
                if c.norm() >= max_abs - ZERO_THRESHOLD {
                    pivot = c;
                    break 'search;
                }
            }
        }
    }
    let phase = pivot.conj() / pivot.norm();

    let mut real = vec![0.0; d1 * d2 * d3];
    for (dst, c) in real.iter_mut().zip(&dense) {
        let r = c * phase;
        assert!(
            r.im.abs() <= IMAG_TOLERANCE,
            "CG block ({l1},{l2},{l3}) keeps imaginary residue {:e}",
            r.im
        );
        *dst = if r.re.abs() <= ZERO_THRESHOLD { 0.0 } else { r.re };
    }

    let mut entries = Vec::new();
    for k in 0..d3 {
        let norm = (0..d1 * d2)
            .map(|ij| real[ij * d3 + k].powi(2))
            .sum::<f64>()
            .sqrt();
        for i in 0..d1 {
            for j in 0..d2 {
                let v = real[(i * d2 + j) * d3 + k];
                if v != 0.0 {
                    entries.push(CgEntry {
                        i: i as u16,
                        j: j as u16,
                        k: k as u16,
                        v: v / norm,
                    });
                }
            }
        }
    }
    CgBlock { l1, l2, l3, entries }
}

static BLOCK_CACHE: LazyLock<RwLock<HashMap<(u32, u32, u32), Arc<CgBlock>>>> =
    LazyLock::new(|| RwLock::new(HashMap::new()));

/// Real CG block for `(l1, l2, l3)`, memoized process-wide.
pub fn cg_block(l1: u32, l2: u32, l3: u32) -> Result<Arc<CgBlock>, CgError> {
    if !triangle_ok(l1, l2, l3) {
        return Err(CgError::Triangle { l1, l2, l3 });
    }
    let key = (l1, l2, l3);
    if let Some(b) = BLOCK_CACHE.read().expect("cg cache poisoned").get(&key) {
        return Ok(Arc::clone(b));
    }
    let block = Arc::new(build_block(l1, l2, l3));
    let mut cache = BLOCK_CACHE.write().expect("cg cache poisoned");
    Ok(Arc::clone(cache.entry(key).or_insert(block)))
}

/// Fraction of structural zeros in the dense `(2l1+1)(2l2+1)(2l3+1)` block.
pub fn block_sparsity(b: &CgBlock) -> f64 {
    let (d1, d2, d3) = b.dims();
    1.0 - b.entries.len() as f64 / (d1 * d2 * d3) as f64
}
