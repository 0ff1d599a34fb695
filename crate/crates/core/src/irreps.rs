//! O(3) irreducible representations: the `<mult>x<l><e|o>` notation, feature
//! vector segmentation, and real block-diagonal representation matrices.
//!
//! Conventions used throughout the crate:
//!
//! * Rotations are intrinsic ZYZ Euler angles, `R = Rz(alpha) Ry(beta) Rz(gamma)`,
//!   optionally followed by inversion (`improper`).
//! * The complex Wigner matrix is `D[m', m] = exp(-i m' alpha) d[m', m](beta) exp(-i m gamma)`
//!   with rows/columns ordered `m = -l..=l`.
//! * Real components are ordered `m = -l..=l` as well. For `l = 1` this is the
//!   Cartesian order `(y, z, x)`, so the real `l = 1` block equals the 3x3 rotation
//!   matrix permuted into that order.
//! * Inversion multiplies every odd-parity block by `-1` regardless of `l`.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use nalgebra::DMatrix;
use num_bigint::BigUint;
use num_complex::Complex64;
use num_traits::ToPrimitive;

use crate::error::IrrepsError;

/// Largest residual imaginary part tolerated when a complex construction is
/// reduced to a real matrix.
pub const IMAG_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }

    /// Parity of a product of two features.
    pub fn product(self, other: Parity) -> Parity {
        if self == other {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    fn suffix(self) -> char {
        match self {
            Parity::Even => 'e',
            Parity::Odd => 'o',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Irrep {
    pub l: u32,
    pub parity: Parity,
}

impl Irrep {
    pub fn new(l: u32, parity: Parity) -> Self {
        Self { l, parity }
    }

    pub fn dim(self) -> usize {
        2 * self.l as usize + 1
    }
}

impl fmt::Display for Irrep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.l, self.parity.suffix())
    }
}

/// One `mult x irrep` block of an [`Irreps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MulIrrep {
    pub mul: usize,
    pub ir: Irrep,
}

impl MulIrrep {
    pub fn dim(self) -> usize {
        self.mul * self.ir.dim()
    }
}

/// A located block of a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub mul: usize,
    pub ir: Irrep,
}

impl Segment {
    pub fn dim(&self) -> usize {
        self.mul * self.ir.dim()
    }

    pub fn end(&self) -> usize {
        self.offset + self.dim()
    }
}

/// Ordered list of blocks. Adjacent identical irreps are never merged.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Irreps {
    blocks: Vec<MulIrrep>,
}

impl Irreps {
    pub fn new(blocks: Vec<MulIrrep>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[MulIrrep] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn lmax(&self) -> Option<u32> {
        self.blocks.iter().map(|b| b.ir.l).max()
    }

    /// Blocks with their offsets into the flattened feature vector.
    pub fn segments(&self) -> Vec<Segment> {
        let mut offset = 0;
        self.blocks
            .iter()
            .map(|b| {
                let seg = Segment {
                    offset,
                    mul: b.mul,
                    ir: b.ir,
                };
                offset += b.dim();
                seg
            })
            .collect()
    }

    /// Zero-based segment lookup.
    pub fn segment(&self, index: usize) -> Option<Segment> {
        if index >= self.blocks.len() {
            return None;
        }
        let offset = self.blocks[..index].iter().map(|b| b.dim()).sum();
        let b = self.blocks[index];
        Some(Segment {
            offset,
            mul: b.mul,
            ir: b.ir,
        })
    }
}

impl fmt::Display for Irreps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, b) in self.blocks.iter().enumerate() {
            if n > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{}x{}", b.mul, b.ir)?;
        }
        Ok(())
    }
}

impl FromStr for Irreps {
    type Err = IrrepsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_irreps(s)
    }
}

impl serde::Serialize for Irreps {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for Irreps {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_irreps(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses `"32x2e + 32x1e"`-style text. An empty (or all-whitespace) string
/// is the empty representation.
pub fn parse_irreps(text: &str) -> Result<Irreps, IrrepsError> {
    if text.trim().is_empty() {
        return Ok(Irreps::default());
    }
    text.split('+')
        .map(|raw| parse_block(raw.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map(Irreps::new)
}

fn parse_block(token: &str) -> Result<MulIrrep, IrrepsError> {
    let malformed = |reason: &str| IrrepsError::MalformedToken {
        token: token.to_string(),
        reason: reason.to_string(),
    };
    let (mul_text, rest) = token
        .split_once('x')
        .ok_or_else(|| malformed("expected `<mult>x<l><e|o>`"))?;
    if mul_text.is_empty() || !mul_text.bytes().all(|c| c.is_ascii_digit()) {
        return Err(malformed("multiplicity must be an unsigned integer"));
    }
    let mul: usize = mul_text
        .parse()
        .map_err(|_| malformed("multiplicity out of range"))?;
    if mul == 0 {
        return Err(IrrepsError::ZeroMultiplicity {
            token: token.to_string(),
        });
    }
    let parity = match rest.chars().last() {
        Some('e') => Parity::Even,
        Some('o') => Parity::Odd,
        _ => return Err(malformed("missing parity suffix `e` or `o`")),
    };
    let l_text = &rest[..rest.len() - 1];
    if l_text.starts_with('-') {
        return Err(IrrepsError::NegativeL {
            token: token.to_string(),
        });
    }
    if l_text.is_empty() || !l_text.bytes().all(|c| c.is_ascii_digit()) {
        return Err(malformed("l must be an unsigned integer"));
    }
    let l: u32 = l_text.parse().map_err(|_| malformed("l out of range"))?;
    Ok(MulIrrep {
        mul,
        ir: Irrep::new(l, parity),
    })
}

pub fn irreps_dim(ir: &Irreps) -> usize {
    ir.dim()
}

/// Element of O(3): a ZYZ rotation, optionally composed with inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub improper: bool,
}

type Mat3 = [[f64; 3]; 3];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

impl Rotation {
    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            improper: false,
        }
    }

    pub fn inversion() -> Self {
        Self {
            improper: true,
            ..Self::identity()
        }
    }

    pub fn with_inversion(self, improper: bool) -> Self {
        Self { improper, ..self }
    }

    /// Proper 3x3 rotation part `Rz(alpha) Ry(beta) Rz(gamma)`.
    pub fn rotation_matrix(&self) -> Mat3 {
        mat3_mul(
            &mat3_mul(&rot_z(self.alpha), &rot_y(self.beta)),
            &rot_z(self.gamma),
        )
    }

    /// Full O(3) matrix, including the inversion sign.
    pub fn matrix(&self) -> Mat3 {
        let mut m = self.rotation_matrix();
        if self.improper {
            for v in m.iter_mut().flatten() {
                *v = -*v;
            }
        }
        m
    }

    /// ZYZ angles of a proper rotation matrix.
    pub fn from_rotation_matrix(m: &Mat3, improper: bool) -> Self {
        let sin_beta = (m[0][2] * m[0][2] + m[1][2] * m[1][2]).sqrt();
        let beta = sin_beta.atan2(m[2][2]);
        let (alpha, gamma) = if sin_beta > 1e-9 {
            (m[1][2].atan2(m[0][2]), m[2][1].atan2(-m[2][0]))
        } else if m[2][2] > 0.0 {
            (m[1][0].atan2(m[0][0]), 0.0)
        } else {
            ((-m[1][0]).atan2(m[1][1]), 0.0)
        };
        Self {
            alpha,
            beta,
            gamma,
            improper,
        }
    }

    /// Group product `self * other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let m = mat3_mul(&self.rotation_matrix(), &other.rotation_matrix());
        Rotation::from_rotation_matrix(&m, self.improper ^ other.improper)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation {
            alpha: -self.gamma,
            beta: -self.beta,
            gamma: -self.alpha,
            improper: self.improper,
        }
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

const FACTORIAL_TABLE_LEN: usize = 171;

/// `n!` for `n <= 170`, computed exactly and rounded to `f64` once.
static FACTORIALS: LazyLock<Vec<f64>> = LazyLock::new(|| {
    let mut acc = BigUint::from(1u32);
    let mut table = Vec::with_capacity(FACTORIAL_TABLE_LEN);
    table.push(1.0);
    for n in 1..FACTORIAL_TABLE_LEN {
        acc *= n as u32;
        table.push(acc.to_f64().unwrap_or(f64::INFINITY));
    }
    table
});

pub(crate) fn factorial(n: i64) -> f64 {
    assert!(n >= 0, "factorial of negative integer {n}");
    FACTORIALS[n as usize]
}

/// Wigner small-d matrix element `d[m', m](beta)` by the explicit factorial sum.
pub fn wigner_small_d(l: u32, mp: i64, m: i64, beta: f64) -> f64 {
    let l = l as i64;
    let (s_half, c_half) = (beta / 2.0).sin_cos();
    let prefactor =
        (factorial(l + mp) * factorial(l - mp) * factorial(l + m) * factorial(l - m)).sqrt();
    let k_min = 0.max(m - mp);
    let k_max = (l + m).min(l - mp);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let sign = if (mp - m + k) % 2 == 0 { 1.0 } else { -1.0 };
        let denom = factorial(l + m - k) * factorial(k) * factorial(mp - m + k) * factorial(l - mp - k);
        let cos_pow = (2 * l + m - mp - 2 * k) as i32;
        let sin_pow = (mp - m + 2 * k) as i32;
        sum += sign * c_half.powi(cos_pow) * s_half.powi(sin_pow) / denom;
    }
    prefactor * sum
}

/// Complex Wigner D matrix, rows and columns ordered `m = -l..=l`.
pub fn wigner_d_complex(l: u32, g: &Rotation) -> DMatrix<Complex64> {
    let n = 2 * l as usize + 1;
    let li = l as i64;
    DMatrix::from_fn(n, n, |r, c| {
        let mp = r as i64 - li;
        let m = c as i64 - li;
        let phase = Complex64::from_polar(1.0, -(mp as f64) * g.alpha - (m as f64) * g.gamma);
        phase * wigner_small_d(l, mp, m, g.beta)
    })
}

/// Unitary change of basis taking complex spherical-harmonic coefficients to
/// real ones: `x_real = U x_complex`.
pub fn real_basis_matrix(l: u32) -> DMatrix<Complex64> {
    let n = 2 * l as usize + 1;
    let li = l as i64;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut u = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let idx = |m: i64| (m + li) as usize;
    u[(idx(0), idx(0))] = Complex64::new(1.0, 0.0);
    for m in 1..=li {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        // cosine-like component (+m)
        u[(idx(m), idx(-m))] = Complex64::new(h, 0.0);
        u[(idx(m), idx(m))] = Complex64::new(sign * h, 0.0);
        // sine-like component (-m)
        u[(idx(-m), idx(-m))] = Complex64::new(0.0, -h);
        u[(idx(-m), idx(m))] = Complex64::new(0.0, sign * h);
    }
    u
}

/// Conjugates `d` into the real basis and drops the imaginary residue.
fn to_real(l: u32, d: &DMatrix<Complex64>) -> DMatrix<f64> {
    let u = real_basis_matrix(l);
    let real = &u * d * u.adjoint();
    let residue = real.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    assert!(
        residue <= IMAG_TOLERANCE,
        "real Wigner-D for l={l} has imaginary residue {residue:e}"
    );
    real.map(|c| c.re)
}

/// Real Wigner D matrix of the proper rotation part of `g`.
pub fn wigner_d_real(l: u32, g: &Rotation) -> DMatrix<f64> {
    to_real(l, &wigner_d_complex(l, g))
}

/// Block-diagonal real representation of `g` acting on features laid out by `ir`.
pub fn rep_matrix(ir: &Irreps, g: &Rotation) -> DMatrix<f64> {
    let n = ir.dim();
    let mut out = DMatrix::zeros(n, n);
    for seg in ir.segments() {
        let mut block = wigner_d_real(seg.ir.l, g);
        if g.improper && seg.ir.parity == Parity::Odd {
            block.neg_mut();
        }
        let d = seg.ir.dim();
        for copy in 0..seg.mul {
            let at = seg.offset + copy * d;
            out.view_mut((at, at), (d, d)).copy_from(&block);
        }
    }
    out
}
