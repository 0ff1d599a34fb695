//! Tensor-product problem descriptions: three irreps plus a list of
//! `(x_seg, y_seg, z_seg, kind)` instructions, validated and resolved into
//! offsets and a compressed weight layout.
//!
//! Weight layout: instructions are concatenated in order. Kind B stores its `b`
//! diagonal entries; kind C stores a dense `b x b'` matrix row-major (`b` rows
//! indexed by the z multiplicity, `b'` columns by the x multiplicity).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cg::{cg_block, triangle_ok, CgBlock};
use crate::error::IrrepsError;
use crate::irreps::{parse_irreps, Irreps, Parity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    /// Diagonal weights shared across a common y segment.
    B,
    /// Dense `b x b'` weights.
    C,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::B => "B",
            KernelKind::C => "C",
        })
    }
}

/// Segment indices are 1-based, as in the textual problem format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub x_seg: usize,
    pub y_seg: usize,
    pub z_seg: usize,
    pub kind: KernelKind,
}

impl Instruction {
    pub fn new(x_seg: usize, y_seg: usize, z_seg: usize, kind: KernelKind) -> Self {
        Self {
            x_seg,
            y_seg,
            z_seg,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    SegmentOutOfRange {
        operand: char,
        seg: usize,
        count: usize,
    },
    MultiplicityMismatch {
        x_mul: usize,
        z_mul: usize,
    },
    UnsupportedYMultiplicity {
        y_mul: usize,
    },
    Triangle {
        lx: u32,
        ly: u32,
        lz: u32,
    },
    Parity {
        px: Parity,
        py: Parity,
        pz: Parity,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Zero-based position in the instruction list.
    pub instruction: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "instruction {}: ", self.instruction + 1)?;
        match &self.kind {
            ViolationKind::SegmentOutOfRange { operand, seg, count } => {
                write!(f, "{operand} segment {seg} out of range (1..={count})")
            }
            ViolationKind::MultiplicityMismatch { x_mul, z_mul } => write!(
                f,
                "kind B needs equal x and z multiplicities, got {x_mul} and {z_mul}"
            ),
            ViolationKind::UnsupportedYMultiplicity { y_mul } => write!(
                f,
                "unsupported: y segment multiplicity {y_mul} (only 1 is supported)"
            ),
            ViolationKind::Triangle { lx, ly, lz } => {
                write!(f, "triangle rule violated for l = ({lx}, {ly}, {lz})")
            }
            ViolationKind::Parity { px, py, pz } => {
                write!(f, "parity rule violated: {px:?} x {py:?} -> {pz:?}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct Violations(pub Vec<Violation>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, v) in self.0.iter().enumerate() {
            if n > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// One executable unit: an instruction, or a lane-width chunk of one.
///
/// Lane `t` reads x row `t` starting at `x_offset + t * (2 l_x + 1)`. The z tile
/// has `z_rows` rows. For kind B `x_rows == z_rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subkernel {
    pub instruction: usize,
    pub kind: KernelKind,
    pub block: Arc<CgBlock>,
    pub x_offset: usize,
    pub y_offset: usize,
    pub z_offset: usize,
    /// `b'`: number of x rows (active lanes).
    pub x_rows: usize,
    /// `b`: number of z rows.
    pub z_rows: usize,
    /// Offset into the compiled weight layout.
    pub w_offset: usize,
    /// First z row / x column of the originating instruction covered by this chunk.
    pub row_start: usize,
    pub col_start: usize,
}

impl Subkernel {
    pub fn x_dim(&self) -> usize {
        2 * self.block.l1 as usize + 1
    }

    pub fn y_dim(&self) -> usize {
        2 * self.block.l2 as usize + 1
    }

    pub fn z_dim(&self) -> usize {
        2 * self.block.l3 as usize + 1
    }

    pub fn x_len(&self) -> usize {
        self.x_rows * self.x_dim()
    }

    pub fn z_len(&self) -> usize {
        self.z_rows * self.z_dim()
    }

    pub fn w_count(&self) -> usize {
        match self.kind {
            KernelKind::B => self.z_rows,
            KernelKind::C => self.z_rows * self.x_rows,
        }
    }

    pub fn lanes(&self) -> usize {
        self.x_rows.max(self.z_rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedProblem {
    pub x: Irreps,
    pub y: Irreps,
    pub z: Irreps,
    pub instructions: Vec<Instruction>,
    pub subkernels: Vec<Subkernel>,
    pub total_weights: usize,
    /// Compiled weight index -> caller weight index. `None` means identity.
    pub weight_map: Option<Vec<usize>>,
    /// Set once the problem has been split to this lane width.
    pub lane_width: Option<usize>,
}

impl ValidatedProblem {
    pub fn dim_x(&self) -> usize {
        self.x.dim()
    }

    pub fn dim_y(&self) -> usize {
        self.y.dim()
    }

    pub fn dim_z(&self) -> usize {
        self.z.dim()
    }

    /// Weight offset and count of each original instruction in the caller layout.
    pub fn instruction_weights(&self) -> Vec<(usize, usize)> {
        let xs = self.x.segments();
        let zs = self.z.segments();
        let mut offset = 0;
        self.instructions
            .iter()
            .map(|ins| {
                let (b_prime, b) = (xs[ins.x_seg - 1].mul, zs[ins.z_seg - 1].mul);
                let count = match ins.kind {
                    KernelKind::B => b,
                    KernelKind::C => b * b_prime,
                };
                let out = (offset, count);
                offset += count;
                out
            })
            .collect()
    }

    /// Caller-layout weight index for a compiled index.
    pub fn caller_weight_index(&self, compiled: usize) -> usize {
        match &self.weight_map {
            Some(map) => map[compiled],
            None => compiled,
        }
    }
}

/// Validates and resolves a problem. Every instruction is checked; all
/// violations are reported together.
pub fn validate(
    x: &Irreps,
    y: &Irreps,
    z: &Irreps,
    instructions: &[Instruction],
) -> Result<ValidatedProblem, Violations> {
    let (xs, ys, zs) = (x.segments(), y.segments(), z.segments());
    let mut violations = Vec::new();
    let mut subkernels = Vec::with_capacity(instructions.len());
    let mut w_offset = 0;

    for (n, ins) in instructions.iter().enumerate() {
        let mut bad = |kind| violations.push(Violation { instruction: n, kind });
        let lookup = |segs: &[crate::irreps::Segment], seg: usize| {
            if seg >= 1 && seg <= segs.len() {
                Some(segs[seg - 1])
            } else {
                None
            }
        };
        let (sx, sy, sz) = (lookup(&xs, ins.x_seg), lookup(&ys, ins.y_seg), lookup(&zs, ins.z_seg));
        for (operand, seg, count, found) in [
            ('x', ins.x_seg, xs.len(), sx.is_some()),
            ('y', ins.y_seg, ys.len(), sy.is_some()),
            ('z', ins.z_seg, zs.len(), sz.is_some()),
        ] {
            if !found {
                bad(ViolationKind::SegmentOutOfRange { operand, seg, count });
            }
        }
        let (Some(sx), Some(sy), Some(sz)) = (sx, sy, sz) else {
            continue;
        };
        let mut ok = true;
        if sy.mul != 1 {
            bad(ViolationKind::UnsupportedYMultiplicity { y_mul: sy.mul });
            ok = false;
        }
        if ins.kind == KernelKind::B && sx.mul != sz.mul {
            bad(ViolationKind::MultiplicityMismatch {
                x_mul: sx.mul,
                z_mul: sz.mul,
            });
            ok = false;
        }
        let (lx, ly, lz) = (sx.ir.l, sy.ir.l, sz.ir.l);
        if !triangle_ok(lx, ly, lz) {
            bad(ViolationKind::Triangle { lx, ly, lz });
            ok = false;
        }
        if sx.ir.parity.product(sy.ir.parity) != sz.ir.parity {
            bad(ViolationKind::Parity {
                px: sx.ir.parity,
                py: sy.ir.parity,
                pz: sz.ir.parity,
            });
            ok = false;
        }
        if !ok {
            continue;
        }
        let block = cg_block(lx, ly, lz).expect("triangle rule checked above");
        let sk = Subkernel {
            instruction: n,
            kind: ins.kind,
            block,
            x_offset: sx.offset,
            y_offset: sy.offset,
            z_offset: sz.offset,
            x_rows: sx.mul,
            z_rows: sz.mul,
            w_offset,
            row_start: 0,
            col_start: 0,
        };
        w_offset += sk.w_count();
        subkernels.push(sk);
    }

    if !violations.is_empty() {
        return Err(Violations(violations));
    }
    Ok(ValidatedProblem {
        x: x.clone(),
        y: y.clone(),
        z: z.clone(),
        instructions: instructions.to_vec(),
        subkernels,
        total_weights: w_offset,
        weight_map: None,
        lane_width: None,
    })
}

/// `(dim_x, dim_y, dim_z, total_weights)`.
pub fn problem_dims(p: &ValidatedProblem) -> (usize, usize, usize, usize) {
    (p.dim_x(), p.dim_y(), p.dim_z(), p.total_weights)
}

/// JSON problem description, the CLI's canonical input:
/// `{"x": "...", "y": "...", "z": "...", "instructions": [[1, 1, 1, "B"], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub x: String,
    pub y: String,
    pub z: String,
    pub instructions: Vec<(usize, usize, usize, KernelKind)>,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("invalid problem JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("irreps `{operand}`: {source}")]
    Irreps {
        operand: char,
        #[source]
        source: IrrepsError,
    },
    #[error("{0}")]
    Invalid(#[from] Violations),
}

impl ProblemSpec {
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem spec serializes")
    }

    pub fn validate(&self) -> Result<ValidatedProblem, SpecError> {
        let parse = |operand, text: &str| {
            parse_irreps(text).map_err(|source| SpecError::Irreps { operand, source })
        };
        let (x, y, z) = (parse('x', &self.x)?, parse('y', &self.y)?, parse('z', &self.z)?);
        let instrs: Vec<_> = self
            .instructions
            .iter()
            .map(|&(xs, ys, zs, kind)| Instruction::new(xs, ys, zs, kind))
            .collect();
        Ok(validate(&x, &y, &z, &instrs)?)
    }

    pub fn from_problem(p: &ValidatedProblem) -> Self {
        Self {
            x: p.x.to_string(),
            y: p.y.to_string(),
            z: p.z.to_string(),
            instructions: p
                .instructions
                .iter()
                .map(|i| (i.x_seg, i.y_seg, i.z_seg, i.kind))
                .collect(),
        }
    }
}

/// The worked example used throughout the docs and tests:
/// `x = 32x2e + 32x1e`, `y = 1x3e + 1x1e`, `z = 32x5e + 16x2e + 32x3e`.
pub fn example_problem() -> ProblemSpec {
    ProblemSpec {
        x: "32x2e + 32x1e".into(),
        y: "1x3e + 1x1e".into(),
        z: "32x5e + 16x2e + 32x3e".into(),
        instructions: vec![
            (1, 1, 1, KernelKind::B),
            (1, 2, 2, KernelKind::C),
            (1, 2, 3, KernelKind::C),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ir(s: &str) -> Irreps {
        parse_irreps(s).unwrap()
    }

    #[test]
    fn example_weight_count_and_dims() {
        let p = example_problem().validate().unwrap();
        // B: 32 diagonal; C: 16x32; C: 32x32
        assert_eq!(p.total_weights, 32 + 16 * 32 + 32 * 32);
        assert_eq!(p.total_weights, 1568);
        // x: 32*5 + 32*3, y: 7 + 3, z: 32*11 + 16*5 + 32*7
        assert_eq!(problem_dims(&p), (256, 10, 656, 1568));
        assert_eq!(p.instruction_weights(), vec![(0, 32), (32, 512), (544, 1024)]);
        let offs: Vec<_> = p.subkernels.iter().map(|s| s.w_offset).collect();
        assert_eq!(offs, vec![0, 32, 544]);
        assert_eq!(p.subkernels[1].x_rows, 32);
        assert_eq!(p.subkernels[1].z_rows, 16);
        assert_eq!(p.subkernels[2].z_offset, 432);
    }

    #[test]
    fn parity_violation() {
        let err = validate(&ir("1x1e"), &ir("1x1e"), &ir("1x1o"), &[Instruction::new(1, 1, 1, KernelKind::B)])
            .unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert!(matches!(err.0[0].kind, ViolationKind::Parity { .. }));
        assert_eq!(err.0[0].instruction, 0);
    }

    #[test]
    fn triangle_violation() {
        let err = validate(&ir("1x0e"), &ir("1x0e"), &ir("1x1e"), &[Instruction::new(1, 1, 1, KernelKind::B)])
            .unwrap_err();
        assert_eq!(err.0[0].kind, ViolationKind::Triangle { lx: 0, ly: 0, lz: 1 });
    }

    #[test]
    fn reports_every_violation_with_index() {
        let err = validate(
            &ir("4x1e + 2x0e"),
            &ir("1x1e + 2x0e"),
            &ir("2x1e"),
            &[
                Instruction::new(1, 1, 1, KernelKind::C),
                Instruction::new(3, 1, 1, KernelKind::B),
                Instruction::new(1, 1, 1, KernelKind::B),
                Instruction::new(2, 2, 1, KernelKind::C),
            ],
        )
        .unwrap_err();
        let idx: Vec<_> = err.0.iter().map(|v| v.instruction).collect();
        assert_eq!(idx, vec![1, 2, 3, 3]);
        assert!(matches!(err.0[0].kind, ViolationKind::SegmentOutOfRange { operand: 'x', seg: 3, count: 2 }));
        assert!(matches!(err.0[1].kind, ViolationKind::MultiplicityMismatch { x_mul: 4, z_mul: 2 }));
        assert!(matches!(err.0[2].kind, ViolationKind::UnsupportedYMultiplicity { y_mul: 2 }));
        assert!(matches!(err.0[3].kind, ViolationKind::Triangle { .. }));
        assert!(err.to_string().lines().count() == 4);
    }

    #[test]
    fn empty_and_scalar_dims() {
        let p = validate(&ir("2x1e"), &ir("1x0e"), &ir("3x2o"), &[]).unwrap();
        assert_eq!(problem_dims(&p), (6, 1, 15, 0));
        let s = ir("1x0e");
        let p = validate(&s, &s, &s, &[Instruction::new(1, 1, 1, KernelKind::B)]).unwrap();
        assert_eq!(problem_dims(&p), (1, 1, 1, 1));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = example_problem();
        let text = spec.to_json();
        assert!(text.contains("\"B\""));
        assert_eq!(ProblemSpec::from_json(&text).unwrap(), spec);
        let raw = r#"{"x":"1x0e","y":"1x0e","z":"1x0e","instructions":[[1,1,1,"B"]]}"#;
        assert_eq!(ProblemSpec::from_json(raw).unwrap().validate().unwrap().total_weights, 1);
    }

    #[test]
    fn spec_irreps_error_names_operand() {
        let mut spec = example_problem();
        spec.y = "1x3e + 1xqe".into();
        match spec.validate() {
            Err(SpecError::Irreps { operand: 'y', source }) => assert!(source.to_string().contains("1xqe")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multiple_writers_accumulate_into_same_segment() {
        let p = validate(
            &ir("2x1e + 2x2e"),
            &ir("1x1e"),
            &ir("2x1e"),
            &[
                Instruction::new(1, 1, 1, KernelKind::B),
                Instruction::new(2, 1, 1, KernelKind::C),
            ],
        )
        .unwrap();
        assert_eq!(p.subkernels[0].z_offset, p.subkernels[1].z_offset);
        assert_eq!(p.total_weights, 2 + 4);
    }
}
