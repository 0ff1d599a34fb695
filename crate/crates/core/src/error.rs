use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrrepsError {
    #[error("malformed irreps token `{token}`: {reason}")]
    MalformedToken { token: String, reason: String },
    #[error("zero multiplicity in irreps token `{token}`")]
    ZeroMultiplicity { token: String },
    #[error("negative l in irreps token `{token}`")]
    NegativeL { token: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CgError {
    #[error("triangle rule violated: |{l1} - {l2}| <= {l3} <= {l1} + {l2} does not hold")]
    Triangle { l1: u32, l2: u32, l3: u32 },
    #[error("projection m={m} out of range for l={l}")]
    ProjectionOutOfRange { l: u32, m: i64 },
}

/// Shape disagreement between arrays handed to the engine, conv, or oracle.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape mismatch for `{name}`: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
pub struct ShapeError {
    pub name: &'static str,
    pub expected_rows: usize,
    pub expected_cols: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("problem must be split into lane-width chunks before scheduling (subkernel {subkernel} has {lanes} lanes > {lane_width})")]
    NotSplit {
        subkernel: usize,
        lanes: usize,
        lane_width: usize,
    },
    #[error("scratch budget of {budget} words is below the working set of subkernel {subkernel} ({label}: {needed} words)")]
    BudgetTooSmall {
        subkernel: usize,
        label: String,
        needed: usize,
        budget: usize,
    },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("schedule was built for a different problem")]
    ScheduleMismatch,
}

#[derive(Debug, Error)]
pub enum ConvError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("edges are not in strict CSR order at edge {edge}")]
    UnsortedEdges { edge: usize },
    #[error("edge {edge} references node {node} but the graph has {nodes} nodes")]
    NodeOutOfRange { edge: usize, node: usize, nodes: usize },
    #[error("transpose permutation has length {got}, graph has {expected} edges")]
    PermutationLength { expected: usize, got: usize },
    #[error("transpose permutation is not the CSR order of the transposed graph at position {position}")]
    BadPermutation { position: usize },
    #[error("graph json: {0}")]
    Json(String),
    #[error("xyz line {line}: {reason}")]
    Xyz { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("dense oracle would materialize {entries} entries (limit {limit})")]
    TooLarge { entries: usize, limit: usize },
}
