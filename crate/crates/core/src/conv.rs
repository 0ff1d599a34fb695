//! Tensor product fused with graph convolution.
//!
//! Edge `(i, j)` carries node `j`'s features into node `i`:
//! `z[i] = sum over edges (i, j, e) of TP(x[j], y[e], W[e])`.
//! Edges are kept in CSR order, sorted by `i` then `j`.
//!
//! The fused pass runs the schedule's phases outermost and the edges inside
//! each phase. Edges are cut into a fixed number of contiguous logical warps;
//! a warp keeps a running accumulator for its current node and flushes it when
//! the node changes. The first node of every warp goes to a fixup buffer that
//! is applied after the phase in ascending warp order, so the output does not
//! depend on how warps are spread over threads.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::engine::{check, Engine};
use crate::error::{ConvError, EngineError, ScheduleError};
use crate::kernelgen::{
    eliminate_redundant_loads, flop_count, gen_backward, gen_forward, specialize, Bindings, KernelIR, Operand,
    SpecializedKernel, DEFAULT_LANE_WIDTH,
};
use crate::real::Real;
use crate::scheduler::{build_schedule, problem_fingerprint, split_multiplicities, Phase, Schedule, Space};
use crate::tpspec::ValidatedProblem;

/// Number of contiguous edge ranges the deterministic pass is cut into.
pub const LOGICAL_WARPS: usize = 256;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Geometry {
    pub species: Vec<String>,
    pub positions: Vec<[f64; 3]>,
}

impl Geometry {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn xyz_error(line: usize, reason: impl Into<String>) -> ConvError {
    ConvError::Xyz {
        line,
        reason: reason.into(),
    }
}

/// Parses XYZ text: a count line, a comment line, then `El x y z` rows.
pub fn parse_xyz(text: &str) -> Result<Geometry, ConvError> {
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
    let (_, first) = lines.next().ok_or_else(|| xyz_error(1, "missing atom count"))?;
    let count: usize = first
        .trim()
        .parse()
        .map_err(|_| xyz_error(1, format!("malformed atom count {:?}", first.trim())))?;
    lines.next();
    let mut geo = Geometry::default();
    for (n, line) in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if geo.len() == count {
            return Err(xyz_error(n, format!("more atom rows than the declared count {count}")));
        }
        if tokens.len() < 4 {
            return Err(xyz_error(n, "expected an element and three coordinates"));
        }
        let mut r = [0.0; 3];
        for (slot, tok) in r.iter_mut().zip(&tokens[1..4]) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| xyz_error(n, format!("non-numeric coordinate {tok:?}")))?;
        }
        geo.species.push(tokens[0].to_string());
        geo.positions.push(r);
    }
    if geo.len() != count {
        let last = text.lines().count().max(1);
        return Err(xyz_error(
            last,
            format!("declared {count} atoms but found {}", geo.len()),
        ));
    }
    Ok(geo)
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<Geometry, ConvError> {
    parse_xyz(&std::fs::read_to_string(path)?)
}

/// Directed graph in CSR form. `row_ptr[i]..row_ptr[i + 1]` indexes the edges
/// whose first node is `i` once the edges are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphCSR {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub row_ptr: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: usize,
    edges: Vec<[usize; 2]>,
}

impl GraphCSR {
    /// Keeps the given edge order; self-loops are allowed here.
    pub fn from_edges(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Self, ConvError> {
        for (e, &(i, j)) in edges.iter().enumerate() {
            for node in [i, j] {
                if node >= node_count {
                    return Err(ConvError::NodeOutOfRange {
                        edge: e,
                        node,
                        nodes: node_count,
                    });
                }
            }
        }
        let mut row_ptr = vec![0; node_count + 1];
        for &(i, _) in &edges {
            row_ptr[i + 1] += 1;
        }
        for i in 0..node_count {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            node_count,
            edges,
            row_ptr,
        })
    }

    /// Sorted, deduplicated copy.
    pub fn sorted(&self) -> Self {
        let mut edges = self.edges.clone();
        edges.sort_unstable();
        edges.dedup();
        Self::from_edges(self.node_count, edges).expect("nodes already checked")
    }

    /// First edge index that breaks strict CSR order.
    pub fn first_unsorted(&self) -> Option<usize> {
        self.edges.windows(2).position(|w| w[0] >= w[1]).map(|e| e + 1)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Every edge reversed, in CSR order.
    pub fn transpose(&self) -> Self {
        let mut edges: Vec<(usize, usize)> = self.edges.iter().map(|&(i, j)| (j, i)).collect();
        edges.sort_unstable();
        Self::from_edges(self.node_count, edges).expect("nodes already checked")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphJson {
            nodes: self.node_count,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
        })
        .expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConvError> {
        let g: GraphJson = serde_json::from_str(text).map_err(|e| ConvError::Json(e.to_string()))?;
        Self::from_edges(g.nodes, g.edges.into_iter().map(|[i, j]| (i, j)).collect())
    }
}

/// `perm[e]` is the position of edge `e`, reversed, in the CSR order of the
/// transposed graph.
pub fn transpose_permutation(g: &GraphCSR) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.edges.len()).collect();
    order.sort_by_key(|&e| (g.edges[e].1, g.edges[e].0, e));
    let mut perm = vec![0; order.len()];
    for (t, &e) in order.iter().enumerate() {
        perm[e] = t;
    }
    perm
}

/// All ordered pairs `(i, j)`, `i != j`, with `|r_i - r_j| <= r_cut`, found
/// through a cell list with cell edge `r_cut`.
pub fn radius_graph(geo: &Geometry, r_cut: f64) -> GraphCSR {
    assert!(r_cut > 0.0 && r_cut.is_finite(), "cutoff must be positive");
    let cell = |r: &[f64; 3]| r.map(|c| (c / r_cut).floor() as i64);
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, r) in geo.positions.iter().enumerate() {
        cells.entry(cell(r)).or_default().push(i);
    }
    let r2 = r_cut * r_cut;
    let mut edges = Vec::new();
    for (i, ri) in geo.positions.iter().enumerate() {
        let c = cell(ri);
        let start = edges.len();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in members {
                        let rj = &geo.positions[j];
                        let d2: f64 = (0..3).map(|a| (ri[a] - rj[a]).powi(2)).sum();
                        if j != i && d2 <= r2 {
                            edges.push((i, j));
                        }
                    }
                }
            }
        }
        edges[start..].sort_unstable();
    }
    GraphCSR::from_edges(geo.len(), edges).expect("indices come from the geometry")
}

/// Diamond-cubic carbon with lattice constant 3.567, `cells` unit cells per
/// side, eight atoms per cell, no periodic images.
pub fn carbon_lattice(cells: usize) -> Geometry {
    const A: f64 = 3.567;
    const BASIS: [[f64; 3]; 8] = [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
        [0.25, 0.25, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
        [0.75, 0.75, 0.25],
    ];
    let mut geo = Geometry::default();
    for i in 0..cells {
        for j in 0..cells {
            for k in 0..cells {
                for b in BASIS {
                    geo.species.push("C".into());
                    geo.positions.push([
                        (i as f64 + b[0]) * A,
                        (j as f64 + b[1]) * A,
                        (k as f64 + b[2]) * A,
                    ]);
                }
            }
        }
    }
    geo
}

/// Cutoff for the 1000-atom lattice: 165,436 directed edges.
pub const LATTICE_CUTOFF: f64 = 6.9;

/// 5x5x5 diamond cells (1000 atoms) with the radius graph at `LATTICE_CUTOFF`.
pub fn synthetic_lattice() -> (Geometry, GraphCSR) {
    let geo = carbon_lattice(5);
    let g = radius_graph(&geo, LATTICE_CUTOFF);
    (geo, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Fixup-buffer pass; bitwise reproducible.
    Deterministic,
    /// Per-edge accumulation into shared node rows under a per-node lock;
    /// summation order depends on thread timing.
    Atomic,
}

/// Traffic counters in words, plus node-row write events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConvCounters {
    pub loads: u64,
    pub stores: u64,
    pub flops: u64,
    /// Words read from node feature rows.
    pub node_reads: u64,
    /// Segment writes into node output rows.
    pub node_writes: u64,
}

impl ConvCounters {
    pub fn add(&mut self, o: &ConvCounters) {
        self.loads += o.loads;
        self.stores += o.stores;
        self.flops += o.flops;
        self.node_reads += o.node_reads;
        self.node_writes += o.node_writes;
    }
}

#[derive(Debug, Clone)]
pub struct ConvForward<T> {
    pub z: Vec<T>,
    pub counters: ConvCounters,
}

#[derive(Debug, Clone)]
pub struct ConvBackward<T> {
    pub gx: Vec<T>,
    pub gy: Vec<T>,
    pub gw: Vec<T>,
    pub counters: ConvCounters,
}

/// Where a gathered range comes from for the item `(row, other, edge)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Row,
    Other,
    Edge,
}

#[derive(Debug, Clone, Copy)]
struct Gather {
    source: Source,
    input: usize,
    offset: usize,
    len: usize,
    addr: usize,
    mapped: bool,
}

/// Additive write of scratch words into an output row.
#[derive(Debug, Clone, Copy)]
struct Scatter {
    output: usize,
    addr: usize,
    offset: usize,
    len: usize,
    mapped: bool,
}

struct Step<T: Real> {
    fast: SpecializedKernel<T>,
}

/// One schedule phase lowered for the edge loop.
struct Stage<T: Real> {
    gathers: Vec<Gather>,
    row_zero: Vec<(usize, usize)>,
    edge_zero: Vec<(usize, usize)>,
    steps: Vec<Step<T>>,
    row_flush: Vec<Scatter>,
    edge_flush: Vec<Scatter>,
    flops: u64,
}

impl<T: Real> Stage<T> {
    fn row_words(&self) -> usize {
        self.row_flush.iter().map(|s| s.len).sum()
    }

    fn edge_words(&self) -> usize {
        self.edge_flush.iter().map(|s| s.len).sum()
    }
}

struct Plan<T: Real> {
    scratch_words: usize,
    stages: Vec<Stage<T>>,
    row_cols: usize,
    edge_cols: Vec<usize>,
}

/// Fixup buffer entry: a warp's partial sum for its first node.
struct FixupSlot<T> {
    node: usize,
    data: Vec<T>,
}

fn merge(mut spans: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    spans.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (a, b) in spans {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

struct Lowering<'a> {
    p: &'a ValidatedProblem,
    s: &'a Schedule,
    fwd_ir: Vec<Arc<KernelIR>>,
    bwd_ir: Vec<Arc<KernelIR>>,
    tile: usize,
}

// Node inputs: x, then g_z in the backward pass. Edge inputs: y, W.
const NODE_X: usize = 0;
const NODE_GZ: usize = 1;
const EDGE_Y: usize = 0;
const EDGE_W: usize = 1;

impl Lowering<'_> {
    fn ranges(&self, ph: &Phase, space: Space) -> Vec<usize> {
        let mut ids: Vec<usize> = ph
            .subkernels
            .iter()
            .map(|&n| {
                let fp = self.s.footprints[n];
                match space {
                    Space::X => fp.x,
                    Space::Y => fp.y,
                    Space::W => fp.w,
                    Space::Z => fp.z,
                }
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn gathers(&self, ph: &Phase, space: Space, source: Source, input: usize) -> Vec<Gather> {
        self.ranges(ph, space)
            .into_iter()
            .map(|r| {
                let range = self.s.ranges[r];
                Gather {
                    source,
                    input,
                    offset: range.offset,
                    len: range.len,
                    addr: range.addr,
                    mapped: space == Space::W && self.p.weight_map.is_some(),
                }
            })
            .collect()
    }

    fn bind(&self, n: usize) -> Bindings {
        let fp = self.s.footprints[n];
        let addr = |r: usize| self.s.ranges[r].addr;
        Bindings::new()
            .bind(Operand::X, addr(fp.x))
            .bind(Operand::Y, addr(fp.y))
            .bind(Operand::W, addr(fp.w))
            .bind(Operand::Z, addr(fp.z))
            .bind(Operand::GZ, addr(fp.z))
            .bind(Operand::ZPrime, 0)
            .bind(Operand::GZPrime, self.tile)
    }

    fn steps<T: Real>(&self, irs: &[Arc<KernelIR>], binds: &[Bindings]) -> (Vec<Step<T>>, u64) {
        let flops = irs.iter().map(|k| flop_count(k)).sum();
        let lean = eliminate_redundant_loads(irs, binds);
        let steps = lean
            .iter()
            .zip(binds)
            .map(|(ir, &b)| Step {
                fast: specialize::<T>(ir, b),
            })
            .collect();
        (steps, flops)
    }

    fn forward<T: Real>(&self) -> Plan<T> {
        let stages = self
            .s
            .phases
            .iter()
            .map(|ph| {
                let mut gathers = self.gathers(ph, Space::X, Source::Other, NODE_X);
                gathers.extend(self.gathers(ph, Space::Y, Source::Edge, EDGE_Y));
                gathers.extend(self.gathers(ph, Space::W, Source::Edge, EDGE_W));
                let z = self.ranges(ph, Space::Z);
                let irs: Vec<Arc<KernelIR>> = ph.subkernels.iter().map(|&n| self.fwd_ir[n].clone()).collect();
                let binds: Vec<Bindings> = ph.subkernels.iter().map(|&n| self.bind(n)).collect();
                let (steps, flops) = self.steps(&irs, &binds);
                Stage {
                    gathers,
                    row_zero: z.iter().map(|&r| (self.s.ranges[r].addr, self.s.ranges[r].len)).collect(),
                    edge_zero: Vec::new(),
                    steps,
                    row_flush: z
                        .iter()
                        .map(|&r| {
                            let range = self.s.ranges[r];
                            Scatter {
                                output: 0,
                                addr: range.addr,
                                offset: range.offset,
                                len: range.len,
                                mapped: false,
                            }
                        })
                        .collect(),
                    edge_flush: Vec::new(),
                    flops,
                }
            })
            .collect();
        Plan {
            scratch_words: self.s.scratch_words,
            stages,
            row_cols: self.p.dim_z(),
            edge_cols: Vec::new(),
        }
    }

    fn backward<T: Real>(&self) -> Plan<T> {
        let base = self.s.scratch_words;
        let (gx, gy, gw) = (base, base + self.p.dim_x(), base + self.p.dim_x() + self.p.dim_y());
        let region = self.p.dim_x() + self.p.dim_y() + self.p.total_weights;
        let mapped = self.p.weight_map.is_some();
        let stages = self
            .s
            .phases
            .iter()
            .map(|ph| {
                let mut gathers = self.gathers(ph, Space::X, Source::Row, NODE_X);
                gathers.extend(self.gathers(ph, Space::Y, Source::Edge, EDGE_Y));
                gathers.extend(self.gathers(ph, Space::W, Source::Edge, EDGE_W));
                gathers.extend(self.gathers(ph, Space::Z, Source::Other, NODE_GZ));
                let sks = ph.subkernels.iter().map(|&n| &self.p.subkernels[n]);
                let xs = merge(sks.clone().map(|sk| (sk.x_offset, sk.x_offset + sk.x_len())).collect());
                let ys = merge(sks.clone().map(|sk| (sk.y_offset, sk.y_offset + sk.y_dim())).collect());
                let ws = merge(sks.map(|sk| (sk.w_offset, sk.w_offset + sk.w_count())).collect());
                let irs: Vec<Arc<KernelIR>> = ph.subkernels.iter().map(|&n| self.bwd_ir[n].clone()).collect();
                let binds: Vec<Bindings> = ph
                    .subkernels
                    .iter()
                    .map(|&n| {
                        let sk = &self.p.subkernels[n];
                        self.bind(n)
                            .bind(Operand::GX, gx + sk.x_offset)
                            .bind(Operand::GY, gy + sk.y_offset)
                            .bind(Operand::GW, gw + sk.w_offset)
                    })
                    .collect();
                let (steps, flops) = self.steps(&irs, &binds);
                let scatter = |output: usize, region: usize, spans: &[(usize, usize)], mapped: bool| {
                    spans
                        .iter()
                        .map(|&(a, b)| Scatter {
                            output,
                            addr: region + a,
                            offset: a,
                            len: b - a,
                            mapped,
                        })
                        .collect::<Vec<_>>()
                };
                let row_flush = scatter(0, gx, &xs, false);
                let mut edge_flush = scatter(0, gy, &ys, false);
                edge_flush.extend(scatter(1, gw, &ws, mapped));
                Stage {
                    gathers,
                    row_zero: row_flush.iter().map(|s| (s.addr, s.len)).collect(),
                    edge_zero: edge_flush.iter().map(|s| (s.addr, s.len)).collect(),
                    steps,
                    row_flush,
                    edge_flush,
                    flops,
                }
            })
            .collect();
        Plan {
            scratch_words: base + region,
            stages,
            row_cols: self.p.dim_x(),
            edge_cols: vec![self.p.dim_y(), self.p.total_weights],
        }
    }
}

/// Edge items in traversal order: `(row, other, edge)`.
enum Items<'a> {
    Forward(&'a [(usize, usize)]),
    Transposed(&'a [(usize, usize)], &'a [usize]),
}

impl Items<'_> {
    fn len(&self) -> usize {
        match self {
            Items::Forward(e) => e.len(),
            Items::Transposed(_, order) => order.len(),
        }
    }

    #[inline]
    fn get(&self, t: usize) -> (usize, usize, usize) {
        match self {
            Items::Forward(e) => (e[t].0, e[t].1, t),
            Items::Transposed(edges, order) => {
                let e = order[t];
                (edges[e].1, edges[e].0, e)
            }
        }
    }
}

struct Workspace<T> {
    scratch: Vec<T>,
    regs: Vec<T>,
    temp: Vec<T>,
}

fn add_into<T: Real>(dst_row: &mut [T], src: &[T], offset: usize, mapped: Option<&[usize]>) {
    match mapped {
        Some(m) => {
            for (&v, &c) in src.iter().zip(&m[offset..offset + src.len()]) {
                dst_row[c] += v;
            }
        }
        None => {
            for (d, &v) in dst_row[offset..offset + src.len()].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
}

/// Immutable inputs shared by all workers of one pass.
struct Pass<'a, T: Real> {
    plan: &'a Plan<T>,
    items: Items<'a>,
    nodes: [&'a [T]; 2],
    node_cols: [usize; 2],
    edges: [&'a [T]; 2],
    edge_cols: [usize; 2],
    map: Option<&'a [usize]>,
}

impl<T: Real> Pass<'_, T> {
    /// Loads, runs and flushes the per-edge part of one item.
    fn edge_work(&self, st: &Stage<T>, ws: &mut Workspace<T>, t: usize, edge_out: &mut [&mut [T]], local: usize) -> (usize, usize) {
        let (row, other, e) = self.items.get(t);
        for &(addr, len) in &st.edge_zero {
            ws.scratch[addr..addr + len].fill(T::zero());
        }
        for g in &st.gathers {
            let src: &[T] = match g.source {
                Source::Row => &self.nodes[g.input][row * self.node_cols[g.input]..][..self.node_cols[g.input]],
                Source::Other => &self.nodes[g.input][other * self.node_cols[g.input]..][..self.node_cols[g.input]],
                Source::Edge => {
                    let cols = self.edge_cols[g.input];
                    &self.edges[g.input][e * cols..(e + 1) * cols]
                }
            };
            let dst = &mut ws.scratch[g.addr..g.addr + g.len];
            match (g.mapped, self.map) {
                (true, Some(m)) => {
                    for (d, &c) in dst.iter_mut().zip(&m[g.offset..g.offset + g.len]) {
                        *d = src[c];
                    }
                }
                _ => dst.copy_from_slice(&src[g.offset..g.offset + g.len]),
            }
        }
        for step in &st.steps {
            step.fast.run(&mut ws.regs, &mut ws.scratch, &mut ws.temp);
        }
        for s in &st.edge_flush {
            let cols = self.plan.edge_cols[s.output];
            let dst = &mut edge_out[s.output][local * cols..(local + 1) * cols];
            add_into(dst, &ws.scratch[s.addr..s.addr + s.len], s.offset, if s.mapped { self.map } else { None });
        }
        (row, other)
    }

    /// Deterministic pass over warps `warps`; returns fixup slots in warp
    /// order and the number of direct row flushes.
    #[allow(clippy::too_many_arguments)]
    fn run_warps(
        &self,
        st: &Stage<T>,
        ws: &mut Workspace<T>,
        warps: Range<usize>,
        bounds: &[usize],
        row_out: &mut [T],
        row_lo: usize,
        edge_out: &mut [&mut [T]],
        t_lo: usize,
    ) -> (Vec<FixupSlot<T>>, u64) {
        let cols = self.plan.row_cols;
        let mut fixups = Vec::new();
        let mut direct = 0u64;
        for warp in warps {
            let mut current: Option<usize> = None;
            let mut first = true;
            let flush = |node: usize, first: bool, ws: &Workspace<T>, row_out: &mut [T], fixups: &mut Vec<FixupSlot<T>>| {
                if first {
                    let data = st.row_flush.iter().flat_map(|s| ws.scratch[s.addr..s.addr + s.len].iter().copied()).collect();
                    fixups.push(FixupSlot { node, data });
                } else {
                    let dst = &mut row_out[(node - row_lo) * cols..(node - row_lo + 1) * cols];
                    for s in &st.row_flush {
                        add_into(dst, &ws.scratch[s.addr..s.addr + s.len], s.offset, None);
                    }
                }
            };
            for t in bounds[warp]..bounds[warp + 1] {
                let row = self.items.get(t).0;
                if current != Some(row) {
                    if let Some(node) = current {
                        flush(node, first, ws, row_out, &mut fixups);
                        direct += u64::from(!first);
                        first = false;
                    }
                    for &(addr, len) in &st.row_zero {
                        ws.scratch[addr..addr + len].fill(T::zero());
                    }
                    current = Some(row);
                }
                self.edge_work(st, ws, t, edge_out, t - t_lo);
            }
            if let Some(node) = current {
                flush(node, first, ws, row_out, &mut fixups);
                direct += u64::from(!first);
            }
        }
        (fixups, direct)
    }

    fn run_atomic(&self, st: &Stage<T>, ws: &mut Workspace<T>, ts: Range<usize>, rows: &[Mutex<&mut [T]>], edge_out: &mut [&mut [T]]) {
        let t_lo = ts.start;
        for t in ts {
            for &(addr, len) in &st.row_zero {
                ws.scratch[addr..addr + len].fill(T::zero());
            }
            let (row, _) = self.edge_work(st, ws, t, edge_out, t - t_lo);
            let mut dst = rows[row].lock().expect("node lock poisoned");
            for s in &st.row_flush {
                add_into(&mut dst, &ws.scratch[s.addr..s.addr + s.len], s.offset, None);
            }
        }
    }
}

/// Compiled fused convolution for one problem and schedule.
pub struct Conv<T: Real> {
    problem: ValidatedProblem,
    schedule: Schedule,
    workers: usize,
    regs_words: usize,
    temp_words: usize,
    forward: Plan<T>,
    backward: Plan<T>,
}

impl<T: Real> Conv<T> {
    /// `p` must be the split problem the schedule was built for.
    pub fn new(p: &ValidatedProblem, schedule: &Schedule, workers: usize) -> Result<Self, EngineError> {
        if schedule.fingerprint != problem_fingerprint(p) || schedule.footprints.len() != p.subkernels.len() {
            return Err(EngineError::ScheduleMismatch);
        }
        let lw = schedule.lane_width;
        let fwd_ir: Vec<Arc<KernelIR>> = p.subkernels.iter().map(|sk| Arc::new(gen_forward(sk, lw))).collect();
        let bwd_ir: Vec<Arc<KernelIR>> = p.subkernels.iter().map(|sk| Arc::new(gen_backward(sk, lw))).collect();
        let regs = fwd_ir.iter().chain(&bwd_ir).map(|k| k.reg_count).max().unwrap_or(0);
        let tile = p.subkernels.iter().map(|sk| sk.x_rows * sk.z_dim()).max().unwrap_or(0);
        let low = Lowering {
            p,
            s: schedule,
            fwd_ir,
            bwd_ir,
            tile,
        };
        Ok(Self {
            forward: low.forward(),
            backward: low.backward(),
            problem: p.clone(),
            schedule: schedule.clone(),
            workers: workers.max(1),
            regs_words: regs * lw,
            temp_words: 2 * tile,
        })
    }

    pub fn compile(p: &ValidatedProblem, budget_words: usize, workers: usize) -> Result<Self, ScheduleError> {
        let split = split_multiplicities(p, p.lane_width.unwrap_or(DEFAULT_LANE_WIDTH));
        let s = build_schedule(&split, budget_words)?;
        Ok(Self::new(&split, &s, workers).expect("schedule built for this problem"))
    }

    pub fn problem(&self) -> &ValidatedProblem {
        &self.problem
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    fn check_inputs(&self, g: &GraphCSR, node_x: &[T], edge_y: &[T], edge_w: &[T]) -> Result<(), ConvError> {
        let p = &self.problem;
        check("node_x", node_x, g.node_count, p.dim_x())?;
        check("edge_y", edge_y, g.edges.len(), p.dim_y())?;
        check("edge_w", edge_w, g.edges.len(), p.total_weights)?;
        for (e, &(i, j)) in g.edges.iter().enumerate() {
            for node in [i, j] {
                if node >= g.node_count {
                    return Err(ConvError::NodeOutOfRange {
                        edge: e,
                        node,
                        nodes: g.node_count,
                    });
                }
            }
        }
        Ok(())
    }

    /// Node outputs `z[i] = sum_e TP(x[j], y[e], W[e])`.
    pub fn forward(&self, g: &GraphCSR, node_x: &[T], edge_y: &[T], edge_w: &[T], mode: ConvMode) -> Result<ConvForward<T>, ConvError> {
        self.check_inputs(g, node_x, edge_y, edge_w)?;
        if mode == ConvMode::Deterministic {
            if let Some(edge) = g.first_unsorted() {
                return Err(ConvError::UnsortedEdges { edge });
            }
        }
        let p = &self.problem;
        let pass = Pass {
            plan: &self.forward,
            items: Items::Forward(&g.edges),
            nodes: [node_x, &[]],
            node_cols: [p.dim_x(), 0],
            edges: [edge_y, edge_w],
            edge_cols: [p.dim_y(), p.total_weights],
            map: p.weight_map.as_deref(),
        };
        let mut z = vec![T::zero(); g.node_count * p.dim_z()];
        let counters = self.run(&pass, mode, g.node_count, &mut z, &mut []);
        Ok(ConvForward { z, counters })
    }

    /// Gradients of `<g_z, z>`; `perm` is `transpose_permutation(g)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        g: &GraphCSR,
        perm: &[usize],
        node_x: &[T],
        edge_y: &[T],
        edge_w: &[T],
        g_node_z: &[T],
        mode: ConvMode,
    ) -> Result<ConvBackward<T>, ConvError> {
        self.check_inputs(g, node_x, edge_y, edge_w)?;
        let p = &self.problem;
        check("g_node_z", g_node_z, g.node_count, p.dim_z())?;
        let n_edges = g.edges.len();
        if perm.len() != n_edges {
            return Err(ConvError::PermutationLength {
                expected: n_edges,
                got: perm.len(),
            });
        }
        let mut order = vec![usize::MAX; n_edges];
        for (e, &t) in perm.iter().enumerate() {
            if t >= n_edges || order[t] != usize::MAX {
                return Err(ConvError::BadPermutation { position: e });
            }
            order[t] = e;
        }
        if mode == ConvMode::Deterministic {
            if let Some(edge) = g.first_unsorted() {
                return Err(ConvError::UnsortedEdges { edge });
            }
            let key = |t: usize| (g.edges[order[t]].1, g.edges[order[t]].0);
            if let Some(t) = (1..n_edges).find(|&t| key(t - 1) >= key(t)) {
                return Err(ConvError::BadPermutation { position: t });
            }
        }
        let pass = Pass {
            plan: &self.backward,
            items: Items::Transposed(&g.edges, &order),
            nodes: [node_x, g_node_z],
            node_cols: [p.dim_x(), p.dim_z()],
            edges: [edge_y, edge_w],
            edge_cols: [p.dim_y(), p.total_weights],
            map: p.weight_map.as_deref(),
        };
        let (dy, nw) = (p.dim_y(), p.total_weights);
        let mut gx = vec![T::zero(); g.node_count * p.dim_x()];
        let mut ty = vec![T::zero(); n_edges * dy];
        let mut tw = vec![T::zero(); n_edges * nw];
        let counters = self.run(&pass, mode, g.node_count, &mut gx, &mut [&mut ty, &mut tw]);
        // Per-edge results were produced in transposed order.
        let mut gy = vec![T::zero(); n_edges * dy];
        let mut gw = vec![T::zero(); n_edges * nw];
        for (e, &t) in perm.iter().enumerate() {
            gy[e * dy..(e + 1) * dy].copy_from_slice(&ty[t * dy..(t + 1) * dy]);
            gw[e * nw..(e + 1) * nw].copy_from_slice(&tw[t * nw..(t + 1) * nw]);
        }
        Ok(ConvBackward { gx, gy, gw, counters })
    }

    fn workspace(&self, plan: &Plan<T>) -> Workspace<T> {
        Workspace {
            scratch: vec![T::zero(); plan.scratch_words],
            regs: vec![T::zero(); self.regs_words],
            temp: vec![T::zero(); self.temp_words],
        }
    }

    fn run(&self, pass: &Pass<'_, T>, mode: ConvMode, nodes: usize, row_out: &mut [T], edge_out: &mut [&mut [T]]) -> ConvCounters {
        let n = pass.items.len();
        let mut counters = ConvCounters::default();
        for st in &pass.plan.stages {
            let gathered: usize = st.gathers.iter().map(|g| g.len).sum();
            let from_nodes: usize = st.gathers.iter().filter(|g| g.source != Source::Edge).map(|g| g.len).sum();
            let writes = match mode {
                ConvMode::Deterministic => self.stage_deterministic(pass, st, nodes, row_out, edge_out),
                ConvMode::Atomic => {
                    self.stage_atomic(pass, st, row_out, edge_out);
                    n as u64
                }
            };
            let n = n as u64;
            counters.add(&ConvCounters {
                loads: n * gathered as u64,
                stores: writes * st.row_words() as u64 + n * st.edge_words() as u64,
                flops: n * st.flops,
                node_reads: n * from_nodes as u64,
                node_writes: writes,
            });
        }
        counters
    }

    /// Splits per-edge outputs into per-worker item ranges.
    fn split_edges<'b>(&self, edge_out: &'b mut [&mut [T]], cols: &[usize], cuts: &[usize]) -> Vec<Vec<&'b mut [T]>> {
        let workers = cuts.len() - 1;
        let mut parts: Vec<Vec<&mut [T]>> = (0..workers).map(|_| Vec::new()).collect();
        for (out, &c) in edge_out.iter_mut().zip(cols) {
            let mut rest: &mut [T] = out;
            for (k, part) in parts.iter_mut().enumerate() {
                let (head, tail) = rest.split_at_mut((cuts[k + 1] - cuts[k]) * c);
                part.push(head);
                rest = tail;
            }
        }
        parts
    }

    /// Returns the number of node-row segment writes.
    fn stage_deterministic(&self, pass: &Pass<'_, T>, st: &Stage<T>, nodes: usize, row_out: &mut [T], edge_out: &mut [&mut [T]]) -> u64 {
        let n = pass.items.len();
        let bounds: Vec<usize> = (0..=LOGICAL_WARPS).map(|k| k * n / LOGICAL_WARPS).collect();
        let workers = self.workers.min(LOGICAL_WARPS);
        let warp_cut: Vec<usize> = (0..=workers).map(|w| w * LOGICAL_WARPS / workers).collect();
        let t_cut: Vec<usize> = warp_cut.iter().map(|&k| bounds[k]).collect();
        // A worker writes rows directly only after its first row.
        let mut row_cut: Vec<usize> = t_cut
            .iter()
            .enumerate()
            .map(|(w, &t)| match w {
                0 => 0,
                _ if t < n => pass.items.get(t).0 + 1,
                _ => nodes,
            })
            .collect();
        row_cut[workers] = nodes;
        let cols = pass.plan.row_cols;
        let mut row_parts = Vec::with_capacity(workers);
        let mut rest: &mut [T] = row_out;
        for w in 0..workers {
            let (head, tail) = rest.split_at_mut((row_cut[w + 1] - row_cut[w]) * cols);
            row_parts.push(head);
            rest = tail;
        }
        let edge_parts = self.split_edges(edge_out, &pass.plan.edge_cols, &t_cut);
        let results: Vec<(Vec<FixupSlot<T>>, u64)> = if workers == 1 {
            let mut ws = self.workspace(pass.plan);
            let mut parts = edge_parts;
            vec![pass.run_warps(st, &mut ws, 0..LOGICAL_WARPS, &bounds, row_parts.pop().expect("one part"), 0, &mut parts[0], 0)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = row_parts
                    .into_iter()
                    .zip(edge_parts)
                    .enumerate()
                    .map(|(w, (rows, mut edges))| {
                        let (bounds, warp_cut, t_cut, row_cut) = (&bounds, &warp_cut, &t_cut, &row_cut);
                        scope.spawn(move || {
                            let mut ws = self.workspace(pass.plan);
                            pass.run_warps(st, &mut ws, warp_cut[w]..warp_cut[w + 1], bounds, rows, row_cut[w], &mut edges, t_cut[w])
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let mut writes = 0;
        for (fixups, direct) in results {
            writes += direct;
            for slot in fixups {
                let dst = &mut row_out[slot.node * cols..(slot.node + 1) * cols];
                let mut at = 0;
                for s in &st.row_flush {
                    add_into(dst, &slot.data[at..at + s.len], s.offset, None);
                    at += s.len;
                }
                writes += 1;
            }
        }
        writes
    }

    fn stage_atomic(&self, pass: &Pass<'_, T>, st: &Stage<T>, row_out: &mut [T], edge_out: &mut [&mut [T]]) {
        let n = pass.items.len();
        let workers = self.workers.min(n.max(1));
        let t_cut: Vec<usize> = (0..=workers).map(|w| w * n / workers).collect();
        let cols = pass.plan.row_cols;
        let rows: Vec<Mutex<&mut [T]>> = if cols == 0 {
            Vec::new()
        } else {
            row_out.chunks_mut(cols).map(Mutex::new).collect()
        };
        let parts = self.split_edges(edge_out, &pass.plan.edge_cols, &t_cut);
        std::thread::scope(|scope| {
            for (w, mut edges) in parts.into_iter().enumerate() {
                let (rows, t_cut) = (&rows, &t_cut);
                scope.spawn(move || {
                    let mut ws = self.workspace(pass.plan);
                    pass.run_atomic(st, &mut ws, t_cut[w]..t_cut[w + 1], rows, &mut edges);
                });
            }
        });
    }
}

/// One-shot fused forward with a single worker.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<T: Real>(
    p: &ValidatedProblem,
    s: &Schedule,
    g: &GraphCSR,
    node_x: &[T],
    edge_y: &[T],
    edge_w: &[T],
    mode: ConvMode,
) -> Result<Vec<T>, ConvError> {
    Ok(Conv::<T>::new(p, s, 1)?.forward(g, node_x, edge_y, edge_w, mode)?.z)
}

/// One-shot fused backward with a single worker.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    p: &ValidatedProblem,
    s: &Schedule,
    g: &GraphCSR,
    perm: &[usize],
    node_x: &[T],
    edge_y: &[T],
    edge_w: &[T],
    g_node_z: &[T],
    mode: ConvMode,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), ConvError> {
    let b = Conv::<T>::new(p, s, 1)?.backward(g, perm, node_x, edge_y, edge_w, g_node_z, mode)?;
    Ok((b.gx, b.gy, b.gw))
}

fn gather<T: Real>(data: &[T], cols: usize, rows: impl Iterator<Item = usize>) -> Vec<T> {
    rows.flat_map(|r| data[r * cols..(r + 1) * cols].iter().copied()).collect()
}

/// Reference forward: duplicate node features per edge, run the batched
/// tensor product, then scatter-sum into node rows.
pub fn unfused_forward<T: Real>(
    engine: &Engine<T>,
    g: &GraphCSR,
    node_x: &[T],
    edge_y: &[T],
    edge_w: &[T],
) -> Result<ConvForward<T>, ConvError> {
    let p = engine.problem();
    let (dx, dz) = (p.dim_x(), p.dim_z());
    check("node_x", node_x, g.node_count, dx)?;
    let m = g.edges.len();
    let xe = gather(node_x, dx, g.edges.iter().map(|e| e.1));
    let f = engine.forward(m, &xe, edge_y, edge_w)?;
    let mut z = vec![T::zero(); g.node_count * dz];
    for (e, &(i, _)) in g.edges.iter().enumerate() {
        for (d, &v) in z[i * dz..(i + 1) * dz].iter_mut().zip(&f.z[e * dz..(e + 1) * dz]) {
            *d += v;
        }
    }
    let (m, dx, dz) = (m as u64, dx as u64, dz as u64);
    Ok(ConvForward {
        z,
        counters: ConvCounters {
            loads: m * dx + f.counters.loads + m * dz,
            stores: m * dx + f.counters.stores + m * dz,
            flops: f.counters.flops,
            node_reads: m * dx,
            node_writes: m,
        },
    })
}

/// Reference backward built the same way as `unfused_forward`.
pub fn unfused_backward<T: Real>(
    engine: &Engine<T>,
    g: &GraphCSR,
    node_x: &[T],
    edge_y: &[T],
    edge_w: &[T],
    g_node_z: &[T],
) -> Result<ConvBackward<T>, ConvError> {
    let p = engine.problem();
    let (dx, dz) = (p.dim_x(), p.dim_z());
    check("node_x", node_x, g.node_count, dx)?;
    check("g_node_z", g_node_z, g.node_count, dz)?;
    let m = g.edges.len();
    let xe = gather(node_x, dx, g.edges.iter().map(|e| e.1));
    let gze = gather(g_node_z, dz, g.edges.iter().map(|e| e.0));
    let b = engine.backward(m, &xe, edge_y, edge_w, &gze)?;
    let mut gx = vec![T::zero(); g.node_count * dx];
    for (e, &(_, j)) in g.edges.iter().enumerate() {
        for (d, &v) in gx[j * dx..(j + 1) * dx].iter_mut().zip(&b.gx[e * dx..(e + 1) * dx]) {
            *d += v;
        }
    }
    let (m, dx, dz) = (m as u64, dx as u64, dz as u64);
    Ok(ConvBackward {
        gx,
        gy: b.gy,
        gw: b.gw,
        counters: ConvCounters {
            loads: m * (dx + dz) + b.counters.loads + m * dx,
            stores: m * (dx + dz) + b.counters.stores + m * dx,
            flops: b.counters.flops,
            node_reads: m * (dx + dz),
            node_writes: m,
        },
    })
}
