//! Compile-time analysis: multiplicity splitting, phase scheduling under a
//! per-worker scratch budget, and the global-memory traffic model.
//!
//! A schedule names every distinct operand range a subkernel touches (x rows,
//! the y segment, the weight block, the z rows) and assigns each a fixed
//! scratch address. Phases load ranges at their start, run subkernels in
//! order, and store finished z ranges at their end. The budget bounds the
//! words resident during any phase.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::Serialize;

use crate::error::ScheduleError;
use crate::kernelgen::{flop_count, gen_forward, DEFAULT_LANE_WIDTH};
use crate::tpspec::{KernelKind, Subkernel, ValidatedProblem};

pub const DEFAULT_BUDGET_WORDS: usize = 4096;

/// Splits every instruction into chunks with `b, b' <= lane_width`.
///
/// Kind B chunks cover adjacent row ranges of the x and z segments. Kind C is
/// tiled over (z rows, x rows); each tile's `W` sub-block is stored
/// contiguously in the compiled weight layout, row-major. The resulting
/// `weight_map[compiled] = caller` index remap is stored on the problem and
/// stays `None` when nothing was split.
pub fn split_multiplicities(p: &ValidatedProblem, lane_width: usize) -> ValidatedProblem {
    assert!(lane_width > 0, "lane width must be positive");
    let mut subkernels = Vec::new();
    let mut map = Vec::with_capacity(p.total_weights);
    let mut w_offset = 0;
    for sk in &p.subkernels {
        let (dx, dz) = (sk.x_dim(), sk.z_dim());
        let chunks = |n: usize| (0..n).step_by(lane_width).map(move |s| (s, lane_width.min(n - s)));
        let mut push = |r0: usize, rows: usize, c0: usize, cols: usize, map: &mut Vec<usize>| {
            let piece = Subkernel {
                x_offset: sk.x_offset + c0 * dx,
                z_offset: sk.z_offset + r0 * dz,
                x_rows: cols,
                z_rows: rows,
                w_offset,
                row_start: sk.row_start + r0,
                col_start: sk.col_start + c0,
                ..sk.clone()
            };
            match sk.kind {
                KernelKind::B => map.extend((r0..r0 + rows).map(|r| sk.w_offset + r)),
                KernelKind::C => {
                    for r in r0..r0 + rows {
                        map.extend((c0..c0 + cols).map(|c| sk.w_offset + r * sk.x_rows + c));
                    }
                }
            }
            w_offset += piece.w_count();
            subkernels.push(piece);
        };
        match sk.kind {
            KernelKind::B => {
                for (r0, rows) in chunks(sk.z_rows) {
                    push(r0, rows, r0, rows, &mut map);
                }
            }
            KernelKind::C => {
                for (r0, rows) in chunks(sk.z_rows) {
                    for (c0, cols) in chunks(sk.x_rows) {
                        push(r0, rows, c0, cols, &mut map);
                    }
                }
            }
        }
    }
    debug_assert_eq!(w_offset, p.total_weights);
    let identity = map.iter().enumerate().all(|(n, &m)| n == m);
    let weight_map = match (&p.weight_map, identity) {
        (None, true) => None,
        (None, false) => Some(map),
        (Some(prev), _) => Some(map.iter().map(|&m| prev[m]).collect()),
    };
    ValidatedProblem {
        subkernels,
        weight_map,
        lane_width: Some(lane_width),
        ..p.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    X,
    Y,
    W,
    Z,
}

/// A contiguous run of words of one operand, pinned at `addr` in scratch.
/// `W` offsets are in the compiled weight layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Range {
    pub space: Space,
    pub offset: usize,
    pub len: usize,
    pub addr: usize,
}

/// Range ids used by one subkernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Footprint {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub z: usize,
}

impl Footprint {
    pub fn ids(&self) -> [usize; 4] {
        [self.x, self.y, self.w, self.z]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Phase {
    /// Every range resident while the phase runs, ascending id.
    pub resident: Vec<usize>,
    /// Ranges read from global memory at phase start.
    pub loads: Vec<usize>,
    /// z ranges zeroed in scratch at phase start.
    pub z_init: Vec<usize>,
    /// Subkernel indices, in execution order.
    pub subkernels: Vec<usize>,
    /// z ranges written back at phase end.
    pub stores: Vec<usize>,
    /// Ranges dropped from scratch at phase end.
    pub released: Vec<usize>,
}

impl Phase {
    pub fn resident_words(&self, ranges: &[Range]) -> usize {
        self.resident.iter().map(|&r| ranges[r].len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SinglePhase,
    StreamZ,
    Greedy,
}

/// Per batch element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrafficReport {
    pub loads_words: u64,
    pub stores_words: u64,
    pub flops: u64,
    /// FLOPs per byte at 8-byte words.
    pub arithmetic_intensity: f64,
}

impl TrafficReport {
    fn new(loads_words: u64, stores_words: u64, flops: u64) -> Self {
        let mut t = Self {
            loads_words,
            stores_words,
            flops,
            arithmetic_intensity: 0.0,
        };
        t.arithmetic_intensity = t.intensity(8);
        t
    }

    pub fn intensity(&self, word_bytes: usize) -> f64 {
        let bytes = word_bytes as f64 * (self.loads_words + self.stores_words) as f64;
        if bytes == 0.0 {
            0.0
        } else {
            self.flops as f64 / bytes
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub strategy: Strategy,
    pub budget_words: usize,
    pub lane_width: usize,
    pub fingerprint: u64,
    pub ranges: Vec<Range>,
    /// Total scratch words addressed by `ranges`.
    pub scratch_words: usize,
    /// Indexed by subkernel.
    pub footprints: Vec<Footprint>,
    /// Forward FLOPs per subkernel.
    pub subkernel_flops: Vec<u64>,
    pub phases: Vec<Phase>,
    /// `(offset, len)` z spans no instruction writes; stored as zeros.
    pub zero_fill: Vec<(usize, usize)>,
    pub traffic: TrafficReport,
}

impl Schedule {
    /// Subkernel indices in execution order.
    pub fn order(&self) -> Vec<usize> {
        self.phases.iter().flat_map(|ph| ph.subkernels.iter().copied()).collect()
    }

    pub fn to_json(&self, p: &ValidatedProblem) -> String {
        #[derive(Serialize)]
        struct SubkernelRow {
            instruction: usize,
            kind: KernelKind,
            l: (u32, u32, u32),
            x_rows: usize,
            z_rows: usize,
            row_start: usize,
            col_start: usize,
            w_offset: usize,
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            schedule: &'a Schedule,
            subkernels: Vec<SubkernelRow>,
            weight_map: &'a Option<Vec<usize>>,
        }
        let subkernels = p
            .subkernels
            .iter()
            .map(|s| SubkernelRow {
                instruction: s.instruction,
                kind: s.kind,
                l: (s.block.l1, s.block.l2, s.block.l3),
                x_rows: s.x_rows,
                z_rows: s.z_rows,
                row_start: s.row_start,
                col_start: s.col_start,
                w_offset: s.w_offset,
            })
            .collect();
        serde_json::to_string_pretty(&Dump {
            schedule: self,
            subkernels,
            weight_map: &p.weight_map,
        })
        .expect("schedule serializes")
    }
}

/// Identity of a (split) problem; schedules refuse to run on anything else.
pub fn problem_fingerprint(p: &ValidatedProblem) -> u64 {
    let mut h = DefaultHasher::new();
    (p.x.to_string(), p.y.to_string(), p.z.to_string()).hash(&mut h);
    p.total_weights.hash(&mut h);
    p.lane_width.hash(&mut h);
    for s in &p.subkernels {
        (
            s.instruction,
            s.kind == KernelKind::B,
            s.block.l1,
            s.block.l2,
            s.block.l3,
            s.x_offset,
            s.y_offset,
            s.z_offset,
            s.x_rows,
            s.z_rows,
            s.w_offset,
        )
            .hash(&mut h);
    }
    h.finish()
}

/// Scratch words one subkernel needs resident.
pub fn working_set(sk: &Subkernel) -> usize {
    sk.x_len() + sk.y_dim() + sk.w_count() + sk.z_len()
}

fn label(sk: &Subkernel) -> String {
    format!(
        "instruction {} {} ({},{},{}) rows {}..{} cols {}..{}",
        sk.instruction + 1,
        sk.kind,
        sk.block.l1,
        sk.block.l2,
        sk.block.l3,
        sk.row_start,
        sk.row_start + sk.z_rows,
        sk.col_start,
        sk.col_start + sk.x_rows
    )
}

struct Ranges {
    ranges: Vec<Range>,
    index: HashMap<(Space, usize, usize), usize>,
}

impl Ranges {
    fn intern(&mut self, space: Space, offset: usize, len: usize) -> usize {
        let next = self.ranges.len();
        *self.index.entry((space, offset, len)).or_insert_with(|| {
            let addr = self.ranges.last().map_or(0, |r| r.addr + r.len);
            self.ranges.push(Range {
                space,
                offset,
                len,
                addr,
            });
            next
        })
    }
}

/// Builds a phase schedule for a split problem.
///
/// Everything resident at once gives a single phase. Otherwise, if x and y fit
/// alongside the largest z range plus its weights, x and y stay resident and
/// consecutive z ranges are grouped greedily per phase. Otherwise the greedy
/// strategy fills scratch in execution order and evicts the range whose next
/// use is farthest away.
///
/// Subkernels run ordered by z offset (stable in instruction order), so the
/// writers of each z range are consecutive.
pub fn build_schedule(p: &ValidatedProblem, budget_words: usize) -> Result<Schedule, ScheduleError> {
    let lane_width = p.lane_width.unwrap_or(DEFAULT_LANE_WIDTH);
    for (n, sk) in p.subkernels.iter().enumerate() {
        if sk.lanes() > lane_width {
            return Err(ScheduleError::NotSplit {
                subkernel: n,
                lanes: sk.lanes(),
                lane_width,
            });
        }
    }
    for (n, sk) in p.subkernels.iter().enumerate() {
        let needed = working_set(sk);
        if needed > budget_words {
            return Err(ScheduleError::BudgetTooSmall {
                subkernel: n,
                label: label(sk),
                needed,
                budget: budget_words,
            });
        }
    }

    let mut order: Vec<usize> = (0..p.subkernels.len()).collect();
    order.sort_by_key(|&n| p.subkernels[n].z_offset);

    let mut rs = Ranges {
        ranges: Vec::new(),
        index: HashMap::new(),
    };
    let mut footprints = vec![
        Footprint {
            x: 0,
            y: 0,
            w: 0,
            z: 0
        };
        p.subkernels.len()
    ];
    for &n in &order {
        let sk = &p.subkernels[n];
        footprints[n] = Footprint {
            x: rs.intern(Space::X, sk.x_offset, sk.x_len()),
            y: rs.intern(Space::Y, sk.y_offset, sk.y_dim()),
            w: rs.intern(Space::W, sk.w_offset, sk.w_count()),
            z: rs.intern(Space::Z, sk.z_offset, sk.z_len()),
        };
    }
    let ranges = rs.ranges;
    let total: usize = ranges.iter().map(|r| r.len).sum();

    let (strategy, phases) = if total <= budget_words {
        (Strategy::SinglePhase, single_phase(&order, &ranges))
    } else if let Some(phases) = stream_z(&order, &footprints, &ranges, budget_words) {
        (Strategy::StreamZ, phases)
    } else {
        (Strategy::Greedy, greedy(&order, &footprints, &ranges, budget_words))
    };

    let zero_fill = uncovered_z(p.dim_z(), &ranges);
    let subkernel_flops = p
        .subkernels
        .iter()
        .map(|sk| flop_count(&gen_forward(sk, lane_width)))
        .collect();
    let mut s = Schedule {
        strategy,
        budget_words,
        lane_width,
        fingerprint: problem_fingerprint(p),
        scratch_words: total,
        ranges,
        footprints,
        subkernel_flops,
        phases,
        zero_fill,
        traffic: TrafficReport::new(0, 0, 0),
    };
    s.traffic = traffic_report(&s);
    Ok(s)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn single_phase(order: &[usize], ranges: &[Range]) -> Vec<Phase> {
    let all: Vec<usize> = (0..ranges.len()).collect();
    let z: Vec<usize> = all.iter().copied().filter(|&r| ranges[r].space == Space::Z).collect();
    let loads = all.iter().copied().filter(|&r| ranges[r].space != Space::Z).collect();
    vec![Phase {
        resident: all.clone(),
        loads,
        z_init: z.clone(),
        subkernels: order.to_vec(),
        stores: z,
        released: all,
    }]
}

/// Consecutive runs of `order` sharing a z range.
fn z_runs(order: &[usize], fp: &[Footprint]) -> Vec<(usize, Vec<usize>)> {
    let mut runs: Vec<(usize, Vec<usize>)> = Vec::new();
    for &n in order {
        match runs.last_mut() {
            Some((z, members)) if *z == fp[n].z => members.push(n),
            _ => runs.push((fp[n].z, vec![n])),
        }
    }
    runs
}

fn stream_z(order: &[usize], fp: &[Footprint], ranges: &[Range], budget: usize) -> Option<Vec<Phase>> {
    let xy: Vec<usize> = sorted(order.iter().flat_map(|&n| [fp[n].x, fp[n].y]).collect());
    let xy_words: usize = xy.iter().map(|&r| ranges[r].len).sum();
    let runs = z_runs(order, fp);
    let run_words = |(z, members): &(usize, Vec<usize>)| -> usize {
        let ws: Vec<usize> = sorted(members.iter().map(|&n| fp[n].w).collect());
        ranges[*z].len + ws.iter().map(|&w| ranges[w].len).sum::<usize>()
    };
    if runs.iter().any(|r| xy_words + run_words(r) > budget) {
        return None;
    }
    let mut groups: Vec<Vec<&(usize, Vec<usize>)>> = Vec::new();
    let mut used = 0;
    for run in &runs {
        let w = run_words(run);
        match groups.last_mut() {
            Some(g) if xy_words + used + w <= budget => {
                g.push(run);
                used += w;
            }
            _ => {
                groups.push(vec![run]);
                used = w;
            }
        }
    }
    let last = groups.len().saturating_sub(1);
    let phases = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let subkernels: Vec<usize> = g.iter().flat_map(|(_, m)| m.iter().copied()).collect();
            let z: Vec<usize> = g.iter().map(|(z, _)| *z).collect();
            let w = sorted(subkernels.iter().map(|&n| fp[n].w).collect());
            let mut loads = w.clone();
            if gi == 0 {
                loads.extend(&xy);
            }
            let mut released: Vec<usize> = w.iter().chain(&z).copied().collect();
            if gi == last {
                released.extend(&xy);
            }
            Phase {
                resident: sorted(xy.iter().chain(&w).chain(&z).copied().collect()),
                loads: sorted(loads),
                z_init: z.clone(),
                subkernels,
                stores: z,
                released: sorted(released),
            }
        })
        .collect();
    Some(phases)
}

fn greedy(order: &[usize], fp: &[Footprint], ranges: &[Range], budget: usize) -> Vec<Phase> {
    // Positions (in `order`) at which each range is used.
    let mut uses: Vec<Vec<usize>> = vec![Vec::new(); ranges.len()];
    for (pos, &n) in order.iter().enumerate() {
        for r in fp[n].ids() {
            if uses[r].last() != Some(&pos) {
                uses[r].push(pos);
            }
        }
    }
    let next_use = |r: usize, pos: usize| -> usize {
        let u = &uses[r];
        let i = u.partition_point(|&p| p < pos);
        u.get(i).copied().unwrap_or(usize::MAX)
    };
    let last_use = |r: usize| *uses[r].last().expect("interned ranges are used");

    let mut resident: Vec<bool> = vec![false; ranges.len()];
    let mut used = 0usize;
    let mut phases: Vec<Phase> = Vec::new();
    let mut pos = 0;
    while pos < order.len() {
        let needs = |resident: &[bool], n: usize| -> Vec<usize> {
            sorted(fp[n].ids().into_iter().filter(|&r| !resident[r]).collect())
        };
        let first = order[pos];
        let mut want = needs(&resident, first);
        let mut evicted = Vec::new();
        while used + want.iter().map(|&r| ranges[r].len).sum::<usize>() > budget {
            let keep = fp[first].ids();
            let victim = (0..ranges.len())
                .filter(|&r| resident[r] && !keep.contains(&r) && ranges[r].space != Space::Z)
                .max_by_key(|&r| (next_use(r, pos), ranges[r].len, r))
                .expect("budget covers every working set");
            resident[victim] = false;
            used -= ranges[victim].len;
            evicted.push(victim);
        }
        if let Some(prev) = phases.last_mut() {
            prev.released = sorted(prev.released.iter().chain(&evicted).copied().collect());
        }
        let mut phase = Phase {
            resident: Vec::new(),
            loads: Vec::new(),
            z_init: Vec::new(),
            subkernels: Vec::new(),
            stores: Vec::new(),
            released: Vec::new(),
        };
        loop {
            for &r in &want {
                resident[r] = true;
                used += ranges[r].len;
                if ranges[r].space == Space::Z {
                    phase.z_init.push(r);
                } else {
                    phase.loads.push(r);
                }
            }
            phase.subkernels.push(order[pos]);
            pos += 1;
            if pos == order.len() {
                break;
            }
            want = needs(&resident, order[pos]);
            if used + want.iter().map(|&r| ranges[r].len).sum::<usize>() > budget {
                break;
            }
        }
        phase.resident = (0..ranges.len()).filter(|&r| resident[r]).collect();
        for r in phase.resident.clone() {
            if ranges[r].space == Space::Z && last_use(r) < pos {
                phase.stores.push(r);
                resident[r] = false;
                used -= ranges[r].len;
            }
        }
        phase.released = phase.stores.clone();
        phase.loads = sorted(phase.loads);
        phase.z_init = sorted(phase.z_init);
        phases.push(phase);
    }
    if let Some(last) = phases.last_mut() {
        last.released = sorted(last.resident.clone());
    }
    phases
}

fn uncovered_z(dim_z: usize, ranges: &[Range]) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = ranges
        .iter()
        .filter(|r| r.space == Space::Z)
        .map(|r| (r.offset, r.offset + r.len))
        .collect();
    spans.sort_unstable();
    let mut out = Vec::new();
    let mut at = 0;
    for (s, e) in spans {
        if s > at {
            out.push((at, s - at));
        }
        at = at.max(e);
    }
    if at < dim_z {
        out.push((at, dim_z - at));
    }
    out
}

/// Loads are the lengths of ranges loaded at each phase start; stores are the
/// z ranges written back plus the zero-filled spans.
pub fn traffic_report(s: &Schedule) -> TrafficReport {
    let len = |r: &usize| s.ranges[*r].len as u64;
    let loads = s.phases.iter().flat_map(|ph| ph.loads.iter()).map(len).sum();
    let stores = s.phases.iter().flat_map(|ph| ph.stores.iter()).map(len).sum::<u64>()
        + s.zero_fill.iter().map(|&(_, n)| n as u64).sum::<u64>();
    TrafficReport::new(loads, stores, s.subkernel_flops.iter().sum())
}

/// Traffic of the per-instruction baseline: every subkernel loads its x rows,
/// y segment and weights, read-modify-writes its z rows (plain store for the
/// first writer), and unwritten z is zero-filled.
pub fn naive_traffic(p: &ValidatedProblem) -> TrafficReport {
    let lane_width = p.lane_width.unwrap_or(DEFAULT_LANE_WIDTH);
    let mut seen = std::collections::HashSet::new();
    let (mut loads, mut stores, mut flops) = (0u64, 0u64, 0u64);
    let mut covered = vec![false; p.dim_z()];
    for sk in &p.subkernels {
        loads += (sk.x_len() + sk.y_dim() + sk.w_count()) as u64;
        if !seen.insert((sk.z_offset, sk.z_len())) {
            loads += sk.z_len() as u64;
        }
        stores += sk.z_len() as u64;
        covered[sk.z_offset..sk.z_offset + sk.z_len()].fill(true);
        flops += flop_count(&gen_forward(sk, lane_width));
    }
    stores += covered.iter().filter(|c| !**c).count() as u64;
    TrafficReport::new(loads, stores, flops)
}

/// Checks the structural schedule invariants; returns a description of the
/// first violation.
pub fn check_invariants(p: &ValidatedProblem, s: &Schedule) -> Result<(), String> {
    if s.fingerprint != problem_fingerprint(p) {
        return Err("fingerprint mismatch".into());
    }
    let mut seen = vec![0usize; p.subkernels.len()];
    let mut resident = vec![false; s.ranges.len()];
    let mut z_done = vec![false; s.ranges.len()];
    let mut z_last_phase: Vec<Option<usize>> = vec![None; s.ranges.len()];
    for (pi, ph) in s.phases.iter().enumerate() {
        for &r in ph.loads.iter().chain(&ph.z_init) {
            if resident[r] {
                return Err(format!("phase {pi}: range {r} loaded while resident"));
            }
            resident[r] = true;
        }
        let now: Vec<usize> = (0..s.ranges.len()).filter(|&r| resident[r]).collect();
        if now != ph.resident {
            return Err(format!("phase {pi}: resident set disagrees with loads"));
        }
        let words = ph.resident_words(&s.ranges);
        if words > s.budget_words {
            return Err(format!("phase {pi}: {words} resident words exceed budget {}", s.budget_words));
        }
        for &n in &ph.subkernels {
            seen[n] += 1;
            for r in s.footprints[n].ids() {
                if !resident[r] {
                    return Err(format!("phase {pi}: subkernel {n} touches non-resident range {r}"));
                }
            }
            let z = s.footprints[n].z;
            if z_done[z] {
                return Err(format!("phase {pi}: z range {z} written after it was stored"));
            }
            if let Some(prev) = z_last_phase[z] {
                if prev + 1 < pi {
                    return Err(format!("z range {z} written in non-contiguous phases"));
                }
            }
            z_last_phase[z] = Some(pi);
        }
        for &r in &ph.stores {
            if s.ranges[r].space != Space::Z || !resident[r] {
                return Err(format!("phase {pi}: bad store of range {r}"));
            }
            z_done[r] = true;
        }
        for &r in &ph.released {
            if s.ranges[r].space == Space::Z && !z_done[r] {
                return Err(format!("phase {pi}: z range {r} released before store"));
            }
            resident[r] = false;
        }
    }
    if let Some(n) = seen.iter().position(|&c| c != 1) {
        return Err(format!("subkernel {n} executed {} times", seen[n]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpspec::example_problem;

    fn example() -> ValidatedProblem {
        split_multiplicities(&example_problem().validate().unwrap(), DEFAULT_LANE_WIDTH)
    }

    fn problem(x: &str, y: &str, z: &str, ins: &[(usize, usize, usize, KernelKind)]) -> ValidatedProblem {
        crate::tpspec::ProblemSpec {
            x: x.into(),
            y: y.into(),
            z: z.into(),
            instructions: ins.to_vec(),
        }
        .validate()
        .unwrap()
    }

    #[test]
    fn split_b_64_into_two() {
        let p = problem("64x1e", "1x1e", "64x1e", &[(1, 1, 1, KernelKind::B)]);
        let s = split_multiplicities(&p, 32);
        assert_eq!(s.subkernels.len(), 2);
        assert_eq!((s.subkernels[0].z_rows, s.subkernels[1].z_rows), (32, 32));
        assert_eq!(s.subkernels[1].x_offset, 96);
        assert_eq!(s.subkernels[1].z_offset, 96);
        assert_eq!(s.subkernels[1].w_offset, 32);
        assert!(s.weight_map.is_none());
    }

    #[test]
    fn split_b_32_unchanged() {
        let p = problem("32x1e", "1x1e", "32x1e", &[(1, 1, 1, KernelKind::B)]);
        let s = split_multiplicities(&p, 32);
        assert_eq!(s.subkernels, p.subkernels);
        assert_eq!(s.lane_width, Some(32));
    }

    #[test]
    fn split_c_48_by_32() {
        let p = problem("48x1e", "1x1e", "32x1e", &[(1, 1, 1, KernelKind::C)]);
        let s = split_multiplicities(&p, 32);
        let cols: Vec<_> = s.subkernels.iter().map(|k| (k.col_start, k.x_rows)).collect();
        assert_eq!(cols, vec![(0, 32), (32, 16)]);
        let map = s.weight_map.as_ref().unwrap();
        assert_eq!(map.len(), 48 * 32);
        // second chunk starts at row 0, column 32 of the 32x48 matrix
        assert_eq!(map[32 * 32], 32);
        assert_eq!(map[32 * 32 + 16], 48 + 32);
        let mut sorted_map = map.clone();
        sorted_map.sort_unstable();
        assert_eq!(sorted_map, (0..48 * 32).collect::<Vec<_>>());
    }

    #[test]
    fn single_phase_traffic_touches_each_word_once() {
        let p = split_multiplicities(
            &problem(
                "4x1e + 2x0e",
                "1x1e + 1x0e",
                "4x1e + 2x1e",
                &[(1, 1, 1, KernelKind::B), (2, 1, 2, KernelKind::C), (1, 2, 1, KernelKind::C)],
            ),
            32,
        );
        let s = build_schedule(&p, 100_000).unwrap();
        assert_eq!(s.strategy, Strategy::SinglePhase);
        let t = traffic_report(&s);
        assert_eq!(t.loads_words, (p.dim_x() + p.dim_y() + p.total_weights) as u64);
        assert_eq!(t.stores_words, p.dim_z() as u64);
    }

    #[test]
    fn example_single_phase() {
        let p = example();
        let s = build_schedule(&p, 100_000).unwrap();
        assert_eq!(s.strategy, Strategy::SinglePhase);
        assert_eq!(s.phases.len(), 1);
        let t = traffic_report(&s);
        // the 32x1e x segment is never read, so only 32x2e is loaded
        assert_eq!(t.loads_words, (160 + 10 + 1568) as u64);
        assert_eq!(t.stores_words, 656);
        check_invariants(&p, &s).unwrap();
    }

    #[test]
    fn example_stream_z_at_segment_budget() {
        let p = example();
        let budget = 256 + 10 + 352 + 1024;
        let s = build_schedule(&p, budget).unwrap();
        assert_eq!(s.strategy, Strategy::StreamZ);
        // z segments 1 and 2 with their weights share a phase
        assert_eq!(s.phases.len(), 2);
        assert_eq!(s.phases[0].stores.len(), 2);
        assert_eq!(s.phases[1].stores.len(), 1);
        assert_eq!(traffic_report(&s).stores_words, 656);
        check_invariants(&p, &s).unwrap();
    }

    #[test]
    fn stream_z_one_phase_per_segment() {
        let p = split_multiplicities(
            &problem(
                "8x1e",
                "1x1e",
                "8x1e + 8x1e + 8x1e",
                &[(1, 1, 1, KernelKind::C), (1, 1, 2, KernelKind::C), (1, 1, 3, KernelKind::C)],
            ),
            32,
        );
        // x + y + one z segment + one 8x8 weight block
        let s = build_schedule(&p, 24 + 3 + 24 + 64).unwrap();
        assert_eq!(s.strategy, Strategy::StreamZ);
        assert_eq!(s.phases.len(), 3);
        assert_eq!(traffic_report(&s).stores_words, 72);
        assert_eq!(traffic_report(&s).loads_words, 24 + 3 + 3 * 64);
        check_invariants(&p, &s).unwrap();
    }

    #[test]
    fn example_greedy() {
        let p = example();
        // below x + y + z3 + W3 = 1418, above the largest working set 1411
        let s = build_schedule(&p, 1415).unwrap();
        assert_eq!(s.strategy, Strategy::Greedy);
        check_invariants(&p, &s).unwrap();
        let mut replay = s.order();
        replay.sort_unstable();
        assert_eq!(replay, (0..p.subkernels.len()).collect::<Vec<_>>());
        let single = traffic_report(&build_schedule(&p, 100_000).unwrap());
        let t = traffic_report(&s);
        assert!(t.stores_words >= 656);
        assert!(t.loads_words >= single.loads_words);
    }

    #[test]
    fn budget_too_small_names_subkernel() {
        let p = example();
        match build_schedule(&p, 1000) {
            Err(ScheduleError::BudgetTooSmall { subkernel, label, needed, .. }) => {
                assert_eq!(subkernel, 2);
                assert_eq!(needed, 1411);
                assert!(label.contains("instruction 3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsplit_problem_rejected() {
        let p = problem("64x0e", "1x0e", "64x0e", &[(1, 1, 1, KernelKind::B)]);
        assert!(matches!(build_schedule(&p, 100_000), Err(ScheduleError::NotSplit { .. })));
    }

    #[test]
    fn unwritten_z_is_zero_filled() {
        let p = split_multiplicities(
            &problem("2x0e", "1x0e", "2x1e + 2x0e + 3x2e", &[(1, 1, 2, KernelKind::B)]),
            32,
        );
        let s = build_schedule(&p, 100_000).unwrap();
        assert_eq!(s.zero_fill, vec![(0, 6), (8, 15)]);
        assert_eq!(traffic_report(&s).stores_words, p.dim_z() as u64);
    }

    #[test]
    fn stream_z_beats_naive() {
        let p = example();
        for budget in [1415, 1642, 4096] {
            let s = build_schedule(&p, budget).unwrap();
            let t = traffic_report(&s);
            let n = naive_traffic(&p);
            assert!(t.loads_words + t.stores_words <= n.loads_words + n.stores_words);
            assert_eq!(t.flops, n.flops);
        }
    }

    #[test]
    fn deterministic_and_json() {
        let p = example();
        let a = build_schedule(&p, 1415).unwrap();
        let b = build_schedule(&p, 1415).unwrap();
        assert_eq!(a, b);
        let text = a.to_json(&p);
        assert_eq!(text, b.to_json(&p));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schedule"]["strategy"], "greedy");
        assert_eq!(v["subkernels"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn intensity_consistent() {
        let s = build_schedule(&example(), 100_000).unwrap();
        let t = s.traffic;
        let expect = t.flops as f64 / (8.0 * (t.loads_words + t.stores_words) as f64);
        assert!((t.arithmetic_intensity - expect).abs() < 1e-12);
        assert!((t.intensity(4) - 2.0 * expect).abs() < 1e-12);
    }
}
