use cgforge::conv::{
    carbon_lattice, load_xyz, parse_xyz, radius_graph, transpose_permutation, unfused_backward, unfused_forward, Conv,
    ConvMode, Geometry, GraphCSR,
};
use cgforge::engine::{tp_backward, tp_forward, Engine, EngineConfig};
use cgforge::error::ConvError;
use cgforge::oracle::{fd_jvp, rel_error, unit_directions};
use cgforge::random::{rng, unit_rms};
use cgforge::tpspec::{example_problem, KernelKind, ProblemSpec, ValidatedProblem};
use rand::Rng;

fn small_problem() -> ValidatedProblem {
    ProblemSpec {
        x: "4x0e + 3x1o".into(),
        y: "1x0e + 1x1o".into(),
        z: "4x1o + 5x0e + 3x2e".into(),
        instructions: vec![
            (1, 2, 1, KernelKind::B),
            (2, 2, 2, KernelKind::C),
            (2, 1, 1, KernelKind::C),
            (2, 2, 3, KernelKind::C),
        ],
    }
    .validate()
    .unwrap()
}

fn random_graph(n: usize, p: f64, seed: u64) -> GraphCSR {
    let mut r = rng(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && r.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    GraphCSR::from_edges(n, edges).unwrap()
}

struct Inputs {
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    gz: Vec<f64>,
}

fn inputs(p: &ValidatedProblem, g: &GraphCSR, seed: u64) -> Inputs {
    let mut r = rng(seed);
    Inputs {
        x: unit_rms(&mut r, g.node_count * p.dim_x()),
        y: unit_rms(&mut r, g.edges.len() * p.dim_y()),
        w: unit_rms(&mut r, g.edges.len() * p.total_weights),
        gz: unit_rms(&mut r, g.node_count * p.dim_z()),
    }
}

fn conv(p: &ValidatedProblem, budget: usize, workers: usize) -> Conv<f64> {
    Conv::compile(p, budget, workers).unwrap()
}

fn engine(p: &ValidatedProblem) -> Engine<f64> {
    Engine::compile(p, 1 << 20, EngineConfig::default()).unwrap()
}

#[test]
fn xyz_two_atoms() {
    let g = parse_xyz("2\nwater fragment\nO 0.0 0.0 0.0\nH 0.96 0.0 0.0\n").unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.species, vec!["O", "H"]);
    assert_eq!(g.positions[1], [0.96, 0.0, 0.0]);
}

#[test]
fn xyz_empty() {
    assert!(parse_xyz("0\n\n").unwrap().is_empty());
    assert!(parse_xyz("0\n").unwrap().is_empty());
}

#[test]
fn xyz_count_mismatch() {
    assert!(matches!(parse_xyz("3\nc\nC 0 0 0\nC 1 0 0\n"), Err(ConvError::Xyz { .. })));
    match parse_xyz("1\nc\nC 0 0 0\nC 1 0 0\n") {
        Err(ConvError::Xyz { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn xyz_parse_errors_carry_line_numbers() {
    match parse_xyz("two\nc\n") {
        Err(ConvError::Xyz { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
    match parse_xyz("2\nc\nC 0 0 0\nC 1 abc 0\n") {
        Err(ConvError::Xyz { line, reason }) => {
            assert_eq!(line, 4);
            assert!(reason.contains("abc"));
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_xyz("1\nc\nC 0 nan 0\n").is_err());
    assert!(parse_xyz("").is_err());
}

#[test]
fn xyz_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.xyz");
    std::fs::write(&path, "1\n\nC 1 2 3\n").unwrap();
    assert_eq!(load_xyz(&path).unwrap().positions, vec![[1.0, 2.0, 3.0]]);
    assert!(matches!(load_xyz(dir.path().join("missing.xyz")), Err(ConvError::Io(_))));
}

fn pair(d: f64) -> Geometry {
    Geometry {
        species: vec!["C".into(), "C".into()],
        positions: vec![[0.0, 0.0, 0.0], [d, 0.0, 0.0]],
    }
}

#[test]
fn radius_graph_pair() {
    let g = radius_graph(&pair(1.0), 1.5);
    assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
    assert_eq!(g.row_ptr, vec![0, 1, 2]);
    assert!(radius_graph(&pair(1.0), 0.5).edges.is_empty());
}

#[test]
fn radius_graph_matches_brute_force() {
    let mut r = rng(5);
    let geo = Geometry {
        species: vec!["C".into(); 200],
        positions: (0..200)
            .map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)])
            .collect(),
    };
    for cut in [0.7, 1.9, 4.0] {
        let mut brute = Vec::new();
        for (i, a) in geo.positions.iter().enumerate() {
            for (j, b) in geo.positions.iter().enumerate() {
                let d2: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
                if i != j && d2 <= cut * cut {
                    brute.push((i, j));
                }
            }
        }
        let g = radius_graph(&geo, cut);
        assert_eq!(g.edges, brute);
        assert_eq!(g.first_unsorted(), None);
    }
}

#[test]
fn lattice_has_1000_atoms() {
    assert_eq!(carbon_lattice(5).len(), 1000);
}

#[test]
fn transpose_permutation_pair() {
    let g = GraphCSR::from_edges(2, vec![(0, 1), (1, 0)]).unwrap();
    assert_eq!(transpose_permutation(&g), vec![1, 0]);
}

#[test]
fn transpose_permutation_matches_resort() {
    let g = random_graph(40, 0.2, 3);
    let perm = transpose_permutation(&g);
    let t = g.transpose();
    for (e, &(i, j)) in g.edges.iter().enumerate() {
        assert_eq!(t.edges[perm[e]], (j, i));
    }
    let back = transpose_permutation(&t);
    assert!((0..perm.len()).all(|e| back[perm[e]] == e));
}

#[test]
fn graph_json_round_trip() {
    let g = random_graph(10, 0.3, 4);
    let text = g.to_json();
    assert!(text.starts_with("{\"nodes\":10,\"edges\":[["));
    assert_eq!(GraphCSR::from_json(&text).unwrap(), g);
    assert!(matches!(
        GraphCSR::from_edges(2, vec![(0, 2)]),
        Err(ConvError::NodeOutOfRange { edge: 0, node: 2, nodes: 2 })
    ));
}

#[test]
fn no_edges_gives_zero() {
    let p = small_problem();
    let g = GraphCSR::from_edges(3, Vec::new()).unwrap();
    let inp = inputs(&p, &g, 1);
    for mode in [ConvMode::Deterministic, ConvMode::Atomic] {
        let out = conv(&p, 4096, 2).forward(&g, &inp.x, &[], &[], mode).unwrap();
        assert!(out.z.iter().all(|&v| v == 0.0));
        assert_eq!(out.z.len(), 3 * p.dim_z());
    }
}

#[test]
fn single_edge_equals_tensor_product() {
    let p = small_problem();
    // node 1 receives from node 0
    let g = GraphCSR::from_edges(2, vec![(1, 0)]).unwrap();
    let inp = inputs(&p, &g, 2);
    let c = conv(&p, 4096, 1);
    let z = c.forward(&g, &inp.x, &inp.y, &inp.w, ConvMode::Deterministic).unwrap().z;
    let dz = p.dim_z();
    let single = tp_forward(c.problem(), c.schedule(), 1, &inp.x[..p.dim_x()], &inp.y, &inp.w).unwrap();
    assert!(z[..dz].iter().all(|&v| v == 0.0));
    assert_eq!(&z[dz..], &single[..]);

    let perm = transpose_permutation(&g);
    let b = c.backward(&g, &perm, &inp.x, &inp.y, &inp.w, &inp.gz, ConvMode::Deterministic).unwrap();
    let (gx, gy, gw) =
        tp_backward(c.problem(), c.schedule(), 1, &inp.x[..p.dim_x()], &inp.y, &inp.w, &inp.gz[dz..]).unwrap();
    assert_eq!(&b.gx[..p.dim_x()], &gx[..]);
    assert!(b.gx[p.dim_x()..].iter().all(|&v| v == 0.0));
    assert_eq!(b.gy, gy);
    assert_eq!(b.gw, gw);
}

#[test]
fn forward_matches_unfused_reference() {
    let p = example_problem().validate().unwrap();
    let g = random_graph(100, 0.08, 7);
    let inp = inputs(&p, &g, 8);
    let want = unfused_forward(&engine(&p), &g, &inp.x, &inp.y, &inp.w).unwrap();
    for budget in [1 << 20, 1642, 1415] {
        let c = conv(&p, budget, 1);
        let det = c.forward(&g, &inp.x, &inp.y, &inp.w, ConvMode::Deterministic).unwrap();
        assert!(rel_error(&det.z, &want.z) <= 1e-13, "budget {budget}");
        let at = c.forward(&g, &inp.x, &inp.y, &inp.w, ConvMode::Atomic).unwrap();
        assert!(rel_error(&at.z, &det.z) <= 1e-10);
    }
}

#[test]
fn deterministic_forward_is_bitwise_stable() {
    let p = small_problem();
    let g = random_graph(120, 0.1, 9);
    let inp = inputs(&p, &g, 10);
    let base = conv(&p, 40, 1).forward(&g, &inp.x, &inp.y, &inp.w, ConvMode::Deterministic).unwrap();
    for workers in [1, 2, 3, 8] {
        let c = conv(&p, 40, workers);
        for _ in 0..2 {
            let out = c.forward(&g, &inp.x, &inp.y, &inp.w, ConvMode::Deterministic).unwrap();
            assert_eq!(out.z, base.z);
            assert_eq!(out.counters, base.counters);
        }
    }
}

#[test]
fn atomic_mode_accepts_unsorted_edges() {
    let p = small_problem();
    let sorted = random_graph(30, 0.2, 11);
    let mut edges = sorted.edges.clone();
    edges.reverse();
    let g = GraphCSR::from_edges(30, edges).unwrap();
    let inp = inputs(&p, &sorted, 12);
    let c = conv(&p, 4096, 4);
    assert!(matches!(
        c.forward(&g, &inp.x, &inp.y, &inp.w, ConvMode::Deterministic),
        Err(ConvError::UnsortedEdges { edge: 1 })
    ));
    // per-edge data follows the edge list
    let m = g.edges.len();
    let (dy, nw) = (p.dim_y(), p.total_weights);
    let rev = |v: &[f64], c: usize| (0..m).rev().flat_map(|e| v[e * c..(e + 1) * c].to_vec()).collect::<Vec<_>>();
    let at = c.forward(&g, &inp.x, &rev(&inp.y, dy), &rev(&inp.w, nw), ConvMode::Atomic).unwrap();
    let det = c.forward(&sorted, &inp.x, &inp.y, &inp.w, ConvMode::Deterministic).unwrap();
    assert!(rel_error(&at.z, &det.z) <= 1e-10);
}

#[test]
fn shape_and_permutation_errors() {
    let p = small_problem();
    let g = random_graph(5, 0.5, 13);
    let inp = inputs(&p, &g, 14);
    let c = conv(&p, 4096, 1);
    assert!(matches!(
        c.forward(&g, &inp.x[1..], &inp.y, &inp.w, ConvMode::Deterministic),
        Err(ConvError::Shape(_))
    ));
    let perm = transpose_permutation(&g);
    let det = ConvMode::Deterministic;
    assert!(matches!(
        c.backward(&g, &perm[1..], &inp.x, &inp.y, &inp.w, &inp.gz, det),
        Err(ConvError::PermutationLength { .. })
    ));
    let identity: Vec<usize> = (0..perm.len()).collect();
    assert!(matches!(
        c.backward(&g, &identity, &inp.x, &inp.y, &inp.w, &inp.gz, det),
        Err(ConvError::BadPermutation { .. })
    ));
    let mut dup = perm.clone();
    dup[0] = dup[1];
    assert!(matches!(
        c.backward(&g, &dup, &inp.x, &inp.y, &inp.w, &inp.gz, det),
        Err(ConvError::BadPermutation { .. })
    ));
}

#[test]
fn backward_zero_upstream() {
    let p = small_problem();
    let g = random_graph(20, 0.2, 15);
    let inp = inputs(&p, &g, 16);
    let zero = vec![0.0; inp.gz.len()];
    let perm = transpose_permutation(&g);
    let b = conv(&p, 4096, 2)
        .backward(&g, &perm, &inp.x, &inp.y, &inp.w, &zero, ConvMode::Deterministic)
        .unwrap();
    assert!(b.gx.iter().chain(&b.gy).chain(&b.gw).all(|&v| v == 0.0));
}

#[test]
fn backward_matches_unfused_and_finite_differences() {
    let p = small_problem();
    let g = random_graph(25, 0.15, 17);
    let inp = inputs(&p, &g, 18);
    let perm = transpose_permutation(&g);
    let want = unfused_backward(&engine(&p), &g, &inp.x, &inp.y, &inp.w, &inp.gz).unwrap();
    for budget in [4096, 60, 40] {
        let c = conv(&p, budget, 1);
        for mode in [ConvMode::Deterministic, ConvMode::Atomic] {
            let b = c.backward(&g, &perm, &inp.x, &inp.y, &inp.w, &inp.gz, mode).unwrap();
            assert!(rel_error(&b.gx, &want.gx) <= 1e-12, "budget {budget}");
            assert!(rel_error(&b.gy, &want.gy) <= 1e-12);
            assert!(rel_error(&b.gw, &want.gw) <= 1e-12);
        }
        let b = c.backward(&g, &perm, &inp.x, &inp.y, &inp.w, &inp.gz, ConvMode::Deterministic).unwrap();
        let loss = |x: &[f64]| {
            let z = c.forward(&g, x, &inp.y, &inp.w, ConvMode::Deterministic).unwrap().z;
            vec![z.iter().zip(&inp.gz).map(|(a, b)| a * b).sum::<f64>()]
        };
        let fd: Vec<f64> = unit_directions(inp.x.len()).iter().map(|d| fd_jvp(loss, &inp.x, d, 1e-5)[0]).collect();
        assert!(rel_error(&b.gx, &fd) <= 1e-6);
    }
}

#[test]
fn deterministic_backward_is_bitwise_stable() {
    let p = small_problem();
    let g = random_graph(60, 0.15, 19);
    let inp = inputs(&p, &g, 20);
    let perm = transpose_permutation(&g);
    let run = |workers| {
        conv(&p, 40, workers)
            .backward(&g, &perm, &inp.x, &inp.y, &inp.w, &inp.gz, ConvMode::Deterministic)
            .unwrap()
    };
    let base = run(1);
    for workers in [2, 8] {
        let b = run(workers);
        assert_eq!((b.gx, b.gy, b.gw), (base.gx.clone(), base.gy.clone(), base.gw.clone()));
    }
}

#[test]
fn fused_counters_beat_unfused() {
    let p = small_problem();
    let g = random_graph(50, 0.3, 21);
    assert!(g.edges.len() > g.node_count);
    let inp = inputs(&p, &g, 22);
    let c = conv(&p, 1 << 20, 2);
    assert_eq!(c.schedule().phases.len(), 1);
    let fused = c.forward(&g, &inp.x, &inp.y, &inp.w, ConvMode::Deterministic).unwrap().counters;
    let unfused = unfused_forward(&engine(&p), &g, &inp.x, &inp.y, &inp.w).unwrap().counters;
    assert_eq!(unfused.node_writes, g.edges.len() as u64);
    assert!(fused.node_writes < unfused.node_writes);
    // one segment per node plus at most one fixup per logical warp
    assert!(fused.node_writes <= (g.node_count + cgforge::conv::LOGICAL_WARPS) as u64);
    assert!(fused.stores < unfused.stores);
    assert!(fused.node_reads <= (g.edges.len() * p.dim_x()) as u64);
    assert_eq!(fused.flops, unfused.flops);
}
