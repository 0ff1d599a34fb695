//! C ABI for the cgforge tensor-product engine.
//!
//! Buffers are dense row-major arrays. A buffer described as `rows x n`
//! must hold at least `rows * n` elements.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cgforge::conv::{Conv, ConvMode, GraphCSR};
use cgforge::engine::{Counters, Engine, EngineConfig};
use cgforge::error::{ConvError, EngineError, ScheduleError};
use cgforge::real::Real;
use cgforge::tpspec::{ProblemSpec, SpecError, ValidatedProblem};

/// Status returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidSpec = 3,
    InvalidIrreps = 4,
    BudgetTooSmall = 5,
    Shape = 6,
    InvalidGraph = 7,
    Panic = 8,
}

/// Edge aggregation order for graph convolution.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgfConvMode {
    Deterministic = 0,
    Atomic = 1,
}

/// Global-memory traffic and arithmetic for one call.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CgfCounters {
    pub loads: u64,
    pub stores: u64,
    pub flops: u64,
}

/// Feature dimensions of a compiled problem.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CgfDims {
    pub dim_x: usize,
    pub dim_y: usize,
    pub dim_z: usize,
    pub weights: usize,
}

/// Compiled tensor product for fp64 and fp32.
pub struct CgfEngine {
    problem: ValidatedProblem,
    f64: Engine<f64>,
    f32: Engine<f32>,
    conv: Conv<f64>,
}

/// Graph in CSR edge order.
pub struct CgfGraph {
    graph: GraphCSR,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

struct Failure(CgfStatus, String);

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        let status = match e {
            SpecError::Irreps { .. } => CgfStatus::InvalidIrreps,
            _ => CgfStatus::InvalidSpec,
        };
        Failure(status, e.to_string())
    }
}

impl From<ScheduleError> for Failure {
    fn from(e: ScheduleError) -> Self {
        Failure(CgfStatus::BudgetTooSmall, e.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure(CgfStatus::Shape, e.to_string())
    }
}

impl From<ConvError> for Failure {
    fn from(e: ConvError) -> Self {
        let status = match e {
            ConvError::Shape(_) | ConvError::Engine(_) | ConvError::PermutationLength { .. } => CgfStatus::Shape,
            _ => CgfStatus::InvalidGraph,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CgfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CgfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            CgfStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(CgfStatus::NullPointer, format!("{name} is null"))
}

unsafe fn input<'a, T>(name: &str, p: *const T, len: usize) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(name: &str, p: *mut T, len: usize) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn engine<'a>(e: *const CgfEngine) -> Result<&'a CgfEngine, Failure> {
    e.as_ref().ok_or_else(|| null("engine"))
}

unsafe fn graph<'a>(g: *const CgfGraph) -> Result<&'a CgfGraph, Failure> {
    g.as_ref().ok_or_else(|| null("graph"))
}

fn write_counters(out: *mut CgfCounters, c: CgfCounters) {
    if let Some(o) = unsafe { out.as_mut() } {
        *o = c;
    }
}

fn to_c(c: &Counters) -> CgfCounters {
    CgfCounters {
        loads: c.loads,
        stores: c.stores,
        flops: c.flops,
    }
}

impl CgfEngine {
    fn dims(&self) -> CgfDims {
        CgfDims {
            dim_x: self.problem.dim_x(),
            dim_y: self.problem.dim_y(),
            dim_z: self.problem.dim_z(),
            weights: self.problem.total_weights,
        }
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cgf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cgf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Compiles a problem given as JSON under a scratch budget in words.
/// `workers` of 0 means one worker.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cgf_engine_create(
    spec_json: *const c_char,
    budget_words: usize,
    workers: usize,
    out: *mut *mut CgfEngine,
) -> CgfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if spec_json.is_null() {
            return Err(null("spec_json"));
        }
        let text = CStr::from_ptr(spec_json)
            .to_str()
            .map_err(|e| Failure(CgfStatus::InvalidUtf8, e.to_string()))?;
        let spec = ProblemSpec::from_json(text)?;
        let problem = spec.validate()?;
        let config = EngineConfig {
            workers: workers.max(1),
            ..EngineConfig::default()
        };
        let f64 = Engine::compile(&problem, budget_words, config)?;
        let f32 = Engine::new(f64.problem(), f64.schedule(), config)?;
        let conv = Conv::new(f64.problem(), f64.schedule(), config.workers)?;
        *out = Box::into_raw(Box::new(CgfEngine { problem, f64, f32, conv }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `e` must come from `cgf_engine_create` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgf_engine_free(e: *mut CgfEngine) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Writes the feature dimensions of the compiled problem.
///
/// # Safety
/// `e` must be a live engine and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cgf_engine_dims(e: *const CgfEngine, out: *mut CgfDims) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        *out.as_mut().ok_or_else(|| null("out"))? = e.dims();
        Ok(())
    })
}

/// Sets the worker count used by later calls. 0 means one worker.
///
/// # Safety
/// `e` must be a live engine not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn cgf_engine_set_workers(e: *mut CgfEngine, workers: usize) -> CgfStatus {
    guard(|| {
        let e = e.as_mut().ok_or_else(|| null("engine"))?;
        let config = EngineConfig {
            workers: workers.max(1),
            ..e.f64.config()
        };
        e.f64.set_config(config);
        e.f32.set_config(config);
        e.conv.set_workers(workers.max(1));
        Ok(())
    })
}

/// Serialized schedule JSON. Free with `cgf_string_free`.
///
/// # Safety
/// `e` must be a live engine.
#[no_mangle]
pub unsafe extern "C" fn cgf_engine_schedule_json(e: *const CgfEngine) -> *mut c_char {
    let Ok(e) = engine(e) else {
        set_error("engine is null");
        return ptr::null_mut();
    };
    let text = serde_json::to_string(e.f64.schedule()).unwrap_or_default();
    CString::new(text).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn forward<T: Real>(
    e: &Engine<T>,
    d: CgfDims,
    rows: usize,
    x: *const T,
    y: *const T,
    w: *const T,
    z: *mut T,
    c: *mut CgfCounters,
) -> Result<(), Failure> {
    let x = input("x", x, rows * d.dim_x)?;
    let y = input("y", y, rows * d.dim_y)?;
    let w = input("w", w, rows * d.weights)?;
    let z = output("z", z, rows * d.dim_z)?;
    let r = e.forward(rows, x, y, w)?;
    z.copy_from_slice(&r.z);
    write_counters(c, to_c(&r.counters));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
unsafe fn backward<T: Real>(
    e: &Engine<T>,
    d: CgfDims,
    rows: usize,
    x: *const T,
    y: *const T,
    w: *const T,
    gz: *const T,
    gx: *mut T,
    gy: *mut T,
    gw: *mut T,
    c: *mut CgfCounters,
) -> Result<(), Failure> {
    let x = input("x", x, rows * d.dim_x)?;
    let y = input("y", y, rows * d.dim_y)?;
    let w = input("w", w, rows * d.weights)?;
    let gz = input("gz", gz, rows * d.dim_z)?;
    let gx = output("gx", gx, rows * d.dim_x)?;
    let gy = output("gy", gy, rows * d.dim_y)?;
    let gw = output("gw", gw, rows * d.weights)?;
    let r = e.backward(rows, x, y, w, gz)?;
    gx.copy_from_slice(&r.gx);
    gy.copy_from_slice(&r.gy);
    gw.copy_from_slice(&r.gw);
    write_counters(c, to_c(&r.counters));
    Ok(())
}

/// z (rows x dim_z) from x (rows x dim_x), y (rows x dim_y), w (rows x weights).
/// `counters` may be null.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn cgf_forward_f64(
    e: *const CgfEngine,
    rows: usize,
    x: *const f64,
    y: *const f64,
    w: *const f64,
    z: *mut f64,
    counters: *mut CgfCounters,
) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        forward(&e.f64, e.dims(), rows, x, y, w, z, counters)
    })
}

/// Single-precision forward.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn cgf_forward_f32(
    e: *const CgfEngine,
    rows: usize,
    x: *const f32,
    y: *const f32,
    w: *const f32,
    z: *mut f32,
    counters: *mut CgfCounters,
) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        forward(&e.f32, e.dims(), rows, x, y, w, z, counters)
    })
}

/// Gradients gx, gy, gw of <gz, z> with the shapes of x, y, w.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn cgf_backward_f64(
    e: *const CgfEngine,
    rows: usize,
    x: *const f64,
    y: *const f64,
    w: *const f64,
    gz: *const f64,
    gx: *mut f64,
    gy: *mut f64,
    gw: *mut f64,
    counters: *mut CgfCounters,
) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        backward(&e.f64, e.dims(), rows, x, y, w, gz, gx, gy, gw, counters)
    })
}

/// Single-precision backward.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn cgf_backward_f32(
    e: *const CgfEngine,
    rows: usize,
    x: *const f32,
    y: *const f32,
    w: *const f32,
    gz: *const f32,
    gx: *mut f32,
    gy: *mut f32,
    gw: *mut f32,
    counters: *mut CgfCounters,
) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        backward(&e.f32, e.dims(), rows, x, y, w, gz, gx, gy, gw, counters)
    })
}

/// Double backward. Inputs da, db, dc are upstream gradients of the
/// backward outputs gx, gy, gw. Outputs dx, dy, dw, dgz have the shapes
/// of x, y, w, gz.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
pub unsafe extern "C" fn cgf_double_backward_f64(
    e: *const CgfEngine,
    rows: usize,
    x: *const f64,
    y: *const f64,
    w: *const f64,
    gz: *const f64,
    da: *const f64,
    db: *const f64,
    dc: *const f64,
    dx: *mut f64,
    dy: *mut f64,
    dw: *mut f64,
    dgz: *mut f64,
    counters: *mut CgfCounters,
) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        let d = e.dims();
        let x = input("x", x, rows * d.dim_x)?;
        let y = input("y", y, rows * d.dim_y)?;
        let w = input("w", w, rows * d.weights)?;
        let gz = input("gz", gz, rows * d.dim_z)?;
        let da = input("da", da, rows * d.dim_x)?;
        let db = input("db", db, rows * d.dim_y)?;
        let dc = input("dc", dc, rows * d.weights)?;
        let dx = output("dx", dx, rows * d.dim_x)?;
        let dy = output("dy", dy, rows * d.dim_y)?;
        let dw = output("dw", dw, rows * d.weights)?;
        let dgz = output("dgz", dgz, rows * d.dim_z)?;
        let r = e.f64.double_backward(rows, x, y, w, gz, da, db, dc)?;
        dx.copy_from_slice(&r.dx);
        dy.copy_from_slice(&r.dy);
        dw.copy_from_slice(&r.dw);
        dgz.copy_from_slice(&r.dgz);
        write_counters(counters, to_c(&r.counters));
        Ok(())
    })
}

/// Builds a graph from `edge_count` (receiver, sender) pairs stored as
/// `2 * edge_count` consecutive indices. Edge order is kept.
///
/// # Safety
/// `edges` must hold `2 * edge_count` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn cgf_graph_create(
    nodes: usize,
    edges: *const usize,
    edge_count: usize,
    out: *mut *mut CgfGraph,
) -> CgfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let flat = input("edges", edges, 2 * edge_count)?;
        let pairs = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let graph = GraphCSR::from_edges(nodes, pairs)?;
        *out = Box::into_raw(Box::new(CgfGraph { graph }));
        Ok(())
    })
}

/// Releases a graph. Null is ignored.
///
/// # Safety
/// `g` must come from `cgf_graph_create` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgf_graph_free(g: *mut CgfGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Number of edges in the graph.
///
/// # Safety
/// `g` must be a live graph or null.
#[no_mangle]
pub unsafe extern "C" fn cgf_graph_edge_count(g: *const CgfGraph) -> usize {
    g.as_ref().map_or(0, |g| g.graph.edge_count())
}

/// Writes the permutation that sorts edges by (sender, receiver) into
/// `perm` (edge_count elements).
///
/// # Safety
/// `perm` must hold `edge_count` elements.
#[no_mangle]
pub unsafe extern "C" fn cgf_graph_transpose_permutation(g: *const CgfGraph, perm: *mut usize) -> CgfStatus {
    guard(|| {
        let g = graph(g)?;
        let out = output("perm", perm, g.graph.edge_count())?;
        out.copy_from_slice(&cgforge::conv::transpose_permutation(&g.graph));
        Ok(())
    })
}

fn mode(m: CgfConvMode) -> ConvMode {
    match m {
        CgfConvMode::Deterministic => ConvMode::Deterministic,
        CgfConvMode::Atomic => ConvMode::Atomic,
    }
}

/// Graph convolution: node_z[i] += TP(node_x[j], edge_y[e], edge_w[e]) for
/// every edge e = (i, j). node_x is nodes x dim_x, edge_y is edges x dim_y,
/// edge_w is edges x weights, node_z is nodes x dim_z.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cgf_conv_forward_f64(
    e: *const CgfEngine,
    g: *const CgfGraph,
    node_x: *const f64,
    edge_y: *const f64,
    edge_w: *const f64,
    node_z: *mut f64,
    conv_mode: CgfConvMode,
) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        let g = &graph(g)?.graph;
        let (d, n, m) = (e.dims(), g.node_count, g.edge_count());
        let x = input("node_x", node_x, n * d.dim_x)?;
        let y = input("edge_y", edge_y, m * d.dim_y)?;
        let w = input("edge_w", edge_w, m * d.weights)?;
        let z = output("node_z", node_z, n * d.dim_z)?;
        let r = e.conv.forward(g, x, y, w, mode(conv_mode))?;
        z.copy_from_slice(&r.z);
        Ok(())
    })
}

/// Gradients of <g_node_z, node_z> for the graph convolution. `perm` is
/// the transpose permutation of the graph.
///
/// # Safety
/// Buffers must hold the documented number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cgf_conv_backward_f64(
    e: *const CgfEngine,
    g: *const CgfGraph,
    perm: *const usize,
    node_x: *const f64,
    edge_y: *const f64,
    edge_w: *const f64,
    g_node_z: *const f64,
    g_node_x: *mut f64,
    g_edge_y: *mut f64,
    g_edge_w: *mut f64,
    conv_mode: CgfConvMode,
) -> CgfStatus {
    guard(|| {
        let e = engine(e)?;
        let g = &graph(g)?.graph;
        let (d, n, m) = (e.dims(), g.node_count, g.edge_count());
        let perm = input("perm", perm, m)?;
        let x = input("node_x", node_x, n * d.dim_x)?;
        let y = input("edge_y", edge_y, m * d.dim_y)?;
        let w = input("edge_w", edge_w, m * d.weights)?;
        let gz = input("g_node_z", g_node_z, n * d.dim_z)?;
        let gx = output("g_node_x", g_node_x, n * d.dim_x)?;
        let gy = output("g_edge_y", g_edge_y, m * d.dim_y)?;
        let gw = output("g_edge_w", g_edge_w, m * d.weights)?;
        let r = e.conv.backward(g, perm, x, y, w, gz, mode(conv_mode))?;
        gx.copy_from_slice(&r.gx);
        gy.copy_from_slice(&r.gy);
        gw.copy_from_slice(&r.gw);
        Ok(())
    })
}
