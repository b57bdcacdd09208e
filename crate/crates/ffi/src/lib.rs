//! C interface to the graph encoder, graph construction and the
//! correlation objectives.
//!
//! Matrices cross the boundary as row-major `double` buffers. Every fallible
//! function returns an [`HfmcaStatus`]; the message of the most recent
//! failure on the calling thread is available from
//! [`hfmca_last_error_message`]. Panics are caught and reported as
//! `HFMCA_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use hfmca::checkpoint::{load_checkpoint, Checkpoint};
use hfmca::connectome::{build_graph, default_edge_budget, pearson_connectivity, ConnectivityMatrix, EdgeSelection, RoiTimeSeries};
use hfmca::encoder::encode;
use hfmca::objective::{correlation_block, fmca_loss, hfmca_loss, Ridge};
use hfmca::tape::Mat;
use hfmca::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfmcaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Singular = 5,
    Io = 6,
    Format = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Values accepted as `selection` by [`hfmca_build_graph`] and
/// [`hfmca_encoder_embed`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfmcaSelection {
    Raw = 0,
    Absolute = 1,
}

fn edge_selection(raw: u32) -> Result<EdgeSelection, Failure> {
    match raw {
        x if x == HfmcaSelection::Raw as u32 => Ok(EdgeSelection::Raw),
        x if x == HfmcaSelection::Absolute as u32 => Ok(EdgeSelection::Absolute),
        other => fail(HfmcaStatus::InvalidInput, format!("unknown edge selection {other}")),
    }
}

/// Trained graph encoder loaded from a checkpoint. Opaque to C.
pub struct HfmcaEncoder {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(HfmcaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::InvalidConfig(_) | Error::Validation(_) => HfmcaStatus::InvalidInput,
            Error::Shape { .. } => HfmcaStatus::ShapeMismatch,
            Error::NonFinite(_) => HfmcaStatus::NonFinite,
            Error::Singular { .. } => HfmcaStatus::Singular,
            Error::Io { .. } => HfmcaStatus::Io,
            Error::SchemaVersion { .. } | Error::Format { .. } | Error::Json(_) => HfmcaStatus::Format,
            Error::TrainingAborted { .. } => HfmcaStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: HfmcaStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HfmcaStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(HfmcaStatus::Internal, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            HfmcaStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return fail(HfmcaStatus::NullPointer, format!("{what} is null"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(HfmcaStatus::NullPointer, format!("{what} is null"));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(HfmcaStatus::NullPointer, format!("{what} is null"));
    }
    p.write(value);
    Ok(())
}

fn row_major(data: &[f64], rows: usize, cols: usize) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

fn copy_row_major(m: &Mat, out: &mut [f64]) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
}

fn checked_len(a: usize, b: usize) -> Result<usize, Failure> {
    match a.checked_mul(b) {
        Some(n) => Ok(n),
        None => fail(HfmcaStatus::InvalidInput, "matrix dimensions overflow"),
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes) and returns the full message
/// length in bytes. Pass a null `buf` to query the length.
///
/// # Safety
///
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hfmca_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hfmca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// `floor(n^2 / 400)`.
#[no_mangle]
pub extern "C" fn hfmca_default_edge_budget(n_regions: usize) -> usize {
    default_edge_budget(n_regions)
}

/// Pearson correlation of `n_regions x n_timepoints` series into an
/// `n_regions x n_regions` buffer.
///
/// # Safety
///
/// Every pointer must be null or valid for the element counts given by
/// the size arguments.
#[no_mangle]
pub unsafe extern "C" fn hfmca_pearson_connectivity(
    series: *const f64,
    n_regions: usize,
    n_timepoints: usize,
    out: *mut f64,
) -> HfmcaStatus {
    guard(|| {
        let data = input(series, checked_len(n_regions, n_timepoints)?, "series")?;
        let out = output(out, checked_len(n_regions, n_regions)?, "out")?;
        let ts = RoiTimeSeries::new("ffi", row_major(data, n_regions, n_timepoints))?;
        copy_row_major(&pearson_connectivity(&ts)?.matrix.values, out);
        Ok(())
    })
}

unsafe fn connectivity(c: *const f64, n: usize) -> Result<ConnectivityMatrix, Failure> {
    let data = input(c, checked_len(n, n)?, "connectivity")?;
    Ok(ConnectivityMatrix::new("ffi", row_major(data, n, n))?)
}

/// Keeps the `edge_budget` strongest pairs of an `n x n` connectivity
/// matrix. Writes `2 * n_edges` node indices (`i < j` per pair) to
/// `out_edges`, `n_edges` weights to `out_weights` and the edge count to
/// `out_n_edges`. Both buffers must hold at least `capacity` edges.
///
/// # Safety
///
/// Every pointer must be null or valid for the element counts given by
/// the size arguments.
#[no_mangle]
pub unsafe extern "C" fn hfmca_build_graph(
    conn: *const f64,
    n_regions: usize,
    edge_budget: usize,
    selection: u32,
    out_edges: *mut u32,
    out_weights: *mut f64,
    capacity: usize,
    out_n_edges: *mut usize,
) -> HfmcaStatus {
    guard(|| {
        let c = connectivity(conn, n_regions)?;
        let g = build_graph(&c, edge_budget, edge_selection(selection)?).graph;
        write(out_n_edges, g.n_edges(), "out_n_edges")?;
        if g.n_edges() > capacity {
            return fail(
                HfmcaStatus::BufferTooSmall,
                format!("{} edges do not fit in capacity {capacity}", g.n_edges()),
            );
        }
        let edges = output(out_edges, 2 * g.n_edges(), "out_edges")?;
        let weights = output(out_weights, g.n_edges(), "out_weights")?;
        for (k, (&(i, j), &w)) in g.edges.iter().zip(&g.edge_weights).enumerate() {
            edges[2 * k] = i as u32;
            edges[2 * k + 1] = j as u32;
            weights[k] = w;
        }
        Ok(())
    })
}

/// Hierarchical loss of an `n x d_low` low-level batch against an
/// `n x d_high` high-level batch. `trace_scaled` selects a ridge of
/// `ridge_epsilon * tr(R) / d` instead of `ridge_epsilon`.
///
/// # Safety
///
/// Every pointer must be null or valid for the element counts given by
/// the size arguments.
#[no_mangle]
pub unsafe extern "C" fn hfmca_hfmca_loss(
    z_low: *const f64,
    z_high: *const f64,
    n: usize,
    d_low: usize,
    d_high: usize,
    ridge_epsilon: f64,
    trace_scaled: bool,
    out_loss: *mut f64,
) -> HfmcaStatus {
    guard(|| {
        let a = row_major(input(z_low, checked_len(n, d_low)?, "z_low")?, n, d_low);
        let b = row_major(input(z_high, checked_len(n, d_high)?, "z_high")?, n, d_high);
        let ridge = Ridge {
            epsilon: ridge_epsilon,
            trace_scaled,
        };
        write(out_loss, hfmca_loss(&correlation_block(&a, &b, ridge)?)?, "out_loss")
    })
}

/// Two-view loss between `n x k` batches `f` and `g`.
///
/// # Safety
///
/// Every pointer must be null or valid for the element counts given by
/// the size arguments.
#[no_mangle]
pub unsafe extern "C" fn hfmca_fmca_loss(
    f: *const f64,
    g: *const f64,
    n: usize,
    k: usize,
    ridge_epsilon: f64,
    trace_scaled: bool,
    out_loss: *mut f64,
) -> HfmcaStatus {
    guard(|| {
        let len = checked_len(n, k)?;
        let a = row_major(input(f, len, "f")?, n, k);
        let b = row_major(input(g, len, "g")?, n, k);
        let ridge = Ridge {
            epsilon: ridge_epsilon,
            trace_scaled,
        };
        write(out_loss, fmca_loss(&a, &b, ridge)?, "out_loss")
    })
}

/// Loads the encoder of a checkpoint file. Projection heads, if present,
/// are dropped. Release the handle with [`hfmca_encoder_free`].
///
/// # Safety
///
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hfmca_encoder_load(path: *const c_char, out: *mut *mut HfmcaEncoder) -> HfmcaStatus {
    guard(|| {
        if path.is_null() {
            return fail(HfmcaStatus::NullPointer, "path is null");
        }
        if out.is_null() {
            return fail(HfmcaStatus::NullPointer, "out is null");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => return fail(HfmcaStatus::InvalidInput, "path is not valid UTF-8"),
        };
        let ckpt = hfmca::checkpoint::strip_heads(&load_checkpoint(Path::new(path))?);
        out.write(Box::into_raw(Box::new(HfmcaEncoder { ckpt })));
        Ok(())
    })
}

/// Releases an encoder. Null is ignored.
///
/// # Safety
///
/// `encoder` must be null or a handle from [`hfmca_encoder_load`] that
/// has not been freed.
#[no_mangle]
pub unsafe extern "C" fn hfmca_encoder_free(encoder: *mut HfmcaEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Node feature width the encoder expects (the atlas size), or 0 for null.
///
/// # Safety
///
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hfmca_encoder_input_dim(encoder: *const HfmcaEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.ckpt.encoder_config.input_dim)
}

/// Length of a graph embedding, or 0 for null.
///
/// # Safety
///
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hfmca_encoder_embedding_dim(encoder: *const HfmcaEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.ckpt.encoder_config.embedding_dim)
}

/// Builds the graph of an `n x n` connectivity matrix with the given edge
/// budget and writes its embedding to `out` (`out_len` must be at least the
/// embedding width).
///
/// # Safety
///
/// Every pointer must be null or valid for the element counts given by
/// the size arguments.
#[no_mangle]
pub unsafe extern "C" fn hfmca_encoder_embed(
    encoder: *const HfmcaEncoder,
    conn: *const f64,
    n_regions: usize,
    edge_budget: usize,
    selection: u32,
    out: *mut f64,
    out_len: usize,
) -> HfmcaStatus {
    guard(|| {
        let enc = match encoder.as_ref() {
            Some(e) => e,
            None => return fail(HfmcaStatus::NullPointer, "encoder is null"),
        };
        let dim = enc.ckpt.encoder_config.embedding_dim;
        if out_len < dim {
            return fail(HfmcaStatus::BufferTooSmall, format!("embedding needs {dim} values, buffer holds {out_len}"));
        }
        let c = connectivity(conn, n_regions)?;
        let g = build_graph(&c, edge_budget, edge_selection(selection)?).graph;
        let emb = encode(&g, &enc.ckpt.encoder, &enc.ckpt.encoder_config)?.graph_embedding;
        output(out, dim, "out")?.copy_from_slice(emb.as_slice());
        Ok(())
    })
}
