//! C ABI over `trajground`.
//!
//! Worlds and models are opaque handles created by `tg_*_generate` /
//! `tg_*_load` and released with the matching `tg_*_free`. Every fallible
//! call returns a [`TgStatus`]; on failure a message describing the error is
//! available from [`tg_last_error`] on the same thread until the next failing
//! call. Panics never cross the boundary and are reported as
//! `TG_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use trajground::eval::correct_return;
use trajground::model::{infer, EpisodeInput, Model};
use trajground::synthworld::{generate_world, World, WorldSpec};
use trajground::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// An argument was out of range or malformed.
    InvalidArgument = 2,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 3,
    /// A file could not be read or parsed.
    Io = 4,
    /// The requested nodes are not connected.
    NoPath = 5,
    /// The model rejected its input.
    Model = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

/// Navigation world: graph, scene and view features.
pub struct TgWorld {
    world: World,
}

/// Trained destination predictor.
pub struct TgModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TgStatus {
    match err {
        Error::NoPath { .. } => TgStatus::NoPath,
        Error::Io { .. } | Error::Json(_) | Error::Checkpoint(_) => TgStatus::Io,
        Error::ShapeMismatch(_)
        | Error::TooManySteps { .. }
        | Error::NonFiniteValue(_)
        | Error::EmptyPrediction
        | Error::BadHeadCount { .. } => TgStatus::Model,
        _ => TgStatus::InvalidArgument,
    }
}

struct Failure(TgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TgStatus::NullArgument, format!("`{what}` is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            TgStatus::Internal
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure(TgStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn nodes_arg<'a>(nodes: *const usize, len: usize) -> Result<&'a [usize], Failure> {
    if nodes.is_null() {
        return Err(null("nodes"));
    }
    if len == 0 {
        return Err(Failure(TgStatus::InvalidArgument, "empty trajectory".into()));
    }
    Ok(std::slice::from_raw_parts(nodes, len))
}

/// Message of the last failing call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Generates a synthetic world with `node_count` nodes and default scene
/// parameters.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn tg_world_generate(node_count: usize, seed: u64, out: *mut *mut TgWorld) -> TgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = WorldSpec {
            node_count,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec, seed)?;
        *out = Box::into_raw(Box::new(TgWorld { world }));
        Ok(())
    })
}

/// Loads a world saved by the `gen-world` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer to
/// writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn tg_world_load(path: *const c_char, out: *mut *mut TgWorld) -> TgStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let world = World::load(&path)?;
        *out = Box::into_raw(Box::new(TgWorld { world }));
        Ok(())
    })
}

/// # Safety
/// `world` must be NULL or a handle returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_world_free(world: *mut TgWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Number of nodes, or 0 for a NULL handle.
///
/// # Safety
/// `world` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tg_world_node_count(world: *const TgWorld) -> usize {
    world.as_ref().map_or(0, |w| w.world.graph.node_count())
}

/// Shortest-path distance in meters between nodes `a` and `b`.
///
/// # Safety
/// `world` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_world_geodesic(world: *const TgWorld, a: usize, b: usize, out: *mut f64) -> TgStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let n = w.world.graph.node_count();
        if a >= n || b >= n {
            return Err(Failure(TgStatus::InvalidArgument, format!("node index out of range [0, {n})")));
        }
        *out = w.world.graph.geodesic(a, b)?;
        Ok(())
    })
}

/// Applies the return correction to the trajectory `nodes[0..len]` stopped
/// at `step`: the walk continues back along the shortest path to the node
/// at `step`. Writes the corrected node sequence to `out_nodes` and its
/// length to `out_len`. When `out_cap` is too small nothing but `out_len`
/// is written and `TG_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `nodes` must point to `len` readable indices, `out_nodes` to `out_cap`
/// writable ones (it may be NULL when `out_cap` is 0), `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tg_correct_return(
    world: *const TgWorld,
    nodes: *const usize,
    len: usize,
    step: usize,
    out_nodes: *mut usize,
    out_cap: usize,
    out_len: *mut usize,
) -> TgStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        let nodes = nodes_arg(nodes, len)?;
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let g = &w.world.graph;
        let traj = g.path_from_nodes(nodes.to_vec())?;
        let fixed = correct_return(g, &traj, step)?;
        *out_len = fixed.nodes.len();
        if out_cap < fixed.nodes.len() {
            return Err(Failure(
                TgStatus::BufferTooSmall,
                format!("need {} entries, have {out_cap}", fixed.nodes.len()),
            ));
        }
        if out_nodes.is_null() {
            return Err(null("out_nodes"));
        }
        std::ptr::copy_nonoverlapping(fixed.nodes.as_ptr(), out_nodes, fixed.nodes.len());
        Ok(())
    })
}

/// Loads a checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_model_load(path: *const c_char, out: *mut *mut TgModel) -> TgStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Model::load(&path)?;
        *out = Box::into_raw(Box::new(TgModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_model_free(model: *mut TgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Longest trajectory the model accepts, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tg_model_max_steps(model: *const TgModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.max_steps)
}

/// Scores every step of the trajectory `nodes[0..len]` as the destination
/// described by the landmark instruction for `target` (drawn with
/// `instruction_seed`). Writes `len` probabilities to `probs` and the
/// selected step to `step`.
///
/// # Safety
/// Both handles must be live, `nodes` must point to `len` readable indices,
/// `probs` to `len` writable doubles and `step` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tg_model_predict(
    model: *const TgModel,
    world: *const TgWorld,
    nodes: *const usize,
    len: usize,
    target: usize,
    instruction_seed: u64,
    probs: *mut f64,
    step: *mut usize,
) -> TgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        let nodes = nodes_arg(nodes, len)?;
        if probs.is_null() || step.is_null() {
            return Err(null(if probs.is_null() { "probs" } else { "step" }));
        }
        let world = &w.world;
        world.graph.path_from_nodes(nodes.to_vec())?;
        let landmark = world.scene.landmark_at(target).ok_or_else(|| {
            Failure(TgStatus::InvalidArgument, format!("node {target} carries no landmark"))
        })?;
        let bank = world.feature_bank();
        let instruction = world.synth_instruction(landmark, instruction_seed)?;
        let input = EpisodeInput::new(len, bank.dim, bank.trajectory(nodes), instruction)?;
        let p = m.model.forward(&[input])?.remove(0);
        *step = infer(&p)?;
        std::ptr::copy_nonoverlapping(p.as_ptr(), probs, len);
        Ok(())
    })
}
