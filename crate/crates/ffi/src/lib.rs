//! C ABI for the remask sampling engine.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`RemaskStatus`]; on failure [`remask_last_error`] holds a message for the
//! calling thread. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use remask::checkpoint::{load_kind, CheckpointKind};
use remask::cli::{load_world, sample_rng};
use remask::generator::{Generator, OracleGenerator};
use remask::grid::{Condition, ScheduleKind, TokenGrid};
use remask::neuralgen::NeuralGenerator;
use remask::sampling::{generate, PersistentWeight, RunContext, SamplingOptions, Strategy};
use remask::selector::{OracleScorer, Scorer, SelectorModel};
use remask::toyworld::ToyWorld;
use remask::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemaskStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    UnknownCondition = 5,
    Infeasible = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemaskStrategyKind {
    UniformFixed = 0,
    Purity = 1,
    RandomRevoke = 2,
    Persistent = 3,
    Tcts = 4,
    TctsFas = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemaskScheduleKind {
    Cosine = 0,
    Linear = 1,
}

/// Sampling settings. `weight` may be `INFINITY`; it is ignored by the
/// strategies that take no weight, as is `phi` outside `TCTS_FAS`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RemaskSamplingParams {
    pub strategy: RemaskStrategyKind,
    pub weight: f64,
    pub phi: f64,
    pub steps: usize,
    pub schedule: RemaskScheduleKind,
    pub guidance: f64,
    pub argmax: bool,
}

/// A toy world.
pub struct RemaskWorld(Arc<ToyWorld>);

/// A token generator bound to a world's shape.
pub struct RemaskGenerator(Box<dyn Generator>);

/// A per-location confidence scorer.
pub struct RemaskSelector(Box<dyn Scorer>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(RemaskStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => RemaskStatus::Io,
            Error::Parse(_) | Error::Json(_) => RemaskStatus::Parse,
            Error::UnknownCondition(_) => RemaskStatus::UnknownCondition,
            Error::InfeasibleSample { .. } | Error::ImpossibleEvidence(_) => RemaskStatus::Infeasible,
            _ => RemaskStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RemaskStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(RemaskStatus::Internal, format!("internal error: {msg}")))
    });
    match outcome {
        Ok(()) => {
            set_error("");
            RemaskStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_error(&msg);
            status
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RemaskStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(RemaskStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn weight(w: f64) -> PersistentWeight {
    if w.is_infinite() && w > 0.0 {
        PersistentWeight::Infinite
    } else {
        PersistentWeight::Finite(w)
    }
}

fn strategy(p: &RemaskSamplingParams) -> Result<Strategy, Failure> {
    let s = match p.strategy {
        RemaskStrategyKind::UniformFixed => Strategy::UniformFixed,
        RemaskStrategyKind::Purity => Strategy::Purity,
        RemaskStrategyKind::RandomRevoke => Strategy::RandomRevoke,
        RemaskStrategyKind::Persistent => Strategy::Persistent { w: weight(p.weight) },
        RemaskStrategyKind::Tcts => Strategy::Tcts { w: weight(p.weight) },
        RemaskStrategyKind::TctsFas => Strategy::TctsFas { w: weight(p.weight), phi: p.phi },
    };
    s.validate()?;
    Ok(s)
}

fn grid_of(world: &ToyWorld, cells: *const u32, len: usize) -> Result<TokenGrid, Failure> {
    if cells.is_null() {
        return Err(null("cells"));
    }
    check_len(world, len)?;
    let cells = unsafe { std::slice::from_raw_parts(cells, len) }.to_vec();
    Ok(TokenGrid::new(world.height(), world.width(), world.codebook(), cells)?)
}

fn check_len(world: &ToyWorld, len: usize) -> Result<(), Failure> {
    if len != world.len() {
        return Err(Failure(
            RemaskStatus::InvalidArgument,
            format!("grid buffer holds {len} cells, world has {}", world.len()),
        ));
    }
    Ok(())
}

fn condition(world: &ToyWorld, id: i64) -> Result<Condition, Failure> {
    Ok(world.condition(id)?.clone())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn remask_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn remask_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn remask_status_name(status: RemaskStatus) -> *const c_char {
    let name: &'static str = match status {
        RemaskStatus::Ok => "ok\0",
        RemaskStatus::NullPointer => "null pointer\0",
        RemaskStatus::InvalidArgument => "invalid argument\0",
        RemaskStatus::Io => "i/o error\0",
        RemaskStatus::Parse => "parse error\0",
        RemaskStatus::UnknownCondition => "unknown condition\0",
        RemaskStatus::Infeasible => "infeasible\0",
        RemaskStatus::Internal => "internal error\0",
    };
    name.as_ptr().cast()
}

/// Defaults: TCTS-FAS with weight 15 and threshold 0.45, 8 cosine steps,
/// guidance 5, stochastic draws.
#[no_mangle]
pub extern "C" fn remask_sampling_params_default() -> RemaskSamplingParams {
    RemaskSamplingParams {
        strategy: RemaskStrategyKind::TctsFas,
        weight: remask::sampling::DEFAULT_PERSISTENT_WEIGHT,
        phi: remask::sampling::DEFAULT_PHI,
        steps: 8,
        schedule: RemaskScheduleKind::Cosine,
        guidance: remask::sampling::DEFAULT_GUIDANCE,
        argmax: false,
    }
}

/// Loads a bundled world by name (`disjoint`, `overlap`, `bgfg`,
/// `attractive`) or a world JSON file by path.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_world_load(name: *const c_char, out: *mut *mut RemaskWorld) -> RemaskStatus {
    guard(|| {
        let name = string_arg(name, "name")?;
        put(out, RemaskWorld(Arc::new(load_world(&name)?)))
    })
}

/// Builds a world from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_world_from_json(json: *const c_char, out: *mut *mut RemaskWorld) -> RemaskStatus {
    guard(|| {
        let json = string_arg(json, "json")?;
        put(out, RemaskWorld(Arc::new(ToyWorld::from_json_str(&json)?)))
    })
}

/// # Safety
/// `world` must come from a world constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn remask_world_free(world: *mut RemaskWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Grid height, width and codebook size. Any output pointer may be null.
///
/// # Safety
/// `world` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_world_shape(
    world: *const RemaskWorld,
    height: *mut usize,
    width: *mut usize,
    codebook_size: *mut usize,
) -> RemaskStatus {
    guard(|| {
        let w = &borrow(world, "world")?.0;
        for (p, v) in [(height, w.height()), (width, w.width()), (codebook_size, w.codebook().size())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Number of conditions.
///
/// # Safety
/// `world` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_world_condition_count(world: *const RemaskWorld, count: *mut usize) -> RemaskStatus {
    guard(|| {
        let w = &borrow(world, "world")?.0;
        if count.is_null() {
            return Err(null("count"));
        }
        *count = w.conditions().len();
        Ok(())
    })
}

/// Id of the condition at `index`.
///
/// # Safety
/// `world` must be a live handle; `id` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_world_condition_id(
    world: *const RemaskWorld,
    index: usize,
    id: *mut i64,
) -> RemaskStatus {
    guard(|| {
        let w = &borrow(world, "world")?.0;
        let c = w
            .conditions()
            .get(index)
            .ok_or_else(|| Failure(RemaskStatus::InvalidArgument, format!("condition index {index} out of range")))?;
        if id.is_null() {
            return Err(null("id"));
        }
        *id = c.id;
        Ok(())
    })
}

/// Fraction of compositional constraints of condition `condition_id` that
/// a fully revealed grid satisfies.
///
/// # Safety
/// `world` must be a live handle; `cells` must point to `len` tokens;
/// `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_alignment_score(
    world: *const RemaskWorld,
    condition_id: i64,
    cells: *const u32,
    len: usize,
    score: *mut f64,
) -> RemaskStatus {
    guard(|| {
        let w = &borrow(world, "world")?.0;
        let grid = grid_of(w, cells, len)?;
        let c = condition(w, condition_id)?;
        if score.is_null() {
            return Err(null("score"));
        }
        *score = w.alignment_score(&c, &grid)?;
        Ok(())
    })
}

/// Exact log-probability of a fully revealed grid under a condition.
///
/// # Safety
/// As for [`remask_alignment_score`].
#[no_mangle]
pub unsafe extern "C" fn remask_log_prob(
    world: *const RemaskWorld,
    condition_id: i64,
    cells: *const u32,
    len: usize,
    log_prob: *mut f64,
) -> RemaskStatus {
    guard(|| {
        let w = &borrow(world, "world")?.0;
        let grid = grid_of(w, cells, len)?;
        let c = condition(w, condition_id)?;
        if log_prob.is_null() {
            return Err(null("log_prob"));
        }
        *log_prob = w.log_prob(&c, &grid)?;
        Ok(())
    })
}

/// Exact predictive of the world at the given temperature (1 is exact).
///
/// # Safety
/// `world` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_generator_oracle(
    world: *const RemaskWorld,
    temperature: f64,
    out: *mut *mut RemaskGenerator,
) -> RemaskStatus {
    guard(|| {
        let w = borrow(world, "world")?.0.clone();
        put(out, RemaskGenerator(Box::new(OracleGenerator::with_temperature(w, temperature)?)))
    })
}

/// Loads a trained generator checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_generator_load(path: *const c_char, out: *mut *mut RemaskGenerator) -> RemaskStatus {
    guard(|| {
        let path = string_arg(path, "path")?;
        let net = load_kind(&path, CheckpointKind::Generator)?;
        put(out, RemaskGenerator(Box::new(NeuralGenerator::new(net)?)))
    })
}

/// # Safety
/// `generator` must come from a generator constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn remask_generator_free(generator: *mut RemaskGenerator) {
    if !generator.is_null() {
        drop(Box::from_raw(generator));
    }
}

/// Exact leave-one-out scorer of the world.
///
/// # Safety
/// `world` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_selector_oracle(
    world: *const RemaskWorld,
    out: *mut *mut RemaskSelector,
) -> RemaskStatus {
    guard(|| {
        let w = borrow(world, "world")?.0.clone();
        put(out, RemaskSelector(Box::new(OracleScorer::new(w))))
    })
}

/// Loads a trained selector checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn remask_selector_load(path: *const c_char, out: *mut *mut RemaskSelector) -> RemaskStatus {
    guard(|| {
        let path = string_arg(path, "path")?;
        let net = load_kind(&path, CheckpointKind::Selector)?;
        put(out, RemaskSelector(Box::new(SelectorModel::new(net)?)))
    })
}

/// # Safety
/// `selector` must come from a selector constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn remask_selector_free(selector: *mut RemaskSelector) {
    if !selector.is_null() {
        drop(Box::from_raw(selector));
    }
}

/// Samples one grid into `out_cells` (`len` must equal the world's cell
/// count). `selector` may be null for strategies that use no scores. The
/// same `seed` and `sample_index` always give the same grid.
///
/// # Safety
/// Handles must be live; `params` must be readable; `out_cells` must be
/// writable for `len` tokens.
#[no_mangle]
pub unsafe extern "C" fn remask_generate(
    world: *const RemaskWorld,
    generator: *const RemaskGenerator,
    selector: *const RemaskSelector,
    condition_id: i64,
    params: *const RemaskSamplingParams,
    seed: u64,
    sample_index: u64,
    out_cells: *mut u32,
    len: usize,
) -> RemaskStatus {
    guard(|| {
        let w = &borrow(world, "world")?.0;
        let gen = borrow(generator, "generator")?.0.as_ref();
        let scorer = selector.as_ref().map(|s| s.0.as_ref());
        let params = borrow(params, "params")?;
        if out_cells.is_null() {
            return Err(null("out_cells"));
        }
        check_len(w, len)?;
        if gen.height() != w.height() || gen.width() != w.width() || gen.codebook() != w.codebook() {
            return Err(Failure(RemaskStatus::InvalidArgument, "generator shape does not match the world".into()));
        }
        let strategy = strategy(params)?;
        if strategy.needs_scores() && scorer.is_none() {
            return Err(Failure(
                RemaskStatus::InvalidArgument,
                format!("strategy {} needs a selector", strategy.name()),
            ));
        }
        let kind = match params.schedule {
            RemaskScheduleKind::Cosine => ScheduleKind::Cosine,
            RemaskScheduleKind::Linear => ScheduleKind::Linear,
        };
        let schedule = kind.build(w.len(), params.steps)?;
        let c = condition(w, condition_id)?;
        let options =
            SamplingOptions { guidance: params.guidance, argmax: params.argmax, ..SamplingOptions::default() };
        let ctx = RunContext { gen, scorer, condition: &c, schedule: &schedule, options };
        let (grid, _) = generate(&ctx, &strategy, &mut sample_rng(seed, 0, sample_index))?;
        ptr::copy_nonoverlapping(grid.cells().as_ptr(), out_cells, len);
        Ok(())
    })
}
