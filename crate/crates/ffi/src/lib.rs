//! C ABI over `fcre-core`. Every fallible function returns an [`FcreStatus`];
//! on failure the message is available from [`fcre_last_error`] on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function. Strings returned to the caller are released with
//! [`fcre_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use fcre_core::cli::{prepare_data, ExperimentConfig, Prepared};
use fcre_core::continual::{accuracy_drop, run_single, Learner};
use fcre_core::losses::info_nce;
use fcre_core::model::{pretrain_mlm, Checkpoint, EncoderParams};
use fcre_core::numerics::{Matrix, Rng};
use fcre_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcreStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Parse = 4,
    Shape = 5,
    Degenerate = 6,
    Numeric = 7,
    Index = 8,
    Protocol = 9,
    Io = 10,
    /// Output buffer too small; the required length was still written.
    BufferTooSmall = 11,
    Panic = 12,
}

/// Data, configuration and (once pretrained or loaded) encoder weights.
pub struct FcreExperiment {
    cfg: ExperimentConfig,
    data: Arc<Prepared>,
    params: Option<EncoderParams>,
}

/// One method trained task by task on an experiment's stream.
pub struct FcreLearner {
    learner: Learner,
    data: Arc<Prepared>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> FcreStatus {
    match e {
        Error::Shape(_) => FcreStatus::Shape,
        Error::Degenerate(_) => FcreStatus::Degenerate,
        Error::Numeric(_) => FcreStatus::Numeric,
        Error::Config(_) => FcreStatus::Config,
        Error::Parse { .. } | Error::Json(_) => FcreStatus::Parse,
        Error::Index(_) => FcreStatus::Index,
        Error::Protocol(_) => FcreStatus::Protocol,
        Error::Experiment { source, .. } => status_of(source),
        Error::Io(_) => FcreStatus::Io,
    }
}

struct Failure(FcreStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FcreStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FcreStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FcreStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FcreStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(FcreStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(FcreStatus::Protocol, "string contains a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fcre_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Release with
/// `fcre_string_free`.
#[no_mangle]
pub extern "C" fn fcre_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_deref() {
        Some(msg) => CString::new(msg.replace('\0', " ")).map(CString::into_raw).unwrap_or(std::ptr::null_mut()),
        None => std::ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fcre_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse an experiment config (JSON text) and build its data. Relative
/// paths resolve against the working directory.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_experiment_new(config_json: *const c_char, out: *mut *mut FcreExperiment) -> FcreStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let cfg = ExperimentConfig::from_json(str_arg(config_json, "config_json")?, &[])?;
        let data = Arc::new(prepare_data(&cfg)?);
        *out = Box::into_raw(Box::new(FcreExperiment { cfg, data, params: None }));
        Ok(())
    })
}

/// # Safety
/// `exp` must be NULL or a live handle from `fcre_experiment_new`.
#[no_mangle]
pub unsafe extern "C" fn fcre_experiment_free(exp: *mut FcreExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// # Safety
/// `exp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_experiment_task_count(exp: *const FcreExperiment, out: *mut usize) -> FcreStatus {
    guard(|| {
        *mut_arg(out, "out")? = ref_arg(exp, "exp")?.data.stream.tasks.len();
        Ok(())
    })
}

/// # Safety
/// `exp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_experiment_method_count(exp: *const FcreExperiment, out: *mut usize) -> FcreStatus {
    guard(|| {
        *mut_arg(out, "out")? = ref_arg(exp, "exp")?.cfg.methods.len();
        Ok(())
    })
}

/// Pretrain encoder weights as configured, replacing any loaded ones.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fcre_experiment_pretrain(exp: *mut FcreExperiment) -> FcreStatus {
    guard(|| {
        let exp = mut_arg(exp, "exp")?;
        let dims = exp.cfg.model.dims(exp.data.vocab.len())?;
        let seed = exp.cfg.pretrain.seed;
        let mut params = EncoderParams::init(dims, &mut Rng::new(seed).fork("init"))?;
        pretrain_mlm(&mut params, &exp.data.corpus, &exp.cfg.pretrain.config, seed)?;
        exp.params = Some(params);
        Ok(())
    })
}

/// # Safety
/// `exp` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fcre_experiment_load_checkpoint(exp: *mut FcreExperiment, path: *const c_char) -> FcreStatus {
    guard(|| {
        let exp = mut_arg(exp, "exp")?;
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?), &exp.data.vocab.hash())?;
        exp.params = Some(ck.params);
        Ok(())
    })
}

/// # Safety
/// `exp` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fcre_experiment_save_checkpoint(exp: *const FcreExperiment, path: *const c_char) -> FcreStatus {
    guard(|| {
        let exp = ref_arg(exp, "exp")?;
        let params = pretrained(exp)?;
        Checkpoint::new(params.clone(), exp.data.vocab.hash()).save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

fn pretrained(exp: &FcreExperiment) -> Result<&EncoderParams, Failure> {
    exp.params
        .as_ref()
        .ok_or_else(|| Failure(FcreStatus::Protocol, "experiment has no encoder weights; pretrain or load first".into()))
}

fn method(exp: &FcreExperiment, index: usize) -> Result<&fcre_core::continual::MethodConfig, Failure> {
    exp.cfg.methods.get(index).ok_or_else(|| {
        Failure(FcreStatus::Index, format!("method {index} out of range ({} configured)", exp.cfg.methods.len()))
    })
}

/// Run method `method_index` over the whole stream with `seed`; writes the
/// run result as JSON to `out_json`.
///
/// # Safety
/// `exp` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_run(
    exp: *const FcreExperiment,
    method_index: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> FcreStatus {
    guard(|| {
        let out = mut_arg(out_json, "out_json")?;
        *out = std::ptr::null_mut();
        let exp = ref_arg(exp, "exp")?;
        let result = run_single(&exp.data.stream, pretrained(exp)?, method(exp, method_index)?, seed, |_, _| Ok(()))?;
        *out = into_c_string(serde_json::to_string(&result).map_err(Error::from)?)?;
        Ok(())
    })
}

/// Start a learner for method `method_index` from the experiment's weights.
///
/// # Safety
/// `exp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_learner_new(
    exp: *const FcreExperiment,
    method_index: usize,
    seed: u64,
    out: *mut *mut FcreLearner,
) -> FcreStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let exp = ref_arg(exp, "exp")?;
        let cfg = method(exp, method_index)?.clone();
        cfg.validate()?;
        let learner = Learner::new(pretrained(exp)?, exp.data.stream.relation_count(), cfg, seed)?;
        *out = Box::into_raw(Box::new(FcreLearner { learner, data: Arc::clone(&exp.data) }));
        Ok(())
    })
}

/// # Safety
/// `learner` must be NULL or a live handle from `fcre_learner_new`.
#[no_mangle]
pub unsafe extern "C" fn fcre_learner_free(learner: *mut FcreLearner) {
    if !learner.is_null() {
        drop(Box::from_raw(learner));
    }
}

/// Number of tasks trained so far.
///
/// # Safety
/// `learner` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_learner_tasks_done(learner: *const FcreLearner, out: *mut usize) -> FcreStatus {
    guard(|| {
        *mut_arg(out, "out")? = ref_arg(learner, "learner")?.learner.tasks_done();
        Ok(())
    })
}

/// Train the next task of the stream.
///
/// # Safety
/// `learner` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fcre_learner_train_next(learner: *mut FcreLearner) -> FcreStatus {
    guard(|| {
        let h = mut_arg(learner, "learner")?;
        let next = h.learner.tasks_done();
        let task = h
            .data
            .stream
            .tasks
            .get(next)
            .ok_or_else(|| Failure(FcreStatus::Protocol, "every task has been trained".into()))?;
        h.learner.train_task(task)?;
        Ok(())
    })
}

/// Accuracy on each seen task's test set, over all seen relations. Writes
/// `tasks_done` values to `out` when `capacity` allows; `out_len` always
/// receives the required length.
///
/// # Safety
/// `learner` must be a live handle, `out` valid for `capacity` doubles
/// (may be NULL when `capacity` is 0), and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_learner_evaluate(
    learner: *const FcreLearner,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> FcreStatus {
    guard(|| {
        let h = ref_arg(learner, "learner")?;
        let len = mut_arg(out_len, "out_len")?;
        let done = h.learner.tasks_done();
        *len = done;
        if capacity < done {
            return Err(Failure(FcreStatus::BufferTooSmall, format!("need room for {done} values")));
        }
        if done == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let eval = h.learner.evaluate(&h.data.stream.tasks[..done])?;
        std::slice::from_raw_parts_mut(out, done).copy_from_slice(&eval.accuracies);
        Ok(())
    })
}

/// InfoNCE bound for a batch of paired row-major features: `gphi` is
/// `batch x dim_g`, `glm` is `batch x dim_l`, `w` is `dim_g x dim_l`.
///
/// # Safety
/// Each pointer must be valid for the stated number of doubles and
/// `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn fcre_info_nce(
    gphi: *const f64,
    glm: *const f64,
    w: *const f64,
    batch: usize,
    dim_g: usize,
    dim_l: usize,
    tau: f64,
    out_value: *mut f64,
) -> FcreStatus {
    guard(|| {
        let out = mut_arg(out_value, "out_value")?;
        let read = |p: *const f64, rows: usize, cols: usize, what: &str| -> Result<Matrix, Failure> {
            let n = rows.checked_mul(cols).ok_or_else(|| Failure(FcreStatus::Shape, format!("{what} is too large")))?;
            if p.is_null() && n > 0 {
                return Err(null(what));
            }
            let data = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(p, n).to_vec() };
            Ok(Matrix::from_vec(rows, cols, data)?)
        };
        if !(tau > 0.0) {
            return Err(Failure(FcreStatus::Config, format!("tau must be positive, got {tau}")));
        }
        let g = read(gphi, batch, dim_g, "gphi")?;
        let l = read(glm, batch, dim_l, "glm")?;
        let w = read(w, dim_g, dim_l, "w")?;
        *out = info_nce(&g, &l, &w, tau)?.value;
        Ok(())
    })
}

/// Accuracy drop between the first and last task.
#[no_mangle]
pub extern "C" fn fcre_accuracy_drop(first: f64, last: f64) -> f64 {
    accuracy_drop(first, last)
}
