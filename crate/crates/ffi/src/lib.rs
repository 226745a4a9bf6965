//! C ABI over `ctxdet`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` / `*_new`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`CtxdetStatus`]; on failure the message is kept per thread and
//! read with [`ctxdet_last_error`]. Structured results are returned as
//! NUL-terminated JSON strings owned by the caller and released with
//! [`ctxdet_string_free`].
//!
//! Handles are not synchronized: a handle may move between threads but must
//! not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use ctxdet::config::RunConfig;
use ctxdet::data::{load_code, CodeSample, Image, Vocabulary};
use ctxdet::decoder::DetectionOutput;
use ctxdet::eval::evaluate;
use ctxdet::model::{Generation, Model};
use ctxdet::numerics::Rng;
use ctxdet::training::{load_checkpoint, save_checkpoint, Trainer};
use ctxdet::Error;
use serde::Serialize;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxdetStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Rejected input: bad configuration value, caption without `[MASK]`,
    /// or a word outside the vocabulary.
    InvalidInput = 3,
    Io = 4,
    /// Malformed file contents (checkpoint, CODE JSON, PNG, TOML).
    Format = 5,
    /// Any other failure inside the library, including divergence.
    Runtime = 6,
    /// A panic was caught at the boundary.
    Panic = 7,
}

/// Trained model for inference.
pub struct CtxdetModel {
    model: Model,
}

/// Model plus optimizer and sampling state.
pub struct CtxdetTrainer {
    trainer: Trainer,
}

/// Planar RGB raster with values in `[0, 1]`.
pub struct CtxdetImage {
    image: Image,
}

/// CODE split with its rasters loaded.
pub struct CtxdetCorpus {
    samples: Vec<CodeSample>,
}

/// Loss summary of one optimization step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CtxdetStepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub total: f64,
    pub cls: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub lm: f64,
    pub noun: f64,
    pub assigned: usize,
    pub lm_positions: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: CtxdetStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } | Error::NoMask | Error::OutOfVocabulary(_) => CtxdetStatus::InvalidInput,
            Error::Io { .. } => CtxdetStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::Checkpoint(_) => CtxdetStatus::Format,
            _ => CtxdetStatus::Runtime,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            status: CtxdetStatus::Runtime,
            message: e.to_string(),
        }
    }
}

fn fail(status: CtxdetStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CtxdetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CtxdetStatus::Ok
        }
        Ok(Err(f)) => {
            set_error(&f.message);
            f.status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            CtxdetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(CtxdetStatus::NullArgument, format!("`{name}` is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CtxdetStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(CtxdetStatus::NullArgument, format!("`{name}` is NULL")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(CtxdetStatus::NullArgument, format!("`{name}` is NULL")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(CtxdetStatus::NullArgument, "output pointer is NULL"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_json(out: *mut *mut c_char, value: &impl Serialize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(CtxdetStatus::NullArgument, "output pointer is NULL"));
    }
    let text = serde_json::to_string(value)?;
    *out = CString::new(text).expect("JSON has no NUL").into_raw();
    Ok(())
}

fn check_null_out<T>(out: *mut *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(fail(CtxdetStatus::NullArgument, "output pointer is NULL"))
    } else {
        Ok(())
    }
}

#[derive(Serialize)]
struct BoxJson {
    /// Normalized corners `[x0, y0, x1, y1]`, clamped to the image.
    corners: [f64; 4],
    p_matched: f64,
}

#[derive(Serialize)]
struct DetectionJson {
    condition: String,
    position: usize,
    best: usize,
    boxes: Vec<BoxJson>,
}

impl From<&DetectionOutput> for DetectionJson {
    fn from(d: &DetectionOutput) -> Self {
        DetectionJson {
            condition: d.condition.clone(),
            position: d.position,
            best: d.best(),
            boxes: d
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| BoxJson {
                    corners: b.clamped().to_corners(),
                    p_matched: d.p_matched(i),
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct ClozeJson {
    mask_index: usize,
    names: Vec<(String, f64)>,
    detection: DetectionJson,
}

#[derive(Serialize)]
struct GenerationJson {
    text: String,
    hit_eos: bool,
    detections: Vec<DetectionJson>,
}

impl From<&Generation> for GenerationJson {
    fn from(g: &Generation) -> Self {
        GenerationJson {
            text: g.text.clone(),
            hit_eos: g.decode.hit_eos,
            detections: g.detections.iter().map(DetectionJson::from).collect(),
        }
    }
}

#[derive(Serialize)]
struct OvJson {
    class: String,
    present: bool,
    p_yes: f64,
    detection: Option<DetectionJson>,
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn ctxdet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ctxdet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reads an 8-bit RGB or RGBA PNG.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_image_load_png(path: *const c_char, out: *mut *mut CtxdetImage) -> CtxdetStatus {
    guard(|| {
        check_null_out(out)?;
        let path = str_arg(path, "path")?;
        let image = Image::load_png(Path::new(path))?;
        put(out, CtxdetImage { image })
    })
}

/// Builds an image from `3 * height * width` planar values (all of channel
/// 0, then 1, then 2, each row-major).
///
/// # Safety
/// `data` must point to `3 * height * width` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_image_from_planar(
    data: *const f64,
    height: usize,
    width: usize,
    out: *mut *mut CtxdetImage,
) -> CtxdetStatus {
    guard(|| {
        check_null_out(out)?;
        if data.is_null() {
            return Err(fail(CtxdetStatus::NullArgument, "`data` is NULL"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| fail(CtxdetStatus::InvalidInput, "image size overflows"))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let image = Image::new(height, width, values)?;
        put(out, CtxdetImage { image })
    })
}

/// # Safety
/// `image` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_image_free(image: *mut CtxdetImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Loads the model stored in a checkpoint.
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_model_load(checkpoint: *const c_char, out: *mut *mut CtxdetModel) -> CtxdetStatus {
    guard(|| {
        check_null_out(out)?;
        let path = str_arg(checkpoint, "checkpoint")?;
        let model = load_checkpoint(Path::new(path))?.model;
        put(out, CtxdetModel { model })
    })
}

/// # Safety
/// `model` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_model_free(model: *mut CtxdetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fills every `[MASK]` of `caption` with its top-`k` nouns and locates each.
/// Writes a JSON array with one object per mask.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_model_cloze(
    model: *const CtxdetModel,
    image: *const CtxdetImage,
    caption: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> CtxdetStatus {
    guard(|| {
        check_null_out(out_json)?;
        let model = &ref_arg(model, "model")?.model;
        let image = &ref_arg(image, "image")?.image;
        let ids = model.vocab.tokenize(str_arg(caption, "caption")?)?;
        let answers = model.cloze(image, &ids, k.max(1))?;
        let json: Vec<ClozeJson> = answers
            .iter()
            .map(|a| ClozeJson {
                mask_index: a.mask_index,
                names: a
                    .names
                    .iter()
                    .cloned()
                    .zip(a.fill.candidates.iter().map(|c| c.1))
                    .collect(),
                detection: DetectionJson::from(&a.detection),
            })
            .collect();
        put_json(out_json, &json)
    })
}

/// Generates a caption and locates the tokens whose noun score reaches
/// `threshold`.
///
/// # Safety
/// Handles must be live; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_model_caption(
    model: *const CtxdetModel,
    image: *const CtxdetImage,
    max_len: usize,
    threshold: f64,
    out_json: *mut *mut c_char,
) -> CtxdetStatus {
    guard(|| {
        check_null_out(out_json)?;
        let model = &ref_arg(model, "model")?.model;
        let image = &ref_arg(image, "image")?.image;
        let g = model.caption(image, max_len, threshold)?;
        put_json(out_json, &GenerationJson::from(&g))
    })
}

/// Answers `question` and locates the answered objects.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_model_qa(
    model: *const CtxdetModel,
    image: *const CtxdetImage,
    question: *const c_char,
    max_len: usize,
    threshold: f64,
    out_json: *mut *mut c_char,
) -> CtxdetStatus {
    guard(|| {
        check_null_out(out_json)?;
        let model = &ref_arg(model, "model")?.model;
        let image = &ref_arg(image, "image")?.image;
        let ids = model.vocab.tokenize(str_arg(question, "question")?)?;
        let g = model.qa(image, &ids, max_len, threshold)?;
        put_json(out_json, &GenerationJson::from(&g))
    })
}

/// Asks whether each comma-separated class appears and locates the present
/// ones.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_model_ov(
    model: *const CtxdetModel,
    image: *const CtxdetImage,
    classes: *const c_char,
    out_json: *mut *mut c_char,
) -> CtxdetStatus {
    guard(|| {
        check_null_out(out_json)?;
        let model = &ref_arg(model, "model")?.model;
        let image = &ref_arg(image, "image")?.image;
        let classes: Vec<String> = str_arg(classes, "classes")?
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        let json: Vec<OvJson> = model
            .ov(image, &classes)?
            .iter()
            .map(|a| OvJson {
                class: a.class.clone(),
                present: a.present,
                p_yes: a.p_yes,
                detection: a.detection.as_ref().map(DetectionJson::from),
            })
            .collect();
        put_json(out_json, &json)
    })
}

/// Loads `code.json` from a split directory together with its rasters.
///
/// # Safety
/// `split_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_corpus_load(split_dir: *const c_char, out: *mut *mut CtxdetCorpus) -> CtxdetStatus {
    guard(|| {
        check_null_out(out)?;
        let dir = PathBuf::from(str_arg(split_dir, "split_dir")?);
        let mut samples = load_code(&dir.join("code.json"))?;
        for s in &mut samples {
            s.raster = Some(s.load_raster(&dir)?);
        }
        put(out, CtxdetCorpus { samples })
    })
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_corpus_len(corpus: *const CtxdetCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.samples.len())
}

/// # Safety
/// `corpus` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_corpus_free(corpus: *mut CtxdetCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Fresh trainer from a TOML run configuration (NULL for defaults) and the
/// vocabulary written by `ctxdet synth`.
///
/// # Safety
/// `config` must be NULL or NUL-terminated; `vocab` NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_trainer_new(
    config: *const c_char,
    vocab: *const c_char,
    out: *mut *mut CtxdetTrainer,
) -> CtxdetStatus {
    guard(|| {
        check_null_out(out)?;
        let cfg_path = if config.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(config, "config")?))
        };
        let cfg = RunConfig::load(cfg_path.as_deref(), &[])?;
        let vocab = Vocabulary::load(Path::new(str_arg(vocab, "vocab")?))?;
        let model = Model::new(cfg.model.clone(), vocab, &mut Rng::new(cfg.train.seed))?;
        let trainer = Trainer::new(model, cfg.train, cfg.loss)?;
        put(out, CtxdetTrainer { trainer })
    })
}

/// Restores a trainer, optimizer state included, from a checkpoint.
///
/// # Safety
/// `checkpoint` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_trainer_load(checkpoint: *const c_char, out: *mut *mut CtxdetTrainer) -> CtxdetStatus {
    guard(|| {
        check_null_out(out)?;
        let path = str_arg(checkpoint, "checkpoint")?;
        let trainer = load_checkpoint(Path::new(path))?;
        put(out, CtxdetTrainer { trainer })
    })
}

/// Runs one optimization step on the next batch of `corpus`.
///
/// # Safety
/// Handles must be live; `report` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_trainer_step(
    trainer: *mut CtxdetTrainer,
    corpus: *const CtxdetCorpus,
    report: *mut CtxdetStepReport,
) -> CtxdetStatus {
    guard(|| {
        let t = &mut mut_arg(trainer, "trainer")?.trainer;
        let c = ref_arg(corpus, "corpus")?;
        let r = t.train_step(&c.samples)?;
        if let Some(out) = report.as_mut() {
            *out = CtxdetStepReport {
                step: r.step,
                lr: r.lr,
                grad_norm: r.grad_norm,
                total: r.loss.total,
                cls: r.loss.cls,
                box_l1: r.loss.box_l1,
                box_giou: r.loss.box_giou,
                lm: r.loss.lm,
                noun: r.loss.noun,
                assigned: r.loss.assigned,
                lm_positions: r.loss.lm_positions,
            };
        }
        Ok(())
    })
}

/// Completed steps, or 0 for NULL.
///
/// # Safety
/// `trainer` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_trainer_steps_done(trainer: *const CtxdetTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.trainer.step)
}

/// # Safety
/// `trainer` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_trainer_save(trainer: *const CtxdetTrainer, path: *const c_char) -> CtxdetStatus {
    guard(|| {
        let t = &ref_arg(trainer, "trainer")?.trainer;
        save_checkpoint(t, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Evaluates the trainer's model on `corpus` with default settings and
/// writes the report as JSON.
///
/// # Safety
/// Handles must be live; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_trainer_evaluate(
    trainer: *const CtxdetTrainer,
    corpus: *const CtxdetCorpus,
    out_json: *mut *mut c_char,
) -> CtxdetStatus {
    guard(|| {
        check_null_out(out_json)?;
        let t = &ref_arg(trainer, "trainer")?.trainer;
        let c = ref_arg(corpus, "corpus")?;
        let report = evaluate(&t.model, &c.samples, &Default::default())?;
        put_json(out_json, &report)
    })
}

/// # Safety
/// `trainer` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_trainer_free(trainer: *mut CtxdetTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
