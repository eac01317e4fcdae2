//! C ABI for the detection engine. All entry points return a status code;
//! detailed messages are kept per thread and fetched with
//! `amcn_last_error`. Handles are opaque and must be released with
//! `amcn_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;
use std::ptr;

use amcn::config::{Polarity, TrainConfig};
use amcn::distribution::{detect, ClassStats};
use amcn::io::{read_bank, read_embeddings, read_stats, write_bank, write_stats};
use amcn::prompt_bank::{DeskEncoder, PromptBank};
use amcn::trainer::{evaluate, train};
use amcn::vecmath::normalize;
use amcn::HyperParams;

/// Status codes returned by every fallible entry point.
pub const AMCN_OK: i32 = 0;
/// Runtime failure; see `amcn_last_error`.
pub const AMCN_ERR_RUNTIME: i32 = 1;
/// Null pointer or malformed argument.
pub const AMCN_ERR_ARG: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    AMCN_ERR_RUNTIME
}

fn arg_error(msg: &str) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
    AMCN_ERR_ARG
}

/// Opaque trained-model handle: prompt bank, encoder, per-class
/// statistics, and the hyperparameters they were fitted under.
pub struct AmcnModel {
    bank: PromptBank,
    enc: DeskEncoder,
    stats: Vec<ClassStats>,
    hp: HyperParams,
    polarity: Polarity,
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, i32> {
    if p.is_null() {
        return Err(arg_error(&format!("{name} is null")));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(arg_error(&format!("{name} is not valid UTF-8"))),
    }
}

fn load_train_config(path: &Path) -> Result<TrainConfig, i32> {
    let bytes = std::fs::read(path).map_err(|e| set_error(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| set_error(format!("{}: {e}", path.display())))
}

/// Train a model from a JSON config and an AMCNEMB1 embedding file.
/// On success `*out` owns a new handle.
///
/// # Safety
/// `config_path` and `data_path` must be NUL-terminated strings; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn amcn_train_file(
    config_path: *const c_char,
    data_path: *const c_char,
    out: *mut *mut AmcnModel,
) -> i32 {
    if out.is_null() {
        return arg_error("out is null");
    }
    let (config_path, data_path) = match (path_arg(config_path, "config_path"), path_arg(data_path, "data_path")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(c), _) | (_, Err(c)) => return c,
    };
    let cfg = match load_train_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let result = (|| {
        let file = read_embeddings(data_path)?;
        let data = file.to_sample_set(cfg.class_names.as_ref().map(|n| n.len()))?;
        train(&cfg, &data)
    })();
    match result {
        Ok(t) => {
            *out = Box::into_raw(Box::new(AmcnModel {
                bank: t.bank,
                enc: t.enc,
                stats: t.stats,
                hp: cfg.hp,
                polarity: cfg.polarity,
            }));
            AMCN_OK
        }
        Err(e) => set_error(e.to_string()),
    }
}

/// Load a model from a bank checkpoint, a stats file, and the training
/// config that produced them.
///
/// # Safety
/// All paths must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn amcn_model_load(
    bank_path: *const c_char,
    stats_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut AmcnModel,
) -> i32 {
    if out.is_null() {
        return arg_error("out is null");
    }
    let paths = (
        path_arg(bank_path, "bank_path"),
        path_arg(stats_path, "stats_path"),
        path_arg(config_path, "config_path"),
    );
    let (bank_path, stats_path, config_path) = match paths {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(c), _, _) | (_, Err(c), _) | (_, _, Err(c)) => return c,
    };
    let cfg = match load_train_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let result = (|| {
        let (bank, enc) = read_bank(bank_path)?;
        let stats = read_stats(stats_path)?;
        Ok::<_, amcn::AmcnError>((bank, enc, stats))
    })();
    match result {
        Ok((bank, enc, stats)) => {
            *out = Box::into_raw(Box::new(AmcnModel {
                bank,
                enc,
                stats,
                hp: cfg.hp,
                polarity: cfg.polarity,
            }));
            AMCN_OK
        }
        Err(e) => set_error(e.to_string()),
    }
}

/// Persist the model's bank checkpoint and statistics.
///
/// # Safety
/// `model` must be a live handle; paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn amcn_model_save(
    model: *const AmcnModel,
    bank_path: *const c_char,
    stats_path: *const c_char,
) -> i32 {
    let Some(model) = model.as_ref() else {
        return arg_error("model is null");
    };
    let (bank_path, stats_path) = match (path_arg(bank_path, "bank_path"), path_arg(stats_path, "stats_path")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(c), _) | (_, Err(c)) => return c,
    };
    match write_bank(&model.bank, &model.enc, bank_path)
        .and_then(|_| write_stats(&model.stats, stats_path))
    {
        Ok(()) => AMCN_OK,
        Err(e) => set_error(e.to_string()),
    }
}

/// Number of ID classes the model detects among.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn amcn_num_classes(model: *const AmcnModel) -> i32 {
    model.as_ref().map_or(-1, |m| m.bank.num_classes() as i32)
}

/// Embedding dimension the model expects.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn amcn_dim(model: *const AmcnModel) -> i32 {
    model.as_ref().map_or(-1, |m| m.enc.d() as i32)
}

/// Score one embedding. The vector is renormalized onto the hypersphere.
/// `is_ood` receives 0/1, `predicted_class` the class index or -1, and
/// `score` the ranking scalar (larger = more ID).
///
/// # Safety
/// `model` must be a live handle; `embedding` must point to `len` doubles;
/// the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn amcn_detect(
    model: *const AmcnModel,
    embedding: *const f64,
    len: usize,
    is_ood: *mut i32,
    predicted_class: *mut i64,
    score: *mut f64,
) -> i32 {
    let Some(model) = model.as_ref() else {
        return arg_error("model is null");
    };
    if embedding.is_null() || is_ood.is_null() || predicted_class.is_null() || score.is_null() {
        return arg_error("null output or embedding pointer");
    }
    if len != model.enc.d() {
        return arg_error("embedding length does not match model dimension");
    }
    let raw = std::slice::from_raw_parts(embedding, len);
    let result = normalize(raw).and_then(|x| {
        detect(
            &x,
            &model.bank,
            &model.enc,
            &model.stats,
            &model.hp,
            model.polarity,
            true,
        )
    });
    match result {
        Ok(outcome) => {
            *is_ood = outcome.is_ood as i32;
            *predicted_class = outcome.predicted_class.map_or(-1, |c| c as i64);
            *score = outcome.score;
            AMCN_OK
        }
        Err(e) => set_error(e.to_string()),
    }
}

/// Evaluate on ID and optional OOD embedding files. `auroc` and `fpr95`
/// receive NaN when no OOD file is given.
///
/// # Safety
/// `model` must be a live handle; `id_path` a NUL-terminated string;
/// `ood_path` NULL or a NUL-terminated string; out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn amcn_evaluate_files(
    model: *const AmcnModel,
    id_path: *const c_char,
    ood_path: *const c_char,
    auroc: *mut f64,
    fpr95: *mut f64,
    id_accuracy: *mut f64,
) -> i32 {
    let Some(model) = model.as_ref() else {
        return arg_error("model is null");
    };
    if auroc.is_null() || fpr95.is_null() || id_accuracy.is_null() {
        return arg_error("null metric pointer");
    }
    let id_path = match path_arg(id_path, "id_path") {
        Ok(p) => p,
        Err(c) => return c,
    };
    let result = (|| {
        let id = read_embeddings(id_path)?.to_sample_set(Some(model.bank.num_classes()))?;
        let ood = if ood_path.is_null() {
            amcn::SampleSet {
                dim: id.dim,
                embeddings: Vec::new(),
                labels: Vec::new(),
            }
        } else {
            let p = CStr::from_ptr(ood_path)
                .to_str()
                .map_err(|_| amcn::AmcnError::InvalidConfig("ood_path not UTF-8".into()))?;
            read_embeddings(Path::new(p))?.to_sample_set(None)?
        };
        evaluate(
            &model.bank,
            &model.enc,
            &model.stats,
            &model.hp,
            model.polarity,
            &id,
            &ood,
        )
    })();
    match result {
        Ok(eval) => {
            *auroc = eval.metrics.auroc.unwrap_or(f64::NAN);
            *fpr95 = eval.metrics.fpr95.unwrap_or(f64::NAN);
            *id_accuracy = eval.metrics.id_accuracy;
            AMCN_OK
        }
        Err(e) => set_error(e.to_string()),
    }
}

/// Release a handle. NULL is accepted.
///
/// # Safety
/// `model` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn amcn_model_free(model: *mut AmcnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or `cap` must be 0.
#[no_mangle]
pub unsafe extern "C" fn amcn_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
