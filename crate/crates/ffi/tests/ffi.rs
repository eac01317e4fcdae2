//! Exercises the C ABI end to end: train from files, save, reload,
//! detect, evaluate, and the error paths.

use std::ffi::{c_char, CString};
use std::ptr;

use amcn::io::{write_embeddings, EmbeddingFile};
use amcn::{synth_generate, SynthConfig};
use amcn_ffi::{
    amcn_detect, amcn_dim, amcn_evaluate_files, amcn_last_error, amcn_model_free,
    amcn_model_load, amcn_model_save, amcn_num_classes, amcn_train_file, AmcnModel, AMCN_ERR_ARG,
    AMCN_ERR_RUNTIME, AMCN_OK,
};

const TRAIN_JSON: &str = r#"{
    "epochs": 5, "batch_size": 8, "seed": 11, "shots": 6, "polarity": "flipped",
    "hp": {"p": 1, "s": 4, "z": 4, "n_ip": 4, "n_lfop": 4, "n_laop": 4}
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    config: CString,
    train: CString,
    test_id: CString,
    test_ood: CString,
    dim: usize,
}

fn fixture() -> Fixture {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = SynthConfig {
        dim: 12,
        num_id_classes: 3,
        num_ood_clusters: 2,
        samples_per_class: 10,
        noise_low: 0.05,
        noise_high: 0.2,
        seed: 3,
    };
    let out = synth_generate(&cfg).unwrap();
    let paths = [
        ("train.bin", &out.train),
        ("test_id.bin", &out.test_id),
        ("test_ood.bin", &out.test_ood),
    ];
    for (name, set) in paths {
        let file = EmbeddingFile::from_sample_set(set, !set.labels.is_empty());
        write_embeddings(&file, &dir.path().join(name)).unwrap();
    }
    let config_path = dir.path().join("train.json");
    std::fs::write(&config_path, TRAIN_JSON).unwrap();
    let c = |p: &std::path::Path| CString::new(p.to_str().unwrap()).unwrap();
    Fixture {
        config: c(&config_path),
        train: c(&dir.path().join("train.bin")),
        test_id: c(&dir.path().join("test_id.bin")),
        test_ood: c(&dir.path().join("test_ood.bin")),
        dim: cfg.dim,
        _dir: dir,
    }
}

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { amcn_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(buf.len() - 1));
    String::from_utf8(buf).unwrap()
}

fn train_model(fx: &Fixture) -> *mut AmcnModel {
    let mut model: *mut AmcnModel = ptr::null_mut();
    let code = unsafe { amcn_train_file(fx.config.as_ptr(), fx.train.as_ptr(), &mut model) };
    assert_eq!(code, AMCN_OK, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn train_detect_free_roundtrip() {
    let fx = fixture();
    let model = train_model(&fx);
    unsafe {
        assert_eq!(amcn_num_classes(model), 3);
        assert_eq!(amcn_dim(model), fx.dim as i32);

        let id_file = amcn::io::read_embeddings(std::path::Path::new(
            fx.test_id.to_str().unwrap(),
        ))
        .unwrap();
        let id_set = id_file.to_sample_set(Some(3)).unwrap();
        let x: Vec<f64> = id_set.embeddings[0].values().to_vec();

        let (mut is_ood, mut class, mut score) = (-1i32, -2i64, f64::NAN);
        let code = amcn_detect(model, x.as_ptr(), x.len(), &mut is_ood, &mut class, &mut score);
        assert_eq!(code, AMCN_OK, "{}", last_error());
        assert!(is_ood == 0 || is_ood == 1);
        assert!(score.is_finite());
        if is_ood == 0 {
            assert!((0..3).contains(&class));
        } else {
            assert_eq!(class, -1);
        }
        amcn_model_free(model);
    }
}

#[test]
fn save_load_detect_matches_original() {
    let fx = fixture();
    let model = train_model(&fx);
    let dir = tempfile::TempDir::new().unwrap();
    let bank = CString::new(dir.path().join("bank.bin").to_str().unwrap()).unwrap();
    let stats = CString::new(dir.path().join("stats.bin").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(amcn_model_save(model, bank.as_ptr(), stats.as_ptr()), AMCN_OK);
        let mut reloaded: *mut AmcnModel = ptr::null_mut();
        let code = amcn_model_load(bank.as_ptr(), stats.as_ptr(), fx.config.as_ptr(), &mut reloaded);
        assert_eq!(code, AMCN_OK, "{}", last_error());

        let id_set = amcn::io::read_embeddings(std::path::Path::new(fx.test_id.to_str().unwrap()))
            .unwrap()
            .to_sample_set(Some(3))
            .unwrap();
        for x in id_set.embeddings.iter().take(8) {
            let x = x.values();
            let (mut o1, mut c1, mut s1) = (0i32, 0i64, 0.0f64);
            let (mut o2, mut c2, mut s2) = (0i32, 0i64, 0.0f64);
            assert_eq!(amcn_detect(model, x.as_ptr(), x.len(), &mut o1, &mut c1, &mut s1), AMCN_OK);
            assert_eq!(amcn_detect(reloaded, x.as_ptr(), x.len(), &mut o2, &mut c2, &mut s2), AMCN_OK);
            assert_eq!((o1, c1, s1.to_bits()), (o2, c2, s2.to_bits()));
        }
        amcn_model_free(model);
        amcn_model_free(reloaded);
    }
}

#[test]
fn evaluate_files_reports_metrics() {
    let fx = fixture();
    let model = train_model(&fx);
    let (mut auroc, mut fpr95, mut acc) = (f64::NAN, f64::NAN, f64::NAN);
    unsafe {
        let code = amcn_evaluate_files(
            model,
            fx.test_id.as_ptr(),
            fx.test_ood.as_ptr(),
            &mut auroc,
            &mut fpr95,
            &mut acc,
        );
        assert_eq!(code, AMCN_OK, "{}", last_error());
        assert!((0.0..=1.0).contains(&auroc));
        assert!((0.0..=1.0).contains(&fpr95));
        assert!((0.0..=1.0).contains(&acc));

        // Without an OOD file the detection metrics are NaN.
        let code = amcn_evaluate_files(
            model,
            fx.test_id.as_ptr(),
            ptr::null(),
            &mut auroc,
            &mut fpr95,
            &mut acc,
        );
        assert_eq!(code, AMCN_OK, "{}", last_error());
        assert!(auroc.is_nan());
        assert!(fpr95.is_nan());
        amcn_model_free(model);
    }
}

#[test]
fn null_arguments_are_rejected() {
    let fx = fixture();
    unsafe {
        assert_eq!(
            amcn_train_file(fx.config.as_ptr(), fx.train.as_ptr(), ptr::null_mut()),
            AMCN_ERR_ARG
        );
        let mut model: *mut AmcnModel = ptr::null_mut();
        assert_eq!(amcn_train_file(ptr::null(), fx.train.as_ptr(), &mut model), AMCN_ERR_ARG);
        assert!(model.is_null());
        assert_eq!(amcn_num_classes(ptr::null()), -1);
        assert_eq!(amcn_dim(ptr::null()), -1);
        let (mut o, mut c, mut s) = (0i32, 0i64, 0.0f64);
        assert_eq!(amcn_detect(ptr::null(), ptr::null(), 0, &mut o, &mut c, &mut s), AMCN_ERR_ARG);
        amcn_model_free(ptr::null_mut());
    }
}

#[test]
fn wrong_length_and_missing_file_set_last_error() {
    let fx = fixture();
    let model = train_model(&fx);
    unsafe {
        let x = vec![1.0f64; fx.dim + 1];
        let (mut o, mut c, mut s) = (0i32, 0i64, 0.0f64);
        let code = amcn_detect(model, x.as_ptr(), x.len(), &mut o, &mut c, &mut s);
        assert_eq!(code, AMCN_ERR_ARG);
        assert!(last_error().contains("dimension"));

        let missing = CString::new("/no/such/file.bin").unwrap();
        let mut m2: *mut AmcnModel = ptr::null_mut();
        let code = amcn_train_file(fx.config.as_ptr(), missing.as_ptr(), &mut m2);
        assert_eq!(code, AMCN_ERR_RUNTIME);
        assert!(m2.is_null());
        assert!(!last_error().is_empty());
        amcn_model_free(model);
    }
}
