use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use rankadapt::checkpoint::Checkpoint;
use rankadapt::datastore::{generate_synthetic, write_file, EmbeddingFile, SyntheticSpec};
use rankadapt::metrics::srcc;
use rankadapt::model::{Adapter, AdapterConfig};
use rankadapt::train::{rank, score_items};
use rankadapt_ffi::*;

fn fixture(dir: &Path) -> (CString, CString, EmbeddingFile<f32>, Adapter<f32>) {
    let spec = SyntheticSpec {
        queries: 2,
        ..SyntheticSpec::linear_pool(12, 4, 8, 0.05, 3)
    };
    let file: EmbeddingFile<f32> = generate_synthetic(&spec).unwrap();
    let cfg = AdapterConfig {
        p: 4,
        t: 4,
        t_prime: 2,
        d: 8,
        d_prime: 8,
        num_encoder_blocks: 1,
        relational_tokens: 2,
        ..AdapterConfig::default()
    };
    let adapter = Adapter::<f32>::new(cfg, 5).unwrap();
    let data = dir.join("d.rkad");
    let ckpt = dir.join("m.rkck");
    write_file(&data, &file).unwrap();
    Checkpoint::new(adapter.clone(), 0, "").save(&ckpt).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    (c(&data), c(&ckpt), file, adapter)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rk_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn scores_and_ranks_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt, file, adapter) = fixture(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        let mut model = ptr::null_mut();
        assert_eq!(rk_dataset_open(data.as_ptr(), &mut ds), RkStatus::Ok);
        assert_eq!(rk_model_load(ckpt.as_ptr(), &mut model), RkStatus::Ok);

        let (mut p, mut d, mut t, mut items, mut queries) = (0, 0, 0, 0, 0);
        assert_eq!(
            rk_dataset_info(ds, &mut p, &mut d, &mut t, &mut items, &mut queries),
            RkStatus::Ok
        );
        assert_eq!((p, d, t, items, queries), (4, 8, 4, 12, 2));

        let mut scores = vec![0.0; 12];
        assert_eq!(rk_model_score(model, ds, scores.as_mut_ptr(), 12), RkStatus::Ok);
        let all: Vec<usize> = (0..12).collect();
        assert_eq!(scores, score_items(&adapter, &file, &all).unwrap());
        assert_eq!(
            rk_model_score(model, ds, scores.as_mut_ptr(), 11),
            RkStatus::InvalidArgument
        );

        let expected = rank(&adapter, &file, 1).unwrap();
        let mut written = 0usize;
        let mut ids = vec![0u64; 2];
        let mut vals = vec![0.0; 2];
        assert_eq!(
            rk_model_rank(model, ds, 1, ids.as_mut_ptr(), vals.as_mut_ptr(), 2, &mut written),
            RkStatus::BufferTooSmall
        );
        assert_eq!(written, expected.len());
        ids.resize(written, 0);
        vals.resize(written, 0.0);
        assert_eq!(
            rk_model_rank(model, ds, 1, ids.as_mut_ptr(), vals.as_mut_ptr(), written, &mut written),
            RkStatus::Ok
        );
        assert_eq!(ids, expected.iter().map(|r| r.item_id).collect::<Vec<_>>());
        assert_eq!(vals, expected.iter().map(|r| r.score).collect::<Vec<_>>());

        assert_eq!(
            rk_model_rank(
                model,
                ds,
                99,
                ids.as_mut_ptr(),
                vals.as_mut_ptr(),
                written,
                &mut written
            ),
            RkStatus::UnknownQuery
        );
        assert!(last_error().contains("99"));

        rk_model_free(model);
        rk_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt, _, _) = fixture(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(rk_dataset_open(ptr::null(), &mut ds), RkStatus::NullArgument);
        assert_eq!(rk_dataset_open(data.as_ptr(), ptr::null_mut()), RkStatus::NullArgument);

        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        assert_eq!(rk_dataset_open(missing.as_ptr(), &mut ds), RkStatus::Io);
        assert!(!last_error().is_empty());

        // a checkpoint is not an embedding file and vice versa
        assert_eq!(rk_dataset_open(ckpt.as_ptr(), &mut ds), RkStatus::Format);
        assert!(ds.is_null());
        let mut model = ptr::null_mut();
        assert_eq!(rk_model_load(data.as_ptr(), &mut model), RkStatus::Checkpoint);
        assert!(model.is_null());

        let mut out = 0.0;
        assert_eq!(
            rk_model_score(ptr::null(), ptr::null(), &mut out, 1),
            RkStatus::NullArgument
        );

        rk_dataset_free(ptr::null_mut());
        rk_model_free(ptr::null_mut());
    }
}

#[test]
fn dimension_mismatch_is_a_distinct_code() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt, _, _) = fixture(dir.path());
    let other: EmbeddingFile<f32> = generate_synthetic(&SyntheticSpec::linear_pool(6, 5, 8, 0.05, 1)).unwrap();
    let path = dir.path().join("other.rkad");
    write_file(&path, &other).unwrap();
    let path = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        let mut model = ptr::null_mut();
        assert_eq!(rk_dataset_open(path.as_ptr(), &mut ds), RkStatus::Ok);
        assert_eq!(rk_model_load(ckpt.as_ptr(), &mut model), RkStatus::Ok);
        let mut scores = vec![0.0; 6];
        assert_eq!(rk_model_score(model, ds, scores.as_mut_ptr(), 6), RkStatus::DimMismatch);
        rk_model_free(model);
        rk_dataset_free(ds);
    }
}

#[test]
fn correlations_match_and_flag_undefined_inputs() {
    let x = [1.0, 2.0, 2.0, 5.0, 3.0];
    let y = [0.5, 0.1, 0.9, 4.0, 2.0];
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(rk_srcc(x.as_ptr(), y.as_ptr(), 5, &mut out), RkStatus::Ok);
        assert_eq!(out, srcc(&x, &y).unwrap());
        assert_eq!(rk_plcc(x.as_ptr(), x.as_ptr(), 5, &mut out), RkStatus::Ok);
        assert!((out - 1.0).abs() < 1e-12);
        assert_eq!(rk_srcc(x.as_ptr(), y.as_ptr(), 1, &mut out), RkStatus::Undefined);
        let flat = [2.0; 4];
        assert_eq!(rk_plcc(flat.as_ptr(), y.as_ptr(), 4, &mut out), RkStatus::Undefined);
        assert_eq!(rk_srcc(ptr::null(), y.as_ptr(), 3, &mut out), RkStatus::NullArgument);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/rankadapt.h")).unwrap();
    for name in [
        "rk_last_error",
        "rk_dataset_open",
        "rk_dataset_free",
        "rk_dataset_info",
        "rk_model_load",
        "rk_model_free",
        "rk_model_score",
        "rk_model_rank",
        "rk_srcc",
        "rk_plcc",
        "RK_STATUS_BUFFER_TOO_SMALL",
        "typedef struct RkModel RkModel;",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "rankadapt.h"
int main(void) {
    RkDataset *ds = NULL;
    RkStatus s = rk_dataset_open("x.rkad", &ds);
    if (s != RK_STATUS_OK) { (void)rk_last_error(); }
    rk_dataset_free(ds);
    return 0;
}
"#,
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
