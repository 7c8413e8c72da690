use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use candle_core::DType;
use diffseg::denoiser::DenoiserConfig;
use diffseg::features::BackboneSpec;
use diffseg::model::ModelConfig;
use diffseg::trainer::{TrainConfig, Trainer};
use diffseg_ffi::*;

fn last_error() -> String {
    let p = ds_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn schedule_round_trip() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ds_schedule_linear(1000, 1e-4, 0.02, &mut s) }, DsStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { ds_schedule_num_steps(s, &mut n) }, DsStatus::Ok);
    assert_eq!(n, 1000);
    let mut ab = 0.0;
    assert_eq!(unsafe { ds_schedule_alpha_bar(s, 0, &mut ab) }, DsStatus::Ok);
    assert_eq!(ab, 1.0);
    assert_eq!(unsafe { ds_schedule_alpha_bar(s, 1, &mut ab) }, DsStatus::Ok);
    assert!((ab - (1.0 - 1e-4)).abs() < 1e-15);
    let (mut c0, mut ct, mut var) = (0.0, 0.0, 1.0);
    assert_eq!(unsafe { ds_schedule_posterior(s, 1, &mut c0, &mut ct, &mut var) }, DsStatus::Ok);
    assert_eq!((c0, ct, var), (1.0, 0.0, 0.0));
    assert_eq!(unsafe { ds_schedule_alpha_bar(s, 1001, &mut ab) }, DsStatus::InvalidArgument);
    assert!(last_error().contains("1001"));
    unsafe { ds_schedule_free(s) };
}

#[test]
fn invalid_arguments_are_reported() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ds_schedule_linear(0, 1e-4, 0.02, &mut s) }, DsStatus::InvalidArgument);
    assert!(s.is_null());
    assert_eq!(unsafe { ds_schedule_linear(10, 1e-4, 0.02, ptr::null_mut()) }, DsStatus::NullPointer);
    assert!(last_error().contains("out_schedule"));
    let mut n = 0usize;
    assert_eq!(unsafe { ds_schedule_num_steps(ptr::null(), &mut n) }, DsStatus::NullPointer);
    unsafe { ds_schedule_free(ptr::null_mut()) };
    unsafe { ds_model_free(ptr::null_mut()) };
}

#[test]
fn mask_scores() {
    let pred = [1u8, 1, 0, 0];
    let truth = [1u8, 0, 1, 0];
    let (mut i, mut f) = (0.0, 0.0);
    assert_eq!(unsafe { ds_mask_scores(pred.as_ptr(), truth.as_ptr(), 4, &mut i, &mut f) }, DsStatus::Ok);
    assert!((i - 1.0 / 3.0).abs() < 1e-15);
    assert!((f - 0.5).abs() < 1e-15);
    let bad = [2u8, 0, 0, 0];
    assert_eq!(unsafe { ds_mask_scores(bad.as_ptr(), truth.as_ptr(), 4, &mut i, &mut f) }, DsStatus::Data);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let path = CString::new("/nonexistent/model.dsck").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ds_model_load(path.as_ptr(), &mut m) }, DsStatus::Data);
    assert!(last_error().contains("/nonexistent/model.dsck"));
    assert_eq!(unsafe { ds_model_load(ptr::null(), &mut m) }, DsStatus::NullPointer);
}

#[test]
fn segment_through_the_c_interface() {
    let model = ModelConfig {
        denoiser: DenoiserConfig {
            base_channels: 8,
            time_embed_dim: 16,
            norm_groups: 4,
            ..DenoiserConfig::default()
        },
        backbone: BackboneSpec::RandomConv {
            seed: 1,
            channels: [4, 8, 8],
        },
        patch_size: 16,
        ..ModelConfig::default()
    };
    let trainer = Trainer::new(model, TrainConfig::default(), DType::F32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dsck");
    trainer.checkpoint().unwrap().save(&path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ds_model_load(c_path.as_ptr(), &mut m) }, DsStatus::Ok);
    let mut p = 0usize;
    assert_eq!(unsafe { ds_model_patch_size(m, &mut p) }, DsStatus::Ok);
    assert_eq!(p, 16);

    let (h, w) = (16usize, 32usize);
    let rgb: Vec<f32> = (0..h * w * 3).map(|i| (i % 7) as f32 / 7.0).collect();
    let run = || {
        let mut mask = vec![9u8; h * w];
        let mut cont = vec![0f32; h * w];
        let status =
            unsafe { ds_model_segment(m, rgb.as_ptr(), h, w, 3, 5, 0.0, mask.as_mut_ptr(), cont.as_mut_ptr()) };
        assert_eq!(status, DsStatus::Ok);
        (mask, cont)
    };
    let (mask, cont) = run();
    assert!(mask.iter().all(|v| *v <= 1));
    for (b, c) in mask.iter().zip(&cont) {
        assert_eq!(*b == 1, *c > 0.0);
    }
    assert_eq!(run(), (mask, cont));

    let mut mask = vec![0u8; 20 * 20];
    let status =
        unsafe { ds_model_segment(m, rgb.as_ptr(), 20, 20, 3, 5, 0.0, mask.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, DsStatus::Data);
    assert!(last_error().contains("resize"));
    unsafe { ds_model_free(m) };
}

#[test]
fn header_declares_the_interface_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("diffseg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ds_last_error",
        "ds_schedule_linear",
        "ds_schedule_posterior",
        "ds_model_load",
        "ds_model_segment",
        "ds_model_free",
        "DS_STATUS_OK",
        "typedef struct DsModel DsModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping syntax check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        "#include \"diffseg.h\"\nint main(void) { DsSchedule *s = 0; return ds_schedule_linear(10, 1e-4, 0.02, &s) == DS_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
