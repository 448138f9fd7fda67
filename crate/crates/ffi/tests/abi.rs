use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use fddwnet::{NetworkGraph, Rng, Shape, Tensor};
use fddwnet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fddw_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn new_net(classes: u32, seed: u64) -> *mut FddwNet {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { fddw_net_new(classes, seed, &mut net) }, FddwStatus::Ok);
    assert!(!net.is_null());
    net
}

fn input(h: usize, w: usize) -> Vec<f32> {
    Tensor::<f32>::random(Shape::new(1, 3, h, w), -1.0, 1.0, &mut Rng::new(7))
        .data()
        .to_vec()
}

#[test]
fn forward_matches_the_library() {
    let net = new_net(5, 3);
    let x = input(16, 8);
    let mut out = vec![0f32; 5 * 16 * 8];
    let status = unsafe { fddw_net_forward(net, x.as_ptr(), 1, 16, 8, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, FddwStatus::Ok);

    let reference = NetworkGraph::<f32>::build(5, &mut Rng::new(3)).unwrap();
    let expected = reference
        .forward(&Tensor::from_vec(Shape::new(1, 3, 16, 8), x.clone()).unwrap())
        .unwrap();
    assert_eq!(out, expected.data());

    let mut labels = vec![u32::MAX; 16 * 8];
    let status = unsafe { fddw_net_predict(net, x.as_ptr(), 1, 16, 8, labels.as_mut_ptr(), labels.len()) };
    assert_eq!(status, FddwStatus::Ok);
    assert!(labels.iter().all(|&l| l < 5));
    unsafe { fddw_net_free(net) };
}

#[test]
fn counts_and_receptive_field() {
    let net = new_net(19, 0);
    let (mut classes, mut trainable, mut total) = (0u32, 0u64, 0u64);
    unsafe {
        assert_eq!(fddw_net_classes(net, &mut classes), FddwStatus::Ok);
        assert_eq!(fddw_net_param_count(net, &mut trainable, &mut total), FddwStatus::Ok);
        fddw_net_free(net);
    }
    assert_eq!(classes, 19);
    assert!((750_000..=850_000).contains(&trainable));
    assert!(total > trainable);

    let mut rf = 0u32;
    for (n, r, want) in [(3, 1, 3), (3, 2, 5), (3, 5, 11), (3, 9, 19), (3, 17, 35)] {
        assert_eq!(unsafe { fddw_receptive_field(n, r, &mut rf) }, FddwStatus::Ok);
        assert_eq!(rf, want);
    }
    assert_eq!(
        unsafe { fddw_receptive_field(4, 1, &mut rf) },
        FddwStatus::InvalidArgument
    );
    assert!(last_error().contains("odd"));
}

#[test]
fn errors_are_reported_not_raised() {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { fddw_net_new(1, 0, &mut net) }, FddwStatus::InvalidArgument);
    assert!(net.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { fddw_net_new(4, 0, ptr::null_mut()) }, FddwStatus::NullPointer);

    let net = new_net(4, 0);
    let x = input(6, 8);
    let mut out = vec![0f32; 4 * 6 * 8];
    let status = unsafe { fddw_net_forward(net, x.as_ptr(), 1, 6, 8, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, FddwStatus::ShapeMismatch);

    let x = input(8, 8);
    let status = unsafe { fddw_net_forward(net, x.as_ptr(), 1, 8, 8, out.as_mut_ptr(), 10) };
    assert_eq!(status, FddwStatus::BufferTooSmall);
    let status = unsafe { fddw_net_forward(ptr::null(), x.as_ptr(), 1, 8, 8, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, FddwStatus::NullPointer);

    let mut classes = 0;
    assert_eq!(unsafe { fddw_net_classes(net, &mut classes) }, FddwStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { fddw_net_free(net) };
    unsafe { fddw_net_free(ptr::null_mut()) };
}

#[test]
fn archive_round_trip_through_memory_and_files() {
    let src = new_net(4, 1);
    let dst = new_net(4, 2);
    let mut size = 0usize;
    let status = unsafe { fddw_net_save_weights_bytes(src, ptr::null_mut(), 0, &mut size) };
    assert_eq!(status, FddwStatus::BufferTooSmall);
    let mut buf = vec![0u8; size];
    let status = unsafe { fddw_net_save_weights_bytes(src, buf.as_mut_ptr(), buf.len(), &mut size) };
    assert_eq!(status, FddwStatus::Ok);
    assert_eq!(&buf[..4], b"FDWN");

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert_eq!(
        unsafe { fddw_net_load_weights_bytes(dst, bad.as_ptr(), bad.len()) },
        FddwStatus::BadMagic
    );
    let mut bad = buf.clone();
    bad[size / 2] ^= 0x10;
    assert_eq!(
        unsafe { fddw_net_load_weights_bytes(dst, bad.as_ptr(), bad.len()) },
        FddwStatus::ChecksumMismatch
    );
    assert_eq!(
        unsafe { fddw_net_load_weights_bytes(dst, buf.as_ptr(), buf.len()) },
        FddwStatus::Ok
    );

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.fdwn").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fddw_net_save_weights(dst, path.as_ptr()) }, FddwStatus::Ok);
    let other = new_net(4, 9);
    assert_eq!(unsafe { fddw_net_load_weights(other, path.as_ptr()) }, FddwStatus::Ok);

    let x = input(8, 8);
    let (mut a, mut b) = (vec![0f32; 4 * 64], vec![0f32; 4 * 64]);
    unsafe {
        assert_eq!(
            fddw_net_forward(src, x.as_ptr(), 1, 8, 8, a.as_mut_ptr(), a.len()),
            FddwStatus::Ok
        );
        assert_eq!(
            fddw_net_forward(other, x.as_ptr(), 1, 8, 8, b.as_mut_ptr(), b.len()),
            FddwStatus::Ok
        );
    }
    assert_eq!(a, b);

    let wrong = new_net(6, 0);
    assert_eq!(
        unsafe { fddw_net_load_weights(wrong, path.as_ptr()) },
        FddwStatus::ShapeMismatchOnLoad
    );
    let missing = CString::new(dir.path().join("absent.fdwn").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { fddw_net_load_weights(wrong, missing.as_ptr()) },
        FddwStatus::IoFailure
    );
    unsafe {
        fddw_net_free(src);
        fddw_net_free(dst);
        fddw_net_free(other);
        fddw_net_free(wrong);
    }
}

#[test]
fn status_names() {
    let name = |c| unsafe { CStr::from_ptr(fddw_status_name(c)) }.to_str().unwrap();
    assert_eq!(name(FddwStatus::Ok as i32), "ok");
    assert_eq!(name(FddwStatus::ChecksumMismatch as i32), "checksum mismatch");
    assert_eq!(name(-4), "unknown status");
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fddwnet.h")).unwrap();
    for f in [
        "fddw_net_new",
        "fddw_net_free",
        "fddw_net_classes",
        "fddw_net_param_count",
        "fddw_receptive_field",
        "fddw_net_load_weights",
        "fddw_net_save_weights",
        "fddw_net_load_weights_bytes",
        "fddw_net_save_weights_bytes",
        "fddw_net_forward",
        "fddw_net_predict",
        "fddw_last_error_message",
        "fddw_status_name",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct FddwNet FddwNet;"));
    assert!(header.contains("FDDW_STATUS_CHECKSUM_MISMATCH = 6"));
}

/// Compiles a C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let target_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = target_dir.join("libfddwnet_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap_or_else(|e| panic!("could not run {cc}: {e}"));
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("rf=19"), "{stdout}");
}
