use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sagiri_core::restorer::{build_restorer, RestorerConfig};
use sagiri_core::sagiri::{build_sagiri, build_unet, build_vae, ControlUnetConfig, VaeConfig};
use sagiri_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sagiri_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn gradient_rgb8(w: usize, h: usize) -> Vec<u8> {
    let mut v = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let base = (x * 255 / (w - 1)) as u8;
            v.extend([base, (y * 16) as u8, 255 - base]);
        }
    }
    v
}

#[test]
fn null_and_missing_inputs_report_errors() {
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(sagiri_image_load(ptr::null(), &mut img), SagiriStatus::NullArgument);
        assert!(img.is_null());
        assert!(last_error().contains("path"));

        let missing = CString::new("/nonexistent/x.png").unwrap();
        assert_eq!(sagiri_image_load(missing.as_ptr(), &mut img), SagiriStatus::NotFound);
        assert!(last_error().contains("nonexistent"));

        let data = [0u8; 3];
        assert_eq!(sagiri_image_from_rgb8(data.as_ptr(), 0, 1, &mut img), SagiriStatus::InvalidArgument);
        assert_eq!(sagiri_mask_unknown_fraction(ptr::null()), -1.0);
        sagiri_image_free(ptr::null_mut());
        assert!(!CStr::from_ptr(sagiri_version()).to_str().unwrap().is_empty());
    }
}

#[test]
fn image_and_mask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = gradient_rgb8(8, 4);
    // two white pixels and one black pixel; partial clipping stays known
    for (i, v) in [(9, 255), (10, 255), (20, 0)] {
        data[3 * i..3 * i + 3].fill(v);
    }
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(sagiri_image_from_rgb8(data.as_ptr(), 8, 4, &mut img), SagiriStatus::Ok);
        assert_eq!((sagiri_image_width(img), sagiri_image_height(img)), (8, 4));
        let path = cstr(&dir.path().join("a.png"));
        assert_eq!(sagiri_image_save(img, path.as_ptr()), SagiriStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sagiri_image_load(path.as_ptr(), &mut back), SagiriStatus::Ok);
        let mut buf = vec![0u8; data.len()];
        assert_eq!(sagiri_image_copy_rgb8(back, buf.as_mut_ptr(), buf.len()), SagiriStatus::Ok);
        assert_eq!(buf, data);
        assert_eq!(sagiri_image_copy_rgb8(back, buf.as_mut_ptr(), 3), SagiriStatus::InvalidArgument);

        let mut mask = ptr::null_mut();
        assert_eq!(sagiri_mask_detect(img, &mut mask), SagiriStatus::Ok);
        assert!((sagiri_mask_unknown_fraction(mask) - 3.0 / 32.0).abs() < 1e-12);
        sagiri_mask_free(mask);
        sagiri_image_free(back);
        sagiri_image_free(img);
    }
}

#[test]
fn restore_and_refine_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let rcfg = RestorerConfig {
        unshuffle_scale: 4,
        embed_dim: 16,
        n_blocks: 1,
        block_depth: 1,
        window_size: 2,
        n_heads: 2,
        mlp_ratio: 2.0,
        upsample_stages: 2,
    };
    let rp = dir.path().join("restorer.safetensors");
    build_restorer(&rcfg, 1).unwrap().save(&rp).unwrap();
    let vp = dir.path().join("vae.safetensors");
    build_vae(&VaeConfig { base_width: 8, ..Default::default() }, 1).unwrap().save(&vp).unwrap();
    let ucfg = ControlUnetConfig::default();
    let base = build_unet(&ucfg, 1).unwrap();
    let sp = dir.path().join("sagiri.safetensors");
    build_sagiri(&ucfg, Some(&base), 1).unwrap().save(&sp).unwrap();

    let data = gradient_rgb8(16, 16);
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(sagiri_image_from_rgb8(data.as_ptr(), 16, 16, &mut img), SagiriStatus::Ok);
        let mut restorer = ptr::null_mut();
        assert_eq!(sagiri_restorer_load(cstr(&rp).as_ptr(), &mut restorer), SagiriStatus::Ok);
        let mut stage1 = ptr::null_mut();
        assert_eq!(sagiri_restorer_apply(restorer, img, &mut stage1), SagiriStatus::Ok);
        assert_eq!(sagiri_image_width(stage1), 16);

        let mut refiner = ptr::null_mut();
        assert_eq!(
            sagiri_refiner_load(cstr(&vp).as_ptr(), cstr(&rp).as_ptr(), &mut refiner),
            SagiriStatus::Checkpoint,
            "{}",
            last_error()
        );
        assert!(refiner.is_null());
        assert_eq!(sagiri_refiner_load(cstr(&vp).as_ptr(), cstr(&sp).as_ptr(), &mut refiner), SagiriStatus::Ok);
        let mut mask = ptr::null_mut();
        assert_eq!(sagiri_mask_detect(img, &mut mask), SagiriStatus::Ok);
        let prompt = CString::new("a bright sky").unwrap();
        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(sagiri_refiner_refine(refiner, stage1, prompt.as_ptr(), mask, 3, 9, &mut a), SagiriStatus::Ok);
        assert_eq!(sagiri_refiner_refine(refiner, stage1, prompt.as_ptr(), mask, 3, 9, &mut b), SagiriStatus::Ok);
        let mut ba = vec![0u8; 16 * 16 * 3];
        let mut bb = ba.clone();
        sagiri_image_copy_rgb8(a, ba.as_mut_ptr(), ba.len());
        sagiri_image_copy_rgb8(b, bb.as_mut_ptr(), bb.len());
        assert_eq!(ba, bb);

        for p in [a, b, stage1, img] {
            sagiri_image_free(p);
        }
        sagiri_mask_free(mask);
        sagiri_refiner_free(refiner);
        sagiri_restorer_free(restorer);
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sagiri.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["sagiri_image_load", "sagiri_refiner_refine", "sagiri_last_error", "SAGIRI_STATUS_OK"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        return;
    };
    if !cc.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sagiri.h\"\nint main(void) { SagiriImage *img = 0; return sagiri_image_load(\"x\", &img) == SAGIRI_STATUS_OK; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
