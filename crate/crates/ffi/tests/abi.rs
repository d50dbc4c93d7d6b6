use std::ffi::{CStr, CString};
use std::ptr;

use relit::fit::{FitConfig, Fitter, TexInit};
use relit::io::{save_model, CameraJson};
use relit::net::NetConfig;
use relit::service::{render_png, validate_request, ServiceConfig};
use relit::synth::{generate_scene, make_dataset, DatasetConfig, SceneConfig};
use relit_ffi::*;

fn model_file(dir: &std::path::Path) -> (std::path::PathBuf, relit::scene::SceneModel, CameraJson) {
    let scene = generate_scene(2, &SceneConfig { points: 1500, ..SceneConfig::default() }).unwrap();
    let cfg = DatasetConfig {
        views: 10,
        flash_every: 2,
        width: 24,
        height: 24,
        focal: 27.0,
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&scene, &cfg, 0).unwrap();
    let config = FitConfig {
        patch: 16,
        net: NetConfig {
            base_channels: 4,
            depth: 3,
            levels: 2,
            descriptor_width: 4,
        },
        init_tex: TexInit::Nonflash,
        ..FitConfig::default()
    };
    let cam = CameraJson::from_camera(&ds.frames[1].camera);
    let model = Fitter::new(ds.cloud, &ds.frames, config).unwrap().into_model();
    let path = dir.join("m.rlp");
    save_model(&path, &model).unwrap();
    (path, model, cam)
}

fn request(cam: &CameraJson) -> CString {
    let body = serde_json::json!({ "camera": cam, "lighting": { "mode": "original", "flash": true } });
    CString::new(body.to_string()).unwrap()
}

fn last_error() -> String {
    let p = relit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn load_info_render_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model, cam) = model_file(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut RelitModel = ptr::null_mut();
    unsafe {
        assert_eq!(relit_model_load(cpath.as_ptr(), &mut handle), RelitStatus::Ok);
        assert!(relit_last_error().is_null());
        let mut info = RelitModelInfo::default();
        assert_eq!(relit_model_info(handle, &mut info), RelitStatus::Ok);
        assert_eq!(info.points, model.cloud.len() as u64);
        assert_eq!(info.descriptor_width, 4);

        let req = request(&cam);
        let mut buf = RelitBuffer {
            data: ptr::null_mut(),
            len: 0,
        };
        assert_eq!(relit_render_png(handle, req.as_ptr(), &mut buf), RelitStatus::Ok);
        let bytes = std::slice::from_raw_parts(buf.data, buf.len).to_vec();
        relit_buffer_free(buf);
        let valid = validate_request(req.as_bytes(), &ServiceConfig::default()).unwrap();
        assert_eq!(bytes, render_png(&model, &valid, true).unwrap());

        let (mut w, mut h) = (0u32, 0u32);
        assert_eq!(
            relit_render_linear(handle, req.as_ptr(), ptr::null_mut(), 0, &mut w, &mut h),
            RelitStatus::BufferTooSmall
        );
        assert_eq!((w, h), (24, 24));
        let mut pixels = vec![f32::NAN; (w * h * 3) as usize];
        assert_eq!(
            relit_render_linear(handle, req.as_ptr(), pixels.as_mut_ptr(), pixels.len(), &mut w, &mut h),
            RelitStatus::Ok
        );
        assert!(pixels.iter().all(|v| v.is_finite() && *v >= 0.0));
        relit_model_free(handle);
    }
}

#[test]
fn errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.rlp").to_str().unwrap()).unwrap();
    let mut handle: *mut RelitModel = ptr::null_mut();
    unsafe {
        assert_eq!(relit_model_load(missing.as_ptr(), &mut handle), RelitStatus::Io);
        assert!(handle.is_null());
        assert!(last_error().contains("nope.rlp"));

        let junk = dir.path().join("junk.rlp");
        std::fs::write(&junk, b"RLP1 definitely not a container").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(relit_model_load(junk.as_ptr(), &mut handle), RelitStatus::Format);

        assert_eq!(relit_model_load(ptr::null(), &mut handle), RelitStatus::NullArgument);
        assert_eq!(relit_model_load(missing.as_ptr(), ptr::null_mut()), RelitStatus::NullArgument);
        assert_eq!(relit_model_info(ptr::null(), ptr::null_mut()), RelitStatus::NullArgument);
        relit_model_free(ptr::null_mut());
        relit_buffer_free(RelitBuffer {
            data: ptr::null_mut(),
            len: 0,
        });
    }
}

#[test]
fn bad_request_is_invalid_argument() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _, cam) = model_file(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut RelitModel = ptr::null_mut();
    unsafe {
        assert_eq!(relit_model_load(cpath.as_ptr(), &mut handle), RelitStatus::Ok);
        let body = serde_json::json!({ "camera": cam, "lighting": { "mode": "sh", "coefficients": [1.0, 2.0] } });
        let req = CString::new(body.to_string()).unwrap();
        let mut buf = RelitBuffer {
            data: ptr::null_mut(),
            len: 0,
        };
        assert_eq!(relit_render_png(handle, req.as_ptr(), &mut buf), RelitStatus::InvalidArgument);
        assert!(buf.data.is_null());
        assert!(last_error().contains("coefficients"));
        relit_model_free(handle);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(relit_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"relit.h\"\n\
         int probe(void) {\n\
           RelitModel *m = 0;\n\
           RelitBuffer b = {0, 0};\n\
           RelitModelInfo info;\n\
           if (relit_model_load(\"x\", &m) != RELIT_STATUS_OK) return 1;\n\
           relit_model_info(m, &info);\n\
           relit_render_png(m, \"{}\", &b);\n\
           relit_buffer_free(b);\n\
           relit_model_free(m);\n\
           return relit_last_error() == 0;\n\
         }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .output()
        .expect("a C compiler on PATH");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
