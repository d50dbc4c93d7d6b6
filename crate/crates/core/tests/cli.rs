use std::path::Path;
use std::process::Command;

use relit::io::{load_dataset, load_model, Manifest};

fn relit(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_relit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RELIT_PORT")
        .output()
        .expect("spawn relit");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small_synth(dir: &Path, views: &str, flash_every: &str) -> i32 {
    let args = [
        "synth", "--out", "ds", "--views", views, "--flash-every", flash_every, "--width", "32", "--height", "32",
        "--focal", "36", "--points", "2000",
    ];
    relit(&args, dir).0
}

const TINY_CONFIG: &str =
    r#"{"net":{"base_channels":4,"depth":3,"levels":2,"descriptor_width":8},"init_tex":"nonflash","patch":24}"#;

#[test]
fn help_on_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synth", "fit", "render", "relight", "eval", "serve"] {
        let (code, out, _) = relit(&[sub, "--help"], dir.path());
        assert_eq!(code, 0, "{sub} --help");
        assert!(out.contains("Usage"), "{sub}: {out}");
    }
    assert_eq!(relit(&["--help"], dir.path()).0, 0);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cases: [&[&str]; 4] = [
        &["fit", "--manifest", "m.json", "--out", "model.rlp", "--steps", "0"],
        &["frobnicate"],
        &["render", "--model", "m.rlp"],
        &["synth", "--out", "x", "--flash-every", "0"],
    ];
    for args in cases {
        let (code, _, err) = relit(args, p);
        assert_eq!(code, 2, "{args:?}: {err}");
    }
    assert!(!p.join("model.rlp").exists());
}

#[test]
fn synth_protocol_has_20_flash_frames() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(small_synth(dir.path(), "100", "5"), 0);
    let text = std::fs::read_to_string(dir.path().join("ds/manifest.json")).unwrap();
    let m: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.frames.len(), 100);
    assert_eq!(m.frames.iter().filter(|f| f.flash).count(), 20);
    assert_eq!(m.descriptor_width, 8);
}

#[test]
fn runtime_failure_exits_1_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (code, _, err) = relit(&["fit", "--manifest", "missing.json", "--out", "m.rlp", "--steps", "1", "--log", "l.csv"], p);
    assert_eq!(code, 1, "{err}");
    assert!(!p.join("m.rlp").exists() && !p.join("l.csv").exists());
    assert_eq!(std::fs::read_dir(p).unwrap().count(), 0);
}

#[test]
fn synth_fit_eval_render_relight() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(small_synth(p, "10", "2"), 0);
    std::fs::write(p.join("cfg.json"), TINY_CONFIG).unwrap();
    let (code, _, err) = relit(
        &[
            "fit", "--manifest", "ds/manifest.json", "--out", "m.rlp", "--steps", "2", "--config", "cfg.json", "--log",
            "loss.csv", "--checkpoint", "ck.rlp", "--seed", "3",
        ],
        p,
    );
    assert_eq!(code, 0, "{err}");
    let model = load_model(&p.join("m.rlp")).unwrap();
    assert_eq!(model.trained_steps, 2);
    let csv = std::fs::read_to_string(p.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,final,normal,symm,cm,tv,mask,total"));
    assert_eq!(lines.count(), 2);

    // Resuming adds steps on top of the checkpoint.
    let (code, _, err) = relit(
        &[
            "fit", "--manifest", "ds/manifest.json", "--out", "m2.rlp", "--steps", "1", "--config", "cfg.json", "--resume",
            "ck.rlp", "--seed", "3",
        ],
        p,
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(load_model(&p.join("m2.rlp")).unwrap().trained_steps, 3);

    let (code, out, err) = relit(&["eval", "--model", "m.rlp", "--manifest", "ds/manifest.json"], p);
    assert_eq!(code, 0, "{err}");
    let metrics: serde_json::Value = serde_json::from_str(&out).unwrap();
    for key in ["psnr_relit", "albedo_corr", "normal_mae_deg", "mask_iou"] {
        assert!(metrics[key].is_number(), "{key} in {out}");
    }

    let ds = load_dataset(&p.join("ds/manifest.json")).unwrap();
    let cam = relit::io::CameraJson::from_camera(&ds.frames[0].camera);
    std::fs::write(p.join("cam.json"), serde_json::to_string(&cam).unwrap()).unwrap();
    std::fs::write(p.join("light.json"), r#"{"mode":"original","flash":true}"#).unwrap();
    let (code, _, err) =
        relit(&["render", "--model", "m.rlp", "--camera-json", "cam.json", "--lighting-json", "light.json", "--out", "r.png"], p);
    assert_eq!(code, 0, "{err}");
    let png = std::fs::read(p.join("r.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    std::fs::write(p.join("sh.json"), serde_json::to_string(&[0.5f64; 27]).unwrap()).unwrap();
    let (code, _, err) = relit(
        &[
            "relight", "--model", "m.rlp", "--camera-json", "cam.json", "--out", "sweep", "--direction", "0,0,-1",
            "--direction", "1,0,0", "--sh", "sh.json",
        ],
        p,
    );
    assert_eq!(code, 0, "{err}");
    let mut names: Vec<String> =
        std::fs::read_dir(p.join("sweep")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["dir_000.png", "dir_001.png", "sh_000.png"]);

    // A bad SH file fails the whole sweep and leaves nothing behind.
    std::fs::write(p.join("bad.json"), "[1, 2]").unwrap();
    let (code, _, _) =
        relit(&["relight", "--model", "m.rlp", "--camera-json", "cam.json", "--out", "sweep2", "--sh", "bad.json"], p);
    assert_eq!(code, 1);
    assert!(!p.join("sweep2").exists());
    let leftovers = std::fs::read_dir(p).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".relight")).count();
    assert_eq!(leftovers, 0);
}
