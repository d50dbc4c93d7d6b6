//! Command-line surface. Every command stages its outputs and renames them
//! into place only after success.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::fit::{FitConfig, Fitter, TexInit};
use crate::image::Image;
use crate::io::formats::{encode_f32, encode_png, read_file};
use crate::io::{load_checkpoint, load_dataset, load_model, save_checkpoint, save_dataset, save_model, write_atomic, CameraJson};
use crate::lighting::LightingSpec;
use crate::losses::LossReport;
use crate::render::{render, RenderOptions};
use crate::scene::{Camera, SceneModel, Split};
use crate::service::{serve, Service, ServiceConfig};
use crate::synth::{evaluate, generate_scene, make_dataset, DatasetConfig, SceneConfig};

#[derive(Parser, Debug)]
#[command(name = "relit", version, about = "Relightable point-based neural rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic sphere dataset.
    Synth(SynthArgs),
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Render one view.
    Render(RenderArgs),
    /// Render one view under a sweep of lightings.
    Relight(RelightArgs),
    /// Score a model against a dataset with reference maps.
    Eval(EvalArgs),
    /// Serve renders over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    views: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    flash_every: u64,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 160)]
    height: usize,
    #[arg(long, default_value_t = 180.0)]
    focal: f64,
    #[arg(long, default_value_t = 50_000)]
    points: usize,
    #[arg(long, default_value_t = 8)]
    descriptor_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitTex {
    Flash,
    Nonflash,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Fitted model container.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    patch: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON fit configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss series CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint written at the end (and every `--checkpoint-every` steps).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint", value_parser = clap::value_parser!(u64).range(1..))]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; `--steps` counts the extra steps.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    lr_net: Option<f64>,
    #[arg(long)]
    lr_desc: Option<f64>,
    #[arg(long)]
    lr_lights: Option<f64>,
    #[arg(long)]
    lr_tex: Option<f64>,
    #[arg(long)]
    w_normal: Option<f64>,
    #[arg(long)]
    w_symm: Option<f64>,
    #[arg(long)]
    w_cm: Option<f64>,
    #[arg(long)]
    w_tv: Option<f64>,
    #[arg(long)]
    w_mask: Option<f64>,
    #[arg(long, value_enum)]
    init_tex: Option<InitTex>,
    /// Report held-out metrics every this many steps.
    #[arg(long)]
    validate_every: Option<u64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    camera_json: PathBuf,
    #[arg(long)]
    lighting_json: PathBuf,
    /// `.png` (sRGB) or `.f32` (linear).
    #[arg(long)]
    out: PathBuf,
    /// Keep pixels outside the predicted mask.
    #[arg(long)]
    no_matte: bool,
}

#[derive(Args, Debug)]
struct RelightArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    camera_json: PathBuf,
    /// Output directory; must not exist.
    #[arg(long)]
    out: PathBuf,
    /// Directional light `x,y,z`; repeatable.
    #[arg(long = "direction", value_parser = parse_vec3)]
    directions: Vec<[f64; 3]>,
    #[arg(long, default_value_t = 0.2)]
    ambient: f64,
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1")]
    color: [f64; 3],
    /// SH lighting JSON file (a lighting spec or a 27-number array); repeatable.
    #[arg(long = "sh")]
    sh: Vec<PathBuf>,
    #[arg(long)]
    no_matte: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, env = "RELIT_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Concurrent renders (default: available cores).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    #[arg(long, default_value_t = 16)]
    queue: usize,
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got `{s}`"));
    }
    let mut v = [0.0; 3];
    for (dst, p) in v.iter_mut().zip(parts) {
        *dst = p.trim().parse().map_err(|_| format!("`{p}` is not a number"))?;
    }
    Ok(v)
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 2 on usage errors and 1 on runtime errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render_cmd(a),
        Command::Relight(a) => relight(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn synth(a: SynthArgs) -> Outcome<()> {
    let scene = generate_scene(
        a.seed,
        &SceneConfig {
            points: a.points,
            ..SceneConfig::default()
        },
    )?;
    let cfg = DatasetConfig {
        views: a.views as usize,
        flash_every: a.flash_every as usize,
        width: a.width,
        height: a.height,
        focal: a.focal,
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&scene, &cfg, a.seed)?;
    let notes = format!("synthetic sphere, seed {}, {} views, flash every {}", a.seed, a.views, a.flash_every);
    let path = save_dataset(&a.out, &ds.cloud, &ds.frames, a.descriptor_width, &notes)?;
    println!("{}", path.display());
    Ok(())
}

fn fit_config(a: &FitArgs) -> Outcome<FitConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = read_file(p)?;
            serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => FitConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = v as usize;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let overrides = [
        (a.lr_net, &mut cfg.lr_net),
        (a.lr_desc, &mut cfg.lr_desc),
        (a.lr_lights, &mut cfg.lr_lights),
        (a.lr_tex, &mut cfg.lr_tex),
        (a.w_normal, &mut cfg.weights.normal),
        (a.w_symm, &mut cfg.weights.symm),
        (a.w_cm, &mut cfg.weights.cm),
        (a.w_tv, &mut cfg.weights.tv),
        (a.w_mask, &mut cfg.weights.mask),
    ];
    for (v, dst) in overrides {
        if let Some(v) = v {
            *dst = v;
        }
    }
    if let Some(t) = a.init_tex {
        cfg.init_tex = match t {
            InitTex::Flash => TexInit::Flash,
            InitTex::Nonflash => TexInit::Nonflash,
        };
    }
    if let Some(v) = a.validate_every {
        cfg.validation_every = v;
    }
    cfg.validate().map_err(|e| match e {
        Error::Invalid(msg) => usage(msg),
        other => Failure::Runtime(other),
    })?;
    Ok(cfg)
}

/// CSV with header `step,final,normal,symm,cm,tv,mask,total`.
pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut s = String::from("step,final,normal,symm,cm,tv,mask,total\n");
    for r in reports {
        let t = &r.terms;
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.step, t.final_, t.normal, t.symm, t.cm, t.tv, t.mask, r.total);
    }
    s
}

fn fit(a: FitArgs) -> Outcome<()> {
    let cfg = fit_config(&a)?;
    let ds = load_dataset(&a.manifest)?;
    let mut fitter = match &a.resume {
        Some(p) => Fitter::resume(load_checkpoint(p)?, &ds.frames, cfg.clone())?,
        None => Fitter::new(ds.cloud, &ds.frames, cfg.clone())?,
    };
    let has_val = ds.frames.iter().any(|f| f.split == Split::Val && f.ground_truth.is_some());
    let start = fitter.steps_done();
    let reports = fitter.run(cfg.steps, |r, f| {
        let done = r.step - start;
        if done % 100 == 0 || done == cfg.steps {
            eprintln!("step {} total {:.5} final {:.5}", r.step, r.total, r.terms.final_);
        }
        if cfg.validation_every > 0 && has_val && r.step % cfg.validation_every == 0 {
            let m = evaluate(f.model(), &ds.frames, Split::Val)?;
            eprintln!(
                "step {} val psnr {:.2} albedo {:.3} normals {:.2}° iou {:.3}",
                r.step, m.psnr_relit, m.albedo_corr, m.normal_mae_deg, m.mask_iou
            );
        }
        if let (Some(every), Some(path)) = (a.checkpoint_every, &a.checkpoint) {
            if r.step % every == 0 {
                save_checkpoint(path, &f.checkpoint())?;
            }
        }
        Ok(())
    })?;
    if let Some(path) = &a.log {
        write_atomic(path, loss_csv(&reports).as_bytes())?;
    }
    if let Some(path) = &a.checkpoint {
        save_checkpoint(path, &fitter.checkpoint())?;
    }
    save_model(&a.out, fitter.model())?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn read_camera(path: &Path) -> Result<Camera> {
    read_json::<CameraJson>(path)?.to_camera()
}

fn encode_for(path: &Path, img: &Image) -> Result<Vec<u8>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => Ok(encode_f32(img)),
        _ => encode_png(img, true),
    }
}

fn render_image(model: &SceneModel, camera: &Camera, spec: &LightingSpec, matte: bool) -> Result<Image> {
    let opts = RenderOptions {
        matte_with_mask: matte,
        ..RenderOptions::default()
    };
    render(model, camera, &spec.normalized()?, &opts)
}

fn render_cmd(a: RenderArgs) -> Outcome<()> {
    let model = load_model(&a.model)?;
    let camera = read_camera(&a.camera_json)?;
    let spec: LightingSpec = read_json(&a.lighting_json)?;
    let img = render_image(&model, &camera, &spec, !a.no_matte)?;
    write_atomic(&a.out, &encode_for(&a.out, &img)?)?;
    Ok(())
}

/// An SH file holds either a full lighting spec or the bare coefficients.
fn read_sh(path: &Path) -> Result<LightingSpec> {
    let value: serde_json::Value = read_json(path)?;
    if value.is_array() {
        let coefficients: Vec<f64> =
            serde_json::from_value(value).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        return Ok(LightingSpec::Sh { coefficients });
    }
    serde_json::from_value(value).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn relight(a: RelightArgs) -> Outcome<()> {
    if a.directions.is_empty() && a.sh.is_empty() {
        return Err(usage("give at least one --direction or --sh"));
    }
    if a.out.exists() {
        return Err(usage(format!("{} already exists", a.out.display())));
    }
    let model = load_model(&a.model)?;
    let camera = read_camera(&a.camera_json)?;
    let mut jobs: Vec<(String, LightingSpec)> = Vec::new();
    for (i, d) in a.directions.iter().enumerate() {
        let spec = LightingSpec::DirectionalAmbient {
            direction: *d,
            ambient: a.ambient,
            color: a.color,
        };
        jobs.push((format!("dir_{i:03}.png"), spec));
    }
    for (i, p) in a.sh.iter().enumerate() {
        jobs.push((format!("sh_{i:03}.png"), read_sh(p)?));
    }
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let stage = tempfile::Builder::new()
        .prefix(".relight-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    for (name, spec) in &jobs {
        let img = render_image(&model, &camera, spec, !a.no_matte)?;
        let path = stage.path().join(name);
        fs::write(&path, encode_png(&img, true)?).map_err(|e| Error::io(&path, e))?;
    }
    let staged = stage.keep();
    fs::rename(&staged, &a.out).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        Error::io(&a.out, e)
    })?;
    println!("{} renders in {}", jobs.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome<()> {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.manifest)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let m = evaluate(&model, &ds.frames, split)?;
    println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Outcome<()> {
    let mut config = ServiceConfig {
        queue: a.queue,
        ..ServiceConfig::default()
    };
    if let Some(w) = a.workers {
        config.workers = w as usize;
    }
    let svc = Service::new(config);
    svc.load(&a.model)?;
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(Path::new("<runtime>"), e))?;
    eprintln!("serving {} on http://{addr}", a.model.display());
    rt.block_on(serve(svc, addr)).map_err(|e| Error::io(Path::new(&addr.to_string()), e))?;
    Ok(())
}
