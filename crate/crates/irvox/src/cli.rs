//! Batch command-line front end: dataset generation, training, rendering,
//! relighting, material editing, evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 data error, 4 numerical
//! failure.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use crate::math::{Aabb, RngKey, Vec3};
use crate::oracle::{make_scene, EnvPreset, GenConfig, GenLights, ScenePreset};
use crate::scene::{MaterialEdit, RenderCfg, RenderMode};
use crate::scene_io::{
    align_albedo, load_dataset, normal_mae, psnr, read_hdr, read_pfm, ssim, write_pfm, write_png,
    Dataset, ImageF,
};
use crate::shading::PixelEnvMap;
use crate::trainer::{parse_lights, run_schedule, TrainConfig, TrainState};
use crate::volume_render::Ray;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const USAGE: &str = "\
usage: irvox <command> [options]

commands:
  gen-scene      generate a procedural ground-truth dataset
  train          reconstruct a scene from a dataset
  render         render decomposition channels from a checkpoint
  relight        render under a novel environment map
  edit-material  render with overridden material parameters
  eval           compute metrics against ground truth
  gradcheck      finite-difference check of the training gradients

run `irvox <command> --help` for the command's options.
";

struct Args {
    flags: std::collections::HashMap<String, Vec<String>>,
}

impl Args {
    fn parse(mut raw: VecDeque<String>) -> Result<Self, String> {
        let mut flags: std::collections::HashMap<String, Vec<String>> = Default::default();
        while let Some(a) = raw.pop_front() {
            if let Some(name) = a.strip_prefix("--") {
                if name == "help" {
                    flags.entry("help".into()).or_default();
                    continue;
                }
                let value = raw
                    .pop_front()
                    .ok_or_else(|| format!("--{name} expects a value"))?;
                flags.entry(name.to_string()).or_default().push(value);
            } else {
                return Err(format!("unexpected argument `{a}`"));
            }
        }
        Ok(Args { flags })
    }

    fn take(&mut self, name: &str) -> Option<String> {
        self.flags.get_mut(name).and_then(|v| {
            if v.is_empty() {
                None
            } else {
                Some(v.remove(0))
            }
        })
    }

    fn take_all(&mut self, name: &str) -> Vec<String> {
        self.flags.remove(name).unwrap_or_default()
    }

    fn has(&self, name: &str) -> bool {
        self.flags.contains_key(name)
    }

    /// Errors on unknown leftover flags.
    fn finish(mut self) -> Result<(), String> {
        self.flags.retain(|_, v| !v.is_empty());
        self.flags.remove("help");
        if let Some(k) = self.flags.keys().next() {
            return Err(format!("unknown or repeated flag --{k}"));
        }
        Ok(())
    }
}

/// Entry point used by the `irvox` binary. Returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let mut args: VecDeque<String> = argv.into_iter().skip(1).collect();
    let cmd = match args.pop_front() {
        Some(c) => c,
        None => {
            eprint!("{USAGE}");
            return EXIT_USAGE;
        }
    };
    let parsed = match Args::parse(args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = match cmd.as_str() {
        "gen-scene" => cmd_gen_scene(parsed),
        "train" => cmd_train(parsed),
        "render" => cmd_render(parsed),
        "relight" => cmd_relight(parsed),
        "edit-material" => cmd_edit_material(parsed),
        "eval" => cmd_eval(parsed),
        "gradcheck" => cmd_gradcheck(parsed),
        other => {
            eprintln!("error: unknown command `{other}`");
            eprint!("{USAGE}");
            return EXIT_USAGE;
        }
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            EXIT_DATA
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            EXIT_NUMERIC
        }
    }
}

pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<crate::scene_io::IoError> for CliError {
    fn from(e: crate::scene_io::IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::trainer::TrainError> for CliError {
    fn from(e: crate::trainer::TrainError) -> Self {
        match e {
            crate::trainer::TrainError::NonFinite(i) => {
                CliError::Numeric(format!("non-finite loss at iteration {i}"))
            }
            crate::trainer::TrainError::Config(msg) => CliError::Usage(msg),
            crate::trainer::TrainError::Io(e) => CliError::Data(e.to_string()),
        }
    }
}

fn init_threads(args: &mut Args) -> Result<(), CliError> {
    if let Some(t) = args.take("threads") {
        let n: usize = t
            .parse()
            .map_err(|_| CliError::Usage(format!("bad thread count `{t}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    Ok(())
}

fn required(args: &mut Args, name: &str) -> Result<String, CliError> {
    args.take(name)
        .ok_or_else(|| CliError::Usage(format!("missing --{name}")))
}

fn cmd_gen_scene(mut args: Args) -> Result<i32, CliError> {
    if args.has("help") {
        println!(
            "irvox gen-scene --out DIR [--scene sphere|sphere_slab] [--env studio|sun]\n\
             \x20 [--views N] [--test-views N] [--size N] [--lights MODE] [--dirs N]\n\
             \x20 [--indirect-dirs N] [--seed N] [--threads N]\n\
             MODE: single | rotated:A,B,.. | general:P | limited:P"
        );
        return Ok(EXIT_OK);
    }
    init_threads(&mut args)?;
    let out = PathBuf::from(required(&mut args, "out")?);
    let mut cfg = GenConfig::default();
    if let Some(s) = args.take("scene") {
        cfg.preset =
            ScenePreset::parse(&s).ok_or_else(|| CliError::Usage(format!("bad scene `{s}`")))?;
    }
    if let Some(s) = args.take("env") {
        cfg.env = EnvPreset::parse(&s).ok_or_else(|| CliError::Usage(format!("bad env `{s}`")))?;
    }
    let parse_n = |v: Option<String>, d: usize| -> Result<usize, CliError> {
        match v {
            None => Ok(d),
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("bad number `{s}`"))),
        }
    };
    cfg.train_views = parse_n(args.take("views"), cfg.train_views)?;
    cfg.test_views = parse_n(args.take("test-views"), cfg.test_views)?;
    let size = parse_n(args.take("size"), cfg.width)?;
    cfg.width = size;
    cfg.height = size;
    cfg.shading_dirs = parse_n(args.take("dirs"), cfg.shading_dirs)?;
    cfg.indirect_dirs = parse_n(args.take("indirect-dirs"), cfg.indirect_dirs)?;
    cfg.seed = parse_n(args.take("seed"), cfg.seed as usize)? as u64;
    if let Some(s) = args.take("lights") {
        cfg.lights = if let Some(rest) = s.strip_prefix("limited:") {
            let p: usize = rest
                .parse()
                .map_err(|_| CliError::Usage(format!("bad light count `{rest}`")))?;
            GenLights::LimitedGeneral(p)
        } else {
            match parse_lights(&s).map_err(|e| CliError::Usage(format!("{e:?}")))? {
                crate::scene::LightMode::Single => GenLights::Single,
                crate::scene::LightMode::Rotated(a) => GenLights::Rotated(a),
                crate::scene::LightMode::General(p) => GenLights::General(p),
            }
        };
    }
    args.finish().map_err(CliError::Usage)?;
    make_scene(&cfg, &out)?;
    println!(
        "wrote dataset to {} ({} train views, {} test views)",
        out.display(),
        cfg.train_views,
        cfg.test_views
    );
    Ok(EXIT_OK)
}

fn cmd_train(mut args: Args) -> Result<i32, CliError> {
    if args.has("help") {
        println!(
            "irvox train --data DIR --out DIR [--preset paper|desk] [--config FILE]\n\
             \x20 [--set key=value]... [--seed N] [--lights MODE] [--resume CKPT]\n\
             \x20 [--threads N]"
        );
        return Ok(EXIT_OK);
    }
    init_threads(&mut args)?;
    let data = PathBuf::from(required(&mut args, "data")?);
    let out = PathBuf::from(required(&mut args, "out")?);
    let resume = args.take("resume").map(PathBuf::from);
    let mut cfg = match args.take("preset").as_deref() {
        None | Some("desk") => TrainConfig::desk(),
        Some("paper") => TrainConfig::paper(),
        Some(other) => return Err(CliError::Usage(format!("unknown preset `{other}`"))),
    };
    if let Some(path) = args.take("config") {
        let text =
            std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{path}: {e}")))?;
        cfg.apply_kv(&text)?;
    }
    for kv in args.take_all("set") {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set wants key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.take("seed") {
        cfg.seed = seed
            .parse()
            .map_err(|_| CliError::Usage(format!("bad seed `{seed}`")))?;
    }
    if let Some(lights) = args.take("lights") {
        cfg.lights = parse_lights(&lights)?;
    }
    let set_overrides = args.take_all("set-after-resume");
    args.finish().map_err(CliError::Usage)?;

    // On resume the checkpointed config wins; overrides still apply on
    // top so schedules can be extended.
    let mut state: TrainState<f32> = match resume {
        Some(ckpt) => {
            let mut st = TrainState::load(&ckpt, Aabb::unit())?;
            println!(
                "resumed from {} at iteration {}",
                ckpt.display(),
                st.iteration
            );
            for kv in &set_overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("bad override `{kv}`")))?;
                st.config.set(k.trim(), v.trim())?;
            }
            st
        }
        None => {
            cfg.validate()?;
            TrainState::new(cfg, Aabb::unit())
        }
    };
    state.config.validate()?;
    let cfg = state.config.clone();

    let bg = [
        cfg.background[0] as f32,
        cfg.background[1] as f32,
        cfg.background[2] as f32,
    ];
    let dataset = load_dataset(&data, "train", bg)?;
    println!(
        "training on {} frames ({} lighting conditions), {} iterations",
        dataset.frames.len(),
        dataset.light_count,
        cfg.total_iters
    );
    let _ = &mut state;
    let t0 = std::time::Instant::now();
    let total = state.config.total_iters;
    let ckpt_every = state.config.checkpoint_every;
    let val_dir = out.join("val");
    let val_frame = dataset.frames[0].clone();
    let state = run_schedule(state, &dataset, Some(&out), |iter, rep, st| {
        if iter % 500 == 0 || iter + 1 == total {
            println!(
                "iter {iter:6}  total {:.5}  rf {:.5}  pb {:.5}  [{:.0?}]",
                rep.total,
                rep.rf,
                rep.pb,
                t0.elapsed()
            );
        }
        // Periodic validation renders of the first training view.
        if ckpt_every > 0 && iter > 0 && iter % ckpt_every == 0 {
            if let Err(e) = write_validation_renders(st, &val_frame, &val_dir, iter) {
                eprintln!("validation render failed: {e}");
            }
        }
    })?;
    println!(
        "finished at iteration {} in {:.0?}; checkpoint at {}",
        state.iteration,
        t0.elapsed(),
        out.join("ckpt_final.tirc").display()
    );
    Ok(EXIT_OK)
}

fn load_state(args: &mut Args) -> Result<TrainState<f32>, CliError> {
    let ckpt = PathBuf::from(required(args, "ckpt")?);
    Ok(TrainState::load(&ckpt, Aabb::unit())?)
}

/// Quarter-resolution radiance-field and physically-based previews of one
/// view, written next to the checkpoints.
fn write_validation_renders(
    state: &TrainState<f32>,
    frame: &crate::scene_io::Frame,
    dir: &Path,
    iter: usize,
) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mut cam = frame.camera.clone();
    cam.width = (cam.width / 4).max(32);
    cam.height = (cam.height / 4).max(32);
    let (rays, ids) = camera_rays(&cam, 0, cam.width * cam.height, &state.scene.bbox);
    let mut cfg = render_cfg_from(state, Some(32), state.config.seed ^ 0x5a5a);
    cfg.light = frame.light.min(state.scene.light_count() - 1);
    for (mode, tag) in [(RenderMode::Rf, "rf"), (RenderMode::Pb, "pb")] {
        let rgb = state
            .scene
            .render_rays(&rays, &ids, mode, &cfg, state.mask.as_ref());
        let img = image_from_rgb(rgb, cam.width, cam.height);
        write_png(&dir.join(format!("iter_{iter:06}_{tag}.png")), &img, false)
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Builds clipped rays and pixel ids for a camera.
fn camera_rays(
    cam: &crate::scene_io::Camera,
    frame_idx: usize,
    per_frame: usize,
    bbox: &Aabb<f32>,
) -> (Vec<Option<Ray<f32>>>, Vec<u64>) {
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    let mut ids = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (o, d) = cam.ray::<f32>(x as f64 + 0.5, y as f64 + 0.5);
            rays.push(Ray::clipped(o, d, bbox, 0.0));
            ids.push((frame_idx * per_frame + y * cam.width + x) as u64);
        }
    }
    (rays, ids)
}

fn image_from_rgb(rgb: Vec<Vec3<f32>>, w: usize, h: usize) -> ImageF {
    let mut img = ImageF::new(w, h);
    for (i, c) in rgb.iter().enumerate() {
        img.rgb[3 * i..3 * i + 3].copy_from_slice(&c.0);
    }
    img
}

fn parse_views(spec: Option<String>, total: usize) -> Result<Vec<usize>, CliError> {
    match spec {
        None => Ok((0..total).collect()),
        Some(s) => s
            .split(',')
            .map(|v| {
                let idx: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad view index `{v}`")))?;
                if idx >= total {
                    return Err(CliError::Usage(format!(
                        "view {idx} out of range (dataset has {total})"
                    )));
                }
                Ok(idx)
            })
            .collect(),
    }
}

fn render_cfg_from(state: &TrainState<f32>, dirs: Option<usize>, seed: u64) -> RenderCfg<f32> {
    let mut cfg = RenderCfg::new(state.config.samples_per_ray(state.scene.density.resolution));
    cfg.secondary = state.config.secondary_cfg();
    cfg.secondary_dirs = dirs.unwrap_or(256);
    cfg.background = Vec3::new(
        state.config.background[0] as f32,
        state.config.background[1] as f32,
        state.config.background[2] as f32,
    );
    cfg.surface_threshold = state.config.surface_threshold as f32;
    cfg.rng = RngKey(seed);
    cfg
}

fn cmd_render(mut args: Args) -> Result<i32, CliError> {
    if args.has("help") {
        println!(
            "irvox render --ckpt FILE --data DIR --out DIR\n\
             \x20 [--mode rf|pb|normal|albedo|roughness|visibility|indirect]\n\
             \x20 [--split test] [--views 0,1,..] [--dirs N] [--light L] [--threads N]"
        );
        return Ok(EXIT_OK);
    }
    init_threads(&mut args)?;
    let state = load_state(&mut args)?;
    let data = PathBuf::from(required(&mut args, "data")?);
    let out = PathBuf::from(required(&mut args, "out")?);
    let mode_s = args.take("mode").unwrap_or_else(|| "pb".into());
    let mode = RenderMode::parse(&mode_s)
        .ok_or_else(|| CliError::Usage(format!("unknown mode `{mode_s}`")))?;
    let split = args.take("split").unwrap_or_else(|| "test".into());
    let dirs = match args.take("dirs") {
        Some(d) => Some(
            d.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad dir count `{d}`")))?,
        ),
        None => None,
    };
    let light: usize = args
        .take("light")
        .map(|l| l.parse())
        .transpose()
        .map_err(|_| CliError::Usage("bad light index".into()))?
        .unwrap_or(0);
    if light >= state.scene.light_count() {
        return Err(CliError::Usage(format!(
            "light {light} out of range (model has {})",
            state.scene.light_count()
        )));
    }
    let views_spec = args.take("views");
    args.finish().map_err(CliError::Usage)?;

    let bg = [1.0f32; 3];
    let dataset = load_dataset(&data, &split, bg)?;
    let views = parse_views(views_spec, dataset.frames.len())?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(e.to_string()))?;
    let mut cfg = render_cfg_from(&state, dirs, state.config.seed);
    cfg.light = light;
    render_views(&state, &dataset, &views, mode, &cfg, &out, &mode_s)?;
    Ok(EXIT_OK)
}

fn render_views(
    state: &TrainState<f32>,
    dataset: &Dataset,
    views: &[usize],
    mode: RenderMode,
    cfg: &RenderCfg<f32>,
    out: &Path,
    tag: &str,
) -> Result<(), CliError> {
    let per_frame = dataset.pixels_per_frame();
    for &v in views {
        let frame = &dataset.frames[v];
        let (rays, ids) = camera_rays(&frame.camera, v, per_frame, &state.scene.bbox);
        let rgb = state
            .scene
            .render_rays(&rays, &ids, mode, cfg, state.mask.as_ref());
        let (w, h) = (frame.camera.width, frame.camera.height);
        let img = image_from_rgb(rgb, w, h);
        // Normals are remapped for display; every channel also lands in a
        // linear PFM.
        let png = out.join(format!("{}_{tag}.png", frame.name));
        match mode {
            RenderMode::Normal => {
                let mut disp = img.clone();
                for c in disp.rgb.iter_mut() {
                    *c = 0.5 * (*c + 1.0);
                }
                write_png(&png, &disp, false)?;
            }
            _ => write_png(&png, &img, false)?,
        }
        write_pfm(
            &out.join(format!("{}_{tag}.pfm", frame.name)),
            w,
            h,
            &img.rgb,
        )?;
        println!("wrote {}", png.display());
    }
    Ok(())
}

fn load_envmap(path: &Path) -> Result<PixelEnvMap<f32>, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let (w, h, rgb) = match ext {
        "hdr" => read_hdr(path)?,
        "pfm" => {
            let (w, h, c, data) = read_pfm(path)?;
            if c != 3 {
                return Err(CliError::Data(format!(
                    "{}: environment map must be RGB",
                    path.display()
                )));
            }
            (w, h, data)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unsupported environment container `.{other}` (use .hdr or .pfm)"
            )))
        }
    };
    PixelEnvMap::new(h, w, rgb).map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_relight(mut args: Args) -> Result<i32, CliError> {
    if args.has("help") {
        println!(
            "irvox relight --ckpt FILE --data DIR --envmap FILE.hdr|.pfm --out DIR\n\
             \x20 [--split test] [--views 0,1,..] [--dirs N] [--threads N]"
        );
        return Ok(EXIT_OK);
    }
    init_threads(&mut args)?;
    let state = load_state(&mut args)?;
    let data = PathBuf::from(required(&mut args, "data")?);
    let envmap = PathBuf::from(required(&mut args, "envmap")?);
    let out = PathBuf::from(required(&mut args, "out")?);
    let split = args.take("split").unwrap_or_else(|| "test".into());
    let dirs = args
        .take("dirs")
        .map(|d| d.parse::<usize>())
        .transpose()
        .map_err(|_| CliError::Usage("bad dir count".into()))?;
    let views_spec = args.take("views");
    args.finish().map_err(CliError::Usage)?;

    let env = load_envmap(&envmap)?;
    let dataset = load_dataset(&data, &split, [1.0; 3])?;
    let views = parse_views(views_spec, dataset.frames.len())?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(e.to_string()))?;
    let cfg = render_cfg_from(&state, dirs, state.config.seed);
    let per_frame = dataset.pixels_per_frame();
    for &v in &views {
        let frame = &dataset.frames[v];
        let (rays, ids) = camera_rays(&frame.camera, v, per_frame, &state.scene.bbox);
        let rgb = state
            .scene
            .relight_rays(&rays, &ids, &env, &cfg, state.mask.as_ref())
            .map_err(|e| CliError::Data(e.to_string()))?;
        let img = image_from_rgb(rgb, frame.camera.width, frame.camera.height);
        let png = out.join(format!("{}_relight.png", frame.name));
        write_png(&png, &img, false)?;
        write_pfm(
            &out.join(format!("{}_relight.pfm", frame.name)),
            frame.camera.width,
            frame.camera.height,
            &img.rgb,
        )?;
        println!("wrote {}", png.display());
    }
    Ok(EXIT_OK)
}

fn cmd_edit_material(mut args: Args) -> Result<i32, CliError> {
    if args.has("help") {
        println!(
            "irvox edit-material --ckpt FILE --data DIR --out DIR\n\
             \x20 [--albedo-scale r,g,b] [--roughness-set R]\n\
             \x20 [--split test] [--views 0,1,..] [--dirs N] [--threads N]"
        );
        return Ok(EXIT_OK);
    }
    init_threads(&mut args)?;
    let state = load_state(&mut args)?;
    let data = PathBuf::from(required(&mut args, "data")?);
    let out = PathBuf::from(required(&mut args, "out")?);
    let mut edit = MaterialEdit {
        albedo_scale: [1.0; 3],
        roughness_set: None,
    };
    if let Some(s) = args.take("albedo-scale") {
        let parts: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("bad albedo scale `{s}`")))?;
        edit.albedo_scale = match parts.len() {
            1 => [parts[0]; 3],
            3 => [parts[0], parts[1], parts[2]],
            _ => return Err(CliError::Usage("albedo-scale wants 1 or 3 values".into())),
        };
    }
    if let Some(s) = args.take("roughness-set") {
        edit.roughness_set = Some(
            s.parse()
                .map_err(|_| CliError::Usage(format!("bad roughness `{s}`")))?,
        );
    }
    let split = args.take("split").unwrap_or_else(|| "test".into());
    let dirs = args
        .take("dirs")
        .map(|d| d.parse::<usize>())
        .transpose()
        .map_err(|_| CliError::Usage("bad dir count".into()))?;
    let views_spec = args.take("views");
    args.finish().map_err(CliError::Usage)?;

    let dataset = load_dataset(&data, &split, [1.0; 3])?;
    let views = parse_views(views_spec, dataset.frames.len())?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(e.to_string()))?;
    let mut cfg = render_cfg_from(&state, dirs, state.config.seed);
    cfg.edit = Some(edit);
    render_views(
        &state,
        &dataset,
        &views,
        RenderMode::Pb,
        &cfg,
        &out,
        "edited",
    )?;
    Ok(EXIT_OK)
}

/// One row of the evaluation table.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rf_psnr: f64,
    pub rf_ssim: f64,
    pub pb_psnr: f64,
    pub pb_ssim: f64,
    pub normal_mae_deg: Option<f64>,
    pub albedo_psnr: Option<f64>,
    pub albedo_scales: Option<[f64; 3]>,
    pub relight_psnr: Option<f64>,
    pub relight_ssim: Option<f64>,
    pub notices: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rf": {"psnr": self.rf_psnr, "ssim": self.rf_ssim},
            "pb": {"psnr": self.pb_psnr, "ssim": self.pb_ssim},
            "normal_mae_deg": self.normal_mae_deg,
            "albedo": {
                "psnr": self.albedo_psnr,
                "scales": self.albedo_scales.map(|s| s.to_vec()),
            },
            "relight": {"psnr": self.relight_psnr, "ssim": self.relight_ssim},
            "notices": self.notices,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "novel view (rf):  PSNR {:6.2} dB   SSIM {:.4}\n",
            self.rf_psnr, self.rf_ssim
        ));
        out.push_str(&format!(
            "novel view (pb):  PSNR {:6.2} dB   SSIM {:.4}\n",
            self.pb_psnr, self.pb_ssim
        ));
        match self.normal_mae_deg {
            Some(v) => out.push_str(&format!("normal MAE:       {v:6.2} deg\n")),
            None => out.push_str("normal MAE:       (no ground truth)\n"),
        }
        match self.albedo_psnr {
            Some(v) => {
                let s = self.albedo_scales.unwrap_or([1.0; 3]);
                out.push_str(&format!(
                    "albedo (aligned): PSNR {v:6.2} dB   scales [{:.3}, {:.3}, {:.3}]\n",
                    s[0], s[1], s[2]
                ));
            }
            None => out.push_str("albedo (aligned): (no ground truth)\n"),
        }
        match self.relight_psnr {
            Some(v) => out.push_str(&format!(
                "relighting:       PSNR {v:6.2} dB   SSIM {:.4}\n",
                self.relight_ssim.unwrap_or(f64::NAN)
            )),
            None => out.push_str("relighting:       (no ground truth)\n"),
        }
        for n in &self.notices {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

/// Renders the test split and scores it against the ground truth emitted
/// by `gen-scene`. Missing ground-truth channels are skipped with a
/// notice.
pub fn evaluate(
    state: &TrainState<f32>,
    data_root: &Path,
    gt_root: &Path,
    secondary_dirs: usize,
    light: usize,
) -> Result<EvalReport, CliError> {
    let dataset = load_dataset(data_root, "test", [1.0; 3])?;
    let mut cfg = render_cfg_from(state, Some(secondary_dirs), state.config.seed);
    cfg.light = light;
    let per_frame = dataset.pixels_per_frame();
    let (w, h) = (dataset.width(), dataset.height());
    let mut report = EvalReport::default();

    let mut rf_all = Vec::new();
    let mut pb_all = Vec::new();
    let mut gt_all = Vec::new();
    let mut normal_pred = Vec::new();
    let mut normal_gt = Vec::new();
    let mut normal_mask = Vec::new();
    let mut albedo_pred = Vec::new();
    let mut albedo_gt = Vec::new();
    let mut relight_pred = Vec::new();
    let mut relight_gt = Vec::new();

    let relight_env = {
        let hdr = gt_root.join("env_relight.hdr");
        if hdr.exists() {
            Some(load_envmap(&hdr)?)
        } else {
            report
                .notices
                .push("env_relight.hdr missing; relighting skipped".into());
            None
        }
    };

    for (v, frame) in dataset.frames.iter().enumerate() {
        let (rays, ids) = camera_rays(&frame.camera, v, per_frame, &state.scene.bbox);
        let rf = state
            .scene
            .render_rays(&rays, &ids, RenderMode::Rf, &cfg, state.mask.as_ref());
        let pb = state
            .scene
            .render_rays(&rays, &ids, RenderMode::Pb, &cfg, state.mask.as_ref());
        rf_all.extend(rf.iter().flat_map(|c| c.0));
        pb_all.extend(pb.iter().flat_map(|c| c.0));
        gt_all.extend_from_slice(&frame.image.rgb);

        // Ground-truth maps, where present.
        let npath = gt_root.join(format!("test/{}_normal.pfm", frame.name));
        if npath.exists() {
            let (nw, nh, c, ngt) = read_pfm(&npath)?;
            if (nw, nh, c) == (w, h, 3) {
                let pred = state.scene.render_rays(
                    &rays,
                    &ids,
                    RenderMode::Normal,
                    &cfg,
                    state.mask.as_ref(),
                );
                normal_pred.extend(pred.iter().flat_map(|c| c.0));
                normal_gt.extend_from_slice(&ngt);
                normal_mask.extend(frame.image.alpha.iter().map(|&a| a > 0.5));
            }
        }
        let apath = gt_root.join(format!("test/{}_albedo.pfm", frame.name));
        if apath.exists() {
            let (aw, ah, c, agt) = read_pfm(&apath)?;
            if (aw, ah, c) == (w, h, 3) {
                let pred = state.scene.render_rays(
                    &rays,
                    &ids,
                    RenderMode::Albedo,
                    &cfg,
                    state.mask.as_ref(),
                );
                albedo_pred.extend(pred.iter().flat_map(|c| c.0));
                albedo_gt.extend_from_slice(&agt);
            }
        }
        if let Some(env) = &relight_env {
            let rpath = gt_root.join(format!("test/{}_relight.png", frame.name));
            if rpath.exists() {
                let gt_img = crate::scene_io::read_png(&rpath)?.composited([1.0; 3]);
                let pred = state
                    .scene
                    .relight_rays(&rays, &ids, env, &cfg, state.mask.as_ref())
                    .map_err(|e| CliError::Numeric(e.to_string()))?;
                relight_pred.extend(pred.iter().flat_map(|c| c.0));
                relight_gt.extend_from_slice(&gt_img.rgb);
            }
        }
    }

    let clamp01 = |v: &mut Vec<f32>| {
        for x in v.iter_mut() {
            *x = x.clamp(0.0, 1.0);
        }
    };
    clamp01(&mut rf_all);
    clamp01(&mut pb_all);
    clamp01(&mut relight_pred);

    report.rf_psnr = psnr(&rf_all, &gt_all).map_err(|e| CliError::Data(e.to_string()))?;
    report.pb_psnr = psnr(&pb_all, &gt_all).map_err(|e| CliError::Data(e.to_string()))?;
    // SSIM over the per-view stack: treat as one tall image.
    let frames = dataset.frames.len();
    report.rf_ssim =
        ssim(&rf_all, &gt_all, w, h * frames).map_err(|e| CliError::Data(e.to_string()))?;
    report.pb_ssim =
        ssim(&pb_all, &gt_all, w, h * frames).map_err(|e| CliError::Data(e.to_string()))?;

    if !normal_pred.is_empty() && normal_mask.iter().any(|&m| m) {
        report.normal_mae_deg = Some(
            normal_mae(&normal_pred, &normal_gt, &normal_mask)
                .map_err(|e| CliError::Data(e.to_string()))?,
        );
    } else {
        report
            .notices
            .push("normal ground truth missing; MAE skipped".into());
    }
    if !albedo_pred.is_empty() && normal_mask.iter().any(|&m| m) {
        let al = align_albedo(&albedo_pred, &albedo_gt, &normal_mask)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let mut scaled = al.scaled.clone();
        let mut gt_masked = albedo_gt.clone();
        // Score only masked pixels.
        let mut pred_m = Vec::new();
        let mut gt_m = Vec::new();
        for (p, &m) in normal_mask.iter().enumerate() {
            if m {
                pred_m.extend_from_slice(&scaled[3 * p..3 * p + 3]);
                gt_m.extend_from_slice(&gt_masked[3 * p..3 * p + 3]);
            }
        }
        clamp01(&mut pred_m);
        report.albedo_psnr = Some(psnr(&pred_m, &gt_m).map_err(|e| CliError::Data(e.to_string()))?);
        report.albedo_scales = Some(al.scales);
        scaled.clear();
        gt_masked.clear();
    } else {
        report
            .notices
            .push("albedo ground truth missing; aligned PSNR skipped".into());
    }
    if !relight_pred.is_empty() {
        report.relight_psnr =
            Some(psnr(&relight_pred, &relight_gt).map_err(|e| CliError::Data(e.to_string()))?);
        report.relight_ssim = Some(
            ssim(
                &relight_pred,
                &relight_gt,
                w,
                h * (relight_gt.len() / (w * h * 3)),
            )
            .map_err(|e| CliError::Data(e.to_string()))?,
        );
    } else if relight_env.is_some() {
        report
            .notices
            .push("relight ground-truth images missing; relighting skipped".into());
    }
    Ok(report)
}

fn cmd_eval(mut args: Args) -> Result<i32, CliError> {
    if args.has("help") {
        println!(
            "irvox eval --ckpt FILE --data DIR --out DIR [--gt DIR] [--dirs N]\n\
             \x20 [--light L] [--threads N]"
        );
        return Ok(EXIT_OK);
    }
    init_threads(&mut args)?;
    let state = load_state(&mut args)?;
    let data = PathBuf::from(required(&mut args, "data")?);
    let out = PathBuf::from(required(&mut args, "out")?);
    let gt = args
        .take("gt")
        .map(PathBuf::from)
        .unwrap_or_else(|| data.clone());
    let dirs: usize = args
        .take("dirs")
        .map(|d| d.parse())
        .transpose()
        .map_err(|_| CliError::Usage("bad dir count".into()))?
        .unwrap_or(256);
    let light: usize = args
        .take("light")
        .map(|l| l.parse())
        .transpose()
        .map_err(|_| CliError::Usage("bad light index".into()))?
        .unwrap_or(0);
    args.finish().map_err(CliError::Usage)?;

    let report = evaluate(&state, &data, &gt, dirs, light)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report.to_json()).unwrap(),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    let text = report.to_text();
    std::fs::write(out.join("metrics.txt"), &text).map_err(|e| CliError::Data(e.to_string()))?;
    print!("{text}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(mut args: Args) -> Result<i32, CliError> {
    if args.has("help") {
        println!("irvox gradcheck [--seed N] [--stride N] [--threads N]");
        return Ok(EXIT_OK);
    }
    init_threads(&mut args)?;
    let seed: u64 = args
        .take("seed")
        .map(|s| s.parse())
        .transpose()
        .map_err(|_| CliError::Usage("bad seed".into()))?
        .unwrap_or(5);
    let stride: usize = args
        .take("stride")
        .map(|s| s.parse())
        .transpose()
        .map_err(|_| CliError::Usage("bad stride".into()))?
        .unwrap_or(1);
    args.finish().map_err(CliError::Usage)?;

    let report = crate::trainer::toy_gradcheck(seed, stride);
    print!("{report}");
    println!("max relative error: {:.3e}", report.max_rel_err());
    if report.passes(1e-4) {
        println!("PASS (tolerance 1e-4)");
        Ok(EXIT_OK)
    } else {
        Err(CliError::Numeric(
            "gradient check exceeded 1e-4 relative error".into(),
        ))
    }
}
