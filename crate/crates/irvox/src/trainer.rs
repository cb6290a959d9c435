//! Joint single-stage reconstruction: the differentiable forward pass for
//! one ray batch, the Adam step, the coarse-to-fine schedule with
//! alpha-mask builds and refreshes, multi-light batching, and resumable
//! checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{ops, Adam, Grads, LrGroup, Tape, ValueId};
use crate::decoders::{encoded_len, freq_encode_batch, freq_encode_op, mlp_op, ROUGHNESS_MIN};
use crate::losses::{
    loss_brdf_smooth, loss_mse, loss_normal, loss_orientation, total_loss, LossReport, LossWeights,
};
use crate::math::{Aabb, Real, RngKey, StreamTag, Vec3};
use crate::scene::{LightMode, SceneConfig, SceneModel, SecondaryCfg};
use crate::scene_io::{save_checkpoint, Dataset, IoError, NamedTensor};
use crate::shading::{sg_radiance_op, stratified_sphere_dirs};
use crate::tensor_field::{
    grid_density_op, grid_feature_op, param_l1_op, param_tv_op, upsample, LightSel, PosInput,
    DENSITY_SHIFT,
};
use crate::volume_render::{build_alpha_mask, composite_weights_op, sample_points, AlphaMask, Ray};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
}

/// Everything that defines a training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// Radiance-only warm-up; the alpha mask is built when it ends.
    pub warmup_iters: usize,
    pub upsample_steps: Vec<usize>,
    pub start_resolution: usize,
    pub final_resolution: usize,
    pub mask_refresh_every: usize,
    pub checkpoint_every: usize,
    pub batch_rays: usize,
    /// Smaller batch used before the alpha mask exists.
    pub batch_rays_warmup: usize,
    pub density_components: usize,
    pub appearance_components: usize,
    pub feature_dim: usize,
    pub sg_lobes: usize,
    pub hidden_channels: usize,
    pub lights: LightMode,
    /// March step as a fraction of the voxel diagonal.
    pub step_ratio: f64,
    pub secondary_dirs: usize,
    pub secondary_samples: usize,
    pub secondary_eps_voxels: f64,
    pub lr_grid: f64,
    pub lr_net: f64,
    /// Final learning-rate fraction reached at the last iteration.
    pub lr_decay_target: f64,
    pub weights: LossWeights,
    pub surface_threshold: f64,
    /// Skip radiance decoding below this per-sample alpha (0 disables).
    pub alpha_cutoff: f64,
    /// Regularizer terms only run on samples whose rendering weight
    /// clears this (0 disables).
    pub reg_sample_cutoff: f64,
    pub early_stop: f64,
    pub mask_threshold: f64,
    pub use_visibility: bool,
    pub use_indirect: bool,
    /// Decode budget per secondary ray (0 = unlimited).
    pub secondary_decode_budget: usize,
    /// Fraction of the post-warm-up schedule to wait before adding
    /// indirect radiance (its signal is meaningless until geometry has
    /// roughly formed, and half-converged fields are expensive to march).
    pub indirect_delay_frac: f64,
    pub seed: u64,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        TrainConfig {
            total_iters: 80_000,
            warmup_iters: 10_000,
            upsample_steps: vec![10_000, 20_000, 30_000, 40_000],
            start_resolution: 128,
            final_resolution: 300,
            mask_refresh_every: 10_000,
            checkpoint_every: 10_000,
            batch_rays: 4096,
            batch_rays_warmup: 1024,
            density_components: 16,
            appearance_components: 48,
            feature_dim: 27,
            sg_lobes: 128,
            hidden_channels: 128,
            lights: LightMode::Single,
            step_ratio: 0.5,
            secondary_dirs: 512,
            secondary_samples: 96,
            secondary_eps_voxels: 2.0,
            lr_grid: 0.02,
            lr_net: 0.001,
            lr_decay_target: 0.1,
            weights: LossWeights::default(),
            surface_threshold: 0.1,
            alpha_cutoff: 1e-5,
            reg_sample_cutoff: 1e-3,
            early_stop: 1e-4,
            mask_threshold: 1e-4,
            use_visibility: true,
            use_indirect: true,
            secondary_decode_budget: 8,
            indirect_delay_frac: 0.25,
            seed: 0,
            background: [1.0, 1.0, 1.0],
        }
    }

    /// Desk-scale preset: same pipeline at a budget a workstation clears
    /// in a couple of hours.
    pub fn desk() -> Self {
        TrainConfig {
            total_iters: 8_000,
            warmup_iters: 1_000,
            upsample_steps: vec![1_000, 2_000, 3_000, 4_000],
            start_resolution: 48,
            final_resolution: 96,
            mask_refresh_every: 1_000,
            checkpoint_every: 2_000,
            batch_rays: 2048,
            batch_rays_warmup: 1024,
            secondary_dirs: 128,
            step_ratio: 1.0,
            ..Self::paper()
        }
    }

    /// Tiny settings for unit tests.
    pub fn toy() -> Self {
        TrainConfig {
            total_iters: 60,
            warmup_iters: 20,
            upsample_steps: vec![30],
            start_resolution: 8,
            final_resolution: 12,
            mask_refresh_every: 25,
            checkpoint_every: 1_000_000,
            batch_rays: 64,
            batch_rays_warmup: 32,
            density_components: 2,
            appearance_components: 3,
            feature_dim: 4,
            sg_lobes: 8,
            hidden_channels: 8,
            secondary_dirs: 8,
            secondary_samples: 16,
            step_ratio: 2.0,
            ..Self::paper()
        }
    }

    pub fn scene_config(&self, resolution: [usize; 3]) -> SceneConfig {
        SceneConfig {
            resolution,
            density_components: self.density_components,
            appearance_components: self.appearance_components,
            feature_dim: self.feature_dim,
            sg_lobes: self.sg_lobes,
            hidden_channels: self.hidden_channels,
            light_mode: self.lights.clone(),
        }
    }

    /// Primary samples per ray at a grid resolution: the box diagonal in
    /// voxel diagonals over the step ratio.
    pub fn samples_per_ray(&self, resolution: [usize; 3]) -> usize {
        let max_res = resolution.iter().copied().max().unwrap_or(2) as f64;
        ((3.0f64.sqrt() * max_res / self.step_ratio).ceil() as usize).max(8)
    }

    pub fn secondary_cfg<T: Real>(&self) -> SecondaryCfg<T> {
        SecondaryCfg {
            n_samples: self.secondary_samples,
            eps_voxels: self.secondary_eps_voxels,
            alpha_cutoff: T::c(self.alpha_cutoff),
            early_stop: T::c(self.early_stop),
            decode_budget: self.secondary_decode_budget,
            use_visibility: self.use_visibility,
            use_indirect: self.use_indirect,
        }
    }

    /// First iteration at which indirect radiance joins the incident
    /// light.
    pub fn indirect_start_iter(&self) -> usize {
        self.warmup_iters
            + ((self.total_iters - self.warmup_iters) as f64 * self.indirect_delay_frac) as usize
    }

    /// Learning rate factor at an iteration (exponential decay to
    /// `lr_decay_target` over the run).
    pub fn lr_factor(&self, iter: usize) -> f64 {
        let t = iter as f64 / self.total_iters.max(1) as f64;
        self.lr_decay_target.powf(t)
    }

    /// Serializes every field as flat `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("total_iters", self.total_iters.to_string());
        kv.insert("warmup_iters", self.warmup_iters.to_string());
        kv.insert(
            "upsample_steps",
            self.upsample_steps
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.insert("start_resolution", self.start_resolution.to_string());
        kv.insert("final_resolution", self.final_resolution.to_string());
        kv.insert("mask_refresh_every", self.mask_refresh_every.to_string());
        kv.insert("checkpoint_every", self.checkpoint_every.to_string());
        kv.insert("batch_rays", self.batch_rays.to_string());
        kv.insert("batch_rays_warmup", self.batch_rays_warmup.to_string());
        kv.insert("density_components", self.density_components.to_string());
        kv.insert(
            "appearance_components",
            self.appearance_components.to_string(),
        );
        kv.insert("feature_dim", self.feature_dim.to_string());
        kv.insert("sg_lobes", self.sg_lobes.to_string());
        kv.insert("hidden_channels", self.hidden_channels.to_string());
        kv.insert("lights", lights_to_string(&self.lights));
        kv.insert("step_ratio", self.step_ratio.to_string());
        kv.insert("secondary_dirs", self.secondary_dirs.to_string());
        kv.insert("secondary_samples", self.secondary_samples.to_string());
        kv.insert(
            "secondary_eps_voxels",
            self.secondary_eps_voxels.to_string(),
        );
        kv.insert("lr_grid", self.lr_grid.to_string());
        kv.insert("lr_net", self.lr_net.to_string());
        kv.insert("lr_decay_target", self.lr_decay_target.to_string());
        kv.insert("w_rf", self.weights.rf.to_string());
        kv.insert("w_pb", self.weights.pb.to_string());
        kv.insert("w_brdf_smooth", self.weights.brdf_smooth.to_string());
        kv.insert("w_normal", self.weights.normal.to_string());
        kv.insert("w_orientation", self.weights.orientation.to_string());
        kv.insert("w_grid_l1", self.weights.grid_l1.to_string());
        kv.insert("w_tv", self.weights.tv.to_string());
        kv.insert("surface_threshold", self.surface_threshold.to_string());
        kv.insert("alpha_cutoff", self.alpha_cutoff.to_string());
        kv.insert("reg_sample_cutoff", self.reg_sample_cutoff.to_string());
        kv.insert("early_stop", self.early_stop.to_string());
        kv.insert("mask_threshold", self.mask_threshold.to_string());
        kv.insert("use_visibility", self.use_visibility.to_string());
        kv.insert("use_indirect", self.use_indirect.to_string());
        kv.insert(
            "secondary_decode_budget",
            self.secondary_decode_budget.to_string(),
        );
        kv.insert("indirect_delay_frac", self.indirect_delay_frac.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert(
            "background",
            format!(
                "{},{},{}",
                self.background[0], self.background[1], self.background[2]
            ),
        );
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Applies `key = value` lines on top of the current config.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), TrainError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: `{raw}`", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn p<F: std::str::FromStr>(key: &str, v: &str) -> Result<F, TrainError> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("bad value for {key}: `{v}`")))
        }
        match key {
            "total_iters" => self.total_iters = p(key, value)?,
            "warmup_iters" => self.warmup_iters = p(key, value)?,
            "upsample_steps" => {
                self.upsample_steps = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| p("upsample_steps", s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "start_resolution" => self.start_resolution = p(key, value)?,
            "final_resolution" => self.final_resolution = p(key, value)?,
            "mask_refresh_every" => self.mask_refresh_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "batch_rays" => self.batch_rays = p(key, value)?,
            "batch_rays_warmup" => self.batch_rays_warmup = p(key, value)?,
            "density_components" => self.density_components = p(key, value)?,
            "appearance_components" => self.appearance_components = p(key, value)?,
            "feature_dim" => self.feature_dim = p(key, value)?,
            "sg_lobes" => self.sg_lobes = p(key, value)?,
            "hidden_channels" => self.hidden_channels = p(key, value)?,
            "lights" => self.lights = parse_lights(value)?,
            "step_ratio" => self.step_ratio = p(key, value)?,
            "secondary_dirs" => self.secondary_dirs = p(key, value)?,
            "secondary_samples" => self.secondary_samples = p(key, value)?,
            "secondary_eps_voxels" => self.secondary_eps_voxels = p(key, value)?,
            "lr_grid" => self.lr_grid = p(key, value)?,
            "lr_net" => self.lr_net = p(key, value)?,
            "lr_decay_target" => self.lr_decay_target = p(key, value)?,
            "w_rf" => self.weights.rf = p(key, value)?,
            "w_pb" => self.weights.pb = p(key, value)?,
            "w_brdf_smooth" => self.weights.brdf_smooth = p(key, value)?,
            "w_normal" => self.weights.normal = p(key, value)?,
            "w_orientation" => self.weights.orientation = p(key, value)?,
            "w_grid_l1" => self.weights.grid_l1 = p(key, value)?,
            "w_tv" => self.weights.tv = p(key, value)?,
            "surface_threshold" => self.surface_threshold = p(key, value)?,
            "alpha_cutoff" => self.alpha_cutoff = p(key, value)?,
            "reg_sample_cutoff" => self.reg_sample_cutoff = p(key, value)?,
            "early_stop" => self.early_stop = p(key, value)?,
            "mask_threshold" => self.mask_threshold = p(key, value)?,
            "use_visibility" => self.use_visibility = p(key, value)?,
            "use_indirect" => self.use_indirect = p(key, value)?,
            "secondary_decode_budget" => self.secondary_decode_budget = p(key, value)?,
            "indirect_delay_frac" => self.indirect_delay_frac = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "background" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|s| p("background", s.trim()))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 3 {
                    return Err(TrainError::Config("background wants r,g,b".into()));
                }
                self.background = [parts[0], parts[1], parts[2]];
            }
            other => return Err(TrainError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_iters >= self.total_iters {
            return Err(TrainError::Config(
                "warmup_iters must be below total_iters".into(),
            ));
        }
        let mut prev = 0;
        for &s in &self.upsample_steps {
            if s <= prev || s >= self.total_iters {
                return Err(TrainError::Config(
                    "upsample_steps must be sorted and below total_iters".into(),
                ));
            }
            prev = s;
        }
        if self.final_resolution < self.start_resolution {
            return Err(TrainError::Config("final resolution below start".into()));
        }
        Ok(())
    }
}

pub fn lights_to_string(mode: &LightMode) -> String {
    match mode {
        LightMode::Single => "single".into(),
        LightMode::Rotated(angles) => format!(
            "rotated:{}",
            angles
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ),
        LightMode::General(p) => format!("general:{p}"),
    }
}

pub fn parse_lights(s: &str) -> Result<LightMode, TrainError> {
    if s == "single" {
        return Ok(LightMode::Single);
    }
    if let Some(rest) = s.strip_prefix("rotated:") {
        let angles: Vec<f64> = rest
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| TrainError::Config(format!("bad angle `{v}`")))
            })
            .collect::<Result<_, _>>()?;
        if angles.is_empty() {
            return Err(TrainError::Config("rotated mode needs angles".into()));
        }
        return Ok(LightMode::Rotated(angles));
    }
    if let Some(rest) = s.strip_prefix("general:") {
        let p: usize = rest
            .parse()
            .map_err(|_| TrainError::Config(format!("bad light count `{rest}`")))?;
        if p == 0 {
            return Err(TrainError::Config("general mode needs P >= 1".into()));
        }
        return Ok(LightMode::General(p));
    }
    Err(TrainError::Config(format!("unknown light mode `{s}`")))
}

/// Voxel-count schedule between two cubic resolutions, interpolated
/// linearly in log space; the last entry is exactly the final resolution.
pub fn resolution_schedule(start: usize, end: usize, steps: usize) -> Vec<usize> {
    if steps == 0 {
        return Vec::new();
    }
    let ln0 = (start as f64).powi(3).ln();
    let ln1 = (end as f64).powi(3).ln();
    let mut out: Vec<usize> = (0..steps)
        .map(|i| {
            let f = (i + 1) as f64 / steps as f64;
            let count = (ln0 + (ln1 - ln0) * f).exp();
            count.cbrt().round() as usize
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = end;
    }
    out
}

/// Cached second-bounce results keyed by `(pixel id, stratified dir
/// index)`, letting a finite-difference harness replay the exact
/// detached values the recorded pass saw.
#[derive(Default)]
pub struct SecondaryCache<T> {
    map: std::collections::HashMap<(u64, u32), (T, [T; 3])>,
}

/// How the physically-based path obtains visibility and indirect light.
pub enum SecondaryMode<'a, T> {
    /// March secondary rays online (training).
    Live,
    /// March online and record every result.
    Capture(&'a mut SecondaryCache<T>),
    /// Reuse recorded results; unseen directions fall back to
    /// unoccluded/black (their cosine-weighted contribution is
    /// negligible at the capture point).
    Replay(&'a SecondaryCache<T>),
}

/// One sampled training batch.
pub struct RayBatch<T> {
    pub origins: Vec<Vec3<T>>,
    pub dirs: Vec<Vec3<T>>,
    /// Target colors (composited onto the training background), `3N`.
    pub gt: Vec<T>,
    pub lights: Vec<u16>,
    /// Global pixel ids keying the per-ray random streams.
    pub pixel_ids: Vec<u64>,
}

/// Uniformly samples rays over all frames and pixels (and thereby over
/// lighting conditions).
pub fn sample_batch<T: Real>(
    dataset: &Dataset,
    seed: u64,
    iter: usize,
    count: usize,
) -> RayBatch<T> {
    let per_frame = dataset.pixels_per_frame();
    let total = dataset.frames.len() * per_frame;
    let mut rng = RngKey(seed).stream(StreamTag::RaySelect, 0, iter as u64);
    let mut batch = RayBatch {
        origins: Vec::with_capacity(count),
        dirs: Vec::with_capacity(count),
        gt: Vec::with_capacity(count * 3),
        lights: Vec::with_capacity(count),
        pixel_ids: Vec::with_capacity(count),
    };
    let w = dataset.width();
    for _ in 0..count {
        let id = rng.next_index(total);
        let (fi, pi) = (id / per_frame, id % per_frame);
        let frame = &dataset.frames[fi];
        let (x, y) = (pi % w, pi / w);
        let (o, d) = frame.camera.ray::<T>(x as f64 + 0.5, y as f64 + 0.5);
        batch.origins.push(o);
        batch.dirs.push(d);
        let px = frame.image.pixel(x, y);
        batch
            .gt
            .extend_from_slice(&[T::c(px[0] as f64), T::c(px[1] as f64), T::c(px[2] as f64)]);
        batch.lights.push(frame.light as u16);
        batch.pixel_ids.push(id as u64);
    }
    batch
}

/// The recorded loss graph of one batch plus its report.
pub struct ForwardResult<T> {
    pub tape: Tape<T>,
    pub loss: ValueId,
    pub report: LossReport,
    pub surface_pixels: usize,
}

/// Builds the full training loss for one batch on a fresh tape.
///
/// During warm-up only the radiance-field loss and the grid regularizers
/// are active; afterwards the physically-based path, normal/orientation
/// regularizers, and BRDF smoothness join in. Visibility and indirect
/// radiance along secondary rays are evaluated outside the tape, so no
/// gradient flows through them.
pub fn forward_loss<T: Real>(
    scene: &SceneModel<T>,
    mask: Option<&AlphaMask>,
    batch: &RayBatch<T>,
    cfg: &TrainConfig,
    iter: usize,
) -> ForwardResult<T> {
    forward_loss_with(scene, mask, batch, cfg, iter, SecondaryMode::Live)
}

/// [`forward_loss`] with explicit control over the detached second
/// bounce (used by the gradient-check harness).
pub fn forward_loss_with<T: Real>(
    scene: &SceneModel<T>,
    mask: Option<&AlphaMask>,
    batch: &RayBatch<T>,
    cfg: &TrainConfig,
    iter: usize,
    mut secondary: SecondaryMode<'_, T>,
) -> ForwardResult<T> {
    let timing = std::env::var_os("IRVOX_TIMING").is_some();
    let mut t_last = std::time::Instant::now();
    let mut mark = move |tag: &str| {
        if timing {
            eprintln!("  [{tag}] {:?}", t_last.elapsed());
            t_last = std::time::Instant::now();
        }
    };
    let warmup = iter < cfg.warmup_iters;
    let n_rays = batch.origins.len();
    let n_per_ray = cfg.samples_per_ray(scene.density.resolution);
    let key = RngKey(cfg.seed);

    // --- Sample the primary rays (parallel, fixed layout) ---------------
    struct RaySamples<T> {
        pos: Vec<Vec3<T>>,
        delta: T,
    }
    let per_ray: Vec<Option<RaySamples<T>>> = (0..n_rays)
        .into_par_iter()
        .map(|r| {
            let ray = Ray::clipped(batch.origins[r], batch.dirs[r], &scene.bbox, T::zero())?;
            let mut jitter = key.stream(StreamTag::Stratify, batch.pixel_ids[r], iter as u64);
            let (ts, deltas) = sample_points(&ray, n_per_ray, Some(&mut jitter));
            let delta = deltas[0];
            let mut pos = Vec::with_capacity(ts.len());
            for &t in &ts {
                let p = ray.at(t);
                if let Some(m) = mask {
                    if !m.occupied(p) {
                        continue;
                    }
                }
                pos.push(p);
            }
            Some(RaySamples { pos, delta })
        })
        .collect();

    let mut positions: Vec<Vec3<T>> = Vec::new();
    let mut deltas: Vec<T> = Vec::new();
    let mut ranges: Vec<std::ops::Range<u32>> = Vec::with_capacity(n_rays);
    for rs in &per_ray {
        let start = positions.len() as u32;
        if let Some(rs) = rs {
            positions.extend_from_slice(&rs.pos);
            deltas.extend(std::iter::repeat_n(rs.delta, rs.pos.len()));
        }
        ranges.push(start..positions.len() as u32);
    }
    mark("sample");
    let mut tape = Tape::new();
    let pos_arc = std::sync::Arc::new(positions);

    // --- Density and compositing weights -------------------------------
    let sigma_raw = grid_density_op(
        &mut tape,
        &scene.params,
        &scene.density,
        PosInput::Fixed(pos_arc.clone()),
    );
    let sigma = ops::softplus_shift(&mut tape, sigma_raw, T::c(DENSITY_SHIFT));
    let (w_all, acc, t_end) =
        composite_weights_op(&mut tape, sigma, deltas.clone(), ranges.clone());
    let _ = t_end;
    mark("density+composite");

    // --- Radiance color on the samples that matter ----------------------
    // The cutoff only applies once the alpha mask exists: before density
    // has formed it would skip every sample and starve the density of its
    // bootstrap gradient (the radiance mismatch against the background is
    // the only signal that grows the field).
    let sigma_vals = tape.val(sigma).to_vec();
    let cutoff = if mask.is_some() {
        T::c(cfg.alpha_cutoff)
    } else {
        T::zero()
    };
    let mut csub: Vec<u32> = Vec::new();
    let mut c_ranges: Vec<std::ops::Range<u32>> = Vec::with_capacity(n_rays);
    let mut c_dirs: Vec<T> = Vec::new();
    let mut c_lights: Vec<u16> = Vec::new();
    for (r, range) in ranges.iter().enumerate() {
        let start = csub.len() as u32;
        for j in range.start..range.end {
            let alpha = T::one() - (-sigma_vals[j as usize] * deltas[j as usize]).exp();
            if alpha >= cutoff {
                csub.push(j);
                c_dirs.extend_from_slice(&batch.dirs[r].0);
                c_lights.push(batch.lights[r]);
            }
        }
        c_ranges.push(start..csub.len() as u32);
    }
    let n_csub = csub.len();
    let csub_pos: Vec<Vec3<T>> = csub.iter().map(|&j| pos_arc[j as usize]).collect();

    let w_c = ops::gather_rows(&mut tape, w_all, 1, csub.clone());
    let feats_c = grid_feature_op(
        &mut tape,
        &scene.params,
        &scene.appearance,
        PosInput::Fixed(std::sync::Arc::new(csub_pos)),
        if scene.light_count() > 1 {
            LightSel::PerSample(std::sync::Arc::new(c_lights))
        } else {
            LightSel::Mean
        },
    );
    let enc_dirs = freq_encode_batch(&c_dirs, 3, scene.decoders.bands);
    let rad_in = ops::concat_rows(
        &mut tape,
        n_csub,
        vec![
            ops::ConcatPart::Val(feats_c, cfg.feature_dim),
            ops::ConcatPart::Const(enc_dirs, encoded_len(3, scene.decoders.bands)),
        ],
    );
    let c_rgb = mlp_op(
        &mut tape,
        &scene.params,
        &scene.decoders.radiance,
        rad_in,
        n_csub,
    );
    let crf_fg = ops::seg_dot_rows(&mut tape, w_c, c_rgb, 3, c_ranges.clone());
    let wsum_c = ops::seg_sum(&mut tape, w_c, c_ranges);
    // Samples skipped by the cutoff contribute the background color, so
    // C = sum w c + (1 - sum_kept w) * bg.
    let neg = ops::scale(&mut tape, wsum_c, -T::one());
    let one_minus = ops::add_k(&mut tape, neg, T::one());
    let bg = Vec3::new(
        T::c(cfg.background[0]),
        T::c(cfg.background[1]),
        T::c(cfg.background[2]),
    );
    let bg_rows = ops::outer_bcast_const(&mut tape, one_minus, bg.0.to_vec());
    let c_rf = ops::add(&mut tape, crf_fg, bg_rows);
    let l_rf = loss_mse(&mut tape, c_rf, batch.gt.clone());
    mark("radiance");

    // --- Grid regularizers ----------------------------------------------
    // The factor-norm weights follow the reference semantics of a mean
    // over entries; the ops report plain sums, so the weights are
    // normalized by the entry counts here.
    let mut l1_ids = scene.density.factor_ids();
    l1_ids.extend(scene.appearance.factor_ids());
    let l1_entries: usize = l1_ids.iter().map(|&id| scene.params.data(id).len()).sum();
    let l_l1 = param_l1_op(&mut tape, &scene.params, l1_ids);
    let w_l1 = cfg.weights.grid_l1 / l1_entries.max(1) as f64;
    let mut report = LossReport {
        rf: tape.val(l_rf)[0].f64(),
        grid_l1: tape.val(l_l1)[0].f64(),
        ..LossReport::default()
    };

    let mut terms: Vec<(ValueId, f64)> = vec![(l_rf, cfg.weights.rf), (l_l1, w_l1)];

    if warmup {
        let mut tv_mats = scene.density.matrices.to_vec();
        tv_mats.extend_from_slice(&scene.appearance.matrices);
        let tv_entries: usize = tv_mats.iter().map(|&id| scene.params.data(id).len()).sum();
        let l_tv = param_tv_op(&mut tape, &scene.params, tv_mats);
        report.tv = tape.val(l_tv)[0].f64();
        terms.push((l_tv, cfg.weights.tv / tv_entries.max(1) as f64));
        let loss = total_loss(&mut tape, terms);
        report.total = tape.val(loss)[0].f64();
        return ForwardResult {
            tape,
            loss,
            report,
            surface_pixels: 0,
        };
    }

    // --- Per-sample regularizers over near-surface samples --------------
    let w_vals = tape.val(w_all).to_vec();
    let reg_cutoff = T::c(cfg.reg_sample_cutoff);
    let mut reg_idx: Vec<u32> = Vec::new();
    let mut reg_dirs: Vec<Vec3<T>> = Vec::new();
    for (r, range) in ranges.iter().enumerate() {
        for j in range.start..range.end {
            if w_vals[j as usize] > reg_cutoff {
                reg_idx.push(j);
                reg_dirs.push(batch.dirs[r]);
            }
        }
    }
    let n_reg = reg_idx.len();
    let inv_rays = 1.0 / n_rays.max(1) as f64;
    let enc_dim = encoded_len(3, scene.decoders.bands);
    if n_reg > 0 {
        let reg_pos: Vec<Vec3<T>> = reg_idx.iter().map(|&j| pos_arc[j as usize]).collect();
        let w_r = ops::gather_rows(&mut tape, w_all, 1, reg_idx.clone());
        let feats_r = grid_feature_op(
            &mut tape,
            &scene.params,
            &scene.appearance,
            PosInput::Fixed(std::sync::Arc::new(reg_pos.clone())),
            LightSel::Mean,
        );
        let pos_flat: Vec<T> = reg_pos.iter().flat_map(|p| p.0).collect();
        let enc_pos = freq_encode_batch(&pos_flat, 3, scene.decoders.bands);
        let nb_in = ops::concat_rows(
            &mut tape,
            n_reg,
            vec![
                ops::ConcatPart::Val(feats_r, cfg.feature_dim),
                ops::ConcatPart::Const(enc_pos.clone(), enc_dim),
            ],
        );
        let n_raw = mlp_op(
            &mut tape,
            &scene.params,
            &scene.decoders.normal,
            nb_in,
            n_reg,
        );
        let n_unit = ops::normalize_rows3(&mut tape, n_raw);

        // Density-derived normals via central differences (one voxel).
        let h = scene.voxel_width();
        let mut grad_axes = Vec::with_capacity(3);
        for axis in 0..3 {
            let mut hi = Vec::with_capacity(n_reg);
            let mut lo = Vec::with_capacity(n_reg);
            for p in &reg_pos {
                let mut a = *p;
                let mut b = *p;
                a.0[axis] += h;
                b.0[axis] -= h;
                hi.push(a);
                lo.push(b);
            }
            let s_hi = grid_density_op(
                &mut tape,
                &scene.params,
                &scene.density,
                PosInput::Fixed(std::sync::Arc::new(hi)),
            );
            let s_lo = grid_density_op(
                &mut tape,
                &scene.params,
                &scene.density,
                PosInput::Fixed(std::sync::Arc::new(lo)),
            );
            let a_hi = ops::softplus_shift(&mut tape, s_hi, T::c(DENSITY_SHIFT));
            let a_lo = ops::softplus_shift(&mut tape, s_lo, T::c(DENSITY_SHIFT));
            let diff = ops::sub(&mut tape, a_hi, a_lo);
            grad_axes.push(ops::scale(&mut tape, diff, T::one() / (h + h)));
        }
        let grad_rows = ops::concat_rows(
            &mut tape,
            n_reg,
            vec![
                ops::ConcatPart::Val(grad_axes[0], 1),
                ops::ConcatPart::Val(grad_axes[1], 1),
                ops::ConcatPart::Val(grad_axes[2], 1),
            ],
        );
        let neg_grad = ops::scale(&mut tape, grad_rows, -T::one());
        let n_sigma = ops::normalize_rows3(&mut tape, neg_grad);
        let l_n = loss_normal(&mut tape, n_unit, n_sigma, w_r);
        let l_n = ops::scale(&mut tape, l_n, T::c(inv_rays));

        let l_d = loss_orientation(&mut tape, n_unit, reg_dirs, w_r);
        let l_d = ops::scale(&mut tape, l_d, T::c(inv_rays));

        // BRDF smoothness between each sample and a jittered neighbor.
        let brdf_scale = vec![T::one(), T::one(), T::one(), T::one() - T::c(ROUGHNESS_MIN)];
        let brdf_off = vec![T::zero(), T::zero(), T::zero(), T::c(ROUGHNESS_MIN)];
        let b_in = ops::concat_rows(
            &mut tape,
            n_reg,
            vec![
                ops::ConcatPart::Val(feats_r, cfg.feature_dim),
                ops::ConcatPart::Const(enc_pos, enc_dim),
            ],
        );
        let b_raw = mlp_op(&mut tape, &scene.params, &scene.decoders.brdf, b_in, n_reg);
        let beta = ops::affine_cols(&mut tape, b_raw, 4, brdf_scale.clone(), brdf_off.clone());
        let mut jrng = key.stream(StreamTag::SmoothOffset, 0, iter as u64);
        let jit_pos: Vec<Vec3<T>> = reg_pos
            .iter()
            .map(|p| {
                let mut q = *p;
                for c in q.0.iter_mut() {
                    *c += T::c(jrng.next_normal() * 0.1);
                }
                q
            })
            .collect();
        let jit_flat: Vec<T> = jit_pos.iter().flat_map(|p| p.0).collect();
        let enc_jit = freq_encode_batch(&jit_flat, 3, scene.decoders.bands);
        let feats_j = grid_feature_op(
            &mut tape,
            &scene.params,
            &scene.appearance,
            PosInput::Fixed(std::sync::Arc::new(jit_pos)),
            LightSel::Mean,
        );
        let bj_in = ops::concat_rows(
            &mut tape,
            n_reg,
            vec![
                ops::ConcatPart::Val(feats_j, cfg.feature_dim),
                ops::ConcatPart::Const(enc_jit, enc_dim),
            ],
        );
        let bj_raw = mlp_op(&mut tape, &scene.params, &scene.decoders.brdf, bj_in, n_reg);
        let beta_j = ops::affine_cols(&mut tape, bj_raw, 4, brdf_scale, brdf_off);
        let l_s = loss_brdf_smooth(&mut tape, beta, beta_j, 4, w_r);
        let l_s = ops::scale(&mut tape, l_s, T::c(inv_rays));

        mark("regularizers");
        report.normal = tape.val(l_n)[0].f64();
        report.orientation = tape.val(l_d)[0].f64();
        report.brdf_smooth = tape.val(l_s)[0].f64();
        terms.push((l_n, cfg.weights.normal));
        terms.push((l_d, cfg.weights.orientation));
        terms.push((l_s, cfg.weights.brdf_smooth));
    }

    // --- Physically-based path on surface pixels -------------------------
    let acc_vals = tape.val(acc).to_vec();
    let mut sidx_rays: Vec<usize> = (0..n_rays)
        .filter(|&r| acc_vals[r].f64() > cfg.surface_threshold)
        .collect();
    // Group by light so each group shares one SG radiance node.
    sidx_rays.sort_by_key(|&r| batch.lights[r]);
    let n_surf = sidx_rays.len();

    if n_surf > 0 {
        let eps = T::c(crate::tensor_field::EVAL_EPS);
        let w_hat = ops::seg_normalize(&mut tape, w_all, acc, ranges.clone(), eps);
        let pos_flat_all: Vec<T> = pos_arc.iter().flat_map(|p| p.0).collect();
        let xhat_all = ops::seg_weighted_const_rows(&mut tape, w_hat, pos_flat_all, 3, ranges);
        let sray_u32: Vec<u32> = sidx_rays.iter().map(|&r| r as u32).collect();
        let xhat_s = ops::gather_rows(&mut tape, xhat_all, 3, sray_u32.clone());
        let feats_s = grid_feature_op(
            &mut tape,
            &scene.params,
            &scene.appearance,
            PosInput::Tracked(xhat_s),
            LightSel::Mean,
        );
        let enc_xhat = freq_encode_op(&mut tape, xhat_s, 3, scene.decoders.bands);
        let s_in = ops::concat_rows(
            &mut tape,
            n_surf,
            vec![
                ops::ConcatPart::Val(feats_s, cfg.feature_dim),
                ops::ConcatPart::Val(enc_xhat, enc_dim),
            ],
        );
        let n_raw_s = mlp_op(
            &mut tape,
            &scene.params,
            &scene.decoders.normal,
            s_in,
            n_surf,
        );
        let n_s = ops::normalize_rows3(&mut tape, n_raw_s);
        let b_raw_s = mlp_op(&mut tape, &scene.params, &scene.decoders.brdf, s_in, n_surf);
        let beta_s = ops::affine_cols(
            &mut tape,
            b_raw_s,
            4,
            vec![T::one(), T::one(), T::one(), T::one() - T::c(ROUGHNESS_MIN)],
            vec![T::zero(), T::zero(), T::zero(), T::c(ROUGHNESS_MIN)],
        );
        let albedo_s = ops::slice_cols(&mut tape, beta_s, 4, 0, 3);
        let rough_s = ops::slice_cols(&mut tape, beta_s, 4, 3, 4);

        // Hemisphere-filtered stratified directions per surface pixel.
        let n_vals = tape.val(n_s).to_vec();
        let xhat_vals = tape.val(xhat_s).to_vec();
        struct PixDirs<T> {
            dirs: Vec<Vec3<T>>,
            weights: Vec<T>,
            orig: Vec<u32>,
        }
        let pix_dirs: Vec<PixDirs<T>> = (0..n_surf)
            .into_par_iter()
            .map(|s| {
                let r = sidx_rays[s];
                let normal = Vec3::new(n_vals[3 * s], n_vals[3 * s + 1], n_vals[3 * s + 2]);
                let mut rng = key.stream(StreamTag::SecondaryDir, batch.pixel_ids[r], iter as u64);
                let all = stratified_sphere_dirs::<T>(cfg.secondary_dirs, &mut rng);
                let mut dirs = Vec::new();
                let mut weights = Vec::new();
                let mut orig = Vec::new();
                for (i, d) in all.into_iter().enumerate() {
                    if d.dir.dot(normal) > T::zero() {
                        dirs.push(d.dir);
                        weights.push(d.weight);
                        orig.push(i as u32);
                    }
                }
                PixDirs {
                    dirs,
                    weights,
                    orig,
                }
            })
            .collect();

        let mut dir_ranges: Vec<std::ops::Range<u32>> = Vec::with_capacity(n_surf);
        let mut all_dirs: Vec<Vec3<T>> = Vec::new();
        let mut all_weights: Vec<T> = Vec::new();
        let mut pix_of_dir: Vec<u32> = Vec::new();
        let mut key_of_dir: Vec<(u64, u32)> = Vec::new();
        for (s, pd) in pix_dirs.iter().enumerate() {
            let start = all_dirs.len() as u32;
            all_dirs.extend_from_slice(&pd.dirs);
            all_weights.extend_from_slice(&pd.weights);
            pix_of_dir.extend(std::iter::repeat_n(s as u32, pd.dirs.len()));
            let pid = batch.pixel_ids[sidx_rays[s]];
            key_of_dir.extend(pd.orig.iter().map(|&o| (pid, o)));
            dir_ranges.push(start..all_dirs.len() as u32);
        }
        let n_dirs = all_dirs.len();

        if n_dirs > 0 {
            // Detached second bounce: transmittance and indirect radiance.
            let mut sec_cfg = cfg.secondary_cfg::<T>();
            sec_cfg.use_indirect = sec_cfg.use_indirect && iter >= cfg.indirect_start_iter();
            let sec: Vec<(T, Vec3<T>)> = match &secondary {
                SecondaryMode::Replay(cache) => (0..n_dirs)
                    .map(|d| {
                        cache
                            .map
                            .get(&key_of_dir[d])
                            .map(|&(t, rgb)| (t, Vec3(rgb)))
                            .unwrap_or((T::one(), Vec3::zero()))
                    })
                    .collect(),
                SecondaryMode::Live | SecondaryMode::Capture(_) => (0..n_dirs)
                    .into_par_iter()
                    .map(|d| {
                        let s = pix_of_dir[d] as usize;
                        let r = sidx_rays[s];
                        let x =
                            Vec3::new(xhat_vals[3 * s], xhat_vals[3 * s + 1], xhat_vals[3 * s + 2]);
                        if !sec_cfg.use_visibility && !sec_cfg.use_indirect {
                            return (T::one(), Vec3::zero());
                        }
                        scene.secondary(x, all_dirs[d], batch.lights[r] as usize, &sec_cfg, mask)
                    })
                    .collect(),
            };
            if let SecondaryMode::Capture(cache) = &mut secondary {
                for (d, &(t, ind)) in sec.iter().enumerate() {
                    cache.map.insert(key_of_dir[d], (t, ind.0));
                }
            }
            mark("secondary-march");

            // Direct light per dir, grouped by light condition.
            let mut group_parts: Vec<ValueId> = Vec::new();
            let mut d0 = 0usize;
            while d0 < n_dirs {
                let light = batch.lights[sidx_rays[pix_of_dir[d0] as usize]];
                let mut d1 = d0;
                while d1 < n_dirs && batch.lights[sidx_rays[pix_of_dir[d1] as usize]] == light {
                    d1 += 1;
                }
                let (env, azimuth) = scene.env_of(light as usize);
                let dirs_group: Vec<Vec3<T>> = all_dirs[d0..d1].to_vec();
                group_parts.push(sg_radiance_op(
                    &mut tape,
                    &scene.params,
                    env,
                    dirs_group,
                    azimuth,
                ));
                d0 = d1;
            }
            let l_direct = ops::append_rows(&mut tape, group_parts);

            // L_i = T * L_d + L_ind with the second bounce held constant.
            let li = if cfg.use_visibility {
                let mut t_rep = Vec::with_capacity(n_dirs * 3);
                for (t, _) in &sec {
                    t_rep.extend_from_slice(&[*t, *t, *t]);
                }
                ops::mul_const_slice(&mut tape, l_direct, t_rep)
            } else {
                l_direct
            };
            let li = if cfg.use_indirect {
                let mut ind_rows = Vec::with_capacity(n_dirs * 3);
                for (_, ind) in &sec {
                    ind_rows.extend_from_slice(&ind.0);
                }
                ops::add_const_slice(&mut tape, li, ind_rows)
            } else {
                li
            };

            // BRDF rows against fixed directions.
            let albedo_rep = ops::gather_rows(&mut tape, albedo_s, 3, pix_of_dir.clone());
            let rough_rep = ops::gather_rows(&mut tape, rough_s, 1, pix_of_dir.clone());
            let n_rep = ops::gather_rows(&mut tape, n_s, 3, pix_of_dir.clone());
            let wo_rows: Vec<Vec3<T>> = pix_of_dir
                .iter()
                .map(|&s| -batch.dirs[sidx_rays[s as usize]])
                .collect();
            let f_rows = crate::shading::brdf_op(
                &mut tape, albedo_rep, rough_rep, n_rep, &all_dirs, &wo_rows,
            );

            let dirs_flat: Vec<T> = all_dirs.iter().flat_map(|d| d.0).collect();
            let cos_raw = ops::dot_rows3_const(&mut tape, n_rep, dirs_flat);
            let cos = ops::relu(&mut tape, cos_raw);
            let li_f = ops::mul(&mut tape, li, f_rows);
            let contrib = ops::mul_bcast(&mut tape, li_f, cos, 3);
            let mut w_rep = Vec::with_capacity(n_dirs * 3);
            for &w in &all_weights {
                w_rep.extend_from_slice(&[w, w, w]);
            }
            let weighted = ops::mul_const_slice(&mut tape, contrib, w_rep);
            let c_pb = ops::seg_sum_rows(&mut tape, weighted, 3, dir_ranges);

            let gt_s: Vec<T> = sidx_rays
                .iter()
                .flat_map(|&r| batch.gt[3 * r..3 * r + 3].to_vec())
                .collect();
            let l_pb = loss_mse(&mut tape, c_pb, gt_s);
            report.pb = tape.val(l_pb)[0].f64();
            terms.push((l_pb, cfg.weights.pb));
        }
    }

    mark("pb-assemble");
    let loss = total_loss(&mut tape, terms);
    report.total = tape.val(loss)[0].f64();
    ForwardResult {
        tape,
        loss,
        report,
        surface_pixels: n_surf,
    }
}

/// Finite-difference check of the full composite loss over every
/// parameter group of a scene, holding the detached second bounce fixed
/// at its captured values. This is the double-precision harness behind
/// the `gradcheck` command.
pub fn gradcheck_full_loss(
    scene: &mut SceneModel<f64>,
    mask: Option<&AlphaMask>,
    batch: &RayBatch<f64>,
    cfg: &TrainConfig,
    iter: usize,
    stride: usize,
) -> crate::autodiff::GradcheckReport {
    use crate::autodiff::{fd_rel_err, fd_step, GradcheckEntry, GradcheckReport};
    let mut cache = SecondaryCache::default();
    let fwd = forward_loss_with(
        scene,
        mask,
        batch,
        cfg,
        iter,
        SecondaryMode::Capture(&mut cache),
    );
    let mut grads = Grads::zeros_like(&scene.params);
    fwd.tape
        .backward(fwd.loss, &scene.params, &mut grads)
        .expect("forward recorded");
    let stride = stride.max(1);
    let mut entries = Vec::new();
    for raw_id in 0..scene.params.len() {
        let id = crate::ParamId(raw_id as u32);
        let name = scene.params.entry(id).name.clone();
        let n = scene.params.data(id).len();
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        let mut checked = 0usize;
        let mut nonfinite = false;
        let mut k = 0usize;
        while k < n {
            let theta = scene.params.data(id)[k];
            let h = fd_step(theta);
            let eval = |scene: &SceneModel<f64>| {
                forward_loss_with(scene, mask, batch, cfg, iter, SecondaryMode::Replay(&cache))
                    .report
                    .total
            };
            scene.params.data_mut(id)[k] = theta + h;
            let up = eval(scene);
            scene.params.data_mut(id)[k] = theta - h;
            let dn = eval(scene);
            scene.params.data_mut(id)[k] = theta;
            let fd = (up - dn) / (2.0 * h);
            let ad = grads.buf(id)[k];
            if !fd.is_finite() || !ad.is_finite() {
                nonfinite = true;
            }
            let rel = fd_rel_err(ad, fd);
            if rel > max_rel {
                max_rel = rel;
                worst = k;
            }
            checked += 1;
            k += stride;
        }
        entries.push(GradcheckEntry {
            name,
            max_rel_err: max_rel,
            worst_index: worst,
            checked,
            nonfinite,
        });
    }
    GradcheckReport { entries }
}

/// A 4^3 scene with an opaque central blob plus a converging ray batch,
/// the fixture behind the double-precision gradient check.
pub fn toy_gradcheck_fixture(seed: u64) -> (SceneModel<f64>, RayBatch<f64>, TrainConfig) {
    let mut cfg = TrainConfig::toy();
    cfg.start_resolution = 4;
    cfg.final_resolution = 8;
    cfg.alpha_cutoff = 0.0;
    // Keep regularizer samples near the surface where the density
    // gradient stays well conditioned for finite differences.
    cfg.reg_sample_cutoff = 1e-3;
    cfg.early_stop = 0.0;
    cfg.step_ratio = 1.2;
    cfg.secondary_dirs = 8;
    cfg.secondary_samples = 12;
    cfg.seed = seed;
    let mut scene: SceneModel<f64> = SceneModel::new(
        &cfg.scene_config([4, 4, 4]),
        crate::math::Aabb::unit(),
        seed,
    );
    // Shape the density into an opaque blob at the box center.
    let grid = scene.density.clone();
    for m in 0..3 {
        let n = grid.resolution[m];
        let data = scene.params.data_mut(grid.vectors[m]);
        for i in 0..n {
            let x = i as f64 / (n - 1) as f64;
            data[i] = 4.5 * (-(x - 0.5) * (x - 0.5) / 0.08).exp();
        }
    }
    for m in 0..3 {
        let (a, b) = crate::tensor_field::orth_axes(m);
        let (na, nb) = (grid.resolution[a], grid.resolution[b]);
        let data = scene.params.data_mut(grid.matrices[m]);
        for ia in 0..na {
            for ib in 0..nb {
                let xa = ia as f64 / (na - 1) as f64;
                let xb = ib as f64 / (nb - 1) as f64;
                data[ia * nb + ib] =
                    4.5 * (-((xa - 0.5).powi(2) + (xb - 0.5).powi(2)) / 0.08).exp();
            }
        }
    }
    let mut batch = RayBatch {
        origins: Vec::new(),
        dirs: Vec::new(),
        gt: Vec::new(),
        lights: Vec::new(),
        pixel_ids: Vec::new(),
    };
    let views = [
        (Vec3::new(0.0, -2.5, 0.3), Vec3::new(0.0, 1.0, -0.12)),
        (Vec3::new(2.4, 0.4, 0.6), Vec3::new(-1.0, -0.17, -0.25)),
        (Vec3::new(-0.5, 0.6, 2.5), Vec3::new(0.2, -0.24, -1.0)),
    ];
    let mut id = 0u64;
    for (o, base) in views {
        for k in 0..4 {
            let jitter = Vec3::new(
                0.07 * ((k % 2) as f64 - 0.5),
                0.09 * ((k / 2) as f64 - 0.5),
                0.05 * (k as f64 - 1.5) / 3.0,
            );
            batch.origins.push(o);
            batch.dirs.push((base + jitter).normalized());
            let g = 0.2 + 0.05 * k as f64;
            batch.gt.extend_from_slice(&[g, g * 0.8, g * 1.1]);
            batch.lights.push(0);
            batch.pixel_ids.push(id);
            id += 1;
        }
    }
    // One ray that misses the box entirely (background path).
    batch.origins.push(Vec3::new(5.0, 5.0, 0.0));
    batch.dirs.push(Vec3::new(0.0, 0.0, 1.0));
    batch.gt.extend_from_slice(&[1.0; 3]);
    batch.lights.push(0);
    batch.pixel_ids.push(id);
    (scene, batch, cfg)
}

/// Full-loss finite-difference check on the toy fixture (the `gradcheck`
/// command).
pub fn toy_gradcheck(seed: u64, stride: usize) -> crate::autodiff::GradcheckReport {
    let (mut scene, batch, cfg) = toy_gradcheck_fixture(seed);
    let iter = cfg.warmup_iters;
    gradcheck_full_loss(&mut scene, None, &batch, &cfg, iter, stride)
}

/// A resumable training run.
pub struct TrainState<T> {
    pub scene: SceneModel<T>,
    pub adam: Adam<T>,
    pub mask: Option<AlphaMask>,
    pub iteration: usize,
    pub config: TrainConfig,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig, bbox: Aabb<T>) -> Self {
        let res = config.start_resolution;
        let scene = SceneModel::new(&config.scene_config([res, res, res]), bbox, config.seed);
        let adam = Adam::new(&scene.params);
        TrainState {
            scene,
            adam,
            mask: None,
            iteration: 0,
            config,
        }
    }

    fn learning_rates(&self) -> impl Fn(LrGroup) -> T + 'static {
        let factor = self.config.lr_factor(self.iteration);
        let grid = T::c(self.config.lr_grid * factor);
        let net = T::c(self.config.lr_net * factor);
        move |g| match g {
            LrGroup::Grid => grid,
            LrGroup::Network => net,
        }
    }

    /// Builds (or refreshes) the alpha mask at the current resolution.
    /// A mask that would blank the whole scene (density not yet formed)
    /// is discarded so sampling never starves.
    pub fn rebuild_mask(&mut self) {
        let res = self.scene.density.resolution;
        let step = self.scene.voxel_width() * T::c(self.config.step_ratio) * T::c(3f64.sqrt());
        let mask = build_alpha_mask(
            &self.scene.density_field(),
            res,
            step,
            self.config.mask_threshold,
        );
        if mask.fully_empty() {
            return;
        }
        self.mask = Some(mask);
    }

    /// Upsamples both grids to `res`, resetting grid optimizer moments.
    pub fn upsample_to(&mut self, res: usize) {
        let target = [res, res, res];
        upsample(&mut self.scene.params, &mut self.scene.density, target).expect("schedule grows");
        upsample(&mut self.scene.params, &mut self.scene.appearance, target)
            .expect("schedule grows");
        for id in self
            .scene
            .density
            .factor_ids()
            .into_iter()
            .chain(self.scene.appearance.factor_ids())
        {
            self.adam.reset_param(id, self.scene.params.data(id).len());
        }
    }

    /// One optimization step on a freshly sampled batch. Non-finite
    /// losses skip the parameter update and report the error.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossReport, TrainError> {
        let warmup = self.iteration < self.config.warmup_iters;
        let n = if warmup || self.mask.is_none() {
            self.config.batch_rays_warmup
        } else {
            self.config.batch_rays
        };
        let batch = sample_batch::<T>(dataset, self.config.seed, self.iteration, n);
        let fwd = forward_loss(
            &self.scene,
            self.mask.as_ref(),
            &batch,
            &self.config,
            self.iteration,
        );
        if !fwd.report.is_finite() {
            self.iteration += 1;
            return Err(TrainError::NonFinite(self.iteration - 1));
        }
        let mut grads = Grads::zeros_like(&self.scene.params);
        fwd.tape
            .backward(fwd.loss, &self.scene.params, &mut grads)
            .expect("forward recorded");
        let lr = self.learning_rates();
        self.adam.step(&mut self.scene.params, &grads, lr);
        self.iteration += 1;
        Ok(fwd.report)
    }

    // --- Checkpointing ---------------------------------------------------

    /// Serializes parameters, optimizer moments, mask, and progress.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut tensors: Vec<NamedTensor> = Vec::new();
        for id in self.scene.params.iter_ids() {
            let e = self.scene.params.entry(id);
            tensors.push(NamedTensor::new(
                e.name.clone(),
                e.shape.clone(),
                e.data.iter().map(|v| v.f64() as f32).collect(),
            ));
        }
        let (m, v, step) = self.adam.export_state();
        for (idx, id) in self.scene.params.iter_ids().enumerate() {
            let e = self.scene.params.entry(id);
            tensors.push(NamedTensor::new(
                format!("opt.m.{}", e.name),
                vec![m[idx].len()],
                m[idx].iter().map(|v| v.f64() as f32).collect(),
            ));
            tensors.push(NamedTensor::new(
                format!("opt.v.{}", e.name),
                vec![v[idx].len()],
                v[idx].iter().map(|x| x.f64() as f32).collect(),
            ));
        }
        tensors.push(NamedTensor::new("opt.step", vec![1], vec![step as f32]));
        tensors.push(NamedTensor::new(
            "state.iteration",
            vec![1],
            vec![self.iteration as f32],
        ));
        if let Some(mask) = &self.mask {
            tensors.push(NamedTensor::new(
                "mask.bits",
                vec![mask.resolution[0], mask.resolution[1], mask.resolution[2]],
                mask.bits()
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect(),
            ));
            tensors.push(NamedTensor::new(
                "mask.threshold",
                vec![1],
                vec![mask.threshold as f32],
            ));
        }
        save_checkpoint(path, &self.config.to_kv(), &tensors)?;
        Ok(())
    }

    /// Restores a run saved by [`TrainState::save`].
    pub fn load(path: &Path, bbox: Aabb<T>) -> Result<Self, TrainError> {
        let (echo, tensors) = crate::scene_io::load_checkpoint(path)?;
        let mut config = TrainConfig::paper();
        config.apply_kv(&echo)?;
        let by_name: std::collections::HashMap<String, &NamedTensor> =
            tensors.iter().map(|t| (t.name.clone(), t)).collect();
        let dvx = by_name
            .get("density.vec.x")
            .ok_or_else(|| TrainError::Config("checkpoint missing density grid".into()))?;
        let dvy = by_name.get("density.vec.y").unwrap();
        let dvz = by_name.get("density.vec.z").unwrap();
        let res = [dvx.dims[1], dvy.dims[1], dvz.dims[1]];
        let mut scene = SceneModel::new(&config.scene_config(res), bbox, config.seed);
        for id in scene.params.iter_ids().collect::<Vec<_>>() {
            let name = scene.params.entry(id).name.clone();
            let t = by_name
                .get(&name)
                .ok_or_else(|| TrainError::Config(format!("checkpoint missing {name}")))?;
            let data: Vec<T> = t.data.iter().map(|&v| T::c(v as f64)).collect();
            scene.params.replace(id, t.dims.clone(), data);
        }
        let mut adam = Adam::new(&scene.params);
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in scene.params.iter_ids() {
            let name = scene.params.entry(id).name.clone();
            let tm = by_name
                .get(&format!("opt.m.{name}"))
                .ok_or_else(|| TrainError::Config(format!("missing moments for {name}")))?;
            let tv = by_name.get(&format!("opt.v.{name}")).unwrap();
            m.push(tm.data.iter().map(|&x| T::c(x as f64)).collect());
            v.push(tv.data.iter().map(|&x| T::c(x as f64)).collect());
        }
        let step = by_name
            .get("opt.step")
            .map(|t| t.data[0] as u64)
            .unwrap_or(0);
        adam.import_state(m, v, step);
        let iteration = by_name
            .get("state.iteration")
            .map(|t| t.data[0] as usize)
            .unwrap_or(0);
        let mask = by_name.get("mask.bits").map(|t| {
            let bbox64 = Aabb::new(
                scene.bbox.min.map(|v| v.f64()),
                scene.bbox.max.map(|v| v.f64()),
            );
            AlphaMask::from_bits(
                [t.dims[0], t.dims[1], t.dims[2]],
                bbox64,
                by_name
                    .get("mask.threshold")
                    .map(|m| m.data[0] as f64)
                    .unwrap_or(1e-4),
                t.data.iter().map(|&v| v > 0.5).collect(),
            )
        });
        Ok(TrainState {
            scene,
            adam,
            mask,
            iteration,
            config,
        })
    }
}

/// One JSON line of the training log.
pub fn log_line(iter: usize, report: &LossReport, lr_factor: f64, elapsed_ms: f64) -> String {
    format!(
        concat!(
            "{{\"iter\":{},\"total\":{:.6e},\"rf\":{:.6e},\"pb\":{:.6e},",
            "\"normal\":{:.6e},\"orientation\":{:.6e},\"brdf_smooth\":{:.6e},",
            "\"grid_l1\":{:.6e},\"tv\":{:.6e},\"lr_factor\":{:.4},\"ms\":{:.1}}}"
        ),
        iter,
        report.total,
        report.rf,
        report.pb,
        report.normal,
        report.orientation,
        report.brdf_smooth,
        report.grid_l1,
        report.tv,
        lr_factor,
        elapsed_ms
    )
}

/// Runs the full schedule: warm-up, mask build, coarse-to-fine
/// upsampling, periodic mask refreshes, and checkpoints under `out`.
pub fn run_schedule<T: Real>(
    mut state: TrainState<T>,
    dataset: &Dataset,
    out: Option<&Path>,
    mut progress: impl FnMut(usize, &LossReport, &TrainState<T>),
) -> Result<TrainState<T>, TrainError> {
    state.config.validate()?;
    if dataset.light_count > state.config.lights.light_count() {
        return Err(TrainError::Config(format!(
            "dataset has {} lighting conditions but the model supports {}",
            dataset.light_count,
            state.config.lights.light_count()
        )));
    }
    let schedule = resolution_schedule(
        state.config.start_resolution,
        state.config.final_resolution,
        state.config.upsample_steps.len(),
    );
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
            std::fs::write(dir.join("config.cfg"), state.config.to_kv())
                .map_err(|e| IoError::file(dir, e))?;
            Some(
                std::fs::File::create(dir.join("train_log.jsonl"))
                    .map_err(|e| IoError::file(dir, e))?,
            )
        }
        None => None,
    };
    while state.iteration < state.config.total_iters {
        let iter = state.iteration;
        if let Some(slot) = state.config.upsample_steps.iter().position(|&s| s == iter) {
            state.upsample_to(schedule[slot]);
        }
        if iter == state.config.warmup_iters
            || (iter > state.config.warmup_iters
                && state.config.mask_refresh_every > 0
                && (iter - state.config.warmup_iters)
                    .is_multiple_of(state.config.mask_refresh_every))
        {
            state.rebuild_mask();
        }
        if let Some(dir) = out {
            if state.config.checkpoint_every > 0
                && iter > 0
                && iter.is_multiple_of(state.config.checkpoint_every)
            {
                state.save(&dir.join(format!("ckpt_{iter:06}.tirc")))?;
            }
        }
        let t0 = std::time::Instant::now();
        match state.train_step(dataset) {
            Ok(report) => {
                if let Some(f) = log.as_mut() {
                    let line = log_line(
                        iter,
                        &report,
                        state.config.lr_factor(iter),
                        t0.elapsed().as_secs_f64() * 1e3,
                    );
                    writeln!(f, "{line}").ok();
                }
                progress(iter, &report, &state);
            }
            Err(TrainError::NonFinite(i)) => {
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{{\"iter\":{i},\"skipped\":\"non-finite loss\"}}").ok();
                }
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(dir) = out {
        state.save(&dir.join("ckpt_final.tirc"))?;
    }
    Ok(state)
}
