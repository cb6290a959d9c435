//! Procedural ground-truth dataset generation: posed cameras on a sphere,
//! images rendered by the dense-grid marcher with quadrature shading and
//! brute-force visibility, plus ground-truth normal/albedo/roughness maps
//! and relighting references under a held-out environment.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use super::{dense_march, DenseField, ProceduralScene, Shape};
use crate::math::{Aabb, RngKey, StreamTag, Vec3};
use crate::scene_io::{write_hdr, write_pfm, write_png, Camera, ImageF, IoError};
use crate::shading::{
    brdf_eval, rotate_env, stratified_sphere_dirs, BrdfQuery, PixelEnvMap, SgEnvMap, SgLobe,
};

/// Capture-environment presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvPreset {
    /// Soft sky plus a moderate sun.
    Studio,
    /// Dim ambient with a harsh sun (strong cast shadows).
    Sun,
}

impl EnvPreset {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "studio" => EnvPreset::Studio,
            "sun" => EnvPreset::Sun,
            _ => return None,
        })
    }

    pub fn build(self) -> SgEnvMap<f64> {
        match self {
            EnvPreset::Studio => studio_env(),
            EnvPreset::Sun => sun_env(),
        }
    }
}

/// Which analytic scene to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenePreset {
    /// One floating sphere.
    Sphere,
    /// A sphere hovering above a slab under a strong sun so the slab
    /// carries a cast shadow.
    SphereSlab,
}

impl ScenePreset {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sphere" => ScenePreset::Sphere,
            "sphere_slab" | "slab" => ScenePreset::SphereSlab,
            _ => return None,
        })
    }
}

/// Lighting layout of the generated capture.
#[derive(Clone, Debug, PartialEq)]
pub enum GenLights {
    Single,
    /// Shared environment rotated by these azimuth degrees; every view is
    /// rendered once per angle.
    Rotated(Vec<f64>),
    /// Independent environments; every view is rendered once per
    /// environment.
    General(usize),
    /// Like `General`, but each view keeps one randomly chosen lighting
    /// condition (same image budget as single-light).
    LimitedGeneral(usize),
}

/// Dataset generation settings.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub preset: ScenePreset,
    pub env: EnvPreset,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub lights: GenLights,
    /// Stratified directions per shaded point.
    pub shading_dirs: usize,
    /// Inner directions for the one-bounce indirect estimate.
    pub indirect_dirs: usize,
    pub dense_resolution: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            preset: ScenePreset::SphereSlab,
            env: EnvPreset::Studio,
            train_views: 30,
            test_views: 6,
            width: 128,
            height: 128,
            lights: GenLights::Single,
            shading_dirs: 512,
            indirect_dirs: 16,
            dense_resolution: 160,
            seed: 7,
        }
    }
}

fn wide_lobe(dir: [f64; 3], sharp: f64, amp: [f64; 3]) -> SgLobe<f64> {
    SgLobe {
        axis: Vec3(dir).normalized(),
        sharpness: sharp,
        amplitude: Vec3(amp),
    }
}

/// Capture-time environment: a soft sky plus a distinct sun lobe.
pub fn studio_env() -> SgEnvMap<f64> {
    SgEnvMap {
        lobes: vec![
            wide_lobe([0.0, 0.0, 1.0], 1.2, [0.38, 0.42, 0.55]),
            wide_lobe([0.0, 0.0, -1.0], 1.5, [0.16, 0.14, 0.12]),
            wide_lobe([1.0, 0.2, 0.1], 2.0, [0.20, 0.16, 0.12]),
            wide_lobe([-0.8, -0.4, 0.2], 2.0, [0.12, 0.14, 0.18]),
            wide_lobe([0.45, 0.3, 0.84], 60.0, [9.0, 8.4, 7.2]),
        ],
    }
}

/// Harsh key light for the shadow ablation study.
pub fn sun_env() -> SgEnvMap<f64> {
    SgEnvMap {
        lobes: vec![
            wide_lobe([0.0, 0.0, 1.0], 1.0, [0.10, 0.11, 0.14]),
            wide_lobe([0.55, 0.25, 0.8], 90.0, [16.0, 15.0, 13.0]),
        ],
    }
}

/// Held-out relighting environment (sun from the opposite side, warm
/// ground bounce).
pub fn relight_env() -> SgEnvMap<f64> {
    SgEnvMap {
        lobes: vec![
            wide_lobe([0.0, 0.0, 1.0], 1.3, [0.25, 0.28, 0.4]),
            wide_lobe([-0.6, -0.25, 0.76], 70.0, [11.0, 11.5, 13.0]),
            wide_lobe([0.3, 0.8, -0.3], 3.0, [0.3, 0.2, 0.12]),
        ],
    }
}

/// Secondary capture environments for the general multi-light mode.
pub fn general_env(index: usize) -> SgEnvMap<f64> {
    match index {
        0 => studio_env(),
        1 => SgEnvMap {
            lobes: vec![
                wide_lobe([0.0, 0.0, 1.0], 1.1, [0.3, 0.33, 0.42]),
                wide_lobe([-0.5, 0.6, 0.65], 50.0, [8.0, 7.2, 5.6]),
            ],
        },
        _ => SgEnvMap {
            lobes: vec![
                wide_lobe([0.0, 0.0, 1.0], 1.4, [0.36, 0.3, 0.26]),
                wide_lobe([0.1, -0.75, 0.66], 75.0, [7.0, 8.0, 10.0]),
            ],
        },
    }
}

/// Builds the analytic scene for a preset.
pub fn build_scene(preset: ScenePreset, env: SgEnvMap<f64>) -> ProceduralScene {
    let shapes = match preset {
        ScenePreset::Sphere => vec![Shape::Sphere {
            center: Vec3::new(0.0, 0.0, 0.0),
            radius: 0.45,
            albedo: Vec3::new(0.65, 0.28, 0.22),
            roughness: 0.35,
        }],
        ScenePreset::SphereSlab => vec![
            Shape::Sphere {
                center: Vec3::new(0.0, 0.0, -0.02),
                radius: 0.33,
                albedo: Vec3::new(0.63, 0.27, 0.2),
                roughness: 0.3,
            },
            Shape::Slab {
                min: Vec3::new(-0.88, -0.88, -0.55),
                max: Vec3::new(0.88, 0.88, -0.42),
                albedo: Vec3::new(0.34, 0.44, 0.58),
                roughness: 0.75,
            },
        ],
    };
    ProceduralScene {
        shapes,
        env,
        bbox: Aabb::unit(),
        sigma: 80.0,
    }
}

/// Spiral of cameras over the upper hemisphere looking at the origin.
pub fn camera_ring(count: usize, width: usize, height: usize, phase: f64) -> Vec<Camera> {
    let golden = PI * (3.0 - 5.0f64.sqrt());
    (0..count)
        .map(|i| {
            let frac = (i as f64 + 0.5) / count as f64;
            let elev = (20.0 + 45.0 * frac).to_radians();
            let azim = golden * i as f64 + phase;
            let r = 3.4;
            let eye = Vec3::new(
                r * elev.cos() * azim.cos(),
                r * elev.cos() * azim.sin(),
                r * elev.sin(),
            );
            Camera::look_at(
                eye,
                Vec3::zero(),
                Vec3::new(0.0, 0.0, 1.0),
                0.6911,
                width,
                height,
            )
        })
        .collect()
}

/// Per-view ground truth emitted alongside test images.
pub struct GtMaps {
    pub normal: Vec<f32>,
    pub albedo: Vec<f32>,
    pub roughness: Vec<f32>,
}

/// The shading core shared by capture and relight rendering: dense-march
/// alpha + surface point, analytic attributes, brute visibility, and a
/// one-bounce indirect term with analytic inner occlusion.
pub struct GtRenderer<'a> {
    pub scene: &'a ProceduralScene,
    pub dense: &'a DenseField,
    /// Lat-long LUT of the active environment (speeds up lobe sums).
    pub env_lut: PixelEnvMap<f64>,
    pub shading_dirs: usize,
    pub indirect_dirs: usize,
    pub seed: u64,
    /// Offset clearing the voxelization's density ramp before secondary
    /// marching (the ramp spans ~1.5 voxels around each surface).
    pub surf_eps: f64,
}

impl<'a> GtRenderer<'a> {
    pub fn new(
        scene: &'a ProceduralScene,
        dense: &'a DenseField,
        env: &SgEnvMap<f64>,
        shading_dirs: usize,
        indirect_dirs: usize,
        seed: u64,
    ) -> Self {
        let voxel = dense.bbox.extent().max_component() / dense.resolution[0] as f64;
        GtRenderer {
            scene,
            dense,
            env_lut: env.to_latlong(256, 512),
            shading_dirs,
            indirect_dirs,
            seed,
            surf_eps: 1.5 * voxel,
        }
    }

    fn direct(&self, dir: Vec3<f64>) -> Vec3<f64> {
        self.env_lut.sample(dir)
    }

    /// One-bounce indirect radiance arriving at `x` from `dir`.
    fn indirect(&self, x: Vec3<f64>, dir: Vec3<f64>, pixel_seed: u64) -> Vec3<f64> {
        let (t_hit, shape_idx) = match self.scene.hit(x, dir, 1e-4) {
            Some(h) => h,
            None => return Vec3::zero(),
        };
        let y = x + dir * t_hit;
        let shape = &self.scene.shapes[shape_idx];
        let n = shape.normal(y);
        let albedo = shape.albedo();
        // Diffuse direct lighting at the secondary hit.
        let mut rng = RngKey(self.seed ^ 0x1b0f).stream(StreamTag::Misc, pixel_seed, 1);
        let dirs = stratified_sphere_dirs::<f64>(self.indirect_dirs, &mut rng);
        let mut irr = Vec3::zero();
        for s in &dirs {
            let cos = s.dir.dot(n);
            if cos <= 0.0 || self.scene.occluded(y + n * 1e-4, s.dir) {
                continue;
            }
            irr = irr + self.direct(s.dir) * (cos * s.weight);
        }
        albedo.scale(1.0 / PI).mul_ew(irr)
    }

    /// Physically-based color at a surface point.
    pub fn shade(
        &self,
        x: Vec3<f64>,
        wo: Vec3<f64>,
        n: Vec3<f64>,
        albedo: Vec3<f64>,
        roughness: f64,
        pixel_seed: u64,
        with_indirect: bool,
    ) -> Vec3<f64> {
        let mut rng = RngKey(self.seed).stream(StreamTag::SecondaryDir, pixel_seed, 0);
        let dirs = stratified_sphere_dirs::<f64>(self.shading_dirs, &mut rng);
        let mut out = Vec3::zero();
        for s in &dirs {
            let cos = s.dir.dot(n);
            if cos <= 0.0 {
                continue;
            }
            let t_vis = super::brute_transmittance(self.dense, x + n * self.surf_eps, s.dir, 96, 2);
            let mut li = self.direct(s.dir) * t_vis;
            if with_indirect && t_vis < 0.999 {
                li = li + self.indirect(x + n * self.surf_eps, s.dir, pixel_seed);
            }
            if li == Vec3::zero() {
                continue;
            }
            let f = brdf_eval(&BrdfQuery {
                wi: s.dir,
                wo,
                normal: n,
                albedo,
                roughness,
            });
            out = out + li.mul_ew(f) * (cos * s.weight);
        }
        out
    }

    /// Renders one view; also returns ground-truth maps when asked.
    pub fn render_view(
        &self,
        camera: &Camera,
        view_seed: u64,
        want_maps: bool,
        with_indirect: bool,
    ) -> (ImageF, Option<GtMaps>) {
        let (w, h) = (camera.width, camera.height);
        let mut img = ImageF::new(w, h);
        let mut maps = want_maps.then(|| GtMaps {
            normal: vec![0.0; w * h * 3],
            albedo: vec![0.0; w * h * 3],
            roughness: vec![0.0; w * h],
        });
        type RowMaps = Option<(Vec<f32>, Vec<f32>, Vec<f32>)>;
        let rows: Vec<(usize, Vec<f32>, Vec<f32>, RowMaps)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rgb = vec![0.0f32; w * 3];
                let mut alpha = vec![0.0f32; w];
                let mut m =
                    want_maps.then(|| (vec![0.0f32; w * 3], vec![0.0f32; w * 3], vec![0.0f32; w]));
                for x in 0..w {
                    let (o, d) = camera.ray::<f64>(x as f64 + 0.5, y as f64 + 0.5);
                    let pixel_seed = view_seed * (w * h) as u64 + (y * w + x) as u64;
                    let clip = self.scene.bbox.intersect(o, d, 0.0);
                    let (t0, t1) = match clip {
                        Some(c) => c,
                        None => continue,
                    };
                    let march = dense_march(
                        self.dense,
                        |_| Vec3::zero(),
                        o,
                        d,
                        (t0, t1),
                        2 * self.dense.resolution[0],
                        None,
                    );
                    if march.acc < 1e-3 {
                        continue;
                    }
                    // Attributes and the shading point come from the
                    // analytic surface when the ray hits one; the dense
                    // march supplies coverage (and a fallback point on
                    // soft silhouettes).
                    let (xs, shape_idx) = match self.scene.hit(o, d, 0.0) {
                        Some((t, idx)) => (o + d * t, idx),
                        None => (march.xhat, self.scene.closest(march.xhat).0),
                    };
                    let shape = &self.scene.shapes[shape_idx];
                    let n = shape.normal(xs);
                    let albedo = shape.albedo();
                    let rough = shape.roughness();
                    let c = self.shade(xs, -d, n, albedo, rough, pixel_seed, with_indirect);
                    for ch in 0..3 {
                        rgb[x * 3 + ch] = c.0[ch] as f32;
                    }
                    alpha[x] = march.acc as f32;
                    if let Some((nm, am, rm)) = m.as_mut() {
                        for ch in 0..3 {
                            nm[x * 3 + ch] = n.0[ch] as f32;
                            am[x * 3 + ch] = albedo.0[ch] as f32;
                        }
                        rm[x] = rough as f32;
                    }
                }
                (y, rgb, alpha, m)
            })
            .collect();
        for (y, rgb, alpha, m) in rows {
            for x in 0..w {
                img.set_pixel(x, y, [rgb[x * 3], rgb[x * 3 + 1], rgb[x * 3 + 2]]);
                img.alpha[y * w + x] = alpha[x];
            }
            if let (Some(maps), Some((nm, am, rm))) = (maps.as_mut(), m) {
                maps.normal[y * w * 3..(y + 1) * w * 3].copy_from_slice(&nm);
                maps.albedo[y * w * 3..(y + 1) * w * 3].copy_from_slice(&am);
                maps.roughness[y * w..(y + 1) * w].copy_from_slice(&rm);
            }
        }
        (img, maps)
    }
}

fn camera_json(cam: &Camera, file_path: &str, light: usize) -> serde_json::Value {
    serde_json::json!({
        "file_path": file_path,
        "transform_matrix": cam.c2w,
        "light_idx": light,
    })
}

/// Environments active for each light index of a capture mode.
pub fn capture_envs(base: &SgEnvMap<f64>, lights: &GenLights) -> Vec<SgEnvMap<f64>> {
    match lights {
        GenLights::Single => vec![base.clone()],
        GenLights::Rotated(angles) => angles
            .iter()
            .map(|deg| rotate_env(base, deg.to_radians()))
            .collect(),
        GenLights::General(p) | GenLights::LimitedGeneral(p) => (0..*p).map(general_env).collect(),
    }
}

/// Generates a complete dataset under `out`: train/test transforms and
/// images, ground-truth maps and environments, and relighting references.
pub fn make_scene(cfg: &GenConfig, out: &Path) -> Result<(), IoError> {
    let base_env = cfg.env.build();
    let scene = build_scene(cfg.preset, base_env.clone());
    let dense = scene.to_dense(cfg.dense_resolution);
    let envs = capture_envs(&base_env, &cfg.lights);
    let light_count = envs.len();

    std::fs::create_dir_all(out.join("train")).map_err(|e| IoError::file(out, e))?;
    std::fs::create_dir_all(out.join("test")).map_err(|e| IoError::file(out, e))?;

    let renderers: Vec<GtRenderer> = envs
        .iter()
        .map(|env| {
            GtRenderer::new(
                &scene,
                &dense,
                env,
                cfg.shading_dirs,
                cfg.indirect_dirs,
                cfg.seed,
            )
        })
        .collect();

    // Training views.
    let train_cams = camera_ring(cfg.train_views, cfg.width, cfg.height, 0.0);
    let mut train_frames = Vec::new();
    let mut pick_rng = RngKey(cfg.seed).stream(StreamTag::RaySelect, 0, 0);
    for (v, cam) in train_cams.iter().enumerate() {
        let lights_for_view: Vec<usize> = match &cfg.lights {
            GenLights::Single => vec![0],
            GenLights::Rotated(_) | GenLights::General(_) => (0..light_count).collect(),
            GenLights::LimitedGeneral(p) => vec![pick_rng.next_index(*p)],
        };
        for &l in &lights_for_view {
            let (img, _) = renderers[l].render_view(cam, (v * light_count + l) as u64, false, true);
            let name = format!("r_{v:03}_l{l}");
            write_png(&out.join(format!("train/{name}.png")), &img, true)?;
            train_frames.push(camera_json(cam, &format!("./train/{name}"), l));
        }
    }
    let train_json = serde_json::json!({
        "camera_angle_x": train_cams[0].fov_x,
        "frames": train_frames,
    });
    std::fs::write(
        out.join("transforms_train.json"),
        serde_json::to_string_pretty(&train_json).unwrap(),
    )
    .map_err(|e| IoError::file(out, e))?;

    // Test views: light 0, with ground-truth maps and relighting images.
    let test_cams = camera_ring(cfg.test_views, cfg.width, cfg.height, 0.37);
    let relight = relight_env();
    let relight_renderer = GtRenderer::new(
        &scene,
        &dense,
        &relight,
        cfg.shading_dirs,
        cfg.indirect_dirs,
        cfg.seed ^ 0x9e37,
    );
    let mut test_frames = Vec::new();
    for (v, cam) in test_cams.iter().enumerate() {
        let seed = (1000 + v) as u64;
        let (img, maps) = renderers[0].render_view(cam, seed, true, true);
        let name = format!("r_{v:03}");
        write_png(&out.join(format!("test/{name}.png")), &img, true)?;
        let maps = maps.expect("maps requested");
        write_pfm(
            &out.join(format!("test/{name}_normal.pfm")),
            cfg.width,
            cfg.height,
            &maps.normal,
        )?;
        write_pfm(
            &out.join(format!("test/{name}_albedo.pfm")),
            cfg.width,
            cfg.height,
            &maps.albedo,
        )?;
        write_pfm(
            &out.join(format!("test/{name}_roughness.pfm")),
            cfg.width,
            cfg.height,
            &maps.roughness,
        )?;
        let (relit, _) = relight_renderer.render_view(cam, seed, false, true);
        write_png(&out.join(format!("test/{name}_relight.png")), &relit, true)?;
        test_frames.push(camera_json(cam, &format!("./test/{name}"), 0));
    }
    let test_json = serde_json::json!({
        "camera_angle_x": test_cams[0].fov_x,
        "frames": test_frames,
    });
    std::fs::write(
        out.join("transforms_test.json"),
        serde_json::to_string_pretty(&test_json).unwrap(),
    )
    .map_err(|e| IoError::file(out, e))?;

    // Ground-truth environments: capture env as PFM, relight env as HDR.
    let gt_env = envs[0].to_latlong(64, 128);
    let gt_f32: Vec<f32> = gt_env.texels.iter().map(|&v| v as f32).collect();
    write_pfm(&out.join("env_gt.pfm"), 128, 64, &gt_f32)?;
    let rel_lut = relight.to_latlong(64, 128);
    let rel_f32: Vec<f32> = rel_lut.texels.iter().map(|&v| v as f32).collect();
    write_hdr(&out.join("env_relight.hdr"), 128, 64, &rel_f32)?;
    Ok(())
}
