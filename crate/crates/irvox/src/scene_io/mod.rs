//! Dataset loading (blender-style transforms JSON, images, light
//! indices), the pinhole camera model, image and environment-map I/O,
//! checkpoint serialization, and evaluation metrics.

pub mod checkpoint;
pub mod images;
pub mod metrics;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::math::{Real, Vec3};

pub use checkpoint::{load_checkpoint, save_checkpoint, NamedTensor};
pub use images::{read_hdr, read_pfm, read_png, write_hdr, write_pfm, write_png, ImageF};
pub use metrics::{align_albedo, normal_mae, psnr, ssim, AlbedoAlignment};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{0}: {1}")]
    File(PathBuf, String),
    #[error("{0}: {1}")]
    Parse(PathBuf, String),
    #[error("{0}: {1}")]
    Image(PathBuf, String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

impl IoError {
    pub(crate) fn file(path: &Path, e: std::io::Error) -> Self {
        IoError::File(path.to_path_buf(), e.to_string())
    }

    pub(crate) fn parse(path: &Path, msg: &str) -> Self {
        IoError::Parse(path.to_path_buf(), msg.to_string())
    }
}

/// Pinhole camera: camera-to-world transform plus horizontal field of
/// view. The camera looks along its local -Z with +X right and +Y up
/// (blender convention); rays go through pixel centers.
#[derive(Clone, Debug)]
pub struct Camera {
    pub c2w: [[f64; 4]; 4],
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Checks that the rotation block is orthonormal.
    pub fn validate(&self) -> Result<(), IoError> {
        let r = &self.c2w;
        let mut err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((dot - want).abs());
            }
        }
        if err > 1e-4 {
            return Err(IoError::Dataset(format!(
                "camera rotation not orthonormal (err {err:.2e})"
            )));
        }
        Ok(())
    }

    /// Builds a camera at `eye` looking at `target` (+`up` roughly up).
    pub fn look_at(
        eye: Vec3<f64>,
        target: Vec3<f64>,
        up: Vec3<f64>,
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let fwd = (target - eye).normalized();
        let right = fwd.cross(up).normalized();
        let true_up = right.cross(fwd);
        // Columns: X = right, Y = up, Z = -forward (camera looks down -Z).
        let mut c2w = [[0.0; 4]; 4];
        for i in 0..3 {
            c2w[i][0] = right.0[i];
            c2w[i][1] = true_up.0[i];
            c2w[i][2] = -fwd.0[i];
            c2w[i][3] = eye.0[i];
        }
        c2w[3][3] = 1.0;
        Camera {
            c2w,
            fov_x,
            width,
            height,
        }
    }

    pub fn origin<T: Real>(&self) -> Vec3<T> {
        Vec3::new(
            T::c(self.c2w[0][3]),
            T::c(self.c2w[1][3]),
            T::c(self.c2w[2][3]),
        )
    }

    /// World-space ray through the pixel whose top-left corner is
    /// `(px, py)`; pass `x + 0.5, y + 0.5` for pixel centers.
    pub fn ray<T: Real>(&self, px: f64, py: f64) -> (Vec3<T>, Vec3<T>) {
        let focal = 0.5 * self.width as f64 / (0.5 * self.fov_x).tan();
        let xc = (px - 0.5 * self.width as f64) / focal;
        let yc = -(py - 0.5 * self.height as f64) / focal;
        let zc = -1.0;
        let r = &self.c2w;
        let dir = Vec3::new(
            r[0][0] * xc + r[0][1] * yc + r[0][2] * zc,
            r[1][0] * xc + r[1][1] * yc + r[1][2] * zc,
            r[2][0] * xc + r[2][1] * yc + r[2][2] * zc,
        )
        .normalized();
        (self.origin::<f64>().map(T::c), dir.map(T::c))
    }
}

/// One training or test view.
#[derive(Clone, Debug)]
pub struct Frame {
    pub camera: Camera,
    /// Linear RGB composited onto the dataset background.
    pub image: ImageF,
    /// Raw alpha of the source image (object coverage).
    pub light: usize,
    pub name: String,
}

/// A posed multi-view capture.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub light_count: usize,
    pub background: [f32; 3],
    pub root: PathBuf,
}

impl Dataset {
    pub fn width(&self) -> usize {
        self.frames[0].image.width
    }

    pub fn height(&self) -> usize {
        self.frames[0].image.height
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.width() * self.height()
    }
}

/// Loads `transforms_{split}.json` and its images; RGBA images are
/// composited onto `background`, missing `light_idx` defaults to 0.
pub fn load_dataset(root: &Path, split: &str, background: [f32; 3]) -> Result<Dataset, IoError> {
    let tpath = root.join(format!("transforms_{split}.json"));
    let text = std::fs::read_to_string(&tpath).map_err(|e| IoError::file(&tpath, e))?;
    let json: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| IoError::parse(&tpath, &e.to_string()))?;
    let fov_x = json
        .get("camera_angle_x")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| IoError::parse(&tpath, "missing camera_angle_x"))?;
    let frames_json = json
        .get("frames")
        .and_then(|v| v.as_array())
        .ok_or_else(|| IoError::parse(&tpath, "missing frames array"))?;
    if frames_json.is_empty() {
        return Err(IoError::Dataset("dataset has no frames".into()));
    }
    let specs: Vec<(PathBuf, [[f64; 4]; 4], usize, String)> = frames_json
        .iter()
        .map(|f| {
            let file = f
                .get("file_path")
                .and_then(|v| v.as_str())
                .ok_or_else(|| IoError::parse(&tpath, "frame missing file_path"))?;
            let mat = f
                .get("transform_matrix")
                .and_then(|v| v.as_array())
                .ok_or_else(|| IoError::parse(&tpath, "frame missing transform_matrix"))?;
            let mut c2w = [[0.0f64; 4]; 4];
            for (i, row) in mat.iter().enumerate().take(4) {
                let row = row
                    .as_array()
                    .ok_or_else(|| IoError::parse(&tpath, "transform row not an array"))?;
                for (j, v) in row.iter().enumerate().take(4) {
                    c2w[i][j] = v
                        .as_f64()
                        .ok_or_else(|| IoError::parse(&tpath, "transform entry not a number"))?;
                }
            }
            let light = f.get("light_idx").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            let mut path = root.join(file);
            if path.extension().is_none() {
                path.set_extension("png");
            }
            let name = Path::new(file)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| file.to_string());
            Ok((path, c2w, light, name))
        })
        .collect::<Result<_, IoError>>()?;

    let frames: Vec<Frame> = specs
        .par_iter()
        .map(|(path, c2w, light, name)| {
            let raw = match path.extension().and_then(|e| e.to_str()) {
                Some("pfm") => {
                    let (w, h, c, data) = read_pfm(path)?;
                    if c != 3 {
                        return Err(IoError::Image(path.clone(), "PFM must be RGB".into()));
                    }
                    ImageF {
                        width: w,
                        height: h,
                        rgb: data,
                        alpha: vec![1.0; w * h],
                    }
                }
                _ => read_png(path)?,
            };
            let composited = raw.composited(background);
            let image = ImageF {
                alpha: raw.alpha,
                ..composited
            };
            let camera = Camera {
                c2w: *c2w,
                fov_x,
                width: image.width,
                height: image.height,
            };
            camera.validate()?;
            Ok(Frame {
                camera,
                image,
                light: *light,
                name: name.clone(),
            })
        })
        .collect::<Result<_, IoError>>()?;

    let (w, h) = (frames[0].image.width, frames[0].image.height);
    for f in &frames {
        if f.image.width != w || f.image.height != h {
            return Err(IoError::Dataset(format!(
                "inconsistent resolutions: {}x{} vs {w}x{h}",
                f.image.width, f.image.height
            )));
        }
    }
    let light_count = frames.iter().map(|f| f.light).max().unwrap_or(0) + 1;
    Ok(Dataset {
        frames,
        light_count,
        background,
        root: root.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("irvox_io_tests").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn central_pixel_ray_is_parallel_to_camera_minus_z() {
        let cam = Camera::look_at(
            Vec3::new(0.0, -4.0, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            0.7,
            64,
            64,
        );
        cam.validate().unwrap();
        let (_, dir) = cam.ray::<f64>(32.0, 32.0);
        // Camera -Z column in world space is the forward direction.
        let fwd = Vec3::new(-cam.c2w[0][2], -cam.c2w[1][2], -cam.c2w[2][2]);
        assert!((dir - fwd).norm() < 1e-12);
    }

    #[test]
    fn minimal_dataset_loads_and_generates_rays() {
        let dir = tmp_dir("mini");
        std::fs::create_dir_all(dir.join("train")).unwrap();
        // A 2x2 RGBA png: one transparent pixel to test compositing.
        let mut img = ImageF::new(2, 2);
        img.set_pixel(0, 0, [0.5, 0.25, 0.1]);
        img.alpha[0] = 0.0; // fully transparent
        write_png(&dir.join("train/r_0.png"), &img, true).unwrap();
        let json = serde_json::json!({
            "camera_angle_x": 0.6911,
            "frames": [{
                "file_path": "./train/r_0",
                "transform_matrix": [
                    [1.0, 0.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0, -3.0],
                    [0.0, 0.0, 1.0, 0.0],
                    [0.0, 0.0, 0.0, 1.0]
                ],
                "light_idx": 2
            }]
        });
        std::fs::write(
            dir.join("transforms_train.json"),
            serde_json::to_string_pretty(&json).unwrap(),
        )
        .unwrap();
        let ds = load_dataset(&dir, "train", [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(ds.frames.len(), 1);
        assert_eq!(ds.frames[0].light, 2);
        assert_eq!(ds.light_count, 3);
        // Transparent pixel composited onto white.
        assert_eq!(ds.frames[0].image.pixel(0, 0), [1.0, 1.0, 1.0]);
        // Rays exist for every pixel.
        for y in 0..2 {
            for x in 0..2 {
                let (_, d) = ds.frames[0]
                    .camera
                    .ray::<f64>(x as f64 + 0.5, y as f64 + 0.5);
                assert!((d.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn malformed_dataset_is_rejected() {
        let dir = tmp_dir("bad");
        std::fs::write(dir.join("transforms_train.json"), "{ not json").unwrap();
        assert!(load_dataset(&dir, "train", [1.0; 3]).is_err());
        assert!(load_dataset(&dir, "missing_split", [1.0; 3]).is_err());
    }
}
