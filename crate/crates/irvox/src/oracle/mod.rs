//! Independent brute-force references used by tests and the acceptance
//! suite: dense tensor expansion, a dense-grid ray marcher, a binary
//! visibility caster, high-sample shading quadrature, and the procedural
//! ground-truth scene generator.
//!
//! Nothing in this module shares evaluation code with the engine kernels
//! it validates; interpolation, marching, and sampling are implemented
//! from scratch on densely expanded data.

pub mod gen;

use crate::math::{Aabb, Real, Vec3};
use crate::tensor_field::{orth_axes, VmGrid};
use crate::ParamStore;

pub use gen::{build_scene, make_scene, EnvPreset, GenConfig, GenLights, ScenePreset};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("expansion over {0} voxels exceeds the {1} limit")]
    TooLarge(usize, usize),
}

/// Guard against accidentally expanding huge grids.
pub const EXPAND_LIMIT: usize = 64 * 64 * 64;

/// A densely stored scalar volume with its own interpolation code.
#[derive(Clone)]
pub struct DenseField {
    pub resolution: [usize; 3],
    pub bbox: Aabb<f64>,
    /// Node values, index `(ix * Ny + iy) * Nz + iz`.
    pub data: Vec<f64>,
}

impl DenseField {
    pub fn zeros(resolution: [usize; 3], bbox: Aabb<f64>) -> Self {
        DenseField {
            resolution,
            bbox,
            data: vec![0.0; resolution[0] * resolution[1] * resolution[2]],
        }
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution[1] + iy) * self.resolution[2] + iz
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[self.idx(ix, iy, iz)]
    }

    /// Trilinear interpolation at a world point (clamped to the box).
    pub fn trilinear(&self, p: Vec3<f64>) -> f64 {
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        for m in 0..3 {
            let n = self.resolution[m];
            let ext = self.bbox.max.0[m] - self.bbox.min.0[m];
            let u =
                ((p.0[m] - self.bbox.min.0[m]) / ext * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            cell[m] = i;
            frac[m] = if n >= 2 { u - i as f64 } else { 0.0 };
        }
        let (i, j, k) = (cell[0], cell[1], cell[2]);
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let (sx, sy, sz) = (
            usize::from(self.resolution[0] >= 2),
            usize::from(self.resolution[1] >= 2),
            usize::from(self.resolution[2] >= 2),
        );
        let mut acc = 0.0;
        for (di, wx) in [(0, 1.0 - fx), (sx, fx)] {
            if wx == 0.0 {
                continue;
            }
            for (dj, wy) in [(0, 1.0 - fy), (sy, fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (dk, wz) in [(0, 1.0 - fz), (sz, fz)] {
                    if wz == 0.0 {
                        continue;
                    }
                    acc += wx * wy * wz * self.at(i + di, j + dj, k + dk);
                }
            }
        }
        acc
    }
}

impl crate::volume_render::DensityField<f64> for DenseField {
    fn density(&self, p: Vec3<f64>) -> f64 {
        self.trilinear(p).max(0.0)
    }
    fn bbox(&self) -> Aabb<f64> {
        self.bbox
    }
}

/// Expands a factored density grid to a dense volume by explicit
/// outer-product accumulation over all components.
pub fn expand_density<T: Real>(
    store: &ParamStore<T>,
    grid: &VmGrid<T>,
) -> Result<DenseField, OracleError> {
    let [nx, ny, nz] = grid.resolution;
    let voxels = nx * ny * nz;
    if voxels > EXPAND_LIMIT {
        return Err(OracleError::TooLarge(voxels, EXPAND_LIMIT));
    }
    let bbox = Aabb::new(
        grid.bbox.min.map(|v| v.f64()),
        grid.bbox.max.map(|v| v.f64()),
    );
    let mut out = DenseField::zeros(grid.resolution, bbox);
    for m in 0..3 {
        let (a, b) = orth_axes(m);
        let vec: Vec<f64> = store
            .data(grid.vectors[m])
            .iter()
            .map(|v| v.f64())
            .collect();
        let mat: Vec<f64> = store
            .data(grid.matrices[m])
            .iter()
            .map(|v| v.f64())
            .collect();
        let (nm, na, nb) = (grid.resolution[m], grid.resolution[a], grid.resolution[b]);
        for k in 0..grid.components {
            for im in 0..nm {
                let v = vec[k * nm + im];
                if v == 0.0 {
                    continue;
                }
                for ia in 0..na {
                    for ib in 0..nb {
                        let mv = mat[k * na * nb + ia * nb + ib];
                        let mut idx3 = [0usize; 3];
                        idx3[m] = im;
                        idx3[a] = ia;
                        idx3[b] = ib;
                        let flat = out.idx(idx3[0], idx3[1], idx3[2]);
                        out.data[flat] += v * mv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Appearance feature at one point computed from an explicit dense
/// expansion of each channel (slow; test oracle only).
pub fn expand_feature_at<T: Real>(
    store: &ParamStore<T>,
    grid: &VmGrid<T>,
    p: Vec3<T>,
    light: Option<usize>,
) -> Vec<f64> {
    let f_dim = grid.feature_dim;
    let basis = grid.basis.as_ref().expect("appearance grid");
    let mut out = vec![0.0; f_dim];
    let pf = p.map(|v| v.f64());
    for f in 0..f_dim {
        // Dense-expand channel f alone, then trilinearly interpolate.
        let bbox = Aabb::new(
            grid.bbox.min.map(|v| v.f64()),
            grid.bbox.max.map(|v| v.f64()),
        );
        let mut vol = DenseField::zeros(grid.resolution, bbox);
        for m in 0..3 {
            let (a, b) = orth_axes(m);
            let vec: Vec<f64> = store
                .data(grid.vectors[m])
                .iter()
                .map(|v| v.f64())
                .collect();
            let mat: Vec<f64> = store
                .data(grid.matrices[m])
                .iter()
                .map(|v| v.f64())
                .collect();
            let bas: Vec<f64> = store.data(basis[m]).iter().map(|v| v.f64()).collect();
            let (nm, na, nb) = (grid.resolution[m], grid.resolution[a], grid.resolution[b]);
            for k in 0..grid.components {
                let e = match (&grid.lights, light) {
                    (Some(ids), Some(l)) => store.data(ids[m])[k * grid.light_count + l].f64(),
                    (Some(ids), None) => {
                        let row = store.data(ids[m]);
                        let mut s = 0.0;
                        for l in 0..grid.light_count {
                            s += row[k * grid.light_count + l].f64();
                        }
                        s / grid.light_count as f64
                    }
                    (None, _) => 1.0,
                };
                let bf = bas[k * f_dim + f] * e;
                if bf == 0.0 {
                    continue;
                }
                for im in 0..nm {
                    let v = vec[k * nm + im] * bf;
                    for ia in 0..na {
                        for ib in 0..nb {
                            let mut idx3 = [0usize; 3];
                            idx3[m] = im;
                            idx3[a] = ia;
                            idx3[b] = ib;
                            let flat = vol.idx(idx3[0], idx3[1], idx3[2]);
                            vol.data[flat] += v * mat[k * na * nb + ia * nb + ib];
                        }
                    }
                }
            }
        }
        out[f] = vol.trilinear(pf);
    }
    out
}

/// Result of marching one ray through a dense volume.
#[derive(Clone, Debug)]
pub struct DenseMarch {
    pub color: Vec3<f64>,
    pub t_end: f64,
    pub acc: f64,
    pub xhat: Vec3<f64>,
}

/// Marches a ray through a dense field with midpoint sampling and its own
/// compositing loop (reference implementation; shares no code with the
/// engine marcher).
pub fn dense_march(
    field: &DenseField,
    color: impl Fn(Vec3<f64>) -> Vec3<f64>,
    origin: Vec3<f64>,
    dir: Vec3<f64>,
    t_range: (f64, f64),
    n_samples: usize,
    background: Option<Vec3<f64>>,
) -> DenseMarch {
    let (t0, t1) = t_range;
    let dt = (t1 - t0) / n_samples as f64;
    let mut trans = 1.0;
    let mut acc = 0.0;
    let mut col = Vec3::zero();
    let mut xhat = Vec3::zero();
    for j in 0..n_samples {
        let t = t0 + (j as f64 + 0.5) * dt;
        let p = origin + dir * t;
        let sigma = field.trilinear(p).max(0.0);
        if sigma == 0.0 {
            continue;
        }
        let alpha = 1.0 - (-sigma * dt).exp();
        let w = trans * alpha;
        col = col + color(p) * w;
        xhat = xhat + p * w;
        acc += w;
        trans *= 1.0 - alpha;
        if trans < 1e-7 {
            break;
        }
    }
    if let Some(bg) = background {
        col = col + bg * (1.0 - acc);
    }
    if acc > 1e-9 {
        xhat = xhat / acc;
    }
    DenseMarch {
        color: col,
        t_end: trans,
        acc,
        xhat,
    }
}

/// Transmittance to the box boundary by fine-step accumulation
/// (`oversample` times the engine's per-ray sample count).
pub fn brute_transmittance(
    field: &DenseField,
    x: Vec3<f64>,
    dir: Vec3<f64>,
    engine_samples: usize,
    oversample: usize,
) -> f64 {
    let (t0, t1) = match field.bbox.intersect(x, dir, 0.0) {
        Some(r) => r,
        None => return 1.0,
    };
    let n = engine_samples * oversample;
    let dt = (t1 - t0) / n as f64;
    let mut optical = 0.0;
    for j in 0..n {
        let t = t0 + (j as f64 + 0.5) * dt;
        optical += field.trilinear(x + dir * t).max(0.0) * dt;
    }
    (-optical).exp()
}

/// Binary visibility: occluded when the brute transmittance drops below
/// one half.
pub fn brute_visibility(
    field: &DenseField,
    x: Vec3<f64>,
    dir: Vec3<f64>,
    engine_samples: usize,
) -> bool {
    brute_transmittance(field, x, dir, engine_samples, 4) >= 0.5
}

/// Converged reference estimate of the surface rendering integral at one
/// point. Returns the color and the per-channel standard error.
#[allow(clippy::too_many_arguments)]
pub fn quadrature_shade(
    normal: Vec3<f64>,
    wo: Vec3<f64>,
    albedo: Vec3<f64>,
    roughness: f64,
    radiance: impl Fn(Vec3<f64>) -> Vec3<f64> + Sync,
    occlusion: impl Fn(Vec3<f64>) -> f64 + Sync,
    n_samples: usize,
    seed: u64,
) -> (Vec3<f64>, Vec3<f64>) {
    use rayon::prelude::*;
    // Stratify over a lat-long grid sized to the sample budget.
    let h = ((n_samples as f64 / 2.0).sqrt().round() as usize).max(8);
    let w = 2 * h;
    let dtheta = std::f64::consts::PI / h as f64;
    let dphi = 2.0 * std::f64::consts::PI / w as f64;
    let rows: Vec<(Vec3<f64>, Vec3<f64>)> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut rng =
                crate::math::RngKey(seed).stream(crate::math::StreamTag::Misc, r as u64, 0);
            let mut sum = Vec3::zero();
            let mut sum_sq = Vec3::zero();
            for c in 0..w {
                let theta = (r as f64 + rng.next_f64()) * dtheta;
                let phi = (c as f64 + rng.next_f64()) * dphi;
                let dir = Vec3::new(
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                );
                let cos = dir.dot(normal);
                if cos <= 0.0 {
                    continue;
                }
                let weight = dtheta * dphi * theta.sin();
                let li = radiance(dir) * occlusion(dir);
                let f = crate::shading::brdf_eval(&crate::shading::BrdfQuery {
                    wi: dir,
                    wo,
                    normal,
                    albedo,
                    roughness,
                });
                let contrib = li.mul_ew(f) * (cos * weight);
                sum = sum + contrib;
                sum_sq = sum_sq + contrib.mul_ew(contrib);
            }
            (sum, sum_sq)
        })
        .collect();
    let mut total = Vec3::zero();
    let mut total_sq = Vec3::zero();
    for (s, q) in rows {
        total = total + s;
        total_sq = total_sq + q;
    }
    let n = (h * w) as f64;
    // Standard error of the stratified sum (conservative i.i.d. bound).
    let mut stderr = Vec3::zero();
    for c in 0..3 {
        let mean = total.0[c] / n;
        let var = (total_sq.0[c] / n - mean * mean).max(0.0);
        stderr.0[c] = (var * n).sqrt() / n.sqrt();
    }
    (total, stderr)
}

// --- Procedural ground-truth scenes ---------------------------------------

/// Analytic primitive with piecewise-constant material.
#[derive(Clone, Debug)]
pub enum Shape {
    Sphere {
        center: Vec3<f64>,
        radius: f64,
        albedo: Vec3<f64>,
        roughness: f64,
    },
    Slab {
        min: Vec3<f64>,
        max: Vec3<f64>,
        albedo: Vec3<f64>,
        roughness: f64,
    },
}

impl Shape {
    /// Signed distance (negative inside).
    pub fn sdf(&self, p: Vec3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius, .. } => (p - *center).norm() - radius,
            Shape::Slab { min, max, .. } => {
                let mut outside: f64 = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for a in 0..3 {
                    let d_lo = min.0[a] - p.0[a];
                    let d_hi = p.0[a] - max.0[a];
                    let d = d_lo.max(d_hi);
                    if d > 0.0 {
                        outside += d * d;
                    }
                    inside = inside.max(d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
        }
    }

    /// Outward unit normal of the shape boundary nearest to `p`.
    pub fn normal(&self, p: Vec3<f64>) -> Vec3<f64> {
        match self {
            Shape::Sphere { center, .. } => (p - *center).normalized(),
            Shape::Slab { min, max, .. } => {
                // Face with the largest (least-negative) axis distance.
                let mut best_axis = 0usize;
                let mut best_sign = 1.0;
                let mut best = f64::NEG_INFINITY;
                for a in 0..3 {
                    let d_hi = p.0[a] - max.0[a];
                    let d_lo = min.0[a] - p.0[a];
                    if d_hi > best {
                        best = d_hi;
                        best_axis = a;
                        best_sign = 1.0;
                    }
                    if d_lo > best {
                        best = d_lo;
                        best_axis = a;
                        best_sign = -1.0;
                    }
                }
                let mut n = Vec3::zero();
                n.0[best_axis] = best_sign;
                n
            }
        }
    }

    pub fn albedo(&self) -> Vec3<f64> {
        match self {
            Shape::Sphere { albedo, .. } | Shape::Slab { albedo, .. } => *albedo,
        }
    }

    pub fn roughness(&self) -> f64 {
        match self {
            Shape::Sphere { roughness, .. } | Shape::Slab { roughness, .. } => *roughness,
        }
    }

    /// Nearest positive ray intersection.
    pub fn intersect(&self, o: Vec3<f64>, d: Vec3<f64>, t_min: f64) -> Option<f64> {
        match self {
            Shape::Sphere { center, radius, .. } => {
                let oc = o - *center;
                let b = oc.dot(d);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = -b - sq;
                if t > t_min {
                    Some(t)
                } else {
                    let t2 = -b + sq;
                    (t2 > t_min).then_some(t2)
                }
            }
            Shape::Slab { min, max, .. } => {
                let bb = Aabb::new(*min, *max);
                let (t0, t1) = bb.intersect(o, d, t_min)?;
                if t0 > t_min {
                    Some(t0)
                } else {
                    (t1 > t_min).then_some(t1)
                }
            }
        }
    }
}

/// Analytic scene: shapes, lighting, and the voxelization used for
/// volumetric ground-truth rendering.
#[derive(Clone)]
pub struct ProceduralScene {
    pub shapes: Vec<Shape>,
    pub env: crate::shading::SgEnvMap<f64>,
    pub bbox: Aabb<f64>,
    /// Optical density inside shapes.
    pub sigma: f64,
}

impl ProceduralScene {
    /// Index and signed distance of the closest shape.
    pub fn closest(&self, p: Vec3<f64>) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, s) in self.shapes.iter().enumerate() {
            let d = s.sdf(p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Density: `sigma` inside, zero outside, with a half-voxel smooth
    /// transition controlled by `soft`.
    pub fn density(&self, p: Vec3<f64>, soft: f64) -> f64 {
        let (_, d) = self.closest(p);
        let x = (0.5 - d / soft).clamp(0.0, 1.0);
        self.sigma * x * x * (3.0 - 2.0 * x)
    }

    /// Nearest analytic ray hit over all shapes.
    pub fn hit(&self, o: Vec3<f64>, d: Vec3<f64>, t_min: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in self.shapes.iter().enumerate() {
            if let Some(t) = s.intersect(o, d, t_min) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    /// Binary analytic occlusion from `x` along `dir` (epsilon offset).
    pub fn occluded(&self, x: Vec3<f64>, dir: Vec3<f64>) -> bool {
        self.hit(x, dir, 1e-4).is_some()
    }

    /// Voxelizes the density into a dense field.
    pub fn to_dense(&self, res: usize) -> DenseField {
        let mut field = DenseField::zeros([res, res, res], self.bbox);
        let ext = self.bbox.extent();
        let soft = ext.max_component() / res as f64 * 1.5;
        for ix in 0..res {
            let x = self.bbox.min.x() + ix as f64 / (res - 1) as f64 * ext.x();
            for iy in 0..res {
                let y = self.bbox.min.y() + iy as f64 / (res - 1) as f64 * ext.y();
                for iz in 0..res {
                    let z = self.bbox.min.z() + iz as f64 / (res - 1) as f64 * ext.z();
                    let idx = field.idx(ix, iy, iz);
                    field.data[idx] = self.density(Vec3::new(x, y, z), soft);
                }
            }
        }
        field
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{RngKey, StreamTag};
    use crate::tensor_field::VmGrid;

    #[test]
    fn expand_rejects_oversized_grids() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngKey(0).stream(StreamTag::Init, 0, 0);
        let grid = VmGrid::create_density(&mut store, "d", [65, 65, 65], 1, Aabb::unit(), &mut rng)
            .unwrap();
        assert!(matches!(
            expand_density(&store, &grid),
            Err(OracleError::TooLarge(_, _))
        ));
    }

    #[test]
    fn zero_grid_expands_to_zero_volume() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngKey(0).stream(StreamTag::Init, 0, 0);
        let grid =
            VmGrid::create_density(&mut store, "d", [6, 6, 6], 2, Aabb::unit(), &mut rng).unwrap();
        for id in grid.factor_ids() {
            for v in store.data_mut(id) {
                *v = 0.0;
            }
        }
        let dense = expand_density(&store, &grid).unwrap();
        assert!(dense.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_expansion_is_outer_product() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngKey(0).stream(StreamTag::Init, 0, 0);
        let n = 4usize;
        let grid =
            VmGrid::create_density(&mut store, "d", [n, n, n], 1, Aabb::unit(), &mut rng).unwrap();
        for id in grid.factor_ids() {
            for v in store.data_mut(id) {
                *v = 0.0;
            }
        }
        // Only the X-axis term: value(i,j,k) = vx[i] * Myz[j,k].
        let vx: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        store.data_mut(grid.vectors[0]).copy_from_slice(&vx);
        let myz: Vec<f64> = (0..n * n).map(|i| 0.5 * i as f64 - 1.0).collect();
        store.data_mut(grid.matrices[0]).copy_from_slice(&myz);
        let dense = expand_density(&store, &grid).unwrap();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let want = vx[i] * myz[j * n + k];
                    assert!((dense.at(i, j, k) - want).abs() < 1e-12);
                }
            }
        }
    }
}
