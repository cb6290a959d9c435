//! Vector-matrix factorized tensor fields.
//!
//! A field over the scene box is stored as a sum of per-axis outer
//! products: for each component `k` and axis `m`, a vector factor along
//! `m` times a matrix factor over the two orthogonal axes. The density
//! grid is a plain 3D field; the appearance grid adds per-axis feature
//! basis vectors (4D) and, for multi-light captures, per-axis lighting
//! vectors (5D).
//!
//! Evaluation interpolates the factors (linear for vectors, bilinear for
//! matrices) at the fractional grid coordinates of the query point, which
//! by multilinearity equals trilinear interpolation of the densely
//! expanded tensor.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{LrGroup, ParamId, ParamStore, Tape, ValueId};
use crate::math::{softplus, Aabb, Real, StreamRng, Vec3};

/// Shift applied inside the density activation so that freshly
/// initialized grids start near-transparent.
pub const DENSITY_SHIFT: f64 = -10.0;

/// Floor of the normalized-weight denominator and similar guards.
pub const EVAL_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("upsample may not shrink resolution: {0:?} -> {1:?}")]
    ShrinkingResolution([usize; 3], [usize; 3]),
    #[error("light index {0} out of range (P = {1})")]
    LightOutOfRange(usize, usize),
    #[error("bounding box must have positive extent")]
    DegenerateBox,
}

/// The two axes orthogonal to `m`, in canonical order.
#[inline(always)]
pub fn orth_axes(m: usize) -> (usize, usize) {
    match m {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Interpolated field values at one point.
#[derive(Clone, Debug)]
pub struct FieldSample<T> {
    /// Activated, non-negative volume density.
    pub density: T,
    /// Interpolated appearance feature (empty for density-only queries).
    pub appearance_feature: Vec<T>,
}

/// Metadata of one VM-factorized grid; factor data lives in a
/// [`ParamStore`] under the ids recorded here.
#[derive(Clone, Debug)]
pub struct VmGrid<T> {
    pub resolution: [usize; 3],
    /// Components per axis (the paper counts 3x this as total components).
    pub components: usize,
    pub bbox: Aabb<T>,
    /// Per axis: vector factors, shape `(K, N_m)`.
    pub vectors: [ParamId; 3],
    /// Per axis: matrix factors over the orthogonal plane, shape `(K, N_a, N_b)`.
    pub matrices: [ParamId; 3],
    /// Per axis: feature basis vectors, shape `(K, F)`. 4D/5D grids only.
    pub basis: Option<[ParamId; 3]>,
    /// Per axis: lighting vectors, shape `(K, P)`. 5D grids only.
    pub lights: Option<[ParamId; 3]>,
    pub feature_dim: usize,
    pub light_count: usize,
}

impl<T: Real> VmGrid<T> {
    /// Registers a density grid (3D field) with noise-initialized factors.
    pub fn create_density(
        store: &mut ParamStore<T>,
        prefix: &str,
        resolution: [usize; 3],
        components: usize,
        bbox: Aabb<T>,
        rng: &mut StreamRng,
    ) -> Result<Self, TensorError> {
        Self::create(store, prefix, resolution, components, bbox, 0, 0, rng)
    }

    /// Registers an appearance grid; `light_count = 0` builds the 4D form,
    /// `light_count >= 1` the 5D multi-light form.
    #[allow(clippy::too_many_arguments)]
    pub fn create_appearance(
        store: &mut ParamStore<T>,
        prefix: &str,
        resolution: [usize; 3],
        components: usize,
        bbox: Aabb<T>,
        feature_dim: usize,
        light_count: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, TensorError> {
        Self::create(
            store,
            prefix,
            resolution,
            components,
            bbox,
            feature_dim,
            light_count,
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn create(
        store: &mut ParamStore<T>,
        prefix: &str,
        resolution: [usize; 3],
        components: usize,
        bbox: Aabb<T>,
        feature_dim: usize,
        light_count: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, TensorError> {
        if !bbox.is_valid() {
            return Err(TensorError::DegenerateBox);
        }
        let scale = 0.1 / (components as f64).sqrt();
        let mut noise = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::c((rng.next_f64() * 2.0 - 1.0) * scale))
                .collect()
        };
        let axis_names = ["x", "y", "z"];
        let mut vectors = [ParamId(0); 3];
        let mut matrices = [ParamId(0); 3];
        for m in 0..3 {
            let n = resolution[m];
            let (a, b) = orth_axes(m);
            vectors[m] = store
                .register(
                    &format!("{prefix}.vec.{}", axis_names[m]),
                    vec![components, n],
                    LrGroup::Grid,
                    noise(components * n),
                )
                .expect("fresh name");
            matrices[m] = store
                .register(
                    &format!("{prefix}.mat.{}", axis_names[m]),
                    vec![components, resolution[a], resolution[b]],
                    LrGroup::Grid,
                    noise(components * resolution[a] * resolution[b]),
                )
                .expect("fresh name");
        }
        let basis = if feature_dim > 0 {
            let mut ids = [ParamId(0); 3];
            for m in 0..3 {
                ids[m] = store
                    .register(
                        &format!("{prefix}.basis.{}", axis_names[m]),
                        vec![components, feature_dim],
                        LrGroup::Grid,
                        noise(components * feature_dim),
                    )
                    .expect("fresh name");
            }
            Some(ids)
        } else {
            None
        };
        let lights = if light_count > 0 {
            let mut ids = [ParamId(0); 3];
            for m in 0..3 {
                // Lighting vectors start at one so every lighting condition
                // initially shares identical appearance.
                ids[m] = store
                    .register(
                        &format!("{prefix}.light.{}", axis_names[m]),
                        vec![components, light_count],
                        LrGroup::Grid,
                        vec![T::one(); components * light_count],
                    )
                    .expect("fresh name");
            }
            Some(ids)
        } else {
            None
        };
        Ok(VmGrid {
            resolution,
            components,
            bbox,
            vectors,
            matrices,
            basis,
            lights,
            feature_dim,
            light_count: light_count.max(usize::from(feature_dim > 0 && light_count == 0)),
        })
    }

    /// All factor tensor ids of this grid.
    pub fn factor_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend_from_slice(&self.vectors);
        ids.extend_from_slice(&self.matrices);
        if let Some(b) = &self.basis {
            ids.extend_from_slice(b);
        }
        if let Some(l) = &self.lights {
            ids.extend_from_slice(l);
        }
        ids
    }

    /// Closed-form factor entry count at a given resolution.
    pub fn value_count_at(
        resolution: [usize; 3],
        components: usize,
        feature_dim: usize,
        light_count: usize,
    ) -> usize {
        let mut n = 0;
        for m in 0..3 {
            let (a, b) = orth_axes(m);
            n += components * resolution[m];
            n += components * resolution[a] * resolution[b];
        }
        if feature_dim > 0 {
            n += 3 * components * feature_dim;
        }
        if light_count > 0 {
            n += 3 * components * light_count;
        }
        n
    }

    /// Continuous grid coordinate of a world point, clamped to the grid.
    #[inline(always)]
    pub fn grid_coord(&self, p: Vec3<T>) -> [T; 3] {
        let mut u = [T::zero(); 3];
        for m in 0..3 {
            let ext = self.bbox.max.0[m] - self.bbox.min.0[m];
            let t = (p.0[m] - self.bbox.min.0[m]) / ext;
            let n1 = T::c((self.resolution[m] - 1) as f64);
            u[m] = (t * n1).max(T::zero()).min(n1);
        }
        u
    }

    /// World-space edge lengths of one voxel.
    pub fn voxel_extent(&self) -> Vec3<T> {
        let e = self.bbox.extent();
        Vec3::new(
            e.x() / T::c((self.resolution[0] - 1).max(1) as f64),
            e.y() / T::c((self.resolution[1] - 1).max(1) as f64),
            e.z() / T::c((self.resolution[2] - 1).max(1) as f64),
        )
    }
}

#[inline(always)]
fn lerp_cell<T: Real>(u: T, n: usize) -> (usize, T) {
    if n < 2 {
        return (0, T::zero());
    }
    let max_cell = T::c((n - 2) as f64);
    let i = u.floor().min(max_cell).max(T::zero());
    let idx = i.to_usize().unwrap_or(0);
    (idx, u - i)
}

/// Per-point interpolation stencil shared by the factored evaluators.
#[derive(Clone, Copy)]
struct Stencil {
    cell: [usize; 3],
    frac: [f64; 3],
}

fn stencil<T: Real>(grid: &VmGrid<T>, p: Vec3<T>) -> Stencil {
    let u = grid.grid_coord(p);
    let mut cell = [0usize; 3];
    let mut frac = [0f64; 3];
    for m in 0..3 {
        let (i, f) = lerp_cell(u[m], grid.resolution[m]);
        cell[m] = i;
        frac[m] = f.f64();
    }
    Stencil { cell, frac }
}

/// Spatial factor value `v_k(x_m) * M_k(x_a, x_b)` for one component and
/// axis, plus the pieces needed by the backward pass.
#[inline(always)]
fn spatial_term<T: Real>(
    vec: &[T],
    mat: &[T],
    k: usize,
    nm: usize,
    na: usize,
    nb: usize,
    st: &Stencil,
    m: usize,
) -> (T, T, T) {
    let (a, b) = orth_axes(m);
    let fm = T::c(st.frac[m]);
    let vbase = k * nm + st.cell[m];
    let one = T::one();
    let v = if nm >= 2 {
        vec[vbase] * (one - fm) + vec[vbase + 1] * fm
    } else {
        vec[vbase]
    };
    let fa = T::c(st.frac[a]);
    let fb = T::c(st.frac[b]);
    let (ia, ib) = (st.cell[a], st.cell[b]);
    let row = k * na * nb + ia * nb + ib;
    let (m00, m01) = (mat[row], mat[row + usize::from(nb >= 2)]);
    let next_row = row + if na >= 2 { nb } else { 0 };
    let (m10, m11) = (mat[next_row], mat[next_row + usize::from(nb >= 2)]);
    let mv = m00 * (one - fa) * (one - fb)
        + m01 * (one - fa) * fb
        + m10 * fa * (one - fb)
        + m11 * fa * fb;
    (v, mv, v * mv)
}

/// Raw (pre-activation) density of the factored 3D field at `p`.
pub fn eval_density_raw<T: Real>(store: &ParamStore<T>, grid: &VmGrid<T>, p: Vec3<T>) -> T {
    let st = stencil(grid, p);
    let one = T::one();
    let mut sum = T::zero();
    for m in 0..3 {
        let (a, b) = orth_axes(m);
        let (nm, na, nb) = (grid.resolution[m], grid.resolution[a], grid.resolution[b]);
        let vec = store.data(grid.vectors[m]);
        let mat = store.data(grid.matrices[m]);
        let fm = T::c(st.frac[m]);
        let fa = T::c(st.frac[a]);
        let fb = T::c(st.frac[b]);
        let (w00, w01, w10, w11) = (
            (one - fa) * (one - fb),
            (one - fa) * fb,
            fa * (one - fb),
            fa * fb,
        );
        let vstep = usize::from(nm >= 2);
        let bstep = usize::from(nb >= 2);
        let astep = if na >= 2 { nb } else { 0 };
        let voff = st.cell[m];
        let moff = st.cell[a] * nb + st.cell[b];
        let plane = na * nb;
        let mut acc = T::zero();
        for (vk, mk) in vec.chunks_exact(nm).zip(mat.chunks_exact(plane)) {
            let v = vk[voff] * (one - fm) + vk[voff + vstep] * fm;
            let mv = mk[moff] * w00
                + mk[moff + bstep] * w01
                + mk[moff + astep] * w10
                + mk[moff + astep + bstep] * w11;
            acc = v.mul_add(mv, acc);
        }
        sum += acc;
    }
    sum
}

/// Monotone non-negative map from raw density to optical density.
#[inline(always)]
pub fn density_activation<T: Real>(raw: T) -> T {
    softplus(raw + T::c(DENSITY_SHIFT))
}

/// Activated density at `p`; zero outside the bounding box.
pub fn eval_density<T: Real>(store: &ParamStore<T>, grid: &VmGrid<T>, p: Vec3<T>) -> T {
    if !grid.bbox.contains(p) {
        return T::zero();
    }
    density_activation(eval_density_raw(store, grid, p))
}

/// Which lighting slice an appearance query reads.
#[derive(Clone, Debug)]
pub enum LightSel {
    /// 4D grid, or 5D ignored-light aggregate via the factor means.
    Mean,
    /// One lighting condition per sample (indices into `0..P`).
    PerSample(Arc<Vec<u16>>),
}

/// Appearance feature of the factored grid at `p`.
///
/// For 5D grids, `light` selects the per-light slice or the mean over the
/// lighting dimension (the two coincide for 4D grids).
pub fn eval_feature<T: Real>(
    store: &ParamStore<T>,
    grid: &VmGrid<T>,
    p: Vec3<T>,
    light: Option<usize>,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), grid.feature_dim);
    for o in out.iter_mut() {
        *o = T::zero();
    }
    if !grid.bbox.contains(p) {
        return;
    }
    debug_assert!(light.is_none_or(|l| l < grid.light_count.max(1)));
    let st = stencil(grid, p);
    let basis = grid.basis.as_ref().expect("appearance grid");
    for m in 0..3 {
        let (a, b) = orth_axes(m);
        let (nm, na, nb) = (grid.resolution[m], grid.resolution[a], grid.resolution[b]);
        let vec = store.data(grid.vectors[m]);
        let mat = store.data(grid.matrices[m]);
        let bas = store.data(basis[m]);
        let light_data = grid.lights.as_ref().map(|ids| store.data(ids[m]));
        for k in 0..grid.components {
            let (_, _, s) = spatial_term(vec, mat, k, nm, na, nb, &st, m);
            let s = match (&light_data, light) {
                (Some(e), Some(l)) => s * e[k * grid.light_count + l],
                (Some(e), None) => {
                    let row = &e[k * grid.light_count..(k + 1) * grid.light_count];
                    let mean: T = row.iter().copied().sum::<T>() / T::c(grid.light_count as f64);
                    s * mean
                }
                (None, _) => s,
            };
            let brow = &bas[k * grid.feature_dim..(k + 1) * grid.feature_dim];
            for (o, &bf) in out.iter_mut().zip(brow) {
                *o += s * bf;
            }
        }
    }
}

/// Density plus (optionally) the mean appearance feature at one point.
pub fn sample_field<T: Real>(
    store: &ParamStore<T>,
    density: &VmGrid<T>,
    appearance: Option<&VmGrid<T>>,
    p: Vec3<T>,
) -> FieldSample<T> {
    let d = eval_density(store, density, p);
    let mut feat = Vec::new();
    if let Some(app) = appearance {
        feat = vec![T::zero(); app.feature_dim];
        eval_feature(store, app, p, None, &mut feat);
    }
    FieldSample {
        density: d,
        appearance_feature: feat,
    }
}

/// Linearly resamples a `(K, N)` factor to `(K, N_new)`.
fn resample_vec<T: Real>(data: &[T], k: usize, n_old: usize, n_new: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n_new];
    for c in 0..k {
        for i in 0..n_new {
            let u = if n_new < 2 {
                T::zero()
            } else {
                T::c(i as f64) * T::c((n_old - 1) as f64) / T::c((n_new - 1) as f64)
            };
            let (i0, f) = lerp_cell(u, n_old);
            let base = c * n_old + i0;
            out[c * n_new + i] = if n_old >= 2 {
                data[base] * (T::one() - f) + data[base + 1] * f
            } else {
                data[base]
            };
        }
    }
    out
}

/// Bilinearly resamples a `(K, Na, Nb)` factor.
fn resample_mat<T: Real>(
    data: &[T],
    k: usize,
    (na, nb): (usize, usize),
    (na2, nb2): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); k * na2 * nb2];
    let coord = |i: usize, n_new: usize, n_old: usize| -> (usize, T) {
        let u = if n_new < 2 {
            T::zero()
        } else {
            T::c(i as f64) * T::c((n_old - 1) as f64) / T::c((n_new - 1) as f64)
        };
        lerp_cell(u, n_old)
    };
    for c in 0..k {
        for ia in 0..na2 {
            let (a0, fa) = coord(ia, na2, na);
            for ib in 0..nb2 {
                let (b0, fb) = coord(ib, nb2, nb);
                let row = c * na * nb + a0 * nb + b0;
                let bstep = usize::from(nb >= 2);
                let astep = if na >= 2 { nb } else { 0 };
                let one = T::one();
                let v = data[row] * (one - fa) * (one - fb)
                    + data[row + bstep] * (one - fa) * fb
                    + data[row + astep] * fa * (one - fb)
                    + data[row + astep + bstep] * fa * fb;
                out[c * na2 * nb2 + ia * nb2 + ib] = v;
            }
        }
    }
    out
}

/// Resamples all spatial factors of `grid` to `new_resolution` in place
/// (vectors linearly, matrices bilinearly). Basis and lighting vectors,
/// K, F, P, and the bounding box are unchanged.
pub fn upsample<T: Real>(
    store: &mut ParamStore<T>,
    grid: &mut VmGrid<T>,
    new_resolution: [usize; 3],
) -> Result<(), TensorError> {
    for m in 0..3 {
        if new_resolution[m] < grid.resolution[m] {
            return Err(TensorError::ShrinkingResolution(
                grid.resolution,
                new_resolution,
            ));
        }
    }
    let k = grid.components;
    for m in 0..3 {
        let (a, b) = orth_axes(m);
        let new_vec = resample_vec(
            store.data(grid.vectors[m]),
            k,
            grid.resolution[m],
            new_resolution[m],
        );
        store.replace(grid.vectors[m], vec![k, new_resolution[m]], new_vec);
        let new_mat = resample_mat(
            store.data(grid.matrices[m]),
            k,
            (grid.resolution[a], grid.resolution[b]),
            (new_resolution[a], new_resolution[b]),
        );
        store.replace(
            grid.matrices[m],
            vec![k, new_resolution[a], new_resolution[b]],
            new_mat,
        );
    }
    grid.resolution = new_resolution;
    Ok(())
}

/// Sum of absolute values over the given factor tensors.
pub fn l1_norm<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> T {
    ids.iter()
        .map(|&id| store.data(id).iter().map(|v| v.abs()).sum())
        .sum()
}

/// Sum of squared adjacent differences over matrix factors `(K, Na, Nb)`.
pub fn tv_norm<T: Real>(store: &ParamStore<T>, mats: &[ParamId]) -> T {
    let mut total = T::zero();
    for &id in mats {
        let shape = store.shape(id);
        let (k, na, nb) = (shape[0], shape[1], shape[2]);
        let d = store.data(id);
        for c in 0..k {
            let base = c * na * nb;
            for ia in 0..na {
                for ib in 0..nb {
                    let v = d[base + ia * nb + ib];
                    if ia + 1 < na {
                        let diff = d[base + (ia + 1) * nb + ib] - v;
                        total += diff * diff;
                    }
                    if ib + 1 < nb {
                        let diff = d[base + ia * nb + ib + 1] - v;
                        total += diff * diff;
                    }
                }
            }
        }
    }
    total
}

// --- Tape operations -------------------------------------------------------

/// Positions a grid evaluation runs at: fixed sample locations, or a tape
/// value (`N x 3`) so gradients also flow into the positions.
#[derive(Clone)]
pub enum PosInput<T> {
    Fixed(Arc<Vec<Vec3<T>>>),
    Tracked(ValueId),
}

fn positions_of<T: Real>(tape: &Tape<T>, pos: &PosInput<T>) -> Vec<Vec3<T>> {
    match pos {
        PosInput::Fixed(p) => p.as_ref().clone(),
        PosInput::Tracked(id) => {
            let v = tape.val(*id);
            v.chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect()
        }
    }
}

struct GridBackCommon<T> {
    grid: VmGrid<T>,
    pts: Vec<Vec3<T>>,
    tracked: Option<ValueId>,
}

/// Raw density of the factored field at a batch of points, recorded on the
/// tape. Gradients flow into the factor tensors and, for tracked
/// positions, into the points themselves.
pub fn grid_density_op<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    grid: &VmGrid<T>,
    pos: PosInput<T>,
) -> ValueId {
    let pts = positions_of(tape, &pos);
    let mut out = vec![T::zero(); pts.len()];
    out.par_chunks_mut(1024)
        .zip(pts.par_chunks(1024))
        .for_each(|(oc, pc)| {
            for (o, &p) in oc.iter_mut().zip(pc) {
                *o = eval_density_raw(params, grid, p);
            }
        });
    let o = tape.alloc(out);
    let common = GridBackCommon {
        grid: grid.clone(),
        pts,
        tracked: match pos {
            PosInput::Tracked(id) => Some(id),
            PosInput::Fixed(_) => None,
        },
    };
    tape.push(move |_vals, params, ctx| {
        if let Some(go) = ctx.v.take(o) {
            let grid = &common.grid;
            // Out-of-box queries clamp to the boundary in the forward
            // pass, so their parameter gradients use the same clamped
            // stencil (the position gradient is zero past the edge).
            let stencils: Vec<Stencil> = common.pts.par_iter().map(|&p| stencil(grid, p)).collect();
            let want_pos = common.tracked.is_some();
            let results: Vec<(Vec<T>, Vec<T>, Vec<T>)> = [0usize, 1, 2]
                .into_par_iter()
                .map(|m| density_axis_backward(params, grid, m, &stencils, &go, want_pos))
                .collect();
            for (m, (vg, mg, _)) in results.iter().enumerate() {
                crate::math::axpy_fast(T::one(), vg, ctx.p.buf_mut(grid.vectors[m]));
                crate::math::axpy_fast(T::one(), mg, ctx.p.buf_mut(grid.matrices[m]));
            }
            if let Some(id) = common.tracked {
                ctx.v.accum(id, |ga| {
                    for (_, _, pg) in &results {
                        if pg.is_empty() {
                            continue;
                        }
                        for (s, &p) in common.pts.iter().enumerate() {
                            for m in 0..3 {
                                if p.0[m] < grid.bbox.min.0[m] || p.0[m] > grid.bbox.max.0[m] {
                                    continue;
                                }
                                let ext = grid.bbox.max.0[m] - grid.bbox.min.0[m];
                                let scale = T::c((grid.resolution[m] - 1).max(1) as f64) / ext;
                                ga[s * 3 + m] += pg[s * 3 + m] * scale;
                            }
                        }
                    }
                });
            }
        }
    });
    o
}

/// Per-axis backward of the factored density over a sample batch.
/// Returns dense vector/matrix gradient buffers for axis `m` plus the
/// grid-unit position gradients (empty unless requested).
fn density_axis_backward<T: Real>(
    params: &ParamStore<T>,
    grid: &VmGrid<T>,
    m: usize,
    stencils: &[Stencil],
    go: &[T],
    want_pos: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (a, b) = orth_axes(m);
    let (nm, na, nb) = (grid.resolution[m], grid.resolution[a], grid.resolution[b]);
    let vec = params.data(grid.vectors[m]);
    let mat = params.data(grid.matrices[m]);
    let mut vg = vec![T::zero(); vec.len()];
    let mut mg = vec![T::zero(); mat.len()];
    let mut pg = if want_pos {
        vec![T::zero(); stencils.len() * 3]
    } else {
        Vec::new()
    };
    let one = T::one();
    let bstep = usize::from(nb >= 2);
    let astep = if na >= 2 { nb } else { 0 };
    for (s, (st, &g)) in stencils.iter().zip(go).enumerate() {
        if g == T::zero() {
            continue;
        }
        let fm = T::c(st.frac[m]);
        let fa = T::c(st.frac[a]);
        let fb = T::c(st.frac[b]);
        let (w00, w01, w10, w11) = (
            (one - fa) * (one - fb),
            (one - fa) * fb,
            fa * (one - fb),
            fa * fb,
        );
        for k in 0..grid.components {
            let vbase = k * nm + st.cell[m];
            let v = if nm >= 2 {
                vec[vbase] * (one - fm) + vec[vbase + 1] * fm
            } else {
                vec[vbase]
            };
            let row = k * na * nb + st.cell[a] * nb + st.cell[b];
            let (m00, m01, m10, m11) = (
                mat[row],
                mat[row + bstep],
                mat[row + astep],
                mat[row + astep + bstep],
            );
            let mv = m00 * w00 + m01 * w01 + m10 * w10 + m11 * w11;
            let gv = g * mv;
            if nm >= 2 {
                vg[vbase] += gv * (one - fm);
                vg[vbase + 1] += gv * fm;
            } else {
                vg[vbase] += gv;
            }
            let gm = g * v;
            mg[row] += gm * w00;
            mg[row + bstep] += gm * w01;
            mg[row + astep] += gm * w10;
            mg[row + astep + bstep] += gm * w11;
            if want_pos {
                if nm >= 2 {
                    pg[s * 3 + m] += g * mv * (vec[vbase + 1] - vec[vbase]);
                }
                let dmda = (m10 - m00) * (one - fb) + (m11 - m01) * fb;
                let dmdb = (m01 - m00) * (one - fa) + (m11 - m10) * fa;
                pg[s * 3 + a] += g * v * dmda;
                pg[s * 3 + b] += g * v * dmdb;
            }
        }
    }
    (vg, mg, pg)
}

/// Appearance feature of the factored grid at a batch of points, recorded
/// on the tape (`N x F` output).
pub fn grid_feature_op<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    grid: &VmGrid<T>,
    pos: PosInput<T>,
    light: LightSel,
) -> ValueId {
    let pts = positions_of(tape, &pos);
    let f_dim = grid.feature_dim;
    let mut out = vec![T::zero(); pts.len() * f_dim];
    out.par_chunks_mut(512 * f_dim)
        .zip(pts.par_chunks(512))
        .enumerate()
        .for_each(|(chunk, (oc, pc))| {
            for (i, &p) in pc.iter().enumerate() {
                let s = chunk * 512 + i;
                let l = match &light {
                    LightSel::Mean => None,
                    LightSel::PerSample(ls) => Some(ls[s] as usize),
                };
                eval_feature(params, grid, p, l, &mut oc[i * f_dim..(i + 1) * f_dim]);
            }
        });
    let o = tape.alloc(out);
    let common = GridBackCommon {
        grid: grid.clone(),
        pts,
        tracked: match pos {
            PosInput::Tracked(id) => Some(id),
            PosInput::Fixed(_) => None,
        },
    };
    tape.push(move |_vals, params, ctx| {
        if let Some(go) = ctx.v.take(o) {
            let grid = &common.grid;
            // Out-of-box points produced zeros forward, so they are
            // skipped here (flagged by an empty stencil slot).
            let stencils: Vec<Option<Stencil>> = common
                .pts
                .par_iter()
                .zip(go.par_chunks(f_dim))
                .map(|(&p, gof)| {
                    if !grid.bbox.contains(p) || gof.iter().all(|&g| g == T::zero()) {
                        None
                    } else {
                        Some(stencil(grid, p))
                    }
                })
                .collect();
            let want_pos = common.tracked.is_some();
            let results: Vec<AxisFeatureGrads<T>> = [0usize, 1, 2]
                .into_par_iter()
                .map(|m| feature_axis_backward(params, grid, m, &stencils, &go, &light, want_pos))
                .collect();
            for (m, r) in results.iter().enumerate() {
                crate::math::axpy_fast(T::one(), &r.vec, ctx.p.buf_mut(grid.vectors[m]));
                crate::math::axpy_fast(T::one(), &r.mat, ctx.p.buf_mut(grid.matrices[m]));
                if let Some(bs) = &grid.basis {
                    crate::math::axpy_fast(T::one(), &r.basis, ctx.p.buf_mut(bs[m]));
                }
                if let Some(ls) = &grid.lights {
                    crate::math::axpy_fast(T::one(), &r.light, ctx.p.buf_mut(ls[m]));
                }
            }
            if let Some(id) = common.tracked {
                ctx.v.accum(id, |ga| {
                    for r in &results {
                        if r.pos.is_empty() {
                            continue;
                        }
                        for (s, &p) in common.pts.iter().enumerate() {
                            for m in 0..3 {
                                if p.0[m] < grid.bbox.min.0[m] || p.0[m] > grid.bbox.max.0[m] {
                                    continue;
                                }
                                let ext = grid.bbox.max.0[m] - grid.bbox.min.0[m];
                                let scale = T::c((grid.resolution[m] - 1).max(1) as f64) / ext;
                                ga[s * 3 + m] += r.pos[s * 3 + m] * scale;
                            }
                        }
                    }
                });
            }
        }
    });
    o
}

struct AxisFeatureGrads<T> {
    vec: Vec<T>,
    mat: Vec<T>,
    basis: Vec<T>,
    light: Vec<T>,
    pos: Vec<T>,
}

/// Per-axis backward of the factored appearance feature over a batch.
fn feature_axis_backward<T: Real>(
    params: &ParamStore<T>,
    grid: &VmGrid<T>,
    m: usize,
    stencils: &[Option<Stencil>],
    go: &[T],
    light: &LightSel,
    want_pos: bool,
) -> AxisFeatureGrads<T> {
    let (a, b) = orth_axes(m);
    let (nm, na, nb) = (grid.resolution[m], grid.resolution[a], grid.resolution[b]);
    let f_dim = grid.feature_dim;
    let p_count = grid.light_count;
    let vec = params.data(grid.vectors[m]);
    let mat = params.data(grid.matrices[m]);
    let bas = params.data(grid.basis.as_ref().expect("appearance grid")[m]);
    let light_data = grid.lights.as_ref().map(|ids| params.data(ids[m]));
    let mut out = AxisFeatureGrads {
        vec: vec![T::zero(); vec.len()],
        mat: vec![T::zero(); mat.len()],
        basis: vec![T::zero(); bas.len()],
        light: vec![T::zero(); light_data.map_or(0, |l| l.len())],
        pos: if want_pos {
            vec![T::zero(); stencils.len() * 3]
        } else {
            Vec::new()
        },
    };
    let one = T::one();
    let bstep = usize::from(nb >= 2);
    let astep = if na >= 2 { nb } else { 0 };
    let inv_p = T::one() / T::c(p_count.max(1) as f64);
    for (s, slot) in stencils.iter().enumerate() {
        let st = match slot {
            Some(st) => st,
            None => continue,
        };
        let gof = &go[s * f_dim..(s + 1) * f_dim];
        let lsel = match light {
            LightSel::Mean => None,
            LightSel::PerSample(ls) => Some(ls[s] as usize),
        };
        let fm = T::c(st.frac[m]);
        let fa = T::c(st.frac[a]);
        let fb = T::c(st.frac[b]);
        let (w00, w01, w10, w11) = (
            (one - fa) * (one - fb),
            (one - fa) * fb,
            fa * (one - fb),
            fa * fb,
        );
        for k in 0..grid.components {
            let vbase = k * nm + st.cell[m];
            let v = if nm >= 2 {
                vec[vbase] * (one - fm) + vec[vbase + 1] * fm
            } else {
                vec[vbase]
            };
            let row = k * na * nb + st.cell[a] * nb + st.cell[b];
            let (m00, m01, m10, m11) = (
                mat[row],
                mat[row + bstep],
                mat[row + astep],
                mat[row + astep + bstep],
            );
            let mv = m00 * w00 + m01 * w01 + m10 * w10 + m11 * w11;
            let brow = &bas[k * f_dim..(k + 1) * f_dim];
            let gdotb = crate::math::dot_fast(gof, brow);
            let (efactor, light_grad_sel) = match (light_data, lsel) {
                (Some(e), Some(l)) => (e[k * p_count + l], Some(Some(l))),
                (Some(e), None) => {
                    let row = &e[k * p_count..(k + 1) * p_count];
                    let mean: T = row.iter().copied().sum::<T>() * inv_p;
                    (mean, Some(None))
                }
                (None, _) => (T::one(), None),
            };
            let s_spatial = v * mv;
            let g_eff = gdotb * efactor;
            let gv = g_eff * mv;
            if nm >= 2 {
                out.vec[vbase] += gv * (one - fm);
                out.vec[vbase + 1] += gv * fm;
            } else {
                out.vec[vbase] += gv;
            }
            let gm = g_eff * v;
            out.mat[row] += gm * w00;
            out.mat[row + bstep] += gm * w01;
            out.mat[row + astep] += gm * w10;
            out.mat[row + astep + bstep] += gm * w11;
            crate::math::axpy_fast(
                s_spatial * efactor,
                gof,
                &mut out.basis[k * f_dim..(k + 1) * f_dim],
            );
            if let Some(lsel) = light_grad_sel {
                match lsel {
                    Some(l) => out.light[k * p_count + l] += gdotb * s_spatial,
                    None => {
                        let share = gdotb * s_spatial * inv_p;
                        for l in 0..p_count {
                            out.light[k * p_count + l] += share;
                        }
                    }
                }
            }
            if want_pos {
                if nm >= 2 {
                    out.pos[s * 3 + m] += g_eff * mv * (vec[vbase + 1] - vec[vbase]);
                }
                let dmda = (m10 - m00) * (one - fb) + (m11 - m01) * fb;
                let dmdb = (m01 - m00) * (one - fa) + (m11 - m10) * fa;
                out.pos[s * 3 + a] += g_eff * v * dmda;
                out.pos[s * 3 + b] += g_eff * v * dmdb;
            }
        }
    }
    out
}

/// L1 norm over whole parameter tensors, recorded on the tape.
pub fn param_l1_op<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    ids: Vec<ParamId>,
) -> ValueId {
    let s = l1_norm(params, &ids);
    let o = tape.alloc(vec![s]);
    tape.push(move |_vals, params, ctx| {
        if let Some(go) = ctx.v.take(o) {
            let g = go[0];
            for &id in &ids {
                let data = params.data(id);
                let n = data.len();
                let buf = ctx.p.buf_mut(id);
                for i in 0..n {
                    let s = if data[i] > T::zero() {
                        T::one()
                    } else if data[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    buf[i] += g * s;
                }
            }
        }
    });
    o
}

/// Total-variation norm over matrix factors, recorded on the tape.
pub fn param_tv_op<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    mats: Vec<ParamId>,
) -> ValueId {
    let s = tv_norm(params, &mats);
    let o = tape.alloc(vec![s]);
    tape.push(move |_vals, params, ctx| {
        if let Some(go) = ctx.v.take(o) {
            let g2 = go[0] + go[0];
            for &id in &mats {
                let shape = params.shape(id).to_vec();
                let (k, na, nb) = (shape[0], shape[1], shape[2]);
                let data = params.data(id);
                let n = data.len();
                let mut local = vec![T::zero(); n];
                for c in 0..k {
                    let base = c * na * nb;
                    for ia in 0..na {
                        for ib in 0..nb {
                            let idx = base + ia * nb + ib;
                            if ia + 1 < na {
                                let diff = data[idx + nb] - data[idx];
                                local[idx + nb] += g2 * diff;
                                local[idx] -= g2 * diff;
                            }
                            if ib + 1 < nb {
                                let diff = data[idx + 1] - data[idx];
                                local[idx + 1] += g2 * diff;
                                local[idx] -= g2 * diff;
                            }
                        }
                    }
                }
                let buf = ctx.p.buf_mut(id);
                for i in 0..n {
                    buf[i] += local[i];
                }
            }
        }
    });
    o
}

/// Splits `0..n` into fixed-size chunk ranges (deterministic parallel
/// reduction boundaries).
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        out.push(start..end);
        start = end;
    }
    out
}
