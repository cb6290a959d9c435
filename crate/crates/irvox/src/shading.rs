//! Physically-based shading: spherical-Gaussian environment lighting,
//! the simplified Disney BRDF (Lambertian diffuse + GGX/Smith/Schlick
//! specular with fixed F0), pixel environment maps with
//! luminance-importance sampling, and the stratified direction sampler
//! used for the hemisphere integral.

use std::f64::consts::PI;

use crate::autodiff::{ops, LrGroup, ParamId, ParamStore, Tape, ValueId};
use crate::math::{sigmoid, softplus, Real, StreamRng, Vec3};

/// Fresnel reflectance at normal incidence for dielectrics.
pub const F0: f64 = 0.04;

/// Trainable lobe count of the environment model.
pub const SG_LOBES: usize = 128;

/// Initial sharpness and gray amplitude of fresh lobes.
pub const SG_INIT_SHARPNESS: f64 = 30.0;
pub const SG_INIT_AMPLITUDE: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ShadingError {
    #[error("environment map has zero total luminance")]
    BlackEnvironment,
    #[error("environment map dimensions invalid: {0}x{1}")]
    BadEnvSize(usize, usize),
}

/// One spherical-Gaussian lobe with activated parameters.
#[derive(Clone, Copy, Debug)]
pub struct SgLobe<T> {
    /// Unit lobe axis.
    pub axis: Vec3<T>,
    /// Sharpness (> 0).
    pub sharpness: T,
    /// Non-negative RGB amplitude.
    pub amplitude: Vec3<T>,
}

/// A materialized mixture of spherical Gaussians.
#[derive(Clone, Debug)]
pub struct SgEnvMap<T> {
    pub lobes: Vec<SgLobe<T>>,
}

impl<T: Real> SgEnvMap<T> {
    /// Radiance arriving from `dir`: `sum_m mu_m exp(lambda_m (xi_m . dir - 1))`.
    pub fn eval(&self, dir: Vec3<T>) -> Vec3<T> {
        let mut out = Vec3::zero();
        for lobe in &self.lobes {
            let e = (lobe.sharpness * (lobe.axis.dot(dir) - T::one())).exp();
            out = out + lobe.amplitude * e;
        }
        out
    }

    /// Bakes the mixture into a lat-long image (top row faces +Z).
    pub fn to_latlong(&self, height: usize, width: usize) -> PixelEnvMap<T> {
        let mut texels = vec![T::zero(); height * width * 3];
        for r in 0..height {
            let theta = (r as f64 + 0.5) / height as f64 * PI;
            for c in 0..width {
                let phi = (c as f64 + 0.5) / width as f64 * 2.0 * PI;
                let dir = latlong_dir::<T>(theta, phi);
                let rgb = self.eval(dir);
                let base = (r * width + c) * 3;
                texels[base..base + 3].copy_from_slice(&rgb.0);
            }
        }
        PixelEnvMap {
            height,
            width,
            texels,
        }
    }
}

/// Rotates every lobe axis about +Z by `angle`; sharpness and amplitude
/// are unchanged.
pub fn rotate_env<T: Real>(env: &SgEnvMap<T>, angle: T) -> SgEnvMap<T> {
    SgEnvMap {
        lobes: env
            .lobes
            .iter()
            .map(|l| SgLobe {
                axis: l.axis.rotate_z(angle),
                sharpness: l.sharpness,
                amplitude: l.amplitude,
            })
            .collect(),
    }
}

/// Trainable spherical-Gaussian environment: raw axes (normalized on
/// evaluation), raw sharpness (softplus), raw amplitude (exponential).
#[derive(Clone, Debug)]
pub struct SgEnvParams {
    pub axis: ParamId,
    pub sharpness: ParamId,
    pub amplitude: ParamId,
    pub lobes: usize,
}

impl SgEnvParams {
    /// Registers a fresh environment: Fibonacci-sphere axes, uniform
    /// sharpness and gray amplitude.
    pub fn create<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        lobes: usize,
        _rng: &mut StreamRng,
    ) -> Self {
        let golden = PI * (3.0 - 5.0f64.sqrt());
        let mut axes = Vec::with_capacity(lobes * 3);
        for i in 0..lobes {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / lobes as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            axes.extend_from_slice(&[T::c(r * phi.cos()), T::c(r * phi.sin()), T::c(z)]);
        }
        let axis = store
            .register(
                &format!("{prefix}.axis"),
                vec![lobes, 3],
                LrGroup::Network,
                axes,
            )
            .expect("fresh name");
        // softplus(x) = s  =>  x = ln(e^s - 1); for s = 30 this is s itself
        // to machine precision.
        let sharp_raw = T::c(SG_INIT_SHARPNESS);
        let sharpness = store
            .register(
                &format!("{prefix}.sharpness"),
                vec![lobes],
                LrGroup::Network,
                vec![sharp_raw; lobes],
            )
            .expect("fresh name");
        let amp_raw = T::c(SG_INIT_AMPLITUDE.ln());
        let amplitude = store
            .register(
                &format!("{prefix}.amplitude"),
                vec![lobes, 3],
                LrGroup::Network,
                vec![amp_raw; lobes * 3],
            )
            .expect("fresh name");
        SgEnvParams {
            axis,
            sharpness,
            amplitude,
            lobes,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.axis, self.sharpness, self.amplitude]
    }

    /// Activates the raw parameters into lobes, rotating axes about +Z by
    /// `azimuth`.
    pub fn materialize<T: Real>(&self, store: &ParamStore<T>, azimuth: T) -> SgEnvMap<T> {
        let ax = store.data(self.axis);
        let sh = store.data(self.sharpness);
        let am = store.data(self.amplitude);
        let lobes = (0..self.lobes)
            .map(|i| {
                let raw = Vec3::new(ax[3 * i], ax[3 * i + 1], ax[3 * i + 2]);
                SgLobe {
                    axis: raw.normalized().rotate_z(azimuth),
                    sharpness: softplus(sh[i]),
                    amplitude: Vec3::new(am[3 * i].exp(), am[3 * i + 1].exp(), am[3 * i + 2].exp()),
                }
            })
            .collect();
        SgEnvMap { lobes }
    }
}

/// Recorded SG radiance toward fixed directions (`N x 3` output).
///
/// `azimuth` rotates the environment about +Z (used by the rotated
/// multi-light mode); gradients flow into the raw lobe parameters.
pub fn sg_radiance_op<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    env: &SgEnvParams,
    dirs: Vec<Vec3<T>>,
    azimuth: T,
) -> ValueId {
    let lobes = env.materialize(params, azimuth);
    let n = dirs.len();
    let mut out = vec![T::zero(); n * 3];
    // Evaluate against un-rotated axes by rotating directions instead.
    let local_dirs: Vec<Vec3<T>> = dirs.iter().map(|d| d.rotate_z(-azimuth)).collect();
    for (s, d) in dirs.iter().enumerate() {
        let rgb = lobes.eval(*d);
        out[3 * s..3 * s + 3].copy_from_slice(&rgb.0);
    }
    let o = tape.alloc(out);
    let env = env.clone();
    tape.push(move |_vals, params, ctx| {
        let go = match ctx.v.take(o) {
            Some(g) => g,
            None => return,
        };
        let ax = params.data(env.axis);
        let sh = params.data(env.sharpness);
        let am = params.data(env.amplitude);
        for i in 0..env.lobes {
            let raw = Vec3::new(ax[3 * i], ax[3 * i + 1], ax[3 * i + 2]);
            let rn = raw.norm();
            if rn <= T::zero() {
                continue;
            }
            let unit = raw / rn;
            let sharp = softplus(sh[i]);
            let dsharp = sigmoid(sh[i]);
            let amp = Vec3::new(am[3 * i].exp(), am[3 * i + 1].exp(), am[3 * i + 2].exp());
            let mut g_axis = Vec3::zero();
            let mut g_sharp = T::zero();
            let mut g_amp = Vec3::zero();
            for (s, d) in local_dirs.iter().enumerate() {
                let cosang = unit.dot(*d);
                let e = (sharp * (cosang - T::one())).exp();
                let gor = Vec3::new(go[3 * s], go[3 * s + 1], go[3 * s + 2]);
                let gdot = gor.dot(amp) * e;
                // d/d(amp_raw) = contribution itself (exp param).
                g_amp = g_amp + gor.mul_ew(amp) * e;
                g_sharp += gdot * (cosang - T::one());
                // d cos / d raw axis through the normalization.
                let dcos = (*d - unit * cosang) / rn;
                g_axis = g_axis + dcos * (gdot * sharp);
            }
            {
                let buf = ctx.p.buf_mut(env.axis);
                for c in 0..3 {
                    buf[3 * i + c] += g_axis.0[c];
                }
            }
            ctx.p.buf_mut(env.sharpness)[i] += g_sharp * dsharp;
            {
                let buf = ctx.p.buf_mut(env.amplitude);
                for c in 0..3 {
                    buf[3 * i + c] += g_amp.0[c];
                }
            }
        }
    });
    o
}

/// Lat-long direction convention: row 0 is theta = 0 (+Z pole),
/// phi sweeps from +X toward +Y.
pub fn latlong_dir<T: Real>(theta: f64, phi: f64) -> Vec3<T> {
    Vec3::new(
        T::c(theta.sin() * phi.cos()),
        T::c(theta.sin() * phi.sin()),
        T::c(theta.cos()),
    )
}

/// A lat-long HDR environment image (row-major, top row = theta 0).
#[derive(Clone, Debug)]
pub struct PixelEnvMap<T> {
    pub height: usize,
    pub width: usize,
    /// RGB texels, row-major.
    pub texels: Vec<T>,
}

impl<T: Real> PixelEnvMap<T> {
    pub fn new(height: usize, width: usize, texels: Vec<T>) -> Result<Self, ShadingError> {
        if height == 0 || width == 0 || texels.len() != height * width * 3 {
            return Err(ShadingError::BadEnvSize(height, width));
        }
        Ok(PixelEnvMap {
            height,
            width,
            texels,
        })
    }

    #[inline]
    pub fn texel(&self, r: usize, c: usize) -> Vec3<T> {
        let base = (r * self.width + c) * 3;
        Vec3::new(
            self.texels[base],
            self.texels[base + 1],
            self.texels[base + 2],
        )
    }

    /// Nearest-texel radiance lookup along `dir`.
    pub fn sample(&self, dir: Vec3<T>) -> Vec3<T> {
        let theta = dir.z().f64().clamp(-1.0, 1.0).acos();
        let mut phi = dir.y().f64().atan2(dir.x().f64());
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let r = ((theta / PI * self.height as f64) as usize).min(self.height - 1);
        let c = ((phi / (2.0 * PI) * self.width as f64) as usize).min(self.width - 1);
        self.texel(r, c)
    }

    pub fn total_luminance(&self) -> f64 {
        self.texels
            .chunks_exact(3)
            .map(|t| luminance(t[0].f64(), t[1].f64(), t[2].f64()))
            .sum()
    }
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.2126 * r + 0.7152 * g + 0.0722 * b
}

/// One sampled incident direction with its Monte Carlo weight
/// (`1 / (N p(omega))`, already including the sample count).
#[derive(Clone, Copy, Debug)]
pub struct DirSample<T> {
    pub dir: Vec3<T>,
    pub weight: T,
}

/// Stratified directions over the full sphere: the lat-long parameter
/// domain is split into an `H x 2H` grid of equal 2D area, one uniform
/// sample per cell, weighted by the cell Jacobian `sin(theta)
/// dtheta dphi`.
pub fn stratified_sphere_dirs<T: Real>(count: usize, rng: &mut StreamRng) -> Vec<DirSample<T>> {
    let h = ((count as f64 / 2.0).sqrt().round() as usize).max(1);
    let w = 2 * h;
    let dtheta = PI / h as f64;
    let dphi = 2.0 * PI / w as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let theta = (r as f64 + rng.next_f64()) * dtheta;
            let phi = (c as f64 + rng.next_f64()) * dphi;
            out.push(DirSample {
                dir: latlong_dir(theta, phi),
                weight: T::c(dtheta * dphi * theta.sin()),
            });
        }
    }
    out
}

/// Luminance-proportional importance sampler over a pixel environment.
///
/// Texels are drawn with probability proportional to `luminance x
/// sin(theta)`; weights are the reciprocal solid-angle densities.
pub fn importance_env_dirs<T: Real>(
    env: &PixelEnvMap<T>,
    count: usize,
    rng: &mut StreamRng,
) -> Result<Vec<DirSample<T>>, ShadingError> {
    let (h, w) = (env.height, env.width);
    let dtheta = PI / h as f64;
    let dphi = 2.0 * PI / w as f64;
    let mut cdf = Vec::with_capacity(h * w);
    let mut total = 0.0f64;
    for r in 0..h {
        let sin_c = ((r as f64 + 0.5) * dtheta).sin().max(1e-9);
        for c in 0..w {
            let t = env.texel(r, c);
            let q = luminance(t.x().f64(), t.y().f64(), t.z().f64()).max(0.0) * sin_c;
            total += q;
            cdf.push(total);
        }
    }
    if total <= 0.0 {
        return Err(ShadingError::BlackEnvironment);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u = rng.next_f64() * total;
        let idx = cdf.partition_point(|&v| v < u).min(h * w - 1);
        let (r, c) = (idx / w, idx % w);
        let q_cell = cdf[idx] - if idx == 0 { 0.0 } else { cdf[idx - 1] };
        let theta = (r as f64 + rng.next_f64()) * dtheta;
        let phi = (c as f64 + rng.next_f64()) * dphi;
        let dir = latlong_dir::<T>(theta, phi);
        // pdf over the parameter domain, converted to solid angle at the
        // actual sample's sin(theta).
        let pdf_param = (q_cell / total) / (dtheta * dphi);
        let pdf_omega = pdf_param / theta.sin().max(1e-9);
        out.push(DirSample {
            dir,
            weight: T::c(1.0 / (count as f64 * pdf_omega)),
        });
    }
    Ok(out)
}

// --- BRDF ------------------------------------------------------------------

/// A single BRDF evaluation query (all vectors unit length).
#[derive(Clone, Copy, Debug)]
pub struct BrdfQuery<T> {
    pub wi: Vec3<T>,
    pub wo: Vec3<T>,
    pub normal: Vec3<T>,
    pub albedo: Vec3<T>,
    pub roughness: T,
}

/// Schlick Fresnel with reflectance `f0` at normal incidence.
///
/// The grazing reflectance is `min(1, 50 f0)`, so very small `f0` scales
/// the whole lobe away instead of still reflecting at grazing angles; at
/// the fixed dielectric `f0 = 0.04` this is the classic Schlick curve.
#[inline]
pub fn schlick<T: Real>(cos_d: T, f0: T) -> T {
    let f90 = (f0 * T::c(50.0)).min(T::one());
    let m = (T::one() - cos_d).max(T::zero());
    let m2 = m * m;
    f0 + (f90 - f0) * m2 * m2 * m
}

/// GGX (Trowbridge-Reitz) normal distribution with `alpha = roughness^2`.
#[inline]
pub fn ggx_d<T: Real>(cos_h: T, alpha: T) -> T {
    let a2 = alpha * alpha;
    let t = cos_h * cos_h * (a2 - T::one()) + T::one();
    a2 / (T::c(PI) * t * t).max(T::c(1e-12))
}

#[inline]
fn smith_lambda<T: Real>(cos_t: T, alpha: T) -> T {
    let c2 = (cos_t * cos_t).max(T::c(1e-12));
    let tan2 = (T::one() - c2) / c2;
    ((T::one() + alpha * alpha * tan2).sqrt() - T::one()) * T::c(0.5)
}

/// Height-correlated Smith masking-shadowing.
#[inline]
pub fn smith_g<T: Real>(cos_i: T, cos_o: T, alpha: T) -> T {
    T::one() / (T::one() + smith_lambda(cos_i, alpha) + smith_lambda(cos_o, alpha))
}

/// Simplified Disney BRDF with an explicit Fresnel normal reflectance.
pub fn brdf_eval_with_f0<T: Real>(q: &BrdfQuery<T>, f0: T) -> Vec3<T> {
    let eps = T::c(1e-6);
    let cos_i = q.normal.dot(q.wi).max(eps);
    let cos_o = q.normal.dot(q.wo).max(eps);
    let h = (q.wi + q.wo).normalized();
    let cos_h = q.normal.dot(h);
    let cos_d = h.dot(q.wi);
    let alpha = q.roughness * q.roughness;
    let d = ggx_d(cos_h, alpha);
    let f = schlick(cos_d, f0);
    let g = smith_g(cos_i, cos_o, alpha);
    let spec = d * f * g / (T::c(4.0) * cos_i * cos_o).max(eps);
    q.albedo.scale(T::c(1.0 / PI)) + Vec3::splat(spec)
}

/// Simplified Disney BRDF with the fixed dielectric `F0 = 0.04`.
pub fn brdf_eval<T: Real>(q: &BrdfQuery<T>) -> Vec3<T> {
    brdf_eval_with_f0(q, T::c(F0))
}

/// Recorded BRDF over per-row shading state against fixed directions.
///
/// `albedo` is `N x 3`, `rough` is `N`, `normal` is `N x 3`; `wi`/`wo`
/// hold one fixed unit direction per row. Returns `N x 3` BRDF values.
pub fn brdf_op<T: Real>(
    tape: &mut Tape<T>,
    albedo: ValueId,
    rough: ValueId,
    normal: ValueId,
    wi: &[Vec3<T>],
    wo: &[Vec3<T>],
) -> ValueId {
    let n = wi.len();
    let eps = T::c(1e-6);
    debug_assert_eq!(tape.len_of(rough), n);
    // Fixed per-row quantities.
    let mut wi_rows = Vec::with_capacity(3 * n);
    let mut wo_rows = Vec::with_capacity(3 * n);
    let mut h_rows = Vec::with_capacity(3 * n);
    let mut fresnel = Vec::with_capacity(n);
    for s in 0..n {
        let h = (wi[s] + wo[s]).normalized();
        wi_rows.extend_from_slice(&wi[s].0);
        wo_rows.extend_from_slice(&wo[s].0);
        h_rows.extend_from_slice(&h.0);
        fresnel.push(schlick(h.dot(wi[s]), T::c(F0)));
    }
    let cos_i_raw = ops::dot_rows3_const(tape, normal, wi_rows);
    let cos_o_raw = ops::dot_rows3_const(tape, normal, wo_rows);
    let cos_h = ops::dot_rows3_const(tape, normal, h_rows);
    let cos_i = ops::clamp_min(tape, cos_i_raw, eps);
    let cos_o = ops::clamp_min(tape, cos_o_raw, eps);
    let alpha = ops::mul(tape, rough, rough);
    let a2 = ops::mul(tape, alpha, alpha);
    // D = a2 / (pi (cos_h^2 (a2 - 1) + 1)^2)
    let ch2 = ops::mul(tape, cos_h, cos_h);
    let a2m1 = ops::add_k(tape, a2, -T::one());
    let t0 = ops::mul(tape, ch2, a2m1);
    let t1 = ops::add_k(tape, t0, T::one());
    let t2 = ops::mul(tape, t1, t1);
    let t2pi = ops::scale(tape, t2, T::c(PI));
    let t2pi_safe = ops::clamp_min(tape, t2pi, T::c(1e-12));
    let d = ops::div(tape, a2, t2pi_safe);
    // Smith height-correlated G.
    let lam = |tape: &mut Tape<T>, cos: ValueId, a2: ValueId| -> ValueId {
        let c2 = ops::mul(tape, cos, cos);
        let c2s = ops::clamp_min(tape, c2, T::c(1e-12));
        let num = {
            let neg = ops::scale(tape, c2s, -T::one());
            ops::add_k(tape, neg, T::one())
        };
        let tan2 = ops::div(tape, num, c2s);
        let at = ops::mul(tape, a2, tan2);
        let at1 = ops::add_k(tape, at, T::one());
        let sq = ops::sqrt(tape, at1);
        let sqm1 = ops::add_k(tape, sq, -T::one());
        ops::scale(tape, sqm1, T::c(0.5))
    };
    let li = lam(tape, cos_i, a2);
    let lo = lam(tape, cos_o, a2);
    let lsum = ops::add(tape, li, lo);
    let denom_g = ops::add_k(tape, lsum, T::one());
    let ones = ops::constant(tape, vec![T::one(); n]);
    let g = ops::div(tape, ones, denom_g);
    // spec = D F G / max(4 cos_i cos_o, eps)
    let dg = ops::mul(tape, d, g);
    let dgf = ops::mul_const_slice(tape, dg, fresnel);
    let cio = ops::mul(tape, cos_i, cos_o);
    let cio4 = ops::scale(tape, cio, T::c(4.0));
    let cio4s = ops::clamp_min(tape, cio4, eps);
    let spec = ops::div(tape, dgf, cio4s);
    // f = albedo / pi + spec (broadcast over RGB).
    let diffuse = ops::scale(tape, albedo, T::c(1.0 / PI));
    ops::add_bcast(tape, diffuse, spec, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Grads, Tape};
    use crate::math::{RngKey, StreamTag};

    fn rng() -> StreamRng {
        RngKey(31).stream(StreamTag::Misc, 0, 0)
    }

    fn rand_unit(r: &mut StreamRng) -> Vec3<f64> {
        loop {
            let v = Vec3::new(
                r.next_f64() * 2.0 - 1.0,
                r.next_f64() * 2.0 - 1.0,
                r.next_f64() * 2.0 - 1.0,
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn sg_eval_single_lobe_cases() {
        let axis = Vec3::new(0.0, 0.0, 1.0);
        let env = SgEnvMap {
            lobes: vec![SgLobe {
                axis,
                sharpness: 7.0,
                amplitude: Vec3::new(2.0, 3.0, 4.0),
            }],
        };
        let at_axis = env.eval(axis);
        assert!((at_axis - Vec3::new(2.0, 3.0, 4.0)).norm() < 1e-12);
        let perp = env.eval(Vec3::new(1.0, 0.0, 0.0));
        let want = (-7.0f64).exp();
        assert!((perp - Vec3::new(2.0 * want, 3.0 * want, 4.0 * want)).norm() < 1e-12);
    }

    #[test]
    fn sg_mixture_is_sum_of_lobes() {
        let l1 = SgLobe {
            axis: Vec3::new(1.0, 0.0, 0.0),
            sharpness: 3.0,
            amplitude: Vec3::splat(1.5),
        };
        let l2 = SgLobe {
            axis: Vec3::new(0.0, 1.0, 0.0),
            sharpness: 9.0,
            amplitude: Vec3::new(0.2, 0.4, 0.8),
        };
        let mix = SgEnvMap {
            lobes: vec![l1, l2],
        };
        let a = SgEnvMap { lobes: vec![l1] };
        let b = SgEnvMap { lobes: vec![l2] };
        let mut r = rng();
        for _ in 0..32 {
            let d = rand_unit(&mut r);
            let want = a.eval(d) + b.eval(d);
            assert!((mix.eval(d) - want).norm() < 1e-12);
        }
    }

    #[test]
    fn rotation_equivariance_and_identity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let params = SgEnvParams::create(&mut store, "env.0", 16, &mut r);
        // Perturb so the env is anisotropic.
        for v in store.data_mut(params.amplitude).iter_mut().enumerate() {
            *v.1 += (v.0 as f64 * 0.37).sin() * 0.3;
        }
        let env = params.materialize(&store, 0.0);
        let rot0 = rotate_env(&env, 0.0);
        for (a, b) in env.lobes.iter().zip(&rot0.lobes) {
            assert_eq!(a.axis.0, b.axis.0);
        }
        let theta = 1.1;
        let rot = rotate_env(&env, theta);
        for _ in 0..32 {
            let d = rand_unit(&mut r);
            let lhs = rot.eval(d);
            let rhs = env.eval(d.rotate_z(-theta));
            assert!((lhs - rhs).norm() < 1e-12);
        }
        let third = 2.0 * PI / 3.0;
        let back = rotate_env(&rotate_env(&rotate_env(&env, third), third), third);
        for (a, b) in env.lobes.iter().zip(&back.lobes) {
            assert!((a.axis - b.axis).norm() < 1e-12);
        }
    }

    #[test]
    fn fresh_env_is_gray_and_unit_axes() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let params = SgEnvParams::create(&mut store, "env.0", SG_LOBES, &mut r);
        let env = params.materialize(&store, 0.0);
        assert_eq!(env.lobes.len(), SG_LOBES);
        for lobe in &env.lobes {
            assert!((lobe.axis.norm() - 1.0).abs() < 1e-9);
            assert!((lobe.sharpness - SG_INIT_SHARPNESS).abs() < 1e-6);
            for c in lobe.amplitude.0 {
                assert!((c - SG_INIT_AMPLITUDE).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sg_radiance_op_matches_fd() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let params = SgEnvParams::create(&mut store, "env.0", 5, &mut r);
        for (i, v) in store.data_mut(params.axis).iter_mut().enumerate() {
            *v += (i as f64 * 0.71).sin() * 0.4;
        }
        let dirs: Vec<Vec3<f64>> = (0..6).map(|_| rand_unit(&mut r)).collect();
        let probe: Vec<f64> = (0..18).map(|i| (i as f64 * 0.13).cos()).collect();
        let azimuth = 0.8;
        let run = |s: &ParamStore<f64>, grads: Option<&mut Grads<f64>>| -> f64 {
            let mut tape = Tape::new();
            let rad = sg_radiance_op(&mut tape, s, &params, dirs.clone(), azimuth);
            let weighted = ops::mul_const_slice(&mut tape, rad, probe.clone());
            let loss = ops::sum(&mut tape, weighted);
            let v = tape.val(loss)[0];
            if let Some(g) = grads {
                tape.backward(loss, s, g).unwrap();
            }
            v
        };
        let mut grads = Grads::zeros_like(&store);
        run(&store, Some(&mut grads));
        let report = gradcheck(&mut store, &grads, 1, |s| run(s, None));
        assert!(report.passes(1e-6), "sg gradcheck:\n{report}");
    }

    #[test]
    fn schlick_normal_incidence_is_f0() {
        assert!((schlick(1.0f64, 0.04) - 0.04).abs() < 1e-12);
        assert!(schlick(0.0f64, 0.04) > 0.99);
    }

    #[test]
    fn ggx_peak_value_matches_formula() {
        // r = 0.5 => alpha = 0.25, D(h=n) = 1/(pi alpha^2) = 16/pi.
        let d = ggx_d(1.0f64, 0.25);
        assert!((d - 16.0 / PI).abs() < 1e-9, "d = {d}");
    }

    #[test]
    fn zero_albedo_zero_f0_brdf_vanishes() {
        let mut r = rng();
        for _ in 0..64 {
            let n = rand_unit(&mut r);
            let mut wi = rand_unit(&mut r);
            let mut wo = rand_unit(&mut r);
            if wi.dot(n) < 0.0 {
                wi = -wi;
            }
            if wo.dot(n) < 0.0 {
                wo = -wo;
            }
            let q = BrdfQuery {
                wi,
                wo,
                normal: n,
                albedo: Vec3::zero(),
                roughness: 0.4,
            };
            let f = brdf_eval_with_f0(&q, 0.0);
            assert!(f.norm() < 1e-12);
        }
    }

    #[test]
    fn brdf_is_reciprocal() {
        let mut r = rng();
        for _ in 0..10_000 {
            let n = rand_unit(&mut r);
            let mut wi = rand_unit(&mut r);
            let mut wo = rand_unit(&mut r);
            if wi.dot(n) < 0.0 {
                wi = -wi;
            }
            if wo.dot(n) < 0.0 {
                wo = -wo;
            }
            let albedo = Vec3::new(0.7, 0.4, 0.2);
            let rough = 0.09 + 0.91 * r.next_f64();
            let fwd = brdf_eval(&BrdfQuery {
                wi,
                wo,
                normal: n,
                albedo,
                roughness: rough,
            });
            let rev = brdf_eval(&BrdfQuery {
                wi: wo,
                wo: wi,
                normal: n,
                albedo,
                roughness: rough,
            });
            assert!((fwd - rev).norm() < 1e-9);
        }
    }

    #[test]
    fn stratified_weights_integrate_the_sphere() {
        let mut r = rng();
        let dirs = stratified_sphere_dirs::<f64>(512, &mut r);
        assert_eq!(dirs.len(), 512);
        let total: f64 = dirs.iter().map(|d| d.weight).sum();
        assert!((total - 4.0 * PI).abs() < 0.02 * 4.0 * PI, "sum = {total}");
        // Cosine lobe over the +Z hemisphere integrates to pi.
        let up = Vec3::new(0.0, 0.0, 1.0);
        let cos_integral: f64 = dirs
            .iter()
            .filter(|d| d.dir.dot(up) > 0.0)
            .map(|d| d.weight * d.dir.dot(up))
            .sum();
        assert!(
            (cos_integral - PI).abs() < 0.05 * PI,
            "integral = {cos_integral}"
        );
    }

    #[test]
    fn importance_sampler_concentrates_on_bright_texel() {
        let (h, w) = (8usize, 16usize);
        let mut texels = vec![0.001f64; h * w * 3];
        let bright = (3 * w + 7) * 3;
        texels[bright] = 500.0;
        texels[bright + 1] = 500.0;
        texels[bright + 2] = 500.0;
        let env = PixelEnvMap::new(h, w, texels).unwrap();
        let mut r = rng();
        let dirs = importance_env_dirs(&env, 512, &mut r).unwrap();
        let target = latlong_dir::<f64>((3.5) / h as f64 * PI, (7.5) / w as f64 * 2.0 * PI);
        let near = dirs
            .iter()
            .filter(|d| d.dir.dot(target) > (0.97f64))
            .count();
        assert!(
            near as f64 >= 0.95 * dirs.len() as f64,
            "only {near}/{} near the bright texel",
            dirs.len()
        );
    }

    #[test]
    fn importance_sampler_rejects_black_env() {
        let env = PixelEnvMap::new(4, 8, vec![0.0; 4 * 8 * 3]).unwrap();
        let mut r = rng();
        assert!(matches!(
            importance_env_dirs(&env, 16, &mut r),
            Err(ShadingError::BlackEnvironment)
        ));
    }

    #[test]
    fn importance_weights_integrate_constant_env() {
        // For f == 1 the importance estimator must return 4 pi as well.
        let env = PixelEnvMap::new(8, 16, vec![1.0; 8 * 16 * 3]).unwrap();
        let mut r = rng();
        let dirs = importance_env_dirs::<f64>(&env, 2048, &mut r).unwrap();
        let total: f64 = dirs.iter().map(|d| d.weight).sum();
        assert!((total - 4.0 * PI).abs() < 0.05 * 4.0 * PI, "sum = {total}");
    }

    #[test]
    fn diffuse_furnace_recovers_albedo() {
        // Unoccluded uniform environment E with a pure diffuse surface:
        // integral of (a/pi) E cos = a E.
        let albedo = Vec3::new(0.6, 0.3, 0.8);
        let e_env = 2.5f64;
        let n = Vec3::new(0.0, 0.0, 1.0);
        let mut r = rng();
        let dirs = stratified_sphere_dirs::<f64>(512, &mut r);
        let mut c = Vec3::zero();
        for d in &dirs {
            let cos = d.dir.dot(n);
            if cos <= 0.0 {
                continue;
            }
            c = c + albedo.scale(1.0 / PI * e_env * cos * d.weight);
        }
        let want = albedo.scale(e_env);
        for ch in 0..3 {
            assert!(
                (c.0[ch] - want.0[ch]).abs() < 0.05 * want.0[ch],
                "ch {ch}: {} vs {}",
                c.0[ch],
                want.0[ch]
            );
        }
    }

    #[test]
    fn brdf_op_matches_raw_eval_and_fd() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng();
        let n_rows = 5usize;
        let mut wi = Vec::new();
        let mut wo = Vec::new();
        let mut normals = Vec::new();
        for _ in 0..n_rows {
            let n = rand_unit(&mut r);
            let mut a = rand_unit(&mut r);
            let mut b = rand_unit(&mut r);
            if a.dot(n) < 0.05 {
                a = (a - n * (a.dot(n) - 0.3)).normalized();
            }
            if b.dot(n) < 0.05 {
                b = (b - n * (b.dot(n) - 0.3)).normalized();
            }
            wi.push(a);
            wo.push(b);
            normals.push(n);
        }
        let albedo_id = store
            .register(
                "albedo",
                vec![n_rows, 3],
                LrGroup::Network,
                (0..n_rows * 3)
                    .map(|i| 0.2 + 0.05 * i as f64 % 0.7)
                    .collect(),
            )
            .unwrap();
        let rough_id = store
            .register(
                "rough",
                vec![n_rows],
                LrGroup::Network,
                (0..n_rows).map(|i| 0.15 + 0.12 * i as f64).collect(),
            )
            .unwrap();
        let normal_id = store
            .register(
                "normal_raw",
                vec![n_rows, 3],
                LrGroup::Network,
                normals.iter().flat_map(|n| n.0).collect(),
            )
            .unwrap();
        let probe: Vec<f64> = (0..n_rows * 3).map(|i| (i as f64 * 0.29).sin()).collect();
        let run = |s: &ParamStore<f64>, grads: Option<&mut Grads<f64>>| -> f64 {
            let mut tape = Tape::new();
            let albedo = ops::param_leaf(&mut tape, s, albedo_id);
            let rough = ops::param_leaf(&mut tape, s, rough_id);
            let nraw = ops::param_leaf(&mut tape, s, normal_id);
            let n = ops::normalize_rows3(&mut tape, nraw);
            let f = brdf_op(&mut tape, albedo, rough, n, &wi, &wo);
            let weighted = ops::mul_const_slice(&mut tape, f, probe.clone());
            let loss = ops::sum(&mut tape, weighted);
            let v = tape.val(loss)[0];
            if let Some(g) = grads {
                tape.backward(loss, s, g).unwrap();
            }
            v
        };
        // Op forward equals the raw evaluation.
        {
            let mut tape = Tape::new();
            let albedo = ops::param_leaf(&mut tape, &store, albedo_id);
            let rough = ops::param_leaf(&mut tape, &store, rough_id);
            let nraw = ops::param_leaf(&mut tape, &store, normal_id);
            let nn = ops::normalize_rows3(&mut tape, nraw);
            let f = brdf_op(&mut tape, albedo, rough, nn, &wi, &wo);
            let fv = tape.val(f);
            for s in 0..n_rows {
                let raw = brdf_eval(&BrdfQuery {
                    wi: wi[s],
                    wo: wo[s],
                    normal: normals[s],
                    albedo: Vec3::new(
                        store.data(albedo_id)[3 * s],
                        store.data(albedo_id)[3 * s + 1],
                        store.data(albedo_id)[3 * s + 2],
                    ),
                    roughness: store.data(rough_id)[s],
                });
                for c in 0..3 {
                    assert!(
                        (fv[3 * s + c] - raw.0[c]).abs() < 1e-9,
                        "row {s} ch {c}: {} vs {}",
                        fv[3 * s + c],
                        raw.0[c]
                    );
                }
            }
        }
        let mut grads = Grads::zeros_like(&store);
        run(&store, Some(&mut grads));
        let report = gradcheck(&mut store, &grads, 1, |s| run(s, None));
        assert!(report.passes(1e-5), "brdf gradcheck:\n{report}");
    }
}
