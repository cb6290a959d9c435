//! Scalar abstraction, small vector types, and the counter-based RNG used
//! for deterministic sampling.
//!
//! The whole differentiable pipeline is generic over [`Real`] so that
//! training runs in `f32` while gradient checks instantiate the exact same
//! code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point scalar the engine is generic over (`f32` or `f64`).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Lifts an `f64` constant into the scalar type.
    #[inline(always)]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant out of range")
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A 3-component vector over any [`Real`] scalar.
#[derive(Clone, Copy, PartialEq)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Debug> Debug for Vec3<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:?}, {:?}, {:?})", self.0[0], self.0[1], self.0[2])
    }
}

impl<T: Real> Vec3<T> {
    #[inline(always)]
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3([x, y, z])
    }

    #[inline(always)]
    pub fn splat(v: T) -> Self {
        Vec3([v, v, v])
    }

    #[inline(always)]
    pub fn zero() -> Self {
        Self::splat(T::zero())
    }

    #[inline(always)]
    pub fn x(&self) -> T {
        self.0[0]
    }

    #[inline(always)]
    pub fn y(&self) -> T {
        self.0[1]
    }

    #[inline(always)]
    pub fn z(&self) -> T {
        self.0[2]
    }

    #[inline(always)]
    pub fn dot(self, o: Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline(always)]
    pub fn cross(self, o: Self) -> Self {
        Vec3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    #[inline(always)]
    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    /// Unit vector in the same direction; `fallback` when the norm is zero.
    #[inline]
    pub fn normalized_or(self, fallback: Self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            self / n
        } else {
            fallback
        }
    }

    #[inline]
    pub fn normalized(self) -> Self {
        self.normalized_or(Vec3::new(T::zero(), T::zero(), T::one()))
    }

    #[inline(always)]
    pub fn scale(self, s: T) -> Self {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    #[inline(always)]
    pub fn mul_ew(self, o: Self) -> Self {
        Vec3([self.0[0] * o.0[0], self.0[1] * o.0[1], self.0[2] * o.0[2]])
    }

    #[inline(always)]
    pub fn min_ew(self, o: Self) -> Self {
        Vec3([
            self.0[0].min(o.0[0]),
            self.0[1].min(o.0[1]),
            self.0[2].min(o.0[2]),
        ])
    }

    #[inline(always)]
    pub fn max_ew(self, o: Self) -> Self {
        Vec3([
            self.0[0].max(o.0[0]),
            self.0[1].max(o.0[1]),
            self.0[2].max(o.0[2]),
        ])
    }

    #[inline(always)]
    pub fn max_component(self) -> T {
        self.0[0].max(self.0[1]).max(self.0[2])
    }

    pub fn map<U: Real>(self, f: impl Fn(T) -> U) -> Vec3<U> {
        Vec3([f(self.0[0]), f(self.0[1]), f(self.0[2])])
    }

    /// Rotation about the +Z axis by `angle` radians.
    pub fn rotate_z(self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Vec3([
            c * self.0[0] - s * self.0[1],
            s * self.0[0] + c * self.0[1],
            self.0[2],
        ])
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, o: Self) -> Self {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn div(self, s: T) -> Self {
        Vec3([self.0[0] / s, self.0[1] / s, self.0[2] / s])
    }
}

/// Axis-aligned bounding box in world space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Self {
        Aabb { min, max }
    }

    /// The canonical `[-1, 1]^3` scene box.
    pub fn unit() -> Self {
        Aabb {
            min: Vec3::splat(-T::one()),
            max: Vec3::splat(T::one()),
        }
    }

    #[inline(always)]
    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> T {
        self.extent().norm()
    }

    pub fn is_valid(&self) -> bool {
        let e = self.extent();
        e.x() > T::zero() && e.y() > T::zero() && e.z() > T::zero()
    }

    #[inline(always)]
    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x() >= self.min.x()
            && p.x() <= self.max.x()
            && p.y() >= self.min.y()
            && p.y() <= self.max.y()
            && p.z() >= self.min.z()
            && p.z() <= self.max.z()
    }

    /// Ray/box intersection. Returns the `(t_enter, t_exit)` parameter
    /// interval clipped to `t >= t_min`, or `None` when the ray misses.
    pub fn intersect(&self, origin: Vec3<T>, dir: Vec3<T>, t_min: T) -> Option<(T, T)> {
        let mut t0 = t_min;
        let mut t1 = T::infinity();
        for a in 0..3 {
            let inv = T::one() / dir.0[a];
            let mut near = (self.min.0[a] - origin.0[a]) * inv;
            let mut far = (self.max.0[a] - origin.0[a]) * inv;
            if inv < T::zero() {
                std::mem::swap(&mut near, &mut far);
            }
            if near.is_nan() || far.is_nan() {
                // Direction component is exactly zero and origin is on a
                // slab boundary; treat as inside.
                continue;
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Dot product with sixteen independent accumulators so the compiler can
/// vectorize (order fixed, results deterministic per build).
#[inline(always)]
pub fn dot_fast<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 16;
    let mut acc = [T::zero(); 16];
    for c in 0..chunks {
        let i = c * 16;
        let (av, bv) = (&a[i..i + 16], &b[i..i + 16]);
        for l in 0..16 {
            acc[l] = av[l].mul_add(bv[l], acc[l]);
        }
    }
    let mut i = chunks * 16;
    // Vector-width cascade for the remainder keeps tails off the scalar
    // dependency chain.
    if n - i >= 8 {
        for l in 0..8 {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
        i += 8;
    }
    if n - i >= 4 {
        for l in 0..4 {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
        i += 4;
    }
    let mut pair = [T::zero(); 8];
    for l in 0..8 {
        pair[l] = acc[l] + acc[l + 8];
    }
    let mut s =
        ((pair[0] + pair[1]) + (pair[2] + pair[3])) + ((pair[4] + pair[5]) + (pair[6] + pair[7]));
    while i < n {
        s = a[i].mul_add(b[i], s);
        i += 1;
    }
    s
}

/// `out[i] += k * x[i]` over slices (vectorizes trivially).
#[inline]
pub fn axpy_fast<T: Real>(k: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.mul_add(k, *o);
    }
}

/// Numerically stable `ln(1 + exp(x))`.
#[inline(always)]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], i.e. the logistic sigmoid.
#[inline(always)]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// --- Deterministic counter-based RNG ------------------------------------
//
// Every random decision in the engine is drawn from a stream keyed by
// (seed, purpose, pixel/item id, iteration). Streams are stateless hashes
// of the key plus a counter, so parallel and resumed runs reproduce the
// exact same numbers.

#[inline(always)]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags keep unrelated random decisions decorrelated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    RaySelect,
    Stratify,
    SecondaryDir,
    SmoothOffset,
    Init,
    Misc,
}

impl StreamTag {
    fn id(self) -> u64 {
        match self {
            StreamTag::RaySelect => 0x01,
            StreamTag::Stratify => 0x02,
            StreamTag::SecondaryDir => 0x03,
            StreamTag::SmoothOffset => 0x04,
            StreamTag::Init => 0x05,
            StreamTag::Misc => 0x06,
        }
    }
}

/// Root key for a run; derive per-item streams from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngKey(pub u64);

impl RngKey {
    pub fn stream(self, tag: StreamTag, item: u64, iter: u64) -> StreamRng {
        let mut s = splitmix64(self.0 ^ 0xa076_1d64_78bd_642f);
        s = splitmix64(s ^ tag.id().wrapping_mul(0xe703_7ed1_a0b4_28db));
        s = splitmix64(s ^ item.wrapping_mul(0x8ebc_6af0_9c88_c6e3));
        s = splitmix64(s ^ iter.wrapping_mul(0x5899_65cc_7537_4cc3));
        StreamRng { state: s, ctr: 0 }
    }
}

/// One independent random stream (counter mode).
#[derive(Clone, Debug)]
pub struct StreamRng {
    state: u64,
    ctr: u64,
}

impl StreamRng {
    #[inline(always)]
    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.state ^ self.ctr.wrapping_mul(0xd6e8_feb8_6659_fd93));
        self.ctr += 1;
        v
    }

    /// Uniform in `[0, 1)`.
    #[inline(always)]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline(always)]
    pub fn next_real<T: Real>(&mut self) -> T {
        T::c(self.next_f64())
    }

    /// Uniform integer in `[0, n)`.
    #[inline(always)]
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-12);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aabb_intersect_hits_and_misses() {
        let bb = Aabb::<f64>::unit();
        let (t0, t1) = bb
            .intersect(Vec3::new(0.0, 0.0, -3.0), Vec3::new(0.0, 0.0, 1.0), 0.0)
            .unwrap();
        assert!((t0 - 2.0).abs() < 1e-12);
        assert!((t1 - 4.0).abs() < 1e-12);
        assert!(bb
            .intersect(Vec3::new(0.0, 5.0, -3.0), Vec3::new(0.0, 0.0, 1.0), 0.0)
            .is_none());
    }

    #[test]
    fn aabb_intersect_axis_parallel_ray_on_face() {
        let bb = Aabb::<f64>::unit();
        // Ray sliding exactly along the x = 1 face.
        let hit = bb.intersect(Vec3::new(1.0, 0.0, -3.0), Vec3::new(0.0, 0.0, 1.0), 0.0);
        assert!(hit.is_some());
    }

    #[test]
    fn softplus_matches_reference() {
        for &x in &[-30.0f64, -5.0, -0.5, 0.0, 0.5, 5.0, 30.0] {
            let want = (1.0 + x.exp()).ln();
            let got = softplus(x);
            if want.is_finite() {
                assert!((got - want).abs() < 1e-12, "x={x}");
            }
            assert!(got >= 0.0);
        }
        // Large input must not overflow.
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let key = RngKey(42);
        let a: Vec<u64> = (0..8)
            .map(|_| 0)
            .scan(key.stream(StreamTag::Stratify, 7, 3), |r, _| {
                Some(r.next_u64())
            })
            .collect();
        let b: Vec<u64> = (0..8)
            .map(|_| 0)
            .scan(key.stream(StreamTag::Stratify, 7, 3), |r, _| {
                Some(r.next_u64())
            })
            .collect();
        assert_eq!(a, b);
        let c = key.stream(StreamTag::Stratify, 8, 3).next_u64();
        assert_ne!(a[0], c);
    }

    #[test]
    fn rng_uniform_mean_is_sane() {
        let mut r = RngKey(1).stream(StreamTag::Misc, 0, 0);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| r.next_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean={mean}");
    }

    #[test]
    fn rotate_z_composes_to_identity() {
        let v = Vec3::new(0.3f64, -0.7, 0.2);
        let third = 2.0 * std::f64::consts::PI / 3.0;
        let w = v.rotate_z(third).rotate_z(third).rotate_z(third);
        assert!((v - w).norm() < 1e-12);
    }
}
