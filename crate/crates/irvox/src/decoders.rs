//! MLP decoder heads mapping interpolated appearance features (plus
//! frequency-encoded position or view direction) to view-dependent
//! radiance, shading normal, and BRDF parameters.
//!
//! All heads are two hidden layers of 128 channels with rectified-linear
//! activations. The radiance and BRDF heads squash their outputs through a
//! sigmoid; the normal head emits a raw 3-vector that callers normalize
//! (zero maps to +Z).

use rayon::prelude::*;

use crate::autodiff::{LrGroup, ParamId, ParamStore, Tape, ValueId};
use crate::math::{dot_fast, sigmoid, Real, StreamRng, Vec3};

/// Upper bound on the hidden width of the allocation-free apply path.
const MAX_WIDTH: usize = 256;

/// Frequency-encoding bands for positions and view directions.
pub const ENCODE_BANDS: usize = 2;

/// Hidden width of every decoder head.
pub const HIDDEN_CHANNELS: usize = 128;

/// Roughness floor keeping the microfacet distribution finite.
pub const ROUGHNESS_MIN: f64 = 0.09;

/// Chunk size for deterministic parallel reductions over samples.
const CHUNK: usize = 512;

/// Output squashing applied after the last linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutAct {
    Identity,
    Sigmoid,
}

/// Encoded length of a `d`-vector at `bands` frequency bands.
pub fn encoded_len(d: usize, bands: usize) -> usize {
    d * (1 + 2 * bands)
}

/// Writes `[v, sin(2^i pi v), cos(2^i pi v); i < bands]` per component.
pub fn freq_encode_into<T: Real>(v: &[T], bands: usize, out: &mut [T]) {
    let d = v.len();
    debug_assert_eq!(out.len(), encoded_len(d, bands));
    out[..d].copy_from_slice(v);
    let pi = T::c(std::f64::consts::PI);
    for i in 0..bands {
        let freq = T::c((1u64 << i) as f64) * pi;
        for (c, &x) in v.iter().enumerate() {
            let (s, co) = (freq * x).sin_cos();
            out[d + 2 * i * d + c] = s;
            out[d + (2 * i + 1) * d + c] = co;
        }
    }
}

/// Convenience: encode a batch of rows (width `d`) into a flat buffer.
pub fn freq_encode_batch<T: Real>(rows: &[T], d: usize, bands: usize) -> Vec<T> {
    let n = rows.len() / d;
    let w = encoded_len(d, bands);
    let mut out = vec![T::zero(); n * w];
    for r in 0..n {
        freq_encode_into(
            &rows[r * d..(r + 1) * d],
            bands,
            &mut out[r * w..(r + 1) * w],
        );
    }
    out
}

/// Frequency encoding as a recorded tape op (rows of width `d`).
pub fn freq_encode_op<T: Real>(tape: &mut Tape<T>, a: ValueId, d: usize, bands: usize) -> ValueId {
    let rows = tape.val(a).to_vec();
    let n = rows.len() / d;
    let w = encoded_len(d, bands);
    let out = freq_encode_batch(&rows, d, bands);
    let o = tape.alloc(out);
    tape.push(move |vals, _p, ctx| {
        if let Some(go) = ctx.v.take(o) {
            let x = vals.get(a);
            let pi = T::c(std::f64::consts::PI);
            ctx.v.accum(a, |ga| {
                for r in 0..n {
                    for c in 0..d {
                        let mut g = go[r * w + c];
                        for i in 0..bands {
                            let freq = T::c((1u64 << i) as f64) * pi;
                            let (s, co) = (freq * x[r * d + c]).sin_cos();
                            g += go[r * w + d + 2 * i * d + c] * freq * co;
                            g -= go[r * w + d + (2 * i + 1) * d + c] * freq * s;
                        }
                        ga[r * d + c] += g;
                    }
                }
            });
        }
    });
    o
}

/// One linear layer's parameter handles.
#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// A decoder head: input layout, layer stack, output activation.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub layers: Vec<Layer>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub out_act: OutAct,
}

impl MlpHead {
    /// Registers a fresh head with Kaiming-uniform initial weights.
    pub fn create<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_act: OutAct,
        rng: &mut StreamRng,
    ) -> Self {
        let dims = [in_dim, hidden, hidden, out_dim];
        let mut layers = Vec::new();
        for l in 0..3 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| T::c((rng.next_f64() * 2.0 - 1.0) * bound))
                .collect();
            let weight = store
                .register(
                    &format!("{prefix}.w{l}"),
                    vec![fan_out, fan_in],
                    LrGroup::Network,
                    w,
                )
                .expect("fresh name");
            let bias = store
                .register(
                    &format!("{prefix}.b{l}"),
                    vec![fan_out],
                    LrGroup::Network,
                    vec![T::zero(); fan_out],
                )
                .expect("fresh name");
            layers.push(Layer {
                weight,
                bias,
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        MlpHead {
            layers,
            in_dim,
            out_dim,
            out_act,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

#[inline]
fn layer_forward<T: Real>(
    w: &[T],
    b: &[T],
    (in_dim, out_dim): (usize, usize),
    x: &[T],
    relu: bool,
    out: &mut [T],
) {
    let x = &x[..in_dim];
    for o in 0..out_dim {
        let acc = b[o] + dot_fast(&w[o * in_dim..(o + 1) * in_dim], x);
        out[o] = if relu { acc.max(T::zero()) } else { acc };
    }
}

/// Plain forward pass for one input row (no recording, no allocation).
pub fn mlp_apply<T: Real>(store: &ParamStore<T>, head: &MlpHead, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), head.in_dim);
    debug_assert!(head.layers.iter().all(|l| l.out_dim <= MAX_WIDTH));
    let mut buf_a = [T::zero(); MAX_WIDTH];
    let mut buf_b = [T::zero(); MAX_WIDTH];
    let mut cur: &[T] = x;
    for (i, layer) in head.layers.iter().enumerate() {
        let relu = i + 1 < head.layers.len();
        let dst = if i % 2 == 0 { &mut buf_a } else { &mut buf_b };
        layer_forward(
            store.data(layer.weight),
            store.data(layer.bias),
            (layer.in_dim, layer.out_dim),
            cur,
            relu,
            &mut dst[..layer.out_dim],
        );
        cur = unsafe { std::slice::from_raw_parts(dst.as_ptr(), layer.out_dim) };
    }
    let last = head.out_dim;
    out.copy_from_slice(&cur[..last]);
    if head.out_act == OutAct::Sigmoid {
        for v in out.iter_mut() {
            *v = sigmoid(*v);
        }
    }
}

/// Batched forward over `n` rows without recording (parallel).
pub fn mlp_apply_batch<T: Real>(
    store: &ParamStore<T>,
    head: &MlpHead,
    input: &[T],
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * head.out_dim];
    let in_dim = head.in_dim;
    let od = head.out_dim;
    out.par_chunks_mut(CHUNK * od)
        .zip(input.par_chunks(CHUNK * in_dim))
        .for_each(|(oc, ic)| {
            let rows = ic.len() / in_dim;
            for r in 0..rows {
                mlp_apply(
                    store,
                    head,
                    &ic[r * in_dim..(r + 1) * in_dim],
                    &mut oc[r * od..(r + 1) * od],
                );
            }
        });
    out
}

/// Recorded batched MLP forward. Saves hidden activations for backward;
/// weight gradients accumulate chunk-ordered so results do not depend on
/// the worker count.
pub fn mlp_op<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    head: &MlpHead,
    input: ValueId,
    n: usize,
) -> ValueId {
    let in_dim = head.in_dim;
    debug_assert_eq!(tape.len_of(input), n * in_dim);
    let l = &head.layers;
    let dims: Vec<(usize, usize)> = l.iter().map(|l| (l.in_dim, l.out_dim)).collect();
    let (h1d, h2d, od) = (dims[0].1, dims[1].1, dims[2].1);
    let x = tape.val(input);
    let mut h1 = vec![T::zero(); n * h1d];
    let mut h2 = vec![T::zero(); n * h2d];
    let mut out = vec![T::zero(); n * od];

    {
        let (w0, b0) = (params.data(l[0].weight), params.data(l[0].bias));
        let (w1, b1) = (params.data(l[1].weight), params.data(l[1].bias));
        let (w2, b2) = (params.data(l[2].weight), params.data(l[2].bias));
        let out_act = head.out_act;
        h1.par_chunks_mut(CHUNK * h1d)
            .zip(h2.par_chunks_mut(CHUNK * h2d))
            .zip(out.par_chunks_mut(CHUNK * od))
            .zip(x.par_chunks(CHUNK * in_dim))
            .for_each(|(((h1c, h2c), oc), xc)| {
                let rows = xc.len() / in_dim;
                for r in 0..rows {
                    layer_forward(
                        w0,
                        b0,
                        dims[0],
                        &xc[r * in_dim..(r + 1) * in_dim],
                        true,
                        &mut h1c[r * h1d..(r + 1) * h1d],
                    );
                    layer_forward(
                        w1,
                        b1,
                        dims[1],
                        &h1c[r * h1d..(r + 1) * h1d],
                        true,
                        &mut h2c[r * h2d..(r + 1) * h2d],
                    );
                    layer_forward(
                        w2,
                        b2,
                        dims[2],
                        &h2c[r * h2d..(r + 1) * h2d],
                        false,
                        &mut oc[r * od..(r + 1) * od],
                    );
                    if out_act == OutAct::Sigmoid {
                        for v in &mut oc[r * od..(r + 1) * od] {
                            *v = sigmoid(*v);
                        }
                    }
                }
            });
    }

    let o = tape.alloc(out);
    let head = head.clone();
    tape.push(move |vals, params, ctx| {
        let go = match ctx.v.take(o) {
            Some(g) => g,
            None => return,
        };
        let x = vals.get(input);
        let y = vals.get(o);
        let l = &head.layers;
        let (w0, w1, w2) = (
            params.data(l[0].weight),
            params.data(l[1].weight),
            params.data(l[2].weight),
        );
        let out_act = head.out_act;

        struct ChunkGrads<T> {
            dw: [Vec<T>; 3],
            db: [Vec<T>; 3],
        }

        let n_chunks = n.div_ceil(CHUNK);
        let mut dx = vec![T::zero(); n * in_dim];
        let results: Vec<ChunkGrads<T>> = dx
            .par_chunks_mut(CHUNK * in_dim)
            .enumerate()
            .map(|(ci, dxc)| {
                let lo = ci * CHUNK;
                let hi = ((ci + 1) * CHUNK).min(n);
                let mut cg = ChunkGrads {
                    dw: [
                        vec![T::zero(); w0.len()],
                        vec![T::zero(); w1.len()],
                        vec![T::zero(); w2.len()],
                    ],
                    db: [
                        vec![T::zero(); h1d],
                        vec![T::zero(); h2d],
                        vec![T::zero(); od],
                    ],
                };
                let mut dz2 = vec![T::zero(); od];
                let mut dh2 = vec![T::zero(); h2d];
                let mut dh1 = vec![T::zero(); h1d];
                for r in lo..hi {
                    // Output layer.
                    for c in 0..od {
                        let g = go[r * od + c];
                        dz2[c] = match out_act {
                            OutAct::Sigmoid => {
                                let yv = y[r * od + c];
                                g * yv * (T::one() - yv)
                            }
                            OutAct::Identity => g,
                        };
                    }
                    // Back-propagate as row-major rank-1 updates: for each
                    // output channel, one axpy into the weight row and one
                    // into the downstream adjoint.
                    let h2r = &h2[r * h2d..(r + 1) * h2d];
                    dh2.iter_mut().for_each(|v| *v = T::zero());
                    for c in 0..od {
                        let d = dz2[c];
                        if d == T::zero() {
                            continue;
                        }
                        cg.db[2][c] += d;
                        crate::math::axpy_fast(d, h2r, &mut cg.dw[2][c * h2d..(c + 1) * h2d]);
                        crate::math::axpy_fast(d, &w2[c * h2d..(c + 1) * h2d], &mut dh2);
                    }
                    for (v, h) in dh2.iter_mut().zip(h2r) {
                        if *h <= T::zero() {
                            *v = T::zero();
                        }
                    }
                    // Hidden layer 2.
                    let h1r = &h1[r * h1d..(r + 1) * h1d];
                    dh1.iter_mut().for_each(|v| *v = T::zero());
                    for c in 0..h2d {
                        let d = dh2[c];
                        if d == T::zero() {
                            continue;
                        }
                        cg.db[1][c] += d;
                        crate::math::axpy_fast(d, h1r, &mut cg.dw[1][c * h1d..(c + 1) * h1d]);
                        crate::math::axpy_fast(d, &w1[c * h1d..(c + 1) * h1d], &mut dh1);
                    }
                    for (v, h) in dh1.iter_mut().zip(h1r) {
                        if *h <= T::zero() {
                            *v = T::zero();
                        }
                    }
                    // Input layer.
                    let xr = &x[r * in_dim..(r + 1) * in_dim];
                    let dxr = &mut dxc[(r - lo) * in_dim..(r - lo + 1) * in_dim];
                    for c in 0..h1d {
                        let d = dh1[c];
                        if d == T::zero() {
                            continue;
                        }
                        cg.db[0][c] += d;
                        crate::math::axpy_fast(d, xr, &mut cg.dw[0][c * in_dim..(c + 1) * in_dim]);
                        crate::math::axpy_fast(d, &w0[c * in_dim..(c + 1) * in_dim], dxr);
                    }
                }
                cg
            })
            .collect();
        debug_assert_eq!(results.len(), n_chunks);
        // Chunk-ordered merge keeps gradients bitwise stable.
        for li in 0..3 {
            let (wid, bid) = (l[li].weight, l[li].bias);
            {
                let buf = ctx.p.buf_mut(wid);
                for cg in &results {
                    for (b, v) in buf.iter_mut().zip(&cg.dw[li]) {
                        *b += *v;
                    }
                }
            }
            {
                let buf = ctx.p.buf_mut(bid);
                for cg in &results {
                    for (b, v) in buf.iter_mut().zip(&cg.db[li]) {
                        *b += *v;
                    }
                }
            }
        }
        ctx.v.accum(input, |ga| {
            for (a, b) in ga.iter_mut().zip(&dx) {
                *a += *b;
            }
        });
    });
    o
}

/// Decoder heads plus their declared input layouts.
#[derive(Clone, Debug)]
pub struct DecoderSet {
    pub radiance: MlpHead,
    pub normal: MlpHead,
    pub brdf: MlpHead,
    pub feature_dim: usize,
    pub bands: usize,
}

impl DecoderSet {
    /// Radiance: `[feature, enc(view dir)] -> RGB` (sigmoid).
    /// Normal: `[feature, enc(position)] -> raw 3-vector`.
    /// BRDF: `[feature, enc(position)] -> (albedo RGB, roughness)` (sigmoid,
    /// roughness remapped to `[ROUGHNESS_MIN, 1]`).
    pub fn create<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        hidden: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let bands = ENCODE_BANDS;
        let enc = encoded_len(3, bands);
        DecoderSet {
            radiance: MlpHead::create(
                store,
                "net.radiance",
                feature_dim + enc,
                hidden,
                3,
                OutAct::Sigmoid,
                rng,
            ),
            normal: MlpHead::create(
                store,
                "net.normal",
                feature_dim + enc,
                hidden,
                3,
                OutAct::Identity,
                rng,
            ),
            brdf: MlpHead::create(
                store,
                "net.brdf",
                feature_dim + enc,
                hidden,
                4,
                OutAct::Sigmoid,
                rng,
            ),
            feature_dim,
            bands,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.radiance.param_ids();
        ids.extend(self.normal.param_ids());
        ids.extend(self.brdf.param_ids());
        ids
    }

    /// Raw radiance decode for one sample.
    pub fn decode_radiance<T: Real>(
        &self,
        store: &ParamStore<T>,
        feature: &[T],
        view_dir: Vec3<T>,
    ) -> Vec3<T> {
        let mut input = feature.to_vec();
        let mut enc = vec![T::zero(); encoded_len(3, self.bands)];
        freq_encode_into(&view_dir.0, self.bands, &mut enc);
        input.extend_from_slice(&enc);
        let mut out = [T::zero(); 3];
        mlp_apply(store, &self.radiance, &input, &mut out);
        Vec3(out)
    }

    /// Raw normal decode (normalized, +Z fallback).
    pub fn decode_normal<T: Real>(
        &self,
        store: &ParamStore<T>,
        feature: &[T],
        position: Vec3<T>,
    ) -> Vec3<T> {
        let mut input = feature.to_vec();
        let mut enc = vec![T::zero(); encoded_len(3, self.bands)];
        freq_encode_into(&position.0, self.bands, &mut enc);
        input.extend_from_slice(&enc);
        let mut out = [T::zero(); 3];
        mlp_apply(store, &self.normal, &input, &mut out);
        Vec3(out).normalized_or(Vec3::new(T::zero(), T::zero(), T::one()))
    }

    /// Raw BRDF decode: albedo in `(0,1)^3`, roughness in `[r_min, 1]`.
    pub fn decode_brdf<T: Real>(
        &self,
        store: &ParamStore<T>,
        feature: &[T],
        position: Vec3<T>,
    ) -> (Vec3<T>, T) {
        let mut input = feature.to_vec();
        let mut enc = vec![T::zero(); encoded_len(3, self.bands)];
        freq_encode_into(&position.0, self.bands, &mut enc);
        input.extend_from_slice(&enc);
        let mut out = [T::zero(); 4];
        mlp_apply(store, &self.brdf, &input, &mut out);
        let rmin = T::c(ROUGHNESS_MIN);
        (
            Vec3([out[0], out[1], out[2]]),
            rmin + (T::one() - rmin) * out[3],
        )
    }
}

/// Decoded shading quantities at a point.
#[derive(Clone, Debug)]
pub struct ShadingAttributes<T> {
    pub radiance: Vec3<T>,
    pub normal: Vec3<T>,
    pub albedo: Vec3<T>,
    pub roughness: T,
}
