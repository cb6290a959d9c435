//! Reverse-mode automatic differentiation over batched buffers, the named
//! parameter registry, the Adam optimizer, and the finite-difference
//! checking harness.
//!
//! The tape records coarse, batch-level operations (one node per kernel
//! invocation, not per scalar). Each node owns a backward closure that
//! pulls the adjoint of its outputs and scatters into the adjoints of its
//! inputs and into parameter gradient buffers. Nodes run exactly once, in
//! reverse recording order.
//!
//! Detachment is structural: code that must not propagate gradients either
//! reads plain values (never recording) or routes through [`ops::detach`].

use std::collections::HashMap;
use std::ops::Range;

use crate::math::{sigmoid, softplus, Real};

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("backward called without a recorded forward pass")]
    EmptyTape,
    #[error("loss value must be a scalar, got length {0}")]
    NotScalar(usize),
    #[error("unknown value id {0}")]
    BadValue(usize),
    #[error("parameter name already registered: {0}")]
    DuplicateParam(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    /// Tensor factors (vectors, matrices, basis, light vectors).
    Grid,
    /// MLP weights and spherical-Gaussian lobe parameters.
    Network,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub u32);

pub struct ParamEntry<T> {
    pub name: String,
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub group: LrGroup,
}

/// Registry owning every trainable tensor exactly once, addressed by name.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        group: LrGroup,
        data: Vec<T>,
    ) -> Result<ParamId, AdError> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.by_name.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len() as u32);
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            data,
            shape,
            group,
        });
        Ok(id)
    }

    #[inline(always)]
    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0 as usize].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0 as usize].data
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0 as usize]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0 as usize].shape
    }

    /// Swaps in new contents (used by coarse-to-fine upsampling).
    pub fn replace(&mut self, id: ParamId, shape: Vec<usize>, data: Vec<T>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let e = &mut self.entries[id.0 as usize];
        e.shape = shape;
        e.data = data;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len() as u32).map(ParamId)
    }

    /// Total scalar count over all parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
pub struct Grads<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            bufs: store
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.data.len()])
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for b in &mut self.bufs {
            for v in b.iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// Resizes one buffer after its parameter changed shape.
    pub fn resize_for(&mut self, id: ParamId, len: usize) {
        self.bufs[id.0 as usize] = vec![T::zero(); len];
    }

    #[inline(always)]
    pub fn buf(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0 as usize]
    }

    #[inline(always)]
    pub fn buf_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.bufs[id.0 as usize]
    }

    /// Moves a buffer out forouter-loop accumulation; pair with
    /// [`Grads::put_buf`].
    pub fn take_buf(&mut self, id: ParamId) -> Vec<T> {
        std::mem::take(&mut self.bufs[id.0 as usize])
    }

    pub fn put_buf(&mut self, id: ParamId, buf: Vec<T>) {
        self.bufs[id.0 as usize] = buf;
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Handle to a value stored on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) u32);

/// Read-only view of forward values during backward.
pub struct TapeVals<T> {
    vals: Vec<Vec<T>>,
}

impl<T: Real> TapeVals<T> {
    #[inline(always)]
    pub fn get(&self, id: ValueId) -> &[T] {
        &self.vals[id.0 as usize]
    }
}

/// Adjoint buffers for tape values during backward.
pub struct GradStore<T> {
    vgrads: Vec<Option<Vec<T>>>,
    lens: Vec<u32>,
}

impl<T: Real> GradStore<T> {
    /// Removes and returns the adjoint of `id`; `None` means the value does
    /// not influence the loss.
    pub fn take(&mut self, id: ValueId) -> Option<Vec<T>> {
        self.vgrads[id.0 as usize].take()
    }

    /// Accumulates into the adjoint of `id`, allocating zeros on first use.
    pub fn accum(&mut self, id: ValueId, f: impl FnOnce(&mut [T])) {
        let slot = &mut self.vgrads[id.0 as usize];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.lens[id.0 as usize] as usize]);
        }
        f(slot.as_mut().unwrap());
    }
}

/// Mutable backward context handed to node closures.
pub struct BackCtx<'a, T> {
    pub v: &'a mut GradStore<T>,
    pub p: &'a mut Grads<T>,
}

type BackwardFn<T> = Box<dyn FnOnce(&TapeVals<T>, &ParamStore<T>, &mut BackCtx<T>) + Send>;

/// Records batched operations for one forward pass.
pub struct Tape<T> {
    vals: Vec<Vec<T>>,
    nodes: Vec<BackwardFn<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Stores a buffer and returns its handle. Plain allocation records no
    /// node, so constants created this way block gradient flow.
    pub fn alloc(&mut self, data: Vec<T>) -> ValueId {
        let id = ValueId(self.vals.len() as u32);
        self.vals.push(data);
        id
    }

    #[inline(always)]
    pub fn val(&self, id: ValueId) -> &[T] {
        &self.vals[id.0 as usize]
    }

    pub fn len_of(&self, id: ValueId) -> usize {
        self.vals[id.0 as usize].len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Records a backward closure for the most recently produced outputs.
    pub fn push(
        &mut self,
        node: impl FnOnce(&TapeVals<T>, &ParamStore<T>, &mut BackCtx<T>) + Send + 'static,
    ) {
        self.nodes.push(Box::new(node));
    }

    /// Runs the backward pass from a scalar loss, accumulating parameter
    /// gradients into `pgrads`. Consumes the tape.
    pub fn backward(
        self,
        loss: ValueId,
        params: &ParamStore<T>,
        pgrads: &mut Grads<T>,
    ) -> Result<(), AdError> {
        if self.nodes.is_empty() {
            return Err(AdError::EmptyTape);
        }
        let idx = loss.0 as usize;
        if idx >= self.vals.len() {
            return Err(AdError::BadValue(idx));
        }
        if self.vals[idx].len() != 1 {
            return Err(AdError::NotScalar(self.vals[idx].len()));
        }
        let lens: Vec<u32> = self.vals.iter().map(|v| v.len() as u32).collect();
        let view = TapeVals { vals: self.vals };
        let mut gstore = GradStore {
            vgrads: vec![None; view.vals.len()],
            lens,
        };
        gstore.vgrads[idx] = Some(vec![T::one()]);
        let mut ctx = BackCtx {
            v: &mut gstore,
            p: pgrads,
        };
        for node in self.nodes.into_iter().rev() {
            node(&view, params, &mut ctx);
        }
        Ok(())
    }
}

/// Batched tape operations shared across the engine.
pub mod ops {
    use super::*;

    /// Wraps fixed data as a tape value (no gradient flows in).
    pub fn constant<T: Real>(tape: &mut Tape<T>, data: Vec<T>) -> ValueId {
        tape.alloc(data)
    }

    /// Copies a value, severing gradient flow.
    pub fn detach<T: Real>(tape: &mut Tape<T>, a: ValueId) -> ValueId {
        let data = tape.val(a).to_vec();
        tape.alloc(data)
    }

    fn unary<T: Real>(
        tape: &mut Tape<T>,
        a: ValueId,
        fwd: impl Fn(T) -> T,
        dfdx: impl Fn(T, T) -> T + Send + 'static,
    ) -> ValueId {
        let out: Vec<T> = tape.val(a).iter().map(|&x| fwd(x)).collect();
        let o = tape.alloc(out);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let x = vals.get(a);
                let y = vals.get(o);
                ctx.v.accum(a, |ga| {
                    for i in 0..go.len() {
                        ga[i] += go[i] * dfdx(x[i], y[i]);
                    }
                });
            }
        });
        o
    }

    fn binary<T: Real>(
        tape: &mut Tape<T>,
        a: ValueId,
        b: ValueId,
        fwd: impl Fn(T, T) -> T,
        dfda: impl Fn(T, T) -> T + Send + 'static,
        dfdb: impl Fn(T, T) -> T + Send + 'static,
    ) -> ValueId {
        let (xa, xb) = (tape.val(a), tape.val(b));
        assert_eq!(xa.len(), xb.len());
        let out: Vec<T> = xa.iter().zip(xb).map(|(&x, &y)| fwd(x, y)).collect();
        let o = tape.alloc(out);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let (xa, xb) = (vals.get(a), vals.get(b));
                ctx.v.accum(a, |ga| {
                    for i in 0..go.len() {
                        ga[i] += go[i] * dfda(xa[i], xb[i]);
                    }
                });
                ctx.v.accum(b, |gb| {
                    for i in 0..go.len() {
                        gb[i] += go[i] * dfdb(xa[i], xb[i]);
                    }
                });
            }
        });
        o
    }

    pub fn add<T: Real>(tape: &mut Tape<T>, a: ValueId, b: ValueId) -> ValueId {
        binary(tape, a, b, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub<T: Real>(tape: &mut Tape<T>, a: ValueId, b: ValueId) -> ValueId {
        binary(tape, a, b, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul<T: Real>(tape: &mut Tape<T>, a: ValueId, b: ValueId) -> ValueId {
        binary(tape, a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div<T: Real>(tape: &mut Tape<T>, a: ValueId, b: ValueId) -> ValueId {
        binary(
            tape,
            a,
            b,
            |x, y| x / y,
            |_, y| T::one() / y,
            |x, y| -x / (y * y),
        )
    }

    /// Component-wise maximum; ties route the gradient to `a`.
    pub fn max_ew<T: Real>(tape: &mut Tape<T>, a: ValueId, b: ValueId) -> ValueId {
        binary(
            tape,
            a,
            b,
            |x, y| x.max(y),
            |x, y| if x >= y { T::one() } else { T::zero() },
            |x, y| if x >= y { T::zero() } else { T::one() },
        )
    }

    pub fn scale<T: Real>(tape: &mut Tape<T>, a: ValueId, k: T) -> ValueId {
        unary(tape, a, |x| x * k, move |_, _| k)
    }

    pub fn add_k<T: Real>(tape: &mut Tape<T>, a: ValueId, k: T) -> ValueId {
        unary(tape, a, |x| x + k, |_, _| T::one())
    }

    pub fn relu<T: Real>(tape: &mut Tape<T>, a: ValueId) -> ValueId {
        unary(
            tape,
            a,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `max(x, k)`; gradient is zero on the clamped side.
    pub fn clamp_min<T: Real>(tape: &mut Tape<T>, a: ValueId, k: T) -> ValueId {
        unary(
            tape,
            a,
            move |x| x.max(k),
            move |x, _| if x > k { T::one() } else { T::zero() },
        )
    }

    pub fn sqrt<T: Real>(tape: &mut Tape<T>, a: ValueId) -> ValueId {
        unary(tape, a, |x| x.sqrt(), |_, y| T::c(0.5) / y.max(T::c(1e-20)))
    }

    /// `ln(1 + exp(x + shift))` — the density activation.
    pub fn softplus_shift<T: Real>(tape: &mut Tape<T>, a: ValueId, shift: T) -> ValueId {
        unary(
            tape,
            a,
            move |x| softplus(x + shift),
            move |x, _| sigmoid(x + shift),
        )
    }

    /// Adds a fixed buffer element-wise.
    pub fn add_const_slice<T: Real>(tape: &mut Tape<T>, a: ValueId, c: Vec<T>) -> ValueId {
        let out: Vec<T> = tape.val(a).iter().zip(&c).map(|(&x, &k)| x + k).collect();
        assert_eq!(out.len(), c.len());
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for i in 0..go.len() {
                        ga[i] += go[i];
                    }
                });
            }
        });
        o
    }

    /// Multiplies by a fixed buffer element-wise.
    pub fn mul_const_slice<T: Real>(tape: &mut Tape<T>, a: ValueId, c: Vec<T>) -> ValueId {
        assert_eq!(tape.len_of(a), c.len());
        let out: Vec<T> = tape.val(a).iter().zip(&c).map(|(&x, &k)| x * k).collect();
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for i in 0..go.len() {
                        ga[i] += go[i] * c[i];
                    }
                });
            }
        });
        o
    }

    /// Gathers rows of width `w` by index (with repetition allowed).
    pub fn gather_rows<T: Real>(
        tape: &mut Tape<T>,
        a: ValueId,
        w: usize,
        idx: Vec<u32>,
    ) -> ValueId {
        let src = tape.val(a);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in &idx {
            let base = i as usize * w;
            out.extend_from_slice(&src[base..base + w]);
        }
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = i as usize * w;
                        let src = r * w;
                        for c in 0..w {
                            ga[dst + c] += go[src + c];
                        }
                    }
                });
            }
        });
        o
    }

    /// One column block of a row-wise concatenation.
    pub enum ConcatPart<T> {
        Val(ValueId, usize),
        Const(Vec<T>, usize),
    }

    /// Concatenates column blocks row by row (`n` rows each).
    pub fn concat_rows<T: Real>(
        tape: &mut Tape<T>,
        n: usize,
        parts: Vec<ConcatPart<T>>,
    ) -> ValueId {
        let total_w: usize = parts
            .iter()
            .map(|p| match p {
                ConcatPart::Val(_, w) | ConcatPart::Const(_, w) => *w,
            })
            .sum();
        let mut out = vec![T::zero(); n * total_w];
        let mut col = 0usize;
        for p in &parts {
            match p {
                ConcatPart::Val(id, w) => {
                    let src = tape.val(*id);
                    assert_eq!(src.len(), n * w);
                    for r in 0..n {
                        out[r * total_w + col..r * total_w + col + w]
                            .copy_from_slice(&src[r * w..(r + 1) * w]);
                    }
                    col += w;
                }
                ConcatPart::Const(c, w) => {
                    assert_eq!(c.len(), n * w);
                    for r in 0..n {
                        out[r * total_w + col..r * total_w + col + w]
                            .copy_from_slice(&c[r * w..(r + 1) * w]);
                    }
                    col += w;
                }
            }
        }
        let o = tape.alloc(out);
        let spans: Vec<(Option<ValueId>, usize, usize)> = {
            let mut col = 0;
            parts
                .iter()
                .map(|p| match p {
                    ConcatPart::Val(id, w) => {
                        let s = (Some(*id), col, *w);
                        col += w;
                        s
                    }
                    ConcatPart::Const(_, w) => {
                        let s = (None, col, *w);
                        col += w;
                        s
                    }
                })
                .collect()
        };
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                for &(id, col, w) in &spans {
                    if let Some(id) = id {
                        ctx.v.accum(id, |ga| {
                            for r in 0..n {
                                for c in 0..w {
                                    ga[r * w + c] += go[r * total_w + col + c];
                                }
                            }
                        });
                    }
                }
            }
        });
        o
    }

    /// Per-column affine remap of an `n x w` buffer.
    pub fn affine_cols<T: Real>(
        tape: &mut Tape<T>,
        a: ValueId,
        w: usize,
        scale: Vec<T>,
        offset: Vec<T>,
    ) -> ValueId {
        assert_eq!(scale.len(), w);
        let out: Vec<T> = tape
            .val(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * scale[i % w] + offset[i % w])
            .collect();
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for i in 0..go.len() {
                        ga[i] += go[i] * scale[i % w];
                    }
                });
            }
        });
        o
    }

    /// Per-row squared L2 norm of an `n x w` buffer.
    pub fn rows_sq_sum<T: Real>(tape: &mut Tape<T>, a: ValueId, w: usize) -> ValueId {
        let x = tape.val(a);
        let n = x.len() / w;
        let out: Vec<T> = (0..n)
            .map(|r| x[r * w..(r + 1) * w].iter().map(|&v| v * v).sum())
            .collect();
        let o = tape.alloc(out);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let x = vals.get(a);
                ctx.v.accum(a, |ga| {
                    for r in 0..n {
                        let g2 = go[r] + go[r];
                        for c in 0..w {
                            ga[r * w + c] += g2 * x[r * w + c];
                        }
                    }
                });
            }
        });
        o
    }

    /// Row-wise dot product of an `n x 3` buffer against fixed directions.
    pub fn dot_rows3_const<T: Real>(tape: &mut Tape<T>, a: ValueId, dirs: Vec<T>) -> ValueId {
        let x = tape.val(a);
        assert_eq!(x.len(), dirs.len());
        let n = x.len() / 3;
        let out: Vec<T> = (0..n)
            .map(|r| {
                x[3 * r] * dirs[3 * r]
                    + x[3 * r + 1] * dirs[3 * r + 1]
                    + x[3 * r + 2] * dirs[3 * r + 2]
            })
            .collect();
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for r in 0..n {
                        for c in 0..3 {
                            ga[3 * r + c] += go[r] * dirs[3 * r + c];
                        }
                    }
                });
            }
        });
        o
    }

    /// Normalizes each 3-vector row; rows with tiny norm output +Z and
    /// receive zero gradient (declared fallback).
    pub fn normalize_rows3<T: Real>(tape: &mut Tape<T>, a: ValueId) -> ValueId {
        let x = tape.val(a);
        let n = x.len() / 3;
        let tiny = T::c(1e-12);
        let mut out = vec![T::zero(); x.len()];
        for r in 0..n {
            let (vx, vy, vz) = (x[3 * r], x[3 * r + 1], x[3 * r + 2]);
            let nn = (vx * vx + vy * vy + vz * vz).sqrt();
            if nn > tiny {
                out[3 * r] = vx / nn;
                out[3 * r + 1] = vy / nn;
                out[3 * r + 2] = vz / nn;
            } else {
                out[3 * r + 2] = T::one();
            }
        }
        let o = tape.alloc(out);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let x = vals.get(a);
                ctx.v.accum(a, |ga| {
                    for r in 0..n {
                        let (vx, vy, vz) = (x[3 * r], x[3 * r + 1], x[3 * r + 2]);
                        let n2 = vx * vx + vy * vy + vz * vz;
                        let nn = n2.sqrt();
                        if nn <= tiny {
                            continue;
                        }
                        // d(u/|u|)/du = (I - uu^T/|u|^2) / |u|
                        let inv = T::one() / nn;
                        let (gx, gy, gz) = (go[3 * r], go[3 * r + 1], go[3 * r + 2]);
                        let d = (gx * vx + gy * vy + gz * vz) / n2;
                        ga[3 * r] += (gx - vx * d) * inv;
                        ga[3 * r + 1] += (gy - vy * d) * inv;
                        ga[3 * r + 2] += (gz - vz * d) * inv;
                    }
                });
            }
        });
        o
    }

    /// Sum of element-wise products of two tape values (returns a scalar).
    pub fn dot_sum<T: Real>(tape: &mut Tape<T>, a: ValueId, b: ValueId) -> ValueId {
        let (xa, xb) = (tape.val(a), tape.val(b));
        assert_eq!(xa.len(), xb.len());
        let s: T = xa.iter().zip(xb).map(|(&x, &y)| x * y).sum();
        let o = tape.alloc(vec![s]);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let g = go[0];
                let (xa, xb) = (vals.get(a), vals.get(b));
                ctx.v.accum(a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g * xb[i];
                    }
                });
                ctx.v.accum(b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g * xa[i];
                    }
                });
            }
        });
        o
    }

    pub fn sum<T: Real>(tape: &mut Tape<T>, a: ValueId) -> ValueId {
        let s: T = tape.val(a).iter().copied().sum();
        let n = tape.len_of(a);
        let o = tape.alloc(vec![s]);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let g = go[0];
                ctx.v.accum(a, |ga| {
                    for i in 0..n {
                        ga[i] += g;
                    }
                });
            }
        });
        o
    }

    /// Mean squared error against a fixed target (scalar output).
    /// Empty inputs yield exactly zero.
    pub fn mse_const<T: Real>(tape: &mut Tape<T>, a: ValueId, target: Vec<T>) -> ValueId {
        let x = tape.val(a);
        assert_eq!(x.len(), target.len());
        let n = x.len();
        let s: T = x
            .iter()
            .zip(&target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let mean = if n == 0 {
            T::zero()
        } else {
            s / T::c(n as f64)
        };
        let o = tape.alloc(vec![mean]);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                if n == 0 {
                    return;
                }
                let g = go[0] * T::c(2.0 / n as f64);
                let x = vals.get(a);
                ctx.v.accum(a, |ga| {
                    for i in 0..n {
                        ga[i] += g * (x[i] - target[i]);
                    }
                });
            }
        });
        o
    }

    /// Weighted sum of scalar terms: `sum_i w_i * term_i`.
    pub fn weighted_scalar_sum<T: Real>(tape: &mut Tape<T>, terms: Vec<(ValueId, T)>) -> ValueId {
        let mut s = T::zero();
        for &(id, w) in &terms {
            debug_assert_eq!(tape.len_of(id), 1);
            s += tape.val(id)[0] * w;
        }
        let o = tape.alloc(vec![s]);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let g = go[0];
                for &(id, w) in &terms {
                    ctx.v.accum(id, |ga| ga[0] += g * w);
                }
            }
        });
        o
    }

    /// Per-segment sum of a flat buffer (segments given as ranges).
    pub fn seg_sum<T: Real>(tape: &mut Tape<T>, a: ValueId, segs: Vec<Range<u32>>) -> ValueId {
        let x = tape.val(a);
        let out: Vec<T> = segs
            .iter()
            .map(|s| x[s.start as usize..s.end as usize].iter().copied().sum())
            .collect();
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for (r, s) in segs.iter().enumerate() {
                        for i in s.start..s.end {
                            ga[i as usize] += go[r];
                        }
                    }
                });
            }
        });
        o
    }

    /// Per-segment weighted reduction of rows: `out[r] = sum_{j in seg r} w[j] * x[j,:]`
    /// where both `w` and `x` are tape values.
    pub fn seg_dot_rows<T: Real>(
        tape: &mut Tape<T>,
        w: ValueId,
        x: ValueId,
        width: usize,
        segs: Vec<Range<u32>>,
    ) -> ValueId {
        let (wv, xv) = (tape.val(w), tape.val(x));
        assert_eq!(wv.len() * width, xv.len());
        let mut out = vec![T::zero(); segs.len() * width];
        for (r, s) in segs.iter().enumerate() {
            for j in s.start as usize..s.end as usize {
                for c in 0..width {
                    out[r * width + c] += wv[j] * xv[j * width + c];
                }
            }
        }
        let o = tape.alloc(out);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let (wv, xv) = (vals.get(w), vals.get(x));
                ctx.v.accum(w, |gw| {
                    for (r, s) in segs.iter().enumerate() {
                        for j in s.start as usize..s.end as usize {
                            let mut acc = T::zero();
                            for c in 0..width {
                                acc += go[r * width + c] * xv[j * width + c];
                            }
                            gw[j] += acc;
                        }
                    }
                });
                ctx.v.accum(x, |gx| {
                    for (r, s) in segs.iter().enumerate() {
                        for j in s.start as usize..s.end as usize {
                            for c in 0..width {
                                gx[j * width + c] += go[r * width + c] * wv[j];
                            }
                        }
                    }
                });
            }
        });
        o
    }

    /// Per-segment weighted reduction against fixed rows:
    /// `out[r] = sum_{j in seg r} w[j] * rows[j,:]` (rows constant).
    pub fn seg_weighted_const_rows<T: Real>(
        tape: &mut Tape<T>,
        w: ValueId,
        rows: Vec<T>,
        width: usize,
        segs: Vec<Range<u32>>,
    ) -> ValueId {
        let wv = tape.val(w);
        assert_eq!(wv.len() * width, rows.len());
        let mut out = vec![T::zero(); segs.len() * width];
        for (r, s) in segs.iter().enumerate() {
            for j in s.start as usize..s.end as usize {
                for c in 0..width {
                    out[r * width + c] += wv[j] * rows[j * width + c];
                }
            }
        }
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(w, |gw| {
                    for (r, s) in segs.iter().enumerate() {
                        for j in s.start as usize..s.end as usize {
                            let mut acc = T::zero();
                            for c in 0..width {
                                acc += go[r * width + c] * rows[j * width + c];
                            }
                            gw[j] += acc;
                        }
                    }
                });
            }
        });
        o
    }

    /// Per-segment weight normalization: `out[j] = w[j] / max(acc[r], eps)`.
    pub fn seg_normalize<T: Real>(
        tape: &mut Tape<T>,
        w: ValueId,
        acc: ValueId,
        segs: Vec<Range<u32>>,
        eps: T,
    ) -> ValueId {
        let (wv, av) = (tape.val(w), tape.val(acc));
        assert_eq!(av.len(), segs.len());
        let mut out = vec![T::zero(); wv.len()];
        for (r, s) in segs.iter().enumerate() {
            let d = av[r].max(eps);
            for j in s.start as usize..s.end as usize {
                out[j] = wv[j] / d;
            }
        }
        let o = tape.alloc(out);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let (wv, av) = (vals.get(w), vals.get(acc));
                ctx.v.accum(w, |gw| {
                    for (r, s) in segs.iter().enumerate() {
                        let d = av[r].max(eps);
                        for j in s.start as usize..s.end as usize {
                            gw[j] += go[j] / d;
                        }
                    }
                });
                ctx.v.accum(acc, |gacc| {
                    for (r, s) in segs.iter().enumerate() {
                        if av[r] <= eps {
                            continue;
                        }
                        let d = av[r];
                        let mut t = T::zero();
                        for j in s.start as usize..s.end as usize {
                            t += go[j] * wv[j];
                        }
                        gacc[r] -= t / (d * d);
                    }
                });
            }
        });
        o
    }

    /// Broadcast multiply: each row of `a` (width `w`) scaled by `s`.
    pub fn mul_bcast<T: Real>(tape: &mut Tape<T>, a: ValueId, s: ValueId, w: usize) -> ValueId {
        let (xa, xs) = (tape.val(a), tape.val(s));
        assert_eq!(xa.len(), xs.len() * w);
        let out: Vec<T> = xa.iter().enumerate().map(|(i, &x)| x * xs[i / w]).collect();
        let o = tape.alloc(out);
        tape.push(move |vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let (xa, xs) = (vals.get(a), vals.get(s));
                ctx.v.accum(a, |ga| {
                    for i in 0..go.len() {
                        ga[i] += go[i] * xs[i / w];
                    }
                });
                ctx.v.accum(s, |gs| {
                    for i in 0..go.len() {
                        gs[i / w] += go[i] * xa[i];
                    }
                });
            }
        });
        o
    }

    /// Broadcast add: `out[r, :] = a[r, :] + s[r]`.
    pub fn add_bcast<T: Real>(tape: &mut Tape<T>, a: ValueId, s: ValueId, w: usize) -> ValueId {
        let (xa, xs) = (tape.val(a), tape.val(s));
        assert_eq!(xa.len(), xs.len() * w);
        let out: Vec<T> = xa.iter().enumerate().map(|(i, &x)| x + xs[i / w]).collect();
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for i in 0..go.len() {
                        ga[i] += go[i];
                    }
                });
                ctx.v.accum(s, |gs| {
                    for i in 0..go.len() {
                        gs[i / w] += go[i];
                    }
                });
            }
        });
        o
    }

    /// Outer product against a fixed width-`w` row: `out[r, :] = s[r] * row`.
    pub fn outer_bcast_const<T: Real>(tape: &mut Tape<T>, s: ValueId, row: Vec<T>) -> ValueId {
        let xs = tape.val(s);
        let w = row.len();
        let mut out = vec![T::zero(); xs.len() * w];
        for (r, &v) in xs.iter().enumerate() {
            for c in 0..w {
                out[r * w + c] = v * row[c];
            }
        }
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(s, |gs| {
                    for r in 0..gs.len() {
                        let mut acc = T::zero();
                        for c in 0..w {
                            acc += go[r * w + c] * row[c];
                        }
                        gs[r] += acc;
                    }
                });
            }
        });
        o
    }

    /// Extracts a column range `[lo, hi)` from rows of width `w`.
    pub fn slice_cols<T: Real>(
        tape: &mut Tape<T>,
        a: ValueId,
        w: usize,
        lo: usize,
        hi: usize,
    ) -> ValueId {
        let x = tape.val(a);
        let n = x.len() / w;
        let sw = hi - lo;
        let mut out = vec![T::zero(); n * sw];
        for r in 0..n {
            out[r * sw..(r + 1) * sw].copy_from_slice(&x[r * w + lo..r * w + hi]);
        }
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for r in 0..n {
                        for c in 0..sw {
                            ga[r * w + lo + c] += go[r * sw + c];
                        }
                    }
                });
            }
        });
        o
    }

    /// Stacks several values vertically (all must share the row width).
    pub fn append_rows<T: Real>(tape: &mut Tape<T>, parts: Vec<ValueId>) -> ValueId {
        let mut out = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in &parts {
            let v = tape.val(p);
            lens.push(v.len());
            out.extend_from_slice(v);
        }
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let mut off = 0usize;
                for (&p, &len) in parts.iter().zip(&lens) {
                    ctx.v.accum(p, |ga| {
                        for i in 0..len {
                            ga[i] += go[off + i];
                        }
                    });
                    off += len;
                }
            }
        });
        o
    }

    /// Per-segment row sums: `out[r, :] = sum_{j in seg r} x[j, :]`.
    pub fn seg_sum_rows<T: Real>(
        tape: &mut Tape<T>,
        a: ValueId,
        width: usize,
        segs: Vec<Range<u32>>,
    ) -> ValueId {
        let x = tape.val(a);
        let mut out = vec![T::zero(); segs.len() * width];
        for (r, s) in segs.iter().enumerate() {
            for j in s.start as usize..s.end as usize {
                for c in 0..width {
                    out[r * width + c] += x[j * width + c];
                }
            }
        }
        let o = tape.alloc(out);
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                ctx.v.accum(a, |ga| {
                    for (r, s) in segs.iter().enumerate() {
                        for j in s.start as usize..s.end as usize {
                            for c in 0..width {
                                ga[j * width + c] += go[r * width + c];
                            }
                        }
                    }
                });
            }
        });
        o
    }

    /// Copies a whole parameter tensor onto the tape as a leaf value.
    pub fn param_leaf<T: Real>(tape: &mut Tape<T>, params: &ParamStore<T>, id: ParamId) -> ValueId {
        let o = tape.alloc(params.data(id).to_vec());
        tape.push(move |_vals, _p, ctx| {
            if let Some(go) = ctx.v.take(o) {
                let g = ctx.p.buf_mut(id);
                for i in 0..go.len() {
                    g[i] += go[i];
                }
            }
        });
        o
    }
}

// --- Adam ----------------------------------------------------------------

/// Standard Adam with bias correction and per-group learning rates.
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Adam {
            m: store
                .iter_ids()
                .map(|id| vec![T::zero(); store.data(id).len()])
                .collect(),
            v: store
                .iter_ids()
                .map(|id| vec![T::zero(); store.data(id).len()])
                .collect(),
            step: 0,
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            eps: T::c(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Resets the moments of one parameter (used after grid upsampling).
    pub fn reset_param(&mut self, id: ParamId, len: usize) {
        self.m[id.0 as usize] = vec![T::zero(); len];
        self.v[id.0 as usize] = vec![T::zero(); len];
    }

    /// Applies one update with the given per-group learning rates.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: impl Fn(LrGroup) -> T) {
        self.step += 1;
        let t = self.step;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = T::one() - b1.powi(t as i32);
        let bc2 = T::one() - b2.powi(t as i32);
        for id in 0..store.len() {
            let rate = lr(store.entries[id].group);
            let g = &grads.bufs[id];
            let p = &mut store.entries[id].data;
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Serializes moments in a fixed order (for checkpoint resume).
    pub fn export_state(&self) -> (Vec<Vec<T>>, Vec<Vec<T>>, u64) {
        (self.m.clone(), self.v.clone(), self.step)
    }

    pub fn import_state(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

// --- Finite-difference checking -------------------------------------------

/// Result of a finite-difference comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub nonfinite: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn any_nonfinite(&self) -> bool {
        self.entries.iter().any(|e| e.nonfinite)
    }

    /// True when every group is below `tol` and all values were finite.
    pub fn passes(&self, tol: f64) -> bool {
        !self.any_nonfinite() && self.max_rel_err() < tol
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:32} checked {:6}  max rel err {:.3e}{}",
                e.name,
                e.checked,
                e.max_rel_err,
                if e.nonfinite { "  NON-FINITE" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// Central-difference step for a parameter value.
pub fn fd_step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

/// Relative error between analytic and finite-difference gradients with
/// an absolute floor guarding near-zero pairs.
pub fn fd_rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6)
}

/// Compares analytic gradients against central finite differences in
/// double precision.
///
/// `loss_fn` must be a deterministic function of the store contents.
/// `stride` subsamples large tensors (1 checks every entry).
pub fn gradcheck(
    store: &mut ParamStore<f64>,
    analytic: &Grads<f64>,
    stride: usize,
    mut loss_fn: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradcheckReport {
    let stride = stride.max(1);
    let mut entries = Vec::new();
    for id in 0..store.len() {
        let pid = ParamId(id as u32);
        let name = store.entry(pid).name.clone();
        let n = store.data(pid).len();
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        let mut checked = 0usize;
        let mut nonfinite = false;
        let mut k = 0usize;
        while k < n {
            let theta = store.data(pid)[k];
            let h = fd_step(theta);
            store.data_mut(pid)[k] = theta + h;
            let up = loss_fn(store);
            store.data_mut(pid)[k] = theta - h;
            let dn = loss_fn(store);
            store.data_mut(pid)[k] = theta;
            let fd = (up - dn) / (2.0 * h);
            let ad = analytic.buf(pid)[k];
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
