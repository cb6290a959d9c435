//! Training loss terms: the two rendering losses, normal regularization,
//! scale-invariant BRDF smoothness, the back-facing orientation penalty,
//! and factor-norm regularizers, combined with configurable weights.

use crate::autodiff::{ops, Tape, ValueId};
use crate::math::{Real, Vec3};

/// Loss weights of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Radiance-field rendering loss.
    pub rf: f64,
    /// Physically-based rendering loss.
    pub pb: f64,
    /// BRDF smoothness regularizer.
    pub brdf_smooth: f64,
    /// Shading-normal vs density-normal regularizer.
    pub normal: f64,
    /// Back-facing normal penalty.
    pub orientation: f64,
    /// L1 regularization over all tensor factors.
    pub grid_l1: f64,
    /// Total-variation term, active during the warm-up phase only.
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rf: 1.0,
            pb: 0.2,
            brdf_smooth: 1e-3,
            normal: 2e-3,
            orientation: 1e-3,
            grid_l1: 4e-5,
            tv: 0.1 * 4e-5,
        }
    }
}

/// Per-term values of one training step (weighted total included).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub rf: f64,
    pub pb: f64,
    pub normal: f64,
    pub orientation: f64,
    pub brdf_smooth: f64,
    pub grid_l1: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Mean squared error between a rendered batch and fixed targets.
/// An empty batch contributes exactly zero.
pub fn loss_mse<T: Real>(tape: &mut Tape<T>, pred: ValueId, target: Vec<T>) -> ValueId {
    ops::mse_const(tape, pred, target)
}

/// `sum_j w_j ||n_j - n_sigma_j||^2` over per-sample unit normals.
pub fn loss_normal<T: Real>(
    tape: &mut Tape<T>,
    normals: ValueId,
    density_normals: ValueId,
    weights: ValueId,
) -> ValueId {
    let diff = ops::sub(tape, normals, density_normals);
    let sq = ops::rows_sq_sum(tape, diff, 3);
    ops::dot_sum(tape, sq, weights)
}

/// `sum_j w_j max(0, n_j . d_j)` penalizing camera-facing-away normals.
pub fn loss_orientation<T: Real>(
    tape: &mut Tape<T>,
    normals: ValueId,
    view_dirs: Vec<Vec3<T>>,
    weights: ValueId,
) -> ValueId {
    let dirs_flat: Vec<T> = view_dirs.iter().flat_map(|d| d.0).collect();
    let dots = ops::dot_rows3_const(tape, normals, dirs_flat);
    let pos = ops::relu(tape, dots);
    ops::dot_sum(tape, pos, weights)
}

/// Scale-invariant BRDF smoothness:
/// `sum_j w_j || (b_x - b_x+xi) / max(b_x, b_x+xi) ||^2` with the
/// denominator floored at 1e-6.
pub fn loss_brdf_smooth<T: Real>(
    tape: &mut Tape<T>,
    beta: ValueId,
    beta_offset: ValueId,
    width: usize,
    weights: ValueId,
) -> ValueId {
    let diff = ops::sub(tape, beta, beta_offset);
    let denom = ops::max_ew(tape, beta, beta_offset);
    let denom = ops::clamp_min(tape, denom, T::c(1e-6));
    let ratio = ops::div(tape, diff, denom);
    let sq = ops::rows_sq_sum(tape, ratio, width);
    ops::dot_sum(tape, sq, weights)
}

/// Weighted sum of scalar loss terms. Aborting on non-finite inputs is
/// the trainer's job; this just combines.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: Vec<(ValueId, f64)>) -> ValueId {
    let terms = terms.into_iter().map(|(id, w)| (id, T::c(w))).collect();
    ops::weighted_scalar_sum(tape, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Grads, LrGroup, ParamStore};

    fn leaf(store: &mut ParamStore<f64>, name: &str, vals: &[f64]) -> crate::ParamId {
        store
            .register(name, vec![vals.len()], LrGroup::Network, vals.to_vec())
            .unwrap()
    }

    #[test]
    fn mse_basics() {
        let mut tape: Tape<f64> = Tape::new();
        let a = ops::constant(&mut tape, vec![0.3, 0.5, 0.9]);
        let same = loss_mse(&mut tape, a, vec![0.3, 0.5, 0.9]);
        assert_eq!(tape.val(same)[0], 0.0);
        let b = ops::constant(&mut tape, vec![0.4, 0.6, 1.0]);
        let off = loss_mse(&mut tape, b, vec![0.3, 0.5, 0.9]);
        assert!((tape.val(off)[0] - 0.01).abs() < 1e-12);
        let empty = ops::constant(&mut tape, vec![]);
        let zero = loss_mse(&mut tape, empty, vec![]);
        assert_eq!(tape.val(zero)[0], 0.0);
    }

    #[test]
    fn normal_loss_cases() {
        let mut tape: Tape<f64> = Tape::new();
        // Antipodal normals with unit weight: ||2n||^2 = 4.
        let n = ops::constant(&mut tape, vec![0.0, 0.0, 1.0]);
        let ns = ops::constant(&mut tape, vec![0.0, 0.0, -1.0]);
        let w = ops::constant(&mut tape, vec![1.0]);
        let l = loss_normal(&mut tape, n, ns, w);
        assert!((tape.val(l)[0] - 4.0).abs() < 1e-12);
        // Equal normals: zero. Zero weights: zero.
        let m = ops::constant(&mut tape, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let m2 = ops::constant(&mut tape, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let w2 = ops::constant(&mut tape, vec![0.7, 0.1]);
        let l2 = loss_normal(&mut tape, m, m2, w2);
        assert_eq!(tape.val(l2)[0], 0.0);
        let anti = ops::constant(&mut tape, vec![-1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        let w0 = ops::constant(&mut tape, vec![0.0, 0.0]);
        let l3 = loss_normal(&mut tape, m, anti, w0);
        assert_eq!(tape.val(l3)[0], 0.0);
    }

    #[test]
    fn orientation_loss_cases() {
        let mut tape: Tape<f64> = Tape::new();
        let d = Vec3::new(0.0, 0.0, 1.0);
        // Normal equal to the view direction: penalty 1.
        let n = ops::constant(&mut tape, vec![0.0, 0.0, 1.0]);
        let w = ops::constant(&mut tape, vec![1.0]);
        let l = loss_orientation(&mut tape, n, vec![d], w);
        assert!((tape.val(l)[0] - 1.0).abs() < 1e-12);
        // Facing the camera (n . d < 0): zero.
        let n2 = ops::constant(&mut tape, vec![0.0, 0.3, -0.95, 0.6, 0.0, -0.8]);
        let w2 = ops::constant(&mut tape, vec![1.0, 2.0]);
        let l2 = loss_orientation(&mut tape, n2, vec![d, d], w2);
        assert_eq!(tape.val(l2)[0], 0.0);
    }

    #[test]
    fn brdf_smoothness_ratio_form() {
        let mut tape: Tape<f64> = Tape::new();
        // One component doubled: ((2c - c)/2c)^2 = 1/4, weighted by w.
        let w = 0.8;
        let bx = ops::constant(&mut tape, vec![2.0, 5.0]);
        let bo = ops::constant(&mut tape, vec![1.0, 5.0]);
        let wv = ops::constant(&mut tape, vec![w]);
        let l = loss_brdf_smooth(&mut tape, bx, bo, 2, wv);
        assert!((tape.val(l)[0] - w * 0.25).abs() < 1e-12);
        // Constant field: zero.
        let c1 = ops::constant(&mut tape, vec![0.4, 0.7, 0.4, 0.7]);
        let c2 = ops::constant(&mut tape, vec![0.4, 0.7, 0.4, 0.7]);
        let w2 = ops::constant(&mut tape, vec![1.0, 1.0]);
        let l2 = loss_brdf_smooth(&mut tape, c1, c2, 2, w2);
        assert_eq!(tape.val(l2)[0], 0.0);
    }

    #[test]
    fn brdf_smoothness_is_scale_invariant() {
        let base = [0.8, 0.1, 0.33, 0.52];
        let off = [0.7, 0.14, 0.4, 0.5];
        let weights = vec![0.6, 1.2];
        let eval = |scale: f64| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let bx = ops::constant(&mut tape, base.iter().map(|v| v * scale).collect());
            let bo = ops::constant(&mut tape, off.iter().map(|v| v * scale).collect());
            let w = ops::constant(&mut tape, weights.clone());
            let l = loss_brdf_smooth(&mut tape, bx, bo, 2, w);
            tape.val(l)[0]
        };
        let a = eval(1.0);
        let b = eval(10.0);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn total_is_weighted_sum_and_terms_nonnegative() {
        let mut tape: Tape<f64> = Tape::new();
        let t1 = ops::constant(&mut tape, vec![0.5]);
        let t2 = ops::constant(&mut tape, vec![2.0]);
        let total = total_loss(&mut tape, vec![(t1, 1.0), (t2, 0.25)]);
        assert!((tape.val(total)[0] - 1.0).abs() < 1e-12);
        let zero_terms = ops::constant(&mut tape, vec![0.0]);
        let z = total_loss(&mut tape, vec![(zero_terms, 123.0)]);
        assert_eq!(tape.val(z)[0], 0.0);
    }

    #[test]
    fn loss_terms_pass_gradient_checks() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let nid = leaf(
            &mut store,
            "n",
            &[0.3, -0.2, 0.9, 0.1, 0.8, -0.4, -0.5, 0.2, 0.6],
        );
        let sid = leaf(
            &mut store,
            "ns",
            &[0.1, 0.0, 0.95, -0.3, 0.7, 0.1, 0.2, -0.4, 0.8],
        );
        let wid = leaf(&mut store, "w", &[0.5, 0.3, 0.9]);
        let bid = leaf(&mut store, "b", &[0.7, 0.2, 0.5, 0.9, 0.4, 0.6]);
        let oid = leaf(&mut store, "bo", &[0.5, 0.25, 0.52, 0.7, 0.41, 0.58]);
        let dirs = vec![
            Vec3::new(0.0, 0.6, 0.8),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
        ];
        let run = |s: &ParamStore<f64>, grads: Option<&mut Grads<f64>>| -> f64 {
            let mut tape = Tape::new();
            let n = ops::param_leaf(&mut tape, s, nid);
            let nn = ops::normalize_rows3(&mut tape, n);
            let ns = ops::param_leaf(&mut tape, s, sid);
            let nns = ops::normalize_rows3(&mut tape, ns);
            let w = ops::param_leaf(&mut tape, s, wid);
            let b = ops::param_leaf(&mut tape, s, bid);
            let bo = ops::param_leaf(&mut tape, s, oid);
            let ln = loss_normal(&mut tape, nn, nns, w);
            let lo = loss_orientation(&mut tape, nn, dirs.clone(), w);
            let ls = loss_brdf_smooth(&mut tape, b, bo, 2, w);
            let total = total_loss(&mut tape, vec![(ln, 2e-3), (lo, 1e-3), (ls, 1e-3)]);
            let v = tape.val(total)[0];
            if let Some(g) = grads {
                tape.backward(total, s, g).unwrap();
            }
            v
        };
        let mut grads = Grads::zeros_like(&store);
        run(&store, Some(&mut grads));
        let report = gradcheck(&mut store, &grads, 1, |s| run(s, None));
        assert!(report.passes(1e-4), "loss gradcheck:\n{report}");
    }
}
