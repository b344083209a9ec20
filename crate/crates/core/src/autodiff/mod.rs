//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] as they execute; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients across fan-out.
//! Shapes must match exactly: the only broadcast is the explicit
//! [`Graph::expand_leading`].

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamStore};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_softmax_matches() {
        let mut g = Graph::new();
        let x = g.constant(random(&[4, 3, 5], 1)).unwrap();
        for axis in 0..3 {
            let p = g.softmax(x, axis).unwrap();
            let lp = g.log_softmax(x, axis).unwrap();
            let shape = g.shape(p).to_vec();
            let (outer, n, inner) =
                (shape[..axis].iter().product::<usize>(), shape[axis], shape[axis + 1..].iter().product::<usize>());
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..n).map(|j| g.value(p).data()[o * n * inner + j * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            for (a, b) in g.value(p).data().iter().zip(g.value(lp).data()) {
                assert!((a.ln() - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 6], 3.7)).unwrap();
        let y = g.layer_norm(x, LAYER_NORM_EPS).unwrap();
        // Mean of a constant row may differ from the constant in the last ulp.
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3)).unwrap();
        let a = g.constant(random(&[3, 3], 2)).unwrap();
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        match err {
            Error::Shape(msg) => assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::scalar(3.0)).unwrap();
        let sq = g.mul(t, t).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(t).item(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::scalar(1.5)).unwrap();
        let s = g.add(t, t).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(t).item(), 2.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::scalar(2.0)).unwrap();
        let u = g.leaf(Tensor::from_fn(&[2], |i| i as f64)).unwrap();
        let s = g.scale(t, 4.0).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(u).is_none());
        assert_eq!(grads.wrt(u).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(t), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_fail() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(g.mul(t, t), Err(Error::NonFinite("mul"))));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let logits = random(&[5, 7], 3);
        let targets = [0usize, 3, 6, 2, 2];
        let mut g = Graph::new();
        let x = g.leaf(logits.clone()).unwrap();
        let lp = g.log_softmax(x, 1).unwrap();
        let picked = g.pick(lp, &targets).unwrap();
        let s = g.sum(picked).unwrap();
        let loss = g.scale(s, -1.0).unwrap();
        let grad = g.backward(loss).unwrap().wrt(x);
        for (r, &target) in targets.iter().enumerate() {
            let mut row = logits.data()[r * 7..(r + 1) * 7].to_vec();
            kernels::softmax_in_place(&mut row);
            for (c, &p) in row.iter().enumerate() {
                let expect = p - if c == target { 1.0 } else { 0.0 };
                assert!((grad.data()[r * 7 + c] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_root_scale() {
        let build = |g: &mut Graph, c: f64| {
            let x = g.leaf(random(&[3, 4], 9)).unwrap();
            let w = g.leaf(random(&[4, 2], 10)).unwrap();
            let y = g.matmul(x, w).unwrap();
            let z = g.gelu(y).unwrap();
            let s = g.sum(z).unwrap();
            (g.scale(s, c).unwrap(), x, w)
        };
        let mut g1 = Graph::new();
        let (r1, x1, w1) = build(&mut g1, 1.0);
        let mut g2 = Graph::new();
        let (r2, x2, w2) = build(&mut g2, 2.5);
        let (a, b) = (g1.backward(r1).unwrap(), g2.backward(r2).unwrap());
        for (u, v) in [(a.wrt(x1), b.wrt(x2)), (a.wrt(w1), b.wrt(w2))] {
            for (p, q) in u.data().iter().zip(v.data()) {
                assert!((2.5 * p - q).abs() < 1e-12);
            }
        }
    }

    fn store(shapes: &[&[usize]]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, sh) in shapes.iter().enumerate() {
            s.push(format!("p{i}"), random(sh, 100 + i as u64), true);
        }
        s
    }

    #[test]
    fn grad_check_quadratic_bowl() {
        let params = store(&[&[6]]);
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.sum(sq)?;
                g.scale(s, 0.5)
            },
            &params,
            1e-3,
            20,
            1,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn grad_check_constant_loss() {
        let params = store(&[&[4]]);
        let report = grad_check(|g, _| g.constant(Tensor::scalar(2.0)), &params, 1e-4, 10, 1).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    /// Every op in the suite, checked against central differences.
    #[test]
    fn grad_check_every_op() {
        let params = store(&[&[2, 3, 4], &[4, 5], &[2, 4, 3], &[6, 4], &[4]]);
        let report = grad_check(
            |g, v| {
                let (x, w, y, table, gain) = (v[0], v[1], v[2], v[3], v[4]);
                let flat = g.reshape(x, &[6, 4])?;
                let mm = g.matmul(flat, w)?; // [6,5]
                let act = g.gelu(mm)?;
                let sm = g.softmax(act, 0)?;
                let lsm = g.log_softmax(act, 1)?;
                let prod = g.mul(sm, lsm)?;
                let bm = g.batch_matmul(x, y)?; // [2,3,3]
                let tr = g.transpose(bm)?;
                let pm = g.permute(tr, &[1, 0, 2])?; // [3,2,3]
                let sl = g.slice(pm, 2, 1, 3)?; // [3,2,2]
                let cat = g.concat(&[sl, sl], 1)?; // [3,4,2]
                let emb = g.gather_rows(table, &[0, 5, 5, 2])?; // [4,4]
                let gn = g.expand_leading(gain, 4)?;
                let ln = g.layer_norm(emb, LAYER_NORM_EPS)?;
                let aff = g.mul(ln, gn)?;
                let diff = g.sub(aff, emb)?;
                let picked = g.pick(diff, &[1, 0, 3, 3])?;
                let parts = [g.sum(prod)?, g.mean(cat)?, g.sum(picked)?];
                let s01 = g.add(parts[0], parts[1])?;
                let total = g.add(s01, parts[2])?;
                let sq = g.mul(total, total)?;
                g.scale(sq, 0.3)
            },
            &params,
            1e-5,
            150,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
