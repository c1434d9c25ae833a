//! Minimal dense-array computation engine with reverse-mode differentiation.
//!
//! Double precision throughout: finite-difference verification requires it.
//! Arrays and graphs are immutable after construction; evaluation is a pure
//! function of the bindings.

mod array;
mod graph;

pub use array::Array;
pub use graph::{Bindings, Graph, NodeId, COSINE_EPS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("leaf '{0}' is not bound")]
    UnboundLeaf(String),
    #[error("leaf '{0}' is not part of this graph")]
    UnknownLeaf(String),
    #[error("leaf '{0}' already exists with a different shape or kind")]
    DuplicateLeaf(String),
    #[error("leaf '{0}' is marked constant")]
    ConstantLeaf(String),
    #[error("non-finite value produced by '{0}'")]
    NonFinite(String),
    #[error("gradient root must be scalar, got shape {0}")]
    NonScalarRoot(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("empty input: {0}")]
    EmptyInput(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Array)]) -> Bindings {
        pairs
            .iter()
            .map(|(n, a)| (n.to_string(), a.clone()))
            .collect()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let z = g.leaf("z", &[2]).unwrap();
        let s = g.softmax(z, 0).unwrap();
        let out = g
            .evaluate(s, &bind(&[("z", Array::from_vec(vec![1.7, 1.7]))]))
            .unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut g = Graph::new();
        let v = g.leaf("v", &[3]).unwrap();
        let c = g.cosine(v, v).unwrap();
        let out = g
            .evaluate(c, &bind(&[("v", Array::from_vec(vec![0.3, -1.2, 0.7]))]))
            .unwrap();
        assert!((out.item().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_exp_inverse_pair() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[]).unwrap();
        let e = g.exp(x);
        let l = g.log(e);
        let out = g.evaluate(l, &bind(&[("x", Array::scalar(2.5))])).unwrap();
        assert!((out.item().unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_errors() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]).unwrap();
        let s = g.sum(x);
        // unbound leaf
        assert!(matches!(
            g.evaluate(s, &Bindings::new()),
            Err(EngineError::UnboundLeaf(_))
        ));
        // shape mismatch
        assert!(matches!(
            g.evaluate(s, &bind(&[("x", Array::scalar(1.0))])),
            Err(EngineError::ShapeMismatch(_))
        ));
        // non-finite intermediate: log of a negative number
        let l = g.log(x);
        let ls = g.sum(l);
        assert!(matches!(
            g.evaluate(ls, &bind(&[("x", Array::from_vec(vec![-1.0, 1.0]))])),
            Err(EngineError::NonFinite(_))
        ));
    }

    #[test]
    fn gradient_of_x_times_x() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[]).unwrap();
        let y = g.square(x).unwrap();
        let grads = g
            .gradient(y, &bind(&[("x", Array::scalar(3.0))]), &["x"])
            .unwrap();
        assert!((grads["x"].item().unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_softmax_sum_is_zero() {
        // sum(softmax(z)) is identically 1, so its gradient vanishes.
        let mut g = Graph::new();
        let z = g.leaf("z", &[4]).unwrap();
        let s = g.softmax(z, 0).unwrap();
        let total = g.sum(s);
        let grads = g
            .gradient(
                total,
                &bind(&[("z", Array::from_vec(vec![0.1, -2.0, 3.0, 0.5]))]),
                &["z"],
            )
            .unwrap();
        for &v in grads["z"].data() {
            assert!(v.abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn gradient_rejects_non_scalar_root_and_constant_leaf() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]).unwrap();
        let c = g.frozen_leaf("c", &[]).unwrap();
        let y = g.mul(x, c).unwrap();
        let b = bind(&[("x", Array::from_vec(vec![1.0, 2.0])), ("c", Array::scalar(2.0))]);
        assert!(matches!(
            g.gradient(y, &b, &["x"]),
            Err(EngineError::NonScalarRoot(_))
        ));
        let s = g.sum(y);
        assert!(matches!(
            g.gradient(s, &b, &["c"]),
            Err(EngineError::ConstantLeaf(_))
        ));
        // the differentiable leaf works
        let grads = g.gradient(s, &b, &["x"]).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn numeric_gradient_of_square() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[]).unwrap();
        let y = g.square(x).unwrap();
        let grads = g
            .numeric_gradient(y, &bind(&[("x", Array::scalar(3.0))]), &["x"], 1e-5)
            .unwrap();
        assert!((grads["x"].item().unwrap() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn numeric_gradient_of_constant_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[]).unwrap();
        let c = g.frozen_leaf("c", &[2]).unwrap();
        let cs = g.sum(c);
        let y = g.mul(x, cs).unwrap();
        let b = bind(&[("x", Array::scalar(1.0)), ("c", Array::from_vec(vec![4.0, 5.0]))]);
        let grads = g.numeric_gradient(y, &b, &["c"], 1e-5).unwrap();
        assert_eq!(grads["c"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn numeric_gradient_rejects_bad_step() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[]).unwrap();
        let y = g.square(x).unwrap();
        let b = bind(&[("x", Array::scalar(1.0))]);
        assert!(matches!(
            g.numeric_gradient(y, &b, &["x"], 0.0),
            Err(EngineError::InvalidStep(_))
        ));
        assert!(matches!(
            g.numeric_gradient(y, &b, &["x"], -1.0),
            Err(EngineError::InvalidStep(_))
        ));
    }

    #[test]
    fn cosine_gradient_matches_numeric_on_orthogonal_vectors() {
        let mut g = Graph::new();
        let u = g.leaf("u", &[2]).unwrap();
        let w = g.leaf("w", &[2]).unwrap();
        let c = g.cosine(u, w).unwrap();
        let b = bind(&[
            ("u", Array::from_vec(vec![1.0, 0.0])),
            ("w", Array::from_vec(vec![0.0, 1.0])),
        ]);
        let analytic = g.gradient(c, &b, &["u", "w"]).unwrap();
        let numeric = g.numeric_gradient(c, &b, &["u", "w"], 1e-5).unwrap();
        for name in ["u", "w"] {
            for (a, n) in analytic[name].data().iter().zip(numeric[name].data()) {
                assert!((a - n).abs() < 1e-6, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn two_layer_network_gradient_matches_numeric() {
        // affine + rectifier stack, checked against central differences
        let mut g = Graph::new();
        let x = g.frozen_leaf("x", &[3, 4]).unwrap();
        let w1 = g.leaf("w1", &[4, 5]).unwrap();
        let b1 = g.leaf("b1", &[5]).unwrap();
        let w2 = g.leaf("w2", &[5, 2]).unwrap();
        let b2 = g.leaf("b2", &[2]).unwrap();
        let h = g.affine(x, w1, b1).unwrap();
        let hr = g.relu(h);
        let out = g.affine(hr, w2, b2).unwrap();
        let loss = g.mean(out).unwrap();

        let mut rng_state = 88172645463325252u64;
        let mut next = move || {
            // xorshift; deterministic fill in [-1, 1]
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let fill = |shape: &[usize], next: &mut dyn FnMut() -> f64| {
            let n = shape.iter().product();
            Array::new(shape.to_vec(), (0..n).map(|_| next()).collect()).unwrap()
        };
        let b = bind(&[
            ("x", fill(&[3, 4], &mut next)),
            ("w1", fill(&[4, 5], &mut next)),
            ("b1", fill(&[5], &mut next)),
            ("w2", fill(&[5, 2], &mut next)),
            ("b2", fill(&[2], &mut next)),
        ]);
        let wrt = ["w1", "b1", "w2", "b2"];
        let analytic = g.gradient(loss, &b, &wrt).unwrap();
        let numeric = g.numeric_gradient(loss, &b, &wrt, 1e-5).unwrap();
        for name in wrt {
            let a = analytic[name].data();
            let n = numeric[name].data();
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff / scale.max(1e-8) < 1e-4, "{name}: rel {}", diff / scale);
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[8]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let e = g.exp(s);
        let total = g.sum(e);
        let b = bind(&[(
            "x",
            Array::from_vec((0..8).map(|i| (i as f64).sin() * 3.0).collect()),
        )]);
        let a = g.evaluate(total, &b).unwrap();
        let c = g.evaluate(total, &b).unwrap();
        assert_eq!(a.data()[0].to_bits(), c.data()[0].to_bits());
    }

    #[test]
    fn gather_accumulates_duplicate_indices() {
        let mut g = Graph::new();
        let v = g.leaf("v", &[3]).unwrap();
        let picked = g.gather(v, vec![1, 1, 2]).unwrap();
        let s = g.sum(picked);
        let grads = g
            .gradient(s, &bind(&[("v", Array::from_vec(vec![5.0, 6.0, 7.0]))]), &["v"])
            .unwrap();
        assert_eq!(grads["v"].data(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn broadcast_is_scalar_only() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 2]).unwrap();
        let v = g.leaf("v", &[2]).unwrap();
        assert!(g.add(a, v).is_err());
        let s = g.scalar(2.0);
        assert!(g.add(a, s).is_ok());
    }

    #[test]
    fn empty_batch_flows_through_affine() {
        let mut g = Graph::new();
        let x = g.frozen_leaf("x", &[0, 3]).unwrap();
        let w = g.leaf("w", &[3, 2]).unwrap();
        let bias = g.leaf("b", &[2]).unwrap();
        let y = g.affine(x, w, bias).unwrap();
        let out = g
            .evaluate(
                y,
                &bind(&[
                    ("x", Array::zeros(&[0, 3])),
                    ("w", Array::zeros(&[3, 2])),
                    ("b", Array::zeros(&[2])),
                ]),
            )
            .unwrap();
        assert_eq!(out.shape(), &[0, 2]);
    }
}
