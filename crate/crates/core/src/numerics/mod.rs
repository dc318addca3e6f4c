//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated; [`Var`] handles
//! build new nodes and [`Graph::backward`] walks the tape in reverse. Leaves
//! are copied in from [`Tensor`]s, and gradients flow back out through
//! [`Gradients`].

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, max_relative_error};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use kernels::gelu;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// High-precision erf by its Maclaurin series.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut total = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            total += term / (2 * n + 1) as f64;
        }
        total * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let x = g.from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax().unwrap().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let g = Graph::new();
        let x = g.from_vec(&[4], vec![3.0; 4]).unwrap();
        assert_eq!(x.layer_norm(LAYER_NORM_EPS).unwrap().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn gelu_matches_series_oracle() {
        assert_eq!(gelu(0.0), 0.0);
        for &x in &[1.0, -0.7, 0.3, 2.2] {
            let oracle = x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((gelu(x) - oracle).abs() < 1e-14, "x={x}");
        }
        assert!((gelu(1.0) - 0.841345).abs() < 5e-7);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_grad());
        let y = g.leaf(&Tensor::scalar(-2.0).with_grad());
        let grads = g.backward(x.mul(y).unwrap()).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[-2.0]);
        assert_eq!(grads.get(y).unwrap(), &[3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::ones(&[2]).unwrap().with_grad());
        assert_eq!(
            g.backward(x).unwrap_err(),
            NumericsError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        for _ in 0..2 {
            let g = Graph::new();
            let x = g.leaf(&t);
            let grads = g.backward(x.mul(x).unwrap().sum()).unwrap();
            grads.accumulate_into(x, &mut t).unwrap();
        }
        assert_eq!(t.grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let g = Graph::new();
        let a = g.from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let err = a.matmul(b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"), "{err}");
        let c = g.from_vec(&[4], vec![0.0; 4]).unwrap();
        assert!(a.add(c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let x = g.from_vec(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(x.dropout(0.5, false, &mut rng).unwrap().id(), x.id());
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().id(), x.id());
        let y = x.dropout(0.5, true, &mut rng).unwrap().to_vec();
        for (v, orig) in y.iter().zip([1.0, 2.0, 3.0, 4.0, 5.0]) {
            assert!(*v == 0.0 || *v == 2.0 * orig);
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let g = Graph::new();
        let x = g.from_vec(&[2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let y = x
            .masked_fill(&[false, false, true, true], f64::NEG_INFINITY)
            .unwrap()
            .softmax()
            .unwrap()
            .to_vec();
        assert_eq!(&y[2..], &[0.0, 0.0]);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let cols = 2 + seed % 7;
            let t = random_tensor(&mut rng, &[3, cols]);
            let g = Graph::new();
            let y = g.constant(&t).scale(10.0).softmax().unwrap().to_vec();
            for row in y.chunks(cols) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    type Probe = for<'g> fn(&'g Graph, Var<'g>, &[f64]) -> Result<Var<'g>, NumericsError>;

    /// Runs a primitive through the finite-difference oracle over ten random
    /// shapes, weighting the output by a fixed random cotangent.
    fn check_primitive(name: &str, shape_for: fn(&mut ChaCha8Rng) -> Vec<usize>, probe: Probe) {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
            let shape = shape_for(&mut rng);
            let x = random_tensor(&mut rng, &shape);
            let weights: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = finite_difference_check(&x, 1e-5, |g, xv| {
                let y = probe(g, xv, &weights)?;
                let n = y.shape().iter().product::<usize>();
                let w = g.from_vec(&y.shape(), weights[..n].to_vec())?;
                Ok(y.mul(w)?.sum())
            })
            .unwrap();
            assert!(err <= 1e-6, "{name} seed {seed}: relative error {err:e}");
        }
    }

    fn small(rng: &mut ChaCha8Rng) -> Vec<usize> {
        vec![rng.random_range(1..4), rng.random_range(2..6)]
    }

    fn cube(rng: &mut ChaCha8Rng) -> Vec<usize> {
        vec![
            rng.random_range(1..3),
            rng.random_range(2..4),
            rng.random_range(2..5),
        ]
    }

    // Two-element rows with nearly equal entries put layer norm close to its
    // singular point, where the O(h^2) truncation term alone exceeds 1e-6.
    fn wide(rng: &mut ChaCha8Rng) -> Vec<usize> {
        vec![
            rng.random_range(1..3),
            rng.random_range(2..4),
            rng.random_range(4..8),
        ]
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check_primitive("matmul", cube, |g, x, w| {
            let s = x.shape();
            let b = g.from_vec(&[s[2], 3], w[100..100 + s[2] * 3].to_vec())?;
            x.matmul(b)
        });
        check_primitive("matmul_rhs", small, |g, x, w| {
            let s = x.shape();
            let a = g.from_vec(&[2, 3, s[0]], w[200..200 + 6 * s[0]].to_vec())?;
            a.matmul(x)
        });
        check_primitive("add_broadcast", cube, |g, x, w| {
            let s = x.shape();
            let b = g.from_vec(&s[1..], w[300..300 + s[1] * s[2]].to_vec())?;
            b.add(x)?.mul(x)
        });
        check_primitive("sub", small, |g, x, w| {
            let s = x.shape();
            let b = g.from_vec(&s[1..], w[300..300 + s[1]].to_vec())?;
            b.sub(x)?.mul(x)
        });
        check_primitive("mul_self", small, |_, x, _| x.mul(x));
        check_primitive("div_scalar", small, |_, x, _| x.div_scalar(3.0));
        check_primitive("transpose", cube, |_, x, _| x.transpose());
        check_primitive("permute", cube, |_, x, _| x.permute(&[2, 0, 1]));
        check_primitive("reshape", cube, |_, x, _| {
            let n = x.shape().iter().product::<usize>();
            x.reshape(&[n])
        });
        check_primitive("concat", cube, |_, x, _| {
            let y = x.scale(2.0);
            Var::concat(&[x, y, x], 1)
        });
        check_primitive("slice", cube, |_, x, _| {
            let len = x.shape()[2] - 1;
            x.slice(2, 1, len)
        });
        check_primitive("gather_rows", small, |_, x, _| {
            let rows = x.shape()[0];
            let ids: Vec<usize> = (0..6).map(|i| (i * 7) % rows).collect();
            x.gather_rows(&ids, &[2, 3])
        });
        check_primitive("take_along_last", cube, |_, x, _| {
            let s = x.shape();
            let (rows, cols) = (s[1], s[2]);
            let index: Rc<[usize]> = (0..rows * 3).map(|i| (i * 5 + 1) % cols).collect();
            x.take_along_last(index, 3)
        });
        check_primitive("softmax", cube, |_, x, _| x.softmax());
        check_primitive("log_softmax", cube, |_, x, _| x.log_softmax());
        check_primitive("layer_norm", wide, |_, x, _| x.layer_norm(LAYER_NORM_EPS));
        check_primitive("gelu", cube, |_, x, _| Ok(x.gelu()));
        check_primitive("tanh", cube, |_, x, _| Ok(x.tanh()));
        check_primitive("cross_entropy", small, |_, x, _| {
            let s = x.shape();
            let targets: Vec<Option<usize>> = (0..s[0])
                .map(|i| if i == 1 { None } else { Some(i % s[1]) })
                .collect();
            if targets.iter().all(Option::is_none) {
                return x.cross_entropy(&[Some(0)]);
            }
            x.cross_entropy(&targets)
        });
        check_primitive("masked_fill", cube, |_, x, _| {
            let n = x.shape().iter().product::<usize>();
            let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            x.masked_fill(&mask, -4.0)?.softmax()
        });
        check_primitive("dropout", cube, |_, x, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            x.dropout(0.3, true, &mut rng)
        });
        check_primitive("mean", cube, |_, x, _| Ok(x.mul(x)?.mean()));
    }

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[4, 1]);
        let a = random_tensor(&mut rng, &[4, 4]);
        let err = finite_difference_check(&x, 1e-5, |g, xv| {
            let av = g.constant(&a);
            let ax = av.matmul(xv)?;
            Ok(xv.mul(ax)?.sum())
        })
        .unwrap();
        assert!(err <= 1e-9, "{err:e}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::ones(&[3]).unwrap();
        let err =
            finite_difference_check(&x, 1e-5, |g, _| Ok(g.from_vec(&[], vec![2.0])?)).unwrap();
        assert_eq!(err, 0.0);
    }
}
