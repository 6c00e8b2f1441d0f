//! Dense reverse-mode automatic differentiation over a tape of `f32` ops.
//!
//! Just enough operator coverage for small convolutional and fully
//! connected classifiers: matmul, bias add, 3x3 same-padded convolution,
//! ReLU, 2x2 ceil-mode max-pooling, softmax cross-entropy and MSE.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of a scalar function of one input, in f64.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64, step: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus.values_mut()[i] = (x.values()[i] as f64 + step) as f32;
                minus.values_mut()[i] = (x.values()[i] as f64 - step) as f32;
                let h = plus.values()[i] as f64 - minus.values()[i] as f64;
                (f(&plus) - f(&minus)) / h
            })
            .collect()
    }

    fn assert_close(analytic: &[f32], numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a as f64 - n).abs() / (a as f64).abs().max(n.abs()).max(1e-2);
            assert!(err < tol, "entry {i}: analytic {a} numeric {n} rel {err}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let m = g.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).values(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.leaf(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(vec![3, 3], &mut rng);
        let b = random(vec![3, 3], &mut rng);
        let mut g = Graph::new();
        let ia = g.leaf(a.clone());
        let ib = g.leaf(b.clone());
        let p = g.matmul(ia, ib).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        let numeric = numeric_grad(
            &a,
            |a| {
                let mut g = Graph::new();
                let ia = g.leaf(a.clone());
                let ib = g.leaf(b.clone());
                let p = g.matmul(ia, ib).unwrap();
                g.value(p).values().iter().map(|&v| v as f64).sum()
            },
            1e-3,
        );
        assert_close(g.grad(ia), &numeric, 1e-3);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap());
        let k = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]).unwrap());
        let b = g.leaf(Tensor::new(vec![1], vec![0.75]).unwrap());
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 4]);
        assert!(g.value(y).values().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let input: Vec<f32> = (0..25).map(|v| v as f32 * 0.1 - 1.0).collect();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 5, 5], input.clone()).unwrap());
        let k = g.leaf(Tensor::new(vec![1, 1, 3, 3], kernel).unwrap());
        let b = g.leaf(Tensor::zeros(vec![1]).unwrap());
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).values(), &input[..]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 4, 4]).unwrap());
        let k = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]).unwrap());
        let b = g.leaf(Tensor::zeros(vec![1]).unwrap());
        assert!(matches!(g.conv2d(x, k, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(vec![1, 4, 4], &mut rng);
        let k = random(vec![2, 1, 3, 3], &mut rng);
        let b = random(vec![2], &mut rng);
        // A random projection of the output keeps the loss sensitive to every entry.
        let proj = random(vec![2, 4, 4], &mut rng);
        let eval = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
            let mut g = Graph::new();
            let (ix, ik, ib) = (g.leaf(x.clone()), g.leaf(k.clone()), g.leaf(b.clone()));
            let y = g.conv2d(ix, ik, ib).unwrap();
            g.value(y)
                .values()
                .iter()
                .zip(proj.values())
                .map(|(&a, &p)| a as f64 * p as f64)
                .sum()
        };
        let mut g = Graph::new();
        let (ix, ik, ib) = (g.leaf(x.clone()), g.leaf(k.clone()), g.leaf(b.clone()));
        let y = g.conv2d(ix, ik, ib).unwrap();
        let ip = g.leaf(proj.clone());
        let prod = g.mul(y, ip).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(ix), &numeric_grad(&x, |x| eval(x, &k, &b), 1e-3), 1e-3);
        assert_close(g.grad(ik), &numeric_grad(&k, |k| eval(&x, k, &b), 1e-3), 1e-3);
        assert_close(g.grad(ib), &numeric_grad(&b, |b| eval(&x, &k, b), 1e-3), 1e-3);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_ceil_mode_and_first_tie() {
        let mut g = Graph::new();
        // 3x3 plane: windows are [0..2)x[0..2), [0..2)x[2], [2]x[0..2), [2]x[2].
        let x = g.leaf(Tensor::new(vec![1, 3, 3], vec![1.0, 1.0, 5.0, 1.0, 0.0, 2.0, 7.0, 3.0, -4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).values(), &[1.0, 5.0, 7.0, -4.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(vec![1, 4, 4], &mut rng);
        let proj = random(vec![1, 2, 2], &mut rng);
        let eval = |x: &Tensor| -> f64 {
            let mut g = Graph::new();
            let ix = g.leaf(x.clone());
            let y = g.maxpool2(ix).unwrap();
            g.value(y)
                .values()
                .iter()
                .zip(proj.values())
                .map(|(&a, &p)| a as f64 * p as f64)
                .sum()
        };
        let mut g = Graph::new();
        let ix = g.leaf(x.clone());
        let y = g.maxpool2(ix).unwrap();
        let ip = g.leaf(proj.clone());
        let prod = g.mul(y, ip).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(ix), &numeric_grad(&x, eval, 1e-3), 1e-3);
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(vec![3, 5]).unwrap());
        let loss = g.softmax_cross_entropy(l, &[0, 2, 4]).unwrap();
        assert!((g.value(loss).item() - 5f32.ln()).abs() < 1e-6);
        assert!((5f32.ln() - 1.60944).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(vec![1, 5]).unwrap());
        assert!(matches!(
            g.softmax_cross_entropy(l, &[5]),
            Err(Error::Label { label: 5, classes: 5 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 3, 2]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_half_squared_norm_is_identity() {
        let values = vec![0.5, -1.25, 3.0, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4], values.clone()).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        g.backward(half).unwrap();
        assert_eq!(g.grad(x), &values[..]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[2.0, 2.0]);
        g.zero_grads();
        assert_eq!(g.grad(x), &[0.0, 0.0]);
        assert_eq!(g.backward_passes(), 2);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![f32::MAX]).unwrap());
        assert!(matches!(g.scale(x, 4.0), Err(Error::NonFinite { .. })));
    }

    fn linearity_case(shared: bool) -> Vec<(f32, f32)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(vec![4, 3], &mut rng);
        let w = random(vec![3, 2], &mut rng);
        let build = |g: &mut Graph| {
            let ia = g.leaf(a.clone());
            let iw = g.leaf(w.clone());
            let p1 = g.matmul(ia, iw).unwrap();
            let p2 = if shared { p1 } else { g.matmul(ia, iw).unwrap() };
            let r = g.relu(p1).unwrap();
            let l1 = g.sum(r).unwrap();
            let l2 = g.softmax_cross_entropy(p2, &[0, 1, 1, 0]).unwrap();
            (iw, l1, l2)
        };
        let mut g1 = Graph::new();
        let (w1, l1, _) = build(&mut g1);
        g1.backward(l1).unwrap();
        let mut g2 = Graph::new();
        let (w2, _, l2) = build(&mut g2);
        g2.backward(l2).unwrap();
        let mut g3 = Graph::new();
        let (w3, l1, l2) = build(&mut g3);
        let total = g3.add(l1, l2).unwrap();
        g3.backward(total).unwrap();
        g3.grad(w3)
            .iter()
            .zip(g1.grad(w1).iter().zip(g2.grad(w2)))
            .map(|(&s, (&a, &b))| (s, a + b))
            .collect()
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // Separate branches meet only at the leaf: one rounding, within 1 ulp.
        for (s, sum) in linearity_case(false) {
            let ulp = f32::EPSILON * sum.abs().max(f32::MIN_POSITIVE);
            assert!((s - sum).abs() <= ulp, "{s} vs {sum}");
        }
        // A shared intermediate reorders the sums; agreement is to rounding noise.
        for (s, sum) in linearity_case(true) {
            assert!((s - sum).abs() <= 1e-5 * sum.abs().max(1e-3), "{s} vs {sum}");
        }
    }
}
