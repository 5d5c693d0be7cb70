//! Gradient integrity checks for the graph: every differentiable op is
//! compared against central finite differences, and the node-emitting
//! backward is exercised twice to validate second derivatives.

use super::*;
use crate::error::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds `f(x)` twice per coordinate to form central differences and once
/// symbolically, then compares gradients elementwise.
fn check_grad(
    shape: &[usize],
    seed: u64,
    f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>,
    tol: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(shape, &mut rng).map(|v| 0.5 * v + 0.1);
    let eval = |x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xn = g.var_leaf(x.clone());
        let y = f(&mut g, xn).unwrap();
        let s = g.sum(y);
        g.value(s).item()
    };

    let mut g = Graph::new();
    let xn = g.var_leaf(x0.clone());
    let y = f(&mut g, xn).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let gx = g.detach(grads.get(xn).expect("gradient must flow to the input"));

    let h = 1e-5;
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = gx.data()[i];
        let denom = an.abs().max(fd.abs()).max(1e-6);
        assert!(
            (an - fd).abs() / denom < tol,
            "coordinate {i}: analytic {an} vs finite-difference {fd}"
        );
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    check_grad(&[6], 1, |g, x| Ok(g.exp(x)), 1e-6);
    check_grad(&[6], 2, |g, x| {
        let shifted = g.add_scalar(x, 3.0); // keep log's argument positive
        Ok(g.log(shifted))
    }, 1e-6);
    check_grad(&[6], 3, |g, x| Ok(g.square(x)), 1e-6);
    check_grad(&[6], 4, |g, x| {
        let shifted = g.add_scalar(x, 3.0);
        Ok(g.sqrt(shifted))
    }, 1e-6);
    check_grad(&[6], 5, |g, x| Ok(g.softplus(x)), 1e-6);
    check_grad(&[6], 6, |g, x| Ok(g.sigmoid(x)), 1e-6);
    check_grad(&[6], 7, |g, x| Ok(g.swish(x)), 1e-6);
    // Offsets keep the probe away from the kink.
    check_grad(&[6], 10, |g, x| {
        let shifted = g.add_scalar(x, 2.0);
        Ok(g.leaky_relu(shifted, 0.1))
    }, 1e-6);
    check_grad(&[6], 11, |g, x| {
        let shifted = g.add_scalar(x, -4.0);
        Ok(g.leaky_relu(shifted, 0.1))
    }, 1e-6);
    check_grad(&[6], 8, |g, x| {
        let shifted = g.add_scalar(x, 3.0);
        Ok(g.recip(shifted))
    }, 1e-6);
    check_grad(&[6], 9, |g, x| {
        let y = g.mul_scalar(x, -1.7);
        Ok(g.add_scalar(y, 0.3))
    }, 1e-6);
}

#[test]
fn softplus_slope_at_zero_is_one_half() {
    let mut g = Graph::new();
    let x = g.var_leaf(Tensor::scalar(0.0));
    let y = g.softplus(x);
    let grads = g.backward(y).unwrap();
    let d = g.value(grads.get(x).unwrap()).item();
    assert!((d - 0.5).abs() < 1e-12);
    assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn swish_is_zero_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0));
    let y = g.swish(x);
    assert_eq!(g.value(y).item(), 0.0);
}

#[test]
fn binary_op_gradients_match_finite_differences() {
    // Both operands derive from x so one sweep checks both gradient paths.
    check_grad(&[5], 10, |g, x| {
        let a = g.mul_scalar(x, 0.7);
        let b = g.add_scalar(x, 0.2);
        g.mul(a, b)
    }, 1e-6);
    check_grad(&[5], 11, |g, x| {
        let a = g.square(x);
        g.sub(a, x)
    }, 1e-6);
    check_grad(&[5], 12, |g, x| {
        let a = g.exp(x);
        g.add(a, x)
    }, 1e-6);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    // y = x^T x routed through reshape and transpose.
    check_grad(&[3, 4], 13, |g, x| {
        let t = g.transpose(x)?;
        g.matmul(x, t)
    }, 1e-6);
}

#[test]
fn conv_gradients_match_finite_differences() {
    for stride in [1usize, 2] {
        // Gradient with respect to the input.
        check_grad(&[2, 5, 5], 20 + stride as u64, |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let k = g.leaf(Tensor::randn(&[3, 2, 3, 3], &mut rng));
            g.conv2d(x, k, stride)
        }, 1e-5);
        // Gradient with respect to the kernel.
        check_grad(&[3, 2, 3, 3], 30 + stride as u64, |g, k| {
            let mut rng = ChaCha8Rng::seed_from_u64(98);
            let x = g.leaf(Tensor::randn(&[2, 5, 5], &mut rng));
            g.conv2d(x, k, stride)
        }, 1e-5);
    }
}

#[test]
fn conv_adjoint_op_gradients_match_finite_differences() {
    // The adjoint ops appear inside gradient graphs; differentiating them is
    // what makes second derivatives of convolutions correct.
    for stride in [1usize, 2] {
        // conv over a [2, 5, 5] input yields [3, 5, 5] (stride 1) or
        // [3, 3, 3] (stride 2): that is the upstream-gradient shape.
        let gdim = if stride == 1 { 5 } else { 3 };

        // bwd_input, differentiated with respect to the upstream gradient.
        check_grad(&[3, gdim, gdim], 40 + stride as u64, |g, gin| {
            let mut rng = ChaCha8Rng::seed_from_u64(97);
            let k = g.leaf(Tensor::randn(&[3, 2, 3, 3], &mut rng));
            g.conv2d_bwd_input(gin, k, stride, 5, 5)
        }, 1e-5);
        // bwd_input, differentiated with respect to the kernel.
        check_grad(&[3, 2, 3, 3], 42 + stride as u64, |g, k| {
            let mut rng = ChaCha8Rng::seed_from_u64(96);
            let gin = g.leaf(Tensor::randn(&[3, gdim, gdim], &mut rng));
            g.conv2d_bwd_input(gin, k, stride, 5, 5)
        }, 1e-5);
        // bwd_kernel, differentiated with respect to the upstream gradient.
        check_grad(&[3, gdim, gdim], 44 + stride as u64, |g, gin| {
            let mut rng = ChaCha8Rng::seed_from_u64(95);
            let x = g.leaf(Tensor::randn(&[2, 5, 5], &mut rng));
            g.conv2d_bwd_kernel(gin, x, stride)
        }, 1e-5);
        // bwd_kernel, differentiated with respect to the activations.
        check_grad(&[2, 5, 5], 46 + stride as u64, |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(94);
            let gin = g.leaf(Tensor::randn(&[3, gdim, gdim], &mut rng));
            g.conv2d_bwd_kernel(gin, x, stride)
        }, 1e-5);
    }
}

#[test]
fn second_derivatives_match_finite_differences_of_first() {
    // f(x) = sum(sigmoid(x)^2); phi(x) = ||df/dx||^2. Checks d(phi)/dx
    // against central differences of the analytic first derivative.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x0 = Tensor::randn(&[4], &mut rng);

    let first_grad = |x: &Tensor| -> Tensor {
        let mut g = Graph::new();
        let xn = g.var_leaf(x.clone());
        let s = g.sigmoid(xn);
        let sq = g.square(s);
        let f = g.sum(sq);
        let grads = g.backward(f).unwrap();
        g.detach(grads.get(xn).unwrap())
    };

    // Symbolic second pass.
    let mut g = Graph::new();
    let xn = g.var_leaf(x0.clone());
    let s = g.sigmoid(xn);
    let sq = g.square(s);
    let f = g.sum(sq);
    let grads = g.backward(f).unwrap();
    let gx = grads.get(xn).unwrap();
    let gx2 = g.square(gx);
    let phi = g.sum(gx2);
    let grads2 = g.backward(phi).unwrap();
    let d_phi = g.detach(grads2.get(xn).unwrap());

    let h = 1e-5;
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let phi_plus: f64 = first_grad(&plus).data().iter().map(|v| v * v).sum();
        let phi_minus: f64 = first_grad(&minus).data().iter().map(|v| v * v).sum();
        let fd = (phi_plus - phi_minus) / (2.0 * h);
        let an = d_phi.data()[i];
        assert!(
            (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-5,
            "second derivative coordinate {i}: {an} vs {fd}"
        );
    }
}

#[test]
fn shape_and_reduction_op_gradients_match_finite_differences() {
    check_grad(&[2, 4, 4], 50, |g, x| g.upsample2x(x), 1e-6);
    check_grad(&[2, 4, 4], 51, |g, x| g.sum_pool2x(x), 1e-6);
    check_grad(&[2, 3, 3], 52, |g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let b = g.leaf(Tensor::randn(&[2], &mut rng));
        g.bias_chw(x, b)
    }, 1e-6);
    check_grad(&[2], 53, |g, b| {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let x = g.leaf(Tensor::randn(&[2, 3, 3], &mut rng));
        g.bias_chw(x, b)
    }, 1e-6);
    check_grad(&[3, 2, 2], 54, |g, x| g.chan_sum(x), 1e-6);
    check_grad(&[3], 55, |g, v| g.spatial_broadcast(v, 2, 2), 1e-6);
    check_grad(&[6], 56, |g, x| {
        let r = g.reshape(x, &[2, 3])?;
        Ok(g.square(r))
    }, 1e-6);
    check_grad(&[6], 57, |g, x| {
        let a = g.slice0(x, 1, 3)?;
        let b = g.slice0(x, 0, 2)?;
        g.concat0(&[a, b, x])
    }, 1e-6);
    check_grad(&[1], 58, |g, s| {
        let b = g.broadcast(s, &[2, 2])?;
        Ok(g.square(b))
    }, 1e-6);
    // Clamp edges sit away from the sampled values, so the kink is inert.
    check_grad(&[4], 59, |g, x| {
        let c = g.clamp(x, -0.4, 0.6);
        Ok(g.square(c))
    }, 1e-4);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.var_leaf(Tensor::zeros(&[3]));
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_does_not_mutate_forward_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.var_leaf(Tensor::randn(&[4, 4], &mut rng));
    let t = g.transpose(x).unwrap();
    let m = g.matmul(x, t).unwrap();
    let y = g.sum(m);
    let before: Vec<Vec<f64>> = [x, t, m, y].iter().map(|&n| g.value(n).data().to_vec()).collect();
    g.backward(y).unwrap();
    for (i, &n) in [x, t, m, y].iter().enumerate() {
        assert_eq!(g.value(n).data(), before[i].as_slice(), "node {i} changed");
    }
}

#[test]
fn gradients_accumulate_over_shared_subexpressions() {
    // y = x*x + x => dy/dx = 2x + 1.
    let mut g = Graph::new();
    let x = g.var_leaf(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(g.value(grads.get(x).unwrap()).item(), 7.0);
}

#[test]
fn constant_leaves_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.var_leaf(Tensor::scalar(2.0));
    let c = g.leaf(Tensor::scalar(5.0));
    let y = g.mul(x, c).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(g.value(grads.get(x).unwrap()).item(), 5.0);
}

#[test]
fn graph_reruns_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut g = Graph::new();
        let x = g.var_leaf(Tensor::randn(&[3, 8, 8], &mut rng));
        let k = g.var_leaf(Tensor::randn(&[4, 3, 3, 3], &mut rng));
        let c = g.conv2d(x, k, 2).unwrap();
        let a = g.swish(c);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        let gk = g.detach(grads.get(k).unwrap());
        (g.value(s).item(), gk.data().to_vec())
    };
    let (s1, g1) = run();
    let (s2, g2) = run();
    assert_eq!(s1.to_bits(), s2.to_bits());
    assert_eq!(g1.len(), g2.len());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn conv_stride_two_rounds_spatial_dims_up() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 5, 7]));
    let k = g.leaf(Tensor::zeros(&[2, 1, 3, 3]));
    let y = g.conv2d(x, k, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 4]);
    let x32 = g.leaf(Tensor::zeros(&[1, 32, 32]));
    let y32 = g.conv2d(x32, k, 2).unwrap();
    assert_eq!(g.value(y32).shape(), &[2, 16, 16]);
}

#[test]
fn conv_rejects_channel_mismatch_and_bad_stride() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 4, 4]));
    let k = g.leaf(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, 1), Err(crate::error::Error::Shape(_))));
    let k_ok = g.leaf(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, k_ok, 3), Err(crate::error::Error::Contract(_))));
}

#[test]
fn upsample_then_pool_returns_four_times_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::randn(&[2, 3, 3], &mut rng));
    let up = g.upsample2x(x).unwrap();
    assert_eq!(g.value(up).shape(), &[2, 6, 6]);
    let down = g.sum_pool2x(up).unwrap();
    let expect = g.value(x).map(|v| 4.0 * v);
    for (a, b) in g.value(down).data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
