use convrender_autograd::gradcheck::{numeric_gradient, relative_error};
use convrender_autograd::{grad, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Checks d(scalar f)/dx against finite differences for one input.
fn check(shape: &[usize], seed: u64, f: impl Fn(&Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(shape, &mut rng);
    let x = Var::leaf(x0.clone());
    let y = f(&x);
    let g = grad(&y, &[&x], false)[0].clone().expect("gradient");
    let num = numeric_gradient(x0.data(), 1e-6, |p| f(&Var::constant(Tensor::new(shape, p.to_vec()))).item());
    let err = relative_error(g.value().data(), &num);
    assert!(err < 1e-6, "relative error {}", err);
}

#[test]
fn elementwise_ops() {
    check(&[3, 4], 1, |x| x.exp().mul(x).sum());
    check(&[3, 4], 2, |x| x.sigmoid().square().sum());
    check(&[3, 4], 3, |x| x.softplus().sum());
    check(&[3, 4], 4, |x| x.tanh().mul(&x.leaky_relu(0.2)).sum());
    check(&[5], 5, |x| x.square().add_scalar(1.0).ln().sum());
    check(&[5], 6, |x| x.square().add_scalar(0.5).powf(-0.5).sum());
    check(&[6], 7, |x| x.scale(3.0).huber(1.0).sum());
    check(&[2, 3], 8, |x| x.div(&x.square().add_scalar(2.0)).sum());
}

#[test]
fn broadcasting_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let b = Var::constant(Tensor::randn(&[1, 3, 1], &mut rng));
    check(&[2, 3, 4], 11, |x| x.mul(&b).sub(&b).square().sum());
    check(&[1, 3, 1], 12, |x| {
        let big = Var::constant(Tensor::ones(&[2, 3, 4]));
        big.mul(x).add(x).square().sum()
    });
    check(&[2, 3, 4], 13, |x| x.permute(&[2, 0, 1]).narrow(0, 1, 2).square().sum());
    check(&[2, 3], 14, |x| Var::concat(&[x, &x.scale(2.0)], 1).embed(0, 1, 4).exp().sum());
    check(&[2, 3], 15, |x| x.sum_to(&[1, 3]).square().sum().add(&x.mean()));
}

#[test]
fn matmul_all_transpositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let w = Var::constant(Tensor::randn(&[4, 3], &mut rng));
    let wt = Var::constant(Tensor::randn(&[3, 4], &mut rng));
    check(&[2, 4], 21, |x| x.matmul(&w).square().sum());
    check(&[4, 2], 22, |x| x.matmul_t(true, &w, false).square().sum());
    check(&[2, 3], 23, |x| x.matmul_t(false, &w, true).square().sum());
    check(&[3, 2], 24, |x| x.matmul_t(true, &w, true).square().sum());
    check(&[2, 4], 25, |x| x.matmul(&wt.permute(&[1, 0])).square().sum());
}

#[test]
fn conv_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let w = Var::constant(Tensor::randn(&[3, 2, 3, 3], &mut rng));
    let x0 = Var::constant(Tensor::randn(&[2, 2, 4, 4], &mut rng));
    check(&[2, 2, 4, 4], 31, |x| x.conv2d(&w, 1).square().sum());
    check(&[3, 2, 3, 3], 32, |w| x0.conv2d(w, 1).square().sum());
    check(&[2, 2, 4, 4], 33, |x| x.upsample_nearest(2).avg_pool(2).sum_pool(2).square().sum());
    check(&[1, 2, 3, 4], 34, |x| x.resize_bilinear(6, 8).square().sum());
}

#[test]
fn second_order_through_convolutions() {
    // gradient penalty: d/dw ‖∂/∂x sum(lrelu(conv(x, w))²)‖²
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x0 = Tensor::randn(&[2, 2, 4, 4], &mut rng);
    let w0 = Tensor::randn(&[2, 2, 3, 3], &mut rng);
    let penalty = |w: &Var, create: bool| {
        let x = Var::leaf(x0.clone());
        let y = x.conv2d(w, 1).leaky_relu(0.2).square().sum();
        let gx = grad(&y, &[&x], create)[0].clone().unwrap();
        gx.square().sum()
    };
    let w = Var::leaf(w0.clone());
    let p = penalty(&w, true);
    let gw = grad(&p, &[&w], false)[0].clone().unwrap();
    let num = numeric_gradient(w0.data(), 1e-6, |d| penalty(&Var::constant(Tensor::new(w0.shape(), d.to_vec())), false).item());
    let err = relative_error(gw.value().data(), &num);
    assert!(err < 1e-6, "relative error {}", err);
}

#[test]
fn gradients_do_not_leak_into_constants() {
    let x = Var::leaf(Tensor::ones(&[2]));
    let c = Var::constant(Tensor::ones(&[2]));
    let y = x.mul(&c).sum();
    let g = grad(&y, &[&c], false);
    assert!(g[0].is_none());
    let d = x.detach().mul(&x).sum();
    let gx = grad(&d, &[&x], false)[0].clone().unwrap();
    assert_eq!(gx.value().data(), &[1.0, 1.0]);
}

proptest! {
    #[test]
    fn sum_to_is_adjoint_of_broadcast(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Tensor::randn(&[a, 1, c], &mut rng);
        let big = Tensor::randn(&[a, b, c], &mut rng);
        let lhs: f64 = small.broadcast_to(&[a, b, c]).mul(&big).sum();
        let rhs: f64 = big.sum_to(&[a, 1, c]).mul(&small).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }
}
