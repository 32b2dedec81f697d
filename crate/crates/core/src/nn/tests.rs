use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::softmax_cross_entropy;
use super::*;

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn loss_of(net: &Network, x: &Tensor, labels: &[usize], train: bool) -> f64 {
    let t = net.forward(x, train, None, &[]);
    softmax_cross_entropy(&t.output, labels).0
}

/// Central-difference check of both parameter and input gradients.
fn check_gradients(net: &mut Network, x: &Tensor, labels: &[usize], train: bool) {
    let trace = net.forward(x, train, None, &[]);
    let (_, g) = softmax_cross_entropy(&trace.output, labels);
    let mut grads = net.zero_grads();
    let dx = net.backward(&trace, g, &[], Some(&mut grads), true);

    let eps = 1e-6;
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (s, buf) in grads.0.iter().enumerate() {
        for i in (0..buf.len()).step_by(buf.len().div_ceil(6).max(1)) {
            flat.push((s, i));
        }
    }
    for (slot, idx) in flat {
        let bump = |net: &mut Network, delta: f64| {
            let mut s = 0;
            net.visit_params_mut(&mut |p| {
                if s == slot {
                    p[idx] += delta;
                }
                s += 1;
            });
        };
        bump(net, eps);
        let up = loss_of(net, x, labels, train);
        bump(net, -2.0 * eps);
        let down = loss_of(net, x, labels, train);
        bump(net, eps);
        let fd = (up - down) / (2.0 * eps);
        let an = grads.0[slot][idx];
        assert!(
            (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
            "param slot {slot}[{idx}]: fd {fd} vs analytic {an}"
        );
    }
    for i in (0..x.len()).step_by(7) {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let up = loss_of(net, &xp, labels, train);
        xp.data_mut()[i] -= 2.0 * eps;
        let down = loss_of(net, &xp, labels, train);
        let fd = (up - down) / (2.0 * eps);
        let an = dx.data()[i];
        assert!(
            (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
            "input {i}: fd {fd} vs analytic {an}"
        );
    }
}

#[test]
fn conv_pool_dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = Network::new(vec![
        Layer::Normalize {
            mean: vec![0.1, -0.2],
            std: vec![0.5, 2.0],
        },
        Layer::Conv2d(Conv2d::new(2, 3, 3, 1, 1, &mut rng)),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        Layer::Conv2d(Conv2d::new(3, 4, 3, 2, 1, &mut rng)),
        Layer::Relu,
        Layer::Flatten,
        Layer::Dense(Dense::new(16, 5, &mut rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(5, 3, &mut rng)),
    ]);
    let x = random_tensor(vec![3, 2, 8, 8], &mut rng);
    check_gradients(&mut net, &x, &[0, 2, 1], false);
}

#[test]
fn batchnorm_and_residual_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let block = Residual {
        body: vec![
            Layer::Conv2d(Conv2d::new(2, 4, 3, 2, 1, &mut rng)),
            Layer::BatchNorm(BatchNorm::new(4)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(4, 4, 3, 1, 1, &mut rng)),
        ],
        shortcut: vec![
            Layer::Conv2d(Conv2d::new(2, 4, 1, 2, 0, &mut rng)),
            Layer::BatchNorm(BatchNorm::new(4)),
        ],
    };
    let mut net = Network::new(vec![
        Layer::Residual(block),
        Layer::Relu,
        Layer::GlobalAvgPool,
        Layer::BatchNorm(BatchNorm::new(4)),
        Layer::Dense(Dense::new(4, 2, &mut rng)),
    ]);
    let x = random_tensor(vec![4, 2, 6, 6], &mut rng);
    check_gradients(&mut net, &x, &[0, 1, 1, 0], true);
    check_gradients(&mut net, &x, &[0, 1, 1, 0], false);
}

#[test]
fn injected_gradient_equals_gradient_of_summed_objective() {
    // d/dx [CE(f(x)) + <v, h(x)>] where h is an intermediate layer output.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::new(vec![
        Layer::Dense(Dense::new(4, 6, &mut rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(6, 3, &mut rng)),
    ]);
    let x = random_tensor(vec![2, 4], &mut rng);
    let labels = [1, 2];
    let v = random_tensor(vec![2, 6], &mut rng);
    let objective = |x: &Tensor| {
        let t = net.forward(x, false, None, &[1]);
        let ce = softmax_cross_entropy(&t.output, &labels).0;
        let dot: f64 = t.taps[0].data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        ce + dot
    };
    let t = net.forward(&x, false, None, &[1]);
    let (_, g) = softmax_cross_entropy(&t.output, &labels);
    let dx = net.backward(&t, g, &[(1, &v)], None, true);
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += 1e-6;
        let up = objective(&xp);
        xp.data_mut()[i] -= 2e-6;
        let down = objective(&xp);
        let fd = (up - down) / 2e-6;
        assert!((fd - dx.data()[i]).abs() < 1e-6, "{fd} vs {}", dx.data()[i]);
    }
}

#[test]
fn dropout_is_identity_at_inference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Network::new(vec![Layer::Dropout { rate: 0.5 }]);
    let x = random_tensor(vec![2, 10], &mut rng);
    assert_eq!(net.predict(&x), x);
    let t = net.forward(&x, true, Some(&mut rng), &[]);
    let zeros = t.output.data().iter().filter(|v| **v == 0.0).count();
    assert!(zeros > 0 && zeros < 20);
}

#[test]
fn adam_fits_a_tiny_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::new(vec![
        Layer::Dense(Dense::new(2, 8, &mut rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(8, 2, &mut rng)),
    ]);
    let x = Tensor::from_rows(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
    let y = [0, 1, 1, 0];
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, &net);
    let mut grads = net.zero_grads();
    for _ in 0..500 {
        grads.zero();
        let t = net.forward(&x, true, None, &[]);
        let (_, g) = softmax_cross_entropy(&t.output, &y);
        net.backward(&t, g, &[], Some(&mut grads), false);
        opt.step(&mut net, &grads);
    }
    let out = net.predict(&x);
    for (i, &label) in y.iter().enumerate() {
        assert_eq!(loss::argmax(out.row(i)), label);
    }
}

#[test]
fn few_channel_conv_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (cin, cout, k, pad, h, w) in [(1, 1, 5, 2, 10, 12), (2, 2, 3, 0, 4, 7), (1, 3, 3, 1, 3, 2), (1, 2, 5, 2, 3, 2)] {
        let conv = Conv2d::new(cin, cout, k, 1, pad, &mut rng);
        let x = random_tensor(vec![2, cin, h, w], &mut rng);
        let net = Network::new(vec![Layer::Conv2d(conv.clone())]);
        let y = net.predict_with_taps(&x, &[]).0;
        let (oh, ow) = conv.output_hw(h, w);
        assert_eq!(y.shape(), &[2, cout, oh, ow]);
        for n in 0..2 {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut want = conv.bias[o];
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (iy, ix) = ((oy + ky) as isize - pad as isize, (ox + kx) as isize - pad as isize);
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        want += conv.weight[((o * cin + c) * k + ky) * k + kx]
                                            * x.data()[((n * cin + c) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * cout + o) * oh + oy) * ow + ox];
                        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                    }
                }
            }
        }
    }
}

#[test]
fn single_channel_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut net = Network::new(vec![
        Layer::Conv2d(Conv2d::new(1, 1, 5, 1, 2, &mut rng)),
        Layer::Relu,
        Layer::Flatten,
        Layer::Dense(Dense::new(24, 3, &mut rng)),
    ]);
    let x = random_tensor(vec![2, 1, 4, 6], &mut rng);
    check_gradients(&mut net, &x, &[1, 2], false);
}
