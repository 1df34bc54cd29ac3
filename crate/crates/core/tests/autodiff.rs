//! Autodiff ops against finite differences and brute-force kernels.

use cnmm::autodiff::{BnMode, Graph, RunningStats, Var};
use cnmm::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
const TRIALS: usize = 100;
const KERNEL_TOL: f64 = 1e-12;

type Build = dyn Fn(&mut Graph, &[Var]) -> cnmm::Result<Var>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar objective: `build` projected onto a fixed random direction.
fn objective(inputs: &[Tensor], proj: &Option<Tensor>, build: &Build) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = match proj {
        Some(p) => {
            let p = g.leaf(p.clone());
            let m = g.mul(out, p).unwrap();
            g.sum(m).unwrap()
        }
        None => out,
    };
    (g, loss, vars)
}

/// Worst norm-wise relative error between autodiff and central differences over `check` inputs.
fn gradient_error(
    inputs: Vec<Tensor>,
    check: &[usize],
    build: &Build,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let probe = objective(&inputs, &None, build);
    let out_shape = probe.0.value(probe.1).shape().to_vec();
    let proj = (probe.0.value(probe.1).len() > 1).then(|| random(&out_shape, rng));
    let (g, loss, vars) = objective(&inputs, &proj, build);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for &i in check {
        let analytic = grads
            .get(vars[i])
            .expect("input reaches the loss")
            .data()
            .to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[k] += delta;
                let (g, loss, _) = objective(&moved, &proj, build);
                g.value(loss).item()
            };
            *slot = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if diff > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs `TRIALS` random cases of one op and asserts the worst gradient error.
fn check_op(
    name: &str,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>, Box<Build>),
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (inputs, check, build) = case(&mut rng);
        worst = worst.max(gradient_error(inputs, &check, &build, &mut rng));
    }
    assert!(
        worst < GRAD_TOL,
        "{name}: relative gradient error {worst:e}"
    );
}

/// Values kept away from the relu kink so central differences stay on one side.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    check_op("conv2d", 1, |rng| {
        let (n, ci, co) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
        let inputs = vec![random(&[n, ci, h, w], rng), random(&[co, ci, k, k], rng)];
        (
            inputs,
            vec![0, 1],
            Box::new(move |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], stride, pad)),
        )
    });
}

#[test]
fn depthwise_gradients_match_finite_differences() {
    check_op("depthwise_conv2d", 2, |rng| {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
        let inputs = vec![random(&[n, c, h, w], rng), random(&[c, 1, 3, 3], rng)];
        (
            inputs,
            vec![0, 1],
            Box::new(move |g: &mut Graph, v: &[Var]| g.depthwise_conv2d(v[0], v[1], stride, pad)),
        )
    });
}

#[test]
fn batch_norm_train_gradients_match_finite_differences() {
    check_op("batch_norm (batch statistics)", 3, |rng| {
        let (n, c) = (rng.random_range(2..=3), rng.random_range(1..=3));
        let shape = if rng.random_bool(0.5) {
            vec![n, c]
        } else {
            vec![n, c, 2, 3]
        };
        let inputs = vec![random(&shape, rng), random(&[c], rng), random(&[c], rng)];
        (
            inputs,
            vec![0, 1, 2],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let mut stats = RunningStats::new(c);
                let mode = BnMode::Train {
                    stats: &mut stats,
                    momentum: 0.9,
                };
                g.batch_norm(v[0], v[1], v[2], mode, 1e-5)
            }),
        )
    });
}

#[test]
fn batch_norm_eval_gradients_match_finite_differences() {
    check_op("batch_norm (running statistics)", 4, |rng| {
        let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let stats = RunningStats {
            mean: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let inputs = vec![
            random(&[n, c, 3, 2], rng),
            random(&[c], rng),
            random(&[c], rng),
        ];
        (
            inputs,
            vec![0, 1, 2],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                g.batch_norm(v[0], v[1], v[2], BnMode::Eval(&stats), 1e-5)
            }),
        )
    });
}

#[test]
fn pointwise_op_gradients_match_finite_differences() {
    check_op("relu", 5, |rng| {
        let inputs = vec![off_kink(&[2, 3, 2, 2], rng)];
        (
            inputs,
            vec![0],
            Box::new(|g: &mut Graph, v: &[Var]| g.relu(v[0])),
        )
    });
    check_op("sigmoid", 6, |rng| {
        let inputs = vec![random(&[rng.random_range(1..=6)], rng)];
        (
            inputs,
            vec![0],
            Box::new(|g: &mut Graph, v: &[Var]| g.sigmoid(v[0])),
        )
    });
    check_op("scale", 7, |rng| {
        let c = rng.random_range(-2.0..2.0);
        let inputs = vec![random(&[3, 4], rng)];
        (
            inputs,
            vec![0],
            Box::new(move |g: &mut Graph, v: &[Var]| g.scale(v[0], c)),
        )
    });
    check_op("add", 8, |rng| {
        let inputs = vec![random(&[2, 5], rng), random(&[2, 5], rng)];
        (
            inputs,
            vec![0, 1],
            Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1])),
        )
    });
    check_op("mul", 9, |rng| {
        let inputs = vec![random(&[2, 2, 2, 2], rng), random(&[2, 2, 2, 2], rng)];
        (
            inputs,
            vec![0, 1],
            Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1])),
        )
    });
    check_op("sum", 10, |rng| {
        let inputs = vec![random(&[rng.random_range(1..=3), 4], rng)];
        (
            inputs,
            vec![0],
            Box::new(|g: &mut Graph, v: &[Var]| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            }),
        )
    });
}

#[test]
fn pooling_gradients_match_finite_differences() {
    check_op("avg_pool2", 11, |rng| {
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let inputs = vec![random(&[2, 2, h, w], rng)];
        (
            inputs,
            vec![0],
            Box::new(|g: &mut Graph, v: &[Var]| g.avg_pool2(v[0])),
        )
    });
    check_op("global_avg_pool", 12, |rng| {
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let inputs = vec![random(&[2, 3, h, w], rng)];
        (
            inputs,
            vec![0],
            Box::new(|g: &mut Graph, v: &[Var]| g.global_avg_pool(v[0])),
        )
    });
}

#[test]
fn linear_gradients_match_finite_differences() {
    check_op("linear", 13, |rng| {
        let (n, din, dout) = (
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=4),
        );
        let bias = rng.random_bool(0.5);
        let inputs = vec![
            random(&[n, din], rng),
            random(&[dout, din], rng),
            random(&[dout], rng),
        ];
        let check = if bias { vec![0, 1, 2] } else { vec![0, 1] };
        (
            inputs,
            check,
            Box::new(move |g: &mut Graph, v: &[Var]| g.linear(v[0], v[1], bias.then_some(v[2]))),
        )
    });
}

#[test]
fn affine_combine_gradients_match_finite_differences() {
    check_op("affine_combine", 14, |rng| {
        let n = rng.random_range(1..=3);
        let gates = if rng.random_bool(0.5) { 1 } else { n };
        let g = Tensor::from_fn(&[gates], |_| rng.random_range(0.05..0.95));
        let inputs = vec![g, random(&[n, 2, 2, 2], rng), random(&[n, 2, 2, 2], rng)];
        (
            inputs,
            vec![0, 1, 2],
            Box::new(|g: &mut Graph, v: &[Var]| g.affine_combine(v[0], v[1], v[2])),
        )
    });
}

#[test]
fn gate_and_loss_gradients_match_finite_differences() {
    check_op("concrete_gate", 15, |rng| {
        let noise: Vec<f64> = (0..rng.random_range(1..=4))
            .map(|_| {
                let u: f64 = rng.random_range(0.01..0.99);
                (u / (1.0 - u)).ln()
            })
            .collect();
        let temperature = rng.random_range(0.5..3.0);
        let inputs = vec![random(&[1], rng)];
        (
            inputs,
            vec![0],
            Box::new(move |g: &mut Graph, v: &[Var]| g.concrete_gate(v[0], &noise, temperature)),
        )
    });
    check_op("softmax_cross_entropy", 16, |rng| {
        let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let inputs = vec![Tensor::from_fn(&[n, k], |_| rng.random_range(-3.0..3.0))];
        (
            inputs,
            vec![0],
            Box::new(move |g: &mut Graph, v: &[Var]| g.softmax_cross_entropy(v[0], &labels)),
        )
    });
    check_op("weighted_sum", 17, |rng| {
        let weights: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inputs = vec![random(&[1], rng), random(&[1], rng), random(&[1], rng)];
        (
            inputs,
            vec![0, 1, 2],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let prod = g.mul(v[0], v[1])?;
                g.weighted_sum(&[(prod, weights[0]), (v[1], weights[1]), (v[2], weights[2])])
            }),
        )
    });
}

#[test]
fn composite_block_gradients_match_finite_differences() {
    check_op("conv-bn-relu-pool-linear-loss", 18, |rng| {
        let inputs = vec![
            random(&[2, 2, 4, 4], rng),
            random(&[3, 2, 3, 3], rng),
            Tensor::from_fn(&[3], |_| rng.random_range(0.5..1.5)),
            random(&[3], rng),
            random(&[2, 3], rng),
        ];
        (
            inputs,
            vec![0, 1, 2, 3, 4],
            Box::new(|g: &mut Graph, v: &[Var]| {
                let mut stats = RunningStats::new(3);
                let y = g.conv2d(v[0], v[1], 1, 1)?;
                let mode = BnMode::Train {
                    stats: &mut stats,
                    momentum: 0.9,
                };
                let y = g.batch_norm(y, v[2], v[3], mode, 1e-5)?;
                let y = g.sigmoid(y)?;
                let y = g.avg_pool2(y)?;
                let y = g.global_avg_pool(y)?;
                let y = g.linear(y, v[4], None)?;
                g.softmax_cross_entropy(y, &[0, 1])
            }),
        )
    });
}

/// Direct six-loop convolution with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * ci + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops_on_all_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut cases = 0;
    for ci in 1..=4 {
        for co in 1..=4 {
            for k in [1, 3] {
                for h in 1..=8 {
                    for w in 1..=8 {
                        for stride in 1..=2 {
                            for pad in 0..=1 {
                                let x = random(&[2, ci, h, w], &mut rng);
                                let kern = random(&[co, ci, k, k], &mut rng);
                                let mut g = Graph::new();
                                let (xv, wv) = (g.leaf(x.clone()), g.leaf(kern.clone()));
                                let fits = h + 2 * pad >= k && w + 2 * pad >= k;
                                match g.conv2d(xv, wv, stride, pad) {
                                    Ok(y) => {
                                        assert!(fits);
                                        let want = naive_conv(&x, &kern, stride, pad);
                                        let got = g.value(y);
                                        assert_eq!(got.shape(), want.shape());
                                        assert!(got.max_abs_diff(&want) <= KERNEL_TOL);
                                        cases += 1;
                                    }
                                    Err(e) => {
                                        assert!(!fits, "{e}");
                                        assert!(matches!(e, Error::Shape { .. }));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 7000);
}

#[test]
fn depthwise_equals_block_diagonal_dense_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let x = random(&[2, 2, 4, 4], &mut rng);
        let dw = random(&[2, 1, 3, 3], &mut rng);
        let mut dense = Tensor::zeros(&[2, 2, 3, 3]);
        for c in 0..2 {
            for k in 0..9 {
                dense.data_mut()[(c * 2 + c) * 9 + k] = dw.data()[c * 9 + k];
            }
        }
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut g = Graph::new();
            let (xv, dv, fv) = (g.leaf(x.clone()), g.leaf(dw.clone()), g.leaf(dense.clone()));
            let a = g.depthwise_conv2d(xv, dv, stride, pad).unwrap();
            let b = g.conv2d(xv, fv, stride, pad).unwrap();
            assert!(g.value(a).max_abs_diff(g.value(b)) <= KERNEL_TOL);
        }
    }
}

#[test]
fn identity_kernels_are_identity_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random(&[2, 3, 5, 4], &mut rng);
    let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let delta = Tensor::from_fn(&[3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, ev, dv) = (g.leaf(x.clone()), g.leaf(eye), g.leaf(delta));
    let a = g.conv2d(xv, ev, 1, 0).unwrap();
    let b = g.depthwise_conv2d(xv, dv, 1, 1).unwrap();
    assert_eq!(g.value(a), &x);
    assert_eq!(g.value(b), &x);
}

#[test]
fn ones_kernel_on_one_hot_counts_overlaps() {
    for hot in 0..9 {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == hot { 1.0 } else { 0.0 });
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
        let y = g.conv2d(xv, wv, 1, 1).unwrap();
        assert_eq!(g.value(y), &naive_conv(&x, &w, 1, 1));
        let (hy, hx) = (hot / 3, hot % 3);
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let near = (i / 3).abs_diff(hy) <= 1 && (i % 3).abs_diff(hx) <= 1;
            assert_eq!(v, f64::from(u8::from(near)));
        }
    }
}

#[test]
fn one_by_one_conv_flop_count() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 8, 4, 4]));
    let w = g.leaf(Tensor::zeros(&[8, 8, 1, 1]));
    g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.flops(), 2048);
}

#[test]
fn conv_shape_errors_are_descriptive() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.leaf(Tensor::zeros(&[2, 2, 3, 3]));
    let err = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
    assert!(
        err.contains("3 channels") && err.contains("expects 2"),
        "{err}"
    );
    let w3 = g.leaf(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w3, 3, 1),
        Err(Error::InvalidArgument(_))
    ));
    let dw = g.leaf(Tensor::zeros(&[2, 1, 3, 3]));
    assert!(g.depthwise_conv2d(x, dw, 1, 1).is_err());
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
    let gamma = g.leaf(Tensor::full(&[1], 1.0));
    let beta = g.leaf(Tensor::zeros(&[1]));
    let mut stats = RunningStats::new(1);
    let mode = BnMode::Train {
        stats: &mut stats,
        momentum: 0.9,
    };
    let y = g.batch_norm(x, gamma, beta, mode, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    // Running statistics use the unbiased variance.
    assert!((stats.mean[0] - 0.2).abs() < 1e-15);
    assert!((stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);

    let c = g.leaf(Tensor::full(&[4, 1], 2.0));
    let mut stats = RunningStats::new(1);
    let mode = BnMode::Train {
        stats: &mut stats,
        momentum: 0.9,
    };
    assert!(matches!(
        g.batch_norm(c, gamma, beta, mode, 0.0),
        Err(Error::InvalidArgument(_))
    ));

    let std = g.leaf(Tensor::new(vec![4, 1], vec![-1.5, -0.5, 0.5, 1.5]).unwrap());
    let scaled = g.scale(std, 1.0 / 1.25f64.sqrt()).unwrap();
    let mut stats = RunningStats::new(1);
    let mode = BnMode::Train {
        stats: &mut stats,
        momentum: 0.9,
    };
    let y = g.batch_norm(scaled, gamma, beta, mode, 1e-5).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(scaled)) < 1e-5);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let loss = g.sum(r).unwrap();
    assert_eq!(
        g.backward(loss).unwrap().get(x).unwrap().data(),
        &[0.0, 0.0, 1.0]
    );

    let c = g.leaf(Tensor::full(&[2, 3, 5, 7], 0.3));
    let p = g.global_avg_pool(c).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

    let m = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.avg_pool2(m).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);

    let odd = g.leaf(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
    let p = g.avg_pool2(odd).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(p).data(), &[3.0, 4.5, 7.5, 9.0]);
}

#[test]
fn affine_combine_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (a, b) = (random(&[2, 3], &mut rng), random(&[2, 3], &mut rng));
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let one = g.leaf(Tensor::scalar(1.0));
    let zero = g.leaf(Tensor::scalar(0.0));
    let y1 = g.affine_combine(one, av, bv).unwrap();
    let y0 = g.affine_combine(zero, av, bv).unwrap();
    assert_eq!(g.value(y1), &a);
    assert_eq!(g.value(y0), &b);

    let half = g.leaf(Tensor::scalar(0.5));
    let two = g.leaf(Tensor::scalar(2.0));
    let four = g.leaf(Tensor::scalar(4.0));
    let y = g.affine_combine(half, two, four).unwrap();
    assert_eq!(g.value(y).item(), 3.0);

    let gate = g.leaf(Tensor::scalar(0.3));
    let y = g.affine_combine(gate, av, bv).unwrap();
    let loss = g.sum(y).unwrap();
    let dg = g.backward(loss).unwrap().get(gate).unwrap().item();
    assert!((dg - (a.sum() - b.sum())).abs() < 1e-12);

    for bad in [-0.1, 1.1] {
        let gv = g.leaf(Tensor::scalar(bad));
        assert!(matches!(
            g.affine_combine(gv, av, bv),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = g.leaf(Tensor::full(&[2, 5], 0.7));
    let l = g.softmax_cross_entropy(uniform, &[1, 4]).unwrap();
    assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-15);

    let sharp = g.leaf(Tensor::new(vec![1, 3], vec![0.0, 800.0, 0.0]).unwrap());
    let l = g.softmax_cross_entropy(sharp, &[1]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let logits = Tensor::new(vec![2, 3], vec![0.1, -0.4, 1.2, 2.0, 0.0, -1.0]).unwrap();
    let lv = g.leaf(logits.clone());
    let l = g.softmax_cross_entropy(lv, &[2, 0]).unwrap();
    let grad = g.backward(l).unwrap().get(lv).unwrap().clone();
    for (i, &y) in [2usize, 0].iter().enumerate() {
        let row = &logits.data()[i * 3..i * 3 + 3];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (k, v) in row.iter().enumerate() {
            let want = (v.exp() / z - f64::from(u8::from(k == y))) / 2.0;
            assert!((grad.data()[i * 3 + k] - want).abs() < 1e-15);
        }
    }
    assert!(matches!(
        g.softmax_cross_entropy(lv, &[0, 3]),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn backward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = random(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let s = g.sum(xv).unwrap();
    assert!(g
        .backward(s)
        .unwrap()
        .get(xv)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));

    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    assert_eq!(g.backward(half).unwrap().get(xv).unwrap(), &x);

    assert!(matches!(g.backward(xv), Err(Error::Shape { .. })));
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut g = Graph::new();
        let x = g.leaf(random(&[2, 3, 6, 6], &mut rng));
        let w = g.leaf(random(&[4, 3, 3, 3], &mut rng));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let y = g.avg_pool2(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1e308));
    g.set_context("test block");
    let err = g.scale(x, 10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale", .. }));
    assert!(err.to_string().contains("test block"));
}
