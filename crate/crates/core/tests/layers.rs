use aures::nn::{
    activation, activation_scalar, apply_buffer_updates, standardized_weight, stochastic_depth,
    Ctx, Linear, Norm, NormKind, ParamStore, Scope, SeparableConv, SqueezeExcite, WsConv,
    BN_MOMENTUM, NORM_EPS,
};
use aures::tensor::{conv2d_forward, grad_check, Conv2dSpec, GradCheck, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Eval-mode forward of `f` on `x` with parameters from `store`.
fn run(
    store: &ParamStore,
    x: &Tensor,
    training: bool,
    f: impl Fn(&mut Ctx<'_>, Var) -> Var,
) -> Tensor {
    let mut tape = Tape::inference();
    let vars = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut cx = Ctx::new(&mut tape, &vars, training);
    let y = f(&mut cx, xv);
    tape.value(y).clone()
}

/// Finite-difference check of a layer over all its parameters and its input.
fn check_layer(
    store: &ParamStore,
    x: &Tensor,
    training: bool,
    f: impl Fn(&mut Ctx<'_>, Var) -> Var,
) -> f64 {
    let mut params: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    params.push(x.clone());
    let probe = rand_tensor(run(store, x, training, &f).shape().to_vec(), 999);
    let report = grad_check(
        |tape, p| {
            let (vars, input) = p.split_at(p.len() - 1);
            let mut cx = Ctx::new(tape, vars, training);
            let y = f(&mut cx, input[0]);
            // Random projection so every output coordinate matters.
            let w = tape.constant(probe.clone());
            let yw = tape.mul(y, w)?;
            tape.sum_all(yw)
        },
        &params,
        &GradCheck::default(),
    )
    .unwrap();
    report.max_rel_error
}

fn new_store(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

/// Plain nested-loop convolution without groups, stride 1, no padding.
fn loop_conv(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (h - kh + 1, wd - kw + 1);
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                acc += x.data()[((b * c + ic) * h + i + di) * wd + j + dj]
                                    * w.data()[((oc * c + ic) * kh + di) * kw + dj];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn constant_kernel_outputs_bias() {
    let (mut store, mut rng) = new_store(0);
    let conv = WsConv::new(
        &mut Scope::new(&mut store, &mut rng),
        2,
        3,
        (3, 3),
        Conv2dSpec::default(),
    )
    .unwrap();
    store.get_mut(conv.weight).data_mut().fill(0.7);
    store
        .get_mut(conv.bias)
        .data_mut()
        .copy_from_slice(&[0.5, -1.0, 2.0]);
    let y = run(&store, &rand_tensor(vec![1, 2, 5, 5], 1), false, |cx, x| {
        conv.forward(cx, x).unwrap()
    });
    for (i, v) in y.data().iter().enumerate() {
        let expected = [0.5, -1.0, 2.0][i / 9];
        assert_eq!(*v, expected);
    }
}

#[test]
fn standardized_weight_statistics() {
    let w = rand_tensor(vec![4, 3, 3, 3], 2);
    let gain = [0.5, 1.0, 2.0, 3.0];
    let fan_in = 27.0;
    let s = standardized_weight(&w, &gain).unwrap();
    for (o, row) in s.data().chunks(27).enumerate() {
        // Ŵ/gain: mean 0, variance 1/fan_in.
        let u: Vec<f64> = row.iter().map(|v| v / gain[o]).collect();
        let mean = u.iter().sum::<f64>() / fan_in;
        let var = u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fan_in;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0 / fan_in).abs() < 1e-6, "{var}");
        // Ŵ·√fan_in/gain: mean 0, unit variance.
        let scaled_var = var * fan_in;
        assert!((scaled_var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn ws_conv_matches_standardize_then_plain_conv() {
    let (mut store, mut rng) = new_store(3);
    let conv = WsConv::new(
        &mut Scope::new(&mut store, &mut rng),
        3,
        4,
        (2, 3),
        Conv2dSpec::default(),
    )
    .unwrap();
    store
        .get_mut(conv.gain)
        .data_mut()
        .copy_from_slice(&[1.5, 0.5, 1.0, 2.0]);
    store
        .get_mut(conv.bias)
        .data_mut()
        .copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
    let x = rand_tensor(vec![2, 3, 6, 7], 4);
    let y = run(&store, &x, false, |cx, x| conv.forward(cx, x).unwrap());

    // Oracle: standardize by hand, then nested-loop convolution.
    let raw = store.get(conv.weight);
    let gain = store.get(conv.gain).data().to_vec();
    let fan_in = 3 * 2 * 3;
    let mut k = raw.data().to_vec();
    for (o, row) in k.chunks_mut(fan_in).enumerate() {
        let mean = row.iter().sum::<f64>() / fan_in as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fan_in as f64;
        let denom = var.sqrt().max(1e-8) * (fan_in as f64).sqrt();
        row.iter_mut()
            .for_each(|v| *v = gain[o] * (*v - mean) / denom);
    }
    let kt = Tensor::new(raw.shape().to_vec(), k).unwrap();
    let mut oracle = loop_conv(&x, &kt);
    let plane = 5 * 5;
    for (i, v) in oracle.iter_mut().enumerate() {
        *v += [0.1, 0.2, 0.3, 0.4][(i / plane) % 4];
    }
    let diff = y
        .data()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn ws_conv_ignores_constant_weight_offset() {
    let (mut store, mut rng) = new_store(5);
    let conv = WsConv::new(
        &mut Scope::new(&mut store, &mut rng),
        2,
        2,
        (3, 3),
        Conv2dSpec::default(),
    )
    .unwrap();
    let x = rand_tensor(vec![1, 2, 6, 6], 6);
    let a = run(&store, &x, false, |cx, x| conv.forward(cx, x).unwrap());
    store
        .get_mut(conv.weight)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += 3.25);
    let b = run(&store, &x, false, |cx, x| conv.forward(cx, x).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-8);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let (mut store, mut rng) = new_store(0);
    let norm = Norm::new(
        &mut Scope::new(&mut store, &mut rng),
        NormKind::LayerNorm,
        3,
    )
    .unwrap();
    let y = run(
        &store,
        &Tensor::full(vec![2, 3, 4, 4], 5.0),
        false,
        |cx, x| norm.forward(cx, x).unwrap(),
    );
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn instance_norm_ignores_per_channel_offsets() {
    let (mut store, mut rng) = new_store(0);
    let norm = Norm::new(
        &mut Scope::new(&mut store, &mut rng),
        NormKind::InstanceNorm,
        3,
    )
    .unwrap();
    let x = rand_tensor(vec![2, 3, 4, 5], 7);
    let mut shifted = x.clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        *v += (i / 20) as f64 * 1.5 - 2.0;
    }
    let a = run(&store, &x, false, |cx, x| norm.forward(cx, x).unwrap());
    let b = run(&store, &shifted, false, |cx, x| {
        norm.forward(cx, x).unwrap()
    });
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn batch_norm_hand_computed() {
    let (mut store, mut rng) = new_store(0);
    let norm = Norm::new(
        &mut Scope::new(&mut store, &mut rng),
        NormKind::BatchNorm,
        1,
    )
    .unwrap();
    // Batch 2×1×1×2: values 1, 3 | 5, 7. Mean 4, population variance 5.
    let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let mut tape = Tape::inference();
    let vars = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut cx = Ctx::new(&mut tape, &vars, true);
    let y = norm.forward(&mut cx, xv).unwrap();
    let updates = std::mem::take(&mut cx.buffer_updates);
    let denom = (5.0f64 + 1e-5).sqrt();
    let expected = [-3.0 / denom, -1.0 / denom, 1.0 / denom, 3.0 / denom];
    for (a, b) in tape.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    apply_buffer_updates(&mut store, updates);
    let rm = store.get(store.find("running_mean").unwrap()).data()[0];
    let rv = store.get(store.find("running_var").unwrap()).data()[0];
    assert!((rm - (1.0 - BN_MOMENTUM) * 4.0).abs() < 1e-12);
    assert!((rv - (BN_MOMENTUM + (1.0 - BN_MOMENTUM) * 5.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_eval_uses_initial_running_stats() {
    let (mut store, mut rng) = new_store(0);
    let norm = Norm::new(
        &mut Scope::new(&mut store, &mut rng),
        NormKind::BatchNorm,
        2,
    )
    .unwrap();
    let x = rand_tensor(vec![1, 2, 3, 3], 8);
    let y = run(&store, &x, false, |cx, x| norm.forward(cx, x).unwrap());
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b / (1.0 + NORM_EPS).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_training_rejects_single_value_batches() {
    let (mut store, mut rng) = new_store(0);
    let norm = Norm::new(
        &mut Scope::new(&mut store, &mut rng),
        NormKind::BatchNorm,
        2,
    )
    .unwrap();
    let mut tape = Tape::inference();
    let vars = store.bind(&mut tape);
    let xv = tape.constant(rand_tensor(vec![1, 2, 1, 1], 1));
    let mut cx = Ctx::new(&mut tape, &vars, true);
    assert!(norm.forward(&mut cx, xv).is_err());
}

#[test]
fn per_example_outputs_do_not_depend_on_batch_except_batch_norm() {
    let x = rand_tensor(vec![3, 2, 4, 4], 9);
    let first = Tensor::new(vec![1, 2, 4, 4], x.data()[..32].to_vec()).unwrap();
    for kind in NormKind::ALL {
        let (mut store, mut rng) = new_store(1);
        let norm = Norm::new(&mut Scope::new(&mut store, &mut rng), kind, 2).unwrap();
        let batched = run(&store, &x, true, |cx, x| norm.forward(cx, x).unwrap());
        let alone = run(&store, &first, true, |cx, x| norm.forward(cx, x).unwrap());
        let diff = batched.data()[..32]
            .iter()
            .zip(alone.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if kind == NormKind::BatchNorm {
            assert!(
                diff > 1e-3,
                "batch norm unexpectedly batch independent: {diff}"
            );
        } else {
            assert!(diff < 1e-6, "{kind:?}: {diff}");
        }
    }
}

#[test]
fn activation_basics() {
    assert_eq!(activation_scalar(0.0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 1_000_000;
    let ys: Vec<f64> = (0..n)
        .map(|_| activation_scalar(StandardNormal.sample(&mut rng)))
        .collect();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((var - 1.0).abs() < 0.01, "variance {var}");
}

#[test]
fn activation_is_monotone_above_its_minimum() {
    // Locate the minimizer on a fine grid; GELU dips below zero there.
    let xmin = (0..30_000)
        .map(|i| -3.0 + i as f64 * 1e-4)
        .min_by(|a, b| activation_scalar(*a).total_cmp(&activation_scalar(*b)))
        .unwrap();
    assert!((-0.80..-0.70).contains(&xmin), "{xmin}");
    let grid: Vec<f64> = (0..1000)
        .map(|i| xmin + i as f64 * (6.0 - xmin) / 999.0)
        .collect();
    for w in grid.windows(2) {
        assert!(activation_scalar(w[1]) >= activation_scalar(w[0]), "{w:?}");
    }
    // Below the minimizer the function decreases again (not globally monotone).
    assert!(activation_scalar(-3.0) > activation_scalar(xmin));
}

#[test]
fn activation_layer_matches_scalar_form() {
    let x = rand_tensor(vec![5], 11);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = activation(&mut tape, xv).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, activation_scalar(*b));
    }
}

fn sd_run(branch: &Tensor, rate: f64, training: bool, seed: u64) -> Tensor {
    let mut tape = Tape::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bv = tape.constant(branch.clone());
    let mut cx = Ctx::new(&mut tape, &[], training).with_rng(&mut rng);
    let y = stochastic_depth(&mut cx, bv, rate).unwrap();
    tape.value(y).clone()
}

#[test]
fn stochastic_depth_identities() {
    let b = rand_tensor(vec![4, 2, 3, 3], 12);
    assert_eq!(sd_run(&b, 0.0, true, 1), b);
    assert_eq!(sd_run(&b, 0.0, false, 1), b);
    assert_eq!(sd_run(&b, 0.5, false, 1), b);
}

#[test]
fn stochastic_depth_keep_rate() {
    let n = 10_000;
    let y = sd_run(&Tensor::full(vec![n, 1, 1, 1], 1.0), 0.1, true, 13);
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.9).abs() < 0.01, "{kept}");
    assert!(y
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
}

#[test]
fn stochastic_depth_preserves_expectation() {
    let n = 100_000;
    let y = sd_run(&Tensor::full(vec![n, 1, 1, 1], 0.8), 0.1, true, 14);
    let mean = y.data().iter().sum::<f64>() / n as f64;
    assert!((mean - 0.8).abs() / 0.8 < 0.02, "{mean}");
}

#[test]
fn separable_identity_kernels() {
    let (mut store, mut rng) = new_store(0);
    let mut sep =
        SeparableConv::new(&mut Scope::new(&mut store, &mut rng), 3, (1, 1), (1, 1), 3).unwrap();
    sep.set_standardize(false);
    store.get_mut(sep.time.weight).data_mut().fill(1.0);
    store.get_mut(sep.freq.weight).data_mut().fill(1.0);
    let x = rand_tensor(vec![2, 3, 5, 4], 15);
    assert_eq!(
        run(&store, &x, false, |cx, x| sep.forward(cx, x).unwrap()),
        x
    );
}

#[test]
fn separable_equals_rank_one_full_conv() {
    let (mut store, mut rng) = new_store(0);
    let c = 2;
    let mut sep =
        SeparableConv::new(&mut Scope::new(&mut store, &mut rng), c, (3, 3), (1, 2), c).unwrap();
    sep.set_standardize(false);
    let u = rand_tensor(vec![c, 1, 3, 1], 16);
    let v = rand_tensor(vec![c, 1, 1, 3], 17);
    store
        .get_mut(sep.time.weight)
        .data_mut()
        .copy_from_slice(u.data());
    store
        .get_mut(sep.freq.weight)
        .data_mut()
        .copy_from_slice(v.data());
    let full = Tensor::from_fn(vec![c, 1, 3, 3], |i| {
        let (ch, r, col) = (i / 9, (i / 3) % 3, i % 3);
        u.data()[ch * 3 + r] * v.data()[ch * 3 + col]
    });
    let x = rand_tensor(vec![1, c, 25, 32], 18);
    let y = run(&store, &x, false, |cx, x| sep.forward(cx, x).unwrap());
    let oracle = conv2d_forward(
        &x,
        &full,
        Conv2dSpec {
            stride: (1, 2),
            padding: (1, 1),
            groups: c,
        },
    )
    .unwrap();
    assert_eq!(y.shape(), &[1, c, 25, 16]);
    assert!(y.max_abs_diff(&oracle) < 1e-10);
}

#[test]
fn linear_matches_loop() {
    let (mut store, mut rng) = new_store(19);
    let lin = Linear::new(&mut Scope::new(&mut store, &mut rng), 3, 2).unwrap();
    store
        .get_mut(lin.bias)
        .data_mut()
        .copy_from_slice(&[0.5, -0.5]);
    let x = rand_tensor(vec![2, 3], 20);
    let y = run(&store, &x, false, |cx, x| lin.forward(cx, x).unwrap());
    let w = store.get(lin.weight).data();
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = [0.5, -0.5][j];
            for k in 0..3 {
                acc += x.data()[i * 3 + k] * w[k * 2 + j];
            }
            assert!((y.data()[i * 2 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn squeeze_excite_gates_channels_within_zero_two() {
    let (mut store, mut rng) = new_store(21);
    let se = SqueezeExcite::new(&mut Scope::new(&mut store, &mut rng), 4, 0.5).unwrap();
    let x = Tensor::full(vec![1, 4, 3, 3], 1.0);
    let y = run(&store, &x, false, |cx, x| se.forward(cx, x).unwrap());
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 2.0));
    // Zeroed expansion weights give sigmoid(0)·2 = 1: the identity gate.
    store.get_mut(se.expand.weight).data_mut().fill(0.0);
    let y = run(&store, &x, false, |cx, x| se.forward(cx, x).unwrap());
    assert_eq!(y, x);
}

#[test]
fn every_layer_passes_finite_differences() {
    let x = rand_tensor(vec![2, 4, 5, 6], 22);
    let mut worst = Vec::new();

    let (mut store, mut rng) = new_store(23);
    let conv = WsConv::new(
        &mut Scope::new(&mut store, &mut rng),
        4,
        4,
        (3, 3),
        Conv2dSpec {
            stride: (1, 2),
            padding: (1, 1),
            groups: 2,
        },
    )
    .unwrap();
    worst.push((
        "ws_conv",
        check_layer(&store, &x, false, |cx, v| conv.forward(cx, v).unwrap()),
    ));

    for kind in NormKind::ALL {
        let (mut store, mut rng) = new_store(24);
        let norm = Norm::new(&mut Scope::new(&mut store, &mut rng), kind, 4).unwrap();
        for id in store.trainable_ids().collect::<Vec<_>>() {
            let noise = rand_tensor(store.get(id).shape().to_vec(), 25);
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(p, n)| *p += 0.3 * n);
        }
        worst.push((
            kind.tag(),
            check_layer(&store, &x, true, |cx, v| norm.forward(cx, v).unwrap()),
        ));
    }

    let (mut store, mut rng) = new_store(26);
    let sep =
        SeparableConv::new(&mut Scope::new(&mut store, &mut rng), 4, (3, 3), (1, 2), 2).unwrap();
    worst.push((
        "separable",
        check_layer(&store, &x, false, |cx, v| sep.forward(cx, v).unwrap()),
    ));

    let (mut store, mut rng) = new_store(27);
    let se = SqueezeExcite::new(&mut Scope::new(&mut store, &mut rng), 4, 0.5).unwrap();
    worst.push((
        "squeeze_excite",
        check_layer(&store, &x, false, |cx, v| se.forward(cx, v).unwrap()),
    ));

    let (mut store, mut rng) = new_store(28);
    let lin = Linear::new(&mut Scope::new(&mut store, &mut rng), 6, 3).unwrap();
    let x2 = rand_tensor(vec![4, 6], 29);
    worst.push((
        "linear",
        check_layer(&store, &x2, false, |cx, v| lin.forward(cx, v).unwrap()),
    ));

    let store = ParamStore::new();
    worst.push((
        "activation",
        check_layer(&store, &x, false, |cx, v| activation(cx.tape, v).unwrap()),
    ));

    for (name, err) in &worst {
        assert!(*err < 1e-4, "{name}: relative error {err}");
    }
}
