//! Finite-difference checks for every tape op the detector uses.
//!
//! All checks run in `f64` so the comparison tolerance reflects the math,
//! not the storage precision.

use hsd_core::nn::ops::channel_stats;
use hsd_core::nn::{finite_diff_grad, max_rel_err, ParamStore, Tape};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u: f64 = rng.random::<f64>() - 0.5;
        u * 2.0
    })
}

/// Runs `f` as a taped scalar function of `x`, compares autograd to central
/// differences.
fn check_grad(
    shape: &[usize],
    seed: u64,
    f: impl Fn(&mut Tape<f64>, hsd_core::nn::Tid) -> hsd_core::nn::Tid,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = randn(shape, &mut rng);

    let mut store = ParamStore::<f64>::new();
    let px = store.add_param("x", x0.clone());

    let mut tape = Tape::new(true);
    let x = tape.param(&store, px);
    let out = f(&mut tape, x);
    let loss = tape.mean_all(out);
    tape.backward(loss);
    let analytic = tape.grad(x).expect("x grad").clone();

    let numeric = finite_diff_grad(
        |xv: &ArrayD<f64>| {
            let mut t = Tape::new(true);
            let xt = t.constant(xv.clone());
            let o = f(&mut t, xt);
            let l = t.mean_all(o);
            t.scalar(l)
        },
        &x0,
        1e-5,
    );

    let err = max_rel_err(&analytic, &numeric, 1e-3);
    assert!(err < 1e-6, "gradient mismatch: rel err {err}");
}

#[test]
fn grad_relu_sigmoid_hardswish() {
    check_grad(&[2, 3, 4, 4], 1, |t, x| t.relu(x));
    check_grad(&[2, 3, 4, 4], 2, |t, x| t.sigmoid(x));
    check_grad(&[2, 3, 4, 4], 3, |t, x| t.hard_swish(x));
}

#[test]
fn grad_shape_ops() {
    check_grad(&[2, 3, 4, 5], 4, |t, x| t.permute(x, &[0, 2, 3, 1]));
    check_grad(&[2, 3, 4, 5], 5, |t, x| t.reshape(x, &[6, 20]));
    check_grad(&[2, 3, 4, 5], 6, |t, x| t.flatten_spatial(x));
    check_grad(&[2, 3, 4, 4], 7, |t, x| t.upsample_nearest_x2(x));
    check_grad(&[2, 3, 4, 4], 8, |t, x| t.mean_axis_keep(x, 3));
    check_grad(&[2, 3, 4, 4], 9, |t, x| {
        let a = t.slice_axis(x, 2, 1, 3);
        let b = t.slice_axis(x, 2, 0, 2);
        t.concat(2, &[a, b])
    });
    check_grad(&[6, 4], 10, |t, x| t.gather_rows(x, &[0, 3, 3, 5]));
}

#[test]
fn grad_softmax_and_mul() {
    check_grad(&[5, 4, 7], 11, |t, x| t.softmax_last(x));
    check_grad(&[2, 3, 4, 4], 12, |t, x| {
        let m = t.mean_axis_keep(x, 3);
        let g = t.sigmoid(m);
        t.mul_broadcast(x, g)
    });
}

#[test]
fn grad_conv2d_wrt_input_weight_bias() {
    for (k, stride, seed) in [(1usize, 1usize, 20u64), (3, 1, 21), (3, 2, 22), (5, 2, 23), (7, 1, 24)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(&[2, 3, 6, 7], &mut rng);
        let w0 = randn(&[4, 3, k, k], &mut rng);
        let b0 = randn(&[4], &mut rng);

        let mut store = ParamStore::<f64>::new();
        let px = store.add_param("x", x0.clone());
        let pw = store.add_param("w", w0.clone());
        let pb = store.add_param("b", b0.clone());

        let mut tape = Tape::new(true);
        let (x, w, b) = (tape.param(&store, px), tape.param(&store, pw), tape.param(&store, pb));
        let y = tape.conv2d(x, w, Some(b), stride);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let (gx, gw, gb) = (
            tape.grad(x).unwrap().clone(),
            tape.grad(w).unwrap().clone(),
            tape.grad(b).unwrap().clone(),
        );

        let eval = |xv: &ArrayD<f64>, wv: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let mut t = Tape::<f64>::new(true);
            let xt = t.constant(xv.clone());
            let wt = t.constant(wv.clone());
            let bt = t.constant(bv.clone());
            let y = t.conv2d(xt, wt, Some(bt), stride);
            let l = t.mean_all(y);
            t.scalar(l)
        };
        let nx = finite_diff_grad(|v| eval(v, &w0, &b0), &x0, 1e-5);
        let nw = finite_diff_grad(|v| eval(&x0, v, &b0), &w0, 1e-5);
        let nb = finite_diff_grad(|v| eval(&x0, &w0, v), &b0, 1e-5);
        assert!(max_rel_err(&gx, &nx, 1e-3) < 1e-6, "conv k{k} s{stride} dx");
        assert!(max_rel_err(&gw, &nw, 1e-3) < 1e-6, "conv k{k} s{stride} dw");
        assert!(max_rel_err(&gb, &nb, 1e-3) < 1e-6, "conv k{k} s{stride} db");
    }
}

#[test]
fn grad_depthwise_conv() {
    for (k, stride, seed) in [(3usize, 1usize, 30u64), (5, 1, 31), (7, 1, 32), (3, 2, 33)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(&[2, 3, 6, 7], &mut rng);
        let w0 = randn(&[3, k, k], &mut rng);

        let mut store = ParamStore::<f64>::new();
        let px = store.add_param("x", x0.clone());
        let pw = store.add_param("w", w0.clone());

        let mut tape = Tape::new(true);
        let (x, w) = (tape.param(&store, px), tape.param(&store, pw));
        let y = tape.depthwise_conv2d(x, w, stride);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let (gx, gw) = (tape.grad(x).unwrap().clone(), tape.grad(w).unwrap().clone());

        let eval = |xv: &ArrayD<f64>, wv: &ArrayD<f64>| {
            let mut t = Tape::<f64>::new(true);
            let xt = t.constant(xv.clone());
            let wt = t.constant(wv.clone());
            let y = t.depthwise_conv2d(xt, wt, stride);
            let l = t.mean_all(y);
            t.scalar(l)
        };
        let nx = finite_diff_grad(|v| eval(v, &w0), &x0, 1e-5);
        let nw = finite_diff_grad(|v| eval(&x0, v), &w0, 1e-5);
        assert!(max_rel_err(&gx, &nx, 1e-3) < 1e-6, "dwconv k{k} s{stride} dx");
        assert!(max_rel_err(&gw, &nw, 1e-3) < 1e-6, "dwconv k{k} s{stride} dw");
    }
}

#[test]
fn grad_batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x0 = randn(&[3, 4, 5, 5], &mut rng);
    let g0 = randn(&[4], &mut rng).mapv(|v| v + 1.5);
    let b0 = randn(&[4], &mut rng);

    for batch_stats in [true, false] {
        let run = |xv: &ArrayD<f64>, gv: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let mut t = Tape::<f64>::new(true);
            let xt = t.constant(xv.clone());
            let gt = t.constant(gv.clone());
            let bt = t.constant(bv.clone());
            let (mean, var) = if batch_stats {
                channel_stats(xv.view())
            } else {
                (ndarray::Array1::from_elem(4, 0.1), ndarray::Array1::from_elem(4, 1.3))
            };
            let y = t.batch_norm(xt, gt, bt, mean, var, 1e-5, batch_stats);
            let l = t.mean_all(y);
            t.scalar(l)
        };

        let mut store = ParamStore::<f64>::new();
        let px = store.add_param("x", x0.clone());
        let pg = store.add_param("g", g0.clone());
        let pb = store.add_param("b", b0.clone());
        let mut tape = Tape::new(true);
        let (x, gm, bt) = (tape.param(&store, px), tape.param(&store, pg), tape.param(&store, pb));
        let (mean, var) = if batch_stats {
            channel_stats(x0.view())
        } else {
            (ndarray::Array1::from_elem(4, 0.1), ndarray::Array1::from_elem(4, 1.3))
        };
        let y = tape.batch_norm(x, gm, bt, mean, var, 1e-5, batch_stats);
        let l = tape.mean_all(y);
        tape.backward(l);

        let nx = finite_diff_grad(|v| run(v, &g0, &b0), &x0, 1e-5);
        let ng = finite_diff_grad(|v| run(&x0, v, &b0), &g0, 1e-5);
        let nb = finite_diff_grad(|v| run(&x0, &g0, v), &b0, 1e-5);
        assert!(
            max_rel_err(tape.grad(x).unwrap(), &nx, 1e-3) < 1e-6,
            "bn dx (batch_stats={batch_stats})"
        );
        assert!(
            max_rel_err(tape.grad(gm).unwrap(), &ng, 1e-3) < 1e-6,
            "bn dgamma (batch_stats={batch_stats})"
        );
        assert!(
            max_rel_err(tape.grad(bt).unwrap(), &nb, 1e-3) < 1e-6,
            "bn dbeta (batch_stats={batch_stats})"
        );
    }
}

/// Conv against a naive quadruple-loop reference.
#[test]
fn conv2d_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for (k, stride) in [(1usize, 1usize), (3, 1), (3, 2), (5, 1), (7, 2)] {
        let (b, cin, cout, h, w) = (2usize, 3usize, 4usize, 6usize, 7usize);
        let x = randn(&[b, cin, h, w], &mut rng);
        let wt = randn(&[cout, cin, k, k], &mut rng);

        let mut tape = Tape::<f64>::inference();
        let xt = tape.constant(x.clone());
        let wtt = tape.constant(wt.clone());
        let y = tape.conv2d(xt, wtt, None, stride);
        let fast = tape.value(y).to_owned();

        let pad = (k as isize - 1) / 2;
        let (ho, wo) = (fast.shape()[2], fast.shape()[3]);
        let mut naive = ArrayD::<f64>::zeros(IxDyn(&[b, cout, ho, wo]));
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * wt[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        naive[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        let err = max_rel_err(&fast, &naive, 1e-6);
        assert!(err < 1e-10, "conv k{k} s{stride} mismatch {err}");
    }
}

/// Throughput probe for planning (run with `--ignored --nocapture`).
#[test]
#[ignore]
fn bench_conv_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let x0: ArrayD<f32> =
        ArrayD::from_shape_fn(IxDyn(&[4, 64, 32, 32]), |_| rng.random::<f32>() - 0.5);
    let w0: ArrayD<f32> =
        ArrayD::from_shape_fn(IxDyn(&[64, 64, 3, 3]), |_| rng.random::<f32>() - 0.5);

    let mut store = ParamStore::<f32>::new();
    let pw = store.add_param("w", w0);

    let iters = 30;
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new(true);
        let x = tape.constant(x0.clone());
        let w = tape.param(&store, pw);
        let y = tape.conv2d(x, w, None, 1);
        let l = tape.mean_all(y);
        tape.backward(l);
        tape.collect_param_grads(&mut store);
        store.zero_grads();
    }
    let dt = t0.elapsed().as_secs_f64();
    // fwd + dW + dX gemms: 3 x 2 x (Cout*Cin*k*k*Ho*Wo*B) flops
    let flops = 3.0 * 2.0 * (64.0 * 64.0 * 9.0 * 32.0 * 32.0 * 4.0) * iters as f64;
    println!("conv fwd+bwd: {:.1} ms/iter, {:.2} GFLOPS", dt * 1e3 / iters as f64, flops / dt / 1e9);
}
