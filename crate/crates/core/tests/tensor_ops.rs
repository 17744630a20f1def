mod common;

use capsnet::tensor::{finite_difference_check, Activation, FdOptions, MarginParams, TensorError};
use capsnet::{Graph, Tensor, Var};
use common::{conv_oracle, dyadic, rng, uniform};

type Build<'a> = dyn for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var, TensorError> + 'a;

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar through fixed pseudo-random weights so
/// every output coordinate influences the check.
fn weighted_sum<'g>(g: &mut Graph<'g, f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed);
    let w = g.constant(t64(&shape, uniform(&mut r, n, -1.0, 1.0)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, build: &Build<'_>, params: Vec<Tensor<f64>>) {
    let err = finite_difference_check(build, &params, &FdOptions::default()).unwrap();
    assert!(err < 1e-3, "{name}: relative error {err}");
}

#[test]
fn dense_matches_nested_loop_exactly() {
    let mut r = rng(1);
    let (m, n) = (3, 4);
    let x = dyadic(&mut r, n);
    let w = dyadic(&mut r, m * n);
    let b = dyadic(&mut r, m);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::new(vec![n], x.clone()).unwrap());
    let wv = g.constant(Tensor::new(vec![m, n], w.clone()).unwrap());
    let bv = g.constant(Tensor::new(vec![m], b.clone()).unwrap());
    let y = g.dense(xv, wv, bv).unwrap();
    let mut expect = vec![0.0f32; m];
    for i in 0..m {
        let mut acc = 0.0f32;
        for j in 0..n {
            acc += w[i * n + j] * x[j];
        }
        expect[i] = acc + b[i];
    }
    assert_eq!(g.value(y), expect.as_slice());
}

#[test]
fn conv2d_matches_nested_loop() {
    let mut r = rng(2);
    for &(c, h, w, kn, k, stride) in &[(1, 6, 6, 2, 3, 1), (3, 9, 7, 4, 3, 2), (2, 10, 10, 3, 5, 2)] {
        let x = dyadic(&mut r, c * h * w);
        let kern = dyadic(&mut r, kn * c * k * k);
        let bias = dyadic(&mut r, kn);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(Tensor::new(vec![c, h, w], x.clone()).unwrap());
        let kv = g.constant(Tensor::new(vec![kn, c, k, k], kern.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![kn], bias.clone()).unwrap());
        let y = g.conv2d(xv, kv, bv, stride).unwrap();
        let expect = conv_oracle(&x, (c, h, w), &kern, (kn, k, k), &bias, stride);
        assert_eq!(g.value(y), expect.as_slice(), "case {:?}", (c, h, w, kn, k, stride));
    }
}

#[test]
fn conv1_shape_on_mnist_input() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 28, 28]));
    let k = g.constant(Tensor::zeros(&[256, 1, 9, 9]));
    let b = g.constant(Tensor::zeros(&[256]));
    let y = g.conv2d(x, k, b, 1).unwrap();
    assert_eq!(g.shape(y), &[256, 20, 20]);
}

#[test]
fn predict_and_agreement_match_loops_exactly() {
    let mut r = rng(3);
    let (n, j, d, k) = (2, 2, 3, 2);
    let u = dyadic(&mut r, n * k);
    let w = dyadic(&mut r, n * j * d * k);
    let mut g = Graph::<f32>::new();
    let uv = g.constant(Tensor::new(vec![n, k], u.clone()).unwrap());
    let wv = g.constant(Tensor::new(vec![n, j, d, k], w.clone()).unwrap());
    let p = g.predict(uv, wv).unwrap();
    let mut expect = vec![0.0f32; n * j * d];
    for i in 0..n {
        for jj in 0..j {
            for dd in 0..d {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    acc += w[((i * j + jj) * d + dd) * k + kk] * u[i * k + kk];
                }
                expect[(i * j + jj) * d + dd] = acc;
            }
        }
    }
    assert_eq!(g.value(p), expect.as_slice());

    let v = dyadic(&mut r, j * d);
    let vv = g.constant(Tensor::new(vec![j, d], v.clone()).unwrap());
    let a = g.agreement(p, vv).unwrap();
    for i in 0..n {
        for jj in 0..j {
            let mut dot = 0.0f32;
            for dd in 0..d {
                dot += expect[(i * j + jj) * d + dd] * v[jj * d + dd];
            }
            assert_eq!(g.value(a)[i * j + jj], dot);
        }
    }
}

/// Every differentiable op against central differences on ten random
/// instances each.
#[test]
fn every_op_passes_finite_differences() {
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        let mut u = |n: usize| uniform(&mut r, n, -1.0, 1.0);

        // Inputs kept away from the relu kink at 0.
        let away: Vec<f64> = u(12).into_iter().map(|x| if x.abs() < 0.1 { x + 0.2 } else { x }).collect();
        check(
            "conv2d",
            &|g, p| {
                let y = g.conv2d(p[0], p[1], p[2], 2)?;
                weighted_sum(g, y, seed)
            },
            vec![t64(&[2, 7, 6], u(84)), t64(&[3, 2, 3, 3], u(54)), t64(&[3], u(3))],
        );
        check(
            "dense",
            &|g, p| {
                let y = g.dense(p[0], p[1], p[2])?;
                weighted_sum(g, y, seed)
            },
            vec![t64(&[5], u(5)), t64(&[4, 5], u(20)), t64(&[4], u(4))],
        );
        for kind in [Activation::Relu, Activation::Sigmoid] {
            check(
                "activation",
                &move |g, p| {
                    let y = g.activation(p[0], kind);
                    weighted_sum(g, y, seed)
                },
                vec![t64(&[12], away.clone())],
            );
        }
        check(
            "reshape+permute",
            &|g, p| {
                let y = g.reshape(p[0], &[2, 3, 4])?;
                let z = g.permute(y, &[2, 0, 1])?;
                weighted_sum(g, z, seed)
            },
            vec![t64(&[24], u(24))],
        );
        check(
            "add+mul+scale",
            &|g, p| {
                let a = g.add(p[0], p[1])?;
                let m = g.mul(a, p[1])?;
                let s = g.scale(m, 0.7);
                weighted_sum(g, s, seed)
            },
            vec![t64(&[6], u(6)), t64(&[6], u(6))],
        );
        check(
            "squash",
            &|g, p| {
                let y = g.squash(p[0]);
                weighted_sum(g, y, seed)
            },
            vec![t64(&[3, 5], u(15))],
        );
        check(
            "norm",
            &|g, p| {
                let y = g.norm(p[0]);
                weighted_sum(g, y, seed)
            },
            vec![t64(&[4, 3], u(12))],
        );
        check(
            "softmax",
            &|g, p| {
                let y = g.softmax(p[0]);
                weighted_sum(g, y, seed)
            },
            vec![t64(&[3, 4], u(12))],
        );
        check(
            "predict",
            &|g, p| {
                let y = g.predict(p[0], p[1])?;
                weighted_sum(g, y, seed)
            },
            vec![t64(&[3, 2], u(6)), t64(&[3, 2, 4, 2], u(48))],
        );
        check(
            "weighted_sum",
            &|g, p| {
                let y = g.weighted_sum(p[0], p[1])?;
                weighted_sum(g, y, seed)
            },
            vec![t64(&[3, 2], u(6)), t64(&[3, 2, 4], u(24))],
        );
        check(
            "agreement",
            &|g, p| {
                let y = g.agreement(p[0], p[1])?;
                weighted_sum(g, y, seed)
            },
            vec![t64(&[3, 2, 4], u(24)), t64(&[2, 4], u(8))],
        );
        check(
            "append_zero_parent+narrow",
            &|g, p| {
                let y = g.append_zero_parent(p[0])?;
                let s = g.squash(y);
                let z = g.narrow(s, 2)?;
                weighted_sum(g, z, seed)
            },
            vec![t64(&[3, 2, 4], u(24))],
        );
        check(
            "mask_row",
            &|g, p| {
                let y = g.mask_row(p[0], 1)?;
                weighted_sum(g, y, seed)
            },
            vec![t64(&[3, 4], u(12))],
        );
        check("squared_error", &|g, p| g.squared_error(p[0], p[1]), vec![t64(&[7], u(7)), t64(&[7], u(7))]);
        // Lengths away from both margins.
        let lengths: Vec<f64> = (0..10).map(|k| 0.2 + 0.06 * k as f64 + 0.001 * seed as f64).collect();
        check(
            "margin_loss",
            &|g, p| {
                let mut t = [false; 10];
                t[(seed % 10) as usize] = true;
                g.margin_loss(p[0], &t, MarginParams::default())
            },
            vec![t64(&[10], lengths)],
        );
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(9);
    let x = Tensor::new(vec![4, 5], uniform(&mut r, 20, -1.0, 1.0)).unwrap();
    let w = Tensor::new(vec![3, 5], uniform(&mut r, 15, -1.0, 1.0)).unwrap();
    let b = Tensor::<f64>::zeros(&[3]);
    let grads = |alpha: f64| {
        let mut g = Graph::new();
        let xv = g.param(&x);
        let wv = g.param(&w);
        let bv = g.param(&b);
        let s = g.squash(xv);
        let row = g.mask_row(s, 2).unwrap();
        let row = g.reshape(row, &[4, 5]).unwrap();
        let row = g.narrow(row, 3).unwrap();
        let sumd = g.sum(row);
        let flat = g.reshape(xv, &[20]).unwrap();
        let first = g.narrow(flat, 5).unwrap();
        let y = g.dense(first, wv, bv).unwrap();
        let y = g.sigmoid(y);
        let sy = g.sum(y);
        let tot = g.add(sy, sumd).unwrap();
        let loss = g.scale(tot, alpha);
        let mut gr = g.backward(loss).unwrap();
        (gr.take(xv).unwrap(), gr.take(wv).unwrap())
    };
    let (gx1, gw1) = grads(1.0);
    let (gx3, gw3) = grads(-2.5);
    for (a, b) in gx1.iter().chain(&gw1).zip(gx3.iter().chain(&gw3)) {
        assert!((a * -2.5 - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} {b}");
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let mut r = rng(4);
    let x = Tensor::new(vec![2, 9, 9], dyadic(&mut r, 162)).unwrap();
    let k = Tensor::new(vec![4, 2, 3, 3], uniform(&mut r, 72, -1.0, 1.0).iter().map(|&v| v as f32).collect()).unwrap();
    let b = Tensor::<f32>::zeros(&[4]);
    let run = || {
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant_ref(&x), g.param(&k), g.constant_ref(&b));
        let y = g.conv2d(xv, kv, bv, 1).unwrap();
        let s = g.squash(y);
        let l = g.sum(s);
        let gr = g.backward(l).unwrap();
        (g.tensor(s), gr.get(kv).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b2, gb) = run();
    assert_eq!(a, b2);
    assert_eq!(ga, gb);
}

#[test]
fn gradients_accumulate_across_fan_out() {
    let x = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let v = g.param(&x);
    let a = g.scale(v, 2.0);
    let b = g.mul(v, v).unwrap();
    let c = g.add(a, b).unwrap();
    let l = g.sum(c);
    let gr = g.backward(l).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|x| 2.0 + 2.0 * x).collect();
    assert_eq!(gr.get(v).unwrap(), expect.as_slice());
}
