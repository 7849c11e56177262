use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn constant_loss_gives_zero_grads() {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::scalar(4.0));
    g.backward(c).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn sqnorm_gradient_is_twice_x() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let l = g.sqnorm(x).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2]));
    let mut g = Graph::new();
    let va = g.leaf(a.clone());
    let vb = g.constant(b.clone());
    let m = g.matmul(va, vb).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    // ones(3x2)·Bᵀ: every row equals the row sums of B
    for r in 0..3 {
        for c in 0..4 {
            let expect = b.data()[c * 2] + b.data()[c * 2 + 1];
            assert!((g.grad(va).unwrap()[r * 4 + c] - expect).abs() < 1e-14);
        }
    }
    let rep = grad_check(
        |g, v| {
            let bb = g.constant(b.clone());
            let m = g.matmul(v[0], bb)?;
            g.sum(m)
        },
        &[a],
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error() < 1e-8);
}

#[test]
fn conv_output_shape() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[64, 64, 3]));
    let w = g.constant(Tensor::zeros(&[5, 5, 3, 16]));
    let y = g.conv2d(x, w, None, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[32, 32, 16]);
}

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [h, wd, cin] = x.shape()[..] else { panic!() };
    let [k, _, _, cout] = w.shape()[..] else { panic!() };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(iy as usize * wd + ix as usize) * cin + ci]
                                * w.data()[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_and_gradients_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[7, 6, 2]);
    let w = rand_tensor(&mut rng, &[5, 5, 2, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(vx, vw, Some(vb), 2, 2).unwrap();
    let oracle = naive_conv(&x, &w, b.data(), 2, 2);
    assert_eq!(g.shape(y), &[4, 3, 3]);
    for (a, o) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }
    let rep = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 2)?;
            let t = g.tanh(y)?;
            g.sqnorm(t)
        },
        &[x, w, b],
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error() < 1e-6, "{}", rep.max_rel_error());
}

#[test]
fn batched_conv_equals_per_image_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 8, 8, 3]);
    let w = rand_tensor(&mut rng, &[5, 5, 3, 4]);
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(vx, vw, None, 2, 2).unwrap();
    for i in 0..2 {
        let xi = g.slice(vx, i, 1).unwrap();
        let xi = g.reshape(xi, &[8, 8, 3]).unwrap();
        let yi = g.conv2d(xi, vw, None, 2, 2).unwrap();
        let n = g.value(yi).len();
        assert_eq!(&g.value(y).data()[i * n..(i + 1) * n], g.value(yi).data());
    }
}

fn mlp(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let mut h = v[0];
    for layer in v[1..].chunks(2) {
        h = g.matmul(h, layer[0])?;
        let rows = g.shape(h)[0];
        let ones = g.constant(Tensor::filled(&[rows, 1], 1.0));
        let b = g.matmul(ones, layer[1])?;
        h = g.add(h, b)?;
        h = g.leaky_relu(h, 0.2)?;
    }
    let t = g.tanh(h)?;
    g.sqnorm(t)
}

#[test]
fn three_layer_perceptron_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![
        rand_tensor(&mut rng, &[2, 5]),
        rand_tensor(&mut rng, &[5, 6]),
        rand_tensor(&mut rng, &[1, 6]),
        rand_tensor(&mut rng, &[6, 6]),
        rand_tensor(&mut rng, &[1, 6]),
        rand_tensor(&mut rng, &[6, 3]),
        rand_tensor(&mut rng, &[1, 3]),
    ];
    let rep = grad_check(mlp, &params, &CheckOptions::default()).unwrap();
    assert!(rep.max_rel_error() <= 1e-5, "{}", rep.max_rel_error());
}

#[test]
fn remaining_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    let s = Tensor::scalar(0.7);
    let rep = grad_check(
        |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let r = g.reshape(c, &[3, 6])?;
            let sl = g.slice(r, 1, 2)?;
            let m = g.mul(v[2], sl)?;
            let cl = g.clamp(m, -0.5, 0.5)?;
            let d = g.sub(cl, sl)?;
            let l1 = g.l1(d)?;
            let mean = g.mean(sl)?;
            let sc = g.scale(mean, 3.0)?;
            let sq = g.mul(sc, sc)?;
            g.add(l1, sq)
        },
        &[a, b, s],
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error() <= 1e-5, "{:?}", rep);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    assert!(g.matmul(a, a).is_err());
    assert!(g.mul(a, b).is_err());
}

#[test]
fn backward_contract() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Backward(_))));
    let l = g.sqnorm(x).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::Backward(_))));
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn fan_out_accumulates_each_use() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let mut acc = g.scale(x, 1.0).unwrap();
    for _ in 0..4 {
        acc = g.add(acc, x).unwrap();
    }
    g.backward(acc).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[5.0]);
}

#[test]
fn deterministic_forward_and_backward() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: Vec<Tensor> = [[3, 4], [4, 4], [1, 4]]
            .iter()
            .map(|s| rand_tensor(&mut rng, s))
            .collect();
        let mut g = Graph::new();
        let v: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let out = mlp(&mut g, &v).unwrap();
        g.backward(out).unwrap();
        let grads: Vec<Vec<f64>> = v.iter().map(|x| g.grad(*x).unwrap().to_vec()).collect();
        (g.value(out).item().to_bits(), grads)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    for (x, y) in a.1.iter().zip(&b.1) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn backward_is_linear(seed in 0u64..1000, ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let grad_of = |mode: u8| {
            let mut g = Graph::new();
            let vx = g.leaf(x.clone());
            let vw = g.constant(w.clone());
            let m = g.matmul(vx, vw).unwrap();
            let t = g.tanh(m).unwrap();
            let f = g.sqnorm(t).unwrap();
            let h = g.l1(vx).unwrap();
            let out = match mode {
                0 => f,
                1 => h,
                _ => {
                    let a = g.scale(f, ca).unwrap();
                    let b = g.scale(h, cb).unwrap();
                    g.add(a, b).unwrap()
                }
            };
            g.backward(out).unwrap();
            g.grad(vx).unwrap().to_vec()
        };
        let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..9 {
            prop_assert!((gc[i] - (ca * gf[i] + cb * gh[i])).abs() < 1e-12);
        }
    }
}
