use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves every entry at least `margin` away from zero, keeping its sign.
fn away_from_kinks(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| {
        if v.abs() < margin {
            if v < 0.0 {
                v - margin
            } else {
                v + margin
            }
        } else {
            v
        }
    })
}

fn schoolbook(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at2(i, p) * b.at2(p, j);
            }
            c[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], c).unwrap()
}

fn sliding_conv1d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin) = x.dims2().unwrap();
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    let n_out = (n + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n_out * cout];
    for o in 0..n_out {
        for co in 0..cout {
            let mut s = 0.0;
            for t in 0..k {
                let pos = (o * stride + t) as isize - pad as isize;
                if pos < 0 || pos >= n as isize {
                    continue;
                }
                for ci in 0..cin {
                    s += x.data()[pos as usize * cin + ci] * w.data()[(t * cin + ci) * cout + co];
                }
            }
            y[o * cout + co] = s;
        }
    }
    Tensor::new(&[n_out, cout], y).unwrap()
}

fn sliding_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor<f64> {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut y = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut s = 0.0;
                for ty in 0..kh {
                    let iy = (oy * stride.0 + ty) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for tx in 0..kw {
                        let ix = (ox * stride.1 + tx) as isize - pad.1 as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[(iy as usize * wd + ix as usize) * cin + ci];
                            let wv = w.data()[((ty * kw + tx) * cin + ci) * cout + co];
                            s += xv * wv;
                        }
                    }
                }
                y[(oy * wo + ox) * cout + co] = s;
            }
        }
    }
    Tensor::new(&[ho, wo, cout], y).unwrap()
}

#[test]
fn matmul_identity() {
    let g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::eye(2));
    let b = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let c = i2.matmul(b).unwrap();
    assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let g = Graph::<f64>::new();
    let a = g.param_owned(Tensor::eye(2));
    let bt = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = g.constant(bt.clone());
    let loss = a.matmul(b).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    // ones[2,2] · bᵀ: row sums of b as columns
    assert_eq!(grads.get(a).data(), &[3.0, 7.0, 3.0, 7.0]);
}

#[test]
fn matmul_matches_schoolbook_exactly() {
    let mut r = rng(11);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
    let g = Graph::new();
    let c = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap();
    assert_eq!(*c.value(), schoolbook(&a, &b));
    let bt = b.transpose2().unwrap();
    let c_nt = g.constant(a.clone()).matmul_nt(g.constant(bt)).unwrap();
    assert_eq!(*c_nt.value(), schoolbook(&a, &b));
    let at = a.transpose2().unwrap();
    let c_tn = g.constant(at).matmul_tn(g.constant(b.clone())).unwrap();
    assert_eq!(*c_tn.value(), schoolbook(&a, &b));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn conv1d_stride_arithmetic_and_delta_kernel() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[16, 1]));
    let w = g.constant(Tensor::zeros(&[9, 1, 1]));
    assert_eq!(x.conv1d(w, 4, 4).unwrap().shape(), vec![4, 1]);

    let mut r = rng(2);
    let xv = Tensor::<f64>::randn(&[10, 2], 1.0, &mut r);
    let mut delta = Tensor::zeros(&[3, 2, 2]);
    delta.data_mut()[(2) * 2] = 1.0; // tap 1, ci 0 -> co 0
    delta.data_mut()[(2 + 1) * 2 + 1] = 1.0; // tap 1, ci 1 -> co 1
    let y = g.constant(xv.clone()).conv1d(g.constant(delta), 1, 1).unwrap();
    assert_eq!(*y.value(), xv);
}

#[test]
fn conv1d_rejects_short_input() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 1]));
    let w = g.constant(Tensor::zeros(&[9, 1, 1]));
    assert!(matches!(
        x.conv1d(w, 1, 2),
        Err(Error::EmptyOutput { .. })
    ));
}

#[test]
fn conv1d_matches_sliding_window_oracle() {
    let mut r = rng(5);
    for (stride, pad) in [(1, 1), (2, 0), (3, 1)] {
        let x = Tensor::<f64>::randn(&[12, 2], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[3, 2, 3], 1.0, &mut r);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv1d(g.constant(w.clone()), stride, pad).unwrap();
        assert_eq!(*y.value(), sliding_conv1d(&x, &w, stride, pad));
    }
}

#[test]
fn conv2d_geometry_pointwise_and_oracle() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[8, 8, 1]));
    let w = g.constant(Tensor::zeros(&[3, 3, 1, 1]));
    assert_eq!(x.conv2d(w, (2, 2), (1, 1)).unwrap().shape(), vec![4, 4, 1]);

    let mut r = rng(6);
    let xv = Tensor::<f64>::randn(&[6, 6, 2], 1.0, &mut r);
    let w1 = Tensor::<f64>::randn(&[1, 1, 2, 3], 1.0, &mut r);
    let y = g
        .constant(xv.clone())
        .conv2d(g.constant(w1.clone()), (1, 1), (0, 0))
        .unwrap();
    let per_pixel = schoolbook(
        &xv.clone().reshape(&[36, 2]).unwrap(),
        &w1.clone().reshape(&[2, 3]).unwrap(),
    );
    assert_eq!(y.value().data(), per_pixel.data());

    let w = Tensor::<f64>::randn(&[3, 3, 2, 2], 1.0, &mut r);
    let y = g
        .constant(xv.clone())
        .conv2d(g.constant(w.clone()), (2, 2), (1, 1))
        .unwrap();
    assert_eq!(*y.value(), sliding_conv2d(&xv, &w, (2, 2), (1, 1)));
}

#[test]
fn elementwise_values() {
    assert_eq!(UnaryFn::EluPlusOne.apply(0.0f64), 1.0);
    assert_eq!(UnaryFn::Relu.apply(-3.0f64), 0.0);
    assert_eq!(UnaryFn::Relu.apply(3.0f64), 3.0);
    assert!((UnaryFn::Softplus.apply(50.0f64) - 50.0).abs() < 1e-12);
    for a in [-5.0f64, -1.0, -0.1, 0.0, 0.3, 2.0, 7.0] {
        let naive = (1.0 + a.exp()).ln();
        assert!((UnaryFn::Softplus.apply(a) - naive).abs() < 1e-14, "{a}");
        assert!(UnaryFn::Softplus.apply(a) >= 0.0);
        assert!(UnaryFn::EluPlusOne.apply(a) >= 0.0);
    }
    assert!(UnaryFn::Softplus.apply(1000.0f64).is_finite());
}

#[test]
fn softmax_rows_properties() {
    let g = Graph::<f64>::new();
    let y = g.constant(Tensor::full(&[2, 4], 0.7)).softmax_rows().unwrap();
    assert!(y.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let mut r = rng(8);
    let x = Tensor::<f64>::randn(&[3, 5], 4.0, &mut r);
    let y = g.constant(x).softmax_rows().unwrap().value();
    for i in 0..3 {
        let s: f64 = y.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(y.row(i).iter().all(|&v| v >= 0.0));
    }

    let nan = g.constant(Tensor::new(&[1, 2], vec![f64::NAN, 1.0]).unwrap());
    assert!(matches!(nan.softmax_rows(), Err(Error::NaN(_))));
}

#[test]
fn layer_norm_statistics() {
    let g = Graph::<f64>::new();
    let ones = g.constant(Tensor::ones(&[6]));
    let zeros = g.constant(Tensor::zeros(&[6]));
    let c = g.constant(Tensor::full(&[2, 6], 3.5));
    let y = c.layer_norm(ones, zeros, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut r = rng(9);
    let x = g.constant(Tensor::<f64>::randn(&[4, 6], 3.0, &mut r));
    let y = x.layer_norm(ones, zeros, 1e-12).unwrap().value();
    for i in 0..4 {
        let row = y.row(i);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    let beta = g.constant(Tensor::from_fn(&[6], |i| i as f64));
    let y = x.layer_norm(zeros, beta, 1e-5).unwrap().value();
    for i in 0..4 {
        assert_eq!(y.row(i), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}

#[test]
fn backward_needs_scalar_loss() {
    let g = Graph::<f64>::new();
    let x = g.param_owned(Tensor::ones(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_simple_cases() {
    let g = Graph::<f64>::new();
    let x = g.param_owned(Tensor::from_fn(&[2, 3], |i| i as f64));
    let w = g.param_owned(Tensor::from_fn(&[3, 2], |i| 0.5 * i as f64));
    let unused = g.param_owned(Tensor::ones(&[4]));
    let loss = x.matmul(w).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    // d sum(xW)/dW = xᵀ · ones
    let xv = x.value();
    let expect: Vec<f64> = (0..3)
        .flat_map(|p| {
            let col: f64 = (0..2).map(|i| xv.at2(i, p)).sum();
            [col, col]
        })
        .collect();
    assert_eq!(grads.get(w).data(), &expect[..]);
    assert!(!grads.reached(unused));
    assert_eq!(grads.get(unused).data(), &[0.0; 4]);

    let g = Graph::<f64>::new();
    let x = g.param_owned(Tensor::from_fn(&[5], |i| i as f64));
    let grads = g.backward(x.sum()).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0; 5]);
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(21);
    let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
    let run = || {
        let g = Graph::new();
        let av = g.param_owned(a.clone());
        let wv = g.param_owned(w.clone());
        let h = av.matmul(wv).unwrap().softplus().softmax_rows().unwrap();
        let grads = g.backward(h.mul(h).unwrap().sum()).unwrap();
        (grads.get(av), grads.get(wv))
    };
    assert_eq!(run(), run());
}

fn check(inputs: &[Tensor<f64>], build: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>) -> f64 {
    gradcheck(inputs, build, GradcheckConfig::default()).unwrap()
}

/// Random linear functional so gradients are not all identical.
fn probe<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut r = rng(seed);
    let w = g.constant(Tensor::randn(&y.shape(), 1.0, &mut r));
    Ok(y.mul(w)?.sum())
}

#[test]
fn gradcheck_matmul_family() {
    let mut r = rng(30);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
    let bt = Tensor::<f64>::randn(&[2, 4], 1.0, &mut r);
    let at = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    assert!(check(&[a.clone(), b.clone()], |g, v| probe(g, v[0].matmul(v[1])?, 1)) <= 1e-7);
    assert!(check(&[a.clone(), bt], |g, v| probe(g, v[0].matmul_nt(v[1])?, 2)) <= 1e-7);
    assert!(check(&[at, b], |g, v| probe(g, v[0].matmul_tn(v[1])?, 3)) <= 1e-7);
}

#[test]
fn gradcheck_elementwise() {
    let mut r = rng(31);
    let x = away_from_kinks(Tensor::<f64>::randn(&[3, 4], 1.5, &mut r), 1e-3);
    for f in [UnaryFn::EluPlusOne, UnaryFn::Relu, UnaryFn::Softplus, UnaryFn::Exp] {
        let err = check(&[x.clone()], |g, v| probe(g, v[0].unary(f), 4));
        assert!(err <= 1e-4, "{f:?}: {err}");
    }
    // relu exactly at the kink: the perturbation rule moves inputs off zero
    let zeros = Tensor::<f64>::zeros(&[2, 3]);
    assert!(check(&[zeros], |g, v| probe(g, v[0].relu(), 5)) <= 1e-4);

    let y = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    assert!(check(&[x.clone(), y.clone()], |g, v| probe(g, v[0].add(v[1])?.scale(-0.7), 6)) <= 1e-7);
    assert!(check(&[x, y], |g, v| probe(g, v[0].mul(v[1])?, 7)) <= 1e-7);
}

#[test]
fn gradcheck_softmax_and_norm() {
    let mut r = rng(32);
    let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut r);
    assert!(check(&[x.clone()], |g, v| probe(g, v[0].softmax_rows()?, 8)) <= 1e-4);
    let gamma = Tensor::<f64>::randn(&[5], 1.0, &mut r);
    let beta = Tensor::<f64>::randn(&[5], 1.0, &mut r);
    let err = check(&[x, gamma, beta], |g, v| {
        probe(g, v[0].layer_norm(v[1], v[2], 1e-5)?, 9)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn gradcheck_convolutions_and_pools() {
    let mut r = rng(33);
    let x = Tensor::<f64>::randn(&[11, 2], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[5, 2, 3], 1.0, &mut r);
    assert!(check(&[x.clone(), w], |g, v| probe(g, v[0].conv1d(v[1], 2, 2)?, 10)) <= 1e-4);
    assert!(check(&[x], |g, v| probe(g, v[0].avg_pool1d(9, 4, 4)?, 11)) <= 1e-4);

    let x2 = Tensor::<f64>::randn(&[5, 4, 2], 1.0, &mut r);
    let w2 = Tensor::<f64>::randn(&[3, 3, 2, 2], 1.0, &mut r);
    assert!(check(&[x2.clone(), w2], |g, v| probe(g, v[0].conv2d(v[1], (2, 2), (1, 1))?, 12)) <= 1e-4);
    assert!(check(&[x2], |g, v| probe(g, v[0].avg_pool2d((3, 3), (2, 2), (1, 1))?, 13)) <= 1e-4);
}

#[test]
fn gradcheck_structural_ops() {
    let mut r = rng(34);
    let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[6], 1.0, &mut r);
    let err = check(&[x.clone(), b], |g, v| {
        let left = v[0].slice_cols(0, 2)?;
        let right = v[0].slice_cols(2, 4)?;
        let swapped = concat_cols(&[right, left])?;
        let top = swapped.slice_rows(0, 1)?;
        let rest = swapped.slice_rows(1, 3)?;
        let y = concat_rows(&[rest, top])?.add_row(v[1])?;
        probe(g, y.reshape(&[2, 12])?, 14)
    });
    assert!(err <= 1e-7, "{err}");
}
