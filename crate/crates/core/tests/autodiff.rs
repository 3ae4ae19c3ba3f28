use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgnet::nn::gradcheck::check_gradient;
use sgnet::nn::{Conv2dSpec, Graph, Var};
use sgnet::{Result, Tensor};

const TOL: f64 = 1e-6;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Projects a node onto fixed random weights so every output element gets a distinct gradient.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.input(rand_t(&shape, seed));
    let p = g.mul(v, w)?;
    Ok(g.mean_all(p))
}

fn assert_grad(input: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
    let check = check_gradient(input, 1e-6, f).unwrap();
    let err = check.relative_error();
    assert!(err < TOL, "relative error {err}: analytic {:?} numeric {:?}", check.analytic, check.numeric);
}

#[test]
fn conv2d_forward_matches_naive() {
    let x = rand_t(&[2, 3, 5, 4], 1);
    let w = rand_t(&[4, 3, 3, 3], 2);
    let b = rand_t(&[4], 3);
    let spec = Conv2dSpec { stride: 2, pad: 1 };
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[2, 4, 3, 2]);
    for n in 0..2 {
        for co in 0..4 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut acc = b.data()[co];
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if !(0..5).contains(&iy) || !(0..4).contains(&ix) {
                                    continue;
                                }
                                acc += x.data()[((n * 3 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                    * w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    let got = out.data()[((n * 4 + co) * 3 + oy) * 2 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv2d_gradients() {
    let x = rand_t(&[2, 2, 5, 5], 4);
    let w = rand_t(&[3, 2, 3, 3], 5);
    let spec = Conv2dSpec { stride: 2, pad: 1 };
    let wc = w.clone();
    assert_grad(&x, move |g, x| {
        let w = g.input(wc.clone());
        let y = g.conv2d(x, w, None, spec)?;
        probe(g, y, 9)
    });
    let xc = x.clone();
    assert_grad(&w, move |g, w| {
        let x = g.input(xc.clone());
        let b = g.input(Tensor::full(&[3], 0.1));
        let y = g.conv2d(x, w, Some(b), spec)?;
        probe(g, y, 9)
    });
    let (xc, wc) = (x.clone(), w.clone());
    assert_grad(&rand_t(&[3], 6), move |g, b| {
        let x = g.input(xc.clone());
        let w = g.input(wc.clone());
        let y = g.conv2d(x, w, Some(b), spec)?;
        probe(g, y, 9)
    });
}

#[test]
fn pointwise_and_pooling_gradients() {
    let x = rand_t(&[2, 3, 4, 4], 7);
    assert_grad(&x, |g, x| {
        let y = g.sigmoid(x);
        probe(g, y, 1)
    });
    assert_grad(&x, |g, x| {
        let y = g.leaky_relu(x, 0.2);
        probe(g, y, 2)
    });
    assert_grad(&x, |g, x| {
        let y = g.relu(x);
        probe(g, y, 2)
    });
    assert_grad(&x, |g, x| {
        let y = g.max_pool(x, 3, Conv2dSpec { stride: 2, pad: 1 })?;
        probe(g, y, 3)
    });
    assert_grad(&x, |g, x| {
        let y = g.global_avg_pool(x)?;
        probe(g, y, 4)
    });
    assert_grad(&x, |g, x| {
        let y = g.upsample_bilinear(x, 7, 9)?;
        probe(g, y, 5)
    });
    assert_grad(&x, |g, x| {
        let y = g.group_mean(x, 2)?;
        probe(g, y, 6)
    });
    assert_grad(&x, |g, x| {
        let a = g.scale(x, 3.0);
        let b = g.one_minus(x);
        let c = g.concat(&[a, b, x])?;
        probe(g, c, 8)
    });
}

#[test]
fn mask_product_gradients_reach_both_sides() {
    let x = rand_t(&[2, 3, 4, 4], 10);
    let m = rand_t(&[2, 1, 4, 4], 11);
    let mc = m.clone();
    assert_grad(&x, move |g, x| {
        let m = g.input(mc.clone());
        let y = g.mul_mask(x, m)?;
        probe(g, y, 1)
    });
    let xc = x.clone();
    assert_grad(&m, move |g, m| {
        let x = g.input(xc.clone());
        let y = g.mul_mask(x, m)?;
        probe(g, y, 1)
    });
}

#[test]
fn linear_and_losses_gradients() {
    let x = rand_t(&[4, 5], 12);
    let w = rand_t(&[3, 5], 13);
    let wc = w.clone();
    assert_grad(&x, move |g, x| {
        let w = g.input(wc.clone());
        let y = g.linear(x, w, None)?;
        g.softmax_cross_entropy(y, &[0, 2, 1, 2], None)
    });
    let xc = x.clone();
    assert_grad(&w, move |g, w| {
        let x = g.input(xc.clone());
        let y = g.linear(x, w, None)?;
        g.softmax_cross_entropy(y, &[0, 2, 1, 2], Some(&[1.0, 2.0, 0.5]))
    });
    let t = rand_t(&[4, 5], 14);
    assert_grad(&x, move |g, x| {
        let t = g.input(t.clone());
        g.mse(x, t)
    });
    assert_grad(&x, |g, x| Ok(g.half_mse_to(x, 1.0)));
}

#[test]
fn cosine_gram_gradients_and_structure() {
    let x = rand_t(&[6, 7], 15);
    assert_grad(&x, |g, x| {
        let y = g.cosine_gram(x, 3)?;
        probe(g, y, 2)
    });
    let mut g = Graph::new();
    let v = g.input(x);
    let y = g.cosine_gram(v, 3).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[2, 9]);
    for block in out.data().chunks(9) {
        for i in 0..3 {
            assert_eq!(block[i * 3 + i], 1.0);
            for j in 0..3 {
                assert_eq!(block[i * 3 + j], block[j * 3 + i]);
            }
        }
    }
}

#[test]
fn zero_rows_give_zero_similarity_and_no_nan() {
    let mut data = vec![0.0; 8];
    data[4..].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(&[2, 4], data).unwrap());
    let y = g.cosine_gram(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(g.zero_norm_events(), 1);
    let l = probe(&mut g, y, 3).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().is_finite());
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut store = sgnet::nn::ParamStore::<f64>::new();
    store.insert("w", Tensor::from_vec(&[1, 1], vec![2.0]).unwrap());
    let mut g = Graph::new();
    let a = g.param(&store, "w").unwrap();
    let b = g.param(&store, "w").unwrap();
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let l = g.mean_all(s);
    let grads = g.backward(l).unwrap();
    assert_eq!(g.param_grads(&grads)["w"].data(), &[2.0]);
}
