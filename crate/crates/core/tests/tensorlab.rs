use dcfm::tensorlab::kernels::{self, ConvGeom};
use dcfm::tensorlab::{descending_rank, grad_check, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn int_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-5..=5) as f64)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn loop_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, s) = (a.dim(0), a.dim(1), b.dim(1));
    Tensor::from_fn(&[r, s], |i| {
        let (row, col) = (i / s, i % s);
        let mut acc = 0.0;
        for j in 0..k {
            acc += a.data()[row * k + j] * b.data()[j * s + col];
        }
        acc
    })
}

/// Direct 7-loop convolution with zero padding.
fn loop_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let [n, cin, h, wd] = *x.shape() else { panic!() };
    let cout = w.dim(0);
    let (oh, ow) = (g.out_extent(h), g.out_extent(wd));
    Tensor::from_fn(&[n, cout, oh, ow], |i| {
        let (img, o, y, xx) = (i / (cout * oh * ow), (i / (oh * ow)) % cout, (i / ow) % oh, i % ow);
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..cin {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let sy = (y * g.stride + ky) as isize - g.pad as isize;
                    let sx = (xx * g.stride + kx) as isize - g.pad as isize;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    acc += w.at(&[o, c, ky, kx]) * x.at(&[img, c, sy as usize, sx as usize]);
                }
            }
        }
        acc
    })
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[5.0, 6.0]);
    assert_eq!(kernels::matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    assert_eq!(kernels::matmul(&Tensor::eye(2), &a).unwrap(), a);
    let err = kernels::matmul(&a, &t(&[3, 1], &[1.0, 2.0, 3.0])).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }), "{err}");
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[5, 7]);
    let b = rand_tensor(&mut rng, &[7, 3]);
    assert_eq!(kernels::matmul(&a, &b).unwrap(), loop_matmul(&a, &b));
}

#[test]
fn batched_matmul_is_per_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4, 5]);
    let b = rand_tensor(&mut rng, &[3, 5, 2]);
    let c = kernels::matmul(&a, &b).unwrap();
    for i in 0..3 {
        let expect = loop_matmul(&a.index_first(i), &b.index_first(i));
        assert_eq!(c.index_first(i), expect);
    }
}

#[test]
fn pointwise_conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    assert_eq!(kernels::pointwise_conv(&x, &Tensor::eye(3), Some(&Tensor::zeros(&[3]))).unwrap(), x);
    let y = kernels::pointwise_conv(&x, &Tensor::zeros(&[4, 3]), Some(&Tensor::full(&[4], 0.7))).unwrap();
    assert_eq!(y.shape(), &[2, 4, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 0.7));
    assert!(kernels::pointwise_conv(&x, &Tensor::zeros(&[4, 2]), None).is_err());
}

#[test]
fn pointwise_conv_matches_per_pixel_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, cin, cout, h, w) = (2, 3, 4, 3, 2);
    let x = rand_tensor(&mut rng, &[n, cin, h, w]);
    let wt = rand_tensor(&mut rng, &[cout, cin]);
    let b = rand_tensor(&mut rng, &[cout]);
    let y = kernels::pointwise_conv(&x, &wt, Some(&b)).unwrap();
    for img in 0..n {
        for p in 0..h * w {
            let col = Tensor::from_fn(&[cin, 1], |c| x.data()[(img * cin + c) * h * w + p]);
            let out = loop_matmul(&wt, &col);
            for o in 0..cout {
                let got = y.data()[(img * cout + o) * h * w + p];
                assert!((got - (out.data()[o] + b.data()[o])).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn integer_inputs_are_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = int_tensor(&mut rng, &[6, 9]);
    let b = int_tensor(&mut rng, &[9, 4]);
    assert_eq!(kernels::matmul(&a, &b).unwrap(), loop_matmul(&a, &b));
    let x = int_tensor(&mut rng, &[2, 3, 5, 4]);
    let w = int_tensor(&mut rng, &[2, 3]);
    let bias = int_tensor(&mut rng, &[2]);
    let got = kernels::pointwise_conv(&x, &w, Some(&bias)).unwrap();
    let w4 = w.reshaped(&[2, 3, 1, 1]).unwrap();
    assert_eq!(got, loop_conv(&x, &w4, Some(&bias), ConvGeom { kernel: 1, stride: 1, pad: 0 }));
    let w3 = int_tensor(&mut rng, &[2, 3, 3, 3]);
    let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
    assert_eq!(kernels::conv2d(&x, &w3, Some(&bias), g).unwrap(), loop_conv(&x, &w3, Some(&bias), g));
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (stride, h, w) in [(1, 5, 4), (2, 6, 6), (2, 5, 3)] {
        let g = ConvGeom { kernel: 3, stride, pad: 1 };
        let x = rand_tensor(&mut rng, &[2, 3, h, w]);
        let wt = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let got = kernels::conv2d(&x, &wt, Some(&b), g).unwrap();
        assert!(got.max_abs_diff(&loop_conv(&x, &wt, Some(&b), g)) < 1e-13);
    }
}

#[test]
fn softmax_examples() {
    let s = kernels::softmax_rows(&t(&[2, 2], &[0.0, 0.0, 2f64.ln(), 0.0]));
    assert_eq!(&s.data()[..2], &[0.5, 0.5]);
    assert!((s.data()[2] - 2.0 / 3.0).abs() < 1e-15 && (s.data()[3] - 1.0 / 3.0).abs() < 1e-15);
    // large inputs stay finite thanks to max subtraction
    let big = kernels::softmax_rows(&t(&[1, 2], &[1000.0, 999.0]));
    assert!(big.all_finite());
}

#[test]
fn l2_normalize_examples() {
    let v = kernels::l2_normalize_channels(&t(&[1, 2], &[3.0, 4.0]));
    assert_eq!(v.data(), &[0.6, 0.8]);
    assert_eq!(kernels::l2_normalize_channels(&Tensor::zeros(&[1, 3])).data(), &[0.0; 3]);
    // [N,C,H,W] normalizes over C at each pixel
    let x = t(&[1, 2, 1, 2], &[3.0, 0.0, 4.0, 2.0]);
    assert_eq!(kernels::l2_normalize_channels(&x).data(), &[0.6, 0.0, 0.8, 1.0]);
}

#[test]
fn rank_examples() {
    assert_eq!(descending_rank(&t(&[1, 3], &[0.2, -0.1, 0.5])), vec![1, 2, 0]);
    assert_eq!(descending_rank(&t(&[1, 3], &[5.0, 5.0, 5.0])), vec![0, 1, 2]);
    assert_eq!(descending_rank(&t(&[2, 2], &[1.0, 2.0, 4.0, 3.0])), vec![1, 0, 0, 1]);
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let err = grad_check::<_, TensorError>(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let c = tape.constant(Tensor::scalar(3.0));
    let zero = tape.scale(v, 0.0);
    let s = tape.sum(zero);
    let out = tape.add(s, c).unwrap();
    let g = tape.backward(out).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| d == 0.0));

    let rejected = grad_check::<_, TensorError>(|_, v| Ok(v), &x, 1e-5);
    assert!(matches!(rejected, Err(TensorError::NotScalar { .. })));
}

/// Reduce any tensor to a scalar with fixed random weights so every output
/// coordinate carries a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn check_op(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>) {
    let report = dcfm::tensorlab::grad_check_many(
        |tape, vars| {
            let y = f(tape, vars)?;
            weighted_sum(tape, y, 99)
        },
        inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
}

#[test]
fn every_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let pos = a.map(|v| v.abs() + 0.5);
    let m = rand_tensor(&mut rng, &[4, 2]);
    let x4 = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let w1 = rand_tensor(&mut rng, &[2, 3]);
    let b1 = rand_tensor(&mut rng, &[2]);
    let w3 = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let mask = rand_tensor(&mut rng, &[2, 1, 4, 4]);
    let proto = rand_tensor(&mut rng, &[1, 3]);
    let other4 = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let p1 = rand_tensor(&mut rng, &[1, 5]);
    let p2 = rand_tensor(&mut rng, &[1, 5]);
    // keep relu/clamp inputs away from their kinks
    let away = a.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });

    check_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op("div", &[a.clone(), pos.clone()], |t, v| t.div(v[0], v[1]));
    check_op("scale", std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -2.5)));
    check_op("add_scalar", std::slice::from_ref(&a), |t, v| Ok(t.add_scalar(v[0], 1.5)));
    check_op("relu", std::slice::from_ref(&away), |t, v| Ok(t.relu(v[0])));
    check_op("clamp", std::slice::from_ref(&away), |t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
    check_op("sigmoid", std::slice::from_ref(&a), |t, v| Ok(t.sigmoid(v[0])));
    check_op("ln", std::slice::from_ref(&pos), |t, v| Ok(t.ln(v[0])));
    check_op("matmul", &[a.clone(), m.clone()], |t, v| t.matmul(v[0], v[1]));
    check_op("transpose", std::slice::from_ref(&a), |t, v| t.transpose(v[0]));
    check_op("reshape", std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[2, 6]));
    check_op("softmax_rows", std::slice::from_ref(&a), |t, v| Ok(t.softmax_rows(v[0])));
    check_op("l2_normalize", std::slice::from_ref(&a), |t, v| Ok(t.l2_normalize(v[0], 1)));
    check_op("l2_normalize_channels", std::slice::from_ref(&x4), |t, v| Ok(t.l2_normalize_channels(v[0])));
    check_op("pointwise_conv", &[x4.clone(), w1.clone(), b1.clone()], |t, v| t.pointwise_conv(v[0], v[1], Some(v[2])));
    for stride in [1, 2] {
        let g = ConvGeom { kernel: 3, stride, pad: 1 };
        check_op("conv2d", &[x4.clone(), w3.clone(), b1.clone()], |t, v| t.conv2d(v[0], v[1], Some(v[2]), g));
    }
    check_op("channels_last", std::slice::from_ref(&x4), |t, v| t.channels_last(v[0]));
    check_op("channels_first", &[rand_tensor(&mut rng, &[2, 16, 3])], |t, v| t.channels_first(v[0], 4, 4));
    check_op("gather_rows", std::slice::from_ref(&a), |t, v| t.gather_rows(v[0], &[2, 0, 2]));
    check_op("mul_spatial", &[x4.clone(), mask.clone()], |t, v| t.mul_spatial(v[0], v[1]));
    check_op("mul_channel", &[x4.clone(), proto.clone()], |t, v| t.mul_channel(v[0], v[1]));
    check_op("upsample2x", std::slice::from_ref(&x4), |t, v| t.upsample2x(v[0]));
    check_op("concat_channels", &[x4.clone(), other4.clone()], |t, v| t.concat_channels(v[0], v[1]));
    check_op("sum_per_sample", std::slice::from_ref(&x4), |t, v| Ok(t.sum_per_sample(v[0])));
    check_op("mean", std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])));
    check_op("cosine_style", &[p1.clone(), p2.clone()], |t, v| t.cosine_style(v[0], v[1]));
}

#[test]
fn backward_fills_every_trainable_leaf() {
    let mut tape = Tape::new();
    let used = tape.leaf(Tensor::ones(&[2]));
    let unused = tape.leaf(Tensor::ones(&[3]));
    let s = tape.sum(used);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(used).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
}

fn small_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, s)| (Just(r), Just(s), prop::collection::vec(-50.0f64..50.0, r * s)))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, s, data) in small_matrix(), shift in -10.0f64..10.0) {
        let x = Tensor::new(&[r, s], data).unwrap();
        let y = kernels::softmax_rows(&x);
        for row in y.data().chunks(s) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
        let shifted = kernels::softmax_rows(&x.map(|v| v + shift));
        prop_assert!(shifted.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn normalized_rows_have_unit_norm((r, s, data) in small_matrix()) {
        let x = Tensor::new(&[r, s], data).unwrap();
        let y = kernels::l2_normalize(&x, 1);
        for (row, orig) in y.data().chunks(s).zip(x.data().chunks(s)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if orig.iter().any(|&v| v != 0.0) {
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rank_is_a_permutation((r, s, data) in small_matrix()) {
        let x = Tensor::new(&[r, s], data).unwrap();
        let ranks = descending_rank(&x);
        for (row, vals) in ranks.chunks(s).zip(x.data().chunks(s)) {
            let mut sorted = row.to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..s).collect::<Vec<_>>());
            let argmax = (0..s).fold(0, |best, j| if vals[j] > vals[best] { j } else { best });
            prop_assert_eq!(row[argmax], 0);
            // larger value never gets the larger rank
            for i in 0..s {
                for j in 0..s {
                    if vals[i] > vals[j] {
                        prop_assert!(row[i] < row[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_agrees_with_loops((r, k, a) in small_matrix(), s in 1usize..5, seed in any::<u64>()) {
        let a = Tensor::new(&[r, k], a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rand_tensor(&mut rng, &[k, s]);
        prop_assert_eq!(kernels::matmul(&a, &b).unwrap(), loop_matmul(&a, &b));
    }
}
