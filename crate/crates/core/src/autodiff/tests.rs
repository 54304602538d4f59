use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn values(t: &Tape, v: Var) -> Vec<f64> {
    t.value(v).unwrap().into_data()
}

#[test]
fn elementwise_examples() {
    let t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(values(&t, t.add(a, b).unwrap()), [4.0, 6.0]);
    let c = t.constant(Tensor::vector(vec![2.0, 3.0]));
    let d = t.constant(Tensor::vector(vec![0.0, 1.0]));
    assert_eq!(values(&t, t.mul(c, d).unwrap()), [0.0, 3.0]);
    let s = t.constant(Tensor::scalar(10.0));
    assert_eq!(values(&t, t.sub(a, s).unwrap()), [-9.0, -8.0]);
    assert_eq!(values(&t, t.scalar_mul(a, -2.0).unwrap()), [-2.0, -4.0]);
}

#[test]
fn elementwise_shape_mismatch_is_rejected() {
    let t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let err = t.add(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "add", .. }), "{err}");
}

#[test]
fn product_rule_gradients() {
    let t = Tape::new();
    let a = t.param(Tensor::vector(vec![2.0, 3.0]));
    let b = t.param(Tensor::vector(vec![5.0, 7.0]));
    let p = t.mul(a, b).unwrap();
    let loss = t.sum(p).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[5.0, 7.0]);
    assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0]);
}

#[test]
fn matmul_examples() {
    let t = Tape::new();
    let i = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = t.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    assert_eq!(values(&t, t.matmul(i, m).unwrap()), [5.0, 6.0, 7.0, 8.0]);
    let r = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let c = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    assert_eq!(values(&t, t.matmul(r, c).unwrap()), [11.0]);
    assert!(t.matmul(r, r).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let mut expect = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            for k in 0..5 {
                expect[i * 3 + j] += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            }
        }
    }
    let t = Tape::new();
    let (va, vb) = (t.constant(a), t.constant(b));
    let got = values(&t, t.matmul(va, vb).unwrap());
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

/// Direct-summation cross-correlation used as an oracle.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.data()[((o * cin + c) * k + ky) * k + kx]
                                * x.data()[(c * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    out
}

#[test]
fn conv_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 5, 4]);
    let t = Tape::new();
    let vx = t.constant(x.clone());
    let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    assert_eq!(values(&t, t.conv2d(vx, k, 1, 0).unwrap()), x.data());
}

#[test]
fn conv_ones_kernel_on_constant_image() {
    let v = 0.37;
    let t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 6, 6], v));
    let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let out = t.value(t.conv2d(x, k, 1, 0).unwrap()).unwrap();
    assert_eq!(out.shape(), &[1, 4, 4]);
    for o in out.data() {
        assert!((o - 9.0 * v).abs() < 1e-12);
    }
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(stride, pad, n) in &[(1, 0, 6), (1, 1, 6), (2, 1, 7), (3, 0, 6)] {
        let x = rand_tensor(&mut rng, &[2, n, n]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let t = Tape::new();
        let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
        let got = values(&t, t.conv2d(vx, vw, stride, pad).unwrap());
        let expect = conv_oracle(&x, &w, stride, pad);
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "stride {stride} pad {pad}");
        }
    }
}

#[test]
fn conv_rejects_non_integral_output() {
    let t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 48, 48]));
    let k = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(t.conv2d(x, k, 2, 1).is_err());
    let even = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(t.conv2d(x, even, 1, 0).is_err());
}

#[test]
fn pooling_and_relu_examples() {
    let t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    assert_eq!(values(&t, t.relu(x).unwrap()), [0.0, 0.0, 2.0]);
    let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert_eq!(values(&t, t.avgpool2(m).unwrap()), [2.5]);
    let c = t.constant(Tensor::full(&[2, 4, 4], 0.5));
    assert_eq!(values(&t, t.global_avg_pool(c).unwrap()), [0.5, 0.5]);
    let odd = t.constant(Tensor::zeros(&[1, 3, 4]));
    assert!(t.avgpool2(odd).is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let t = Tape::new();
    let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn clip01_values_and_subgradient() {
    let t = Tape::new();
    let x = t.param(Tensor::vector(vec![-0.2, 0.5, 1.3, 0.0, 1.0]));
    let y = t.clip01(x).unwrap();
    assert_eq!(values(&t, y), [0.0, 0.5, 1.0, 0.0, 1.0]);
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_examples() {
    let t = Tape::new();
    let uniform = t.constant(Tensor::matrix(1, 4, vec![0.3; 4]).unwrap());
    let l = t.softmax_cross_entropy(uniform, &[2]).unwrap();
    assert!((t.item(l).unwrap() - 4f64.ln()).abs() < 1e-12);

    let sat = t.constant(Tensor::matrix(1, 3, vec![0.0, 1000.0, 0.0]).unwrap());
    let l = t.softmax_cross_entropy(sat, &[1]).unwrap();
    assert!(t.item(l).unwrap().abs() < 1e-12);

    assert!(t.softmax_cross_entropy(sat, &[3]).is_err());
    assert!(t.softmax_cross_entropy(sat, &[0, 1]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = rand_tensor(&mut rng, &[3, 5]);
    let report = check_gradients(&[logits], |t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2]), 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn backward_of_sum_is_ones() {
    let t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.1, -3.0, 7.0]));
    let l = t.sum(x).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn fan_out_accumulates() {
    let t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.5, -2.0]));
    let y = t.mul(x, x).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0]);
}

#[test]
fn backward_requires_scalar_and_single_use() {
    let t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let y = t.scalar_mul(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(Error::Tape(_))));
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert!(matches!(t.backward(l), Err(Error::Tape(_))));
    assert!(t.relu(x).is_err());
}

#[test]
fn vars_from_another_tape_are_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let x = t1.param(Tensor::scalar(1.0));
    assert!(t2.exp(x).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = t.mul(x, c).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn scalar_broadcast_gradient_sums() {
    let t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.param(Tensor::scalar(2.0));
    let y = t.mul(x, s).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(s).unwrap().data(), &[6.0]);
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn small_network_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 6, 6]),
        rand_tensor(&mut rng, &[3, 2, 3, 3]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[4]),
    ];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let h = t.conv2d(v[0], v[1], 1, 1)?;
            let h = t.add_channel_bias(h, v[2])?;
            let h = t.relu(h)?;
            let h = t.avgpool2(h)?;
            let h = t.global_avg_pool(h)?;
            let h = t.reshape(h, &[1, 3])?;
            let z = t.matmul(h, v[3])?;
            let z = t.add_row_bias(z, v[4])?;
            t.softmax_cross_entropy(z, &[1])
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
