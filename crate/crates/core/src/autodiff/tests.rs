use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::rng;
use crate::tensor::Tensor;

fn t1(data: &[f64]) -> Tensor {
    Tensor::new(&[data.len()], data.to_vec()).unwrap()
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.leaf(t1(&[0.0]));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).data(), &[0.5]);
}

#[test]
fn softmax_uniform_rows() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 3], vec![2.5, 2.5, 2.5]).unwrap());
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng::rng_from(5);
    for _ in 0..20 {
        let data: Vec<f64> = (0..12).map(|_| rng::standard_normal(&mut r) * 10.0).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3, 4], data).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }
}

#[test]
fn conv1d_matches_direct_convolution_oracle() {
    // ramp of length 8, kernel [1,0,-1], pad 1, stride 1
    let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::new(&[1, 1, 8], x.clone()).unwrap());
    let wv = tape.leaf(Tensor::new(&[1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
    let y = tape.conv1d(xv, wv, 1, 1).unwrap();
    // direct correlation oracle with zero padding
    let mut expect = vec![0.0; 8];
    for t in 0..8 {
        for (k, &w) in [1.0, 0.0, -1.0].iter().enumerate() {
            let pos = t + k;
            if pos >= 1 && pos - 1 < 8 {
                expect[t] += x[pos - 1] * w;
            }
        }
    }
    assert_eq!(tape.value(y).data(), &expect[..]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t1(&[1.0, -2.0, 3.0]));
    let loss = tape.sum_all(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_half_squared_norm_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(t1(&[1.0, -2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq);
    let loss = tape.mul_scalar(s, 0.5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(t1(&[1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t1(&[1.0, 2.0]));
    let unused = tape.leaf(t1(&[5.0]));
    let loss = tape.sum_all(x);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(&tape, unused).data(), &[0.0]);
}

#[test]
fn layernorm_normalizes_rows_before_affine() {
    let mut r = rng::rng_from(9);
    let d = 16;
    let data: Vec<f64> = (0..3 * d).map(|_| rng::standard_normal(&mut r) * 4.0 + 2.0).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3, d], data).unwrap());
    let gamma = tape.leaf(Tensor::filled(&[d], 1.0));
    let beta = tape.leaf(Tensor::zeros(&[d]));
    let y = tape.layernorm(x, gamma, beta, 1e-12).unwrap();
    for row in tape.value(y).data().chunks(d) {
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "var {var}");
    }
}

#[test]
fn dropout_eval_is_identity_and_train_preserves_expectation() {
    let mut r = rng::rng_from(21);
    let x_data: Vec<f64> = (0..64).map(|_| rng::standard_normal(&mut r)).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(t1(&x_data));
    let y = tape.dropout(x, 0.3, Mode::Eval, &mut r).unwrap();
    assert_eq!(y, x, "eval-mode dropout must not record a node");

    let mut sums = vec![0.0; 64];
    let trials = 4000;
    for s in 0..trials {
        let mut rr = rng::rng_for(7, s);
        let mut tp = Tape::new();
        let xv = tp.leaf(t1(&x_data));
        let yv = tp.dropout(xv, 0.3, Mode::Train, &mut rr).unwrap();
        for (acc, v) in sums.iter_mut().zip(tp.value(yv).data()) {
            *acc += v;
        }
    }
    for (acc, xi) in sums.iter().zip(&x_data) {
        let mean = acc / trials as f64;
        assert!((mean - xi).abs() < 0.15, "expectation drift: {mean} vs {xi}");
    }
}

#[test]
fn inter_term_counts_single_class_batches_as_skipped() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(&[3, 4], vec![1.0; 12]).unwrap());
    let repel = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let (v, skipped) = tape.inter_term(z, &[0, 0, 0], &repel, 0.1, 1e-6).unwrap();
    assert_eq!(skipped, 3);
    assert_eq!(tape.value(v).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn attention_rows_are_convex_combinations() {
    let mut r = rng::rng_from(3);
    let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng::standard_normal(&mut r)).collect();
    let mut tape = Tape::new();
    let q = tape.leaf(Tensor::new(&[2, 3, 4], data.clone()).unwrap());
    let k = tape.leaf(Tensor::new(&[2, 3, 4], data.iter().map(|v| v + 0.5).collect()).unwrap());
    let v = tape.leaf(Tensor::filled(&[2, 3, 4], 2.0));
    let o = tape.scaled_dot_attention(q, k, v).unwrap();
    // constant values stay constant under any softmax weighting
    for val in tape.value(o).data() {
        assert!((val - 2.0).abs() < 1e-12);
    }
}
