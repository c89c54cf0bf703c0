//! Forward values of the primitive ops against independent oracles.

use coca_numerics::{Reduction, Rng, Tape, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_dot() {
    let mut t = Tape::<f32>::new();
    let eye = t.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let col = t.constant(Tensor::from_f64([2, 1], &[3.0, 4.0]).unwrap());
    let out = t.matmul(eye, col).unwrap();
    assert_eq!(t.value(out).data(), &[3.0, 4.0]);

    let row = t.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let out = t.matmul(row, col).unwrap();
    assert_eq!(t.value(out).shape(), &[1, 1]);
    assert_eq!(t.value(out).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(11);
    for &(m, k, n) in &[(4, 5, 3), (1, 7, 1), (32, 32, 32), (9, 2, 17)] {
        let a = Tensor::<f32>::randn([m, k], 1.0, &mut rng);
        let b = Tensor::<f32>::randn([k, n], 1.0, &mut rng);
        let oracle = naive_matmul(&a.to_f64_vec(), &b.to_f64_vec(), m, k, n);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let out = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(out).to_f64_vec().iter().zip(&oracle) {
            assert!(
                (x - y).abs() < 1e-5 * (1.0 + y.abs()),
                "{m}x{k}x{n}: {x} vs {y}"
            );
        }
    }
}

#[test]
fn matmul_transposed_and_batched_agree_with_oracle() {
    let mut rng = Rng::new(5);
    let a = Tensor::<f64>::randn([3, 4, 5], 1.0, &mut rng);
    let b = Tensor::<f64>::randn([3, 6, 5], 1.0, &mut rng);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let out = t.bmm(va, vb, true).unwrap();
    assert_eq!(t.value(out).shape(), &[3, 4, 6]);
    for batch in 0..3 {
        for i in 0..4 {
            for j in 0..6 {
                let want: f64 = (0..5)
                    .map(|p| a.at(&[batch, i, p]) * b.at(&[batch, j, p]))
                    .sum();
                assert!((t.value(out).at(&[batch, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([4, 2]));
    assert!(t.matmul(a, b).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64([2], &[0.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(Tensor::from_f64([2], &[1000.0, 1000.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, &got) in t.value(y).data().iter().enumerate() {
        let want = ((i + 1) as f64).exp() / z;
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_inner_axis() {
    let mut rng = Rng::new(2);
    let x = Tensor::<f64>::randn([2, 3, 4], 2.0, &mut rng);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.softmax(v, 1).unwrap();
    for i in 0..2 {
        for k in 0..4 {
            let z: f64 = (0..3).map(|j| x.at(&[i, j, k]).exp()).sum();
            for j in 0..3 {
                let want = x.at(&[i, j, k]).exp() / z;
                assert!((t.value(y).at(&[i, j, k]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f64>::new();
    let gain = t.constant(Tensor::ones([4]));
    let bias = t.constant(Tensor::zeros([4]));
    let x = t.constant(Tensor::full([4], 3.5));
    let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let gain = t.constant(Tensor::ones([2]));
    let bias = t.constant(Tensor::zeros([2]));
    let x = t.constant(Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
    let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-5);

    let mut rng = Rng::new(9);
    let x = t.constant(Tensor::randn([6, 16], 3.0, &mut rng));
    let gain = t.constant(Tensor::ones([16]));
    let bias = t.constant(Tensor::zeros([16]));
    let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
    for r in 0..6 {
        let row = t.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn cross_entropy_uniform_logits_sum_to_t_ln_v() {
    let mut t = Tape::<f64>::new();
    let logits = t.constant(Tensor::zeros([3, 8]));
    let loss = t
        .cross_entropy(logits, &[Some(1), Some(5), Some(7)], Reduction::Sum)
        .unwrap();
    assert!((t.value(loss).item() - 3.0 * 8f64.ln()).abs() < 1e-12);
    let mean = t
        .cross_entropy(logits, &[Some(1), None, Some(7)], Reduction::Mean)
        .unwrap();
    assert!((t.value(mean).item() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_vanishes_with_margin() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let mut t = Tape::<f64>::new();
        let mut data = vec![0.0; 4];
        data[2] = margin;
        let logits = t.constant(Tensor::from_f64([1, 4], &data).unwrap());
        let loss = t.cross_entropy(logits, &[Some(2)], Reduction::Sum).unwrap();
        let v = t.value(loss).item();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-20);
}

#[test]
fn cross_entropy_matches_log_softmax_gather() {
    let mut rng = Rng::new(21);
    let x = Tensor::<f64>::randn([5, 7], 2.0, &mut rng);
    let targets = [Some(0), Some(6), None, Some(3), Some(3)];
    let mut want = 0.0;
    for (r, tgt) in targets.iter().enumerate() {
        let Some(tgt) = tgt else { continue };
        let row = x.row(r);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[*tgt];
    }
    let mut t = Tape::new();
    let v = t.constant(x);
    let loss = t.cross_entropy(v, &targets, Reduction::Sum).unwrap();
    assert!((t.value(loss).item() - want).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut t = Tape::<f32>::new();
    let logits = t.constant(Tensor::zeros([1, 4]));
    assert!(t.cross_entropy(logits, &[Some(4)], Reduction::Sum).is_err());
}

#[test]
fn nonfinite_values_are_flagged() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64([1], &[100.0]).unwrap());
    assert!(t.check_finite().is_ok());
    let _ = t.exp(x);
    assert!(t.check_finite().is_err());
}

#[test]
fn zero_extent_tensors_are_rejected() {
    assert!(Tensor::<f32>::new([0, 3], vec![]).is_err());
    assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
}
