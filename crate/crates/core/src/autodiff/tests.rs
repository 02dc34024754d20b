use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    // Random projection so every output coordinate matters to the scalar.
    let w = Tensor::randn(tape.shape(v).to_vec(), 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let m = Tensor::randn(vec![3, 4], 1.0, &mut rng(1));
    let i = tape.constant(Tensor::eye(3));
    let mv = tape.constant(m.clone());
    let out = tape.matmul(i, mv).unwrap();
    assert_eq!(tape.value(out), &m);

    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    assert_eq!(tape.shape(c), &[2, 1]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = Tensor::randn(vec![4, 5], 1.0, &mut rng(2));
    let b = Tensor::randn(vec![5, 3], 1.0, &mut rng(3));
    let err = grad_check_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            weighted_sum(tape, c, 4)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn batched_matmul_broadcasts_leading_dims() {
    let a = Tensor::randn(vec![2, 3, 4, 5], 1.0, &mut rng(5));
    let b = Tensor::randn(vec![5, 2], 1.0, &mut rng(6));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 4, 2]);
    // slice [1, 2] against a plain 2-D product
    let mut expect = [0.0; 8];
    let off = (3 + 2) * 20;
    for i in 0..4 {
        for j in 0..2 {
            for k in 0..5 {
                expect[i * 2 + j] += a.data()[off + i * 5 + k] * b.data()[k * 2 + j];
            }
        }
    }
    let got = &tape.value(c).data()[(3 + 2) * 8..(3 + 2) * 8 + 8];
    for (g, e) in got.iter().zip(expect) {
        assert!((g - e).abs() < 1e-12);
    }

    let a1 = Tensor::randn(vec![1, 3, 2], 1.0, &mut rng(7));
    let b1 = Tensor::randn(vec![4, 2, 3], 1.0, &mut rng(8));
    let err = grad_check_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            weighted_sum(tape, c, 9)
        },
        &[a1, b1],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data()[0], 1.0);
    assert!(tape.value(y).data()[1] < 1e-300);
    assert!(tape.value(y).is_finite());

    let x = Tensor::randn(vec![7], 2.0, &mut rng(10));
    let xv = tape.constant(x.clone());
    let y = tape.softmax(xv, 0).unwrap();
    let total: f64 = tape.value(y).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    let err = grad_check(
        |tape, v| {
            let s = tape.softmax(v, 0)?;
            weighted_sum(tape, s, 11)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn conv_unit_kernel_sums_channels() {
    let x = Tensor::randn(vec![2, 3, 4, 5], 1.0, &mut rng(12));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::full(vec![1, 3, 1, 1], 1.0));
    let y = tape.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[2, 1, 4, 5]);
    for b in 0..2 {
        for p in 0..20 {
            let expect: f64 = (0..3).map(|c| x.data()[(b * 3 + c) * 20 + p]).sum();
            assert!((tape.value(y).data()[b * 20 + p] - expect).abs() < 1e-12);
        }
    }

    let zero = tape.constant(Tensor::zeros(vec![1, 3, 6, 6]));
    let k = tape.constant(Tensor::randn(vec![4, 3, 3, 3], 1.0, &mut rng(13)));
    let y = tape.conv2d(zero, k, 1, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_window_sums_match_direct_oracle() {
    let x = Tensor::randn(vec![1, 1, 4, 4], 1.0, &mut rng(14));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = tape.conv2d(xv, k, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    for oy in 0..2 {
        for ox in 0..2 {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += x.at(&[0, 0, 2 * oy + dy, 2 * ox + dx]);
                }
            }
            assert!((tape.value(y).at(&[0, 0, oy, ox]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_output_size_and_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 7, 9]));
    let k = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]));
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 4, 5]);
    let big = tape.constant(Tensor::zeros(vec![3, 2, 10, 3]));
    assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
    let wrong_c = tape.constant(Tensor::zeros(vec![3, 1, 3, 3]));
    assert!(tape.conv2d(x, wrong_c, 1, 0).is_err());
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let x = Tensor::randn(vec![2, 2, 5, 6], 1.0, &mut rng(15));
    let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng(16));
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let err = grad_check_many(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], stride, pad)?;
                weighted_sum(tape, y, 17)
            },
            &[x.clone(), k.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn batchnorm_train_normalizes() {
    let x = Tensor::randn(vec![64, 3], 1.0, &mut rng(18));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(vec![3], 1.0));
    let b = tape.constant(Tensor::zeros(vec![3]));
    let (y, _) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
    let y = tape.value(y);
    for j in 0..3 {
        let col: Vec<f64> = (0..64).map(|i| y.at(&[i, j])).collect();
        let mean = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn batchnorm_constant_column_is_zero() {
    let mut data = Tensor::randn(vec![5, 2], 1.0, &mut rng(19)).into_data();
    for r in 0..5 {
        data[r * 2 + 1] = 3.25;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![5, 2], data).unwrap());
    let g = tape.constant(Tensor::full(vec![2], 1.0));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let (y, stats) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
    for r in 0..5 {
        assert_eq!(tape.value(y).at(&[r, 1]), 0.0);
    }
    assert_eq!(stats.var[1], 0.0);
    assert_eq!(stats.mean[1], 3.25);
}

#[test]
fn batchnorm_rejects_single_sample_in_train_mode() {
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::zeros(vec![1, 4]));
    let g = tape.constant(Tensor::full(vec![4], 1.0));
    let b = tape.constant(Tensor::zeros(vec![4]));
    assert!(matches!(tape.batchnorm_train(xv, g, b, 1e-5), Err(Error::Dimension(_))));
    assert!(tape.batchnorm_eval(xv, g, b, &[0.0; 4], &[1.0; 4], 1e-5).is_ok());
}

#[test]
fn batchnorm_gradient_matches_finite_differences() {
    let x = Tensor::randn(vec![8, 4], 1.0, &mut rng(20));
    let g = Tensor::randn(vec![4], 1.0, &mut rng(21));
    let b = Tensor::randn(vec![4], 1.0, &mut rng(22));
    let err = grad_check_many(
        |tape, v| {
            let (y, _) = tape.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(tape, y, 23)
        },
        &[x.clone(), g.clone(), b.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "train relative error {err}");
    let err = grad_check_many(
        |tape, v| {
            let y = tape.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.0, 0.5, 2.0, 0.1], 1e-5)?;
            weighted_sum(tape, y, 24)
        },
        &[x, g, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "eval relative error {err}");
}

#[test]
fn grad_check_trivial_functions() {
    let x = Tensor::randn(vec![6], 1.0, &mut rng(25));
    let err = grad_check(|tape, v| Ok(tape.sum(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");

    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);
    let err = grad_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_reports_non_finite() {
    let x = Tensor::new(vec![1], vec![0.0]).unwrap();
    let res = grad_check(
        |tape, v| {
            let inv = tape.constant(Tensor::scalar(f64::INFINITY));
            let y = tape.mul(v, inv)?;
            Ok(tape.sum(y))
        },
        &x,
        1e-5,
    );
    assert!(matches!(res, Err(Error::Numeric(_))));
}

#[test]
fn chain_rule_matches_product_rule() {
    // f(x) = sum(3 * x * x) has gradient 6x; check the composed graph exactly.
    let x = Tensor::randn(vec![5], 1.0, &mut rng(26)).with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let sc = tape.scale(sq, 3.0);
    let s = tape.sum(sc);
    tape.backward(s).unwrap();
    for (g, xv) in tape.grad(v).unwrap().iter().zip(x.data()) {
        assert!((g - 6.0 * xv).abs() < 1e-12);
    }
}

#[test]
fn leaf_gradient_accumulates_over_fan_out() {
    let x = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let a = tape.add(v, v).unwrap();
    let b = tape.add(a, v).unwrap();
    let s = tape.sum(b);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[3.0, 3.0]);
    let c = tape.constant(Tensor::zeros(vec![2]));
    assert!(tape.grad(c).is_none());
    tape.clear();
    assert!(tape.is_empty());
}

fn pos_away_from_zero(shape: Vec<usize>, seed: u64) -> Tensor {
    // Keeps ReLU/max inputs away from kinks and ties.
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let mag = 0.1 + r.random::<f64>();
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            sign * mag + 1e-3 * i as f64
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn every_op_passes_twenty_random_gradient_checks() {
    type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Case)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![5]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_bias", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("add_channel_bias", vec![vec![2, 3, 2, 2], vec![3]], Box::new(|t, v| t.add_channel_bias(v[0], v[1]))),
        ("matmul", vec![vec![2, 3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("permute", vec![vec![2, 3, 4]], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("relu", vec![vec![10]], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("softmax", vec![vec![3, 4, 2]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("conv2d", vec![vec![1, 2, 4, 4], vec![2, 2, 3, 3]], Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1))),
        ("max_pool2d", vec![vec![1, 2, 4, 5]], Box::new(|t, v| t.max_pool2d(v[0], 2))),
        ("group_max", vec![vec![5, 2, 3]], Box::new(|t, v| t.group_reduce(v[0], &[0..2, 2..5], Reduce::Max))),
        ("group_mean", vec![vec![5, 2, 3]], Box::new(|t, v| t.group_reduce(v[0], &[0..3, 3..5], Reduce::Mean))),
        ("strip_pool", vec![vec![2, 2, 4, 3]], Box::new(|t, v| t.strip_pool(v[0], 2))),
        ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        (
            "batchnorm",
            vec![vec![4, 3], vec![3], vec![3]],
            Box::new(|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        ("cross_entropy", vec![vec![4, 3]], Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]))),
        ("bce", vec![vec![4, 1]], Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0]))),
        ("triplet", vec![vec![5, 3]], Box::new(|t, v| Ok(t.triplet(v[0], &[0, 0, 1, 1, 2], 0.5)?.0))),
    ];
    for (name, shapes, f) in &cases {
        for trial in 0..20u64 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| pos_away_from_zero(s.clone(), 1000 * trial + i as u64))
                .collect();
            let err = grad_check_many(
                |tape, v| {
                    let y = f(tape, v)?;
                    weighted_sum(tape, y, 77 + trial)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name} trial {trial}: relative error {err}");
        }
    }
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let x = Tensor::randn(vec![2, 2, 6, 6], 1.0, &mut rng(30)).with_grad();
        let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng(31)).with_grad();
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x), tape.leaf(k));
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.max_pool2d(y, 2).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let l = weighted_sum(&mut tape, s, 32).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item().to_bits(), tape.grad(kv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
