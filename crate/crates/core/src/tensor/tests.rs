use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_data(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TensorData::new(shape.to_vec(), data).unwrap()
}

fn param(name: &str, value: TensorData<f64>) -> Param<f64> {
    Param::new(String::from(name), value)
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(TensorData::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.leaf(TensorData::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(c), &[3.0, 4.0]);
}

#[test]
fn matmul_hand_computed() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(TensorData::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(TensorData::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(c), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(TensorData::zeros(vec![2, 3]));
    let b = tape.leaf(TensorData::zeros(vec![4, 2]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = vec![
        param("a", rand_data(&mut rng, &[4, 5])),
        param("b", rand_data(&mut rng, &[5, 3])),
    ];
    let report = grad_check(
        |tape, ps| {
            let a = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            let c = tape.matmul(a, b)?;
            // Reduce to a scalar: sum of all entries via two sum_axis calls.
            let s0 = tape.sum_axis(c, 0)?;
            let s1 = tape.sum_axis(s0, 0)?;
            Ok(s1)
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn batched_matmul_matches_per_slab_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_data(&mut rng, &[2, 3, 4, 5]);
    let b = rand_data(&mut rng, &[2, 3, 5, 2]);
    let mut tape = Tape::<f64>::new();
    let ta = tape.leaf(a.clone());
    let tb = tape.leaf(b.clone());
    let c = tape.matmul(ta, tb).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 4, 2]);
    for slab in 0..6 {
        for i in 0..4 {
            for j in 0..2 {
                let mut want = 0.0;
                for t in 0..5 {
                    want += a.data()[slab * 20 + i * 5 + t] * b.data()[slab * 10 + t * 2 + j];
                }
                let got = tape.data(c)[slab * 8 + i * 2 + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(TensorData::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax_masked(x, None).unwrap();
    for v in tape.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_single_unmasked() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(TensorData::new(vec![2], vec![5.0, 5.0]).unwrap());
    let mask = Mask::new(vec![2], vec![true, false]).unwrap();
    let y = tape.softmax_masked(x, Some(&mask)).unwrap();
    assert_eq!(tape.data(y), &[1.0, 0.0]);
}

#[test]
fn softmax_matches_direct_formula() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(TensorData::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.softmax_masked(x, None).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, xv) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((tape.data(y)[i] - xv.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_masked_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_data(&mut rng, &[4, 6]);
    let keep: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
    let mask = Mask::new(vec![4, 6], keep.clone()).unwrap();
    let mut tape = Tape::<f64>::new();
    let tx = tape.leaf(x);
    let y = tape.softmax_masked(tx, Some(&mask)).unwrap();
    for r in 0..4 {
        let row = &tape.data(y)[r * 6..(r + 1) * 6];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for i in 0..6 {
            if !keep[r * 6 + i] {
                assert_eq!(row[i], 0.0);
            }
        }
    }
}

#[test]
fn softmax_fully_masked_row_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(TensorData::zeros(vec![2, 3]));
    let mask = Mask::new(vec![2, 3], vec![true, true, true, false, false, false]).unwrap();
    assert!(matches!(
        tape.softmax_masked(x, Some(&mask)),
        Err(Error::FullyMaskedRow { row: 1, .. })
    ));
}

#[test]
fn layer_norm_constant_vector_collapses_to_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(TensorData::new(vec![3], vec![4.2, 4.2, 4.2]).unwrap());
    let g = tape.leaf(TensorData::full(vec![3], 1.0));
    let b = tape.leaf(TensorData::zeros(vec![3]));
    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
    for v in tape.data(y) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_zero_gain_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(rand_data(&mut rng, &[2, 4]));
    let g = tape.leaf(TensorData::zeros(vec![4]));
    let b = tape.leaf(TensorData::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
    for r in 0..2 {
        assert_eq!(&tape.data(y)[r * 4..(r + 1) * 4], &[0.5, -1.0, 2.0, 0.0]);
    }
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 16;
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(rand_data(&mut rng, &[3, d]));
    let g = tape.leaf(TensorData::full(vec![d], 1.0));
    let b = tape.leaf(TensorData::zeros(vec![d]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    for r in 0..3 {
        let row = &tape.data(y)[r * d..(r + 1) * d];
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_data(&mut rng, &[2, 8]);
    let shifted = TensorData::new(
        vec![2, 8],
        x.data().iter().map(|v| v + 3.7).collect(),
    )
    .unwrap();
    let mut tape = Tape::<f64>::new();
    let g = tape.leaf(TensorData::full(vec![8], 1.0));
    let b = tape.leaf(TensorData::zeros(vec![8]));
    let tx = tape.leaf(x);
    let ts = tape.leaf(shifted);
    let y0 = tape.layer_norm(tx, g, b, 1e-9).unwrap();
    let y1 = tape.layer_norm(ts, g, b, 1e-9).unwrap();
    for (a, c) in tape.data(y0).iter().zip(tape.data(y1).iter()) {
        assert!((a - c).abs() < 1e-6);
    }
}

#[test]
fn relu_sigmoid_concat_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(TensorData::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);

    let z = tape.scalar(0.0);
    let s = tape.sigmoid(z);
    assert_eq!(tape.data(s), &[0.5]);

    let a = tape.leaf(TensorData::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(TensorData::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = tape.concat_last(&[a, b]).unwrap();
    assert_eq!(tape.shape(c), &[2, 2]);
    assert_eq!(tape.data(c), &[1.0, 3.0, 2.0, 4.0]);
}

#[test]
fn cosine_squared_identical_orthogonal_opposite() {
    let mut tape = Tape::<f64>::new();
    let u = tape.leaf(TensorData::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let c = tape.cosine_squared(u, u).unwrap();
    assert!((tape.item(c) - 1.0).abs() < 1e-12);

    let e1 = tape.leaf(TensorData::new(vec![2], vec![1.0, 0.0]).unwrap());
    let e2 = tape.leaf(TensorData::new(vec![2], vec![0.0, 1.0]).unwrap());
    let c = tape.cosine_squared(e1, e2).unwrap();
    assert_eq!(tape.item(c), 0.0);

    // Opposite directions count as fully similar; squaring removes the sign.
    let neg = tape.leaf(TensorData::new(vec![2], vec![-1.0, 0.0]).unwrap());
    let c = tape.cosine_squared(e1, neg).unwrap();
    assert!((tape.item(c) - 1.0).abs() < 1e-12);
}

#[test]
fn cosine_squared_zero_vector_errors() {
    let mut tape = Tape::<f64>::new();
    let u = tape.leaf(TensorData::new(vec![2], vec![1.0, 0.0]).unwrap());
    let z = tape.leaf(TensorData::zeros(vec![2]));
    assert!(matches!(
        tape.cosine_squared(u, z),
        Err(Error::ZeroVector { .. })
    ));
}

#[test]
fn cosine_squared_symmetry_and_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let u = rand_data(&mut rng, &[5]);
        let v = rand_data(&mut rng, &[5]);
        let c: f64 = rng.gen_range(0.1..4.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let scaled = TensorData::new(vec![5], u.data().iter().map(|x| x * c).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let tu = tape.leaf(u);
        let tv = tape.leaf(v);
        let tsc = tape.leaf(scaled);
        let uv = tape.cosine_squared(tu, tv).unwrap();
        let vu = tape.cosine_squared(tv, tu).unwrap();
        let su = tape.cosine_squared(tsc, tv).unwrap();
        assert!((tape.item(uv) - tape.item(vu)).abs() < 1e-9);
        assert!((tape.item(uv) - tape.item(su)).abs() < 1e-9);
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(TensorData::zeros(vec![2, 3, 4]));
    let targets = vec![0, 1, 2, 3, 0, 1];
    let keep = vec![true; 6];
    let loss = tape.cross_entropy(logits, &targets, &keep).unwrap();
    assert!((tape.item(loss) - (4.0f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct_is_near_zero() {
    let mut tape = Tape::<f64>::new();
    let mut data = vec![0.0; 8];
    data[1] = 50.0; // row 0 target 1
    data[4 + 2] = 50.0; // row 1 target 2
    let logits = tape.leaf(TensorData::new(vec![2, 4], data).unwrap());
    let loss = tape.cross_entropy(logits, &[1, 2], &[true, true]).unwrap();
    assert!(tape.item(loss) < 1e-9);
}

#[test]
fn cross_entropy_matches_log_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let logits = rand_data(&mut rng, &[3, 5]);
    let targets = vec![4, 0, 2];
    let keep = vec![true, false, true];
    let mut expected = 0.0;
    let mut n = 0;
    for r in 0..3 {
        if !keep[r] {
            continue;
        }
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[targets[r]].exp() / denom).ln();
        n += 1;
    }
    expected /= n as f64;
    let mut tape = Tape::<f64>::new();
    let tl = tape.leaf(logits);
    let loss = tape.cross_entropy(tl, &targets, &keep).unwrap();
    assert!((tape.item(loss) - expected).abs() < 1e-8);
}

#[test]
fn cross_entropy_all_masked_errors() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(TensorData::zeros(vec![2, 3]));
    assert!(tape.cross_entropy(logits, &[0, 1], &[false, false]).is_err());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(TensorData::zeros(vec![3]));
    assert!(matches!(
        tape.backward(x),
        Err(Error::NonScalarLoss { numel: 3 })
    ));
}

#[test]
fn grad_check_quadratic() {
    let mut params = vec![param("theta", TensorData::scalar(3.0))];
    let report = grad_check(
        |tape, ps| {
            // theta^2 through a 1x1 matmul
            let t = tape.param(&ps[0]);
            let lhs = tape.reshape(t, &[1, 1])?;
            let rhs = tape.reshape(t, &[1, 1])?;
            let sq = tape.matmul(lhs, rhs)?;
            tape.reshape(sq, &[])
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
}

#[test]
fn grad_check_constant_function() {
    let mut params = vec![param("theta", TensorData::scalar(1.5))];
    let report = grad_check(
        |tape, ps| {
            let _ = tape.param(&ps[0]);
            Ok(tape.scalar(42.0))
        },
        &mut params,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.max_rel_err, 0.0);
}

/// Every op's tape gradient agrees with central differences on random
/// inputs in [-1, 1] at f64, eps = 1e-5, within 1e-4 relative error.
#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    type Case = (
        &'static str,
        Vec<Vec<usize>>,
        fn(&mut Tape<f64>, &[Param<f64>]) -> crate::Result<Tensor>,
    );
    let sum_all = |tape: &mut Tape<f64>, mut t: Tensor| -> crate::Result<Tensor> {
        while !tape.shape(t).is_empty() {
            t = tape.sum_axis(t, 0)?;
        }
        Ok(t)
    };
    let _ = &sum_all;

    let cases: Vec<Case> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            let y = tape.add(a, b)?;
            let y = tape.sum_axis(y, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("add_suffix", vec![vec![2, 2, 3], vec![3]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            let y = tape.add_suffix(a, b)?;
            let y = tape.sum_axis(y, 2)?;
            let y = tape.sum_axis(y, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("scale", vec![vec![4]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let y = tape.scale(a, -1.7);
            tape.sum_axis(y, 0)
        }),
        ("permute", vec![vec![2, 3, 4]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let p = tape.permute(a, &[2, 0, 1])?;
            let sq = tape.relu(p);
            let y = tape.sum_axis(sq, 2)?;
            let y = tape.sum_axis(y, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("concat_relu", vec![vec![2, 2], vec![2, 3]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            let c = tape.concat_last(&[a, b])?;
            let r = tape.relu(c);
            let y = tape.sum_axis(r, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("sigmoid", vec![vec![5]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let s = tape.sigmoid(a);
            tape.sum_axis(s, 0)
        }),
        ("softmax", vec![vec![2, 4]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let s = tape.softmax_masked(a, None)?;
            let sq = tape.sigmoid(s);
            let y = tape.sum_axis(sq, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("softmax_masked", vec![vec![2, 4]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let mask = Mask::new(vec![4], vec![true, false, true, true]).unwrap();
            let s = tape.softmax_masked(a, Some(&mask))?;
            let sq = tape.sigmoid(s);
            let y = tape.sum_axis(sq, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("layer_norm", vec![vec![2, 6], vec![6], vec![6]], |tape, ps| {
            let x = tape.param(&ps[0]);
            let g = tape.param(&ps[1]);
            let b = tape.param(&ps[2]);
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            let s = tape.sigmoid(y);
            let y = tape.sum_axis(s, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("lookup", vec![vec![5, 3]], |tape, ps| {
            let table = tape.param(&ps[0]);
            let e = tape.lookup(table, &[1, 4, 1, 0], &[2, 2])?;
            let s = tape.sigmoid(e);
            let y = tape.sum_axis(s, 2)?;
            let y = tape.sum_axis(y, 1)?;
            tape.sum_axis(y, 0)
        }),
        ("cross_entropy", vec![vec![3, 4]], |tape, ps| {
            let logits = tape.param(&ps[0]);
            tape.cross_entropy(logits, &[1, 3, 0], &[true, true, false])
        }),
        ("pair_distance", vec![vec![2, 2, 3], vec![2, 2, 3]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            tape.pair_distance(a, b, &[true, true, false, true])
        }),
        ("cosine_squared", vec![vec![4], vec![4]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            tape.cosine_squared(a, b)
        }),
        ("matmul_broadcast", vec![vec![2, 3, 4], vec![4, 2]], |tape, ps| {
            let a = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            let c = tape.matmul(a, b)?;
            let s = tape.sigmoid(c);
            let y = tape.sum_axis(s, 2)?;
            let y = tape.sum_axis(y, 1)?;
            tape.sum_axis(y, 0)
        }),
    ];

    for (name, shapes, f) in cases {
        let mut params: Vec<Param<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| param(&format!("p{i}"), rand_data(&mut rng, s)))
            .collect();
        let report = grad_check(f, &mut params, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "{name}: rel err {} at {}[{}] analytic {} numeric {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn forward_backward_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = rand_data(&mut rng, &[3, 4]);
        let b = rand_data(&mut rng, &[4, 2]);
        let pa = param("a", a);
        let pb = param("b", b);
        let mut tape = Tape::<f64>::new();
        let ta = tape.param(&pa);
        let tb = tape.param(&pb);
        let c = tape.matmul(ta, tb).unwrap();
        let s = tape.sigmoid(c);
        let y = tape.sum_axis(s, 1).unwrap();
        let y = tape.sum_axis(y, 0).unwrap();
        tape.backward(y).unwrap();
        (
            tape.item(y).to_bits(),
            tape.param_grad("a")
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn param_registered_twice_sums_gradients() {
    let p = param("w", TensorData::scalar(2.0));
    let mut tape = Tape::<f64>::new();
    let w1 = tape.param(&p);
    let w2 = tape.param(&p);
    let y = tape.add(w1, w2).unwrap(); // y = w + w, dy/dw = 2
    tape.backward(y).unwrap();
    assert_eq!(tape.param_grad("w").unwrap(), vec![2.0]);
}
