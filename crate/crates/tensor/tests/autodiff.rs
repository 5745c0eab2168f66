use memlab_tensor::{grad_check, grad_check_many, ParamId, Result, RowPatch, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // sum of uniforms is close enough to normal here
    let data = (0..n).map(|_| (0..4).map(|_| rng.gen::<f64>() - 0.5).sum::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(randn(&mut rng, &shape))?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::<f32>::new();
    let p = tape.param(ParamId(7), Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap()).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    let gp = g.get(ParamId(7)).unwrap();
    assert_eq!(gp.shape(), &[2, 3]);
    assert!(gp.data().iter().all(|&v| v == 1.0));
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let data = vec![0.25f32, -1.5, 2.0, 4.0];
    let mut tape = Tape::<f32>::new();
    let p = tape.param(ParamId(0), Tensor::from_vec(data.clone())).unwrap();
    let sq = tape.mul(p, p).unwrap();
    let s = tape.sum(sq).unwrap();
    let loss = tape.scale(s, 0.5).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(ParamId(0)).unwrap().data(), &data[..]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(ParamId(0), Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let _b = tape.param(ParamId(1), Tensor::from_vec(vec![3.0])).unwrap();
    let s = tape.sum(a).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.get(ParamId(1)).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(ParamId(0), Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let mut other = Tape::<f32>::new();
    let b = other.param(ParamId(0), Tensor::scalar(1.0)).unwrap();
    assert!(matches!(other.backward(a), Err(TensorError::NotOnTape)));
    assert!(matches!(tape.backward(a), Err(TensorError::NotScalar(_))));
    let _ = b;
}

#[test]
fn random_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[5, 4]);
    let w1 = randn(&mut rng, &[4, 6]);
    let b1 = randn(&mut rng, &[6]);
    let w2 = randn(&mut rng, &[6, 3]);
    let b2 = randn(&mut rng, &[3]);
    let f = |tape: &mut Tape<f64>, p: &[Var]| -> Result<Var> {
        let x = tape.constant(x.clone())?;
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_bias(h, p[1])?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, p[2])?;
        let o = tape.add_bias(o, p[3])?;
        let sq = tape.mul(o, o)?;
        tape.sum(sq)
    };
    let err = grad_check_many(f, &[w1, b1, w2, b2], 1e-3).unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0, 0.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-6 && d[1] < 1e-30 && d[2] < 1e-30);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let v: Vec<f32> = (0..7).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let x = tape.constant(Tensor::from_vec(v)).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let s: f32 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(tape.value(y).data().iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn softmax_along_middle_axis_normalizes_that_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = randn(&mut rng, &[2, 3, 4]);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t).unwrap();
    let y = tape.softmax(x, 1).unwrap();
    let d = tape.value(y).data();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|a| d[o * 12 + a * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let empty = tape.constant(Tensor::zeros([2, 0])).unwrap();
    assert!(matches!(tape.softmax(empty, 1), Err(TensorError::EmptyAxis { .. })));
    assert!(matches!(tape.softmax(x, 3), Err(TensorError::EmptyAxis { .. })));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let g = tape.constant(Tensor::full([4], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros([4])).unwrap();
    let x = tape.constant(Tensor::full([4], 3.5)).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g2 = tape.constant(Tensor::full([2], 1.0)).unwrap();
    let b2 = tape.constant(Tensor::zeros([2])).unwrap();
    let x2 = tape.constant(Tensor::from_vec(vec![1.0, -1.0])).unwrap();
    let y2 = tape.layer_norm(x2, g2, b2, 1e-5).unwrap();
    let d = tape.value(y2).data();
    assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-5);

    assert!(matches!(tape.layer_norm(x, g2, b, 1e-5), Err(TensorError::ShapeMismatch { .. })));
    let one = tape.constant(Tensor::from_vec(vec![1.0])).unwrap();
    let g1 = tape.constant(Tensor::full([1], 1.0)).unwrap();
    let b1 = tape.constant(Tensor::zeros([1])).unwrap();
    assert!(tape.layer_norm(one, g1, b1, 1e-5).is_err());
}

#[test]
fn grad_check_examples() {
    let x = Tensor::<f64>::new([3, 2], vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap();
    let sum_sq = |tape: &mut Tape<f64>, x: Var| {
        let sq = tape.mul(x, x)?;
        tape.sum(sq)
    };
    assert!(grad_check(sum_sq, &x, 1e-3).unwrap() < 1e-6);
    assert!(matches!(grad_check(sum_sq, &x, 0.0), Err(TensorError::Invalid(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(vec![1e30, 1.0])).unwrap();
    assert!(matches!(tape.scale(x, 1e10), Err(TensorError::NonFinite { .. })));
    assert!(matches!(tape.constant(Tensor::from_vec(vec![f32::NAN])), Err(TensorError::NonFinite { .. })));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f32>::new();
        let qkv: Vec<f32> = (0..2 * 5 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qkv = tape.constant(Tensor::new([10, 12], qkv).unwrap()).unwrap();
        let a = tape.causal_attention(qkv, 2, 5, 2).unwrap();
        tape.value(a).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn attention_prefix_rows_do_not_see_the_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let full: Vec<f32> = (0..6 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f32>::new();
    let long = tape.constant(Tensor::new([6, 12], full.clone()).unwrap()).unwrap();
    let short = tape.constant(Tensor::new([4, 12], full[..4 * 12].to_vec()).unwrap()).unwrap();
    let a = tape.causal_attention(long, 1, 6, 2).unwrap();
    let b = tape.causal_attention(short, 1, 4, 2).unwrap();
    assert_eq!(&tape.value(a).data()[..4 * 4], tape.value(b).data());
}

#[test]
fn patch_rows_blocks_gradient_into_replaced_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(ParamId(0), Tensor::new([3, 2], vec![1.0; 6]).unwrap()).unwrap();
    let p = tape.patch_rows(x, &[RowPatch { row: 1, value: vec![5.0, 6.0] }]).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 1.0, 5.0, 6.0, 1.0, 1.0]);
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(ParamId(0)).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
}

/// Finite-difference agreement for every differentiable op, 100 random trials each.
#[test]
fn every_op_matches_finite_differences() {
    type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, p| t.matmul(p[0], p[1])),
        ("matmul_bt", vec![vec![3, 4], vec![2, 4]], |t, p| t.matmul_bt(p[0], p[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, p| t.add(p[0], p[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, p| t.add_bias(p[0], p[1])),
        ("mul", vec![vec![5], vec![5]], |t, p| t.mul(p[0], p[1])),
        ("scale", vec![vec![4]], |t, p| t.scale(p[0], -1.7)),
        ("mul_cols", vec![vec![3, 4], vec![4]], |t, p| t.mul_cols(p[0], p[1])),
        ("gelu", vec![vec![6]], |t, p| t.gelu(p[0])),
        ("sigmoid", vec![vec![6]], |t, p| t.sigmoid(p[0])),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, p| t.layer_norm(p[0], p[1], p[2], 1e-5)),
        ("softmax0", vec![vec![3, 4]], |t, p| t.softmax(p[0], 0)),
        ("softmax1", vec![vec![3, 4]], |t, p| t.softmax(p[0], 1)),
        ("embedding", vec![vec![5, 3]], |t, p| t.embedding(p[0], &[4, 0, 4, 2])),
        ("attention", vec![vec![2 * 4, 3 * 6]], |t, p| t.causal_attention(p[0], 2, 4, 3)),
        ("cross_entropy", vec![vec![4, 5]], |t, p| t.cross_entropy(p[0], &[Some(1), None, Some(4), Some(0)])),
        ("mean", vec![vec![2, 3]], |t, p| t.mean(p[0])),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for (name, shapes, build) in cases {
        let mut worst = 0.0f64;
        for trial in 0..100u64 {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
            let seed = 1000 + trial;
            let f = move |tape: &mut Tape<f64>, p: &[Var]| -> Result<Var> {
                let y = build(tape, p)?;
                if tape.value(y).len() == 1 {
                    Ok(y)
                } else {
                    weighted_sum(tape, y, seed)
                }
            };
            worst = worst.max(grad_check_many(f, &inputs, 1e-5).unwrap());
        }
        assert!(worst < 1e-3, "{name}: worst relative error {worst}");
    }
}
