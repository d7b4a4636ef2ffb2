use maskdistill_tensor::gradcheck::{check_gradients, relative_error};
use maskdistill_tensor::{Array, Checkpoint, Result, Tape, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    arr(shape, &(0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>())
}

#[test]
fn matmul_small_by_hand() {
    let mut t = Tape::new();
    let a = t.constant(arr(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
    let b = t.constant(arr(&[3, 2], &[7., 8., 9., 10., 11., 12.])).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 2]);
    assert_eq!(t.value(c).data(), &[58., 64., 139., 154.]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(arr(&[2], &[0., 0.])).unwrap();
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn grad_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.leaf(arr(&[3], &[1., 2., 3.]), true).unwrap();
    let sq = t.mul(x, x).unwrap();
    let s = t.sum_all(sq).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn identity_root_has_unit_grad() {
    let mut t = Tape::new();
    let x = t.leaf(Array::scalar(3.5), true).unwrap();
    t.backward(x).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 1.0);
}

#[test]
fn exp_of_log_has_unit_grad() {
    let mut t = Tape::new();
    let x = t.leaf(arr(&[3], &[0.3, 1.0, 7.0]), true).unwrap();
    let l = t.log(x).unwrap();
    let e = t.exp(l).unwrap();
    let s = t.sum_all(e).unwrap();
    t.backward(s).unwrap();
    for g in t.grad(x).unwrap().data() {
        assert!((g - 1.0).abs() < 1e-12);
    }
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(arr(&[2], &[1., 2.]), true).unwrap();
    assert!(matches!(t.backward(x), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_and_bad_log_are_errors() {
    let mut t = Tape::new();
    let a = t.constant(arr(&[2], &[1., 2.])).unwrap();
    let b = t.constant(arr(&[3], &[1., 2., 3.])).unwrap();
    assert!(matches!(t.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    let m = t.constant(arr(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    assert!(t.matmul(m, b).is_err());
    let z = t.constant(arr(&[2], &[1., 0.])).unwrap();
    assert!(matches!(t.log(z), Err(TensorError::NonPositiveLog { index: 1, .. })));

    let mut loose = Tape::unchecked();
    let z = loose.constant(arr(&[2], &[1., 0.])).unwrap();
    let l = loose.log(z).unwrap();
    assert_eq!(loose.value(l).data()[1], f64::NEG_INFINITY);
}

#[test]
fn non_finite_leaf_rejected_in_checked_mode() {
    let mut t = Tape::new();
    assert!(matches!(
        t.leaf(arr(&[1], &[f64::NAN]), true),
        Err(TensorError::NonFinite { .. })
    ));
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut t = Tape::new();
    let x = t.leaf(arr(&[2], &[1.5, -2.0]), true).unwrap();
    let y = t.leaf(arr(&[2], &[3.0, 4.0]), true).unwrap();
    let xs = t.stop_gradient(x).unwrap();
    assert_eq!(t.value(xs), t.value(x));
    let p = t.mul(xs, y).unwrap();
    let s = t.sum_all(p).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(y).unwrap().data(), &[1.5, -2.0]);
    // x is reachable only through the stopped path.
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    assert!(t.grad(xs).is_none());
}

fn mlp3(t: &mut Tape, v: &[Var]) -> Result<Var> {
    let (x, w1, b1, g, be, w2, w3) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let h = t.matmul(x, w1)?;
    let h = t.add_bias(h, b1)?;
    let h = t.layer_norm(h, g, be)?;
    let h = t.gelu(h)?;
    let h = t.matmul(h, w2)?;
    let h = t.exp(h)?;
    let h = t.matmul(h, w3)?;
    let h = t.log_softmax(h)?;
    let h = t.sum_axis(h, 0)?;
    let sq = t.mul(h, h)?;
    t.sum_all(sq)
}

#[test]
fn three_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shapes: [&[usize]; 7] = [&[4, 5], &[5, 6], &[6], &[6], &[6], &[6, 3], &[3, 4]];
    let inputs: Vec<Array> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let report = check_gradients(&inputs, 1e-5, mlp3).unwrap();
    assert!(report.max_rel_error < 1e-6, "rel error {}", report.max_rel_error);
}

#[test]
fn attention_path_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng)];
    let report = check_gradients(&inputs, 1e-5, |t, v| {
        let s = t.batch_matmul(v[0], v[1], true)?;
        let s = t.scale(s, 0.5)?;
        let a = t.softmax(s)?;
        let o = t.batch_matmul(a, v[2], false)?;
        let o = t.permute(o, &[1, 0, 2])?;
        let o = t.reshape(o, &[3, 8])?;
        let tab = t.gather_rows(o, &[2, 0, 2])?;
        let both = t.concat_rows(tab, o)?;
        let pick = t.gather_elements(both, &[0, 5, 7, 17, 30, 47])?;
        let sq = t.mul(pick, pick)?;
        t.sum_all(sq)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "rel error {}", report.max_rel_error);
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shapes: [&[usize]; 7] = [&[4, 5], &[5, 6], &[6], &[6], &[6], &[6, 3], &[3, 4]];
    let inputs: Vec<Array> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let run = || {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone(), true).unwrap()).collect();
        let r = mlp3(&mut t, &vs).unwrap();
        t.backward(r).unwrap();
        vs.iter().map(|&v| t.grad(v).unwrap().clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut t = Tape::new();
    let x = t.leaf(arr(&[2], &[1.0, 2.0]), true).unwrap();
    let s = t.sum_all(x).unwrap();
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn checkpoint_round_trip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = Checkpoint::new(serde_json::json!({"arch": {"d": 4}}));
    ck.push("w", arr(&[2, 2], &[1.0, -0.5, 1e-300, 3.25]));
    ck.push("s", Array::scalar(0.1));
    ck.write(dir.path()).unwrap();
    let back = Checkpoint::read(dir.path()).unwrap();
    assert_eq!(back, ck);

    let manifest_path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    std::fs::write(&manifest_path, text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
    match Checkpoint::read(dir.path()) {
        Err(TensorError::CheckpointVersion { found: 7, expected: 1 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

/// One differentiable op applied to random inputs, reduced to a scalar
/// through a fixed random projection so every output element matters.
fn op_case(op: usize, rng: &mut ChaCha8Rng) -> (Vec<Array>, usize) {
    let ins = match op {
        0..=2 => vec![random(&[3, 4], rng), random(&[3, 4], rng)],
        3 => vec![random(&[3, 4], rng), random(&[4, 2], rng)],
        4 => vec![random(&[2, 3, 4], rng), random(&[2, 4, 3], rng)],
        5 => vec![random(&[3, 4], rng), random(&[4], rng), random(&[4], rng)],
        _ => vec![random(&[3, 4], rng)],
    };
    (ins, op)
}

fn apply_op(t: &mut Tape, op: usize, v: &[Var]) -> Result<Var> {
    let y = match op {
        0 => t.add(v[0], v[1])?,
        1 => t.mul(v[0], v[1])?,
        2 => t.sub(v[0], v[1])?,
        3 => t.matmul(v[0], v[1])?,
        4 => t.batch_matmul(v[0], v[1], false)?,
        5 => t.layer_norm(v[0], v[1], v[2])?,
        6 => t.exp(v[0])?,
        7 => {
            let e = t.exp(v[0])?;
            t.log(e)?
        }
        8 => t.gelu(v[0])?,
        9 => t.softmax(v[0])?,
        10 => t.log_softmax(v[0])?,
        11 => t.sum_axis(v[0], 1)?,
        12 => t.gather_rows(v[0], &[1, 1, 0])?,
        _ => t.add_bias(v[0], v[0]).or_else(|_| t.scale(v[0], -0.7))?,
    };
    let n = t.value(y).numel();
    let proj: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let shape = t.value(y).shape().to_vec();
    let p = t.constant(Array::new(shape, proj)?)?;
    let yp = t.mul(y, p)?;
    t.sum_all(yp)
}

#[test]
fn every_op_matches_finite_differences_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for op in 0..14 {
        for trial in 0..100 {
            let (inputs, op) = op_case(op, &mut rng);
            let report = check_gradients(&inputs, 1e-5, |t, v| apply_op(t, op, v)).unwrap();
            assert!(
                report.max_rel_error < 1e-6,
                "op {op} trial {trial}: rel error {}",
                report.max_rel_error
            );
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(arr(&[3, 4], &data)).unwrap();
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(data in proptest::collection::vec(-5.0f64..5.0, 24)) {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 3, 4], &data)).unwrap();
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        prop_assert_eq!(t.value(p).shape(), &[4, 2, 3]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(t.value(back).data(), &data[..]);
    }
}

#[test]
fn relative_error_uses_oracle_scale() {
    assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0], 1e-8), 0.0);
    assert!((relative_error(&[1.1, 2.0], &[1.0, 2.0], 1e-8) - 0.05).abs() < 1e-12);
}
