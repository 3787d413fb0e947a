//! Forward examples and finite-difference checks for every tape op.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tcan::gradcheck::{grad_check, GradCheckConfig};
use tcan::{Error, ParamId, ParamStore, Tape, Tensor, Var};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn param(store: &mut ParamStore, name: &str, dims: &[usize], data: Vec<f32>) -> ParamId {
    store.insert(name, Tensor::from_vec(dims, data).unwrap()).unwrap()
}

/// Weighted sum of `y` with fixed random weights, so every output entry
/// carries a distinct upstream gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> tcan::Result<Var> {
    let dims = tape.dims(y).to_vec();
    let n = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(&dims, randn(&mut rng, n))?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn fd_cfg() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-3,
        tol: 1e-3,
        max_coords: Some(100),
        seed: 11,
    }
}

fn assert_fd(report: tcan::gradcheck::GradCheckReport) {
    assert!(
        report.passed(),
        "finite-difference mismatch: {:?}",
        report.worst_offenders(3)
    );
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e:?}"),
    }
    assert!(err_msg_contains(tape.matmul(a, b), "[2, 3]"));
}

fn err_msg_contains<T: std::fmt::Debug>(r: tcan::Result<T>, s: &str) -> bool {
    r.unwrap_err().to_string().contains(s)
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = param(&mut store, "a", &[4, 3], randn(&mut rng, 12));
    let b = param(&mut store, "b", &[3, 5], randn(&mut rng, 15));
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let c = t.matmul(av, bv)?;
        probe(t, c, 2)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn matmul_transpose_b_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let a = param(&mut store, "a", &[4, 3], randn(&mut rng, 12));
    let b = param(&mut store, "b", &[5, 3], randn(&mut rng, 15));
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let c = t.matmul_transpose_b(av, bv)?;
        probe(t, c, 4)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&[2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let v = tape.value(y);
    for &p in &v[..3] {
        assert!((p - 1.0 / 3.0).abs() < 1e-7);
    }
    assert_eq!(v[3], 1.0);
    assert_eq!(v[4], 0.0);
    assert!(v.iter().all(|p| p.is_finite()));
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[3, 4], randn(&mut rng, 12));
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let xv = t.param(s, x);
        let y = t.softmax_rows(xv)?;
        probe(t, y, 6)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn sigmoid_examples() {
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[3], vec![0.0, -100.0, 100.0]);
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let y = tape.sigmoid(xv);
    assert_eq!(tape.value(y), &[0.5, 0.0, 1.0]);
    assert!(tape.value(y).iter().all(|v| !v.is_nan()));
    let s = tape.sum(y);
    tape.backward_into(s, &mut store).unwrap();
    assert_eq!(store.get(x).grad().unwrap()[0], 0.25);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&[2, 2], vec![5.0, 5.0, 1.0, 3.0]).unwrap();
    let g = tape.constant(&[2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    let v = tape.value(y);
    assert_eq!(&v[..2], &[0.0, 0.0]);
    // variance 1, so ε shifts the result by ~5e-6
    assert!((v[2] + 1.0).abs() < 1e-5 && (v[3] - 1.0).abs() < 1e-5, "{v:?}");
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[5, 8], randn(&mut rng, 40));
    let g = param(&mut store, "gain", &[8], randn(&mut rng, 8));
    let b = param(&mut store, "bias", &[8], randn(&mut rng, 8));
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
        let y = t.layer_norm(xv, gv, bv)?;
        probe(t, y, 8)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn conv1d_identity_and_box_sum() {
    let mut tape = Tape::new();
    let x = tape.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let k = tape.constant(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = tape.conv1d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let ones = tape.constant(&[4, 1], vec![1.0; 4]).unwrap();
    let k3 = tape.constant(&[3, 1, 1], vec![1.0; 3]).unwrap();
    let b1 = tape.constant(&[1], vec![0.0]).unwrap();
    let y = tape.conv1d(ones, k3, b1, 1, 1).unwrap();
    assert_eq!(tape.value(y), &[2.0, 3.0, 3.0, 2.0]);
}

#[test]
fn conv1d_rejects_short_sequences() {
    let mut tape = Tape::new();
    let x = tape.constant(&[2, 1], vec![1.0; 2]).unwrap();
    let k = tape.constant(&[5, 1, 1], vec![1.0; 5]).unwrap();
    let b = tape.constant(&[1], vec![0.0]).unwrap();
    assert!(matches!(
        tape.conv1d(x, k, b, 1, 0),
        Err(Error::SequenceTooShort { .. })
    ));
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[6, 3], randn(&mut rng, 18));
    let k = param(&mut store, "kernel", &[3, 3, 5], randn(&mut rng, 45));
    let b = param(&mut store, "bias", &[5], randn(&mut rng, 5));
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let (xv, kv, bv) = (t.param(s, x), t.param(s, k), t.param(s, b));
        let y = t.conv1d(xv, kv, bv, 1, 1)?;
        assert_eq!(t.dims(y), &[6, 5]);
        probe(t, y, 10)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn strided_conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[7, 2], randn(&mut rng, 14));
    let k = param(&mut store, "kernel", &[3, 2, 3], randn(&mut rng, 18));
    let b = param(&mut store, "bias", &[3], randn(&mut rng, 3));
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let (xv, kv, bv) = (t.param(s, x), t.param(s, k), t.param(s, b));
        let y = t.conv1d(xv, kv, bv, 2, 1)?;
        assert_eq!(t.dims(y), &[4, 3]);
        probe(t, y, 20)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn concat_examples_and_gradient_split() {
    let mut store = ParamStore::new();
    let a = param(&mut store, "a", &[2, 1], vec![1.0, 1.0]);
    let b = param(&mut store, "b", &[2, 1], vec![0.0, 0.0]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(&store, a), tape.param(&store, b));
    let c = tape.concat_cols(av, bv).unwrap();
    assert_eq!(tape.value(c), &[1.0, 0.0, 1.0, 0.0]);

    let empty = tape.constant(&[2, 0], vec![]).unwrap();
    let e = tape.concat_cols(empty, bv).unwrap();
    assert_eq!(tape.value(e), tape.value(bv));

    let w = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = tape.mul(c, w).unwrap();
    let s = tape.sum(p);
    tape.backward_into(s, &mut store).unwrap();
    assert_eq!(store.get(a).grad().unwrap(), &[1.0, 3.0]);
    assert_eq!(store.get(b).grad().unwrap(), &[2.0, 4.0]);

    let short = tape.constant(&[3, 1], vec![0.0; 3]).unwrap();
    assert!(matches!(tape.concat_cols(av, short), Err(Error::Dimension { .. })));
}

#[test]
fn remaining_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[4, 6], randn(&mut rng, 24));
    let y = param(&mut store, "y", &[4, 6], randn(&mut rng, 24));
    let r = param(&mut store, "row", &[6], randn(&mut rng, 6));
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let (xv, yv, rv) = (t.param(s, x), t.param(s, y), t.param(s, r));
        let a = t.add_row(xv, rv)?;
        let b = t.sub(a, yv)?;
        let c = t.mul(b, xv)?;
        let d = t.slice_cols(c, 1, 4)?;
        let e = t.concat_cols(d, yv)?;
        let f = t.scale(e, 0.7);
        let g = t.add_scalar(f, 0.3);
        let sq = t.square(g);
        let m = t.mean_rows(sq)?;
        let l = t.last_row(g)?;
        let ml = t.add(m, l)?;
        probe(t, ml, 14)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn relu_and_abs_gradients_away_from_kinks() {
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[1, 6], vec![-2.0, -0.5, 0.4, 1.3, -0.9, 2.2]);
    let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
        let xv = t.param(s, x);
        let r = t.relu(xv);
        let a = t.abs(xv);
        let sum = t.add(r, a)?;
        probe(t, sum, 15)
    })
    .unwrap();
    assert_fd(report);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(&[2]).unwrap().with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_sum_and_half_square() {
    let xt = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap().with_requires_grad(true);
    let mut tape = Tape::new();
    let x = tape.leaf(&xt);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

    let mut tape = Tape::new();
    let x = tape.leaf(&xt);
    let xx = tape.mul(x, x).unwrap();
    let s = tape.sum(xx);
    let half = tape.scale(s, 0.5);
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(x).unwrap(), xt.data());
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let w = param(&mut store, "w", &[3, 4], randn(&mut rng, 12));
    let mut tape = Tape::new();
    let x = tape.constant(&[2, 3], randn(&mut rng, 6)).unwrap();
    let wv = tape.param(&store, w);
    let y = tape.matmul(x, wv).unwrap();
    let z = tape.sigmoid(y);
    let loss = tape.sum(z);
    tape.backward_into(loss, &mut store).unwrap();
    let once = store.get(w).grad().unwrap().to_vec();
    tape.backward_into(loss, &mut store).unwrap();
    let twice = store.get(w).grad().unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    store.zero_grads();
    assert!(store.get(w).grad().unwrap().iter().all(|g| *g == 0.0));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    let x = tape.leaf(&Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().with_requires_grad(true));
    let p = tape.mul(c, x).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1..=rows, 1..=cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-4.0f32..4.0, r * c).prop_map(move |v| (r, c, v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_commute_with_column_permutations(
        (r, c, data) in matrix(8, 16),
        perm_seed in any::<u64>(),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(&[r, c], data.clone()).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let yv = tape.value(y).to_vec();
        for row in yv.chunks(c) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
        let mut perm: Vec<usize> = (0..c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f32> = (0..r).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| data[i * c + j]).collect();
        let xp = tape.constant(&[r, c], permuted).unwrap();
        let yp = tape.softmax_rows(xp).unwrap();
        for i in 0..r {
            for (jj, &j) in perm.iter().enumerate() {
                prop_assert!((tape.value(yp)[i * c + jj] - yv[i * c + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_ignores_row_shifts((r, c, data) in matrix(8, 16), shift in -10.0f32..10.0) {
        prop_assume!(c >= 2);
        let mut tape = Tape::new();
        let g = tape.constant(&[c], vec![1.0; c]).unwrap();
        let b = tape.constant(&[c], vec![0.0; c]).unwrap();
        let x = tape.constant(&[r, c], data.clone()).unwrap();
        let xs = tape.constant(&[r, c], data.iter().map(|v| v + shift).collect()).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        let ys = tape.layer_norm(xs, g, b).unwrap();
        // f32 loses ~|shift|·ulp in the mean, amplified by 1/σ
        for (a, bb) in tape.value(y).iter().zip(tape.value(ys)) {
            prop_assert!((a - bb).abs() < 1e-5 * (1.0 + shift.abs()) * 10.0, "{a} vs {bb}");
        }
    }

    #[test]
    fn kernels_are_deterministic((r, c, data) in matrix(8, 16)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&[r, c], data.clone()).unwrap();
            let w = tape.constant(&[c, r], data.iter().rev().copied().collect()).unwrap();
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax_rows(y).unwrap();
            tape.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn random_shapes_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..8u64 {
        let r = rng.random_range(1..=8);
        let c = rng.random_range(2..=16);
        let p = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", &[r, c], randn(&mut rng, r * c));
        let w = param(&mut store, "w", &[c, p], randn(&mut rng, c * p));
        let g = param(&mut store, "g", &[c], randn(&mut rng, c));
        let b = param(&mut store, "b", &[c], randn(&mut rng, c));
        let report = grad_check(&mut store, &[], &fd_cfg(), |t, s| {
            let (xv, wv, gv, bv) = (t.param(s, x), t.param(s, w), t.param(s, g), t.param(s, b));
            let n = t.layer_norm(xv, gv, bv)?;
            let m = t.matmul(n, wv)?;
            let sm = t.softmax_rows(m)?;
            let sg = t.sigmoid(sm);
            probe(t, sg, trial)
        })
        .unwrap();
        assert_fd(report);
    }
}
