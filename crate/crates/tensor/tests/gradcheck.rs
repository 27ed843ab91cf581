//! Finite-difference checks for every differentiable op, run in 64-bit.

use proptest::prelude::*;
use rand::Rng;
use tagmt_tensor::rng::rng_fork;
use tagmt_tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_fork(seed, 0);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Norm-wise relative error between analytic and central-difference
/// gradients, worst case over parameters.
fn grad_rel_error<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss, store).unwrap();

    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut t = Tape::new();
        let l = f(&mut t, s);
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let mut numeric = Vec::new();
        for i in 0..store.get(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += H;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= H;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * H));
        }
        let analytic = grads.get(id).data();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = norm(analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Contracts `v` with a fixed random tensor so every output element
/// contributes a distinct weight to the scalar loss.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let w = random_tensor(tape.shape(v), seed);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn store_of(shapes: &[&[usize]]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random_tensor(s, 100 + i as u64)))
        .collect();
    (store, ids)
}

fn assert_grad_ok<F>(name: &str, store: &ParamStore<f64>, f: F)
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let err = grad_rel_error(store, f);
    assert!(err < OP_TOL, "{name}: relative error {err:e}");
}

#[test]
fn grad_add_broadcast() {
    let (store, ids) = store_of(&[&[2, 3, 4], &[4]]);
    assert_grad_ok("add", &store, |t, s| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let y = t.add(a, b).unwrap();
        weighted_sum(t, y, 1)
    });
}

#[test]
fn grad_mul_scale() {
    let (store, ids) = store_of(&[&[3, 4], &[3, 4]]);
    assert_grad_ok("mul/scale", &store, |t, s| {
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let y = t.mul(a, b).unwrap();
        let y = t.scale(y, -1.7);
        weighted_sum(t, y, 2)
    });
}

#[test]
fn grad_matmul_all_layouts() {
    for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
        // batched with shared right operand
        let a_shape: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let b_shape: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        let (store, ids) = store_of(&[a_shape, b_shape]);
        assert_grad_ok("matmul shared", &store, |t, s| {
            let a = t.param(s, ids[0]);
            let b = t.param(s, ids[1]);
            let y = t.matmul_ex(a, b, ta, tb).unwrap();
            weighted_sum(t, y, 3)
        });
        // fully batched
        let b_shape: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        let (store, ids) = store_of(&[a_shape, b_shape]);
        assert_grad_ok("matmul batched", &store, |t, s| {
            let a = t.param(s, ids[0]);
            let b = t.param(s, ids[1]);
            let y = t.matmul_ex(a, b, ta, tb).unwrap();
            weighted_sum(t, y, 4)
        });
    }
}

#[test]
fn grad_transpose_permute_reshape() {
    let (store, ids) = store_of(&[&[2, 3, 4]]);
    assert_grad_ok("permute", &store, |t, s| {
        let a = t.param(s, ids[0]);
        let y = t.permute(a, &[2, 0, 1]).unwrap();
        let y = t.transpose(y).unwrap();
        let y = t.reshape(y, &[4, 6]).unwrap();
        weighted_sum(t, y, 5)
    });
}

#[test]
fn grad_embedding_with_repeats() {
    let (store, ids) = store_of(&[&[5, 3]]);
    assert_grad_ok("embedding", &store, |t, s| {
        let table = t.param(s, ids[0]);
        let y = t.embedding(table, &[0, 4, 4, 2, 0, 1], &[2, 3]).unwrap();
        weighted_sum(t, y, 6)
    });
}

#[test]
fn grad_softmax_every_axis() {
    for axis in 0..3 {
        let (store, ids) = store_of(&[&[2, 3, 4]]);
        assert_grad_ok("softmax", &store, |t, s| {
            let a = t.param(s, ids[0]);
            let y = t.softmax(a, axis).unwrap();
            weighted_sum(t, y, 7)
        });
    }
}

#[test]
fn grad_layer_norm() {
    let (store, ids) = store_of(&[&[3, 6], &[6], &[6]]);
    assert_grad_ok("layer_norm", &store, |t, s| {
        let x = t.param(s, ids[0]);
        let g = t.param(s, ids[1]);
        let b = t.param(s, ids[2]);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        weighted_sum(t, y, 8)
    });
}

#[test]
fn grad_activations() {
    let (store, ids) = store_of(&[&[4, 5]]);
    assert_grad_ok("gelu", &store, |t, s| {
        let a = t.param(s, ids[0]);
        let y = t.gelu(a);
        weighted_sum(t, y, 9)
    });
    // keep inputs away from the relu kink
    let mut store = ParamStore::new();
    let id = store.add(
        "x",
        Tensor::from_f64(&[4], &[-0.8, -0.2, 0.3, 1.1]).unwrap(),
    );
    assert_grad_ok("relu", &store, |t, s| {
        let a = t.param(s, id);
        let y = t.relu(a);
        weighted_sum(t, y, 10)
    });
}

#[test]
fn grad_dropout_fixed_mask() {
    let (store, ids) = store_of(&[&[4, 5]]);
    assert_grad_ok("dropout", &store, |t, s| {
        let a = t.param(s, ids[0]);
        let mut rng = rng_fork(5, 5);
        let y = t.dropout(a, 0.3, &mut rng).unwrap();
        weighted_sum(t, y, 11)
    });
}

#[test]
fn grad_concat() {
    let (store, ids) = store_of(&[&[2, 3, 2], &[2, 1, 2], &[2, 2, 2]]);
    assert_grad_ok("concat", &store, |t, s| {
        let parts: Vec<Var> = ids.iter().map(|&i| t.param(s, i)).collect();
        let y = t.concat(&parts, 1).unwrap();
        weighted_sum(t, y, 12)
    });
}

#[test]
fn grad_cross_entropy_with_pad_and_smoothing() {
    let (store, ids) = store_of(&[&[2, 3, 5]]);
    for smoothing in [0.0, 0.1] {
        assert_grad_ok("cross_entropy", &store, |t, s| {
            let logits = t.param(s, ids[0]);
            t.cross_entropy_smoothed(logits, &[1, 0, 4, 2, 0, 3], 0, smoothing)
                .unwrap()
        });
    }
}

#[test]
fn grad_sum_mean() {
    let (store, ids) = store_of(&[&[3, 3]]);
    assert_grad_ok("mean", &store, |t, s| {
        let a = t.param(s, ids[0]);
        let sq = t.mul(a, a).unwrap();
        let m = t.mean(sq);
        let total = t.sum(a);
        let both = t.add(m, total).unwrap();
        t.scale(both, 0.5)
    });
}

#[test]
fn grad_two_layer_mlp() {
    let (store, ids) = store_of(&[&[4, 6], &[6, 8], &[8], &[8, 3], &[3]]);
    assert_grad_ok("mlp", &store, |t, s| {
        let x = t.param(s, ids[0]);
        let w1 = t.param(s, ids[1]);
        let b1 = t.param(s, ids[2]);
        let w2 = t.param(s, ids[3]);
        let b2 = t.param(s, ids[4]);
        let h = t.matmul(x, w1).unwrap();
        let h = t.add(h, b1).unwrap();
        let h = t.gelu(h);
        let o = t.matmul(h, w2).unwrap();
        let o = t.add(o, b2).unwrap();
        t.cross_entropy(o, &[0, 2, 1, 1], usize::MAX).unwrap()
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn grad_random_attention_shapes(b in 1usize..3, tq in 1usize..4, tk in 1usize..4, d in 1usize..4) {
        let (store, ids) = store_of(&[&[b, tq, d], &[b, tk, d], &[b, tk, d]]);
        let err = grad_rel_error(&store, |t, s| {
            let q = t.param(s, ids[0]);
            let k = t.param(s, ids[1]);
            let v = t.param(s, ids[2]);
            let scores = t.matmul_t(q, k).unwrap();
            let p = t.softmax(scores, 2).unwrap();
            let o = t.matmul(p, v).unwrap();
            weighted_sum(t, o, 13)
        });
        prop_assert!(err < OP_TOL, "relative error {err:e}");
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut t = Tape::<f32>::new();
    let x = random_tensor(&[7, 11], 3);
    let x = Tensor::<f32>::from_f64(&[7, 11], &x.to_f64_vec()).unwrap();
    let x = t.constant(x.clone());
    let x = t.scale(x, 20.0);
    let y = t.softmax(x, 1).unwrap();
    for row in t.value(y).data().chunks(11) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
    }
}

#[test]
fn identity_matmul() {
    let mut t = Tape::<f64>::new();
    let eye = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let a = random_tensor(&[3, 4], 9);
    let i = t.constant(eye);
    let av = t.constant(a.clone());
    let y = t.matmul(i, av).unwrap();
    assert_eq!(t.value(y), &a);
}

#[test]
fn cross_entropy_of_confident_logits() {
    let mut t = Tape::<f64>::new();
    let logits = t.constant(Tensor::from_f64(&[1, 2], &[10.0, -10.0]).unwrap());
    let loss = t.cross_entropy(logits, &[0], usize::MAX).unwrap();
    // -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
    let expected = (-20f64).exp().ln_1p();
    let got = t.value(loss).item();
    assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    assert!((got - 2.061_153_6e-9).abs() < 1e-15);
}

#[test]
fn square_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::from_f64(&[1], &[3.0]).unwrap());
    let mut t = Tape::<f64>::new();
    let x = t.param(&store, id);
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    let g = t.backward(loss, &store).unwrap();
    assert_eq!(g.get(id).data(), &[6.0]);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let (store, ids) = store_of(&[&[2, 2], &[3]]);
    let mut t = Tape::<f64>::new();
    let _unused = t.param(&store, ids[0]);
    let c = t.constant(Tensor::scalar(4.0));
    let g = t.backward(c, &store).unwrap();
    for (_, grad) in g.iter() {
        assert!(grad.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn all_pad_cross_entropy_is_zero_with_zero_grad() {
    let (store, ids) = store_of(&[&[3, 4]]);
    let mut t = Tape::<f64>::new();
    let logits = t.param(&store, ids[0]);
    let loss = t.cross_entropy(logits, &[0, 0, 0], 0).unwrap();
    assert_eq!(t.value(loss).item(), 0.0);
    let g = t.backward(loss, &store).unwrap();
    assert!(g.get(ids[0]).data().iter().all(|&x| x == 0.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let (store, ids) = store_of(&[&[2, 2]]);
    let mut t = Tape::<f64>::new();
    let x = t.param(&store, ids[0]);
    assert!(matches!(
        t.backward(x, &store),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.starts_with("matmul") && err.contains("[2, 3]"), "{err}");
    let c = t.constant(Tensor::zeros(&[4]));
    assert!(t.add(a, c).unwrap_err().to_string().starts_with("add"));
    assert!(t.mul(a, c).unwrap_err().to_string().starts_with("mul"));
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut t = Tape::<f64>::new();
    let x = random_tensor(&[5, 16], 21);
    let x = t.constant(x);
    let x = t.scale(x, 7.0);
    let g = t.constant(Tensor::full(&[16], 1.0));
    let b = t.constant(Tensor::zeros(&[16]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    for row in t.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn dropout_zero_is_identity_and_deterministic_otherwise() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(random_tensor(&[100], 1));
    let mut rng = rng_fork(1, 1);
    assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
    let mut r1 = rng_fork(3, 4);
    let mut r2 = rng_fork(3, 4);
    let a = t.dropout(x, 0.5, &mut r1).unwrap();
    let b = t.dropout(x, 0.5, &mut r2).unwrap();
    assert_eq!(t.value(a), t.value(b));
}

#[test]
fn tied_parameter_accumulates_both_uses() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_f64(&[1], &[2.0]).unwrap());
    let mut t = Tape::<f64>::new();
    let a = t.param(&store, id);
    let b = t.param(&store, id);
    assert_eq!(a, b);
    let y = t.mul(a, b).unwrap();
    let y = t.add(y, a).unwrap();
    let loss = t.sum(y);
    let g = t.backward(loss, &store).unwrap();
    assert_eq!(g.get(id).data(), &[5.0]); // d(w^2 + w)/dw at 2
}

#[test]
fn inference_tape_has_no_gradients() {
    let (store, ids) = store_of(&[&[2, 2]]);
    let mut t = Tape::<f64>::inference();
    let x = t.param(&store, ids[0]);
    let loss = t.sum(x);
    let g = t.backward(loss, &store).unwrap();
    assert!(g.get(ids[0]).data().iter().all(|&v| v == 0.0));
}
