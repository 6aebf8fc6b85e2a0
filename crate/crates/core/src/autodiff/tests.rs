use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

type LossFn<E> = dyn for<'t> Fn(&'t Tape<E>, &[Var<'t, E>]) -> Var<'t, E>;

fn random_tensor<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::of(rng.random_range(-scale..scale)))
}

/// Norm-wise relative error between the tape gradient and central finite
/// differences, worst case over all inputs.
fn grad_check<E: Element>(inputs: &[Tensor<E>], h: f64, f: &LossFn<E>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |probe: &[Tensor<E>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item().as_f64()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&vars[i])
            .map(|g| g.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut num = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut probe = inputs.to_vec();
            let x = input.data()[j].as_f64();
            probe[i].data_mut()[j] = E::of(x + h);
            let fp = eval(&probe);
            probe[i].data_mut()[j] = E::of(x - h);
            let fm = eval(&probe);
            num.push((fp - fm) / (2.0 * h));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    worst
}

/// Weighted sum that makes every output element matter differently.
fn probe_sum<'t, E: Element>(tape: &'t Tape<E>, y: Var<'t, E>, seed: u64) -> Var<'t, E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &y.shape(), 1.0);
    y.mul(tape.constant(w)).unwrap().sum()
}

fn check_op(name: &str, shapes: &[&[usize]], scale: f64, f: &LossFn<f64>) {
    for point in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| random_tensor(&mut rng, s, scale))
            .collect();
        let err = grad_check(&inputs, 1e-6, f);
        assert!(
            err < 1e-6,
            "{name}: f64 relative error {err:e} at point {point}"
        );
    }
}

fn check_op_f32(name: &str, shapes: &[&[usize]], scale: f64, f: &LossFn<f32>) {
    for point in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + point);
        let inputs: Vec<Tensor<f32>> = shapes
            .iter()
            .map(|s| random_tensor(&mut rng, s, scale))
            .collect();
        let err = grad_check(&inputs, 1e-2, f);
        assert!(
            err < 1e-3,
            "{name}: f32 relative error {err:e} at point {point}"
        );
    }
}

#[test]
fn matmul_identity_and_hand_values() {
    let tape = Tape::<f64>::new();
    let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 7.0]).unwrap();
    let out = eye.matmul(tape.constant(m.clone())).unwrap();
    assert_eq!(*out.value(), m);

    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
    let out = a.matmul(b).unwrap();
    assert_eq!(out.shape(), vec![2, 1]);
    assert_eq!(out.value().data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    match &err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, &[2, 3]);
            assert_eq!(rhs, &[2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn gradient_of_every_op_matches_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], 1.0, &|t, v| {
        let y = v[0].matmul(v[1]).unwrap();
        probe_sum(t, y, 1)
    });
    check_op("sum(matmul)", &[&[2, 3], &[3, 2]], 1.0, &|_, v| {
        v[0].matmul(v[1]).unwrap().sum()
    });
    check_op("bmm", &[&[2, 3, 4], &[2, 4, 5]], 1.0, &|t, v| {
        let y = v[0].bmm(v[1], false).unwrap();
        probe_sum(t, y, 2)
    });
    check_op("bmm_nt", &[&[2, 3, 4], &[2, 5, 4]], 1.0, &|t, v| {
        let y = v[0].bmm(v[1], true).unwrap();
        probe_sum(t, y, 3)
    });
    check_op("add", &[&[3, 2], &[3, 2]], 1.0, &|t, v| {
        probe_sum(t, v[0].add(v[1]).unwrap(), 4)
    });
    check_op("sub", &[&[3, 2], &[3, 2]], 1.0, &|t, v| {
        probe_sum(t, v[0].sub(v[1]).unwrap(), 5)
    });
    check_op("mul", &[&[3, 2], &[3, 2]], 1.0, &|t, v| {
        probe_sum(t, v[0].mul(v[1]).unwrap(), 6)
    });
    check_op("div", &[&[3, 2], &[3, 2]], 1.0, &|t, v| {
        let d = v[1].square().unwrap().add_scalar(0.5);
        probe_sum(t, v[0].div(d).unwrap(), 7)
    });
    check_op("scale", &[&[4]], 1.0, &|t, v| {
        probe_sum(t, v[0].scale(-2.5), 8)
    });
    check_op("add_scalar", &[&[4]], 1.0, &|t, v| {
        probe_sum(t, v[0].add_scalar(3.0), 9)
    });
    check_op("reshape", &[&[2, 6]], 1.0, &|t, v| {
        probe_sum(t, v[0].reshape(&[3, 4]).unwrap(), 10)
    });
    check_op("transpose", &[&[2, 5]], 1.0, &|t, v| {
        probe_sum(t, v[0].transpose().unwrap(), 11)
    });
    check_op("permute", &[&[2, 3, 4, 2]], 1.0, &|t, v| {
        probe_sum(t, v[0].permute(&[2, 0, 3, 1]).unwrap(), 12)
    });
    check_op("sum_axis", &[&[2, 3, 4]], 1.0, &|t, v| {
        probe_sum(t, v[0].sum_axis(1).unwrap(), 13)
    });
    check_op("mean", &[&[5, 2]], 1.0, &|t, v| {
        let y = v[0].square().unwrap();
        probe_sum(t, y, 14).add(y.mean()).unwrap()
    });
    check_op("softmax_rows", &[&[3, 5]], 2.0, &|t, v| {
        probe_sum(t, v[0].softmax_rows(0.7).unwrap(), 15)
    });
    check_op("gelu", &[&[10]], 3.0, &|t, v| probe_sum(t, v[0].gelu(), 16));
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], 1.0, &|t, v| {
        probe_sum(t, v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), 17)
    });
    check_op("embedding", &[&[5, 3]], 1.0, &|t, v| {
        probe_sum(t, v[0].embedding(&[4, 0, 4, 2]).unwrap(), 18)
    });
    check_op("add_bias", &[&[4, 3], &[3]], 1.0, &|t, v| {
        probe_sum(t, v[0].add_bias(v[1]).unwrap(), 19)
    });
    check_op("repeat_rows", &[&[2, 3]], 1.0, &|t, v| {
        probe_sum(t, v[0].repeat_rows(3).unwrap(), 20)
    });
    check_op("conv2d_wrap", &[&[2, 5, 4]], 1.0, &|t, v| {
        let k = Tensor::new(
            vec![3, 3],
            vec![0.1, 0.2, 0.05, 0.3, -0.4, 0.6, 0.0, 0.25, 0.7],
        )
        .unwrap();
        probe_sum(t, v[0].conv2d_wrap(&k).unwrap(), 21)
    });
    check_op("reduce_max", &[&[3, 4]], 1.0, &|_, v| {
        v[0].square().unwrap().reduce_max()
    });
    check_op("gather", &[&[3, 4]], 1.0, &|t, v| {
        probe_sum(t, v[0].gather(&[11, 0, 5, 5], &[2, 2]).unwrap(), 22)
    });
    check_op("concat", &[&[2], &[3, 1]], 1.0, &|t, v| {
        probe_sum(t, t.concat(&[v[0], v[1].gelu()]).unwrap(), 23)
    });
}

#[test]
fn gradients_in_single_precision_match_finite_differences() {
    check_op_f32("matmul", &[&[3, 4], &[4, 2]], 1.0, &|t, v| {
        probe_sum(t, v[0].matmul(v[1]).unwrap(), 1)
    });
    check_op_f32("softmax_rows", &[&[2, 6]], 2.0, &|t, v| {
        probe_sum(t, v[0].softmax_rows(1.0).unwrap(), 2)
    });
    check_op_f32("layer_norm", &[&[2, 8], &[8], &[8]], 1.0, &|t, v| {
        probe_sum(t, v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), 3)
    });
    check_op_f32("gelu", &[&[8]], 2.0, &|t, v| probe_sum(t, v[0].gelu(), 4));
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
    let y = x.softmax_rows(1.0).unwrap();
    for &v in y.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let y = x.softmax_rows(1.0).unwrap();
    let v = y.value();
    assert!(v.data().iter().all(|v| v.is_finite()));
    assert!((v.data()[0] - 1.0).abs() < 1e-12 && v.data()[1] < 1e-300);

    for bad in [0.0, -1.0, f64::NAN] {
        assert!(matches!(x.softmax_rows(bad), Err(Error::Parameter(_))));
    }
}

#[test]
fn reduce_max_breaks_ties_at_lowest_index() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::new(vec![3], vec![0.1, 0.9, 0.9]).unwrap());
    let m = x.reduce_max();
    assert_eq!(m.item(), 0.9);
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[0.0, 1.0, 0.0]);

    let c = tape.constant(Tensor::full(&[2, 2], 0.25));
    assert_eq!(c.reduce_max().item(), 0.25);
}

#[test]
fn backward_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
    let g = tape.backward(x.sum()).unwrap();
    assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 1.0));

    let x = tape.var(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.mul(x).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.backward(x.scale(2.0)),
        Err(Error::Contract(_))
    ));

    let c = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(c.sum()), Err(Error::Contract(_))));
}

#[test]
fn constants_never_receive_gradients() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::full(&[2], 2.0));
    let c = tape.constant(Tensor::full(&[2], 3.0));
    let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
    assert!(g.get(&c).is_none());
    assert_eq!(g.get(&x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn gradients_accumulate_across_uses() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    // x + 3x + x*x  ->  4 + 2x
    let y = x
        .add(x.scale(3.0))
        .unwrap()
        .add(x.square().unwrap())
        .unwrap();
    let g = tape.backward(y.sum()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[7.0, 0.0]);
}

#[test]
fn replayed_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::<f32>::new();
    let a = tape.var(random_tensor(&mut rng, &[8, 16], 1.0));
    let b = tape.var(random_tensor(&mut rng, &[16, 8], 1.0));
    let y = a.matmul(b).unwrap().softmax_rows(1.0).unwrap().gelu();
    let loss = probe_sum(&tape, y, 3);
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1.get(&a).unwrap().data(), g2.get(&a).unwrap().data());
    assert_eq!(g1.get(&b).unwrap().data(), g2.get(&b).unwrap().data());
}

#[test]
fn operands_from_different_tapes_are_rejected() {
    let t1 = Tape::<f64>::new();
    let t2 = Tape::<f64>::new();
    let a = t1.var(Tensor::zeros(&[2]));
    let b = t2.var(Tensor::zeros(&[2]));
    assert!(matches!(a.add(b), Err(Error::Contract(_))));
}

#[test]
fn conv_rejects_even_kernels() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[4, 4]));
    assert!(x.conv2d_wrap(&Tensor::full(&[2, 2], 0.25)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, mag in 1.0f64..1e4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let x = tape.constant(random_tensor(&mut rng, &[rows, cols], mag));
        let y = x.softmax_rows(1.0).unwrap();
        for row in y.value().data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_wrap_conv_preserves_mass(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let kernel = Tensor::new(vec![3, 3], raw.iter().map(|v| v / total).collect()).unwrap();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[h, w], |_| rng.random_range(0.0..1.0)));
        let before = x.sum().item();
        let after = x.conv2d_wrap(&kernel).unwrap().sum().item();
        prop_assert!(((after - before) / before).abs() < 1e-6);
    }

    #[test]
    fn permute_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let t = random_tensor(&mut rng, &[2, 3, 4], 1.0);
        let x = tape.constant(t.clone());
        let y = x.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
        prop_assert_eq!(&*y.value(), &t);
    }
}
