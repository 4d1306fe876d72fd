use super::*;
use crate::reference::naive_conv2d;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero (relu/clamp kinks).
fn random_tensor_off_kinks(shape: Vec<usize>, rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(0.05..0.9);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

#[test]
fn conv2d_all_ones_sums_four() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
    let k = t.constant(Tensor::filled(vec![1, 1, 2, 2], 1.0));
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 2, 2]);
    assert!(t.value(y).data().iter().all(|v| *v == 4.0));
}

#[test]
fn conv2d_identity_kernel() {
    let mut r = rng(1);
    let mut t = Tape::new();
    let x = t.constant(random_tensor(vec![2, 1, 5, 7], &mut r));
    let k = t.constant(Tensor::filled(vec![1, 1, 1, 1], 1.0));
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut r = rng(2);
    let input = random_tensor(vec![2, 3, 8, 8], &mut r);
    let kernel = random_tensor(vec![4, 3, 3, 3], &mut r);
    let expected = naive_conv2d(&input, &kernel, 1, 1);
    let mut t = Tape::new();
    let x = t.constant(input);
    let k = t.constant(kernel);
    let y = t.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(t.value(y).shape(), expected.shape());
    for (a, b) in t.value(y).data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn conv2d_stride_two_matches_oracle() {
    let mut r = rng(3);
    let input = random_tensor(vec![1, 2, 9, 9], &mut r);
    let kernel = random_tensor(vec![3, 2, 3, 3], &mut r);
    let expected = naive_conv2d(&input, &kernel, 2, 1);
    let mut t = Tape::new();
    let x = t.constant(input);
    let k = t.constant(kernel);
    let y = t.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(t.value(y).shape(), expected.shape());
    for (a, b) in t.value(y).data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch_naming_shapes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = t.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    let err = t.conv2d(x, k, 1, 1).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
}

#[test]
fn conv2d_is_linear_in_input() {
    let mut r = rng(4);
    let x = random_tensor(vec![1, 2, 6, 6], &mut r);
    let y = random_tensor(vec![1, 2, 6, 6], &mut r);
    let k = random_tensor(vec![2, 2, 3, 3], &mut r);
    let (alpha, beta) = (0.7f32, -1.3f32);

    let run = |inp: Tensor, ker: Tensor| -> Vec<f32> {
        let mut t = Tape::new();
        let a = t.constant(inp);
        let b = t.constant(ker);
        let c = t.conv2d(a, b, 1, 1).unwrap();
        t.value(c).data().to_vec()
    };

    let mixed = Tensor::from_fn(vec![1, 2, 6, 6], {
        let (xd, yd) = (x.data().to_vec(), y.data().to_vec());
        let mut i = 0;
        move |_| {
            let v = alpha * xd[i] + beta * yd[i];
            i += 1;
            v
        }
    });
    let lhs = run(mixed, k.clone());
    let cx = run(x, k.clone());
    let cy = run(y, k);
    for i in 0..lhs.len() {
        let rhs = alpha * cx[i] + beta * cy[i];
        assert!((lhs[i] - rhs).abs() < 1e-5);
    }
}

#[test]
fn relu_forward_and_all_negative_grad() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::filled(vec![2, 3], -0.5), true);
    let y = t.relu(x);
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    let target = t.constant(Tensor::filled(vec![2, 3], 1.0));
    let loss = t.mse(y, target).unwrap();
    t.backward(loss).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn upsample2x_duplicates_and_preserves_scaled_sum() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(vec![1, 1, 1, 1], 5.0));
    let y = t.upsample2x(x).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 2, 2]);
    assert!(t.value(y).data().iter().all(|v| *v == 5.0));

    // checkerboard 2x2 -> block checkerboard 4x4
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = t.upsample2x(x).unwrap();
    #[rustfmt::skip]
    let expected = vec![
        1.0, 1.0, 0.0, 0.0,
        1.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 1.0,
        0.0, 0.0, 1.0, 1.0,
    ];
    assert_eq!(t.value(y).data(), &expected[..]);

    let mut r = rng(5);
    let mut t = Tape::new();
    let x = t.constant(random_tensor(vec![2, 3, 4, 5], &mut r));
    let y = t.upsample2x(x).unwrap();
    let sum_in: f64 = t.value(x).data().iter().map(|v| *v as f64).sum();
    let sum_out: f64 = t.value(y).data().iter().map(|v| *v as f64).sum();
    assert!((sum_out - 4.0 * sum_in).abs() < 1e-5);
}

#[test]
fn concat_channels_shapes_and_empty() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::filled(vec![1, 2, 4, 4], 1.0));
    let b = t.constant(Tensor::filled(vec![1, 3, 4, 4], 2.0));
    let c = t.concat_channels(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[1, 5, 4, 4]);

    let empty = t.constant(Tensor::zeros(vec![1, 0, 4, 4]));
    let same = t.concat_channels(a, empty).unwrap();
    assert_eq!(t.value(same).data(), t.value(a).data());

    let bad = t.constant(Tensor::zeros(vec![1, 1, 3, 4]));
    assert!(t.concat_channels(a, bad).is_err());
}

#[test]
fn concat_backward_splits_by_channel_range() {
    // Emulate sum(concat(a,b)) with mse against (value - n/2): grad is all-ones.
    let mut r = rng(6);
    let av = random_tensor(vec![1, 2, 3, 3], &mut r);
    let bv = random_tensor(vec![1, 1, 3, 3], &mut r);
    let mut t = Tape::new();
    let a = t.leaf(av, true);
    let b = t.leaf(bv, true);
    let c = t.concat_channels(a, b).unwrap();
    let n = t.value(c).numel() as f32;
    let target = Tensor::new(
        t.value(c).shape().to_vec(),
        t.value(c).data().iter().map(|v| v - n / 2.0).collect(),
    )
    .unwrap();
    let tgt = t.constant(target);
    let loss = t.mse(c, tgt).unwrap();
    t.backward(loss).unwrap();
    assert!(t.grad(a).unwrap().iter().all(|v| (*v - 1.0).abs() < 1e-5));
    assert!(t.grad(b).unwrap().iter().all(|v| (*v - 1.0).abs() < 1e-5));
}

#[test]
fn mse_trivial_and_oracle() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::filled(vec![4], 0.3));
    let l = t.mse(a, a).unwrap();
    assert_eq!(t.scalar(l).unwrap(), 0.0);

    let ones = t.constant(Tensor::filled(vec![2, 5], 1.0));
    let zeros = t.constant(Tensor::filled(vec![2, 5], 0.0));
    let l = t.mse(ones, zeros).unwrap();
    assert_eq!(t.scalar(l).unwrap(), 1.0);

    let mut r = rng(7);
    let av = random_tensor(vec![5, 7], &mut r);
    let bv = random_tensor(vec![5, 7], &mut r);
    let oracle: f64 = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / 35.0;
    let a = t.constant(av);
    let b = t.constant(bv);
    let l = t.mse(a, b).unwrap();
    assert!((t.scalar(l).unwrap() - oracle).abs() < 1e-6);

    let short = t.constant(Tensor::zeros(vec![3]));
    assert!(t.mse(a, short).is_err());
}

#[test]
fn backward_scalar_square_and_unreachable_leaf() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::scalar(3.0), true);
    let unused = t.leaf(Tensor::scalar(7.0), true);
    let zero = t.constant(Tensor::scalar(0.0));
    let loss = t.mse(w, zero).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[6.0]);
    assert!(t.grad(unused).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::filled(vec![3], 1.0), true);
    let y = t.relu(x);
    assert!(t.backward(y).is_err());
}

#[test]
fn backward_is_deterministic_after_zeroing() {
    let mut r = rng(8);
    let x = random_tensor(vec![1, 2, 6, 6], &mut r);
    let k = random_tensor(vec![3, 2, 3, 3], &mut r);
    let tgt = random_tensor(vec![1, 3, 6, 6], &mut r);
    let mut t = Tape::new();
    let xi = t.leaf(x, true);
    let ki = t.leaf(k, true);
    let y = t.conv2d(xi, ki, 1, 1).unwrap();
    let y = t.relu(y);
    let ti = t.constant(tgt);
    let loss = t.mse(y, ti).unwrap();
    t.backward(loss).unwrap();
    let g1: Vec<f32> = t.grad(ki).unwrap().to_vec();
    t.zero_grads();
    t.backward(loss).unwrap();
    let g2: Vec<f32> = t.grad(ki).unwrap().to_vec();
    assert_eq!(g1, g2);
    assert!(t.all_finite());
}

#[test]
fn grad_check_mse_vs_zeros() {
    let mut r = rng(9);
    let input = random_tensor(vec![3, 4], &mut r);
    let err = grad_check(
        |t, ids| {
            let zeros = t.constant(Tensor::zeros(vec![3, 4]));
            t.mse(ids[0], zeros)
        },
        &[input],
        GRAD_CHECK_EPSILON,
        usize::MAX,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grad_check_conv_relu_mse_chain() {
    let mut r = rng(10);
    let input = random_tensor_off_kinks(vec![1, 2, 5, 5], &mut r);
    let kernel = random_tensor(vec![2, 2, 3, 3], &mut r);
    let target = random_tensor(vec![1, 2, 5, 5], &mut r);
    let err = grad_check(
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, 1)?;
            let y = t.relu(y);
            let tgt = t.constant(target.clone());
            t.mse(y, tgt)
        },
        &[input, kernel],
        GRAD_CHECK_EPSILON,
        usize::MAX,
    )
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn grad_check_linear_map_is_nearly_exact() {
    // Dyadic point and step keep the finite difference exact in f64.
    let input = Tensor::scalar(0.5);
    let err = grad_check(
        |t, ids| {
            let s = t.scale(ids[0], 3.0);
            let c = t.constant(Tensor::scalar(5.0));
            t.add(s, c)
        },
        &[input],
        2f32.powi(-10),
        usize::MAX,
    )
    .unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn bias_add_broadcasts_per_channel() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(vec![2, 3, 2, 2]), true);
    let b = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let y = t.bias_add(x, b).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for p in 0..4 {
                assert_eq!(t.value(y).data()[(n * 3 + c) * 4 + p], (c + 1) as f32);
            }
        }
    }
    // grad of bias = per-channel sum of upstream gradient
    let tgt = t.constant(Tensor::zeros(vec![2, 3, 2, 2]));
    let loss = t.mse(y, tgt).unwrap();
    t.backward(loss).unwrap();
    let gb = t.grad(b).unwrap();
    let n = 24.0f32;
    for c in 0..3 {
        let expect = 2.0 * (c + 1) as f32 / n * 8.0; // 2(y-0)/n summed over 2x2x2 cells
        assert!((gb[c] - expect).abs() < 1e-5);
    }
}

#[test]
fn clamp01_saturates_and_gates_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(
        Tensor::new(vec![4], vec![-0.5, 0.25, 0.75, 1.5]).unwrap(),
        true,
    );
    let y = t.clamp01(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);
    let tgt = t.constant(Tensor::zeros(vec![4]));
    let loss = t.mse(y, tgt).unwrap();
    t.backward(loss).unwrap();
    let g = t.grad(x).unwrap();
    assert_eq!(g[0], 0.0);
    assert_eq!(g[3], 0.0);
    assert!(g[1] != 0.0 && g[2] != 0.0);
}

#[test]
fn scalar_cache_survives_arithmetic() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::filled(vec![10], 0.1));
    let b = t.constant(Tensor::zeros(vec![10]));
    let l1 = t.mse(a, b).unwrap();
    let l2 = t.scale(l1, 2.0);
    let c = t.constant(Tensor::scalar(0.5));
    let l3 = t.add(l2, c).unwrap();
    let v = t.scalar(l3).unwrap();
    // 0.1^2 * 2 + 0.5 at f64 precision (0.1f32 widened exactly)
    let x = 0.1f32 as f64;
    assert!((v - (2.0 * x * x + 0.5)).abs() < 1e-12);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conv_linearity_holds(seed in 0u64..1000, alpha in -2.0f32..2.0, beta in -2.0f32..2.0) {
            let mut r = rng(seed);
            let x = random_tensor(vec![1, 2, 5, 5], &mut r);
            let y = random_tensor(vec![1, 2, 5, 5], &mut r);
            let k = random_tensor(vec![2, 2, 3, 3], &mut r);
            let run = |inp: &Tensor| {
                let mut t = Tape::new();
                let a = t.constant(inp.clone());
                let b = t.constant(k.clone());
                let c = t.conv2d(a, b, 1, 1).unwrap();
                t.value(c).data().to_vec()
            };
            let mixed = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
            ).unwrap();
            let lhs = run(&mixed);
            let cx = run(&x);
            let cy = run(&y);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * cx[i] + beta * cy[i])).abs() < 1e-4);
            }
        }

        #[test]
        fn forward_backward_stay_finite(seed in 0u64..1000) {
            let mut r = rng(seed);
            let x = random_tensor(vec![1, 2, 6, 6], &mut r);
            let k = random_tensor(vec![2, 2, 3, 3], &mut r);
            let tgt = random_tensor(vec![1, 2, 6, 6], &mut r);
            let mut t = Tape::new();
            let xi = t.leaf(x, true);
            let ki = t.leaf(k, true);
            let c = t.conv2d(xi, ki, 1, 1).unwrap();
            let c = t.relu(c);
            let c = t.clamp01(c);
            let tg = t.constant(tgt);
            let loss = t.mse(c, tg).unwrap();
            t.backward(loss).unwrap();
            prop_assert!(t.all_finite());
        }
    }
}
