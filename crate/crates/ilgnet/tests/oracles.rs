//! The optimized kernels against plain nested-loop references, over both
//! hand-picked and randomized configurations.

mod common;

use common::{naive_conv2d, naive_gap, naive_maxpool2d, naive_pool_out};
use ilgnet::ops::{conv2d, global_avg_pool, maxpool2d, pool_out_size, softmax};
use ilgnet::tensor::{ConvSpec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn close(a: f32, b: f32) -> bool {
    (a - b).abs() <= 1e-5 * 1.0f32.max(a.abs()).max(b.abs())
}

#[test]
fn conv_matches_reference_on_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..24 {
        let n = rng.random_range(1usize..=2);
        let ci = rng.random_range(1usize..=4);
        let co = rng.random_range(1usize..=5);
        let k = rng.random_range(1usize..=4);
        let stride = rng.random_range(1usize..=3);
        let pad = rng.random_range(0usize..=2);
        let min_side = k.saturating_sub(2 * pad).max(1);
        let h = rng.random_range(min_side..=k + 7);
        let w = rng.random_range(min_side..=k + 7);

        let input = random_tensor(&mut rng, vec![n, ci, h, w]);
        let weight = random_tensor(&mut rng, vec![co, ci, k, k]);
        let bias = random_tensor(&mut rng, vec![co]);
        let spec = ConvSpec::square(ci, co, k, stride, pad);

        let got = conv2d(&input, &weight, &bias, &spec).unwrap();
        let (want, oh, ow) = naive_conv2d(
            input.data(),
            (n, ci, h, w),
            weight.data(),
            (co, k, k),
            bias.data(),
            stride,
            pad,
        );
        assert_eq!(got.shape(), &[n, co, oh, ow], "trial {trial}");
        for (i, (&a, &b)) in got.data().iter().zip(&want).enumerate() {
            assert!(close(a, b), "trial {trial} element {i}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_spot_check_by_hand() {
    // 1x1x3x3 input, 2x2 kernel of ones, stride 1: each output is the
    // window sum plus the bias.
    let input = Tensor::new(
        vec![1, 1, 3, 3],
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
    )
    .unwrap();
    let weight = Tensor::ones(vec![1, 1, 2, 2]);
    let bias = Tensor::full(vec![1], 0.5f32);
    let spec = ConvSpec::square(1, 1, 2, 1, 0);
    let out = conv2d(&input, &weight, &bias, &spec).unwrap();
    assert_eq!(out.data(), &[12.5, 16.5, 24.5, 28.5]);
}

#[test]
fn maxpool_matches_reference_on_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..30 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=1).min(k / 2);
        let ceil = rng.random_range(0..2) == 1;
        let h = rng.random_range(k..=k + 8);
        let w = rng.random_range(k..=k + 8);

        let input = random_tensor(&mut rng, vec![n, c, h, w]);
        let (got, _) = maxpool2d(&input, (k, k), (stride, stride), (pad, pad), ceil).unwrap();
        let (want, oh, ow) = naive_maxpool2d(input.data(), (n, c, h, w), k, stride, pad, ceil);
        assert_eq!(got.shape(), &[n, c, oh, ow], "trial {trial}");
        assert_eq!(got.data(), &want[..], "trial {trial}");
    }
}

#[test]
fn maxpool_spot_check_by_hand() {
    // 4x4 ramp, 2x2 window, stride 2: maxima are the bottom-right corners.
    let input = Tensor::new(vec![1, 1, 4, 4], (1..=16).map(|v| v as f32).collect()).unwrap();
    let (out, _) = maxpool2d(&input, (2, 2), (2, 2), (0, 0), false).unwrap();
    assert_eq!(out.data(), &[6.0, 8.0, 14.0, 16.0]);
}

#[test]
fn pool_extent_matches_reference_over_the_grid() {
    for input in 1..=12 {
        for kernel in 1..=4usize {
            for stride in 1..=3 {
                for pad in 0..=kernel / 2 {
                    if input + 2 * pad < kernel {
                        continue;
                    }
                    for ceil in [false, true] {
                        let got = pool_out_size(input, kernel, stride, pad, ceil).unwrap();
                        let want = naive_pool_out(input, kernel, stride, pad, ceil);
                        assert_eq!(
                            got, want,
                            "in={input} k={kernel} s={stride} p={pad} ceil={ceil}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn global_average_matches_reference_on_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for trial in 0..25 {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=6);
        let h = rng.random_range(1..=9);
        let w = rng.random_range(1..=9);
        let input = random_tensor(&mut rng, vec![n, c, h, w]);
        let got = global_avg_pool(&input).unwrap();
        let want = naive_gap(input.data(), (n, c, h, w));
        assert_eq!(got.shape(), &[n, c], "trial {trial}");
        for (i, (&a, &b)) in got.data().iter().zip(&want).enumerate() {
            assert!(close(a, b), "trial {trial} element {i}: {a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_simplex_points(
        rows in 1usize..4,
        cols in 2usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let logits = Tensor::new(vec![rows, cols], data).unwrap();
        let probs = softmax(&logits).unwrap();
        for row in probs.data().chunks(cols) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(
        cols in 2usize..6,
        shift in -20.0f32..20.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted: Vec<f32> = data.iter().map(|&v| v + shift).collect();
        let a = softmax(&Tensor::new(vec![1, cols], data).unwrap()).unwrap();
        let b = softmax(&Tensor::new(vec![1, cols], shifted).unwrap()).unwrap();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn convolution_is_additive_in_the_input(
        k in 1usize..3,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::square(2, 3, k, 1, 0);
        let h = k + 3;
        let x = random_tensor(&mut rng, vec![1, 2, h, h]);
        let y = random_tensor(&mut rng, vec![1, 2, h, h]);
        let weight = random_tensor(&mut rng, vec![3, 2, k, k]);
        let zero_bias = Tensor::zeros(vec![3]);

        let mut sum = x.clone();
        for (s, &v) in sum.data_mut().iter_mut().zip(y.data()) {
            *s += v;
        }
        let lhs = conv2d(&sum, &weight, &zero_bias, &spec).unwrap();
        let cx = conv2d(&x, &weight, &zero_bias, &spec).unwrap();
        let cy = conv2d(&y, &weight, &zero_bias, &spec).unwrap();
        for ((&l, &a), &b) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a + b)).abs() < 1e-4, "{l} vs {}", a + b);
        }
    }
}
