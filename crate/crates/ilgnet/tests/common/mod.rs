//! Shared test support: reference implementations written as plain nested
//! loops over flat slices (nothing shared with the library's kernels), a
//! brute-force split oracle, and a harness for the compiled binary.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

/// Direct sliding-window convolution with f64 accumulation.
/// Input `[n, ci, h, w]`, weight `[co, ci, kh, kw]`, bias `[co]`, zero
/// padding; returns `(out, oh, ow)` with out `[n, co, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &[f32],
    (n, ci, h, w): (usize, usize, usize, usize),
    weight: &[f32],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o] as f64;
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input[((b * ci + i) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((o * ci + i) * kh + ky) * kw + kx];
                                acc += iv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Output extent of a pooling window: floor by default, ceil when asked,
/// with the border rule that a window may not begin past the padded input.
pub fn naive_pool_out(input: usize, kernel: usize, stride: usize, pad: usize, ceil: bool) -> usize {
    let span = input + 2 * pad - kernel;
    let mut out = if ceil {
        span.div_ceil(stride) + 1
    } else {
        span / stride + 1
    };
    if ceil && out > 1 && (out - 1) * stride >= input + pad {
        out -= 1;
    }
    out
}

/// Direct max pooling; padded positions never contribute.
pub fn naive_maxpool2d(
    input: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    ceil: bool,
) -> (Vec<f32>, usize, usize) {
    let oh = naive_pool_out(h, kernel, stride, pad, ceil);
    let ow = naive_pool_out(w, kernel, stride, pad, ceil);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        best = best.max(input[(plane * h + iy as usize) * w + ix as usize]);
                    }
                }
                out[(plane * oh + oy) * ow + ox] = best;
            }
        }
    }
    (out, oh, ow)
}

/// Per-plane spatial mean with f64 accumulation; `[n, c, h, w] -> [n, c]`.
pub fn naive_gap(input: &[f32], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f32> {
    let area = h * w;
    (0..n * c)
        .map(|plane| {
            let sum: f64 = input[plane * area..(plane + 1) * area]
                .iter()
                .map(|&v| v as f64)
                .sum();
            (sum / area as f64) as f32
        })
        .collect()
}

/// `count` random vote histograms plus two records whose mean is exactly
/// the labeling threshold of 5. Deterministic in `seed`.
pub fn synthetic_records(count: usize, seed: u64) -> Vec<ilgnet::ava::RatingRecord> {
    use ilgnet::ava::RatingRecord;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<RatingRecord> = (0..count - 2)
        .map(|i| {
            let mut counts = [0u32; 10];
            for c in counts.iter_mut() {
                *c = rng.random_range(0..40);
            }
            if counts.iter().all(|&c| c == 0) {
                counts[4] = 1;
            }
            RatingRecord {
                image_id: format!("img_{i:05}"),
                counts,
            }
        })
        .collect();
    let mut five = [0u32; 10];
    five[4] = 33;
    records.push(RatingRecord {
        image_id: "img_exact5_a".to_string(),
        counts: five,
    });
    let mut balanced = [0u32; 10];
    balanced[3] = 10;
    balanced[5] = 10;
    records.push(RatingRecord {
        image_id: "img_exact5_b".to_string(),
        counts: balanced,
    });
    records
}

/// The vote-weighted mean recomputed the long way.
pub fn naive_mean(counts: &[u32; 10]) -> f64 {
    let mut votes = 0u64;
    let mut weighted = 0u64;
    for (i, &c) in counts.iter().enumerate() {
        votes += c as u64;
        weighted += (i as u64 + 1) * c as u64;
    }
    weighted as f64 / votes as f64
}

/// Runs the compiled binary with `args`, returning the raw process output.
pub fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilgnet"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

/// Like [`run_cli`] with extra environment variables set.
pub fn run_cli_env(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ilgnet"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should spawn")
}

pub fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Parses `key=value` report tokens into a map (later keys win). Handles
/// both one-pair-per-line reports and several pairs on a single line.
pub fn kv(stdout: &str) -> HashMap<String, String> {
    stdout
        .split_whitespace()
        .filter_map(|token| token.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn kv_usize(map: &HashMap<String, String>, key: &str) -> usize {
    map.get(key)
        .unwrap_or_else(|| panic!("report is missing {key}"))
        .parse()
        .unwrap_or_else(|_| panic!("report {key} is not an integer"))
}

pub fn kv_f64(map: &HashMap<String, String>, key: &str) -> f64 {
    map.get(key)
        .unwrap_or_else(|| panic!("report is missing {key}"))
        .parse()
        .unwrap_or_else(|_| panic!("report {key} is not a number"))
}

/// Asserts the process exited with `code`, printing its streams otherwise.
pub fn expect_exit(output: &Output, code: i32, context: &str) {
    let got = output.status.code();
    assert_eq!(
        got,
        Some(code),
        "{context}: expected exit {code}, got {got:?}\nstdout:\n{}\nstderr:\n{}",
        stdout_of(output),
        stderr_of(output)
    );
}

/// Writes a brightness corpus plus an ava1 split under `dir`, returning
/// `(images_dir, split_csv)`. Panics on any CLI failure.
pub fn make_corpus_and_split(dir: &Path, count: usize, test_count: usize) -> (String, String) {
    let images = dir.join("corpus");
    let split = dir.join("split.csv");
    let images_s = images.to_str().unwrap().to_string();
    let split_s = split.to_str().unwrap().to_string();
    let out = run_cli(&[
        "synth",
        "--out",
        &images_s,
        "--count",
        &count.to_string(),
        "--seed",
        "7",
    ]);
    expect_exit(&out, 0, "synth");
    let metadata = images.join("metadata.csv");
    let out = run_cli(&[
        "split",
        "--metadata",
        metadata.to_str().unwrap(),
        "--protocol",
        "ava1",
        "--test-count",
        &test_count.to_string(),
        "--seed",
        "5",
        "--out",
        &split_s,
    ]);
    expect_exit(&out, 0, "split");
    (images_s, split_s)
}
