//! Finite-difference validation of every backward pass in the engine.
//!
//! Each operator is instantiated in `f64`, driven with seeded random inputs,
//! and its analytic gradients are compared element-wise against central
//! differences `(f(x+e) - f(x-e)) / 2e` of a random weighted-sum loss.
//! Elements sitting within a kink of a non-smooth operator (relu at zero, a
//! max-pool window with a near-tie) are skipped and counted, since finite
//! differences are meaningless across a kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_train, concat, concat_backward, conv2d, conv2d_backward,
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, maxpool2d,
    maxpool2d_backward, pool_out_size, relu, relu_backward, softmax_xent, softmax_xent_backward,
};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            trials: 10,
            epsilon: 1e-5,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedOp {
    Conv2d,
    MaxPool2d,
    GlobalAvgPool,
    Relu,
    BatchNorm,
    Concat,
    Linear,
    SoftmaxXent,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 8] = [
        CheckedOp::Conv2d,
        CheckedOp::MaxPool2d,
        CheckedOp::GlobalAvgPool,
        CheckedOp::Relu,
        CheckedOp::BatchNorm,
        CheckedOp::Concat,
        CheckedOp::Linear,
        CheckedOp::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::Conv2d => "conv2d",
            CheckedOp::MaxPool2d => "maxpool2d",
            CheckedOp::GlobalAvgPool => "global-avg-pool",
            CheckedOp::Relu => "relu",
            CheckedOp::BatchNorm => "batchnorm",
            CheckedOp::Concat => "concat",
            CheckedOp::Linear => "linear",
            CheckedOp::SoftmaxXent => "softmax-xent",
        }
    }
}

impl std::str::FromStr for CheckedOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.replace('_', "-");
        CheckedOp::ALL
            .into_iter()
            .find(|op| op.name() == normalized)
            .ok_or_else(|| {
                let names: Vec<_> = CheckedOp::ALL.iter().map(|o| o.name()).collect();
                Error::usage(format!(
                    "unknown operator {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OpReport {
    pub op: CheckedOp,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl OpReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance && self.checked > 0
    }
}

/// Checks one operator over `cfg.trials` random configurations.
pub fn check_op(op: CheckedOp, cfg: &GradCheckConfig) -> OpReport {
    let mut report = OpReport {
        op,
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    // Decorrelate the per-op streams while keeping everything a pure
    // function of (seed, op).
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((op as u64 + 1) << 32));
    for _ in 0..cfg.trials {
        match op {
            CheckedOp::Conv2d => trial_conv(&mut rng, cfg, &mut report),
            CheckedOp::MaxPool2d => trial_maxpool(&mut rng, cfg, &mut report),
            CheckedOp::GlobalAvgPool => trial_gap(&mut rng, cfg, &mut report),
            CheckedOp::Relu => trial_relu(&mut rng, cfg, &mut report),
            CheckedOp::BatchNorm => trial_batchnorm(&mut rng, cfg, &mut report),
            CheckedOp::Concat => trial_concat(&mut rng, cfg, &mut report),
            CheckedOp::Linear => trial_linear(&mut rng, cfg, &mut report),
            CheckedOp::SoftmaxXent => trial_softmax(&mut rng, cfg, &mut report),
        }
    }
    report
}

/// Checks every operator; the report order follows [`CheckedOp::ALL`].
pub fn check_all(cfg: &GradCheckConfig) -> Vec<OpReport> {
    CheckedOp::ALL.iter().map(|&op| check_op(op, cfg)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid trial shape")
}

/// The scalar loss every check differentiates: a fixed random weighting of
/// the operator output.
fn weighted(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum()
}

fn numeric_grad(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = x.scalar_like(0.0);
    for i in 0..x.len() {
        let saved = probe.data()[i];
        probe.data_mut()[i] = saved + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = saved - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = saved;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn compare(
    analytic: &Tensor<f64>,
    numeric: &Tensor<f64>,
    skip: Option<&[bool]>,
    report: &mut OpReport,
) {
    for i in 0..analytic.len() {
        if skip.map(|s| s[i]).unwrap_or(false) {
            report.skipped += 1;
            continue;
        }
        report.max_rel_err = report
            .max_rel_err
            .max(rel_err(analytic.data()[i], numeric.data()[i]));
        report.checked += 1;
    }
}

fn trial_conv(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let n = rng.random_range(1..=2);
    let k = rng.random_range(1..=3usize);
    let pad = rng.random_range(0..=1usize.min(k - 1));
    let h = rng.random_range(k.max(3)..=6);
    let w = rng.random_range(k.max(3)..=6);
    let spec = ConvSpec::square(
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        k,
        rng.random_range(1..=2),
        pad,
    );

    let x = rand_tensor(rng, &[n, spec.in_channels, h, w], -1.0, 1.0);
    let wt = rand_tensor(rng, &spec.weight_shape(), -1.0, 1.0);
    let b = rand_tensor(rng, &[spec.out_channels], -1.0, 1.0);
    let out = conv2d(&x, &wt, &b, &spec).expect("trial conv forward");
    let loss_w = rand_tensor(rng, out.shape(), -1.0, 1.0);

    let grads = conv2d_backward(&x, &wt, &b, &spec, &loss_w).expect("trial conv backward");
    let num_x = numeric_grad(&x, cfg.epsilon, |p| {
        weighted(&conv2d(p, &wt, &b, &spec).unwrap(), &loss_w)
    });
    let num_w = numeric_grad(&wt, cfg.epsilon, |p| {
        weighted(&conv2d(&x, p, &b, &spec).unwrap(), &loss_w)
    });
    let num_b = numeric_grad(&b, cfg.epsilon, |p| {
        weighted(&conv2d(&x, &wt, p, &spec).unwrap(), &loss_w)
    });
    compare(&grads.input, &num_x, None, report);
    compare(&grads.weight, &num_w, None, report);
    compare(&grads.bias, &num_b, None, report);
}

/// Marks the input elements whose perturbation by `eps` could flip some
/// window's argmax: those within `2 eps` of the largest other value in any
/// window containing them.
fn maxpool_kinks(
    x: &Tensor<f64>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    ceil: bool,
    eps: f64,
) -> Vec<bool> {
    let (n, c, h, w) = x.dims4().expect("pool input is rank 4");
    let oh = pool_out_size(h, kernel.0, stride.0, pad.0, ceil).expect("valid trial pool");
    let ow = pool_out_size(w, kernel.1, stride.1, pad.1, ceil).expect("valid trial pool");
    let mut skip = vec![false; x.len()];
    let mut window = Vec::new();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = (oy * stride.0) as isize - pad.0 as isize;
            let ys = y0.max(0) as usize;
            let ye = ((y0 + kernel.0 as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride.1) as isize - pad.1 as isize;
                let xs = x0.max(0) as usize;
                let xe = ((x0 + kernel.1 as isize).min(w as isize)) as usize;
                window.clear();
                for y in ys..ye {
                    for xi in xs..xe {
                        window.push(base + y * w + xi);
                    }
                }
                let mut m1 = f64::NEG_INFINITY;
                let mut m2 = f64::NEG_INFINITY;
                let mut m1_count = 0usize;
                for &idx in &window {
                    let v = x.data()[idx];
                    if v > m1 {
                        m2 = m1;
                        m1 = v;
                        m1_count = 1;
                    } else if v == m1 {
                        m1_count += 1;
                    } else if v > m2 {
                        m2 = v;
                    }
                }
                for &idx in &window {
                    let v = x.data()[idx];
                    let rest = if v == m1 && m1_count == 1 { m2 } else { m1 };
                    if (v - rest).abs() <= 2.0 * eps {
                        skip[idx] = true;
                    }
                }
            }
        }
    }
    skip
}

fn trial_maxpool(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let k = rng.random_range(2..=3usize);
    let kernel = (k, k);
    let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
    let p = rng.random_range(0..k);
    let pad = (p.min(1), p.min(1));
    let ceil = rng.random_range(0..2) == 1;
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=2);
    let h = rng.random_range(k..=6);
    let w = rng.random_range(k..=6);

    let x = rand_tensor(rng, &[n, c, h, w], -1.0, 1.0);
    let (out, cache) = maxpool2d(&x, kernel, stride, pad, ceil).expect("trial pool forward");
    let loss_w = rand_tensor(rng, out.shape(), -1.0, 1.0);
    let analytic = maxpool2d_backward(&cache, &loss_w).expect("trial pool backward");
    let numeric = numeric_grad(&x, cfg.epsilon, |probe| {
        let (o, _) = maxpool2d(probe, kernel, stride, pad, ceil).unwrap();
        weighted(&o, &loss_w)
    });
    let skip = maxpool_kinks(&x, kernel, stride, pad, ceil, cfg.epsilon);
    compare(&analytic, &numeric, Some(&skip), report);
}

fn trial_gap(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let shape = [
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    ];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let out = global_avg_pool(&x).expect("trial gap forward");
    let loss_w = rand_tensor(rng, out.shape(), -1.0, 1.0);
    let analytic =
        global_avg_pool_backward(&loss_w, shape[2], shape[3]).expect("trial gap backward");
    let numeric = numeric_grad(&x, cfg.epsilon, |p| {
        weighted(&global_avg_pool(p).unwrap(), &loss_w)
    });
    compare(&analytic, &numeric, None, report);
}

fn trial_relu(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let shape = [rng.random_range(1..=3), rng.random_range(2..=8)];
    // Draw away from the kink at zero; the guard below still applies.
    let mut x = rand_tensor(rng, &shape, -1.0, 1.0);
    for v in x.data_mut() {
        if v.abs() < 0.01 {
            *v += 0.02_f64.copysign(*v);
        }
    }
    let loss_w = rand_tensor(rng, &shape, -1.0, 1.0);
    let _ = relu(&x);
    let analytic = relu_backward(&x, &loss_w).expect("trial relu backward");
    let numeric = numeric_grad(&x, cfg.epsilon, |p| weighted(&relu(p), &loss_w));
    let skip: Vec<bool> = x.data().iter().map(|v| v.abs() <= cfg.epsilon).collect();
    compare(&analytic, &numeric, Some(&skip), report);
}

fn trial_batchnorm(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let shape = [
        rng.random_range(2..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=4),
        rng.random_range(2..=4),
    ];
    let c = shape[1];
    let x = rand_tensor(rng, &shape, -1.0, 1.0);
    let gamma = rand_tensor(rng, &[c], 0.5, 1.5);
    let beta = rand_tensor(rng, &[c], -0.5, 0.5);
    let eps_bn = 1e-5;

    let run = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
        let mut rm = Tensor::zeros(vec![c]);
        let mut rv = Tensor::ones(vec![c]);
        batchnorm_train(x, g, b, &mut rm, &mut rv, eps_bn, 0.9)
            .expect("trial batchnorm")
            .0
    };
    let out = run(&x, &gamma, &beta);
    let loss_w = rand_tensor(rng, out.shape(), -1.0, 1.0);

    let mut rm = Tensor::zeros(vec![c]);
    let mut rv = Tensor::ones(vec![c]);
    let (_, cache) =
        batchnorm_train(&x, &gamma, &beta, &mut rm, &mut rv, eps_bn, 0.9).expect("trial batchnorm");
    let grads = batchnorm_backward(&cache, &gamma, &loss_w).expect("trial batchnorm backward");

    let num_x = numeric_grad(&x, cfg.epsilon, |p| {
        weighted(&run(p, &gamma, &beta), &loss_w)
    });
    let num_g = numeric_grad(&gamma, cfg.epsilon, |p| {
        weighted(&run(&x, p, &beta), &loss_w)
    });
    let num_b = numeric_grad(&beta, cfg.epsilon, |p| {
        weighted(&run(&x, &gamma, p), &loss_w)
    });
    compare(&grads.input, &num_x, None, report);
    compare(&grads.gamma, &num_g, None, report);
    compare(&grads.beta, &num_b, None, report);
}

fn trial_concat(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let parts = rng.random_range(2..=3);
    let rows = rng.random_range(1..=3);
    let extents: Vec<usize> = (0..parts).map(|_| rng.random_range(1..=4)).collect();
    let tensors: Vec<Tensor<f64>> = extents
        .iter()
        .map(|&e| rand_tensor(rng, &[rows, e], -1.0, 1.0))
        .collect();
    let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
    let out = concat(&refs, 1).expect("trial concat forward");
    let loss_w = rand_tensor(rng, out.shape(), -1.0, 1.0);
    let analytic = concat_backward(&loss_w, &extents, 1).expect("trial concat backward");

    for (i, part) in tensors.iter().enumerate() {
        let numeric = numeric_grad(part, cfg.epsilon, |p| {
            let mut probe_refs: Vec<&Tensor<f64>> = tensors.iter().collect();
            probe_refs[i] = p;
            weighted(&concat(&probe_refs, 1).unwrap(), &loss_w)
        });
        compare(&analytic[i], &numeric, None, report);
    }
}

fn trial_linear(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let n = rng.random_range(1..=4);
    let d_in = rng.random_range(1..=6);
    let d_out = rng.random_range(1..=5);
    let x = rand_tensor(rng, &[n, d_in], -1.0, 1.0);
    let wt = rand_tensor(rng, &[d_out, d_in], -1.0, 1.0);
    let b = rand_tensor(rng, &[d_out], -1.0, 1.0);
    let out = linear(&x, &wt, &b).expect("trial linear forward");
    let loss_w = rand_tensor(rng, out.shape(), -1.0, 1.0);

    let grads = linear_backward(&x, &wt, &loss_w).expect("trial linear backward");
    let num_x = numeric_grad(&x, cfg.epsilon, |p| {
        weighted(&linear(p, &wt, &b).unwrap(), &loss_w)
    });
    let num_w = numeric_grad(&wt, cfg.epsilon, |p| {
        weighted(&linear(&x, p, &b).unwrap(), &loss_w)
    });
    let num_b = numeric_grad(&b, cfg.epsilon, |p| {
        weighted(&linear(&x, &wt, p).unwrap(), &loss_w)
    });
    compare(&grads.input, &num_x, None, report);
    compare(&grads.weight, &num_w, None, report);
    compare(&grads.bias, &num_b, None, report);
}

fn trial_softmax(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, report: &mut OpReport) {
    let n = rng.random_range(1..=4);
    let k = rng.random_range(2..=5);
    let logits = rand_tensor(rng, &[n, k], -2.0, 2.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

    let (probs, _) = softmax_xent(&logits, &labels).expect("trial softmax forward");
    let analytic = softmax_xent_backward(&probs, &labels).expect("trial softmax backward");
    let numeric = numeric_grad(&logits, cfg.epsilon, |p| {
        softmax_xent(p, &labels).unwrap().1
    });
    compare(&analytic, &numeric, None, report);
}
