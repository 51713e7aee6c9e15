use crate::error::{Error, Result};
use crate::ops::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer: `y(n, out) = x(n, in) * w(out, in)^T + b`.
pub fn linear<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, d_in) = input.dims2()?;
    let (d_out, w_in) = weight.dims2()?;
    if w_in != d_in {
        return Err(Error::shape(format!(
            "input width {d_in} does not match weight width {w_in}"
        )));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape(format!(
            "bias shape {:?}, expected [{d_out}]",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![n, d_out]);
    matmul_nt_acc(input.data(), weight.data(), out.data_mut(), n, d_in, d_out);
    for row in 0..n {
        let y = &mut out.data_mut()[row * d_out..(row + 1) * d_out];
        for (v, &b) in y.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct LinearGrads<E: Scalar> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn linear_backward<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> Result<LinearGrads<E>> {
    let (n, d_in) = input.dims2()?;
    let (d_out, _) = weight.dims2()?;
    if grad_out.shape() != [n, d_out] {
        return Err(Error::shape(format!(
            "output gradient shape {:?}, expected [{n}, {d_out}]",
            grad_out.shape()
        )));
    }
    let mut d_input = Tensor::zeros(vec![n, d_in]);
    let mut d_weight = Tensor::zeros(vec![d_out, d_in]);
    let mut d_bias = Tensor::zeros(vec![d_out]);

    // dx = dy * w ; dw = dy^T * x ; db = column sums of dy.
    matmul_acc(
        grad_out.data(),
        weight.data(),
        d_input.data_mut(),
        n,
        d_out,
        d_in,
    );
    matmul_tn_acc(
        grad_out.data(),
        input.data(),
        d_weight.data_mut(),
        d_out,
        n,
        d_in,
    );
    for row in 0..n {
        let gy = &grad_out.data()[row * d_out..(row + 1) * d_out];
        for (db, &g) in d_bias.data_mut().iter_mut().zip(gy) {
            *db = *db + g;
        }
    }
    Ok(LinearGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

/// Concatenates tensors along `axis`. All other extents must agree.
pub fn concat<E: Scalar>(inputs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::empty("concatenation of zero tensors".to_string()))?;
    if axis >= first.rank() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    let mut out_shape = first.shape().to_vec();
    let mut total_axis = 0usize;
    for t in inputs {
        if t.rank() != first.rank() {
            return Err(Error::shape(
                "concatenated tensors must share a rank".to_string(),
            ));
        }
        for (d, (&a, &b)) in first.shape().iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(format!(
                    "extent mismatch on axis {d}: {a} vs {b}"
                )));
            }
        }
        total_axis += t.shape()[axis];
    }
    out_shape[axis] = total_axis;

    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(out_shape);
    let out_stride = total_axis * inner;
    let mut axis_off = 0usize;
    for t in inputs {
        let extent = t.shape()[axis];
        let block = extent * inner;
        for o in 0..outer {
            let src = &t.data()[o * block..(o + 1) * block];
            let dst = &mut out.data_mut()[o * out_stride + axis_off * inner..][..block];
            dst.copy_from_slice(src);
        }
        axis_off += extent;
    }
    Ok(out)
}

/// Splits a concatenation gradient back into per-input gradients.
/// `extents` are the original sizes along `axis`, in order.
pub fn concat_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    extents: &[usize],
    axis: usize,
) -> Result<Vec<Tensor<E>>> {
    if axis >= grad_out.rank() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for rank {}",
            grad_out.rank()
        )));
    }
    let total: usize = extents.iter().sum();
    if grad_out.shape()[axis] != total {
        return Err(Error::shape(format!(
            "axis {axis} extent {} does not equal the sum of parts {total}",
            grad_out.shape()[axis]
        )));
    }
    let outer: usize = grad_out.shape()[..axis].iter().product();
    let inner: usize = grad_out.shape()[axis + 1..].iter().product();
    let out_stride = total * inner;

    let mut grads = Vec::with_capacity(extents.len());
    let mut axis_off = 0usize;
    for &extent in extents {
        let mut shape = grad_out.shape().to_vec();
        shape[axis] = extent;
        let mut g = Tensor::zeros(shape);
        let block = extent * inner;
        for o in 0..outer {
            let src = &grad_out.data()[o * out_stride + axis_off * inner..][..block];
            g.data_mut()[o * block..(o + 1) * block].copy_from_slice(src);
        }
        axis_off += extent;
        grads.push(g);
    }
    Ok(grads)
}

/// Row-wise softmax with max subtraction, so large logits cannot overflow.
pub fn softmax<E: Scalar>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, k) = logits.dims2()?;
    let mut out = Tensor::zeros(vec![n, k]);
    for row in 0..n {
        let x = &logits.data()[row * k..(row + 1) * k];
        let max = x.iter().cloned().fold(x[0], E::max);
        let y = &mut out.data_mut()[row * k..(row + 1) * k];
        let mut sum = E::zero();
        for (e, &v) in y.iter_mut().zip(x) {
            *e = (v - max).exp();
            sum = sum + *e;
        }
        for e in y.iter_mut() {
            *e = *e / sum;
        }
    }
    Ok(out)
}

/// Softmax followed by mean cross-entropy against integer labels.
/// Returns the probabilities (needed by the backward pass) and the loss.
pub fn softmax_xent<E: Scalar>(logits: &Tensor<E>, labels: &[usize]) -> Result<(Tensor<E>, E)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid_arg(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let p = probs.data()[row * k + label].to_f64();
        // p > 0 by construction (the true class contributes at least
        // exp(x - max) / k_terms), so ln is safe; tiny p gives a large loss.
        loss -= p.ln();
    }
    Ok((probs, E::from_f64(loss / n as f64)))
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(p - onehot(label)) / n` per row.
pub fn softmax_xent_backward<E: Scalar>(probs: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    let (n, k) = probs.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {n} rows",
            labels.len()
        )));
    }
    let scale = E::from_f64(1.0 / n as f64);
    let mut grad = probs.clone();
    for (row, &label) in labels.iter().enumerate() {
        let g = &mut grad.data_mut()[row * k..(row + 1) * k];
        g[label] = g[label] - E::one();
        for v in g.iter_mut() {
            *v = *v * scale;
        }
    }
    Ok(grad)
}
