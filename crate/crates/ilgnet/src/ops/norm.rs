use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Saved forward state for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<E: Scalar> {
    pub xhat: Tensor<E>,
    pub inv_std: Vec<E>,
}

#[derive(Debug)]
pub struct BatchNormGrads<E: Scalar> {
    pub input: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

fn check_affine<E: Scalar>(c: usize, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "scale/shift shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Batch normalization over NCHW input in training mode: normalizes each
/// channel by the biased statistics of the current batch and folds those
/// statistics into the running buffers
/// (`running = momentum * running + (1 - momentum) * batch`).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &mut Tensor<E>,
    running_var: &mut Tensor<E>,
    eps: E,
    momentum: E,
) -> Result<(Tensor<E>, BnCache<E>)> {
    let (n, c, h, w) = input.dims4()?;
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::invalid_arg(
            "batch normalization needs at least two values per channel in training mode"
                .to_string(),
        ));
    }

    let area = h * w;
    let plane = c * area;
    let mut out = Tensor::zeros(input.shape().to_vec());
    let mut xhat = Tensor::zeros(input.shape().to_vec());
    let mut inv_std = Vec::with_capacity(c);
    let one_minus = E::one() - momentum;

    for ch in 0..c {
        // Two-pass moments, accumulated in f64 regardless of element type so
        // f32 batches of tens of thousands of values stay accurate.
        let mut sum = 0.0f64;
        for s in 0..n {
            let row = &input.data()[s * plane + ch * area..][..area];
            sum += row.iter().map(|&v| v.to_f64()).sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut var_sum = 0.0f64;
        for s in 0..n {
            let row = &input.data()[s * plane + ch * area..][..area];
            var_sum += row
                .iter()
                .map(|&v| (v.to_f64() - mean).powi(2))
                .sum::<f64>();
        }
        let var = var_sum / m as f64;
        let istd = 1.0 / (var + eps.to_f64()).sqrt();
        inv_std.push(E::from_f64(istd));

        let g = gamma.data()[ch];
        let b = beta.data()[ch];
        for s in 0..n {
            let off = s * plane + ch * area;
            for i in 0..area {
                let xh = E::from_f64((input.data()[off + i].to_f64() - mean) * istd);
                xhat.data_mut()[off + i] = xh;
                out.data_mut()[off + i] = g * xh + b;
            }
        }

        let rm = running_mean.data_mut();
        rm[ch] = momentum * rm[ch] + one_minus * E::from_f64(mean);
        let rv = running_var.data_mut();
        rv[ch] = momentum * rv[ch] + one_minus * E::from_f64(var);
    }

    Ok((out, BnCache { xhat, inv_std }))
}

/// Batch normalization in inference mode: a fixed affine map built from the
/// running statistics, independent of batch composition.
pub fn batchnorm_infer<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = input.dims4()?;
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let area = h * w;
    let plane = c * area;
    let mut out = Tensor::zeros(input.shape().to_vec());
    for ch in 0..c {
        let istd = E::from_f64(1.0 / (running_var.data()[ch].to_f64() + eps.to_f64()).sqrt());
        let scale = gamma.data()[ch] * istd;
        let shift = beta.data()[ch] - scale * running_mean.data()[ch];
        for s in 0..n {
            let off = s * plane + ch * area;
            for i in 0..area {
                out.data_mut()[off + i] = scale * input.data()[off + i] + shift;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`batchnorm_train`] through the batch statistics:
/// `dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))`
/// with the means taken per channel.
pub fn batchnorm_backward<E: Scalar>(
    cache: &BnCache<E>,
    gamma: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> Result<BatchNormGrads<E>> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape(format!(
            "output gradient shape {:?} does not match normalized shape {:?}",
            grad_out.shape(),
            cache.xhat.shape()
        )));
    }
    let (n, c, h, w) = cache.xhat.dims4()?;
    check_affine(c, gamma, gamma)?;
    let m = (n * h * w) as f64;
    let area = h * w;
    let plane = c * area;

    let mut d_input = Tensor::zeros(cache.xhat.shape().to_vec());
    let mut d_gamma = Tensor::zeros(vec![c]);
    let mut d_beta = Tensor::zeros(vec![c]);

    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let off = s * plane + ch * area;
            for i in 0..area {
                let dy = grad_out.data()[off + i].to_f64();
                sum_dy += dy;
                sum_dy_xhat += dy * cache.xhat.data()[off + i].to_f64();
            }
        }
        d_beta.data_mut()[ch] = E::from_f64(sum_dy);
        d_gamma.data_mut()[ch] = E::from_f64(sum_dy_xhat);

        let scale = gamma.data()[ch].to_f64() * cache.inv_std[ch].to_f64();
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for s in 0..n {
            let off = s * plane + ch * area;
            for i in 0..area {
                let dy = grad_out.data()[off + i].to_f64();
                let xh = cache.xhat.data()[off + i].to_f64();
                d_input.data_mut()[off + i] =
                    E::from_f64(scale * (dy - mean_dy - xh * mean_dy_xhat));
            }
        }
    }

    Ok(BatchNormGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    })
}

/// Element-wise `max(0, x)`.
pub fn relu<E: Scalar>(input: &Tensor<E>) -> Tensor<E> {
    input.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Passes gradients only where the forward input was strictly positive.
pub fn relu_backward<E: Scalar>(input: &Tensor<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "rectifier input shape {:?} does not match gradient shape {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= E::zero() {
            *g = E::zero();
        }
    }
    Ok(out)
}
