use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output extent of a pooling window; `ceil` rounds partial windows up the
/// way the backbone pools do, `floor` drops them.
pub fn pool_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ceil: bool,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid_arg(
            "kernel and stride must be positive".to_string(),
        ));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "input extent {input} with padding {pad} is smaller than pooling kernel {kernel}"
        )));
    }
    let span = padded - kernel;
    let mut out = if ceil {
        span.div_ceil(stride) + 1
    } else {
        span / stride + 1
    };
    // Rounding up must not create a window that starts past the padded end
    // of the input; drop it so every window covers at least one element.
    if ceil && out > 1 && (out - 1) * stride >= input + pad {
        out -= 1;
    }
    Ok(out)
}

/// Records, for each output element, the flat input index of the maximum it
/// selected. Padding never wins: windows are clamped to real elements.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling over NCHW maps. Ties go to the lowest flat index, i.e. the
/// top-left-most element of the window, which keeps the backward pass
/// deterministic on plateaus.
pub fn maxpool2d<E: Scalar>(
    input: &Tensor<E>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    ceil: bool,
) -> Result<(Tensor<E>, MaxPoolCache)> {
    let (n, c, h, w) = input.dims4()?;
    let oh = pool_out_size(h, kernel.0, stride.0, pad.0, ceil)?;
    let ow = pool_out_size(w, kernel.1, stride.1, pad.1, ceil)?;
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let data = input.data();
    let out_data = out.data_mut();

    let mut slot = 0;
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
                if ys >= ye || xs >= xe {
                    return Err(Error::shape(format!(
                        "pooling window at ({oy}, {ox}) covers no input elements"
                    )));
                }
                let mut best_idx = base + ys * w + xs;
                let mut best = data[best_idx];
                for y in ys..ye {
                    let row = base + y * w;
                    for x in xs..xe {
                        let v = data[row + x];
                        if v > best {
                            best = v;
                            best_idx = row + x;
                        }
                    }
                }
                out_data[slot] = best;
                argmax[slot] = best_idx;
                slot += 1;
            }
        }
    }
    Ok((
        out,
        MaxPoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient to the input element that won its window.
pub fn maxpool2d_backward<E: Scalar>(
    cache: &MaxPoolCache,
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::shape(format!(
            "output gradient has {} elements, pooling cache expects {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let mut d_input = Tensor::zeros(cache.input_shape.clone());
    let gx = d_input.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        gx[idx] = gx[idx] + g;
    }
    Ok(d_input)
}

/// Mean over each spatial map: NCHW -> NC.
pub fn global_avg_pool<E: Scalar>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = input.dims4()?;
    let area = h * w;
    let mut out = Tensor::zeros(vec![n, c]);
    for plane in 0..n * c {
        let window = &input.data()[plane * area..(plane + 1) * area];
        let sum: f64 = window.iter().map(|&v| v.to_f64()).sum();
        out.data_mut()[plane] = E::from_f64(sum / area as f64);
    }
    Ok(out)
}

/// Spreads each channel gradient uniformly over the spatial map it averaged.
pub fn global_avg_pool_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    h: usize,
    w: usize,
) -> Result<Tensor<E>> {
    let (n, c) = grad_out.dims2()?;
    let area = h * w;
    if area == 0 {
        return Err(Error::shape("spatial extents must be positive".to_string()));
    }
    let scale = E::from_f64(1.0 / area as f64);
    let mut d_input = Tensor::zeros(vec![n, c, h, w]);
    for plane in 0..n * c {
        let g = grad_out.data()[plane] * scale;
        d_input.data_mut()[plane * area..(plane + 1) * area].fill(g);
    }
    Ok(d_input)
}
