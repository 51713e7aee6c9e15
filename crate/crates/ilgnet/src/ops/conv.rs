use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::ops::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// 2-d cross-correlation over NCHW input with an OIHW weight and a per-output
/// -channel bias. Implemented as im2col + matmul per sample; 1x1/stride-1
/// kernels skip the column buffer and multiply the input in place.
pub fn conv2d<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let geo = Geometry::resolve(input, weight, bias, spec)?;
    let (n, _, _, _) = input.dims4()?;
    let mut out = Tensor::zeros(vec![n, geo.co, geo.oh, geo.ow]);
    let per_in = geo.ci * geo.h * geo.w;
    let per_out = geo.co * geo.oh * geo.ow;
    let mut cols = if geo.pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); geo.k() * geo.spatial()]
    };

    for s in 0..n {
        let x = &input.data()[s * per_in..(s + 1) * per_in];
        let y = &mut out.data_mut()[s * per_out..(s + 1) * per_out];
        if geo.pointwise() {
            matmul_acc(weight.data(), x, y, geo.co, geo.k(), geo.spatial());
        } else {
            im2col(x, &geo, &mut cols);
            matmul_acc(weight.data(), &cols, y, geo.co, geo.k(), geo.spatial());
        }
        for o in 0..geo.co {
            let b = bias.data()[o];
            for v in &mut y[o * geo.spatial()..(o + 1) * geo.spatial()] {
                *v = *v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to all three arguments.
#[derive(Debug)]
pub struct Conv2dGrads<E: Scalar> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
    grad_out: &Tensor<E>,
) -> Result<Conv2dGrads<E>> {
    let geo = Geometry::resolve(input, weight, bias, spec)?;
    let (n, _, _, _) = input.dims4()?;
    if grad_out.shape() != [n, geo.co, geo.oh, geo.ow] {
        return Err(Error::shape(format!(
            "output gradient shape {:?} does not match convolution output [{n}, {}, {}, {}]",
            grad_out.shape(),
            geo.co,
            geo.oh,
            geo.ow
        )));
    }

    let mut d_input = Tensor::zeros(input.shape().to_vec());
    let mut d_weight = Tensor::zeros(weight.shape().to_vec());
    let mut d_bias = Tensor::zeros(bias.shape().to_vec());
    let per_in = geo.ci * geo.h * geo.w;
    let per_out = geo.co * geo.oh * geo.ow;
    let pointwise = geo.pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![E::zero(); geo.k() * geo.spatial()]
    };
    let mut d_cols = if pointwise {
        Vec::new()
    } else {
        vec![E::zero(); geo.k() * geo.spatial()]
    };

    for s in 0..n {
        let x = &input.data()[s * per_in..(s + 1) * per_in];
        let gy = &grad_out.data()[s * per_out..(s + 1) * per_out];

        for o in 0..geo.co {
            let mut acc = E::zero();
            for &g in &gy[o * geo.spatial()..(o + 1) * geo.spatial()] {
                acc = acc + g;
            }
            d_bias.data_mut()[o] = d_bias.data_mut()[o] + acc;
        }

        if pointwise {
            matmul_nt_acc(gy, x, d_weight.data_mut(), geo.co, geo.spatial(), geo.k());
            let gx = &mut d_input.data_mut()[s * per_in..(s + 1) * per_in];
            matmul_tn_acc(weight.data(), gy, gx, geo.k(), geo.co, geo.spatial());
        } else {
            im2col(x, &geo, &mut cols);
            matmul_nt_acc(
                gy,
                &cols,
                d_weight.data_mut(),
                geo.co,
                geo.spatial(),
                geo.k(),
            );
            d_cols.fill(E::zero());
            matmul_tn_acc(
                weight.data(),
                gy,
                &mut d_cols,
                geo.k(),
                geo.co,
                geo.spatial(),
            );
            let gx = &mut d_input.data_mut()[s * per_in..(s + 1) * per_in];
            col2im_acc(&d_cols, &geo, gx);
        }
    }

    if sabotage_weight_grad() {
        for v in d_weight.data_mut() {
            *v = -*v;
        }
    }
    Ok(Conv2dGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

/// Test hook: flips the sign of the weight gradient when
/// `ILGNET_SABOTAGE_CONV_BACKWARD` is set, so the gradient checker can
/// demonstrate that it catches a broken backward pass.
fn sabotage_weight_grad() -> bool {
    static FLIP: OnceLock<bool> = OnceLock::new();
    *FLIP.get_or_init(|| std::env::var_os("ILGNET_SABOTAGE_CONV_BACKWARD").is_some())
}

struct Geometry {
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn resolve<E: Scalar>(
        input: &Tensor<E>,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        spec: &ConvSpec,
    ) -> Result<Geometry> {
        spec.validate()?;
        let (_, ci, h, w) = input.dims4()?;
        if ci != spec.in_channels {
            return Err(Error::shape(format!(
                "input has {ci} channels, convolution expects {}",
                spec.in_channels
            )));
        }
        if weight.shape() != spec.weight_shape() {
            return Err(Error::shape(format!(
                "weight shape {:?} does not match spec {:?}",
                weight.shape(),
                spec.weight_shape()
            )));
        }
        if bias.shape() != [spec.out_channels] {
            return Err(Error::shape(format!(
                "bias shape {:?}, expected [{}]",
                bias.shape(),
                spec.out_channels
            )));
        }
        let (oh, ow) = spec.out_size(h, w)?;
        Ok(Geometry {
            ci,
            co: spec.out_channels,
            h,
            w,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.pad.0,
            pw: spec.pad.1,
            oh,
            ow,
        })
    }

    /// Rows of the unrolled column matrix: one per weight element.
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Columns of the unrolled matrix: one per output position.
    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1 stride-1 unpadded kernel: the column matrix equals the input.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Unrolls one sample into `cols[(ci*kh + ki)*kw + kj][oh*ow + ow]`;
/// out-of-bounds taps read as zero.
fn im2col<E: Scalar>(x: &[E], g: &Geometry, cols: &mut [E]) {
    let spatial = g.spatial();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * spatial..][..spatial];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let out_row = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(E::zero());
                        continue;
                    }
                    let in_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            E::zero()
                        } else {
                            in_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto the input layout;
/// overlapping taps accumulate.
fn col2im_acc<E: Scalar>(d_cols: &[E], g: &Geometry, gx: &mut [E]) {
    let spatial = g.spatial();
    for c in 0..g.ci {
        let plane_off = c * g.h * g.w;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &d_cols[((c * g.kh + ki) * g.kw + kj) * spatial..][..spatial];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = plane_off + iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let slot = base + ix as usize;
                            gx[slot] = gx[slot] + row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
