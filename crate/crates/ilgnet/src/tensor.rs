use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Element type for tensors. Networks run in `f32`; the gradient checker
/// instantiates the same operators with `f64` so truncation error does not
/// drown out the finite-difference signal.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. The shape is immutable after construction and
/// every extent is at least 1, so `data.len()` always equals the product of
/// the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let len = checked_volume(&shape)?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on a zero extent; shapes built by the library itself are
    /// always validated before they get here.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let len = checked_volume(&shape).expect("invalid tensor shape");
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar_like(&self, value: E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![value; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Interprets the tensor as batched feature maps.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected rank-4 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as a batch of feature vectors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(Error::shape(format!(
                "expected rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise accumulate; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
    }

    pub fn fill(&mut self, value: E) {
        self.data.fill(value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts element-wise through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

fn checked_volume(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape(
            "tensor shape must have at least one axis".to_string(),
        ));
    }
    let mut len = 1usize;
    for &extent in shape {
        if extent == 0 {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        len = len
            .checked_mul(extent)
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(len)
}

/// A learnable tensor together with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Parameter<E: Scalar = f32> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub momentum: Tensor<E>,
    pub frozen: bool,
}

impl<E: Scalar> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let grad = value.scalar_like(E::zero());
        let momentum = value.scalar_like(E::zero());
        Parameter {
            name: name.into(),
            value,
            grad,
            momentum,
            frozen: false,
        }
    }

    pub fn accumulate_grad(&mut self, grad: &Tensor<E>) {
        self.grad.add_assign(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad.fill(E::zero());
    }
}

/// Handle into a [`ParamStore`]; stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Registry of all parameters of a network, in registration order. The
/// order is load-bearing: checkpoints serialize parameters by walking the
/// store front to back.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Scalar = f32> {
    params: Vec<Parameter<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<E>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<E>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }
}

/// Geometry of a 2-d convolution: channel counts, kernel extent, stride and
/// zero padding, each as (height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvSpec {
    /// Square kernel/stride/padding, the only flavor the network uses.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Output extent of `floor((in + 2*pad - kernel)/stride) + 1`, with an
    /// error instead of a zero or negative extent.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_extent(h, self.kernel.0, self.stride.0, self.pad.0)?;
        let ow = conv_extent(w, self.kernel.1, self.stride.1, self.pad.1)?;
        Ok((oh, ow))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid_arg(
                "convolution needs at least one channel".to_string(),
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid_arg(
                "kernel and stride extents must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "input extent {input} with padding {pad} is smaller than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Uniform Xavier/Glorot initialization on `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`, drawn from a seeded ChaCha8 stream so
/// identical seeds give identical tensors on every platform.
pub fn xavier_init<E: Scalar>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Result<Tensor<E>> {
    let shape = shape.into();
    let len = checked_volume(&shape)?;
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid_arg(
            "xavier fans must be positive".to_string(),
        ));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..len)
        .map(|_| E::from_f64(rng.random_range(-a..=a)))
        .collect();
    Ok(Tensor { shape, data })
}

/// Xavier initialization for a convolution weight; fans count the full
/// receptive field (`in*kh*kw` and `out*kh*kw`).
pub fn xavier_conv<E: Scalar>(spec: &ConvSpec, seed: u64) -> Result<Tensor<E>> {
    spec.validate()?;
    let (kh, kw) = spec.kernel;
    xavier_init(
        spec.weight_shape().to_vec(),
        spec.in_channels * kh * kw,
        spec.out_channels * kh * kw,
        seed,
    )
}
