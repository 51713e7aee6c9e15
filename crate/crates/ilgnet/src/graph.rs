//! The classifier network: a reduced-depth inception backbone whose early,
//! middle and final feature maps are pooled, projected and concatenated into
//! one joint local+global descriptor feeding a two-way softmax.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, concat, concat_backward, conv2d,
    conv2d_backward, global_avg_pool, global_avg_pool_backward, linear, linear_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, softmax, softmax_xent, softmax_xent_backward, BnCache,
    MaxPoolCache,
};
use crate::tensor::{xavier_conv, xavier_init, ConvSpec, ParamId, ParamStore, Tensor};

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Channel plan of one inception module: a 1x1 branch, a bottlenecked 3x3
/// branch, a bottlenecked 5x5 branch and a pooled 1x1 projection branch,
/// concatenated along channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InceptionSpec {
    pub conv1: usize,
    pub reduce3: usize,
    pub conv3: usize,
    pub reduce5: usize,
    pub conv5: usize,
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub const fn new(
        conv1: usize,
        reduce3: usize,
        conv3: usize,
        reduce5: usize,
        conv5: usize,
        pool_proj: usize,
    ) -> Self {
        InceptionSpec {
            conv1,
            reduce3,
            conv3,
            reduce5,
            conv5,
            pool_proj,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv1 + self.conv3 + self.conv5 + self.pool_proj
    }

    fn scaled(&self, scale: impl Fn(usize) -> usize) -> InceptionSpec {
        InceptionSpec {
            conv1: scale(self.conv1),
            reduce3: scale(self.reduce3),
            conv3: scale(self.conv3),
            reduce5: scale(self.reduce5),
            conv5: scale(self.conv5),
            pool_proj: scale(self.pool_proj),
        }
    }
}

/// Channel plans of the three modules, giving 256, 480 and 512 output
/// channels at full width.
pub const MODULE_SPECS: [InceptionSpec; 3] = [
    InceptionSpec::new(64, 96, 128, 16, 32, 32),
    InceptionSpec::new(128, 128, 192, 32, 96, 64),
    InceptionSpec::new(192, 96, 208, 16, 48, 64),
];

const STEM_WIDTH: usize = 64;
const STEM_OUT: usize = 192;
const LOCAL_DIM: usize = 256;
const GLOBAL_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full model: inception backbone plus local feature taps.
    IlgnetIncV1Bn,
    /// Backbone alone, classified from the global feature only.
    ThirdGooglenetV1Bn,
    /// Local feature taps kept, inception modules replaced by plain 3x3
    /// convolutions of the same output width.
    IlgnetWithoutInc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::IlgnetIncV1Bn,
        Variant::ThirdGooglenetV1Bn,
        Variant::IlgnetWithoutInc,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::IlgnetIncV1Bn => "ilgnet-inc-v1-bn",
            Variant::ThirdGooglenetV1Bn => "third-googlenet-v1-bn",
            Variant::IlgnetWithoutInc => "ilgnet-without-inc",
        }
    }

    pub fn has_local_taps(self) -> bool {
        !matches!(self, Variant::ThirdGooglenetV1Bn)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ilgnet-inc-v1-bn" | "ilgnet" => Ok(Variant::IlgnetIncV1Bn),
            "third-googlenet-v1-bn" | "third-googlenet" => Ok(Variant::ThirdGooglenetV1Bn),
            "ilgnet-without-inc" => Ok(Variant::IlgnetWithoutInc),
            _ => Err(Error::usage(format!(
                "unknown variant {s:?}; expected ilgnet-inc-v1-bn, third-googlenet-v1-bn or ilgnet-without-inc"
            ))),
        }
    }
}

/// Architecture parameters: which variant to build, a channel width
/// multiplier for desk-scale experiments, and the square input extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub variant: Variant,
    pub width_multiplier: f32,
    pub input_side: usize,
}

impl ArchConfig {
    pub fn new(variant: Variant) -> Self {
        ArchConfig {
            variant,
            width_multiplier: 1.0,
            input_side: 224,
        }
    }

    pub fn with_width(mut self, width_multiplier: f32) -> Self {
        self.width_multiplier = width_multiplier;
        self
    }

    pub fn with_side(mut self, input_side: usize) -> Self {
        self.input_side = input_side;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::invalid_arg(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            )));
        }
        if self.input_side < 24 {
            return Err(Error::invalid_arg(format!(
                "input side {} too small; the three stride-2 pools need at least 24 pixels",
                self.input_side
            )));
        }
        Ok(())
    }

    /// Scales a full-width channel count, never below one channel.
    pub fn scale(&self, channels: usize) -> usize {
        ((channels as f32 * self.width_multiplier).ceil() as usize).max(1)
    }
}

/// Convolution + batch norm + rectifier, the unit every backbone layer is
/// made of. Running statistics live here; learnable tensors live in the
/// parameter store.
#[derive(Debug)]
struct ConvBnRelu {
    spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Tensor<f32>,
    running_var: Tensor<f32>,
}

struct CbrCache {
    input: Tensor<f32>,
    bn: BnCache<f32>,
    pre_relu: Tensor<f32>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvBnRelu> {
        let spec = ConvSpec::square(in_channels, out_channels, kernel, stride, pad);
        let weight = store.register(
            format!("{name}.weight"),
            xavier_conv(&spec, rng.next_u64())?,
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        let gamma = store.register(format!("{name}.gamma"), Tensor::ones(vec![out_channels]));
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(vec![out_channels]));
        Ok(ConvBnRelu {
            spec,
            weight,
            bias,
            gamma,
            beta,
            running_mean: Tensor::zeros(vec![out_channels]),
            running_var: Tensor::ones(vec![out_channels]),
        })
    }

    fn out_channels(&self) -> usize {
        self.spec.out_channels
    }

    fn forward_infer(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let y = conv2d(
            x,
            store.value(self.weight),
            store.value(self.bias),
            &self.spec,
        )?;
        let y = batchnorm_infer(
            &y,
            store.value(self.gamma),
            store.value(self.beta),
            &self.running_mean,
            &self.running_var,
            BN_EPSILON,
        )?;
        Ok(relu(&y))
    }

    fn forward_train(
        &mut self,
        store: &ParamStore<f32>,
        x: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, CbrCache)> {
        let y = conv2d(
            x,
            store.value(self.weight),
            store.value(self.bias),
            &self.spec,
        )?;
        let (y, bn) = batchnorm_train(
            &y,
            store.value(self.gamma),
            store.value(self.beta),
            &mut self.running_mean,
            &mut self.running_var,
            BN_EPSILON,
            BN_MOMENTUM,
        )?;
        let out = relu(&y);
        Ok((
            out,
            CbrCache {
                input: x.clone(),
                bn,
                pre_relu: y,
            },
        ))
    }

    fn backward(
        &self,
        store: &mut ParamStore<f32>,
        cache: &CbrCache,
        grad: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let g = relu_backward(&cache.pre_relu, grad)?;
        let bn = batchnorm_backward(&cache.bn, store.value(self.gamma), &g)?;
        store.get_mut(self.gamma).accumulate_grad(&bn.gamma);
        store.get_mut(self.beta).accumulate_grad(&bn.beta);
        let conv = conv2d_backward(
            &cache.input,
            store.value(self.weight),
            store.value(self.bias),
            &self.spec,
            &bn.input,
        )?;
        store.get_mut(self.weight).accumulate_grad(&conv.weight);
        store.get_mut(self.bias).accumulate_grad(&conv.bias);
        Ok(conv.input)
    }
}

/// One inception module: the branch pool is 3x3 stride 1 pad 1, so every
/// branch preserves the spatial extent and only channels differ.
#[derive(Debug)]
struct InceptionBlock {
    b1: ConvBnRelu,
    b2reduce: ConvBnRelu,
    b2: ConvBnRelu,
    b3reduce: ConvBnRelu,
    b3: ConvBnRelu,
    b4: ConvBnRelu,
}

struct InceptionCache {
    b1: CbrCache,
    b2reduce: CbrCache,
    b2: CbrCache,
    b3reduce: CbrCache,
    b3: CbrCache,
    pool: MaxPoolCache,
    b4: CbrCache,
    extents: [usize; 4],
}

impl InceptionBlock {
    fn new(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        spec: &InceptionSpec,
    ) -> Result<InceptionBlock> {
        Ok(InceptionBlock {
            b1: ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.b1"),
                in_channels,
                spec.conv1,
                1,
                1,
                0,
            )?,
            b2reduce: ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.b2reduce"),
                in_channels,
                spec.reduce3,
                1,
                1,
                0,
            )?,
            b2: ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.b2"),
                spec.reduce3,
                spec.conv3,
                3,
                1,
                1,
            )?,
            b3reduce: ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.b3reduce"),
                in_channels,
                spec.reduce5,
                1,
                1,
                0,
            )?,
            b3: ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.b3"),
                spec.reduce5,
                spec.conv5,
                5,
                1,
                2,
            )?,
            b4: ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.b4"),
                in_channels,
                spec.pool_proj,
                1,
                1,
                0,
            )?,
        })
    }

    fn out_channels(&self) -> usize {
        self.b1.out_channels()
            + self.b2.out_channels()
            + self.b3.out_channels()
            + self.b4.out_channels()
    }

    fn forward_infer(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let y1 = self.b1.forward_infer(store, x)?;
        let y2 = self
            .b2
            .forward_infer(store, &self.b2reduce.forward_infer(store, x)?)?;
        let y3 = self
            .b3
            .forward_infer(store, &self.b3reduce.forward_infer(store, x)?)?;
        let (pooled, _) = maxpool2d(x, (3, 3), (1, 1), (1, 1), false)?;
        let y4 = self.b4.forward_infer(store, &pooled)?;
        concat(&[&y1, &y2, &y3, &y4], 1)
    }

    fn forward_train(
        &mut self,
        store: &ParamStore<f32>,
        x: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, InceptionCache)> {
        let (y1, c1) = self.b1.forward_train(store, x)?;
        let (r2, c2r) = self.b2reduce.forward_train(store, x)?;
        let (y2, c2) = self.b2.forward_train(store, &r2)?;
        let (r3, c3r) = self.b3reduce.forward_train(store, x)?;
        let (y3, c3) = self.b3.forward_train(store, &r3)?;
        let (pooled, pool) = maxpool2d(x, (3, 3), (1, 1), (1, 1), false)?;
        let (y4, c4) = self.b4.forward_train(store, &pooled)?;
        let extents = [y1.shape()[1], y2.shape()[1], y3.shape()[1], y4.shape()[1]];
        let out = concat(&[&y1, &y2, &y3, &y4], 1)?;
        let cache = InceptionCache {
            b1: c1,
            b2reduce: c2r,
            b2: c2,
            b3reduce: c3r,
            b3: c3,
            pool,
            b4: c4,
            extents,
        };
        Ok((out, cache))
    }

    fn backward(
        &self,
        store: &mut ParamStore<f32>,
        cache: &InceptionCache,
        grad: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let parts = concat_backward(grad, &cache.extents, 1)?;
        let mut dx = self.b1.backward(store, &cache.b1, &parts[0])?;
        let d2 = self.b2.backward(store, &cache.b2, &parts[1])?;
        dx.add_assign(&self.b2reduce.backward(store, &cache.b2reduce, &d2)?);
        let d3 = self.b3.backward(store, &cache.b3, &parts[2])?;
        dx.add_assign(&self.b3reduce.backward(store, &cache.b3reduce, &d3)?);
        let d4 = self.b4.backward(store, &cache.b4, &parts[3])?;
        dx.add_assign(&maxpool2d_backward(&cache.pool, &d4)?);
        Ok(dx)
    }
}

/// A backbone stage: an inception module, or its plain-convolution stand-in
/// for the ablated variant.
#[derive(Debug)]
enum Stage {
    Inception(Box<InceptionBlock>),
    Conv(ConvBnRelu),
}

enum StageCache {
    Inception(Box<InceptionCache>),
    Conv(CbrCache),
}

impl Stage {
    fn out_channels(&self) -> usize {
        match self {
            Stage::Inception(b) => b.out_channels(),
            Stage::Conv(c) => c.out_channels(),
        }
    }

    fn forward_infer(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Stage::Inception(b) => b.forward_infer(store, x),
            Stage::Conv(c) => c.forward_infer(store, x),
        }
    }

    fn forward_train(
        &mut self,
        store: &ParamStore<f32>,
        x: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, StageCache)> {
        match self {
            Stage::Inception(b) => {
                let (y, c) = b.forward_train(store, x)?;
                Ok((y, StageCache::Inception(Box::new(c))))
            }
            Stage::Conv(c) => {
                let (y, cc) = c.forward_train(store, x)?;
                Ok((y, StageCache::Conv(cc)))
            }
        }
    }

    fn backward(
        &self,
        store: &mut ParamStore<f32>,
        cache: &StageCache,
        grad: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        match (self, cache) {
            (Stage::Inception(b), StageCache::Inception(c)) => b.backward(store, c, grad),
            (Stage::Conv(l), StageCache::Conv(c)) => l.backward(store, c, grad),
            _ => Err(Error::shape(
                "stage cache does not match stage kind".to_string(),
            )),
        }
    }
}

/// Fully connected projection; the rectifier (for feature projections) is
/// applied by the caller, the classifier head uses raw logits.
#[derive(Debug)]
struct Projection {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Projection {
    fn new(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Projection> {
        let weight = store.register(
            format!("{name}.weight"),
            xavier_init(vec![out_dim, in_dim], in_dim, out_dim, rng.next_u64())?,
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Ok(Projection {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    fn forward(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        linear(x, store.value(self.weight), store.value(self.bias))
    }

    fn backward(
        &self,
        store: &mut ParamStore<f32>,
        input: &Tensor<f32>,
        grad: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let g = linear_backward(input, store.value(self.weight), grad)?;
        store.get_mut(self.weight).accumulate_grad(&g.weight);
        store.get_mut(self.bias).accumulate_grad(&g.bias);
        Ok(g.input)
    }
}

/// Feature tensors captured at the seven probe points of a single image,
/// plus the fraction of positive entries in the joint descriptor.
#[derive(Debug)]
pub struct TapFeatures {
    pub stem: Tensor<f32>,
    pub inception1: Tensor<f32>,
    pub inception2: Tensor<f32>,
    pub inception3: Tensor<f32>,
    pub local1: Tensor<f32>,
    pub local2: Tensor<f32>,
    pub global_feature: Tensor<f32>,
    pub concat: Tensor<f32>,
    pub activation_density: f64,
}

/// One row per counted layer in a [`LayerCountReport`].
#[derive(Debug, Clone)]
pub struct LayerEntry {
    pub name: String,
    pub detail: String,
    pub depth: usize,
}

/// Audit of the assembled graph under the depth convention used throughout:
/// an inception module counts as its longest serial path of two
/// convolutions, batch norms are free, and only backbone pools (the three
/// stride-2 max pools and the final global average) are counted.
#[derive(Debug, Clone)]
pub struct LayerCountReport {
    pub variant: Variant,
    pub parameter_layers: usize,
    pub pooling_layers: usize,
    pub parameter_entries: Vec<LayerEntry>,
    pub pooling_entries: Vec<LayerEntry>,
}

struct InferPass {
    stem: Tensor<f32>,
    inc1: Tensor<f32>,
    inc2: Tensor<f32>,
    inc3: Tensor<f32>,
    local1: Option<Tensor<f32>>,
    local2: Option<Tensor<f32>>,
    global_feature: Tensor<f32>,
    concat: Option<Tensor<f32>>,
    probs: Tensor<f32>,
}

struct TrainCache {
    c1: CbrCache,
    pool1: MaxPoolCache,
    c2: CbrCache,
    c3: CbrCache,
    pool2: MaxPoolCache,
    s1: StageCache,
    s2: StageCache,
    pool3: MaxPoolCache,
    s3: StageCache,
    dims1: (usize, usize),
    dims2: (usize, usize),
    dims3: (usize, usize),
    gap_local1: Option<Tensor<f32>>,
    pre_local1: Option<Tensor<f32>>,
    gap_local2: Option<Tensor<f32>>,
    pre_local2: Option<Tensor<f32>>,
    gap_global: Tensor<f32>,
    pre_global: Option<Tensor<f32>>,
    head_input: Tensor<f32>,
    extents: [usize; 3],
    probs: Tensor<f32>,
    labels: Vec<usize>,
}

/// The assembled classifier.
#[derive(Debug)]
pub struct Network {
    arch: ArchConfig,
    store: ParamStore<f32>,
    stem1: ConvBnRelu,
    stem2: ConvBnRelu,
    stem3: ConvBnRelu,
    inc1: Stage,
    inc2: Stage,
    inc3: Stage,
    local1: Option<Projection>,
    local2: Option<Projection>,
    global_proj: Option<Projection>,
    head: Projection,
    pub iteration: u64,
}

/// Builds a freshly initialized network. Identical `(arch, seed)` pairs
/// produce bit-identical parameters.
pub fn assemble(arch: ArchConfig, seed: u64) -> Result<Network> {
    arch.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = |c: usize| arch.scale(c);

    let w_stem = scale(STEM_WIDTH);
    let w_out = scale(STEM_OUT);
    let stem1 = ConvBnRelu::new(&mut store, &mut rng, "stem.conv1", 3, w_stem, 7, 2, 3)?;
    let stem2 = ConvBnRelu::new(&mut store, &mut rng, "stem.conv2", w_stem, w_stem, 1, 1, 0)?;
    let stem3 = ConvBnRelu::new(&mut store, &mut rng, "stem.conv3", w_stem, w_out, 3, 1, 1)?;

    let stage = |store: &mut ParamStore<f32>,
                 rng: &mut ChaCha8Rng,
                 name: &str,
                 in_channels: usize,
                 spec: &InceptionSpec|
     -> Result<Stage> {
        if arch.variant == Variant::IlgnetWithoutInc {
            let out = arch.scale(spec.out_channels());
            Ok(Stage::Conv(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.conv"),
                in_channels,
                out,
                3,
                1,
                1,
            )?))
        } else {
            Ok(Stage::Inception(Box::new(InceptionBlock::new(
                store,
                rng,
                name,
                in_channels,
                &spec.scaled(scale),
            )?)))
        }
    };

    let inc1 = stage(&mut store, &mut rng, "inc1", w_out, &MODULE_SPECS[0])?;
    let inc2 = stage(
        &mut store,
        &mut rng,
        "inc2",
        inc1.out_channels(),
        &MODULE_SPECS[1],
    )?;
    let inc3 = stage(
        &mut store,
        &mut rng,
        "inc3",
        inc2.out_channels(),
        &MODULE_SPECS[2],
    )?;

    let (local1, local2, global_proj, head) = if arch.variant.has_local_taps() {
        let local_dim = scale(LOCAL_DIM);
        let global_dim = scale(GLOBAL_DIM);
        let l1 = Projection::new(
            &mut store,
            &mut rng,
            "local1.proj",
            inc1.out_channels(),
            local_dim,
        )?;
        let l2 = Projection::new(
            &mut store,
            &mut rng,
            "local2.proj",
            inc2.out_channels(),
            local_dim,
        )?;
        let gp = Projection::new(
            &mut store,
            &mut rng,
            "global.proj",
            inc3.out_channels(),
            global_dim,
        )?;
        let head = Projection::new(
            &mut store,
            &mut rng,
            "head.fc",
            2 * local_dim + global_dim,
            2,
        )?;
        (Some(l1), Some(l2), Some(gp), head)
    } else {
        let head = Projection::new(&mut store, &mut rng, "head.fc", inc3.out_channels(), 2)?;
        (None, None, None, head)
    };

    Ok(Network {
        arch,
        store,
        stem1,
        stem2,
        stem3,
        inc1,
        inc2,
        inc3,
        local1,
        local2,
        global_proj,
        head,
        iteration: 0,
    })
}

/// Kernel, stride, pad, and ceil mode shared by both backbone max-pools.
type PoolSetting = ((usize, usize), (usize, usize), (usize, usize), bool);

const BACKBONE_POOL: PoolSetting = ((3, 3), (2, 2), (0, 0), true);

impl Network {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Length of the joint descriptor the head classifies.
    pub fn descriptor_dim(&self) -> usize {
        self.head.in_dim
    }

    fn check_input(&self, batch: &Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        let side = self.arch.input_side;
        if c != 3 || h != side || w != side {
            return Err(Error::shape(format!(
                "input shape {:?} does not match expected [n, 3, {side}, {side}]",
                batch.shape()
            )));
        }
        Ok(())
    }

    fn forward_infer(&self, batch: &Tensor<f32>) -> Result<InferPass> {
        self.check_input(batch)?;
        let store = &self.store;
        let (k, s, p, ceil) = BACKBONE_POOL;
        let x = self.stem1.forward_infer(store, batch)?;
        let (x, _) = maxpool2d(&x, k, s, p, ceil)?;
        let x = self.stem2.forward_infer(store, &x)?;
        let x = self.stem3.forward_infer(store, &x)?;
        let (stem, _) = maxpool2d(&x, k, s, p, ceil)?;

        let t1 = self.inc1.forward_infer(store, &stem)?;
        let t2 = self.inc2.forward_infer(store, &t1)?;
        let (pooled, _) = maxpool2d(&t2, k, s, p, ceil)?;
        let t3 = self.inc3.forward_infer(store, &pooled)?;
        let gap_final = global_avg_pool(&t3)?;

        if let (Some(l1), Some(l2), Some(gp)) = (&self.local1, &self.local2, &self.global_proj) {
            let v1 = relu(&l1.forward(store, &global_avg_pool(&t1)?)?);
            let v2 = relu(&l2.forward(store, &global_avg_pool(&t2)?)?);
            let v3 = relu(&gp.forward(store, &gap_final)?);
            let joint = concat(&[&v1, &v2, &v3], 1)?;
            let logits = self.head.forward(store, &joint)?;
            let probs = softmax(&logits)?;
            Ok(InferPass {
                stem,
                inc1: t1,
                inc2: t2,
                inc3: t3,
                local1: Some(v1),
                local2: Some(v2),
                global_feature: v3,
                concat: Some(joint),
                probs,
            })
        } else {
            let logits = self.head.forward(store, &gap_final)?;
            let probs = softmax(&logits)?;
            Ok(InferPass {
                stem,
                inc1: t1,
                inc2: t2,
                inc3: t3,
                local1: None,
                local2: None,
                global_feature: gap_final,
                concat: None,
                probs,
            })
        }
    }

    /// Class probabilities for a batch, one `[p_bad, p_good]` row per image.
    pub fn classify(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward_infer(batch)?.probs)
    }

    /// Captures the feature tensors of one image at every probe point.
    /// Available for the two variants that build the joint descriptor.
    pub fn tap_features(&self, image: &Tensor<f32>) -> Result<TapFeatures> {
        if !self.arch.variant.has_local_taps() {
            return Err(Error::invalid_arg(format!(
                "variant {} has no local feature taps",
                self.arch.variant.cli_name()
            )));
        }
        if image.shape().first() != Some(&1) {
            return Err(Error::shape(format!(
                "feature probing takes a single image, got batch of {:?}",
                image.shape().first()
            )));
        }
        let pass = self.forward_infer(image)?;
        let concat = pass
            .concat
            .expect("local-tap variants always build the joint descriptor");
        let positive = concat.data().iter().filter(|&&v| v > 0.0).count();
        let activation_density = positive as f64 / concat.len() as f64;
        Ok(TapFeatures {
            stem: pass.stem,
            inception1: pass.inc1,
            inception2: pass.inc2,
            inception3: pass.inc3,
            local1: pass.local1.expect("local tap 1"),
            local2: pass.local2.expect("local tap 2"),
            global_feature: pass.global_feature,
            concat,
            activation_density,
        })
    }

    /// One training forward/backward pass: runs the batch in training mode
    /// (batch statistics, running-stat updates), accumulates parameter
    /// gradients, and returns the mean loss with the batch probabilities.
    /// The optimizer step is the caller's business.
    pub fn train_batch(
        &mut self,
        batch: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<(f32, Tensor<f32>)> {
        let cache = self.forward_train(batch, labels)?;
        let loss = mean_xent(&cache.probs, labels)?;
        let probs = cache.probs.clone();
        self.backward(&cache)?;
        Ok((loss, probs))
    }

    fn forward_train(&mut self, batch: &Tensor<f32>, labels: &[usize]) -> Result<TrainCache> {
        self.check_input(batch)?;
        let (k, s, p, ceil) = BACKBONE_POOL;
        let (x, c1) = self.stem1.forward_train(&self.store, batch)?;
        let (x, pool1) = maxpool2d(&x, k, s, p, ceil)?;
        let (x, c2) = self.stem2.forward_train(&self.store, &x)?;
        let (x, c3) = self.stem3.forward_train(&self.store, &x)?;
        let (stem, pool2) = maxpool2d(&x, k, s, p, ceil)?;

        let (t1, s1) = self.inc1.forward_train(&self.store, &stem)?;
        let (t2, s2) = self.inc2.forward_train(&self.store, &t1)?;
        let (pooled, pool3) = maxpool2d(&t2, k, s, p, ceil)?;
        let (t3, s3) = self.inc3.forward_train(&self.store, &pooled)?;

        let dims1 = (t1.shape()[2], t1.shape()[3]);
        let dims2 = (t2.shape()[2], t2.shape()[3]);
        let dims3 = (t3.shape()[2], t3.shape()[3]);
        let gap_global = global_avg_pool(&t3)?;

        let cache = if let (Some(l1), Some(l2), Some(gp)) =
            (&self.local1, &self.local2, &self.global_proj)
        {
            let gap1 = global_avg_pool(&t1)?;
            let pre1 = l1.forward(&self.store, &gap1)?;
            let v1 = relu(&pre1);
            let gap2 = global_avg_pool(&t2)?;
            let pre2 = l2.forward(&self.store, &gap2)?;
            let v2 = relu(&pre2);
            let pre3 = gp.forward(&self.store, &gap_global)?;
            let v3 = relu(&pre3);
            let extents = [v1.shape()[1], v2.shape()[1], v3.shape()[1]];
            let joint = concat(&[&v1, &v2, &v3], 1)?;
            let logits = self.head.forward(&self.store, &joint)?;
            let (probs, _) = softmax_xent(&logits, labels)?;
            TrainCache {
                c1,
                pool1,
                c2,
                c3,
                pool2,
                s1,
                s2,
                pool3,
                s3,
                dims1,
                dims2,
                dims3,
                gap_local1: Some(gap1),
                pre_local1: Some(pre1),
                gap_local2: Some(gap2),
                pre_local2: Some(pre2),
                gap_global,
                pre_global: Some(pre3),
                head_input: joint,
                extents,
                probs,
                labels: labels.to_vec(),
            }
        } else {
            let logits = self.head.forward(&self.store, &gap_global)?;
            let (probs, _) = softmax_xent(&logits, labels)?;
            TrainCache {
                c1,
                pool1,
                c2,
                c3,
                pool2,
                s1,
                s2,
                pool3,
                s3,
                dims1,
                dims2,
                dims3,
                gap_local1: None,
                pre_local1: None,
                gap_local2: None,
                pre_local2: None,
                gap_global: gap_global.clone(),
                pre_global: None,
                head_input: gap_global,
                extents: [0; 3],
                probs,
                labels: labels.to_vec(),
            }
        };
        Ok(cache)
    }

    fn backward(&mut self, cache: &TrainCache) -> Result<()> {
        let dlogits = softmax_xent_backward(&cache.probs, &cache.labels)?;
        let d_head = self
            .head
            .backward(&mut self.store, &cache.head_input, &dlogits)?;

        // Gradients arriving at the three stage outputs. Stage 1 and 2 feed
        // both the main chain and a local tap, so their gradients are sums.
        let (mut d_t1, mut d_t2, d_t3);
        if let (Some(l1), Some(l2), Some(gp)) = (&self.local1, &self.local2, &self.global_proj) {
            let parts = concat_backward(&d_head, &cache.extents, 1)?;
            let pre1 = cache.pre_local1.as_ref().expect("local tap cache");
            let d_pre1 = relu_backward(pre1, &parts[0])?;
            let d_gap1 =
                l1.backward(&mut self.store, cache.gap_local1.as_ref().unwrap(), &d_pre1)?;
            d_t1 = global_avg_pool_backward(&d_gap1, cache.dims1.0, cache.dims1.1)?;

            let pre2 = cache.pre_local2.as_ref().expect("local tap cache");
            let d_pre2 = relu_backward(pre2, &parts[1])?;
            let d_gap2 =
                l2.backward(&mut self.store, cache.gap_local2.as_ref().unwrap(), &d_pre2)?;
            d_t2 = global_avg_pool_backward(&d_gap2, cache.dims2.0, cache.dims2.1)?;

            let pre3 = cache.pre_global.as_ref().expect("global tap cache");
            let d_pre3 = relu_backward(pre3, &parts[2])?;
            let d_gap3 = gp.backward(&mut self.store, &cache.gap_global, &d_pre3)?;
            d_t3 = global_avg_pool_backward(&d_gap3, cache.dims3.0, cache.dims3.1)?;
        } else {
            d_t1 = Tensor::zeros(vec![
                cache.probs.shape()[0],
                self.inc1.out_channels(),
                cache.dims1.0,
                cache.dims1.1,
            ]);
            d_t2 = Tensor::zeros(vec![
                cache.probs.shape()[0],
                self.inc2.out_channels(),
                cache.dims2.0,
                cache.dims2.1,
            ]);
            d_t3 = global_avg_pool_backward(&d_head, cache.dims3.0, cache.dims3.1)?;
        }

        let d_pooled = self.inc3.backward(&mut self.store, &cache.s3, &d_t3)?;
        d_t2.add_assign(&maxpool2d_backward(&cache.pool3, &d_pooled)?);
        d_t1.add_assign(&self.inc2.backward(&mut self.store, &cache.s2, &d_t2)?);
        let d_stem = self.inc1.backward(&mut self.store, &cache.s1, &d_t1)?;

        let d = maxpool2d_backward(&cache.pool2, &d_stem)?;
        let d = self.stem3.backward(&mut self.store, &cache.c3, &d)?;
        let d = self.stem2.backward(&mut self.store, &cache.c2, &d)?;
        let d = maxpool2d_backward(&cache.pool1, &d)?;
        self.stem1.backward(&mut self.store, &cache.c1, &d)?;
        Ok(())
    }

    /// Non-learnable state (batch-norm running statistics) in a fixed walk
    /// order; checkpoints serialize these right after the parameters.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (name, layer) in self.bn_layers() {
            out.push((format!("{name}.running_mean"), &layer.running_mean));
            out.push((format!("{name}.running_var"), &layer.running_var));
        }
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out: Vec<(String, &mut Tensor<f32>)> = Vec::new();
        let stages = [
            (&mut self.stem1, "stem.conv1".to_string()),
            (&mut self.stem2, "stem.conv2".to_string()),
            (&mut self.stem3, "stem.conv3".to_string()),
        ];
        for (layer, name) in stages {
            out.push((format!("{name}.running_mean"), &mut layer.running_mean));
            out.push((format!("{name}.running_var"), &mut layer.running_var));
        }
        for (stage, name) in [
            (&mut self.inc1, "inc1"),
            (&mut self.inc2, "inc2"),
            (&mut self.inc3, "inc3"),
        ] {
            match stage {
                Stage::Inception(b) => {
                    for (layer, sub) in [
                        (&mut b.b1, "b1"),
                        (&mut b.b2reduce, "b2reduce"),
                        (&mut b.b2, "b2"),
                        (&mut b.b3reduce, "b3reduce"),
                        (&mut b.b3, "b3"),
                        (&mut b.b4, "b4"),
                    ] {
                        out.push((
                            format!("{name}.{sub}.running_mean"),
                            &mut layer.running_mean,
                        ));
                        out.push((format!("{name}.{sub}.running_var"), &mut layer.running_var));
                    }
                }
                Stage::Conv(c) => {
                    out.push((format!("{name}.conv.running_mean"), &mut c.running_mean));
                    out.push((format!("{name}.conv.running_var"), &mut c.running_var));
                }
            }
        }
        out
    }

    fn bn_layers(&self) -> Vec<(String, &ConvBnRelu)> {
        let mut out: Vec<(String, &ConvBnRelu)> = vec![
            ("stem.conv1".to_string(), &self.stem1),
            ("stem.conv2".to_string(), &self.stem2),
            ("stem.conv3".to_string(), &self.stem3),
        ];
        for (stage, name) in [
            (&self.inc1, "inc1"),
            (&self.inc2, "inc2"),
            (&self.inc3, "inc3"),
        ] {
            match stage {
                Stage::Inception(b) => {
                    for (layer, sub) in [
                        (&b.b1, "b1"),
                        (&b.b2reduce, "b2reduce"),
                        (&b.b2, "b2"),
                        (&b.b3reduce, "b3reduce"),
                        (&b.b3, "b3"),
                        (&b.b4, "b4"),
                    ] {
                        out.push((format!("{name}.{sub}"), layer));
                    }
                }
                Stage::Conv(c) => out.push((format!("{name}.conv"), c)),
            }
        }
        out
    }

    /// Counts layers under the documented convention and itemizes them.
    pub fn count_layers(&self) -> LayerCountReport {
        let mut parameter_entries = Vec::new();
        let conv_entry = |name: &str, spec: &ConvSpec| LayerEntry {
            name: name.to_string(),
            detail: format!(
                "conv {}x{}/{} pad {}, {} -> {} channels",
                spec.kernel.0,
                spec.kernel.1,
                spec.stride.0,
                spec.pad.0,
                spec.in_channels,
                spec.out_channels
            ),
            depth: 1,
        };
        parameter_entries.push(conv_entry("stem.conv1", &self.stem1.spec));
        parameter_entries.push(conv_entry("stem.conv2", &self.stem2.spec));
        parameter_entries.push(conv_entry("stem.conv3", &self.stem3.spec));
        for (stage, name) in [
            (&self.inc1, "inc1"),
            (&self.inc2, "inc2"),
            (&self.inc3, "inc3"),
        ] {
            match stage {
                Stage::Inception(b) => parameter_entries.push(LayerEntry {
                    name: name.to_string(),
                    detail: format!(
                        "inception module, {} output channels; longest branch is two serial convolutions",
                        b.out_channels()
                    ),
                    depth: 2,
                }),
                Stage::Conv(c) => parameter_entries.push(conv_entry(&format!("{name}.conv"), &c.spec)),
            }
        }
        let fc_entry = |name: &str, p: &Projection| LayerEntry {
            name: name.to_string(),
            detail: format!("fully connected, {} -> {}", p.in_dim, p.out_dim),
            depth: 1,
        };
        if let (Some(l1), Some(l2), Some(gp)) = (&self.local1, &self.local2, &self.global_proj) {
            parameter_entries.push(fc_entry("local1.proj", l1));
            parameter_entries.push(fc_entry("local2.proj", l2));
            parameter_entries.push(fc_entry("global.proj", gp));
        }
        parameter_entries.push(fc_entry("head.fc", &self.head));

        let pool_entry = |name: &str, detail: &str| LayerEntry {
            name: name.to_string(),
            detail: detail.to_string(),
            depth: 1,
        };
        let pooling_entries = vec![
            pool_entry("pool1", "max 3x3/2 after stem.conv1"),
            pool_entry("pool2", "max 3x3/2 after stem.conv3"),
            pool_entry("pool3", "max 3x3/2 between modules 2 and 3"),
            pool_entry("pool4", "global average over the final module output"),
        ];

        LayerCountReport {
            variant: self.arch.variant,
            parameter_layers: parameter_entries.iter().map(|e| e.depth).sum(),
            pooling_layers: pooling_entries.len(),
            parameter_entries,
            pooling_entries,
        }
    }
}

/// Mean cross-entropy computed from already-softmaxed probabilities; used to
/// report the loss of a training batch without a second softmax pass. A true
/// class with underflowed probability gives an infinite loss on purpose:
/// divergence must surface, not saturate.
fn mean_xent(probs: &Tensor<f32>, labels: &[usize]) -> Result<f32> {
    let (n, k) = probs.dims2()?;
    let mut loss = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        loss -= (probs.data()[row * k + label] as f64).ln();
    }
    Ok((loss / n as f64) as f32)
}
