//! Encoder-decoder with skip connections.
//!
//! Each level is two 3x3 convolutions with ReLU. The encoder halves the
//! resolution with 2x2 max pooling `depth` times; the decoder upsamples by
//! nearest neighbour, concatenates the matching encoder features and applies
//! another conv block. A 1x1 head produces `K` logits and a channel softmax
//! turns them into probabilities.

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvShape};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::types::{Image, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            base_width: 16,
            depth: 4,
        }
    }
}

impl NetworkSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            in_channels: 1,
            num_classes: cfg.model.num_classes,
            base_width: cfg.model.base_width,
            depth: cfg.model.depth,
        }
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial sizes must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }
}

/// A named parameter tensor, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat parameter list; gradients and optimizer moments share its layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub tensors: Vec<Param>,
}

impl Params {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> usize {
        self.tensors.push(Param { name, shape, data });
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Per-tensor gradients in [`Params`] order.
pub type Grads = Vec<Vec<f32>>;

#[derive(Debug, Clone, Copy)]
struct Conv {
    shape: ConvShape,
    weight: usize,
    bias: usize,
}

impl Conv {
    fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, shape: ConvShape) -> Self {
        let fan_in = (shape.in_channels * shape.kernel * shape.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w: Vec<f32> = (0..shape.weight_len()).map(|_| normal.sample(rng) as f32).collect();
        let weight = params.push(
            format!("{name}.weight"),
            vec![shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
            w,
        );
        let bias = params.push(format!("{name}.bias"), vec![shape.out_channels], vec![0.0; shape.out_channels]);
        Self { shape, weight, bias }
    }

    fn forward(&self, params: &Params, x: &Array4<f32>) -> Array4<f32> {
        layers::conv_forward(
            x.view(),
            &params.tensors[self.weight].data,
            &params.tensors[self.bias].data,
            self.shape,
        )
    }

    fn backward(
        &self,
        params: &Params,
        x: &Array4<f32>,
        dy: &Array4<f32>,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Array4<f32>> {
        let (gw, gb) = two_mut(grads, self.weight, self.bias);
        layers::conv_backward(
            x.view(),
            dy.view(),
            &params.tensors[self.weight].data,
            self.shape,
            gw,
            gb,
            need_input_grad,
        )
    }
}

fn two_mut(v: &mut [Vec<f32>], a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    first: Conv,
    second: Conv,
}

struct BlockCache {
    input: Array4<f32>,
    hidden: Array4<f32>,
    output: Array4<f32>,
}

impl ConvBlock {
    fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            first: Conv::new(params, rng, &format!("{name}.conv1"), ConvShape { in_channels: cin, out_channels: cout, kernel: 3 }),
            second: Conv::new(params, rng, &format!("{name}.conv2"), ConvShape { in_channels: cout, out_channels: cout, kernel: 3 }),
        }
    }

    fn forward(&self, params: &Params, x: &Array4<f32>) -> Array4<f32> {
        let mut h = self.first.forward(params, x);
        layers::relu_inplace(&mut h);
        let mut y = self.second.forward(params, &h);
        layers::relu_inplace(&mut y);
        y
    }

    fn forward_cached(&self, params: &Params, x: Array4<f32>) -> BlockCache {
        let mut hidden = self.first.forward(params, &x);
        layers::relu_inplace(&mut hidden);
        let mut output = self.second.forward(params, &hidden);
        layers::relu_inplace(&mut output);
        BlockCache { input: x, hidden, output }
    }

    fn backward(
        &self,
        params: &Params,
        cache: &BlockCache,
        mut dout: Array4<f32>,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Array4<f32>> {
        layers::relu_backward_inplace(&mut dout, &cache.output);
        let mut dh = self
            .second
            .backward(params, &cache.hidden, &dout, grads, true)
            .expect("hidden gradient");
        layers::relu_backward_inplace(&mut dh, &cache.hidden);
        self.first.backward(params, &cache.input, &dh, grads, need_input_grad)
    }
}

/// Activations kept by [`UNet::forward_train`] for the backward pass.
pub struct ForwardCache {
    encoders: Vec<BlockCache>,
    pool_indices: Vec<Vec<u32>>,
    bottleneck: BlockCache,
    decoders: Vec<BlockCache>,
    head_input: Array4<f32>,
    probs: Array4<f32>,
}

impl ForwardCache {
    pub fn probs(&self) -> &Array4<f32> {
        &self.probs
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    spec: NetworkSpec,
    params: Params,
    encoders: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    /// Ordered from the deepest level up to full resolution.
    decoders: Vec<ConvBlock>,
    head: Conv,
}

impl UNet {
    /// He-initialized network, reproducible from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let mut encoders = Vec::with_capacity(spec.depth);
        let mut cin = spec.in_channels;
        for level in 0..spec.depth {
            encoders.push(ConvBlock::new(&mut params, &mut rng, &format!("enc{level}"), cin, spec.width(level)));
            cin = spec.width(level);
        }
        let bottleneck = ConvBlock::new(&mut params, &mut rng, "bottleneck", cin, spec.width(spec.depth));
        let mut decoders = Vec::with_capacity(spec.depth);
        for level in (0..spec.depth).rev() {
            let cin = spec.width(level + 1) + spec.width(level);
            decoders.push(ConvBlock::new(&mut params, &mut rng, &format!("dec{level}"), cin, spec.width(level)));
        }
        let head = Conv::new(
            &mut params,
            &mut rng,
            "head",
            ConvShape { in_channels: spec.width(0), out_channels: spec.num_classes, kernel: 1 },
        );
        Self { spec, params, encoders, bottleneck, decoders, head }
    }

    /// Rebuilds the architecture for `spec` and installs `params`, checking
    /// names and shapes.
    pub fn from_params(spec: NetworkSpec, params: Params) -> Result<Self> {
        let mut net = Self::new(spec, 0);
        if params.tensors.len() != net.params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                net.params.tensors.len(),
                params.tensors.len()
            )));
        }
        for (want, got) in net.params.tensors.iter().zip(&params.tensors) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let s = self.spec.stride();
        if c != self.spec.in_channels || h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "network input {c}x{h}x{w} needs {} channel(s) and sides divisible by {s}",
                self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Inference: `N x 1 x H x W` images to `N x K x H x W` probabilities.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x.clone();
        for enc in &self.encoders {
            let y = enc.forward(p, &h);
            h = layers::max_pool2(&y).0;
            skips.push(y);
        }
        h = self.bottleneck.forward(p, &h);
        for (dec, skip) in self.decoders.iter().zip(skips.iter().rev()) {
            let up = layers::upsample2(&h);
            h = dec.forward(p, &layers::concat_channels(&up, skip));
        }
        Ok(layers::softmax_channels(&self.head.forward(p, &h)))
    }

    pub fn forward_train(&self, x: &Array4<f32>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let p = &self.params;
        let mut encoders = Vec::with_capacity(self.spec.depth);
        let mut pool_indices = Vec::with_capacity(self.spec.depth);
        let mut h = x.clone();
        for enc in &self.encoders {
            let cache = enc.forward_cached(p, h);
            let (pooled, idx) = layers::max_pool2(&cache.output);
            encoders.push(cache);
            pool_indices.push(idx);
            h = pooled;
        }
        let bottleneck = self.bottleneck.forward_cached(p, h);
        let mut h = bottleneck.output.clone();
        let mut decoders = Vec::with_capacity(self.spec.depth);
        for (dec, skip) in self.decoders.iter().zip(encoders.iter().rev()) {
            let up = layers::upsample2(&h);
            let cache = dec.forward_cached(p, layers::concat_channels(&up, &skip.output));
            h = cache.output.clone();
            decoders.push(cache);
        }
        let probs = layers::softmax_channels(&self.head.forward(p, &h));
        Ok(ForwardCache { encoders, pool_indices, bottleneck, decoders, head_input: h, probs })
    }

    /// Parameter gradients given `d loss / d probs`.
    pub fn backward(&self, cache: &ForwardCache, dprobs: &Array4<f32>) -> Grads {
        let p = &self.params;
        let mut grads = p.zeros_like();
        let dlogits = layers::softmax_backward(&cache.probs, dprobs);
        let mut dh = self
            .head
            .backward(p, &cache.head_input, &dlogits, &mut grads, true)
            .expect("head input gradient");
        let mut skip_grads: Vec<Option<Array4<f32>>> = (0..self.spec.depth).map(|_| None).collect();
        for (level, (dec, dcache)) in self.decoders.iter().zip(&cache.decoders).rev().enumerate() {
            let dcat = dec.backward(p, dcache, dh, &mut grads, true).expect("decoder input gradient");
            let (dup, dskip) = layers::split_channels(&dcat, self.spec.width(level + 1));
            skip_grads[level] = Some(dskip);
            dh = layers::upsample2_backward(&dup);
        }
        dh = self
            .bottleneck
            .backward(p, &cache.bottleneck, dh, &mut grads, true)
            .expect("bottleneck input gradient");
        for level in (0..self.spec.depth).rev() {
            let enc_cache = &cache.encoders[level];
            let mut dout = layers::max_pool2_backward(&dh, &cache.pool_indices[level], enc_cache.output.dim());
            if let Some(ds) = skip_grads[level].take() {
                dout += &ds;
            }
            let need = level > 0;
            match self.encoders[level].backward(p, enc_cache, dout, &mut grads, need) {
                Some(d) => dh = d,
                None => break,
            }
        }
        grads
    }

    /// Runs a list of images as one batch.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<ProbMap>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch = stack_images(images)?;
        let probs = self.forward(&batch)?;
        Ok(unstack_probs(probs))
    }
}

/// `N x 1 x H x W` batch from equally sized images.
pub fn stack_images(images: &[Image]) -> Result<Array4<f32>> {
    let (h, w) = images[0].dims();
    let mut batch = Array4::<f32>::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dims() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {:?} images",
                img.dims()
            )));
        }
        batch.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(img.pixels());
    }
    Ok(batch)
}

pub fn unstack_probs(probs: Array4<f32>) -> Vec<ProbMap> {
    probs
        .outer_iter()
        .map(|p| ProbMap::from_softmax(p.to_owned()))
        .collect()
}

/// Copies one sample out of a batch.
pub fn sample(batch: &Array4<f32>, index: usize) -> Array3<f32> {
    batch.index_axis(Axis(0), index).to_owned()
}
