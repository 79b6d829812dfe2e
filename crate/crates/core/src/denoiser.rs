//! Dual-pathway conditional denoiser.
//!
//! One UNet trunk consumes `concat(image channels, mask channels)` plus a timestep
//! embedding. Two 1x1 heads read the trunk output:
//!
//! * the mask head turns `(clean image, noisy mask, t)` into per-class mask logits;
//! * the noise head turns `(noisy image, clean mask, t)` into a prediction of the
//!   noise that was added to the image.
//!
//! The timestep goes through a sinusoidal encoding and a two-layer perceptron; every
//! trunk block projects the result to a per-channel bias added after its first norm.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::schedule::Timestep;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub num_classes: usize,
    /// Channels of the first resolution level; each level below doubles it.
    pub base_width: usize,
    /// Number of 2x downsampling steps.
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            num_classes: 2,
            base_width: 8,
            depth: 3,
            time_embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(String::from(msg)));
        if self.image_channels == 0 {
            return bad("image_channels must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.base_width == 0 || self.depth == 0 {
            return bad("base_width and depth must be positive");
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be a positive even number");
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn trunk_input_channels(&self) -> usize {
        self.image_channels + self.num_classes
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Named trainable arrays, in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, checking names and shapes against the current layout.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let idx = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
            self.tensors[idx].ensure_same_shape(&tensor)?;
            self.tensors[idx] = tensor;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LinearIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIdx {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIdx {
    conv1: ConvIdx,
    norm1: NormIdx,
    time: LinearIdx,
    conv2: ConvIdx,
    norm2: NormIdx,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    time_fc1: LinearIdx,
    time_fc2: LinearIdx,
    down: Vec<BlockIdx>,
    middle: BlockIdx,
    up: Vec<BlockIdx>,
    mask_head: ConvIdx,
    noise_head: ConvIdx,
}

fn norm_groups(channels: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

struct Builder<'a, T, R: ?Sized> {
    params: Parameters<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(std * self.rng.sample::<f64, _>(StandardNormal)))
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> LinearIdx {
        let w = self.normal(&[fout, fin], (1.0 / fin as f64).sqrt());
        LinearIdx {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, gain: f64) -> ConvIdx {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(&[cout, cin, k, k], (gain / fan_in).sqrt());
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvIdx { weight, bias }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormIdx {
        NormIdx {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[c])),
            groups: norm_groups(c),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> BlockIdx {
        BlockIdx {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false, 2.0),
            norm1: self.norm(&format!("{name}.norm1"), cout),
            time: self.linear(&format!("{name}.time"), temb, cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false, 2.0),
            norm2: self.norm(&format!("{name}.norm2"), cout),
        }
    }
}

/// Trainable leaves of one model registered in a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Parameter gradients in registration order; parameters off the loss path get zeros.
    pub fn gradients<T: Scalar>(&self, graph: &Graph<T>, grads: &crate::graph::Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualPathwayDenoiser<T> {
    config: DenoiserConfig,
    params: Parameters<T>,
    layout: Layout,
}

/// Sinusoidal encoding of integer timesteps, `[batch, dim]`.
pub fn timestep_encoding<T: Scalar>(t: &[Timestep], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len(), dim]);
    let d = out.data_mut();
    for (b, step) in t.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let arg = step.0 as f64 * freq;
            d[b * dim + k] = T::from_f64(arg.sin());
            d[b * dim + half + k] = T::from_f64(arg.cos());
        }
    }
    out
}

impl<T: Scalar> DualPathwayDenoiser<T> {
    /// Fan-in scaled Gaussian weights, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Parameters::new(),
            rng,
        };
        let temb = config.time_embed_dim;
        let time_fc1 = b.linear("time.fc1", temb, temb);
        let time_fc2 = b.linear("time.fc2", temb, temb);
        let mut down = Vec::with_capacity(config.depth);
        let mut cin = config.trunk_input_channels();
        for level in 0..config.depth {
            let cout = config.width(level);
            down.push(b.block(&format!("down{level}"), cin, cout, temb));
            cin = cout;
        }
        let middle = b.block("middle", cin, config.width(config.depth), temb);
        let mut up = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let cin = config.width(level + 1) + config.width(level);
            up.push(b.block(&format!("up{level}"), cin, config.width(level), temb));
        }
        let w0 = config.width(0);
        let mask_head = b.conv("mask_head", w0, config.num_classes, 1, true, 1.0);
        let noise_head = b.conv("noise_head", w0, config.image_channels, 1, true, 1.0);
        Ok(Self {
            config,
            params: b.params,
            layout: Layout {
                time_fc1,
                time_fc2,
                down,
                middle,
                up,
                mask_head,
                noise_head,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn parameters(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> DualPathwayDenoiser<U> {
        DualPathwayDenoiser {
            config: self.config.clone(),
            params: Parameters {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
            layout: self.layout.clone(),
        }
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.params.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant, for gradient-free evaluation.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.params.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    fn check_input(&self, g: &Graph<T>, primary: Var, secondary: Var, t: &[Timestep], secondary_channels: usize) -> Result<()> {
        let (b, c, h, w) = g.value(primary).dims4()?;
        let (b2, c2, h2, w2) = g.value(secondary).dims4()?;
        if c != self.config.image_channels || c2 != secondary_channels || b != b2 || h != h2 || w != w2 {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.config.image_channels, h, w, secondary_channels],
                found: vec![b2, c, h2, w2, c2],
            });
        }
        if t.len() != b {
            return Err(Error::ShapeMismatch {
                expected: vec![b],
                found: vec![t.len()],
            });
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::SpatialSize {
                height: h,
                width: w,
                divisor: div,
            });
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, idx: &LinearIdx) -> Result<Var> {
        g.linear(x, p.vars[idx.weight], p.vars[idx.bias])
    }

    fn conv(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, idx: &ConvIdx) -> Result<Var> {
        g.conv2d(x, p.vars[idx.weight], idx.bias.map(|b| p.vars[b]))
    }

    fn norm(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, idx: &NormIdx) -> Result<Var> {
        g.group_norm(x, p.vars[idx.gamma], p.vars[idx.beta], idx.groups)
    }

    fn block(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, temb: Var, idx: &BlockIdx) -> Result<Var> {
        let h = self.conv(g, p, x, &idx.conv1)?;
        let h = self.norm(g, p, h, &idx.norm1)?;
        let tb = self.linear(g, p, temb, &idx.time)?;
        let h = g.add_channel_bias(h, tb)?;
        let h = g.silu(h);
        let h = self.conv(g, p, h, &idx.conv2)?;
        let h = self.norm(g, p, h, &idx.norm2)?;
        Ok(g.silu(h))
    }

    fn trunk(&self, g: &mut Graph<T>, p: &BoundParams, input: Var, t: &[Timestep]) -> Result<Var> {
        let enc = g.constant(timestep_encoding(t, self.config.time_embed_dim));
        let h = self.linear(g, p, enc, &self.layout.time_fc1)?;
        let h = g.silu(h);
        let h = self.linear(g, p, h, &self.layout.time_fc2)?;
        let temb = g.silu(h);

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for blk in &self.layout.down {
            x = self.block(g, p, x, temb, blk)?;
            skips.push(x);
            x = g.avg_pool2(x)?;
        }
        x = self.block(g, p, x, temb, &self.layout.middle)?;
        for blk in &self.layout.up {
            let skip = skips.pop().expect("one skip per level");
            x = g.upsample2(x)?;
            x = g.concat(x, skip)?;
            x = self.block(g, p, x, temb, blk)?;
        }
        Ok(x)
    }

    /// Mask logits `[b, classes, h, w]` from a clean image `[b, image_channels, h, w]`
    /// and a noisy mask `[b, classes, h, w]`.
    pub fn mask_pathway(&self, g: &mut Graph<T>, p: &BoundParams, image: Var, noisy_mask: Var, t: &[Timestep]) -> Result<Var> {
        self.check_input(g, image, noisy_mask, t, self.config.num_classes)?;
        let input = g.concat(image, noisy_mask)?;
        let h = self.trunk(g, p, input, t)?;
        self.conv(g, p, h, &self.layout.mask_head)
    }

    /// Predicted noise `[b, image_channels, h, w]` from a noisy image and a mask in
    /// conditioning form (values in `[-1, 1]`).
    pub fn image_pathway(&self, g: &mut Graph<T>, p: &BoundParams, noisy_image: Var, mask: Var, t: &[Timestep]) -> Result<Var> {
        self.check_input(g, noisy_image, mask, t, self.config.num_classes)?;
        let input = g.concat(noisy_image, mask)?;
        let h = self.trunk(g, p, input, t)?;
        self.conv(g, p, h, &self.layout.noise_head)
    }

    /// Gradient-free mask pathway on plain tensors.
    pub fn forward_mask_pathway(&self, image: &Tensor<T>, noisy_mask: &Tensor<T>, t: &[Timestep]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let i = g.constant(image.clone());
        let m = g.constant(noisy_mask.clone());
        let out = self.mask_pathway(&mut g, &p, i, m, t)?;
        Ok(g.value(out).clone())
    }

    /// Gradient-free image pathway on plain tensors.
    pub fn forward_image_pathway(&self, noisy_image: &Tensor<T>, mask: &Tensor<T>, t: &[Timestep]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let i = g.constant(noisy_image.clone());
        let m = g.constant(mask.clone());
        let out = self.image_pathway(&mut g, &p, i, m, t)?;
        Ok(g.value(out).clone())
    }
}

/// Numeric form of label maps fed to the network: one-hot rescaled to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskEncoding {
    pub num_classes: usize,
}

impl MaskEncoding {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes }
    }

    /// `[h*w]` labels -> `[classes, h, w]` values `2 * onehot - 1`.
    pub fn encode<T: Scalar>(&self, labels: &[u8], height: usize, width: usize) -> Result<Tensor<T>> {
        let hw = height * width;
        if labels.len() != hw {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                found: vec![labels.len()],
            });
        }
        let mut out = Tensor::full(&[self.num_classes, height, width], -T::one());
        let d = out.data_mut();
        for (p, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    value: l,
                    num_classes: self.num_classes,
                });
            }
            d[l * hw + p] = T::one();
        }
        Ok(out)
    }

    /// Channel argmax of `[classes, ...]` scores; ties resolve to the lowest class.
    pub fn decode<T: Scalar>(&self, scores: &Tensor<T>) -> Vec<u8> {
        argmax_channels(scores.data(), self.num_classes)
    }
}

/// Channel argmax of one `[classes, n]` block.
pub fn argmax_channels<T: Scalar>(scores: &[T], classes: usize) -> Vec<u8> {
    let n = scores.len() / classes;
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if scores[c * n + p] > scores[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Channel argmax of batched `[b, classes, h, w]` scores, flattened to `[b*h*w]` targets.
pub fn argmax_targets<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let b = scores.dim(0);
    let classes = scores.dim(1);
    (0..b)
        .flat_map(|i| argmax_channels(scores.batch_item(i), classes))
        .map(usize::from)
        .collect()
}

/// Softmax probabilities rescaled to the `[-1, 1]` conditioning range, kept on the graph.
pub fn soft_conditioning<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let probs = g.softmax_channels(logits)?;
    Ok(g.affine(probs, T::from_f64(2.0), -T::one()))
}
