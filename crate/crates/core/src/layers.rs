//! Neural building blocks: width-3 convolution, pair max-pooling, dense
//! layers, inverted dropout, binary cross-entropy and seeded initialisers.
//!
//! The free functions here evaluate one record outside any graph; the
//! `add_*` helpers append the same computation to a [`Graph`] for training.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PROB_CLAMP};
use crate::kernels::{self, KERNEL_WIDTH};
use crate::tensor::{Element, Tensor};

/// Filter counts of the three convolution stages.
pub const CONV_CHANNELS: [usize; 3] = [64, 128, 256];
/// Hidden widths of the dense block.
pub const HIDDEN_UNITS: [usize; 2] = [128, 64];
/// Default dropout rate after each hidden dense layer.
pub const DEFAULT_DROPOUT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1DLayer<T = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Conv1DLayer<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = kernels.shape();
        if s.len() != 3 || s[2] != KERNEL_WIDTH || bias.shape() != [s[0]] {
            return Err(Error::shape(
                "conv1d layer",
                format!("kernels {:?}, bias {:?}", s, bias.shape()),
            ));
        }
        Ok(Conv1DLayer { kernels, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::shape(
                "dense layer",
                format!("weights {:?}, bias {:?}", s, bias.shape()),
            ));
        }
        Ok(DenseLayer { weights, bias })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Training,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
    pub mode: DropoutMode,
}

impl DropoutSpec {
    pub fn new(rate: f64, mode: DropoutMode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(DropoutSpec { rate, mode })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// Same-padded cross-correlation of a `[c_in, len]` record.
pub fn conv1d<T: Element>(input: &Tensor<T>, layer: &Conv1DLayer<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 2 || s[0] != layer.in_channels() {
        return Err(Error::shape(
            "conv1d",
            format!("input {:?} vs {} input channels", s, layer.in_channels()),
        ));
    }
    let (cin, len, cout) = (s[0], s[1], layer.out_channels());
    let out = kernels::conv1d(
        input.data(),
        layer.kernels.data(),
        layer.bias.data(),
        1,
        cin,
        cout,
        len,
    );
    Tensor::new(&[cout, len], out)
}

/// Width-2, stride-2 max pooling of a `[channels, len]` record.
pub fn maxpool1d<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::shape(
            "maxpool1d",
            format!("need [channels, len >= 2], got {s:?}"),
        ));
    }
    let (out, _) = kernels::maxpool2(input.data(), s[0], s[1]);
    Tensor::new(&[s[0], s[1] / 2], out)
}

/// `y = Wᵀx + b`.
pub fn dense<T: Element>(x: &Tensor<T>, layer: &DenseLayer<T>) -> Result<Tensor<T>> {
    let (k, m) = (layer.weights.shape()[0], layer.weights.shape()[1]);
    if x.shape() != [k] {
        return Err(Error::shape(
            "dense",
            format!("input {:?} vs weights {:?}", x.shape(), [k, m]),
        ));
    }
    let mut y = kernels::matmul(x.data(), layer.weights.data(), 1, k, m, false);
    for (v, &b) in y.iter_mut().zip(layer.bias.data()) {
        *v += b;
    }
    Ok(Tensor::vector(y))
}

/// Inverted dropout: survivors are scaled by `1 / (1 − rate)` so that
/// inference is the identity.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    spec: DropoutSpec,
    rng: &mut R,
) -> Tensor<T> {
    if spec.mode == DropoutMode::Inference || spec.rate == 0.0 {
        return x.clone();
    }
    let keep = T::lit(1.0 / (1.0 - spec.rate));
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if rng.gen::<f64>() >= spec.rate {
                v * keep
            } else {
                T::ZERO
            }
        })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Binary cross-entropy of one probability, clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_single(p: f64, label: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = f64::from(label);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Batch-mean binary cross-entropy.
pub fn bce(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(
            "bce",
            format!("{} probabilities, {} labels", probs.len(), labels.len()),
        ));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_single(p, y))
        .sum::<f64>()
        / probs.len() as f64)
}

pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn glorot_uniform_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded parameter initialiser. Tensors are drawn in call order, so a fixed
/// construction order plus a fixed seed gives bitwise-identical parameters.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
            .collect();
        Tensor::new(shape, data).expect("shape and data length agree")
    }

    /// For layers followed by ReLU.
    pub fn he_uniform<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, he_uniform_bound(fan_in))
    }

    pub fn glorot_uniform<T: Element>(
        &mut self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        self.uniform(shape, glorot_uniform_bound(fan_in, fan_out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Affine output, initialised like a sigmoid layer.
    Logit,
}

/// Appends `act(x·W + b)`. ReLU layers get He initialisation, the rest Glorot.
pub fn add_dense<T: Element>(
    g: &mut Graph<T>,
    init: &mut Initializer,
    x: NodeId,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    act: Activation,
) -> Result<NodeId> {
    let weights = match act {
        Activation::Relu => init.he_uniform(&[in_dim, out_dim], in_dim),
        Activation::Sigmoid | Activation::Logit => {
            init.glorot_uniform(&[in_dim, out_dim], in_dim, out_dim)
        }
    };
    let w = g.param(&format!("{name}.weight"), weights)?;
    let b = g.param(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
    let h = g.matmul(x, w, false)?;
    let h = g.add(h, b)?;
    let y = match act {
        Activation::Relu => g.relu(h)?,
        Activation::Sigmoid => g.sigmoid(h)?,
        Activation::Logit => h,
    };
    Ok(g.label(y, name))
}

/// Appends the three-stage `conv → ReLU → maxpool` block to a batched
/// `[1, len]` input and flattens channel-major. Returns the flat node and its
/// width `256 · ⌊⌊⌊len/2⌋/2⌋/2⌋`.
pub fn add_conv_block<T: Element>(
    g: &mut Graph<T>,
    init: &mut Initializer,
    x: NodeId,
    prefix: &str,
    len: usize,
) -> Result<(NodeId, usize)> {
    if len < 8 {
        return Err(Error::InvalidSpec(format!(
            "input dimension {len} cannot survive three pooling stages (need >= 8)"
        )));
    }
    let mut h = g.reshape(x, &[1, len])?;
    let mut cin = 1;
    let mut l = len;
    for (stage, &cout) in CONV_CHANNELS.iter().enumerate() {
        let name = format!("{prefix}conv{}", stage + 1);
        let k = g.param(
            &format!("{name}.kernel"),
            init.he_uniform(&[cout, cin, KERNEL_WIDTH], cin * KERNEL_WIDTH),
        )?;
        let b = g.param(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        h = g.conv1d(h, k, b)?;
        h = g.relu(h)?;
        h = g.maxpool1d(h)?;
        g.label(h, name);
        cin = cout;
        l /= 2;
    }
    let flat = cin * l;
    let h = g.reshape(h, &[flat])?;
    Ok((h, flat))
}

/// Flattened width of the conv block for an input of length `len`.
pub fn conv_block_output_dim(len: usize) -> usize {
    CONV_CHANNELS[2] * (len / 2 / 2 / 2)
}
