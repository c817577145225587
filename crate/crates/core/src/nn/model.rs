//! The block CNN: every block is
//!
//! ```text
//! conv(2 -> W) + BN + ReLU
//! (conv(W -> W) + BN + ReLU) x (4 * D)
//! conv(W -> 2)
//! ```
//!
//! with `W = 64` filters of size 3x3 throughout. Blocks are chained; with
//! `residual_skip` each block adds its input to its output.

use crate::error::{Error, Result};
use crate::rng::ComplexGaussian;

use super::batchnorm::BatchNorm;
use super::conv::{Conv2d, KERNEL};
use super::relu::{relu_backward, relu_forward};
use super::{Param, Scalar, Tensor4};

pub const IO_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelArchitecture {
    pub num_blocks: usize,
    /// D: how many times the group of middle layers is repeated per block.
    pub middle_repeats: usize,
    pub middle_per_repeat: usize,
    pub width: usize,
    pub residual_skip: bool,
}

impl ModelArchitecture {
    /// Three plain blocks with four middle layers each.
    pub fn proposed() -> Self {
        Self {
            num_blocks: 3,
            middle_repeats: 1,
            middle_per_repeat: 4,
            width: 64,
            residual_skip: false,
        }
    }

    /// Three residual blocks whose middle group is repeated `depth` times.
    pub fn drn_style(depth: usize) -> Self {
        Self {
            middle_repeats: depth,
            residual_skip: true,
            ..Self::proposed()
        }
    }

    pub fn middle_layers(&self) -> usize {
        self.middle_repeats * self.middle_per_repeat
    }

    /// Convolutions per block.
    pub fn layers_per_block(&self) -> usize {
        self.middle_layers() + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.middle_repeats == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// `(in, out)` channels of every convolution in one block.
    fn block_layout(&self) -> Vec<(usize, usize)> {
        let mut layout = vec![(IO_CHANNELS, self.width)];
        layout.extend(std::iter::repeat_n((self.width, self.width), self.middle_layers()));
        layout.push((self.width, IO_CHANNELS));
        layout
    }

    pub fn num_params(&self) -> usize {
        let per_block: usize = self
            .block_layout()
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                let conv = cout * cin * KERNEL * KERNEL + cout;
                let bn = if i + 1 < self.layers_per_block() { 2 * cout } else { 0 };
                conv + bn
            })
            .sum();
        per_block * self.num_blocks
    }

    /// Multiply-add count of one forward pass on an `h x w` input, times two.
    pub fn flops_per_sample(&self, h: usize, w: usize) -> f64 {
        let per_block: f64 = self
            .block_layout()
            .iter()
            .map(|&(cin, cout)| 2.0 * (h * w * cin * cout * KERNEL * KERNEL) as f64)
            .sum();
        per_block * self.num_blocks as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvUnit<T> {
    conv: Conv2d<T>,
    /// Absent on the output convolution.
    bn: Option<BatchNorm<T>>,
    /// Pre-activation kept for the ReLU backward pass.
    pre_relu: Option<Tensor4<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self.conv.forward(x)?;
        match &self.bn {
            Some(bn) => Ok(relu_forward(&bn.forward(&y)?)),
            None => Ok(y),
        }
    }

    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self.conv.forward_train(x)?;
        match &mut self.bn {
            Some(bn) => {
                let z = bn.forward_train(&y)?;
                let out = relu_forward(&z);
                self.pre_relu = Some(z);
                Ok(out)
            }
            None => Ok(y),
        }
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let d = match &mut self.bn {
            Some(bn) => {
                let z = self.pre_relu.take().expect("backward without forward_train");
                bn.backward(&relu_backward(&z, dy))
            }
            None => dy.clone(),
        };
        self.conv.backward(&d)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    units: Vec<ConvUnit<T>>,
}

/// Parameters, batch-norm statistics and optimizer state of the CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ModelArchitecture,
    blocks: Vec<Block<T>>,
    /// Adam steps taken so far.
    pub step: u64,
}

impl<T: Scalar> Model<T> {
    /// He-normal convolution weights, zero biases, `gamma = 1`, `beta = 0`.
    pub fn new(arch: ModelArchitecture, seed: u64) -> Result<Self> {
        let mut rng = ComplexGaussian::new(seed);
        Self::build(arch, |cin, cout| Conv2d::he_normal(cin, cout, &mut rng))
    }

    /// Every weight and bias zero.
    pub fn zeros(arch: ModelArchitecture) -> Result<Self> {
        Self::build(arch, Conv2d::new)
    }

    fn build(arch: ModelArchitecture, mut conv: impl FnMut(usize, usize) -> Conv2d<T>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.block_layout();
        let blocks = (0..arch.num_blocks)
            .map(|_| Block {
                units: layout
                    .iter()
                    .enumerate()
                    .map(|(i, &(cin, cout))| ConvUnit {
                        conv: conv(cin, cout),
                        bn: (i + 1 < layout.len()).then(|| BatchNorm::new(cout)),
                        pre_relu: None,
                    })
                    .collect(),
            })
            .collect();
        Ok(Self { arch, blocks, step: 0 })
    }

    pub fn arch(&self) -> &ModelArchitecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.units)
            .map(|u| u.conv.num_params() + u.bn.as_ref().map_or(0, |bn| 2 * bn.channels()))
            .sum()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != IO_CHANNELS {
            return Err(Error::Shape(format!(
                "model expects {IO_CHANNELS} input channels, got {}",
                x.channels()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            let mut y = h.clone();
            for unit in &block.units {
                y = unit.forward(&y)?;
            }
            if self.arch.residual_skip {
                y.add_assign(&h);
            }
            h = y;
        }
        Ok(h)
    }

    /// Training-mode forward pass; caches activations for [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &mut self.blocks {
            let mut y = h.clone();
            for unit in &mut block.units {
                y = unit.forward_train(&y)?;
            }
            if self.arch.residual_skip {
                y.add_assign(&h);
            }
            h = y;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients for the last training forward pass
    /// and returns the gradient with respect to the input.
    pub fn backward(&mut self, upstream: &Tensor4<T>) -> Tensor4<T> {
        let residual = self.arch.residual_skip;
        let mut g = upstream.clone();
        for block in self.blocks.iter_mut().rev() {
            let mut d = g.clone();
            for unit in block.units.iter_mut().rev() {
                d = unit.backward(&d);
            }
            if residual {
                d.add_assign(&g);
            }
            g = d;
        }
        g
    }

    /// Every ReLU input cached by the last training forward pass.
    pub fn relu_inputs(&self) -> Vec<T> {
        self.blocks
            .iter()
            .flat_map(|b| &b.units)
            .filter_map(|u| u.pre_relu.as_ref())
            .flat_map(|z| z.as_slice().iter().copied())
            .collect()
    }

    /// Signs of every ReLU input cached by the last training forward pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| &b.units)
            .filter_map(|u| u.pre_relu.as_ref())
            .flat_map(|z| z.as_slice().iter().map(|v| *v > T::zero()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn unit_name(&self, unit: usize) -> String {
        let last = self.arch.layers_per_block() - 1;
        match unit {
            0 => "input".to_string(),
            u if u == last => "output".to_string(),
            u => format!("middle{u}"),
        }
    }

    /// Trainable parameters in checkpoint order, named
    /// `block{b}.{input|middle{i}|output}.{weight|bias|gamma|beta}`.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let names: Vec<String> = (0..self.arch.layers_per_block()).map(|u| self.unit_name(u)).collect();
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (ui, unit) in block.units.iter_mut().enumerate() {
                let prefix = format!("block{bi}.{}", names[ui]);
                let [w, b] = unit.conv.params_mut();
                out.push((format!("{prefix}.weight"), w));
                out.push((format!("{prefix}.bias"), b));
                if let Some(bn) = unit.bn.as_mut() {
                    let [g, be] = bn.params_mut();
                    out.push((format!("{prefix}.gamma"), g));
                    out.push((format!("{prefix}.beta"), be));
                }
            }
        }
        out
    }

    /// Per convolution in order: conv, optional batch norm.
    pub fn layers(&self) -> impl Iterator<Item = (&Conv2d<T>, Option<&BatchNorm<T>>)> {
        self.blocks
            .iter()
            .flat_map(|b| &b.units)
            .map(|u| (&u.conv, u.bn.as_ref()))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = (&mut Conv2d<T>, Option<&mut BatchNorm<T>>)> {
        self.blocks
            .iter_mut()
            .flat_map(|b| &mut b.units)
            .map(|u| (&mut u.conv, u.bn.as_mut()))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    units: b
                        .units
                        .iter()
                        .map(|u| ConvUnit {
                            conv: u.conv.cast(),
                            bn: u.bn.as_ref().map(BatchNorm::cast),
                            pre_relu: None,
                        })
                        .collect(),
                })
                .collect(),
            step: self.step,
        }
    }
}
