//! Differentiable building blocks: convolution stages, squeeze-and-excitation,
//! residual blocks, pooling, dropout and linear heads.
//!
//! Every block owns named [`Param`]s and runs its forward pass on a
//! [`Graph`] through a [`Ctx`], which carries the train/eval mode and the
//! dropout random stream.

mod conv;
mod linear;
mod residual;
mod se;

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use conv::{BatchNorm, ConvBlock, ConvSpec, MaxPool};
pub use linear::{AdaptiveAvgPool, Dropout, LinearLayer};
pub use residual::{residual_specs, ResidualBlock};
pub use se::{se_element_count, se_hidden, SeBlock};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape, the mode, and the dropout stream.
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub mode: Mode,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, mode: Mode, seed: u64) -> Self {
        Self {
            graph,
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval(graph: &'g Graph<T>) -> Self {
        Self::new(graph, Mode::Eval, 0)
    }

    pub fn train(graph: &'g Graph<T>, seed: u64) -> Self {
        Self::new(graph, Mode::Train, seed)
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub(crate) fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    /// Put a parameter on the tape; buffers never require gradients.
    pub fn param(&self, p: &Param<T>) -> Var {
        let trainable = p.kind == ParamKind::Trainable && self.graph.grad_enabled();
        self.graph.param(&p.name, &p.value, trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state that is still serialized (batch-norm running statistics).
    Buffer,
}

/// A named tensor owned by a block, with its optimizer state.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub grad: Option<Tensor<T>>,
    pub velocity: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            value,
            kind,
            grad: None,
            velocity: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            kind: self.kind,
            grad: self.grad.as_ref().map(Tensor::cast),
            velocity: self.velocity.as_ref().map(Tensor::cast),
        }
    }
}

/// Element counts split into trainable parameters and buffers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub buffers: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.trainable + self.buffers
    }

    pub fn of<'a, T: Scalar + 'a>(params: impl IntoIterator<Item = &'a Param<T>>) -> Self {
        params.into_iter().fold(Self::default(), |mut acc, p| {
            match p.kind {
                ParamKind::Trainable => acc.trainable += p.numel() as u64,
                ParamKind::Buffer => acc.buffers += p.numel() as u64,
            }
            acc
        })
    }
}

impl std::ops::Add for ParamCount {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            trainable: self.trainable + rhs.trainable,
            buffers: self.buffers + rhs.buffers,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Seeded weight initializer. Draws in `f64` and casts, so `f32` and `f64`
/// builds from the same seed hold the same values up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
    zero: bool,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero: false,
        }
    }

    /// Every weight zero; used when values are about to be overwritten.
    pub fn zeroed() -> Self {
        Self {
            zero: true,
            ..Self::new(0)
        }
    }

    /// He/Kaiming normal: `N(0, 2 / fan_in)`.
    pub fn kaiming<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        if self.zero {
            return Tensor::zeros(shape);
        }
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// One entry of a model's layer sequence.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<T: Scalar = f32> {
    Conv(ConvBlock<T>),
    MaxPool(MaxPool),
    Se(SeBlock<T>),
    Residual(ResidualBlock<T>),
    AvgPool(AdaptiveAvgPool),
    Linear(LinearLayer<T>),
    Dropout(Dropout),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(b) => &b.name,
            Layer::MaxPool(b) => &b.name,
            Layer::Se(b) => &b.name,
            Layer::Residual(b) => &b.name,
            Layer::AvgPool(b) => &b.name,
            Layer::Linear(b) => &b.name,
            Layer::Dropout(b) => &b.name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Se(_) => "se",
            Layer::Residual(_) => "residual",
            Layer::AvgPool(_) => "avgpool",
            Layer::Linear(_) => "linear",
            Layer::Dropout(_) => "dropout",
        }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Layer::Conv(b) => b.forward(ctx, x),
            Layer::MaxPool(b) => b.forward(ctx, x),
            Layer::Se(b) => b.forward(ctx, x),
            Layer::Residual(b) => b.forward(ctx, x),
            Layer::AvgPool(b) => b.forward(ctx, x),
            Layer::Linear(b) => b.forward(ctx, x),
            Layer::Dropout(b) => b.forward(ctx, x),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(b) => b.params(),
            Layer::Se(b) => b.params(),
            Layer::Residual(b) => b.params(),
            Layer::Linear(b) => b.params(),
            Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(b) => b.params_mut(),
            Layer::Se(b) => b.params_mut(),
            Layer::Residual(b) => b.params_mut(),
            Layer::Linear(b) => b.params_mut(),
            Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> ParamCount {
        ParamCount::of(self.params())
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv(b) => Layer::Conv(b.cast()),
            Layer::MaxPool(b) => Layer::MaxPool(b.clone()),
            Layer::Se(b) => Layer::Se(b.cast()),
            Layer::Residual(b) => Layer::Residual(b.cast()),
            Layer::AvgPool(b) => Layer::AvgPool(b.clone()),
            Layer::Linear(b) => Layer::Linear(b.cast()),
            Layer::Dropout(b) => Layer::Dropout(b.clone()),
        }
    }

    /// Fold running-statistic updates recorded during a training forward.
    pub fn apply_running_stats(&mut self, updates: &[crate::autodiff::RunningStatUpdate<T>]) {
        match self {
            Layer::Conv(b) => b.apply_running_stats(updates),
            Layer::Residual(b) => b.apply_running_stats(updates),
            _ => {}
        }
    }
}

pub(crate) fn channels_of<T: Scalar>(ctx: &Ctx<T>, x: Var) -> usize {
    ctx.graph.shape(x).get(1).copied().unwrap_or(0)
}
