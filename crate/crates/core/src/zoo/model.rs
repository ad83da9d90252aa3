use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RunningStatUpdate, Var};
use crate::error::{Error, Result};
use crate::nn::{
    AdaptiveAvgPool, ConvBlock, Ctx, Dropout, Init, Layer, LinearLayer, MaxPool, Param, ParamCount,
    ResidualBlock, SeBlock,
};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::config::ModelConfig;

/// A built network: the config it came from and its ordered layers.
/// `forward` returns raw logits of shape `(batch, num_classes)`.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    /// Build with seeded Kaiming-normal weights, zero biases, unit BN scale.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::assemble(config, &mut Init::new(seed))
    }

    /// Same layout with all-zero weights; cheap for checkpoint loading.
    pub fn build_zeroed(config: &ModelConfig) -> Result<Self> {
        Self::assemble(config, &mut Init::zeroed())
    }

    fn assemble(config: &ModelConfig, init: &mut Init) -> Result<Self> {
        config.plan()?;
        let mut layers = Vec::new();
        let mut channels = config.input_shape[0];
        for (i, &out) in config.conv_channels.iter().enumerate() {
            let spec = config.conv_spec(channels, out);
            layers.push(Layer::Conv(ConvBlock::new(
                format!("conv{}", i + 1),
                spec,
                init,
            )));
            layers.push(Layer::MaxPool(MaxPool::new(format!("pool{}", i + 1), 2, 2)));
            channels = out;
        }
        layers.push(Layer::Se(SeBlock::new(
            "se",
            config.se_channels,
            config.se_reduction,
            config.se_bias,
            init,
        )));
        for (i, &rc) in config.residual_channels.iter().enumerate() {
            layers.push(Layer::Residual(ResidualBlock::new(
                format!("res{}", i + 1),
                rc,
                config.residual_out(i),
                config.residual_stride,
                config.kernel_size,
                config.bn_eps,
                config.bn_momentum,
                init,
            )));
        }
        layers.push(Layer::AvgPool(AdaptiveAvgPool::new("avgpool", 1, 1)));
        let mut features = config.feature_width();
        let last = config.head_widths.len() - 1;
        for (j, &width) in config.head_widths.iter().enumerate() {
            let hidden = j < last;
            layers.push(Layer::Linear(LinearLayer::new(
                format!("fc{}", j + 1),
                features,
                width,
                hidden,
                init,
            )));
            if hidden {
                layers.push(Layer::Dropout(Dropout::new(
                    format!("drop{}", j + 1),
                    config.dropout_rate,
                )?));
            }
            features = width;
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x);
        if shape.len() != 4 || shape[1] != self.config.input_shape[0] {
            return Err(Error::ChannelMismatch {
                block: format!("{} input", self.config.name),
                expected: self.config.input_shape[0],
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(ctx, h))
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let ctx = Ctx::eval(&g);
        let x = g.constant(input.clone());
        let y = self.forward(&ctx, x)?;
        Ok(g.value(y))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> ParamCount {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Trainable parameter total.
    pub fn total_parameters(&self) -> u64 {
        self.parameter_count().trainable
    }

    pub fn apply_running_stats(&mut self, updates: &[RunningStatUpdate<T>]) {
        if updates.is_empty() {
            return;
        }
        for layer in &mut self.layers {
            layer.apply_running_stats(updates);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// Per-layer listing of the built model, counted by enumerating tensors.
    pub fn layer_summary(&self) -> Result<Vec<LayerSummary>> {
        let plan = self.config.plan()?;
        Ok(self
            .layers
            .iter()
            .zip(plan)
            .map(|(layer, planned)| LayerSummary {
                name: layer.name().to_string(),
                kind: layer.kind().to_string(),
                output_shape: planned.output_shape,
                params: layer.parameter_count(),
            })
            .collect())
    }

    /// True when every tensor (trainable and buffer) matches bit for bit.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.name == y.name && x.value.bit_eq(&y.value))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: String,
    pub output_shape: [usize; 3],
    pub params: ParamCount,
}

/// Storage footprint of the trainable parameters at 4 bytes each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub parameters: u64,
    pub bytes: u64,
}

impl ModelSize {
    pub fn from_parameters(parameters: u64) -> Self {
        Self {
            parameters,
            bytes: 4 * parameters,
        }
    }

    /// bytes / 10⁶
    pub fn decimal_mb(&self) -> f64 {
        self.bytes as f64 / 1e6
    }

    /// bytes / 2²⁰
    pub fn mib(&self) -> f64 {
        self.bytes as f64 / (1u64 << 20) as f64
    }
}

pub fn model_size<T: Scalar>(model: &Model<T>) -> ModelSize {
    ModelSize::from_parameters(model.total_parameters())
}
