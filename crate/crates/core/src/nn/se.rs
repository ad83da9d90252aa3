use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{channels_of, Ctx, Init, Param, ParamCount, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Squeeze-and-excitation: global average pool, a `channels → hidden`
/// bottleneck with ReLU, a `hidden → channels` expansion with sigmoid, and
/// per-channel rescaling of the input by the resulting gate.
#[derive(Clone, Debug)]
pub struct SeBlock<T: Scalar = f32> {
    pub name: String,
    pub channels: usize,
    pub reduction: usize,
    pub squeeze_weight: Param<T>,
    pub squeeze_bias: Option<Param<T>>,
    pub excite_weight: Param<T>,
    pub excite_bias: Option<Param<T>>,
}

/// Width of the bottleneck: `channels / reduction`, at least one unit.
pub fn se_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Closed-form element count of an SE block.
pub fn se_element_count(channels: usize, reduction: usize, bias: bool) -> ParamCount {
    let (c, h) = (channels as u64, se_hidden(channels, reduction) as u64);
    let biases = if bias { h + c } else { 0 };
    ParamCount {
        trainable: 2 * c * h + biases,
        buffers: 0,
    }
}

impl<T: Scalar> SeBlock<T> {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        reduction: usize,
        bias: bool,
        init: &mut Init,
    ) -> Self {
        let name = name.into();
        let hidden = se_hidden(channels, reduction);
        let squeeze_weight = Param::new(
            format!("{name}.squeeze.weight"),
            init.kaiming(&[hidden, channels], channels),
            ParamKind::Trainable,
        );
        let excite_weight = Param::new(
            format!("{name}.excite.weight"),
            init.kaiming(&[channels, hidden], hidden),
            ParamKind::Trainable,
        );
        let zeros = |suffix: &str, n: usize| {
            Param::new(
                format!("{name}.{suffix}.bias"),
                Tensor::zeros(&[n]),
                ParamKind::Trainable,
            )
        };
        Self {
            squeeze_bias: bias.then(|| zeros("squeeze", hidden)),
            excite_bias: bias.then(|| zeros("excite", channels)),
            name,
            channels,
            reduction,
            squeeze_weight,
            excite_weight,
        }
    }

    pub fn hidden(&self) -> usize {
        self.squeeze_weight.value.shape()[0]
    }

    /// The sigmoid gate, shape `[N, C]`.
    pub fn gate(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let actual = channels_of(ctx, x);
        if actual != self.channels {
            return Err(Error::ChannelMismatch {
                block: self.name.clone(),
                expected: self.channels,
                actual,
            });
        }
        let g = ctx.graph;
        let n = g.shape(x)[0];
        let pooled = g.adaptive_avg_pool2d(x, 1, 1)?;
        let pooled = g.reshape(pooled, &[n, self.channels])?;
        let sw = ctx.param(&self.squeeze_weight);
        let sb = self.squeeze_bias.as_ref().map(|p| ctx.param(p));
        let hidden = g.relu(g.linear(pooled, sw, sb)?);
        let ew = ctx.param(&self.excite_weight);
        let eb = self.excite_bias.as_ref().map(|p| ctx.param(p));
        Ok(g.sigmoid(g.linear(hidden, ew, eb)?))
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let gate = self.gate(ctx, x)?;
        ctx.graph.channel_scale(x, gate)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.squeeze_weight];
        out.extend(self.squeeze_bias.as_ref());
        out.push(&self.excite_weight);
        out.extend(self.excite_bias.as_ref());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.squeeze_weight];
        out.extend(self.squeeze_bias.as_mut());
        out.push(&mut self.excite_weight);
        out.extend(self.excite_bias.as_mut());
        out
    }

    pub fn parameter_count(&self) -> ParamCount {
        ParamCount::of(self.params())
    }

    pub fn cast<U: Scalar>(&self) -> SeBlock<U> {
        SeBlock {
            name: self.name.clone(),
            channels: self.channels,
            reduction: self.reduction,
            squeeze_weight: self.squeeze_weight.cast(),
            squeeze_bias: self.squeeze_bias.as_ref().map(Param::cast),
            excite_weight: self.excite_weight.cast(),
            excite_bias: self.excite_bias.as_ref().map(Param::cast),
        }
    }
}
