use crate::autodiff::{RunningStatUpdate, Var};
use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::nn::{channels_of, ConvBlock, Ctx, Init, Param, ParamCount};
use crate::tensor::Scalar;

/// `relu(main(x) + shortcut(x))`, where `main` is two 3×3 conv+BN stages
/// (ReLU between them) and the shortcut is either the identity or a 1×1
/// strided conv+BN projection.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Scalar = f32> {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub first: ConvBlock<T>,
    pub second: ConvBlock<T>,
    pub projection: Option<ConvBlock<T>>,
}

/// The three convolution specs of a residual block (projection only when needed).
pub fn residual_specs(
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    kernel: usize,
    bn_eps: f64,
    bn_momentum: f64,
) -> (ConvSpec, ConvSpec, Option<ConvSpec>) {
    let base = |i, o| ConvSpec {
        kernel,
        padding: kernel / 2,
        bn_eps,
        bn_momentum,
        ..ConvSpec::standard(i, o)
    };
    let first = ConvSpec {
        stride,
        ..base(in_channels, out_channels)
    };
    let second = ConvSpec {
        relu: false,
        ..base(out_channels, out_channels)
    };
    let projection = (in_channels != out_channels || stride != 1).then(|| ConvSpec {
        kernel: 1,
        padding: 0,
        stride,
        relu: false,
        ..base(in_channels, out_channels)
    });
    (first, second, projection)
}

impl<T: Scalar> ResidualBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        kernel: usize,
        bn_eps: f64,
        bn_momentum: f64,
        init: &mut Init,
    ) -> Self {
        let name = name.into();
        let (a, b, p) = residual_specs(
            in_channels,
            out_channels,
            stride,
            kernel,
            bn_eps,
            bn_momentum,
        );
        Self {
            first: ConvBlock::new(format!("{name}.conv1"), a, init),
            second: ConvBlock::new(format!("{name}.conv2"), b, init),
            projection: p.map(|p| ConvBlock::new(format!("{name}.shortcut"), p, init)),
            name,
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let actual = channels_of(ctx, x);
        if actual != self.in_channels {
            return Err(Error::ChannelMismatch {
                block: self.name.clone(),
                expected: self.in_channels,
                actual,
            });
        }
        let main = self.second.forward(ctx, self.first.forward(ctx, x)?)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let (ms, ss) = (ctx.graph.shape(main), ctx.graph.shape(shortcut));
        if ms != ss {
            return Err(Error::ShapeMismatch {
                op: "residual add",
                lhs: ms,
                rhs: ss,
            });
        }
        Ok(ctx.graph.relu(ctx.graph.add(main, shortcut)?))
    }

    fn convs(&self) -> impl Iterator<Item = &ConvBlock<T>> {
        [&self.first, &self.second]
            .into_iter()
            .chain(self.projection.as_ref())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.convs().flat_map(ConvBlock::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.first.params_mut();
        out.extend(self.second.params_mut());
        if let Some(p) = &mut self.projection {
            out.extend(p.params_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> ParamCount {
        ParamCount::of(self.params())
    }

    pub fn apply_running_stats(&mut self, updates: &[RunningStatUpdate<T>]) {
        self.first.apply_running_stats(updates);
        self.second.apply_running_stats(updates);
        if let Some(p) = &mut self.projection {
            p.apply_running_stats(updates);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ResidualBlock<U> {
        ResidualBlock {
            name: self.name.clone(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: self.stride,
            first: self.first.cast(),
            second: self.second.cast(),
            projection: self.projection.as_ref().map(ConvBlock::cast),
        }
    }
}
