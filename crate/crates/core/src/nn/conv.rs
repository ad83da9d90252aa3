use crate::autodiff::{RunningStatUpdate, Var};
use crate::error::{Error, Result};
use crate::nn::{channels_of, Ctx, Init, Param, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Batch-normalization parameters attached to a convolution.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            scale: Param::new(
                format!("{prefix}.bn.weight"),
                Tensor::ones(&[channels]),
                ParamKind::Trainable,
            ),
            shift: Param::new(
                format!("{prefix}.bn.bias"),
                Tensor::zeros(&[channels]),
                ParamKind::Trainable,
            ),
            running_mean: Param::new(
                format!("{prefix}.bn.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: Param::new(
                format!("{prefix}.bn.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
            eps,
            momentum,
        }
    }

    fn key(&self) -> &str {
        &self.running_mean.name
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.graph;
        let gamma = ctx.param(&self.scale);
        let beta = ctx.param(&self.shift);
        if ctx.is_train() {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
            g.record_running_stats(RunningStatUpdate {
                key: self.key().to_string(),
                mean,
                var,
            });
            Ok(y)
        } else {
            g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                self.eps,
            )
        }
    }

    pub fn apply_running_stats(&mut self, updates: &[RunningStatUpdate<T>]) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for u in updates.iter().filter(|u| u.key == self.running_mean.name) {
            for (r, &b) in self.running_mean.value.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.running_var.value.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + m * b;
            }
        }
    }

    fn params(&self) -> [&Param<T>; 4] {
        [
            &self.scale,
            &self.shift,
            &self.running_mean,
            &self.running_var,
        ]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [
            &mut self.scale,
            &mut self.shift,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            scale: self.scale.cast(),
            shift: self.shift.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

/// Convolution with bias, optional batch norm, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Scalar = f32> {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub bn: Option<BatchNorm<T>>,
}

/// Construction options for [`ConvBlock`].
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batchnorm: bool,
    pub relu: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ConvSpec {
    /// 3×3, stride 1, padding 1, batch norm, ReLU.
    pub fn standard(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            batchnorm: true,
            relu: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Closed-form element count: `out·in·k·k + out`, plus `4·out` with batch norm.
    pub fn element_count(&self) -> crate::nn::ParamCount {
        let (i, o, k) = (
            self.in_channels as u64,
            self.out_channels as u64,
            self.kernel as u64,
        );
        let bn = if self.batchnorm { o } else { 0 };
        crate::nn::ParamCount {
            trainable: o * i * k * k + o + 2 * bn,
            buffers: 2 * bn,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |d: usize| crate::tensor::conv_out_dim(d, self.kernel, self.stride, self.padding);
        Some((f(h)?, f(w)?))
    }
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(name: impl Into<String>, spec: ConvSpec, init: &mut Init) -> Self {
        let name = name.into();
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            init.kaiming(
                &[
                    spec.out_channels,
                    spec.in_channels,
                    spec.kernel,
                    spec.kernel,
                ],
                fan_in,
            ),
            ParamKind::Trainable,
        );
        let bias = Param::new(
            format!("{name}.bias"),
            Tensor::zeros(&[spec.out_channels]),
            ParamKind::Trainable,
        );
        let bn = spec
            .batchnorm
            .then(|| BatchNorm::new(&name, spec.out_channels, spec.bn_eps, spec.bn_momentum));
        Self {
            name,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            relu: spec.relu,
            weight,
            bias,
            bn,
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
        let g = ctx.graph;
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let mut y = g.conv2d(x, w, Some(b), self.stride, self.padding)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(ctx, y)?;
        }
        if self.relu {
            y = g.relu(y);
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.weight, &self.bias];
        if let Some(bn) = &self.bn {
            out.extend(bn.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            out.extend(bn.params_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> crate::nn::ParamCount {
        crate::nn::ParamCount::of(self.params())
    }

    pub fn apply_running_stats(&mut self, updates: &[RunningStatUpdate<T>]) {
        if let Some(bn) = &mut self.bn {
            bn.apply_running_stats(updates);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvBlock<U> {
        ConvBlock {
            name: self.name.clone(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            relu: self.relu,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            bn: self.bn.as_ref().map(BatchNorm::cast),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaxPool {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool {
    pub fn new(name: impl Into<String>, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            kernel,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        ctx.graph.max_pool2d(x, self.kernel, self.stride)
    }
}
