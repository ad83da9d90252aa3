use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Param, ParamCount, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer `x·Wᵀ + b`, optionally followed by ReLU.
/// Inputs of rank > 2 are flattened to `[N, features]`.
#[derive(Clone, Debug)]
pub struct LinearLayer<T: Scalar = f32> {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub relu: bool,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        relu: bool,
        init: &mut Init,
    ) -> Self {
        let name = name.into();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                init.kaiming(&[out_features, in_features], in_features),
                ParamKind::Trainable,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::zeros(&[out_features]),
                ParamKind::Trainable,
            ),
            name,
            in_features,
            out_features,
            relu,
        }
    }

    pub fn element_count(in_features: usize, out_features: usize) -> ParamCount {
        ParamCount {
            trainable: (out_features * in_features + out_features) as u64,
            buffers: 0,
        }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.graph;
        let shape = g.shape(x);
        let features: usize = shape[1..].iter().product();
        if features != self.in_features {
            return Err(Error::ChannelMismatch {
                block: self.name.clone(),
                expected: self.in_features,
                actual: features,
            });
        }
        let x = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[shape[0], features])?
        };
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let y = g.linear(x, w, Some(b))?;
        Ok(if self.relu { g.relu(y) } else { y })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn parameter_count(&self) -> ParamCount {
        ParamCount::of(self.params())
    }

    pub fn cast<U: Scalar>(&self) -> LinearLayer<U> {
        LinearLayer {
            name: self.name.clone(),
            in_features: self.in_features,
            out_features: self.out_features,
            relu: self.relu,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Inverted dropout: identity in eval mode; in train mode zeroes each
/// activation with probability `rate` and scales survivors by `1/(1-rate)`.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub name: String,
    pub rate: f64,
}

impl Dropout {
    pub fn new(name: impl Into<String>, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            name: name.into(),
            rate,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        if !ctx.is_train() || self.rate == 0.0 {
            return Ok(x);
        }
        let shape = ctx.graph.shape(x);
        let numel: usize = shape.iter().product();
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = ctx.with_rng(|rng| {
            (0..numel)
                .map(|_| {
                    if rng.gen::<f64>() < self.rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        });
        let mask = ctx.graph.constant(Tensor::from_parts(shape, mask));
        ctx.graph.mul(x, mask)
    }
}

/// Adaptive average pooling to a fixed spatial size.
#[derive(Clone, Debug)]
pub struct AdaptiveAvgPool {
    pub name: String,
    pub out_h: usize,
    pub out_w: usize,
}

impl AdaptiveAvgPool {
    pub fn new(name: impl Into<String>, out_h: usize, out_w: usize) -> Self {
        Self {
            name: name.into(),
            out_h,
            out_w,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        ctx.graph.adaptive_avg_pool2d(x, self.out_h, self.out_w)
    }
}
