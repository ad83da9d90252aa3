//! The gradient-check catalogue: every tape primitive, every block and both
//! losses, each as a function of a seed that draws its own small shapes.

use kdf_core::autodiff::{Graph, Var};
use kdf_core::distill::{self, DistillConfig};
use kdf_core::nn::{
    AdaptiveAvgPool, ConvBlock, ConvSpec, Ctx, Dropout, Init, Layer, LinearLayer, MaxPool,
    ParamKind, ResidualBlock, SeBlock,
};
use kdf_core::zoo::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, randn, uniform, Input, Outcome};

pub const SEEDS: u64 = 20;

pub struct Case {
    pub name: &'static str,
    /// Contains ReLU or max-pool, so kink skipping is allowed.
    pub kinked: bool,
    pub run: fn(u64) -> Outcome,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        r.gen_range(1..=3),
        r.gen_range(1..=4),
        r.gen_range(3..=6),
        r.gen_range(3..=6),
    )
}

fn unary(seed: u64, kinked: bool, positive: bool, f: fn(&Graph<f64>, Var) -> Var) -> Outcome {
    let mut r = rng(seed);
    let (n, c, h, w) = dims(&mut r);
    let x = if positive {
        uniform(&mut r, &[n, c, h, w], 0.5, 2.0)
    } else {
        randn(&mut r, &[n, c, h, w], 1.0)
    };
    check(seed, vec![Input::leaf("x", x)], kinked, &|g, v| {
        Ok(f(g, v[0]))
    })
}

type Binary = fn(&Graph<f64>, Var, Var) -> kdf_core::Result<Var>;

/// Binary op with the second operand either full-shape or broadcast.
fn binary(seed: u64, positive_rhs: bool, f: Binary) -> Outcome {
    let mut r = rng(seed);
    let (n, c, h, w) = dims(&mut r);
    let rhs_shape = match r.gen_range(0..3) {
        0 => vec![n, c, h, w],
        1 => vec![1, c, 1, 1],
        _ => vec![w],
    };
    let a = randn(&mut r, &[n, c, h, w], 1.0);
    let b = if positive_rhs {
        uniform(&mut r, &rhs_shape, 0.5, 2.0)
    } else {
        randn(&mut r, &rhs_shape, 1.0)
    };
    check(
        seed,
        vec![Input::leaf("a", a), Input::leaf("b", b)],
        false,
        &|g, v| f(g, v[0], v[1]),
    )
}

fn block_inputs(x: kdf_core::tensor::Tensor<f64>, layer: &Layer<f64>) -> Vec<Input> {
    let mut inputs = vec![Input::leaf("x", x)];
    for p in layer.params() {
        if p.kind == ParamKind::Trainable {
            inputs.push(Input::param(&p.name, p.value.clone()));
        }
    }
    inputs
}

/// Give a block non-trivial parameters: random biases and BN affine terms,
/// random positive running variances.
fn perturb(layer: &mut Layer<f64>, r: &mut ChaCha8Rng) {
    for p in layer.params_mut() {
        let shape = p.value.shape().to_vec();
        if p.name.ends_with("running_var") {
            p.value = uniform(r, &shape, 0.5, 2.0);
        } else if p.name.ends_with("running_mean") || p.name.ends_with("bias") {
            p.value = randn(r, &shape, 0.3);
        } else if p.name.ends_with("bn.weight") {
            p.value = uniform(r, &shape, 0.5, 1.5);
        }
    }
}

fn block(
    seed: u64,
    kinked: bool,
    train: bool,
    x_shape: &[usize],
    mut layer: Layer<f64>,
) -> Outcome {
    let mut r = rng(seed ^ 0xB10C);
    perturb(&mut layer, &mut r);
    let x = randn(&mut r, x_shape, 1.0);
    let inputs = block_inputs(x, &layer);
    check(seed, inputs, kinked, &|g, v| {
        let ctx = if train {
            Ctx::train(g, seed)
        } else {
            Ctx::eval(g)
        };
        layer.forward(&ctx, v[0])
    })
}

fn conv_case(seed: u64, batchnorm: bool, relu: bool, train: bool) -> Outcome {
    let mut r = rng(seed);
    let (n, c, h, w) = dims(&mut r);
    let n = n.max(2);
    let spec = ConvSpec {
        kernel: [1, 3][r.gen_range(0..2)],
        stride: r.gen_range(1..=2),
        batchnorm,
        relu,
        ..ConvSpec::standard(c, r.gen_range(1..=4))
    };
    let spec = ConvSpec {
        padding: spec.kernel / 2,
        ..spec
    };
    let layer = Layer::Conv(ConvBlock::new("conv", spec, &mut Init::new(seed)));
    block(seed, relu, train, &[n, c, h, w], layer)
}

fn residual_case(seed: u64, projection: bool, train: bool) -> Outcome {
    let mut r = rng(seed);
    let (n, c, h, w) = dims(&mut r);
    let n = n.max(2);
    let (out, stride) = if projection { (2 * c, 2) } else { (c, 1) };
    let layer = Layer::Residual(ResidualBlock::new(
        "res",
        c,
        out,
        stride,
        3,
        1e-5,
        0.1,
        &mut Init::new(seed),
    ));
    block(seed, true, train, &[n, c, h, w], layer)
}

fn se_case(seed: u64, bias: bool) -> Outcome {
    let mut r = rng(seed);
    let (n, _, h, w) = dims(&mut r);
    let c = r.gen_range(2..=8);
    let reduction = r.gen_range(1..=4);
    let layer = Layer::Se(SeBlock::new("se", c, reduction, bias, &mut Init::new(seed)));
    block(seed, true, true, &[n, c, h, w], layer)
}

fn loss_logits(r: &mut ChaCha8Rng) -> (usize, usize, Vec<usize>) {
    let n = r.gen_range(1..=6);
    let c = r.gen_range(2..=8);
    let labels = (0..n).map(|_| r.gen_range(0..c)).collect();
    (n, c, labels)
}

fn weights(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    (0..c).map(|_| r.gen_range(0.2..3.0)).collect()
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            kinked: false,
            run: |s| binary(s, false, |g, a, b| g.add(a, b)),
        },
        Case {
            name: "sub",
            kinked: false,
            run: |s| binary(s, false, |g, a, b| g.sub(a, b)),
        },
        Case {
            name: "mul",
            kinked: false,
            run: |s| binary(s, false, |g, a, b| g.mul(a, b)),
        },
        Case {
            name: "div",
            kinked: false,
            run: |s| binary(s, true, |g, a, b| g.div(a, b)),
        },
        Case {
            name: "scale",
            kinked: false,
            run: |s| unary(s, false, false, |g, x| g.scale(x, -1.7)),
        },
        Case {
            name: "neg",
            kinked: false,
            run: |s| unary(s, false, false, |g, x| g.neg(x)),
        },
        Case {
            name: "relu",
            kinked: true,
            run: |s| unary(s, true, false, |g, x| g.relu(x)),
        },
        Case {
            name: "sigmoid",
            kinked: false,
            run: |s| unary(s, false, false, |g, x| g.sigmoid(x)),
        },
        Case {
            name: "exp",
            kinked: false,
            run: |s| unary(s, false, false, |g, x| g.exp(x)),
        },
        Case {
            name: "log",
            kinked: false,
            run: |s| unary(s, false, true, |g, x| g.log(x)),
        },
        Case {
            name: "sum",
            kinked: false,
            run: |s| unary(s, false, false, |g, x| g.sum(x)),
        },
        Case {
            name: "mean",
            kinked: false,
            run: |s| unary(s, false, false, |g, x| g.mean(x)),
        },
        Case {
            name: "broadcast_to",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let x = randn(&mut r, &[c, 1, w], 1.0);
                check(s, vec![Input::leaf("x", x)], false, &|g, v| {
                    g.broadcast_to(v[0], &[n, c, h, w])
                })
            },
        },
        Case {
            name: "reshape",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let x = randn(&mut r, &[n, c, h, w], 1.0);
                check(s, vec![Input::leaf("x", x)], false, &|g, v| {
                    g.reshape(v[0], &[n * c, h * w])
                })
            },
        },
        Case {
            name: "matmul",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (m, k, n) = (r.gen_range(1..=5), r.gen_range(1..=6), r.gen_range(1..=5));
                let a = randn(&mut r, &[m, k], 1.0);
                let b = randn(&mut r, &[k, n], 1.0);
                check(
                    s,
                    vec![Input::leaf("a", a), Input::leaf("b", b)],
                    false,
                    &|g, v| g.matmul(v[0], v[1]),
                )
            },
        },
        Case {
            name: "linear",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8));
                let with_bias = r.gen_bool(0.5);
                let mut inputs = vec![
                    Input::leaf("x", randn(&mut r, &[n, i], 1.0)),
                    Input::leaf("w", randn(&mut r, &[o, i], 1.0)),
                ];
                if with_bias {
                    inputs.push(Input::leaf("b", randn(&mut r, &[o], 1.0)));
                }
                check(s, inputs, false, &|g, v| {
                    g.linear(v[0], v[1], v.get(2).copied())
                })
            },
        },
        Case {
            name: "conv2d",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let o = r.gen_range(1..=4);
                let k = [1, 2, 3][r.gen_range(0..3)];
                let stride = r.gen_range(1..=2);
                let pad = r.gen_range(0..=k / 2);
                let with_bias = r.gen_bool(0.5);
                let mut inputs = vec![
                    Input::leaf("x", randn(&mut r, &[n, c, h, w], 1.0)),
                    Input::leaf("w", randn(&mut r, &[o, c, k, k], 1.0)),
                ];
                if with_bias {
                    inputs.push(Input::leaf("b", randn(&mut r, &[o], 1.0)));
                }
                check(s, inputs, false, &|g, v| {
                    g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)
                })
            },
        },
        Case {
            name: "max_pool2d",
            kinked: true,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let k = r.gen_range(1..=3);
                let stride = r.gen_range(1..=k);
                let x = randn(&mut r, &[n, c, h.max(k), w.max(k)], 1.0);
                check(s, vec![Input::leaf("x", x)], true, &|g, v| {
                    g.max_pool2d(v[0], k, stride)
                })
            },
        },
        Case {
            name: "adaptive_avg_pool2d",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let (oh, ow) = (r.gen_range(1..=h), r.gen_range(1..=w));
                let x = randn(&mut r, &[n, c, h, w], 1.0);
                check(s, vec![Input::leaf("x", x)], false, &|g, v| {
                    g.adaptive_avg_pool2d(v[0], oh, ow)
                })
            },
        },
        Case {
            name: "batch_norm_train",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let inputs = vec![
                    Input::leaf("x", randn(&mut r, &[n.max(2), c, h, w], 1.0)),
                    Input::leaf("gamma", uniform(&mut r, &[c], 0.5, 1.5)),
                    Input::leaf("beta", randn(&mut r, &[c], 0.3)),
                ];
                check(s, inputs, false, &|g, v| {
                    Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
                })
            },
        },
        Case {
            name: "batch_norm_eval",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let mean = randn(&mut r, &[c], 0.3).into_vec();
                let var = uniform(&mut r, &[c], 0.5, 2.0).into_vec();
                let inputs = vec![
                    Input::leaf("x", randn(&mut r, &[n, c, h, w], 1.0)),
                    Input::leaf("gamma", uniform(&mut r, &[c], 0.5, 1.5)),
                    Input::leaf("beta", randn(&mut r, &[c], 0.3)),
                ];
                check(s, inputs, false, &|g, v| {
                    g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
                })
            },
        },
        Case {
            name: "channel_scale",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                let inputs = vec![
                    Input::leaf("x", randn(&mut r, &[n, c, h, w], 1.0)),
                    Input::leaf("gate", uniform(&mut r, &[n, c], 0.0, 1.0)),
                ];
                check(s, inputs, false, &|g, v| g.channel_scale(v[0], v[1]))
            },
        },
        Case {
            name: "log_softmax",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, _) = loss_logits(&mut r);
                let x = randn(&mut r, &[n, c], 2.0);
                check(s, vec![Input::leaf("x", x)], false, &|g, v| {
                    g.log_softmax(v[0])
                })
            },
        },
        Case {
            name: "weighted_nll",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, labels) = loss_logits(&mut r);
                let w = weights(&mut r, c);
                let x = randn(&mut r, &[n, c], 1.0);
                check(s, vec![Input::leaf("logp", x)], false, &|g, v| {
                    g.weighted_nll(v[0], &labels, &w)
                })
            },
        },
        Case {
            name: "conv_block_train",
            kinked: true,
            run: |s| conv_case(s, true, true, true),
        },
        Case {
            name: "conv_block_eval",
            kinked: true,
            run: |s| conv_case(s, true, true, false),
        },
        Case {
            name: "conv_block_plain",
            kinked: false,
            run: |s| conv_case(s, false, false, true),
        },
        Case {
            name: "maxpool_block",
            kinked: true,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                block(
                    s,
                    true,
                    true,
                    &[n, c, h, w],
                    Layer::MaxPool(MaxPool::new("pool", 2, 2)),
                )
            },
        },
        Case {
            name: "se_block",
            kinked: true,
            run: |s| se_case(s, false),
        },
        Case {
            name: "se_block_bias",
            kinked: true,
            run: |s| se_case(s, true),
        },
        Case {
            name: "residual_identity",
            kinked: true,
            run: |s| residual_case(s, false, true),
        },
        Case {
            name: "residual_projection",
            kinked: true,
            run: |s| residual_case(s, true, true),
        },
        Case {
            name: "residual_eval",
            kinked: true,
            run: |s| residual_case(s, true, false),
        },
        Case {
            name: "avgpool_block",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, h, w) = dims(&mut r);
                block(
                    s,
                    false,
                    true,
                    &[n, c, h, w],
                    Layer::AvgPool(AdaptiveAvgPool::new("avg", 1, 1)),
                )
            },
        },
        Case {
            name: "linear_block",
            kinked: true,
            run: |s| {
                let mut r = rng(s);
                let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8));
                let relu = r.gen_bool(0.5);
                let layer = Layer::Linear(LinearLayer::new("fc", i, o, relu, &mut Init::new(s)));
                block(s, true, true, &[n, i], layer)
            },
        },
        Case {
            name: "dropout_block",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, i) = (r.gen_range(1..=4), r.gen_range(2..=8));
                let layer = Layer::Dropout(Dropout::new("drop", 0.3).unwrap());
                block(s, false, true, &[n, i], layer)
            },
        },
        Case {
            name: "model",
            kinked: true,
            run: |s| {
                let cfg = super::two_stage("tiny", 2, [3, 12, 12]);
                let model = Model::<f64>::build(&cfg, s).unwrap();
                let mut r = rng(s);
                let x = randn(&mut r, &[4, 3, 12, 12], 1.0);
                let mut inputs = vec![Input::leaf("x", x)];
                for p in model.params() {
                    if p.kind == ParamKind::Trainable {
                        inputs.push(Input::param(&p.name, p.value.clone()));
                    }
                }
                check(s, inputs, true, &|g, v| {
                    model.forward(&Ctx::train(g, s), v[0])
                })
            },
        },
        Case {
            name: "cross_entropy",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, labels) = loss_logits(&mut r);
                let w = weights(&mut r, c);
                let x = randn(&mut r, &[n, c], 2.0);
                check(s, vec![Input::leaf("z", x)], false, &|g, v| {
                    distill::cross_entropy(g, v[0], &labels, &w)
                })
            },
        },
        Case {
            name: "kl_div",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, _) = loss_logits(&mut r);
                let t = r.gen_range(1.0..5.0);
                let teacher = randn(&mut r, &[n, c], 2.0);
                let log_p = distill::log_softmax_t_tensor(&teacher, t).unwrap();
                let x = randn(&mut r, &[n, c], 2.0);
                check(s, vec![Input::leaf("z", x)], false, &|g, v| {
                    let log_q = distill::log_softmax_t(g, v[0], t)?;
                    distill::kl_div_from_log(g, &log_p, log_q)
                })
            },
        },
        Case {
            name: "combined_loss",
            kinked: false,
            run: |s| {
                let mut r = rng(s);
                let (n, c, labels) = loss_logits(&mut r);
                let cfg = DistillConfig::new(r.gen_range(1.0..5.0), r.gen_range(0.0..1.0))
                    .with_class_weights(weights(&mut r, c));
                let teacher = randn(&mut r, &[n, c], 2.0);
                let x = randn(&mut r, &[n, c], 2.0);
                check(s, vec![Input::leaf("z", x)], false, &|g, v| {
                    Ok(distill::combined_loss(g, v[0], Some(&teacher), &labels, &cfg)?.total)
                })
            },
        },
    ]
}

/// Run one case over all seeds.
pub fn run_case(case: &Case) -> Outcome {
    let mut total = Outcome::default();
    for seed in 0..SEEDS {
        total.merge(&(case.run)(seed));
    }
    total
}
