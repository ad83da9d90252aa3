//! Central finite-difference gradient checks in f64.
//!
//! The loss is `Σ r ⊙ f(inputs)` for a fixed random `r`. Each checked
//! coordinate compares the analytic gradient `a` with the central difference
//! `n` at ε = 1e-3 using `|a − n| / max(|a|, |n|, 1e-6)`.
//!
//! Piecewise-linear ops (ReLU, max-pool) have kinks; a coordinate whose
//! ε-window straddles a kink has no meaningful difference quotient. Such a
//! coordinate shows up as a failing quotient at ε that also disagrees with
//! the quotient at ε/2 by more than TOL/10. It is skipped, but only for
//! cases declared `kinked`, and at most a tenth of a case may be skipped. A
//! wrong gradient gives quotients that agree with each other and not with
//! the analytic value, so it is never skipped.

use kdf_core::autodiff::{Graph, Var};
use kdf_core::tensor::Tensor;
use kdf_core::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
const MAX_COORDS: usize = 10;

pub struct Input {
    pub name: String,
    pub value: Tensor<f64>,
    /// Registered as a named parameter (so blocks pick it up) instead of a bare leaf.
    pub param: bool,
}

impl Input {
    pub fn leaf(name: &str, value: Tensor<f64>) -> Self {
        Self {
            name: name.into(),
            value,
            param: false,
        }
    }

    pub fn param(name: &str, value: Tensor<f64>) -> Self {
        Self {
            name: name.into(),
            value,
            param: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl Outcome {
    pub fn merge(&mut self, other: &Outcome) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
    }

    pub fn passed(&self, kinked: bool) -> bool {
        let skip_ok = if kinked {
            self.skipped * 10 <= self.checked + self.skipped
        } else {
            self.skipped == 0
        };
        self.checked > 0 && self.max_rel <= TOL && skip_ok
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

type Build<'a> = dyn Fn(&Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn register(g: &Graph<f64>, inputs: &[Input], values: &[Tensor<f64>]) -> Vec<Var> {
    inputs
        .iter()
        .zip(values)
        .map(|(i, v)| {
            if i.param {
                g.param(&i.name, v, true)
            } else {
                g.leaf(v.clone(), true)
            }
        })
        .collect()
}

fn project(g: &Graph<f64>, out: Var, r: &Option<Tensor<f64>>) -> Var {
    match r {
        Some(r) => {
            let rv = g.constant(r.clone());
            g.sum(g.mul(out, rv).unwrap())
        }
        None => out,
    }
}

fn loss_at(
    inputs: &[Input],
    values: &[Tensor<f64>],
    build: &Build,
    r: &Option<Tensor<f64>>,
) -> f64 {
    let g = Graph::<f64>::new();
    let vars = register(&g, inputs, values);
    let out = build(&g, &vars).expect("forward");
    let l = project(&g, out, r);
    g.value(l).item()
}

/// Check every input of `build` at up to `MAX_COORDS` random coordinates each.
pub fn check(seed: u64, inputs: Vec<Input>, kinked: bool, build: &Build) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let values: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();

    let g = Graph::<f64>::new();
    let vars = register(&g, &inputs, &values);
    let out = build(&g, &vars).expect("forward");
    let r = if g.value(out).is_scalar() {
        None
    } else {
        Some(randn(&mut rng, &g.shape(out), 1.0))
    };
    let loss = project(&g, out, &r);
    let grads = g.backward(loss).expect("backward");

    let mut outcome = Outcome::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = if input.param {
            grads.param(&input.name).cloned()
        } else {
            grads.get(vars[k]).cloned()
        }
        .unwrap_or_else(|| Tensor::zeros(input.value.shape()));
        let n = input.value.numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            sample(&mut rng, n, MAX_COORDS).into_vec()
        };
        for i in coords {
            let quotient = |eps: f64| {
                let mut vals = values.clone();
                vals[k].data_mut()[i] += eps;
                let up = loss_at(&inputs, &vals, build, &r);
                vals[k].data_mut()[i] -= 2.0 * eps;
                let down = loss_at(&inputs, &vals, build, &r);
                (up - down) / (2.0 * eps)
            };
            let n1 = quotient(EPS);
            let a = analytic.data()[i];
            let rel = (a - n1).abs() / a.abs().max(n1.abs()).max(1e-6);
            if rel > TOL && kinked {
                let n2 = quotient(EPS / 2.0);
                let drift = (n1 - n2).abs() / n1.abs().max(n2.abs()).max(1e-6);
                if drift > TOL / 10.0 {
                    outcome.skipped += 1;
                    continue;
                }
            }
            outcome.checked += 1;
            if rel > outcome.max_rel {
                outcome.max_rel = rel;
                outcome.worst = format!(
                    "seed {seed} {}[{i}]: analytic {a:.9e} numeric {n1:.9e}",
                    input.name
                );
            }
        }
    }
    outcome
}
