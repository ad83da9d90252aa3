//! Soft-target distillation losses.
//!
//! `loss = hard_weight·CE(z_s, y) + alpha·T²·KL(softmax(z_t/T) ‖ softmax(z_s/T))`
//!
//! Teacher quantities always enter the tape as constants, so no teacher
//! tensor can receive a gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight on the `T²·KL` soft-target term.
    pub alpha: f64,
    /// Weight on the hard-label cross-entropy; `1 - alpha` by default.
    pub hard_weight: f64,
    /// Per-class CE weights; `None` means uniform.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::new(3.0, 0.2)
    }
}

impl DistillConfig {
    pub fn new(temperature: f64, alpha: f64) -> Self {
        Self {
            temperature,
            alpha,
            hard_weight: 1.0 - alpha,
            class_weights: None,
        }
    }

    pub fn with_class_weights(mut self, weights: Vec<f64>) -> Self {
        self.class_weights = Some(weights);
        self
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut p = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            p.push(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            p.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.hard_weight >= 0.0 && self.hard_weight.is_finite()) {
            p.push(format!(
                "hard_weight {} must be non-negative",
                self.hard_weight
            ));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes {
                p.push(format!(
                    "{} class weights for {num_classes} classes",
                    w.len()
                ));
            }
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                p.push("class weights must be positive".into());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::DistillConfig(p.join("; ")))
        }
    }

    pub fn weights<T: Scalar>(&self, num_classes: usize) -> Vec<T> {
        match &self.class_weights {
            Some(w) => w.iter().map(|&v| T::from_f64(v)).collect(),
            None => vec![T::one(); num_classes],
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::DistillConfig(format!(
            "temperature {t} must be positive"
        )))
    }
}

/// Row-wise `log softmax(z / T)` on the tape.
pub fn log_softmax_t<T: Scalar>(g: &Graph<T>, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = if temperature == 1.0 {
        logits
    } else {
        g.scale(logits, T::from_f64(1.0 / temperature))
    };
    g.log_softmax(scaled)
}

/// Row-wise `softmax(z / T)` on the tape.
pub fn softmax_t<T: Scalar>(g: &Graph<T>, logits: Var, temperature: f64) -> Result<Var> {
    Ok(g.exp(log_softmax_t(g, logits, temperature)?))
}

/// `softmax(z / T)` of a plain `[N, C]` tensor.
pub fn softmax_t_tensor<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    Ok(log_softmax_t_tensor(logits, temperature)?.map(|v| v.exp()))
}

pub fn log_softmax_t_tensor<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    if logits.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "softmax_t",
            shape: logits.shape().to_vec(),
            reason: "expected [N, C]".into(),
        });
    }
    let inv = T::from_f64(1.0 / temperature);
    let cols = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(cols) {
        let scaled: Vec<T> = row.iter().map(|&v| v * inv).collect();
        out.extend(log_softmax_row(&scaled));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// `(1/N) Σᵢ Σ_c P·(log P − log Q)` with both logs clamped at 1e-12.
/// `p` is detached: its current value is used as a constant.
pub fn kl_div_loss<T: Scalar>(g: &Graph<T>, p: Var, q: Var) -> Result<Var> {
    let (ps, qs) = (g.shape(p), g.shape(q));
    if ps != qs || ps.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "kl_div_loss",
            lhs: ps,
            rhs: qs,
        });
    }
    let pv = g.value(p);
    let log_p = g.constant(pv.map(|v| v.max(T::from_f64(crate::tensor::CLAMP_EPS)).ln()));
    let log_q = g.log(q);
    kl_core(g, pv, log_p, log_q)
}

/// KL from a constant teacher log-distribution and the student's log-probabilities.
pub fn kl_div_from_log<T: Scalar>(
    g: &Graph<T>,
    teacher_log_p: &Tensor<T>,
    student_log_q: Var,
) -> Result<Var> {
    let qs = g.shape(student_log_q);
    if teacher_log_p.shape() != qs.as_slice() || qs.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "kl_div_loss",
            lhs: teacher_log_p.shape().to_vec(),
            rhs: qs,
        });
    }
    let pv = teacher_log_p.map(|v| v.exp());
    let log_p = g.constant(teacher_log_p.clone());
    kl_core(g, pv, log_p, student_log_q)
}

fn kl_core<T: Scalar>(g: &Graph<T>, p: Tensor<T>, log_p: Var, log_q: Var) -> Result<Var> {
    let n = p.shape()[0];
    let p = g.constant(p);
    let diff = g.sub(log_p, log_q)?;
    let total = g.sum(g.mul(p, diff)?);
    Ok(g.scale(total, T::from_f64(1.0 / n as f64)))
}

/// Class-weighted cross-entropy at temperature 1, normalized by `Σᵢ w[yᵢ]`.
pub fn cross_entropy<T: Scalar>(
    g: &Graph<T>,
    logits: Var,
    labels: &[usize],
    weights: &[T],
) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    g.weighted_nll(logp, labels, weights)
}

/// Loss on the tape plus its two components for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<T: Scalar = f32> {
    pub total: Var,
    pub ce: T,
    /// Unscaled KL (before `alpha·T²`); zero when `alpha == 0`.
    pub kl: T,
}

/// `hard_weight·CE + alpha·T²·KL`. With `alpha == 0` the KL term is not
/// evaluated and `teacher_logits` may be `None`.
pub fn combined_loss<T: Scalar>(
    g: &Graph<T>,
    student_logits: Var,
    teacher_logits: Option<&Tensor<T>>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossParts<T>> {
    let shape = g.shape(student_logits);
    let classes = shape.get(1).copied().unwrap_or(0);
    cfg.validate(classes)?;
    let weights = cfg.weights::<T>(classes);
    let ce = cross_entropy(g, student_logits, labels, &weights)?;
    let ce_value = g.value(ce).item();
    let hard = g.scale(ce, T::from_f64(cfg.hard_weight));
    if cfg.alpha == 0.0 {
        return Ok(LossParts {
            total: hard,
            ce: ce_value,
            kl: T::zero(),
        });
    }
    let teacher = teacher_logits
        .ok_or_else(|| Error::DistillConfig("alpha > 0 requires teacher logits".into()))?;
    if teacher.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "combined_loss",
            lhs: shape,
            rhs: teacher.shape().to_vec(),
        });
    }
    let t = cfg.temperature;
    let log_p = log_softmax_t_tensor(teacher, t)?;
    let log_q = log_softmax_t(g, student_logits, t)?;
    let kl = kl_div_from_log(g, &log_p, log_q)?;
    let kl_value = g.value(kl).item();
    let soft = g.scale(kl, T::from_f64(cfg.alpha * t * t));
    Ok(LossParts {
        total: g.add(hard, soft)?,
        ce: ce_value,
        kl: kl_value,
    })
}
