//! Accuracy, confusion matrices, latency and memory measurement, and
//! side-by-side comparison tables.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch, Emotion, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{model_size, Model, ModelSize};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(
        classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut m = Self::new(classes);
        for (t, p) in pairs {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: truth.max(predicted),
                classes: self.classes,
            });
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    /// Overall accuracy, trace / total × 100.
    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Metrics(
                "accuracy of an empty confusion matrix".into(),
            )),
            t => Ok(100.0 * self.correct() as f64 / t as f64),
        }
    }

    /// One-vs-rest `(TP + TN) / (TP + TN + FP + FN) × 100` per class.
    pub fn per_class_accuracy(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metrics(
                "accuracy of an empty confusion matrix".into(),
            ));
        }
        Ok((0..self.classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|r| self.counts[r][c]).sum::<u64>() - tp;
                let tn = total - tp - fn_ - fp;
                100.0 * (tp + tn) as f64 / total as f64
            })
            .collect())
    }

    /// Relabel class `i` as `perm[i]` on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut m = Self::new(self.classes);
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.counts[perm[i]][perm[j]] = v;
            }
        }
        m
    }

    fn label(&self, i: usize) -> String {
        match (self.classes, Emotion::from_index(i)) {
            (7, Some(e)) => e.to_string(),
            _ => i.to_string(),
        }
    }

    /// CSV grid with a header row of predicted labels.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for j in 0..self.classes {
            s.push(',');
            s.push_str(&self.label(j));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&self.label(i));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

/// Eval-mode argmax predictions (lowest index wins ties).
pub fn evaluate(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    let classes = model.config.num_classes;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, labels) = batch(chunk)?;
        let preds = model.logits(&x)?.argmax_rows();
        for (&t, &p) in labels.iter().zip(&preds) {
            confusion.record(t, p)?;
        }
        predictions.extend(preds);
    }
    Ok(Evaluation {
        samples: samples.len(),
        accuracy: confusion.accuracy()?,
        per_class_accuracy: confusion.per_class_accuracy()?,
        confusion,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub batch: usize,
    pub input_shape: Vec<usize>,
    pub warmup: usize,
    pub runs: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Summaries of per-run durations in milliseconds.
    pub fn from_runs(runs_ms: &[f64], warmup: usize, input_shape: Vec<usize>) -> Self {
        let mut sorted = runs_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let p95 = if n == 0 {
            f64::NAN
        } else {
            sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1]
        };
        Self {
            batch: 1,
            input_shape,
            warmup,
            runs: n,
            threads: 1,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: p95,
            min_ms: sorted.first().copied().unwrap_or(f64::NAN),
            max_ms: sorted.last().copied().unwrap_or(f64::NAN),
        }
    }
}

pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_RUNS: usize = 100;

/// Batch-1 eval forward latency on a fixed seeded input. Single-threaded.
pub fn bench_latency(
    model: &Model<f32>,
    input_shape: [usize; 3],
    warmup: usize,
    runs: usize,
) -> Result<LatencyStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = [1, input_shape[0], input_shape[1], input_shape[2]];
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen::<f32>())
        .collect();
    let input = Tensor::new(&shape, data)?;
    for _ in 0..warmup {
        model.logits(&input)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let out = model.logits(&input)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(LatencyStats::from_runs(&times, warmup, shape.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// 4 bytes per trainable parameter.
    pub parameter_bytes: u64,
    pub parameter_mib: f64,
    /// Batch-norm running statistics.
    pub buffer_bytes: u64,
    /// Sum of every layer's output size (plus the input) at batch 1, 4 bytes per value.
    pub activation_bytes: u64,
    pub activation_input_shape: [usize; 3],
    /// Process high-water resident set (VmHWM); environment-dependent.
    pub peak_resident_bytes: Option<u64>,
}

pub fn memory_report(model: &Model<f32>) -> Result<MemoryReport> {
    let counts = model.parameter_count();
    let plan = model.config.plan()?;
    let input: u64 = model.config.input_shape.iter().product::<usize>() as u64;
    let acts: u64 = plan
        .iter()
        .map(|l| l.output_shape.iter().product::<usize>() as u64)
        .sum::<u64>()
        + input;
    let size = ModelSize::from_parameters(counts.trainable);
    Ok(MemoryReport {
        parameter_bytes: size.bytes,
        parameter_mib: size.mib(),
        buffer_bytes: 4 * counts.buffers,
        activation_bytes: 4 * acts,
        activation_input_shape: model.config.input_shape,
        peak_resident_bytes: peak_resident_bytes(),
    })
}

/// `VmHWM` from `/proc/self/status`, where available.
pub fn peak_resident_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub parameters: u64,
    pub size: ModelSize,
    pub latency: Option<LatencyStats>,
    pub memory: Option<MemoryReport>,
    pub evaluation: Option<Evaluation>,
}

impl BenchReport {
    pub fn new(model: &Model<f32>) -> Self {
        let size = model_size(model);
        Self {
            model: model.config.name.clone(),
            parameters: size.parameters,
            size,
            latency: None,
            memory: None,
            evaluation: None,
        }
    }

    pub fn summary(&self) -> BenchSummary {
        BenchSummary {
            model: self.model.clone(),
            size_mb: Some(self.size.mib()),
            memory_mb: self.memory.as_ref().map(|m| m.parameter_mib),
            latency_ms: self.latency.as_ref().map(|l| l.mean_ms),
            accuracy: self.evaluation.as_ref().map(|e| e.accuracy),
        }
    }
}

/// One column of a comparison: the figures being compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub model: String,
    pub size_mb: Option<f64>,
    pub memory_mb: Option<f64>,
    pub latency_ms: Option<f64>,
    pub accuracy: Option<f64>,
}

/// `(base − x) / base × 100`
pub fn improvement(base: f64, x: f64) -> f64 {
    (base - x) / base * 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub size_mb: Option<f64>,
    pub size_improvement: Option<f64>,
    pub memory_mb: Option<f64>,
    pub memory_improvement: Option<f64>,
    pub latency_ms: Option<f64>,
    pub latency_improvement: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base: String,
    pub rows: Vec<ComparisonRow>,
}

/// Compare every summary against the first.
pub fn compare(summaries: &[BenchSummary]) -> Result<Comparison> {
    if summaries.len() < 2 {
        return Err(Error::Metrics("compare needs at least two reports".into()));
    }
    let base = &summaries[0];
    let rel = |b: Option<f64>, x: Option<f64>| match (b, x) {
        (Some(b), Some(x)) if b != 0.0 => Some(improvement(b, x)),
        _ => None,
    };
    Ok(Comparison {
        base: base.model.clone(),
        rows: summaries
            .iter()
            .map(|s| ComparisonRow {
                model: s.model.clone(),
                size_mb: s.size_mb,
                size_improvement: rel(base.size_mb, s.size_mb),
                memory_mb: s.memory_mb,
                memory_improvement: rel(base.memory_mb, s.memory_mb),
                latency_ms: s.latency_ms,
                latency_improvement: rel(base.latency_ms, s.latency_ms),
                accuracy: s.accuracy,
            })
            .collect(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:+.2}%")).unwrap_or_else(|| "-".into())
}

impl Comparison {
    fn lines(&self) -> Vec<(String, Vec<String>)> {
        let col =
            |f: &dyn Fn(&ComparisonRow) -> String| self.rows.iter().map(f).collect::<Vec<_>>();
        vec![
            ("Model Size (MiB)".into(), col(&|r| cell(r.size_mb))),
            ("  improvement".into(), col(&|r| pct(r.size_improvement))),
            ("Memory Usage (MiB)".into(), col(&|r| cell(r.memory_mb))),
            ("  improvement".into(), col(&|r| pct(r.memory_improvement))),
            (
                "Average Inference Time (ms)".into(),
                col(&|r| cell(r.latency_ms)),
            ),
            ("  improvement".into(), col(&|r| pct(r.latency_improvement))),
            ("Accuracy (%)".into(), col(&|r| cell(r.accuracy))),
        ]
    }

    /// Aligned plain-text table, one column per model.
    pub fn to_text(&self) -> String {
        let lines = self.lines();
        let head: Vec<String> = self.rows.iter().map(|r| r.model.clone()).collect();
        let w0 = lines
            .iter()
            .map(|(l, _)| l.len())
            .max()
            .unwrap_or(0)
            .max("Characteristics".len());
        let widths: Vec<usize> = (0..head.len())
            .map(|j| {
                lines
                    .iter()
                    .map(|(_, v)| v[j].len())
                    .chain([head[j].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let mut s = format!("{:<w0$}", "Characteristics");
        for (h, w) in head.iter().zip(&widths) {
            s.push_str(&format!("  {h:>w$}"));
        }
        s.push('\n');
        for (label, vals) in &lines {
            s.push_str(&format!("{label:<w0$}"));
            for (v, w) in vals.iter().zip(&widths) {
                s.push_str(&format!("  {v:>w$}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(
            "model,size_mib,size_improvement_pct,memory_mib,memory_improvement_pct,latency_ms,latency_improvement_pct,accuracy_pct\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model,
                opt(r.size_mb),
                opt(r.size_improvement),
                opt(r.memory_mb),
                opt(r.memory_improvement),
                opt(r.latency_ms),
                opt(r.latency_improvement),
                opt(r.accuracy)
            ));
        }
        s
    }
}
