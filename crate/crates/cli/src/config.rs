//! The flat `key = value` run configuration shared by every command.
//!
//! Sources are applied in order: built-in defaults, `--config` file, then
//! command-line overrides. Every key is materialized when the configuration
//! is written back out, so a manifest holds the complete run description.

use std::fmt::Write as _;
use std::path::PathBuf;

use kdf_core::distill::DistillConfig;
use kdf_core::train::{PlateauMetric, TrainConfig};
use kdf_core::zoo::config::parse_key_values;
use kdf_core::zoo::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Folder,
}

impl DataFormat {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "folder" => Ok(Self::Folder),
            other => Err(format!("format must be csv or folder, got {other:?}")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Folder => "folder",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub data: Option<PathBuf>,
    pub format: DataFormat,
    /// Held-out fraction of the training split when the data has no validation split.
    pub val_fraction: f64,
    pub teacher: Option<PathBuf>,
    pub warmup: usize,
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "resemotenet".into(),
            model: ModelConfig::teacher(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            data: None,
            format: DataFormat::Csv,
            val_fraction: 0.1,
            teacher: None,
            warmup: kdf_core::metrics::DEFAULT_WARMUP,
            runs: kdf_core::metrics::DEFAULT_RUNS,
        }
    }
}

fn num<N: std::str::FromStr>(v: &str) -> Result<N, String> {
    v.trim().parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

impl RunConfig {
    /// Apply `(key, value)` pairs. A `preset` among them is applied first.
    /// Returns every problem found rather than stopping at the first.
    pub fn apply<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        origin: &str,
    ) -> Vec<String> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let mut errors = Vec::new();
        let mut hard_weight_set = false;
        if let Some((_, name)) = pairs.iter().find(|(k, _)| *k == "preset") {
            match ModelConfig::preset(name) {
                Some(m) => {
                    self.preset = name.to_string();
                    self.model = m;
                }
                None => errors.push(format!("{origin}: unknown preset {name:?} (resemotenet, student_a, student_b, student_c)")),
            }
        }
        for (key, value) in pairs.iter().filter(|(k, _)| *k != "preset") {
            hard_weight_set |= *key == "hard_weight";
            if let Err(e) = self.set(key, value) {
                errors.push(format!("{origin}: {key}: {e}"));
            }
        }
        if pairs.iter().any(|(k, _)| *k == "alpha") && !hard_weight_set {
            self.distill.hard_weight = 1.0 - self.distill.alpha;
        }
        errors
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "batch_size" => t.batch_size = num(value)?,
            "epochs" => t.epochs = num(value)?,
            "lr" => t.lr = num(value)?,
            "momentum" => t.momentum = num(value)?,
            "plateau_factor" => t.plateau_factor = num(value)?,
            "plateau_patience" => t.plateau_patience = num(value)?,
            "plateau_threshold" => t.plateau_threshold = num(value)?,
            "min_lr" => t.min_lr = num(value)?,
            "plateau_metric" => {
                t.plateau_metric = match value {
                    "val_loss" => PlateauMetric::ValLoss,
                    "val_accuracy" => PlateauMetric::ValAccuracy,
                    _ => return Err(format!("expected val_loss or val_accuracy, got {value:?}")),
                }
            }
            "seed" => t.seed = num(value)?,
            "flip_prob" => t.flip_prob = num(value)?,
            "deterministic" => t.deterministic = flag(value)?,
            "class_weighting" => t.class_weighting = flag(value)?,
            "temperature" => self.distill.temperature = num(value)?,
            "alpha" => self.distill.alpha = num(value)?,
            "hard_weight" => self.distill.hard_weight = num(value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "format" => self.format = DataFormat::parse(value)?,
            "val_fraction" => self.val_fraction = num(value)?,
            "teacher" => self.teacher = (!value.is_empty()).then(|| PathBuf::from(value)),
            "warmup" => self.warmup = num(value)?,
            "runs" => self.runs = num(value)?,
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Vec<String> {
        match parse_key_values(text) {
            Ok(kvs) => self.apply(
                kvs.iter().map(|kv| (kv.key.as_str(), kv.value.as_str())),
                origin,
            ),
            Err(e) => vec![format!("{origin}: {e}")],
        }
    }

    /// Every validation problem across the model, training and loss settings.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.model.problems();
        p.extend(self.train.problems());
        if let Err(e) = self.distill.validate(self.model.num_classes) {
            p.push(e.to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            p.push(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.runs == 0 {
            p.push("runs must be at least 1".into());
        }
        p
    }

    /// Complete text form; parsing it back reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# model");
        let _ = writeln!(s, "preset = {}", self.preset);
        s.push_str(&self.model.to_text());
        let t = &self.train;
        let _ = writeln!(s, "# training");
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "plateau_factor = {}", t.plateau_factor);
        let _ = writeln!(s, "plateau_patience = {}", t.plateau_patience);
        let _ = writeln!(s, "plateau_threshold = {}", t.plateau_threshold);
        let _ = writeln!(s, "min_lr = {}", t.min_lr);
        let metric = match t.plateau_metric {
            PlateauMetric::ValLoss => "val_loss",
            PlateauMetric::ValAccuracy => "val_accuracy",
        };
        let _ = writeln!(s, "plateau_metric = {metric}");
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "flip_prob = {}", t.flip_prob);
        let _ = writeln!(s, "deterministic = {}", t.deterministic);
        let _ = writeln!(s, "class_weighting = {}", t.class_weighting);
        let _ = writeln!(s, "# distillation");
        let _ = writeln!(s, "temperature = {}", self.distill.temperature);
        let _ = writeln!(s, "alpha = {}", self.distill.alpha);
        let _ = writeln!(s, "hard_weight = {}", self.distill.hard_weight);
        let _ = writeln!(s, "# data and benchmarking");
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let _ = writeln!(s, "data = {}", path(&self.data));
        let _ = writeln!(s, "format = {}", self.format.name());
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "teacher = {}", path(&self.teacher));
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "runs = {}", self.runs);
        s
    }
}
