use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{residual_specs, se_element_count, ConvSpec, LinearLayer, ParamCount};
use crate::tensor::conv_out_dim;

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 7;

/// Reference trainable-parameter totals for the four shipped architectures.
pub const REFERENCE_TOTALS: [(&str, u64); 4] = [
    ("resemotenet", 80_238_599),
    ("student_a", 20_069_383),
    ("student_b", 5_022_215),
    ("student_c", 1_259_911),
];

pub fn reference_total(name: &str) -> Option<u64> {
    REFERENCE_TOTALS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, t)| t)
}

/// Declarative architecture description.
///
/// Layer sequence: one conv stage per `conv_channels` entry (3×3 conv, batch
/// norm, ReLU, 2×2 max-pool), an SE block at `se_channels`, one residual
/// block per `residual_channels` entry mapping `c → c·residual_expansion`,
/// adaptive average pooling to 1×1, then the linear head whose output widths
/// are `head_widths` (ReLU and dropout between them, raw logits at the end).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub se_channels: usize,
    pub se_reduction: usize,
    pub se_bias: bool,
    /// Input width of each residual block.
    pub residual_channels: Vec<usize>,
    pub residual_expansion: usize,
    pub residual_stride: usize,
    pub head_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub kernel_size: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// The ResEmoteNet teacher.
    pub fn teacher() -> Self {
        Self {
            name: "resemotenet".into(),
            input_shape: [3, 64, 64],
            conv_channels: vec![64, 128, 256],
            se_channels: 256,
            se_reduction: 16,
            se_bias: false,
            residual_channels: vec![256, 512, 1024],
            residual_expansion: 2,
            residual_stride: 2,
            head_widths: vec![1024, 512, 256, NUM_CLASSES],
            dropout_rate: 0.2,
            num_classes: NUM_CLASSES,
            kernel_size: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn student_a() -> Self {
        Self {
            name: "student_a".into(),
            ..halve_channels(&Self::teacher(), 2).expect("teacher widths divide by 2")
        }
    }

    pub fn student_b() -> Self {
        Self {
            name: "student_b".into(),
            ..halve_channels(&Self::teacher(), 4).expect("teacher widths divide by 4")
        }
    }

    /// Student C keeps a full-width SE bottleneck (reduction 1); with the
    /// teacher's reduction of 16 the bottleneck would be 2 units wide and the
    /// model 1,920 parameters short of the reference total.
    pub fn student_c() -> Self {
        Self {
            name: "student_c".into(),
            se_reduction: 1,
            ..halve_channels(&Self::teacher(), 8).expect("teacher widths divide by 8")
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resemotenet" | "teacher" => Some(Self::teacher()),
            "student_a" => Some(Self::student_a()),
            "student_b" => Some(Self::student_b()),
            "student_c" => Some(Self::student_c()),
            _ => None,
        }
    }

    pub fn presets() -> Vec<Self> {
        vec![
            Self::teacher(),
            Self::student_a(),
            Self::student_b(),
            Self::student_c(),
        ]
    }

    /// Same architecture, ignoring the name.
    pub fn same_architecture(&self, other: &Self) -> bool {
        Self {
            name: String::new(),
            ..self.clone()
        } == Self {
            name: String::new(),
            ..other.clone()
        }
    }

    pub fn residual_out(&self, idx: usize) -> usize {
        self.residual_channels[idx] * self.residual_expansion
    }

    /// Channel width entering the head.
    pub fn feature_width(&self) -> usize {
        match self.residual_channels.len() {
            0 => self.se_channels,
            n => self.residual_out(n - 1),
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.name.trim().is_empty() || self.name.contains(char::is_whitespace) {
            p.push(format!(
                "name {:?} must be a non-empty identifier",
                self.name
            ));
        }
        if self.input_shape.contains(&0) {
            p.push(format!(
                "input_shape {:?} has a zero dimension",
                self.input_shape
            ));
        }
        if self.conv_channels.is_empty() {
            p.push("conv_channels is empty".into());
        }
        if self
            .conv_channels
            .iter()
            .chain(&self.residual_channels)
            .any(|&c| c == 0)
            || self.se_channels == 0
        {
            p.push("channel counts must be positive".into());
        }
        if let Some(&last) = self.conv_channels.last() {
            if last != self.se_channels {
                p.push(format!(
                    "se_channels {} differs from last conv width {last}",
                    self.se_channels
                ));
            }
        }
        if self.se_reduction == 0 {
            p.push("se_reduction must be at least 1".into());
        }
        if self.residual_expansion == 0 || self.residual_stride == 0 {
            p.push("residual_expansion and residual_stride must be positive".into());
        }
        let mut width = self.se_channels;
        for (i, &c) in self.residual_channels.iter().enumerate() {
            if c != width {
                p.push(format!(
                    "residual block {} expects {c} channels but receives {width}",
                    i + 1
                ));
            }
            width = c * self.residual_expansion;
        }
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            p.push("head_widths must be non-empty and positive".into());
        } else if *self.head_widths.last().unwrap() != self.num_classes {
            p.push(format!(
                "head_widths must end in num_classes ({}), got {:?}",
                self.num_classes, self.head_widths
            ));
        }
        if self.num_classes == 0 {
            p.push("num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            p.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            p.push(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            p.push("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub(crate) fn conv_spec(&self, in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            kernel: self.kernel_size,
            padding: self.kernel_size / 2,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            ..ConvSpec::standard(in_channels, out_channels)
        }
    }

    /// The layer sequence with output shapes and closed-form counts,
    /// computed without allocating any weights.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        let [mut c, mut h, mut w] = self.input_shape;
        let mut plan = Vec::new();
        let too_small = |layer: &str, h: usize, w: usize| {
            Error::Config(format!(
                "input {:?} too small: {layer} receives {h}x{w}",
                self.input_shape
            ))
        };
        for (i, &out) in self.conv_channels.iter().enumerate() {
            let spec = self.conv_spec(c, out);
            let (oh, ow) = spec
                .output_hw(h, w)
                .ok_or_else(|| too_small(&format!("conv{}", i + 1), h, w))?;
            (c, h, w) = (out, oh, ow);
            plan.push(LayerPlan::new(
                format!("conv{}", i + 1),
                "conv",
                [c, h, w],
                spec.element_count(),
            ));
            let (ph, pw) = match (conv_out_dim(h, 2, 2, 0), conv_out_dim(w, 2, 2, 0)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(too_small(&format!("pool{}", i + 1), h, w)),
            };
            (h, w) = (ph, pw);
            plan.push(LayerPlan::new(
                format!("pool{}", i + 1),
                "maxpool",
                [c, h, w],
                ParamCount::default(),
            ));
        }
        plan.push(LayerPlan::new(
            "se",
            "se",
            [c, h, w],
            se_element_count(self.se_channels, self.se_reduction, self.se_bias),
        ));
        for (i, &rc) in self.residual_channels.iter().enumerate() {
            let out = rc * self.residual_expansion;
            let (a, b, p) = residual_specs(
                rc,
                out,
                self.residual_stride,
                self.kernel_size,
                self.bn_eps,
                self.bn_momentum,
            );
            let (oh, ow) = a
                .output_hw(h, w)
                .ok_or_else(|| too_small(&format!("res{}", i + 1), h, w))?;
            (c, h, w) = (out, oh, ow);
            let count = a.element_count()
                + b.element_count()
                + p.map(|p| p.element_count()).unwrap_or_default();
            plan.push(LayerPlan::new(
                format!("res{}", i + 1),
                "residual",
                [c, h, w],
                count,
            ));
        }
        (h, w) = (1, 1);
        plan.push(LayerPlan::new(
            "avgpool",
            "avgpool",
            [c, h, w],
            ParamCount::default(),
        ));
        let mut features = c;
        let last = self.head_widths.len() - 1;
        for (j, &width) in self.head_widths.iter().enumerate() {
            plan.push(LayerPlan::new(
                format!("fc{}", j + 1),
                "linear",
                [width, 1, 1],
                LinearLayer::<f32>::element_count(features, width),
            ));
            features = width;
            if j < last {
                plan.push(LayerPlan::new(
                    format!("drop{}", j + 1),
                    "dropout",
                    [width, 1, 1],
                    ParamCount::default(),
                ));
            }
        }
        Ok(plan)
    }

    /// Closed-form parameter count.
    pub fn planned_parameters(&self) -> Result<ParamCount> {
        Ok(self.plan()?.iter().map(|l| l.params).sum())
    }

    /// Canonical `key = value` text, one key per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "input_shape = {}", list(&self.input_shape));
        let _ = writeln!(s, "conv_channels = {}", list(&self.conv_channels));
        let _ = writeln!(s, "se_channels = {}", self.se_channels);
        let _ = writeln!(s, "se_reduction = {}", self.se_reduction);
        let _ = writeln!(s, "se_bias = {}", self.se_bias);
        let _ = writeln!(s, "residual_channels = {}", list(&self.residual_channels));
        let _ = writeln!(s, "residual_expansion = {}", self.residual_expansion);
        let _ = writeln!(s, "residual_stride = {}", self.residual_stride);
        let _ = writeln!(s, "head_widths = {}", list(&self.head_widths));
        let _ = writeln!(s, "dropout_rate = {}", self.dropout_rate);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "kernel_size = {}", self.kernel_size);
        let _ = writeln!(s, "bn_eps = {}", self.bn_eps);
        let _ = writeln!(s, "bn_momentum = {}", self.bn_momentum);
        s
    }

    /// Parse `key = value` text. An optional `preset` key selects the base
    /// configuration (default: the teacher); every other key overrides it.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text).map_err(Error::Config)?;
        let mut cfg = match pairs.iter().find(|p| p.key == "preset") {
            Some(p) => Self::preset(&p.value)
                .ok_or_else(|| Error::Config(format!("unknown preset {:?}", p.value)))?,
            None => Self::teacher(),
        };
        let mut errors = Vec::new();
        for kv in pairs.iter().filter(|p| p.key != "preset") {
            if let Err(e) = cfg.set(&kv.key, &kv.value) {
                errors.push(format!("line {}: {e}", kv.line));
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        Ok(cfg)
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "name" => self.name = value.to_string(),
            "input_shape" => {
                let v = parse_list(value)?;
                self.input_shape = v.try_into().map_err(|v: Vec<usize>| {
                    format!("input_shape needs 3 entries, got {}", v.len())
                })?;
            }
            "conv_channels" => self.conv_channels = parse_list(value)?,
            "se_channels" => self.se_channels = parse_num(value)?,
            "se_reduction" => self.se_reduction = parse_num(value)?,
            "se_bias" => self.se_bias = parse_num(value)?,
            "residual_channels" => self.residual_channels = parse_list(value)?,
            "residual_expansion" => self.residual_expansion = parse_num(value)?,
            "residual_stride" => self.residual_stride = parse_num(value)?,
            "head_widths" => self.head_widths = parse_list(value)?,
            "dropout_rate" => self.dropout_rate = parse_num(value)?,
            "num_classes" => self.num_classes = parse_num(value)?,
            "kernel_size" => self.kernel_size = parse_num(value)?,
            "bn_eps" => self.bn_eps = parse_num(value)?,
            "bn_momentum" => self.bn_momentum = parse_num(value)?,
            other => return Err(format!("unknown model key {other:?}")),
        }
        Ok(())
    }
}

/// Divide every channel width (and every hidden head width) by `factor`.
/// The final head width (the class count) is kept. Widths must divide
/// exactly.
pub fn halve_channels(config: &ModelConfig, factor: usize) -> Result<ModelConfig> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::Config(format!(
            "channel factor must be 1, 2, 4 or 8, got {factor}"
        )));
    }
    let div = |what: &str, c: usize| {
        if c.is_multiple_of(factor) {
            Ok(c / factor)
        } else {
            Err(Error::Config(format!(
                "{what} width {c} is not divisible by {factor}"
            )))
        }
    };
    let conv_channels = config
        .conv_channels
        .iter()
        .map(|&c| div("conv", c))
        .collect::<Result<Vec<_>>>()?;
    let residual_channels = config
        .residual_channels
        .iter()
        .map(|&c| div("residual", c))
        .collect::<Result<Vec<_>>>()?;
    let last = config.head_widths.len().saturating_sub(1);
    let head_widths = config
        .head_widths
        .iter()
        .enumerate()
        .map(|(i, &w)| if i == last { Ok(w) } else { div("head", w) })
        .collect::<Result<Vec<_>>>()?;
    let name = if factor == 1 {
        config.name.clone()
    } else {
        format!("{}-div{factor}", config.name)
    };
    Ok(ModelConfig {
        name,
        conv_channels,
        se_channels: div("se", config.se_channels)?,
        residual_channels,
        head_widths,
        ..config.clone()
    })
}

/// One row of a model's layer listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub kind: String,
    /// (channels, height, width) after this layer; the head reports (width, 1, 1).
    pub output_shape: [usize; 3],
    pub params: ParamCount,
}

impl LayerPlan {
    fn new(
        name: impl Into<String>,
        kind: &str,
        output_shape: [usize; 3],
        params: ParamCount,
    ) -> Self {
        Self {
            name: name.into(),
            kind: kind.into(),
            output_shape,
            params,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parse flat `key = value` text. `#` starts a comment; blank lines are
/// ignored; duplicate keys are an error.
pub fn parse_key_values(text: &str) -> std::result::Result<Vec<KeyValue>, String> {
    let mut out: Vec<KeyValue> = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                let key = k.trim().to_string();
                if out.iter().any(|kv| kv.key == key) {
                    errors.push(format!("line {}: duplicate key {key:?}", i + 1));
                    continue;
                }
                out.push(KeyValue {
                    key,
                    value: v.trim().to_string(),
                    line: i + 1,
                });
            }
            _ => errors.push(format!(
                "line {}: expected `key = value`, got {line:?}",
                i + 1
            )),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors.join("; "))
    }
}

pub(crate) fn parse_num<N: std::str::FromStr>(value: &str) -> std::result::Result<N, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(parse_num).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn student_schedules() {
        let a = ModelConfig::student_a();
        assert_eq!(a.conv_channels, vec![32, 64, 128]);
        assert_eq!(a.se_channels, 128);
        assert_eq!(a.residual_channels, vec![128, 256, 512]);
        assert_eq!(a.head_widths, vec![512, 256, 128, 7]);
        let b = ModelConfig::student_b();
        assert_eq!(b.conv_channels, vec![16, 32, 64]);
        assert_eq!(b.residual_channels, vec![64, 128, 256]);
        let c = halve_channels(&ModelConfig::teacher(), 8).unwrap();
        assert_eq!(c.conv_channels, vec![8, 16, 32]);
        assert_eq!(c.se_channels, 32);
        assert_eq!(c.residual_channels, vec![32, 64, 128]);
        assert_eq!(c.num_classes, 7);
    }

    #[test]
    fn halving_by_two_gives_student_a() {
        let halved = halve_channels(&ModelConfig::teacher(), 2).unwrap();
        assert!(halved.same_architecture(&ModelConfig::student_a()));
    }

    #[test]
    fn factor_one_is_identity() {
        let t = ModelConfig::teacher();
        assert_eq!(halve_channels(&t, 1).unwrap(), t);
    }

    #[test]
    fn non_divisible_rejected() {
        let mut cfg = ModelConfig::teacher();
        cfg.conv_channels[0] = 6;
        assert!(halve_channels(&cfg, 4)
            .unwrap_err()
            .to_string()
            .contains("not divisible"));
        assert!(halve_channels(&ModelConfig::teacher(), 3).is_err());
    }

    #[test]
    fn reference_totals_from_closed_form() {
        for cfg in ModelConfig::presets() {
            let planned = cfg.planned_parameters().unwrap();
            assert_eq!(
                Some(planned.trainable),
                reference_total(&cfg.name),
                "{}",
                cfg.name
            );
        }
    }

    #[test]
    fn halved_student_c_is_short_only_in_se() {
        let halved = halve_channels(&ModelConfig::teacher(), 8).unwrap();
        let preset = ModelConfig::student_c();
        let a = halved.plan().unwrap();
        let b = preset.plan().unwrap();
        for (x, y) in a.iter().zip(&b) {
            if x.name == "se" {
                assert_eq!(y.params.trainable - x.params.trainable, 1_920);
            } else {
                assert_eq!(x.params, y.params, "{}", x.name);
            }
        }
    }

    #[test]
    fn text_round_trip() {
        for cfg in ModelConfig::presets() {
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        let cfg =
            ModelConfig::from_text("preset = student_b\n# comment\ndropout_rate = 0.3\n").unwrap();
        assert_eq!(cfg.conv_channels, vec![16, 32, 64]);
        assert_eq!(cfg.dropout_rate, 0.3);
    }

    #[test]
    fn text_errors_are_collected() {
        let err = ModelConfig::from_text("bogus = 1\nse_channels = x\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("line 2"), "{err}");
        assert!(ModelConfig::from_text("a = 1\na = 2").is_err());
    }

    #[test]
    fn type_errors_in_schedule() {
        let mut cfg = ModelConfig::teacher();
        cfg.se_channels = 128;
        let problems = cfg.problems();
        assert!(problems.iter().any(|p| p.contains("se_channels")));
        assert!(problems.iter().any(|p| p.contains("residual block 1")));
    }

    #[test]
    fn minimal_schedule_is_valid() {
        let cfg = ModelConfig {
            name: "minimal".into(),
            input_shape: [3, 8, 8],
            conv_channels: vec![1],
            se_channels: 1,
            residual_channels: vec![1],
            head_widths: vec![1, 7],
            ..ModelConfig::teacher()
        };
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.last().unwrap().output_shape, [7, 1, 1]);
    }

    #[test]
    fn input_too_small_reported() {
        let cfg = ModelConfig {
            input_shape: [3, 4, 4],
            ..ModelConfig::teacher()
        };
        assert!(cfg.plan().unwrap_err().to_string().contains("too small"));
    }
}
