#![allow(dead_code)]

pub mod grad_cases;
pub mod gradcheck;
pub mod oracle;
pub mod toy;

use kdf_core::zoo::ModelConfig;

/// A small two-stage network on `side`×`side` inputs.
pub fn two_stage(name: &str, width: usize, input: [usize; 3]) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        input_shape: input,
        conv_channels: vec![width, 2 * width],
        se_channels: 2 * width,
        se_reduction: 2,
        residual_channels: vec![2 * width],
        head_widths: vec![4 * width, 7],
        dropout_rate: 0.0,
        ..ModelConfig::teacher()
    }
}
