//! Built-in backbone descriptions.
//!
//! The CIFAR backbones are reconstructions: VGG with BN, 3x3 convs and a single
//! classifier; ResNet-18 with a 3x3 stem and no stem pooling; a seven-conv
//! plain CNN in the M-CifarNet size class.

use super::network::{LayerSpec, NetworkConfig};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 4] = ["tiny", "mcifarnet", "vgg", "resnet18"];

fn conv(channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        channels,
        kernel: 3,
        stride: 1,
        padding: None,
    }
}

fn conv_s2(channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        channels,
        kernel: 3,
        stride: 2,
        padding: None,
    }
}

/// Three convs, pooling and a classifier; small enough for brute-force checks.
pub fn tiny(num_classes: usize, input_shape: [usize; 3]) -> NetworkConfig {
    NetworkConfig {
        name: "tiny".into(),
        input_shape,
        layers: vec![
            conv(8),
            conv_s2(16),
            conv(32),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { out: num_classes },
        ],
        num_classes,
        reduction_rate: 4,
    }
}

pub fn mcifarnet(num_classes: usize) -> NetworkConfig {
    NetworkConfig {
        name: "mcifarnet".into(),
        input_shape: [3, 32, 32],
        layers: vec![
            conv(64),
            conv(64),
            conv_s2(128),
            conv(128),
            conv(128),
            conv_s2(192),
            conv(192),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { out: num_classes },
        ],
        num_classes,
        reduction_rate: 16,
    }
}

/// VGG-19 with batch norm.
pub fn vgg(num_classes: usize) -> NetworkConfig {
    let cfg: [Option<usize>; 20] = [
        Some(64),
        Some(64),
        None,
        Some(128),
        Some(128),
        None,
        Some(256),
        Some(256),
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        Some(512),
        Some(512),
    ];
    let mut layers: Vec<LayerSpec> = cfg
        .iter()
        .map(|c| match c {
            Some(c) => conv(*c),
            None => LayerSpec::MaxPool { size: 2 },
        })
        .collect();
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear { out: num_classes });
    NetworkConfig {
        name: "vgg".into(),
        input_shape: [3, 32, 32],
        layers,
        num_classes,
        reduction_rate: 16,
    }
}

pub fn resnet18(num_classes: usize) -> NetworkConfig {
    let mut layers = vec![conv(64)];
    for (channels, stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
        layers.push(LayerSpec::Block { channels, stride });
        layers.push(LayerSpec::Block { channels, stride: 1 });
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear { out: num_classes });
    NetworkConfig {
        name: "resnet18".into(),
        input_shape: [3, 32, 32],
        layers,
        num_classes,
        reduction_rate: 16,
    }
}

/// Looks up a preset by name. `input_shape` only applies to `tiny`.
pub fn by_name(name: &str, num_classes: usize, input_shape: [usize; 3]) -> Result<NetworkConfig> {
    match name {
        "tiny" => Ok(tiny(num_classes, input_shape)),
        "mcifarnet" => Ok(mcifarnet(num_classes)),
        "vgg" => Ok(vgg(num_classes)),
        "resnet18" => Ok(resnet18(num_classes)),
        other => Err(Error::Config(format!(
            "unknown backbone `{other}` (known: {})",
            PRESETS.join(", ")
        ))),
    }
}
