//! Architecture configuration and the building blocks shared by the
//! attribution generator and the critic: the task-embedding MLP and AdaIN.

use serde::{Deserialize, Serialize};
use tch::{nn, Tensor};

use crate::error::{Error, Result};
use crate::generator::TaskCode;

/// Repetition factor applied to the one-hot class selector.
pub const TASK_CODE_REPEAT: usize = 20;
pub const TASK_EMBEDDING_LAYERS: usize = 8;
pub const MAX_CRITIC_STAGES: usize = 6;
const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Channel widths and depth of the published architecture.
    Full,
    /// Channel widths divided by 4 and three bottleneck blocks.
    Desk,
}

impl Scale {
    fn width_divisor(self) -> i64 {
        match self {
            Scale::Full => 1,
            Scale::Desk => 4,
        }
    }

    fn bottleneck_blocks(self) -> usize {
        match self {
            Scale::Full => 6,
            Scale::Desk => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub scale: Scale,
    /// Average-pooling factor γ in front of the logistic-regression heads.
    pub pool_factor: usize,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig { num_classes, image_size: 64, scale: Scale::Desk, pool_factor: 8 }
    }

    pub fn full(num_classes: usize) -> Self {
        ModelConfig { num_classes, image_size: 320, scale: Scale::Full, pool_factor: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!("image size {} is not divisible by 4", self.image_size)));
        }
        if self.pool_factor == 0 || self.image_size % self.pool_factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "pool factor {} does not divide image size {}",
                self.pool_factor, self.image_size
            )));
        }
        if self.critic_stages() == 0 {
            return Err(Error::InvalidConfig(format!("image size {} too small for the critic", self.image_size)));
        }
        Ok(())
    }

    /// Task-embedding width; equals the upsampled task-code length (100 for five classes).
    pub fn embedding_width(&self) -> i64 {
        (TASK_CODE_REPEAT * self.num_classes) as i64
    }

    /// Output channels of the three down-sampling convolutions.
    pub fn generator_channels(&self) -> [i64; 3] {
        let d = self.scale.width_divisor();
        [64 / d, 128 / d, 256 / d]
    }

    pub fn bottleneck_blocks(&self) -> usize {
        self.scale.bottleneck_blocks()
    }

    /// Stride-2 stages stop once the score map would fall below 4×4, so small
    /// inputs get fewer than six stages (instance statistics over a 1×1 map are
    /// degenerate).
    pub fn critic_stages(&self) -> usize {
        let mut stages = 0;
        let mut side = self.image_size;
        while stages < MAX_CRITIC_STAGES && side % 2 == 0 && side / 2 >= 4 {
            side /= 2;
            stages += 1;
        }
        stages
    }

    pub fn critic_channels(&self) -> Vec<i64> {
        let d = self.scale.width_divisor();
        (0..self.critic_stages()).map(|i| (64 << i) / d).collect()
    }

    pub fn pooled_side(&self) -> usize {
        self.image_size / self.pool_factor
    }
}

pub(crate) fn conv_init() -> nn::Init {
    nn::Init::Randn { mean: 0.0, stdev: 0.02 }
}

/// Per-instance, per-channel normalization over spatial dims (biased variance).
/// Built from elementary ops so it supports double backward.
pub fn instance_norm(x: &Tensor) -> Tensor {
    let dims: &[i64] = &[2, 3];
    let mean = x.mean_dim(dims, true, x.kind());
    let centered = x - mean;
    let var = centered.square().mean_dim(dims, true, x.kind());
    centered / (var + INSTANCE_NORM_EPS).sqrt()
}

/// The eight-layer fully connected network mapping a task code to its embedding.
#[derive(Debug)]
pub struct TaskEmbedder {
    layers: Vec<nn::Linear>,
}

impl TaskEmbedder {
    pub fn new(path: &nn::Path, width: i64) -> Self {
        let layers = (0..TASK_EMBEDDING_LAYERS)
            .map(|i| nn::linear(path / format!("fc{i}"), width, width, Default::default()))
            .collect();
        TaskEmbedder { layers }
    }

    /// ReLU between layers, none after the last.
    pub fn forward(&self, code: &TaskCode) -> Result<Tensor> {
        let width = self.layers[0].ws.size()[1];
        if code.len() as i64 != width {
            return Err(Error::ShapeMismatch(format!(
                "task code of length {} for embedding width {width}",
                code.len()
            )));
        }
        let mut h = code.to_tensor().to_kind(self.layers[0].ws.kind());
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.apply(layer);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// Instance normalization followed by a per-channel affine transform whose
/// parameters come from a linear head on the task embedding.
#[derive(Debug)]
pub struct AdaIn {
    head: nn::Linear,
    channels: i64,
}

impl AdaIn {
    pub fn new(path: &nn::Path, embedding_width: i64, channels: i64) -> Self {
        AdaIn { head: nn::linear(path / "affine", embedding_width, 2 * channels, Default::default()), channels }
    }

    /// `(scale, shift)`, each `(1, channels)`; the scale is `1 + head output`.
    pub fn affine(&self, embedding: &Tensor) -> (Tensor, Tensor) {
        let params = embedding.apply(&self.head);
        let parts = params.split(self.channels, 1);
        (&parts[0] + 1.0, parts[1].shallow_clone())
    }

    pub fn forward(&self, x: &Tensor, embedding: &Tensor) -> Tensor {
        let (scale, shift) = self.affine(embedding);
        let scale = scale.view([1, self.channels, 1, 1]);
        let shift = shift.view([1, self.channels, 1, 1]);
        instance_norm(x) * scale + shift
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn critic_depth_follows_image_size() {
        assert_eq!(ModelConfig::desk(3).critic_stages(), 4);
        assert_eq!(ModelConfig::full(5).critic_stages(), 6);
        assert_eq!(ModelConfig::full(5).critic_channels(), vec![64, 128, 256, 512, 1024, 2048]);
        assert_eq!(ModelConfig::desk(3).critic_channels(), vec![16, 32, 64, 128]);
        assert_eq!(ModelConfig::full(5).embedding_width(), 100);
        assert_eq!(ModelConfig::full(5).pooled_side(), 10);
        assert_eq!(ModelConfig::desk(3).pooled_side(), 8);
    }

    #[test]
    fn invalid_pool_factor_rejected() {
        let cfg = ModelConfig { pool_factor: 7, ..ModelConfig::desk(3) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let x = Tensor::randn([2, 3, 8, 8], (Kind::Float, Device::Cpu)) * 3.0 + 1.5;
        let y = instance_norm(&x);
        let mean = y.mean_dim(&[2i64, 3][..], false, Kind::Float);
        let var = y.square().mean_dim(&[2i64, 3][..], false, Kind::Float);
        assert!(mean.abs().max().double_value(&[]) < 1e-5);
        assert!((var - 1.0).abs().max().double_value(&[]) < 1e-3);
    }
}
