use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every violated constraint of a configuration, reported together.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid model configuration: {}", .violations.join("; "))]
pub struct ConfigError {
    pub violations: Vec<String>,
}

/// Architecture hyperparameters.
///
/// `base_width` is the channel count of E5 (2048 for the ResNet-101 shape);
/// every other width is derived from it. The three ablation switches select
/// the ASPP centre block, the Smooth refiner and the deep-supervision heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub base_width: usize,
    /// Output channels of the 7x7 stem convolution (E1).
    pub stem_width: usize,
    /// Bottleneck blocks in E2, E3, E4 and E5.
    pub encoder_blocks: [usize; 4],
    pub aspp_dilations: Vec<usize>,
    pub aspp_pool_branch: bool,
    pub use_aspp: bool,
    pub use_smooth: bool,
    pub use_multiscale_loss: bool,
    pub aux_loss_weight: f32,
    /// `(height, width)`, both multiples of 16.
    pub input_hw: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 20,
            base_width: 2048,
            stem_width: 64,
            encoder_blocks: [3, 4, 23, 3],
            aspp_dilations: vec![12, 24, 36],
            aspp_pool_branch: false,
            use_aspp: true,
            use_smooth: true,
            use_multiscale_loss: true,
            aux_loss_weight: 0.5,
            input_hw: (256, 192),
        }
    }
}

impl ModelConfig {
    /// Full-width ResNet-101 layout at 256x192.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Desk-scale layout: one bottleneck per stage.
    pub fn toy(base_width: usize, num_classes: usize, input_hw: (usize, usize)) -> Self {
        ModelConfig {
            num_classes,
            base_width,
            stem_width: 16,
            encoder_blocks: [1, 1, 1, 1],
            input_hw,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        if self.num_classes < 2 || self.num_classes > 255 {
            v.push(format!("num_classes must be in [2, 255], got {}", self.num_classes));
        }
        if self.base_width == 0 || !self.base_width.is_multiple_of(8) {
            v.push(format!(
                "base_width must be a positive multiple of 8, got {}",
                self.base_width
            ));
        }
        if self.stem_width == 0 {
            v.push("stem_width must be positive".to_string());
        }
        if self.encoder_blocks.contains(&0) {
            v.push(format!(
                "encoder_blocks must all be >= 1, got {:?}",
                self.encoder_blocks
            ));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            v.push(format!("input_hw must be positive multiples of 16, got {h}x{w}"));
        }
        if self.use_aspp && self.aspp_dilations.is_empty() {
            v.push("aspp_dilations must be non-empty when use_aspp is set".to_string());
        }
        if self.aspp_dilations.contains(&0) {
            v.push("aspp_dilations must all be >= 1".to_string());
        }
        if !(self.aux_loss_weight.is_finite() && self.aux_loss_weight >= 0.0) {
            v.push(format!(
                "aux_loss_weight must be finite and >= 0, got {}",
                self.aux_loss_weight
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations: v })
        }
    }

    /// Canonical text of the fields that determine the parameter layout.
    pub fn architecture_key(&self) -> String {
        let dil: Vec<String> = self.aspp_dilations.iter().map(|d| d.to_string()).collect();
        let blocks: Vec<String> = self.encoder_blocks.iter().map(|d| d.to_string()).collect();
        format!(
            "num_classes={}\nbase_width={}\nstem_width={}\nencoder_blocks={}\naspp_dilations={}\naspp_pool_branch={}\nuse_aspp={}\nuse_smooth={}\nuse_multiscale_loss={}\n",
            self.num_classes,
            self.base_width,
            self.stem_width,
            blocks.join(","),
            dil.join(","),
            self.aspp_pool_branch,
            self.use_aspp,
            self.use_smooth,
            self.use_multiscale_loss,
        )
    }

    /// CRC32 of [`architecture_key`](Self::architecture_key).
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(self.architecture_key().as_bytes())
    }

    /// Channels of E2..E5.
    pub fn stage_widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [b / 8, b / 4, b / 2, b]
    }
}
