use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Activation;
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub stage_channels: Vec<usize>,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            stage_channels: vec![16, 32, 64, 128],
            activation: Activation::LeakyRelu(LEAKY_SLOPE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidValue("encoder needs at least one input channel".into()));
        }
        if self.stage_channels.len() < 2 {
            return Err(Error::InvalidValue("encoder needs at least 2 stages".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) || self.stage_channels[0] == 0 {
            return Err(Error::InvalidValue(format!(
                "encoder channels must be positive and ascending, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }

    /// Input edge lengths must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn pyramid_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateConfig {
    pub latent_dim: usize,
    /// Edge of the grid produced by the latent projection.
    pub base_resolution: usize,
    pub base_channels: usize,
    /// Channels after each upsampling stage; the output edge is
    /// `base_resolution * 2^stages`.
    pub stage_channels: Vec<usize>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            base_resolution: 4,
            base_channels: 32,
            stage_channels: vec![32, 16, 8],
        }
    }
}

impl TemplateConfig {
    /// Paper scale: a 1024-d latent decoded to 128³.
    pub fn paper() -> Self {
        Self {
            latent_dim: 1024,
            base_resolution: 4,
            base_channels: 128,
            stage_channels: vec![128, 64, 32, 32, 16],
        }
    }

    pub fn resolution(&self) -> usize {
        self.base_resolution << self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.base_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::InvalidValue("template sizes must be positive".into()));
        }
        if self.base_resolution < 2 {
            return Err(Error::InvalidValue("template base resolution must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointHeadConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Start with `d = 0` and `c = 0` for every point.
    pub zero_init_heads: bool,
}

impl Default for PointHeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::LeakyRelu(LEAKY_SLOPE),
            zero_init_heads: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `K + 1`, background included.
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub template: TemplateConfig,
    pub head: PointHeadConfig,
}

impl ModelConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            encoder: EncoderConfig::new(in_channels),
            template: TemplateConfig::default(),
            head: PointHeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::InvalidValue(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.head.hidden.is_empty() || self.head.hidden.contains(&0) {
            return Err(Error::InvalidValue("point head needs positive hidden widths".into()));
        }
        self.encoder.validate()?;
        self.template.validate()
    }

    /// Width of a point encoding: pyramid channels plus the 3 coordinates.
    pub fn encoding_width(&self) -> usize {
        self.encoder.pyramid_channels() + 3
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
