//! Run configuration: a sectioned TOML file with defaults for every key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("writing config: {0}")]
    Write(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feat2dMode {
    /// Every H_2D cell is a key.
    Flatting,
    /// Keys are H_2D bilinearly sampled at the detected 2D joints.
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feat3dMode {
    None,
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occlusion {
    None,
    Object,
    Person,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input patch side S in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub enc2d_layers: usize,
    pub enc3d_layers: usize,
    /// Decoder layers of the initial regression.
    pub dec_layers: usize,
    pub refine_layers: usize,
    pub lift_conv_blocks: usize,
    pub num_joints: usize,
    pub latent_dim: usize,
    pub lambda_init: f64,
    /// Heatmap Gaussian width in pixels.
    pub heatmap_sigma: f64,
    pub smpl_token: bool,
    pub feat2d: Feat2dMode,
    pub feat3d: Feat3dMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Std-dev of the noise added to ground-truth 2D joints to emulate a
    /// detector, normalized image units.
    pub detector_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub l3d: bool,
    pub l2d: bool,
    pub lsmpl: bool,
    pub j2n: bool,
    pub j2j: bool,
    /// Refinement round whose joints feed the contrast losses; absent
    /// means the final one.
    pub contrast_round: Option<usize>,
}

/// Anchor, positive and negative counts for one contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub anchors: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub tau: f64,
    pub j2n_anchors: usize,
    pub j2n_positives: usize,
    pub j2n_negatives: usize,
    pub j2j_anchors: usize,
    pub j2j_positives: usize,
    pub j2j_negatives: usize,
    pub detach_gt: bool,
    pub detach_negatives: bool,
}

impl ContrastConfig {
    pub fn j2n(&self) -> Budget {
        Budget {
            anchors: self.j2n_anchors,
            positives: self.j2n_positives,
            negatives: self.j2n_negatives,
        }
    }

    pub fn j2j(&self) -> Budget {
        Budget {
            anchors: self.j2j_anchors,
            positives: self.j2j_positives,
            negatives: self.j2j_negatives,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub shard_size: usize,
    pub occlusion: Occlusion,
    /// Half-width of the uniform axis-angle noise per pose component.
    pub pose_noise: f64,
    /// Radius of the ball shape coefficients are drawn from.
    pub shape_noise: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Half-width of the uniform camera translation.
    pub trans_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub contrast: ContrastConfig,
    pub data: DataConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 128,
            depth: 8,
            height: 8,
            width: 8,
            heads: 4,
            mlp_ratio: 2,
            enc2d_layers: 1,
            enc3d_layers: 1,
            dec_layers: 1,
            refine_layers: 3,
            lift_conv_blocks: 1,
            num_joints: 17,
            latent_dim: 32,
            lambda_init: 3.0,
            heatmap_sigma: 2.0,
            smpl_token: true,
            feat2d: Feat2dMode::Flatting,
            feat3d: Feat3dMode::Sampling,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            steps: 1000,
            checkpoint_every: 500,
            grad_clip: 1.0,
            detector_noise: 0.02,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            l3d: true,
            l2d: true,
            lsmpl: true,
            j2n: true,
            j2j: true,
            contrast_round: None,
        }
    }
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            j2n_anchors: 100,
            j2n_positives: 1024,
            j2n_negatives: 2048,
            j2j_anchors: 100,
            j2j_positives: 128,
            j2j_negatives: 256,
            detach_gt: false,
            detach_negatives: false,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 64,
            shard_size: 32,
            occlusion: Occlusion::Object,
            pose_noise: 0.35,
            shape_noise: 1.0,
            scale_min: 0.8,
            scale_max: 1.2,
            trans_range: 0.1,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// Single-machine defaults.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            contrast: ContrastConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Full-size extents and batch.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.model.image_size = 256;
        c.model.channels = 256;
        c.model.heads = 8;
        c.model.enc2d_layers = 3;
        c.model.enc3d_layers = 3;
        c.model.dec_layers = 3;
        c.model.heatmap_sigma = 4.0;
        c.train.batch_size = 256;
        c
    }

    /// Reduced extents that train in minutes on one CPU core.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.model.image_size = 32;
        c.model.channels = 32;
        c.model.depth = 4;
        c.model.height = 4;
        c.model.width = 4;
        c.model.heads = 2;
        c.model.heatmap_sigma = 1.5;
        c.train.batch_size = 8;
        c.train.lr = 1e-3;
        c.contrast.j2n_anchors = 32;
        c.contrast.j2n_positives = 64;
        c.contrast.j2n_negatives = 128;
        c.contrast.j2j_anchors = 32;
        c.contrast.j2j_positives = 16;
        c.contrast.j2j_negatives = 64;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            "smoke" => Some(Self::smoke()),
            _ => None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the effective configuration as `config.toml` in `dir`.
    pub fn echo_into(&self, dir: impl AsRef<Path>) -> Result<(), ConfigError> {
        std::fs::write(dir.as_ref().join("config.toml"), self.to_toml_string()?)?;
        Ok(())
    }

    /// Number of stride-2 extractor blocks taking S down to H.
    pub fn extractor_blocks(&self) -> Option<usize> {
        let m = &self.model;
        if m.height == 0 || m.image_size % m.height != 0 {
            return None;
        }
        let r = m.image_size / m.height;
        (r.is_power_of_two() && r >= 2).then(|| r.trailing_zeros() as usize)
    }

    pub fn contrast_round(&self) -> usize {
        self.loss.contrast_round.unwrap_or(self.model.refine_layers)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let m = &self.model;
        for (name, v) in [
            ("model.image_size", m.image_size),
            ("model.channels", m.channels),
            ("model.depth", m.depth),
            ("model.height", m.height),
            ("model.width", m.width),
            ("model.heads", m.heads),
            ("model.mlp_ratio", m.mlp_ratio),
            ("model.num_joints", m.num_joints),
            ("model.latent_dim", m.latent_dim),
            ("train.batch_size", self.train.batch_size),
            ("train.checkpoint_every", self.train.checkpoint_every),
            ("data.shard_size", self.data.shard_size),
            ("contrast.j2n_anchors", self.contrast.j2n_anchors),
            ("contrast.j2n_positives", self.contrast.j2n_positives),
            ("contrast.j2n_negatives", self.contrast.j2n_negatives),
            ("contrast.j2j_anchors", self.contrast.j2j_anchors),
            ("contrast.j2j_positives", self.contrast.j2j_positives),
            ("contrast.j2j_negatives", self.contrast.j2j_negatives),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if m.channels % m.heads != 0 {
            return bad(format!(
                "model.heads ({}) must divide model.channels ({})",
                m.heads, m.channels
            ));
        }
        if m.height != m.width {
            return bad("model.height and model.width must be equal".into());
        }
        match self.extractor_blocks() {
            Some(n) if n <= 5 => {}
            _ => {
                return bad(format!(
                    "model.image_size {} must reduce to model.height {} by 1 to 5 stride-2 blocks",
                    m.image_size, m.height
                ))
            }
        }
        if !(m.lambda_init > 1.0) {
            return bad("model.lambda_init must exceed 1".into());
        }
        if !(m.heatmap_sigma > 0.0) {
            return bad("model.heatmap_sigma must be positive".into());
        }
        if m.feat3d == Feat3dMode::None && (self.loss.j2n || self.loss.j2j) {
            return bad("loss.j2n and loss.j2j need model.feat3d = \"sampling\"".into());
        }
        if self.contrast_round() > m.refine_layers {
            return bad(format!(
                "loss.contrast_round {} exceeds model.refine_layers {}",
                self.contrast_round(),
                m.refine_layers
            ));
        }
        if !(self.contrast.tau > 0.0) {
            return bad("contrast.tau must be positive".into());
        }
        if !(self.train.lr > 0.0) || self.train.weight_decay < 0.0 || self.train.grad_clip < 0.0 {
            return bad("train.lr must be positive; weight_decay and grad_clip nonnegative".into());
        }
        if self.train.detector_noise < 0.0 {
            return bad("train.detector_noise must be nonnegative".into());
        }
        let d = &self.data;
        if !(d.scale_min > 0.0 && d.scale_min <= d.scale_max) {
            return bad("data.scale_min must be positive and not above data.scale_max".into());
        }
        if d.pose_noise < 0.0 || d.shape_noise < 0.0 || d.trans_range < 0.0 {
            return bad("data noise ranges must be nonnegative".into());
        }
        Ok(())
    }
}
