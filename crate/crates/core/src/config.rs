//! Model, adapter and training configuration.
//!
//! Configs are TOML files with one table per struct (`[vit]`, `[cnn]`,
//! `[adapter]`, `[train]`). Every field is a key; missing keys take the
//! desk-profile defaults. `key=value` overrides use dotted paths such as
//! `train.epochs=5`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 64,
            patch_size: 16,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    /// ViT-B/16 at 224 pixels.
    pub fn full_scale() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// CLS plus one token per patch.
    pub fn num_tokens(&self) -> usize {
        1 + self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("num_layers and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            stage_channels: vec![16, 32, 64, 128],
            stage_strides: vec![4, 2, 2, 2],
            kernel_sizes: vec![7, 3, 3, 3],
        }
    }
}

impl CnnConfig {
    /// ResNet-50 stage widths with the stride-4 stem schedule.
    pub fn full_scale() -> Self {
        CnnConfig {
            stage_channels: vec![256, 512, 1024, 2048],
            stage_strides: vec![4, 2, 2, 2],
            kernel_sizes: vec![7, 3, 3, 3],
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4
            || self.stage_strides.len() != 4
            || self.kernel_sizes.len() != 4
        {
            return Err(Error::Config(
                "the CNN needs exactly 4 stages (channels, strides, kernel sizes)".into(),
            ));
        }
        if self.stage_strides[1..].iter().any(|&s| s != 2) || self.stage_strides[0] == 0 {
            return Err(Error::Config(
                "stages 2-4 must halve the resolution (stride 2)".into(),
            ));
        }
        if self.stage_channels.contains(&0) || self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config("channels must be positive and kernels odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Shared channel count `c` after the extractor convolutions.
    pub extractor_channels: usize,
    /// Pooled spatial size `(m, n)` of every stage.
    pub pooled_h: usize,
    pub pooled_w: usize,
    /// Latent dimension `r` of the injector.
    pub latent_dim: usize,
    /// Cross-attention heads `h`.
    pub heads: usize,
    /// Number of interactions `N`; must divide the encoder depth.
    pub interactions: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            extractor_channels: 16,
            pooled_h: 4,
            pooled_w: 4,
            latent_dim: 16,
            heads: 4,
            interactions: 4,
        }
    }
}

impl AdapterConfig {
    pub fn full_scale() -> Self {
        AdapterConfig {
            extractor_channels: 64,
            pooled_h: 7,
            pooled_w: 7,
            latent_dim: 64,
            heads: 4,
            interactions: 12,
        }
    }

    /// `T_msd = 4 · m · n`.
    pub fn msd_tokens(&self) -> usize {
        4 * self.pooled_h * self.pooled_w
    }

    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        if self.extractor_channels == 0 || self.pooled_h == 0 || self.pooled_w == 0 {
            return Err(Error::Config("extractor channels and pooled size must be positive".into()));
        }
        if self.heads == 0 || self.latent_dim == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        if self.interactions == 0 || vit.num_layers % self.interactions != 0 {
            return Err(Error::Config(format!(
                "interactions {} does not divide num_layers {}",
                self.interactions, vit.num_layers
            )));
        }
        Ok(())
    }
}

/// Which parameters are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Extractor, injectors and head.
    Loda,
    /// Head only.
    LinearProbe,
    /// Every ViT tensor and the head; no CNN branch.
    FullFinetune,
    /// Extractor and head, with distortion tokens added directly to the
    /// patch tokens instead of going through cross-attention.
    ExtractorOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Loda, Mode::LinearProbe, Mode::FullFinetune, Mode::ExtractorOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Loda => "loda",
            Mode::LinearProbe => "linear_probe",
            Mode::FullFinetune => "full_finetune",
            Mode::ExtractorOnly => "extractor_only",
        }
    }

    pub fn uses_cnn(&self) -> bool {
        matches!(self, Mode::Loda | Mode::ExtractorOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patches_per_train_image: usize,
    pub patches_per_test_image: usize,
    pub crop_size: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Number of random 80/20 splits for `run_splits`.
    pub splits: usize,
    pub train_fraction: f64,
    /// Evaluate the held-out set after every epoch instead of only the last.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            lr_min: 0.0,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 10,
            patches_per_train_image: 1,
            patches_per_test_image: 15,
            crop_size: 64,
            mode: Mode::Loda,
            seed: 0,
            splits: 10,
            train_fraction: 0.8,
            eval_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::Config("need 0 <= lr_min <= lr and lr > 0".into()));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs >= 1 and batch_size >= 2 required".into()));
        }
        if self.patches_per_train_image == 0 || self.patches_per_test_image == 0 {
            return Err(Error::Config("patch counts must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || self.splits == 0 {
            return Err(Error::Config("train_fraction must be in (0,1) and splits >= 1".into()));
        }
        Ok(())
    }
}

/// Synthetic dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub bases: Vec<String>,
    pub distortions: Vec<String>,
    pub severities: Vec<f64>,
    pub images_per_cell: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 80,
            bases: vec!["gaussian_field".into(), "checker".into()],
            distortions: vec!["blur".into(), "additive_noise".into()],
            severities: (0..16).map(|i| i as f64 * 0.25).collect(),
            images_per_cell: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub vit: VitConfig,
    pub cnn: CnnConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    /// Desk profile: every default.
    pub fn desk() -> Config {
        Config::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.cnn.validate()?;
        self.adapter.validate(&self.vit)?;
        self.train.validate()?;
        if self.vit.image_size % self.cnn.total_stride() != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by the CNN total stride {}",
                self.vit.image_size,
                self.cnn.total_stride()
            )));
        }
        if self.train.crop_size != self.vit.image_size {
            return Err(Error::Config(format!(
                "crop_size {} must equal the ViT image_size {}",
                self.train.crop_size, self.vit.image_size
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Config> {
        let mut value: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: Config = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file (or the defaults when `path` is `None`) and apply
    /// `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Config::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    // Parse the right-hand side as a TOML value; bare words become strings.
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::desk().validate().unwrap();
        assert_eq!(VitConfig::default().num_tokens(), 17);
        assert_eq!(VitConfig::full_scale().num_tokens(), 197);
    }

    #[test]
    fn overrides_apply() {
        let cfg = Config::from_toml_str(
            "[train]\nepochs = 3\n",
            &["train.mode=linear_probe".into(), "adapter.latent_dim=32".into(), "train.lr=0.001".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.mode, Mode::LinearProbe);
        assert_eq!(cfg.adapter.latent_dim, 32);
        assert_eq!(cfg.train.lr, 0.001);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(Config::from_toml_str("[train]\nepoch = 3\n", &[]).is_err());
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let mut cfg = Config::desk();
        cfg.vit.image_size = 60;
        assert!(matches!(cfg.vit.validate(), Err(Error::Config(_))));
        let mut a = AdapterConfig::default();
        a.latent_dim = 18;
        assert!(a.validate(&VitConfig::default()).is_err());
        a.latent_dim = 16;
        a.interactions = 3;
        assert!(a.validate(&VitConfig::default()).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = Config::desk();
        let back = Config::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(cfg, back);
    }
}
