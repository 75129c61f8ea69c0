//! Sectioned configuration shared by every subcommand.
//!
//! The on-disk format is TOML with the sections `[training]`,
//! `[generator]`, `[discriminator]`, `[mining]`, `[scene]` and `[data]`.
//! Every key is optional; missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Square frame side in pixels.
    pub image_size: usize,
    /// Width C of every temporal context row.
    pub context_width: usize,
    /// Channels C_f of the temporal feature map.
    pub feature_channels: usize,
    /// Side of the output feature grid; the encoder downsamples by 8.
    pub grid_size: usize,
    pub attention_heads: usize,
    /// Layer-normalize context rows before they enter the memory.
    pub normalize_context: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            context_width: 64,
            feature_channels: 64,
            grid_size: 8,
            attention_heads: 4,
            normalize_context: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_width == 0 || self.feature_channels == 0 {
            return Err(TdaError::Config("generator widths must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(TdaError::Config("image_size must be at least 16".into()));
        }
        if self.image_size % 8 != 0 || self.image_size / 8 != self.grid_size {
            return Err(TdaError::Config(format!(
                "grid_size {} must equal image_size / 8 ({} / 8)",
                self.grid_size, self.image_size
            )));
        }
        if self.attention_heads == 0 || self.feature_channels % self.attention_heads != 0 {
            return Err(TdaError::Config(format!(
                "feature_channels {} not divisible by attention_heads {}",
                self.feature_channels, self.attention_heads
            )));
        }
        Ok(())
    }

    /// Channel widths of the three encoder stages.
    pub fn encoder_channels(&self) -> [usize; 3] {
        let c = self.feature_channels;
        [(c / 4).max(1), (c / 2).max(1), c]
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorKind {
    /// Temporal-consistent discriminator.
    Tcd,
    /// Plain per-input Transformer discriminator.
    Pd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub kind: DiscriminatorKind,
    pub heads: usize,
    /// Token count L each context row is lifted to.
    pub token_expansion: usize,
    /// One discriminator for features and contexts; otherwise a second
    /// independent network classifies the temporal feature.
    pub shared: bool,
    pub gate_activation: GateActivation,
    /// Classify the temporal feature on its own instead of as the last
    /// step of the progressive chain.
    pub feature_separate: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            kind: DiscriminatorKind::Tcd,
            heads: 4,
            token_expansion: 4,
            shared: true,
            gate_activation: GateActivation::Sigmoid,
            feature_separate: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self, context_width: usize) -> Result<()> {
        if self.token_expansion == 0 {
            return Err(TdaError::Config("token_expansion must be positive".into()));
        }
        if self.heads == 0 || context_width % self.heads != 0 {
            return Err(TdaError::Config(format!(
                "context_width {context_width} not divisible by discriminator heads {}",
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvLoss {
    Bce,
    Lsgan,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvOn {
    Target,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_gt: f64,
    pub w_feat: f64,
    pub w_ctx: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_gt: 1.0,
            w_feat: 0.1,
            w_ctx: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub freeze_backbone_epochs: usize,
    pub disc_base_lr: f64,
    pub lr_power: f64,
    pub gen_base_lr: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub adv_loss: AdvLoss,
    pub adv_on: AdvOn,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Align temporal features F_t (the "IF" ablation axis).
    pub align_features: bool,
    /// Align temporal contexts M (the "TC" ablation axis).
    pub align_contexts: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            freeze_backbone_epochs: 10,
            disc_base_lr: 0.005,
            lr_power: 0.9,
            gen_base_lr: 0.001,
            loss_weights: LossWeights::default(),
            seed: 0,
            adv_loss: AdvLoss::Bce,
            adv_on: AdvOn::Both,
            d_steps: 1,
            align_features: true,
            align_contexts: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TdaError::Config("epochs must be positive".into()));
        }
        if self.freeze_backbone_epochs > self.epochs {
            return Err(TdaError::Config(format!(
                "freeze_backbone_epochs {} exceeds epochs {}",
                self.freeze_backbone_epochs, self.epochs
            )));
        }
        // Zero rates are allowed so a step can be run as a no-op probe.
        let rates = [self.disc_base_lr, self.gen_base_lr];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) || !self.lr_power.is_finite() {
            return Err(TdaError::Config(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        let w = &self.loss_weights;
        if [w.w_gt, w.w_feat, w.w_ctx].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TdaError::Config("loss weights must be non-negative".into()));
        }
        if self.d_steps == 0 {
            return Err(TdaError::Config("d_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub iou_min: f64,
    pub max_gap: usize,
    pub min_len: usize,
    pub z_size: usize,
    pub x_size: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            iou_min: 0.3,
            max_gap: 10,
            min_len: 16,
            z_size: 127,
            x_size: 287,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_min) {
            return Err(TdaError::Config("iou_min must lie in [0, 1]".into()));
        }
        if self.z_size == 0 || self.x_size == 0 {
            return Err(TdaError::Config("patch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Synthetic scene and night-transform parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Largest per-axis speed in px/frame.
    pub max_speed: f64,
    /// Seeds the background texture independently of the object layout.
    pub background_seed: Option<u64>,
    pub gamma: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 8.0,
            max_object_size: 16.0,
            max_speed: 2.0,
            background_seed: None,
            gamma: 2.2,
            brightness: 0.4,
            noise_sigma: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Day/night pairs generated when no data directory is given.
    pub pairs: usize,
    pub sequence_length: usize,
    /// Source sequences (and as many target sequences) per step.
    pub batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 400,
            sequence_length: 8,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub training: TrainingConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub mining: MiningConfig,
    pub scene: SceneSpec,
    pub data: DataConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| TdaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| TdaError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.generator.validate()?;
        self.discriminator.validate(self.generator.context_width)?;
        self.mining.validate()?;
        crate::synth::validate_spec(&self.scene).map_err(|e| TdaError::Config(e.to_string()))?;
        if self.data.sequence_length < 3 {
            return Err(TdaError::Config("sequence_length must be at least 3".into()));
        }
        if self.data.batch_size == 0 {
            return Err(TdaError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.training.epochs, 25);
        assert_eq!(cfg.training.freeze_backbone_epochs, 10);
        assert_eq!(cfg.training.disc_base_lr, 0.005);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = Config::from_toml_str(
            "[training]\nepochs = 3\nfreeze_backbone_epochs = 1\n[discriminator]\nkind = \"pd\"\n",
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.discriminator.kind, DiscriminatorKind::Pd);
        assert_eq!(cfg.generator, GeneratorConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            "[training]\nepochs = 0\n",
            "[training]\nepochs = 2\nfreeze_backbone_epochs = 3\n",
            "[generator]\ncontext_width = 0\n",
            "[generator]\ngrid_size = 4\n",
            "[training]\nunknown_key = 1\n",
            "[discriminator]\nheads = 5\n",
        ] {
            assert!(
                matches!(Config::from_toml_str(bad), Err(TdaError::Config(_))),
                "accepted {bad:?}"
            );
        }
    }
}
