//! Run configuration: defaults, key=value config files, and the
//! flag-precedence merge. Unknown keys are rejected.

use anyhow::{bail, Context, Result};
use wxnn_core::backbone::BackboneConfig;
use wxnn_core::model::HeadMode;
use wxnn_core::trainer::TrainConfig;

/// Everything the `train` command needs beyond its file paths.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub tc: TrainConfig,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub backbone: BackboneConfig,
    pub kernel: usize,
    pub attention_mid: Option<usize>,
    pub head_mode: HeadMode,
    pub finetune_all: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            tc: TrainConfig::default(),
            epochs_stage1: 30,
            epochs_stage2: 30,
            backbone: BackboneConfig::full(),
            kernel: 3,
            attention_mid: None,
            head_mode: HeadMode::PerStep,
            finetune_all: false,
        }
    }
}

impl TrainSettings {
    /// The `--desk` preset: narrow backbone, 64×64 inputs.
    pub fn desk() -> Self {
        TrainSettings {
            backbone: BackboneConfig::desk(),
            ..TrainSettings::default()
        }
    }

    /// Apply `key = value` lines. '#' starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value, got '{line}'", idx + 1))?;
            let (key, value) = (key.trim(), value.trim());
            self.apply_key(key, value)
                .with_context(|| format!("line {}: key '{key}'", idx + 1))?;
        }
        Ok(())
    }

    fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow::anyhow!("bad value '{value}': {e}"))
        }
        match key {
            "lr" => self.tc.lr = num(value)?,
            "beta1" => self.tc.beta1 = num(value)?,
            "beta2" => self.tc.beta2 = num(value)?,
            "adam-eps" => self.tc.adam_eps = num(value)?,
            "dropout" => self.tc.dropout = num(value)?,
            "l2" => self.tc.l2 = num(value)?,
            "batch-size" => self.tc.batch_size = num(value)?,
            "lr-drop-factor" => self.tc.lr_drop_factor = num(value)?,
            "lr-patience" => self.tc.lr_patience = num(value)?,
            "min-improvement" => self.tc.min_improvement = num(value)?,
            "max-lr-drops" => self.tc.max_lr_drops = num(value)?,
            "seed" => self.tc.seed = num(value)?,
            "noise-sigma" => self.tc.noise_sigma = num(value)?,
            "flip-prob" => self.tc.flip_prob = num(value)?,
            "epochs-stage1" => self.epochs_stage1 = num(value)?,
            "epochs-stage2" => self.epochs_stage2 = num(value)?,
            "input-size" => self.backbone.input_size = num(value)?,
            "pre-size" => self.backbone.pre_size = num(value)?,
            "backbone" => self.backbone.groups = BackboneConfig::parse_groups(value)?,
            "kernel" => self.kernel = num(value)?,
            "attention-mid" => self.attention_mid = Some(num(value)?),
            "head-mode" => self.head_mode = HeadMode::parse(value)?,
            "finetune-all" => self.finetune_all = num(value)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults() {
        let mut s = TrainSettings::default();
        s.apply_config_text("lr = 0.001\nbatch-size=8\n# comment\nbackbone = 4x1,8x1\n")
            .unwrap();
        assert_eq!(s.tc.lr, 0.001);
        assert_eq!(s.tc.batch_size, 8);
        assert_eq!(s.backbone.groups.len(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut s = TrainSettings::default();
        assert!(s.apply_config_text("learning_rate = 0.1\n").is_err());
        assert!(s.apply_config_text("just a line\n").is_err());
    }
}
