//! Flat key-value run configuration covering every module's knobs. Unknown
//! keys are rejected at parse time.

use crate::error::{Error, Result};
use crate::gendisc::{CondKind, GeneratorConfig};
use crate::losses::LossWeights;
use crate::man::{AudioBranch, ManConfig, Source, VideoBranch};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Networks,
    Sources,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,

    // generator / normalization
    pub frame_size: usize,
    pub base_channels: usize,
    pub n_man_blocks: usize,
    pub video_branch: VideoBranch,
    pub audio_branch: AudioBranch,
    pub enabled_sources: Vec<Source>,
    pub flow_or_heatmap: CondKind,
    pub channel_width: usize,
    pub spectral_norm: bool,
    pub shared_gate: bool,

    // discriminator
    pub disc_scales: usize,
    pub disc_base_channels: usize,

    // optimization
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,

    // losses
    pub w_gan: f64,
    pub w_cam: f64,
    pub w_recon: f64,
    pub w_fm: f64,
    pub w_perc: f64,
    pub w_pred: f64,
    pub saturating_gan: bool,

    // data
    pub synthetic: bool,
    pub n_clips: usize,
    pub clip_secs: f64,
    pub dataset_dir: Option<String>,
    pub pitch_lo: f64,
    pub pitch_hi: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            out_dir: "runs/default".into(),
            frame_size: 32,
            base_channels: 32,
            n_man_blocks: 8,
            video_branch: VideoBranch::Conv2d,
            audio_branch: AudioBranch::Conv1d,
            enabled_sources: Source::ALL.to_vec(),
            flow_or_heatmap: CondKind::OpticalFlow,
            channel_width: 8,
            spectral_norm: true,
            shared_gate: false,
            disc_scales: 2,
            disc_base_channels: 8,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.90,
            steps: 300,
            batch_size: 2,
            checkpoint_every: 100,
            w_gan: 1.0,
            w_cam: 1.0,
            w_recon: 10.0,
            w_fm: 10.0,
            w_perc: 1.0,
            w_pred: 10.0,
            saturating_gan: false,
            synthetic: true,
            n_clips: 8,
            clip_secs: 2.0,
            dataset_dir: None,
            pitch_lo: 0.0,
            pitch_hi: 400.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator_config().validate()?;
        if self.disc_scales < 2 {
            return Err(Error::Config("disc_scales must be >= 2".into()));
        }
        if self.frame_size >> (self.disc_scales - 1) < 16 {
            return Err(Error::Config(format!(
                "frame_size {} too small for {} discriminator scales",
                self.frame_size, self.disc_scales
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.synthetic && self.dataset_dir.is_none() {
            return Err(Error::Config(
                "dataset_dir is required when synthetic = false".into(),
            ));
        }
        if self.pitch_lo >= self.pitch_hi {
            return Err(Error::Config("pitch_lo must be < pitch_hi".into()));
        }
        Ok(())
    }

    /// Apply one `key=value` override (the `--set` CLI flag). The key must
    /// already exist in the flat schema.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml_string()).expect("config round-trips");
        if !table.contains_key(key) && key != "dataset_dir" {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
        let parsed: toml::Value = if key == "enabled_sources" {
            toml::Value::Array(
                value
                    .split(',')
                    .map(|s| toml::Value::String(s.trim().to_string()))
                    .collect(),
            )
        } else if let Ok(b) = value.parse::<bool>() {
            toml::Value::Boolean(b)
        } else if let Ok(i) = value.parse::<i64>() {
            toml::Value::Integer(i)
        } else if let Ok(f) = value.parse::<f64>() {
            toml::Value::Float(f)
        } else {
            toml::Value::String(value.to_string())
        };
        table.insert(key.to_string(), parsed);
        let updated: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn man_config(&self) -> ManConfig {
        ManConfig {
            video_branch: self.video_branch,
            audio_branch: self.audio_branch,
            enabled_sources: self.enabled_sources.clone(),
            channel_width: self.channel_width,
            eps: crate::man::INSTANCE_NORM_EPS,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            frame_size: self.frame_size,
            base_channels: self.base_channels,
            n_man_blocks: self.n_man_blocks,
            flow_or_heatmap: self.flow_or_heatmap,
            man: self.man_config(),
            spectral_norm: self.spectral_norm,
            shared_gate: self.shared_gate,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_gan: self.w_gan,
            w_cam: self.w_cam,
            w_recon: self.w_recon,
            w_fm: self.w_fm,
            w_perc: self.w_perc,
            w_pred: self.w_pred,
        }
    }

    /// The six network-variant ablation rows, in table order.
    pub fn network_variants() -> Vec<(&'static str, VideoBranch, AudioBranch)> {
        vec![
            ("2DConv+1dConv", VideoBranch::Conv2d, AudioBranch::Conv1d),
            (
                "Partial2DConv+1dConv",
                VideoBranch::PartialConv2d,
                AudioBranch::Conv1d,
            ),
            (
                "2DConv+ECA+1dConv",
                VideoBranch::Conv2dEca,
                AudioBranch::Conv1d,
            ),
            ("2DConv+LSTM", VideoBranch::Conv2d, AudioBranch::Lstm),
            (
                "Partial2DConv+LSTM",
                VideoBranch::PartialConv2d,
                AudioBranch::Lstm,
            ),
            ("2DConv+ECA+LSTM", VideoBranch::Conv2dEca, AudioBranch::Lstm),
        ]
    }

    /// The four incremental-source ablation rows, in table order.
    pub fn source_variants() -> Vec<(&'static str, Vec<Source>)> {
        vec![
            ("Base Model(BM)", vec![Source::Image]),
            (
                "BM+OFP+mel",
                vec![Source::Image, Source::FlowOrHeatmap, Source::Mel],
            ),
            (
                "BM+OFP+mel+pitch",
                vec![
                    Source::Image,
                    Source::FlowOrHeatmap,
                    Source::Mel,
                    Source::Pitch,
                ],
            ),
            (
                "BM+OFP+mel+pitch+energy",
                vec![
                    Source::Image,
                    Source::FlowOrHeatmap,
                    Source::Mel,
                    Source::Pitch,
                    Source::Energy,
                ],
            ),
        ]
    }

    /// Stable hash of the serialized config (used to tell ablation rows
    /// apart and to stamp checkpoints).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
