use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CurriculumConfig, NoiseKind};
use crate::enhance::EnhanceWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::recognition::check_ctc_weight;

/// Everything a training or evaluation run needs. Loaded from a TOML file
/// of `key = value` lines; unspecified keys take the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `desk` or `paper`.
    pub profile: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-up length as a fraction of all optimizer steps.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Dropout rate inside attention, Conformer, and decoder blocks during
    /// training; decoding never drops.
    pub dropout: f64,
    /// λ of the hybrid loss.
    pub ctc_weight: f64,
    pub recon_weight: f64,
    pub percep_weight: f64,
    /// Enable the enhancement objective in the second curriculum phase.
    pub enhance: bool,
    /// Train and evaluate with the video stream; `false` is the audio-only
    /// ablation.
    pub use_video: bool,
    pub bottleneck_tokens: usize,
    pub avbc_layers: usize,
    pub phase1_epochs: usize,
    pub phase1_snrs: Vec<f64>,
    pub snr_grid: Vec<f64>,
    pub clean_fraction: f64,
    pub train_noises: Vec<NoiseKind>,
    pub beam_width: usize,
    /// Most recent per-epoch checkpoints kept on disk.
    pub keep_checkpoints: usize,
    /// Training utterances decoded for the per-epoch training WER.
    pub train_wer_samples: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let curriculum = CurriculumConfig::default();
        Self {
            profile: "desk".into(),
            seed: 0,
            epochs: 30,
            batch_size: 2,
            learning_rate: 6e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            grad_clip: 5.0,
            dropout: 0.1,
            ctc_weight: 0.1,
            recon_weight: 0.1,
            percep_weight: 0.1,
            enhance: true,
            use_video: true,
            bottleneck_tokens: 4,
            avbc_layers: 2,
            phase1_epochs: 10,
            phase1_snrs: curriculum.phase1_snrs,
            snr_grid: curriculum.full_snrs,
            clean_fraction: curriculum.clean_fraction,
            train_noises: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::BabbleLike],
            beam_width: 4,
            keep_checkpoints: 10,
            train_wer_samples: 10,
            n_train: 50,
            n_test: 20,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Applies `AVBC_SEED` and `AVBC_OUT` from `lookup` (normally the
    /// process environment).
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = lookup("AVBC_SEED") {
            self.seed = s.trim().parse().map_err(|_| {
                Error::Config(format!("AVBC_SEED={s:?} is not an unsigned integer"))
            })?;
        }
        if let Some(o) = lookup("AVBC_OUT") {
            self.out_dir = PathBuf::from(o);
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model_config()?;
        check_ctc_weight(self.ctc_weight).map_err(|e| Error::Config(e.to_string()))?;
        self.enhance_weights()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.curriculum()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.epochs == 0 || self.batch_size == 0 || self.beam_width == 0 {
            return bad("epochs, batch_size, and beam_width must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "learning_rate must be positive and warmup_fraction in [0, 1), got {} and {}",
                self.learning_rate, self.warmup_fraction
            ));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return bad("weight_decay must be non-negative and grad_clip positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.train_noises.is_empty() {
            return bad("train_noises must name at least one noise kind".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::profile(&self.profile)?;
        m.bottleneck_tokens = self.bottleneck_tokens;
        m.avbc_layers = self.avbc_layers;
        Ok(m)
    }

    pub fn enhance_weights(&self) -> Result<EnhanceWeights> {
        EnhanceWeights::new(self.recon_weight, self.percep_weight)
    }

    pub fn curriculum(&self) -> CurriculumConfig {
        CurriculumConfig {
            phase1_epochs: self.phase1_epochs,
            phase1_snrs: self.phase1_snrs.clone(),
            full_snrs: self.snr_grid.clone(),
            clean_fraction: self.clean_fraction,
        }
    }

    /// FNV-1a over the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("run config serialises");
        json.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }
}
