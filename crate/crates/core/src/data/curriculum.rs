use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Training-time noise condition of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrChoice {
    Clean,
    Db(f64),
}

impl SnrChoice {
    /// SNR in dB, `+∞` for clean.
    pub fn db(self) -> f64 {
        match self {
            Self::Clean => f64::INFINITY,
            Self::Db(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub phase1_epochs: usize,
    /// High-SNR grid of the recognition-only phase.
    pub phase1_snrs: Vec<f64>,
    /// Full grid of the joint phase.
    pub full_snrs: Vec<f64>,
    pub clean_fraction: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 20,
            phase1_snrs: vec![7.5, 12.5, 17.5],
            full_snrs: vec![-7.5, -2.5, 2.5, 7.5, 12.5, 17.5],
            clean_fraction: 0.5,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_snrs.is_empty() || self.full_snrs.is_empty() {
            return contract("SNR grids must be non-empty");
        }
        if let Some(v) = self
            .phase1_snrs
            .iter()
            .find(|v| !self.full_snrs.contains(v))
        {
            return contract(format!("phase-1 SNR {v} dB is missing from the full grid"));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return contract(format!(
                "clean fraction {} outside [0, 1]",
                self.clean_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumPhase {
    /// 1 or 2.
    pub index: u8,
    pub snr_choices: Vec<SnrChoice>,
    pub enhance_enabled: bool,
    clean_fraction: f64,
}

impl CurriculumPhase {
    /// A clean draw with probability `clean_fraction`, otherwise a uniform
    /// pick from the phase's dB grid.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> SnrChoice {
        if rng.random::<f64>() < self.clean_fraction {
            return SnrChoice::Clean;
        }
        let grid: Vec<SnrChoice> = self
            .snr_choices
            .iter()
            .copied()
            .filter(|c| *c != SnrChoice::Clean)
            .collect();
        grid[rng.random_range(0..grid.len())]
    }
}

pub fn curriculum_phase(epoch: usize, cfg: &CurriculumConfig) -> CurriculumPhase {
    let (index, snrs, enhance_enabled) = if epoch < cfg.phase1_epochs {
        (1, &cfg.phase1_snrs, false)
    } else {
        (2, &cfg.full_snrs, true)
    };
    let mut snr_choices: Vec<SnrChoice> = snrs.iter().map(|&v| SnrChoice::Db(v)).collect();
    snr_choices.push(SnrChoice::Clean);
    CurriculumPhase {
        index,
        snr_choices,
        enhance_enabled,
        clean_fraction: cfg.clean_fraction,
    }
}
