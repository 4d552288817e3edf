//! Experiment configuration.

use std::path::Path;

use csiguard_core::channel::{Point, SceneParams};
use csiguard_core::features::FeatureKind;
use csiguard_core::ofdm::{OfdmConfig, RateParams};
use csiguard_core::posnet::TrainParams;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Random,
    WhiteBox,
    Transfer,
    Pool,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Random => "random",
            Self::WhiteBox => "white_box",
            Self::Transfer => "transfer",
            Self::Pool => "pool",
        }
    }

    pub fn all() -> Vec<Self> {
        vec![Self::None, Self::Random, Self::WhiteBox, Self::Transfer, Self::Pool]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfdmSection {
    pub subcarriers: usize,
    pub cyclic_prefix: usize,
    pub channel_taps: usize,
    /// `null` means every subcarrier carries data.
    #[serde(default)]
    pub data_subcarriers: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: [usize; 4],
    pub grid_side: usize,
    /// Longest random perturbation seen during adversarial training.
    pub adversarial_max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub iterations: usize,
    pub step: f64,
    pub min_step: f64,
    pub restarts: usize,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneParams,
    /// Base station of the surrogate scene used by the transfer attack.
    pub alt_bs_position: Point,
    pub ofdm: OfdmSection,
    pub delay_taps: usize,
    pub snr_db: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Attacks are evaluated on the first `eval_samples` test samples
    /// (`null` = all).
    #[serde(default)]
    pub eval_samples: Option<usize>,
    pub features: Vec<FeatureKind>,
    pub adversarial_training: Vec<bool>,
    pub training: TrainingSection,
    pub attacks: Vec<AttackKind>,
    pub lengths: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub attack: AttackSection,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    /// The desk-scale benchmark.
    fn default() -> Self {
        Self {
            scene: SceneParams::desk(),
            alt_bs_position: SceneParams::desk_alt().bs_position,
            ofdm: OfdmSection {
                subcarriers: 64,
                cyclic_prefix: 24,
                channel_taps: 8,
                data_subcarriers: None,
            },
            delay_taps: 16,
            snr_db: 10.0,
            train_samples: 5000,
            test_samples: 1000,
            eval_samples: None,
            features: vec![FeatureKind::F1, FeatureKind::F2],
            adversarial_training: vec![false, true],
            training: TrainingSection {
                epochs: 100,
                batch_size: 64,
                learning_rate: 1e-3,
                hidden: [512, 256, 256, 256],
                grid_side: 15,
                adversarial_max_len: 16,
            },
            attacks: AttackKind::all(),
            lengths: vec![1, 2, 4, 8, 16],
            lambdas: vec![0.0],
            attack: AttackSection {
                iterations: 200,
                step: 0.05,
                min_step: 1e-4,
                restarts: 4,
                pool_size: 32,
            },
            seed: 1,
        }
    }
}

fn schema(msg: impl Into<String>) -> HarnessError {
    HarnessError::Schema(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::missing(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)
            .map_err(|e| schema(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ofdm_config(&self) -> Result<OfdmConfig> {
        let mut cfg = OfdmConfig::new(
            self.ofdm.subcarriers,
            self.ofdm.cyclic_prefix,
            self.ofdm.channel_taps,
        )?;
        if let Some(d) = &self.ofdm.data_subcarriers {
            cfg.data_subcarriers = d.clone();
            cfg.validate()?;
        }
        Ok(cfg)
    }

    pub fn rate_params(&self) -> Result<RateParams> {
        Ok(RateParams::from_snr_db(
            self.snr_db,
            self.ofdm_config()?.data_subcarriers,
        )?)
    }

    pub fn alt_scene(&self) -> SceneParams {
        SceneParams {
            bs_position: self.alt_bs_position,
            ..self.scene.clone()
        }
    }

    pub fn train_params(&self, adversarial: bool) -> TrainParams {
        TrainParams {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            adversarial,
            adversarial_max_len: self.training.adversarial_max_len,
            seed: self.seed,
            ..TrainParams::default()
        }
    }

    pub fn needs_alt(&self) -> bool {
        self.attacks.contains(&AttackKind::Transfer)
    }

    /// Checks sweep shapes and numeric ranges; a perturbation length that
    /// overruns the cyclic prefix is a constraint violation.
    pub fn validate(&self) -> Result<()> {
        let ofdm = self.ofdm_config()?;
        if self.features.is_empty()
            || self.adversarial_training.is_empty()
            || self.attacks.is_empty()
            || self.lengths.is_empty()
            || self.lambdas.is_empty()
        {
            return Err(schema("feature, training, attack, length and lambda sweeps must be nonempty"));
        }
        if self.train_samples < 2 || self.test_samples == 0 {
            return Err(schema("need at least 2 training and 1 test sample"));
        }
        if self.eval_samples == Some(0) {
            return Err(schema("eval_samples must be positive"));
        }
        if !self.snr_db.is_finite() {
            return Err(schema("snr_db must be finite"));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(schema("lambdas must be finite and nonnegative"));
        }
        if self.training.epochs == 0 || self.training.batch_size < 2 || self.training.grid_side < 2 {
            return Err(schema("training needs epochs >= 1, batch_size >= 2, grid_side >= 2"));
        }
        if self.delay_taps == 0 || self.delay_taps > ofdm.subcarriers {
            return Err(schema("delay_taps must lie in 1..=subcarriers"));
        }
        if self.attack.restarts == 0 || self.attack.pool_size == 0 {
            return Err(schema("restarts and pool_size must be positive"));
        }
        if self.lengths.contains(&0) {
            return Err(schema("perturbation lengths must be positive"));
        }
        for &len in &self.lengths {
            ofdm.check_prefix(ofdm.channel_taps, len)?;
        }
        if self.adversarial_training.contains(&true) {
            ofdm.check_prefix(ofdm.channel_taps, self.training.adversarial_max_len.max(1))?;
        }
        Ok(())
    }
}
