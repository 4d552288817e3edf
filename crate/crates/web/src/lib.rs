//! WebAssembly bindings for the static demo page in `www/`.
//!
//! A [`Demo`] holds one desk-scale scene. The page asks it for the
//! delay-domain feature at a position with and without a random
//! perturbation, for the perturbation's power spectrum, and for the rate
//! both ways.

use csiguard_core::attacks::random_attack;
use csiguard_core::channel::{simulate_csi, Scene, SceneParams};
use csiguard_core::features::{FeatureExtractor, FeatureKind};
use csiguard_core::ofdm::{apply_perturbation, perturbation_transfer, rate, CsiMatrix, OfdmConfig, RateParams};
use wasm_bindgen::prelude::*;

pub const SUBCARRIERS: usize = 64;
pub const CYCLIC_PREFIX: usize = 24;
pub const CHANNEL_TAPS: usize = 8;
pub const DELAY_TAPS: usize = 16;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    cfg: OfdmConfig,
    extractor: FeatureExtractor,
}

impl Demo {
    pub fn try_new(seed: u64) -> csiguard_core::Result<Self> {
        let scene = Scene::generate(&SceneParams::desk(), seed)?;
        let extractor = FeatureExtractor::new(FeatureKind::F2, scene.antennas, SUBCARRIERS, DELAY_TAPS)?;
        Ok(Self {
            cfg: OfdmConfig::new(SUBCARRIERS, CYCLIC_PREFIX, CHANNEL_TAPS)?,
            scene,
            extractor,
        })
    }

    fn channel(&self, x: f64, y: f64) -> csiguard_core::Result<CsiMatrix> {
        let pilot = self.scene.pilot(SUBCARRIERS);
        simulate_csi(&self.scene, &self.cfg, [x, y], &pilot, None, &mut csiguard_core::util::rng(0))
    }

    /// F2 feature (`B x T_d`, row-major) for the clean channel followed by
    /// the same for the channel seen through a random perturbation.
    pub fn try_features(&self, x: f64, y: f64, length: usize, seed: u64) -> csiguard_core::Result<Vec<f64>> {
        let h = self.channel(x, y)?;
        let p = random_attack(length, seed)?;
        let hp = apply_perturbation(&h, &p, &self.cfg)?;
        let mut out = self.extractor.extract(&h)?.values;
        out.extend(self.extractor.extract(&hp)?.values);
        Ok(out)
    }

    /// `|p_w|^2` over all subcarriers.
    pub fn try_spectrum(&self, length: usize, seed: u64) -> csiguard_core::Result<Vec<f64>> {
        let p = random_attack(length, seed)?;
        self.cfg.check_prefix(self.cfg.channel_taps, length)?;
        Ok(perturbation_transfer(&p, SUBCARRIERS)?
            .iter()
            .map(|z| z.norm_sqr())
            .collect())
    }

    /// `[clean rate, perturbed rate]` in bits per subcarrier.
    pub fn try_rates(&self, x: f64, y: f64, length: usize, seed: u64, snr_db: f64) -> csiguard_core::Result<Vec<f64>> {
        let h = self.channel(x, y)?;
        let p = random_attack(length, seed)?;
        self.cfg.check_prefix(self.cfg.channel_taps, length)?;
        let params = RateParams::from_snr_db(snr_db, self.cfg.data_subcarriers.clone())?;
        Ok(vec![rate(&h, None, &params)?, rate(&h, Some(&p), &params)?])
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        Self::try_new(seed).map_err(js_err)
    }

    pub fn antennas(&self) -> usize {
        self.scene.antennas
    }

    pub fn delay_taps(&self) -> usize {
        DELAY_TAPS
    }

    pub fn max_length(&self) -> usize {
        self.cfg.max_perturbation_len()
    }

    /// Scene geometry as JSON for drawing.
    pub fn scene_json(&self) -> String {
        serde_json::to_string(&self.scene).unwrap_or_default()
    }

    pub fn features(&self, x: f64, y: f64, length: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        self.try_features(x, y, length, seed).map_err(js_err)
    }

    pub fn spectrum(&self, length: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        self.try_spectrum(length, seed).map_err(js_err)
    }

    pub fn rates(&self, x: f64, y: f64, length: usize, seed: u64, snr_db: f64) -> Result<Vec<f64>, JsError> {
        self.try_rates(x, y, length, seed, snr_db).map_err(js_err)
    }
}
