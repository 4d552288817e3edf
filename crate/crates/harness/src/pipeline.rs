//! The five pipeline stages. Every stage reads its inputs from and writes
//! its outputs to an output directory, so stages can run as separate
//! processes; every output is a deterministic function of the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use csiguard_core::attacks::{self, AttackConfig};
use csiguard_core::channel::{build_dataset, Dataset, Scene, Split};
use csiguard_core::features::{FeatureExtractor, FeatureKind};
use csiguard_core::ofdm::{self, CsiMatrix, OfdmConfig, PerturbationSequence};
use csiguard_core::posnet::{evaluate, train, Grid, PositioningModel};
use csiguard_core::util::{child_rng, derive_seed};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AttackKind, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::report::ResultRow;

const TAG_SCENE: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_TEST: u64 = 3;
const TAG_ALT: u64 = 4;
const TAG_INIT: u64 = 5;
const TAG_RANDOM: u64 = 6;
const TAG_WHITE_BOX: u64 = 7;
const TAG_POOL_BUILD: u64 = 8;
const TAG_POOL_DRAW: u64 = 9;

/// File locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scene(&self, alt: bool) -> PathBuf {
        self.root.join(if alt { "scene_alt.json" } else { "scene.json" })
    }

    /// Dataset base path (`.csid` + `.json`).
    pub fn dataset(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    /// Checkpoint base path (`.json` + `.bin`).
    pub fn model(&self, feature: FeatureKind, adversarial: bool, alt: bool) -> PathBuf {
        let mut name = format!("{}_{}", feature, if adversarial { "at" } else { "std" });
        if alt {
            name.push_str("_alt");
        }
        self.root.join("models").join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("models").join("manifest.json")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn sweep_meta(&self) -> PathBuf {
        self.root.join("sweep_meta.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::missing(
            path,
            format!("not found; run `csiguard {stage}` first"),
        ))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &str) -> Result<T> {
    require(path, stage)?;
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| HarnessError::Schema(format!("{}: {e}", path.display())))
}

pub fn scene_gen(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    // Both base stations see the same scatterers.
    let seed = derive_seed(cfg.seed, TAG_SCENE, 0);
    write_json(&layout.scene(false), &Scene::generate(&cfg.scene, seed)?)?;
    write_json(&layout.scene(true), &Scene::generate(&cfg.alt_scene(), seed)?)?;
    Ok(())
}

pub fn load_scene(layout: &Layout, alt: bool) -> Result<Scene> {
    let scene: Scene = read_json(&layout.scene(alt), "scene gen")?;
    scene.validate()?;
    Ok(scene)
}

pub fn dataset_build(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let ofdm = cfg.ofdm_config()?;
    let scene = load_scene(layout, false)?;
    let snr = Some(cfg.snr_db);
    std::fs::create_dir_all(layout.root.join("data"))?;
    let train = build_dataset(&scene, &ofdm, cfg.train_samples, snr, derive_seed(cfg.seed, TAG_TRAIN, 0), Split::Train)?;
    train.save(&layout.dataset("train"))?;
    let test = build_dataset(&scene, &ofdm, cfg.test_samples, snr, derive_seed(cfg.seed, TAG_TEST, 0), Split::Test)?;
    test.save(&layout.dataset("test"))?;
    if cfg.needs_alt() {
        let alt_scene = load_scene(layout, true)?;
        let alt = build_dataset(&alt_scene, &ofdm, cfg.train_samples, snr, derive_seed(cfg.seed, TAG_ALT, 0), Split::Train)?;
        alt.save(&layout.dataset("alt_train"))?;
    }
    Ok(())
}

pub fn load_dataset(cfg: &ExperimentConfig, layout: &Layout, name: &str) -> Result<Dataset> {
    let base = layout.dataset(name);
    require(&base.with_extension("csid"), "dataset build")?;
    require(&base.with_extension("json"), "dataset build")?;
    let ds = Dataset::load(&base)?;
    if ds.antennas() != cfg.scene.antennas || ds.subcarriers() != cfg.ofdm.subcarriers {
        return Err(HarnessError::Schema(format!(
            "{} does not match the configured B and W; rebuild the datasets",
            base.display()
        )));
    }
    Ok(ds)
}

/// Checkpoint file hashes, keyed by file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sha256: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Every (feature, adversarial, alt) model the config asks for.
pub fn model_variants(cfg: &ExperimentConfig) -> Vec<(FeatureKind, bool, bool)> {
    let mut out = Vec::new();
    for &f in &cfg.features {
        for &at in &cfg.adversarial_training {
            out.push((f, at, false));
            if cfg.needs_alt() {
                out.push((f, at, true));
            }
        }
    }
    out
}

pub fn train_models(cfg: &ExperimentConfig, layout: &Layout, mut log: impl FnMut(&str)) -> Result<Manifest> {
    let ofdm = cfg.ofdm_config()?;
    let train_set = load_dataset(cfg, layout, "train")?;
    let alt_set = if cfg.needs_alt() {
        Some(load_dataset(cfg, layout, "alt_train")?)
    } else {
        None
    };
    let grid = Grid::lattice(cfg.scene.area, cfg.training.grid_side)?;
    let mut sha256 = BTreeMap::new();
    for (feature, at, alt) in model_variants(cfg) {
        // seeded by identity so adding or removing variants leaves the
        // others unchanged
        let id = match feature {
            FeatureKind::F1 => 0,
            FeatureKind::F2 => 4,
        } + 2 * at as u64
            + alt as u64;
        let fx = FeatureExtractor::new(feature, cfg.scene.antennas, cfg.ofdm.subcarriers, cfg.delay_taps)?;
        let init = PositioningModel::new(&fx, cfg.training.hidden, grid.clone(), derive_seed(cfg.seed, TAG_INIT, id))?;
        let data = if alt { alt_set.as_ref().expect("alt set loaded") } else { &train_set };
        let (model, report) = train(init, data, &ofdm, &cfg.train_params(at))?;
        let base = layout.model(feature, at, alt);
        std::fs::create_dir_all(base.parent().expect("models dir"))?;
        model.save(&base)?;
        for ext in ["json", "bin"] {
            let path = base.with_extension(ext);
            let name = path.file_name().expect("file").to_string_lossy().into_owned();
            sha256.insert(name, sha256_file(&path)?);
        }
        log(&format!(
            "trained {} (final loss {:.6})",
            base.file_name().expect("file").to_string_lossy(),
            report.loss.last().copied().unwrap_or(f64::NAN)
        ));
    }
    let manifest = Manifest { sha256 };
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

pub fn load_model(cfg: &ExperimentConfig, layout: &Layout, feature: FeatureKind, at: bool, alt: bool) -> Result<PositioningModel> {
    let base = layout.model(feature, at, alt);
    require(&base.with_extension("json"), "train")?;
    require(&base.with_extension("bin"), "train")?;
    let model = PositioningModel::load(&base)?;
    if model.feature != feature
        || model.antennas != cfg.scene.antennas
        || model.subcarriers != cfg.ofdm.subcarriers
        || model.delay_taps != cfg.delay_taps
    {
        return Err(HarnessError::Schema(format!(
            "{} was trained for a different configuration; retrain",
            base.display()
        )));
    }
    Ok(model)
}

/// Sidecar facts about a sweep that do not fit the CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub eval_samples: usize,
    /// Every decoded estimate of every row lay inside the grid's hull.
    pub estimates_in_grid: bool,
}

pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub meta: SweepMeta,
}

fn attack_config(cfg: &ExperimentConfig, length: usize, lambda: f64) -> Result<AttackConfig> {
    let mut a = AttackConfig::new(length, cfg.rate_params()?);
    a.lambda = lambda;
    a.iterations = cfg.attack.iterations;
    a.step = cfg.attack.step;
    a.min_step = cfg.attack.min_step;
    a.restarts = cfg.attack.restarts;
    a.pool_size = cfg.attack.pool_size;
    a.seed = derive_seed(cfg.seed, TAG_WHITE_BOX, length as u64);
    Ok(a)
}

fn pair(length: usize, i: usize) -> u64 {
    ((length as u64) << 32) | i as u64
}

/// Perturbations for `attack` on every evaluation sample; `None` for the
/// unperturbed baseline.
#[allow(clippy::too_many_arguments)]
fn perturbations(
    cfg: &ExperimentConfig,
    attack: AttackKind,
    length: usize,
    lambda: f64,
    model: &PositioningModel,
    alt: Option<&PositioningModel>,
    eval: &[&CsiMatrix],
    train_set: &Dataset,
    ofdm: &OfdmConfig,
) -> Result<Option<Vec<PerturbationSequence>>> {
    let ids: Vec<u64> = (0..eval.len() as u64).collect();
    let acfg = attack_config(cfg, length, lambda)?;
    let seqs = match attack {
        AttackKind::None => return Ok(None),
        AttackKind::Random => (0..eval.len())
            .map(|i| {
                let mut rng = child_rng(cfg.seed, TAG_RANDOM, pair(length, i));
                attacks::random_attack_with(length, &mut rng)
            })
            .collect::<csiguard_core::Result<Vec<_>>>()?,
        AttackKind::WhiteBox => attacks::white_box_batch(model, model.feature, eval, &ids, ofdm, &acfg)?
            .into_iter()
            .map(|o| o.sequence)
            .collect(),
        AttackKind::Transfer => {
            let alt = alt.expect("alt model loaded for transfer");
            attacks::transfer_batch(alt, alt.feature, eval, &ids, ofdm, &acfg)?
                .into_iter()
                .map(|o| o.sequence)
                .collect()
        }
        AttackKind::Pool => {
            let pool_cfg = AttackConfig {
                seed: derive_seed(cfg.seed, TAG_POOL_BUILD, length as u64),
                ..acfg
            };
            let pool = attacks::build_pool(model, model.feature, train_set, ofdm, &pool_cfg)?;
            (0..eval.len())
                .map(|i| {
                    let mut rng = child_rng(cfg.seed, TAG_POOL_DRAW, pair(length, i));
                    attacks::pool_attack_with(&pool, &mut rng)
                })
                .collect::<csiguard_core::Result<Vec<_>>>()?
        }
    };
    Ok(Some(seqs))
}

pub fn attack_sweep(cfg: &ExperimentConfig, layout: &Layout, mut log: impl FnMut(&str)) -> Result<SweepOutput> {
    let ofdm = cfg.ofdm_config()?;
    let rate_params = cfg.rate_params()?;
    let test = load_dataset(cfg, layout, "test")?;
    let n = cfg.eval_samples.unwrap_or(test.len()).min(test.len());
    let eval_set = test.subset(&(0..n).collect::<Vec<_>>());
    let train_set = if cfg.attacks.contains(&AttackKind::Pool) {
        load_dataset(cfg, layout, "train")?
    } else {
        eval_set.clone()
    };
    let eval_csi: Vec<&CsiMatrix> = eval_set.samples.iter().map(|s| &s.csi).collect();
    let mut rows = Vec::new();
    let mut in_grid = true;
    for &feature in &cfg.features {
        for &at in &cfg.adversarial_training {
            let model = load_model(cfg, layout, feature, at, false)?;
            let alt = if cfg.needs_alt() {
                Some(load_model(cfg, layout, feature, at, true)?)
            } else {
                None
            };
            for &attack in &cfg.attacks {
                for &length in &cfg.lengths {
                    for &lambda in &cfg.lambdas {
                        let seqs = perturbations(
                            cfg, attack, length, lambda, &model, alt.as_ref(), &eval_csi, &train_set, &ofdm,
                        )?;
                        let ev = evaluate(&model, &eval_set, seqs.as_deref(), &ofdm)?;
                        in_grid &= ev.estimates.iter().all(|&x| model.grid.contains(x));
                        let rate: f64 = eval_csi
                            .iter()
                            .enumerate()
                            .map(|(i, h)| ofdm::rate(h, seqs.as_ref().map(|s| &s[i]), &rate_params))
                            .sum::<csiguard_core::Result<f64>>()?
                            / n as f64;
                        let row = ResultRow {
                            attack: attack.name().into(),
                            feature: feature.to_string(),
                            adv_trained: at,
                            l_p: length,
                            lambda,
                            mean_err_m: ev.mean,
                            median_err_m: ev.median,
                            rate_bits: rate,
                        };
                        log(&format!(
                            "{} {} at={} L_p={} lambda={}: mean {:.3} m, median {:.3} m, rate {:.3}",
                            row.attack, row.feature, at, length, lambda, ev.mean, ev.median, rate
                        ));
                        rows.push(row);
                    }
                }
            }
        }
    }
    crate::report::write_csv(&layout.results(), &rows)?;
    let meta = SweepMeta {
        eval_samples: n,
        estimates_in_grid: in_grid,
    };
    write_json(&layout.sweep_meta(), &meta)?;
    Ok(SweepOutput { rows, meta })
}

pub fn report(layout: &Layout) -> Result<crate::report::Report> {
    require(&layout.results(), "attack sweep")?;
    let rows = crate::report::read_csv(&layout.results())?;
    let meta: Option<SweepMeta> = if layout.sweep_meta().exists() {
        Some(read_json(&layout.sweep_meta(), "attack sweep")?)
    } else {
        None
    };
    let report = crate::report::Report::build(&rows, meta.map(|m| m.estimates_in_grid));
    write_json(&layout.report(), &report)?;
    Ok(report)
}

/// All stages in order.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout, mut log: impl FnMut(&str)) -> Result<crate::report::Report> {
    scene_gen(cfg, layout)?;
    log("scene generated");
    dataset_build(cfg, layout)?;
    log("datasets built");
    train_models(cfg, layout, &mut log)?;
    attack_sweep(cfg, layout, &mut log)?;
    report(layout)
}
