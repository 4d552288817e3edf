//! Acceptance suite for the desk-scale benchmark. Prints one PASS/FAIL
//! line per criterion and exits nonzero if any criterion fails.
//!
//! Set `CSIGUARD_ACCEPTANCE_DIR` to keep the pipeline artifacts.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use csiguard::config::AttackKind;
use csiguard::pipeline::{self, Layout};
use csiguard::report::{Report, ResultRow};
use csiguard::ExperimentConfig;
use csiguard_core::attacks::{random_attack_with, AttackConfig, AttackObjective};
use csiguard_core::channel::{build_dataset, Scene, SceneParams, Split};
use csiguard_core::diffgraph::grad_check;
use csiguard_core::features::{FeatureExtractor, FeatureKind};
use csiguard_core::ofdm::{
    self, complex_gaussian, perturbation_transfer, simulate_packet, zero_padded_transfer, CsiMatrix,
    OfdmConfig, PerturbationSequence, RateParams,
};
use csiguard_core::posnet::{Grid, PositioningModel};
use csiguard_core::util::child_rng;
use rand::Rng;

const EQUIVALENCE_TOL: f64 = 1e-9;
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const INVARIANCE_TOL: f64 = 1e-9;
const SWEEP_BUDGET: Duration = Duration::from_secs(30 * 60);
const L_MAX: usize = 16;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn print(o: &Outcome) {
    let verdict = if o.passed { "PASS" } else { "FAIL" };
    println!("criterion {} [{verdict}] {}: {}", o.id, o.name, o.detail);
}

fn desk_ofdm() -> OfdmConfig {
    let c = ExperimentConfig::default();
    OfdmConfig::new(c.ofdm.subcarriers, c.ofdm.cyclic_prefix, c.ofdm.channel_taps).unwrap()
}

fn model_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = desk_ofdm();
    let mut rng = child_rng(100, 0, 0);
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let h: Vec<_> = (0..cfg.channel_taps).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let len = rng.random_range(1..=cfg.max_perturbation_len());
        let p = random_attack_with(len, &mut rng).unwrap();
        let s: Vec<_> = (0..cfg.subcarriers).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let y = simulate_packet(&h, &p, &s, &cfg, i, f64::INFINITY).unwrap();
        let hf = zero_padded_transfer(&h, cfg.subcarriers).unwrap();
        let pf = perturbation_transfer(&p, cfg.subcarriers).unwrap();
        for k in 0..cfg.subcarriers {
            worst = worst.max((y[k] - hf[k] * pf[k] * s[k]).norm());
        }
    }
    let t = start.elapsed();
    Outcome {
        id: 1,
        name: "time-domain packet equals (h*p)*s",
        passed: worst < EQUIVALENCE_TOL && t < EQUIVALENCE_BUDGET,
        detail: format!("max abs error {worst:.2e} over 1000 triples in {:.2?}", t),
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = desk_ofdm();
    let params = SceneParams::desk();
    let scene = Scene::generate(&params, 101).unwrap();
    let ds = build_dataset(&scene, &cfg, 20, Some(10.0), 102, Split::Test).unwrap();
    let rate = RateParams::from_snr_db(10.0, cfg.data_subcarriers.clone()).unwrap();
    let grid = Grid::lattice(params.area, 15).unwrap();
    let mut worst: f64 = 0.0;
    let mut rng = child_rng(103, 0, 0);
    for (i, sample) in ds.samples.iter().enumerate() {
        let kind = if i % 2 == 0 { FeatureKind::F1 } else { FeatureKind::F2 };
        let lambda = if (i / 2) % 2 == 0 { 0.0 } else { 1.0 };
        let fx = FeatureExtractor::new(kind, 8, 64, 16).unwrap();
        let model = PositioningModel::new(&fx, [512, 256, 256, 256], grid.clone(), i as u64).unwrap();
        let len = rng.random_range(2..=L_MAX);
        let acfg = AttackConfig {
            lambda,
            ..AttackConfig::new(len, rate.clone())
        };
        let obj = AttackObjective::new(Some(&model), &[&sample.csi], &acfg, lambda).unwrap();
        let p0 = random_attack_with(len, &mut rng).unwrap().to_split();
        let p0 = ndarray::Array2::from_shape_vec((1, 2 * len), p0).unwrap();
        let err = grad_check(
            |t, v| {
                let o = obj.graph(t, v[0], &[0])?;
                t.sum(o)
            },
            &[p0],
        )
        .unwrap();
        worst = worst.max(err);
    }
    let t = start.elapsed();
    Outcome {
        id: 2,
        name: "attack objective gradient",
        passed: worst < GRAD_TOL && t < GRAD_BUDGET,
        detail: format!(
            "max relative error {worst:.2e} over 20 instances (F1/F2, lambda 0/1) in {:.2?}",
            t
        ),
    }
}

fn single_tap_invariance(cfg: &ExperimentConfig, layout: &Layout) -> Outcome {
    let ofdm = cfg.ofdm_config().unwrap();
    let rate = cfg.rate_params().unwrap();
    let model = pipeline::load_model(cfg, layout, FeatureKind::F1, false, false).unwrap();
    let test = pipeline::load_dataset(cfg, layout, "test").unwrap();
    let fx = model.extractor().unwrap();
    let csi: Vec<&CsiMatrix> = test.samples.iter().map(|s| &s.csi).collect();
    let base = model.locate(&fx, &csi).unwrap();
    let mut worst_pos: f64 = 0.0;
    let mut worst_rate: f64 = 0.0;
    let mut rng = child_rng(104, 0, 0);
    for _ in 0..5 {
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        let p = PerturbationSequence::new(vec![ofdm::phasor(phi)]).unwrap();
        let perturbed: Vec<CsiMatrix> = csi
            .iter()
            .map(|h| ofdm::apply_perturbation(h, &p, &ofdm).unwrap())
            .collect();
        let refs: Vec<&CsiMatrix> = perturbed.iter().collect();
        let moved = model.locate(&fx, &refs).unwrap();
        worst_pos = worst_pos.max((&moved - &base).iter().fold(0.0, |m, v| m.max(v.abs())));
        for h in &csi {
            let a = ofdm::rate(h, None, &rate).unwrap();
            let b = ofdm::rate(h, Some(&p), &rate).unwrap();
            worst_rate = worst_rate.max((a - b).abs());
        }
    }
    Outcome {
        id: 3,
        name: "L_p=1 invariance",
        passed: worst_pos <= INVARIANCE_TOL && worst_rate <= INVARIANCE_TOL,
        detail: format!(
            "{} test samples x 5 phases: max estimate shift {worst_pos:.2e} m, max rate change {worst_rate:.2e} bits",
            csi.len()
        ),
    }
}

fn check_line(report: &Report, name: &str, at: Option<bool>) -> (bool, String) {
    match report.check(name, "f1", at) {
        Some(c) => (c.passed, c.detail.clone()),
        None => (false, format!("{name} missing from report")),
    }
}

fn efficacy(report: &Report, sweep_time: Duration) -> Outcome {
    let parts = [
        check_line(report, "efficacy_ordering", Some(false)),
        check_line(report, "transfer_between_random_and_white_box", Some(false)),
        check_line(report, "pool_between_random_and_white_box", Some(false)),
    ];
    let within = sweep_time < SWEEP_BUDGET;
    Outcome {
        id: 4,
        name: "attack efficacy ordering (F1, no AT)",
        passed: parts.iter().all(|p| p.0) && within,
        detail: format!(
            "{}; pipeline {:.1?}",
            parts.iter().map(|p| format!("{}{}", if p.0 { "" } else { "NOT " }, p.1)).collect::<Vec<_>>().join("; "),
            sweep_time
        ),
    }
}

fn saturation(report: &Report, in_grid: bool) -> Outcome {
    let (mono, detail) = check_line(report, "white_box_monotone", Some(false));
    Outcome {
        id: 5,
        name: "white-box error non-decreasing in L_p, estimates in grid hull",
        passed: mono && in_grid,
        detail: format!("white-box mean error by L_p {detail}; all estimates in hull: {in_grid}"),
    }
}

fn rate_cost(report: &Report) -> Outcome {
    let (ok, detail) = check_line(report, "random_rate_cost", Some(false));
    Outcome {
        id: 6,
        name: "random-attack rate cost <= 15%",
        passed: ok,
        detail,
    }
}

fn adversarial_training(report: &Report) -> Outcome {
    let robust = check_line(report, "adversarial_training_robustness", None);
    let cost = check_line(report, "adversarial_training_clean_cost", None);
    Outcome {
        id: 7,
        name: "adversarial training trade-off (F1)",
        passed: robust.0 && cost.0,
        detail: format!("{}; {}", robust.1, cost.1),
    }
}

/// Reduced configuration for the byte-level reproducibility check.
fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train_samples = 300;
    c.test_samples = 40;
    c.training.epochs = 3;
    c.training.hidden = [64, 32, 32, 32];
    c.training.grid_side = 6;
    c.lengths = vec![1, 4];
    c.attack.iterations = 10;
    c.attack.restarts = 2;
    c.attack.pool_size = 4;
    c
}

fn tree_files(root: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(root).unwrap().to_path_buf())
        .collect();
    out.sort();
    out
}

fn determinism(work: &Path) -> Outcome {
    let cfg = small_config();
    let (a, b) = (Layout::new(work.join("det_a")), Layout::new(work.join("det_b")));
    pipeline::run_all(&cfg, &a, |_| {}).unwrap();
    pipeline::run_all(&cfg, &b, |_| {}).unwrap();
    let files = tree_files(&a.root);
    let same_set = files == tree_files(&b.root);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(a.root.join(f)).ok() != std::fs::read(b.root.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let checkpoints = files.iter().filter(|f| f.extension().is_some_and(|e| e == "bin")).count();
    Outcome {
        id: 8,
        name: "byte-identical reruns",
        passed: same_set && differing.is_empty() && checkpoints > 0,
        detail: format!(
            "{} files compared ({} checkpoints, results.csv, report.json); differing: {:?}",
            files.len(),
            checkpoints,
            differing
        ),
    }
}

/// Desk-scale run: the no-AT model sees every attack at every length; the
/// AT model only needs the baseline and the strongest white-box attack.
fn desk_pipeline(layout: &Layout) -> (Vec<ResultRow>, bool, ExperimentConfig) {
    let mut base = ExperimentConfig::default();
    base.features = vec![FeatureKind::F1];
    base.eval_samples = Some(200);

    let mut std_cfg = base.clone();
    std_cfg.adversarial_training = vec![false];
    let mut at_cfg = base.clone();
    at_cfg.adversarial_training = vec![true];
    at_cfg.attacks = vec![AttackKind::None, AttackKind::WhiteBox];
    at_cfg.lengths = vec![1, L_MAX];

    let log = |m: &str| eprintln!("  {m}");
    pipeline::scene_gen(&base, layout).unwrap();
    pipeline::dataset_build(&base, layout).unwrap();
    pipeline::train_models(&std_cfg, layout, log).unwrap();
    pipeline::train_models(&at_cfg, layout, log).unwrap();
    let a = pipeline::attack_sweep(&std_cfg, layout, log).unwrap();
    let b = pipeline::attack_sweep(&at_cfg, layout, log).unwrap();
    let mut rows = a.rows;
    rows.extend(b.rows);
    csiguard::report::write_csv(&layout.results(), &rows).unwrap();
    (rows, a.meta.estimates_in_grid && b.meta.estimates_in_grid, std_cfg)
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let keep = std::env::var_os("CSIGUARD_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let work = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&work).unwrap();

    let mut outcomes = Vec::new();
    let mut run = |o: Outcome| {
        print(&o);
        outcomes.push(o);
    };
    run(model_equivalence());
    run(gradient_correctness());

    let layout = Layout::new(work.join("desk"));
    let start = Instant::now();
    let (rows, in_grid, std_cfg) = desk_pipeline(&layout);
    let elapsed = start.elapsed();
    let report = Report::build(&rows, Some(in_grid));
    std::fs::write(layout.report(), serde_json::to_vec_pretty(&report).unwrap()).unwrap();

    run(single_tap_invariance(&std_cfg, &layout));
    run(efficacy(&report, elapsed));
    run(saturation(&report, in_grid));
    run(rate_cost(&report));
    run(adversarial_training(&report));
    run(determinism(&work));

    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
