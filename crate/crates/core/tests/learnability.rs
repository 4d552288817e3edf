//! End-to-end smoke test: simulated CSI carries enough position
//! information for the network to beat a trivial predictor.

use csiguard_core::channel::{build_dataset, Scene, SceneParams, Split};
use csiguard_core::features::{FeatureExtractor, FeatureKind};
use csiguard_core::ofdm::OfdmConfig;
use csiguard_core::posnet::{evaluate, train, Grid, PositioningModel, TrainParams};

#[test]
fn f2_network_learns_positions() {
    let params = SceneParams::desk();
    let scene = Scene::generate(&params, 11).unwrap();
    let cfg = OfdmConfig::new(64, 24, 8).unwrap();
    let train_set = build_dataset(&scene, &cfg, 2000, Some(10.0), 12, Split::Train).unwrap();
    let test_set = build_dataset(&scene, &cfg, 500, Some(10.0), 13, Split::Test).unwrap();

    let fx = FeatureExtractor::new(FeatureKind::F2, 8, 64, 16).unwrap();
    let grid = Grid::lattice(params.area, 15).unwrap();
    let model = PositioningModel::new(&fx, [256, 128, 128, 128], grid, 14).unwrap();
    let tp = TrainParams {
        epochs: 15,
        seed: 15,
        ..TrainParams::default()
    };
    let (model, report) = train(model, &train_set, &cfg, &tp).unwrap();
    assert!(report.loss.last().unwrap() < &report.loss[0]);

    let ev = evaluate(&model, &test_set, None, &cfg).unwrap();
    let diagonal = params.area.diagonal();
    assert!(
        ev.mean < 0.25 * diagonal,
        "mean error {:.2} m vs 25% of the {diagonal:.1} m diagonal",
        ev.mean
    );
}
