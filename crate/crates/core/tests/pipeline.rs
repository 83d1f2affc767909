use pslab_core::data::{generate_dataset, load_dataset, save_dataset, write_png};
use pslab_core::eval::{evaluate, predict};
use pslab_core::trainer::{checkpoint_path, pairs_from_scenes, train};
use pslab_core::{EstimatorParams, SceneConfig, SceneSample, Strategy, TrainConfig, TrainState};

fn small() -> SceneConfig {
    SceneConfig {
        width: 48,
        height: 32,
        max_disparity: 8.0,
        ..SceneConfig::default()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn config(label: char, iterations: u64) -> TrainConfig {
    TrainConfig {
        strategy: Strategy::from_label(label).unwrap(),
        iterations,
        batch_size: 1,
        max_disparity: 8,
        crop_width: 32,
        crop_height: 24,
        checkpoint_every: 3,
        ..TrainConfig::default()
    }
}

fn scenes(seeds: &[u64]) -> Vec<SceneSample> {
    generate_dataset(&small(), seeds).unwrap()
}

#[test]
fn dataset_round_trip_keeps_quantized_images_and_fields() {
    let dir = tempfile::tempdir().unwrap();
    let samples = scenes(&[3, 4]);
    save_dataset(dir.path(), &small(), &samples).unwrap();
    let (manifest, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.seeds, [3, 4]);
    assert_eq!((manifest.width, manifest.height), (48, 32));
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.seed, b.seed);
        assert!(max_diff(a.left.array().data(), b.left.array().data()) <= 0.5 / 255.0 + 1e-12);
        assert!(max_diff(a.right.array().data(), b.right.array().data()) <= 0.5 / 255.0 + 1e-12);
        let gl = a.gt_disp_left.array().data();
        assert!(max_diff(gl, b.gt_disp_left.array().data()) <= 8.0 * f32::EPSILON as f64);
        assert_eq!(a.gt_occ_left, b.gt_occ_left);
        assert_eq!(a.gt_occ_right, b.gt_occ_right);
    }
}

#[test]
fn png_round_trip_is_exact_after_first_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let s = &scenes(&[5])[0];
    let p = dir.path().join("x.png");
    write_png(&s.left, &p).unwrap();
    let once = pslab_core::data::read_png(&p).unwrap();
    write_png(&once, &p).unwrap();
    assert_eq!(pslab_core::data::read_png(&p).unwrap(), once);
}

#[test]
fn train_checkpoint_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = scenes(&[0, 1, 2]);
    let held = scenes(&[100, 101]);
    let pairs = pairs_from_scenes(&train_set);
    let cfg = config('h', 6);
    let init = TrainState::initial(&cfg, &pairs).unwrap();
    let before = evaluate(&init.params, &held).unwrap();
    let state = train(&pairs, &cfg, init.clone(), Some(dir.path())).unwrap();
    assert_eq!(state.iter, 6);
    assert_eq!(state.history.len(), 6);
    assert!(state.history.iter().all(|r| r.total.is_some_and(f64::is_finite)));
    assert_ne!(state.params, init.params);

    let after = evaluate(&state.params, &held).unwrap();
    assert_eq!(after.n_all, before.n_all);
    assert_eq!(after.n_noc + after.n_occ, after.n_all);
    assert!(after.epe_all.is_finite() && after.d1_all >= 0.0 && after.d1_all <= 100.0);

    let model = EstimatorParams::load(dir.path().join("model.json")).unwrap();
    assert_eq!(predict(&model, &held).unwrap(), predict(&state.params, &held).unwrap());

    let mid = TrainState::load(checkpoint_path(dir.path(), 3)).unwrap();
    assert_eq!(mid.iter, 3);
    let resumed = train(&pairs, &cfg, mid, None).unwrap();
    assert_eq!(resumed, state);
}

#[test]
fn same_seed_same_weights() {
    let pairs = pairs_from_scenes(&scenes(&[7, 8]));
    let cfg = config('f', 4);
    let run = || train(&pairs, &cfg, TrainState::initial(&cfg, &pairs).unwrap(), None).unwrap();
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let s = train(&pairs, &other, TrainState::initial(&other, &pairs).unwrap(), None).unwrap();
    assert_ne!(s.params, run().params);
}
