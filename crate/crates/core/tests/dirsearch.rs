use diffcore::Tensor;
use latentlight::dirsearch::{apply_direction, classify_pair, train_directions, Classifier, DirectionSet, TrainConfig};
use latentlight::losses::Mode;
use latentlight::rng::{self, stream};
use latentlight::scenegen::{Generator, GeneratorConfig};
use latentlight::Error;

fn tiny() -> Generator {
    Generator::new(GeneratorConfig { resolution: 16, ..Default::default() }).unwrap()
}

#[test]
fn zero_samples_returns_unit_gaussian_initialization() {
    let gen = tiny();
    let cfg = TrainConfig { m: 3, n_samples: 0, seed: 9, ..Default::default() };
    let out = train_directions(&cfg, &gen).unwrap();
    let init = DirectionSet::random(3, 4, 32, 1.0, Mode::Relight, 9, stream::DIRECTION_INIT);
    assert_eq!(out.directions.dirs(), init.dirs());
    assert!(out.directions.row_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
    assert!(out.log.is_empty());
    assert_eq!(out.samples_drawn, 0);
}

#[test]
fn training_is_deterministic_and_one_pass() {
    let gen = tiny();
    let cfg = TrainConfig { m: 3, n_samples: 5, ..Default::default() };
    let a = train_directions(&cfg, &gen).unwrap();
    let b = train_directions(&cfg, &gen).unwrap();
    assert_eq!(a.directions, b.directions);
    assert_eq!(a.classifier.to_json().unwrap(), b.classifier.to_json().unwrap());
    assert_eq!(a.samples_drawn, 5);
    assert_eq!(a.log.len(), 5);
    assert_eq!(a.log, b.log);
    let other = train_directions(&TrainConfig { seed: 2, ..cfg }, &gen).unwrap();
    assert_ne!(a.directions.dirs(), other.directions.dirs());
}

#[test]
fn row_norms_respect_the_bound() {
    let gen = tiny();
    let cfg = TrainConfig { m: 2, n_samples: 20, max_norm: 0.5, lr_dirs: 0.2, ..Default::default() };
    let out = train_directions(&cfg, &gen).unwrap();
    assert!(out.directions.row_norms().iter().all(|&n| n <= 0.5 + 1e-12));
}

#[test]
fn total_loss_falls_during_training() {
    let gen = Generator::new(GeneratorConfig { resolution: 32, ..Default::default() }).unwrap();
    let cfg = TrainConfig { m: 4, n_samples: 250, ..Default::default() };
    let log = train_directions(&cfg, &gen).unwrap().log;
    let avg = |r: &[latentlight::losses::LossReport]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let (first, last) = (avg(&log[..50]), avg(&log[log.len() - 50..]));
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn json_round_trip_is_byte_stable_and_keeps_metadata() {
    let gen = tiny();
    let out = train_directions(&TrainConfig { m: 2, n_samples: 2, seed: 4, ..Default::default() }, &gen).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    out.directions.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = DirectionSet::load(&path).unwrap();
    assert_eq!(loaded, out.directions);
    assert_eq!((loaded.seed, loaded.mode), (4, Mode::Relight));
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    for key in ["\"version\"", "\"mode\"", "\"L\"", "\"D\"", "\"M\"", "\"seed\"", "\"dirs\"", "\"meta\""] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn awkward_floats_round_trip_exactly() {
    let vals = vec![0.1, 1.0 / 3.0, -2.0f64.sqrt(), 1e-300, 123456.789e10, -0.0, f64::MIN_POSITIVE, 5e-324];
    let mut data = vals.clone();
    data.resize(8 * 4, 0.7);
    let set = DirectionSet::new(Tensor::new([4, 8], data).unwrap(), Mode::Recolor, 2, 4, 1).unwrap();
    let back = DirectionSet::from_json(&set.to_json().unwrap()).unwrap();
    for (a, b) in set.dirs().data().iter().zip(back.dirs().data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn wrong_row_length_names_both_sizes() {
    let bad = r#"{"version":1,"mode":"relight","L":2,"D":3,"M":1,"seed":0,"dirs":[[1,2,3,4,5]]}"#;
    let err = DirectionSet::from_json(bad).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::DimMismatch { .. }));
    assert!(msg.contains('6') && msg.contains('5'), "{msg}");
}

#[test]
fn unknown_version_is_rejected() {
    let bad = r#"{"version":99,"mode":"relight","L":1,"D":1,"M":1,"seed":0,"dirs":[[1]]}"#;
    assert!(matches!(DirectionSet::from_json(bad), Err(Error::Version { found: 99, expected: 1 })));
}

#[test]
fn apply_direction_is_linear() {
    let gen = tiny();
    let set = DirectionSet::random(3, 4, 32, 1.0, Mode::Relight, 3, 77);
    let w = gen.sample_style(&mut rng::seeded(1, 2)).unwrap();
    assert_eq!(apply_direction(&w, &set, 1, 0.0).unwrap(), w);
    let twice = apply_direction(&apply_direction(&w, &set, 1, 0.5).unwrap(), &set, 1, 0.5).unwrap();
    let once = apply_direction(&w, &set, 1, 1.0).unwrap();
    for (a, b) in twice.tensor().data().iter().zip(once.tensor().data()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(matches!(apply_direction(&w, &set, 3, 1.0), Err(Error::IndexOutOfRange { index: 3, len: 3, .. })));
}

#[test]
fn opposite_scales_render_different_images() {
    let gen = tiny();
    let set = DirectionSet::random(2, 4, 32, 2.0, Mode::Relight, 3, 78);
    let w = gen.sample_style(&mut rng::seeded(1, 3)).unwrap();
    let plus = gen.synthesize(&apply_direction(&w, &set, 0, 1.0).unwrap()).unwrap();
    let minus = gen.synthesize(&apply_direction(&w, &set, 0, -1.0).unwrap()).unwrap();
    let dist: f64 = plus.pixels.data().iter().zip(minus.pixels.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(dist > 0.0);
}

#[test]
fn untrained_classifier_is_near_uniform() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let clf = Classifier::new(4, 17);
    let mut r = rng::seeded(5, 600);
    for _ in 0..20 {
        let a = gen.synthesize(&gen.sample_style(&mut r).unwrap()).unwrap();
        let b = gen.synthesize(&gen.sample_style(&mut r).unwrap()).unwrap();
        let logits = classify_pair(&clf, &a.pixels, &b.pixels).unwrap();
        assert_eq!(logits.len(), 4);
        let max = logits.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        assert!(1.0 / z < 0.9);
    }
}

#[test]
fn classifier_rejects_mismatched_resolutions() {
    let clf = Classifier::new(2, 1);
    let a = Tensor::zeros([3, 32, 32]);
    let b = Tensor::zeros([3, 16, 16]);
    assert!(classify_pair(&clf, &a, &b).is_err());
}

#[test]
fn classifier_json_round_trip() {
    let clf = Classifier::new(3, 8);
    let s = clf.to_json().unwrap();
    assert_eq!(Classifier::from_json(&s).unwrap().to_json().unwrap(), s);
}
