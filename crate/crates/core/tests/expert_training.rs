use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofscope_core::expert::{predict, train_expert, TrainConfig, DECISION_THRESHOLD};
use spoofscope_core::imaging::Raster;
use spoofscope_core::trajectory::Cls;
use spoofscope_core::vistools::ToolId;

/// Low-frequency ramp plus a slow sinusoid.
fn smooth(rng: &mut ChaCha8Rng) -> Raster {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let base: f64 = rng.random_range(40.0..180.0);
    let slope: f64 = rng.random_range(-1.5..1.5);
    Raster::from_fn(32, 32, |x, y| {
        let v = base + slope * x as f64 + 25.0 * ((y as f64) / 9.0 + phase).sin();
        v.round().clamp(0.0, 255.0) as u8
    })
    .unwrap()
}

/// Independent uniform pixels.
fn noise(rng: &mut ChaCha8Rng) -> Raster {
    let lo: u8 = rng.random_range(0..60);
    let hi: u8 = rng.random_range(190..=255);
    Raster::from_fn(32, 32, |_, _| rng.random_range(lo..=hi)).unwrap()
}

fn dataset(seed: u64, per_class: usize) -> Vec<(Raster, Cls)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        out.push((smooth(&mut rng), Cls::Real));
        out.push((noise(&mut rng), Cls::Spoof));
    }
    out
}

fn accuracy(model: &spoofscope_core::expert::ExpertModel, data: &[(Raster, Cls)]) -> f64 {
    let ok = data
        .iter()
        .filter(|(img, cls)| {
            let p = predict(model, img).unwrap();
            (p >= DECISION_THRESHOLD) == (*cls == Cls::Spoof)
        })
        .count();
    ok as f64 / data.len() as f64
}

#[test]
fn separable_set_is_learned() {
    let train = dataset(11, 200);
    let report = train_expert(ToolId::Fft, &train, &TrainConfig::default()).unwrap();
    assert!(report.train_accuracy >= 0.95, "train accuracy {}", report.train_accuracy);
    assert_eq!(report.losses.len(), 11);
    assert!(report.losses.last() < report.losses.first());

    let held_out = dataset(12, 100);
    assert!(accuracy(&report.model, &held_out) >= 0.90);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    assert!(predict(&report.model, &smooth(&mut rng)).unwrap() < 0.5);
}

#[test]
fn same_seed_same_bits() {
    let data = dataset(5, 40);
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let a = train_expert(ToolId::Lbp, &data, &cfg).unwrap().model;
    let b = train_expert(ToolId::Lbp, &data, &cfg).unwrap().model;
    let bits = |m: &spoofscope_core::expert::ExpertModel| {
        m.weights.iter().map(|w| w.to_bits()).chain([m.bias.to_bits()]).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    let c = train_expert(ToolId::Lbp, &data, &TrainConfig { seed: 8, ..cfg }).unwrap().model;
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn zoom_has_no_expert() {
    assert!(train_expert(ToolId::ZoomIn, &dataset(1, 4), &TrainConfig::default()).is_err());
}
