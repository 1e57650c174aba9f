use qec_core::autodiff::{Hidden, MlpParams};
use qec_core::capsnet::train::{prepare_cloud, train, Example, RunLog, TrainConfig, Validation};
use qec_core::capsnet::{network_forward, qec_forward, ForwardOptions, NetworkConfig, NetworkParams, QecLayerConfig};
use qec_core::lrf::LrfFrame;
use qec_core::mean::{weighted_mean, QuatSet};
use qec_core::pointcloud::toy::{make_toy_dataset, ToyClass};
use qec_core::pointcloud::PointCloud;
use qec_core::routing::{Capsule, RoutingConfig};
use qec_core::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A kernel whose output is the identity quaternion for every input.
fn identity_kernel(cfg: &QecLayerConfig, hidden: usize, rng: &mut ChaCha8Rng) -> MlpParams {
    let mut p = MlpParams::init(cfg.mlp_in(), hidden, cfg.mlp_out(), 1.0, Hidden::Sigmoid, rng);
    p.w2.iter_mut().for_each(|w| *w = 0.0);
    p
}

fn frame(q: UnitQuaternion) -> LrfFrame {
    let r = q.to_rotation3();
    LrfFrame {
        d1: r.column(0),
        d2: r.column(1),
        d3: r.column(2),
        q,
    }
}

#[test]
fn single_point_identity_kernel_passes_pose_through() {
    let cfg = QecLayerConfig {
        k: 1,
        channels: 1,
        outputs: 1,
        routing: RoutingConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let kernel = identity_kernel(&cfg, 4, &mut rng);
    let opts = ForwardOptions {
        weighted_channel_mean: true,
        skip_canonicalization: false,
    };
    for _ in 0..10 {
        let q = UnitQuaternion::random(&mut rng);
        let out = qec_forward(&[[0.0; 3]], &[Capsule::new(q, 1.0)], &kernel, &cfg, &opts).unwrap();
        assert_eq!(out.capsules.len(), 1);
        assert!(out.capsules[0].pose.geodesic_distance(&q) < 1e-7);
        // δ(q, q) carries ~1e-8 from acos near 1.
        let a = out.capsules[0].activation;
        assert!((a - 0.5).abs() < 1e-7, "{a}");
    }
}

#[test]
fn identity_kernels_recover_the_mean_frame() {
    let mut cfg = NetworkConfig::with_sizes(3, 8, 4);
    cfg.hidden = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = NetworkParams::init(&cfg).unwrap();
    for p in &mut params.layers {
        p.w2.iter_mut().for_each(|w| *w = 0.0);
    }
    for _ in 0..5 {
        let center = UnitQuaternion::random(&mut rng);
        let n = 64;
        let points = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let quats: Vec<UnitQuaternion> =
            (0..n).map(|_| center.hamilton(&UnitQuaternion::random_with_angle(&mut rng, 0.15))).collect();
        let mut cloud = PointCloud::new(points);
        cloud.frames = Some(quats.iter().map(|&q| frame(q)).collect());
        let mean = weighted_mean(&QuatSet::uniform(quats).unwrap()).unwrap();
        let out = network_forward(&cloud, &params, &cfg, &ForwardOptions::from_config(&cfg)).unwrap();
        for c in &out.latent.capsules {
            let d = c.pose.geodesic_distance(&mean);
            assert!(d < 0.05, "latent pose {d} rad from the frame mean");
        }
    }
}

fn toy_examples(cfg: &NetworkConfig, per_class: usize, seed: u64) -> Vec<Example> {
    let classes = [ToyClass::LShape, ToyClass::Cone, ToyClass::TetraFlag];
    make_toy_dataset(&classes, per_class, 0.01, seed, cfg.dense_points)
        .unwrap()
        .iter()
        .map(|s| Example::new(prepare_cloud(&s.cloud, cfg).unwrap().0, s.label))
        .collect()
}

fn small_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::with_sizes(3, 8, 4);
    cfg.dense_points = 300;
    cfg.lrf_points = 64;
    cfg.lrf_support = 64;
    cfg.hidden = 8;
    cfg
}

#[test]
fn translation_changes_nothing() {
    let cfg = small_config();
    let ex = &toy_examples(&cfg, 1, 3)[0];
    let params = NetworkParams::init(&cfg).unwrap();
    let opts = ForwardOptions::from_config(&cfg);
    let base = network_forward(&ex.cloud, &params, &cfg, &opts).unwrap();
    let mut moved = ex.cloud.clone();
    for p in &mut moved.points {
        p[0] += 3.0;
        p[1] -= 1.5;
        p[2] += 0.25;
    }
    let shifted = network_forward(&moved, &params, &cfg, &opts).unwrap();
    for (a, b) in base.latent.capsules.iter().zip(&shifted.latent.capsules) {
        assert!(a.pose.geodesic_distance(&b.pose) < 1e-6);
        assert!((a.activation - b.activation).abs() < 1e-9);
    }
}

#[test]
fn one_sample_loss_goes_down() {
    let cfg = small_config();
    let data = toy_examples(&cfg, 1, 4);
    let one = &data[..1];
    let mut params = NetworkParams::init(&cfg).unwrap();
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 1,
        lr: 0.01,
        ..TrainConfig::default()
    };
    let records = train(&mut params, &cfg, &tcfg, one, &Validation::default(), &mut RunLog::new(None), |_| {}).unwrap();
    assert_eq!(records.len(), 2);
    assert!(
        records[1].loss < records[0].loss || records[0].skipped > 0,
        "loss {} -> {}",
        records[0].loss,
        records[1].loss
    );
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = small_config();
    let data = toy_examples(&cfg, 2, 5);
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut params = NetworkParams::init(&cfg).unwrap();
        let mut log = RunLog::new(None);
        let records = train(&mut params, &cfg, &tcfg, &data, &Validation::default(), &mut log, |_| {}).unwrap();
        (params, records.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>())
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(la, lb);
    for (a, b) in pa.layers.iter().zip(&pb.layers) {
        for (x, y) in a.arrays().iter().zip(b.arrays()) {
            assert!(x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}
