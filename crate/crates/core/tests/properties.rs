//! Property tests for the cross-module invariants.

use proptest::prelude::*;
use qec_core::autodiff::gradcheck::project;
use qec_core::autodiff::Tape;
use qec_core::capsnet::train::prepare_cloud;
use qec_core::capsnet::{network_forward, ForwardOptions, NetworkConfig, NetworkParams};
use qec_core::lrf::{build_lrf, Patch};
use qec_core::mean::{weighted_mean, QuatSet};
use qec_core::pointcloud::io::{parse_xyz, write_xyz};
use qec_core::pointcloud::toy::{make_toy_dataset, ToyClass};
use qec_core::pointcloud::{farthest_point_sampling, fps_from, group_knn, patch_dropout, PointCloud};
use qec_core::quat::Vec3;
use qec_core::routing::{compute_votes, dynamic_route, Capsule, RoutingConfig};
use qec_core::weiszfeld::{cost_lq, weiszfeld_solve, QuatSubspace, WeiszfeldProblem};
use qec_core::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Angle between rotations, well conditioned near zero.
fn angle(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    let b = if a.dot(b) < 0.0 { b.neg() } else { *b };
    let (a, b) = (a.as_array(), b.as_array());
    let d: f64 = (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
    let s: f64 = (0..4).map(|i| (a[i] + b[i]).powi(2)).sum::<f64>().sqrt();
    4.0 * d.atan2(s)
}

/// Quaternions scattered around a random center, so the mean is well
/// separated from the rest of the spectrum.
fn cluster(r: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<UnitQuaternion> {
    let c = UnitQuaternion::random(r);
    (0..n)
        .map(|_| {
            let a = r.gen_range(0.0..spread);
            let q = c.hamilton(&UnitQuaternion::random_with_angle(r, a));
            if r.gen_bool(0.5) {
                q.neg()
            } else {
                q
            }
        })
        .collect()
}

fn cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-0.5..0.5)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_is_left_equivariant_and_order_free(seed in any::<u64>(), n in 2usize..20) {
        let mut r = rng(seed);
        let quats = cluster(&mut r, n, 1.0);
        let weights: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..1.0)).collect();
        let m = weighted_mean(&QuatSet::new(quats.clone(), weights.clone()).unwrap()).unwrap();

        let g = UnitQuaternion::random(&mut r);
        let moved: Vec<_> = quats.iter().map(|q| g.hamilton(q)).collect();
        let mg = weighted_mean(&QuatSet::new(moved, weights.clone()).unwrap()).unwrap();
        prop_assert!(angle(&mg, &g.hamilton(&m)) <= 1e-7);

        let mut idx: Vec<usize> = (0..n).collect();
        idx.reverse();
        idx.rotate_left(seed as usize % n);
        let pq = idx.iter().map(|&i| quats[i]).collect();
        let pw = idx.iter().map(|&i| weights[i]).collect();
        let mp = weighted_mean(&QuatSet::new(pq, pw).unwrap()).unwrap();
        prop_assert!(angle(&mp, &m) <= 1e-9);

        let flip = seed as usize % n;
        let mut anti = quats.clone();
        anti[flip] = anti[flip].neg();
        let ma = weighted_mean(&QuatSet::new(anti, weights).unwrap()).unwrap();
        prop_assert!(angle(&ma, &m) <= 1e-9);
    }

    #[test]
    fn weiszfeld_is_monotone_and_equivariant(seed in any::<u64>(), n in 3usize..16, qi in 0usize..3) {
        let q = [1.0, 1.5, 2.0][qi];
        let mut r = rng(seed);
        let quats = cluster(&mut r, n, 1.2);
        let start = quats[0].hamilton(&UnitQuaternion::random_with_angle(&mut r, 0.3));
        let prob = WeiszfeldProblem::new(&quats, q).unwrap();
        let sol = weiszfeld_solve(&prob, &start).unwrap();
        for w in sol.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        prop_assert!((cost_lq(&sol.solution.as_array(), &prob) - sol.trace.last().unwrap()).abs() < 1e-12);

        let g = UnitQuaternion::random(&mut r);
        let moved: Vec<_> = quats.iter().map(|p| g.hamilton(p)).collect();
        let mut gp = WeiszfeldProblem::new(&moved, q).unwrap();
        gp.tol = 0.0;
        gp.max_iters = sol.iterates.len().max(1);
        let mut p0 = prob.clone();
        p0.tol = 0.0;
        p0.max_iters = gp.max_iters;
        let a = weiszfeld_solve(&p0, &start).unwrap().solution;
        let b = weiszfeld_solve(&gp, &g.hamilton(&start)).unwrap().solution;
        prop_assert!(angle(&b, &g.hamilton(&a)) <= 1e-6);
    }

    #[test]
    fn projection_is_an_orthogonal_projector(seed in any::<u64>()) {
        let mut r = rng(seed);
        let q = UnitQuaternion::random(&mut r);
        let s = QuatSubspace::new(q);
        let a = s.projection_matrix();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((a[i][j] - a[j][i]).abs() <= 1e-12);
                let aa: f64 = (0..4).map(|k| a[i][k] * a[k][j]).sum();
                prop_assert!((aa - a[i][j]).abs() <= 1e-12);
            }
        }
        let x = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
        let p = s.project(&x);
        let qa = q.as_array();
        prop_assert!((0..4).map(|i| qa[i] * p[i]).sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn routing_is_equivariant_and_bounded(seed in any::<u64>(), l in 2usize..12, m in 1usize..5) {
        let mut r = rng(seed);
        let caps: Vec<Capsule> = (0..l).map(|_| Capsule::new(UnitQuaternion::random(&mut r), r.gen_range(0.05..1.0))).collect();
        let t: Vec<UnitQuaternion> = (0..l * m).map(|_| UnitQuaternion::random(&mut r)).collect();
        let alpha: Vec<f64> = caps.iter().map(|c| c.activation).collect();
        let cfg = RoutingConfig::default();
        let out = dynamic_route(&compute_votes(&caps, &t, m).unwrap(), &alpha, &cfg).unwrap();
        for c in &out.capsules {
            prop_assert!(c.activation > 0.0 && c.activation <= 0.5);
        }
        if out.degenerate.iter().any(|&d| d) {
            return Ok(());
        }

        let g = UnitQuaternion::random(&mut r);
        let moved: Vec<Capsule> = caps.iter().map(|c| Capsule::new(g.hamilton(&c.pose), c.activation)).collect();
        let og = dynamic_route(&compute_votes(&moved, &t, m).unwrap(), &alpha, &cfg).unwrap();
        for (a, b) in out.capsules.iter().zip(&og.capsules) {
            prop_assert!(angle(&b.pose, &g.hamilton(&a.pose)) <= 1e-6);
            prop_assert!((a.activation - b.activation).abs() <= 1e-9);
        }

        // Reverse the inputs together with their rows of transforms.
        let rc: Vec<Capsule> = caps.iter().rev().cloned().collect();
        let rt: Vec<UnitQuaternion> = (0..l).rev().flat_map(|i| t[i * m..(i + 1) * m].to_vec()).collect();
        let ra: Vec<f64> = alpha.iter().rev().copied().collect();
        let orr = dynamic_route(&compute_votes(&rc, &rt, m).unwrap(), &ra, &cfg).unwrap();
        for (a, b) in out.capsules.iter().zip(&orr.capsules) {
            prop_assert!(angle(&a.pose, &b.pose) <= 1e-9);
            prop_assert!((a.activation - b.activation).abs() <= 1e-9);
        }
    }

    #[test]
    fn lrf_frames_are_rotations_and_translation_free(seed in any::<u64>(), tx in -5.0..5.0f64, ty in -5.0..5.0f64, tz in -5.0..5.0f64) {
        let mut r = rng(seed);
        let pts = cloud(&mut r, 20);
        let Ok(f) = build_lrf(&Patch::new([0.0; 3], pts.clone())) else {
            return Ok(());
        };
        let rot = f.rotation();
        prop_assert!(rot.orthonormality_error() <= 1e-9);
        prop_assert!((rot.determinant() - 1.0).abs() <= 1e-9);

        let t = [tx, ty, tz];
        let moved: Vec<Vec3> = pts.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        let g = build_lrf(&Patch::new(t, moved)).unwrap();
        prop_assert!(angle(&f.q, &g.q) <= 1e-9);
    }

    #[test]
    fn fps_and_grouping_follow_rigid_motions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pc = PointCloud::new(cloud(&mut r, 120));
        let g = UnitQuaternion::random(&mut r);
        let t = [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
        let moved = pc.rotated(&g).translated(&t);
        let a = farthest_point_sampling(&pc, 16, seed).unwrap();
        let b = farthest_point_sampling(&moved, 16, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(fps_from(&pc.points, 16, 3).unwrap(), fps_from(&moved.points, 16, 3).unwrap());
        let ga = group_knn(&pc, &a, 6).unwrap();
        let gb = group_knn(&moved, &b, 6).unwrap();
        prop_assert_eq!(ga.patches, gb.patches);
    }

    #[test]
    fn xyz_round_trip_is_exact(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pc = PointCloud::new((0..30).map(|_| [r.gen::<f64>() * 1e3 - 5e2, r.gen::<f64>() * 1e-3, r.gen_range(-1.0..1.0)]).collect());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        write_xyz(&path, &pc).unwrap();
        let back = parse_xyz(&path, &std::fs::read_to_string(&path).unwrap()).unwrap();
        prop_assert_eq!(back.points, pc.points);
    }

    #[test]
    fn patch_dropout_removes_the_requested_fraction(seed in any::<u64>(), frac in 0.0..0.9f64) {
        let mut r = rng(seed);
        let pc = PointCloud::new(cloud(&mut r, 400));
        let out = patch_dropout(&pc, frac, seed).unwrap();
        let expect = 400 - (frac * 400.0).round() as usize;
        prop_assert_eq!(out.len(), expect);
        prop_assert_eq!(patch_dropout(&pc, frac, seed).unwrap().points, out.points);
    }

    #[test]
    fn tape_gradients_are_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let v: Vec<f64> = cluster(&mut r, 6, 0.5).iter().flat_map(|q| q.as_array()).collect();
        let w: Vec<f64> = (0..6).map(|_| r.gen_range(0.2..1.0)).collect();
        let run = || {
            let mut t = Tape::new();
            let a = t.param(v.clone(), &[6, 4]).unwrap();
            let b = t.param(w.clone(), &[6]).unwrap();
            let m = t.quat_mean(a, b, 3).unwrap();
            let n = t.normalize4(m).unwrap();
            let l = project(&mut t, n, seed);
            let g = t.backward(l).unwrap();
            (g.dense(a, 24), g.dense(b, 6))
        };
        let (x, y) = (run(), run());
        prop_assert!(x.0.iter().zip(&y.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(x.1.iter().zip(&y.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn network_is_equivariant_for_any_weights(seed in any::<u64>()) {
        let mut cfg = NetworkConfig::with_sizes(3, 8, 4);
        cfg.dense_points = 300;
        cfg.lrf_points = 64;
        cfg.lrf_support = 300;
        cfg.hidden = 8;
        cfg.seed = seed;
        let mut r = rng(seed);
        let s = &make_toy_dataset(&[ToyClass::ALL[(seed % 4) as usize]], 1, 0.01, seed, cfg.dense_points).unwrap()[0];
        let pc = prepare_cloud(&s.cloud, &cfg).unwrap().0;
        let params = NetworkParams::init(&cfg).unwrap();
        let opts = ForwardOptions::from_config(&cfg);
        let a = network_forward(&pc, &params, &cfg, &opts).unwrap();
        prop_assume!(!a.degenerate);
        let g = UnitQuaternion::random(&mut r);
        let b = network_forward(&pc.rotated(&g), &params, &cfg, &opts).unwrap();
        for (x, y) in a.latent.capsules.iter().zip(&b.latent.capsules) {
            prop_assert!(angle(&y.pose, &g.hamilton(&x.pose)) <= 1e-4);
            prop_assert!((x.activation - y.activation).abs() <= 1e-6);
        }
    }
}
