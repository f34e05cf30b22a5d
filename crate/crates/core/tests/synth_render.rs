mod common;

use common::angle_between;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upright::geometry::up_to_angles;
use upright::solver::{solve_unweighted, solve_weighted, ConditionFlag, SolveError};
use upright::synth::{alignment_scores, corrupt, render, CorruptionSpec, OutlierMode, Scene};
use upright::{CameraIntrinsics, OrientationAngles, SurfaceFrame, Vec3};

fn scene(pitch: f64, roll: f64, yaw: f64) -> Scene {
    Scene {
        angles: OrientationAngles::new(pitch, roll).unwrap(),
        yaw,
        intrinsics: CameraIntrinsics::new(64, 48, 40.0).unwrap(),
        ..Scene::default()
    }
}

#[test]
fn rendered_maps_satisfy_projection_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let s = Scene::random(&mut rng, &scene(0.0, 0.0, 0.0), 45.0, 30.0);
        let r = render(&s).unwrap();
        for (f, l) in r.map.frames().iter().zip(r.map.layout()) {
            assert!((f.transpose() * r.up - l).amax() <= 1e-12);
            let sf = SurfaceFrame::from_matrix(f, upright::geometry::CoordinateSystem::Camera);
            assert!(sf.orthonormality_error() <= 1e-12);
            assert!((f.determinant() - 1.0).abs() <= 1e-12);
        }
        let nz: Vec<f64> = r.map.layout().iter().map(|l| l.x).collect();
        assert!(nz.iter().all(|&z| z == 1.0 || z == 0.0 || z == -1.0));
    }
}

#[test]
fn yaw_does_not_change_ground_truth_up() {
    let a = render(&scene(12.0, -7.0, 0.0)).unwrap();
    for yaw in [-150.0, -30.0, 45.0, 170.0] {
        let b = render(&scene(12.0, -7.0, yaw)).unwrap();
        assert!((a.up - b.up).amax() <= 1e-12);
    }
}

#[test]
fn noiseless_recovery_of_pitch_and_roll() {
    let s = Scene { angles: OrientationAngles::new(20.0, -10.0).unwrap(), ..Scene::default() };
    let r = render(&s).unwrap();
    let res = solve_unweighted(&r.map).unwrap();
    assert_eq!(res.condition_flag, ConditionFlag::Ok);
    let a = up_to_angles(&res.u).unwrap();
    assert!((a.pitch - 20.0).abs() <= 0.01);
    assert!((a.roll + 10.0).abs() <= 0.01);
    assert!(res.kkt_residual <= 1e-8 * r.map.n_valid() as f64);
}

#[test]
fn rendering_is_independent_of_thread_count() {
    let s = scene(30.0, 15.0, 60.0);
    let a = render(&s).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| render(&s).unwrap());
    assert_eq!(a, b);
}

/// Camera pressed against one wall: every pixel sees the same plane. With
/// normal-only weights `H` has rank one and the solver must flag it.
#[test]
fn single_wall_with_normal_weights_is_flagged() {
    let s = Scene { camera: Vec3::new(5.9, 2.5, 1.5), ..scene(0.0, 0.0, 0.0) };
    let r = render(&s).unwrap();
    let first = r.global_normals[0];
    assert!(r.global_normals.iter().all(|n| *n == first));
    let weights = vec![Vec3::new(1.0, 0.0, 0.0); r.map.len()];
    let map = r.map.clone().with_weights(weights).unwrap();
    let res = solve_weighted(&map).unwrap();
    assert_ne!(res.condition_flag, ConditionFlag::Ok);

    // With all three channels the single plane still determines u.
    let full = solve_unweighted(&r.map).unwrap();
    assert!(angle_between(&full.u, &r.up) < 1e-9);
}

#[test]
fn outliers_have_lower_alignment_scores() {
    let r = render(&scene(10.0, 5.0, 20.0)).unwrap();
    let spec = CorruptionSpec {
        normal_noise_sigma: 2.0,
        outlier_fraction: 0.3,
        outlier_mode: OutlierMode::RandomFrame,
        seed: 11,
    };
    let c = corrupt(&r.map, &spec).unwrap();
    let scores = alignment_scores(&c.map, &r.up);
    let mut is_out = vec![false; c.map.len()];
    for &i in &c.outliers {
        is_out[i] = true;
    }
    let mean = |sel: bool| {
        let v: Vec<f64> = (0..scores.len()).filter(|&i| is_out[i] == sel).map(|i| scores[i].sum() / 3.0).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) < mean(false));
}

#[test]
fn flipped_normal_outliers_negate_two_columns() {
    let r = render(&scene(0.0, 0.0, 0.0)).unwrap();
    let spec = CorruptionSpec { outlier_fraction: 0.5, outlier_mode: OutlierMode::FlippedNormal, ..CorruptionSpec::none() };
    let c = corrupt(&r.map, &spec).unwrap();
    for &i in &c.outliers {
        let (a, b) = (r.map.frames()[i], c.map.frames()[i]);
        assert_eq!(b.column(0), -a.column(0));
        assert_eq!(b.column(1), a.column(1));
        assert_eq!(b.column(2), -a.column(2));
    }
}

#[test]
fn corruption_is_reproducible() {
    let r = render(&scene(5.0, 5.0, 5.0)).unwrap();
    let spec = CorruptionSpec { normal_noise_sigma: 5.0, outlier_fraction: 0.3, outlier_mode: OutlierMode::RandomFrame, seed: 3 };
    assert_eq!(corrupt(&r.map, &spec).unwrap(), corrupt(&r.map, &spec).unwrap());
}

#[test]
fn all_outliers_leave_no_weight() {
    let r = render(&scene(0.0, 0.0, 0.0)).unwrap();
    let spec = CorruptionSpec { outlier_fraction: 1.0, ..CorruptionSpec::none() };
    let c = corrupt(&r.map, &spec).unwrap();
    assert_eq!(c.outliers.len(), r.map.len());
    let map = c.map.with_weights(c.oracle_weights).unwrap();
    assert_eq!(map.normalized_weights(), Err(SolveError::AllZeroWeights));
}

#[test]
fn config_round_trip_and_validation() {
    let s = Scene::random(&mut ChaCha8Rng::seed_from_u64(5), &Scene::default(), 45.0, 30.0);
    assert_eq!(Scene::from_config(&s.to_config()).unwrap(), s);
    assert!(Scene::from_config("pitch = 95").is_err());
    assert!(Scene::from_config("cam_x = 7").is_err());
    assert!(Scene::from_config("colour = red").is_err());
}

#[test]
fn full_resolution_noiseless_map_solves() {
    let r = render(&Scene::default()).unwrap();
    let res = solve_unweighted(&r.map).unwrap();
    assert_eq!(res.condition_flag, ConditionFlag::Ok);
    assert!(angle_between(&res.u, &r.up) < 1e-9);
}
