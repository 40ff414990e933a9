use deformreg::dataset::normalize_projection;
use deformreg::eval::{projection_distance, tre, LandmarkSet};
use deformreg::net::{mse_loss, Layer, Mode, Reshape, Tensor};
use deformreg::pose::{camera_image_plane, compose_total_field, sample_pose_perturbation, PoseBounds, RigidTransform};
use deformreg::volume::{warp_volume, DisplacementField, Grid, Volume};
use deformreg::{Mat3, Vec3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-50.0f64..50.0).prop_map(Vec3::from)
}

fn grid() -> Grid {
    Grid::new([6, 5, 7], [1.5, 2.0, 1.0], [-4.0, -5.0, -3.0]).unwrap()
}

fn smooth_field(seed: f64, amp: f64) -> DisplacementField {
    DisplacementField::from_fn(grid(), move |p| {
        Vec3::new((p.y * 0.3 + seed).sin(), (p.z * 0.2 - seed).cos(), (p.x * 0.4).sin()) * amp
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_perturbations_respect_bounds(
        seed in any::<u64>(),
        t_max in 0.0f64..40.0,
        r_max in 0.0f64..std::f64::consts::PI,
        pivot in vec3(),
    ) {
        let bounds = PoseBounds { t_max, r_max, ..PoseBounds::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_pose_perturbation(&mut rng, &bounds, camera_image_plane(), pivot).unwrap();
        let r = p.rotation;
        prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        prop_assert!(Vec3::from(p.translation).norm() <= t_max + 1e-12);
        prop_assert!(p.rotation_angle() <= r_max + 1e-9);
    }

    #[test]
    fn identity_rigid_map_keeps_field_exactly(seed in -10.0f64..10.0, amp in 0.0f64..5.0) {
        let u = smooth_field(seed, amp);
        let total = compose_total_field(&u, &RigidTransform::identity()).unwrap();
        prop_assert_eq!(total.data(), u.data());
    }

    #[test]
    fn zero_warp_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid().len()).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let vol = Volume::new(grid(), data).unwrap();
        let out = warp_volume(&vol, &DisplacementField::zeros(grid(), 3).unwrap()).unwrap();
        prop_assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn projection_distance_is_bounded_by_point_distance(a in vec3(), b in vec3(), s in vec3()) {
        let source = s + Vec3::new(0.0, -1500.0, 0.0);
        let pd = projection_distance(&a, &b, &source).unwrap();
        prop_assert!(pd >= 0.0);
        prop_assert!(pd <= (a - b).norm() + 1e-9);
    }

    #[test]
    fn tre_is_symmetric_and_obeys_triangle_inequality(s1 in -5.0f64..5.0, s2 in -5.0f64..5.0, s3 in -5.0f64..5.0) {
        let (a, b, c) = (smooth_field(s1, 3.0), smooth_field(s2, 2.0), smooth_field(s3, 4.0));
        let lm = LandmarkSet::new(
            vec![("a".into(), Vec3::new(0.0, 0.0, 0.0)), ("b".into(), Vec3::new(2.5, 1.0, -1.0))],
            &grid(),
        )
        .unwrap();
        let ab = tre(&a, &b, &lm).unwrap();
        let ba = tre(&b, &a, &lm).unwrap();
        let bc = tre(&b, &c, &lm).unwrap();
        let ac = tre(&a, &c, &lm).unwrap();
        for i in 0..lm.len() {
            prop_assert!((ab[i] - ba[i]).abs() < 1e-12);
            prop_assert!(ac[i] <= ab[i] + bc[i] + 1e-12);
        }
    }

    #[test]
    fn normalization_is_idempotent(values in prop::collection::vec(0.0f64..10.0, 2..64)) {
        prop_assume!(values.iter().any(|&v| (v - values[0]).abs() > 1e-6));
        let once = normalize_projection(&values).unwrap();
        let twice = normalize_projection(&once.values).unwrap();
        for (x, y) in once.values.iter().zip(&twice.values) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn reshape_round_trip(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * c * h * w;
        let data: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let x = Tensor::new(vec![2, c, h, w], data).unwrap();
        let mut fwd = Reshape::new("fwd", vec![c, h, w], vec![c * h, w]).unwrap();
        let mut inv = Reshape::new("inv", vec![c * h, w], vec![c, h, w]).unwrap();
        let y = fwd.forward(&x, Mode::Train).unwrap();
        let back = inv.forward(&y, Mode::Train).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn mse_of_constant_offset(values in prop::collection::vec(-5.0f64..5.0, 1..50), d in -3.0f64..3.0) {
        let n = values.len();
        let target = Tensor::new(vec![n], values.clone()).unwrap();
        let pred = Tensor::new(vec![n], values.iter().map(|v| v + d).collect()).unwrap();
        let (loss, _) = mse_loss(&pred, &target).unwrap();
        prop_assert!((loss - d * d).abs() < 1e-9);
    }
}
