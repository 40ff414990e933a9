use deformreg::dataset::{BaseGeometry, DatasetConfig};
use deformreg::diffeo::{generate_dvf, RandomizationParams};
use deformreg::phantom::centered_grid;
use deformreg::pose::{camera_image_plane, compose_total_field, sample_pose_perturbation, volume_frame_rigid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn displacement_magnitudes_stay_within_design_amplitude() {
    let grid = centered_grid(32, 3.0).unwrap();
    let params = RandomizationParams::default();
    let mut mags = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, _) = generate_dvf(&grid, &params, &mut rng).unwrap();
        mags.extend(u.vectors().iter().map(|v| v.norm()));
    }
    let p99 = percentile(mags, 0.99);
    assert!(p99 <= 30.0, "99th percentile {p99} mm");
    assert!(p99 > 1.0, "fields are nearly zero: p99 {p99} mm");
}

#[test]
fn total_field_spans_expected_range_and_respects_envelope() {
    let grid = centered_grid(32, 3.0).unwrap();
    let config = DatasetConfig::default();
    let geometry = BaseGeometry::default_for(&grid, config.detector).unwrap();
    let (lo, hi) = grid.bounds();
    let diameter = (hi - lo).norm();
    let envelope = config.pose_bounds.t_max + 30.0 + diameter * config.pose_bounds.r_max.sin();
    let (mut min, mut max) = (f64::INFINITY, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, _) = generate_dvf(&grid, &config.params, &mut rng).unwrap();
        let pivot = geometry.pose.to_camera(&grid.center());
        let p = sample_pose_perturbation(&mut rng, &config.pose_bounds, camera_image_plane(), pivot).unwrap();
        let total = compose_total_field(&u, &volume_frame_rigid(&p, &geometry.pose)).unwrap();
        for v in total.vectors() {
            min = min.min(v.norm());
            max = max.max(v.norm());
        }
    }
    assert!(min < 1.0, "smallest |u_tot| {min} mm");
    assert!(max >= 20.0, "largest |u_tot| {max} mm");
    assert!(max <= envelope, "largest |u_tot| {max} mm exceeds {envelope} mm");
}
