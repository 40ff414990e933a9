//! Landmark accuracy metrics: target registration error (TRE) and projection
//! distance (PD), aggregated into per-group reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json};
use crate::volume::{DisplacementField, Grid};
use crate::{Error, Result, Vec3};

/// Named landmark positions in preoperative volume coordinates (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 3]>,
    labels: Vec<String>,
}

impl LandmarkSet {
    pub fn new(labeled: Vec<(String, Vec3)>, grid: &Grid) -> Result<Self> {
        for (label, p) in &labeled {
            if !grid.contains(p) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {label} at {:?} lies outside the volume",
                    p.as_slice()
                )));
            }
        }
        let (labels, points): (Vec<String>, Vec<[f64; 3]>) =
            labeled.into_iter().map(|(l, p)| (l, [p.x, p.y, p.z])).unzip();
        Ok(LandmarkSet { points, labels })
    }

    /// Reads a landmark file and checks every point against `grid`.
    pub fn load(path: &Path, grid: &Grid) -> Result<Self> {
        let raw: LandmarkSet = read_json(path)?;
        if raw.points.len() != raw.labels.len() {
            return Err(Error::format(path, "points and labels differ in length"));
        }
        let labeled = raw
            .labels
            .into_iter()
            .zip(raw.points.into_iter().map(Vec3::from))
            .collect();
        LandmarkSet::new(labeled, grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        Vec3::from(self.points[i])
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Vec3)> {
        self.labels
            .iter()
            .map(String::as_str)
            .zip(self.points.iter().map(|p| Vec3::from(*p)))
    }
}

fn displaced(field: &DisplacementField, x: &Vec3, label: &str) -> Result<Vec3> {
    field
        .sample(x)
        .map(|u| x + u)
        .ok_or_else(|| Error::InvalidArgument(format!("landmark {label} lies outside the field lattice")))
}

/// Per-landmark `|(x + û(x)) - (x + u(x))|` with both fields trilinearly
/// interpolated at `x`. A 2-channel prediction has no out-of-plane component,
/// so the ground truth's out-of-plane part counts in full; pass one through
/// [`crate::pose::lift_from_image_plane`] first so both fields share a basis.
pub fn tre(pred: &DisplacementField, gt: &DisplacementField, landmarks: &LandmarkSet) -> Result<Vec<f64>> {
    if !pred.grid().same_geometry(gt.grid()) {
        return Err(Error::GeometryMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.grid(),
            gt.grid()
        )));
    }
    landmarks
        .iter()
        .map(|(label, x)| Ok((displaced(pred, &x, label)? - displaced(gt, &x, label)?).norm()))
        .collect()
}

/// Distance from `gt_point` to the line through `source` and `pred_point`.
/// Depth errors along that line are invisible in the projection and cost
/// nothing.
pub fn projection_distance(pred_point: &Vec3, gt_point: &Vec3, source: &Vec3) -> Result<f64> {
    let d = pred_point - source;
    let len = d.norm();
    if !(len > 0.0) {
        return Err(Error::InvalidArgument(
            "projection ray is degenerate: predicted point coincides with the source".into(),
        ));
    }
    Ok((gt_point - source).cross(&d).norm() / len)
}

/// Per-landmark TRE and PD for one sample.
pub fn landmark_errors(
    pred: &DisplacementField,
    gt: &DisplacementField,
    landmarks: &LandmarkSet,
    source: &Vec3,
) -> Result<Vec<(f64, f64)>> {
    let tres = tre(pred, gt, landmarks)?;
    landmarks
        .iter()
        .zip(tres)
        .map(|((label, x), t)| {
            let p = displaced(pred, &x, label)?;
            let g = displaced(gt, &x, label)?;
            Ok((t, projection_distance(&p, &g, source)?))
        })
        .collect()
}

/// One evaluated landmark of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub group: String,
    pub sample: String,
    pub landmark: String,
    pub tre: f64,
    pub pd: f64,
}

/// Mean ± population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub samples: usize,
    pub landmarks: usize,
    pub tre: MeanStd,
    pub pd: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<LandmarkRecord>,
    pub groups: Vec<GroupSummary>,
    pub warnings: Vec<String>,
}

/// Groups records by key (sorted) and summarizes each group. Groups listed in
/// `expected_groups` that have no records are omitted with a warning.
pub fn aggregate_report(records: Vec<LandmarkRecord>, expected_groups: &[String]) -> Result<MetricsReport> {
    if let Some(bad) = records
        .iter()
        .find(|r| !(r.tre.is_finite() && r.tre >= 0.0 && r.pd.is_finite() && r.pd >= 0.0))
    {
        return Err(Error::NonFinite(format!(
            "metric for {}/{}/{}",
            bad.group, bad.sample, bad.landmark
        )));
    }
    let mut by_group: BTreeMap<&str, Vec<&LandmarkRecord>> = BTreeMap::new();
    for r in &records {
        by_group.entry(&r.group).or_default().push(r);
    }
    let mut warnings = Vec::new();
    for g in expected_groups {
        if !by_group.contains_key(g.as_str()) {
            warnings.push(format!("group {g:?} has no samples; omitted"));
        }
    }
    let groups = by_group
        .iter()
        .map(|(g, rs)| {
            let tres: Vec<f64> = rs.iter().map(|r| r.tre).collect();
            let pds: Vec<f64> = rs.iter().map(|r| r.pd).collect();
            let mut samples: Vec<&str> = rs.iter().map(|r| r.sample.as_str()).collect();
            samples.sort_unstable();
            samples.dedup();
            GroupSummary {
                group: g.to_string(),
                samples: samples.len(),
                landmarks: rs.len(),
                tre: MeanStd::of(&tres).expect("non-empty group"),
                pd: MeanStd::of(&pds).expect("non-empty group"),
            }
        })
        .collect();
    Ok(MetricsReport {
        records,
        groups,
        warnings,
    })
}

impl MetricsReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Group | Samples | mean TRE (mm) | mean PD (mm) |\n|---|---|---|---|\n");
        for g in &self.groups {
            let _ = writeln!(s, "| {} | {} | {} | {} |", g.group, g.samples, g.tre, g.pd);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,samples,landmarks,tre_mean,tre_std,pd_mean,pd_std\n");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                g.group, g.samples, g.landmarks, g.tre.mean, g.tre.std, g.pd.mean, g.pd.std
            );
        }
        s
    }

    pub fn records_csv(&self) -> String {
        let mut s = String::from("group,sample,landmark,tre_mm,pd_mm\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.group, r.sample, r.landmark, r.tre, r.pd);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new([6, 5, 7], [2.0, 3.0, 1.5], [-5.0, -6.0, -4.5]).unwrap()
    }

    fn random_field(seed: u64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid();
        let data = (0..3 * g.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        DisplacementField::new(g, 3, data).unwrap()
    }

    fn landmarks(seed: u64) -> LandmarkSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = grid().bounds();
        let pts = (0..6)
            .map(|i| {
                let p = Vec3::new(
                    rng.random_range(lo.x..hi.x),
                    rng.random_range(lo.y..hi.y),
                    rng.random_range(lo.z..hi.z),
                );
                (format!("l{i}"), p)
            })
            .collect();
        LandmarkSet::new(pts, &grid()).unwrap()
    }

    /// Independent trilinear interpolation straight from node values.
    fn oracle_sample(f: &DisplacementField, p: &Vec3) -> Vec3 {
        let g = f.grid();
        let fi = g.world_to_index(p);
        let mut out = Vec3::zeros();
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let i0 = (fi[a].floor() as usize).min(g.dims[a] - 2);
                let t = fi[a] - i0 as f64;
                let hi = (corner >> a) & 1 == 1;
                idx[a] = i0 + usize::from(hi);
                w *= if hi { t } else { 1.0 - t };
            }
            out += f.vector(g.index(idx[0], idx[1], idx[2])) * w;
        }
        out
    }

    #[test]
    fn identical_fields_have_zero_tre() {
        let f = random_field(1);
        assert!(tre(&f, &f, &landmarks(0)).unwrap().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn zero_predictor_tre_is_displacement_norm() {
        let gt = random_field(2);
        let zero = DisplacementField::zeros(grid(), 3).unwrap();
        let lms = landmarks(1);
        let t = tre(&zero, &gt, &lms).unwrap();
        for (i, (_, x)) in lms.iter().enumerate() {
            assert!((t[i] - oracle_sample(&gt, &x).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn tre_matches_interpolation_oracle() {
        let (a, b) = (random_field(3), random_field(4));
        let lms = landmarks(2);
        let t = tre(&a, &b, &lms).unwrap();
        for (i, (_, x)) in lms.iter().enumerate() {
            let want = ((x + oracle_sample(&a, &x)) - (x + oracle_sample(&b, &x))).norm();
            assert!((t[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn tre_symmetry_and_triangle() {
        let (a, b, c) = (random_field(5), random_field(6), random_field(7));
        let lms = landmarks(3);
        let ab = tre(&a, &b, &lms).unwrap();
        let ba = tre(&b, &a, &lms).unwrap();
        let bc = tre(&b, &c, &lms).unwrap();
        let ac = tre(&a, &c, &lms).unwrap();
        for i in 0..lms.len() {
            assert!((ab[i] - ba[i]).abs() < 1e-12);
            assert!(ac[i] <= ab[i] + bc[i] + 1e-12);
        }
    }

    #[test]
    fn rigid_prediction_of_rigid_truth() {
        let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let t = Vec3::new(1.0, 2.0, -3.0);
        let rigid = DisplacementField::from_fn(grid(), |x| r * x + t - x).unwrap();
        assert!(tre(&rigid, &rigid.clone(), &landmarks(4))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn tre_errors() {
        let g2 = Grid::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let other = DisplacementField::zeros(g2, 3).unwrap();
        assert!(tre(&random_field(1), &other, &landmarks(0)).is_err());
        let out = vec![("far".to_string(), Vec3::new(100.0, 0.0, 0.0))];
        assert!(LandmarkSet::new(out, &grid()).is_err());
    }

    #[test]
    fn projection_distance_cases() {
        let s = Vec3::new(0.0, -1500.0, 0.0);
        let g = Vec3::new(3.0, 10.0, -4.0);
        assert_eq!(projection_distance(&g, &g, &s).unwrap(), 0.0);
        // Sliding the prediction along the ray is invisible.
        let along = g + (g - s).normalize() * 25.0;
        assert!(projection_distance(&along, &g, &s).unwrap() < 1e-9);
        // Perpendicular offset d at the prediction's depth.
        let ray = (g - s).normalize();
        let perp = ray.cross(&Vec3::x()).normalize();
        let d = 4.25;
        let pred = g;
        let gt = g + perp * d;
        let got = projection_distance(&pred, &gt, &s).unwrap();
        assert!((got - d).abs() < 1e-9);
        assert!(projection_distance(&s, &g, &s).is_err());
    }

    #[test]
    fn pd_never_exceeds_tre() {
        let (a, b) = (random_field(8), random_field(9));
        let lms = landmarks(5);
        let s = Vec3::new(1.0, -1500.0, 2.0);
        for (t, p) in landmark_errors(&a, &b, &lms, &s).unwrap() {
            assert!(p <= t + 1e-12);
        }
    }

    fn rec(group: &str, sample: &str, tre: f64) -> LandmarkRecord {
        LandmarkRecord {
            group: group.into(),
            sample: sample.into(),
            landmark: "l0".into(),
            tre,
            pd: tre / 2.0,
        }
    }

    #[test]
    fn aggregation() {
        let r = aggregate_report(vec![rec("a", "s0", 2.5)], &[]).unwrap();
        assert_eq!(r.groups[0].tre.std, 0.0);

        let r = aggregate_report(
            vec![rec("p0", "s0", 2.0), rec("p0", "s1", 4.0)],
            &["p0".into(), "p1".into()],
        )
        .unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups[0].tre, MeanStd { mean: 3.0, std: 1.0 });
        assert_eq!(r.groups[0].samples, 2);
        assert_eq!(r.warnings.len(), 1);
        assert!(r.to_markdown().contains("| p0 | 2 | 3.00 ± 1.00 | 1.50 ± 0.50 |"));
        assert!(r
            .to_csv()
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("p0,2,2,3.000000,1.000000"));
    }

    #[test]
    fn mean_std_format() {
        let m = MeanStd {
            mean: 4.4812,
            std: 4.4149,
        };
        assert_eq!(m.to_string(), "4.48 ± 4.41");
    }
}
