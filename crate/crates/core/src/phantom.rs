//! Synthetic chest phantom used when no CT is at hand.
//!
//! Shapes are laid out in fractions of the lattice bounding box so the
//! phantom scales with the grid. World axes: `x` left-right, `y` anterior to
//! posterior, `z` inferior to superior.

use crate::volume::{Grid, Volume};
use crate::{Result, Vec3};

/// Linear attenuation values, mm⁻¹.
pub const MU_SOFT_TISSUE: f64 = 0.019;
pub const MU_LUNG: f64 = 0.005;
pub const MU_BONE: f64 = 0.045;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, u: &[f64; 3]) -> bool {
        (0..3)
            .map(|a| ((u[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

const fn ell(center: [f64; 3], radii: [f64; 3]) -> Ellipsoid {
    Ellipsoid { center, radii }
}

// Coordinates are fractions of the bounding box, in [-0.5, 0.5] per axis.
const BODY: Ellipsoid = ell([0.0, 0.0, 0.0], [0.46, 0.36, 0.49]);
const LUNG_RIGHT: Ellipsoid = ell([-0.19, -0.02, 0.04], [0.15, 0.22, 0.36]);
const LUNG_LEFT: Ellipsoid = ell([0.18, -0.01, 0.07], [0.13, 0.21, 0.32]);
const HEART: Ellipsoid = ell([0.06, -0.14, -0.14], [0.12, 0.1, 0.12]);
const SPINE: Ellipsoid = ell([0.0, 0.24, 0.0], [0.05, 0.05, 0.49]);
const STERNUM: Ellipsoid = ell([0.0, -0.31, 0.08], [0.03, 0.025, 0.26]);
const NODULES: [Ellipsoid; 3] = [
    ell([-0.22, 0.05, 0.22], [0.04, 0.04, 0.04]),
    ell([0.2, -0.08, -0.12], [0.05, 0.045, 0.05]),
    ell([-0.15, -0.1, -0.2], [0.03, 0.03, 0.035]),
];

fn box_fraction(grid: &Grid, p: &Vec3) -> [f64; 3] {
    let (lo, hi) = grid.bounds();
    [0, 1, 2].map(|a| {
        let span = hi[a] - lo[a];
        if span > 0.0 {
            (p[a] - lo[a]) / span - 0.5
        } else {
            0.0
        }
    })
}

fn attenuation(u: &[f64; 3]) -> f64 {
    if !BODY.contains(u) {
        return 0.0;
    }
    if SPINE.contains(u) || STERNUM.contains(u) {
        return MU_BONE;
    }
    // Ribs: thin periodic shells just inside the body outline.
    let shell = (0..3)
        .map(|a| ((u[a] - BODY.center[a]) / BODY.radii[a]).powi(2))
        .sum::<f64>();
    if shell > 0.8 && ((u[2] * 14.0).rem_euclid(1.0)) < 0.3 {
        return MU_BONE * 0.8;
    }
    if NODULES.iter().any(|n| n.contains(u)) {
        return MU_SOFT_TISSUE;
    }
    if HEART.contains(u) {
        return MU_SOFT_TISSUE * 1.1;
    }
    if LUNG_LEFT.contains(u) || LUNG_RIGHT.contains(u) {
        return MU_LUNG;
    }
    MU_SOFT_TISSUE
}

/// Chest-like attenuation phantom on `grid`.
pub fn chest_phantom(grid: Grid) -> Result<Volume> {
    Volume::from_fn(grid, move |p| attenuation(&box_fraction(&grid, &p)))
}

/// Binary segmentation (1 inside) of both lungs.
pub fn lung_mask(grid: Grid) -> Result<Volume> {
    Volume::from_fn(grid, move |p| {
        let u = box_fraction(&grid, &p);
        f64::from(u8::from(LUNG_LEFT.contains(&u) || LUNG_RIGHT.contains(&u)))
    })
}

/// Cubic grid of `n` nodes per axis at `spacing` mm, centered on the origin.
pub fn centered_grid(n: usize, spacing: f64) -> Result<Grid> {
    let half = (n as f64 - 1.0) * spacing / 2.0;
    Grid::new([n; 3], [spacing; 3], [-half; 3])
}

/// Six landmark surrogates covering both lungs (apex, mid, base of each),
/// in world coordinates.
pub fn lung_landmarks(grid: &Grid) -> Vec<(String, Vec3)> {
    let (lo, hi) = grid.bounds();
    let at = |f: [f64; 3]| {
        Vec3::new(
            lo.x + (f[0] + 0.5) * (hi.x - lo.x),
            lo.y + (f[1] + 0.5) * (hi.y - lo.y),
            lo.z + (f[2] + 0.5) * (hi.z - lo.z),
        )
    };
    let mut out = Vec::with_capacity(6);
    for (side, lung) in [("right", &LUNG_RIGHT), ("left", &LUNG_LEFT)] {
        for (level, dz) in [("apex", 0.6), ("mid", 0.0), ("base", -0.6)] {
            let c = lung.center;
            let f = [c[0], c[1], c[2] + dz * lung.radii[2]];
            out.push((format!("{side}_{level}"), at(f)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_has_structure() {
        let grid = centered_grid(32, 3.0).unwrap();
        let vol = chest_phantom(grid).unwrap();
        let (lo, hi) = vol.min_max();
        assert_eq!(lo, 0.0);
        assert_eq!(hi, MU_BONE);
        let lung = vol.data().iter().filter(|&&v| v == MU_LUNG).count();
        assert!(lung > grid.len() / 20);
        // Not mirror-symmetric left to right.
        let asym = (0..32)
            .flat_map(|k| (0..32).flat_map(move |j| (0..16).map(move |i| (i, j, k))))
            .filter(|&(i, j, k)| vol.get(i, j, k) != vol.get(31 - i, j, k))
            .count();
        assert!(asym > 100);
    }

    #[test]
    fn landmarks_inside_lungs() {
        let grid = centered_grid(32, 3.0).unwrap();
        let mask = lung_mask(grid).unwrap();
        let lms = lung_landmarks(&grid);
        assert_eq!(lms.len(), 6);
        for (name, p) in lms {
            assert!(grid.contains(&p), "{name}");
            assert!(mask.sample(&p) > 0.5, "{name} not in lung");
        }
    }
}
