//! Regular 3D grids: scalar volumes, displacement fields, trilinear sampling,
//! backward warping and Jacobian-based voxel-volume analysis.
//!
//! Node `(i, j, k)` sits at world position `origin + (i, j, k) * spacing` (mm).
//! Storage is x-fastest: `index = (k * ny + j) * nx + i`. Multi-channel fields
//! are channel-major on top of that.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_f32_le, read_json, sidecar_paths, write_f32_le, write_json};
use crate::{par, Error, Mat3, Result, Vec3};

/// Lattice geometry shared by volumes and fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid { dims, spacing, origin };
        grid.validate()?;
        Ok(grid)
    }

    /// A grid of `dims` nodes spanning the same bounding box as `self`.
    pub fn resampled(&self, dims: [usize; 3]) -> Result<Self> {
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            if dims[a] < 2 {
                return Err(Error::InvalidArgument(format!(
                    "resampled grid needs at least 2 nodes per axis, got {dims:?}"
                )));
            }
            let extent = (self.dims[a] - 1) as f64 * self.spacing[a];
            spacing[a] = extent / (dims[a] - 1) as f64;
        }
        Grid::new(dims, spacing, self.origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive and finite, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        let k = index / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn node_world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// Continuous (fractional) index of a world point.
    #[inline]
    pub fn world_to_index(&self, p: &Vec3) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Axis-aligned bounds spanned by the node centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let lo = Vec3::from(self.origin);
        let hi = self.node_world(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (lo, hi)
    }

    pub fn center(&self) -> Vec3 {
        let (lo, hi) = self.bounds();
        (lo + hi) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        self.dims == other.dims
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]))
            && (0..3).all(|a| close(self.origin[a], other.origin[a]))
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // Clamped so interpolation never leaves the hull of its inputs.
    let v = a + t * (b - a);
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

/// Trilinear interpolation of one channel at a continuous index. Returns
/// `None` outside the node lattice.
#[inline]
fn trilinear_at_index(grid: &Grid, data: &[f64], f: [f64; 3]) -> Option<f64> {
    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let n = grid.dims[a];
        let x = f[a];
        if !(x >= 0.0 && x <= (n - 1) as f64) {
            return None;
        }
        if n == 1 {
            continue;
        }
        let i0 = (x.floor() as usize).min(n - 2);
        base[a] = i0;
        next[a] = i0 + 1;
        t[a] = x - i0 as f64;
    }
    let at = |i: usize, j: usize, k: usize| data[grid.index(i, j, k)];
    let (i0, j0, k0) = (base[0], base[1], base[2]);
    let (i1, j1, k1) = (next[0], next[1], next[2]);
    let c00 = lerp(at(i0, j0, k0), at(i1, j0, k0), t[0]);
    let c10 = lerp(at(i0, j1, k0), at(i1, j1, k0), t[0]);
    let c01 = lerp(at(i0, j0, k1), at(i1, j0, k1), t[0]);
    let c11 = lerp(at(i0, j1, k1), at(i1, j1, k1), t[0]);
    let c0 = lerp(c00, c10, t[1]);
    let c1 = lerp(c01, c11, t[1]);
    Some(lerp(c0, c1, t[2]))
}

/// Scalar attenuation volume (mm⁻¹).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
    fill: f64,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "volume data holds {} values, dims {:?} need {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Volume { grid, data, fill: 0.0 })
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Volume::new(grid, vec![value; grid.len()])
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> f64 + Send + Sync) -> Result<Self> {
        grid.validate()?;
        let data = par::map_range(grid.len(), |n| {
            let [i, j, k] = grid.coords(n);
            f(grid.node_world(i, j, k))
        });
        Volume::new(grid, data)
    }

    /// Value returned for samples outside the lattice (default 0, air).
    pub fn with_fill(mut self, fill: f64) -> Self {
        self.fill = fill;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn fill(&self) -> f64 {
        self.fill
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `slope * v + intercept` to every voxel, e.g. to turn Hounsfield
    /// units into linear attenuation. Negative results clamp to 0.
    pub fn map_linear(&self, slope: f64, intercept: f64) -> Result<Volume> {
        let data = self.data.iter().map(|&v| (slope * v + intercept).max(0.0)).collect();
        Ok(Volume::new(self.grid, data)?.with_fill(self.fill))
    }

    /// Trilinear sample at a world point.
    pub fn sample_trilinear(&self, p: &Vec3) -> Result<f64> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::NonFinite(format!("sample point {p:?}")));
        }
        Ok(self.sample(p))
    }

    /// Unchecked variant of [`Volume::sample_trilinear`] for hot loops;
    /// non-finite points yield the fill value.
    #[inline]
    pub fn sample(&self, p: &Vec3) -> f64 {
        self.sample_index(self.grid.world_to_index(p))
    }

    #[inline]
    pub fn sample_index(&self, f: [f64; 3]) -> f64 {
        trilinear_at_index(&self.grid, &self.data, f).unwrap_or(self.fill)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_grid_data(path, &self.grid, 1, &self.data)
    }

    pub fn load(path: &Path) -> Result<Volume> {
        let (grid, channels, data) = load_grid_data(path)?;
        if channels != 1 {
            let (json, _) = sidecar_paths(path);
            return Err(Error::format(
                json,
                format!("expected a scalar volume, header has {channels} channels"),
            ));
        }
        Volume::new(grid, data)
    }
}

/// Per-node displacement vectors (mm), 2 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if !(channels == 2 || channels == 3) {
            return Err(Error::InvalidArgument(format!(
                "displacement fields have 2 or 3 channels, got {channels}"
            )));
        }
        if data.len() != channels * grid.len() {
            return Err(Error::InvalidArgument(format!(
                "field data holds {} values, {} channels on dims {:?} need {}",
                data.len(),
                channels,
                grid.dims,
                channels * grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacement field data".into()));
        }
        Ok(DisplacementField { grid, channels, data })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Result<Self> {
        DisplacementField::new(grid, channels, vec![0.0; channels * grid.len()])
    }

    /// Builds a 3-channel field from a per-node function of world position.
    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> Vec3 + Send + Sync) -> Result<Self> {
        grid.validate()?;
        let vectors = par::map_range(grid.len(), |n| {
            let [i, j, k] = grid.coords(n);
            f(grid.node_world(i, j, k))
        });
        Self::from_vectors(grid, &vectors)
    }

    pub fn from_vectors(grid: Grid, vectors: &[Vec3]) -> Result<Self> {
        let n = grid.len();
        if vectors.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} vectors for a lattice of {} nodes",
                vectors.len(),
                n
            )));
        }
        let mut data = vec![0.0; 3 * n];
        for (idx, v) in vectors.iter().enumerate() {
            for c in 0..3 {
                data[c * n + idx] = v[c];
            }
        }
        DisplacementField::new(grid, 3, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Displacement stored at a node; 2-channel fields report `z = 0`.
    #[inline]
    pub fn vector(&self, index: usize) -> Vec3 {
        let n = self.grid.len();
        let z = if self.channels == 3 {
            self.data[2 * n + index]
        } else {
            0.0
        };
        Vec3::new(self.data[index], self.data[n + index], z)
    }

    pub fn vectors(&self) -> Vec<Vec3> {
        (0..self.grid.len()).map(|i| self.vector(i)).collect()
    }

    /// Trilinear interpolation of every channel at a world point; `None`
    /// outside the lattice.
    pub fn sample(&self, p: &Vec3) -> Option<Vec3> {
        let f = self.grid.world_to_index(p);
        let mut out = Vec3::zeros();
        for c in 0..self.channels {
            out[c] = trilinear_at_index(&self.grid, self.channel(c), f)?;
        }
        Some(out)
    }

    /// Resamples onto another lattice by trilinear interpolation. Nodes
    /// outside the source lattice get zero displacement.
    pub fn resample(&self, target: &Grid) -> Result<DisplacementField> {
        target.validate()?;
        let n = target.len();
        let vectors: Vec<[f64; 3]> = par::map_range(n, |idx| {
            let [i, j, k] = target.coords(idx);
            let v = self.sample(&target.node_world(i, j, k)).unwrap_or_else(Vec3::zeros);
            [v.x, v.y, v.z]
        });
        let mut data = vec![0.0; self.channels * n];
        for (idx, v) in vectors.iter().enumerate() {
            for c in 0..self.channels {
                data[c * n + idx] = v[c];
            }
        }
        DisplacementField::new(*target, self.channels, data)
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.grid.len()).map(|i| self.vector(i).norm()).fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_grid_data(path, &self.grid, self.channels, &self.data)
    }

    pub fn load(path: &Path) -> Result<DisplacementField> {
        let (grid, channels, data) = load_grid_data(path)?;
        if channels == 1 {
            let (json, _) = sidecar_paths(path);
            return Err(Error::format(json, "expected a vector field, header has 1 channel"));
        }
        DisplacementField::new(grid, channels, data)
    }
}

/// Backward warp: `out(x) = vol(x + u(x))`; out-of-lattice samples take the
/// volume's fill value.
pub fn warp_volume(vol: &Volume, field: &DisplacementField) -> Result<Volume> {
    if field.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "warping needs a 3-channel field, got {}",
            field.channels()
        )));
    }
    let grid = vol.grid();
    if !grid.same_geometry(field.grid()) {
        return Err(Error::GeometryMismatch(format!(
            "volume {:?} vs field {:?}",
            grid,
            field.grid()
        )));
    }
    let n = grid.len();
    let (ux, uy, uz) = (field.channel(0), field.channel(1), field.channel(2));
    let s = grid.spacing;
    let mut data = vec![0.0; n];
    // Work in index space so the zero field maps every node onto itself exactly.
    par::for_each_indexed(&mut data, |idx, out| {
        let [i, j, k] = grid.coords(idx);
        let f = [
            i as f64 + ux[idx] / s[0],
            j as f64 + uy[idx] / s[1],
            k as f64 + uz[idx] / s[2],
        ];
        *out = vol.sample_index(f);
    });
    Ok(Volume::new(*grid, data)?.with_fill(vol.fill()))
}

/// Finite-difference Jacobian of `x ↦ x + u(x)` at a node. Central differences
/// in the interior, one-sided at the boundary.
#[inline]
pub(crate) fn deformation_jacobian(grid: &Grid, u: [&[f64]; 3], i: usize, j: usize, k: usize) -> Mat3 {
    let idx = [i, j, k];
    let mut jac = Mat3::identity();
    for b in 0..3 {
        let n = grid.dims[b];
        let (lo, hi) = if idx[b] == 0 {
            (0, 1)
        } else if idx[b] == n - 1 {
            (n - 2, n - 1)
        } else {
            (idx[b] - 1, idx[b] + 1)
        };
        let mut a_idx = idx;
        a_idx[b] = lo;
        let lo_i = grid.index(a_idx[0], a_idx[1], a_idx[2]);
        a_idx[b] = hi;
        let hi_i = grid.index(a_idx[0], a_idx[1], a_idx[2]);
        let h = (hi - lo) as f64 * grid.spacing[b];
        for a in 0..3 {
            jac[(a, b)] += (u[a][hi_i] - u[a][lo_i]) / h;
        }
    }
    jac
}

pub(crate) fn min_voxel_volume_raw(grid: &Grid, u: [&[f64]; 3]) -> f64 {
    let vox = grid.voxel_volume();
    par::min_over(grid.len(), |idx| {
        let [i, j, k] = grid.coords(idx);
        deformation_jacobian(grid, u, i, j, k).determinant() * vox
    })
}

/// Smallest deformed voxel volume (mm³): `min det(∇φ) · Π spacing` over all
/// nodes. Folds show up as negative values.
pub fn min_voxel_volume(field: &DisplacementField) -> Result<f64> {
    if field.channels() != 3 {
        return Err(Error::InvalidArgument(
            "voxel volume analysis needs a 3-channel field".into(),
        ));
    }
    let grid = field.grid();
    if grid.dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidArgument(format!(
            "voxel volume analysis needs at least 3 nodes per axis, got {:?}",
            grid.dims
        )));
    }
    Ok(min_voxel_volume_raw(
        grid,
        [field.channel(0), field.channel(1), field.channel(2)],
    ))
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    channels: usize,
    dtype: String,
    byte_order: String,
}

fn save_grid_data(path: &Path, grid: &Grid, channels: usize, data: &[f64]) -> Result<()> {
    let (json, raw) = sidecar_paths(path);
    let header = RawHeader {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        channels,
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    write_json(&json, &header)?;
    write_f32_le(&raw, data)
}

fn load_grid_data(path: &Path) -> Result<(Grid, usize, Vec<f64>)> {
    let (json, raw) = sidecar_paths(path);
    let header: RawHeader = read_json(&json)?;
    if header.dtype != "f32" {
        return Err(Error::format(&json, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.byte_order != "little" {
        return Err(Error::format(
            &json,
            format!("unsupported byte order {:?}", header.byte_order),
        ));
    }
    if !(1..=3).contains(&header.channels) {
        return Err(Error::format(&json, format!("bad channel count {}", header.channels)));
    }
    let grid = Grid {
        dims: header.dims,
        spacing: header.spacing,
        origin: header.origin,
    };
    grid.validate().map_err(|e| Error::format(&json, e.to_string()))?;
    let data = read_f32_le(&raw, header.channels * grid.len())?;
    Ok((grid, header.channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(n: usize) -> Grid {
        Grid::new([n, n, n], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn uniform_volume_samples_constant() {
        let vol = Volume::filled(unit_grid(5), 0.02).unwrap();
        for p in [Vec3::new(1.3, 2.7, 0.1), Vec3::new(3.99, 0.5, 2.5)] {
            assert_eq!(vol.sample_trilinear(&p).unwrap(), 0.02);
        }
    }

    #[test]
    fn node_sample_is_stored_value() {
        let grid = Grid::new([4, 3, 5], [0.7, 1.3, 2.0], [-3.0, 1.0, 0.5]).unwrap();
        let vol = Volume::from_fn(grid, |p| p.x * 3.1 - p.y * p.z).unwrap();
        let p = grid.node_world(2, 1, 3);
        assert!((vol.sample_trilinear(&p).unwrap() - vol.get(2, 1, 3)).abs() < 1e-12);
        assert_eq!(vol.sample_index([2.0, 1.0, 3.0]), vol.get(2, 1, 3));
    }

    #[test]
    fn midpoint_of_two_nodes() {
        let grid = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume::new(grid, vec![0.0, 1.0]).unwrap();
        assert_eq!(vol.sample_trilinear(&Vec3::new(0.5, 0.0, 0.0)).unwrap(), 0.5);
    }

    #[test]
    fn outside_returns_fill() {
        let vol = Volume::filled(unit_grid(3), 1.0).unwrap();
        assert_eq!(vol.sample(&Vec3::new(-0.01, 1.0, 1.0)), 0.0);
        let vol = vol.with_fill(0.5);
        assert_eq!(vol.sample(&Vec3::new(1.0, 2.01, 1.0)), 0.5);
    }

    #[test]
    fn non_finite_point_is_error() {
        let vol = Volume::filled(unit_grid(3), 1.0).unwrap();
        assert!(vol.sample_trilinear(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(vol.sample_trilinear(&Vec3::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn invariants_enforced() {
        assert!(Grid::new([2, 2, 2], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
        assert!(Grid::new([2, 0, 2], [1.0; 3], [0.0; 3]).is_err());
        let grid = unit_grid(2);
        assert!(Volume::new(grid, vec![0.0; 7]).is_err());
        assert!(Volume::new(grid, vec![f64::NAN; 8]).is_err());
        assert!(DisplacementField::new(grid, 1, vec![0.0; 8]).is_err());
        assert!(DisplacementField::new(grid, 3, vec![0.0; 16]).is_err());
    }

    #[test]
    fn zero_warp_is_bit_exact_identity() {
        let grid = Grid::new([6, 5, 4], [0.9, 1.1, 1.7], [-2.3, 0.4, 11.0]).unwrap();
        let vol = Volume::from_fn(grid, |p| (p.x * 0.3).sin() + p.y * p.z * 0.01).unwrap();
        let out = warp_volume(&vol, &DisplacementField::zeros(grid, 3).unwrap()).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn one_voxel_shift_matches_index_oracle() {
        let grid = Grid::new([5, 4, 3], [2.0, 1.0, 1.5], [0.0; 3]).unwrap();
        let vol = Volume::from_fn(grid, |p| 1.0 + p.x + 10.0 * p.y + 100.0 * p.z).unwrap();
        let field = DisplacementField::from_fn(grid, |_| Vec3::new(2.0, 0.0, 0.0)).unwrap();
        let out = warp_volume(&vol, &field).unwrap();
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..5 {
                    let expected = if i + 1 < 5 { vol.get(i + 1, j, k) } else { 0.0 };
                    assert_eq!(out.get(i, j, k), expected);
                }
            }
        }
    }

    #[test]
    fn warp_out_of_grid_is_all_fill() {
        let grid = unit_grid(4);
        let vol = Volume::filled(grid, 0.3).unwrap();
        let field = DisplacementField::from_fn(grid, |_| Vec3::new(0.0, 0.0, 100.0)).unwrap();
        let out = warp_volume(&vol, &field).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_rejects_geometry_mismatch() {
        let vol = Volume::filled(unit_grid(4), 0.3).unwrap();
        let field = DisplacementField::zeros(unit_grid(5), 3).unwrap();
        assert!(matches!(warp_volume(&vol, &field), Err(Error::GeometryMismatch(_))));
        let field2 = DisplacementField::zeros(unit_grid(4), 2).unwrap();
        assert!(warp_volume(&vol, &field2).is_err());
    }

    #[test]
    fn min_voxel_volume_identity_and_scaling() {
        let grid = unit_grid(5);
        let zero = DisplacementField::zeros(grid, 3).unwrap();
        assert!((min_voxel_volume(&zero).unwrap() - 1.0).abs() < 1e-15);
        let s = 0.9;
        let shrink = DisplacementField::from_fn(grid, |p| p * (s - 1.0)).unwrap();
        assert!((min_voxel_volume(&shrink).unwrap() - 0.729).abs() < 1e-12);
    }

    #[test]
    fn min_voxel_volume_detects_fold() {
        let grid = unit_grid(5);
        let fold = DisplacementField::from_fn(grid, |p| Vec3::new(-2.0 * p.x, 0.0, 0.0)).unwrap();
        assert!(min_voxel_volume(&fold).unwrap() < 0.0);
    }

    #[test]
    fn min_voxel_volume_needs_three_nodes() {
        let grid = Grid::new([2, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        assert!(min_voxel_volume(&DisplacementField::zeros(grid, 3).unwrap()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new([3, 4, 2], [0.5, 0.75, 2.0], [-1.0, 2.0, 3.5]).unwrap();
        let vol = Volume::from_fn(grid, |p| ((p.x + 2.0 * p.y - p.z) as f32) as f64).unwrap();
        let path = dir.path().join("ct.json");
        vol.save(&path).unwrap();
        assert_eq!(Volume::load(&path).unwrap(), vol);

        let field = DisplacementField::from_fn(grid, |p| Vec3::new(p.x, -0.5, p.z * 0.25)).unwrap();
        let fpath = dir.path().join("u");
        field.save(&fpath).unwrap();
        assert_eq!(DisplacementField::load(&fpath).unwrap(), field);
    }

    #[test]
    fn load_rejects_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let grid = unit_grid(2);
        let path = dir.path().join("v.json");
        Volume::filled(grid, 1.0).unwrap().save(&path).unwrap();

        std::fs::write(dir.path().join("v.raw"), [0u8; 12]).unwrap();
        assert!(matches!(Volume::load(&path), Err(Error::Format { .. })));

        Volume::filled(grid, 1.0).unwrap().save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("1.0,", "-1.0,", 1)).unwrap();
        assert!(matches!(Volume::load(&path), Err(Error::Format { .. })));

        assert!(matches!(
            Volume::load(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    fn affine_field(grid: Grid, a: Mat3) -> DisplacementField {
        DisplacementField::from_fn(grid, move |p| a * p - p).unwrap()
    }

    proptest! {
        #[test]
        fn trilinear_exact_on_affine(
            c in prop::array::uniform4(-5.0f64..5.0),
            p in prop::array::uniform3(0.0f64..1.0),
        ) {
            let grid = Grid::new([5, 6, 4], [1.5, 0.8, 2.2], [-3.0, 4.0, 1.0]).unwrap();
            let f = move |x: Vec3| c[0] + c[1] * x.x + c[2] * x.y + c[3] * x.z;
            let vol = Volume::from_fn(grid, f).unwrap();
            let (lo, hi) = grid.bounds();
            let q = Vec3::new(
                lo.x + p[0] * (hi.x - lo.x),
                lo.y + p[1] * (hi.y - lo.y),
                lo.z + p[2] * (hi.z - lo.z),
            );
            let got = vol.sample_trilinear(&q).unwrap();
            let want = f(q);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }

        #[test]
        fn min_voxel_volume_of_affine_is_det(a in prop::array::uniform9(-0.3f64..0.3)) {
            let grid = Grid::new([4, 4, 4], [1.2, 0.9, 1.5], [1.0, -2.0, 0.0]).unwrap();
            let m = Mat3::identity() + Mat3::from_row_slice(&a);
            let got = min_voxel_volume(&affine_field(grid, m)).unwrap();
            let want = m.determinant() * grid.voxel_volume();
            prop_assert!((got - want).abs() <= 1e-6 * want.abs());
        }

        #[test]
        fn warp_stays_within_value_range(
            seed in 0u64..1000,
            amp in 0.0f64..6.0,
        ) {
            let grid = Grid::new([6, 5, 7], [1.0, 1.3, 0.7], [0.0; 3]).unwrap();
            let vol = Volume::from_fn(grid, |p| {
                ((p.x * 1.7 + seed as f64).sin() * (p.y * 0.9).cos() + p.z * 0.1).abs()
            })
            .unwrap();
            let field = DisplacementField::from_fn(grid, |p| {
                Vec3::new((p.y + seed as f64).sin(), (p.z * 2.0).cos(), (p.x * 0.5).sin()) * amp
            })
            .unwrap();
            // Fill 0 lies within [min, max] since the volume is non-negative.
            let (lo, hi) = vol.min_max();
            let lo = lo.min(0.0);
            let out = warp_volume(&vol, &field).unwrap();
            prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
