//! Digitally reconstructed radiographs by ray-marched line integrals.
//!
//! Each pixel holds `∫ μ ds` along the ray from the source through the pixel
//! center, sampled at a fixed step with trilinear interpolation between the
//! ray's entry and exit points on the volume's node bounding box. Pixel
//! `(col, row)` has its center at detector coordinate `(col, row)`.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::io::{read_f32_le, read_json, sidecar_paths, write_f32_le, write_json};
use crate::pose::{CameraIntrinsics, ExtrinsicPose};
use crate::volume::{Grid, Volume};
use crate::{par, Error, Mat3, Result, Vec3};

/// Default distance from the source to the volume center, mm.
pub const SOURCE_TO_CENTER_MM: f64 = 1500.0;
/// Default source-to-detector distance, mm.
pub const SOURCE_TO_DETECTOR_MM: f64 = 2000.0;
/// Fraction of the detector the volume footprint should cover.
pub const FOOTPRINT_FILL: f64 = 0.8;

/// Pinhole projection of a world point to detector pixel coordinates.
pub fn project_point(k: &CameraIntrinsics, e: &ExtrinsicPose, x: &Vec3) -> Result<Vector2<f64>> {
    let xc = e.to_camera(x);
    if !(xc.z > 0.0) {
        return Err(Error::BehindSource { depth: xc.z });
    }
    let f = k.focal_px();
    Ok(Vector2::new(
        f * xc.x / xc.z + k.principal_point[0],
        f * xc.y / xc.z + k.principal_point[1],
    ))
}

/// World-frame source position and unit direction of the ray through
/// detector coordinate `(u, v)`.
pub fn pixel_ray(k: &CameraIntrinsics, e: &ExtrinsicPose, u: f64, v: f64) -> (Vec3, Vec3) {
    let f = k.focal_px();
    let dc = Vec3::new((u - k.principal_point[0]) / f, (v - k.principal_point[1]) / f, 1.0);
    let dir = (e.rotation().transpose() * dc).normalize();
    (e.camera_center(), dir)
}

/// Parametric entry/exit of a ray with an axis-aligned box, clipped to
/// `t >= 0`. `None` when the ray misses.
pub fn ray_box(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// `∫ μ ds` along `origin + t·dir` (unit `dir`) by the midpoint rule with
/// steps of at most `step_mm`.
pub fn line_integral(vol: &Volume, origin: &Vec3, dir: &Vec3, step_mm: f64) -> f64 {
    let (lo, hi) = vol.grid().bounds();
    let Some((t0, t1)) = ray_box(origin, dir, &lo, &hi) else {
        return 0.0;
    };
    let len = t1 - t0;
    let n = (len / step_mm).ceil().max(1.0) as usize;
    let h = len / n as f64;
    let grid = vol.grid();
    // March in index space: the continuous index is affine in t.
    let f0 = grid.world_to_index(&(origin + dir * (t0 + 0.5 * h)));
    let df = [
        dir.x * h / grid.spacing[0],
        dir.y * h / grid.spacing[1],
        dir.z * h / grid.spacing[2],
    ];
    let mut sum = 0.0;
    for i in 0..n {
        let s = i as f64;
        sum += vol.sample_index([f0[0] + s * df[0], f0[1] + s * df[1], f0[2] + s * df[2]]);
    }
    sum * h
}

/// Default ray-marching step: half the smallest voxel spacing.
pub fn default_step(grid: &Grid) -> f64 {
    0.5 * grid.spacing.iter().copied().fold(f64::INFINITY, f64::min)
}

/// A rendered projection with the geometry that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    intrinsics: CameraIntrinsics,
    pose: ExtrinsicPose,
}

/// Maps line integrals to 16-bit gray levels for PNG export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DisplayMapping {
    /// Linear stretch from the image minimum to its maximum.
    MinMax,
    /// Linear stretch of a fixed window, clamped.
    Window { lo: f64, hi: f64 },
    /// Film-like `exp(-p)`, then min-max stretched.
    Exposure,
}

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    width: usize,
    height: usize,
    dtype: String,
    byte_order: String,
    intrinsics: CameraIntrinsics,
    pose: ExtrinsicPose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    png: Option<PngRecord>,
}

/// What a PNG export did, kept in the projection sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PngRecord {
    pub file: String,
    pub mapping: DisplayMapping,
    /// Input values mapped to gray 0 and 65535.
    pub lo: f64,
    pub hi: f64,
}

impl ProjectionImage {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f64>,
        intrinsics: CameraIntrinsics,
        pose: ExtrinsicPose,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "projection holds {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "projection values must be finite and non-negative".into(),
            ));
        }
        Ok(ProjectionImage {
            width,
            height,
            data,
            intrinsics,
            pose,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn pose(&self) -> &ExtrinsicPose {
        &self.pose
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_inner(path, None)
    }

    /// Saves raw data and sidecar plus a 16-bit PNG next to them.
    pub fn save_with_png(&self, path: &Path, mapping: DisplayMapping) -> Result<PngRecord> {
        let png_path = path.with_extension("png");
        let record = self.export_png16(&png_path, mapping)?;
        self.save_inner(path, Some(record.clone()))?;
        Ok(record)
    }

    fn save_inner(&self, path: &Path, png: Option<PngRecord>) -> Result<()> {
        let (json, raw) = sidecar_paths(path);
        let header = ProjectionHeader {
            width: self.width,
            height: self.height,
            dtype: "f32".into(),
            byte_order: "little".into(),
            intrinsics: self.intrinsics,
            pose: self.pose,
            png,
        };
        write_json(&json, &header)?;
        write_f32_le(&raw, &self.data)
    }

    pub fn load(path: &Path) -> Result<ProjectionImage> {
        let (json, raw) = sidecar_paths(path);
        let h: ProjectionHeader = read_json(&json)?;
        if h.dtype != "f32" || h.byte_order != "little" {
            return Err(Error::format(&json, "projection payload must be little-endian f32"));
        }
        let data = read_f32_le(&raw, h.width * h.height)?;
        ProjectionImage::new(h.width, h.height, data, h.intrinsics, h.pose)
            .map_err(|e| Error::format(&json, e.to_string()))
    }

    fn display_values(&self, mapping: DisplayMapping) -> (Vec<f64>, f64, f64) {
        let values: Vec<f64> = match mapping {
            DisplayMapping::Exposure => self.data.iter().map(|p| (-p).exp()).collect(),
            _ => self.data.clone(),
        };
        let (lo, hi) = match mapping {
            DisplayMapping::Window { lo, hi } => (lo, hi),
            _ => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
        };
        (values, lo, hi)
    }

    /// Gray levels in `[0, 1]`.
    pub fn to_unit_gray(&self, mapping: DisplayMapping) -> Vec<f64> {
        let (values, lo, hi) = self.display_values(mapping);
        let span = hi - lo;
        values
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn export_png16(&self, path: &Path, mapping: DisplayMapping) -> Result<PngRecord> {
        let gray = self.to_unit_gray(mapping);
        let (_, lo, hi) = self.display_values(mapping);
        let pixels: Vec<u16> = gray.iter().map(|g| (g * 65535.0).round() as u16).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, pixels)
                .ok_or_else(|| Error::InvalidArgument("image buffer size".into()))?;
        img.save(path)?;
        Ok(PngRecord {
            file: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            mapping,
            lo,
            hi,
        })
    }

    /// 8-bit RGB rendering, used as the overlay background.
    pub fn to_rgb8(&self, mapping: DisplayMapping) -> RgbImage {
        let gray = self.to_unit_gray(mapping);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let g = (gray[y as usize * self.width + x as usize] * 255.0).round() as u8;
            Rgb([g, g, g])
        })
    }
}

/// Renders a DRR of `vol` seen through `(k, e)`.
pub fn render_drr(vol: &Volume, k: &CameraIntrinsics, e: &ExtrinsicPose, step_mm: f64) -> Result<ProjectionImage> {
    if !(step_mm > 0.0 && step_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ray step must be positive, got {step_mm}"
        )));
    }
    k.validate()?;
    let [w, h] = k.detector;
    let mut data = vec![0.0; w * h];
    par::for_each_chunk(&mut data, w, |row, line| {
        for (col, out) in line.iter_mut().enumerate() {
            let (src, dir) = pixel_ray(k, e, col as f64, row as f64);
            *out = line_integral(vol, &src, &dir, step_mm);
        }
    });
    ProjectionImage::new(w, h, data, *k, *e)
}

/// Rotation whose viewing axis is world `+y` (anterior-posterior), with
/// detector columns along world `+x` and rows along world `-z`.
pub fn ap_view_rotation() -> Mat3 {
    Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
}

/// Planned geometry for a volume: the source sits `SOURCE_TO_CENTER_MM` from
/// the volume center looking along the AP axis, and the pixel pitch is chosen
/// so the volume footprint covers `FOOTPRINT_FILL` of the detector.
pub fn default_geometry(grid: &Grid, detector: [usize; 2]) -> Result<(CameraIntrinsics, ExtrinsicPose)> {
    let r = ap_view_rotation();
    let center = grid.center();
    let t = Vec3::new(0.0, 0.0, SOURCE_TO_CENTER_MM) - r * center;
    let e = ExtrinsicPose::new(r, t)?;

    // Footprint on the detector at unit pitch.
    let unit = CameraIntrinsics::new(SOURCE_TO_DETECTOR_MM, [0.0, 0.0], [1, 1], 1.0)?;
    let (lo, hi) = grid.bounds();
    let mut half = [0.0f64; 2];
    for corner in 0..8 {
        let p = Vec3::new(
            if corner & 1 == 0 { lo.x } else { hi.x },
            if corner & 2 == 0 { lo.y } else { hi.y },
            if corner & 4 == 0 { lo.z } else { hi.z },
        );
        let q = project_point(&unit, &e, &p)?;
        half[0] = half[0].max(q.x.abs());
        half[1] = half[1].max(q.y.abs());
    }
    let pitch = (0..2)
        .map(|a| 2.0 * half[a] / (FOOTPRINT_FILL * detector[a] as f64))
        .fold(0.0f64, f64::max);
    let pitch = if pitch > 0.0 { pitch } else { 1.0 };
    let k = CameraIntrinsics::centered(SOURCE_TO_DETECTOR_MM, detector, pitch)?;
    Ok((k, e))
}
