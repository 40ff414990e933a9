//! Contour overlays of a warped segmentation on a rendered projection.

use image::{Rgb, RgbImage};

use crate::drr::{render_drr, DisplayMapping, ProjectionImage};
use crate::pose::{lift_from_image_plane, CameraIntrinsics, ExtrinsicPose};
use crate::volume::{warp_volume, DisplacementField, Volume};
use crate::{Error, Result};

pub const ORIGINAL_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const WARPED_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Clone, Debug)]
pub struct Overlay {
    pub image: RgbImage,
    pub drr: ProjectionImage,
    /// Contour pixels of the original mask silhouette, row-major.
    pub original: Vec<bool>,
    /// Contour pixels of the warped mask silhouette.
    pub warped: Vec<bool>,
}

impl Overlay {
    pub fn contours_coincide(&self) -> bool {
        self.original == self.warped
    }
}

/// Pixels whose ray crosses the mask.
pub fn silhouette(mask: &Volume, k: &CameraIntrinsics, e: &ExtrinsicPose, step_mm: f64) -> Result<Vec<bool>> {
    let p = render_drr(mask, k, e, step_mm)?;
    Ok(p.data().iter().map(|&v| v > 0.25 * step_mm).collect())
}

/// Silhouette pixels with at least one 4-neighbor outside it (image borders
/// count as outside).
pub fn contour(sil: &[bool], width: usize, height: usize) -> Vec<bool> {
    let at = |c: isize, r: isize| {
        c >= 0 && r >= 0 && (c as usize) < width && (r as usize) < height && sil[r as usize * width + c as usize]
    };
    (0..width * height)
        .map(|i| {
            let (c, r) = ((i % width) as isize, (i / width) as isize);
            sil[i] && !(at(c - 1, r) && at(c + 1, r) && at(c, r - 1) && at(c, r + 1))
        })
        .collect()
}

/// Renders `volume`, then draws the contour of `mask` (green) and of `mask`
/// warped by `field` (red) on top. A 2-channel field is lifted with the
/// image axes of `e`; a field on a coarser lattice is resampled onto the
/// mask lattice first.
pub fn overlay(
    volume: &Volume,
    mask: &Volume,
    field: &DisplacementField,
    k: &CameraIntrinsics,
    e: &ExtrinsicPose,
    step_mm: f64,
) -> Result<Overlay> {
    let field3 = lift_from_image_plane(field, e)?;
    let grid = mask.grid();
    let field3 = if field3.grid().same_geometry(grid) {
        field3
    } else {
        let (lo, hi) = field3.grid().bounds();
        let (mlo, mhi) = grid.bounds();
        if (lo - mlo).norm() > 1e-6 || (hi - mhi).norm() > 1e-6 {
            return Err(Error::GeometryMismatch(format!(
                "field lattice {:?} does not span the mask lattice {:?}",
                field3.grid(),
                grid
            )));
        }
        field3.resample(grid)?
    };
    let warped_mask = warp_volume(mask, &field3)?;
    let drr = render_drr(volume, k, e, step_mm)?;
    let [w, h] = k.detector;
    let original = contour(&silhouette(mask, k, e, step_mm)?, w, h);
    let warped = contour(&silhouette(&warped_mask, k, e, step_mm)?, w, h);
    let mut image = drr.to_rgb8(DisplayMapping::MinMax);
    for (i, (&o, &wp)) in original.iter().zip(&warped).enumerate() {
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        if o {
            image.put_pixel(x, y, ORIGINAL_COLOR);
        }
        if wp {
            image.put_pixel(x, y, WARPED_COLOR);
        }
    }
    Ok(Overlay {
        image,
        drr,
        original,
        warped,
    })
}
