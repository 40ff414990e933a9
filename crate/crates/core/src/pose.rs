//! Camera model, residual C-arm pose sampling, and folding the pose error
//! into a volume-frame rigid motion.
//!
//! Conventions: an [`ExtrinsicPose`] maps world points into the camera frame,
//! `X_c = R X + T`, with the camera looking down `+z_c`. A perturbation `P`
//! acts on camera coordinates, so the perturbed pose is `E' = P E`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::DisplacementField;
use crate::{Error, Mat3, Result, Vec3};

type Rows3 = [[f64; 3]; 3];

fn to_rows(m: &Mat3) -> Rows3 {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn from_rows(r: &Rows3) -> Mat3 {
    Mat3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

/// Checks `RᵀR = I` and `det R = 1` to 1e-9.
pub fn check_rotation(r: &Mat3) -> Result<()> {
    let ortho = (r.transpose() * r - Mat3::identity()).amax();
    let det = r.determinant();
    if !(ortho < 1e-9 && (det - 1.0).abs() < 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "not a rotation: |RᵀR - I|max = {ortho:e}, det = {det}"
        )));
    }
    Ok(())
}

/// Pinhole intrinsics. The focal length is the source-to-detector distance in
/// millimeters; dividing by the pixel pitch gives the focal length in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_mm: f64,
    /// Principal point (column, row) in pixels.
    pub principal_point: [f64; 2],
    /// Detector size (width, height) in pixels.
    pub detector: [usize; 2],
    /// Pixel pitch, mm per pixel.
    pub pixel_pitch: f64,
}

impl CameraIntrinsics {
    pub fn new(focal_mm: f64, principal_point: [f64; 2], detector: [usize; 2], pixel_pitch: f64) -> Result<Self> {
        let k = CameraIntrinsics {
            focal_mm,
            principal_point,
            detector,
            pixel_pitch,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the detector center, i.e.
    /// halfway between the outermost pixel centers.
    pub fn centered(focal_mm: f64, detector: [usize; 2], pixel_pitch: f64) -> Result<Self> {
        let pp = [(detector[0] as f64 - 1.0) / 2.0, (detector[1] as f64 - 1.0) / 2.0];
        CameraIntrinsics::new(focal_mm, pp, detector, pixel_pitch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_mm > 0.0 && self.focal_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal length must be positive, got {}",
                self.focal_mm
            )));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel pitch must be positive, got {}",
                self.pixel_pitch
            )));
        }
        if self.detector.contains(&0) {
            return Err(Error::InvalidArgument("detector size must be positive".into()));
        }
        let [cu, cv] = self.principal_point;
        if !(cu >= 0.0 && cu <= self.detector[0] as f64 && cv >= 0.0 && cv <= self.detector[1] as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point {:?} outside detector {:?}",
                self.principal_point, self.detector
            )));
        }
        Ok(())
    }

    pub fn focal_px(&self) -> f64 {
        self.focal_mm / self.pixel_pitch
    }

    /// The 3×3 intrinsic matrix `K`.
    pub fn matrix(&self) -> Mat3 {
        let f = self.focal_px();
        let [cu, cv] = self.principal_point;
        Mat3::new(f, 0.0, cu, 0.0, f, cv, 0.0, 0.0, 1.0)
    }
}

/// Rigid map `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Mat3::identity() && self.translation == Vec3::zeros()
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`.
    pub fn then_after(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &nalgebra::Matrix4<f64>) -> RigidTransform {
        RigidTransform {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: Rows3,
    translation: [f64; 3],
}

impl From<RigidTransform> for PoseRepr {
    fn from(t: RigidTransform) -> Self {
        PoseRepr {
            rotation: to_rows(&t.rotation),
            translation: t.translation.into(),
        }
    }
}

impl TryFrom<PoseRepr> for RigidTransform {
    type Error = String;

    fn try_from(r: PoseRepr) -> std::result::Result<Self, String> {
        let t = RigidTransform {
            rotation: from_rows(&r.rotation),
            translation: Vec3::from(r.translation),
        };
        if t.rotation.iter().chain(t.translation.iter()).any(|v| !v.is_finite()) {
            return Err("non-finite pose entry".into());
        }
        Ok(t)
    }
}

/// Camera extrinsics `E = [R | T]`, world → camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigidTransform", into = "RigidTransform")]
pub struct ExtrinsicPose(RigidTransform);

impl TryFrom<RigidTransform> for ExtrinsicPose {
    type Error = String;

    fn try_from(t: RigidTransform) -> std::result::Result<Self, String> {
        ExtrinsicPose::new(t.rotation, t.translation).map_err(|e| e.to_string())
    }
}

impl From<ExtrinsicPose> for RigidTransform {
    fn from(e: ExtrinsicPose) -> Self {
        e.0
    }
}

impl ExtrinsicPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(ExtrinsicPose(RigidTransform { rotation, translation }))
    }

    pub fn identity() -> Self {
        ExtrinsicPose(RigidTransform::identity())
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.0.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.0.translation
    }

    pub fn as_rigid(&self) -> &RigidTransform {
        &self.0
    }

    #[inline]
    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.0.apply(x)
    }

    /// Source (camera center) in world coordinates, `-RᵀT`.
    pub fn camera_center(&self) -> Vec3 {
        -(self.0.rotation.transpose() * self.0.translation)
    }

    /// World-frame unit vector of the viewing axis (`+z_c`).
    pub fn view_direction(&self) -> Vec3 {
        self.0.rotation.row(2).transpose()
    }

    /// World-frame unit vectors of the detector column and row axes.
    pub fn image_axes(&self) -> [Vec3; 2] {
        [self.0.rotation.row(0).transpose(), self.0.rotation.row(1).transpose()]
    }
}

/// Residual pose error `P`: rotation `R_P` about a camera-frame pivot, then a
/// translation `T_P` parallel to the image plane.
///
/// As a homogeneous map: `X ↦ R_P (X - pivot) + pivot + T_P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePerturbation {
    #[serde(with = "rows3")]
    pub rotation: Mat3,
    pub translation: [f64; 3],
    pub pivot: [f64; 3],
    /// Signed translation scale drawn from the truncated normal.
    pub a: f64,
    /// Signed rotation-angle scale drawn from the truncated normal.
    pub b: f64,
    /// Angle of the Haar-drawn rotation before rescaling.
    pub haar_angle: f64,
}

mod rows3 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat3, D::Error> {
        Ok(from_rows(&Rows3::deserialize(d)?))
    }
}

impl PosePerturbation {
    pub fn identity() -> Self {
        PosePerturbation {
            rotation: Mat3::identity(),
            translation: [0.0; 3],
            pivot: [0.0; 3],
            a: 0.0,
            b: 0.0,
            haar_angle: 0.0,
        }
    }

    pub fn pure_translation(t: Vec3) -> Self {
        PosePerturbation {
            translation: t.into(),
            ..PosePerturbation::identity()
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_vector(&self.rotation).norm()
    }

    pub fn as_rigid(&self) -> RigidTransform {
        let pivot = Vec3::from(self.pivot);
        RigidTransform {
            rotation: self.rotation,
            translation: pivot - self.rotation * pivot + Vec3::from(self.translation),
        }
    }
}

/// Pose-sampling bounds. Scales default to `sqrt(T_max / 2)` and
/// `sqrt(R_max / 2)` (standard deviations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseBounds {
    /// Maximum translation, mm.
    pub t_max: f64,
    /// Maximum rotation angle, rad.
    pub r_max: f64,
    pub t_sigma: Option<f64>,
    pub r_sigma: Option<f64>,
}

impl Default for PoseBounds {
    fn default() -> Self {
        PoseBounds {
            t_max: 17.0,
            r_max: PI / 4.0,
            t_sigma: None,
            r_sigma: None,
        }
    }
}

impl PoseBounds {
    pub fn zero() -> Self {
        PoseBounds {
            t_max: 0.0,
            r_max: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "T_max must be >= 0, got {}",
                self.t_max
            )));
        }
        if !(0.0..=PI).contains(&self.r_max) {
            return Err(Error::InvalidArgument(format!(
                "R_max must lie in [0, pi], got {}",
                self.r_max
            )));
        }
        for s in [self.t_sigma, self.r_sigma].into_iter().flatten() {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("scale must be >= 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn translation_sigma(&self) -> f64 {
        self.t_sigma.unwrap_or((self.t_max / 2.0).sqrt())
    }

    pub fn rotation_sigma(&self) -> f64 {
        self.r_sigma.unwrap_or((self.r_max / 2.0).sqrt())
    }
}

/// Haar-uniform rotation from a uniform unit quaternion (Shoemake's
/// subgroup construction). Returns `(w, x, y, z)`.
pub fn haar_quaternion<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (s1, s2) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (t2, t3) = (2.0 * PI * u2, 2.0 * PI * u3);
    [s2 * t3.cos(), s1 * t2.sin(), s1 * t2.cos(), s2 * t3.sin()]
}

/// Rotation vector (axis × angle, angle in `[0, π]`) of a unit quaternion.
pub fn quaternion_to_rotation_vector(q: [f64; 4]) -> Vec3 {
    let [mut w, mut x, mut y, mut z] = q;
    if w < 0.0 {
        (w, x, y, z) = (-w, -x, -y, -z);
    }
    let v = Vec3::new(x, y, z);
    let s = v.norm();
    if s == 0.0 {
        return Vec3::zeros();
    }
    v * (2.0 * s.atan2(w) / s)
}

/// Rotation matrix of a rotation vector (Rodrigues).
pub fn rotation_from_vector(r: &Vec3) -> Mat3 {
    nalgebra::Rotation3::from_scaled_axis(*r).into_inner()
}

/// Rotation vector of a rotation matrix.
pub fn rotation_vector(m: &Mat3) -> Vec3 {
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*m));
    quaternion_to_rotation_vector([q.w, q.i, q.j, q.k])
}

/// `|x|` with `x ~ N(0, sigma)`, redrawn until it is at most `max`.
fn truncated_abs_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64, max: f64) -> f64 {
    if max == 0.0 || sigma == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    for _ in 0..1_000_000 {
        let x: f64 = normal.sample(rng);
        if x.abs() <= max {
            return x;
        }
    }
    // Only reachable for scales vastly larger than the bound.
    max
}

/// Draws a pose perturbation.
///
/// `image_plane` holds two orthonormal camera-frame vectors spanning the
/// image plane; `pivot` is the camera-frame point the rotation turns about
/// (typically the volume center).
pub fn sample_pose_perturbation<R: Rng + ?Sized>(
    rng: &mut R,
    bounds: &PoseBounds,
    image_plane: [Vec3; 2],
    pivot: Vec3,
) -> Result<PosePerturbation> {
    bounds.validate()?;
    let phi = 2.0 * PI * rng.random::<f64>();
    let dir = image_plane[0] * phi.cos() + image_plane[1] * phi.sin();
    let a = truncated_abs_normal(rng, bounds.translation_sigma(), bounds.t_max);
    let translation = dir * a.abs();

    let q = haar_quaternion(rng);
    let r_haar = quaternion_to_rotation_vector(q);
    let haar_angle = r_haar.norm();
    let b = truncated_abs_normal(rng, bounds.rotation_sigma(), bounds.r_max);
    let rotation = if haar_angle > 0.0 && b != 0.0 {
        rotation_from_vector(&(r_haar * (b.abs() / haar_angle)))
    } else {
        Mat3::identity()
    };

    Ok(PosePerturbation {
        rotation,
        translation: translation.into(),
        pivot: pivot.into(),
        a,
        b,
        haar_angle,
    })
}

/// Camera-frame image-plane basis `(e_x, e_y)`.
pub fn camera_image_plane() -> [Vec3; 2] {
    [Vec3::x(), Vec3::y()]
}

/// `E' = P E`.
pub fn compose_pose(p: &PosePerturbation, e: &ExtrinsicPose) -> ExtrinsicPose {
    let t = p.as_rigid().then_after(e.as_rigid());
    ExtrinsicPose(t)
}

/// Volume-frame rigid map `Q = E⁻¹ P E`: projecting `Q x` with `E` is the
/// same as projecting `x` with `E' = P E`.
pub fn volume_frame_rigid(p: &PosePerturbation, e: &ExtrinsicPose) -> RigidTransform {
    e.as_rigid()
        .inverse()
        .then_after(&p.as_rigid())
        .then_after(e.as_rigid())
}

/// Total target field `u_tot(x) = Q(x + u(x)) - x` on the lattice of `u`.
pub fn compose_total_field(u: &DisplacementField, q: &RigidTransform) -> Result<DisplacementField> {
    if u.channels() != 3 {
        return Err(Error::InvalidArgument(
            "total-field composition needs a 3-channel field".into(),
        ));
    }
    let grid = *u.grid();
    // Written as R u + ((R - I) x + T) so the identity map returns u exactly.
    let offset = q.rotation - Mat3::identity();
    let vectors: Vec<Vec3> = (0..grid.len())
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            let x = grid.node_world(i, j, k);
            q.rotation * u.vector(idx) + (offset * x + q.translation)
        })
        .collect();
    DisplacementField::from_vectors(grid, &vectors)
}

/// In-plane restriction of a 3-channel field: components along the two
/// world-frame image axes of `pose`.
pub fn project_to_image_plane(field: &DisplacementField, pose: &ExtrinsicPose) -> Result<DisplacementField> {
    if field.channels() != 3 {
        return Err(Error::InvalidArgument(
            "in-plane restriction needs a 3-channel field".into(),
        ));
    }
    let [ex, ey] = pose.image_axes();
    let n = field.grid().len();
    let mut data = vec![0.0; 2 * n];
    for idx in 0..n {
        let v = field.vector(idx);
        data[idx] = ex.dot(&v);
        data[n + idx] = ey.dot(&v);
    }
    DisplacementField::new(*field.grid(), 2, data)
}

/// Inverse of [`project_to_image_plane`] with zero out-of-plane component.
pub fn lift_from_image_plane(field: &DisplacementField, pose: &ExtrinsicPose) -> Result<DisplacementField> {
    match field.channels() {
        3 => Ok(field.clone()),
        _ => {
            let [ex, ey] = pose.image_axes();
            let c0 = field.channel(0);
            let c1 = field.channel(1);
            let vectors: Vec<Vec3> = (0..field.grid().len()).map(|i| ex * c0[i] + ey * c1[i]).collect();
            DisplacementField::from_vectors(*field.grid(), &vectors)
        }
    }
}
