//! Coordinate conventions, surface frames, rotations and horizon lines.
//!
//! Camera axes: x forward, y right, z up when the camera is upright.
//! Upright (global) axes: z is the gravity-aligned scene up direction.
//! Image pixels: column `c` grows along +y, row `v` grows along -z.

use nalgebra::Unit;
use thiserror::Error;

use crate::{Mat3, Vec3};

/// `‖n × ŷ‖` below which the tangent falls back to the up hint.
pub const DEGENERACY_THRESHOLD: f64 = 1e-4;

/// Camera right axis, the reference direction for tangents.
pub const CAMERA_Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("surface normal is parallel to both the reference axis and the up hint")]
    DegenerateFrame,
    #[error("up vector is aligned with the optical axis; roll is undefined")]
    GimbalDegenerate,
    #[error("horizon line does not cross the image")]
    NoVisibleHorizon,
    #[error("matrix is not a rotation (orthogonality error {0:.3e})")]
    NotARotation(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("angles out of range: pitch {pitch}, roll {roll}")]
    AnglesOutOfRange { pitch: f64, roll: f64 },
}

/// Proper rotation taking camera coordinates to upright coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Checks `RᵀR = I` and `det R = 1` to 1e-9.
    pub fn new(m: Mat3) -> Result<Self, GeometryError> {
        let ortho = (m.transpose() * m - Mat3::identity()).amax();
        let det_err = (m.determinant() - 1.0).abs();
        let err = ortho.max(det_err);
        if err > 1e-9 {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(Rotation(m))
    }

    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_rad);
        Rotation(*r.matrix())
    }

    /// Rotation about the upright z axis.
    pub fn yaw(deg: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), deg.to_radians())
    }

    /// Camera-to-upright rotation with the given yaw (degrees) whose third row
    /// equals [`angles_to_up`] of `angles`.
    ///
    /// `R = Rz(yaw) · Ry(-pitch) · Rx(-roll)`.
    pub fn from_angles(angles: OrientationAngles, yaw_deg: f64) -> Self {
        let ry = Self::from_axis_angle(&Vec3::y(), -angles.pitch.to_radians());
        let rx = Self::from_axis_angle(&Vec3::x(), -angles.roll.to_radians());
        Rotation(Self::yaw(yaw_deg).0 * ry.0 * rx.0)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateSystem {
    Camera,
    Global,
}

/// Orthonormal `[n t b]` at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceFrame {
    pub n: Vec3,
    pub t: Vec3,
    pub b: Vec3,
    pub coords: CoordinateSystem,
}

impl SurfaceFrame {
    pub fn from_matrix(m: &Mat3, coords: CoordinateSystem) -> Self {
        SurfaceFrame {
            n: m.column(0).into_owned(),
            t: m.column(1).into_owned(),
            b: m.column(2).into_owned(),
            coords,
        }
    }

    /// Columns `[n t b]`.
    pub fn matrix(&self) -> Mat3 {
        Mat3::from_columns(&[self.n, self.t, self.b])
    }

    /// `‖FᵀF - I‖_max`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.matrix();
        (m.transpose() * m - Mat3::identity()).amax()
    }
}

/// Third row of an upright surface frame, `[n_z t_z b_z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutVector(pub Vec3);

impl LayoutVector {
    pub fn nz(&self) -> f64 {
        self.0.x
    }
    pub fn tz(&self) -> f64 {
        self.0.y
    }
    pub fn bz(&self) -> f64 {
        self.0.z
    }
}

/// Pinhole intrinsics described by the vertical field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    /// Degrees.
    pub vertical_fov: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Principal point at the image center.
    pub fn new(width: u32, height: u32, vertical_fov: f64) -> Result<Self, GeometryError> {
        Self::with_principal_point(width, height, vertical_fov, width as f64 / 2.0, height as f64 / 2.0)
    }

    pub fn with_principal_point(
        width: u32,
        height: u32,
        vertical_fov: f64,
        cx: f64,
        cy: f64,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size {width}x{height}"
            )));
        }
        if !(vertical_fov > 0.0 && vertical_fov < 180.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "vertical fov {vertical_fov}"
            )));
        }
        Ok(CameraIntrinsics { width, height, vertical_fov, cx, cy })
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.vertical_fov.to_radians() / 2.0).tan()
    }

    /// Unnormalized viewing ray through pixel position `(c, v)`.
    pub fn ray(&self, c: f64, v: f64) -> Vec3 {
        let f = self.focal();
        Vec3::new(1.0, (c - self.cx) / f, -(v - self.cy) / f)
    }
}

/// Pitch and roll in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationAngles {
    pub pitch: f64,
    pub roll: f64,
}

impl OrientationAngles {
    pub fn new(pitch: f64, roll: f64) -> Result<Self, GeometryError> {
        if !(pitch > -90.0 && pitch < 90.0 && roll > -180.0 && roll <= 180.0) {
            return Err(GeometryError::AnglesOutOfRange { pitch, roll });
        }
        Ok(OrientationAngles { pitch, roll })
    }
}

/// Frame whose tangent is `n × ŷ` for the camera right axis `ŷ`.
pub fn build_frame(n: &Vec3, up_hint: &Vec3) -> Result<SurfaceFrame, GeometryError> {
    build_frame_with_axis(n, &CAMERA_Y, up_hint, CoordinateSystem::Camera)
}

/// Like [`build_frame`] but with the camera right axis `right` expressed in
/// whatever coordinates `n` lives in.
///
/// When `n` is within [`DEGENERACY_THRESHOLD`] of `±right`, the tangent is the
/// up hint projected onto the tangent plane of `n`.
pub fn build_frame_with_axis(
    n: &Vec3,
    right: &Vec3,
    up_hint: &Vec3,
    coords: CoordinateSystem,
) -> Result<SurfaceFrame, GeometryError> {
    let cross = n.cross(right);
    let t = if cross.norm() >= DEGENERACY_THRESHOLD {
        cross.normalize()
    } else {
        let projected = up_hint - n * n.dot(up_hint);
        if projected.norm() < DEGENERACY_THRESHOLD {
            return Err(GeometryError::DegenerateFrame);
        }
        projected.normalize()
    };
    let b = n.cross(&t);
    Ok(SurfaceFrame { n: *n, t, b, coords })
}

/// Multiplies each column by `R`.
pub fn rotate_frame(r: &Rotation, f: &SurfaceFrame) -> SurfaceFrame {
    SurfaceFrame {
        n: r.apply(&f.n),
        t: r.apply(&f.t),
        b: r.apply(&f.b),
        coords: CoordinateSystem::Global,
    }
}

pub fn layout_from_global(f: &SurfaceFrame) -> LayoutVector {
    LayoutVector(Vec3::new(f.n.z, f.t.z, f.b.z))
}

/// Scene up in camera coordinates: the third row of the camera-to-upright
/// rotation.
pub fn up_from_rotation(r: &Rotation) -> Unit<Vec3> {
    Unit::new_unchecked(r.0.row(2).transpose())
}

/// `u = (sin θ, -cos θ sin φ, cos θ cos φ)` for pitch θ and roll φ.
pub fn angles_to_up(a: OrientationAngles) -> Unit<Vec3> {
    let (sp, cp) = a.pitch.to_radians().sin_cos();
    let (sr, cr) = a.roll.to_radians().sin_cos();
    Unit::new_unchecked(Vec3::new(sp, -cp * sr, cp * cr))
}

/// Inverse of [`angles_to_up`]. When the up vector lies on the optical axis
/// the returned error carries no angles; use [`up_to_angles_lossy`] to get
/// `roll = 0` in that case.
pub fn up_to_angles(u: &Vec3) -> Result<OrientationAngles, GeometryError> {
    if u.x.abs() > 1.0 - 1e-12 {
        return Err(GeometryError::GimbalDegenerate);
    }
    Ok(up_to_angles_lossy(u))
}

pub fn up_to_angles_lossy(u: &Vec3) -> OrientationAngles {
    let u = u.normalize();
    let pitch = u.x.clamp(-1.0, 1.0).asin().to_degrees();
    let roll = if u.x.abs() > 1.0 - 1e-12 {
        0.0
    } else {
        let r = (-u.y).atan2(u.z).to_degrees();
        if r == -180.0 {
            180.0
        } else {
            r
        }
    };
    OrientationAngles { pitch, roll }
}

/// Segment of the horizon clipped to the image, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonLine {
    pub start: (f64, f64),
    pub end: (f64, f64),
}

impl HorizonLine {
    /// Visual inclination in degrees, counter-clockwise positive with image
    /// rows growing downward.
    pub fn slope_deg(&self) -> f64 {
        let dc = self.end.0 - self.start.0;
        let dv = self.end.1 - self.start.1;
        let a = (-dv).atan2(dc).to_degrees();
        // Fold into (-90, 90]: a line has no direction.
        if a > 90.0 {
            a - 180.0
        } else if a <= -90.0 {
            a + 180.0
        } else {
            a
        }
    }
}

/// Image locus of rays orthogonal to `u`, clipped to `[0, W] × [0, H]`.
pub fn horizon_line(u: &Vec3, k: &CameraIntrinsics) -> Result<HorizonLine, GeometryError> {
    let u = u.normalize();
    if u.x.abs() >= 1.0 - 1e-9 {
        return Err(GeometryError::NoVisibleHorizon);
    }
    let f = k.focal();
    // uᵀ ray(c, v) = 0  ⇔  a·c + b·v + d = 0
    let a = u.y;
    let b = -u.z;
    let d = u.x * f - u.y * k.cx + u.z * k.cy;
    let w = k.width as f64;
    let h = k.height as f64;
    let tol = 1e-9 * (w + h);

    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(4);
    let mut push = |p: (f64, f64)| {
        if p.0 >= -tol && p.0 <= w + tol && p.1 >= -tol && p.1 <= h + tol {
            let p = (p.0.clamp(0.0, w), p.1.clamp(0.0, h));
            if !pts.iter().any(|q| (q.0 - p.0).abs() <= tol && (q.1 - p.1).abs() <= tol) {
                pts.push(p);
            }
        }
    };
    if b.abs() > 1e-15 {
        push((0.0, -(d + a * 0.0) / b));
        push((w, -(d + a * w) / b));
    }
    if a.abs() > 1e-15 {
        push((-(d + b * 0.0) / a, 0.0));
        push((-(d + b * h) / a, h));
    }
    if pts.len() < 2 {
        return Err(GeometryError::NoVisibleHorizon);
    }
    // Farthest pair gives the visible chord.
    let mut best = (0, 1, -1.0);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let dist = (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
            if dist > best.2 {
                best = (i, j, dist);
            }
        }
    }
    let (mut p, mut q) = (pts[best.0], pts[best.1]);
    if q.0 < p.0 || (q.0 == p.0 && q.1 < p.1) {
        std::mem::swap(&mut p, &mut q);
    }
    Ok(HorizonLine { start: p, end: q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn frame_from_forward_facing_normal() {
        let f = build_frame(&v(0.0, 0.0, 1.0), &Vec3::z()).unwrap();
        assert_abs_diff_eq!(f.t, v(-1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(f.b, v(0.0, -1.0, 0.0), epsilon = 1e-15);

        let f = build_frame(&v(1.0, 0.0, 0.0), &Vec3::z()).unwrap();
        assert_abs_diff_eq!(f.t, v(0.0, 0.0, 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(f.b, v(0.0, -1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_normal_uses_up_hint() {
        let f = build_frame(&v(0.0, 1.0, 0.0), &v(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(f.t, v(0.0, 0.0, 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(f.b, v(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert!(f.orthonormality_error() < 1e-12);

        // Slightly off-axis normal with a tilted hint still gives an orthonormal frame.
        let n = v(1e-5, 1.0, 0.0).normalize();
        let f = build_frame(&n, &v(0.3, 0.1, 0.9).normalize()).unwrap();
        assert!(f.orthonormality_error() < 1e-12);
    }

    #[test]
    fn fully_degenerate_frame_is_rejected() {
        let e = build_frame(&v(0.0, 1.0, 0.0), &v(0.0, 1.0, 0.0)).unwrap_err();
        assert_eq!(e, GeometryError::DegenerateFrame);
    }

    #[test]
    fn rotate_frame_basics() {
        let f = SurfaceFrame::from_matrix(&Mat3::identity(), CoordinateSystem::Camera);
        let same = rotate_frame(&Rotation::identity(), &f);
        assert_eq!(same.matrix(), f.matrix());

        let r = Rotation::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let g = rotate_frame(&r, &f);
        assert_abs_diff_eq!(g.matrix(), *r.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn layout_values_for_room_surfaces() {
        let up = Vec3::z();
        let floor = build_frame_with_axis(&up, &CAMERA_Y, &up, CoordinateSystem::Global).unwrap();
        let wall = build_frame_with_axis(&Vec3::x(), &CAMERA_Y, &up, CoordinateSystem::Global).unwrap();
        let ceiling = build_frame_with_axis(&-up, &CAMERA_Y, &up, CoordinateSystem::Global).unwrap();
        assert_eq!(layout_from_global(&floor).nz(), 1.0);
        assert_eq!(layout_from_global(&wall).nz(), 0.0);
        assert_eq!(layout_from_global(&ceiling).nz(), -1.0);
    }

    #[test]
    fn up_vector_from_rotations() {
        assert_eq!(up_from_rotation(&Rotation::identity()).into_inner(), Vec3::z());
        let yaw = Rotation::yaw(37.0);
        assert_abs_diff_eq!(up_from_rotation(&yaw).into_inner(), Vec3::z(), epsilon = 1e-15);

        let pitch10 = Rotation::from_axis_angle(&Vec3::y(), -10f64.to_radians());
        let expected = angles_to_up(OrientationAngles { pitch: 10.0, roll: 0.0 });
        assert_abs_diff_eq!(
            up_from_rotation(&pitch10).into_inner(),
            expected.into_inner(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn angle_examples() {
        let a = up_to_angles(&Vec3::z()).unwrap();
        assert_eq!((a.pitch, a.roll), (0.0, 0.0));

        let u = angles_to_up(OrientationAngles { pitch: 10.0, roll: 0.0 });
        assert_abs_diff_eq!(u.x, 0.17365, epsilon = 5e-6);
        assert_abs_diff_eq!(u.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u.z, 0.98481, epsilon = 5e-6);

        let a = up_to_angles(&v(0.0, -0.5, 0.75f64.sqrt())).unwrap();
        assert_abs_diff_eq!(a.pitch, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.roll, 30.0, epsilon = 1e-12);
    }

    #[test]
    fn gimbal_case_reports_error_and_zero_roll() {
        assert_eq!(up_to_angles(&Vec3::x()), Err(GeometryError::GimbalDegenerate));
        let a = up_to_angles_lossy(&Vec3::x());
        assert_eq!(a.roll, 0.0);
        assert_abs_diff_eq!(a.pitch, 90.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation::new(Mat3::identity() * 1.01).is_err());
        let reflect = Mat3::from_diagonal(&v(1.0, 1.0, -1.0));
        assert!(Rotation::new(reflect).is_err());
        assert!(Rotation::new(*Rotation::from_angles(OrientationAngles { pitch: 12.0, roll: -7.0 }, 40.0).matrix()).is_ok());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0, 10, 40.0).is_err());
        assert!(CameraIntrinsics::new(10, 10, 180.0).is_err());
        assert!(CameraIntrinsics::new(10, 10, 0.0).is_err());
        assert!(CameraIntrinsics::new(1, 1, 179.0).is_ok());
    }

    #[test]
    fn horizon_level_camera() {
        let k = CameraIntrinsics::new(640, 480, 40.0).unwrap();
        let line = horizon_line(&Vec3::z(), &k).unwrap();
        assert_eq!(line.start, (0.0, 240.0));
        assert_eq!(line.end, (640.0, 240.0));
        assert_eq!(line.slope_deg(), 0.0);
    }

    #[test]
    fn horizon_rolled_45() {
        let k = CameraIntrinsics::new(640, 480, 40.0).unwrap();
        let u = angles_to_up(OrientationAngles { pitch: 0.0, roll: 45.0 });
        let line = horizon_line(&u, &k).unwrap();
        assert_abs_diff_eq!(line.slope_deg(), 45.0, epsilon = 1e-9);
        // Passes through the principal point.
        let (p, q) = (line.start, line.end);
        let cross = (q.0 - p.0) * (240.0 - p.1) - (q.1 - p.1) * (320.0 - p.0);
        assert_abs_diff_eq!(cross, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn horizon_pitch_shift_matches_pinhole() {
        let k = CameraIntrinsics::new(400, 300, 45.0).unwrap();
        let u = angles_to_up(OrientationAngles { pitch: 10.0, roll: 0.0 });
        let line = horizon_line(&u, &k).unwrap();
        let expected = 150.0 + k.focal() * 10f64.to_radians().tan();
        assert_abs_diff_eq!(line.start.1, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(line.end.1, expected, epsilon = 1e-9);
    }

    #[test]
    fn horizon_outside_view() {
        let k = CameraIntrinsics::new(400, 300, 40.0).unwrap();
        for pitch in [20.5, -20.5, 45.0, -80.0] {
            let u = angles_to_up(OrientationAngles { pitch, roll: 0.0 });
            assert_eq!(horizon_line(&u, &k), Err(GeometryError::NoVisibleHorizon), "pitch {pitch}");
        }
        let u = angles_to_up(OrientationAngles { pitch: 19.5, roll: 0.0 });
        assert!(horizon_line(&u, &k).is_ok());
    }
}
