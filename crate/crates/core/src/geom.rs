//! Rigid transforms, pinhole projection, viewpoint sampling and the
//! closed-form Kabsch solver.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3, SVD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Element of SE(3). Maps points `x` to `rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self::new(*rot.matrix(), Vec3::zeros())
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn is_valid(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() < 1e-9
            && (self.rotation.determinant() - 1.0).abs() < 1e-9
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// `[R | t]` as 12 values, row-major.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vec3::new(v[3], v[7], v[11]))
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&Vec3> for &RigidTransform {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.transform_point(rhs)
    }
}

/// Angle of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * skew.norm();
    sin.atan2(cos)
}

/// Pinhole intrinsics. Pixel `(u, v)` addresses the pixel at column `u`, row `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Row-major 3×3 `K`.
    pub fn matrix(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }
}

/// Depth at which an object of diameter `diameter` spans `apparent_px` pixels.
pub fn standoff_distance(diameter: f64, apparent_px: f64, k: &CameraIntrinsics) -> Result<f64> {
    if !(diameter > 0.0 && apparent_px > 0.0) {
        return Err(Error::InvalidInput(format!(
            "standoff needs positive diameter and apparent size, got {diameter}, {apparent_px}"
        )));
    }
    Ok(k.mean_focal() * diameter / apparent_px)
}

pub fn backproject(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Result<Vec3> {
    if !(z > 0.0) {
        return Err(Error::InvalidInput(format!("invalid depth {z} at ({u}, {v})")));
    }
    Ok(Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z))
}

/// Returns `(u, v, z)`; points at or behind the camera plane are rejected.
pub fn project(p: &Vec3, k: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::InvalidInput(format!("point behind camera: {p:?}")));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

/// Rotation drawn uniformly from SO(3) (normalised Gaussian quaternion).
pub fn uniform_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let mut g = || -> f64 { StandardNormal.sample(rng) };
    let q = Quaternion::new(g(), g(), g(), g());
    *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}

/// Camera-from-object rotations covering SO(3).
#[derive(Clone, Debug)]
pub struct ViewpointSet {
    /// Camera-from-object transforms with zero translation; the caller
    /// places the object along the optical axis.
    pub views: Vec<RigidTransform>,
    pub alpha_deg: f64,
    pub delta_deg: f64,
    /// Unit directions from the object origin towards each base camera.
    pub directions: Vec<Vec3>,
}

impl ViewpointSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn in_plane_steps(&self) -> usize {
        (360.0 / self.delta_deg).round() as usize
    }
}

/// Number of spherical directions for angular spacing `alpha_deg`.
pub fn fibonacci_base_count(alpha_deg: f64) -> usize {
    let a = alpha_deg.to_radians();
    (4.0 * PI / (a * a)).floor() as usize
}

/// `n` points of the spherical Fibonacci lattice.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Camera-from-object rotation for a camera at `direction` looking at the origin.
pub fn look_at_origin(direction: &Vec3) -> Matrix3<f64> {
    let dir = direction.normalize();
    let forward = -dir;
    let world_up = if dir.z.abs() > 1.0 - 1e-6 { Vec3::x() } else { Vec3::z() };
    let up = (world_up - forward * world_up.dot(&forward)).normalize();
    // image y points down
    let y = -up;
    let x = y.cross(&forward);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), forward.transpose()])
}

pub fn fibonacci_viewpoints(alpha_deg: f64, delta_deg: f64) -> Result<ViewpointSet> {
    if !(alpha_deg > 0.0 && alpha_deg <= 90.0) {
        return Err(Error::InvalidInput(format!("alpha must be in (0, 90], got {alpha_deg}")));
    }
    let steps = 360.0 / delta_deg;
    if !(delta_deg > 0.0) || (steps - steps.round()).abs() > 1e-9 || steps.round() < 1.0 {
        return Err(Error::InvalidInput(format!("delta {delta_deg} does not divide 360")));
    }
    let steps = steps.round() as usize;
    let directions = fibonacci_sphere(fibonacci_base_count(alpha_deg));
    let mut views = Vec::with_capacity(directions.len() * steps);
    for dir in &directions {
        let base = look_at_origin(dir);
        for k in 0..steps {
            let roll = (k as f64 * delta_deg).to_radians();
            let rz = *Rotation3::from_axis_angle(&Vec3::z_axis(), roll).matrix();
            views.push(RigidTransform::new(rz * base, Vec3::zeros()));
        }
    }
    Ok(ViewpointSet { views, alpha_deg, delta_deg, directions })
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!("kabsch needs paired points, got {} and {}", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("kabsch needs >= 3 points, got {}", src.len())));
    }
    let cs = centroid(src);
    let cd = centroid(dst);

    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        let a = a - cs;
        let b = b - cd;
        cov += a * b.transpose();
        spread += a * a.transpose();
    }

    // collinear or coincident sources leave a rotation about their line free
    let eig = spread.symmetric_eigenvalues();
    let mut ev = [eig[0], eig[1], eig[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("source points are collinear or coincident".into()));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        let (imin, _) = svd.singular_values.argmin();
        d[(imin, imin)] = -1.0;
    }
    let rotation = v_t.transpose() * d * u.transpose();
    let translation = cd - rotation * cs;
    Ok(RigidTransform::new(rotation, translation))
}
