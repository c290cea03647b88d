use nalgebra::{Matrix3, Rotation3, Unit};

use crate::geom::{project, CameraIntrinsics, RigidTransform, Vec3};

/// Default angular step for sampling continuous symmetries.
pub const CONTINUOUS_STEP_DEG: f64 = 6.0;

/// Model-frame symmetry transforms; always contains the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetrySet {
    pub transforms: Vec<RigidTransform>,
}

/// Rotation about `axis` through the model-frame point `offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousSymmetry {
    pub axis: Vec3,
    pub offset: Vec3,
}

impl Default for SymmetrySet {
    fn default() -> Self {
        Self::identity()
    }
}

impl SymmetrySet {
    pub fn identity() -> Self {
        Self { transforms: vec![RigidTransform::identity()] }
    }

    /// Every combination of a sampled continuous symmetry with a discrete
    /// one (identity included on both sides).
    pub fn new(discrete: &[RigidTransform], continuous: &[ContinuousSymmetry], step_deg: f64) -> Self {
        let mut disc = vec![RigidTransform::identity()];
        disc.extend(
            discrete
                .iter()
                .filter(|t| t.rotation_angle_to(&RigidTransform::identity()) > 1e-12 || t.translation.norm() > 1e-12),
        );
        let mut cont = vec![RigidTransform::identity()];
        let steps = (360.0 / step_deg).round().max(1.0) as usize;
        for c in continuous {
            let axis = Unit::new_normalize(c.axis);
            for i in 1..steps {
                let r: Matrix3<f64> =
                    *Rotation3::from_axis_angle(&axis, i as f64 * std::f64::consts::TAU / steps as f64).matrix();
                cont.push(RigidTransform::new(r, c.offset - r * c.offset));
            }
        }
        let transforms = cont.iter().flat_map(|c| disc.iter().map(move |d| c.compose(d))).collect();
        Self { transforms }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

/// Maximum symmetric surface distance (meters).
pub fn mssd(t_est: &RigidTransform, t_gt: &RigidTransform, model_pts: &[Vec3], sym: &SymmetrySet) -> f64 {
    let est: Vec<Vec3> = model_pts.iter().map(|p| t_est.transform_point(p)).collect();
    sym.transforms
        .iter()
        .map(|s| {
            let gt = t_gt.compose(s);
            est.iter().zip(model_pts).map(|(e, p)| (e - gt.transform_point(p)).norm()).fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Maximum symmetric projection distance (pixels). A branch with a point
/// behind the camera counts as `+∞`.
pub fn mspd(
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
    model_pts: &[Vec3],
    sym: &SymmetrySet,
    k: &CameraIntrinsics,
) -> f64 {
    let est: Vec<Option<(f64, f64)>> =
        model_pts.iter().map(|p| project(&t_est.transform_point(p), k).ok().map(|(u, v, _)| (u, v))).collect();
    sym.transforms
        .iter()
        .map(|s| {
            let gt = t_gt.compose(s);
            let mut worst = 0.0f64;
            for (e, p) in est.iter().zip(model_pts) {
                match (e, project(&gt.transform_point(p), k)) {
                    (Some((u, v)), Ok((gu, gv, _))) => worst = worst.max(((u - gu).powi(2) + (v - gv).powi(2)).sqrt()),
                    _ => return f64::INFINITY,
                }
            }
            worst
        })
        .fold(f64::INFINITY, f64::min)
}

/// Per-instance errors with the object diameter they are normalised by.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceErrors {
    pub mssd: f64,
    pub mspd: f64,
    pub diameter: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallReport {
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    /// Mean of the two recalls above; the visible-surface term is not computed.
    pub ar: f64,
    pub instances: usize,
}

/// `0.05d, 0.10d, …, 0.50d`.
pub fn mssd_thresholds(diameter: f64) -> [f64; 10] {
    std::array::from_fn(|i| 0.05 * (i + 1) as f64 * diameter)
}

/// `5r, 10r, …, 50r` with `r = image_width / 640`.
pub fn mspd_thresholds(image_width: u32) -> [f64; 10] {
    let r = image_width as f64 / 640.0;
    std::array::from_fn(|i| 5.0 * (i + 1) as f64 * r)
}

fn recall(errors: impl Iterator<Item = (f64, [f64; 10])>) -> (f64, usize) {
    let (mut hits, mut n) = (0usize, 0usize);
    for (e, thresholds) in errors {
        hits += thresholds.iter().filter(|&&t| e < t).count();
        n += 1;
    }
    (hits as f64 / (10 * n.max(1)) as f64, n)
}

/// Recall averaged over the threshold grids; empty input gives zeros.
pub fn average_recall(errors: &[InstanceErrors], image_width: u32) -> RecallReport {
    let mspd_t = mspd_thresholds(image_width);
    let (ar_mssd, n) = recall(errors.iter().map(|e| (e.mssd, mssd_thresholds(e.diameter))));
    let (ar_mspd, _) = recall(errors.iter().map(|e| (e.mspd, mspd_t)));
    RecallReport { ar_mssd, ar_mspd, ar: 0.5 * (ar_mssd + ar_mspd), instances: n }
}
