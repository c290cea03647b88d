//! Synthetic single-object scenes with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{backproject, uniform_rotation, CameraIntrinsics, RigidTransform};
use crate::matching::{SceneDescriptors, SceneObservation};
use crate::onboard::OracleDescriptors;
use crate::raster::Mask;
use crate::render::{mesh_diameter, raycast_with_bvh, MeshBvh, TriMesh};

const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthNoise {
    /// Gaussian depth noise standard deviation (meters).
    pub depth_sigma: f64,
    /// Mask erosion radius (pixels).
    pub mask_erode: u32,
    /// Fraction of mask pixels hidden behind a planar occluder.
    pub occluder_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    /// Camera-from-model.
    pub pose: RigidTransform,
    pub object_id: u32,
    /// Visible mask.
    pub mask: Mask,
    pub visibility_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub observation: SceneObservation,
    pub gt: GroundTruthInstance,
    /// Pixel count of the unoccluded, uneroded render.
    pub full_mask_pixels: usize,
}

impl SynthScene {
    /// Oracle descriptor source matching the ground-truth geometry.
    pub fn oracle_source<'a>(&self, oracle: &'a OracleDescriptors) -> SceneDescriptors<'a> {
        SceneDescriptors::Oracle { oracle, object_from_camera: self.gt.pose.inverse() }
    }
}

/// Renders one mesh under random poses.
pub struct SceneSynthesizer<'a> {
    mesh: &'a TriMesh,
    bvh: MeshBvh,
    diameter: f64,
    pub intrinsics: CameraIntrinsics,
    pub object_id: u32,
    /// Range of apparent object sizes in pixels.
    pub apparent_px: (f64, f64),
}

impl<'a> SceneSynthesizer<'a> {
    pub fn new(mesh: &'a TriMesh, intrinsics: CameraIntrinsics, object_id: u32) -> Result<Self> {
        intrinsics.validate()?;
        let short = intrinsics.width.min(intrinsics.height) as f64;
        Ok(Self {
            mesh,
            bvh: MeshBvh::build(mesh),
            diameter: mesh_diameter(mesh),
            intrinsics,
            object_id,
            apparent_px: (0.3 * short, 0.5 * short),
        })
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Random pose with the whole object inside the frame; renders depth and
    /// mask, then applies erosion, occlusion and depth noise in that order.
    pub fn generate(&self, seed: u64, noise: &SynthNoise) -> Result<SynthScene> {
        if !(0.0..1.0).contains(&noise.occluder_fraction) || !(noise.depth_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid noise settings {noise:?}")));
        }
        let k = &self.intrinsics;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = self.mesh.bounds_center();
        for _ in 0..MAX_ATTEMPTS {
            let rotation = uniform_rotation(&mut rng);
            let px = rng.random_range(self.apparent_px.0..=self.apparent_px.1);
            let z = k.mean_focal() * self.diameter / px;
            let margin = 0.5 * px + 2.0;
            if 2.0 * margin >= k.width.min(k.height) as f64 {
                return Err(Error::Generation(format!("apparent size {px} px does not fit the image")));
            }
            let u = rng.random_range(margin..k.width as f64 - margin);
            let v = rng.random_range(margin..k.height as f64 - margin);
            let anchor = backproject(u, v, z, k)?;
            let pose = RigidTransform::new(rotation, anchor - rotation * centre);
            let render = raycast_with_bvh(&self.bvh, self.mesh, &pose, k);
            if render.mask.is_empty() || render.mask.touches_border() {
                continue;
            }
            let full = render.mask.count();
            let mut depth = render.depth;
            let mut mask = render.mask.eroded(noise.mask_erode);
            if mask.is_empty() {
                return Err(Error::Generation(format!("erosion by {} px removed the whole mask", noise.mask_erode)));
            }

            if noise.occluder_fraction > 0.0 {
                // half-plane occluder along a random image direction, placed at
                // the quantile that hides the requested fraction of the mask
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let (c, s) = (theta.cos(), theta.sin());
                let coord = |x: u32, y: u32| x as f64 * c + y as f64 * s;
                let mut values: Vec<f64> = Vec::with_capacity(mask.count());
                let mut nearest = f64::INFINITY;
                for y in 0..mask.height {
                    for x in 0..mask.width {
                        if mask.get(x, y) {
                            values.push(coord(x, y));
                            nearest = nearest.min(depth.get(x, y));
                        }
                    }
                }
                values.sort_by(f64::total_cmp);
                let keep = ((1.0 - noise.occluder_fraction) * values.len() as f64).round() as usize;
                let cut = values.get(keep).copied().unwrap_or(f64::INFINITY);
                let occluder_depth = (nearest - 0.2 * self.diameter).max(0.5 * nearest);
                for y in 0..mask.height {
                    for x in 0..mask.width {
                        if coord(x, y) >= cut {
                            mask.set(x, y, false);
                            depth.set(x, y, occluder_depth);
                        }
                    }
                }
                if mask.is_empty() {
                    continue;
                }
            }

            if noise.depth_sigma > 0.0 {
                let normal = Normal::new(0.0, noise.depth_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
                for v in depth.data.iter_mut().filter(|v| **v > 0.0) {
                    *v = (*v + normal.sample(&mut rng)).max(1e-6);
                }
            }

            let visibility_fraction = mask.count() as f64 / full as f64;
            return Ok(SynthScene {
                observation: SceneObservation { depth, mask: mask.clone(), intrinsics: *k },
                gt: GroundTruthInstance { pose, object_id: self.object_id, mask, visibility_fraction },
                full_mask_pixels: full,
            });
        }
        Err(Error::Generation(format!("no in-frame pose after {MAX_ATTEMPTS} attempts")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::raycast_depth;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap()
    }

    #[test]
    fn noiseless_matches_render() {
        let mesh = TriMesh::asymmetric_blob(0.1, 16, 24);
        let synth = SceneSynthesizer::new(&mesh, k(), 1).unwrap();
        let s = synth.generate(3, &SynthNoise::default()).unwrap();
        let r = raycast_depth(&mesh, &s.gt.pose, &k());
        assert_eq!(s.observation.depth, r.depth);
        assert_eq!(s.observation.mask, r.mask);
        assert!(!s.gt.mask.touches_border());
        assert_eq!(s.gt.visibility_fraction, 1.0);
        assert!(s.gt.pose.is_valid());
    }

    #[test]
    fn occluder_hides_requested_fraction() {
        let mesh = TriMesh::asymmetric_blob(0.1, 16, 24);
        let synth = SceneSynthesizer::new(&mesh, k(), 1).unwrap();
        for seed in 0..5 {
            let noise = SynthNoise { occluder_fraction: 0.3, ..Default::default() };
            let s = synth.generate(seed, &noise).unwrap();
            let kept = s.observation.mask.count() as f64 / s.full_mask_pixels as f64;
            assert!((kept - 0.7).abs() < 0.02, "kept {kept}");
            // hidden pixels carry the occluder's depth, in front of the object
            let r = raycast_depth(&mesh, &s.gt.pose, &k());
            for i in 0..r.mask.data.len() {
                if r.mask.data[i] && !s.observation.mask.data[i] {
                    assert!(s.observation.depth.data[i] < r.depth.data[i]);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_noisy() {
        let mesh = TriMesh::asymmetric_blob(0.1, 16, 24);
        let synth = SceneSynthesizer::new(&mesh, k(), 1).unwrap();
        let noise = SynthNoise { depth_sigma: 0.002, mask_erode: 1, occluder_fraction: 0.2 };
        let a = synth.generate(11, &noise).unwrap();
        let b = synth.generate(11, &noise).unwrap();
        assert_eq!(a.observation, b.observation);
        let clean = raycast_depth(&mesh, &a.gt.pose, &k());
        let diffs: Vec<f64> = (0..clean.depth.data.len())
            .filter(|&i| a.observation.mask.data[i])
            .map(|i| a.observation.depth.data[i] - clean.depth.data[i])
            .collect();
        let sd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((sd - 0.002).abs() < 0.0002, "noise sd {sd}");
    }

    #[test]
    fn impossible_framing_fails() {
        let mesh = TriMesh::asymmetric_blob(0.1, 16, 24);
        let mut synth = SceneSynthesizer::new(&mesh, k(), 1).unwrap();
        synth.apparent_px = (600.0, 700.0);
        assert!(matches!(synth.generate(0, &SynthNoise::default()), Err(Error::Generation(_))));
    }
}
