//! Mesh loading and CPU ray-cast depth/mask rendering.

mod mesh;
mod raycast;

pub use mesh::{mesh_diameter, point_set_diameter, triangle_area, TriMesh};
pub use raycast::{raycast_depth, raycast_with_bvh, MeshBvh, TemplateRender};

use crate::error::{Error, Result};
use crate::geom::{fibonacci_viewpoints, standoff_distance, CameraIntrinsics, RigidTransform, Vec3, ViewpointSet};

/// Camera-from-object pose that places the mesh's bounding-box centre on the
/// optical axis at `distance`.
pub fn centered_pose(mesh: &TriMesh, view: &RigidTransform, distance: f64) -> RigidTransform {
    let c = mesh.bounds_center();
    RigidTransform::new(view.rotation, Vec3::new(0.0, 0.0, distance) - view.rotation * c)
}

/// Renders the Fibonacci viewpoints of one mesh at the standoff depth for a
/// target apparent size.
pub struct TemplateRenderer<'a> {
    mesh: &'a TriMesh,
    bvh: MeshBvh,
    views: ViewpointSet,
    distance: f64,
    intrinsics: CameraIntrinsics,
}

impl<'a> TemplateRenderer<'a> {
    pub fn new(
        mesh: &'a TriMesh,
        alpha_deg: f64,
        delta_deg: f64,
        apparent_px: f64,
        k: &CameraIntrinsics,
    ) -> Result<Self> {
        let views = fibonacci_viewpoints(alpha_deg, delta_deg)?;
        let distance = standoff_distance(mesh_diameter(mesh), apparent_px, k)?;
        Ok(Self { mesh, bvh: MeshBvh::build(mesh), views, distance, intrinsics: *k })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Renders view `i`; a mask touching the border is a framing error.
    pub fn render(&self, i: usize) -> Result<TemplateRender> {
        let pose = centered_pose(self.mesh, &self.views.views[i], self.distance);
        let r = raycast_with_bvh(&self.bvh, self.mesh, &pose, &self.intrinsics);
        if r.mask.is_empty() || r.mask.touches_border() {
            return Err(Error::Framing { view: i });
        }
        Ok(r)
    }
}

/// Renders every viewpoint of the Fibonacci sampling at the standoff depth
/// for an apparent size of `apparent_px` pixels.
pub fn render_templates(
    mesh: &TriMesh,
    alpha_deg: f64,
    delta_deg: f64,
    apparent_px: f64,
    k: &CameraIntrinsics,
) -> Result<Vec<TemplateRender>> {
    use rayon::prelude::*;

    let renderer = TemplateRenderer::new(mesh, alpha_deg, delta_deg, apparent_px, k)?;
    (0..renderer.len()).into_par_iter().map(|i| renderer.render(i)).collect()
}
