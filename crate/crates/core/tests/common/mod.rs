#![allow(dead_code)]

use geopose::geom::CameraIntrinsics;
use geopose::onboard::{build_template_database, DescriptorSource, OnboardConfig, TemplateDatabase};
use geopose::render::TriMesh;

pub const ORACLE_DIM: usize = 384;
pub const ORACLE_SEED: u64 = 7;

/// LINEMOD-like camera.
pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap()
}

pub fn blob() -> TriMesh {
    TriMesh::asymmetric_blob(0.1, 24, 36)
}

pub fn oracle_source() -> DescriptorSource {
    DescriptorSource::Oracle { dim: ORACLE_DIM, seed: ORACLE_SEED }
}

/// Oracle database with a coarse viewpoint set.
pub fn coarse_db(mesh: &TriMesh, alpha: f64, pca_dim: usize) -> TemplateDatabase {
    let cfg = OnboardConfig { alpha_deg: alpha, pca_dim, ..Default::default() };
    let k = cfg.grid.adapt_intrinsics(&camera());
    build_template_database(mesh, &cfg, &k, &oracle_source(), "blob").unwrap()
}
