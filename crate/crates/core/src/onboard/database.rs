use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;

use super::format::RawDescriptorGrid;
use super::grid::{lift_patch_centers, valid_patch_indices, PatchGridSpec};
use super::oracle::OracleDescriptors;
use super::pca::{fit_pca, project_descriptors, PcaBasis};
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, RigidTransform, Vec3};
use crate::render::{mesh_diameter, TemplateRenderer, TriMesh};

/// One rendered view: projected descriptor bank, patch centres in the
/// template camera frame and the camera-from-object pose.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateEntry {
    /// `N_i × D_PCA`, unit-norm rows.
    pub descriptors: DMatrix<f32>,
    pub centers: Vec<[f32; 3]>,
    pub pose: RigidTransform,
}

impl TemplateEntry {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, q: usize) -> Vec3 {
        let c = self.centers[q];
        Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)
    }

    /// Patch centres mapped into the object model frame.
    pub fn model_centers(&self) -> Vec<Vec3> {
        let inv = self.pose.inverse();
        (0..self.len()).map(|q| inv.transform_point(&self.center(q))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateDatabase {
    pub object_id: String,
    pub entries: Vec<TemplateEntry>,
    pub pca: PcaBasis,
    /// Object diameter in meters.
    pub diameter: f64,
    /// Render intrinsics.
    pub intrinsics: CameraIntrinsics,
    pub grid: PatchGridSpec,
}

impl TemplateDatabase {
    pub fn total_patches(&self) -> usize {
        self.entries.iter().map(TemplateEntry::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diameter > 0.0) {
            return Err(Error::Consistency(format!("diameter {} is not positive", self.diameter)));
        }
        let dim = self.pca.output_dim();
        for (i, e) in self.entries.iter().enumerate() {
            if e.is_empty() || e.descriptors.nrows() != e.len() || e.descriptors.ncols() != dim {
                return Err(Error::Consistency(format!(
                    "template {i}: {} descriptors of dim {}, {} centres (expected dim {dim})",
                    e.descriptors.nrows(),
                    e.descriptors.ncols(),
                    e.len()
                )));
            }
        }
        Ok(())
    }
}

/// Where raw per-patch descriptors come from during onboarding.
#[derive(Clone, Debug)]
pub enum DescriptorSource {
    /// Geometry-derived descriptors of the given dimension.
    Oracle { dim: usize, seed: u64 },
    /// Directory holding one `.g6dr` grid per view, in view order when sorted
    /// by file name.
    RawDir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct OnboardConfig {
    pub alpha_deg: f64,
    pub delta_deg: f64,
    pub pca_dim: usize,
    /// Target apparent object size in the render (pixels).
    pub apparent_px: f64,
    /// Subtract the descriptor mean before projecting; `false` applies the
    /// bare linear projection.
    pub center_pca: bool,
    pub grid: PatchGridSpec,
}

impl Default for OnboardConfig {
    fn default() -> Self {
        Self {
            alpha_deg: 25.0,
            delta_deg: 60.0,
            pca_dim: 256,
            apparent_px: 336.0,
            center_pca: true,
            grid: PatchGridSpec::default(),
        }
    }
}

pub(crate) fn raw_descriptor_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("g6dr")))
        .collect();
    files.sort();
    Ok(files)
}

/// Gathers the descriptor of every listed cell from a raw grid.
pub fn gather_cells(grid: &RawDescriptorGrid, cells: &[(u32, u32)]) -> DMatrix<f32> {
    let mut out = DMatrix::<f32>::zeros(cells.len(), grid.dim as usize);
    for (i, &(row, col)) in cells.iter().enumerate() {
        for (c, v) in grid.cell(row, col).iter().enumerate() {
            out[(i, c)] = *v;
        }
    }
    out
}

/// Renders the viewpoints, extracts foreground patches, fits the per-object
/// PCA and stores projected descriptor banks.
pub fn build_template_database(
    mesh: &TriMesh,
    config: &OnboardConfig,
    render_intrinsics: &CameraIntrinsics,
    source: &DescriptorSource,
    object_id: &str,
) -> Result<TemplateDatabase> {
    let grid = config.grid;
    if render_intrinsics.width != grid.image_size || render_intrinsics.height != grid.image_size {
        return Err(Error::InvalidInput(format!(
            "render intrinsics are {}x{}, patch grid needs {}x{}",
            render_intrinsics.width, render_intrinsics.height, grid.image_size, grid.image_size
        )));
    }
    let diameter = mesh_diameter(mesh);
    let renderer =
        TemplateRenderer::new(mesh, config.alpha_deg, config.delta_deg, config.apparent_px, render_intrinsics)?;
    let n_views = renderer.len();

    let raw_files = match source {
        DescriptorSource::RawDir(dir) => {
            let files = raw_descriptor_files(dir)?;
            if files.len() != n_views {
                return Err(Error::InvalidInput(format!(
                    "{} descriptor files in {} for {} views",
                    files.len(),
                    dir.display(),
                    n_views
                )));
            }
            Some(files)
        }
        DescriptorSource::Oracle { .. } => None,
    };
    let oracle = match source {
        DescriptorSource::Oracle { dim, seed } => Some(OracleDescriptors::new(diameter, *dim, *seed)?),
        DescriptorSource::RawDir(_) => None,
    };

    struct ViewPatches {
        centers: Vec<Vec3>,
        raw: DMatrix<f32>,
        pose: RigidTransform,
    }
    let views: Vec<ViewPatches> = (0..n_views)
        .into_par_iter()
        .map(|i| {
            let r = renderer.render(i)?;
            let cells = valid_patch_indices(&r.mask, &grid);
            if cells.is_empty() {
                return Err(Error::Consistency(format!("view {i} has no foreground patches")));
            }
            let centers = lift_patch_centers(&r.depth, &cells, &grid, render_intrinsics)?;
            let raw = match (&oracle, &raw_files) {
                (Some(o), _) => {
                    let inv = r.pose.inverse();
                    let model: Vec<Vec3> = centers.iter().map(|c| inv.transform_point(c)).collect();
                    o.describe(&model)
                }
                (None, Some(files)) => {
                    let g = RawDescriptorGrid::load(&files[i])?;
                    if g.grid_w as u32 != grid.cells() || g.grid_h as u32 != grid.cells() {
                        return Err(Error::InvalidInput(format!(
                            "{}: grid {}x{} does not match {}x{}",
                            files[i].display(),
                            g.grid_w,
                            g.grid_h,
                            grid.cells(),
                            grid.cells()
                        )));
                    }
                    gather_cells(&g, &cells)
                }
                (None, None) => unreachable!(),
            };
            Ok(ViewPatches { centers, raw, pose: r.pose })
        })
        .collect::<Result<_>>()?;
    info!("rendered {n_views} views");

    let dim = views[0].raw.ncols();
    if views.iter().any(|v| v.raw.ncols() != dim) {
        return Err(Error::InvalidInput("descriptor dimension differs between views".into()));
    }
    let total: usize = views.iter().map(|v| v.raw.nrows()).sum();
    let mut all = DMatrix::<f32>::zeros(total, dim);
    let mut row = 0;
    for v in &views {
        all.rows_mut(row, v.raw.nrows()).copy_from(&v.raw);
        row += v.raw.nrows();
    }
    let pca = fit_pca(&all, config.pca_dim, config.center_pca)?;
    drop(all);

    let entries = views
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let (descriptors, kept) = project_descriptors(&v.raw, &pca)?;
            if kept.is_empty() {
                return Err(Error::Consistency(format!("view {i} lost every descriptor in projection")));
            }
            let centers = kept
                .iter()
                .map(|&k| {
                    let c = v.centers[k];
                    [c.x as f32, c.y as f32, c.z as f32]
                })
                .collect();
            Ok(TemplateEntry { descriptors, centers, pose: v.pose })
        })
        .collect::<Result<Vec<_>>>()?;

    let db = TemplateDatabase {
        object_id: object_id.to_string(),
        entries,
        pca,
        diameter,
        intrinsics: *render_intrinsics,
        grid,
    };
    db.validate()?;
    Ok(db)
}
