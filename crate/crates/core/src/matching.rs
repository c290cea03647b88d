//! Scene-side patch assembly, mutual nearest-neighbour matching and
//! template ranking.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{backproject, CameraIntrinsics, RigidTransform, Vec3};
use crate::onboard::{
    project_descriptors, OracleDescriptors, PatchGridSpec, PcaBasis, RawDescriptorGrid, TemplateDatabase,
};
use crate::raster::{BoundingBox, DepthImage, Mask};

/// Fraction of the mask bounding box added on each side of the crop.
pub const CROP_EXPANSION: f64 = 0.1;

/// Minimum mutual matches for a template to count as a candidate.
pub const MIN_CANDIDATE_MATCHES: usize = 3;

/// Depth image, instance mask and intrinsics of one detected instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObservation {
    pub depth: DepthImage,
    pub mask: Mask,
    pub intrinsics: CameraIntrinsics,
}

/// Maps pixels of a square `size × size` crop back to the original image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMap {
    /// Top-left corner of the crop in original pixel-edge coordinates.
    pub left: f64,
    pub top: f64,
    /// Original pixels per crop pixel.
    pub scale: f64,
    pub size: u32,
    pub image_width: u32,
    pub image_height: u32,
}

impl CropMap {
    /// Square crop around `bbox`, expanded by `expand` of its size per side
    /// and shifted to stay inside the image whenever it fits.
    pub fn around(bbox: &BoundingBox, image_width: u32, image_height: u32, size: u32, expand: f64) -> Self {
        let side = bbox.width().max(bbox.height()) as f64 * (1.0 + 2.0 * expand);
        let place = |lo: u32, hi: u32, extent: u32| {
            let centre = (lo + hi + 1) as f64 / 2.0;
            let extent = extent as f64;
            if side <= extent {
                (centre - side / 2.0).clamp(0.0, extent - side)
            } else {
                (extent - side) / 2.0
            }
        };
        Self {
            left: place(bbox.x0, bbox.x1, image_width),
            top: place(bbox.y0, bbox.y1, image_height),
            scale: side / size as f64,
            size,
            image_width,
            image_height,
        }
    }

    pub fn identity(size: u32) -> Self {
        Self { left: 0.0, top: 0.0, scale: 1.0, size, image_width: size, image_height: size }
    }

    /// Continuous original coordinates of crop pixel `(u, v)`.
    pub fn to_original(&self, u: f64, v: f64) -> (f64, f64) {
        (self.left + (u + 0.5) * self.scale - 0.5, self.top + (v + 0.5) * self.scale - 0.5)
    }

    /// Nearest original pixel, or `None` when it falls outside the image.
    pub fn original_pixel(&self, u: u32, v: u32) -> Option<(u32, u32)> {
        let (x, y) = self.to_original(u as f64, v as f64);
        let (x, y) = (x.round(), y.round());
        (x >= 0.0 && y >= 0.0 && x < self.image_width as f64 && y < self.image_height as f64)
            .then_some((x as u32, y as u32))
    }
}

/// Where scene patch descriptors come from.
#[derive(Clone, Copy, Debug)]
pub enum SceneDescriptors<'a> {
    /// Geometry-derived descriptors; needs the object-from-camera transform
    /// to express observed points in the model frame.
    Oracle { oracle: &'a OracleDescriptors, object_from_camera: RigidTransform },
    /// Extractor output for the resized crop.
    Grid(&'a RawDescriptorGrid),
}

/// One instance prepared for matching.
#[derive(Clone, Debug)]
pub struct SceneInstance {
    pub crop_map: CropMap,
    /// `N_s × D_PCA`, unit-norm rows.
    pub descriptors: DMatrix<f32>,
    /// Patch centres in the scene camera frame.
    pub centers_3d: Vec<Vec3>,
    /// Every masked pixel with valid depth, lifted.
    pub scene_cloud: Vec<Vec3>,
    pub mask: Mask,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
    pub median_depth: f64,
}

impl SceneInstance {
    pub fn num_patches(&self) -> usize {
        self.centers_3d.len()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Crops around the mask and assembles the scene patches.
pub fn crop_instance(
    obs: &SceneObservation,
    source: &SceneDescriptors,
    pca: &PcaBasis,
    grid: &PatchGridSpec,
) -> Result<SceneInstance> {
    let bbox = obs.mask.bounding_box().ok_or_else(|| Error::InvalidInput("instance mask is empty".into()))?;
    let map = CropMap::around(&bbox, obs.mask.width, obs.mask.height, grid.image_size, CROP_EXPANSION);
    crop_instance_with_map(obs, map, source, pca, grid)
}

pub fn crop_instance_with_map(
    obs: &SceneObservation,
    map: CropMap,
    source: &SceneDescriptors,
    pca: &PcaBasis,
    grid: &PatchGridSpec,
) -> Result<SceneInstance> {
    let (depth, mask, k) = (&obs.depth, &obs.mask, &obs.intrinsics);
    if (depth.width, depth.height) != (mask.width, mask.height) || (k.width, k.height) != (mask.width, mask.height) {
        return Err(Error::InvalidInput(format!(
            "depth {}x{}, mask {}x{} and intrinsics {}x{} disagree",
            depth.width, depth.height, mask.width, mask.height, k.width, k.height
        )));
    }
    if map.size != grid.image_size {
        return Err(Error::InvalidInput(format!("crop size {} != grid image size {}", map.size, grid.image_size)));
    }
    if mask.is_empty() {
        return Err(Error::InvalidInput("instance mask is empty".into()));
    }

    let mut scene_cloud = Vec::new();
    let mut depths = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let z = depth.get(x, y);
            if mask.get(x, y) && z > 0.0 && z.is_finite() {
                scene_cloud.push(backproject(x as f64, y as f64, z, k)?);
                depths.push(z);
            }
        }
    }
    if depths.is_empty() {
        return Err(Error::InvalidInput("no valid depth inside the instance mask".into()));
    }
    let median_depth = median(&mut depths);

    let n = grid.cells();
    let mut cells = Vec::new();
    let mut centers = Vec::new();
    for row in 0..n {
        for col in 0..n {
            let (u, v) = grid.center_pixel(row, col);
            let Some((x, y)) = map.original_pixel(u, v) else { continue };
            let z = depth.get(x, y);
            if mask.get(x, y) && z > 0.0 && z.is_finite() {
                cells.push((row, col));
                centers.push(backproject(x as f64, y as f64, z, k)?);
            }
        }
    }

    let raw = match source {
        SceneDescriptors::Oracle { oracle, object_from_camera } => {
            let model: Vec<Vec3> = centers.iter().map(|c| object_from_camera.transform_point(c)).collect();
            oracle.describe(&model)
        }
        SceneDescriptors::Grid(g) => {
            if g.grid_w as u32 != n || g.grid_h as u32 != n {
                return Err(Error::InvalidInput(format!(
                    "descriptor grid {}x{} does not match {n}x{n}",
                    g.grid_w, g.grid_h
                )));
            }
            crate::onboard::gather_cells(g, &cells)
        }
    };
    let (descriptors, kept) = if centers.is_empty() {
        (DMatrix::zeros(0, pca.output_dim()), Vec::new())
    } else {
        project_descriptors(&raw, pca)?
    };
    let centers_3d = kept.iter().map(|&i| centers[i]).collect();

    Ok(SceneInstance {
        crop_map: map,
        descriptors,
        centers_3d,
        scene_cloud,
        mask: mask.clone(),
        depth: depth.clone(),
        intrinsics: *k,
        median_depth,
    })
}

/// Dense dot products `scene · tmplᵀ` (`N_s × N_i`).
pub fn similarity_matrix(scene: &DMatrix<f32>, tmpl: &DMatrix<f32>) -> Result<DMatrix<f32>> {
    if scene.ncols() != tmpl.ncols() {
        return Err(Error::InvalidInput(format!(
            "descriptor dims differ: scene {} vs template {}",
            scene.ncols(),
            tmpl.ncols()
        )));
    }
    Ok(scene * tmpl.transpose())
}

/// Pairs `(j, q, S[j, q])` where each side is the other's argmax; ties go to
/// the lowest index. Sorted by `j`.
pub fn mutual_matches(s: &DMatrix<f32>) -> Vec<(usize, usize, f32)> {
    let (rows, cols) = s.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut col_best = vec![0usize; cols];
    for q in 0..cols {
        let column = s.column(q);
        let mut best = 0;
        for j in 1..rows {
            if column[j] > column[best] {
                best = j;
            }
        }
        col_best[q] = best;
    }
    let mut row_best = vec![0usize; rows];
    let mut row_val = vec![f32::NEG_INFINITY; rows];
    for q in 0..cols {
        for (j, v) in s.column(q).iter().enumerate() {
            if *v > row_val[j] {
                row_val[j] = *v;
                row_best[j] = q;
            }
        }
    }
    (0..rows).filter(|&j| col_best[row_best[j]] == j).map(|j| (j, row_best[j], s[(j, row_best[j])])).collect()
}

/// Weighted combination of match coverage and mean matched similarity,
/// `γ·C/N + (1−γ)·s`, evaluated as an interpolation from the nearer end so
/// that both endpoints are exact.
pub fn template_score(matches: usize, scene_patches: usize, mean_sim: f64, gamma: f64) -> f64 {
    let coverage = matches as f64 / scene_patches as f64;
    if gamma < 0.5 {
        mean_sim + gamma * (coverage - mean_sim)
    } else {
        coverage + (1.0 - gamma) * (mean_sim - coverage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Scene camera frame.
    pub scene: Vec3,
    /// Object model frame.
    pub model: Vec3,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub template_index: usize,
    pub pairs: Vec<Correspondence>,
    pub score: f64,
}

impl CorrespondenceSet {
    pub fn model_points(&self) -> Vec<Vec3> {
        self.pairs.iter().map(|p| p.model).collect()
    }

    pub fn scene_points(&self) -> Vec<Vec3> {
        self.pairs.iter().map(|p| p.scene).collect()
    }
}

/// Ranking of every template plus the selected correspondence sets.
#[derive(Clone, Debug)]
pub struct TemplateRanking {
    /// Score of each template, indexed by template.
    pub scores: Vec<f64>,
    pub match_counts: Vec<usize>,
    /// Template indices, best first.
    pub order: Vec<usize>,
    /// Correspondences of the top `k` templates, best first.
    pub selected: Vec<CorrespondenceSet>,
}

impl TemplateRanking {
    pub fn best_template(&self) -> usize {
        self.order[0]
    }

    /// False when no template reached [`MIN_CANDIDATE_MATCHES`].
    pub fn has_candidates(&self) -> bool {
        self.match_counts.iter().any(|&c| c >= MIN_CANDIDATE_MATCHES)
    }
}

struct Scored {
    matches: Vec<(usize, usize, f32)>,
    score: f64,
}

fn score_template(scene: &SceneInstance, tmpl: &DMatrix<f32>, gamma: f64) -> Result<Scored> {
    let ns = scene.num_patches();
    if ns == 0 {
        return Ok(Scored { matches: Vec::new(), score: 0.0 });
    }
    let s = similarity_matrix(&scene.descriptors, tmpl)?;
    let matches = mutual_matches(&s);
    let mean_sim =
        if matches.is_empty() { 0.0 } else { matches.iter().map(|m| m.2 as f64).sum::<f64>() / matches.len() as f64 };
    Ok(Scored { score: template_score(matches.len(), ns, mean_sim, gamma), matches })
}

/// Scores every template and returns the `k` best with model-frame
/// correspondences.
pub fn select_top_k(db: &TemplateDatabase, scene: &SceneInstance, k: usize, gamma: f64) -> Result<TemplateRanking> {
    if k == 0 {
        return Err(Error::InvalidInput("top-k must be at least 1".into()));
    }
    if db.entries.is_empty() {
        return Err(Error::InvalidInput("template database is empty".into()));
    }
    let scored: Vec<Scored> =
        db.entries.par_iter().map(|e| score_template(scene, &e.descriptors, gamma)).collect::<Result<_>>()?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let match_counts = scored.iter().map(|s| s.matches.len()).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let selected = order
        .iter()
        .take(k)
        .map(|&i| {
            let entry = &db.entries[i];
            let model_from_cam = entry.pose.inverse();
            let pairs = scored[i]
                .matches
                .iter()
                .map(|&(j, q, sim)| Correspondence {
                    scene: scene.centers_3d[j],
                    model: model_from_cam.transform_point(&entry.center(q)),
                    similarity: sim as f64,
                })
                .collect();
            CorrespondenceSet { template_index: i, pairs, score: scores[i] }
        })
        .collect();
    Ok(TemplateRanking { scores, match_counts, order, selected })
}
