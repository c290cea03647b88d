//! Hypothesis generation, alignment-error scoring and final pose selection.

use std::time::Instant;

use log::debug;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{backproject, kabsch, project, RigidTransform, Vec3};
use crate::matching::{select_top_k, CorrespondenceSet, SceneInstance, TemplateRanking};
use crate::onboard::TemplateDatabase;
use crate::render::triangle_area;
use crate::spatial::KdTree3;

/// Below this many scene points the estimator falls back to the template pose.
pub const MIN_SCENE_POINTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold as a fraction of the object diameter.
    pub tau_factor: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Re-estimate the best hypothesis from all of its inliers.
    pub refit: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 512, tau_factor: 0.05, min_inliers: 6, seed: 0, refit: true }
    }
}

impl RansacConfig {
    pub fn inlier_threshold(&self, diameter: f64) -> f64 {
        self.tau_factor * diameter
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.tau_factor > 0.0) {
            return Err(Error::InvalidInput(format!(
                "RANSAC needs iterations >= 1 and tau factor > 0, got {} and {}",
                self.iterations, self.tau_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseHypothesis {
    /// Camera-from-model.
    pub transform: RigidTransform,
    pub inliers: usize,
    pub inlier_rms: f64,
    pub template_index: usize,
    /// `+∞` until scored.
    pub wae: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-template RNG seed, independent of evaluation order.
pub fn template_seed(seed: u64, template_index: usize) -> u64 {
    splitmix(seed ^ splitmix(template_index as u64))
}

fn count_inliers(t: &RigidTransform, corr: &CorrespondenceSet, tau: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sq = 0.0;
    for (i, p) in corr.pairs.iter().enumerate() {
        let r = (t.transform_point(&p.model) - p.scene).norm();
        if r < tau {
            idx.push(i);
            sq += r * r;
        }
    }
    let rms = if idx.is_empty() { f64::INFINITY } else { (sq / idx.len() as f64).sqrt() };
    (idx, rms)
}

/// Three-point RANSAC over model→scene correspondences with a Kabsch
/// solver. `None` when fewer than `min_inliers` agree.
pub fn ransac_kabsch(corr: &CorrespondenceSet, diameter: f64, cfg: &RansacConfig) -> Option<PoseHypothesis> {
    let n = corr.pairs.len();
    if n < 3 || cfg.validate().is_err() {
        return None;
    }
    let tau = cfg.inlier_threshold(diameter);
    let min_area = 1e-12 * diameter * diameter;
    let mut rng = ChaCha8Rng::seed_from_u64(template_seed(cfg.seed, corr.template_index));

    let mut best: Option<(Vec<usize>, f64, RigidTransform)> = None;
    for _ in 0..cfg.iterations {
        let pick = sample(&mut rng, n, 3);
        let (a, b, c) = (&corr.pairs[pick.index(0)], &corr.pairs[pick.index(1)], &corr.pairs[pick.index(2)]);
        if triangle_area(&[a.model, b.model, c.model]) < min_area {
            continue;
        }
        let Ok(t) = kabsch(&[a.model, b.model, c.model], &[a.scene, b.scene, c.scene]) else {
            continue;
        };
        let (inliers, rms) = count_inliers(&t, corr, tau);
        let better = match &best {
            None => true,
            Some((bi, brms, _)) => inliers.len() > bi.len() || (inliers.len() == bi.len() && rms < *brms),
        };
        if better {
            best = Some((inliers, rms, t));
        }
    }

    let (inliers, mut rms, mut transform) = best?;
    if inliers.len() < cfg.min_inliers {
        return None;
    }
    let mut count = inliers.len();
    if cfg.refit {
        let src: Vec<Vec3> = inliers.iter().map(|&i| corr.pairs[i].model).collect();
        let dst: Vec<Vec3> = inliers.iter().map(|&i| corr.pairs[i].scene).collect();
        if let Ok(t) = kabsch(&src, &dst) {
            let (refit_inliers, refit_rms) = count_inliers(&t, corr, tau);
            transform = t;
            count = refit_inliers.len();
            rms = refit_rms;
        }
    }
    Some(PoseHypothesis {
        transform,
        inliers: count,
        inlier_rms: rms,
        template_index: corr.template_index,
        wae: f64::INFINITY,
    })
}

/// Scores poses against one scene; holds the nearest-neighbour index over
/// the scene cloud.
pub struct AlignmentScorer<'a> {
    scene: &'a SceneInstance,
    tree: KdTree3,
    tau: f64,
    /// Count mask membership only, without the depth agreement test.
    pub mask_only: bool,
}

impl<'a> AlignmentScorer<'a> {
    pub fn new(scene: &'a SceneInstance, tau: f64) -> Self {
        Self { scene, tree: KdTree3::build(&scene.scene_cloud), tau, mask_only: false }
    }

    /// Mean distance from the transformed correspondence points to the
    /// scene cloud.
    pub fn mean_surface_distance(&self, t: &RigidTransform, corr_model_pts: &[Vec3]) -> f64 {
        if corr_model_pts.is_empty() || self.tree.is_empty() {
            return f64::INFINITY;
        }
        let sum: f64 = corr_model_pts
            .iter()
            .map(|p| self.tree.nearest(&t.transform_point(p)).map_or(f64::INFINITY, |n| n.1))
            .sum();
        sum / corr_model_pts.len() as f64
    }

    /// Fraction of model points that land inside the mask with agreeing depth.
    pub fn support_fraction(&self, t: &RigidTransform, model_sample: &[Vec3]) -> f64 {
        if model_sample.is_empty() {
            return 0.0;
        }
        let (mask, depth, k) = (&self.scene.mask, &self.scene.depth, &self.scene.intrinsics);
        let supported = model_sample
            .iter()
            .filter(|p| {
                let Ok((u, v, z)) = project(&t.transform_point(p), k) else { return false };
                let (x, y) = (u.round(), v.round());
                if x < 0.0 || y < 0.0 || x >= mask.width as f64 || y >= mask.height as f64 {
                    return false;
                }
                let (x, y) = (x as u32, y as u32);
                if !mask.get(x, y) {
                    return false;
                }
                let observed = depth.get(x, y);
                self.mask_only || (observed > 0.0 && (z - observed).abs() <= 2.0 * self.tau)
            })
            .count();
        supported as f64 / model_sample.len() as f64
    }

    pub fn wae(&self, t: &RigidTransform, corr_model_pts: &[Vec3], model_sample: &[Vec3]) -> f64 {
        let support = self.support_fraction(t, model_sample);
        if support == 0.0 {
            return f64::INFINITY;
        }
        self.mean_surface_distance(t, corr_model_pts) / support
    }
}

/// Alignment error of `t`: mean correspondence-to-surface distance divided
/// by the supported fraction of the model sample. `+∞` when unsupported.
pub fn weighted_alignment_error(
    t: &RigidTransform,
    corr_model_pts: &[Vec3],
    scene: &SceneInstance,
    model_sample: &[Vec3],
    tau: f64,
) -> f64 {
    AlignmentScorer::new(scene, tau).wae(t, corr_model_pts, model_sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    /// Fewer than [`MIN_SCENE_POINTS`] scene points.
    SparseCloud,
    /// No hypothesis with finite alignment error.
    NoHypothesis,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalPose {
    pub transform: RigidTransform,
    pub fallback: Option<Fallback>,
    /// Index into the hypothesis list, `None` for fallbacks.
    pub chosen: Option<usize>,
    pub wae: f64,
}

/// Template rotation with the model centroid placed on the mask centroid
/// ray at the median scene depth.
pub fn fallback_pose(
    scene: &SceneInstance,
    db: &TemplateDatabase,
    best_template: usize,
    model_centroid: &Vec3,
) -> Result<RigidTransform> {
    let (cx, cy) = scene.mask.centroid().ok_or(Error::Unposeable)?;
    if !(scene.median_depth > 0.0) {
        return Err(Error::Unposeable);
    }
    let rotation = db
        .entries
        .get(best_template)
        .ok_or_else(|| Error::InvalidInput(format!("template {best_template} out of range")))?
        .pose
        .rotation;
    let anchor = backproject(cx, cy, scene.median_depth, &scene.intrinsics)?;
    Ok(RigidTransform::new(rotation, anchor - rotation * model_centroid))
}

/// Minimum-WAE hypothesis (ties: more inliers, then lower template index),
/// or the fallback pose.
pub fn select_final_pose(
    hypotheses: &[PoseHypothesis],
    scene: &SceneInstance,
    db: &TemplateDatabase,
    best_template: usize,
    model_centroid: &Vec3,
) -> Result<FinalPose> {
    if scene.scene_cloud.is_empty() && scene.mask.is_empty() {
        return Err(Error::Unposeable);
    }
    let fallback = |reason| -> Result<FinalPose> {
        Ok(FinalPose {
            transform: fallback_pose(scene, db, best_template, model_centroid)?,
            fallback: Some(reason),
            chosen: None,
            wae: f64::INFINITY,
        })
    };
    if scene.scene_cloud.len() < MIN_SCENE_POINTS {
        return fallback(Fallback::SparseCloud);
    }
    let best = hypotheses.iter().enumerate().filter(|(_, h)| h.wae.is_finite()).min_by(|(_, a), (_, b)| {
        a.wae.total_cmp(&b.wae).then(b.inliers.cmp(&a.inliers)).then(a.template_index.cmp(&b.template_index))
    });
    match best {
        Some((i, h)) => Ok(FinalPose { transform: h.transform, fallback: None, chosen: Some(i), wae: h.wae }),
        None => fallback(Fallback::NoHypothesis),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub top_k: usize,
    pub gamma: f64,
    pub ransac: RansacConfig,
    pub mask_only: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { top_k: 15, gamma: 0.3, ransac: RansacConfig::default(), mask_only: false }
    }
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub pose: FinalPose,
    pub ranking: TemplateRanking,
    pub hypotheses: Vec<PoseHypothesis>,
    /// Template-ranking score of the chosen (or best) template.
    pub score: f64,
    pub seconds: f64,
}

impl Estimate {
    pub fn is_fallback(&self) -> bool {
        self.pose.fallback.is_some()
    }

    /// Hypothesis with the most inliers (ties: lower RMS, then rank order).
    pub fn max_inlier_hypothesis(&self) -> Option<&PoseHypothesis> {
        self.hypotheses.iter().reduce(|a, b| {
            if b.inliers > a.inliers || (b.inliers == a.inliers && b.inlier_rms < a.inlier_rms) {
                b
            } else {
                a
            }
        })
    }
}

/// Full inference for one object: ranking, RANSAC per selected template,
/// alignment scoring and selection.
pub struct PoseEstimator<'a> {
    pub db: &'a TemplateDatabase,
    pub model_sample: Vec<Vec3>,
    pub model_centroid: Vec3,
    pub config: EstimatorConfig,
}

impl<'a> PoseEstimator<'a> {
    pub fn new(db: &'a TemplateDatabase, model_sample: Vec<Vec3>, config: EstimatorConfig) -> Result<Self> {
        if model_sample.is_empty() {
            return Err(Error::InvalidInput("model sample is empty".into()));
        }
        config.ransac.validate()?;
        if !(0.0..=1.0).contains(&config.gamma) || config.top_k == 0 {
            return Err(Error::InvalidInput(format!(
                "gamma must be in [0, 1] and top-k >= 1, got {} and {}",
                config.gamma, config.top_k
            )));
        }
        let model_centroid = model_sample.iter().sum::<Vec3>() / model_sample.len() as f64;
        Ok(Self { db, model_sample, model_centroid, config })
    }

    pub fn estimate(&self, scene: &SceneInstance) -> Result<Estimate> {
        let start = Instant::now();
        let d = self.db.diameter;
        let ranking = select_top_k(self.db, scene, self.config.top_k, self.config.gamma)?;
        let mut hypotheses = Vec::new();
        if ranking.has_candidates() && scene.scene_cloud.len() >= MIN_SCENE_POINTS {
            let mut scorer = AlignmentScorer::new(scene, self.config.ransac.inlier_threshold(d));
            scorer.mask_only = self.config.mask_only;
            hypotheses = ranking
                .selected
                .par_iter()
                .filter_map(|corr| {
                    let mut h = ransac_kabsch(corr, d, &self.config.ransac)?;
                    h.wae = scorer.wae(&h.transform, &corr.model_points(), &self.model_sample);
                    Some(h)
                })
                .collect();
        }
        let best_template = ranking.best_template();
        let pose = select_final_pose(&hypotheses, scene, self.db, best_template, &self.model_centroid)?;
        let template = pose.chosen.map_or(best_template, |i| hypotheses[i].template_index);
        debug!("{} hypotheses, fallback {:?}, template {template}, wae {}", hypotheses.len(), pose.fallback, pose.wae);
        Ok(Estimate {
            score: ranking.scores[template],
            pose,
            ranking,
            hypotheses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}
