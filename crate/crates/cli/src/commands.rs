use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use geopose::config::RunConfig;
use geopose::eval::bop::{
    evaluate_scene, load_models_info, load_scene, write_models_info, write_results, write_scene, EvalModel, Frame,
    FrameInstance, ModelInfo, ResultRow,
};
use geopose::eval::{average_recall, InstanceErrors, SceneSynthesizer, SymmetrySet, SynthNoise};
use geopose::geom::CameraIntrinsics;
use geopose::matching::{crop_instance, SceneDescriptors, SceneObservation};
use geopose::onboard::{
    build_template_database, load_db, save_db, DescriptorSource, OnboardConfig, OracleDescriptors, RawDescriptorGrid,
};
use geopose::pose::PoseEstimator;
use geopose::render::{mesh_diameter, TriMesh};
use log::{info, warn};
use rayon::prelude::*;

use crate::manifest::{beside, Manifest};
use crate::Tuning;

/// Seed of the geometry-derived descriptor field; onboarding and estimation
/// must agree on it.
const ORACLE_SEED: u64 = 7;

/// Meshes and models_info are in millimeters unless told otherwise.
const DEFAULT_MESH_SCALE: f64 = 0.001;

pub enum Outcome {
    Clean,
    /// Some instances fell back or failed.
    Degraded,
}

fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics { fx: 572.4, fy: 573.6, cx: 325.3, cy: 242.0, width: 640, height: 480 }
}

fn load_mesh(path: &Path, scale: f64) -> Result<TriMesh> {
    TriMesh::load(path, scale).with_context(|| format!("loading mesh {}", path.display()))
}

fn object_name(obj_id: u32) -> String {
    format!("obj_{obj_id:06}")
}

fn scene_id_of(dir: &Path, explicit: Option<u32>) -> u32 {
    explicit.unwrap_or_else(|| dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok()).unwrap_or(0))
}

#[derive(Args, Debug)]
pub struct OnboardArgs {
    /// OBJ or PLY mesh.
    #[arg(long)]
    pub mesh: PathBuf,
    /// Factor converting mesh units to meters.
    #[arg(long, default_value_t = DEFAULT_MESH_SCALE)]
    pub mesh_scale: f64,
    /// Output database file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub obj_id: u32,
    /// Directory with one descriptor grid (`.g6dr`) per view.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Render focal lengths in pixels.
    #[arg(long, default_value_t = 572.4)]
    pub fx: f64,
    #[arg(long, default_value_t = 573.6)]
    pub fy: f64,
}

pub fn onboard(cfg: &RunConfig, tuning: &Tuning, a: &OnboardArgs) -> Result<Outcome> {
    let mesh = load_mesh(&a.mesh, a.mesh_scale)?;
    let onboard_cfg: OnboardConfig = cfg.onboard_config();
    let base = CameraIntrinsics::new(a.fx, a.fy, 320.0, 240.0, 640, 480)?;
    let k = onboard_cfg.grid.adapt_intrinsics(&base);
    let source = match (&a.descriptors, tuning.oracle) {
        (Some(dir), false) => DescriptorSource::RawDir(dir.clone()),
        _ => DescriptorSource::Oracle { dim: cfg.oracle_dim, seed: ORACLE_SEED },
    };
    let start = Instant::now();
    let db = build_template_database(&mesh, &onboard_cfg, &k, &source, &object_name(a.obj_id))?;
    let elapsed = start.elapsed().as_secs_f64();
    save_db(&db, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("views {}", db.entries.len());
    println!("patches {}", db.total_patches());
    println!("elapsed {elapsed:.1} s");
    if elapsed > tuning.time_budget {
        warn!("onboarding took {elapsed:.1} s, over the {:.0} s budget", tuning.time_budget);
        eprintln!("warning: onboarding took {elapsed:.1} s, over the {:.0} s budget", tuning.time_budget);
    }

    let mut m = Manifest::new("onboard", cfg);
    m.seed("oracle", ORACLE_SEED).input(&a.mesh).output(&a.out);
    if let DescriptorSource::RawDir(dir) = &source {
        m.input(dir);
    }
    m.write(&beside(&a.out))?;
    Ok(Outcome::Clean)
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Template database written by `onboard`.
    #[arg(long)]
    pub db: PathBuf,
    /// Mesh of the object, used for the surface sample.
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MESH_SCALE)]
    pub mesh_scale: f64,
    /// Scene directory in the BOP layout.
    #[arg(long)]
    pub scene: PathBuf,
    /// Result CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the scene directory name.
    #[arg(long)]
    pub scene_id: Option<u32>,
    /// Object to pose; defaults to the database's object.
    #[arg(long)]
    pub obj_id: Option<u32>,
    /// Directory of scene descriptor grids named `{im:06}_{inst:06}.g6dr`.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
}

struct InstanceOutcome {
    row: Option<ResultRow>,
    note: Option<String>,
}

pub fn estimate(cfg: &RunConfig, tuning: &Tuning, a: &EstimateArgs) -> Result<Outcome> {
    let db = load_db(&a.db).with_context(|| format!("loading database {}", a.db.display()))?;
    let mesh = load_mesh(&a.mesh, a.mesh_scale)?;
    let d_mesh = mesh_diameter(&mesh);
    ensure!(
        (d_mesh - db.diameter).abs() <= 0.01 * db.diameter,
        "mesh diameter {d_mesh:.6} m does not match the database's {:.6} m (check --mesh-scale)",
        db.diameter
    );
    let obj_id = match a.obj_id {
        Some(id) => id,
        None => db
            .object_id
            .strip_prefix("obj_")
            .and_then(|s| s.parse().ok())
            .with_context(|| format!("cannot infer an object id from {:?}; pass --obj-id", db.object_id))?,
    };
    let frames = load_scene(&a.scene).with_context(|| format!("loading scene {}", a.scene.display()))?;
    ensure!(!frames.is_empty(), "scene {} has no frames", a.scene.display());
    let scene_id = scene_id_of(&a.scene, a.scene_id);

    let estimator = PoseEstimator::new(&db, mesh.sample_surface(cfg.model_points, cfg.seed), cfg.estimator_config())?;
    let oracle = OracleDescriptors::new(db.diameter, db.pca.input_dim(), ORACLE_SEED)?;
    let grids = a.descriptors.as_ref().filter(|_| !tuning.oracle);

    let outcomes: Vec<InstanceOutcome> = frames
        .par_iter()
        .flat_map_iter(|f| f.instances.iter().enumerate().map(move |(i, inst)| (f, i, inst)))
        .filter(|(_, _, inst)| inst.obj_id == obj_id)
        .map(|(f, i, inst)| {
            let tag = format!("scene {scene_id} im {} inst {i} obj {obj_id}", f.im_id);
            match pose_instance(&estimator, &oracle, grids, f, i, inst) {
                Ok((row, fallback)) => InstanceOutcome {
                    row: Some(ResultRow { scene_id, ..row }),
                    note: fallback.map(|why| format!("{tag} fallback {why}")),
                },
                Err(e) => {
                    warn!("{tag}: {e:#}");
                    InstanceOutcome { row: None, note: Some(format!("{tag} failed {e:#}")) }
                }
            }
        })
        .collect();

    let rows: Vec<ResultRow> = outcomes.iter().filter_map(|o| o.row).collect();
    let notes: Vec<&str> = outcomes.iter().filter_map(|o| o.note.as_deref()).collect();
    write_results(&a.out, &rows).with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = {
        let mut p = a.out.clone().into_os_string();
        p.push(".fallbacks.log");
        PathBuf::from(p)
    };
    let mut log = String::new();
    for n in &notes {
        let _ = writeln!(log, "{n}");
    }
    fs::write(&log_path, log)?;
    println!("instances {}", outcomes.len());
    println!("rows {}", rows.len());
    println!("degraded {}", notes.len());

    let mut m = Manifest::new("estimate", cfg);
    m.seed("ransac", cfg.seed).seed("model_sample", cfg.seed).seed("oracle", ORACLE_SEED);
    m.input(&a.db).input(&a.mesh).input(&a.scene).output(&a.out).output(&log_path);
    if let Some(g) = grids {
        m.input(g);
    }
    m.write(&beside(&a.out))?;
    Ok(if notes.is_empty() { Outcome::Clean } else { Outcome::Degraded })
}

fn pose_instance(
    estimator: &PoseEstimator,
    oracle: &OracleDescriptors,
    grids: Option<&PathBuf>,
    frame: &Frame,
    inst_index: usize,
    inst: &FrameInstance,
) -> Result<(ResultRow, Option<String>)> {
    let start = Instant::now();
    let obs = SceneObservation { depth: frame.depth.clone(), mask: inst.mask.clone(), intrinsics: frame.intrinsics };
    let grid;
    let source = match grids {
        Some(dir) => {
            let path = dir.join(format!("{:06}_{inst_index:06}.g6dr", frame.im_id));
            grid = RawDescriptorGrid::load(&path).with_context(|| format!("loading {}", path.display()))?;
            SceneDescriptors::Grid(&grid)
        }
        None => SceneDescriptors::Oracle { oracle, object_from_camera: inst.pose.inverse() },
    };
    let scene = crop_instance(&obs, &source, &estimator.db.pca, &estimator.db.grid)?;
    let est = estimator.estimate(&scene)?;
    let row = ResultRow {
        scene_id: 0,
        im_id: frame.im_id,
        obj_id: inst.obj_id,
        score: est.score,
        pose: est.pose.transform,
        time: start.elapsed().as_secs_f64(),
    };
    info!("im {} inst {inst_index}: {} hypotheses in {:.2} s", frame.im_id, est.hypotheses.len(), row.time);
    Ok((row, est.pose.fallback.map(|f| format!("{f:?}"))))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MESH_SCALE)]
    pub mesh_scale: f64,
    /// Dataset root; receives `models/` and the scene directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of frames.
    #[arg(long, default_value_t = 10)]
    pub count: u32,
    /// Gaussian depth noise, millimeters.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise_mm: f64,
    /// Mask erosion radius, pixels.
    #[arg(long, default_value_t = 0)]
    pub erode: u32,
    /// Fraction of each mask hidden by an occluder.
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    #[arg(long, default_value_t = 1)]
    pub obj_id: u32,
    #[arg(long, default_value_t = 1)]
    pub scene_id: u32,
    /// Millimeters per depth PNG unit.
    #[arg(long, default_value_t = 0.1)]
    pub depth_scale: f64,
}

pub fn frame_seed(base: u64, index: u32) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<Outcome> {
    let mesh = load_mesh(&a.mesh, a.mesh_scale)?;
    let synth = SceneSynthesizer::new(&mesh, default_camera(), a.obj_id)?;
    let noise =
        SynthNoise { depth_sigma: a.depth_noise_mm / 1000.0, mask_erode: a.erode, occluder_fraction: a.occlusion };
    let frames: Vec<Frame> = (0..a.count)
        .into_par_iter()
        .map(|im_id| {
            let s = synth.generate(frame_seed(cfg.seed, im_id), &noise)?;
            Ok(Frame {
                im_id,
                intrinsics: s.observation.intrinsics,
                depth: s.observation.depth,
                instances: vec![FrameInstance {
                    obj_id: a.obj_id,
                    pose: s.gt.pose,
                    mask: s.gt.mask,
                    visib_fract: s.gt.visibility_fraction,
                }],
            })
        })
        .collect::<geopose::Result<_>>()?;

    let models = a.out.join("models");
    fs::create_dir_all(&models)?;
    let info = ModelInfo {
        diameter: synth.diameter(),
        symmetries: SymmetrySet::identity(),
        discrete: vec![],
        continuous: vec![],
    };
    write_models_info(&models.join("models_info.json"), &BTreeMap::from([(a.obj_id, info)]))?;
    mesh.save_ply(models.join(format!("{}.ply", object_name(a.obj_id))), 1.0 / DEFAULT_MESH_SCALE)?;
    let scene_dir = a.out.join(format!("{:06}", a.scene_id));
    write_scene(&scene_dir, &frames, a.depth_scale)?;
    println!("frames {}", frames.len());
    println!("scene {}", scene_dir.display());

    let manifest_path = a.out.join("run_manifest.json");
    let mut m = Manifest::new("synth", cfg);
    m.seed("frames", cfg.seed).input(&a.mesh).output(&a.out);
    m.write(&manifest_path)?;
    Ok(Outcome::Clean)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Scene directory with ground truth.
    #[arg(long)]
    pub scene: PathBuf,
    /// Result CSV.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory holding `models_info.json` and `obj_XXXXXX.ply`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MESH_SCALE)]
    pub mesh_scale: f64,
    #[arg(long)]
    pub scene_id: Option<u32>,
    /// Per-instance error CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<Outcome> {
    let frames = load_scene(&a.scene).with_context(|| format!("loading scene {}", a.scene.display()))?;
    ensure!(!frames.is_empty(), "scene {} has no frames", a.scene.display());
    let rows = geopose::eval::bop::read_results(&a.results)?;
    let infos = load_models_info(&a.models.join("models_info.json"))?;
    let scene_id = scene_id_of(&a.scene, a.scene_id);

    let mut models = BTreeMap::new();
    let mut mesh_paths = Vec::new();
    for f in &frames {
        for inst in &f.instances {
            if models.contains_key(&inst.obj_id) {
                continue;
            }
            let Some(info) = infos.get(&inst.obj_id) else {
                bail!("{}: no entry for object {}", a.models.join("models_info.json").display(), inst.obj_id);
            };
            let path = a.models.join(format!("{}.ply", object_name(inst.obj_id)));
            let points = load_mesh(&path, a.mesh_scale)?.sample_surface(cfg.model_points, cfg.seed);
            mesh_paths.push(path);
            models.insert(inst.obj_id, EvalModel { info: info.clone(), points });
        }
    }
    let errors = evaluate_scene(scene_id, &frames, &rows, &models)?;
    let width = frames[0].intrinsics.width;

    let mut csv = String::from("scene_id,im_id,inst,obj_id,mssd,mspd,diameter\n");
    let mut per_obj: BTreeMap<u32, Vec<InstanceErrors>> = BTreeMap::new();
    let mut it = errors.iter();
    for f in &frames {
        for (i, inst) in f.instances.iter().enumerate() {
            let e = it.next().expect("one error record per instance");
            let _ = writeln!(csv, "{scene_id},{},{i},{},{},{},{}", f.im_id, inst.obj_id, e.mssd, e.mspd, e.diameter);
            per_obj.entry(inst.obj_id).or_default().push(*e);
        }
    }
    fs::write(&a.out, csv).with_context(|| format!("writing {}", a.out.display()))?;

    println!("{:>8} {:>9} {:>8} {:>8} {:>8}", "obj_id", "instances", "AR_MSSD", "AR_MSPD", "AR");
    for (id, errs) in &per_obj {
        let r = average_recall(errs, width);
        println!("{id:>8} {:>9} {:>8.4} {:>8.4} {:>8.4}", r.instances, r.ar_mssd, r.ar_mspd, r.ar);
    }
    let all = average_recall(&errors, width);
    println!("{:>8} {:>9} {:>8.4} {:>8.4} {:>8.4}", "all", all.instances, all.ar_mssd, all.ar_mspd, all.ar);
    println!("AR_MSSD {:.4}", all.ar_mssd);
    println!("AR_MSPD {:.4}", all.ar_mspd);
    println!("AR_VSD not computed; AR is the mean of AR_MSSD and AR_MSPD");

    let mut m = Manifest::new("eval", cfg);
    m.seed("model_sample", cfg.seed).input(&a.scene).input(&a.results).input(a.models.join("models_info.json"));
    for p in mesh_paths {
        m.input(p);
    }
    m.output(&a.out);
    m.write(&beside(&a.out))?;
    Ok(Outcome::Clean)
}
