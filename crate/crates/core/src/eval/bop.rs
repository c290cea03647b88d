//! BOP-style dataset layout and result files.
//!
//! A scene directory holds `scene_camera.json`, `scene_gt.json`,
//! `scene_gt_info.json`, `depth/{im:06}.png` (16-bit, value × depth_scale =
//! millimeters) and `mask_visib/{im:06}_{inst:06}.png`. Model metadata lives
//! in `models_info.json` with diameters and symmetries in millimeters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use serde_json::{json, Map, Value};

use super::metrics::{mspd, mssd, ContinuousSymmetry, InstanceErrors, SymmetrySet, CONTINUOUS_STEP_DEG};
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, RigidTransform, Vec3};
use crate::raster::{DepthImage, Mask};

const MM: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameInstance {
    pub obj_id: u32,
    /// Camera-from-model, meters.
    pub pose: RigidTransform,
    pub mask: Mask,
    pub visib_fract: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub im_id: u32,
    pub intrinsics: CameraIntrinsics,
    /// Meters.
    pub depth: DepthImage,
    pub instances: Vec<FrameInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInfo {
    /// Meters.
    pub diameter: f64,
    pub symmetries: SymmetrySet,
    pub discrete: Vec<RigidTransform>,
    pub continuous: Vec<ContinuousSymmetry>,
}

fn schema(file: &Path, field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Schema { file: file.to_path_buf(), field: field.into(), msg: msg.into() }
}

fn read_json(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path)?;
    match serde_json::from_str(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(schema(path, "<root>", "expected a JSON object")),
    }
}

fn numbers<const N: usize>(v: Option<&Value>, file: &Path, field: &str) -> Result<[f64; N]> {
    let arr = v.and_then(Value::as_array).ok_or_else(|| schema(file, field, "missing or not an array"))?;
    if arr.len() != N {
        return Err(schema(file, field, format!("expected {N} numbers, found {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x.as_f64().ok_or_else(|| schema(file, field, "non-numeric entry"))?;
    }
    Ok(out)
}

fn number(v: Option<&Value>, file: &Path, field: &str) -> Result<f64> {
    v.and_then(Value::as_f64).ok_or_else(|| schema(file, field, "missing or not a number"))
}

fn parse_id(key: &str, file: &Path) -> Result<u32> {
    key.parse().map_err(|_| schema(file, key, "key is not an integer id"))
}

fn pose_from_bop(r: &[f64; 9], t_mm: &[f64; 3]) -> RigidTransform {
    let mut v = [0.0; 12];
    for row in 0..3 {
        v[row * 4..row * 4 + 3].copy_from_slice(&r[row * 3..row * 3 + 3]);
        v[row * 4 + 3] = t_mm[row] / MM;
    }
    RigidTransform::from_row_major(&v)
}

/// `(R row-major, t in millimeters)`.
pub fn pose_to_bop(t: &RigidTransform) -> ([f64; 9], [f64; 3]) {
    let m = t.to_row_major();
    let mut r = [0.0; 9];
    for row in 0..3 {
        r[row * 3..row * 3 + 3].copy_from_slice(&m[row * 4..row * 4 + 3]);
    }
    (r, [m[3] * MM, m[7] * MM, m[11] * MM])
}

pub fn depth_path(scene: &Path, im_id: u32) -> PathBuf {
    scene.join("depth").join(format!("{im_id:06}.png"))
}

pub fn mask_path(scene: &Path, im_id: u32, inst: usize) -> PathBuf {
    scene.join("mask_visib").join(format!("{im_id:06}_{inst:06}.png"))
}

pub fn write_depth_png(path: &Path, depth: &DepthImage, depth_scale: f64) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(depth.width, depth.height, |x, y| {
        let mm = depth.get(x, y) * MM / depth_scale;
        Luma([mm.round().clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<DepthImage> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    DepthImage::from_vec(w, h, img.pixels().map(|p| p.0[0] as f64 * depth_scale / MM).collect())
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width, mask.height, |x, y| Luma([if mask.get(x, y) { 255 } else { 0 }]));
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_fn(w, h, |x, y| img.get_pixel(x, y).0[0] > 127))
}

/// Writes frames in the scene layout; depth is stored with `depth_scale`
/// millimeters per unit.
pub fn write_scene(dir: &Path, frames: &[Frame], depth_scale: f64) -> Result<()> {
    fs::create_dir_all(dir.join("depth"))?;
    fs::create_dir_all(dir.join("mask_visib"))?;
    let (mut camera, mut gt, mut info) = (Map::new(), Map::new(), Map::new());
    for f in frames {
        let key = f.im_id.to_string();
        camera.insert(key.clone(), json!({ "cam_K": f.intrinsics.matrix(), "depth_scale": depth_scale }));
        let mut gts = Vec::new();
        let mut infos = Vec::new();
        for (i, inst) in f.instances.iter().enumerate() {
            let (r, t) = pose_to_bop(&inst.pose);
            gts.push(json!({ "cam_R_m2c": r, "cam_t_m2c": t, "obj_id": inst.obj_id }));
            infos.push(json!({ "visib_fract": inst.visib_fract, "px_count_visib": inst.mask.count() }));
            write_mask_png(&mask_path(dir, f.im_id, i), &inst.mask)?;
        }
        gt.insert(key.clone(), Value::Array(gts));
        info.insert(key, Value::Array(infos));
        write_depth_png(&depth_path(dir, f.im_id), &f.depth, depth_scale)?;
    }
    fs::write(dir.join("scene_camera.json"), serde_json::to_string_pretty(&Value::Object(camera))?)?;
    fs::write(dir.join("scene_gt.json"), serde_json::to_string_pretty(&Value::Object(gt))?)?;
    fs::write(dir.join("scene_gt_info.json"), serde_json::to_string_pretty(&Value::Object(info))?)?;
    Ok(())
}

/// Loads every frame of a scene directory, sorted by image id.
pub fn load_scene(dir: &Path) -> Result<Vec<Frame>> {
    let cam_file = dir.join("scene_camera.json");
    let gt_file = dir.join("scene_gt.json");
    let info_file = dir.join("scene_gt_info.json");
    let camera = read_json(&cam_file)?;
    let gt = read_json(&gt_file)?;
    let info = if info_file.exists() { Some(read_json(&info_file)?) } else { None };

    let mut frames = Vec::new();
    for (key, cam) in &camera {
        let im_id = parse_id(key, &cam_file)?;
        let kf = numbers::<9>(cam.get("cam_K"), &cam_file, &format!("{key}.cam_K"))?;
        let scale = number(cam.get("depth_scale"), &cam_file, &format!("{key}.depth_scale"))?;
        let depth = read_depth_png(&depth_path(dir, im_id), scale)?;
        let intrinsics = CameraIntrinsics::new(kf[0], kf[4], kf[2], kf[5], depth.width, depth.height)?;
        let insts = gt
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| schema(&gt_file, key.as_str(), "missing instance list for image"))?;
        let mut instances = Vec::new();
        for (i, g) in insts.iter().enumerate() {
            let field = |f: &str| format!("{key}[{i}].{f}");
            let r = numbers::<9>(g.get("cam_R_m2c"), &gt_file, &field("cam_R_m2c"))?;
            let t = numbers::<3>(g.get("cam_t_m2c"), &gt_file, &field("cam_t_m2c"))?;
            let obj_id = number(g.get("obj_id"), &gt_file, &field("obj_id"))? as u32;
            let visib_fract = match &info {
                Some(m) => m
                    .get(key)
                    .and_then(|v| v.get(i))
                    .and_then(|v| v.get("visib_fract"))
                    .and_then(Value::as_f64)
                    .ok_or_else(|| schema(&info_file, field("visib_fract"), "missing or not a number"))?,
                None => 1.0,
            };
            let mask = read_mask_png(&mask_path(dir, im_id, i))?;
            if (mask.width, mask.height) != (depth.width, depth.height) {
                return Err(schema(&mask_path(dir, im_id, i), "size", "mask and depth sizes differ"));
            }
            instances.push(FrameInstance { obj_id, pose: pose_from_bop(&r, &t), mask, visib_fract });
        }
        frames.push(Frame { im_id, intrinsics, depth, instances });
    }
    frames.sort_by_key(|f| f.im_id);
    Ok(frames)
}

pub fn write_models_info(path: &Path, models: &BTreeMap<u32, ModelInfo>) -> Result<()> {
    let mut root = Map::new();
    for (id, m) in models {
        let discrete: Vec<Value> = m
            .discrete
            .iter()
            .map(|t| {
                let (r, tm) = pose_to_bop(t);
                json!([r[0], r[1], r[2], tm[0], r[3], r[4], r[5], tm[1], r[6], r[7], r[8], tm[2], 0.0, 0.0, 0.0, 1.0])
            })
            .collect();
        let continuous: Vec<Value> = m
            .continuous
            .iter()
            .map(|c| json!({ "axis": [c.axis.x, c.axis.y, c.axis.z], "offset": [c.offset.x * MM, c.offset.y * MM, c.offset.z * MM] }))
            .collect();
        let mut entry = Map::new();
        entry.insert("diameter".into(), json!(m.diameter * MM));
        if !discrete.is_empty() {
            entry.insert("symmetries_discrete".into(), Value::Array(discrete));
        }
        if !continuous.is_empty() {
            entry.insert("symmetries_continuous".into(), Value::Array(continuous));
        }
        root.insert(id.to_string(), Value::Object(entry));
    }
    fs::write(path, serde_json::to_string_pretty(&Value::Object(root))?)?;
    Ok(())
}

pub fn load_models_info(path: &Path) -> Result<BTreeMap<u32, ModelInfo>> {
    let root = read_json(path)?;
    let mut out = BTreeMap::new();
    for (key, m) in &root {
        let id = parse_id(key, path)?;
        let diameter = number(m.get("diameter"), path, &format!("{key}.diameter"))? / MM;
        if !(diameter > 0.0) {
            return Err(schema(path, format!("{key}.diameter"), "must be positive"));
        }
        let mut discrete = Vec::new();
        if let Some(list) = m.get("symmetries_discrete") {
            let list =
                list.as_array().ok_or_else(|| schema(path, format!("{key}.symmetries_discrete"), "not an array"))?;
            for (i, s) in list.iter().enumerate() {
                let v = numbers::<16>(Some(s), path, &format!("{key}.symmetries_discrete[{i}]"))?;
                let r = [v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]];
                discrete.push(pose_from_bop(&r, &[v[3], v[7], v[11]]));
            }
        }
        let mut continuous = Vec::new();
        if let Some(list) = m.get("symmetries_continuous") {
            let list =
                list.as_array().ok_or_else(|| schema(path, format!("{key}.symmetries_continuous"), "not an array"))?;
            for (i, s) in list.iter().enumerate() {
                let f = |n: &str| format!("{key}.symmetries_continuous[{i}].{n}");
                let a = numbers::<3>(s.get("axis"), path, &f("axis"))?;
                let o = numbers::<3>(s.get("offset"), path, &f("offset"))?;
                continuous.push(ContinuousSymmetry { axis: Vec3::from(a), offset: Vec3::from(o) / MM });
            }
        }
        let symmetries = SymmetrySet::new(&discrete, &continuous, CONTINUOUS_STEP_DEG);
        out.insert(id, ModelInfo { diameter, symmetries, discrete, continuous });
    }
    Ok(out)
}

/// One row of a BOP result file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResultRow {
    pub scene_id: u32,
    pub im_id: u32,
    pub obj_id: u32,
    pub score: f64,
    /// Camera-from-model, meters.
    pub pose: RigidTransform,
    /// Seconds.
    pub time: f64,
}

pub const RESULT_HEADER: &str = "scene_id,im_id,obj_id,score,R,t,time";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

/// Rows are written sorted by `(scene_id, im_id, obj_id)`.
pub fn format_results(rows: &[ResultRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| (r.scene_id, r.im_id, r.obj_id));
    let mut out = String::from(RESULT_HEADER);
    out.push('\n');
    for r in rows {
        let (rot, t) = pose_to_bop(&r.pose);
        let _ =
            writeln!(out, "{},{},{},{},{},{},{}", r.scene_id, r.im_id, r.obj_id, r.score, join(&rot), join(&t), r.time);
    }
    out
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    fs::write(path, format_results(rows))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("scene_id")) {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: n + 1, msg };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(err(format!("expected 7 columns, found {}", cols.len())));
        }
        let int = |s: &str, what: &str| s.trim().parse::<u32>().map_err(|_| err(format!("bad {what} {s:?}")));
        let float = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|_| err(format!("bad {what} {s:?}")));
        let floats = |s: &str, what: &str, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = s.split_whitespace().map(|x| float(x, what)).collect::<Result<_>>()?;
            if v.len() != n {
                return Err(err(format!("{what} needs {n} values, found {}", v.len())));
            }
            Ok(v)
        };
        let r = floats(cols[4], "R", 9)?;
        let t = floats(cols[5], "t", 3)?;
        rows.push(ResultRow {
            scene_id: int(cols[0], "scene_id")?,
            im_id: int(cols[1], "im_id")?,
            obj_id: int(cols[2], "obj_id")?,
            score: float(cols[3], "score")?,
            pose: pose_from_bop(&r.try_into().unwrap(), &t.try_into().unwrap()),
            time: float(cols[6], "time")?,
        });
    }
    Ok(rows)
}

/// Model data needed to score estimates of one object.
#[derive(Clone, Debug)]
pub struct EvalModel {
    pub info: ModelInfo,
    /// Model-frame surface points, meters.
    pub points: Vec<Vec3>,
}

/// Errors for every ground-truth instance of one scene. Instances of the same
/// object in an image take that object's rows in descending score order;
/// instances left without a row get infinite errors.
pub fn evaluate_scene(
    scene_id: u32,
    frames: &[Frame],
    rows: &[ResultRow],
    models: &BTreeMap<u32, EvalModel>,
) -> Result<Vec<InstanceErrors>> {
    let mut by_key: BTreeMap<(u32, u32), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.scene_id == scene_id) {
        by_key.entry((r.im_id, r.obj_id)).or_default().push(r);
    }
    for list in by_key.values_mut() {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    let mut out = Vec::new();
    for f in frames {
        let mut used: BTreeMap<u32, usize> = BTreeMap::new();
        for inst in &f.instances {
            let model = models
                .get(&inst.obj_id)
                .ok_or_else(|| Error::InvalidInput(format!("no model info for object {}", inst.obj_id)))?;
            let slot = used.entry(inst.obj_id).or_insert(0);
            let est = by_key.get(&(f.im_id, inst.obj_id)).and_then(|l| l.get(*slot));
            *slot += 1;
            let (e_mssd, e_mspd) = match est {
                Some(r) => (
                    mssd(&r.pose, &inst.pose, &model.points, &model.info.symmetries),
                    mspd(&r.pose, &inst.pose, &model.points, &model.info.symmetries, &f.intrinsics),
                ),
                None => (f64::INFINITY, f64::INFINITY),
            };
            out.push(InstanceErrors { mssd: e_mssd, mspd: e_mspd, diameter: model.info.diameter });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose() -> RigidTransform {
        RigidTransform::new(
            *nalgebra::Rotation3::from_euler_angles(0.2, -0.4, 1.3).matrix(),
            Vec3::new(0.012, -0.034, 0.567),
        )
    }

    #[test]
    fn result_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![
            ResultRow { scene_id: 1, im_id: 4, obj_id: 2, score: 0.5, pose: pose(), time: 0.25 },
            ResultRow { scene_id: 1, im_id: 2, obj_id: 2, score: 0.75, pose: RigidTransform::identity(), time: 1.0 },
        ];
        write_results(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(RESULT_HEADER));
        let back = read_results(&path).unwrap();
        assert_eq!(back[0].im_id, 2);
        assert_eq!(back[1].score, 0.5);
        assert!(back[1].pose.rotation_angle_to(&pose()) < 1e-12);
        assert!(back[1].pose.translation_distance_to(&pose()) < 1e-15);
        fs::write(&path, "scene_id,im_id,obj_id,score,R,t,time\n1,2,3,0.5,1 0 0,0 0 0,1\n").unwrap();
        assert!(matches!(read_results(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = CameraIntrinsics::new(57.2, 57.3, 32.5, 24.2, 64, 48).unwrap();
        let depth = DepthImage::from_vec(
            64,
            48,
            (0..64 * 48).map(|i| if i % 3 == 0 { 0.0 } else { 0.5 + i as f64 * 1e-4 }).collect(),
        )
        .unwrap();
        let mask = Mask::from_fn(64, 48, |x, y| x > 10 && y < 30);
        let frame = Frame {
            im_id: 7,
            intrinsics: k,
            depth: depth.clone(),
            instances: vec![FrameInstance { obj_id: 3, pose: pose(), mask: mask.clone(), visib_fract: 0.8 }],
        };
        write_scene(dir.path(), &[frame], 0.1).unwrap();
        let frames = load_scene(dir.path()).unwrap();
        assert_eq!(frames.len(), 1);
        let f = &frames[0];
        assert_eq!(f.im_id, 7);
        assert_eq!(f.intrinsics, k);
        assert_eq!(f.instances[0].mask, mask);
        assert_eq!(f.instances[0].obj_id, 3);
        assert!(f.instances[0].pose.translation_distance_to(&pose()) < 1e-12);
        // 0.1 mm quantisation
        for (a, b) in f.depth.data.iter().zip(&depth.data) {
            assert!((a - b).abs() <= 0.5e-4 + 1e-12);
        }
    }

    #[test]
    fn models_info_round_trip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models_info.json");
        let flip = RigidTransform::new(
            *nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::PI).matrix(),
            Vec3::new(0.0, 0.0, 0.01),
        );
        let mut models = BTreeMap::new();
        let info = |discrete: Vec<RigidTransform>, continuous: Vec<ContinuousSymmetry>| ModelInfo {
            diameter: 0.12,
            symmetries: SymmetrySet::new(&discrete, &continuous, CONTINUOUS_STEP_DEG),
            discrete,
            continuous,
        };
        models.insert(1, info(vec![flip], vec![]));
        models
            .insert(2, info(vec![], vec![ContinuousSymmetry { axis: Vec3::z(), offset: Vec3::new(0.0, 0.0, 0.002) }]));
        write_models_info(&path, &models).unwrap();
        let back = load_models_info(&path).unwrap();
        assert!((back[&1].diameter - 0.12).abs() < 1e-15);
        assert_eq!(back[&1].symmetries.len(), 2);
        assert!(back[&1].discrete[0].translation_distance_to(&flip) < 1e-15);
        assert_eq!(back[&2].symmetries.len(), 60);

        fs::write(&path, r#"{"5": {"diameter": "big"}}"#).unwrap();
        match load_models_info(&path) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "5.diameter"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
