use rayon::prelude::*;

use super::mesh::TriMesh;
use crate::geom::{CameraIntrinsics, RigidTransform, Vec3};
use crate::raster::{DepthImage, Mask};

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self { lo: Vec3::repeat(f64::INFINITY), hi: Vec3::repeat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    /// Entry distance along the ray, if it hits before `t_max`.
    #[inline]
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.lo[a] - origin[a]) * inv_dir[a];
            let mut far = (self.hi[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN from 0 * inf falls through max/min untouched
            t0 = if near > t0 { near } else { t0 };
            t1 = if far < t1 { far } else { t1 };
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, len: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding volume hierarchy over the mesh triangles, built once in the
/// model frame and queried with rays from any camera pose.
#[derive(Clone, Debug)]
pub struct MeshBvh {
    triangles: Vec<[Vec3; 3]>,
    nodes: Vec<Node>,
}

impl MeshBvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut nodes = Vec::new();
        build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        let triangles = order.iter().map(|&i| tris[i]).collect();
        Self { triangles, nodes }
    }

    /// Nearest hit parameter `t` of `origin + t * dir`, `t > 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best = f64::INFINITY;
        let mut stack: Vec<usize> = Vec::with_capacity(64);
        if self.nodes[0].bounds().hit(origin, &inv, best).is_some() {
            stack.push(0);
        }
        while let Some(n) = stack.pop() {
            match &self.nodes[n] {
                Node::Leaf { bounds, start, len } => {
                    if bounds.hit(origin, &inv, best).is_none() {
                        continue;
                    }
                    for tri in &self.triangles[*start..start + len] {
                        if let Some(t) = moller_trumbore(origin, dir, tri) {
                            if t < best {
                                best = t;
                            }
                        }
                    }
                }
                Node::Inner { bounds, left, right } => {
                    if bounds.hit(origin, &inv, best).is_none() {
                        continue;
                    }
                    let l = self.nodes[*left].bounds().hit(origin, &inv, best);
                    let r = self.nodes[*right].bounds().hit(origin, &inv, best);
                    // push the farther child first so the nearer one is visited first
                    match (l, r) {
                        (Some(tl), Some(tr)) => {
                            if tl <= tr {
                                stack.push(*right);
                                stack.push(*left);
                            } else {
                                stack.push(*left);
                                stack.push(*right);
                            }
                        }
                        (Some(_), None) => stack.push(*left),
                        (None, Some(_)) => stack.push(*right),
                        (None, None) => {}
                    }
                }
            }
        }
        best.is_finite().then_some(best)
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &i in &order[start..end] {
        for v in &tris[i] {
            bounds.grow(v);
        }
        cbounds.grow(&centroids[i]);
    }
    let idx = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, len: end - start });
        return idx;
    }
    let extent = cbounds.hi - cbounds.lo;
    let axis = extent.imax();
    if extent[axis] <= 0.0 {
        nodes.push(Node::Leaf { bounds, start, len: end - start });
        return idx;
    }
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
    });
    nodes.push(Node::Leaf { bounds, start, len: 0 });
    let left = build_node(tris, centroids, order, start, mid, nodes);
    let right = build_node(tris, centroids, order, mid, end, nodes);
    nodes[idx] = Node::Inner { bounds, left, right };
    idx
}

#[inline]
fn moller_trumbore(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    const EPS: f64 = 1e-14;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > EPS).then_some(t)
}

/// Depth render of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateRender {
    pub depth: DepthImage,
    pub mask: Mask,
    /// Camera-from-object.
    pub pose: RigidTransform,
}

/// Ray-casts `mesh` under `pose` (camera-from-object). Pixel `(u, v)` samples
/// the ray through integer image coordinates, so lifting a rendered depth
/// with [`crate::geom::backproject`] lands exactly on the surface.
pub fn raycast_depth(mesh: &TriMesh, pose: &RigidTransform, k: &CameraIntrinsics) -> TemplateRender {
    raycast_with_bvh(&MeshBvh::build(mesh), mesh, pose, k)
}

pub fn raycast_with_bvh(bvh: &MeshBvh, mesh: &TriMesh, pose: &RigidTransform, k: &CameraIntrinsics) -> TemplateRender {
    let (w, h) = (k.width, k.height);
    let mut depth = DepthImage::zeros(w, h);
    let mut mask = Mask::new(w, h);

    let Some((x0, y0, x1, y1)) = pixel_window(mesh, pose, k) else {
        return TemplateRender { depth, mask, pose: *pose };
    };

    let model_from_cam = pose.inverse();
    let origin = model_from_cam.translation;
    let rows: Vec<(u32, Vec<(u32, f64)>)> = (y0..=y1)
        .into_par_iter()
        .map(|v| {
            let mut hits = Vec::new();
            for u in x0..=x1 {
                let dir_cam = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let dir = model_from_cam.rotation * dir_cam;
                if let Some(t) = bvh.intersect(&origin, &dir) {
                    hits.push((u, t));
                }
            }
            (v, hits)
        })
        .collect();
    for (v, hits) in rows {
        for (u, z) in hits {
            depth.set(u, v, z);
            mask.set(u, v, true);
        }
    }
    TemplateRender { depth, mask, pose: *pose }
}

/// Inclusive pixel window that can contain hits; `None` when the mesh is
/// entirely behind the camera.
fn pixel_window(mesh: &TriMesh, pose: &RigidTransform, k: &CameraIntrinsics) -> Option<(u32, u32, u32, u32)> {
    let (lo, hi) = mesh.bounds();
    let mut umin = f64::INFINITY;
    let mut umax = f64::NEG_INFINITY;
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    let mut any_front = false;
    let mut any_behind = false;
    for i in 0..8 {
        let corner = Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        );
        let c = pose.transform_point(&corner);
        if c.z > 0.0 {
            any_front = true;
            let u = k.fx * c.x / c.z + k.cx;
            let v = k.fy * c.y / c.z + k.cy;
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        } else {
            any_behind = true;
        }
    }
    if !any_front {
        return None;
    }
    let (w, h) = (k.width as f64, k.height as f64);
    if any_behind {
        return Some((0, 0, k.width - 1, k.height - 1));
    }
    let x0 = umin.floor().max(0.0);
    let y0 = vmin.floor().max(0.0);
    let x1 = umax.ceil().min(w - 1.0);
    let y1 = vmax.ceil().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 100.0, 80.0, 200, 160).unwrap()
    }

    fn square(z: f64) -> TriMesh {
        let v = vec![
            Vec3::new(-0.1003, -0.1003, z),
            Vec3::new(0.1003, -0.1003, z),
            Vec3::new(0.1003, 0.1003, z),
            Vec3::new(-0.1003, 0.1003, z),
        ];
        TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
    }

    #[test]
    fn plane_depth_is_exact() {
        let r = raycast_depth(&square(1.0), &RigidTransform::identity(), &k());
        assert_abs_diff_eq!(r.depth.get(100, 80), 1.0, epsilon = 1e-9);
        // ~0.2 m at 1 m and f=500 covers pixel columns 50..=150
        let bb = r.mask.bounding_box().unwrap();
        assert_eq!(bb.width(), 101);
        for (d, m) in r.depth.data.iter().zip(&r.mask.data) {
            assert_eq!(*d > 0.0, *m);
            if *m {
                assert_abs_diff_eq!(*d, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sphere_min_depth() {
        let sphere = TriMesh::uv_sphere(0.05, 40, 60);
        let pose = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.5));
        let r = raycast_depth(&sphere, &pose, &k());
        let min = r.depth.data.iter().filter(|d| **d > 0.0).fold(f64::INFINITY, |a, b| a.min(*b));
        assert!((min - 0.45).abs() < 0.02 * 0.45, "min depth {min}");
    }

    #[test]
    fn behind_camera_is_empty() {
        let pose = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -3.0));
        let r = raycast_depth(&square(1.0), &pose, &k());
        assert!(r.mask.is_empty());
        assert_eq!(r.depth.valid_count(), 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let blob = TriMesh::asymmetric_blob(0.1, 16, 24);
        let pose = RigidTransform::from_axis_angle(Vec3::new(1.0, 2.0, 0.5), 0.7).compose(&RigidTransform::identity());
        let pose = RigidTransform::new(pose.rotation, Vec3::new(0.01, 0.0, 0.3));
        let a = raycast_depth(&blob, &pose, &k());
        let b = raycast_depth(&blob, &pose, &k());
        assert_eq!(a, b);
        assert!(a.mask.count() > 100);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let blob = TriMesh::asymmetric_blob(0.1, 10, 14);
        let bvh = MeshBvh::build(&blob);
        let origin = Vec3::new(0.0, 0.0, -0.3);
        for i in 0..200 {
            let a = i as f64 * 0.137;
            let dir = Vec3::new(0.12 * a.cos(), 0.12 * a.sin() * (i as f64 / 200.0), 1.0);
            let brute = (0..blob.faces.len())
                .filter_map(|f| moller_trumbore(&origin, &dir, &blob.triangle(f)))
                .fold(f64::INFINITY, f64::min);
            let got = bvh.intersect(&origin, &dir).unwrap_or(f64::INFINITY);
            assert_eq!(got, brute);
        }
    }
}
