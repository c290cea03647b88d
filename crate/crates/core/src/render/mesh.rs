use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Triangle mesh in the model frame (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Mesh("mesh has no faces".into()));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Mesh(format!("face {f:?} references a vertex >= {n}")));
        }
        Ok(Self { vertices, faces })
    }

    /// Loads an ASCII OBJ or PLY file, multiplying coordinates by `scale`.
    pub fn load(path: impl AsRef<Path>, scale: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path)?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let mut mesh = match ext.as_str() {
            "obj" => parse_obj(path, &String::from_utf8_lossy(&text))?,
            "ply" => parse_ply(path, &text)?,
            _ => return Err(Error::Mesh(format!("unsupported mesh extension for {}", path.display()))),
        };
        if scale != 1.0 {
            for v in &mut mesh.vertices {
                *v *= scale;
            }
        }
        Ok(mesh)
    }

    /// Writes an ASCII PLY.
    pub fn save_ply(&self, path: impl AsRef<Path>, scale: f64) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "ply\nformat ascii 1.0");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        let _ = writeln!(s, "property float x\nproperty float y\nproperty float z");
        let _ = writeln!(s, "element face {}", self.faces.len());
        let _ = writeln!(s, "property list uchar int vertex_indices\nend_header");
        for v in &self.vertices {
            let _ = writeln!(s, "{} {} {}", v.x * scale, v.y * scale, v.z * scale);
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bounds_center(&self) -> Vec3 {
        let (lo, hi) = self.bounds();
        (lo + hi) * 0.5
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| triangle_area(&self.triangle(f))).sum()
    }

    /// Area-weighted uniform surface sample.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vec3> {
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += triangle_area(&self.triangle(f));
            cumulative.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r = rng.random::<f64>() * acc;
                let f = cumulative.partition_point(|c| *c <= r).min(self.faces.len() - 1);
                let [a, b, c] = self.triangle(f);
                let s = rng.random::<f64>().sqrt();
                let t = rng.random::<f64>();
                a * (1.0 - s) + b * (s * (1.0 - t)) + c * (s * t)
            })
            .collect()
    }

    /// UV sphere centred at the origin.
    pub fn uv_sphere(radius: f64, stacks: u32, slices: u32) -> Self {
        Self::star_shaped(stacks, slices, |_| radius)
    }

    /// Closed mesh whose surface is `r(dir) * dir` over the unit sphere.
    pub fn star_shaped(stacks: u32, slices: u32, radius: impl Fn(&Vec3) -> f64) -> Self {
        assert!(stacks >= 2 && slices >= 3);
        let mut vertices = vec![Vec3::z() * radius(&Vec3::z())];
        for i in 1..stacks {
            let theta = PI * i as f64 / stacks as f64;
            for j in 0..slices {
                let phi = 2.0 * PI * j as f64 / slices as f64;
                let dir = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                vertices.push(dir * radius(&dir));
            }
        }
        vertices.push(-Vec3::z() * radius(&-Vec3::z()));
        let bottom = vertices.len() as u32 - 1;
        let ring = |i: u32, j: u32| 1 + (i - 1) * slices + (j % slices);
        let mut faces = Vec::new();
        for j in 0..slices {
            faces.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..stacks - 1 {
            for j in 0..slices {
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
                faces.push([a, c, d]);
                faces.push([a, d, b]);
            }
        }
        for j in 0..slices {
            faces.push([bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
        }
        Self { vertices, faces }
    }

    /// Axis-aligned box with the given half extents, centred at the origin.
    pub fn cuboid(half: Vec3) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            vertices.push(Vec3::new(
                if i & 1 == 0 { -half.x } else { half.x },
                if i & 2 == 0 { -half.y } else { half.y },
                if i & 4 == 0 { -half.z } else { half.z },
            ));
        }
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        Self { vertices, faces }
    }

    /// Egg-shaped, bumpy ellipsoid without rotational or mirror symmetry.
    /// `size` is the approximate diameter.
    pub fn asymmetric_blob(size: f64, stacks: u32, slices: u32) -> Self {
        let axes = Vec3::new(0.5, 0.34, 0.26) * size;
        Self::star_shaped(stacks, slices, |d| {
            let ellipsoid = 1.0 / ((d.x / axes.x).powi(2) + (d.y / axes.y).powi(2) + (d.z / axes.z).powi(2)).sqrt();
            let egg = 1.0 + 0.18 * d.x + 0.08 * d.y * d.z;
            let bump = 1.0 + 0.12 * (-(d - Vec3::new(0.3, 0.6, 0.74).normalize()).norm_squared() * 6.0).exp();
            ellipsoid * egg * bump
        })
    }
}

pub fn triangle_area(t: &[Vec3; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

const EXACT_DIAMETER_LIMIT: usize = 5000;

/// Largest pairwise vertex distance.
pub fn mesh_diameter(mesh: &TriMesh) -> f64 {
    point_set_diameter(&mesh.vertices)
}

pub fn point_set_diameter(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    if points.len() <= EXACT_DIAMETER_LIMIT {
        return brute_force_diameter(points, points);
    }
    // Lower bound from a few farthest-point sweeps, then only pairs whose
    // endpoints could beat it need checking; the result stays exact.
    let mut lower: f64 = 0.0;
    let mut start = points[0];
    for _ in 0..4 {
        let (far, dist) =
            points.iter().map(|p| (*p, (p - start).norm())).fold((start, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        lower = lower.max(dist);
        start = far;
    }
    let (lo, hi) = points
        .iter()
        .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let reach = |p: &Vec3| {
        let far = Vec3::new(
            if (p.x - lo.x).abs() > (p.x - hi.x).abs() { lo.x } else { hi.x },
            if (p.y - lo.y).abs() > (p.y - hi.y).abs() { lo.y } else { hi.y },
            if (p.z - lo.z).abs() > (p.z - hi.z).abs() { lo.z } else { hi.z },
        );
        (far - p).norm()
    };
    let candidates: Vec<Vec3> = points.iter().filter(|p| reach(p) >= lower).copied().collect();
    lower.max(brute_force_diameter(&candidates, &candidates))
}

fn brute_force_diameter(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, p) in a.iter().enumerate() {
        for q in &b[i + 1..] {
            best = best.max((p - q).norm_squared());
        }
    }
    best.sqrt()
}

fn parse_obj(path: &Path, text: &str) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(line_no, format!("bad vertex coordinate {t:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(err(line_no, "vertex needs 3 coordinates".into()));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = tok
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let v: i64 = first.parse().map_err(|_| err(line_no, format!("bad face index {t:?}")))?;
                        let resolved = if v < 0 { vertices.len() as i64 + v } else { v - 1 };
                        if resolved < 0 {
                            return Err(err(line_no, format!("face index {v} out of range")));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(err(line_no, format!("face has {} vertices, only triangles are supported", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let text = String::from_utf8_lossy(bytes);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
        list_prop: bool,
    }
    let mut elements: Vec<Element> = Vec::new();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing `ply` header".into())),
    }
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(err(0, "unterminated header".into()));
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(err(n, format!("only ASCII PLY is supported, found {fmt}")));
                }
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(n, format!("bad element count {count:?}")))?,
                props: Vec::new(),
                list_prop: false,
            }),
            ["property", "list", _, _, name] => {
                let el = elements.last_mut().ok_or_else(|| err(n, "property before element".into()))?;
                el.props.push(name.to_string());
                el.list_prop = true;
            }
            ["property", _, name] => {
                let el = elements.last_mut().ok_or_else(|| err(n, "property before element".into()))?;
                el.props.push(name.to_string());
            }
            ["end_header"] => break,
            _ => {}
        }
    }

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let Some((n, line)) = lines.next() else {
                return Err(err(0, format!("unexpected end of file in element {}", el.name)));
            };
            let tok: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    let pos = |axis: &str| -> Result<f64> {
                        let i = el
                            .props
                            .iter()
                            .position(|p| p == axis)
                            .ok_or_else(|| err(n, format!("vertex has no `{axis}` property")))?;
                        tok.get(i)
                            .ok_or_else(|| err(n, "short vertex line".into()))?
                            .parse()
                            .map_err(|_| err(n, format!("bad `{axis}` coordinate")))
                    };
                    vertices.push(Vec3::new(pos("x")?, pos("y")?, pos("z")?));
                }
                "face" => {
                    let k: usize =
                        tok.first().and_then(|t| t.parse().ok()).ok_or_else(|| err(n, "bad face line".into()))?;
                    if k != 3 {
                        return Err(err(n, format!("face has {k} vertices, only triangles are supported")));
                    }
                    let idx: Vec<u32> = tok[1..]
                        .iter()
                        .take(3)
                        .map(|t| t.parse().map_err(|_| err(n, format!("bad face index {t:?}"))))
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(err(n, "short face line".into()));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
    }
    TriMesh::new(vertices, faces)
}
