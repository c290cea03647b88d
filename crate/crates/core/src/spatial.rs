//! Exact nearest-neighbour queries over a static 3D point set.

use crate::geom::Vec3;

const LEAF: usize = 8;

#[derive(Clone, Debug)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree. Queries return exact nearest neighbours; ties resolve to
/// the lower original index.
#[derive(Clone, Debug)]
pub struct KdTree3 {
    points: Vec<Vec3>,
    index: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree3 {
    pub fn build(points: &[Vec3]) -> Self {
        let mut index: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut index, 0, points.len(), &mut nodes);
        }
        Self { points: points.to_vec(), index, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(original index, distance)` of the closest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.index[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(points: &[Vec3], index: &mut [usize], start: usize, end: usize, nodes: &mut Vec<KdNode>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF {
        nodes.push(KdNode::Leaf { start, end });
        return id;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in &index[start..end] {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    if hi[axis] <= lo[axis] {
        nodes.push(KdNode::Leaf { start, end });
        return id;
    }
    let mid = (start + end) / 2;
    index[start..end]
        .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let value = points[index[mid]][axis];
    nodes.push(KdNode::Leaf { start, end });
    // left holds coordinates <= value, right >= value
    let left = build(points, index, start, mid, nodes);
    let right = build(points, index, mid, end, nodes);
    nodes[id] = KdNode::Split { axis, value, left, right };
    id
}
