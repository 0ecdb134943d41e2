use super::{MeshError, TriangleMesh};
use crate::geometry::Vec3;

const MAX_LEAF_TRIANGLES: usize = 4;
/// Hits closer than this along the ray are ignored.
const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    pub fn point(p: &Vec3) -> Self {
        Self { min: *p, max: *p }
    }

    pub fn grow(self, p: &Vec3) -> Self {
        Self { min: self.min.inf(p), max: self.max.sup(p) }
    }

    pub fn union(self, other: &Aabb) -> Self {
        Self { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.min[k] && self.max[k] >= other.max[k])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn centre(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    fn padded(self) -> Self {
        let pad = self.extent().amax() * 1e-7 + 1e-9;
        Self { min: self.min.add_scalar(-pad), max: self.max.add_scalar(pad) }
    }

    /// Entry distance of the ray into the box if it is hit before `t_max`.
    fn slab(&self, ray: &Ray, t_max: f64) -> Option<f64> {
        let (mut lo, mut hi) = (0.0f64, t_max);
        for k in 0..3 {
            let inv = 1.0 / ray.dir[k];
            let mut t0 = (self.min[k] - ray.origin[k]) * inv;
            let mut t1 = (self.max[k] - ray.origin[k]) * inv;
            if t0.is_nan() || t1.is_nan() {
                // Zero direction component with the origin on a slab face.
                continue;
            }
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            lo = lo.max(t0);
            hi = hi.min(t1);
            if lo > hi {
                return None;
            }
        }
        Some(lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Nearest intersection: ray parameter `t`, triangle index and barycentrics
/// `(u, v)` of the second and third vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle: u32,
    pub u: f64,
    pub v: f64,
}

impl Hit {
    /// Strict total order used to pick among hits: distance, then triangle index.
    fn closer_than(&self, other: &Hit) -> bool {
        self.t < other.t || (self.t == other.t && self.triangle < other.triangle)
    }
}

/// Two-sided Möller–Trumbore test, boundary inclusive.
pub fn intersect_triangle(ray: &Ray, tri: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.dir.cross(&e2);
    let det = e1.dot(&p);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = ray.dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > T_MIN).then_some((t, u, v))
}

pub trait RayCaster: Sync {
    fn cast(&self, ray: &Ray) -> Option<Hit>;
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { bounds: Aabb, first: u32, count: u32 },
    Inner { bounds: Aabb, left: u32, right: u32 },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over a mesh's triangles: median split on the
/// longest centroid axis, at most four triangles per leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Result<Self, MeshError> {
        if mesh.is_empty() {
            return Err(MeshError::Empty);
        }
        let boxes: Vec<Aabb> = (0..mesh.triangles().len())
            .map(|t| {
                let [a, b, c] = mesh.triangle(t);
                Aabb::point(&a).grow(&b).grow(&c).padded()
            })
            .collect();
        let centroids: Vec<Vec3> = boxes.iter().map(Aabb::centre).collect();
        let mut order: Vec<u32> = (0..boxes.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * boxes.len() / MAX_LEAF_TRIANGLES + 1);
        build_node(&mut nodes, &mut order, 0, &boxes, &centroids);
        Ok(Self { nodes, order })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Triangle indices grouped per leaf, in node order.
    pub fn leaves(&self) -> Vec<&[u32]> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { first, count, .. } => Some(&self.order[*first as usize..(*first + *count) as usize]),
                Node::Inner { .. } => None,
            })
            .collect()
    }

    /// Every parent box contains its children.
    pub fn is_nested(&self) -> bool {
        self.nodes.iter().all(|n| match n {
            Node::Inner { bounds, left, right } => {
                bounds.contains(self.nodes[*left as usize].bounds()) && bounds.contains(self.nodes[*right as usize].bounds())
            }
            Node::Leaf { .. } => true,
        })
    }

    pub fn intersect(&self, mesh: &TriangleMesh, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            let limit = best.map_or(f64::INFINITY, |h| h.t);
            if node.bounds().slab(ray, limit).is_none() {
                continue;
            }
            match node {
                Node::Leaf { first, count, .. } => {
                    for &t in &self.order[*first as usize..(*first + *count) as usize] {
                        if let Some((dist, u, v)) = intersect_triangle(ray, &mesh.triangle(t as usize)) {
                            let hit = Hit { t: dist, triangle: t, u, v };
                            if best.is_none_or(|b| hit.closer_than(&b)) {
                                best = Some(hit);
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left as usize].bounds().slab(ray, limit);
                    let dr = self.nodes[*right as usize].bounds().slab(ray, limit);
                    match (dl, dr) {
                        (Some(a), Some(b)) => {
                            // nearer child on top of the stack
                            if a <= b {
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
        best
    }
}

fn build_node(nodes: &mut Vec<Node>, order: &mut [u32], first: u32, boxes: &[Aabb], centroids: &[Vec3]) -> u32 {
    let bounds = order.iter().fold(Aabb::empty(), |b, &t| b.union(&boxes[t as usize]));
    let idx = nodes.len() as u32;
    if order.len() <= MAX_LEAF_TRIANGLES {
        nodes.push(Node::Leaf { bounds, first, count: order.len() as u32 });
        return idx;
    }
    let cbounds = order.iter().fold(Aabb::empty(), |b, &t| b.grow(&centroids[t as usize]));
    let axis = cbounds.extent().imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis]).then(a.cmp(&b))
    });
    nodes.push(Node::Leaf { bounds, first, count: 0 });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(nodes, lo, first, boxes, centroids);
    let right = build_node(nodes, hi, first + mid as u32, boxes, centroids);
    nodes[idx as usize] = Node::Inner { bounds, left, right };
    idx
}

/// A mesh together with its hierarchy.
#[derive(Debug, Clone)]
pub struct MeshScene<'a> {
    pub mesh: &'a TriangleMesh,
    pub bvh: Bvh,
}

impl<'a> MeshScene<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Result<Self, MeshError> {
        Ok(Self { mesh, bvh: Bvh::build(mesh)? })
    }
}

impl RayCaster for MeshScene<'_> {
    fn cast(&self, ray: &Ray) -> Option<Hit> {
        self.bvh.intersect(self.mesh, ray)
    }
}

/// Tests every triangle; reference for the hierarchy.
pub struct BruteForce<'a>(pub &'a TriangleMesh);

impl RayCaster for BruteForce<'_> {
    fn cast(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for t in 0..self.0.triangles().len() {
            if let Some((dist, u, v)) = intersect_triangle(ray, &self.0.triangle(t)) {
                let hit = Hit { t: dist, triangle: t as u32, u, v };
                if best.is_none_or(|b| hit.closer_than(&b)) {
                    best = Some(hit);
                }
            }
        }
        best
    }
}

/// Exact sphere primitive, for checking the camera and rendering path
/// independently of tessellation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub centre: Vec3,
    pub radius: f64,
}

impl RayCaster for Sphere {
    fn cast(&self, ray: &Ray) -> Option<Hit> {
        let oc = ray.origin - self.centre;
        let a = ray.dir.norm_squared();
        let half_b = oc.dot(&ray.dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = half_b * half_b - a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Numerically stable root pair.
        let q = -(half_b + half_b.signum() * sq);
        let (r0, r1) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
        let (near, far) = if r0 < r1 { (r0, r1) } else { (r1, r0) };
        let t = if near > T_MIN { near } else if far > T_MIN { far } else { return None };
        Some(Hit { t, triangle: 0, u: 0.0, v: 0.0 })
    }
}
