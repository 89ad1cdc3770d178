use super::mesh::ray_triangle;
use super::{Pose3, RayHit, TriMesh, Vec3};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    fn centroid(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Slab test; entry distance if the ray meets the box before `t_max`.
    #[inline]
    fn ray_entry(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            if inv_dir[k].is_infinite() {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// A world-space triangle with its source indices.
#[derive(Debug, Clone, Copy)]
pub struct TriangleRef {
    pub v0: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
    /// Unit outward normal (counter-clockwise winding).
    pub normal: Vec3,
    pub object_index: usize,
    pub face_index: usize,
}

impl TriangleRef {
    pub fn vertices(&self) -> [Vec3; 3] {
        [self.v0, self.v0 + self.e1, self.v0 + self.e2]
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    // Leaf: [start, start + count) into `order`. Inner: children at `start`, `start + 1`.
    start: usize,
    count: usize,
}

/// Bounding volume hierarchy over the triangles of posed meshes.
#[derive(Debug, Clone)]
pub struct MeshBvh {
    triangles: Vec<TriangleRef>,
    nodes: Vec<Node>,
}

impl MeshBvh {
    pub fn build(mesh_set: &[(TriMesh, Pose3)]) -> Self {
        let mut triangles = Vec::new();
        for (oi, (mesh, pose)) in mesh_set.iter().enumerate() {
            for f in 0..mesh.triangles().len() {
                let [a, b, c] = mesh.triangle(f).map(|v| pose.transform_point(&v));
                let e1 = b - a;
                let e2 = c - a;
                triangles.push(TriangleRef {
                    v0: a,
                    e1,
                    e2,
                    normal: e1.cross(&e2).normalize(),
                    object_index: oi,
                    face_index: f,
                });
            }
        }
        let bounds: Vec<Aabb> = triangles.iter().map(|t| Aabb::from_points(&t.vertices())).collect();
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let mut nodes = vec![Node { bounds: Aabb::empty(), start: 0, count: 0 }];
        if !triangles.is_empty() {
            Self::split(&mut nodes, 0, &mut order, 0, &bounds);
        }
        let triangles = order.iter().map(|&i| triangles[i]).collect();
        Self { triangles, nodes }
    }

    fn split(nodes: &mut Vec<Node>, node: usize, order: &mut [usize], offset: usize, bounds: &[Aabb]) {
        let bb = order.iter().fold(Aabb::empty(), |acc, &i| acc.union(&bounds[i]));
        nodes[node].bounds = bb;
        if order.len() <= LEAF_SIZE {
            nodes[node].start = offset;
            nodes[node].count = order.len();
            return;
        }
        let cb = order.iter().fold(Aabb::empty(), |mut acc, &i| {
            acc.grow(&bounds[i].centroid());
            acc
        });
        let extent = cb.max - cb.min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        order.sort_by(|&a, &b| {
            bounds[a].centroid()[axis]
                .total_cmp(&bounds[b].centroid()[axis])
                .then(a.cmp(&b))
        });
        let mid = order.len() / 2;
        let left = nodes.len();
        nodes.push(Node { bounds: Aabb::empty(), start: 0, count: 0 });
        nodes.push(Node { bounds: Aabb::empty(), start: 0, count: 0 });
        nodes[node].start = left;
        nodes[node].count = 0;
        let (lo, hi) = order.split_at_mut(mid);
        Self::split(nodes, left, lo, offset, bounds);
        Self::split(nodes, left + 1, hi, offset + mid, bounds);
    }

    pub fn triangles(&self) -> &[TriangleRef] {
        &self.triangles
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    /// Nearest hit with distance in (RAY_EPS, t_max]. Ties resolved by lowest
    /// (object, face).
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<RayHit> {
        self.cast_ref(origin, dir, t_max).map(|(h, _)| h)
    }

    /// As [`cast`](Self::cast), also returning the hit triangle.
    pub fn cast_ref(&self, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<(RayHit, &TriangleRef)> {
        if self.triangles.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<(RayHit, usize)> = None;
        let mut limit = t_max;
        let mut stack = [0usize; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp]];
            if node.bounds.ray_entry(origin, &inv, limit).is_none() {
                continue;
            }
            if node.count > 0 {
                for k in node.start..node.start + node.count {
                    let tri = &self.triangles[k];
                    if let Some(t) = ray_triangle(origin, dir, &tri.v0, &tri.e1, &tri.e2) {
                        if t > limit {
                            continue;
                        }
                        let hit = RayHit { distance: t, object_index: tri.object_index, face_index: tri.face_index };
                        if best.as_ref().map_or(true, |(b, _)| hit.better_than(b)) {
                            best = Some((hit, k));
                            limit = t;
                        }
                    }
                }
            } else {
                stack[sp] = node.start;
                stack[sp + 1] = node.start + 1;
                sp += 2;
            }
        }
        best.map(|(h, k)| (h, &self.triangles[k]))
    }

    /// Calls `f` for each triangle whose bounds overlap `query`; stops early
    /// when `f` returns true, and reports whether it did.
    pub fn any_in_aabb(&self, query: &Aabb, mut f: impl FnMut(&TriangleRef) -> bool) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut stack = [0usize; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp]];
            if !node.bounds.overlaps(query) {
                continue;
            }
            if node.count > 0 {
                for tri in &self.triangles[node.start..node.start + node.count] {
                    let tb = Aabb::from_points(&tri.vertices());
                    if tb.overlaps(query) && f(tri) {
                        return true;
                    }
                }
            } else {
                stack[sp] = node.start;
                stack[sp + 1] = node.start + 1;
                sp += 2;
            }
        }
        false
    }
}
