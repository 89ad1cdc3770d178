use super::{GeomError, MeshBvh, Pose3, Vec3};

/// Minimum hit distance accepted by ray queries.
pub const RAY_EPS: f64 = 1e-6;

const MIN_TRIANGLE_AREA: f64 = 1e-12;

// Slack on barycentric bounds so rays through shared edges and vertices
// cannot slip between neighbouring triangles.
const BARY_EPS: f64 = 1e-12;

/// Indexed triangle mesh in a local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, GeomError> {
        for (f, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= vertices.len()) {
                return Err(GeomError::InvalidMesh(format!(
                    "triangle {f} references vertex {bad} of {}",
                    vertices.len()
                )));
            }
            let area = triangle_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
            if area <= MIN_TRIANGLE_AREA {
                return Err(GeomError::InvalidMesh(format!("triangle {f} is degenerate (area {area:e})")));
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let t = self.triangles[f];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                triangle_area(&a, &b, &c)
            })
            .sum()
    }

    /// Signed volume by the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Every undirected edge is shared by exactly two triangles, once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        use std::collections::HashMap;
        let mut directed: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn transformed(&self, pose: &Pose3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

pub(crate) fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub object_index: usize,
    pub face_index: usize,
}

impl RayHit {
    /// Nearest first; exact distance ties go to the lowest (object, face).
    pub(crate) fn better_than(&self, other: &RayHit) -> bool {
        match self.distance.total_cmp(&other.distance) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => {
                (self.object_index, self.face_index) < (other.object_index, other.face_index)
            }
        }
    }
}

/// Moller-Trumbore intersection, two-sided. Returns the ray parameter when
/// it exceeds [`RAY_EPS`].
#[inline]
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, v0: &Vec3, e1: &Vec3, e2: &Vec3) -> Option<f64> {
    let p = dir.cross(e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(&p) * inv;
    if !(-BARY_EPS..=1.0 + BARY_EPS).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(&q) * inv;
    if v < -BARY_EPS || u + v > 1.0 + BARY_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > RAY_EPS).then_some(t)
}

/// Nearest intersection of a ray with a set of posed meshes.
///
/// Builds a BVH over the posed triangles; callers issuing many rays against
/// the same meshes should keep a [`MeshBvh`] instead.
pub fn ray_cast(mesh_set: &[(TriMesh, Pose3)], origin: &Vec3, direction: &Vec3) -> Option<RayHit> {
    MeshBvh::build(mesh_set).cast(origin, direction, f64::INFINITY)
}
