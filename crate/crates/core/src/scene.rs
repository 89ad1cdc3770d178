//! Ground-truth world: a table plane and posed primitive objects.
//!
//! Scenes are immutable values. [`apply_event`] returns a new scene and
//! leaves the old one untouched, so an episode can keep every version it saw.

use crate::geom::{MeshBvh, Pose3, TriMesh, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

/// Tessellation used for oracle geometry unless a caller asks otherwise.
pub const DEFAULT_RESOLUTION: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown object id {0}")]
    UnknownObject(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    /// Extents along local x, y, z.
    Box { w: f64, d: f64, h: f64 },
    /// Axis along local z, centered on the origin.
    Cylinder { r: f64, h: f64 },
    Sphere { r: f64 },
}

impl Shape {
    fn dims(&self) -> Vec<f64> {
        match *self {
            Shape::Box { w, d, h } => vec![w, d, h],
            Shape::Cylinder { r, h } => vec![r, h],
            Shape::Sphere { r } => vec![r],
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            Shape::Box { w, d, h } => 2.0 * (w * d + w * h + d * h),
            Shape::Cylinder { r, h } => 2.0 * PI * r * (r + h),
            Shape::Sphere { r } => 4.0 * PI * r * r,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Shape::Box { w, d, h } => w * d * h,
            Shape::Cylinder { r, h } => PI * r * r * h,
            Shape::Sphere { r } => 4.0 / 3.0 * PI * r * r * r,
        }
    }

    /// Point containment in the object's local frame.
    pub fn contains_local(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Box { w, d, h } => p.x.abs() < w / 2.0 && p.y.abs() < d / 2.0 && p.z.abs() < h / 2.0,
            Shape::Cylinder { r, h } => p.x * p.x + p.y * p.y < r * r && p.z.abs() < h / 2.0,
            Shape::Sphere { r } => p.norm_squared() < r * r,
        }
    }

    /// Radius of a sphere about the local origin enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Box { w, d, h } => 0.5 * (w * w + d * d + h * h).sqrt(),
            Shape::Cylinder { r, h } => (r * r + h * h / 4.0).sqrt(),
            Shape::Sphere { r } => r,
        }
    }
}

/// Position plus roll-pitch-yaw, as written in scene files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

impl Placement {
    pub fn pose(&self) -> Pose3 {
        Pose3::from_xyz_rpy(self.xyz, self.rpy)
    }

    pub fn translated(&self, delta: [f64; 3]) -> Placement {
        Placement {
            xyz: [self.xyz[0] + delta[0], self.xyz[1] + delta[1], self.xyz[2] + delta[2]],
            rpy: self.rpy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: i32,
    pub shape: Shape,
    #[serde(rename = "pose")]
    pub placement: Placement,
    pub mu: f64,
}

impl SceneObject {
    pub fn pose(&self) -> Pose3 {
        self.placement.pose()
    }

    /// World z of the lowest point of the exact primitive.
    pub fn lowest_point(&self) -> f64 {
        let pose = self.pose();
        let c = pose.translation;
        let r = pose.rotation.matrix();
        match self.shape {
            Shape::Box { w, d, h } => {
                let half = [w / 2.0, d / 2.0, h / 2.0];
                c.z - (0..3).map(|k| r[(2, k)].abs() * half[k]).sum::<f64>()
            }
            Shape::Cylinder { r: rad, h } => {
                let az = r[(2, 2)].clamp(-1.0, 1.0);
                c.z - az.abs() * h / 2.0 - rad * (1.0 - az * az).sqrt()
            }
            Shape::Sphere { r: rad } => c.z - rad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventAction {
    Move,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEvent {
    #[serde(rename = "t")]
    pub time_step: usize,
    pub id: i32,
    pub action: EventAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Placement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub table_height: f64,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub events: Vec<SceneEvent>,
}

impl Scene {
    pub fn empty(table_height: f64) -> Self {
        Self { table_height, objects: Vec::new(), events: Vec::new() }
    }

    pub fn object(&self, id: i32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Checks every scene invariant, including that events only name objects
    /// present when they fire.
    pub fn validate(&self) -> Result<(), SceneError> {
        let inv = |m: String| Err(SceneError::Invariant(m));
        if !self.table_height.is_finite() {
            return inv("table_height must be finite".into());
        }
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return inv(format!("duplicate object id {}", o.id));
            }
            if o.shape.dims().iter().any(|&x| !(x > 1e-4) || !x.is_finite()) {
                return inv(format!("object {} has a dimension <= 1e-4 m", o.id));
            }
            if !(o.mu > 0.0 && o.mu <= 2.0) {
                return inv(format!("object {} friction mu = {} outside (0, 2]", o.id, o.mu));
            }
            if o.placement.xyz.iter().chain(&o.placement.rpy).any(|v| !v.is_finite()) {
                return inv(format!("object {} has a non-finite pose", o.id));
            }
            let low = o.lowest_point();
            if low < self.table_height - 1e-6 {
                return inv(format!("object {} extends below the table (lowest z {low:.6})", o.id));
            }
        }
        let mut events: Vec<&SceneEvent> = self.events.iter().collect();
        events.sort_by_key(|e| e.time_step);
        for e in events {
            if !ids.contains(&e.id) {
                return inv(format!("event at t={} names absent object {}", e.time_step, e.id));
            }
            match e.action {
                EventAction::Remove => {
                    ids.remove(&e.id);
                }
                EventAction::Move if e.pose.is_none() => {
                    return inv(format!("move event at t={} has no pose", e.time_step));
                }
                EventAction::Move => {}
            }
        }
        Ok(())
    }

    /// Events scheduled for exactly `t`, in file order.
    pub fn events_at(&self, t: usize) -> impl Iterator<Item = &SceneEvent> {
        self.events.iter().filter(move |e| e.time_step == t)
    }

    /// Mean of object centers (table origin when empty).
    pub fn centroid(&self) -> Vec3 {
        if self.objects.is_empty() {
            return Vec3::new(0.0, 0.0, self.table_height);
        }
        self.objects.iter().map(|o| Vec3::from(o.placement.xyz)).sum::<Vec3>() / self.objects.len() as f64
    }

    pub fn index_of(&self, id: i32) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }
}

fn parse_error(e: serde_json::Error) -> SceneError {
    SceneError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
}

pub fn load_scene(text: &str) -> Result<Scene, SceneError> {
    let scene: Scene = serde_json::from_str(text).map_err(parse_error)?;
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene) -> String {
    let mut s = serde_json::to_string_pretty(scene).expect("scene serializes");
    s.push('\n');
    s
}

/// Applies one event, returning the new scene. Only the named object changes.
pub fn apply_event(scene: &Scene, event: &SceneEvent) -> Result<Scene, SceneError> {
    let idx = scene.index_of(event.id).ok_or(SceneError::UnknownObject(event.id))?;
    let mut next = scene.clone();
    match event.action {
        EventAction::Remove => {
            next.objects.remove(idx);
        }
        EventAction::Move => {
            let pose = event
                .pose
                .ok_or_else(|| SceneError::Invariant(format!("move event for {} has no pose", event.id)))?;
            next.objects[idx].placement = pose;
        }
    }
    Ok(next)
}

/// Triangle mesh of a primitive in its local frame, counter-clockwise
/// outward winding. `resolution` is the number of segments around a curve.
pub fn tessellate(obj: &SceneObject, resolution: usize) -> TriMesh {
    let n = resolution.max(8);
    let (vertices, triangles) = match obj.shape {
        Shape::Box { w, d, h } => box_mesh(w, d, h),
        Shape::Cylinder { r, h } => cylinder_mesh(r, h, n),
        Shape::Sphere { r } => sphere_mesh(r, n),
    };
    TriMesh::new(vertices, triangles).expect("primitive tessellation is valid")
}

fn box_mesh(w: f64, d: f64, h: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let (x, y, z) = (w / 2.0, d / 2.0, h / 2.0);
    let v = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { -x } else { x },
                if i & 2 == 0 { -y } else { y },
                if i & 4 == 0 { -z } else { z },
            )
        })
        .collect();
    let t = vec![
        [0, 2, 1], [1, 2, 3], // -z
        [4, 5, 6], [5, 7, 6], // +z
        [0, 1, 4], [1, 5, 4], // -y
        [2, 6, 3], [3, 6, 7], // +y
        [0, 4, 2], [2, 4, 6], // -x
        [1, 3, 5], [3, 7, 5], // +x
    ];
    (v, t)
}

fn cylinder_mesh(r: f64, h: f64, n: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut v = Vec::with_capacity(2 * n + 2);
    for k in 0..n {
        let a = 2.0 * PI * k as f64 / n as f64;
        v.push(Vec3::new(r * a.cos(), r * a.sin(), -h / 2.0));
    }
    for k in 0..n {
        let a = 2.0 * PI * k as f64 / n as f64;
        v.push(Vec3::new(r * a.cos(), r * a.sin(), h / 2.0));
    }
    let (bottom, top) = (2 * n, 2 * n + 1);
    v.push(Vec3::new(0.0, 0.0, -h / 2.0));
    v.push(Vec3::new(0.0, 0.0, h / 2.0));
    let mut t = Vec::with_capacity(4 * n);
    for k in 0..n {
        let k1 = (k + 1) % n;
        t.push([bottom, k1, k]);
        t.push([top, n + k, n + k1]);
        t.push([k, k1, n + k1]);
        t.push([k, n + k1, n + k]);
    }
    (v, t)
}

fn sphere_mesh(r: f64, n: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let rings = (n / 2).max(4);
    let mut v = vec![Vec3::new(0.0, 0.0, -r)];
    for i in 1..rings {
        let polar = PI * i as f64 / rings as f64;
        let (s, c) = polar.sin_cos();
        for k in 0..n {
            let a = 2.0 * PI * k as f64 / n as f64;
            v.push(Vec3::new(r * s * a.cos(), r * s * a.sin(), -r * c));
        }
    }
    let north = v.len();
    v.push(Vec3::new(0.0, 0.0, r));
    let ring = |i: usize, k: usize| 1 + (i - 1) * n + (k % n);
    let mut t = Vec::new();
    for k in 0..n {
        t.push([0, ring(1, k + 1), ring(1, k)]);
        t.push([north, ring(rings - 1, k), ring(rings - 1, k + 1)]);
    }
    for i in 1..rings - 1 {
        for k in 0..n {
            t.push([ring(i, k), ring(i, k + 1), ring(i + 1, k + 1)]);
            t.push([ring(i, k), ring(i + 1, k + 1), ring(i + 1, k)]);
        }
    }
    (v, t)
}

/// A scene frozen at one time step with its ray-casting structure.
///
/// This is the privileged handle the analytic quality oracle consults.
#[derive(Debug, Clone)]
pub struct SceneSnapshot {
    pub scene: Arc<Scene>,
    pub time_step: usize,
    bvh: Arc<MeshBvh>,
    // World-frame bounding spheres per object, for quick rejection.
    bounds: Arc<Vec<(Vec3, f64)>>,
}

impl SceneSnapshot {
    pub fn new(scene: Scene, time_step: usize) -> Self {
        Self::with_resolution(scene, time_step, DEFAULT_RESOLUTION)
    }

    pub fn with_resolution(scene: Scene, time_step: usize, resolution: usize) -> Self {
        let meshes: Vec<(TriMesh, Pose3)> = scene
            .objects
            .iter()
            .map(|o| (tessellate(o, resolution), o.pose()))
            .collect();
        let bounds = scene
            .objects
            .iter()
            .map(|o| (Vec3::from(o.placement.xyz), o.shape.bounding_radius()))
            .collect();
        Self {
            bvh: Arc::new(MeshBvh::build(&meshes)),
            bounds: Arc::new(bounds),
            scene: Arc::new(scene),
            time_step,
        }
    }

    pub fn bvh(&self) -> &MeshBvh {
        &self.bvh
    }

    pub fn table_height(&self) -> f64 {
        self.scene.table_height
    }

    /// Index (into `scene.objects`) of an object whose exact primitive
    /// contains `p`.
    pub fn object_containing(&self, p: &Vec3) -> Option<usize> {
        self.scene.objects.iter().enumerate().position(|(i, o)| {
            let (c, r) = self.bounds[i];
            (p - c).norm_squared() < r * r && o.shape.contains_local(&o.pose().inverse().transform_point(p))
        })
    }

    pub fn object_bounds(&self) -> &[(Vec3, f64)] {
        &self.bounds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: i32, shape: Shape, xyz: [f64; 3]) -> SceneObject {
        SceneObject { id, shape, placement: Placement { xyz, rpy: [0.0; 3] }, mu: 0.5 }
    }

    const MINIMAL: &str = r#"{"table_height": 0.0, "objects": [
        {"id": 1, "shape": {"type": "box", "w": 0.05, "d": 0.03, "h": 0.04},
         "pose": {"xyz": [0.0, 0.0, 0.02], "rpy": [0.0, 0.0, 0.3]}, "mu": 0.6}]}"#;

    #[test]
    fn loads_minimal_file() {
        let s = load_scene(MINIMAL).unwrap();
        assert_eq!(s.objects.len(), 1);
        assert!(s.events.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"{"table_height": 0.0, "objects": [
            {"id": 1, "shape": {"type": "sphere", "r": 0.02}, "pose": {"xyz": [0,0,0.02], "rpy": [0,0,0]}, "mu": 0.5},
            {"id": 1, "shape": {"type": "sphere", "r": 0.02}, "pose": {"xyz": [0.1,0,0.02], "rpy": [0,0,0]}, "mu": 0.5}]}"#;
        match load_scene(text) {
            Err(SceneError::Invariant(m)) => assert!(m.contains("duplicate")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_location() {
        match load_scene("{\n  \"table_height\": 0.0,\n  \"objects\": [ oops ]\n}") {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn other_invariants() {
        let mut s = load_scene(MINIMAL).unwrap();
        s.objects[0].mu = 0.0;
        assert!(s.validate().is_err());
        let mut s = load_scene(MINIMAL).unwrap();
        s.objects[0].placement.xyz[2] = 0.0;
        assert!(s.validate().unwrap_err().to_string().contains("below the table"));
        let mut s = load_scene(MINIMAL).unwrap();
        s.objects[0].shape = Shape::Sphere { r: 1e-5 };
        assert!(s.validate().is_err());
        let mut s = load_scene(MINIMAL).unwrap();
        s.events.push(SceneEvent { time_step: 2, id: 9, action: EventAction::Remove, pose: None });
        assert!(s.validate().is_err());
    }

    #[test]
    fn save_load_is_idempotent() {
        let text = include_str!("../fixtures/bench_clutter_12.scene");
        let once = save_scene(&load_scene(text).unwrap());
        let twice = save_scene(&load_scene(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn bundled_clutter_loads_quickly() {
        let text = include_str!("../fixtures/bench_clutter_12.scene");
        let start = std::time::Instant::now();
        let s = load_scene(text).unwrap();
        let elapsed = start.elapsed();
        assert_eq!(s.objects.len(), 12);
        assert!(elapsed.as_millis() < 10, "{elapsed:?}");
    }

    #[test]
    fn box_tessellation_exact() {
        let o = obj(0, Shape::Box { w: 0.1, d: 0.2, h: 0.3 }, [0.0, 0.0, 0.15]);
        let m = tessellate(&o, 8);
        assert_eq!(m.triangles().len(), 12);
        assert!((m.surface_area() - o.shape.surface_area()).abs() < 1e-15);
        assert!((m.signed_volume() - o.shape.volume()).abs() < 1e-15);
        assert!(m.is_watertight());
    }

    #[test]
    fn sphere_area_at_64() {
        let o = obj(0, Shape::Sphere { r: 1.0 }, [0.0, 0.0, 1.0]);
        let m = tessellate(&o, 64);
        let rel = (m.surface_area() - 4.0 * PI).abs() / (4.0 * PI);
        assert!(rel < 0.01, "{rel}");
    }

    #[test]
    fn cylinder_volume_at_32() {
        let o = obj(0, Shape::Cylinder { r: 0.03, h: 0.1 }, [0.0, 0.0, 0.05]);
        let m = tessellate(&o, 32);
        let exact = PI * 0.03 * 0.03 * 0.1;
        assert!((m.signed_volume() - exact).abs() / exact < 0.02);
    }

    #[test]
    fn tessellation_grid_is_valid_and_accurate() {
        let shapes = [
            Shape::Box { w: 0.02, d: 0.05, h: 0.08 },
            Shape::Cylinder { r: 0.02, h: 0.12 },
            Shape::Cylinder { r: 0.05, h: 0.01 },
            Shape::Sphere { r: 0.03 },
            Shape::Sphere { r: 1.0 },
        ];
        for shape in shapes {
            for res in [8, 12, 16, 32, 64] {
                let o = obj(0, shape, [0.0, 0.0, 1.0]);
                let m = tessellate(&o, res);
                assert!(m.is_watertight(), "{shape:?} at {res}");
                assert!(m.signed_volume() > 0.0);
                if res == 32 {
                    let rel = (m.surface_area() - shape.surface_area()).abs() / shape.surface_area();
                    assert!(rel < 0.02, "{shape:?}: area error {rel}");
                }
            }
        }
    }

    #[test]
    fn events_are_persistent() {
        let mut s = Scene::empty(0.0);
        for i in 0..4 {
            s.objects.push(obj(i, Shape::Sphere { r: 0.02 }, [0.1 * i as f64, 0.0, 0.02]));
        }
        let before = s.clone();
        let moved = s.objects[3].placement.translated([0.05, 0.0, 0.0]);
        let ev = SceneEvent { time_step: 0, id: 3, action: EventAction::Move, pose: Some(moved) };
        let next = apply_event(&s, &ev).unwrap();
        assert_eq!(s, before);
        for (a, b) in s.objects.iter().zip(&next.objects) {
            if a.id == 3 {
                assert!((b.placement.xyz[0] - a.placement.xyz[0] - 0.05).abs() < 1e-15);
            } else {
                assert_eq!(a, b);
            }
        }
        let missing = SceneEvent { id: 42, ..ev.clone() };
        assert_eq!(apply_event(&s, &missing), Err(SceneError::UnknownObject(42)));
    }

    #[test]
    fn removing_sole_object_empties() {
        let mut s = Scene::empty(0.0);
        s.objects.push(obj(7, Shape::Sphere { r: 0.02 }, [0.0, 0.0, 0.02]));
        let ev = SceneEvent { time_step: 1, id: 7, action: EventAction::Remove, pose: None };
        assert!(apply_event(&s, &ev).unwrap().objects.is_empty());
    }

    #[test]
    fn event_replay_is_deterministic() {
        let mut base = Scene::empty(0.0);
        base.objects.push(obj(1, Shape::Box { w: 0.04, d: 0.04, h: 0.04 }, [0.0, 0.0, 0.02]));
        base.objects.push(obj(2, Shape::Sphere { r: 0.02 }, [0.1, 0.0, 0.02]));
        let events: Vec<SceneEvent> = (0..5)
            .map(|k| SceneEvent {
                time_step: k,
                id: 1 + (k % 2) as i32,
                action: EventAction::Move,
                pose: Some(Placement { xyz: [0.01 * k as f64, 0.02, 0.03], rpy: [0.0, 0.0, 0.1 * k as f64] }),
            })
            .collect();
        let replay = |s: &Scene| events.iter().fold(s.clone(), |acc, e| apply_event(&acc, e).unwrap());
        assert_eq!(replay(&base), replay(&base));
    }

    #[test]
    fn lowest_point_of_tilted_cylinder() {
        let mut o = obj(0, Shape::Cylinder { r: 0.02, h: 0.1 }, [0.0, 0.0, 0.5]);
        o.placement.rpy = [PI / 2.0, 0.0, 0.0];
        assert!((o.lowest_point() - 0.48).abs() < 1e-12);
        let m = tessellate(&o, 64).transformed(&o.pose());
        let min_z = m.vertices().iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
        assert!((min_z - 0.48).abs() < 1e-9);
    }
}
