//! Pinhole wrist camera: depth and object-id rendering, pixel/point mappings
//! and image rotation about the principal point.
//!
//! Pixel `(i, j)` is row `i`, column `j`; its center sits at image coordinates
//! `(u, v) = (j, i)`. Camera frame: x right, y down, z along the optical axis.
//! Depth is z-depth, not ray length.

use crate::geom::{Pose3, Rotation3, Vec3};
use crate::scene::SceneSnapshot;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Object-id value for pixels that see nothing.
pub const BACKGROUND_ID: i32 = -1;
/// Object-id value for pixels that see the table.
pub const TABLE_ID: i32 = -2;
/// Radius (m) of the rendered table disc around the world origin.
pub const TABLE_RADIUS: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("pixel ({0}, {1}) has no depth")]
    MissPixel(usize, usize),
    #[error("pixel ({0}, {1}) is outside the image")]
    OutOfBounds(usize, usize),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { fx: 120.0, fy: 120.0, cx: 64.0, cy: 64.0, width: 128, height: 128 }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |m: &str| Err(CameraError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("principal point must lie inside the image");
        }
        Ok(())
    }

    /// Unit-z direction (not normalized) through the center of pixel (i, j).
    pub fn pixel_ray(&self, i: usize, j: usize) -> Vec3 {
        Vec3::new((j as f64 - self.cx) / self.fx, (i as f64 - self.cy) / self.fy, 1.0)
    }
}

/// Row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.width + j] = v;
    }

    pub fn in_bounds(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.height && (j as usize) < self.width
    }
}

/// One observation z_t.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub cam_pose: Pose3,
    pub intrinsics: Intrinsics,
    /// z-depth in meters, 0 where the ray hits nothing.
    pub depth: Grid<f64>,
    pub object_id: Grid<i32>,
    pub time_step: usize,
}

/// Result of projecting a world point into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Continuous row/column coordinates and camera-frame z.
    Visible { i: f64, j: f64, z: f64 },
    BehindCamera,
}

impl Projection {
    /// Nearest pixel, if inside `intr`'s image bounds.
    pub fn pixel(&self, intr: &Intrinsics) -> Option<(usize, usize)> {
        match *self {
            Projection::Visible { i, j, .. } => {
                let (ri, rj) = (i.round(), j.round());
                (ri >= 0.0 && rj >= 0.0 && (ri as usize) < intr.height && (rj as usize) < intr.width)
                    .then_some((ri as usize, rj as usize))
            }
            Projection::BehindCamera => None,
        }
    }
}

/// Renders depth and object ids by casting one ray per pixel center.
pub fn render(snapshot: &SceneSnapshot, cam_pose: &Pose3, intr: &Intrinsics) -> Observation {
    let (w, h) = (intr.width, intr.height);
    let table_z = snapshot.table_height();
    let origin = cam_pose.translation;
    let rows: Vec<(Vec<f64>, Vec<i32>)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut depth = vec![0.0; w];
            let mut ids = vec![BACKGROUND_ID; w];
            for j in 0..w {
                let ray_cam = intr.pixel_ray(i, j);
                let len = ray_cam.norm();
                let dir = cam_pose.transform_vector(&(ray_cam / len));
                let object = snapshot.bvh().cast(&origin, &dir, f64::INFINITY);
                let table = table_hit(&origin, &dir, table_z);
                let (t, id) = match (object, table) {
                    (Some(o), Some(tt)) if tt < o.distance => (tt, TABLE_ID),
                    (Some(o), _) => (o.distance, snapshot.scene.objects[o.object_index].id),
                    (None, Some(tt)) => (tt, TABLE_ID),
                    (None, None) => continue,
                };
                // z-depth: the ray parameter along the unit direction times its z component.
                depth[j] = t / len;
                ids[j] = id;
            }
            (depth, ids)
        })
        .collect();
    let mut depth = Grid::filled(w, h, 0.0);
    let mut object_id = Grid::filled(w, h, BACKGROUND_ID);
    for (i, (d, o)) in rows.into_iter().enumerate() {
        depth.data[i * w..(i + 1) * w].copy_from_slice(&d);
        object_id.data[i * w..(i + 1) * w].copy_from_slice(&o);
    }
    Observation { cam_pose: *cam_pose, intrinsics: *intr, depth, object_id, time_step: snapshot.time_step }
}

fn table_hit(origin: &Vec3, dir: &Vec3, table_z: f64) -> Option<f64> {
    if dir.z.abs() < 1e-15 {
        return None;
    }
    let t = (table_z - origin.z) / dir.z;
    if t <= 1e-6 {
        return None;
    }
    let p = origin + dir * t;
    (p.x * p.x + p.y * p.y <= TABLE_RADIUS * TABLE_RADIUS).then_some(t)
}

/// Adds i.i.d. Gaussian noise to every hit pixel, clamping at a small positive depth.
pub fn add_depth_noise<R: Rng + ?Sized>(obs: &mut Observation, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite");
    for d in obs.depth.data.iter_mut().filter(|d| **d > 0.0) {
        *d = (*d + normal.sample(rng)).max(1e-4);
    }
}

/// World point seen at pixel (i, j).
pub fn back_project(obs: &Observation, pixel: (usize, usize)) -> Result<Vec3, CameraError> {
    let (i, j) = pixel;
    if i >= obs.intrinsics.height || j >= obs.intrinsics.width {
        return Err(CameraError::OutOfBounds(i, j));
    }
    let z = *obs.depth.get(i, j);
    if z <= 0.0 {
        return Err(CameraError::MissPixel(i, j));
    }
    Ok(obs.cam_pose.transform_point(&(obs.intrinsics.pixel_ray(i, j) * z)))
}

pub fn project_point(cam_pose: &Pose3, intr: &Intrinsics, point_world: &Vec3) -> Projection {
    let p = cam_pose.inverse().transform_point(point_world);
    if p.z <= 1e-6 {
        return Projection::BehindCamera;
    }
    Projection::Visible { i: intr.fy * p.y / p.z + intr.cy, j: intr.fx * p.x / p.z + intr.cx, z: p.z }
}

pub fn project(obs: &Observation, point_world: &Vec3) -> Projection {
    project_point(&obs.cam_pose, &obs.intrinsics, point_world)
}

/// Marker for rotated pixels whose source falls outside the image.
pub const INVALID_PIXEL: u32 = u32::MAX;

/// The source image resampled so that it appears rotated by `-alpha` about the
/// principal point.
#[derive(Debug, Clone)]
pub struct RotatedView<'a> {
    pub source: &'a Observation,
    pub alpha: f64,
    pub depth_rot: Grid<f64>,
    /// Flat source index `i * width + j`, or [`INVALID_PIXEL`].
    pub pixel_map: Grid<u32>,
}

impl RotatedView<'_> {
    pub fn source_pixel(&self, i: usize, j: usize) -> Option<(usize, usize)> {
        let k = *self.pixel_map.get(i, j);
        (k != INVALID_PIXEL).then(|| ((k as usize) / self.source.intrinsics.width, (k as usize) % self.source.intrinsics.width))
    }
}

/// Source coordinates `(row, col)` of rotated pixel (i, j): its offset from the
/// principal point rotated by `+alpha`.
pub fn rotated_source_coords(intr: &Intrinsics, alpha: f64, i: usize, j: usize) -> (f64, f64) {
    let (s, c) = alpha.sin_cos();
    let du = j as f64 - intr.cx;
    let dv = i as f64 - intr.cy;
    (s * du + c * dv + intr.cy, c * du - s * dv + intr.cx)
}

/// Nearest-neighbour image rotation. Every valid rotated depth is copied
/// verbatim from the source.
pub fn rotate_view(obs: &Observation, alpha: f64) -> RotatedView<'_> {
    let intr = &obs.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let mut depth_rot = Grid::filled(w, h, 0.0);
    let mut pixel_map = Grid::filled(w, h, INVALID_PIXEL);
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = rotated_source_coords(intr, alpha, i, j);
            let (ri, rj) = (si.round() as i64, sj.round() as i64);
            if obs.depth.in_bounds(ri, rj) {
                let k = ri as usize * w + rj as usize;
                pixel_map.set(i, j, k as u32);
                depth_rot.set(i, j, obs.depth.data[k]);
            }
        }
    }
    RotatedView { source: obs, alpha, depth_rot, pixel_map }
}

/// Camera pose at `eye` looking straight down at the table, image x along world x.
pub fn look_down_pose(eye: Vec3) -> Pose3 {
    Pose3::new(look_down_rotation(), eye)
}

/// Camera axes: x = world x, y = world -y, z = world -z.
pub fn look_down_rotation() -> Rotation3 {
    Rotation3::rot_x(std::f64::consts::PI)
}

/// 16-bit binary PGM with depth in millimetres.
pub fn write_depth_pgm<W: Write>(mut out: W, depth: &Grid<f64>) -> std::io::Result<()> {
    let values: Vec<u16> = depth.data.iter().map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16).collect();
    write_pgm16(&mut out, depth.width, depth.height, &values)
}

/// 16-bit binary PGM with `object_id + 2` (table 0, background 1, objects id + 2).
pub fn write_id_pgm<W: Write>(mut out: W, ids: &Grid<i32>) -> std::io::Result<()> {
    let values: Vec<u16> = ids.data.iter().map(|&k| (k + 2).clamp(0, 65535) as u16).collect();
    write_pgm16(&mut out, ids.width, ids.height, &values)
}

fn write_pgm16<W: Write>(out: &mut W, w: usize, h: usize, values: &[u16]) -> std::io::Result<()> {
    write!(out, "P5\n{w} {h}\n65535\n")?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    out.write_all(&bytes)
}

/// 8-bit binary PGM.
pub fn write_pgm8<W: Write>(mut out: W, w: usize, h: usize, values: &[u8]) -> std::io::Result<()> {
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(values)
}
