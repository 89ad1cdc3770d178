//! Analytic directional grasp quality.
//!
//! Computes, from scene ground truth, the same six per-pixel channels a
//! learned directional quality network would predict: three force-closure
//! levels, an object mask and one collision-free mask per opening width.
//!
//! Gripper frame: z is the approach axis, x the closing axis. The grasp pose
//! origin sits between the fingertips; fingers span `z in [-length, 0]`
//! and the palm sits directly behind them.

use crate::camera::{back_project, project, rotate_view, Grid, Observation};
use crate::geom::{euler_zxy_compose, Aabb, EulerZXY, Pose3, Rotation3, TriangleRef, Vec3};
use crate::scene::SceneSnapshot;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Friction coefficients graded as quality levels 3, 2, 1.
pub const LEVEL_FRICTION: [f64; 3] = [0.2, 0.4, 0.8];

/// Finger-pad samples per side of the contact grid.
pub const PAD_SAMPLES: usize = 5;

/// Samples whose first hit lies within this distance (m) of the nearest one
/// belong to the same contact patch.
const CONTACT_PATCH_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("observation is from step {observation} but the scene snapshot is from step {snapshot}")]
    FrameMismatch { observation: usize, snapshot: usize },
    #[error("invalid gripper: {0}")]
    InvalidGripper(String),
}

/// Box extents along the gripper x, y, z axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperModel {
    /// Opening widths of the two bins (m), narrow first.
    pub width_bins: [f64; 2],
    /// Finger thickness (x), depth (y) and length (z).
    pub finger: BoxDims,
    pub palm: BoxDims,
    /// Maximum closing travel of each finger (m).
    pub finger_stroke: f64,
    /// Allowed grasp depth `[d_min, d_max]` along the approach axis (m).
    pub depth_range: [f64; 2],
}

impl Default for GripperModel {
    fn default() -> Self {
        Self {
            width_bins: [0.04, 0.08],
            finger: BoxDims { x: 0.008, y: 0.02, z: 0.045 },
            palm: BoxDims { x: 0.1, y: 0.04, z: 0.02 },
            finger_stroke: 0.04,
            depth_range: [0.005, 0.035],
        }
    }
}

impl GripperModel {
    pub fn validate(&self) -> Result<(), QualityError> {
        let bad = |m: &str| Err(QualityError::InvalidGripper(m.to_string()));
        if !(self.width_bins[0] > 0.0 && self.width_bins[0] < self.width_bins[1]) {
            return bad("width bins must be positive and strictly increasing");
        }
        let dims = [self.finger.x, self.finger.y, self.finger.z, self.palm.x, self.palm.y, self.palm.z, self.finger_stroke];
        if dims.iter().any(|&v| !(v > 0.0)) {
            return bad("all gripper dimensions must be positive");
        }
        if !(self.depth_range[0] < self.depth_range[1]) {
            return bad("d_min must be below d_max");
        }
        Ok(())
    }

    pub fn clamp_depth(&self, d: f64) -> f64 {
        d.clamp(self.depth_range[0], self.depth_range[1])
    }
}

/// A grasp hypothesis: the filter's state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspConfig {
    /// Point on the observed surface (world).
    pub p: Vec3,
    /// Gripper orientation in the world; column 2 is the approach axis.
    pub r: Rotation3,
    /// Depth along the approach axis from `p` to the grasp pose.
    pub d: f64,
    pub w_bin: usize,
}

/// Grasp pose G: `(r, p)` advanced by `d` along the approach axis.
pub fn grasp_pose(g: &GraspConfig) -> Pose3 {
    let base = Pose3::new(g.r, g.p);
    base.compose(&Pose3::from_translation(Vec3::new(0.0, 0.0, g.d)))
}

/// World rotation of a grasp whose camera-frame rotation has zxy-Euler angles `e`.
pub fn grasp_rotation(cam_rotation: &Rotation3, e: &EulerZXY) -> Rotation3 {
    *cam_rotation * euler_zxy_compose(e)
}

/// Oriented box in world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Vec3,
    pub axes: Rotation3,
    pub half: Vec3,
}

impl Obb {
    fn in_frame(frame: &Pose3, min: Vec3, max: Vec3) -> Self {
        Obb {
            center: frame.transform_point(&((min + max) * 0.5)),
            axes: frame.rotation,
            half: (max - min) * 0.5,
        }
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let m = self.axes.matrix();
        std::array::from_fn(|k| {
            let s = Vec3::new(
                if k & 1 == 0 { -self.half.x } else { self.half.x },
                if k & 2 == 0 { -self.half.y } else { self.half.y },
                if k & 4 == 0 { -self.half.z } else { self.half.z },
            );
            self.center + m * s
        })
    }

    pub fn aabb(&self) -> Aabb {
        let m = self.axes.matrix();
        let ext = Vec3::from_fn(|r, _| (0..3).map(|c| m[(r, c)].abs() * self.half[c]).sum());
        Aabb { min: self.center - ext, max: self.center + ext }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let local = self.axes.inverse().rotate(&(p - self.center));
        (0..3).all(|k| local[k].abs() <= self.half[k])
    }
}

/// Left finger, right finger and palm at opening `width`.
pub fn gripper_boxes(gripper: &GripperModel, g_pose: &Pose3, width: f64) -> [Obb; 3] {
    let f = &gripper.finger;
    let (hw, fy) = (width / 2.0, f.y / 2.0);
    let left = Obb::in_frame(g_pose, Vec3::new(-hw - f.x, -fy, -f.z), Vec3::new(-hw, fy, 0.0));
    let right = Obb::in_frame(g_pose, Vec3::new(hw, -fy, -f.z), Vec3::new(hw + f.x, fy, 0.0));
    palm_and(gripper, g_pose, [left, right])
}

fn palm_and(gripper: &GripperModel, g_pose: &Pose3, fingers: [Obb; 2]) -> [Obb; 3] {
    let p = &gripper.palm;
    let top = -gripper.finger.z;
    let palm = Obb::in_frame(g_pose, Vec3::new(-p.x / 2.0, -p.y / 2.0, top - p.z), Vec3::new(p.x / 2.0, p.y / 2.0, top));
    [fingers[0], fingers[1], palm]
}

/// Separating-axis test between an oriented box and a triangle.
pub fn obb_triangle_overlap(obb: &Obb, tri: &[Vec3; 3]) -> bool {
    let inv = obb.axes.inverse();
    let v = tri.map(|p| inv.rotate(&(p - obb.center)));
    let h = obb.half;
    let edges = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    // Box face normals.
    for k in 0..3 {
        let lo = v[0][k].min(v[1][k]).min(v[2][k]);
        let hi = v[0][k].max(v[1][k]).max(v[2][k]);
        if lo > h[k] || hi < -h[k] {
            return false;
        }
    }
    // Triangle normal.
    let n = edges[0].cross(&edges[1]);
    let d = n.dot(&v[0]);
    let r = h.x * n.x.abs() + h.y * n.y.abs() + h.z * n.z.abs();
    if d.abs() > r {
        return false;
    }
    // Edge cross products.
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    for e in &edges {
        for b in &basis {
            let a = b.cross(e);
            if a.norm_squared() < 1e-24 {
                continue;
            }
            let p = [a.dot(&v[0]), a.dot(&v[1]), a.dot(&v[2])];
            let r = h.x * a.x.abs() + h.y * a.y.abs() + h.z * a.z.abs();
            let lo = p[0].min(p[1]).min(p[2]);
            let hi = p[0].max(p[1]).max(p[2]);
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    true
}

fn obb_below_table(obb: &Obb, table_z: f64) -> bool {
    obb.corners().iter().any(|c| c.z < table_z)
}

fn obb_hits_objects(snapshot: &SceneSnapshot, obb: &Obb) -> bool {
    let bounds = obb.aabb();
    let tri_hit = snapshot.bvh().any_in_aabb(&bounds, |t: &TriangleRef| obb_triangle_overlap(obb, &t.vertices()));
    // A box buried entirely inside an object touches no triangle.
    tri_hit || snapshot.object_containing(&obb.center).is_some()
}

/// True iff the gripper at opening `width_bins[w_bin]` touches neither the
/// table half-space nor any object.
pub fn collision_free(snapshot: &SceneSnapshot, gripper: &GripperModel, g_pose: &Pose3, w_bin: usize) -> bool {
    let boxes = gripper_boxes(gripper, g_pose, gripper.width_bins[w_bin]);
    let table = snapshot.table_height();
    !boxes.iter().any(|b| obb_below_table(b, table)) && !boxes.iter().any(|b| obb_hits_objects(snapshot, b))
}

/// One finger's contact patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub point: Vec3,
    /// Outward surface normal.
    pub normal: Vec3,
    pub object_index: usize,
    /// Finger travel from the open position to first touch.
    pub travel: f64,
}

/// First contacts of the left and right finger when closing from the
/// opening of `w_bin`. `None` when either finger meets nothing within its
/// stroke.
pub fn finger_contacts(snapshot: &SceneSnapshot, gripper: &GripperModel, g_pose: &Pose3, w_bin: usize) -> Option<[Contact; 2]> {
    let width = gripper.width_bins[w_bin];
    let travel = gripper.finger_stroke.min(width / 2.0);
    let left = finger_contact(snapshot, gripper, g_pose, width, -1.0, travel)?;
    let right = finger_contact(snapshot, gripper, g_pose, width, 1.0, travel)?;
    Some([left, right])
}

fn finger_contact(
    snapshot: &SceneSnapshot,
    gripper: &GripperModel,
    g_pose: &Pose3,
    width: f64,
    side: f64,
    travel: f64,
) -> Option<Contact> {
    let f = &gripper.finger;
    let dir = g_pose.transform_vector(&Vec3::new(-side, 0.0, 0.0));
    let n = PAD_SAMPLES;
    let mut hits: Vec<(f64, Vec3, Vec3, usize)> = Vec::with_capacity(n * n);
    for a in 0..n {
        // Rows from palm side to fingertip, inset by half a cell.
        let z = -f.z + f.z * (a as f64 + 0.5) / n as f64;
        for b in 0..n {
            let y = f.y * ((b as f64 + 0.5) / n as f64 - 0.5);
            let origin = g_pose.transform_point(&Vec3::new(side * width / 2.0, y, z));
            if let Some((hit, tri)) = snapshot.bvh().cast_ref(&origin, &dir, travel) {
                hits.push((hit.distance, origin + dir * hit.distance, tri.normal, hit.object_index));
            }
        }
    }
    let nearest = hits.iter().min_by(|a, b| a.0.total_cmp(&b.0))?;
    let (d0, obj) = (nearest.0, nearest.3);
    let patch: Vec<_> = hits.iter().filter(|h| h.3 == obj && h.0 <= d0 + CONTACT_PATCH_TOL).collect();
    let k = patch.len() as f64;
    let point = patch.iter().map(|h| h.1).sum::<Vec3>() / k;
    let normal = patch.iter().map(|h| h.2).sum::<Vec3>();
    let norm = normal.norm();
    if norm < 1e-12 {
        return None;
    }
    Some(Contact { point, normal: normal / norm, object_index: obj, travel: d0 })
}

/// Angles between each finger's push direction along the contact line and
/// the inward surface normal at its contact.
pub fn antipodal_angles(contacts: &[Contact; 2]) -> Option<[f64; 2]> {
    let line = contacts[1].point - contacts[0].point;
    let len = line.norm();
    if len < 1e-9 {
        return None;
    }
    let u = line / len;
    let angle = |a: &Vec3, b: &Vec3| a.dot(b).clamp(-1.0, 1.0).acos();
    Some([angle(&u, &(-contacts[0].normal)), angle(&(-u), &(-contacts[1].normal))])
}

/// Level implied by the worst contact angle under the object's friction.
pub fn level_from_angles(angles: [f64; 2], object_mu: f64) -> u8 {
    let worst = angles[0].max(angles[1]);
    LEVEL_FRICTION.iter().filter(|&&mu| worst <= mu.min(object_mu).atan()).count() as u8
}

/// Force-closure quality level in {0, 1, 2, 3}; 3 means closure under the
/// strictest friction coefficient.
pub fn force_closure_level(snapshot: &SceneSnapshot, gripper: &GripperModel, g_pose: &Pose3, w_bin: usize) -> u8 {
    let Some(contacts) = finger_contacts(snapshot, gripper, g_pose, w_bin) else {
        return 0;
    };
    if contacts[0].object_index != contacts[1].object_index {
        return 0;
    }
    let separation = (contacts[1].point - contacts[0].point).norm();
    if separation > gripper.width_bins[w_bin] {
        return 0;
    }
    let Some(angles) = antipodal_angles(&contacts) else {
        return 0;
    };
    level_from_angles(angles, snapshot.scene.objects[contacts[0].object_index].mu)
}

/// Joint success probability from the chained conditionals
/// p(v | m_c, m_o) p(m_c | m_o) p(m_o).
pub fn success_probability(q_v: f64, q_mc: f64, q_mo: f64) -> f64 {
    q_v * q_mc * q_mo
}

/// Collision and level channels of one grasp pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspChannels {
    pub collision_free: [bool; 2],
    /// Level at the narrowest collision-free bin; 0 if neither bin is free.
    pub level: u8,
    pub level_bin: Option<usize>,
}

impl GraspChannels {
    pub fn q_levels(&self) -> [f64; 3] {
        std::array::from_fn(|k| if self.level as usize > k { 1.0 } else { 0.0 })
    }
}

pub fn grasp_channels(snapshot: &SceneSnapshot, gripper: &GripperModel, g_pose: &Pose3) -> GraspChannels {
    let table = snapshot.table_height();
    let narrow = gripper_boxes(gripper, g_pose, gripper.width_bins[0]);
    let wide = gripper_boxes(gripper, g_pose, gripper.width_bins[1]);
    let palm = &narrow[2];
    let mut free = [false; 2];
    if !obb_below_table(palm, table) {
        // Cheap table checks first; most rejected poses never touch the BVH.
        let fingers_clear_table: [bool; 2] =
            [&narrow, &wide].map(|b| !obb_below_table(&b[0], table) && !obb_below_table(&b[1], table));
        if fingers_clear_table.iter().any(|&c| c) && !obb_hits_objects(snapshot, palm) {
            for (w, boxes) in [&narrow, &wide].into_iter().enumerate() {
                free[w] = fingers_clear_table[w] && !obb_hits_objects(snapshot, &boxes[0]) && !obb_hits_objects(snapshot, &boxes[1]);
            }
        }
    }
    let level_bin = free.iter().position(|&f| f);
    let level = level_bin.map_or(0, |w| force_closure_level(snapshot, gripper, g_pose, w));
    GraspChannels { collision_free: free, level, level_bin }
}

/// Continuous quality from three level indicators: their mean.
#[inline]
pub fn level_mean(q: &[f64; 3]) -> f64 {
    (q[0] + q[1] + q[2]) / 3.0
}

/// Scene quality per width bin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityValue(pub [f64; 2]);

impl QualityValue {
    pub fn max(&self) -> f64 {
        self.0[0].max(self.0[1])
    }

    /// Bin with the higher quality; ties go to the narrow bin.
    pub fn best_bin(&self) -> usize {
        if self.0[1] > self.0[0] {
            1
        } else {
            0
        }
    }
}

fn quality_from_channels(q_levels: &[f64; 3], collision_free: [f64; 2], object_mask: f64) -> QualityValue {
    let qv = level_mean(q_levels);
    QualityValue([
        success_probability(qv, collision_free[0], object_mask),
        success_probability(qv, collision_free[1], object_mask),
    ])
}

fn on_object(obs: &Observation, p: &Vec3) -> bool {
    project(obs, p)
        .pixel(&obs.intrinsics)
        .is_some_and(|(i, j)| *obs.object_id.get(i, j) >= 0)
}

/// Per-grasp scene quality Q^S, bypassing the pixel maps.
pub fn evaluate_grasp(snapshot: &SceneSnapshot, gripper: &GripperModel, obs: &Observation, g: &GraspConfig) -> QualityValue {
    let ch = grasp_channels(snapshot, gripper, &grasp_pose(g));
    let cf = ch.collision_free.map(|c| if c { 1.0 } else { 0.0 });
    quality_from_channels(&ch.q_levels(), cf, if on_object(obs, &g.p) { 1.0 } else { 0.0 })
}

pub const CH_LEVEL: usize = 0;
pub const CH_OBJECT: usize = 3;
pub const CH_FREE: usize = 4;

/// Six per-pixel channels over a rotated view: levels 1..3, object mask,
/// collision-free for each width bin.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMaps {
    pub euler: EulerZXY,
    pub d: f64,
    pub channels: Grid<[f64; 6]>,
    /// Source pixel per rotated pixel, as in the rotated view.
    pub pixel_map: Grid<u32>,
}

impl QualityMaps {
    pub fn width(&self) -> usize {
        self.channels.width
    }

    pub fn height(&self) -> usize {
        self.channels.height
    }

    /// Unblurred quality per width bin at rotated pixel (i, j).
    pub fn raw_quality(&self, i: usize, j: usize) -> QualityValue {
        let c = self.channels.get(i, j);
        quality_from_channels(&[c[0], c[1], c[2]], [c[CH_FREE], c[CH_FREE + 1]], c[CH_OBJECT])
    }

    /// Six 8-bit label images (0 / 255).
    pub fn write_label_pgms<F: FnMut(usize) -> std::io::Result<W>, W: Write>(&self, mut open: F) -> std::io::Result<()> {
        for ch in 0..6 {
            let bytes: Vec<u8> = self.channels.data.iter().map(|c| (c[ch].clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            crate::camera::write_pgm8(open(ch)?, self.width(), self.height(), &bytes)?;
        }
        Ok(())
    }
}

/// Pixel-wise directional quality for a fixed grasp rotation and depth.
///
/// `e` is the grasp rotation relative to the camera. The image is viewed
/// rotated by `-alpha`, so in the maps the closing axis runs along image x.
pub fn directional_quality_maps(
    obs: &Observation,
    snapshot: &SceneSnapshot,
    e: &EulerZXY,
    d: f64,
    gripper: &GripperModel,
) -> Result<QualityMaps, QualityError> {
    if obs.time_step != snapshot.time_step {
        return Err(QualityError::FrameMismatch { observation: obs.time_step, snapshot: snapshot.time_step });
    }
    let view = rotate_view(obs, e.alpha);
    let r = grasp_rotation(&obs.cam_pose.rotation, e);
    let (w, h) = (obs.intrinsics.width, obs.intrinsics.height);
    let rows: Vec<Vec<[f64; 6]>> = (0..h)
        .into_par_iter()
        .map(|i| {
            (0..w)
                .map(|j| {
                    let Some(src) = view.source_pixel(i, j) else { return [0.0; 6] };
                    let Ok(p) = back_project(obs, src) else { return [0.0; 6] };
                    let g = GraspConfig { p, r, d, w_bin: 0 };
                    let ch = grasp_channels(snapshot, gripper, &grasp_pose(&g));
                    let q = ch.q_levels();
                    let obj = if *obs.object_id.get(src.0, src.1) >= 0 { 1.0 } else { 0.0 };
                    let cf = ch.collision_free.map(|c| if c { 1.0 } else { 0.0 });
                    [q[0], q[1], q[2], obj, cf[0], cf[1]]
                })
                .collect()
        })
        .collect();
    Ok(QualityMaps {
        euler: *e,
        d,
        channels: Grid { width: w, height: h, data: rows.into_iter().flatten().collect() },
        pixel_map: view.pixel_map,
    })
}

/// Continuous quality per width bin: chained success probability, then a
/// Gaussian blur (edge-clamped, normalized kernel truncated at 3 sigma).
pub fn continuous_quality(maps: &QualityMaps, blur_sigma_px: f64) -> [Grid<f64>; 2] {
    let (w, h) = (maps.width(), maps.height());
    std::array::from_fn(|bin| {
        let raw = Grid {
            width: w,
            height: h,
            data: (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| maps.raw_quality(i, j).0[bin]).collect(),
        };
        let mut out = gaussian_blur(&raw, blur_sigma_px);
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    })
}

/// Normalized discrete Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn gaussian_blur(img: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = Grid::filled(img.width, img.height, 0.0);
    for i in 0..h {
        for j in 0..w {
            let s: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * img.get(i as usize, (j + k as i64 - r).clamp(0, w - 1) as usize))
                .sum();
            tmp.set(i as usize, j as usize, s);
        }
    }
    let mut out = Grid::filled(img.width, img.height, 0.0);
    for i in 0..h {
        for j in 0..w {
            let s: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * tmp.get((i + k as i64 - r).clamp(0, h - 1) as usize, j as usize))
                .sum();
            out.set(i as usize, j as usize, s);
        }
    }
    out
}
