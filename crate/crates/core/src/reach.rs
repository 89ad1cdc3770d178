//! Analytic reachability gate: a spherical workspace shell, an approach-tilt
//! cone about world -z and a table clearance.

use crate::geom::{Pose3, Vec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachModel {
    pub base_origin: [f64; 3],
    pub r_min: f64,
    pub r_max: f64,
    pub max_tilt: f64,
    pub min_clearance: f64,
    pub table_height: f64,
}

impl Default for ReachModel {
    fn default() -> Self {
        Self {
            base_origin: [0.0, -0.5, 0.0],
            r_min: 0.25,
            r_max: 0.85,
            max_tilt: 60f64.to_radians(),
            min_clearance: 0.005,
            table_height: 0.0,
        }
    }
}

impl ReachModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(format!("need 0 < r_min < r_max, got {} and {}", self.r_min, self.r_max));
        }
        if !(self.max_tilt > 0.0 && self.max_tilt <= std::f64::consts::FRAC_PI_2) {
            return Err(format!("max_tilt {} outside (0, pi/2]", self.max_tilt));
        }
        Ok(())
    }

    /// Angle between the approach axis of `g` and world -z.
    pub fn tilt(g: &Pose3) -> f64 {
        let z = g.rotation.column(2);
        (-z.z / z.norm()).clamp(-1.0, 1.0).acos()
    }

    pub fn reachable(&self, g: &Pose3) -> bool {
        let r = (g.translation - Vec3::from(self.base_origin)).norm();
        r >= self.r_min
            && r <= self.r_max
            && Self::tilt(g) <= self.max_tilt
            && g.translation.z >= self.table_height + self.min_clearance
    }

    pub fn reachable_batch(&self, grasps: &[Pose3]) -> Vec<bool> {
        // Below a few thousand grasps the thread handoff costs more than the check.
        if grasps.len() < 4096 {
            grasps.iter().map(|g| self.reachable(g)).collect()
        } else {
            grasps.par_iter().map(|g| self.reachable(g)).collect()
        }
    }

    /// Q^R as a weight factor.
    pub fn weight(&self, g: &Pose3) -> f64 {
        if self.reachable(g) {
            1.0
        } else {
            0.0
        }
    }
}
