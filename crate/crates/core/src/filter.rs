//! The grasp particle filter.
//!
//! A belief over grasp configurations is initialized from directional
//! quality maps, then each step runs transition, line-of-sight projection,
//! quality evaluation and systematic resampling.
//!
//! Per-particle randomness comes from ChaCha streams keyed by one draw from
//! the caller's RNG and selected by particle index, so results do not depend
//! on how rayon schedules the work.

use crate::camera::{back_project, project, Observation};
use crate::geom::{euler_zxy_decompose, perturb_rotation, EulerZXY, Rotation3, Vec3};
use crate::quality::{continuous_quality, directional_quality_maps, evaluate_grasp, grasp_pose, GraspConfig, GripperModel};
use crate::reach::ReachModel;
use crate::scene::SceneSnapshot;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_4, PI};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

/// Below this total weight a belief is degenerate.
pub const DEGENERATE_WEIGHT: f64 = 1e-12;
/// Lowest threshold the initializer will halve down to.
pub const MIN_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("no grasp candidates above the minimum quality threshold")]
    NoCandidates,
    #[error("belief has no particle with positive quality")]
    Degenerate,
    #[error(transparent)]
    Quality(#[from] crate::quality::QualityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub m: usize,
    pub sigma_p: f64,
    pub sigma_rot: f64,
    pub sigma_d: f64,
    pub n_dirs: usize,
    pub quality_threshold: f64,
    pub fresh_fraction: f64,
    pub beta_bound: f64,
    pub gamma_bound: f64,
    pub blur_sigma_px: f64,
    /// Offset (m) of the pose stencil whose mean quality breaks ties
    /// between equally good particles in target selection.
    pub support_offset: f64,
    /// Force beta = gamma = 0 and restrict rotation noise to the approach axis.
    pub top_down: bool,
    pub seed: u64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            m: 512,
            sigma_p: 0.01,
            sigma_rot: 0.1,
            sigma_d: 0.005,
            n_dirs: 16,
            quality_threshold: 0.5,
            fresh_fraction: 0.1,
            beta_bound: FRAC_PI_4,
            gamma_bound: FRAC_PI_4,
            blur_sigma_px: 1.0,
            support_offset: 0.008,
            top_down: false,
            seed: 0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.m == 0 {
            return Err("m must be at least 1".into());
        }
        if [self.sigma_p, self.sigma_rot, self.sigma_d, self.blur_sigma_px, self.support_offset].iter().any(|s| !(*s >= 0.0)) {
            return Err("noise sigmas, blur sigma and support offset must be non-negative".into());
        }
        if !(self.quality_threshold > 0.0 && self.quality_threshold < 1.0) {
            return Err(format!("quality_threshold {} outside (0, 1)", self.quality_threshold));
        }
        if !(0.0..1.0).contains(&self.fresh_fraction) {
            return Err(format!("fresh_fraction {} outside [0, 1)", self.fresh_fraction));
        }
        if !(0.0..=FRAC_PI_4).contains(&self.beta_bound) || !(0.0..=FRAC_PI_4).contains(&self.gamma_bound) {
            return Err("euler bounds must lie in [0, pi/4]".into());
        }
        if self.n_dirs == 0 {
            return Err("n_dirs must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything the measurement model may consult.
#[derive(Clone, Copy)]
pub struct Oracle<'a> {
    pub snapshot: &'a SceneSnapshot,
    pub gripper: &'a GripperModel,
    pub reach: &'a ReachModel,
}

impl Oracle<'_> {
    /// Q^R * max_w Q^S and the maximizing bin.
    pub fn measure(&self, obs: &Observation, g: &GraspConfig) -> (f64, usize) {
        if !self.reach.reachable(&grasp_pose(g)) {
            return (0.0, g.w_bin);
        }
        let q = evaluate_grasp(self.snapshot, self.gripper, obs, g);
        let bin = q.best_bin();
        (q.0[bin], bin)
    }

    /// Mean of Q^R * Q^S in `g.w_bin` over the six grasps shifted by
    /// `offset` along +-x, +-y, +-z of the gripper frame.
    pub fn stencil_quality(&self, obs: &Observation, g: &GraspConfig, offset: f64) -> f64 {
        let mut sum = 0.0;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let shifted = GraspConfig { p: g.p + g.r.column(axis) * (sign * offset), ..*g };
                if self.reach.reachable(&grasp_pose(&shifted)) {
                    sum += evaluate_grasp(self.snapshot, self.gripper, obs, &shifted).0[g.w_bin];
                }
            }
        }
        sum / 6.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub g: GraspConfig,
    pub weight: f64,
    /// Last measured quality.
    pub quality: f64,
    /// Mean quality, in the particle's bin, of the grasp shifted by the
    /// support offset along each gripper axis: how well it tolerates small
    /// pose errors. Only filled in for particles at the best quality.
    pub support: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub g: GraspConfig,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub particles: Vec<Particle>,
    pub time_step: usize,
    pub degenerate: bool,
    /// Initialization candidates, reused for fresh-particle injection.
    pub pool: Arc<Vec<Candidate>>,
}

#[derive(Serialize)]
struct ParticleRecord {
    step: usize,
    position: [f64; 3],
    euler: Option<EulerZXY>,
    d: f64,
    bin: usize,
    weight: f64,
    quality: f64,
}

impl Belief {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// Index of the highest-quality particle. Ties go to the higher
    /// neighbourhood quality, then to the lowest index.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, p) in self.particles.iter().enumerate() {
            let better = best.is_none_or(|b| {
                let q = &self.particles[b];
                p.quality > q.quality || (p.quality == q.quality && p.support > q.support)
            });
            if better {
                best = Some(i);
            }
        }
        best
    }

    pub fn best_quality(&self) -> f64 {
        self.best_index().map_or(0.0, |i| self.particles[i].quality)
    }

    /// One JSON record per particle; Euler angles are of the world rotation
    /// and null inside the gimbal band.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for p in &self.particles {
            let rec = ParticleRecord {
                step: self.time_step,
                position: [p.g.p.x, p.g.p.y, p.g.p.z],
                euler: euler_zxy_decompose(&p.g.r).ok(),
                d: p.g.d,
                bin: p.g.w_bin,
                weight: p.weight,
                quality: p.quality,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Independent stream for one particle under one key.
pub fn particle_rng(key: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index as u64);
    rng
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Rotation sampled for initialization, relative to the camera.
pub fn sample_direction<R: Rng + ?Sized>(params: &FilterParams, gripper: &GripperModel, rng: &mut R) -> (EulerZXY, f64) {
    let alpha = rng.random_range(-PI..PI);
    let mut beta = rng.random_range(-params.beta_bound..=params.beta_bound);
    let mut gamma = rng.random_range(-params.gamma_bound..=params.gamma_bound);
    if params.top_down {
        beta = 0.0;
        gamma = 0.0;
    }
    let d = rng.random_range(gripper.depth_range[0]..=gripper.depth_range[1]);
    (EulerZXY::new(alpha, beta, gamma), d)
}

/// All initialization candidates with quality above [`MIN_THRESHOLD`], in
/// (direction, row, column) order.
pub fn collect_candidates<R: Rng + ?Sized>(
    obs: &Observation,
    oracle: &Oracle,
    params: &FilterParams,
    rng: &mut R,
) -> Result<Vec<Candidate>, FilterError> {
    let dirs: Vec<(EulerZXY, f64)> = (0..params.n_dirs).map(|_| sample_direction(params, oracle.gripper, rng)).collect();
    let per_dir: Vec<Result<Vec<Candidate>, FilterError>> = dirs
        .par_iter()
        .map(|(e, d)| {
            let maps = directional_quality_maps(obs, oracle.snapshot, e, *d, oracle.gripper)?;
            let q = continuous_quality(&maps, params.blur_sigma_px);
            let r = obs.cam_pose.rotation * crate::geom::euler_zxy_compose(e);
            let mut out = Vec::new();
            for i in 0..maps.height() {
                for j in 0..maps.width() {
                    // Blurring lifts pixels bordering better ones; cap by the
                    // pixel's own value so no candidate scores above its grasp.
                    let raw = maps.raw_quality(i, j).0;
                    let qs = [q[0].get(i, j).min(raw[0]), q[1].get(i, j).min(raw[1])];
                    let bin = if qs[1] > qs[0] { 1 } else { 0 };
                    if qs[bin] <= MIN_THRESHOLD {
                        continue;
                    }
                    let idx = *maps.pixel_map.get(i, j);
                    if idx == crate::camera::INVALID_PIXEL {
                        continue;
                    }
                    let src = (idx as usize / obs.intrinsics.width, idx as usize % obs.intrinsics.width);
                    let Ok(p) = back_project(obs, src) else { continue };
                    let g = GraspConfig { p, r, d: *d, w_bin: bin };
                    if oracle.reach.reachable(&grasp_pose(&g)) {
                        out.push(Candidate { g, quality: qs[bin] });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for c in per_dir {
        all.extend(c?);
    }
    Ok(all)
}

/// Threshold actually used: halved from `tau` while fewer than
/// `max(m / 8, 1)` candidates pass, never below [`MIN_THRESHOLD`].
pub fn effective_threshold(candidates: &[Candidate], tau: f64, m: usize) -> f64 {
    let count = |t: f64| candidates.iter().filter(|c| c.quality > t).count();
    let mut tau = tau;
    if count(tau) >= m {
        return tau;
    }
    let need = (m / 8).max(1);
    while count(tau) < need && tau / 2.0 >= MIN_THRESHOLD {
        tau /= 2.0;
    }
    tau
}

pub fn initial_distribution<R: Rng + ?Sized>(
    obs: &Observation,
    oracle: &Oracle,
    params: &FilterParams,
    rng: &mut R,
) -> Result<Belief, FilterError> {
    let all = collect_candidates(obs, oracle, params, rng)?;
    let tau = effective_threshold(&all, params.quality_threshold, params.m);
    let pool: Vec<Candidate> = all.into_iter().filter(|c| c.quality > tau).collect();
    if pool.is_empty() {
        return Err(FilterError::NoCandidates);
    }
    let picker = WeightedIndex::new(pool.iter().map(|c| c.quality)).map_err(|_| FilterError::NoCandidates)?;
    let w = 1.0 / params.m as f64;
    let particles = (0..params.m)
        .map(|_| {
            let c = pool[picker.sample(rng)];
            Particle { g: c.g, weight: w, quality: c.quality, support: c.quality }
        })
        .collect();
    Ok(Belief { particles, time_step: obs.time_step, degenerate: false, pool: Arc::new(pool) })
}

/// Gaussian transition plus fresh-particle injection from the pool.
pub fn transition<R: Rng + ?Sized>(b: &Belief, params: &FilterParams, gripper: &GripperModel, rng: &mut R) -> Belief {
    let key: u64 = rng.random();
    let [d_lo, d_hi] = gripper.depth_range;
    let mut particles: Vec<Particle> = b
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, part)| {
            let mut s = particle_rng(key, i);
            let mut g = part.g;
            let dp = Vec3::new(normal(&mut s), normal(&mut s), normal(&mut s));
            g.p += dp * params.sigma_p;
            g.r = if params.top_down {
                g.r * Rotation3::rot_z(params.sigma_rot * normal(&mut s))
            } else {
                perturb_rotation(&g.r, params.sigma_rot, &mut s)
            };
            g.d = (g.d + params.sigma_d * normal(&mut s)).clamp(d_lo, d_hi);
            Particle { g, ..*part }
        })
        .collect();

    let n_fresh = (params.fresh_fraction * particles.len() as f64).floor() as usize;
    if n_fresh > 0 && !b.pool.is_empty() {
        let mut order: Vec<usize> = (0..particles.len()).collect();
        order.sort_by(|&a, &c| particles[a].weight.total_cmp(&particles[c].weight).then(a.cmp(&c)));
        let picker = WeightedIndex::new(b.pool.iter().map(|c| c.quality)).expect("pool qualities are positive");
        let mut s = particle_rng(key, usize::MAX);
        for &i in &order[..n_fresh] {
            let c = b.pool[picker.sample(&mut s)];
            particles[i].g = c.g;
            particles[i].quality = c.quality;
            particles[i].support = c.quality;
        }
    }
    Belief { particles, ..b.clone() }
}

/// Snap each particle onto the observed surface along its line of sight.
pub fn project_to_surface(b: &Belief, obs: &Observation) -> Belief {
    let particles = b
        .particles
        .par_iter()
        .map(|part| {
            let snapped = project(obs, &part.g.p).pixel(&obs.intrinsics).and_then(|px| back_project(obs, px).ok());
            match snapped {
                Some(p) => Particle { g: GraspConfig { p, ..part.g }, ..*part },
                None => Particle { weight: 0.0, ..*part },
            }
        })
        .collect();
    Belief { particles, ..b.clone() }
}

/// Reweight by Q^R * Q^S and normalize; stores the best bin per particle.
pub fn evaluate(b: &Belief, obs: &Observation, oracle: &Oracle, params: &FilterParams) -> Belief {
    let measured: Vec<(f64, usize)> = b.particles.par_iter().map(|part| oracle.measure(obs, &part.g)).collect();
    let top = measured.iter().map(|m| m.0).fold(0.0, f64::max);
    let support: Vec<f64> = b
        .particles
        .par_iter()
        .zip(&measured)
        .map(|(part, &(q, bin))| {
            if q > 0.0 && q == top {
                oracle.stencil_quality(obs, &GraspConfig { w_bin: bin, ..part.g }, params.support_offset)
            } else {
                0.0
            }
        })
        .collect();
    let mut particles: Vec<Particle> = b
        .particles
        .iter()
        .zip(&measured)
        .zip(support)
        .map(|((part, &(q, bin)), support)| Particle {
            g: GraspConfig { w_bin: bin, ..part.g },
            weight: part.weight * q,
            quality: q,
            support,
        })
        .collect();
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let degenerate = !(total >= DEGENERATE_WEIGHT);
    if !degenerate {
        particles.iter_mut().for_each(|p| p.weight /= total);
    }
    Belief { particles, degenerate, ..b.clone() }
}

/// Systematic selector: particle indices for offset `u` in [0, 1/m).
pub fn systematic_indices(weights: &[f64], m: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(m);
    let mut cum = 0.0;
    let mut i = 0;
    for k in 0..m {
        let target = (u + k as f64 / m as f64) * total;
        while i + 1 < weights.len() && cum + weights[i] <= target {
            cum += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

/// Systematic resampling to uniform weights; a degenerate belief is
/// re-initialized from the observation instead.
pub fn resample<R: Rng + ?Sized>(
    b: &Belief,
    obs: &Observation,
    oracle: &Oracle,
    params: &FilterParams,
    rng: &mut R,
) -> Result<Belief, FilterError> {
    if b.degenerate {
        let fresh = initial_distribution(obs, oracle, params, rng)?;
        return Ok(Belief { time_step: b.time_step, ..fresh });
    }
    let m = b.particles.len();
    let u = rng.random_range(0.0..1.0 / m as f64);
    let weights: Vec<f64> = b.particles.iter().map(|p| p.weight).collect();
    let w = 1.0 / m as f64;
    let particles = systematic_indices(&weights, m, u)
        .into_iter()
        .map(|i| Particle { weight: w, ..b.particles[i] })
        .collect();
    Ok(Belief { particles, ..b.clone() })
}

pub fn step<R: Rng + ?Sized>(
    b: &Belief,
    obs: &Observation,
    oracle: &Oracle,
    params: &FilterParams,
    rng: &mut R,
) -> Result<Belief, FilterError> {
    let moved = transition(b, params, oracle.gripper, rng);
    let projected = project_to_surface(&moved, obs);
    let evaluated = evaluate(&projected, obs, oracle, params);
    let mut next = resample(&evaluated, obs, oracle, params, rng)?;
    next.time_step = b.time_step + 1;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub g: GraspConfig,
    pub quality: f64,
    /// Stencil quality, as on [`Particle::support`].
    pub support: f64,
}

/// Best particle, unless `previous` (with quality and support re-measured by
/// the caller) is within `delta` of it. Quality saturates at 1 on easy
/// objects, so between equal qualities the support decides, with the same
/// margin.
pub fn select_target(b: &Belief, previous: Option<Target>, delta: f64) -> Result<Target, FilterError> {
    let best = b.best_index().filter(|&i| b.particles[i].quality > 0.0).ok_or(FilterError::Degenerate)?;
    let p = &b.particles[best];
    let cand = Target { g: p.g, quality: p.quality, support: p.support };
    match previous {
        Some(prev)
            if cand.quality <= prev.quality + delta
                && !(cand.quality >= prev.quality && cand.support > prev.support + delta) =>
        {
            Ok(prev)
        }
        _ => Ok(cand),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{look_down_pose, look_down_rotation, render, Intrinsics};
    use crate::scene::{load_scene, Placement, Scene, SceneObject, Shape};

    fn box_scene() -> Scene {
        load_scene(include_str!("../fixtures/single_box.scene")).unwrap()
    }

    struct World {
        snap: SceneSnapshot,
        obs: Observation,
        gripper: GripperModel,
        reach: ReachModel,
    }

    impl World {
        fn new(scene: Scene) -> Self {
            let snap = SceneSnapshot::new(scene, 0);
            let obs = render(&snap, &look_down_pose(Vec3::new(0.0, 0.0, 0.5)), &Intrinsics::default());
            World { snap, obs, gripper: GripperModel::default(), reach: ReachModel::default() }
        }

        fn oracle(&self) -> Oracle<'_> {
            Oracle { snapshot: &self.snap, gripper: &self.gripper, reach: &self.reach }
        }
    }

    fn small_params() -> FilterParams {
        FilterParams { m: 64, n_dirs: 8, seed: 1, ..Default::default() }
    }

    fn grasp_at(p: Vec3) -> GraspConfig {
        GraspConfig { p, r: look_down_rotation(), d: 0.02, w_bin: 0 }
    }

    fn uniform_belief(gs: &[GraspConfig]) -> Belief {
        let w = 1.0 / gs.len() as f64;
        Belief {
            particles: gs.iter().map(|&g| Particle { g, weight: w, quality: 0.0, support: 0.0 }).collect(),
            time_step: 0,
            degenerate: false,
            pool: Arc::new(vec![]),
        }
    }

    #[test]
    fn empty_table_has_no_candidates() {
        let w = World::new(Scene::empty(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(initial_distribution(&w.obs, &w.oracle(), &small_params(), &mut rng), Err(FilterError::NoCandidates));
    }

    #[test]
    fn initial_particles_are_good_grasps() {
        let w = World::new(box_scene());
        let params = FilterParams { m: 128, n_dirs: 16, ..small_params() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let all = collect_candidates(&w.obs, &w.oracle(), &params, &mut rng).unwrap();
        let tau = effective_threshold(&all, params.quality_threshold, params.m);
        let b = initial_distribution(&w.obs, &w.oracle(), &params, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b.len(), 128);
        for p in &b.particles {
            assert!((p.weight - 1.0 / 128.0).abs() < 1e-15);
            let (q, _) = w.oracle().measure(&w.obs, &p.g);
            assert!(q > tau && q >= p.quality, "{q} at {:?}", p.g.p);
            // On the box top.
            assert!((p.g.p.z - 0.05).abs() < 1e-9 && p.g.p.x.abs() <= 0.015 + 1e-9 && p.g.p.y.abs() <= 0.03 + 1e-9);
        }
        let again = initial_distribution(&w.obs, &w.oracle(), &params, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn threshold_halving() {
        let c = |q: f64| Candidate { g: grasp_at(Vec3::zeros()), quality: q };
        let pool: Vec<Candidate> = [0.9, 0.3, 0.2, 0.1, 0.04].map(c).to_vec();
        assert_eq!(effective_threshold(&pool, 0.5, 1), 0.5);
        // Need max(16 / 8, 1) = 2 above: 0.25 admits 0.9 and 0.3.
        assert_eq!(effective_threshold(&pool, 0.5, 16), 0.25);
        assert!(effective_threshold(&[], 0.5, 16) >= MIN_THRESHOLD);
    }

    #[test]
    fn zero_noise_transition_is_identity() {
        let w = World::new(box_scene());
        let params = FilterParams { sigma_p: 0.0, sigma_rot: 0.0, sigma_d: 0.0, fresh_fraction: 0.0, ..small_params() };
        let b = initial_distribution(&w.obs, &w.oracle(), &params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let t = transition(&b, &params, &w.gripper, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(t, b);
    }

    #[test]
    fn transition_position_moments() {
        let gr = GripperModel::default();
        let b = uniform_belief(&vec![grasp_at(Vec3::new(0.1, 0.2, 0.3)); 10_000]);
        let params = FilterParams { fresh_fraction: 0.0, ..Default::default() };
        let t = transition(&b, &params, &gr, &mut ChaCha8Rng::seed_from_u64(5));
        for k in 0..3 {
            let xs: Vec<f64> = t.particles.iter().map(|p| p.g.p[k] - b.particles[0].g.p[k]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            assert!((var.sqrt() - 0.01).abs() < 0.05 * 0.01, "axis {k}: {}", var.sqrt());
        }
    }

    #[test]
    fn depth_clamps_at_bound() {
        let gr = GripperModel::default();
        let g = GraspConfig { d: gr.depth_range[1], ..grasp_at(Vec3::zeros()) };
        let b = uniform_belief(&vec![g; 200]);
        let params = FilterParams { sigma_d: 0.01, fresh_fraction: 0.0, ..Default::default() };
        let t = transition(&b, &params, &gr, &mut ChaCha8Rng::seed_from_u64(6));
        assert!(t.particles.iter().all(|p| p.g.d <= gr.depth_range[1] && p.g.d >= gr.depth_range[0]));
        assert!(t.particles.iter().any(|p| p.g.d == gr.depth_range[1]));
    }

    #[test]
    fn top_down_noise_keeps_approach_axis() {
        let gr = GripperModel::default();
        let b = uniform_belief(&vec![grasp_at(Vec3::zeros()); 100]);
        let params = FilterParams { top_down: true, sigma_rot: 0.5, fresh_fraction: 0.0, ..Default::default() };
        let mut t = b;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            t = transition(&t, &params, &gr, &mut rng);
        }
        for p in &t.particles {
            let z = p.g.r.column(2);
            assert!((z + Vec3::z()).norm() < 1e-9);
        }
    }

    #[test]
    fn fresh_injection_replaces_lowest_weights() {
        let gr = GripperModel::default();
        let mut b = uniform_belief(&vec![grasp_at(Vec3::zeros()); 10]);
        for (i, p) in b.particles.iter_mut().enumerate() {
            p.weight = [0.3, 0.0, 0.1, 0.0, 0.2, 0.1, 0.1, 0.1, 0.05, 0.05][i];
        }
        let marker = Vec3::new(9.0, 9.0, 9.0);
        b.pool = Arc::new(vec![Candidate { g: grasp_at(marker), quality: 1.0 }]);
        let params = FilterParams { sigma_p: 0.0, sigma_rot: 0.0, sigma_d: 0.0, fresh_fraction: 0.3, ..Default::default() };
        let t = transition(&b, &params, &gr, &mut ChaCha8Rng::seed_from_u64(8));
        let replaced: Vec<usize> = (0..10).filter(|&i| t.particles[i].g.p == marker).collect();
        // Lowest weights 0.0 (1, 3), then 0.05 (8 before 9).
        assert_eq!(replaced, vec![1, 3, 8]);
        assert_eq!(t.particles.iter().map(|p| p.weight).collect::<Vec<_>>(), b.particles.iter().map(|p| p.weight).collect::<Vec<_>>());
    }

    #[test]
    fn projection_fixed_point_and_snap() {
        let w = World::new(box_scene());
        // Pixel centre on the box top, back-projected.
        let on = back_project(&w.obs, (64, 64)).unwrap();
        let floating = on + Vec3::new(0.0, 0.0, 0.05);
        let outside = Vec3::new(5.0, 0.0, 0.0);
        let b = uniform_belief(&[grasp_at(on), grasp_at(floating), grasp_at(outside)]);
        let p1 = project_to_surface(&b, &w.obs);
        assert!((p1.particles[0].g.p - on).norm() < 1e-9);
        // The box top is z = 0.05; the line of sight through the floating
        // point hits it at the same pixel.
        let landed = p1.particles[1].g.p;
        assert!((landed.z - 0.05).abs() < 1e-9);
        let cam = w.obs.cam_pose.translation;
        let ray = (floating - cam).normalize();
        let expect = cam + ray * ((0.05 - cam.z) / ray.z);
        let px_size = 0.45 / w.obs.intrinsics.fx;
        assert!((landed - expect).norm() < px_size);
        assert_eq!(p1.particles[2].weight, 0.0);
        assert_eq!(p1.particles[2].g.p, outside);
        let p2 = project_to_surface(&p1, &w.obs);
        for k in 0..2 {
            assert!((p2.particles[k].g.p - p1.particles[k].g.p).norm() < 1e-9);
        }
    }

    #[test]
    fn evaluation_contracts() {
        let w = World::new(box_scene());
        let air = uniform_belief(&vec![grasp_at(Vec3::new(0.0, 0.0, 0.3)); 5]);
        assert!(evaluate(&air, &w.obs, &w.oracle(), &small_params()).degenerate);
        let mut gs = vec![grasp_at(Vec3::new(0.0, 0.0, 0.3)); 4];
        gs.insert(2, grasp_at(Vec3::new(0.0, 0.0, 0.05)));
        let e = evaluate(&uniform_belief(&gs), &w.obs, &w.oracle(), &small_params());
        assert!(!e.degenerate);
        assert_eq!(e.particles[2].weight, 1.0);
        assert!((e.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resample_uniform_copies_each_once() {
        let w = World::new(box_scene());
        let gs: Vec<GraspConfig> = (0..16).map(|i| grasp_at(Vec3::new(i as f64, 0.0, 0.0))).collect();
        let b = uniform_belief(&gs);
        let r = resample(&b, &w.obs, &w.oracle(), &small_params(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.particles.iter().map(|p| p.g.p.x as usize).collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn systematic_enumerated_offsets() {
        for k in 0..1000 {
            let u = 0.25 * k as f64 / 1000.0;
            let idx = systematic_indices(&[0.75, 0.25, 0.0, 0.0], 4, u);
            assert_eq!(idx, vec![0, 0, 0, 1], "u = {u}");
        }
    }

    proptest::proptest! {
        #[test]
        fn systematic_multiplicity_within_one(
            raw in proptest::collection::vec(0.0f64..1.0, 1..40),
            m in 1usize..64,
            frac in 0.0f64..1.0,
        ) {
            let total: f64 = raw.iter().sum();
            proptest::prop_assume!(total > 1e-6);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let idx = systematic_indices(&w, m, frac / m as f64);
            proptest::prop_assert_eq!(idx.len(), m);
            proptest::prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            for (i, wi) in w.iter().enumerate() {
                let count = idx.iter().filter(|&&k| k == i).count() as f64;
                let e = m as f64 * wi;
                proptest::prop_assert!(count >= (e - 1e-9).floor() && count <= (e + 1e-9).ceil(), "i {} count {} expected {}", i, count, e);
            }
        }
    }

    #[test]
    fn degenerate_belief_reinitializes() {
        let w = World::new(box_scene());
        let mut b = uniform_belief(&vec![grasp_at(Vec3::new(0.0, 0.0, 0.3)); 8]);
        b.degenerate = true;
        b.time_step = 5;
        let r = resample(&b, &w.obs, &w.oracle(), &small_params(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!r.degenerate);
        assert_eq!(r.time_step, 5);
        assert!(r.best_quality() > 0.0);
        let empty = World::new(Scene::empty(0.0));
        assert_eq!(
            resample(&b, &empty.obs, &empty.oracle(), &small_params(), &mut ChaCha8Rng::seed_from_u64(1)),
            Err(FilterError::NoCandidates)
        );
    }

    #[test]
    fn constant_factor_cancels_in_normalization() {
        let weights = [0.1, 0.4, 0.0, 0.5];
        let qs = [1.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let norm = |c: f64| {
            let raw: Vec<f64> = weights.iter().zip(qs).map(|(w, q)| w * q * c).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        for (a, b) in norm(1.0).iter().zip(norm(7.3)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn step_is_deterministic_and_keeps_size() {
        let w = World::new(box_scene());
        let params = small_params();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let mut b = initial_distribution(&w.obs, &w.oracle(), &params, &mut rng).unwrap();
            for _ in 0..3 {
                b = step(&b, &w.obs, &w.oracle(), &params, &mut rng).unwrap();
            }
            b
        };
        let a = run();
        assert_eq!(a.len(), params.m);
        assert_eq!(a.time_step, 3);
        assert_eq!(a, run());
    }

    #[test]
    fn zero_noise_step_keeps_best_quality() {
        let w = World::new(box_scene());
        let params = FilterParams { sigma_p: 0.0, sigma_rot: 0.0, sigma_d: 0.0, fresh_fraction: 0.0, ..small_params() };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut b = initial_distribution(&w.obs, &w.oracle(), &params, &mut rng).unwrap();
        b = step(&b, &w.obs, &w.oracle(), &params, &mut rng).unwrap();
        let q = b.best_quality();
        let b2 = step(&b, &w.obs, &w.oracle(), &params, &mut rng).unwrap();
        assert_eq!(b2.best_quality(), q);
    }

    #[test]
    fn target_hysteresis() {
        let mut b = uniform_belief(&[grasp_at(Vec3::zeros()), grasp_at(Vec3::x())]);
        b.particles[0].quality = 0.5;
        b.particles[1].quality = 0.8;
        let best = select_target(&b, None, 0.05).unwrap();
        assert_eq!(best.g.p, Vec3::x());
        let prev = Target { g: grasp_at(Vec3::y()), quality: 0.8 - 0.025, support: 0.0 };
        assert_eq!(select_target(&b, Some(prev), 0.05).unwrap(), prev);
        // Equal quality: a clearly more robust candidate wins, a marginally
        // more robust one does not.
        b.particles[1].support = 0.9;
        let tied = Target { quality: 0.8, support: 0.5, ..prev };
        assert_eq!(select_target(&b, Some(tied), 0.05).unwrap().g.p, Vec3::x());
        let close = Target { support: 0.88, ..tied };
        assert_eq!(select_target(&b, Some(close), 0.05).unwrap(), close);
        let better = Target { quality: 0.82, support: 0.0, ..prev };
        assert_eq!(select_target(&b, Some(better), 0.05).unwrap(), better);
        b.particles[1].support = 0.0;
        let gone = Target { quality: 0.0, ..prev };
        assert_eq!(select_target(&b, Some(gone), 0.05).unwrap().g.p, Vec3::x());
        b.particles.iter_mut().for_each(|p| p.quality = 0.0);
        assert_eq!(select_target(&b, None, 0.05), Err(FilterError::Degenerate));
    }

    #[test]
    fn jsonl_one_record_per_particle() {
        let b = uniform_belief(&[grasp_at(Vec3::zeros()), grasp_at(Vec3::x())]);
        let mut buf = Vec::new();
        b.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["bin"], 0);
        assert!(v["euler"].is_object());
    }

    #[test]
    fn sphere_scene_converges_on_object() {
        let scene = Scene {
            table_height: 0.0,
            objects: vec![SceneObject {
                id: 3,
                shape: Shape::Sphere { r: 0.025 },
                placement: Placement { xyz: [0.02, 0.01, 0.025], rpy: [0.0; 3] },
                mu: 0.8,
            }],
            events: vec![],
        };
        let w = World::new(scene);
        let params = small_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = initial_distribution(&w.obs, &w.oracle(), &params, &mut rng).unwrap();
        for _ in 0..5 {
            b = step(&b, &w.obs, &w.oracle(), &params, &mut rng).unwrap();
        }
        assert!(b.best_quality() > 0.0);
        let best = b.particles[b.best_index().unwrap()].g.p;
        assert!((best - Vec3::new(0.02, 0.01, 0.025)).norm() < 0.03);
    }
}
