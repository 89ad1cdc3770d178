//! Closed-loop grasping episodes and the benchmark harness.
//!
//! The wrist camera starts above the scene, streams observations into the
//! filter while moving toward a pre-grasp pose behind the selected target,
//! and closes once near enough. Success is adjudicated by the quality oracle
//! at the executed pose after execution noise.

use crate::camera::{look_down_pose, project, render, Intrinsics, Observation};
use crate::filter::{initial_distribution, select_target, step, Belief, FilterError, FilterParams, Oracle, Target};
use crate::geom::{perturb_rotation, Pose3, Rotation3, Vec3};
use crate::quality::{collision_free, finger_contacts, force_closure_level, grasp_pose, GraspConfig, GripperModel};
use crate::reach::ReachModel;
use crate::scene::{apply_event, EventAction, Scene, SceneSnapshot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedLoop,
    OpenLoop,
    #[serde(alias = "sampling_only")]
    SamplingOpenLoop,
    SamplingClosedLoop,
    TopDown,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::ClosedLoop, Mode::OpenLoop, Mode::SamplingOpenLoop, Mode::SamplingClosedLoop, Mode::TopDown];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ClosedLoop => "closed_loop",
            Mode::OpenLoop => "open_loop",
            Mode::SamplingOpenLoop => "sampling_open_loop",
            Mode::SamplingClosedLoop => "sampling_closed_loop",
            Mode::TopDown => "top_down",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "closed_loop" | "cl" => Ok(Mode::ClosedLoop),
            "open_loop" | "ol" => Ok(Mode::OpenLoop),
            "sampling_open_loop" | "sampling_only" | "sampling_ol" => Ok(Mode::SamplingOpenLoop),
            "sampling_closed_loop" | "sampling_cl" => Ok(Mode::SamplingClosedLoop),
            "top_down" | "td" => Ok(Mode::TopDown),
            _ => Err(format!("unknown mode '{s}'")),
        }
    }
}

/// Tunables of an episode; everything except the scene, mode and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeParams {
    pub cam_distance: [f64; 2],
    pub approach_speed: f64,
    pub close_distance: f64,
    pub max_steps: usize,
    pub sigma_exec_p: f64,
    pub sigma_exec_rot: f64,
    /// Extra positional execution error per metre between the grasp and the
    /// camera at the last observation the target was chosen from.
    pub exec_range_gain: f64,
    /// Refinement steps on the single observation in open-loop mode.
    pub refine_steps: usize,
    pub pregrasp_offset: f64,
    /// Camera turn rate toward the target orientation, rad per step.
    pub max_turn: f64,
    pub hysteresis: f64,
    /// Distance penalty (per metre) when re-picking in sampling closed loop.
    pub sampling_lambda: f64,
    pub filter: FilterParams,
    pub gripper: GripperModel,
    pub reach: ReachModel,
    pub intrinsics: Intrinsics,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            cam_distance: [0.45, 0.65],
            approach_speed: 0.02,
            close_distance: 0.08,
            max_steps: 200,
            sigma_exec_p: 0.003,
            sigma_exec_rot: 0.02,
            exec_range_gain: 0.01,
            refine_steps: 10,
            pregrasp_offset: 0.10,
            max_turn: 0.15,
            hysteresis: 0.05,
            sampling_lambda: 5.0,
            filter: FilterParams::default(),
            gripper: GripperModel::default(),
            reach: ReachModel::default(),
            intrinsics: Intrinsics::default(),
        }
    }
}

impl EpisodeParams {
    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.cam_distance;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("camera distance range [{lo}, {hi}] is invalid"));
        }
        for (name, v) in [
            ("approach_speed", self.approach_speed),
            ("close_distance", self.close_distance),
            ("pregrasp_offset", self.pregrasp_offset),
            ("max_turn", self.max_turn),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.sigma_exec_p >= 0.0 && self.sigma_exec_rot >= 0.0 && self.exec_range_gain >= 0.0) {
            return Err("execution noise must be non-negative".into());
        }
        self.filter.validate()?;
        self.gripper.validate().map_err(|e| e.to_string())?;
        self.reach.validate()?;
        self.intrinsics.validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub scene: Arc<Scene>,
    pub mode: Mode,
    pub seed: u64,
    pub params: EpisodeParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Executed,
    Timeout,
    /// No grasp candidates: nothing left to pick.
    Cleared,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Executed => "executed",
            Outcome::Timeout => "timeout",
            Outcome::Cleared => "cleared",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetRecord {
    pub p: [f64; 3],
    pub approach: [f64; 3],
    pub closing: [f64; 3],
    pub d: f64,
    pub bin: usize,
    pub quality: f64,
}

impl TargetRecord {
    fn new(t: &Target) -> Self {
        let a = t.g.r.column(2);
        Self { p: t.g.p.into(), approach: a.into(), closing: t.g.r.column(0).into(), d: t.g.d, bin: t.g.w_bin, quality: t.quality }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub camera: [f64; 3],
    pub camera_axis: [f64; 3],
    /// Time step of the observation the filter consumed, if any.
    pub observation: Option<usize>,
    pub target: Option<TargetRecord>,
    pub best_quality: f64,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Execution {
    pub planned: TargetRecord,
    pub pose_xyz: [f64; 3],
    pub pose_axis: [f64; 3],
    pub level: u8,
    pub collision_free: bool,
    /// Object both fingers touched, if the same one.
    pub object_id: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub mode: Mode,
    pub seed: u64,
    pub outcome: Outcome,
    pub success: bool,
    pub steps: usize,
    pub execution: Option<Execution>,
    pub trace: Vec<TraceRecord>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

struct World {
    scene: Scene,
    snapshot: SceneSnapshot,
}

impl World {
    fn new(scene: Scene) -> Self {
        let snapshot = SceneSnapshot::new(scene.clone(), 0);
        World { scene, snapshot }
    }

    /// Applies events due at `t` and stamps the snapshot with `t`.
    fn advance(&mut self, t: usize) -> Vec<String> {
        let due: Vec<_> = self.scene.events_at(t).cloned().collect();
        let mut markers = Vec::new();
        for e in &due {
            match apply_event(&self.scene, e) {
                Ok(next) => {
                    self.scene = next;
                    let verb = match e.action {
                        EventAction::Move => "move",
                        EventAction::Remove => "remove",
                    };
                    markers.push(format!("{verb} {}", e.id));
                }
                Err(err) => log::warn!("skipping event at t={t}: {err}"),
            }
        }
        if due.is_empty() {
            self.snapshot.time_step = t;
        } else {
            self.snapshot = SceneSnapshot::new(self.scene.clone(), t);
        }
        markers
    }
}

/// Pre-grasp point behind the grasp along its approach axis.
pub fn pregrasp_point(g: &Pose3, offset: f64) -> Vec3 {
    g.translation - g.rotation.column(2) * offset
}

/// Next camera pose: toward the pre-grasp point, then down the approach
/// line, never translating more than `speed`.
pub fn approach_step(cam: &Pose3, g: &Pose3, params: &EpisodeParams) -> Pose3 {
    let speed = params.approach_speed;
    let pre = pregrasp_point(g, params.pregrasp_offset);
    let axis = g.rotation.column(2);
    let rel = cam.translation - pre;
    let along = rel.dot(&axis);
    let on_final = (rel - axis * along).norm() < 1e-9 && along >= -1e-12;
    let t = if on_final {
        // Final straight segment; stop at the grasp pose.
        let left = params.pregrasp_offset - along;
        cam.translation + axis * left.clamp(0.0, speed)
    } else if rel.norm() > speed {
        cam.translation - rel * (speed / rel.norm())
    } else {
        let spare = speed - rel.norm();
        pre + axis * spare.min(params.pregrasp_offset)
    };
    // Keep the grasp point in view: look at it, rolled like the gripper.
    // On the final segment this is exactly the grasp orientation.
    let goal = if on_final {
        g.rotation
    } else {
        Rotation3::look_along(&(g.translation - t), &g.rotation.column(0)).unwrap_or(g.rotation)
    };
    Pose3::new(cam.rotation.step_toward(&goal, params.max_turn), t)
}

fn execute<R: Rng + ?Sized>(
    snapshot: &SceneSnapshot,
    gripper: &GripperModel,
    target: &Target,
    seen_from: &Vec3,
    params: &EpisodeParams,
    rng: &mut R,
) -> Execution {
    let planned = grasp_pose(&target.g);
    let sigma_p = params.sigma_exec_p + params.exec_range_gain * (planned.translation - seen_from).norm();
    let dp = Vec3::new(normal(rng), normal(rng), normal(rng)) * sigma_p;
    let rotation = perturb_rotation(&planned.rotation, params.sigma_exec_rot, rng);
    let pose = Pose3::new(rotation, planned.translation + dp);
    let bin = target.g.w_bin;
    let free = collision_free(snapshot, gripper, &pose, bin);
    let level = force_closure_level(snapshot, gripper, &pose, bin);
    let object_id = finger_contacts(snapshot, gripper, &pose, bin)
        .filter(|c| c[0].object_index == c[1].object_index)
        .map(|c| snapshot.scene.objects[c[0].object_index].id);
    Execution {
        planned: TargetRecord::new(target),
        pose_xyz: pose.translation.into(),
        pose_axis: pose.rotation.column(2).into(),
        level,
        collision_free: free,
        object_id,
    }
}

/// Re-pick for sampling closed loop: quality minus a distance penalty from
/// the previous target.
fn pick_regularized(b: &Belief, previous: Option<&Target>, lambda: f64) -> Option<Target> {
    let score = |g: &GraspConfig, q: f64| q - previous.map_or(0.0, |t| lambda * (g.p - t.g.p).norm());
    let mut best: Option<(f64, Target)> = None;
    for p in b.particles.iter().filter(|p| p.quality > 0.0) {
        let s = score(&p.g, p.quality);
        if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
            best = Some((s, Target { g: p.g, quality: p.quality, support: p.support }));
        }
    }
    best.map(|(_, t)| t)
}

struct Episode<'a> {
    cfg: &'a EpisodeConfig,
    params: EpisodeParams,
    world: World,
    cam: Pose3,
    rng: ChaCha8Rng,
    trace: Vec<TraceRecord>,
    /// Camera position at the last observation.
    seen_from: Vec3,
}

impl Episode<'_> {
    fn observe(&mut self) -> Observation {
        self.seen_from = self.cam.translation;
        render(&self.world.snapshot, &self.cam, &self.params.intrinsics)
    }

    fn record(&mut self, step: usize, observation: Option<usize>, target: Option<&Target>, best: f64, events: Vec<String>) {
        self.trace.push(TraceRecord {
            step,
            camera: self.cam.translation.into(),
            camera_axis: self.cam.rotation.column(2).into(),
            observation,
            target: target.map(TargetRecord::new),
            best_quality: best,
            events,
        });
    }

    fn finish(mut self, outcome: Outcome, steps: usize, target: Option<&Target>) -> EpisodeResult {
        let execution = match (outcome, target) {
            (Outcome::Executed, Some(t)) => {
                Some(execute(&self.world.snapshot, &self.params.gripper, t, &self.seen_from, &self.params, &mut self.rng))
            }
            _ => None,
        };
        let success = execution.as_ref().is_some_and(|e| e.level >= 1 && e.collision_free);
        EpisodeResult { mode: self.cfg.mode, seed: self.cfg.seed, outcome, success, steps, execution, trace: self.trace }
    }

    fn close_enough(&self, t: &Target) -> bool {
        (self.cam.translation - grasp_pose(&t.g).translation).norm() <= self.params.close_distance
    }

    /// Filter-in-the-loop modes.
    fn run_closed(mut self) -> EpisodeResult {
        let mut belief: Option<Belief> = None;
        let mut target: Option<Target> = None;
        for t in 0..self.params.max_steps {
            let events = self.world.advance(t);
            let obs = self.observe();
            let oracle = Oracle { snapshot: &self.world.snapshot, gripper: &self.params.gripper, reach: &self.params.reach };
            let updated = match (&belief, self.cfg.mode) {
                (_, Mode::SamplingClosedLoop) => initial_distribution(&obs, &oracle, &self.params.filter, &mut self.rng),
                // A fresh belief carries candidate-map qualities; run one step
                // so target selection sees measured ones.
                (None, _) => initial_distribution(&obs, &oracle, &self.params.filter, &mut self.rng)
                    .and_then(|b| step(&b, &obs, &oracle, &self.params.filter, &mut self.rng)),
                (Some(b), _) => step(b, &obs, &oracle, &self.params.filter, &mut self.rng),
            };
            let b = match updated {
                Ok(b) => b,
                // Nothing graspable in this view. With a target in hand the
                // object may just be out of frame, so keep going on it.
                Err(FilterError::NoCandidates) => match target {
                    Some(tg) => {
                        belief = None;
                        self.record(t, Some(obs.time_step), Some(&tg), 0.0, events);
                        if self.close_enough(&tg) {
                            return self.finish(Outcome::Executed, t + 1, Some(&tg));
                        }
                        self.cam = approach_step(&self.cam, &grasp_pose(&tg.g), &self.params);
                        continue;
                    }
                    None => {
                        self.record(t, Some(obs.time_step), None, 0.0, events);
                        return self.finish(Outcome::Cleared, t + 1, None);
                    }
                },
                Err(e) => panic!("filter failed: {e}"),
            };
            let previous = target.map(|prev| {
                let (q, bin) = oracle.measure(&obs, &prev.g);
                let g = GraspConfig { w_bin: bin, ..prev.g };
                let support = if q > 0.0 { oracle.stencil_quality(&obs, &g, self.params.filter.support_offset) } else { 0.0 };
                Target { g, quality: q, support }
            });
            target = if self.cfg.mode == Mode::SamplingClosedLoop {
                pick_regularized(&b, previous.as_ref(), self.params.sampling_lambda)
            } else {
                select_target(&b, previous, self.params.hysteresis).ok()
            }
            .or(previous.filter(|p| p.quality > 0.0));
            let best = b.best_quality();
            belief = Some(b);
            self.record(t, Some(obs.time_step), target.as_ref(), best, events);
            let Some(tg) = target else { continue };
            if self.close_enough(&tg) {
                return self.finish(Outcome::Executed, t + 1, Some(&tg));
            }
            self.cam = approach_step(&self.cam, &grasp_pose(&tg.g), &self.params);
        }
        let steps = self.params.max_steps;
        self.finish(Outcome::Timeout, steps, None)
    }

    /// Observe once, optionally refine, then approach blind.
    fn run_open(mut self) -> EpisodeResult {
        let events = self.world.advance(0);
        let obs = self.observe();
        let oracle = Oracle { snapshot: &self.world.snapshot, gripper: &self.params.gripper, reach: &self.params.reach };
        let mut b = match initial_distribution(&obs, &oracle, &self.params.filter, &mut self.rng) {
            Ok(b) => b,
            Err(FilterError::NoCandidates) => {
                self.record(0, Some(0), None, 0.0, events);
                return self.finish(Outcome::Cleared, 1, None);
            }
            Err(e) => panic!("filter failed: {e}"),
        };
        if self.cfg.mode == Mode::OpenLoop {
            for _ in 0..self.params.refine_steps {
                match step(&b, &obs, &oracle, &self.params.filter, &mut self.rng) {
                    Ok(next) => b = next,
                    Err(FilterError::NoCandidates) => {
                        self.record(0, Some(0), None, 0.0, events);
                        return self.finish(Outcome::Cleared, 1, None);
                    }
                    Err(e) => panic!("filter failed: {e}"),
                }
            }
        }
        let Ok(target) = select_target(&b, None, self.params.hysteresis) else {
            self.record(0, Some(0), None, 0.0, events);
            return self.finish(Outcome::Cleared, 1, None);
        };
        self.record(0, Some(0), Some(&target), b.best_quality(), events);
        let g = grasp_pose(&target.g);
        for t in 1..self.params.max_steps {
            if self.close_enough(&target) {
                return self.finish(Outcome::Executed, t, Some(&target));
            }
            self.cam = approach_step(&self.cam, &g, &self.params);
            let events = self.world.advance(t);
            self.record(t, None, Some(&target), target.quality, events);
        }
        let steps = self.params.max_steps;
        self.finish(Outcome::Timeout, steps, None)
    }
}

pub fn run_episode(cfg: &EpisodeConfig) -> EpisodeResult {
    let mut params = cfg.params.clone();
    params.filter.seed = cfg.seed;
    params.filter.top_down = cfg.mode == Mode::TopDown;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new((*cfg.scene).clone());
    let [lo, hi] = params.cam_distance;
    let dist = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let cam = look_down_pose(cfg.scene.centroid() + Vec3::new(0.0, 0.0, dist));
    let ep = Episode { cfg, params, world, cam, rng, trace: Vec::new(), seen_from: cam.translation };
    match cfg.mode {
        Mode::ClosedLoop | Mode::SamplingClosedLoop | Mode::TopDown => ep.run_closed(),
        Mode::OpenLoop | Mode::SamplingOpenLoop => ep.run_open(),
    }
}

/// Per-episode summary line for JSON-lines output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub mode: Mode,
    pub seed: u64,
    pub outcome: Outcome,
    pub success: bool,
    pub steps: usize,
    pub object_id: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub episodes: Vec<EpisodeRecord>,
    pub modes: Vec<ModeSummary>,
}

/// Wilson score interval at z = 1.96.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Runs every config `repeats` times with seeds `seed, seed + 1, ...`.
/// Episodes run in parallel; results are ordered by (config, repeat).
pub fn run_benchmark(suite: &[EpisodeConfig], repeats: usize) -> BenchmarkReport {
    let jobs: Vec<(usize, EpisodeConfig)> = suite
        .iter()
        .flat_map(|c| (0..repeats).map(move |r| EpisodeConfig { seed: c.seed.wrapping_add(r as u64), ..c.clone() }))
        .enumerate()
        .collect();
    let episodes: Vec<EpisodeRecord> = jobs
        .par_iter()
        .map(|(index, cfg)| {
            let r = run_episode(cfg);
            if r.outcome != Outcome::Executed {
                log::info!("episode {index} ({} seed {}) ended {:?}", cfg.mode, cfg.seed, r.outcome);
            }
            EpisodeRecord {
                index: *index,
                mode: cfg.mode,
                seed: cfg.seed,
                outcome: r.outcome,
                success: r.success,
                steps: r.steps,
                object_id: r.execution.and_then(|e| e.object_id),
            }
        })
        .collect();
    let mut modes: Vec<Mode> = suite.iter().map(|c| c.mode).collect();
    modes.sort();
    modes.dedup();
    let modes = modes
        .into_iter()
        .map(|mode| {
            let mine: Vec<&EpisodeRecord> = episodes.iter().filter(|e| e.mode == mode).collect();
            let successes = mine.iter().filter(|e| e.success).count();
            let (ci_low, ci_high) = wilson_interval(successes, mine.len());
            ModeSummary {
                mode,
                episodes: mine.len(),
                successes,
                rate: if mine.is_empty() { 0.0 } else { successes as f64 / mine.len() as f64 },
                ci_low,
                ci_high,
            }
        })
        .collect();
    BenchmarkReport { episodes, modes }
}

impl BenchmarkReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,episodes,successes,rate,ci_low,ci_high\n");
        for m in &self.modes {
            s += &format!("{},{},{},{:.4},{:.4},{:.4}\n", m.mode, m.episodes, m.successes, m.rate, m.ci_low, m.ci_high);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<22} {:>8} {:>9} {:>7}  {:<15}\n", "mode", "episodes", "successes", "rate", "95% interval");
        for m in &self.modes {
            s += &format!(
                "{:<22} {:>8} {:>9} {:>6.1}%  [{:.1}%, {:.1}%]\n",
                m.mode.name(),
                m.episodes,
                m.successes,
                100.0 * m.rate,
                100.0 * m.ci_low,
                100.0 * m.ci_high
            );
        }
        s
    }
}

/// True if the target's surface point projects onto object `id` in `obs`.
pub fn target_on_object(obs: &Observation, g: &GraspConfig, id: i32) -> bool {
    project(obs, &g.p).pixel(&obs.intrinsics).is_some_and(|(i, j)| *obs.object_id.get(i, j) == id)
}
