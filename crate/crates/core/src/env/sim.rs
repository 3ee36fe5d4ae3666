//! A stochastic desk-scale simulator of a keyframe-based visual-odometry
//! pipeline.
//!
//! The camera follows a smooth random trajectory (Ornstein–Uhlenbeck process
//! on the body twist). The tracker holds a set of landmarks; each frame a
//! landmark survives with probability `quality * exp(-(kappa_t*|dt| +
//! kappa_r*dtheta))`, so fast motion and low-quality points shed tracks.
//! Taking a keyframe triangulates fresh landmarks (one per empty grid cell,
//! using the agent's grid size) and damps accumulated drift by `beta`. The
//! estimated pose is ground truth plus a drift random walk whose per-step
//! std is `sigma0 * (1 + alpha*d_kf) / sqrt(max(n_tracked, 1))` — drift
//! grows with distance since the last keyframe and shrinks with more
//! tracked points. Dropping below `n_min` tracked points forces
//! relocalization; the tracker survives at most `reloc_max_frames`
//! relocalization frames between map updates (keyframes) before the episode
//! is lost.
//!
//! Documented simplifications: drift is translation-only (estimated
//! rotations equal ground truth); during relocalization the landmark set is
//! frozen, nothing is observed as tracked, and actions are ignored; on
//! relocalization success the tracker re-anchors to the drifted estimate and
//! resumes with the stale map, so recovery usually requires an immediate
//! keyframe.

use super::{
    Action, EnvError, Environment, Observation, PrivilegedObservation, StepInfo, StepResult,
    VOMode, FUTURE_HORIZON, GRID_SIZES, MAP_STATS_DIM,
};
use crate::geometry::Pose;
use crate::reward::{reward, sliding_window_error, PoseWindow, RewardConfig};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};

/// Fixed camera rate used for timestamps and velocity conversions.
pub const FRAME_RATE_HZ: f64 = 20.0;

/// Minimum camera-frame depth for a landmark to be considered visible.
const Z_NEAR: f64 = 0.05;

/// Grid size active right after reset, before the agent's first choice.
pub const RESET_GRID_INDEX: usize = 2;

/// How many recent keyframes the observation references.
const KEYFRAME_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Agent-controlled frames per episode.
    pub episode_length: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Pinhole focal length in virtual pixels.
    pub focal_px: f64,
    /// Cap on concurrently live triangulated landmarks.
    pub landmark_count: usize,
    /// Depth range for freshly triangulated landmarks, meters.
    pub spawn_depth_min: f64,
    pub spawn_depth_max: f64,
    /// Stationary std of the body translational velocity, m/s.
    pub velocity_std_trans: f64,
    /// Stationary std of the body angular velocity, rad/s.
    pub velocity_std_rot: f64,
    /// Per-frame AR(1) coefficient of the velocity process.
    pub smoothness: f64,
    /// Base per-step drift std, meters.
    pub drift_sigma0: f64,
    /// Drift growth per meter traveled since the last keyframe.
    pub drift_alpha: f64,
    /// Drift damping factor applied when a keyframe is inserted.
    pub drift_beta: f64,
    /// Track-loss sensitivity to translation, 1/m.
    pub kappa_t: f64,
    /// Track-loss sensitivity to rotation, 1/rad.
    pub kappa_r: f64,
    /// Tracking requires at least this many live landmarks.
    pub n_min: usize,
    /// Frames simulated inside reset with ground-truth poses.
    pub init_frames: usize,
    /// Relocalization budget (frames) between map updates.
    pub reloc_max_frames: usize,
    /// Per-frame probability that relocalization succeeds.
    pub reloc_success_prob: f64,
    /// At most this many keypoints are exposed in an observation.
    pub max_obs_keypoints: usize,
    pub reward: RewardConfig,
    /// Default seed; `reset` takes an explicit per-episode seed.
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_length: 500,
            image_width: 640,
            image_height: 480,
            focal_px: 525.0,
            landmark_count: 4096,
            spawn_depth_min: 0.5,
            spawn_depth_max: 5.0,
            velocity_std_trans: 0.3,
            velocity_std_rot: 0.3,
            smoothness: 0.9,
            drift_sigma0: 0.002,
            drift_alpha: 2.0,
            drift_beta: 0.5,
            kappa_t: 2.0,
            kappa_r: 1.0,
            n_min: 10,
            init_frames: 5,
            reloc_max_frames: 20,
            reloc_success_prob: 0.3,
            max_obs_keypoints: 64,
            reward: RewardConfig::default(),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.episode_length <= self.init_frames + self.reward.window_size {
            return fail(format!(
                "episode_length {} must exceed init_frames {} + window_size {}",
                self.episode_length, self.init_frames, self.reward.window_size
            ));
        }
        if self.image_width == 0 || self.image_height == 0 || self.focal_px <= 0.0 {
            return fail("image dimensions and focal length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return fail(format!("smoothness {} must be in [0, 1)", self.smoothness));
        }
        if self.velocity_std_trans < 0.0 || self.velocity_std_rot < 0.0 {
            return fail("velocity stds must be non-negative".into());
        }
        if self.drift_sigma0 < 0.0 || self.drift_alpha < 0.0 {
            return fail("drift parameters must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.drift_beta) {
            return fail(format!("drift_beta {} must be in [0, 1]", self.drift_beta));
        }
        if self.kappa_t < 0.0 || self.kappa_r < 0.0 {
            return fail("survival parameters must be non-negative".into());
        }
        if self.n_min == 0 || self.init_frames == 0 || self.reloc_max_frames == 0 {
            return fail("n_min, init_frames, reloc_max_frames must be positive".into());
        }
        if !(self.reloc_success_prob > 0.0 && self.reloc_success_prob <= 1.0) {
            return fail("reloc_success_prob must be in (0, 1]".into());
        }
        if !(0.0 < self.spawn_depth_min && self.spawn_depth_min < self.spawn_depth_max) {
            return fail("spawn depth range must be positive and ordered".into());
        }
        if self.grid_capacity(*GRID_SIZES.last().unwrap()) < self.n_min {
            return fail("coarsest grid capacity is below n_min".into());
        }
        if self.max_obs_keypoints == 0 {
            return fail("max_obs_keypoints must be positive".into());
        }
        self.reward.validate().map_err(EnvError::InvalidConfig)
    }

    /// Number of bucketing cells for grid size `g`.
    pub fn grid_capacity(&self, g: u32) -> usize {
        (self.image_width.div_ceil(g) * self.image_height.div_ceil(g)) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Landmark {
    id: u64,
    position: Vector3<f64>,
    quality: f64,
}

/// One step of the exportable episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Frame index within the episode (initialization frames included).
    pub step: usize,
    pub timestamp: f64,
    pub mode: VOMode,
    pub valid: bool,
    pub keyframe: bool,
    pub grid_size: u32,
    pub n_tracked: usize,
    pub e_tran: Option<f64>,
    pub reward: f64,
    pub ground_truth: Pose,
    pub estimated: Option<Pose>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimEnv {
    config: EnvConfig,
    rng: ChaCha8Rng,
    /// Precomputed ground-truth poses for the whole episode plus the
    /// privileged lookahead horizon.
    gt: Vec<Pose>,
    /// Index into `gt` of the current frame.
    frame: usize,
    /// Agent steps taken this episode.
    episode_step: usize,
    mode: VOMode,
    done: bool,
    drift: Vector3<f64>,
    /// Ground-truth distance traveled since the last keyframe.
    d_kf: f64,
    landmarks: Vec<Landmark>,
    next_landmark_id: u64,
    grid_size: u32,
    frames_since_keyframe: usize,
    prev_keyframe_action: bool,
    keyframe_count: usize,
    /// Relocalization frames consumed since the last map update.
    reloc_frames_used: usize,
    /// Estimated poses of the most recent keyframes (newest at the back).
    keyframes_est: VecDeque<Pose>,
    /// Reward window: matched (estimated, ground-truth) pose pairs.
    window_est: VecDeque<Pose>,
    window_gt: VecDeque<Pose>,
    est_pose: Pose,
    last_e_tran: Option<f64>,
    log: Vec<LogRow>,
}

impl SimEnv {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let seed = config.seed;
        let mut env = Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gt: Vec::new(),
            frame: 0,
            episode_step: 0,
            mode: VOMode::Lost,
            done: true,
            drift: Vector3::zeros(),
            d_kf: 0.0,
            landmarks: Vec::new(),
            next_landmark_id: 0,
            grid_size: GRID_SIZES[RESET_GRID_INDEX],
            frames_since_keyframe: 0,
            prev_keyframe_action: false,
            keyframe_count: 0,
            reloc_frames_used: 0,
            keyframes_est: VecDeque::new(),
            window_est: VecDeque::new(),
            window_gt: VecDeque::new(),
            est_pose: Pose::identity(),
            last_e_tran: None,
            log: Vec::new(),
        };
        env.reset_with(seed);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn mode(&self) -> VOMode {
        self.mode
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframe_count
    }

    pub fn n_tracked(&self) -> usize {
        if self.mode == VOMode::Tracking {
            self.landmarks.len()
        } else {
            0
        }
    }

    pub fn episode_log(&self) -> &[LogRow] {
        &self.log
    }

    /// Ground-truth trajectory restricted to the frames visited so far.
    pub fn ground_truth_so_far(&self) -> &[Pose] {
        &self.gt[..=self.frame]
    }

    fn timestamp(frame: usize) -> f64 {
        frame as f64 / FRAME_RATE_HZ
    }

    fn generate_trajectory(&mut self) {
        let total = self.config.init_frames + self.config.episode_length + FUTURE_HORIZON + 1;
        let dt = 1.0 / FRAME_RATE_HZ;
        let rho = self.config.smoothness;
        let noise_gain = (1.0 - rho * rho).sqrt();
        let (sv, sw) = (self.config.velocity_std_trans, self.config.velocity_std_rot);

        let normal3 = |std: f64, rng: &mut ChaCha8Rng| {
            Vector3::new(
                std * rng.sample::<f64, _>(StandardNormal),
                std * rng.sample::<f64, _>(StandardNormal),
                std * rng.sample::<f64, _>(StandardNormal),
            )
        };

        let mut v = normal3(sv, &mut self.rng);
        let mut w = normal3(sw, &mut self.rng);
        let mut pose = Pose::identity();
        self.gt = Vec::with_capacity(total);
        self.gt.push(pose);
        for i in 1..total {
            v = rho * v + normal3(sv * noise_gain, &mut self.rng);
            w = rho * w + normal3(sw * noise_gain, &mut self.rng);
            let translation = pose.translation + pose.rotation * (v * dt);
            let rotation = pose.rotation * UnitQuaternion::from_scaled_axis(w * dt);
            pose = Pose::new(Self::timestamp(i), translation, rotation);
            self.gt.push(pose);
        }
    }

    fn reset_with(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.generate_trajectory();
        self.frame = 0;
        self.episode_step = 0;
        self.mode = VOMode::Initializing;
        self.done = false;
        self.drift = Vector3::zeros();
        self.d_kf = 0.0;
        self.landmarks.clear();
        self.next_landmark_id = 0;
        self.grid_size = GRID_SIZES[RESET_GRID_INDEX];
        self.frames_since_keyframe = 0;
        self.prev_keyframe_action = false;
        self.keyframe_count = 0;
        self.reloc_frames_used = 0;
        self.keyframes_est.clear();
        self.window_est.clear();
        self.window_gt.clear();
        self.last_e_tran = None;
        self.log.clear();

        // Initialization: the estimator outputs ground truth while the map
        // is bootstrapped, ending with a forced keyframe.
        for f in 0..self.config.init_frames {
            self.frame = f;
            self.est_pose = self.gt[f];
            self.push_window(self.gt[f], self.gt[f]);
            self.log.push(LogRow {
                step: f,
                timestamp: self.gt[f].timestamp,
                mode: VOMode::Initializing,
                valid: false,
                keyframe: f + 1 == self.config.init_frames,
                grid_size: self.grid_size,
                n_tracked: 0,
                e_tran: None,
                reward: 0.0,
                ground_truth: self.gt[f],
                estimated: Some(self.gt[f]),
            });
        }
        self.spawn_landmarks();
        self.keyframe_count = 1;
        self.keyframes_est.push_back(self.est_pose);
        self.prev_keyframe_action = true;
        self.mode = VOMode::Tracking;
    }

    fn push_window(&mut self, est: Pose, gt: Pose) {
        self.window_est.push_back(est);
        self.window_gt.push_back(gt);
        while self.window_est.len() > self.config.reward.window_size {
            self.window_est.pop_front();
            self.window_gt.pop_front();
        }
    }

    /// Camera-frame projection of a world point against a ground-truth pose.
    /// Returns normalized (u, v) in [0,1) and depth, or None if outside the
    /// frustum.
    fn project(&self, cam: &Pose, point: &Vector3<f64>) -> Option<[f64; 3]> {
        let local = cam.rotation.inverse() * (point - cam.translation);
        if local.z < Z_NEAR {
            return None;
        }
        let (w, h) = (self.config.image_width as f64, self.config.image_height as f64);
        let u_px = self.config.focal_px * local.x / local.z + 0.5 * w;
        let v_px = self.config.focal_px * local.y / local.z + 0.5 * h;
        if u_px < 0.0 || u_px >= w || v_px < 0.0 || v_px >= h {
            return None;
        }
        Some([u_px / w, v_px / h, local.z])
    }

    fn cell_of(&self, uvd: &[f64; 3]) -> (u32, u32) {
        let g = self.grid_size as f64;
        let cx = (uvd[0] * self.config.image_width as f64 / g) as u32;
        let cy = (uvd[1] * self.config.image_height as f64 / g) as u32;
        (cx, cy)
    }

    /// Per-landmark survival lottery for one frame of motion.
    fn survive_keypoints(&mut self, dtrans: f64, dang: f64) {
        let motion_factor = (-(self.config.kappa_t * dtrans + self.config.kappa_r * dang)).exp();
        let rng = &mut self.rng;
        self.landmarks
            .retain(|lm| rng.gen::<f64>() < lm.quality * motion_factor);
    }

    /// Drops landmarks outside the current frustum and enforces at most one
    /// landmark per active-grid cell (highest quality wins, lowest id on
    /// ties).
    fn cull_fov_and_cells(&mut self) {
        let cam = self.gt[self.frame];
        let mut best: HashMap<(u32, u32), (usize, f64, u64)> = HashMap::new();
        let mut keep = vec![false; self.landmarks.len()];
        for (idx, lm) in self.landmarks.iter().enumerate() {
            let Some(uvd) = self.project(&cam, &lm.position) else {
                continue;
            };
            let cell = self.cell_of(&uvd);
            match best.get(&cell) {
                Some(&(_, q, id)) if (q, std::cmp::Reverse(id)) >= (lm.quality, std::cmp::Reverse(lm.id)) => {}
                _ => {
                    best.insert(cell, (idx, lm.quality, lm.id));
                }
            }
        }
        for (_, (idx, _, _)) in best {
            keep[idx] = true;
        }
        let mut i = 0;
        self.landmarks.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }

    /// Triangulates one fresh landmark in every empty cell of the active
    /// grid, up to the live-landmark cap.
    fn spawn_landmarks(&mut self) {
        let cam = self.gt[self.frame];
        let g = self.grid_size;
        let (w, h) = (self.config.image_width, self.config.image_height);
        let (nx, ny) = (w.div_ceil(g), h.div_ceil(g));

        let mut occupied = vec![false; (nx * ny) as usize];
        for lm in &self.landmarks {
            if let Some(uvd) = self.project(&cam, &lm.position) {
                let (cx, cy) = self.cell_of(&uvd);
                occupied[(cy * nx + cx) as usize] = true;
            }
        }

        let (fw, fh) = (w as f64, h as f64);
        for cy in 0..ny {
            for cx in 0..nx {
                if occupied[(cy * nx + cx) as usize] {
                    continue;
                }
                if self.landmarks.len() >= self.config.landmark_count {
                    return;
                }
                let x0 = (cx * g) as f64;
                let y0 = (cy * g) as f64;
                let x1 = ((cx + 1) * g) as f64;
                let y1 = ((cy + 1) * g) as f64;
                let u_px = self.rng.gen_range(x0..x1.min(fw));
                let v_px = self.rng.gen_range(y0..y1.min(fh));
                let depth = self
                    .rng
                    .gen_range(self.config.spawn_depth_min..self.config.spawn_depth_max);
                // Quality in (0.2, 1.0].
                let quality = 1.0 - self.rng.gen_range(0.0..0.8);
                let dir = Vector3::new(
                    (u_px - 0.5 * fw) / self.config.focal_px,
                    (v_px - 0.5 * fh) / self.config.focal_px,
                    1.0,
                );
                let position = cam.rotation * (dir * depth) + cam.translation;
                self.landmarks.push(Landmark {
                    id: self.next_landmark_id,
                    position,
                    quality,
                });
                self.next_landmark_id += 1;
            }
        }
    }

    /// Map update at a keyframe: spawn, reset drift growth, damp drift,
    /// restore the relocalization budget.
    fn register_keyframe(&mut self) {
        self.spawn_landmarks();
        self.d_kf = 0.0;
        self.frames_since_keyframe = 0;
        self.drift *= self.config.drift_beta;
        self.keyframe_count += 1;
        self.reloc_frames_used = 0;
    }

    fn current_e_tran(&self) -> Option<Result<f64, ()>> {
        if self.window_est.len() < self.config.reward.window_size {
            return None;
        }
        let window = PoseWindow::new(
            self.window_est.iter().copied().collect(),
            self.window_gt.iter().copied().collect(),
            self.config.reward.window_size,
        )
        .expect("window deque sized by construction");
        Some(sliding_window_error(&window, &self.config.reward).map_err(|_| ()))
    }

    fn observation_now(&self) -> Observation {
        let mut keypoints = Vec::new();
        if self.mode == VOMode::Tracking {
            let cam = self.gt[self.frame];
            let mut visible: Vec<(f64, u64, [f64; 3])> = self
                .landmarks
                .iter()
                .filter_map(|lm| {
                    self.project(&cam, &lm.position)
                        .map(|uvd| (lm.quality, lm.id, uvd))
                })
                .collect();
            if visible.len() > self.config.max_obs_keypoints {
                visible.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                });
                visible.truncate(self.config.max_obs_keypoints);
            }
            visible.sort_by_key(|&(_, id, _)| id);
            keypoints = visible.into_iter().map(|(_, _, uvd)| uvd).collect();
        }

        let newest = *self.keyframes_est.back().expect("keyframe exists post-reset");
        let oldest = *self.keyframes_est.front().expect("keyframe exists post-reset");
        let rel_new = newest.relative(&self.est_pose);
        let rel_old = oldest.relative(&self.est_pose);
        let n = self.n_tracked();
        let capacity = self.config.grid_capacity(GRID_SIZES[0]) as f64;

        let map_stats: [f64; MAP_STATS_DIM] = [
            rel_new.translation.x,
            rel_new.translation.y,
            rel_new.translation.z,
            rel_new.rotation_angle(),
            rel_old.translation.x,
            rel_old.translation.y,
            rel_old.translation.z,
            rel_old.rotation_angle(),
            n as f64 / capacity,
            self.frames_since_keyframe as f64 / FRAME_RATE_HZ,
            (self.grid_size as f64 - 30.0) / 10.0,
            f64::from(self.prev_keyframe_action),
        ];

        Observation {
            keypoints,
            map_stats,
        }
    }
}

impl Environment for SimEnv {
    fn reset(&mut self, seed: u64) -> Observation {
        self.reset_with(seed);
        self.observation_now()
    }

    fn observation(&self) -> Observation {
        self.observation_now()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::SteppedAfterDone);
        }
        let mode_before = self.mode;
        let valid = mode_before == VOMode::Tracking;
        self.frame += 1;
        self.episode_step += 1;
        let gt_prev = self.gt[self.frame - 1];
        let gt_cur = self.gt[self.frame];
        let dtrans = (gt_cur.translation - gt_prev.translation).norm();
        let dang = gt_prev.relative(&gt_cur).rotation_angle();

        let lambda2 = self.config.reward.lambda2;
        let mut keyframe_executed = false;
        let mut e_tran_step = None;
        let reward_value;

        match mode_before {
            VOMode::Tracking => {
                self.grid_size = action.grid_size();
                self.d_kf += dtrans;
                self.survive_keypoints(dtrans, dang);
                self.cull_fov_and_cells();
                if action.keyframe {
                    keyframe_executed = true;
                    self.register_keyframe();
                } else {
                    self.frames_since_keyframe += 1;
                }

                if self.landmarks.len() < self.config.n_min {
                    // Tracking failure: no estimate this frame, the reward
                    // window restarts once tracking resumes.
                    self.mode = VOMode::Relocalizing;
                    self.window_est.clear();
                    self.window_gt.clear();
                    self.last_e_tran = None;
                    reward_value = self.config.reward.invalid_state_reward()
                        - lambda2 * f64::from(keyframe_executed);
                } else {
                    let sigma = self.config.drift_sigma0 * (1.0 + self.config.drift_alpha * self.d_kf)
                        / (self.landmarks.len().max(1) as f64).sqrt();
                    self.drift += Vector3::new(
                        sigma * self.rng.sample::<f64, _>(StandardNormal),
                        sigma * self.rng.sample::<f64, _>(StandardNormal),
                        sigma * self.rng.sample::<f64, _>(StandardNormal),
                    );
                    self.est_pose = Pose::new(
                        gt_cur.timestamp,
                        gt_cur.translation + self.drift,
                        gt_cur.rotation,
                    );
                    if keyframe_executed {
                        self.keyframes_est.push_back(self.est_pose);
                        while self.keyframes_est.len() > KEYFRAME_WINDOW {
                            self.keyframes_est.pop_front();
                        }
                    }
                    self.push_window(self.est_pose, gt_cur);
                    match self.current_e_tran() {
                        Some(Ok(e)) => {
                            e_tran_step = Some(e);
                            self.last_e_tran = Some(e);
                            reward_value = reward(e, keyframe_executed, &self.config.reward);
                        }
                        Some(Err(())) => {
                            // Degenerate window geometry: treat the
                            // measurement as invalid, keep the action charge.
                            self.last_e_tran = None;
                            reward_value = self.config.reward.invalid_state_reward()
                                - lambda2 * f64::from(keyframe_executed);
                        }
                        None => {
                            // Under-filled window right after (re)initialization:
                            // no position term yet.
                            self.last_e_tran = None;
                            reward_value = -lambda2 * f64::from(keyframe_executed);
                        }
                    }
                }
            }
            VOMode::Relocalizing => {
                // The agent's action is ignored while relocalizing.
                self.reloc_frames_used += 1;
                if self.reloc_frames_used >= self.config.reloc_max_frames {
                    self.mode = VOMode::Lost;
                    self.done = true;
                } else if self.rng.gen::<f64>() < self.config.reloc_success_prob {
                    // Re-anchor on the drifted estimate and resume with the
                    // stale map.
                    self.mode = VOMode::Tracking;
                    self.est_pose = Pose::new(
                        gt_cur.timestamp,
                        gt_cur.translation + self.drift,
                        gt_cur.rotation,
                    );
                    self.cull_fov_and_cells();
                    self.push_window(self.est_pose, gt_cur);
                }
                self.last_e_tran = None;
                reward_value = self.config.reward.invalid_state_reward();
            }
            VOMode::Initializing | VOMode::Lost => {
                unreachable!("agent never steps from {:?}", mode_before)
            }
        }

        self.prev_keyframe_action = keyframe_executed;
        if self.episode_step >= self.config.episode_length {
            self.done = true;
        }

        let estimated = match self.mode {
            VOMode::Tracking => Some(self.est_pose),
            _ => None,
        };
        self.log.push(LogRow {
            step: self.frame,
            timestamp: gt_cur.timestamp,
            mode: self.mode,
            valid,
            keyframe: keyframe_executed,
            grid_size: self.grid_size,
            n_tracked: self.n_tracked(),
            e_tran: e_tran_step,
            reward: reward_value,
            ground_truth: gt_cur,
            estimated,
        });

        Ok(StepResult {
            observation: self.observation_now(),
            privileged_observation: self.privileged_observation(),
            reward: reward_value,
            done: self.done,
            valid,
            info: StepInfo {
                ground_truth: gt_cur,
                estimated,
                mode: self.mode,
                keyframe_count: self.keyframe_count,
                e_tran: e_tran_step,
                n_tracked: self.n_tracked(),
            },
        })
    }

    fn privileged_observation(&self) -> PrivilegedObservation {
        let mut future_motion = [0.0; 2 * FUTURE_HORIZON];
        let remaining = self.config.episode_length - self.episode_step;
        for k in 1..=FUTURE_HORIZON.min(remaining) {
            let a = &self.gt[self.frame + k - 1];
            let b = &self.gt[self.frame + k];
            future_motion[2 * (k - 1)] = (b.translation - a.translation).norm();
            future_motion[2 * (k - 1) + 1] = a.relative(b).rotation_angle();
        }
        PrivilegedObservation {
            observation: self.observation_now(),
            e_tran: self.last_e_tran.unwrap_or(0.0),
            future_motion,
        }
    }
}
