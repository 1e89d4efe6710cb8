//! The four maneuver MDPs: command encoding, world-frame target realization,
//! the body-frame relative state, observations, progress tracking,
//! termination and success predicates.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{attitude_distance, rot_z, Action, Mat3, MavState, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("episode log is incomplete")]
    IncompleteLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Hover,
    Rotate,
    Flip,
    Roll,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Hover, TaskId::Rotate, TaskId::Flip, TaskId::Roll];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Hover => "hover",
            TaskId::Rotate => "rotate",
            TaskId::Flip => "flip",
            TaskId::Roll => "roll",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hover" => Ok(TaskId::Hover),
            "rotate" => Ok(TaskId::Rotate),
            "flip" => Ok(TaskId::Flip),
            "roll" => Ok(TaskId::Roll),
            _ => Err(TaskError::UnknownTask(s.to_string())),
        }
    }
}

/// Maneuver type plus its scalar attribute: Rotate tangential speed (m/s),
/// Flip pitch rate (rad/s), Roll signed number of turns, Hover unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub task: TaskId,
    pub param: f64,
}

pub const COMMAND_DIM: usize = 5;

impl Command {
    pub fn new(task: TaskId, param: f64) -> Self {
        let param = if task == TaskId::Hover { 0.0 } else { param };
        Self { task, param }
    }

    pub fn hover() -> Self {
        Self::new(TaskId::Hover, 0.0)
    }

    /// One-hot task followed by the parameter.
    pub fn encode(&self) -> [f64; COMMAND_DIM] {
        let mut e = [0.0; COMMAND_DIM];
        e[self.task.index()] = 1.0;
        e[4] = self.param;
        e
    }
}

/// Desired quantities in the world frame. `omega_des` is a world-frame
/// angular velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTargets {
    pub p_des: Vec3,
    pub v_des: Vec3,
    pub omega_des: Vec3,
    pub psi_des: f64,
}

/// Where a maneuver is pinned in the world: waypoint (Hover, Roll), orbit
/// center (Rotate) or loop center (Flip), plus the maneuver-plane heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub point: Vec3,
    pub yaw: f64,
}

impl Anchor {
    /// Anchor placing the vehicle at the start of `cmd` from its current pose.
    pub fn from_pose(cmd: &Command, p: &Vec3, yaw: f64, cfg: &TaskConfig) -> Self {
        let point = match cmd.task {
            TaskId::Hover | TaskId::Roll => *p,
            TaskId::Rotate => p + rot_z(yaw) * Vec3::new(cfg.rotate_radius, 0.0, 0.0),
            TaskId::Flip => p + Vec3::new(0.0, 0.0, cfg.flip_radius),
        };
        Self { point, yaw: wrap_angle(yaw) }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub position: f64,
    pub velocity: f64,
    pub body_rate: f64,
    /// Attitude perturbation std, degrees.
    pub attitude_deg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { enabled: true, position: 0.01, velocity: 0.05, body_rate: 0.1, attitude_deg: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessThresholds {
    pub hover_position: f64,
    pub hover_attitude_deg: f64,
    pub flip_pitch: f64,
    pub roll_error: f64,
    pub rotate_radius_error: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            hover_position: 0.1,
            hover_attitude_deg: 10.0,
            flip_pitch: PI,
            roll_error: 0.26,
            rotate_radius_error: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub rotate_radius: f64,
    pub flip_radius: f64,
    /// Roll rate while turns remain, rad/s.
    pub roll_rate: f64,
    /// Policy steps per episode.
    pub horizon: usize,
    pub z_min: f64,
    pub noise: NoiseConfig,
    pub success: SuccessThresholds,
    /// Training command ranges.
    pub flip_rate_range: [f64; 2],
    pub roll_max_turns: u32,
    pub rotate_max_speed: f64,
    /// Tasks sampled during training.
    pub train_tasks: Vec<TaskId>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            rotate_radius: 1.2,
            flip_radius: 0.5,
            roll_rate: 6.0,
            horizon: 500,
            z_min: 0.1,
            noise: NoiseConfig::default(),
            success: SuccessThresholds::default(),
            flip_rate_range: [4.0, 6.0],
            roll_max_turns: 3,
            rotate_max_speed: 4.0,
            train_tasks: TaskId::ALL.to_vec(),
        }
    }
}

impl TaskConfig {
    /// Samples a training command for `task`.
    pub fn sample_command<R: Rng + ?Sized>(&self, rng: &mut R, task: TaskId) -> Command {
        match task {
            TaskId::Hover => Command::hover(),
            TaskId::Rotate => {
                let v = self.rotate_max_speed;
                Command::new(task, rng.random_range(-v..=v))
            }
            TaskId::Flip => {
                let [lo, hi] = self.flip_rate_range;
                Command::new(task, rng.random_range(lo..=hi))
            }
            TaskId::Roll => {
                let n = rng.random_range(1..=self.roll_max_turns.max(1)) as f64;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Command::new(task, sign * n)
            }
        }
    }
}

/// Maneuver-frame heading used by Rotate: body x toward the orbit center.
fn rotate_geometry(p: &Vec3, anchor: &Anchor) -> (Vec3, f64) {
    let mut d = p - anchor.point;
    d.z = 0.0;
    let u = if d.norm() > 1e-9 {
        d.normalize()
    } else {
        -(rot_z(anchor.yaw) * Vec3::x())
    };
    let psi = wrap_angle((-u.y).atan2(-u.x));
    (u, psi)
}

/// World-frame targets for the active command at the current state.
pub fn task_targets(
    cmd: &Command,
    anchor: &Anchor,
    state: &MavState,
    progress: &TaskProgress,
    cfg: &TaskConfig,
) -> TaskTargets {
    match cmd.task {
        TaskId::Hover => TaskTargets {
            p_des: anchor.point,
            v_des: Vec3::zeros(),
            omega_des: Vec3::zeros(),
            psi_des: wrap_angle(anchor.yaw),
        },
        TaskId::Rotate => {
            // closest point of the orbit circle, tangential velocity, yaw
            // rate keeping the body x-axis on the center
            let r = cfg.rotate_radius;
            let (u, psi) = rotate_geometry(&state.p, anchor);
            let c = anchor.point;
            let tangent = rot_z(psi) * Vec3::y();
            TaskTargets {
                p_des: Vec3::new(c.x + r * u.x, c.y + r * u.y, c.z),
                v_des: tangent * cmd.param,
                omega_des: Vec3::new(0.0, 0.0, -cmd.param / r),
                psi_des: psi,
            }
        }
        TaskId::Flip => {
            // vertical loop of radius r around the anchor, in the plane
            // spanned by the anchor heading and world z
            let r = cfg.flip_radius;
            let rz = rot_z(anchor.yaw);
            let y_m = rz * Vec3::y();
            let mut d = state.p - anchor.point;
            d -= y_m * y_m.dot(&d);
            let u = if d.norm() > 1e-9 { d.normalize() } else { -Vec3::z() };
            let w = cmd.param;
            TaskTargets {
                p_des: anchor.point + u * r,
                v_des: u.cross(&y_m) * (w * r),
                omega_des: y_m * w,
                psi_des: wrap_angle(anchor.yaw),
            }
        }
        TaskId::Roll => {
            let turns_done = progress.roll.abs() >= TAU * cmd.param.abs();
            let rate = if turns_done { 0.0 } else { cfg.roll_rate * cmd.param.signum() };
            TaskTargets {
                p_des: anchor.point,
                v_des: Vec3::zeros(),
                omega_des: rot_z(anchor.yaw) * Vec3::new(rate, 0.0, 0.0),
                psi_des: wrap_angle(anchor.yaw),
            }
        }
    }
}

pub const REL_STATE_DIM: usize = 18;

/// Body-frame relative state.
#[derive(Debug, Clone, PartialEq)]
pub struct RelState {
    pub p: Vec3,
    pub v: Vec3,
    pub omega: Vec3,
    pub r_rel: Mat3,
}

impl RelState {
    /// `[p, v, ω, R_rel column 0, column 1, column 2]`.
    pub fn to_array(&self) -> [f64; REL_STATE_DIM] {
        let mut out = [0.0; REL_STATE_DIM];
        out[0..3].copy_from_slice(self.p.as_slice());
        out[3..6].copy_from_slice(self.v.as_slice());
        out[6..9].copy_from_slice(self.omega.as_slice());
        // nalgebra storage is column-major
        out[9..18].copy_from_slice(self.r_rel.as_slice());
        out
    }

    pub fn from_array(a: &[f64; REL_STATE_DIM]) -> Self {
        Self {
            p: Vec3::from_column_slice(&a[0..3]),
            v: Vec3::from_column_slice(&a[3..6]),
            omega: Vec3::from_column_slice(&a[6..9]),
            r_rel: Mat3::from_column_slice(&a[9..18]),
        }
    }
}

pub fn rel_state(s: &MavState, t: &TaskTargets) -> RelState {
    let rt = s.r.transpose();
    RelState {
        p: rt * (t.p_des - s.p),
        v: rt * (t.v_des - s.v),
        // ω_des is world-frame, the vehicle rate is body-frame
        omega: rt * t.omega_des - s.omega,
        r_rel: rt * rot_z(t.psi_des),
    }
}

pub const OBS_DIM: usize = REL_STATE_DIM + 4 + COMMAND_DIM;

/// `[rel (18), previous action (4), command (5)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn rel(&self) -> &[f64] {
        &self.0[0..REL_STATE_DIM]
    }

    /// Relative state plus previous action: the state features seen by FiLM.
    pub fn features(&self) -> &[f64] {
        &self.0[0..REL_STATE_DIM + 4]
    }

    pub fn command(&self) -> &[f64] {
        &self.0[REL_STATE_DIM + 4..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Concatenates the observation. `noise` perturbs the relative state only;
/// pass `None` for the noise-free critic view.
pub fn build_observation<R: Rng + ?Sized>(
    rel: &RelState,
    prev_action: &Action,
    hover_thrust: f64,
    cmd: &Command,
    noise: Option<(&NoiseConfig, &mut R)>,
) -> Observation {
    let mut rel = rel.clone();
    if let Some((cfg, rng)) = noise {
        if cfg.enabled {
            let mut gauss = |sigma: f64| sigma * rng.sample::<f64, _>(StandardNormal);
            rel.p += Vec3::new(gauss(cfg.position), gauss(cfg.position), gauss(cfg.position));
            rel.v += Vec3::new(gauss(cfg.velocity), gauss(cfg.velocity), gauss(cfg.velocity));
            rel.omega += Vec3::new(gauss(cfg.body_rate), gauss(cfg.body_rate), gauss(cfg.body_rate));
            let s = cfg.attitude_deg.to_radians();
            let xi = Vec3::new(gauss(s), gauss(s), gauss(s));
            // measured attitude R·exp(ξ) gives R_rel' = exp(−ξ)·R_rel
            rel.r_rel = Rotation3::new(-xi).matrix() * rel.r_rel;
        }
    }
    let mut o = [0.0; OBS_DIM];
    o[..REL_STATE_DIM].copy_from_slice(&rel.to_array());
    o[REL_STATE_DIM] = prev_action.thrust / hover_thrust;
    o[REL_STATE_DIM + 1..REL_STATE_DIM + 4].copy_from_slice(prev_action.rates.as_slice());
    o[REL_STATE_DIM + 4..].copy_from_slice(&cmd.encode());
    Observation(o)
}

/// Running per-episode accumulators for the active command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskProgress {
    /// Unwrapped body pitch angle integrated from ω_y, rad.
    pub pitch: f64,
    /// Unwrapped body roll angle integrated from ω_x, rad.
    pub roll: f64,
    /// Sum of |horizontal distance to the orbit center − r|.
    pub radius_error_sum: f64,
    /// Orbit angle swept around the Rotate center, rad.
    pub orbit_angle: f64,
    pub steps: usize,
}

impl TaskProgress {
    pub fn mean_radius_error(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.radius_error_sum / self.steps as f64
        }
    }

    /// Accumulates one policy period from `prev` to `s` (trapezoidal in the
    /// body rates).
    pub fn update(&mut self, prev: &MavState, s: &MavState, cmd: &Command, anchor: &Anchor, cfg: &TaskConfig, dt: f64) {
        self.steps += 1;
        self.pitch += 0.5 * (prev.omega.y + s.omega.y) * dt;
        self.roll += 0.5 * (prev.omega.x + s.omega.x) * dt;
        if cmd.task == TaskId::Rotate {
            let d = s.p - anchor.point;
            let d0 = prev.p - anchor.point;
            self.radius_error_sum += (d.x.hypot(d.y) - cfg.rotate_radius).abs();
            let a0 = d0.y.atan2(d0.x);
            let a1 = d.y.atan2(d.x);
            let mut da = a1 - a0;
            if da > PI {
                da -= TAU;
            } else if da < -PI {
                da += TAU;
            }
            self.orbit_angle += da;
        }
    }

    pub fn roll_error(&self, cmd: &Command) -> f64 {
        (TAU * cmd.param - self.roll).abs()
    }

    /// Completion transition of the active maneuver, if it has one.
    pub fn completed(&self, cmd: &Command, s: &MavState, targets: &TaskTargets, cfg: &TaskConfig) -> bool {
        match cmd.task {
            TaskId::Roll => self.roll.abs() >= TAU * cmd.param.abs(),
            TaskId::Flip => self.pitch * cmd.param.signum() >= cfg.success.flip_pitch,
            TaskId::Rotate => self.orbit_angle.abs() >= TAU,
            TaskId::Hover => hover_within(s, targets, &cfg.success),
        }
    }
}

fn hover_within(s: &MavState, t: &TaskTargets, th: &SuccessThresholds) -> bool {
    (s.p - t.p_des).norm() < th.hover_position
        && attitude_distance(&s.r, &rot_z(t.psi_des)).to_degrees() < th.hover_attitude_deg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Altitude,
    Timeout,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum Status {
    Running,
    Success,
    Failure(FailureReason),
}

impl Status {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Status::Running)
    }
}

/// End-of-episode quantities consumed by the success predicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub finished: bool,
    pub final_position_error: f64,
    pub final_attitude_error: f64,
    pub cumulative_pitch: f64,
    pub final_roll_error: f64,
    pub mean_radius_error: f64,
}

impl EpisodeSummary {
    pub fn capture(s: &MavState, targets: &TaskTargets, progress: &TaskProgress, cmd: &Command, finished: bool) -> Self {
        Self {
            finished,
            final_position_error: (s.p - targets.p_des).norm(),
            final_attitude_error: attitude_distance(&s.r, &rot_z(targets.psi_des)),
            cumulative_pitch: progress.pitch,
            final_roll_error: progress.roll_error(cmd),
            mean_radius_error: progress.mean_radius_error(),
        }
    }
}

pub fn success(log: &EpisodeSummary, cmd: &Command, th: &SuccessThresholds) -> Result<bool, TaskError> {
    if !log.finished {
        return Err(TaskError::IncompleteLog);
    }
    Ok(success_now(log, cmd, th))
}

fn success_now(log: &EpisodeSummary, cmd: &Command, th: &SuccessThresholds) -> bool {
    match cmd.task {
        TaskId::Hover => {
            log.final_position_error < th.hover_position
                && log.final_attitude_error.to_degrees() < th.hover_attitude_deg
        }
        TaskId::Flip => log.cumulative_pitch * cmd.param.signum() >= th.flip_pitch,
        TaskId::Roll => log.final_roll_error < th.roll_error,
        TaskId::Rotate => log.mean_radius_error < th.rotate_radius_error,
    }
}

/// Episode status after the latest step.
pub fn check_termination(
    s: &MavState,
    targets: &TaskTargets,
    progress: &TaskProgress,
    cmd: &Command,
    cfg: &TaskConfig,
) -> Status {
    if !s.is_finite() {
        return Status::Failure(FailureReason::Diverged);
    }
    if s.p.z < cfg.z_min {
        return Status::Failure(FailureReason::Altitude);
    }
    if cmd.task == TaskId::Roll && progress.roll.abs() >= TAU * cmd.param.abs() {
        return Status::Success;
    }
    if progress.steps >= cfg.horizon {
        let summary = EpisodeSummary::capture(s, targets, progress, cmd, true);
        return if success_now(&summary, cmd, &cfg.success) {
            Status::Success
        } else {
            Status::Failure(FailureReason::Timeout)
        };
    }
    Status::Running
}

/// Random rotation with axis uniform on the sphere and the given angle.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, angle: f64) -> Mat3 {
    let axis = Vec3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

/// Gaussian sample helper used by tests and samplers.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MavParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    /// State exactly satisfying the targets: rel components vanish.
    fn on_target(t: &TaskTargets) -> MavState {
        let r = rot_z(t.psi_des);
        MavState {
            p: t.p_des,
            v: t.v_des,
            r,
            omega: r.transpose() * t.omega_des,
            motor_f: [1.0; 4],
        }
    }

    #[test]
    fn hover_targets_are_static() {
        let cfg = TaskConfig::default();
        let anchor = Anchor { point: Vec3::new(1.0, 2.0, 3.0), yaw: 0.4 };
        let s = MavState::hover(Vec3::zeros(), 0.0, &MavParams::default());
        let t = task_targets(&Command::hover(), &anchor, &s, &TaskProgress::default(), &cfg);
        assert_eq!(t.v_des, Vec3::zeros());
        assert_eq!(t.omega_des, Vec3::zeros());
        assert_eq!(t.p_des, anchor.point);
        assert_eq!(t.psi_des, 0.4);
    }

    #[test]
    fn flip_invariants_in_maneuver_frame() {
        let cfg = TaskConfig { flip_radius: 0.5, ..TaskConfig::default() };
        let params = MavParams::default();
        let start = MavState::hover(Vec3::new(2.0, -1.0, 2.0), 0.9, &params);
        let cmd = Command::new(TaskId::Flip, 5.0);
        let anchor = Anchor::from_pose(&cmd, &start.p, 0.9, &cfg);
        let t = task_targets(&cmd, &anchor, &start, &TaskProgress::default(), &cfg);
        let rm = rot_z(t.psi_des).transpose();
        assert!(close(&(rm * t.v_des), &Vec3::new(2.5, 0.0, 0.0), 1e-12));
        assert!(close(&(rm * t.omega_des), &Vec3::new(0.0, 5.0, 0.0), 1e-12));
        assert!(close(&(rm * (anchor.point - t.p_des)), &Vec3::new(0.0, 0.0, 0.5), 1e-12));
    }

    #[test]
    fn rotate_invariants_in_maneuver_frame() {
        let cfg = TaskConfig::default();
        let params = MavParams::default();
        let start = MavState::hover(Vec3::new(0.0, 0.0, 2.0), 2.0, &params);
        let cmd = Command::new(TaskId::Rotate, 3.0);
        let anchor = Anchor::from_pose(&cmd, &start.p, 2.0, &cfg);
        let t = task_targets(&cmd, &anchor, &start, &TaskProgress::default(), &cfg);
        let rm = rot_z(t.psi_des).transpose();
        assert!(close(&(rm * (anchor.point - t.p_des)), &Vec3::new(1.2, 0.0, 0.0), 1e-12));
        assert!(close(&(rm * t.v_des), &Vec3::new(0.0, 3.0, 0.0), 1e-12));
        assert!((t.psi_des - 2.0).abs() < 1e-12);
    }

    #[test]
    fn roll_rate_switches_off_after_turns() {
        let cfg = TaskConfig::default();
        let s = MavState::hover(Vec3::zeros(), 0.0, &MavParams::default());
        let cmd = Command::new(TaskId::Roll, -2.0);
        let anchor = Anchor { point: Vec3::zeros(), yaw: 0.0 };
        let mut prog = TaskProgress::default();
        let t = task_targets(&cmd, &anchor, &s, &prog, &cfg);
        assert!(close(&t.omega_des, &Vec3::new(-6.0, 0.0, 0.0), 1e-12));
        prog.roll = -4.0 * PI;
        let t = task_targets(&cmd, &anchor, &s, &prog, &cfg);
        assert_eq!(t.omega_des, Vec3::zeros());
    }

    #[test]
    fn rel_state_examples() {
        let params = MavParams::default();
        let t = TaskTargets { p_des: Vec3::new(1.0, 0.0, 0.0), v_des: Vec3::zeros(), omega_des: Vec3::zeros(), psi_des: 0.0 };
        let mut s = MavState::hover(Vec3::zeros(), 0.0, &params);
        s.r = rot_z(PI / 2.0);
        let rel = rel_state(&s, &t);
        assert!(close(&rel.p, &Vec3::new(0.0, -1.0, 0.0), 1e-12));

        let on = on_target(&t);
        let rel = rel_state(&on, &t);
        assert_eq!(rel.p, Vec3::zeros());
        assert!((rel.r_rel - Mat3::identity()).amax() < 1e-15);
    }

    #[test]
    fn perfect_tracking_is_a_fixed_point_for_every_task() {
        let cfg = TaskConfig::default();
        let params = MavParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for task in TaskId::ALL {
            for _ in 0..20 {
                let cmd = cfg.sample_command(&mut rng, task);
                let p = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 2.0);
                let yaw = rng.random_range(0.0..TAU);
                let s0 = MavState::hover(p, yaw, &params);
                let anchor = Anchor::from_pose(&cmd, &p, yaw, &cfg);
                let t = task_targets(&cmd, &anchor, &s0, &TaskProgress::default(), &cfg);
                let s = on_target(&t);
                let t2 = task_targets(&cmd, &anchor, &s, &TaskProgress::default(), &cfg);
                let rel = rel_state(&s, &t2);
                assert!(rel.p.amax() < 1e-12, "{task:?} {:?}", rel.p);
                assert!(rel.v.amax() < 1e-12);
                assert!(rel.omega.amax() < 1e-12);
                assert!((rel.r_rel - Mat3::identity()).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn observation_layout() {
        let rel = RelState::from_array(&std::array::from_fn(|i| i as f64));
        let a = Action { thrust: 9.0, rates: Vec3::new(0.1, 0.2, 0.3) };
        let cmd = Command::new(TaskId::Flip, 5.0);
        let o = build_observation::<ChaCha8Rng>(&rel, &a, 4.5, &cmd, None);
        assert_eq!(o.0.len(), 27);
        for i in 0..18 {
            assert_eq!(o.0[i], i as f64);
        }
        assert_eq!(&o.0[18..22], &[2.0, 0.1, 0.2, 0.3]);
        assert_eq!(o.command(), &[0.0, 0.0, 1.0, 0.0, 5.0]);
        assert_eq!(o.command()[..4].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn observation_noise_statistics() {
        let rel = RelState { p: Vec3::zeros(), v: Vec3::zeros(), omega: Vec3::zeros(), r_rel: Mat3::identity() };
        let noise = NoiseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = Action { thrust: 4.5, rates: Vec3::zeros() };
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let o = build_observation(&rel, &a, 4.5, &Command::hover(), Some((&noise, &mut rng)));
            s1 += o.0[0];
            s2 += o.0[0] * o.0[0];
            assert_eq!(o.0[18], 1.0);
        }
        let mean = s1 / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        assert!((sd / noise.position - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn progress_integrates_pitch_rate() {
        let cfg = TaskConfig::default();
        let params = MavParams::default();
        let mut s = MavState::hover(Vec3::zeros(), 0.0, &params);
        s.omega = Vec3::new(0.0, 5.0, 0.0);
        let cmd = Command::new(TaskId::Flip, 5.0);
        let anchor = Anchor { point: Vec3::zeros(), yaw: 0.0 };
        let mut prog = TaskProgress::default();
        for _ in 0..20 {
            prog.update(&s, &s, &cmd, &anchor, &cfg, 0.01);
        }
        assert!((prog.pitch - 1.0).abs() < 0.01);

        let still = MavState::hover(Vec3::zeros(), 0.0, &params);
        let mut p2 = TaskProgress::default();
        p2.update(&still, &still, &cmd, &anchor, &cfg, 0.01);
        assert_eq!(p2, TaskProgress { steps: 1, ..TaskProgress::default() });
    }

    #[test]
    fn termination_rules() {
        let cfg = TaskConfig::default();
        let params = MavParams::default();
        let hover = Command::hover();
        let anchor = Anchor { point: Vec3::new(0.0, 0.0, 1.0), yaw: 0.0 };
        let mut s = MavState::hover(Vec3::new(0.0, 0.0, 0.05), 0.0, &params);
        let prog = TaskProgress::default();
        let t = task_targets(&hover, &anchor, &s, &prog, &cfg);
        assert_eq!(check_termination(&s, &t, &prog, &hover, &cfg), Status::Failure(FailureReason::Altitude));

        s.p.z = 2.0;
        let done = TaskProgress { steps: cfg.horizon, ..TaskProgress::default() };
        assert_eq!(check_termination(&s, &t, &done, &hover, &cfg), Status::Failure(FailureReason::Timeout));
        s.p = anchor.point;
        assert_eq!(check_termination(&s, &t, &done, &hover, &cfg), Status::Success);

        let roll = Command::new(TaskId::Roll, 2.0);
        let rolled = TaskProgress { roll: 4.0 * PI, steps: 10, ..TaskProgress::default() };
        assert_eq!(check_termination(&s, &t, &rolled, &roll, &cfg), Status::Success);
        let partial = TaskProgress { roll: 3.9 * PI, steps: 10, ..TaskProgress::default() };
        assert_eq!(check_termination(&s, &t, &partial, &roll, &cfg), Status::Running);

        s.v.x = f64::NAN;
        assert_eq!(check_termination(&s, &t, &prog, &hover, &cfg), Status::Failure(FailureReason::Diverged));
    }

    fn summary() -> EpisodeSummary {
        EpisodeSummary {
            finished: true,
            final_position_error: 0.0,
            final_attitude_error: 0.0,
            cumulative_pitch: 0.0,
            final_roll_error: 0.0,
            mean_radius_error: 0.0,
        }
    }

    #[test]
    fn success_thresholds() {
        let th = SuccessThresholds::default();
        let hover = Command::hover();
        let log = EpisodeSummary { final_position_error: 0.09, final_attitude_error: 8f64.to_radians(), ..summary() };
        assert!(success(&log, &hover, &th).unwrap());
        let log = EpisodeSummary { final_position_error: 0.1, ..summary() };
        assert!(!success(&log, &hover, &th).unwrap());

        let flip = Command::new(TaskId::Flip, 5.0);
        let log = EpisodeSummary { cumulative_pitch: 3.0, ..summary() };
        assert!(!success(&log, &flip, &th).unwrap());
        let log = EpisodeSummary { cumulative_pitch: PI, ..summary() };
        assert!(success(&log, &flip, &th).unwrap());

        let rotate = Command::new(TaskId::Rotate, 2.0);
        let log = EpisodeSummary { mean_radius_error: 0.15, ..summary() };
        assert!(!success(&log, &rotate, &th).unwrap());

        let roll = Command::new(TaskId::Roll, 1.0);
        let log = EpisodeSummary { final_roll_error: 0.2, ..summary() };
        assert!(success(&log, &roll, &th).unwrap());

        let log = EpisodeSummary { finished: false, ..summary() };
        assert_eq!(success(&log, &roll, &th), Err(TaskError::IncompleteLog));
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(t.name().parse::<TaskId>().unwrap(), t);
        }
        assert!("loop".parse::<TaskId>().is_err());
    }
}
