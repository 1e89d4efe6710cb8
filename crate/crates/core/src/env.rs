//! One simulated vehicle executing one command at a time: reset, observe,
//! step, with reward and termination bookkeeping.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{policy_step, randomize_init, rot_z, Action, InitRanges, MavParams, MavState, Vec3, POLICY_DT};
use crate::rewards::{achieved_attribute, reward, RewardBreakdown};
use crate::symmetry::{act_on_state, GroupElement};
use crate::tasks::{
    build_observation, check_termination, rel_state, task_targets, Anchor, Command, EpisodeSummary, FailureReason,
    Observation, Status, TaskConfig, TaskId, TaskProgress, TaskTargets,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub params: MavParams,
    pub init: InitRanges,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnvConfig {
    pub dynamics: DynamicsConfig,
    pub tasks: TaskConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub reward: RewardBreakdown,
    pub status: Status,
    /// Achieved command attribute used in the reward.
    pub achieved: f64,
    /// The active maneuver reached its completion transition this step.
    pub completed_now: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: Arc<EnvConfig>,
    /// Episode parameters (randomized around the nominal ones).
    pub params: MavParams,
    pub state: MavState,
    pub cmd: Command,
    pub anchor: Anchor,
    pub progress: TaskProgress,
    pub prev_action: Action,
    pub status: Status,
    /// Latched once the active maneuver completes.
    pub completed: bool,
}

impl Env {
    pub fn new(cfg: Arc<EnvConfig>) -> Self {
        let params = cfg.dynamics.params.clone();
        let p = Vec3::from(cfg.dynamics.init.nominal_position);
        let state = MavState::hover(p, 0.0, &params);
        let cmd = Command::hover();
        let anchor = Anchor::from_pose(&cmd, &p, 0.0, &cfg.tasks);
        Self {
            prev_action: Action::hover(&params),
            params,
            state,
            cmd,
            anchor,
            progress: TaskProgress::default(),
            status: Status::Running,
            completed: false,
            cfg,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn task_config(&self) -> &TaskConfig {
        &self.cfg.tasks
    }

    /// Randomized episode start: state and parameters drawn at curriculum
    /// `level`, then the whole scene (vehicle and anchor) rotated by a
    /// uniformly random yaw.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R, level: f64, cmd: Command) {
        let (state, params) = randomize_init(rng, level, &self.cfg.dynamics.init, &self.cfg.dynamics.params);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let g = GroupElement::new(theta);
        let nominal = rot_z(theta) * Vec3::from(self.cfg.dynamics.init.nominal_position);
        let anchor = Anchor::from_pose(&cmd, &nominal, theta, &self.cfg.tasks);
        self.reset_to(act_on_state(g, &state), params, cmd, anchor);
    }

    pub fn reset_to(&mut self, state: MavState, params: MavParams, cmd: Command, anchor: Anchor) {
        self.prev_action = Action::hover(&params);
        self.params = params;
        self.state = state;
        self.set_command(cmd, anchor);
    }

    /// Hands over to a new maneuver without touching the vehicle.
    pub fn set_command(&mut self, cmd: Command, anchor: Anchor) {
        self.cmd = cmd;
        self.anchor = anchor;
        self.progress = TaskProgress::default();
        self.status = Status::Running;
        self.completed = false;
    }

    /// Default anchor for `cmd` from the current pose.
    pub fn anchor_here(&self, cmd: &Command) -> Anchor {
        Anchor::from_pose(cmd, &self.state.p, self.state.yaw(), &self.cfg.tasks)
    }

    pub fn targets(&self) -> TaskTargets {
        task_targets(&self.cmd, &self.anchor, &self.state, &self.progress, &self.cfg.tasks)
    }

    /// Actor observation (noisy when `rng` is given and noise is enabled).
    pub fn observe<R: Rng + ?Sized>(&self, rng: Option<&mut R>) -> Observation {
        let rel = rel_state(&self.state, &self.targets());
        let hover = self.cfg.dynamics.params.hover_thrust();
        build_observation(&rel, &self.prev_action, hover, &self.cmd, rng.map(|r| (&self.cfg.tasks.noise, r)))
    }

    /// Noise-free observation for the critic.
    pub fn observe_clean(&self) -> Observation {
        self.observe::<rand_chacha::ChaCha8Rng>(None)
    }

    pub fn step(&mut self, action: &Action) -> StepInfo {
        let action = action.clamped(&self.params);
        match policy_step(&self.state, &action, &self.params) {
            Ok(next) => {
                self.prev_action = action;
                self.advance(next)
            }
            Err(_) => {
                self.status = Status::Failure(FailureReason::Diverged);
                StepInfo {
                    reward: RewardBreakdown::from_factors(0.0, 0.0, 0.0, 0.0, 0.0),
                    status: self.status,
                    achieved: 0.0,
                    completed_now: false,
                }
            }
        }
    }

    /// Places the vehicle at `state` as if one policy step had elapsed.
    pub fn teleport(&mut self, state: MavState) -> StepInfo {
        self.advance(state)
    }

    fn advance(&mut self, next: MavState) -> StepInfo {
        let prev = std::mem::replace(&mut self.state, next);
        self.progress.update(&prev, &self.state, &self.cmd, &self.anchor, &self.cfg.tasks, POLICY_DT);
        let targets = self.targets();
        let rel = rel_state(&self.state, &targets);
        let completed_now = !self.completed && self.progress.completed(&self.cmd, &self.state, &targets, &self.cfg.tasks);
        self.completed |= completed_now;
        self.status = check_termination(&self.state, &targets, &self.progress, &self.cmd, &self.cfg.tasks);
        let roll_done = self.cmd.task == TaskId::Roll && self.completed;
        let achieved = achieved_attribute(&self.cmd, &self.state, &targets, &self.progress, roll_done);
        let reward = reward(&self.state, &rel, &targets, &self.cmd, achieved);
        StepInfo { reward, status: self.status, achieved, completed_now }
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary::capture(&self.state, &self.targets(), &self.progress, &self.cmd, self.status.is_terminal())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn env() -> Env {
        Env::new(Arc::new(EnvConfig::default()))
    }

    #[test]
    fn level_zero_reset_starts_on_target() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for task in TaskId::ALL {
            let cmd = e.task_config().sample_command(&mut rng, task);
            e.reset(&mut rng, 0.0, cmd);
            let rel = rel_state(&e.state, &e.targets());
            assert!(rel.p.amax() < 1e-9, "{task:?} {:?}", rel.p);
            assert!((rel.r_rel - crate::dynamics::Mat3::identity()).amax() < 1e-9);
        }
    }

    #[test]
    fn hover_action_holds_hover_target() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        e.reset(&mut rng, 0.0, Command::hover());
        let a = Action::hover(&e.params);
        let mut last = None;
        for _ in 0..500 {
            last = Some(e.step(&a));
        }
        let info = last.unwrap();
        assert_eq!(info.status, Status::Success);
        assert!((info.reward.r_total - 72.0).abs() < 1e-6);
    }

    #[test]
    fn scripted_roll_completes_full_turn() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        e.reset(&mut rng, 0.0, Command::new(TaskId::Roll, 1.0));
        // a full turn has no net vertical thrust; leave room to fall
        e.state.p.z += 10.0;
        let a = Action { thrust: e.params.hover_thrust() * 1.3, rates: Vec3::new(6.0, 0.0, 0.0) };
        let mut steps = 0;
        while !e.status.is_terminal() && steps < 300 {
            let info = e.step(&a);
            steps += 1;
            if info.completed_now {
                assert_eq!(info.status, Status::Success);
            }
        }
        assert_eq!(e.status, Status::Success);
        assert!((e.progress.roll - TAU).abs() < 0.07, "{}", e.progress.roll);
        // body x-axis back near the start orientation
        let x = e.state.r * Vec3::x();
        assert!((x - rot_z(e.anchor.yaw) * Vec3::x()).norm() < 0.1);
    }

    #[test]
    fn progress_is_additive_over_segments() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        e.reset(&mut rng, 1.0, Command::new(TaskId::Rotate, 2.0));
        let mut states = vec![e.state.clone()];
        for k in 0..50 {
            let a = Action { thrust: 5.0, rates: Vec3::new(0.1 * (k as f64).sin(), 0.2, 0.3) };
            e.step(&a);
            states.push(e.state.clone());
        }
        let cfg = e.task_config().clone();
        let run = |range: std::ops::Range<usize>, mut p: TaskProgress| {
            for i in range {
                p.update(&states[i], &states[i + 1], &e.cmd, &e.anchor, &cfg, POLICY_DT);
            }
            p
        };
        let whole = run(0..50, TaskProgress::default());
        let split = run(20..50, run(0..20, TaskProgress::default()));
        assert_eq!(whole, split);
        assert_eq!(whole, e.progress);
    }

    #[test]
    fn divergence_is_reported() {
        let mut e = env();
        e.state.v.x = f64::NAN;
        let info = e.step(&Action::hover(&e.params));
        assert_eq!(info.status, Status::Failure(FailureReason::Diverged));
    }

    #[test]
    fn reset_is_deterministic_and_rotation_invariant_in_rel() {
        let mut a = env();
        let mut b = env();
        a.reset(&mut ChaCha8Rng::seed_from_u64(5), 0.7, Command::new(TaskId::Flip, 5.0));
        b.reset(&mut ChaCha8Rng::seed_from_u64(5), 0.7, Command::new(TaskId::Flip, 5.0));
        assert_eq!(a.state, b.state);
        assert_eq!(a.observe_clean(), b.observe_clean());
    }
}
