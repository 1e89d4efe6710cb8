//! Multiplicative reward: tracking terms, command adherence and task shaping,
//! each a sum of inverse kernels so no single state dimension can be traded
//! off against the others.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::dynamics::{attitude_distance, rot_z, MavState};
use crate::tasks::{Command, RelState, TaskId, TaskProgress, TaskTargets};

/// H(x; k) = 1 / (1 + k·x).
pub fn kernel(x: f64, k: f64) -> f64 {
    assert!(x >= 0.0, "kernel argument must be non-negative, got {x}");
    assert!(k > 0.0, "kernel sensitivity must be positive, got {k}");
    1.0 / (1.0 + k * x)
}

fn kernel_sum(x: f64, ks: &[f64]) -> f64 {
    ks.iter().map(|&k| kernel(x, k)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_pos: f64,
    pub r_lin: f64,
    pub r_ang: f64,
    pub r_cmd: f64,
    pub r_task: f64,
    pub r_total: f64,
}

impl RewardBreakdown {
    pub fn from_factors(r_pos: f64, r_lin: f64, r_ang: f64, r_cmd: f64, r_task: f64) -> Self {
        Self { r_pos, r_lin, r_ang, r_cmd, r_task, r_total: r_pos * r_lin * r_ang * r_cmd * r_task }
    }

    pub const MAX: f64 = 72.0;
}

/// The squared/angle error arguments fed to the kernels; separated out so
/// monotonicity can be checked one argument at a time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorArgs {
    pub pos_sq: f64,
    pub lin_sq: f64,
    pub ang_sq: f64,
    pub cmd_sq: f64,
    /// Argument of the task kernel; ignored for Flip.
    pub task: f64,
}

pub fn tracking_terms(rel: &RelState) -> (f64, f64, f64) {
    (
        kernel_sum(rel.p.norm_squared(), &[1.0, 10.0]),
        kernel_sum(rel.v.norm_squared(), &[1.0, 10.0, 100.0]),
        kernel_sum(rel.omega.norm_squared(), &[0.1, 1.0, 10.0]),
    )
}

pub fn command_term(a_cmd: f64, a_ach: f64) -> f64 {
    kernel_sum((a_ach - a_cmd).powi(2), &[1.0, 10.0])
}

fn task_argument(task: TaskId, s: &MavState, rel: &RelState, targets: &TaskTargets) -> f64 {
    match task {
        // angle between attitudes enters unsquared
        TaskId::Hover => attitude_distance(&s.r, &rot_z(targets.psi_des)),
        TaskId::Rotate => rel.p.y.powi(2),
        TaskId::Roll => {
            let r = rot_z(-targets.psi_des) * s.r;
            (1.0 - r[(0, 0)]).powi(2)
        }
        TaskId::Flip => 0.0,
    }
}

fn task_from_arg(task: TaskId, x: f64) -> f64 {
    match task {
        TaskId::Hover | TaskId::Roll => kernel_sum(x, &[1.0, 10.0]),
        TaskId::Rotate => kernel_sum(x, &[0.1, 1.0]),
        TaskId::Flip => 2.0,
    }
}

pub fn task_term(task: TaskId, s: &MavState, rel: &RelState, targets: &TaskTargets) -> f64 {
    task_from_arg(task, task_argument(task, s, rel, targets))
}

pub fn reward_from_args(task: TaskId, e: &ErrorArgs) -> RewardBreakdown {
    RewardBreakdown::from_factors(
        kernel_sum(e.pos_sq, &[1.0, 10.0]),
        kernel_sum(e.lin_sq, &[1.0, 10.0, 100.0]),
        kernel_sum(e.ang_sq, &[0.1, 1.0, 10.0]),
        kernel_sum(e.cmd_sq, &[1.0, 10.0]),
        task_from_arg(task, e.task),
    )
}

pub fn reward(s: &MavState, rel: &RelState, targets: &TaskTargets, cmd: &Command, a_ach: f64) -> RewardBreakdown {
    let (r_pos, r_lin, r_ang) = tracking_terms(rel);
    let a_cmd = if cmd.task == TaskId::Hover { 0.0 } else { cmd.param };
    RewardBreakdown::from_factors(r_pos, r_lin, r_ang, command_term(a_cmd, a_ach), task_term(cmd.task, s, rel, targets))
}

/// Attribute the vehicle actually realized. Roll is only scored once the
/// turns are completed; before that it echoes the command.
pub fn achieved_attribute(cmd: &Command, s: &MavState, targets: &TaskTargets, progress: &TaskProgress, completed: bool) -> f64 {
    match cmd.task {
        TaskId::Hover => 0.0,
        TaskId::Flip => s.omega.y,
        TaskId::Rotate => s.v.dot(&(rot_z(targets.psi_des) * crate::dynamics::Vec3::y())),
        TaskId::Roll => {
            if completed {
                progress.roll / TAU
            } else {
                cmd.param
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Mat3, MavParams, Vec3};
    use crate::symmetry::{act_on_state, act_on_targets, random_state, test_angles, GroupElement};
    use crate::tasks::{rel_state, task_targets, Anchor, TaskConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_rel() -> RelState {
        RelState { p: Vec3::zeros(), v: Vec3::zeros(), omega: Vec3::zeros(), r_rel: Mat3::identity() }
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(kernel(0.0, 3.0), 1.0);
        assert_eq!(kernel(1.0, 1.0), 0.5);
        assert!((kernel(0.1, 10.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    #[should_panic]
    fn kernel_rejects_negative() {
        kernel(-1.0, 1.0);
    }

    #[test]
    fn tracking_examples() {
        assert_eq!(tracking_terms(&zero_rel()), (2.0, 3.0, 3.0));
        let mut rel = zero_rel();
        rel.p = Vec3::new(1.0, 0.0, 0.0);
        assert!((tracking_terms(&rel).0 - (0.5 + 1.0 / 11.0)).abs() < 1e-12);
        let mut rel = zero_rel();
        rel.omega = Vec3::new(10f64.sqrt(), 0.0, 0.0);
        assert!((tracking_terms(&rel).2 - (0.5 + 1.0 / 11.0 + 1.0 / 101.0)).abs() < 1e-12);
    }

    #[test]
    fn command_examples() {
        assert_eq!(command_term(3.0, 3.0), 2.0);
        assert!((command_term(0.0, 1.0) - 0.5909090909).abs() < 1e-9);
        assert!((command_term(0.0, 0.1f64.sqrt()) - (1.0 / 1.1 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn task_examples() {
        let params = MavParams::default();
        let s = MavState::hover(Vec3::zeros(), 0.7, &params);
        let t = TaskTargets { p_des: Vec3::zeros(), v_des: Vec3::zeros(), omega_des: Vec3::zeros(), psi_des: 0.7 };
        let rel = rel_state(&s, &t);
        assert_eq!(task_term(TaskId::Flip, &s, &rel, &t), 2.0);
        assert!((task_term(TaskId::Hover, &s, &rel, &t) - 2.0).abs() < 1e-12);
        assert!((task_term(TaskId::Roll, &s, &rel, &t) - 2.0).abs() < 1e-12);
        let mut tilted = s.clone();
        tilted.r = tilted.r * crate::tasks::random_rotation(&mut ChaCha8Rng::seed_from_u64(1), 0.5);
        assert!(task_term(TaskId::Hover, &tilted, &rel, &t) < 2.0);
    }

    #[test]
    fn perfect_flip_scores_maximum() {
        let t = TaskTargets { p_des: Vec3::zeros(), v_des: Vec3::zeros(), omega_des: Vec3::zeros(), psi_des: 0.0 };
        let s = MavState::hover(Vec3::zeros(), 0.0, &MavParams::default());
        let r = reward(&s, &zero_rel(), &t, &Command::new(TaskId::Flip, 5.0), 5.0);
        assert_eq!(r.r_total, 72.0);
    }

    #[test]
    fn random_states_positive_and_consistent() {
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for task in TaskId::ALL {
            for _ in 0..200 {
                let cmd = cfg.sample_command(&mut rng, task);
                let s = random_state(&mut rng);
                let anchor = Anchor { point: Vec3::new(0.0, 0.0, 2.0), yaw: 0.3 };
                let prog = TaskProgress::default();
                let t = task_targets(&cmd, &anchor, &s, &prog, &cfg);
                let rel = rel_state(&s, &t);
                let a = achieved_attribute(&cmd, &s, &t, &prog, false);
                let r = reward(&s, &rel, &t, &cmd, a);
                assert!(r.r_total > 0.0 && r.r_total <= 72.0);
                let again = r.r_pos * r.r_lin * r.r_ang * r.r_cmd * r.r_task;
                assert_eq!(r.r_total, again);
                if task == TaskId::Flip {
                    assert_eq!(a, s.omega.y);
                }
            }
        }
    }

    #[test]
    fn yaw_invariance() {
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for task in TaskId::ALL {
            for th in test_angles(25) {
                let cmd = cfg.sample_command(&mut rng, task);
                let s = random_state(&mut rng);
                let anchor = Anchor { point: Vec3::new(0.5, -0.5, 2.0), yaw: 1.0 };
                let prog = TaskProgress::default();
                let t = task_targets(&cmd, &anchor, &s, &prog, &cfg);
                let g = GroupElement::new(th);
                let (gs, gt) = (act_on_state(g, &s), act_on_targets(g, &t));
                let r1 = reward(&s, &rel_state(&s, &t), &t, &cmd, achieved_attribute(&cmd, &s, &t, &prog, false));
                let r2 = reward(&gs, &rel_state(&gs, &gt), &gt, &cmd, achieved_attribute(&cmd, &gs, &gt, &prog, false));
                // Hover's target co-rotates here (ψ_des + θ), so it is invariant too
                assert!((r1.r_total - r2.r_total).abs() < 1e-9, "{task:?} θ={th}");
            }
        }
    }

    #[test]
    fn hover_task_term_breaks_symmetry_without_corotation() {
        let s = MavState::hover(Vec3::zeros(), 0.0, &MavParams::default());
        let t = TaskTargets { p_des: Vec3::zeros(), v_des: Vec3::zeros(), omega_des: Vec3::zeros(), psi_des: 0.0 };
        let gs = act_on_state(GroupElement::new(1.0), &s);
        let rel = rel_state(&s, &t);
        assert!(task_term(TaskId::Hover, &gs, &rel, &t) < task_term(TaskId::Hover, &s, &rel, &t));
    }

    proptest! {
        #[test]
        fn monotone_in_each_argument(
            base in proptest::array::uniform5(0.0f64..10.0),
            which in 0usize..5,
            bump in 0.0f64..10.0,
            task_i in 0usize..4,
        ) {
            let task = TaskId::from_index(task_i).unwrap();
            let e = ErrorArgs { pos_sq: base[0], lin_sq: base[1], ang_sq: base[2], cmd_sq: base[3], task: base[4] };
            let mut e2 = e;
            match which {
                0 => e2.pos_sq += bump,
                1 => e2.lin_sq += bump,
                2 => e2.ang_sq += bump,
                3 => e2.cmd_sq += bump,
                _ => e2.task += bump,
            }
            let (r1, r2) = (reward_from_args(task, &e), reward_from_args(task, &e2));
            prop_assert!(r2.r_total <= r1.r_total);
            prop_assert!(r2.r_total > 0.0);
        }
    }
}
