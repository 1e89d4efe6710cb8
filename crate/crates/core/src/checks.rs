//! The invariance suite: every symmetry property the policy relies on,
//! measured numerically and collected into one serializable report.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{derivative, rot_z, MavParams, Vec3};
use crate::nets::layers::{EquivLinear, Gate, ParamAlloc};
use crate::nets::{ActionScale, NetConfig, NetError, PolicyParams, ACTION_DIM, FEATURE_DIM};
use crate::rewards::{achieved_attribute, reward};
use crate::symmetry::{
    act_on_state, act_on_targets, check_equivariance, random_state, rep_matrix, test_angles, FeatureLayout, GroupElement,
};
use crate::tasks::{rel_state, task_targets, Anchor, Command, Observation, TaskConfig, TaskId, TaskProgress, OBS_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_violation: f64,
    pub tol: f64,
    /// Negative controls are expected to exceed `tol`.
    pub expect_violation: bool,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, trials: usize, max_violation: f64, tol: f64) -> Self {
        let passed = max_violation <= tol;
        Self { name: name.into(), trials, max_violation, tol, expect_violation: false, passed }
    }

    fn negative(name: impl Into<String>, trials: usize, max_violation: f64, tol: f64) -> Self {
        let passed = max_violation > tol;
        Self { name: name.into(), trials, max_violation, tol, expect_violation: true, passed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    /// Random (x, θ) pairs per network check.
    pub net_trials: usize,
    /// Random (state, θ) pairs per dynamics / task check.
    pub state_trials: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { net_trials: 100, state_trials: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub options: SuiteOptions,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub elapsed_s: f64,
}

impl SuiteReport {
    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, |m, v| if v.is_nan() { f64::NAN } else { m.max(v) })
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn layer_checks(o: &SuiteOptions, out: &mut Vec<CheckResult>) {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let lin = FeatureLayout::observation_features();
    let gate = Gate { pairs: 6, scalars: 10 };
    let mut a = ParamAlloc::default();
    let first = EquivLinear::new(&mut a, &lin, &gate.layout());
    let hidden = EquivLinear::new(&mut a, &gate.layout(), &gate.layout());
    let head = EquivLinear::new(&mut a, &gate.layout(), &FeatureLayout::scalars_only(ACTION_DIM));
    let mut p = vec![0.0; a.len];
    for l in [&first, &hidden, &head] {
        l.init(&mut p, &mut rng, 1.0);
        for b in l.bias_mut(&mut p) {
            *b = rng.sample(StandardNormal);
        }
    }

    // W ρ_in(θ) = ρ_out(θ) W on the materialized weights
    for (name, l, li, lo) in [
        ("layer.input", &first, lin.clone(), gate.layout()),
        ("layer.hidden", &hidden, gate.layout(), gate.layout()),
        ("layer.head", &head, gate.layout(), FeatureLayout::scalars_only(ACTION_DIM)),
    ] {
        let w = l.materialize(&p);
        let worst = test_angles(o.net_trials).into_iter().fold(0.0f64, |m, t| {
            let g = GroupElement::new(t);
            m.max((&w * rep_matrix(&li, g) - rep_matrix(&lo, g) * &w).amax())
        });
        out.push(CheckResult::new(format!("{name}.intertwiner"), o.net_trials, worst, 1e-9));
        let f = |x: &[f64]| {
            let mut y = vec![0.0; lo.dim()];
            l.forward(&p, x, &mut y);
            y
        };
        let rep = check_equivariance(f, &li, &lo, o.net_trials, 1e-9, o.seed + 1).expect("layouts match");
        out.push(CheckResult::new(format!("{name}.forward"), o.net_trials, rep.max_violation, 1e-9));
    }

    let f = |x: &[f64]| {
        let mut y = vec![0.0; gate.dim()];
        gate.forward(x, &mut y);
        y
    };
    let rep = check_equivariance(f, &gate.layout(), &gate.layout(), o.net_trials, 1e-9, o.seed + 2).expect("layouts match");
    out.push(CheckResult::new("layer.gate", o.net_trials, rep.max_violation, 1e-9));
}

/// Full actor mean and every critic head, with FiLM at its identity
/// initialization and everything else randomized.
fn network_checks(o: &SuiteOptions, out: &mut Vec<CheckResult>) -> Result<(), NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed + 3);
    let cfg = NetConfig::default();
    let mut net = PolicyParams::new(&cfg, ActionScale::from_params(&MavParams::default()), &mut rng)?;
    let fa = net.actor.film_len();
    for x in net.actor_params[fa..].iter_mut() {
        *x += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    let fc = net.critic.film_len();
    for x in net.critic_params[fc..].iter_mut() {
        *x += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    let layout = cfg.input_layout.clone();
    let tcfg = TaskConfig::default();
    let mut actor_worst = 0.0f64;
    let mut critic_worst = 0.0f64;
    let trials_per_task = o.net_trials.div_ceil(TaskId::ALL.len());
    for task in TaskId::ALL {
        let cmd = tcfg.sample_command(&mut rng, task).encode();
        let obs = |x: &[f64]| {
            let mut v = [0.0; OBS_DIM];
            v[..FEATURE_DIM].copy_from_slice(x);
            v[FEATURE_DIM..].copy_from_slice(&cmd);
            Observation(v)
        };
        for t in test_angles(trials_per_task) {
            let g = GroupElement::new(t);
            let x = gaussian(&mut rng, FEATURE_DIM);
            let gx = layout.act(g, &x);
            let (a, b) = (net.actor_forward(&obs(&x))?, net.actor_forward(&obs(&gx))?);
            actor_worst = actor_worst.max(max_abs_diff(&a.mean, &b.mean));
            let (v1, v2) = (net.critic_forward(&obs(&x), task)?, net.critic_forward(&obs(&gx), task)?);
            critic_worst = critic_worst.max((v1 - v2).abs());
        }
    }
    let n = trials_per_task * TaskId::ALL.len();
    out.push(CheckResult::new("network.actor", n, actor_worst, 1e-6));
    out.push(CheckResult::new("network.critic", n, critic_worst, 1e-6));
    Ok(())
}

/// ‖f(g∘s) − g∘f(s)‖∞ of the continuous-time dynamics.
fn dynamics_violation(params: &MavParams, o: &SuiteOptions, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in test_angles(o.state_trials + 1).into_iter().skip(1) {
        let g = GroupElement::new(t);
        let s = random_state(&mut rng);
        let thrusts: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..params.f_motor_max));
        let (Ok(d), Ok(dg)) = (derivative(&s, &thrusts, params), derivative(&act_on_state(g, &s), &thrusts, params)) else {
            return f64::NAN;
        };
        let rz = rot_z(t);
        let e = [
            (dg.p_dot - rz * d.p_dot).amax(),
            (dg.v_dot - rz * d.v_dot).amax(),
            (dg.r_dot - rz * d.r_dot).amax(),
            (dg.omega_dot - d.omega_dot).amax(),
        ];
        worst = e.iter().fold(worst, |a, b| a.max(*b));
    }
    worst
}

fn dynamics_checks(o: &SuiteOptions, out: &mut Vec<CheckResult>) {
    let iso = MavParams { drag: [0.2, 0.2, 0.1], ..MavParams::default() };
    let aniso = MavParams { drag: [0.2, 0.3, 0.1], ..MavParams::default() };
    out.push(CheckResult::new("dynamics.isotropic_drag", o.state_trials, dynamics_violation(&iso, o, o.seed + 4), 1e-9));
    out.push(CheckResult::negative("dynamics.anisotropic_drag", o.state_trials, dynamics_violation(&aniso, o, o.seed + 4), 1e-3));
}

fn task_checks(o: &SuiteOptions, out: &mut Vec<CheckResult>) {
    let cfg = TaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed + 5);
    for task in TaskId::ALL {
        let mut rel_worst = 0.0f64;
        let mut rew_worst = 0.0f64;
        for t in test_angles(o.state_trials) {
            let cmd: Command = cfg.sample_command(&mut rng, task);
            let s = random_state(&mut rng);
            let anchor = Anchor {
                point: Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), 2.0),
                yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            };
            let prog = TaskProgress::default();
            let targets = task_targets(&cmd, &anchor, &s, &prog, &cfg);
            let g = GroupElement::new(t);
            let (gs, gt) = (act_on_state(g, &s), act_on_targets(g, &targets));
            let (r1, r2) = (rel_state(&s, &targets), rel_state(&gs, &gt));
            rel_worst = rel_worst.max(max_abs_diff(&r1.to_array(), &r2.to_array()));
            if task != TaskId::Hover {
                let w1 = reward(&s, &r1, &targets, &cmd, achieved_attribute(&cmd, &s, &targets, &prog, false));
                let w2 = reward(&gs, &r2, &gt, &cmd, achieved_attribute(&cmd, &gs, &gt, &prog, false));
                rew_worst = rew_worst.max((w1.r_total - w2.r_total).abs());
            }
        }
        let name = task.name();
        out.push(CheckResult::new(format!("relstate.{name}"), o.state_trials, rel_worst, 1e-9));
        // Hover's absolute-yaw task term deliberately breaks the symmetry
        if task != TaskId::Hover {
            out.push(CheckResult::new(format!("reward.{name}"), o.state_trials, rew_worst, 1e-9));
        }
    }
}

pub fn invariance_suite(o: &SuiteOptions) -> Result<SuiteReport, NetError> {
    let start = Instant::now();
    let mut checks = Vec::new();
    layer_checks(o, &mut checks);
    network_checks(o, &mut checks)?;
    dynamics_checks(o, &mut checks);
    task_checks(o, &mut checks);
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport { options: *o, checks, passed, elapsed_s: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_negative_control() {
        let r = invariance_suite(&SuiteOptions { net_trials: 20, state_trials: 50, seed: 1 }).unwrap();
        for c in &r.checks {
            assert!(c.passed, "{c:?}");
        }
        let a = r.get("dynamics.anisotropic_drag").unwrap();
        assert!(a.expect_violation && a.max_violation > 1e-3);
        assert!(r.get("reward.hover").is_none());
        assert_eq!(r.checks.iter().filter(|c| c.name.starts_with("relstate.")).count(), 4);
    }
}
