//! The authoritative simulation: one vehicle, one pilot, an optional running
//! script. Mutated only by the service loop.

use std::sync::Arc;

use aerobat::composer::{builtin_script, hover_start, AnchorSpec, Script, ScriptRunner};
use aerobat::dynamics::{rot_z, Vec3, POLICY_DT};
use aerobat::env::{Env, EnvConfig};
use aerobat::eval::{Control, Pilot};
use aerobat::rewards::RewardBreakdown;
use aerobat::tasks::{wrap_angle, Anchor, Command, FailureReason, Status};

use crate::protocol::{ClientMessage, Event, Progress, ScriptState, TelemetryFrame};

pub struct SimCore {
    env_cfg: EnvConfig,
    pilot: Arc<dyn Pilot + Send + Sync>,
    seed: u64,
    env: Env,
    start_pose: (Vec3, f64),
    runner: Option<ScriptRunner>,
    step: usize,
    seq: u64,
    pub paused: bool,
    pub time_scale: f64,
    last_reward: RewardBreakdown,
    last_status: Status,
}

impl SimCore {
    pub fn new(env_cfg: EnvConfig, pilot: Arc<dyn Pilot + Send + Sync>, seed: u64, time_scale: f64) -> Self {
        let env = hover_start(&env_cfg, seed);
        Self {
            start_pose: (env.state.p, env.state.yaw()),
            env,
            env_cfg,
            pilot,
            seed,
            runner: None,
            step: 0,
            seq: 0,
            paused: false,
            time_scale,
            last_reward: RewardBreakdown::from_factors(0.0, 0.0, 0.0, 0.0, 0.0),
            last_status: Status::Running,
        }
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * POLICY_DT
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn reset(&mut self) {
        self.env = hover_start(&self.env_cfg, self.seed);
        self.start_pose = (self.env.state.p, self.env.state.yaw());
        self.runner = None;
        self.step = 0;
        self.last_reward = RewardBreakdown::from_factors(0.0, 0.0, 0.0, 0.0, 0.0);
        self.last_status = Status::Running;
    }

    fn resolve_anchor(&self, cmd: &Command, spec: Option<AnchorSpec>) -> Result<Anchor, String> {
        let (p0, yaw0) = self.start_pose;
        match spec {
            None => Ok(self.env.anchor_here(cmd)),
            Some(AnchorSpec::Point { point, yaw }) => Ok(Anchor { point: Vec3::from(point), yaw }),
            Some(AnchorSpec::Offset { offset, yaw }) => {
                Ok(Anchor { point: p0 + rot_z(yaw0) * Vec3::from(offset), yaw: wrap_angle(yaw0 + yaw) })
            }
            Some(AnchorSpec::Reuse { .. }) => Err("`reuse` anchors are only valid inside scripts".into()),
        }
    }

    /// Applies a client message between policy steps.
    pub fn apply(&mut self, msg: ClientMessage) -> Result<Vec<Event>, String> {
        let t = self.time();
        match msg {
            ClientMessage::Command { task, param, anchor } => {
                let cmd = Command::new(task, param);
                let step = aerobat::composer::ScriptStep { trigger: aerobat::composer::Trigger::Start, task, param, anchor };
                Script { name: "command".into(), steps: vec![step] }.validate().map_err(|e| e.to_string())?;
                let anchor = self.resolve_anchor(&cmd, anchor)?;
                self.runner = None;
                self.env.set_command(cmd, anchor);
                Ok(vec![Event::CommandApplied { t, task, param: cmd.param }])
            }
            ClientMessage::RunScript { name, script } => {
                let script = match (name, script) {
                    (Some(n), None) => builtin_script(&n).map_err(|e| e.to_string())?,
                    (None, Some(s)) => {
                        s.validate().map_err(|e| e.to_string())?;
                        s
                    }
                    _ => return Err("run_script needs exactly one of `name` or `script`".into()),
                };
                let name = script.name.clone();
                self.start_pose = (self.env.state.p, self.env.state.yaw());
                self.runner = Some(ScriptRunner::new(script, &self.env, self.step));
                Ok(vec![Event::ScriptStarted { t, name }])
            }
            ClientMessage::Trigger => match self.runner.as_mut() {
                Some(r) if !r.finished() => {
                    r.manual();
                    Ok(vec![])
                }
                _ => Err("no script is waiting for a trigger".into()),
            },
            ClientMessage::Pause => {
                self.paused = true;
                Ok(vec![])
            }
            ClientMessage::Resume => {
                self.paused = false;
                Ok(vec![])
            }
            ClientMessage::Reset => {
                self.reset();
                Ok(vec![Event::Reset { t: 0.0 }])
            }
            ClientMessage::SetTimeScale { factor } => {
                if !(factor > 0.0 && factor <= aerobat::config::MAX_TIME_SCALE) {
                    return Err(format!("time scale must lie in (0, {}]", aerobat::config::MAX_TIME_SCALE));
                }
                self.time_scale = factor;
                Ok(vec![])
            }
        }
    }

    /// One policy step (no-op while paused).
    pub fn tick(&mut self) -> Result<Vec<Event>, String> {
        if self.paused {
            return Ok(vec![]);
        }
        let mut events = Vec::new();
        if let Some(r) = self.runner.as_mut() {
            if let Some(f) = r.poll(&mut self.env, self.step) {
                events.push(Event::TriggerFired { t: f.t, step: f.index, task: f.task, param: f.param });
                if r.finished() {
                    events.push(Event::ScriptFinished { t: f.t, name: r.script.name.clone() });
                }
            }
        }
        let obs = self.env.observe_clean();
        let info = match self.pilot.control(&self.env, &obs).map_err(|e| e.to_string())? {
            Control::Act(a) => self.env.step(&a),
            Control::Teleport(s) => self.env.teleport(s),
        };
        self.step += 1;
        self.last_reward = info.reward;
        self.last_status = info.status;
        if matches!(info.status, Status::Failure(FailureReason::Altitude | FailureReason::Diverged)) {
            events.push(Event::Crashed { t: self.time(), status: info.status });
            let t = self.step;
            self.reset();
            // keep the clock monotone across the automatic reset
            self.step = t;
        }
        Ok(events)
    }

    pub fn telemetry(&mut self) -> TelemetryFrame {
        self.seq += 1;
        let s = &self.env.state;
        let q = s.quaternion();
        TelemetryFrame {
            seq: self.seq,
            t: self.time(),
            p: s.p.into(),
            q: [q.w, q.i, q.j, q.k],
            v: s.v.into(),
            omega: s.omega.into(),
            task: self.env.cmd.task,
            param: self.env.cmd.param,
            reward: self.last_reward,
            progress: Progress { roll: self.env.progress.roll, pitch: self.env.progress.pitch },
            status: self.last_status,
            paused: self.paused,
            time_scale: self.time_scale,
            script: self.runner.as_ref().map(|r| ScriptState {
                name: r.script.name.clone(),
                pending_step: r.pending(),
                steps: r.script.steps.len(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aerobat::eval::OraclePilot;
    use aerobat::tasks::TaskId;

    fn core() -> SimCore {
        SimCore::new(EnvConfig::default(), Arc::new(OraclePilot), 3, 1.0)
    }

    #[test]
    fn command_switches_on_next_step() {
        let mut c = core();
        for _ in 0..5 {
            c.tick().unwrap();
        }
        c.apply(ClientMessage::Command { task: TaskId::Flip, param: 5.0, anchor: None }).unwrap();
        c.tick().unwrap();
        let f = c.telemetry();
        assert_eq!((f.task, f.param), (TaskId::Flip, 5.0));
        assert!(f.omega[1] > 4.9);
    }

    #[test]
    fn pause_freezes_time() {
        let mut c = core();
        c.tick().unwrap();
        c.apply(ClientMessage::Pause).unwrap();
        let t0 = c.telemetry().t;
        for _ in 0..10 {
            c.tick().unwrap();
        }
        let f = c.telemetry();
        assert_eq!(f.t, t0);
        assert!(f.paused);
        c.apply(ClientMessage::Resume).unwrap();
        c.tick().unwrap();
        assert!(c.telemetry().t > t0);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = core();
        let mut b = core();
        for _ in 0..20 {
            a.tick().unwrap();
        }
        a.apply(ClientMessage::Reset).unwrap();
        assert_eq!(a.env().state, b.env().state);
        a.tick().unwrap();
        b.tick().unwrap();
        assert_eq!(a.env().state, b.env().state);
    }

    #[test]
    fn script_events_and_errors() {
        let mut c = core();
        assert!(c.apply(ClientMessage::Trigger).is_err());
        assert!(c.apply(ClientMessage::RunScript { name: Some("nope".into()), script: None }).is_err());
        assert!(c.apply(ClientMessage::SetTimeScale { factor: 9.0 }).is_err());
        assert!(c.apply(ClientMessage::Command { task: TaskId::Roll, param: 0.5, anchor: None }).is_err());
        c.apply(ClientMessage::RunScript { name: Some("combo".into()), script: None }).unwrap();
        let mut fired = Vec::new();
        for _ in 0..200 {
            for e in c.tick().unwrap() {
                if let Event::TriggerFired { step, .. } = e {
                    fired.push((step, c.steps() - 1));
                }
            }
        }
        assert_eq!(fired, vec![(0, 0), (1, 10), (2, 70), (3, 170)]);
        assert_eq!(c.telemetry().script.unwrap().pending_step, None);
    }
}
