//! Maneuver composition: scripts of commands issued on start, after a
//! delay, after the active maneuver completes, or on a manual event.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::dynamics::{rot_z, Vec3, POLICY_DT};
use crate::env::{Env, EnvConfig, StepInfo};
use crate::eval::{Control, Pilot};
use crate::nets::NetError;
use crate::rewards::RewardBreakdown;
use crate::tasks::{Anchor, Command, FailureReason, Status, TaskId};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid script: {0}")]
    Invalid(String),
    #[error("unknown built-in script `{0}`")]
    UnknownBuiltin(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn non_negative<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(serde::de::Error::custom(format!("seconds must be a non-negative number, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    /// Issued when the script starts (first step only).
    Start,
    /// Once the active maneuver reaches its completion transition.
    AfterDone,
    /// Fixed delay after the previous command was issued.
    AfterTime {
        #[serde(deserialize_with = "non_negative")]
        seconds: f64,
    },
    /// On an externally injected event.
    Manual,
}

/// Where a step's maneuver is pinned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnchorSpec {
    /// Absolute world point and heading.
    Point {
        point: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    /// Relative to the vehicle pose at script start, in its heading frame.
    Offset {
        offset: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    /// Same anchor as an earlier step.
    Reuse { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub trigger: Trigger,
    pub task: TaskId,
    #[serde(default)]
    pub param: f64,
    /// Defaults to the vehicle pose when the step fires.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AnchorSpec>,
}

impl ScriptStep {
    pub fn command(&self) -> Command {
        Command::new(self.task, self.param)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub name: String,
    pub steps: Vec<ScriptStep>,
}

impl Script {
    pub fn validate(&self) -> Result<(), ScriptError> {
        let bad = |m: String| Err(ScriptError::Invalid(m));
        if self.steps.is_empty() {
            return bad("a script needs at least one step".into());
        }
        for (i, s) in self.steps.iter().enumerate() {
            let at = format!("steps[{i}]");
            match s.trigger {
                Trigger::Start if i != 0 => return bad(format!("{at}: `start` is only valid on the first step")),
                Trigger::Manual if i == 0 => return bad(format!("{at}: the first step cannot wait for a manual trigger")),
                _ => {}
            }
            if !s.param.is_finite() {
                return bad(format!("{at}: param must be finite"));
            }
            match s.task {
                TaskId::Roll if s.param == 0.0 || s.param.fract() != 0.0 => {
                    return bad(format!("{at}: roll param must be a non-zero whole number of turns"))
                }
                TaskId::Flip if s.param == 0.0 => return bad(format!("{at}: flip rate must be non-zero")),
                _ => {}
            }
            if let Some(AnchorSpec::Reuse { step }) = s.anchor {
                if step >= i {
                    return bad(format!("{at}: anchor can only reuse an earlier step"));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_script(text: &str) -> Result<Script, ScriptError> {
    let s: Script = serde_json::from_str(text).map_err(|e| ScriptError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    s.validate()?;
    Ok(s)
}

const BUILTIN_SOURCES: [(&str, &str); 4] = [
    ("combo", include_str!("../scripts/combo.json")),
    ("snap_rotate", include_str!("../scripts/snap_rotate.json")),
    ("spiral_flip", include_str!("../scripts/spiral_flip.json")),
    ("power_loop", include_str!("../scripts/power_loop.json")),
];

pub fn builtin_scripts() -> BTreeMap<String, Script> {
    BUILTIN_SOURCES
        .iter()
        .map(|(name, text)| (name.to_string(), parse_script(text).expect("built-in scripts are valid")))
        .collect()
}

pub fn builtin_script(name: &str) -> Result<Script, ScriptError> {
    builtin_scripts().remove(name).ok_or_else(|| ScriptError::UnknownBuiltin(name.to_string()))
}

/// A built-in name or a path to a script file.
pub fn load_script(spec: &str) -> Result<Script, ScriptError> {
    if let Ok(s) = builtin_script(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(ScriptError::UnknownBuiltin(spec.to_string()));
    }
    let text = fs::read_to_string(path).map_err(|source| ScriptError::Io { path: path.to_path_buf(), source })?;
    parse_script(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerFiring {
    /// Index of the script step.
    pub index: usize,
    /// Policy step at whose start the command became active.
    pub step: usize,
    pub t: f64,
    pub trigger: Trigger,
    pub task: TaskId,
    pub param: f64,
    pub anchor: Anchor,
}

/// Trigger bookkeeping for one script against one environment. Call
/// [`ScriptRunner::poll`] between policy steps.
#[derive(Debug, Clone)]
pub struct ScriptRunner {
    pub script: Script,
    next: usize,
    last_issue: usize,
    start_pose: (Vec3, f64),
    anchors: Vec<Option<Anchor>>,
    manual_pending: usize,
    pub firings: Vec<TriggerFiring>,
}

impl ScriptRunner {
    /// Starts the script from the environment's current pose at policy step
    /// `step`.
    pub fn new(script: Script, env: &Env, step: usize) -> Self {
        let n = script.steps.len();
        Self {
            script,
            next: 0,
            last_issue: step,
            start_pose: (env.state.p, env.state.yaw()),
            anchors: vec![None; n],
            manual_pending: 0,
            firings: Vec::new(),
        }
    }

    /// Queues one manual trigger event.
    pub fn manual(&mut self) {
        self.manual_pending += 1;
    }

    /// All steps have been issued.
    pub fn finished(&self) -> bool {
        self.next >= self.script.steps.len()
    }

    /// Index of the step waiting to fire.
    pub fn pending(&self) -> Option<usize> {
        (!self.finished()).then_some(self.next)
    }

    /// The next step waits for a manual event and none is queued.
    pub fn awaiting_manual(&self) -> bool {
        self.manual_pending == 0 && self.pending().is_some_and(|i| self.script.steps[i].trigger == Trigger::Manual)
    }

    fn anchor_for(&self, i: usize, env: &Env) -> Anchor {
        let s = &self.script.steps[i];
        let (p0, yaw0) = self.start_pose;
        match s.anchor {
            None => env.anchor_here(&s.command()),
            Some(AnchorSpec::Point { point, yaw }) => Anchor { point: Vec3::from(point), yaw },
            Some(AnchorSpec::Offset { offset, yaw }) => {
                Anchor { point: p0 + rot_z(yaw0) * Vec3::from(offset), yaw: crate::tasks::wrap_angle(yaw0 + yaw) }
            }
            Some(AnchorSpec::Reuse { step }) => self.anchors[step].unwrap_or_else(|| env.anchor_here(&s.command())),
        }
    }

    /// Fires at most one pending step before policy step `step`; returns the
    /// firing if the active command changed.
    pub fn poll(&mut self, env: &mut Env, step: usize) -> Option<TriggerFiring> {
        let i = self.pending()?;
        let s = &self.script.steps[i];
        let ready = match s.trigger {
            Trigger::Start => true,
            Trigger::AfterDone => env.completed,
            Trigger::AfterTime { seconds } => step - self.last_issue >= (seconds / POLICY_DT).round() as usize,
            Trigger::Manual => self.manual_pending > 0,
        };
        if !ready {
            return None;
        }
        if s.trigger == Trigger::Manual {
            self.manual_pending -= 1;
        }
        let cmd = s.command();
        let trigger = s.trigger;
        let anchor = self.anchor_for(i, env);
        env.set_command(cmd, anchor);
        self.anchors[i] = Some(anchor);
        self.last_issue = step;
        self.next += 1;
        let f = TriggerFiring {
            index: i,
            step,
            t: step as f64 * POLICY_DT,
            trigger,
            task: cmd.task,
            param: cmd.param,
            anchor,
        };
        self.firings.push(f.clone());
        Some(f)
    }
}

/// One policy step of a script run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub step: usize,
    pub t: f64,
    pub task: TaskId,
    pub param: f64,
    pub p: [f64; 3],
    pub v: [f64; 3],
    /// Attitude quaternion [w, x, y, z].
    pub q: [f64; 4],
    pub omega: [f64; 3],
    pub reward: RewardBreakdown,
    pub roll: f64,
    pub pitch: f64,
    /// The active maneuver has reached its completion transition.
    pub completed: bool,
}

impl TrajectoryFrame {
    pub fn capture(env: &Env, step: usize, info: &StepInfo) -> Self {
        let q = env.state.quaternion();
        Self {
            step,
            t: (step + 1) as f64 * POLICY_DT,
            task: env.cmd.task,
            param: env.cmd.param,
            p: env.state.p.into(),
            v: env.state.v.into(),
            q: [q.w, q.i, q.j, q.k],
            omega: env.state.omega.into(),
            reward: info.reward,
            roll: env.progress.roll,
            pitch: env.progress.pitch,
            completed: env.completed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    /// Crashed or diverged; the log ends at the failing step.
    Aborted(FailureReason),
    /// Some steps never fired before the time limit.
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Flight time after the last step fires.
    pub tail_s: f64,
    /// Hard limit on the run length.
    pub max_s: f64,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { tail_s: 3.0, max_s: 60.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRun {
    pub script: String,
    pub outcome: RunOutcome,
    pub firings: Vec<TriggerFiring>,
    pub frames: Vec<TrajectoryFrame>,
}

/// Environment settled at hover at the nominal position, with the heading
/// drawn from `seed`. Episode limits are lifted; scripts run open-ended.
pub fn hover_start(env_cfg: &EnvConfig, seed: u64) -> Env {
    let mut cfg = env_cfg.clone();
    cfg.tasks.horizon = usize::MAX;
    let mut env = Env::new(Arc::new(cfg));
    env.reset(&mut ChaCha8Rng::seed_from_u64(seed), 0.0, Command::hover());
    env
}

/// Runs `script` from hover. `manual_at` lists policy steps at which a
/// manual trigger event is injected.
pub fn run_script<P: Pilot + ?Sized>(
    script: &Script,
    pilot: &P,
    env_cfg: &EnvConfig,
    opts: &RunOptions,
    manual_at: &[usize],
) -> Result<ScriptRun, ScriptError> {
    run_script_with(script, pilot, env_cfg, opts, |step, _| manual_at.iter().filter(|&&k| k == step).count())
}

/// Like [`run_script`], but asks `manual(step, runner)` before every policy
/// step how many manual trigger events to inject.
pub fn run_script_with<P: Pilot + ?Sized>(
    script: &Script,
    pilot: &P,
    env_cfg: &EnvConfig,
    opts: &RunOptions,
    mut manual: impl FnMut(usize, &ScriptRunner) -> usize,
) -> Result<ScriptRun, ScriptError> {
    script.validate()?;
    let mut env = hover_start(env_cfg, opts.seed);
    let mut runner = ScriptRunner::new(script.clone(), &env, 0);
    let max_steps = (opts.max_s / POLICY_DT).round() as usize;
    let tail = (opts.tail_s / POLICY_DT).round() as usize;
    let mut frames = Vec::new();
    let mut outcome = RunOutcome::TimedOut;
    let mut done_at: Option<usize> = None;
    for step in 0..max_steps {
        for _ in 0..manual(step, &runner) {
            runner.manual();
        }
        runner.poll(&mut env, step);
        if runner.finished() && done_at.is_none() {
            done_at = Some(step);
        }
        if done_at.is_some_and(|d| step >= d + tail) {
            outcome = RunOutcome::Completed;
            break;
        }
        let obs = env.observe_clean();
        let info = match pilot.control(&env, &obs)? {
            Control::Act(a) => env.step(&a),
            Control::Teleport(s) => env.teleport(s),
        };
        frames.push(TrajectoryFrame::capture(&env, step, &info));
        if let Status::Failure(r @ (FailureReason::Altitude | FailureReason::Diverged)) = info.status {
            outcome = RunOutcome::Aborted(r);
            break;
        }
    }
    Ok(ScriptRun { script: script.name.clone(), outcome, firings: runner.firings, frames })
}

impl ScriptRun {
    /// Writes `trajectory.jsonl` and `triggers.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ScriptError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ScriptError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut text = String::new();
        for f in &self.frames {
            text.push_str(&serde_json::to_string(f).expect("serializable"));
            text.push('\n');
        }
        let traj = dir.join("trajectory.jsonl");
        fs::write(&traj, text).map_err(io(&traj))?;
        #[derive(Serialize)]
        struct Summary<'a> {
            script: &'a str,
            outcome: RunOutcome,
            steps: usize,
            firings: &'a [TriggerFiring],
        }
        let sum = Summary { script: &self.script, outcome: self.outcome, steps: self.frames.len(), firings: &self.firings };
        let path = dir.join("triggers.json");
        fs::write(&path, serde_json::to_vec_pretty(&sum).expect("serializable")).map_err(io(&path))?;
        Ok(())
    }
}
