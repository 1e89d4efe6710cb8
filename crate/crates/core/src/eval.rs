//! Evaluation: deterministic rollouts over command sweeps, success rate,
//! SCD and per-task primary errors, and report files.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rot_z, Action, MavState, Vec3, POLICY_DT};
use crate::env::{Env, EnvConfig};
use crate::nets::{NetError, PolicyParams};
use crate::tasks::{success, Command, FailureReason, Observation, Status, TaskId};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric of an empty result set")]
    Empty,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Randomization level of evaluation resets.
    pub level: f64,
    /// Policy steps per evaluation episode.
    pub horizon: usize,
    /// Feed the policy noisy observations.
    pub noisy_obs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        // Roll ×5 at 6 rad/s needs ~524 steps, beyond the training horizon
        Self { episodes: 256, level: 1.0, horizon: 800, noisy_obs: false }
    }
}

/// What a pilot does for one policy step.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Act(Action),
    /// Place the vehicle directly (test oracles).
    Teleport(MavState),
}

pub trait Pilot: Sync {
    fn control(&self, env: &Env, obs: &Observation) -> Result<Control, NetError>;
}

impl Pilot for PolicyParams {
    fn control(&self, _env: &Env, obs: &Observation) -> Result<Control, NetError> {
        Ok(Control::Act(self.act_deterministic(obs)?))
    }
}

/// Flies every maneuver perfectly by construction: the commanded attribute
/// is realized exactly at every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePilot;

impl Pilot for OraclePilot {
    fn control(&self, env: &Env, _obs: &Observation) -> Result<Control, NetError> {
        let s = &env.state;
        let cmd = &env.cmd;
        let yaw = env.anchor.yaw;
        let mut next = MavState { v: Vec3::zeros(), omega: Vec3::zeros(), ..s.clone() };
        match cmd.task {
            TaskId::Hover => {
                next.p = env.anchor.point;
                next.r = rot_z(yaw);
            }
            TaskId::Flip => {
                next.omega = Vec3::new(0.0, cmd.param, 0.0);
                let pitch = env.progress.pitch + 0.5 * (s.omega.y + cmd.param) * POLICY_DT;
                next.r = rot_z(yaw) * Rotation3::from_axis_angle(&Vec3::y_axis(), pitch).matrix();
            }
            TaskId::Rotate => {
                let c = env.anchor.point;
                let r = env.task_config().rotate_radius;
                let d = s.p - c;
                let alpha = d.y.atan2(d.x) - cmd.param / r * POLICY_DT;
                let u = Vec3::new(alpha.cos(), alpha.sin(), 0.0);
                next.p = Vec3::new(c.x + r * u.x, c.y + r * u.y, s.p.z);
                next.v = cmd.param * Vec3::new(alpha.sin(), -alpha.cos(), 0.0);
                next.r = rot_z((-u.y).atan2(-u.x));
                next.omega = Vec3::new(0.0, 0.0, -cmd.param / r);
            }
            TaskId::Roll => {
                let goal = TAU * cmd.param;
                let remaining = goal - env.progress.roll;
                let rate = env.task_config().roll_rate * cmd.param.signum();
                let mut w = rate;
                if (0.5 * (s.omega.x + w) * POLICY_DT).abs() >= remaining.abs() {
                    // land on the goal (a hair past it so the transition fires)
                    w = 2.0 * (remaining + 1e-12 * cmd.param.signum()) / POLICY_DT - s.omega.x;
                }
                let roll = env.progress.roll + 0.5 * (s.omega.x + w) * POLICY_DT;
                next.omega = Vec3::new(w, 0.0, 0.0);
                next.r = rot_z(yaw) * Rotation3::from_axis_angle(&Vec3::x_axis(), roll).matrix();
            }
        }
        Ok(Control::Teleport(next))
    }
}

/// Command ranges used for evaluation sweeps.
pub const ROTATE_SWEEP: f64 = 6.0;
pub const ROLL_SWEEP: u32 = 5;
pub const FLIP_SWEEP: [f64; 2] = [2.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommandSampler {
    /// Full sweep ranges, covering in- and out-of-distribution commands.
    Sweep,
    Fixed(Command),
}

impl CommandSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, task: TaskId) -> Command {
        match self {
            CommandSampler::Fixed(c) => *c,
            CommandSampler::Sweep => match task {
                TaskId::Hover => Command::hover(),
                TaskId::Rotate => Command::new(task, rng.random_range(-ROTATE_SWEEP..=ROTATE_SWEEP)),
                TaskId::Flip => Command::new(task, rng.random_range(FLIP_SWEEP[0]..=FLIP_SWEEP[1])),
                TaskId::Roll => {
                    let n = rng.random_range(1..=ROLL_SWEEP) as f64;
                    Command::new(task, if rng.random_bool(0.5) { n } else { -n })
                }
            },
        }
    }
}

/// Commands outside the training distribution.
pub fn is_ood(cmd: &Command) -> bool {
    match cmd.task {
        TaskId::Hover => false,
        TaskId::Rotate => cmd.param.abs() > 4.0,
        TaskId::Roll => cmd.param.abs() > 3.0,
        TaskId::Flip => !(4.0..=6.0).contains(&cmd.param),
    }
}

/// Per-step record kept when logs are requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub p: [f64; 3],
    pub a_cmd: f64,
    pub a_ach: f64,
    pub reward: f64,
    pub pitch: f64,
    pub roll: f64,
    pub position_error: f64,
    pub attitude_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: TaskId,
    pub param: f64,
    pub ood: bool,
    pub success: bool,
    pub status: Status,
    pub steps: usize,
    /// Command distance C_i.
    pub command_distance: f64,
    pub primary_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<Vec<StepLog>>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub config: EvalConfig,
    /// Keep per-step logs in memory.
    pub keep_logs: bool,
    /// Write one JSONL trajectory per episode here.
    pub log_dir: Option<PathBuf>,
}

/// Command distance from a per-step log: accumulated |a_ach − a_cmd| for
/// rate commands; final pose error for Hover; remaining turns for Roll.
pub fn command_distance_from_log(task: TaskId, param: f64, log: &[StepLog]) -> f64 {
    let Some(last) = log.last() else { return 0.0 };
    match task {
        TaskId::Flip | TaskId::Rotate => log.iter().map(|s| (s.a_ach - s.a_cmd).abs()).sum(),
        TaskId::Hover => last.position_error + last.attitude_error,
        TaskId::Roll => (param - last.roll / TAU).abs(),
    }
}

/// Primary error from a per-step log.
pub fn primary_error_from_log(task: TaskId, param: f64, log: &[StepLog]) -> f64 {
    let Some(last) = log.last() else { return 0.0 };
    match task {
        TaskId::Hover => last.position_error,
        TaskId::Flip | TaskId::Rotate => log.iter().map(|s| (s.a_ach - s.a_cmd).abs()).sum::<f64>() / log.len() as f64,
        TaskId::Roll => (TAU * param - last.roll).abs(),
    }
}

pub fn primary_error_unit(task: TaskId) -> &'static str {
    match task {
        TaskId::Hover => "m",
        TaskId::Flip => "rad/s",
        TaskId::Roll => "rad",
        TaskId::Rotate => "m/s",
    }
}

/// One deterministic evaluation episode.
pub fn run_episode<P: Pilot + ?Sized>(
    pilot: &P,
    env_cfg: &Arc<EnvConfig>,
    cmd: Command,
    rng: &mut ChaCha8Rng,
    opts: &EvalOptions,
    log_file: Option<&Path>,
) -> Result<EpisodeResult, EvalError> {
    let mut cfg = (**env_cfg).clone();
    cfg.tasks.horizon = opts.config.horizon;
    let mut env = Env::new(Arc::new(cfg));
    env.reset(rng, opts.config.level, cmd);
    let mut log = Vec::new();
    while !env.status.is_terminal() {
        let obs = if opts.config.noisy_obs { env.observe(Some(&mut *rng)) } else { env.observe_clean() };
        let info = match pilot.control(&env, &obs)? {
            Control::Act(a) => env.step(&a),
            Control::Teleport(s) => env.teleport(s),
        };
        let a_cmd = if cmd.task == TaskId::Hover { 0.0 } else { cmd.param };
        let t = env.targets();
        log.push(StepLog {
            step: env.progress.steps,
            p: env.state.p.into(),
            a_cmd,
            a_ach: info.achieved,
            reward: info.reward.r_total,
            pitch: env.progress.pitch,
            roll: env.progress.roll,
            position_error: (env.state.p - t.p_des).norm(),
            attitude_error: crate::dynamics::attitude_distance(&env.state.r, &rot_z(t.psi_des)),
        });
    }
    let crashed = matches!(env.status, Status::Failure(FailureReason::Altitude | FailureReason::Diverged));
    let ok = !crashed && success(&env.summary(), &cmd, &env.task_config().success).unwrap_or(false);
    let log_path = match log_file {
        Some(path) => {
            let mut f = fs::File::create(path).map_err(io_err(path))?;
            for s in &log {
                writeln!(f, "{}", serde_json::to_string(s).expect("serializable")).map_err(io_err(path))?;
            }
            Some(path.to_path_buf())
        }
        None => None,
    };
    Ok(EpisodeResult {
        task: cmd.task,
        param: cmd.param,
        ood: is_ood(&cmd),
        success: ok,
        status: env.status,
        steps: log.len(),
        command_distance: command_distance_from_log(cmd.task, cmd.param, &log),
        primary_error: primary_error_from_log(cmd.task, cmd.param, &log),
        log_path,
        log: opts.keep_logs.then_some(log),
    })
}

/// `n` episodes of `task`; episode `i` draws from its own random stream, so
/// results do not depend on scheduling.
pub fn run_eval<P: Pilot + ?Sized>(
    pilot: &P,
    env_cfg: &EnvConfig,
    task: TaskId,
    sampler: CommandSampler,
    n: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<Vec<EpisodeResult>, EvalError> {
    if let Some(dir) = &opts.log_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let env_cfg = Arc::new(env_cfg.clone());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((task.index() as u64) << 32) | i as u64);
            let cmd = sampler.sample(&mut rng, task);
            let file = opts.log_dir.as_ref().map(|d| d.join(format!("{}_{i:05}.jsonl", task.name())));
            run_episode(pilot, &env_cfg, cmd, &mut rng, opts, file.as_deref())
        })
        .collect()
}

pub fn success_rate(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(100.0 * results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// SCD = (1/N) Σ (1 − 𝕀{success}) C_i: only failed episodes contribute.
pub fn scd(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let s: f64 = results.iter().filter(|r| !r.success).map(|r| r.command_distance).sum();
    // empty f64 sums are -0.0
    Ok(s / results.len() as f64 + 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    In,
    Ood,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::In => "in",
            Split::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskId,
    pub n: usize,
    pub sr_pct: Option<f64>,
    pub scd: Option<f64>,
    pub primary_error: Option<f64>,
    pub primary_error_unit: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_CSV_HEADER: &str = "task,n,sr_pct,scd,primary_error,split";

impl EvalReport {
    pub fn build(results: &[EpisodeResult]) -> Self {
        let mut tasks: Vec<TaskId> = TaskId::ALL.into_iter().filter(|t| results.iter().any(|r| r.task == *t)).collect();
        if tasks.is_empty() {
            tasks = TaskId::ALL.to_vec();
        }
        let mut rows = Vec::new();
        for task in tasks {
            for split in [Split::All, Split::In, Split::Ood] {
                let sel: Vec<EpisodeResult> = results
                    .iter()
                    .filter(|r| r.task == task)
                    .filter(|r| match split {
                        Split::All => true,
                        Split::In => !r.ood,
                        Split::Ood => r.ood,
                    })
                    .cloned()
                    .collect();
                if sel.is_empty() && split != Split::All {
                    continue;
                }
                let mean_err = (!sel.is_empty()).then(|| sel.iter().map(|r| r.primary_error).sum::<f64>() / sel.len() as f64);
                rows.push(ReportRow {
                    task,
                    n: sel.len(),
                    sr_pct: success_rate(&sel).ok(),
                    scd: scd(&sel).ok(),
                    primary_error: mean_err,
                    primary_error_unit: primary_error_unit(task).to_string(),
                    split,
                });
            }
        }
        Self { n: results.len(), rows }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.task.name(),
                r.n,
                opt(r.sr_pct),
                opt(r.scd),
                opt(r.primary_error),
                r.split.name()
            ));
        }
        out
    }
}

/// Writes `report.json`, `report.csv` and `episodes.jsonl` under `dir`.
pub fn emit_report(results: &[EpisodeResult], dir: &Path) -> Result<EvalReport, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let report = EvalReport::build(results);
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_vec_pretty(&report).expect("serializable")).map_err(io_err(&json))?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
    let eps = dir.join("episodes.jsonl");
    let mut text = String::new();
    for r in results {
        let mut r = r.clone();
        r.log = None;
        text.push_str(&serde_json::to_string(&r).expect("serializable"));
        text.push('\n');
    }
    fs::write(&eps, text).map_err(io_err(&eps))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MavParams;
    use crate::nets::{ActionScale, NetConfig};

    fn level0() -> EvalOptions {
        EvalOptions { config: EvalConfig { level: 0.0, ..EvalConfig::default() }, keep_logs: true, log_dir: None }
    }

    fn fake(task: TaskId, ok: bool, c: f64) -> EpisodeResult {
        EpisodeResult {
            task,
            param: 0.0,
            ood: false,
            success: ok,
            status: if ok { Status::Success } else { Status::Failure(FailureReason::Timeout) },
            steps: 1,
            command_distance: c,
            primary_error: c,
            log_path: None,
            log: None,
        }
    }

    #[test]
    fn metric_examples() {
        assert!(matches!(scd(&[]), Err(EvalError::Empty)));
        assert!(matches!(success_rate(&[]), Err(EvalError::Empty)));
        let all = vec![fake(TaskId::Flip, true, 3.0); 4];
        assert_eq!(scd(&all).unwrap(), 0.0);
        assert_eq!(success_rate(&all).unwrap(), 100.0);
        let two = [fake(TaskId::Flip, true, 1.0), fake(TaskId::Flip, false, 4.0)];
        assert_eq!(scd(&two).unwrap(), 2.0);
        assert_eq!(success_rate(&two).unwrap(), 50.0);
    }

    #[test]
    fn ood_labels() {
        assert!(is_ood(&Command::new(TaskId::Rotate, -4.5)));
        assert!(!is_ood(&Command::new(TaskId::Rotate, 4.0)));
        assert!(is_ood(&Command::new(TaskId::Roll, -4.0)));
        assert!(!is_ood(&Command::new(TaskId::Roll, 3.0)));
        assert!(is_ood(&Command::new(TaskId::Flip, 3.9)));
        assert!(!is_ood(&Command::new(TaskId::Flip, 6.0)));
        assert!(!is_ood(&Command::hover()));
    }

    #[test]
    fn zero_episodes() {
        let r = run_eval(&OraclePilot, &EnvConfig::default(), TaskId::Flip, CommandSampler::Sweep, 0, 1, &level0()).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn oracle_is_perfect() {
        for task in TaskId::ALL {
            let r = run_eval(&OraclePilot, &EnvConfig::default(), task, CommandSampler::Sweep, 12, 2, &level0()).unwrap();
            assert_eq!(success_rate(&r).unwrap(), 100.0, "{task:?} {:?}", r.iter().map(|e| (e.param, e.status)).collect::<Vec<_>>());
            assert_eq!(scd(&r).unwrap(), 0.0);
            for e in &r {
                assert!(e.command_distance < 1e-9, "{task:?} {}", e.command_distance);
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let net = PolicyParams::new(
            &NetConfig::default(),
            ActionScale::from_params(&MavParams::default()),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let opts = EvalOptions { config: EvalConfig { horizon: 60, ..EvalConfig::default() }, ..EvalOptions::default() };
        let a = run_eval(&net, &EnvConfig::default(), TaskId::Rotate, CommandSampler::Sweep, 6, 9, &opts).unwrap();
        let b = run_eval(&net, &EnvConfig::default(), TaskId::Rotate, CommandSampler::Sweep, 6, 9, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hover_boundary_is_failure() {
        let log = EpisodeResultLog::hover_at(0.1);
        let th = crate::tasks::SuccessThresholds::default();
        assert!(!success(&log, &Command::hover(), &th).unwrap());
    }

    struct EpisodeResultLog;
    impl EpisodeResultLog {
        fn hover_at(err: f64) -> crate::tasks::EpisodeSummary {
            crate::tasks::EpisodeSummary {
                finished: true,
                final_position_error: err,
                final_attitude_error: 0.0,
                cumulative_pitch: 0.0,
                final_roll_error: 0.0,
                mean_radius_error: 0.0,
            }
        }
    }

    #[test]
    fn report_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut results = vec![fake(TaskId::Flip, true, 0.0), fake(TaskId::Flip, false, 2.0)];
        results[1].ood = true;
        let rep = emit_report(&results, dir.path()).unwrap();
        let back: EvalReport = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(rep, back);
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "task,n,sr_pct,scd,primary_error,split");
        assert_eq!(lines.next().unwrap(), "flip,2,50.000000,1.000000,1.000000,all");
        assert_eq!(lines.next().unwrap(), "flip,1,100.000000,0.000000,0.000000,in");
        assert_eq!(lines.next().unwrap(), "flip,1,0.000000,2.000000,2.000000,ood");

        let empty = emit_report(&[], dir.path()).unwrap();
        assert_eq!(empty.n, 0);
        assert!(empty.rows.iter().all(|r| r.sr_pct.is_none() && r.scd.is_none()));
    }
}
