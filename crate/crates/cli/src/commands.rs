use std::fs;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use tracing::info;

use aerobat::checks::{invariance_suite, SuiteOptions};
use aerobat::composer::{builtin_scripts, load_script, run_script, run_script_with, RunOptions, ScriptError, Trigger};
use aerobat::config::{init_run_dir, load_config, LoadedConfig, MAX_TIME_SCALE};
use aerobat::eval::{emit_report, run_eval, CommandSampler, EvalError, EvalOptions, OraclePilot, Pilot};
use aerobat::nets::checkpoint::load_checkpoint;
use aerobat::nets::PolicyParams;
use aerobat::tasks::TaskId;
use aerobat::trainer::{TrainError, Trainer};
use aerobat_simsvc::{start, ServiceInfo, SimCore};

use crate::{Ablation, Backbone, Command, ConfigArgs, Failure, TaskArg};

type Result<T> = std::result::Result<T, Failure>;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, out, force, seed, ablation, backbone } => train(cfg, &out, force, seed, ablation, backbone),
        Command::Eval { cfg, checkpoint, task, episodes, seed, out, force, logs } => {
            eval(cfg, &checkpoint, task, episodes, seed, &out, force, logs)
        }
        Command::Run { cfg, checkpoint, oracle: _, script, out, force, seed, manual_at, tail, max_time } => {
            let opts = RunOptions { tail_s: tail, max_s: max_time, seed };
            run(cfg, checkpoint.as_deref(), &script, &out, force, &opts, manual_at)
        }
        Command::Serve { cfg, checkpoint, oracle: _, addr, timescale, seed } => serve(cfg, checkpoint.as_deref(), addr, timescale, seed),
        Command::CheckEquivariance { trials, state_trials, seed, out } => check(trials, state_trials, seed, out.as_deref()),
        Command::Scripts { show } => scripts(show.as_deref()),
    }
}

fn load(cfg: &ConfigArgs, extra: Vec<String>) -> Result<LoadedConfig> {
    let mut overrides = cfg.overrides.clone();
    overrides.extend(extra);
    load_config(cfg.config.as_deref(), &overrides).map_err(Failure::user)
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::Io { .. } => Failure::user(e),
        TrainError::Net(_) | TrainError::Checkpoint(_) => Failure::internal(e),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Empty | EvalError::Io { .. } => Failure::user(e),
        EvalError::Net(_) => Failure::internal(e),
    }
}

fn script_failure(e: ScriptError) -> Failure {
    match e {
        ScriptError::Net(_) => Failure::internal(e),
        _ => Failure::user(e),
    }
}

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(Failure::user(anyhow!("{} already exists and is not empty (use --force to reuse it)", dir.display())));
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).map_err(Failure::user)
}

/// Loads a checkpoint. An explicit configuration binds the network hash.
fn load_policy(cfg: &ConfigArgs, loaded: &LoadedConfig, path: &Path) -> Result<(PolicyParams, String)> {
    let explicit = cfg.config.is_some() || !cfg.overrides.is_empty();
    let expected = explicit.then_some(loaded.network_hash.as_str());
    let (policy, manifest) = load_checkpoint(path, expected).map_err(Failure::user)?;
    info!(path = %path.display(), steps = manifest.env_steps, network = %manifest.network_hash, "loaded checkpoint");
    Ok((policy, manifest.network_hash))
}

fn train(cfg: ConfigArgs, out: &Path, force: bool, seed: Option<u64>, ablation: Option<Ablation>, backbone: Option<Backbone>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = seed {
        extra.push(format!("seed={s}"));
    }
    if let Some(b) = backbone {
        extra.push(format!("network.backbone={}", if b == Backbone::Mlp { "mlp" } else { "emlp" }));
    }
    if let Some(a) = ablation {
        let (film, multihead) = match a {
            Ablation::Backbone => (false, false),
            Ablation::Film => (true, false),
            Ablation::Multihead => (false, true),
            Ablation::Full => (true, true),
        };
        extra.push(format!("network.film={film}"));
        extra.push(format!("network.multihead={multihead}"));
    }
    let loaded = load(&cfg, extra)?;
    init_run_dir(out, &loaded, force).map_err(Failure::user)?;
    let mut trainer = Trainer::new(loaded.config.train_spec()).map_err(train_failure)?;
    info!(
        run = %out.display(),
        config = %loaded.hash,
        params = ?trainer.policy.n_params(),
        total_steps = loaded.config.ppo.total_steps,
        "training"
    );
    trainer
        .run(Some(out), |s| {
            let sr: Vec<String> = s.success_rate.iter().map(|x| x.map_or("-".into(), |v| format!("{:.2}", v))).collect();
            info!(
                iter = s.iteration,
                steps = s.env_steps,
                level = format_args!("{:.2}", s.level),
                sr = %sr.join("/"),
                kl = format_args!("{:.4}", s.update.approx_kl),
                "iteration"
            );
        })
        .map_err(train_failure)?;
    println!("{}", out.join("checkpoints").join("final.json").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cfg: ConfigArgs,
    checkpoint: &Path,
    task: TaskArg,
    episodes: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    force: bool,
    logs: bool,
) -> Result<()> {
    let loaded = load(&cfg, Vec::new())?;
    let (policy, _) = load_policy(&cfg, &loaded, checkpoint)?;
    ensure_out_dir(out, force)?;
    let tasks = match task {
        TaskArg::All => TaskId::ALL.to_vec(),
        TaskArg::Hover => vec![TaskId::Hover],
        TaskArg::Flip => vec![TaskId::Flip],
        TaskArg::Roll => vec![TaskId::Roll],
        TaskArg::Rotate => vec![TaskId::Rotate],
    };
    let n = episodes.unwrap_or(loaded.config.eval.episodes);
    if n == 0 {
        return Err(Failure::user(anyhow!("--episodes must be positive")));
    }
    let seed = seed.unwrap_or(loaded.config.seed);
    let opts = EvalOptions { config: loaded.config.eval.clone(), keep_logs: false, log_dir: logs.then(|| out.join("logs")) };
    let env_cfg = loaded.config.env_config();
    let mut results = Vec::new();
    for t in tasks {
        info!(task = %t, episodes = n, "evaluating");
        results.extend(run_eval(&policy, &env_cfg, t, CommandSampler::Sweep, n, seed, &opts).map_err(eval_failure)?);
    }
    let report = emit_report(&results, out).map_err(eval_failure)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn pilot(cfg: &ConfigArgs, loaded: &LoadedConfig, checkpoint: Option<&Path>) -> Result<(Arc<dyn Pilot + Send + Sync>, String)> {
    match checkpoint {
        Some(path) => {
            let (p, hash) = load_policy(cfg, loaded, path)?;
            Ok((Arc::new(p), hash))
        }
        None => Ok((Arc::new(OraclePilot), "oracle".into())),
    }
}

fn describe(t: &Trigger) -> String {
    match t {
        Trigger::Start => "start".into(),
        Trigger::AfterDone => "after previous completes".into(),
        Trigger::AfterTime { seconds } => format!("after {seconds} s"),
        Trigger::Manual => "manual".into(),
    }
}

fn run(
    cfg: ConfigArgs,
    checkpoint: Option<&Path>,
    script: &str,
    out: &Path,
    force: bool,
    opts: &RunOptions,
    manual_at: Option<Vec<usize>>,
) -> Result<()> {
    if !(opts.tail_s >= 0.0 && opts.max_s > 0.0) {
        return Err(Failure::user(anyhow!("--tail must be non-negative and --max-time positive")));
    }
    let loaded = load(&cfg, Vec::new())?;
    let script = load_script(script).map_err(script_failure)?;
    let (pilot, _) = pilot(&cfg, &loaded, checkpoint)?;
    ensure_out_dir(out, force)?;
    let env_cfg = loaded.config.env_config();
    let result = match manual_at {
        Some(steps) => run_script(&script, pilot.as_ref(), &env_cfg, opts, &steps),
        None => {
            let stdin = std::io::stdin();
            let mut lines = stdin.lock().lines();
            let mut open = true;
            run_script_with(&script, pilot.as_ref(), &env_cfg, opts, |step, runner| {
                if !open || !runner.awaiting_manual() {
                    return 0;
                }
                eprintln!("step {}: waiting for a manual trigger (press Enter)", runner.pending().unwrap_or_default());
                match lines.next() {
                    Some(Ok(_)) => {
                        info!(step, "manual trigger");
                        1
                    }
                    _ => {
                        open = false;
                        0
                    }
                }
            })
        }
    }
    .map_err(script_failure)?;
    result.write(out).map_err(script_failure)?;
    for f in &result.firings {
        println!(
            "step {} ({}): {} {} at t = {:.2} s (policy step {})",
            f.index,
            describe(&f.trigger),
            f.task,
            f.param,
            f.t,
            f.step
        );
    }
    println!("outcome: {:?} after {} steps", result.outcome, result.frames.len());
    Ok(())
}

fn serve(cfg: ConfigArgs, checkpoint: Option<&Path>, addr: Option<String>, timescale: Option<f64>, seed: u64) -> Result<()> {
    let loaded = load(&cfg, Vec::new())?;
    let svc = &loaded.config.service;
    let time_scale = timescale.unwrap_or(svc.time_scale);
    if !(time_scale > 0.0 && time_scale <= MAX_TIME_SCALE) {
        return Err(Failure::user(anyhow!("--timescale must lie in (0, {MAX_TIME_SCALE}], got {time_scale}")));
    }
    let addr = addr.unwrap_or_else(|| svc.addr.clone());
    let (pilot, network_hash) = pilot(&cfg, &loaded, checkpoint)?;
    let core = SimCore::new(loaded.config.env_config(), pilot, seed, time_scale);
    let info =
        ServiceInfo { config_hash: loaded.hash.clone(), network_hash, telemetry_hz: svc.telemetry_hz, client_queue: svc.client_queue };
    let rt = tokio::runtime::Runtime::new().map_err(Failure::internal)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))
            .map_err(Failure::user)?;
        let running = start(core, info, listener).await.map_err(Failure::internal)?;
        info!("serving ws://{}/ws (ctrl-c to stop)", running.addr);
        println!("ws://{}/ws", running.addr);
        let _ = tokio::signal::ctrl_c().await;
        running.shutdown().await;
        Ok(())
    })
}

fn check(trials: usize, state_trials: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if trials == 0 || state_trials == 0 {
        return Err(Failure::user(anyhow!("trial counts must be positive")));
    }
    let report = invariance_suite(&SuiteOptions { net_trials: trials, state_trials, seed }).map_err(Failure::internal)?;
    let text = serde_json::to_string_pretty(&report).map_err(Failure::internal)?;
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("cannot write {}", path.display())).map_err(Failure::user)?;
    }
    println!("{text}");
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(Failure::internal(anyhow!("symmetry checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn scripts(show: Option<&str>) -> Result<()> {
    let all = builtin_scripts();
    if let Some(name) = show {
        let s = all.get(name).ok_or_else(|| Failure::user(anyhow!("unknown built-in script `{name}`")))?;
        println!("{}", serde_json::to_string_pretty(s).map_err(Failure::internal)?);
        return Ok(());
    }
    for (name, s) in &all {
        println!("{name}");
        for (i, step) in s.steps.iter().enumerate() {
            println!("  {i}: {:<26} {} {}", describe(&step.trigger), step.task, step.param);
        }
    }
    Ok(())
}
