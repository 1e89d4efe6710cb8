//! PPO with GAE over a batch of environments, each episode carrying one
//! sampled command, with per-task value heads and a randomization
//! curriculum.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvConfig};
use crate::nets::checkpoint::{save_checkpoint, CheckpointError};
use crate::nets::{ActionScale, ActorTrace, CriticTrace, NetConfig, NetError, PolicyParams, ACTION_DIM};
use crate::tasks::{Command, FailureReason, Observation, Status, TaskConfig, TaskId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid PPO config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub n_envs: usize,
    /// Steps per environment per rollout.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: u64,
    /// Fraction of training over which the randomization level ramps 0 → 1.
    pub curriculum_ramp: f64,
    /// Iterations between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_envs: 128,
            rollout_len: 64,
            epochs: 4,
            minibatches: 8,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            learning_rate: 3e-4,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            total_steps: 2_000_000,
            curriculum_ramp: 0.5,
            checkpoint_every: 50,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.n_envs == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("n_envs, rollout_len, epochs and minibatches must be positive");
        }
        if self.minibatches > self.n_envs * self.rollout_len {
            return bad("more minibatches than samples");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0 && self.curriculum_ramp > 0.0) {
            return bad("learning_rate, max_grad_norm and curriculum_ramp must be positive");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.rollout_len
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub env: EnvConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    /// Multiplies raw rewards before learning.
    pub reward_scale: f64,
    pub seed: u64,
    /// Recorded in checkpoints.
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub level: f64,
    pub progress: f64,
}

/// Linear ramp of the randomization level over the first `ramp` of training;
/// never decreases.
pub fn curriculum_step(state: CurriculumState, progress: f64, ramp: f64) -> CurriculumState {
    let progress = progress.clamp(0.0, 1.0);
    let level = (progress / ramp).min(1.0).max(state.level);
    CurriculumState { level, progress }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + self.eps);
        }
    }
}

/// Scales `g` so its L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
    n
}

/// Step-major storage: row `t * n_envs + e`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub obs: Vec<Observation>,
    pub obs_clean: Vec<Observation>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub log_probs: Vec<f64>,
    /// Scaled rewards, including the truncation bootstrap.
    pub rewards: Vec<f64>,
    /// Unscaled reward of the step.
    pub raw_rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub tasks: Vec<TaskId>,
    /// Value of each environment's observation after the last step.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn clear(&mut self, n_envs: usize) {
        *self = Self { n_envs, ..Self::default() };
    }
}

/// GAE over a step-major buffer. A `done` row ends its episode: nothing is
/// bootstrapped across it.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    n_envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let steps = n / n_envs.max(1);
    let mut adv = vec![0.0; n];
    for e in 0..n_envs {
        let mut next_v = last_values[e];
        let mut next_a = 0.0;
        for t in (0..steps).rev() {
            let i = t * n_envs + e;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_v * live - values[i];
            next_a = delta + gamma * lambda * live * next_a;
            adv[i] = next_a;
            next_v = values[i];
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub task: TaskId,
    pub param: f64,
    pub length: usize,
    pub raw_return: f64,
    pub status: Status,
}

#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub env: Env,
    pub rng: ChaCha8Rng,
    ep_return: f64,
    ep_len: usize,
}

pub fn sample_training_command<R: Rng + ?Sized>(rng: &mut R, tasks: &TaskConfig) -> Command {
    let pool: &[TaskId] = if tasks.train_tasks.is_empty() { &TaskId::ALL } else { &tasks.train_tasks };
    let task = pool[rng.random_range(0..pool.len())];
    tasks.sample_command(rng, task)
}

impl EnvSlot {
    pub fn new(cfg: Arc<EnvConfig>, seed: u64, index: u64, level: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index + 1);
        let mut env = Env::new(cfg);
        let cmd = sample_training_command(&mut rng, env.task_config());
        env.reset(&mut rng, level, cmd);
        Self { env, rng, ep_return: 0.0, ep_len: 0 }
    }
}

struct StepRecord {
    obs: Observation,
    obs_clean: Observation,
    action: [f64; ACTION_DIM],
    log_prob: f64,
    reward: f64,
    raw_reward: f64,
    value: f64,
    done: bool,
    task: TaskId,
    finished: Option<EpisodeStat>,
}

fn slot_step(
    slot: &mut EnvSlot,
    policy: &PolicyParams,
    level: f64,
    gamma: f64,
    reward_scale: f64,
) -> Result<StepRecord, NetError> {
    let obs = slot.env.observe(Some(&mut slot.rng));
    let obs_clean = slot.env.observe_clean();
    let task = slot.env.cmd.task;
    let dist = policy.actor_forward(&obs)?;
    let u = dist.sample(&mut slot.rng);
    let log_prob = dist.log_prob(&u);
    let value = policy.critic_forward(&obs_clean, task)?;
    let info = slot.env.step(&policy.scale.to_action(&u));
    let raw = info.reward.r_total;
    let mut reward = raw * reward_scale;
    slot.ep_return += raw;
    slot.ep_len += 1;
    let done = info.status.is_terminal();
    let mut finished = None;
    if done {
        // only crashes are true terminals; time limits and completed
        // maneuvers bootstrap from the final state
        if !matches!(info.status, Status::Failure(FailureReason::Altitude | FailureReason::Diverged)) {
            reward += gamma * policy.critic_forward(&slot.env.observe_clean(), task)?;
        }
        finished = Some(EpisodeStat {
            task,
            param: slot.env.cmd.param,
            length: slot.ep_len,
            raw_return: slot.ep_return,
            status: info.status,
        });
        slot.ep_return = 0.0;
        slot.ep_len = 0;
        let cmd = sample_training_command(&mut slot.rng, slot.env.task_config());
        slot.env.reset(&mut slot.rng, level, cmd);
    }
    Ok(StepRecord { obs, obs_clean, action: u, log_prob, reward, raw_reward: raw, value, done, task, finished })
}

/// Steps every slot `rollout_len` times, filling `buf`; returns finished
/// episodes in completion order.
pub fn collect_rollouts(
    policy: &PolicyParams,
    slots: &mut [EnvSlot],
    buf: &mut RolloutBuffer,
    level: f64,
    cfg: &PpoConfig,
    reward_scale: f64,
) -> Result<Vec<EpisodeStat>, NetError> {
    buf.clear(slots.len());
    let mut episodes = Vec::new();
    for _ in 0..cfg.rollout_len {
        let records: Vec<StepRecord> = slots
            .par_iter_mut()
            .map(|s| slot_step(s, policy, level, cfg.gamma, reward_scale))
            .collect::<Result<_, _>>()?;
        for r in records {
            buf.obs.push(r.obs);
            buf.obs_clean.push(r.obs_clean);
            buf.actions.push(r.action);
            buf.log_probs.push(r.log_prob);
            buf.rewards.push(r.reward);
            buf.raw_rewards.push(r.raw_reward);
            buf.values.push(r.value);
            buf.dones.push(r.done);
            buf.tasks.push(r.task);
            episodes.extend(r.finished);
        }
    }
    buf.last_values = slots
        .par_iter()
        .map(|s| policy.critic_forward(&s.env.observe_clean(), s.env.cmd.task))
        .collect::<Result<_, _>>()?;
    let (adv, ret) = gae(&buf.rewards, &buf.values, &buf.dones, &buf.last_values, buf.n_envs, cfg.gamma, cfg.lambda);
    buf.advantages = adv;
    buf.returns = ret;
    Ok(episodes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossParts {
    policy: f64,
    value: f64,
    entropy: f64,
    kl: f64,
    clipped: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.policy += o.policy;
        self.value += o.value;
        self.entropy += o.entropy;
        self.kl += o.kl;
        self.clipped += o.clipped;
    }
}

const GRAD_CHUNK: usize = 32;

/// Gradients of the minibatch loss (mean over `idx`), accumulated over
/// fixed chunks and summed in order so results do not depend on threading.
fn minibatch_grads(
    policy: &PolicyParams,
    buf: &RolloutBuffer,
    idx: &[usize],
    adv: &[f64],
    cfg: &PpoConfig,
) -> (Vec<f64>, Vec<f64>, LossParts) {
    let na = policy.actor.n_params();
    let nc = policy.critic.n_params();
    let inv_b = 1.0 / idx.len() as f64;
    let parts: Vec<(Vec<f64>, Vec<f64>, LossParts)> = idx
        .par_chunks(GRAD_CHUNK)
        .zip(adv.par_chunks(GRAD_CHUNK))
        .map(|(ids, advs)| {
            let mut ga = vec![0.0; na];
            let mut gc = vec![0.0; nc];
            let mut lp = LossParts::default();
            let mut at = ActorTrace::default();
            let mut ct = CriticTrace::default();
            for (&i, &a) in ids.iter().zip(advs) {
                let d = policy.actor.forward_trace(&policy.actor_params, &buf.obs[i], &mut at);
                let u = &buf.actions[i];
                let logp = d.log_prob(u);
                let ratio = (logp - buf.log_probs[i]).exp();
                let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                let (s1, s2) = (ratio * a, clipped_ratio * a);
                let unclipped = s1 <= s2;
                lp.policy -= s1.min(s2);
                lp.entropy += d.entropy();
                lp.kl += buf.log_probs[i] - logp;
                if !unclipped {
                    lp.clipped += 1.0;
                }
                let dl_dlogp = if unclipped { -a * ratio } else { 0.0 };
                let mut d_mean = [0.0; ACTION_DIM];
                let mut d_ls = [0.0; ACTION_DIM];
                for k in 0..ACTION_DIM {
                    let var = (2.0 * d.log_std[k]).exp();
                    let diff = u[k] - d.mean[k];
                    d_mean[k] = dl_dlogp * diff / var * inv_b;
                    d_ls[k] = (dl_dlogp * (diff * diff / var - 1.0) - cfg.entropy_coef) * inv_b;
                }
                policy.actor.backward(&policy.actor_params, &at, &d_mean, &d_ls, &mut ga);

                let v = policy.critic.forward_trace(&policy.critic_params, &buf.obs_clean[i], buf.tasks[i], &mut ct);
                let err = v - buf.returns[i];
                lp.value += 0.5 * err * err;
                policy.critic.backward(&policy.critic_params, &ct, cfg.value_coef * err * inv_b, &mut gc);
            }
            (ga, gc, lp)
        })
        .collect();
    let mut ga = vec![0.0; na];
    let mut gc = vec![0.0; nc];
    let mut lp = LossParts::default();
    for (a, c, l) in parts {
        ga.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        gc.iter_mut().zip(&c).for_each(|(x, y)| *x += y);
        lp.add(&l);
    }
    (ga, gc, lp)
}

/// Clipped-surrogate PPO epochs over the buffer.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    adam_actor: &mut Adam,
    adam_critic: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut R,
) -> UpdateStats {
    let n = buf.len();
    let mb_size = n / cfg.minibatches;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut counted = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for mb in order.chunks_exact(mb_size) {
            let raw: Vec<f64> = mb.iter().map(|&i| buf.advantages[i]).collect();
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let sd = (raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
            let adv: Vec<f64> = raw.iter().map(|a| (a - mean) / (sd + 1e-8)).collect();
            let (mut ga, mut gc, lp) = minibatch_grads(policy, buf, mb, &adv, cfg);
            let b = mb.len() as f64;
            let total = lp.policy / b - cfg.entropy_coef * lp.entropy / b + cfg.value_coef * lp.value / b;
            if !total.is_finite() || ga.iter().chain(&gc).any(|g| !g.is_finite()) {
                stats.skipped += 1;
                continue;
            }
            clip_grad_norm(&mut ga, cfg.max_grad_norm);
            clip_grad_norm(&mut gc, cfg.max_grad_norm);
            adam_actor.step(&mut policy.actor_params, &ga, cfg.learning_rate);
            adam_critic.step(&mut policy.critic_params, &gc, cfg.learning_rate);
            stats.policy_loss += lp.policy / b;
            stats.value_loss += lp.value / b;
            stats.entropy += lp.entropy / b;
            stats.approx_kl += lp.kl / b;
            stats.clip_frac += lp.clipped / b;
            counted += 1.0;
        }
    }
    if counted > 0.0 {
        stats.policy_loss /= counted;
        stats.value_loss /= counted;
        stats.entropy /= counted;
        stats.approx_kl /= counted;
        stats.clip_frac /= counted;
    }
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub env_steps: u64,
    pub level: f64,
    pub episodes: usize,
    /// Mean unscaled per-step reward by task, `None` if the task was absent.
    pub mean_reward: [Option<f64>; 4],
    /// Success fraction of the episodes finished this iteration, by task.
    pub success_rate: [Option<f64>; 4],
    pub update: UpdateStats,
    pub elapsed_s: f64,
}

pub const METRICS_HEADER: &str = "iteration,env_steps,level,episodes,reward_hover,reward_rotate,reward_flip,reward_roll,\
sr_hover,sr_rotate,sr_flip,sr_roll,policy_loss,value_loss,entropy,approx_kl,clip_frac,skipped_updates,elapsed_s";

impl IterationStats {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut cols = vec![
            self.iteration.to_string(),
            self.env_steps.to_string(),
            format!("{:.4}", self.level),
            self.episodes.to_string(),
        ];
        cols.extend(self.mean_reward.iter().map(|v| opt(*v)));
        cols.extend(self.success_rate.iter().map(|v| opt(*v)));
        let u = &self.update;
        cols.extend([u.policy_loss, u.value_loss, u.entropy, u.approx_kl, u.clip_frac].map(|x| format!("{x:.6}")));
        cols.push(u.skipped.to_string());
        cols.push(format!("{:.3}", self.elapsed_s));
        cols.join(",")
    }
}

pub struct Trainer {
    pub spec: TrainSpec,
    pub policy: PolicyParams,
    adam_actor: Adam,
    adam_critic: Adam,
    slots: Vec<EnvSlot>,
    buffer: RolloutBuffer,
    rng: ChaCha8Rng,
    pub curriculum: CurriculumState,
    pub env_steps: u64,
    pub iteration: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(spec: TrainSpec) -> Result<Self, TrainError> {
        spec.ppo.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = ActionScale::from_params(&spec.env.dynamics.params);
        let policy = PolicyParams::new(&spec.net, scale, &mut rng)?;
        Ok(Self::with_policy(spec, policy, rng))
    }

    /// Starts from an existing policy (fresh optimizer state).
    pub fn from_policy(spec: TrainSpec, policy: PolicyParams) -> Result<Self, TrainError> {
        spec.ppo.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self::with_policy(spec, policy, rng))
    }

    fn with_policy(spec: TrainSpec, policy: PolicyParams, rng: ChaCha8Rng) -> Self {
        let env_cfg = Arc::new(spec.env.clone());
        let slots = (0..spec.ppo.n_envs).map(|e| EnvSlot::new(env_cfg.clone(), spec.seed, e as u64, 0.0)).collect();
        Self {
            adam_actor: Adam::new(policy.actor.n_params()),
            adam_critic: Adam::new(policy.critic.n_params()),
            policy,
            slots,
            buffer: RolloutBuffer::default(),
            rng,
            curriculum: CurriculumState { level: 0.0, progress: 0.0 },
            env_steps: 0,
            iteration: 0,
            started: Instant::now(),
            spec,
        }
    }

    pub fn done(&self) -> bool {
        self.env_steps >= self.spec.ppo.total_steps
    }

    pub fn buffer(&self) -> &RolloutBuffer {
        &self.buffer
    }

    /// One rollout plus one update.
    pub fn iterate(&mut self) -> Result<IterationStats, TrainError> {
        let progress = self.env_steps as f64 / self.spec.ppo.total_steps.max(1) as f64;
        self.curriculum = curriculum_step(self.curriculum, progress, self.spec.ppo.curriculum_ramp);
        let episodes = collect_rollouts(
            &self.policy,
            &mut self.slots,
            &mut self.buffer,
            self.curriculum.level,
            &self.spec.ppo,
            self.spec.reward_scale,
        )?;
        self.env_steps += self.buffer.len() as u64;
        let update = ppo_update(
            &mut self.policy,
            &mut self.adam_actor,
            &mut self.adam_critic,
            &self.buffer,
            &self.spec.ppo,
            &mut self.rng,
        );
        self.iteration += 1;

        let mut reward_sum = [0.0; 4];
        let mut reward_n = [0usize; 4];
        for (r, t) in self.buffer.raw_rewards.iter().zip(&self.buffer.tasks) {
            reward_sum[t.index()] += r;
            reward_n[t.index()] += 1;
        }
        let mut succ = [0usize; 4];
        let mut eps = [0usize; 4];
        for e in &episodes {
            eps[e.task.index()] += 1;
            if e.status == Status::Success {
                succ[e.task.index()] += 1;
            }
        }
        Ok(IterationStats {
            iteration: self.iteration,
            env_steps: self.env_steps,
            level: self.curriculum.level,
            episodes: episodes.len(),
            mean_reward: std::array::from_fn(|i| (reward_n[i] > 0).then(|| reward_sum[i] / reward_n[i] as f64)),
            success_rate: std::array::from_fn(|i| (eps[i] > 0).then(|| succ[i] as f64 / eps[i] as f64)),
            update,
            elapsed_s: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(&self.policy, path, &self.spec.config_hash, self.env_steps)?;
        Ok(())
    }

    /// Trains to `total_steps`. With a run directory, appends metrics to
    /// `metrics/train.csv` and writes checkpoints under `checkpoints/`
    /// (ending with `final.json`).
    pub fn run(&mut self, run_dir: Option<&Path>, mut on_iter: impl FnMut(&IterationStats)) -> Result<(), TrainError> {
        let mut csv = match run_dir {
            Some(dir) => {
                let path = dir.join("metrics").join("train.csv");
                let io = |source| TrainError::Io { path: path.clone(), source };
                fs::create_dir_all(path.parent().expect("has parent")).map_err(io)?;
                let mut f = File::create(&path).map_err(io)?;
                writeln!(f, "{METRICS_HEADER}").map_err(io)?;
                Some((f, path))
            }
            None => None,
        };
        while !self.done() {
            let stats = self.iterate()?;
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{}", stats.csv_row()).map_err(|source| TrainError::Io { path: path.clone(), source })?;
            }
            on_iter(&stats);
            if let Some(dir) = run_dir {
                let every = self.spec.ppo.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    self.save(&dir.join("checkpoints").join(format!("iter_{:05}.json", self.iteration)))?;
                }
            }
        }
        if let Some(dir) = run_dir {
            self.save(&dir.join("checkpoints").join("final.json"))?;
        }
        Ok(())
    }
}
