//! Actor and critic networks: optional FiLM command conditioning, an
//! equivariant (or plain MLP) trunk, and linear heads, all over flat
//! parameter vectors with hand-written reverse-mode gradients.

pub mod checkpoint;
pub mod layers;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{Action, MavParams, Vec3};
use crate::symmetry::FeatureLayout;
use crate::tasks::{Observation, TaskId, COMMAND_DIM, OBS_DIM, REL_STATE_DIM};
use layers::{Dense, EquivLinear, Film, FilmTrace, Gate, ParamAlloc};

pub const ACTION_DIM: usize = 4;
pub const FEATURE_DIM: usize = REL_STATE_DIM + 4;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite activation in {0}")]
    NonFinite(&'static str),
    #[error("invalid network config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mlp,
    Emlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub backbone: BackboneKind,
    pub film: bool,
    pub multihead: bool,
    pub hidden_layers: usize,
    /// Equivariant trunk width: vector pairs and scalars per hidden layer
    /// (plus one gate scalar per pair).
    pub hidden_pairs: usize,
    pub hidden_scalars: usize,
    pub mlp_width: usize,
    pub film_hidden: usize,
    pub init_log_std: f64,
    /// Grouping of the 22 state features into vector pairs and scalars.
    pub input_layout: FeatureLayout,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Emlp,
            film: true,
            multihead: true,
            hidden_layers: 2,
            hidden_pairs: 16,
            hidden_scalars: 32,
            mlp_width: 64,
            film_hidden: 32,
            init_log_std: -1.6,
            input_layout: FeatureLayout::observation_features(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_layout.dim() != FEATURE_DIM {
            return Err(NetError::BadConfig(format!(
                "input_layout must cover {FEATURE_DIM} features, has {}",
                self.input_layout.dim()
            )));
        }
        if self.hidden_layers == 0 {
            return Err(NetError::BadConfig("hidden_layers must be at least 1".into()));
        }
        let width = match self.backbone {
            BackboneKind::Mlp => self.mlp_width,
            BackboneKind::Emlp => self.hidden_pairs + self.hidden_scalars,
        };
        if width == 0 || (self.film && self.film_hidden == 0) {
            return Err(NetError::BadConfig("layer widths must be positive".into()));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return Err(NetError::BadConfig("init_log_std outside [-5, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    /// The ablation grid: backbone × FiLM × multi-head.
    pub fn ablation(backbone: BackboneKind, film: bool, multihead: bool) -> Self {
        Self { backbone, film, multihead, ..Self::default() }
    }
}

/// Maps normalized actions in [−1, 1]⁴ to physical commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    pub max_collective: f64,
    pub omega_max: f64,
    pub hover_thrust: f64,
}

impl ActionScale {
    pub fn from_params(p: &MavParams) -> Self {
        Self { max_collective: p.max_collective(), omega_max: p.omega_max, hover_thrust: p.hover_thrust() }
    }

    pub fn to_action(&self, u: &[f64; ACTION_DIM]) -> Action {
        let c = |x: f64| x.clamp(-1.0, 1.0);
        Action {
            thrust: 0.5 * (c(u[0]) + 1.0) * self.max_collective,
            rates: Vec3::new(c(u[1]), c(u[2]), c(u[3])) * self.omega_max,
        }
    }

    pub fn normalize(&self, a: &Action) -> [f64; ACTION_DIM] {
        [
            2.0 * a.thrust / self.max_collective - 1.0,
            a.rates.x / self.omega_max,
            a.rates.y / self.omega_max,
            a.rates.z / self.omega_max,
        ]
    }
}

/// Diagonal Gaussian over normalized actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub mean: [f64; ACTION_DIM],
    pub log_std: [f64; ACTION_DIM],
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl ActionDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; ACTION_DIM] {
        std::array::from_fn(|i| self.mean[i] + self.log_std[i].exp() * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn log_prob(&self, u: &[f64; ACTION_DIM]) -> f64 {
        (0..ACTION_DIM)
            .map(|i| {
                let z = (u[i] - self.mean[i]) / self.log_std[i].exp();
                -0.5 * z * z - self.log_std[i] - HALF_LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 + HALF_LN_2PI).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Linear {
    Dense(Dense),
    Equiv(EquivLinear),
}

impl Linear {
    fn n_params(&self) -> usize {
        match self {
            Linear::Dense(d) => d.n_params(),
            Linear::Equiv(e) => e.n_params(),
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Linear::Dense(d) => (d.n_in, d.n_out),
            Linear::Equiv(e) => (e.dim_in(), e.dim_out()),
        }
    }

    fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R, gain: f64) {
        match self {
            Linear::Dense(d) => d.init(p, rng, gain),
            Linear::Equiv(e) => e.init(p, rng, gain),
        }
    }

    fn bias_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        match self {
            Linear::Dense(d) => d.bias_mut(p),
            Linear::Equiv(e) => e.bias_mut(p),
        }
    }

    fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        match self {
            Linear::Dense(d) => d.forward(p, x, y),
            Linear::Equiv(e) => e.forward(p, x, y),
        }
    }

    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        match self {
            Linear::Dense(d) => d.backward(p, x, dy, g, dx),
            Linear::Equiv(e) => e.backward(p, x, dy, g, dx),
        }
    }

    fn describe(&self) -> checkpoint::LayerShape {
        let (n_in, n_out) = self.dims();
        let kind = match self {
            Linear::Dense(_) => "dense",
            Linear::Equiv(_) => "equiv_linear",
        };
        checkpoint::LayerShape { kind: kind.into(), n_in, n_out, n_params: self.n_params() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activation {
    Elu,
    Gate(Gate),
}

impl Activation {
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Activation::Elu => {
                for (a, b) in y.iter_mut().zip(x) {
                    *a = layers::elu(*b);
                }
            }
            Activation::Gate(g) => g.forward(x, y),
        }
    }

    fn backward(&self, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        match self {
            Activation::Elu => {
                for ((d, g), xi) in dx.iter_mut().zip(dy).zip(x) {
                    *d = g * layers::elu_grad(*xi);
                }
            }
            Activation::Gate(g) => g.backward(x, dy, dx),
        }
    }
}

/// Conditioning plus trunk, shared by actor and critic.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    film: Option<Film>,
    layers: Vec<(Linear, Activation)>,
    out_layout: FeatureLayout,
}

#[derive(Debug, Clone, Default)]
pub struct BodyTrace {
    film: FilmTrace,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl BodyTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl Body {
    fn new(alloc: &mut ParamAlloc, cfg: &NetConfig) -> Self {
        let film = cfg.film.then(|| Film::new(alloc, COMMAND_DIM, cfg.film_hidden, FEATURE_DIM));
        let in_layout = if cfg.film {
            cfg.input_layout.clone()
        } else {
            cfg.input_layout.with_extra_scalars(COMMAND_DIM)
        };
        let mut layers = Vec::new();
        let out_layout = match cfg.backbone {
            BackboneKind::Emlp => {
                let gate = Gate { pairs: cfg.hidden_pairs, scalars: cfg.hidden_scalars };
                let mut prev = in_layout;
                for _ in 0..cfg.hidden_layers {
                    layers.push((Linear::Equiv(EquivLinear::new(alloc, &prev, &gate.layout())), Activation::Gate(gate)));
                    prev = gate.layout();
                }
                prev
            }
            BackboneKind::Mlp => {
                let mut n = in_layout.dim();
                for _ in 0..cfg.hidden_layers {
                    layers.push((Linear::Dense(Dense::new(alloc, n, cfg.mlp_width)), Activation::Elu));
                    n = cfg.mlp_width;
                }
                FeatureLayout::scalars_only(n)
            }
        };
        Self { film, layers, out_layout }
    }

    fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        if let Some(f) = &self.film {
            f.init(p, rng);
        }
        for (l, _) in &self.layers {
            l.init(p, rng, 1.0);
        }
    }

    fn forward(&self, p: &[f64], obs: &[f64], t: &mut BodyTrace) {
        debug_assert_eq!(obs.len(), OBS_DIM);
        t.input.clear();
        match &self.film {
            Some(f) => {
                t.input.resize(FEATURE_DIM, 0.0);
                f.forward(p, &obs[..FEATURE_DIM], &obs[FEATURE_DIM..], &mut t.input, &mut t.film);
            }
            None => t.input.extend_from_slice(obs),
        }
        t.pre.resize(self.layers.len(), Vec::new());
        t.post.resize(self.layers.len(), Vec::new());
        for (i, (lin, act)) in self.layers.iter().enumerate() {
            let n_out = lin.dims().1;
            let mut pre = std::mem::take(&mut t.pre[i]);
            let mut post = std::mem::take(&mut t.post[i]);
            pre.resize(n_out, 0.0);
            post.resize(n_out, 0.0);
            lin.forward(p, if i == 0 { &t.input } else { &t.post[i - 1] }, &mut pre);
            act.forward(&pre, &mut post);
            t.pre[i] = pre;
            t.post[i] = post;
        }
    }

    fn backward(&self, p: &[f64], obs: &[f64], t: &BodyTrace, d_out: &[f64], g: &mut [f64]) {
        let mut d = d_out.to_vec();
        let mut d_pre = Vec::new();
        for (i, (lin, act)) in self.layers.iter().enumerate().rev() {
            d_pre.resize(d.len(), 0.0);
            act.backward(&t.pre[i], &d, &mut d_pre);
            let x = if i == 0 { &t.input } else { &t.post[i - 1] };
            let need_dx = i > 0 || self.film.is_some();
            if need_dx {
                d.resize(x.len(), 0.0);
                lin.backward(p, x, &d_pre, g, Some(&mut d));
            } else {
                lin.backward(p, x, &d_pre, g, None);
            }
        }
        if let Some(f) = &self.film {
            f.backward(p, &obs[..FEATURE_DIM], &obs[FEATURE_DIM..], &t.film, &d, g);
        }
    }

    fn describe(&self) -> Vec<checkpoint::LayerShape> {
        let mut out = Vec::new();
        if let Some(f) = &self.film {
            out.push(checkpoint::LayerShape {
                kind: "film".into(),
                n_in: f.l1.n_in,
                n_out: f.n_features,
                n_params: f.n_params(),
            });
        }
        out.extend(self.layers.iter().map(|(l, _)| l.describe()));
        out
    }

    fn head(&self, alloc: &mut ParamAlloc, n_out: usize) -> Linear {
        match self.layers.first() {
            Some((Linear::Equiv(_), _)) => {
                Linear::Equiv(EquivLinear::new(alloc, &self.out_layout, &FeatureLayout::scalars_only(n_out)))
            }
            _ => Linear::Dense(Dense::new(alloc, self.out_layout.dim(), n_out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    body: Body,
    head: Linear,
    log_std_off: usize,
    n_params: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ActorTrace {
    body: BodyTrace,
    obs: Vec<f64>,
    mean: [f64; ACTION_DIM],
}

impl Actor {
    fn new(cfg: &NetConfig) -> Self {
        let mut a = ParamAlloc::default();
        let body = Body::new(&mut a, cfg);
        let head = body.head(&mut a, ACTION_DIM);
        let log_std_off = a.take(ACTION_DIM);
        Self { body, head, log_std_off, n_params: a.len }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R, cfg: &NetConfig, scale: &ActionScale) {
        self.body.init(p, rng);
        self.head.init(p, rng, 0.01);
        // start near hover thrust
        let u_hover = (2.0 * scale.hover_thrust / scale.max_collective - 1.0).clamp(-0.99, 0.99);
        self.head.bias_mut(p)[0] = u_hover.atanh();
        p[self.log_std_off..self.log_std_off + ACTION_DIM].fill(cfg.init_log_std);
    }

    /// Leading parameters owned by the FiLM generator (0 without FiLM).
    pub fn film_len(&self) -> usize {
        self.body.film.as_ref().map_or(0, |f| f.n_params())
    }

    pub fn log_std(&self, p: &[f64]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|i| p[self.log_std_off + i].clamp(LOG_STD_MIN, LOG_STD_MAX))
    }

    pub fn forward_trace(&self, p: &[f64], obs: &Observation, t: &mut ActorTrace) -> ActionDistribution {
        self.body.forward(p, obs.as_slice(), &mut t.body);
        let mut raw = [0.0; ACTION_DIM];
        self.head.forward(p, t.body.output(), &mut raw);
        t.obs.clear();
        t.obs.extend_from_slice(obs.as_slice());
        t.mean = raw.map(f64::tanh);
        ActionDistribution { mean: t.mean, log_std: self.log_std(p) }
    }

    pub fn forward(&self, p: &[f64], obs: &Observation) -> Result<ActionDistribution, NetError> {
        let d = self.forward_trace(p, obs, &mut ActorTrace::default());
        if d.mean.iter().all(|m| m.is_finite()) {
            Ok(d)
        } else {
            Err(NetError::NonFinite("actor"))
        }
    }

    /// Accumulates ∂L/∂θ given ∂L/∂mean and ∂L/∂log_std.
    pub fn backward(&self, p: &[f64], t: &ActorTrace, d_mean: &[f64; ACTION_DIM], d_log_std: &[f64; ACTION_DIM], g: &mut [f64]) {
        let d_raw: Vec<f64> = (0..ACTION_DIM).map(|i| d_mean[i] * (1.0 - t.mean[i] * t.mean[i])).collect();
        let x = t.body.output();
        let mut dx = vec![0.0; x.len()];
        self.head.backward(p, x, &d_raw, g, Some(&mut dx));
        self.body.backward(p, &t.obs, &t.body, &dx, g);
        for i in 0..ACTION_DIM {
            let raw = p[self.log_std_off + i];
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                g[self.log_std_off + i] += d_log_std[i];
            }
        }
    }

    pub fn shapes(&self) -> Vec<checkpoint::LayerShape> {
        let mut v = self.body.describe();
        v.push(self.head.describe());
        v.push(checkpoint::LayerShape { kind: "log_std".into(), n_in: 0, n_out: ACTION_DIM, n_params: ACTION_DIM });
        v
    }

    pub fn film_modulation(&self, p: &[f64], cmd: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        self.body.film.as_ref().map(|f| f.modulation(p, cmd))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    body: Body,
    heads: Vec<Linear>,
    n_params: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CriticTrace {
    body: BodyTrace,
    obs: Vec<f64>,
    head: usize,
}

impl CriticTrace {
    pub fn features(&self) -> &[f64] {
        self.body.output()
    }
}

impl Critic {
    fn new(cfg: &NetConfig) -> Self {
        let mut a = ParamAlloc::default();
        let body = Body::new(&mut a, cfg);
        let n_heads = if cfg.multihead { TaskId::ALL.len() } else { 1 };
        let heads = (0..n_heads).map(|_| body.head(&mut a, 1)).collect();
        Self { body, heads, n_params: a.len }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn film_len(&self) -> usize {
        self.body.film.as_ref().map_or(0, |f| f.n_params())
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn shapes(&self) -> Vec<checkpoint::LayerShape> {
        let mut v = self.body.describe();
        v.extend(self.heads.iter().map(|h| h.describe()));
        v
    }

    pub fn head_index(&self, task: TaskId) -> usize {
        if self.heads.len() == 1 {
            0
        } else {
            task.index()
        }
    }

    fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        self.body.init(p, rng);
        for h in &self.heads {
            h.init(p, rng, 1.0);
        }
    }

    pub fn forward_trace(&self, p: &[f64], obs: &Observation, task: TaskId, t: &mut CriticTrace) -> f64 {
        self.body.forward(p, obs.as_slice(), &mut t.body);
        t.obs.clear();
        t.obs.extend_from_slice(obs.as_slice());
        t.head = self.head_index(task);
        let mut v = [0.0];
        self.heads[t.head].forward(p, t.body.output(), &mut v);
        v[0]
    }

    pub fn forward(&self, p: &[f64], obs: &Observation, task: TaskId) -> Result<f64, NetError> {
        let v = self.forward_trace(p, obs, task, &mut CriticTrace::default());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NetError::NonFinite("critic"))
        }
    }

    pub fn backward(&self, p: &[f64], t: &CriticTrace, dv: f64, g: &mut [f64]) {
        let x = t.body.output();
        let mut dx = vec![0.0; x.len()];
        self.heads[t.head].backward(p, x, &[dv], g, Some(&mut dx));
        self.body.backward(p, &t.obs, &t.body, &dx, g);
    }
}

/// Actor and critic structure plus their parameter vectors.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub config: NetConfig,
    pub scale: ActionScale,
    pub actor: Actor,
    pub critic: Critic,
    pub actor_params: Vec<f64>,
    pub critic_params: Vec<f64>,
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(cfg: &NetConfig, scale: ActionScale, rng: &mut R) -> Result<Self, NetError> {
        cfg.validate()?;
        let actor = Actor::new(cfg);
        let critic = Critic::new(cfg);
        let mut actor_params = vec![0.0; actor.n_params()];
        let mut critic_params = vec![0.0; critic.n_params()];
        actor.init(&mut actor_params, rng, cfg, &scale);
        critic.init(&mut critic_params, rng);
        Ok(Self { config: cfg.clone(), scale, actor, critic, actor_params, critic_params })
    }

    /// Structure only, parameters zeroed; used when loading checkpoints.
    pub fn skeleton(cfg: &NetConfig, scale: ActionScale) -> Result<Self, NetError> {
        cfg.validate()?;
        let actor = Actor::new(cfg);
        let critic = Critic::new(cfg);
        Ok(Self {
            config: cfg.clone(),
            scale,
            actor_params: vec![0.0; actor.n_params()],
            critic_params: vec![0.0; critic.n_params()],
            actor,
            critic,
        })
    }

    pub fn actor_forward(&self, obs: &Observation) -> Result<ActionDistribution, NetError> {
        self.actor.forward(&self.actor_params, obs)
    }

    pub fn critic_forward(&self, obs: &Observation, task: TaskId) -> Result<f64, NetError> {
        self.critic.forward(&self.critic_params, obs, task)
    }

    /// Deterministic (mean) physical action.
    pub fn act_deterministic(&self, obs: &Observation) -> Result<Action, NetError> {
        Ok(self.scale.to_action(&self.actor_forward(obs)?.mean))
    }

    pub fn n_params(&self) -> (usize, usize) {
        (self.actor.n_params(), self.critic.n_params())
    }

    pub fn trunk_params(&self) -> usize {
        self.actor.body.layers.iter().map(|(l, _)| l.n_params()).sum()
    }
}

/// Policy for one cell of the ablation grid.
pub fn build_ablation<R: Rng + ?Sized>(
    backbone: BackboneKind,
    film: bool,
    multihead: bool,
    scale: ActionScale,
    rng: &mut R,
) -> Result<PolicyParams, NetError> {
    PolicyParams::new(&NetConfig::ablation(backbone, film, multihead), scale, rng)
}
