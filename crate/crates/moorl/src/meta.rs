//! The meta trainer and its baselines. Each epoch chooses a data buffer,
//! collects environment experience with the stochastic meta-policy, adapts a
//! copy of the meta parameters for K gradient steps on that buffer, and then
//! moves the meta parameters toward the adapted copy through a persistent
//! adaptive optimizer with a decaying step size. Baselines reuse the same
//! gradient machinery without the outer loop.
//!
//! Plain-SGD optimizer modes exist so the degenerate cases have closed
//! forms: a meta SGD step of 1 copies the adapted parameters outright, and
//! K=1 with SGD on both levels composes to one joint gradient step.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    monte_carlo_return, OfflineDataset, ReplayBuffer, ScriptedExpert, Transition,
    TransitionSource, UniformActions, REFERENCE_EPISODES,
};
use crate::envs::{Env, State, DEFAULT_VI_TOL};
use crate::nn::{adam_step, AdamState};
use crate::rng::substream;
use crate::sac::{
    actor_loss_and_grad, actor_sample, critic_loss_and_grad, mean_q, soft_update,
    temperature_loss_and_grad, AgentParams, AgentSpec, SacConfig,
};
use crate::{Error, Result};

/// Stream tags for the run-level generators the CLI derives from one seed.
pub const STREAM_TRAIN: u32 = 0x20;
pub const STREAM_EVAL: u32 = 0x21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    /// Plain gradient descent; the test mode behind the closed-form checks.
    Sgd,
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimKind::Adam => "adam",
            OptimKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimKind::Adam),
            "sgd" => Ok(OptimKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Full trainer configuration. Defaults follow the reference hyperparameter
/// table; the experiment harness overrides sizes downward for desk-scale
/// runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MoorlConfig {
    /// Meta epochs N.
    pub total_steps: usize,
    /// Inner gradient steps K per epoch.
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Base meta step size, scaled by `meta_lr_scale` as training advances.
    pub meta_lr_base: f64,
    pub offline_choice_prob: f64,
    pub batch_size: usize,
    pub sac: SacConfig,
    /// Below this online-buffer size, online selections fall back to the
    /// offline dataset.
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Environment transitions collected per meta epoch.
    pub env_steps_per_epoch: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub inner_optim: OptimKind,
    pub meta_optim: OptimKind,
}

impl MoorlConfig {
    pub fn for_env(env: &dyn Env) -> Self {
        MoorlConfig {
            total_steps: 20_000,
            inner_steps: 4,
            inner_lr: 3e-4,
            meta_lr_base: 3e-4,
            offline_choice_prob: 0.5,
            batch_size: 256,
            sac: SacConfig::for_env(env),
            warmup_steps: 1000,
            eval_every: 500,
            eval_episodes: 10,
            env_steps_per_epoch: 1,
            hidden: vec![256, 256],
            seed: 0,
            inner_optim: OptimKind::Adam,
            meta_optim: OptimKind::Adam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sac.validate()?;
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("zero total steps".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidArgument("zero inner steps".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("zero batch size".into()));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidArgument("zero evaluation cadence".into()));
        }
        if !(0.0..=1.0).contains(&self.offline_choice_prob) {
            return Err(Error::InvalidArgument(format!(
                "offline choice probability {}",
                self.offline_choice_prob
            )));
        }
        for (name, lr) in [("inner", self.inner_lr), ("meta", self.meta_lr_base)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} learning rate {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferChoice {
    Offline,
    Online,
    /// Symmetric per-batch mixture; only the mixed baseline reports this.
    Mixed,
}

impl fmt::Display for BufferChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BufferChoice::Offline => "offline",
            BufferChoice::Online => "online",
            BufferChoice::Mixed => "mixed",
        })
    }
}

impl FromStr for BufferChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(BufferChoice::Offline),
            "online" => Ok(BufferChoice::Online),
            "mixed" => Ok(BufferChoice::Mixed),
            other => Err(Error::Config(format!("unknown buffer choice '{other}'"))),
        }
    }
}

/// Bernoulli buffer selection: offline with probability `p_offline`.
pub fn select_buffer(rng: &mut ChaCha8Rng, p_offline: f64) -> BufferChoice {
    if rng.random::<f64>() < p_offline {
        BufferChoice::Offline
    } else {
        BufferChoice::Online
    }
}

/// Meta step-size schedule: linear decay from 1 at t=0 to 0 at t=N.
pub fn meta_lr_scale(t: usize, n: usize) -> f64 {
    1.0 - t as f64 / n as f64
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub t: usize,
    pub eval_return: f64,
    pub normalized_score: f64,
    pub mean_q: f64,
    pub alpha: f64,
    pub buffer_online_size: usize,
    pub buffer_offline_size: usize,
    pub chosen_buffer: BufferChoice,
}

pub const METRICS_HEADER: &str =
    "t,eval_return,normalized_score,mean_q,alpha,buffer_online_size,chosen_buffer";

pub fn metrics_csv_string(records: &[MetricRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.t,
            r.eval_return,
            r.normalized_score,
            r.mean_q,
            r.alpha,
            r.buffer_online_size,
            r.chosen_buffer
        );
    }
    out
}

pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv_string(records))?;
    Ok(())
}

/// Optimizer moments for one agent: one state per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optims {
    pub actor: AdamState,
    pub critic1: AdamState,
    pub critic2: AdamState,
    pub alpha: AdamState,
}

impl Optims {
    pub fn fresh(spec: &AgentSpec, lr: f64) -> Self {
        Optims {
            actor: AdamState::new(spec.actor().param_count(), lr),
            critic1: AdamState::new(spec.critic().param_count(), lr),
            critic2: AdamState::new(spec.critic().param_count(), lr),
            alpha: AdamState::new(1, lr),
        }
    }
}

/// Everything a trainer checkpoints: the agent, its persistent optimizer
/// moments, and the step counter. Baselines store their live parameters in
/// `meta`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub spec: AgentSpec,
    pub meta: AgentParams,
    pub opts: Optims,
    pub step: usize,
}

impl MetaState {
    pub fn new(spec: AgentSpec, lr: f64, rng: &mut ChaCha8Rng) -> Self {
        let meta = spec.init_params(rng);
        let opts = Optims::fresh(&spec, lr);
        MetaState {
            spec,
            meta,
            opts,
            step: 0,
        }
    }
}

fn sgd_step(lr: f64, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Shape(format!(
            "sgd dim {} vs grad {}",
            params.len(),
            grad.len()
        )));
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            index,
        });
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

fn apply_update(
    kind: OptimKind,
    opt: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
) -> Result<()> {
    match kind {
        OptimKind::Adam => adam_step(opt, params, grad),
        OptimKind::Sgd => sgd_step(opt.lr, params, grad),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
}

/// One full gradient step on `params`: critic, actor, and temperature
/// gradients all evaluated at the incoming parameters, then applied, then
/// the targets follow the critics. Evaluating before applying keeps the step
/// a single point of the joint loss, which the closed-form composition
/// checks rely on.
fn sac_gradient_step(
    spec: &AgentSpec,
    env: &dyn Env,
    batch: &[&Transition],
    params: &mut AgentParams,
    opts: &mut Optims,
    kind: OptimKind,
    sac: &SacConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let (critic_loss, g1, g2) = critic_loss_and_grad(spec, env, batch, params, sac, rng)?;
    let (actor_loss, ga) = actor_loss_and_grad(spec, env, batch, params, sac, rng)?;
    let (alpha_loss, galpha) = temperature_loss_and_grad(spec, env, batch, params, sac, rng)?;
    apply_update(kind, &mut opts.critic1, &mut params.critic1, &g1)?;
    apply_update(kind, &mut opts.critic2, &mut params.critic2, &g2)?;
    apply_update(kind, &mut opts.actor, &mut params.actor, &ga)?;
    let mut la = [params.log_alpha];
    apply_update(kind, &mut opts.alpha, &mut la, &[galpha])?;
    params.log_alpha = la[0];
    soft_update(&mut params.target1, &params.critic1, sac.ema_rho)?;
    soft_update(&mut params.target2, &params.critic2, sac.ema_rho)?;
    Ok(StepStats {
        critic_loss,
        actor_loss,
        alpha_loss,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct InnerStats {
    pub critic_loss_first: f64,
    pub critic_loss_last: f64,
    pub actor_loss_last: f64,
}

/// K adaptation steps on a copy of `meta`, each on a fresh mini-batch from
/// `source`, through fresh inner optimizers. `meta` itself is never touched.
pub fn inner_adapt(
    spec: &AgentSpec,
    env: &dyn Env,
    meta: &AgentParams,
    source: &dyn TransitionSource,
    cfg: &MoorlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AgentParams, InnerStats)> {
    cfg.validate()?;
    spec.check_params(meta)?;
    let mut adapted = meta.clone();
    let mut opts = Optims::fresh(spec, cfg.inner_lr);
    let mut stats = InnerStats {
        critic_loss_first: 0.0,
        critic_loss_last: 0.0,
        actor_loss_last: 0.0,
    };
    for k in 0..cfg.inner_steps {
        let batch = source.sample_refs(cfg.batch_size, rng)?;
        let step = sac_gradient_step(
            spec,
            env,
            &batch,
            &mut adapted,
            &mut opts,
            cfg.inner_optim,
            &cfg.sac,
            rng,
        )?;
        if k == 0 {
            stats.critic_loss_first = step.critic_loss;
        }
        stats.critic_loss_last = step.critic_loss;
        stats.actor_loss_last = step.actor_loss;
    }
    Ok((adapted, stats))
}

/// Convex step toward `toward`; at s=1 the result is `toward` exactly, which
/// is why the SGD meta mode uses this form instead of subtracting the
/// pseudo-gradient.
fn sgd_toward(params: &mut [f64], toward: &[f64], s: f64) {
    for (p, a) in params.iter_mut().zip(toward) {
        *p = (1.0 - s) * *p + s * *a;
    }
}

/// Reptile-style meta update: the difference meta − adapted acts as the
/// gradient for the persistent meta optimizer, whose step size is
/// `meta_lr_base · lr_scale`. Covers actor, both critics, and the
/// temperature; meta targets then track the new meta critics.
pub fn meta_update(
    state: &mut MetaState,
    adapted: &AgentParams,
    cfg: &MoorlConfig,
    lr_scale: f64,
) -> Result<()> {
    state.spec.check_params(adapted)?;
    if !lr_scale.is_finite() {
        return Err(Error::InvalidArgument(format!("lr scale {lr_scale}")));
    }
    let s = cfg.meta_lr_base * lr_scale;
    match cfg.meta_optim {
        OptimKind::Sgd => {
            sgd_toward(&mut state.meta.actor, &adapted.actor, s);
            sgd_toward(&mut state.meta.critic1, &adapted.critic1, s);
            sgd_toward(&mut state.meta.critic2, &adapted.critic2, s);
            state.meta.log_alpha = (1.0 - s) * state.meta.log_alpha + s * adapted.log_alpha;
        }
        OptimKind::Adam => {
            let groups: [(&mut AdamState, &mut Vec<f64>, &ParamGroup); 3] = [
                (
                    &mut state.opts.actor,
                    &mut state.meta.actor,
                    &adapted.actor,
                ),
                (
                    &mut state.opts.critic1,
                    &mut state.meta.critic1,
                    &adapted.critic1,
                ),
                (
                    &mut state.opts.critic2,
                    &mut state.meta.critic2,
                    &adapted.critic2,
                ),
            ];
            for (opt, params, toward) in groups {
                opt.lr = s;
                let grad: Vec<f64> = params.iter().zip(toward.iter()).map(|(p, a)| p - a).collect();
                adam_step(opt, params, &grad)?;
            }
            state.opts.alpha.lr = s;
            let mut la = [state.meta.log_alpha];
            let grad = [state.meta.log_alpha - adapted.log_alpha];
            adam_step(&mut state.opts.alpha, &mut la, &grad)?;
            state.meta.log_alpha = la[0];
        }
    }
    soft_update(&mut state.meta.target1, &state.meta.critic1, cfg.sac.ema_rho)?;
    soft_update(&mut state.meta.target2, &state.meta.critic2, cfg.sac.ema_rho)?;
    Ok(())
}

type ParamGroup = [f64];

/// Discounted return of the deterministic-mode policy over `n_episodes`
/// rollouts, and its score normalized between the random and expert
/// reference returns (clipped below at 0).
pub fn evaluate_policy(
    spec: &AgentSpec,
    env: &dyn Env,
    params: &AgentParams,
    ret_random: f64,
    ret_expert: f64,
    n_episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("zero evaluation episodes".into()));
    }
    if ret_expert == ret_random {
        return Err(Error::DegenerateReference(ret_expert));
    }
    spec.check_params(params)?;
    let mut obs_buf = Vec::new();
    let mut total = 0.0;
    for _ in 0..n_episodes {
        let mut state = env.reset(rng);
        let mut discount = 1.0;
        for _ in 0..env.horizon() {
            let (action, _) = {
                let obs = env.encode_obs(&state, &mut obs_buf);
                actor_sample(spec, &params.actor, obs, rng, true)?
            };
            let (next, reward, done) = env.step(&state, &action, rng)?;
            total += discount * reward;
            discount *= env.gamma();
            if done {
                break;
            }
            state = next;
        }
    }
    let mean_return = total / n_episodes as f64;
    let score = ((mean_return - ret_random) / (ret_expert - ret_random)).max(0.0);
    Ok((mean_return, score))
}

/// Reference returns (random, expert) straight from the environment: exact
/// linear solves when the environment is tabular, Monte-Carlo rollouts of
/// the scripted controller otherwise.
pub fn reference_returns(env: &dyn Env, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    if let Some(mdp) = env.tabular_mdp() {
        let random = mdp.exact_policy_return(&mdp.uniform_policy())?;
        let sol = mdp.value_iteration(DEFAULT_VI_TOL)?;
        let expert = mdp.exact_policy_return(&sol.greedy)?;
        Ok((random, expert))
    } else {
        let random = monte_carlo_return(env, &UniformActions, REFERENCE_EPISODES, rng)?;
        let expert = monte_carlo_return(env, &ScriptedExpert, REFERENCE_EPISODES, rng)?;
        Ok((random, expert))
    }
}

struct EnvCursor {
    state: State,
    steps: usize,
}

impl EnvCursor {
    fn fresh(env: &dyn Env, rng: &mut ChaCha8Rng) -> Self {
        EnvCursor {
            state: env.reset(rng),
            steps: 0,
        }
    }
}

/// One stochastic-policy environment step into the online buffer. `done`
/// marks terminal entry only; hitting the horizon resets the cursor without
/// setting it.
fn collect_transition(
    spec: &AgentSpec,
    env: &dyn Env,
    actor: &[f64],
    cursor: &mut EnvCursor,
    online: &mut ReplayBuffer,
    obs_buf: &mut Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (action, _) = {
        let obs = env.encode_obs(&cursor.state, obs_buf);
        actor_sample(spec, actor, obs, rng, false)?
    };
    let (next, reward, done) = env.step(&cursor.state, &action, rng)?;
    online.push(Transition {
        state: cursor.state.clone(),
        action,
        reward,
        next_state: next.clone(),
        done,
    })?;
    cursor.steps += 1;
    if done || cursor.steps >= env.horizon() {
        *cursor = EnvCursor::fresh(env, rng);
    } else {
        cursor.state = next;
    }
    Ok(())
}

fn check_dataset_env(env: &dyn Env, ds: &OfflineDataset) -> Result<()> {
    if ds.meta().env_id != env.id() {
        return Err(Error::Config(format!(
            "dataset was generated on '{}' but training runs on '{}'",
            ds.meta().env_id,
            env.id()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    spec: &AgentSpec,
    env: &dyn Env,
    params: &AgentParams,
    q_source: &dyn TransitionSource,
    refs: (f64, f64),
    chosen: BufferChoice,
    sizes: (usize, usize),
    t: usize,
    cfg: &MoorlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MetricRecord> {
    let (eval_return, normalized_score) =
        evaluate_policy(spec, env, params, refs.0, refs.1, cfg.eval_episodes, rng)?;
    let batch = q_source.sample_refs(cfg.batch_size, rng)?;
    let mq = mean_q(spec, env, &batch, params)?;
    Ok(MetricRecord {
        t,
        eval_return,
        normalized_score,
        mean_q: mq,
        alpha: params.alpha(),
        buffer_online_size: sizes.0,
        buffer_offline_size: sizes.1,
        chosen_buffer: chosen,
    })
}

/// The full meta training loop. Every epoch: Bernoulli buffer choice,
/// environment collection with the stochastic meta-policy, K-step inner
/// adaptation on the chosen buffer (offline substitutes for a cold online
/// buffer), and a scheduled meta update. Deterministic-mode evaluation runs
/// every `eval_every` epochs and always at the end.
pub fn train_moorl(
    env: &dyn Env,
    offline: &OfflineDataset,
    cfg: &MoorlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MetaState, Vec<MetricRecord>)> {
    cfg.validate()?;
    check_dataset_env(env, offline)?;
    let spec = AgentSpec::for_env(env, &cfg.hidden)?;
    let mut state = MetaState::new(spec, cfg.meta_lr_base, rng);
    let mut online = ReplayBuffer::with_default_capacity();
    let mut cursor = EnvCursor::fresh(env, rng);
    let mut obs_buf = Vec::new();
    let refs = (offline.meta().ret_random, offline.meta().ret_expert);
    let mut records = Vec::new();
    for n in 1..=cfg.total_steps {
        let choice = select_buffer(rng, cfg.offline_choice_prob);
        for _ in 0..cfg.env_steps_per_epoch {
            collect_transition(
                &state.spec,
                env,
                &state.meta.actor,
                &mut cursor,
                &mut online,
                &mut obs_buf,
                rng,
            )?;
        }
        let effective = if choice == BufferChoice::Online && online.len() < cfg.warmup_steps {
            BufferChoice::Offline
        } else {
            choice
        };
        let source: &dyn TransitionSource = match effective {
            BufferChoice::Online => &online,
            _ => offline,
        };
        let (adapted, _) = inner_adapt(&state.spec, env, &state.meta, source, cfg, rng)?;
        meta_update(&mut state, &adapted, cfg, meta_lr_scale(n, cfg.total_steps))?;
        state.step = n;
        if n % cfg.eval_every == 0 || n == cfg.total_steps {
            records.push(make_record(
                &state.spec,
                env,
                &state.meta,
                offline,
                refs,
                effective,
                (online.len(), offline.len()),
                n,
                cfg,
                rng,
            )?);
        }
    }
    Ok((state, records))
}

/// Online-only SAC baseline: one gradient step per collected transition on
/// the live parameters, no meta machinery. Updates start once the buffer
/// reaches the warm-up size.
pub fn train_sac_online(
    env: &dyn Env,
    cfg: &MoorlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MetaState, Vec<MetricRecord>)> {
    cfg.validate()?;
    if cfg.env_steps_per_epoch == 0 {
        return Err(Error::Config(
            "the online baseline needs at least one environment step per epoch".into(),
        ));
    }
    let spec = AgentSpec::for_env(env, &cfg.hidden)?;
    let refs = reference_returns(env, rng)?;
    if refs.1 == refs.0 {
        return Err(Error::DegenerateReference(refs.0));
    }
    let mut state = MetaState::new(spec, cfg.inner_lr, rng);
    let mut online = ReplayBuffer::with_default_capacity();
    let mut cursor = EnvCursor::fresh(env, rng);
    let mut obs_buf = Vec::new();
    let mut records = Vec::new();
    for n in 1..=cfg.total_steps {
        for _ in 0..cfg.env_steps_per_epoch {
            collect_transition(
                &state.spec,
                env,
                &state.meta.actor,
                &mut cursor,
                &mut online,
                &mut obs_buf,
                rng,
            )?;
        }
        if online.len() >= cfg.warmup_steps {
            for _ in 0..cfg.env_steps_per_epoch {
                let batch = online.sample_refs(cfg.batch_size, rng)?;
                sac_gradient_step(
                    &state.spec,
                    env,
                    &batch,
                    &mut state.meta,
                    &mut state.opts,
                    cfg.inner_optim,
                    &cfg.sac,
                    rng,
                )?;
            }
        }
        state.step = n;
        if n % cfg.eval_every == 0 || n == cfg.total_steps {
            records.push(make_record(
                &state.spec,
                env,
                &state.meta,
                &online,
                refs,
                BufferChoice::Online,
                (online.len(), 0),
                n,
                cfg,
                rng,
            )?);
        }
    }
    Ok((state, records))
}

/// Half-offline half-online batch; falls back to pure offline while the
/// online buffer is below the warm-up size. Offline takes the odd slot.
fn mixed_batch<'a>(
    offline: &'a OfflineDataset,
    online: &'a ReplayBuffer,
    batch: usize,
    warmup: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a Transition>> {
    let n_online = batch / 2;
    if online.len() < warmup || n_online == 0 {
        return offline.sample_refs(batch, rng);
    }
    let mut out = offline.sample_refs(batch - n_online, rng)?;
    out.extend(online.sample_refs(n_online, rng)?);
    Ok(out)
}

/// Mixed-data SAC baseline: the online loop with every batch drawn half
/// from the offline dataset and half from the online buffer.
pub fn train_sac_mixed(
    env: &dyn Env,
    offline: &OfflineDataset,
    cfg: &MoorlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MetaState, Vec<MetricRecord>)> {
    cfg.validate()?;
    check_dataset_env(env, offline)?;
    let spec = AgentSpec::for_env(env, &cfg.hidden)?;
    let refs = (offline.meta().ret_random, offline.meta().ret_expert);
    let mut state = MetaState::new(spec, cfg.inner_lr, rng);
    let mut online = ReplayBuffer::with_default_capacity();
    let mut cursor = EnvCursor::fresh(env, rng);
    let mut obs_buf = Vec::new();
    let mut records = Vec::new();
    for n in 1..=cfg.total_steps {
        for _ in 0..cfg.env_steps_per_epoch {
            collect_transition(
                &state.spec,
                env,
                &state.meta.actor,
                &mut cursor,
                &mut online,
                &mut obs_buf,
                rng,
            )?;
        }
        let updates = cfg.env_steps_per_epoch.max(1);
        for _ in 0..updates {
            let batch = mixed_batch(offline, &online, cfg.batch_size, cfg.warmup_steps, rng)?;
            sac_gradient_step(
                &state.spec,
                env,
                &batch,
                &mut state.meta,
                &mut state.opts,
                cfg.inner_optim,
                &cfg.sac,
                rng,
            )?;
        }
        state.step = n;
        if n % cfg.eval_every == 0 || n == cfg.total_steps {
            records.push(make_record(
                &state.spec,
                env,
                &state.meta,
                offline,
                refs,
                BufferChoice::Mixed,
                (online.len(), offline.len()),
                n,
                cfg,
                rng,
            )?);
        }
    }
    Ok((state, records))
}

/// One cell of the inner-step ablation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblateRow {
    pub k: usize,
    pub mean_score: f64,
    pub std_score: f64,
}

/// Train one run per (K, seed) and aggregate the final normalized scores
/// per K. Each cell draws its generator from its own seed, so cells are
/// independent and the set can run in any order.
pub fn ablate_k(
    env: &dyn Env,
    offline: &OfflineDataset,
    cfg: &MoorlConfig,
    k_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<AblateRow>> {
    if k_values.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one K and one seed".into(),
        ));
    }
    if k_values.contains(&0) {
        return Err(Error::InvalidArgument("inner steps must be positive".into()));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cell = cfg.clone();
            cell.inner_steps = k;
            cell.seed = seed;
            let mut rng = substream(seed, STREAM_TRAIN, 0);
            let (_, records) = train_moorl(env, offline, &cell, &mut rng)?;
            let last = records
                .last()
                .expect("training always evaluates at the final step");
            scores.push(last.normalized_score);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
        rows.push(AblateRow {
            k,
            mean_score: mean,
            std_score: var.sqrt(),
        });
    }
    Ok(rows)
}

const CHECKPOINT_MAGIC: &str = "moorl-checkpoint";
const CHECKPOINT_VERSION: &str = "v1";

fn push_floats(out: &mut String, xs: &[f64]) {
    for x in xs {
        let _ = write!(out, " {x}");
    }
}

fn adam_line(out: &mut String, name: &str, opt: &AdamState) {
    let _ = write!(out, "opt {name} {} {} {}", opt.lr, opt.t, opt.dim());
    push_floats(out, &opt.m);
    push_floats(out, &opt.v);
    out.push('\n');
}

/// Write a trainer state to disk. The format is line-oriented text with
/// shortest-round-trip floats, so a load returns bit-identical state.
pub fn save_checkpoint(state: &MetaState, env_id: &str, path: &Path) -> Result<()> {
    let spec = &state.spec;
    let widths = spec.actor().widths();
    let hidden = &widths[1..widths.len() - 1];
    let hidden_str = if hidden.is_empty() {
        "-".to_string()
    } else {
        hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let action_str = match spec.action_space() {
        crate::envs::ActionSpace::Discrete(n) => format!("index:{n}"),
        crate::envs::ActionSpace::Continuous(d) => format!("vec:{d}"),
    };
    let mut out = format!(
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} env={env_id} obs={} action={action_str} hidden={hidden_str} step={}\n",
        spec.obs_dim(),
        state.step
    );
    for (name, params) in [
        ("actor", &state.meta.actor),
        ("critic1", &state.meta.critic1),
        ("critic2", &state.meta.critic2),
        ("target1", &state.meta.target1),
        ("target2", &state.meta.target2),
    ] {
        let _ = write!(out, "{name} {}", params.len());
        push_floats(&mut out, params);
        out.push('\n');
    }
    let _ = writeln!(out, "log_alpha {}", state.meta.log_alpha);
    adam_line(&mut out, "actor", &state.opts.actor);
    adam_line(&mut out, "critic1", &state.opts.critic1);
    adam_line(&mut out, "critic2", &state.opts.critic2);
    adam_line(&mut out, "alpha", &state.opts.alpha);
    std::fs::write(path, out)?;
    Ok(())
}

fn format_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        line,
        msg: msg.into(),
    }
}

fn header_value<'a>(tok: Option<&'a str>, key: &str, line: usize) -> Result<&'a str> {
    let tok = tok.ok_or_else(|| format_err(line, format!("missing {key}=")))?;
    tok.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| format_err(line, format!("expected {key}=, found '{tok}'")))
}

fn parse_floats(toks: &mut std::str::SplitWhitespace<'_>, n: usize, line: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tok = toks
            .next()
            .ok_or_else(|| format_err(line, format!("expected {n} values, found {i}")))?;
        let v: f64 = tok
            .parse()
            .map_err(|_| format_err(line, format!("bad number '{tok}'")))?;
        out.push(v);
    }
    Ok(out)
}

fn parse_array_line(line_text: Option<&str>, name: &str, line: usize) -> Result<Vec<f64>> {
    let text = line_text.ok_or_else(|| format_err(line, format!("missing {name} line")))?;
    let mut toks = text.split_whitespace();
    match toks.next() {
        Some(t) if t == name => {}
        other => {
            return Err(format_err(
                line,
                format!("expected '{name}', found '{}'", other.unwrap_or("")),
            ))
        }
    }
    let count: usize = toks
        .next()
        .ok_or_else(|| format_err(line, "missing length"))?
        .parse()
        .map_err(|_| format_err(line, "bad length"))?;
    let vals = parse_floats(&mut toks, count, line)?;
    if toks.next().is_some() {
        return Err(format_err(line, "trailing data"));
    }
    Ok(vals)
}

fn parse_adam_line(line_text: Option<&str>, name: &str, line: usize) -> Result<AdamState> {
    let text = line_text.ok_or_else(|| format_err(line, format!("missing opt {name} line")))?;
    let mut toks = text.split_whitespace();
    if toks.next() != Some("opt") || toks.next() != Some(name) {
        return Err(format_err(line, format!("expected 'opt {name}'")));
    }
    let lr: f64 = toks
        .next()
        .ok_or_else(|| format_err(line, "missing lr"))?
        .parse()
        .map_err(|_| format_err(line, "bad lr"))?;
    let t: u64 = toks
        .next()
        .ok_or_else(|| format_err(line, "missing step count"))?
        .parse()
        .map_err(|_| format_err(line, "bad step count"))?;
    let dim: usize = toks
        .next()
        .ok_or_else(|| format_err(line, "missing dim"))?
        .parse()
        .map_err(|_| format_err(line, "bad dim"))?;
    let m = parse_floats(&mut toks, dim, line)?;
    let v = parse_floats(&mut toks, dim, line)?;
    if toks.next().is_some() {
        return Err(format_err(line, "trailing data"));
    }
    Ok(AdamState { lr, t, m, v })
}

/// Load a checkpoint. Returns the trainer state and the environment id it
/// was trained on.
pub fn load_checkpoint(path: &Path) -> Result<(MetaState, String)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(1, "empty file"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(CHECKPOINT_MAGIC) {
        return Err(format_err(1, "not a checkpoint file"));
    }
    match toks.next() {
        Some(CHECKPOINT_VERSION) => {}
        other => {
            return Err(format_err(
                1,
                format!("unsupported version '{}'", other.unwrap_or("")),
            ))
        }
    }
    let env_id = header_value(toks.next(), "env", 1)?.to_string();
    let obs: usize = header_value(toks.next(), "obs", 1)?
        .parse()
        .map_err(|_| format_err(1, "bad obs width"))?;
    let action_str = header_value(toks.next(), "action", 1)?;
    let action_space = match action_str.split_once(':') {
        Some(("index", n)) => crate::envs::ActionSpace::Discrete(
            n.parse().map_err(|_| format_err(1, "bad action count"))?,
        ),
        Some(("vec", d)) => crate::envs::ActionSpace::Continuous(
            d.parse().map_err(|_| format_err(1, "bad action width"))?,
        ),
        _ => return Err(format_err(1, format!("bad action spec '{action_str}'"))),
    };
    let hidden_str = header_value(toks.next(), "hidden", 1)?;
    let hidden: Vec<usize> = if hidden_str == "-" {
        Vec::new()
    } else {
        hidden_str
            .split(',')
            .map(|h| h.parse().map_err(|_| format_err(1, "bad hidden width")))
            .collect::<Result<_>>()?
    };
    let step: usize = header_value(toks.next(), "step", 1)?
        .parse()
        .map_err(|_| format_err(1, "bad step"))?;
    if toks.next().is_some() {
        return Err(format_err(1, "trailing header data"));
    }

    let spec = AgentSpec::new(obs, action_space, &hidden)?;
    let actor = parse_array_line(lines.next(), "actor", 2)?;
    let critic1 = parse_array_line(lines.next(), "critic1", 3)?;
    let critic2 = parse_array_line(lines.next(), "critic2", 4)?;
    let target1 = parse_array_line(lines.next(), "target1", 5)?;
    let target2 = parse_array_line(lines.next(), "target2", 6)?;
    let la_text = lines.next().ok_or_else(|| format_err(7, "missing log_alpha"))?;
    let mut la_toks = la_text.split_whitespace();
    if la_toks.next() != Some("log_alpha") {
        return Err(format_err(7, "expected 'log_alpha'"));
    }
    let log_alpha: f64 = la_toks
        .next()
        .ok_or_else(|| format_err(7, "missing value"))?
        .parse()
        .map_err(|_| format_err(7, "bad value"))?;
    if la_toks.next().is_some() {
        return Err(format_err(7, "trailing data"));
    }
    let meta = AgentParams {
        actor,
        critic1,
        critic2,
        target1,
        target2,
        log_alpha,
    };
    spec.check_params(&meta)?;
    let opts = Optims {
        actor: parse_adam_line(lines.next(), "actor", 8)?,
        critic1: parse_adam_line(lines.next(), "critic1", 9)?,
        critic2: parse_adam_line(lines.next(), "critic2", 10)?,
        alpha: parse_adam_line(lines.next(), "alpha", 11)?,
    };
    if let Some(extra) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(format_err(12, "trailing data after checkpoint"));
        }
    }
    if opts.actor.dim() != spec.actor().param_count()
        || opts.critic1.dim() != spec.critic().param_count()
        || opts.critic2.dim() != spec.critic().param_count()
        || opts.alpha.dim() != 1
    {
        return Err(format_err(8, "optimizer dims do not match the networks"));
    }
    Ok((
        MetaState {
            spec,
            meta,
            opts,
            step,
        },
        env_id,
    ))
}
