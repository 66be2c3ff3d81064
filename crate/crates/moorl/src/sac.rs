//! Soft actor-critic primitives shared by the meta trainer and the
//! baselines: a squashed-Gaussian or categorical actor, a double critic with
//! EMA targets, temperature auto-tuning, and the loss functions with their
//! exact gradients.
//!
//! Discrete losses are exact expectations over the action set, so they are
//! deterministic given parameters; continuous losses need an rng for the
//! actor samples (reparameterized in the actor loss).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Transition;
use crate::envs::{Action, ActionSpace, Env, State};
use crate::nn::{
    backward_trace, forward_trace, init_params, mlp_forward, Activation, Input, MlpSpec,
    ParamVector, Trace,
};
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added inside the squashing correction log so it never takes log(0).
const SQUASH_EPS: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SacConfig {
    pub gamma: f64,
    /// EMA weight for target networks.
    pub ema_rho: f64,
    pub lr: f64,
    pub target_entropy: f64,
    pub use_cdq: bool,
    pub use_entropy_backup: bool,
}

impl SacConfig {
    /// Environment-derived defaults. The pessimistic backup pieces (clipped
    /// double Q and the entropy term in the target) hurt on sparse-reward
    /// tasks, so those flip off there; both stay overridable.
    pub fn for_env(env: &dyn Env) -> Self {
        SacConfig {
            gamma: env.gamma(),
            ema_rho: 0.005,
            lr: 3e-4,
            target_entropy: env.action_space().default_target_entropy(),
            use_cdq: !env.sparse_reward(),
            use_entropy_backup: !env.sparse_reward(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("discount {}", self.gamma)));
        }
        if !(0.0 < self.ema_rho && self.ema_rho <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ema weight {} outside (0,1]",
                self.ema_rho
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        if !self.target_entropy.is_finite() {
            return Err(Error::InvalidArgument("target entropy not finite".into()));
        }
        Ok(())
    }
}

/// All learnable state of one agent. Targets mirror the critics and move
/// only through `soft_update`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams {
    pub actor: ParamVector,
    pub critic1: ParamVector,
    pub critic2: ParamVector,
    pub target1: ParamVector,
    pub target2: ParamVector,
    pub log_alpha: f64,
}

impl AgentParams {
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
}

/// Network shapes for one environment: actor head layout depends on the
/// action space, the critic maps observation (discrete: to one Q per action)
/// or observation+action (continuous: to a scalar).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    obs_dim: usize,
    action_space: ActionSpace,
    actor: MlpSpec,
    critic: MlpSpec,
}

impl AgentSpec {
    pub fn new(obs_dim: usize, action_space: ActionSpace, hidden: &[usize]) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::InvalidArgument("zero observation width".into()));
        }
        let mut actor_w = vec![obs_dim];
        actor_w.extend_from_slice(hidden);
        let mut critic_w;
        match action_space {
            ActionSpace::Discrete(n) => {
                if n == 0 {
                    return Err(Error::InvalidArgument("empty action set".into()));
                }
                actor_w.push(n);
                critic_w = vec![obs_dim];
                critic_w.extend_from_slice(hidden);
                critic_w.push(n);
            }
            ActionSpace::Continuous(d) => {
                if d == 0 {
                    return Err(Error::InvalidArgument("zero action width".into()));
                }
                // Mean and log-std per action dimension.
                actor_w.push(2 * d);
                critic_w = vec![obs_dim + d];
                critic_w.extend_from_slice(hidden);
                critic_w.push(1);
            }
        }
        Ok(AgentSpec {
            obs_dim,
            action_space,
            actor: MlpSpec::new(actor_w, Activation::Relu)?,
            critic: MlpSpec::new(critic_w, Activation::Relu)?,
        })
    }

    pub fn for_env(env: &dyn Env, hidden: &[usize]) -> Result<Self> {
        AgentSpec::new(env.obs_dim(), env.action_space(), hidden)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn actor(&self) -> &MlpSpec {
        &self.actor
    }

    pub fn critic(&self) -> &MlpSpec {
        &self.critic
    }

    /// Fresh parameters; draw order is actor, critic1, critic2, so equal
    /// seeds give equal agents. Targets start as critic copies, temperature
    /// starts at 1.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> AgentParams {
        let actor = init_params(&self.actor, rng);
        let critic1 = init_params(&self.critic, rng);
        let critic2 = init_params(&self.critic, rng);
        AgentParams {
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            log_alpha: 0.0,
        }
    }

    pub fn check_params(&self, p: &AgentParams) -> Result<()> {
        self.actor.check_params(&p.actor)?;
        for c in [&p.critic1, &p.critic2, &p.target1, &p.target2] {
            self.critic.check_params(c)?;
        }
        if !p.log_alpha.is_finite() {
            return Err(Error::InvalidArgument("log_alpha not finite".into()));
        }
        Ok(())
    }
}

fn check_finite(out: &[f64]) -> Result<()> {
    match out.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numerical(format!(
            "network output component {i} not finite"
        ))),
        None => Ok(()),
    }
}

/// Log-softmax of `logits`; stable under large magnitudes.
fn log_softmax(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|l| (l - max).exp())
            .sum::<f64>()
            .ln();
    out.clear();
    out.extend(logits.iter().map(|l| l - lse));
}

fn sample_from_probs(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Action probabilities of a discrete actor at one observation.
pub fn discrete_action_probs(
    spec: &AgentSpec,
    actor: &[f64],
    obs: Input<'_>,
) -> Result<Vec<f64>> {
    if !matches!(spec.action_space, ActionSpace::Discrete(_)) {
        return Err(Error::InvalidArgument(
            "action distribution table asked of a continuous actor".into(),
        ));
    }
    let logits = mlp_forward(&spec.actor, actor, obs)?;
    check_finite(&logits)?;
    let mut logp = Vec::new();
    log_softmax(&logits, &mut logp);
    Ok(logp.iter().map(|l| l.exp()).collect())
}

/// Per-dimension Gaussian head of a continuous actor: mean, clamped
/// log-std, and whether the clamp was active (gradient is zero there).
struct GaussHead {
    mean: Vec<f64>,
    log_std: Vec<f64>,
    clamped: Vec<bool>,
}

fn gauss_head(out: &[f64]) -> GaussHead {
    let d = out.len() / 2;
    let mut head = GaussHead {
        mean: out[..d].to_vec(),
        log_std: Vec::with_capacity(d),
        clamped: Vec::with_capacity(d),
    };
    for &raw in &out[d..] {
        let c = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
        head.log_std.push(c);
        head.clamped.push(c != raw);
    }
    head
}

/// Draw an action and its log-probability. Deterministic mode takes the
/// distribution mode (argmax, or tanh of the mean) instead of sampling.
pub fn actor_sample(
    spec: &AgentSpec,
    actor: &[f64],
    obs: Input<'_>,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> Result<(Action, f64)> {
    let out = mlp_forward(&spec.actor, actor, obs)?;
    check_finite(&out)?;
    match spec.action_space {
        ActionSpace::Discrete(_) => {
            let mut logp = Vec::new();
            log_softmax(&out, &mut logp);
            let a = if deterministic {
                // Lowest index wins ties, like the planning oracle.
                let mut best = 0;
                for (i, l) in logp.iter().enumerate() {
                    if *l > logp[best] {
                        best = i;
                    }
                }
                best
            } else {
                let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                sample_from_probs(&probs, rng)
            };
            Ok((Action::Index(a), logp[a]))
        }
        ActionSpace::Continuous(d) => {
            let head = gauss_head(&out);
            let mut action = Vec::with_capacity(d);
            let mut log_prob = 0.0;
            for j in 0..d {
                let std = head.log_std[j].exp();
                let z: f64 = if deterministic {
                    0.0
                } else {
                    StandardNormal.sample(rng)
                };
                let u = head.mean[j] + std * z;
                let a = u.tanh();
                log_prob += -0.5 * z * z
                    - head.log_std[j]
                    - HALF_LN_2PI
                    - (1.0 - a * a + SQUASH_EPS).ln();
                action.push(a);
            }
            Ok((Action::Vector(action), log_prob))
        }
    }
}

/// Log-density of a given action under the actor's current distribution.
/// Diagnostic counterpart of `actor_sample`; the quadrature tests integrate
/// it to check the density is normalized.
pub fn action_log_prob(
    spec: &AgentSpec,
    actor: &[f64],
    obs: Input<'_>,
    action: &Action,
) -> Result<f64> {
    let out = mlp_forward(&spec.actor, actor, obs)?;
    check_finite(&out)?;
    match (spec.action_space, action) {
        (ActionSpace::Discrete(n), Action::Index(a)) => {
            if *a >= n {
                return Err(Error::InvalidArgument(format!("action {a} out of range")));
            }
            let mut logp = Vec::new();
            log_softmax(&out, &mut logp);
            Ok(logp[*a])
        }
        (ActionSpace::Continuous(d), Action::Vector(a)) => {
            if a.len() != d {
                return Err(Error::Shape(format!("action length {}", a.len())));
            }
            let head = gauss_head(&out);
            let mut log_prob = 0.0;
            for j in 0..d {
                if a[j].abs() >= 1.0 {
                    return Err(Error::InvalidArgument(
                        "squashed action outside (-1,1)".into(),
                    ));
                }
                let u = a[j].atanh();
                let z = (u - head.mean[j]) / head.log_std[j].exp();
                log_prob += -0.5 * z * z
                    - head.log_std[j]
                    - HALF_LN_2PI
                    - (1.0 - a[j] * a[j] + SQUASH_EPS).ln();
            }
            Ok(log_prob)
        }
        _ => Err(Error::InvalidArgument(
            "action kind does not match the action space".into(),
        )),
    }
}

fn take_index(a: &Action) -> Result<usize> {
    match a {
        Action::Index(i) => Ok(*i),
        Action::Vector(_) => Err(Error::InvalidArgument(
            "vector action in a discrete agent's batch".into(),
        )),
    }
}

fn take_vector<'a>(a: &'a Action) -> Result<&'a [f64]> {
    match a {
        Action::Vector(v) => Ok(v),
        Action::Index(_) => Err(Error::InvalidArgument(
            "index action in a continuous agent's batch".into(),
        )),
    }
}

/// Copy an observation (and optionally action coordinates) into the critic's
/// dense input buffer.
fn fill_critic_input(obs: Input<'_>, action: &[f64], obs_dim: usize, buf: &mut Vec<f64>) {
    buf.clear();
    match obs {
        Input::Dense(x) => buf.extend_from_slice(x),
        Input::OneHot(k) => {
            buf.resize(obs_dim, 0.0);
            buf[k] = 1.0;
        }
    }
    buf.extend_from_slice(action);
}

/// Soft state value of `next_state` under the current actor and the target
/// critics: the bootstrap term of the critic target. Exact expectation over
/// actions in the discrete case, a single actor sample in the continuous
/// case. The entropy term enters only when the config asks for it.
pub fn soft_backup(
    spec: &AgentSpec,
    env: &dyn Env,
    params: &AgentParams,
    cfg: &SacConfig,
    next_state: &State,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let alpha = params.alpha();
    let mut obs_buf = Vec::new();
    match spec.action_space {
        ActionSpace::Discrete(n) => {
            let obs = env.encode_obs(next_state, &mut obs_buf);
            let logits = mlp_forward(&spec.actor, &params.actor, obs)?;
            check_finite(&logits)?;
            let mut logp = Vec::new();
            log_softmax(&logits, &mut logp);
            let q1 = mlp_forward(&spec.critic, &params.target1, obs)?;
            let q2 = mlp_forward(&spec.critic, &params.target2, obs)?;
            let mut v = 0.0;
            for a in 0..n {
                let p = logp[a].exp();
                if p == 0.0 {
                    continue;
                }
                let q = if cfg.use_cdq { q1[a].min(q2[a]) } else { q1[a] };
                let mut term = q;
                if cfg.use_entropy_backup {
                    term -= alpha * logp[a];
                }
                v += p * term;
            }
            Ok(v)
        }
        ActionSpace::Continuous(_) => {
            let (action, logp) = {
                let obs = env.encode_obs(next_state, &mut obs_buf);
                actor_sample(spec, &params.actor, obs, rng, false)?
            };
            let a = take_vector(&action)?;
            let mut cin = Vec::new();
            let obs = env.encode_obs(next_state, &mut obs_buf);
            fill_critic_input(obs, a, spec.obs_dim, &mut cin);
            let q1 = mlp_forward(&spec.critic, &params.target1, Input::Dense(&cin))?[0];
            let q = if cfg.use_cdq {
                let q2 = mlp_forward(&spec.critic, &params.target2, Input::Dense(&cin))?[0];
                q1.min(q2)
            } else {
                q1
            };
            Ok(if cfg.use_entropy_backup {
                q - alpha * logp
            } else {
                q
            })
        }
    }
}

fn check_batch(batch: &[&Transition]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Mean squared Bellman error of both critics against the common target
/// y = r + gamma (1-done) soft_backup(s'), and its gradients. Targets and
/// actor are constants here.
pub fn critic_loss_and_grad(
    spec: &AgentSpec,
    env: &dyn Env,
    batch: &[&Transition],
    params: &AgentParams,
    cfg: &SacConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamVector, ParamVector)> {
    check_batch(batch)?;
    let n = batch.len() as f64;
    let mut grad1 = vec![0.0; spec.critic.param_count()];
    let mut grad2 = vec![0.0; spec.critic.param_count()];
    let mut loss = 0.0;
    let mut trace1 = Trace::default();
    let mut trace2 = Trace::default();
    let mut obs_buf = Vec::new();
    let mut cin = Vec::new();
    let mut upstream = vec![0.0; spec.critic.output_dim()];
    for t in batch {
        let y = {
            let backup = if t.done {
                0.0
            } else {
                soft_backup(spec, env, params, cfg, &t.next_state, rng)?
            };
            t.reward + cfg.gamma * backup
        };
        match spec.action_space {
            ActionSpace::Discrete(_) => {
                let a = take_index(&t.action)?;
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                forward_trace(&spec.critic, &params.critic1, obs, &mut trace1)?;
                forward_trace(&spec.critic, &params.critic2, obs, &mut trace2)?;
                let q1 = trace1.output()[a];
                let q2 = trace2.output()[a];
                loss += ((q1 - y).powi(2) + (q2 - y).powi(2)) / n;
                upstream.iter_mut().for_each(|u| *u = 0.0);
                upstream[a] = 2.0 * (q1 - y) / n;
                backward_trace(&spec.critic, &params.critic1, obs, &trace1, &upstream, &mut grad1, None)?;
                upstream[a] = 2.0 * (q2 - y) / n;
                backward_trace(&spec.critic, &params.critic2, obs, &trace2, &upstream, &mut grad2, None)?;
            }
            ActionSpace::Continuous(_) => {
                let a = take_vector(&t.action)?;
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                fill_critic_input(obs, a, spec.obs_dim, &mut cin);
                let input = Input::Dense(&cin);
                forward_trace(&spec.critic, &params.critic1, input, &mut trace1)?;
                forward_trace(&spec.critic, &params.critic2, input, &mut trace2)?;
                let q1 = trace1.output()[0];
                let q2 = trace2.output()[0];
                loss += ((q1 - y).powi(2) + (q2 - y).powi(2)) / n;
                upstream[0] = 2.0 * (q1 - y) / n;
                backward_trace(&spec.critic, &params.critic1, input, &trace1, &upstream, &mut grad1, None)?;
                upstream[0] = 2.0 * (q2 - y) / n;
                backward_trace(&spec.critic, &params.critic2, input, &trace2, &upstream, &mut grad2, None)?;
            }
        }
    }
    Ok((loss, grad1, grad2))
}

/// Mean of alpha log pi(a|s) - Qmin(s,a) with a from the current actor and
/// critics held constant; exact over actions when discrete, reparameterized
/// when continuous. Returns the actor gradient.
pub fn actor_loss_and_grad(
    spec: &AgentSpec,
    env: &dyn Env,
    batch: &[&Transition],
    params: &AgentParams,
    cfg: &SacConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamVector)> {
    check_batch(batch)?;
    let n = batch.len() as f64;
    let alpha = params.alpha();
    let mut grad = vec![0.0; spec.actor.param_count()];
    let mut loss = 0.0;
    let mut actor_trace = Trace::default();
    let mut obs_buf = Vec::new();
    let mut logp = Vec::new();
    for t in batch {
        match spec.action_space {
            ActionSpace::Discrete(na) => {
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                forward_trace(&spec.actor, &params.actor, obs, &mut actor_trace)?;
                check_finite(actor_trace.output())?;
                log_softmax(actor_trace.output(), &mut logp);
                let q1 = mlp_forward(&spec.critic, &params.critic1, obs)?;
                let qmin: Vec<f64> = if cfg.use_cdq {
                    let q2 = mlp_forward(&spec.critic, &params.critic2, obs)?;
                    q1.iter().zip(&q2).map(|(x, y)| x.min(*y)).collect()
                } else {
                    q1
                };
                // loss_s = sum_a pi_a (alpha log pi_a - Q_a); its logit
                // gradient is pi_b (f_b - loss_s).
                let mut loss_s = 0.0;
                for a in 0..na {
                    let p = logp[a].exp();
                    if p > 0.0 {
                        loss_s += p * (alpha * logp[a] - qmin[a]);
                    }
                }
                loss += loss_s / n;
                let upstream: Vec<f64> = (0..na)
                    .map(|b| {
                        let p = logp[b].exp();
                        p * (alpha * logp[b] - qmin[b] - loss_s) / n
                    })
                    .collect();
                backward_trace(
                    &spec.actor,
                    &params.actor,
                    obs,
                    &actor_trace,
                    &upstream,
                    &mut grad,
                    None,
                )?;
            }
            ActionSpace::Continuous(d) => {
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                forward_trace(&spec.actor, &params.actor, obs, &mut actor_trace)?;
                check_finite(actor_trace.output())?;
                let head = gauss_head(actor_trace.output());
                // Reparameterized draw: u = mean + std z with fixed noise z.
                let mut z = Vec::with_capacity(d);
                let mut act = Vec::with_capacity(d);
                let mut log_prob = 0.0;
                for j in 0..d {
                    let zj: f64 = StandardNormal.sample(rng);
                    let std = head.log_std[j].exp();
                    let u = head.mean[j] + std * zj;
                    let a = u.tanh();
                    log_prob += -0.5 * zj * zj
                        - head.log_std[j]
                        - HALF_LN_2PI
                        - (1.0 - a * a + SQUASH_EPS).ln();
                    z.push(zj);
                    act.push(a);
                }
                // Q at the sampled action, with the input gradient flowing
                // back to the action coordinates.
                let mut cin = Vec::new();
                let obs2 = env.encode_obs(&t.state, &mut obs_buf);
                fill_critic_input(obs2, &act, spec.obs_dim, &mut cin);
                let input = Input::Dense(&cin);
                let mut tr1 = Trace::default();
                let mut tr2 = Trace::default();
                forward_trace(&spec.critic, &params.critic1, input, &mut tr1)?;
                let q1 = tr1.output()[0];
                let (qmin, sel_params, sel_trace) = if cfg.use_cdq {
                    forward_trace(&spec.critic, &params.critic2, input, &mut tr2)?;
                    let q2 = tr2.output()[0];
                    if q2 < q1 {
                        (q2, &params.critic2, &tr2)
                    } else {
                        (q1, &params.critic1, &tr1)
                    }
                } else {
                    (q1, &params.critic1, &tr1)
                };
                let mut cin_grad = vec![0.0; spec.critic.input_dim()];
                let mut scratch = vec![0.0; spec.critic.param_count()];
                backward_trace(
                    &spec.critic,
                    sel_params,
                    input,
                    sel_trace,
                    &[1.0],
                    &mut scratch,
                    Some(&mut cin_grad),
                )?;
                let dq_da = &cin_grad[spec.obs_dim..];

                loss += (alpha * log_prob - qmin) / n;
                let mut upstream = vec![0.0; 2 * d];
                for j in 0..d {
                    let t_j = act[j];
                    let dtanh = 1.0 - t_j * t_j;
                    // d log_prob / du through the squash correction only;
                    // the Gaussian term is constant in u under fixed noise.
                    let corr = 2.0 * t_j * dtanh / (dtanh + SQUASH_EPS);
                    let du_dmean = 1.0;
                    let du_dls = head.log_std[j].exp() * z[j];
                    let dlogp_du = corr;
                    let dq_du = dq_da[j] * dtanh;
                    upstream[j] = (alpha * dlogp_du * du_dmean - dq_du * du_dmean) / n;
                    let g_ls = (alpha * (-1.0 + dlogp_du * du_dls) - dq_du * du_dls) / n;
                    upstream[d + j] = if head.clamped[j] { 0.0 } else { g_ls };
                }
                let obs3 = env.encode_obs(&t.state, &mut obs_buf);
                backward_trace(
                    &spec.actor,
                    &params.actor,
                    obs3,
                    &actor_trace,
                    &upstream,
                    &mut grad,
                    None,
                )?;
            }
        }
    }
    Ok((loss, grad))
}

/// Temperature objective from an already-computed mean log-probability:
/// L = -alpha (mean_logpi + target). d/d log_alpha equals the loss itself.
pub fn temperature_loss_from_logpi(
    mean_logpi: f64,
    log_alpha: f64,
    target_entropy: f64,
) -> (f64, f64) {
    let loss = -log_alpha.exp() * (mean_logpi + target_entropy);
    (loss, loss)
}

/// Temperature loss over a batch; the policy's log-probabilities are
/// constants (exact expectation when discrete, one sample per state when
/// continuous).
pub fn temperature_loss_and_grad(
    spec: &AgentSpec,
    env: &dyn Env,
    batch: &[&Transition],
    params: &AgentParams,
    cfg: &SacConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    check_batch(batch)?;
    let mut mean_logpi = 0.0;
    let mut obs_buf = Vec::new();
    for t in batch {
        match spec.action_space {
            ActionSpace::Discrete(_) => {
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                let logits = mlp_forward(&spec.actor, &params.actor, obs)?;
                check_finite(&logits)?;
                let mut logp = Vec::new();
                log_softmax(&logits, &mut logp);
                let e: f64 = logp
                    .iter()
                    .map(|l| {
                        let p = l.exp();
                        if p > 0.0 {
                            p * l
                        } else {
                            0.0
                        }
                    })
                    .sum();
                mean_logpi += e / batch.len() as f64;
            }
            ActionSpace::Continuous(_) => {
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                let (_, logp) = actor_sample(spec, &params.actor, obs, rng, false)?;
                mean_logpi += logp / batch.len() as f64;
            }
        }
    }
    Ok(temperature_loss_from_logpi(
        mean_logpi,
        params.log_alpha,
        cfg.target_entropy,
    ))
}

/// Mean over the batch of min(Q1, Q2) at the stored state-action pairs.
/// Logged for stability monitoring, never trained on.
pub fn mean_q(
    spec: &AgentSpec,
    env: &dyn Env,
    batch: &[&Transition],
    params: &AgentParams,
) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    let mut obs_buf = Vec::new();
    let mut cin = Vec::new();
    for t in batch {
        let q = match spec.action_space {
            ActionSpace::Discrete(_) => {
                let a = take_index(&t.action)?;
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                let q1 = mlp_forward(&spec.critic, &params.critic1, obs)?[a];
                let q2 = mlp_forward(&spec.critic, &params.critic2, obs)?[a];
                q1.min(q2)
            }
            ActionSpace::Continuous(_) => {
                let a = take_vector(&t.action)?;
                let obs = env.encode_obs(&t.state, &mut obs_buf);
                fill_critic_input(obs, a, spec.obs_dim, &mut cin);
                let q1 = mlp_forward(&spec.critic, &params.critic1, Input::Dense(&cin))?[0];
                let q2 = mlp_forward(&spec.critic, &params.critic2, Input::Dense(&cin))?[0];
                q1.min(q2)
            }
        };
        total += q;
    }
    Ok(total / batch.len() as f64)
}

/// target' = (1-rho) target + rho online, elementwise and in place.
/// Written as target += rho (online - target) so equal inputs are an exact
/// fixed point; the identity checks on the meta updates depend on that.
pub fn soft_update(target: &mut [f64], online: &[f64], rho: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::InvalidArgument(format!(
            "soft update length mismatch {} vs {}",
            target.len(),
            online.len()
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("ema weight {rho}")));
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t += rho * (*o - *t);
    }
    Ok(())
}
