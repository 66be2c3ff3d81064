//! Transition storage: offline dataset generation at quality tiers, the
//! online ring buffer, uniform batch sampling, and a plain-text persistence
//! format with bit-exact float round-trips.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{Action, ActionSpace, Env, State, TabularPolicy};
use crate::rng::substream;
use crate::{Error, Result};

pub const DEFAULT_BUFFER_CAPACITY: usize = 1_000_000;

/// Rng stream component for dataset rollouts.
const STREAM_ROLLOUT: u32 = 0x10;
/// Rng stream component for Monte-Carlo reference returns.
const STREAM_REFERENCE: u32 = 0x11;

/// One environment step. `done` records entry into a terminal state only;
/// horizon truncation is not stored, so bootstrapping stays correct.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
    pub done: bool,
}

/// Shape of one side of a transition, used to keep buffers homogeneous.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FieldKind {
    Index,
    Vector(usize),
}

impl FieldKind {
    fn of_state(s: &State) -> FieldKind {
        match s {
            State::Index(_) => FieldKind::Index,
            State::Vector(v) => FieldKind::Vector(v.len()),
        }
    }

    fn of_action(a: &Action) -> FieldKind {
        match a {
            Action::Index(_) => FieldKind::Index,
            Action::Vector(v) => FieldKind::Vector(v.len()),
        }
    }
}

impl Transition {
    fn check_like(&self, other: &Transition) -> Result<()> {
        let ok = FieldKind::of_state(&self.state) == FieldKind::of_state(&other.state)
            && FieldKind::of_state(&self.next_state) == FieldKind::of_state(&other.next_state)
            && FieldKind::of_action(&self.action) == FieldKind::of_action(&other.action);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "transition kind differs from the buffer's".into(),
            ))
        }
    }
}

/// Anything transitions can be drawn from uniformly with replacement.
pub trait TransitionSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> &Transition;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform with replacement; deterministic under a fixed rng.
    fn sample_refs(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&Transition>> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size 0".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptySource("sampling from empty buffer".into()));
        }
        Ok((0..batch)
            .map(|_| self.get(rng.random_range(0..self.len())))
            .collect())
    }

    fn sample_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Transition>> {
        Ok(self
            .sample_refs(batch, rng)?
            .into_iter()
            .cloned()
            .collect())
    }
}

/// Fixed-capacity ring; oldest entries are overwritten first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("zero buffer capacity".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            storage: Vec::new(),
            cursor: 0,
        })
    }

    pub fn with_default_capacity() -> Self {
        ReplayBuffer::new(DEFAULT_BUFFER_CAPACITY).expect("default capacity is positive")
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::NonFinite {
                what: "reward",
                index: self.storage.len(),
            });
        }
        if let Some(first) = self.storage.first() {
            t.check_like(first)?;
        }
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }
}

impl TransitionSource for ReplayBuffer {
    fn len(&self) -> usize {
        self.storage.len()
    }

    fn get(&self, i: usize) -> &Transition {
        &self.storage[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Expert,
    Medium,
    Random,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Expert => "expert",
            Tier::Medium => "medium",
            Tier::Random => "random",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Tier> {
        match s {
            "expert" => Ok(Tier::Expert),
            "medium" => Ok(Tier::Medium),
            "random" => Ok(Tier::Random),
            other => Err(Error::Config(format!(
                "unknown tier {other:?}, expected expert, medium or random"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub env_id: String,
    pub tier: Tier,
    pub behavior_policy_seed: u64,
    pub size: usize,
    /// Exact (tabular) or Monte-Carlo (continuous) discounted returns of the
    /// uniform-random and expert reference policies, for score normalization.
    pub ret_random: f64,
    pub ret_expert: f64,
}

/// Immutable after creation; only shared references escape.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    transitions: Vec<Transition>,
    meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, mut meta: DatasetMeta) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptySource("dataset with no transitions".into()));
        }
        for (i, t) in transitions.iter().enumerate() {
            if !t.reward.is_finite() {
                return Err(Error::NonFinite {
                    what: "reward",
                    index: i,
                });
            }
            t.check_like(&transitions[0])?;
        }
        meta.size = transitions.len();
        Ok(OfflineDataset { transitions, meta })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }
}

impl TransitionSource for OfflineDataset {
    fn len(&self) -> usize {
        self.transitions.len()
    }

    fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }
}

/// A behavior policy for rollouts: maps states to actions.
pub trait ActionSource {
    fn act(&self, env: &dyn Env, state: &State, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// Uniform over the action space: the random tier's behavior.
pub struct UniformActions;

impl ActionSource for UniformActions {
    fn act(&self, env: &dyn Env, _state: &State, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(match env.action_space() {
            ActionSpace::Discrete(n) => Action::Index(rng.random_range(0..n)),
            ActionSpace::Continuous(dim) => {
                Action::Vector((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
            }
        })
    }
}

/// A tabular policy table as a behavior policy.
pub struct TableActions(pub TabularPolicy);

impl ActionSource for TableActions {
    fn act(&self, _env: &dyn Env, state: &State, rng: &mut ChaCha8Rng) -> Result<Action> {
        match state {
            State::Index(s) => Ok(Action::Index(self.0.sample(*s, rng))),
            State::Vector(_) => Err(Error::InvalidArgument(
                "policy table applied to a vector state".into(),
            )),
        }
    }
}

/// The environment's own scripted controller as a behavior policy.
pub struct ScriptedExpert;

impl ActionSource for ScriptedExpert {
    fn act(&self, env: &dyn Env, state: &State, _rng: &mut ChaCha8Rng) -> Result<Action> {
        env.scripted_expert(state).ok_or_else(|| {
            Error::Config(format!("environment '{}' has no scripted expert", env.id()))
        })
    }
}

/// Expert source with probability 1−epsilon, uniform otherwise.
pub struct EpsilonMixActions<'a> {
    pub expert: &'a dyn ActionSource,
    pub epsilon: f64,
}

impl ActionSource for EpsilonMixActions<'_> {
    fn act(&self, env: &dyn Env, state: &State, rng: &mut ChaCha8Rng) -> Result<Action> {
        if rng.random::<f64>() < self.epsilon {
            UniformActions.act(env, state, rng)
        } else {
            self.expert.act(env, state, rng)
        }
    }
}

/// Mean discounted return of `source` over `episodes` rollouts, each capped
/// at the horizon.
pub fn monte_carlo_return(
    env: &dyn Env,
    source: &dyn ActionSource,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("zero episodes".into()));
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        let mut discount = 1.0;
        for _ in 0..env.horizon() {
            let action = source.act(env, &state, rng)?;
            let (next, reward, done) = env.step(&state, &action, rng)?;
            total += discount * reward;
            discount *= env.gamma();
            if done {
                break;
            }
            state = next;
        }
    }
    Ok(total / episodes as f64)
}

const MEDIUM_EPSILON: f64 = 0.3;
/// Episodes behind each Monte-Carlo reference return.
pub const REFERENCE_EPISODES: usize = 100;

/// Roll out a behavior policy at the requested quality tier and package the
/// transitions with reference returns.
///
/// Tabular environments derive their expert from the planning oracle and
/// their reference returns from the exact linear solves; `expert` is ignored
/// there. Continuous environments need a supplied expert for the expert and
/// medium tiers (there is nothing to plan with) and fall back to a degenerate
/// expert reference when generating the random tier without one.
pub fn generate_offline_dataset(
    env: &dyn Env,
    tier: Tier,
    n_transitions: usize,
    seed: u64,
    expert: Option<&dyn ActionSource>,
) -> Result<OfflineDataset> {
    if n_transitions == 0 {
        return Err(Error::InvalidArgument("empty dataset requested".into()));
    }
    let mut rng = substream(seed, STREAM_ROLLOUT, 0);
    let mut ref_rng = substream(seed, STREAM_REFERENCE, 0);

    let behavior: Box<dyn ActionSource + '_>;
    let ret_random;
    let ret_expert;
    if let Some(mdp) = env.tabular_mdp() {
        let greedy = mdp.value_iteration(crate::envs::DEFAULT_VI_TOL)?.greedy;
        ret_random = mdp.exact_policy_return(&mdp.uniform_policy())?;
        ret_expert = mdp.exact_policy_return(&greedy)?;
        behavior = match tier {
            Tier::Expert => Box::new(TableActions(greedy)),
            Tier::Medium => Box::new(TableActions(greedy.epsilon_mix(MEDIUM_EPSILON)?)),
            Tier::Random => Box::new(TableActions(mdp.uniform_policy())),
        };
    } else {
        ret_random = monte_carlo_return(env, &UniformActions, REFERENCE_EPISODES, &mut ref_rng)?;
        ret_expert = match expert {
            Some(e) => monte_carlo_return(env, e, REFERENCE_EPISODES, &mut ref_rng)?,
            None => ret_random,
        };
        behavior = match tier {
            Tier::Expert => Box::new(ForwardActions(expert.ok_or_else(missing_expert)?)),
            Tier::Medium => Box::new(EpsilonMixActions {
                expert: expert.ok_or_else(missing_expert)?,
                epsilon: MEDIUM_EPSILON,
            }),
            Tier::Random => Box::new(UniformActions),
        };
    }

    let mut transitions = Vec::with_capacity(n_transitions);
    'fill: loop {
        let mut state = env.reset(&mut rng);
        for _ in 0..env.horizon() {
            let action = behavior.act(env, &state, &mut rng)?;
            let (next, reward, done) = env.step(&state, &action, &mut rng)?;
            transitions.push(Transition {
                state: state.clone(),
                action,
                reward,
                next_state: next.clone(),
                done,
            });
            if transitions.len() == n_transitions {
                break 'fill;
            }
            if done {
                break;
            }
            state = next;
        }
    }

    OfflineDataset::new(
        transitions,
        DatasetMeta {
            env_id: env.id().to_string(),
            tier,
            behavior_policy_seed: seed,
            size: n_transitions,
            ret_random,
            ret_expert,
        },
    )
}

fn missing_expert() -> Error {
    Error::Config(
        "this tier on a continuous environment requires a trained expert policy".into(),
    )
}

/// Borrowed pass-through so a reference can live in a Box<dyn ActionSource>.
struct ForwardActions<'a>(&'a dyn ActionSource);

impl ActionSource for ForwardActions<'_> {
    fn act(&self, env: &dyn Env, state: &State, rng: &mut ChaCha8Rng) -> Result<Action> {
        self.0.act(env, state, rng)
    }
}

// ---------------------------------------------------------------------------
// Persistence. One header line, then one line per transition; floats use
// shortest round-trip formatting so load(save(ds)) is bit-equal.

fn kind_token(kind: FieldKind) -> String {
    match kind {
        FieldKind::Index => "index".into(),
        FieldKind::Vector(n) => format!("vec{n}"),
    }
}

fn parse_kind_token(tok: &str, line: usize) -> Result<FieldKind> {
    if tok == "index" {
        return Ok(FieldKind::Index);
    }
    if let Some(rest) = tok.strip_prefix("vec") {
        if let Ok(n) = rest.parse::<usize>() {
            if n > 0 {
                return Ok(FieldKind::Vector(n));
            }
        }
    }
    Err(Error::Format {
        line,
        msg: format!("bad arity token {tok:?}"),
    })
}

fn push_state_fields(s: &State, out: &mut String) {
    match s {
        State::Index(i) => out.push_str(&i.to_string()),
        State::Vector(v) => push_floats(v, out),
    }
}

fn push_action_fields(a: &Action, out: &mut String) {
    match a {
        Action::Index(i) => out.push_str(&i.to_string()),
        Action::Vector(v) => push_floats(v, out),
    }
}

fn push_floats(v: &[f64], out: &mut String) {
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{x}"));
    }
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    let m = ds.meta();
    let first = &ds.transitions()[0];
    let mut out = String::new();
    out.push_str(&format!(
        "moorl-dataset v1 env={} tier={} n={} seed={} ret_random={} ret_expert={} state={} action={}\n",
        m.env_id,
        m.tier,
        m.size,
        m.behavior_policy_seed,
        m.ret_random,
        m.ret_expert,
        kind_token(FieldKind::of_state(&first.state)),
        kind_token(FieldKind::of_action(&first.action)),
    ));
    for t in ds.transitions() {
        push_state_fields(&t.state, &mut out);
        out.push(' ');
        push_action_fields(&t.action, &mut out);
        out.push(' ');
        out.push_str(&format!("{}", t.reward));
        out.push(' ');
        push_state_fields(&t.next_state, &mut out);
        out.push_str(if t.done { " 1\n" } else { " 0\n" });
    }
    fs::write(path, out)?;
    Ok(())
}

struct FieldCursor<'a> {
    fields: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> FieldCursor<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.fields.next().ok_or(Error::Format {
            line: self.line,
            msg: "record has too few fields".into(),
        })
    }

    fn next_f64(&mut self) -> Result<f64> {
        let tok = self.next()?;
        tok.parse::<f64>().map_err(|_| Error::Format {
            line: self.line,
            msg: format!("bad float {tok:?}"),
        })
    }

    fn next_usize(&mut self) -> Result<usize> {
        let tok = self.next()?;
        tok.parse::<usize>().map_err(|_| Error::Format {
            line: self.line,
            msg: format!("bad index {tok:?}"),
        })
    }

    fn read_state(&mut self, kind: FieldKind) -> Result<State> {
        Ok(match kind {
            FieldKind::Index => State::Index(self.next_usize()?),
            FieldKind::Vector(n) => {
                State::Vector((0..n).map(|_| self.next_f64()).collect::<Result<_>>()?)
            }
        })
    }

    fn read_action(&mut self, kind: FieldKind) -> Result<Action> {
        Ok(match kind {
            FieldKind::Index => Action::Index(self.next_usize()?),
            FieldKind::Vector(n) => {
                Action::Vector((0..n).map(|_| self.next_f64()).collect::<Result<_>>()?)
            }
        })
    }

    fn finish(mut self) -> Result<()> {
        if self.fields.next().is_some() {
            return Err(Error::Format {
                line: self.line,
                msg: "record has extra fields".into(),
            });
        }
        Ok(())
    }
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Format {
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut cur = FieldCursor {
        fields: header.split_whitespace(),
        line: 1,
    };
    for magic in ["moorl-dataset", "v1"] {
        let tok = cur.next()?;
        if tok != magic {
            return Err(Error::Format {
                line: 1,
                msg: format!("expected {magic:?}, found {tok:?}"),
            });
        }
    }
    let mut header_value = |key: &str| -> Result<String> {
        let tok = cur.next()?;
        match tok.split_once('=') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(Error::Format {
                line: 1,
                msg: format!("expected {key}=..., found {tok:?}"),
            }),
        }
    };
    let env_id = header_value("env")?;
    let tier: Tier = header_value("tier")?.parse().map_err(|_| Error::Format {
        line: 1,
        msg: "unknown tier".into(),
    })?;
    let n: usize = header_value("n")?.parse().map_err(|_| Error::Format {
        line: 1,
        msg: "bad transition count".into(),
    })?;
    let seed: u64 = header_value("seed")?.parse().map_err(|_| Error::Format {
        line: 1,
        msg: "bad seed".into(),
    })?;
    let ret_random: f64 = header_value("ret_random")?
        .parse()
        .map_err(|_| Error::Format {
            line: 1,
            msg: "bad ret_random".into(),
        })?;
    let ret_expert: f64 = header_value("ret_expert")?
        .parse()
        .map_err(|_| Error::Format {
            line: 1,
            msg: "bad ret_expert".into(),
        })?;
    let state_kind = parse_kind_token(&header_value("state")?, 1)?;
    let action_kind = parse_kind_token(&header_value("action")?, 1)?;
    cur.finish()?;

    let mut transitions = Vec::with_capacity(n);
    for i in 0..n {
        let line_no = i + 2;
        let line = lines.next().ok_or(Error::Format {
            line: line_no,
            msg: format!("record {} of {n} missing", i + 1),
        })?;
        let mut cur = FieldCursor {
            fields: line.split_whitespace(),
            line: line_no,
        };
        let state = cur.read_state(state_kind)?;
        let action = cur.read_action(action_kind)?;
        let reward = cur.next_f64()?;
        if !reward.is_finite() {
            return Err(Error::Format {
                line: line_no,
                msg: "non-finite reward".into(),
            });
        }
        let next_state = cur.read_state(state_kind)?;
        let done = match cur.next()? {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Format {
                    line: line_no,
                    msg: format!("bad done flag {other:?}"),
                })
            }
        };
        cur.finish()?;
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            done,
        });
    }
    if let Some(extra) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(Error::Format {
                line: n + 2,
                msg: "trailing data after the declared records".into(),
            });
        }
    }
    OfflineDataset::new(
        transitions,
        DatasetMeta {
            env_id,
            tier,
            behavior_policy_seed: seed,
            size: n,
            ret_random,
            ret_expert,
        },
    )
}
