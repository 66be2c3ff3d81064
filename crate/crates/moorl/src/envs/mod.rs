//! Toy environments with exact dynamic-programming oracles: a sparse-reward
//! tabular gridworld and a dense-reward continuous point mass. Environments
//! are value-like; stepping takes an explicit rng, so independent instances
//! can run anywhere.

mod grid;
mod point_mass;
mod tabular;

pub use grid::{grid_to_mdp, parse_grid_map, write_grid_map, GridworldSpec};
pub use point_mass::PointMassSpec;
pub use tabular::{
    solve_dense, TabularEnv, TabularMdp, TabularPolicy, ValueSolution, DEFAULT_VI_TOL,
};

use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Environment state: a tabular index or a feature vector.
#[derive(Clone, Debug, PartialEq)]
pub enum State {
    Index(usize),
    Vector(Vec<f64>),
}

/// Agent action: a discrete index or a real vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Index(usize),
    Vector(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Action dimensionality: count for discrete spaces, vector length for
    /// continuous ones.
    pub fn dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }

    /// Default temperature target: half the action dimension, negated.
    pub fn default_target_entropy(&self) -> f64 {
        -(self.dim() as f64) / 2.0
    }
}

/// A stochastic environment. `step` never caps episodes; the horizon is an
/// episode cap enforced by rollout loops, and `done` reports entry into a
/// terminal state only, so truncation and termination stay distinguishable
/// for bootstrapping.
pub trait Env {
    fn id(&self) -> &str;
    /// Width of the network observation (one-hot size for tabular states).
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn gamma(&self) -> f64;
    fn horizon(&self) -> usize;
    /// Upper bound on |reward| over reachable transitions.
    fn r_max(&self) -> f64;
    fn reset(&self, rng: &mut ChaCha8Rng) -> State;
    fn step(&self, state: &State, action: &Action, rng: &mut ChaCha8Rng)
        -> Result<(State, f64, bool)>;
    /// Encode a state for network input; `buf` is scratch for the vector case.
    fn encode_obs<'a>(&self, state: &'a State, buf: &'a mut Vec<f64>) -> crate::nn::Input<'a>;

    /// The exact tensors behind this environment, when it has them. Planning
    /// oracles and exact reference returns hang off this.
    fn tabular_mdp(&self) -> Option<&TabularMdp> {
        None
    }

    /// True when reward is a rare event rather than a shaped signal. Loss
    /// defaults flip off the pessimistic backup pieces on such tasks.
    fn sparse_reward(&self) -> bool {
        false
    }

    /// Scripted reference controller, when the environment ships one.
    /// Tabular environments plan instead and return nothing here.
    fn scripted_expert(&self, _state: &State) -> Option<Action> {
        None
    }
}

/// Built-in environment ids understood by the CLI and dataset headers.
pub const BUILTIN_ENVS: &[&str] = &["grid5", "grid8", "pointmass"];

/// 5x5 open grid, no slip: the easy sparse task.
pub fn builtin_grid5() -> GridworldSpec {
    GridworldSpec::from_map_text("grid5", "S....\n.....\n.....\n.....\n....G\n", 0.0, 0.99, 100)
        .expect("builtin grid5 is valid")
}

/// 8x8 grid with slip 0.1 and a wall line broken by one gap: the hard sparse
/// task. The wall keeps undirected exploration from stumbling onto the goal
/// too often.
pub fn builtin_grid8() -> GridworldSpec {
    let map = "S.......\n\
               ........\n\
               ........\n\
               ######.#\n\
               ........\n\
               ........\n\
               ........\n\
               .......G\n";
    // The shortest start-goal path is 14 moves; a 40-step horizon leaves
    // room for slip detours but keeps undirected exploration from reaching
    // the goal by accident, which is the point of the sparse task.
    GridworldSpec::from_map_text("grid8", map, 0.1, 0.99, 40).expect("builtin grid8 is valid")
}

/// Optional per-run adjustments applied on top of an environment's defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnvOverrides {
    pub slip: Option<f64>,
    pub gamma: Option<f64>,
    pub horizon: Option<usize>,
}

/// Environment registry: a built-in id or a path to a gridworld map file.
pub fn build_env(id: &str, ov: &EnvOverrides) -> Result<Box<dyn Env>> {
    let grid = |mut spec: GridworldSpec| -> Result<Box<dyn Env>> {
        spec.slip = ov.slip.unwrap_or(spec.slip);
        spec.gamma = ov.gamma.unwrap_or(spec.gamma);
        spec.horizon = ov.horizon.unwrap_or(spec.horizon);
        let name = spec.name.clone();
        Ok(Box::new(TabularEnv::new(name, grid_to_mdp(&spec)?)))
    };
    match id {
        "grid5" => grid(builtin_grid5()),
        "grid8" => grid(builtin_grid8()),
        "pointmass" => {
            if ov.slip.is_some() {
                return Err(Error::Config("pointmass has no slip".into()));
            }
            let mut spec = PointMassSpec::default();
            spec.gamma = ov.gamma.unwrap_or(spec.gamma);
            spec.horizon = ov.horizon.unwrap_or(spec.horizon);
            Ok(Box::new(spec))
        }
        path => {
            if std::path::Path::new(path).exists() {
                let text = std::fs::read_to_string(path)?;
                let mut spec = parse_grid_map(&text)?;
                spec.name = path.to_string();
                grid(spec)
            } else {
                Err(Error::Config(format!(
                    "unknown environment '{path}' (not a builtin id and not a map file)"
                )))
            }
        }
    }
}
