//! Dense-reward continuous control: a point mass steered toward a goal in a
//! box. State is position and velocity in the plane, actions are
//! accelerations clipped to the unit box, reward is negative distance to the
//! goal (scaled) minus a small control penalty.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, Env, State};
use crate::nn::Input;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PointMassSpec {
    pub dt: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Position components are clipped to [-arena, arena].
    pub arena: f64,
    pub reward_scale: f64,
    pub ctrl_cost: f64,
    /// Reset scatters the start position uniformly by this much per axis.
    pub reset_noise: f64,
}

impl Default for PointMassSpec {
    fn default() -> Self {
        PointMassSpec {
            dt: 0.1,
            horizon: 200,
            gamma: 0.95,
            start: [-1.0, -1.0],
            goal: [1.0, 1.0],
            arena: 2.0,
            reward_scale: 0.1,
            ctrl_cost: 0.001,
            reset_noise: 0.15,
        }
    }
}

impl PointMassSpec {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    fn unpack(state: &State) -> Result<[f64; 4]> {
        match state {
            State::Vector(v) if v.len() == 4 => Ok([v[0], v[1], v[2], v[3]]),
            _ => Err(Error::InvalidArgument(
                "point-mass state must be a 4-vector".into(),
            )),
        }
    }

    /// Proportional-derivative steering toward the goal; the scripted expert
    /// for dataset generation and reference returns. Competent, not tuned to
    /// perfection.
    pub fn expert_action(&self, state: &State) -> Result<Action> {
        let [px, py, vx, vy] = Self::unpack(state)?;
        let ax = 2.0 * (self.goal[0] - px) - 2.5 * vx;
        let ay = 2.0 * (self.goal[1] - py) - 2.5 * vy;
        Ok(Action::Vector(vec![ax.clamp(-1.0, 1.0), ay.clamp(-1.0, 1.0)]))
    }
}

impl Env for PointMassSpec {
    fn id(&self) -> &str {
        "pointmass"
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(2)
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn r_max(&self) -> f64 {
        // Farthest corner-to-corner distance plus the maximal control cost.
        let d = 2.0 * self.arena * std::f64::consts::SQRT_2;
        self.reward_scale * d + self.ctrl_cost * 2.0
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        let n = self.reset_noise;
        let px = self.start[0] + rng.random_range(-n..=n);
        let py = self.start[1] + rng.random_range(-n..=n);
        State::Vector(vec![
            px.clamp(-self.arena, self.arena),
            py.clamp(-self.arena, self.arena),
            0.0,
            0.0,
        ])
    }

    fn step(
        &self,
        state: &State,
        action: &Action,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(State, f64, bool)> {
        let [px, py, vx, vy] = Self::unpack(state)?;
        let (ax, ay) = match action {
            Action::Vector(a) if a.len() == 2 => (a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)),
            _ => {
                return Err(Error::InvalidArgument(
                    "point-mass action must be a 2-vector".into(),
                ))
            }
        };
        // Position first (old velocity), then velocity.
        let npx = (px + vx * self.dt).clamp(-self.arena, self.arena);
        let npy = (py + vy * self.dt).clamp(-self.arena, self.arena);
        let nvx = (vx + ax * self.dt).clamp(-1.0, 1.0);
        let nvy = (vy + ay * self.dt).clamp(-1.0, 1.0);
        let dist = ((npx - self.goal[0]).powi(2) + (npy - self.goal[1]).powi(2)).sqrt();
        let reward = -self.reward_scale * dist - self.ctrl_cost * (ax * ax + ay * ay);
        Ok((State::Vector(vec![npx, npy, nvx, nvy]), reward, false))
    }

    fn encode_obs<'a>(&self, state: &'a State, _buf: &'a mut Vec<f64>) -> Input<'a> {
        match state {
            State::Vector(v) => Input::Dense(v),
            State::Index(_) => Input::Dense(&[]),
        }
    }

    fn scripted_expert(&self, state: &State) -> Option<Action> {
        self.expert_action(state).ok()
    }
}
