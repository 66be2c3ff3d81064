//! Exact tabular machinery: validated MDP tensors, value iteration, and the
//! two closed-form quantities everything else is checked against — the
//! discounted occupancy measure and the exact policy return. The two are
//! computed through different linear systems on purpose, so agreement
//! between them is a real consistency check, not an identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, Env, State};
use crate::analysis::VisitDist;
use crate::nn::Input;
use crate::{Error, Result};

pub const DEFAULT_VI_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// T[s][a][s'], flattened.
    transition: Vec<f64>,
    /// R[s][a][s'], flattened.
    reward: Vec<f64>,
    gamma: f64,
    rho: Vec<f64>,
    horizon: usize,
    terminal: Vec<bool>,
    /// max |R(s,a,s')| over transitions with positive probability.
    r_max: f64,
}

impl TabularMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        rho: Vec<f64>,
        horizon: usize,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("empty state or action set".into()));
        }
        let len = n_states * n_actions * n_states;
        if transition.len() != len || reward.len() != len {
            return Err(Error::Shape(format!(
                "tensor length {} or {} does not match S*A*S' = {len}",
                transition.len(),
                reward.len()
            )));
        }
        if rho.len() != n_states || terminal.len() != n_states {
            return Err(Error::Shape("rho/terminal length".into()));
        }
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in (0,1), got {gamma}"
            )));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("zero horizon".into()));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "negative transition probability at state {s} action {a}"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "transition row (s={s}, a={a}) sums to {sum}"
                    )));
                }
            }
        }
        let rho_sum: f64 = rho.iter().sum();
        if (rho_sum - 1.0).abs() > 1e-12 || rho.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "initial distribution sums to {rho_sum}"
            )));
        }
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let base = (s * n_actions + a) * n_states;
                for s2 in 0..n_states {
                    let p = transition[base + s2];
                    let self_loop = if s2 == s { 1.0 } else { 0.0 };
                    if (p - self_loop).abs() > 1e-12 || (p > 0.0 && reward[base + s2] != 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "terminal state {s} must self-loop with zero reward"
                        )));
                    }
                }
            }
        }
        let mut r_max = 0.0f64;
        for i in 0..len {
            if transition[i] > 0.0 {
                r_max = r_max.max(reward[i].abs());
            }
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            rho,
            horizon,
            terminal,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.reward[(s * self.n_actions + a) * self.n_states + s2]
    }

    /// R̄(s,a) = E_{s'~T}[R(s,a,s')].
    pub fn mean_reward(&self, s: usize, a: usize) -> f64 {
        let base = (s * self.n_actions + a) * self.n_states;
        (0..self.n_states)
            .map(|s2| self.transition[base + s2] * self.reward[base + s2])
            .sum()
    }

    pub fn uniform_policy(&self) -> TabularPolicy {
        TabularPolicy::uniform(self.n_states, self.n_actions)
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::Shape(format!(
                "policy shape {}x{} vs mdp {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    /// Value iteration to sup-norm Bellman residual ≤ tol. Greedy action ties
    /// break toward the lowest index so the oracle is deterministic.
    pub fn value_iteration(&self, tol: f64) -> Result<ValueSolution> {
        if tol <= 0.0 {
            return Err(Error::InvalidArgument(format!("tolerance {tol} must be > 0")));
        }
        let mut v = vec![0.0; self.n_states];
        let mut q = vec![0.0; self.n_states * self.n_actions];
        // Successive iterates within `tol / gamma * (1 - gamma)`... simpler:
        // stopping when the sweep moves V by ≤ tol leaves the residual of the
        // *new* iterate at ≤ gamma * tol ≤ tol.
        for _ in 0..50_000_000u64 {
            let mut diff = 0.0f64;
            for s in 0..self.n_states {
                let mut best = f64::NEG_INFINITY;
                for a in 0..self.n_actions {
                    let base = (s * self.n_actions + a) * self.n_states;
                    let mut qa = 0.0;
                    for s2 in 0..self.n_states {
                        let p = self.transition[base + s2];
                        if p > 0.0 {
                            qa += p * (self.reward[base + s2] + self.gamma * v[s2]);
                        }
                    }
                    q[s * self.n_actions + a] = qa;
                    best = best.max(qa);
                }
                diff = diff.max((best - v[s]).abs());
                v[s] = best;
            }
            if diff <= tol {
                let greedy = (0..self.n_states)
                    .map(|s| {
                        let row = &q[s * self.n_actions..(s + 1) * self.n_actions];
                        let mut arg = 0;
                        for (a, &qa) in row.iter().enumerate() {
                            if qa > row[arg] {
                                arg = a;
                            }
                        }
                        arg
                    })
                    .collect();
                return Ok(ValueSolution {
                    v,
                    q,
                    greedy: TabularPolicy::deterministic_unchecked(
                        self.n_states,
                        self.n_actions,
                        greedy,
                    ),
                });
            }
        }
        Err(Error::Numerical("value iteration failed to converge".into()))
    }

    /// Discounted state-action occupancy d^π(s,a) = (1−γ) Σ_t γ^t P(s_t=s,
    /// a_t=a), solved exactly from (I − γ P_π^T) m = (1−γ) ρ. Terminal
    /// self-loops absorb the tail mass, keeping the total at 1.
    pub fn exact_visitation(&self, policy: &TabularPolicy) -> Result<VisitDist> {
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut a_mat = vec![0.0; n * n];
        for i in 0..n {
            a_mat[i * n + i] = 1.0;
        }
        // P_pi(j -> i) enters with coefficient -gamma at row i, column j.
        for j in 0..n {
            for a in 0..self.n_actions {
                let pa = policy.prob(j, a);
                if pa == 0.0 {
                    continue;
                }
                let base = (j * self.n_actions + a) * n;
                for i in 0..n {
                    let t = self.transition[base + i];
                    if t > 0.0 {
                        a_mat[i * n + j] -= self.gamma * pa * t;
                    }
                }
            }
        }
        let b: Vec<f64> = self.rho.iter().map(|&p| (1.0 - self.gamma) * p).collect();
        let m = solve_dense(a_mat, n, b)?;
        let mut d = vec![0.0; n * self.n_actions];
        for s in 0..n {
            for a in 0..self.n_actions {
                let val = m[s] * policy.prob(s, a);
                if val < -1e-12 {
                    return Err(Error::Numerical(format!(
                        "occupancy went negative at ({s},{a}): {val}"
                    )));
                }
                d[s * self.n_actions + a] = val.max(0.0);
            }
        }
        VisitDist::new(n, self.n_actions, d)
    }

    /// J_π = E_ρ[V_π], solved from the policy-evaluation system
    /// (I − γ P_π) V = r̄_π. Deliberately a different route than
    /// `exact_visitation`, so the two can cross-check each other.
    pub fn exact_policy_return(&self, policy: &TabularPolicy) -> Result<f64> {
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut a_mat = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for s in 0..n {
            a_mat[s * n + s] = 1.0;
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                let base = (s * self.n_actions + a) * n;
                for s2 in 0..n {
                    let t = self.transition[base + s2];
                    if t > 0.0 {
                        a_mat[s * n + s2] -= self.gamma * pa * t;
                        b[s] += pa * t * self.reward[base + s2];
                    }
                }
            }
        }
        let v = solve_dense(a_mat, n, b)?;
        Ok(self.rho.iter().zip(&v).map(|(p, vi)| p * vi).sum())
    }
}

#[derive(Clone, Debug)]
pub struct ValueSolution {
    pub v: Vec<f64>,
    /// Q[s][a], flattened.
    pub q: Vec<f64>,
    pub greedy: TabularPolicy,
}

/// Row-stochastic policy table π[s][a].
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Shape("policy table length".into()));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "negative action probability in state {s}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "policy row {s} sums to {sum}"
                )));
            }
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_states: usize, n_actions: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::Shape("one action per state".into()));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::InvalidArgument(format!(
                "action index {bad} out of range"
            )));
        }
        Ok(Self::deterministic_unchecked(n_states, n_actions, actions))
    }

    fn deterministic_unchecked(n_states: usize, n_actions: usize, actions: Vec<usize>) -> Self {
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        TabularPolicy {
            n_states,
            n_actions,
            probs,
        }
    }

    /// (1−ε)·self + ε·uniform, the medium-quality behavior mix.
    pub fn epsilon_mix(&self, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon}")));
        }
        let u = 1.0 / self.n_actions as f64;
        let probs = self
            .probs
            .iter()
            .map(|&p| (1.0 - epsilon) * p + epsilon * u)
            .collect();
        TabularPolicy::new(self.n_states, self.n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample(&self, s: usize, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(self.row(s), rng)
    }
}

/// Draw an index from an (approximately) normalized weight row.
pub(crate) fn sample_categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if r < acc {
                return i;
            }
        }
    }
    last
}

/// Solve `A x = b` for dense row-major `A` (n x n) by Gaussian elimination
/// with partial pivoting. The systems here are small (states of a toy MDP);
/// a pivot below 1e-12 is reported as a numerical failure.
pub fn solve_dense(mut a: Vec<f64>, n: usize, mut b: Vec<f64>) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::Shape("linear system shape".into()));
    }
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col].abs() < 1e-12 {
            return Err(Error::Numerical("singular linear system".into()));
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let inv = 1.0 / a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            a[row * n + col] = 0.0;
            for k in col + 1..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// `Env` wrapper sampling from the stored tensors.
pub struct TabularEnv {
    id: String,
    mdp: TabularMdp,
    sparse: bool,
}

impl TabularEnv {
    pub fn new(id: impl Into<String>, mdp: TabularMdp) -> Self {
        // Reward sparsity is measured, not declared: a task is sparse when
        // fewer than a tenth of its reachable transitions pay anything.
        // Goal-reward grids land far under that; random dense models far over.
        let mut reachable = 0usize;
        let mut rewarded = 0usize;
        for (t, r) in mdp.transition.iter().zip(&mdp.reward) {
            if *t > 0.0 {
                reachable += 1;
                if *r != 0.0 {
                    rewarded += 1;
                }
            }
        }
        let sparse = rewarded * 10 < reachable;
        TabularEnv {
            id: id.into(),
            mdp,
            sparse,
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

impl Env for TabularEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn obs_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.mdp.n_actions)
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma
    }

    fn horizon(&self) -> usize {
        self.mdp.horizon
    }

    fn r_max(&self) -> f64 {
        self.mdp.r_max
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> State {
        State::Index(sample_categorical(&self.mdp.rho, rng))
    }

    fn step(
        &self,
        state: &State,
        action: &Action,
        rng: &mut ChaCha8Rng,
    ) -> Result<(State, f64, bool)> {
        let (s, a) = match (state, action) {
            (State::Index(s), Action::Index(a)) => (*s, *a),
            _ => {
                return Err(Error::InvalidArgument(
                    "tabular env expects index state and action".into(),
                ))
            }
        };
        if s >= self.mdp.n_states || a >= self.mdp.n_actions {
            return Err(Error::InvalidArgument(format!(
                "state {s} / action {a} out of range"
            )));
        }
        let row =
            &self.mdp.transition[(s * self.mdp.n_actions + a) * self.mdp.n_states..][..self.mdp.n_states];
        let s2 = sample_categorical(row, rng);
        let r = self.mdp.r(s, a, s2);
        Ok((State::Index(s2), r, self.mdp.terminal[s2]))
    }

    fn encode_obs<'a>(&self, state: &'a State, _buf: &'a mut Vec<f64>) -> Input<'a> {
        match state {
            State::Index(s) => Input::OneHot(*s),
            State::Vector(v) => Input::Dense(v),
        }
    }

    fn tabular_mdp(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }

    fn sparse_reward(&self) -> bool {
        self.sparse
    }
}
