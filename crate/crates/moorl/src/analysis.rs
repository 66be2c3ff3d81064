//! Mixed-distribution analysis: visitation distributions, expected rewards,
//! the performance gain between a mixture and the on-policy distribution,
//! and the two closed-form bounds on it (total-variation and Pinsker/KL
//! form). Everything here is exact arithmetic on tabular quantities; the
//! bounds are only ever checked by exact computation, never sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{TabularMdp, TabularPolicy};
use crate::rng::substream;
use crate::{Error, Result};

/// Dense distribution over state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitDist {
    n_states: usize,
    n_actions: usize,
    d: Vec<f64>,
}

impl VisitDist {
    pub fn new(n_states: usize, n_actions: usize, mut d: Vec<f64>) -> Result<Self> {
        if d.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "distribution length {} vs {n_states}x{n_actions}",
                d.len()
            )));
        }
        for v in &mut d {
            if *v < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "negative visitation mass {v}"
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "visitation mass sums to {sum}"
            )));
        }
        Ok(VisitDist {
            n_states,
            n_actions,
            d,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    fn check_same_shape(&self, other: &VisitDist) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::InvalidArgument(format!(
                "distribution shapes differ: {}x{} vs {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )));
        }
        Ok(())
    }
}

/// d^D = λ d^μ + (1−λ) d^π.
pub fn mix_distributions(d_mu: &VisitDist, d_pi: &VisitDist, lambda: f64) -> Result<VisitDist> {
    d_mu.check_same_shape(d_pi)?;
    check_lambda(lambda)?;
    let d = d_mu
        .d
        .iter()
        .zip(&d_pi.d)
        .map(|(m, p)| lambda * m + (1.0 - lambda) * p)
        .collect();
    VisitDist::new(d_mu.n_states, d_mu.n_actions, d)
}

/// E_D[R] = (1/(1−γ)) Σ d(s,a) R̄(s,a).
pub fn expected_reward(d: &VisitDist, mdp: &TabularMdp) -> Result<f64> {
    if d.n_states != mdp.n_states() || d.n_actions != mdp.n_actions() {
        return Err(Error::Shape("distribution vs mdp shape".into()));
    }
    let mut acc = 0.0;
    for s in 0..d.n_states {
        for a in 0..d.n_actions {
            let mass = d.get(s, a);
            if mass > 0.0 {
                acc += mass * mdp.mean_reward(s, a);
            }
        }
    }
    Ok(acc / (1.0 - mdp.gamma()))
}

/// ΔR = (λ/(1−γ)) Σ (d^μ − d^π)(s,a) R̄(s,a): the gain of the λ-mixture
/// over the on-policy distribution. Agrees with
/// `expected_reward(mix) − expected_reward(d_pi)` by algebra; the tests pin
/// that identity.
pub fn performance_gain(
    mdp: &TabularMdp,
    d_mu: &VisitDist,
    d_pi: &VisitDist,
    lambda: f64,
) -> Result<f64> {
    d_mu.check_same_shape(d_pi)?;
    check_lambda(lambda)?;
    if d_mu.n_states != mdp.n_states() || d_mu.n_actions != mdp.n_actions() {
        return Err(Error::Shape("distribution vs mdp shape".into()));
    }
    let mut acc = 0.0;
    for s in 0..d_mu.n_states {
        for a in 0..d_mu.n_actions {
            let diff = d_mu.get(s, a) - d_pi.get(s, a);
            if diff != 0.0 {
                acc += diff * mdp.mean_reward(s, a);
            }
        }
    }
    Ok(lambda * acc / (1.0 - mdp.gamma()))
}

/// TV(p, q) = ½ Σ |p − q|.
pub fn tv_distance(p: &VisitDist, q: &VisitDist) -> Result<f64> {
    p.check_same_shape(q)?;
    Ok(0.5 * p.d.iter().zip(&q.d).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// D_KL(p ∥ q) = Σ p ln(p/q), with 0·ln(0/q) = 0 and +∞ as soon as p puts
/// mass where q has none. Infinity is the honest value, never a sentinel.
pub fn kl_divergence(p: &VisitDist, q: &VisitDist) -> Result<f64> {
    p.check_same_shape(q)?;
    let mut acc = 0.0;
    for (pi, qi) in p.d.iter().zip(&q.d) {
        if *pi > 0.0 {
            if *qi == 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixture fraction {lambda} outside [0,1]"
        )));
    }
    Ok(())
}

fn check_bound_args(lambda: f64, r_max: f64, gamma: f64) -> Result<()> {
    check_lambda(lambda)?;
    if r_max < 0.0 {
        return Err(Error::InvalidArgument(format!("negative r_max {r_max}")));
    }
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma}")));
    }
    Ok(())
}

/// |ΔR| ≤ TV(d^π, d^μ) · 2 λ R_max / (1−γ).
pub fn tv_bound(lambda: f64, tv: f64, r_max: f64, gamma: f64) -> Result<f64> {
    check_bound_args(lambda, r_max, gamma)?;
    if !(-1e-9..=1.0 + 1e-9).contains(&tv) {
        return Err(Error::InvalidArgument(format!("tv {tv} outside [0,1]")));
    }
    Ok(tv.clamp(0.0, 1.0) * 2.0 * lambda * r_max / (1.0 - gamma))
}

/// |ΔR| ≤ √(2 D_KL(d^π ∥ d^μ)) · λ R_max / (1−γ); +∞ KL gives +∞ unless the
/// λ R_max factor is already zero.
pub fn pinsker_bound(lambda: f64, kl: f64, r_max: f64, gamma: f64) -> Result<f64> {
    check_bound_args(lambda, r_max, gamma)?;
    if kl < -1e-12 {
        return Err(Error::InvalidArgument(format!("negative KL {kl}")));
    }
    let scale = lambda * r_max / (1.0 - gamma);
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * kl.max(0.0)).sqrt() * scale)
}

/// One fully evaluated instance of the §-style performance-bound statement.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub lambda: f64,
    pub delta_r: f64,
    pub tv: f64,
    pub kl: f64,
    pub tv_bound: f64,
    pub pinsker_bound: f64,
    pub r_max: f64,
    pub gamma: f64,
    pub holds_tv: bool,
    pub holds_pinsker: bool,
}

impl BoundReport {
    /// One JSON-like record per line; infinities print as the string "inf".
    pub fn to_json_line(&self) -> String {
        fn num(x: f64) -> String {
            if x.is_infinite() {
                "\"inf\"".into()
            } else {
                format!("{x}")
            }
        }
        format!(
            "{{\"lambda\":{},\"delta_r\":{},\"tv\":{},\"kl\":{},\"tv_bound\":{},\"pinsker_bound\":{},\"r_max\":{},\"gamma\":{},\"holds_tv\":{},\"holds_pinsker\":{}}}",
            num(self.lambda),
            num(self.delta_r),
            num(self.tv),
            num(self.kl),
            num(self.tv_bound),
            num(self.pinsker_bound),
            num(self.r_max),
            num(self.gamma),
            self.holds_tv,
            self.holds_pinsker
        )
    }
}

/// Evaluate the whole chain on one exact instance: occupancy measures of the
/// two policies, the gain of the λ-mixture, both bounds, and whether each
/// bound dominates |ΔR| (with 1e−9 slack for the linear algebra).
///
/// The bound's R_max is max |R̄(s,a)|: the derivation applies the sup norm
/// to the expected per-pair reward.
pub fn verify_bounds(
    mdp: &TabularMdp,
    policy_mu: &TabularPolicy,
    policy_pi: &TabularPolicy,
    lambda: f64,
) -> Result<BoundReport> {
    check_lambda(lambda)?;
    let d_mu = mdp.exact_visitation(policy_mu)?;
    let d_pi = mdp.exact_visitation(policy_pi)?;
    let delta_r = performance_gain(mdp, &d_mu, &d_pi, lambda)?;
    let tv = tv_distance(&d_pi, &d_mu)?;
    let kl = kl_divergence(&d_pi, &d_mu)?;
    let mut r_max = 0.0f64;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            r_max = r_max.max(mdp.mean_reward(s, a).abs());
        }
    }
    let tvb = tv_bound(lambda, tv, r_max, mdp.gamma())?;
    let pb = pinsker_bound(lambda, kl, r_max, mdp.gamma())?;
    Ok(BoundReport {
        lambda,
        delta_r,
        tv,
        kl,
        tv_bound: tvb,
        pinsker_bound: pb,
        r_max,
        gamma: mdp.gamma(),
        holds_tv: delta_r.abs() <= tvb + 1e-9,
        holds_pinsker: delta_r.abs() <= pb + 1e-9,
    })
}

/// Monte-Carlo estimate of d^π from episode-tagged steps `(t, s, a)`:
/// each visit weighs (1−γ)γ^t, then the table is normalized.
pub fn empirical_visitation(
    steps: &[(usize, usize, usize)],
    n_states: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<VisitDist> {
    if steps.is_empty() {
        return Err(Error::EmptySource("no steps to estimate from".into()));
    }
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma}")));
    }
    let mut d = vec![0.0; n_states * n_actions];
    let mut total = 0.0;
    for &(t, s, a) in steps {
        if s >= n_states || a >= n_actions {
            return Err(Error::InvalidArgument(format!(
                "step ({s},{a}) out of range"
            )));
        }
        let w = (1.0 - gamma) * gamma.powi(t as i32);
        d[s * n_actions + a] += w;
        total += w;
    }
    for v in &mut d {
        *v /= total;
    }
    VisitDist::new(n_states, n_actions, d)
}

pub const STREAM_BOUND_TRIAL: u32 = 0x42;

/// Random dense MDP: Dirichlet(1) transition rows and initial distribution,
/// rewards U[−1,1] on every (s,a,s'), discount U[0.5, 0.99], no terminals.
pub fn random_mdp(n_states: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> TabularMdp {
    let len = n_states * n_actions * n_states;
    let mut transition = vec![0.0; len];
    for row in 0..n_states * n_actions {
        dirichlet_row(&mut transition[row * n_states..(row + 1) * n_states], rng);
    }
    let reward: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rho = vec![0.0; n_states];
    dirichlet_row(&mut rho, rng);
    let gamma = rng.random_range(0.5..0.99);
    TabularMdp::new(
        n_states,
        n_actions,
        transition,
        reward,
        gamma,
        rho,
        100,
        vec![false; n_states],
    )
    .expect("randomly generated tensors satisfy the invariants")
}

/// Random stochastic policy; with `sparsify` some actions are zeroed so that
/// off-support (infinite-KL) instances occur in sweeps.
pub fn random_policy(
    n_states: usize,
    n_actions: usize,
    sparsify: bool,
    rng: &mut ChaCha8Rng,
) -> TabularPolicy {
    let mut probs = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        let row = &mut probs[s * n_actions..(s + 1) * n_actions];
        dirichlet_row(row, rng);
        if sparsify && n_actions > 1 {
            let keep = rng.random_range(1..=n_actions);
            let mut sum = 0.0;
            for (a, v) in row.iter_mut().enumerate() {
                if a >= keep {
                    *v = 0.0;
                } else {
                    sum += *v;
                }
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("rows normalized")
}

fn dirichlet_row(row: &mut [f64], rng: &mut ChaCha8Rng) {
    let mut sum = 0.0;
    for v in row.iter_mut() {
        // -ln(1-U) with U in [0,1): exponential, strictly positive.
        *v = -(1.0 - rng.random::<f64>()).ln();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One seeded random bound trial: fresh MDP, behavior and target policies
/// (behavior occasionally sparsified), λ ~ U[0,1].
pub fn random_bound_trial(
    seed: u64,
    trial: u32,
    n_states: usize,
    n_actions: usize,
) -> Result<BoundReport> {
    let mut rng = substream(seed, STREAM_BOUND_TRIAL, trial);
    let mdp = random_mdp(n_states, n_actions, &mut rng);
    let sparsify = rng.random::<f64>() < 0.25;
    let policy_mu = random_policy(n_states, n_actions, sparsify, &mut rng);
    let policy_pi = random_policy(n_states, n_actions, false, &mut rng);
    let lambda = rng.random_range(0.0..=1.0);
    verify_bounds(&mdp, &policy_mu, &policy_pi, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn dist(d: &[f64]) -> VisitDist {
        let n = d.len();
        VisitDist::new(n, 1, d.to_vec()).unwrap()
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let mu = dist(&[1.0, 0.0]);
        let pi = dist(&[0.0, 1.0]);
        assert_eq!(mix_distributions(&mu, &pi, 0.0).unwrap(), pi);
        assert_eq!(mix_distributions(&mu, &pi, 1.0).unwrap(), mu);
        let half = mix_distributions(&mu, &pi, 0.5).unwrap();
        assert_eq!(half.as_slice(), &[0.5, 0.5]);
        assert!(mix_distributions(&mu, &pi, 1.5).is_err());
        assert!(mix_distributions(&mu, &pi, -0.1).is_err());
    }

    #[test]
    fn tv_hand_values_and_symmetry() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.75, 0.25]);
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert!((tv_distance(&p, &q).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(
            tv_distance(&p, &q).unwrap(),
            tv_distance(&q, &p).unwrap()
        );
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
        let wrong = VisitDist::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(tv_distance(&p, &wrong).is_err());
    }

    #[test]
    fn kl_hand_value_infinity_and_asymmetry() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = dist(&[0.25, 0.75]);
        let hand = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&p, &q).unwrap() - hand).abs() < 1e-12);
        assert!((hand - 0.14384).abs() < 1e-5);
        assert!(kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]))
            .unwrap()
            .is_infinite());
        // Asymmetry witness.
        let a = dist(&[0.9, 0.1]);
        let b = dist(&[0.5, 0.5]);
        assert!((kl_divergence(&a, &b).unwrap() - kl_divergence(&b, &a).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn pinsker_inequality_on_random_pairs() {
        let mut rng = stream(11, 0);
        for _ in 0..500 {
            let n = rng.random_range(2..8usize);
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            dirichlet_row(&mut p, &mut rng);
            dirichlet_row(&mut q, &mut rng);
            let p = dist(&p);
            let q = dist(&q);
            let tv = tv_distance(&p, &q).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl.is_finite());
            assert!(tv <= (kl / 2.0).sqrt() + 1e-9, "tv {tv} kl {kl}");
        }
    }

    #[test]
    fn gain_hand_value_and_mixture_identity() {
        // Two absorbing states, one action, gamma 0.5; reward 1 only on the
        // first pair. All behavior mass there, all target mass on the other
        // pair, lambda 1: gain is (1/(1-0.5)) * 1 = 2.
        let mdp = TabularMdp::new(
            2,
            1,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
            0.5,
            vec![0.5, 0.5],
            100,
            vec![false, false],
        )
        .unwrap();
        let d_mu = VisitDist::new(2, 1, vec![1.0, 0.0]).unwrap();
        let d_pi = VisitDist::new(2, 1, vec![0.0, 1.0]).unwrap();
        let gain = performance_gain(&mdp, &d_mu, &d_pi, 1.0).unwrap();
        assert!((gain - 2.0).abs() < 1e-15);
        assert_eq!(performance_gain(&mdp, &d_mu, &d_pi, 0.0).unwrap(), 0.0);

        // gain(lambda) == E_mix[R] - E_pi[R], and the mixture expectation is
        // linear in lambda; checked on random instances.
        let mut rng = stream(21, 4);
        for _ in 0..20 {
            let n_s = rng.random_range(2..6usize);
            let n_a = rng.random_range(1..4usize);
            let mdp = random_mdp(n_s, n_a, &mut rng);
            let mut raw_mu = vec![0.0; n_s * n_a];
            let mut raw_pi = vec![0.0; n_s * n_a];
            dirichlet_row(&mut raw_mu, &mut rng);
            dirichlet_row(&mut raw_pi, &mut rng);
            let d_mu = VisitDist::new(n_s, n_a, raw_mu).unwrap();
            let d_pi = VisitDist::new(n_s, n_a, raw_pi).unwrap();
            let lambda = rng.random::<f64>();
            let mix = mix_distributions(&d_mu, &d_pi, lambda).unwrap();
            let gain = performance_gain(&mdp, &d_mu, &d_pi, lambda).unwrap();
            let via_expectations =
                expected_reward(&mix, &mdp).unwrap() - expected_reward(&d_pi, &mdp).unwrap();
            assert!((gain - via_expectations).abs() < 1e-9);
            let lin = lambda * expected_reward(&d_mu, &mdp).unwrap()
                + (1.0 - lambda) * expected_reward(&d_pi, &mdp).unwrap();
            assert!((expected_reward(&mix, &mdp).unwrap() - lin).abs() < 1e-9);
        }
    }

    #[test]
    fn bound_formulas_hand_values() {
        assert_eq!(tv_bound(0.5, 0.0, 1.0, 0.5).unwrap(), 0.0);
        assert_eq!(tv_bound(0.0, 0.7, 1.0, 0.5).unwrap(), 0.0);
        let v = tv_bound(0.5, 0.25, 1.0, 0.5).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(pinsker_bound(0.5, 0.0, 1.0, 0.5).unwrap(), 0.0);
        assert!(pinsker_bound(0.5, f64::INFINITY, 1.0, 0.5)
            .unwrap()
            .is_infinite());
        assert_eq!(pinsker_bound(0.0, f64::INFINITY, 1.0, 0.5).unwrap(), 0.0);
        assert!(tv_bound(0.5, 1.5, 1.0, 0.5).is_err());
        assert!(pinsker_bound(0.5, -1.0, 1.0, 0.5).is_err());
        assert!(tv_bound(2.0, 0.5, 1.0, 0.5).is_err());
    }

    #[test]
    fn report_serializes_infinities_explicitly() {
        let mut rng = stream(3, 9);
        let mdp = random_mdp(3, 2, &mut rng);
        let mu = TabularPolicy::deterministic(3, 2, vec![0, 0, 0]).unwrap();
        let pi = TabularPolicy::uniform(3, 2);
        let report = verify_bounds(&mdp, &mu, &pi, 0.7).unwrap();
        assert!(report.kl.is_infinite());
        let line = report.to_json_line();
        assert!(line.contains("\"kl\":\"inf\""));
        assert!(line.starts_with('{') && line.ends_with('}'));
        assert!(report.holds_tv && report.holds_pinsker);
    }

    #[test]
    fn empirical_point_mass_and_errors() {
        let d = empirical_visitation(&[(0, 1, 0)], 3, 2, 0.9).unwrap();
        assert_eq!(d.get(1, 0), 1.0);
        assert!(empirical_visitation(&[], 3, 2, 0.9).is_err());
        assert!(empirical_visitation(&[(0, 5, 0)], 3, 2, 0.9).is_err());
    }
}
