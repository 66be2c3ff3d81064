//! Dynamic-programming oracles checked against independent references:
//! closed-form geometric sums, hand Bellman solves, BFS path lengths,
//! brute-force policy enumeration, and Monte-Carlo transition frequencies.

use std::collections::BTreeSet;

use moorl::analysis::{random_mdp, random_policy};
use moorl::envs::{
    grid_to_mdp, Action, Env, GridworldSpec, State, TabularEnv, TabularMdp, TabularPolicy,
    DEFAULT_VI_TOL,
};
use moorl::rng::stream;
use rand::Rng;

fn single_pair_mdp(reward: f64, gamma: f64) -> TabularMdp {
    TabularMdp::new(
        1,
        1,
        vec![1.0],
        vec![reward],
        gamma,
        vec![1.0],
        100,
        vec![false],
    )
    .unwrap()
}

// s0 advances to an absorbing terminal s1 under the single action; reward 1
// on the entering transition.
fn two_state_chain(gamma: f64) -> TabularMdp {
    TabularMdp::new(
        2,
        1,
        vec![0.0, 1.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0, 0.0],
        gamma,
        vec![1.0, 0.0],
        100,
        vec![false, true],
    )
    .unwrap()
}

#[test]
fn vi_single_state_self_loop_matches_closed_form() {
    let mdp = single_pair_mdp(1.0, 0.99);
    let sol = mdp.value_iteration(DEFAULT_VI_TOL).unwrap();
    assert!((sol.v[0] - 100.0).abs() < 1e-6, "V = {}", sol.v[0]);
    assert!((sol.q[0] - 100.0).abs() < 1e-6);
}

#[test]
fn vi_two_cell_grid_hand_bellman() {
    // One step to the goal: entering reward 1, nothing afterwards, so the
    // optimal start value is exactly 1 regardless of discount.
    let spec = GridworldSpec::from_map_text("chain2", "SG\n", 0.0, 0.9, 100).unwrap();
    let mdp = grid_to_mdp(&spec).unwrap();
    let sol = mdp.value_iteration(DEFAULT_VI_TOL).unwrap();
    let start = spec.index(spec.start);
    let goal = spec.index(spec.goal);
    assert!((sol.v[start] - 1.0).abs() < 1e-8);
    assert_eq!(sol.v[goal], 0.0);
    // Moves order is up, down, left, right; only "right" reaches the goal.
    assert_eq!(sol.greedy.row(start), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn vi_chain_of_four_steps_is_geometric() {
    // Four transitions to the goal, reward on the last one: gamma^3.
    let spec = GridworldSpec::from_map_text("chain5", "S...G\n", 0.0, 0.9, 100).unwrap();
    let mdp = grid_to_mdp(&spec).unwrap();
    let sol = mdp.value_iteration(DEFAULT_VI_TOL).unwrap();
    let expect = 0.9f64.powi(3);
    assert!((sol.v[spec.index(spec.start)] - expect).abs() < 1e-8);
    assert!((expect - 0.729).abs() < 1e-12);
}

#[test]
fn vi_wall_gap_grid_matches_bfs_geometric() {
    let map = "S....\n\
               .....\n\
               ####.\n\
               .....\n\
               ....G\n";
    let spec = GridworldSpec::from_map_text("gap5", map, 0.0, 0.9, 100).unwrap();
    let steps = spec.bfs_distance().unwrap();
    assert_eq!(steps, 8);
    let mdp = grid_to_mdp(&spec).unwrap();
    let sol = mdp.value_iteration(DEFAULT_VI_TOL).unwrap();
    let expect = 0.9f64.powi(steps as i32 - 1);
    assert!(
        (sol.v[spec.index(spec.start)] - expect).abs() < 1e-7,
        "V(start) {} vs gamma^(L-1) {expect}",
        sol.v[spec.index(spec.start)]
    );
}

#[test]
fn vi_start_value_matches_bfs_on_random_wall_layouts() {
    // With slip 0 the optimal start value of any sparse grid is exactly the
    // discounted shortest path; BFS is the independent oracle.
    let mut rng = stream(40, 0);
    let mut checked = 0;
    for _ in 0..60 {
        let mut walls = BTreeSet::new();
        for y in 0..4 {
            for x in 0..4 {
                if (x, y) != (0, 0) && (x, y) != (3, 3) && rng.random::<f64>() < 0.25 {
                    walls.insert((x, y));
                }
            }
        }
        let spec = match GridworldSpec::new("rand4", 4, 4, walls, (0, 0), (3, 3), 0.0, 0.9, 100) {
            Ok(s) => s,
            // Layouts that cut off the goal are rejected at construction.
            Err(_) => continue,
        };
        let steps = spec.bfs_distance().unwrap();
        let sol = grid_to_mdp(&spec)
            .unwrap()
            .value_iteration(DEFAULT_VI_TOL)
            .unwrap();
        let expect = 0.9f64.powi(steps as i32 - 1);
        assert!((sol.v[spec.index(spec.start)] - expect).abs() < 1e-7);
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} solvable layouts");
}

#[test]
fn vi_dominates_enumeration_and_random_policies() {
    let mut rng = stream(41, 0);
    let mdp = random_mdp(3, 2, &mut rng);
    let sol = mdp.value_iteration(DEFAULT_VI_TOL).unwrap();
    let j_star = mdp.exact_policy_return(&sol.greedy).unwrap();

    // Every deterministic policy, by brute force.
    for bits in 0..(1u32 << 3) {
        let actions: Vec<usize> = (0..3).map(|s| ((bits >> s) & 1) as usize).collect();
        let pi = TabularPolicy::deterministic(3, 2, actions).unwrap();
        let j = mdp.exact_policy_return(&pi).unwrap();
        assert!(j <= j_star + 1e-6, "deterministic policy beats VI: {j} > {j_star}");
    }
    // And a cloud of stochastic ones.
    for _ in 0..100 {
        let pi = random_policy(3, 2, false, &mut rng);
        let j = mdp.exact_policy_return(&pi).unwrap();
        assert!(j <= j_star + 1e-6);
    }
    // J of the greedy policy equals the rho-average of V*.
    let expect: f64 = mdp
        .rho()
        .iter()
        .enumerate()
        .map(|(s, p)| p * sol.v[s])
        .sum();
    assert!((j_star - expect).abs() < 1e-6);
}

#[test]
fn visitation_point_mass_chain_split_and_normalization() {
    // Only one pair to visit.
    let mdp = single_pair_mdp(0.3, 0.9);
    let d = mdp.exact_visitation(&mdp.uniform_policy()).unwrap();
    assert!((d.get(0, 0) - 1.0).abs() < 1e-12);

    // Advancing chain at gamma 0.5: weight (1-gamma) at t=0 on the start
    // pair, the whole geometric tail on the absorbing pair.
    let chain = two_state_chain(0.5);
    let d = chain.exact_visitation(&chain.uniform_policy()).unwrap();
    assert!((d.get(0, 0) - 0.5).abs() < 1e-12);
    assert!((d.get(1, 0) - 0.5).abs() < 1e-12);

    // Mass invariant over random instances.
    let mut rng = stream(42, 0);
    for _ in 0..20 {
        let n_s = rng.random_range(2..7usize);
        let n_a = rng.random_range(1..4usize);
        let mdp = random_mdp(n_s, n_a, &mut rng);
        let pi = random_policy(n_s, n_a, true, &mut rng);
        let d = mdp.exact_visitation(&pi).unwrap();
        let total: f64 = d.as_slice().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(d.as_slice().iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn return_constant_reward_and_uniform_hand_solve() {
    // Reward identically 1 everywhere: J = 1/(1-gamma) for any policy.
    let mdp = TabularMdp::new(
        2,
        2,
        vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        vec![1.0; 8],
        0.99,
        vec![0.5, 0.5],
        100,
        vec![false, false],
    )
    .unwrap();
    let j = mdp.exact_policy_return(&mdp.uniform_policy()).unwrap();
    assert!((j - 100.0).abs() < 1e-6);

    // Uniform policy on the two-cell grid, discount 0.9. One unknown after
    // V(goal)=0: V = 3/4 * 0.9 V + 1/4, so V = 0.25 / (1 - 0.675).
    let spec = GridworldSpec::from_map_text("chain2", "SG\n", 0.0, 0.9, 100).unwrap();
    let mdp = grid_to_mdp(&spec).unwrap();
    let j = mdp.exact_policy_return(&mdp.uniform_policy()).unwrap();
    let hand = 0.25 / (1.0 - 0.675);
    assert!((j - hand).abs() < 1e-9, "J {j} vs hand {hand}");
}

#[test]
fn return_agrees_with_visitation_route() {
    // The return is computed through the value function; the visitation
    // route (1/(1-gamma)) sum d * mean_reward must agree. Two independent
    // linear solves meeting at the same number.
    let mut rng = stream(43, 0);
    for _ in 0..10 {
        let mdp = random_mdp(5, 3, &mut rng);
        let pi = random_policy(5, 3, false, &mut rng);
        let j = mdp.exact_policy_return(&pi).unwrap();
        let d = mdp.exact_visitation(&pi).unwrap();
        let mut acc = 0.0;
        for s in 0..5 {
            for a in 0..3 {
                acc += d.get(s, a) * mdp.mean_reward(s, a);
            }
        }
        let via_d = acc / (1.0 - mdp.gamma());
        assert!((j - via_d).abs() < 1e-9, "{j} vs {via_d}");
    }
}

#[test]
fn step_follows_the_tensors_exactly_when_deterministic() {
    let spec = GridworldSpec::from_map_text("chain2", "SG\n", 0.0, 0.9, 100).unwrap();
    let env = TabularEnv::new("chain2", grid_to_mdp(&spec).unwrap());
    let mut rng = stream(44, 0);
    let s0 = env.reset(&mut rng);
    assert_eq!(s0, State::Index(spec.index(spec.start)));
    // Action 3 is "right".
    let (s1, r, done) = env.step(&s0, &Action::Index(3), &mut rng).unwrap();
    assert_eq!(s1, State::Index(spec.index(spec.goal)));
    assert_eq!(r, 1.0);
    assert!(done);
    // Stepping an out-of-range or wrongly typed action is an error.
    assert!(env.step(&s0, &Action::Index(4), &mut rng).is_err());
    assert!(env
        .step(&s0, &Action::Vector(vec![0.0, 0.0]), &mut rng)
        .is_err());
}

#[test]
fn step_frequencies_match_transition_rows() {
    let map = "S..\n...\n..G\n";
    let spec = GridworldSpec::from_map_text("g3", map, 0.25, 0.99, 100).unwrap();
    let mdp = grid_to_mdp(&spec).unwrap();
    let env = TabularEnv::new("g3", mdp.clone());
    let mut rng = stream(45, 0);
    let n = 100_000usize;
    let mut counts = vec![0u32; mdp.n_states()];
    for s in 0..mdp.n_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.n_actions() {
            counts.iter_mut().for_each(|c| *c = 0);
            let state = State::Index(s);
            for _ in 0..n {
                let (s2, _, _) = env.step(&state, &Action::Index(a), &mut rng).unwrap();
                let State::Index(i) = s2 else { unreachable!() };
                counts[i] += 1;
            }
            let tv: f64 = (0..mdp.n_states())
                .map(|s2| (counts[s2] as f64 / n as f64 - mdp.p(s, a, s2)).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 0.01, "({s},{a}) empirical TV {tv}");
        }
    }
}
