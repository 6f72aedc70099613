mod common;

use common::*;
use proptest::prelude::*;
use vem::mdp::*;
use vem::memory::*;
use vem::operators::*;
use vem::policy::*;
use vem::seeding::rng_from_seed;

fn small_mdp() -> impl Strategy<Value = TabularMdp> {
    (any::<u64>(), 2usize..8, 2usize..4, prop_oneof![Just(0.5), Just(0.9), Just(0.99)])
        .prop_map(|(seed, ns, na, g)| generate_random_mdp(seed, &params(ns, na).with_gamma(g)).unwrap())
}

fn values_for(n: usize) -> impl Strategy<Value = ValueTable> {
    prop::collection::vec(-10.0f64..10.0, n).prop_map(ValueTable::new)
}

fn policy_for(ns: usize, na: usize) -> impl Strategy<Value = TabularPolicy> {
    prop::collection::vec(0.01f64..1.0, ns * na).prop_map(move |raw| policy_from_weights(ns, na, &raw))
}

/// An MDP with a behavior policy and two value tables.
fn setting() -> impl Strategy<Value = (TabularMdp, TabularPolicy, ValueTable, ValueTable)> {
    small_mdp().prop_flat_map(|m| {
        let (ns, na) = (m.n_states(), m.n_actions());
        (Just(m), policy_for(ns, na), values_for(ns), values_for(ns))
    })
}

fn tau_alpha() -> impl Strategy<Value = (f64, f64)> {
    (0.01f64..0.99, 0.05f64..=1.0).prop_map(|(tau, frac)| (tau, frac * step_size_bound(tau)))
}

fn dist(a: &ValueTable, b: &ValueTable) -> f64 {
    a.sup_distance(b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimality_is_a_gamma_contraction((m, _mu, v1, v2) in setting()) {
        let d = dist(&apply_optimality(&v1, &m).unwrap(), &apply_optimality(&v2, &m).unwrap());
        prop_assert!(d <= m.gamma() * dist(&v1, &v2) + 1e-12);
    }

    #[test]
    fn behavior_values_satisfy_bellman_equation((m, mu, _v1, _v2) in setting()) {
        let tol = 1e-9;
        let v = solve_behavior_values(&m, &mu, tol).unwrap();
        prop_assert!(sup_dist(&naive_expectation(&m, &mu, v.as_slice()), v.as_slice()) <= tol);
    }

    #[test]
    fn softmax_rows_sum_to_one(m in small_mdp(), log_t in -3.0f64..6.0) {
        let pi = softmax_behavior_policy(&m, 10f64.powf(log_t)).unwrap();
        for s in 0..m.n_states() {
            prop_assert!((pi.row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(pi.row(s).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn half_operators_are_non_expansions((m, mu, v1, v2) in setting()) {
        let d = dist(&v1, &v2);
        let p = dist(&apply_positive_part(&v1, &m, &mu).unwrap(), &apply_positive_part(&v2, &m, &mu).unwrap());
        let n = dist(&apply_negative_part(&v1, &m, &mu).unwrap(), &apply_negative_part(&v2, &m, &mu).unwrap());
        prop_assert!(p <= d + 1e-12);
        prop_assert!(n <= d + 1e-12);
    }

    #[test]
    fn gradient_operator_contracts_at_modulus((m, mu, v1, v2) in setting(), (tau, alpha) in tau_alpha()) {
        let cfg = OperatorConfig::expectile_gradient(tau).with_alpha(alpha);
        let d = dist(
            &apply_expectile_gradient(&v1, &m, &mu, &cfg).unwrap(),
            &apply_expectile_gradient(&v2, &m, &mu, &cfg).unwrap(),
        );
        prop_assert!(d <= contraction_modulus(tau, alpha, m.gamma()) * dist(&v1, &v2) + 1e-9);
    }

    #[test]
    fn gradient_operator_is_monotone_in_tau((m, mu, v, _v2) in setting(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let alpha = step_size_bound(lo).min(step_size_bound(hi));
        let a = apply_expectile_gradient(&v, &m, &mu, &OperatorConfig::expectile_gradient(lo).with_alpha(alpha)).unwrap();
        let b = apply_expectile_gradient(&v, &m, &mu, &OperatorConfig::expectile_gradient(hi).with_alpha(alpha)).unwrap();
        for s in 0..m.n_states() {
            prop_assert!(b[s] >= a[s] - 1e-12);
        }
    }

    #[test]
    fn decomposition_identity((m, mu, v, _v2) in setting(), (tau, alpha) in tau_alpha()) {
        let t = apply_expectile_gradient(&v, &m, &mu, &OperatorConfig::expectile_gradient(tau).with_alpha(alpha)).unwrap();
        let plus = apply_positive_part(&v, &m, &mu).unwrap();
        let minus = apply_negative_part(&v, &m, &mu).unwrap();
        for s in 0..m.n_states() {
            let rhs = (1.0 - 2.0 * alpha) * v[s] + 2.0 * alpha * tau * plus[s] + 2.0 * alpha * (1.0 - tau) * minus[s];
            prop_assert!((t[s] - rhs).abs() <= 1e-12 * (1.0 + v[s].abs()));
        }
    }

    #[test]
    fn vem_contracts_and_dominates_one_step((m, mu, v1, v2) in setting(), tau in 0.51f64..0.99, n_max in 1usize..=4) {
        let cfg = OperatorConfig::expectile_gradient(tau);
        let plan = PlanningConfig::new(n_max, m.gamma()).unwrap();
        let a = vem_operator(&v1, &m, &mu, &cfg, &plan).unwrap();
        let b = vem_operator(&v2, &m, &mu, &cfg, &plan).unwrap();
        prop_assert!(dist(&a.values, &b.values) <= contraction_modulus(tau, cfg.alpha, m.gamma()) * dist(&v1, &v2) + 1e-9);
        let one = apply_expectile_gradient(&v1, &m, &mu, &cfg).unwrap();
        for s in 0..m.n_states() {
            prop_assert!(a.values[s] >= one[s]);
            prop_assert!((1..=n_max).contains(&a.n_star[s]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fixed_points_are_ordered_in_tau(seed in any::<u64>(), t1 in 0.05f64..0.95, t2 in 0.05f64..0.95) {
        let m = generate_random_mdp(seed, &params(5, 3)).unwrap();
        let mu = TabularPolicy::uniform(5, 3);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = expectile_fixed_point(&m, &mu, lo, step_size_bound(lo), 1e-11).unwrap();
        let b = expectile_fixed_point(&m, &mu, hi, step_size_bound(hi), 1e-11).unwrap();
        for s in 0..5 {
            prop_assert!(b[s] >= a[s] - 1e-9);
        }
    }

    #[test]
    fn gradient_fixed_point_zeroes_the_increment(seed in any::<u64>(), tau in 0.05f64..0.95) {
        let m = generate_random_mdp(seed, &params(5, 3)).unwrap();
        let mu = softmax_behavior_policy(&m, 1.0).unwrap();
        let v = expectile_fixed_point(&m, &mu, tau, step_size_bound(tau), 1e-12).unwrap();
        for s in 0..5 {
            let (mut pos, mut neg) = (0.0, 0.0);
            for a in 0..3 {
                let d = naive_backup(&m, v.as_slice(), s, a) - v[s];
                if d > 0.0 { pos += mu.prob(s, a) * d } else { neg += mu.prob(s, a) * d }
            }
            prop_assert!((tau * pos + (1.0 - tau) * neg).abs() <= 1e-9);
        }
    }
}

fn trajectory_on(m: &TabularMdp, seed: u64, len: usize) -> Trajectory {
    let ds = generate_dataset(m, &TabularPolicy::uniform(m.n_states(), m.n_actions()), 1, len, seed).unwrap();
    ds.trajectories.into_iter().next().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn unrolled_matches_recursive_and_dominates_return_to_go(
        m in small_mdp(), seed in any::<u64>(), len in 1usize..25, scale in 0.0f64..20.0, vseed in any::<u64>()
    ) {
        let traj = trajectory_on(&m, seed, len);
        let v_hat = random_values(m.n_states(), scale.max(1e-9), &mut rng_from_seed(vseed));
        let rec = plan_returns_recursive(&traj, &v_hat, m.gamma()).unwrap();
        let unr = plan_returns_unrolled(&traj, &v_hat, &PlanningConfig::new(traj.len(), m.gamma()).unwrap()).unwrap();
        let rtg = traj.return_to_go(&v_hat, m.gamma());
        for t in 0..traj.len() {
            prop_assert!((rec[t] - unr[t]).abs() <= 1e-12 * (1.0 + rec[t].abs()));
            prop_assert!(rec[t] >= rtg[t] - 1e-12 * (1.0 + rtg[t].abs()));
        }
    }

    #[test]
    fn planned_returns_are_monotone_in_v_hat(
        m in small_mdp(), seed in any::<u64>(), len in 1usize..25, vseed in any::<u64>(), bump in 0.0f64..5.0, n_max in 1usize..8
    ) {
        let traj = trajectory_on(&m, seed, len);
        let lo = random_values(m.n_states(), 5.0, &mut rng_from_seed(vseed));
        let mut rng = rng_from_seed(vseed ^ 1);
        let hi: ValueTable = lo.iter().map(|x| x + bump * rand::Rng::gen::<f64>(&mut rng)).collect::<Vec<_>>().into();
        let cfg = PlanningConfig::new(n_max, m.gamma()).unwrap();
        let a = plan_returns_unrolled(&traj, &lo, &cfg).unwrap();
        let b = plan_returns_unrolled(&traj, &hi, &cfg).unwrap();
        for t in 0..traj.len() {
            prop_assert!(b[t] >= a[t]);
        }
    }

    #[test]
    fn one_step_planning_is_the_backup(m in small_mdp(), seed in any::<u64>(), len in 1usize..25, vseed in any::<u64>()) {
        let traj = trajectory_on(&m, seed, len);
        let v_hat = random_values(m.n_states(), 5.0, &mut rng_from_seed(vseed));
        let r = plan_returns_unrolled(&traj, &v_hat, &PlanningConfig::new(1, m.gamma()).unwrap()).unwrap();
        for (t, st) in traj.steps.iter().enumerate() {
            let tail = if traj.done && t + 1 == traj.len() { 0.0 } else { v_hat[st.s_next] };
            prop_assert_eq!(r[t], st.r + m.gamma() * tail);
        }
    }

    #[test]
    fn twin_memory_min_is_conservative(m in small_mdp(), seed in any::<u64>(), v1 in any::<u64>(), v2 in any::<u64>()) {
        let mut ds = generate_dataset(&m, &TabularPolicy::uniform(m.n_states(), m.n_actions()), 3, 10, seed).unwrap();
        let a = random_values(m.n_states(), 5.0, &mut rng_from_seed(v1));
        let b = random_values(m.n_states(), 5.0, &mut rng_from_seed(v2));
        update_memory(&mut ds, [&a, &b], &PlanningConfig::new(10, m.gamma()).unwrap()).unwrap();
        let recs = compute_advantages(&ds, [&a, &b]).unwrap();
        let mut k = 0;
        for traj in &ds.trajectories {
            let [p, q] = traj.planned_returns.as_ref().unwrap();
            for (t, st) in traj.steps.iter().enumerate() {
                let lo = p[t].min(q[t]);
                prop_assert!(lo <= p[t] && lo <= q[t]);
                prop_assert_eq!(recs[k].advantage, lo - 0.5 * (a[st.s] + b[st.s]));
                k += 1;
            }
        }
    }
}

fn records() -> impl Strategy<Value = Vec<AdvantageRecord>> {
    prop::collection::vec((0usize..4, 0usize..3, -3.0f64..3.0), 1..40).prop_map(|v| {
        v.into_iter()
            .map(|(s, a, advantage)| AdvantageRecord { s, a, advantage, weight: 0.0 })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_fit_ignores_whole_batch_shifts(recs in records(), shift in -50.0f64..50.0, scale in 0.1f64..5.0) {
        let f = WeightingFn::softmax(scale);
        let shifted: Vec<AdvantageRecord> =
            recs.iter().map(|r| AdvantageRecord { advantage: r.advantage + shift, ..*r }).collect();
        let a = fit_policy(&apply_weighting(&recs, &f).unwrap(), 4, 3).unwrap();
        let b = fit_policy(&apply_weighting(&shifted, &f).unwrap(), 4, 3).unwrap();
        prop_assert_eq!(a.argmax_actions(), b.argmax_actions());
        let w: f64 = apply_weighting(&recs, &f).unwrap().iter().map(|r| r.weight).sum();
        prop_assert!((w - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn more_weight_never_lowers_probability(recs in records(), idx in any::<prop::sample::Index>(), extra in 0.0f64..5.0) {
        let weighted: Vec<AdvantageRecord> = recs.iter().map(|r| AdvantageRecord { weight: r.advantage, ..*r }).collect();
        let i = idx.index(weighted.len());
        let mut bumped = weighted.clone();
        bumped[i].weight += extra;
        let (s, a) = (weighted[i].s, weighted[i].a);
        let p0 = fit_policy(&weighted, 4, 3).unwrap().prob(s, a);
        let p1 = fit_policy(&bumped, 4, 3).unwrap().prob(s, a);
        prop_assert!(p1 >= p0 - 1e-15);
    }

    #[test]
    fn weighting_functions_are_non_decreasing(x in -10.0f64..10.0, dx in 0.0f64..5.0, scale in 0.1f64..10.0) {
        for f in [WeightingFn::leaky_relu(scale), WeightingFn::softmax(scale)] {
            prop_assert!(f.raw(x + dx) >= f.raw(x));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mdp_and_policy_json_round_trip(m in small_mdp()) {
        let back = TabularMdp::from_json(&m.to_json()).unwrap();
        prop_assert_eq!(&back, &m);
        let pi = softmax_behavior_policy(&m, 0.7).unwrap();
        prop_assert_eq!(TabularPolicy::from_json(&pi.to_json()).unwrap(), pi);
    }

    #[test]
    fn dataset_jsonl_round_trips_bit_exactly(m in small_mdp(), seed in any::<u64>(), planned in any::<bool>()) {
        let mut ds = generate_dataset(&m, &TabularPolicy::uniform(m.n_states(), m.n_actions()), 4, 12, seed).unwrap();
        if planned {
            let v = random_values(m.n_states(), 3.0, &mut rng_from_seed(seed));
            update_memory(&mut ds, [&v, &v], &PlanningConfig::new(5, m.gamma()).unwrap()).unwrap();
        }
        let text = ds.to_jsonl();
        let back = OfflineDataset::read_jsonl(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn config_round_trips(
        seed in 0u64..1_000_000, tau in 0.01f64..0.99, frac in 0.1f64..1.0, steps in 0usize..5000,
        kappa in 0.001f64..1.0, temp in prop::option::of(0.01f64..10.0), n_max in prop::option::of(1usize..50)
    ) {
        use vem::config::ExperimentConfig;
        let mut cfg = ExperimentConfig::from_overrides(&[format!("seed={seed}")]).unwrap();
        cfg.train.tau = tau;
        cfg.train.critic_step_size = frac * step_size_bound(tau);
        cfg.train.total_steps = steps;
        cfg.train.target_update_rate = kappa;
        cfg.train.n_max = n_max;
        cfg.dataset.behavior_temperature = temp;
        cfg.operator = OperatorConfig::expectile_gradient(tau).with_alpha(frac * step_size_bound(tau));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
