use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use leap::env::{distance, Action, EnvConfig, NavState};
use leap::nn::{gradient_check, NetworkParams, NetworkSpec, OutputActivation};
use leap::planner::{time_schedule, Norm};
use leap::tdm::{scaling_for, tdm_reward, RelabelStrategy, ReplayBuffer, TdmConfig, TdmNets, Trajectory, Transition};
use leap::vae::Normalization;

fn position() -> impl Strategy<Value = NavState> {
    (-3.5f64..3.5, -3.5f64..3.5).prop_map(|(x, y)| NavState([x, y]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn network_gradients_match_finite_differences(
        hidden in prop::collection::vec(1usize..12, 0..4),
        input_dim in 1usize..7,
        output_dim in 1usize..4,
        tanh in any::<bool>(),
        seed in any::<u64>(),
        x in prop::collection::vec(-2.0f64..2.0, 7),
        u in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let out = if tanh { OutputActivation::Tanh } else { OutputActivation::None };
        let net = NetworkParams::init(NetworkSpec::new(input_dim, &hidden, output_dim, out), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let check = gradient_check(&net, &x[..input_dim], &u[..output_dim], 1e-5).unwrap();
        prop_assert!(check.max_relative_error < 1e-4, "{:?}", check);
    }

    #[test]
    fn forward_and_gradients_are_pure(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let net = NetworkParams::init(NetworkSpec::new(4, &[8, 8], 2, OutputActivation::Tanh), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        let (g1, d1) = net.gradients(&x, &[1.0, -0.5]).unwrap();
        let (g2, d2) = net.gradients(&x, &[1.0, -0.5]).unwrap();
        prop_assert_eq!(g1, g2);
        prop_assert_eq!(d1, d2);
    }

    #[test]
    fn schedules_conserve_the_horizon(t_max in 1usize..2000, k in 0usize..40) {
        match time_schedule(t_max, k) {
            Ok(s) => {
                prop_assert_eq!(s.segments.len(), k + 1);
                prop_assert_eq!(s.segments.iter().sum::<usize>(), t_max);
                prop_assert!(s.segments.iter().all(|&t| t >= 1));
            }
            Err(_) => prop_assert!(t_max < k + 1),
        }
    }

    #[test]
    fn norm_dominance(v in prop::collection::vec(-10.0f64..10.0, 1..13)) {
        let inf = Norm::LInf.apply(&v);
        let one = Norm::L1.apply(&v);
        prop_assert!(inf <= one + 1e-12);
        prop_assert!(one <= v.len() as f64 * inf + 1e-9);
    }

    #[test]
    fn reward_is_nonzero_only_at_the_last_step(s in position(), g in position(), t in 0usize..=100) {
        let r = tdm_reward(s, g, t, 100);
        if t == 0 {
            prop_assert_eq!(r, -distance(s, g));
        } else {
            prop_assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn terminal_targets_equal_negative_distance(s in position(), n in position(), g in position(), seed in any::<u64>()) {
        let env = EnvConfig::nav2d();
        let cfg = TdmConfig { q_output_mode: leap::tdm::QOutputMode::Scalar, hidden_sizes: vec![8], ..TdmConfig::default() };
        let nets = TdmNets::new(&cfg, scaling_for(&env, &cfg), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tr = Transition { state: s, action: Action([0.0, 0.0]), next_state: n, goal: g, horizon: 0 };
        prop_assert_eq!(nets.critic_target(&tr).unwrap(), vec![-distance(n, g)]);
    }

    #[test]
    fn future_relabels_come_from_later_steps(lens in prop::collection::vec(1usize..30, 1..6), seed in any::<u64>()) {
        let mut buf = ReplayBuffer::new(1_000_000, 100);
        for (k, &len) in lens.iter().enumerate() {
            let mut t = Trajectory::new(NavState([k as f64, 0.0]), NavState([0.0, 0.0]));
            for i in 0..len {
                t.push(Action([0.0, 0.1]), NavState([k as f64, (i + 1) as f64]), len - 1 - i);
            }
            buf.push(t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in buf.sample_relabeled(&RelabelStrategy::TDM, &mut rng, 200).unwrap() {
            if let Some(j) = e.goal_step {
                prop_assert!(j > e.step);
                prop_assert_eq!(e.transition.goal.0[0], e.trajectory as f64);
            }
        }
    }

    #[test]
    fn normalization_round_trips(xs in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 2..40)) {
        let data = ndarray::Array2::from_shape_fn((xs.len(), 2), |(i, j)| if j == 0 { xs[i].0 } else { xs[i].1 });
        let norm = Normalization::fit(data.view()).unwrap();
        let back = norm.invert(norm.apply(data.view()).view());
        for (a, b) in back.iter().zip(data.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
