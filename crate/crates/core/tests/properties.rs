use kpirl::costs::{rebase, relativize_demo, CostFamily, CostLayout, CostParams, DemoTarget};
use kpirl::diff::{Graph, Tensor};
use kpirl::harness::config::{ExperimentConfig, Preset};
use kpirl::harness::experiment::summarize;
use kpirl::harness::io::{self, MetricRow};
use kpirl::planner::{relative_distance, relative_distance_x};
use kpirl::sim::{Simulator, TaskSpec, DOF, NOMINAL_THETA};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = CostFamily> {
    prop_oneof![
        Just(CostFamily::Weighted),
        Just(CostFamily::TimeDependent),
        Just(CostFamily::Rbf)
    ]
}

fn preset() -> impl Strategy<Value = Preset> {
    prop_oneof![
        Just(Preset::SimReachingKnown),
        Just(Preset::ReachingLearned),
        Just(Preset::Placing)
    ]
}

fn near_nominal() -> impl Strategy<Value = [f64; DOF]> {
    prop::array::uniform3(-0.1..0.1f64).prop_map(|d| std::array::from_fn(|j| NOMINAL_THETA[j] + d[j]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_of_squares_gradient_is_twice_input(x in prop::collection::vec(-10.0..10.0f64, 1..8)) {
        let mut g = Graph::new();
        let v = g.variable(Tensor::vector(x.clone()).unwrap());
        let sq = g.square(v).unwrap();
        let s = g.sum(sq).unwrap();
        let grad = g.gradient(s, &[v]).unwrap()[0];
        for (gi, xi) in g.value(grad).data().iter().zip(&x) {
            prop_assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn weighted_family_expands_to_constant_steps(
        k in 1usize..4,
        horizon in 2usize..10,
        seed in any::<u64>(),
    ) {
        let layout = CostLayout::new(CostFamily::Weighted, k, horizon, 0).unwrap();
        let psi: Vec<f64> = (0..layout.len()).map(|i| ((seed >> (i % 60)) & 7) as f64 + 0.5).collect();
        let p = CostParams::new(layout, psi.clone()).unwrap();
        let steps = p.per_step_weights();
        prop_assert_eq!(steps.len(), horizon);
        prop_assert!(steps.iter().all(|s| *s == psi));
    }

    #[test]
    fn cost_grows_with_weights(
        fam in family(),
        horizon in 2usize..8,
        offset in 0.01..0.5f64,
        bump in 0.1..3.0f64,
    ) {
        let k = 2;
        let layout = CostLayout::new(fam, k, horizon, 1).unwrap();
        let goal = vec![0.5; 2 * k];
        let frames = vec![vec![0.5 + offset; 2 * k]; horizon];
        let base = CostParams::ones(layout.clone());
        let bigger = CostParams::new(layout, base.psi.iter().map(|w| w + bump).collect()).unwrap();
        prop_assert!(bigger.evaluate(&frames, &goal).unwrap() > base.evaluate(&frames, &goal).unwrap());
    }

    #[test]
    fn rebasing_at_the_recorded_start_restores_the_demo(
        theta in near_nominal(),
        dx in 0.03..0.08f64,
        dy in 0.03..0.08f64,
    ) {
        let sim = Simulator::default();
        let demo = match TaskSpec::placing(&sim, theta, dx, dy, 10).and_then(|t| sim.generate_demo(&t)) {
            Ok(d) => d,
            Err(_) => return Ok(()),
        };
        let target = rebase(&relativize_demo(&demo), demo.start()).unwrap();
        let original = DemoTarget::from_demo(&demo);
        for (a, b) in target.frames_xy.iter().flatten().zip(original.frames_xy.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stepping_stays_within_joint_limits(
        theta in near_nominal(),
        actions in prop::collection::vec(prop::array::uniform3(-0.15..0.15f64), 1..20),
    ) {
        let sim = Simulator::default();
        let states = sim.execute(&sim.state_at(theta).unwrap(), &actions).unwrap();
        let background = states[0].keypoints.last().unwrap().clone();
        for s in &states {
            prop_assert!(sim.arm.check_limits(&s.theta).is_ok());
            prop_assert_eq!(s.keypoints.last().unwrap(), &background);
        }
    }

    #[test]
    fn relative_distance_of_a_still_plan_is_one(
        first in prop::collection::vec(0.0..1.0f64, 4),
        goal in prop::collection::vec(0.0..1.0f64, 4),
    ) {
        prop_assume!(first[0] != goal[0] && first[2] != goal[2]);
        prop_assert!((relative_distance(&first, &first, &goal).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((relative_distance_x(&first, &first, &goal).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(relative_distance(&first, &goal, &goal).unwrap(), 0.0);
    }

    #[test]
    fn config_render_parse_round_trip(
        p in preset(),
        seeds in prop::collection::vec(0u64..1000, 1..4),
        epochs in 1usize..10_000,
        alpha in 1e-6..1.0f64,
        iters in 1usize..100,
        baseline in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::preset(p);
        cfg.seeds = seeds;
        cfg.epochs = epochs;
        cfg.alpha = alpha;
        cfg.iters = iters;
        cfg.baseline = baseline;
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn summary_mean_lies_between_seed_extremes(values in prop::collection::vec(0.0..5.0f64, 1..12)) {
        let rows: Vec<MetricRow> = values
            .iter()
            .enumerate()
            .map(|(i, v)| MetricRow {
                seed: i as u64,
                cost: "weighted".into(),
                train_demos: 1,
                target: 0,
                relative: *v,
                relative_x: *v,
                goal_mse_px: *v,
                executed_relative: *v,
            })
            .collect();
        let s = summarize(&rows, false);
        prop_assert_eq!(s.len(), 1);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s[0].relative_mean >= lo - 1e-12 && s[0].relative_mean <= hi + 1e-12);
        prop_assert_eq!(s[0].relative_std.is_some(), values.len() > 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reaching_demo_csv_round_trips(theta in near_nominal(), dx in 0.1..0.2f64, neg in any::<bool>()) {
        let sim = Simulator::default();
        let dx = if neg { -dx } else { dx };
        let demo = match TaskSpec::reaching(&sim, theta, dx, 25).and_then(|t| sim.generate_demo(&t)) {
            Ok(d) => d,
            Err(_) => return Ok(()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.csv");
        io::write_demo(&path, &demo).unwrap();
        prop_assert_eq!(io::read_demo(&path).unwrap(), DemoTarget::from_demo(&demo));
    }
}
