mod common;

use common::random_batch;
use fairsaoml_core::experts::{ActivityRule, ExpertPool, GradientBounds};
use fairsaoml_core::intervals::expected_census;
use fairsaoml_core::metrics::{demographic_parity, equalized_odds, fair_sar_estimate, static_regret, ComparatorSolver};
use fairsaoml_core::optim::{meta_update, project_ball, Ball, LagrangianConfig, MetaTerm, PreparedBatch};
use fairsaoml_core::stream::{load_csv_reader, write_csv, CsvSchema};
use fairsaoml_core::weights::{normalize, update_rc, Confidence};
use fairsaoml_core::*;
use ndarray::Array1;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rc_pair() -> impl Strategy<Value = (f64, f64)> {
    (0.0..5_000.0f64, -1.0..=1.0f64).prop_map(|(c, frac)| (frac * c, c))
}

fn signs(n: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1 } else { -1 }), n)
}

fn small_batches(seed: u64, n: usize) -> Vec<TaskBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_batch(&mut rng, 10, 3)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn normalized_weights_sum_to_one(stats in prop::collection::vec(rc_pair(), 1..40)) {
        let w = normalize(&stats).unwrap();
        let sum: f64 = w.values().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(w.values().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn confidence_stays_bounded(steps in prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 1..100)) {
        let mut conf = Confidence::default();
        for (meta, expert) in steps {
            conf = update_rc(conf, meta, expert).unwrap();
            prop_assert!(conf.r.abs() <= conf.c);
        }
    }

    #[test]
    fn projection_lands_in_ball_and_is_idempotent(
        v in prop::collection::vec(-100.0..100.0f64, 1..12),
        r in 1e-3..10.0f64,
    ) {
        let ball = Ball::new(r).unwrap();
        let p = project_ball(&Array1::from(v), &ball);
        prop_assert!(p.dot(&p).sqrt() <= r * (1.0 + 1e-15));
        // rescaling can round a boundary point one ulp outside
        let again = project_ball(&p, &ball);
        prop_assert!((&again - &p).iter().all(|d| d.abs() <= 1e-14 * r));
    }

    #[test]
    fn parity_metrics_fold_and_are_group_symmetric(
        preds in signs(60),
        labels in signs(60),
        groups in signs(60),
    ) {
        let flipped: Vec<i8> = groups.iter().map(|s| -s).collect();
        let dp = demographic_parity(&preds, &groups);
        if let Some(v) = dp {
            prop_assert!(v > 0.0 && v <= 1.0);
        }
        let dp_flip = demographic_parity(&preds, &flipped);
        prop_assert_eq!(dp.is_some(), dp_flip.is_some());
        if let (Some(a), Some(b)) = (dp, dp_flip) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
        let eo = equalized_odds(&preds, &labels, &groups);
        let eo_flip = equalized_odds(&preds, &labels, &flipped);
        if let Some(v) = eo.value {
            prop_assert!(v > 0.0 && v <= 1.0);
            prop_assert!((v - eo_flip.value.unwrap()).abs() <= 1e-15);
        }
    }

    #[test]
    fn meta_update_keeps_pair_feasible(
        seed in 0u64..1_000,
        theta in prop::collection::vec(-5.0..5.0f64, 3),
        lambda in prop::collection::vec(0.0..3.0f64, 1),
        radius in 0.05..2.0f64,
        n_experts in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = vec![FairnessSpec::new(FairnessKind::Ddp, 0.05).unwrap()];
        let queries: Vec<PreparedBatch> = (0..n_experts)
            .map(|_| PreparedBatch::new(random_batch(&mut rng, 20, 3), &specs).unwrap())
            .collect();
        let meta = ParamPair::new(Array1::from(theta), Array1::from(lambda)).unwrap();
        let pairs: Vec<ParamPair> = (0..n_experts)
            .map(|i| ParamPair::new(&meta.theta * (1.0 + i as f64), &meta.lambda * 0.5).unwrap())
            .collect();
        let terms: Vec<MetaTerm> = (0..n_experts)
            .map(|i| MetaTerm {
                weight: 1.0 / n_experts as f64,
                params: &pairs[i],
                query: &queries[i],
                active: i % 2 == 0,
                jacobian: None,
            })
            .collect();
        let ball = Ball::new(radius).unwrap();
        let next = meta_update(&meta, &terms, &LossSpec::default(), &LagrangianConfig::default(), &ball).unwrap();
        prop_assert!(next.theta.dot(&next.theta).sqrt() <= radius + 1e-12);
        prop_assert!(next.lambda.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn gradient_bound_is_monotone(seed in 0u64..10_000, rounds in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bounds = GradientBounds::from_epsilon(0.05, 4).unwrap();
        for _ in 0..rounds {
            let scale = 1.0 + 4.0 * rand::Rng::random::<f64>(&mut rng);
            let b = random_batch(&mut rng, 8, 4);
            let b = TaskBatch::new(b.features() * scale, b.labels().to_vec(), b.protected().to_vec(), 1).unwrap();
            let next = bounds.update(&b);
            prop_assert!(next.g_bound >= bounds.g_bound);
            prop_assert_eq!(next.s_radius, bounds.s_radius);
            bounds = next;
        }
    }

    #[test]
    fn pool_census_matches_formula(base in 2usize..8, horizon in 1usize..200) {
        let meta = ParamPair::zeros(2, 1);
        let bounds = GradientBounds::from_epsilon(0.05, 2).unwrap();
        for scheme in [
            IntervalScheme::di(),
            IntervalScheme::agc(horizon, base).unwrap(),
            IntervalScheme::dgc(base).unwrap(),
        ] {
            let mut pool = ExpertPool::new(scheme, bounds, ActivityRule::default());
            for t in 1..=horizon {
                let target = pool.target(t).unwrap();
                pool.activate(t, &target, &meta).unwrap();
                let census = expected_census(&scheme, t).unwrap();
                prop_assert_eq!(pool.len(), census.total);
                let (active, sleeping) = pool.partition();
                prop_assert_eq!(active.len(), target.len());
                prop_assert_eq!(active.len() + sleeping.len(), pool.len());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_window_fair_sar_is_static_regret(seed in 0u64..1_000, horizon in 1usize..12) {
        let batches = small_batches(seed, horizon);
        let refs: Vec<&TaskBatch> = batches.iter().collect();
        let solver = ComparatorSolver::new(Ball::new(0.8).unwrap(), LossSpec::default());
        let losses: Vec<f64> = (0..horizon).map(|t| 0.6 + 0.05 * t as f64).collect();
        let g: Vec<Vec<f64>> = (0..horizon).map(|t| vec![0.01 * t as f64 - 0.03]).collect();
        let sar = fair_sar_estimate(&losses, &g, &refs, horizon, None, &solver).unwrap();
        let stat = static_regret(&losses, &refs, &solver).unwrap();
        prop_assert_eq!(sar.windows.len(), 1);
        prop_assert!((sar.max_loss_regret - stat.regret).abs() <= 1e-12);
        prop_assert!((sar.max_constraint_sums[0] - g.iter().map(|v| v[0]).sum::<f64>()).abs() <= 1e-12);
    }

    #[test]
    fn comparator_beats_every_iterate(seed in 0u64..1_000, probes in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 1..20)) {
        let batches = small_batches(seed, 6);
        let refs: Vec<&TaskBatch> = batches.iter().collect();
        let ball = Ball::new(0.7).unwrap();
        let solver = ComparatorSolver::new(ball, LossSpec::default());
        let best = solver.solve(&refs).unwrap();
        prop_assert!(best.converged);
        for p in probes {
            let theta = project_ball(&Array1::from(p), &ball);
            prop_assert!(best.objective <= solver.objective(&theta, &refs).unwrap() + 1e-9);
        }
    }

    #[test]
    fn csv_round_trip_is_lossless(seed in 0u64..1_000, rounds in 1usize..6, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream: Vec<TaskBatch> = (1..=rounds)
            .map(|t| random_batch(&mut rng, 7, d).with_round(t))
            .collect();
        let mut buf = Vec::new();
        write_csv(&mut buf, &stream).unwrap();
        let back = load_csv_reader(buf.as_slice(), &CsvSchema::native(d)).unwrap();
        prop_assert_eq!(back, stream);
    }
}
