//! Property tests for the rank statistic, the output vectorization and the
//! task samplers.

mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unlimitd::diffnet::{unvectorize_outputs, vectorize_outputs};
use unlimitd::eval::auc_from_scores;
use unlimitd::taskgen::{sample_task, TaskKind, TaskSpec};

proptest! {
    /// The midrank estimator and exhaustive pair counting are the same
    /// statistic, ties included.
    #[test]
    fn auc_matches_pair_counting(
        neg in prop::collection::vec(0u8..12, 1..40),
        pos in prop::collection::vec(0u8..12, 1..40),
    ) {
        let neg: Vec<f64> = neg.into_iter().map(|v| v as f64 / 2.0).collect();
        let pos: Vec<f64> = pos.into_iter().map(|v| v as f64 / 2.0).collect();
        let fast = auc_from_scores(&neg, &pos);
        let slow = common::brute_force_auc(&neg, &pos);
        prop_assert_eq!(fast, slow);
    }

    /// AUC is a rank statistic: any strictly increasing transform of the
    /// scores leaves it untouched.
    #[test]
    fn auc_is_rank_invariant(
        neg in prop::collection::vec(-50i16..50, 1..30),
        pos in prop::collection::vec(-50i16..50, 1..30),
        scale in 1u8..5,
        shift in -10i8..10,
    ) {
        let f = |v: i16| v as f64;
        let g = move |v: i16| (scale as f64 * v as f64 + shift as f64).exp();
        let base = auc_from_scores(
            &neg.iter().map(|&v| f(v)).collect::<Vec<_>>(),
            &pos.iter().map(|&v| f(v)).collect::<Vec<_>>(),
        );
        let transformed = auc_from_scores(
            &neg.iter().map(|&v| g(v)).collect::<Vec<_>>(),
            &pos.iter().map(|&v| g(v)).collect::<Vec<_>>(),
        );
        prop_assert_eq!(base, transformed);
    }

    /// Output vectorization and its inverse are exact for any shape.
    #[test]
    fn output_vectorization_round_trips(
        n_y in 1usize..5,
        k in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let m = DMatrix::from_fn(n_y, k, |_, _| rng.random_range(-10.0..10.0));
        let v = vectorize_outputs(&m);
        // Row block t holds the outputs of input t.
        for t in 0..k {
            for r in 0..n_y {
                prop_assert_eq!(v[t * n_y + r], m[(r, t)]);
            }
        }
        prop_assert_eq!(unvectorize_outputs(&v, n_y), m);
    }

    /// Sampled task parameters stay inside their documented boxes for any
    /// seed.
    #[test]
    fn task_parameters_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_task(TaskKind::Sine, &mut rng) {
            TaskSpec::Sine { amplitude, phase } => {
                prop_assert!((0.1..=5.0).contains(&amplitude));
                prop_assert!((0.0..=std::f64::consts::PI).contains(&phase));
            }
            _ => prop_assert!(false),
        }
        match sample_task(TaskKind::Line, &mut rng) {
            TaskSpec::Line { slope } => prop_assert!((-1.0..=1.0).contains(&slope)),
            _ => prop_assert!(false),
        }
        match sample_task(TaskKind::Quadratic, &mut rng) {
            TaskSpec::Quadratic { coeff, shift } => {
                prop_assert!((-0.2..=0.2).contains(&coeff));
                prop_assert!((-2.0..=2.0).contains(&shift));
            }
            _ => prop_assert!(false),
        }
    }
}
