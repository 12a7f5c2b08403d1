//! Randomized invariants for the prox operators and the sampling
//! accumulator. Each property encodes something the closed forms must satisfy
//! for *every* input, not just the hand-picked cases in the unit tests.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adaprox::problems::{SampleSpace, StochasticProblem, StochasticQuadraticInstance};
use adaprox::prox::ProxFunction;
use adaprox::sampling::{augment, estimate, estimate_with_ids, SamplingMode};
use adaprox::DenseVector;

const DIM: usize = 4;

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, DIM..=DIM)
}

/// Every prox family this crate ships, over a shared dimension, so the
/// operator-level properties below can quantify over the whole registry.
fn all_prox_functions(weight: f64, a: &[f64], b: f64, lo: &[f64], hi: &[f64]) -> Vec<ProxFunction> {
    vec![
        ProxFunction::zero(DIM),
        ProxFunction::l1(weight, DIM).unwrap(),
        ProxFunction::nonneg(DIM),
        ProxFunction::halfspace(DenseVector::from_vec(a.to_vec()), b).unwrap(),
        ProxFunction::boxed(
            DenseVector::from_vec(lo.to_vec()),
            DenseVector::from_vec(hi.to_vec()),
        )
        .unwrap(),
    ]
}

proptest! {
    /// The prox of a convex function is 1-Lipschitz: no pair of inputs may
    /// move apart. A violation means some closed form is not actually the
    /// minimizer it claims to be.
    #[test]
    fn prox_is_nonexpansive(
        z1_v in vec_strategy(),
        z2_v in vec_strategy(),
        a_v in vec_strategy(),
        b in -5.0f64..5.0,
        lo_v in proptest::collection::vec(-5.0f64..0.0, DIM..=DIM),
        width_v in proptest::collection::vec(0.001f64..5.0, DIM..=DIM),
        weight in 0.01f64..5.0,
        alpha in 0.01f64..10.0,
    ) {
        let a_norm: f64 = a_v.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(a_norm > 0.5);
        let hi_v: Vec<f64> = lo_v.iter().zip(&width_v).map(|(l, w)| l + w).collect();
        let z1 = DenseVector::from_vec(z1_v);
        let z2 = DenseVector::from_vec(z2_v);

        for h in all_prox_functions(weight, &a_v, b, &lo_v, &hi_v) {
            let p1 = h.prox(alpha, &z1).unwrap();
            let p2 = h.prox(alpha, &z2).unwrap();
            prop_assert!(
                p1.dist(&p2) <= z1.dist(&z2) + 1e-10,
                "{} prox expanded a pair: image dist {} > preimage dist {}",
                h.kind_name(), p1.dist(&p2), z1.dist(&z2)
            );
        }
    }

    /// The l1 prox is exactly the componentwise soft threshold: magnitudes
    /// shrink by `alpha * weight` and stop at zero, signs never flip.
    #[test]
    fn l1_prox_is_the_soft_threshold(
        z_v in vec_strategy(),
        weight in 0.01f64..5.0,
        alpha in 0.01f64..10.0,
    ) {
        let h = ProxFunction::l1(weight, DIM).unwrap();
        let z = DenseVector::from_vec(z_v.clone());
        let p = h.prox(alpha, &z).unwrap();
        let t = alpha * weight;
        for j in 0..DIM {
            prop_assert!(p[j].abs() <= z_v[j].abs(), "component {j} grew");
            prop_assert_eq!(
                p[j].abs(),
                (z_v[j].abs() - t).max(0.0),
                "component {} is not soft-thresholded by {}",
                j,
                t
            );
            prop_assert!(p[j] * z_v[j] >= 0.0, "component {j} flipped sign");
        }
    }

    /// Indicator proxes are projections: the output is feasible (its own
    /// `evaluate` must say 0, not `inf`), projecting twice changes nothing,
    /// and the steplength is irrelevant.
    #[test]
    fn indicator_prox_projects_onto_the_set(
        z_v in vec_strategy(),
        a_v in vec_strategy(),
        b in -5.0f64..5.0,
        lo_v in proptest::collection::vec(-5.0f64..0.0, DIM..=DIM),
        width_v in proptest::collection::vec(0.001f64..5.0, DIM..=DIM),
        alpha in 0.01f64..10.0,
        alpha2 in 0.01f64..10.0,
    ) {
        let a_norm: f64 = a_v.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(a_norm > 0.5);
        let hi_v: Vec<f64> = lo_v.iter().zip(&width_v).map(|(l, w)| l + w).collect();
        let z = DenseVector::from_vec(z_v);

        let indicators = vec![
            ProxFunction::nonneg(DIM),
            ProxFunction::halfspace(DenseVector::from_vec(a_v.clone()), b).unwrap(),
            ProxFunction::boxed(
                DenseVector::from_vec(lo_v.clone()),
                DenseVector::from_vec(hi_v.clone()),
            )
            .unwrap(),
        ];
        for h in indicators {
            let p = h.prox(alpha, &z).unwrap();
            prop_assert_eq!(
                h.evaluate(&p).unwrap(), 0.0,
                "{} prox output is not a member of its own set", h.kind_name()
            );
            let pp = h.prox(alpha, &p).unwrap();
            prop_assert_eq!(
                p.as_slice(), pp.as_slice(),
                "{} projection is not idempotent", h.kind_name()
            );
            let q = h.prox(alpha2, &z).unwrap();
            prop_assert_eq!(
                p.as_slice(), q.as_slice(),
                "{} projection depends on the steplength", h.kind_name()
            );
        }
    }

    /// Growing a batch with `augment` must agree bit for bit with building
    /// the full batch from scratch over the same id sequence: same Welford
    /// path, same mean, same scatter. This is what lets the solver reuse a
    /// trial batch instead of resampling.
    #[test]
    fn augment_matches_scratch_accumulation(
        seed in any::<u64>(),
        prefix in 2usize..24,
        extra in 1usize..24,
        x_v in vec_strategy(),
    ) {
        let pool = 10usize;
        let p = StochasticQuadraticInstance::from_diagonal(
            vec![0.5, 1.0, 2.0, 4.0],
            DenseVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]),
            0.3,
            pool,
            7,
        )
        .unwrap();
        prop_assert!(matches!(p.sample_space(), SampleSpace::Finite(n) if n == pool));
        let x = DenseVector::from_vec(x_v);

        // Two-stage: estimate a prefix, then augment to the full size.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = estimate(&p, &x, prefix, &mut rng, SamplingMode::WithReplacement, false).unwrap();
        let grown = augment(est, &p, &x, prefix + extra, &mut rng, SamplingMode::WithReplacement).unwrap();

        // Scratch: replay the identical draw stream in one pass.
        let mut replay = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..prefix + extra).map(|_| replay.random_range(0..pool)).collect();
        let scratch = estimate_with_ids(&p, &x, &ids, false).unwrap();

        prop_assert_eq!(grown.sample_ids(), &ids[..]);
        prop_assert_eq!(grown.batch_size(), scratch.batch_size());
        prop_assert_eq!(grown.mean().as_slice(), scratch.mean().as_slice());
        prop_assert_eq!(grown.sum_sq_dev(), scratch.sum_sq_dev());
    }

    /// Sampling without replacement never repeats an id, and augmenting keeps
    /// the no-repeat guarantee across the original ids too.
    #[test]
    fn without_replacement_never_repeats(
        seed in any::<u64>(),
        prefix in 2usize..6,
        extra in 1usize..4,
    ) {
        let pool = 10usize;
        let p = StochasticQuadraticInstance::from_diagonal(
            vec![1.0, 2.0, 0.5, 3.0],
            DenseVector::from_vec(vec![0.0, 1.0, -1.0, 0.5]),
            0.2,
            pool,
            13,
        )
        .unwrap();
        let x = DenseVector::zeros(DIM);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = estimate(&p, &x, prefix, &mut rng, SamplingMode::WithoutReplacement, false).unwrap();
        let grown = augment(est, &p, &x, prefix + extra, &mut rng, SamplingMode::WithoutReplacement).unwrap();

        let mut seen = std::collections::HashSet::new();
        for &id in grown.sample_ids() {
            prop_assert!(id < pool, "id {id} outside the sample space");
            prop_assert!(seen.insert(id), "id {id} was drawn twice without replacement");
        }
    }
}
