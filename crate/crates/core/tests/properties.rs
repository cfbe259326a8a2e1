//! Property tests for the invariants every module promises.

use approx::assert_relative_eq;
use gnq_core::attack::{attack_from_scores, auc, success_curve};
use gnq_core::bounds::{
    binary_entropy, fano_error_bound, inverse_binary_entropy, per_iteration_leakage, prior_entropy,
};
use gnq_core::data::{Dataset, Example};
use gnq_core::geometry::{
    gnq_all_exact, gnq_diagonal, gnq_exact, GnqMode, GradientSet, GramSummary, DEFAULT_TOL,
};
use gnq_core::models::{loss, InitScheme, ModelKind, ModelSpec};
use gnq_core::oracle::{
    closed_form_covariances, covariance_scales, enumerate_covariances, exact_discrete_mi,
    gaussian_leakage_from_covariances, random_gradients,
};
use gnq_core::sampling::{draw_indicators, SamplingConfig, SamplingScheme};
use gnq_core::trainer::{audit, replay, train, AuditCadence, AuditOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scheme() -> impl Strategy<Value = SamplingScheme> {
    prop_oneof![
        Just(SamplingScheme::WithoutReplacement),
        Just(SamplingScheme::IndependentBernoulli)
    ]
}

fn sampling_cfg() -> impl Strategy<Value = SamplingConfig> {
    (2usize..40, scheme(), any::<u64>())
        .prop_flat_map(|(n, scheme, seed)| (Just(n), 1..=n, Just(scheme), Just(seed)))
        .prop_flat_map(|(n, nt, scheme, seed)| {
            (Just(n), Just(nt), 1..=nt, Just(scheme), Just(seed))
        })
        .prop_map(|(n, nt, b, scheme, seed)| SamplingConfig {
            n_total: n,
            n_train: nt,
            batch_size: b,
            n_iters: 3,
            learning_rate: 0.1,
            scheme,
            seed,
        })
}

prop_compose! {
    fn gradient_set()(n in 2usize..12, dim in 1usize..5, seed in any::<u64>()) -> GradientSet {
        random_gradients(n, dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }
}

fn random_orthogonal(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_gradients(dim, dim, &mut rng).unwrap();
    let m = DMatrix::from_fn(dim, dim, |r, c| g.vectors[r][c]);
    m.qr().q()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn indicator_draws_are_deterministic(cfg in sampling_cfg(), iteration in 0usize..50) {
        let a = draw_indicators(&cfg, iteration).unwrap();
        let b = draw_indicators(&cfg, iteration).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.m.iter().zip(&a.t).all(|(&m, &t)| !m || t));
        if cfg.scheme == SamplingScheme::WithoutReplacement {
            prop_assert_eq!(a.t.iter().filter(|&&t| t).count(), cfg.n_train);
        }
    }

    #[test]
    fn gnq_is_nonnegative(grads in gradient_set()) {
        for s in gnq_all_exact(&grads, DEFAULT_TOL).unwrap() {
            prop_assert!(s.value >= 0.0);
        }
    }

    #[test]
    fn gnq_scales_quadratically(grads in gradient_set(), c in 0.1f64..10.0) {
        let j = grads.len() - 1;
        let base = gnq_exact(&grads, j, DEFAULT_TOL).unwrap().value;
        let mut scaled = grads.clone();
        scaled.vectors[j].iter_mut().for_each(|x| *x *= c);
        let value = gnq_exact(&scaled, j, DEFAULT_TOL).unwrap().value;
        prop_assert!(rel_close(value, c * c * base, 1e-9), "{} vs {}", value, c * c * base);
    }

    #[test]
    fn gnq_is_rotation_invariant(grads in gradient_set(), seed in any::<u64>()) {
        let q = random_orthogonal(grads.dim, seed);
        let rotated = GradientSet::new(
            0,
            grads.vectors.iter().map(|g| (&q * DVector::from_column_slice(g)).as_slice().to_vec()).collect(),
        ).unwrap();
        let a = gnq_all_exact(&grads, DEFAULT_TOL).unwrap();
        let b = gnq_all_exact(&rotated, DEFAULT_TOL).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(rel_close(x.value, y.value, 1e-9), "{} vs {}", x.value, y.value);
        }
    }

    #[test]
    fn downdate_matches_direct(grads in gradient_set()) {
        let all = gnq_all_exact(&grads, DEFAULT_TOL).unwrap();
        for (j, s) in all.iter().enumerate() {
            let direct = gnq_exact(&grads, j, DEFAULT_TOL).unwrap();
            prop_assert!(rel_close(s.value, direct.value, 1e-8), "j={} {} vs {}", j, s.value, direct.value);
        }
    }

    #[test]
    fn diagonal_equals_exact_for_axis_aligned(dim in 1usize..5, n in 3usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_gradients(n, 1, &mut rng).unwrap();
        // every axis gets at least two gradients so S is invertible
        let vectors: Vec<Vec<f64>> = (0..n.max(2 * dim))
            .map(|k| {
                let mut v = vec![0.0; dim];
                v[k % dim] = raw.vectors[k % n][0] + 2.0;
                v
            })
            .collect();
        let grads = GradientSet::new(0, vectors).unwrap();
        for j in 0..grads.len() {
            let others: Vec<usize> = (0..grads.len()).filter(|&k| k != j).collect();
            let summary = GramSummary::diagonal(&grads, others, GnqMode::Diagonal);
            let diag = gnq_diagonal(&summary, &grads.vectors[j], j, 0).unwrap().value;
            let exact = gnq_exact(&grads, j, DEFAULT_TOL).unwrap().value;
            prop_assert!((diag - exact).abs() <= 1e-10 * exact.max(1.0));
        }
    }

    #[test]
    fn determinant_lemma(dim in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gradients(dim + 1, dim, &mut rng).unwrap();
        let b = DMatrix::from_fn(dim, dim, |r, c| g.vectors[r][c]);
        let a = &b * b.transpose() + DMatrix::identity(dim, dim);
        let q = DVector::from_column_slice(&g.vectors[dim]);
        let lhs = (&a + &q * q.transpose()).determinant();
        let rhs = (1.0 + (q.transpose() * a.clone().try_inverse().unwrap() * &q)[0]) * a.determinant();
        prop_assert!(rel_close(lhs, rhs, 1e-9));
    }

    #[test]
    fn leakage_is_zero_at_zero_and_increasing(half in 2usize..200, b_frac in 0.01f64..0.99) {
        let n = 2 * half;
        let b = ((b_frac * half as f64) as usize).clamp(1, half - 1);
        let cfg = SamplingConfig {
            n_total: n, n_train: half, batch_size: b, n_iters: 1, learning_rate: 0.1,
            scheme: SamplingScheme::WithoutReplacement, seed: 0,
        };
        prop_assert_eq!(per_iteration_leakage(0.0, &cfg).unwrap(), 0.0);
        let mut prev = 0.0;
        for k in 1..=200 {
            let x = 1e3 * k as f64 / 200.0;
            let v = per_iteration_leakage(x, &cfg).unwrap();
            prop_assert!(v > prev, "not increasing at {}", x);
            prev = v;
        }
    }

    #[test]
    fn fano_bound_is_monotone(prior in 0.01f64..1.0, a in 0.0f64..2.0, extra in 0.0f64..1.0) {
        let lo = fano_error_bound(prior, a).unwrap().pe_lower;
        let hi_leak = fano_error_bound(prior, a + extra).unwrap().pe_lower;
        prop_assert!(hi_leak <= lo);
        let more_prior = fano_error_bound((prior + extra).min(1.0), a).unwrap().pe_lower;
        prop_assert!(more_prior >= lo);
    }

    #[test]
    fn inverse_entropy_round_trips(h in 0.0f64..=1.0) {
        let p = inverse_binary_entropy(h).unwrap();
        prop_assert!((0.0..=0.5).contains(&p));
        prop_assert!((binary_entropy(p) - h).abs() <= 1e-10);
    }

    #[test]
    fn auc_is_rank_based(scores in prop::collection::vec(-5.0f64..5.0, 4..60), seed in any::<u64>()) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        let mut labels = labels;
        labels[1] = false;
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| s.powi(3) + s + 7.0).collect();
        prop_assert!((auc(&transformed, &labels).unwrap() - base).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&negated, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
        let r = attack_from_scores(scores.clone(), labels.clone()).unwrap();
        for n in 0..scores.len() {
            prop_assert_eq!(r.per_example_success[n], (scores[n] >= r.threshold) == labels[n]);
        }
    }

    #[test]
    fn binning_conserves_counts(gnq in prop::collection::vec(prop_oneof![Just(0.0), 1e-6f64..1e6], 2..200), bins in 2usize..20) {
        let success: Vec<bool> = gnq.iter().map(|&g| g > 1.0).collect();
        match success_curve(&gnq, &success, bins) {
            Ok(curve) => prop_assert_eq!(curve.bins.iter().map(|b| b.count).sum::<usize>(), gnq.len()),
            Err(_) => {
                let mut d = gnq.clone();
                d.sort_by(f64::total_cmp);
                d.dedup();
                prop_assert!(d.len() < 2);
            }
        }
    }

    #[test]
    fn covariance_rank_one_structure(seed in any::<u64>(), n in 3usize..8, dim in 1usize..4) {
        let grads = random_gradients(n, dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cfg = SamplingConfig {
            n_total: n, n_train: 2, batch_size: 1, n_iters: 1, learning_rate: 0.1,
            scheme: SamplingScheme::IndependentBernoulli, seed,
        };
        let t = enumerate_covariances(&grads, &cfg, 0).unwrap();
        let (c1, c2) = covariance_scales(&cfg);
        let g = DVector::from_column_slice(&grads.vectors[0]);
        let gg = &g * g.transpose();
        prop_assert!((&t.sigma - &t.sigma0 - &gg * c1).norm() <= 1e-14);
        prop_assert!((&t.sigma1 - &t.sigma0 - &gg * c2).norm() <= 1e-14);
    }

    #[test]
    fn gaussian_leakage_paths_agree(seed in any::<u64>(), n in 5usize..10) {
        let grads = random_gradients(n, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cfg = SamplingConfig {
            n_total: n, n_train: n / 2, batch_size: 1, n_iters: 1, learning_rate: 0.1,
            scheme: SamplingScheme::IndependentBernoulli, seed,
        };
        let t = closed_form_covariances(&grads, &cfg, 0).unwrap();
        let gl = gaussian_leakage_from_covariances(&t, &cfg, DEFAULT_TOL).unwrap();
        prop_assert!(gl.range_ok);
        prop_assert!((gl.bits - gl.eigen_path_bits).abs() <= 1e-9 * gl.bits.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn discrete_mi_is_bounded(seed in any::<u64>(), n in 3usize..9, scheme in scheme()) {
        let grads = random_gradients(n, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cfg = SamplingConfig {
            n_total: n, n_train: 2, batch_size: 1, n_iters: 1, learning_rate: 0.1, scheme, seed,
        };
        let mi = exact_discrete_mi(&grads, &cfg, 0).unwrap();
        prop_assert!(mi >= 0.0 && mi <= prior_entropy(2, n).unwrap() + 1e-12);
    }

    #[test]
    fn trajectories_replay_and_totals_add_up(seed in any::<u64>(), iters in 1usize..30) {
        let data = line_data(10);
        let cfg = SamplingConfig {
            n_total: 10, n_train: 5, batch_size: 2, n_iters: iters, learning_rate: 0.05,
            scheme: SamplingScheme::WithoutReplacement, seed,
        };
        let traj = train(&cfg, &ModelSpec::linear(1), &data, &mut []).unwrap();
        prop_assert_eq!(replay(&traj), traj.params_per_iter.clone());
        let opts = AuditOptions { cadence: AuditCadence::EveryIteration, ..AuditOptions::default() };
        let rec = audit(&traj, &data, &opts).unwrap();
        for j in 0..10 {
            let sum: f64 = rec.scores.iter().filter(|s| s.example == j).map(|s| s.value).sum();
            prop_assert_eq!(rec.cumulative_gnq[j], sum);
        }
    }

    #[test]
    fn leakage_grows_with_training_length(seed in any::<u64>(), iters in 1usize..20, extra in 1usize..10) {
        let data = line_data(10);
        let opts = AuditOptions { cadence: AuditCadence::EveryIteration, ..AuditOptions::default() };
        let totals = |n_iters: usize| {
            let cfg = SamplingConfig {
                n_total: 10, n_train: 5, batch_size: 2, n_iters, learning_rate: 0.05,
                scheme: SamplingScheme::WithoutReplacement, seed,
            };
            let traj = train(&cfg, &ModelSpec::linear(1), &data, &mut []).unwrap();
            audit(&traj, &data, &opts).unwrap().bounds.iter().map(|b| b.total_bits).collect::<Vec<_>>()
        };
        let short = totals(iters);
        let long = totals(iters + extra);
        for (a, b) in short.iter().zip(&long) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn seeded_init_is_reproducible(seed in any::<u64>(), hidden in 1usize..8) {
        let spec = ModelSpec {
            kind: ModelKind::Mlp, input_dim: 3, hidden_dim: hidden, n_classes: 2,
            init: InitScheme::SeededGaussian { scale: 0.3, seed },
        };
        prop_assert_eq!(spec.init_params(), spec.init_params());
    }

    #[test]
    fn linear_loss_is_nonnegative_and_zero_at_optimum(w in -3.0f64..3.0, b in -3.0f64..3.0, xs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let spec = ModelSpec::linear(1);
        for &x in &xs {
            let e = Example { features: vec![x], target: w * x + b };
            prop_assert!(loss(&spec, &[w, b], &e).unwrap().abs() <= 1e-20);
            prop_assert!(loss(&spec, &[w + 0.5, b], &e).unwrap() >= 0.0);
        }
    }
}

fn line_data(n: usize) -> Dataset {
    let examples = (0..n)
        .map(|i| {
            let x = i as f64 / n as f64;
            Example {
                features: vec![x],
                target: 0.7 * x - 0.2 + 0.05 * ((i * 7919) % 13) as f64,
            }
        })
        .collect();
    Dataset::new("line", examples).unwrap()
}

#[test]
fn gnq_scale_law_on_fixed_instance() {
    let grads = GradientSet::new(0, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let base = gnq_exact(&grads, 2, DEFAULT_TOL).unwrap().value;
    assert_relative_eq!(base, 2.0, max_relative = 1e-12);
}
