//! Randomized invariants over the library's pure functions.

use ndarray::{s, Array2};
use proptest::prelude::*;

use fedgan::aggregation::{coordinate_median, fedavg, krum, krum_scores, trimmed_mean};
use fedgan::data::{
    make_ring_mixture, parse_idx, partition_noniid, serialize_idx, subsample_training_set, IdxSet,
    MixtureSpec, PartitionMode,
};
use fedgan::metrics::{frechet_2d, mode_coverage, proxy_is_from_conditionals, stability};
use fedgan::nn::{
    disc_loss_and_grad, forward, gen_loss_and_grad, init_params, noise_matrix,
    softmax_xent_loss_and_grad, GenLossKind, NetSpec, OutputActivation, WeightVector,
};
use fedgan::stream::{derive_seed, stream, Purpose};

fn weight_set(n: usize, dim: usize) -> impl Strategy<Value = Vec<WeightVector>> {
    proptest::collection::vec(
        proptest::collection::vec(-1e3f64..1e3, dim).prop_map(WeightVector::from_values),
        n,
    )
}

/// A cohort of same-layout vectors together with a permutation of it.
fn set_and_permutation() -> impl Strategy<Value = (Vec<WeightVector>, Vec<usize>)> {
    (1usize..=10, 1usize..=30).prop_flat_map(|(n, dim)| {
        (weight_set(n, dim), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
    })
}

fn apply_perm(ws: &[WeightVector], perm: &[usize]) -> Vec<WeightVector> {
    perm.iter().map(|&i| ws[i].clone()).collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).expect("shape matches"))
}

proptest! {
    #[test]
    fn averaging_rules_stay_within_the_coordinate_envelope(
        ws in (5usize..=10, 1usize..=30).prop_flat_map(|(n, dim)| weight_set(n, dim)),
    ) {
        let dim = ws[0].len();
        let outputs = [
            fedavg(&ws).unwrap(),
            coordinate_median(&ws).unwrap(),
            trimmed_mean(&ws, 1).unwrap(),
            krum(&ws, 1).unwrap(),
        ];
        for out in &outputs {
            for i in 0..dim {
                let lo = ws.iter().map(|w| w.values[i]).fold(f64::INFINITY, f64::min);
                let hi = ws.iter().map(|w| w.values[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.values[i] >= lo - 1e-9 && out.values[i] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn sorting_rules_are_permutation_invariant_bitwise(
        (ws, perm) in set_and_permutation(),
    ) {
        let shuffled = apply_perm(&ws, &perm);
        prop_assert_eq!(
            coordinate_median(&ws).unwrap(),
            coordinate_median(&shuffled).unwrap()
        );
        if ws.len() >= 3 {
            prop_assert_eq!(
                trimmed_mean(&ws, 1).unwrap(),
                trimmed_mean(&shuffled, 1).unwrap()
            );
        }
    }

    #[test]
    fn fedavg_is_permutation_invariant_up_to_rounding(
        (ws, perm) in set_and_permutation(),
    ) {
        let a = fedavg(&ws).unwrap();
        let b = fedavg(&apply_perm(&ws, &perm)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn fedavg_of_one_vector_is_that_vector(
        w in proptest::collection::vec(-1e3f64..1e3, 1..40).prop_map(WeightVector::from_values),
    ) {
        prop_assert_eq!(fedavg(std::slice::from_ref(&w)).unwrap(), w);
    }

    #[test]
    fn trimming_nothing_matches_fedavg(
        ws in (1usize..=10, 1usize..=30).prop_flat_map(|(n, dim)| weight_set(n, dim)),
    ) {
        let plain = fedavg(&ws).unwrap();
        let trimmed = trimmed_mean(&ws, 0).unwrap();
        for (x, y) in plain.values.iter().zip(&trimmed.values) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn krum_choice_is_permutation_invariant_when_scores_are_distinct(
        (ws, perm) in (5usize..=9, 1usize..=20).prop_flat_map(|(n, dim)| {
            (weight_set(n, dim), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        }),
    ) {
        let scores = krum_scores(&ws, 1).unwrap();
        for i in 0..scores.len() {
            for j in (i + 1)..scores.len() {
                prop_assume!(scores[i] != scores[j]);
            }
        }
        prop_assert_eq!(krum(&ws, 1).unwrap(), krum(&apply_perm(&ws, &perm), 1).unwrap());
    }
}

proptest! {
    #[test]
    fn partitions_are_disjoint_exhaustive_and_nonempty(
        (n_clients, n) in (1usize..=10).prop_flat_map(|k| (Just(k), k.max(8)..150)),
        seed in any::<u64>(),
        alpha in proptest::option::of(0.05f64..5.0),
    ) {
        let mixture = MixtureSpec { seed, ..MixtureSpec::default() };
        let t = make_ring_mixture(&mixture, n).unwrap();
        let mode = match alpha {
            Some(alpha) => PartitionMode::LabelSkew { alpha },
            None => PartitionMode::Fractions,
        };
        let p = partition_noniid(&t, n_clients, mode, seed).unwrap();

        prop_assert_eq!(p.client_shards.len(), n_clients);
        let mut seen = vec![false; n];
        for shard in &p.client_shards {
            prop_assert!(!shard.is_empty());
            for &i in shard {
                prop_assert!(!seen[i], "index {} assigned twice", i);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s), "some index never assigned");

        let total: f64 = p.fractions.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "fractions sum to {}", total);

        let again = partition_noniid(&t, n_clients, mode, seed).unwrap();
        prop_assert_eq!(p.client_shards, again.client_shards);
    }

    #[test]
    fn subsample_is_deterministic_and_sized(
        (n, t_size) in (8usize..100).prop_flat_map(|n| (Just(n), 1..=n)),
        seed in any::<u64>(),
    ) {
        let mixture = MixtureSpec { seed: seed ^ 1, ..MixtureSpec::default() };
        let d = make_ring_mixture(&mixture, n).unwrap();
        let a = subsample_training_set(&d, t_size, seed).unwrap();
        let b = subsample_training_set(&d, t_size, seed).unwrap();
        prop_assert_eq!(a.len(), t_size);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ring_mixture_is_deterministic_with_in_range_labels(
        (mode_count, n) in (1usize..=10).prop_flat_map(|m| (Just(m), m..120)),
        seed in any::<u64>(),
    ) {
        let mixture = MixtureSpec { mode_count, seed, ..MixtureSpec::default() };
        let a = make_ring_mixture(&mixture, n).unwrap();
        let b = make_ring_mixture(&mixture, n).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.labels.iter().all(|&y| y < mode_count));
    }

    #[test]
    fn idx_serialization_round_trips(
        set in (1usize..=5, 1usize..=5, 0usize..=10).prop_flat_map(|(rows, cols, count)| {
            (
                proptest::collection::vec(
                    proptest::collection::vec(any::<u8>(), rows * cols),
                    count,
                ),
                proptest::collection::vec(0u8..10, count),
            )
                .prop_map(move |(images, labels)| IdxSet { images, rows, cols, labels })
        }),
    ) {
        let (image_bytes, label_bytes) = serialize_idx(&set);
        prop_assert_eq!(parse_idx(&image_bytes, &label_bytes).unwrap(), set);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_bitwise_pure(
        seed in any::<u64>(),
        hidden in 1usize..=6,
        batch in (1usize..=8, 1usize..=4).prop_flat_map(|(n, d)| {
            (matrix(n, d), Just(d))
        }),
    ) {
        let (batch, d) = batch;
        let spec = NetSpec::new(vec![d, hidden, 2], OutputActivation::Tanh).unwrap();
        let w = init_params(&spec, seed);
        let a = forward(&spec, &w, &batch).unwrap();
        let b = forward(&spec, &w, &batch).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn weight_layout_round_trips(
        seed in any::<u64>(),
        sizes in proptest::collection::vec(1usize..=6, 2..=4),
    ) {
        let spec = NetSpec::new(sizes, OutputActivation::Sigmoid).unwrap();
        let w = init_params(&spec, seed);
        let owned: Vec<(Array2<f64>, Vec<f64>)> = w
            .layers(&spec)
            .unwrap()
            .into_iter()
            .map(|(weights, biases)| (weights.to_owned(), biases.to_vec()))
            .collect();
        prop_assert_eq!(WeightVector::from_layers(&spec, &owned).unwrap(), w);
    }

    #[test]
    fn loss_signs_match_their_definitions(
        seed in any::<u64>(),
        n_real in 1usize..=6,
        n_fake in 1usize..=6,
    ) {
        let spec_g = NetSpec::new(vec![3, 5, 2], OutputActivation::Tanh).unwrap();
        let spec_d = NetSpec::new(vec![2, 5, 1], OutputActivation::Sigmoid).unwrap();
        let w_g = init_params(&spec_g, seed);
        let w_d = init_params(&spec_d, seed ^ 7);

        let real = noise_matrix(n_real, 2, &mut stream(seed, Purpose::Data, &[1]));
        let fake = noise_matrix(n_fake, 2, &mut stream(seed, Purpose::Data, &[2]));
        let noise = noise_matrix(n_fake, 3, &mut stream(seed, Purpose::Noise, &[3]));

        let (disc, _) = disc_loss_and_grad(&spec_d, &w_d, &real, &fake).unwrap();
        prop_assert!(disc >= 0.0);

        let (ns, _) =
            gen_loss_and_grad(&spec_g, &spec_d, &w_g, &w_d, &noise, GenLossKind::NonSaturating)
                .unwrap();
        prop_assert!(ns >= 0.0);

        let (mm, _) =
            gen_loss_and_grad(&spec_g, &spec_d, &w_g, &w_d, &noise, GenLossKind::Minimax)
                .unwrap();
        prop_assert!(mm <= 0.0);

        let spec_c = NetSpec::new(vec![2, 5, 4], OutputActivation::Softmax).unwrap();
        let w_c = init_params(&spec_c, seed ^ 13);
        let labels: Vec<usize> = (0..n_real).map(|i| i % 4).collect();
        let (xent, _) = softmax_xent_loss_and_grad(&spec_c, &w_c, &real, &labels).unwrap();
        prop_assert!(xent >= 0.0);
    }
}

proptest! {
    #[test]
    fn proxy_is_lies_between_one_and_class_count(
        probs in (1usize..=40, 2usize..=10).prop_flat_map(|(n, k)| {
            proptest::collection::vec(1e-6f64..1.0, n * k)
                .prop_map(move |v| {
                    let mut m = Array2::from_shape_vec((n, k), v).expect("shape matches");
                    for mut row in m.rows_mut() {
                        let total: f64 = row.iter().sum();
                        row.mapv_inplace(|p| p / total);
                    }
                    m
                })
        }),
    ) {
        let k = probs.ncols() as f64;
        let is = proxy_is_from_conditionals(&probs).unwrap();
        prop_assert!(is >= 1.0 - 1e-9, "{is}");
        prop_assert!(is <= k + 1e-9, "{is} over {k}");
    }

    #[test]
    fn frechet_is_symmetric_nonnegative_and_zero_on_self(
        a in (2usize..=40).prop_flat_map(|n| matrix(n, 2)),
        b in (2usize..=40).prop_flat_map(|n| matrix(n, 2)),
    ) {
        let ab = frechet_2d(&a, &b).unwrap();
        let ba = frechet_2d(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()), "{ab} vs {ba}");
        let aa = frechet_2d(&a, &a).unwrap();
        prop_assert!((0.0..=1e-9).contains(&aa), "{aa}");
    }

    #[test]
    fn mode_coverage_grows_with_nested_sample_sets(
        (samples, m) in (2usize..=60).prop_flat_map(|n| (matrix(n, 2), 0..=n)),
        min_count in 1usize..=3,
    ) {
        let mixture = MixtureSpec::default();
        let prefix = samples.slice(s![..m, ..]).to_owned();
        prop_assert!(
            mode_coverage(&prefix, &mixture, min_count)
                <= mode_coverage(&samples, &mixture, min_count)
        );
    }

    #[test]
    fn stability_ignores_translation(
        xs in proptest::collection::vec(-1e3f64..1e3, 1..20),
        c in -1e3f64..1e3,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let a = stability(&xs).unwrap();
        let b = stability(&shifted).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn derived_streams_are_reproducible_and_tag_sensitive(
        root in any::<u64>(),
        tags in proptest::collection::vec(any::<u64>(), 0..4),
    ) {
        prop_assert_eq!(derive_seed(root, &tags), derive_seed(root, &tags));

        let a = noise_matrix(4, 3, &mut stream(root, Purpose::Noise, &tags));
        let b = noise_matrix(4, 3, &mut stream(root, Purpose::Noise, &tags));
        prop_assert_eq!(&a, &b);

        let other = noise_matrix(4, 3, &mut stream(root, Purpose::Eval, &tags));
        prop_assert_ne!(&a, &other);
    }
}
