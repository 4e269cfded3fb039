use pcp_core::clustering::{kmeans_fit_rows, schedule_cluster_count, unclamped_cluster_count, ScheduleParams};
use pcp_core::evaluation::{cluster_purity, knn_predict, nmi};
use pcp_core::objective::{loss_cluster, loss_instance, QueryStats};
use pcp_core::purification::{filter_unreliable, refine_with_votes, voting_score, AssignmentHistory, PurifyParams};
use pcp_core::{ClusterState, EmbeddingBank};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::brute_knn;

fn bank_strategy(max_rows: usize, max_dim: usize) -> impl Strategy<Value = EmbeddingBank> {
    (1..=max_rows, 1..=max_dim, any::<u64>()).prop_map(|(n, d, seed)| {
        EmbeddingBank::random(n, d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    })
}

fn unit(seed: u64, dim: usize) -> Vec<f32> {
    EmbeddingBank::random(1, dim, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
        .row(0)
        .to_vec()
}

/// Random partition with distances, `k` clusters over `n` samples.
fn state_strategy() -> impl Strategy<Value = ClusterState> {
    (1usize..60, 1usize..8).prop_flat_map(|(n, k)| {
        let k = k.min(n);
        (
            proptest::collection::vec(0..k, n),
            proptest::collection::vec(0.0f64..2.0, n),
        )
            .prop_map(move |(a, d)| ClusterState::from_assignment(k, a, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bank_rows_stay_unit_after_updates(
        seed in any::<u64>(),
        updates in proptest::collection::vec((0usize..20, any::<u64>(), 0.0f64..=1.0), 1..40),
    ) {
        let mut bank = EmbeddingBank::random(20, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (i, s, m) in updates {
            let fresh = unit(s, 6);
            bank.update(i, &fresh, m).unwrap();
        }
        for row in bank.rows() {
            let n: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sims_follow_row_permutation(bank in bank_strategy(80, 8), qseed in any::<u64>(), pseed in any::<u64>()) {
        let q = unit(qseed, bank.dim());
        let mut perm: Vec<usize> = (0..bank.count()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(pseed));
        let rows: Vec<Vec<f32>> = perm.iter().map(|&p| bank.row(p).to_vec()).collect();
        let permuted = EmbeddingBank::from_unit_data(bank.dim(), rows.concat()).unwrap();
        let base = bank.all_sims(&q).unwrap();
        let moved = permuted.all_sims(&q).unwrap();
        for (slot, &p) in perm.iter().enumerate() {
            prop_assert_eq!(moved[slot], base[p]);
        }
    }

    #[test]
    fn schedule_is_monotone_and_bounded(n in 1usize..5000, t in 1usize..300, floor in 1usize..50) {
        let floor = floor.min(n);
        let p = ScheduleParams { total_samples: n, total_epochs: t, floor_clusters: floor };
        let mut prev = usize::MAX;
        for e in 0..=t {
            let k = schedule_cluster_count(&p, e).unwrap();
            prop_assert!(k <= prev && k >= floor && k <= n);
            prev = k;
        }
        prop_assert_eq!(unclamped_cluster_count(&p, 0).unwrap(), n);
        prop_assert!(schedule_cluster_count(&p, t + 1).is_err());
    }

    #[test]
    fn kmeans_assigns_nearest_centroid(seed in any::<u64>(), n in 2usize..120, k in 1usize..10) {
        let k = k.min(n);
        let bank = EmbeddingBank::random(n, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = kmeans_fit_rows(bank.as_slice(), 4, k, seed ^ 7).unwrap();
        let again = kmeans_fit_rows(bank.as_slice(), 4, k, seed ^ 7).unwrap();
        prop_assert_eq!(&s, &again);
        prop_assert!(s.members().iter().all(|m| !m.is_empty()));
        for i in 0..n {
            let x = bank.row(i);
            let d = |c: usize| -> f64 {
                x.iter().zip(s.centroid(c)).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>()
            };
            let own = d(s.assignment[i]);
            for c in 0..k {
                prop_assert!(own <= d(c) + 1e-9);
            }
        }
        let obj = &s.objective_history;
        prop_assert!(obj.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn distance_filter_keeps_more_at_lower_gamma(state in state_strategy(), g1 in 0.0f64..0.99, g2 in 0.0f64..0.99) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let a = filter_unreliable(&state, lo);
        let b = filter_unreliable(&state, hi);
        for (ra, rb) in a.retained.iter().zip(&b.retained) {
            prop_assert!(rb.len() <= ra.len());
            prop_assert!(rb.iter().all(|i| ra.contains(i)));
        }
        prop_assert_eq!(a.retained_count() + a.discarded_count(), state.len());
    }

    #[test]
    fn voting_output_partitions_samples(
        state in state_strategy(),
        gamma in 0.0f64..0.99,
        past in proptest::collection::vec(any::<u64>(), 0..16),
        alpha in 0.05f64..0.95,
    ) {
        let n = state.len();
        let mut history = AssignmentHistory::new(15, n);
        for s in past {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            history.push((0..n).map(|_| rand::Rng::random_range(&mut rng, 0..state.num_clusters)).collect()).unwrap();
        }
        history.push(state.assignment.clone()).unwrap();
        let params = PurifyParams { gamma, alpha, activation_epoch: 0, ..Default::default() };
        let split = filter_unreliable(&state, gamma);
        let labels = refine_with_votes(&split, &state, &history, &params).unwrap();
        prop_assert!(labels.is_partition_of(n));
    }

    #[test]
    fn voting_ignores_cluster_naming(
        n in 2usize..30,
        entries in proptest::collection::vec(any::<u64>(), 1..17),
        shift in 1usize..5,
    ) {
        let mut plain = AssignmentHistory::new(15, n);
        let mut renamed = AssignmentHistory::new(15, n);
        for s in entries {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
            renamed.push(a.iter().map(|&c| (c + shift) % 9).collect()).unwrap();
            plain.push(a).unwrap();
        }
        for i in 0..n {
            prop_assert_eq!(
                voting_score(&plain, i, 0, 0.9).unwrap(),
                voting_score(&renamed, i, 0, 0.9).unwrap()
            );
        }
    }

    #[test]
    fn softmax_sums_to_one(bank in bank_strategy(300, 16), qseed in any::<u64>(), tau in 0.05f64..1.0) {
        let q = unit(qseed, bank.dim());
        let stats = QueryStats::new(&bank, &q, tau).unwrap();
        let total: f64 = (0..bank.count()).map(|i| stats.prob(i)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn singleton_clusters_reduce_to_instance_loss(bank in bank_strategy(50, 8), seed in any::<u64>()) {
        let n = bank.count();
        let ids: Vec<usize> = (0..n).collect();
        let fresh: Vec<Vec<f32>> = (0..n).map(|i| unit(seed.wrapping_add(i as u64), bank.dim())).collect();
        let clusters: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i]).collect();
        let nested: Vec<Vec<Vec<f32>>> = fresh.iter().map(|v| vec![v.clone()]).collect();
        let a = loss_instance(&bank, &ids, &fresh, 0.1).unwrap();
        let b = loss_cluster(&bank, &clusters, &nested, 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn purity_and_nmi_ignore_label_names(
        pairs in proptest::collection::vec((0usize..5, 0usize..4), 2..80),
        shift in 1usize..7,
    ) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a2: Vec<usize> = a.iter().map(|&c| (c * 3 + shift) % 17).collect();
        let b2: Vec<usize> = b.iter().map(|&c| (c + shift) % 11).collect();
        prop_assert!((cluster_purity(&a, &b).unwrap() - cluster_purity(&a2, &b2).unwrap()).abs() < 1e-12);
        let m = nmi(&a, &b).unwrap();
        prop_assert!((m - nmi(&a2, &b2).unwrap()).abs() < 1e-12);
        prop_assert!((m - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&m));
    }

    #[test]
    fn knn_matches_full_sort(
        bank in bank_strategy(120, 6),
        qseed in any::<u64>(),
        k in 1usize..150,
        lseed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(lseed);
        let labels: Vec<usize> = (0..bank.count()).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
        let q = unit(qseed, bank.dim());
        let got = knn_predict(&bank, &labels, 4, &q, k, 0.1).unwrap();
        prop_assert_eq!(got, brute_knn(&bank, &labels, 4, &q, k, 0.1));
    }
}
