use cleargcd_core::eval::{hungarian_accuracy, max_weight_assignment};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best total weight over all `n!` permutations (Heap's algorithm).
fn brute_best(w: &[i64], n: usize) -> i64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let score = |p: &[usize]| (0..n).map(|i| w[i * n + p[i]]).sum::<i64>();
    let mut best = score(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let k = rng.random_range(1..=6usize);
        let n = rng.random_range(0..60usize);
        let truths: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut counts = vec![0i64; k * k];
        for (&p, &t) in preds.iter().zip(&truths) {
            counts[p * k + t] += 1;
        }
        let rep = hungarian_accuracy(&preds, &truths, &[], k).unwrap();
        assert_eq!(rep.matched_all as i64, brute_best(&counts, k));
        // the returned assignment is a bijection achieving that count
        let mut seen = vec![false; k];
        for &c in &rep.assignment {
            assert!(!seen[c]);
            seen[c] = true;
        }
        let achieved: i64 = (0..k).map(|i| counts[i * k + rep.assignment[i]]).sum();
        assert_eq!(achieved, rep.matched_all as i64);
    }
}

#[test]
fn raw_weights_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let n = rng.random_range(1..=6usize);
        let w: Vec<i64> = (0..n * n).map(|_| rng.random_range(-50..50)).collect();
        let a = max_weight_assignment(&w, n);
        let got: i64 = (0..n).map(|i| w[i * n + a[i]]).sum();
        assert_eq!(got, brute_best(&w, n));
    }
}

proptest! {
    #[test]
    fn relabeling_clusters_changes_nothing(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 0..80),
        shift in 0usize..5,
        known in prop::collection::btree_set(0usize..5, 0..5),
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truths: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let known: Vec<usize> = known.into_iter().collect();
        let moved: Vec<usize> = preds.iter().map(|p| (p * 3 + shift) % 5).collect();
        let a = hungarian_accuracy(&preds, &truths, &known, 5).unwrap();
        let b = hungarian_accuracy(&moved, &truths, &known, 5).unwrap();
        prop_assert_eq!(a.matched_all, b.matched_all);
        prop_assert!(a.is_consistent());
        prop_assert!(b.is_consistent());
        prop_assert_eq!(a.n_old + a.n_new, pairs.len());
    }
}
