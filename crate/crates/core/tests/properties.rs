use hiertail::dataset::{
    assign_groups, compute_stats, generate_synthetic, Group, GroupAssignment, GroupThresholds, SynthConfig,
};
use hiertail::eval::{average_precision, evaluate_scores};
use hiertail::hierarchy::{HierarchyNode, HierarchyTree};
use hiertail::losses::{bce_multilabel, ics_bce, mlmc_loss, MlmcWeights};
use hiertail::sampling::{compute_delta, DeltaTransform};
use ndarray::Array2;
use proptest::prelude::*;

/// Label matrix with every row and every column holding at least one positive.
fn labels(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<u8>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(n, k)| {
        proptest::collection::vec(any::<bool>(), n * k).prop_map(move |bits| {
            let mut y = Array2::from_shape_fn((n, k), |(i, j)| u8::from(bits[i * k + j]));
            for i in 0..n {
                if y.row(i).iter().all(|&v| v == 0) {
                    y[[i, i % k]] = 1;
                }
            }
            for j in 0..k {
                if y.column(j).iter().all(|&v| v == 0) {
                    y[[j % n, j]] = 1;
                }
            }
            y
        })
    })
}

fn logits_for(y: &Array2<u8>) -> impl Strategy<Value = Array2<f64>> {
    let dim = y.dim();
    proptest::collection::vec(-8.0..8.0f64, dim.0 * dim.1).prop_map(move |v| Array2::from_shape_vec(dim, v).unwrap())
}

/// Interleaved or blocked three-level tree over `k` leaves.
fn tree(k: usize, mid: usize, top: usize, blocked: bool) -> HierarchyTree {
    let mid = mid.clamp(1, k);
    let top = top.clamp(1, mid);
    if blocked {
        HierarchyTree::blocked(k, &[mid, top]).unwrap()
    } else {
        HierarchyTree::interleaved(k, &[mid, top]).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn node_order_does_not_change_hierarchy(k in 2usize..20, mid in 1usize..10, top in 1usize..5, blocked: bool, seed: u64) {
        let t = tree(k, mid, top, blocked);
        let mut nodes: Vec<HierarchyNode> = t.nodes().to_vec();
        // Deterministic shuffle of node order and parent lists.
        let mut state = seed | 1;
        for i in (1..nodes.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            nodes.swap(i, (state % (i as u64 + 1)) as usize);
        }
        for n in &mut nodes {
            n.parents.reverse();
        }
        let back = HierarchyTree::from_nodes(t.levels(), nodes).unwrap();
        prop_assert_eq!(back.to_json(), t.to_json());
        for m in 1..=t.levels() {
            prop_assert_eq!(back.aggregation(m), t.aggregation(m));
        }
    }

    #[test]
    fn derived_labels_are_or_over_descendants(bits in proptest::collection::vec(any::<bool>(), 18), mid in 1usize..10, top in 1usize..5, blocked: bool) {
        let t = tree(18, mid, top, blocked);
        let leaf: Vec<u8> = bits.iter().map(|&b| u8::from(b)).collect();
        let derived = t.derive_level_labels(&leaf).unwrap();
        for m in 2..=t.levels() {
            for (pos, &id) in t.level_ids(m).iter().enumerate() {
                let want = t.descendant_leaves(id).unwrap().iter().any(|&l| leaf[l] == 1);
                prop_assert_eq!(derived[m - 2][pos], u8::from(want));
            }
        }
    }

    #[test]
    fn delta_bounded_and_unit_on_single_label_rows(y in labels(40, 10)) {
        let d = compute_delta(y.view()).unwrap();
        for ((i, j), &v) in d.delta.indexed_iter() {
            prop_assert!(v > 0.0 && v <= 1.0, "delta[{i},{j}] = {v}");
            let positives = y.row(i).iter().filter(|&&b| b != 0).count();
            if positives == 1 && y[[i, j]] == 1 {
                prop_assert_eq!(v, 1.0);
                prop_assert_eq!(d.sqrt_delta[[i, j]], 1.0);
            }
        }
    }

    #[test]
    fn losses_non_negative((y, z) in labels(12, 12).prop_flat_map(|y| { let z = logits_for(&y); (Just(y), z) })) {
        prop_assert!(bce_multilabel(z.view(), y.view(), None).unwrap().value >= 0.0);
        let delta = compute_delta(y.view()).unwrap().delta;
        prop_assert!(ics_bce(z.view(), y.view(), delta.view(), DeltaTransform::Sqrt).unwrap().value >= 0.0);
        let k = y.ncols();
        let t = tree(k, (k / 2).max(1), 2, false);
        let r = mlmc_loss(z.view(), y.view(), &t, MlmcWeights::default()).unwrap();
        prop_assert!(r.value >= 0.0);
        prop_assert!(r.per_level_values.unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mirror_tree_doubles_bce((y, z) in labels(12, 12).prop_flat_map(|y| { let z = logits_for(&y); (Just(y), z) })) {
        let k = y.ncols();
        let t = HierarchyTree::interleaved(k, &[k]).unwrap();
        let bce = bce_multilabel(z.view(), y.view(), None).unwrap();
        let mlmc = mlmc_loss(z.view(), y.view(), &t, MlmcWeights::default()).unwrap();
        prop_assert!((mlmc.value - 2.0 * bce.value).abs() <= 1e-12 * (1.0 + bce.value));
        let diff = (&mlmc.dlogits - &(&bce.dlogits * 2.0)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        prop_assert!(diff <= 1e-15);
    }

    #[test]
    fn ics_with_unit_delta_is_bce((y, z) in labels(12, 12).prop_flat_map(|y| { let z = logits_for(&y); (Just(y), z) })) {
        let ones = Array2::<f64>::ones(y.dim());
        let bce = bce_multilabel(z.view(), y.view(), None).unwrap();
        for transform in [DeltaTransform::Sqrt, DeltaTransform::Square] {
            let ics = ics_bce(z.view(), y.view(), ones.view(), transform).unwrap();
            prop_assert_eq!(ics.value, bce.value);
            prop_assert_eq!(&ics.dlogits, &bce.dlogits);
        }
    }

    #[test]
    fn ap_invariant_under_monotone_transform(pairs in proptest::collection::vec((0u8..40, any::<bool>()), 1..80)) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 7.0).exp() - 3.0).collect();
        prop_assert_eq!(average_precision(&scores, &labels), average_precision(&mapped, &labels));
    }

    #[test]
    fn single_class_group_map_is_its_ap(y in labels(30, 3), raw in proptest::collection::vec(0.0..1.0f64, 90)) {
        let (n, k) = y.dim();
        let scores = Array2::from_shape_fn((n, k), |(i, j)| raw[(i * k + j) % raw.len()]);
        let mut group_of_class = vec![Group::Many; k];
        group_of_class[0] = Group::Few;
        let groups = GroupAssignment { group_of_class, thresholds: GroupThresholds::default() };
        let report = evaluate_scores(scores.view(), y.view(), &groups).unwrap();
        let col: Vec<f64> = scores.column(0).to_vec();
        let lab: Vec<u8> = y.column(0).to_vec();
        prop_assert_eq!(report.group_map.few, average_precision(&col, &lab));
    }

    #[test]
    fn stats_invariant_under_row_permutation(y in labels(40, 8), seed: u64) {
        let n = y.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, ((state >> 33) % (i as u64 + 1)) as usize);
        }
        let permuted = y.select(ndarray::Axis(0), &order);
        let a = compute_stats(y.view()).unwrap();
        let b = compute_stats(permuted.view()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn groups_monotone_in_count(counts in proptest::collection::vec(1usize..500, 1..30), few in 1usize..50, gap in 1usize..200) {
        let thresholds = GroupThresholds { many: few + gap, few };
        let g = assign_groups(&counts, thresholds).unwrap();
        for a in 0..counts.len() {
            for b in 0..counts.len() {
                if counts[a] <= counts[b] {
                    // Many < Medium < Few in the derived order.
                    prop_assert!(g.group_of_class[a] >= g.group_of_class[b]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_covers_every_class_in_every_split(seed: u64, k in 4usize..12, rho in 2.0..60.0f64, cooccur in 0.0..0.6f64) {
        let cfg = SynthConfig {
            n: 1500,
            k,
            d: 8,
            target_rho: rho,
            cooccur_rate: cooccur,
            tree: HierarchyTree::interleaved(k, &[(k / 3).max(1)]).unwrap(),
            seed,
            noise_sigma: 1.0,
        };
        let (train, val, test) = generate_synthetic(&cfg).unwrap();
        for split in [&train, &val, &test] {
            prop_assert!(split.class_counts().iter().all(|&c| c > 0), "{:?}", split.class_counts());
        }
    }
}
