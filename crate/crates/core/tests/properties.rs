use std::collections::BTreeSet;

use owsgg_core::mapping::{score_candidates, softmax, ScoringParams, Similarity};
use owsgg_core::metrics::{match_triplets, recall_at_k, MatchConfig};
use owsgg_core::model::{Averaging, EvalConfig};
use owsgg_core::refine::{
    fuse, geometric_gate, semantic_matrix, top_k_pairs, CandidatePair, LabelPairScores, SquareMatrix,
};
use owsgg_core::relation::{assemble_triplets, scaled_coordinate, DirectedPredicate, PairOutcome, PredicateCandidate};
use owsgg_core::taxonomy::{classify_triplet, is_ovdr, SplitLabel};
use owsgg_core::{
    BoundingBox, Direction, GroundTruthGraph, GtRelation, ImageRef, ObjectInstance, Task, TripletPrediction,
    VocabularyProfile,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sims(cosines: &[f64]) -> Vec<Similarity> {
    cosines.iter().enumerate().map(|(vocab_index, &cosine)| Similarity { vocab_index, cosine }).collect()
}

fn scored(s: &[Similarity], params: ScoringParams) -> Vec<(usize, f64)> {
    score_candidates::<()>(s, params).unwrap().into_iter().map(|c| (c.vocab_index, c.score)).collect()
}

fn inst(index: usize, label: &str) -> ObjectInstance {
    let x = index as f64 * 10.0;
    ObjectInstance {
        index,
        label: label.into(),
        bbox: BoundingBox::new(x, 0.0, x + 5.0, 5.0).unwrap(),
        det_score: 1.0,
        origin: Some(index),
    }
}

const LABELS: [&str; 4] = ["cup", "dog", "hat", "tree"];
const PREDICATES: [&str; 3] = ["on", "near", "has"];

proptest! {
    #[test]
    fn candidate_scoring_ignores_input_order(
        cosines in prop::collection::vec(-1.0f64..1.0, 1..20),
        seed in any::<u64>(),
        k in 1usize..4,
    ) {
        let params = ScoringParams { k, ..ScoringParams::default() };
        let s = sims(&cosines);
        let mut shuffled = s.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (scored(&s, params), scored(&shuffled, params));
        // the softmax sum changes order, so scores may differ in the last bit
        prop_assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), b.iter().map(|x| x.0).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn retained_candidates_sit_near_the_maximum(cosines in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let params = ScoringParams::default();
        let probs = softmax(cosines.iter().copied(), params.tau);
        let best = probs.iter().copied().fold(f64::MIN, f64::max);
        let kept = scored(&sims(&cosines), params);
        prop_assert!(!kept.is_empty() && kept.len() <= params.k);
        prop_assert_eq!(kept[0].1, best);
        for w in kept.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
        for &(_, p) in &kept {
            prop_assert!(best - p < params.delta);
        }
    }

    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-1.0f64..1.0, 1..30), tau in 0.01f64..5.0) {
        let p = softmax(values.iter().copied(), tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn cold_temperature_keeps_only_the_argmax(mut cosines in prop::collection::vec(-1.0f64..0.9, 1..20), at in any::<prop::sample::Index>()) {
        let top = at.index(cosines.len());
        cosines[top] = 0.95;
        let kept = scored(&sims(&cosines), ScoringParams { tau: 1e-3, delta: 0.05, k: 2 });
        prop_assert_eq!(kept.len(), 1);
        prop_assert_eq!(kept[0].0, top);
        prop_assert!(kept[0].1 > 1.0 - 1e-9);
    }

    #[test]
    fn gate_decreases_with_distance(a in 0.0f64..3.0, b in 0.0f64..3.0, tau in 0.0f64..2.0, beta in 0.1f64..20.0) {
        let (near, far) = (a.min(b), a.max(b));
        prop_assert!(geometric_gate(near, tau, beta) >= geometric_gate(far, tau, beta));
        prop_assert!((geometric_gate(tau, tau, beta) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fusion_is_monotone_in_each_input(
        p1 in 0.01f64..1.0, p2 in 0.01f64..1.0, g in 0.01f64..1.0, alpha in 0.0f64..=1.0,
    ) {
        let (lo, hi) = (p1.min(p2), p1.max(p2));
        prop_assert!(fuse(lo, g, alpha).unwrap() <= fuse(hi, g, alpha).unwrap());
        prop_assert!(fuse(g, lo, alpha).unwrap() <= fuse(g, hi, alpha).unwrap());
    }

    #[test]
    fn top_k_is_the_best_unordered_pairs(
        values in prop::collection::vec(-5.0f64..0.0, 0..45),
        k in 0usize..30,
    ) {
        let mut n = 0;
        while (n + 1) * n / 2 <= values.len() {
            n += 1;
        }
        let mut m = SquareMatrix::filled(n, 0.0);
        let mut v = values.iter().copied();
        for i in 0..n {
            for j in i + 1..n {
                m.set_sym(i, j, v.next().unwrap_or(-1.0));
            }
        }
        let picked = top_k_pairs(&m, k);
        prop_assert_eq!(picked.len(), k.min(n * n.saturating_sub(1) / 2));
        let chosen: BTreeSet<_> = picked.iter().copied().collect();
        prop_assert_eq!(chosen.len(), picked.len());
        let worst_kept = picked.iter().map(|&(i, j)| m.get(i, j)).fold(f64::INFINITY, f64::min);
        for i in 0..n {
            for j in i + 1..n {
                if !chosen.contains(&(i, j)) {
                    prop_assert!(m.get(i, j) <= worst_kept);
                }
            }
        }
        for &(i, j) in &picked {
            prop_assert!(i < j);
        }
    }

    #[test]
    fn semantic_broadcast_follows_instance_permutation(
        labels in prop::collection::vec(0usize..4, 2..8),
        scores in prop::collection::vec(1u8..=5, 16),
        seed in any::<u64>(),
    ) {
        let mut table = LabelPairScores::new();
        for a in 0..4 {
            for b in a..4 {
                table.insert(LABELS[a], LABELS[b], scores[a * 4 + b]);
            }
        }
        let insts: Vec<ObjectInstance> = labels.iter().enumerate().map(|(i, &l)| inst(i, LABELS[l])).collect();
        let n = insts.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<ObjectInstance> = perm.iter().map(|&p| insts[p].clone()).collect();
        let m = semantic_matrix(&table, &insts).unwrap();
        let mp = semantic_matrix(&table, &permuted).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(mp.get(i, j), m.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn split_labels_match_their_definitions(
        train_obj in prop::collection::vec(any::<bool>(), 4),
        train_rel in prop::collection::vec(any::<bool>(), 3),
        s in 0usize..4, o in 0usize..4, r in 0usize..3,
        listed in any::<bool>(),
    ) {
        let to: Vec<&str> = LABELS.iter().zip(&train_obj).filter(|(_, &t)| t).map(|(l, _)| *l).collect();
        let tr: Vec<&str> = PREDICATES.iter().zip(&train_rel).filter(|(_, &t)| t).map(|(l, _)| *l).collect();
        let triplets: Vec<[&str; 3]> =
            if listed && train_obj[s] && train_obj[o] && train_rel[r] { vec![[LABELS[s], LABELS[o], PREDICATES[r]]] } else { vec![] };
        let vocab = VocabularyProfile::new(&LABELS, &PREDICATES, &to, &tr, &triplets).unwrap();
        let label = classify_triplet(LABELS[s], LABELS[o], PREDICATES[r], &vocab).unwrap();
        let swapped = classify_triplet(LABELS[o], LABELS[s], PREDICATES[r], &vocab).unwrap();
        let novel_objects = usize::from(!train_obj[s]) + usize::from(!train_obj[o]);
        let expected = match (novel_objects, train_rel[r]) {
            (0, true) if !triplets.is_empty() => SplitLabel::Cs,
            (0, true) => SplitLabel::Zs,
            (0, false) => SplitLabel::Ovr,
            (2, true) => SplitLabel::Ovd,
            (2, false) => SplitLabel::Ow,
            _ => SplitLabel::Mixed,
        };
        prop_assert_eq!(label, expected);
        prop_assert_eq!(is_ovdr(label), matches!(label, SplitLabel::Ovd | SplitLabel::Ovr | SplitLabel::Ow));
        // only the exact-triplet check depends on direction
        if !matches!(label, SplitLabel::Cs | SplitLabel::Zs) {
            prop_assert_eq!(swapped, label);
        }
    }

    #[test]
    fn recall_grows_with_k_and_ignores_duplicates(
        rels in prop::collection::btree_set((0usize..4, 0usize..4, 0usize..3), 1..10),
        preds in prop::collection::vec((0usize..4, 0usize..4, 0usize..3), 0..20),
        dup in any::<prop::sample::Index>(),
    ) {
        let image = ImageRef::new("i", "i.jpg", 100, 100).unwrap();
        let objects: Vec<(String, BoundingBox)> = (0..4).map(|i| (LABELS[i].to_string(), inst(i, LABELS[i]).bbox)).collect();
        let relations: Vec<GtRelation> = rels
            .iter()
            .filter(|(s, o, _)| s != o)
            .map(|&(s, o, p)| GtRelation { subject: s, object: o, predicate: PREDICATES[p].into() })
            .collect();
        prop_assume!(!relations.is_empty());
        let gt = GroundTruthGraph::new(image, objects, relations).unwrap();
        let triplet = |&(s, o, p): &(usize, usize, usize)| TripletPrediction {
            subject: gt.objects[s].clone(),
            object: gt.objects[o].clone(),
            predicate: PREDICATES[p].into(),
            score: 1.0,
            pair_id: 1,
            direction: Direction::Forward,
            raw_sentence: String::new(),
        };
        let list: Vec<TripletPrediction> = preds.iter().map(triplet).collect();
        let ks = [1, 2, 5, 10, 20, 50];
        let eval = EvalConfig { ks: ks.to_vec(), ..EvalConfig::default() };
        let cfg = MatchConfig::new(Task::Predcls, &eval).unwrap();
        let base = recall_at_k(&[match_triplets(&list, &gt, &cfg)], &ks, Averaging::Macro).unwrap();
        let values: Vec<f64> = base.values().copied().collect();
        for w in values.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        if !list.is_empty() {
            let at = dup.index(list.len());
            let mut doubled = list.clone();
            doubled.insert(at + 1, list[at].clone());
            let again = recall_at_k(&[match_triplets(&doubled, &gt, &cfg)], &ks, Averaging::Macro).unwrap();
            for k in ks {
                prop_assert!(again[&k] <= base[&k], "k={}: {} > {}", k, again[&k], base[&k]);
            }
        }
    }

    #[test]
    fn scaled_coordinates_round_trip(fraction in 0.0005f64..=1.0) {
        let c = scaled_coordinate(fraction);
        prop_assert!((1..=1000).contains(&c));
        prop_assert!((c as f64 / 1000.0 - fraction).abs() <= 0.0005 + 1e-12);
    }

    #[test]
    fn at_most_two_triplets_per_pair(
        outcomes in prop::collection::vec((0usize..5, 1usize..5, any::<bool>(), any::<bool>(), -3.0f64..0.0), 0..12),
    ) {
        let insts: Vec<ObjectInstance> = (0..10).map(|i| inst(i, LABELS[i % 4])).collect();
        let directed = |on: bool| {
            on.then(|| DirectedPredicate {
                sentence: "x".into(),
                predicate: PredicateCandidate { phrase: "on".into(), mapped: "on".into(), map_score: 0.9 },
            })
        };
        let pairs: Vec<PairOutcome> = outcomes
            .iter()
            .enumerate()
            .map(|(id, &(i, gap, f, r, fused))| PairOutcome {
                pair_id: id + 1,
                pair: CandidatePair { i, j: i + gap, fused_score: fused, semantic_score: 1.0, geometric_score: 1.0 },
                forward: directed(f),
                reverse: directed(r),
            })
            .collect();
        let triplets = assemble_triplets(&pairs, &insts);
        let expected: usize = outcomes.iter().map(|&(_, _, f, r, _)| usize::from(f) + usize::from(r)).sum();
        prop_assert_eq!(triplets.len(), expected);
        prop_assert!(triplets.len() <= 2 * pairs.len());
        for w in triplets.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }
}
