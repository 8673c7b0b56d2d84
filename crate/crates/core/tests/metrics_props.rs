use deftag::eval::{compute_metrics, sentence_metrics};
use proptest::prelude::*;

const K: usize = 5;

fn names() -> Vec<String> {
    (0..K).map(|i| format!("L{i}")).collect()
}

fn paired() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    prop::collection::vec(prop::collection::vec((0..K, 0..K), 1..12), 1..8).prop_map(|sents| {
        let gold = sents.iter().map(|s| s.iter().map(|p| p.0).collect()).collect();
        let pred = sents.iter().map(|s| s.iter().map(|p| p.1).collect()).collect();
        (gold, pred)
    })
}

fn relabel(seqs: &[Vec<usize>], perm: &[usize]) -> Vec<Vec<usize>> {
    seqs.iter().map(|s| s.iter().map(|&l| perm[l]).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn relabeling_permutes_scores((gold, pred) in paired(), perm in Just((0..K).collect::<Vec<_>>()).prop_shuffle()) {
        let all: Vec<usize> = (0..K).collect();
        let a = compute_metrics(&gold, &pred, &names(), &all).unwrap();
        let b = compute_metrics(&relabel(&gold, &perm), &relabel(&pred, &perm), &names(), &all).unwrap();
        prop_assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
        prop_assert!((a.macro_recall - b.macro_recall).abs() < 1e-12);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        for l in 0..K {
            prop_assert_eq!(a.labels[l].support, b.labels[perm[l]].support);
            prop_assert!((a.labels[l].f1 - b.labels[perm[l]].f1).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_the_trace_ratio((gold, pred) in paired()) {
        let r = compute_metrics(&gold, &pred, &names(), &[1, 2, 3, 4]).unwrap();
        let total: usize = gold.iter().map(Vec::len).sum();
        let correct: usize = gold.iter().zip(&pred).map(|(g, p)| g.iter().zip(p).filter(|(a, b)| a == b).count()).sum();
        prop_assert!((r.accuracy() - correct as f64 / total as f64).abs() < 1e-12);
        for (row, counts) in r.normalized.iter().zip(&r.confusion) {
            if counts.iter().sum::<u64>() > 0 {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        for s in &r.labels {
            let expected = if s.precision + s.recall == 0.0 { 0.0 } else { 2.0 * s.precision * s.recall / (s.precision + s.recall) };
            prop_assert!((s.f1 - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gold_against_itself_is_perfect((gold, _) in paired()) {
        let all: Vec<usize> = (0..K).collect();
        let r = compute_metrics(&gold, &gold, &names(), &all).unwrap();
        prop_assert_eq!(r.macro_f1, 1.0);
        for &l in &r.macro_labels {
            prop_assert!(r.labels[l].support > 0);
        }
        let absent = (0..K).filter(|&l| r.labels[l].support == 0);
        for l in absent {
            prop_assert_eq!(r.labels[l].f1, 0.0);
            prop_assert!(!r.macro_labels.contains(&l));
        }
    }

    #[test]
    fn sentence_scores_use_the_binary_confusion(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..50)) {
        let gold: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let r = sentence_metrics(&gold, &pred).unwrap();
        let tp = pairs.iter().filter(|p| p.0 && p.1).count() as u64;
        let fp = pairs.iter().filter(|p| !p.0 && p.1).count() as u64;
        let fneg = pairs.iter().filter(|p| p.0 && !p.1).count() as u64;
        prop_assert_eq!(r.confusion[1][1], tp);
        prop_assert_eq!(r.confusion[0][1], fp);
        prop_assert_eq!(r.confusion[1][0], fneg);
    }
}
