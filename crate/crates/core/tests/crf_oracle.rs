//! Linear-chain CRF against exhaustive enumeration and finite differences.

use deftag::crf::{log_partition, nll_and_gradient, sequence_score, viterbi_decode, CrfParameters};
use deftag::linalg::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn all_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..k).map(move |c| {
                    let mut next = prefix.clone();
                    next.push(c);
                    next
                })
            })
            .collect();
    }
    out
}

/// Scores written out from the pair definition, without the library.
fn oracle_score(x: &Matrix, y: &[usize], p: &CrfParameters) -> f64 {
    let k = p.num_labels();
    let mut prev = k;
    let mut total = 0.0;
    for (i, &cur) in y.iter().enumerate() {
        let base = (prev * k + cur) * p.dim();
        for d in 0..p.dim() {
            total += p.weight.data[base + d] * x.row(i)[d];
        }
        total += p.bias.data[prev * k + cur];
        prev = cur;
    }
    total
}

/// Best sequence, ties going to the lower label at the last position and
/// then at each earlier position in turn.
fn oracle_argmax(x: &Matrix, p: &CrfParameters) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for y in all_sequences(x.rows, p.num_labels()) {
        let s = oracle_score(x, &y, p);
        let better = match &best {
            None => true,
            Some((bs, by)) => s > *bs || (s == *bs && y.iter().rev().lt(by.iter().rev())),
        };
        if better {
            best = Some((s, y));
        }
    }
    best.unwrap().1
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, scale: f64) -> (Matrix, CrfParameters) {
    let mut p = CrfParameters::zeros(k, d);
    for v in p.weight.data.iter_mut().chain(p.bias.data.iter_mut()) {
        *v = rng.gen_range(-scale..scale);
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (Matrix::from_rows(&rows), p)
}

#[test]
fn partition_and_decoding_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=5);
        let d = rng.gen_range(1..=8);
        let (x, p) = random_instance(&mut rng, n, k, d, 1.5);
        let scores: Vec<f64> = all_sequences(n, k).iter().map(|y| oracle_score(&x, y, &p)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let brute = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let log_z = log_partition(&x, &p).unwrap();
        assert!((log_z - brute).abs() <= 1e-8, "{log_z} vs {brute}");
        let prob_mass: f64 = scores.iter().map(|s| (s - log_z).exp()).sum();
        assert!((prob_mass - 1.0).abs() <= 1e-8);
        assert_eq!(viterbi_decode(&x, &p).unwrap(), oracle_argmax(&x, &p));
    }
}

#[test]
fn integer_scores_exercise_the_tie_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tied = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=5);
        let k = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=3);
        let mut p = CrfParameters::zeros(k, d);
        for v in p.weight.data.iter_mut().chain(p.bias.data.iter_mut()) {
            *v = rng.gen_range(-1..=1) as f64;
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0..=1) as f64).collect())
            .collect();
        let x = Matrix::from_rows(&rows);
        let scores: Vec<f64> = all_sequences(n, k).iter().map(|y| oracle_score(&x, y, &p)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if scores.iter().filter(|&&s| s == max).count() > 1 {
            tied += 1;
        }
        assert_eq!(viterbi_decode(&x, &p).unwrap(), oracle_argmax(&x, &p));
    }
    assert!(tied > 50, "only {tied} instances had tied maxima");
}

#[test]
fn zero_parameters_decode_to_label_zero() {
    let p = CrfParameters::zeros(4, 3);
    let x = Matrix::from_rows(&vec![vec![0.3, -0.2, 0.9]; 5]);
    assert_eq!(viterbi_decode(&x, &p).unwrap(), vec![0; 5]);
    assert!((log_partition(&x, &p).unwrap() - 5.0 * 4f64.ln()).abs() < 1e-12);
}

fn central(f: &mut dyn FnMut(f64) -> f64, eps: f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-3)
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, p) = random_instance(&mut rng, 4, 3, 5, 0.8);
    let y = vec![2, 0, 1, 1];
    let nll = |x: &Matrix, p: &CrfParameters| log_partition(x, p).unwrap() - sequence_score(x, &y, p).unwrap();
    let g = nll_and_gradient(&x, &y, &p).unwrap();
    assert!((g.loss - nll(&x, &p)).abs() < 1e-12);
    let eps = 1e-5;
    for i in 0..p.weight.len() {
        let numeric = central(
            &mut |h| {
                let mut q = p.clone();
                q.weight.data[i] += h;
                nll(&x, &q)
            },
            eps,
        );
        assert!(close(g.params.weight.data[i], numeric), "W[{i}]");
    }
    for i in 0..p.bias.len() {
        let numeric = central(
            &mut |h| {
                let mut q = p.clone();
                q.bias.data[i] += h;
                nll(&x, &q)
            },
            eps,
        );
        assert!(close(g.params.bias.data[i], numeric), "b[{i}]");
    }
    for i in 0..x.data.len() {
        let numeric = central(
            &mut |h| {
                let mut z = x.clone();
                z.data[i] += h;
                nll(&z, &p)
            },
            eps,
        );
        assert!(close(g.input.data[i], numeric), "x[{i}]");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_bounds_every_path(seed in any::<u64>(), n in 1usize..5, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, p) = random_instance(&mut rng, n, k, 3, 2.0);
        let log_z = log_partition(&x, &p).unwrap();
        prop_assert!(log_z.is_finite());
        let best = viterbi_decode(&x, &p).unwrap();
        let best_score = sequence_score(&x, &best, &p).unwrap();
        prop_assert!(best_score <= log_z + 1e-12);
        for y in all_sequences(n, k) {
            let s = sequence_score(&x, &y, &p).unwrap();
            prop_assert!(s <= log_z + 1e-12);
            prop_assert!(s <= best_score + 1e-12);
        }
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, p) = random_instance(&mut rng, n, 3, 4, 1.0);
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        prop_assert!(nll_and_gradient(&x, &y, &p).unwrap().loss >= -1e-12);
    }
}
