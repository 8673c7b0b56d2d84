//! Pair-indexed linear-chain CRF.
//!
//! Every ordered label pair `(prev, cur)` owns a weight vector `W[prev, cur]`
//! and a bias `b[prev, cur]`, so position `i` scores a transition as
//! `W[prev, cur] . x_i + b[prev, cur]`. The first position transitions out of
//! a begin pseudo-label stored as row `K` of `W` and `b`; there is no end
//! transition. All lattice arithmetic runs in log space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, join_name, log_sum_exp, Matrix, Parameters, Tensor};

pub const WEIGHT_INIT_BOUND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParameters {
    num_labels: usize,
    dim: usize,
    /// Shape `[K + 1, K, d]`.
    pub weight: Tensor,
    /// Shape `[K + 1, K]`.
    pub bias: Tensor,
}

impl CrfParameters {
    pub fn zeros(num_labels: usize, dim: usize) -> Self {
        CrfParameters {
            num_labels,
            dim,
            weight: Tensor::zeros(&[num_labels + 1, num_labels, dim]),
            bias: Tensor::zeros(&[num_labels + 1, num_labels]),
        }
    }

    /// Weights uniform in `±0.05`, zero biases.
    pub fn init(num_labels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        CrfParameters {
            num_labels,
            dim,
            weight: Tensor::uniform(&[num_labels + 1, num_labels, dim], WEIGHT_INIT_BOUND, rng),
            bias: Tensor::zeros(&[num_labels + 1, num_labels]),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row index of the begin pseudo-label.
    pub fn begin(&self) -> usize {
        self.num_labels
    }

    fn pair(&self, prev: usize, cur: usize) -> usize {
        prev * self.num_labels + cur
    }

    pub fn pair_weight(&self, prev: usize, cur: usize) -> &[f64] {
        let p = self.pair(prev, cur);
        &self.weight.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn pair_weight_mut(&mut self, prev: usize, cur: usize) -> &mut [f64] {
        let p = self.pair(prev, cur);
        &mut self.weight.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn pair_bias(&self, prev: usize, cur: usize) -> f64 {
        self.bias.data[self.pair(prev, cur)]
    }

    pub fn pair_bias_mut(&mut self, prev: usize, cur: usize) -> &mut f64 {
        let p = self.pair(prev, cur);
        &mut self.bias.data[p]
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols != self.dim {
            return Err(Error::Shape(format!(
                "CRF expects {}-dimensional inputs, got {}",
                self.dim, x.cols
            )));
        }
        Ok(())
    }

    fn check_labels(&self, x: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.len() != x.rows {
            return Err(Error::Shape(format!(
                "{} labels for a sequence of length {}",
                labels.len(),
                x.rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_labels) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {} labels",
                self.num_labels
            )));
        }
        Ok(())
    }
}

impl Parameters for CrfParameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join_name(prefix, "weight"), &self.weight);
        f(join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join_name(prefix, "weight"), &mut self.weight);
        f(join_name(prefix, "bias"), &mut self.bias);
    }
}

/// Transition scores `psi_i(prev, cur)` for every position of a sequence.
/// At position 0 only the begin row is populated.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeScores {
    len: usize,
    num_labels: usize,
    scores: Vec<f64>,
}

impl LatticeScores {
    pub fn from_features(x: &Matrix, params: &CrfParameters) -> Result<Self> {
        params.check_input(x)?;
        let k = params.num_labels;
        let stride = (k + 1) * k;
        let mut scores = vec![f64::NEG_INFINITY; x.rows * stride];
        for i in 0..x.rows {
            let xi = x.row(i);
            let prevs: Box<dyn Iterator<Item = usize>> = if i == 0 {
                Box::new(std::iter::once(k))
            } else {
                Box::new(0..k)
            };
            for prev in prevs {
                for cur in 0..k {
                    scores[i * stride + prev * k + cur] =
                        dot(params.pair_weight(prev, cur), xi) + params.pair_bias(prev, cur);
                }
            }
        }
        Ok(LatticeScores {
            len: x.rows,
            num_labels: k,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Score of entering `cur` from `prev` at position `i`; `prev` is the
    /// begin row `K` at position 0.
    pub fn get(&self, i: usize, prev: usize, cur: usize) -> f64 {
        let k = self.num_labels;
        self.scores[i * (k + 1) * k + prev * k + cur]
    }

    /// Adds `c` to every transition score at position `i`.
    pub fn shift_position(&mut self, i: usize, c: f64) {
        let stride = (self.num_labels + 1) * self.num_labels;
        for v in &mut self.scores[i * stride..(i + 1) * stride] {
            *v += c;
        }
    }

    fn prev_labels(&self, i: usize) -> std::ops::Range<usize> {
        if i == 0 {
            self.num_labels..self.num_labels + 1
        } else {
            0..self.num_labels
        }
    }

    fn path_score(&self, labels: &[usize]) -> f64 {
        let mut prev = self.num_labels;
        let mut total = 0.0;
        for (i, &cur) in labels.iter().enumerate() {
            total += self.get(i, prev, cur);
            prev = cur;
        }
        total
    }

    /// Forward log-messages `alpha_i(c)`.
    fn forward(&self) -> Vec<Vec<f64>> {
        let k = self.num_labels;
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(self.len);
        for i in 0..self.len {
            let row = (0..k)
                .map(|cur| {
                    if i == 0 {
                        self.get(0, k, cur)
                    } else {
                        let prev_alpha = &alpha[i - 1];
                        log_sum_exp((0..k).map(|p| prev_alpha[p] + self.get(i, p, cur)))
                    }
                })
                .collect();
            alpha.push(row);
        }
        alpha
    }

    /// Backward log-messages `beta_i(c)`, zero at the last position.
    fn backward(&self) -> Vec<Vec<f64>> {
        let k = self.num_labels;
        let mut beta = vec![vec![0.0; k]; self.len];
        for i in (0..self.len.saturating_sub(1)).rev() {
            for p in 0..k {
                let next = &beta[i + 1];
                beta[i][p] = log_sum_exp((0..k).map(|c| self.get(i + 1, p, c) + next[c]));
            }
        }
        beta
    }

    pub fn log_partition(&self) -> f64 {
        match self.forward().last() {
            Some(last) => log_sum_exp(last.iter().copied()),
            None => 0.0,
        }
    }

    /// Highest-scoring path and its score. Among equal scores the lower
    /// label index wins, both for the final label and for every backpointer.
    pub fn viterbi(&self) -> (Vec<usize>, f64) {
        let k = self.num_labels;
        if self.len == 0 {
            return (Vec::new(), 0.0);
        }
        let mut delta: Vec<f64> = (0..k).map(|c| self.get(0, k, c)).collect();
        let mut backpointers: Vec<Vec<usize>> = Vec::with_capacity(self.len);
        for i in 1..self.len {
            let mut next = vec![f64::NEG_INFINITY; k];
            let mut bp = vec![0; k];
            for cur in 0..k {
                for prev in 0..k {
                    let s = delta[prev] + self.get(i, prev, cur);
                    if s > next[cur] {
                        next[cur] = s;
                        bp[cur] = prev;
                    }
                }
            }
            delta = next;
            backpointers.push(bp);
        }
        let mut best = 0;
        for c in 1..k {
            if delta[c] > delta[best] {
                best = c;
            }
        }
        let score = delta[best];
        let mut path = vec![best; self.len];
        for i in (1..self.len).rev() {
            path[i - 1] = backpointers[i - 1][path[i]];
        }
        (path, score)
    }
}

/// Unnormalized log-score of `labels` given features `x`.
pub fn sequence_score(x: &Matrix, labels: &[usize], params: &CrfParameters) -> Result<f64> {
    params.check_input(x)?;
    params.check_labels(x, labels)?;
    let mut prev = params.begin();
    let mut total = 0.0;
    for (i, &cur) in labels.iter().enumerate() {
        total += dot(params.pair_weight(prev, cur), x.row(i)) + params.pair_bias(prev, cur);
        prev = cur;
    }
    Ok(total)
}

/// Log of the sum of exponentiated scores over all label sequences.
pub fn log_partition(x: &Matrix, params: &CrfParameters) -> Result<f64> {
    Ok(LatticeScores::from_features(x, params)?.log_partition())
}

pub fn viterbi_decode(x: &Matrix, params: &CrfParameters) -> Result<Vec<usize>> {
    Ok(LatticeScores::from_features(x, params)?.viterbi().0)
}

/// Negative log-likelihood of one sequence and its gradients.
#[derive(Debug, Clone)]
pub struct CrfGradient {
    pub loss: f64,
    pub params: CrfParameters,
    pub input: Matrix,
}

/// `log Z(x) - score(x, y)` with gradients for `W`, `b` and `x`: expected
/// pair counts under the model minus the observed pair counts.
pub fn nll_and_gradient(x: &Matrix, labels: &[usize], params: &CrfParameters) -> Result<CrfGradient> {
    params.check_labels(x, labels)?;
    let lattice = LatticeScores::from_features(x, params)?;
    let k = params.num_labels;
    let n = x.rows;
    let mut grads = CrfParameters::zeros(k, params.dim);
    let mut grad_x = Matrix::zeros(n, params.dim);
    if n == 0 {
        return Ok(CrfGradient {
            loss: 0.0,
            params: grads,
            input: grad_x,
        });
    }

    let alpha = lattice.forward();
    let beta = lattice.backward();
    let log_z = log_sum_exp(alpha[n - 1].iter().copied());
    let loss = log_z - lattice.path_score(labels);

    for i in 0..n {
        let xi = x.row(i);
        let gold_prev = if i == 0 { k } else { labels[i - 1] };
        for prev in lattice.prev_labels(i) {
            let prev_msg = if i == 0 { 0.0 } else { alpha[i - 1][prev] };
            for cur in 0..k {
                let marginal = (prev_msg + lattice.get(i, prev, cur) + beta[i][cur] - log_z).exp();
                let observed = if prev == gold_prev && cur == labels[i] { 1.0 } else { 0.0 };
                let delta = marginal - observed;
                if delta == 0.0 {
                    continue;
                }
                axpy(delta, xi, grads.pair_weight_mut(prev, cur));
                *grads.pair_bias_mut(prev, cur) += delta;
                axpy(delta, params.pair_weight(prev, cur), grad_x.row_mut(i));
            }
        }
    }
    Ok(CrfGradient {
        loss,
        params: grads,
        input: grad_x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, k: usize, d: usize) -> (Matrix, CrfParameters) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = CrfParameters::zeros(k, d);
        for v in params.weight.data.iter_mut().chain(params.bias.data.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut x = Matrix::zeros(n, d);
        x.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        (x, params)
    }

    /// Independent re-summation of the score definition.
    fn resum(x: &Matrix, y: &[usize], p: &CrfParameters) -> f64 {
        let k = p.num_labels();
        let d = p.dim();
        let mut total = 0.0;
        for i in 0..y.len() {
            let prev = if i == 0 { k } else { y[i - 1] };
            let base = (prev * k + y[i]) * d;
            for j in 0..d {
                total += p.weight.data[base + j] * x.data[i * d + j];
            }
            total += p.bias.data[prev * k + y[i]];
        }
        total
    }

    #[test]
    fn zero_parameters() {
        let params = CrfParameters::zeros(3, 2);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.0]]);
        assert_eq!(sequence_score(&x, &[2, 1, 0], &params).unwrap(), 0.0);
        assert!((log_partition(&x, &params).unwrap() - 3.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(viterbi_decode(&x, &params).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn single_term_score() {
        let mut params = CrfParameters::zeros(2, 1);
        params.pair_weight_mut(2, 0)[0] = 1.5;
        let x = Matrix::from_rows(&[vec![1.0]]);
        assert_eq!(sequence_score(&x, &[0], &params).unwrap(), 1.5);
        let expected = (1.5f64.exp() + 1.0).ln();
        assert!((log_partition(&x, &params).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn score_matches_resummation() {
        let (x, params) = random_instance(42, 3, 3, 4);
        for y in [[0, 1, 2], [2, 2, 2], [1, 0, 1]] {
            let a = sequence_score(&x, &y, &params).unwrap();
            assert!((a - resum(&x, &y, &params)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let (x, params) = random_instance(1, 3, 3, 4);
        assert!(matches!(sequence_score(&x, &[0, 1], &params), Err(Error::Shape(_))));
        assert!(matches!(sequence_score(&x, &[0, 1, 3], &params), Err(Error::Shape(_))));
        let wrong = Matrix::zeros(3, 5);
        assert!(matches!(log_partition(&wrong, &params), Err(Error::Shape(_))));
    }

    #[test]
    fn forced_path_under_dominant_pairs() {
        let k = 4;
        let mut params = CrfParameters::zeros(k, 1);
        let path = [3, 1, 2, 0, 2];
        let mut prev = k;
        for &cur in &path {
            *params.pair_bias_mut(prev, cur) = 10.0;
            prev = cur;
        }
        let x = Matrix::zeros(path.len(), 1);
        assert_eq!(viterbi_decode(&x, &params).unwrap(), path.to_vec());
    }

    #[test]
    fn viterbi_invariant_to_position_shift() {
        for seed in 0..20 {
            let (x, params) = random_instance(seed, 5, 4, 3);
            let lattice = LatticeScores::from_features(&x, &params).unwrap();
            let (path, _) = lattice.viterbi();
            let mut shifted = lattice.clone();
            shifted.shift_position((seed % 5) as usize, 3.75);
            assert_eq!(shifted.viterbi().0, path);
        }
    }

    #[test]
    fn stationary_when_gold_is_certain() {
        let mut params = CrfParameters::zeros(2, 1);
        *params.pair_bias_mut(2, 1) = 60.0;
        let x = Matrix::from_rows(&[vec![0.3]]);
        let g = nll_and_gradient(&x, &[1], &params).unwrap();
        let norm: f64 = g
            .params
            .weight
            .data
            .iter()
            .chain(&g.params.bias.data)
            .chain(&g.input.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6);
        assert!(g.loss.abs() < 1e-6);
    }

    #[test]
    fn gradient_is_additive_over_examples() {
        let (x, params) = random_instance(5, 4, 3, 2);
        let y = [0, 2, 1, 1];
        let single = nll_and_gradient(&x, &y, &params).unwrap();
        let mut sum = single.params.weight.clone();
        sum.add_assign(&nll_and_gradient(&x, &y, &params).unwrap().params.weight);
        for (a, b) in sum.data.iter().zip(&single.params.weight.data) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn viterbi_score_bounded_by_partition() {
        for seed in 0..10 {
            let (x, params) = random_instance(seed, 4, 3, 2);
            let lattice = LatticeScores::from_features(&x, &params).unwrap();
            let (path, best) = lattice.viterbi();
            assert!(best <= lattice.log_partition());
            assert!((best - sequence_score(&x, &path, &params).unwrap()).abs() < 1e-12);
        }
    }
}
