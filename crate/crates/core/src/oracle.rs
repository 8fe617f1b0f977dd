//! Brute-force checks on enumerable word/context distributions.
//!
//! Contexts here are single previous words, so every quantity can be
//! computed exactly: the shifted PMI matrix, the expected negative-sampling
//! objective with its gradient, the full-rank optimum of that objective, and
//! the Bayes posterior behind the NCE classifier.

use ndarray::Array2;
use rand::Rng;

use crate::corpus::WordId;
use crate::numeric::{log_sigmoid, logsumexp, sigmoid};

/// Co-occurrence counts `n(w, c)`, words on rows and contexts on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct JointCounts {
    counts: Array2<f64>,
    total: f64,
}

impl JointCounts {
    pub fn new(counts: Array2<f64>) -> Self {
        assert!(counts.iter().all(|&c| c >= 0.0), "counts must be non-negative");
        let total = counts.sum();
        assert!(total > 0.0, "counts must not all be zero");
        JointCounts { counts, total }
    }

    /// Bigram counts: the context of each token is the token before it.
    pub fn from_bigrams(ids: &[WordId], vocab_size: usize) -> Self {
        let mut counts = Array2::zeros((vocab_size, vocab_size));
        for pair in ids.windows(2) {
            counts[[pair[1] as usize, pair[0] as usize]] += 1.0;
        }
        Self::new(counts)
    }

    /// Dense joint with entries uniform in `[0.05, 1)` before normalization.
    pub fn random<R: Rng + ?Sized>(words: usize, contexts: usize, rng: &mut R) -> Self {
        Self::new(Array2::from_shape_simple_fn((words, contexts), || {
            0.05 + 0.95 * rng.random::<f64>()
        }))
    }

    pub fn words(&self) -> usize {
        self.counts.nrows()
    }

    pub fn contexts(&self) -> usize {
        self.counts.ncols()
    }

    pub fn count(&self, w: usize, c: usize) -> f64 {
        self.counts[[w, c]]
    }

    pub fn joint(&self) -> Array2<f64> {
        &self.counts / self.total
    }

    pub fn word_marginal(&self) -> Vec<f64> {
        self.counts.rows().into_iter().map(|r| r.sum() / self.total).collect()
    }

    pub fn context_marginal(&self) -> Vec<f64> {
        self.counts
            .columns()
            .into_iter()
            .map(|c| c.sum() / self.total)
            .collect()
    }

    /// `p(w | c)`; columns with zero mass are left at zero.
    pub fn conditional(&self) -> Array2<f64> {
        let mut out = self.counts.clone();
        for mut col in out.columns_mut() {
            let s = col.sum();
            if s > 0.0 {
                col /= s;
            }
        }
        out
    }
}

/// `pmi_k(w, c) = log p(w|c) / (k p(w))`, `None` where `n(w, c) = 0`.
pub fn exact_pmi_matrix(counts: &JointCounts, k: usize) -> Array2<Option<f64>> {
    let cond = counts.conditional();
    let pw = counts.word_marginal();
    Array2::from_shape_fn((counts.words(), counts.contexts()), |(w, c)| {
        (counts.count(w, c) > 0.0).then(|| (cond[[w, c]] / (k as f64 * pw[w])).ln())
    })
}

/// Normalizes `exp(pmi(w, c)) p(w)` over `w` for each context.
pub fn conditional_from_pmi(pmi: &Array2<f64>, word_marginal: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros(pmi.raw_dim());
    for c in 0..pmi.ncols() {
        let logits: Vec<f64> = (0..pmi.nrows())
            .map(|w| pmi[[w, c]] + word_marginal[w].ln())
            .collect();
        let lse = logsumexp(&logits);
        for (w, l) in logits.iter().enumerate() {
            out[[w, c]] = (l - lse).exp();
        }
    }
    out
}

fn scores(words: &Array2<f64>, contexts: &Array2<f64>) -> Array2<f64> {
    words.dot(&contexts.t())
}

/// Expected negative-sampling objective
/// `Σ p(w,c) log σ(w·c) + k Σ p(w) p(c) log σ(−w·c)`, by a pairwise loop.
pub fn expected_neg_objective(
    words: &Array2<f64>,
    contexts: &Array2<f64>,
    counts: &JointCounts,
    k: usize,
) -> f64 {
    let joint = counts.joint();
    let pw = counts.word_marginal();
    let pc = counts.context_marginal();
    let x = scores(words, contexts);
    let mut total = 0.0;
    for w in 0..counts.words() {
        for c in 0..counts.contexts() {
            total += joint[[w, c]] * log_sigmoid(x[[w, c]]);
            total += k as f64 * pw[w] * pc[c] * log_sigmoid(-x[[w, c]]);
        }
    }
    total
}

/// Same value, with the noise term written as `k · p_wᵀ L p_c`.
pub fn expected_neg_objective_factored(
    words: &Array2<f64>,
    contexts: &Array2<f64>,
    counts: &JointCounts,
    k: usize,
) -> f64 {
    let x = scores(words, contexts);
    let positive = (&counts.joint() * &x.mapv(log_sigmoid)).sum();
    let pw = ndarray::Array1::from(counts.word_marginal());
    let pc = ndarray::Array1::from(counts.context_marginal());
    let negative = pw.dot(&x.mapv(|v| log_sigmoid(-v)).dot(&pc));
    positive + k as f64 * negative
}

/// Gradient of `expected_neg_objective` with respect to the word and context
/// tables.
pub fn expected_neg_gradient(
    words: &Array2<f64>,
    contexts: &Array2<f64>,
    counts: &JointCounts,
    k: usize,
) -> (Array2<f64>, Array2<f64>) {
    let joint = counts.joint();
    let pw = counts.word_marginal();
    let pc = counts.context_marginal();
    let x = scores(words, contexts);
    let g = Array2::from_shape_fn(x.raw_dim(), |(w, c)| {
        joint[[w, c]] * sigmoid(-x[[w, c]]) - k as f64 * pw[w] * pc[c] * sigmoid(x[[w, c]])
    });
    (g.dot(contexts), g.t().dot(words))
}

/// Supremum of the expected objective over unconstrained scores, reached
/// cell by cell at `x = pmi_k(w, c)`. Zero-count cells contribute nothing.
pub fn expected_neg_optimum(counts: &JointCounts, k: usize) -> f64 {
    let joint = counts.joint();
    let pw = counts.word_marginal();
    let pc = counts.context_marginal();
    let pmi = exact_pmi_matrix(counts, k);
    let mut total = 0.0;
    for w in 0..counts.words() {
        for c in 0..counts.contexts() {
            if let Some(x) = pmi[[w, c]] {
                total += joint[[w, c]] * log_sigmoid(x);
                total += k as f64 * pw[w] * pc[c] * log_sigmoid(-x);
            }
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimumReport {
    /// Max over positive-count pairs of `|w·c − pmi_k(w,c)|`.
    pub max_deviation: f64,
    /// `expected_neg_optimum − objective(W, C)`, a weighted sum of Bernoulli
    /// KL divergences between `σ(pmi)` and `σ(w·c)`.
    pub objective_gap: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const ASCENT_STEP: f64 = 0.5;
pub const GRAD_TOLERANCE: f64 = 1e-7;
pub const MAX_ITERATIONS: usize = 1_000_000;

/// Maximizes the expected objective with rank-`dim` tables by full-batch
/// gradient ascent and measures the distance of `w·c` from the PMI matrix.
///
/// The inner loop works on flat buffers; `expected_neg_gradient` is the
/// readable version of the same computation.
pub fn verify_pmi_optimum<R: Rng + ?Sized>(
    counts: &JointCounts,
    k: usize,
    dim: usize,
    rng: &mut R,
) -> OptimumReport {
    let (nw, nc) = (counts.words(), counts.contexts());
    let joint = counts.joint();
    let pw = counts.word_marginal();
    let pc = counts.context_marginal();
    let kf = k as f64;

    let mut wv: Vec<f64> = (0..nw * dim).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect();
    let mut cv: Vec<f64> = (0..nc * dim).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect();
    let mut g = vec![0.0; nw * nc];
    let mut gw = vec![0.0; nw * dim];
    let mut gc = vec![0.0; nc * dim];

    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < MAX_ITERATIONS {
        for w in 0..nw {
            for c in 0..nc {
                let x: f64 = (0..dim).map(|j| wv[w * dim + j] * cv[c * dim + j]).sum();
                g[w * nc + c] = joint[[w, c]] * sigmoid(-x) - kf * pw[w] * pc[c] * sigmoid(x);
            }
        }
        gw.iter_mut().for_each(|x| *x = 0.0);
        gc.iter_mut().for_each(|x| *x = 0.0);
        for w in 0..nw {
            for c in 0..nc {
                let gwc = g[w * nc + c];
                for j in 0..dim {
                    gw[w * dim + j] += gwc * cv[c * dim + j];
                    gc[c * dim + j] += gwc * wv[w * dim + j];
                }
            }
        }
        grad_norm = gw.iter().chain(&gc).map(|x| x * x).sum::<f64>().sqrt();
        if grad_norm < GRAD_TOLERANCE {
            break;
        }
        wv.iter_mut().zip(&gw).for_each(|(p, g)| *p += ASCENT_STEP * g);
        cv.iter_mut().zip(&gc).for_each(|(p, g)| *p += ASCENT_STEP * g);
        iterations += 1;
    }

    let pmi = exact_pmi_matrix(counts, k);
    let words = Array2::from_shape_vec((nw, dim), wv.clone()).expect("shape");
    let ctxs = Array2::from_shape_vec((nc, dim), cv.clone()).expect("shape");
    let objective_gap = expected_neg_optimum(counts, k) - expected_neg_objective(&words, &ctxs, counts, k);
    let mut max_deviation: f64 = 0.0;
    for w in 0..nw {
        for c in 0..nc {
            if let Some(target) = pmi[[w, c]] {
                let x: f64 = (0..dim).map(|j| wv[w * dim + j] * cv[c * dim + j]).sum();
                max_deviation = max_deviation.max((x - target).abs());
            }
        }
    }
    OptimumReport {
        max_deviation,
        objective_gap,
        grad_norm,
        iterations,
        converged: grad_norm < GRAD_TOLERANCE,
    }
}

/// NCE posterior `p(y=1 | w, c)` two ways, for every word: through the
/// sigmoid score with exact `log Z_c`, and directly from the mixture
/// `(p(w|c) + k p(w)) / (k + 1)`. `logits[w] = w·c + b_w`.
pub fn nce_posteriors(logits: &[f64], noise: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let kf = k as f64;
    let log_z = logsumexp(logits);
    let via_score = logits
        .iter()
        .zip(noise)
        .map(|(&s, &p)| sigmoid(s - log_z - (p * kf).ln()))
        .collect();
    let exact = logits
        .iter()
        .zip(noise)
        .map(|(&s, &p)| {
            let model = (s - log_z).exp();
            let true_part = model / (kf + 1.0);
            let noise_part = kf * p / (kf + 1.0);
            true_part / (true_part + noise_part)
        })
        .collect();
    (via_score, exact)
}

pub fn verify_nce_posterior(logits: &[f64], noise: &[f64], k: usize) -> f64 {
    let (a, b) = nce_posteriors(logits, noise, k);
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn independent() -> JointCounts {
        let pw = [0.2, 0.5, 0.3];
        let pc = [0.6, 0.1, 0.3];
        JointCounts::new(Array2::from_shape_fn((3, 3), |(w, c)| pw[w] * pc[c]))
    }

    #[test]
    fn marginals_are_consistent() {
        let j = JointCounts::random(4, 6, &mut rng(0));
        assert!((j.joint().sum() - 1.0).abs() < 1e-12);
        assert!((j.word_marginal().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let cond = j.conditional();
        for col in cond.columns() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pmi_of_independent_variables() {
        let j = independent();
        for v in exact_pmi_matrix(&j, 1) {
            assert!(v.unwrap().abs() < 1e-12);
        }
        for v in exact_pmi_matrix(&j, 4) {
            assert!((v.unwrap() + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn pmi_by_hand() {
        // rows: words, columns: contexts
        let j = JointCounts::new(array![[2.0, 0.0, 1.0], [1.0, 3.0, 0.0], [1.0, 1.0, 1.0]]);
        let pmi = exact_pmi_matrix(&j, 2);
        // p(w0|c0) = 2/4, p(w0) = 3/10
        assert!((pmi[[0, 0]].unwrap() - (0.5f64 / (2.0 * 0.3)).ln()).abs() < 1e-12);
        // p(w1|c1) = 3/4, p(w1) = 4/10
        assert!((pmi[[1, 1]].unwrap() - (0.75f64 / (2.0 * 0.4)).ln()).abs() < 1e-12);
        // p(w2|c2) = 1/2, p(w2) = 3/10
        assert!((pmi[[2, 2]].unwrap() - (0.5f64 / (2.0 * 0.3)).ln()).abs() < 1e-12);
        assert_eq!(pmi[[0, 1]], None);
        assert_eq!(pmi[[1, 2]], None);
    }

    #[test]
    fn bigram_counts() {
        let j = JointCounts::from_bigrams(&[0, 1, 0, 1, 2], 3);
        assert_eq!(j.count(1, 0), 2.0);
        assert_eq!(j.count(0, 1), 1.0);
        assert_eq!(j.count(2, 1), 1.0);
    }

    #[test]
    fn zero_tables_give_log2_objective() {
        let j = JointCounts::random(3, 4, &mut rng(1));
        let (w, c) = (Array2::zeros((3, 2)), Array2::zeros((4, 2)));
        for k in [1, 2, 5] {
            let v = expected_neg_objective(&w, &c, &j, k);
            assert!((v + (1 + k) as f64 * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_two_ways_agree() {
        let mut r = rng(2);
        let j = JointCounts::random(5, 4, &mut r);
        let w = Array2::from_shape_simple_fn((5, 3), || r.random::<f64>() * 2.0 - 1.0);
        let c = Array2::from_shape_simple_fn((4, 3), || r.random::<f64>() * 2.0 - 1.0);
        let a = expected_neg_objective(&w, &c, &j, 3);
        let b = expected_neg_objective_factored(&w, &c, &j, 3);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn expected_gradient_matches_finite_differences() {
        let mut r = rng(3);
        let j = JointCounts::random(4, 5, &mut r);
        let mut w = Array2::from_shape_simple_fn((4, 3), || r.random::<f64>() - 0.5);
        let mut c = Array2::from_shape_simple_fn((5, 3), || r.random::<f64>() - 0.5);
        let (gw, gc) = expected_neg_gradient(&w, &c, &j, 2);
        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs() + 1e-8);
        for idx in 0..w.len() {
            let orig = w.as_slice().unwrap()[idx];
            w.as_slice_mut().unwrap()[idx] = orig + eps;
            let up = expected_neg_objective(&w, &c, &j, 2);
            w.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = expected_neg_objective(&w, &c, &j, 2);
            w.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!(rel(gw.as_slice().unwrap()[idx], fd) < 1e-6);
        }
        for idx in 0..c.len() {
            let orig = c.as_slice().unwrap()[idx];
            c.as_slice_mut().unwrap()[idx] = orig + eps;
            let up = expected_neg_objective(&w, &c, &j, 2);
            c.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = expected_neg_objective(&w, &c, &j, 2);
            c.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!(rel(gc.as_slice().unwrap()[idx], fd) < 1e-6);
        }
    }

    #[test]
    fn independent_two_by_two_reaches_zero_pmi() {
        let j = JointCounts::new(Array2::from_elem((2, 2), 0.25));
        let r = verify_pmi_optimum(&j, 1, 2, &mut rng(4));
        assert!(r.max_deviation <= 1e-3, "{r:?}");
    }

    #[test]
    fn full_rank_reaches_pmi_and_gap_shrinks_with_rank() {
        let j = JointCounts::random(5, 5, &mut rng(8));
        let mut last = f64::INFINITY;
        for d in [1, 2, 3, 5] {
            let r = verify_pmi_optimum(&j, 2, d, &mut rng(9 + d as u64));
            assert!(r.converged, "{r:?}");
            assert!(r.objective_gap >= -1e-12);
            assert!(r.objective_gap <= last, "d={d}: {r:?}");
            last = r.objective_gap;
            if d == 5 {
                assert!(r.max_deviation <= 1e-3, "{r:?}");
                assert!(r.objective_gap < 1e-9);
            }
        }
    }

    #[test]
    fn optimum_value_by_hand() {
        // independent 2x2 with k = 1: pmi = 0 everywhere, value 2·log σ(0)
        let j = JointCounts::new(Array2::from_elem((2, 2), 1.0));
        assert!((expected_neg_optimum(&j, 1) + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pmi_recovers_conditional() {
        let j = JointCounts::random(6, 4, &mut rng(5));
        let pmi = exact_pmi_matrix(&j, 3).mapv(Option::unwrap);
        let back = conditional_from_pmi(&pmi, &j.word_marginal());
        let cond = j.conditional();
        for (a, b) in back.iter().zip(cond.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_posterior_is_half() {
        let (a, b) = nce_posteriors(&[0.7; 6], &[1.0 / 6.0; 6], 1);
        assert!(a.iter().chain(&b).all(|p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn posterior_identity_on_random_instance() {
        let mut r = rng(6);
        let logits: Vec<f64> = (0..5).map(|_| r.random::<f64>() * 6.0 - 3.0).collect();
        let raw: Vec<f64> = (0..5).map(|_| r.random::<f64>() + 0.05).collect();
        let z: f64 = raw.iter().sum();
        let noise: Vec<f64> = raw.iter().map(|x| x / z).collect();
        assert!(verify_nce_posterior(&logits, &noise, 3) <= 1e-12);
    }

    #[test]
    fn posterior_decreases_with_k() {
        let logits = [0.5, -1.0, 2.0, 0.0];
        let noise = [0.1, 0.2, 0.3, 0.4];
        let mut last = vec![1.0; 4];
        for k in [1, 2, 5, 10, 100, 10_000] {
            let (p, _) = nce_posteriors(&logits, &noise, k);
            for (x, l) in p.iter().zip(&last) {
                assert!(x < l);
            }
            last = p;
        }
        assert!(last.iter().all(|&p| p < 1e-3));
    }
}
