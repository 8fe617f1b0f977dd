//! Walker/Vose alias table for O(1) draws from the unigram noise distribution.

use rand::Rng;

use crate::corpus::{UnigramDistribution, WordId};

#[derive(Clone, Debug)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<WordId>,
}

impl AliasTable {
    pub fn new(dist: &UnigramDistribution) -> Self {
        Self::from_probs(dist.probs())
    }

    /// `probs` must be non-negative with positive sum; it is renormalized.
    pub fn from_probs(probs: &[f64]) -> Self {
        let n = probs.len();
        assert!(n > 0, "alias table needs at least one entry");
        let total: f64 = probs.iter().sum();
        assert!(total > 0.0, "alias table needs positive mass");

        let mut scaled: Vec<f64> = probs.iter().map(|&p| p * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias: Vec<WordId> = (0..n as WordId).collect();

        let (mut small, mut large): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| scaled[i] < 1.0);

        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l as WordId;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are 1 up to rounding. A zero-mass entry must stay
        // unreachable, so it keeps prob 0 and points at the heaviest id.
        let heaviest = (0..n)
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
            .unwrap();
        for i in large.into_iter().chain(small) {
            if probs[i] > 0.0 {
                prob[i] = 1.0;
            } else {
                prob[i] = 0.0;
                alias[i] = heaviest as WordId;
            }
        }
        AliasTable { prob, alias }
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WordId {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i as WordId
        } else {
            self.alias[i]
        }
    }

    /// `n` i.i.d. draws. Repeats are allowed.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<WordId> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [WordId]) {
        for slot in out {
            *slot = self.sample(rng);
        }
    }

    /// Mass each id receives from the table: its own cell plus every cell
    /// aliasing to it, each cell weighted `1/n`.
    pub fn reconstructed_probs(&self) -> Vec<f64> {
        let n = self.prob.len() as f64;
        let mut mass = vec![0.0; self.prob.len()];
        for (i, (&p, &a)) in self.prob.iter().zip(&self.alias).enumerate() {
            mass[i] += p / n;
            mass[a as usize] += (1.0 - p) / n;
        }
        mass
    }
}
