use serde::{Deserialize, Serialize};

use super::ExactJoint;
use crate::error::{invalid, Result};
use crate::model::Grid;
use crate::teacher::SyntheticDataset;
use crate::tokens::TokenSeq;

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &ExactJoint, q: &ExactJoint) -> Result<f64> {
    if p.vocab() != q.vocab() || p.seq_len() != q.seq_len() {
        return Err(invalid(format!(
            "support mismatch: {}^{} vs {}^{}",
            p.vocab(),
            p.seq_len(),
            q.vocab(),
            q.seq_len()
        )));
    }
    Ok(0.5 * p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p ‖ q)` in nats; infinite when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &ExactJoint, q: &ExactJoint) -> Result<f64> {
    tv_distance(p, q)?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| if *b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum())
}

/// Shannon entropy of one distribution, in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Mean over positions of the per-position total variation.
pub fn marginal_tv(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid("marginal tables differ in length"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(invalid("marginal rows differ in vocabulary"));
        }
        total += 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    Ok(total / a.len() as f64)
}

/// `sqrt(Σ_{i<j} ‖P_ij − Q_ij‖_F²)` over matching lists of pair tables.
pub fn cooccurrence_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("pair tables differ in count"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(invalid("pair tables differ in size"));
        }
        total += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(total.sqrt())
}

/// Mean over positions of the plug-in entropy of the empirical marginals.
pub fn sample_entropy(samples: &[TokenSeq], vocab: usize) -> Result<f64> {
    let len = samples.first().map_or(0, |s| s.len());
    Ok(SampleStats::from_samples(samples, vocab, len)?.entropy())
}

/// Per-position marginals and all `i < j` pair tables of one law.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStats {
    pub vocab: usize,
    pub marginals: Vec<Vec<f64>>,
    /// Pair tables in `(0,1), (0,2), …, (L−2,L−1)` order.
    pub pairs: Vec<Vec<f64>>,
}

impl SampleStats {
    pub fn from_samples(samples: &[TokenSeq], vocab: usize, len: usize) -> Result<Self> {
        if samples.is_empty() || len == 0 {
            return Err(invalid("no samples"));
        }
        let w = 1.0 / samples.len() as f64;
        let mut marginals = vec![vec![0.0; vocab]; len];
        let mut pairs = vec![vec![0.0; vocab * vocab]; len * (len - 1) / 2];
        for s in samples {
            if s.len() != len {
                return Err(invalid("sample length mismatch"));
            }
            s.check_range(vocab - 1)?;
            let ids = s.ids();
            let mut k = 0;
            for i in 0..len {
                marginals[i][ids[i]] += w;
                for j in i + 1..len {
                    pairs[k][ids[i] * vocab + ids[j]] += w;
                    k += 1;
                }
            }
        }
        Ok(Self { vocab, marginals, pairs })
    }

    pub fn from_joint(joint: &ExactJoint) -> Self {
        let len = joint.seq_len();
        let pairs = (0..len)
            .flat_map(|i| (i + 1..len).map(move |j| (i, j)))
            .map(|(i, j)| joint.pair_marginal(i, j))
            .collect();
        Self {
            vocab: joint.vocab(),
            marginals: joint.marginals(),
            pairs,
        }
    }

    pub fn from_dataset(ds: &SyntheticDataset, class: usize) -> Self {
        let len = ds.seq_len();
        let pairs = (0..len)
            .flat_map(|i| (i + 1..len).map(move |j| (i, j)))
            .map(|(i, j)| ds.pair_marginal(class, i, j).table)
            .collect();
        Self {
            vocab: ds.vocab().size,
            marginals: ds.marginals(class),
            pairs,
        }
    }

    /// Mean per-position entropy, nats.
    pub fn entropy(&self) -> f64 {
        self.marginals.iter().map(|m| entropy(m)).sum::<f64>() / self.marginals.len() as f64
    }

    pub fn marginal_tv(&self, other: &SampleStats) -> Result<f64> {
        marginal_tv(&self.marginals, &other.marginals)
    }

    pub fn cooccurrence_error(&self, other: &SampleStats) -> Result<f64> {
        cooccurrence_error(&self.pairs, &other.pairs)
    }
}

/// Per-row count of entries above a threshold, and their histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportHistogram {
    pub threshold: f64,
    /// One count per `(batch, position)` row.
    pub counts: Vec<usize>,
    /// `histogram[k]` = number of rows with exactly `k` entries above threshold.
    pub histogram: Vec<usize>,
}

impl SupportHistogram {
    pub fn rows_with_count(&self, k: usize) -> usize {
        self.histogram.get(k).copied().unwrap_or(0)
    }
}

pub fn support_histogram(probs: &Grid, threshold: f64) -> SupportHistogram {
    let counts: Vec<usize> = probs.rows().map(|r| r.iter().filter(|&&p| p > threshold).count()).collect();
    let mut histogram = vec![0; probs.vocab + 1];
    for &c in &counts {
        histogram[c] += 1;
    }
    SupportHistogram {
        threshold,
        counts,
        histogram,
    }
}
