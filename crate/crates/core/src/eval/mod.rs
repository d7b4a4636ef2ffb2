//! Exact enumeration oracles and distribution metrics.

mod diagnostics;
mod enumerate;
mod metrics;
mod tabular;

pub use diagnostics::{
    diagnostics, ClassReport, DiagnosticsConfig, DiagnosticsReport, SampleSource, TemperatureRow,
};
pub use enumerate::{enumerate_multistep, student_onestep_joint};
pub use metrics::{
    cooccurrence_error, entropy, kl_divergence, marginal_tv, sample_entropy, support_histogram, tv_distance,
    SampleStats, SupportHistogram,
};
pub use tabular::TabularTeacher;

use crate::error::{invalid, Error, Result};
use crate::teacher::dataset::{decode, encode};
use crate::tokens::TokenSeq;

/// Largest dense table, `V^L`, that enumeration will build.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Tolerance on the total mass of an [`ExactJoint`].
pub const JOINT_TOL: f64 = 1e-9;

/// A distribution over `[V]^L` stored densely, first position most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactJoint {
    vocab: usize,
    len: usize,
    probs: Vec<f64>,
}

impl ExactJoint {
    /// `V^L`, or an error when it exceeds [`ENUMERATION_LIMIT`].
    pub fn checked_size(vocab: usize, len: usize) -> Result<usize> {
        let size = (vocab as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        if size > ENUMERATION_LIMIT {
            return Err(Error::StateSpaceTooLarge {
                size,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(size as usize)
    }

    pub fn new(vocab: usize, len: usize, probs: Vec<f64>) -> Result<Self> {
        let size = Self::checked_size(vocab, len)?;
        if probs.len() != size {
            return Err(invalid(format!("joint over {vocab}^{len} needs {size} entries, got {}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(invalid("joint has negative or non-finite entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > JOINT_TOL {
            return Err(invalid(format!("joint sums to {total}")));
        }
        Ok(Self { vocab, len, probs })
    }

    pub fn uniform(vocab: usize, len: usize) -> Result<Self> {
        let size = Self::checked_size(vocab, len)?;
        Self::new(vocab, len, vec![1.0 / size as f64; size])
    }

    /// Empirical law of `samples`.
    pub fn from_samples(vocab: usize, len: usize, samples: &[TokenSeq]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("no samples"));
        }
        let size = Self::checked_size(vocab, len)?;
        let mut probs = vec![0.0; size];
        let w = 1.0 / samples.len() as f64;
        for s in samples {
            if s.len() != len {
                return Err(invalid("sample length differs from the joint"));
            }
            s.check_range(vocab - 1)?;
            probs[encode(s.ids(), vocab)] += w;
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(vocab, len, probs)
    }

    /// Product of independent per-position rows.
    pub fn product(rows: &[&[f64]]) -> Result<Self> {
        let vocab = rows.first().map_or(0, |r| r.len());
        Self::checked_size(vocab, rows.len())?;
        let mut probs = vec![1.0];
        for row in rows {
            if row.len() != vocab {
                return Err(invalid("rows have different vocabularies"));
            }
            probs = probs.iter().flat_map(|&p| row.iter().map(move |&q| p * q)).collect();
        }
        Self::new(vocab, rows.len(), probs)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, seq: &TokenSeq) -> f64 {
        self.probs[encode(seq.ids(), self.vocab)]
    }

    pub fn sequence(&self, index: usize) -> TokenSeq {
        decode(index, self.vocab, self.len)
    }

    /// `L` rows of `V`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; self.vocab]; self.len];
        for (idx, &p) in self.probs.iter().enumerate() {
            for (row, &tok) in rows.iter_mut().zip(self.sequence(idx).ids()) {
                row[tok] += p;
            }
        }
        rows
    }

    /// `V × V` joint of positions `i` and `j`, `[a * V + b]`.
    pub fn pair_marginal(&self, i: usize, j: usize) -> Vec<f64> {
        let v = self.vocab;
        let mut t = vec![0.0; v * v];
        for (idx, &p) in self.probs.iter().enumerate() {
            let s = self.sequence(idx);
            t[s.0[i] * v + s.0[j]] += p;
        }
        t
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    /// Weighted average `Σ w_k · joint_k`; weights must sum to one.
    pub fn mixture(parts: &[(f64, &ExactJoint)]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("empty mixture"))?.1;
        let mut probs = vec![0.0; first.probs.len()];
        for (w, j) in parts {
            if j.vocab != first.vocab || j.len != first.len {
                return Err(invalid("mixture components have different supports"));
            }
            for (o, p) in probs.iter_mut().zip(&j.probs) {
                *o += w * p;
            }
        }
        Self::new(first.vocab, first.len, probs)
    }
}
