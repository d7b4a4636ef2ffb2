//! Seeded procedural datasets whose per-class law is known exactly.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::sample_categorical;
use crate::error::{invalid, Result};
use crate::eval::ExactJoint;
use crate::rng::{streams, StreamRng};
use crate::tokens::{TokenSeq, Vocab};

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Explicit joint table per class (`V^L` entries, `L ≤ 4`). Random
    /// when `table` is absent: log-weights `~ N(0, spread²)`.
    Tabular {
        vocab: usize,
        seq_len: usize,
        classes: usize,
        seed: u64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        table: Option<Vec<Vec<f64>>>,
    },
    /// Class-specific first-order chain. Each state has `branching` random
    /// successors; `leak` mass is spread uniformly over all states.
    MarkovChain {
        vocab: usize,
        seq_len: usize,
        classes: usize,
        seed: u64,
        #[serde(default = "default_branching")]
        branching: usize,
        #[serde(default = "default_leak")]
        leak: f64,
    },
    /// Per-class motifs chosen uniformly; each token is independently
    /// resampled uniformly with probability `noise`.
    Patterned {
        vocab: usize,
        seq_len: usize,
        classes: usize,
        seed: u64,
        #[serde(default = "default_motifs")]
        motifs_per_class: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        motifs: Option<Vec<Vec<Vec<usize>>>>,
    },
}

fn default_spread() -> f64 {
    1.5
}
fn default_branching() -> usize {
    2
}
fn default_leak() -> f64 {
    0.02
}
fn default_motifs() -> usize {
    1
}

impl DatasetSpec {
    pub fn dims(&self) -> (usize, usize, usize) {
        match *self {
            DatasetSpec::Tabular {
                vocab, seq_len, classes, ..
            }
            | DatasetSpec::MarkovChain {
                vocab, seq_len, classes, ..
            }
            | DatasetSpec::Patterned {
                vocab, seq_len, classes, ..
            } => (vocab, seq_len, classes),
        }
    }

    pub fn build(&self) -> Result<SyntheticDataset> {
        let (vocab, seq_len, classes) = self.dims();
        if vocab < 2 || seq_len == 0 || classes == 0 {
            return Err(invalid("dataset needs vocab >= 2, seq_len >= 1, classes >= 1"));
        }
        let mut rng = match self {
            DatasetSpec::Tabular { seed, .. } | DatasetSpec::MarkovChain { seed, .. } | DatasetSpec::Patterned { seed, .. } => {
                StreamRng::new(*seed, streams::DATA)
            }
        };
        let law = match self {
            DatasetSpec::Tabular { spread, table, .. } => {
                if seq_len > 4 {
                    return Err(invalid("tabular datasets are limited to seq_len <= 4"));
                }
                let size = vocab.pow(seq_len as u32);
                let tables = match table {
                    Some(t) => {
                        if t.len() != classes || t.iter().any(|row| row.len() != size) {
                            return Err(invalid(format!("tabular table must be {classes} rows of {size} entries")));
                        }
                        t.iter().map(|row| normalized(row.clone())).collect::<Result<Vec<_>>>()?
                    }
                    None => (0..classes)
                        .map(|_| {
                            let w = (0..size)
                                .map(|_| (spread * Distribution::<f64>::sample(&StandardNormal, &mut rng)).exp())
                                .collect();
                            normalized(w)
                        })
                        .collect::<Result<Vec<_>>>()?,
                };
                Law::Tabular(tables)
            }
            DatasetSpec::MarkovChain { branching, leak, .. } => {
                if *branching == 0 || *branching > vocab || !(0.0..=1.0).contains(leak) {
                    return Err(invalid("markov chain needs 1 <= branching <= vocab and leak in [0, 1]"));
                }
                let mut initial = Vec::with_capacity(classes);
                let mut transition = Vec::with_capacity(classes);
                for _ in 0..classes {
                    let w = (0..vocab).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z.exp()).collect();
                    initial.push(normalized(w)?);
                    let mut t = vec![0.0; vocab * vocab];
                    for s in 0..vocab {
                        let succ = sample_indices(&mut rng, vocab, *branching);
                        let w: Vec<f64> = (0..*branching).map(|_| (0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).exp()).collect();
                        let total: f64 = w.iter().sum();
                        let row = &mut t[s * vocab..(s + 1) * vocab];
                        row.iter_mut().for_each(|v| *v = leak / vocab as f64);
                        for (k, wk) in succ.iter().zip(&w) {
                            row[k] += (1.0 - leak) * wk / total;
                        }
                    }
                    transition.push(t);
                }
                Law::Markov { initial, transition }
            }
            DatasetSpec::Patterned {
                motifs_per_class,
                noise,
                motifs,
                ..
            } => {
                if !(0.0..=1.0).contains(noise) {
                    return Err(invalid("pattern noise must lie in [0, 1]"));
                }
                let motifs = match motifs {
                    Some(m) => {
                        if m.len() != classes || m.iter().any(|c| c.is_empty()) {
                            return Err(invalid(format!("need at least one motif for each of {classes} classes")));
                        }
                        let mut out = Vec::new();
                        for class in m {
                            let mut seqs = Vec::new();
                            for motif in class {
                                let s = TokenSeq(motif.clone());
                                if s.len() != seq_len {
                                    return Err(invalid("motif length differs from seq_len"));
                                }
                                s.check_range(vocab - 1)?;
                                seqs.push(s);
                            }
                            out.push(seqs);
                        }
                        out
                    }
                    None => {
                        if *motifs_per_class == 0 {
                            return Err(invalid("motifs_per_class must be positive"));
                        }
                        (0..classes)
                            .map(|_| {
                                (0..*motifs_per_class)
                                    .map(|_| TokenSeq((0..seq_len).map(|_| rng.random_range(0..vocab)).collect()))
                                    .collect()
                            })
                            .collect()
                    }
                };
                Law::Patterned { motifs, noise: *noise }
            }
        };
        Ok(SyntheticDataset {
            spec: self.clone(),
            vocab: Vocab::new(vocab),
            seq_len,
            classes,
            law,
        })
    }
}

fn normalized(mut w: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(invalid("weights must be non-negative with positive total"));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

#[derive(Clone, Debug)]
enum Law {
    Tabular(Vec<Vec<f64>>),
    Markov {
        initial: Vec<Vec<f64>>,
        /// Row-major `V × V` per class: `[prev * V + next]`.
        transition: Vec<Vec<f64>>,
    },
    Patterned {
        motifs: Vec<Vec<TokenSeq>>,
        noise: f64,
    },
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    spec: DatasetSpec,
    vocab: Vocab,
    seq_len: usize,
    classes: usize,
    law: Law,
}

impl SyntheticDataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Classes are equiprobable.
    pub fn sample_class(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.classes)
    }

    pub fn sample(&self, class: usize, rng: &mut impl Rng) -> TokenSeq {
        let v = self.vocab.size;
        match &self.law {
            Law::Tabular(tables) => decode(sample_categorical(&tables[class], rng), v, self.seq_len),
            Law::Markov { initial, transition } => {
                let t = &transition[class];
                let mut ids = Vec::with_capacity(self.seq_len);
                let mut cur = sample_categorical(&initial[class], rng);
                ids.push(cur);
                for _ in 1..self.seq_len {
                    cur = sample_categorical(&t[cur * v..(cur + 1) * v], rng);
                    ids.push(cur);
                }
                TokenSeq(ids)
            }
            Law::Patterned { motifs, noise } => {
                let m = &motifs[class][rng.random_range(0..motifs[class].len())];
                TokenSeq(
                    m.ids()
                        .iter()
                        .map(|&tok| if rng.random::<f64>() < *noise { rng.random_range(0..v) } else { tok })
                        .collect(),
                )
            }
        }
    }

    /// Exact probability of a clean sequence under class `class`.
    pub fn prob(&self, seq: &TokenSeq, class: usize) -> f64 {
        let v = self.vocab.size;
        match &self.law {
            Law::Tabular(tables) => tables[class][encode(seq.ids(), v)],
            Law::Markov { initial, transition } => {
                let ids = seq.ids();
                let mut p = initial[class][ids[0]];
                for w in ids.windows(2) {
                    p *= transition[class][w[0] * v + w[1]];
                }
                p
            }
            Law::Patterned { motifs, noise } => {
                let ms = &motifs[class];
                ms.iter()
                    .map(|m| {
                        m.ids()
                            .iter()
                            .zip(seq.ids())
                            .map(|(&a, &b)| noise / v as f64 + if a == b { 1.0 - noise } else { 0.0 })
                            .product::<f64>()
                    })
                    .sum::<f64>()
                    / ms.len() as f64
            }
        }
    }

    /// Exact per-position marginals, `L` rows of `V`.
    pub fn marginals(&self, class: usize) -> Vec<Vec<f64>> {
        let v = self.vocab.size;
        match &self.law {
            Law::Markov { initial, transition } => {
                let mut rows = vec![initial[class].clone()];
                for _ in 1..self.seq_len {
                    rows.push(step_chain(rows.last().expect("nonempty"), &transition[class], v));
                }
                rows
            }
            _ => (0..self.seq_len).map(|i| self.pair_marginal(class, i, i).diagonal()).collect(),
        }
    }

    /// Exact joint of positions `i ≤ j` as a `V × V` table (`[a * V + b]`).
    /// For `i == j` the table is diagonal.
    pub fn pair_marginal(&self, class: usize, i: usize, j: usize) -> PairTable {
        let v = self.vocab.size;
        let (i, j) = (i.min(j), i.max(j));
        let mut table = vec![0.0; v * v];
        match &self.law {
            Law::Tabular(tables) => {
                for (idx, &p) in tables[class].iter().enumerate() {
                    let s = decode(idx, v, self.seq_len);
                    table[s.0[i] * v + s.0[j]] += p;
                }
            }
            Law::Markov { transition, .. } => {
                let mi = &self.marginals(class)[i];
                let mut rows: Vec<Vec<f64>> = (0..v).map(|a| unit(a, v)).collect();
                for _ in i..j {
                    rows = rows.iter().map(|r| step_chain(r, &transition[class], v)).collect();
                }
                for a in 0..v {
                    for b in 0..v {
                        table[a * v + b] = mi[a] * rows[a][b];
                    }
                }
            }
            Law::Patterned { motifs, noise } => {
                let ms = &motifs[class];
                for m in ms {
                    let q = |pos: usize, x: usize| noise / v as f64 + if m.0[pos] == x { 1.0 - noise } else { 0.0 };
                    for a in 0..v {
                        if i == j {
                            table[a * v + a] += q(i, a) / ms.len() as f64;
                        } else {
                            for b in 0..v {
                                table[a * v + b] += q(i, a) * q(j, b) / ms.len() as f64;
                            }
                        }
                    }
                }
            }
        }
        PairTable { vocab: v, table }
    }

    pub fn exact_joint(&self, class: usize) -> Result<ExactJoint> {
        let size = ExactJoint::checked_size(self.vocab.size, self.seq_len)?;
        let probs = (0..size)
            .map(|idx| self.prob(&decode(idx, self.vocab.size, self.seq_len), class))
            .collect();
        ExactJoint::new(self.vocab.size, self.seq_len, probs)
    }
}

/// `V × V` joint of two positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable {
    pub vocab: usize,
    pub table: Vec<f64>,
}

impl PairTable {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.vocab).map(|a| self.table[a * self.vocab + a]).collect()
    }
}

fn unit(a: usize, v: usize) -> Vec<f64> {
    let mut r = vec![0.0; v];
    r[a] = 1.0;
    r
}

fn step_chain(p: &[f64], t: &[f64], v: usize) -> Vec<f64> {
    let mut out = vec![0.0; v];
    for (a, &pa) in p.iter().enumerate() {
        for (o, &tv) in out.iter_mut().zip(&t[a * v..(a + 1) * v]) {
            *o += pa * tv;
        }
    }
    out
}

/// Index of a clean sequence in a dense `V^L` table, first position most significant.
pub fn encode(ids: &[usize], v: usize) -> usize {
    ids.iter().fold(0, |acc, &x| acc * v + x)
}

pub fn decode(mut idx: usize, v: usize, len: usize) -> TokenSeq {
    let mut ids = vec![0; len];
    for slot in ids.iter_mut().rev() {
        *slot = idx % v;
        idx /= v;
    }
    TokenSeq(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn markov() -> SyntheticDataset {
        DatasetSpec::MarkovChain {
            vocab: 4,
            seq_len: 3,
            classes: 2,
            seed: 9,
            branching: 2,
            leak: 0.05,
        }
        .build()
        .unwrap()
    }

    #[test]
    fn encode_decode_inverse() {
        for idx in 0..64 {
            assert_eq!(encode(decode(idx, 4, 3).ids(), 4), idx);
        }
    }

    #[test]
    fn every_kind_sums_to_one_and_marginals_agree_with_joint() {
        let specs = [
            DatasetSpec::Tabular {
                vocab: 3,
                seq_len: 2,
                classes: 2,
                seed: 1,
                spread: 1.0,
                table: None,
            },
            DatasetSpec::MarkovChain {
                vocab: 4,
                seq_len: 3,
                classes: 2,
                seed: 9,
                branching: 2,
                leak: 0.05,
            },
            DatasetSpec::Patterned {
                vocab: 3,
                seq_len: 3,
                classes: 2,
                seed: 4,
                motifs_per_class: 2,
                noise: 0.2,
                motifs: None,
            },
        ];
        for spec in specs {
            let ds = spec.build().unwrap();
            for c in 0..ds.classes() {
                let joint = ds.exact_joint(c).unwrap();
                assert!((joint.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let from_joint = joint.marginals();
                for (a, b) in ds.marginals(c).iter().zip(&from_joint) {
                    for (x, y) in a.iter().zip(b) {
                        assert!((x - y).abs() < 1e-12, "{spec:?}");
                    }
                }
                let pair = ds.pair_marginal(c, 0, 2.min(ds.seq_len() - 1));
                let brute = joint.pair_marginal(0, 2.min(ds.seq_len() - 1));
                for (x, y) in pair.table.iter().zip(&brute) {
                    assert!((x - y).abs() < 1e-12, "{spec:?}");
                }
            }
        }
    }

    #[test]
    fn sampler_agrees_with_exact_law() {
        let ds = markov();
        let joint = ds.exact_joint(1).unwrap();
        let mut rng = StreamRng::new(5, 5);
        let mut counts = vec![0.0; joint.probs().len()];
        let n = 100_000;
        for _ in 0..n {
            counts[encode(ds.sample(1, &mut rng).ids(), 4)] += 1.0 / n as f64;
        }
        let emp = ExactJoint::new(4, 3, counts).unwrap();
        let tv = crate::eval::tv_distance(&emp, &joint).unwrap();
        assert!(tv <= 0.01, "tv {tv}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = markov();
        let b = markov();
        let s = TokenSeq(vec![0, 1, 2]);
        assert_eq!(a.prob(&s, 0), b.prob(&s, 0));
    }

    #[test]
    fn spec_json_rejects_unknown_keys() {
        let ok = r#"{"kind":"markov_chain","vocab":4,"seq_len":3,"classes":1,"seed":2}"#;
        let spec: DatasetSpec = serde_json::from_str(ok).unwrap();
        assert_eq!(serde_json::from_str::<DatasetSpec>(&serde_json::to_string(&spec).unwrap()).unwrap(), spec);
        let bad = r#"{"kind":"markov_chain","vocab":4,"seq_len":3,"classes":1,"seed":2,"colour":1}"#;
        assert!(serde_json::from_str::<DatasetSpec>(bad).is_err());
    }
}
