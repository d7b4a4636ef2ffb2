use super::{ExactJoint, ENUMERATION_LIMIT};
use crate::error::{invalid, Error, Result};
use crate::model::{Denoiser, Grid};
use crate::teacher::SyntheticDataset;
use crate::tokens::{Condition, TokenSeq, Vocab};

/// Ground-truth denoiser: the exact posterior `p(x_0^i = k | x_t, c)` of a
/// known joint, tabulated for every partially masked state.
///
/// The null condition is the equal-weight mixture over classes. States no
/// clean sequence can reach get uniform rows.
#[derive(Clone, Debug)]
pub struct TabularTeacher {
    vocab: Vocab,
    len: usize,
    classes: usize,
    /// Per condition (classes, then null): `states × L × V`.
    rows: Vec<Vec<f64>>,
}

impl TabularTeacher {
    pub fn new(joints: &[ExactJoint]) -> Result<Self> {
        let first = joints.first().ok_or_else(|| invalid("tabular teacher needs at least one class"))?;
        let (v, len) = (first.vocab(), first.seq_len());
        if joints.iter().any(|j| j.vocab() != v || j.seq_len() != len) {
            return Err(invalid("class joints have different supports"));
        }
        let states = (v as u128 + 1).checked_pow(len as u32).unwrap_or(u128::MAX);
        if states > ENUMERATION_LIMIT {
            return Err(Error::StateSpaceTooLarge {
                size: states,
                limit: ENUMERATION_LIMIT,
            });
        }
        let states = states as usize;
        let width = len * v;
        let mut rows = Vec::with_capacity(joints.len() + 1);
        for joint in joints {
            let mut mass = vec![0.0; states * width];
            for (idx, &p) in joint.probs().iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let x = joint.sequence(idx);
                for pattern in 0..(1usize << len) {
                    let state = x
                        .ids()
                        .iter()
                        .enumerate()
                        .fold(0, |acc, (i, &tok)| acc * (v + 1) + if pattern >> i & 1 == 1 { v } else { tok });
                    let base = state * width;
                    for (i, &tok) in x.ids().iter().enumerate() {
                        mass[base + i * v + tok] += p;
                    }
                }
            }
            rows.push(mass);
        }
        let c = joints.len() as f64;
        let null: Vec<f64> = (0..states * width).map(|k| rows.iter().map(|m| m[k]).sum::<f64>() / c).collect();
        rows.push(null);
        for table in &mut rows {
            for row in table.chunks_mut(v) {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|p| *p /= total);
                } else {
                    row.iter_mut().for_each(|p| *p = 1.0 / v as f64);
                }
            }
        }
        Ok(Self {
            vocab: Vocab::new(v),
            len,
            classes: joints.len(),
            rows,
        })
    }

    pub fn from_dataset(ds: &SyntheticDataset) -> Result<Self> {
        let joints = (0..ds.classes()).map(|c| ds.exact_joint(c)).collect::<Result<Vec<_>>>()?;
        Self::new(&joints)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `L × V` posterior rows for a partially masked state.
    pub fn posterior(&self, seq: &TokenSeq, cond: Condition) -> Result<&[f64]> {
        if seq.len() != self.len {
            return Err(invalid("sequence length differs from the tabular teacher"));
        }
        seq.check_range(self.vocab.mask())?;
        let table = match cond {
            Condition::Class(k) if k < self.classes => &self.rows[k],
            Condition::Class(k) => return Err(invalid(format!("class {k} out of range"))),
            Condition::Null => &self.rows[self.classes],
        };
        let state = seq.ids().iter().fold(0, |acc, &t| acc * (self.vocab.size + 1) + t);
        let width = self.len * self.vocab.size;
        Ok(&table[state * width..(state + 1) * width])
    }
}

impl Denoiser for TabularTeacher {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn logits(&self, seqs: &[TokenSeq], conds: &[Condition]) -> Result<Grid> {
        if seqs.len() != conds.len() {
            return Err(invalid("one condition per sequence required"));
        }
        let mut data = Vec::with_capacity(seqs.len() * self.len * self.vocab.size);
        for (s, &c) in seqs.iter().zip(conds) {
            data.extend(self.posterior(s, c)?.iter().map(|p| p.max(1e-300).ln()));
        }
        Grid::from_rows(seqs.len(), self.len, self.vocab.size, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_masked_posterior_is_the_marginal() {
        let joint = ExactJoint::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = TabularTeacher::new(std::slice::from_ref(&joint)).unwrap();
        let post = t.posterior(&TokenSeq(vec![2, 2]), Condition::Class(0)).unwrap();
        let m = joint.marginals();
        assert!((post[0] - m[0][0]).abs() < 1e-15 && (post[3] - m[1][1]).abs() < 1e-15);
        // x_0 = 1 observed: p(x_1 = 1 | x_0 = 1) = 0.4 / 0.7.
        let post = t.posterior(&TokenSeq(vec![1, 2]), Condition::Class(0)).unwrap();
        assert!((post[3] - 0.4 / 0.7).abs() < 1e-15);
        assert_eq!(&post[..2], &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_state_is_uniform() {
        let joint = ExactJoint::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let t = TabularTeacher::new(&[joint]).unwrap();
        let post = t.posterior(&TokenSeq(vec![1, 2]), Condition::Class(0)).unwrap();
        assert_eq!(&post[2..], &[0.5, 0.5]);
    }
}
