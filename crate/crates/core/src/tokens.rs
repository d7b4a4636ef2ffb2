use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image-token vocabulary of size `V`, extended with the mask token `[M]`
/// (id `V`) and the null-condition token (id `V + 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn mask(self) -> usize {
        self.size
    }

    pub fn null(self) -> usize {
        self.size + 1
    }

    /// Rows in the token embedding table.
    pub fn extended(self) -> usize {
        self.size + 2
    }
}

/// A fixed-length sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn all_masked(len: usize, vocab: Vocab) -> Self {
        Self(vec![vocab.mask(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn is_masked(&self, i: usize, vocab: Vocab) -> bool {
        self.0[i] == vocab.mask()
    }

    pub fn mask_count(&self, vocab: Vocab) -> usize {
        self.0.iter().filter(|&&t| t == vocab.mask()).count()
    }

    pub fn masked_positions(&self, vocab: Vocab) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.0[i] == vocab.mask()).collect()
    }

    /// Checks every id lies in `[0, max]`.
    pub fn check_range(&self, max: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t > max) {
            Some(&id) => Err(Error::TokenOutOfRange { id, max }),
            None => Ok(()),
        }
    }
}

/// Class label `c`, or the null condition used by the unconditional branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Condition {
    Class(usize),
    Null,
}

impl From<Option<usize>> for Condition {
    fn from(v: Option<usize>) -> Self {
        v.map_or(Condition::Null, Condition::Class)
    }
}

impl From<Condition> for Option<usize> {
    fn from(c: Condition) -> Self {
        match c {
            Condition::Class(k) => Some(k),
            Condition::Null => None,
        }
    }
}
