use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::sample_categorical;
use crate::error::{invalid, Result};
use crate::model::{softmax_temperature, EmbeddingPerturbation, ModelParams};
use crate::tokens::{Condition, TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Exactly `round(r_init·L)` positions are masked.
    #[default]
    ExactCount,
    /// Each position is masked independently with probability `r_init`.
    Bernoulli,
}

/// How the one-step generator's input is drawn: a fraction `r_init` of
/// `[M]` tokens, uniform image tokens elsewhere, and Gaussian noise of
/// strength `sigma_init` on the token embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitStrategy {
    pub r_init: f64,
    #[serde(default)]
    pub sigma_init: f64,
    #[serde(default)]
    pub placement: Placement,
}

impl InitStrategy {
    pub fn all_masked() -> Self {
        Self {
            r_init: 1.0,
            sigma_init: 0.0,
            placement: Placement::ExactCount,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_init) || !(0.0..=1.0).contains(&self.sigma_init) {
            return Err(invalid(format!(
                "r_init ({}) and sigma_init ({}) must lie in [0, 1]",
                self.r_init, self.sigma_init
            )));
        }
        Ok(())
    }
}

/// One initial sequence, plus an embedding perturbation when `sigma_init > 0`.
pub fn sample_init(
    init: &InitStrategy,
    vocab: Vocab,
    len: usize,
    d_model: usize,
    rng: &mut impl Rng,
) -> Result<(TokenSeq, Option<EmbeddingPerturbation>)> {
    init.validate()?;
    let mut masked = vec![false; len];
    match init.placement {
        Placement::ExactCount => {
            let n = (init.r_init * len as f64).round() as usize;
            let mut order: Vec<usize> = (0..len).collect();
            for j in 0..n {
                let pick = rng.random_range(j..len);
                order.swap(j, pick);
                masked[order[j]] = true;
            }
        }
        Placement::Bernoulli => masked.iter_mut().for_each(|m| *m = rng.random::<f64>() < init.r_init),
    }
    let ids = masked
        .iter()
        .map(|&m| if m { vocab.mask() } else { rng.random_range(0..vocab.size) })
        .collect();
    let perturb = (init.sigma_init > 0.0).then(|| EmbeddingPerturbation::sample(init.sigma_init, len, d_model, rng));
    Ok((TokenSeq(ids), perturb))
}

/// `n` draws of [`sample_init`] shaped for a batched forward pass.
pub fn sample_init_batch(
    init: &InitStrategy,
    model: &ModelParams,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<TokenSeq>, Option<Vec<EmbeddingPerturbation>>)> {
    let cfg = model.config();
    let mut seqs = Vec::with_capacity(n);
    let mut perturb = Vec::new();
    for _ in 0..n {
        let (s, p) = sample_init(init, cfg.vocab(), cfg.seq_len, cfg.d_model, rng)?;
        seqs.push(s);
        perturb.extend(p);
    }
    Ok((seqs, (!perturb.is_empty()).then_some(perturb)))
}

/// One-step generation: one forward pass, then an independent draw per position.
pub fn generate_onestep(
    generator: &ModelParams,
    init: &InitStrategy,
    conds: &[Condition],
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<TokenSeq>> {
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let (seqs, perturb) = sample_init_batch(init, generator, conds.len(), rng)?;
    let logits = generator.predict_logits(&seqs, conds, perturb.as_deref())?;
    let probs = softmax_temperature(&logits, temperature)?;
    Ok((0..conds.len())
        .map(|b| TokenSeq((0..probs.len).map(|i| sample_categorical(probs.row(b, i), rng)).collect()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn all_masked_is_deterministic() {
        let mut rng = StreamRng::new(0, 0);
        let (s, p) = sample_init(&InitStrategy::all_masked(), Vocab::new(5), 6, 4, &mut rng).unwrap();
        assert_eq!(s, TokenSeq::all_masked(6, Vocab::new(5)));
        assert!(p.is_none());
    }

    #[test]
    fn exact_count_masks_exactly() {
        let mut rng = StreamRng::new(0, 0);
        let init = InitStrategy {
            r_init: 0.6,
            sigma_init: 0.0,
            placement: Placement::ExactCount,
        };
        let (s, _) = sample_init(&init, Vocab::new(5), 1000, 4, &mut rng).unwrap();
        assert_eq!(s.mask_count(Vocab::new(5)), 600);
    }

    #[test]
    fn rejects_out_of_range_strategy() {
        let init = InitStrategy {
            r_init: 1.5,
            sigma_init: 0.0,
            placement: Placement::Bernoulli,
        };
        assert!(init.validate().is_err());
    }
}
