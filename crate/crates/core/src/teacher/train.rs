use maskdistill_tensor::{Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_mask, MaskSchedule};
use crate::error::{invalid, Error, Result};
use crate::model::{Grid, ModelConfig, ModelParams};
use crate::optim::{ema_update, Adam, AdamConfig};
use crate::rng::{streams, StreamRng};
use crate::teacher::dataset::SyntheticDataset;
use crate::tokens::{Condition, TokenSeq, Vocab};

/// Masked cross-entropy recorded on `tape`.
///
/// `logits` is `[B·L, V]`. The loss is the mean of `-ln p(x0_i)` over all
/// masked positions of the batch, and a constant zero when nothing is masked.
pub fn mdm_loss_on_tape(tape: &mut Tape, logits: Var, x0: &[TokenSeq], x_t: &[TokenSeq], vocab: Vocab) -> Result<Var> {
    if x0.len() != x_t.len() {
        return Err(invalid("x0 and x_t batch sizes differ"));
    }
    let shape = tape.value(logits).shape().to_vec();
    let v = vocab.size;
    let len = x0.first().map_or(0, |s| s.len());
    if shape != [x0.len() * len, v] {
        return Err(invalid(format!("logits shape {shape:?} does not match batch {}x{len}x{v}", x0.len())));
    }
    let mut flat = Vec::new();
    for (b, (clean, noisy)) in x0.iter().zip(x_t).enumerate() {
        if clean.len() != len || noisy.len() != len {
            return Err(invalid("ragged batch"));
        }
        clean.check_range(v - 1)?;
        for i in 0..len {
            let tok = noisy.0[i];
            if tok == vocab.mask() {
                flat.push((b * len + i) * v + clean.0[i]);
            } else if tok != clean.0[i] {
                return Err(invalid(format!("x_t disagrees with x0 at unmasked position {i} of sequence {b}")));
            }
        }
    }
    if flat.is_empty() {
        return Ok(tape.constant(Array::scalar(0.0))?);
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather_elements(logp, &flat)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// [`mdm_loss_on_tape`] for plain logits.
pub fn mdm_loss(logits: &Grid, x0: &[TokenSeq], x_t: &[TokenSeq]) -> Result<f64> {
    let mut tape = Tape::unchecked();
    let z = tape.leaf(Array::new(vec![logits.batch * logits.len, logits.vocab], logits.data.clone())?, false)?;
    let loss = mdm_loss_on_tape(&mut tape, z, x0, x_t, Vocab::new(logits.vocab))?;
    Ok(tape.value(loss).item())
}

/// Class `c`, replaced by the null condition with probability `p_null`.
pub fn draw_condition(class: usize, p_null: f64, rng: &mut impl Rng) -> Condition {
    if rng.random::<f64>() < p_null {
        Condition::Null
    } else {
        Condition::Class(class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    #[serde(default = "default_dropout")]
    pub cond_dropout: f64,
    #[serde(default)]
    pub schedule: MaskSchedule,
    #[serde(default = "default_ema")]
    pub ema_rate: f64,
    pub seed: u64,
}

fn default_dropout() -> f64 {
    0.1
}
fn default_ema() -> f64 {
    0.9999
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) || !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(invalid("cond_dropout and ema_rate must lie in [0, 1]"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStepLog {
    pub iter: u64,
    pub loss: f64,
    pub masked: usize,
    pub null_conds: usize,
    pub lr: f64,
}

/// Stepwise teacher training state.
pub struct TeacherTrainer<'a> {
    pub params: ModelParams,
    pub ema: ModelParams,
    pub optimizer: Adam,
    pub rng: StreamRng,
    pub iter: u64,
    config: TeacherTrainConfig,
    dataset: &'a SyntheticDataset,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(dataset: &'a SyntheticDataset, model: ModelConfig, config: TeacherTrainConfig) -> Result<Self> {
        config.validate()?;
        let (v, l, c) = dataset.spec().dims();
        if (model.vocab, model.seq_len, model.classes) != (v, l, c) {
            return Err(invalid(format!(
                "model dims ({}, {}, {}) differ from dataset dims ({v}, {l}, {c})",
                model.vocab, model.seq_len, model.classes
            )));
        }
        let params = ModelParams::init(model, &mut StreamRng::new(config.seed, streams::MODEL_INIT))?;
        Ok(Self {
            ema: params.clone(),
            optimizer: Adam::new(config.optimizer.clone(), &params),
            params,
            rng: StreamRng::new(config.seed, streams::TEACHER_TRAIN),
            iter: 0,
            config,
            dataset,
        })
    }

    pub fn config(&self) -> &TeacherTrainConfig {
        &self.config
    }

    pub fn step(&mut self) -> Result<TeacherStepLog> {
        let vocab = self.dataset.vocab();
        let n = self.config.batch_size;
        let mut x0 = Vec::with_capacity(n);
        let mut xt = Vec::with_capacity(n);
        let mut conds = Vec::with_capacity(n);
        for _ in 0..n {
            let class = self.dataset.sample_class(&mut self.rng);
            let clean = self.dataset.sample(class, &mut self.rng);
            conds.push(draw_condition(class, self.config.cond_dropout, &mut self.rng));
            let t: f64 = self.rng.random();
            let r = self.config.schedule.ratio(t)?;
            xt.push(forward_mask(&clean, vocab, r, &mut self.rng)?);
            x0.push(clean);
        }
        let masked = xt.iter().map(|s| s.mask_count(vocab)).sum();
        let mut tape = Tape::new();
        let fwd = self.params.forward(&mut tape, &xt, &conds, None, true)?;
        let loss = mdm_loss_on_tape(&mut tape, fwd.logits, &x0, &xt, vocab)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "teacher loss",
                iter: self.iter,
            });
        }
        let lr = self.optimizer.current_lr();
        if masked > 0 {
            tape.backward(loss)?;
            let grads: Vec<Option<Array>> = fwd.leaves.iter().map(|&v| tape.grad(v).cloned()).collect();
            self.optimizer.step(&mut self.params, &grads)?;
            ema_update(&mut self.ema, &self.params, self.config.ema_rate);
        }
        self.iter += 1;
        Ok(TeacherStepLog {
            iter: self.iter,
            loss: value,
            masked,
            null_conds: conds.iter().filter(|c| **c == Condition::Null).count(),
            lr,
        })
    }
}

pub struct TeacherOutcome {
    pub params: ModelParams,
    pub ema: ModelParams,
    pub log: Vec<TeacherStepLog>,
}

/// Runs all iterations of `config` from a fresh initialization.
pub fn train_teacher(dataset: &SyntheticDataset, model: ModelConfig, config: TeacherTrainConfig) -> Result<TeacherOutcome> {
    let mut trainer = TeacherTrainer::new(dataset, model, config)?;
    let mut log = Vec::with_capacity(trainer.config.iterations as usize);
    while trainer.iter < trainer.config.iterations {
        let entry = trainer.step()?;
        log::debug!("teacher iter {} loss {:.5}", entry.iter, entry.loss);
        log.push(entry);
    }
    Ok(TeacherOutcome {
        params: trainer.params,
        ema: trainer.ema,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_is_zero_without_masks() {
        let g = Grid::from_rows(1, 2, 3, vec![0.0; 6]).unwrap();
        let x = vec![TokenSeq(vec![0, 2])];
        assert_eq!(mdm_loss(&g, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_hand_computation() {
        let g = Grid::from_rows(1, 2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let x0 = vec![TokenSeq(vec![1, 0])];
        let xt = vec![TokenSeq(vec![2, 2])];
        let expect = (2f64.ln() + (1.0 + (-1f64).exp()).ln()) / 2.0;
        assert!((mdm_loss(&g, &x0, &xt).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_unmasked_token_is_rejected() {
        let g = Grid::from_rows(1, 2, 2, vec![0.0; 4]).unwrap();
        assert!(mdm_loss(&g, &[TokenSeq(vec![1, 0])], &[TokenSeq(vec![0, 2])]).is_err());
    }

    #[test]
    fn null_condition_frequency() {
        let mut rng = StreamRng::new(3, 0);
        let n = 10_000;
        let nulls = (0..n).filter(|_| draw_condition(0, 0.1, &mut rng) == Condition::Null).count();
        let se = (0.1f64 * 0.9 / n as f64).sqrt();
        assert!(((nulls as f64 / n as f64) - 0.1).abs() < 3.0 * se, "{nulls}");
    }
}
