//! Absorbing-state forward process, mask-ratio schedules and the multi-step
//! reverse samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{guided_probs, Denoiser, Grid, Guidance};
use crate::tokens::{Condition, TokenSeq, Vocab};

/// Monotone map `t ↦ r_t` on `[0, 1]` with `r_0 = 0` and `r_1 = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSchedule {
    /// `r_t = t`
    #[default]
    Linear,
    /// `r_t = 1 − cos(πt/2)`
    Cosine,
    /// `r_t = (2/π)·arccos(1 − t)`
    Arccos,
}

impl MaskSchedule {
    pub fn ratio(self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("diffusion time {t} outside [0, 1]")));
        }
        let r = match self {
            MaskSchedule::Linear => t,
            MaskSchedule::Cosine => 1.0 - (std::f64::consts::FRAC_PI_2 * t).cos(),
            MaskSchedule::Arccos => std::f64::consts::FRAC_2_PI * (1.0 - t).acos(),
        };
        // Pin the endpoints against rounding in cos/acos.
        Ok(if t == 0.0 {
            0.0
        } else if t == 1.0 {
            1.0
        } else {
            r.clamp(0.0, 1.0)
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskSchedule::Linear => "linear",
            MaskSchedule::Cosine => "cosine",
            MaskSchedule::Arccos => "arccos",
        }
    }
}

pub fn mask_ratio(schedule: MaskSchedule, t: f64) -> Result<f64> {
    schedule.ratio(t)
}

fn check_ratio(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(invalid(format!("mask ratio {r} outside [0, 1]")))
    }
}

/// Masks each position of `x0` independently with probability `r_t`.
pub fn forward_mask(x0: &TokenSeq, vocab: Vocab, r_t: f64, rng: &mut impl Rng) -> Result<TokenSeq> {
    check_ratio(r_t)?;
    if x0.ids().iter().any(|&t| t >= vocab.size) {
        return Err(invalid("forward_mask expects a clean sequence of image tokens"));
    }
    Ok(TokenSeq(
        x0.ids()
            .iter()
            .map(|&tok| if rng.random::<f64>() < r_t { vocab.mask() } else { tok })
            .collect(),
    ))
}

/// Inverse-CDF draw from a probability row.
pub fn sample_categorical(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// One `t → s` transition of the reverse chain for sequence `b` of `probs`:
/// each masked position is independently filled with probability
/// `(r_t − r_s)/r_t` by a draw from its row; everything else is copied.
pub fn reverse_step(x_t: &TokenSeq, probs: &Grid, b: usize, r_t: f64, r_s: f64, rng: &mut impl Rng) -> Result<TokenSeq> {
    check_ratio(r_t)?;
    check_ratio(r_s)?;
    if r_s >= r_t {
        return Err(invalid(format!("reverse step needs r_s < r_t, got r_s={r_s}, r_t={r_t}")));
    }
    if probs.len != x_t.len() || b >= probs.batch {
        return Err(invalid("probability grid does not match the sequence"));
    }
    let mask = probs.vocab;
    let fill = (r_t - r_s) / r_t;
    let mut out = x_t.clone();
    for (i, tok) in out.0.iter_mut().enumerate() {
        if *tok == mask && (fill >= 1.0 || rng.random::<f64>() < fill) {
            *tok = sample_categorical(probs.row(b, i), rng);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Each masked position is filled independently with probability `(r_t − r_s)/r_t`.
    Stochastic,
    /// A schedule-determined number of positions, chosen uniformly at random, is filled per step.
    FixedCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub schedule: MaskSchedule,
    pub steps: usize,
    pub mode: SamplerMode,
    #[serde(default)]
    pub guidance: Guidance,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("sampler needs at least one step"));
        }
        if !(self.guidance.temperature > 0.0) {
            return Err(invalid("sampler temperature must be positive"));
        }
        Ok(())
    }

    /// `(r_t, r_s)` for each step, on the uniform grid `t_k = 1 − k/N`.
    pub fn ratio_pairs(&self) -> Result<Vec<(f64, f64)>> {
        let n = self.steps as f64;
        (0..self.steps)
            .map(|k| {
                let t = 1.0 - k as f64 / n;
                let s = if k + 1 == self.steps { 0.0 } else { 1.0 - (k + 1) as f64 / n };
                Ok((self.schedule.ratio(t)?, self.schedule.ratio(s)?))
            })
            .collect()
    }
}

/// Positions to unmask at each step in fixed-count mode. The cumulative
/// count after the step ending at `s` is `round(L·(1 − r_s))`, at least one
/// more than before while anything is still masked, and capped so that
/// every later step can still unmask one position.
pub fn fixed_count_plan(len: usize, schedule: MaskSchedule, steps: usize) -> Result<Vec<usize>> {
    let cfg = SamplerConfig {
        schedule,
        steps,
        mode: SamplerMode::FixedCount,
        guidance: Guidance::default(),
    };
    cfg.validate()?;
    let mut done = 0usize;
    let mut plan = Vec::with_capacity(steps);
    for (k, (_, r_s)) in cfg.ratio_pairs()?.into_iter().enumerate() {
        // Leave at least one position for each remaining step when possible.
        let reserve = (steps - 1 - k).min(len.saturating_sub(done + 1));
        let target = ((len as f64) * (1.0 - r_s)).round() as usize;
        let target = target.max(done + 1).min(len - reserve);
        plan.push(target - done);
        done = target;
    }
    Ok(plan)
}

/// Runs the reverse chain from all-`[M]` for every condition in `conds`.
pub fn sample_multistep(den: &dyn Denoiser, conds: &[Condition], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<TokenSeq>> {
    cfg.validate()?;
    let vocab = den.vocab();
    let len = den.seq_len();
    let mut seqs = vec![TokenSeq::all_masked(len, vocab); conds.len()];
    if conds.is_empty() {
        return Ok(seqs);
    }
    let plan = match cfg.mode {
        SamplerMode::FixedCount => fixed_count_plan(len, cfg.schedule, cfg.steps)?,
        SamplerMode::Stochastic => Vec::new(),
    };
    for (k, (r_t, r_s)) in cfg.ratio_pairs()?.into_iter().enumerate() {
        if seqs.iter().all(|s| s.mask_count(vocab) == 0) {
            break;
        }
        let probs = guided_probs(den, &seqs, conds, &cfg.guidance)?;
        for (b, seq) in seqs.iter_mut().enumerate() {
            match cfg.mode {
                SamplerMode::Stochastic => *seq = reverse_step(seq, &probs, b, r_t, r_s, rng)?,
                SamplerMode::FixedCount => {
                    let mut masked = seq.masked_positions(vocab);
                    let n = plan[k].min(masked.len());
                    // Partial Fisher-Yates: the first n entries are a uniform subset.
                    for j in 0..n {
                        let pick = rng.random_range(j..masked.len());
                        masked.swap(j, pick);
                    }
                    for &i in &masked[..n] {
                        seq.0[i] = sample_categorical(probs.row(b, i), rng);
                    }
                }
            }
        }
    }
    Ok(seqs)
}
