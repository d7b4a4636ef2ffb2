use std::collections::BTreeMap;

use rand::Rng;

use super::ExactJoint;
use crate::diffusion::{fixed_count_plan, SamplerConfig, SamplerMode};
use crate::distill::{sample_init_batch, InitStrategy};
use crate::error::{invalid, Result};
use crate::model::{guided_probs, softmax_temperature, Denoiser, ModelParams};
use crate::tokens::{Condition, TokenSeq};

const BATCH: usize = 256;

/// Exact law of the multi-step reverse chain started from all-`[M]`.
///
/// Dynamic programming over partially masked states: each step expands a
/// state into every combination of fill decisions and token draws, using the
/// same transition law as [`crate::diffusion::sample_multistep`].
pub fn enumerate_multistep(den: &dyn Denoiser, cond: Condition, sampler: &SamplerConfig) -> Result<ExactJoint> {
    sampler.validate()?;
    let v = den.vocab().size;
    let len = den.seq_len();
    ExactJoint::checked_size(v, len)?;
    let base = v + 1;
    let weights: Vec<usize> = (0..len).map(|i| base.pow((len - 1 - i) as u32)).collect();
    let weights = &weights;
    let digit = |state: usize, i: usize| state / weights[i] % base;
    let all_masked: usize = weights.iter().map(|w| v * w).sum();
    let plan = match sampler.mode {
        SamplerMode::FixedCount => fixed_count_plan(len, sampler.schedule, sampler.steps)?,
        SamplerMode::Stochastic => Vec::new(),
    };

    let mut frontier: BTreeMap<usize, f64> = BTreeMap::from([(all_masked, 1.0)]);
    for (k, (r_t, r_s)) in sampler.ratio_pairs()?.into_iter().enumerate() {
        let (open, done): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            frontier.into_iter().partition(|&(s, _)| (0..len).any(|i| digit(s, i) == v));
        let mut next: BTreeMap<usize, f64> = done.into_iter().collect();
        for chunk in open.chunks(BATCH) {
            let seqs: Vec<TokenSeq> = chunk
                .iter()
                .map(|&(s, _)| TokenSeq((0..len).map(|i| digit(s, i)).collect()))
                .collect();
            let conds = vec![cond; seqs.len()];
            let probs = guided_probs(den, &seqs, &conds, &sampler.guidance)?;
            for (b, &(state, mass)) in chunk.iter().enumerate() {
                let masked: Vec<usize> = (0..len).filter(|&i| digit(state, i) == v).collect();
                let mut branches: Vec<(usize, f64)> = Vec::new();
                match sampler.mode {
                    SamplerMode::Stochastic => {
                        let fill = (r_t - r_s) / r_t;
                        let mut partial = vec![(state, mass)];
                        for &i in &masked {
                            let row = probs.row(b, i);
                            let mut grown = Vec::with_capacity(partial.len() * (v + 1));
                            for &(s, p) in &partial {
                                if fill < 1.0 {
                                    grown.push((s, p * (1.0 - fill)));
                                }
                                for (tok, &q) in row.iter().enumerate() {
                                    if q > 0.0 {
                                        grown.push((s - v * weights[i] + tok * weights[i], p * fill * q));
                                    }
                                }
                            }
                            partial = grown;
                        }
                        branches = partial;
                    }
                    SamplerMode::FixedCount => {
                        let n = plan[k].min(masked.len());
                        let subsets = combinations(&masked, n);
                        let share = mass / subsets.len() as f64;
                        for subset in subsets {
                            let mut partial = vec![(state, share)];
                            for &i in &subset {
                                let row = probs.row(b, i);
                                partial = partial
                                    .iter()
                                    .flat_map(|&(s, p)| {
                                        row.iter()
                                            .enumerate()
                                            .filter(|(_, &q)| q > 0.0)
                                            .map(move |(tok, &q)| (s - v * weights[i] + tok * weights[i], p * q))
                                    })
                                    .collect();
                            }
                            branches.extend(partial);
                        }
                    }
                }
                for (s, p) in branches {
                    *next.entry(s).or_insert(0.0) += p;
                }
            }
        }
        frontier = next;
    }

    let mut probs = vec![0.0; ExactJoint::checked_size(v, len)?];
    for (state, p) in frontier {
        let mut idx = 0;
        for i in 0..len {
            let tok = digit(state, i);
            if tok == v {
                return Err(invalid("reverse chain finished with masked positions"));
            }
            idx = idx * v + tok;
        }
        probs[idx] += p;
    }
    ExactJoint::new(v, len, probs)
}

fn combinations(items: &[usize], n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    if items.len() < n {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (k, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[k + 1..], n - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// `(1/n) Σ Π_i softmax(z_θ^i(x_init)/τ)` over `n_init` sampled initial sequences.
pub fn student_onestep_joint(
    generator: &ModelParams,
    init: &InitStrategy,
    cond: Condition,
    n_init: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<ExactJoint> {
    if n_init == 0 {
        return Err(invalid("n_init must be positive"));
    }
    let cfg = generator.config();
    let v = cfg.vocab;
    let size = ExactJoint::checked_size(v, cfg.seq_len)?;
    let mut acc = vec![0.0; size];
    let mut left = n_init;
    while left > 0 {
        let n = left.min(BATCH);
        left -= n;
        let (seqs, perturb) = sample_init_batch(init, generator, n, rng)?;
        let conds = vec![cond; n];
        let logits = generator.predict_logits(&seqs, &conds, perturb.as_deref())?;
        let probs = softmax_temperature(&logits, temperature)?;
        for b in 0..n {
            let rows: Vec<&[f64]> = (0..cfg.seq_len).map(|i| probs.row(b, i)).collect();
            let joint = ExactJoint::product(&rows)?;
            for (a, p) in acc.iter_mut().zip(joint.probs()) {
                *a += p;
            }
        }
    }
    let total: f64 = acc.iter().sum();
    acc.iter_mut().for_each(|a| *a /= total);
    ExactJoint::new(v, cfg.seq_len, acc)
}
