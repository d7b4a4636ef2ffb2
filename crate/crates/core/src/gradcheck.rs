//! Finite-difference oracle suite for the divergence gradients and the
//! autodiff engine.

use maskdistill_tensor::gradcheck::relative_error;
use maskdistill_tensor::{Array, Tape};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::divergence::{div_grad, div_value, DivergenceSpec, FGenerator, TokenDistPair};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::StreamRng;
use crate::teacher::mdm_loss_on_tape;
use crate::tokens::{Condition, TokenSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub pairs: usize,
    pub vocabs: Vec<usize>,
    pub tolerance: f64,
    pub zero_sum_tolerance: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            vocabs: vec![2, 8, 32],
            tolerance: 1e-6,
            zero_sum_tolerance: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    /// Largest `|Σ_j g_j|`; `None` where the sum carries no constraint.
    pub max_zero_sum: Option<f64>,
    pub passed: bool,
}

/// The divergences whose closed-form gradients are checked.
pub fn oracle_specs() -> Vec<(String, DivergenceSpec)> {
    let mut specs = vec![("fkl".to_string(), DivergenceSpec::Fkl), ("rkl".to_string(), DivergenceSpec::Rkl)];
    for beta in [-0.2, 0.0, 0.5, 1.0] {
        specs.push((format!("jeffrey(beta={beta})"), DivergenceSpec::Jeffrey { beta }));
    }
    for (name, generator) in [
        ("fdiv(forward_kl)", FGenerator::ForwardKl),
        ("fdiv(reverse_kl)", FGenerator::ReverseKl),
        ("fdiv(jensen_shannon)", FGenerator::JensenShannon),
        ("fdiv(squared_hellinger)", FGenerator::SquaredHellinger),
        ("fdiv(alpha=0.5)", FGenerator::Alpha { alpha: 0.5 }),
    ] {
        specs.push((name.to_string(), DivergenceSpec::FDiv { generator }));
    }
    specs
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Fourth-order central difference.
fn fd4(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |d: f64| {
                probe[i] = x[i] + d;
                let v = f(&probe);
                probe[i] = x[i];
                v
            };
            (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
        })
        .collect()
}

fn random_logits(v: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..v).map(|_| StandardNormal.sample(rng)).collect()
}

/// Closed-form gradient of `D(p_φ ‖ softmax(z))` against finite differences
/// in `z`, for every spec in [`oracle_specs`].
pub fn divergence_oracles(cfg: &OracleConfig) -> Result<Vec<OracleResult>> {
    let mut out = Vec::new();
    for (k, (name, spec)) in oracle_specs().into_iter().enumerate() {
        let mut rng = StreamRng::new(cfg.seed, 100 + k as u64);
        let (mut worst, mut worst_sum, mut cases) = (0.0f64, 0.0f64, 0);
        for &v in &cfg.vocabs {
            for _ in 0..cfg.pairs {
                let teacher = softmax(&random_logits(v, &mut rng));
                let z = random_logits(v, &mut rng);
                let pair = TokenDistPair::new(teacher.clone(), softmax(&z))?;
                let g = div_grad(&spec, &pair)?;
                let f = |z: &[f64]| {
                    TokenDistPair::new(teacher.clone(), softmax(z))
                        .map(|p| div_value(&spec, &p))
                        .unwrap_or(f64::NAN)
                };
                let numeric = fd4(f, &z, 1e-3);
                worst = worst.max(relative_error(&g, &numeric, 1e-8));
                worst_sum = worst_sum.max(g.iter().sum::<f64>().abs());
                cases += 1;
            }
        }
        out.push(OracleResult {
            passed: worst <= cfg.tolerance && worst_sum <= cfg.zero_sum_tolerance,
            name,
            cases,
            max_rel_error: worst,
            max_zero_sum: Some(worst_sum),
        });
    }
    Ok(out)
}

/// `Jeffrey(β) = (1−β)·FKL + β·RKL` on random pairs; reports the largest absolute gap.
pub fn jeffrey_consistency(pairs: usize, vocab: usize, betas: &[f64], seed: u64) -> Result<f64> {
    let mut rng = StreamRng::new(seed, 200);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let pair = TokenDistPair::new(softmax(&random_logits(vocab, &mut rng)), softmax(&random_logits(vocab, &mut rng)))?;
        let (f, r) = (div_value(&DivergenceSpec::Fkl, &pair), div_value(&DivergenceSpec::Rkl, &pair));
        for &beta in betas {
            let j = div_value(&DivergenceSpec::Jeffrey { beta }, &pair);
            worst = worst.max((j - ((1.0 - beta) * f + beta * r)).abs());
        }
    }
    Ok(worst)
}

/// Backward pass of a small transformer's masked cross-entropy against
/// finite differences on `coords` randomly chosen scalars.
pub fn model_oracle(coords: usize, seed: u64, tolerance: f64) -> Result<OracleResult> {
    let config = ModelConfig {
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::new(3, 3, 2)
    };
    let mut rng = StreamRng::new(seed, 300);
    let params = ModelParams::init(config, &mut rng)?;
    let vocab = params.vocab();
    let x0 = vec![TokenSeq(vec![0, 2, 1]), TokenSeq(vec![1, 1, 0])];
    let xt = vec![TokenSeq(vec![vocab.mask(), 2, vocab.mask()]), TokenSeq(vec![vocab.mask(); 3])];
    let conds = [Condition::Class(1), Condition::Null];
    let loss_of = |p: &ModelParams| -> Result<(f64, Vec<Option<Array>>)> {
        let mut tape = Tape::new();
        let f = p.forward(&mut tape, &xt, &conds, None, true)?;
        let loss = mdm_loss_on_tape(&mut tape, f.logits, &x0, &xt, vocab)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), f.leaves.iter().map(|&l| tape.grad(l).cloned()).collect()))
    };
    let (_, grads) = loss_of(&params)?;
    let mut analytic = Vec::with_capacity(coords);
    let mut numeric = Vec::with_capacity(coords);
    let h = 1e-4;
    for _ in 0..coords {
        let which = rng.random_range(0..params.params().len());
        let idx = rng.random_range(0..params.params()[which].value.numel());
        analytic.push(grads[which].as_ref().map_or(0.0, |g| g.data()[idx]));
        let at = |d: f64| -> Result<f64> {
            let mut p = params.clone();
            p.params_mut()[which].value.data_mut()[idx] += d;
            Ok(loss_of(&p)?.0)
        };
        numeric.push((-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h));
    }
    let err = relative_error(&analytic, &numeric, 1e-8);
    Ok(OracleResult {
        name: "transformer masked cross-entropy".into(),
        cases: coords,
        max_rel_error: err,
        max_zero_sum: None,
        passed: err <= tolerance,
    })
}

/// Everything above, as one table.
pub fn run_oracle_suite(cfg: &OracleConfig) -> Result<Vec<OracleResult>> {
    let mut out = divergence_oracles(cfg)?;
    let gap = jeffrey_consistency(1000, 8, &[-0.2, 0.0, 0.3, 0.5, 1.0], cfg.seed)?;
    out.push(OracleResult {
        name: "jeffrey = (1-beta) fkl + beta rkl".into(),
        cases: 1000,
        max_rel_error: gap,
        max_zero_sum: None,
        passed: gap <= 1e-12,
    });
    out.push(model_oracle(60, cfg.seed, cfg.tolerance)?);
    Ok(out)
}
