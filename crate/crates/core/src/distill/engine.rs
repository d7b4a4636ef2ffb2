use maskdistill_tensor::{Array, Checkpoint, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::init::{sample_init_batch, InitStrategy};
use super::weight::{loss_weight, LossWeight};
use crate::diffusion::{forward_mask, sample_categorical, MaskSchedule};
use crate::divergence::{div_grad, DivergenceSpec, TokenDistPair};
use crate::error::{invalid, Error, Result};
use crate::eval::entropy;
use crate::model::{cfg_combine, softmax_temperature, Grid, ModelConfig, ModelParams};
use crate::optim::{ema_update, Adam, AdamConfig};
use crate::rng::{streams, RngState, StreamRng};
use crate::teacher::mdm_loss_on_tape;
use crate::tokens::{Condition, TokenSeq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub init: InitStrategy,
    pub divergence: DivergenceSpec,
    #[serde(default)]
    pub weight: LossWeight,
    /// Guidance applied to the teacher's conditionals.
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
    pub schedule: MaskSchedule,
    pub iterations: u64,
    pub batch_size: usize,
    pub generator_optimizer: AdamConfig,
    pub aux_optimizer: AdamConfig,
    #[serde(default = "default_ema")]
    pub ema_rate: f64,
    /// Auxiliary updates per iteration, each with a fresh `t′`.
    #[serde(default = "default_aux_updates")]
    pub aux_updates: usize,
    pub seed: u64,
}

fn default_cfg_scale() -> f64 {
    2.0
}
fn default_ema() -> f64 {
    0.9999
}
fn default_aux_updates() -> usize {
    1
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.init.validate()?;
        self.divergence.validate()?;
        if self.batch_size == 0 || self.aux_updates == 0 {
            return Err(invalid("batch_size and aux_updates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(invalid("ema_rate must lie in [0, 1]"));
        }
        if !(self.weight.delta > 0.0) {
            return Err(invalid("loss weight delta must be positive"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(invalid("cfg_scale must be finite"));
        }
        if !(self.generator_optimizer.lr > 0.0) || !(self.aux_optimizer.lr > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Which parts of the generator-step tape ended up holding gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradAudit {
    /// Teacher forward nodes with a gradient.
    pub teacher_nodes: usize,
    /// Auxiliary-model forward nodes with a gradient.
    pub aux_nodes: usize,
    /// Generator embedding tables with a gradient.
    pub embedding_tables: usize,
    /// Nodes on the sampling path with a gradient.
    pub sampling_nodes: usize,
}

impl GradAudit {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

/// Frozen per-position gradients of the divergence w.r.t. the generator logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[B·L, V]`; zero rows at unmasked positions and skipped sequences.
    pub g: Array,
    /// `w(t)` per kept sequence.
    pub weights: Vec<f64>,
    /// Masked count per kept sequence.
    pub masked: Vec<usize>,
}

/// Builds `g_i = w/(L_M·B_kept) · ∇D(p_φ^i ‖ p_ψ^i)` for every masked
/// position `i` of every kept sequence.
///
/// `p_phi` and `p_psi` hold one sequence per kept index, in `kept` order;
/// `x_tilde` and `x_theta` are indexed by batch position.
pub fn divergence_targets(
    p_phi: &Grid,
    p_psi: &Grid,
    kept: &[usize],
    x_tilde: &[TokenSeq],
    x_theta: &[TokenSeq],
    batch: usize,
    div: &DivergenceSpec,
    weight: &LossWeight,
) -> Result<Targets> {
    let (l, v) = (p_phi.len, p_phi.vocab);
    if p_psi.len != l || p_psi.vocab != v || p_phi.batch != kept.len() || p_psi.batch != kept.len() {
        return Err(invalid("teacher and auxiliary grids do not match the kept batch"));
    }
    let mask = v;
    let mut g = vec![0.0; batch * l * v];
    let mut weights = Vec::with_capacity(kept.len());
    let mut masked_counts = Vec::with_capacity(kept.len());
    for (k, &b) in kept.iter().enumerate() {
        let masked: Vec<usize> = (0..l).filter(|&i| x_tilde[b].0[i] == mask).collect();
        if masked.is_empty() {
            return Err(invalid("kept sequence has no masked position"));
        }
        let sel_psi: Vec<f64> = masked.iter().map(|&i| p_psi.row(k, i)[x_theta[b].0[i]]).collect();
        let sel_phi: Vec<f64> = masked.iter().map(|&i| p_phi.row(k, i)[x_theta[b].0[i]]).collect();
        let w = loss_weight(weight, &sel_psi, &sel_phi);
        let scale = w / (masked.len() as f64 * kept.len() as f64);
        for &i in &masked {
            let pair = TokenDistPair::new(p_phi.row(k, i).to_vec(), p_psi.row(k, i).to_vec())?;
            let grad = div_grad(div, &pair)?;
            let row = &mut g[(b * l + i) * v..(b * l + i + 1) * v];
            for (o, gi) in row.iter_mut().zip(grad) {
                *o = scale * gi;
            }
        }
        weights.push(w);
        masked_counts.push(masked.len());
    }
    Ok(Targets {
        g: Array::new(vec![batch * l, v], g)?,
        weights,
        masked: masked_counts,
    })
}

#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub surrogate_loss: f64,
    pub mean_weight: f64,
    pub mean_t: f64,
    pub mean_masked: f64,
    /// Sequences dropped because `x̃_t` had no masked position.
    pub skipped: usize,
    pub entropy_estimate: f64,
    pub x_theta: Vec<TokenSeq>,
    pub audit: GradAudit,
    /// Generator gradients in parameter order, before the optimizer step.
    pub grads: Vec<Option<Array>>,
}

#[derive(Clone, Debug)]
pub struct AuxStep {
    pub loss: f64,
    pub mean_t: f64,
}

/// One row of the distillation metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: u64,
    pub surrogate_loss: f64,
    pub aux_loss: f64,
    pub w_t: f64,
    pub t: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
    pub entropy_estimate: f64,
    pub skipped: usize,
}

/// Generator θ, auxiliary ψ, frozen teacher φ, the EMA of θ, both
/// optimizers and the random stream.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub theta: ModelParams,
    pub psi: ModelParams,
    pub phi: ModelParams,
    pub ema_theta: ModelParams,
    pub gen_opt: Adam,
    pub aux_opt: Adam,
    pub iter: u64,
    pub rng: StreamRng,
    config: DistillConfig,
    phi_digest: String,
}

impl DistillState {
    /// θ and ψ start as copies of the teacher; every embedding table is frozen.
    pub fn new(teacher: &ModelParams, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        let mut phi = teacher.clone();
        phi.set_trainable(false);
        let mut theta = teacher.clone();
        theta.set_trainable(true);
        theta.freeze_embeddings();
        let psi = theta.clone();
        Ok(Self {
            ema_theta: theta.clone(),
            gen_opt: Adam::new(config.generator_optimizer.clone(), &theta),
            aux_opt: Adam::new(config.aux_optimizer.clone(), &psi),
            phi_digest: phi.digest(),
            rng: StreamRng::new(config.seed, streams::DISTILL),
            iter: 0,
            theta,
            psi,
            phi,
            config,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    /// Whether φ still hashes to its value at construction.
    pub fn teacher_unchanged(&self) -> bool {
        self.phi.digest() == self.phi_digest
    }

    pub fn sample_conditions(&mut self, n: usize) -> Vec<Condition> {
        let classes = self.theta.config().classes;
        (0..n).map(|_| Condition::Class(self.rng.random_range(0..classes))).collect()
    }

    fn teacher_probs(&self, tape: &mut Tape, seqs: &[TokenSeq], conds: &[Condition]) -> Result<(Grid, std::ops::Range<usize>)> {
        let cfg = self.phi.config();
        let to_grid = |tape: &Tape, v| Grid::from_rows(seqs.len(), cfg.seq_len, cfg.vocab, tape.value(v).data().to_vec());
        let cond = self.phi.forward(tape, seqs, conds, None, false)?;
        let mut nodes = cond.nodes.clone();
        let mut z = to_grid(tape, cond.logits)?;
        if self.config.cfg_scale != 1.0 {
            let nulls = vec![Condition::Null; seqs.len()];
            let uncond = self.phi.forward(tape, seqs, &nulls, None, false)?;
            nodes.end = uncond.nodes.end;
            z = cfg_combine(&z, &to_grid(tape, uncond.logits)?, self.config.cfg_scale)?;
        }
        Ok((softmax_temperature(&z, 1.0)?, nodes))
    }

    /// Generator update for one minibatch of conditions.
    pub fn generator_step(&mut self, conds: &[Condition]) -> Result<GeneratorStep> {
        let cfg = self.theta.config().clone();
        let (n, l, v) = (conds.len(), cfg.seq_len, cfg.vocab);
        let vocab = cfg.vocab();
        let (x_init, perturb) = sample_init_batch(&self.config.init, &self.theta, n, &mut self.rng)?;

        let mut tape = Tape::new();
        let gen = self.theta.forward(&mut tape, &x_init, conds, perturb.as_deref(), true)?;
        let frozen = tape.stop_gradient(gen.logits)?;
        let p_theta = tape.softmax(frozen)?;
        let sampling = frozen.index()..p_theta.index() + 1;
        let pt = tape.value(p_theta).data();
        let entropy_estimate = pt.chunks(v).map(entropy).sum::<f64>() / (n * l) as f64;
        let x_theta: Vec<TokenSeq> = (0..n)
            .map(|b| TokenSeq((0..l).map(|i| sample_categorical(&pt[(b * l + i) * v..(b * l + i + 1) * v], &mut self.rng)).collect()))
            .collect();

        let mut ts = Vec::with_capacity(n);
        let mut x_tilde = Vec::with_capacity(n);
        for x in &x_theta {
            let t: f64 = self.rng.random();
            x_tilde.push(forward_mask(x, vocab, self.config.schedule.ratio(t)?, &mut self.rng)?);
            ts.push(t);
        }
        let mean_t = ts.iter().sum::<f64>() / n as f64;
        let kept: Vec<usize> = (0..n).filter(|&b| x_tilde[b].mask_count(vocab) > 0).collect();
        let skipped = n - kept.len();
        if kept.is_empty() {
            log::info!("iteration {}: no masked position in any x̃_t, generator update skipped", self.iter);
            return Ok(GeneratorStep {
                surrogate_loss: 0.0,
                mean_weight: 0.0,
                mean_t,
                mean_masked: 0.0,
                skipped,
                entropy_estimate,
                x_theta,
                audit: GradAudit::default(),
                grads: vec![None; self.theta.params().len()],
            });
        }
        if skipped > 0 {
            log::debug!("iteration {}: {skipped} sequences without masked positions skipped", self.iter);
        }
        let kx: Vec<TokenSeq> = kept.iter().map(|&b| x_tilde[b].clone()).collect();
        let kc: Vec<Condition> = kept.iter().map(|&b| conds[b]).collect();
        let (p_phi, teacher_nodes) = self.teacher_probs(&mut tape, &kx, &kc)?;
        let aux = self.psi.forward(&mut tape, &kx, &kc, None, false)?;
        let p_psi = softmax_temperature(
            &Grid::from_rows(kx.len(), l, v, tape.value(aux.logits).data().to_vec())?,
            1.0,
        )?;
        let targets = divergence_targets(
            &p_phi,
            &p_psi,
            &kept,
            &x_tilde,
            &x_theta,
            n,
            &self.config.divergence,
            &self.config.weight,
        )?;
        let g = tape.constant(targets.g)?;
        let prod = tape.mul(gen.logits, g)?;
        let loss = tape.sum_all(prod)?;
        let surrogate_loss = tape.value(loss).item();
        if !surrogate_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "surrogate loss",
                iter: self.iter,
            });
        }
        tape.backward(loss)?;

        let audit = GradAudit {
            teacher_nodes: tape.grads_in(teacher_nodes),
            aux_nodes: tape.grads_in(aux.nodes.clone()),
            embedding_tables: self
                .theta
                .params()
                .iter()
                .zip(&gen.leaves)
                .filter(|(p, &leaf)| p.is_embedding() && tape.grad(leaf).is_some())
                .count(),
            sampling_nodes: tape.grads_in(sampling),
        };
        if !audit.is_clean() {
            return Err(Error::GradientLeak(format!("{audit:?}")));
        }
        let grads: Vec<Option<Array>> = gen.leaves.iter().map(|&leaf| tape.grad(leaf).cloned()).collect();
        self.gen_opt.step(&mut self.theta, &grads)?;
        ema_update(&mut self.ema_theta, &self.theta, self.config.ema_rate);
        Ok(GeneratorStep {
            surrogate_loss,
            mean_weight: targets.weights.iter().sum::<f64>() / targets.weights.len() as f64,
            mean_t,
            mean_masked: targets.masked.iter().sum::<usize>() as f64 / targets.masked.len() as f64,
            skipped,
            entropy_estimate,
            x_theta,
            audit,
            grads,
        })
    }

    /// Cross-entropy updates of ψ on the generator's own samples.
    pub fn auxiliary_step(&mut self, x_theta: &[TokenSeq], conds: &[Condition]) -> Result<AuxStep> {
        let vocab = self.psi.vocab();
        let mut losses = 0.0;
        let mut t_sum = 0.0;
        for _ in 0..self.config.aux_updates {
            let mut x_t = Vec::with_capacity(x_theta.len());
            for x in x_theta {
                let t: f64 = self.rng.random();
                t_sum += t;
                x_t.push(forward_mask(x, vocab, self.config.schedule.ratio(t)?, &mut self.rng)?);
            }
            if x_t.iter().all(|s| s.mask_count(vocab) == 0) {
                log::info!("iteration {}: no masked position for the auxiliary update, skipped", self.iter);
                continue;
            }
            let mut tape = Tape::new();
            let fwd = self.psi.forward(&mut tape, &x_t, conds, None, true)?;
            let loss = mdm_loss_on_tape(&mut tape, fwd.logits, x_theta, &x_t, vocab)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "auxiliary loss",
                    iter: self.iter,
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Array>> = fwd.leaves.iter().map(|&leaf| tape.grad(leaf).cloned()).collect();
            self.aux_opt.step(&mut self.psi, &grads)?;
            losses += value;
        }
        let k = self.config.aux_updates as f64;
        Ok(AuxStep {
            loss: losses / k,
            mean_t: t_sum / (k * x_theta.len().max(1) as f64),
        })
    }

    /// One full iteration: conditions, generator update, auxiliary update.
    pub fn step(&mut self) -> Result<IterationLog> {
        let conds = self.sample_conditions(self.config.batch_size);
        let gen = self.generator_step(&conds)?;
        let aux = self.auxiliary_step(&gen.x_theta, &conds)?;
        self.iter += 1;
        Ok(IterationLog {
            iter: self.iter,
            surrogate_loss: gen.surrogate_loss,
            aux_loss: aux.loss,
            w_t: gen.mean_weight,
            t: gen.mean_t,
            l_m: gen.mean_masked,
            entropy_estimate: gen.entropy_estimate,
            skipped: gen.skipped,
        })
    }

    /// Everything needed to continue bit-identically, except the teacher.
    pub fn save(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "distill",
            "iter": self.iter,
            "rng": self.rng.state(),
            "generator_optimizer_step": self.gen_opt.steps_taken(),
            "aux_optimizer_step": self.aux_opt.steps_taken(),
            "teacher_digest": self.phi_digest,
            "model": self.theta.config(),
            "config": self.config,
        }));
        self.theta.write_into(&mut ck, "theta");
        self.psi.write_into(&mut ck, "psi");
        self.ema_theta.write_into(&mut ck, "ema");
        self.gen_opt.write_into(&mut ck, "adam_theta", &self.theta);
        self.aux_opt.write_into(&mut ck, "adam_psi", &self.psi);
        ck
    }

    pub fn restore(teacher: &ModelParams, config: DistillConfig, ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        let field = |k: &str| meta.get(k).ok_or_else(|| invalid(format!("distill checkpoint lacks `{k}`")));
        let digest: String = serde_json::from_value(field("teacher_digest")?.clone())?;
        let mut state = Self::new(teacher, config)?;
        if digest != state.phi_digest {
            return Err(invalid("distill checkpoint was written against a different teacher"));
        }
        let model: ModelConfig = serde_json::from_value(field("model")?.clone())?;
        let load = |prefix| -> Result<ModelParams> {
            let mut p = ModelParams::read_from(ck, prefix, model.clone())?;
            p.freeze_embeddings();
            Ok(p)
        };
        state.theta = load("theta")?;
        state.psi = load("psi")?;
        state.ema_theta = load("ema")?;
        let gen_step: u64 = serde_json::from_value(field("generator_optimizer_step")?.clone())?;
        let aux_step: u64 = serde_json::from_value(field("aux_optimizer_step")?.clone())?;
        state.gen_opt = Adam::read_from(ck, "adam_theta", state.config.generator_optimizer.clone(), &state.theta, gen_step)?;
        state.aux_opt = Adam::read_from(ck, "adam_psi", state.config.aux_optimizer.clone(), &state.psi, aux_step)?;
        let rng: RngState = serde_json::from_value(field("rng")?.clone())?;
        state.rng = StreamRng::from_state(&rng)?;
        state.iter = serde_json::from_value(field("iter")?.clone())?;
        Ok(state)
    }
}

pub struct DistillOutcome {
    pub generator: ModelParams,
    pub ema: ModelParams,
    pub aux: ModelParams,
    pub log: Vec<IterationLog>,
}

/// Runs every iteration of `config` and returns the generator and its EMA.
pub fn run_distillation(teacher: &ModelParams, config: DistillConfig) -> Result<DistillOutcome> {
    let mut state = DistillState::new(teacher, config)?;
    let mut log = Vec::with_capacity(state.config.iterations as usize);
    while state.iter < state.config.iterations {
        let entry = state.step()?;
        log::debug!(
            "distill iter {} surrogate {:.4e} aux {:.4} entropy {:.4}",
            entry.iter,
            entry.surrogate_loss,
            entry.aux_loss,
            entry.entropy_estimate
        );
        log.push(entry);
    }
    if !state.teacher_unchanged() {
        return Err(invalid("teacher parameters changed during distillation"));
    }
    Ok(DistillOutcome {
        generator: state.theta,
        ema: state.ema_theta,
        aux: state.psi,
        log,
    })
}
