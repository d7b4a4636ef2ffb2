use serde::{Deserialize, Serialize};

use super::enumerate::{enumerate_multistep, student_onestep_joint};
use super::metrics::{entropy, support_histogram, tv_distance, SampleStats, SupportHistogram};
use super::ExactJoint;
use crate::diffusion::{sample_multistep, SamplerConfig};
use crate::distill::{generate_onestep, sample_init_batch, InitStrategy};
use crate::error::{invalid, Error, Result};
use crate::model::{guided_probs, softmax_temperature, Denoiser, Grid, Guidance, ModelParams};
use crate::rng::{streams, StreamRng};
use crate::teacher::SyntheticDataset;
use crate::tokens::{Condition, TokenSeq};

/// A model together with the procedure that draws sequences from it.
#[derive(Clone, Copy)]
pub enum SampleSource<'a> {
    OneStep {
        generator: &'a ModelParams,
        init: InitStrategy,
    },
    MultiStep {
        denoiser: &'a dyn Denoiser,
        sampler: &'a SamplerConfig,
    },
}

impl SampleSource<'_> {
    pub fn vocab(&self) -> usize {
        match self {
            SampleSource::OneStep { generator, .. } => generator.config().vocab,
            SampleSource::MultiStep { denoiser, .. } => denoiser.vocab().size,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            SampleSource::OneStep { generator, .. } => generator.config().seq_len,
            SampleSource::MultiStep { denoiser, .. } => denoiser.seq_len(),
        }
    }

    /// `temperature` overrides the source's own when given.
    pub fn samples(&self, cond: Condition, n: usize, temperature: Option<f64>, rng: &mut StreamRng) -> Result<Vec<TokenSeq>> {
        let conds = vec![cond; n];
        match self {
            SampleSource::OneStep { generator, init } => generate_onestep(generator, init, &conds, temperature.unwrap_or(1.0), rng),
            SampleSource::MultiStep { denoiser, sampler } => {
                let mut s = (*sampler).clone();
                if let Some(t) = temperature {
                    s.guidance.temperature = t;
                }
                let mut out = Vec::with_capacity(n);
                for chunk in conds.chunks(256) {
                    out.extend(sample_multistep(*denoiser, chunk, &s, rng)?);
                }
                Ok(out)
            }
        }
    }

    /// Predicted rows the output is drawn from: the generator at `n` initial
    /// draws, or the all-`[M]` conditionals repeated `n` times.
    pub fn first_step_probs(&self, cond: Condition, n: usize, temperature: Option<f64>, rng: &mut StreamRng) -> Result<Grid> {
        match self {
            SampleSource::OneStep { generator, init } => {
                let (seqs, perturb) = sample_init_batch(init, generator, n, rng)?;
                let logits = generator.predict_logits(&seqs, &vec![cond; n], perturb.as_deref())?;
                softmax_temperature(&logits, temperature.unwrap_or(1.0))
            }
            SampleSource::MultiStep { denoiser, sampler } => {
                let mut g: Guidance = sampler.guidance;
                if let Some(t) = temperature {
                    g.temperature = t;
                }
                let masked = TokenSeq::all_masked(denoiser.seq_len(), denoiser.vocab());
                let one = guided_probs(*denoiser, &[masked], &[cond], &g)?;
                Grid::from_rows(n, one.len, one.vocab, one.data.repeat(n))
            }
        }
    }

    /// Exact output law; the one-step law is averaged over `n_init` initial draws.
    pub fn exact_joint(&self, cond: Condition, n_init: usize, temperature: Option<f64>, rng: &mut StreamRng) -> Result<ExactJoint> {
        match self {
            SampleSource::OneStep { generator, init } => {
                student_onestep_joint(generator, init, cond, n_init, temperature.unwrap_or(1.0), rng)
            }
            SampleSource::MultiStep { denoiser, sampler } => {
                let mut s = (*sampler).clone();
                if let Some(t) = temperature {
                    s.guidance.temperature = t;
                }
                enumerate_multistep(*denoiser, cond, &s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub samples_per_class: usize,
    pub temperatures: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub support_threshold: f64,
    /// Initial draws behind each exact one-step law and support histogram.
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    pub seed: u64,
}

fn default_threshold() -> f64 {
    1e-3
}
fn default_n_init() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    /// Mean per-position TV between the two sample sets.
    pub marginal_tv: f64,
    pub cooccurrence_error: f64,
    pub student_entropy: f64,
    pub reference_entropy: f64,
    /// Exact TV when both laws can be enumerated.
    pub joint_tv: Option<f64>,
    /// Mean per-position TV of the student samples against the data law.
    pub data_marginal_tv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub temperature: f64,
    /// Mean exact entropy of the student's predicted rows.
    pub conditional_entropy: f64,
    pub sample_entropy: f64,
    pub marginal_tv: f64,
    pub joint_tv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub classes: Vec<ClassReport>,
    pub temperature_sweep: Vec<TemperatureRow>,
    pub student_support: SupportHistogram,
    pub reference_support: SupportHistogram,
}

impl DiagnosticsReport {
    pub fn mean_marginal_tv(&self) -> f64 {
        self.classes.iter().map(|c| c.marginal_tv).sum::<f64>() / self.classes.len() as f64
    }

    pub fn mean_student_entropy(&self) -> f64 {
        self.classes.iter().map(|c| c.student_entropy).sum::<f64>() / self.classes.len() as f64
    }

    pub fn mean_reference_entropy(&self) -> f64 {
        self.classes.iter().map(|c| c.reference_entropy).sum::<f64>() / self.classes.len() as f64
    }
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::StateSpaceTooLarge { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Compares `student` with `reference` class by class and over a
/// temperature grid. Both sides draw from identical random streams, so a
/// source compared with itself scores zero on every distance.
pub fn diagnostics(
    student: SampleSource<'_>,
    reference: SampleSource<'_>,
    dataset: Option<&SyntheticDataset>,
    classes: usize,
    cfg: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    if student.vocab() != reference.vocab() || student.seq_len() != reference.seq_len() {
        return Err(invalid("student and reference disagree on vocabulary or length"));
    }
    if cfg.samples_per_class == 0 || classes == 0 {
        return Err(invalid("diagnostics need samples and at least one class"));
    }
    let (v, l) = (student.vocab(), student.seq_len());
    let base = StreamRng::new(cfg.seed, streams::EVAL);
    let stream = |k: u64| base.fork(k);
    let n = cfg.samples_per_class;

    let mut reports = Vec::with_capacity(classes);
    let mut student_support = SupportHistogram {
        threshold: cfg.support_threshold,
        counts: Vec::new(),
        histogram: vec![0; v + 1],
    };
    let mut reference_support = student_support.clone();
    for c in 0..classes {
        let cond = Condition::Class(c);
        let key = 1 + c as u64;
        let s = student.samples(cond, n, None, &mut stream(key))?;
        let r = reference.samples(cond, n, None, &mut stream(key))?;
        let ss = SampleStats::from_samples(&s, v, l)?;
        let rs = SampleStats::from_samples(&r, v, l)?;
        let joint_tv = optional((|| {
            let a = student.exact_joint(cond, cfg.n_init, None, &mut stream(key))?;
            let b = reference.exact_joint(cond, cfg.n_init, None, &mut stream(key))?;
            tv_distance(&a, &b)
        })())?;
        let data_marginal_tv = match dataset {
            Some(ds) => Some(ss.marginal_tv(&SampleStats::from_dataset(ds, c))?),
            None => None,
        };
        reports.push(ClassReport {
            class: c,
            marginal_tv: ss.marginal_tv(&rs)?,
            cooccurrence_error: ss.cooccurrence_error(&rs)?,
            student_entropy: ss.entropy(),
            reference_entropy: rs.entropy(),
            joint_tv,
            data_marginal_tv,
        });
        let sp = support_histogram(&student.first_step_probs(cond, cfg.n_init, None, &mut stream(key))?, cfg.support_threshold);
        let rp = support_histogram(&reference.first_step_probs(cond, cfg.n_init, None, &mut stream(key))?, cfg.support_threshold);
        for (acc, h) in [(&mut student_support, sp), (&mut reference_support, rp)] {
            acc.counts.extend(h.counts);
            acc.histogram.iter_mut().zip(h.histogram).for_each(|(a, b)| *a += b);
        }
    }

    let mut sweep = Vec::with_capacity(cfg.temperatures.len());
    for (k, &tau) in cfg.temperatures.iter().enumerate() {
        if !(tau > 0.0) {
            return Err(invalid(format!("temperature {tau} must be positive")));
        }
        let (mut h, mut se, mut tv, mut jtv) = (0.0, 0.0, 0.0, Some(0.0));
        for c in 0..classes {
            let cond = Condition::Class(c);
            let key = 1000 * (k as u64 + 1) + c as u64;
            let probs = student.first_step_probs(cond, cfg.n_init, Some(tau), &mut stream(key))?;
            h += probs.rows().map(entropy).sum::<f64>() / (probs.batch * probs.len) as f64;
            let s = student.samples(cond, n, Some(tau), &mut stream(key))?;
            let r = reference.samples(cond, n, None, &mut stream(key))?;
            let ss = SampleStats::from_samples(&s, v, l)?;
            se += ss.entropy();
            tv += ss.marginal_tv(&SampleStats::from_samples(&r, v, l)?)?;
            let exact = optional((|| {
                let a = student.exact_joint(cond, cfg.n_init, Some(tau), &mut stream(key))?;
                let b = reference.exact_joint(cond, cfg.n_init, None, &mut stream(key))?;
                tv_distance(&a, &b)
            })())?;
            jtv = jtv.zip(exact).map(|(a, b)| a + b);
        }
        let m = classes as f64;
        sweep.push(TemperatureRow {
            temperature: tau,
            conditional_entropy: h / m,
            sample_entropy: se / m,
            marginal_tv: tv / m,
            joint_tv: jtv.map(|x| x / m),
        });
    }
    Ok(DiagnosticsReport {
        classes: reports,
        temperature_sweep: sweep,
        student_support,
        reference_support,
    })
}
