use std::cell::RefCell;

use maskdistill::diffusion::{
    fixed_count_plan, forward_mask, mask_ratio, reverse_step, sample_multistep, MaskSchedule, SamplerConfig, SamplerMode,
};
use maskdistill::eval::{enumerate_multistep, tv_distance, ExactJoint, TabularTeacher};
use maskdistill::model::Guidance;
use maskdistill::{Condition, Denoiser, Grid, Result, StreamRng, TokenSeq, Vocab};
use proptest::prelude::*;

const SCHEDULES: [MaskSchedule; 3] = [MaskSchedule::Linear, MaskSchedule::Cosine, MaskSchedule::Arccos];

/// Uniform predictions that record the masked count of every input it sees.
struct Recorder {
    vocab: Vocab,
    len: usize,
    calls: RefCell<Vec<Vec<usize>>>,
}

impl Recorder {
    fn new(vocab: usize, len: usize) -> Self {
        Self {
            vocab: Vocab::new(vocab),
            len,
            calls: RefCell::new(Vec::new()),
        }
    }
}

impl Denoiser for Recorder {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn logits(&self, seqs: &[TokenSeq], _: &[Condition]) -> Result<Grid> {
        self.calls.borrow_mut().push(seqs.iter().map(|s| s.mask_count(self.vocab)).collect());
        Grid::from_rows(seqs.len(), self.len, self.vocab.size, vec![0.0; seqs.len() * self.len * self.vocab.size])
    }
}

fn sampler(schedule: MaskSchedule, steps: usize, mode: SamplerMode) -> SamplerConfig {
    SamplerConfig {
        schedule,
        steps,
        mode,
        guidance: Guidance::default(),
    }
}

fn tabular() -> TabularTeacher {
    let joint = ExactJoint::new(3, 2, vec![0.3, 0.05, 0.0, 0.1, 0.2, 0.05, 0.0, 0.1, 0.2]).unwrap();
    TabularTeacher::new(&[joint]).unwrap()
}

#[test]
fn schedule_examples() {
    for s in SCHEDULES {
        assert_eq!(mask_ratio(s, 0.0).unwrap(), 0.0);
        assert_eq!(mask_ratio(s, 1.0).unwrap(), 1.0);
        assert!(mask_ratio(s, -0.01).is_err() && mask_ratio(s, 1.01).is_err());
    }
    assert_eq!(mask_ratio(MaskSchedule::Linear, 0.5).unwrap(), 0.5);
    assert!((mask_ratio(MaskSchedule::Arccos, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let cos = 1.0 - (std::f64::consts::PI * 0.3 / 2.0).cos();
    assert!((mask_ratio(MaskSchedule::Cosine, 0.3).unwrap() - cos).abs() < 1e-15);
}

#[test]
fn forward_mask_extremes_and_pooled_rate() {
    let v = Vocab::new(7);
    let x = TokenSeq((0..20).map(|i| i % 7).collect());
    let mut rng = StreamRng::new(1, 0);
    assert_eq!(forward_mask(&x, v, 0.0, &mut rng).unwrap(), x);
    assert_eq!(forward_mask(&x, v, 1.0, &mut rng).unwrap(), TokenSeq::all_masked(20, v));
    assert!(forward_mask(&x, v, 1.5, &mut rng).is_err());

    let mut masked = 0;
    for _ in 0..5000 {
        let y = forward_mask(&x, v, 0.5, &mut rng).unwrap();
        for (a, b) in x.ids().iter().zip(y.ids()) {
            assert!(*b == v.mask() || a == b);
        }
        masked += y.mask_count(v);
    }
    let frac = masked as f64 / 1e5;
    assert!((frac - 0.5).abs() <= 0.005, "{frac}");
}

#[test]
fn reverse_step_replacement_rate() {
    let v = Vocab::new(3);
    let probs = Grid::from_rows(1, 50, 3, [0.2, 0.3, 0.5].repeat(50)).unwrap();
    let x = TokenSeq::all_masked(50, v);
    let mut rng = StreamRng::new(2, 0);
    let mut filled = 0;
    let n = 2000;
    for _ in 0..n {
        let y = reverse_step(&x, &probs, 0, 0.8, 0.4, &mut rng).unwrap();
        filled += 50 - y.mask_count(v);
    }
    let total = (50 * n) as f64;
    let rate = filled as f64 / total;
    let sigma = (0.25 / total).sqrt();
    assert!((rate - 0.5).abs() <= 3.0 * sigma, "{rate}");

    let done = reverse_step(&x, &probs, 0, 0.3, 0.0, &mut rng).unwrap();
    assert_eq!(done.mask_count(v), 0);
    let clean = TokenSeq(vec![1; 50]);
    assert_eq!(reverse_step(&clean, &probs, 0, 0.9, 0.1, &mut rng).unwrap(), clean);
    assert!(reverse_step(&x, &probs, 0, 0.4, 0.4, &mut rng).is_err());
    assert!(reverse_step(&x, &probs, 0, 0.4, 0.6, &mut rng).is_err());
}

#[test]
fn reverse_step_keeps_revealed_tokens() {
    let probs = Grid::from_rows(1, 4, 3, [1.0 / 3.0; 12].to_vec()).unwrap();
    let x = TokenSeq(vec![2, 3, 0, 3]);
    let mut rng = StreamRng::new(3, 0);
    for _ in 0..100 {
        let y = reverse_step(&x, &probs, 0, 0.7, 0.2, &mut rng).unwrap();
        assert_eq!((y.0[0], y.0[2]), (2, 0));
    }
}

#[test]
fn one_step_sampling_is_a_single_all_masked_pass() {
    for mode in [SamplerMode::Stochastic, SamplerMode::FixedCount] {
        let den = Recorder::new(4, 6);
        let out = sample_multistep(&den, &[Condition::Null; 3], &sampler(MaskSchedule::Cosine, 1, mode), &mut StreamRng::new(4, 0)).unwrap();
        assert!(out.iter().all(|s| s.mask_count(Vocab::new(4)) == 0));
        assert_eq!(*den.calls.borrow(), vec![vec![6; 3]]);
    }
}

#[test]
fn fixed_count_plans() {
    assert_eq!(fixed_count_plan(10, MaskSchedule::Linear, 5).unwrap(), vec![2; 5]);
    for s in SCHEDULES {
        assert_eq!(fixed_count_plan(7, s, 7).unwrap(), vec![1; 7]);
        for steps in 1..12 {
            let plan = fixed_count_plan(7, s, steps).unwrap();
            assert_eq!(plan.iter().sum::<usize>(), 7, "{s:?} {steps}");
        }
    }
    assert!(fixed_count_plan(5, MaskSchedule::Linear, 0).is_err());
}

#[test]
fn fixed_count_sampler_follows_the_plan() {
    let den = Recorder::new(3, 10);
    sample_multistep(&den, &[Condition::Null; 4], &sampler(MaskSchedule::Linear, 5, SamplerMode::FixedCount), &mut StreamRng::new(5, 0)).unwrap();
    let calls = den.calls.borrow();
    let expect: Vec<Vec<usize>> = [10, 8, 6, 4, 2].iter().map(|&m| vec![m; 4]).collect();
    assert_eq!(*calls, expect);

    let den = Recorder::new(3, 6);
    sample_multistep(&den, &[Condition::Class(0); 2], &sampler(MaskSchedule::Arccos, 6, SamplerMode::FixedCount), &mut StreamRng::new(6, 0)).unwrap();
    let expect: Vec<Vec<usize>> = (1..=6).rev().map(|m| vec![m; 2]).collect();
    assert_eq!(*den.calls.borrow(), expect);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let t = tabular();
    let cfg = sampler(MaskSchedule::Cosine, 2, SamplerMode::Stochastic);
    let a = sample_multistep(&t, &[Condition::Class(0); 64], &cfg, &mut StreamRng::new(7, 6)).unwrap();
    let b = sample_multistep(&t, &[Condition::Class(0); 64], &cfg, &mut StreamRng::new(7, 6)).unwrap();
    let c = sample_multistep(&t, &[Condition::Class(0); 64], &cfg, &mut StreamRng::new(8, 6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn monte_carlo_matches_enumeration() {
    let t = tabular();
    for (mode, n) in [(SamplerMode::Stochastic, 1_000_000), (SamplerMode::FixedCount, 200_000)] {
        let cfg = sampler(MaskSchedule::Linear, 2, mode);
        let exact = enumerate_multistep(&t, Condition::Class(0), &cfg).unwrap();
        let mut rng = StreamRng::new(9, 6);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n / 10_000 {
            samples.extend(sample_multistep(&t, &[Condition::Class(0); 10_000], &cfg, &mut rng).unwrap());
        }
        let emp = ExactJoint::from_samples(3, 2, &samples).unwrap();
        let tv = tv_distance(&exact, &emp).unwrap();
        let bound = if mode == SamplerMode::Stochastic { 0.005 } else { 0.01 };
        assert!(tv <= bound, "{mode:?}: TV {tv}");
    }
}

proptest! {
    #[test]
    fn schedules_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for s in SCHEDULES {
            let (rl, rh) = (mask_ratio(s, lo).unwrap(), mask_ratio(s, hi).unwrap());
            prop_assert!((0.0..=1.0).contains(&rl) && rl <= rh);
            if hi > lo + 1e-9 {
                prop_assert!(rl < rh);
            }
        }
    }

    #[test]
    fn forward_mask_keeps_length_and_tokens(tokens in prop::collection::vec(0usize..5, 1..40), r in 0.0f64..=1.0, seed in any::<u64>()) {
        let v = Vocab::new(5);
        let x = TokenSeq(tokens);
        let y = forward_mask(&x, v, r, &mut StreamRng::new(seed, 0)).unwrap();
        prop_assert_eq!(y.len(), x.len());
        prop_assert!(y.mask_count(v) <= x.len());
        for (a, b) in x.ids().iter().zip(y.ids()) {
            prop_assert!(*b == v.mask() || a == b);
        }
    }

    #[test]
    fn fixed_count_plan_unmasks_everything(len in 1usize..40, steps in 1usize..50, k in 0usize..3) {
        let plan = fixed_count_plan(len, SCHEDULES[k], steps).unwrap();
        prop_assert_eq!(plan.len(), steps);
        prop_assert_eq!(plan.iter().sum::<usize>(), len);
        if steps <= len {
            prop_assert!(plan.iter().all(|&n| n >= 1));
        }
    }
}
