use maskdistill::diffusion::MaskSchedule;
use maskdistill::eval::{tv_distance, ExactJoint};
use maskdistill::model::softmax_temperature;
use maskdistill::optim::{ema_update, AdamConfig};
use maskdistill::teacher::{draw_condition, mdm_loss, mdm_loss_on_tape, train_teacher, DatasetSpec, TeacherTrainConfig};
use maskdistill::tensor::{Array, Tape};
use maskdistill::{Condition, Grid, ModelConfig, ModelParams, StreamRng, TokenSeq, Vocab};
use proptest::prelude::*;
use rand::Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn small(vocab: usize, len: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_blocks: 1,
        n_heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::new(vocab, len, classes)
    }
}

fn train_config(iterations: u64, seed: u64) -> TeacherTrainConfig {
    TeacherTrainConfig {
        iterations,
        batch_size: 32,
        optimizer: AdamConfig {
            warmup: 50,
            ..AdamConfig::with_lr(3e-3)
        },
        cond_dropout: 0.1,
        schedule: MaskSchedule::Linear,
        ema_rate: 0.99,
        seed,
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let v = 16;
    let logits = Grid::from_rows(2, 4, v, vec![0.0; 2 * 4 * v]).unwrap();
    let x0 = vec![TokenSeq(vec![3, 0, 15, 7]), TokenSeq(vec![1, 1, 1, 1])];
    let xt = vec![TokenSeq(vec![v; 4]); 2];
    let loss = mdm_loss(&logits, &x0, &xt).unwrap();
    assert!((loss - 16f64.ln()).abs() < 1e-12);
    assert!((loss - 2.77259).abs() < 5e-6);
}

#[test]
fn loss_vanishes_as_the_margin_grows() {
    let x0 = vec![TokenSeq(vec![2, 0])];
    let xt = vec![TokenSeq(vec![3, 3])];
    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 10.0, 20.0, 40.0] {
        let mut z = vec![0.0; 6];
        z[2] = margin;
        z[3] = margin;
        let loss = mdm_loss(&Grid::from_rows(1, 2, 3, z).unwrap(), &x0, &xt).unwrap();
        assert!(loss < prev);
        prev = loss;
    }
    assert!(prev < 1e-16);
}

#[test]
fn gradient_flows_only_through_masked_rows() {
    let (l, v) = (4, 3);
    let mut rng = StreamRng::new(1, 0);
    let z: Vec<f64> = (0..2 * l * v).map(|_| rng.random::<f64>()).collect();
    let x0 = vec![TokenSeq(vec![0, 1, 2, 0]), TokenSeq(vec![2, 2, 1, 0])];
    let xt = vec![TokenSeq(vec![3, 1, 3, 0]), TokenSeq(vec![2, 3, 1, 0])];
    let mut tape = Tape::new();
    let leaf = tape.leaf(Array::new(vec![2 * l, v], z).unwrap(), true).unwrap();
    let loss = mdm_loss_on_tape(&mut tape, leaf, &x0, &xt, Vocab::new(v)).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(leaf).unwrap().data();
    for b in 0..2 {
        for i in 0..l {
            let row = &g[(b * l + i) * v..(b * l + i + 1) * v];
            if xt[b].0[i] == v {
                assert!(row.iter().any(|x| *x != 0.0));
            } else {
                assert!(row.iter().all(|x| *x == 0.0), "sequence {b} position {i}");
            }
        }
    }
}

#[test]
fn null_condition_frequency_matches_dropout() {
    let mut rng = StreamRng::new(2, 0);
    let n = 10_000;
    let nulls = (0..n).filter(|_| draw_condition(1, 0.1, &mut rng) == Condition::Null).count();
    let f = nulls as f64 / n as f64;
    assert!((f - 0.1).abs() <= 0.01, "{f}");
}

#[test]
fn ema_contracts_geometrically() {
    let cfg = small(3, 2, 1);
    let target = ModelParams::init(cfg.clone(), &mut StreamRng::new(3, 0)).unwrap();
    let mut ema = ModelParams::init(cfg, &mut StreamRng::new(4, 0)).unwrap();
    let dist = |a: &ModelParams| -> f64 {
        a.params()
            .iter()
            .zip(target.params())
            .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()).map(|(x, y)| (x - y).powi(2)))
            .sum::<f64>()
            .sqrt()
    };
    let d0 = dist(&ema);
    let rho = 0.9;
    for _ in 0..25 {
        ema_update(&mut ema, &target, rho);
    }
    assert!((dist(&ema) / d0 - rho.powi(25)).abs() < 1e-12);
}

#[test]
fn tabular_sampler_matches_its_table() {
    let ds = DatasetSpec::Tabular {
        vocab: 3,
        seq_len: 3,
        classes: 2,
        seed: 5,
        spread: 1.5,
        table: None,
    }
    .build()
    .unwrap();
    let mut rng = StreamRng::new(5, 0);
    for c in 0..2 {
        let exact = ds.exact_joint(c).unwrap();
        assert!((exact.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let samples: Vec<TokenSeq> = (0..100_000).map(|_| ds.sample(c, &mut rng)).collect();
        let emp = ExactJoint::from_samples(3, 3, &samples).unwrap();
        assert!(tv_distance(&exact, &emp).unwrap() <= 0.01);
    }
}

#[test]
fn datasets_are_regenerated_bit_for_bit() {
    let spec = DatasetSpec::MarkovChain {
        vocab: 6,
        seq_len: 5,
        classes: 3,
        seed: 9,
        branching: 2,
        leak: 0.02,
    };
    let (a, b) = (spec.build().unwrap(), spec.build().unwrap());
    for c in 0..3 {
        assert_eq!(a.marginals(c), b.marginals(c));
    }
    let (mut r1, mut r2) = (StreamRng::new(1, 1), StreamRng::new(1, 1));
    for _ in 0..50 {
        assert_eq!(a.sample(1, &mut r1), b.sample(1, &mut r2));
    }
}

#[test]
fn single_sequence_dataset_is_memorized() {
    let ds = DatasetSpec::Patterned {
        vocab: 6,
        seq_len: 4,
        classes: 1,
        seed: 0,
        motifs_per_class: 1,
        noise: 0.0,
        motifs: Some(vec![vec![vec![4, 1, 5, 2]]]),
    }
    .build()
    .unwrap();
    let out = train_teacher(&ds, small(6, 4, 1), train_config(2000, 6)).unwrap();
    let tail: Vec<f64> = out.log.iter().rev().take(50).map(|e| e.loss).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 0.05, "final loss {mean}");
    let nulls: usize = out.log.iter().map(|e| e.null_conds).sum();
    let f = nulls as f64 / (2000.0 * 32.0);
    assert!((f - 0.1).abs() <= 0.01, "{f}");
}

#[test]
fn tabular_teacher_learns_the_marginals() {
    let ds = DatasetSpec::Tabular {
        vocab: 3,
        seq_len: 2,
        classes: 2,
        seed: 7,
        spread: 1.5,
        table: None,
    }
    .build()
    .unwrap();
    let out = train_teacher(&ds, small(3, 2, 2), train_config(2000, 7)).unwrap();
    let all = TokenSeq::all_masked(2, ds.vocab());
    for c in 0..2 {
        let z = out.ema.predict_logits(std::slice::from_ref(&all), &[Condition::Class(c)], None).unwrap();
        let p = softmax_temperature(&z, 1.0).unwrap();
        for (i, row) in ds.marginals(c).iter().enumerate() {
            let tv = 0.5 * row.iter().zip(p.row(0, i)).map(|(a, b)| (a - b).abs()).sum::<f64>();
            assert!(tv <= 0.05, "class {c} position {i}: TV {tv}");
        }
    }
}

#[test]
fn mismatched_model_dims_are_rejected() {
    let ds = DatasetSpec::MarkovChain {
        vocab: 5,
        seq_len: 4,
        classes: 2,
        seed: 1,
        branching: 2,
        leak: 0.02,
    }
    .build()
    .unwrap();
    assert!(train_teacher(&ds, small(5, 3, 2), train_config(1, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_batch_order(seed in any::<u64>(), perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        let (l, v) = (3, 4);
        let mut rng = StreamRng::new(seed, 0);
        let x0: Vec<TokenSeq> = (0..6).map(|_| TokenSeq((0..l).map(|_| rng.random_range(0..v)).collect())).collect();
        let xt: Vec<TokenSeq> = x0.iter().map(|x| TokenSeq(x.0.iter().map(|&t| if rng.random::<bool>() { v } else { t }).collect())).collect();
        let z: Vec<f64> = (0..6 * l * v).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let loss = mdm_loss(&Grid::from_rows(6, l, v, z.clone()).unwrap(), &x0, &xt).unwrap();
        let pz: Vec<f64> = perm.iter().flat_map(|&b| z[b * l * v..(b + 1) * l * v].to_vec()).collect();
        let px: Vec<TokenSeq> = perm.iter().map(|&b| x0[b].clone()).collect();
        let pt: Vec<TokenSeq> = perm.iter().map(|&b| xt[b].clone()).collect();
        let permuted = mdm_loss(&Grid::from_rows(6, l, v, pz).unwrap(), &px, &pt).unwrap();
        prop_assert!((loss - permuted).abs() <= 1e-12 * (1.0 + loss.abs()));
    }
}
