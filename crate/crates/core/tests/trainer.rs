//! Optimizer, schedule and training-loop contracts.

mod common;

use mantis::autograd::Tape;
use mantis::checkpoint::to_bytes;
use mantis::conditioner::{prepare, CondMode, ConditioningBundle, ModelInput, Segment};
use mantis::datakit::{generate, SynthSpec};
use mantis::model::{Model, ModelConfig};
use mantis::params::{Binding, ParamStore};
use mantis::tokenizer::{train_bpe, Vocab};
use mantis::trainer::{adamw_step, clip_grad_norm, lr_at, train, AdamState, TrainConfig};
use mantis::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_store(w: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(vec![1], vec![w]).unwrap(), true);
    s
}

#[test]
fn schedule_examples() {
    let tc = TrainConfig { lr_peak: 1e-3, warmup_steps: 10, total_steps: 110, ..Default::default() };
    assert_eq!(lr_at(0, &tc), 0.0);
    assert_eq!(lr_at(5, &tc), 5e-4);
    assert_eq!(lr_at(10, &tc), 1e-3);
    assert!((lr_at(60, &tc) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_at(110, &tc), 0.0);
    let flat = TrainConfig { warmup_steps: 0, total_steps: 4, lr_peak: 1.0, ..Default::default() };
    assert_eq!((0..5).map(|s| lr_at(s, &flat)).collect::<Vec<_>>(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let tc = TrainConfig { weight_decay: 0.0, ..Default::default() };
    for g in [1e-3, -0.5, 40.0] {
        let mut s = scalar_store(2.0);
        s.iter_mut().next().unwrap().grad = vec![g];
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &mut st, 0.01, &tc).unwrap();
        let moved = s.iter().next().unwrap().value.data()[0] - 2.0;
        assert!((moved + 0.01 * g.signum()).abs() < 1e-6 * (1.0 + 1e-8 / g.abs()), "g={g}: moved {moved}");
    }
}

#[test]
fn adamw_decay_is_decoupled() {
    let tc = TrainConfig { weight_decay: 0.1, ..Default::default() };
    let mut s = scalar_store(1.0);
    let mut st = AdamState::new(&s);
    for k in 1..=20 {
        adamw_step(&mut s, &mut st, 0.05, &tc).unwrap();
        let w = s.iter().next().unwrap().value.data()[0];
        assert!((w - (1.0 - 0.05 * 0.1f64).powi(k)).abs() < 1e-15);
    }
    // parameters without the decay flag stay put
    let mut s = ParamStore::new();
    s.add("gain", Tensor::new(vec![1], vec![1.0f64]).unwrap(), false);
    let mut st = AdamState::new(&s);
    adamw_step(&mut s, &mut st, 0.05, &tc).unwrap();
    assert_eq!(s.iter().next().unwrap().value.data()[0], 1.0);
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let tc = TrainConfig { lr_peak: 0.3, warmup_steps: 0, total_steps: 100, weight_decay: 0.0, betas: (0.5, 0.999), ..Default::default() };
    let mut s = scalar_store(0.0);
    let mut st = AdamState::new(&s);
    for step in 0..100 {
        let w = s.iter().next().unwrap().value.data()[0];
        s.iter_mut().next().unwrap().grad = vec![2.0 * (w - 3.0)];
        adamw_step(&mut s, &mut st, lr_at(step, &tc), &tc).unwrap();
    }
    let w = s.iter().next().unwrap().value.data()[0];
    assert!((w - 3.0).abs() < 1e-3, "w = {w}");
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut s = scalar_store(0.0);
    s.add("blocks.0.attn.q.weight", Tensor::zeros(vec![2]), true);
    s.iter_mut().nth(1).unwrap().grad = vec![0.0, f64::NAN];
    let mut st = AdamState::new(&s);
    match adamw_step(&mut s, &mut st, 0.1, &TrainConfig::default()) {
        Err(Error::NonFiniteGrad(name)) => assert_eq!(name, "blocks.0.attn.q.weight"),
        other => panic!("expected NaN abort, got {other:?}"),
    }
    assert_eq!(s.iter().next().unwrap().value.data()[0], 0.0, "no partial update");
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut s = scalar_store(0.0);
    s.add("v", Tensor::zeros(vec![1]), true);
    s.iter_mut().next().unwrap().grad = vec![3.0];
    s.iter_mut().nth(1).unwrap().grad = vec![4.0];
    assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
    let g: Vec<f64> = s.iter().map(|p| p.grad[0]).collect();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    assert!((clip_grad_norm(&mut s, 10.0) - 1.0).abs() < 1e-15);
}

fn synthetic(n: usize, seed: u64) -> (Vocab, Vec<ConditioningBundle>) {
    let samples = generate(&SynthSpec::new(n, seed)).unwrap();
    let corpus: Vec<&str> = samples.iter().flat_map(|s| [s.name.as_str(), s.description.as_str()]).collect();
    let vocab = train_bpe(&corpus, 320).unwrap();
    let bundles = samples.iter().map(|s| s.to_bundle(&vocab, 2)).collect();
    (vocab, bundles)
}

fn tiny(v: &Vocab, mode: CondMode) -> ModelConfig {
    ModelConfig { cond_mode: mode, max_pos: 48, ..ModelConfig::tiny(v.len()) }
}

#[test]
fn training_reduces_loss() {
    let (v, data) = synthetic(64, 1);
    let mut m: Model<f32> = Model::new(tiny(&v, CondMode::Mantis), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let tc = TrainConfig { lr_peak: 3e-3, warmup_steps: 20, total_steps: 200, batch_size: 8, ..Default::default() };
    let report = train(&mut m, &data, &data[..8], &v, &tc, &mut |_, _| Ok(())).unwrap();
    assert_eq!(report.losses.len(), 200);
    let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
    assert!(report.final_eval_loss.unwrap().is_finite());
}

#[test]
fn training_is_bit_reproducible() {
    let (v, data) = synthetic(24, 2);
    let tc = TrainConfig { lr_peak: 1e-3, warmup_steps: 2, total_steps: 12, batch_size: 4, checkpoint_every: 5, seed: 9, ..Default::default() };
    let run = || {
        let mut m: Model<f32> = Model::new(tiny(&v, CondMode::PseudoSelf), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut steps = Vec::new();
        let report = train(&mut m, &data, &data[..4], &v, &tc, &mut |s, _| {
            steps.push(s);
            Ok(())
        })
        .unwrap();
        (to_bytes(&m, &v.hash(), &serde_json::Value::Null).unwrap(), serde_json::to_string(&report).unwrap(), steps)
    };
    let (a, ra, steps) = run();
    let (b, rb, _) = run();
    assert!(a == b, "checkpoints differ");
    assert_eq!(ra, rb);
    assert_eq!(steps, vec![5, 10, 12]);
}

/// After one update every parameter group receives a nonzero gradient.
#[test]
fn gradients_reach_every_parameter() {
    let (v, data) = synthetic(16, 4);
    for mode in [CondMode::Mantis, CondMode::PseudoSelf, CondMode::ContextAttn, CondMode::Unconditional] {
        let cfg = ModelConfig { tied_head: false, ..tiny(&v, mode) };
        let mut m: Model<f32> = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let tc = TrainConfig { lr_peak: 1e-2, warmup_steps: 0, total_steps: 2, batch_size: 8, p_text_dropout: 0.0, ..Default::default() };
        train(&mut m, &data[..8], &[], &v, &tc, &mut |_, _| Ok(())).unwrap();
        let inputs: Vec<ModelInput> = data[8..].iter().map(|b| prepare(b, &v, &m.config).unwrap()).collect();
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let mut tape = Tape::new();
        let mut bind = Binding::new(&m.store);
        let loss = m.loss(&mut tape, &mut bind, &refs, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut store = m.store.clone();
        store.zero_grads();
        store.accumulate(&grads, &bind);
        for p in store.iter() {
            assert!(p.grad.iter().any(|g| *g != 0.0), "{mode:?}: {} has zero gradient", p.name);
        }
    }
}

#[test]
fn full_text_dropout_trains_and_hides_names() {
    let (v, data) = synthetic(16, 6);
    let mut m: Model<f32> = Model::new(tiny(&v, CondMode::Mantis), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let tc = TrainConfig { lr_peak: 1e-3, warmup_steps: 1, total_steps: 5, batch_size: 4, p_text_dropout: 1.0, ..Default::default() };
    let report = train(&mut m, &data, &[], &v, &tc, &mut |_, _| Ok(())).unwrap();
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let b = &data[0];
    let mut permuted = b.clone();
    permuted.name_ids.reverse();
    assert_ne!(permuted.name_ids, b.name_ids);
    // rows outside the name segment see no name token at all
    let masked = |b: &ConditioningBundle| {
        let inp = prepare(b, &v, &m.config).unwrap().with_modality_dropout(1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let logits = m.logits(&inp).unwrap();
        (0..inp.text.len())
            .filter(|&i| inp.text.segment_labels[i] != Segment::Name)
            .flat_map(|i| logits.row(i).iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(masked(b), masked(&permuted));
}

#[test]
fn invalid_configs_are_rejected() {
    let (v, data) = synthetic(8, 8);
    let mut m: Model<f32> = Model::new(tiny(&v, CondMode::Mantis), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for tc in [
        TrainConfig { warmup_steps: 20, total_steps: 10, ..Default::default() },
        TrainConfig { p_text_dropout: 1.5, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
    ] {
        assert!(matches!(train(&mut m, &data, &[], &v, &tc, &mut |_, _| Ok(())), Err(Error::Config(_))));
    }
    assert!(train(&mut m, &[], &[], &v, &TrainConfig::default(), &mut |_, _| Ok(())).is_err());
}
