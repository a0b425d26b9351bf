//! Supervised fine-tuning: masked LM loss, AdamW, warmup/decay schedule,
//! modality dropout and seeded batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::conditioner::{prepare, ConditioningBundle, ModelInput};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Binding, ParamStore};
use crate::tensor::Float;
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub p_text_dropout: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub loss_on_name: bool,
    pub grad_clip: f64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 16,
            p_text_dropout: 0.3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            loss_on_name: false,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(0.0..=1.0).contains(&self.p_text_dropout) {
            return bad(format!("p_text_dropout {} outside [0, 1]", self.p_text_dropout));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_peak >= 0.0) || !(self.eps > 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr_peak must be >= 0, eps and grad_clip > 0".into());
        }
        Ok(())
    }
}

/// Deterministic report of a run; wall-clock time is kept out so that two
/// identical runs produce identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every executed step.
    pub losses: Vec<f64>,
    pub skipped_steps: usize,
    pub final_eval_loss: Option<f64>,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub num_params: usize,
    pub build: String,
}

pub fn build_id() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Linear warmup from 0 to `lr_peak`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, tc: &TrainConfig) -> f64 {
    if step >= tc.total_steps {
        return 0.0;
    }
    if step < tc.warmup_steps {
        return tc.lr_peak * step as f64 / tc.warmup_steps as f64;
    }
    let span = (tc.total_steps - tc.warmup_steps) as f64;
    tc.lr_peak * (tc.total_steps - step) as f64 / span
}

/// Mixes a base seed with a stream tag and an index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Float> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One AdamW update from the gradients held in `store`. Weight decay is
/// applied to the parameter directly, only where `decay` is set.
pub fn adamw_step<T: Float>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, tc: &TrainConfig) -> Result<()> {
    for p in store.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad(p.name.clone()));
        }
    }
    state.t += 1;
    let (b1, b2) = tc.betas;
    let bc1 = T::of(1.0 - b1.powi(state.t));
    let bc2 = T::of(1.0 - b2.powi(state.t));
    let (b1, b2, eps, lr_t) = (T::of(b1), T::of(b2), T::of(tc.eps), T::of(lr));
    let shrink = T::of(1.0 - lr * tc.weight_decay);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let decay = p.decay && tc.weight_decay != 0.0;
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            if decay {
                *w *= shrink;
            }
            *w -= lr_t * update;
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store.iter().flat_map(|p| p.grad.iter()).map(|g| g.as_f64() * g.as_f64()).sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Assembles bundles into model inputs for the model's conditioning mode.
pub fn prepare_all(data: &[ConditioningBundle], vocab: &Vocab, cfg: &ModelConfig, loss_on_name: bool) -> Result<Vec<ModelInput>> {
    data.iter()
        .map(|b| {
            let mut inp = prepare(b, vocab, cfg)?;
            if loss_on_name {
                inp.text = inp.text.with_name_loss();
            }
            Ok(inp)
        })
        .collect()
}

/// Mean masked loss over a set of inputs in eval mode, weighted by the number
/// of predicted tokens.
pub fn eval_loss(model: &Model<f32>, inputs: &[ModelInput], batch_size: usize) -> Result<Option<f64>> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in inputs.chunks(batch_size.max(1)) {
        let n: usize = chunk.iter().map(|i| i.text.loss_mask.iter().filter(|m| **m).count()).sum();
        if n == 0 {
            continue;
        }
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        let mut tape = Tape::inference();
        let mut bind = Binding::new(&model.store);
        let loss = model.loss(&mut tape, &mut bind, &refs, None)?;
        total += tape.value(loss)[0] as f64 * n as f64;
        count += n;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Runs the step loop. `on_checkpoint(step, model)` is called every
/// `checkpoint_every` steps and once after the final step.
pub fn train(
    model: &mut Model<f32>,
    train_data: &[ConditioningBundle],
    eval_data: &[ConditioningBundle],
    vocab: &Vocab,
    tc: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Model<f32>) -> Result<()>,
) -> Result<TrainReport> {
    tc.validate()?;
    if train_data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let inputs = prepare_all(train_data, vocab, &model.config, tc.loss_on_name)?;
    let eval_inputs = prepare_all(eval_data, vocab, &model.config, tc.loss_on_name)?;
    let mut state = AdamState::new(&model.store);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(tc.total_steps);
    let mut skipped = 0;

    for step in 0..tc.total_steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if cursor == order.len() {
                order = (0..inputs.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, STREAM_SHUFFLE, epoch)));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, STREAM_STEP, step as u64));
        let dropped: Vec<ModelInput> = batch.iter().map(|&i| inputs[i].with_modality_dropout(tc.p_text_dropout, &mut rng)).collect();
        let refs: Vec<&ModelInput> = dropped.iter().collect();

        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        let loss = match model.loss(&mut tape, &mut bind, &refs, Some(&mut rng as &mut dyn rand::RngCore)) {
            Err(Error::EmptyLoss) => {
                skipped += 1;
                log::warn!("step {}: batch has no unmasked targets, skipped", step);
                continue;
            }
            other => other?,
        };
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        model.store.zero_grads();
        model.store.accumulate(&grads, &bind);
        clip_grad_norm(&mut model.store, tc.grad_clip);
        adamw_step(&mut model.store, &mut state, lr_at(step, tc), tc)?;
        losses.push(value as f64);
        if step % 50 == 0 {
            log::debug!("step {} loss {:.4}", step, value);
        }
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.total_steps {
            on_checkpoint(step + 1, model)?;
        }
    }
    on_checkpoint(tc.total_steps, model)?;
    let final_eval_loss = eval_loss(model, &eval_inputs, tc.batch_size)?;
    Ok(TrainReport {
        losses,
        skipped_steps: skipped,
        final_eval_loss,
        train_config: tc.clone(),
        model_config: model.config.clone(),
        num_params: model.num_params(),
        build: build_id(),
    })
}
