use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TrainingUtterance;
use super::{Model, TacoError};
use crate::nn::{Adam, Binding};
use crate::tape::Tape;

pub type TrainingSet = Vec<TrainingUtterance>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Emit a trace row every `log_every` steps (plus the first and last).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            log_every: 50,
        }
    }
}

/// One logged optimization step: batch-mean loss and its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub mse_pre: f64,
    pub mse_post: f64,
    pub stop_bce: f64,
}

/// Minibatch Adam training. Batch order, dropout masks, and therefore the
/// whole trace are a deterministic function of (model, data, config). A
/// non-finite batch loss aborts with `Divergence`.
pub fn train(
    model: &mut Model,
    optimizer: &mut Adam,
    data: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>, TacoError> {
    if data.is_empty() {
        return Err(TacoError::Config("empty training set".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;
    let mut trace = Vec::new();

    for step in 1..=cfg.steps {
        let mut grad_sum: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut pre_sum = 0.0;
        let mut post_sum = 0.0;
        let mut stop_sum = 0.0;
        let batch = cfg.batch_size.min(data.len());
        for b in 0..batch {
            if cursor >= order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let utt = &data[order[cursor]];
            cursor += 1;

            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ step.wrapping_mul(0x517c_c1b7_2722_0a95) ^ b as u64);
            let out = model.forward_teacher_forced(
                &mut tape,
                &mut bind,
                &utt.phonemes,
                &utt.context,
                &utt.target,
                true,
                &mut rng,
            )?;
            loss_sum += tape.value(out.loss)[[0, 0]];
            pre_sum += tape.value(out.mse_pre)[[0, 0]];
            post_sum += tape.value(out.mse_post)[[0, 0]];
            stop_sum += tape.value(out.stop_bce)[[0, 0]];
            let grads = tape.backward(out.loss);
            for (name, g) in bind.gradients(&grads) {
                grad_sum
                    .entry(name)
                    .and_modify(|acc| *acc += &g)
                    .or_insert(g);
            }
        }
        let scale = 1.0 / batch as f64;
        let mean_loss = loss_sum * scale;
        if !mean_loss.is_finite() {
            return Err(TacoError::Divergence { step });
        }
        for g in grad_sum.values_mut() {
            *g *= scale;
        }
        optimizer.lr = cfg.learning_rate;
        optimizer.apply(&mut model.params, &grad_sum);

        if step == 1 || step == cfg.steps || cfg.log_every > 0 && step % cfg.log_every == 0 {
            trace.push(TraceRow {
                step,
                loss: mean_loss,
                mse_pre: pre_sum * scale,
                mse_post: post_sum * scale,
                stop_bce: stop_sum * scale,
            });
        }
    }
    Ok(trace)
}

/// Mean teacher-forced loss over a dataset with dropout off.
pub fn teacher_forced_loss(model: &Model, data: &TrainingSet) -> Result<f64, TacoError> {
    let mut sum = 0.0;
    for utt in data {
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward_teacher_forced(
            &mut tape,
            &mut bind,
            &utt.phonemes,
            &utt.context,
            &utt.target,
            false,
            &mut rng,
        )?;
        sum += tape.value(out.loss)[[0, 0]];
    }
    Ok(sum / data.len() as f64)
}

/// Free-running spectrogram MSE: the model runs on its own predictions for
/// exactly the target's length, then the per-element squared error is pooled
/// over every real frame in the dataset. No ground-truth frames are fed to
/// the decoder, so context information can only come from the CU inputs.
pub fn free_running_mse(model: &Model, data: &TrainingSet) -> Result<f64, TacoError> {
    let mut err_sum = 0.0;
    let mut count = 0usize;
    for utt in data {
        let n = utt.target.nrows();
        let res = model.synthesize_forced_length(&utt.phonemes, &utt.context, n, 0)?;
        for i in 0..n {
            for j in 0..utt.target.ncols() {
                let d = res.mel[[i, j]] - utt.target[[i, j]];
                err_sum += d * d;
                count += 1;
            }
        }
    }
    Ok(err_sum / count as f64)
}
