use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::UtteranceContext;
use super::{Model, TacoError};
use crate::nn::Binding;
use crate::tape::Tape;

/// Outcome of comparing analytic gradients against central finite
/// differences on randomly sampled coordinates.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates_checked: usize,
    pub max_rel_err: f64,
    /// `param[row,col]` of the worst coordinate.
    pub worst_coordinate: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Nudge every parameter by uniform noise in (-scale, scale). Freshly
/// initialized models hold exact zeros (biases, the final post-net layer)
/// that put ReLU pre-activations exactly on the kink, where central finite
/// differences are one-sided and disagree with the analytic subgradient;
/// jittering moves the loss onto a smooth neighborhood before checking.
pub fn jitter_params(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        for x in model.params.get_mut(&name).iter_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
}

fn loss_value(
    model: &Model,
    phonemes: &[usize],
    context: &UtteranceContext,
    target: &Array2<f64>,
) -> Result<f64, TacoError> {
    let mut tape = Tape::new();
    let mut bind = Binding::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward_teacher_forced(
        &mut tape, &mut bind, phonemes, context, target, false, &mut rng,
    )?;
    Ok(tape.value(out.loss)[[0, 0]])
}

/// Compare backpropagated gradients of the full teacher-forced loss against
/// central finite differences (epsilon 1e-3), sampling `coords_per_param`
/// coordinates from every parameter tensor. Dropout is off, so the loss is a
/// smooth deterministic function of the parameters. Relative error uses
/// |a - f| / max(|a| + |f|, 1e-6).
pub fn gradient_check(
    model: &Model,
    phonemes: &[usize],
    context: &UtteranceContext,
    target: &Array2<f64>,
    coords_per_param: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport, TacoError> {
    let analytic: BTreeMap<String, Array2<f64>> = {
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward_teacher_forced(
            &mut tape, &mut bind, phonemes, context, target, false, &mut rng,
        )?;
        let grads = tape.backward(out.loss);
        bind.gradients(&grads)
    };

    let eps = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("none");
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        let (rows, cols) = model.params.get(name).dim();
        for _ in 0..coords_per_param {
            let i = rng.gen_range(0..rows);
            let j = rng.gen_range(0..cols);
            let central = |h: f64| -> Result<f64, TacoError> {
                let mut plus = model.clone();
                plus.params.get_mut(name)[[i, j]] += h;
                let lp = loss_value(&plus, phonemes, context, target)?;
                let mut minus = model.clone();
                minus.params.get_mut(name)[[i, j]] -= h;
                let lm = loss_value(&minus, phonemes, context, target)?;
                Ok((lp - lm) / (2.0 * h))
            };
            let a = analytic.get(name).map_or(0.0, |g| g[[i, j]]);
            let rel_of = |fd: f64| (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
            let mut fd = central(eps)?;
            let mut rel = rel_of(fd);
            if rel >= tolerance {
                // The wide stencil may straddle a ReLU kink; a genuinely
                // wrong gradient still fails at the narrow one.
                let fd2 = central(1e-5)?;
                let rel2 = rel_of(fd2);
                if rel2 < rel {
                    fd = fd2;
                    rel = rel2;
                }
            }
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{i},{j}] analytic={a:.3e} fd={fd:.3e}");
            }
        }
    }
    Ok(GradCheckReport {
        coordinates_checked: checked,
        max_rel_err,
        worst_coordinate: worst,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cu_encoder::AttentionDims;
    use crate::taco_lite::{CuMode, ModelConfig};

    /// The spec-sized gradient-check model: d_f=8, d_e=6, two heads with
    /// d_K=d_V=4, T=3, 2L=4.
    pub(crate) fn tiny_config(mode: CuMode) -> ModelConfig {
        ModelConfig {
            inventory_size: 5,
            phoneme_embed_dim: 8,
            encoder_conv_layers: 2,
            encoder_kernel: 3,
            encoder_dim: 8,
            encoder_dropout: 0.0,
            prenet_dim: 8,
            prenet_dropout: 0.5,
            attention_rnn_dim: 8,
            decoder_rnn_dim: 8,
            attention_dim: 8,
            location_filters: 4,
            location_kernel: 3,
            postnet_channels: 6,
            postnet_kernel: 3,
            postnet_layers: 3,
            mel_bins: 4,
            reduction: 2,
            stop_threshold: 0.5,
            dropout_at_inference: false,
            cu_mode: mode,
            context_width: 2,
            embed_dim: 6,
            cu_attention: AttentionDims {
                heads: 2,
                query_dim: 8,
                embed_dim: 6,
                key_dim: 4,
                value_dim: 4,
                context_dim: 8,
                max_pairs: 8,
            },
            fused_dim: 8,
        }
    }

    fn tiny_case(mode: CuMode) -> (Model, Vec<usize>, UtteranceContext, Array2<f64>) {
        let mut model = Model::init(tiny_config(mode), 13).unwrap();
        jitter_params(&mut model, 0.05, 7);
        let phonemes = vec![0, 2, 4];
        let context = match mode {
            CuMode::None => UtteranceContext::None,
            CuMode::Cse => UtteranceContext::Cse {
                combined: (0..12).map(|i| 0.1 * i as f64 - 0.5).collect(),
            },
            CuMode::Pse => UtteranceContext::Pse {
                embeddings: Array2::from_shape_fn((4, 6), |(i, j)| {
                    0.2 * (i as f64) - 0.1 * (j as f64)
                }),
                key_mask: vec![true, true, false, true],
            },
        };
        let target = Array2::from_shape_fn((6, 4), |(i, j)| {
            (0.7 * i as f64 + 1.3 * j as f64).sin() * 0.4
        });
        (model, phonemes, context, target)
    }

    fn check_mode(mode: CuMode) {
        let (model, phonemes, context, target) = tiny_case(mode);
        let report =
            gradient_check(&model, &phonemes, &context, &target, 4, 99, 1e-3).unwrap();
        assert!(
            report.passed(),
            "{mode:?}: max rel err {:.3e} at {}",
            report.max_rel_err,
            report.worst_coordinate
        );
        assert!(report.coordinates_checked >= 4 * model.params.len());
    }

    #[test]
    fn gradients_match_finite_differences_none() {
        check_mode(CuMode::None);
    }

    #[test]
    fn gradients_match_finite_differences_cse() {
        check_mode(CuMode::Cse);
    }

    #[test]
    fn gradients_match_finite_differences_pse() {
        check_mode(CuMode::Pse);
    }
}
