use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::UtteranceContext;
use super::{CuMode, ModelConfig, TacoError};
use crate::cu_encoder::{fuse_and_project_t, multi_head_cu_attention_t};
use crate::nn::{
    conv1d, dropout_mask, gaussian_init, lstm_step, uniform_init, zeros, Binding, ParamStore,
};
use crate::tape::{Tape, Var};

/// The spectrogram predictor: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Tape handles produced by one teacher-forced forward pass. Values are read
/// through the tape that built them.
pub struct ForwardOutputs {
    pub mel_pre: Var,
    pub mel_post: Var,
    pub stop_logits: Var,
    /// One 1 x T alignment row per decoder step.
    pub alignments: Vec<Var>,
    pub mse_pre: Var,
    pub mse_post: Var,
    pub stop_bce: Var,
    pub loss: Var,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// Post-net refined spectrogram, frames x mel_bins.
    pub mel: Array2<f64>,
    /// steps x T location-attention alignments.
    pub alignments: Array2<f64>,
    /// Step at which the stop token fired; `None` means max_steps was hit
    /// and the result is flagged "no-stop".
    pub stop_step: Option<usize>,
}

impl SynthesisResult {
    pub fn no_stop(&self) -> bool {
        self.stop_step.is_none()
    }
}

struct DecoderRun {
    mel_pre: Var,
    stop_logits: Var,
    alignments: Vec<Var>,
    stop_step: Option<usize>,
}

enum DecoderMode<'a> {
    Teacher { padded_target: &'a Array2<f64> },
    Free { steps: usize, stop_early: bool },
}

impl Model {
    /// Seeded parameter initialization. Linear and recurrent maps use
    /// fan-in-scaled uniform draws; the sentence-index table is Gaussian
    /// (sigma 0.02); the final post-net layer starts at zero so the post-net
    /// is an exact identity at step 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, TacoError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let half = c.encoder_dim / 2;

        p.insert(
            "enc.embed",
            uniform_init(&mut rng, c.inventory_size, c.phoneme_embed_dim),
        );
        for i in 0..c.encoder_conv_layers {
            let c_in = if i == 0 { c.phoneme_embed_dim } else { c.encoder_dim };
            p.insert(
                &format!("enc.conv{i}.w"),
                uniform_init(&mut rng, c.encoder_kernel * c_in, c.encoder_dim),
            );
            p.insert(&format!("enc.conv{i}.b"), zeros(1, c.encoder_dim));
        }
        for dir in ["fwd", "bwd"] {
            p.insert(
                &format!("enc.lstm_{dir}.w"),
                uniform_init(&mut rng, c.encoder_dim + half, 4 * half),
            );
            p.insert(&format!("enc.lstm_{dir}.b"), zeros(1, 4 * half));
        }

        match c.cu_mode {
            CuMode::None => {}
            CuMode::Cse => {
                p.insert(
                    "cu.fuse.w",
                    uniform_init(&mut rng, c.encoder_dim + 2 * c.embed_dim, c.fused_dim),
                );
                p.insert("cu.fuse.b", zeros(1, c.fused_dim));
            }
            CuMode::Pse => {
                let a = &c.cu_attention;
                for h in 0..a.heads {
                    p.insert(
                        &format!("cu.attn.wq{h}"),
                        uniform_init(&mut rng, a.query_dim, a.key_dim),
                    );
                    p.insert(
                        &format!("cu.attn.wk{h}"),
                        uniform_init(&mut rng, a.embed_dim, a.key_dim),
                    );
                    p.insert(
                        &format!("cu.attn.wv{h}"),
                        uniform_init(&mut rng, a.embed_dim, a.value_dim),
                    );
                }
                p.insert(
                    "cu.attn.wo",
                    uniform_init(&mut rng, a.heads * a.value_dim, a.context_dim),
                );
                p.insert(
                    "cu.attn.pos",
                    gaussian_init(&mut rng, a.max_pairs, a.embed_dim, 0.02),
                );
                p.insert(
                    "cu.fuse.w",
                    uniform_init(&mut rng, c.encoder_dim + a.context_dim, c.fused_dim),
                );
                p.insert("cu.fuse.b", zeros(1, c.fused_dim));
            }
        }

        let mem = c.memory_dim();
        let frame_width = c.reduction * c.mel_bins;
        p.insert(
            "dec.prenet1.w",
            uniform_init(&mut rng, frame_width, c.prenet_dim),
        );
        p.insert("dec.prenet1.b", zeros(1, c.prenet_dim));
        p.insert(
            "dec.prenet2.w",
            uniform_init(&mut rng, c.prenet_dim, c.prenet_dim),
        );
        p.insert("dec.prenet2.b", zeros(1, c.prenet_dim));
        p.insert(
            "dec.attn_rnn.w",
            uniform_init(
                &mut rng,
                c.prenet_dim + mem + c.attention_rnn_dim,
                4 * c.attention_rnn_dim,
            ),
        );
        p.insert("dec.attn_rnn.b", zeros(1, 4 * c.attention_rnn_dim));
        p.insert(
            "dec.attn.query.w",
            uniform_init(&mut rng, c.attention_rnn_dim, c.attention_dim),
        );
        p.insert(
            "dec.attn.memory.w",
            uniform_init(&mut rng, mem, c.attention_dim),
        );
        p.insert(
            "dec.attn.loc_conv.w",
            uniform_init(&mut rng, c.location_kernel * 2, c.location_filters),
        );
        p.insert(
            "dec.attn.loc_proj.w",
            uniform_init(&mut rng, c.location_filters, c.attention_dim),
        );
        p.insert("dec.attn.bias", zeros(1, c.attention_dim));
        p.insert("dec.attn.v", uniform_init(&mut rng, c.attention_dim, 1));
        p.insert(
            "dec.dec_rnn.w",
            uniform_init(
                &mut rng,
                c.attention_rnn_dim + mem + c.decoder_rnn_dim,
                4 * c.decoder_rnn_dim,
            ),
        );
        p.insert("dec.dec_rnn.b", zeros(1, 4 * c.decoder_rnn_dim));
        p.insert(
            "dec.proj_mel.w",
            uniform_init(&mut rng, c.decoder_rnn_dim + mem, frame_width),
        );
        p.insert("dec.proj_mel.b", zeros(1, frame_width));
        p.insert(
            "dec.proj_stop.w",
            uniform_init(&mut rng, c.decoder_rnn_dim + mem, 1),
        );
        p.insert("dec.proj_stop.b", zeros(1, 1));

        for i in 0..c.postnet_layers {
            let c_in = if i == 0 { c.mel_bins } else { c.postnet_channels };
            let c_out = if i == c.postnet_layers - 1 {
                c.mel_bins
            } else {
                c.postnet_channels
            };
            let w = if i == c.postnet_layers - 1 {
                zeros(c.postnet_kernel * c_in, c_out)
            } else {
                uniform_init(&mut rng, c.postnet_kernel * c_in, c_out)
            };
            p.insert(&format!("post.conv{i}.w"), w);
            p.insert(&format!("post.conv{i}.b"), zeros(1, c_out));
        }

        Ok(Self { config, params: p })
    }

    fn drop(
        &self,
        tape: &mut Tape,
        x: Var,
        p: f64,
        active: bool,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        if active && p > 0.0 {
            let (rows, cols) = tape.value(x).dim();
            let mask = dropout_mask(rng, rows, cols, p);
            tape.mul_const(x, &mask)
        } else {
            x
        }
    }

    /// Phoneme encoder: embedding, 3 same-padded conv layers with ReLU, then
    /// a bi-directional LSTM. Output F is T x encoder_dim.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        phonemes: &[usize],
        dropout_active: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, TacoError> {
        if phonemes.is_empty() {
            return Err(TacoError::EmptySequence);
        }
        if let Some(&bad) = phonemes.iter().find(|&&id| id >= self.config.inventory_size) {
            return Err(TacoError::UnknownPhoneme(bad));
        }
        let c = &self.config;
        let embed = bind.bind(tape, &self.params, "enc.embed");
        let mut x = tape.select_rows(embed, phonemes);
        for i in 0..c.encoder_conv_layers {
            let w = bind.bind(tape, &self.params, &format!("enc.conv{i}.w"));
            let b = bind.bind(tape, &self.params, &format!("enc.conv{i}.b"));
            x = conv1d(tape, x, w, b, c.encoder_kernel);
            x = tape.relu(x);
            x = self.drop(tape, x, c.encoder_dropout, dropout_active, rng);
        }
        let t_len = phonemes.len();
        let half = c.encoder_dim / 2;
        let mut rows_fwd = Vec::with_capacity(t_len);
        let mut rows_bwd = vec![Var(0); t_len];
        for dir in 0..2 {
            let w = bind.bind(
                tape,
                &self.params,
                if dir == 0 { "enc.lstm_fwd.w" } else { "enc.lstm_bwd.w" },
            );
            let b = bind.bind(
                tape,
                &self.params,
                if dir == 0 { "enc.lstm_fwd.b" } else { "enc.lstm_bwd.b" },
            );
            let mut h = tape.leaf(zeros(1, half));
            let mut cc = tape.leaf(zeros(1, half));
            for step in 0..t_len {
                let t = if dir == 0 { step } else { t_len - 1 - step };
                let xt = tape.slice_rows(x, t, t + 1);
                let (h2, c2) = lstm_step(tape, xt, h, cc, w, b, half);
                h = h2;
                cc = c2;
                if dir == 0 {
                    rows_fwd.push(h);
                } else {
                    rows_bwd[t] = h;
                }
            }
        }
        let rows: Vec<Var> = (0..t_len)
            .map(|t| tape.concat_cols(&[rows_fwd[t], rows_bwd[t]]))
            .collect();
        Ok(tape.concat_rows(&rows))
    }

    /// Form the decoder memory D from F and the utterance context.
    pub fn decoder_inputs(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        phoneme_enc: Var,
        context: &UtteranceContext,
    ) -> Result<Var, TacoError> {
        match (self.config.cu_mode, context) {
            // A context-free model ignores the window entirely.
            (CuMode::None, _) => Ok(phoneme_enc),
            (CuMode::Cse, UtteranceContext::Cse { combined }) => {
                if combined.len() != 2 * self.config.embed_dim {
                    return Err(TacoError::ContextMismatch {
                        model: CuMode::Cse,
                        input: format!("{}-d CSE vector", combined.len()),
                    });
                }
                let c = tape.leaf(
                    Array2::from_shape_vec((1, combined.len()), combined.clone()).unwrap(),
                );
                let w = bind.bind(tape, &self.params, "cu.fuse.w");
                let b = bind.bind(tape, &self.params, "cu.fuse.b");
                Ok(fuse_and_project_t(tape, phoneme_enc, c, true, w, b))
            }
            (CuMode::Pse, UtteranceContext::Pse { embeddings, key_mask }) => {
                let pairs = embeddings.nrows();
                if pairs != 2 * self.config.context_width
                    || embeddings.ncols() != self.config.embed_dim
                {
                    return Err(TacoError::ContextMismatch {
                        model: CuMode::Pse,
                        input: format!("{}x{} PSE matrix", pairs, embeddings.ncols()),
                    });
                }
                let e = tape.leaf(embeddings.clone());
                let pos = bind.bind(tape, &self.params, "cu.attn.pos");
                let pos_slice = tape.slice_rows(pos, 0, pairs);
                let e = tape.add(e, pos_slice);
                let a = &self.config.cu_attention;
                let wq: Vec<Var> = (0..a.heads)
                    .map(|h| bind.bind(tape, &self.params, &format!("cu.attn.wq{h}")))
                    .collect();
                let wk: Vec<Var> = (0..a.heads)
                    .map(|h| bind.bind(tape, &self.params, &format!("cu.attn.wk{h}")))
                    .collect();
                let wv: Vec<Var> = (0..a.heads)
                    .map(|h| bind.bind(tape, &self.params, &format!("cu.attn.wv{h}")))
                    .collect();
                let wo = bind.bind(tape, &self.params, "cu.attn.wo");
                // A fully-padded window degenerates to unmasked attention over
                // the pad-pair embeddings.
                let mask: Option<&[bool]> = if key_mask.iter().any(|&m| m) {
                    Some(key_mask.as_slice())
                } else {
                    None
                };
                let (ctx, _) = multi_head_cu_attention_t(
                    tape, phoneme_enc, e, mask, &wq, &wk, &wv, wo,
                );
                let w = bind.bind(tape, &self.params, "cu.fuse.w");
                let b = bind.bind(tape, &self.params, "cu.fuse.b");
                Ok(fuse_and_project_t(tape, phoneme_enc, ctx, false, w, b))
            }
            (mode, ctx) => Err(TacoError::ContextMismatch {
                model: mode,
                input: ctx.kind_name().to_string(),
            }),
        }
    }

    /// Two-layer bottleneck pre-net with (optionally inference-time) dropout.
    fn prenet(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        frame: Var,
        dropout_active: bool,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let w1 = bind.bind(tape, &self.params, "dec.prenet1.w");
        let b1 = bind.bind(tape, &self.params, "dec.prenet1.b");
        let w2 = bind.bind(tape, &self.params, "dec.prenet2.w");
        let b2 = bind.bind(tape, &self.params, "dec.prenet2.b");
        let h = tape.matmul(frame, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = self.drop(tape, h, self.config.prenet_dropout, dropout_active, rng);
        let h = tape.matmul(h, w2);
        let h = tape.add_row(h, b2);
        let h = tape.relu(h);
        self.drop(tape, h, self.config.prenet_dropout, dropout_active, rng)
    }

    /// Location-sensitive attention over the memory rows.
    #[allow(clippy::too_many_arguments)]
    fn location_attention(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        query_h: Var,
        memory: Var,
        processed_memory: Var,
        prev_weights: Var,
        cum_weights: Var,
    ) -> (Var, Var) {
        let wq = bind.bind(tape, &self.params, "dec.attn.query.w");
        let wloc_conv = bind.bind(tape, &self.params, "dec.attn.loc_conv.w");
        let wloc_proj = bind.bind(tape, &self.params, "dec.attn.loc_proj.w");
        let bias = bind.bind(tape, &self.params, "dec.attn.bias");
        let v = bind.bind(tape, &self.params, "dec.attn.v");

        let prev_col = tape.transpose(prev_weights);
        let cum_col = tape.transpose(cum_weights);
        let loc_in = tape.concat_cols(&[prev_col, cum_col]);
        let loc_cols = tape.im2col(loc_in, self.config.location_kernel);
        let loc = tape.matmul(loc_cols, wloc_conv);
        let loc = tape.matmul(loc, wloc_proj);

        let q = tape.matmul(query_h, wq);
        let mut sum = tape.add(processed_memory, loc);
        sum = tape.add_row(sum, q);
        sum = tape.add_row(sum, bias);
        let th = tape.tanh(sum);
        let energies = tape.matmul(th, v);
        let energies = tape.transpose(energies);
        let weights = tape.softmax_rows(energies, None);
        let context = tape.matmul(weights, memory);
        (context, weights)
    }

    fn run_decoder(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        memory: Var,
        mode: DecoderMode<'_>,
        dropout_active: bool,
        rng: &mut ChaCha8Rng,
    ) -> DecoderRun {
        let c = &self.config;
        let mem_dim = c.memory_dim();
        let frame_width = c.reduction * c.mel_bins;
        let steps = match &mode {
            DecoderMode::Teacher { padded_target } => padded_target.nrows() / c.reduction,
            DecoderMode::Free { steps, .. } => *steps,
        };
        let t_len = tape.value(memory).nrows();

        let wm = bind.bind(tape, &self.params, "dec.attn.memory.w");
        let processed_memory = tape.matmul(memory, wm);
        let w_attn_rnn = bind.bind(tape, &self.params, "dec.attn_rnn.w");
        let b_attn_rnn = bind.bind(tape, &self.params, "dec.attn_rnn.b");
        let w_dec_rnn = bind.bind(tape, &self.params, "dec.dec_rnn.w");
        let b_dec_rnn = bind.bind(tape, &self.params, "dec.dec_rnn.b");
        let w_mel = bind.bind(tape, &self.params, "dec.proj_mel.w");
        let b_mel = bind.bind(tape, &self.params, "dec.proj_mel.b");
        let w_stop = bind.bind(tape, &self.params, "dec.proj_stop.w");
        let b_stop = bind.bind(tape, &self.params, "dec.proj_stop.b");

        let mut h_att = tape.leaf(zeros(1, c.attention_rnn_dim));
        let mut c_att = tape.leaf(zeros(1, c.attention_rnn_dim));
        let mut h_dec = tape.leaf(zeros(1, c.decoder_rnn_dim));
        let mut c_dec = tape.leaf(zeros(1, c.decoder_rnn_dim));
        let mut context = tape.leaf(zeros(1, mem_dim));
        let mut prev_weights = tape.leaf(zeros(1, t_len));
        let mut cum_weights = tape.leaf(zeros(1, t_len));
        let mut prev_frame = tape.leaf(zeros(1, frame_width));

        let mut mel_rows = Vec::with_capacity(steps);
        let mut stop_rows = Vec::with_capacity(steps);
        let mut alignments = Vec::with_capacity(steps);
        let mut stop_step = None;

        for step in 0..steps {
            let pre = self.prenet(tape, bind, prev_frame, dropout_active, rng);
            let attn_in = tape.concat_cols(&[pre, context]);
            let (h2, c2) = lstm_step(
                tape, attn_in, h_att, c_att, w_attn_rnn, b_attn_rnn, c.attention_rnn_dim,
            );
            h_att = h2;
            c_att = c2;
            let (ctx, weights) = self.location_attention(
                tape, bind, h_att, memory, processed_memory, prev_weights, cum_weights,
            );
            context = ctx;
            cum_weights = tape.add(cum_weights, weights);
            prev_weights = weights;

            let dec_in = tape.concat_cols(&[h_att, context]);
            let (h2, c2) = lstm_step(
                tape, dec_in, h_dec, c_dec, w_dec_rnn, b_dec_rnn, c.decoder_rnn_dim,
            );
            h_dec = h2;
            c_dec = c2;

            let proj_in = tape.concat_cols(&[h_dec, context]);
            let frames = tape.matmul(proj_in, w_mel);
            let frames = tape.add_row(frames, b_mel);
            let stop = tape.matmul(proj_in, w_stop);
            let stop = tape.add_row(stop, b_stop);

            mel_rows.push(frames);
            stop_rows.push(stop);
            alignments.push(weights);

            match &mode {
                DecoderMode::Teacher { padded_target } => {
                    let lo = step * c.reduction;
                    let slice = padded_target
                        .slice(ndarray::s![lo..lo + c.reduction, ..])
                        .to_owned();
                    let flat =
                        Array2::from_shape_vec((1, frame_width), slice.iter().cloned().collect())
                            .unwrap();
                    prev_frame = tape.leaf(flat);
                }
                DecoderMode::Free { stop_early, .. } => {
                    prev_frame = frames;
                    if *stop_early && stop_step.is_none() {
                        let logit = tape.value(stop)[[0, 0]];
                        if 1.0 / (1.0 + (-logit).exp()) > c.stop_threshold {
                            stop_step = Some(step);
                        }
                    }
                    if stop_step == Some(step) {
                        break;
                    }
                }
            }
        }

        let stacked = tape.concat_rows(&mel_rows);
        let frames_total = mel_rows.len() * c.reduction;
        let mel_pre = tape.reshape(stacked, frames_total, c.mel_bins);
        let stop_logits = tape.concat_rows(&stop_rows);
        DecoderRun {
            mel_pre,
            stop_logits,
            alignments,
            stop_step,
        }
    }

    /// Five-layer residual conv post-net. The final layer starts at zero, so
    /// a freshly initialized post-net is the identity.
    pub fn postnet(&self, tape: &mut Tape, bind: &mut Binding, mel: Var) -> Var {
        let c = &self.config;
        let mut x = mel;
        for i in 0..c.postnet_layers {
            let w = bind.bind(tape, &self.params, &format!("post.conv{i}.w"));
            let b = bind.bind(tape, &self.params, &format!("post.conv{i}.b"));
            x = conv1d(tape, x, w, b, c.postnet_kernel);
            if i < c.postnet_layers - 1 {
                x = tape.tanh(x);
            }
        }
        tape.add(mel, x)
    }

    /// Teacher-forced forward pass with the masked composite loss:
    /// MSE(pre-net mel) + MSE(post-net mel) + BCE(stop). Targets are padded
    /// to a multiple of the reduction factor; padded frames and steps carry
    /// zero loss weight.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        phonemes: &[usize],
        context: &UtteranceContext,
        target: &Array2<f64>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutputs, TacoError> {
        let c = &self.config;
        if target.nrows() == 0 {
            return Err(TacoError::MissingTarget);
        }
        let dropout_active = train || c.dropout_at_inference;
        let f = self.encode(tape, bind, phonemes, dropout_active, rng)?;
        let memory = self.decoder_inputs(tape, bind, f, context)?;

        let n_real = target.nrows();
        let padded_frames = n_real.div_ceil(c.reduction) * c.reduction;
        let mut padded = Array2::zeros((padded_frames, c.mel_bins));
        padded
            .slice_mut(ndarray::s![..n_real, ..])
            .assign(target);

        let run = self.run_decoder(
            tape,
            bind,
            memory,
            DecoderMode::Teacher {
                padded_target: &padded,
            },
            dropout_active,
            rng,
        );
        let mel_post = self.postnet(tape, bind, run.mel_pre);

        // frame mask: 1 on real frames
        let mut mask = Array2::zeros((padded_frames, c.mel_bins));
        mask.slice_mut(ndarray::s![..n_real, ..]).fill(1.0);
        let target_leaf = tape.leaf(padded.clone());
        let denom = 1.0 / (n_real * c.mel_bins) as f64;
        let mse_of = |tape: &mut Tape, pred: Var| -> Var {
            let d = tape.sub(pred, target_leaf);
            let dm = tape.mul_const(d, &mask);
            let sq = tape.mul(dm, dm);
            let s = tape.sum_all(sq);
            tape.scale(s, denom)
        };
        let mse_pre = mse_of(tape, run.mel_pre);
        let mse_post = mse_of(tape, mel_post);

        // stop targets: 1 from the step containing the final real frame on;
        // steps with no real frames are masked out.
        let steps = padded_frames / c.reduction;
        let mut stop_target = Array2::zeros((steps, 1));
        let mut step_mask = Array2::zeros((steps, 1));
        let mut masked_steps = 0.0;
        for i in 0..steps {
            if (i + 1) * c.reduction >= n_real {
                stop_target[[i, 0]] = 1.0;
            }
            if i * c.reduction < n_real {
                step_mask[[i, 0]] = 1.0;
                masked_steps += 1.0;
            }
        }
        // BCE with logits: softplus(x) - x*y
        let sp = tape.softplus(run.stop_logits);
        let xy = tape.mul_const(run.stop_logits, &stop_target);
        let bce = tape.sub(sp, xy);
        let bce = tape.mul_const(bce, &step_mask);
        let bce = tape.sum_all(bce);
        let stop_bce = tape.scale(bce, 1.0 / masked_steps);

        let partial = tape.add(mse_pre, mse_post);
        let loss = tape.add(partial, stop_bce);
        Ok(ForwardOutputs {
            mel_pre: run.mel_pre,
            mel_post,
            stop_logits: run.stop_logits,
            alignments: run.alignments,
            mse_pre,
            mse_post,
            stop_bce,
            loss,
        })
    }

    fn run_free(
        &self,
        phonemes: &[usize],
        context: &UtteranceContext,
        steps: usize,
        stop_early: bool,
        seed: u64,
    ) -> Result<SynthesisResult, TacoError> {
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dropout_active = self.config.dropout_at_inference;
        let f = self.encode(&mut tape, &mut bind, phonemes, dropout_active, &mut rng)?;
        let memory = self.decoder_inputs(&mut tape, &mut bind, f, context)?;
        let run = self.run_decoder(
            &mut tape,
            &mut bind,
            memory,
            DecoderMode::Free { steps, stop_early },
            dropout_active,
            &mut rng,
        );
        let mel_post = self.postnet(&mut tape, &mut bind, run.mel_pre);
        let mel = tape.value(mel_post).clone();
        let t_len = phonemes.len();
        let mut alignments = Array2::zeros((run.alignments.len(), t_len));
        for (i, &w) in run.alignments.iter().enumerate() {
            alignments.row_mut(i).assign(&tape.value(w).row(0));
        }
        Ok(SynthesisResult {
            mel,
            alignments,
            stop_step: run.stop_step,
        })
    }

    /// Free-running synthesis. Stops when the stop token fires or at
    /// `max_steps` (flagged as no-stop). With inference dropout off the
    /// output is a deterministic function of (parameters, phonemes, context).
    pub fn synthesize(
        &self,
        phonemes: &[usize],
        context: &UtteranceContext,
        max_steps: usize,
        seed: u64,
    ) -> Result<SynthesisResult, TacoError> {
        self.run_free(phonemes, context, max_steps, true, seed)
    }

    /// Free-running pass of exactly `frames / reduction` steps, for
    /// frame-aligned objective evaluation against a known-length target.
    pub fn synthesize_forced_length(
        &self,
        phonemes: &[usize],
        context: &UtteranceContext,
        frames: usize,
        seed: u64,
    ) -> Result<SynthesisResult, TacoError> {
        let steps = frames.div_ceil(self.config.reduction);
        self.run_free(phonemes, context, steps, false, seed)
    }
}
