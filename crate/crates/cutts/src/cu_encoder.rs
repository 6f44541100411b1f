//! Cross-utterance fusion: CSE concatenation, PSE multi-head attention over
//! the paired-sentence embedding matrix with added sentence-index embeddings,
//! and the shared fuse-and-project step that forms the decoder inputs.
//!
//! The math runs on the gradient tape; the plain-matrix entry points wrap a
//! throwaway tape, so tests and the trained model exercise one code path.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{gaussian_init, uniform_init};
use crate::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum CuEncoderError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("all attention keys are masked")]
    AllKeysMasked,
    #[error("{pairs} pairs exceed the position table capacity {capacity}")]
    PositionCapacity { pairs: usize, capacity: usize },
}

/// Hyperparameters of the CU attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionDims {
    pub heads: usize,
    pub query_dim: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub context_dim: usize,
    /// Rows in the sentence-index table (2 * L_max).
    pub max_pairs: usize,
}

impl Default for AttentionDims {
    fn default() -> Self {
        Self {
            heads: 8,
            query_dim: 512,
            embed_dim: 768,
            key_dim: 64,
            value_dim: 64,
            context_dim: 256,
            max_pairs: 8,
        }
    }
}

/// Per-head projection matrices, the output map, and the learned
/// sentence-index embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dims: AttentionDims,
    pub w_query: Vec<Array2<f64>>,
    pub w_key: Vec<Array2<f64>>,
    pub w_value: Vec<Array2<f64>>,
    pub w_out: Array2<f64>,
    pub position_table: Array2<f64>,
}

impl AttentionParams {
    /// Fan-in-scaled uniform maps; position table from N(0, 0.02^2).
    pub fn init(dims: AttentionDims, rng: &mut ChaCha8Rng) -> Self {
        let w_query = (0..dims.heads)
            .map(|_| uniform_init(rng, dims.query_dim, dims.key_dim))
            .collect();
        let w_key = (0..dims.heads)
            .map(|_| uniform_init(rng, dims.embed_dim, dims.key_dim))
            .collect();
        let w_value = (0..dims.heads)
            .map(|_| uniform_init(rng, dims.embed_dim, dims.value_dim))
            .collect();
        let w_out = uniform_init(rng, dims.heads * dims.value_dim, dims.context_dim);
        let position_table = gaussian_init(rng, dims.max_pairs, dims.embed_dim, 0.02);
        Self {
            dims,
            w_query,
            w_key,
            w_value,
            w_out,
            position_table,
        }
    }
}

/// CU context in either mode: one utterance-constant vector for CSE, or one
/// row per phoneme for PSE.
#[derive(Debug, Clone, PartialEq)]
pub enum CuContext {
    /// 2 * d_e concatenated past/future chunk embeddings.
    Cse(Vec<f64>),
    /// T x d_c matrix, rows aligned with phonemes.
    Pse(Array2<f64>),
}

impl CuContext {
    pub fn width(&self) -> usize {
        match self {
            CuContext::Cse(v) => v.len(),
            CuContext::Pse(m) => m.ncols(),
        }
    }
}

/// Linear map fusing a phoneme encoding with its CU context.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionProjection {
    /// (d_f + context width) x output
    pub weight: Array2<f64>,
    /// 1 x output
    pub bias: Array2<f64>,
}

impl FusionProjection {
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: uniform_init(rng, input_dim, output_dim),
            bias: Array2::zeros((1, output_dim)),
        }
    }
}

/// Concatenate past and future chunk embeddings into the CSE context vector.
pub fn cse_context(e_past: &[f64], e_future: &[f64]) -> Result<Vec<f64>, CuEncoderError> {
    if e_past.len() != e_future.len() {
        return Err(CuEncoderError::Dimension(format!(
            "e(u_P) is {}-d but e(u_N) is {}-d",
            e_past.len(),
            e_future.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * e_past.len());
    out.extend_from_slice(e_past);
    out.extend_from_slice(e_future);
    Ok(out)
}

/// Add the first `2L` sentence-index embeddings (starting at `offset`) to the
/// PSE matrix rows.
pub fn add_sentence_index_embeddings(
    pse: &Array2<f64>,
    position_table: &Array2<f64>,
    offset: usize,
) -> Result<Array2<f64>, CuEncoderError> {
    let rows = pse.nrows();
    if offset + rows > position_table.nrows() {
        return Err(CuEncoderError::PositionCapacity {
            pairs: offset + rows,
            capacity: position_table.nrows(),
        });
    }
    if pse.ncols() != position_table.ncols() {
        return Err(CuEncoderError::Dimension(format!(
            "PSE width {} vs table width {}",
            pse.ncols(),
            position_table.ncols()
        )));
    }
    Ok(pse + &position_table.slice(ndarray::s![offset..offset + rows, ..]))
}

fn check_mask(mask: Option<&[bool]>, keys: usize) -> Result<(), CuEncoderError> {
    if let Some(m) = mask {
        if m.len() != keys {
            return Err(CuEncoderError::Dimension(format!(
                "mask length {} vs {} keys",
                m.len(),
                keys
            )));
        }
        if !m.iter().any(|&b| b) {
            return Err(CuEncoderError::AllKeysMasked);
        }
    }
    Ok(())
}

/// Tape-level scaled dot-product attention:
/// `softmax(Q K^T / sqrt(d_K)) V`, with masked keys at exactly zero weight.
pub fn scaled_dot_attention_t(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    key_mask: Option<&[bool]>,
) -> (Var, Var) {
    let d_k = tape.value(query).ncols() as f64;
    let key_t = tape.transpose(key);
    let logits = tape.matmul(query, key_t);
    let logits = tape.scale(logits, 1.0 / d_k.sqrt());
    let weights = tape.softmax_rows(logits, key_mask);
    let out = tape.matmul(weights, value);
    (out, weights)
}

/// Plain-matrix scaled dot-product attention. Errors instead of producing
/// NaN when every key is masked.
pub fn scaled_dot_attention(
    query: &Array2<f64>,
    key: &Array2<f64>,
    value: &Array2<f64>,
    key_mask: Option<&[bool]>,
) -> Result<(Array2<f64>, Array2<f64>), CuEncoderError> {
    if query.ncols() != key.ncols() {
        return Err(CuEncoderError::Dimension(format!(
            "query width {} vs key width {}",
            query.ncols(),
            key.ncols()
        )));
    }
    if key.nrows() != value.nrows() {
        return Err(CuEncoderError::Dimension(format!(
            "{} keys vs {} values",
            key.nrows(),
            value.nrows()
        )));
    }
    check_mask(key_mask, key.nrows())?;
    let mut tape = Tape::new();
    let q = tape.leaf(query.clone());
    let k = tape.leaf(key.clone());
    let v = tape.leaf(value.clone());
    let (out, weights) = scaled_dot_attention_t(&mut tape, q, k, v, key_mask);
    Ok((tape.value(out).clone(), tape.value(weights).clone()))
}

/// Tape-level multi-head CU attention. `pse` must already carry the
/// sentence-index embeddings. Returns the T x d_c context and the per-head
/// weight matrices.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_cu_attention_t(
    tape: &mut Tape,
    phonemes: Var,
    pse: Var,
    key_mask: Option<&[bool]>,
    w_query: &[Var],
    w_key: &[Var],
    w_value: &[Var],
    w_out: Var,
) -> (Var, Vec<Var>) {
    let mut heads = Vec::with_capacity(w_query.len());
    let mut weights = Vec::with_capacity(w_query.len());
    for h in 0..w_query.len() {
        let q = tape.matmul(phonemes, w_query[h]);
        let k = tape.matmul(pse, w_key[h]);
        let v = tape.matmul(pse, w_value[h]);
        let (g, w) = scaled_dot_attention_t(tape, q, k, v, key_mask);
        heads.push(g);
        weights.push(w);
    }
    let concat = tape.concat_cols(&heads);
    let context = tape.matmul(concat, w_out);
    (context, weights)
}

/// Multi-head CU attention over plain matrices. Returns the context matrix
/// and the H x T x 2L attention weights.
pub fn multi_head_cu_attention(
    phonemes: &Array2<f64>,
    pse: &Array2<f64>,
    key_mask: Option<&[bool]>,
    params: &AttentionParams,
) -> Result<(Array2<f64>, Array3<f64>), CuEncoderError> {
    let d = &params.dims;
    if phonemes.ncols() != d.query_dim {
        return Err(CuEncoderError::Dimension(format!(
            "phoneme width {} vs configured query_dim {}",
            phonemes.ncols(),
            d.query_dim
        )));
    }
    if pse.ncols() != d.embed_dim {
        return Err(CuEncoderError::Dimension(format!(
            "PSE width {} vs configured embed_dim {}",
            pse.ncols(),
            d.embed_dim
        )));
    }
    check_mask(key_mask, pse.nrows())?;
    let mut tape = Tape::new();
    let f = tape.leaf(phonemes.clone());
    let e = tape.leaf(pse.clone());
    let wq: Vec<Var> = params.w_query.iter().map(|w| tape.leaf(w.clone())).collect();
    let wk: Vec<Var> = params.w_key.iter().map(|w| tape.leaf(w.clone())).collect();
    let wv: Vec<Var> = params.w_value.iter().map(|w| tape.leaf(w.clone())).collect();
    let wo = tape.leaf(params.w_out.clone());
    let (ctx, weight_vars) =
        multi_head_cu_attention_t(&mut tape, f, e, key_mask, &wq, &wk, &wv, wo);
    let t_len = phonemes.nrows();
    let n_keys = pse.nrows();
    let mut weights = Array3::zeros((d.heads, t_len, n_keys));
    for (h, wv) in weight_vars.iter().enumerate() {
        weights
            .index_axis_mut(ndarray::Axis(0), h)
            .assign(tape.value(*wv));
    }
    Ok((tape.value(ctx).clone(), weights))
}

/// Tape-level fusion: rows `[f(p_t); c_t]` (or the broadcast CSE vector)
/// through the linear projection.
pub fn fuse_and_project_t(
    tape: &mut Tape,
    phonemes: Var,
    context: Var,
    context_is_row: bool,
    weight: Var,
    bias: Var,
) -> Var {
    let t_len = tape.value(phonemes).nrows();
    let ctx = if context_is_row {
        let ones = tape.leaf(Array2::from_elem((t_len, 1), 1.0));
        tape.matmul(ones, context)
    } else {
        context
    };
    let joined = tape.concat_cols(&[phonemes, ctx]);
    let projected = tape.matmul(joined, weight);
    tape.add_row(projected, bias)
}

/// Form decoder inputs `D` from the phoneme encodings and a CU context.
pub fn fuse_and_project(
    phonemes: &Array2<f64>,
    context: &CuContext,
    projection: &FusionProjection,
) -> Result<Array2<f64>, CuEncoderError> {
    let expect = phonemes.ncols() + context.width();
    if projection.weight.nrows() != expect {
        return Err(CuEncoderError::Dimension(format!(
            "projection expects {} inputs, got {}",
            projection.weight.nrows(),
            expect
        )));
    }
    if let CuContext::Pse(m) = context {
        if m.nrows() != phonemes.nrows() {
            return Err(CuEncoderError::Dimension(format!(
                "{} context rows vs {} phonemes",
                m.nrows(),
                phonemes.nrows()
            )));
        }
    }
    let mut tape = Tape::new();
    let f = tape.leaf(phonemes.clone());
    let (ctx, is_row) = match context {
        CuContext::Cse(v) => (
            tape.leaf(Array2::from_shape_vec((1, v.len()), v.clone()).unwrap()),
            true,
        ),
        CuContext::Pse(m) => (tape.leaf(m.clone()), false),
    };
    let w = tape.leaf(projection.weight.clone());
    let b = tape.leaf(projection.bias.clone());
    let d = fuse_and_project_t(&mut tape, f, ctx, is_row, w, b);
    Ok(tape.value(d).clone())
}

/// Brute-force triple-loop oracle, fully independent of the tape.
pub fn brute_force_attention(
    f: &Array2<f64>,
    e: &Array2<f64>,
    mask: Option<&[bool]>,
    params: &AttentionParams,
) -> (Array2<f64>, Array3<f64>) {
    let d = &params.dims;
    let (t_len, n_keys) = (f.nrows(), e.nrows());
    let mut weights = Array3::zeros((d.heads, t_len, n_keys));
    let mut concat = Array2::zeros((t_len, d.heads * d.value_dim));
    for h in 0..d.heads {
        for t in 0..t_len {
            let mut logits = vec![f64::NEG_INFINITY; n_keys];
            for key in 0..n_keys {
                if mask.map_or(true, |m| m[key]) {
                    let mut dot = 0.0;
                    for a in 0..d.key_dim {
                        let mut qa = 0.0;
                        let mut ka = 0.0;
                        for i in 0..d.query_dim {
                            qa += f[[t, i]] * params.w_query[h][[i, a]];
                        }
                        for i in 0..d.embed_dim {
                            ka += e[[key, i]] * params.w_key[h][[i, a]];
                        }
                        dot += qa * ka;
                    }
                    logits[key] = dot / (d.key_dim as f64).sqrt();
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits
                .iter()
                .map(|&l| if l.is_finite() { (l - mx).exp() } else { 0.0 })
                .collect();
            let z: f64 = exps.iter().sum();
            for key in 0..n_keys {
                weights[[h, t, key]] = exps[key] / z;
            }
            for b in 0..d.value_dim {
                let mut acc = 0.0;
                for key in 0..n_keys {
                    let mut vb = 0.0;
                    for i in 0..d.embed_dim {
                        vb += e[[key, i]] * params.w_value[h][[i, b]];
                    }
                    acc += weights[[h, t, key]] * vb;
                }
                concat[[t, h * d.value_dim + b]] = acc;
            }
        }
    }
    let mut context = Array2::zeros((t_len, d.context_dim));
    for t in 0..t_len {
        for j in 0..d.context_dim {
            let mut acc = 0.0;
            for i in 0..d.heads * d.value_dim {
                acc += concat[[t, i]] * params.w_out[[i, j]];
            }
            context[[t, j]] = acc;
        }
    }
    (context, weights)
}
