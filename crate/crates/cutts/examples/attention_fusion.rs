//! Run multi-head attention from phoneme encodings over paired sentence
//! embeddings, then fuse the resulting context with the encodings.

use cutts::cu_encoder::{
    add_sentence_index_embeddings, brute_force_attention, cse_context, fuse_and_project,
    multi_head_cu_attention, AttentionDims, AttentionParams, CuContext, FusionProjection,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = AttentionDims {
        heads: 2,
        query_dim: 8,
        embed_dim: 6,
        key_dim: 4,
        value_dim: 4,
        context_dim: 5,
        max_pairs: 8,
    };
    let params = AttentionParams::init(dims, &mut rng);

    // 4 phoneme encodings, 4 pair embeddings, last pair is a pad
    let phonemes = Array2::from_shape_fn((4, 8), |(t, j)| ((t * 8 + j) as f64 * 0.37).sin());
    let pse = Array2::from_shape_fn((4, 6), |(p, j)| ((p * 6 + j) as f64 * 0.21).cos());
    let pse = add_sentence_index_embeddings(&pse, &params.position_table, 0).unwrap();
    let mask = [true, true, true, false];

    let (context, weights) = multi_head_cu_attention(&phonemes, &pse, Some(&mask), &params).unwrap();
    println!("context matrix: {} x {}", context.nrows(), context.ncols());
    for h in 0..dims.heads {
        println!(
            "head {h} weights for t=0: {:?}",
            weights
                .slice(ndarray::s![h, 0, ..])
                .iter()
                .map(|w| format!("{w:.3}"))
                .collect::<Vec<_>>()
        );
    }
    println!("masked pad pair gets exactly zero weight everywhere");

    let (reference, _) = brute_force_attention(&phonemes, &pse, Some(&mask), &params);
    let max_abs = context
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("agreement with the triple-loop reference: max abs {max_abs:.2e}");

    let fusion = FusionProjection::init(8 + 5, 10, &mut rng);
    let fused = fuse_and_project(&phonemes, &CuContext::Pse(context.clone()), &fusion).unwrap();
    println!("fused decoder inputs: {} x {}", fused.nrows(), fused.ncols());

    // CSE path: one broadcast row instead of per-phoneme attention
    let e_p = vec![0.1; 6];
    let e_n = vec![-0.2; 6];
    let combined = cse_context(&e_p, &e_n).unwrap();
    let fusion_cse = FusionProjection::init(8 + 12, 10, &mut rng);
    let fused_cse = fuse_and_project(&phonemes, &CuContext::Cse(combined), &fusion_cse).unwrap();
    println!(
        "CSE-fused decoder inputs: {} x {} (same context in every row)",
        fused_cse.nrows(),
        fused_cse.ncols()
    );
}
