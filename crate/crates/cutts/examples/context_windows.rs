//! Build sentence windows over a small paragraph and print the CSE chunk and
//! PSE pair token layouts.

use cutts::corpus::{Corpus, SentenceEntry};
use cutts::text_context::{
    build_cse_chunks, build_pse_pairs, build_window, TokenChunk, WhitespaceTokenizer,
};

fn describe(chunk: &TokenChunk) -> String {
    format!(
        "tokens {:?} segments {:?} cls@{} sep@{:?}{}",
        chunk.token_ids,
        chunk.segment_ids,
        chunk.cls_position,
        chunk.sep_positions,
        if chunk.truncated { " (truncated)" } else { "" }
    )
}

fn main() {
    let mut corpus = Corpus::new();
    for text in [
        "the storm broke at dawn",
        "rain hammered the roof",
        "she lit the stove",
        "coffee smelled of smoke",
        "the road was still flooded",
    ] {
        corpus.push_sentence(
            "demo",
            SentenceEntry {
                text: text.to_string(),
                ..Default::default()
            },
        );
    }

    let tokenizer = WhitespaceTokenizer::new();
    for center in 0..5 {
        let window = build_window(&corpus, "demo", center, 2).expect("window");
        println!("center {}: {:?}", center, window.center);
        for rel in [-2i64, -1, 1, 2] {
            let (text, pad) = window.rel_text(rel);
            println!("  u_{rel:+}: {:?}{}", text, if pad { " (pad)" } else { "" });
        }
        let (past, future) = build_cse_chunks(&window, &tokenizer).expect("cse");
        println!("  CSE past   {}", describe(&past));
        println!("  CSE future {}", describe(&future));
        for pair in build_pse_pairs(&window, &tokenizer).expect("pse") {
            println!(
                "  PSE pair {:+}{}: {}",
                pair.pair_index,
                if pair.is_pad { " (pad)" } else { "" },
                describe(&pair.chunk)
            );
        }
        println!();
    }
}
