//! Embed a window with the deterministic stub backend, cache the vectors to
//! disk, and show that reloading serves bitwise-identical results.

use cutts::corpus::{Corpus, SentenceEntry};
use cutts::text_context::{
    build_window, embed_window_cse, embed_window_pse, EmbeddingCache, StubBackend,
    WhitespaceTokenizer,
};

fn main() {
    let mut corpus = Corpus::new();
    for text in ["first sentence here", "the middle one", "and the last"] {
        corpus.push_sentence(
            "p",
            SentenceEntry {
                text: text.to_string(),
                ..Default::default()
            },
        );
    }
    let window = build_window(&corpus, "p", 1, 2).expect("window");
    let tokenizer = WhitespaceTokenizer::new();
    let backend = StubBackend::new(16);
    let cache = EmbeddingCache::new(16);

    let (past, future) = embed_window_cse(&window, &tokenizer, &backend, Some(&cache)).unwrap();
    println!("e(u_P)[..4] = {:?}", &past.vector[..4]);
    println!("e(u_N)[..4] = {:?}", &future.vector[..4]);

    let (pse, mask) = embed_window_pse(&window, &tokenizer, &backend, Some(&cache)).unwrap();
    println!("PSE matrix {} x {}, key mask {:?}", pse.nrows(), pse.ncols(), mask);
    println!("cache holds {} vectors", cache.len());

    let dir = std::env::temp_dir().join("cutts_stub_embeddings_demo");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cache.bin");
    cache.save(&path).unwrap();
    let reloaded = EmbeddingCache::load(&path).unwrap();
    let (pse2, _) = embed_window_pse(&window, &tokenizer, &backend, Some(&reloaded)).unwrap();
    assert_eq!(pse, pse2);
    println!("reloaded cache reproduces embeddings bitwise: ok");
    std::fs::remove_dir_all(&dir).ok();
}
