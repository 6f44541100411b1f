//! Sentence windows, CSE chunk and PSE pair construction with exact
//! special-token layouts, CLS-embedding extraction through a pluggable
//! backend, and a binary on-disk embedding cache.
//!
//! Chunk layouts:
//! - past CSE chunk: `[CLS] u_-L [SEP] u_-L+1 [SEP] ... [SEP] u_0`
//! - future CSE chunk: `[CLS] u_0 [SEP] u_1 [SEP] ... [SEP] u_L`
//! - PSE pair i: `[CLS] u_i [SEP] u_i+1` with segment ids A/B
//!
//! Padded (out-of-paragraph) neighbors are skipped entirely in CSE chunks;
//! PSE pairs always number 2L and carry an `is_pad` flag instead.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::RwLock;

use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;

/// Hard cap from the BERT-style input packing.
pub const MAX_TOKENS: usize = 512;
const CACHE_MAGIC: &[u8; 8] = b"CUCACHE1";

#[derive(Debug, Error)]
pub enum TextContextError {
    #[error("{0}")]
    NotFound(#[from] crate::corpus::CorpusError),
    #[error("center sentence is empty")]
    EmptyCenter,
    #[error("PSE pairs are undefined for L = 0")]
    ZeroContextWidth,
    #[error("embedding backend {backend} failed on chunk {chunk_hash}: {reason}")]
    Backend {
        backend: String,
        chunk_hash: String,
        reason: String,
    },
    #[error("backend returned {got}-d vector, expected {want}-d")]
    DimensionMismatch { got: usize, want: usize },
    #[error("cache io error: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("bad cache file: {0}")]
    BadCacheFile(String),
}

/// Current sentence plus `L` past and `L` future neighbors, in document
/// order. Neighbors falling outside the paragraph are empty-text pads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceWindow {
    pub paragraph_id: String,
    pub center_index: usize,
    pub center: String,
    /// `past[0]` is u_-L, ..., `past[L-1]` is u_-1.
    pub past: Vec<(String, bool)>,
    /// `future[0]` is u_1, ..., `future[L-1]` is u_L.
    pub future: Vec<(String, bool)>,
    pub context_width: usize,
}

impl SentenceWindow {
    /// Text and pad flag at relative position `rel` (0 = center, negative =
    /// past, positive = future).
    pub fn rel_text(&self, rel: i64) -> (&str, bool) {
        let l = self.context_width as i64;
        assert!(rel.abs() <= l, "relative index out of window");
        if rel == 0 {
            (&self.center, false)
        } else if rel < 0 {
            let (t, pad) = &self.past[(l + rel) as usize];
            (t, *pad)
        } else {
            let (t, pad) = &self.future[(rel - 1) as usize];
            (t, *pad)
        }
    }
}

/// Build the window of `context_width` neighbors on each side of
/// (paragraph_id, sentence_index).
pub fn build_window(
    corpus: &Corpus,
    paragraph_id: &str,
    sentence_index: usize,
    context_width: usize,
) -> Result<SentenceWindow, TextContextError> {
    let paragraph = corpus.paragraph(paragraph_id)?;
    let center = paragraph
        .get(sentence_index)
        .ok_or(crate::corpus::CorpusError::IndexOutOfRange {
            paragraph: paragraph_id.to_string(),
            index: sentence_index,
        })?
        .text
        .clone();
    let l = context_width as i64;
    let mut past = Vec::with_capacity(context_width);
    for rel in -l..0 {
        let i = sentence_index as i64 + rel;
        if i >= 0 {
            past.push((paragraph[i as usize].text.clone(), false));
        } else {
            past.push((String::new(), true));
        }
    }
    let mut future = Vec::with_capacity(context_width);
    for rel in 1..=l {
        let i = sentence_index as i64 + rel;
        if (i as usize) < paragraph.len() {
            future.push((paragraph[i as usize].text.clone(), false));
        } else {
            future.push((String::new(), true));
        }
    }
    Ok(SentenceWindow {
        paragraph_id: paragraph_id.to_string(),
        center_index: sentence_index,
        center,
        past,
        future,
        context_width,
    })
}

/// BERT-style segment marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    A,
    B,
}

/// Subword-token sequence with special-token bookkeeping; the input unit of
/// the embedding backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenChunk {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<Segment>,
    pub cls_position: usize,
    pub sep_positions: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub truncated: bool,
}

impl TokenChunk {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokenizer interface; must match the embedding backend's vocabulary.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
}

/// Whitespace tokenizer test double. Words hash to stable ids above the
/// special-token range; an optional lexicon pins specific words.
#[derive(Debug, Default)]
pub struct WhitespaceTokenizer {
    lexicon: HashMap<String, u32>,
}

impl WhitespaceTokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_lexicon(entries: &[(&str, u32)]) -> Self {
        Self {
            lexicon: entries
                .iter()
                .map(|(w, id)| (w.to_string(), *id))
                .collect(),
        }
    }
}

pub const CLS_ID: u32 = 101;
pub const SEP_ID: u32 = 102;

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                self.lexicon
                    .get(w)
                    .copied()
                    .unwrap_or_else(|| 1000 + (fnv1a64(w.as_bytes()) % 20000) as u32)
            })
            .collect()
    }

    fn cls_id(&self) -> u32 {
        CLS_ID
    }

    fn sep_id(&self) -> u32 {
        SEP_ID
    }
}

/// Pack a list of sentences as `[CLS] s_0 [SEP] s_1 [SEP] ... s_last`.
fn pack_chunk(sentences: &[Vec<u32>], tokenizer: &dyn Tokenizer, truncated: bool) -> TokenChunk {
    let mut token_ids = vec![tokenizer.cls_id()];
    let mut sep_positions = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            sep_positions.push(token_ids.len());
            token_ids.push(tokenizer.sep_id());
        }
        token_ids.extend_from_slice(s);
    }
    let n = token_ids.len();
    TokenChunk {
        token_ids,
        segment_ids: vec![Segment::A; n],
        cls_position: 0,
        sep_positions,
        attention_mask: vec![true; n],
        truncated,
    }
}

/// Drop whole sentences farthest from the center until the chunk fits in
/// `MAX_TOKENS`. `center_last` selects whether the center sentence sits at
/// the end (past chunk) or the start (future chunk) of the list.
fn fit_chunk(
    mut sentences: Vec<Vec<u32>>,
    tokenizer: &dyn Tokenizer,
    center_last: bool,
) -> TokenChunk {
    let total = |ss: &[Vec<u32>]| -> usize {
        1 + ss.iter().map(Vec::len).sum::<usize>() + ss.len().saturating_sub(1)
    };
    let mut truncated = false;
    while sentences.len() > 1 && total(&sentences) > MAX_TOKENS {
        if center_last {
            sentences.remove(0);
        } else {
            sentences.pop();
        }
        truncated = true;
    }
    if total(&sentences) > MAX_TOKENS {
        // the center sentence alone overflows; cut its tail
        sentences[0].truncate(MAX_TOKENS - 1);
        truncated = true;
    }
    pack_chunk(&sentences, tokenizer, truncated)
}

/// Build the past and future CSE chunks of a window. Padded neighbors are
/// skipped entirely; no empty segments appear.
pub fn build_cse_chunks(
    window: &SentenceWindow,
    tokenizer: &dyn Tokenizer,
) -> Result<(TokenChunk, TokenChunk), TextContextError> {
    if window.center.trim().is_empty() {
        return Err(TextContextError::EmptyCenter);
    }
    let center = tokenizer.encode(&window.center);

    let mut past_sentences: Vec<Vec<u32>> = window
        .past
        .iter()
        .filter(|(_, pad)| !pad)
        .map(|(t, _)| tokenizer.encode(t))
        .collect();
    past_sentences.push(center.clone());
    let past = fit_chunk(past_sentences, tokenizer, true);

    let mut future_sentences: Vec<Vec<u32>> = vec![center];
    future_sentences.extend(
        window
            .future
            .iter()
            .filter(|(_, pad)| !pad)
            .map(|(t, _)| tokenizer.encode(t)),
    );
    let future = fit_chunk(future_sentences, tokenizer, false);
    Ok((past, future))
}

/// One PSE pair chunk with its pad flag and signed pair index in [-L, L-1]
/// (the index of the pair's first sentence).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairChunk {
    pub chunk: TokenChunk,
    pub pair_index: i64,
    pub is_pad: bool,
}

/// Build the 2L adjacent-sentence pairs (u_-L,u_-L+1) ... (u_L-1,u_L).
/// Pairs touching a padded neighbor are flagged, never dropped.
pub fn build_pse_pairs(
    window: &SentenceWindow,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<PairChunk>, TextContextError> {
    if window.context_width == 0 {
        return Err(TextContextError::ZeroContextWidth);
    }
    if window.center.trim().is_empty() {
        return Err(TextContextError::EmptyCenter);
    }
    let l = window.context_width as i64;
    let mut pairs = Vec::with_capacity(2 * window.context_width);
    for first in -l..l {
        let (t1, pad1) = window.rel_text(first);
        let (t2, pad2) = window.rel_text(first + 1);
        let s1 = tokenizer.encode(t1);
        let s2 = tokenizer.encode(t2);
        let mut token_ids = vec![tokenizer.cls_id()];
        token_ids.extend_from_slice(&s1);
        let sep_pos = token_ids.len();
        token_ids.push(tokenizer.sep_id());
        token_ids.extend_from_slice(&s2);
        let mut segment_ids = vec![Segment::A; sep_pos + 1];
        segment_ids.extend(vec![Segment::B; s2.len()]);
        let mut truncated = false;
        if token_ids.len() > MAX_TOKENS {
            token_ids.truncate(MAX_TOKENS);
            segment_ids.truncate(MAX_TOKENS);
            truncated = true;
        }
        let n = token_ids.len();
        pairs.push(PairChunk {
            chunk: TokenChunk {
                token_ids,
                segment_ids,
                cls_position: 0,
                sep_positions: vec![sep_pos],
                attention_mask: vec![true; n],
                truncated,
            },
            pair_index: first,
            is_pad: pad1 || pad2,
        });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Embedding backends
// ---------------------------------------------------------------------------

/// Which construction an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    PastChunk,
    FutureChunk,
    Pair { index: i64 },
}

/// A CLS embedding with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub vector: Vec<f32>,
    pub kind: EmbeddingKind,
    pub is_pad: bool,
}

/// Frozen sentence-embedding model. Implementations never update parameters;
/// the output is a pure function of (backend id, chunk).
pub trait EmbeddingBackend: Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, chunk: &TokenChunk) -> Result<Vec<f32>, String>;
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn xorshift64(state: &mut u64) -> u64 {
    let mut x = *state;
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    *state = x;
    x
}

fn chunk_seed_bytes(backend_id: &str, chunk: &TokenChunk) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(backend_id.len() + chunk.len() * 5);
    bytes.extend_from_slice(backend_id.as_bytes());
    for &t in &chunk.token_ids {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    for &s in &chunk.segment_ids {
        bytes.push(match s {
            Segment::A => 0,
            Segment::B => 1,
        });
    }
    bytes
}

/// Deterministic pseudo-embedding backend for tests and CI. The vector is
/// `dim` xorshift64 draws in [-1, 1), seeded with the 64-bit FNV-1a hash of
/// backend id, token ids (u32 little-endian) and segment ids (one byte each).
#[derive(Debug, Clone)]
pub struct StubBackend {
    dim: usize,
}

impl StubBackend {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl EmbeddingBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, chunk: &TokenChunk) -> Result<Vec<f32>, String> {
        let seed = fnv1a64(&chunk_seed_bytes(self.id(), chunk));
        let mut state = if seed == 0 { 0x9e3779b97f4a7c15 } else { seed };
        Ok((0..self.dim)
            .map(|_| {
                let x = xorshift64(&mut state);
                (((x >> 11) as f64) * (2.0 / (1u64 << 53) as f64) - 1.0) as f32
            })
            .collect())
    }
}

/// Content hash keying the cache: digest of (backend id, token ids,
/// segment ids). Identical text shares entries regardless of position.
pub fn chunk_hash(backend_id: &str, chunk: &TokenChunk) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((backend_id.len() as u32).to_le_bytes());
    hasher.update(backend_id.as_bytes());
    hasher.update((chunk.token_ids.len() as u32).to_le_bytes());
    for &t in &chunk.token_ids {
        hasher.update(t.to_le_bytes());
    }
    for &s in &chunk.segment_ids {
        hasher.update([match s {
            Segment::A => 0u8,
            Segment::B => 1u8,
        }]);
    }
    hasher.finalize().into()
}

/// Extract the backend's top-layer CLS vector for a chunk.
pub fn extract_cls_embedding(
    chunk: &TokenChunk,
    backend: &dyn EmbeddingBackend,
    kind: EmbeddingKind,
    is_pad: bool,
) -> Result<ContextEmbedding, TextContextError> {
    let vector = backend.embed(chunk).map_err(|reason| TextContextError::Backend {
        backend: backend.id().to_string(),
        chunk_hash: hex(&chunk_hash(backend.id(), chunk)),
        reason,
    })?;
    if vector.len() != backend.dim() {
        return Err(TextContextError::DimensionMismatch {
            got: vector.len(),
            want: backend.dim(),
        });
    }
    Ok(ContextEmbedding {
        vector,
        kind,
        is_pad,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Disk-backed embedding cache: many concurrent readers, serialized writers.
/// Lookups return bitwise-identical copies and never mutate stored vectors.
pub struct EmbeddingCache {
    dim: usize,
    map: RwLock<HashMap<[u8; 32], Vec<f32>>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            map: RwLock::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<Vec<f32>> {
        self.map.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: [u8; 32], vector: Vec<f32>) {
        assert_eq!(vector.len(), self.dim, "cache vector dimension mismatch");
        self.map.write().unwrap().insert(key, vector);
    }

    /// File format: magic "CUCACHE1", u32 d_e, then records of
    /// (32-byte hash, d_e little-endian f32).
    pub fn save(&self, path: &Path) -> Result<(), TextContextError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&(self.dim as u32).to_le_bytes())?;
        let map = self.map.read().unwrap();
        let mut keys: Vec<_> = map.keys().collect();
        keys.sort_unstable();
        for key in keys {
            f.write_all(key)?;
            for &v in &map[key] {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextContextError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(TextContextError::BadCacheFile(format!(
                "bad magic in {}",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut map = HashMap::new();
        let mut key = [0u8; 32];
        let mut vec_buf = vec![0u8; dim * 4];
        loop {
            match f.read_exact(&mut key) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            f.read_exact(&mut vec_buf)?;
            let vector: Vec<f32> = vec_buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            map.insert(key, vector);
        }
        Ok(Self {
            dim,
            map: RwLock::new(map),
        })
    }
}

fn cached_vector(
    chunk: &TokenChunk,
    backend: &dyn EmbeddingBackend,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<f32>, TextContextError> {
    let key = chunk_hash(backend.id(), chunk);
    if let Some(cache) = cache {
        if let Some(v) = cache.get(&key) {
            return Ok(v);
        }
    }
    let v = backend.embed(chunk).map_err(|reason| TextContextError::Backend {
        backend: backend.id().to_string(),
        chunk_hash: hex(&key),
        reason,
    })?;
    if v.len() != backend.dim() {
        return Err(TextContextError::DimensionMismatch {
            got: v.len(),
            want: backend.dim(),
        });
    }
    if let Some(cache) = cache {
        cache.put(key, v.clone());
    }
    Ok(v)
}

/// Past and future chunked-sentence embeddings e(u_P), e(u_N) of a window.
pub fn embed_window_cse(
    window: &SentenceWindow,
    tokenizer: &dyn Tokenizer,
    backend: &dyn EmbeddingBackend,
    cache: Option<&EmbeddingCache>,
) -> Result<(ContextEmbedding, ContextEmbedding), TextContextError> {
    let (past, future) = build_cse_chunks(window, tokenizer)?;
    let e_p = ContextEmbedding {
        vector: cached_vector(&past, backend, cache)?,
        kind: EmbeddingKind::PastChunk,
        is_pad: false,
    };
    let e_n = ContextEmbedding {
        vector: cached_vector(&future, backend, cache)?,
        kind: EmbeddingKind::FutureChunk,
        is_pad: false,
    };
    Ok((e_p, e_n))
}

/// The 2L x d_e paired-sentence embedding matrix E plus the key mask
/// (false where a pair touches a padded neighbor). Row order equals pair
/// order (u_-L,u_-L+1) ... (u_L-1,u_L).
pub fn embed_window_pse(
    window: &SentenceWindow,
    tokenizer: &dyn Tokenizer,
    backend: &dyn EmbeddingBackend,
    cache: Option<&EmbeddingCache>,
) -> Result<(Array2<f32>, Vec<bool>), TextContextError> {
    let pairs = build_pse_pairs(window, tokenizer)?;
    let mut e = Array2::zeros((pairs.len(), backend.dim()));
    let mut key_mask = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let v = cached_vector(&pair.chunk, backend, cache)?;
        for (j, &x) in v.iter().enumerate() {
            e[[i, j]] = x;
        }
        key_mask.push(!pair.is_pad);
    }
    Ok((e, key_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentenceEntry;
    use proptest::prelude::*;

    fn corpus_of(sentences: &[&str]) -> Corpus {
        let mut c = Corpus::new();
        for s in sentences {
            c.push_sentence(
                "p",
                SentenceEntry {
                    text: s.to_string(),
                    ..Default::default()
                },
            );
        }
        c
    }

    #[test]
    fn window_mid_paragraph_has_no_pads() {
        let c = corpus_of(&["s0", "s1", "s2", "s3", "s4"]);
        let w = build_window(&c, "p", 2, 2).unwrap();
        assert_eq!(w.center, "s2");
        assert_eq!(w.past, vec![("s0".into(), false), ("s1".into(), false)]);
        assert_eq!(w.future, vec![("s3".into(), false), ("s4".into(), false)]);
    }

    #[test]
    fn window_single_sentence_pads_all_neighbors() {
        let c = corpus_of(&["only"]);
        let w = build_window(&c, "p", 0, 2).unwrap();
        assert!(w.past.iter().all(|(t, pad)| t.is_empty() && *pad));
        assert!(w.future.iter().all(|(t, pad)| t.is_empty() && *pad));
    }

    /// Hand enumeration of every window position in a 5-sentence paragraph.
    #[test]
    fn window_positions_enumerated_by_hand() {
        let c = corpus_of(&["s0", "s1", "s2", "s3", "s4"]);
        let expect: Vec<(Vec<(&str, bool)>, Vec<(&str, bool)>)> = vec![
            (vec![("", true), ("", true)], vec![("s1", false), ("s2", false)]),
            (vec![("", true), ("s0", false)], vec![("s2", false), ("s3", false)]),
            (vec![("s0", false), ("s1", false)], vec![("s3", false), ("s4", false)]),
            (vec![("s1", false), ("s2", false)], vec![("s4", false), ("", true)]),
            (vec![("s2", false), ("s3", false)], vec![("", true), ("", true)]),
        ];
        for (i, (past, future)) in expect.into_iter().enumerate() {
            let w = build_window(&c, "p", i, 2).unwrap();
            let got_past: Vec<(&str, bool)> =
                w.past.iter().map(|(t, p)| (t.as_str(), *p)).collect();
            let got_future: Vec<(&str, bool)> =
                w.future.iter().map(|(t, p)| (t.as_str(), *p)).collect();
            assert_eq!(got_past, past, "past at index {i}");
            assert_eq!(got_future, future, "future at index {i}");
        }
    }

    #[test]
    fn window_unknown_paragraph_errors() {
        let c = corpus_of(&["a"]);
        assert!(build_window(&c, "missing", 0, 1).is_err());
        assert!(build_window(&c, "p", 5, 1).is_err());
    }

    fn tok() -> WhitespaceTokenizer {
        WhitespaceTokenizer::with_lexicon(&[("a", 10), ("b", 11), ("c", 12), ("d", 13)])
    }

    #[test]
    fn cse_past_chunk_layout_matches_paper_order() {
        let c = corpus_of(&["a", "b", "c"]);
        let w = build_window(&c, "p", 2, 2).unwrap();
        let (past, future) = build_cse_chunks(&w, &tok()).unwrap();
        assert_eq!(past.token_ids, vec![CLS_ID, 10, SEP_ID, 11, SEP_ID, 12]);
        assert_eq!(past.sep_positions, vec![2, 4]);
        assert_eq!(future.token_ids, vec![CLS_ID, 12]);
        assert!(past.segment_ids.iter().all(|&s| s == Segment::A));
        assert!(!past.truncated);
    }

    #[test]
    fn cse_l_zero_gives_cls_center_only() {
        let c = corpus_of(&["a b"]);
        let w = build_window(&c, "p", 0, 0).unwrap();
        let (past, future) = build_cse_chunks(&w, &tok()).unwrap();
        assert_eq!(past.token_ids, vec![CLS_ID, 10, 11]);
        assert_eq!(past.token_ids, future.token_ids);
    }

    #[test]
    fn cse_skips_padded_neighbors_entirely() {
        let c = corpus_of(&["c"]);
        let w = build_window(&c, "p", 0, 2).unwrap();
        let (past, _) = build_cse_chunks(&w, &tok()).unwrap();
        assert_eq!(past.token_ids, vec![CLS_ID, 12]);
        assert!(past.sep_positions.is_empty());
    }

    #[test]
    fn cse_empty_center_errors() {
        let c = corpus_of(&[""]);
        let w = build_window(&c, "p", 0, 1).unwrap();
        assert!(matches!(
            build_cse_chunks(&w, &tok()),
            Err(TextContextError::EmptyCenter)
        ));
    }

    #[test]
    fn cse_overflow_drops_farthest_sentence_first() {
        let long_a = vec!["a"; 300].join(" ");
        let long_b = vec!["b"; 300].join(" ");
        let c_text = "c";
        let c = corpus_of(&[&long_a, &long_b, c_text]);
        let w = build_window(&c, "p", 2, 2).unwrap();
        let (past, _) = build_cse_chunks(&w, &tok()).unwrap();
        assert!(past.truncated);
        assert!(past.len() <= MAX_TOKENS);
        // u_-2 (the a's) is dropped, u_-1 and the center survive
        assert_eq!(past.token_ids[1], 11);
        assert_eq!(*past.token_ids.last().unwrap(), 12);
    }

    #[test]
    fn pse_pairs_l2_order_and_layout() {
        let c = corpus_of(&["a", "b", "c", "d", "a"]);
        let w = build_window(&c, "p", 2, 2).unwrap();
        let pairs = build_pse_pairs(&w, &tok()).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(
            pairs.iter().map(|p| p.pair_index).collect::<Vec<_>>(),
            vec![-2, -1, 0, 1]
        );
        // pair (u_-2, u_-1) = (a, b)
        assert_eq!(pairs[0].chunk.token_ids, vec![CLS_ID, 10, SEP_ID, 11]);
        assert_eq!(
            pairs[0].chunk.segment_ids,
            vec![Segment::A, Segment::A, Segment::A, Segment::B]
        );
        assert!(pairs.iter().all(|p| !p.is_pad));
    }

    #[test]
    fn pse_l1_gives_two_pairs() {
        let c = corpus_of(&["a", "b", "c"]);
        let w = build_window(&c, "p", 1, 1).unwrap();
        let pairs = build_pse_pairs(&w, &tok()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].chunk.token_ids, vec![CLS_ID, 10, SEP_ID, 11]);
        assert_eq!(pairs[1].chunk.token_ids, vec![CLS_ID, 11, SEP_ID, 12]);
    }

    #[test]
    fn pse_first_sentence_pad_propagates() {
        let c = corpus_of(&["a", "b"]);
        let w = build_window(&c, "p", 0, 1).unwrap();
        let pairs = build_pse_pairs(&w, &tok()).unwrap();
        assert!(pairs[0].is_pad, "(u_-1, u_0) touches the boundary");
        assert!(!pairs[1].is_pad);
    }

    #[test]
    fn pse_l0_is_invalid() {
        let c = corpus_of(&["a"]);
        let w = build_window(&c, "p", 0, 0).unwrap();
        assert!(matches!(
            build_pse_pairs(&w, &tok()),
            Err(TextContextError::ZeroContextWidth)
        ));
    }

    #[test]
    fn stub_backend_is_deterministic_and_768d() {
        let backend = StubBackend::new(768);
        let chunk = pack_chunk(&[vec![10, 11]], &tok(), false);
        let a = backend.embed(&chunk).unwrap();
        let b = backend.embed(&chunk).unwrap();
        assert_eq!(a.len(), 768);
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    /// Independent recomputation of the stub algorithm: FNV-1a over
    /// id || token_ids(u32 LE) || segment bytes, then xorshift64 draws
    /// mapped through the top 53 bits to [-1, 1).
    #[test]
    fn stub_backend_matches_independent_reference() {
        let chunk = TokenChunk {
            token_ids: vec![CLS_ID, 17, SEP_ID, 99],
            segment_ids: vec![Segment::A, Segment::A, Segment::A, Segment::B],
            cls_position: 0,
            sep_positions: vec![2],
            attention_mask: vec![true; 4],
            truncated: false,
        };
        // reference FNV-1a
        let mut bytes = b"stub".to_vec();
        for t in [CLS_ID, 17, SEP_ID, 99] {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        bytes.extend_from_slice(&[0, 0, 0, 1]);
        let mut h: u64 = 0xcbf29ce484222325;
        for &b in &bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut state = h;
        let expect: Vec<f32> = (0..8)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (((state >> 11) as f64) / (1u64 << 53) as f64 * 2.0 - 1.0) as f32
            })
            .collect();
        let got = StubBackend::new(8).embed(&chunk).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn embed_window_pse_shapes_and_mask() {
        let c = corpus_of(&["a", "b", "c", "d", "a"]);
        let w = build_window(&c, "p", 2, 2).unwrap();
        let backend = StubBackend::new(768);
        let (e, mask) = embed_window_pse(&w, &tok(), &backend, None).unwrap();
        assert_eq!(e.dim(), (4, 768));
        assert_eq!(mask, vec![true; 4]);
    }

    #[test]
    fn single_sentence_window_masks_all_but_none() {
        // paragraph of 2: window at index 0 with L=2 -> only (u_0, u_1) is real
        let c = corpus_of(&["a", "b"]);
        let w = build_window(&c, "p", 0, 2).unwrap();
        let backend = StubBackend::new(16);
        let (_, mask) = embed_window_pse(&w, &tok(), &backend, None).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[2], "(u_0, u_1) is the unmasked pair");
    }

    #[test]
    fn cache_roundtrip_is_bitwise() {
        let c = corpus_of(&["a", "b", "c"]);
        let w = build_window(&c, "p", 1, 1).unwrap();
        let backend = StubBackend::new(32);
        let cache = EmbeddingCache::new(32);
        let (e1, m1) = embed_window_pse(&w, &tok(), &backend, Some(&cache)).unwrap();
        assert_eq!(cache.len(), 2);
        // second call hits the cache
        let (e2, m2) = embed_window_pse(&w, &tok(), &backend, Some(&cache)).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(m1, m2);

        let f = tempfile::NamedTempFile::new().unwrap();
        cache.save(f.path()).unwrap();
        let loaded = EmbeddingCache::load(f.path()).unwrap();
        assert_eq!(loaded.dim(), 32);
        let (e3, _) = embed_window_pse(&w, &tok(), &backend, Some(&loaded)).unwrap();
        // byte-compare the serialized forms
        let bytes = |e: &Array2<f32>| -> Vec<u8> {
            e.iter().flat_map(|v| v.to_le_bytes()).collect()
        };
        assert_eq!(bytes(&e1), bytes(&e3));
    }

    #[test]
    fn backend_error_carries_chunk_hash() {
        struct Failing;
        impl EmbeddingBackend for Failing {
            fn id(&self) -> &str {
                "failing"
            }
            fn dim(&self) -> usize {
                4
            }
            fn embed(&self, _: &TokenChunk) -> Result<Vec<f32>, String> {
                Err("backend offline".into())
            }
        }
        let chunk = pack_chunk(&[vec![10]], &tok(), false);
        let err = extract_cls_embedding(&chunk, &Failing, EmbeddingKind::PastChunk, false)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("backend offline"));
        assert!(msg.contains("failing"));
        let expect_hash: String = chunk_hash("failing", &chunk)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert!(msg.contains(&expect_hash));
    }

    proptest! {
        /// CSE chunk invariants over random paragraphs and window positions:
        /// CLS once at position 0, SEP count = non-pad sentences - 1, all
        /// sequences equal-length and within the token cap.
        #[test]
        fn cse_chunk_invariants(
            n_sentences in 1usize..6,
            words in proptest::collection::vec(1usize..6, 1..6),
            l in 0usize..3,
        ) {
            let sentences: Vec<String> = (0..n_sentences)
                .map(|i| {
                    let w = words[i % words.len()];
                    (0..w).map(|j| format!("w{i}x{j}")).collect::<Vec<_>>().join(" ")
                })
                .collect();
            let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
            let c = corpus_of(&refs);
            let tokenizer = WhitespaceTokenizer::new();
            for idx in 0..n_sentences {
                let w = build_window(&c, "p", idx, l).unwrap();
                let (past, future) = build_cse_chunks(&w, &tokenizer).unwrap();
                for chunk in [&past, &future] {
                    prop_assert_eq!(chunk.token_ids[0], CLS_ID);
                    prop_assert_eq!(chunk.cls_position, 0);
                    prop_assert_eq!(
                        chunk.token_ids.iter().filter(|&&t| t == CLS_ID).count(), 1);
                    prop_assert_eq!(chunk.segment_ids.len(), chunk.token_ids.len());
                    prop_assert_eq!(chunk.attention_mask.len(), chunk.token_ids.len());
                    prop_assert!(chunk.len() <= MAX_TOKENS);
                }
                let past_nonpad = w.past.iter().filter(|(_, p)| !p).count() + 1;
                prop_assert_eq!(past.sep_positions.len(), past_nonpad - 1);
                let future_nonpad = w.future.iter().filter(|(_, p)| !p).count() + 1;
                prop_assert_eq!(future.sep_positions.len(), future_nonpad - 1);
                if l >= 1 {
                    let pairs = build_pse_pairs(&w, &tokenizer).unwrap();
                    prop_assert_eq!(pairs.len(), 2 * l);
                }
            }
        }
    }
}
