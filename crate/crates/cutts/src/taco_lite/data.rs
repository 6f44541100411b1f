use ndarray::Array2;

use super::{CuMode, TacoError};
use crate::corpus::{g2p, Corpus, Inventory, Language, Lexicon, UtteranceKey};
use crate::cu_encoder::cse_context;
use crate::text_context::{
    build_window, embed_window_cse, embed_window_pse, EmbeddingBackend, EmbeddingCache,
    SentenceWindow, Tokenizer,
};

/// Cross-utterance conditioning input for one utterance, matched to the
/// model's `cu_mode`.
#[derive(Debug, Clone, PartialEq)]
pub enum UtteranceContext {
    None,
    /// [e(u_P); e(u_N)] concatenation, length 2 * d_e.
    Cse { combined: Vec<f64> },
    /// 2L x d_e pair embeddings with their pad mask (true = real pair).
    Pse {
        embeddings: Array2<f64>,
        key_mask: Vec<bool>,
    },
}

impl UtteranceContext {
    pub fn kind_name(&self) -> &'static str {
        match self {
            UtteranceContext::None => "no context",
            UtteranceContext::Cse { .. } => "CSE vector",
            UtteranceContext::Pse { .. } => "PSE matrix",
        }
    }
}

/// One ready-to-train example: phoneme ids, CU context, target spectrogram.
#[derive(Debug, Clone)]
pub struct TrainingUtterance {
    pub key: UtteranceKey,
    pub phonemes: Vec<usize>,
    pub context: UtteranceContext,
    pub target: Array2<f64>,
}

/// Embed one sentence window into the context representation the given
/// `cu_mode` consumes.
pub fn prepare_context(
    window: &SentenceWindow,
    cu_mode: CuMode,
    tokenizer: &dyn Tokenizer,
    backend: &dyn EmbeddingBackend,
    cache: Option<&EmbeddingCache>,
) -> Result<UtteranceContext, TacoError> {
    match cu_mode {
        CuMode::None => Ok(UtteranceContext::None),
        CuMode::Cse => {
            let (past, future) = embed_window_cse(window, tokenizer, backend, cache)?;
            let p: Vec<f64> = past.vector.iter().map(|&x| x as f64).collect();
            let n: Vec<f64> = future.vector.iter().map(|&x| x as f64).collect();
            let combined = cse_context(&p, &n)?;
            Ok(UtteranceContext::Cse { combined })
        }
        CuMode::Pse => {
            let (e, key_mask) = embed_window_pse(window, tokenizer, backend, cache)?;
            let embeddings = e.mapv(|x| x as f64);
            Ok(UtteranceContext::Pse {
                embeddings,
                key_mask,
            })
        }
    }
}

/// Assemble training utterances for the given corpus keys: build each
/// sentence window, embed its context, run G2P on the center sentence, and
/// attach the target spectrogram. Keys without a target are rejected.
#[allow(clippy::too_many_arguments)]
pub fn build_training_set(
    corpus: &Corpus,
    keys: &[UtteranceKey],
    cu_mode: CuMode,
    context_width: usize,
    lexicon: &Lexicon,
    language: Language,
    inventory: &Inventory,
    tokenizer: &dyn Tokenizer,
    backend: &dyn EmbeddingBackend,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<TrainingUtterance>, TacoError> {
    let mut out = Vec::with_capacity(keys.len());
    for (pid, idx) in keys {
        let entry = corpus.sentence(pid, *idx)?;
        let target = entry.target_mel.clone().ok_or(TacoError::MissingTarget)?;
        let window = build_window(corpus, pid, *idx, context_width)?;
        let context = prepare_context(&window, cu_mode, tokenizer, backend, cache)?;
        let phonemes = g2p(&entry.text, lexicon, language, inventory)?.ids;
        out.push(TrainingUtterance {
            key: (pid.clone(), *idx),
            phonemes,
            context,
            target,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, synthetic_inventory, SyntheticSpec};
    use crate::text_context::{StubBackend, WhitespaceTokenizer};

    fn toy_setup() -> (Corpus, SyntheticSpec) {
        let spec = SyntheticSpec::toy(2, 0.0);
        let corpus = generate_synthetic(&spec, 4, 7);
        (corpus, spec)
    }

    #[test]
    fn prepare_context_matches_mode() {
        let (corpus, _) = toy_setup();
        let pid = corpus.paragraph_ids().next().unwrap().clone();
        let window = build_window(&corpus, &pid, 1, 1).unwrap();
        let tok = WhitespaceTokenizer::new();
        let backend = StubBackend::new(32);

        let none = prepare_context(&window, CuMode::None, &tok, &backend, None).unwrap();
        assert_eq!(none, UtteranceContext::None);

        match prepare_context(&window, CuMode::Cse, &tok, &backend, None).unwrap() {
            UtteranceContext::Cse { combined } => assert_eq!(combined.len(), 64),
            other => panic!("expected CSE, got {}", other.kind_name()),
        }

        match prepare_context(&window, CuMode::Pse, &tok, &backend, None).unwrap() {
            UtteranceContext::Pse {
                embeddings,
                key_mask,
            } => {
                assert_eq!(embeddings.dim(), (2, 32));
                assert_eq!(key_mask.len(), 2);
                // sentence 1 has a real predecessor and a real successor
                assert_eq!(key_mask, vec![true, true]);
            }
            other => panic!("expected PSE, got {}", other.kind_name()),
        }
    }

    #[test]
    fn build_training_set_covers_target_keys() {
        let (corpus, spec) = toy_setup();
        let inventory = synthetic_inventory(&spec);
        let keys = corpus.target_keys();
        assert!(!keys.is_empty());
        let tok = WhitespaceTokenizer::new();
        let backend = StubBackend::new(32);
        let lex = Lexicon::new();
        let set = build_training_set(
            &corpus,
            &keys,
            CuMode::Pse,
            1,
            &lex,
            Language::English,
            &inventory,
            &tok,
            &backend,
            None,
        )
        .unwrap();
        assert_eq!(set.len(), keys.len());
        for utt in &set {
            assert!(!utt.phonemes.is_empty());
            assert!(utt.target.nrows() > 0);
            assert!(utt.phonemes.iter().all(|&id| id < inventory.len()));
        }
    }

    #[test]
    fn first_sentence_pse_masks_missing_past() {
        let (corpus, _) = toy_setup();
        let pid = corpus.paragraph_ids().next().unwrap().clone();
        let window = build_window(&corpus, &pid, 0, 1).unwrap();
        let tok = WhitespaceTokenizer::new();
        let backend = StubBackend::new(32);
        match prepare_context(&window, CuMode::Pse, &tok, &backend, None).unwrap() {
            UtteranceContext::Pse { key_mask, .. } => assert_eq!(key_mask, vec![false, true]),
            other => panic!("expected PSE, got {}", other.kind_name()),
        }
    }
}
