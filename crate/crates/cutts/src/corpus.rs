//! Corpus handling: JSONL manifest ingestion, deterministic splits, the
//! lexicon grapheme-to-phoneme frontend, and a synthetic context-dependent
//! dataset whose optimal context-blind error is known in closed form.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error at line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("duplicate sentence key ({paragraph}, {index})")]
    DuplicateKey { paragraph: String, index: usize },
    #[error("paragraph {paragraph} has an index gap: expected {expected}, found {found}")]
    IndexGap {
        paragraph: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown paragraph {0}")]
    UnknownParagraph(String),
    #[error("sentence index {index} out of range for paragraph {paragraph}")]
    IndexOutOfRange { paragraph: String, index: usize },
    #[error("insufficient data: need more than {needed} target utterances, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("unknown phonetic unit {0:?}")]
    UnknownUnit(String),
    #[error("empty phoneme sequence for text {0:?}")]
    EmptySequence(String),
    #[error("feature error: {0}")]
    Feature(#[from] crate::features::FeatureError),
}

/// One line of a manifest file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub paragraph_id: String,
    pub sentence_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel_path: Option<PathBuf>,
    /// Class of the previous sentence, stored by the synthetic generator so
    /// tests can use it as an oracle label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev_class: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct SentenceEntry {
    pub text: String,
    pub audio_path: Option<PathBuf>,
    pub language: Option<String>,
    pub mel_path: Option<PathBuf>,
    /// In-memory target spectrogram (frames x mel_bins), when available.
    pub target_mel: Option<Array2<f64>>,
    pub prev_class: Option<usize>,
}

impl SentenceEntry {
    pub fn has_target(&self) -> bool {
        self.target_mel.is_some() || self.mel_path.is_some() || self.audio_path.is_some()
    }
}

/// Pre-segmented corpus: paragraphs of sentences in document order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    paragraphs: BTreeMap<String, Vec<SentenceEntry>>,
}

/// Key of one utterance inside a corpus.
pub type UtteranceKey = (String, usize);

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn paragraph_ids(&self) -> impl Iterator<Item = &String> {
        self.paragraphs.keys()
    }

    pub fn paragraph(&self, id: &str) -> Result<&[SentenceEntry], CorpusError> {
        self.paragraphs
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| CorpusError::UnknownParagraph(id.to_string()))
    }

    pub fn sentence(&self, id: &str, index: usize) -> Result<&SentenceEntry, CorpusError> {
        let p = self.paragraph(id)?;
        p.get(index).ok_or_else(|| CorpusError::IndexOutOfRange {
            paragraph: id.to_string(),
            index,
        })
    }

    pub fn sentence_mut(&mut self, id: &str, index: usize) -> Option<&mut SentenceEntry> {
        self.paragraphs.get_mut(id).and_then(|p| p.get_mut(index))
    }

    pub fn push_sentence(&mut self, paragraph_id: &str, entry: SentenceEntry) {
        self.paragraphs
            .entry(paragraph_id.to_string())
            .or_default()
            .push(entry);
    }

    pub fn num_sentences(&self) -> usize {
        self.paragraphs.values().map(Vec::len).sum()
    }

    /// Keys of all sentences, in deterministic (paragraph, index) order.
    pub fn keys(&self) -> Vec<UtteranceKey> {
        self.paragraphs
            .iter()
            .flat_map(|(id, p)| (0..p.len()).map(move |i| (id.clone(), i)))
            .collect()
    }

    /// Keys of sentences that carry a synthesis target.
    pub fn target_keys(&self) -> Vec<UtteranceKey> {
        self.paragraphs
            .iter()
            .flat_map(|(id, p)| {
                p.iter()
                    .enumerate()
                    .filter(|(_, s)| s.has_target())
                    .map(move |(i, _)| (id.clone(), i))
            })
            .collect()
    }

    pub fn records(&self) -> Vec<ManifestRecord> {
        self.paragraphs
            .iter()
            .flat_map(|(id, p)| {
                p.iter().enumerate().map(move |(i, s)| ManifestRecord {
                    paragraph_id: id.clone(),
                    sentence_index: i,
                    text: s.text.clone(),
                    audio_path: s.audio_path.clone(),
                    language: s.language.clone(),
                    mel_path: s.mel_path.clone(),
                    prev_class: s.prev_class,
                })
            })
            .collect()
    }
}

/// Parse a JSON Lines manifest. Rejects duplicate (paragraph, index) keys and
/// non-contiguous indices. Target mels referenced by `mel_path` are loaded
/// eagerly, resolving relative paths against the manifest's directory.
pub fn parse_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut by_paragraph: BTreeMap<String, BTreeMap<usize, ManifestRecord>> = BTreeMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|source| {
            CorpusError::Parse {
                line: lineno + 1,
                source,
            }
        })?;
        let slot = by_paragraph.entry(rec.paragraph_id.clone()).or_default();
        if slot.contains_key(&rec.sentence_index) {
            return Err(CorpusError::DuplicateKey {
                paragraph: rec.paragraph_id,
                index: rec.sentence_index,
            });
        }
        slot.insert(rec.sentence_index, rec);
    }
    let mut corpus = Corpus::new();
    for (pid, records) in by_paragraph {
        for (expected, (&found, rec)) in records.iter().enumerate() {
            if found != expected {
                return Err(CorpusError::IndexGap {
                    paragraph: pid,
                    expected,
                    found,
                });
            }
            let target_mel = match &rec.mel_path {
                Some(p) => {
                    let full = if p.is_absolute() { p.clone() } else { base.join(p) };
                    Some(crate::features::load_mel(&full)?.data)
                }
                None => None,
            };
            corpus.push_sentence(
                &pid,
                SentenceEntry {
                    text: rec.text.clone(),
                    audio_path: rec.audio_path.clone(),
                    language: rec.language.clone(),
                    mel_path: rec.mel_path.clone(),
                    target_mel,
                    prev_class: rec.prev_class,
                },
            );
        }
    }
    Ok(corpus)
}

pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut file = std::fs::File::create(path)?;
    for rec in corpus.records() {
        serde_json::to_writer(&mut file, &rec).map_err(|source| CorpusError::Parse {
            line: 0,
            source,
        })?;
        writeln!(file)?;
    }
    Ok(())
}

/// Train/validation/test membership, 100 utterances each for val and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<UtteranceKey>,
    pub val: Vec<UtteranceKey>,
    pub test: Vec<UtteranceKey>,
}

pub const VAL_SIZE: usize = 100;
pub const TEST_SIZE: usize = 100;

/// Deterministic split of the target-bearing utterances. Windows built for
/// val/test utterances may still read neighbor text from any split; text is
/// context, not a training target.
pub fn split(corpus: &Corpus, seed: u64) -> Result<Split, CorpusError> {
    split_sized(corpus, seed, VAL_SIZE, TEST_SIZE)
}

pub fn split_sized(
    corpus: &Corpus,
    seed: u64,
    val_size: usize,
    test_size: usize,
) -> Result<Split, CorpusError> {
    let mut keys = corpus.target_keys();
    if keys.len() <= val_size + test_size {
        return Err(CorpusError::InsufficientData {
            needed: val_size + test_size,
            found: keys.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let val = keys[..val_size].to_vec();
    let test = keys[val_size..val_size + test_size].to_vec();
    let train = keys[val_size + test_size..].to_vec();
    Ok(Split { train, val, test })
}

// ---------------------------------------------------------------------------
// G2P frontend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Language {
    English,
    Mandarin,
}

/// Word-to-phonemes lookup table. File format: one entry per line,
/// `word<TAB>phoneme phoneme ...`.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str, phonemes: &[&str]) {
        self.entries.insert(
            word.to_lowercase(),
            phonemes.iter().map(|s| s.to_string()).collect(),
        );
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(|v| v.as_slice())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let mut lex = Self::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some((word, rest)) = line.split_once('\t') {
                let phonemes: Vec<&str> = rest.split_whitespace().collect();
                lex.insert(word, &phonemes);
            }
        }
        Ok(lex)
    }

    pub fn units(&self) -> BTreeSet<String> {
        self.entries.values().flatten().cloned().collect()
    }
}

/// Phonetic inventory mapping unit strings to dense ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Inventory {
    units: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Inventory {
    pub fn from_units<I: IntoIterator<Item = String>>(units: I) -> Self {
        let set: BTreeSet<String> = units.into_iter().collect();
        let units: Vec<String> = set.into_iter().collect();
        let index = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        Self { units, index }
    }

    /// Lexicon units plus single-letter fallback units a-z and digits.
    pub fn from_lexicon(lexicon: &Lexicon) -> Self {
        let mut units = lexicon.units();
        for c in ('a'..='z').chain('0'..='9') {
            units.insert(c.to_string());
        }
        Self::from_units(units)
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn id(&self, unit: &str) -> Result<usize, CorpusError> {
        self.index
            .get(unit)
            .copied()
            .ok_or_else(|| CorpusError::UnknownUnit(unit.to_string()))
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }
}

/// Phoneme id sequence for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub tone_augmented: bool,
}

/// Convert text to phonetic units: lexicon lookup per whitespace token, with
/// out-of-vocabulary words falling back to per-letter units. Mandarin entries
/// carry tone digits on their phonemes, so phoneme+tone combinations are
/// distinct units.
pub fn g2p_units(text: &str, lexicon: &Lexicon, language: Language) -> Vec<String> {
    let mut units = Vec::new();
    for word in text.split_whitespace() {
        let cleaned: String = word
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        if cleaned.is_empty() {
            continue;
        }
        match lexicon.lookup(&cleaned) {
            Some(ph) => units.extend(ph.iter().cloned()),
            None => units.extend(cleaned.chars().map(|c| c.to_string())),
        }
    }
    let _ = language;
    units
}

pub fn g2p(
    text: &str,
    lexicon: &Lexicon,
    language: Language,
    inventory: &Inventory,
) -> Result<PhonemeSequence, CorpusError> {
    let units = g2p_units(text, lexicon, language);
    if units.is_empty() {
        return Err(CorpusError::EmptySequence(text.to_string()));
    }
    let ids = units
        .iter()
        .map(|u| inventory.id(u))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PhonemeSequence {
        ids,
        tone_augmented: language == Language::Mandarin,
    })
}

// ---------------------------------------------------------------------------
// Synthetic context-dependent corpus
// ---------------------------------------------------------------------------

/// Generator description for the synthetic corpus. Every sentence belongs to
/// one of `classes` neighbor classes; the target spectrogram of a sentence is
/// its phonemes' base profiles shifted by the PREVIOUS sentence's class
/// vector, plus Gaussian noise. The first sentence of each paragraph carries
/// no target and serves only as context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// classes x mel_bins shift vectors, pairwise distinct.
    pub class_shifts: Vec<Vec<f64>>,
    /// Phonetic unit -> mel_bins base contour.
    pub base_profiles: BTreeMap<String, Vec<f64>>,
    pub frames_per_phoneme: usize,
    pub noise_sigma: f64,
    pub mel_bins: usize,
    /// Sentences per paragraph, including the leading context-only one.
    pub sentences_per_paragraph: usize,
    /// Per-class word vocabulary used to compose sentence text.
    pub class_vocab: Vec<Vec<String>>,
    pub words_per_sentence: usize,
}

impl SyntheticSpec {
    /// Small two-class spec used by the toy experiments. Words spell their
    /// phonemes directly (per-letter fallback units).
    pub fn toy(classes: usize, noise_sigma: f64) -> Self {
        let bins = 80;
        let vocab: Vec<Vec<String>> = (0..classes)
            .map(|k| {
                (0..3)
                    .map(|w| {
                        let a = (b'a' + ((k * 3 + w) * 2 % 26) as u8) as char;
                        let b = (b'a' + ((k * 5 + w * 7 + 1) % 26) as u8) as char;
                        format!("{a}{b}")
                    })
                    .collect()
            })
            .collect();
        let mut base_profiles = BTreeMap::new();
        for c in 'a'..='z' {
            let idx = (c as u8 - b'a') as f64;
            let profile: Vec<f64> = (0..bins)
                .map(|d| {
                    let x = d as f64 / bins as f64;
                    0.5 + 0.35 * (std::f64::consts::TAU * x * (1.0 + idx % 5.0) + idx).sin()
                })
                .collect();
            base_profiles.insert(c.to_string(), profile);
        }
        let class_shifts: Vec<Vec<f64>> = (0..classes)
            .map(|k| {
                (0..bins)
                    .map(|d| {
                        let x = d as f64 / bins as f64;
                        0.5 * (std::f64::consts::TAU * x + k as f64 * std::f64::consts::PI).cos()
                    })
                    .collect()
            })
            .collect();
        Self {
            classes,
            class_shifts,
            base_profiles,
            frames_per_phoneme: 2,
            noise_sigma,
            mel_bins: bins,
            sentences_per_paragraph: 4,
            class_vocab: vocab,
            words_per_sentence: 1,
        }
    }

    /// Mean squared error of the best context-blind predictor, in closed
    /// form: per-bin variance of the class shifts (uniform class weights)
    /// averaged over bins, plus the noise variance.
    pub fn context_blind_floor(&self) -> f64 {
        let k = self.classes as f64;
        let mut var_sum = 0.0;
        for d in 0..self.mel_bins {
            let mean: f64 = self.class_shifts.iter().map(|s| s[d]).sum::<f64>() / k;
            let var: f64 = self
                .class_shifts
                .iter()
                .map(|s| (s[d] - mean).powi(2))
                .sum::<f64>()
                / k;
            var_sum += var;
        }
        var_sum / self.mel_bins as f64 + self.noise_sigma * self.noise_sigma
    }

    /// Noiseless target for a sentence, given its text and the previous
    /// sentence's class (`None` when there is no previous sentence).
    pub fn clean_target(
        &self,
        text: &str,
        prev_class: Option<usize>,
        lexicon: &Lexicon,
    ) -> Array2<f64> {
        let units = g2p_units(text, lexicon, Language::English);
        let frames = units.len() * self.frames_per_phoneme;
        let mut mel = Array2::zeros((frames, self.mel_bins));
        for (pi, unit) in units.iter().enumerate() {
            let base = self
                .base_profiles
                .get(unit)
                .unwrap_or_else(|| panic!("no base profile for unit {unit:?}"));
            for f in 0..self.frames_per_phoneme {
                for d in 0..self.mel_bins {
                    let shift = prev_class.map_or(0.0, |c| self.class_shifts[c][d]);
                    mel[[pi * self.frames_per_phoneme + f, d]] = base[d] + shift;
                }
            }
        }
        mel
    }
}

/// Generate a synthetic corpus of `paragraphs` paragraphs. Deterministic for
/// a fixed (spec, seed).
pub fn generate_synthetic(spec: &SyntheticSpec, paragraphs: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = Lexicon::new();
    let mut corpus = Corpus::new();
    for p in 0..paragraphs {
        let pid = format!("syn{p:05}");
        let mut prev_class: Option<usize> = None;
        for s in 0..spec.sentences_per_paragraph {
            let class = rng.gen_range(0..spec.classes);
            let words: Vec<String> = (0..spec.words_per_sentence)
                .map(|_| {
                    let v = &spec.class_vocab[class];
                    v[rng.gen_range(0..v.len())].clone()
                })
                .collect();
            let text = words.join(" ");
            let target_mel = if s == 0 {
                None
            } else {
                let mut mel = spec.clean_target(&text, prev_class, &lexicon);
                if spec.noise_sigma > 0.0 {
                    for v in mel.iter_mut() {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        *v += spec.noise_sigma
                            * (-2.0 * u1.ln()).sqrt()
                            * (std::f64::consts::TAU * u2).cos();
                    }
                }
                Some(mel)
            };
            corpus.push_sentence(
                &pid,
                SentenceEntry {
                    text,
                    audio_path: None,
                    language: Some("en".to_string()),
                    mel_path: None,
                    target_mel,
                    prev_class: if s == 0 { None } else { prev_class },
                },
            );
            prev_class = Some(class);
        }
    }
    corpus
}

/// Inventory covering every unit the synthetic spec can emit.
pub fn synthetic_inventory(spec: &SyntheticSpec) -> Inventory {
    let lexicon = Lexicon::new();
    let units: BTreeSet<String> = spec
        .class_vocab
        .iter()
        .flatten()
        .flat_map(|w| g2p_units(w, &lexicon, Language::English))
        .collect();
    Inventory::from_units(units)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn parse_three_record_paragraph() {
        let f = write_lines(&[
            r#"{"paragraph_id":"p","sentence_index":1,"text":"b"}"#,
            r#"{"paragraph_id":"p","sentence_index":0,"text":"a"}"#,
            r#"{"paragraph_id":"p","sentence_index":2,"text":"c"}"#,
        ]);
        let corpus = parse_manifest(f.path()).unwrap();
        let p = corpus.paragraph("p").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].text, "a");
        assert_eq!(p[2].text, "c");
    }

    #[test]
    fn index_gap_is_rejected() {
        let f = write_lines(&[
            r#"{"paragraph_id":"p","sentence_index":0,"text":"a"}"#,
            r#"{"paragraph_id":"p","sentence_index":2,"text":"c"}"#,
        ]);
        assert!(matches!(
            parse_manifest(f.path()),
            Err(CorpusError::IndexGap { .. })
        ));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let f = write_lines(&[
            r#"{"paragraph_id":"p","sentence_index":0,"text":"a"}"#,
            r#"{"paragraph_id":"p","sentence_index":0,"text":"b"}"#,
        ]);
        assert!(matches!(
            parse_manifest(f.path()),
            Err(CorpusError::DuplicateKey { .. })
        ));
    }

    #[test]
    fn manifest_roundtrip_is_byte_identical() {
        let f = write_lines(&[
            r#"{"paragraph_id":"p","sentence_index":0,"text":"hello world","language":"en"}"#,
            r#"{"paragraph_id":"p","sentence_index":1,"text":"again"}"#,
        ]);
        let corpus = parse_manifest(f.path()).unwrap();
        let out1 = tempfile::NamedTempFile::new().unwrap();
        write_manifest(&corpus, out1.path()).unwrap();
        let reparsed = parse_manifest(out1.path()).unwrap();
        let out2 = tempfile::NamedTempFile::new().unwrap();
        write_manifest(&reparsed, out2.path()).unwrap();
        assert_eq!(
            std::fs::read(out1.path()).unwrap(),
            std::fs::read(out2.path()).unwrap()
        );
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SyntheticSpec::toy(2, 0.0);
        let corpus = generate_synthetic(&spec, 100, 1); // 300 targets
        let a = split(&corpus, 42).unwrap();
        let b = split(&corpus, 42).unwrap();
        assert_eq!(a.val.len(), 100);
        assert_eq!(a.test.len(), 100);
        assert_eq!(a.train.len(), 100);
        assert_eq!(a, b);
        let mut all: BTreeSet<_> = a.train.iter().collect();
        all.extend(a.val.iter());
        all.extend(a.test.iter());
        assert_eq!(all.len(), 300, "splits must be disjoint");
    }

    #[test]
    fn split_rejects_small_corpus() {
        let spec = SyntheticSpec::toy(2, 0.0);
        // 50 paragraphs -> 150 targets, not enough for 100+100+train
        let corpus = generate_synthetic(&spec, 50, 1);
        assert!(matches!(
            split(&corpus, 0),
            Err(CorpusError::InsufficientData { .. })
        ));
    }

    #[test]
    fn g2p_lexicon_and_oov_fallback() {
        let mut lex = Lexicon::new();
        lex.insert("tom", &["T", "AA1", "M"]);
        let inv = Inventory::from_lexicon(&lex);
        let seq = g2p("tom", &lex, Language::English, &inv).unwrap();
        let units: Vec<_> = seq.ids.iter().map(|&i| inv.unit(i).unwrap()).collect();
        assert_eq!(units, vec!["T", "AA1", "M"]);

        let seq = g2p("zzq", &lex, Language::English, &inv).unwrap();
        let units: Vec<_> = seq.ids.iter().map(|&i| inv.unit(i).unwrap()).collect();
        assert_eq!(units, vec!["z", "z", "q"]);
    }

    #[test]
    fn g2p_mixed_sentence_matches_hand_computed_sequence() {
        let mut lex = Lexicon::new();
        lex.insert("tom", &["T", "AA1", "M"]);
        lex.insert("called", &["K", "AO1", "L", "D"]);
        let inv = Inventory::from_lexicon(&lex);
        // "Tom called ab." -> lexicon, lexicon, letter fallback
        let seq = g2p("Tom called ab.", &lex, Language::English, &inv).unwrap();
        let units: Vec<_> = seq.ids.iter().map(|&i| inv.unit(i).unwrap()).collect();
        assert_eq!(units, vec!["T", "AA1", "M", "K", "AO1", "L", "D", "a", "b"]);
    }

    #[test]
    fn mandarin_tones_are_distinct_units() {
        let mut lex = Lexicon::new();
        lex.insert("ma3", &["m", "a3"]);
        lex.insert("ma4", &["m", "a4"]);
        let inv = Inventory::from_lexicon(&lex);
        let a = g2p("ma3", &lex, Language::Mandarin, &inv).unwrap();
        let b = g2p("ma4", &lex, Language::Mandarin, &inv).unwrap();
        assert!(a.tone_augmented);
        assert_ne!(a.ids[1], b.ids[1]);
        assert_eq!(a.ids[0], b.ids[0]);
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec::toy(2, 0.05);
        let a = generate_synthetic(&spec, 10, 7);
        let b = generate_synthetic(&spec, 10, 7);
        for key in a.keys() {
            let sa = a.sentence(&key.0, key.1).unwrap();
            let sb = b.sentence(&key.0, key.1).unwrap();
            assert_eq!(sa.text, sb.text);
            assert_eq!(sa.target_mel, sb.target_mel);
        }
    }

    #[test]
    fn noiseless_single_class_targets_equal_base_plus_shift() {
        let spec = SyntheticSpec::toy(1, 0.0);
        let corpus = generate_synthetic(&spec, 3, 0);
        let lex = Lexicon::new();
        for (pid, idx) in corpus.target_keys() {
            let s = corpus.sentence(&pid, idx).unwrap();
            let expect = spec.clean_target(&s.text, s.prev_class, &lex);
            assert_eq!(s.target_mel.as_ref().unwrap(), &expect);
        }
    }

    #[test]
    fn two_class_delta_equals_shift_difference() {
        let spec = SyntheticSpec::toy(2, 0.0);
        let lex = Lexicon::new();
        let text = &spec.class_vocab[0][0];
        let a = spec.clean_target(text, Some(0), &lex);
        let b = spec.clean_target(text, Some(1), &lex);
        let delta = &a - &b;
        for row in delta.rows() {
            for (d, &v) in row.iter().enumerate() {
                let expect = spec.class_shifts[0][d] - spec.class_shifts[1][d];
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    /// Independent oracle for the analytic floor: enumerate the generator's
    /// class distribution directly and compare with the closed form.
    #[test]
    fn context_blind_floor_matches_enumerated_variance() {
        let spec = SyntheticSpec::toy(2, 0.05);
        let k = spec.classes as f64;
        let mut acc = 0.0;
        for d in 0..spec.mel_bins {
            let shifts: Vec<f64> = spec.class_shifts.iter().map(|s| s[d]).collect();
            let mean = shifts.iter().sum::<f64>() / k;
            acc += shifts.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k;
        }
        let expect = acc / spec.mel_bins as f64 + 0.05 * 0.05;
        assert!((spec.context_blind_floor() - expect).abs() < 1e-12);
        assert!(spec.context_blind_floor() > 0.0);
    }
}
