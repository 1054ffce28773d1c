//! Text pipeline: dictionary construction, fixed-length index encoding,
//! word-drop and zero-shift augmentation, and the trainable embedding table.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scalar::{cast, Scalar};
use crate::util::sha256_hex;

/// Reserved token index for padding positions.
pub const PADDING_INDEX: u32 = 0;

/// Case-folded alphanumeric tokens of a sentence; punctuation is stripped.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Word-to-index map with index 0 reserved for padding and a dedicated
/// unknown index `V_w + 1` for out-of-vocabulary words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary {
    words: BTreeMap<String, u32>,
    by_index: Vec<String>,
    min_count: usize,
    corpus_hash: String,
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    words: BTreeMap<String, u32>,
    min_count: usize,
    corpus_hash: String,
}

impl Dictionary {
    /// Number of dictionary words V_w (padding and unknown rows excluded).
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Index assigned to out-of-vocabulary words.
    pub fn unknown_index(&self) -> u32 {
        self.words.len() as u32 + 1
    }

    /// Rows an embedding table for this dictionary must have: one per word
    /// plus the padding and unknown rows.
    pub fn table_rows(&self) -> usize {
        self.words.len() + 2
    }

    /// Case-folded lookup; unseen words map to the unknown index.
    pub fn lookup(&self, word: &str) -> u32 {
        let folded = word.to_lowercase();
        self.words.get(&folded).copied().unwrap_or_else(|| self.unknown_index())
    }

    /// Word behind a dictionary index; `None` for padding, unknown, or
    /// out-of-range indices.
    pub fn word_of(&self, index: u32) -> Option<&str> {
        if index == PADDING_INDEX {
            return None;
        }
        self.by_index.get(index as usize - 1).map(|s| s.as_str())
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DictionaryFile {
            words: self.words.clone(),
            min_count: self.min_count,
            corpus_hash: self.corpus_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: DictionaryFile = serde_json::from_str(json)?;
        let mut by_index = vec![String::new(); file.words.len()];
        for (word, &idx) in &file.words {
            let pos = (idx as usize)
                .checked_sub(1)
                .filter(|&p| p < by_index.len())
                .ok_or_else(|| Error::Config {
                    reason: format!("dictionary index {idx} for {word:?} outside 1..=V_w"),
                })?;
            by_index[pos] = word.clone();
        }
        if by_index.iter().any(|w| w.is_empty()) {
            return Err(Error::Config {
                reason: "dictionary indices are not contiguous".into(),
            });
        }
        Ok(Dictionary {
            words: file.words,
            by_index,
            min_count: file.min_count,
            corpus_hash: file.corpus_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Builds a dictionary over a sentence corpus. Words occurring fewer than
/// `min_count` times are excluded; indices 1..=V_w follow lexicographic
/// order, so the result is independent of corpus order.
pub fn build_dictionary<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Dictionary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut hash_input = Vec::new();
    for sentence in corpus {
        hash_input.extend_from_slice(sentence.as_ref().as_bytes());
        hash_input.push(b'\n');
        for token in tokenize(sentence.as_ref()) {
            *counts.entry(token).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let words: BTreeMap<String, u32> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .enumerate()
        .map(|(i, (w, _))| (w, i as u32 + 1))
        .collect();
    let by_index = words.keys().cloned().collect();
    Ok(Dictionary {
        words,
        by_index,
        min_count,
        corpus_hash: sha256_hex(&hash_input),
    })
}

/// Fixed-length token index sequence. `indices` always has the configured
/// L_max entries; exactly `true_length` of them are non-zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub indices: Vec<u32>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn l_max(&self) -> usize {
        self.indices.len()
    }

    /// Non-padding indices in order.
    pub fn words(&self) -> Vec<u32> {
        self.indices.iter().copied().filter(|&i| i != PADDING_INDEX).collect()
    }
}

/// Encodes a sentence as the first `min(n, l_max)` word indices followed by
/// padding zeros.
pub fn encode_sentence(sentence: &str, dict: &Dictionary, l_max: usize) -> Result<TokenSequence> {
    let tokens = tokenize(sentence);
    if tokens.is_empty() {
        return Err(Error::EmptyTokenization);
    }
    let true_length = tokens.len().min(l_max);
    let mut indices = vec![PADDING_INDEX; l_max];
    for (slot, token) in indices.iter_mut().zip(tokens.iter().take(true_length)) {
        *slot = dict.lookup(token);
    }
    Ok(TokenSequence { indices, true_length })
}

/// Maps in-vocabulary indices back to words, skipping padding.
pub fn decode_tokens(tokens: &TokenSequence, dict: &Dictionary) -> Vec<String> {
    tokens
        .words()
        .into_iter()
        .filter_map(|i| dict.word_of(i).map(str::to_owned))
        .collect()
}

/// Drops each word independently with probability `drop_prob`; if every word
/// would be dropped, one survivor is chosen uniformly. Survivors keep their
/// relative order and the sequence is re-padded.
///
/// RNG protocol: `true_length` uniform draws in [0,1) decide the drops in
/// word order, followed by one uniform index draw only in the all-dropped
/// case.
pub fn augment_word_drop<R: Rng>(
    tokens: &TokenSequence,
    drop_prob: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidHyperparameter {
            name: "drop_prob".into(),
            reason: format!("{drop_prob} outside [0, 1)"),
        });
    }
    let words = tokens.words();
    let kept: Vec<u32> = words
        .iter()
        .filter(|_| rng.random::<f64>() >= drop_prob)
        .copied()
        .collect();
    let survivors = if kept.is_empty() && !words.is_empty() {
        vec![words[rng.random_range(0..words.len())]]
    } else {
        kept
    };
    let mut indices = vec![PADDING_INDEX; tokens.l_max()];
    indices[..survivors.len()].copy_from_slice(&survivors);
    Ok(TokenSequence {
        indices,
        true_length: survivors.len(),
    })
}

/// Moves the contiguous word block behind `k` leading zeros, with `k` drawn
/// uniformly from `0..=l_max - true_length`.
pub fn augment_zero_shift<R: Rng>(tokens: &TokenSequence, rng: &mut R) -> TokenSequence {
    let words = tokens.words();
    let l_max = tokens.l_max();
    let k = rng.random_range(0..=l_max - words.len());
    let mut indices = vec![PADDING_INDEX; l_max];
    indices[k..k + words.len()].copy_from_slice(&words);
    TokenSequence {
        indices,
        true_length: words.len(),
    }
}

/// Trainable token embedding table of shape `(V_w + 2) × e_dim`.
///
/// Row 0 is the padding row and stays exactly zero: its gradient is masked
/// inside [`EmbeddingTable::sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<F> {
    table: Array2<F>,
    trainable: bool,
}

impl<F: Scalar> EmbeddingTable<F> {
    /// Seeded Gaussian initialization with σ = 1/√e_dim; row 0 zero.
    pub fn new_seeded(vocab_size: usize, e_dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "embedding-init");
        let sigma = 1.0 / (e_dim as f64).sqrt();
        let mut table = Array2::zeros((vocab_size + 2, e_dim));
        for mut row in table.rows_mut().into_iter().skip(1) {
            for slot in row.iter_mut() {
                *slot = cast::<F>(rng.sample::<f64, _>(StandardNormal) * sigma);
            }
        }
        EmbeddingTable { table, trainable: true }
    }

    /// Wraps an existing table, enforcing the zero padding row.
    pub fn from_table(table: Array2<F>, trainable: bool) -> Result<Self> {
        if table.nrows() < 2 {
            return Err(Error::ShapeMismatch {
                context: "embedding table".into(),
                expected: "at least 2 rows".into(),
                actual: format!("{} rows", table.nrows()),
            });
        }
        if table.row(0).iter().any(|&x| x != F::zero()) {
            return Err(Error::Config {
                reason: "embedding padding row must be zero".into(),
            });
        }
        Ok(EmbeddingTable { table, trainable })
    }

    pub fn rows(&self) -> usize {
        self.table.nrows()
    }

    pub fn e_dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn table(&self) -> &Array2<F> {
        &self.table
    }

    /// Looks the sequence up row-by-row into an `l_max × e_dim` matrix.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Array2<F>> {
        let mut out = Array2::zeros((tokens.l_max(), self.e_dim()));
        for (t, &idx) in tokens.indices.iter().enumerate() {
            if idx as usize >= self.rows() {
                return Err(Error::TokenIndexOutOfRange {
                    index: idx,
                    rows: self.rows(),
                });
            }
            out.row_mut(t).assign(&self.table.row(idx as usize));
        }
        Ok(out)
    }

    /// Scatters a sequence's upstream row gradients into a table-shaped
    /// gradient accumulator.
    pub fn accumulate_grad(
        &self,
        tokens: &TokenSequence,
        upstream: &ArrayView2<F>,
        grad: &mut Array2<F>,
    ) {
        debug_assert_eq!(grad.dim(), self.table.dim());
        for (t, &idx) in tokens.indices.iter().enumerate() {
            let mut row = grad.row_mut(idx as usize);
            row += &upstream.row(t);
        }
    }

    /// SGD-with-momentum update. The padding row's gradient is masked, so
    /// row 0 remains exactly zero. No-op for frozen tables.
    pub fn sgd_step(&mut self, grad: &Array2<F>, velocity: &mut Array2<F>, lr: F, momentum: F) {
        if !self.trainable {
            return;
        }
        debug_assert_eq!(grad.dim(), self.table.dim());
        debug_assert_eq!(velocity.dim(), self.table.dim());
        for r in 1..self.table.nrows() {
            for c in 0..self.table.ncols() {
                let v = momentum * velocity[[r, c]] + grad[[r, c]];
                velocity[[r, c]] = v;
                self.table[[r, c]] = self.table[[r, c]] - lr * v;
            }
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
}
