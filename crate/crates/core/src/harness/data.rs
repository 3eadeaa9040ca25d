//! Token-level views of the corpus: BPE targets, document streams, packed
//! pre-training windows and MLM masks.

use rand::seq::index::sample;
use rand::Rng;

use crate::corpus::{Document, Splits};
use crate::distillation::{DocumentTokens, UtteranceRef};
use crate::error::{Error, Result};
use crate::tokenizer::{bpe_train, Vocabulary, EOS, MASK, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUtterance {
    pub id: String,
    pub text: String,
    /// BPE ids followed by EOS.
    pub targets: Vec<u32>,
    pub frames: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDocument {
    pub id: usize,
    pub utterances: Vec<PreparedUtterance>,
    pub tokens: DocumentTokens,
}

impl PreparedDocument {
    pub fn utterance_ref(&self, index: usize) -> UtteranceRef<'_> {
        UtteranceRef {
            doc: &self.tokens,
            index,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreparedSplits {
    pub text: Vec<PreparedDocument>,
    pub train: Vec<PreparedDocument>,
    pub dev: Vec<PreparedDocument>,
    pub test: Vec<PreparedDocument>,
}

pub fn utterance_id(doc: usize, index: usize) -> String {
    format!("{doc}-{index}")
}

pub fn prepare_document(doc: &Document, vocab: &Vocabulary) -> PreparedDocument {
    let utterances: Vec<PreparedUtterance> = doc
        .utterances
        .iter()
        .map(|u| {
            let mut targets = vocab.encode(&u.text);
            targets.push(EOS);
            PreparedUtterance {
                id: utterance_id(doc.id, u.index_in_doc),
                text: u.text.clone(),
                targets,
                frames: u.frames.clone(),
            }
        })
        .collect();
    let targets: Vec<Vec<u32>> = utterances.iter().map(|u| u.targets.clone()).collect();
    PreparedDocument {
        id: doc.id,
        tokens: DocumentTokens::from_targets(&targets),
        utterances,
    }
}

pub fn prepare_splits(splits: &Splits, vocab: &Vocabulary) -> PreparedSplits {
    let prep = |docs: &[Document]| docs.iter().map(|d| prepare_document(d, vocab)).collect();
    PreparedSplits {
        text: prep(&splits.text),
        train: prep(&splits.train),
        dev: prep(&splits.dev),
        test: prep(&splits.test),
    }
}

/// BPE vocabulary trained on all text available to the language models:
/// the text-only split and the training transcripts.
pub fn train_vocabulary(splits: &Splits, target_size: usize) -> Result<Vocabulary> {
    let lines: Vec<&str> = splits
        .text
        .iter()
        .chain(&splits.train)
        .flat_map(|d| d.utterances.iter().map(|u| u.text.as_str()))
        .collect();
    bpe_train(&lines, target_size)
}

/// Contiguous runs of exactly `window` tokens inside each document; the
/// final short run of a document is right-padded with PAD.
pub fn pack_sequences(streams: &[&[u32]], window: usize) -> Result<Vec<Vec<u32>>> {
    if window == 0 {
        return Err(Error::Usage("window must be >= 1".into()));
    }
    let mut out = Vec::new();
    for stream in streams {
        for chunk in stream.chunks(window) {
            let mut w = chunk.to_vec();
            w.resize(window, PAD);
            out.push(w);
        }
    }
    Ok(out)
}

/// `floor(rate * non_pad)` distinct non-PAD positions, uniformly at random,
/// in ascending order.
pub fn sample_mlm_masks<R: Rng + ?Sized>(window: &[u32], rate: f64, rng: &mut R) -> Vec<usize> {
    let candidates: Vec<usize> = (0..window.len()).filter(|&i| window[i] != PAD).collect();
    let count = mask_count(candidates.len(), rate);
    let mut picked: Vec<usize> = sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

pub fn mask_count(non_pad: usize, rate: f64) -> usize {
    (rate * non_pad as f64).floor() as usize
}

pub fn apply_masks(window: &[u32], positions: &[usize]) -> Vec<u32> {
    let mut out = window.to_vec();
    for &p in positions {
        out[p] = MASK;
    }
    out
}
