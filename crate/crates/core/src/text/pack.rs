use rand::Rng;

use super::vocab::{CLS, PAD, SENT, SEP};
use crate::error::{Result, SlmError};

/// A tokenized document: an ordered list of non-empty sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub sentences: Vec<Vec<usize>>,
}

impl Document {
    pub fn new(sentences: Vec<Vec<usize>>) -> Result<Self> {
        if sentences.is_empty() || sentences.iter().any(Vec::is_empty) {
            return Err(SlmError::data("a document needs at least one non-empty sentence"));
        }
        Ok(Document { sentences })
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

/// Where one sentence sits inside a packed example. Words occupy
/// `start..end`; `sent_token` is the index of its `[SENT]` marker when
/// sentence tokens are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentenceSpan {
    pub sent_token: Option<usize>,
    pub start: usize,
    pub end: usize,
}

impl SentenceSpan {
    /// First row belonging to the sentence, marker included.
    pub fn first(&self) -> usize {
        self.sent_token.unwrap_or(self.start)
    }

    /// Number of rows belonging to the sentence, marker included.
    pub fn block_len(&self) -> usize {
        self.end - self.first()
    }
}

/// One model input of length `L`: `[CLS]`, then per sentence `[SENT]` and
/// its words, then `[SEP]`, then `[PAD]` up to `L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedExample {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub sentence_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub spans: Vec<SentenceSpan>,
    pub attention_len: usize,
    /// Sentence-id row shared by `[CLS]`, `[SEP]` and padding.
    pub reserved_sentence_id: usize,
}

impl PackedExample {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn n_sentences(&self) -> usize {
        self.spans.len()
    }

    pub fn sep_index(&self) -> usize {
        self.attention_len - 1
    }

    pub fn has_sentence_tokens(&self) -> bool {
        self.spans.iter().all(|s| s.sent_token.is_some())
    }

    /// Rows forming the summary sequence C: `[CLS]`, each `[SENT]` in memory
    /// order, `[SEP]`.
    pub fn summary_indices(&self) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(self.spans.len() + 2);
        idx.push(0);
        for s in &self.spans {
            idx.push(
                s.sent_token
                    .ok_or_else(|| SlmError::contract("summary needs sentence tokens in the packed example"))?,
            );
        }
        idx.push(self.sep_index());
        Ok(idx)
    }

    /// Word ids per sentence, specials and padding dropped.
    pub fn unpack(&self) -> Vec<Vec<usize>> {
        self.spans
            .iter()
            .map(|s| self.token_ids[s.start..s.end].to_vec())
            .collect()
    }

    /// Positions that carry word tokens.
    pub fn word_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans.iter().flat_map(|s| s.start..s.end)
    }
}

/// Merges uniformly chosen adjacent pairs until at most `max` sentences
/// remain. Word order is preserved.
pub fn merge_to_max<R: Rng + ?Sized>(mut sentences: Vec<Vec<usize>>, max: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let max = max.max(1);
    while sentences.len() > max {
        let i = rng.gen_range(0..sentences.len() - 1);
        let next = sentences.remove(i + 1);
        sentences[i].extend(next);
    }
    sentences
}

/// Packing options shared by pre-training and fine-tuning inputs.
#[derive(Clone, Copy, Debug)]
pub struct PackOptions {
    pub max_len: usize,
    pub max_sentences: usize,
    pub sentence_tokens: bool,
}

/// Lays out sentences (each with a segment id) with tail truncation at
/// `max_len`. A sentence that no longer fits with at least one word is
/// dropped. Returns `None` when nothing fits.
pub fn pack_sentences(sentences: &[(Vec<usize>, usize)], opts: PackOptions) -> Option<PackedExample> {
    let len = opts.max_len;
    if len < 3 {
        return None;
    }
    let reserved = opts.max_sentences;
    let mut tokens = vec![CLS];
    let mut segments = vec![0];
    let mut sent_ids = vec![reserved];
    let mut spans = Vec::new();
    let marker = usize::from(opts.sentence_tokens);
    for (k, (words, seg)) in sentences.iter().enumerate() {
        if k >= opts.max_sentences {
            break;
        }
        // room left before the trailing [SEP]
        let room = len - 1 - tokens.len();
        if room < marker + 1 || words.is_empty() {
            break;
        }
        let take = words.len().min(room - marker);
        let sent_token = opts.sentence_tokens.then(|| {
            tokens.push(SENT);
            segments.push(*seg);
            sent_ids.push(k);
            tokens.len() - 1
        });
        let start = tokens.len();
        tokens.extend_from_slice(&words[..take]);
        segments.extend(std::iter::repeat_n(*seg, take));
        sent_ids.extend(std::iter::repeat_n(k, take));
        spans.push(SentenceSpan {
            sent_token,
            start,
            end: tokens.len(),
        });
        if take < words.len() {
            break;
        }
    }
    if spans.is_empty() {
        return None;
    }
    tokens.push(SEP);
    segments.push(segments.last().copied().unwrap_or(0));
    sent_ids.push(reserved);
    let attention_len = tokens.len();
    let position_ids = (0..attention_len).chain(std::iter::repeat(0)).take(len).collect();
    tokens.resize(len, PAD);
    segments.resize(len, 0);
    sent_ids.resize(len, reserved);
    Some(PackedExample {
        token_ids: tokens,
        position_ids,
        sentence_ids: sent_ids,
        segment_ids: segments,
        spans,
        attention_len,
        reserved_sentence_id: reserved,
    })
}

/// Merges to at most `max_sentences` and packs one document. `None` is the
/// skip-example signal: nothing survived truncation.
pub fn pack_example<R: Rng + ?Sized>(doc: &Document, opts: PackOptions, rng: &mut R) -> Option<PackedExample> {
    let merged = merge_to_max(doc.sentences.clone(), opts.max_sentences, rng);
    let with_segments: Vec<(Vec<usize>, usize)> = merged.into_iter().map(|s| (s, 0)).collect();
    pack_sentences(&with_segments, opts)
}
