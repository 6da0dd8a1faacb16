//! Turning documents into training batches.

use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::masking::{apply_span_masking, MaskedExample, MaskingConfig};
use crate::rng;
use crate::shuffle::{batch_shuffle_mask, shuffle_example, PositionMode};
use crate::text::{pack_example, Document, PackOptions};

/// Masked, possibly shuffled examples with their pointer targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<MaskedExample>,
    pub targets: Vec<Vec<usize>>,
    pub perms: Vec<Vec<usize>>,
    pub shuffled: bool,
}

impl Batch {
    pub fn token_count(&self) -> usize {
        self.examples.iter().map(|m| m.example.attention_len).sum()
    }
}

/// Deterministic batch source over a fixed document order. Example `j` of
/// step `s` is document `(s * batch_size + j) mod n`; every random choice is
/// drawn from a stream keyed by that global example index.
#[derive(Clone, Debug)]
pub struct BatchBuilder<'a> {
    pub docs: &'a [Document],
    pub pack: PackOptions,
    pub masking: MaskingConfig,
    pub vocab_size: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub shuffle_fraction: f64,
    pub position_mode: PositionMode,
}

impl<'a> BatchBuilder<'a> {
    pub fn new(docs: &'a [Document], cfg: &Config) -> Result<Self> {
        if docs.is_empty() {
            return Err(SlmError::data("training corpus has no documents"));
        }
        Ok(BatchBuilder {
            docs,
            pack: PackOptions {
                max_len: cfg.max_len,
                max_sentences: cfg.max_sentences,
                sentence_tokens: cfg.sentence_reps_enabled,
            },
            masking: cfg.masking(),
            vocab_size: cfg.vocab_size,
            seed: cfg.seed,
            batch_size: cfg.batch_size,
            shuffle_fraction: cfg.shuffle_fraction,
            position_mode: cfg.position_mode,
        })
    }

    /// Number of examples that make up one pass over the corpus.
    pub fn epoch_len(&self) -> usize {
        self.docs.len()
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        let shuffled = batch_shuffle_mask(self.seed, step, self.shuffle_fraction);
        let n = self.docs.len() as u64;
        let mut out = Batch {
            examples: Vec::with_capacity(self.batch_size),
            targets: Vec::with_capacity(self.batch_size),
            perms: Vec::with_capacity(self.batch_size),
            shuffled,
        };
        for j in 0..self.batch_size as u64 {
            let global = step * self.batch_size as u64 + j;
            let (epoch, doc) = (global / n, global % n);
            let purpose = |p| rng::epoch_purpose(p, epoch);
            let Some(packed) = pack_example(
                &self.docs[doc as usize],
                self.pack,
                &mut rng::stream(self.seed, purpose(rng::DATA), doc),
            ) else {
                log::warn!("document {doc} did not fit; skipped");
                continue;
            };
            let mut masked = apply_span_masking(
                packed,
                &self.masking,
                self.vocab_size,
                &mut rng::stream(self.seed, purpose(rng::MASKING), doc),
            );
            let record = shuffle_example(
                &mut masked,
                shuffled,
                self.position_mode,
                &mut rng::stream(self.seed, purpose(rng::SHUFFLE), doc),
            )?;
            out.examples.push(masked);
            out.targets.push(record.order_targets);
            out.perms.push(record.perm);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<Document> {
        (0..5)
            .map(|d| Document::new(vec![vec![6 + d, 7, 8], vec![9, 10], vec![11, 12, 13, 14]]).unwrap())
            .collect()
    }

    #[test]
    fn batches_are_reproducible_and_wrap() {
        let docs = docs();
        let cfg = Config {
            batch_size: 3,
            vocab_size: 20,
            ..Config::tiny()
        };
        let b = BatchBuilder::new(&docs, &cfg).unwrap();
        assert_eq!(b.batch(4).unwrap(), b.batch(4).unwrap());
        // step 1 covers documents 3, 4 and (next epoch) 0
        let batch = b.batch(1).unwrap();
        assert_eq!(batch.examples.len(), 3);
        let m = &batch.examples[2];
        let span = m.example.spans[0];
        let original: Vec<usize> = (span.start..span.end)
            .map(|i| m.mlm_labels[i].unwrap_or(m.example.token_ids[i]))
            .collect();
        assert_eq!(original, vec![6, 7, 8]);
        for (t, m) in batch.targets.iter().zip(&batch.examples) {
            assert_eq!(t.len(), m.example.n_sentences() + 1);
        }
    }

    #[test]
    fn unshuffled_batches_keep_ids() {
        let docs = docs();
        let cfg = Config {
            shuffle_fraction: 0.0,
            ..Config::tiny()
        };
        let b = BatchBuilder::new(&docs, &cfg).unwrap();
        let batch = b.batch(0).unwrap();
        assert!(!batch.shuffled);
        let ex = &batch.examples[0].example;
        assert_eq!(
            ex.position_ids[..ex.attention_len],
            (0..ex.attention_len).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_corpus_is_data_error() {
        assert!(matches!(
            BatchBuilder::new(&[], &Config::tiny()),
            Err(SlmError::Data(_))
        ));
    }
}
