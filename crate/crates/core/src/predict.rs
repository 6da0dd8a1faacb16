//! Inference entry points over a trained checkpoint, shared by the CLI and
//! the C interface.

use std::path::Path;

use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::eval::unshuffle_batch;
use crate::model::{Model, Net};
use crate::tensor::Graph;
use crate::text::{pack_sentences, PackOptions, PackedExample, Vocab};
use crate::trainer::load_model;

pub struct Predictor {
    pub config: Config,
    pub model: Model,
    pub vocab: Vocab,
}

impl Predictor {
    pub fn load(checkpoint: &Path, vocab: &Path) -> Result<Self> {
        let (config, model) = load_model(checkpoint)?;
        let vocab = Vocab::load(vocab)?;
        if vocab.len() > config.vocab_size {
            return Err(SlmError::Config(format!(
                "vocabulary has {} entries, model only {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        Ok(Predictor { config, model, vocab })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Packs sentences in the given order. Every sentence must survive
    /// packing.
    fn pack(&self, sentences: &[&str]) -> Result<PackedExample> {
        if sentences.is_empty() || sentences.len() > self.config.max_sentences {
            return Err(SlmError::contract(format!(
                "need 1..={} sentences, got {}",
                self.config.max_sentences,
                sentences.len()
            )));
        }
        let ids: Vec<(Vec<usize>, usize)> = sentences.iter().map(|s| (self.vocab.encode(s), 0)).collect();
        if ids.iter().any(|(s, _)| s.is_empty()) {
            return Err(SlmError::data("a sentence has no tokens"));
        }
        let opts = PackOptions {
            max_len: self.config.max_len,
            max_sentences: self.config.max_sentences,
            sentence_tokens: true,
        };
        match pack_sentences(&ids, opts) {
            Some(p) if p.n_sentences() == sentences.len() => Ok(p),
            _ => Err(SlmError::data(format!(
                "{} sentences do not fit in {} tokens",
                sentences.len(),
                self.config.max_len
            ))),
        }
    }

    /// Predicted original order: entry `k` is the input index of the
    /// sentence placed `k`-th.
    pub fn unshuffle(&self, sentences: &[&str]) -> Result<Vec<usize>> {
        let packed = self.pack(sentences)?;
        Ok(unshuffle_batch(&self.model, &[&packed])?.remove(0))
    }

    /// `[SENT]` representation of each sentence, read in the given order.
    pub fn sentence_embeddings(&self, sentences: &[&str]) -> Result<Vec<Vec<f32>>> {
        let packed = self.pack(sentences)?;
        let mut g = Graph::<f32>::new();
        let vars = self.model.bind(&mut g);
        let net = Net::new(&self.model, &vars)?;
        let enc = net.encode(&mut g, [&packed])?;
        let h = g.value(enc.h);
        Ok(packed
            .spans
            .iter()
            .map(|s| h.row(s.sent_token.expect("sentence tokens on")).to_vec())
            .collect())
    }
}
