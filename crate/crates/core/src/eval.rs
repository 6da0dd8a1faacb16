//! Held-out unshuffling: exact match and Kendall tau.

use crate::config::Config;
use crate::error::Result;
use crate::masking::MaskedExample;
use crate::model::{greedy_unshuffle, Model, Net};
use crate::rng;
use crate::shuffle::{physical_shuffle, sample_permutation, PositionMode};
use crate::tensor::Graph;
use crate::text::{pack_example, Document, PackOptions, PackedExample};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnshuffleReport {
    pub documents: usize,
    pub exact_match: f64,
    pub kendall_tau: f64,
}

/// Kendall rank correlation between two orderings of the same items.
/// Sequences of fewer than two items count as perfectly correlated.
pub fn kendall_tau(predicted: &[usize], gold: &[usize]) -> f64 {
    let n = gold.len();
    if n < 2 {
        return 1.0;
    }
    let mut rank = vec![0; n];
    for (r, &item) in predicted.iter().enumerate() {
        rank[item] = r;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            if rank[gold[i]] < rank[gold[j]] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
}

/// Predicted memory order for each example.
pub fn unshuffle_batch(model: &Model, examples: &[&PackedExample]) -> Result<Vec<Vec<usize>>> {
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(model, &vars)?;
    let enc = net.encode(&mut g, examples.iter().copied())?;
    let (c, offsets) = net.extract_summary(&mut g, &enc, examples.iter().copied())?;
    examples
        .iter()
        .zip(offsets)
        .map(|(ex, off)| greedy_unshuffle(&net, &mut g, c, off, ex.n_sentences()))
        .collect()
}

/// Shuffles every document by physically permuting its sentence blocks
/// (seeded per document), reconstructs the order greedily and scores it.
pub fn evaluate_unshuffle(model: &Model, cfg: &Config, docs: &[Document], seed: u64) -> Result<UnshuffleReport> {
    let opts = PackOptions {
        max_len: cfg.max_len,
        max_sentences: cfg.max_sentences,
        sentence_tokens: true,
    };
    let mut cases = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let mut r = rng::stream(seed, rng::EVAL, i as u64);
        let Some(packed) = pack_example(doc, opts, &mut r) else {
            continue;
        };
        let perm = sample_permutation(packed.n_sentences(), &mut r);
        let shuffled = physical_shuffle(&MaskedExample::unmasked(packed), &perm, PositionMode::Resequence)?;
        cases.push((shuffled.example, perm));
    }
    let mut report = UnshuffleReport {
        documents: cases.len(),
        ..Default::default()
    };
    for chunk in cases.chunks(32) {
        let examples: Vec<&PackedExample> = chunk.iter().map(|(e, _)| e).collect();
        for (pred, (_, perm)) in unshuffle_batch(model, &examples)?.iter().zip(chunk) {
            // original sentence i sits in slot perm[i]
            report.exact_match += f64::from(u8::from(pred == perm));
            report.kendall_tau += kendall_tau(pred, perm);
        }
    }
    if report.documents > 0 {
        report.exact_match /= report.documents as f64;
        report.kendall_tau /= report.documents as f64;
    }
    Ok(report)
}
