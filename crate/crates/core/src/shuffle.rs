//! Sentence shuffling through position- and sentence-id reassignment.
//!
//! The tokens of a packed example stay where they are in memory. A
//! permutation `perm` (original sentence `s` goes to slot `perm[s]`) is
//! expressed only through the ids the embedding layer reads, so the
//! encoder sees the shuffled arrangement while the summary rows remain in
//! memory order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, SlmError};
use crate::masking::MaskedExample;
use crate::rng;

/// How position ids behave when sentences are shuffled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PositionMode {
    /// Positions describe the shuffled arrangement; order is not recoverable
    /// from them.
    #[default]
    Resequence,
    /// Each sentence keeps its original positions and sentence id. Leaks the
    /// answer; for studying that reading only.
    Travel,
}

impl std::str::FromStr for PositionMode {
    type Err = SlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resequence" => Ok(PositionMode::Resequence),
            "travel" => Ok(PositionMode::Travel),
            other => Err(SlmError::Config(format!("unknown position_mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PositionMode::Resequence => "resequence",
            PositionMode::Travel => "travel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleRecord {
    pub perm: Vec<usize>,
    pub shuffled: bool,
    /// Pointer targets against the memory-ordered summary: entry `i < N` is
    /// the summary index of original sentence `i`, the last entry is `N + 1`
    /// (`[SEP]`).
    pub order_targets: Vec<usize>,
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(SlmError::contract(format!(
            "permutation of length {} for {n} sentences",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(SlmError::contract(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (s, &slot) in perm.iter().enumerate() {
        inv[slot] = s;
    }
    inv
}

/// Uniform over all `n!` permutations.
pub fn sample_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Rewrites position and sentence ids so that original sentence `s` occupies
/// slot `perm[s]`. `[CLS]` keeps position 0 and `[SEP]` the last position.
pub fn apply_shuffle(ex: &mut MaskedExample, perm: &[usize], mode: PositionMode) -> Result<()> {
    let n = ex.example.n_sentences();
    check_perm(perm, n)?;
    if mode == PositionMode::Travel {
        return Ok(());
    }
    let e = &mut ex.example;
    let inv = invert(perm);
    let mut next = 1;
    for &s in &inv {
        let span = e.spans[s];
        for (offset, row) in (span.first()..span.end).enumerate() {
            e.position_ids[row] = next + offset;
            e.sentence_ids[row] = perm[s];
        }
        next += span.block_len();
    }
    Ok(())
}

/// Pointer targets when the summary lists sentences in slot order: step `i`
/// points at the summary row of original sentence `i`, i.e. `perm[i] + 1`;
/// the final step points at `[SEP]` (`n + 1`).
pub fn order_targets(perm: &[usize]) -> Vec<usize> {
    let n = perm.len();
    perm.iter().map(|&slot| slot + 1).chain([n + 1]).collect()
}

/// Seeded `Bernoulli(fraction)` decision for one batch.
pub fn batch_shuffle_mask(seed: u64, batch_index: u64, fraction: f64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    if fraction >= 1.0 {
        return true;
    }
    rng::stream(seed, rng::BATCH, batch_index).gen::<f64>() < fraction
}

/// Draws and applies the shuffle for one example of a batch. Unshuffled
/// examples keep the identity permutation and still get order targets.
pub fn shuffle_example<R: Rng + ?Sized>(
    ex: &mut MaskedExample,
    shuffled: bool,
    mode: PositionMode,
    rng: &mut R,
) -> Result<ShuffleRecord> {
    let n = ex.example.n_sentences();
    let perm = if shuffled {
        sample_permutation(n, rng)
    } else {
        (0..n).collect()
    };
    apply_shuffle(ex, &perm, mode)?;
    Ok(ShuffleRecord {
        shuffled,
        order_targets: order_targets(&(0..n).collect::<Vec<_>>()),
        perm,
    })
}

/// The same shuffle realised by physically moving sentence blocks in memory:
/// the block of original sentence `s` is placed `perm[s]`-th, ids are laid
/// out sequentially (or travel with the block in [`PositionMode::Travel`]).
/// Masking decisions move with their tokens.
pub fn physical_shuffle(ex: &MaskedExample, perm: &[usize], mode: PositionMode) -> Result<MaskedExample> {
    let src = &ex.example;
    let n = src.n_sentences();
    check_perm(perm, n)?;
    let inv = invert(perm);
    let mut out = ex.clone();
    let dst = &mut out.example;
    let mut row = 1;
    for (slot, &s) in inv.iter().enumerate() {
        let span = src.spans[s];
        let new_first = row;
        for old in span.first()..span.end {
            dst.token_ids[row] = src.token_ids[old];
            dst.segment_ids[row] = src.segment_ids[old];
            out.mlm_labels[row] = ex.mlm_labels[old];
            match mode {
                PositionMode::Resequence => {
                    dst.position_ids[row] = row;
                    dst.sentence_ids[row] = slot;
                }
                PositionMode::Travel => {
                    dst.position_ids[row] = src.position_ids[old];
                    dst.sentence_ids[row] = src.sentence_ids[old];
                }
            }
            row += 1;
        }
        let shift = |i: usize| new_first + (i - span.first());
        dst.spans[slot] = crate::text::SentenceSpan {
            sent_token: span.sent_token.map(shift),
            start: shift(span.start),
            end: shift(span.end),
        };
    }
    Ok(out)
}
