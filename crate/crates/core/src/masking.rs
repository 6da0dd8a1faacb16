//! Geometric span masking for the masked-LM objective.

use rand::Rng;

use crate::error::{Result, SlmError};
use crate::text::{PackedExample, MASK, NUM_SPECIAL};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub p_geom: f64,
    pub max_span: usize,
    pub mask_rate: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            p_geom: 0.2,
            max_span: 3,
            mask_rate: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_geom,
            self.mask_rate,
            self.replace_mask,
            self.replace_random,
            self.keep,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SlmError::Config("masking probabilities must lie in [0, 1]".into()));
        }
        if self.p_geom == 0.0 {
            return Err(SlmError::Config("p_geom must be positive".into()));
        }
        if (self.replace_mask + self.replace_random + self.keep - 1.0).abs() > 1e-9 {
            return Err(SlmError::Config(
                "replace_mask + replace_random + keep must be 1".into(),
            ));
        }
        if self.max_span == 0 {
            return Err(SlmError::Config("max_span must be at least 1".into()));
        }
        Ok(())
    }

    /// `P(k) ∝ p (1-p)^(k-1)` for `k = 1..=max_span`, renormalized.
    pub fn span_pmf(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.max_span)
            .map(|k| self.p_geom * (1.0 - self.p_geom).powi(k as i32))
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / z).collect()
    }
}

/// Draws a span length from the truncated geometric distribution.
pub fn sample_span_length<R: Rng + ?Sized>(cfg: &MaskingConfig, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let pmf = cfg.span_pmf();
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k + 1;
        }
    }
    cfg.max_span
}

/// A packed example after masking. `mlm_labels[i]` holds the original id at
/// every selected position and `None` elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub example: PackedExample,
    pub mlm_labels: Vec<Option<usize>>,
}

impl MaskedExample {
    /// Wraps an example without masking anything.
    pub fn unmasked(example: PackedExample) -> Self {
        let n = example.max_len();
        MaskedExample {
            example,
            mlm_labels: vec![None; n],
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mlm_labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Selects word spans until the budget `rate * eligible` (stochastically
/// rounded) is reached, then corrupts the selection 80/10/10.
///
/// Spans never cross a sentence boundary or touch special tokens; starts that
/// would overlap an earlier span are resampled. The last span is cut to the
/// remaining budget.
pub fn apply_span_masking<R: Rng + ?Sized>(
    example: PackedExample,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedExample {
    let mut out = MaskedExample::unmasked(example);
    let eligible: Vec<(usize, usize)> = out
        .example
        .spans
        .iter()
        .flat_map(|s| (s.start..s.end).map(move |p| (p, s.end)))
        .collect();
    if eligible.is_empty() || cfg.mask_rate == 0.0 {
        return out;
    }
    let target = cfg.mask_rate * eligible.len() as f64;
    let mut budget = target.floor() as usize;
    if rng.gen::<f64>() < target - target.floor() {
        budget += 1;
    }
    let mut selected = vec![false; out.example.max_len()];
    let mut chosen = Vec::with_capacity(budget);
    let mut attempts = 0;
    while chosen.len() < budget && attempts < 100 * eligible.len() {
        attempts += 1;
        let k = sample_span_length(cfg, rng);
        let (start, sentence_end) = eligible[rng.gen_range(0..eligible.len())];
        let end = (start + k).min(sentence_end);
        if selected[start..end].iter().any(|&s| s) {
            continue;
        }
        for (p, s) in selected.iter_mut().enumerate().take(end).skip(start) {
            if chosen.len() == budget {
                break;
            }
            *s = true;
            chosen.push(p);
        }
    }
    chosen.sort_unstable();
    for p in chosen {
        let original = out.example.token_ids[p];
        out.mlm_labels[p] = Some(original);
        let u: f64 = rng.gen();
        if u < cfg.replace_mask {
            out.example.token_ids[p] = MASK;
        } else if u < cfg.replace_mask + cfg.replace_random && vocab_size > NUM_SPECIAL {
            out.example.token_ids[p] = rng.gen_range(NUM_SPECIAL..vocab_size);
        }
    }
    out
}
