//! End-to-end gradient check of the pre-training loss and the scaled
//! learning check on synthetic ordered narratives.

use crate::batch::Batch;
use std::time::Instant;

use crate::config::Config;
use crate::error::Result;
use crate::eval::{evaluate_unshuffle, UnshuffleReport};
use crate::masking::apply_span_masking;
use crate::model::{Model, ModelConfig, Net};
use crate::objectives::forward_batch;
use crate::rng;
use crate::shuffle::shuffle_example;
use crate::synthetic::ordered_corpus;
use crate::tensor::{grad_check_at, GradCheckReport, Graph, Objective, Real, Tensor, Var};
use crate::text::{encode_documents, pack_example, parse_prepared, Document, PackOptions, Vocab, NUM_SPECIAL};
use crate::trainer::Trainer;

/// The pre-training loss of a fixed batch as a function of all model
/// parameters (dropout off).
pub struct PretrainObjective<'a> {
    pub model: &'a Model,
    pub batch: &'a Batch,
    pub sr_enabled: bool,
}

impl Objective for PretrainObjective<'_> {
    fn eval<T: Real>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var> {
        let net = Net::new(self.model, params)?;
        forward_batch(g, &net, self.batch, self.sr_enabled).map(|(loss, _)| loss)
    }
}

/// Shrinks `base` to the gradient-check instance: hidden 16, L = 32, four
/// sentences per document, a 40-token vocabulary, no dropout. Layer counts
/// come from `base`.
pub fn grad_check_config(base: &Config) -> Config {
    Config {
        vocab_size: 40,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_len: 32,
        max_sentences: 4,
        dropout: 0.0,
        attn_dropout: 0.0,
        mask_rate: 0.3,
        ..base.clone()
    }
}

/// Two four-sentence examples, one shuffled, both masked.
pub fn grad_check_batch(cfg: &Config, seed: u64) -> Result<Batch> {
    let opts = PackOptions {
        max_len: cfg.max_len,
        max_sentences: cfg.max_sentences,
        sentence_tokens: cfg.sentence_reps_enabled,
    };
    let mut batch = Batch {
        examples: Vec::new(),
        targets: Vec::new(),
        perms: Vec::new(),
        shuffled: true,
    };
    for (b, lens) in [[5usize, 4, 6, 3], [3, 6, 2, 5]].iter().enumerate() {
        let mut r = rng::stream(seed, rng::DATA, b as u64);
        let sentences = lens
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|i| NUM_SPECIAL + (b * 7 + i * 3 + n) % (cfg.vocab_size - NUM_SPECIAL))
                    .collect()
            })
            .collect();
        let doc = Document::new(sentences)?;
        let packed = pack_example(&doc, opts, &mut r).expect("instance fits");
        let mut masked = apply_span_masking(packed, &cfg.masking(), cfg.vocab_size, &mut r);
        let rec = shuffle_example(&mut masked, b == 0, cfg.position_mode, &mut r)?;
        batch.examples.push(masked);
        batch.targets.push(rec.order_targets);
        batch.perms.push(rec.perm);
    }
    Ok(batch)
}

/// Finite-difference check of every parameter of the gradient-check
/// instance derived from `base`. `A` is the precision of the analytic pass.
pub fn end_to_end_grad_check<A: Real>(base: &Config, eps: f64) -> Result<GradCheckReport> {
    let cfg = grad_check_config(base);
    cfg.validate()?;
    let mut model = Model::new(ModelConfig::from_config(&cfg), cfg.seed)?;
    // larger weights than the 0.02 init so that every path carries signal
    let mut r = rng::stream(cfg.seed, rng::INIT, 1);
    for p in model.params.iter_mut() {
        use rand::Rng;
        for x in p.value.data_mut() {
            *x += r.gen_range(-0.3f32..0.3);
        }
    }
    let batch = grad_check_batch(&cfg, cfg.seed)?;
    let objective = PretrainObjective {
        model: &model,
        batch: &batch,
        sr_enabled: cfg.sr_enabled,
    };
    let params: Vec<Tensor<f32>> = model.params.iter().map(|p| p.value.clone()).collect();
    grad_check_at::<A, _>(&objective, &params, eps)
}

/// The learning-check setup: the tiny profile widened to hidden 128 with
/// four encoder layers, over a vocabulary of `vocab_size` words.
pub fn learning_check_config(vocab_size: usize, steps: usize) -> Config {
    let tiny = Config::tiny();
    Config {
        vocab_size,
        hidden: 128,
        enc_layers: 4,
        heads: 4,
        ffn: 512,
        max_len: 64,
        steps,
        warmup: steps / 10,
        checkpoint_every: 0,
        ..tiny
    }
}

#[derive(Clone, Debug)]
pub struct LearningReport {
    pub config: Config,
    pub held_out: UnshuffleReport,
    /// Mean MLM loss over the last 100 updates.
    pub final_mlm: f64,
    pub ln_vocab: f64,
    pub seconds: f64,
}

/// Trains on 4500 of 5000 synthetic narratives and evaluates greedy
/// unshuffling on the other 500.
pub fn learning_check(steps: usize, seed: u64) -> Result<LearningReport> {
    let start = Instant::now();
    let docs = parse_prepared(&ordered_corpus(5000, seed));
    let (train, held) = docs.split_at(4500);
    let vocab = Vocab::build(train.iter().flatten().map(String::as_str), 10_000)?;
    let cfg = Config {
        seed,
        ..learning_check_config(vocab.len(), steps)
    };
    let train = encode_documents(train, &vocab);
    let held = encode_documents(held, &vocab);
    let mut trainer = Trainer::new(cfg.clone(), &train)?;
    let mut recent = std::collections::VecDeque::new();
    for _ in 0..steps {
        let rec = trainer.train_step()?;
        if rec.step % 200 == 0 {
            log::info!(
                "learning check step {} mlm {:.3} slm {:.3} ({:.0}s)",
                rec.step,
                rec.losses.l_mlm,
                rec.losses.l_slm,
                start.elapsed().as_secs_f64()
            );
        }
        recent.push_back(rec.losses.l_mlm);
        if recent.len() > 100 {
            recent.pop_front();
        }
    }
    let held_out = evaluate_unshuffle(&trainer.model, &cfg, &held, seed)?;
    Ok(LearningReport {
        final_mlm: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
        ln_vocab: (cfg.vocab_size as f64).ln(),
        config: cfg,
        held_out,
        seconds: start.elapsed().as_secs_f64(),
    })
}
