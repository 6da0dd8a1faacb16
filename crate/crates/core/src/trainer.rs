//! The pre-training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::batch::{Batch, BatchBuilder};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::model::{Model, ModelConfig, Net};
use crate::objectives::{forward_batch, LossBundle};
use crate::optim::{adam_update, clip_global_norm, lr_schedule, AdamConfig, AdamState, Grads};
use crate::rng;
use crate::tensor::Graph;
use crate::text::Document;

pub const METRICS_COLUMNS: &str = "step,lr,l_mlm,l_slm,total,shuffled,tokens_per_s";

/// One optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBundle,
    /// Shuffled micro-batches in this update.
    pub shuffled: usize,
    pub tokens: usize,
    pub seconds: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn csv_row(&self, with_throughput: bool) -> String {
        let tps = if with_throughput && self.seconds > 0.0 {
            format!("{:.1}", self.tokens as f64 / self.seconds)
        } else {
            String::new()
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.losses.l_mlm, self.losses.l_slm, self.losses.total, self.shuffled, tps
        )
    }
}

/// `#`-prefixed resolved configuration followed by the column header.
pub fn metrics_header(cfg: &Config) -> String {
    let mut h = String::new();
    for line in cfg.echo().lines() {
        h.push_str("# ");
        h.push_str(line);
        h.push('\n');
    }
    h.push_str(&format!(
        "# scale: batch {} x length {} (reference setup: batch 256 x length 512)\n",
        cfg.batch_size * cfg.accum_steps,
        cfg.max_len
    ));
    h.push_str(METRICS_COLUMNS);
    h.push('\n');
    h
}

/// Gradients of the pre-training loss on one batch.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    sr_enabled: bool,
    dropout_seed: Option<u64>,
) -> Result<(Grads, LossBundle)> {
    let mut g = match dropout_seed {
        Some(s) => Graph::<f32>::training(s),
        None => Graph::<f32>::new(),
    };
    let vars = model.bind(&mut g);
    let net = Net::new(model, &vars)?;
    let (loss, bundle) = forward_batch(&mut g, &net, batch, sr_enabled)?;
    g.backward(loss)?;
    let grads = vars.iter().map(|&v| g.grad(v).map(<[f32]>::to_vec)).collect();
    Ok((grads, bundle))
}

pub struct Trainer<'a> {
    pub cfg: Config,
    pub model: Model,
    pub adam: AdamState,
    /// Completed updates.
    pub step: u64,
    builder: BatchBuilder<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: Config, docs: &'a [Document]) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(ModelConfig::from_config(&cfg), cfg.seed)?;
        let adam = AdamState::new(&model.params);
        let builder = BatchBuilder::new(docs, &cfg)?;
        Ok(Trainer {
            cfg,
            model,
            adam,
            step: 0,
            builder,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: Config, docs: &'a [Document], ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, docs)?;
        t.model = Model::from_params(t.model.config, ckpt.params)?;
        t.adam = ckpt
            .optimizer
            .ok_or_else(|| SlmError::format("checkpoint has no optimizer state"))?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let update = self.step + 1;
        let accum = cfg.accum_steps as u64;
        let mut total: Option<Grads> = None;
        let mut losses = LossBundle::default();
        let mut shuffled = 0;
        let mut tokens = 0;
        for micro in 0..accum {
            let index = self.step * accum + micro;
            let batch = self.builder.batch(index)?;
            let seed = rng::stream(cfg.seed, rng::DROPOUT, index).gen::<u64>();
            let (grads, b) = batch_gradients(&self.model, &batch, cfg.sr_enabled, Some(seed))?;
            shuffled += usize::from(batch.shuffled);
            tokens += batch.token_count();
            losses.l_mlm += b.l_mlm / accum as f64;
            losses.l_slm += b.l_slm / accum as f64;
            losses.masked_count += b.masked_count;
            losses.slm_steps += b.slm_steps;
            total = Some(match total {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        match (a.as_mut(), g) {
                            (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                            (None, Some(g)) => *a = Some(g),
                            _ => {}
                        }
                    }
                    acc
                }
            });
        }
        losses.total = losses.l_mlm + losses.l_slm;
        let mut grads = total.expect("accum_steps >= 1");
        if accum > 1 {
            let s = 1.0 / accum as f32;
            grads
                .iter_mut()
                .flatten()
                .flat_map(|g| g.iter_mut())
                .for_each(|x| *x *= s);
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = lr_schedule(update as usize, cfg.warmup, cfg.steps, cfg.peak_lr);
        adam_update(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            lr,
            &AdamConfig::from_config(cfg),
        )?;
        self.step = update;
        Ok(StepRecord {
            step: update,
            lr,
            losses,
            shuffled,
            tokens,
            seconds: start.elapsed().as_secs_f64(),
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_echo: self.cfg.echo(),
            step: self.step,
            params: self.model.params.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub last: Option<StepRecord>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:07}.slm"))
}

/// Runs `cfg.steps` updates, writing `metrics.csv` and checkpoints (every
/// `checkpoint_every` updates and after the last one) into `out`.
pub fn pretrain(cfg: &Config, docs: &[Document], out: &Path) -> Result<PretrainSummary> {
    fs::create_dir_all(out).map_err(|e| SlmError::io(out, e))?;
    let mut trainer = Trainer::new(cfg.clone(), docs)?;
    let metrics = out.join("metrics.csv");
    let mut file = fs::File::create(&metrics).map_err(|e| SlmError::io(&metrics, e))?;
    let io = |e| SlmError::io(&metrics, e);
    file.write_all(metrics_header(cfg).as_bytes()).map_err(io)?;
    let mut summary = PretrainSummary {
        metrics: metrics.clone(),
        checkpoints: Vec::new(),
        last: None,
    };
    while (trainer.step as usize) < cfg.steps {
        let rec = trainer.train_step()?;
        writeln!(file, "{}", rec.csv_row(cfg.log_throughput)).map_err(io)?;
        if rec.step % 50 == 0 || rec.step == 1 {
            log::info!(
                "step {} lr {:.3e} mlm {:.4} slm {:.4} |g| {:.3}",
                rec.step,
                rec.lr,
                rec.losses.l_mlm,
                rec.losses.l_slm,
                rec.grad_norm
            );
        }
        let step = rec.step as usize;
        if (cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every)) || step == cfg.steps {
            let path = checkpoint_path(out, rec.step);
            trainer.checkpoint().save(&path)?;
            summary.checkpoints.push(path);
        }
        summary.last = Some(rec);
    }
    file.flush().map_err(io)?;
    Ok(summary)
}

/// Mean wall-clock seconds of a forward+backward pass with and without the
/// reconstructor over the first `batches` batches.
pub fn measure_sr_overhead(cfg: &Config, docs: &[Document], batches: u64) -> Result<(f64, f64)> {
    let model = Model::new(ModelConfig::from_config(cfg), cfg.seed)?;
    let builder = BatchBuilder::new(docs, cfg)?;
    let mut with = 0.0;
    let mut without = 0.0;
    for i in 0..batches {
        let batch = builder.batch(i)?;
        let t = Instant::now();
        batch_gradients(&model, &batch, false, None)?;
        without += t.elapsed().as_secs_f64();
        let t = Instant::now();
        batch_gradients(&model, &batch, true, None)?;
        with += t.elapsed().as_secs_f64();
    }
    Ok((with / batches as f64, without / batches as f64))
}

/// Restores the model and configuration stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Config, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = Config::from_text(Config::tiny(), &ckpt.config_echo)?;
    let model = Model::from_params(ModelConfig::from_config(&cfg), ckpt.params)?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<Document> {
        (0..4)
            .map(|d| {
                Document::new(vec![
                    vec![6 + d, 7, 8, 9],
                    vec![10, 11],
                    vec![12, 13, 14],
                    vec![15, 16 + d],
                ])
                .unwrap()
            })
            .collect()
    }

    fn cfg() -> Config {
        Config {
            vocab_size: 24,
            hidden: 16,
            heads: 2,
            ffn: 32,
            max_len: 32,
            max_sentences: 4,
            batch_size: 2,
            steps: 10,
            warmup: 2,
            ..Config::tiny()
        }
    }

    #[test]
    fn ten_steps_ten_rows_one_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let docs = docs();
        let s = pretrain(&cfg(), &docs, dir.path()).unwrap();
        let text = fs::read_to_string(&s.metrics).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), 10);
        assert_eq!(s.checkpoints.len(), 1);
        assert!(text.lines().any(|l| l == "# hidden=16"));
        let (c, m) = load_model(&s.checkpoints[0]).unwrap();
        assert_eq!(c, cfg());
        assert_eq!(
            m.params.len(),
            Model::new(ModelConfig::from_config(&c), 0).unwrap().params.len()
        );
    }

    #[test]
    fn sr_off_reports_zero_and_leaves_decoder_without_gradient() {
        let docs = docs();
        let c = Config {
            sr_enabled: false,
            ..cfg()
        };
        let mut t = Trainer::new(c.clone(), &docs).unwrap();
        let rec = t.train_step().unwrap();
        assert_eq!(rec.losses.l_slm, 0.0);
        let batch = BatchBuilder::new(&docs, &c).unwrap().batch(0).unwrap();
        let (grads, _) = batch_gradients(&t.model, &batch, false, Some(1)).unwrap();
        for (p, g) in t.model.params.iter().zip(&grads) {
            if Model::is_decoder_param(&p.name) {
                assert!(g.as_ref().is_none_or(|g| g.iter().all(|&x| x == 0.0)), "{}", p.name);
            }
        }
    }

    #[test]
    fn resume_continues_identically() {
        let docs = docs();
        let mut a = Trainer::new(cfg(), &docs).unwrap();
        for _ in 0..3 {
            a.train_step().unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap();
        let mut b = Trainer::resume(cfg(), &docs, ckpt).unwrap();
        let ra = a.train_step().unwrap();
        let rb = b.train_step().unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn accumulation_runs() {
        let docs = docs();
        let c = Config {
            accum_steps: 2,
            ..cfg()
        };
        let mut t = Trainer::new(c, &docs).unwrap();
        let rec = t.train_step().unwrap();
        assert!(rec.losses.total.is_finite());
        assert!(rec.tokens > 0);
    }
}
