//! The `slm` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::diagnostics::end_to_end_grad_check;
use crate::error::{Result, SlmError};
use crate::eval::evaluate_unshuffle;
use crate::heads::{
    build_cls_example, build_qa_example, cls_metric, finetune_cls, finetune_qa, infer_cls_task, init_qa_head,
    parse_cls_tsv, parse_qa_jsonl, predict_cls, predict_qa, qa_report, FineTune,
};
use crate::probe::{export_reps, report};
use crate::text::{encode_documents, parse_prepared, prepare, Vocab};
use crate::trainer::{load_model, measure_sr_overhead, pretrain};

#[derive(Parser, Debug)]
#[command(
    name = "slm",
    version,
    about = "Sentence-level language model pre-training and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Base profile: `tiny` or `paper`.
    #[arg(long, default_value = "tiny")]
    profile: String,
    /// Flat `key=value` configuration file applied over the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self, base: Config) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(base, p)?,
            None => base,
        };
        for s in &self.sets {
            cfg.apply_assignment(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<Config> {
        self.resolve(Config::profile(&self.profile)?)
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment a raw corpus (blank-line separated documents) into one
    /// sentence per line.
    Prepare { input: PathBuf, output: PathBuf },
    /// Build a word vocabulary from a prepared corpus.
    BuildVocab {
        corpus: PathBuf,
        output: PathBuf,
        /// Entries including specials; defaults to the configured vocab_size.
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train; writes metrics.csv, checkpoints and timing.txt to --out.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Greedy unshuffling of held-out documents: exact match and Kendall tau.
    EvalUnshuffle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a classification or regression head on TSV data.
    FinetuneCls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        regression: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the three-pointer QA head on JSON-lines data.
    FinetuneQa {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export sentence representations and list nearest neighbours.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Number of leading rows to report on.
        #[arg(long, default_value_t = 10)]
        queries: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the full pre-training loss.
    Gradcheck {
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SlmError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SlmError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| SlmError::io(path, e))
}

/// Configuration stored in a checkpoint with command-line overrides on top.
fn checkpoint_config(common: &Common, checkpoint: &Path) -> Result<(Config, crate::model::Model)> {
    let (stored, model) = load_model(checkpoint)?;
    let cfg = common.resolve(stored.clone())?;
    if crate::model::ModelConfig::from_config(&cfg) != model.config {
        return Err(SlmError::Config(
            "architecture keys cannot be overridden for a trained checkpoint".into(),
        ));
    }
    Ok((cfg, model))
}

fn save_finetuned(ft: &FineTune, cfg: &Config, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| SlmError::io(out, e))?;
    let path = out.join("finetuned.slm");
    Checkpoint {
        config_echo: cfg.echo(),
        step: ft.step,
        params: ft.merged_params(),
        optimizer: None,
    }
    .save(&path)?;
    Ok(path)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare { input, output } => {
            let out = prepare(&read(&input)?);
            write(&output, &out)?;
            println!("{} documents -> {}", parse_prepared(&out).len(), output.display());
        }
        Command::BuildVocab {
            corpus,
            output,
            size,
            common,
        } => {
            let cfg = common.config()?;
            let docs = parse_prepared(&read(&corpus)?);
            let vocab = Vocab::build(
                docs.iter().flatten().map(String::as_str),
                size.unwrap_or(cfg.vocab_size),
            )?;
            vocab.save(&output)?;
            println!("{} entries -> {}", vocab.len(), output.display());
        }
        Command::Pretrain {
            corpus,
            vocab,
            out,
            common,
        } => {
            let mut cfg = common.config()?;
            let vocab = Vocab::load(&vocab)?;
            if vocab.len() != cfg.vocab_size {
                log::info!("vocab_size set to the vocabulary's {} entries", vocab.len());
                cfg.vocab_size = vocab.len();
            }
            let docs = encode_documents(&parse_prepared(&read(&corpus)?), &vocab);
            let summary = pretrain(&cfg, &docs, &out)?;
            let (with, without) = measure_sr_overhead(&cfg, &docs, 3)?;
            let timing = format!(
                "forward+backward seconds per batch: with reconstructor {with:.6}, without {without:.6}, overhead {:.1}%\n",
                100.0 * (with - without) / without.max(1e-12)
            );
            write(&out.join("timing.txt"), &timing)?;
            eprint!("{timing}");
            if let Some(last) = summary.last {
                println!(
                    "step {} l_mlm {:.4} l_slm {:.4} total {:.4}",
                    last.step, last.losses.l_mlm, last.losses.l_slm, last.losses.total
                );
            }
            for c in &summary.checkpoints {
                println!("checkpoint {}", c.display());
            }
        }
        Command::EvalUnshuffle {
            checkpoint,
            vocab,
            corpus,
            common,
        } => {
            let (cfg, model) = checkpoint_config(&common, &checkpoint)?;
            let vocab = Vocab::load(&vocab)?;
            let docs = encode_documents(&parse_prepared(&read(&corpus)?), &vocab);
            let r = evaluate_unshuffle(&model, &cfg, &docs, cfg.seed)?;
            println!(
                "documents={} exact_match={:.4} kendall_tau={:.4}",
                r.documents, r.exact_match, r.kendall_tau
            );
        }
        Command::FinetuneCls {
            checkpoint,
            vocab,
            train,
            eval,
            regression,
            out,
            common,
        } => {
            let (cfg, model) = checkpoint_config(&common, &checkpoint)?;
            let vocab = Vocab::load(&vocab)?;
            let records = parse_cls_tsv(&read(&train)?)?;
            let task = infer_cls_task(&records, regression)?;
            let build = |recs: &[crate::heads::ClsRecord]| {
                recs.iter()
                    .map(|r| build_cls_example(&vocab, &cfg, &task, r))
                    .collect::<Result<Vec<_>>>()
            };
            let data = build(&records)?;
            let mut ft = FineTune::new(model, task.init_head(&cfg));
            let losses = finetune_cls(&mut ft, &cfg, &data)?;
            let metric = if regression { "mse" } else { "accuracy" };
            let train_m = cls_metric(&predict_cls(&ft.model, &ft.head, &data)?, &data);
            println!(
                "final_loss={:.4} train_{metric}={train_m:.4}",
                losses.last().copied().unwrap_or(0.0)
            );
            if let Some(eval) = eval {
                let held = build(&parse_cls_tsv(&read(&eval)?)?)?;
                let m = cls_metric(&predict_cls(&ft.model, &ft.head, &held)?, &held);
                println!("eval_{metric}={m:.4}");
            }
            println!("checkpoint {}", save_finetuned(&ft, &cfg, &out)?.display());
        }
        Command::FinetuneQa {
            checkpoint,
            vocab,
            train,
            eval,
            out,
            common,
        } => {
            let (cfg, model) = checkpoint_config(&common, &checkpoint)?;
            let vocab = Vocab::load(&vocab)?;
            let build = |path: &Path| -> Result<Vec<_>> {
                parse_qa_jsonl(&read(path)?)?
                    .iter()
                    .map(|r| build_qa_example(&vocab, &cfg, r))
                    .collect()
            };
            let data = build(&train)?;
            let mut ft = FineTune::new(model, init_qa_head(&cfg));
            let losses = finetune_qa(&mut ft, &cfg, &data)?;
            let r = qa_report(&predict_qa(&ft.model, &ft.head, &cfg, &data)?, &data);
            println!(
                "final_loss={:.4} train_exact_match={:.4} train_sentence_accuracy={:.4} consistency={:.4}",
                losses.last().copied().unwrap_or(0.0),
                r.exact_match,
                r.sentence_accuracy,
                r.consistency
            );
            if let Some(eval) = eval {
                let held = build(&eval)?;
                let r = qa_report(&predict_qa(&ft.model, &ft.head, &cfg, &held)?, &held);
                println!(
                    "eval_exact_match={:.4} eval_sentence_accuracy={:.4} consistency={:.4}",
                    r.exact_match, r.sentence_accuracy, r.consistency
                );
            }
            println!("checkpoint {}", save_finetuned(&ft, &cfg, &out)?.display());
        }
        Command::Probe {
            checkpoint,
            vocab,
            corpus,
            out,
            k,
            queries,
            common,
        } => {
            let (cfg, model) = checkpoint_config(&common, &checkpoint)?;
            let vocab = Vocab::load(&vocab)?;
            let docs = parse_prepared(&read(&corpus)?);
            let index = export_reps(&model, &cfg, &vocab, &docs)?;
            fs::create_dir_all(&out).map_err(|e| SlmError::io(&out, e))?;
            index.save(&out.join("reps.idx"))?;
            let q: Vec<usize> = (0..queries.min(index.len())).collect();
            let text = report(&index, &q, k)?;
            write(&out.join("neighbors.txt"), &text)?;
            print!("{text}");
        }
        Command::Gradcheck {
            precision,
            threshold,
            eps,
            common,
        } => {
            let cfg = common.config()?;
            let start = Instant::now();
            let r = match precision {
                Precision::F64 => end_to_end_grad_check::<f64>(&cfg, eps)?,
                Precision::F32 => end_to_end_grad_check::<f32>(&cfg, eps)?,
            };
            println!(
                "max_rel_err={:.3e} checked={} worst=param {} element {} (analytic {:.6e}, numeric {:.6e}) seconds={:.1}",
                r.max_rel_err,
                r.checked,
                r.worst.0,
                r.worst.1,
                r.analytic,
                r.numeric,
                start.elapsed().as_secs_f64()
            );
            if r.max_rel_err >= threshold {
                return Err(SlmError::Abort(format!(
                    "max relative error {:.3e} is above {threshold:e}",
                    r.max_rel_err
                )));
            }
        }
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("SLM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
