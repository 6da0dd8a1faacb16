//! Fine-tuning heads: classification or regression over `[CLS]` plus
//! sentence representations, and extractive QA with three pointer losses.

use rand::Rng;
use serde::Deserialize;

use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::model::{trunc_normal, EncoderOut, Model, Net, ParamStore};
use crate::optim::{adam_update, clip_global_norm, lr_schedule, AdamConfig, AdamState, Grads};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{pack_sentences, segment_sentences, tokenize, PackOptions, PackedExample, Vocab};

// ---------------------------------------------------------------- plumbing

/// Encoder and task head trained jointly.
pub struct FineTune {
    pub model: Model,
    pub head: ParamStore,
    model_state: AdamState,
    head_state: AdamState,
    /// Completed updates.
    pub step: u64,
}

impl FineTune {
    pub fn new(model: Model, head: ParamStore) -> Self {
        FineTune {
            model_state: AdamState::new(&model.params),
            head_state: AdamState::new(&head),
            model,
            head,
            step: 0,
        }
    }

    /// One clipped Adam update of encoder and head on the loss built by
    /// `loss`. Returns the loss value.
    pub fn update<F>(&mut self, cfg: &Config, lr: f64, loss: F) -> Result<f64>
    where
        F: FnOnce(&mut Graph<f32>, &Net, &[Var]) -> Result<Var>,
    {
        let seed = rng::stream(cfg.seed, rng::FINETUNE, self.step).gen::<u64>();
        let (value, mut grads) = {
            let mut g = Graph::<f32>::training(seed);
            let vars = self.model.bind(&mut g);
            let head_vars: Vec<Var> = self.head.iter().map(|p| g.param(p.value.clone())).collect();
            let net = Net::new(&self.model, &vars)?;
            let l = loss(&mut g, &net, &head_vars)?;
            g.backward(l)?;
            let grads: Grads = vars
                .iter()
                .chain(&head_vars)
                .map(|&v| g.grad(v).map(<[f32]>::to_vec))
                .collect();
            (f64::from(g.value(l).item()), grads)
        };
        clip_global_norm(&mut grads, cfg.clip_norm);
        let adam = AdamConfig::from_config(cfg);
        let n = self.model.params.len();
        adam_update(&mut self.model.params, &grads[..n], &mut self.model_state, lr, &adam)?;
        adam_update(&mut self.head, &grads[n..], &mut self.head_state, lr, &adam)?;
        self.step += 1;
        Ok(value)
    }

    /// Model and head tensors in one store, ready for a checkpoint.
    pub fn merged_params(&self) -> ParamStore {
        let mut out = self.model.params.clone();
        for p in self.head.iter() {
            out.push(p.name.clone(), p.value.clone(), p.decay);
        }
        out
    }
}

fn head_param(store: &mut ParamStore, name: &str, shape: &[usize], std: f64, seed: u64, weight: bool) {
    let t = if weight {
        let mut r = rng::stream(seed, rng::INIT, 100 + store.len() as u64);
        trunc_normal(shape, std, &mut r)
    } else {
        Tensor::zeros(shape)
    };
    store.push(name.into(), t, weight);
}

/// Pulls `names` out of a loaded store, reporting every absent one.
pub fn take_head(loaded: &mut ParamStore, names: &[&str]) -> Result<ParamStore> {
    let mut head = ParamStore::default();
    let mut missing = Vec::new();
    for &n in names {
        match loaded.take(n) {
            Some(t) => {
                head.push(n.into(), t, n.ends_with("weight") || n.starts_with("head.qa."));
            }
            None => missing.push(n.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(SlmError::MissingTensors(missing));
    }
    Ok(head)
}

fn pack_opts(cfg: &Config) -> PackOptions {
    PackOptions {
        max_len: cfg.max_len,
        max_sentences: cfg.max_sentences,
        sentence_tokens: cfg.sentence_reps_enabled,
    }
}

/// Sentences of `text` as word ids.
fn encode_text(vocab: &Vocab, text: &str) -> Vec<Vec<usize>> {
    segment_sentences(text)
        .iter()
        .map(|s| vocab.encode(s))
        .filter(|s| !s.is_empty())
        .collect()
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------- classification

#[derive(Clone, Debug, PartialEq)]
pub enum ClsKind {
    Classification { labels: Vec<String> },
    Regression,
}

/// A sentence(-pair) task: its output kind and how many texts each example
/// provides (1 or 2).
#[derive(Clone, Debug, PartialEq)]
pub struct ClsTask {
    pub kind: ClsKind,
    pub inputs: usize,
}

impl ClsTask {
    pub fn outputs(&self) -> usize {
        match &self.kind {
            ClsKind::Classification { labels } => labels.len(),
            ClsKind::Regression => 1,
        }
    }

    /// Head input width: `[CLS]` plus one `[SENT]` per text when sentence
    /// representations are on.
    pub fn width(&self, hidden: usize, sentence_reps: bool) -> usize {
        hidden * (1 + if sentence_reps { self.inputs } else { 0 })
    }

    pub fn head_names(&self) -> [&'static str; 2] {
        ["head.cls.weight", "head.cls.bias"]
    }

    pub fn init_head(&self, cfg: &Config) -> ParamStore {
        let mut head = ParamStore::default();
        let w = self.width(cfg.hidden, cfg.sentence_reps_enabled);
        head_param(
            &mut head,
            "head.cls.weight",
            &[w, self.outputs()],
            cfg.init_std,
            cfg.seed,
            true,
        );
        head_param(
            &mut head,
            "head.cls.bias",
            &[self.outputs()],
            cfg.init_std,
            cfg.seed,
            false,
        );
        head
    }
}

/// One raw TSV row: `label<TAB>text_a[<TAB>text_b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsRecord {
    pub label: String,
    pub text_a: String,
    pub text_b: Option<String>,
}

pub fn parse_cls_tsv(text: &str) -> Result<Vec<ClsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut cols = line.split('\t');
            let label = cols.next().unwrap_or("").trim().to_string();
            let text_a = cols.next().map(str::to_string);
            let text_b = cols.next().map(str::to_string).filter(|s| !s.trim().is_empty());
            match (label.is_empty(), text_a) {
                (false, Some(text_a)) if cols.next().is_none() => Ok(ClsRecord { label, text_a, text_b }),
                _ => Err(SlmError::data(format!(
                    "line {}: expected label<TAB>text_a[<TAB>text_b]",
                    i + 1
                ))),
            }
        })
        .collect()
}

/// Infers the task from the records: sorted label set (or regression), and
/// the input count of the first record.
pub fn infer_cls_task(records: &[ClsRecord], regression: bool) -> Result<ClsTask> {
    let first = records
        .first()
        .ok_or_else(|| SlmError::data("no classification records"))?;
    let inputs = 1 + usize::from(first.text_b.is_some());
    let kind = if regression {
        ClsKind::Regression
    } else {
        let mut labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
        labels.sort();
        labels.dedup();
        ClsKind::Classification { labels }
    };
    Ok(ClsTask { kind, inputs })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsExample {
    pub packed: PackedExample,
    /// Rows concatenated into the head input.
    pub rep_rows: Vec<usize>,
    pub target: Target,
}

pub fn build_cls_example(vocab: &Vocab, cfg: &Config, task: &ClsTask, rec: &ClsRecord) -> Result<ClsExample> {
    let given = 1 + usize::from(rec.text_b.is_some());
    if given != task.inputs {
        return Err(SlmError::contract(format!(
            "task takes {} text(s), example has {given}",
            task.inputs
        )));
    }
    let target = match &task.kind {
        ClsKind::Classification { labels } => Target::Class(
            labels
                .iter()
                .position(|l| *l == rec.label)
                .ok_or_else(|| SlmError::data(format!("unknown label {:?}", rec.label)))?,
        ),
        ClsKind::Regression => Target::Value(
            rec.label
                .parse()
                .map_err(|_| SlmError::data(format!("regression label {:?} is not a number", rec.label)))?,
        ),
    };
    let a = encode_text(vocab, &rec.text_a);
    let b = rec.text_b.as_deref().map(|t| encode_text(vocab, t)).unwrap_or_default();
    if a.is_empty() || (task.inputs == 2 && b.is_empty()) {
        return Err(SlmError::data("empty text in classification example"));
    }
    let a_count = a.len();
    let sentences: Vec<(Vec<usize>, usize)> = a
        .into_iter()
        .map(|s| (s, 0))
        .chain(b.into_iter().map(|s| (s, 1)))
        .collect();
    let packed = pack_sentences(&sentences, pack_opts(cfg)).ok_or_else(|| SlmError::data("example does not fit"))?;
    let mut rep_rows = vec![0];
    if cfg.sentence_reps_enabled {
        // the first [SENT] of each text
        rep_rows.push(packed.spans[0].sent_token.expect("sentence tokens on"));
        if task.inputs == 2 {
            let span = packed.spans.get(a_count).ok_or_else(|| {
                SlmError::data(format!(
                    "second text truncated away (max_len {}, max_sentences {})",
                    cfg.max_len, cfg.max_sentences
                ))
            })?;
            rep_rows.push(span.sent_token.expect("sentence tokens on"));
        }
    }
    Ok(ClsExample {
        packed,
        rep_rows,
        target,
    })
}

/// Head outputs `[batch, outputs]` for already encoded examples.
pub fn classify(g: &mut Graph<f32>, enc: &EncoderOut, examples: &[&ClsExample], head: &[Var]) -> Result<Var> {
    let slots = examples.first().map_or(0, |e| e.rep_rows.len());
    if examples.iter().any(|e| e.rep_rows.len() != slots) {
        return Err(SlmError::contract("examples disagree on the number of sentence inputs"));
    }
    let parts = (0..slots)
        .map(|k| {
            let idx: Vec<usize> = examples
                .iter()
                .enumerate()
                .map(|(b, e)| enc.row(b, e.rep_rows[k]))
                .collect();
            g.gather_rows(enc.h, &idx)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)?
    };
    let y = g.matmul(x, head[0])?;
    g.add_bias(y, head[1])
}

/// Cross-entropy (classification) or mean squared error (regression).
pub fn cls_loss(g: &mut Graph<f32>, out: Var, examples: &[&ClsExample]) -> Result<Var> {
    match examples.first().map(|e| e.target) {
        Some(Target::Class(_)) => {
            let t = examples
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => Ok(c),
                    Target::Value(_) => Err(SlmError::contract("mixed targets")),
                })
                .collect::<Result<Vec<_>>>()?;
            g.cross_entropy_rows(out, &t)
        }
        Some(Target::Value(_)) => {
            let t = examples
                .iter()
                .map(|e| match e.target {
                    Target::Value(v) => Ok(v as f32),
                    Target::Class(_) => Err(SlmError::contract("mixed targets")),
                })
                .collect::<Result<Vec<_>>>()?;
            let target = g.input(Tensor::new(&[t.len(), 1], t)?);
            let d = g.sub(out, target)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        }
        None => Err(SlmError::contract("empty batch")),
    }
}

fn batch_at<E>(data: &[E], step: u64, size: usize) -> Vec<&E> {
    (0..size as u64)
        .map(|j| &data[((step * size as u64 + j) % data.len() as u64) as usize])
        .collect()
}

/// Fine-tunes for `cfg.ft_steps` updates; returns the per-step losses.
pub fn finetune_cls(ft: &mut FineTune, cfg: &Config, data: &[ClsExample]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(SlmError::data("no training examples"));
    }
    let mut losses = Vec::with_capacity(cfg.ft_steps);
    for _ in 0..cfg.ft_steps {
        let batch = batch_at(data, ft.step, cfg.ft_batch_size.min(data.len()));
        let lr = lr_schedule(ft.step as usize + 1, cfg.ft_steps / 10, cfg.ft_steps, cfg.ft_lr);
        let l = ft.update(cfg, lr, |g, net, head| {
            let enc = net.encode(g, batch.iter().map(|e| &e.packed))?;
            let out = classify(g, &enc, &batch, head)?;
            cls_loss(g, out, &batch)
        })?;
        losses.push(l);
    }
    Ok(losses)
}

/// Raw head outputs per example, dropout off.
pub fn predict_cls(model: &Model, head: &ParamStore, data: &[ClsExample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let head_vars: Vec<Var> = head.iter().map(|p| g.input(p.value.clone())).collect();
        let net = Net::new(model, &vars)?;
        let batch: Vec<&ClsExample> = chunk.iter().collect();
        let enc = net.encode(&mut g, batch.iter().map(|e| &e.packed))?;
        let y = classify(&mut g, &enc, &batch, &head_vars)?;
        out.extend(g.value(y).to_rows());
    }
    Ok(out)
}

/// Accuracy for classification, mean squared error for regression.
pub fn cls_metric(outputs: &[Vec<f32>], data: &[ClsExample]) -> f64 {
    let n = data.len().max(1) as f64;
    outputs
        .iter()
        .zip(data)
        .map(|(o, e)| match e.target {
            Target::Class(c) => f64::from(u8::from(argmax(o) == c)),
            Target::Value(v) => (f64::from(o[0]) - v).powi(2),
        })
        .sum::<f64>()
        / n
}

// ---------------------------------------------------------------------- QA

/// One JSON-lines QA record. Answer indices count tokens of the context.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct QaRecord {
    pub context: String,
    pub question: String,
    pub answer_start_token: usize,
    pub answer_end_token: usize,
}

pub fn parse_qa_jsonl(text: &str) -> Result<Vec<QaRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SlmError::data(format!("line {}: {e}", i + 1))))
        .collect()
}

pub const QA_HEAD: [&str; 3] = ["head.qa.start", "head.qa.end", "head.qa.sentence"];

pub fn init_qa_head(cfg: &Config) -> ParamStore {
    let mut head = ParamStore::default();
    for name in QA_HEAD {
        head_param(&mut head, name, &[1, cfg.hidden], cfg.init_std, cfg.seed, true);
    }
    head
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaExample {
    pub packed: PackedExample,
    /// Context tokens that survived packing, as text.
    pub tokens: Vec<String>,
    /// Packed row of each context token.
    pub word_rows: Vec<usize>,
    /// Context sentence of each context token.
    pub word_sentence: Vec<usize>,
    /// `[SENT]` row of each context sentence.
    pub sent_rows: Vec<usize>,
    /// Gold (start token, end token, sentence).
    pub gold: (usize, usize, usize),
}

/// Packs question (segment 0) then context sentences (segment 1).
pub fn build_qa_example(vocab: &Vocab, cfg: &Config, rec: &QaRecord) -> Result<QaExample> {
    if !cfg.sentence_reps_enabled {
        return Err(SlmError::contract("the QA head needs sentence tokens"));
    }
    let question = encode_text(vocab, &rec.question);
    let ctx_text: Vec<Vec<String>> = segment_sentences(&rec.context)
        .iter()
        .map(|s| tokenize(s))
        .filter(|t| !t.is_empty())
        .collect();
    if question.is_empty() || ctx_text.is_empty() {
        return Err(SlmError::data("empty question or context"));
    }
    let q_count = question.len();
    let sentences: Vec<(Vec<usize>, usize)> = question
        .into_iter()
        .map(|s| (s, 0))
        .chain(ctx_text.iter().map(|s| (s.iter().map(|t| vocab.id(t)).collect(), 1)))
        .collect();
    let packed = pack_sentences(&sentences, pack_opts(cfg)).ok_or_else(|| SlmError::data("example does not fit"))?;
    let mut ex = QaExample {
        tokens: Vec::new(),
        word_rows: Vec::new(),
        word_sentence: Vec::new(),
        sent_rows: Vec::new(),
        gold: (0, 0, 0),
        packed,
    };
    for (k, span) in ex.packed.spans.iter().enumerate().skip(q_count) {
        let s = k - q_count;
        ex.sent_rows.push(span.sent_token.expect("sentence tokens on"));
        for (j, row) in (span.start..span.end).enumerate() {
            ex.tokens.push(ctx_text[s][j].clone());
            ex.word_rows.push(row);
            ex.word_sentence.push(s);
        }
    }
    let (a, b) = (rec.answer_start_token, rec.answer_end_token);
    if a > b || b >= ex.word_rows.len() {
        return Err(SlmError::data(format!(
            "answer tokens {a}..={b} outside the {} context tokens kept",
            ex.word_rows.len()
        )));
    }
    ex.gold = (a, b, ex.word_sentence[a]);
    Ok(ex)
}

/// Logits of the three pointers for one example.
pub struct QaLogits {
    pub start: Var,
    pub end: Var,
    pub sentence: Var,
}

pub fn qa_logits(g: &mut Graph<f32>, enc: &EncoderOut, b: usize, ex: &QaExample, head: &[Var]) -> Result<QaLogits> {
    let words: Vec<usize> = ex.word_rows.iter().map(|&r| enc.row(b, r)).collect();
    let sents: Vec<usize> = ex.sent_rows.iter().map(|&r| enc.row(b, r)).collect();
    let hw = g.gather_rows(enc.h, &words)?;
    let hs = g.gather_rows(enc.h, &sents)?;
    Ok(QaLogits {
        start: g.matmul_nt(head[0], hw)?,
        end: g.matmul_nt(head[1], hw)?,
        sentence: g.matmul_nt(head[2], hs)?,
    })
}

/// `CE_start + CE_end + CE_sentence` for one example.
pub fn qa_loss(g: &mut Graph<f32>, l: &QaLogits, ex: &QaExample) -> Result<Var> {
    let (s, e, k) = ex.gold;
    let a = g.cross_entropy(l.start, s)?;
    let b = g.cross_entropy(l.end, e)?;
    let c = g.cross_entropy(l.sentence, k)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QaPrediction {
    pub start: usize,
    pub end: usize,
    pub sentence: usize,
}

/// Highest `start + end` score with `start <= end < start + max_len`, plus
/// the argmax sentence.
pub fn best_span(start: &[f32], end: &[f32], sentence: &[f32], max_len: usize) -> QaPrediction {
    let mut best = (0, 0);
    let mut best_score = f32::NEG_INFINITY;
    for (i, &si) in start.iter().enumerate() {
        for (j, &ej) in end.iter().enumerate().skip(i).take(max_len.max(1)) {
            if si + ej > best_score {
                best_score = si + ej;
                best = (i, j);
            }
        }
    }
    QaPrediction {
        start: best.0,
        end: best.1,
        sentence: argmax(sentence),
    }
}

pub fn finetune_qa(ft: &mut FineTune, cfg: &Config, data: &[QaExample]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(SlmError::data("no training examples"));
    }
    let mut losses = Vec::with_capacity(cfg.ft_steps);
    for _ in 0..cfg.ft_steps {
        let batch = batch_at(data, ft.step, cfg.ft_batch_size.min(data.len()));
        let lr = lr_schedule(ft.step as usize + 1, cfg.ft_steps / 10, cfg.ft_steps, cfg.ft_lr);
        let l = ft.update(cfg, lr, |g, net, head| {
            let enc = net.encode(g, batch.iter().map(|e| &e.packed))?;
            let mut total: Option<Var> = None;
            for (b, ex) in batch.iter().enumerate() {
                let logits = qa_logits(g, &enc, b, ex, head)?;
                let l = qa_loss(g, &logits, ex)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            g.scale(total, 1.0 / batch.len() as f32)
        })?;
        losses.push(l);
    }
    Ok(losses)
}

pub fn predict_qa(model: &Model, head: &ParamStore, cfg: &Config, data: &[QaExample]) -> Result<Vec<QaPrediction>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let head_vars: Vec<Var> = head.iter().map(|p| g.input(p.value.clone())).collect();
        let net = Net::new(model, &vars)?;
        let enc = net.encode(&mut g, chunk.iter().map(|e| &e.packed))?;
        for (b, ex) in chunk.iter().enumerate() {
            let l = qa_logits(&mut g, &enc, b, ex, &head_vars)?;
            out.push(best_span(
                g.value(l.start).data(),
                g.value(l.end).data(),
                g.value(l.sentence).data(),
                cfg.max_answer_len,
            ));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QaReport {
    pub exact_match: f64,
    pub sentence_accuracy: f64,
    /// Share of predictions whose span lies inside the predicted sentence.
    pub consistency: f64,
}

pub fn qa_report(preds: &[QaPrediction], data: &[QaExample]) -> QaReport {
    let n = data.len().max(1) as f64;
    let mut r = QaReport::default();
    for (p, ex) in preds.iter().zip(data) {
        r.exact_match += f64::from(u8::from((p.start, p.end) == (ex.gold.0, ex.gold.1)));
        r.sentence_accuracy += f64::from(u8::from(p.sentence == ex.gold.2));
        let inside = ex.word_sentence[p.start] == p.sentence && ex.word_sentence[p.end] == p.sentence;
        r.consistency += f64::from(u8::from(inside));
    }
    r.exact_match /= n;
    r.sentence_accuracy /= n;
    r.consistency /= n;
    r
}
